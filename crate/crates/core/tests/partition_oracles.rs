use meshflow_core::netstats::WeightedCountryGraph;
use meshflow_core::partition::{
    chi_square, cross_tabulate, detect_greedy, detect_spinglass, detect_walktrap, modularity, pair_counts,
    rand_indices, CrossTab, Partition, PartitionSource, SpinglassConfig, WALKTRAP_STEPS,
};
use meshflow_core::CountryCode;
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn codes(n: usize) -> Vec<CountryCode> {
    (0..n).map(CountryCode::from_index).collect()
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> WeightedCountryGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                edges.push((i, j, rng.random_range(0.1..5.0)));
            }
        }
    }
    if edges.is_empty() {
        edges.push((0, 1, 1.0));
    }
    WeightedCountryGraph::from_edges(n, &edges).unwrap()
}

/// Four blocks of `size` with dense strong ties inside and sparse weak ties
/// across.
fn planted_blocks(rng: &mut ChaCha8Rng, size: usize) -> (WeightedCountryGraph, Vec<usize>) {
    let n = 4 * size;
    let truth: Vec<usize> = (0..n).map(|v| v / size).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let same = truth[i] == truth[j];
            let p = if same { 0.8 } else { 0.1 };
            if rng.random_bool(p) {
                let w = if same { rng.random_range(2.0..4.0) } else { rng.random_range(0.1..1.0) };
                edges.push((i, j, w));
            }
        }
    }
    (WeightedCountryGraph::from_edges(n, &edges).unwrap(), truth)
}

/// Modularity from its definition as a double sum over ordered node pairs.
fn modularity_oracle(g: &WeightedCountryGraph, c: &[usize]) -> f64 {
    let n = g.n();
    let k: Vec<f64> = (0..n).map(|i| (0..n).map(|j| g.weight_or_zero(i, j)).sum()).collect();
    let two_m: f64 = k.iter().sum();
    let mut q = 0.0;
    for i in 0..n {
        for j in 0..n {
            if c[i] == c[j] {
                q += g.weight_or_zero(i, j) - k[i] * k[j] / two_m;
            }
        }
    }
    q / two_m
}

/// Rand and ARI by explicit enumeration of pairs and the contingency-table
/// expectation formula.
fn rand_oracle(a: &[usize], b: &[usize]) -> (f64, f64) {
    let n = a.len();
    let (mut agree, mut total) = (0u64, 0u64);
    for i in 0..n {
        for j in i + 1..n {
            total += 1;
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![vec![0f64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1.0;
    }
    let c2 = |x: f64| x * (x - 1.0) / 2.0;
    let index: f64 = table.iter().flatten().map(|&v| c2(v)).sum();
    let sa: f64 = table.iter().map(|r| c2(r.iter().sum())).sum();
    let sb: f64 = (0..kb).map(|c| c2(table.iter().map(|r| r[c]).sum())).sum();
    let expected = sa * sb / c2(n as f64);
    let max = (sa + sb) / 2.0;
    let ari = if max == expected { 1.0 } else { (index - expected) / (max - expected) };
    (agree as f64 / total as f64, ari)
}

fn labels_strategy() -> impl Strategy<Value = (Vec<usize>, Vec<usize>)> {
    (2usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(0usize..5, n),
            prop::collection::vec(0usize..5, n),
        )
    })
}

fn partition(raw: &[usize]) -> Partition {
    Partition::new(codes(raw.len()), raw, PartitionSource::Greedy).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn modularity_matches_definition(seed in any::<u64>(), n in 2usize..25) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.4);
        let c: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let got = modularity(&g, &c).unwrap();
        prop_assert!((got - modularity_oracle(&g, &c)).abs() < 1e-12);
    }

    #[test]
    fn rand_indices_match_enumeration((a, b) in labels_strategy()) {
        let ri = rand_indices(&partition(&a), &partition(&b)).unwrap();
        let (rand, ari) = rand_oracle(&a, &b);
        prop_assert!((ri.rand - rand).abs() < 1e-12);
        prop_assert!((ri.adjusted_rand - ari).abs() < 1e-9, "{} vs {}", ri.adjusted_rand, ari);
    }

    #[test]
    fn rand_indices_are_symmetric((a, b) in labels_strategy()) {
        let ab = rand_indices(&partition(&a), &partition(&b)).unwrap();
        let ba = rand_indices(&partition(&b), &partition(&a)).unwrap();
        prop_assert_eq!(ab, ba);
        let self_ri = rand_indices(&partition(&a), &partition(&a)).unwrap();
        prop_assert_eq!(self_ri.rand, 1.0);
        prop_assert_eq!(self_ri.adjusted_rand, 1.0);
    }

    #[test]
    fn pair_counts_sum_to_all_pairs((a, b) in labels_strategy()) {
        let pc = pair_counts(&partition(&a), &partition(&b)).unwrap();
        let n = a.len() as u64;
        prop_assert_eq!(pc.both + pc.only_a + pc.only_b + pc.neither, n * (n - 1) / 2);
    }

    #[test]
    fn detectors_beat_singletons(seed in any::<u64>(), n in 3usize..30) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = random_graph(&mut rng, n, 0.3);
        let singletons: Vec<usize> = (0..n).collect();
        let q0 = modularity(&g, &singletons).unwrap();
        for p in [detect_greedy(&g).unwrap(), detect_walktrap(&g, WALKTRAP_STEPS).unwrap()] {
            prop_assert_eq!(p.len(), n);
            prop_assert!(modularity(&g, p.assignment()).unwrap() >= q0 - 1e-12);
        }
    }

    #[test]
    fn chi_square_is_permutation_invariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows = rng.random_range(2..5);
        let cols = rng.random_range(2..5);
        let counts: Vec<Vec<u64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(1..20)).collect()).collect();
        let tab = CrossTab {
            row_labels: (0..rows).map(|r| format!("r{r}")).collect(),
            col_labels: (0..cols).map(|c| format!("c{c}")).collect(),
            counts: counts.clone(),
        };
        let mut order: Vec<usize> = (0..rows).collect();
        order.shuffle(&mut rng);
        let mut col_order: Vec<usize> = (0..cols).collect();
        col_order.shuffle(&mut rng);
        let shuffled = CrossTab {
            row_labels: order.iter().map(|r| format!("r{r}")).collect(),
            col_labels: col_order.iter().map(|c| format!("c{c}")).collect(),
            counts: order.iter().map(|&r| col_order.iter().map(|&c| counts[r][c]).collect()).collect(),
        };
        let a = chi_square(&tab).unwrap();
        let b = chi_square(&shuffled).unwrap();
        prop_assert!((a.statistic - b.statistic).abs() < 1e-9 * a.statistic.max(1.0));
        prop_assert_eq!(a.df, (rows - 1) * (cols - 1));
        prop_assert!((0.0..=1.0).contains(&a.p_value));
    }
}

#[test]
fn chi_square_known_table() {
    // [[10, 20], [30, 40]]: expected [[12, 18], [28, 42]].
    let tab = CrossTab {
        row_labels: vec!["a".into(), "b".into()],
        col_labels: vec!["x".into(), "y".into()],
        counts: vec![vec![10, 20], vec![30, 40]],
    };
    let chi = chi_square(&tab).unwrap();
    let want = 4.0 / 12.0 + 4.0 / 18.0 + 4.0 / 28.0 + 4.0 / 42.0;
    assert!((chi.statistic - want).abs() < 1e-12);
    assert_eq!(chi.df, 1);
    // Closed form for one degree of freedom: p = erfc(sqrt(x / 2)).
    let p = statrs::function::erf::erfc((want / 2.0).sqrt());
    assert!((chi.p_value - p).abs() < 1e-9, "{} vs {p}", chi.p_value);
}

#[test]
fn crosstab_margins() {
    let a = partition(&[0, 0, 1, 1, 2]);
    let b = partition(&[0, 1, 1, 1, 1]);
    let tab = cross_tabulate(&a, &b).unwrap();
    assert_eq!(tab.total(), 5);
    assert_eq!(tab.row_sums(), vec![2, 2, 1]);
    assert_eq!(tab.col_sums(), vec![1, 4]);
}

#[test]
fn planted_blocks_are_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..10 {
        let (g, truth) = planted_blocks(&mut rng, 10);
        let truth = partition(&truth);
        for p in [
            detect_greedy(&g).unwrap(),
            detect_walktrap(&g, WALKTRAP_STEPS).unwrap(),
            detect_spinglass(&g, 1, &SpinglassConfig::default()).unwrap(),
        ] {
            let ari = rand_indices(&truth, &p).unwrap().adjusted_rand;
            assert!(ari >= 0.9, "{} gave ARI {ari}", p.source());
        }
    }
}

#[test]
fn spinglass_is_competitive_with_greedy() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut gaps = Vec::new();
    for seed in 0..15 {
        let g = random_graph(&mut rng, 30, 0.2);
        let qg = modularity(&g, detect_greedy(&g).unwrap().assignment()).unwrap();
        let qs = modularity(&g, detect_spinglass(&g, seed, &SpinglassConfig::default()).unwrap().assignment()).unwrap();
        gaps.push(qs - qg);
    }
    gaps.sort_by(f64::total_cmp);
    let median = gaps[gaps.len() / 2];
    assert!(median >= -0.1, "median modularity gap {median}");
}

#[test]
fn spinglass_is_seed_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let g = random_graph(&mut rng, 20, 0.3);
    let cfg = SpinglassConfig::default();
    assert_eq!(detect_spinglass(&g, 4, &cfg).unwrap(), detect_spinglass(&g, 4, &cfg).unwrap());
}
