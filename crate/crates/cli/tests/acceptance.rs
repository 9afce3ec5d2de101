//! Acceptance suite: one pass/fail line per criterion.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{self, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use meshflow_core::dyadreg::{density_multiplier, fit_lmm, LmmConfig, LmmData, INTERCEPT};
use meshflow_core::geo::{haversine_km, GeoPoint, EARTH_RADIUS_KM};
use meshflow_core::ingest::{CountryMeta, CountryRegistry, EventRecord, GeoTable, Location, RegistryConfig};
use meshflow_core::netstats::{betweenness_centrality, eigenvector_centrality, weighted_degrees, WeightedCountryGraph};
use meshflow_core::ols::fit_ols;
use meshflow_core::partition::{
    chi_square, detect_greedy, detect_spinglass, detect_walktrap, pair_counts, rand_indices, CrossTab, Partition,
    PartitionSource, SpinglassConfig, WALKTRAP_STEPS,
};
use meshflow_core::qap::{qap_test, AbsentCells, PairMatrix, QapConfig};
use meshflow_core::residence::{
    build_spells, infer_all, validate_transitions, ResidenceConfig, ResidenceReason, ResolvedEvent, SECONDS_PER_DAY,
};
use meshflow_core::synth::{
    density_correlations, generate_world, planted_recovery_report, rescale_world, sample_world, RecoveryOptions,
    WorldSpec,
};
use meshflow_core::{Civilization, CountryCode};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl Into<String>) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within_time(start: Instant, limit: Duration) -> Result<(), String> {
    let t = start.elapsed();
    check(t <= limit, format!("took {t:.1?}, limit {limit:?}"))
}

fn codes(n: usize) -> Vec<CountryCode> {
    (0..n).map(CountryCode::from_index).collect()
}

fn arithmetic() -> Outcome {
    let in_range = |x: f64, lo: f64, hi: f64| (lo..=hi).contains(&x);
    check(in_range(11.36f64.exp(), 85_000.0, 87_000.0), format!("e^11.36 = {}", 11.36f64.exp()))?;
    check(in_range(29.36f64.exp(), 5.5e12, 5.8e12), format!("e^29.36 = {}", 29.36f64.exp()))?;
    check((18f64.exp() / 6.6e7 - 1.0).abs() < 0.01, format!("e^18 = {}", 18f64.exp()))?;

    let n = 141;
    let a = Partition::new(codes(n), &(0..n).map(|v| v % 8).collect::<Vec<_>>(), PartitionSource::External)
        .map_err(|e| e.to_string())?;
    let b = Partition::new(codes(n), &(0..n).map(|v| v % 5).collect::<Vec<_>>(), PartitionSource::External)
        .map_err(|e| e.to_string())?;
    let pc = pair_counts(&a, &b).map_err(|e| e.to_string())?;
    let pairs = pc.both + pc.only_a + pc.only_b + pc.neither;
    check(pairs == 9870, format!("pair count for 141 countries is {pairs}"))?;

    let m1 = density_multiplier(0.663);
    let m2 = density_multiplier(1.281);
    check((m1 - 1.941).abs() <= 0.001, format!("multiplier(0.663) = {m1}"))?;
    check((m2 - 3.60).abs() <= 0.01, format!("multiplier(1.281) = {m2}"))?;

    for (rows, cols, want) in [(8, 4, 21), (8, 8, 49), (8, 3, 14)] {
        let tab = CrossTab {
            row_labels: (0..rows).map(|r| format!("r{r}")).collect(),
            col_labels: (0..cols).map(|c| format!("c{c}")).collect(),
            counts: (0..rows).map(|r| (0..cols).map(|c| 1 + ((r * 3 + c * 5) % 7) as u64).collect()).collect(),
        };
        let df = chi_square(&tab).map_err(|e| e.to_string())?.df;
        check(df == want, format!("{rows}x{cols} table has {df} df, want {want}"))?;
    }
    Ok(format!("e^11.36 = {:.0}, multipliers {m1:.4} and {m2:.4}", 11.36f64.exp()))
}

fn ols_oracle() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut worst: f64 = 0.0;
    for _ in 0..200 {
        let p = rng.random_range(1..=12);
        let n = rng.random_range(p + 5..=1000);
        let x = DMatrix::from_fn(n, p, |_, c| if c == 0 { 1.0 } else { normal.sample(&mut rng) * (c as f64) });
        let beta = DVector::from_fn(p, |_, _| rng.random_range(-3.0..3.0));
        let y = &x * &beta + DVector::from_fn(n, |_, _| normal.sample(&mut rng));
        let names: Vec<String> = (0..p).map(|k| format!("x{k}")).collect();
        let fit = fit_ols(&x, &y, &names).map_err(|e| e.to_string())?;
        let xtx = x.transpose() * &x;
        let want = xtx.cholesky().ok_or("normal equations not positive definite")?.solve(&(x.transpose() * &y));
        for (a, b) in fit.coefficients.iter().zip(want.iter()) {
            worst = worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    check(worst <= 1e-8, format!("max deviation {worst:e}"))?;
    within_time(start, Duration::from_secs(10))?;
    Ok(format!("200 fits, max deviation {worst:.1e}"))
}

fn census_fixed_point() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for seed in 1..=5 {
        let spec = WorldSpec {
            coverage_min: 1.0,
            coverage_max: 1.0,
            seed,
            ..WorldSpec::default()
        };
        let world = generate_world(&spec).map_err(|e| e.to_string())?;
        let marked = sample_world(&world).map_err(|e| e.to_string())?;
        check(marked.iter().all(|m| *m), "full coverage left users unobserved")?;
        let (observed, net) = rescale_world(&world, &marked, 1).map_err(|e| e.to_string())?;
        for p in net.pairs() {
            let (i, j) = (observed.index_of(p.i).unwrap(), observed.index_of(p.j).unwrap());
            let ln_t = (observed.ties(i, j) as f64).ln();
            worst = worst.max((p.ln_t_prime - observed.log_density(i, j).unwrap()).abs());
            worst = worst.max((p.t_prime.ln() - ln_t).abs());
            pairs += 1;
        }
    }
    check(worst <= 1e-9, format!("max deviation {worst:e}"))?;
    Ok(format!("{pairs} pairs over 5 worlds, max deviation {worst:.1e}"))
}

fn rescaling_improves_recovery() -> Outcome {
    let start = Instant::now();
    let results: Vec<Result<(f64, f64), String>> = (1..=20u64)
        .into_par_iter()
        .map(|seed| {
            let world = generate_world(&WorldSpec {
                n_countries: 30,
                seed,
                ..WorldSpec::default()
            })
            .map_err(|e| e.to_string())?;
            let marked = sample_world(&world).map_err(|e| e.to_string())?;
            let (observed, net) = rescale_world(&world, &marked, 1).map_err(|e| e.to_string())?;
            let (raw, resc, _) = density_correlations(&world, &observed, &net).map_err(|e| e.to_string())?;
            Ok((raw, resc))
        })
        .collect();
    let results = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    let better = results.iter().filter(|(raw, resc)| resc > raw).count();
    check(better >= 16, format!("rescaled correlation higher in {better}/20 worlds"))?;
    within_time(start, Duration::from_secs(120))?;
    Ok(format!("rescaled correlation higher in {better}/20 worlds"))
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, density: f64, integer: bool) -> WeightedCountryGraph {
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(density) {
                let w = if integer { rng.random_range(1..4) as f64 } else { rng.random_range(0.1..10.0) };
                edges.push((i, j, w));
            }
        }
    }
    WeightedCountryGraph::from_edges(n, &edges).unwrap()
}

fn dense_eigenvector(g: &WeightedCountryGraph) -> Vec<f64> {
    let comp = g.components().into_iter().next().unwrap();
    let m = comp.len();
    let a = DMatrix::from_fn(m, m, |r, c| g.weight_or_zero(comp[r], comp[c]));
    let eig = SymmetricEigen::new(a);
    let k = eig.eigenvalues.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let v = eig.eigenvectors.column(k);
    let sign = if v.sum() < 0.0 { -1.0 } else { 1.0 };
    let mut out = vec![0.0; g.n()];
    for (r, &i) in comp.iter().enumerate() {
        out[i] = sign * v[r] / v.norm();
    }
    out
}

/// Enumerates every simple path between each pair and credits the inner
/// nodes of the shortest ones.
fn brute_betweenness(g: &WeightedCountryGraph) -> Vec<f64> {
    let n = g.n();
    let w_max = g.edges().iter().map(|e| e.2).fold(0.0, f64::max);
    let len = |a: usize, b: usize| g.weight(a, b).map(|w| (w_max + 1e-9) - w);
    let mut out = vec![0.0; n];
    for s in 0..n {
        for t in s + 1..n {
            let mut paths: Vec<(f64, Vec<usize>)> = Vec::new();
            let mut stack = vec![(s, 0.0, vec![s])];
            while let Some((v, d, path)) = stack.pop() {
                if v == t {
                    paths.push((d, path));
                    continue;
                }
                for u in 0..n {
                    if let Some(l) = len(v, u) {
                        if !path.contains(&u) {
                            let mut p = path.clone();
                            p.push(u);
                            stack.push((u, d + l, p));
                        }
                    }
                }
            }
            let Some(best) = paths.iter().map(|p| p.0).min_by(f64::total_cmp) else {
                continue;
            };
            let shortest: Vec<&Vec<usize>> = paths
                .iter()
                .filter(|p| (p.0 - best).abs() <= 1e-12 * best.max(1.0))
                .map(|p| &p.1)
                .collect();
            let count = shortest.len() as f64;
            for p in shortest {
                for &v in &p[1..p.len() - 1] {
                    out[v] += 1.0 / count;
                }
            }
        }
    }
    out
}

fn centrality_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let (mut eig_worst, mut btw_worst, mut hs_worst): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..200 {
        let n = rng.random_range(2..=12);
        let g = random_graph(&mut rng, n, 0.6, false);
        if g.edges().is_empty() {
            continue;
        }
        let got = eigenvector_centrality(&g).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(dense_eigenvector(&g)) {
            eig_worst = eig_worst.max((a - b).abs());
        }
    }
    for k in 0..200 {
        let n = rng.random_range(2..=8);
        let g = random_graph(&mut rng, n, 0.5, k % 2 == 0);
        for (a, b) in betweenness_centrality(&g).iter().zip(brute_betweenness(&g)) {
            btw_worst = btw_worst.max((a - b).abs() / b.abs().max(1.0));
        }
    }
    for _ in 0..200 {
        let n = rng.random_range(2..=30);
        let g = random_graph(&mut rng, n, 0.4, false);
        let total: f64 = weighted_degrees(&g).iter().sum();
        hs_worst = hs_worst.max((total - 2.0 * g.total_weight()).abs() / total.max(1.0));
    }
    check(eig_worst <= 1e-8, format!("eigenvector deviation {eig_worst:e}"))?;
    check(btw_worst <= 1e-9, format!("betweenness deviation {btw_worst:e}"))?;
    check(hs_worst <= 1e-12, format!("handshake deviation {hs_worst:e}"))?;
    Ok(format!("eigenvector {eig_worst:.1e}, betweenness {btw_worst:.1e}, handshake {hs_worst:.1e}"))
}

/// Two cliques of `size` joined by one bridge edge.
fn dumbbell(size: usize) -> (WeightedCountryGraph, Vec<usize>) {
    let mut edges = Vec::new();
    for side in 0..2 {
        let off = side * size;
        for i in 0..size {
            for j in i + 1..size {
                edges.push((off + i, off + j, 1.0));
            }
        }
    }
    edges.push((size - 1, size, 1.0));
    let truth = (0..2 * size).map(|v| v / size).collect();
    (WeightedCountryGraph::from_edges(2 * size, &edges).unwrap(), truth)
}

fn planted_blocks(rng: &mut ChaCha8Rng, size: usize) -> (WeightedCountryGraph, Vec<usize>) {
    let n = 4 * size;
    let truth: Vec<usize> = (0..n).map(|v| v / size).collect();
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let same = truth[i] == truth[j];
            if rng.random_bool(if same { 0.8 } else { 0.1 }) {
                let w = if same { rng.random_range(2.0..4.0) } else { rng.random_range(0.1..1.0) };
                edges.push((i, j, w));
            }
        }
    }
    (WeightedCountryGraph::from_edges(n, &edges).unwrap(), truth)
}

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

fn partitions() -> Outcome {
    let external = |raw: &[usize]| Partition::new(codes(raw.len()), raw, PartitionSource::External).unwrap();
    for size in 3..=8 {
        let (g, truth) = dumbbell(size);
        let truth = external(&truth);
        for p in [detect_greedy(&g), detect_walktrap(&g, WALKTRAP_STEPS)] {
            let p = p.map_err(|e| e.to_string())?;
            let ari = rand_indices(&truth, &p).map_err(|e| e.to_string())?.adjusted_rand;
            check(ari == 1.0, format!("{} split a dumbbell of {size} with ARI {ari}", p.source()))?;
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let mut aris: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for seed in 0..20 {
        let (g, truth) = planted_blocks(&mut rng, 10);
        let truth = external(&truth);
        for p in [
            detect_greedy(&g),
            detect_walktrap(&g, WALKTRAP_STEPS),
            detect_spinglass(&g, seed, &SpinglassConfig::default()),
        ] {
            let p = p.map_err(|e| e.to_string())?;
            let ari = rand_indices(&truth, &p).map_err(|e| e.to_string())?.adjusted_rand;
            aris.entry(p.source().as_str()).or_default().push(ari);
        }
    }
    let mut medians = Vec::new();
    for (name, mut v) in aris {
        v.sort_by(f64::total_cmp);
        let median = (v[9] + v[10]) / 2.0;
        check(median >= 0.9, format!("{name} median ARI {median}"))?;
        medians.push(format!("{name} {median:.2}"));
    }

    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let n = rng.random_range(2..=12);
        let a: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let b: Vec<usize> = (0..n).map(|_| rng.random_range(0..4)).collect();
        let ri = rand_indices(&external(&a), &external(&b)).map_err(|e| e.to_string())?;
        let (rand, ari) = rand_oracle(&a, &b);
        worst = worst.max((ri.rand - rand).abs()).max((ri.adjusted_rand - ari).abs());
    }
    check(worst <= 1e-9, format!("Rand/ARI deviation {worst:e}"))?;
    Ok(format!("dumbbells exact, median ARI {}, Rand/ARI deviation {worst:.1e}", medians.join(", ")))
}

fn qap() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(104);
    let random_matrix = |rng: &mut ChaCha8Rng, n: usize| {
        let values: Vec<f64> = (0..n * n).map(|_| rng.random_range(-3.0..3.0)).collect();
        PairMatrix::from_fn(codes(n), |i, j| Some(values[i.min(j) * n + i.max(j)]))
    };
    let random_labels = |rng: &mut ChaCha8Rng, n: usize, k: usize| {
        let mut raw: Vec<usize> = (0..n).map(|v| v % k).collect();
        for v in 0..n {
            raw.swap(v, rng.random_range(0..n));
        }
        Partition::new(codes(n), &raw, PartitionSource::External).unwrap()
    };
    let replicates: Vec<(PairMatrix, Partition, u64)> =
        (0..200).map(|k| (random_matrix(&mut rng, 14), random_labels(&mut rng, 14, 3), k)).collect();
    let ps: Result<Vec<f64>, String> = replicates
        .par_iter()
        .map(|(a, labels, k)| {
            let cfg = QapConfig {
                permutations: 999,
                seed: *k,
                absent_cells: AbsentCells::Zero,
            };
            qap_test(a, labels, &cfg).map(|r| r.p_value).map_err(|e| e.to_string())
        })
        .collect();
    let mut ps = ps?;
    ps.sort_by(f64::total_cmp);
    let m = ps.len() as f64;
    let ks = ps
        .iter()
        .enumerate()
        .map(|(k, &p)| (p - k as f64 / m).abs().max((p - (k + 1) as f64 / m).abs()))
        .fold(0.0, f64::max);
    let critical = 1.628 / m.sqrt();
    check(ks < critical, format!("null KS distance {ks:.4} >= {critical:.4}"))?;

    let planted = planted_recovery_report(
        &WorldSpec {
            civ_bonus: 2f64.ln(),
            ..WorldSpec::default()
        },
        &RecoveryOptions {
            qap_permutations: 10_000,
            spinglass: false,
            lmm: false,
            ..RecoveryOptions::default()
        },
    )
    .map_err(|e| e.to_string())?;
    check(planted.qap_p <= 0.001, format!("planted world p = {}", planted.qap_p))?;

    let a = random_matrix(&mut rng, 20);
    let labels = random_labels(&mut rng, 20, 4);
    let cfg = QapConfig {
        permutations: 2000,
        ..QapConfig::default()
    };
    let parallel = qap_test(&a, &labels, &cfg).map_err(|e| e.to_string())?;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().map_err(|e| e.to_string())?;
    let serial = pool.install(|| qap_test(&a, &labels, &cfg)).map_err(|e| e.to_string())?;
    check(parallel == serial, "serial and parallel runs differ")?;
    within_time(start, Duration::from_secs(300))?;
    Ok(format!(
        "null KS {ks:.4} < {critical:.4}, planted r = {:.3} p = {:.1e}, serial == parallel",
        planted.qap_r, planted.qap_p
    ))
}

/// All pairs of `k` countries with two covariates, crossed country effects
/// and known coefficients.
fn simulated(k: usize, beta: [f64; 3], sd: [f64; 3], rng: &mut ChaCha8Rng) -> LmmData {
    let normal = Normal::new(0.0, 1.0).unwrap();
    let u: Vec<f64> = (0..k).map(|_| sd[0] * normal.sample(rng)).collect();
    let v: Vec<f64> = (0..k).map(|_| sd[1] * normal.sample(rng)).collect();
    let (mut s1, mut s2, mut rows) = (Vec::new(), Vec::new(), Vec::new());
    for i in 0..k {
        for j in i + 1..k {
            let x1 = normal.sample(rng);
            let x2 = if rng.random_bool(0.3) { 1.0 } else { 0.0 };
            let y = beta[0] + beta[1] * x1 + beta[2] * x2 + u[i] + v[j] + sd[2] * normal.sample(rng);
            s1.push(i);
            s2.push(j);
            rows.push((y, x1, x2));
        }
    }
    let n = rows.len();
    let x = DMatrix::from_fn(n, 3, |r, c| [1.0, rows[r].1, rows[r].2][c]);
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.0));
    LmmData::new(y, x, vec![INTERCEPT.into(), "x1".into(), "x2".into()], s1, s2).unwrap()
}

fn mixed_model() -> Outcome {
    let start = Instant::now();
    let beta = [0.5, 1.0, -0.5];
    let cfg = LmmConfig {
        reml: false,
        shared_country_effect: false,
    };
    let reps = 200;
    let estimates: Result<Vec<Vec<f64>>, String> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = ChaCha8Rng::seed_from_u64(1000 + rep);
            let data = simulated(50, beta, [0.6, 0.6, 1.0], &mut rng);
            if data.n() != 1225 {
                return Err(format!("{} dyads", data.n()));
            }
            let fit = fit_lmm(&data, &cfg).map_err(|e| e.to_string())?;
            Ok(fit.coefficients.iter().map(|c| c.estimate).collect())
        })
        .collect();
    let estimates = estimates?;
    let mut gaps = Vec::new();
    for (j, b) in beta.iter().enumerate() {
        let v: Vec<f64> = estimates.iter().map(|e| e[j]).collect();
        let mean = v.iter().sum::<f64>() / reps as f64;
        let sd = (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
        let se = sd / (reps as f64).sqrt();
        let z = (mean - b) / se;
        check(z.abs() <= 2.0, format!("coefficient {j}: mean {mean:.4} vs {b}, {z:.2} MC SE"))?;
        gaps.push(format!("{z:+.2}"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(105);
    let beta_true = DVector::from_vec(vec![0.5, 1.0, -1.0]);
    let mut data = simulated(14, [0.5, 1.0, -1.0], [0.0, 0.0, 1.0], &mut rng);
    let (n, k) = (data.n(), data.n_countries);
    let mut cols = data.x.clone().resize_horizontally(3 + 2 * k, 0.0);
    for r in 0..n {
        cols[(r, 3 + data.slot1[r])] = 1.0;
        cols[(r, 3 + k + data.slot2[r])] = 1.0;
    }
    let fitted = &data.x * &beta_true;
    let noise = &data.y - &fitted;
    let svd = cols.svd(true, false);
    let rank = svd.singular_values.iter().filter(|s| **s > 1e-9).count();
    let u = svd.u.ok_or("SVD without U")?;
    let basis = u.columns(0, rank);
    data.y = fitted + (&noise - &basis * (basis.transpose() * &noise));
    let fit = fit_lmm(&data, &cfg).map_err(|e| e.to_string())?;
    let ols = (data.x.transpose() * &data.x)
        .cholesky()
        .ok_or("normal equations not positive definite")?
        .solve(&(data.x.transpose() * &data.y));
    let dev = fit.coefficients.iter().zip(ols.iter()).map(|(c, o)| (c.estimate - o).abs()).fold(0.0, f64::max);
    check(fit.theta.iter().all(|t| *t == 0.0), format!("theta {:?} with no country variance", fit.theta))?;
    check(dev <= 1e-6, format!("OLS deviation {dev:e}"))?;
    within_time(start, Duration::from_secs(600))?;
    Ok(format!("{reps} reps, bias in MC SE [{}], OLS deviation {dev:.1e}", gaps.join(", ")))
}

fn residence_boundaries() -> Outcome {
    let code = |s: &str| CountryCode::new(s).unwrap();
    let meta = |c: &str, lon: f64| CountryMeta {
        code: code(c),
        name: c.to_string(),
        population: 5e6,
        civilization: Civilization::Western,
        gdp_per_capita: None,
        hofstede: None,
        gen_trust: None,
        languages: Default::default(),
        region: None,
        eea_member: false,
        centroid: GeoPoint::new(0.0, lon).unwrap(),
        excluded: false,
    };
    let registry = CountryRegistry::from_countries(vec![meta("AA", 0.0), meta("BB", 40.0)], &RegistryConfig::default())
        .map_err(|e| e.to_string())?;
    let geo = GeoTable::new(Vec::new()).map_err(|e| e.to_string())?;
    let cfg = ResidenceConfig {
        min_country_users: 1,
        ..ResidenceConfig::default()
    };
    let at = |user: &str, day: f64| {
        EventRecord::new(
            user,
            day * SECONDS_PER_DAY,
            Location::Coordinates {
                point: GeoPoint::new(0.0, 0.0).unwrap(),
                country: code("AA"),
            },
        )
        .unwrap()
    };
    for (days, accepted) in [(90.0, true), (89.999, false)] {
        let reports = BTreeMap::from([("u".to_string(), code("AA"))]);
        let out = infer_all(vec![at("u", 0.0), at("u", days)], &geo, &registry, &reports, &cfg);
        let r = &out.results[0];
        check(r.accepted == accepted, format!("{days} days: accepted = {}", r.accepted))?;
        if !accepted {
            check(r.reason == ResidenceReason::Below90Days, format!("{days} days: reason {:?}", r.reason))?;
        }
    }

    let km = 1000.0;
    let a = GeoPoint::new(0.0, 0.0).unwrap();
    let b = GeoPoint::new(0.0, (km / EARTH_RADIUS_KM).to_degrees()).unwrap();
    let d = haversine_km(a, b);
    let elapsed = d / 1000.0 * 3600.0;
    let events = [
        ResolvedEvent {
            timestamp: 0.0,
            country: code("AA"),
            point: Some(a),
        },
        ResolvedEvent {
            timestamp: elapsed,
            country: code("BB"),
            point: Some(b),
        },
    ];
    let limit = d / (elapsed / 3600.0);
    let mut at_limit = build_spells("u", &events);
    validate_transitions(&mut at_limit, limit, |_| None);
    check(at_limit.iter().all(|s| s.valid), "crossing exactly at the speed limit is invalid")?;
    let mut above = build_spells("u", &events);
    validate_transitions(&mut above, limit - 1e-9, |_| None);
    check(above.iter().all(|s| !s.valid), "crossing above the speed limit is valid")?;
    Ok(format!("90 days accepted, 89.999 rejected, {limit:.6} km/h valid at the limit"))
}

fn meshflow(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_meshflow"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    check(
        out.status.success(),
        format!("meshflow {} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)),
    )
}

fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let world = tmp.path().join("world");
    let world_str = world.to_str().ok_or("non-utf-8 temp path")?;
    meshflow(&["synth", "--out", world_str])?;
    let cfg = world.join("pipeline.toml");
    let cfg_str = cfg.to_str().ok_or("non-utf-8 temp path")?;
    meshflow(&["all", "--config", cfg_str])?;
    let first = snapshot(&world.join("out"));
    meshflow(&["all", "--config", cfg_str])?;
    let second = snapshot(&world.join("out"));
    check(first.len() >= 20, format!("only {} artifacts written", first.len()))?;
    let differing: Vec<String> = first
        .iter()
        .filter(|(p, b)| second.get(*p) != Some(b))
        .map(|(p, _)| p.display().to_string())
        .collect();
    check(differing.is_empty() && first.len() == second.len(), format!("reruns differ: {differing:?}"))?;
    Ok(format!("{} artifacts byte-identical across reruns", first.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("arithmetic identities", arithmetic),
        ("OLS against normal equations", ols_oracle),
        ("census rescaling fixed point", census_fixed_point),
        ("rescaling improves density recovery", rescaling_improves_recovery),
        ("centrality oracles", centrality_oracles),
        ("community detection and partition agreement", partitions),
        ("QAP calibration, power and determinism", qap),
        ("mixed model recovery and OLS reduction", mixed_model),
        ("residence boundaries", residence_boundaries),
        ("end-to-end reproducibility", end_to_end),
    ];
    panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (k, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = panic::catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let t = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}; {t:.2?})", k + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({detail}; {t:.2?})", k + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
