use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use meshflow_bench::fixture;
use meshflow_core::dyadreg::{design, fit_lmm, LmmConfig};
use meshflow_core::netstats::{betweenness_centrality, eigenvector_centrality};
use meshflow_core::partition::{detect_greedy, detect_walktrap, Partition, PartitionSource, WALKTRAP_STEPS};
use meshflow_core::qap::{qap_test, PairMatrix, QapConfig};

fn centrality(c: &mut Criterion) {
    let mut group = c.benchmark_group("centrality");
    for n in [30, 60] {
        let f = fixture(n, 1);
        group.bench_with_input(BenchmarkId::new("betweenness", n), &f.graph, |b, g| {
            b.iter(|| betweenness_centrality(black_box(g)))
        });
        group.bench_with_input(BenchmarkId::new("eigenvector", n), &f.graph, |b, g| {
            b.iter(|| eigenvector_centrality(black_box(g)).unwrap())
        });
    }
    group.finish();
}

fn communities(c: &mut Criterion) {
    let f = fixture(60, 2);
    c.bench_function("greedy_60", |b| b.iter(|| detect_greedy(black_box(&f.graph)).unwrap()));
    c.bench_function("walktrap_60", |b| {
        b.iter(|| detect_walktrap(black_box(&f.graph), WALKTRAP_STEPS).unwrap())
    });
}

fn qap(c: &mut Criterion) {
    let f = fixture(40, 3);
    let matrix = PairMatrix::from_rescaled(&f.net);
    let labels = Partition::from_labels(
        matrix.countries().to_vec(),
        &f.world.civilization_labels(),
        PartitionSource::Civilization,
    )
    .unwrap();
    let cfg = QapConfig {
        permutations: 1000,
        ..QapConfig::default()
    };
    c.bench_function("qap_40_1000", |b| b.iter(|| qap_test(black_box(&matrix), &labels, &cfg).unwrap()));
}

fn lmm(c: &mut Criterion) {
    let f = fixture(50, 4);
    let data = design(&f.dyads, &["common_civilization", "ln_distance", "mean_gdp"]).unwrap();
    let mut group = c.benchmark_group("lmm_50");
    group.sample_size(10);
    for (name, cfg) in [
        ("ml", LmmConfig::default()),
        (
            "reml_shared",
            LmmConfig {
                reml: true,
                shared_country_effect: true,
            },
        ),
    ] {
        group.bench_function(name, |b| b.iter(|| fit_lmm(black_box(&data), &cfg).unwrap()));
    }
    group.finish();
}

criterion_group!(benches, centrality, communities, qap, lmm);
criterion_main!(benches);
