//! Shared fixtures for the benchmarks.

use meshflow_core::dyadreg::{build_dyad_table, DyadDataset, Imputation};
use meshflow_core::synth::{generate_world, rescale_world, sample_world, World, WorldSpec};
use meshflow_core::{RescaledNetwork, WeightedCountryGraph};

pub struct Fixture {
    pub world: World,
    pub net: RescaledNetwork,
    pub graph: WeightedCountryGraph,
    pub dyads: DyadDataset,
}

/// A sampled and rescaled synthetic world with `n_countries` countries.
pub fn fixture(n_countries: usize, seed: u64) -> Fixture {
    let spec = WorldSpec {
        n_countries,
        seed,
        ..WorldSpec::default()
    };
    let world = generate_world(&spec).expect("valid spec");
    let marked = sample_world(&world).expect("sample");
    let (_, net) = rescale_world(&world, &marked, 1).expect("rescale");
    let graph = WeightedCountryGraph::from_rescaled(&net);
    let dyads = build_dyad_table(
        &net,
        &world.registry().expect("registry"),
        &world.dyad_table().expect("dyads"),
        Imputation::Mean,
    )
    .expect("dyad table");
    Fixture {
        world,
        net,
        graph,
        dyads,
    }
}
