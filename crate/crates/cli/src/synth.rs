//! `meshflow synth`: writes a synthetic world as pipeline inputs.

use std::path::Path;

use meshflow_core::synth::{generate_world, sample_world, write_inputs, WorldSpec};
use meshflow_core::{Civilization, CountryCode};
use serde::Serialize;

use crate::artifacts::{file_digest, to_json, write_atomic, FileDigest};
use crate::config::PipelineConfig;
use crate::error::{CliError, StageContext};

pub const PIPELINE_FILE: &str = "pipeline.toml";
pub const TRUTH_FILE: &str = "truth.json";

pub fn load_spec(path: Option<&Path>, seed: Option<u64>) -> Result<WorldSpec, CliError> {
    let mut spec = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            toml::from_str(&text).map_err(|e| CliError::Config(e.to_string()))?
        }
        None => WorldSpec::default(),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate().map_err(|e| CliError::Config(e.to_string()))?;
    Ok(spec)
}

/// Pipeline settings suited to a synthetic world: every country passes the
/// registry and user-count filters.
pub fn pipeline_for_synth() -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.registry.min_population = 0.0;
    cfg.registry.exclude.clear();
    cfg.residence.min_country_users = 1;
    cfg
}

#[derive(Debug, Serialize)]
struct TruthCountry {
    country: CountryCode,
    civilization: Civilization,
    coverage: f64,
    users: u64,
    observed_users: usize,
}

#[derive(Debug, Serialize)]
struct Truth {
    spec: WorldSpec,
    countries: Vec<TruthCountry>,
    ties: usize,
    inputs: Vec<FileDigest>,
}

/// Generates the world, writes its inputs, a ground-truth summary and a
/// ready-to-run `pipeline.toml` into `dir`.
pub fn run(spec: &WorldSpec, dir: &Path) -> Result<(), CliError> {
    const S: &str = "synth";
    let world = generate_world(spec).stage(S)?;
    let marked = sample_world(&world).stage(S)?;
    let files = write_inputs(&world, &marked, dir).stage(S)?;
    let mut observed = vec![0usize; world.n()];
    for (u, _) in marked.iter().enumerate().filter(|(_, m)| **m) {
        observed[world.user_country[u]] += 1;
    }
    let mut inputs = Vec::new();
    for p in [&files.events, &files.edges, &files.geodb, &files.countries, &files.dyads, &files.profiles] {
        let name = p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
        inputs.push(FileDigest {
            path: name,
            sha256: file_digest(p)?,
        });
    }
    let truth = Truth {
        spec: spec.clone(),
        countries: (0..world.n())
            .map(|k| TruthCountry {
                country: world.countries[k].code,
                civilization: world.countries[k].civilization,
                coverage: world.coverage[k],
                users: world.population[k],
                observed_users: observed[k],
            })
            .collect(),
        ties: world.edges.len(),
        inputs,
    };
    write_atomic(&dir.join(TRUTH_FILE), &to_json(&truth))?;
    let toml = toml::to_string(&pipeline_for_synth()).expect("config serializes");
    write_atomic(&dir.join(PIPELINE_FILE), toml.as_bytes())?;
    log::info!("synthetic world with {} countries written to {}", world.n(), dir.display());
    Ok(())
}
