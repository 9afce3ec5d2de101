//! Pipeline stages. Each stage reads its inputs and upstream artifacts,
//! computes everything in memory and hands the files to [`OutDir::commit`].

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use meshflow_core::densities::{collapse_to_countries, read_densities_csv, reciprocal_graph, write_densities_csv, GraphStats};
use meshflow_core::dyadreg::{
    build_dyad_table, design, fit_civilization_dummies, fit_lmm, fit_one_variable_suite, DyadDataset, LmmFit,
};
use meshflow_core::ingest::{
    load_country_table, load_dyads, load_edges, load_geodb, load_self_reports, parse_event_log, CountryRegistry,
    ParseStats,
};
use meshflow_core::netstats::{
    centrality_report, edge_values, group_mean_centrality, layout, to_dot, to_graphml, top_k_edges, EdgeKey,
};
use meshflow_core::partition::{
    compare_with_reference, detect_greedy, detect_spinglass, detect_walktrap, modularity, Partition,
    PartitionComparison, PartitionSource, WALKTRAP_STEPS,
};
use meshflow_core::qap::{qap_test, PairMatrix, QapResult};
use meshflow_core::rescale::{build_design, fit_rescale_model, read_rescaled_csv, rescale, write_rescaled_csv};
use meshflow_core::residence::{infer_all, read_residence_map, write_residence_csv};
use meshflow_core::{CountryCode, RescaledNetwork, WeightedCountryGraph};
use serde::Serialize;

use crate::artifacts::{file_digest, to_csv, to_json, FileDigest, Manifest, OutDir, StageOutput};
use crate::config::ResolvedConfig;
use crate::error::{CliError, StageContext};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Ingest,
    Residence,
    Densities,
    Rescale,
    Stats,
    Communities,
    Qap,
    Regress,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Input {
    Events,
    Edges,
    Geodb,
    Countries,
    Dyads,
    Profiles,
}

impl Input {
    pub fn name(self) -> &'static str {
        match self {
            Input::Events => "events",
            Input::Edges => "edges",
            Input::Geodb => "geodb",
            Input::Countries => "countries",
            Input::Dyads => "dyads",
            Input::Profiles => "profiles",
        }
    }
}

pub const INGEST_REPORT: &str = "ingest.json";
pub const RESIDENCE_CSV: &str = "residence.csv";
pub const DENSITIES_CSV: &str = "densities.csv";
pub const RESCALED_CSV: &str = "rescaled.csv";

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Ingest,
        Stage::Residence,
        Stage::Densities,
        Stage::Rescale,
        Stage::Stats,
        Stage::Communities,
        Stage::Qap,
        Stage::Regress,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Ingest => "ingest",
            Stage::Residence => "residence",
            Stage::Densities => "densities",
            Stage::Rescale => "rescale",
            Stage::Stats => "stats",
            Stage::Communities => "communities",
            Stage::Qap => "qap",
            Stage::Regress => "regress",
        }
    }

    /// Input files the stage reads.
    pub fn inputs(self) -> &'static [Input] {
        use Input::*;
        match self {
            Stage::Ingest => &[Events, Edges, Geodb, Countries, Dyads, Profiles],
            Stage::Residence => &[Events, Geodb, Countries, Profiles],
            Stage::Densities => &[Edges, Countries],
            Stage::Rescale | Stage::Stats | Stage::Communities | Stage::Qap => &[Countries],
            Stage::Regress => &[Countries, Dyads],
        }
    }

    /// Upstream artifact and the stage that writes it.
    pub fn requires(self) -> Option<(&'static str, Stage)> {
        match self {
            Stage::Ingest => None,
            Stage::Residence => Some((INGEST_REPORT, Stage::Ingest)),
            Stage::Densities => Some((RESIDENCE_CSV, Stage::Residence)),
            Stage::Rescale => Some((DENSITIES_CSV, Stage::Densities)),
            Stage::Stats | Stage::Communities | Stage::Qap | Stage::Regress => Some((RESCALED_CSV, Stage::Rescale)),
        }
    }
}

pub struct Pipeline {
    pub cfg: ResolvedConfig,
    pub out: OutDir,
    config_sha256: String,
}

impl Pipeline {
    pub fn new(cfg: ResolvedConfig) -> Self {
        let out = OutDir::new(cfg.out_dir());
        let config_sha256 = cfg.config.digest();
        Pipeline { cfg, out, config_sha256 }
    }

    /// Input path as written in the config.
    fn configured(&self, input: Input) -> &Path {
        let i = &self.cfg.config.inputs;
        match input {
            Input::Events => &i.events,
            Input::Edges => &i.edges,
            Input::Geodb => &i.geodb,
            Input::Countries => &i.countries,
            Input::Dyads => &i.dyads,
            Input::Profiles => &i.profiles,
        }
    }

    pub fn input_path(&self, input: Input) -> PathBuf {
        self.cfg.resolve(self.configured(input))
    }

    /// Fails with a config error when an input file of any of `stages` is
    /// missing.
    pub fn check_inputs(&self, stages: &[Stage]) -> Result<(), CliError> {
        for s in stages {
            for &input in s.inputs() {
                let p = self.input_path(input);
                if !p.is_file() {
                    return Err(CliError::Config(format!(
                        "inputs.{} = {} does not exist",
                        input.name(),
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn run(&self, stage: Stage) -> Result<Manifest, CliError> {
        let upstream = match stage.requires() {
            Some((name, producer)) => Some(self.out.require(name, producer.name())?),
            None => None,
        };
        log::info!("running {}", stage.name());
        let output = match stage {
            Stage::Ingest => self.ingest(),
            Stage::Residence => self.residence(),
            Stage::Densities => self.densities(),
            Stage::Rescale => self.rescale(),
            Stage::Stats => self.stats(),
            Stage::Communities => self.communities(),
            Stage::Qap => self.qap(),
            Stage::Regress => self.regress(),
        }?;
        let inputs = stage
            .inputs()
            .iter()
            .map(|&i| {
                Ok(FileDigest {
                    path: self.configured(i).display().to_string(),
                    sha256: file_digest(&self.input_path(i))?,
                })
            })
            .collect::<Result<Vec<_>, CliError>>()?;
        let artifacts_read = match (stage.requires(), upstream) {
            (Some((name, _)), Some(p)) => vec![FileDigest {
                path: name.to_string(),
                sha256: file_digest(&p)?,
            }],
            _ => Vec::new(),
        };
        let manifest = self.out.commit(stage.name(), &self.config_sha256, inputs, artifacts_read, output)?;
        log::info!("{} wrote {} files to {}", stage.name(), manifest.outputs.len(), self.out.root().display());
        Ok(manifest)
    }

    fn registry(&self, stage: &'static str) -> Result<CountryRegistry, CliError> {
        load_country_table(&self.input_path(Input::Countries), &self.cfg.config.registry_config()).stage(stage)
    }

    fn rescaled(&self, stage: &'static str) -> Result<RescaledNetwork, CliError> {
        let p = self.out.path(RESCALED_CSV);
        read_rescaled_csv(open(&p)?, None).stage(stage)
    }

    fn civilization_partition(
        &self,
        countries: &[CountryCode],
        registry: &CountryRegistry,
        stage: &'static str,
    ) -> Result<Partition, CliError> {
        Partition::from_labels(countries.to_vec(), &registry.civilizations(), PartitionSource::Civilization).stage(stage)
    }

    fn ingest(&self) -> Result<StageOutput, CliError> {
        const S: &str = "ingest";
        let c = &self.cfg.config;
        let events_path = self.input_path(Input::Events);
        let (events, event_stats) = parse_event_log(&events_path, c.parse_options(&events_path)).stage(S)?;
        let edges_path = self.input_path(Input::Edges);
        let (edges, edge_stats) = load_edges(&edges_path, c.parse_options(&edges_path)).stage(S)?;
        let geodb = load_geodb(&self.input_path(Input::Geodb)).stage(S)?;
        let registry = self.registry(S)?;
        let dyads = load_dyads(&self.input_path(Input::Dyads)).stage(S)?;
        let reports = load_self_reports(&self.input_path(Input::Profiles)).stage(S)?;
        let users: BTreeSet<&str> = events.iter().map(|e| e.user_id.as_str()).collect();
        let senders: BTreeSet<&str> = edges.iter().map(|e| e.sender.as_str()).collect();
        let report = IngestReport {
            events: event_stats,
            event_users: users.len(),
            edges: edge_stats,
            edge_senders: senders.len(),
            geodb_ranges: geodb.len(),
            countries: registry.len(),
            countries_included: registry.included().count(),
            countries_complete_covariates: registry.included().filter(|m| m.has_complete_covariates()).count(),
            dyads: dyads.len(),
            self_reports: reports.len(),
        };
        let mut out = StageOutput::default();
        out.add(INGEST_REPORT, to_json(&report));
        Ok(out)
    }

    fn residence(&self) -> Result<StageOutput, CliError> {
        const S: &str = "residence";
        let c = &self.cfg.config;
        let events_path = self.input_path(Input::Events);
        let (events, _) = parse_event_log(&events_path, c.parse_options(&events_path)).stage(S)?;
        let geodb = load_geodb(&self.input_path(Input::Geodb)).stage(S)?;
        let registry = self.registry(S)?;
        let reports = load_self_reports(&self.input_path(Input::Profiles)).stage(S)?;
        let outcome = infer_all(events, &geodb, &registry, &reports, &c.residence_config());
        let mut reasons: BTreeMap<&'static str, usize> = BTreeMap::new();
        for r in &outcome.results {
            *reasons.entry(r.reason.as_str()).or_default() += 1;
        }
        let accepted = outcome.results.iter().filter(|r| r.accepted).count();
        let summary = ResidenceSummary {
            users: outcome.results.len(),
            accepted,
            reasons,
            unresolved_events: outcome.unresolved_events,
            accepted_per_country: outcome.accepted_per_country.clone(),
            retained_countries: outcome.retained.iter().copied().collect(),
            retained_users: outcome.residence_map().len(),
        };
        let mut csv = Vec::new();
        write_residence_csv(&mut csv, &outcome).stage(S)?;
        let mut out = StageOutput::default();
        out.add(RESIDENCE_CSV, csv);
        out.add("residence_summary.json", to_json(&summary));
        Ok(out)
    }

    fn densities(&self) -> Result<StageOutput, CliError> {
        const S: &str = "densities";
        let c = &self.cfg.config;
        let residence = read_residence_map(open(&self.out.path(RESIDENCE_CSV))?).stage(S)?;
        let edges_path = self.input_path(Input::Edges);
        let (edges, edge_stats) = load_edges(&edges_path, c.parse_options(&edges_path)).stage(S)?;
        let registry = self.registry(S)?;
        let graph = reciprocal_graph(&edges, |u| residence.contains_key(u));
        let dm = collapse_to_countries(&graph, &residence, &registry.populations(), c.densities.edge_floor).stage(S)?;
        let summary = DensitySummary {
            edge_records: edge_stats.yielded,
            graph_users: graph.users.len(),
            graph_edges: graph.edges.len(),
            graph: graph.stats.clone(),
            countries: (0..dm.n())
                .map(|i| CountrySummary {
                    country: dm.countries()[i],
                    users: dm.users(i),
                    population: dm.population(i),
                    coverage: dm.coverage(i),
                    mean_degree: dm.mean_degree(i),
                })
                .collect(),
            pairs_present: dm.present_pairs().count(),
            censored_pairs: dm.censored_pairs(),
            total_ties: dm.total_ties(),
        };
        let mut csv = Vec::new();
        write_densities_csv(&mut csv, &dm).stage(S)?;
        let mut out = StageOutput::default();
        out.add(DENSITIES_CSV, csv);
        out.add("densities_summary.json", to_json(&summary));
        Ok(out)
    }

    fn rescale(&self) -> Result<StageOutput, CliError> {
        const S: &str = "rescale";
        let registry = self.registry(S)?;
        let dm = read_densities_csv(open(&self.out.path(DENSITIES_CSV))?, Some(&registry.populations())).stage(S)?;
        let rows = build_design(&dm).stage(S)?;
        let model = fit_rescale_model(&rows).stage(S)?;
        let net = rescale(&dm, &model).stage(S)?;
        let mut csv = Vec::new();
        write_rescaled_csv(&mut csv, &net).stage(S)?;
        let mut out = StageOutput::default();
        out.add("rescale_model.json", to_json(&model));
        out.add(RESCALED_CSV, csv);
        Ok(out)
    }

    fn stats(&self) -> Result<StageOutput, CliError> {
        const S: &str = "stats";
        let c = &self.cfg.config;
        let registry = self.registry(S)?;
        let net = self.rescaled(S)?;
        let g = WeightedCountryGraph::from_rescaled(&net);
        let report = centrality_report(&g).stage(S)?;
        let civs = registry.civilizations();
        let civ_name = |code: &CountryCode| civs.get(code).map(|c| c.to_string()).unwrap_or_default();

        let centrality = to_csv(&["country", "civilization", "degree", "eigenvector", "betweenness"], |w| {
            for r in &report.rows {
                w.write_record([
                    r.country.to_string(),
                    civ_name(&r.country),
                    r.degree.to_string(),
                    r.eigenvector.to_string(),
                    r.betweenness.to_string(),
                ])?;
            }
            Ok(())
        })
        .map_err(meshflow_core::Error::from)
        .stage(S)?;

        let countries = g.countries();
        let column = |f: fn(&meshflow_core::netstats::CentralityRow) -> f64| report.rows.iter().map(f).collect::<Vec<_>>();
        let deg = group_mean_centrality(countries, &column(|r| r.degree), &civs).stage(S)?;
        let eig = group_mean_centrality(countries, &column(|r| r.eigenvector), &civs).stage(S)?;
        let btw = group_mean_centrality(countries, &column(|r| r.betweenness), &civs).stage(S)?;
        let by_civ = to_csv(
            &["civilization", "countries", "mean_degree", "mean_eigenvector", "mean_betweenness"],
            |w| {
                for ((civ, n, d), ((_, _, e), (_, _, b))) in deg.iter().zip(eig.iter().zip(&btw)) {
                    w.write_record([civ.to_string(), n.to_string(), d.to_string(), e.to_string(), b.to_string()])?;
                }
                Ok(())
            },
        )
        .map_err(meshflow_core::Error::from)
        .stage(S)?;

        let mut ranked = Vec::new();
        for (key, label) in [(EdgeKey::RawTPrime, "t_prime"), (EdgeKey::DensityW, "w")] {
            for (rank, e) in top_k_edges(edge_values(&net, key), c.stats.k_top).stage(S)?.into_iter().enumerate() {
                ranked.push((label, rank + 1, e));
            }
        }
        let top = to_csv(&["key", "rank", "country_a", "country_b", "value"], |w| {
            for (label, rank, e) in &ranked {
                w.write_record([label.to_string(), rank.to_string(), e.i.to_string(), e.j.to_string(), e.value.to_string()])?;
            }
            Ok(())
        })
        .map_err(meshflow_core::Error::from)
        .stage(S)?;

        let lay = layout(&g, &c.layout_config());
        let coords = to_csv(&["country", "x", "y"], |w| {
            for (code, (x, y)) in lay.countries.iter().zip(&lay.coords) {
                w.write_record([code.to_string(), x.to_string(), y.to_string()])?;
            }
            Ok(())
        })
        .map_err(meshflow_core::Error::from)
        .stage(S)?;

        let mut out = StageOutput::default();
        out.seeds.insert("layout", c.stats.layout_seed);
        out.add("centrality.csv", centrality);
        out.add("centrality_by_civilization.csv", by_civ);
        out.add("top_edges.csv", top);
        out.add("layout.csv", coords);
        out.add("network.graphml", to_graphml(&g, Some(&lay)).into_bytes());
        out.add("network.dot", to_dot(&g, Some(&lay)).into_bytes());
        Ok(out)
    }

    fn communities(&self) -> Result<StageOutput, CliError> {
        const S: &str = "communities";
        let c = &self.cfg.config;
        let registry = self.registry(S)?;
        let net = self.rescaled(S)?;
        let g = WeightedCountryGraph::from_rescaled(&net);
        let reference = self.civilization_partition(g.countries(), &registry, S)?;
        let detected = [
            detect_greedy(&g).stage(S)?,
            detect_walktrap(&g, WALKTRAP_STEPS).stage(S)?,
            detect_spinglass(&g, c.communities.spinglass_seed, &c.spinglass_config()).stage(S)?,
        ];
        let comparisons = detected
            .iter()
            .map(|p| compare_with_reference(&g, p, &reference))
            .collect::<meshflow_core::Result<Vec<_>>>()
            .stage(S)?;
        let report = PartitionReport {
            reference: PartitionSource::Civilization,
            reference_communities: reference.n_communities(),
            reference_modularity: modularity(&g, reference.assignment()).stage(S)?,
            walktrap_steps: WALKTRAP_STEPS,
            spinglass_seed: c.communities.spinglass_seed,
            comparisons,
        };
        let rows = to_csv(&["country", "method", "community"], |w| {
            for p in std::iter::once(&reference).chain(&detected) {
                for (code, &a) in p.countries().iter().zip(p.assignment()) {
                    w.write_record([code.as_str(), p.source().as_str(), p.labels()[a].as_str()])?;
                }
            }
            Ok(())
        })
        .map_err(meshflow_core::Error::from)
        .stage(S)?;
        let mut out = StageOutput::default();
        out.seeds.insert("spinglass", c.communities.spinglass_seed);
        out.add("partitions.csv", rows);
        out.add("partition_report.json", to_json(&report));
        Ok(out)
    }

    fn qap(&self) -> Result<StageOutput, CliError> {
        const S: &str = "qap";
        let c = &self.cfg.config;
        let registry = self.registry(S)?;
        let net = self.rescaled(S)?;
        let matrix = PairMatrix::from_rescaled(&net);
        let labels = self.civilization_partition(matrix.countries(), &registry, S)?;
        let result = qap_test(&matrix, &labels, &c.qap_config()).stage(S)?;
        let report = QapReport {
            labels: PartitionSource::Civilization,
            countries: matrix.n(),
            result,
        };
        let mut out = StageOutput::default();
        out.seeds.insert("qap", c.qap.seed);
        out.add("qap.json", to_json(&report));
        Ok(out)
    }

    fn regress(&self) -> Result<StageOutput, CliError> {
        const S: &str = "regress";
        let c = &self.cfg.config;
        let registry = self.registry(S)?;
        let dyads = load_dyads(&self.input_path(Input::Dyads)).stage(S)?;
        let net = self.rescaled(S)?;
        let dataset = build_dyad_table(&net, &registry, &dyads, c.regress.impute).stage(S)?;
        let (covariates, constant) = split_constant(&dataset, &c.regress.covariates);
        for name in &constant {
            log::warn!("covariate `{name}` is constant over the dyads and is left out");
        }
        if covariates.is_empty() {
            return Err(CliError::Stage {
                stage: S,
                source: meshflow_core::Error::Invalid("every requested covariate is constant".into()),
            });
        }
        let lmm = c.lmm_config();
        let main = fit_lmm(&design(&dataset, &covariates).stage(S)?, &lmm).stage(S)?;
        let onevar = fit_one_variable_suite(&dataset, &covariates, &lmm).stage(S)?;
        let civ = fit_civilization_dummies(&dataset, &covariates, &lmm).stage(S)?;
        let main_report = LmmReport {
            dyads: dataset.rows.len(),
            countries: dataset.countries.clone(),
            dropped_countries: dataset.dropped_countries.clone(),
            imputed_trade: dataset.imputed_trade,
            missing_dyad_meta: dataset.missing_dyad_meta,
            constant_covariates: constant,
            impute: c.regress.impute,
            fit: main,
        };
        let table = to_csv(
            &["covariate", "estimate", "std_error", "t_value", "p_value", "stars", "aic", "mcfadden_r2"],
            |w| {
                for r in &onevar {
                    w.write_record([
                        r.covariate.clone(),
                        r.estimate.to_string(),
                        r.std_error.to_string(),
                        r.t_value.to_string(),
                        r.p_value.to_string(),
                        r.stars.clone(),
                        r.aic.to_string(),
                        r.mcfadden_r2.to_string(),
                    ])?;
                }
                Ok(())
            },
        )
        .map_err(meshflow_core::Error::from)
        .stage(S)?;
        let mut out = StageOutput::default();
        out.add("lmm_main.json", to_json(&main_report));
        out.add("lmm_onevar.csv", table);
        out.add("lmm_civ.json", to_json(&civ));
        Ok(out)
    }
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path).map(BufReader::new).map_err(|e| CliError::io(path, e))
}

/// Splits requested covariates into those that vary over the dyads and
/// those that do not.
fn split_constant<'a>(dataset: &DyadDataset, names: &'a [String]) -> (Vec<&'a str>, Vec<String>) {
    let mut keep = Vec::new();
    let mut constant = Vec::new();
    for name in names {
        let mut values = dataset.rows.iter().filter_map(|r| r.get(name));
        let first = values.next();
        let varies = first.is_some_and(|f| values.any(|v| v != f));
        if varies {
            keep.push(name.as_str());
        } else {
            constant.push(name.clone());
        }
    }
    (keep, constant)
}

#[derive(Debug, Serialize)]
struct IngestReport {
    events: ParseStats,
    event_users: usize,
    edges: ParseStats,
    edge_senders: usize,
    geodb_ranges: usize,
    countries: usize,
    countries_included: usize,
    countries_complete_covariates: usize,
    dyads: usize,
    self_reports: usize,
}

#[derive(Debug, Serialize)]
struct ResidenceSummary {
    users: usize,
    accepted: usize,
    reasons: BTreeMap<&'static str, usize>,
    unresolved_events: u64,
    accepted_per_country: BTreeMap<CountryCode, usize>,
    retained_countries: Vec<CountryCode>,
    retained_users: usize,
}

#[derive(Debug, Serialize)]
struct CountrySummary {
    country: CountryCode,
    users: u64,
    population: f64,
    coverage: f64,
    mean_degree: f64,
}

#[derive(Debug, Serialize)]
struct DensitySummary {
    edge_records: u64,
    graph_users: usize,
    graph_edges: usize,
    graph: GraphStats,
    countries: Vec<CountrySummary>,
    pairs_present: usize,
    censored_pairs: usize,
    total_ties: u64,
}

#[derive(Debug, Serialize)]
struct PartitionReport {
    reference: PartitionSource,
    reference_communities: usize,
    reference_modularity: f64,
    walktrap_steps: usize,
    spinglass_seed: u64,
    comparisons: Vec<PartitionComparison>,
}

#[derive(Debug, Serialize)]
struct QapReport {
    labels: PartitionSource,
    countries: usize,
    result: QapResult,
}

#[derive(Debug, Serialize)]
struct LmmReport {
    dyads: usize,
    countries: Vec<CountryCode>,
    dropped_countries: Vec<CountryCode>,
    imputed_trade: usize,
    missing_dyad_meta: usize,
    constant_covariates: Vec<String>,
    impute: meshflow_core::dyadreg::Imputation,
    fit: LmmFit,
}
