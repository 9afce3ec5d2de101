//! Pipeline configuration: a TOML file with flag overrides on top.

use std::path::{Path, PathBuf};

use meshflow_core::dyadreg::{covariate_index, Imputation, LmmConfig, COVARIATE_NAMES};
use meshflow_core::ingest::{ParseOptions, RegistryConfig};
use meshflow_core::netstats::LayoutConfig;
use meshflow_core::partition::SpinglassConfig;
use meshflow_core::qap::{AbsentCells, QapConfig};
use meshflow_core::residence::ResidenceConfig;
use meshflow_core::CountryCode;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Output directory, relative to the config file.
    pub out_dir: PathBuf,
    pub inputs: InputsSection,
    pub registry: RegistrySection,
    pub residence: ResidenceSection,
    pub densities: DensitiesSection,
    pub stats: StatsSection,
    pub communities: CommunitiesSection,
    pub qap: QapSection,
    pub regress: RegressSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            out_dir: PathBuf::from("out"),
            inputs: InputsSection::default(),
            registry: RegistrySection::default(),
            residence: ResidenceSection::default(),
            densities: DensitiesSection::default(),
            stats: StatsSection::default(),
            communities: CommunitiesSection::default(),
            qap: QapSection::default(),
            regress: RegressSection::default(),
        }
    }
}

/// Input files, relative to the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputsSection {
    pub events: PathBuf,
    pub edges: PathBuf,
    pub geodb: PathBuf,
    pub countries: PathBuf,
    pub dyads: PathBuf,
    /// Self-reported residence per user.
    pub profiles: PathBuf,
    /// Abort on the first malformed event or edge row.
    pub strict: bool,
}

impl Default for InputsSection {
    fn default() -> Self {
        InputsSection {
            events: "events.csv".into(),
            edges: "edges.csv".into(),
            geodb: "geodb.csv".into(),
            countries: "countries.csv".into(),
            dyads: "dyads.csv".into(),
            profiles: "profiles.csv".into(),
            strict: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegistrySection {
    pub min_population: f64,
    pub exclude: Vec<String>,
}

impl Default for RegistrySection {
    fn default() -> Self {
        let d = RegistryConfig::default();
        RegistrySection {
            min_population: d.min_population,
            exclude: d.exclude.iter().map(|c| c.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResidenceSection {
    pub max_speed_kmh: f64,
    pub min_valid_days: f64,
    pub min_country_users: usize,
}

impl Default for ResidenceSection {
    fn default() -> Self {
        let d = ResidenceConfig::default();
        ResidenceSection {
            max_speed_kmh: d.max_speed_kmh,
            min_valid_days: d.min_valid_days,
            min_country_users: d.min_country_users,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DensitiesSection {
    /// Pairs with fewer ties are treated as absent.
    pub edge_floor: u64,
}

impl Default for DensitiesSection {
    fn default() -> Self {
        DensitiesSection { edge_floor: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsSection {
    pub k_top: usize,
    pub layout_iterations: usize,
    pub layout_seed: u64,
}

impl Default for StatsSection {
    fn default() -> Self {
        let d = LayoutConfig::default();
        StatsSection {
            k_top: 20,
            layout_iterations: d.iterations,
            layout_seed: d.seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommunitiesSection {
    pub spinglass_seed: u64,
    pub spinglass_spins: usize,
    pub spinglass_gamma: f64,
}

impl Default for CommunitiesSection {
    fn default() -> Self {
        let d = SpinglassConfig::default();
        CommunitiesSection {
            spinglass_seed: 1,
            spinglass_spins: d.spins,
            spinglass_gamma: d.gamma,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QapSection {
    pub permutations: usize,
    pub seed: u64,
    pub absent_cells: AbsentCells,
}

impl Default for QapSection {
    fn default() -> Self {
        let d = QapConfig::default();
        QapSection {
            permutations: d.permutations,
            seed: d.seed,
            absent_cells: d.absent_cells,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegressSection {
    pub reml: bool,
    pub shared_country_effect: bool,
    pub impute: Imputation,
    /// Fixed effects of the main model, in order.
    pub covariates: Vec<String>,
}

impl Default for RegressSection {
    fn default() -> Self {
        RegressSection {
            reml: false,
            shared_country_effect: false,
            impute: Imputation::Mean,
            covariates: COVARIATE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Flag values that replace config entries when given.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub strict: bool,
    pub max_speed_kmh: Option<f64>,
    pub min_valid_days: Option<f64>,
    pub min_country_users: Option<usize>,
    pub edge_floor: Option<u64>,
    pub k_top: Option<usize>,
    pub permutations: Option<usize>,
    pub seed: Option<u64>,
    pub reml: bool,
    pub shared_country_effect: bool,
    pub impute: Option<Imputation>,
}

impl PipelineConfig {
    /// Parses config text; absent keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(v) = &o.out_dir {
            self.out_dir = v.clone();
        }
        self.inputs.strict |= o.strict;
        if let Some(v) = o.max_speed_kmh {
            self.residence.max_speed_kmh = v;
        }
        if let Some(v) = o.min_valid_days {
            self.residence.min_valid_days = v;
        }
        if let Some(v) = o.min_country_users {
            self.residence.min_country_users = v;
        }
        if let Some(v) = o.edge_floor {
            self.densities.edge_floor = v;
        }
        if let Some(v) = o.k_top {
            self.stats.k_top = v;
        }
        if let Some(v) = o.permutations {
            self.qap.permutations = v;
        }
        if let Some(v) = o.seed {
            self.qap.seed = v;
        }
        self.regress.reml |= o.reml;
        self.regress.shared_country_effect |= o.shared_country_effect;
        if let Some(v) = o.impute {
            self.regress.impute = v;
        }
    }

    /// Checks every threshold against its domain.
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if !(self.registry.min_population >= 0.0 && self.registry.min_population.is_finite()) {
            return bad(format!("registry.min_population {} must be a nonnegative number", self.registry.min_population));
        }
        for code in &self.registry.exclude {
            if CountryCode::new(code).is_none() {
                return bad(format!("registry.exclude: `{code}` is not a two-letter country code"));
            }
        }
        let r = &self.residence;
        if !(r.max_speed_kmh > 0.0 && r.max_speed_kmh.is_finite()) {
            return bad(format!("residence.max_speed_kmh {} must be positive", r.max_speed_kmh));
        }
        if !(r.min_valid_days >= 0.0 && r.min_valid_days.is_finite()) {
            return bad(format!("residence.min_valid_days {} must be nonnegative", r.min_valid_days));
        }
        if r.min_country_users == 0 {
            return bad("residence.min_country_users must be at least 1".into());
        }
        if self.densities.edge_floor == 0 {
            return bad("densities.edge_floor must be at least 1".into());
        }
        if self.stats.k_top == 0 {
            return bad("stats.k_top must be at least 1".into());
        }
        if self.stats.layout_iterations == 0 {
            return bad("stats.layout_iterations must be at least 1".into());
        }
        let c = &self.communities;
        if c.spinglass_spins < 2 {
            return bad("communities.spinglass_spins must be at least 2".into());
        }
        if !(c.spinglass_gamma > 0.0 && c.spinglass_gamma.is_finite()) {
            return bad(format!("communities.spinglass_gamma {} must be positive", c.spinglass_gamma));
        }
        if self.qap.permutations == 0 {
            return bad("qap.permutations must be at least 1".into());
        }
        if self.regress.covariates.is_empty() {
            return bad("regress.covariates must name at least one covariate".into());
        }
        for (k, name) in self.regress.covariates.iter().enumerate() {
            if covariate_index(name).is_none() {
                return bad(format!(
                    "regress.covariates: unknown covariate `{name}` (known: {})",
                    COVARIATE_NAMES.join(", ")
                ));
            }
            if self.regress.covariates[..k].contains(name) {
                return bad(format!("regress.covariates lists `{name}` twice"));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form of the effective config.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }

    pub fn registry_config(&self) -> RegistryConfig {
        RegistryConfig {
            min_population: self.registry.min_population,
            exclude: self.registry.exclude.iter().filter_map(|c| CountryCode::new(c)).collect(),
        }
    }

    pub fn residence_config(&self) -> ResidenceConfig {
        ResidenceConfig {
            max_speed_kmh: self.residence.max_speed_kmh,
            min_valid_days: self.residence.min_valid_days,
            min_country_users: self.residence.min_country_users,
        }
    }

    pub fn layout_config(&self) -> LayoutConfig {
        LayoutConfig {
            iterations: self.stats.layout_iterations,
            seed: self.stats.layout_seed,
            k_top: LayoutConfig::default().k_top,
        }
    }

    pub fn spinglass_config(&self) -> SpinglassConfig {
        SpinglassConfig {
            spins: self.communities.spinglass_spins,
            gamma: self.communities.spinglass_gamma,
            ..SpinglassConfig::default()
        }
    }

    pub fn qap_config(&self) -> QapConfig {
        QapConfig {
            permutations: self.qap.permutations,
            seed: self.qap.seed,
            absent_cells: self.qap.absent_cells,
        }
    }

    pub fn lmm_config(&self) -> LmmConfig {
        LmmConfig {
            reml: self.regress.reml,
            shared_country_effect: self.regress.shared_country_effect,
        }
    }

    pub fn parse_options(&self, path: &Path) -> ParseOptions {
        ParseOptions {
            strict: self.inputs.strict,
            ..ParseOptions::for_path(path)
        }
    }
}

/// A validated config together with the directory its paths are relative to.
#[derive(Debug, Clone)]
pub struct ResolvedConfig {
    pub config: PipelineConfig,
    pub base_dir: PathBuf,
}

impl ResolvedConfig {
    pub fn load(path: &Path, overrides: &Overrides) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let mut config = PipelineConfig::from_toml(&text)?;
        config.apply(overrides);
        config.validate()?;
        let base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(ResolvedConfig { config, base_dir })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.config.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = PipelineConfig::from_toml("").unwrap();
        assert_eq!(c, PipelineConfig::default());
        c.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(PipelineConfig::from_toml("colour = 1").is_err());
        assert!(PipelineConfig::from_toml("[qap]\npermutation = 10").is_err());
    }

    #[test]
    fn thresholds_are_checked() {
        for text in [
            "[residence]\nmax_speed_kmh = 0",
            "[residence]\nmin_country_users = 0",
            "[densities]\nedge_floor = 0",
            "[qap]\npermutations = 0",
            "[regress]\ncovariates = [\"shoe_size\"]",
            "[regress]\ncovariates = [\"ln_distance\", \"ln_distance\"]",
            "[registry]\nexclude = [\"XYZ\"]",
        ] {
            let c = PipelineConfig::from_toml(text).unwrap();
            assert!(c.validate().is_err(), "{text}");
        }
    }

    #[test]
    fn overrides_replace_config_values() {
        let mut c = PipelineConfig::from_toml("[qap]\npermutations = 10\nseed = 3").unwrap();
        c.apply(&Overrides {
            permutations: Some(99),
            reml: true,
            impute: Some(Imputation::Min),
            ..Overrides::default()
        });
        assert_eq!(c.qap.permutations, 99);
        assert_eq!(c.qap.seed, 3);
        assert!(c.regress.reml);
        assert_eq!(c.regress.impute, Imputation::Min);
    }

    #[test]
    fn digest_tracks_content() {
        let a = PipelineConfig::default();
        let mut b = a.clone();
        assert_eq!(a.digest(), b.digest());
        b.qap.seed += 1;
        assert_ne!(a.digest(), b.digest());
    }
}
