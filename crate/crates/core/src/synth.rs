//! Synthetic worlds with known tie probabilities, planted civilization
//! blocks and snowball-sampled observation.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::weighted::WeightedAliasIndex;
use rand_distr::{Binomial, Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::country::{Civilization, CountryCode};
use crate::densities::{collapse_to_countries, DensityMatrix, UserGraph};
use crate::dyadreg::{build_dyad_table, design, fit_lmm, Imputation, LmmConfig};
use crate::error::{Error, Result};
use crate::geo::{haversine_km, GeoPoint};
use crate::ingest::{
    write_event_log, CountryMeta, CountryRegistry, DyadMeta, DyadTable, EventRecord, Hofstede, Location,
    RegistryConfig,
};
use crate::netstats::WeightedCountryGraph;
use crate::partition::{
    detect_greedy, detect_spinglass, detect_walktrap, rand_indices, Partition, PartitionSource, SpinglassConfig,
    WALKTRAP_STEPS,
};
use crate::qap::{qap_test, PairMatrix, QapConfig};
use crate::rescale::{build_design, fit_rescale_model, rescale, RescaledNetwork};

/// Parameters of a synthetic world.
///
/// Tie probabilities follow
/// `ln p_ij = base_log_density + civ_bonus * same_civ - distance_decay * ln(d_ij)`
/// between countries (`d_ij` in km) and `ln p_ii = within_log_density`
/// inside a country.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub n_countries: usize,
    /// Users per country are log-uniform on `[pop_min, pop_max]`.
    pub pop_min: f64,
    pub pop_max: f64,
    pub n_civilizations: usize,
    pub base_log_density: f64,
    pub within_log_density: f64,
    pub civ_bonus: f64,
    pub distance_decay: f64,
    /// Coverage `c_i` is uniform on `[coverage_min, coverage_max]`.
    pub coverage_min: f64,
    pub coverage_max: f64,
    /// Log-scale spread of per-user activity; active users attract more ties.
    pub activity_sigma: f64,
    pub n_seeds: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_countries: 30,
            pop_min: 200.0,
            pop_max: 1500.0,
            n_civilizations: 4,
            base_log_density: -2.5,
            within_log_density: -4.0,
            civ_bonus: 2.0,
            distance_decay: 0.6,
            coverage_min: 0.1,
            coverage_max: 0.5,
            activity_sigma: 1.0,
            n_seeds: 5,
            seed: 1,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_countries < 2 {
            return bad("a world needs at least two countries".into());
        }
        if !(self.pop_min >= 2.0 && self.pop_max >= self.pop_min && self.pop_max.is_finite()) {
            return bad(format!("population bounds [{}, {}] invalid", self.pop_min, self.pop_max));
        }
        if self.n_civilizations == 0 || self.n_civilizations > Civilization::ALL.len() {
            return bad(format!("n_civilizations must be in 1..={}", Civilization::ALL.len()));
        }
        if !(self.coverage_min > 0.0 && self.coverage_min <= self.coverage_max) {
            return bad("coverage_min must be positive and at most coverage_max".into());
        }
        if self.coverage_max > 1.0 {
            return bad(format!("coverage {} exceeds 1", self.coverage_max));
        }
        if !(self.activity_sigma >= 0.0) {
            return bad("activity_sigma must be nonnegative".into());
        }
        if self.n_seeds == 0 {
            return bad("at least one snowball seed per country is needed".into());
        }
        Ok(())
    }
}

/// Log tie probability of a pair.
pub fn log_tie_probability(spec: &WorldSpec, same_civ: bool, distance_km: f64, within: bool) -> f64 {
    if within {
        spec.within_log_density
    } else {
        spec.base_log_density + if same_civ { spec.civ_bonus } else { 0.0 }
            - spec.distance_decay * distance_km.max(1.0).ln()
    }
}

fn tmax(n_i: u64, n_j: u64, within: bool) -> u64 {
    if within {
        n_i * n_i.saturating_sub(1) / 2
    } else {
        n_i * n_j
    }
}

/// Draws `T ~ Binomial(Tmax, p)` for every pair `i <= j` of the given
/// populations without building any user graph.
pub fn sample_pair_ties(populations: &[u64], ln_p: &[f64], rng: &mut impl Rng) -> Result<Vec<u64>> {
    let n = populations.len();
    let mut ties = vec![0u64; n * n];
    for i in 0..n {
        for j in i..n {
            let p = ln_p[i * n + j].exp();
            if p >= 1.0 {
                return Err(Error::Invalid(format!("tie probability {p} for pair ({i}, {j}) is not below 1")));
            }
            let t = tmax(populations[i], populations[j], i == j);
            let draw = Binomial::new(t, p)
                .map_err(|e| Error::Invalid(format!("binomial({t}, {p}): {e}")))?
                .sample(rng);
            ties[i * n + j] = draw;
            ties[j * n + i] = draw;
        }
    }
    Ok(ties)
}

/// A generated world with its full user graph.
#[derive(Debug, Clone)]
pub struct World {
    pub spec: WorldSpec,
    pub countries: Vec<CountryMeta>,
    /// Planted civilization index of each country.
    pub civ: Vec<usize>,
    pub coverage: Vec<f64>,
    /// Country of each user; users with no tie are removed.
    pub user_country: Vec<usize>,
    /// Undirected edges `(u, v)`, `u < v`, sorted.
    pub edges: Vec<(u32, u32)>,
    /// Users per country (all with at least one tie).
    pub population: Vec<u64>,
    /// True tie counts, `n x n`.
    pub true_ties: Vec<u64>,
    /// Generating log probabilities, `n x n`.
    pub ln_p: Vec<f64>,
    pub dyads: Vec<DyadMeta>,
}

const LANGUAGES: [&str; 6] = ["en", "es", "fr", "ar", "ru", "zh"];

fn country_meta(k: usize, civ: Civilization, population: f64, centroid: GeoPoint, rng: &mut ChaCha8Rng) -> CountryMeta {
    let code = CountryCode::from_index(k);
    let mut languages = BTreeSet::new();
    languages.insert(LANGUAGES[rng.random_range(0..LANGUAGES.len())].to_string());
    if rng.random_bool(0.3) {
        languages.insert(LANGUAGES[rng.random_range(0..LANGUAGES.len())].to_string());
    }
    let score = |rng: &mut ChaCha8Rng| rng.random_range(10.0..100.0f64).round();
    CountryMeta {
        code,
        name: format!("Country {code}"),
        population,
        civilization: civ,
        gdp_per_capita: Some((rng.random_range(7.0..11.0f64)).exp().round()),
        hofstede: Some(Hofstede {
            pdi: score(rng),
            idv: score(rng),
            mas: score(rng),
            uai: score(rng),
        }),
        gen_trust: Some(rng.random_range(5.0..70.0f64).round()),
        languages,
        region: Some(format!("R{}", rng.random_range(0..4))),
        eea_member: rng.random_bool(0.4),
        centroid,
        excluded: false,
    }
}

/// Draws a world: countries, planted civilizations, tie counts and a
/// materialised user graph whose ties favour active users.
pub fn generate_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let n = spec.n_countries;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut civ: Vec<usize> = (0..n).map(|k| k % spec.n_civilizations).collect();
    civ.shuffle(&mut rng);
    let (lo, hi) = (spec.pop_min.ln(), spec.pop_max.ln());
    let drawn: Vec<u64> = (0..n).map(|_| rng.random_range(lo..=hi).exp().round() as u64).collect();
    let coverage: Vec<f64> = (0..n)
        .map(|_| rng.random_range(spec.coverage_min..=spec.coverage_max))
        .collect();
    let centroids: Vec<GeoPoint> = (0..n)
        .map(|_| GeoPoint::new(rng.random_range(-50.0..60.0), rng.random_range(-170.0..170.0)).expect("in range"))
        .collect();

    let mut ln_p = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let d = haversine_km(centroids[i], centroids[j]);
            let v = log_tie_probability(spec, civ[i] == civ[j], d, i == j);
            if v >= 0.0 {
                return Err(Error::Invalid(format!(
                    "tie probability exp({v}) for countries {i} and {j} is not below 1"
                )));
            }
            ln_p[i * n + j] = v;
            ln_p[j * n + i] = v;
        }
    }

    // Users and their activity.
    let mut offsets = vec![0u32; n + 1];
    for i in 0..n {
        offsets[i + 1] = offsets[i] + drawn[i] as u32;
    }
    let activity_dist = LogNormal::new(0.0, spec.activity_sigma).map_err(|e| Error::Invalid(e.to_string()))?;
    let samplers: Vec<WeightedAliasIndex<f64>> = (0..n)
        .map(|i| {
            let w: Vec<f64> = (0..drawn[i]).map(|_| activity_dist.sample(&mut rng)).collect();
            WeightedAliasIndex::new(w).map_err(|e| Error::Invalid(e.to_string()))
        })
        .collect::<Result<_>>()?;
    let drawn_ties = sample_pair_ties(&drawn, &ln_p, &mut rng)?;

    let mut edges = Vec::new();
    for i in 0..n {
        for j in i..n {
            let want = drawn_ties[i * n + j] as usize;
            if want == 0 {
                continue;
            }
            let mut seen: HashSet<(u32, u32)> = HashSet::with_capacity(want * 2);
            let mut attempts = 0usize;
            while seen.len() < want {
                attempts += 1;
                if attempts > 200 * want + 10_000 {
                    return Err(Error::Invalid(format!(
                        "pair ({i}, {j}) is too dense to materialise {want} distinct ties"
                    )));
                }
                let u = offsets[i] + samplers[i].sample(&mut rng) as u32;
                let v = offsets[j] + samplers[j].sample(&mut rng) as u32;
                if u != v {
                    seen.insert((u.min(v), u.max(v)));
                }
            }
            let mut pair: Vec<(u32, u32)> = seen.into_iter().collect();
            pair.sort_unstable();
            edges.extend(pair);
        }
    }
    edges.sort_unstable();

    // Drop users without ties and renumber.
    let total = offsets[n] as usize;
    let mut used = vec![false; total];
    for &(a, b) in &edges {
        used[a as usize] = true;
        used[b as usize] = true;
    }
    let mut remap = vec![u32::MAX; total];
    let mut user_country = Vec::new();
    for i in 0..n {
        for u in offsets[i]..offsets[i + 1] {
            if used[u as usize] {
                remap[u as usize] = user_country.len() as u32;
                user_country.push(i);
            }
        }
    }
    for e in edges.iter_mut() {
        *e = (remap[e.0 as usize], remap[e.1 as usize]);
    }
    let mut population = vec![0u64; n];
    for &c in &user_country {
        population[c] += 1;
    }
    if let Some(k) = population.iter().position(|&p| p < 2) {
        return Err(Error::Invalid(format!("country {k} ended with fewer than two tied users")));
    }

    let civs = Civilization::ALL;
    let countries: Vec<CountryMeta> = (0..n)
        .map(|k| country_meta(k, civs[civ[k]], population[k] as f64, centroids[k], &mut rng))
        .collect();
    let mut dyads = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let d = haversine_km(centroids[i], centroids[j]);
            let gravity = (population[i] as f64 * population[j] as f64).sqrt() * 1e6 / d.max(100.0);
            dyads.push(DyadMeta {
                a: countries[i].code,
                b: countries[j].code,
                trade_flow: (!rng.random_bool(0.1)).then(|| (gravity * rng.random_range(0.2..5.0f64)).round()),
                colonial_link: rng.random_bool(0.15),
                commonwealth_link: rng.random_bool(0.15),
                contiguous: d < 2500.0 || rng.random_bool(0.1),
                visa_required: rng.random_bool(0.4),
                direct_flights: (rng.random_range(0.0..4.0f64).exp() - 1.0).round(),
                distance_km: Some(d),
            });
        }
    }
    let mut true_ties = vec![0u64; n * n];
    for &(a, b) in &edges {
        let (ca, cb) = (user_country[a as usize], user_country[b as usize]);
        true_ties[ca * n + cb] += 1;
        if ca != cb {
            true_ties[cb * n + ca] += 1;
        }
    }
    Ok(World {
        spec: spec.clone(),
        countries,
        civ,
        coverage,
        user_country,
        edges,
        population,
        true_ties,
        ln_p,
        dyads,
    })
}

impl World {
    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn n_users(&self) -> usize {
        self.user_country.len()
    }

    pub fn codes(&self) -> Vec<CountryCode> {
        self.countries.iter().map(|c| c.code).collect()
    }

    pub fn user_id(u: usize) -> String {
        format!("u{u:07}")
    }

    pub fn tmax(&self, i: usize, j: usize) -> u64 {
        tmax(self.population[i], self.population[j], i == j)
    }

    /// True log density `ln(T / Tmax)`, absent when there is no tie.
    pub fn true_ln_t(&self, i: usize, j: usize) -> Option<f64> {
        let t = self.true_ties[i * self.n() + j];
        (t > 0).then(|| (t as f64 / self.tmax(i, j) as f64).ln())
    }

    pub fn population_map(&self) -> BTreeMap<CountryCode, f64> {
        self.countries.iter().map(|c| (c.code, c.population)).collect()
    }

    pub fn civilization_labels(&self) -> BTreeMap<CountryCode, Civilization> {
        self.countries.iter().map(|c| (c.code, c.civilization)).collect()
    }

    pub fn registry(&self) -> Result<CountryRegistry> {
        CountryRegistry::from_countries(
            self.countries.clone(),
            &RegistryConfig {
                min_population: 0.0,
                exclude: Vec::new(),
            },
        )
    }

    pub fn dyad_table(&self) -> Result<DyadTable> {
        DyadTable::from_dyads(self.dyads.clone())
    }

    fn adjacency(&self) -> Vec<Vec<u32>> {
        let mut adj = vec![Vec::new(); self.n_users()];
        for &(a, b) in &self.edges {
            adj[a as usize].push(b);
            adj[b as usize].push(a);
        }
        adj
    }

    /// User graph restricted to `marked` users.
    pub fn observed_graph(&self, marked: &[bool]) -> (UserGraph, BTreeMap<String, CountryCode>) {
        let mut local = vec![u32::MAX; self.n_users()];
        let mut ids = Vec::new();
        let mut residence = BTreeMap::new();
        for (u, &m) in marked.iter().enumerate() {
            if m {
                local[u] = ids.len() as u32;
                let id = World::user_id(u);
                residence.insert(id.clone(), self.countries[self.user_country[u]].code);
                ids.push(id);
            }
        }
        let edges = self
            .edges
            .iter()
            .filter(|(a, b)| marked[*a as usize] && marked[*b as usize])
            .map(|(a, b)| (local[*a as usize], local[*b as usize]));
        (UserGraph::from_undirected(&ids, edges), residence)
    }

    /// Country-pair densities among `marked` users.
    pub fn observed_density(&self, marked: &[bool], edge_floor: u64) -> Result<DensityMatrix> {
        let (graph, residence) = self.observed_graph(marked);
        collapse_to_countries(&graph, &residence, &self.population_map(), edge_floor)
    }
}

/// Multi-seeded snowball sample.
///
/// Each country starts from `n_seeds` uniformly chosen users; a single
/// breadth-first frontier then grows along ties (crossing borders) and marks
/// a reached user only while its country is below `ceil(c_i N_i)`. Countries
/// still short when the frontier is exhausted are topped up uniformly.
pub fn snowball_sample(world: &World, coverage: &[f64], n_seeds: usize, rng: &mut impl Rng) -> Result<Vec<bool>> {
    let n = world.n();
    if coverage.len() != n {
        return Err(Error::Invalid("one coverage value per country is needed".into()));
    }
    if let Some(c) = coverage.iter().find(|c| !(**c > 0.0 && **c <= 1.0)) {
        return Err(Error::Invalid(format!("coverage {c} outside (0, 1]")));
    }
    let quota: Vec<usize> = (0..n)
        .map(|i| (coverage[i] * world.population[i] as f64).ceil() as usize)
        .collect();
    let mut members: Vec<Vec<u32>> = vec![Vec::new(); n];
    for (u, &c) in world.user_country.iter().enumerate() {
        members[c].push(u as u32);
    }
    let adj = world.adjacency();
    let mut marked = vec![false; world.n_users()];
    let mut count = vec![0usize; n];
    let mut queue = VecDeque::new();
    for i in 0..n {
        let k = n_seeds.min(quota[i]).min(members[i].len());
        let mut picks: Vec<usize> = index::sample(rng, members[i].len(), k).into_iter().collect();
        picks.sort_unstable();
        for p in picks {
            let u = members[i][p] as usize;
            marked[u] = true;
            count[i] += 1;
            queue.push_back(u);
        }
    }
    while let Some(u) = queue.pop_front() {
        for &v in &adj[u] {
            let v = v as usize;
            let c = world.user_country[v];
            if !marked[v] && count[c] < quota[c] {
                marked[v] = true;
                count[c] += 1;
                queue.push_back(v);
            }
        }
    }
    for i in 0..n {
        if count[i] < quota[i] {
            let mut rest: Vec<u32> = members[i].iter().copied().filter(|&u| !marked[u as usize]).collect();
            rest.shuffle(rng);
            for u in rest.into_iter().take(quota[i] - count[i]) {
                marked[u as usize] = true;
            }
            count[i] = quota[i];
        }
    }
    Ok(marked)
}

/// Uniform random sample of `ceil(c_i N_i)` users per country.
pub fn uniform_sample(world: &World, coverage: &[f64], rng: &mut impl Rng) -> Vec<bool> {
    let mut marked = vec![false; world.n_users()];
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); world.n()];
    for (u, &c) in world.user_country.iter().enumerate() {
        members[c].push(u);
    }
    for (i, m) in members.iter().enumerate() {
        let k = ((coverage[i] * world.population[i] as f64).ceil() as usize).min(m.len());
        for p in index::sample(rng, m.len(), k) {
            marked[m[p]] = true;
        }
    }
    marked
}

/// Observed sample of a world under its own coverage and seed settings.
pub fn sample_world(world: &World) -> Result<Vec<bool>> {
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed);
    rng.set_stream(1);
    snowball_sample(world, &world.coverage, world.spec.n_seeds, &mut rng)
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

/// Correlations of observed and rescaled log densities with the true ones,
/// over between-country pairs present in both.
pub fn density_correlations(world: &World, observed: &DensityMatrix, rescaled: &RescaledNetwork) -> Result<(f64, f64, usize)> {
    let codes = world.codes();
    let (mut truth, mut raw, mut resc) = (Vec::new(), Vec::new(), Vec::new());
    for p in rescaled.between_pairs() {
        let wi = codes.iter().position(|c| *c == p.i).expect("world country");
        let wj = codes.iter().position(|c| *c == p.j).expect("world country");
        let (oi, oj) = (observed.index_of(p.i).expect("observed"), observed.index_of(p.j).expect("observed"));
        if let (Some(t), Some(o)) = (world.true_ln_t(wi, wj), observed.log_density(oi, oj)) {
            truth.push(t);
            raw.push(o);
            resc.push(p.ln_t_prime);
        }
    }
    if truth.len() < 3 {
        return Err(Error::Invalid("too few pairs to correlate".into()));
    }
    Ok((pearson(&raw, &truth), pearson(&resc, &truth), truth.len()))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RecoveryOptions {
    pub edge_floor: u64,
    pub qap_permutations: usize,
    pub spinglass: bool,
    pub lmm: bool,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        RecoveryOptions {
            edge_floor: 1,
            qap_permutations: 1000,
            spinglass: true,
            lmm: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecoveryReport {
    pub seed: u64,
    pub countries_observed: usize,
    pub pairs_compared: usize,
    pub corr_raw: f64,
    pub corr_rescaled: f64,
    pub ari_greedy: f64,
    pub ari_walktrap: f64,
    pub ari_spinglass: Option<f64>,
    pub qap_r: f64,
    pub qap_p: f64,
    /// LMM coefficient of `common_civilization` with `ln_distance` control.
    pub civ_coefficient: Option<f64>,
    pub civ_std_error: Option<f64>,
    pub distance_coefficient: Option<f64>,
    pub distance_std_error: Option<f64>,
}

/// Observed densities, fitted rescale model and rescaled network of a
/// sampled world.
pub fn rescale_world(world: &World, marked: &[bool], edge_floor: u64) -> Result<(DensityMatrix, RescaledNetwork)> {
    let observed = world.observed_density(marked, edge_floor)?;
    let model = fit_rescale_model(&build_design(&observed)?)?;
    let net = rescale(&observed, &model)?;
    Ok((observed, net))
}

/// Runs the analysis chain on a sampled world and scores it against the
/// planted truth.
pub fn planted_recovery_report(spec: &WorldSpec, options: &RecoveryOptions) -> Result<RecoveryReport> {
    let world = generate_world(spec)?;
    let marked = sample_world(&world)?;
    let (observed, net) = rescale_world(&world, &marked, options.edge_floor)?;
    let (corr_raw, corr_rescaled, pairs_compared) = density_correlations(&world, &observed, &net)?;

    let graph = WeightedCountryGraph::from_rescaled(&net);
    let labels = world.civilization_labels();
    let truth = Partition::from_labels(graph.countries().to_vec(), &labels, PartitionSource::Civilization)?;
    let ari = |p: &Partition| rand_indices(&truth, p).map(|r| r.adjusted_rand);
    let ari_greedy = ari(&detect_greedy(&graph)?)?;
    let ari_walktrap = ari(&detect_walktrap(&graph, WALKTRAP_STEPS)?)?;
    let ari_spinglass = if options.spinglass {
        Some(ari(&detect_spinglass(&graph, spec.seed, &SpinglassConfig::default())?)?)
    } else {
        None
    };
    let qap = qap_test(
        &PairMatrix::from_rescaled(&net),
        &truth,
        &QapConfig {
            permutations: options.qap_permutations,
            seed: spec.seed,
            ..QapConfig::default()
        },
    )?;

    let (mut civ_coefficient, mut civ_std_error, mut distance_coefficient, mut distance_std_error) = (None, None, None, None);
    if options.lmm {
        let dataset = build_dyad_table(&net, &world.registry()?, &world.dyad_table()?, Imputation::Mean)?;
        let covariates: Vec<&str> = if spec.n_civilizations > 1 {
            vec!["common_civilization", "ln_distance"]
        } else {
            vec!["ln_distance"]
        };
        let fit = fit_lmm(&design(&dataset, &covariates)?, &LmmConfig::default())?;
        if let Some(c) = fit.coefficient("common_civilization") {
            civ_coefficient = Some(c.estimate);
            civ_std_error = Some(c.std_error);
        }
        if let Some(c) = fit.coefficient("ln_distance") {
            distance_coefficient = Some(c.estimate);
            distance_std_error = Some(c.std_error);
        }
    }
    Ok(RecoveryReport {
        seed: spec.seed,
        countries_observed: observed.n(),
        pairs_compared,
        corr_raw,
        corr_rescaled,
        ari_greedy,
        ari_walktrap,
        ari_spinglass,
        qap_r: qap.observed_r,
        qap_p: qap.p_value,
        civ_coefficient,
        civ_std_error,
        distance_coefficient,
        distance_std_error,
    })
}

/// Paths of the input files written by [`write_inputs`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputFiles {
    pub events: PathBuf,
    pub edges: PathBuf,
    pub geodb: PathBuf,
    pub countries: PathBuf,
    pub dyads: PathBuf,
    pub profiles: PathBuf,
}

const DAY: f64 = 86_400.0;

fn ip_base(k: usize) -> u32 {
    ((k as u32) + 1) << 24
}

/// Writes the sampled world in the formats the ingest module reads.
///
/// Every marked user logs in from their home country over about 100 days
/// and reports it as residence. A few users also log in once from abroad,
/// log in for only 30 days, or report a different country, so the residence
/// filters have something to reject. Each tie between marked users becomes
/// two directed records, and a few unanswered records are added.
pub fn write_inputs(world: &World, marked: &[bool], dir: &Path) -> Result<InputFiles> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let files = InputFiles {
        events: dir.join("events.csv"),
        edges: dir.join("edges.csv"),
        geodb: dir.join("geodb.csv"),
        countries: dir.join("countries.csv"),
        dyads: dir.join("dyads.csv"),
        profiles: dir.join("profiles.csv"),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(world.spec.seed);
    rng.set_stream(2);
    let n = world.n();
    let codes = world.codes();

    let mut events = Vec::new();
    let mut profiles = csv::Writer::from_path(&files.profiles)?;
    profiles.write_record(["user_id", "country"])?;
    for (u, _) in marked.iter().enumerate().filter(|(_, m)| **m) {
        let home = world.user_country[u];
        let id = World::user_id(u);
        let ip = |k: usize, rng: &mut ChaCha8Rng| Location::Ip(Ipv4Addr::from(ip_base(k) + rng.random_range(1..0x00FF_FFFF)));
        let t0 = rng.random_range(0.0..30.0) * DAY;
        let roll: f64 = rng.random();
        let span = if roll < 0.02 { 30.0 } else { 100.0 };
        for f in [0.0, 0.3, 0.6, 1.0] {
            events.push(EventRecord::new(id.clone(), (t0 + f * span * DAY).round(), ip(home, &mut rng))?);
        }
        if (0.02..0.12).contains(&roll) {
            let away = (home + 1 + rng.random_range(0..n - 1)) % n;
            events.push(EventRecord::new(id.clone(), (t0 + 0.45 * span * DAY).round(), ip(away, &mut rng))?);
        }
        let reported = if (0.12..0.13).contains(&roll) { (home + 1) % n } else { home };
        profiles.write_record([id.as_str(), codes[reported].as_str()])?;
    }
    profiles.flush().map_err(|e| Error::io(&files.profiles, e))?;
    events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.user_id.cmp(&b.user_id)));
    let file = fs::File::create(&files.events).map_err(|e| Error::io(&files.events, e))?;
    write_event_log(std::io::BufWriter::new(file), &events)?;

    let mut edges = csv::Writer::from_path(&files.edges)?;
    edges.write_record(["sender", "recipient", "count"])?;
    let observed: Vec<usize> = (0..marked.len()).filter(|&u| marked[u]).collect();
    let edge_set: HashSet<(u32, u32)> = world.edges.iter().copied().collect();
    for &(a, b) in &world.edges {
        if marked[a as usize] && marked[b as usize] {
            let (ia, ib) = (World::user_id(a as usize), World::user_id(b as usize));
            edges.write_record([ia.as_str(), ib.as_str(), &rng.random_range(1..6u32).to_string()])?;
            edges.write_record([ib.as_str(), ia.as_str(), &rng.random_range(1..6u32).to_string()])?;
        }
    }
    if observed.len() >= 2 {
        for _ in 0..observed.len() / 20 {
            let a = observed[rng.random_range(0..observed.len())];
            let b = observed[rng.random_range(0..observed.len())];
            let key = (a.min(b) as u32, a.max(b) as u32);
            if a != b && !edge_set.contains(&key) {
                edges.write_record([World::user_id(a).as_str(), World::user_id(b).as_str(), "1"])?;
            }
        }
    }
    edges.flush().map_err(|e| Error::io(&files.edges, e))?;

    let mut geo = csv::Writer::from_path(&files.geodb)?;
    geo.write_record(["ip_lo", "ip_hi", "country", "lat", "lon"])?;
    for (k, c) in world.countries.iter().enumerate() {
        geo.write_record([
            Ipv4Addr::from(ip_base(k)).to_string(),
            Ipv4Addr::from(ip_base(k) | 0x00FF_FFFF).to_string(),
            c.code.to_string(),
            c.centroid.lat.to_string(),
            c.centroid.lon.to_string(),
        ])?;
    }
    geo.flush().map_err(|e| Error::io(&files.geodb, e))?;

    let mut ct = csv::Writer::from_path(&files.countries)?;
    ct.write_record([
        "code", "name", "population", "civilization", "gdp", "pdi", "idv", "mas", "uai", "trust", "languages", "region",
        "eea", "lat", "lon",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for c in &world.countries {
        let h = c.hofstede;
        ct.write_record([
            c.code.to_string(),
            c.name.clone(),
            c.population.to_string(),
            c.civilization.to_string(),
            opt(c.gdp_per_capita),
            opt(h.map(|h| h.pdi)),
            opt(h.map(|h| h.idv)),
            opt(h.map(|h| h.mas)),
            opt(h.map(|h| h.uai)),
            opt(c.gen_trust),
            c.languages.iter().cloned().collect::<Vec<_>>().join(";"),
            c.region.clone().unwrap_or_default(),
            u8::from(c.eea_member).to_string(),
            c.centroid.lat.to_string(),
            c.centroid.lon.to_string(),
        ])?;
    }
    ct.flush().map_err(|e| Error::io(&files.countries, e))?;

    let mut dy = csv::Writer::from_path(&files.dyads)?;
    dy.write_record(["a", "b", "trade_flow", "colonial", "commonwealth", "contiguous", "visa", "flights", "distance_km"])?;
    for d in &world.dyads {
        dy.write_record([
            d.a.to_string(),
            d.b.to_string(),
            opt(d.trade_flow),
            u8::from(d.colonial_link).to_string(),
            u8::from(d.commonwealth_link).to_string(),
            u8::from(d.contiguous).to_string(),
            u8::from(d.visa_required).to_string(),
            d.direct_flights.to_string(),
            opt(d.distance_km),
        ])?;
    }
    dy.flush().map_err(|e| Error::io(&files.dyads, e))?;
    Ok(files)
}
