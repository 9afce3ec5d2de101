//! Community detection on the weighted country graph and comparison of
//! partitions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::netstats::WeightedCountryGraph;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionSource {
    Civilization,
    Greedy,
    Walktrap,
    Spinglass,
    External,
}

impl PartitionSource {
    pub fn as_str(self) -> &'static str {
        match self {
            PartitionSource::Civilization => "civilization",
            PartitionSource::Greedy => "greedy",
            PartitionSource::Walktrap => "walktrap",
            PartitionSource::Spinglass => "spinglass",
            PartitionSource::External => "external",
        }
    }
}

impl fmt::Display for PartitionSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Assignment of countries to communities with dense ids `0..m`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Partition {
    countries: Vec<CountryCode>,
    assignment: Vec<usize>,
    labels: Vec<String>,
    source: PartitionSource,
}

impl Partition {
    /// Relabels `raw` densely in order of first appearance.
    pub fn new(countries: Vec<CountryCode>, raw: &[usize], source: PartitionSource) -> Result<Self> {
        if countries.len() != raw.len() {
            return Err(Error::Invalid(format!(
                "{} countries but {} assignments",
                countries.len(),
                raw.len()
            )));
        }
        let mut ids = BTreeMap::new();
        let mut next = 0;
        let assignment: Vec<usize> = raw
            .iter()
            .map(|r| {
                *ids.entry(*r).or_insert_with(|| {
                    next += 1;
                    next - 1
                })
            })
            .collect();
        let labels = (0..next).map(|k| k.to_string()).collect();
        let p = Partition {
            countries,
            assignment,
            labels,
            source,
        };
        p.check_unique()?;
        Ok(p)
    }

    /// Partition induced by a country labelling; community ids follow label
    /// order and community labels are the label display strings.
    pub fn from_labels<L: Ord + Clone + fmt::Display>(
        countries: Vec<CountryCode>,
        labels: &BTreeMap<CountryCode, L>,
        source: PartitionSource,
    ) -> Result<Self> {
        let mut present = BTreeSet::new();
        for c in &countries {
            let l = labels
                .get(c)
                .ok_or_else(|| Error::Invalid(format!("country {c} has no label")))?;
            present.insert(l.clone());
        }
        let index: BTreeMap<L, usize> = present.iter().cloned().enumerate().map(|(k, l)| (l, k)).collect();
        let assignment = countries.iter().map(|c| index[&labels[c]]).collect();
        let p = Partition {
            countries,
            assignment,
            labels: present.iter().map(|l| l.to_string()).collect(),
            source,
        };
        p.check_unique()?;
        Ok(p)
    }

    fn check_unique(&self) -> Result<()> {
        let set: BTreeSet<_> = self.countries.iter().collect();
        if set.len() != self.countries.len() {
            return Err(Error::Invalid("partition lists a country twice".into()));
        }
        Ok(())
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn source(&self) -> PartitionSource {
        self.source
    }

    pub fn n_communities(&self) -> usize {
        self.labels.len()
    }

    pub fn len(&self) -> usize {
        self.countries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.countries.is_empty()
    }

    pub fn community_of(&self, code: CountryCode) -> Option<usize> {
        self.countries.iter().position(|c| *c == code).map(|k| self.assignment[k])
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_communities()];
        for &a in &self.assignment {
            s[a] += 1;
        }
        s
    }
}

/// Weighted modularity `Q = (1/2m) sum_ij [w_ij - s_i s_j / 2m] delta(c_i, c_j)`.
pub fn modularity(g: &WeightedCountryGraph, assignment: &[usize]) -> Result<f64> {
    let n = g.n();
    if assignment.len() != n {
        return Err(Error::Invalid("assignment length differs from node count".into()));
    }
    let two_m = 2.0 * g.total_weight();
    if two_m <= 0.0 {
        return Err(Error::Invalid("modularity undefined on a graph with no edge weight".into()));
    }
    let k = assignment.iter().max().map_or(0, |m| m + 1);
    let mut internal = vec![0.0; k];
    let mut strength = vec![0.0; k];
    for (i, j, w) in g.edges() {
        strength[assignment[i]] += w;
        strength[assignment[j]] += w;
        if assignment[i] == assignment[j] {
            internal[assignment[i]] += 2.0 * w;
        }
    }
    Ok((0..k)
        .map(|c| internal[c] / two_m - (strength[c] / two_m).powi(2))
        .sum())
}

fn partition_from_nodes(g: &WeightedCountryGraph, raw: &[usize], source: PartitionSource) -> Partition {
    Partition::new(g.countries().to_vec(), raw, source).expect("graph countries are unique")
}

/// Agglomerative modularity maximisation (Clauset-Newman-Moore).
///
/// Starts from singletons and repeatedly merges the connected pair of
/// communities with the largest gain `dQ = 2 (e_ab - a_a a_b)`, breaking
/// ties by the smaller pair of community ids. Returns the partition with the
/// highest modularity seen.
pub fn detect_greedy(g: &WeightedCountryGraph) -> Result<Partition> {
    let n = g.n();
    let two_m = 2.0 * g.total_weight();
    if n == 0 || two_m <= 0.0 {
        return Err(Error::Invalid("community detection needs a graph with positive edge weight".into()));
    }
    // e[a][b]: fraction of edge ends joining a and b (each direction).
    let mut e = vec![0.0; n * n];
    let mut a = vec![0.0; n];
    for (i, j, w) in g.edges() {
        e[i * n + j] += w / two_m;
        e[j * n + i] += w / two_m;
        a[i] += w / two_m;
        a[j] += w / two_m;
    }
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let mut q: f64 = -a.iter().map(|v| v * v).sum::<f64>();
    let mut best_q = q;
    let mut best = owner.clone();
    loop {
        let mut pick: Option<(usize, usize, f64)> = None;
        for x in 0..n {
            if !active[x] {
                continue;
            }
            for y in x + 1..n {
                if !active[y] || e[x * n + y] <= 0.0 {
                    continue;
                }
                let dq = 2.0 * (e[x * n + y] - a[x] * a[y]);
                if pick.is_none_or(|(_, _, b)| dq > b) {
                    pick = Some((x, y, dq));
                }
            }
        }
        let Some((x, y, dq)) = pick else { break };
        // Merge y into x.
        for z in 0..n {
            if z != x && z != y {
                e[x * n + z] += e[y * n + z];
                e[z * n + x] = e[x * n + z];
            }
            e[y * n + z] = 0.0;
            e[z * n + y] = 0.0;
        }
        a[x] += a[y];
        a[y] = 0.0;
        active[y] = false;
        for o in owner.iter_mut() {
            if *o == y {
                *o = x;
            }
        }
        q += dq;
        if q > best_q {
            best_q = q;
            best = owner.clone();
        }
    }
    Ok(partition_from_nodes(g, &best, PartitionSource::Greedy))
}

pub const WALKTRAP_STEPS: usize = 4;

/// Random-walk agglomeration (Pons-Latapy).
///
/// Each node gets a self-loop weighted by its mean incident weight, walks
/// of `t_steps` steps define community probability vectors, and adjacent
/// communities are merged by smallest Ward increase
/// `dsigma = (1/n) |C1||C2| / (|C1|+|C2|) * r^2`, where `r^2` is the
/// degree-weighted squared distance between the vectors. The dendrogram is
/// cut at maximum modularity.
pub fn detect_walktrap(g: &WeightedCountryGraph, t_steps: usize) -> Result<Partition> {
    let n = g.n();
    if n == 0 {
        return Err(Error::Invalid("community detection needs a nonempty graph".into()));
    }
    // Transition matrix with self-loops, positive-weight edges only.
    let mut deg = vec![0.0; n];
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        let incident: Vec<(usize, f64)> = g.neighbors(i).filter(|e| e.1 > 0.0).collect();
        let total: f64 = incident.iter().map(|e| e.1).sum();
        let loop_w = if incident.is_empty() { 1.0 } else { total / incident.len() as f64 };
        deg[i] = total + loop_w;
        p[i * n + i] = loop_w / deg[i];
        for (j, w) in incident {
            p[i * n + j] = w / deg[i];
        }
    }
    // Rows of P^t.
    let mut pt = vec![0.0; n * n];
    for i in 0..n {
        pt[i * n + i] = 1.0;
    }
    let mut tmp = vec![0.0; n * n];
    for _ in 0..t_steps {
        tmp.iter_mut().for_each(|v| *v = 0.0);
        for i in 0..n {
            for k in 0..n {
                let v = pt[i * n + k];
                if v == 0.0 {
                    continue;
                }
                for j in 0..n {
                    tmp[i * n + j] += v * p[k * n + j];
                }
            }
        }
        std::mem::swap(&mut pt, &mut tmp);
    }
    let inv_deg: Vec<f64> = deg.iter().map(|d| 1.0 / d).collect();
    let r2 = |u: &[f64], v: &[f64]| -> f64 {
        u.iter()
            .zip(v)
            .zip(&inv_deg)
            .map(|((a, b), w)| (a - b) * (a - b) * w)
            .sum()
    };

    let mut size = vec![1usize; n];
    let mut vecs: Vec<Vec<f64>> = (0..n).map(|i| pt[i * n..(i + 1) * n].to_vec()).collect();
    let mut adj = vec![false; n * n];
    for (i, j, w) in g.edges() {
        if w > 0.0 {
            adj[i * n + j] = true;
            adj[j * n + i] = true;
        }
    }
    let mut active = vec![true; n];
    let mut owner: Vec<usize> = (0..n).collect();
    let has_weight = g.total_weight() > 0.0;
    let mut best = owner.clone();
    let mut best_q = if has_weight { modularity(g, &owner)? } else { 0.0 };
    let nf = n as f64;
    let mut dsigma = vec![f64::INFINITY; n * n];
    for x in 0..n {
        for y in x + 1..n {
            if adj[x * n + y] {
                dsigma[x * n + y] = 0.5 / nf * r2(&vecs[x], &vecs[y]);
            }
        }
    }
    loop {
        let mut pick: Option<(usize, usize, f64)> = None;
        for x in 0..n {
            if !active[x] {
                continue;
            }
            for y in x + 1..n {
                if active[y] && adj[x * n + y] {
                    let d = dsigma[x * n + y];
                    if pick.is_none_or(|(_, _, b)| d < b) {
                        pick = Some((x, y, d));
                    }
                }
            }
        }
        let Some((x, y, _)) = pick else { break };
        let (sx, sy) = (size[x] as f64, size[y] as f64);
        let merged: Vec<f64> = vecs[x]
            .iter()
            .zip(&vecs[y])
            .map(|(a, b)| (sx * a + sy * b) / (sx + sy))
            .collect();
        vecs[x] = merged;
        size[x] += size[y];
        active[y] = false;
        for z in 0..n {
            if adj[y * n + z] && z != x {
                adj[x * n + z] = true;
                adj[z * n + x] = true;
            }
            adj[y * n + z] = false;
            adj[z * n + y] = false;
        }
        adj[x * n + x] = false;
        for z in 0..n {
            if active[z] && z != x && adj[x * n + z] {
                let (sx, sz) = (size[x] as f64, size[z] as f64);
                let d = sx * sz / (sx + sz) / nf * r2(&vecs[x], &vecs[z]);
                let (lo, hi) = (x.min(z), x.max(z));
                dsigma[lo * n + hi] = d;
            }
        }
        for o in owner.iter_mut() {
            if *o == y {
                *o = x;
            }
        }
        if has_weight {
            let q = modularity(g, &owner)?;
            if q > best_q {
                best_q = q;
                best = owner.clone();
            }
        }
    }
    Ok(partition_from_nodes(g, &best, PartitionSource::Walktrap))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpinglassConfig {
    pub spins: usize,
    pub gamma: f64,
    /// Start and stop temperatures, as multiples of the mean edge weight.
    pub start_temp: f64,
    pub stop_temp: f64,
    pub cooling: f64,
    pub sweeps_per_temp: usize,
}

impl Default for SpinglassConfig {
    fn default() -> Self {
        SpinglassConfig {
            spins: 25,
            gamma: 1.0,
            start_temp: 1.0,
            stop_temp: 0.01,
            cooling: 0.99,
            sweeps_per_temp: 5,
        }
    }
}

/// Potts-model community detection (Reichardt-Bornholdt) by heat-bath
/// simulated annealing on the Hamiltonian
/// `H = -sum_{i<j} (w_ij - gamma s_i s_j / 2m) delta(sigma_i, sigma_j)`.
pub fn detect_spinglass(g: &WeightedCountryGraph, seed: u64, config: &SpinglassConfig) -> Result<Partition> {
    let n = g.n();
    let edges = g.edges();
    let total = g.total_weight();
    if n == 0 || total <= 0.0 {
        return Err(Error::Invalid("community detection needs a graph with positive edge weight".into()));
    }
    if config.spins == 0 || !(config.cooling > 0.0 && config.cooling < 1.0) {
        return Err(Error::Invalid("spinglass needs at least one spin and cooling in (0, 1)".into()));
    }
    let two_m = 2.0 * total;
    let mean_w = total / edges.len() as f64;
    let q = config.spins;
    let strength: Vec<f64> = (0..n).map(|i| crate::netstats::weighted_degree(g, i)).collect();
    let nbrs: Vec<Vec<(usize, f64)>> = (0..n).map(|i| g.neighbors(i).collect()).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut spin: Vec<usize> = (0..n).map(|_| rng.random_range(0..q)).collect();
    let mut spin_strength = vec![0.0; q];
    for i in 0..n {
        spin_strength[spin[i]] += strength[i];
    }
    let mut links = vec![0.0; q];
    let mut energy = vec![0.0; q];

    // Gain of placing node i in each spin state, relative to leaving it alone.
    let gains = |i: usize, spin: &[usize], spin_strength: &[f64], links: &mut [f64], energy: &mut [f64]| {
        links.iter_mut().for_each(|v| *v = 0.0);
        for &(j, w) in &nbrs[i] {
            links[spin[j]] += w;
        }
        let own = spin[i];
        for s in 0..q {
            let others = spin_strength[s] - if s == own { strength[i] } else { 0.0 };
            energy[s] = links[s] - config.gamma * strength[i] * others / two_m;
        }
    };

    let mut temp = config.start_temp * mean_w;
    let stop = config.stop_temp * mean_w;
    let mut probs = vec![0.0; q];
    while temp > stop {
        for _ in 0..config.sweeps_per_temp {
            for _ in 0..n {
                let i = rng.random_range(0..n);
                gains(i, &spin, &spin_strength, &mut links, &mut energy);
                let top = energy.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in 0..q {
                    probs[s] = ((energy[s] - top) / temp).exp();
                    z += probs[s];
                }
                let mut r = rng.random::<f64>() * z;
                let mut new = q - 1;
                for (s, p) in probs.iter().enumerate() {
                    if r < *p {
                        new = s;
                        break;
                    }
                    r -= p;
                }
                spin_strength[spin[i]] -= strength[i];
                spin[i] = new;
                spin_strength[new] += strength[i];
            }
        }
        temp *= config.cooling;
    }
    // Zero-temperature sweeps until no node moves.
    for _ in 0..1000 {
        let mut moved = false;
        for i in 0..n {
            gains(i, &spin, &spin_strength, &mut links, &mut energy);
            let own = spin[i];
            let mut new = own;
            for s in 0..q {
                if energy[s] > energy[new] + 1e-12 * mean_w {
                    new = s;
                }
            }
            if new != own {
                spin_strength[own] -= strength[i];
                spin[i] = new;
                spin_strength[new] += strength[i];
                moved = true;
            }
        }
        if !moved {
            break;
        }
    }
    Ok(partition_from_nodes(g, &spin, PartitionSource::Spinglass))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossTab {
    pub row_labels: Vec<String>,
    pub col_labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl CrossTab {
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn col_sums(&self) -> Vec<u64> {
        (0..self.col_labels.len())
            .map(|c| self.counts.iter().map(|r| r[c]).sum())
            .collect()
    }

    pub fn total(&self) -> u64 {
        self.row_sums().iter().sum()
    }
}

/// Aligns `b` to the country order of `a`, failing unless both cover the
/// same countries.
fn aligned(a: &Partition, b: &Partition) -> Result<Vec<(usize, usize)>> {
    if a.len() != b.len() {
        return Err(Error::Invalid(format!(
            "partitions cover {} and {} countries",
            a.len(),
            b.len()
        )));
    }
    let index: BTreeMap<CountryCode, usize> = b
        .countries()
        .iter()
        .zip(b.assignment())
        .map(|(c, k)| (*c, *k))
        .collect();
    a.countries()
        .iter()
        .zip(a.assignment())
        .map(|(c, ka)| {
            index
                .get(c)
                .map(|kb| (*ka, *kb))
                .ok_or_else(|| Error::Invalid(format!("country {c} missing from second partition")))
        })
        .collect()
}

/// Contingency table with rows from `a` and columns from `b`.
pub fn cross_tabulate(a: &Partition, b: &Partition) -> Result<CrossTab> {
    let pairs = aligned(a, b)?;
    let mut counts = vec![vec![0u64; b.n_communities()]; a.n_communities()];
    for (r, c) in pairs {
        counts[r][c] += 1;
    }
    Ok(CrossTab {
        row_labels: a.labels().to_vec(),
        col_labels: b.labels().to_vec(),
        counts,
    })
}

/// Counts of country pairs: together in both, only in `a`, only in `b`,
/// apart in both.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairCounts {
    pub both: u64,
    pub only_a: u64,
    pub only_b: u64,
    pub neither: u64,
}

fn choose2(k: u64) -> u64 {
    k * k.saturating_sub(1) / 2
}

pub fn pair_counts(a: &Partition, b: &Partition) -> Result<PairCounts> {
    let tab = cross_tabulate(a, b)?;
    let n = tab.total();
    let both: u64 = tab.counts.iter().flatten().map(|&k| choose2(k)).sum();
    let same_a: u64 = tab.row_sums().into_iter().map(choose2).sum();
    let same_b: u64 = tab.col_sums().into_iter().map(choose2).sum();
    Ok(PairCounts {
        both,
        only_a: same_a - both,
        only_b: same_b - both,
        neither: choose2(n) + both - same_a - same_b,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RandIndices {
    pub rand: f64,
    pub adjusted_rand: f64,
}

/// Raw Rand index and the Hubert-Arabie adjusted Rand index,
/// `ARI = 2(ad - bc) / ((a+b)(b+d) + (a+c)(c+d))` from the pair counts.
/// When the denominator vanishes both partitions are trivial and identical,
/// and ARI is 1.
pub fn rand_indices(a: &Partition, b: &Partition) -> Result<RandIndices> {
    if a.len() < 2 {
        return Err(Error::Invalid("Rand indices need at least two countries".into()));
    }
    let pc = pair_counts(a, b)?;
    Ok(rand_from_counts(pc))
}

pub fn rand_from_counts(pc: PairCounts) -> RandIndices {
    let (a, b, c, d) = (
        pc.both as i128,
        pc.only_a as i128,
        pc.only_b as i128,
        pc.neither as i128,
    );
    let total = a + b + c + d;
    let rand = (a + d) as f64 / total as f64;
    let num = 2 * (a * d - b * c);
    let den = (a + b) * (b + d) + (a + c) * (c + d);
    let adjusted_rand = if den == 0 { 1.0 } else { num as f64 / den as f64 };
    RandIndices { rand, adjusted_rand }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChiSquare {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
}

/// Pearson chi-square test of independence.
pub fn chi_square(tab: &CrossTab) -> Result<ChiSquare> {
    let rows = tab.row_sums();
    let cols = tab.col_sums();
    if rows.is_empty() || cols.is_empty() {
        return Err(Error::Invalid("empty contingency table".into()));
    }
    if let Some(k) = rows.iter().position(|&s| s == 0) {
        return Err(Error::Invalid(format!("row '{}' has no observations", tab.row_labels[k])));
    }
    if let Some(k) = cols.iter().position(|&s| s == 0) {
        return Err(Error::Invalid(format!("column '{}' has no observations", tab.col_labels[k])));
    }
    let n = tab.total() as f64;
    let mut statistic = 0.0;
    for (r, row) in tab.counts.iter().enumerate() {
        for (c, &o) in row.iter().enumerate() {
            let e = rows[r] as f64 * cols[c] as f64 / n;
            statistic += (o as f64 - e).powi(2) / e;
        }
    }
    let df = (rows.len() - 1) * (cols.len() - 1);
    let p_value = if df == 0 {
        1.0
    } else {
        let dist = ChiSquared::new(df as f64).map_err(|e| Error::Numerical(e.to_string()))?;
        dist.sf(statistic)
    };
    Ok(ChiSquare { statistic, df, p_value })
}

/// One detector's result compared against a reference labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionComparison {
    pub method: PartitionSource,
    pub communities: usize,
    pub modularity: f64,
    pub crosstab: CrossTab,
    pub rand: f64,
    pub adjusted_rand: f64,
    pub chi_square: Option<ChiSquare>,
}

pub fn compare_with_reference(
    g: &WeightedCountryGraph,
    detected: &Partition,
    reference: &Partition,
) -> Result<PartitionComparison> {
    let crosstab = cross_tabulate(reference, detected)?;
    let ri = rand_indices(reference, detected)?;
    let chi = match chi_square(&crosstab) {
        Ok(c) => Some(c),
        Err(e) => {
            log::warn!("chi-square for {} skipped: {e}", detected.source());
            None
        }
    };
    Ok(PartitionComparison {
        method: detected.source(),
        communities: detected.n_communities(),
        modularity: modularity(g, detected.assignment())?,
        crosstab,
        rand: ri.rand,
        adjusted_rand: ri.adjusted_rand,
        chi_square: chi,
    })
}
