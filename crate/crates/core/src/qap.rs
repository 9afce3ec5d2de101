//! Graph correlation and the quadratic assignment permutation test.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::partition::Partition;
use crate::rescale::RescaledNetwork;

/// How cells without a value enter the correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentCells {
    /// Absent cells count as weight 0.
    #[default]
    Zero,
    /// Absent cells are left out.
    Drop,
}

/// Symmetric country-by-country matrix with optional off-diagonal cells.
#[derive(Debug, Clone, PartialEq)]
pub struct PairMatrix {
    countries: Vec<CountryCode>,
    cells: Vec<Option<f64>>,
}

impl PairMatrix {
    pub fn new(countries: Vec<CountryCode>) -> Self {
        let n = countries.len();
        PairMatrix {
            countries,
            cells: vec![None; n * n],
        }
    }

    pub fn from_fn(countries: Vec<CountryCode>, f: impl Fn(usize, usize) -> Option<f64>) -> Self {
        let mut m = PairMatrix::new(countries);
        let n = m.n();
        for i in 0..n {
            for j in i + 1..n {
                if let Some(v) = f(i, j) {
                    m.set(i, j, v);
                }
            }
        }
        m
    }

    /// Normalised log densities `w` of the between-country pairs.
    pub fn from_rescaled(net: &RescaledNetwork) -> Self {
        let countries = net.countries().to_vec();
        let mut m = PairMatrix::new(countries.clone());
        for p in net.between_pairs() {
            let i = countries.iter().position(|c| *c == p.i);
            let j = countries.iter().position(|c| *c == p.j);
            if let (Some(i), Some(j), Some(w)) = (i, j, p.weight) {
                m.set(i, j, w);
            }
        }
        m
    }

    /// Co-membership graph: 1 for countries in the same community, else 0.
    pub fn label_graph(partition: &Partition) -> Self {
        let a = partition.assignment();
        PairMatrix::from_fn(partition.countries().to_vec(), |i, j| {
            Some(if a[i] == a[j] { 1.0 } else { 0.0 })
        })
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        let n = self.n();
        self.cells[i * n + j] = Some(v);
        self.cells[j * n + i] = Some(v);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.cells[i * self.n() + j]
    }

    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    /// Upper-triangle cells `(i, j, value)` after applying `absent`.
    pub fn upper_cells(&self, absent: AbsentCells) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        let mut out = Vec::with_capacity(n * n.saturating_sub(1) / 2);
        for i in 0..n {
            for j in i + 1..n {
                match (self.get(i, j), absent) {
                    (Some(v), _) => out.push((i, j, v)),
                    (None, AbsentCells::Zero) => out.push((i, j, 0.0)),
                    (None, AbsentCells::Drop) => {}
                }
            }
        }
        out
    }
}

fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    let n = x.len();
    if n < 2 {
        return Err(Error::ZeroVariance("fewer than two cells to correlate".into()));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 {
        return Err(Error::ZeroVariance("first matrix is constant".into()));
    }
    if syy == 0.0 {
        return Err(Error::ZeroVariance("second matrix is constant".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation over the off-diagonal cells `i < j` of two matrices on
/// the same countries. A cell is dropped under [`AbsentCells::Drop`] when it
/// is absent from either matrix.
pub fn graph_correlation(a: &PairMatrix, b: &PairMatrix, absent: AbsentCells) -> Result<f64> {
    if a.countries() != b.countries() {
        return Err(Error::Invalid("matrices are indexed by different countries".into()));
    }
    let n = a.n();
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            let (va, vb) = (a.get(i, j), b.get(i, j));
            if absent == AbsentCells::Drop && (va.is_none() || vb.is_none()) {
                continue;
            }
            x.push(va.unwrap_or(0.0));
            y.push(vb.unwrap_or(0.0));
        }
    }
    pearson(&x, &y)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QapConfig {
    pub permutations: usize,
    pub seed: u64,
    pub absent_cells: AbsentCells,
}

impl Default for QapConfig {
    fn default() -> Self {
        QapConfig {
            permutations: 10_000,
            seed: 1,
            absent_cells: AbsentCells::Zero,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QapResult {
    pub observed_r: f64,
    pub permutations: usize,
    pub exceedances: usize,
    pub p_value: f64,
    pub permuted_max: f64,
    pub permuted_mean: f64,
    pub permuted_sd: f64,
    pub seed: u64,
    pub absent_cells: AbsentCells,
}

/// The node permutation used for iteration `k`: a Fisher-Yates shuffle
/// driven by stream `k` of the generator seeded with `seed`, so every
/// iteration is reproducible on its own.
pub fn permutation_for(seed: u64, k: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(k);
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng);
    perm
}

/// Correlation of `cells` with the co-membership graph of `labels` after
/// relabelling node `i` as `perm[i]`.
fn permuted_r(cells: &[(usize, usize, f64)], labels: &[usize], perm: &[usize]) -> Result<f64> {
    let x: Vec<f64> = cells.iter().map(|c| c.2).collect();
    let y: Vec<f64> = cells
        .iter()
        .map(|&(i, j, _)| if labels[perm[i]] == labels[perm[j]] { 1.0 } else { 0.0 })
        .collect();
    pearson(&x, &y)
}

struct Prepared {
    cells: Vec<(usize, usize, f64)>,
    labels: Vec<usize>,
}

fn prepare(a: &PairMatrix, labels: &Partition, absent: AbsentCells) -> Result<Prepared> {
    let n = a.n();
    let mut aligned = Vec::with_capacity(n);
    for c in a.countries() {
        aligned.push(
            labels
                .community_of(*c)
                .ok_or_else(|| Error::Invalid(format!("country {c} has no label")))?,
        );
    }
    if labels.len() != n {
        return Err(Error::Invalid("labels cover countries outside the matrix".into()));
    }
    Ok(Prepared {
        cells: a.upper_cells(absent),
        labels: aligned,
    })
}

/// Correlations under each of the `config.permutations` label permutations,
/// in iteration order.
pub fn qap_distribution(a: &PairMatrix, labels: &Partition, config: &QapConfig) -> Result<Vec<f64>> {
    let prep = prepare(a, labels, config.absent_cells)?;
    let n = a.n();
    (0..config.permutations as u64)
        .into_par_iter()
        .map(|k| permuted_r(&prep.cells, &prep.labels, &permutation_for(config.seed, k, n)))
        .collect()
}

/// Correlation of `a` with the co-membership graph of `labels`, and its
/// permutation p-value `(#{r_perm >= r_obs} + 1) / (n_perm + 1)`.
pub fn qap_test(a: &PairMatrix, labels: &Partition, config: &QapConfig) -> Result<QapResult> {
    if config.permutations == 0 {
        return Err(Error::Invalid("QAP needs at least one permutation".into()));
    }
    let prep = prepare(a, labels, config.absent_cells)?;
    let identity: Vec<usize> = (0..a.n()).collect();
    let observed_r = permuted_r(&prep.cells, &prep.labels, &identity)?;
    let dist = qap_distribution(a, labels, config)?;
    let exceedances = dist.iter().filter(|&&r| r >= observed_r).count();
    let m = dist.len() as f64;
    let mean = dist.iter().sum::<f64>() / m;
    let var = if dist.len() > 1 {
        dist.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(QapResult {
        observed_r,
        permutations: config.permutations,
        exceedances,
        p_value: (exceedances as f64 + 1.0) / (m + 1.0),
        permuted_max: dist.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        permuted_mean: mean,
        permuted_sd: var.sqrt(),
        seed: config.seed,
        absent_cells: config.absent_cells,
    })
}
