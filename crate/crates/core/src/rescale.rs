//! Coverage rescaling of country-pair densities.
//!
//! Observed log densities are regressed on each country's user count,
//! coverage (users over adult population) and mean degree, with separate
//! adjustments for within-country pairs. Projecting the fitted model to full
//! coverage (users = population, coverage = 1) gives the density expected
//! under a census. Rescaled counts follow
//!
//! ```text
//! T' = (c_i c_j)^-1 * (t'_proj / t_hat) * T
//! ```
//!
//! where `t_hat` is the model prediction at the observed coverage, and the
//! rescaled density is `t' = c_i c_j T' / Tmax = t * t'_proj / t_hat`.
//! Everything is carried in natural-log space.

use std::io::{Read, Write};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::densities::DensityMatrix;
use crate::error::{Error, Result};
use crate::ols::{fit_ols, OlsFit};

pub const N_TERMS: usize = 12;

pub const TERM_NAMES: [&str; N_TERMS] = [
    "intercept",
    "ln_users_1",
    "ln_users_2",
    "ln_coverage_1",
    "ln_coverage_2",
    "mean_degree_1",
    "mean_degree_2",
    "mean_degree_1x2",
    "same_country",
    "same_x_ln_users",
    "same_x_ln_coverage",
    "same_x_mean_degree",
];

/// One present pair's regression row. `slot1`/`slot2` are country indices
/// into the density matrix; between countries slot 1 holds the country with
/// more users (ties by code order).
#[derive(Debug, Clone, PartialEq)]
pub struct DesignRow {
    pub slot1: usize,
    pub slot2: usize,
    pub response: f64,
    pub x: [f64; N_TERMS],
}

#[derive(Debug, Clone, Copy)]
struct SlotValues {
    ln_users: f64,
    ln_coverage: f64,
    mean_degree: f64,
}

fn design_vector(a: SlotValues, b: SlotValues, same: bool) -> [f64; N_TERMS] {
    let s = if same { 1.0 } else { 0.0 };
    [
        1.0,
        a.ln_users,
        b.ln_users,
        a.ln_coverage,
        b.ln_coverage,
        a.mean_degree,
        b.mean_degree,
        a.mean_degree * b.mean_degree,
        s,
        s * a.ln_users,
        s * a.ln_coverage,
        s * a.mean_degree,
    ]
}

fn checked_coverage(dm: &DensityMatrix, i: usize) -> Result<f64> {
    let c = dm.coverage(i);
    if c > 0.0 && c <= 1.0 {
        Ok(c)
    } else {
        Err(Error::Invalid(format!(
            "{}: coverage {c} outside (0, 1] ({} users, population {})",
            dm.countries()[i],
            dm.users(i),
            dm.population(i)
        )))
    }
}

fn observed_slot(dm: &DensityMatrix, i: usize) -> Result<SlotValues> {
    Ok(SlotValues {
        ln_users: (dm.users(i) as f64).ln(),
        ln_coverage: checked_coverage(dm, i)?.ln(),
        mean_degree: dm.mean_degree(i),
    })
}

fn census_slot(dm: &DensityMatrix, i: usize) -> Result<SlotValues> {
    checked_coverage(dm, i)?;
    Ok(SlotValues {
        ln_users: dm.population(i).ln(),
        ln_coverage: 0.0,
        mean_degree: dm.mean_degree(i),
    })
}

/// Slot order for a pair: larger user count first, ties by index.
pub fn slot_order(dm: &DensityMatrix, i: usize, j: usize) -> (usize, usize) {
    if i == j {
        return (i, i);
    }
    let (ni, nj) = (dm.users(i), dm.users(j));
    if ni > nj || (ni == nj && i < j) {
        (i, j)
    } else {
        (j, i)
    }
}

fn row_for(dm: &DensityMatrix, i: usize, j: usize, census: bool) -> Result<(usize, usize, [f64; N_TERMS])> {
    let (a, b) = slot_order(dm, i, j);
    let slot = if census { census_slot } else { observed_slot };
    Ok((a, b, design_vector(slot(dm, a)?, slot(dm, b)?, a == b)))
}

/// One row per present pair, within- and between-country.
pub fn build_design(dm: &DensityMatrix) -> Result<Vec<DesignRow>> {
    dm.present_pairs()
        .map(|(i, j)| {
            let (slot1, slot2, x) = row_for(dm, i, j, false)?;
            Ok(DesignRow {
                slot1,
                slot2,
                response: dm.log_density(i, j).expect("present pair"),
                x,
            })
        })
        .collect()
}

/// Fitted rescaling regression.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaleModel {
    pub fit: OlsFit,
}

impl RescaleModel {
    pub fn coefficients(&self) -> &[f64] {
        &self.fit.coefficients
    }

    /// Model with fixed coefficients, for what-if projections.
    pub fn from_coefficients(coefficients: [f64; N_TERMS]) -> Self {
        RescaleModel {
            fit: OlsFit {
                names: TERM_NAMES.iter().map(|s| s.to_string()).collect(),
                coefficients: coefficients.to_vec(),
                std_errors: vec![f64::NAN; N_TERMS],
                t_values: vec![f64::NAN; N_TERMS],
                r_squared: f64::NAN,
                adj_r_squared: f64::NAN,
                sigma2: f64::NAN,
                rss: f64::NAN,
                n: 0,
            },
        }
    }

    fn predict(&self, x: &[f64; N_TERMS]) -> f64 {
        self.fit.predict(x)
    }

    /// `ln t_hat`: prediction at observed users and coverage.
    pub fn predict_observed(&self, dm: &DensityMatrix, i: usize, j: usize) -> Result<f64> {
        Ok(self.predict(&row_for(dm, i, j, false)?.2))
    }

    /// `ln t'`: prediction with users set to population and coverage to 1,
    /// mean degrees held at their observed values.
    pub fn project_full_population(&self, dm: &DensityMatrix, i: usize, j: usize) -> Result<f64> {
        if i >= dm.n() || j >= dm.n() {
            return Err(Error::UnknownCountry(format!("index {i} or {j} outside the density matrix")));
        }
        Ok(self.predict(&row_for(dm, i, j, true)?.2))
    }
}

/// Fits the rescaling regression. Terms whose column is identically zero
/// (the coverage terms when every country is fully covered) are left out of
/// the fit and keep a coefficient of 0.
pub fn fit_rescale_model(rows: &[DesignRow]) -> Result<RescaleModel> {
    let n = rows.len();
    if n == 0 {
        return Err(Error::Invalid("no country pairs with ties to fit the rescale model".into()));
    }
    let kept: Vec<usize> = (0..N_TERMS).filter(|&c| rows.iter().any(|r| r.x[c] != 0.0)).collect();
    for c in (0..N_TERMS).filter(|c| !kept.contains(c)) {
        log::warn!("rescale term {} is zero on every row and is fixed at 0", TERM_NAMES[c]);
    }
    let x = DMatrix::from_fn(n, kept.len(), |r, c| rows[r].x[kept[c]]);
    let y = DVector::from_fn(n, |r, _| rows[r].response);
    let names: Vec<String> = kept.iter().map(|&c| TERM_NAMES[c].to_string()).collect();
    let reduced = fit_ols(&x, &y, &names)?;
    let mut fit = OlsFit {
        names: TERM_NAMES.iter().map(|s| s.to_string()).collect(),
        coefficients: vec![0.0; N_TERMS],
        std_errors: vec![f64::NAN; N_TERMS],
        t_values: vec![f64::NAN; N_TERMS],
        ..reduced.clone()
    };
    for (k, &c) in kept.iter().enumerate() {
        fit.coefficients[c] = reduced.coefficients[k];
        fit.std_errors[c] = reduced.std_errors[k];
        fit.t_values[c] = reduced.t_values[k];
    }
    Ok(RescaleModel { fit })
}

/// `ln T' = ln T - ln c_i - ln c_j + ln t'_proj - ln t_hat`.
pub fn rescale_count_ln(ln_ties: f64, ln_c_i: f64, ln_c_j: f64, ln_t_projected: f64, ln_t_hat: f64) -> f64 {
    ln_ties - ln_c_i - ln_c_j + ln_t_projected - ln_t_hat
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescaledPair {
    pub i: CountryCode,
    pub j: CountryCode,
    /// Log rescaled density, `ln(c_i c_j T' / Tmax)`.
    pub ln_t_prime: f64,
    pub t_prime: f64,
    /// `ln t' - ln t'_min`; between-country pairs only.
    pub weight: Option<f64>,
}

impl RescaledPair {
    pub fn is_within(&self) -> bool {
        self.i == self.j
    }
}

/// Rescaled densities and counts for every present pair.
#[derive(Debug, Clone, PartialEq)]
pub struct RescaledNetwork {
    countries: Vec<CountryCode>,
    pairs: Vec<RescaledPair>,
    ln_t_prime_min: Option<f64>,
}

impl RescaledNetwork {
    /// Builds the network and assigns weights relative to the smallest
    /// between-country log density.
    pub fn new(countries: Vec<CountryCode>, mut pairs: Vec<RescaledPair>) -> Self {
        for p in &mut pairs {
            if p.i > p.j {
                std::mem::swap(&mut p.i, &mut p.j);
            }
        }
        pairs.sort_by(|a, b| (a.i, a.j).cmp(&(b.i, b.j)));
        let ln_t_prime_min = pairs
            .iter()
            .filter(|p| !p.is_within())
            .map(|p| p.ln_t_prime)
            .min_by(f64::total_cmp);
        for p in &mut pairs {
            p.weight = match ln_t_prime_min {
                Some(min) if !p.is_within() => Some(p.ln_t_prime - min),
                _ => None,
            };
        }
        RescaledNetwork {
            countries,
            pairs,
            ln_t_prime_min,
        }
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn pairs(&self) -> &[RescaledPair] {
        &self.pairs
    }

    pub fn between_pairs(&self) -> impl Iterator<Item = &RescaledPair> {
        self.pairs.iter().filter(|p| !p.is_within())
    }

    pub fn ln_t_prime_min(&self) -> Option<f64> {
        self.ln_t_prime_min
    }

    pub fn get(&self, a: CountryCode, b: CountryCode) -> Option<&RescaledPair> {
        let key = if a <= b { (a, b) } else { (b, a) };
        self.pairs
            .binary_search_by(|p| (p.i, p.j).cmp(&key))
            .ok()
            .map(|k| &self.pairs[k])
    }

    /// Edge weight of a present between-country pair.
    pub fn edge_weight(&self, a: CountryCode, b: CountryCode) -> Option<f64> {
        self.get(a, b).and_then(|p| p.weight)
    }
}

/// Applies the fitted model to every present pair.
pub fn rescale(dm: &DensityMatrix, model: &RescaleModel) -> Result<RescaledNetwork> {
    let mut pairs = Vec::new();
    for (i, j) in dm.present_pairs() {
        let ln_t = dm.log_density(i, j).expect("present pair");
        let ln_hat = model.predict_observed(dm, i, j)?;
        let ln_proj = model.project_full_population(dm, i, j)?;
        let ln_ci = checked_coverage(dm, i)?.ln();
        let ln_cj = checked_coverage(dm, j)?.ln();
        let ln_t_count = rescale_count_ln((dm.ties(i, j) as f64).ln(), ln_ci, ln_cj, ln_proj, ln_hat);
        pairs.push(RescaledPair {
            i: dm.countries()[i],
            j: dm.countries()[j],
            ln_t_prime: ln_t + ln_proj - ln_hat,
            t_prime: ln_t_count.exp(),
            weight: None,
        });
    }
    Ok(RescaledNetwork::new(dm.countries().to_vec(), pairs))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes `i,j,ln_t_prime,T_prime,w`; `w` is empty for within-country rows.
pub fn write_rescaled_csv<W: Write>(writer: W, net: &RescaledNetwork) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "ln_t_prime", "T_prime", "w"])?;
    for p in &net.pairs {
        w.write_record([
            p.i.to_string(),
            p.j.to_string(),
            p.ln_t_prime.to_string(),
            p.t_prime.to_string(),
            fmt_opt(p.weight),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<rescaled writer>", e))?;
    Ok(())
}

/// Reads `rescaled.csv`. The country list is every code that appears; pass
/// `countries` to include countries without any present pair.
pub fn read_rescaled_csv<R: Read>(reader: R, countries: Option<&[CountryCode]>) -> Result<RescaledNetwork> {
    let mut r = csv::Reader::from_reader(reader);
    let mut pairs = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Parse {
            source_name: "rescaled.csv".into(),
            record: n as u64 + 1,
            message: m.to_string(),
        };
        let code = |k: usize| CountryCode::new(rec.get(k).unwrap_or("")).ok_or_else(|| bad("bad country code"));
        let num = |k: usize| rec.get(k).unwrap_or("").parse::<f64>().map_err(|_| bad("bad number"));
        pairs.push(RescaledPair {
            i: code(0)?,
            j: code(1)?,
            ln_t_prime: num(2)?,
            t_prime: num(3)?,
            weight: None,
        });
    }
    let mut all: Vec<CountryCode> = pairs.iter().flat_map(|p| [p.i, p.j]).collect();
    if let Some(extra) = countries {
        all.extend_from_slice(extra);
    }
    all.sort_unstable();
    all.dedup();
    Ok(RescaledNetwork::new(all, pairs))
}
