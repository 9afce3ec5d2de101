//! Dyadic covariate table and linear mixed models with crossed country
//! effects.

use std::collections::BTreeMap;

use nalgebra::{Cholesky, DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::country::{Civilization, CountryCode};
use crate::error::{Error, Result};
use crate::geo::haversine_km;
use crate::ingest::{CountryMeta, CountryRegistry, DyadTable};
use crate::ols::check_full_rank;
use crate::rescale::RescaledNetwork;

pub const INTERCEPT: &str = "(Intercept)";

pub const COVARIATE_NAMES: [&str; 25] = [
    "mean_gdp",
    "diff_gdp",
    "trade_affinity",
    "common_civilization",
    "pdi_mean",
    "pdi_diff",
    "idv_mean",
    "idv_diff",
    "mas_mean",
    "mas_diff",
    "uai_mean",
    "uai_diff",
    "trust_mean",
    "trust_diff",
    "common_language",
    "colonial_link",
    "commonwealth_link",
    "ln_pop_mean",
    "ln_pop_ratio",
    "ln_distance",
    "same_region",
    "contiguous",
    "visa_required",
    "ln_flights",
    "both_eea",
];

pub fn covariate_index(name: &str) -> Option<usize> {
    COVARIATE_NAMES.iter().position(|n| *n == name)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Imputation {
    /// Missing trade affinities take the mean of the observed ones.
    #[default]
    Mean,
    /// Missing trade affinities take the smallest observed one.
    Min,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DyadRow {
    pub a: CountryCode,
    pub b: CountryCode,
    pub civ_a: Civilization,
    pub civ_b: Civilization,
    /// Log rescaled density.
    pub response: f64,
    /// Values in [`COVARIATE_NAMES`] order.
    pub covariates: Vec<f64>,
    pub trade_imputed: bool,
}

impl DyadRow {
    pub fn get(&self, name: &str) -> Option<f64> {
        covariate_index(name).map(|k| self.covariates[k])
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DyadDataset {
    pub rows: Vec<DyadRow>,
    /// Complete-case countries, sorted.
    pub countries: Vec<CountryCode>,
    /// Network countries left out for missing covariates.
    pub dropped_countries: Vec<CountryCode>,
    pub imputed_trade: usize,
    /// Present pairs with no dyad metadata row (binary covariates read as 0).
    pub missing_dyad_meta: usize,
}

fn bool01(b: bool) -> f64 {
    if b {
        1.0
    } else {
        0.0
    }
}

fn mean_diff(x: f64, y: f64) -> (f64, f64) {
    ((x + y) / 2.0, (x - y).abs())
}

/// Covariates of one pair, with the trade affinity left as `None` when it
/// cannot be computed.
fn pair_covariates(ma: &CountryMeta, mb: &CountryMeta, dyads: &DyadTable) -> Result<(Vec<f64>, Option<f64>, bool)> {
    let missing = |c: &CountryMeta, what: &str| Error::Invalid(format!("country {} lacks {what}", c.code));
    let ga = ma.gdp_per_capita.ok_or_else(|| missing(ma, "GDP"))? / 1000.0;
    let gb = mb.gdp_per_capita.ok_or_else(|| missing(mb, "GDP"))? / 1000.0;
    let ha = ma.hofstede.ok_or_else(|| missing(ma, "Hofstede scores"))?;
    let hb = mb.hofstede.ok_or_else(|| missing(mb, "Hofstede scores"))?;
    let ta = ma.gen_trust.ok_or_else(|| missing(ma, "trust"))?;
    let tb = mb.gen_trust.ok_or_else(|| missing(mb, "trust"))?;
    let ra = ma.region.as_ref().ok_or_else(|| missing(ma, "region"))?;
    let rb = mb.region.as_ref().ok_or_else(|| missing(mb, "region"))?;
    let meta = dyads.get(ma.code, mb.code);

    let trade = meta.and_then(|d| d.trade_flow).and_then(|flow| {
        let denom = (dyads.total_trade(ma.code) * dyads.total_trade(mb.code)).sqrt();
        (flow > 0.0 && denom > 0.0).then(|| (flow / denom).ln())
    });
    let distance = meta
        .and_then(|d| d.distance_km)
        .unwrap_or_else(|| haversine_km(ma.centroid, mb.centroid))
        .max(1.0);
    let (gdp_mean, gdp_diff) = mean_diff(ga, gb);
    let (pdi_m, pdi_d) = mean_diff(ha.pdi, hb.pdi);
    let (idv_m, idv_d) = mean_diff(ha.idv, hb.idv);
    let (mas_m, mas_d) = mean_diff(ha.mas, hb.mas);
    let (uai_m, uai_d) = mean_diff(ha.uai, hb.uai);
    let (tr_m, tr_d) = mean_diff(ta, tb);
    let (pa, pb) = (ma.population, mb.population);
    let values = vec![
        gdp_mean,
        gdp_diff,
        trade.unwrap_or(f64::NAN),
        bool01(ma.civilization == mb.civilization),
        pdi_m,
        pdi_d,
        idv_m,
        idv_d,
        mas_m,
        mas_d,
        uai_m,
        uai_d,
        tr_m,
        tr_d,
        bool01(!ma.languages.is_disjoint(&mb.languages)),
        bool01(meta.is_some_and(|d| d.colonial_link)),
        bool01(meta.is_some_and(|d| d.commonwealth_link)),
        0.5 * (pa.ln() + pb.ln()),
        (pa.min(pb) / pa.max(pb)).ln(),
        distance.ln(),
        bool01(ra == rb),
        bool01(meta.is_some_and(|d| d.contiguous)),
        bool01(meta.is_some_and(|d| d.visa_required)),
        meta.map_or(0.0, |d| d.direct_flights).ln_1p(),
        bool01(ma.eea_member && mb.eea_member),
    ];
    Ok((values, trade, meta.is_none()))
}

/// One row per present between-country pair of the complete-case countries.
pub fn build_dyad_table(
    net: &RescaledNetwork,
    registry: &CountryRegistry,
    dyads: &DyadTable,
    impute: Imputation,
) -> Result<DyadDataset> {
    let mut countries = Vec::new();
    let mut dropped_countries = Vec::new();
    for &c in net.countries() {
        match registry.get(c) {
            Some(m) if m.has_complete_covariates() => countries.push(c),
            _ => dropped_countries.push(c),
        }
    }
    countries.sort();
    let keep: std::collections::BTreeSet<CountryCode> = countries.iter().copied().collect();
    let trade_col = covariate_index("trade_affinity").expect("trade column");

    let mut rows = Vec::new();
    let mut missing_dyad_meta = 0;
    for p in net.between_pairs() {
        if !keep.contains(&p.i) || !keep.contains(&p.j) {
            continue;
        }
        let (a, b) = crate::ingest::canonical_pair(p.i, p.j);
        let (ma, mb) = (registry.get(a).expect("kept"), registry.get(b).expect("kept"));
        let (covariates, trade, no_meta) = pair_covariates(ma, mb, dyads)?;
        missing_dyad_meta += usize::from(no_meta);
        rows.push(DyadRow {
            a,
            b,
            civ_a: ma.civilization,
            civ_b: mb.civilization,
            response: p.ln_t_prime,
            covariates,
            trade_imputed: trade.is_none(),
        });
    }
    let observed: Vec<f64> = rows
        .iter()
        .filter(|r| !r.trade_imputed)
        .map(|r| r.covariates[trade_col])
        .collect();
    let imputed_trade = rows.len() - observed.len();
    if imputed_trade > 0 {
        if observed.is_empty() {
            return Err(Error::Invalid("no dyad has an observed trade flow to impute from".into()));
        }
        let fill = match impute {
            Imputation::Mean => observed.iter().sum::<f64>() / observed.len() as f64,
            Imputation::Min => observed.iter().copied().fold(f64::INFINITY, f64::min),
        };
        for r in rows.iter_mut().filter(|r| r.trade_imputed) {
            r.covariates[trade_col] = fill;
        }
    }
    if missing_dyad_meta > 0 {
        log::warn!("{missing_dyad_meta} pairs have no dyad metadata; their binary dyad covariates are 0");
    }
    Ok(DyadDataset {
        rows,
        countries,
        dropped_countries,
        imputed_trade,
        missing_dyad_meta,
    })
}

/// Response, fixed-effect design and country slots for an LMM fit.
#[derive(Debug, Clone)]
pub struct LmmData {
    pub y: DVector<f64>,
    pub x: DMatrix<f64>,
    pub names: Vec<String>,
    /// Country index of each row's first and second slot.
    pub slot1: Vec<usize>,
    pub slot2: Vec<usize>,
    pub n_countries: usize,
}

impl LmmData {
    pub fn new(
        y: DVector<f64>,
        x: DMatrix<f64>,
        names: Vec<String>,
        slot1: Vec<usize>,
        slot2: Vec<usize>,
    ) -> Result<Self> {
        let n = y.len();
        if x.nrows() != n || slot1.len() != n || slot2.len() != n || names.len() != x.ncols() {
            return Err(Error::Invalid("LMM inputs have inconsistent sizes".into()));
        }
        let n_countries = slot1.iter().chain(&slot2).max().map_or(0, |m| m + 1);
        Ok(LmmData {
            y,
            x,
            names,
            slot1,
            slot2,
            n_countries,
        })
    }

    pub fn n(&self) -> usize {
        self.y.len()
    }

    /// Same rows with only an intercept as fixed effect.
    pub fn intercept_only(&self) -> LmmData {
        LmmData {
            y: self.y.clone(),
            x: DMatrix::from_element(self.n(), 1, 1.0),
            names: vec![INTERCEPT.to_string()],
            slot1: self.slot1.clone(),
            slot2: self.slot2.clone(),
            n_countries: self.n_countries,
        }
    }
}

/// Design from named columns: an intercept followed by `columns`.
pub fn design_from_columns(dataset: &DyadDataset, columns: &[(String, Vec<f64>)]) -> Result<LmmData> {
    let rows = &dataset.rows;
    let n = rows.len();
    let index: BTreeMap<CountryCode, usize> = dataset.countries.iter().enumerate().map(|(k, c)| (*c, k)).collect();
    let slot = |c: CountryCode| {
        index
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Invalid(format!("row country {c} outside the dataset")))
    };
    let slot1 = rows.iter().map(|r| slot(r.a)).collect::<Result<Vec<_>>>()?;
    let slot2 = rows.iter().map(|r| slot(r.b)).collect::<Result<Vec<_>>>()?;
    let mut names = vec![INTERCEPT.to_string()];
    names.extend(columns.iter().map(|c| c.0.clone()));
    let x = DMatrix::from_fn(n, names.len(), |i, j| if j == 0 { 1.0 } else { columns[j - 1].1[i] });
    let y = DVector::from_iterator(n, rows.iter().map(|r| r.response));
    let mut data = LmmData::new(y, x, names, slot1, slot2)?;
    data.n_countries = dataset.countries.len();
    Ok(data)
}

/// Design with an intercept and the named covariates.
pub fn design(dataset: &DyadDataset, covariates: &[&str]) -> Result<LmmData> {
    let columns = covariates
        .iter()
        .map(|name| {
            let k = covariate_index(name).ok_or_else(|| Error::Invalid(format!("unknown covariate '{name}'")))?;
            Ok((name.to_string(), dataset.rows.iter().map(|r| r.covariates[k]).collect()))
        })
        .collect::<Result<Vec<_>>>()?;
    design_from_columns(dataset, &columns)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LmmConfig {
    pub reml: bool,
    /// One effect per country whichever slot it occupies, instead of one
    /// effect set per slot.
    pub shared_country_effect: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Coefficient {
    pub name: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub stars: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceComponents {
    /// Slot-one country variance, or the shared country variance.
    pub country1: f64,
    /// Slot-two country variance; absent with a shared country effect.
    pub country2: Option<f64>,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LmmFit {
    pub coefficients: Vec<Coefficient>,
    pub variances: VarianceComponents,
    /// Relative standard deviations `sigma_k / sigma`.
    pub theta: Vec<f64>,
    pub log_likelihood: f64,
    pub deviance: f64,
    pub aic: f64,
    pub mcfadden_r2: f64,
    pub n_dyads: usize,
    pub n_countries: usize,
    /// Some variance component sits at zero.
    pub boundary: bool,
    pub reml: bool,
    pub shared_country_effect: bool,
    pub evaluations: usize,
}

impl LmmFit {
    pub fn coefficient(&self, name: &str) -> Option<&Coefficient> {
        self.coefficients.iter().find(|c| c.name == name)
    }
}

/// `e^beta`, the factor by which density changes per unit of a covariate.
pub fn density_multiplier(beta: f64) -> f64 {
    beta.exp()
}

/// Significance marks: `*` p < .10, `**` p < .05, `***` p < .01.
pub fn stars(p: f64) -> &'static str {
    if p < 0.01 {
        "***"
    } else if p < 0.05 {
        "**"
    } else if p < 0.10 {
        "*"
    } else {
        ""
    }
}

/// Cross products that the profiled deviance needs, computed once.
struct Crossprods {
    n: usize,
    p: usize,
    /// Random-effect column count per variance component.
    sizes: Vec<usize>,
    ztz: DMatrix<f64>,
    ztx: DMatrix<f64>,
    zty: DVector<f64>,
    xtx: DMatrix<f64>,
    xty: DVector<f64>,
    yty: f64,
}

impl Crossprods {
    fn new(data: &LmmData, shared: bool) -> Self {
        let nc = data.n_countries;
        let (q, sizes) = if shared { (nc, vec![nc]) } else { (2 * nc, vec![nc, nc]) };
        let col2 = |c: usize| if shared { c } else { nc + c };
        let (n, p) = data.x.shape();
        let mut ztz = DMatrix::zeros(q, q);
        let mut ztx = DMatrix::zeros(q, p);
        let mut zty = DVector::zeros(q);
        for r in 0..n {
            let (u, v) = (data.slot1[r], col2(data.slot2[r]));
            ztz[(u, u)] += 1.0;
            ztz[(v, v)] += 1.0;
            ztz[(u, v)] += 1.0;
            ztz[(v, u)] += 1.0;
            for k in 0..p {
                let xv = data.x[(r, k)];
                ztx[(u, k)] += xv;
                ztx[(v, k)] += xv;
            }
            zty[u] += data.y[r];
            zty[v] += data.y[r];
        }
        Crossprods {
            n,
            p,
            sizes,
            ztz,
            ztx,
            zty,
            xtx: data.x.transpose() * &data.x,
            xty: data.x.transpose() * &data.y,
            yty: data.y.norm_squared(),
        }
    }

    fn lambda(&self, theta: &[f64]) -> DVector<f64> {
        let mut d = Vec::with_capacity(self.ztz.nrows());
        for (k, &s) in self.sizes.iter().enumerate() {
            d.extend(std::iter::repeat_n(theta[k], s));
        }
        DVector::from_vec(d)
    }
}

/// Penalised least-squares solution at one `theta`.
struct Profile {
    deviance: f64,
    beta: DVector<f64>,
    /// `(X' V^-1 X)^-1` with `V = I + Z Lambda Lambda' Z'`.
    xtvx_inv: DMatrix<f64>,
    sigma2: f64,
}

fn profile(cp: &Crossprods, theta: &[f64], reml: bool) -> Option<Profile> {
    let lam = cp.lambda(theta);
    let q = lam.len();
    // A = Lambda Z'Z Lambda + I
    let mut a = cp.ztz.clone();
    for i in 0..q {
        for j in 0..q {
            a[(i, j)] *= lam[i] * lam[j];
        }
        a[(i, i)] += 1.0;
    }
    let chol = Cholesky::new(a)?;
    let l = chol.l();
    let lzx = DMatrix::from_fn(q, cp.p, |i, j| lam[i] * cp.ztx[(i, j)]);
    let lzy = DVector::from_fn(q, |i, _| lam[i] * cp.zty[i]);
    let rzx = l.solve_lower_triangular(&lzx)?;
    let cu = l.solve_lower_triangular(&lzy)?;
    let xtvx = &cp.xtx - rzx.transpose() * &rzx;
    let rhs = &cp.xty - rzx.transpose() * &cu;
    let xchol = Cholesky::new(xtvx)?;
    let beta = xchol.solve(&rhs);
    let r2 = (cp.yty - cu.norm_squared() - rhs.dot(&beta)).max(0.0);
    let log_det_l: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let n = cp.n as f64;
    let two_pi = 2.0 * std::f64::consts::PI;
    let (deviance, sigma2) = if reml {
        let log_det_x: f64 = 2.0 * xchol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let dof = n - cp.p as f64;
        (
            log_det_l + log_det_x + dof * (1.0 + (two_pi * r2 / dof).ln()),
            r2 / dof,
        )
    } else {
        (log_det_l + n * (1.0 + (two_pi * r2 / n).ln()), r2 / n)
    };
    if !deviance.is_finite() {
        return None;
    }
    Some(Profile {
        deviance,
        beta,
        xtvx_inv: xchol.inverse(),
        sigma2,
    })
}

/// Nelder-Mead minimisation. Returns the best point, its value and the
/// number of evaluations.
pub fn nelder_mead<F: FnMut(&[f64]) -> f64>(
    mut f: F,
    start: &[f64],
    step: f64,
    tol: f64,
    max_evals: usize,
) -> Result<(Vec<f64>, f64, usize)> {
    let d = start.len();
    let mut simplex: Vec<Vec<f64>> = vec![start.to_vec()];
    for k in 0..d {
        let mut p = start.to_vec();
        p[k] += step;
        simplex.push(p);
    }
    let mut values: Vec<f64> = simplex.iter().map(|p| f(p)).collect();
    let mut evals = d + 1;
    loop {
        let mut order: Vec<usize> = (0..=d).collect();
        order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
        simplex = order.iter().map(|&k| simplex[k].clone()).collect();
        values = order.iter().map(|&k| values[k]).collect();
        let spread = values[d] - values[0];
        let size = simplex[1..]
            .iter()
            .flat_map(|p| p.iter().zip(&simplex[0]).map(|(a, b)| (a - b).abs()))
            .fold(0.0, f64::max);
        if spread <= tol * (1.0 + values[0].abs()) && size <= tol.sqrt() {
            return Ok((simplex[0].clone(), values[0], evals));
        }
        if evals >= max_evals {
            return Err(Error::NonConvergence {
                what: "Nelder-Mead".into(),
                iterations: evals,
                detail: format!("best {:?} = {}, value spread {spread:e}, simplex size {size:e}", simplex[0], values[0]),
            });
        }
        let centroid: Vec<f64> = (0..d).map(|k| simplex[..d].iter().map(|p| p[k]).sum::<f64>() / d as f64).collect();
        let along = |t: f64| -> Vec<f64> { (0..d).map(|k| centroid[k] + t * (simplex[d][k] - centroid[k])).collect() };
        let xr = along(-1.0);
        let fr = f(&xr);
        evals += 1;
        if fr < values[0] {
            let xe = along(-2.0);
            let fe = f(&xe);
            evals += 1;
            if fe < fr {
                simplex[d] = xe;
                values[d] = fe;
            } else {
                simplex[d] = xr;
                values[d] = fr;
            }
        } else if fr < values[d - 1] {
            simplex[d] = xr;
            values[d] = fr;
        } else {
            let (xc, fc) = if fr < values[d] {
                let x = along(-0.5);
                let v = f(&x);
                (x, v)
            } else {
                let x = along(0.5);
                let v = f(&x);
                (x, v)
            };
            evals += 1;
            if fc < values[d].min(fr) {
                simplex[d] = xc;
                values[d] = fc;
            } else {
                for k in 1..=d {
                    let p: Vec<f64> = (0..d).map(|j| simplex[0][j] + 0.5 * (simplex[k][j] - simplex[0][j])).collect();
                    values[k] = f(&p);
                    simplex[k] = p;
                    evals += 1;
                }
            }
        }
    }
}

pub const LMM_TOL: f64 = 1e-8;
const LMM_MAX_EVALS: usize = 20_000;

/// Fits `y = X beta + Z1 u + Z2 v + e` by maximum likelihood (or REML),
/// profiling out `beta` and `sigma^2` and minimising the deviance over the
/// relative standard deviations of the country effects.
pub fn fit_lmm(data: &LmmData, config: &LmmConfig) -> Result<LmmFit> {
    let fit = fit_lmm_inner(data, config)?;
    let null_ll = if data.x.ncols() == 1 {
        fit.0.log_likelihood
    } else {
        fit_lmm_inner(&data.intercept_only(), config)?.0.log_likelihood
    };
    let mut out = fit.0;
    out.mcfadden_r2 = if data.x.ncols() == 1 {
        0.0
    } else {
        1.0 - out.log_likelihood / null_ll
    };
    Ok(out)
}

fn fit_lmm_inner(data: &LmmData, config: &LmmConfig) -> Result<(LmmFit, Vec<f64>)> {
    let (n, p) = data.x.shape();
    if n <= p {
        return Err(Error::Invalid(format!("{n} dyads cannot fit {p} fixed effects")));
    }
    let distinct = |s: &[usize]| s.iter().collect::<std::collections::BTreeSet<_>>().len();
    if distinct(&data.slot1) < 2 || distinct(&data.slot2) < 2 {
        return Err(Error::Invalid("each random-effect factor needs at least two countries".into()));
    }
    check_full_rank(&data.x, &data.names)?;
    let cp = Crossprods::new(data, config.shared_country_effect);
    let k = cp.sizes.len();
    let objective = |t: &[f64]| -> f64 {
        let abs: Vec<f64> = t.iter().map(|v| v.abs()).collect();
        profile(&cp, &abs, config.reml).map_or(f64::INFINITY, |pr| pr.deviance)
    };
    let (mut theta, mut best, mut evals) = nelder_mead(objective, &vec![1.0; k], 0.5, LMM_TOL, LMM_MAX_EVALS)?;
    // Restart from the optimum to shake off a collapsed simplex.
    let (t2, b2, e2) = nelder_mead(objective, &theta, 0.1, LMM_TOL, LMM_MAX_EVALS)?;
    evals += e2;
    if b2 <= best {
        theta = t2;
        best = b2;
    }
    theta.iter_mut().for_each(|v| *v = v.abs());
    // Zero components: keep any that the optimiser cannot beat.
    let slack = 1e-10 * (1.0 + best.abs());
    for c in 0..k {
        let mut trial = theta.clone();
        trial[c] = 0.0;
        let v = objective(&trial);
        evals += 1;
        if v <= best + slack {
            theta = trial;
            best = best.min(v);
        }
    }
    let corner = vec![0.0; k];
    let v0 = objective(&corner);
    if v0 < best {
        theta = corner;
    }
    let prof = profile(&cp, &theta, config.reml)
        .ok_or_else(|| Error::Numerical("profiled deviance is not finite at the optimum".into()))?;

    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let coefficients = (0..p)
        .map(|j| {
            let estimate = prof.beta[j];
            let std_error = (prof.sigma2 * prof.xtvx_inv[(j, j)]).max(0.0).sqrt();
            let t_value = estimate / std_error;
            let p_value = 2.0 * normal.sf(t_value.abs());
            Coefficient {
                name: data.names[j].clone(),
                estimate,
                std_error,
                t_value,
                p_value,
                stars: stars(p_value).to_string(),
            }
        })
        .collect();
    let variances = VarianceComponents {
        country1: theta[0] * theta[0] * prof.sigma2,
        country2: theta.get(1).map(|t| t * t * prof.sigma2),
        residual: prof.sigma2,
    };
    let log_likelihood = -prof.deviance / 2.0;
    let n_params = p + k + 1;
    Ok((
        LmmFit {
            coefficients,
            variances,
            theta: theta.clone(),
            log_likelihood,
            deviance: prof.deviance,
            aic: prof.deviance + 2.0 * n_params as f64,
            mcfadden_r2: 0.0,
            n_dyads: n,
            n_countries: data.n_countries,
            boundary: theta.iter().any(|t| *t == 0.0),
            reml: config.reml,
            shared_country_effect: config.shared_country_effect,
            evaluations: evals,
        },
        theta,
    ))
}

/// Deviance of the model at given relative standard deviations.
pub fn deviance_at(data: &LmmData, config: &LmmConfig, theta: &[f64]) -> Result<f64> {
    let cp = Crossprods::new(data, config.shared_country_effect);
    if theta.len() != cp.sizes.len() {
        return Err(Error::Invalid(format!("expected {} variance ratios", cp.sizes.len())));
    }
    profile(&cp, theta, config.reml)
        .map(|p| p.deviance)
        .ok_or_else(|| Error::Numerical("deviance not finite".into()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OneVariableRow {
    pub covariate: String,
    pub estimate: f64,
    pub std_error: f64,
    pub t_value: f64,
    pub p_value: f64,
    pub stars: String,
    pub aic: f64,
    pub mcfadden_r2: f64,
}

/// Intercept plus one covariate at a time, with the same random effects.
pub fn fit_one_variable_suite(
    dataset: &DyadDataset,
    covariates: &[&str],
    config: &LmmConfig,
) -> Result<Vec<OneVariableRow>> {
    covariates
        .par_iter()
        .map(|name| {
            let data = design(dataset, &[name])?;
            let fit = fit_lmm(&data, config)?;
            let c = &fit.coefficients[1];
            Ok(OneVariableRow {
                covariate: name.to_string(),
                estimate: c.estimate,
                std_error: c.std_error,
                t_value: c.t_value,
                p_value: c.p_value,
                stars: c.stars.clone(),
                aic: fit.aic,
                mcfadden_r2: fit.mcfadden_r2,
            })
        })
        .collect()
}

pub fn civilization_dummy_name(civ: Civilization) -> String {
    format!("same_civ_{}", civ.name().to_lowercase().replace(' ', "_"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CivilizationFit {
    pub fit: LmmFit,
    pub included: Vec<Civilization>,
    /// Civilizations with no same-civilization dyad in the data.
    pub dropped: Vec<Civilization>,
}

/// Main specification with `common_civilization` split into one
/// same-civilization dummy per civilization.
pub fn fit_civilization_dummies(
    dataset: &DyadDataset,
    covariates: &[&str],
    config: &LmmConfig,
) -> Result<CivilizationFit> {
    let mut included = Vec::new();
    let mut dropped = Vec::new();
    let mut dummy_cols = Vec::new();
    for civ in Civilization::ALL {
        let col: Vec<f64> = dataset
            .rows
            .iter()
            .map(|r| bool01(r.civ_a == civ && r.civ_b == civ))
            .collect();
        if col.iter().any(|v| *v > 0.0) {
            included.push(civ);
            dummy_cols.push((civilization_dummy_name(civ), col));
        } else if dataset.rows.iter().any(|r| r.civ_a == civ || r.civ_b == civ) {
            log::warn!("no same-civilization pairs for {civ}; its dummy is dropped");
            dropped.push(civ);
        }
    }
    if dummy_cols.is_empty() {
        return Err(Error::Invalid("no civilization has a same-civilization pair".into()));
    }
    let mut columns = Vec::new();
    for name in covariates.iter().filter(|n| **n != "common_civilization") {
        let k = covariate_index(name).ok_or_else(|| Error::Invalid(format!("unknown covariate '{name}'")))?;
        columns.push((name.to_string(), dataset.rows.iter().map(|r| r.covariates[k]).collect()));
    }
    columns.extend(dummy_cols);
    let data = design_from_columns(dataset, &columns)?;
    Ok(CivilizationFit {
        fit: fit_lmm(&data, config)?,
        included,
        dropped,
    })
}
