//! Weighted centralities, top edges and force-directed layout for the
//! country graph.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::rescale::RescaledNetwork;

/// Undirected weighted graph on countries, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedCountryGraph {
    countries: Vec<CountryCode>,
    weights: Vec<Option<f64>>,
}

impl WeightedCountryGraph {
    pub fn new(countries: Vec<CountryCode>) -> Self {
        let n = countries.len();
        WeightedCountryGraph {
            countries,
            weights: vec![None; n * n],
        }
    }

    /// Graph on nodes `0..n` with the given edges; node `k` is labelled with
    /// [`CountryCode::from_index`].
    pub fn from_edges(n: usize, edges: &[(usize, usize, f64)]) -> Result<Self> {
        let mut g = WeightedCountryGraph::new((0..n).map(CountryCode::from_index).collect());
        for &(i, j, w) in edges {
            g.set_weight(i, j, w)?;
        }
        Ok(g)
    }

    /// Between-country edges of the rescaled network, weighted by `w`.
    pub fn from_rescaled(net: &RescaledNetwork) -> Self {
        let mut g = WeightedCountryGraph::new(net.countries().to_vec());
        for p in net.between_pairs() {
            if let (Some(i), Some(j), Some(w)) = (g.index_of(p.i), g.index_of(p.j), p.weight) {
                g.set_weight(i, j, w).expect("rescaled weights are finite and nonnegative");
            }
        }
        g
    }

    pub fn set_weight(&mut self, i: usize, j: usize, w: f64) -> Result<()> {
        if i == j {
            return Err(Error::Invalid("self-loops are not allowed".into()));
        }
        if !w.is_finite() || w < 0.0 {
            return Err(Error::Invalid(format!("edge weight {w} must be finite and nonnegative")));
        }
        let n = self.n();
        self.weights[i * n + j] = Some(w);
        self.weights[j * n + i] = Some(w);
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn index_of(&self, code: CountryCode) -> Option<usize> {
        self.countries.iter().position(|c| *c == code)
    }

    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        self.weights[i * self.n() + j]
    }

    /// Weight with absent edges read as zero.
    pub fn weight_or_zero(&self, i: usize, j: usize) -> f64 {
        self.weight(i, j).unwrap_or(0.0)
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let n = self.n();
        self.weights[i * n..(i + 1) * n]
            .iter()
            .enumerate()
            .filter_map(|(j, w)| w.map(|w| (j, w)))
    }

    /// Edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (i + 1..n).filter_map(move |j| self.weight(i, j).map(|w| (i, j, w))))
            .collect()
    }

    pub fn total_weight(&self) -> f64 {
        self.edges().iter().map(|e| e.2).sum()
    }

    /// Node sets of connected components, largest first (ties by smallest
    /// member).
    pub fn components(&self) -> Vec<Vec<usize>> {
        let n = self.n();
        let mut comp = vec![usize::MAX; n];
        let mut out: Vec<Vec<usize>> = Vec::new();
        for s in 0..n {
            if comp[s] != usize::MAX {
                continue;
            }
            let id = out.len();
            let mut stack = vec![s];
            let mut members = Vec::new();
            comp[s] = id;
            while let Some(v) = stack.pop() {
                members.push(v);
                for (u, _) in self.neighbors(v) {
                    if comp[u] == usize::MAX {
                        comp[u] = id;
                        stack.push(u);
                    }
                }
            }
            members.sort_unstable();
            out.push(members);
        }
        out.sort_by(|a, b| b.len().cmp(&a.len()).then(a[0].cmp(&b[0])));
        out
    }
}

/// Sum of incident weights, `deg_i = sum_{j != i} w_ij`.
pub fn weighted_degree(g: &WeightedCountryGraph, i: usize) -> f64 {
    g.neighbors(i).map(|(_, w)| w).sum()
}

pub fn weighted_degrees(g: &WeightedCountryGraph) -> Vec<f64> {
    (0..g.n()).map(|i| weighted_degree(g, i)).collect()
}

pub const EIGEN_TOL: f64 = 1e-10;
pub const EIGEN_MAX_ITER: usize = 1_000_000;

/// Principal eigenvector of the weight matrix on the largest connected
/// component, by shifted power iteration. Scores have unit Euclidean norm and
/// are nonnegative; nodes outside the component score 0.
pub fn eigenvector_centrality(g: &WeightedCountryGraph) -> Result<Vec<f64>> {
    let n = g.n();
    let mut scores = vec![0.0; n];
    let Some(comp) = g.components().into_iter().next() else {
        return Ok(scores);
    };
    let m = comp.len();
    if m == 1 {
        scores[comp[0]] = 1.0;
        return Ok(scores);
    }
    let w: Vec<f64> = comp
        .iter()
        .flat_map(|&i| comp.iter().map(move |&j| if i == j { 0.0 } else { g.weight_or_zero(i, j) }))
        .collect();
    // A positive shift keeps the iteration from oscillating on bipartite
    // structure without changing the eigenvectors.
    let shift = w.iter().sum::<f64>() / m as f64;
    if shift == 0.0 {
        let v = 1.0 / (m as f64).sqrt();
        for &i in &comp {
            scores[i] = v;
        }
        return Ok(scores);
    }
    let mut x = vec![1.0 / (m as f64).sqrt(); m];
    let mut next = vec![0.0; m];
    let mut delta = f64::INFINITY;
    for _ in 0..EIGEN_MAX_ITER {
        for (r, out) in next.iter_mut().enumerate() {
            let row = &w[r * m..(r + 1) * m];
            *out = row.iter().zip(&x).map(|(a, b)| a * b).sum::<f64>() + shift * x[r];
        }
        let norm = next.iter().map(|v| v * v).sum::<f64>().sqrt();
        next.iter_mut().for_each(|v| *v /= norm);
        delta = next.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        std::mem::swap(&mut x, &mut next);
        if delta < EIGEN_TOL {
            let sign = if x.iter().sum::<f64>() < 0.0 { -1.0 } else { 1.0 };
            for (k, &i) in comp.iter().enumerate() {
                scores[i] = (sign * x[k]).max(0.0);
            }
            return Ok(scores);
        }
    }
    Err(Error::NonConvergence {
        what: "eigenvector power iteration".into(),
        iterations: EIGEN_MAX_ITER,
        detail: format!("last step change {delta:e}"),
    })
}

/// Offset added when turning weights into path lengths.
pub const DISTANCE_EPSILON: f64 = 1e-9;

/// Converts affinities to lengths, `d = (w_max + eps) - w`, so that stronger
/// ties are shorter and every length is positive.
pub fn distance_matrix(g: &WeightedCountryGraph, epsilon: f64) -> Vec<Option<f64>> {
    let w_max = g.edges().iter().map(|e| e.2).fold(0.0, f64::max);
    let n = g.n();
    (0..n * n)
        .map(|k| g.weights[k].map(|w| (w_max + epsilon) - w))
        .collect()
}

pub(crate) fn same_length(a: f64, b: f64) -> bool {
    (a - b).abs() <= 1e-12 * a.abs().max(b.abs()).max(1.0)
}

/// Brandes accumulation from one source over weighted shortest paths.
fn brandes_source(n: usize, dist: &[Option<f64>], s: usize) -> Vec<f64> {
    let mut d = vec![f64::INFINITY; n];
    let mut sigma = vec![0.0f64; n];
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    let mut done = vec![false; n];
    let mut order = Vec::with_capacity(n);
    d[s] = 0.0;
    sigma[s] = 1.0;
    // Dense Dijkstra: n is at most a few hundred countries.
    loop {
        let mut v = usize::MAX;
        for u in 0..n {
            if !done[u] && d[u].is_finite() && (v == usize::MAX || d[u] < d[v]) {
                v = u;
            }
        }
        if v == usize::MAX {
            break;
        }
        done[v] = true;
        order.push(v);
        for u in 0..n {
            let Some(len) = dist[v * n + u] else { continue };
            if done[u] {
                continue;
            }
            let alt = d[v] + len;
            if d[u].is_finite() && same_length(alt, d[u]) {
                sigma[u] += sigma[v];
                preds[u].push(v);
            } else if alt < d[u] {
                d[u] = alt;
                sigma[u] = sigma[v];
                preds[u].clear();
                preds[u].push(v);
            }
        }
    }
    let mut delta = vec![0.0; n];
    let mut contrib = vec![0.0; n];
    for &w in order.iter().rev() {
        for &v in &preds[w] {
            delta[v] += sigma[v] / sigma[w] * (1.0 + delta[w]);
        }
        if w != s {
            contrib[w] = delta[w];
        }
    }
    contrib
}

/// Betweenness over weighted shortest paths (lengths from
/// [`distance_matrix`]), splitting credit evenly among equal-length paths.
/// Each unordered pair of endpoints counts once.
pub fn betweenness_centrality(g: &WeightedCountryGraph) -> Vec<f64> {
    betweenness_with_epsilon(g, DISTANCE_EPSILON)
}

pub fn betweenness_with_epsilon(g: &WeightedCountryGraph, epsilon: f64) -> Vec<f64> {
    let n = g.n();
    let dist = distance_matrix(g, epsilon);
    let per_source: Vec<Vec<f64>> = (0..n).into_par_iter().map(|s| brandes_source(n, &dist, s)).collect();
    let mut total = vec![0.0; n];
    for contrib in &per_source {
        for (t, c) in total.iter_mut().zip(contrib) {
            *t += c;
        }
    }
    total.iter_mut().for_each(|v| *v /= 2.0);
    total
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityRow {
    pub country: CountryCode,
    pub degree: f64,
    pub eigenvector: f64,
    pub betweenness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralityReport {
    pub rows: Vec<CentralityRow>,
}

pub fn centrality_report(g: &WeightedCountryGraph) -> Result<CentralityReport> {
    let degree = weighted_degrees(g);
    let eigen = eigenvector_centrality(g)?;
    let between = betweenness_centrality(g);
    Ok(CentralityReport {
        rows: (0..g.n())
            .map(|i| CentralityRow {
                country: g.countries()[i],
                degree: degree[i],
                eigenvector: eigen[i],
                betweenness: between[i],
            })
            .collect(),
    })
}

/// Arithmetic mean of `scores` within each label group, in label order.
pub fn group_mean_centrality<L: Ord + Clone + std::fmt::Debug>(
    countries: &[CountryCode],
    scores: &[f64],
    labels: &BTreeMap<CountryCode, L>,
) -> Result<Vec<(L, usize, f64)>> {
    let mut acc: BTreeMap<L, (usize, f64)> = BTreeMap::new();
    for (c, s) in countries.iter().zip(scores) {
        let label = labels
            .get(c)
            .ok_or_else(|| Error::Invalid(format!("country {c} has no label")))?;
        let e = acc.entry(label.clone()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += s;
    }
    Ok(acc.into_iter().map(|(l, (n, sum))| (l, n, sum / n as f64)).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EdgeKey {
    /// Rescaled tie count `T'`.
    RawTPrime,
    /// Log-density weight `w`.
    DensityW,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedEdge {
    pub i: CountryCode,
    pub j: CountryCode,
    pub value: f64,
}

/// Between-country edges of the network keyed by `key`.
pub fn edge_values(net: &RescaledNetwork, key: EdgeKey) -> Vec<RankedEdge> {
    net.between_pairs()
        .filter_map(|p| {
            let value = match key {
                EdgeKey::RawTPrime => Some(p.t_prime),
                EdgeKey::DensityW => p.weight,
            }?;
            Some(RankedEdge { i: p.i, j: p.j, value })
        })
        .collect()
}

/// The `k` largest edges, ties broken by pair order. Asking for more edges
/// than exist returns all of them.
pub fn top_k_edges(mut edges: Vec<RankedEdge>, k: usize) -> Result<Vec<RankedEdge>> {
    if k == 0 {
        return Err(Error::Invalid("k must be at least 1".into()));
    }
    if k > edges.len() {
        log::warn!("requested top {k} edges but only {} exist", edges.len());
    }
    edges.sort_by(|a, b| b.value.total_cmp(&a.value).then((a.i, a.j).cmp(&(b.i, b.j))));
    edges.truncate(k);
    Ok(edges)
}

/// `f(x) = ((x - min) / range)^4`, or 1 everywhere when the range is 0.
pub fn layout_transform(values: &[f64]) -> Vec<f64> {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let range = max - min;
    values
        .iter()
        .map(|&x| if range > 0.0 { ((x - min) / range).powi(4) } else { 1.0 })
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayoutConfig {
    pub iterations: usize,
    pub seed: u64,
    /// Edges kept in the overlay.
    pub k_top: usize,
}

impl Default for LayoutConfig {
    fn default() -> Self {
        LayoutConfig {
            iterations: 500,
            seed: 1,
            k_top: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layout {
    pub countries: Vec<CountryCode>,
    pub coords: Vec<(f64, f64)>,
    /// Strongest edges by transformed weight, for drawing.
    pub overlay: Vec<(usize, usize, f64)>,
}

/// Weighted Fruchterman-Reingold. Attraction between linked nodes is scaled
/// by the transformed edge weight.
/// Frame is `n x n`, temperature cools linearly from `n / 10` to zero.
pub fn layout(g: &WeightedCountryGraph, config: &LayoutConfig) -> Layout {
    let n = g.n();
    let edges = g.edges();
    let fx = layout_transform(&edges.iter().map(|e| e.2).collect::<Vec<_>>());
    let weighted: Vec<(usize, usize, f64)> = edges.iter().zip(&fx).map(|(e, &f)| (e.0, e.1, f)).collect();

    let side = (n.max(1)) as f64;
    let k = (side * side / n.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(-side / 2.0..side / 2.0), rng.random_range(-side / 2.0..side / 2.0)))
        .collect();
    let t0 = side / 10.0;
    let mut disp = vec![(0.0, 0.0); n];
    for it in 0..config.iterations {
        let temp = t0 * (1.0 - it as f64 / config.iterations as f64);
        disp.iter_mut().for_each(|d| *d = (0.0, 0.0));
        for v in 0..n {
            for u in v + 1..n {
                let (mut dx, mut dy) = (pos[v].0 - pos[u].0, pos[v].1 - pos[u].1);
                let mut dist = (dx * dx + dy * dy).sqrt();
                if dist < 1e-9 {
                    // Coincident nodes: push apart along a fixed direction.
                    dx = 1e-3 * (1 + v) as f64;
                    dy = 1e-3 * (1 + u) as f64;
                    dist = (dx * dx + dy * dy).sqrt();
                }
                let f = k * k / dist;
                let (ux, uy) = (dx / dist * f, dy / dist * f);
                disp[v].0 += ux;
                disp[v].1 += uy;
                disp[u].0 -= ux;
                disp[u].1 -= uy;
            }
        }
        for &(a, b, w) in &weighted {
            let (dx, dy) = (pos[a].0 - pos[b].0, pos[a].1 - pos[b].1);
            let dist = (dx * dx + dy * dy).sqrt().max(1e-9);
            let f = w * dist * dist / k;
            let (ux, uy) = (dx / dist * f, dy / dist * f);
            disp[a].0 -= ux;
            disp[a].1 -= uy;
            disp[b].0 += ux;
            disp[b].1 += uy;
        }
        for v in 0..n {
            let (dx, dy) = disp[v];
            let len = (dx * dx + dy * dy).sqrt();
            if len > 0.0 {
                let step = len.min(temp);
                pos[v].0 += dx / len * step;
                pos[v].1 += dy / len * step;
            }
            pos[v].0 = pos[v].0.clamp(-side / 2.0, side / 2.0);
            pos[v].1 = pos[v].1.clamp(-side / 2.0, side / 2.0);
        }
    }
    let mut overlay = weighted;
    overlay.sort_by(|a, b| b.2.total_cmp(&a.2).then((a.0, a.1).cmp(&(b.0, b.1))));
    overlay.truncate(config.k_top);
    Layout {
        countries: g.countries().to_vec(),
        coords: pos,
        overlay,
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// GraphML with `weight` on edges and `x`/`y` on nodes.
pub fn to_graphml(g: &WeightedCountryGraph, layout: Option<&Layout>) -> String {
    let mut s = String::new();
    s.push_str("<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n");
    s.push_str("<graphml xmlns=\"http://graphml.graphdrawing.org/xmlns\">\n");
    s.push_str("  <key id=\"weight\" for=\"edge\" attr.name=\"weight\" attr.type=\"double\"/>\n");
    s.push_str("  <key id=\"x\" for=\"node\" attr.name=\"x\" attr.type=\"double\"/>\n");
    s.push_str("  <key id=\"y\" for=\"node\" attr.name=\"y\" attr.type=\"double\"/>\n");
    s.push_str("  <graph id=\"countries\" edgedefault=\"undirected\">\n");
    for (i, c) in g.countries().iter().enumerate() {
        let _ = write!(s, "    <node id=\"{}\"", xml_escape(c.as_str()));
        match layout {
            Some(l) => {
                let (x, y) = l.coords[i];
                let _ = writeln!(s, ">\n      <data key=\"x\">{x}</data>\n      <data key=\"y\">{y}</data>\n    </node>");
            }
            None => s.push_str("/>\n"),
        }
    }
    for (i, j, w) in g.edges() {
        let _ = writeln!(
            s,
            "    <edge source=\"{}\" target=\"{}\">\n      <data key=\"weight\">{w}</data>\n    </edge>",
            g.countries()[i],
            g.countries()[j]
        );
    }
    s.push_str("  </graph>\n</graphml>\n");
    s
}

/// Graphviz DOT with `weight` on edges and `pos` on nodes.
pub fn to_dot(g: &WeightedCountryGraph, layout: Option<&Layout>) -> String {
    let mut s = String::from("graph countries {\n");
    for (i, c) in g.countries().iter().enumerate() {
        match layout {
            Some(l) => {
                let (x, y) = l.coords[i];
                let _ = writeln!(s, "  \"{c}\" [pos=\"{x},{y}!\"];");
            }
            None => {
                let _ = writeln!(s, "  \"{c}\";");
            }
        }
    }
    for (i, j, w) in g.edges() {
        let _ = writeln!(s, "  \"{}\" -- \"{}\" [weight={w}];", g.countries()[i], g.countries()[j]);
    }
    s.push_str("}\n");
    s
}
