//! Reciprocal user graph and its collapse to country-pair tie densities.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{Read, Write};

use serde::Serialize;

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::ingest::EdgeRecord;

/// Undirected graph of users who exchanged messages in both directions.
/// Only users with at least one edge are kept.
#[derive(Debug, Clone, Default)]
pub struct UserGraph {
    /// Sorted user ids; edges index into this list.
    pub users: Vec<String>,
    /// Sorted `(u, v)` with `u < v`.
    pub edges: Vec<(u32, u32)>,
    pub stats: GraphStats,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct GraphStats {
    pub records: u64,
    pub self_loops_dropped: u64,
    pub outside_accepted: u64,
    pub unreciprocated_pairs: u64,
}

impl UserGraph {
    /// Builds a graph directly from undirected edges over `users`; isolated
    /// users are dropped and indices remapped.
    pub fn from_undirected(users: &[String], edges: impl IntoIterator<Item = (u32, u32)>) -> Self {
        let mut set: Vec<(u32, u32)> = edges
            .into_iter()
            .filter(|(a, b)| a != b)
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        set.sort_unstable();
        set.dedup();
        let mut used = vec![false; users.len()];
        for &(a, b) in &set {
            used[a as usize] = true;
            used[b as usize] = true;
        }
        let mut order: Vec<usize> = (0..users.len()).filter(|&i| used[i]).collect();
        order.sort_by(|&a, &b| users[a].cmp(&users[b]));
        let mut remap = vec![u32::MAX; users.len()];
        for (new, &old) in order.iter().enumerate() {
            remap[old] = new as u32;
        }
        let mut edges: Vec<(u32, u32)> = set
            .into_iter()
            .map(|(a, b)| {
                let (x, y) = (remap[a as usize], remap[b as usize]);
                (x.min(y), x.max(y))
            })
            .collect();
        edges.sort_unstable();
        UserGraph {
            users: order.into_iter().map(|i| users[i].clone()).collect(),
            edges,
            stats: GraphStats::default(),
        }
    }

    pub fn degree(&self) -> Vec<u64> {
        let mut deg = vec![0u64; self.users.len()];
        for &(a, b) in &self.edges {
            deg[a as usize] += 1;
            deg[b as usize] += 1;
        }
        deg
    }
}

/// Keeps an undirected edge `{u, v}` iff both `u -> v` and `v -> u` appear
/// among accepted users.
pub fn reciprocal_graph<'a, I, F>(records: I, accepted: F) -> UserGraph
where
    I: IntoIterator<Item = &'a EdgeRecord>,
    F: Fn(&str) -> bool,
{
    let mut stats = GraphStats::default();
    let mut ids: HashMap<&'a str, u32> = HashMap::new();
    let mut names: Vec<&'a str> = Vec::new();
    let mut directed: HashSet<(u32, u32)> = HashSet::new();
    for rec in records {
        stats.records += 1;
        if rec.sender == rec.recipient {
            stats.self_loops_dropped += 1;
            continue;
        }
        if rec.count == 0 {
            continue;
        }
        if !accepted(&rec.sender) || !accepted(&rec.recipient) {
            stats.outside_accepted += 1;
            continue;
        }
        let mut id = |s: &'a str| {
            *ids.entry(s).or_insert_with(|| {
                names.push(s);
                (names.len() - 1) as u32
            })
        };
        let (s, r) = (id(&rec.sender), id(&rec.recipient));
        directed.insert((s, r));
    }
    let mut undirected = Vec::new();
    for &(a, b) in &directed {
        if directed.contains(&(b, a)) {
            if a < b {
                undirected.push((a, b));
            }
        } else {
            stats.unreciprocated_pairs += 1;
        }
    }
    let names: Vec<String> = names.into_iter().map(String::from).collect();
    let mut graph = UserGraph::from_undirected(&names, undirected);
    graph.stats = stats;
    graph
}

/// Country-pair tie counts and the quantities derived from them.
///
/// Tie counts below the edge floor are stored as zero (absent).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityMatrix {
    countries: Vec<CountryCode>,
    ties: Vec<u64>,
    users: Vec<u64>,
    population: Vec<f64>,
    mean_degree: Vec<f64>,
    censored_pairs: usize,
}

impl DensityMatrix {
    /// Assembles a matrix from per-country data and a symmetric `n x n`
    /// tie-count array in row-major order.
    pub fn from_parts(
        countries: Vec<CountryCode>,
        users: Vec<u64>,
        population: Vec<f64>,
        mean_degree: Vec<f64>,
        ties: Vec<u64>,
        edge_floor: u64,
    ) -> Result<Self> {
        let n = countries.len();
        if users.len() != n || population.len() != n || mean_degree.len() != n || ties.len() != n * n {
            return Err(Error::Invalid("density matrix parts have inconsistent sizes".into()));
        }
        if countries.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Invalid("density matrix countries must be sorted and unique".into()));
        }
        let mut dm = DensityMatrix {
            countries,
            ties,
            users,
            population,
            mean_degree,
            censored_pairs: 0,
        };
        for i in 0..n {
            if !(dm.population[i] > 0.0) {
                return Err(Error::Invalid(format!("{}: population must be positive", dm.countries[i])));
            }
            for j in i..n {
                let t = dm.ties[i * n + j];
                if t != dm.ties[j * n + i] {
                    return Err(Error::Invalid("tie counts must be symmetric".into()));
                }
                if t > dm.tmax(i, j) {
                    return Err(Error::Invalid(format!(
                        "{}-{}: {t} ties exceed the maximum {}",
                        dm.countries[i],
                        dm.countries[j],
                        dm.tmax(i, j)
                    )));
                }
                if t > 0 && t < edge_floor {
                    dm.ties[i * n + j] = 0;
                    dm.ties[j * n + i] = 0;
                    dm.censored_pairs += 1;
                }
            }
        }
        Ok(dm)
    }

    pub fn n(&self) -> usize {
        self.countries.len()
    }

    pub fn countries(&self) -> &[CountryCode] {
        &self.countries
    }

    pub fn index_of(&self, code: CountryCode) -> Option<usize> {
        self.countries.binary_search(&code).ok()
    }

    pub fn ties(&self, i: usize, j: usize) -> u64 {
        self.ties[i * self.n() + j]
    }

    /// `N_i N_j` between countries, `N_i (N_i - 1) / 2` within one.
    pub fn tmax(&self, i: usize, j: usize) -> u64 {
        let (a, b) = (self.users[i], self.users[j]);
        if i == j {
            a * a.saturating_sub(1) / 2
        } else {
            a * b
        }
    }

    pub fn is_present(&self, i: usize, j: usize) -> bool {
        self.ties(i, j) >= 1 && self.tmax(i, j) > 0
    }

    pub fn density(&self, i: usize, j: usize) -> Option<f64> {
        self.is_present(i, j).then(|| self.ties(i, j) as f64 / self.tmax(i, j) as f64)
    }

    /// `ln t`, computed as `ln T - ln Tmax`; `None` for absent pairs.
    pub fn log_density(&self, i: usize, j: usize) -> Option<f64> {
        self.is_present(i, j)
            .then(|| (self.ties(i, j) as f64).ln() - (self.tmax(i, j) as f64).ln())
    }

    pub fn users(&self, i: usize) -> u64 {
        self.users[i]
    }

    pub fn population(&self, i: usize) -> f64 {
        self.population[i]
    }

    /// Coverage `N_i / P_i`.
    pub fn coverage(&self, i: usize) -> f64 {
        self.users[i] as f64 / self.population[i]
    }

    pub fn mean_degree(&self, i: usize) -> f64 {
        self.mean_degree[i]
    }

    pub fn censored_pairs(&self) -> usize {
        self.censored_pairs
    }

    pub fn total_ties(&self) -> u64 {
        let n = self.n();
        (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).map(|(i, j)| self.ties(i, j)).sum()
    }

    /// Unordered pairs `(i, j)` with `i <= j`, row by row.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.n();
        (0..n).flat_map(move |i| (i..n).map(move |j| (i, j)))
    }

    pub fn present_pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.pairs().filter(|&(i, j)| self.is_present(i, j))
    }
}

/// Collapses the user graph to country pairs.
///
/// `N_i` counts graph users resident in `i`; mean degree is the average
/// reciprocal degree of those users over all of their edges.
pub fn collapse_to_countries(
    graph: &UserGraph,
    residence: &BTreeMap<String, CountryCode>,
    population: &BTreeMap<CountryCode, f64>,
    edge_floor: u64,
) -> Result<DensityMatrix> {
    let user_country: Vec<CountryCode> = graph
        .users
        .iter()
        .map(|u| {
            residence
                .get(u)
                .copied()
                .ok_or_else(|| Error::Invalid(format!("user `{u}` in the graph has no residence")))
        })
        .collect::<Result<_>>()?;
    let mut countries: Vec<CountryCode> = user_country.clone();
    countries.sort_unstable();
    countries.dedup();
    let n = countries.len();
    let idx: Vec<usize> = user_country
        .iter()
        .map(|c| countries.binary_search(c).expect("country collected above"))
        .collect();

    let mut users = vec![0u64; n];
    for &c in &idx {
        users[c] += 1;
    }
    let mut ties = vec![0u64; n * n];
    let mut degree_sum = vec![0u64; n];
    for &(a, b) in &graph.edges {
        let (ca, cb) = (idx[a as usize], idx[b as usize]);
        ties[ca * n + cb] += 1;
        if ca != cb {
            ties[cb * n + ca] += 1;
        }
        degree_sum[ca] += 1;
        degree_sum[cb] += 1;
    }
    let mean_degree = (0..n).map(|i| degree_sum[i] as f64 / users[i] as f64).collect();
    let pop = countries
        .iter()
        .map(|c| population.get(c).copied().ok_or_else(|| Error::UnknownCountry(c.to_string())))
        .collect::<Result<Vec<_>>>()?;
    DensityMatrix::from_parts(countries, users, pop, mean_degree, ties, edge_floor.max(1))
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Writes every pair `i <= j` as
/// `i,j,T,Tmax,ln_t,N_i,N_j,c_i,c_j,meandeg_i,meandeg_j`; `ln_t` is empty for
/// absent pairs.
pub fn write_densities_csv<W: Write>(writer: W, dm: &DensityMatrix) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["i", "j", "T", "Tmax", "ln_t", "N_i", "N_j", "c_i", "c_j", "meandeg_i", "meandeg_j"])?;
    for (i, j) in dm.pairs() {
        w.write_record([
            dm.countries[i].to_string(),
            dm.countries[j].to_string(),
            dm.ties(i, j).to_string(),
            dm.tmax(i, j).to_string(),
            fmt_opt(dm.log_density(i, j)),
            dm.users(i).to_string(),
            dm.users(j).to_string(),
            dm.coverage(i).to_string(),
            dm.coverage(j).to_string(),
            dm.mean_degree(i).to_string(),
            dm.mean_degree(j).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<densities writer>", e))?;
    Ok(())
}

/// Reads a densities table written by [`write_densities_csv`]. Populations
/// are recovered as `N / c`; pass `population` to use exact values instead.
pub fn read_densities_csv<R: Read>(reader: R, population: Option<&BTreeMap<CountryCode, f64>>) -> Result<DensityMatrix> {
    let mut r = csv::Reader::from_reader(reader);
    struct Row {
        i: CountryCode,
        j: CountryCode,
        t: u64,
        n_i: u64,
        c_i: f64,
        md_i: f64,
    }
    let mut rows = Vec::new();
    for (n, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |m: &str| Error::Parse {
            source_name: "densities.csv".into(),
            record: n as u64 + 1,
            message: m.to_string(),
        };
        let code = |k: usize| CountryCode::new(rec.get(k).unwrap_or("")).ok_or_else(|| bad("bad country code"));
        let num = |k: usize| rec.get(k).unwrap_or("").parse::<f64>().map_err(|_| bad("bad number"));
        let int = |k: usize| rec.get(k).unwrap_or("").parse::<u64>().map_err(|_| bad("bad integer"));
        rows.push(Row {
            i: code(0)?,
            j: code(1)?,
            t: int(2)?,
            n_i: int(5)?,
            c_i: num(7)?,
            md_i: num(9)?,
        });
    }
    let mut countries: Vec<CountryCode> = rows.iter().flat_map(|r| [r.i, r.j]).collect();
    countries.sort_unstable();
    countries.dedup();
    let n = countries.len();
    let mut users = vec![None; n];
    let mut ties = vec![0u64; n * n];
    for row in &rows {
        let (a, b) = (countries.binary_search(&row.i).unwrap(), countries.binary_search(&row.j).unwrap());
        ties[a * n + b] = row.t;
        ties[b * n + a] = row.t;
        if a == b {
            users[a] = Some((row.n_i, row.c_i, row.md_i));
        }
    }
    let mut u = Vec::with_capacity(n);
    let mut pop = Vec::with_capacity(n);
    let mut md = Vec::with_capacity(n);
    for (k, entry) in users.into_iter().enumerate() {
        let (ni, ci, mdi) = entry.ok_or_else(|| Error::Invalid(format!("densities.csv lacks the {0}-{0} row", countries[k])))?;
        u.push(ni);
        md.push(mdi);
        let p = match population.and_then(|p| p.get(&countries[k])) {
            Some(&p) => p,
            None if ci > 0.0 => ni as f64 / ci,
            None => return Err(Error::Invalid(format!("{}: zero coverage", countries[k]))),
        };
        pop.push(p);
    }
    DensityMatrix::from_parts(countries, u, pop, md, ties, 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cc(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    fn rec(a: &str, b: &str) -> EdgeRecord {
        EdgeRecord {
            sender: a.into(),
            recipient: b.into(),
            count: 1,
        }
    }

    #[test]
    fn reciprocity_required() {
        let recs = [rec("u", "v"), rec("v", "u"), rec("u", "w")];
        let g = reciprocal_graph(&recs, |_| true);
        assert_eq!(g.users, vec!["u".to_string(), "v".to_string()]);
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.stats.unreciprocated_pairs, 1);

        let g = reciprocal_graph(&recs[..1], |_| true);
        assert!(g.edges.is_empty());
        assert!(g.users.is_empty());
    }

    #[test]
    fn self_loops_and_unaccepted_dropped() {
        let recs = [rec("u", "u"), rec("u", "x"), rec("x", "u")];
        let g = reciprocal_graph(&recs, |s| s != "x");
        assert_eq!(g.stats.self_loops_dropped, 1);
        assert_eq!(g.stats.outside_accepted, 2);
        assert!(g.edges.is_empty());
    }

    fn small_matrix(ni: u64, nj: u64) -> DensityMatrix {
        let countries = vec![cc("AA"), cc("BB")];
        DensityMatrix::from_parts(countries, vec![ni, nj], vec![100.0, 100.0], vec![1.0, 1.0], vec![0; 4], 1).unwrap()
    }

    #[test]
    fn tmax_values() {
        let dm = small_matrix(10, 20);
        assert_eq!(dm.tmax(0, 1), 200);
        assert_eq!(dm.tmax(0, 0), 45);
        let n: u64 = 141;
        assert_eq!(n * (n - 1) / 2, 9_870);
    }

    #[test]
    fn log_density_absent_and_unit() {
        let dm = DensityMatrix::from_parts(
            vec![cc("AA"), cc("BB")],
            vec![1, 1],
            vec![10.0, 10.0],
            vec![1.0, 1.0],
            vec![0, 1, 1, 0],
            1,
        )
        .unwrap();
        assert_eq!(dm.log_density(0, 1), Some(0.0));
        assert_eq!(dm.log_density(0, 0), None);
    }

    #[test]
    fn rejects_ties_above_maximum() {
        let r = DensityMatrix::from_parts(
            vec![cc("AA"), cc("BB")],
            vec![1, 1],
            vec![10.0, 10.0],
            vec![1.0, 1.0],
            vec![0, 2, 2, 0],
            1,
        );
        assert!(r.is_err());
    }

    #[test]
    fn edge_floor_censors() {
        let dm = DensityMatrix::from_parts(
            vec![cc("AA"), cc("BB")],
            vec![3, 3],
            vec![10.0, 10.0],
            vec![1.0, 1.0],
            vec![2, 1, 1, 3],
            2,
        )
        .unwrap();
        assert!(!dm.is_present(0, 1));
        assert!(dm.is_present(0, 0));
        assert_eq!(dm.censored_pairs(), 1);
    }

    #[test]
    fn collapse_counts_and_degrees() {
        let users: Vec<String> = ["a1", "a2", "b1"].iter().map(|s| s.to_string()).collect();
        let g = UserGraph::from_undirected(&users, [(0, 1), (0, 2), (1, 2)]);
        let residence: BTreeMap<String, CountryCode> =
            [("a1", "AA"), ("a2", "AA"), ("b1", "BB")].iter().map(|(u, c)| (u.to_string(), cc(c))).collect();
        let pop: BTreeMap<CountryCode, f64> = [(cc("AA"), 10.0), (cc("BB"), 5.0)].into_iter().collect();
        let dm = collapse_to_countries(&g, &residence, &pop, 1).unwrap();
        assert_eq!(dm.ties(0, 0), 1);
        assert_eq!(dm.ties(0, 1), 2);
        assert_eq!(dm.ties(1, 0), 2);
        assert_eq!(dm.total_ties(), 3);
        assert_eq!(dm.mean_degree(0), 2.0);
        assert_eq!(dm.mean_degree(1), 2.0);
        assert_eq!(dm.coverage(0), 0.2);
        assert_eq!(dm.density(0, 1), Some(1.0));
    }

    #[test]
    fn collapse_requires_residence() {
        let users = vec!["a".to_string(), "b".to_string()];
        let g = UserGraph::from_undirected(&users, [(0, 1)]);
        let residence: BTreeMap<String, CountryCode> = [("a".to_string(), cc("AA"))].into_iter().collect();
        let pop: BTreeMap<CountryCode, f64> = [(cc("AA"), 10.0)].into_iter().collect();
        assert!(collapse_to_countries(&g, &residence, &pop, 1).is_err());
    }

    #[test]
    fn csv_round_trip() {
        let users: Vec<String> = (0..6).map(|i| format!("u{i}")).collect();
        let g = UserGraph::from_undirected(&users, [(0, 1), (1, 2), (2, 3), (3, 4), (4, 5), (0, 5), (1, 4)]);
        let residence: BTreeMap<String, CountryCode> = users
            .iter()
            .enumerate()
            .map(|(k, u)| (u.clone(), if k < 3 { cc("AA") } else { cc("BB") }))
            .collect();
        let pop: BTreeMap<CountryCode, f64> = [(cc("AA"), 30.0), (cc("BB"), 7.0)].into_iter().collect();
        let dm = collapse_to_countries(&g, &residence, &pop, 1).unwrap();
        let mut buf = Vec::new();
        write_densities_csv(&mut buf, &dm).unwrap();
        let back = read_densities_csv(buf.as_slice(), Some(&pop)).unwrap();
        assert_eq!(back, dm);
        let approx = read_densities_csv(buf.as_slice(), None).unwrap();
        assert!((approx.population(1) - 7.0).abs() < 1e-9);
    }
}
