//! Parsers and validated containers for every external input.
//!
//! All inputs are delimited text with a header row. Row-level problems are
//! counted and skipped unless strict mode is on; structural problems (a
//! missing column, a duplicate country) are fatal.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{Read, Write};
use std::net::Ipv4Addr;
use std::path::Path;

use serde::Serialize;

use crate::country::{Civilization, CountryCode};
use crate::error::{Error, Result};
use crate::geo::GeoPoint;

/// Where a login was observed from.
#[derive(Debug, Clone, PartialEq)]
pub enum Location {
    Ip(Ipv4Addr),
    Coordinates { point: GeoPoint, country: CountryCode },
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventRecord {
    pub user_id: String,
    /// UTC seconds.
    pub timestamp: f64,
    pub location: Location,
}

impl EventRecord {
    pub fn new(user_id: impl Into<String>, timestamp: f64, location: Location) -> Result<Self> {
        let user_id = user_id.into();
        if user_id.is_empty() {
            return Err(Error::Invalid("empty user id".into()));
        }
        if !timestamp.is_finite() || timestamp < 0.0 {
            return Err(Error::Invalid(format!("timestamp {timestamp} is not a finite nonnegative number")));
        }
        Ok(EventRecord {
            user_id,
            timestamp,
            location,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeRecord {
    pub sender: String,
    pub recipient: String,
    pub count: u64,
}

impl EdgeRecord {
    pub fn new(sender: impl Into<String>, recipient: impl Into<String>, count: u64) -> Result<Self> {
        let (sender, recipient) = (sender.into(), recipient.into());
        if sender == recipient {
            return Err(Error::Invalid(format!("self-addressed record for `{sender}`")));
        }
        if count == 0 {
            return Err(Error::Invalid("message count must be at least 1".into()));
        }
        Ok(EdgeRecord {
            sender,
            recipient,
            count,
        })
    }
}

/// Delimiter and strictness for the row-oriented parsers.
#[derive(Debug, Clone, Copy)]
pub struct ParseOptions {
    pub delimiter: u8,
    /// Abort on the first malformed row instead of skipping it.
    pub strict: bool,
}

impl Default for ParseOptions {
    fn default() -> Self {
        ParseOptions {
            delimiter: b',',
            strict: false,
        }
    }
}

impl ParseOptions {
    /// Comma for `.csv`, tab for `.tsv`/`.tab`.
    pub fn for_path(path: &Path) -> Self {
        let delimiter = match path.extension().and_then(|e| e.to_str()) {
            Some("tsv") | Some("tab") => b'\t',
            _ => b',',
        };
        ParseOptions {
            delimiter,
            strict: false,
        }
    }
}

/// Row accounting for a parse: `yielded + rejected == total`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct ParseStats {
    pub total: u64,
    pub yielded: u64,
    pub rejected: u64,
    /// First few rejection messages, for reporting.
    pub sample_errors: Vec<String>,
}

impl ParseStats {
    const MAX_SAMPLES: usize = 5;

    fn reject(&mut self, message: String) {
        self.rejected += 1;
        if self.sample_errors.len() < Self::MAX_SAMPLES {
            self.sample_errors.push(message);
        }
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn csv_reader<R: Read>(reader: R, delimiter: u8) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .delimiter(delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(reader)
}

/// Column positions resolved from a header row.
struct Columns {
    source_name: String,
    names: Vec<String>,
}

impl Columns {
    fn new<R: Read>(reader: &mut csv::Reader<R>, source_name: &str) -> Result<Self> {
        let names = reader
            .headers()?
            .iter()
            .map(|h| h.trim().trim_start_matches('\u{feff}').to_ascii_lowercase())
            .collect();
        Ok(Columns {
            source_name: source_name.to_string(),
            names,
        })
    }

    fn find(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    fn require(&self, name: &str) -> Result<usize> {
        self.find(name).ok_or_else(|| Error::MissingColumn {
            source_name: self.source_name.clone(),
            column: name.to_string(),
        })
    }
}

fn field<'r>(record: &'r csv::StringRecord, idx: usize) -> &'r str {
    record.get(idx).unwrap_or("")
}

fn parse_f64(s: &str, what: &str) -> std::result::Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("{what}: `{s}` is not a number"))?;
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{what}: `{s}` is not finite"))
    }
}

fn parse_opt_f64(s: &str, what: &str) -> std::result::Result<Option<f64>, String> {
    if s.is_empty() || s.eq_ignore_ascii_case("na") {
        Ok(None)
    } else {
        parse_f64(s, what).map(Some)
    }
}

fn parse_bool(s: &str, what: &str) -> std::result::Result<bool, String> {
    match s.to_ascii_lowercase().as_str() {
        "" | "0" | "false" | "no" | "f" | "n" => Ok(false),
        "1" | "true" | "yes" | "t" | "y" => Ok(true),
        _ => Err(format!("{what}: `{s}` is not a boolean")),
    }
}

fn parse_code(s: &str, what: &str) -> std::result::Result<CountryCode, String> {
    CountryCode::new(s).ok_or_else(|| format!("{what}: `{s}` is not a two-letter country code"))
}

/// Parses a dotted quad or a plain integer into a u32 address.
pub fn parse_ipv4(s: &str) -> Option<u32> {
    if let Ok(addr) = s.parse::<Ipv4Addr>() {
        return Some(u32::from(addr));
    }
    s.parse::<u32>().ok()
}

enum EventLayout {
    Ip { ip: usize },
    Coordinates { lat: usize, lon: usize, country: usize },
    Mixed { ip: usize, lat: usize, lon: usize, country: usize },
}

/// Streaming reader over an event log.
///
/// Yields `Ok(record)` for every well-formed row. Malformed rows are counted
/// in [`EventReader::stats`]; in strict mode the first one is yielded as an
/// error and iteration stops.
pub struct EventReader<R: Read> {
    records: csv::StringRecordsIntoIter<R>,
    user: usize,
    timestamp: usize,
    layout: EventLayout,
    strict: bool,
    stats: ParseStats,
    source_name: String,
    done: bool,
}

impl EventReader<File> {
    pub fn open(path: &Path, options: ParseOptions) -> Result<Self> {
        EventReader::from_reader(open(path)?, options, &path.display().to_string())
    }
}

impl<R: Read> EventReader<R> {
    pub fn from_reader(reader: R, options: ParseOptions, source_name: &str) -> Result<Self> {
        let mut reader = csv_reader(reader, options.delimiter);
        let cols = Columns::new(&mut reader, source_name)?;
        let user = cols.require("user_id")?;
        let timestamp = cols.require("timestamp")?;
        let coords = (cols.find("lat"), cols.find("lon"), cols.find("country"));
        let layout = match (cols.find("ip"), coords) {
            (Some(ip), (Some(lat), Some(lon), Some(country))) => EventLayout::Mixed { ip, lat, lon, country },
            (Some(ip), _) => EventLayout::Ip { ip },
            (None, (Some(lat), Some(lon), Some(country))) => EventLayout::Coordinates { lat, lon, country },
            (None, (lat, lon, _)) => {
                let column = if lat.is_none() {
                    "ip"
                } else if lon.is_none() {
                    "lon"
                } else {
                    "country"
                };
                return Err(Error::MissingColumn {
                    source_name: source_name.to_string(),
                    column: column.to_string(),
                });
            }
        };
        Ok(EventReader {
            records: reader.into_records(),
            user,
            timestamp,
            layout,
            strict: options.strict,
            stats: ParseStats::default(),
            source_name: source_name.to_string(),
            done: false,
        })
    }

    pub fn stats(&self) -> &ParseStats {
        &self.stats
    }

    pub fn into_stats(self) -> ParseStats {
        self.stats
    }

    fn parse_row(&self, row: &csv::StringRecord) -> std::result::Result<EventRecord, String> {
        let user = field(row, self.user);
        let ts = parse_f64(field(row, self.timestamp), "timestamp")?;
        let coordinates = |lat: usize, lon: usize, country: usize| -> std::result::Result<Location, String> {
            let lat = parse_f64(field(row, lat), "lat")?;
            let lon = parse_f64(field(row, lon), "lon")?;
            let point = GeoPoint::new(lat, lon).ok_or_else(|| format!("coordinates ({lat}, {lon}) out of range"))?;
            let country = parse_code(field(row, country), "country")?;
            Ok(Location::Coordinates { point, country })
        };
        let ip_location = |ip: usize| -> std::result::Result<Location, String> {
            let s = field(row, ip);
            parse_ipv4(s)
                .map(|v| Location::Ip(Ipv4Addr::from(v)))
                .ok_or_else(|| format!("ip: `{s}` is not an IPv4 address"))
        };
        let location = match self.layout {
            EventLayout::Ip { ip } => ip_location(ip)?,
            EventLayout::Coordinates { lat, lon, country } => coordinates(lat, lon, country)?,
            EventLayout::Mixed { ip, lat, lon, country } => {
                if field(row, ip).is_empty() {
                    coordinates(lat, lon, country)?
                } else {
                    ip_location(ip)?
                }
            }
        };
        EventRecord::new(user, ts, location).map_err(|e| e.to_string())
    }
}

impl<R: Read> Iterator for EventReader<R> {
    type Item = Result<EventRecord>;

    fn next(&mut self) -> Option<Self::Item> {
        while !self.done {
            let row = match self.records.next()? {
                Ok(row) => row,
                Err(e) => {
                    self.stats.total += 1;
                    self.stats.reject(e.to_string());
                    if self.strict {
                        self.done = true;
                        return Some(Err(e.into()));
                    }
                    continue;
                }
            };
            self.stats.total += 1;
            match self.parse_row(&row) {
                Ok(ev) => {
                    self.stats.yielded += 1;
                    return Some(Ok(ev));
                }
                Err(message) => {
                    let record = self.stats.total;
                    self.stats.reject(format!("record {record}: {message}"));
                    if self.strict {
                        self.done = true;
                        return Some(Err(Error::Parse {
                            source_name: self.source_name.clone(),
                            record,
                            message,
                        }));
                    }
                }
            }
        }
        None
    }
}

/// Reads a whole event log into memory.
pub fn parse_event_log(path: &Path, options: ParseOptions) -> Result<(Vec<EventRecord>, ParseStats)> {
    let mut reader = EventReader::open(path, options)?;
    let events = reader.by_ref().collect::<Result<Vec<_>>>()?;
    Ok((events, reader.into_stats()))
}

/// Writes events in the layout they were read in: IP-only, coordinates-only,
/// or the combined header when both kinds are present.
pub fn write_event_log<W: Write>(writer: W, events: &[EventRecord]) -> Result<()> {
    let any_ip = events.iter().any(|e| matches!(e.location, Location::Ip(_)));
    let any_coord = events.iter().any(|e| matches!(e.location, Location::Coordinates { .. }));
    let mut w = csv::Writer::from_writer(writer);
    match (any_ip, any_coord) {
        (true, true) => w.write_record(["user_id", "timestamp", "ip", "lat", "lon", "country"])?,
        (false, true) => w.write_record(["user_id", "timestamp", "lat", "lon", "country"])?,
        _ => w.write_record(["user_id", "timestamp", "ip"])?,
    }
    for ev in events {
        let ts = ev.timestamp.to_string();
        match (&ev.location, any_ip && any_coord) {
            (Location::Ip(ip), false) => w.write_record([ev.user_id.as_str(), &ts, &ip.to_string()])?,
            (Location::Ip(ip), true) => w.write_record([ev.user_id.as_str(), &ts, &ip.to_string(), "", "", ""])?,
            (Location::Coordinates { point, country }, mixed) => {
                let (lat, lon) = (point.lat.to_string(), point.lon.to_string());
                if mixed {
                    w.write_record([ev.user_id.as_str(), &ts, "", &lat, &lon, country.as_str()])?
                } else {
                    w.write_record([ev.user_id.as_str(), &ts, &lat, &lon, country.as_str()])?
                }
            }
        }
    }
    w.flush().map_err(|e| Error::io("<event log writer>", e))?;
    Ok(())
}

/// Parses `sender,recipient,count` rows.
pub fn parse_edges<R: Read>(reader: R, options: ParseOptions, source_name: &str) -> Result<(Vec<EdgeRecord>, ParseStats)> {
    let mut reader = csv_reader(reader, options.delimiter);
    let cols = Columns::new(&mut reader, source_name)?;
    let (s, r, c) = (cols.require("sender")?, cols.require("recipient")?, cols.require("count")?);
    let mut stats = ParseStats::default();
    let mut edges = Vec::new();
    for row in reader.records() {
        stats.total += 1;
        let parsed = row.map_err(|e| e.to_string()).and_then(|row| {
            let count: u64 = field(&row, c)
                .parse()
                .map_err(|_| format!("count: `{}` is not a positive integer", field(&row, c)))?;
            EdgeRecord::new(field(&row, s), field(&row, r), count).map_err(|e| e.to_string())
        });
        match parsed {
            Ok(edge) => {
                stats.yielded += 1;
                edges.push(edge);
            }
            Err(message) => {
                if options.strict {
                    return Err(Error::Parse {
                        source_name: source_name.to_string(),
                        record: stats.total,
                        message,
                    });
                }
                stats.reject(format!("record {}: {message}", stats.total));
            }
        }
    }
    Ok((edges, stats))
}

pub fn load_edges(path: &Path, options: ParseOptions) -> Result<(Vec<EdgeRecord>, ParseStats)> {
    parse_edges(open(path)?, options, &path.display().to_string())
}

/// One row of the IP range database.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoRange {
    pub ip_lo: u32,
    pub ip_hi: u32,
    pub country: CountryCode,
    /// City-level coordinates, when the database has them.
    pub point: Option<GeoPoint>,
}

/// Sorted, non-overlapping IP ranges with binary-search lookup.
#[derive(Debug, Clone)]
pub struct GeoTable {
    ranges: Vec<GeoRange>,
}

impl GeoTable {
    /// Builds a table from ranges already sorted by `ip_lo`.
    pub fn new(ranges: Vec<GeoRange>) -> Result<Self> {
        for r in &ranges {
            if r.ip_lo > r.ip_hi {
                return Err(Error::Invalid(format!(
                    "geo range {}-{} has ip_lo > ip_hi",
                    Ipv4Addr::from(r.ip_lo),
                    Ipv4Addr::from(r.ip_hi)
                )));
            }
        }
        for pair in ranges.windows(2) {
            let (a, b) = (&pair[0], &pair[1]);
            if b.ip_lo < a.ip_lo {
                return Err(Error::Invalid(format!(
                    "geo table not sorted: {} follows {}",
                    Ipv4Addr::from(b.ip_lo),
                    Ipv4Addr::from(a.ip_lo)
                )));
            }
            if b.ip_lo <= a.ip_hi {
                return Err(Error::Invalid(format!(
                    "geo ranges overlap: {}-{} and {}-{}",
                    Ipv4Addr::from(a.ip_lo),
                    Ipv4Addr::from(a.ip_hi),
                    Ipv4Addr::from(b.ip_lo),
                    Ipv4Addr::from(b.ip_hi)
                )));
            }
        }
        Ok(GeoTable { ranges })
    }

    /// Sorts by `ip_lo` first; overlaps are still rejected.
    pub fn from_unsorted(mut ranges: Vec<GeoRange>) -> Result<Self> {
        ranges.sort_by_key(|r| (r.ip_lo, r.ip_hi));
        GeoTable::new(ranges)
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<&GeoRange> {
        let ip = u32::from(ip);
        let idx = self.ranges.partition_point(|r| r.ip_lo <= ip);
        let candidate = self.ranges.get(idx.checked_sub(1)?)?;
        (ip <= candidate.ip_hi).then_some(candidate)
    }

    pub fn ranges(&self) -> &[GeoRange] {
        &self.ranges
    }

    pub fn len(&self) -> usize {
        self.ranges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ranges.is_empty()
    }
}

/// Resolves an address to the range covering it, if any.
pub fn geolocate_ip(ip: Ipv4Addr, table: &GeoTable) -> Option<&GeoRange> {
    table.lookup(ip)
}

/// Parses `ip_lo,ip_hi,country,lat,lon`. Addresses may be dotted quads or
/// integers; coordinates may be empty.
pub fn parse_geodb<R: Read>(reader: R, source_name: &str) -> Result<GeoTable> {
    let mut reader = csv_reader(reader, b',');
    let cols = Columns::new(&mut reader, source_name)?;
    let lo = cols.require("ip_lo")?;
    let hi = cols.require("ip_hi")?;
    let country = cols.require("country")?;
    let (lat, lon) = (cols.find("lat"), cols.find("lon"));
    let mut ranges = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let bad = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            record: n as u64 + 1,
            message,
        };
        let ip_lo = parse_ipv4(field(&row, lo)).ok_or_else(|| bad(format!("bad ip_lo `{}`", field(&row, lo))))?;
        let ip_hi = parse_ipv4(field(&row, hi)).ok_or_else(|| bad(format!("bad ip_hi `{}`", field(&row, hi))))?;
        let code = parse_code(field(&row, country), "country").map_err(bad)?;
        let point = match (lat, lon) {
            (Some(la), Some(lo)) if !field(&row, la).is_empty() && !field(&row, lo).is_empty() => {
                let la = parse_f64(field(&row, la), "lat").map_err(bad)?;
                let lo = parse_f64(field(&row, lo), "lon").map_err(bad)?;
                Some(GeoPoint::new(la, lo).ok_or_else(|| bad(format!("coordinates ({la}, {lo}) out of range")))?)
            }
            _ => None,
        };
        ranges.push(GeoRange {
            ip_lo,
            ip_hi,
            country: code,
            point,
        });
    }
    GeoTable::from_unsorted(ranges)
}

pub fn load_geodb(path: &Path) -> Result<GeoTable> {
    parse_geodb(open(path)?, &path.display().to_string())
}

/// Hofstede dimensions used as covariates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Hofstede {
    pub pdi: f64,
    pub idv: f64,
    pub mas: f64,
    pub uai: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountryMeta {
    pub code: CountryCode,
    pub name: String,
    /// Adult population.
    pub population: f64,
    pub civilization: Civilization,
    /// GDP per capita, USD.
    pub gdp_per_capita: Option<f64>,
    pub hofstede: Option<Hofstede>,
    pub gen_trust: Option<f64>,
    pub languages: BTreeSet<String>,
    pub region: Option<String>,
    pub eea_member: bool,
    pub centroid: GeoPoint,
    /// Dropped by the exclusion list or the population floor.
    pub excluded: bool,
}

impl CountryMeta {
    /// True when every dyadic covariate can be computed for this country.
    pub fn has_complete_covariates(&self) -> bool {
        self.gdp_per_capita.is_some() && self.hofstede.is_some() && self.gen_trust.is_some() && self.region.is_some()
    }
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    /// Countries below this adult population are excluded.
    pub min_population: f64,
    pub exclude: Vec<CountryCode>,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        RegistryConfig {
            min_population: 1_000_000.0,
            exclude: ["SO", "MM", "PS"].iter().filter_map(|c| CountryCode::new(c)).collect(),
        }
    }
}

/// Country metadata keyed by code. Excluded countries are kept with
/// `excluded = true` so that references to them can still be resolved.
#[derive(Debug, Clone, Default)]
pub struct CountryRegistry {
    countries: BTreeMap<CountryCode, CountryMeta>,
}

impl CountryRegistry {
    pub fn from_countries(rows: Vec<CountryMeta>, config: &RegistryConfig) -> Result<Self> {
        let mut countries = BTreeMap::new();
        for mut row in rows {
            if !(row.population > 0.0) {
                return Err(Error::Invalid(format!("{}: population must be positive", row.code)));
            }
            row.excluded = row.excluded || config.exclude.contains(&row.code) || row.population < config.min_population;
            let code = row.code;
            if countries.insert(code, row).is_some() {
                return Err(Error::DuplicateCountry(code.to_string()));
            }
        }
        Ok(CountryRegistry { countries })
    }

    pub fn get(&self, code: CountryCode) -> Option<&CountryMeta> {
        self.countries.get(&code)
    }

    pub fn is_included(&self, code: CountryCode) -> bool {
        self.get(code).is_some_and(|c| !c.excluded)
    }

    /// Countries that survive the exclusion list and population floor.
    pub fn included(&self) -> impl Iterator<Item = &CountryMeta> {
        self.countries.values().filter(|c| !c.excluded)
    }

    pub fn all(&self) -> impl Iterator<Item = &CountryMeta> {
        self.countries.values()
    }

    pub fn len(&self) -> usize {
        self.countries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.countries.is_empty()
    }

    pub fn civilizations(&self) -> BTreeMap<CountryCode, Civilization> {
        self.countries.iter().map(|(k, v)| (*k, v.civilization)).collect()
    }

    pub fn populations(&self) -> BTreeMap<CountryCode, f64> {
        self.countries.iter().map(|(k, v)| (*k, v.population)).collect()
    }
}

/// Parses `code,name,population,civilization,gdp,pdi,idv,mas,uai,trust,languages,region,eea,lat,lon`.
pub fn parse_country_table<R: Read>(reader: R, config: &RegistryConfig, source_name: &str) -> Result<CountryRegistry> {
    let mut reader = csv_reader(reader, b',');
    let cols = Columns::new(&mut reader, source_name)?;
    let idx = |name: &str| cols.require(name);
    let (code, name, pop, civ) = (idx("code")?, idx("name")?, idx("population")?, idx("civilization")?);
    let (gdp, pdi, idv, mas, uai, trust) = (idx("gdp")?, idx("pdi")?, idx("idv")?, idx("mas")?, idx("uai")?, idx("trust")?);
    let (langs, region, eea, lat, lon) = (idx("languages")?, idx("region")?, idx("eea")?, idx("lat")?, idx("lon")?);

    let mut rows = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let record = n as u64 + 1;
        let bad = |message: String| Error::Parse {
            source_name: source_name.to_string(),
            record,
            message,
        };
        let civilization: Civilization = field(&row, civ).parse()?;
        let hof = [pdi, idv, mas, uai]
            .iter()
            .zip(["pdi", "idv", "mas", "uai"])
            .map(|(&i, what)| parse_opt_f64(field(&row, i), what))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(bad)?;
        for v in hof.iter().flatten() {
            if !(0.0..=120.0).contains(v) {
                return Err(bad(format!("Hofstede score {v} outside [0, 120]")));
            }
        }
        let hofstede = match hof[..] {
            [Some(pdi), Some(idv), Some(mas), Some(uai)] => Some(Hofstede { pdi, idv, mas, uai }),
            _ => None,
        };
        let la = parse_f64(field(&row, lat), "lat").map_err(bad)?;
        let lo = parse_f64(field(&row, lon), "lon").map_err(bad)?;
        let centroid = GeoPoint::new(la, lo).ok_or_else(|| bad(format!("centroid ({la}, {lo}) out of range")))?;
        let region_s = field(&row, region);
        rows.push(CountryMeta {
            code: parse_code(field(&row, code), "code").map_err(bad)?,
            name: field(&row, name).to_string(),
            population: parse_f64(field(&row, pop), "population").map_err(bad)?,
            civilization,
            gdp_per_capita: parse_opt_f64(field(&row, gdp), "gdp").map_err(bad)?,
            hofstede,
            gen_trust: parse_opt_f64(field(&row, trust), "trust").map_err(bad)?,
            languages: field(&row, langs)
                .split([';', '|', ' '])
                .filter(|s| !s.is_empty())
                .map(|s| s.to_ascii_lowercase())
                .collect(),
            region: (!region_s.is_empty()).then(|| region_s.to_string()),
            eea_member: parse_bool(field(&row, eea), "eea").map_err(bad)?,
            centroid,
            excluded: false,
        });
    }
    CountryRegistry::from_countries(rows, config)
}

pub fn load_country_table(path: &Path, config: &RegistryConfig) -> Result<CountryRegistry> {
    parse_country_table(open(path)?, config, &path.display().to_string())
}

#[derive(Debug, Clone, PartialEq)]
pub struct DyadMeta {
    pub a: CountryCode,
    pub b: CountryCode,
    /// Bilateral trade, USD.
    pub trade_flow: Option<f64>,
    pub colonial_link: bool,
    pub commonwealth_link: bool,
    pub contiguous: bool,
    pub visa_required: bool,
    pub direct_flights: f64,
    pub distance_km: Option<f64>,
}

/// Dyad metadata keyed by canonical pair `(a, b)` with `a < b`.
#[derive(Debug, Clone, Default)]
pub struct DyadTable {
    dyads: BTreeMap<(CountryCode, CountryCode), DyadMeta>,
    total_trade: BTreeMap<CountryCode, f64>,
}

pub fn canonical_pair(a: CountryCode, b: CountryCode) -> (CountryCode, CountryCode) {
    if a <= b {
        (a, b)
    } else {
        (b, a)
    }
}

impl DyadTable {
    pub fn from_dyads(rows: Vec<DyadMeta>) -> Result<Self> {
        let mut dyads = BTreeMap::new();
        let mut total_trade: BTreeMap<CountryCode, f64> = BTreeMap::new();
        for mut row in rows {
            if row.a == row.b {
                return Err(Error::Invalid(format!("dyad {}-{} pairs a country with itself", row.a, row.b)));
            }
            let nonneg = row.trade_flow.is_none_or(|f| f >= 0.0)
                && row.direct_flights >= 0.0
                && row.distance_km.is_none_or(|d| d >= 0.0);
            if !nonneg {
                return Err(Error::Invalid(format!("dyad {}-{} has a negative flow, count or distance", row.a, row.b)));
            }
            let (a, b) = canonical_pair(row.a, row.b);
            row.a = a;
            row.b = b;
            if let Some(flow) = row.trade_flow {
                *total_trade.entry(a).or_default() += flow;
                *total_trade.entry(b).or_default() += flow;
            }
            if dyads.insert((a, b), row).is_some() {
                return Err(Error::Invalid(format!("duplicate dyad {a}-{b}")));
            }
        }
        Ok(DyadTable { dyads, total_trade })
    }

    pub fn get(&self, a: CountryCode, b: CountryCode) -> Option<&DyadMeta> {
        self.dyads.get(&canonical_pair(a, b))
    }

    /// Sum of the country's recorded bilateral flows.
    pub fn total_trade(&self, code: CountryCode) -> f64 {
        self.total_trade.get(&code).copied().unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = &DyadMeta> {
        self.dyads.values()
    }

    pub fn len(&self) -> usize {
        self.dyads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dyads.is_empty()
    }
}

/// Parses `a,b,trade_flow,colonial,commonwealth,contiguous,visa,flights,distance_km`.
pub fn parse_dyads<R: Read>(reader: R, source_name: &str) -> Result<DyadTable> {
    let mut reader = csv_reader(reader, b',');
    let cols = Columns::new(&mut reader, source_name)?;
    let idx = |name: &str| cols.require(name);
    let (a, b, trade, colonial, commonwealth) = (idx("a")?, idx("b")?, idx("trade_flow")?, idx("colonial")?, idx("commonwealth")?);
    let (contiguous, visa, flights, distance) = (idx("contiguous")?, idx("visa")?, idx("flights")?, idx("distance_km")?);
    let mut rows = Vec::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let record = n as u64 + 1;
        let parsed = (|| -> std::result::Result<DyadMeta, String> {
            Ok(DyadMeta {
                a: parse_code(field(&row, a), "a")?,
                b: parse_code(field(&row, b), "b")?,
                trade_flow: parse_opt_f64(field(&row, trade), "trade_flow")?,
                colonial_link: parse_bool(field(&row, colonial), "colonial")?,
                commonwealth_link: parse_bool(field(&row, commonwealth), "commonwealth")?,
                contiguous: parse_bool(field(&row, contiguous), "contiguous")?,
                visa_required: parse_bool(field(&row, visa), "visa")?,
                direct_flights: parse_opt_f64(field(&row, flights), "flights")?.unwrap_or(0.0),
                distance_km: parse_opt_f64(field(&row, distance), "distance_km")?,
            })
        })();
        rows.push(parsed.map_err(|message| Error::Parse {
            source_name: source_name.to_string(),
            record,
            message,
        })?);
    }
    DyadTable::from_dyads(rows)
}

pub fn load_dyads(path: &Path) -> Result<DyadTable> {
    parse_dyads(open(path)?, &path.display().to_string())
}

/// Parses `user_id,country` self-reported residence rows.
pub fn parse_self_reports<R: Read>(reader: R, source_name: &str) -> Result<BTreeMap<String, CountryCode>> {
    let mut reader = csv_reader(reader, b',');
    let cols = Columns::new(&mut reader, source_name)?;
    let (user, country) = (cols.require("user_id")?, cols.require("country")?);
    let mut out = BTreeMap::new();
    for (n, row) in reader.records().enumerate() {
        let row = row?;
        let code = parse_code(field(&row, country), "country").map_err(|message| Error::Parse {
            source_name: source_name.to_string(),
            record: n as u64 + 1,
            message,
        })?;
        out.insert(field(&row, user).to_string(), code);
    }
    Ok(out)
}

pub fn load_self_reports(path: &Path) -> Result<BTreeMap<String, CountryCode>> {
    parse_self_reports(open(path)?, &path.display().to_string())
}
