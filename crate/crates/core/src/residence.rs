//! Country-of-residence inference from login events.
//!
//! Events of one user are split into spells (maximal runs of same-country
//! observations). A border crossing is plausible only if the implied travel
//! speed between the last event of one spell and the first event of the next
//! stays at or below the speed limit; spells adjacent to an implausible
//! crossing are discarded. The modal country is the one with the greatest
//! cumulative valid-spell duration, and a user is accepted only when that
//! duration reaches the minimum and the modal country matches the
//! self-reported one.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::country::CountryCode;
use crate::error::{Error, Result};
use crate::geo::{haversine_km, GeoPoint};
use crate::ingest::{CountryRegistry, EventRecord, GeoTable, Location};

pub const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidenceConfig {
    pub max_speed_kmh: f64,
    pub min_valid_days: f64,
    pub min_country_users: usize,
}

impl Default for ResidenceConfig {
    fn default() -> Self {
        ResidenceConfig {
            max_speed_kmh: 1000.0,
            min_valid_days: 90.0,
            min_country_users: 100,
        }
    }
}

/// An event after geolocation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ResolvedEvent {
    pub timestamp: f64,
    pub country: CountryCode,
    pub point: Option<GeoPoint>,
}

impl ResolvedEvent {
    fn sort_key(&self, other: &Self) -> std::cmp::Ordering {
        let pt = |p: &Option<GeoPoint>| p.map(|p| (p.lat, p.lon)).unwrap_or((f64::NAN, f64::NAN));
        let (a, b) = (pt(&self.point), pt(&other.point));
        self.timestamp
            .total_cmp(&other.timestamp)
            .then(self.country.cmp(&other.country))
            .then(a.0.total_cmp(&b.0))
            .then(a.1.total_cmp(&b.1))
    }
}

/// Resolves an event to a country and, when known, coordinates.
pub fn resolve_event(event: &EventRecord, geo: &GeoTable) -> Option<ResolvedEvent> {
    match &event.location {
        Location::Coordinates { point, country } => Some(ResolvedEvent {
            timestamp: event.timestamp,
            country: *country,
            point: Some(*point),
        }),
        Location::Ip(ip) => geo.lookup(*ip).map(|r| ResolvedEvent {
            timestamp: event.timestamp,
            country: r.country,
            point: r.point,
        }),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Spell {
    pub user_id: String,
    pub country: CountryCode,
    pub start: f64,
    pub end: f64,
    pub valid: bool,
    /// Coordinates of the first and last events in the run.
    pub start_point: Option<GeoPoint>,
    pub end_point: Option<GeoPoint>,
    pub events: usize,
}

impl Spell {
    pub fn duration(&self) -> f64 {
        self.end - self.start
    }
}

/// Splits time-ordered events into maximal same-country runs.
///
/// A spell lasts from its first to its last event, gaps included. Spells
/// start out valid; [`validate_transitions`] clears the flag.
pub fn build_spells(user_id: &str, events: &[ResolvedEvent]) -> Vec<Spell> {
    let mut spells: Vec<Spell> = Vec::new();
    for ev in events {
        match spells.last_mut() {
            Some(s) if s.country == ev.country => {
                s.end = ev.timestamp;
                s.end_point = ev.point;
                s.events += 1;
            }
            _ => spells.push(Spell {
                user_id: user_id.to_string(),
                country: ev.country,
                start: ev.timestamp,
                end: ev.timestamp,
                valid: true,
                start_point: ev.point,
                end_point: ev.point,
                events: 1,
            }),
        }
    }
    spells
}

/// Implied speed in km/h of a move covering `distance_km` in `elapsed_s`
/// seconds. Zero elapsed time with a nonzero distance is infinitely fast.
pub fn implied_speed_kmh(distance_km: f64, elapsed_s: f64) -> f64 {
    if distance_km == 0.0 {
        0.0
    } else if elapsed_s <= 0.0 {
        f64::INFINITY
    } else {
        distance_km / (elapsed_s / 3600.0)
    }
}

/// Flags spells adjacent to an implausible border crossing as invalid.
///
/// A crossing is valid iff its implied speed is at most `max_speed_kmh`
/// (a speed of exactly the limit is valid). Boundary events without
/// coordinates fall back to `centroid(country)`; if neither is available the
/// crossing cannot be validated and counts as invalid.
pub fn validate_transitions<F>(spells: &mut [Spell], max_speed_kmh: f64, centroid: F)
where
    F: Fn(CountryCode) -> Option<GeoPoint>,
{
    for k in 1..spells.len() {
        let (prev, next) = (&spells[k - 1], &spells[k]);
        let from = prev.end_point.or_else(|| centroid(prev.country));
        let to = next.start_point.or_else(|| centroid(next.country));
        let ok = match (from, to) {
            (Some(a), Some(b)) => implied_speed_kmh(haversine_km(a, b), next.start - prev.end) <= max_speed_kmh,
            _ => false,
        };
        if !ok {
            spells[k - 1].valid = false;
            spells[k].valid = false;
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidenceReason {
    Ok,
    Below90Days,
    Discordant,
    NoEvents,
}

impl ResidenceReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ResidenceReason::Ok => "ok",
            ResidenceReason::Below90Days => "below_90_days",
            ResidenceReason::Discordant => "discordant",
            ResidenceReason::NoEvents => "no_events",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "ok" => ResidenceReason::Ok,
            "below_90_days" => ResidenceReason::Below90Days,
            "discordant" => ResidenceReason::Discordant,
            "no_events" => ResidenceReason::NoEvents,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResidenceResult {
    pub user_id: String,
    pub geolocated_country: Option<CountryCode>,
    pub self_reported_country: Option<CountryCode>,
    pub accepted: bool,
    pub reason: ResidenceReason,
    /// Cumulative valid-spell duration, days.
    pub valid_days: f64,
}

/// Picks the modal country among valid spells: greatest cumulative
/// duration, then earliest first observation, then code order.
pub fn modal_country(spells: &[Spell]) -> Option<CountryCode> {
    let mut totals: BTreeMap<CountryCode, (f64, f64)> = BTreeMap::new();
    for s in spells.iter().filter(|s| s.valid) {
        let entry = totals.entry(s.country).or_insert((0.0, s.start));
        entry.0 += s.duration();
        entry.1 = entry.1.min(s.start);
    }
    totals
        .into_iter()
        .min_by(|(ca, (da, fa)), (cb, (db, fb))| db.total_cmp(da).then(fa.total_cmp(fb)).then(ca.cmp(cb)))
        .map(|(c, _)| c)
}

pub fn infer_residence(
    user_id: &str,
    spells: &[Spell],
    self_report: Option<CountryCode>,
    min_valid_days: f64,
) -> ResidenceResult {
    let valid_seconds: f64 = spells.iter().filter(|s| s.valid).map(Spell::duration).sum();
    let valid_days = valid_seconds / SECONDS_PER_DAY;
    let geolocated = modal_country(spells);
    let reason = if spells.is_empty() {
        ResidenceReason::NoEvents
    } else if valid_seconds < min_valid_days * SECONDS_PER_DAY {
        ResidenceReason::Below90Days
    } else if geolocated.is_none() || geolocated != self_report {
        ResidenceReason::Discordant
    } else {
        ResidenceReason::Ok
    };
    ResidenceResult {
        user_id: user_id.to_string(),
        geolocated_country: geolocated,
        self_reported_country: self_report,
        accepted: reason == ResidenceReason::Ok,
        reason,
        valid_days,
    }
}

/// Countries with at least `min_users` accepted users.
pub fn apply_country_threshold(counts: &BTreeMap<CountryCode, usize>, min_users: usize) -> BTreeSet<CountryCode> {
    counts
        .iter()
        .filter(|(_, &n)| n >= min_users.max(1))
        .map(|(c, _)| *c)
        .collect()
}

/// Per-user results plus the country-level reduction.
#[derive(Debug, Clone, Default)]
pub struct ResidenceOutcome {
    /// One result per user, sorted by user id.
    pub results: Vec<ResidenceResult>,
    /// Accepted users per country, before the country threshold.
    pub accepted_per_country: BTreeMap<CountryCode, usize>,
    pub retained: BTreeSet<CountryCode>,
    pub unresolved_events: u64,
}

impl ResidenceOutcome {
    /// Accepted users whose country passed the threshold.
    pub fn residence_map(&self) -> BTreeMap<String, CountryCode> {
        self.results
            .iter()
            .filter(|r| r.accepted)
            .filter_map(|r| {
                let c = r.geolocated_country?;
                self.retained.contains(&c).then(|| (r.user_id.clone(), c))
            })
            .collect()
    }
}

/// Runs residence inference for every user seen in `events` or
/// `self_reports`. Accepted users whose country is not an included registry
/// country are not counted towards any country.
pub fn infer_all<I>(
    events: I,
    geo: &GeoTable,
    registry: &CountryRegistry,
    self_reports: &BTreeMap<String, CountryCode>,
    config: &ResidenceConfig,
) -> ResidenceOutcome
where
    I: IntoIterator<Item = EventRecord>,
{
    let mut per_user: HashMap<String, Vec<ResolvedEvent>> = HashMap::new();
    let mut unresolved = 0u64;
    for ev in events {
        match resolve_event(&ev, geo) {
            Some(r) => per_user.entry(ev.user_id).or_default().push(r),
            None => {
                per_user.entry(ev.user_id).or_default();
                unresolved += 1;
            }
        }
    }
    for user in self_reports.keys() {
        per_user.entry(user.clone()).or_default();
    }
    let mut users: Vec<(String, Vec<ResolvedEvent>)> = per_user.into_iter().collect();
    users.sort_by(|a, b| a.0.cmp(&b.0));

    let centroid = |c: CountryCode| registry.get(c).map(|m| m.centroid);
    let results: Vec<ResidenceResult> = users
        .into_par_iter()
        .map(|(user, mut evs)| {
            evs.sort_by(|a, b| a.sort_key(b));
            let mut spells = build_spells(&user, &evs);
            validate_transitions(&mut spells, config.max_speed_kmh, centroid);
            infer_residence(&user, &spells, self_reports.get(&user).copied(), config.min_valid_days)
        })
        .collect();

    let mut accepted_per_country: BTreeMap<CountryCode, usize> = BTreeMap::new();
    for r in results.iter().filter(|r| r.accepted) {
        if let Some(c) = r.geolocated_country.filter(|c| registry.is_included(*c)) {
            *accepted_per_country.entry(c).or_default() += 1;
        }
    }
    let retained = apply_country_threshold(&accepted_per_country, config.min_country_users);
    ResidenceOutcome {
        results,
        accepted_per_country,
        retained,
        unresolved_events: unresolved,
    }
}

/// Writes `user_id,geolocated,self_reported,accepted,reason,valid_days,retained`.
pub fn write_residence_csv<W: Write>(writer: W, outcome: &ResidenceOutcome) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["user_id", "geolocated", "self_reported", "accepted", "reason", "valid_days", "retained"])?;
    let code = |c: Option<CountryCode>| c.map(|c| c.to_string()).unwrap_or_default();
    for r in &outcome.results {
        let retained = r.accepted && r.geolocated_country.is_some_and(|c| outcome.retained.contains(&c));
        w.write_record([
            r.user_id.clone(),
            code(r.geolocated_country),
            code(r.self_reported_country),
            (r.accepted as u8).to_string(),
            r.reason.as_str().to_string(),
            r.valid_days.to_string(),
            (retained as u8).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<residence writer>", e))?;
    Ok(())
}

/// Reads a residence table back, returning the users that were accepted and
/// retained together with their country.
pub fn read_residence_map<R: Read>(reader: R) -> Result<BTreeMap<String, CountryCode>> {
    let mut r = csv::Reader::from_reader(reader);
    let headers = r.headers()?.clone();
    let col = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| Error::MissingColumn {
            source_name: "residence.csv".into(),
            column: name.into(),
        })
    };
    let (user, geo, retained, reason) = (col("user_id")?, col("geolocated")?, col("retained")?, col("reason")?);
    let mut out = BTreeMap::new();
    for (n, row) in r.records().enumerate() {
        let row = row?;
        let bad = |message: String| Error::Parse {
            source_name: "residence.csv".into(),
            record: n as u64 + 1,
            message,
        };
        ResidenceReason::parse(&row[reason]).ok_or_else(|| bad(format!("unknown reason `{}`", &row[reason])))?;
        if &row[retained] == "1" {
            let code = CountryCode::new(&row[geo]).ok_or_else(|| bad(format!("bad country `{}`", &row[geo])))?;
            out.insert(row[user].to_string(), code);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DAY: f64 = SECONDS_PER_DAY;
    const HOUR: f64 = 3600.0;

    fn cc(s: &str) -> CountryCode {
        CountryCode::new(s).unwrap()
    }

    fn ev(t: f64, c: &str, lat: f64, lon: f64) -> ResolvedEvent {
        ResolvedEvent {
            timestamp: t,
            country: cc(c),
            point: GeoPoint::new(lat, lon),
        }
    }

    #[test]
    fn single_country_run() {
        let evs = [ev(0.0, "XX", 0.0, 0.0), ev(4.0 * DAY, "XX", 0.0, 0.0), ev(10.0 * DAY, "XX", 0.0, 0.0)];
        let spells = build_spells("u", &evs);
        assert_eq!(spells.len(), 1);
        assert_eq!(spells[0].duration(), 10.0 * DAY);
        assert_eq!(spells[0].events, 3);
    }

    #[test]
    fn run_split() {
        let evs = [
            ev(0.0, "XX", 0.0, 0.0),
            ev(1.0, "XX", 0.0, 0.0),
            ev(2.0, "YY", 0.0, 0.0),
            ev(3.0, "YY", 0.0, 0.0),
        ];
        let spells = build_spells("u", &evs);
        let countries: Vec<_> = spells.iter().map(|s| s.country).collect();
        assert_eq!(countries, vec![cc("XX"), cc("YY")]);
    }

    /// Two points on the equator `km` apart.
    fn points_apart(km: f64) -> (GeoPoint, GeoPoint) {
        let deg = (km / crate::geo::EARTH_RADIUS_KM).to_degrees();
        (GeoPoint::new(0.0, 0.0).unwrap(), GeoPoint::new(0.0, deg).unwrap())
    }

    fn two_spells(km: f64, elapsed: f64) -> Vec<Spell> {
        let (a, b) = points_apart(km);
        let evs = [
            ev(0.0, "XX", a.lat, a.lon),
            ev(elapsed, "YY", b.lat, b.lon),
        ];
        build_spells("u", &evs)
    }

    #[test]
    fn transition_speed_threshold() {
        let mut s = two_spells(8000.0, HOUR);
        validate_transitions(&mut s, 1000.0, |_| None);
        assert!(s.iter().all(|s| !s.valid));

        let mut s = two_spells(500.0, HOUR);
        validate_transitions(&mut s, 1000.0, |_| None);
        assert!(s.iter().all(|s| s.valid));
    }

    #[test]
    fn zero_distance_is_valid() {
        let evs = [ev(0.0, "XX", 10.0, 10.0), ev(1.0, "YY", 10.0, 10.0)];
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, 1000.0, |_| None);
        assert!(s.iter().all(|s| s.valid));
        assert_eq!(implied_speed_kmh(0.0, 0.0), 0.0);
        assert_eq!(implied_speed_kmh(1.0, 0.0), f64::INFINITY);
    }

    #[test]
    fn speed_exactly_at_limit_is_valid() {
        // 1000 km in exactly one hour, computed with the same distance routine.
        let (a, b) = points_apart(1000.0);
        let d = haversine_km(a, b);
        let elapsed = d / 1000.0 * HOUR;
        let evs = [ev(0.0, "XX", a.lat, a.lon), ev(elapsed, "YY", b.lat, b.lon)];
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, d / (elapsed / HOUR), |_| None);
        assert!(s.iter().all(|s| s.valid));
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, d / (elapsed / HOUR) - 1e-9, |_| None);
        assert!(s.iter().all(|s| !s.valid));
    }

    #[test]
    fn centroid_fallback() {
        let evs = [
            ResolvedEvent {
                timestamp: 0.0,
                country: cc("XX"),
                point: None,
            },
            ResolvedEvent {
                timestamp: HOUR,
                country: cc("YY"),
                point: None,
            },
        ];
        let (a, b) = points_apart(8000.0);
        let centroid = |c: CountryCode| if c == cc("XX") { Some(a) } else { Some(b) };
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, 1000.0, centroid);
        assert!(!s[0].valid);
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, 1000.0, |_| None);
        assert!(!s[0].valid, "unknown coordinates cannot validate a crossing");
    }

    fn residence_spells(x_days: f64, y_days: f64) -> Vec<Spell> {
        let evs = [
            ev(0.0, "XX", 0.0, 0.0),
            ev(x_days * DAY, "XX", 0.0, 0.0),
            ev((x_days + 1.0) * DAY, "YY", 1.0, 1.0),
            ev((x_days + 1.0 + y_days) * DAY, "YY", 1.0, 1.0),
        ];
        let mut s = build_spells("u", &evs);
        validate_transitions(&mut s, 1000.0, |_| None);
        s
    }

    #[test]
    fn accepted_modal_country() {
        let r = infer_residence("u", &residence_spells(100.0, 10.0), Some(cc("XX")), 90.0);
        assert!(r.accepted);
        assert_eq!(r.geolocated_country, Some(cc("XX")));
        assert_eq!(r.reason, ResidenceReason::Ok);
    }

    #[test]
    fn below_threshold() {
        let evs = [ev(0.0, "XX", 0.0, 0.0), ev(89.0 * DAY, "XX", 0.0, 0.0)];
        let s = build_spells("u", &evs);
        let r = infer_residence("u", &s, Some(cc("XX")), 90.0);
        assert!(!r.accepted);
        assert_eq!(r.reason, ResidenceReason::Below90Days);

        let evs = [ev(0.0, "XX", 0.0, 0.0), ev(90.0 * DAY, "XX", 0.0, 0.0)];
        let s = build_spells("u", &evs);
        assert!(infer_residence("u", &s, Some(cc("XX")), 90.0).accepted);
    }

    #[test]
    fn discordant_self_report() {
        let r = infer_residence("u", &residence_spells(100.0, 10.0), Some(cc("YY")), 90.0);
        assert!(!r.accepted);
        assert_eq!(r.reason, ResidenceReason::Discordant);
        let r = infer_residence("u", &residence_spells(100.0, 10.0), None, 90.0);
        assert_eq!(r.reason, ResidenceReason::Discordant);
    }

    #[test]
    fn no_events() {
        let r = infer_residence("u", &[], Some(cc("XX")), 90.0);
        assert_eq!(r.reason, ResidenceReason::NoEvents);
    }

    #[test]
    fn modal_tie_breaks_by_first_observation_then_code() {
        let evs = [
            ev(0.0, "YY", 0.0, 0.0),
            ev(50.0 * DAY, "YY", 0.0, 0.0),
            ev(51.0 * DAY, "XX", 0.0, 0.0),
            ev(101.0 * DAY, "XX", 0.0, 0.0),
        ];
        let s = build_spells("u", &evs);
        assert_eq!(modal_country(&s), Some(cc("YY")));
        let same_start = vec![
            Spell {
                user_id: "u".into(),
                country: cc("YY"),
                start: 0.0,
                end: 5.0,
                valid: true,
                start_point: None,
                end_point: None,
                events: 2,
            },
            Spell {
                user_id: "u".into(),
                country: cc("XX"),
                start: 0.0,
                end: 5.0,
                valid: true,
                start_point: None,
                end_point: None,
                events: 2,
            },
        ];
        assert_eq!(modal_country(&same_start), Some(cc("XX")));
    }

    #[test]
    fn country_threshold() {
        let counts: BTreeMap<_, _> = [(cc("XX"), 100), (cc("YY"), 3)].into_iter().collect();
        assert_eq!(apply_country_threshold(&counts, 10), [cc("XX")].into_iter().collect());
        assert_eq!(apply_country_threshold(&counts, 1).len(), 2);
        // Exactly at the floor is retained.
        assert_eq!(apply_country_threshold(&counts, 3).len(), 2);
    }

    #[test]
    fn residence_csv_round_trip() {
        let outcome = ResidenceOutcome {
            results: vec![
                ResidenceResult {
                    user_id: "a".into(),
                    geolocated_country: Some(cc("XX")),
                    self_reported_country: Some(cc("XX")),
                    accepted: true,
                    reason: ResidenceReason::Ok,
                    valid_days: 120.0,
                },
                ResidenceResult {
                    user_id: "b".into(),
                    geolocated_country: Some(cc("YY")),
                    self_reported_country: Some(cc("YY")),
                    accepted: true,
                    reason: ResidenceReason::Ok,
                    valid_days: 120.0,
                },
            ],
            accepted_per_country: BTreeMap::new(),
            retained: [cc("XX")].into_iter().collect(),
            unresolved_events: 0,
        };
        let mut buf = Vec::new();
        write_residence_csv(&mut buf, &outcome).unwrap();
        let map = read_residence_map(buf.as_slice()).unwrap();
        assert_eq!(map.len(), 1);
        assert_eq!(map["a"], cc("XX"));
        assert_eq!(outcome.residence_map(), map);
    }
}
