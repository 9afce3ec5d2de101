//! Reconstruction of an international communication network from login
//! events and a reciprocal email graph.
//!
//! The pipeline runs in stages, each in its own module:
//!
//! * [`ingest`] parses event logs, edge lists, the IP range database and the
//!   country/dyad metadata tables.
//! * [`residence`] infers a country of residence per user from login spells.
//! * [`densities`] collapses the reciprocal user graph to country-pair tie
//!   counts and densities.
//! * [`rescale`] fits the log-linear coverage model and projects densities to
//!   full-population coverage.
//! * [`netstats`] computes weighted centralities, top edges and a
//!   force-directed layout.
//! * [`partition`] runs community detection and compares partitions.
//! * [`qap`] tests graph correlation against label co-membership by
//!   permutation.
//! * [`dyadreg`] fits dyadic mixed-effects models with crossed country
//!   effects.
//! * [`synth`] generates synthetic worlds with known ground truth.

pub mod country;
pub mod densities;
pub mod dyadreg;
pub mod error;
pub mod geo;
pub mod ingest;
pub mod netstats;
pub mod ols;
pub mod partition;
pub mod qap;
pub mod rescale;
pub mod residence;
pub mod synth;

pub use country::{Civilization, CountryCode};
pub use densities::DensityMatrix;
pub use error::{Error, Result};
pub use geo::GeoPoint;
pub use ingest::{CountryMeta, CountryRegistry, DyadMeta, DyadTable, EdgeRecord, EventRecord, GeoTable};
pub use netstats::WeightedCountryGraph;
pub use partition::Partition;
pub use rescale::{RescaleModel, RescaledNetwork};
