//! Hierarchical hyperbolic image geolocalization.
//!
//! Geographic entities (countries, regions, subregions, cities) and images are
//! embedded on the Lorentz hyperboloid, trained with a geo-weighted contrastive
//! objective, and retrieved by parent-constrained beam search over per-level
//! inner-product indices.

pub mod config;
pub mod error;
pub mod features;
pub mod geodesy;
pub mod hierarchy;
pub mod index;
pub mod manifold;
pub mod model;
pub mod tape;
pub mod training;

pub use error::{Error, Result};

#[cfg(test)]
pub(crate) mod testutil;
