//! Feature providers: stand-in image and text encoders, the location
//! encoder, the binary feature sidecar and the synthetic world generator.

mod encoders;
mod sidecar;
mod world;

pub use encoders::{
    hash_text_features, keyed_rng, location_encoding, normalize_coords, unit_gaussian, HashTextEncoder,
    SyntheticImageEncoder, TextEncoder,
};
pub use sidecar::FeatureMatrix;
pub use world::{
    available_codes, destination, generate_world, Split, SyntheticWorld, SyntheticWorldSpec, WorldFiles,
    WorldImage, WorldPlace,
};

/// Default number of location encoder scales (64 features).
pub const DEFAULT_LOC_SCALES: usize = 16;
