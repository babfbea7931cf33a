//! Deterministic stand-ins for the frozen image/text encoders and the
//! multiscale sinusoidal location encoder.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geodesy::GeoCoord;

/// Text features for an entity name.
pub trait TextEncoder: Send + Sync {
    fn dim(&self) -> usize;
    fn encode(&self, name: &str) -> Result<Vec<f64>>;
}

/// RNG seeded by SHA-256 of `(domain, seed, key)`; platform independent.
pub fn keyed_rng(domain: &str, seed: u64, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(domain.as_bytes());
    h.update([0u8]);
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    let digest = h.finalize();
    let mut s = [0u8; 32];
    s.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(s)
}

/// Unit vector of `dim` Gaussian draws from `rng`.
pub fn unit_gaussian(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-12 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Hash-seeded unit vectors per name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashTextEncoder {
    dim: usize,
    seed: u64,
}

impl HashTextEncoder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEncoder for HashTextEncoder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn encode(&self, name: &str) -> Result<Vec<f64>> {
        hash_text_features(name, self.dim, self.seed)
    }
}

pub fn hash_text_features(name: &str, dim: usize, seed: u64) -> Result<Vec<f64>> {
    if name.is_empty() {
        return Err(Error::contract("text features need a nonempty name"));
    }
    if dim == 0 {
        return Err(Error::contract("text feature dimension must be positive"));
    }
    Ok(unit_gaussian(&mut keyed_rng("text", seed, name), dim))
}

/// Synthetic image encoder: a unit prototype per city plus Gaussian noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticImageEncoder {
    pub d_img: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SyntheticImageEncoder {
    pub fn prototype(&self, city_id: &str) -> Vec<f64> {
        unit_gaussian(&mut keyed_rng("city-prototype", self.seed, city_id), self.d_img)
    }

    /// Prototype of `city_id` plus `noise * N(0, I)` drawn from `rng`.
    pub fn encode(&self, city_id: &str, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let mut v = self.prototype(city_id);
        for x in &mut v {
            let z: f64 = StandardNormal.sample(rng);
            *x += self.noise * z;
        }
        v
    }
}

/// Maps a coordinate to `[0,1]^2`: `u = (lat+90)/180`, `v = (lon+180)/360`.
pub fn normalize_coords(c: &GeoCoord) -> (f64, f64) {
    ((c.lat() + 90.0) / 180.0, (c.lon() + 180.0) / 360.0)
}

/// `[sin(2^s pi u), cos(2^s pi u), sin(2^s pi v), cos(2^s pi v)]` for `s < scales`.
pub fn location_encoding(u: f64, v: f64, scales: usize) -> Result<Vec<f64>> {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
        return Err(Error::contract(format!("location coords ({u}, {v}) outside [0,1]^2")));
    }
    let mut out = Vec::with_capacity(4 * scales);
    for s in 0..scales {
        let f = (1u64 << s) as f64 * PI;
        out.extend_from_slice(&[(f * u).sin(), (f * u).cos(), (f * v).sin(), (f * v).cos()]);
    }
    Ok(out)
}
