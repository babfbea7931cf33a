//! Great-circle distances, geographic weighting kernels and GeoScore.
//!
//! The training loss consumes the unit-free half central angle
//! `g = arcsin(sqrt(a))`; reported metrics are in kilometers (`2 * 6371 * g`).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Earth's mean radius in kilometers.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Distance scale of GeoScore in kilometers.
pub const GEOSCORE_SCALE_KM: f64 = 1492.7;
pub const GEOSCORE_MAX: f64 = 5000.0;

/// Latitude/longitude in degrees; longitude normalized into `(-180, 180]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoCoord {
    lat: f64,
    lon: f64,
}

impl GeoCoord {
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        if !lat.is_finite() || !lon.is_finite() {
            return Err(Error::contract("coordinates must be finite"));
        }
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::contract(format!("latitude {lat} outside [-90, 90]")));
        }
        Ok(Self {
            lat,
            lon: normalize_lon(lon),
        })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

fn normalize_lon(lon: f64) -> f64 {
    if lon > -180.0 && lon <= 180.0 {
        return lon;
    }
    let mut l = (lon + 180.0).rem_euclid(360.0) - 180.0;
    if l == -180.0 {
        l = 180.0;
    }
    l
}

/// `sin^2(dphi/2) + cos(phi1) cos(phi2) sin^2(dlambda/2)`, clamped to `[0, 1]`.
fn haversine_a(a: &GeoCoord, b: &GeoCoord) -> f64 {
    let phi1 = a.lat.to_radians();
    let phi2 = b.lat.to_radians();
    let dphi = phi2 - phi1;
    let mut dlam = (b.lon - a.lon).to_radians();
    if dlam > PI {
        dlam -= 2.0 * PI;
    } else if dlam < -PI {
        dlam += 2.0 * PI;
    }
    let s1 = (dphi / 2.0).sin();
    let s2 = (dlam / 2.0).sin();
    (s1 * s1 + phi1.cos() * phi2.cos() * s2 * s2).clamp(0.0, 1.0)
}

/// Half the central angle between two coordinates, in radians.
pub fn haversine_angle(a: &GeoCoord, b: &GeoCoord) -> f64 {
    haversine_a(a, b).sqrt().asin()
}

/// Great-circle distance in kilometers.
pub fn haversine_km(a: &GeoCoord, b: &GeoCoord) -> f64 {
    2.0 * EARTH_RADIUS_KM * haversine_angle(a, b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum KernelKind {
    #[default]
    Laplace,
    Gauss,
    Inverse,
}

impl std::str::FromStr for KernelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "laplace" => Ok(Self::Laplace),
            "gauss" | "gaussian" => Ok(Self::Gauss),
            "inverse" | "inv" => Ok(Self::Inverse),
            other => Err(Error::Config(format!("unknown kernel '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelConfig {
    kind: KernelKind,
    sigma: f64,
    p: f64,
}

impl KernelConfig {
    pub fn new(kind: KernelKind, sigma: f64, p: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::Config(format!("kernel sigma must be positive, got {sigma}")));
        }
        if kind == KernelKind::Inverse && !(p.is_finite() && p > 0.0) {
            return Err(Error::Config(format!("inverse kernel exponent must be positive, got {p}")));
        }
        Ok(Self { kind, sigma, p })
    }

    pub fn laplace(sigma: f64) -> Result<Self> {
        Self::new(KernelKind::Laplace, sigma, 1.0)
    }

    pub fn kind(&self) -> KernelKind {
        self.kind
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn p(&self) -> f64 {
        self.p
    }
}

/// Kernel value in `(0, 1]`; `k(0) = 1` and strictly decreasing in `g`.
pub fn kernel_weight(g: f64, cfg: &KernelConfig) -> f64 {
    let x = g / cfg.sigma;
    match cfg.kind {
        KernelKind::Laplace => (-x).exp(),
        KernelKind::Gauss => (-x * x).exp(),
        KernelKind::Inverse => (1.0 + x).powf(-cfg.p),
    }
}

/// `1 + lambda * k(g)`.
pub fn geo_weight(g: f64, lambda: f64, cfg: &KernelConfig) -> f64 {
    1.0 + lambda * kernel_weight(g, cfg)
}

/// `5000 * exp(-delta_km / 1492.7)`.
pub fn geoscore(delta_km: f64) -> f64 {
    GEOSCORE_MAX * (-delta_km / GEOSCORE_SCALE_KM).exp()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn gc(lat: f64, lon: f64) -> GeoCoord {
        GeoCoord::new(lat, lon).unwrap()
    }

    #[test]
    fn haversine_angle_examples() {
        assert_eq!(haversine_angle(&gc(12.0, 34.0), &gc(12.0, 34.0)), 0.0);
        assert_abs_diff_eq!(
            haversine_angle(&gc(0.0, 0.0), &gc(0.0, 90.0)),
            PI / 4.0,
            epsilon = 1e-15
        );
        assert_abs_diff_eq!(
            haversine_angle(&gc(0.0, 0.0), &gc(0.0, 180.0)),
            PI / 2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn haversine_km_examples() {
        assert_eq!(haversine_km(&gc(48.0, 2.0), &gc(48.0, 2.0)), 0.0);
        assert_abs_diff_eq!(
            haversine_km(&gc(0.0, 0.0), &gc(0.0, 90.0)),
            10_007.543_398_010_286,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            haversine_km(&gc(0.0, 0.0), &gc(0.0, 180.0)),
            20_015.086_796_020_572,
            epsilon = 1e-6
        );
    }

    #[test]
    fn antimeridian_wraps() {
        let a = gc(10.0, 179.5);
        let b = gc(10.0, -179.5);
        assert!(haversine_km(&a, &b) < 120.0);
        assert_eq!(gc(0.0, 540.0).lon(), 180.0);
        assert_eq!(gc(0.0, -180.0).lon(), 180.0);
        assert!(GeoCoord::new(91.0, 0.0).is_err());
    }

    #[test]
    fn kernel_examples() {
        for kind in [KernelKind::Laplace, KernelKind::Gauss, KernelKind::Inverse] {
            let cfg = KernelConfig::new(kind, 0.3, 2.0).unwrap();
            assert_eq!(kernel_weight(0.0, &cfg), 1.0);
        }
        let lap = KernelConfig::laplace(0.5).unwrap();
        assert_abs_diff_eq!(kernel_weight(0.5, &lap), 0.367_879_441_171_442_3, epsilon = 1e-15);
        let inv = KernelConfig::new(KernelKind::Inverse, 0.5, 1.0).unwrap();
        assert_abs_diff_eq!(kernel_weight(0.5, &inv), 0.5, epsilon = 1e-15);
        assert!(KernelConfig::new(KernelKind::Inverse, 0.5, 0.0).is_err());
        assert!(KernelConfig::laplace(0.0).is_err());
    }

    #[test]
    fn geo_weight_examples() {
        let lap = KernelConfig::laplace(0.1).unwrap();
        assert_eq!(geo_weight(0.0, 0.7, &lap), 1.7);
        assert_abs_diff_eq!(geo_weight(5.0, 1.0, &lap), 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(geo_weight(0.1, 1.0, &lap), 1.367_879_441_171_442_3, epsilon = 1e-15);
    }

    #[test]
    fn geoscore_examples() {
        assert_eq!(geoscore(0.0), 5000.0);
        assert_abs_diff_eq!(geoscore(1492.7), 1839.397_205_857_211_6, epsilon = 1e-9);
        assert_abs_diff_eq!(geoscore(20_015.09), 0.007_510_482_512_999_854, epsilon = 1e-12);
    }

    proptest! {
        #[test]
        fn haversine_symmetric_and_bounded(
            la1 in -90.0f64..=90.0, lo1 in -180.0f64..180.0,
            la2 in -90.0f64..=90.0, lo2 in -180.0f64..180.0,
        ) {
            let (a, b) = (gc(la1, lo1), gc(la2, lo2));
            let ab = haversine_km(&a, &b);
            prop_assert_eq!(ab, haversine_km(&b, &a));
            prop_assert!((0.0..=EARTH_RADIUS_KM * PI + 1e-9).contains(&ab));
        }

        #[test]
        fn kernels_strictly_decrease(g1 in 0.0f64..3.0, dg in 1e-6f64..3.0, sigma in 0.05f64..2.0) {
            for kind in [KernelKind::Laplace, KernelKind::Gauss, KernelKind::Inverse] {
                let cfg = KernelConfig::new(kind, sigma, 1.5).unwrap();
                let (a, b) = (kernel_weight(g1, &cfg), kernel_weight(g1 + dg, &cfg));
                // Gauss saturates at exactly 0.0 far out; strictness only where representable.
                if b > 0.0 {
                    prop_assert!(a > b);
                }
                prop_assert!(geo_weight(g1, 0.8, &cfg) >= 1.0);
            }
        }

        #[test]
        fn geoscore_bounded_decreasing(d in 0.0f64..30000.0, dd in 1e-3f64..1000.0) {
            let s = geoscore(d);
            prop_assert!((0.0..=5000.0).contains(&s));
            prop_assert!(geoscore(d + dd) < s);
        }
    }
}
