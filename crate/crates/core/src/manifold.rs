//! Lorentz (hyperboloid) model of hyperbolic space.
//!
//! Points live in `R^{d+1}` with the time coordinate `x0` first and satisfy
//! `<x, x>_L = -K`, `x0 > 0`, where `<x, y>_L = -x0*y0 + sum_i x_i*y_i`.
//! Sectional curvature is `-1/K` and the hyperboloid radius is `R = sqrt(K)`.
//!
//! Distances follow `d(x, y) = arcosh(-<x, y>_L / K)` without an extra `R`
//! factor, so `d(o, exp_o(v)) = |v| / R`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance for the hyperboloid constraint check.
pub const CONSTRAINT_TOL: f64 = 1e-9;
/// Relative tolerance for tangency `<p, v>_L = 0` in [`exp_at`].
pub const TANGENT_TOL: f64 = 1e-8;
/// Below this argument the `sinh(t)/t` family switches to its Taylor series.
pub const SERIES_EPS: f64 = 1e-6;

/// Curvature parameter `K > 0` and the derived radius `R = sqrt(K)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "f64", into = "f64")]
pub struct Curvature {
    k: f64,
    r: f64,
}

impl Curvature {
    pub fn new(k: f64) -> Result<Self> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::contract(format!("curvature K must be positive, got {k}")));
        }
        Ok(Self { k, r: k.sqrt() })
    }

    #[inline]
    pub fn k(&self) -> f64 {
        self.k
    }

    #[inline]
    pub fn radius(&self) -> f64 {
        self.r
    }

    fn ensure_same(&self, other: &Curvature) -> Result<()> {
        if self.k == other.k {
            Ok(())
        } else {
            Err(Error::CurvatureMismatch(self.k, other.k))
        }
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self::new(0.8).expect("default curvature is valid")
    }
}

impl TryFrom<f64> for Curvature {
    type Error = Error;
    fn try_from(k: f64) -> Result<Self> {
        Curvature::new(k)
    }
}

impl From<Curvature> for f64 {
    fn from(c: Curvature) -> f64 {
        c.k
    }
}

/// A point on the hyperboloid, `coords = (x0, x_1, ..., x_d)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl LorentzPoint {
    /// Wraps ambient coordinates after checking the hyperboloid constraint.
    pub fn new(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        check_on_manifold(&coords, curvature)?;
        Ok(Self { coords, curvature })
    }

    /// Skips validation. Callers guarantee the constraint by construction.
    pub(crate) fn from_raw(coords: Vec<f64>, curvature: Curvature) -> Self {
        Self { coords, curvature }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn time(&self) -> f64 {
        self.coords[0]
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[1..]
    }

    /// Manifold dimension `d` (ambient length minus one).
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    /// `|<x, x>_L + K|` scaled by the magnitude of the terms involved.
    pub fn constraint_residual(&self) -> f64 {
        constraint_residual(&self.coords, self.curvature)
    }
}

/// Spatial tangent vector at the origin (the implicit time component is 0).
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    v: Vec<f64>,
    curvature: Curvature,
}

impl TangentVector {
    pub fn new(v: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if v.is_empty() {
            return Err(Error::contract("tangent vector must have d >= 1 entries"));
        }
        if v.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("tangent vector".into()));
        }
        Ok(Self { v, curvature })
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.v
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.v
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn norm(&self) -> f64 {
        norm(&self.v)
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Minkowski bilinear form without length checks.
#[inline]
pub fn minkowski_dot(x: &[f64], y: &[f64]) -> f64 {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = -x[0] * y[0];
    for i in 1..x.len() {
        acc += x[i] * y[i];
    }
    acc
}

/// `<x, y>_L = -x0*y0 + sum_{i>=1} x_i*y_i`.
pub fn lorentz_inner(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::contract(format!(
            "lorentz_inner length mismatch: {} vs {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(Error::contract("lorentz_inner needs ambient length >= 2"));
    }
    Ok(minkowski_dot(x, y))
}

pub(crate) fn constraint_residual(coords: &[f64], c: Curvature) -> f64 {
    let scale = c.k().max(coords[0] * coords[0]);
    (minkowski_dot(coords, coords) + c.k()).abs() / scale
}

fn check_on_manifold(coords: &[f64], c: Curvature) -> Result<()> {
    if coords.len() < 2 {
        return Err(Error::contract("a Lorentz point needs ambient length >= 2"));
    }
    if coords.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("Lorentz point".into()));
    }
    let res = constraint_residual(coords, c);
    if res > CONSTRAINT_TOL {
        return Err(Error::OffManifold(format!(
            "relative residual {res:e} exceeds {CONSTRAINT_TOL:e}"
        )));
    }
    if coords[0] < c.radius() * (1.0 - CONSTRAINT_TOL) {
        return Err(Error::OffManifold(format!(
            "time coordinate {} below radius {}",
            coords[0],
            c.radius()
        )));
    }
    Ok(())
}

/// `sinh(t) / t` with the series fallback near zero.
#[inline]
pub fn sinhc(t: f64) -> f64 {
    if t.abs() < SERIES_EPS {
        1.0 + t * t / 6.0
    } else {
        t.sinh() / t
    }
}

/// `t / sinh(t)`, the reciprocal of [`sinhc`].
#[inline]
pub fn inv_sinhc(t: f64) -> f64 {
    if t.abs() < SERIES_EPS {
        1.0 - t * t / 6.0
    } else {
        t / t.sinh()
    }
}

/// `arcosh(max(u, 1))`; NaN stays NaN.
#[inline]
pub fn arcosh_clamped(u: f64) -> f64 {
    if u.is_nan() {
        u
    } else {
        u.max(1.0).acosh()
    }
}

/// Canonical origin `(R, 0, ..., 0)`.
pub fn origin(curvature: Curvature, d: usize) -> Result<LorentzPoint> {
    if d < 1 {
        return Err(Error::contract("origin needs d >= 1"));
    }
    let mut coords = vec![0.0; d + 1];
    coords[0] = curvature.radius();
    Ok(LorentzPoint::from_raw(coords, curvature))
}

/// Writes `exp_o(v)` into `out` (length `v.len() + 1`).
pub fn exp_origin_into(v: &[f64], c: Curvature, out: &mut [f64]) {
    let r = c.radius();
    let n = norm(v);
    let t = n / r;
    out[0] = r * t.cosh();
    // R sinh(t) / |v| = sinh(t)/t
    let coef = sinhc(t);
    for (o, x) in out[1..].iter_mut().zip(v) {
        *o = coef * x;
    }
}

/// Exponential map at the origin: `(R cosh(|v|/R), R sinh(|v|/R) v/|v|)`.
pub fn exp_origin(v: &TangentVector) -> Result<LorentzPoint> {
    let mut out = vec![0.0; v.as_slice().len() + 1];
    exp_origin_into(v.as_slice(), v.curvature(), &mut out);
    if out.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("exp_origin result (tangent norm too large)".into()));
    }
    Ok(LorentzPoint::from_raw(out, v.curvature()))
}

/// Writes `log_o(x)` into `out` (length `x.len() - 1`).
///
/// On the hyperboloid `x0^2 - R^2 = |x_s|^2` and `arcosh(x0/R) = asinh(|x_s|/R)`;
/// the asinh form is used near the origin where arcosh loses precision.
pub fn log_origin_into(x: &[f64], c: Curvature, out: &mut [f64]) {
    let r = c.radius();
    let spatial = &x[1..];
    let ns = norm(spatial);
    let ratio = (x[0] / r).max(1.0);
    let s = ns / r;
    let coef = if s < SERIES_EPS {
        1.0 - s * s / 6.0
    } else {
        let t = if ratio < 2.0 { s.asinh() } else { ratio.acosh() };
        t / s
    };
    for (o, xi) in out.iter_mut().zip(spatial) {
        *o = coef * xi;
    }
}

/// Logarithmic map at the origin: `R arcosh(x0/R) / sqrt(x0^2 - R^2) * x_s`.
pub fn log_origin(x: &LorentzPoint) -> Result<TangentVector> {
    check_on_manifold(x.coords(), x.curvature())?;
    let mut out = vec![0.0; x.dim()];
    log_origin_into(x.coords(), x.curvature(), &mut out);
    Ok(TangentVector {
        v: out,
        curvature: x.curvature(),
    })
}

/// Exponential map at an arbitrary base point for an ambient tangent `v`.
///
/// The time coordinate of the result is recomputed from its spatial part,
/// so the constraint holds to rounding even far from the origin.
pub fn exp_at(p: &LorentzPoint, v: &[f64]) -> Result<LorentzPoint> {
    let raw = exp_at_raw(p, v)?;
    Ok(project_to_hyperboloid(raw.spatial(), raw.curvature()))
}

/// [`exp_at`] without the final time re-anchoring.
pub(crate) fn exp_at_raw(p: &LorentzPoint, v: &[f64]) -> Result<LorentzPoint> {
    let c = p.curvature();
    if v.len() != p.coords().len() {
        return Err(Error::contract(format!(
            "exp_at: tangent length {} vs point length {}",
            v.len(),
            p.coords().len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite("exp_at tangent".into()));
    }
    let pv = minkowski_dot(p.coords(), v);
    let scale = 1f64.max(norm(p.coords()) * norm(v));
    if pv.abs() > TANGENT_TOL * scale {
        return Err(Error::NotTangent(pv));
    }
    let vv = minkowski_dot(v, v);
    if vv < -TANGENT_TOL * scale.max(norm(v).powi(2)) {
        return Err(Error::contract(format!(
            "exp_at: tangent vector is timelike (<v, v>_L = {vv:e})"
        )));
    }
    let r = c.radius();
    let n = vv.max(0.0).sqrt();
    let t = n / r;
    let ch = t.cosh();
    let coef = sinhc(t);
    let coords: Vec<f64> = p
        .coords()
        .iter()
        .zip(v)
        .map(|(pi, vi)| ch * pi + coef * vi)
        .collect();
    Ok(LorentzPoint::from_raw(coords, c))
}

/// Logarithmic map at `p`: the ambient tangent `v` with `exp_at(p, v) = x`.
pub fn log_at(p: &LorentzPoint, x: &LorentzPoint) -> Result<Vec<f64>> {
    p.curvature().ensure_same(&x.curvature())?;
    if p.coords().len() != x.coords().len() {
        return Err(Error::contract("log_at: dimension mismatch"));
    }
    let u = -minkowski_dot(p.coords(), x.coords()) / p.curvature().k();
    if u <= 1.0 {
        return Ok(vec![0.0; p.coords().len()]);
    }
    let t = u.acosh();
    let coef = inv_sinhc(t);
    Ok(x
        .coords()
        .iter()
        .zip(p.coords())
        .map(|(xi, pi)| coef * (xi - u * pi))
        .collect())
}

/// `arcosh(-<x, y>_L / K)` with the argument clamped to `>= 1`.
pub fn geodesic_distance(x: &LorentzPoint, y: &LorentzPoint) -> Result<f64> {
    x.curvature().ensure_same(&y.curvature())?;
    if x.coords().len() != y.coords().len() {
        return Err(Error::contract("geodesic_distance: dimension mismatch"));
    }
    Ok(distance_raw(x.coords(), y.coords(), x.curvature()))
}

/// Distance on raw ambient slices of equal length.
#[inline]
pub fn distance_raw(x: &[f64], y: &[f64], c: Curvature) -> f64 {
    arcosh_clamped(-minkowski_dot(x, y) / c.k())
}

/// Lifts a spatial part onto the hyperboloid with `x0 = sqrt(K + |s|^2)`.
pub fn project_to_hyperboloid(spatial: &[f64], curvature: Curvature) -> LorentzPoint {
    let mut coords = Vec::with_capacity(spatial.len() + 1);
    let sq: f64 = spatial.iter().map(|x| x * x).sum();
    coords.push((curvature.k() + sq).sqrt());
    coords.extend_from_slice(spatial);
    LorentzPoint::from_raw(coords, curvature)
}

/// Projects an ambient vector onto the tangent space at `p`:
/// `v + (<p, v>_L / K) p`.
pub fn project_to_tangent(p: &[f64], v: &[f64], c: Curvature) -> Vec<f64> {
    let coef = minkowski_dot(p, v) / c.k();
    v.iter().zip(p).map(|(vi, pi)| vi + coef * pi).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn k(v: f64) -> Curvature {
        Curvature::new(v).unwrap()
    }

    fn tv(v: Vec<f64>, c: Curvature) -> TangentVector {
        TangentVector::new(v, c).unwrap()
    }

    #[test]
    fn inner_product_examples() {
        let o = origin(k(1.0), 2).unwrap();
        assert_eq!(lorentz_inner(o.coords(), o.coords()).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[1.0, 0.0, 0.0], &[1.0, 1.0, 0.0]).unwrap(), -1.0);
        assert_eq!(lorentz_inner(&[2.0, 1.0, 1.0], &[3.0, 2.0, 0.0]).unwrap(), -4.0);
    }

    #[test]
    fn inner_product_rejects_bad_lengths() {
        assert!(matches!(
            lorentz_inner(&[1.0, 2.0], &[1.0, 2.0, 3.0]),
            Err(Error::Contract(_))
        ));
        assert!(lorentz_inner(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn origin_examples() {
        assert_eq!(origin(k(1.0), 3).unwrap().coords(), &[1.0, 0.0, 0.0, 0.0]);
        let o = origin(k(0.8), 2).unwrap();
        assert_abs_diff_eq!(o.time(), 0.894_427_190_999_915_9, epsilon = 1e-15);
        assert_eq!(o.spatial(), &[0.0, 0.0]);
        assert_eq!(origin(k(4.0), 1).unwrap().coords(), &[2.0, 0.0]);
        assert!(origin(k(1.0), 0).is_err());
    }

    #[test]
    fn curvature_must_be_positive() {
        assert!(Curvature::new(0.0).is_err());
        assert!(Curvature::new(-1.0).is_err());
        assert!(Curvature::new(f64::NAN).is_err());
        let c = k(0.8);
        assert_abs_diff_eq!(c.radius() * c.radius(), 0.8, epsilon = 1e-15);
    }

    #[test]
    fn exp_origin_examples() {
        let c = k(1.0);
        let o = exp_origin(&tv(vec![0.0, 0.0], c)).unwrap();
        assert_eq!(o.coords(), origin(c, 2).unwrap().coords());

        let x = exp_origin(&tv(vec![1.0, 0.0], c)).unwrap();
        assert_abs_diff_eq!(x.coords()[0], 1.543_080_634_815_243_8, epsilon = 1e-14);
        assert_abs_diff_eq!(x.coords()[1], 1.175_201_193_643_801_5, epsilon = 1e-14);
        assert_eq!(x.coords()[2], 0.0);
    }

    #[test]
    fn exp_origin_rejects_non_finite() {
        assert!(TangentVector::new(vec![f64::NAN], k(1.0)).is_err());
        assert!(exp_origin(&tv(vec![1e6, 0.0], k(1.0))).is_err());
    }

    #[test]
    fn log_origin_examples() {
        let c = k(1.0);
        let o = origin(c, 2).unwrap();
        assert_eq!(log_origin(&o).unwrap().as_slice(), &[0.0, 0.0]);

        let x = LorentzPoint::new(
            vec![1.543_080_634_815_243_8, 1.175_201_193_643_801_5, 0.0],
            c,
        )
        .unwrap();
        let v = log_origin(&x).unwrap();
        assert_abs_diff_eq!(v.as_slice()[0], 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v.as_slice()[1], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn log_origin_rejects_points_below_radius() {
        let c = k(1.0);
        assert!(matches!(
            LorentzPoint::new(vec![0.5, 0.0], c),
            Err(Error::OffManifold(_))
        ));
    }

    #[test]
    fn exp_log_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &kk in &[0.25, 0.8, 1.0, 3.0] {
            let c = k(kk);
            for _ in 0..500 {
                let d = rng.random_range(1..8);
                let scale = rng.random_range(0.0..10.0) / (d as f64).sqrt();
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0) * scale).collect();
                let t = tv(v.clone(), c);
                let x = exp_origin(&t).unwrap();
                assert!(x.constraint_residual() <= CONSTRAINT_TOL);
                let back = log_origin(&x).unwrap();
                let err = norm(
                    &back.as_slice().iter().zip(&v).map(|(a, b)| a - b).collect::<Vec<_>>(),
                );
                assert!(err <= 1e-9 * (1.0 + t.norm()), "err {err} at |v| = {}", t.norm());
            }
        }
    }

    #[test]
    fn exp_at_specializes_to_origin() {
        let c = k(0.8);
        let o = origin(c, 3).unwrap();
        let w = vec![0.3, -0.2, 0.5];
        let mut amb = vec![0.0];
        amb.extend_from_slice(&w);
        let a = exp_at(&o, &amb).unwrap();
        let b = exp_origin(&tv(w, c)).unwrap();
        for (x, y) in a.coords().iter().zip(b.coords()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-14);
        }
        let same = exp_at(&a, &[0.0; 4]).unwrap();
        assert_eq!(same.coords(), a.coords());
    }

    #[test]
    fn exp_at_rejects_non_tangent() {
        let c = k(1.0);
        let o = origin(c, 2).unwrap();
        assert!(matches!(exp_at(&o, &[1.0, 0.0, 0.0]), Err(Error::NotTangent(_))));
    }

    #[test]
    fn log_at_examples() {
        let c = k(0.8);
        let p = exp_origin(&tv(vec![0.4, -0.1], c)).unwrap();
        assert!(log_at(&p, &p).unwrap().iter().all(|x| *x == 0.0));

        let o = origin(c, 2).unwrap();
        let x = exp_origin(&tv(vec![0.7, 1.1], c)).unwrap();
        let v = log_at(&o, &x).unwrap();
        let lo = log_origin(&x).unwrap();
        assert_abs_diff_eq!(v[0], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(v[1], lo.as_slice()[0], epsilon = 1e-12);
        assert_abs_diff_eq!(v[2], lo.as_slice()[1], epsilon = 1e-12);
    }

    #[test]
    fn exp_at_log_at_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &kk in &[0.5, 0.8, 2.0] {
            let c = k(kk);
            for _ in 0..300 {
                let d = 3;
                let base: Vec<f64> = (0..d).map(|_| rng.random_range(-1.5..1.5)).collect();
                let p = exp_origin(&tv(base, c)).unwrap();
                let raw: Vec<f64> = (0..=d).map(|_| rng.random_range(-0.5..0.5)).collect();
                let v = project_to_tangent(p.coords(), &raw, c);
                let x = exp_at(&p, &v).unwrap();
                assert!(x.constraint_residual() < 1e-9);
                let back = log_at(&p, &x).unwrap();
                for (a, b) in back.iter().zip(&v) {
                    assert!((a - b).abs() < 1e-7, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn distance_examples() {
        let c = k(1.0);
        let x = LorentzPoint::new(vec![1.0, 0.0, 0.0], c).unwrap();
        assert_eq!(geodesic_distance(&x, &x).unwrap(), 0.0);
        let y = LorentzPoint::new(vec![2f64.cosh(), 2f64.sinh(), 0.0], c).unwrap();
        assert_abs_diff_eq!(geodesic_distance(&x, &y).unwrap(), 2.0, epsilon = 1e-12);

        let c8 = k(0.8);
        let v = tv(vec![1.2, -0.4, 2.0], c8);
        let p = exp_origin(&v).unwrap();
        let o = origin(c8, 3).unwrap();
        assert_abs_diff_eq!(
            geodesic_distance(&o, &p).unwrap(),
            v.norm() / c8.radius(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn distance_rejects_curvature_mismatch() {
        let a = origin(k(1.0), 2).unwrap();
        let b = origin(k(0.8), 2).unwrap();
        assert!(matches!(
            geodesic_distance(&a, &b),
            Err(Error::CurvatureMismatch(..))
        ));
    }

    #[test]
    fn projection_examples() {
        let c = k(1.0);
        assert_eq!(
            project_to_hyperboloid(&[0.0, 0.0], c).coords(),
            origin(c, 2).unwrap().coords()
        );
        assert_eq!(project_to_hyperboloid(&[3.0, 4.0], c).time(), 26f64.sqrt());
        let p = exp_origin(&tv(vec![0.3, 0.9], k(0.8))).unwrap();
        let q = project_to_hyperboloid(p.spatial(), k(0.8));
        for (a, b) in p.coords().iter().zip(q.coords()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-14);
        }
    }
}
