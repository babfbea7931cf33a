//! AdamW for Euclidean parameters and Riemannian Adam for hyperboloid rows.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};
use crate::manifold::{
    constraint_residual, exp_at_raw, minkowski_dot, project_to_hyperboloid, project_to_tangent, Curvature, LorentzPoint,
};

/// Off-manifold drift, before re-projection, that counts as a warning.
pub const DRIFT_WARN_TOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the step counter of one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Array2<f64>,
    pub v: Array2<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn zeros(dim: (usize, usize)) -> Self {
        Self {
            m: Array2::zeros(dim),
            v: Array2::zeros(dim),
            t: 0,
        }
    }
}

fn check_grad(name: &str, p: &Array2<f64>, g: &Array2<f64>, st: &AdamState) -> Result<()> {
    if p.dim() != g.dim() || st.m.dim() != p.dim() {
        return Err(Error::Shape {
            name: format!("gradient of {name}"),
            expected: p.shape().to_vec(),
            found: g.shape().to_vec(),
        });
    }
    if g.iter().any(|x| !x.is_finite()) {
        return Err(Error::NonFinite(format!("gradient of {name}")));
    }
    Ok(())
}

/// Updates moments with `g` and the squared magnitudes `sq`, then returns
/// the bias-corrected step direction.
fn adapt(g: &Array2<f64>, sq: &Array2<f64>, st: &mut AdamState, h: &AdamHyper) -> Array2<f64> {
    st.t += 1;
    let (b1, b2) = (h.beta1, h.beta2);
    Zip::from(&mut st.m).and(g).for_each(|m, &g| *m = b1 * *m + (1.0 - b1) * g);
    Zip::from(&mut st.v).and(sq).for_each(|v, &s| *v = b2 * *v + (1.0 - b2) * s);
    let c1 = 1.0 - b1.powi(st.t as i32);
    let c2 = 1.0 - b2.powi(st.t as i32);
    let mut out = Array2::zeros(g.dim());
    Zip::from(&mut out)
        .and(&st.m)
        .and(&st.v)
        .for_each(|o, &m, &v| *o = (m / c1) / ((v / c2).sqrt() + h.eps));
    out
}

/// One AdamW step with decoupled weight decay (skipped when `decay` is off).
pub fn adam_step(
    name: &str,
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    st: &mut AdamState,
    h: &AdamHyper,
    decay: bool,
) -> Result<()> {
    check_grad(name, p, g, st)?;
    let dir = adapt(g, &g.mapv(|x| x * x), st, h);
    let wd = if decay { h.weight_decay } else { 0.0 };
    Zip::from(p).and(&dir).for_each(|x, &d| *x -= h.lr * (d + wd * *x));
    Ok(())
}

/// One Riemannian Adam step on a matrix whose rows are hyperboloid points.
///
/// The ambient gradient is turned into a Riemannian one by flipping the time
/// sign and projecting onto the tangent space; moments live on those tangent
/// coefficients without transport. The second moment of a row is its squared
/// Riemannian gradient norm, shared by every coordinate of the row. The adapted step is projected back onto
/// the tangent space, retracted with the exponential map and re-projected.
/// Returns the number of rows that drifted beyond [`DRIFT_WARN_TOL`].
pub fn riemannian_adam_step(
    name: &str,
    p: &mut Array2<f64>,
    g: &Array2<f64>,
    st: &mut AdamState,
    h: &AdamHyper,
    c: Curvature,
) -> Result<usize> {
    check_grad(name, p, g, st)?;
    let mut rg = Array2::zeros(g.dim());
    for ((prow, grow), mut out) in p.rows().into_iter().zip(g.rows()).zip(rg.rows_mut()) {
        let mut flipped = grow.to_vec();
        flipped[0] = -flipped[0];
        let v = project_to_tangent(prow.as_slice().expect("row"), &flipped, c);
        out.assign(&ndarray::ArrayView1::from(&v[..]));
    }
    let mut sq = Array2::zeros(rg.dim());
    for (r, mut out) in rg.rows().into_iter().zip(sq.rows_mut()) {
        let r = r.as_slice().expect("row");
        out.fill(minkowski_dot(r, r).max(0.0));
    }
    let dir = adapt(&rg, &sq, st, h);
    let mut drift = 0;
    for (mut prow, drow) in p.rows_mut().into_iter().zip(dir.rows()) {
        if drow.iter().all(|x| *x == 0.0) {
            continue;
        }
        let pc = prow.to_vec();
        let step: Vec<f64> = drow.iter().map(|d| -h.lr * d).collect();
        let step = project_to_tangent(&pc, &step, c);
        let base = LorentzPoint::from_raw(pc, c);
        let moved = exp_at_raw(&base, &step)?;
        if constraint_residual(moved.coords(), c) > DRIFT_WARN_TOL {
            drift += 1;
        }
        let fixed = project_to_hyperboloid(moved.spatial(), c);
        prow.assign(&ndarray::ArrayView1::from(fixed.coords()));
    }
    Ok(drift)
}

/// Global L2 norm over every gradient.
pub fn global_norm<'a>(grads: impl IntoIterator<Item = &'a Array2<f64>>) -> f64 {
    grads.into_iter().flat_map(|g| g.iter()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales all gradients by `max_norm / |g|` when the global norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_gradients(grads: &mut [&mut Array2<f64>], max_norm: f64) -> Result<f64> {
    if !(max_norm.is_finite() && max_norm > 0.0) {
        return Err(Error::Config(format!("clip norm must be positive, got {max_norm}")));
    }
    let n = global_norm(grads.iter().map(|g| &**g));
    if n > max_norm {
        let s = max_norm / n;
        for g in grads.iter_mut() {
            g.mapv_inplace(|x| x * s);
        }
    }
    Ok(n)
}

