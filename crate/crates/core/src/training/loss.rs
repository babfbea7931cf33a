//! Geo-weighted InfoNCE over per-level distances.
//!
//! For each image row the logits are `-D/tau + ln(1 + lambda * k(g / sigma))`,
//! with the log-weight of the positive column fixed at zero, and the loss is
//! the row cross-entropy against the positive.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::geodesy::KernelKind;
use crate::model::LossScalars;
use crate::tape::{Tape, Var};

/// Kernel shape for the on-tape geographic weights.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TapeKernel {
    pub kind: KernelKind,
    /// Exponent of the inverse kernel.
    pub p: f64,
}

/// Mean GWH-InfoNCE over the rows of `dist` (`B x N`).
///
/// `geo` holds haversine angles between each image and each entity,
/// `targets` the positive column per row, and `candidates` an optional mask
/// restricting the negatives (the positive must stay allowed).
pub fn gwh_infonce_level(
    tape: &mut Tape,
    dist: Var,
    geo: &Array2<f64>,
    targets: &[usize],
    scalars: &LossScalars,
    kernel: TapeKernel,
    candidates: Option<Array2<bool>>,
) -> Result<Var> {
    let (b, n) = tape.shape(dist);
    if geo.dim() != (b, n) {
        return Err(Error::Shape {
            name: "geo angle matrix".into(),
            expected: vec![b, n],
            found: geo.shape().to_vec(),
        });
    }
    let negatives = match &candidates {
        None => n.saturating_sub(1),
        Some(m) => (0..b).map(|i| m.row(i).iter().filter(|&&x| x).count().saturating_sub(1)).min().unwrap_or(0),
    };
    if b == 0 || negatives == 0 {
        return Err(Error::contract("InfoNCE needs at least one negative per row"));
    }
    let inv_tau = tape.recip(scalars.tau);
    let scaled = tape.mul_scalar(dist, inv_tau)?;
    let mut logits = tape.scale(scaled, -1.0);
    if let Some(lambda) = scalars.lambda {
        let g = tape.constant(geo.clone());
        let inv_sigma = tape.recip(scalars.sigma);
        let x = tape.mul_scalar(g, inv_sigma)?;
        let k = match kernel.kind {
            KernelKind::Laplace => {
                let e = tape.scale(x, -1.0);
                tape.exp(e)
            }
            KernelKind::Gauss => {
                let sq = tape.square(x);
                let e = tape.scale(sq, -1.0);
                tape.exp(e)
            }
            KernelKind::Inverse => {
                let one_plus = tape.add_const(x, 1.0);
                let l = tape.ln(one_plus);
                let e = tape.scale(l, -kernel.p);
                tape.exp(e)
            }
        };
        let lk = tape.mul_scalar(k, lambda)?;
        let w = tape.add_const(lk, 1.0);
        let logw = tape.ln(w);
        let mut neg = Array2::from_elem((b, n), 1.0);
        for (i, &t) in targets.iter().enumerate() {
            if t < n {
                neg[[i, t]] = 0.0;
            }
        }
        let neg = tape.constant(neg);
        let logw = tape.mul(logw, neg)?;
        logits = tape.add(logits, logw)?;
    }
    let ce = tape.cross_entropy_rows(logits, targets, candidates)?;
    Ok(tape.mean(ce))
}

/// `sum_l beta_l * L_l`, skipping levels whose weight is zero.
pub fn total_loss(tape: &mut Tape, losses: &[Option<Var>; 4], beta: &[f64; 4]) -> Result<Var> {
    if let Some(b) = beta.iter().find(|b| !(b.is_finite() && **b >= 0.0)) {
        return Err(Error::Config(format!("level weights must be nonnegative, got {b}")));
    }
    let mut acc: Option<Var> = None;
    for (l, (loss, &w)) in losses.iter().zip(beta).enumerate() {
        if w == 0.0 {
            continue;
        }
        let loss = loss.ok_or_else(|| Error::contract(format!("missing loss for level {l}")))?;
        let term = tape.scale(loss, w);
        acc = Some(match acc {
            None => term,
            Some(a) => tape.add(a, term)?,
        });
    }
    acc.ok_or_else(|| Error::Config("every level weight is zero".into()))
}

/// Plain-float reference of one row's loss with the max-shift applied.
pub fn reference_loss(d_pos: f64, d_neg: &[f64], weights: &[f64], tau: f64) -> Result<f64> {
    if d_neg.is_empty() || d_neg.len() != weights.len() {
        return Err(Error::contract("reference loss needs matching, non-empty negatives"));
    }
    let lp = -d_pos / tau;
    let logits: Vec<f64> = d_neg.iter().zip(weights).map(|(d, w)| -d / tau + w.ln()).collect();
    let mx = logits.iter().copied().fold(lp, f64::max);
    let z = (lp - mx).exp() + logits.iter().map(|l| (l - mx).exp()).sum::<f64>();
    Ok(mx + z.ln() - lp)
}

/// Direct evaluation of `-ln(e^{-d+/tau} / (e^{-d+/tau} + sum_k w_k e^{-d_k/tau}))`.
pub fn reference_loss_unshifted(d_pos: f64, d_neg: &[f64], weights: &[f64], tau: f64) -> f64 {
    let p = (-d_pos / tau).exp();
    let z: f64 = d_neg.iter().zip(weights).map(|(d, w)| w * (-d / tau).exp()).sum();
    -(p / (p + z)).ln()
}
