use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::loss::{gwh_infonce_level, total_loss, TapeKernel};
use super::optim::{adam_step, clip_gradients, riemannian_adam_step, AdamHyper, AdamState};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::geodesy::haversine_angle;
use crate::hierarchy::Level;
use crate::index::{beam_search, build_indices, evaluate, LevelIndex, Metric, MetricsReport, PredictionPath};
use crate::model::{EntityState, HierLocModel, ParamKind};
use crate::tape::gradcheck::{check, GradCheckReport, Tolerance};
use crate::tape::{Tape, Var};

/// Images refined per tape at evaluation.
pub const EVAL_CHUNK: usize = 64;

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss: Option<f64>,
    #[serde(flatten, default)]
    pub metrics: Option<MetricsReport>,
}

/// Append-only JSON-lines sink; a no-op without a path.
pub struct MetricsLog {
    file: Option<(PathBuf, File)>,
}

impl MetricsLog {
    pub fn disabled() -> Self {
        Self { file: None }
    }

    pub fn append_to(path: &Path) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(|e| Error::io(path, e))?;
        Ok(Self {
            file: Some((path.to_path_buf(), f)),
        })
    }

    pub fn write(&mut self, rec: &EpochRecord) -> Result<()> {
        if let Some((path, f)) = &mut self.file {
            let mut line = serde_json::to_vec(rec)?;
            line.push(b'\n');
            f.write_all(&line).map_err(|e| Error::io(path.as_path(), e))?;
        }
        Ok(())
    }
}

/// Loss of one batch on `tape`: per-level losses and their weighted total.
pub struct BatchLoss {
    pub total: Var,
    pub levels: [Option<Var>; 4],
}

/// Builds the full forward pass for `rows` of `ds`. Parameters must already
/// be bound on `tape` as `bound`. Dropout is applied only when `dropout` is
/// given; negatives are subsampled with `neg_rng` when configured.
pub fn batch_loss(
    model: &HierLocModel,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    ds: &Dataset,
    rows: &[usize],
    dropout: &mut Option<&mut ChaCha8Rng>,
    neg_rng: &mut ChaCha8Rng,
) -> Result<BatchLoss> {
    batch_loss_with_keys(model, tape, bound, ds, rows, dropout, neg_rng, None)
}

/// [`batch_loss`] with the attention keys pinned to `keys` instead of the
/// detached entity tangents of this pass.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss_with_keys(
    model: &HierLocModel,
    tape: &mut Tape,
    bound: &crate::model::Bound,
    ds: &Dataset,
    rows: &[usize],
    dropout: &mut Option<&mut ChaCha8Rng>,
    neg_rng: &mut ChaCha8Rng,
    keys: Option<&[Array2<f64>; 4]>,
) -> Result<BatchLoss> {
    let targets: Vec<[usize; 4]> = rows
        .iter()
        .map(|&r| {
            ds.samples[r]
                .targets
                .ok_or_else(|| Error::contract(format!("sample {r} has no hierarchy path")))
        })
        .collect::<Result<_>>()?;
    let mut ents = model.embed_entities(tape, bound, dropout)?;
    if let Some(keys) = keys {
        ents.keys = std::array::from_fn(|l| tape.constant(keys[l].clone()));
    }
    let z = model.embed_images(tape, bound, ds.features(rows), dropout)?;
    let zs = model.refine(tape, bound, z, &ents)?;
    let lc = &model.loss_cfg;
    let kernel = TapeKernel {
        kind: lc.kernel,
        p: lc.kernel_p,
    };
    let mut levels = [None; 4];
    for l in Level::ALL {
        let li = l.index();
        if lc.beta[li] == 0.0 {
            continue;
        }
        let coords = &model.entities.coords[li];
        let n = coords.len();
        let mut geo = Array2::zeros((rows.len(), n));
        for (i, &r) in rows.iter().enumerate() {
            let c = &ds.samples[r].coord;
            for (j, e) in coords.iter().enumerate() {
                geo[[i, j]] = haversine_angle(c, e);
            }
        }
        let t: Vec<usize> = targets.iter().map(|t| t[li]).collect();
        let mask = match lc.negatives {
            Some(m) if m + 1 < n => {
                let mut mask = Array2::from_elem((rows.len(), n), false);
                for (i, &ti) in t.iter().enumerate() {
                    let mut pool: Vec<usize> = (0..n).filter(|&j| j != ti).collect();
                    pool.shuffle(neg_rng);
                    mask[[i, ti]] = true;
                    for &j in &pool[..m] {
                        mask[[i, j]] = true;
                    }
                }
                Some(mask)
            }
            _ => None,
        };
        let d = model.distances(tape, zs, ents.points[li])?;
        let scalars = model.loss_scalars(tape, bound, l)?;
        levels[li] = Some(gwh_infonce_level(tape, d, &geo, &t, &scalars, kernel, mask)?);
    }
    let total = total_loss(tape, &levels, &lc.beta)?;
    Ok(BatchLoss { total, levels })
}

/// Per-level indices over the model's current entity points.
pub fn model_indices(model: &HierLocModel, state: &EntityState) -> Result<[LevelIndex; 4]> {
    let metric = if model.hyperbolic() {
        Metric::Lorentz(model.curvature()?)
    } else {
        Metric::Euclidean
    };
    let e = &model.entities;
    build_indices(metric, &state.points, &e.ids, &e.parents, &e.coords)
}

/// Beam-search predictions for every row of `feats`.
pub fn predict(model: &HierLocModel, feats: &Array2<f64>, width: usize) -> Result<Vec<PredictionPath>> {
    let state = model.entity_state()?;
    let indices = model_indices(model, &state)?;
    let refined = model.refine_images(&state, feats, EVAL_CHUNK)?;
    (0..refined.nrows())
        .into_par_iter()
        .map(|i| beam_search(&indices, refined.row(i).as_slice().expect("row"), width).map(|r| r.best))
        .collect()
}

pub fn evaluate_model(model: &HierLocModel, ds: &Dataset, width: usize) -> Result<MetricsReport> {
    let preds = predict(model, &ds.all_features(), width)?;
    evaluate(&preds, &ds.truth())
}

fn emit(rec: EpochRecord, log: &mut MetricsLog, history: &mut Vec<EpochRecord>) -> Result<()> {
    log.write(&rec)?;
    history.push(rec);
    Ok(())
}

/// Optimizer state and training loop over one model.
pub struct Trainer {
    pub model: HierLocModel,
    pub cfg: RunConfig,
    states: Vec<AdamState>,
    /// Rows that left the hyperboloid by more than the drift tolerance before re-projection.
    pub drift_warnings: u64,
    pub steps: u64,
}

impl Trainer {
    pub fn new(model: HierLocModel, cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let states = model.params.iter().map(|p| AdamState::zeros(p.value.dim())).collect();
        Ok(Self {
            model,
            cfg,
            states,
            drift_warnings: 0,
            steps: 0,
        })
    }

    fn hyper(&self, manifold: bool) -> AdamHyper {
        let o = &self.cfg.optim;
        AdamHyper {
            lr: if manifold { o.manifold_lr.unwrap_or(o.lr) } else { o.lr },
            beta1: o.beta1,
            beta2: o.beta2,
            eps: o.eps,
            weight_decay: o.weight_decay,
        }
    }

    /// One optimizer step on `rows`; returns the batch loss.
    pub fn step(&mut self, ds: &Dataset, rows: &[usize], dropout: &mut ChaCha8Rng, neg: &mut ChaCha8Rng) -> Result<f64> {
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true);
        let mut drop = Some(dropout);
        let bl = batch_loss(&self.model, &mut tape, &bound, ds, rows, &mut drop, neg)?;
        let loss = tape.scalar_value(bl.total);
        if !loss.is_finite() {
            let parts: Vec<String> = bl
                .levels
                .iter()
                .zip(Level::ALL)
                .filter_map(|(v, l)| v.map(|v| format!("{}={}", l.name(), tape.scalar_value(v))))
                .collect();
            let ids: Vec<&str> = rows.iter().map(|&r| ds.samples[r].ids[3].as_str()).collect();
            return Err(Error::Diverged(format!(
                "non-finite loss at step {}: levels [{}], rows {:?}, cities {:?}",
                self.steps,
                parts.join(", "),
                rows,
                ids
            )));
        }
        let mut grads = tape.backward(bl.total)?;
        let mut owned: Vec<Option<Array2<f64>>> = bound.vars.iter().map(|&v| grads.take(v)).collect();
        for (p, g) in self.model.params.iter().zip(&owned) {
            if let Some(g) = g {
                if g.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged(format!("non-finite gradient for {} at step {}", p.name, self.steps)));
                }
            }
        }
        let mut refs: Vec<&mut Array2<f64>> = owned.iter_mut().flatten().collect();
        clip_gradients(&mut refs, self.cfg.optim.clip_norm)?;
        let euclid = self.hyper(false);
        let manifold = self.hyper(true);
        let c = self.model.curvature()?;
        for ((p, g), st) in self.model.params.iter_mut().zip(&owned).zip(&mut self.states) {
            let Some(g) = g else { continue };
            if !p.trainable {
                continue;
            }
            match p.kind {
                ParamKind::Euclidean => adam_step(&p.name, &mut p.value, g, st, &euclid, p.decay)?,
                ParamKind::Manifold => {
                    self.drift_warnings += riemannian_adam_step(&p.name, &mut p.value, g, st, &manifold, c)? as u64
                }
            }
        }
        self.steps += 1;
        Ok(loss)
    }

    /// Runs the configured epochs. Logs epoch 0 evaluation, then per epoch
    /// the mean training loss and, when enabled, test metrics.
    pub fn run(&mut self, train: &Dataset, eval: Option<&Dataset>, log: &mut MetricsLog) -> Result<Vec<EpochRecord>> {
        if train.d_img != self.model.d_img {
            return Err(Error::Shape {
                name: "training features".into(),
                expected: vec![self.model.d_img],
                found: vec![train.d_img],
            });
        }
        let tc = self.cfg.train.clone();
        if tc.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        let rows = train.trainable();
        if rows.is_empty() && tc.epochs > 0 {
            return Err(Error::contract("no training sample resolves into the hierarchy"));
        }
        let mut shuffle = ChaCha8Rng::seed_from_u64(tc.seed);
        let mut dropout = ChaCha8Rng::seed_from_u64(tc.seed ^ 0x9e37_79b9_7f4a_7c15);
        let mut neg = ChaCha8Rng::seed_from_u64(tc.seed.rotate_left(17) ^ 0x5851_f42d);
        let mut history = Vec::new();
        if let (Some(ev), true) = (eval, tc.eval_each_epoch) {
            let m = evaluate_model(&self.model, ev, tc.beam_width)?;
            emit(
                EpochRecord {
                    epoch: 0,
                    split: "test".into(),
                    loss: None,
                    metrics: Some(m),
                },
                log,
                &mut history,
            )?;
        }
        for epoch in 1..=tc.epochs {
            let mut order = rows.clone();
            order.shuffle(&mut shuffle);
            let mut sum = 0.0;
            let mut n = 0usize;
            for batch in order.chunks(tc.batch_size) {
                sum += self.step(train, batch, &mut dropout, &mut neg)? * batch.len() as f64;
                n += batch.len();
            }
            emit(
                EpochRecord {
                    epoch,
                    split: "train".into(),
                    loss: Some(sum / n as f64),
                    metrics: None,
                },
                log,
                &mut history,
            )?;
            if let (Some(ev), true) = (eval, tc.eval_each_epoch) {
                let m = evaluate_model(&self.model, ev, tc.beam_width)?;
                emit(
                    EpochRecord {
                        epoch,
                        split: "test".into(),
                        loss: None,
                        metrics: Some(m),
                    },
                    log,
                    &mut history,
                )?;
            }
        }
        Ok(history)
    }
}

/// Central-difference check of every parameter gradient of the batch loss
/// on `rows`, with dropout off. Attention keys carry no gradient, so they are
/// held at their values for the unperturbed parameters.
pub fn check_pipeline_gradients(
    model: &HierLocModel,
    ds: &Dataset,
    rows: &[usize],
    tol: &Tolerance,
) -> Result<GradCheckReport> {
    let inputs: Vec<Array2<f64>> = model.params.iter().map(|p| p.value.clone()).collect();
    let keys = model.entity_state()?.keys;
    check(&inputs, tol, |tape, vars| {
        let bound = model.params.bind_vars(vars.to_vec())?;
        let mut neg = ChaCha8Rng::seed_from_u64(0);
        Ok(batch_loss_with_keys(model, tape, &bound, ds, rows, &mut None, &mut neg, Some(&keys))?.total)
    })
}
