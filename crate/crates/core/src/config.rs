//! Run configuration: every hyperparameter, dataset path and seed, loaded
//! from JSON with unknown keys rejected.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodesy::KernelKind;
use crate::hierarchy::HierarchyConfig;

/// Geometry of the embedding space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    #[default]
    Hyperbolic,
    /// Ablation: flat `R^d`, identity exp/log maps and Euclidean distances.
    Euclidean,
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hyperbolic" | "lorentz" => Ok(Self::Hyperbolic),
            "euclidean" | "euclidean-ablation" => Ok(Self::Euclidean),
            other => Err(Error::Config(format!("unknown manifold '{other}'"))),
        }
    }
}

/// How entity anchors are stored and optimized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum AnchorMode {
    /// Points on the hyperboloid updated by Riemannian Adam.
    #[default]
    Riemannian,
    /// Origin tangent vectors updated by AdamW.
    Tangent,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d: usize,
    pub heads: usize,
    pub hidden_ent: usize,
    pub hidden_img: usize,
    pub hidden_fuse: usize,
    pub dropout: f64,
    pub d_text: usize,
    pub loc_scales: usize,
    pub alpha_init: f64,
    pub anchor_sigma: f64,
    pub curvature: f64,
    pub manifold: ManifoldKind,
    pub anchor_mode: AnchorMode,
    /// Attend only to the `M` entities nearest to the unrefined image per level.
    pub attention_cap: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d: 128,
            heads: 8,
            hidden_ent: 256,
            hidden_img: 256,
            hidden_fuse: 256,
            dropout: 0.1,
            d_text: 64,
            loc_scales: 16,
            alpha_init: 0.1,
            anchor_sigma: 0.02,
            curvature: 0.8,
            manifold: ManifoldKind::Hyperbolic,
            anchor_mode: AnchorMode::Riemannian,
            attention_cap: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    /// Kernel bandwidth in haversine-angle units (radians).
    pub sigma: f64,
    pub kernel: KernelKind,
    /// Exponent of the inverse kernel.
    pub kernel_p: f64,
    pub squared_distance: bool,
    /// Weights for country, region, subregion and city.
    pub beta: [f64; 4],
    /// Train tau, lambda and sigma; otherwise they stay at their initial values.
    pub learn_scalars: bool,
    /// Separate tau, lambda and sigma per level.
    pub per_level_scalars: bool,
    /// Uniformly sample this many negatives per image and level instead of using all.
    pub negatives: Option<usize>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 1.0,
            sigma: 0.1,
            kernel: KernelKind::Laplace,
            kernel_p: 1.0,
            squared_distance: true,
            beta: [1.0; 4],
            learn_scalars: true,
            per_level_scalars: false,
            negatives: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    /// Learning rate of Riemannian Adam; defaults to `lr`.
    pub manifold_lr: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            manifold_lr: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beam_width: usize,
    /// Evaluate on the test split after every epoch when one is configured.
    pub eval_each_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 5,
            batch_size: 16,
            seed: 0,
            beam_width: 10,
            eval_each_epoch: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub hierarchy: Option<PathBuf>,
    pub train_csv: Option<PathBuf>,
    pub train_features: Option<PathBuf>,
    pub test_csv: Option<PathBuf>,
    pub test_features: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub hierarchy: HierarchyConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub optim: OptimConfig,
    pub train: TrainConfig,
}

fn positive(name: &str, x: f64) -> Result<()> {
    if x.is_finite() && x > 0.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("{name} must be positive, got {x}")))
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        for (name, v) in [
            ("model.d", m.d),
            ("model.heads", m.heads),
            ("model.hidden_ent", m.hidden_ent),
            ("model.hidden_img", m.hidden_img),
            ("model.hidden_fuse", m.hidden_fuse),
            ("model.d_text", m.d_text),
            ("model.loc_scales", m.loc_scales),
            ("train.batch_size", self.train.batch_size),
            ("train.beam_width", self.train.beam_width),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !m.d.is_multiple_of(m.heads) {
            return Err(Error::Config(format!("model.d {} not divisible by {} heads", m.d, m.heads)));
        }
        if !(0.0..1.0).contains(&m.dropout) {
            return Err(Error::Config(format!("model.dropout must be in [0, 1), got {}", m.dropout)));
        }
        if m.attention_cap == Some(0) {
            return Err(Error::Config("model.attention_cap must be positive".into()));
        }
        positive("model.curvature", m.curvature)?;
        if !(m.alpha_init.is_finite() && m.anchor_sigma.is_finite() && m.anchor_sigma >= 0.0) {
            return Err(Error::Config("model.alpha_init and model.anchor_sigma must be finite".into()));
        }
        if m.manifold == ManifoldKind::Euclidean && m.anchor_mode == AnchorMode::Riemannian {
            return Err(Error::Config(
                "riemannian anchors need the hyperbolic manifold; use anchor_mode \"tangent\"".into(),
            ));
        }
        let l = &self.loss;
        positive("loss.tau", l.tau)?;
        positive("loss.sigma", l.sigma)?;
        positive("loss.kernel_p", l.kernel_p)?;
        if !(l.lambda.is_finite() && l.lambda >= 0.0) {
            return Err(Error::Config(format!("loss.lambda must be nonnegative, got {}", l.lambda)));
        }
        if l.beta.iter().any(|b| !(b.is_finite() && *b >= 0.0)) {
            return Err(Error::Config("loss.beta entries must be nonnegative".into()));
        }
        if l.negatives == Some(0) {
            return Err(Error::Config("loss.negatives must be positive".into()));
        }
        let o = &self.optim;
        positive("optim.lr", o.lr)?;
        if let Some(lr) = o.manifold_lr {
            positive("optim.manifold_lr", lr)?;
        }
        positive("optim.eps", o.eps)?;
        positive("optim.clip_norm", o.clip_norm)?;
        if !(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) {
            return Err(Error::Config("optim betas must be in [0, 1)".into()));
        }
        if !(o.weight_decay.is_finite() && o.weight_decay >= 0.0) {
            return Err(Error::Config("optim.weight_decay must be nonnegative".into()));
        }
        Ok(())
    }
}
