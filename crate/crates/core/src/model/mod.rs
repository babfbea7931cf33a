//! Differentiable forward computation: entity embedder, image embedder and
//! per-level cross-modal attention with fusion, all recorded on a [`Tape`].

mod checkpoint;
mod params;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::{linear, Bound, Param, ParamKind, ParamStore};

use crate::config::{AnchorMode, LossConfig, ManifoldKind, ModelConfig};
use crate::error::{Error, Result};
use crate::features::{location_encoding, normalize_coords};
use crate::geodesy::GeoCoord;
use crate::hierarchy::{FlatHierarchy, Level};
use crate::manifold::{exp_origin_into, minkowski_dot, Curvature};
use crate::tape::{Tape, Var};

/// Entities of the four levels with their model input features.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityTable {
    pub ids: [Vec<String>; 4],
    pub names: [Vec<String>; 4],
    /// Parent index in the previous level; `None` for countries.
    pub parents: [Vec<Option<usize>>; 4],
    pub coords: [Vec<GeoCoord>; 4],
    /// `[location | image | text]` rows for all entities, level by level.
    pub features: Array2<f64>,
    /// Row offsets of each level in `features`; `offsets[4]` is the total.
    pub offsets: [usize; 5],
}

impl EntityTable {
    pub fn from_flat(flat: &FlatHierarchy, cfg: &ModelConfig, d_img: usize) -> Result<Self> {
        for l in Level::ALL {
            if flat.level(l).is_empty() {
                return Err(Error::contract(format!("hierarchy has no {} entities", l.name())));
            }
        }
        let d_loc = 4 * cfg.loc_scales;
        let width = d_loc + d_img + cfg.d_text;
        let total = flat.len();
        let mut features = Array2::zeros((total, width));
        let mut offsets = [0usize; 5];
        let mut ids: [Vec<String>; 4] = Default::default();
        let mut names: [Vec<String>; 4] = Default::default();
        let mut parents: [Vec<Option<usize>>; 4] = Default::default();
        let mut coords: [Vec<GeoCoord>; 4] = Default::default();
        let mut row = 0;
        for l in Level::ALL {
            let li = l.index();
            offsets[li] = row;
            for e in flat.level(l) {
                let (u, v) = normalize_coords(&e.coords);
                let loc = location_encoding(u, v, cfg.loc_scales)?;
                let mut out = features.row_mut(row);
                for (j, x) in loc.into_iter().enumerate() {
                    out[j] = x;
                }
                if let Some(img) = &e.img {
                    if img.len() != d_img {
                        return Err(Error::Shape {
                            name: format!("image feature of {}", e.id),
                            expected: vec![d_img],
                            found: vec![img.len()],
                        });
                    }
                    for (j, x) in img.iter().enumerate() {
                        out[d_loc + j] = *x;
                    }
                }
                if let Some(text) = &e.text {
                    if text.len() != cfg.d_text {
                        return Err(Error::Shape {
                            name: format!("text feature of {}", e.id),
                            expected: vec![cfg.d_text],
                            found: vec![text.len()],
                        });
                    }
                    for (j, x) in text.iter().enumerate() {
                        out[d_loc + d_img + j] = *x;
                    }
                }
                ids[li].push(e.id.clone());
                names[li].push(e.name.clone());
                parents[li].push(e.parent);
                coords[li].push(e.coords);
                row += 1;
            }
        }
        offsets[4] = row;
        Ok(Self {
            ids,
            names,
            parents,
            coords,
            features,
            offsets,
        })
    }

    pub fn len(&self, level: Level) -> usize {
        self.ids[level.index()].len()
    }

    pub fn total(&self) -> usize {
        self.offsets[4]
    }

    pub fn range(&self, level: Level) -> std::ops::Range<usize> {
        self.offsets[level.index()]..self.offsets[level.index() + 1]
    }
}

/// Dropout source; `None` evaluates deterministically.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

/// Tape handles for the entity side of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct EntityPass {
    /// Entity points per level (`N x (d+1)`, or `N x d` for the Euclidean ablation).
    pub points: [Var; 4],
    /// Gradient-detached origin tangents per level, used as attention keys.
    pub keys: [Var; 4],
}

/// Learnable loss scalars realized on the tape as positive values.
#[derive(Debug, Clone, Copy)]
pub struct LossScalars {
    pub tau: Var,
    /// `None` when lambda is pinned at 0 (plain InfoNCE).
    pub lambda: Option<Var>,
    pub sigma: Var,
}

/// The full model: configuration, entity inputs and parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct HierLocModel {
    pub cfg: ModelConfig,
    pub loss_cfg: LossConfig,
    pub d_img: usize,
    pub entities: EntityTable,
    pub params: ParamStore,
}

fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

pub const LEVEL_KEYS: [&str; 4] = ["country", "region", "subregion", "city"];

impl HierLocModel {
    /// Initializes parameters deterministically from `seed`.
    pub fn new(cfg: ModelConfig, loss_cfg: LossConfig, entities: EntityTable, d_img: usize, seed: u64) -> Result<Self> {
        if d_img == 0 {
            return Err(Error::Config("d_img must be positive".into()));
        }
        if !cfg.d.is_multiple_of(cfg.heads) {
            return Err(Error::Config(format!("d {} not divisible by {} heads", cfg.d, cfg.heads)));
        }
        if cfg.manifold == ManifoldKind::Euclidean && cfg.anchor_mode == AnchorMode::Riemannian {
            return Err(Error::Config("riemannian anchors need the hyperbolic manifold".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d;
        let n = entities.total();

        let normal = Normal::new(0.0, cfg.anchor_sigma).map_err(|e| Error::Config(e.to_string()))?;
        let eps = Array2::from_shape_fn((n, d), |_| normal.sample(&mut rng));
        let (anchor, kind) = match cfg.anchor_mode {
            AnchorMode::Tangent => (eps, ParamKind::Euclidean),
            AnchorMode::Riemannian => {
                let c = Curvature::new(cfg.curvature)?;
                let mut pts = Array2::zeros((n, d + 1));
                for (e, mut p) in eps.rows().into_iter().zip(pts.rows_mut()) {
                    exp_origin_into(e.as_slice().expect("row"), c, p.as_slice_mut().expect("row"));
                }
                (pts, ParamKind::Manifold)
            }
        };
        store.insert(Param {
            name: "anchor".into(),
            value: anchor,
            kind,
            decay: false,
            trainable: true,
        })?;

        let d_in = entities.features.ncols();
        if d_in != 4 * cfg.loc_scales + d_img + cfg.d_text {
            return Err(Error::Shape {
                name: "entity features".into(),
                expected: vec![4 * cfg.loc_scales + d_img + cfg.d_text],
                found: vec![d_in],
            });
        }
        let scalar = |name: &str, x: f64, trainable: bool| Param {
            name: name.into(),
            value: Array2::from_elem((1, 1), x),
            kind: ParamKind::Euclidean,
            decay: false,
            trainable,
        };
        params::add_linear(&mut store, &mut rng, "ent.l1", d_in, cfg.hidden_ent, false)?;
        params::add_linear(&mut store, &mut rng, "ent.l2", cfg.hidden_ent, cfg.hidden_ent, false)?;
        params::add_linear(&mut store, &mut rng, "ent.l3", cfg.hidden_ent, d, false)?;
        params::add_linear(&mut store, &mut rng, "ent.delta", d, d, false)?;
        store.insert(scalar("ent.alpha", cfg.alpha_init, true))?;

        params::add_linear(&mut store, &mut rng, "img.l1", d_img, cfg.hidden_img, false)?;
        params::add_linear(&mut store, &mut rng, "img.l2", cfg.hidden_img, d, false)?;
        params::add_linear(&mut store, &mut rng, "img.head", d, d, false)?;
        store.insert(scalar("img.alpha", cfg.alpha_init, true))?;

        for lvl in LEVEL_KEYS {
            for p in ["q", "k", "v", "o"] {
                params::add_linear(&mut store, &mut rng, &format!("attn.{lvl}.{p}"), d, d, false)?;
            }
        }
        params::add_linear(&mut store, &mut rng, "fuse.l1", 4 * d, cfg.hidden_fuse, false)?;
        params::add_linear(&mut store, &mut rng, "fuse.l2", cfg.hidden_fuse, d, true)?;

        let width = if loss_cfg.per_level_scalars { 4 } else { 1 };
        let row = |x: f64, trainable: bool, name: &str| Param {
            name: name.into(),
            value: Array2::from_elem((1, width), softplus_inv(x)),
            kind: ParamKind::Euclidean,
            decay: false,
            trainable,
        };
        let learn = loss_cfg.learn_scalars;
        store.insert(row(loss_cfg.tau, learn, "loss.tau"))?;
        store.insert(row(loss_cfg.sigma, learn, "loss.sigma"))?;
        if loss_cfg.lambda > 0.0 {
            store.insert(row(loss_cfg.lambda, learn, "loss.lambda"))?;
        }

        Ok(Self {
            cfg,
            loss_cfg,
            d_img,
            entities,
            params: store,
        })
    }

    pub fn curvature(&self) -> Result<Curvature> {
        Curvature::new(self.cfg.curvature)
    }

    pub fn radius(&self) -> f64 {
        self.cfg.curvature.sqrt()
    }

    pub fn hyperbolic(&self) -> bool {
        self.cfg.manifold == ManifoldKind::Hyperbolic
    }

    fn dropout(&self, tape: &mut Tape, x: Var, rng: &mut DropoutRng) -> Result<Var> {
        let p = self.cfg.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = Array2::from_shape_fn(tape.shape(x), |_| if r.random::<f64>() < p { 0.0 } else { keep });
                tape.dropout(x, mask)
            }
            _ => Ok(x),
        }
    }

    /// Origin tangent to model-space point: `exp_origin`, or identity in the Euclidean ablation.
    pub fn to_point(&self, tape: &mut Tape, tangent: Var) -> Var {
        if self.hyperbolic() {
            tape.exp_origin(tangent, self.radius())
        } else {
            tangent
        }
    }

    /// Embeds every entity: `H = exp_origin(eps + alpha * Delta)`.
    pub fn embed_entities(&self, tape: &mut Tape, b: &Bound, rng: &mut DropoutRng) -> Result<EntityPass> {
        let x = tape.constant(self.entities.features.clone());
        let h = linear(tape, b, "ent.l1", x)?;
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, rng)?;
        let h = linear(tape, b, "ent.l2", h)?;
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, rng)?;
        let u = linear(tape, b, "ent.l3", h)?;
        let delta = linear(tape, b, "ent.delta", u)?;
        let scaled = tape.mul_scalar(delta, b.var("ent.alpha")?)?;
        let anchor = b.var("anchor")?;
        let base = match self.cfg.anchor_mode {
            AnchorMode::Tangent => anchor,
            AnchorMode::Riemannian => tape.log_origin(anchor, self.radius())?,
        };
        let tangent = tape.add(base, scaled)?;
        let points = self.to_point(tape, tangent);
        let mut out_p = [points; 4];
        let mut out_k = [points; 4];
        for l in Level::ALL {
            let idx: Vec<usize> = self.entities.range(l).collect();
            out_p[l.index()] = tape.gather_rows(points, &idx)?;
            let t = tape.gather_rows(tangent, &idx)?;
            out_k[l.index()] = tape.detach(t);
        }
        Ok(EntityPass {
            points: out_p,
            keys: out_k,
        })
    }

    /// Image tangent `z = alpha_img * (W_img MLP_img(phi) + b_img)` for a `B x d_img` batch.
    pub fn embed_images(&self, tape: &mut Tape, b: &Bound, feats: Array2<f64>, rng: &mut DropoutRng) -> Result<Var> {
        if feats.ncols() != self.d_img {
            return Err(Error::Shape {
                name: "image features".into(),
                expected: vec![feats.nrows(), self.d_img],
                found: feats.shape().to_vec(),
            });
        }
        let x = tape.constant(feats);
        let h = linear(tape, b, "img.l1", x)?;
        let h = tape.gelu(h);
        let h = self.dropout(tape, h, rng)?;
        let m = linear(tape, b, "img.l2", h)?;
        let delta = linear(tape, b, "img.head", m)?;
        tape.mul_scalar(delta, b.var("img.alpha")?)
    }

    /// Multi-head scaled dot-product attention of `query` (`B x d`) over
    /// `kv` (`N x d`) with the block `attn.{level}`.
    pub fn multihead_attention(
        &self,
        tape: &mut Tape,
        b: &Bound,
        level: Level,
        query: Var,
        kv: Var,
        mask: Option<Array2<bool>>,
    ) -> Result<Var> {
        if tape.shape(kv).0 == 0 {
            return Err(Error::contract("attention over zero keys"));
        }
        let lvl = LEVEL_KEYS[level.index()];
        let q = linear(tape, b, &format!("attn.{lvl}.q"), query)?;
        let k = linear(tape, b, &format!("attn.{lvl}.k"), kv)?;
        let v = linear(tape, b, &format!("attn.{lvl}.v"), kv)?;
        let dh = self.cfg.d / self.cfg.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(self.cfg.heads);
        for h in 0..self.cfg.heads {
            let (lo, hi) = (h * dh, (h + 1) * dh);
            let qh = tape.slice_cols(q, lo, hi)?;
            let kh = tape.slice_cols(k, lo, hi)?;
            let vh = tape.slice_cols(v, lo, hi)?;
            let scores = tape.matmul_bt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            let attn = tape.softmax_rows(scores, mask.clone())?;
            heads.push(tape.matmul(attn, vh)?);
        }
        let cat = tape.concat_cols(&heads)?;
        linear(tape, b, &format!("attn.{lvl}.o"), cat)
    }

    /// Per-row mask of the `cap` entities nearest to each unrefined image.
    fn attention_mask(&self, tape: &Tape, z_point: Var, ents: Var, cap: usize) -> Array2<bool> {
        let zp = tape.value(z_point);
        let hp = tape.value(ents);
        let (bsz, n) = (zp.nrows(), hp.nrows());
        let mut mask = Array2::from_elem((bsz, n), false);
        for i in 0..bsz {
            let zi = zp.row(i);
            let mut order: Vec<(f64, usize)> = (0..n)
                .map(|j| {
                    let hj = hp.row(j);
                    let score = if self.hyperbolic() {
                        minkowski_dot(zi.as_slice().expect("row"), hj.as_slice().expect("row"))
                    } else {
                        -(&zi - &hj).mapv(|x| x * x).sum()
                    };
                    (-score, j)
                })
                .collect();
            order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            for &(_, j) in order.iter().take(cap) {
                mask[[i, j]] = true;
            }
        }
        mask
    }

    /// `z* = z + MLP_fuse([ctx_country | ctx_region | ctx_subregion | ctx_city])`, mapped to a point.
    pub fn refine(&self, tape: &mut Tape, b: &Bound, z: Var, ents: &EntityPass) -> Result<Var> {
        let z_point = self.cfg.attention_cap.map(|_| self.to_point(tape, z));
        let mut ctx = Vec::with_capacity(4);
        for l in Level::ALL {
            let mask = match (self.cfg.attention_cap, z_point) {
                (Some(cap), Some(zp)) if cap < tape.shape(ents.keys[l.index()]).0 => {
                    Some(self.attention_mask(tape, zp, ents.points[l.index()], cap))
                }
                _ => None,
            };
            ctx.push(self.multihead_attention(tape, b, l, z, ents.keys[l.index()], mask)?);
        }
        let cat = tape.concat_cols(&ctx)?;
        let h = linear(tape, b, "fuse.l1", cat)?;
        let h = tape.gelu(h);
        let fused = linear(tape, b, "fuse.l2", h)?;
        let zs = tape.add(z, fused)?;
        Ok(self.to_point(tape, zs))
    }

    /// Realizes tau, lambda and sigma for `level` as positive `1x1` nodes.
    pub fn loss_scalars(&self, tape: &mut Tape, b: &Bound, level: Level) -> Result<LossScalars> {
        let col = if self.loss_cfg.per_level_scalars { level.index() } else { 0 };
        let mut get = |name: &str| -> Result<Var> {
            let raw = b.var(name)?;
            let c = tape.slice_cols(raw, col, col + 1)?;
            Ok(tape.softplus(c))
        };
        let tau = get("loss.tau")?;
        let sigma = get("loss.sigma")?;
        let lambda = if self.params.get("loss.lambda").is_some() {
            Some(get("loss.lambda")?)
        } else {
            None
        };
        Ok(LossScalars { tau, lambda, sigma })
    }

    /// Pairwise distances `B x N` between refined images and entity points:
    /// `arcosh(-<z, h>_L / K)`, or Euclidean norms in the ablation. Squared when configured.
    pub fn distances(&self, tape: &mut Tape, z: Var, h: Var) -> Result<Var> {
        let squared = self.loss_cfg.squared_distance;
        if self.hyperbolic() {
            let gram = tape.lorentz_gram(z, h)?;
            let u = tape.scale(gram, -1.0 / self.cfg.curvature);
            let d = tape.arcosh_clamped(u);
            Ok(if squared { tape.square(d) } else { d })
        } else {
            let d2 = tape.sq_euclid_dist(z, h)?;
            Ok(if squared { d2 } else { tape.sqrt(d2) })
        }
    }

    /// Entity points and attention keys per level at evaluation (no dropout).
    pub fn entity_state(&self) -> Result<EntityState> {
        let mut tape = Tape::new();
        let b = self.params.bind(&mut tape, false);
        let ents = self.embed_entities(&mut tape, &b, &mut None)?;
        Ok(EntityState {
            points: ents.points.map(|v| tape.value(v).clone()),
            keys: ents.keys.map(|v| tape.value(v).clone()),
        })
    }

    /// Refined image points at evaluation, processed in chunks of `chunk` rows.
    pub fn refine_images(&self, state: &EntityState, feats: &Array2<f64>, chunk: usize) -> Result<Array2<f64>> {
        let chunk = chunk.max(1);
        let width = if self.hyperbolic() { self.cfg.d + 1 } else { self.cfg.d };
        let mut out = Array2::zeros((feats.nrows(), width));
        let mut start = 0;
        while start < feats.nrows() {
            let end = (start + chunk).min(feats.nrows());
            let mut tape = Tape::new();
            let b = self.params.bind(&mut tape, false);
            let ents = state.bind(&mut tape);
            let z = self.embed_images(&mut tape, &b, feats.slice(s![start..end, ..]).to_owned(), &mut None)?;
            let zs = self.refine(&mut tape, &b, z, &ents)?;
            out.slice_mut(s![start..end, ..]).assign(tape.value(zs));
            start = end;
        }
        Ok(out)
    }
}

/// Evaluated entity points and keys, reusable across image batches.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityState {
    pub points: [Array2<f64>; 4],
    pub keys: [Array2<f64>; 4],
}

impl EntityState {
    pub fn bind(&self, tape: &mut Tape) -> EntityPass {
        let points = std::array::from_fn(|l| tape.constant(self.points[l].clone()));
        let keys = std::array::from_fn(|l| tape.constant(self.keys[l].clone()));
        EntityPass { points, keys }
    }
}

#[cfg(test)]
mod tests;
