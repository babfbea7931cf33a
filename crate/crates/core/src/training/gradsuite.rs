//! Finite-difference gradient suite on a two-country toy world.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::data::Dataset;
use super::trainer::check_pipeline_gradients;
use crate::config::{AnchorMode, LossConfig, ManifoldKind, ModelConfig};
use crate::error::Result;
use crate::features::{generate_world, HashTextEncoder, Split, SyntheticWorldSpec};
use crate::geodesy::KernelKind;
use crate::hierarchy::{build_hierarchy, HierarchyConfig};
use crate::model::{EntityTable, HierLocModel};
use crate::tape::gradcheck::{primitive_suite, GradCheckReport, Tolerance};

/// Two countries, one region each, two subregions of two cities.
pub fn toy_world_spec() -> SyntheticWorldSpec {
    SyntheticWorldSpec {
        n_countries: 2,
        regions_per_country: 1,
        subregions_per_region: 2,
        cities_per_subregion: 2,
        images_per_city: 10,
        visual_noise: 0.05,
        d_img: 8,
        seed: 3,
        ..Default::default()
    }
}

/// Smallest model shape that still exercises every block.
pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        d: 4,
        heads: 2,
        hidden_ent: 3,
        hidden_img: 3,
        hidden_fuse: 3,
        d_text: 4,
        loc_scales: 1,
        ..Default::default()
    }
}

/// Training split and entity table of [`toy_world_spec`] under `model`.
pub fn toy_world(model: &ModelConfig) -> Result<(Dataset, EntityTable)> {
    let spec = toy_world_spec();
    let world = generate_world(&spec)?;
    let text = HashTextEncoder::new(model.d_text, 0);
    let hc = HierarchyConfig::default();
    let h = build_hierarchy(world.records(Split::Train), hc.clone(), None, Some(&text))?;
    let flat = h.flatten();
    let train = Dataset::from_records(world.records(Split::Train), &hc, None, &flat)?;
    let entities = EntityTable::from_flat(&flat, model, spec.d_img)?;
    Ok((train, entities))
}

/// Pipeline check of one model/loss variant. The last fusion layer is
/// randomized so that no gradient path starts at exactly zero.
pub fn pipeline_case(model: ModelConfig, loss: LossConfig, seed: u64) -> Result<GradCheckReport> {
    let (train, entities) = toy_world(&model)?;
    let d_img = train.d_img;
    let mut m = HierLocModel::new(model, loss, entities, d_img, seed.wrapping_add(2))?;
    let mut r = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    m.params.value_mut("fuse.l2.w")?.mapv_inplace(|_| r.random_range(-0.5..0.5));
    check_pipeline_gradients(&m, &train, &[0, 9, 33], &Tolerance::PIPELINE)
}

/// Every primitive, then the full loss pipeline under each anchor mode,
/// the Euclidean ablation and the non-default kernels.
pub fn gradient_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out: Vec<(String, GradCheckReport)> = primitive_suite(seed)?
        .into_iter()
        .map(|(n, r)| (format!("primitive/{n}"), r))
        .collect();
    let base = toy_model_config();
    let tangent = ModelConfig {
        anchor_mode: AnchorMode::Tangent,
        ..base.clone()
    };
    let euclid = ModelConfig {
        manifold: ManifoldKind::Euclidean,
        ..tangent.clone()
    };
    let gauss = LossConfig {
        kernel: KernelKind::Gauss,
        squared_distance: false,
        ..Default::default()
    };
    let inverse = LossConfig {
        kernel: KernelKind::Inverse,
        kernel_p: 2.0,
        ..Default::default()
    };
    let cases = [
        ("pipeline/riemannian", base.clone(), LossConfig::default()),
        ("pipeline/tangent", tangent, LossConfig::default()),
        ("pipeline/euclidean", euclid, LossConfig::default()),
        ("pipeline/gauss-unsquared", base.clone(), gauss),
        ("pipeline/inverse", base, inverse),
    ];
    for (name, m, l) in cases {
        out.push((name.to_string(), pipeline_case(m, l, seed)?));
    }
    Ok(out)
}
