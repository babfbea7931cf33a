use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::config::{LossConfig, ModelConfig};
use crate::tape::gradcheck::{check, Tolerance};
use crate::testutil::toy_world;

fn small_cfg() -> ModelConfig {
    ModelConfig {
        d: 16,
        heads: 4,
        hidden_ent: 12,
        hidden_img: 12,
        hidden_fuse: 12,
        d_text: 4,
        loc_scales: 2,
        ..Default::default()
    }
}

fn toy_model(cfg: ModelConfig) -> HierLocModel {
    let (_, h) = toy_world(2, 2, 3, 1);
    let table = EntityTable::from_flat(&h.flatten(), &cfg, 8).unwrap();
    HierLocModel::new(cfg, LossConfig::default(), table, 8, 3).unwrap()
}

fn constraint_residual(points: &Array2<f64>, k: f64) -> f64 {
    points
        .rows()
        .into_iter()
        .map(|r| {
            let q = minkowski_dot(r.as_slice().unwrap(), r.as_slice().unwrap());
            (q + k).abs() / r[0].powi(2).max(k)
        })
        .fold(0.0, f64::max)
}

fn rand_feats(n: usize, d: usize, seed: u64) -> Array2<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| r.random_range(-1.0..1.0))
}

#[test]
fn entity_table_layout() {
    let m = toy_model(small_cfg());
    let t = &m.entities;
    assert_eq!(t.offsets, [0, 2, 6, 14, 30]);
    assert_eq!(t.features.ncols(), 8 + 8 + 4);
    for l in [Level::Region, Level::Subregion, Level::City] {
        let li = l.index();
        for (i, p) in t.parents[li].iter().enumerate() {
            let parent = &t.ids[li - 1][p.unwrap()];
            assert!(t.ids[li][i].starts_with(&format!("{parent}:")));
        }
    }
}

#[test]
fn alpha_zero_gives_anchor_points() {
    let mut m = toy_model(ModelConfig {
        anchor_mode: AnchorMode::Riemannian,
        ..small_cfg()
    });
    m.params.value_mut("ent.alpha").unwrap()[[0, 0]] = 0.0;
    let st = m.entity_state().unwrap();
    let anchors = m.params.value("anchor").unwrap();
    for l in Level::ALL {
        let rows = anchors.slice(s![m.entities.range(l), ..]);
        let diff = (&st.points[l.index()] - &rows).mapv(f64::abs);
        assert!(diff.iter().all(|x| *x < 1e-12));
    }
}

#[test]
fn zero_anchor_and_zero_delta_give_origin() {
    let mut m = toy_model(ModelConfig {
        anchor_mode: AnchorMode::Tangent,
        ..small_cfg()
    });
    m.params.value_mut("anchor").unwrap().fill(0.0);
    m.params.value_mut("ent.alpha").unwrap()[[0, 0]] = 0.0;
    let st = m.entity_state().unwrap();
    let r = m.radius();
    for p in &st.points {
        for row in p.rows() {
            assert_eq!(row[0], r);
            assert!(row.slice(s![1..]).iter().all(|x| *x == 0.0));
        }
    }
}

#[test]
fn points_on_manifold_and_deterministic() {
    let m = toy_model(small_cfg());
    let st = m.entity_state().unwrap();
    for p in &st.points {
        assert!(constraint_residual(p, 0.8) < 1e-8);
    }
    let feats = rand_feats(5, 8, 2);
    let a = m.refine_images(&st, &feats, 2).unwrap();
    let b = m.refine_images(&st, &feats, 5).unwrap();
    assert_eq!(a, b);
    assert!(constraint_residual(&a, 0.8) < 1e-8);
}

#[test]
fn image_alpha_zero_maps_to_origin() {
    let mut m = toy_model(small_cfg());
    m.params.value_mut("img.alpha").unwrap()[[0, 0]] = 0.0;
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let z = m.embed_images(&mut tape, &b, rand_feats(3, 8, 1), &mut None).unwrap();
    let p = m.to_point(&mut tape, z);
    for row in tape.value(p).rows() {
        assert_eq!(row[0], m.radius());
    }
    assert!(m.embed_images(&mut tape, &b, rand_feats(3, 7, 1), &mut None).is_err());
}

#[test]
fn zero_fuse_head_is_residual_identity() {
    let m = toy_model(small_cfg());
    let st = m.entity_state().unwrap();
    let feats = rand_feats(4, 8, 9);
    let refined = m.refine_images(&st, &feats, 4).unwrap();
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let z = m.embed_images(&mut tape, &b, feats, &mut None).unwrap();
    let p = m.to_point(&mut tape, z);
    assert_eq!(tape.value(p), &refined);
}

#[test]
fn attention_single_key_ignores_query() {
    let m = toy_model(small_cfg());
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let kv = tape.constant(rand_feats(1, 16, 4));
    let q1 = tape.constant(rand_feats(1, 16, 5));
    let q2 = tape.constant(rand_feats(1, 16, 6));
    let o1 = m.multihead_attention(&mut tape, &b, Level::City, q1, kv, None).unwrap();
    let o2 = m.multihead_attention(&mut tape, &b, Level::City, q2, kv, None).unwrap();
    let v = linear(&mut tape, &b, "attn.city.v", kv).unwrap();
    let expect = linear(&mut tape, &b, "attn.city.o", v).unwrap();
    for o in [o1, o2] {
        let diff = (tape.value(o) - tape.value(expect)).mapv(f64::abs);
        assert!(diff.iter().all(|x| *x < 1e-12));
    }
    let empty = tape.constant(Array2::zeros((0, 16)));
    assert!(m.multihead_attention(&mut tape, &b, Level::City, q1, empty, None).is_err());
}

#[test]
fn attention_identical_keys_average_values() {
    let m = toy_model(small_cfg());
    let mut tape = Tape::new();
    let b = m.params.bind(&mut tape, false);
    let one = rand_feats(1, 16, 4);
    let kv3 = tape.constant(ndarray::concatenate![ndarray::Axis(0), one, one, one]);
    let kv1 = tape.constant(one.clone());
    let q = tape.constant(rand_feats(2, 16, 5));
    let a = m.multihead_attention(&mut tape, &b, Level::Region, q, kv3, None).unwrap();
    let c = m.multihead_attention(&mut tape, &b, Level::Region, q, kv1, None).unwrap();
    let diff = (tape.value(a) - tape.value(c)).mapv(f64::abs);
    assert!(diff.iter().all(|x| *x < 1e-12));
}

#[test]
fn refinement_is_permutation_invariant() {
    let mut m = toy_model(small_cfg());
    let mut r = ChaCha8Rng::seed_from_u64(3);
    m.params
        .value_mut("fuse.l2.w")
        .unwrap()
        .mapv_inplace(|_| r.random_range(-0.3..0.3));
    let st = m.entity_state().unwrap();
    let feats = rand_feats(3, 8, 2);
    let base = m.refine_images(&st, &feats, 8).unwrap();
    let mut perm = st.clone();
    let li = Level::City.index();
    let n = perm.keys[li].nrows();
    let order: Vec<usize> = (0..n).rev().collect();
    perm.keys[li] = perm.keys[li].select(ndarray::Axis(0), &order);
    perm.points[li] = perm.points[li].select(ndarray::Axis(0), &order);
    let out = m.refine_images(&perm, &feats, 8).unwrap();
    let diff = (&out - &base).mapv(f64::abs);
    assert!(diff.iter().all(|x| *x < 1e-12));
    assert!(constraint_residual(&out, 0.8) < 1e-8);
}

#[test]
fn attention_gradient_wrt_query() {
    let m = toy_model(small_cfg());
    let kv = rand_feats(5, 16, 4);
    let q = rand_feats(2, 16, 7);
    let w = rand_feats(2, 16, 8);
    let rep = check(&[q], &Tolerance::PIPELINE, |tape, v| {
        let b = m.params.bind(tape, false);
        let kvv = tape.constant(kv.clone());
        let o = m.multihead_attention(tape, &b, Level::Country, v[0], kvv, None)?;
        let wv = tape.constant(w.clone());
        let p = tape.mul(o, wv)?;
        Ok(tape.sum(p))
    })
    .unwrap();
    assert!(rep.passed(), "{rep:?}");
}

#[test]
fn attention_cap_masks_far_entities() {
    let m = toy_model(ModelConfig {
        attention_cap: Some(1),
        ..small_cfg()
    });
    let st = m.entity_state().unwrap();
    let out = m.refine_images(&st, &rand_feats(2, 8, 1), 2).unwrap();
    assert!(constraint_residual(&out, 0.8) < 1e-8);
}

#[test]
fn euclidean_ablation_points_are_tangents() {
    let m = toy_model(ModelConfig {
        manifold: ManifoldKind::Euclidean,
        anchor_mode: AnchorMode::Tangent,
        ..small_cfg()
    });
    let st = m.entity_state().unwrap();
    assert_eq!(st.points[0].ncols(), 16);
    assert_eq!(st.points[0], st.keys[0]);
}

#[test]
fn checkpoint_round_trip_and_shape_check() {
    let m = toy_model(small_cfg());
    let mut cfg = crate::config::RunConfig::default();
    cfg.model = small_cfg();
    let ck = Checkpoint::from_model(&m, &cfg, 0);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], b"HLCK");
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let rebuilt = back.clone().into_model(m.entities.clone()).unwrap();
    assert_eq!(rebuilt.params, m.params);

    let mut bad = back.clone();
    *bad.params.value_mut("ent.l1.w").unwrap() = Array2::zeros((2, 2));
    assert!(matches!(bad.into_model(m.entities.clone()), Err(Error::Shape { .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    let mut wrong_ids = back;
    wrong_ids.meta.entity_ids[3].pop();
    assert!(wrong_ids.into_model(m.entities.clone()).is_err());
}
