use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::geodesy::haversine_km;
use crate::manifold::{geodesic_distance, project_to_hyperboloid, LorentzPoint};

fn c() -> Curvature {
    Curvature::new(0.8).unwrap()
}

fn random_points(n: usize, d: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut m = Array2::zeros((n, d + 1));
    for i in 0..n {
        let s: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
        let p = project_to_hyperboloid(&s, c());
        m.row_mut(i).assign(&ndarray::ArrayView1::from(p.coords()));
    }
    m
}

/// Random hierarchy with `fanout` children per node (1..=max_children when `fanout` is 0).
fn random_tree(seed: u64, d: usize, max_children: usize) -> [LevelIndex; 4] {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ids: [Vec<String>; 4] = Default::default();
    let mut parents: [Vec<Option<usize>>; 4] = Default::default();
    let n0 = rng.random_range(1..=max_children + 1);
    for i in 0..n0 {
        ids[0].push(format!("c{i}"));
        parents[0].push(None);
    }
    for l in 1..4 {
        for p in 0..ids[l - 1].len() {
            let k = rng.random_range(1..=max_children);
            for j in 0..k {
                let id = format!("{}:{j}", ids[l - 1][p]);
                ids[l].push(id);
                parents[l].push(Some(p));
            }
        }
    }
    let points: [Array2<f64>; 4] = std::array::from_fn(|l| random_points(ids[l].len(), d, &mut rng));
    let coords: [Vec<GeoCoord>; 4] = std::array::from_fn(|l| {
        (0..ids[l].len())
            .map(|_| GeoCoord::new(rng.random_range(-60.0..60.0), rng.random_range(-170.0..170.0)).unwrap())
            .collect()
    });
    build_indices(Metric::Lorentz(c()), &points, &ids, &parents, &coords).unwrap()
}

fn exhaustive(indices: &[LevelIndex; 4], q: &[f64]) -> (f64, Vec<String>) {
    let mut best: Option<(f64, Vec<String>)> = None;
    for city in 0..indices[3].len() {
        let mut chain = [0usize; 4];
        chain[3] = city;
        for l in (0..3).rev() {
            chain[l] = indices[l + 1].parents()[chain[l + 1]].unwrap();
        }
        let mut s = 0.0;
        for l in 0..4 {
            s += indices[l].distance(q, chain[l]).unwrap();
        }
        let path: Vec<String> = (0..4).map(|l| indices[l].ids()[chain[l]].clone()).collect();
        let better = match &best {
            None => true,
            Some((bs, bp)) => s < *bs || (s == *bs && path < *bp),
        };
        if better {
            best = Some((s, path));
        }
    }
    best.unwrap()
}

fn query(d: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    random_points(1, d, rng).row(0).to_vec()
}

#[test]
fn flipped_score_matches_lorentz_distance_ranking() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let pts = random_points(200, 6, &mut rng);
    let n = pts.nrows();
    let idx = LevelIndex::new(
        Level::Country,
        Metric::Lorentz(c()),
        pts.clone(),
        (0..n).map(|i| format!("e{i:03}")).collect(),
        vec![None; n],
        vec![GeoCoord::new(0.0, 0.0).unwrap(); n],
        0,
    )
    .unwrap();
    for _ in 0..10 {
        let q = query(6, &mut rng);
        let qp = LorentzPoint::new(q.clone(), c()).unwrap();
        let mut brute: Vec<(f64, String)> = (0..n)
            .map(|i| {
                let h = LorentzPoint::new(pts.row(i).to_vec(), c()).unwrap();
                (geodesic_distance(&qp, &h).unwrap(), format!("e{i:03}"))
            })
            .collect();
        brute.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
        let hits = idx.topk(&q, 20, None).unwrap();
        let got: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
        let want: Vec<&str> = brute[..20].iter().map(|b| b.1.as_str()).collect();
        assert_eq!(got, want);
        for h in &hits {
            let want = brute.iter().find(|b| b.1 == h.id).unwrap().0;
            assert!((idx.score_to_distance(h.score) - want).abs() < 1e-12);
        }
    }
}

#[test]
fn ties_break_by_id() {
    let p = project_to_hyperboloid(&[0.3, -0.1], c());
    let mut pts = Array2::zeros((3, 3));
    for i in 0..3 {
        pts.row_mut(i).assign(&ndarray::ArrayView1::from(p.coords()));
    }
    let idx = LevelIndex::new(
        Level::Country,
        Metric::Lorentz(c()),
        pts,
        vec!["b".into(), "c".into(), "a".into()],
        vec![None; 3],
        vec![GeoCoord::new(0.0, 0.0).unwrap(); 3],
        0,
    )
    .unwrap();
    let ids: Vec<String> = idx.topk(p.coords(), 3, None).unwrap().into_iter().map(|h| h.id).collect();
    assert_eq!(ids, ["a", "b", "c"]);
}

#[test]
fn parent_filter_restricts_candidates() {
    let idx = random_tree(3, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let q = query(3, &mut rng);
    let hits = idx[1].topk(&q, 100, Some(&[0])).unwrap();
    assert_eq!(hits.len(), idx[1].children_of(0).len());
    assert!(hits.iter().all(|h| idx[1].parents()[h.index] == Some(0)));
    assert!(idx[1].topk(&q, 0, None).is_err());
    assert!(idx[1].topk(&q[..2], 1, None).is_err());
}

#[test]
fn rejects_off_manifold_points_and_bad_parents() {
    let bad = Array2::from_shape_vec((1, 3), vec![1.0, 1.0, 1.0]).unwrap();
    let one = vec![GeoCoord::new(0.0, 0.0).unwrap()];
    assert!(matches!(
        LevelIndex::new(Level::Country, Metric::Lorentz(c()), bad, vec!["x".into()], vec![None], one.clone(), 0),
        Err(Error::OffManifold(_))
    ));
    let ok = project_to_hyperboloid(&[0.0, 0.0], c());
    let pts = Array2::from_shape_vec((1, 3), ok.coords().to_vec()).unwrap();
    assert!(LevelIndex::new(Level::Region, Metric::Lorentz(c()), pts, vec!["x".into()], vec![Some(2)], one, 1).is_err());
}

#[test]
fn wide_beam_equals_exhaustive_search() {
    for seed in 0..30 {
        let idx = random_tree(seed, 4, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let q = query(4, &mut rng);
        let res = beam_search(&idx, &q, idx[3].len()).unwrap();
        let (s, path) = exhaustive(&idx, &q);
        assert_eq!(res.best.score, s);
        assert_eq!(res.best.ids.to_vec(), path);
        assert_eq!(res.beam.len(), idx[3].len());
        let sum: f64 = res.best.distances.iter().sum();
        assert!((sum - res.best.score).abs() < 1e-12);
        assert_eq!(res.best.coord, idx[3].coords()[res.best.indices[3]]);
    }
}

#[test]
fn beam_paths_are_consistent_and_sorted() {
    let idx = random_tree(5, 3, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = query(3, &mut rng);
    let res = beam_search(&idx, &q, 4).unwrap();
    assert!(res.beam.len() <= 4);
    for w in res.beam.windows(2) {
        assert!(w[0].score <= w[1].score);
    }
    for p in &res.beam {
        for l in 1..4 {
            assert_eq!(idx[l].parents()[p.indices[l]], Some(p.indices[l - 1]));
        }
    }
    assert!(beam_search(&idx, &q, 0).is_err());
}

#[test]
fn euclidean_index_ranks_by_squared_distance() {
    let pts = Array2::from_shape_vec((3, 2), vec![0.0, 0.0, 1.0, 0.0, 3.0, 0.0]).unwrap();
    let idx = LevelIndex::new(
        Level::Country,
        Metric::Euclidean,
        pts,
        vec!["a".into(), "b".into(), "c".into()],
        vec![None; 3],
        vec![GeoCoord::new(0.0, 0.0).unwrap(); 3],
        0,
    )
    .unwrap();
    let hits = idx.topk(&[2.1, 0.0], 3, None).unwrap();
    let ids: Vec<&str> = hits.iter().map(|h| h.id.as_str()).collect();
    assert_eq!(ids, ["c", "b", "a"]);
    assert!((idx.distance(&[2.1, 0.0], 0).unwrap() - 2.1).abs() < 1e-12);
}

#[test]
fn snapshot_round_trip() {
    let idx = random_tree(8, 3, 2);
    let bytes = indices_to_bytes(&idx);
    assert_eq!(&bytes[..4], INDEX_MAGIC);
    let back = indices_from_bytes(&bytes).unwrap();
    assert_eq!(back, idx);
    assert!(indices_from_bytes(&bytes[..bytes.len() - 3]).is_err());
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(indices_from_bytes(&extra).is_err());
}

fn path_at(id: &str, coord: GeoCoord) -> PredictionPath {
    PredictionPath {
        indices: [0; 4],
        ids: ["a".into(), "a:1".into(), "a:1:1".into(), id.into()],
        distances: [0.0; 4],
        score: 0.0,
        coord,
    }
}

#[test]
fn metrics_oracle() {
    let g = |lat, lon| GeoCoord::new(lat, lon).unwrap();
    let preds = vec![path_at("a:1:1:1", g(0.0, 0.0)), path_at("a:1:1:2", g(0.0, 1.0))];
    let truth = vec![
        (["a".into(), "a:1".into(), "a:1:1".into(), "a:1:1:1".into()], g(0.0, 0.0)),
        (["a".into(), "a:2".into(), "a:2:1".into(), "a:2:1:1".into()], g(0.0, 0.0)),
    ];
    let m = evaluate(&preds, &truth).unwrap();
    let one_deg = haversine_km(&g(0.0, 0.0), &g(0.0, 1.0));
    assert_eq!(m.n, 2);
    assert_eq!(m.accuracies(), [1.0, 0.5, 0.5, 0.5]);
    assert!((m.mean_error_km - one_deg / 2.0).abs() < 1e-9);
    assert!((m.median_error_km - one_deg / 2.0).abs() < 1e-9);
    assert_eq!(m.recalls(), [0.5, 0.5, 1.0, 1.0, 1.0]);
    let gs = (5000.0 + 5000.0 * (-one_deg / 1492.7f64).exp()) / 2.0;
    assert!((m.geoscore - gs).abs() < 1e-6);
    assert!(evaluate(&preds[..1], &truth).is_err());
    assert!(evaluate(&[], &[]).is_err());
}

#[test]
fn recall_threshold_is_inclusive() {
    let g = |lat, lon| GeoCoord::new(lat, lon).unwrap();
    let p = g(10.0, 10.0);
    let truth = [(["b".into(), "b:1".into(), "b:1:1".into(), "b:1:1:1".into()], p)];
    let m = evaluate(&[path_at("x", p)], &truth).unwrap();
    assert_eq!(m.mean_error_km, 0.0);
    assert_eq!(m.recalls(), [1.0; 5]);
    assert_eq!(m.accuracies(), [0.0; 4]);
    assert_eq!(m.geoscore, 5000.0);
}

