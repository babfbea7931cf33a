//! Per-level flat inner-product indices over entity points, parent-filtered
//! beam search, and evaluation metrics.
//!
//! For Lorentz points a query `z` is flipped to `(-z0, z_s)`; its plain dot
//! product with a stored point `h` is then `<z, h>_L`, and since
//! `d(z, h) = arcosh(-<z, h>_L / K)` is decreasing in that product, ranking by
//! descending dot product is ranking by ascending geodesic distance.

mod beam;
mod metrics;
mod snapshot;

use std::cmp::Ordering;

use ndarray::Array2;

pub use beam::{beam_search, BeamResult, PredictionPath};
pub use metrics::{evaluate, MetricsReport, RECALL_THRESHOLDS_KM};
pub use snapshot::{indices_from_bytes, indices_to_bytes, load_indices, save_indices, INDEX_MAGIC, INDEX_VERSION};

use crate::error::{Error, Result};
use crate::geodesy::GeoCoord;
use crate::hierarchy::Level;
use crate::manifold::{arcosh_clamped, Curvature};

/// Relative hyperboloid residual accepted for stored points.
pub const POINT_TOL: f64 = 1e-8;

/// Distance used by an index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Lorentz(Curvature),
    /// Euclidean ablation: points are plain vectors in `R^d`.
    Euclidean,
}

/// `(-z0, z_1, ..., z_d)`.
pub fn flip_query(z: &[f64]) -> Vec<f64> {
    let mut out = z.to_vec();
    if let Some(t) = out.first_mut() {
        *t = -*t;
    }
    out
}

/// Sequential dot product, summed in index order.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = a[0] * b[0];
    for i in 1..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// One ranked candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    /// Flipped inner product (Lorentz) or negated squared distance (Euclidean); larger is closer.
    pub score: f64,
}

/// Immutable index of one hierarchy level.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelIndex {
    level: Level,
    metric: Metric,
    points: Array2<f64>,
    ids: Vec<String>,
    parents: Vec<Option<usize>>,
    coords: Vec<GeoCoord>,
    children: Vec<Vec<usize>>,
}

impl LevelIndex {
    /// Validates points (hyperboloid constraint for Lorentz indices) and
    /// parent links against `n_parents` entities one level up.
    pub fn new(
        level: Level,
        metric: Metric,
        points: Array2<f64>,
        ids: Vec<String>,
        parents: Vec<Option<usize>>,
        coords: Vec<GeoCoord>,
        n_parents: usize,
    ) -> Result<Self> {
        let n = points.nrows();
        if ids.len() != n || parents.len() != n || coords.len() != n {
            return Err(Error::contract(format!(
                "index columns disagree: {n} points, {} ids, {} parents, {} coords",
                ids.len(),
                parents.len(),
                coords.len()
            )));
        }
        if points.ncols() < if matches!(metric, Metric::Lorentz(_)) { 2 } else { 1 } {
            return Err(Error::contract("index points have too few columns"));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("index points".into()));
        }
        if let Metric::Lorentz(c) = metric {
            for (i, row) in points.rows().into_iter().enumerate() {
                let r = row.as_slice().expect("standard layout");
                let res = (-dot(&flip_query(r), r) - c.k()).abs();
                let scale = c.k().max(r[0] * r[0]);
                if res / scale > POINT_TOL || r[0] <= 0.0 {
                    return Err(Error::OffManifold(format!("entity {} of the {} index", ids[i], level.name())));
                }
            }
        }
        let mut children = vec![Vec::new(); n_parents];
        for (i, p) in parents.iter().enumerate() {
            match (level, p) {
                (Level::Country, None) => {}
                (Level::Country, Some(_)) => return Err(Error::contract("countries have no parent")),
                (_, Some(p)) if *p < n_parents => children[*p].push(i),
                _ => {
                    return Err(Error::contract(format!(
                        "entity {} has no valid parent in the level above",
                        ids[i]
                    )))
                }
            }
        }
        let points = points.as_standard_layout().to_owned();
        Ok(Self {
            level,
            metric,
            points,
            ids,
            parents,
            coords,
            children,
        })
    }

    pub fn level(&self) -> Level {
        self.level
    }

    pub fn metric(&self) -> Metric {
        self.metric
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn parents(&self) -> &[Option<usize>] {
        &self.parents
    }

    pub fn coords(&self) -> &[GeoCoord] {
        &self.coords
    }

    pub fn points(&self) -> &Array2<f64> {
        &self.points
    }

    pub fn point(&self, i: usize) -> &[f64] {
        self.points.row(i).to_slice().expect("standard layout")
    }

    /// Children of entity `parent` of the level above.
    pub fn children_of(&self, parent: usize) -> &[usize] {
        self.children.get(parent).map_or(&[], Vec::as_slice)
    }

    fn check_query(&self, q: &[f64]) -> Result<()> {
        if q.len() != self.points.ncols() {
            return Err(Error::Shape {
                name: format!("{} index query", self.level.name()),
                expected: vec![self.points.ncols()],
                found: vec![q.len()],
            });
        }
        Ok(())
    }

    fn score_prepared(&self, prepared: &[f64], i: usize) -> f64 {
        let h = self.point(i);
        match self.metric {
            Metric::Lorentz(_) => dot(prepared, h),
            Metric::Euclidean => {
                let mut acc = 0.0;
                for (a, b) in prepared.iter().zip(h) {
                    acc += (a - b) * (a - b);
                }
                -acc
            }
        }
    }

    fn prepare(&self, q: &[f64]) -> Vec<f64> {
        match self.metric {
            Metric::Lorentz(_) => flip_query(q),
            Metric::Euclidean => q.to_vec(),
        }
    }

    /// Index score of `query` against entity `i`; larger is closer.
    pub fn score(&self, query: &[f64], i: usize) -> Result<f64> {
        self.check_query(query)?;
        Ok(self.score_prepared(&self.prepare(query), i))
    }

    /// Distance implied by a score: `arcosh(max(1, -s/K))` or `sqrt(-s)`.
    pub fn score_to_distance(&self, score: f64) -> f64 {
        match self.metric {
            Metric::Lorentz(c) => arcosh_clamped(-score / c.k()),
            Metric::Euclidean => (-score).max(0.0).sqrt(),
        }
    }

    /// Exact distance between `query` and entity `i`.
    pub fn distance(&self, query: &[f64], i: usize) -> Result<f64> {
        Ok(self.score_to_distance(self.score(query, i)?))
    }

    /// Top `k` entities by descending score, ties by id ascending. With a
    /// filter, only children of the listed parent indices are eligible.
    pub fn topk(&self, query: &[f64], k: usize, parent_filter: Option<&[usize]>) -> Result<Vec<Hit>> {
        if k == 0 {
            return Err(Error::contract("topk needs k >= 1"));
        }
        self.check_query(query)?;
        let prepared = self.prepare(query);
        let candidates: Vec<usize> = match parent_filter {
            None => (0..self.len()).collect(),
            Some(ps) => {
                let mut c: Vec<usize> = ps.iter().flat_map(|&p| self.children_of(p).iter().copied()).collect();
                c.sort_unstable();
                c.dedup();
                c
            }
        };
        let mut hits: Vec<Hit> = candidates
            .into_iter()
            .map(|i| Hit {
                index: i,
                id: self.ids[i].clone(),
                score: self.score_prepared(&prepared, i),
            })
            .collect();
        hits.sort_by(|a, b| rank_order(a.score, &a.id, b.score, &b.id));
        hits.truncate(k);
        Ok(hits)
    }
}

fn rank_order(sa: f64, ida: &str, sb: f64, idb: &str) -> Ordering {
    sb.total_cmp(&sa).then_with(|| ida.cmp(idb))
}

/// Builds the four level indices from entity points and hierarchy links.
pub fn build_indices(
    metric: Metric,
    points: &[Array2<f64>; 4],
    ids: &[Vec<String>; 4],
    parents: &[Vec<Option<usize>>; 4],
    coords: &[Vec<GeoCoord>; 4],
) -> Result<[LevelIndex; 4]> {
    let mut out = Vec::with_capacity(4);
    for l in Level::ALL {
        let li = l.index();
        let n_parents = if li == 0 { 0 } else { ids[li - 1].len() };
        out.push(LevelIndex::new(
            l,
            metric,
            points[li].clone(),
            ids[li].clone(),
            parents[li].clone(),
            coords[li].clone(),
            n_parents,
        )?);
    }
    Ok(out.try_into().expect("four levels"))
}

#[cfg(test)]
mod tests;
