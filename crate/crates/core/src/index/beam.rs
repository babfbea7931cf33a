use std::cmp::Ordering;
use std::collections::HashMap;

use super::LevelIndex;
use crate::error::{Error, Result};
use crate::geodesy::GeoCoord;
use crate::hierarchy::Level;

/// A complete country-to-city path with its per-level distances.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionPath {
    pub indices: [usize; 4],
    pub ids: [String; 4],
    pub distances: [f64; 4],
    /// Sum of `distances`, accumulated country first.
    pub score: f64,
    /// Coordinate of the predicted city.
    pub coord: GeoCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeamResult {
    pub best: PredictionPath,
    /// Surviving complete paths, best first.
    pub beam: Vec<PredictionPath>,
}

#[derive(Debug, Clone)]
struct Partial {
    indices: Vec<usize>,
    ids: Vec<String>,
    distances: Vec<f64>,
    score: f64,
}

fn path_order(a: &Partial, b: &Partial) -> Ordering {
    a.score.total_cmp(&b.score).then_with(|| a.ids.cmp(&b.ids))
}

/// Parent-filtered beam search over the four level indices. Keeps the
/// `width` best partial paths per level, ranked by summed exact distance
/// with ties broken by the lexicographic order of the id path.
pub fn beam_search(indices: &[LevelIndex; 4], query: &[f64], width: usize) -> Result<BeamResult> {
    if width == 0 {
        return Err(Error::contract("beam width must be at least 1"));
    }
    for (l, idx) in Level::ALL.iter().zip(indices) {
        if idx.level() != *l {
            return Err(Error::contract("indices must be ordered country, region, subregion, city"));
        }
        if idx.metric() != indices[0].metric() {
            return Err(Error::contract("indices use different metrics"));
        }
    }
    let countries = &indices[0];
    if countries.is_empty() {
        return Err(Error::contract("country index is empty"));
    }
    let mut beam: Vec<Partial> = countries
        .topk(query, countries.len(), None)?
        .into_iter()
        .map(|h| {
            let d = countries.score_to_distance(h.score);
            Partial {
                indices: vec![h.index],
                ids: vec![h.id],
                distances: vec![d],
                score: d,
            }
        })
        .collect();
    beam.sort_by(path_order);
    beam.truncate(width);

    for idx in &indices[1..] {
        let parents: Vec<usize> = beam.iter().map(|p| *p.indices.last().expect("non-empty path")).collect();
        let n_children: usize = parents.iter().map(|&p| idx.children_of(p).len()).sum();
        if n_children == 0 {
            return Err(Error::contract(format!(
                "every beam path was pruned at the {} level",
                idx.level().name()
            )));
        }
        let dist: HashMap<usize, f64> = idx
            .topk(query, n_children, Some(&parents))?
            .into_iter()
            .map(|h| (h.index, idx.score_to_distance(h.score)))
            .collect();
        let mut next = Vec::with_capacity(n_children);
        for p in &beam {
            for &c in idx.children_of(*p.indices.last().expect("non-empty path")) {
                let d = dist[&c];
                let mut q = p.clone();
                q.indices.push(c);
                q.ids.push(idx.ids()[c].clone());
                q.distances.push(d);
                q.score += d;
                next.push(q);
            }
        }
        next.sort_by(path_order);
        next.truncate(width);
        beam = next;
    }

    let cities = &indices[3];
    let beam: Vec<PredictionPath> = beam
        .into_iter()
        .map(|p| PredictionPath {
            indices: p.indices.clone().try_into().expect("four levels"),
            coord: cities.coords()[p.indices[3]],
            ids: p.ids.try_into().expect("four levels"),
            distances: p.distances.try_into().expect("four levels"),
            score: p.score,
        })
        .collect();
    Ok(BeamResult {
        best: beam[0].clone(),
        beam,
    })
}
