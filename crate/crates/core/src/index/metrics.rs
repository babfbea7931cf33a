use serde::{Deserialize, Serialize};

use super::PredictionPath;
use crate::error::{Error, Result};
use crate::geodesy::{geoscore, haversine_km, GeoCoord};

/// Distance thresholds for the recall metrics, in kilometers.
pub const RECALL_THRESHOLDS_KM: [f64; 5] = [1.0, 25.0, 200.0, 750.0, 2500.0];

/// Aggregate geolocation metrics over a set of predictions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    pub acc_country: f64,
    pub acc_region: f64,
    pub acc_subregion: f64,
    pub acc_city: f64,
    pub mean_error_km: f64,
    pub median_error_km: f64,
    pub geoscore: f64,
    pub recall_1km: f64,
    pub recall_25km: f64,
    pub recall_200km: f64,
    pub recall_750km: f64,
    pub recall_2500km: f64,
}

impl MetricsReport {
    pub fn accuracies(&self) -> [f64; 4] {
        [self.acc_country, self.acc_region, self.acc_subregion, self.acc_city]
    }

    pub fn recalls(&self) -> [f64; 5] {
        [
            self.recall_1km,
            self.recall_25km,
            self.recall_200km,
            self.recall_750km,
            self.recall_2500km,
        ]
    }
}

/// Scores predictions against ground-truth id paths and coordinates.
/// Recall thresholds are inclusive.
pub fn evaluate(predictions: &[PredictionPath], truth: &[([String; 4], GeoCoord)]) -> Result<MetricsReport> {
    if predictions.len() != truth.len() {
        return Err(Error::contract(format!(
            "{} predictions for {} ground-truth rows",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::contract("cannot evaluate an empty prediction set"));
    }
    let n = predictions.len();
    let nf = n as f64;
    let mut hits = [0usize; 4];
    let mut errors = Vec::with_capacity(n);
    for (p, (ids, coord)) in predictions.iter().zip(truth) {
        for l in 0..4 {
            if p.ids[l] == ids[l] {
                hits[l] += 1;
            }
        }
        errors.push(haversine_km(&p.coord, coord));
    }
    let mean = errors.iter().sum::<f64>() / nf;
    let geo = errors.iter().map(|&e| geoscore(e)).sum::<f64>() / nf;
    let recall = |t: f64| errors.iter().filter(|&&e| e <= t).count() as f64 / nf;
    let mut sorted = errors.clone();
    sorted.sort_by(f64::total_cmp);
    let median = if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    };
    let acc = |l: usize| hits[l] as f64 / nf;
    Ok(MetricsReport {
        n,
        acc_country: acc(0),
        acc_region: acc(1),
        acc_subregion: acc(2),
        acc_city: acc(3),
        mean_error_km: mean,
        median_error_km: median,
        geoscore: geo,
        recall_1km: recall(RECALL_THRESHOLDS_KM[0]),
        recall_25km: recall(RECALL_THRESHOLDS_KM[1]),
        recall_200km: recall(RECALL_THRESHOLDS_KM[2]),
        recall_750km: recall(RECALL_THRESHOLDS_KM[3]),
        recall_2500km: recall(RECALL_THRESHOLDS_KM[4]),
    })
}
