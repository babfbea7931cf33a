//! Metrics from a predictions CSV joined to a ground-truth CSV by image id.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, Context, Result};
use hierloc::geodesy::GeoCoord;
use hierloc::index::{evaluate, MetricsReport, PredictionPath};
use serde::Deserialize;

#[derive(Debug, Deserialize)]
struct Row {
    image_id: String,
    country_id: String,
    region_id: String,
    subregion_id: String,
    city_id: String,
    lat: f64,
    lon: f64,
}

fn read_rows(path: &Path) -> Result<Vec<Row>> {
    let mut rdr = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for r in rdr.deserialize() {
        let row: Row = r.map_err(|e| hierloc::Error::MissingField(format!("{}: {e}", path.display())))?;
        out.push(row);
    }
    Ok(out)
}

fn coord(r: &Row) -> Result<GeoCoord> {
    Ok(GeoCoord::new(r.lat, r.lon)?)
}

pub fn evaluate_files(predictions: &Path, truth: &Path) -> Result<MetricsReport> {
    let truth_rows = read_rows(truth)?;
    let by_id: HashMap<&str, &Row> = truth_rows.iter().map(|r| (r.image_id.as_str(), r)).collect();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    for p in read_rows(predictions)? {
        let t = by_id
            .get(p.image_id.as_str())
            .ok_or_else(|| anyhow!("image {} has no ground truth in {}", p.image_id, truth.display()))?;
        let gt_coord = coord(t)?;
        gts.push(([t.country_id.clone(), t.region_id.clone(), t.subregion_id.clone(), t.city_id.clone()], gt_coord));
        preds.push(PredictionPath {
            indices: [0; 4],
            coord: coord(&p)?,
            ids: [p.country_id, p.region_id, p.subregion_id, p.city_id],
            distances: [0.0; 4],
            score: 0.0,
        });
    }
    Ok(evaluate(&preds, &gts)?)
}
