//! Labeled image samples resolved against a hierarchy.

use std::path::Path;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::geodesy::GeoCoord;
use crate::hierarchy::{read_csv_records, resolve_path, FlatHierarchy, GeocoderClient, HierarchyConfig, RawRecord};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub features: Vec<f64>,
    pub coord: GeoCoord,
    /// Ground-truth entity ids for country, region, subregion and city.
    pub ids: [String; 4],
    /// Row of each id in its hierarchy level; `None` when some level is
    /// absent from the hierarchy (the sample is then eval-only).
    pub targets: Option<[usize; 4]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub d_img: usize,
    /// Records dropped because their path could not be resolved.
    pub skipped: u64,
}

impl Dataset {
    /// Resolves each record exactly as the hierarchy builder does. Every
    /// record must carry an image feature of one common dimension.
    pub fn from_records<I>(
        records: I,
        cfg: &HierarchyConfig,
        geocoder: Option<&dyn GeocoderClient>,
        flat: &FlatHierarchy,
    ) -> Result<Self>
    where
        I: IntoIterator<Item = RawRecord>,
    {
        let maps = flat.id_maps();
        let mut samples = Vec::new();
        let mut skipped = 0;
        let mut d_img = None;
        for (row, rec) in records.into_iter().enumerate() {
            let Ok(path) = resolve_path(&rec.labels, rec.lat, rec.lon, cfg.dataset, geocoder) else {
                skipped += 1;
                continue;
            };
            let features = rec
                .image_feature
                .ok_or_else(|| Error::MissingField(format!("image feature of row {row}")))?;
            match d_img {
                None => d_img = Some(features.len()),
                Some(d) if d != features.len() => {
                    return Err(Error::Shape {
                        name: format!("image feature of row {row}"),
                        expected: vec![d],
                        found: vec![features.len()],
                    })
                }
                _ => {}
            }
            let ids = path.ids();
            let found: Vec<Option<usize>> = (0..4).map(|l| maps[l].get(&ids[l]).copied()).collect();
            let targets = if found.iter().all(Option::is_some) {
                Some(std::array::from_fn(|l| found[l].expect("checked")))
            } else {
                None
            };
            samples.push(Sample {
                features,
                coord: GeoCoord::new(rec.lat, rec.lon)?,
                ids,
                targets,
            });
        }
        let d_img = d_img.ok_or_else(|| Error::contract("dataset has no usable records"))?;
        Ok(Self {
            samples,
            d_img,
            skipped,
        })
    }

    /// Reads a metadata CSV with features inline or from a sidecar file.
    pub fn load_csv(csv: &Path, features: Option<&Path>, cfg: &HierarchyConfig, flat: &FlatHierarchy) -> Result<Self> {
        let sidecar = features.map(FeatureMatrix::load).transpose()?;
        let mut records = Vec::new();
        read_csv_records(csv, cfg, sidecar.as_ref(), |r| {
            records.push(r);
            Ok(())
        })?;
        Self::from_records(records, cfg, None, flat)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Indices of samples whose full path exists in the hierarchy.
    pub fn trainable(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.samples[i].targets.is_some()).collect()
    }

    /// Feature rows for `rows`, in order.
    pub fn features(&self, rows: &[usize]) -> Array2<f64> {
        let mut out = Array2::zeros((rows.len(), self.d_img));
        for (o, &r) in rows.iter().enumerate() {
            for (j, x) in self.samples[r].features.iter().enumerate() {
                out[[o, j]] = *x;
            }
        }
        out
    }

    pub fn all_features(&self) -> Array2<f64> {
        self.features(&(0..self.len()).collect::<Vec<_>>())
    }

    pub fn truth(&self) -> Vec<([String; 4], GeoCoord)> {
        self.samples.iter().map(|s| (s.ids.clone(), s.coord)).collect()
    }
}
