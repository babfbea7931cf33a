use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::columns::resolve_usecols;
use super::country::resolve_country;
use super::labels::{first_token_or, resolve_labels, sanitize, DatasetTag, GeocoderClient, PlaceLabels};
use super::{EntityNode, Hierarchy, LEVEL_CITY, LEVEL_CONTINENT, LEVEL_COUNTRY, LEVEL_REGION, LEVEL_SUBREGION, LEVEL_WORLD};
use crate::error::{Error, Result};
use crate::features::{FeatureMatrix, TextEncoder};
use crate::geodesy::GeoCoord;

/// One metadata row. Coordinates that failed to parse are NaN.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawRecord {
    pub labels: PlaceLabels,
    pub lat: f64,
    pub lon: f64,
    pub image_feature: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchyConfig {
    /// Field values treated as missing. Note that `NA` is also Namibia's ISO2
    /// code; drop it from this list for datasets that use bare codes.
    pub na_tokens: Vec<String>,
    pub dataset: DatasetTag,
    /// Expected image feature dimension; `None` accepts the first seen.
    pub d_img: Option<usize>,
}

impl Default for HierarchyConfig {
    fn default() -> Self {
        Self {
            na_tokens: ["", "NA", "NaN", "null", "None"].iter().map(|s| s.to_string()).collect(),
            dataset: DatasetTag::LabelsProvided,
            d_img: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkipCounts {
    pub bad_coords: u64,
    pub unresolved_labels: u64,
    pub unresolved_country: u64,
}

impl SkipCounts {
    pub fn total(&self) -> u64 {
        self.bad_coords + self.unresolved_labels + self.unresolved_country
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SkipReason {
    BadCoords,
    UnresolvedLabels,
    UnresolvedCountry,
}

/// Canonical names along one record's path from continent to city.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ResolvedPath {
    pub continent: String,
    pub iso2: String,
    pub country_name: String,
    pub region: String,
    pub subregion: String,
    pub city: String,
}

impl ResolvedPath {
    /// Entity ids for country, region, subregion and city.
    pub fn ids(&self) -> [String; 4] {
        let reg = format!("{}:{}", self.iso2, self.region);
        let sub = format!("{reg}:{}", self.subregion);
        let city = format!("{sub}:{}", self.city);
        [self.iso2.clone(), reg, sub, city]
    }
}

/// Resolves labels (geocoding coordinate-only records first), the country,
/// and the sanitized region/subregion/city names with their fallbacks.
pub fn resolve_path(
    labels: &PlaceLabels,
    lat: f64,
    lon: f64,
    tag: DatasetTag,
    geocoder: Option<&dyn GeocoderClient>,
) -> std::result::Result<ResolvedPath, SkipReason> {
    if GeoCoord::new(lat, lon).is_err() {
        return Err(SkipReason::BadCoords);
    }
    let labels = resolve_labels(lat, lon, labels, tag, geocoder).ok_or(SkipReason::UnresolvedLabels)?;
    let country = labels
        .country
        .as_deref()
        .and_then(resolve_country)
        .ok_or(SkipReason::UnresolvedCountry)?;
    let region = first_token_or(&sanitize(labels.region.as_deref()), &format!("{} region", country.name));
    let subregion = first_token_or(&sanitize(labels.subregion.as_deref()), &format!("{region} subregion"));
    let city = first_token_or(&sanitize(labels.city.as_deref()), &format!("{subregion} city"));
    Ok(ResolvedPath {
        continent: country.continent,
        iso2: country.iso2,
        country_name: country.name,
        region,
        subregion,
        city,
    })
}

struct AccNode {
    id: String,
    name: String,
    level: u8,
    count: u64,
    lat_sum: f64,
    lon_sum: f64,
    img_sum: Option<Vec<f64>>,
    img_cnt: u64,
    children: Vec<AccNode>,
    index: HashMap<String, usize>,
}

impl AccNode {
    fn new(id: &str, name: &str, level: u8) -> Self {
        Self {
            id: id.to_string(),
            name: name.to_string(),
            level,
            count: 0,
            lat_sum: 0.0,
            lon_sum: 0.0,
            img_sum: None,
            img_cnt: 0,
            children: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn get_or_create_child(&mut self, id: &str, name: &str, level: u8) -> &mut AccNode {
        let pos = match self.index.get(id) {
            Some(&i) => i,
            None => {
                self.children.push(AccNode::new(id, name, level));
                self.index.insert(id.to_string(), self.children.len() - 1);
                self.children.len() - 1
            }
        };
        &mut self.children[pos]
    }

    fn accumulate(&mut self, lat: f64, lon: f64, img: Option<&[f64]>) {
        self.count += 1;
        self.lat_sum += lat;
        self.lon_sum += lon;
        if let Some(v) = img {
            let sum = self.img_sum.get_or_insert_with(|| vec![0.0; v.len()]);
            for (s, x) in sum.iter_mut().zip(v) {
                *s += x;
            }
            self.img_cnt += 1;
        }
    }

    /// Postprocess, FinalizeFeatures and Collapse in one recursive pass.
    fn finalize(self, text: Option<&dyn TextEncoder>) -> Result<EntityNode> {
        let coords = if self.level == LEVEL_WORLD {
            Some(GeoCoord::new(0.0, 0.0)?)
        } else if self.count > 0 {
            let n = self.count as f64;
            Some(GeoCoord::new(self.lat_sum / n, self.lon_sum / n)?)
        } else {
            None
        };
        let img = match (self.img_sum, self.img_cnt) {
            (Some(sum), c) if c > 0 => Some(sum.into_iter().map(|x| x / c as f64).collect()),
            _ => None,
        };
        let text_feat = match text {
            Some(enc) if self.level > LEVEL_WORLD => Some(enc.encode(&self.name)?),
            _ => None,
        };
        let mut children = self
            .children
            .into_iter()
            .map(|c| c.finalize(text))
            .collect::<Result<Vec<_>>>()?;
        children.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(EntityNode {
            id: self.id,
            name: self.name,
            level: self.level,
            count: self.count,
            coords,
            img,
            text: text_feat,
            children,
        })
    }
}

/// Single-pass streaming accumulator over [`RawRecord`]s.
pub struct HierarchyBuilder<'a> {
    cfg: HierarchyConfig,
    geocoder: Option<&'a dyn GeocoderClient>,
    root: AccNode,
    skipped: SkipCounts,
    d_img: Option<usize>,
}

impl<'a> HierarchyBuilder<'a> {
    pub fn new(cfg: HierarchyConfig, geocoder: Option<&'a dyn GeocoderClient>) -> Self {
        let d_img = cfg.d_img;
        Self {
            cfg,
            geocoder,
            root: AccNode::new("World", "World", LEVEL_WORLD),
            skipped: SkipCounts::default(),
            d_img,
        }
    }

    pub fn config(&self) -> &HierarchyConfig {
        &self.cfg
    }

    /// Adds one record. Unresolvable records are counted and skipped; an
    /// image feature of the wrong dimension is an error.
    pub fn push(&mut self, rec: &RawRecord) -> Result<()> {
        let path = match resolve_path(&rec.labels, rec.lat, rec.lon, self.cfg.dataset, self.geocoder) {
            Ok(p) => p,
            Err(reason) => {
                match reason {
                    SkipReason::BadCoords => self.skipped.bad_coords += 1,
                    SkipReason::UnresolvedLabels => self.skipped.unresolved_labels += 1,
                    SkipReason::UnresolvedCountry => self.skipped.unresolved_country += 1,
                }
                return Ok(());
            }
        };
        let img = rec.image_feature.as_deref();
        if let Some(v) = img {
            match self.d_img {
                Some(d) if d != v.len() => {
                    return Err(Error::Shape {
                        name: "image feature".into(),
                        expected: vec![d],
                        found: vec![v.len()],
                    })
                }
                None => self.d_img = Some(v.len()),
                _ => {}
            }
        }
        let (lat, lon) = (rec.lat, rec.lon);
        let [_, reg_id, sub_id, city_id] = path.ids();

        let mut u = &mut self.root;
        u.accumulate(lat, lon, img);
        u = u.get_or_create_child(&path.continent, &path.continent, LEVEL_CONTINENT);
        u.accumulate(lat, lon, img);
        u = u.get_or_create_child(&path.iso2, &path.country_name, LEVEL_COUNTRY);
        u.accumulate(lat, lon, img);
        u = u.get_or_create_child(&reg_id, &path.region, LEVEL_REGION);
        u.accumulate(lat, lon, img);
        u = u.get_or_create_child(&sub_id, &path.subregion, LEVEL_SUBREGION);
        u.accumulate(lat, lon, img);
        u = u.get_or_create_child(&city_id, &path.city, LEVEL_CITY);
        u.accumulate(lat, lon, img);
        Ok(())
    }

    pub fn skipped(&self) -> SkipCounts {
        self.skipped
    }

    /// Computes means, text features, sorts children, and counts levels.
    pub fn finish(self, text: Option<&dyn TextEncoder>) -> Result<Hierarchy> {
        let tree = self.root.finalize(text)?;
        Ok(Hierarchy::new(tree, self.skipped))
    }
}

/// Builds a hierarchy from an in-memory record stream.
pub fn build_hierarchy<I>(
    records: I,
    cfg: HierarchyConfig,
    geocoder: Option<&dyn GeocoderClient>,
    text: Option<&dyn TextEncoder>,
) -> Result<Hierarchy>
where
    I: IntoIterator<Item = RawRecord>,
{
    let mut b = HierarchyBuilder::new(cfg, geocoder);
    for r in records {
        b.push(&r)?;
    }
    b.finish(text)
}

fn parse_feature_list(s: &str) -> Option<Vec<f64>> {
    let v: std::result::Result<Vec<f64>, _> = s.split(';').map(|t| t.trim().parse::<f64>()).collect();
    v.ok().filter(|v| !v.is_empty() && v.iter().all(|x| x.is_finite()))
}

/// Streams a metadata CSV, calling `sink` per row. Image features come from
/// the semicolon-list column when present, else from `sidecar` by row index.
pub fn read_csv_records<F>(
    path: &Path,
    cfg: &HierarchyConfig,
    sidecar: Option<&FeatureMatrix>,
    mut sink: F,
) -> Result<u64>
where
    F: FnMut(RawRecord) -> Result<()>,
{
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).flexible(false).from_reader(file);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    let cols = resolve_usecols(&header)?;
    let na = |s: &str| -> Option<String> {
        let t = s.trim();
        if cfg.na_tokens.iter().any(|n| n == t) {
            None
        } else {
            Some(t.to_string())
        }
    };
    let mut rows = 0u64;
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let num = |i: usize| na(&rec[i]).and_then(|s| s.parse::<f64>().ok()).unwrap_or(f64::NAN);
        let mut image_feature = cols
            .image_feature
            .and_then(|i| na(&rec[i]))
            .and_then(|s| parse_feature_list(&s));
        if image_feature.is_none() {
            if let Some(m) = sidecar {
                image_feature = m.row(row).map(|r| r.iter().map(|&x| x as f64).collect());
            }
        }
        sink(RawRecord {
            labels: PlaceLabels {
                country: na(&rec[cols.country]),
                region: na(&rec[cols.region]),
                subregion: na(&rec[cols.subregion]),
                city: na(&rec[cols.city]),
            },
            lat: num(cols.lat),
            lon: num(cols.lon),
            image_feature,
        })?;
        rows += 1;
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(c: &str, r: &str, s: &str, ci: &str, lat: f64, lon: f64) -> RawRecord {
        RawRecord {
            labels: PlaceLabels::new(c, r, s, ci),
            lat,
            lon,
            image_feature: None,
        }
    }

    fn fixture() -> Vec<RawRecord> {
        vec![
            rec("FR", "IDF", "Paris75", "Paris", 48.85, 2.35),
            rec("FR", "IDF", "Paris75", "Paris", 48.86, 2.36),
            rec("DE", "Bavaria", "Munich-SR", "Munich", 48.14, 11.58),
        ]
    }

    #[test]
    fn three_row_fixture_counts() {
        let h = build_hierarchy(fixture(), HierarchyConfig::default(), None, None).unwrap();
        let counts: Vec<(u8, u64)> = h.stats.level_counts.iter().map(|(k, v)| (*k, *v)).collect();
        assert_eq!(counts, vec![(0, 1), (1, 1), (2, 2), (3, 2), (4, 2), (5, 2)]);
        let europe = &h.tree.children[0];
        assert_eq!((europe.id.as_str(), europe.count), ("Europe", 3));
        let de = &europe.children[0];
        let fr = &europe.children[1];
        assert_eq!((de.id.as_str(), de.count), ("DE", 1));
        assert_eq!((fr.id.as_str(), fr.name.as_str(), fr.count), ("FR", "France", 2));
        let c = fr.coords.unwrap();
        assert!((c.lat() - 48.855).abs() < 1e-12 && (c.lon() - 2.355).abs() < 1e-12);
        assert_eq!(de.children[0].children[0].id, "DE:Bavaria:MunichSR");
        assert_eq!(h.tree.coords, Some(GeoCoord::new(0.0, 0.0).unwrap()));
    }

    #[test]
    fn empty_stream_is_world_only() {
        let h = build_hierarchy(Vec::new(), HierarchyConfig::default(), None, None).unwrap();
        assert_eq!(h.tree.count, 0);
        assert!(h.tree.children.is_empty());
        assert_eq!(h.tree.coords, Some(GeoCoord::new(0.0, 0.0).unwrap()));
        assert_eq!(h.stats.level_counts.len(), 1);
        assert_eq!(h.stats.level_counts[&0], 1);
    }

    #[test]
    fn missing_city_falls_back() {
        let mut r = rec("FR", "IDF", "Paris75", "", 48.85, 2.35);
        r.labels.city = None;
        let h = build_hierarchy(vec![r], HierarchyConfig::default(), None, None).unwrap();
        let city = h.tree.walk().into_iter().find(|n| n.level == LEVEL_CITY).unwrap().clone();
        assert_eq!(city.name, "Paris75 city");
        assert_eq!(city.id, "FR:IDF:Paris75:Paris75 city");
    }

    #[test]
    fn full_fallback_chain() {
        let mut r = rec("FR", "", "", "", 48.85, 2.35);
        r.labels = PlaceLabels {
            country: Some("FR".into()),
            ..Default::default()
        };
        let p = resolve_path(&r.labels, r.lat, r.lon, DatasetTag::LabelsProvided, None).unwrap();
        assert_eq!(p.region, "France region");
        assert_eq!(p.subregion, "France region subregion");
        assert_eq!(p.city, "France region subregion city");
    }

    #[test]
    fn skips_are_counted() {
        let rows = vec![
            rec("ZZ", "a", "b", "c", 1.0, 1.0),
            rec("FR", "a", "b", "c", f64::NAN, 1.0),
            rec("FR", "a", "b", "c", 95.0, 1.0),
            rec("FR", "a", "b", "c", 45.0, 1.0),
        ];
        let h = build_hierarchy(rows, HierarchyConfig::default(), None, None).unwrap();
        assert_eq!(h.skipped, SkipCounts { bad_coords: 2, unresolved_labels: 0, unresolved_country: 1 });
        assert_eq!(h.tree.count, 1);
    }

    #[test]
    fn image_features_average() {
        let mut a = rec("FR", "a", "b", "c", 1.0, 1.0);
        a.image_feature = Some(vec![1.0, 0.0]);
        let mut b = rec("FR", "a", "b", "c", 1.0, 1.0);
        b.image_feature = Some(vec![0.0, 1.0]);
        let c = rec("DE", "a", "b", "c", 1.0, 1.0);
        let h = build_hierarchy(vec![a, b, c], HierarchyConfig::default(), None, None).unwrap();
        let fr = h.tree.walk().into_iter().find(|n| n.id == "FR").unwrap().clone();
        assert_eq!(fr.img, Some(vec![0.5, 0.5]));
        let de = h.tree.walk().into_iter().find(|n| n.id == "DE").unwrap().clone();
        assert_eq!(de.img, None);
    }

    #[test]
    fn identical_features_keep_their_value() {
        let v = vec![0.25, -1.5, 3.0];
        let rows: Vec<RawRecord> = (0..2)
            .map(|_| RawRecord { image_feature: Some(v.clone()), ..rec("FR", "a", "b", "c", 1.0, 1.0) })
            .collect();
        let h = build_hierarchy(rows, HierarchyConfig::default(), None, None).unwrap();
        assert!(h.tree.walk().iter().all(|n| n.img.as_ref() == Some(&v)));
    }

    #[test]
    fn feature_dimension_mismatch_is_an_error() {
        let mut a = rec("FR", "a", "b", "c", 1.0, 1.0);
        a.image_feature = Some(vec![1.0, 0.0]);
        let mut b = a.clone();
        b.image_feature = Some(vec![1.0]);
        assert!(matches!(
            build_hierarchy(vec![a, b], HierarchyConfig::default(), None, None),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn semicolon_feature_lists() {
        assert_eq!(parse_feature_list("1;2.5; -3"), Some(vec![1.0, 2.5, -3.0]));
        assert_eq!(parse_feature_list("1;x"), None);
        assert_eq!(parse_feature_list(""), None);
    }
}
