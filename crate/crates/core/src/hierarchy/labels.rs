//! Label cleaning and resolution, including reverse geocoding for
//! coordinate-only datasets.

use serde::{Deserialize, Serialize};

use super::country;

/// Raw `(country, region, subregion, city)` fields; `None` marks a missing value.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlaceLabels {
    pub country: Option<String>,
    pub region: Option<String>,
    pub subregion: Option<String>,
    pub city: Option<String>,
}

impl PlaceLabels {
    pub fn new(country: &str, region: &str, subregion: &str, city: &str) -> Self {
        let f = |s: &str| Some(s.to_string());
        Self {
            country: f(country),
            region: f(region),
            subregion: f(subregion),
            city: f(city),
        }
    }
}

/// Whether a dataset ships its own labels or only coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetTag {
    #[default]
    LabelsProvided,
    CoordsOnly,
}

/// Removes punctuation (anything not alphanumeric, whitespace or `_`), drops
/// the literal token `County`, and trims. Missing input yields `""`.
pub fn sanitize(s: Option<&str>) -> String {
    let Some(s) = s else {
        return String::new();
    };
    let cleaned: String = s
        .chars()
        .filter(|c| c.is_alphanumeric() || c.is_whitespace() || *c == '_')
        .collect();
    cleaned
        .split_whitespace()
        .filter(|t| *t != "County")
        .collect::<Vec<_>>()
        .join(" ")
}

/// First whitespace/underscore token of `s`, or `alt` when `s` is empty.
pub fn first_token_or(s: &str, alt: &str) -> String {
    s.split(|c: char| c.is_whitespace() || c == '_')
        .find(|t| !t.is_empty())
        .map(str::to_string)
        .unwrap_or_else(|| alt.to_string())
}

/// Reverse geocoding contract: `(lat, lon)` to labels, or a failure message.
pub trait GeocoderClient: Send + Sync {
    fn reverse(&self, lat: f64, lon: f64) -> Result<PlaceLabels, String>;
}

/// Offline deterministic geocoder over a regular lat/lon grid.
///
/// City cells are `cell_deg` wide; subregions, regions and countries cover
/// 2x2, 4x4 and 8x8 city cells. Country codes are drawn from the bundled
/// table by coarse cell index, labels encode the cell indices.
#[derive(Debug, Clone)]
pub struct GridGeocoder {
    cell_deg: f64,
    codes: Vec<&'static str>,
}

impl GridGeocoder {
    pub fn new(cell_deg: f64) -> Self {
        assert!(cell_deg > 0.0, "cell size must be positive");
        Self {
            cell_deg,
            codes: country::known_codes(),
        }
    }

    fn cell(&self, lat: f64, lon: f64, span: f64) -> (i64, i64) {
        let s = self.cell_deg * span;
        (((lat + 90.0) / s).floor() as i64, ((lon + 180.0) / s).floor() as i64)
    }
}

impl GeocoderClient for GridGeocoder {
    fn reverse(&self, lat: f64, lon: f64) -> Result<PlaceLabels, String> {
        if !(-90.0..=90.0).contains(&lat) || !lon.is_finite() {
            return Err(format!("coordinates out of range: ({lat}, {lon})"));
        }
        let (ci, cj) = self.cell(lat, lon, 8.0);
        let cols = (360.0 / (self.cell_deg * 8.0)).ceil() as i64;
        let idx = (ci * cols + cj).rem_euclid(self.codes.len() as i64) as usize;
        let label = |prefix: &str, (a, b): (i64, i64)| format!("{prefix}{a}N{b}");
        Ok(PlaceLabels {
            country: Some(self.codes[idx].to_string()),
            region: Some(label("R", self.cell(lat, lon, 4.0))),
            subregion: Some(label("S", self.cell(lat, lon, 2.0))),
            city: Some(label("C", self.cell(lat, lon, 1.0))),
        })
    }
}

/// Passes labels through, or reverse geocodes coordinate-only records.
/// `None` means the row should be skipped.
pub fn resolve_labels(
    lat: f64,
    lon: f64,
    raw: &PlaceLabels,
    tag: DatasetTag,
    geocoder: Option<&dyn GeocoderClient>,
) -> Option<PlaceLabels> {
    match tag {
        DatasetTag::LabelsProvided => Some(raw.clone()),
        DatasetTag::CoordsOnly => geocoder?.reverse(lat, lon).ok(),
    }
}

/// Extracts labels from a Nominatim `/reverse?format=jsonv2` response.
pub fn parse_nominatim_response(body: &serde_json::Value) -> Option<PlaceLabels> {
    let addr = body.get("address")?;
    let field = |keys: &[&str]| {
        keys.iter()
            .find_map(|k| addr.get(*k).and_then(|v| v.as_str()))
            .map(str::to_string)
    };
    let country = field(&["country_code"])?.to_ascii_uppercase();
    Some(PlaceLabels {
        country: Some(country),
        region: field(&["state", "region", "province"]),
        subregion: field(&["county", "state_district", "district"]),
        city: field(&["city", "town", "village", "municipality", "hamlet"]),
    })
}

#[cfg(feature = "nominatim")]
pub use nominatim::NominatimClient;

#[cfg(feature = "nominatim")]
mod nominatim {
    use std::collections::BTreeMap;
    use std::path::PathBuf;
    use std::sync::Mutex;
    use std::time::{Duration, Instant};

    use super::{parse_nominatim_response, GeocoderClient, PlaceLabels};

    /// HTTP client for a Nominatim-compatible endpoint with a minimum request
    /// interval and an on-disk JSON cache keyed by rounded coordinates.
    pub struct NominatimClient {
        base_url: String,
        min_interval: Duration,
        cache_path: Option<PathBuf>,
        state: Mutex<State>,
        http: reqwest::blocking::Client,
    }

    struct State {
        last: Option<Instant>,
        cache: BTreeMap<String, PlaceLabels>,
    }

    impl NominatimClient {
        pub fn new(base_url: &str, min_interval: Duration, cache_path: Option<PathBuf>) -> Self {
            let cache = cache_path
                .as_ref()
                .and_then(|p| std::fs::read(p).ok())
                .and_then(|b| serde_json::from_slice(&b).ok())
                .unwrap_or_default();
            Self {
                base_url: base_url.trim_end_matches('/').to_string(),
                min_interval,
                cache_path,
                state: Mutex::new(State { last: None, cache }),
                http: reqwest::blocking::Client::builder()
                    .user_agent("hierloc/0.1")
                    .build()
                    .expect("http client"),
            }
        }
    }

    impl GeocoderClient for NominatimClient {
        fn reverse(&self, lat: f64, lon: f64) -> Result<PlaceLabels, String> {
            let key = format!("{lat:.5},{lon:.5}");
            let mut st = self.state.lock().map_err(|e| e.to_string())?;
            if let Some(hit) = st.cache.get(&key) {
                return Ok(hit.clone());
            }
            if let Some(last) = st.last {
                let wait = self.min_interval.saturating_sub(last.elapsed());
                std::thread::sleep(wait);
            }
            st.last = Some(Instant::now());
            let url = format!(
                "{}/reverse?format=jsonv2&zoom=10&addressdetails=1&lat={lat}&lon={lon}",
                self.base_url
            );
            let body: serde_json::Value = self
                .http
                .get(url)
                .send()
                .and_then(|r| r.error_for_status())
                .and_then(|r| r.json())
                .map_err(|e| e.to_string())?;
            let labels = parse_nominatim_response(&body).ok_or("no address in response")?;
            st.cache.insert(key, labels.clone());
            if let Some(path) = &self.cache_path {
                let bytes = serde_json::to_vec(&st.cache).map_err(|e| e.to_string())?;
                std::fs::write(path, bytes).map_err(|e| e.to_string())?;
            }
            Ok(labels)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sanitize_examples() {
        assert_eq!(sanitize(Some("St. Louis")), "St Louis");
        assert_eq!(sanitize(Some("Cook County")), "Cook");
        assert_eq!(sanitize(None), "");
        assert_eq!(sanitize(Some("  Munich-SR ")), "MunichSR");
        assert_eq!(sanitize(Some("Ile_de_France")), "Ile_de_France");
        assert_eq!(sanitize(Some("Countyline")), "Countyline");
    }

    #[test]
    fn first_token_examples() {
        assert_eq!(first_token_or("", "France region"), "France region");
        assert_eq!(first_token_or("Ile_de_France", "x"), "Ile");
        assert_eq!(first_token_or("Bavaria", "x"), "Bavaria");
        assert_eq!(first_token_or("New York", "x"), "New");
    }

    #[test]
    fn labels_provided_is_identity() {
        let raw = PlaceLabels::new("FR", "IDF", "Paris75", "Paris");
        assert_eq!(
            resolve_labels(48.8, 2.3, &raw, DatasetTag::LabelsProvided, None),
            Some(raw)
        );
    }

    #[test]
    fn grid_stub_is_deterministic() {
        let geo = GridGeocoder::new(1.0);
        let got = resolve_labels(48.8, 2.3, &PlaceLabels::default(), DatasetTag::CoordsOnly, Some(&geo)).unwrap();
        // lat cell floor(138.8 / s), lon cell floor(182.3 / s) for s = 1, 2, 4, 8
        assert_eq!(got.city.as_deref(), Some("C138N182"));
        assert_eq!(got.subregion.as_deref(), Some("S69N91"));
        assert_eq!(got.region.as_deref(), Some("R34N45"));
        let codes = country::known_codes();
        let idx = (17 * 45 + 22) % codes.len();
        assert_eq!(got.country.as_deref(), Some(codes[idx]));
        assert_eq!(Some(got), geo.reverse(48.8, 2.3).ok());
    }

    struct Failing;
    impl GeocoderClient for Failing {
        fn reverse(&self, _: f64, _: f64) -> Result<PlaceLabels, String> {
            Err("unavailable".into())
        }
    }

    #[test]
    fn geocoder_failure_skips() {
        let raw = PlaceLabels::default();
        assert_eq!(resolve_labels(1.0, 2.0, &raw, DatasetTag::CoordsOnly, Some(&Failing)), None);
        assert_eq!(resolve_labels(1.0, 2.0, &raw, DatasetTag::CoordsOnly, None), None);
    }

    #[test]
    fn nominatim_parsing() {
        let body: serde_json::Value = serde_json::from_str(
            r#"{"address": {"city": "Paris", "county": "Paris", "state": "Ile-de-France", "country_code": "fr"}}"#,
        )
        .unwrap();
        let got = parse_nominatim_response(&body).unwrap();
        assert_eq!(got, PlaceLabels::new("FR", "Ile-de-France", "Paris", "Paris"));
        assert!(parse_nominatim_response(&serde_json::json!({"error": "x"})).is_none());
    }
}
