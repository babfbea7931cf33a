//! Seeded synthetic worlds: nested country/region/subregion/city geography
//! with per-image coordinates and city-prototype image features.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::encoders::SyntheticImageEncoder;
use super::sidecar::FeatureMatrix;
use crate::error::{Error, Result};
use crate::geodesy::{haversine_km, GeoCoord, EARTH_RADIUS_KM};
use crate::hierarchy::{known_codes, PlaceLabels, RawRecord};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldSpec {
    pub n_countries: usize,
    pub regions_per_country: usize,
    pub subregions_per_region: usize,
    pub cities_per_subregion: usize,
    pub images_per_city: usize,
    pub visual_noise: f64,
    pub seed: u64,
    pub d_img: usize,
    /// Image `j` of each city goes to the test split when `j % holdout_every == holdout_every - 1`;
    /// 0 disables the test split.
    pub holdout_every: usize,
    /// Maximum child-to-parent distance in km for region, subregion, city and image.
    pub radii_km: [f64; 4],
    /// Minimum great-circle separation between country anchors in km.
    pub country_separation_km: f64,
    /// Upper bound on generated rows.
    pub max_rows: usize,
}

impl Default for SyntheticWorldSpec {
    fn default() -> Self {
        Self {
            n_countries: 4,
            regions_per_country: 3,
            subregions_per_region: 3,
            cities_per_subregion: 3,
            images_per_city: 20,
            visual_noise: 0.1,
            seed: 0,
            d_img: 64,
            holdout_every: 5,
            radii_km: [800.0, 200.0, 50.0, 5.0],
            country_separation_km: 2500.0,
            max_rows: 2_000_000,
        }
    }
}

impl SyntheticWorldSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_countries", self.n_countries),
            ("regions_per_country", self.regions_per_country),
            ("subregions_per_region", self.subregions_per_region),
            ("cities_per_subregion", self.cities_per_subregion),
            ("images_per_city", self.images_per_city),
            ("d_img", self.d_img),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.visual_noise.is_finite() && self.visual_noise >= 0.0) {
            return Err(Error::Config("visual_noise must be finite and nonnegative".into()));
        }
        if self.radii_km.iter().any(|r| !(r.is_finite() && *r > 0.0)) {
            return Err(Error::Config("radii_km must be positive".into()));
        }
        if !(self.country_separation_km.is_finite() && self.country_separation_km >= 0.0) {
            return Err(Error::Config("country_separation_km must be nonnegative".into()));
        }
        if self.n_countries > available_codes().len() {
            return Err(Error::Config(format!(
                "n_countries {} exceeds the {} available country codes",
                self.n_countries,
                available_codes().len()
            )));
        }
        let rows = self.total_rows().ok_or_else(|| Error::Config("world size overflows".into()))?;
        if rows > self.max_rows {
            return Err(Error::Config(format!("world has {rows} rows, above max_rows {}", self.max_rows)));
        }
        Ok(())
    }

    pub fn n_cities(&self) -> Option<usize> {
        self.n_countries
            .checked_mul(self.regions_per_country)?
            .checked_mul(self.subregions_per_region)?
            .checked_mul(self.cities_per_subregion)
    }

    pub fn total_rows(&self) -> Option<usize> {
        self.n_cities()?.checked_mul(self.images_per_city)
    }

    /// Node counts per tree level `0..=5` once every city has a training image.
    pub fn expected_level_counts(&self, n_continents: usize) -> [usize; 6] {
        let c = self.n_countries;
        let r = c * self.regions_per_country;
        let s = r * self.subregions_per_region;
        [1, n_continents, c, r, s, s * self.cities_per_subregion]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldImage {
    pub image_id: String,
    pub split: Split,
    /// Country code and region, subregion, city labels as written to the CSV.
    pub labels: [String; 4],
    /// Hierarchy entity ids for country, region, subregion, city.
    pub ids: [String; 4],
    pub coord: GeoCoord,
    pub feature: Vec<f32>,
}

/// A generated place with its center.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldPlace {
    pub id: String,
    pub level: usize,
    pub center: GeoCoord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticWorld {
    pub spec: SyntheticWorldSpec,
    pub places: Vec<WorldPlace>,
    pub images: Vec<WorldImage>,
}

/// Country codes the generator draws from. `NA` is excluded since it is also
/// a default missing-value token.
pub fn available_codes() -> Vec<&'static str> {
    known_codes().into_iter().filter(|c| *c != "NA").collect()
}

/// Point at great-circle distance `km` from `from` along `bearing` radians.
pub fn destination(from: &GeoCoord, bearing: f64, km: f64) -> GeoCoord {
    let delta = km / EARTH_RADIUS_KM;
    let (phi1, lam1) = (from.lat().to_radians(), from.lon().to_radians());
    let sin_phi2 = phi1.sin() * delta.cos() + phi1.cos() * delta.sin() * bearing.cos();
    let phi2 = sin_phi2.clamp(-1.0, 1.0).asin();
    let lam2 = lam1 + (bearing.sin() * delta.sin() * phi1.cos()).atan2(delta.cos() - phi1.sin() * sin_phi2);
    GeoCoord::new(phi2.to_degrees(), lam2.to_degrees()).expect("destination is a valid coordinate")
}

fn jitter(rng: &mut ChaCha8Rng, center: &GeoCoord, radius: f64) -> GeoCoord {
    let bearing = rng.random_range(0.0..std::f64::consts::TAU);
    let dist = radius * rng.random_range(0.3..0.95);
    destination(center, bearing, dist)
}

fn place_countries(spec: &SyntheticWorldSpec, rng: &mut ChaCha8Rng) -> Result<Vec<GeoCoord>> {
    let mut out: Vec<GeoCoord> = Vec::with_capacity(spec.n_countries);
    let mut tries = 0usize;
    while out.len() < spec.n_countries {
        tries += 1;
        if tries > 200_000 {
            return Err(Error::Config(format!(
                "cannot place {} countries {} km apart",
                spec.n_countries, spec.country_separation_km
            )));
        }
        let lat = rng.random_range(-1.0f64..1.0) * 0.866; // sin(60 deg)
        let c = GeoCoord::new(lat.asin().to_degrees(), rng.random_range(-150.0..150.0))?;
        if out.iter().all(|o| haversine_km(o, &c) >= spec.country_separation_km) {
            out.push(c);
        }
    }
    Ok(out)
}

/// Generates the world described by `spec`; deterministic per seed.
pub fn generate_world(spec: &SyntheticWorldSpec) -> Result<SyntheticWorld> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut codes = available_codes();
    codes.shuffle(&mut rng);
    codes.truncate(spec.n_countries);
    let anchors = place_countries(spec, &mut rng)?;
    let encoder = SyntheticImageEncoder {
        d_img: spec.d_img,
        noise: spec.visual_noise,
        seed: spec.seed,
    };
    let [r_reg, r_sub, r_city, r_img] = spec.radii_km;
    let mut places = Vec::new();
    let mut images = Vec::with_capacity(spec.total_rows().unwrap_or(0));
    let mut n_img = 0usize;
    for (cc, anchor) in codes.iter().zip(&anchors) {
        places.push(WorldPlace { id: cc.to_string(), level: 0, center: *anchor });
        for r in 0..spec.regions_per_country {
            let reg = format!("{cc}r{r}");
            let reg_id = format!("{cc}:{reg}");
            let reg_c = jitter(&mut rng, anchor, r_reg);
            places.push(WorldPlace { id: reg_id.clone(), level: 1, center: reg_c });
            for s in 0..spec.subregions_per_region {
                let sub = format!("{reg}s{s}");
                let sub_id = format!("{reg_id}:{sub}");
                let sub_c = jitter(&mut rng, &reg_c, r_sub);
                places.push(WorldPlace { id: sub_id.clone(), level: 2, center: sub_c });
                for c in 0..spec.cities_per_subregion {
                    let city = format!("{sub}c{c}");
                    let city_id = format!("{sub_id}:{city}");
                    let city_c = jitter(&mut rng, &sub_c, r_city);
                    places.push(WorldPlace { id: city_id.clone(), level: 3, center: city_c });
                    for j in 0..spec.images_per_city {
                        let coord = jitter(&mut rng, &city_c, r_img);
                        let feature = encoder.encode(&city_id, &mut rng).into_iter().map(|x| x as f32).collect();
                        let split = if spec.holdout_every > 0 && j % spec.holdout_every == spec.holdout_every - 1 {
                            Split::Test
                        } else {
                            Split::Train
                        };
                        images.push(WorldImage {
                            image_id: format!("img{n_img:07}"),
                            split,
                            labels: [cc.to_string(), reg.clone(), sub.clone(), city.clone()],
                            ids: [cc.to_string(), reg_id.clone(), sub_id.clone(), city_id.clone()],
                            coord,
                            feature,
                        });
                        n_img += 1;
                    }
                }
            }
        }
    }
    Ok(SyntheticWorld {
        spec: spec.clone(),
        places,
        images,
    })
}

/// Paths written by [`SyntheticWorld::write_dir`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WorldFiles {
    pub train_csv: PathBuf,
    pub train_features: PathBuf,
    pub test_csv: PathBuf,
    pub test_features: PathBuf,
    pub ground_truth: PathBuf,
}

impl WorldFiles {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train_csv: dir.join("train.csv"),
            train_features: dir.join("train.feat"),
            test_csv: dir.join("test.csv"),
            test_features: dir.join("test.feat"),
            ground_truth: dir.join("ground_truth.csv"),
        }
    }
}

impl SyntheticWorld {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &WorldImage> {
        self.images.iter().filter(move |i| i.split == split)
    }

    /// Records of one split exactly as [`crate::hierarchy::read_csv_records`]
    /// would read them back from the written CSV and sidecar.
    pub fn records(&self, split: Split) -> Vec<RawRecord> {
        let round = |x: f64| format!("{x:.6}").parse::<f64>().expect("formatted float parses");
        self.split(split)
            .map(|im| {
                let [c, r, sr, ci] = &im.labels;
                RawRecord {
                    labels: PlaceLabels::new(c, r, sr, ci),
                    lat: round(im.coord.lat()),
                    lon: round(im.coord.lon()),
                    image_feature: Some(im.feature.iter().map(|&x| x as f64).collect()),
                }
            })
            .collect()
    }

    /// Metadata CSV: `id,country,region,subregion,city,lat,lon`.
    pub fn metadata_csv(&self, split: Split) -> Vec<u8> {
        let mut s = String::from("id,country,region,subregion,city,lat,lon\n");
        for im in self.split(split) {
            let [c, r, sr, ci] = &im.labels;
            let _ = writeln!(s, "{},{c},{r},{sr},{ci},{:.6},{:.6}", im.image_id, im.coord.lat(), im.coord.lon());
        }
        s.into_bytes()
    }

    /// Feature sidecar aligned row-by-row with [`Self::metadata_csv`].
    pub fn feature_matrix(&self, split: Split) -> FeatureMatrix {
        let mut m = FeatureMatrix::empty(self.spec.d_img);
        for im in self.split(split) {
            m.push_row(&im.feature).expect("feature width matches spec");
        }
        m
    }

    /// `image_id,split,country_id,region_id,subregion_id,city_id,lat,lon`.
    pub fn ground_truth_csv(&self) -> Vec<u8> {
        let mut s = String::from("image_id,split,country_id,region_id,subregion_id,city_id,lat,lon\n");
        for im in &self.images {
            let [c, r, sr, ci] = &im.ids;
            let _ = writeln!(
                s,
                "{},{},{c},{r},{sr},{ci},{:.6},{:.6}",
                im.image_id,
                im.split.as_str(),
                im.coord.lat(),
                im.coord.lon()
            );
        }
        s.into_bytes()
    }

    pub fn write_dir(&self, dir: &Path) -> Result<WorldFiles> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = WorldFiles::in_dir(dir);
        let write = |p: &Path, b: Vec<u8>| std::fs::write(p, b).map_err(|e| Error::io(p, e));
        write(&files.train_csv, self.metadata_csv(Split::Train))?;
        write(&files.test_csv, self.metadata_csv(Split::Test))?;
        self.feature_matrix(Split::Train).save(&files.train_features)?;
        self.feature_matrix(Split::Test).save(&files.test_features)?;
        write(&files.ground_truth, self.ground_truth_csv())?;
        Ok(files)
    }
}
