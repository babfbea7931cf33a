//! Schema-agnostic header resolution.

use crate::error::{Error, Result};

/// Canonical fields in their fixed order.
pub const CANONICAL: [&str; 6] = ["country", "region", "subregion", "city", "lat", "lon"];

const ALIASES: &[(&str, &[&str])] = &[
    ("country", &["country_code", "countrycode", "iso2"]),
    ("region", &["state", "province"]),
    ("subregion", &["sub_region", "county", "district"]),
    ("city", &["town", "locality"]),
    ("lat", &["latitude"]),
    ("lon", &["lng", "long", "longitude"]),
    ("image_feature", &["image_embedding", "embedding", "img_feature", "feature"]),
];

/// Header positions of the canonical fields.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ColumnMap {
    pub country: usize,
    pub region: usize,
    pub subregion: usize,
    pub city: usize,
    pub lat: usize,
    pub lon: usize,
    pub image_feature: Option<usize>,
    /// Original header names in canonical order (image feature last, if any).
    pub ordered: Vec<String>,
}

fn squash(s: &str) -> String {
    s.chars()
        .filter(|c| !matches!(c, '-' | '_' | ' '))
        .flat_map(char::to_lowercase)
        .collect()
}

fn names_for(key: &str) -> Vec<&str> {
    let mut v = vec![key];
    if let Some((_, a)) = ALIASES.iter().find(|(k, _)| *k == key) {
        v.extend_from_slice(a);
    }
    v
}

/// Resolves canonical columns by (1) exact lowercase match, (2) hyphen and
/// underscore tolerant match, (3) prefix/suffix match. Each pass runs over
/// all still-unresolved keys before the next one, so an exact `subregion`
/// is claimed before `region` gets to try suffix matching.
pub fn resolve_usecols(header: &[String]) -> Result<ColumnMap> {
    if header.is_empty() {
        return Err(Error::contract("empty CSV header"));
    }
    let lower: Vec<String> = header.iter().map(|h| h.trim().to_lowercase()).collect();
    let squashed: Vec<String> = header.iter().map(|h| squash(h)).collect();

    let keys: Vec<&str> = CANONICAL.iter().copied().chain(["image_feature"]).collect();
    let mut found: Vec<Option<usize>> = vec![None; keys.len()];
    let mut taken = vec![false; header.len()];

    type Rule = fn(&str, &str, &str) -> bool;
    let rules: [Rule; 3] = [
        |cand, lower, _| lower == cand,
        |cand, _, squashed| squashed == squash(cand),
        |cand, _, squashed| {
            let c = squash(cand);
            squashed.len() > c.len() && (squashed.starts_with(&c) || squashed.ends_with(&c))
        },
    ];

    for rule in rules {
        for (ki, key) in keys.iter().enumerate() {
            if found[ki].is_some() {
                continue;
            }
            'names: for cand in names_for(key) {
                for (hi, (l, s)) in lower.iter().zip(&squashed).enumerate() {
                    if !taken[hi] && rule(cand, l, s) {
                        found[ki] = Some(hi);
                        taken[hi] = true;
                        break 'names;
                    }
                }
            }
        }
    }

    let mut req = [0usize; 6];
    for (i, key) in CANONICAL.iter().enumerate() {
        req[i] = found[i].ok_or_else(|| Error::MissingField((*key).to_string()))?;
    }
    let image_feature = found[6];
    let mut ordered: Vec<String> = req.iter().map(|&i| header[i].clone()).collect();
    if let Some(i) = image_feature {
        ordered.push(header[i].clone());
    }
    Ok(ColumnMap {
        country: req[0],
        region: req[1],
        subregion: req[2],
        city: req[3],
        lat: req[4],
        lon: req[5],
        image_feature,
        ordered,
    })
}
