//! ISO2 country resolution against the bundled table.

use std::collections::HashMap;
use std::sync::OnceLock;

const TABLE: &str = include_str!("../../data/countries.csv");

/// Continent fixes applied on top of the table. XK is not an ISO 3166 code.
const PATCHES: &[(&str, &str, &str)] = &[
    ("XK", "Kosovo", "Europe"),
    ("TL", "Timor-Leste", "Asia"),
    ("SX", "Sint Maarten", "North America"),
    ("VA", "Holy See", "Europe"),
];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CountryInfo {
    pub iso2: String,
    pub name: String,
    pub continent: String,
}

fn table() -> &'static HashMap<String, (String, String)> {
    static MAP: OnceLock<HashMap<String, (String, String)>> = OnceLock::new();
    MAP.get_or_init(|| {
        let mut map = HashMap::new();
        let mut rdr = csv::Reader::from_reader(TABLE.as_bytes());
        for rec in rdr.records() {
            let rec = rec.expect("bundled country table is valid CSV");
            map.insert(rec[0].to_string(), (rec[1].to_string(), rec[2].to_string()));
        }
        for (iso, name, cont) in PATCHES {
            map.insert(iso.to_string(), (name.to_string(), cont.to_string()));
        }
        map
    })
}

/// All known ISO2 codes, sorted.
pub fn known_codes() -> Vec<&'static str> {
    let mut codes: Vec<&str> = table().keys().map(String::as_str).collect();
    codes.sort_unstable();
    codes
}

fn lookup(code: &str) -> Option<CountryInfo> {
    let (name, continent) = table().get(code)?;
    if continent.is_empty() {
        return None;
    }
    Some(CountryInfo {
        iso2: code.to_string(),
        name: name.clone(),
        continent: continent.clone(),
    })
}

/// Parses `raw` as a bare ISO2 code (`FR`) or a `name_AA` suffix (`kosovo_XK`).
pub fn resolve_country(raw: &str) -> Option<CountryInfo> {
    let s = raw.trim();
    let candidate = if s.len() == 2 {
        s
    } else {
        let (_, suffix) = s.rsplit_once('_')?;
        suffix
    };
    if candidate.len() != 2 || !candidate.chars().all(|c| c.is_ascii_alphabetic()) {
        return None;
    }
    lookup(&candidate.to_ascii_uppercase())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bare_code() {
        let fr = resolve_country("FR").unwrap();
        assert_eq!((fr.iso2.as_str(), fr.name.as_str(), fr.continent.as_str()), ("FR", "France", "Europe"));
        assert_eq!(resolve_country("de").unwrap().name, "Germany");
    }

    #[test]
    fn suffix_code_and_patches() {
        let xk = resolve_country("kosovo_XK").unwrap();
        assert_eq!((xk.iso2.as_str(), xk.name.as_str(), xk.continent.as_str()), ("XK", "Kosovo", "Europe"));
        assert_eq!(resolve_country("TL").unwrap().continent, "Asia");
        assert_eq!(resolve_country("SX").unwrap().continent, "North America");
        assert_eq!(resolve_country("vatican_VA").unwrap().continent, "Europe");
    }

    #[test]
    fn unknown_codes() {
        assert_eq!(resolve_country("ZZ"), None);
        assert_eq!(resolve_country(""), None);
        assert_eq!(resolve_country("France"), None);
        assert_eq!(resolve_country("name_F1"), None);
    }

    #[test]
    fn table_has_no_blank_continents_after_patching() {
        for code in known_codes() {
            assert!(resolve_country(code).is_some(), "{code}");
        }
        assert!(known_codes().len() > 240);
    }
}
