//! Geographic entity hierarchy: World, continent, country, region,
//! subregion, city.
//!
//! The tree is built in one streaming pass over metadata records (see
//! [`HierarchyBuilder`]), finalized into mean coordinates and features, and
//! serialized as a JSON document with children as id-sorted lists.

mod build;
mod columns;
mod country;
mod labels;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use build::{
    build_hierarchy, read_csv_records, resolve_path, HierarchyBuilder, HierarchyConfig, RawRecord,
    ResolvedPath, SkipCounts, SkipReason,
};
pub use columns::{resolve_usecols, ColumnMap, CANONICAL};
pub use country::{known_codes, resolve_country, CountryInfo};
pub use labels::{
    first_token_or, parse_nominatim_response, resolve_labels, sanitize, DatasetTag,
    GeocoderClient, GridGeocoder, PlaceLabels,
};
#[cfg(feature = "nominatim")]
pub use labels::NominatimClient;

use crate::error::{Error, Result};
use crate::geodesy::GeoCoord;

pub const LEVEL_WORLD: u8 = 0;
pub const LEVEL_CONTINENT: u8 = 1;
pub const LEVEL_COUNTRY: u8 = 2;
pub const LEVEL_REGION: u8 = 3;
pub const LEVEL_SUBREGION: u8 = 4;
pub const LEVEL_CITY: u8 = 5;

/// The four levels used for training and retrieval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Country,
    Region,
    Subregion,
    City,
}

impl Level {
    pub const ALL: [Level; 4] = [Level::Country, Level::Region, Level::Subregion, Level::City];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Tree depth of this level (country = 2 ... city = 5).
    pub fn depth(self) -> u8 {
        self as u8 + LEVEL_COUNTRY
    }

    pub fn name(self) -> &'static str {
        match self {
            Level::Country => "country",
            Level::Region => "region",
            Level::Subregion => "subregion",
            Level::City => "city",
        }
    }
}

/// One finalized node of the geographic tree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityNode {
    pub id: String,
    pub name: String,
    pub level: u8,
    pub count: u64,
    /// Mean coordinates; fixed at (0, 0) for World, `None` when count is 0.
    pub coords: Option<GeoCoord>,
    /// Mean image feature, `None` when no record carried one.
    pub img: Option<Vec<f64>>,
    /// Text feature of the entity name, `None` for World or when no encoder ran.
    pub text: Option<Vec<f64>>,
    pub children: Vec<EntityNode>,
}

impl EntityNode {
    /// Depth-first pre-order traversal.
    pub fn walk(&self) -> Vec<&EntityNode> {
        let mut out = Vec::new();
        let mut stack = vec![self];
        while let Some(n) = stack.pop() {
            out.push(n);
            stack.extend(n.children.iter().rev());
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HierarchyStats {
    pub level_counts: BTreeMap<u8, u64>,
}

/// Per-level node counts via a full traversal.
pub fn count_levels(root: &EntityNode) -> HierarchyStats {
    let mut level_counts = BTreeMap::new();
    for n in root.walk() {
        *level_counts.entry(n.level).or_insert(0) += 1;
    }
    HierarchyStats { level_counts }
}

pub const DOCUMENT_FORMAT: &str = "hierloc-hierarchy";
pub const DOCUMENT_VERSION: u32 = 1;

/// Serialized hierarchy: tree plus stats and skip counters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hierarchy {
    pub format: String,
    pub version: u32,
    pub stats: HierarchyStats,
    pub skipped: SkipCounts,
    pub tree: EntityNode,
}

impl Hierarchy {
    pub fn new(tree: EntityNode, skipped: SkipCounts) -> Self {
        Self {
            format: DOCUMENT_FORMAT.to_string(),
            version: DOCUMENT_VERSION,
            stats: count_levels(&tree),
            skipped,
            tree,
        }
    }

    /// Compact JSON with a trailing newline; byte-stable for equal trees.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = serde_json::to_vec(self).expect("hierarchy serializes");
        out.push(b'\n');
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let doc: Hierarchy = serde_json::from_slice(bytes).map_err(|e| Error::Format {
            what: "hierarchy document",
            detail: e.to_string(),
        })?;
        if doc.format != DOCUMENT_FORMAT || doc.version != DOCUMENT_VERSION {
            return Err(Error::Format {
                what: "hierarchy document",
                detail: format!("unsupported format {} v{}", doc.format, doc.version),
            });
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format { what, detail } => Error::Format {
                what,
                detail: format!("{}: {detail}", path.display()),
            },
            other => other,
        })
    }

    /// Entities of the four training levels in tree order.
    pub fn flatten(&self) -> FlatHierarchy {
        FlatHierarchy::from_tree(&self.tree)
    }
}

/// A training-level entity with a link to its parent one level up.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatEntity {
    pub id: String,
    pub name: String,
    pub level: Level,
    /// Index of the parent in the previous level (`None` for countries).
    pub parent: Option<usize>,
    pub coords: GeoCoord,
    pub img: Option<Vec<f64>>,
    pub text: Option<Vec<f64>>,
    pub count: u64,
}

/// The country, region, subregion and city levels as index-linked arrays.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct FlatHierarchy {
    pub levels: [Vec<FlatEntity>; 4],
}

impl FlatHierarchy {
    fn from_tree(root: &EntityNode) -> Self {
        let mut flat = FlatHierarchy::default();
        fn visit(node: &EntityNode, parent: Option<usize>, flat: &mut FlatHierarchy) {
            let mut here = parent;
            if (LEVEL_COUNTRY..=LEVEL_CITY).contains(&node.level) {
                let level = Level::ALL[(node.level - LEVEL_COUNTRY) as usize];
                let list = &mut flat.levels[level.index()];
                list.push(FlatEntity {
                    id: node.id.clone(),
                    name: node.name.clone(),
                    level,
                    parent: if level == Level::Country { None } else { parent },
                    coords: node.coords.unwrap_or(GeoCoord::new(0.0, 0.0).expect("origin coords")),
                    img: node.img.clone(),
                    text: node.text.clone(),
                    count: node.count,
                });
                here = Some(list.len() - 1);
            }
            for c in &node.children {
                visit(c, here, flat);
            }
        }
        visit(root, None, &mut flat);
        flat
    }

    pub fn level(&self, level: Level) -> &[FlatEntity] {
        &self.levels[level.index()]
    }

    pub fn len(&self) -> usize {
        self.levels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Index of an entity id within its level.
    pub fn position(&self, level: Level, id: &str) -> Option<usize> {
        self.levels[level.index()].iter().position(|e| e.id == id)
    }

    /// Id-to-index maps for every level.
    pub fn id_maps(&self) -> [std::collections::HashMap<String, usize>; 4] {
        std::array::from_fn(|l| {
            self.levels[l]
                .iter()
                .enumerate()
                .map(|(i, e)| (e.id.clone(), i))
                .collect()
        })
    }
}
