//! Count validation against a table of expected per-split statistics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest, SplitManifest};

/// Expected statistics for one species.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpectedCounts {
    pub train_images: usize,
    pub train_identities: usize,
    pub gallery_images: usize,
    pub gallery_identities: usize,
    pub query_images: usize,
    pub query_identities: usize,
    pub total_images: usize,
    pub total_identities: usize,
}

/// Expected statistics for a whole corpus, keyed by species name.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ExpectedTable {
    rows: BTreeMap<String, ExpectedCounts>,
}

impl ExpectedTable {
    pub fn new(rows: BTreeMap<String, ExpectedCounts>) -> Self {
        ExpectedTable { rows }
    }

    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let text = std::fs::read_to_string(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text).map_err(|e| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    pub fn species(&self) -> impl Iterator<Item = &str> {
        self.rows.keys().map(|s| s.as_str())
    }

    pub fn get(&self, species: &str) -> Result<&ExpectedCounts, DatasetError> {
        self.rows
            .get(species)
            .ok_or_else(|| DatasetError::UnknownSpecies {
                species: species.to_string(),
                available: self.rows.keys().cloned().collect(),
            })
    }
}

/// One compared statistic.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationRow {
    pub label: String,
    pub expected: usize,
    pub actual: usize,
}

impl ValidationRow {
    pub fn pass(&self) -> bool {
        self.expected == self.actual
    }
}

/// Comparison of a loaded manifest (and optionally its split) against the
/// expected counts for its species.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub species: String,
    pub rows: Vec<ValidationRow>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.rows.iter().all(ValidationRow::pass)
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{}", self.species)?;
        for row in &self.rows {
            writeln!(
                f,
                "  {:<20} expected {:>6}  actual {:>6}  {}",
                row.label,
                row.expected,
                row.actual,
                if row.pass() { "ok" } else { "MISMATCH" }
            )?;
        }
        Ok(())
    }
}

/// Compares a manifest's counts (and, when a split is supplied, its per-side
/// counts) against the expected statistics.
pub fn validate_dataset(
    manifest: &DatasetManifest,
    split: Option<&SplitManifest>,
    expected: &ExpectedCounts,
) -> Result<ValidationReport, DatasetError> {
    let mut rows = vec![
        ValidationRow {
            label: "total images".into(),
            expected: expected.total_images,
            actual: manifest.len(),
        },
        ValidationRow {
            label: "total identities".into(),
            expected: expected.total_identities,
            actual: manifest.identity_count(),
        },
    ];
    if let Some(split) = split {
        let resolved = split.resolve(manifest)?;
        let identity_count = |idxs: &[usize]| {
            idxs.iter()
                .map(|i| manifest.records()[*i].identity)
                .collect::<BTreeSet<_>>()
                .len()
        };
        let sections = [
            ("train", &resolved.train, expected.train_images, expected.train_identities),
            ("gallery", &resolved.gallery, expected.gallery_images, expected.gallery_identities),
            ("query", &resolved.query, expected.query_images, expected.query_identities),
        ];
        for (name, idxs, exp_images, exp_ids) in sections {
            rows.push(ValidationRow {
                label: format!("{name} images"),
                expected: exp_images,
                actual: idxs.len(),
            });
            rows.push(ValidationRow {
                label: format!("{name} identities"),
                expected: exp_ids,
                actual: identity_count(idxs),
            });
        }
    }
    Ok(ValidationReport {
        species: manifest.species().to_string(),
        rows,
    })
}
