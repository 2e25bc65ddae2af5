//! Corpus handling: image records, per-species manifests, filename parsing,
//! train/gallery/query splits, count validation, and synthetic data.
//!
//! A corpus on disk is a directory per species holding image files paired
//! with JSON metadata sidecars of the same stem. Image stems follow the
//! `<identity>_<camera>_<index>` convention, e.g. `11_CT-GIG-03_27`.

mod fixture;
mod split;
mod synthetic;
mod validate;

pub use fixture::{reference_expected_table, reference_manifest, write_reference_corpus};
pub use split::{
    make_intra_splits, make_loo_splits, LodoSplit, ResolvedSplit, SingleImagePolicy,
    SplitFractions, SplitManifest,
};
pub use synthetic::{generate_synthetic, FeatureStore, SyntheticConfig};
pub use validate::{validate_dataset, ExpectedCounts, ExpectedTable, ValidationReport, ValidationRow};

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::atomic_write;
use crate::metadata::{parse_metadata_sidecar, EnvironmentalMetadata, MetadataError, TemperatureRange};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("malformed image name \"{name}\": {reason}")]
    MalformedName { name: String, reason: String },
    #[error("{}: metadata error", path.display())]
    Metadata {
        path: PathBuf,
        source: MetadataError,
    },
    #[error("unpaired files: {} image(s) without sidecars {orphan_images:?}, {} sidecar(s) without images {orphan_sidecars:?}",
            orphan_images.len(), orphan_sidecars.len())]
    UnpairedFiles {
        orphan_images: Vec<String>,
        orphan_sidecars: Vec<String>,
    },
    #[error("duplicate record \"{stem}\" in manifest")]
    DuplicateRecord { stem: String },
    #[error("record species \"{found}\" does not match manifest species \"{expected}\"")]
    MixedSpecies { expected: String, found: String },
    #[error("species name must not be empty")]
    EmptySpecies,
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: manifest parse error: {reason}")]
    ManifestParse { path: PathBuf, reason: String },
    #[error("invalid split fractions ({train}, {gallery}, {query}): {reason}")]
    InvalidFractions {
        train: f64,
        gallery: f64,
        query: f64,
        reason: String,
    },
    #[error("splitting requires at least 2 identities, found {found}")]
    TooFewIdentities { found: usize },
    #[error("identities with a single image cannot be split into gallery and query: {identities:?}")]
    SingleImageIdentities { identities: Vec<u32> },
    #[error("degenerate split: {reason}")]
    DegenerateSplit { reason: String },
    #[error("unknown species \"{species}\"; available: {available:?}")]
    UnknownSpecies {
        species: String,
        available: Vec<String>,
    },
    #[error("species \"{species}\" appears more than once")]
    DuplicateSpecies { species: String },
    #[error("split references unknown record \"{stem}\"")]
    UnknownRecord { stem: String },
    #[error("record \"{stem}\" appears in more than one split section")]
    DuplicateSplitEntry { stem: String },
    #[error("invalid synthetic config: {reason}")]
    InvalidSyntheticConfig { reason: String },
    #[error("feature store has no entry for record \"{stem}\"")]
    MissingFeature { stem: String },
}

/// One image of one individual, together with its environmental metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub identity: u32,
    pub camera_id: String,
    pub index: u32,
    pub species: String,
    pub image_path: PathBuf,
    pub sidecar_path: PathBuf,
    pub metadata: EnvironmentalMetadata,
}

impl ImageRecord {
    /// Canonical record key: the image file stem.
    pub fn stem(&self) -> String {
        image_stem(self.identity, &self.camera_id, self.index)
    }
}

/// Splits an image stem of the form `<identity>_<camera>_<index>` on its
/// first and last underscore. The identity and index are non-negative
/// integers; the camera segment may contain hyphens.
pub fn parse_image_name(name: &str) -> Result<(u32, String, u32), DatasetError> {
    let malformed = |reason: String| DatasetError::MalformedName {
        name: name.to_string(),
        reason,
    };
    let first = name
        .find('_')
        .ok_or_else(|| malformed("expected <identity>_<camera>_<index>".into()))?;
    let last = name.rfind('_').unwrap();
    if first == last {
        return Err(malformed("expected <identity>_<camera>_<index>".into()));
    }
    let identity_part = &name[..first];
    let camera = &name[first + 1..last];
    let index_part = &name[last + 1..];
    let identity = identity_part.parse::<u32>().map_err(|_| {
        malformed(format!(
            "identity segment \"{identity_part}\" is not a non-negative integer"
        ))
    })?;
    if camera.is_empty() {
        return Err(malformed("camera segment is empty".into()));
    }
    let index = index_part.parse::<u32>().map_err(|_| {
        malformed(format!(
            "index segment \"{index_part}\" is not a non-negative integer"
        ))
    })?;
    Ok((identity, camera.to_string(), index))
}

/// Inverse of [`parse_image_name`].
pub fn image_stem(identity: u32, camera_id: &str, index: u32) -> String {
    format!("{identity}_{camera_id}_{index}")
}

/// All records of one species, in canonical (stem-sorted) order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    species: String,
    records: Vec<ImageRecord>,
    identity_count: usize,
}

impl DatasetManifest {
    /// Builds a manifest, sorting records by stem and enforcing that the
    /// species is uniform and every `(identity, camera, index)` triple is
    /// unique.
    pub fn new(species: &str, mut records: Vec<ImageRecord>) -> Result<Self, DatasetError> {
        if species.is_empty() {
            return Err(DatasetError::EmptySpecies);
        }
        for r in &records {
            if r.species != species {
                return Err(DatasetError::MixedSpecies {
                    expected: species.to_string(),
                    found: r.species.clone(),
                });
            }
        }
        records.sort_by_key(|r| r.stem());
        let mut seen = BTreeSet::new();
        for r in &records {
            if !seen.insert(r.stem()) {
                return Err(DatasetError::DuplicateRecord { stem: r.stem() });
            }
        }
        let identity_count = records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .len();
        Ok(DatasetManifest {
            species: species.to_string(),
            records,
            identity_count,
        })
    }

    pub fn species(&self) -> &str {
        &self.species
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Number of distinct identities.
    pub fn identity_count(&self) -> usize {
        self.identity_count
    }

    /// Distinct identities in ascending order.
    pub fn identities(&self) -> Vec<u32> {
        self.records
            .iter()
            .map(|r| r.identity)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Index of every record keyed by stem.
    pub fn index_by_stem(&self) -> std::collections::HashMap<String, usize> {
        self.records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.stem(), i))
            .collect()
    }
}

/// A manifest together with non-fatal warnings collected while loading.
#[derive(Debug)]
pub struct ManifestLoad {
    pub manifest: DatasetManifest,
    pub warnings: Vec<String>,
}

/// Scans a species directory, pairing every image file with the JSON sidecar
/// of the same stem. Fails if any image or sidecar is unpaired, listing all
/// orphans. An empty directory yields an empty manifest.
pub fn load_manifest(
    dir: &Path,
    species: &str,
    range: &TemperatureRange,
) -> Result<ManifestLoad, DatasetError> {
    let io_err = |source| DatasetError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut images = Vec::new();
    let mut sidecars = Vec::new();
    for entry in fs::read_dir(dir).map_err(io_err)? {
        let entry = entry.map_err(io_err)?;
        let path = entry.path();
        if !path.is_file() {
            continue;
        }
        let name = entry.file_name().to_string_lossy().to_string();
        if name.starts_with('.') {
            continue;
        }
        if path.extension().and_then(|e| e.to_str()) == Some("json") {
            sidecars.push(path);
        } else {
            images.push(path);
        }
    }
    let stem_of = |p: &PathBuf| {
        p.file_stem()
            .map(|s| s.to_string_lossy().to_string())
            .unwrap_or_default()
    };
    images.sort_by_key(|p| stem_of(p));
    let sidecar_stems: BTreeSet<String> = sidecars.iter().map(&stem_of).collect();
    let image_stems: BTreeSet<String> = images.iter().map(&stem_of).collect();
    if image_stems.len() != images.len() {
        let mut seen = BTreeSet::new();
        for p in &images {
            let stem = stem_of(p);
            if !seen.insert(stem.clone()) {
                return Err(DatasetError::DuplicateRecord { stem });
            }
        }
    }
    let orphan_images: Vec<String> = image_stems.difference(&sidecar_stems).cloned().collect();
    let orphan_sidecars: Vec<String> = sidecar_stems.difference(&image_stems).cloned().collect();
    if !orphan_images.is_empty() || !orphan_sidecars.is_empty() {
        return Err(DatasetError::UnpairedFiles {
            orphan_images,
            orphan_sidecars,
        });
    }

    let mut warnings = Vec::new();
    let mut records = Vec::with_capacity(images.len());
    for image_path in images {
        let stem = stem_of(&image_path);
        let (identity, camera_id, index) = parse_image_name(&stem)?;
        let sidecar_path = image_path.with_file_name(format!("{stem}.json"));
        let bytes = fs::read(&sidecar_path).map_err(|source| DatasetError::Io {
            path: sidecar_path.clone(),
            source,
        })?;
        let doc = parse_metadata_sidecar(&bytes, range).map_err(|source| DatasetError::Metadata {
            path: sidecar_path.clone(),
            source,
        })?;
        for key in &doc.unknown_keys {
            warnings.push(format!(
                "{}: ignored unknown key \"{key}\"",
                sidecar_path.display()
            ));
        }
        records.push(ImageRecord {
            identity,
            camera_id,
            index,
            species: species.to_string(),
            image_path,
            sidecar_path,
            metadata: doc.metadata,
        });
    }
    let manifest = DatasetManifest::new(species, records)?;
    Ok(ManifestLoad { manifest, warnings })
}

/// Writes a manifest as a CSV file with one record per line. Metadata stays
/// in the sidecars; the file stores paths and parsed identity fields.
pub fn save_manifest(manifest: &DatasetManifest, path: &Path) -> Result<(), DatasetError> {
    let mut writer = csv::Writer::from_writer(Vec::new());
    let io_err = |reason: String| DatasetError::ManifestParse {
        path: path.to_path_buf(),
        reason,
    };
    writer
        .write_record([
            "image_path",
            "identity",
            "camera_id",
            "index",
            "species",
            "sidecar_path",
        ])
        .map_err(|e| io_err(e.to_string()))?;
    for r in manifest.records() {
        writer
            .write_record([
                r.image_path.to_string_lossy().as_ref(),
                &r.identity.to_string(),
                &r.camera_id,
                &r.index.to_string(),
                &r.species,
                r.sidecar_path.to_string_lossy().as_ref(),
            ])
            .map_err(|e| io_err(e.to_string()))?;
    }
    let bytes = writer.into_inner().map_err(|e| io_err(e.to_string()))?;
    atomic_write(path, &bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Reads a manifest CSV back, re-parsing each referenced sidecar. Relative
/// paths are resolved against the manifest file's directory.
pub fn load_manifest_file(
    path: &Path,
    range: &TemperatureRange,
) -> Result<ManifestLoad, DatasetError> {
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    let resolve = |p: &str| {
        let pb = PathBuf::from(p);
        if pb.is_absolute() {
            pb
        } else {
            base.join(pb)
        }
    };
    let parse_err = |reason: String| DatasetError::ManifestParse {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path).map_err(|e| parse_err(e.to_string()))?;
    let mut warnings = Vec::new();
    let mut records = Vec::new();
    let mut species: Option<String> = None;
    for row in reader.records() {
        let row = row.map_err(|e| parse_err(e.to_string()))?;
        if row.len() != 6 {
            return Err(parse_err(format!("expected 6 fields, got {}", row.len())));
        }
        let identity: u32 = row[1]
            .parse()
            .map_err(|_| parse_err(format!("bad identity \"{}\"", &row[1])))?;
        let index: u32 = row[3]
            .parse()
            .map_err(|_| parse_err(format!("bad index \"{}\"", &row[3])))?;
        let sidecar_path = resolve(&row[5]);
        let bytes = fs::read(&sidecar_path).map_err(|source| DatasetError::Io {
            path: sidecar_path.clone(),
            source,
        })?;
        let doc = parse_metadata_sidecar(&bytes, range).map_err(|source| DatasetError::Metadata {
            path: sidecar_path.clone(),
            source,
        })?;
        for key in &doc.unknown_keys {
            warnings.push(format!(
                "{}: ignored unknown key \"{key}\"",
                sidecar_path.display()
            ));
        }
        species.get_or_insert_with(|| row[4].to_string());
        records.push(ImageRecord {
            identity,
            camera_id: row[2].to_string(),
            index,
            species: row[4].to_string(),
            image_path: resolve(&row[0]),
            sidecar_path,
            metadata: doc.metadata,
        });
    }
    let species = species.ok_or_else(|| parse_err("manifest has no records".into()))?;
    let manifest = DatasetManifest::new(&species, records)?;
    Ok(ManifestLoad { manifest, warnings })
}

#[cfg(test)]
pub(crate) mod test_support {
    use super::*;
    use crate::metadata::{Circadian, FaceOrientation};

    /// Builds an in-memory record with deterministic metadata; paths are
    /// virtual and only meaningful for on-disk corpora.
    pub(crate) fn record(species: &str, identity: u32, camera: &str, index: u32) -> ImageRecord {
        let stem = image_stem(identity, camera, index);
        ImageRecord {
            identity,
            camera_id: camera.to_string(),
            index,
            species: species.to_string(),
            image_path: PathBuf::from(format!("{species}/{stem}.png")),
            sidecar_path: PathBuf::from(format!("{species}/{stem}.json")),
            metadata: EnvironmentalMetadata {
                temperature_celsius: (identity as f64 * 7.0 + index as f64) % 40.0 - 5.0,
                circadian: Circadian::ALL[(identity as usize + index as usize) % 2],
                face_orientation: FaceOrientation::ALL[(identity as usize + index as usize) % 4],
            },
        }
    }

    /// Manifest with `identities` identities and `per_identity` images each.
    pub(crate) fn small_manifest(
        species: &str,
        identities: u32,
        per_identity: u32,
    ) -> DatasetManifest {
        let mut records = Vec::new();
        for id in 0..identities {
            for idx in 0..per_identity {
                let camera = format!("CAM-{:02}", (id + idx) % 3);
                records.push(record(species, id, &camera, idx));
            }
        }
        DatasetManifest::new(species, records).unwrap()
    }
}
