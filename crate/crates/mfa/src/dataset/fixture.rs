//! Deterministic reference corpus reproducing the published per-species
//! statistics (see `fixtures/reference_counts.toml`).
//!
//! The generator fabricates records (and optionally files on disk) whose
//! per-split image and identity counts match the published table cell for
//! cell, giving the validation path a ground-truth corpus to check against.

use std::path::Path;

use super::validate::ExpectedTable;
use super::{image_stem, DatasetError, DatasetManifest, ImageRecord, SplitFractions, SplitManifest};
use crate::binio::atomic_write;
use crate::metadata::{
    Circadian, EnvironmentalMetadata, FaceOrientation, TemperatureBand, TemperatureRange,
    ThresholdTable,
};

const REFERENCE_COUNTS_TOML: &str = include_str!("../../fixtures/reference_counts.toml");

const CAMERAS: [&str; 5] = ["CT-GIG-01", "CT-GIG-03", "CT-RPK-02", "CT-HBT-04", "CT-KAI-05"];

/// The published expected-counts table bundled with the crate.
pub fn reference_expected_table() -> ExpectedTable {
    ExpectedTable::from_toml(REFERENCE_COUNTS_TOML).expect("bundled counts table is well-formed")
}

/// Splits `total` into `parts` sizes that differ by at most one.
fn distribute(total: usize, parts: usize) -> Vec<usize> {
    let base = total / parts;
    let extra = total % parts;
    (0..parts).map(|i| base + usize::from(i < extra)).collect()
}

fn metadata_for(identity: u32, index: u32) -> EnvironmentalMetadata {
    let id = identity as usize;
    let idx = index as usize;
    let band = TemperatureBand::ALL[(id * 5 + idx * 7) % 6];
    let (lo, hi) =
        ThresholdTable::default().band_interval(band, &TemperatureRange::default());
    EnvironmentalMetadata {
        temperature_celsius: (lo + hi) / 2.0,
        circadian: Circadian::ALL[(id + idx) % 2],
        face_orientation: FaceOrientation::ALL[(id * 3 + idx) % 4],
    }
}

fn make_record(species: &str, identity: u32, index: u32) -> ImageRecord {
    let camera = CAMERAS[(identity as usize + index as usize) % CAMERAS.len()];
    let stem = image_stem(identity, camera, index);
    ImageRecord {
        identity,
        camera_id: camera.to_string(),
        index,
        species: species.to_string(),
        image_path: format!("{species}/{stem}.png").into(),
        sidecar_path: format!("{species}/{stem}.json").into(),
        metadata: metadata_for(identity, index),
    }
}

/// Builds the reference manifest and split for one species. Identities
/// `0..train_identities` are training identities; the rest are evaluation
/// identities whose images are divided between gallery and query so that
/// every per-split count matches the published table.
pub fn reference_manifest(species: &str) -> Result<(DatasetManifest, SplitManifest), DatasetError> {
    let table = reference_expected_table();
    let counts = *table.get(species)?;

    let mut records = Vec::with_capacity(counts.total_images);
    let mut train = Vec::new();
    let mut gallery = Vec::new();
    let mut query = Vec::new();

    let train_sizes = distribute(counts.train_images, counts.train_identities);
    for (i, size) in train_sizes.iter().enumerate() {
        let identity = i as u32;
        for index in 0..*size as u32 {
            let record = make_record(species, identity, index);
            train.push(record.stem());
            records.push(record);
        }
    }

    let gallery_sizes = distribute(counts.gallery_images, counts.gallery_identities);
    let query_sizes = distribute(counts.query_images, counts.query_identities);
    for (i, (g, q)) in gallery_sizes.iter().zip(&query_sizes).enumerate() {
        let identity = (counts.train_identities + i) as u32;
        for index in 0..(*g + *q) as u32 {
            let record = make_record(species, identity, index);
            if (index as usize) < *g {
                gallery.push(record.stem());
            } else {
                query.push(record.stem());
            }
            records.push(record);
        }
    }

    train.sort_unstable();
    gallery.sort_unstable();
    query.sort_unstable();
    let manifest = DatasetManifest::new(species, records)?;
    let split = SplitManifest {
        species: species.to_string(),
        fractions: SplitFractions::default(),
        seed: 0,
        train,
        gallery,
        query,
    };
    Ok((manifest, split))
}

/// Writes the reference corpus under `root`: one directory of image/sidecar
/// pairs per species plus a `<species>.split.json` next to it. `species`
/// limits generation to a single species; `None` writes all six.
pub fn write_reference_corpus(root: &Path, species: Option<&str>) -> Result<(), DatasetError> {
    let table = reference_expected_table();
    let names: Vec<String> = match species {
        Some(s) => {
            table.get(s)?;
            vec![s.to_string()]
        }
        None => table.species().map(String::from).collect(),
    };
    for name in names {
        let (manifest, split) = reference_manifest(&name)?;
        let dir = root.join(&name);
        std::fs::create_dir_all(&dir).map_err(|source| DatasetError::Io {
            path: dir.clone(),
            source,
        })?;
        for record in manifest.records() {
            let stem = record.stem();
            let image_path = dir.join(format!("{stem}.png"));
            let io_err = |path: std::path::PathBuf| {
                move |source| DatasetError::Io { path, source }
            };
            atomic_write(&image_path, format!("{stem}\n").as_bytes())
                .map_err(io_err(image_path.clone()))?;
            let sidecar_path = dir.join(format!("{stem}.json"));
            let mut bytes = serde_json::to_vec(&record.metadata).expect("metadata serializes");
            bytes.push(b'\n');
            atomic_write(&sidecar_path, &bytes).map_err(io_err(sidecar_path.clone()))?;
        }
        split.save(&root.join(format!("{name}.split.json")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, validate_dataset};

    #[test]
    fn reference_manifests_match_every_published_cell() {
        let table = reference_expected_table();
        let mut total_images = 0;
        let mut total_identities = 0;
        for species in table.species() {
            let (manifest, split) = reference_manifest(species).unwrap();
            let expected = table.get(species).unwrap();
            let report = validate_dataset(&manifest, Some(&split), expected).unwrap();
            assert!(report.passed(), "{report}");
            total_images += manifest.len();
            total_identities += manifest.identity_count();
        }
        assert_eq!(total_images, 20_890);
        assert_eq!(total_identities, 505);
    }

    #[test]
    fn reference_gallery_and_query_share_identities() {
        let (manifest, split) = reference_manifest("penguin").unwrap();
        let resolved = split.resolve(&manifest).unwrap();
        let ids = |idxs: &[usize]| -> std::collections::BTreeSet<u32> {
            idxs.iter().map(|i| manifest.records()[*i].identity).collect()
        };
        assert_eq!(ids(&resolved.gallery), ids(&resolved.query));
        let train_ids = ids(&resolved.train);
        assert!(train_ids.is_disjoint(&ids(&resolved.gallery)));
    }

    #[test]
    fn reference_corpus_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        write_reference_corpus(dir.path(), Some("deer")).unwrap();
        let load = load_manifest(&dir.path().join("deer"), "deer", &TemperatureRange::default())
            .unwrap();
        assert!(load.warnings.is_empty());
        let (expected_manifest, expected_split) = reference_manifest("deer").unwrap();
        assert_eq!(load.manifest.len(), expected_manifest.len());
        for (a, b) in load.manifest.records().iter().zip(expected_manifest.records()) {
            assert_eq!(a.stem(), b.stem());
            assert_eq!(a.metadata, b.metadata);
        }
        let split = SplitManifest::load(&dir.path().join("deer.split.json")).unwrap();
        assert_eq!(split, expected_split);
        let table = reference_expected_table();
        let report =
            validate_dataset(&load.manifest, Some(&split), table.get("deer").unwrap()).unwrap();
        assert!(report.passed(), "{report}");
    }

    #[test]
    fn unknown_species_is_rejected() {
        assert!(matches!(
            reference_manifest("moa"),
            Err(DatasetError::UnknownSpecies { .. })
        ));
    }
}
