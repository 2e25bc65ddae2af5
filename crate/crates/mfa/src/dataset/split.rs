//! Seeded train/gallery/query splitting.
//!
//! Splits are identity-disjoint: an individual is either a training identity
//! or an evaluation identity, never both. Evaluation identities have their
//! images divided between gallery and query so that every query identity is
//! represented in the gallery. Given the same manifest, fractions, and seed,
//! splitting is fully deterministic.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetManifest};
use crate::binio::atomic_write;

/// Image-count fractions for the three split sides. Gallery and query must
/// be positive; train may be zero for evaluation-only corpora. The three
/// must sum to one.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub gallery: f64,
    pub query: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.60,
            gallery: 0.25,
            query: 0.15,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, gallery: f64, query: f64) -> Result<Self, DatasetError> {
        let invalid = |reason: &str| DatasetError::InvalidFractions {
            train,
            gallery,
            query,
            reason: reason.to_string(),
        };
        if ![train, gallery, query].iter().all(|f| f.is_finite()) {
            return Err(invalid("fractions must be finite"));
        }
        if train < 0.0 || gallery <= 0.0 || query <= 0.0 {
            return Err(invalid(
                "train must be non-negative, gallery and query must be positive",
            ));
        }
        if (train + gallery + query - 1.0).abs() > 1e-9 {
            return Err(invalid("fractions must sum to 1"));
        }
        Ok(SplitFractions {
            train,
            gallery,
            query,
        })
    }

    /// Gallery share of each evaluation identity's images.
    fn gallery_share(&self) -> f64 {
        self.gallery / (self.gallery + self.query)
    }
}

/// What to do with an evaluation identity that has a single image and so
/// cannot appear in both gallery and query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SingleImagePolicy {
    /// Fail, listing the offending identities.
    Strict,
    /// Move the identity to the training side instead.
    ReassignToTrain,
}

/// The result of splitting one species: three lists of record stems.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub species: String,
    pub fractions: SplitFractions,
    pub seed: u64,
    pub train: Vec<String>,
    pub gallery: Vec<String>,
    pub query: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let mut bytes = serde_json::to_vec_pretty(self).expect("split serialization cannot fail");
        bytes.push(b'\n');
        atomic_write(path, &bytes).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let bytes = std::fs::read(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        serde_json::from_slice(&bytes).map_err(|e| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    /// Maps the stem lists back to indices into `manifest`, rejecting stems
    /// that are unknown or appear in more than one section.
    pub fn resolve(&self, manifest: &DatasetManifest) -> Result<ResolvedSplit, DatasetError> {
        let by_stem = manifest.index_by_stem();
        let mut seen = std::collections::HashSet::new();
        let mut lookup = |stems: &[String]| -> Result<Vec<usize>, DatasetError> {
            stems
                .iter()
                .map(|stem| {
                    if !seen.insert(stem.clone()) {
                        return Err(DatasetError::DuplicateSplitEntry { stem: stem.clone() });
                    }
                    by_stem
                        .get(stem)
                        .copied()
                        .ok_or_else(|| DatasetError::UnknownRecord { stem: stem.clone() })
                })
                .collect()
        };
        Ok(ResolvedSplit {
            train: lookup(&self.train)?,
            gallery: lookup(&self.gallery)?,
            query: lookup(&self.query)?,
        })
    }
}

/// Split sections resolved to record indices within one manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedSplit {
    pub train: Vec<usize>,
    pub gallery: Vec<usize>,
    pub query: Vec<usize>,
}

/// Splits one species into train/gallery/query.
///
/// Identities are shuffled with a seeded generator and assigned to the
/// training side until it holds roughly `fractions.train` of the images; the
/// remaining identities form the evaluation side, where each identity's
/// images are divided between gallery and query in the
/// `fractions.gallery : fractions.query` ratio with at least one image on
/// each side.
pub fn make_intra_splits(
    manifest: &DatasetManifest,
    fractions: SplitFractions,
    seed: u64,
    policy: SingleImagePolicy,
) -> Result<SplitManifest, DatasetError> {
    // Re-validate: the fields are public, so a hand-built value could be
    // inconsistent.
    let fractions = SplitFractions::new(fractions.train, fractions.gallery, fractions.query)?;
    if manifest.identity_count() < 2 {
        return Err(DatasetError::TooFewIdentities {
            found: manifest.identity_count(),
        });
    }

    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records().iter().enumerate() {
        groups.entry(r.identity).or_default().push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled: Vec<u32> = groups.keys().copied().collect();
    shuffled.shuffle(&mut rng);

    let target = fractions.train * manifest.len() as f64;
    let mut train_ids = Vec::new();
    let mut eval_ids = Vec::new();
    let mut train_images = 0usize;
    for id in shuffled {
        if (train_images as f64) < target {
            train_images += groups[&id].len();
            train_ids.push(id);
        } else {
            eval_ids.push(id);
        }
    }
    if eval_ids.is_empty() {
        // All identities landed in train (possible when the train fraction
        // dominates); keep at least one identity for evaluation.
        eval_ids.push(train_ids.pop().expect("at least 2 identities"));
    }

    let mut train = Vec::new();
    let mut gallery = Vec::new();
    let mut query = Vec::new();
    let stem_of = |i: usize| manifest.records()[i].stem();
    for id in &train_ids {
        train.extend(groups[id].iter().copied().map(stem_of));
    }

    eval_ids.sort_unstable();
    let mut single_image = Vec::new();
    for id in eval_ids {
        let mut idxs = groups[&id].clone();
        idxs.shuffle(&mut rng);
        let n = idxs.len();
        if n == 1 {
            match policy {
                SingleImagePolicy::Strict => single_image.push(id),
                SingleImagePolicy::ReassignToTrain => train.push(stem_of(idxs[0])),
            }
            continue;
        }
        let g = ((n as f64) * fractions.gallery_share()).round() as usize;
        let g = g.clamp(1, n - 1);
        gallery.extend(idxs[..g].iter().copied().map(stem_of));
        query.extend(idxs[g..].iter().copied().map(stem_of));
    }
    if !single_image.is_empty() {
        return Err(DatasetError::SingleImageIdentities {
            identities: single_image,
        });
    }
    if gallery.is_empty() || query.is_empty() {
        return Err(DatasetError::DegenerateSplit {
            reason: "no evaluation identity has enough images for both gallery and query".into(),
        });
    }

    train.sort_unstable();
    gallery.sort_unstable();
    query.sort_unstable();
    Ok(SplitManifest {
        species: manifest.species().to_string(),
        fractions,
        seed,
        train,
        gallery,
        query,
    })
}

/// Leave-one-species-out split: train on every species except the target,
/// evaluate on the target's gallery/query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LodoSplit {
    pub target_species: String,
    /// Training subsets of the non-target species, sorted by species name.
    pub train_manifests: Vec<DatasetManifest>,
    /// Gallery/query split of the target species; its train list is empty
    /// because the target contributes no training records.
    pub eval_split: SplitManifest,
}

/// Builds a leave-one-species-out split. Every manifest is split internally
/// with the same fractions and seed; the non-target species contribute their
/// training records, the target contributes its gallery and query.
pub fn make_loo_splits(
    manifests: &[DatasetManifest],
    target: &str,
    fractions: SplitFractions,
    seed: u64,
    policy: SingleImagePolicy,
) -> Result<LodoSplit, DatasetError> {
    let mut seen = std::collections::BTreeSet::new();
    for m in manifests {
        if !seen.insert(m.species().to_string()) {
            return Err(DatasetError::DuplicateSpecies {
                species: m.species().to_string(),
            });
        }
    }
    if !seen.contains(target) {
        return Err(DatasetError::UnknownSpecies {
            species: target.to_string(),
            available: seen.into_iter().collect(),
        });
    }
    if manifests.len() < 2 {
        return Err(DatasetError::DegenerateSplit {
            reason: "leave-one-out needs at least one non-target species".into(),
        });
    }

    let mut sorted: Vec<&DatasetManifest> = manifests.iter().collect();
    sorted.sort_by_key(|m| m.species().to_string());

    let mut train_manifests = Vec::new();
    let mut eval_split = None;
    for manifest in sorted {
        let split = make_intra_splits(manifest, fractions, seed, policy)?;
        if manifest.species() == target {
            eval_split = Some(SplitManifest {
                train: Vec::new(),
                ..split
            });
        } else {
            let resolved = split.resolve(manifest)?;
            let records = resolved
                .train
                .iter()
                .map(|i| manifest.records()[*i].clone())
                .collect();
            train_manifests.push(DatasetManifest::new(manifest.species(), records)?);
        }
    }

    Ok(LodoSplit {
        target_species: target.to_string(),
        train_manifests,
        eval_split: eval_split.expect("target presence checked above"),
    })
}
