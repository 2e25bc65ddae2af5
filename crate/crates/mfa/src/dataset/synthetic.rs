//! Synthetic corpora with controllable identity/metadata correlation.
//!
//! Each identity gets a latent appearance vector; every image is that latent
//! plus Gaussian noise, stored in a [`FeatureStore`] keyed by record stem
//! (synthetic corpora have no pixels; toy encoders read the stored feature).
//! Each identity also gets a preferred metadata profile; an image carries
//! the profile with probability `metadata_correlation`, otherwise uniformly
//! random metadata. At correlation 1.0 metadata is constant within an
//! identity; at 0.0 it is independent of identity.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{image_stem, DatasetError, DatasetManifest, ImageRecord};
use crate::binio::{read_blob, write_blob};
use crate::metadata::{
    Circadian, EnvironmentalMetadata, FaceOrientation, TemperatureBand, TemperatureRange,
    ThresholdTable,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub species: String,
    pub identities: usize,
    pub images_per_identity: usize,
    /// Dimension of the stored appearance features.
    pub feature_dim: usize,
    /// Standard deviation of the per-image noise around the identity latent.
    pub noise_scale: f64,
    /// Probability that an image carries its identity's metadata profile.
    pub metadata_correlation: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            species: "synthetic".into(),
            identities: 8,
            images_per_identity: 12,
            feature_dim: 16,
            noise_scale: 0.5,
            metadata_correlation: 0.9,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    fn validate(&self) -> Result<(), DatasetError> {
        let invalid = |reason: &str| DatasetError::InvalidSyntheticConfig {
            reason: reason.to_string(),
        };
        if self.species.is_empty() {
            return Err(invalid("species must not be empty"));
        }
        if self.identities == 0 || self.images_per_identity == 0 {
            return Err(invalid("identities and images_per_identity must be positive"));
        }
        if self.feature_dim == 0 {
            return Err(invalid("feature_dim must be positive"));
        }
        if !self.noise_scale.is_finite() || self.noise_scale < 0.0 {
            return Err(invalid("noise_scale must be finite and non-negative"));
        }
        if !(0.0..=1.0).contains(&self.metadata_correlation) {
            return Err(invalid("metadata_correlation must be in [0, 1]"));
        }
        Ok(())
    }
}

/// Raw appearance vectors keyed by record stem.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureStore {
    dim: usize,
    features: BTreeMap<String, Vec<f64>>,
}

impl FeatureStore {
    pub fn new(dim: usize) -> Self {
        FeatureStore {
            dim,
            features: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn insert(&mut self, stem: String, feature: Vec<f64>) {
        assert_eq!(feature.len(), self.dim, "feature dimension mismatch");
        self.features.insert(stem, feature);
    }

    pub fn get(&self, stem: &str) -> Option<&[f64]> {
        self.features.get(stem).map(Vec::as_slice)
    }

    pub fn require(&self, stem: &str) -> Result<&[f64], DatasetError> {
        self.get(stem).ok_or_else(|| DatasetError::MissingFeature {
            stem: stem.to_string(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let stems: Vec<&String> = self.features.keys().collect();
        let header = serde_json::json!({
            "format": "feature-store",
            "version": 1,
            "dim": self.dim,
            "count": self.features.len(),
            "stems": stems,
        });
        let values: Vec<f64> = self.features.values().flatten().copied().collect();
        write_blob(path, &header, &values).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let parse_err = |reason: String| DatasetError::ManifestParse {
            path: path.to_path_buf(),
            reason,
        };
        let (header, values) = read_blob(path).map_err(|source| DatasetError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        if header["format"] != "feature-store" {
            return Err(parse_err(format!("unexpected format {}", header["format"])));
        }
        let dim = header["dim"].as_u64().ok_or_else(|| parse_err("missing dim".into()))? as usize;
        let stems = header["stems"]
            .as_array()
            .ok_or_else(|| parse_err("missing stems".into()))?;
        if values.len() != stems.len() * dim {
            return Err(parse_err(format!(
                "payload holds {} values, expected {} stems x {dim}",
                values.len(),
                stems.len()
            )));
        }
        let mut store = FeatureStore::new(dim);
        for (i, stem) in stems.iter().enumerate() {
            let stem = stem
                .as_str()
                .ok_or_else(|| parse_err("stem is not a string".into()))?;
            store.insert(stem.to_string(), values[i * dim..(i + 1) * dim].to_vec());
        }
        Ok(store)
    }
}

struct MetadataSampler {
    table: ThresholdTable,
    range: TemperatureRange,
}

impl MetadataSampler {
    fn uniform<R: Rng>(&self, rng: &mut R) -> EnvironmentalMetadata {
        let band = TemperatureBand::ALL[rng.random_range(0..TemperatureBand::ALL.len())];
        let (lo, hi) = self.table.band_interval(band, &self.range);
        EnvironmentalMetadata {
            temperature_celsius: rng.random_range(lo..hi),
            circadian: Circadian::ALL[rng.random_range(0..Circadian::ALL.len())],
            face_orientation: FaceOrientation::ALL[rng.random_range(0..FaceOrientation::ALL.len())],
        }
    }
}

/// Generates a synthetic manifest plus the appearance features behind it.
/// The same config always produces byte-identical results.
pub fn generate_synthetic(
    config: &SyntheticConfig,
) -> Result<(DatasetManifest, FeatureStore), DatasetError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let sampler = MetadataSampler {
        table: ThresholdTable::default(),
        range: TemperatureRange::default(),
    };
    let mut store = FeatureStore::new(config.feature_dim);
    let mut records = Vec::with_capacity(config.identities * config.images_per_identity);
    for id in 0..config.identities as u32 {
        let latent: Vec<f64> = (0..config.feature_dim)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let profile = sampler.uniform(&mut rng);
        for index in 0..config.images_per_identity as u32 {
            let feature: Vec<f64> = latent
                .iter()
                .map(|l| l + config.noise_scale * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let use_profile = rng.random::<f64>() < config.metadata_correlation;
            let metadata = if use_profile {
                profile.clone()
            } else {
                sampler.uniform(&mut rng)
            };
            let camera = format!("SYN-{:02}", (id + index) % 4);
            let stem = image_stem(id, &camera, index);
            store.insert(stem.clone(), feature);
            records.push(ImageRecord {
                identity: id,
                camera_id: camera,
                index,
                species: config.species.clone(),
                image_path: format!("{}/{stem}.png", config.species).into(),
                sidecar_path: format!("{}/{stem}.json", config.species).into(),
                metadata,
            });
        }
    }
    let manifest = DatasetManifest::new(&config.species, records)?;
    Ok((manifest, store))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metadata::bucket_temperature;

    #[test]
    fn generation_is_deterministic_per_seed() {
        let config = SyntheticConfig::default();
        let (m1, f1) = generate_synthetic(&config).unwrap();
        let (m2, f2) = generate_synthetic(&config).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(f1, f2);

        let other = SyntheticConfig {
            seed: 1,
            ..SyntheticConfig::default()
        };
        let (m3, f3) = generate_synthetic(&other).unwrap();
        assert_ne!(f1, f3);
        // Stems and counts agree even when the sampled content differs.
        assert_eq!(m1.len(), m3.len());
    }

    #[test]
    fn correlation_one_pins_metadata_within_identity() {
        let config = SyntheticConfig {
            metadata_correlation: 1.0,
            identities: 6,
            images_per_identity: 10,
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&config).unwrap();
        for id in manifest.identities() {
            let metas: Vec<_> = manifest
                .records()
                .iter()
                .filter(|r| r.identity == id)
                .map(|r| r.metadata.clone())
                .collect();
            assert!(metas.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn correlation_zero_metadata_is_consistent_with_uniform() {
        let config = SyntheticConfig {
            metadata_correlation: 0.0,
            identities: 40,
            images_per_identity: 125,
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&config).unwrap();
        let table = ThresholdTable::default();
        let mut counts = std::collections::BTreeMap::new();
        for r in manifest.records() {
            let band = bucket_temperature(r.metadata.temperature_celsius, &table).unwrap();
            *counts
                .entry((band, r.metadata.face_orientation, r.metadata.circadian))
                .or_insert(0usize) += 1;
        }
        // Chi-square against the uniform distribution over the 48 cells;
        // 90 is far beyond the 99.9th percentile for 47 degrees of freedom,
        // so a uniform sampler passes while any systematic skew fails.
        let n = manifest.len() as f64;
        let cells = 6.0 * 4.0 * 2.0;
        let expected = n / cells;
        let mut chi2 = 0.0;
        for combo in TemperatureBand::ALL.iter().flat_map(|b| {
            FaceOrientation::ALL
                .iter()
                .flat_map(move |o| Circadian::ALL.iter().map(move |c| (*b, *o, *c)))
        }) {
            let observed = *counts.get(&combo).unwrap_or(&0) as f64;
            chi2 += (observed - expected).powi(2) / expected;
        }
        assert!(chi2 < 90.0, "chi-square {chi2} too large for uniform metadata");
    }

    #[test]
    fn high_correlation_mostly_reuses_the_identity_profile() {
        let config = SyntheticConfig {
            metadata_correlation: 0.9,
            identities: 20,
            images_per_identity: 40,
            ..SyntheticConfig::default()
        };
        let (manifest, _) = generate_synthetic(&config).unwrap();
        let mut matches = 0usize;
        let mut total = 0usize;
        for id in manifest.identities() {
            let records: Vec<_> = manifest
                .records()
                .iter()
                .filter(|r| r.identity == id)
                .collect();
            // The profile is the modal metadata value within the identity.
            let mut freq = std::collections::BTreeMap::new();
            for r in &records {
                *freq
                    .entry(format!("{:?}", r.metadata))
                    .or_insert(0usize) += 1;
            }
            let mode = freq.values().max().copied().unwrap_or(0);
            matches += mode;
            total += records.len();
        }
        let share = matches as f64 / total as f64;
        assert!(share > 0.80, "profile share {share} unexpectedly low");
    }

    #[test]
    fn low_noise_keeps_identities_visually_separable() {
        let config = SyntheticConfig {
            noise_scale: 0.1,
            identities: 10,
            images_per_identity: 10,
            ..SyntheticConfig::default()
        };
        let (manifest, store) = generate_synthetic(&config).unwrap();
        let dist = |a: &[f64], b: &[f64]| -> f64 {
            a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
        };
        let records = manifest.records();
        let mut within = Vec::new();
        let mut across = Vec::new();
        for (i, a) in records.iter().enumerate() {
            for b in records.iter().skip(i + 1) {
                let d = dist(
                    store.require(&a.stem()).unwrap(),
                    store.require(&b.stem()).unwrap(),
                );
                if a.identity == b.identity {
                    within.push(d);
                } else {
                    across.push(d);
                }
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(mean(&within) < 0.5 * mean(&across));
    }

    #[test]
    fn feature_store_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let (_, store) = generate_synthetic(&SyntheticConfig::default()).unwrap();
        let path = dir.path().join("features.bin");
        store.save(&path).unwrap();
        let loaded = FeatureStore::load(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        assert_eq!(loaded.dim(), store.dim());
        for (stem, feature) in &store.features {
            let read = loaded.get(stem).unwrap();
            for (a, b) in read.iter().zip(feature) {
                assert_eq!(*a, *b as f32 as f64);
            }
        }
        assert!(matches!(
            loaded.require("999_SYN-00_0"),
            Err(DatasetError::MissingFeature { .. })
        ));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let bad = SyntheticConfig {
            metadata_correlation: 1.5,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            identities: 0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
        let bad = SyntheticConfig {
            noise_scale: -1.0,
            ..SyntheticConfig::default()
        };
        assert!(generate_synthetic(&bad).is_err());
    }
}
