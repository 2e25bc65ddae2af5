//! Environmental metadata attached to every image: a temperature reading,
//! the circadian phase, and the animal's face orientation.
//!
//! Continuous temperatures are discretized into six ordered bands through a
//! configurable threshold table, and the full metadata tuple is rendered into
//! a fixed natural-language prompt that downstream text encoders consume.
//! Metadata arrives on disk as a small JSON sidecar next to each image.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Template used by [`render_prompt`]. Slot values are lowercase words.
pub const PROMPT_TEMPLATE: &str = "A photo of a {species} {identity} in {band} temperature, \
     with face direction {face_orientation}, captured during the {circadian}.";

/// Default plausibility range for temperature readings, in degrees Celsius.
pub const DEFAULT_TEMPERATURE_RANGE: TemperatureRange = TemperatureRange {
    min: -30.0,
    max: 50.0,
};

#[derive(Debug, Error, PartialEq)]
pub enum MetadataError {
    #[error("temperature must be finite, got {value}")]
    NonFiniteTemperature { value: f64 },
    #[error("temperature thresholds must be finite and strictly increasing, got {boundaries:?}")]
    InvalidThresholds { boundaries: [f64; 5] },
    #[error("temperature {value}°C outside plausible range [{min}, {max}]")]
    TemperatureOutOfRange { value: f64, min: f64, max: f64 },
    #[error("invalid temperature range [{min}, {max}]")]
    InvalidRange { min: f64, max: f64 },
    #[error("sidecar is not a JSON object: {reason}")]
    MalformedSidecar { reason: String },
    #[error("sidecar missing required key \"{key}\"")]
    MissingKey { key: &'static str },
    #[error("sidecar key \"{key}\" has invalid value {value}: expected {expected}")]
    InvalidValue {
        key: &'static str,
        value: String,
        expected: &'static str,
    },
    #[error("prompt slot \"{slot}\" must not be empty")]
    EmptyPromptSlot { slot: &'static str },
}

// ===== Categorical metadata =====

/// Discrete temperature band, ordered from coldest to hottest.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum TemperatureBand {
    Freezing,
    Cold,
    Chilly,
    Cool,
    Warm,
    Hot,
}

impl TemperatureBand {
    pub const ALL: [TemperatureBand; 6] = [
        TemperatureBand::Freezing,
        TemperatureBand::Cold,
        TemperatureBand::Chilly,
        TemperatureBand::Cool,
        TemperatureBand::Warm,
        TemperatureBand::Hot,
    ];

    pub fn label(self) -> &'static str {
        match self {
            TemperatureBand::Freezing => "freezing",
            TemperatureBand::Cold => "cold",
            TemperatureBand::Chilly => "chilly",
            TemperatureBand::Cool => "cool",
            TemperatureBand::Warm => "warm",
            TemperatureBand::Hot => "hot",
        }
    }
}

/// Day or night, as recorded by the capture timestamp.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum Circadian {
    Day,
    Night,
}

impl Circadian {
    pub const ALL: [Circadian; 2] = [Circadian::Day, Circadian::Night];

    pub fn label(self) -> &'static str {
        match self {
            Circadian::Day => "day",
            Circadian::Night => "night",
        }
    }

    fn parse(value: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.label() == value)
    }
}

/// Direction the animal's face points relative to the camera.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum FaceOrientation {
    Front,
    Back,
    Left,
    Right,
}

impl FaceOrientation {
    pub const ALL: [FaceOrientation; 4] = [
        FaceOrientation::Front,
        FaceOrientation::Back,
        FaceOrientation::Left,
        FaceOrientation::Right,
    ];

    pub fn label(self) -> &'static str {
        match self {
            FaceOrientation::Front => "front",
            FaceOrientation::Back => "back",
            FaceOrientation::Left => "left",
            FaceOrientation::Right => "right",
        }
    }

    fn parse(value: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.label() == value)
    }
}

/// The per-image environmental record carried by a JSON sidecar.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvironmentalMetadata {
    pub temperature_celsius: f64,
    pub circadian: Circadian,
    pub face_orientation: FaceOrientation,
}

// ===== Temperature discretization =====

/// Five strictly increasing boundaries carving the real line into the six
/// bands. A temperature equal to a boundary falls in the upper band.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    boundaries: [f64; 5],
}

impl Default for ThresholdTable {
    fn default() -> Self {
        ThresholdTable {
            boundaries: [0.0, 10.0, 15.0, 20.0, 28.0],
        }
    }
}

impl ThresholdTable {
    pub fn new(boundaries: [f64; 5]) -> Result<Self, MetadataError> {
        let increasing = boundaries.windows(2).all(|w| w[0] < w[1]);
        if !boundaries.iter().all(|b| b.is_finite()) || !increasing {
            return Err(MetadataError::InvalidThresholds { boundaries });
        }
        Ok(ThresholdTable { boundaries })
    }

    pub fn boundaries(&self) -> [f64; 5] {
        self.boundaries
    }

    /// Maps a finite temperature to its band; boundaries go to the upper band.
    pub fn bucket(&self, celsius: f64) -> Result<TemperatureBand, MetadataError> {
        if !celsius.is_finite() {
            return Err(MetadataError::NonFiniteTemperature { value: celsius });
        }
        let above = self.boundaries.iter().filter(|b| celsius >= **b).count();
        Ok(TemperatureBand::ALL[above])
    }

    /// Half-open interval `[lo, hi)` of band `band` clipped to `range`; the
    /// hottest band closes at `range.max`. Used when sampling a concrete
    /// temperature for a chosen band.
    pub fn band_interval(&self, band: TemperatureBand, range: &TemperatureRange) -> (f64, f64) {
        let idx = TemperatureBand::ALL.iter().position(|b| *b == band).unwrap();
        let lo = if idx == 0 { range.min } else { self.boundaries[idx - 1] };
        let hi = if idx == 5 { range.max } else { self.boundaries[idx] };
        (lo, hi)
    }
}

/// Discretizes a temperature reading against a threshold table.
pub fn bucket_temperature(
    celsius: f64,
    thresholds: &ThresholdTable,
) -> Result<TemperatureBand, MetadataError> {
    thresholds.bucket(celsius)
}

/// Closed plausibility interval for raw temperature readings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRange {
    pub min: f64,
    pub max: f64,
}

impl Default for TemperatureRange {
    fn default() -> Self {
        DEFAULT_TEMPERATURE_RANGE
    }
}

impl TemperatureRange {
    pub fn new(min: f64, max: f64) -> Result<Self, MetadataError> {
        if !min.is_finite() || !max.is_finite() || min >= max {
            return Err(MetadataError::InvalidRange { min, max });
        }
        Ok(TemperatureRange { min, max })
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.min && value <= self.max
    }

    pub fn check(&self, value: f64) -> Result<(), MetadataError> {
        if !value.is_finite() {
            return Err(MetadataError::NonFiniteTemperature { value });
        }
        if !self.contains(value) {
            return Err(MetadataError::TemperatureOutOfRange {
                value,
                min: self.min,
                max: self.max,
            });
        }
        Ok(())
    }
}

// ===== Prompt rendering =====

/// A rendered, non-empty prompt ready for a text encoder.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PromptString(String);

impl PromptString {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for PromptString {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

/// Renders the fixed prompt template. Distinct metadata tuples always yield
/// distinct prompts because each slot is filled with a distinct word.
pub fn render_prompt(
    species: &str,
    identity_token: &str,
    band: TemperatureBand,
    orientation: FaceOrientation,
    circadian: Circadian,
) -> Result<PromptString, MetadataError> {
    if species.is_empty() {
        return Err(MetadataError::EmptyPromptSlot { slot: "species" });
    }
    if identity_token.is_empty() {
        return Err(MetadataError::EmptyPromptSlot { slot: "identity" });
    }
    let text = PROMPT_TEMPLATE
        .replace("{species}", species)
        .replace("{identity}", identity_token)
        .replace("{band}", band.label())
        .replace("{face_orientation}", orientation.label())
        .replace("{circadian}", circadian.label());
    Ok(PromptString(text))
}

// ===== Sidecar parsing =====

/// Parse result: the metadata plus any unknown keys that were ignored.
#[derive(Debug, Clone, PartialEq)]
pub struct SidecarDocument {
    pub metadata: EnvironmentalMetadata,
    pub unknown_keys: Vec<String>,
}

/// Parses a JSON sidecar. Required keys are `temperature_celsius`,
/// `circadian`, and `face_orientation`; extra keys are reported back as
/// warnings rather than rejected. The temperature is validated first so an
/// implausible reading is reported even when other keys are absent.
pub fn parse_metadata_sidecar(
    bytes: &[u8],
    range: &TemperatureRange,
) -> Result<SidecarDocument, MetadataError> {
    let value: serde_json::Value =
        serde_json::from_slice(bytes).map_err(|e| MetadataError::MalformedSidecar {
            reason: e.to_string(),
        })?;
    let obj = value.as_object().ok_or_else(|| MetadataError::MalformedSidecar {
        reason: format!("expected an object, got {value}"),
    })?;

    let temperature_celsius = match obj.get("temperature_celsius") {
        Some(v) => v.as_f64().ok_or(MetadataError::InvalidValue {
            key: "temperature_celsius",
            value: v.to_string(),
            expected: "a number",
        })?,
        None => return Err(MetadataError::MissingKey { key: "temperature_celsius" }),
    };
    range.check(temperature_celsius)?;

    let circadian = match obj.get("circadian") {
        Some(v) => v
            .as_str()
            .and_then(Circadian::parse)
            .ok_or(MetadataError::InvalidValue {
                key: "circadian",
                value: v.to_string(),
                expected: "one of \"day\", \"night\"",
            })?,
        None => return Err(MetadataError::MissingKey { key: "circadian" }),
    };

    let face_orientation = match obj.get("face_orientation") {
        Some(v) => v.as_str().and_then(FaceOrientation::parse).ok_or(
            MetadataError::InvalidValue {
                key: "face_orientation",
                value: v.to_string(),
                expected: "one of \"front\", \"back\", \"left\", \"right\"",
            },
        )?,
        None => return Err(MetadataError::MissingKey { key: "face_orientation" }),
    };

    let known = ["temperature_celsius", "circadian", "face_orientation"];
    let unknown_keys: Vec<String> = obj
        .keys()
        .filter(|k| !known.contains(&k.as_str()))
        .cloned()
        .collect();

    Ok(SidecarDocument {
        metadata: EnvironmentalMetadata {
            temperature_celsius,
            circadian,
            face_orientation,
        },
        unknown_keys,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bucket_maps_known_temperatures() {
        let table = ThresholdTable::default();
        assert_eq!(table.bucket(-3.0).unwrap(), TemperatureBand::Freezing);
        assert_eq!(table.bucket(12.0).unwrap(), TemperatureBand::Chilly);
        assert_eq!(table.bucket(35.0).unwrap(), TemperatureBand::Hot);
    }

    #[test]
    fn bucket_sends_boundaries_to_the_upper_band() {
        let table = ThresholdTable::default();
        assert_eq!(table.bucket(0.0).unwrap(), TemperatureBand::Cold);
        assert_eq!(table.bucket(10.0).unwrap(), TemperatureBand::Chilly);
        assert_eq!(table.bucket(15.0).unwrap(), TemperatureBand::Cool);
        assert_eq!(table.bucket(20.0).unwrap(), TemperatureBand::Warm);
        assert_eq!(table.bucket(28.0).unwrap(), TemperatureBand::Hot);
    }

    #[test]
    fn bucket_rejects_non_finite_temperatures() {
        let table = ThresholdTable::default();
        assert!(matches!(
            table.bucket(f64::NAN),
            Err(MetadataError::NonFiniteTemperature { .. })
        ));
        assert!(matches!(
            table.bucket(f64::INFINITY),
            Err(MetadataError::NonFiniteTemperature { .. })
        ));
    }

    #[test]
    fn bucket_is_monotone_in_temperature() {
        let table = ThresholdTable::default();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..2000 {
            let a: f64 = rng.random_range(-40.0..60.0);
            let b: f64 = rng.random_range(-40.0..60.0);
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            assert!(table.bucket(lo).unwrap() <= table.bucket(hi).unwrap());
        }
    }

    #[test]
    fn custom_thresholds_shift_band_edges() {
        let table = ThresholdTable::new([-5.0, 0.0, 5.0, 10.0, 15.0]).unwrap();
        assert_eq!(table.bucket(-3.0).unwrap(), TemperatureBand::Cold);
        assert_eq!(table.bucket(12.0).unwrap(), TemperatureBand::Warm);
        assert_eq!(table.bucket(15.0).unwrap(), TemperatureBand::Hot);
    }

    #[test]
    fn thresholds_must_strictly_increase() {
        assert!(matches!(
            ThresholdTable::new([0.0, 10.0, 10.0, 20.0, 28.0]),
            Err(MetadataError::InvalidThresholds { .. })
        ));
        assert!(matches!(
            ThresholdTable::new([0.0, 10.0, f64::NAN, 20.0, 28.0]),
            Err(MetadataError::InvalidThresholds { .. })
        ));
    }

    #[test]
    fn band_intervals_tile_the_plausible_range() {
        let table = ThresholdTable::default();
        let range = TemperatureRange::default();
        let mut expected_lo = range.min;
        for band in TemperatureBand::ALL {
            let (lo, hi) = table.band_interval(band, &range);
            assert_eq!(lo, expected_lo);
            assert!(hi > lo);
            expected_lo = hi;
        }
        assert_eq!(expected_lo, range.max);
    }

    #[test]
    fn render_prompt_fills_every_slot() {
        let prompt = render_prompt(
            "deer",
            "X",
            TemperatureBand::Warm,
            FaceOrientation::Front,
            Circadian::Day,
        )
        .unwrap();
        assert_eq!(
            prompt.as_str(),
            "A photo of a deer X in warm temperature, with face direction front, \
             captured during the day."
        );
    }

    #[test]
    fn render_prompt_rejects_empty_slots() {
        let err = render_prompt(
            "",
            "X",
            TemperatureBand::Cold,
            FaceOrientation::Left,
            Circadian::Night,
        )
        .unwrap_err();
        assert_eq!(err, MetadataError::EmptyPromptSlot { slot: "species" });
        let err = render_prompt(
            "stoat",
            "",
            TemperatureBand::Cold,
            FaceOrientation::Left,
            Circadian::Night,
        )
        .unwrap_err();
        assert_eq!(err, MetadataError::EmptyPromptSlot { slot: "identity" });
    }

    #[test]
    fn distinct_metadata_tuples_render_distinct_prompts() {
        let mut seen = std::collections::HashSet::new();
        for band in TemperatureBand::ALL {
            for orientation in FaceOrientation::ALL {
                for circadian in Circadian::ALL {
                    let p = render_prompt("pukeko", "X", band, orientation, circadian).unwrap();
                    assert!(seen.insert(p.as_str().to_string()), "duplicate prompt: {p}");
                }
            }
        }
        assert_eq!(seen.len(), 6 * 4 * 2);
    }

    #[test]
    fn sidecar_round_trips_through_parse_and_render() {
        let doc = br#"{"temperature_celsius": 22.5, "circadian": "night", "face_orientation": "left"}"#;
        let parsed = parse_metadata_sidecar(doc, &TemperatureRange::default()).unwrap();
        assert!(parsed.unknown_keys.is_empty());
        let meta = parsed.metadata;
        assert_eq!(meta.temperature_celsius, 22.5);
        let band = bucket_temperature(meta.temperature_celsius, &ThresholdTable::default()).unwrap();
        let prompt =
            render_prompt("hare", "X", band, meta.face_orientation, meta.circadian).unwrap();
        assert!(prompt.as_str().contains("in warm temperature"));
        assert!(prompt.as_str().contains("during the night"));
    }

    #[test]
    fn sidecar_reports_unknown_keys_as_warnings() {
        let doc = br#"{"temperature_celsius": 1.0, "circadian": "day", "face_orientation": "back", "observer": "trap-7"}"#;
        let parsed = parse_metadata_sidecar(doc, &TemperatureRange::default()).unwrap();
        assert_eq!(parsed.unknown_keys, vec!["observer".to_string()]);
    }

    #[test]
    fn sidecar_missing_key_names_the_key() {
        let doc = br#"{"temperature_celsius": 1.0, "face_orientation": "back"}"#;
        let err = parse_metadata_sidecar(doc, &TemperatureRange::default()).unwrap_err();
        assert_eq!(err, MetadataError::MissingKey { key: "circadian" });
    }

    #[test]
    fn sidecar_implausible_temperature_is_a_range_error() {
        let doc = br#"{"temperature_celsius": 99}"#;
        let err = parse_metadata_sidecar(doc, &TemperatureRange::default()).unwrap_err();
        assert!(matches!(
            err,
            MetadataError::TemperatureOutOfRange { value, .. } if value == 99.0
        ));
    }

    #[test]
    fn sidecar_rejects_invalid_enum_values_and_non_json() {
        let doc = br#"{"temperature_celsius": 1.0, "circadian": "dusk", "face_orientation": "back"}"#;
        let err = parse_metadata_sidecar(doc, &TemperatureRange::default()).unwrap_err();
        assert!(matches!(err, MetadataError::InvalidValue { key: "circadian", .. }));

        let err = parse_metadata_sidecar(b"not json", &TemperatureRange::default()).unwrap_err();
        assert!(matches!(err, MetadataError::MalformedSidecar { .. }));

        let err = parse_metadata_sidecar(b"[1, 2]", &TemperatureRange::default()).unwrap_err();
        assert!(matches!(err, MetadataError::MalformedSidecar { .. }));
    }

    #[test]
    fn custom_range_widens_accepted_temperatures() {
        let doc = br#"{"temperature_celsius": 75.0, "circadian": "day", "face_orientation": "front"}"#;
        assert!(parse_metadata_sidecar(doc, &TemperatureRange::default()).is_err());
        let wide = TemperatureRange::new(-60.0, 90.0).unwrap();
        assert!(parse_metadata_sidecar(doc, &wide).is_ok());
    }

    #[test]
    fn metadata_serializes_with_lowercase_enum_labels() {
        let meta = EnvironmentalMetadata {
            temperature_celsius: -2.0,
            circadian: Circadian::Night,
            face_orientation: FaceOrientation::Right,
        };
        let json = serde_json::to_string(&meta).unwrap();
        assert!(json.contains("\"circadian\":\"night\""));
        assert!(json.contains("\"face_orientation\":\"right\""));
        let parsed = parse_metadata_sidecar(json.as_bytes(), &TemperatureRange::default()).unwrap();
        assert_eq!(parsed.metadata, meta);
    }

    #[test]
    fn random_accepted_sidecars_always_render() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let table = ThresholdTable::default();
        let range = TemperatureRange::default();
        for _ in 0..500 {
            let t: f64 = rng.random_range(range.min..=range.max);
            let circadian = Circadian::ALL[rng.random_range(0..2)];
            let orientation = FaceOrientation::ALL[rng.random_range(0..4)];
            let doc = serde_json::to_vec(&EnvironmentalMetadata {
                temperature_celsius: t,
                circadian,
                face_orientation: orientation,
            })
            .unwrap();
            let parsed = parse_metadata_sidecar(&doc, &range).unwrap();
            let band = bucket_temperature(parsed.metadata.temperature_celsius, &table).unwrap();
            render_prompt("wallaby", "X", band, orientation, circadian).unwrap();
        }
    }
}
