//! Image and text encoders producing token embeddings, plus the on-disk
//! embedding dump format.
//!
//! The built-in encoders are deterministic "toy" encoders meant for desk
//! experiments: they hash their input into a fixed-size vector and apply a
//! seeded random projection to a small grid of tokens. Pretrained
//! vision-language encoders plug in behind the same [`ImageEncoder`] /
//! [`TextEncoder`] traits but are not bundled here.

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::binio::{read_blob, write_blob};
use crate::math::gaussian_matrix;

/// Hash-bucket dimension for raw image bytes fed to the toy image encoder.
pub const TOY_IMAGE_BYTE_BUCKETS: usize = 64;
/// Hash-bucket dimension for text n-gram counts in the toy text encoder.
pub const TOY_TEXT_BUCKETS: usize = 256;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("encoder kind {kind:?} is not bundled; supply an implementation for weights {weights_ref:?}")]
    UnsupportedKind {
        kind: EncoderKind,
        weights_ref: Option<String>,
    },
    #[error("undecodable image: {reason}")]
    UndecodableImage { reason: String },
    #[error("prompt must contain at least one token")]
    EmptyPrompt,
    #[error("feature has dimension {got}, encoder expects {expected}")]
    FeatureDimensionMismatch { expected: usize, got: usize },
    #[error("invalid encoder spec: {reason}")]
    InvalidSpec { reason: String },
    #[error("batch item {index}")]
    Item {
        index: usize,
        #[source]
        source: Box<EncoderError>,
    },
    #[error("{path}: {reason}")]
    Dump { path: std::path::PathBuf, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderKind {
    Toy,
    PretrainedVlm,
}

/// How a token grid is collapsed into a single embedding vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PoolingMode {
    Mean,
    FirstToken,
}

impl PoolingMode {
    pub fn pool(self, tokens: &Array2<f64>) -> Array1<f64> {
        match self {
            PoolingMode::Mean => crate::math::mean_rows(tokens),
            PoolingMode::FirstToken => tokens.row(0).to_owned(),
        }
    }

    /// Distributes a gradient on the pooled vector back over `rows` token
    /// rows (the adjoint of [`PoolingMode::pool`]).
    pub fn unpool_gradient(self, d_pooled: &Array1<f64>, rows: usize) -> Array2<f64> {
        let mut out = Array2::zeros((rows, d_pooled.len()));
        match self {
            PoolingMode::Mean => {
                for mut row in out.rows_mut() {
                    row.assign(&(d_pooled / rows as f64));
                }
            }
            PoolingMode::FirstToken => {
                out.row_mut(0).assign(d_pooled);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderSpec {
    pub kind: EncoderKind,
    /// Embedding dimension `d` of every token.
    pub dim: usize,
    /// Number of image tokens per image.
    pub image_tokens: usize,
    /// Number of text tokens per prompt.
    pub text_tokens: usize,
    pub pooling: PoolingMode,
    pub seed: u64,
    /// Reference to external weights; only meaningful for pretrained kinds.
    pub weights_ref: Option<String>,
}

impl Default for EncoderSpec {
    fn default() -> Self {
        EncoderSpec {
            kind: EncoderKind::Toy,
            dim: 16,
            image_tokens: 4,
            text_tokens: 4,
            pooling: PoolingMode::Mean,
            seed: 0,
            weights_ref: None,
        }
    }
}

impl EncoderSpec {
    fn validate(&self) -> Result<(), EncoderError> {
        if self.dim == 0 || self.image_tokens == 0 || self.text_tokens == 0 {
            return Err(EncoderError::InvalidSpec {
                reason: "dim, image_tokens, and text_tokens must be positive".into(),
            });
        }
        Ok(())
    }
}

/// A grid of token embeddings plus its pooled vector. The pooled vector is
/// always derived from the tokens by the pooling mode given at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenEmbedding {
    pub tokens: Array2<f64>,
    pub pooled: Array1<f64>,
}

impl TokenEmbedding {
    pub fn new(tokens: Array2<f64>, pooling: PoolingMode) -> Self {
        let pooled = pooling.pool(&tokens);
        TokenEmbedding { tokens, pooled }
    }
}

pub type ImageTokens = TokenEmbedding;
pub type TextTokens = TokenEmbedding;

/// Input to an image encoder: raw file bytes or a precomputed appearance
/// feature (synthetic corpora store features instead of pixels).
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Bytes(Vec<u8>),
    Feature(Vec<f64>),
}

pub trait ImageEncoder {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, source: &ImageSource) -> Result<ImageTokens, EncoderError>;
}

pub trait TextEncoder {
    fn spec(&self) -> &EncoderSpec;
    fn encode(&self, text: &str) -> Result<TextTokens, EncoderError>;
}

/// Encodes a batch, wrapping any failure with the offending item index.
pub fn encode_images(
    encoder: &dyn ImageEncoder,
    sources: &[ImageSource],
) -> Result<Vec<ImageTokens>, EncoderError> {
    sources
        .iter()
        .enumerate()
        .map(|(index, s)| {
            encoder.encode(s).map_err(|source| EncoderError::Item {
                index,
                source: Box::new(source),
            })
        })
        .collect()
}

/// Encodes a batch of prompts, wrapping failures with the item index.
pub fn encode_texts(
    encoder: &dyn TextEncoder,
    texts: &[&str],
) -> Result<Vec<TextTokens>, EncoderError> {
    texts
        .iter()
        .enumerate()
        .map(|(index, t)| {
            encoder.encode(t).map_err(|source| EncoderError::Item {
                index,
                source: Box::new(source),
            })
        })
        .collect()
}

/// Scales a vector to unit length. Zero vectors pass through unchanged so
/// degenerate inputs stay degenerate rather than becoming NaN.
fn l2_normalized(mut v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 1e-12 {
        for x in &mut v {
            *x /= norm;
        }
    }
    v
}

/// Stable FNV-1a hash so bucket assignments never depend on platform or
/// standard library internals.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for b in bytes {
        hash ^= u64::from(*b);
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ===== Toy image encoder =====

/// Deterministic image encoder: the input is reduced to a fixed-size vector
/// (a stored feature, or hashed byte counts) and projected by a seeded
/// Gaussian matrix into `image_tokens` tokens of dimension `dim`.
#[derive(Debug, Clone)]
pub struct ToyImageEncoder {
    spec: EncoderSpec,
    input_dim: usize,
    projection: Array2<f64>,
}

impl ToyImageEncoder {
    /// `input_dim` is the dimension of stored features this encoder accepts;
    /// raw bytes are hashed into the same dimension.
    pub fn new(spec: EncoderSpec, input_dim: usize) -> Result<Self, EncoderError> {
        spec.validate()?;
        if input_dim == 0 {
            return Err(EncoderError::InvalidSpec {
                reason: "input_dim must be positive".into(),
            });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(1);
        let rows = spec.image_tokens * spec.dim;
        // With unit-norm inputs, dividing by sqrt(dim) gives token rows of
        // roughly unit length regardless of the input dimension.
        let projection = gaussian_matrix(rows, input_dim, &mut rng) / (spec.dim as f64).sqrt();
        Ok(ToyImageEncoder {
            spec,
            input_dim,
            projection,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    /// Reduces an image source to the encoder's input vector, normalized to
    /// unit length so image and text tokens come out at comparable scales.
    pub fn input_vector(&self, source: &ImageSource) -> Result<Vec<f64>, EncoderError> {
        match source {
            ImageSource::Feature(f) => {
                if f.len() != self.input_dim {
                    return Err(EncoderError::FeatureDimensionMismatch {
                        expected: self.input_dim,
                        got: f.len(),
                    });
                }
                Ok(l2_normalized(f.clone()))
            }
            ImageSource::Bytes(bytes) => {
                if bytes.is_empty() {
                    return Err(EncoderError::UndecodableImage {
                        reason: "empty image bytes".into(),
                    });
                }
                let mut counts = vec![0.0; self.input_dim];
                for window in bytes.windows(2) {
                    counts[(fnv1a(window) % self.input_dim as u64) as usize] += 1.0;
                }
                counts[(fnv1a(&bytes[bytes.len() - 1..]) % self.input_dim as u64) as usize] += 1.0;
                Ok(l2_normalized(counts))
            }
        }
    }

    /// Projects an input vector to the token grid. Split out from
    /// [`ImageEncoder::encode`] so training can cache input vectors and
    /// differentiate through the projection when fine-tuning.
    pub fn encode_from_input(&self, input: &[f64]) -> ImageTokens {
        let flat = self.projection.dot(&Array1::from(input.to_vec()));
        let tokens = flat
            .into_shape_with_order((self.spec.image_tokens, self.spec.dim))
            .expect("projection rows match token grid");
        TokenEmbedding::new(tokens, self.spec.pooling)
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Array2<f64> {
        &mut self.projection
    }
}

impl ImageEncoder for ToyImageEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, source: &ImageSource) -> Result<ImageTokens, EncoderError> {
        Ok(self.encode_from_input(&self.input_vector(source)?))
    }
}

// ===== Toy text encoder =====

/// Deterministic text encoder: word unigram and bigram counts are hashed
/// into [`TOY_TEXT_BUCKETS`] buckets and projected by a seeded Gaussian
/// matrix into `text_tokens` tokens of dimension `dim`. Prompts differing in
/// any slot word map to different count vectors, hence (almost surely under
/// the random projection) different embeddings.
#[derive(Debug, Clone)]
pub struct ToyTextEncoder {
    spec: EncoderSpec,
    buckets: usize,
    projection: Array2<f64>,
}

impl ToyTextEncoder {
    pub fn new(spec: EncoderSpec) -> Result<Self, EncoderError> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(2);
        let buckets = TOY_TEXT_BUCKETS;
        let rows = spec.text_tokens * spec.dim;
        // Same scaling as the image projection: unit-norm inputs in, token
        // rows of roughly unit length out.
        let projection = gaussian_matrix(rows, buckets, &mut rng) / (spec.dim as f64).sqrt();
        Ok(ToyTextEncoder {
            spec,
            buckets,
            projection,
        })
    }

    pub fn buckets(&self) -> usize {
        self.buckets
    }

    /// Hashed n-gram count vector for a prompt.
    pub fn input_vector(&self, text: &str) -> Result<Vec<f64>, EncoderError> {
        let words: Vec<String> = text
            .split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty())
            .map(|w| w.to_lowercase())
            .collect();
        if words.is_empty() {
            return Err(EncoderError::EmptyPrompt);
        }
        let mut counts = vec![0.0; self.buckets];
        let mut bump = |gram: &str| {
            counts[(fnv1a(gram.as_bytes()) % self.buckets as u64) as usize] += 1.0;
        };
        for w in &words {
            bump(w);
        }
        for pair in words.windows(2) {
            bump(&format!("{} {}", pair[0], pair[1]));
        }
        Ok(l2_normalized(counts))
    }

    /// Projects a count vector to the token grid; see
    /// [`ToyImageEncoder::encode_from_input`] for why this is public.
    pub fn encode_from_input(&self, input: &[f64]) -> TextTokens {
        let flat = self.projection.dot(&Array1::from(input.to_vec()));
        let tokens = flat
            .into_shape_with_order((self.spec.text_tokens, self.spec.dim))
            .expect("projection rows match token grid");
        TokenEmbedding::new(tokens, self.spec.pooling)
    }

    pub fn projection(&self) -> &Array2<f64> {
        &self.projection
    }

    pub fn projection_mut(&mut self) -> &mut Array2<f64> {
        &mut self.projection
    }
}

impl TextEncoder for ToyTextEncoder {
    fn spec(&self) -> &EncoderSpec {
        &self.spec
    }

    fn encode(&self, text: &str) -> Result<TextTokens, EncoderError> {
        Ok(self.encode_from_input(&self.input_vector(text)?))
    }
}

/// Builds the encoder pair described by a spec. Pretrained kinds are an
/// integration point, not bundled weights, so they fail here; implement the
/// encoder traits directly to plug one in.
pub fn build_toy_encoders(
    spec: &EncoderSpec,
    image_input_dim: usize,
) -> Result<(ToyImageEncoder, ToyTextEncoder), EncoderError> {
    match spec.kind {
        EncoderKind::Toy => Ok((
            ToyImageEncoder::new(spec.clone(), image_input_dim)?,
            ToyTextEncoder::new(spec.clone())?,
        )),
        EncoderKind::PretrainedVlm => Err(EncoderError::UnsupportedKind {
            kind: spec.kind,
            weights_ref: spec.weights_ref.clone(),
        }),
    }
}

// ===== Embedding dumps =====

/// Header of an embedding dump file; the payload is `count` rows of `dim`
/// little-endian `f32` values in split-manifest record order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingDumpHeader {
    pub dim: usize,
    pub count: usize,
    pub pooling: PoolingMode,
    pub species: String,
    /// Which split side the rows came from, e.g. "gallery" or "query".
    pub split: String,
    /// Record stems, one per row, in row order.
    pub stems: Vec<String>,
}

pub fn dump_embeddings(
    path: &std::path::Path,
    header: &EmbeddingDumpHeader,
    rows: &[Vec<f64>],
) -> Result<(), EncoderError> {
    let dump_err = |reason: String| EncoderError::Dump {
        path: path.to_path_buf(),
        reason,
    };
    if rows.len() != header.count || header.stems.len() != header.count {
        return Err(dump_err(format!(
            "header promises {} rows, got {} rows and {} stems",
            header.count,
            rows.len(),
            header.stems.len()
        )));
    }
    if rows.iter().any(|r| r.len() != header.dim) {
        return Err(dump_err("row dimension does not match header".into()));
    }
    let mut header_json =
        serde_json::to_value(header).expect("header serialization cannot fail");
    header_json["format"] = "embedding-dump".into();
    header_json["version"] = 1.into();
    let values: Vec<f64> = rows.iter().flatten().copied().collect();
    write_blob(path, &header_json, &values).map_err(|e| dump_err(e.to_string()))
}

pub fn load_embeddings(
    path: &std::path::Path,
) -> Result<(EmbeddingDumpHeader, Vec<Vec<f64>>), EncoderError> {
    let dump_err = |reason: String| EncoderError::Dump {
        path: path.to_path_buf(),
        reason,
    };
    let (header_json, values) = read_blob(path).map_err(|e| dump_err(e.to_string()))?;
    if header_json["format"] != "embedding-dump" {
        return Err(dump_err(format!(
            "unexpected format {}",
            header_json["format"]
        )));
    }
    let header: EmbeddingDumpHeader =
        serde_json::from_value(header_json).map_err(|e| dump_err(e.to_string()))?;
    if values.len() != header.count * header.dim {
        return Err(dump_err(format!(
            "payload holds {} values, expected {}x{}",
            values.len(),
            header.count,
            header.dim
        )));
    }
    let rows = values.chunks(header.dim).map(<[f64]>::to_vec).collect();
    Ok((header, rows))
}
