//! Metadata-aware embedding fusion for animal re-identification.
//!
//! The crate builds re-identification pipelines that fuse environmental
//! metadata (temperature, circadian phase, face orientation) into visual
//! embeddings. Metadata is rendered into a natural-language prompt, encoded
//! into text tokens, and injected into image tokens through a gated
//! cross-attention adapter. Training combines an identity classification
//! loss, a batch-hard triplet loss, and a text-to-image attention alignment
//! loss; evaluation follows standard retrieval protocols (mAP, CMC) over
//! gallery/query splits.
//!
//! Module map:
//! - [`metadata`]: temperature bands, prompt rendering, sidecar parsing
//! - [`dataset`]: manifests, filename parsing, splits, synthetic corpora
//! - [`encoders`]: toy deterministic image/text encoders and embedding dumps
//! - [`adapter`]: feature experts, gated cross-attention, fusion, checkpoints
//! - [`objectives`]: identity, triplet, and attention alignment losses
//! - [`training`]: PK sampling, optimizer, training loop, run logs
//! - [`eval`]: distance matrices, mAP/CMC, run aggregation, 2-D projection

pub mod adapter;
pub(crate) mod binio;
pub mod dataset;
pub mod encoders;
pub mod eval;
pub(crate) mod math;
pub mod metadata;
pub mod objectives;
pub mod training;
