//! The training loop: data assembly, PK-batched optimization of the fusion
//! adapter, per-epoch checkpoints, a line-delimited run log, and a final
//! retrieval evaluation whose embeddings are also dumped to disk.
//!
//! Every artifact this module writes is byte-deterministic for a given
//! config and data: seeded sampling, no timestamps, atomic writes, and
//! embeddings quantized to f32 before both dumping and evaluating, so an
//! offline evaluation of the dumps reproduces the in-training numbers
//! exactly.

mod model;
mod optimizer;
mod sampler;

pub use model::{embed_visual_only, BatchForward, ModelGrads, ReidModel, SampleInput};
pub use optimizer::{cosine_lr, AdamW, AdamWConfig};
pub use sampler::{group_by_label, sample_pk_batch, PkBatch};

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapter::{save_checkpoint, AdapterConfig, AdapterError, GateMode};
use crate::dataset::{DatasetError, DatasetManifest, FeatureStore, SplitManifest};
use crate::encoders::{
    dump_embeddings, EmbeddingDumpHeader, EncoderError, EncoderSpec, ImageSource,
};
use crate::eval::{evaluate_retrieval, EvalError, EvalProtocol, EvalReport, RetrievalSet};
use crate::metadata::{render_prompt, MetadataError, PromptString, ThresholdTable};
use crate::objectives::{total_loss, BatchOutputs, LossConfig, ObjectiveError};

/// Placeholder filling the identity slot of every prompt, so the text the
/// model reads never leaks the label it is trained to predict.
pub const DEFAULT_IDENTITY_TOKEN: &str = "X";

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {reason}")]
    InvalidConfig { reason: String },
    #[error("training needs at least {needed} identities, got {got}")]
    TooFewIdentities { needed: usize, got: usize },
    #[error("batch is empty")]
    EmptyBatch,
    #[error("the training set is empty")]
    EmptyTrainSet,
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Adapter(#[from] AdapterError),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error("{}", path.display())]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

/// Whether encoder projections receive gradient updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum EncoderMode {
    #[default]
    Frozen,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub adapter: AdapterConfig,
    pub encoder: EncoderSpec,
    pub loss: LossConfig,
    pub optimizer: AdamWConfig,
    pub epochs: usize,
    pub steps_per_epoch: usize,
    /// Identities per batch.
    pub batch_p: usize,
    /// Images per identity per batch.
    pub batch_k: usize,
    pub learning_rate: f64,
    /// Encoder learning rate as a fraction of the main rate.
    pub encoder_lr_factor: f64,
    pub encoder_mode: EncoderMode,
    /// When false, the whole metadata path is disabled: no prompts, the
    /// gate is forced off, and the alignment loss weight becomes zero.
    pub use_metadata: bool,
    /// Forces the fusion gate to zero while keeping the metadata inputs and
    /// the alignment loss; isolates the gate's contribution.
    pub force_gate_off: bool,
    pub identity_token: String,
    /// Run seed; the adapter, encoder, and sampler seeds are all offset by
    /// it, so changing only this value re-randomizes the whole run.
    pub seed: u64,
    pub eval: EvalProtocol,
    pub eval_max_rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adapter: AdapterConfig::default(),
            encoder: EncoderSpec::default(),
            loss: LossConfig::default(),
            optimizer: AdamWConfig::default(),
            epochs: 5,
            steps_per_epoch: 50,
            batch_p: 4,
            batch_k: 4,
            learning_rate: 3.5e-4,
            encoder_lr_factor: 0.1,
            encoder_mode: EncoderMode::Frozen,
            use_metadata: true,
            force_gate_off: false,
            identity_token: DEFAULT_IDENTITY_TOKEN.into(),
            seed: 0,
            eval: EvalProtocol::default(),
            eval_max_rank: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let invalid = |reason: String| TrainError::InvalidConfig { reason };
        if self.epochs > 0 && self.steps_per_epoch == 0 {
            return Err(invalid("steps_per_epoch must be positive".into()));
        }
        if self.batch_p < 2 || self.batch_k < 2 {
            return Err(invalid(format!(
                "PK batches need p >= 2 and k >= 2, got p = {}, k = {}",
                self.batch_p, self.batch_k
            )));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(invalid("learning_rate must be positive".into()));
        }
        if !(self.encoder_lr_factor.is_finite() && self.encoder_lr_factor >= 0.0) {
            return Err(invalid("encoder_lr_factor must be non-negative".into()));
        }
        if self.eval_max_rank == 0 {
            return Err(invalid("eval_max_rank must be positive".into()));
        }
        if self.identity_token.is_empty() {
            return Err(invalid("identity_token must not be empty".into()));
        }
        self.loss.validate()?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self, TrainError> {
        let config: TrainConfig =
            toml::from_str(text).map_err(|e| TrainError::InvalidConfig {
                reason: e.to_string(),
            })?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let text = std::fs::read_to_string(path).map_err(|source| TrainError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_toml(&text)
    }

    /// The loss config actually used: disabling metadata zeroes the
    /// alignment weight.
    fn effective_loss(&self) -> LossConfig {
        let mut loss = self.loss;
        if !self.use_metadata {
            loss.weight_attention = 0.0;
        }
        loss
    }

    fn gate_mode(&self) -> GateMode {
        if self.use_metadata && !self.force_gate_off {
            GateMode::Learned
        } else {
            GateMode::ForcedOff
        }
    }
}

// ===== Data assembly =====

/// One sample ready for training or evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub stem: String,
    pub species: String,
    /// Original per-species identity.
    pub identity: u32,
    /// Training label, unique across species.
    pub label: u32,
    /// Dense class index for the identity head; zero for eval items.
    pub class_index: usize,
    pub camera: String,
    pub source: ImageSource,
    pub prompt: PromptString,
}

/// Assembled train/gallery/query sets.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub train: Vec<TrainItem>,
    pub gallery: Vec<TrainItem>,
    pub query: Vec<TrainItem>,
    pub num_classes: usize,
}

fn build_item(
    record: &crate::dataset::ImageRecord,
    features: Option<&FeatureStore>,
    identity_token: &str,
    thresholds: &ThresholdTable,
) -> Result<TrainItem, TrainError> {
    let stem = record.stem();
    let source = match features {
        Some(store) => ImageSource::Feature(store.require(&stem)?.to_vec()),
        None => {
            let bytes =
                std::fs::read(&record.image_path).map_err(|source| TrainError::Io {
                    path: record.image_path.clone(),
                    source,
                })?;
            ImageSource::Bytes(bytes)
        }
    };
    let band = thresholds.bucket(record.metadata.temperature_celsius)?;
    let prompt = render_prompt(
        &record.species,
        identity_token,
        band,
        record.metadata.face_orientation,
        record.metadata.circadian,
    )?;
    Ok(TrainItem {
        stem,
        species: record.species.clone(),
        identity: record.identity,
        label: record.identity,
        class_index: 0,
        camera: record.camera_id.clone(),
        source,
        prompt,
    })
}

impl TrainingData {
    /// Assembles data for one species from its manifest and split. Class
    /// indices are dense over the training identities in sorted order.
    pub fn from_split(
        manifest: &DatasetManifest,
        split: &SplitManifest,
        features: Option<&FeatureStore>,
        identity_token: &str,
    ) -> Result<Self, TrainError> {
        let resolved = split.resolve(manifest)?;
        let thresholds = ThresholdTable::default();
        let build_set = |indices: &[usize]| -> Result<Vec<TrainItem>, TrainError> {
            indices
                .iter()
                .map(|&i| build_item(&manifest.records()[i], features, identity_token, &thresholds))
                .collect()
        };
        let mut train = build_set(&resolved.train)?;
        let gallery = build_set(&resolved.gallery)?;
        let query = build_set(&resolved.query)?;
        let mut classes: Vec<u32> = train.iter().map(|item| item.identity).collect();
        classes.sort_unstable();
        classes.dedup();
        for item in &mut train {
            item.class_index = classes.binary_search(&item.identity).expect("identity present");
        }
        Ok(TrainingData {
            train,
            gallery,
            query,
            num_classes: classes.len().max(1),
        })
    }

    /// Assembles leave-one-species-out data: training items come from every
    /// non-target manifest (with labels remapped to stay unique across
    /// species), evaluation from the target's gallery/query split.
    pub fn from_lodo(
        train_manifests: &[&DatasetManifest],
        target: &DatasetManifest,
        eval_split: &SplitManifest,
        identity_token: &str,
    ) -> Result<Self, TrainError> {
        if train_manifests.is_empty() {
            return Err(TrainError::EmptyTrainSet);
        }
        let resolved = eval_split.resolve(target)?;
        let thresholds = ThresholdTable::default();
        let mut train = Vec::new();
        let mut class_keys: Vec<(String, u32)> = Vec::new();
        let mut ordered: Vec<&DatasetManifest> = train_manifests.to_vec();
        ordered.sort_by(|a, b| a.species().cmp(b.species()));
        for manifest in &ordered {
            for record in manifest.records() {
                let item = build_item(record, None, identity_token, &thresholds)?;
                class_keys.push((item.species.clone(), item.identity));
                train.push(item);
            }
        }
        class_keys.sort();
        class_keys.dedup();
        for item in &mut train {
            let key = (item.species.clone(), item.identity);
            let class = class_keys.binary_search(&key).expect("key present");
            item.class_index = class;
            item.label = class as u32;
        }
        let build_set = |indices: &[usize]| -> Result<Vec<TrainItem>, TrainError> {
            indices
                .iter()
                .map(|&i| build_item(&target.records()[i], None, identity_token, &thresholds))
                .collect()
        };
        Ok(TrainingData {
            train,
            gallery: build_set(&resolved.gallery)?,
            query: build_set(&resolved.query)?,
            num_classes: class_keys.len().max(1),
        })
    }
}

// ===== Run artifacts =====

/// One run-log line; the log is line-delimited JSON with no timestamps so
/// repeated runs are byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_total: f64,
    pub mean_identity: f64,
    pub mean_triplet: f64,
    pub mean_attention: f64,
    pub mean_gamma: f64,
    /// Learning rate at the last step of the epoch.
    pub learning_rate: f64,
}

/// What a finished run returns, beyond its on-disk artifacts.
#[derive(Debug)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    pub report: Option<EvalReport>,
    pub final_checkpoint: PathBuf,
}

fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join(format!("checkpoint-epoch-{epoch:03}.ckpt"))
}

fn save_model_checkpoint(
    model: &ReidModel,
    config: &TrainConfig,
    epoch: usize,
    path: &Path,
) -> Result<(), TrainError> {
    let meta = serde_json::json!({
        "epoch": epoch,
        "num_classes": model.num_classes,
        "config": serde_json::to_value(config).expect("config serializes"),
    });
    save_checkpoint(path, meta, &model.named_tensors())?;
    Ok(())
}

/// Quantizes every value through f32, the artifact precision. Applied to
/// embeddings before both dumping and evaluating so the two agree exactly.
fn quantize(rows: &mut ndarray::Array2<f64>) {
    rows.mapv_inplace(|v| v as f32 as f64);
}

fn dump_split_embeddings(
    path: &Path,
    items: &[TrainItem],
    rows: &ndarray::Array2<f64>,
    split: &str,
) -> Result<(), TrainError> {
    let header = EmbeddingDumpHeader {
        dim: rows.ncols(),
        count: rows.nrows(),
        pooling: crate::encoders::PoolingMode::Mean,
        species: items.first().map(|i| i.species.clone()).unwrap_or_default(),
        split: split.to_string(),
        stems: items.iter().map(|i| i.stem.clone()).collect(),
    };
    let row_vecs: Vec<Vec<f64>> = rows.rows().into_iter().map(|r| r.to_vec()).collect();
    dump_embeddings(path, &header, &row_vecs)?;
    Ok(())
}

/// Trains the model on `data.train`, writing per-epoch checkpoints, a run
/// log, and (when the data has gallery and query sets) embedding dumps plus
/// an evaluation report into `out_dir`.
pub fn run_training(
    config: &TrainConfig,
    data: &TrainingData,
    out_dir: &Path,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    std::fs::create_dir_all(out_dir).map_err(|source| TrainError::Io {
        path: out_dir.to_path_buf(),
        source,
    })?;

    let image_input_dim = match &data.train[0].source {
        ImageSource::Feature(f) => f.len(),
        ImageSource::Bytes(_) => crate::encoders::TOY_IMAGE_BYTE_BUCKETS,
    };
    // The run seed shifts every component seed so that re-running with a new
    // seed changes initialization and sampling together.
    let mut adapter_config = config.adapter;
    adapter_config.seed = adapter_config.seed.wrapping_add(config.seed);
    let mut encoder_spec = config.encoder.clone();
    encoder_spec.seed = encoder_spec.seed.wrapping_add(config.seed);
    let mut model = ReidModel::new(
        adapter_config,
        &encoder_spec,
        image_input_dim,
        data.num_classes,
    )?;

    let use_metadata = config.use_metadata;
    let prepare_set = |model: &ReidModel, items: &[TrainItem]| -> Result<Vec<SampleInput>, TrainError> {
        items
            .iter()
            .map(|item| {
                let prompt = use_metadata.then_some(item.prompt.as_str());
                model.prepare_input(&item.source, prompt)
            })
            .collect()
    };
    let train_inputs = prepare_set(&model, &data.train)?;
    let labels: Vec<u32> = data.train.iter().map(|item| item.label).collect();
    let class_labels: Vec<usize> = data.train.iter().map(|item| item.class_index).collect();
    let groups = group_by_label(&labels);
    if groups.len() < config.batch_p {
        return Err(TrainError::TooFewIdentities {
            needed: config.batch_p,
            got: groups.len(),
        });
    }

    let loss_config = config.effective_loss();
    let gate_mode = config.gate_mode();
    let finetune = config.encoder_mode == EncoderMode::Finetune;
    let mut optimizer = AdamW::new(config.optimizer);
    let mut sampler_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sampler_rng.set_stream(10);
    let total_steps = (config.epochs * config.steps_per_epoch) as u64;

    let initial_path = checkpoint_path(out_dir, 0);
    save_model_checkpoint(&model, config, 0, &initial_path)?;

    let mut epoch_logs: Vec<EpochLog> = Vec::with_capacity(config.epochs);
    let mut final_checkpoint = initial_path;
    let mut global_step = 0u64;
    for epoch in 1..=config.epochs {
        let mut sums = (0.0, 0.0, 0.0, 0.0, 0.0);
        let mut last_lr = 0.0;
        for _ in 0..config.steps_per_epoch {
            let batch = sample_pk_batch(&groups, config.batch_p, config.batch_k, &mut sampler_rng)?;
            let batch_inputs: Vec<&SampleInput> =
                batch.indices.iter().map(|&i| &train_inputs[i]).collect();
            let batch_classes: Vec<usize> =
                batch.indices.iter().map(|&i| class_labels[i]).collect();
            let forward = model.forward_batch(&batch_inputs, gate_mode)?;
            let losses = total_loss(
                &loss_config,
                &BatchOutputs {
                    logits: &forward.logits,
                    embeddings: &forward.pooled_image,
                    text_embeddings: &forward.pooled_text,
                    class_labels: &batch_classes,
                    identity_labels: &batch.labels,
                },
            )?;
            let grads = model.backward_batch(
                &batch_inputs,
                &forward,
                &losses.d_logits,
                &losses.d_embeddings,
                &losses.d_text_embeddings,
                finetune,
            );
            let lr = cosine_lr(config.learning_rate, global_step, total_steps);
            optimizer.begin_step();
            {
                let grad_tensors = grads.named_tensors();
                for (index, (name, param)) in model.named_tensors_mut().into_iter().enumerate() {
                    let (grad_name, grad) = grad_tensors[index];
                    debug_assert_eq!(name, grad_name);
                    let is_encoder = name.starts_with("encoder_");
                    if is_encoder && !finetune {
                        continue;
                    }
                    let tensor_lr = if is_encoder { lr * config.encoder_lr_factor } else { lr };
                    optimizer.apply(name, param, grad, tensor_lr);
                }
            }
            global_step += 1;
            last_lr = lr;
            sums.0 += losses.total;
            sums.1 += losses.identity;
            sums.2 += losses.triplet;
            sums.3 += losses.attention;
            sums.4 += forward.mean_gamma;
        }
        let steps = config.steps_per_epoch as f64;
        epoch_logs.push(EpochLog {
            epoch,
            mean_total: sums.0 / steps,
            mean_identity: sums.1 / steps,
            mean_triplet: sums.2 / steps,
            mean_attention: sums.3 / steps,
            mean_gamma: sums.4 / steps,
            learning_rate: last_lr,
        });
        let path = checkpoint_path(out_dir, epoch);
        save_model_checkpoint(&model, config, epoch, &path)?;
        final_checkpoint = path;
    }

    // Run log, one JSON line per epoch (empty file for zero epochs).
    let runlog_path = out_dir.join("runlog.jsonl");
    let mut log_bytes = Vec::new();
    for line in &epoch_logs {
        serde_json::to_writer(&mut log_bytes, line).expect("log line serializes");
        log_bytes.push(b'\n');
    }
    let _ = log_bytes.flush();
    crate::binio::atomic_write(&runlog_path, &log_bytes).map_err(|source| TrainError::Io {
        path: runlog_path,
        source,
    })?;

    // Final evaluation on the held-out identities, through the f32
    // round-trip that the dump format imposes.
    let report = if !data.gallery.is_empty() && !data.query.is_empty() {
        let gallery_inputs = prepare_set(&model, &data.gallery)?;
        let query_inputs = prepare_set(&model, &data.query)?;
        let gallery_refs: Vec<&SampleInput> = gallery_inputs.iter().collect();
        let query_refs: Vec<&SampleInput> = query_inputs.iter().collect();
        let mut gallery_emb = model.embed_pooled(&gallery_refs, gate_mode)?;
        let mut query_emb = model.embed_pooled(&query_refs, gate_mode)?;
        quantize(&mut gallery_emb);
        quantize(&mut query_emb);
        dump_split_embeddings(
            &out_dir.join("gallery.emb"),
            &data.gallery,
            &gallery_emb,
            "gallery",
        )?;
        dump_split_embeddings(&out_dir.join("query.emb"), &data.query, &query_emb, "query")?;
        let gallery_ids: Vec<u32> = data.gallery.iter().map(|i| i.identity).collect();
        let query_ids: Vec<u32> = data.query.iter().map(|i| i.identity).collect();
        let gallery_cams: Vec<String> = data.gallery.iter().map(|i| i.camera.clone()).collect();
        let query_cams: Vec<String> = data.query.iter().map(|i| i.camera.clone()).collect();
        let report = evaluate_retrieval(
            RetrievalSet {
                embeddings: &query_emb,
                identities: &query_ids,
                cameras: &query_cams,
            },
            RetrievalSet {
                embeddings: &gallery_emb,
                identities: &gallery_ids,
                cameras: &gallery_cams,
            },
            config.eval,
            config.eval_max_rank,
        )?;
        report.save(&out_dir.join("eval.json"))?;
        Some(report)
    } else {
        None
    };

    Ok(TrainOutcome {
        epochs: epoch_logs,
        report,
        final_checkpoint,
    })
}
