//! The trainable re-identification model: toy encoders, the fusion adapter,
//! and a linear identity head, with batch forward and backward passes.
//!
//! Encoder input vectors are cached per sample (they never change), so the
//! only encoder work per step is the projection matmul; when the encoders
//! are frozen even their gradients are skipped.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::TrainError;
use crate::adapter::{
    AdapterConfig, AdapterGrads, AdapterParams, AdapterTrace, GateMode,
};
use crate::encoders::{
    build_toy_encoders, EncoderSpec, ImageEncoder, ImageSource, PoolingMode, ToyImageEncoder,
    ToyTextEncoder,
};
use crate::math::gaussian_matrix;

/// Cached encoder inputs for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleInput {
    pub image_input: Vec<f64>,
    /// Empty when the run ignores metadata.
    pub text_input: Vec<f64>,
}

pub struct ReidModel {
    pub adapter: AdapterParams,
    pub id_head_w: Array2<f64>, // d x classes
    pub id_head_b: Array2<f64>, // 1 x classes
    pub image_encoder: ToyImageEncoder,
    pub text_encoder: ToyTextEncoder,
    pub num_classes: usize,
}

/// Everything one training step needs from the forward pass.
pub struct BatchForward {
    pub traces: Vec<AdapterTrace>,
    pub pooled_image: Array2<f64>, // B x d
    pub pooled_text: Array2<f64>,  // B x d
    pub logits: Array2<f64>,       // B x classes
    pub mean_gamma: f64,
}

/// Gradients for every model tensor, in [`ReidModel::named_tensors`] order.
pub struct ModelGrads {
    pub adapter: AdapterGrads,
    pub id_head_w: Array2<f64>,
    pub id_head_b: Array2<f64>,
    pub encoder_image_proj: Array2<f64>,
    pub encoder_text_proj: Array2<f64>,
}

impl ModelGrads {
    pub fn zeros_like(model: &ReidModel) -> Self {
        ModelGrads {
            adapter: AdapterGrads::zeros_like(&model.adapter),
            id_head_w: Array2::zeros(model.id_head_w.raw_dim()),
            id_head_b: Array2::zeros(model.id_head_b.raw_dim()),
            encoder_image_proj: Array2::zeros(model.image_encoder.projection().raw_dim()),
            encoder_text_proj: Array2::zeros(model.text_encoder.projection().raw_dim()),
        }
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = self.adapter.named_tensors();
        out.push(("id_head.w", &self.id_head_w));
        out.push(("id_head.b", &self.id_head_b));
        out.push(("encoder_image.proj", &self.encoder_image_proj));
        out.push(("encoder_text.proj", &self.encoder_text_proj));
        out
    }
}

impl ReidModel {
    pub fn new(
        adapter_config: AdapterConfig,
        encoder_spec: &EncoderSpec,
        image_input_dim: usize,
        num_classes: usize,
    ) -> Result<Self, TrainError> {
        if encoder_spec.dim != adapter_config.dim {
            return Err(TrainError::InvalidConfig {
                reason: format!(
                    "encoder dim {} must match adapter dim {}",
                    encoder_spec.dim, adapter_config.dim
                ),
            });
        }
        if num_classes == 0 {
            return Err(TrainError::InvalidConfig {
                reason: "the identity head needs at least one class".into(),
            });
        }
        let adapter = AdapterParams::init(adapter_config)?;
        let (image_encoder, text_encoder) = build_toy_encoders(encoder_spec, image_input_dim)?;
        let d = adapter_config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(adapter_config.seed);
        rng.set_stream(4);
        let id_head_w = gaussian_matrix(d, num_classes, &mut rng) / (d as f64).sqrt();
        Ok(ReidModel {
            adapter,
            id_head_w,
            id_head_b: Array2::zeros((1, num_classes)),
            image_encoder,
            text_encoder,
            num_classes,
        })
    }

    pub fn pooling(&self) -> PoolingMode {
        self.image_encoder.spec().pooling
    }

    pub fn dim(&self) -> usize {
        self.adapter.config.dim
    }

    /// Caches the encoder input vectors for one sample. Pass `None` for the
    /// prompt when the run ignores metadata.
    pub fn prepare_input(
        &self,
        source: &ImageSource,
        prompt: Option<&str>,
    ) -> Result<SampleInput, TrainError> {
        let image_input = self.image_encoder.input_vector(source)?;
        let text_input = match prompt {
            Some(text) => self.text_encoder.input_vector(text)?,
            None => Vec::new(),
        };
        Ok(SampleInput {
            image_input,
            text_input,
        })
    }

    /// Forward pass over a batch of cached inputs.
    pub fn forward_batch(
        &self,
        inputs: &[&SampleInput],
        gate: GateMode,
    ) -> Result<BatchForward, TrainError> {
        if inputs.is_empty() {
            return Err(TrainError::EmptyBatch);
        }
        let d = self.dim();
        let pooling = self.pooling();
        let b = inputs.len();
        let mut traces = Vec::with_capacity(b);
        let mut pooled_image = Array2::zeros((b, d));
        let mut pooled_text = Array2::zeros((b, d));
        let mut gamma_sum = 0.0;
        for (i, input) in inputs.iter().enumerate() {
            let i_tokens = self.image_encoder.encode_from_input(&input.image_input).tokens;
            let t_tokens = if input.text_input.is_empty() {
                Array2::zeros((1, d))
            } else {
                self.text_encoder.encode_from_input(&input.text_input).tokens
            };
            let trace = self.adapter.forward(&i_tokens, &t_tokens, gate)?;
            pooled_image
                .row_mut(i)
                .assign(&pooling.pool(&trace.i_meta));
            pooled_text
                .row_mut(i)
                .assign(&pooling.pool(trace.t_prime()));
            gamma_sum += trace.gamma();
            traces.push(trace);
        }
        let logits = pooled_image.dot(&self.id_head_w) + &self.id_head_b;
        Ok(BatchForward {
            traces,
            pooled_image,
            pooled_text,
            logits,
            mean_gamma: gamma_sum / b as f64,
        })
    }

    /// Backward pass over a batch, given loss gradients on the logits, the
    /// pooled image embeddings, and the pooled text embeddings. Encoder
    /// projection gradients are computed only when `finetune_encoders` is
    /// set.
    pub fn backward_batch(
        &self,
        inputs: &[&SampleInput],
        forward: &BatchForward,
        d_logits: &Array2<f64>,
        d_pooled_image: &Array2<f64>,
        d_pooled_text: &Array2<f64>,
        finetune_encoders: bool,
    ) -> ModelGrads {
        let pooling = self.pooling();
        let mut grads = ModelGrads::zeros_like(self);
        grads.id_head_w += &forward.pooled_image.t().dot(d_logits);
        grads.id_head_b += &d_logits.sum_axis(Axis(0)).insert_axis(Axis(0));
        let d_pooled_from_head = d_logits.dot(&self.id_head_w.t());
        for (i, (input, trace)) in inputs.iter().zip(&forward.traces).enumerate() {
            let d_pooled_i: Array1<f64> =
                (&d_pooled_image.row(i) + &d_pooled_from_head.row(i)).to_owned();
            let d_i_meta = pooling.unpool_gradient(&d_pooled_i, trace.i_meta.nrows());
            let d_t_prime = pooling.unpool_gradient(
                &d_pooled_text.row(i).to_owned(),
                trace.t_prime().nrows(),
            );
            let (d_i_tokens, d_t_tokens) =
                self.adapter
                    .backward(trace, &d_i_meta, &d_t_prime, &mut grads.adapter);
            if finetune_encoders {
                accumulate_projection_grad(
                    &mut grads.encoder_image_proj,
                    &d_i_tokens,
                    &input.image_input,
                );
                if !input.text_input.is_empty() {
                    accumulate_projection_grad(
                        &mut grads.encoder_text_proj,
                        &d_t_tokens,
                        &input.text_input,
                    );
                }
            }
        }
        grads
    }

    /// Pooled fused embeddings for a batch, one row per input.
    pub fn embed_pooled(
        &self,
        inputs: &[&SampleInput],
        gate: GateMode,
    ) -> Result<Array2<f64>, TrainError> {
        Ok(self.forward_batch(inputs, gate)?.pooled_image)
    }

    pub fn named_tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        let mut out = self.adapter.named_tensors();
        out.push(("id_head.w", &self.id_head_w));
        out.push(("id_head.b", &self.id_head_b));
        out.push(("encoder_image.proj", self.image_encoder.projection()));
        out.push(("encoder_text.proj", self.text_encoder.projection()));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        let mut out = self.adapter.named_tensors_mut();
        out.push(("id_head.w", &mut self.id_head_w));
        out.push(("id_head.b", &mut self.id_head_b));
        out.push(("encoder_image.proj", self.image_encoder.projection_mut()));
        out.push(("encoder_text.proj", self.text_encoder.projection_mut()));
        out
    }
}

/// Token grids come from `reshape(projection . input)`, so the projection
/// gradient is the outer product of the flattened token gradient and the
/// input vector.
fn accumulate_projection_grad(
    grad: &mut Array2<f64>,
    d_tokens: &Array2<f64>,
    input: &[f64],
) {
    debug_assert_eq!(grad.nrows(), d_tokens.len());
    debug_assert_eq!(grad.ncols(), input.len());
    for (row, d) in d_tokens.iter().enumerate() {
        if *d == 0.0 {
            continue;
        }
        for (col, x) in input.iter().enumerate() {
            grad[[row, col]] += d * x;
        }
    }
}

/// Plain visual pipeline: encode and pool, no adapter anywhere. The
/// reference the metadata-free ablation is compared against.
pub fn embed_visual_only(
    encoder: &ToyImageEncoder,
    inputs: &[&SampleInput],
) -> Result<Array2<f64>, TrainError> {
    if inputs.is_empty() {
        return Err(TrainError::EmptyBatch);
    }
    let d = encoder.spec().dim;
    let mut out = Array2::zeros((inputs.len(), d));
    for (i, input) in inputs.iter().enumerate() {
        let embedding = encoder.encode_from_input(&input.image_input);
        out.row_mut(i).assign(&embedding.pooled);
    }
    Ok(out)
}
