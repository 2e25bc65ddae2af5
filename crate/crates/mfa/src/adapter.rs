//! The metadata fusion adapter: feature experts, gated cross-attention, and
//! the residual fusion that injects metadata text tokens into image tokens.
//!
//! For image tokens `I` and text tokens `T`, the adapter computes
//!
//! ```text
//! I' = E_I(I)                 (image feature expert)
//! T' = E_T(T)                 (text feature expert)
//! Q = I' Wq,  K = T' Wk,  V = T' Wv
//! A = softmax(Q K^T / sqrt(d_a))
//! O = (A V) Wo                (attended metadata, projected back to d)
//! gamma = sigmoid(MLP([mean(I'); mean(T')]))
//! I_meta = gamma * O + I'
//! ```
//!
//! Each expert is a residual two-layer MLP blended with its input,
//! `out = alpha * MLP(x) + (1 - alpha) * x`, so `alpha = 0` is exactly the
//! identity. The gate MLP has one hidden layer with layer normalization and
//! a scalar sigmoid output; its final bias starts at -2 so fusion begins
//! nearly closed (gamma ~ 0.12) and opens only if training finds the
//! metadata useful.
//!
//! Every forward op returns a trace holding the intermediates needed by the
//! manually derived backward passes in [`backward`]; finite-difference tests
//! pin those derivatives down.

mod backward;
mod checkpoint;

pub use backward::{AdapterGrads, AttentionGrads, ExpertGrads, GateGrads};
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};

use ndarray::{concatenate, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::math::{gaussian_matrix, mean_rows, orthogonal_matrix, relu, sigmoid, softmax_rows};

/// Initial value of the gate MLP's output bias.
pub const GATE_INIT_BIAS: f64 = -2.0;
/// Layer-norm variance epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum AdapterError {
    #[error("invalid adapter config: {reason}")]
    InvalidConfig { reason: String },
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("{path}: checkpoint error: {reason}")]
    Checkpoint {
        path: std::path::PathBuf,
        reason: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdapterConfig {
    /// Token embedding dimension `d`.
    pub dim: usize,
    /// Attention projection dimension `d_a`.
    pub attn_dim: usize,
    /// Hidden width of the feature experts.
    pub expert_hidden: usize,
    /// Hidden width of the gate MLP.
    pub gate_hidden: usize,
    /// Residual blend weight of the experts.
    pub expert_alpha: f64,
    pub seed: u64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            dim: 16,
            attn_dim: 16,
            expert_hidden: 16,
            gate_hidden: 16,
            expert_alpha: 0.2,
            seed: 0,
        }
    }
}

impl AdapterConfig {
    /// A config with every width tied to `dim`.
    pub fn with_dim(dim: usize) -> Self {
        AdapterConfig {
            dim,
            attn_dim: dim,
            expert_hidden: dim,
            gate_hidden: dim,
            ..AdapterConfig::default()
        }
    }

    fn validate(&self) -> Result<(), AdapterError> {
        if self.dim == 0 || self.attn_dim == 0 || self.expert_hidden == 0 || self.gate_hidden == 0
        {
            return Err(AdapterError::InvalidConfig {
                reason: "all dimensions must be positive".into(),
            });
        }
        if !(0.0..=1.0).contains(&self.expert_alpha) {
            return Err(AdapterError::InvalidConfig {
                reason: "expert_alpha must be in [0, 1]".into(),
            });
        }
        Ok(())
    }
}

/// Whether fusion runs or the adapter passes image tokens through untouched.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateMode {
    /// Use the learned gate value.
    Learned,
    /// Force the gate to zero: `I_meta` is exactly `I'`, and the attention
    /// and gate see no gradients. With experts at `alpha = 0` this makes the
    /// whole adapter a bit-exact identity on image tokens.
    ForcedOff,
}

// ===== Parameters =====

/// Residual two-layer MLP: `out = alpha * (relu(x w1 + b1) w2 + b2) + (1 - alpha) * x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    pub w1: Array2<f64>, // d x h
    pub b1: Array2<f64>, // 1 x h
    pub w2: Array2<f64>, // h x d
    pub b2: Array2<f64>, // 1 x d
    pub alpha: f64,
}

/// Cross-attention projections; queries come from image tokens, keys and
/// values from text tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub w_q: Array2<f64>, // d x d_a
    pub w_k: Array2<f64>, // d x d_a
    pub w_v: Array2<f64>, // d x d_a
    pub w_o: Array2<f64>, // d_a x d
}

/// Gate MLP: 2d inputs, one layer-normalized hidden layer, scalar sigmoid.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams {
    pub w1: Array2<f64>,      // 2d x g
    pub b1: Array2<f64>,      // 1 x g
    pub ln_gain: Array2<f64>, // 1 x g
    pub ln_bias: Array2<f64>, // 1 x g
    pub w2: Array2<f64>,      // g x 1
    pub b2: Array2<f64>,      // 1 x 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterParams {
    pub config: AdapterConfig,
    pub expert_image: ExpertParams,
    pub expert_text: ExpertParams,
    pub attention: AttentionParams,
    pub gate: GateParams,
}

impl AdapterParams {
    /// Seeded initialization. Experts start near the identity (zeroed final
    /// layer), attention projections are orthogonal, and the gate bias
    /// starts at [`GATE_INIT_BIAS`] so fusion eases in rather than
    /// disrupting the visual embedding at step zero.
    pub fn init(config: AdapterConfig) -> Result<Self, AdapterError> {
        config.validate()?;
        let (d, da, h, g) = (
            config.dim,
            config.attn_dim,
            config.expert_hidden,
            config.gate_hidden,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        let expert = |rng: &mut ChaCha8Rng| ExpertParams {
            w1: gaussian_matrix(d, h, rng) / (d as f64).sqrt(),
            b1: Array2::zeros((1, h)),
            w2: Array2::zeros((h, d)),
            b2: Array2::zeros((1, d)),
            alpha: config.expert_alpha,
        };
        let expert_image = expert(&mut rng);
        let expert_text = expert(&mut rng);
        let attention = AttentionParams {
            w_q: orthogonal_matrix(d, da, &mut rng),
            w_k: orthogonal_matrix(d, da, &mut rng),
            w_v: orthogonal_matrix(d, da, &mut rng),
            w_o: orthogonal_matrix(da, d, &mut rng),
        };
        let gate = GateParams {
            w1: gaussian_matrix(2 * d, g, &mut rng) / ((2 * d) as f64).sqrt(),
            b1: Array2::zeros((1, g)),
            ln_gain: Array2::ones((1, g)),
            ln_bias: Array2::zeros((1, g)),
            w2: gaussian_matrix(g, 1, &mut rng) / (g as f64).sqrt(),
            b2: Array2::from_elem((1, 1), GATE_INIT_BIAS),
        };
        Ok(AdapterParams {
            config,
            expert_image,
            expert_text,
            attention,
            gate,
        })
    }

    /// Stable tensor names and references, in checkpoint order.
    pub fn named_tensors(&self) -> Vec<(&'static str, &Array2<f64>)> {
        vec![
            ("adapter.expert_image.w1", &self.expert_image.w1),
            ("adapter.expert_image.b1", &self.expert_image.b1),
            ("adapter.expert_image.w2", &self.expert_image.w2),
            ("adapter.expert_image.b2", &self.expert_image.b2),
            ("adapter.expert_text.w1", &self.expert_text.w1),
            ("adapter.expert_text.b1", &self.expert_text.b1),
            ("adapter.expert_text.w2", &self.expert_text.w2),
            ("adapter.expert_text.b2", &self.expert_text.b2),
            ("adapter.attention.w_q", &self.attention.w_q),
            ("adapter.attention.w_k", &self.attention.w_k),
            ("adapter.attention.w_v", &self.attention.w_v),
            ("adapter.attention.w_o", &self.attention.w_o),
            ("adapter.gate.w1", &self.gate.w1),
            ("adapter.gate.b1", &self.gate.b1),
            ("adapter.gate.ln_gain", &self.gate.ln_gain),
            ("adapter.gate.ln_bias", &self.gate.ln_bias),
            ("adapter.gate.w2", &self.gate.w2),
            ("adapter.gate.b2", &self.gate.b2),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(&'static str, &mut Array2<f64>)> {
        vec![
            ("adapter.expert_image.w1", &mut self.expert_image.w1),
            ("adapter.expert_image.b1", &mut self.expert_image.b1),
            ("adapter.expert_image.w2", &mut self.expert_image.w2),
            ("adapter.expert_image.b2", &mut self.expert_image.b2),
            ("adapter.expert_text.w1", &mut self.expert_text.w1),
            ("adapter.expert_text.b1", &mut self.expert_text.b1),
            ("adapter.expert_text.w2", &mut self.expert_text.w2),
            ("adapter.expert_text.b2", &mut self.expert_text.b2),
            ("adapter.attention.w_q", &mut self.attention.w_q),
            ("adapter.attention.w_k", &mut self.attention.w_k),
            ("adapter.attention.w_v", &mut self.attention.w_v),
            ("adapter.attention.w_o", &mut self.attention.w_o),
            ("adapter.gate.w1", &mut self.gate.w1),
            ("adapter.gate.b1", &mut self.gate.b1),
            ("adapter.gate.ln_gain", &mut self.gate.ln_gain),
            ("adapter.gate.ln_bias", &mut self.gate.ln_bias),
            ("adapter.gate.w2", &mut self.gate.w2),
            ("adapter.gate.b2", &mut self.gate.b2),
        ]
    }

    /// Full forward pass for one image/text token pair.
    pub fn forward(
        &self,
        i_tokens: &Array2<f64>,
        t_tokens: &Array2<f64>,
        mode: GateMode,
    ) -> Result<AdapterTrace, AdapterError> {
        let d = self.config.dim;
        for (name, tokens) in [("image tokens", i_tokens), ("text tokens", t_tokens)] {
            if tokens.ncols() != d || tokens.nrows() == 0 {
                return Err(AdapterError::ShapeMismatch {
                    op: "forward",
                    expected: format!("{name} of shape (>0, {d})"),
                    got: format!("({}, {})", tokens.nrows(), tokens.ncols()),
                });
            }
        }
        let expert_i = apply_expert(&self.expert_image, i_tokens);
        let expert_t = apply_expert(&self.expert_text, t_tokens);
        let fusion = match mode {
            GateMode::ForcedOff => None,
            GateMode::Learned => {
                let attention = cross_attend(&self.attention, &expert_i.out, &expert_t.out)?;
                let gate = compute_gate(&self.gate, &expert_i.out, &expert_t.out);
                Some(FusionTrace { attention, gate })
            }
        };
        let i_meta = match &fusion {
            None => expert_i.out.clone(),
            Some(f) => f.gate.gamma * &f.attention.out + &expert_i.out,
        };
        Ok(AdapterTrace {
            i_tokens: i_tokens.clone(),
            t_tokens: t_tokens.clone(),
            expert_i,
            expert_t,
            fusion,
            i_meta,
        })
    }
}

// ===== Forward traces =====

/// Intermediates of one expert application.
#[derive(Debug, Clone)]
pub struct ExpertTrace {
    /// Pre-activation of the hidden layer, `x w1 + b1`.
    pub hidden_pre: Array2<f64>,
    /// Hidden activations after relu.
    pub hidden: Array2<f64>,
    pub out: Array2<f64>,
}

/// Intermediates of one cross-attention application.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub q: Array2<f64>,       // N x d_a
    pub k: Array2<f64>,       // M x d_a
    pub v: Array2<f64>,       // M x d_a
    pub weights: Array2<f64>, // N x M, the softmaxed attention matrix
    pub context: Array2<f64>, // N x d_a, weights . v
    pub out: Array2<f64>,     // N x d, context . w_o
}

/// Intermediates of one gate evaluation.
#[derive(Debug, Clone)]
pub struct GateTrace {
    pub z: Array2<f64>,          // 1 x 2d pooled input
    pub hidden_pre: Array2<f64>, // 1 x g before layer norm
    pub normed: Array2<f64>,     // 1 x g after normalization, before gain/bias
    pub scaled: Array2<f64>,     // 1 x g after gain/bias (relu pre-activation)
    pub hidden: Array2<f64>,     // 1 x g after relu
    pub inv_std: f64,
    pub logit: f64,
    pub gamma: f64,
}

#[derive(Debug, Clone)]
pub struct FusionTrace {
    pub attention: AttentionTrace,
    pub gate: GateTrace,
}

/// Full forward trace; owns copies of the inputs for the backward pass.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    pub i_tokens: Array2<f64>,
    pub t_tokens: Array2<f64>,
    pub expert_i: ExpertTrace,
    pub expert_t: ExpertTrace,
    pub fusion: Option<FusionTrace>,
    pub i_meta: Array2<f64>,
}

impl AdapterTrace {
    /// The gate value applied during fusion; zero when fusion was off.
    pub fn gamma(&self) -> f64 {
        self.fusion.as_ref().map_or(0.0, |f| f.gate.gamma)
    }

    /// Text expert output tokens `T'`.
    pub fn t_prime(&self) -> &Array2<f64> {
        &self.expert_t.out
    }
}

// ===== Forward ops =====

/// Applies a feature expert row-wise: `alpha * MLP(x) + (1 - alpha) * x`.
pub fn apply_expert(params: &ExpertParams, x: &Array2<f64>) -> ExpertTrace {
    let hidden_pre = x.dot(&params.w1) + &params.b1;
    let hidden = hidden_pre.mapv(relu);
    let mlp = hidden.dot(&params.w2) + &params.b2;
    let out = params.alpha * &mlp + (1.0 - params.alpha) * x;
    ExpertTrace {
        hidden_pre,
        hidden,
        out,
    }
}

/// Cross-attention from image tokens (queries) over text tokens (keys and
/// values), with the context projected back to token dimension `d`.
pub fn cross_attend(
    params: &AttentionParams,
    i_prime: &Array2<f64>,
    t_prime: &Array2<f64>,
) -> Result<AttentionTrace, AdapterError> {
    let d = params.w_q.nrows();
    if i_prime.ncols() != d || t_prime.ncols() != d {
        return Err(AdapterError::ShapeMismatch {
            op: "cross_attend",
            expected: format!("token dimension {d}"),
            got: format!("image {}, text {}", i_prime.ncols(), t_prime.ncols()),
        });
    }
    let q = i_prime.dot(&params.w_q);
    let k = t_prime.dot(&params.w_k);
    let v = t_prime.dot(&params.w_v);
    let scale = 1.0 / (params.w_q.ncols() as f64).sqrt();
    let scores = q.dot(&k.t()) * scale;
    let weights = softmax_rows(&scores);
    let context = weights.dot(&v);
    let out = context.dot(&params.w_o);
    Ok(AttentionTrace {
        q,
        k,
        v,
        weights,
        context,
        out,
    })
}

/// Evaluates the fusion gate on the mean-pooled expert outputs.
pub fn compute_gate(params: &GateParams, i_prime: &Array2<f64>, t_prime: &Array2<f64>) -> GateTrace {
    let pooled_i = mean_rows(i_prime);
    let pooled_t = mean_rows(t_prime);
    let z = concatenate(
        Axis(0),
        &[pooled_i.view(), pooled_t.view()],
    )
    .expect("pooled vectors share length")
    .insert_axis(Axis(0));
    let hidden_pre = z.dot(&params.w1) + &params.b1;
    let g = hidden_pre.len() as f64;
    let mean = hidden_pre.sum() / g;
    let var = hidden_pre.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g;
    let inv_std = 1.0 / (var + LN_EPS).sqrt();
    let normed = hidden_pre.mapv(|v| (v - mean) * inv_std);
    let scaled = &normed * &params.ln_gain + &params.ln_bias;
    let hidden = scaled.mapv(relu);
    let logit = hidden.dot(&params.w2)[[0, 0]] + params.b2[[0, 0]];
    let gamma = sigmoid(logit);
    GateTrace {
        z,
        hidden_pre,
        normed,
        scaled,
        hidden,
        inv_std,
        logit,
        gamma,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    // Independent dense-math reference implementations; everything below is
    // plain loops over Vec<Vec<f64>> so a bug in the production path cannot
    // hide in a shared helper.
    mod oracle {
        pub fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
            let (n, k, m) = (a.len(), b.len(), b[0].len());
            let mut out = vec![vec![0.0; m]; n];
            for i in 0..n {
                for j in 0..m {
                    for l in 0..k {
                        out[i][j] += a[i][l] * b[l][j];
                    }
                    assert_eq!(a[i].len(), k);
                }
            }
            out
        }

        pub fn expert(
            x: &[Vec<f64>],
            w1: &[Vec<f64>],
            b1: &[f64],
            w2: &[Vec<f64>],
            b2: &[f64],
            alpha: f64,
        ) -> Vec<Vec<f64>> {
            let mut hidden = matmul(x, w1);
            for row in &mut hidden {
                for (v, b) in row.iter_mut().zip(b1) {
                    *v = (*v + b).max(0.0);
                }
            }
            let mut out = matmul(&hidden, w2);
            for (i, row) in out.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = alpha * (*v + b2[j]) + (1.0 - alpha) * x[i][j];
                }
            }
            out
        }

        pub fn attention(
            i_prime: &[Vec<f64>],
            t_prime: &[Vec<f64>],
            w_q: &[Vec<f64>],
            w_k: &[Vec<f64>],
            w_v: &[Vec<f64>],
            w_o: &[Vec<f64>],
        ) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
            let q = matmul(i_prime, w_q);
            let k = matmul(t_prime, w_k);
            let v = matmul(t_prime, w_v);
            let d_a = w_q[0].len() as f64;
            let mut weights = vec![vec![0.0; k.len()]; q.len()];
            for (i, qrow) in q.iter().enumerate() {
                let scores: Vec<f64> = k
                    .iter()
                    .map(|krow| {
                        qrow.iter().zip(krow).map(|(a, b)| a * b).sum::<f64>() / d_a.sqrt()
                    })
                    .collect();
                let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
                let total: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    weights[i][j] = e / total;
                }
            }
            let context = matmul(&weights, &v);
            (weights, matmul(&context, w_o))
        }

        pub fn gate(
            i_prime: &[Vec<f64>],
            t_prime: &[Vec<f64>],
            w1: &[Vec<f64>],
            b1: &[f64],
            gain: &[f64],
            bias: &[f64],
            w2: &[f64],
            b2: f64,
            eps: f64,
        ) -> f64 {
            let pool = |m: &[Vec<f64>]| -> Vec<f64> {
                let d = m[0].len();
                (0..d)
                    .map(|j| m.iter().map(|row| row[j]).sum::<f64>() / m.len() as f64)
                    .collect()
            };
            let mut z = pool(i_prime);
            z.extend(pool(t_prime));
            let h1 = &matmul(&[z], w1)[0];
            let h1: Vec<f64> = h1.iter().zip(b1).map(|(v, b)| v + b).collect();
            let g = h1.len() as f64;
            let mean = h1.iter().sum::<f64>() / g;
            let var = h1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / g;
            let logit: f64 = h1
                .iter()
                .enumerate()
                .map(|(j, v)| {
                    let n = (v - mean) / (var + eps).sqrt();
                    (n * gain[j] + bias[j]).max(0.0) * w2[j]
                })
                .sum::<f64>()
                + b2;
            1.0 / (1.0 + (-logit).exp())
        }
    }

    fn to_vecs(m: &Array2<f64>) -> Vec<Vec<f64>> {
        m.rows().into_iter().map(|r| r.to_vec()).collect()
    }

    fn random_matrix(rows: usize, cols: usize, seed: u64) -> Array2<f64> {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::math::gaussian_matrix(rows, cols, &mut rng)
    }

    fn random_params(config: AdapterConfig, seed: u64) -> AdapterParams {
        // Unlike the near-identity init, every tensor is dense random so
        // tests exercise non-trivial values everywhere.
        let mut params = AdapterParams::init(config).unwrap();
        let mut counter = seed;
        for (_, tensor) in params.named_tensors_mut() {
            counter += 1;
            *tensor = random_matrix(tensor.nrows(), tensor.ncols(), counter) * 0.7;
        }
        params
    }

    #[test]
    fn expert_with_alpha_zero_is_a_bitwise_identity() {
        let config = AdapterConfig {
            expert_alpha: 0.0,
            ..AdapterConfig::with_dim(6)
        };
        let mut params = random_params(config, 40);
        params.expert_image.alpha = 0.0;
        let x = random_matrix(3, 6, 41);
        let trace = apply_expert(&params.expert_image, &x);
        assert_eq!(trace.out, x);
        for (a, b) in trace.out.iter().zip(x.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn expert_with_alpha_one_and_zero_weights_maps_to_zero() {
        let params = ExpertParams {
            w1: Array2::zeros((4, 3)),
            b1: Array2::zeros((1, 3)),
            w2: Array2::zeros((3, 4)),
            b2: Array2::zeros((1, 4)),
            alpha: 1.0,
        };
        let x = random_matrix(2, 4, 42);
        let trace = apply_expert(&params, &x);
        assert!(trace.out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn expert_matches_the_loop_oracle() {
        let params = random_params(AdapterConfig::with_dim(5), 50);
        let expert = &params.expert_text;
        let x = random_matrix(4, 5, 51);
        let trace = apply_expert(expert, &x);
        let expected = oracle::expert(
            &to_vecs(&x),
            &to_vecs(&expert.w1),
            &expert.b1.row(0).to_vec(),
            &to_vecs(&expert.w2),
            &expert.b2.row(0).to_vec(),
            expert.alpha,
        );
        for (i, row) in expected.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                assert_abs_diff_eq!(trace.out[[i, j]], *v, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let params = random_params(AdapterConfig::with_dim(6), 60);
        let i_prime = random_matrix(5, 6, 61);
        let t_prime = random_matrix(3, 6, 62);
        let trace = cross_attend(&params.attention, &i_prime, &t_prime).unwrap();
        for row in trace.weights.rows() {
            assert_abs_diff_eq!(row.sum(), 1.0, epsilon = 1e-6);
        }
    }

    #[test]
    fn attention_over_a_single_text_token_is_the_projected_value() {
        let params = random_params(AdapterConfig::with_dim(4), 63);
        let i_prime = random_matrix(3, 4, 64);
        let t_prime = random_matrix(1, 4, 65);
        let trace = cross_attend(&params.attention, &i_prime, &t_prime).unwrap();
        assert!(trace.weights.iter().all(|w| (*w - 1.0).abs() < 1e-12));
        let v_projected = t_prime.dot(&params.attention.w_v).dot(&params.attention.w_o);
        for row in trace.out.rows() {
            for (a, b) in row.iter().zip(v_projected.row(0)) {
                assert_abs_diff_eq!(*a, *b, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_over_identical_keys_is_uniform() {
        let params = random_params(AdapterConfig::with_dim(4), 66);
        let i_prime = random_matrix(2, 4, 67);
        let row = random_matrix(1, 4, 68);
        let mut t_prime = Array2::zeros((3, 4));
        for mut r in t_prime.rows_mut() {
            r.assign(&row.row(0));
        }
        let trace = cross_attend(&params.attention, &i_prime, &t_prime).unwrap();
        for w in trace.weights.iter() {
            assert_abs_diff_eq!(*w, 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn attention_matches_the_loop_oracle() {
        let params = random_params(AdapterConfig::with_dim(5), 70);
        let i_prime = random_matrix(4, 5, 71);
        let t_prime = random_matrix(3, 5, 72);
        let trace = cross_attend(&params.attention, &i_prime, &t_prime).unwrap();
        let (weights, out) = oracle::attention(
            &to_vecs(&i_prime),
            &to_vecs(&t_prime),
            &to_vecs(&params.attention.w_q),
            &to_vecs(&params.attention.w_k),
            &to_vecs(&params.attention.w_v),
            &to_vecs(&params.attention.w_o),
        );
        for i in 0..4 {
            for j in 0..3 {
                assert_abs_diff_eq!(trace.weights[[i, j]], weights[i][j], epsilon = 1e-12);
            }
            for j in 0..5 {
                assert_abs_diff_eq!(trace.out[[i, j]], out[i][j], epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn attention_rejects_mismatched_token_dimensions() {
        let params = random_params(AdapterConfig::with_dim(4), 73);
        let i_prime = random_matrix(2, 4, 74);
        let t_prime = random_matrix(2, 5, 75);
        assert!(matches!(
            cross_attend(&params.attention, &i_prime, &t_prime),
            Err(AdapterError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn gate_with_all_zero_parameters_is_exactly_half() {
        let d = 4;
        let params = GateParams {
            w1: Array2::zeros((2 * d, 3)),
            b1: Array2::zeros((1, 3)),
            ln_gain: Array2::zeros((1, 3)),
            ln_bias: Array2::zeros((1, 3)),
            w2: Array2::zeros((3, 1)),
            b2: Array2::zeros((1, 1)),
        };
        let i_prime = random_matrix(3, d, 80);
        let t_prime = random_matrix(2, d, 81);
        let trace = compute_gate(&params, &i_prime, &t_prime);
        assert_eq!(trace.gamma, 0.5);
    }

    #[test]
    fn gate_saturates_under_a_large_negative_bias() {
        let params = random_params(AdapterConfig::with_dim(4), 82);
        let mut gate = params.gate.clone();
        gate.b2[[0, 0]] = -50.0;
        gate.w2 = Array2::zeros((4, 1));
        let trace = compute_gate(&gate, &random_matrix(3, 4, 83), &random_matrix(2, 4, 84));
        assert!(trace.gamma < 1e-20);
        assert!(trace.gamma > 0.0);
    }

    #[test]
    fn gate_matches_the_loop_oracle() {
        let params = random_params(AdapterConfig::with_dim(5), 85);
        let i_prime = random_matrix(4, 5, 86);
        let t_prime = random_matrix(3, 5, 87);
        let trace = compute_gate(&params.gate, &i_prime, &t_prime);
        let expected = oracle::gate(
            &to_vecs(&i_prime),
            &to_vecs(&t_prime),
            &to_vecs(&params.gate.w1),
            &params.gate.b1.row(0).to_vec(),
            &params.gate.ln_gain.row(0).to_vec(),
            &params.gate.ln_bias.row(0).to_vec(),
            &params.gate.w2.column(0).to_vec(),
            params.gate.b2[[0, 0]],
            LN_EPS,
        );
        assert_abs_diff_eq!(trace.gamma, expected, epsilon = 1e-12);
    }

    #[test]
    fn initial_gate_rests_near_the_closed_position() {
        let params = AdapterParams::init(AdapterConfig::with_dim(8)).unwrap();
        // Zero pooled inputs leave only the output bias.
        let zeros = Array2::zeros((3, 8));
        let trace = compute_gate(&params.gate, &zeros, &zeros);
        assert_abs_diff_eq!(trace.gamma, sigmoid(GATE_INIT_BIAS), epsilon = 1e-15);
        // Random inputs stay well below the open position at init.
        for seed in 0..20 {
            let trace = compute_gate(
                &params.gate,
                &random_matrix(4, 8, 900 + seed),
                &random_matrix(3, 8, 950 + seed),
            );
            assert!(trace.gamma < 0.5, "init gate opened to {}", trace.gamma);
        }
    }

    #[test]
    fn fusion_composes_gate_attention_and_residual() {
        let params = random_params(AdapterConfig::with_dim(5), 90);
        let i_tokens = random_matrix(4, 5, 91);
        let t_tokens = random_matrix(3, 5, 92);
        let trace = params
            .forward(&i_tokens, &t_tokens, GateMode::Learned)
            .unwrap();
        let fusion = trace.fusion.as_ref().unwrap();
        let expected = fusion.gate.gamma * &fusion.attention.out + &trace.expert_i.out;
        assert_eq!(trace.i_meta, expected);
        // The fused embedding moves away from I' by exactly gamma * ||O||.
        let diff = (&trace.i_meta - &trace.expert_i.out).mapv(|v| v * v).sum().sqrt();
        let attn_norm = fusion.attention.out.mapv(|v| v * v).sum().sqrt();
        assert_abs_diff_eq!(diff, fusion.gate.gamma * attn_norm, epsilon = 1e-10);
    }

    #[test]
    fn forced_off_gate_with_identity_experts_passes_tokens_through_bitwise() {
        let config = AdapterConfig {
            expert_alpha: 0.0,
            ..AdapterConfig::with_dim(6)
        };
        let params = AdapterParams::init(config).unwrap();
        let i_tokens = random_matrix(4, 6, 95);
        let t_tokens = random_matrix(2, 6, 96);
        let trace = params
            .forward(&i_tokens, &t_tokens, GateMode::ForcedOff)
            .unwrap();
        assert_eq!(trace.gamma(), 0.0);
        for (a, b) in trace.i_meta.iter().zip(i_tokens.iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn fused_tokens_react_to_metadata_when_the_gate_is_open() {
        let params = AdapterParams::init(AdapterConfig::with_dim(6)).unwrap();
        let i_tokens = random_matrix(4, 6, 97);
        let t_a = random_matrix(3, 6, 98);
        let t_b = random_matrix(3, 6, 99);
        let trace_a = params.forward(&i_tokens, &t_a, GateMode::Learned).unwrap();
        let trace_b = params.forward(&i_tokens, &t_b, GateMode::Learned).unwrap();
        assert!(trace_a.gamma() > 0.0);
        let diff: f64 = (&trace_a.i_meta - &trace_b.i_meta).iter().map(|v| v.abs()).sum();
        assert!(diff > 1e-9, "metadata change did not reach the fused tokens");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = AdapterParams::init(AdapterConfig::with_dim(8)).unwrap();
        let b = AdapterParams::init(AdapterConfig::with_dim(8)).unwrap();
        assert_eq!(a, b);
        let c = AdapterParams::init(AdapterConfig {
            seed: 5,
            ..AdapterConfig::with_dim(8)
        })
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn attention_projections_start_orthogonal() {
        let params = AdapterParams::init(AdapterConfig::with_dim(8)).unwrap();
        for w in [
            &params.attention.w_q,
            &params.attention.w_k,
            &params.attention.w_v,
        ] {
            let gram = w.t().dot(w);
            for i in 0..8 {
                for j in 0..8 {
                    let expected = if i == j { 1.0 } else { 0.0 };
                    assert_abs_diff_eq!(gram[[i, j]], expected, epsilon = 1e-10);
                }
            }
        }
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(AdapterParams::init(AdapterConfig {
            dim: 0,
            ..AdapterConfig::default()
        })
        .is_err());
        assert!(AdapterParams::init(AdapterConfig {
            expert_alpha: 1.5,
            ..AdapterConfig::default()
        })
        .is_err());
    }
}
