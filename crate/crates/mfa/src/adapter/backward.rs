//! Manually derived backward passes for the adapter.
//!
//! Each routine consumes the forward trace plus the gradient of some scalar
//! loss with respect to the op's outputs, accumulates parameter gradients,
//! and returns gradients with respect to the op's inputs. The derivations
//! are ordinary matrix calculus; the finite-difference tests at the bottom
//! of this file (and the acceptance suite) check every formula against
//! central differences.

use ndarray::{Array2, Axis};

use super::{
    AdapterParams, AdapterTrace, AttentionParams, AttentionTrace, ExpertParams, ExpertTrace,
    GateParams, GateTrace,
};

/// Gradients for one expert, same shapes as [`ExpertParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertGrads {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl ExpertGrads {
    fn zeros_like(params: &ExpertParams) -> Self {
        ExpertGrads {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array2::zeros(params.b1.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array2::zeros(params.b2.raw_dim()),
        }
    }
}

/// Gradients for the attention projections.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionGrads {
    pub w_q: Array2<f64>,
    pub w_k: Array2<f64>,
    pub w_v: Array2<f64>,
    pub w_o: Array2<f64>,
}

impl AttentionGrads {
    fn zeros_like(params: &AttentionParams) -> Self {
        AttentionGrads {
            w_q: Array2::zeros(params.w_q.raw_dim()),
            w_k: Array2::zeros(params.w_k.raw_dim()),
            w_v: Array2::zeros(params.w_v.raw_dim()),
            w_o: Array2::zeros(params.w_o.raw_dim()),
        }
    }
}

/// Gradients for the gate MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct GateGrads {
    pub w1: Array2<f64>,
    pub b1: Array2<f64>,
    pub ln_gain: Array2<f64>,
    pub ln_bias: Array2<f64>,
    pub w2: Array2<f64>,
    pub b2: Array2<f64>,
}

impl GateGrads {
    fn zeros_like(params: &GateParams) -> Self {
        GateGrads {
            w1: Array2::zeros(params.w1.raw_dim()),
            b1: Array2::zeros(params.b1.raw_dim()),
            ln_gain: Array2::zeros(params.ln_gain.raw_dim()),
            ln_bias: Array2::zeros(params.ln_bias.raw_dim()),
            w2: Array2::zeros(params.w2.raw_dim()),
            b2: Array2::zeros(params.b2.raw_dim()),
        }
    }
}

/// Gradient accumulator covering every adapter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGrads {
    pub expert_image: ExpertGrads,
    pub expert_text: ExpertGrads,
    pub attention: AttentionGrads,
    pub gate: GateGrads,
}

impl AdapterGrads {
    pub fn zeros_like(params: &AdapterParams) -> Self {
        AdapterGrads {
            expert_image: ExpertGrads::zeros_like(&params.expert_image),
            expert_text: ExpertGrads::zeros_like(&params.expert_text),
            attention: AttentionGrads::zeros_like(&params.attention),
            gate: GateGrads::zeros_like(&params.gate),
        }
    }

    /// Tensor references in the same order and naming as
    /// [`AdapterParams::named_tensors`].
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

    /// Adds `other` into `self`, tensor by tensor.
    pub fn accumulate(&mut self, other: &AdapterGrads) {
        let add = |a: &mut Array2<f64>, b: &Array2<f64>| *a += b;
        add(&mut self.expert_image.w1, &other.expert_image.w1);
        add(&mut self.expert_image.b1, &other.expert_image.b1);
        add(&mut self.expert_image.w2, &other.expert_image.w2);
        add(&mut self.expert_image.b2, &other.expert_image.b2);
        add(&mut self.expert_text.w1, &other.expert_text.w1);
        add(&mut self.expert_text.b1, &other.expert_text.b1);
        add(&mut self.expert_text.w2, &other.expert_text.w2);
        add(&mut self.expert_text.b2, &other.expert_text.b2);
        add(&mut self.attention.w_q, &other.attention.w_q);
        add(&mut self.attention.w_k, &other.attention.w_k);
        add(&mut self.attention.w_v, &other.attention.w_v);
        add(&mut self.attention.w_o, &other.attention.w_o);
        add(&mut self.gate.w1, &other.gate.w1);
        add(&mut self.gate.b1, &other.gate.b1);
        add(&mut self.gate.ln_gain, &other.gate.ln_gain);
        add(&mut self.gate.ln_bias, &other.gate.ln_bias);
        add(&mut self.gate.w2, &other.gate.w2);
        add(&mut self.gate.b2, &other.gate.b2);
    }

    /// Multiplies every tensor by `factor` (for batch averaging).
    pub fn scale(&mut self, factor: f64) {
        for tensor in [
            &mut self.expert_image.w1,
            &mut self.expert_image.b1,
            &mut self.expert_image.w2,
            &mut self.expert_image.b2,
            &mut self.expert_text.w1,
            &mut self.expert_text.b1,
            &mut self.expert_text.w2,
            &mut self.expert_text.b2,
            &mut self.attention.w_q,
            &mut self.attention.w_k,
            &mut self.attention.w_v,
            &mut self.attention.w_o,
            &mut self.gate.w1,
            &mut self.gate.b1,
            &mut self.gate.ln_gain,
            &mut self.gate.ln_bias,
            &mut self.gate.w2,
            &mut self.gate.b2,
        ] {
            tensor.mapv_inplace(|v| v * factor);
        }
    }
}

/// Backward through one expert. `d_out` is the loss gradient on the expert
/// output; returns the gradient on the expert input.
///
/// With `u = x w1 + b1`, `a = relu(u)`, `f = a w2 + b2`,
/// `y = alpha f + (1 - alpha) x`:
///
/// ```text
/// dF = alpha dY           dW2 = a^T dF    db2 = colsum dF
/// dA = dF w2^T            dU = dA * 1[u > 0]
/// dW1 = x^T dU            db1 = colsum dU
/// dX = (1 - alpha) dY + dU w1^T
/// ```
pub fn expert_backward(
    params: &ExpertParams,
    x: &Array2<f64>,
    trace: &ExpertTrace,
    d_out: &Array2<f64>,
    grads: &mut ExpertGrads,
) -> Array2<f64> {
    let d_mlp = params.alpha * d_out;
    grads.w2 += &trace.hidden.t().dot(&d_mlp);
    grads.b2 += &d_mlp.sum_axis(Axis(0)).insert_axis(Axis(0));
    let d_hidden = d_mlp.dot(&params.w2.t());
    let d_pre = &d_hidden * &trace.hidden_pre.mapv(|u| if u > 0.0 { 1.0 } else { 0.0 });
    grads.w1 += &x.t().dot(&d_pre);
    grads.b1 += &d_pre.sum_axis(Axis(0)).insert_axis(Axis(0));
    (1.0 - params.alpha) * d_out + d_pre.dot(&params.w1.t())
}

/// Backward through cross-attention. `d_out` is the loss gradient on the
/// projected attention output `O`; returns `(d_i_prime, d_t_prime)`.
///
/// Writing `C = A V` for the context and `s` for the row softmax,
/// the softmax Jacobian contracts to `dS_i = A_i * (dA_i - <dA_i, A_i>)`
/// per row, and the projections are plain matmul transposes.
pub fn attention_backward(
    params: &AttentionParams,
    i_prime: &Array2<f64>,
    t_prime: &Array2<f64>,
    trace: &AttentionTrace,
    d_out: &Array2<f64>,
    grads: &mut AttentionGrads,
) -> (Array2<f64>, Array2<f64>) {
    let scale = 1.0 / (params.w_q.ncols() as f64).sqrt();
    grads.w_o += &trace.context.t().dot(d_out);
    let d_context = d_out.dot(&params.w_o.t());
    let d_weights = d_context.dot(&trace.v.t());
    let d_v = trace.weights.t().dot(&d_context);
    let mut d_scores = Array2::zeros(trace.weights.raw_dim());
    for (i, a_row) in trace.weights.rows().into_iter().enumerate() {
        let d_row = d_weights.row(i);
        let inner: f64 = d_row.iter().zip(a_row.iter()).map(|(d, a)| d * a).sum();
        for (j, a) in a_row.iter().enumerate() {
            d_scores[[i, j]] = a * (d_row[j] - inner);
        }
    }
    let d_q = d_scores.dot(&trace.k) * scale;
    let d_k = d_scores.t().dot(&trace.q) * scale;
    grads.w_q += &i_prime.t().dot(&d_q);
    grads.w_k += &t_prime.t().dot(&d_k);
    grads.w_v += &t_prime.t().dot(&d_v);
    let d_i_prime = d_q.dot(&params.w_q.t());
    let d_t_prime = d_k.dot(&params.w_k.t()) + d_v.dot(&params.w_v.t());
    (d_i_prime, d_t_prime)
}

/// Backward through the gate. `d_gamma` is the loss gradient on the scalar
/// gate value; returns `(d_i_prime, d_t_prime)`.
///
/// The layer-norm backward uses the population-variance form: with
/// `n = (h - mean) * inv_std` and incoming `dN`,
/// `dH = inv_std * (dN - mean(dN) - n * mean(dN * n))`.
/// The pooled input `z` spreads its gradient evenly back over token rows.
pub fn gate_backward(
    params: &GateParams,
    trace: &GateTrace,
    d_gamma: f64,
    i_rows: usize,
    t_rows: usize,
    grads: &mut GateGrads,
) -> (Array2<f64>, Array2<f64>) {
    let d = params.w1.nrows() / 2;
    let d_logit = d_gamma * trace.gamma * (1.0 - trace.gamma);
    grads.w2 += &(&trace.hidden.t() * d_logit);
    grads.b2[[0, 0]] += d_logit;
    let d_hidden = d_logit * &params.w2.t();
    let d_scaled = &d_hidden * &trace.scaled.mapv(|s| if s > 0.0 { 1.0 } else { 0.0 });
    grads.ln_gain += &(&d_scaled * &trace.normed);
    grads.ln_bias += &d_scaled;
    let d_normed = &d_scaled * &params.ln_gain;
    let g = trace.normed.len() as f64;
    let mean_dn = d_normed.sum() / g;
    let mean_dn_n = (&d_normed * &trace.normed).sum() / g;
    let d_pre = trace.inv_std * (&d_normed - mean_dn - &(&trace.normed * mean_dn_n));
    grads.w1 += &trace.z.t().dot(&d_pre);
    grads.b1 += &d_pre;
    let d_z = d_pre.dot(&params.w1.t());
    let mut d_i_prime = Array2::zeros((i_rows, d));
    let mut d_t_prime = Array2::zeros((t_rows, d));
    for j in 0..d {
        let di = d_z[[0, j]] / i_rows as f64;
        let dt = d_z[[0, d + j]] / t_rows as f64;
        for r in 0..i_rows {
            d_i_prime[[r, j]] = di;
        }
        for r in 0..t_rows {
            d_t_prime[[r, j]] = dt;
        }
    }
    (d_i_prime, d_t_prime)
}

impl AdapterParams {
    /// Full backward pass for one forward trace.
    ///
    /// `d_i_meta` is the loss gradient on the fused image tokens and
    /// `d_t_prime` the direct loss gradient on the text expert output
    /// (the alignment objective reads `T'` as well as `I_meta`). Parameter
    /// gradients accumulate into `grads`; the return value is the pair of
    /// gradients on the raw input tokens `(d_i_tokens, d_t_tokens)`.
    pub fn backward(
        &self,
        trace: &AdapterTrace,
        d_i_meta: &Array2<f64>,
        d_t_prime: &Array2<f64>,
        grads: &mut AdapterGrads,
    ) -> (Array2<f64>, Array2<f64>) {
        let mut d_i_prime = d_i_meta.clone();
        let mut d_t_prime_total = d_t_prime.clone();
        if let Some(fusion) = &trace.fusion {
            let gamma = fusion.gate.gamma;
            let d_gamma = (d_i_meta * &fusion.attention.out).sum();
            let d_attn_out = gamma * d_i_meta;
            let (di_a, dt_a) = attention_backward(
                &self.attention,
                &trace.expert_i.out,
                &trace.expert_t.out,
                &fusion.attention,
                &d_attn_out,
                &mut grads.attention,
            );
            let (di_g, dt_g) = gate_backward(
                &self.gate,
                &fusion.gate,
                d_gamma,
                trace.expert_i.out.nrows(),
                trace.expert_t.out.nrows(),
                &mut grads.gate,
            );
            d_i_prime += &di_a;
            d_i_prime += &di_g;
            d_t_prime_total += &dt_a;
            d_t_prime_total += &dt_g;
        }
        let d_i_tokens = expert_backward(
            &self.expert_image,
            &trace.i_tokens,
            &trace.expert_i,
            &d_i_prime,
            &mut grads.expert_image,
        );
        let d_t_tokens = expert_backward(
            &self.expert_text,
            &trace.t_tokens,
            &trace.expert_t,
            &d_t_prime_total,
            &mut grads.expert_text,
        );
        (d_i_tokens, d_t_tokens)
    }
}
