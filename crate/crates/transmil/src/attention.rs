//! Softmax self-attention: the exact quadratic form and its Nystrom
//! approximation, wrapped in a pre-norm residual multi-head block.
//!
//! Exact attention over `s` tokens materialises an `s×s` weight matrix. The
//! Nystrom path replaces it with three thin factors built from `m` landmark
//! rows (segment means of the queries and keys):
//!
//! ```text
//! S ≈ softmax(Q·K̃ᵀ/√d) · softmax(Q̃·K̃ᵀ/√d)⁺ · softmax(Q̃·Kᵀ/√d)
//! ```
//!
//! where the `m×m` pseudo-inverse comes from the Newton–Schulz iteration.
//! The factors are applied right-to-left, so nothing larger than `s×m` is
//! ever allocated and cost grows linearly in `s` for fixed `m`.

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Epsilon added inside the square root of every layer normalisation.
pub const LN_EPS: f64 = 1e-5;

/// Which attention kernel a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionMode {
    Exact,
    Nystrom,
}

/// Dimensions of a multi-head self-attention block.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MsaConfig {
    /// Token width `d`; queries, keys and values are packed `d×d` maps.
    pub model_dim: usize,
    /// Head count; must divide `model_dim`.
    pub heads: usize,
    /// Landmark budget per head for the Nystrom path.
    pub landmarks: usize,
    /// Newton–Schulz iterations for the landmark pseudo-inverse.
    pub pinv_iters: usize,
}

impl MsaConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.heads == 0 || self.model_dim == 0 {
            return Err(TensorError::Invalid {
                op: "msa_config",
                why: format!("model_dim={} and heads={} must be positive", self.model_dim, self.heads),
            });
        }
        if self.model_dim % self.heads != 0 {
            return Err(TensorError::Invalid {
                op: "msa_config",
                why: format!("heads={} must divide model_dim={}", self.heads, self.model_dim),
            });
        }
        if self.landmarks == 0 {
            return Err(TensorError::Invalid {
                op: "msa_config",
                why: "landmark count must be positive".to_string(),
            });
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }
}

/// Trainable parameters of one attention block.
#[derive(Debug, Clone)]
pub struct MsaWeights {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
    pub ln_gamma: Tensor,
    pub ln_beta: Tensor,
}

impl MsaWeights {
    /// Gaussian init scaled by `1/√d` for the projections; identity affine
    /// for the layer norm.
    pub fn init(d: usize, rng: &mut impl rand::Rng) -> MsaWeights {
        let std = 1.0 / (d as f64).sqrt();
        MsaWeights {
            w_q: Tensor::randn(&[d, d], std, rng).with_grad(),
            w_k: Tensor::randn(&[d, d], std, rng).with_grad(),
            w_v: Tensor::randn(&[d, d], std, rng).with_grad(),
            w_o: Tensor::randn(&[d, d], std, rng).with_grad(),
            ln_gamma: Tensor::filled(&[d], 1.0).with_grad(),
            ln_beta: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn zeros(d: usize) -> MsaWeights {
        MsaWeights {
            w_q: Tensor::zeros(&[d, d]).with_grad(),
            w_k: Tensor::zeros(&[d, d]).with_grad(),
            w_v: Tensor::zeros(&[d, d]).with_grad(),
            w_o: Tensor::zeros(&[d, d]).with_grad(),
            ln_gamma: Tensor::filled(&[d], 1.0).with_grad(),
            ln_beta: Tensor::zeros(&[d]).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> MsaParams {
        MsaParams {
            w_q: tape.leaf(&self.w_q),
            w_k: tape.leaf(&self.w_k),
            w_v: tape.leaf(&self.w_v),
            w_o: tape.leaf(&self.w_o),
            ln_gamma: tape.leaf(&self.ln_gamma),
            ln_beta: tape.leaf(&self.ln_beta),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 6] {
        [&self.w_q, &self.w_k, &self.w_v, &self.w_o, &self.ln_gamma, &self.ln_beta]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln_gamma,
            &mut self.ln_beta,
        ]
    }
}

/// Tape-bound handles to one block's parameters.
#[derive(Debug, Clone, Copy)]
pub struct MsaParams {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub w_o: TensorId,
    pub ln_gamma: TensorId,
    pub ln_beta: TensorId,
}

impl MsaParams {
    pub fn ids(&self) -> [TensorId; 6] {
        [self.w_q, self.w_k, self.w_v, self.w_o, self.ln_gamma, self.ln_beta]
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: TensorId, b: TensorId) -> Result<(), TensorError> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::ShapeMismatch {
            op,
            left: tape.shape(a).to_vec(),
            right: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Exact scaled-dot-product attention. Returns the context (`s×d`) and the
/// row-stochastic attention matrix (`s×s`).
pub fn exact_self_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
) -> Result<(TensorId, TensorId), TensorError> {
    same_shape(tape, "exact_self_attention", q, k)?;
    same_shape(tape, "exact_self_attention", k, v)?;
    let shape = tape.shape(q);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "exact_self_attention",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let d = shape[1];
    let kt = tape.transpose(k)?;
    let scores = tape.matmul(q, kt)?;
    let scaled = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let attn = tape.softmax_rows(scaled)?;
    let context = tape.matmul(attn, v)?;
    Ok((context, attn))
}

/// Contiguous segment boundaries used for landmark selection: `m` is clamped
/// to the row count, rows are split into runs of `⌈s/m⌉` (the last run may be
/// shorter, never empty).
pub fn landmark_segments(rows: usize, m: usize) -> Vec<(usize, usize)> {
    let m_eff = m.min(rows);
    let seg = rows.div_ceil(m_eff);
    let mut out = Vec::new();
    let mut start = 0;
    while start < rows {
        let end = (start + seg).min(rows);
        out.push((start, end));
        start = end;
    }
    out
}

/// Segment-mean landmarks: each output row is the mean of one contiguous run
/// of input rows. With `m >= rows` this is the identity.
pub fn select_landmarks(tape: &mut Tape, x: TensorId, m: usize) -> Result<TensorId, TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "select_landmarks",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    if m == 0 {
        return Err(TensorError::Invalid {
            op: "select_landmarks",
            why: "landmark count must be positive".to_string(),
        });
    }
    let rows = shape[0];
    let mut means = Vec::new();
    for (start, end) in landmark_segments(rows, m) {
        let slab = tape.slice_rows(x, start, end)?;
        means.push(tape.mean_rows(slab)?);
    }
    tape.concat_rows(&means)
}

/// The three Nystrom factors and the approximated context.
#[derive(Debug, Clone, Copy)]
pub struct NystromAttention {
    /// `softmax(Q·K̃ᵀ/√d)`, shape `s×m`.
    pub kernel_f: TensorId,
    /// Pseudo-inverse of `softmax(Q̃·K̃ᵀ/√d)`, shape `m×m`.
    pub kernel_a_pinv: TensorId,
    /// `softmax(Q̃·Kᵀ/√d)`, shape `m×s`.
    pub kernel_b: TensorId,
    /// Approximated `attn·V`, shape `s×d`.
    pub context: TensorId,
}

/// Nystrom-approximated attention. Factors are combined right-to-left
/// (`F·(A⁺·(B·V))`) so peak storage stays `O(s·max(m,d))`.
pub fn nystrom_attention(
    tape: &mut Tape,
    q: TensorId,
    k: TensorId,
    v: TensorId,
    landmarks: usize,
    pinv_iters: usize,
) -> Result<NystromAttention, TensorError> {
    same_shape(tape, "nystrom_attention", q, k)?;
    same_shape(tape, "nystrom_attention", k, v)?;
    let shape = tape.shape(q);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "nystrom_attention",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let d = shape[1];
    let scale = 1.0 / (d as f64).sqrt();

    let q_l = select_landmarks(tape, q, landmarks)?;
    let k_l = select_landmarks(tape, k, landmarks)?;

    let k_l_t = tape.transpose(k_l)?;
    let f_scores = tape.matmul(q, k_l_t)?;
    let f_scaled = tape.scale(f_scores, scale);
    let kernel_f = tape.softmax_rows(f_scaled)?;

    let a_scores = tape.matmul(q_l, k_l_t)?;
    let a_scaled = tape.scale(a_scores, scale);
    let kernel_a = tape.softmax_rows(a_scaled)?;
    let kernel_a_pinv = tape.pinv_newton_schulz(kernel_a, pinv_iters)?;

    let k_t = tape.transpose(k)?;
    let b_scores = tape.matmul(q_l, k_t)?;
    let b_scaled = tape.scale(b_scores, scale);
    let kernel_b = tape.softmax_rows(b_scaled)?;

    let bv = tape.matmul(kernel_b, v)?;
    let abv = tape.matmul(kernel_a_pinv, bv)?;
    let context = tape.matmul(kernel_f, abv)?;

    Ok(NystromAttention { kernel_f, kernel_a_pinv, kernel_b, context })
}

/// Per-head attention byproducts kept around so callers can read attention
/// weights back out (e.g. for heat maps) without rerunning the block.
#[derive(Debug, Clone)]
pub enum AttentionTrace {
    /// Full `s×s` attention matrices, one per head.
    Exact { attn: Vec<TensorId> },
    /// The three Nystrom factors per head.
    Nystrom { factors: Vec<NystromAttention> },
}

impl AttentionTrace {
    /// Attention paid by token `row` to every token, averaged over heads, as
    /// a `1×s` row. On the Nystrom path only that single row of the
    /// approximated matrix is reconstructed (`F[row]·A⁺·B`, cost `O(m·s)`).
    pub fn token_row(&self, tape: &mut Tape, row: usize) -> Result<TensorId, TensorError> {
        let rows: Vec<TensorId> = match self {
            AttentionTrace::Exact { attn } => attn
                .iter()
                .map(|&a| tape.slice_rows(a, row, row + 1))
                .collect::<Result<_, _>>()?,
            AttentionTrace::Nystrom { factors } => factors
                .iter()
                .map(|f| {
                    let fr = tape.slice_rows(f.kernel_f, row, row + 1)?;
                    let fa = tape.matmul(fr, f.kernel_a_pinv)?;
                    tape.matmul(fa, f.kernel_b)
                })
                .collect::<Result<_, _>>()?,
        };
        let mut acc = rows[0];
        for &r in &rows[1..] {
            acc = tape.add(acc, r)?;
        }
        Ok(tape.scale(acc, 1.0 / rows.len() as f64))
    }
}

/// Pre-norm residual multi-head self-attention:
/// `out = x + W_O·concat_h(attend(LN(x)·W_Q|h, LN(x)·W_K|h, LN(x)·W_V|h))`.
pub fn msa_block(
    tape: &mut Tape,
    x: TensorId,
    params: &MsaParams,
    cfg: &MsaConfig,
    mode: AttentionMode,
) -> Result<(TensorId, AttentionTrace), TensorError> {
    cfg.validate()?;
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != cfg.model_dim {
        return Err(TensorError::Invalid {
            op: "msa_block",
            why: format!("expected tokens of width {}, got shape {shape:?}", cfg.model_dim),
        });
    }
    let dq = cfg.head_dim();

    let xn = tape.layer_norm(x, params.ln_gamma, params.ln_beta, LN_EPS)?;
    let q = tape.matmul(xn, params.w_q)?;
    let k = tape.matmul(xn, params.w_k)?;
    let v = tape.matmul(xn, params.w_v)?;

    let mut head_ctx = Vec::with_capacity(cfg.heads);
    let mut exact_tr = Vec::new();
    let mut nystrom_tr = Vec::new();
    for h in 0..cfg.heads {
        let (lo, hi) = (h * dq, (h + 1) * dq);
        let hq = tape.slice_cols(q, lo, hi)?;
        let hk = tape.slice_cols(k, lo, hi)?;
        let hv = tape.slice_cols(v, lo, hi)?;
        match mode {
            AttentionMode::Exact => {
                let (ctx, attn) = exact_self_attention(tape, hq, hk, hv)?;
                head_ctx.push(ctx);
                exact_tr.push(attn);
            }
            AttentionMode::Nystrom => {
                let out = nystrom_attention(tape, hq, hk, hv, cfg.landmarks, cfg.pinv_iters)?;
                head_ctx.push(out.context);
                nystrom_tr.push(out);
            }
        }
    }

    let cat = tape.concat_cols(&head_ctx)?;
    let proj = tape.matmul(cat, params.w_o)?;
    let out = tape.add(x, proj)?;
    let trace = match mode {
        AttentionMode::Exact => AttentionTrace::Exact { attn: exact_tr },
        AttentionMode::Nystrom => AttentionTrace::Nystrom { factors: nystrom_tr },
    };
    Ok((out, trace))
}
