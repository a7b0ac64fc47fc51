//! The full bag classifier: feature reduction, sequence squaring, two
//! attention layers around a positional encoding, and a linear read-out.
//!
//! A bag of `n` instance features (`n×d_in`) flows through:
//!
//! 1. an affine reduction to the model width `d`,
//! 2. *squaring*: the sequence is padded to `N = ⌈√n⌉²` tokens by
//!    duplicating its first `N−n` rows, then a learned class token is
//!    prepended, giving `N+1` tokens on which the conv-based positional
//!    encoding has a square grid to work with,
//! 3. self-attention → positional encoding → self-attention,
//! 4. layer norm of the class-token row and a `d×C` linear head.
//!
//! Attention scores from the second layer double as instance heat maps:
//! the class-token row says how much each patch token contributed, and
//! [`fold_duplicates`] adds a duplicated token's share back onto the
//! instance it copies.

pub mod checkpoint;

use crate::attention::{msa_block, AttentionMode, AttentionTrace, MsaConfig, MsaParams, MsaWeights, LN_EPS};
use crate::ppeg::{ppeg_forward, sinusoidal_encoding, PpegParams, PpegWeights};
use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Pseudo-inverse iteration count used for training and by default
/// everywhere else. Enough for a good preconditioner; running the
/// iteration to convergence amplifies noise on near-singular landmark
/// matrices.
pub const DEFAULT_PINV_ITERS: usize = 6;

/// What sits between the two attention layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PosEncoding {
    /// Depthwise multi-scale convolutions over the token grid (the default).
    Ppeg,
    /// Fixed sinusoidal table, scaled down; the ablation alternative.
    Sinusoidal,
    /// No positional information at all.
    None,
}

/// Hyper-parameters fixing every tensor shape in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    /// Instance feature width fed to the reducer.
    pub input_dim: usize,
    /// Token width `d` used throughout the pipeline.
    pub model_dim: usize,
    /// Attention heads per layer.
    pub heads: usize,
    /// Landmark budget for the Nystrom attention path.
    pub landmarks: usize,
    /// Newton–Schulz iterations for the landmark pseudo-inverse.
    pub pinv_iters: usize,
    /// Output classes; the head emits one logit per class.
    pub classes: usize,
    /// Positional encoding between the attention layers.
    pub pos_encoding: PosEncoding,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if self.input_dim == 0 {
            return Err(TensorError::Invalid { op: "model_config", why: "input_dim must be positive".to_string() });
        }
        if self.classes < 2 {
            return Err(TensorError::Invalid {
                op: "model_config",
                why: format!("need at least two classes, got {}", self.classes),
            });
        }
        self.msa_config().validate()
    }

    pub fn msa_config(&self) -> MsaConfig {
        MsaConfig {
            model_dim: self.model_dim,
            heads: self.heads,
            landmarks: self.landmarks,
            pinv_iters: self.pinv_iters,
        }
    }
}

/// Geometry of a squared sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SquareShape {
    /// Original instance count `n`.
    pub instances: usize,
    /// Grid side `⌈√n⌉`.
    pub side: usize,
}

impl SquareShape {
    pub fn for_instances(n: usize) -> SquareShape {
        let mut side = n.isqrt();
        if side * side < n {
            side += 1;
        }
        SquareShape { instances: n, side }
    }

    /// Patch tokens after squaring: `side²`.
    pub fn grid(&self) -> usize {
        self.side * self.side
    }

    /// Patch tokens plus the class token.
    pub fn tokens(&self) -> usize {
        self.grid() + 1
    }

    /// How many leading instances were duplicated to fill the grid.
    pub fn duplicated(&self) -> usize {
        self.grid() - self.instances
    }
}

/// Pads `features` (`n×d`) to a perfect-square token count by duplicating
/// its first `N−n` rows, then prepends `class_token` (`1×d`).
pub fn square_sequence(
    tape: &mut Tape,
    features: TensorId,
    class_token: TensorId,
) -> Result<(TensorId, SquareShape), TensorError> {
    let shape = tape.shape(features);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch { op: "square_sequence", expected: 2, shape: shape.to_vec() });
    }
    let (n, d) = (shape[0], shape[1]);
    let ct = tape.shape(class_token);
    if ct != [1, d] {
        return Err(TensorError::ShapeMismatch {
            op: "square_sequence",
            left: ct.to_vec(),
            right: vec![1, d],
        });
    }
    let sq = SquareShape::for_instances(n);
    // side² − n ≤ 2·side − 2 ≤ (side−1)² + 1 ≤ n, so one copy of the
    // leading rows always suffices.
    debug_assert!(sq.duplicated() <= n);
    let seq = if sq.duplicated() == 0 {
        tape.concat_rows(&[class_token, features])?
    } else {
        let dup = tape.slice_rows(features, 0, sq.duplicated())?;
        tape.concat_rows(&[class_token, features, dup])?
    };
    Ok((seq, sq))
}

/// All learnable state of the classifier.
#[derive(Debug, Clone)]
pub struct BagClassifier {
    pub config: ModelConfig,
    pub reducer_w: Tensor,
    pub reducer_b: Tensor,
    pub class_token: Tensor,
    pub layer1: MsaWeights,
    pub ppeg: PpegWeights,
    pub layer2: MsaWeights,
    pub head_gamma: Tensor,
    pub head_beta: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

impl BagClassifier {
    pub fn init(config: ModelConfig, rng: &mut impl rand::Rng) -> Result<BagClassifier, TensorError> {
        config.validate()?;
        let (d_in, d, c) = (config.input_dim, config.model_dim, config.classes);
        Ok(BagClassifier {
            config,
            reducer_w: Tensor::randn(&[d_in, d], 1.0 / (d_in as f64).sqrt(), rng).with_grad(),
            reducer_b: Tensor::zeros(&[d]).with_grad(),
            class_token: Tensor::zeros(&[1, d]).with_grad(),
            layer1: MsaWeights::init(d, rng),
            ppeg: PpegWeights::zeros(d),
            layer2: MsaWeights::init(d, rng),
            head_gamma: Tensor::filled(&[d], 1.0).with_grad(),
            head_beta: Tensor::zeros(&[d]).with_grad(),
            head_w: Tensor::randn(&[d, c], 1.0 / (d as f64).sqrt(), rng).with_grad(),
            head_b: Tensor::zeros(&[c]).with_grad(),
        })
    }

    /// All-zero weights of the right shapes (head norm gain included), used
    /// by tests and as a loading skeleton.
    pub fn zeros(config: ModelConfig) -> Result<BagClassifier, TensorError> {
        config.validate()?;
        let (d_in, d, c) = (config.input_dim, config.model_dim, config.classes);
        Ok(BagClassifier {
            config,
            reducer_w: Tensor::zeros(&[d_in, d]).with_grad(),
            reducer_b: Tensor::zeros(&[d]).with_grad(),
            class_token: Tensor::zeros(&[1, d]).with_grad(),
            layer1: MsaWeights::zeros(d),
            ppeg: PpegWeights::zeros(d),
            layer2: MsaWeights::zeros(d),
            head_gamma: Tensor::zeros(&[d]).with_grad(),
            head_beta: Tensor::zeros(&[d]).with_grad(),
            head_w: Tensor::zeros(&[d, c]).with_grad(),
            head_b: Tensor::zeros(&[c]).with_grad(),
        })
    }

    /// Parameters in checkpoint order. The order is part of the on-disk
    /// format; see [`checkpoint`].
    pub fn parameters(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = vec![&self.reducer_w, &self.reducer_b, &self.class_token];
        out.extend(self.layer1.tensors());
        out.extend(self.ppeg.tensors());
        out.extend(self.layer2.tensors());
        out.extend([&self.head_gamma, &self.head_beta, &self.head_w, &self.head_b]);
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = vec![&mut self.reducer_w, &mut self.reducer_b, &mut self.class_token];
        out.extend(self.layer1.tensors_mut());
        out.extend(self.ppeg.tensors_mut());
        out.extend(self.layer2.tensors_mut());
        out.extend([&mut self.head_gamma, &mut self.head_beta, &mut self.head_w, &mut self.head_b]);
        out
    }

    /// Registers every parameter on `tape`, in [`Self::parameters`] order.
    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        let ids: Vec<TensorId> = self.parameters().iter().map(|t| tape.leaf(t)).collect();
        BoundModel::from_ids(self.config, &ids)
    }
}

/// Tape-bound handles for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct BoundModel {
    pub config: ModelConfig,
    pub reducer_w: TensorId,
    pub reducer_b: TensorId,
    pub class_token: TensorId,
    pub layer1: MsaParams,
    pub ppeg: PpegParams,
    pub layer2: MsaParams,
    pub head_gamma: TensorId,
    pub head_beta: TensorId,
    pub head_w: TensorId,
    pub head_b: TensorId,
}

impl BoundModel {
    /// Reassembles handles laid out in [`BagClassifier::parameters`] order.
    pub fn from_ids(config: ModelConfig, ids: &[TensorId]) -> BoundModel {
        assert_eq!(ids.len(), 22, "expected the 22 model parameters");
        BoundModel {
            config,
            reducer_w: ids[0],
            reducer_b: ids[1],
            class_token: ids[2],
            layer1: MsaParams {
                w_q: ids[3],
                w_k: ids[4],
                w_v: ids[5],
                w_o: ids[6],
                ln_gamma: ids[7],
                ln_beta: ids[8],
            },
            ppeg: PpegParams { k3: ids[9], k5: ids[10], k7: ids[11] },
            layer2: MsaParams {
                w_q: ids[12],
                w_k: ids[13],
                w_v: ids[14],
                w_o: ids[15],
                ln_gamma: ids[16],
                ln_beta: ids[17],
            },
            head_gamma: ids[18],
            head_beta: ids[19],
            head_w: ids[20],
            head_b: ids[21],
        }
    }

    pub fn ids(&self) -> Vec<TensorId> {
        let mut out = vec![self.reducer_w, self.reducer_b, self.class_token];
        out.extend(self.layer1.ids());
        out.extend(self.ppeg.ids());
        out.extend(self.layer2.ids());
        out.extend([self.head_gamma, self.head_beta, self.head_w, self.head_b]);
        out
    }

    /// Runs the pipeline on one bag of `n×d_in` features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        features: TensorId,
        mode: AttentionMode,
    ) -> Result<ForwardPass, TensorError> {
        let cfg = &self.config;
        let shape = tape.shape(features);
        if shape.len() != 2 || shape[1] != cfg.input_dim {
            return Err(TensorError::Invalid {
                op: "forward",
                why: format!("expected n×{} instance features, got shape {shape:?}", cfg.input_dim),
            });
        }

        let reduced = tape.matmul(features, self.reducer_w)?;
        let reduced = tape.add_rowvec(reduced, self.reducer_b)?;
        let (seq, shape) = square_sequence(tape, reduced, self.class_token)?;

        let msa = cfg.msa_config();
        let (x1, _) = msa_block(tape, seq, &self.layer1, &msa, mode)?;
        let encoded = match cfg.pos_encoding {
            PosEncoding::Ppeg => ppeg_forward(tape, x1, &self.ppeg)?,
            PosEncoding::Sinusoidal => sinusoidal_encoding(tape, x1)?,
            PosEncoding::None => x1,
        };
        let (x2, layer2) = msa_block(tape, encoded, &self.layer2, &msa, mode)?;

        let class_row = tape.slice_rows(x2, 0, 1)?;
        let normed = tape.layer_norm(class_row, self.head_gamma, self.head_beta, LN_EPS)?;
        let logits = tape.matmul(normed, self.head_w)?;
        let logits = tape.add_rowvec(logits, self.head_b)?;

        Ok(ForwardPass { logits, layer2, shape })
    }
}

/// Handles produced by one forward pass.
pub struct ForwardPass {
    /// `1×classes` logits for the bag.
    pub logits: TensorId,
    /// Second-layer attention, for heat maps.
    pub layer2: AttentionTrace,
    /// Squaring geometry of the bag.
    pub shape: SquareShape,
}

/// Attention paid by the class token to each patch token (grid order,
/// length `side²`), averaged over heads of the second layer.
pub fn class_attention(tape: &mut Tape, pass: &ForwardPass) -> Result<Vec<f64>, TensorError> {
    let row = pass.layer2.token_row(tape, 0)?;
    Ok(tape.value(row)[1..].to_vec())
}

/// Adds each duplicated token's score back onto the instance it copies.
/// `patch_scores` is in grid order; the result has one entry per instance.
pub fn fold_duplicates(patch_scores: &[f64], instances: usize) -> Vec<f64> {
    assert!(instances <= patch_scores.len());
    let mut folded = patch_scores[..instances].to_vec();
    for (i, &extra) in patch_scores[instances..].iter().enumerate() {
        folded[i] += extra;
    }
    folded
}

/// Min–max normalisation onto `[0, 1]`; a constant input maps to all `0.5`.
pub fn normalize_unit(scores: &[f64]) -> Vec<f64> {
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= 0.0 {
        return vec![0.5; scores.len()];
    }
    scores.iter().map(|&s| (s - min) / (max - min)).collect()
}

/// Per-instance attention scores normalised onto `[0, 1]`, with the grid
/// geometry needed to plot them.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub side: usize,
    /// One score per instance, in bag order.
    pub scores: Vec<f64>,
}

/// Folds and normalises the class-token attention of a forward pass.
pub fn attention_heatmap(tape: &mut Tape, pass: &ForwardPass) -> Result<Heatmap, TensorError> {
    let patches = class_attention(tape, pass)?;
    let folded = fold_duplicates(&patches, pass.shape.instances);
    Ok(Heatmap { side: pass.shape.side, scores: normalize_unit(&folded) })
}
