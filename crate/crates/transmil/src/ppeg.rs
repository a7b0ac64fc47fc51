//! Pyramid positional encoding over squared token sequences.
//!
//! The patch tokens of an `(N+1)×d` sequence (class token first, `N` a
//! perfect square) are laid out on a `√N×√N` grid in row-major order, one
//! channel per feature. Three depthwise convolutions with kernel sizes 3, 5
//! and 7 (zero padding preserves the extent) are summed with the input:
//!
//! ```text
//! fused = grid + conv3(grid) + conv5(grid) + conv7(grid)
//! ```
//!
//! then flattened back and re-prefixed with the untouched class token.
//! Kernels start at zero, so a freshly initialised encoder is the identity
//! and the surrounding network decides how much spatial context to mix in.
//!
//! [`sinusoidal_encoding`] is the fixed-frequency alternative used in
//! ablations: the classic interleaved sine/cosine table scaled down by
//! `1e-3`, indexed by row position.

use crate::tensor::{Tape, Tensor, TensorError, TensorId};

/// Scale applied to the fixed sinusoidal table.
pub const SINUSOIDAL_SCALE: f64 = 1e-3;

/// The three depthwise kernel banks, one kernel per channel each.
#[derive(Debug, Clone)]
pub struct PpegWeights {
    pub k3: Tensor,
    pub k5: Tensor,
    pub k7: Tensor,
}

impl PpegWeights {
    /// Zero kernels: the encoder starts as the identity.
    pub fn zeros(d: usize) -> PpegWeights {
        PpegWeights {
            k3: Tensor::zeros(&[d, 3, 3]).with_grad(),
            k5: Tensor::zeros(&[d, 5, 5]).with_grad(),
            k7: Tensor::zeros(&[d, 7, 7]).with_grad(),
        }
    }

    /// Gaussian kernels, used to probe order sensitivity in tests.
    pub fn randn(d: usize, std: f64, rng: &mut impl rand::Rng) -> PpegWeights {
        PpegWeights {
            k3: Tensor::randn(&[d, 3, 3], std, rng).with_grad(),
            k5: Tensor::randn(&[d, 5, 5], std, rng).with_grad(),
            k7: Tensor::randn(&[d, 7, 7], std, rng).with_grad(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> PpegParams {
        PpegParams {
            k3: tape.leaf(&self.k3),
            k5: tape.leaf(&self.k5),
            k7: tape.leaf(&self.k7),
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.k3, &self.k5, &self.k7]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.k3, &mut self.k5, &mut self.k7]
    }
}

/// Tape-bound kernel handles.
#[derive(Debug, Clone, Copy)]
pub struct PpegParams {
    pub k3: TensorId,
    pub k5: TensorId,
    pub k7: TensorId,
}

impl PpegParams {
    pub fn ids(&self) -> [TensorId; 3] {
        [self.k3, self.k5, self.k7]
    }
}

/// Applies the pyramid encoding to an `(N+1)×d` sequence whose first row is
/// the class token. `N` must be a perfect square.
pub fn ppeg_forward(tape: &mut Tape, h: TensorId, params: &PpegParams) -> Result<TensorId, TensorError> {
    let shape = tape.shape(h);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch { op: "ppeg_forward", expected: 2, shape: shape.to_vec() });
    }
    let (rows, d) = (shape[0], shape[1]);
    if rows < 2 {
        return Err(TensorError::Invalid {
            op: "ppeg_forward",
            why: "sequence needs a class token and at least one patch token".to_string(),
        });
    }
    let n = rows - 1;
    let r = n.isqrt();
    if r * r != n {
        return Err(TensorError::Invalid {
            op: "ppeg_forward",
            why: format!("patch count {n} is not a perfect square"),
        });
    }

    let class = tape.slice_rows(h, 0, 1)?;
    let patches = tape.slice_rows(h, 1, rows)?;
    // Row-major N×d tokens become d channel planes of the √N×√N grid.
    let channels_first = tape.transpose(patches)?;
    let grid = tape.reshape(channels_first, &[d, r, r])?;

    let c3 = tape.depthwise_conv2d(grid, params.k3)?;
    let c5 = tape.depthwise_conv2d(grid, params.k5)?;
    let c7 = tape.depthwise_conv2d(grid, params.k7)?;
    let fused = tape.add(grid, c3)?;
    let fused = tape.add(fused, c5)?;
    let fused = tape.add(fused, c7)?;

    let flat = tape.reshape(fused, &[d, n])?;
    let tokens = tape.transpose(flat)?;
    tape.concat_rows(&[class, tokens])
}

/// Adds the fixed sinusoidal position table, scaled by
/// [`SINUSOIDAL_SCALE`], to every row of `x`. Position is the row index;
/// even feature columns get the sine channel, odd columns the cosine, with
/// frequencies descending by powers of 10000.
pub fn sinusoidal_encoding(tape: &mut Tape, x: TensorId) -> Result<TensorId, TensorError> {
    let shape = tape.shape(x);
    if shape.len() != 2 {
        return Err(TensorError::RankMismatch {
            op: "sinusoidal_encoding",
            expected: 2,
            shape: shape.to_vec(),
        });
    }
    let (rows, d) = (shape[0], shape[1]);
    let mut table = vec![0.0; rows * d];
    for pos in 0..rows {
        for j in 0..d {
            let pair = (j / 2) * 2;
            let freq = 1.0 / 10000f64.powf(pair as f64 / d as f64);
            let angle = pos as f64 * freq;
            table[pos * d + j] =
                SINUSOIDAL_SCALE * if j % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    let enc = tape.constant_from(&[rows, d], table)?;
    tape.add(x, enc)
}
