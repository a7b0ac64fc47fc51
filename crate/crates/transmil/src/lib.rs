//! Correlated multiple-instance learning on instance bags, built around a
//! Transformer aggregator with Nystrom-approximated self-attention.
//!
//! The crate is organised bottom-up:
//!
//! * [`tensor`] — a small reverse-mode autodiff engine over dense `f64`
//!   tensors (row-major, 64-bit throughout). Every differentiable operation
//!   in the crate runs through its [`tensor::Tape`].
//! * [`attention`] — exact softmax self-attention and its Nystrom
//!   approximation with landmark selection and an iterative pseudo-inverse,
//!   packaged as a pre-norm residual multi-head block.
//! * [`ppeg`] — pyramid positional encoding: depthwise convolutions of three
//!   kernel sizes over tokens laid out on a square grid, plus the fixed
//!   sinusoidal encoding used as an ablation.
//! * [`model`] — the two-layer Transformer pipeline over bags: feature
//!   reduction, sequence squaring with a class token, two attention layers
//!   bracketing the positional encoding, and a linear read-out; includes
//!   attention heat-map export and a binary checkpoint format.
//! * [`mil`] — the generic pooling-matrix framework for bags of correlated
//!   instances, the bag labelling rule, and a discrete-entropy oracle for
//!   checking information inequalities on small joint distributions.
//! * [`data`] — synthetic witness-bag generation, a binary bag file format,
//!   dataset manifests, and patient-atomic splits.
//! * [`metrics`] — rank-based AUC (binary and macro one-vs-rest) and
//!   thresholded accuracy.
//! * [`train`] — cross-entropy loss, an adaptive-moment optimizer wrapped in
//!   slow/fast weight averaging, the training loop, and evaluation reports.

pub mod attention;
pub mod data;
pub mod metrics;
pub mod mil;
pub mod model;
pub mod ppeg;
pub mod tensor;
pub mod train;

#[cfg(test)]
mod naive;
