//! The correlated multiple-instance framework.
//!
//! A bag carries `n` instance embeddings and a single label; which
//! instances made the bag positive is unknown. Aggregators differ only in
//! how they mix instances before the read-out, and that mixing is always
//! expressible as one `n×n` pooling matrix `P`:
//!
//! ```text
//! X_fh = f(X) + h(X)      instance-wise + context features
//! X_P  = P · X_fh         pooling as a linear operator
//! ŷ    = g(X_P)           read-out
//! ```
//!
//! Diagonal `P` keeps instances independent (max, mean, score-weighted
//! pooling); a dense row-stochastic `P` lets instances exchange
//! information (self-attention). [`generic_three_step`] runs the pipeline
//! for any `(f, h, P, g)`; [`entropy`] quantifies why the correlated case
//! carries more information than the independent one.

pub mod entropy;

use std::fmt;

use crate::attention::exact_self_attention;
use crate::tensor::{Tape, Tensor, TensorError};

#[derive(Debug)]
pub enum MilError {
    /// A bag (or label list) with no instances.
    EmptyBag,
    /// Pooling constructor called with the wrong inputs for its kind.
    Pooling { kind: PoolingKind, why: String },
    /// Stage outputs that cannot be composed.
    Contract { stage: &'static str, why: String },
    /// An invalid probability table.
    Distribution { why: String },
    Tensor(TensorError),
}

impl fmt::Display for MilError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MilError::EmptyBag => write!(f, "bag has no instances"),
            MilError::Pooling { kind, why } => write!(f, "{kind} pooling: {why}"),
            MilError::Contract { stage, why } => write!(f, "{stage}: {why}"),
            MilError::Distribution { why } => write!(f, "joint distribution: {why}"),
            MilError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MilError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        match self {
            MilError::Tensor(e) => Some(e),
            _ => None,
        }
    }
}

impl From<TensorError> for MilError {
    fn from(e: TensorError) -> Self {
        MilError::Tensor(e)
    }
}

/// A bag of instances with one label for the whole collection.
#[derive(Debug, Clone)]
pub struct Bag {
    /// `n×d` instance embeddings.
    pub instances: Tensor,
    /// Class index of the bag. Instance labels are deliberately absent.
    pub label: usize,
    /// Source identifier (patient, slide, …) used for split hygiene.
    pub id: String,
}

impl Bag {
    pub fn new(instances: Tensor, label: usize, id: String) -> Result<Bag, MilError> {
        if instances.shape().len() != 2 {
            return Err(MilError::Contract {
                stage: "bag",
                why: format!("instances must be n×d, got shape {:?}", instances.shape()),
            });
        }
        Ok(Bag { instances, label, id })
    }

    pub fn instance_count(&self) -> usize {
        self.instances.shape()[0]
    }
}

/// The binary bag labelling rule: positive iff any instance is positive.
pub fn bag_label_rule(instance_labels: &[u8]) -> Result<u8, MilError> {
    if instance_labels.is_empty() {
        return Err(MilError::EmptyBag);
    }
    Ok(instance_labels.iter().any(|&y| y != 0) as u8)
}

/// The pooling-operator zoo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolingKind {
    /// One instance survives: a single diagonal 1 at the arg-max score.
    Max,
    /// Every instance weighted `1/n` on the diagonal.
    Mean,
    /// Externally supplied scores, normalised, on the diagonal.
    BypassAttention,
    /// Dense row-stochastic mixing computed from the features themselves.
    SelfAttention,
}

impl fmt::Display for PoolingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingKind::Max => "max",
            PoolingKind::Mean => "mean",
            PoolingKind::BypassAttention => "bypass-attention",
            PoolingKind::SelfAttention => "self-attention",
        })
    }
}

/// An `n×n` aggregation operator together with the kind whose structural
/// invariant it satisfies.
#[derive(Debug, Clone)]
pub struct PoolingMatrix {
    pub kind: PoolingKind,
    pub matrix: Tensor,
}

impl PoolingMatrix {
    /// Verifies the structural invariant of `kind`, entry by entry.
    pub fn check(&self) -> Result<(), MilError> {
        let shape = self.matrix.shape();
        let fail = |why: String| Err(MilError::Pooling { kind: self.kind, why });
        if shape.len() != 2 || shape[0] != shape[1] {
            return fail(format!("matrix must be square, got {shape:?}"));
        }
        let n = shape[0];
        let m = self.matrix.data();
        let diag_only = || m.iter().enumerate().all(|(i, &v)| i / n == i % n || v == 0.0);
        match self.kind {
            PoolingKind::Max => {
                let ones = m.iter().filter(|&&v| v != 0.0).count();
                let on_diag = (0..n).any(|i| m[i * n + i] == 1.0);
                if ones != 1 || !on_diag {
                    return fail("needs exactly one nonzero entry, a 1 on the diagonal".to_string());
                }
            }
            PoolingKind::Mean => {
                let w = 1.0 / n as f64;
                if !diag_only() || (0..n).any(|i| m[i * n + i] != w) {
                    return fail(format!("needs diag({w}) exactly"));
                }
            }
            PoolingKind::BypassAttention => {
                let diag_sum: f64 = (0..n).map(|i| m[i * n + i]).sum();
                if !diag_only()
                    || (0..n).any(|i| m[i * n + i] < 0.0)
                    || (diag_sum - 1.0).abs() > 1e-12
                {
                    return fail("needs a nonnegative diagonal summing to 1".to_string());
                }
            }
            PoolingKind::SelfAttention => {
                if m.iter().any(|&v| v < 0.0) {
                    return fail("entries must be nonnegative".to_string());
                }
                for i in 0..n {
                    let row: f64 = m[i * n..(i + 1) * n].iter().sum();
                    if (row - 1.0).abs() > 1e-12 {
                        return fail(format!("row {i} sums to {row}, not 1"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Builds a diagonal-family pooling matrix.
///
/// `scores` is required for `Max` (arg-max source) and `BypassAttention`
/// (weights, normalised here), and rejected for `Mean`. `SelfAttention`
/// needs the features themselves — use [`attention_pooling_matrix`].
pub fn build_pooling_matrix(
    kind: PoolingKind,
    scores: Option<&[f64]>,
    n: usize,
) -> Result<PoolingMatrix, MilError> {
    if n == 0 {
        return Err(MilError::EmptyBag);
    }
    let expect_scores = || -> Result<&[f64], MilError> {
        let s = scores.ok_or_else(|| MilError::Pooling {
            kind,
            why: "needs per-instance scores".to_string(),
        })?;
        if s.len() != n {
            return Err(MilError::Pooling {
                kind,
                why: format!("got {} scores for {n} instances", s.len()),
            });
        }
        Ok(s)
    };

    let mut m = vec![0.0; n * n];
    match kind {
        PoolingKind::Max => {
            let s = expect_scores()?;
            let best = s
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("scores must not be NaN"))
                .map(|(i, _)| i)
                .unwrap();
            // max_by keeps the last of equal elements; take the first.
            let first = s.iter().position(|&v| v == s[best]).unwrap();
            m[first * n + first] = 1.0;
        }
        PoolingKind::Mean => {
            if scores.is_some() {
                return Err(MilError::Pooling {
                    kind,
                    why: "takes no scores; weights are fixed at 1/n".to_string(),
                });
            }
            for i in 0..n {
                m[i * n + i] = 1.0 / n as f64;
            }
        }
        PoolingKind::BypassAttention => {
            let s = expect_scores()?;
            if s.iter().any(|&v| v < 0.0) {
                return Err(MilError::Pooling { kind, why: "scores must be nonnegative".to_string() });
            }
            let total: f64 = s.iter().sum();
            if total <= 0.0 {
                return Err(MilError::Pooling { kind, why: "scores must not all be zero".to_string() });
            }
            for i in 0..n {
                m[i * n + i] = s[i] / total;
            }
        }
        PoolingKind::SelfAttention => {
            return Err(MilError::Pooling {
                kind,
                why: "is computed from features; use attention_pooling_matrix".to_string(),
            });
        }
    }
    let pooling = PoolingMatrix { kind, matrix: Tensor::from_vec(&[n, n], m)? };
    pooling.check()?;
    Ok(pooling)
}

/// The dense correlated operator: `softmax(X·Xᵀ/√d)` over instance
/// features, row-stochastic by construction.
pub fn attention_pooling_matrix(features: &Tensor) -> Result<PoolingMatrix, MilError> {
    if features.shape().len() != 2 {
        return Err(MilError::Contract {
            stage: "attention pooling",
            why: format!("features must be n×d, got {:?}", features.shape()),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(features);
    let (_, attn) = exact_self_attention(&mut tape, x, x, x)?;
    let pooling = PoolingMatrix { kind: PoolingKind::SelfAttention, matrix: tape.detach(attn) };
    pooling.check()?;
    Ok(pooling)
}

/// Runs the three-step pipeline on one bag:
/// `g(P(f(X) + h(X)) · (f(X) + h(X)))`.
///
/// `f` and `h` must produce equal shapes with one row per pooled token;
/// the pooling builder sees `X_fh` and may also close over the raw bag;
/// `g` receives the pooled matrix and produces the class scores.
pub fn generic_three_step<F, H, P, G>(
    bag: &Bag,
    f: F,
    h: H,
    build_pooling: P,
    g: G,
) -> Result<Vec<f64>, MilError>
where
    F: FnOnce(&Tensor) -> Result<Tensor, MilError>,
    H: FnOnce(&Tensor) -> Result<Tensor, MilError>,
    P: FnOnce(&Tensor) -> Result<PoolingMatrix, MilError>,
    G: FnOnce(&Tensor) -> Result<Vec<f64>, MilError>,
{
    let xf = f(&bag.instances)?;
    let xh = h(&bag.instances)?;
    if xf.shape() != xh.shape() {
        return Err(MilError::Contract {
            stage: "f+h",
            why: format!("f gave {:?} but h gave {:?}", xf.shape(), xh.shape()),
        });
    }
    if xf.shape().len() != 2 {
        return Err(MilError::Contract {
            stage: "f+h",
            why: format!("instance features must stay rank 2, got {:?}", xf.shape()),
        });
    }
    let x_fh = Tensor::from_vec(
        xf.shape(),
        xf.data().iter().zip(xh.data()).map(|(a, b)| a + b).collect(),
    )?;

    let pooling = build_pooling(&x_fh)?;
    pooling.check()?;
    if pooling.matrix.shape()[1] != x_fh.shape()[0] {
        return Err(MilError::Contract {
            stage: "pooling",
            why: format!(
                "{}×{0} pooling cannot aggregate {} rows",
                pooling.matrix.shape()[0],
                x_fh.shape()[0]
            ),
        });
    }

    let mut tape = Tape::new();
    let p = tape.leaf(&pooling.matrix);
    let t = tape.leaf(&x_fh);
    let pooled = tape.matmul(p, t)?;
    g(&tape.detach(pooled))
}

/// Sums the rows of a pooled matrix into one aggregate feature row. The
/// diagonal operators rely on this to finish their reduction: mean pooling
/// leaves `x_i/n` rows, and their sum is the bag mean.
pub fn sum_rows(pooled: &Tensor) -> Vec<f64> {
    let (n, d) = (pooled.shape()[0], pooled.shape()[1]);
    let mut out = vec![0.0; d];
    for i in 0..n {
        for j in 0..d {
            out[j] += pooled.data()[i * d + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{AttentionMode, LN_EPS};
    use crate::model::{square_sequence, BagClassifier, ModelConfig, PosEncoding};
    use crate::naive;
    use crate::ppeg::{ppeg_forward, PpegWeights};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn bag_of(rows: usize, d: usize, seed: u64) -> Bag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Bag::new(Tensor::randn(&[rows, d], 1.0, &mut rng), 1, format!("bag-{seed}")).unwrap()
    }

    #[test]
    fn label_rule_flags_any_witness() {
        assert_eq!(bag_label_rule(&[0, 0, 0]).unwrap(), 0);
        assert_eq!(bag_label_rule(&[0, 1, 0]).unwrap(), 1);
        assert_eq!(bag_label_rule(&[1, 1, 1]).unwrap(), 1);
        assert_eq!(bag_label_rule(&[0]).unwrap(), 0);
        assert!(matches!(bag_label_rule(&[]), Err(MilError::EmptyBag)));
    }

    #[test]
    fn max_pooling_marks_the_first_argmax_on_the_diagonal() {
        let p = build_pooling_matrix(PoolingKind::Max, Some(&[0.1, 0.9, 0.3]), 3).unwrap();
        let mut want = vec![0.0; 9];
        want[4] = 1.0;
        assert_eq!(p.matrix.data(), &want);
        p.check().unwrap();

        // Ties resolve to the earliest instance.
        let tie = build_pooling_matrix(PoolingKind::Max, Some(&[0.5, 0.2, 0.5]), 3).unwrap();
        assert_eq!(tie.matrix.data()[0], 1.0);

        assert!(matches!(
            build_pooling_matrix(PoolingKind::Max, None, 3),
            Err(MilError::Pooling { kind: PoolingKind::Max, .. })
        ));
    }

    #[test]
    fn mean_pooling_is_a_fixed_diagonal() {
        let p = build_pooling_matrix(PoolingKind::Mean, None, 4).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { 0.25 } else { 0.0 };
                assert_eq!(p.matrix.data()[i * 4 + j], want);
            }
        }
        assert!(matches!(
            build_pooling_matrix(PoolingKind::Mean, Some(&[1.0; 4]), 4),
            Err(MilError::Pooling { kind: PoolingKind::Mean, .. })
        ));
    }

    #[test]
    fn bypass_pooling_normalises_scores() {
        let p = build_pooling_matrix(PoolingKind::BypassAttention, Some(&[1.0, 1.0]), 2).unwrap();
        assert_eq!(p.matrix.data(), &[0.5, 0.0, 0.0, 0.5]);

        let sparse =
            build_pooling_matrix(PoolingKind::BypassAttention, Some(&[2.0, 0.0, 2.0]), 3).unwrap();
        assert_eq!(sparse.matrix.data()[0], 0.5);
        assert_eq!(sparse.matrix.data()[4], 0.0);
        assert_eq!(sparse.matrix.data()[8], 0.5);

        assert!(build_pooling_matrix(PoolingKind::BypassAttention, Some(&[-1.0, 2.0]), 2).is_err());
        assert!(build_pooling_matrix(PoolingKind::BypassAttention, Some(&[0.0, 0.0]), 2).is_err());
    }

    #[test]
    fn self_attention_needs_features_not_scores() {
        assert!(matches!(
            build_pooling_matrix(PoolingKind::SelfAttention, Some(&[1.0, 1.0]), 2),
            Err(MilError::Pooling { kind: PoolingKind::SelfAttention, .. })
        ));
    }

    #[test]
    fn attention_pooling_matches_a_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng);
        let p = attention_pooling_matrix(&x).unwrap();
        p.check().unwrap();

        let xt = naive::transpose(x.data(), 4, 3);
        let mut logits = naive::matmul(x.data(), &xt, 4, 3, 4);
        for v in logits.iter_mut() {
            *v /= (3.0f64).sqrt();
        }
        let want = naive::softmax_rows(&logits, 4, 4);
        for (a, b) in p.matrix.data().iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn structural_invariants_reject_drifted_matrices() {
        let mut p = build_pooling_matrix(PoolingKind::Mean, None, 3).unwrap();
        p.matrix.data_mut()[1] = 0.1; // off-diagonal leak
        assert!(p.check().is_err());

        let mut q = build_pooling_matrix(PoolingKind::Max, Some(&[0.3, 0.7]), 2).unwrap();
        q.matrix.data_mut()[3] = 0.5; // second nonzero
        assert!(q.check().is_err());

        let bad = PoolingMatrix {
            kind: PoolingKind::SelfAttention,
            matrix: Tensor::from_vec(&[2, 2], vec![0.9, 0.2, 0.5, 0.5]).unwrap(),
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn three_step_mean_chain_is_hand_computable() {
        let bag = Bag::new(
            Tensor::from_vec(&[2, 2], vec![1.0, 10.0, 3.0, 30.0]).unwrap(),
            0,
            "hand".to_string(),
        )
        .unwrap();
        let scores = generic_three_step(
            &bag,
            |x| Ok(x.clone()),
            |x| Ok(Tensor::zeros(x.shape())),
            |x_fh| build_pooling_matrix(PoolingKind::Mean, None, x_fh.shape()[0]),
            |pooled| Ok(vec![sum_rows(pooled)[0]]),
        )
        .unwrap();
        assert!((scores[0] - 2.0).abs() < 1e-15, "mean of 1 and 3");
    }

    #[test]
    fn three_step_with_mean_pooling_equals_the_classic_baseline() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let bag = bag_of(7, 4, 8);
        let w = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let got = generic_three_step(
            &bag,
            |x| Ok(x.clone()),
            |x| Ok(Tensor::zeros(x.shape())),
            |x_fh| build_pooling_matrix(PoolingKind::Mean, None, x_fh.shape()[0]),
            |pooled| Ok(naive::matmul(&sum_rows(pooled), w.data(), 1, 4, 2)),
        )
        .unwrap();

        // Classic mean pooling: linear map of the bag-average feature.
        let mut mean = vec![0.0; 4];
        for i in 0..7 {
            for j in 0..4 {
                mean[j] += bag.instances.data()[i * 4 + j] / 7.0;
            }
        }
        let want = naive::matmul(&mean, w.data(), 1, 4, 2);
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn three_step_max_keeps_exactly_the_argmax_instance() {
        let bag = Bag::new(
            Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0]).unwrap(),
            1,
            "argmax".to_string(),
        )
        .unwrap();
        let scores = generic_three_step(
            &bag,
            |x| Ok(x.clone()),
            |x| Ok(Tensor::zeros(x.shape())),
            |x_fh| {
                // Score each instance by its first coordinate.
                let s: Vec<f64> = (0..x_fh.shape()[0]).map(|i| x_fh.row(i)[0]).collect();
                build_pooling_matrix(PoolingKind::Max, Some(&s), s.len())
            },
            |pooled| Ok(sum_rows(pooled)),
        )
        .unwrap();
        assert_eq!(scores, vec![5.0, 6.0]);
    }

    #[test]
    fn three_step_rejects_mismatched_f_and_h() {
        let bag = bag_of(3, 2, 9);
        let err = generic_three_step(
            &bag,
            |x| Ok(x.clone()),
            |_| Ok(Tensor::zeros(&[3, 5])),
            |x_fh| build_pooling_matrix(PoolingKind::Mean, None, x_fh.shape()[0]),
            |pooled| Ok(sum_rows(pooled)),
        )
        .unwrap_err();
        assert!(matches!(err, MilError::Contract { stage: "f+h", .. }));
    }

    /// The Transformer aggregator is one instantiation of the three-step
    /// pipeline: `f` extracts tokens up to the second layer's values, `P`
    /// is that layer's attention matrix, and `g` finishes the block and
    /// applies the head. Both routes must agree on the logits.
    #[test]
    fn transformer_fits_the_three_step_frame() {
        let cfg = ModelConfig {
            input_dim: 4,
            model_dim: 6,
            heads: 1, // single head keeps P a single matrix
            landmarks: 4,
            pinv_iters: 6,
            classes: 3,
            pos_encoding: PosEncoding::Ppeg,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut model = BagClassifier::init(cfg, &mut rng).unwrap();
        model.ppeg = PpegWeights::randn(cfg.model_dim, 0.3, &mut rng);
        model.class_token = Tensor::randn(&[1, 6], 1.0, &mut rng).with_grad();
        let bag = bag_of(5, 4, 11);

        // Reference: the fused pipeline.
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let tf = tape.leaf(&bag.instances);
        let pass = bound.forward(&mut tape, tf, AttentionMode::Exact).unwrap();
        let want = tape.value(pass.logits).to_vec();

        // Decomposed: tokens after the first layer and positional encoding.
        let mut pre = Tape::new();
        let b = model.bind(&mut pre);
        let x = pre.leaf(&bag.instances);
        let reduced = pre.matmul(x, b.reducer_w).unwrap();
        let reduced = pre.add_rowvec(reduced, b.reducer_b).unwrap();
        let (seq, _) = square_sequence(&mut pre, reduced, b.class_token).unwrap();
        let (x1, _) = crate::attention::msa_block(
            &mut pre,
            seq,
            &b.layer1,
            &cfg.msa_config(),
            AttentionMode::Exact,
        )
        .unwrap();
        let x1p = ppeg_forward(&mut pre, x1, &b.ppeg).unwrap();
        let tokens = pre.detach(x1p); // 10×6, class token first

        let d = cfg.model_dim;
        let rows = tokens.shape()[0];
        let ln = naive::layer_norm(
            tokens.data(),
            model.layer2.ln_gamma.data(),
            model.layer2.ln_beta.data(),
            rows,
            d,
            LN_EPS,
        );

        let got = generic_three_step(
            &bag,
            // f: everything up to the second layer's value features.
            |_| Ok(Tensor::from_vec(&[rows, d], naive::matmul(&ln, model.layer2.w_v.data(), rows, d, d))?),
            |_| Ok(Tensor::zeros(&[rows, d])),
            // P: the second layer's attention matrix over the same tokens.
            |_| {
                let q = naive::matmul(&ln, model.layer2.w_q.data(), rows, d, d);
                let k = naive::matmul(&ln, model.layer2.w_k.data(), rows, d, d);
                let kt = naive::transpose(&k, rows, d);
                let mut logits = naive::matmul(&q, &kt, rows, d, rows);
                for v in logits.iter_mut() {
                    *v /= (d as f64).sqrt();
                }
                let p = PoolingMatrix {
                    kind: PoolingKind::SelfAttention,
                    matrix: Tensor::from_vec(&[rows, rows], naive::softmax_rows(&logits, rows, rows))?,
                };
                Ok(p)
            },
            // g: output projection, residual, head norm, linear read-out.
            |pooled| {
                let proj = naive::matmul(pooled.data(), model.layer2.w_o.data(), rows, d, d);
                let class: Vec<f64> =
                    proj[0..d].iter().zip(&tokens.data()[0..d]).map(|(p, t)| p + t).collect();
                let normed = naive::layer_norm(
                    &class,
                    model.head_gamma.data(),
                    model.head_beta.data(),
                    1,
                    d,
                    LN_EPS,
                );
                let mut out = naive::matmul(&normed, model.head_w.data(), 1, d, cfg.classes);
                for (o, b) in out.iter_mut().zip(model.head_b.data()) {
                    *o += b;
                }
                Ok(out)
            },
        )
        .unwrap();

        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-9, "{got:?} vs {want:?}");
        }
    }
}
