use super::{Tensor, TensorError, check_shape};

/// Handle to a value recorded on a [`Tape`]. Only meaningful for the tape
/// that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: TensorId, b: TensorId },
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Scale { a: TensorId, factor: f64 },
    ScaleBy { a: TensorId, s: TensorId },
    AddRowVec { a: TensorId, bias: TensorId },
    Transpose { a: TensorId },
    Reshape { a: TensorId },
    ConcatRows { parts: Vec<TensorId> },
    SliceRows { a: TensorId, start: usize },
    ConcatCols { parts: Vec<TensorId> },
    SliceCols { a: TensorId, start: usize },
    SoftmaxRows { a: TensorId },
    LayerNorm { x: TensorId, gamma: TensorId, beta: TensorId, eps: f64 },
    DepthwiseConv2d { x: TensorId, kernels: TensorId },
    MeanRows { a: TensorId },
    MeanAll { a: TensorId },
    SumAll { a: TensorId },
    Relu { a: TensorId },
    Gelu { a: TensorId },
    MatrixNorm1 { a: TensorId },
    MatrixNormInf { a: TensorId },
    Recip { a: TensorId },
    CrossEntropy { logits: TensorId, label: usize },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    op: Op,
}

/// Reverse-mode autodiff tape.
///
/// Built for a single forward pass: register leaves, apply operations (each
/// returns a fresh [`TensorId`]), then call [`Tape::backward`] on a scalar
/// result. Gradients of intermediate nodes are reset at the start of every
/// backward call; gradients of leaves accumulate across calls until
/// [`Tape::zero_grads`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

// ── Raw matmul kernels ──────────────────────────────────────────────────────
// Loop orders chosen for sequential access on row-major data.

fn mm_nn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let b_row = &b[kk * n..(kk + 1) * n];
                for (o, &bv) in o_row.iter_mut().zip(b_row) {
                    *o += av * bv;
                }
            }
        }
    }
    out
}

/// `a (m×k) · bᵀ` where `b` is `n×k`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            out[i * n + j] = a_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
        }
    }
    out
}

/// `aᵀ · g` where `a` is `m×k` and `g` is `m×n`; result `k×n`.
fn mm_tn(a: &[f64], g: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av != 0.0 {
                let o_row = &mut out[kk * n..(kk + 1) * n];
                for (o, &gv) in o_row.iter_mut().zip(g_row) {
                    *o += av * gv;
                }
            }
        }
    }
    out
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

const GELU_C: f64 = 0.797884560802865; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Tape {
    pub fn new() -> Tape {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Largest element count among all recorded values. Lets callers assert
    /// peak-buffer contracts (e.g. that linear attention never materialises a
    /// sequence-by-sequence matrix).
    pub fn max_node_elems(&self) -> usize {
        self.nodes.iter().map(|n| n.data.len()).max().unwrap_or(0)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, needs_grad: bool, op: Op) -> TensorId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, grad: None, needs_grad, op });
        TensorId(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf, copying its data onto the tape.
    pub fn leaf(&mut self, t: &Tensor) -> TensorId {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Registers constant data that never receives a gradient.
    pub fn constant_from(&mut self, shape: &[usize], data: Vec<f64>) -> Result<TensorId, TensorError> {
        let numel = check_shape(shape)?;
        if data.len() != numel {
            return Err(TensorError::DataLength { expected: numel, got: data.len() });
        }
        Ok(self.push(shape.to_vec(), data, false, Op::Leaf))
    }

    fn check(&self, id: TensorId, op: &'static str) -> Result<(), TensorError> {
        if id.0 >= self.nodes.len() {
            return Err(TensorError::OutOfRange { op, index: id.0, bound: self.nodes.len() });
        }
        Ok(())
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn value(&self, id: TensorId) -> &[f64] {
        &self.nodes[id.0].data
    }

    pub fn grad(&self, id: TensorId) -> Option<&[f64]> {
        self.nodes[id.0].grad.as_deref()
    }

    /// Copies a recorded value out as a standalone tensor.
    pub fn detach(&self, id: TensorId) -> Tensor {
        Tensor::from_vec(self.shape(id), self.value(id).to_vec())
            .expect("tape nodes always hold consistent shapes")
    }

    pub fn zero_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn needs(&self, id: TensorId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize), TensorError> {
        let s = self.shape(id);
        if s.len() != 2 {
            return Err(TensorError::RankMismatch { op, expected: 2, shape: s.to_vec() });
        }
        Ok((s[0], s[1]))
    }

    // ── Elementwise and shape operations ────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = mm_nn(self.value(a), self.value(b), m, ka, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(vec![m, n], data, needs, Op::Matmul { a, b }))
    }

    fn zip_elementwise(
        &mut self,
        a: TensorId,
        b: TensorId,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        record: Op,
    ) -> Result<TensorId, TensorError> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(self.shape(a).to_vec(), data, needs, record))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise(a, b, "add", |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.zip_elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: TensorId, factor: f64) -> TensorId {
        let data = self.value(a).iter().map(|&x| x * factor).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Scale { a, factor })
    }

    /// Multiplies every element of `a` by the single-element tensor `s`.
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> Result<TensorId, TensorError> {
        if self.value(s).len() != 1 {
            return Err(TensorError::NotScalar { op: "scale_by", shape: self.shape(s).to_vec() });
        }
        let sv = self.value(s)[0];
        let data = self.value(a).iter().map(|&x| x * sv).collect();
        let needs = self.needs(a) || self.needs(s);
        Ok(self.push(self.shape(a).to_vec(), data, needs, Op::ScaleBy { a, s }))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_rowvec(&mut self, a: TensorId, bias: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "add_rowvec")?;
        if self.value(bias).len() != n {
            return Err(TensorError::ShapeMismatch {
                op: "add_rowvec",
                left: self.shape(a).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let mut data = self.value(a).to_vec();
        let b = self.value(bias);
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += b[j];
            }
        }
        let needs = self.needs(a) || self.needs(bias);
        Ok(self.push(vec![m, n], data, needs, Op::AddRowVec { a, bias }))
    }

    pub fn transpose(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = src[i * n + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![n, m], data, needs, Op::Transpose { a }))
    }

    pub fn reshape(&mut self, a: TensorId, shape: &[usize]) -> Result<TensorId, TensorError> {
        let numel = check_shape(shape)?;
        if numel != self.value(a).len() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(a).to_vec(),
                right: shape.to_vec(),
            });
        }
        let data = self.value(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(shape.to_vec(), data, needs, Op::Reshape { a }))
    }

    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyShape { op: "concat_rows" });
        }
        let (_, n) = self.dims2(parts[0], "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_rows")?;
            if pn != n {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            rows += pm;
            data.extend_from_slice(self.value(p));
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![rows, n], data, needs, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if start >= end || end > m {
            return Err(TensorError::OutOfRange { op: "slice_rows", index: end, bound: m });
        }
        let data = self.value(a)[start * n..end * n].to_vec();
        let needs = self.needs(a);
        Ok(self.push(vec![end - start, n], data, needs, Op::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId, TensorError> {
        if parts.is_empty() {
            return Err(TensorError::EmptyShape { op: "concat_cols" });
        }
        let (m, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.dims2(p, "concat_cols")?;
            if pm != m {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(parts[0]).to_vec(),
                    right: self.shape(p).to_vec(),
                });
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p);
            for i in 0..m {
                data[i * total + offset..i * total + offset + w]
                    .copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(vec![m, total], data, needs, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: TensorId, start: usize, end: usize) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::OutOfRange { op: "slice_cols", index: end, bound: n });
        }
        let w = end - start;
        let src = self.value(a);
        let mut data = vec![0.0; m * w];
        for i in 0..m {
            data[i * w..(i + 1) * w].copy_from_slice(&src[i * n + start..i * n + end]);
        }
        let needs = self.needs(a);
        Ok(self.push(vec![m, w], data, needs, Op::SliceCols { a, start }))
    }

    // ── Nonlinearities and reductions ───────────────────────────────────────

    /// Row-wise softmax of a matrix, stabilised by the row maximum.
    pub fn softmax_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "softmax_rows")?;
        let src = self.value(a);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * n..(i + 1) * n];
            let mut sum = 0.0;
            for (o, &x) in out.iter_mut().zip(row) {
                *o = (x - max).exp();
                sum += *o;
            }
            for o in out.iter_mut() {
                *o /= sum;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![m, n], data, needs, Op::SoftmaxRows { a }))
    }

    /// Per-row layer normalisation with affine parameters.
    ///
    /// Uses the biased variance (divide by the row width) and adds `eps`
    /// inside the square root.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> Result<TensorId, TensorError> {
        let (m, d) = self.dims2(x, "layer_norm")?;
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                left: self.shape(x).to_vec(),
                right: self.shape(gamma).to_vec(),
            });
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv * g[j] + b[j];
            }
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(vec![m, d], data, needs, Op::LayerNorm { x, gamma, beta, eps }))
    }

    /// Depthwise 2-D convolution: input `[c, h, w]`, one odd-sized square
    /// kernel per channel `[c, k, k]`, zero padding of `(k-1)/2` so spatial
    /// extents are preserved.
    pub fn depthwise_conv2d(&mut self, x: TensorId, kernels: TensorId) -> Result<TensorId, TensorError> {
        let xs = self.shape(x).to_vec();
        let ks = self.shape(kernels).to_vec();
        if xs.len() != 3 {
            return Err(TensorError::RankMismatch { op: "depthwise_conv2d", expected: 3, shape: xs });
        }
        if ks.len() != 3 || ks[1] != ks[2] {
            return Err(TensorError::Invalid {
                op: "depthwise_conv2d",
                why: format!("kernels must have shape [channels, k, k], got {ks:?}"),
            });
        }
        if ks[0] != xs[0] {
            return Err(TensorError::ShapeMismatch { op: "depthwise_conv2d", left: xs, right: ks });
        }
        let k = ks[1];
        if k % 2 == 0 {
            return Err(TensorError::Invalid {
                op: "depthwise_conv2d",
                why: format!("kernel size must be odd, got {k}"),
            });
        }
        let (c, h, w) = (xs[0], xs[1], xs[2]);
        let pad = (k - 1) / 2;
        let src = self.value(x);
        let kern = self.value(kernels);
        let mut data = vec![0.0; c * h * w];
        for ch in 0..c {
            let plane = &src[ch * h * w..(ch + 1) * h * w];
            let kc = &kern[ch * k * k..(ch + 1) * k * k];
            let out = &mut data[ch * h * w..(ch + 1) * h * w];
            for i in 0..h {
                for j in 0..w {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let ii = i + u;
                        if ii < pad || ii - pad >= h {
                            continue;
                        }
                        for v in 0..k {
                            let jj = j + v;
                            if jj < pad || jj - pad >= w {
                                continue;
                            }
                            acc += plane[(ii - pad) * w + (jj - pad)] * kc[u * k + v];
                        }
                    }
                    out[i * w + j] = acc;
                }
            }
        }
        let needs = self.needs(x) || self.needs(kernels);
        Ok(self.push(vec![c, h, w], data, needs, Op::DepthwiseConv2d { x, kernels }))
    }

    /// Column means of a matrix, as a `1×n` row.
    pub fn mean_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "mean_rows")?;
        let src = self.value(a);
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += src[i * n + j];
            }
        }
        for v in data.iter_mut() {
            *v /= m as f64;
        }
        let needs = self.needs(a);
        Ok(self.push(vec![1, n], data, needs, Op::MeanRows { a }))
    }

    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let numel = self.value(a).len() as f64;
        let v = self.value(a).iter().sum::<f64>() / numel;
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::MeanAll { a })
    }

    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let v = self.value(a).iter().sum::<f64>();
        let needs = self.needs(a);
        self.push(vec![1], vec![v], needs, Op::SumAll { a })
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Relu { a })
    }

    /// Gaussian error linear unit (tanh approximation).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data = self
            .value(a)
            .iter()
            .map(|&x| 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()))
            .collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Gelu { a })
    }

    /// Matrix 1-norm: maximum absolute column sum. Ties break toward the
    /// earliest column in backward.
    pub fn matrix_norm1(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "matrix_norm1")?;
        let src = self.value(a);
        let mut best = f64::NEG_INFINITY;
        for j in 0..n {
            let s: f64 = (0..m).map(|i| src[i * n + j].abs()).sum();
            if s > best {
                best = s;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![1], vec![best], needs, Op::MatrixNorm1 { a }))
    }

    /// Matrix infinity-norm: maximum absolute row sum.
    pub fn matrix_norm_inf(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "matrix_norm_inf")?;
        let src = self.value(a);
        let mut best = f64::NEG_INFINITY;
        for i in 0..m {
            let s: f64 = src[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
            if s > best {
                best = s;
            }
        }
        let needs = self.needs(a);
        Ok(self.push(vec![1], vec![best], needs, Op::MatrixNormInf { a }))
    }

    /// Elementwise reciprocal.
    pub fn recip(&mut self, a: TensorId) -> TensorId {
        let data = self.value(a).iter().map(|&x| 1.0 / x).collect();
        let needs = self.needs(a);
        self.push(self.shape(a).to_vec(), data, needs, Op::Recip { a })
    }

    /// Negative log softmax probability of `label`, stabilised by the
    /// maximum logit. `logits` must be a single row (or rank-1 vector).
    pub fn cross_entropy(&mut self, logits: TensorId, label: usize) -> Result<TensorId, TensorError> {
        let shape = self.shape(logits).to_vec();
        let classes = match shape.as_slice() {
            [c] => *c,
            [1, c] => *c,
            _ => {
                return Err(TensorError::RankMismatch {
                    op: "cross_entropy",
                    expected: 1,
                    shape,
                });
            }
        };
        if label >= classes {
            return Err(TensorError::OutOfRange { op: "cross_entropy", index: label, bound: classes });
        }
        let row = self.value(logits);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        let loss = lse - row[label];
        let needs = self.needs(logits);
        Ok(self.push(vec![1], vec![loss], needs, Op::CrossEntropy { logits, label }))
    }

    // ── Newton–Schulz pseudo-inverse ────────────────────────────────────────

    /// Moore–Penrose pseudo-inverse of a square matrix by the third-order
    /// Newton–Schulz iteration
    ///
    /// ```text
    /// Z_0     = Aᵀ / (‖A‖₁ · ‖A‖∞)
    /// Z_{j+1} = ¼ · Z_j · (13·I − A·Z_j · (15·I − A·Z_j · (7·I − A·Z_j)))
    /// ```
    ///
    /// Every step is recorded on the tape, so backward differentiates through
    /// the unrolled iterations (including the norm-based initialisation).
    /// Never forms anything larger than the input matrix.
    pub fn pinv_newton_schulz(&mut self, a: TensorId, iters: usize) -> Result<TensorId, TensorError> {
        let (m, n) = self.dims2(a, "pinv_newton_schulz")?;
        if m != n {
            return Err(TensorError::Invalid {
                op: "pinv_newton_schulz",
                why: format!("matrix must be square, got {m}x{n}"),
            });
        }
        let n1 = self.matrix_norm1(a)?;
        let ninf = self.matrix_norm_inf(a)?;
        let denom = self.mul(n1, ninf)?;
        if self.value(denom)[0] == 0.0 {
            // Zero matrix: its pseudo-inverse is zero and the iteration has
            // no usable starting point.
            return self.constant_from(&[m, m], vec![0.0; m * m]);
        }
        let alpha = self.recip(denom);
        let at = self.transpose(a)?;
        let mut z = self.scale_by(at, alpha)?;

        let scaled_identity = |c: f64| {
            let mut data = vec![0.0; m * m];
            for i in 0..m {
                data[i * m + i] = c;
            }
            data
        };
        let i7 = self.constant_from(&[m, m], scaled_identity(7.0))?;
        let i13 = self.constant_from(&[m, m], scaled_identity(13.0))?;
        let i15 = self.constant_from(&[m, m], scaled_identity(15.0))?;

        for _ in 0..iters {
            let az = self.matmul(a, z)?;
            let s1 = self.sub(i7, az)?;
            let p1 = self.matmul(az, s1)?;
            let s2 = self.sub(i15, p1)?;
            let p2 = self.matmul(az, s2)?;
            let s3 = self.sub(i13, p2)?;
            let zs = self.matmul(z, s3)?;
            z = self.scale(zs, 0.25);
        }
        Ok(z)
    }

    // ── Backward ────────────────────────────────────────────────────────────

    fn add_grad(&mut self, id: TensorId, delta: Vec<f64>) {
        let node = &mut self.nodes[id.0];
        if !node.needs_grad {
            return;
        }
        match node.grad.as_mut() {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(&delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta),
        }
    }

    /// Reverse pass from a scalar node. Intermediate gradients are reset on
    /// entry; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: TensorId) -> Result<(), TensorError> {
        self.check(loss, "backward")?;
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar {
                op: "backward",
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            if !matches!(node.op, Op::Leaf) {
                node.grad = None;
            }
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let grad = match self.nodes[idx].grad.take() {
                Some(g) => g,
                None => continue,
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    if self.needs(a) {
                        let da = mm_nt(&grad, self.value(b), m, n, k);
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let db = mm_tn(self.value(a), &grad, m, k, n);
                        self.add_grad(b, db);
                    }
                }
                Op::Add { a, b } => {
                    self.add_grad(a, grad.clone());
                    self.add_grad(b, grad.clone());
                }
                Op::Sub { a, b } => {
                    self.add_grad(a, grad.clone());
                    let db = grad.iter().map(|&g| -g).collect();
                    self.add_grad(b, db);
                }
                Op::Mul { a, b } => {
                    if self.needs(a) {
                        let da = grad.iter().zip(self.value(b)).map(|(&g, &y)| g * y).collect();
                        self.add_grad(a, da);
                    }
                    if self.needs(b) {
                        let db = grad.iter().zip(self.value(a)).map(|(&g, &x)| g * x).collect();
                        self.add_grad(b, db);
                    }
                }
                Op::Scale { a, factor } => {
                    let da = grad.iter().map(|&g| g * factor).collect();
                    self.add_grad(a, da);
                }
                Op::ScaleBy { a, s } => {
                    let sv = self.value(s)[0];
                    if self.needs(a) {
                        let da = grad.iter().map(|&g| g * sv).collect();
                        self.add_grad(a, da);
                    }
                    if self.needs(s) {
                        let ds: f64 = grad.iter().zip(self.value(a)).map(|(&g, &x)| g * x).sum();
                        self.add_grad(s, vec![ds]);
                    }
                }
                Op::AddRowVec { a, bias } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    if self.needs(bias) {
                        let mut db = vec![0.0; n];
                        for i in 0..m {
                            for j in 0..n {
                                db[j] += grad[i * n + j];
                            }
                        }
                        self.add_grad(bias, db);
                    }
                    self.add_grad(a, grad.clone());
                }
                Op::Transpose { a } => {
                    // Output was n×m; route each element back.
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut da = vec![0.0; m * n];
                    for j in 0..n {
                        for i in 0..m {
                            da[i * n + j] = grad[j * m + i];
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::Reshape { a } => {
                    self.add_grad(a, grad.clone());
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.value(p).len();
                        let dp = grad[offset..offset + len].to_vec();
                        offset += len;
                        self.add_grad(p, dp);
                    }
                }
                Op::SliceRows { a, start } => {
                    let n = self.shape(a)[1];
                    let mut da = vec![0.0; self.value(a).len()];
                    da[start * n..start * n + grad.len()].copy_from_slice(&grad);
                    self.add_grad(a, da);
                }
                Op::ConcatCols { parts } => {
                    let m = self.shape(parts[0])[0];
                    let total: usize = grad.len() / m;
                    let mut offset = 0;
                    for p in parts {
                        let w = self.shape(p)[1];
                        let mut dp = vec![0.0; m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&grad[i * total + offset..i * total + offset + w]);
                        }
                        offset += w;
                        self.add_grad(p, dp);
                    }
                }
                Op::SliceCols { a, start } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let w = grad.len() / m;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + start..i * n + start + w]
                            .copy_from_slice(&grad[i * w..(i + 1) * w]);
                    }
                    self.add_grad(a, da);
                }
                Op::SoftmaxRows { a } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let y = &self.nodes[idx].data;
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &grad[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            da[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (m, d) = (self.shape(x)[0], self.shape(x)[1]);
                    let xs = self.value(x);
                    let g = self.value(gamma);
                    let mut dx = vec![0.0; m * d];
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    for i in 0..m {
                        let row = &xs[i * d..(i + 1) * d];
                        let gr = &grad[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv = 1.0 / (var + eps).sqrt();
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = gr[j] * g[j];
                            dgamma[j] += gr[j] * xh;
                            dbeta[j] += gr[j];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xh;
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for j in 0..d {
                            let xh = (row[j] - mean) * inv;
                            let dxh = gr[j] * g[j];
                            dx[i * d + j] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                        }
                    }
                    self.add_grad(x, dx);
                    self.add_grad(gamma, dgamma);
                    self.add_grad(beta, dbeta);
                }
                Op::DepthwiseConv2d { x, kernels } => {
                    let xs = self.shape(x).to_vec();
                    let (c, h, w) = (xs[0], xs[1], xs[2]);
                    let k = self.shape(kernels)[1];
                    let pad = (k - 1) / 2;
                    let src = self.value(x);
                    let kern = self.value(kernels);
                    let mut dx = vec![0.0; c * h * w];
                    let mut dk = vec![0.0; c * k * k];
                    for ch in 0..c {
                        let plane = &src[ch * h * w..(ch + 1) * h * w];
                        let kc = &kern[ch * k * k..(ch + 1) * k * k];
                        let gplane = &grad[ch * h * w..(ch + 1) * h * w];
                        let dxp = &mut dx[ch * h * w..(ch + 1) * h * w];
                        let dkp = &mut dk[ch * k * k..(ch + 1) * k * k];
                        for i in 0..h {
                            for j in 0..w {
                                let gv = gplane[i * w + j];
                                if gv == 0.0 {
                                    continue;
                                }
                                for u in 0..k {
                                    let ii = i + u;
                                    if ii < pad || ii - pad >= h {
                                        continue;
                                    }
                                    for v in 0..k {
                                        let jj = j + v;
                                        if jj < pad || jj - pad >= w {
                                            continue;
                                        }
                                        let si = (ii - pad) * w + (jj - pad);
                                        dxp[si] += gv * kc[u * k + v];
                                        dkp[u * k + v] += gv * plane[si];
                                    }
                                }
                            }
                        }
                    }
                    self.add_grad(x, dx);
                    self.add_grad(kernels, dk);
                }
                Op::MeanRows { a } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        for j in 0..n {
                            da[i * n + j] = grad[j] / m as f64;
                        }
                    }
                    self.add_grad(a, da);
                }
                Op::MeanAll { a } => {
                    let numel = self.value(a).len();
                    let da = vec![grad[0] / numel as f64; numel];
                    self.add_grad(a, da);
                }
                Op::SumAll { a } => {
                    let da = vec![grad[0]; self.value(a).len()];
                    self.add_grad(a, da);
                }
                Op::Relu { a } => {
                    let da = self
                        .value(a)
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                        .collect();
                    self.add_grad(a, da);
                }
                Op::Gelu { a } => {
                    let da = self
                        .value(a)
                        .iter()
                        .zip(&grad)
                        .map(|(&x, &g)| {
                            let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                            let sech2 = 1.0 - t * t;
                            let dydx = 0.5 * (1.0 + t)
                                + 0.5 * x * sech2 * GELU_C * (1.0 + 3.0 * GELU_A * x * x);
                            g * dydx
                        })
                        .collect();
                    self.add_grad(a, da);
                }
                Op::MatrixNorm1 { a } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let src = self.value(a);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_j = 0;
                    for j in 0..n {
                        let s: f64 = (0..m).map(|i| src[i * n + j].abs()).sum();
                        if s > best {
                            best = s;
                            best_j = j;
                        }
                    }
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        da[i * n + best_j] = grad[0] * sign(src[i * n + best_j]);
                    }
                    self.add_grad(a, da);
                }
                Op::MatrixNormInf { a } => {
                    let (m, n) = (self.shape(a)[0], self.shape(a)[1]);
                    let src = self.value(a);
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for i in 0..m {
                        let s: f64 = src[i * n..(i + 1) * n].iter().map(|v| v.abs()).sum();
                        if s > best {
                            best = s;
                            best_i = i;
                        }
                    }
                    let mut da = vec![0.0; m * n];
                    for j in 0..n {
                        da[best_i * n + j] = grad[0] * sign(src[best_i * n + j]);
                    }
                    self.add_grad(a, da);
                }
                Op::Recip { a } => {
                    let y = &self.nodes[idx].data;
                    let da = y.iter().zip(&grad).map(|(&yv, &g)| -g * yv * yv).collect();
                    self.add_grad(a, da);
                }
                Op::CrossEntropy { logits, label } => {
                    let row = self.value(logits);
                    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
                    let da: Vec<f64> = row
                        .iter()
                        .enumerate()
                        .map(|(j, &x)| {
                            let p = (x - max).exp() / sum;
                            grad[0] * (p - if j == label { 1.0 } else { 0.0 })
                        })
                        .collect();
                    self.add_grad(logits, da);
                }
            }
            self.nodes[idx].grad = Some(grad);
        }
        Ok(())
    }

    /// Copies the gradient accumulated for `id` back into a standalone
    /// tensor's buffer (typically the parameter the leaf was created from).
    pub fn write_grad(&self, id: TensorId, target: &mut Tensor) {
        if let Some(g) = self.grad(id) {
            target.accumulate_grad(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::naive;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn randn_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn leaf_from(tape: &mut Tape, shape: &[usize], data: Vec<f64>) -> TensorId {
        let t = Tensor::from_vec(shape, data).unwrap().with_grad();
        tape.leaf(&t)
    }

    fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
    }

    #[test]
    fn matmul_identity_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[3, 3], randn_vec(&mut rng, 9));
        let mut eye = vec![0.0; 9];
        for i in 0..3 {
            eye[i * 3 + i] = 1.0;
        }
        let i3 = tape.constant_from(&[3, 3], eye).unwrap();
        let ai = tape.matmul(a, i3).unwrap();
        let ia = tape.matmul(i3, a).unwrap();
        assert_eq!(tape.value(ai), tape.value(a));
        assert_eq!(tape.value(ia), tape.value(a));
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[3, 4], vec![0.0; 12]).unwrap();
        let b = tape.constant_from(&[5, 2], vec![0.0; 10]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        match err {
            TensorError::ShapeMismatch { left, right, .. } => {
                assert_eq!(left, vec![3, 4]);
                assert_eq!(right, vec![5, 2]);
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn matmul_matches_reference() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (m, k, n) = (4, 5, 3);
            let a = randn_vec(&mut rng, m * k);
            let b = randn_vec(&mut rng, k * n);
            let mut tape = Tape::new();
            let ta = tape.constant_from(&[m, k], a.clone()).unwrap();
            let tb = tape.constant_from(&[k, n], b.clone()).unwrap();
            let tc = tape.matmul(ta, tb).unwrap();
            let expect = naive::matmul(&a, &b, m, k, n);
            assert!(max_abs_diff(tape.value(tc), &expect) < 1e-12);
        }
    }

    #[test]
    fn softmax_uniform_and_shift_invariance() {
        let mut tape = Tape::new();
        let z = tape.constant_from(&[1, 3], vec![0.0; 3]).unwrap();
        let s = tape.softmax_rows(z).unwrap();
        for &v in tape.value(s) {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let row = randn_vec(&mut rng, 6);
        let shifted: Vec<f64> = row.iter().map(|&x| x + 123.456).collect();
        let a = tape.constant_from(&[1, 6], row).unwrap();
        let b = tape.constant_from(&[1, 6], shifted).unwrap();
        let sa = tape.softmax_rows(a).unwrap();
        let sb = tape.softmax_rows(b).unwrap();
        assert!(max_abs_diff(tape.value(sa), tape.value(sb)) < 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_survive_huge_logits() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut data = randn_vec(&mut rng, 5 * 7);
            for v in data.iter_mut() {
                *v *= 300.0; // still finite after the max-shift
            }
            let mut tape = Tape::new();
            let a = tape.constant_from(&[5, 7], data).unwrap();
            let s = tape.softmax_rows(a).unwrap();
            for i in 0..5 {
                let sum: f64 = tape.value(s)[i * 7..(i + 1) * 7].iter().sum();
                assert!((sum - 1.0).abs() < 1e-12);
            }
            assert!(tape.value(s).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn layer_norm_known_rows() {
        let mut tape = Tape::new();
        let x = tape.constant_from(&[2, 2], vec![5.0, 5.0, 1.0, 3.0]).unwrap();
        let gamma = tape.constant_from(&[2], vec![1.0, 1.0]).unwrap();
        let beta = tape.constant_from(&[2], vec![0.0, 0.0]).unwrap();
        let y = tape.layer_norm(x, gamma, beta, 1e-5).unwrap();
        // Constant row normalises to zero; [1,3] has unit variance.
        assert!(tape.value(y)[0].abs() < 1e-9);
        assert!(tape.value(y)[1].abs() < 1e-9);
        assert!((tape.value(y)[2] - -1.0).abs() < 1e-4);
        assert!((tape.value(y)[3] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn layer_norm_matches_reference() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let (m, d) = (3, 8);
            let x = randn_vec(&mut rng, m * d);
            let g = randn_vec(&mut rng, d);
            let b = randn_vec(&mut rng, d);
            let mut tape = Tape::new();
            let tx = tape.constant_from(&[m, d], x.clone()).unwrap();
            let tg = tape.constant_from(&[d], g.clone()).unwrap();
            let tb = tape.constant_from(&[d], b.clone()).unwrap();
            let y = tape.layer_norm(tx, tg, tb, 1e-5).unwrap();
            let expect = naive::layer_norm(&x, &g, &b, m, d, 1e-5);
            assert!(max_abs_diff(tape.value(y), &expect) < 1e-12);
        }
    }

    #[test]
    fn conv_zero_kernel_and_delta_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = randn_vec(&mut rng, 2 * 4 * 4);
        let mut tape = Tape::new();
        let tx = tape.constant_from(&[2, 4, 4], x.clone()).unwrap();
        let zeros = tape.constant_from(&[2, 3, 3], vec![0.0; 18]).unwrap();
        let y = tape.depthwise_conv2d(tx, zeros).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));

        // Center-one delta kernel reproduces the input exactly.
        let mut delta = vec![0.0; 18];
        delta[4] = 1.0;
        delta[13] = 1.0;
        let dk = tape.constant_from(&[2, 3, 3], delta).unwrap();
        let y2 = tape.depthwise_conv2d(tx, dk).unwrap();
        assert_eq!(tape.value(y2), &x[..]);
    }

    #[test]
    fn conv_ones_counts_taps() {
        // 3x3 all-ones input and kernel: corners see 4 taps, edges 6, center 9.
        let mut tape = Tape::new();
        let x = tape.constant_from(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let k = tape.constant_from(&[1, 3, 3], vec![1.0; 9]).unwrap();
        let y = tape.depthwise_conv2d(x, k).unwrap();
        let expect = [4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0];
        assert_eq!(tape.value(y), &expect);
    }

    #[test]
    fn conv_matches_reference_for_all_kernel_sizes() {
        for &k in &[3usize, 5, 7] {
            for seed in 0..5 {
                let mut rng = ChaCha8Rng::seed_from_u64(40 + seed);
                let (c, h, w) = (3, 6, 6);
                let x = randn_vec(&mut rng, c * h * w);
                let kern = randn_vec(&mut rng, c * k * k);
                let mut tape = Tape::new();
                let tx = tape.constant_from(&[c, h, w], x.clone()).unwrap();
                let tk = tape.constant_from(&[c, k, k], kern.clone()).unwrap();
                let y = tape.depthwise_conv2d(tx, tk).unwrap();
                assert_eq!(tape.shape(y), &[c, h, w]);
                let expect = naive::depthwise_conv2d(&x, &kern, c, h, w, k);
                assert!(max_abs_diff(tape.value(y), &expect) < 1e-12);
            }
        }
    }

    #[test]
    fn conv_rejects_even_kernels_and_channel_mismatch() {
        let mut tape = Tape::new();
        let x = tape.constant_from(&[2, 4, 4], vec![0.0; 32]).unwrap();
        let even = tape.constant_from(&[2, 2, 2], vec![0.0; 8]).unwrap();
        assert!(matches!(tape.depthwise_conv2d(x, even), Err(TensorError::Invalid { .. })));
        let wrong_c = tape.constant_from(&[3, 3, 3], vec![0.0; 27]).unwrap();
        assert!(matches!(
            tape.depthwise_conv2d(x, wrong_c),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn matrix_norms() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let n1 = tape.matrix_norm1(a).unwrap();
        let ninf = tape.matrix_norm_inf(a).unwrap();
        assert_eq!(tape.value(n1)[0], 6.0); // columns: |1|+|3|=4, |-2|+|4|=6
        assert_eq!(tape.value(ninf)[0], 7.0); // rows: 3, 7
    }

    #[test]
    fn pinv_identity_is_fixed_point() {
        let mut tape = Tape::new();
        let mut eye = vec![0.0; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let a = tape.constant_from(&[4, 4], eye.clone()).unwrap();
        let z = tape.pinv_newton_schulz(a, 6).unwrap();
        assert!(max_abs_diff(tape.value(z), &eye) < 1e-10);
    }

    #[test]
    fn pinv_diagonal_inverts() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 2], vec![2.0, 0.0, 0.0, 4.0]).unwrap();
        let z = tape.pinv_newton_schulz(a, 20).unwrap();
        let expect = [0.5, 0.0, 0.0, 0.25];
        assert!(max_abs_diff(tape.value(z), &expect) < 1e-8);
    }

    #[test]
    fn pinv_satisfies_penrose_identities_on_stochastic_matrices() {
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let logits = randn_vec(&mut rng, 64);
            let mut tape = Tape::new();
            let l = tape.constant_from(&[8, 8], logits).unwrap();
            let a = tape.softmax_rows(l).unwrap();
            let z = tape.pinv_newton_schulz(a, 20).unwrap();
            let aza_part = tape.matmul(a, z).unwrap();
            let aza = tape.matmul(aza_part, a).unwrap();
            let zaz_part = tape.matmul(z, a).unwrap();
            let zaz = tape.matmul(zaz_part, z).unwrap();
            assert!(max_abs_diff(tape.value(aza), tape.value(a)) < 1e-6);
            assert!(max_abs_diff(tape.value(zaz), tape.value(z)) < 1e-6);
        }
    }

    #[test]
    fn pinv_zero_matrix_is_zero() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[3, 3], vec![0.0; 9]).unwrap();
        let z = tape.pinv_newton_schulz(a, 6).unwrap();
        assert!(tape.value(z).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_entropy_known_values() {
        let mut tape = Tape::new();
        let even = tape.constant_from(&[1, 2], vec![0.0, 0.0]).unwrap();
        let l = tape.cross_entropy(even, 0).unwrap();
        assert!((tape.value(l)[0] - std::f64::consts::LN_2).abs() < 1e-12);

        let confident = tape.constant_from(&[2], vec![10.0, -10.0]).unwrap();
        let l2 = tape.cross_entropy(confident, 0).unwrap();
        assert!(tape.value(l2)[0] < 1e-8);
        assert!(tape.value(l2)[0] > 0.0);

        assert!(matches!(
            tape.cross_entropy(even, 2),
            Err(TensorError::OutOfRange { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let logits = randn_vec(&mut rng, 4);
        let mut tape = Tape::new();
        let tl = leaf_from(&mut tape, &[1, 4], logits.clone());
        let loss = tape.cross_entropy(tl, 2).unwrap();
        tape.backward(loss).unwrap();

        let probs = naive::softmax_rows(&logits, 1, 4);
        let expect: Vec<f64> = probs
            .iter()
            .enumerate()
            .map(|(j, &p)| p - if j == 2 { 1.0 } else { 0.0 })
            .collect();
        assert!(max_abs_diff(tape.grad(tl).unwrap(), &expect) < 1e-10);
    }

    #[test]
    fn add_routes_same_gradient_to_both_operands() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[2, 3], randn_vec(&mut rng, 6));
        let b = leaf_from(&mut tape, &[2, 3], randn_vec(&mut rng, 6));
        let c = tape.add(a, b).unwrap();
        let w = tape.constant_from(&[2, 3], randn_vec(&mut rng, 6)).unwrap();
        let prod = tape.mul(c, w).unwrap();
        let loss = tape.sum_all(prod);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), tape.grad(b).unwrap());
        assert_eq!(tape.grad(a).unwrap(), tape.grad(c).unwrap());
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let data = randn_vec(&mut rng, 8);
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[2, 4], data.clone());
        let sq = tape.mul(a, a).unwrap();
        let loss = tape.sum_all(sq);
        tape.backward(loss).unwrap();
        let expect: Vec<f64> = data.iter().map(|&x| 2.0 * x).collect();
        assert!(max_abs_diff(tape.grad(a).unwrap(), &expect) < 1e-12);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 2], vec![1.0; 4]).unwrap();
        assert!(matches!(tape.backward(a), Err(TensorError::NotScalar { .. })));
    }

    #[test]
    fn repeated_backward_accumulates_on_leaves() {
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[2], vec![3.0, -1.0]);
        let s = tape.scale(a, 2.0);
        let loss = tape.sum_all(s);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[4.0, 4.0]);
        tape.zero_grads();
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn slice_concat_roundtrip_and_gradient_routing() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut tape = Tape::new();
        let a = leaf_from(&mut tape, &[2, 3], randn_vec(&mut rng, 6));
        let b = leaf_from(&mut tape, &[3, 3], randn_vec(&mut rng, 9));
        let cat = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(cat), &[5, 3]);
        let bottom = tape.slice_rows(cat, 2, 5).unwrap();
        assert_eq!(tape.value(bottom), tape.value(b));
        let loss = tape.sum_all(bottom);
        tape.backward(loss).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[0.0; 6]);
        assert_eq!(tape.grad(b).unwrap(), &[1.0; 9]);
    }

    #[test]
    fn column_ops_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let data = randn_vec(&mut rng, 3 * 8);
        let mut tape = Tape::new();
        let a = tape.constant_from(&[3, 8], data.clone()).unwrap();
        let left = tape.slice_cols(a, 0, 5).unwrap();
        let right = tape.slice_cols(a, 5, 8).unwrap();
        let back = tape.concat_cols(&[left, right]).unwrap();
        assert_eq!(tape.value(back), &data[..]);
    }

    #[test]
    fn transpose_reshape_roundtrip() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let data = randn_vec(&mut rng, 12);
        let mut tape = Tape::new();
        let a = tape.constant_from(&[3, 4], data.clone()).unwrap();
        let t = tape.transpose(a).unwrap();
        let tt = tape.transpose(t).unwrap();
        assert_eq!(tape.value(tt), &data[..]);
        let r = tape.reshape(a, &[2, 6]).unwrap();
        assert_eq!(tape.value(r), &data[..]);
        assert!(matches!(tape.reshape(a, &[5, 3]), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn mean_ops() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[2, 3], vec![1.0, 2.0, 3.0, 5.0, 6.0, 7.0]).unwrap();
        let mr = tape.mean_rows(a).unwrap();
        assert_eq!(tape.value(mr), &[3.0, 4.0, 5.0]);
        let ma = tape.mean_all(a);
        assert_eq!(tape.value(ma)[0], 4.0);
    }

    #[test]
    fn max_node_elems_reports_peak() {
        let mut tape = Tape::new();
        let a = tape.constant_from(&[4, 4], vec![1.0; 16]).unwrap();
        let b = tape.constant_from(&[4, 2], vec![1.0; 8]).unwrap();
        let _ = tape.matmul(a, b).unwrap();
        assert_eq!(tape.max_node_elems(), 16);
    }
}
