//! Straight-line reference implementations used as oracles in tests.
//!
//! Deliberately written in the most literal way possible (textbook loop
//! orders, per-element normalisation, no shared helpers with the production
//! code) so that agreement with the tape operations is meaningful.

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for kk in 0..k {
                acc += a[i * k + kk] * b[kk * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn transpose(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

pub fn softmax_rows(x: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &x[i * n..(i + 1) * n];
        let mut max = f64::NEG_INFINITY;
        for &v in row {
            if v > max {
                max = v;
            }
        }
        let mut sum = 0.0;
        for j in 0..n {
            out[i * n + j] = (row[j] - max).exp();
            sum += out[i * n + j];
        }
        for j in 0..n {
            out[i * n + j] /= sum;
        }
    }
    out
}

pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], m: usize, d: usize, eps: f64) -> Vec<f64> {
    let mut out = vec![0.0; m * d];
    for i in 0..m {
        let row = &x[i * d..(i + 1) * d];
        let mut mean = 0.0;
        for &v in row {
            mean += v;
        }
        mean /= d as f64;
        let mut var = 0.0;
        for &v in row {
            var += (v - mean) * (v - mean);
        }
        var /= d as f64;
        let denom = (var + eps).sqrt();
        for j in 0..d {
            out[i * d + j] = ((row[j] - mean) / denom) * gamma[j] + beta[j];
        }
    }
    out
}

/// Sliding-window depthwise convolution with zero padding, one kernel per
/// channel, written index-by-index over the padded input.
pub fn depthwise_conv2d(x: &[f64], kern: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k - 1) / 2;
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for u in 0..k {
                    for v in 0..k {
                        let si = i as isize + u as isize - pad as isize;
                        let sj = j as isize + v as isize - pad as isize;
                        if si >= 0 && (si as usize) < h && sj >= 0 && (sj as usize) < w {
                            acc += x[ch * h * w + si as usize * w + sj as usize]
                                * kern[ch * k * k + u * k + v];
                        }
                    }
                }
                out[ch * h * w + i * w + j] = acc;
            }
        }
    }
    out
}

/// Exact scaled-dot-product attention computed query row by query row, with
/// its own inline softmax.
pub fn attention(q: &[f64], k: &[f64], v: &[f64], s: usize, d: usize) -> Vec<f64> {
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = vec![0.0; s * d];
    for i in 0..s {
        let mut logits = vec![0.0; s];
        for j in 0..s {
            let mut dot = 0.0;
            for e in 0..d {
                dot += q[i * d + e] * k[j * d + e];
            }
            logits[j] = dot * scale;
        }
        let mut max = f64::NEG_INFINITY;
        for &l in &logits {
            if l > max {
                max = l;
            }
        }
        let mut weights = vec![0.0; s];
        let mut sum = 0.0;
        for j in 0..s {
            weights[j] = (logits[j] - max).exp();
            sum += weights[j];
        }
        for j in 0..s {
            weights[j] /= sum;
        }
        for e in 0..d {
            let mut acc = 0.0;
            for j in 0..s {
                acc += weights[j] * v[j * d + e];
            }
            out[i * d + e] = acc;
        }
    }
    out
}
