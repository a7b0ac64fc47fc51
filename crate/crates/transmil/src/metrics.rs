//! Classification metrics over bag-level predictions.
//!
//! `auc_binary` is the Mann–Whitney statistic — the probability that a
//! uniformly drawn positive outranks a uniformly drawn negative, ties worth
//! ½ — computed from midranks in `O(n log n)` rather than by pair
//! enumeration. Both routes produce exact half-integer numerators over the
//! same denominator, so they agree bit for bit, which the tests exploit.

use std::fmt;

#[derive(Debug)]
pub enum MetricsError {
    /// The metric has no value on this input (e.g. one class is absent).
    Undefined { why: String },
    /// The input itself is malformed (lengths, NaN, out-of-range labels).
    Invalid { why: String },
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::Undefined { why } => write!(f, "metric undefined: {why}"),
            MetricsError::Invalid { why } => write!(f, "invalid metric input: {why}"),
        }
    }
}

impl std::error::Error for MetricsError {}

fn check_scores(scores: &[f64], labels_len: usize) -> Result<(), MetricsError> {
    if scores.len() != labels_len {
        return Err(MetricsError::Invalid {
            why: format!("{} scores for {labels_len} labels", scores.len()),
        });
    }
    if scores.is_empty() {
        return Err(MetricsError::Invalid { why: "no predictions".to_string() });
    }
    if let Some(bad) = scores.iter().find(|s| !s.is_finite()) {
        return Err(MetricsError::Invalid { why: format!("non-finite score {bad}") });
    }
    Ok(())
}

/// Area under the ROC curve for binary labels, tied scores counting ½.
/// Errors when only one class is present — there is no curve to integrate.
pub fn auc_binary(scores: &[f64], labels: &[u8]) -> Result<f64, MetricsError> {
    check_scores(scores, labels.len())?;
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::Invalid { why: format!("binary label {bad} out of range") });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::Undefined {
            why: format!("need both classes, got {positives} positive / {negatives} negative"),
        });
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores checked finite"));

    // Midranks: every member of a tie group gets the group's average rank.
    // Ranks are 1-based, so midranks are exact multiples of ½.
    let mut rank_sum_positive = 0.0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && scores[order[end]] == scores[order[start]] {
            end += 1;
        }
        let midrank = (start + 1 + end) as f64 / 2.0;
        for &i in &order[start..end] {
            if labels[i] == 1 {
                rank_sum_positive += midrank;
            }
        }
        start = end;
    }

    let p = positives as f64;
    let numerator = rank_sum_positive - p * (p + 1.0) / 2.0;
    Ok(numerator / (p * negatives as f64))
}

/// Unweighted mean of one-vs-rest AUCs over all `classes`, with `probs` a
/// row-major bags×classes table. Every class must appear in `labels`.
pub fn auc_macro_ovr(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64, MetricsError> {
    check_table(probs, classes, labels)?;
    let mut total = 0.0;
    for class in 0..classes {
        let scores: Vec<f64> = labels.iter().enumerate().map(|(i, _)| probs[i * classes + class]).collect();
        let binary: Vec<u8> = labels.iter().map(|&l| u8::from(l == class)).collect();
        let auc = auc_binary(&scores, &binary).map_err(|e| match e {
            MetricsError::Undefined { .. } => MetricsError::Undefined {
                why: format!("class {class} is absent from the labels"),
            },
            other => other,
        })?;
        total += auc;
    }
    Ok(total / classes as f64)
}

/// Fraction of correct predictions. Two classes use the decision rule
/// `P(class 1) > ½` — an exact ½ predicts the negative class; more classes
/// use argmax with the first maximum winning.
pub fn accuracy(probs: &[f64], classes: usize, labels: &[usize]) -> Result<f64, MetricsError> {
    check_table(probs, classes, labels)?;
    let mut correct = 0usize;
    for (i, &label) in labels.iter().enumerate() {
        let row = &probs[i * classes..(i + 1) * classes];
        let predicted = if classes == 2 {
            usize::from(row[1] > 0.5)
        } else {
            let mut best = 0;
            for (j, &p) in row.iter().enumerate() {
                if p > row[best] {
                    best = j;
                }
            }
            best
        };
        if predicted == label {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

fn check_table(probs: &[f64], classes: usize, labels: &[usize]) -> Result<(), MetricsError> {
    if classes < 2 {
        return Err(MetricsError::Invalid { why: format!("{classes} classes is not a classification") });
    }
    if probs.len() != classes * labels.len() {
        return Err(MetricsError::Invalid {
            why: format!("{} probabilities for {}×{classes} table", probs.len(), labels.len()),
        });
    }
    if labels.is_empty() {
        return Err(MetricsError::Invalid { why: "no predictions".to_string() });
    }
    if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(MetricsError::Invalid { why: format!("label {bad} out of range for {classes} classes") });
    }
    if let Some(bad) = probs.iter().find(|p| !p.is_finite()) {
        return Err(MetricsError::Invalid { why: format!("non-finite probability {bad}") });
    }
    Ok(())
}
