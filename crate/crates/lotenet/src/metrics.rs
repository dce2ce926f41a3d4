//! Classification metrics and dataset evaluation.

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::model::{predict_from_logits, LoTeNetModel, ModelError};
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("{scores} scores but {labels} labels")]
    LengthMismatch { scores: usize, labels: usize },
    #[error("label {label} is not binary")]
    NotBinary { label: usize },
}

/// Metrics for one evaluated split.
#[derive(Debug, Clone, Serialize)]
pub struct MetricsReport {
    pub split: String,
    pub count: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub balanced_accuracy: f64,
    /// Present only for binary tasks with both classes in the split.
    pub auc: Option<f64>,
    /// `confusion[true_class][predicted_class]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Area under the ROC curve as the Mann-Whitney statistic
/// `P(score+ > score-) + P(tie) / 2`, computed from tie-averaged rank sums.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, MetricsError> {
    if scores.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: scores.len(),
            labels: labels.len(),
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(MetricsError::NotBinary { label: bad });
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(MetricsError::SingleClass);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    // average ranks across ties (1-based)
    let mut ranks = vec![0.0f64; scores.len()];
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    let rank_sum: f64 = labels
        .iter()
        .zip(&ranks)
        .filter(|(&l, _)| l == 1)
        .map(|(_, &r)| r)
        .sum();
    let p = positives as f64;
    let n = negatives as f64;
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Mean per-class recall. For binary labels this is the mean of sensitivity
/// and specificity; it equals plain accuracy when classes are balanced.
pub fn balanced_accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, MetricsError> {
    if predictions.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            scores: predictions.len(),
            labels: labels.len(),
        });
    }
    let n_classes = labels.iter().max().map_or(0, |&m| m + 1);
    let mut support = vec![0usize; n_classes];
    let mut hits = vec![0usize; n_classes];
    for (&pred, &label) in predictions.iter().zip(labels) {
        support[label] += 1;
        if pred == label {
            hits[label] += 1;
        }
    }
    let present: Vec<usize> = (0..n_classes).filter(|&c| support[c] > 0).collect();
    if present.len() < 2 {
        return Err(MetricsError::SingleClass);
    }
    let recall_sum: f64 = present
        .iter()
        .map(|&c| hits[c] as f64 / support[c] as f64)
        .sum();
    Ok(recall_sum / present.len() as f64)
}

/// Plain accuracy.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    hits as f64 / labels.len() as f64
}

/// Batched eval-mode pass over a dataset: logits, predictions and binary
/// scores (sigmoid for one output, positive-class softmax for two).
pub struct EvalOutputs {
    pub predictions: Vec<usize>,
    pub scores: Vec<f64>,
    pub loss: f64,
}

pub fn eval_outputs<T: Real>(
    model: &LoTeNetModel<T>,
    dataset: &Dataset<T>,
    batch_size: usize,
) -> Result<EvalOutputs, ModelError> {
    let n = dataset.len();
    let m = model.config().n_classes;
    let mut predictions = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n);
    let mut loss_sum = 0.0f64;
    let mut start = 0usize;
    while start < n {
        let end = (start + batch_size).min(n);
        let indices: Vec<usize> = (start..end).collect();
        let batch = dataset.subset(&indices).expect("valid subset");
        let logits = model.forward(&batch.images)?;
        let pred = predict_from_logits(&logits);
        for (bi, &class) in pred.classes.iter().enumerate() {
            predictions.push(class);
            let score = if m == 1 {
                pred.probabilities.get(&[bi, 0]).to_f64_lossy()
            } else {
                pred.probabilities.get(&[bi, 1.min(m - 1)]).to_f64_lossy()
            };
            scores.push(score);
        }
        loss_sum += cross_entropy_value(&logits, &batch.labels) * (end - start) as f64;
        start = end;
    }
    Ok(EvalOutputs {
        predictions,
        scores,
        loss: loss_sum / n as f64,
    })
}

/// Mean negative log-likelihood of the labels under the logits, via the
/// log-sum-exp stabilized form (sigmoid form for a single output).
pub fn cross_entropy_value<T: Real>(logits: &crate::tensor::Tensor<T>, labels: &[usize]) -> f64 {
    let m = logits.shape()[1];
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks(m).zip(labels) {
        if m == 1 {
            let z = row[0].to_f64_lossy();
            // -[y ln sigma(z) + (1-y) ln(1 - sigma(z))], stabilized
            let softplus = if z > 0.0 {
                z + (-z).exp().ln_1p()
            } else {
                z.exp().ln_1p()
            };
            total += softplus - label as f64 * z;
        } else {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let mut denom = 0.0f64;
            for &v in row {
                denom += (v - max).to_f64_lossy().exp();
            }
            let lse = max.to_f64_lossy() + denom.ln();
            total += lse - row[label].to_f64_lossy();
        }
    }
    total / labels.len().max(1) as f64
}

/// Evaluates a model on a dataset split.
pub fn evaluate<T: Real>(
    model: &LoTeNetModel<T>,
    dataset: &Dataset<T>,
    batch_size: usize,
    split_name: &str,
) -> Result<MetricsReport, ModelError> {
    let outputs = eval_outputs(model, dataset, batch_size)?;
    let m = model.config().n_classes;
    let classes = m.max(2);
    let mut confusion = vec![vec![0usize; classes]; classes];
    for (&pred, &label) in outputs.predictions.iter().zip(&dataset.labels) {
        confusion[label][pred] += 1;
    }
    let auc_value = if m <= 2 {
        auc(&outputs.scores, &dataset.labels).ok()
    } else {
        None
    };
    Ok(MetricsReport {
        split: split_name.to_string(),
        count: dataset.len(),
        loss: outputs.loss,
        accuracy: accuracy(&outputs.predictions, &dataset.labels),
        balanced_accuracy: balanced_accuracy(&outputs.predictions, &dataset.labels)
            .unwrap_or(f64::NAN),
        auc: auc_value,
        confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_perfect_separation_and_reversal() {
        let scores = [0.9, 0.8, 0.1, 0.2];
        let labels = [1, 1, 0, 0];
        assert_eq!(auc(&scores, &labels).unwrap(), 1.0);
        let swapped = [0, 0, 1, 1];
        assert_eq!(auc(&scores, &swapped).unwrap(), 0.0);
    }

    #[test]
    fn auc_with_ties_counts_half() {
        // pos [0.5], neg [0.5, 0.1]: (1 + 0.5) / 2 = 0.75
        let scores = [0.5, 0.5, 0.1];
        let labels = [1, 0, 0];
        let got = auc(&scores, &labels).unwrap();
        assert!((got - 0.75).abs() < 1e-12);
    }

    #[test]
    fn auc_matches_exhaustive_pair_counting() {
        let scores = [0.3, 0.7, 0.7, 0.2, 0.9, 0.3];
        let labels = [0, 1, 0, 0, 1, 1];
        let mut num = 0.0;
        let mut den = 0.0;
        for (i, &li) in labels.iter().enumerate() {
            if li != 1 {
                continue;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if lj != 0 {
                    continue;
                }
                den += 1.0;
                if scores[i] > scores[j] {
                    num += 1.0;
                } else if scores[i] == scores[j] {
                    num += 0.5;
                }
            }
        }
        let want = num / den;
        assert!((auc(&scores, &labels).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn auc_is_invariant_under_monotone_transform() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.5];
        let labels = [0, 0, 1, 1, 1];
        let base = auc(&scores, &labels).unwrap();
        let transformed: Vec<f64> = scores.iter().map(|&s| s.exp()).collect();
        assert_eq!(auc(&transformed, &labels).unwrap(), base);
    }

    #[test]
    fn auc_rejects_single_class() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[1, 1]),
            Err(MetricsError::SingleClass)
        ));
    }

    #[test]
    fn balanced_accuracy_cases() {
        // all correct
        assert_eq!(balanced_accuracy(&[0, 1, 0, 1], &[0, 1, 0, 1]).unwrap(), 1.0);
        // all-negative predictor on 80 neg / 20 pos -> 0.5
        let labels: Vec<usize> = (0..100).map(|i| usize::from(i < 20)).collect();
        let preds = vec![0usize; 100];
        assert_eq!(balanced_accuracy(&preds, &labels).unwrap(), 0.5);
    }

    #[test]
    fn balanced_accuracy_from_confusion_counts() {
        // TP=3, FN=1, TN=2, FP=2 -> (0.75 + 0.5) / 2 = 0.625
        let labels = [1, 1, 1, 1, 0, 0, 0, 0];
        let preds = [1, 1, 1, 0, 0, 0, 1, 1];
        let got = balanced_accuracy(&preds, &labels).unwrap();
        assert!((got - 0.625).abs() < 1e-12);
    }

    #[test]
    fn balanced_accuracy_equals_accuracy_when_balanced() {
        let labels = [0, 0, 1, 1, 0, 1];
        let preds = [0, 1, 1, 0, 0, 1];
        let ba = balanced_accuracy(&preds, &labels).unwrap();
        let acc = accuracy(&preds, &labels);
        assert!((ba - acc).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let logits = crate::tensor::Tensor::<f64>::zeros(vec![1, 2]);
        let loss = cross_entropy_value(&logits, &[0]);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_correct_is_tiny() {
        let logits = crate::tensor::Tensor::<f64>::from_vec(vec![1, 2], vec![20.0, -20.0]).unwrap();
        let loss = cross_entropy_value(&logits, &[0]);
        assert!(loss < 1e-8, "loss {loss}");
    }
}
