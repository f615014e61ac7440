//! Evaluation metrics: weighted accuracy over the pooled test set,
//! per-emotion recalls with a confusion matrix, and Welch's t-test for
//! comparing per-seed accuracy samples.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::corpus::{DialogueBatch, EmotionLabel, N_CLASSES};
use crate::error::{Error, Result};
use crate::model::{predictions, Model};

/// Pooled accuracy plus per-class breakdown. Confusion rows are true
/// classes, columns predicted classes, both in label-index order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub wa: f64,
    pub per_class: [Option<f64>; N_CLASSES],
    pub n_test: usize,
    pub confusion: [[usize; N_CLASSES]; N_CLASSES],
}

impl EvalReport {
    pub fn class_accuracy(&self, label: EmotionLabel) -> Option<f64> {
        self.per_class[label.index()]
    }
}

fn check_aligned(preds: &Array2<i64>, labels: &Array2<i64>, mask: &Array2<f64>) -> Result<()> {
    if preds.shape() != labels.shape() || preds.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "metric inputs disagree: preds {:?}, labels {:?}, mask {:?}",
            preds.shape(),
            labels.shape(),
            mask.shape()
        )));
    }
    Ok(())
}

/// Fraction of unmasked positions predicted correctly (class-weighted
/// accuracy equals pooled accuracy over the full test set).
pub fn weighted_accuracy(
    preds: &Array2<i64>,
    labels: &Array2<i64>,
    mask: &Array2<f64>,
) -> Result<f64> {
    check_aligned(preds, labels, mask)?;
    let mut total = 0usize;
    let mut correct = 0usize;
    for ((p, l), m) in preds.iter().zip(labels.iter()).zip(mask.iter()) {
        if *m == 0.0 {
            continue;
        }
        total += 1;
        if p == l {
            correct += 1;
        }
    }
    if total == 0 {
        return Err(Error::Metric(
            "weighted accuracy over zero unmasked utterances".into(),
        ));
    }
    Ok(correct as f64 / total as f64)
}

/// Accumulates confusion counts over batches.
#[derive(Debug, Clone, Default)]
pub struct ConfusionAccumulator {
    counts: [[usize; N_CLASSES]; N_CLASSES],
}

impl ConfusionAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        preds: &Array2<i64>,
        labels: &Array2<i64>,
        mask: &Array2<f64>,
    ) -> Result<()> {
        check_aligned(preds, labels, mask)?;
        for ((p, l), m) in preds.iter().zip(labels.iter()).zip(mask.iter()) {
            if *m == 0.0 {
                continue;
            }
            let (p, l) = (*p, *l);
            if l < 0 || l as usize >= N_CLASSES {
                return Err(Error::Label(format!(
                    "true label {l} at an unmasked position"
                )));
            }
            if p < 0 || p as usize >= N_CLASSES {
                return Err(Error::Label(format!("prediction {p} outside class range")));
            }
            self.counts[l as usize][p as usize] += 1;
        }
        Ok(())
    }

    pub fn finish(self) -> Result<EvalReport> {
        let total: usize = self.counts.iter().flatten().sum();
        if total == 0 {
            return Err(Error::Metric("evaluation saw zero utterances".into()));
        }
        let diag: usize = (0..N_CLASSES).map(|c| self.counts[c][c]).sum();
        let mut per_class = [None; N_CLASSES];
        for c in 0..N_CLASSES {
            let n_c: usize = self.counts[c].iter().sum();
            if n_c > 0 {
                per_class[c] = Some(self.counts[c][c] as f64 / n_c as f64);
            }
        }
        Ok(EvalReport {
            wa: diag as f64 / total as f64,
            per_class,
            n_test: total,
            confusion: self.counts,
        })
    }
}

/// Per-emotion recalls and pooled accuracy in one pass.
pub fn per_emotion_accuracy(
    preds: &Array2<i64>,
    labels: &Array2<i64>,
    mask: &Array2<f64>,
) -> Result<EvalReport> {
    let mut acc = ConfusionAccumulator::new();
    acc.add(preds, labels, mask)?;
    acc.finish()
}

/// Evaluate a model's prediction branch over batches in eval mode.
pub fn evaluate_model(model: &Model, batches: &[DialogueBatch]) -> Result<EvalReport> {
    let mut acc = ConfusionAccumulator::new();
    for batch in batches {
        let out = model.forward(batch, false, None)?;
        let preds = predictions(out.designated_logits()?);
        acc.add(&preds, &batch.labels, &batch.mask)?;
    }
    acc.finish()
}

/// Welch's t-test on two accuracy samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Significance {
    pub p_value: f64,
    pub t_stat: f64,
    pub df: f64,
    pub mean_a: f64,
    pub std_a: f64,
    pub mean_b: f64,
    pub std_b: f64,
}

fn mean_and_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

/// Two-sided Welch's t-test. With zero variance on both sides the
/// p-value is 1.0 for equal means and 0.0 otherwise.
pub fn significance_test(a: &[f64], b: &[f64]) -> Result<Significance> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Stats(format!(
            "significance test needs at least 2 samples per side, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    if a.iter().chain(b.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Stats("non-finite sample value".into()));
    }
    let (mean_a, var_a) = mean_and_var(a);
    let (mean_b, var_b) = mean_and_var(b);
    let (na, nb) = (a.len() as f64, b.len() as f64);

    if var_a == 0.0 && var_b == 0.0 {
        let equal = mean_a == mean_b;
        return Ok(Significance {
            p_value: if equal { 1.0 } else { 0.0 },
            t_stat: if equal { 0.0 } else { f64::INFINITY },
            df: na + nb - 2.0,
            mean_a,
            std_a: 0.0,
            mean_b,
            std_b: 0.0,
        });
    }

    let se2 = var_a / na + var_b / nb;
    let t_stat = (mean_a - mean_b) / se2.sqrt();
    let df_num = se2 * se2;
    let df_den = var_a * var_a / (na * na * (na - 1.0)) + var_b * var_b / (nb * nb * (nb - 1.0));
    let df = df_num / df_den;
    let dist = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::Stats(format!("t-distribution with df {df}: {e}")))?;
    let p_value = (2.0 * dist.cdf(-t_stat.abs())).clamp(0.0, 1.0);
    Ok(Significance {
        p_value,
        t_stat,
        df,
        mean_a,
        std_a: var_a.sqrt(),
        mean_b,
        std_b: var_b.sqrt(),
    })
}
