use ndarray::{Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature of the softened-softmax distillation loss.
pub const DISTILL_TEMPERATURE: f64 = 2.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum DistillForm {
    /// Per-unit binary cross-entropy against sigmoid targets (iCaRL).
    SigmoidBce,
    /// Cross-entropy between temperature-2 softmax distributions (LwF).
    SoftmaxT2,
}

fn log_softmax_row(row: ArrayView1<f64>, temperature: f64) -> Vec<f64> {
    let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v / temperature));
    let lse = row.iter().map(|&v| (v / temperature - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v / temperature - lse).collect()
}

pub fn softmax_rows(logits: &ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; the first one wins ties.
pub fn argmax(row: ArrayView1<f64>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Mean softmax cross-entropy and its gradient w.r.t. the logits.
pub fn cross_entropy(logits: &ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (n, c) = logits.dim();
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), format!("{} labels", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::Config(format!("label {bad} out of range for {c} classes")));
    }
    let mut grad = softmax_rows(logits);
    let mut loss = 0.0;
    for ((i, row), &y) in logits.outer_iter().enumerate().zip(labels) {
        loss -= log_softmax_row(row, 1.0)[y];
        grad[[i, y]] -= 1.0;
    }
    let nf = n as f64;
    grad /= nf;
    Ok((loss / nf, grad))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distillation loss of `student` towards the constant `teacher` logits, with
/// the analytic gradient w.r.t. `student`.
pub fn loss_distill(
    student: &ArrayView2<f64>,
    teacher: &ArrayView2<f64>,
    form: DistillForm,
) -> Result<(f64, Array2<f64>)> {
    if student.dim() != teacher.dim() {
        return Err(Error::shape(format!("{:?}", teacher.dim()), format!("{:?}", student.dim())));
    }
    let (n, k) = student.dim();
    if n == 0 || k == 0 {
        return Ok((0.0, Array2::zeros((n, k))));
    }
    match form {
        DistillForm::SigmoidBce => {
            let denom = (n * k) as f64;
            let mut loss = 0.0;
            let mut grad = Array2::zeros((n, k));
            ndarray::Zip::from(&mut grad)
                .and(student)
                .and(teacher)
                .for_each(|g, &s, &t| {
                    let target = sigmoid(t);
                    // max(s, 0) - s * target + ln(1 + e^{-|s|})
                    loss += s.max(0.0) - s * target + (-s.abs()).exp().ln_1p();
                    *g = (sigmoid(s) - target) / denom;
                });
            Ok((loss / denom, grad))
        }
        DistillForm::SoftmaxT2 => {
            let t = DISTILL_TEMPERATURE;
            let scaled_s = student.mapv(|v| v / t);
            let scaled_t = teacher.mapv(|v| v / t);
            let p_s = softmax_rows(&scaled_s.view());
            let p_t = softmax_rows(&scaled_t.view());
            let mut loss = 0.0;
            for (srow, trow) in student.outer_iter().zip(p_t.outer_iter()) {
                let log_p = log_softmax_row(srow, t);
                loss -= trow.iter().zip(&log_p).map(|(p, l)| p * l).sum::<f64>();
            }
            let grad = (p_s - &p_t) / (t * n as f64);
            Ok((loss / n as f64, grad))
        }
    }
}
