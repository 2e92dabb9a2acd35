use std::time::Instant;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{argmax, cross_entropy, loss_distill, DistillForm};
use super::optim::{Adam, PlateauScheduler};
use super::{MlpModel, Mode};
use crate::error::{Error, Result};

/// Which loss drives the plateau scheduler.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Monitor {
    #[default]
    Train,
    Validation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    /// Minimum absolute decrease that counts as an improvement.
    pub plateau_threshold: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Weight of the distillation term.
    pub distill_weight: f64,
    pub monitor: Monitor,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            plateau_factor: 3.0,
            plateau_patience: 5,
            plateau_threshold: 1e-4,
            min_lr: 1e-5,
            epochs: 50,
            batch_size: 32,
            seed: 0,
            distill_weight: 1.0,
            monitor: Monitor::Train,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0) {
            return Err(Error::Config("lr0 must be positive".into()));
        }
        if !(self.plateau_factor > 1.0) {
            return Err(Error::Config("plateau_factor must exceed 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be at least 2".into()));
        }
        if !(self.min_lr >= 0.0) || !(self.distill_weight >= 0.0) {
            return Err(Error::Config("min_lr and distill_weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub loss: f64,
    pub accuracy: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub seconds: f64,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.loss).collect()
    }
}

/// Distillation against a frozen teacher over the first `old_classes`
/// logit columns.
#[derive(Debug, Clone, Copy)]
pub struct Distillation<'a> {
    pub teacher: &'a MlpModel,
    pub old_classes: usize,
    pub form: DistillForm,
}

/// Mini-batch boundaries over `n` shuffled samples. A trailing batch of a
/// single sample is merged into the previous one because batch norm needs at
/// least two rows.
fn batch_ranges(n: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut out: Vec<(usize, usize)> = (0..n)
        .step_by(batch_size)
        .map(|start| (start, (start + batch_size).min(n)))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|&(a, b)| b - a == 1) {
        let (_, end) = out.pop().expect("non-empty");
        out.last_mut().expect("at least one batch").1 = end;
    }
    out
}

pub fn train_epochs(
    model: &mut MlpModel,
    features: ArrayView2<f64>,
    labels: &[usize],
    config: &TrainConfig,
    distill: Option<Distillation<'_>>,
) -> Result<TrainReport> {
    train_epochs_monitored(model, features, labels, None, config, distill)
}

/// Mini-batch Adam on softmax cross-entropy (plus weighted distillation when
/// a teacher is given) with reduce-on-plateau scheduling. The model is left
/// in eval mode.
pub fn train_epochs_monitored(
    model: &mut MlpModel,
    features: ArrayView2<f64>,
    labels: &[usize],
    validation: Option<(ArrayView2<f64>, &[usize])>,
    config: &TrainConfig,
    distill: Option<Distillation<'_>>,
) -> Result<TrainReport> {
    config.validate()?;
    let n = features.nrows();
    if n == 0 {
        return Err(Error::Config("empty training set".into()));
    }
    if labels.len() != n {
        return Err(Error::shape(format!("{n} labels"), labels.len()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(Error::Config(format!(
            "label {bad} out of range for {} classes",
            model.n_classes()
        )));
    }
    if features.ncols() != model.input_dim() {
        return Err(Error::shape(model.input_dim(), features.ncols()));
    }
    if config.epochs == 0 {
        return Ok(TrainReport::default());
    }
    if n < 2 {
        return Err(Error::Config("batch normalisation needs at least 2 training samples".into()));
    }
    if config.monitor == Monitor::Validation && validation.is_none() {
        return Err(Error::Config("validation monitoring requested without validation data".into()));
    }

    let teacher_logits = match &distill {
        Some(d) => {
            if d.old_classes > d.teacher.n_classes() || d.old_classes > model.n_classes() {
                return Err(Error::Config(format!(
                    "cannot distil {} old classes from a teacher with {} outputs",
                    d.old_classes,
                    d.teacher.n_classes()
                )));
            }
            let t = d.teacher.predict(features)?;
            Some(t.slice(s![.., ..d.old_classes]).to_owned())
        }
        None => None,
    };

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::new(config.lr0);
    let mut scheduler = PlateauScheduler::new(
        config.lr0,
        config.plateau_factor,
        config.plateau_patience,
        config.plateau_threshold,
        config.min_lr,
    );
    let mut order: Vec<usize> = (0..n).collect();
    let mut report = TrainReport::default();
    model.set_mode(Mode::Train);

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        let lr = scheduler.lr();
        adam.lr = lr;
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (a, b) in batch_ranges(n, config.batch_size) {
            let idx = &order[a..b];
            let xb = features.select(Axis(0), idx);
            let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (logits, cache) = model.forward_train(xb.view(), Some(&mut rng))?;
            let (mut loss, mut grad) = cross_entropy(&logits.view(), &yb)?;
            if let (Some(d), Some(tl)) = (&distill, &teacher_logits) {
                if config.distill_weight > 0.0 && d.old_classes > 0 {
                    let old = d.old_classes;
                    let tb = tl.select(Axis(0), idx);
                    let (dl, dg) = loss_distill(&logits.slice(s![.., ..old]), &tb.view(), d.form)?;
                    loss += config.distill_weight * dl;
                    grad.slice_mut(s![.., ..old])
                        .scaled_add(config.distill_weight, &dg);
                }
            }
            correct += logits
                .outer_iter()
                .zip(&yb)
                .filter(|(row, &y)| argmax(row.view()) == y)
                .count();
            loss_sum += loss * (b - a) as f64;
            let grads = model.backward(&cache, &grad);
            adam.step(model.param_tensors_mut(), grads.tensors());
        }
        let epoch_loss = loss_sum / n as f64;
        report.epochs.push(EpochStats {
            loss: epoch_loss,
            accuracy: correct as f64 / n as f64,
            lr,
        });
        let monitored = match (config.monitor, &validation) {
            (Monitor::Validation, Some((vx, vy))) => {
                let logits = model.predict(*vx)?;
                cross_entropy(&logits.view(), vy)?.0
            }
            _ => epoch_loss,
        };
        scheduler.step(monitored);
    }
    model.set_mode(Mode::Eval);
    report.seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Accuracy of eval-mode argmax predictions.
pub fn accuracy(model: &MlpModel, features: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let logits: Array2<f64> = model.predict(features)?;
    let correct = logits
        .outer_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(correct as f64 / labels.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_blobs(n_per: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = Array2::zeros((2 * n_per, dim));
        let mut y = Vec::new();
        for i in 0..2 * n_per {
            let c = i % 2;
            for j in 0..dim {
                let centre = if c == 0 { -0.5 } else { 0.5 };
                x[[i, j]] = centre * if j % 2 == 0 { 1.0 } else { -1.0 } + rng.random_range(-0.3..0.3);
            }
            y.push(c);
        }
        (x, y)
    }

    fn model(dim: usize, classes: usize, seed: u64) -> MlpModel {
        MlpModel::new(dim, &[32, 16], classes, 0.35, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn batch_ranges_merge_singletons() {
        assert_eq!(batch_ranges(65, 32), vec![(0, 32), (32, 65)]);
        assert_eq!(batch_ranges(64, 32), vec![(0, 32), (32, 64)]);
        assert_eq!(batch_ranges(5, 32), vec![(0, 5)]);
        assert_eq!(batch_ranges(3, 2), vec![(0, 3)]);
    }

    #[test]
    fn zero_epochs_is_noop() {
        let (x, y) = two_blobs(10, 8, 1);
        let mut m = model(8, 2, 2);
        let before = m.clone();
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let report = train_epochs(&mut m, x.view(), &y, &cfg, None).unwrap();
        assert!(report.epochs.is_empty());
        assert_eq!(m, before);
    }

    #[test]
    fn separable_blobs_reach_full_accuracy() {
        let (x, y) = two_blobs(40, 12, 3);
        let mut m = model(12, 2, 4);
        let cfg = TrainConfig { epochs: 50, seed: 5, ..Default::default() };
        let report = train_epochs(&mut m, x.view(), &y, &cfg, None).unwrap();
        assert_eq!(report.epochs.len(), 50);
        assert_eq!(m.mode(), Mode::Eval);
        assert_eq!(accuracy(&m, x.view(), &y).unwrap(), 1.0);
        assert!(report.epochs.windows(2).all(|w| w[1].lr <= w[0].lr));
        assert!(report.epochs.last().unwrap().loss < report.epochs[0].loss);
    }

    #[test]
    fn training_is_reproducible() {
        let (x, y) = two_blobs(20, 6, 3);
        let cfg = TrainConfig { epochs: 5, seed: 9, ..Default::default() };
        let mut a = model(6, 2, 1);
        let mut b = model(6, 2, 1);
        let ra = train_epochs(&mut a, x.view(), &y, &cfg, None).unwrap();
        let rb = train_epochs(&mut b, x.view(), &y, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (x, y) = two_blobs(5, 4, 0);
        let mut m = model(4, 2, 0);
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let mut bad = y.clone();
        bad[0] = 2;
        assert!(train_epochs(&mut m, x.view(), &bad, &cfg, None).is_err());
        let empty = Array2::<f64>::zeros((0, 4));
        assert!(train_epochs(&mut m, empty.view(), &[], &cfg, None).is_err());
        let monitored = TrainConfig { monitor: Monitor::Validation, ..cfg.clone() };
        assert!(train_epochs(&mut m, x.view(), &y, &monitored, None).is_err());
        assert!(train_epochs_monitored(&mut m, x.view(), &y, Some((x.view(), &y)), &monitored, None).is_ok());
    }

    #[test]
    fn distillation_keeps_old_outputs_closer() {
        let (x, y) = two_blobs(20, 8, 7);
        let cfg = TrainConfig { epochs: 20, seed: 1, ..Default::default() };
        let mut teacher = model(8, 2, 3);
        train_epochs(&mut teacher, x.view(), &y, &cfg, None).unwrap();
        let t = teacher.predict(x.view()).unwrap();

        // New task: the first blob is relabelled as a third class.
        let new_y: Vec<usize> = y.iter().map(|&c| if c == 0 { 2 } else { c }).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut start = teacher.clone();
        start.expand_head(1, &mut rng).unwrap();
        for form in [DistillForm::SoftmaxT2, DistillForm::SigmoidBce] {
            let mut plain = start.clone();
            let mut distilled = start.clone();
            train_epochs(&mut plain, x.view(), &new_y, &cfg, None).unwrap();
            let d = Distillation { teacher: &teacher, old_classes: 2, form };
            train_epochs(&mut distilled, x.view(), &new_y, &cfg, Some(d)).unwrap();
            let gap = |m: &MlpModel| {
                let l = m.predict(x.view()).unwrap();
                loss_distill(&l.slice(s![.., ..2]), &t.view(), form).unwrap().0
            };
            assert!(gap(&distilled) < gap(&plain), "{form:?}: {} vs {}", gap(&distilled), gap(&plain));
        }
    }
}
