//! Fully-connected classifier trained from scratch.
//!
//! Each hidden layer is `affine -> batch norm -> ReLU -> dropout`; the head
//! is a plain affine map producing one logit per class. All arithmetic is in
//! `f64`. The head can grow by appending class rows without touching any
//! existing parameter, which is what the incremental learners rely on.

mod gradcheck;
mod loss;
mod optim;
mod train;

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use gradcheck::{compare_gradients, grad_check};
pub use loss::{argmax, cross_entropy, loss_distill, softmax_rows, DistillForm};
pub use optim::{Adam, PlateauScheduler};
pub use train::{accuracy, train_epochs, train_epochs_monitored, Distillation, EpochStats, Monitor, TrainConfig, TrainReport};

pub const DEFAULT_HIDDEN: [usize; 2] = [256, 128];
pub const DEFAULT_DROPOUT: f64 = 0.35;
pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;
/// Standard deviation of freshly appended head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Affine map stored as `fan_in x fan_out` so that `y = x W + b` for row
/// batches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    fn he(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
        Linear {
            weight: Array2::from_shape_simple_fn((fan_in, fan_out), || normal.sample(rng)),
            bias: Array1::zeros(fan_out),
        }
    }

    fn forward(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        x.dot(&self.weight) + &self.bias
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
    pub running_mean: Array1<f64>,
    pub running_var: Array1<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        BatchNorm {
            gamma: Array1::ones(width),
            beta: Array1::zeros(width),
            running_mean: Array1::zeros(width),
            running_var: Array1::ones(width),
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    fn eval(&self, z: &mut Array2<f64>) {
        let scale = &self.gamma / self.running_var.mapv(|v| (v + self.eps).sqrt());
        let shift = &self.beta - &(&self.running_mean * &scale);
        *z *= &scale;
        *z += &shift;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HiddenLayer {
    pub linear: Linear,
    pub norm: BatchNorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    input_dim: usize,
    layers: Vec<HiddenLayer>,
    head: Linear,
    dropout_p: f64,
    mode: Mode,
}

/// Intermediate values of one hidden layer kept for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct HiddenCache {
    pub input: Array2<f64>,
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
    /// Batch-norm output, before ReLU.
    pub pre_act: Array2<f64>,
    /// Inverted-dropout multipliers, `None` when dropout was off.
    pub keep: Option<Array2<f64>>,
}

#[derive(Debug, Clone)]
pub(crate) struct ForwardCache {
    pub hidden: Vec<HiddenCache>,
    pub head_input: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

/// Gradients laid out like the model's parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub hidden: Vec<LayerGrads>,
    pub head_weight: Array2<f64>,
    pub head_bias: Array1<f64>,
}

impl Gradients {
    /// Flat views in parameter order: per hidden layer weight, bias, gamma,
    /// beta; then head weight and head bias.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(self.hidden.len() * 4 + 2);
        for l in &self.hidden {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
            out.push(l.gamma.as_slice().expect("standard layout"));
            out.push(l.beta.as_slice().expect("standard layout"));
        }
        out.push(self.head_weight.as_slice().expect("standard layout"));
        out.push(self.head_bias.as_slice().expect("standard layout"));
        out
    }
}

/// Applies inverted dropout in place and returns the multipliers used.
pub(crate) fn apply_dropout(a: &mut Array2<f64>, p: f64, rng: &mut impl Rng) -> Array2<f64> {
    let scale = 1.0 / (1.0 - p);
    let keep = Array2::from_shape_simple_fn(a.raw_dim(), || {
        if rng.random::<f64>() < p {
            0.0
        } else {
            scale
        }
    });
    *a *= &keep;
    keep
}

fn relu_inplace(a: &mut Array2<f64>) {
    a.mapv_inplace(|v| v.max(0.0));
}

impl MlpModel {
    /// Builds a model with He-initialised hidden layers and a head of
    /// `n_classes` rows drawn with std [`HEAD_INIT_STD`].
    pub fn new(
        input_dim: usize,
        hidden: &[usize],
        n_classes: usize,
        dropout_p: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if input_dim == 0 || hidden.contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if !(0.0..1.0).contains(&dropout_p) {
            return Err(Error::Config(format!("dropout probability {dropout_p} not in [0, 1)")));
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            layers.push(HiddenLayer {
                linear: Linear::he(fan_in, width, rng),
                norm: BatchNorm::new(width),
            });
            fan_in = width;
        }
        let mut model = MlpModel {
            input_dim,
            layers,
            head: Linear {
                weight: Array2::zeros((fan_in, 0)),
                bias: Array1::zeros(0),
            },
            dropout_p,
            mode: Mode::Eval,
        };
        if n_classes > 0 {
            model.expand_head(n_classes, rng)?;
        }
        Ok(model)
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn hidden_widths(&self) -> Vec<usize> {
        self.layers.iter().map(|l| l.norm.gamma.len()).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.head.bias.len()
    }

    pub fn dropout_p(&self) -> f64 {
        self.dropout_p
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn layers(&self) -> &[HiddenLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [HiddenLayer] {
        &mut self.layers
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn head_mut(&mut self) -> &mut Linear {
        &mut self.head
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim {
            return Err(Error::shape(
                format!("{} input columns", self.input_dim),
                format!("{} columns", x.ncols()),
            ));
        }
        Ok(())
    }

    /// Head logits computed column by column with a fixed summation order,
    /// so a column's value does not depend on how many columns exist.
    fn head_logits(&self, a: &ArrayView2<f64>) -> Array2<f64> {
        let w = &self.head.weight;
        let mut out = Array2::zeros((a.nrows(), self.n_classes()));
        for (row, mut o) in a.outer_iter().zip(out.outer_iter_mut()) {
            for (c, o) in o.iter_mut().enumerate() {
                let mut acc = self.head.bias[c];
                for (k, &v) in row.iter().enumerate() {
                    acc += v * w[[k, c]];
                }
                *o = acc;
            }
        }
        out
    }

    /// Last hidden activations with eval-mode semantics (running batch-norm
    /// statistics, no dropout), before normalisation.
    fn hidden_eval(&self, x: &ArrayView2<f64>) -> Array2<f64> {
        let mut a = x.to_owned();
        for layer in &self.layers {
            let mut z = layer.linear.forward(&a.view());
            layer.norm.eval(&mut z);
            relu_inplace(&mut z);
            a = z;
        }
        a
    }

    /// Eval-mode logits; does not depend on [`MlpModel::mode`] and never
    /// mutates the model.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let a = self.hidden_eval(&x);
        Ok(self.head_logits(&a.view()))
    }

    /// Forward pass according to the current mode. In train mode this uses
    /// batch statistics, updates the running statistics and applies
    /// inverted dropout drawn from `rng`.
    pub fn forward(&mut self, x: ArrayView2<f64>, rng: &mut impl Rng) -> Result<Array2<f64>> {
        match self.mode {
            Mode::Eval => self.predict(x),
            Mode::Train => Ok(self.forward_train(x, Some(rng))?.0),
        }
    }

    /// Train-mode forward returning the cache needed by [`MlpModel::backward`].
    /// Dropout is skipped when `rng` is `None`.
    pub(crate) fn forward_train<R: Rng>(
        &mut self,
        x: ArrayView2<f64>,
        mut rng: Option<&mut R>,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n = x.nrows();
        if n < 2 {
            return Err(Error::shape(
                "at least 2 rows for batch statistics",
                format!("{n} rows"),
            ));
        }
        let nf = n as f64;
        let p = self.dropout_p;
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        for layer in self.layers.iter_mut() {
            let z = layer.linear.forward(&a.view());
            let mean = z.mean_axis(Axis(0)).expect("non-empty batch");
            let centered = &z - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / nf;
            let inv_std = var.mapv(|v| 1.0 / (v + layer.norm.eps).sqrt());
            let xhat = &centered * &inv_std;
            let pre_act = &xhat * &layer.norm.gamma + &layer.norm.beta;

            let bn = &mut layer.norm;
            let m = bn.momentum;
            Zip::from(&mut bn.running_mean)
                .and(&mean)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b);
            Zip::from(&mut bn.running_var)
                .and(&var)
                .for_each(|r, &b| *r = (1.0 - m) * *r + m * b * nf / (nf - 1.0));

            let mut out = pre_act.clone();
            relu_inplace(&mut out);
            let keep = match rng.as_deref_mut() {
                Some(r) if p > 0.0 => Some(apply_dropout(&mut out, p, r)),
                _ => None,
            };
            caches.push(HiddenCache {
                input: a,
                xhat,
                inv_std,
                pre_act,
                keep,
            });
            a = out;
        }
        let logits = self.head_logits(&a.view());
        Ok((
            logits,
            ForwardCache {
                hidden: caches,
                head_input: a,
            },
        ))
    }

    /// Backpropagates `dlogits` (gradient of the loss w.r.t. the logits of
    /// the cached forward pass) to every parameter.
    pub(crate) fn backward(&self, cache: &ForwardCache, dlogits: &Array2<f64>) -> Gradients {
        let head_weight = cache.head_input.t().dot(dlogits);
        let head_bias = dlogits.sum_axis(Axis(0));
        let mut da = dlogits.dot(&self.head.weight.t());
        let mut hidden = Vec::with_capacity(self.layers.len());
        for (layer, c) in self.layers.iter().zip(&cache.hidden).rev() {
            if let Some(keep) = &c.keep {
                da *= keep;
            }
            Zip::from(&mut da)
                .and(&c.pre_act)
                .for_each(|g, &y| if y <= 0.0 { *g = 0.0 });
            let dy = da;
            let n = dy.nrows() as f64;
            let gamma = (&dy * &c.xhat).sum_axis(Axis(0));
            let beta = dy.sum_axis(Axis(0));
            let dxhat = &dy * &layer.norm.gamma;
            let sum_dxhat = dxhat.sum_axis(Axis(0));
            let sum_dxhat_xhat = (&dxhat * &c.xhat).sum_axis(Axis(0));
            let dz = (&dxhat * n - &sum_dxhat - &c.xhat * &sum_dxhat_xhat) * (&c.inv_std / n);
            let weight = c.input.t().dot(&dz);
            let bias = dz.sum_axis(Axis(0));
            da = dz.dot(&layer.linear.weight.t());
            hidden.push(LayerGrads {
                weight,
                bias,
                gamma,
                beta,
            });
        }
        hidden.reverse();
        Gradients {
            hidden,
            head_weight,
            head_bias,
        }
    }

    /// Mutable flat parameter views, in the order of [`Gradients::tensors`].
    pub(crate) fn param_tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(self.layers.len() * 4 + 2);
        for l in self.layers.iter_mut() {
            out.push(l.linear.weight.as_slice_mut().expect("standard layout"));
            out.push(l.linear.bias.as_slice_mut().expect("standard layout"));
            out.push(l.norm.gamma.as_slice_mut().expect("standard layout"));
            out.push(l.norm.beta.as_slice_mut().expect("standard layout"));
        }
        out.push(self.head.weight.as_slice_mut().expect("standard layout"));
        out.push(self.head.bias.as_slice_mut().expect("standard layout"));
        out
    }

    /// Unit-norm activations of the last hidden layer (eval semantics).
    /// A zero activation vector is returned unchanged.
    pub fn embed(&self, feature: &[f64]) -> Result<Vec<f64>> {
        let x = ArrayView2::from_shape((1, feature.len()), feature)
            .map_err(|e| Error::shape("one feature row", e))?;
        Ok(self.embed_batch(x)?.row(0).to_vec())
    }

    /// Row-wise [`MlpModel::embed`].
    pub fn embed_batch(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut a = self.embed_raw(x)?;
        for mut row in a.outer_iter_mut() {
            let norm = row.dot(&row).sqrt();
            if norm > 0.0 {
                row /= norm;
            }
        }
        Ok(a)
    }

    /// Last hidden activations without normalisation.
    pub fn embed_raw(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        if self.layers.is_empty() {
            return Err(Error::State("a model without hidden layers has no embedding".into()));
        }
        Ok(self.hidden_eval(&x))
    }

    /// Appends `n_new` class rows to the head. Existing parameters and
    /// batch-norm state are untouched, so old logits are bit-identical.
    pub fn expand_head(&mut self, n_new: usize, rng: &mut impl Rng) -> Result<()> {
        if n_new == 0 {
            return Err(Error::Config("expand_head needs at least one new class".into()));
        }
        let normal = Normal::new(0.0, HEAD_INIT_STD).expect("positive std");
        let (fan_in, old) = self.head.weight.dim();
        let mut weight = Array2::zeros((fan_in, old + n_new));
        weight.slice_mut(s![.., ..old]).assign(&self.head.weight);
        // Draw new rows class by class so that successive expansions consume
        // the generator the same way as a single larger one.
        for c in old..old + n_new {
            for k in 0..fan_in {
                weight[[k, c]] = normal.sample(rng);
            }
        }
        let mut bias = Array1::zeros(old + n_new);
        bias.slice_mut(s![..old]).assign(&self.head.bias);
        self.head = Linear { weight, bias };
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::harness::write_atomic(path.as_ref(), &bytes)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let model: MlpModel = serde_json::from_slice(&bytes)?;
        model.validate()?;
        Ok(model)
    }

    fn validate(&self) -> Result<()> {
        let mut fan_in = self.input_dim;
        for l in &self.layers {
            let (i, o) = l.linear.weight.dim();
            let n = &l.norm;
            if i != fan_in
                || l.linear.bias.len() != o
                || [&n.gamma, &n.beta, &n.running_mean, &n.running_var].iter().any(|v| v.len() != o)
            {
                return Err(Error::shape(format!("layer with fan-in {fan_in}"), format!("{i}x{o}")));
            }
            if n.running_var.iter().any(|&v| v < 0.0) {
                return Err(Error::State("negative running variance".into()));
            }
            fan_in = o;
        }
        if self.head.weight.nrows() != fan_in || self.head.bias.len() != self.head.weight.ncols() {
            return Err(Error::shape(format!("head with fan-in {fan_in}"), format!("{:?}", self.head.weight.dim())));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config("dropout probability out of range".into()));
        }
        Ok(())
    }
}
