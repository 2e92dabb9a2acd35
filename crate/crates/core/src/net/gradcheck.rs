//! Finite-difference gradient verification.
//!
//! The numeric side never touches the backward pass. For every parameter it
//! evaluates `L(p + h) - L(p)` and `L(p - h) - L(p)` by pushing the
//! perturbation forward through the network as an explicit difference: a
//! perturbation of one parameter changes a single column of one layer, and
//! the batch-norm, ReLU and log-sum-exp steps are all evaluated in
//! difference form. This keeps the rounding noise of the loss difference far
//! below the `1e-8` floor of the relative error, which a plain
//! `(L(p + h) - L(p - h)) / 2h` evaluation cannot do for parameters whose
//! true gradient is zero (biases feeding batch norm).

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;

use super::loss::cross_entropy;
use super::{Gradients, MlpModel};
use crate::error::{Error, Result};

/// Finite-difference step.
pub const STEP: f64 = 1e-5;

/// Train-mode (batch statistics, no dropout) forward values of one hidden
/// layer.
struct LayerState {
    input: Array2<f64>,
    centered: Array2<f64>,
    var: Array1<f64>,
    xhat: Array2<f64>,
    pre_act: Array2<f64>,
    eps: f64,
}

struct Reference<'a> {
    model: &'a MlpModel,
    layers: Vec<LayerState>,
    head_input: Array2<f64>,
    probs: Array2<f64>,
    labels: &'a [usize],
}

impl<'a> Reference<'a> {
    fn new(model: &'a MlpModel, batch: ArrayView2<f64>, labels: &'a [usize]) -> Result<Self> {
        if batch.ncols() != model.input_dim() {
            return Err(Error::shape(model.input_dim(), batch.ncols()));
        }
        let n = batch.nrows() as f64;
        let mut layers = Vec::new();
        let mut a = batch.to_owned();
        for l in model.layers() {
            let z = a.dot(&l.linear.weight) + &l.linear.bias;
            let mean = z.sum_axis(Axis(0)) / n;
            let centered = z - &mean;
            let var = centered.mapv(|v| v * v).sum_axis(Axis(0)) / n;
            let xhat = &centered / &var.mapv(|v| (v + l.norm.eps).sqrt());
            let pre_act = &xhat * &l.norm.gamma + &l.norm.beta;
            let next = pre_act.mapv(|v| v.max(0.0));
            layers.push(LayerState {
                input: a,
                centered,
                var,
                xhat,
                pre_act,
                eps: l.norm.eps,
            });
            a = next;
        }
        let logits = a.dot(&model.head().weight) + &model.head().bias;
        let mut probs = logits.clone();
        for mut row in probs.outer_iter_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            row.mapv_inplace(|v| (v - max).exp());
            let s = row.sum();
            row /= s;
        }
        Ok(Reference {
            model,
            layers,
            head_input: a,
            probs,
            labels,
        })
    }

    /// Change of the batch-norm output of column `j` of layer `l` when its
    /// input column changes by `dz`.
    fn bn_column_delta(&self, l: usize, j: usize, dz: &[f64]) -> Vec<f64> {
        let st = &self.layers[l];
        let gamma = self.model.layers()[l].norm.gamma[j];
        let n = dz.len() as f64;
        let mean_d = dz.iter().sum::<f64>() / n;
        let dt: Vec<f64> = dz.iter().map(|d| d - mean_d).collect();
        let c = st.centered.column(j);
        let dvar = (2.0 * c.iter().zip(&dt).map(|(c, d)| c * d).sum::<f64>()
            + dt.iter().map(|d| d * d).sum::<f64>())
            / n;
        let s0 = (st.var[j] + st.eps).sqrt();
        let s1 = (st.var[j] + st.eps + dvar).sqrt();
        let inv_diff = -dvar / (s0 * s1 * (s0 + s1));
        dt.iter()
            .zip(c.iter())
            .map(|(d, c)| gamma * (d / s1 + c * inv_diff))
            .collect()
    }

    fn relu_delta(&self, l: usize, j: usize, dy: &[f64]) -> Vec<f64> {
        let y = self.layers[l].pre_act.column(j);
        y.iter()
            .zip(dy)
            .map(|(&y, &d)| {
                let moved = y + d;
                match (y > 0.0, moved > 0.0) {
                    (true, true) => d,
                    (false, false) => 0.0,
                    _ => moved.max(0.0) - y.max(0.0),
                }
            })
            .collect()
    }

    /// Logit change caused by a change `da` of activation column `j` of
    /// hidden layer `l`.
    fn from_activation_column(&self, l: usize, j: usize, da: &[f64]) -> Array2<f64> {
        let next_w = if l + 1 < self.layers.len() {
            &self.model.layers()[l + 1].linear.weight
        } else {
            &self.model.head().weight
        };
        let out_w = next_w.row(j);
        let mut dz = Array2::zeros((da.len(), out_w.len()));
        for (i, &d) in da.iter().enumerate() {
            if d != 0.0 {
                dz.row_mut(i).scaled_add(d, &out_w);
            }
        }
        if l + 1 < self.layers.len() {
            self.from_dense(l + 1, dz)
        } else {
            dz
        }
    }

    /// Logit change caused by a dense change `dz` of the affine output of
    /// hidden layer `l`.
    fn from_dense(&self, l: usize, dz: Array2<f64>) -> Array2<f64> {
        let mut da = Array2::zeros(dz.raw_dim());
        for j in 0..dz.ncols() {
            let col = dz.column(j).to_vec();
            let dy = self.bn_column_delta(l, j, &col);
            let d = self.relu_delta(l, j, &dy);
            da.column_mut(j).assign(&Array1::from(d));
        }
        if l + 1 < self.layers.len() {
            let dz_next = da.dot(&self.model.layers()[l + 1].linear.weight);
            self.from_dense(l + 1, dz_next)
        } else {
            da.dot(&self.model.head().weight)
        }
    }

    /// `L(logits + dlogits) - L(logits)` for mean cross-entropy.
    fn loss_delta(&self, dlogits: &Array2<f64>) -> f64 {
        let mut total = 0.0;
        for ((p, d), &y) in self
            .probs
            .outer_iter()
            .zip(dlogits.outer_iter())
            .zip(self.labels)
        {
            let s: f64 = p.iter().zip(d.iter()).map(|(p, d)| p * d.exp_m1()).sum();
            total += s.ln_1p() - d[y];
        }
        total / self.labels.len() as f64
    }

    fn central(&self, delta: impl Fn(f64) -> Array2<f64>) -> f64 {
        (self.loss_delta(&delta(STEP)) - self.loss_delta(&delta(-STEP))) / (2.0 * STEP)
    }

    fn hidden_from_pre_bn(&self, l: usize, j: usize, dz: &[f64]) -> Array2<f64> {
        let dy = self.bn_column_delta(l, j, dz);
        let da = self.relu_delta(l, j, &dy);
        self.from_activation_column(l, j, &da)
    }

    fn hidden_from_bn_out(&self, l: usize, j: usize, dy: &[f64]) -> Array2<f64> {
        let da = self.relu_delta(l, j, dy);
        self.from_activation_column(l, j, &da)
    }

    fn rows(&self) -> usize {
        self.labels.len()
    }
}

fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Max relative error between `analytic` and central finite differences
/// (step [`STEP`]) of the mean cross-entropy on `batch`, using batch
/// statistics and no dropout.
pub fn compare_gradients(
    model: &MlpModel,
    batch: ArrayView2<f64>,
    labels: &[usize],
    analytic: &Gradients,
) -> Result<f64> {
    if labels.len() != batch.nrows() || batch.nrows() < 2 {
        return Err(Error::shape("at least 2 rows with one label each", batch.nrows()));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= model.n_classes()) {
        return Err(Error::Config(format!("label {bad} out of range")));
    }
    let r = Reference::new(model, batch, labels)?;
    let n = r.rows();
    let mut worst = 0.0f64;
    let mut check = |a: f64, num: f64| worst = worst.max(relative_error(a, num));

    for (l, layer) in model.layers().iter().enumerate() {
        let g = &analytic.hidden[l];
        let (fan_in, width) = layer.linear.weight.dim();
        let input = &r.layers[l].input;
        for j in 0..width {
            for i in 0..fan_in {
                let x = input.column(i);
                let num = r.central(|h| {
                    let dz: Vec<f64> = x.iter().map(|v| h * v).collect();
                    r.hidden_from_pre_bn(l, j, &dz)
                });
                check(g.weight[[i, j]], num);
            }
            let num = r.central(|h| r.hidden_from_pre_bn(l, j, &vec![h; n]));
            check(g.bias[j], num);
            let xhat = r.layers[l].xhat.column(j);
            let num = r.central(|h| {
                let dy: Vec<f64> = xhat.iter().map(|v| h * v).collect();
                r.hidden_from_bn_out(l, j, &dy)
            });
            check(g.gamma[j], num);
            let num = r.central(|h| r.hidden_from_bn_out(l, j, &vec![h; n]));
            check(g.beta[j], num);
        }
    }

    let (fan_in, classes) = model.head().weight.dim();
    for k in 0..classes {
        for i in 0..fan_in {
            let a = r.head_input.column(i);
            let num = r.central(|h| {
                let mut d = Array2::zeros((n, classes));
                d.column_mut(k).assign(&a.mapv(|v| h * v));
                d
            });
            check(analytic.head_weight[[i, k]], num);
        }
        let num = r.central(|h| {
            let mut d = Array2::zeros((n, classes));
            d.column_mut(k).fill(h);
            d
        });
        check(analytic.head_bias[k], num);
    }
    Ok(worst)
}

/// Analytic gradients from the model's backward pass compared against finite
/// differences; returns the max relative error over all parameters.
pub fn grad_check(model: &MlpModel, batch: ArrayView2<f64>, labels: &[usize]) -> Result<f64> {
    let mut scratch = model.clone();
    let (logits, cache) = scratch.forward_train::<ChaCha8Rng>(batch, None)?;
    let (_, dlogits) = cross_entropy(&logits.view(), labels)?;
    let grads = scratch.backward(&cache, &dlogits);
    compare_gradients(model, batch, labels, &grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::softmax_rows;
    use rand::{Rng, SeedableRng};

    fn setup(input: usize, hidden: &[usize], classes: usize, rows: usize, seed: u64) -> (MlpModel, Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = MlpModel::new(input, hidden, classes, 0.35, &mut rng).unwrap();
        // Non-trivial batch-norm affine parameters.
        for l in model.layers_mut() {
            l.norm.gamma.mapv_inplace(|_| rng.random_range(0.5..1.5));
            l.norm.beta.mapv_inplace(|_| rng.random_range(-0.3..0.3));
            l.linear.bias.mapv_inplace(|_| rng.random_range(-0.1..0.1));
        }
        model.head_mut().weight.mapv_inplace(|_| rng.random_range(-0.5..0.5));
        let x = Array2::from_shape_simple_fn((rows, input), || rng.random_range(-1.0..1.0));
        let y = (0..rows).map(|i| i % classes).collect();
        (model, x, y)
    }

    fn full_loss(model: &MlpModel, x: &Array2<f64>, y: &[usize]) -> f64 {
        let r = Reference::new(model, x.view(), y).unwrap();
        let logits = r.head_input.dot(&model.head().weight) + &model.head().bias;
        cross_entropy(&logits.view(), y).unwrap().0
    }

    #[test]
    fn difference_forward_matches_recomputation() {
        let (model, x, y) = setup(5, &[6, 4], 3, 7, 1);
        let r = Reference::new(&model, x.view(), &y).unwrap();
        let base = full_loss(&model, &x, &y);
        let d = 1e-3;

        let mut m = model.clone();
        m.layers_mut()[0].linear.weight[[2, 3]] += d;
        let dz: Vec<f64> = r.layers[0].input.column(2).iter().map(|v| d * v).collect();
        let fast = r.loss_delta(&r.hidden_from_pre_bn(0, 3, &dz));
        assert!((fast - (full_loss(&m, &x, &y) - base)).abs() < 1e-13);

        let mut m = model.clone();
        m.layers_mut()[1].norm.gamma[1] += d;
        let dy: Vec<f64> = r.layers[1].xhat.column(1).iter().map(|v| d * v).collect();
        let fast = r.loss_delta(&r.hidden_from_bn_out(1, 1, &dy));
        assert!((fast - (full_loss(&m, &x, &y) - base)).abs() < 1e-13);
    }

    #[test]
    fn small_network_passes() {
        let (model, x, y) = setup(7, &[6, 5], 3, 8, 2);
        let err = grad_check(&model, x.view(), &y).unwrap();
        assert!(err < 1e-4, "max relative error {err}");
    }

    #[test]
    fn bias_only_softmax_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut model = MlpModel::new(3, &[], 4, 0.0, &mut rng).unwrap();
        model.head_mut().weight.fill(0.0);
        model.head_mut().bias = ndarray::array![0.2, -0.1, 0.4, 0.0];
        let x = Array2::from_shape_simple_fn((5, 3), || rng.random_range(-1.0..1.0));
        let y = [0, 1, 2, 3, 1];
        let (logits, cache) = model.clone().forward_train::<ChaCha8Rng>(x.view(), None).unwrap();
        let (_, dl) = cross_entropy(&logits.view(), &y).unwrap();
        let grads = model.backward(&cache, &dl);
        let mut expected = softmax_rows(&logits.view());
        for (i, &c) in y.iter().enumerate() {
            expected[[i, c]] -= 1.0;
        }
        let expected = expected.sum_axis(Axis(0)) / y.len() as f64;
        for (g, e) in grads.head_bias.iter().zip(expected.iter()) {
            assert!((g - e).abs() < 1e-15);
        }
        assert!(compare_gradients(&model, x.view(), &y, &grads).unwrap() < 1e-6);
    }

    #[test]
    fn corrupted_gradients_are_caught() {
        let (model, x, y) = setup(6, &[5, 4], 3, 8, 3);
        let (logits, cache) = model.clone().forward_train::<ChaCha8Rng>(x.view(), None).unwrap();
        let (_, dl) = cross_entropy(&logits.view(), &y).unwrap();
        let mut grads = model.backward(&cache, &dl);
        assert!(compare_gradients(&model, x.view(), &y, &grads).unwrap() < 1e-4);
        // Mutation: wrong scale on one layer's weight gradient.
        grads.hidden[0].weight *= 1.5;
        assert!(compare_gradients(&model, x.view(), &y, &grads).unwrap() > 1e-1);
    }
}
