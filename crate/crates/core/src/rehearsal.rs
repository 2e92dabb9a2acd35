//! Exemplar memory with herding selection and nearest-mean class prototypes.

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stack_features, FeatureVector};
use crate::net::MlpModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    #[default]
    Herding,
    Random,
}

/// Greedy herding: repeatedly picks the sample that brings the running mean
/// of the chosen set closest to the mean of all rows. Ties go to the lowest
/// index. Returns `min(m, n)` indices in selection order.
pub fn herd_select(embeddings: ArrayView2<f64>, m: usize) -> Result<Vec<usize>> {
    let n = embeddings.nrows();
    if n == 0 {
        return Err(Error::Config("herding needs at least one embedding".into()));
    }
    if m == 0 {
        return Err(Error::Config("herding needs m >= 1".into()));
    }
    let target = embeddings.mean_axis(Axis(0)).expect("non-empty");
    let mut chosen = Vec::with_capacity(m.min(n));
    let mut taken = vec![false; n];
    let mut sum = Array1::<f64>::zeros(embeddings.ncols());
    for k in 1..=m.min(n) {
        let inv_k = 1.0 / k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, row) in embeddings.outer_iter().enumerate() {
            if taken[i] {
                continue;
            }
            let dist: f64 = target
                .iter()
                .zip(sum.iter().zip(row.iter()))
                .map(|(mu, (s, x))| {
                    let d = mu - (s + x) * inv_k;
                    d * d
                })
                .sum();
            if best.is_none_or(|(_, b)| dist < b) {
                best = Some((i, dist));
            }
        }
        let (i, _) = best.expect("an untaken row remains");
        taken[i] = true;
        sum += &embeddings.row(i);
        chosen.push(i);
    }
    Ok(chosen)
}

/// Normalised mean embedding of one class's exemplars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMean {
    pub class: usize,
    pub mean: Vec<f64>,
    pub count: usize,
}

/// Per-class exemplar store holding up to `m` encoded inputs per class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExemplarMemory {
    m: usize,
    selection: Selection,
    /// Select on unit-norm embeddings (`true`) or raw activations.
    normalize: bool,
    classes: BTreeMap<usize, Vec<FeatureVector>>,
}

impl ExemplarMemory {
    pub fn new(m: usize, selection: Selection) -> Result<Self> {
        if m == 0 {
            return Err(Error::Config("exemplars per class must be at least 1".into()));
        }
        Ok(ExemplarMemory {
            m,
            selection,
            normalize: true,
            classes: BTreeMap::new(),
        })
    }

    pub fn with_normalized_selection(mut self, normalize: bool) -> Self {
        self.normalize = normalize;
        self
    }

    pub fn per_class(&self) -> usize {
        self.m
    }

    pub fn selection(&self) -> Selection {
        self.selection
    }

    pub fn exemplars(&self, class: usize) -> Option<&[FeatureVector]> {
        self.classes.get(&class).map(Vec::as_slice)
    }

    pub fn classes(&self) -> impl Iterator<Item = (usize, &[FeatureVector])> {
        self.classes.iter().map(|(&c, v)| (c, v.as_slice()))
    }

    pub fn class_ids(&self) -> Vec<usize> {
        self.classes.keys().copied().collect()
    }

    /// Total number of stored exemplars.
    pub fn len(&self) -> usize {
        self.classes.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    /// Selects and stores exemplars for `class`, replacing any previous
    /// entry. Herding runs in `model`'s embedding space; random selection
    /// draws from `rng`.
    pub fn update(
        &mut self,
        class: usize,
        features: &[FeatureVector],
        model: &MlpModel,
        rng: &mut impl Rng,
    ) -> Result<()> {
        if features.is_empty() {
            return Err(Error::Config(format!("class {class} has no training features")));
        }
        let chosen = match self.selection {
            Selection::Herding => {
                let x = stack_features(features)?;
                let emb = if self.normalize {
                    model.embed_batch(x.view())?
                } else {
                    model.embed_raw(x.view())?
                };
                herd_select(emb.view(), self.m)?
            }
            Selection::Random => {
                let k = self.m.min(features.len());
                rand::seq::index::sample(rng, features.len(), k).into_vec()
            }
        };
        let stored = chosen.into_iter().map(|i| features[i].clone()).collect();
        self.classes.insert(class, stored);
        Ok(())
    }

    /// Class means recomputed from the current model.
    pub fn class_means(&self, model: &MlpModel) -> Result<Vec<ClassMean>> {
        if self.classes.is_empty() {
            return Err(Error::State("exemplar memory is empty".into()));
        }
        self.classes
            .iter()
            .map(|(&class, exemplars)| {
                if exemplars.is_empty() {
                    return Err(Error::State(format!("class {class} has no exemplars")));
                }
                let x = stack_features(exemplars)?;
                let emb = model.embed_batch(x.view())?;
                let mut mean = emb.mean_axis(Axis(0)).expect("non-empty");
                let norm = mean.dot(&mean).sqrt();
                if norm > 0.0 {
                    mean /= norm;
                }
                Ok(ClassMean {
                    class,
                    mean: mean.to_vec(),
                    count: exemplars.len(),
                })
            })
            .collect()
    }
}
