//! Class-incremental strategies behind a single [`Learner`].

mod il2m;
mod nem;

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{stack_features, Encoding, FeatureVector};
use crate::net::{
    argmax, softmax_rows, train_epochs, DistillForm, Distillation, MlpModel, TrainConfig, TrainReport,
    DEFAULT_DROPOUT, DEFAULT_HIDDEN,
};
use crate::rehearsal::{ClassMean, ExemplarMemory, Selection};

pub use il2m::{il2m_rectify, Il2mStats, MIN_STAT};
pub use nem::nem_predict;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    #[serde(rename = "joint")]
    Joint,
    #[serde(rename = "finetune")]
    FineTune,
    #[serde(rename = "lwf")]
    LwF,
    #[serde(rename = "icarl")]
    ICaRL,
    #[serde(rename = "il2m")]
    IL2M,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 5] = [
        StrategyKind::Joint,
        StrategyKind::FineTune,
        StrategyKind::LwF,
        StrategyKind::ICaRL,
        StrategyKind::IL2M,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Joint => "joint",
            StrategyKind::FineTune => "finetune",
            StrategyKind::LwF => "lwf",
            StrategyKind::ICaRL => "icarl",
            StrategyKind::IL2M => "il2m",
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, StrategyKind::ICaRL | StrategyKind::IL2M)
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace(['-', '_'], "");
        StrategyKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::Config(format!("unknown strategy `{s}`")))
    }
}

/// Switches for the iCaRL ablations. Ignored by the other strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Ablation {
    /// Sigmoid distillation on old-class outputs.
    pub distill: bool,
    /// Nearest-exemplar-mean classification instead of softmax.
    pub nem: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation { distill: true, nem: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub strategy: StrategyKind,
    pub ablation: Ablation,
    pub encoding: Encoding,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    /// Exemplars kept per class.
    pub m: usize,
    pub selection: Selection,
    /// Herd on unit-norm embeddings rather than raw activations.
    pub herd_normalized: bool,
    pub initial: TrainConfig,
    pub incremental: TrainConfig,
    /// Joint only: retrain a fresh model with `initial` at every task.
    pub joint_from_scratch: bool,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        LearnerConfig {
            strategy: StrategyKind::ICaRL,
            ablation: Ablation::default(),
            encoding: Encoding::Combined,
            hidden: DEFAULT_HIDDEN.to_vec(),
            dropout: DEFAULT_DROPOUT,
            m: 5,
            selection: Selection::Herding,
            herd_normalized: true,
            initial: TrainConfig::default(),
            incremental: TrainConfig { epochs: 15, ..TrainConfig::default() },
            joint_from_scratch: false,
            seed: 0,
        }
    }
}

/// Training features of one class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSamples {
    pub class: usize,
    pub features: Vec<FeatureVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub class: usize,
    /// One score per seen class, in [`Learner::seen`] order.
    pub scores: Vec<f64>,
}

/// Seed for task `task`, decorrelated across tasks.
pub fn task_seed(base: u64, task: usize) -> u64 {
    base.wrapping_add((task as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const STREAM_HEAD: u64 = 1;
const STREAM_MEMORY: u64 = 2;
const STREAM_FRESH: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Learner {
    config: LearnerConfig,
    model: MlpModel,
    teacher: Option<MlpModel>,
    memory: Option<ExemplarMemory>,
    il2m: Option<Il2mStats>,
    /// External class ids; head column `i` predicts `seen[i]`.
    seen: Vec<usize>,
    /// Joint only: every training sample seen so far.
    pool: Vec<ClassSamples>,
    means: Vec<ClassMean>,
    /// Tasks completed so far.
    tasks: usize,
}

impl Learner {
    pub fn new(config: LearnerConfig) -> Result<Self> {
        config.initial.validate()?;
        config.incremental.validate()?;
        let uses_memory = config.strategy.uses_memory();
        if uses_memory && config.hidden.is_empty() {
            return Err(Error::Config("rehearsal strategies need at least one hidden layer".into()));
        }
        let model = MlpModel::new(
            config.encoding.dim(),
            &config.hidden,
            0,
            config.dropout,
            &mut ChaCha8Rng::seed_from_u64(config.seed),
        )?;
        let memory = if uses_memory {
            Some(ExemplarMemory::new(config.m, config.selection)?.with_normalized_selection(config.herd_normalized))
        } else {
            None
        };
        let il2m = (config.strategy == StrategyKind::IL2M).then(Il2mStats::default);
        Ok(Learner {
            config,
            model,
            teacher: None,
            memory,
            il2m,
            seen: Vec::new(),
            pool: Vec::new(),
            means: Vec::new(),
            tasks: 0,
        })
    }

    pub fn config(&self) -> &LearnerConfig {
        &self.config
    }

    pub fn strategy(&self) -> StrategyKind {
        self.config.strategy
    }

    pub fn model(&self) -> &MlpModel {
        &self.model
    }

    pub fn teacher(&self) -> Option<&MlpModel> {
        self.teacher.as_ref()
    }

    pub fn memory(&self) -> Option<&ExemplarMemory> {
        self.memory.as_ref()
    }

    pub fn il2m_stats(&self) -> Option<&Il2mStats> {
        self.il2m.as_ref()
    }

    pub fn seen(&self) -> &[usize] {
        &self.seen
    }

    /// Joint only: the retained training data.
    pub fn pool(&self) -> &[ClassSamples] {
        &self.pool
    }

    pub fn class_means(&self) -> &[ClassMean] {
        &self.means
    }

    pub fn tasks_completed(&self) -> usize {
        self.tasks
    }

    pub fn is_initialized(&self) -> bool {
        self.tasks > 0
    }

    fn uses_nem(&self) -> bool {
        self.config.strategy == StrategyKind::ICaRL && self.config.ablation.nem
    }

    fn column(&self, class: usize) -> usize {
        self.seen.iter().position(|&c| c == class).expect("class is seen")
    }

    fn check_batch(&self, data: &[ClassSamples]) -> Result<()> {
        let mut ids = BTreeSet::new();
        for cs in data {
            if cs.features.is_empty() {
                return Err(Error::Config(format!("class {} has no training data", cs.class)));
            }
            if self.seen.contains(&cs.class) || !ids.insert(cs.class) {
                return Err(Error::Config(format!("class {} is already known", cs.class)));
            }
            if let Some(f) = cs.features.iter().find(|f| f.encoding != self.config.encoding || f.dim() != self.config.encoding.dim()) {
                return Err(Error::Config(format!(
                    "class {} has {} features, learner expects {}",
                    cs.class, f.encoding, self.config.encoding
                )));
            }
        }
        Ok(())
    }

    /// Stacks the new-class data followed by every stored exemplar.
    fn training_set(&self, data: &[ClassSamples], with_memory: bool) -> Result<(Array2<f64>, Vec<usize>)> {
        let mut rows: Vec<&FeatureVector> = Vec::new();
        let mut labels = Vec::new();
        for cs in data {
            let col = self.column(cs.class);
            rows.extend(&cs.features);
            labels.extend(std::iter::repeat_n(col, cs.features.len()));
        }
        if let (true, Some(mem)) = (with_memory, &self.memory) {
            for (class, ex) in mem.classes() {
                let col = self.column(class);
                rows.extend(ex);
                labels.extend(std::iter::repeat_n(col, ex.len()));
            }
        }
        Ok((stack_features(rows)?, labels))
    }

    fn train_config(&self, base: &TrainConfig, task: usize) -> TrainConfig {
        TrainConfig { seed: task_seed(self.config.seed, task), ..base.clone() }
    }

    /// First task. Needs at least two classes.
    pub fn learn_initial(&mut self, data: &[ClassSamples]) -> Result<TrainReport> {
        if self.is_initialized() {
            return Err(Error::State("learner is already initialized".into()));
        }
        if data.len() < 2 {
            return Err(Error::Config(format!("initial task needs at least 2 classes, got {}", data.len())));
        }
        self.check_batch(data)?;
        self.run_task(data, true)
    }

    /// One incremental task with classes not seen before.
    pub fn learn_increment(&mut self, data: &[ClassSamples]) -> Result<TrainReport> {
        if !self.is_initialized() {
            return Err(Error::State("learner is not initialized".into()));
        }
        if data.is_empty() {
            return Err(Error::Config("incremental task has no classes".into()));
        }
        self.check_batch(data)?;
        self.run_task(data, false)
    }

    fn run_task(&mut self, data: &[ClassSamples], initial: bool) -> Result<TrainReport> {
        let task = self.tasks;
        let seed = task_seed(self.config.seed, task);
        let old_classes = self.seen.len();
        self.seen.extend(data.iter().map(|cs| cs.class));
        self.model.expand_head(data.len(), &mut stream_rng(seed, STREAM_HEAD))?;
        let strategy = self.config.strategy;
        let base = if initial { &self.config.initial } else { &self.config.incremental };
        let mut config = self.train_config(base, task);

        let report = if strategy == StrategyKind::Joint && !initial {
            self.pool.extend(data.iter().cloned());
            let (x, y) = self.training_set(&self.pool, false)?;
            if self.config.joint_from_scratch {
                config = self.train_config(&self.config.initial, task);
                self.model = MlpModel::new(
                    self.config.encoding.dim(),
                    &self.config.hidden,
                    self.seen.len(),
                    self.config.dropout,
                    &mut stream_rng(seed, STREAM_FRESH),
                )?;
            }
            train_epochs(&mut self.model, x.view(), &y, &config, None)?
        } else {
            if strategy == StrategyKind::Joint {
                self.pool.extend(data.iter().cloned());
            }
            let (x, y) = self.training_set(data, !initial)?;
            let distill = match (strategy, &self.teacher, initial) {
                (StrategyKind::LwF, Some(t), false) => Some(Distillation {
                    teacher: t,
                    old_classes,
                    form: DistillForm::SoftmaxT2,
                }),
                (StrategyKind::ICaRL, Some(t), false) if self.config.ablation.distill => Some(Distillation {
                    teacher: t,
                    old_classes,
                    form: DistillForm::SigmoidBce,
                }),
                _ => None,
            };
            train_epochs(&mut self.model, x.view(), &y, &config, distill)?
        };

        if let Some(mem) = self.memory.as_mut() {
            let mut rng = stream_rng(seed, STREAM_MEMORY);
            for cs in data {
                mem.update(cs.class, &cs.features, &self.model, &mut rng)?;
            }
        }
        if self.il2m.is_some() {
            self.update_il2m(data, task)?;
        }
        if self.uses_nem() {
            self.means = self.memory.as_ref().expect("rehearsal memory").class_means(&self.model)?;
        }
        if matches!(strategy, StrategyKind::LwF | StrategyKind::ICaRL) {
            self.teacher = Some(self.model.clone());
        }
        self.tasks += 1;
        Ok(report)
    }

    fn update_il2m(&mut self, data: &[ClassSamples], task: usize) -> Result<()> {
        let mut stats = self.il2m.take().expect("IL2M statistics");
        let mut top1_sum = 0.0;
        let mut count = 0usize;
        for cs in data {
            let col = self.column(cs.class);
            let probs = softmax_rows(&self.model.predict(stack_features(&cs.features)?.view())?.view());
            let mu = probs.column(col).mean().expect("non-empty class");
            top1_sum += probs.outer_iter().map(|r| r.fold(0.0f64, |a, &b| a.max(b))).sum::<f64>();
            count += probs.nrows();
            stats.mu_init.insert(cs.class, mu);
            stats.mu_cur.insert(cs.class, mu);
            stats.intro_task.insert(cs.class, task);
        }
        stats.conf.push(top1_sum / count as f64);
        let new: BTreeSet<usize> = data.iter().map(|cs| cs.class).collect();
        let mem = self.memory.as_ref().expect("rehearsal memory");
        for (class, ex) in mem.classes() {
            if new.contains(&class) {
                continue;
            }
            let col = self.column(class);
            let probs = softmax_rows(&self.model.predict(stack_features(ex)?.view())?.view());
            stats.mu_cur.insert(class, probs.column(col).mean().expect("non-empty memory"));
        }
        self.il2m = Some(stats);
        Ok(())
    }

    /// Scores a batch of encoded inputs. Rows follow `features`.
    pub fn classify_batch(&self, features: ArrayView2<f64>) -> Result<Vec<Prediction>> {
        if !self.is_initialized() {
            return Err(Error::State("learner is not initialized".into()));
        }
        if self.uses_nem() {
            let emb = self.model.embed_batch(features)?;
            let order: Vec<usize> = self.means.iter().map(|m| self.column(m.class)).collect();
            return emb
                .outer_iter()
                .map(|row| {
                    let (class, by_mean) = nem_predict(&self.means, row.as_slice().expect("standard layout"))?;
                    let mut scores = vec![f64::NEG_INFINITY; self.seen.len()];
                    for (&col, s) in order.iter().zip(by_mean) {
                        scores[col] = s;
                    }
                    Ok(Prediction { class, scores })
                })
                .collect();
        }
        let probs = softmax_rows(&self.model.predict(features)?.view());
        probs
            .axis_iter(Axis(0))
            .map(|row| {
                let mut scores = row.to_vec();
                if let Some(stats) = &self.il2m {
                    scores = il2m_rectify(&scores, &self.seen, stats, self.tasks - 1)?;
                }
                let col = argmax(ndarray::ArrayView1::from(&scores[..]));
                Ok(Prediction { class: self.seen[col], scores })
            })
            .collect()
    }

    pub fn classify(&self, feature: &FeatureVector) -> Result<Prediction> {
        if feature.dim() != self.model.input_dim() {
            return Err(Error::shape(self.model.input_dim(), feature.dim()));
        }
        let x = ArrayView2::from_shape((1, feature.dim()), &feature.values[..])
            .map_err(|e| Error::shape("one feature row", e))?;
        Ok(self.classify_batch(x)?.pop().expect("one row"))
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let bytes = serde_json::to_vec(self)?;
        crate::harness::write_atomic(path.as_ref(), &bytes)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let learner: Learner = serde_json::from_slice(&bytes)?;
        if learner.model.n_classes() != learner.seen.len() {
            return Err(Error::State(format!(
                "checkpoint head has {} outputs for {} seen classes",
                learner.model.n_classes(),
                learner.seen.len()
            )));
        }
        Ok(learner)
    }
}

#[cfg(test)]
mod tests;
