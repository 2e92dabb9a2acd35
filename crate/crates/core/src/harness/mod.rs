//! Seeded scenario runs, aggregation, timing and result files.

mod metrics;
mod timing;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    load_dataset_with, split_by_subject, synth_gestures, GestureDataset, LoadOptions, SubjectSplit, SynthConfig,
};
use crate::error::{Error, Result};
use crate::features::{encode, encode_matrix, Encoding};
use crate::net::{TrainConfig, DEFAULT_HIDDEN};
use crate::rehearsal::Selection;
use crate::strategies::{Ablation, ClassSamples, Learner, LearnerConfig, StrategyKind};

pub use metrics::{aggregate, emit_metrics, Formats, Summary, TaskSummary};
pub use timing::{
    stage_latencies, time_increment, time_profile, EpisodeTiming, ProfileConfig, StageLatencies, StageTiming, TimeProfile,
};

/// Writes `bytes` to a temporary file next to `path` and renames it into
/// place, so readers never observe a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(tmp.path(), e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(tmp.path(), e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Everything needed to reproduce a batch of runs. Missing JSON fields take
/// the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Scenario {
    /// Landmark files. When empty, `synth` generates the data.
    pub data: Vec<PathBuf>,
    pub synth: SynthConfig,
    pub mirror_left: bool,
    /// Subject assignment. When absent the last fifth of the sorted subjects
    /// is held out for testing.
    pub split: Option<SubjectSplit>,
    pub encoding: Encoding,
    pub strategy: StrategyKind,
    pub ablation: Ablation,
    pub n_init: usize,
    pub classes_per_task: usize,
    pub epochs_init: usize,
    pub epochs_inc: usize,
    pub m: usize,
    pub selection: Selection,
    pub runs: usize,
    pub seed: u64,
    pub hidden: Vec<usize>,
    pub batch_size: usize,
    pub lr: f64,
    pub joint_from_scratch: bool,
    /// Write wall-clock training seconds into `runs.csv`. Off by default so
    /// repeated runs produce identical files.
    pub record_timings: bool,
}

impl Default for Scenario {
    fn default() -> Self {
        let train = TrainConfig::default();
        Scenario {
            data: Vec::new(),
            synth: SynthConfig::default(),
            mirror_left: false,
            split: None,
            encoding: Encoding::Combined,
            strategy: StrategyKind::ICaRL,
            ablation: Ablation::default(),
            n_init: 2,
            classes_per_task: 1,
            epochs_init: 50,
            epochs_inc: 15,
            m: 5,
            selection: Selection::Herding,
            runs: 10,
            seed: 0,
            hidden: DEFAULT_HIDDEN.to_vec(),
            batch_size: train.batch_size,
            lr: train.lr0,
            joint_from_scratch: false,
            record_timings: false,
        }
    }
}

impl Scenario {
    pub fn validate(&self) -> Result<()> {
        if self.n_init < 2 {
            return Err(Error::Config("n_init must be at least 2".into()));
        }
        if self.runs < 1 {
            return Err(Error::Config("runs must be at least 1".into()));
        }
        if self.classes_per_task < 1 {
            return Err(Error::Config("classes_per_task must be at least 1".into()));
        }
        if self.m < 1 && self.strategy.uses_memory() {
            return Err(Error::Config("m must be at least 1".into()));
        }
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let s: Scenario = serde_json::from_slice(&bytes)?;
        Ok(s)
    }

    /// Learner settings for one run.
    pub fn learner_config(&self, seed: u64) -> LearnerConfig {
        let base = TrainConfig { lr0: self.lr, batch_size: self.batch_size, ..TrainConfig::default() };
        LearnerConfig {
            strategy: self.strategy,
            ablation: self.ablation,
            encoding: self.encoding,
            hidden: self.hidden.clone(),
            m: self.m.max(1),
            selection: self.selection,
            initial: TrainConfig { epochs: self.epochs_init, ..base.clone() },
            incremental: TrainConfig { epochs: self.epochs_inc, ..base },
            joint_from_scratch: self.joint_from_scratch,
            seed,
            ..LearnerConfig::default()
        }
    }

    pub fn load_data(&self) -> Result<GestureDataset> {
        if self.data.is_empty() {
            return synth_gestures(&self.synth);
        }
        let opts = LoadOptions { mirror_left: self.mirror_left };
        let parts = self
            .data
            .iter()
            .map(|p| load_dataset_with(p, opts))
            .collect::<Result<Vec<_>>>()?;
        Ok(GestureDataset::concat(parts))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class: String,
    pub n_test: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task: usize,
    pub classes_learned: usize,
    /// Accuracy pooled over every test sample of the seen classes.
    pub task_acc: f64,
    /// Mean of the per-class accuracies.
    pub macro_acc: f64,
    pub per_class: Vec<ClassAccuracy>,
    pub train_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub run: usize,
    pub seed: u64,
    pub class_order: Vec<String>,
    pub tasks: Vec<TaskRecord>,
    /// Mean of the task accuracies.
    pub final_avg_acc: f64,
}

/// A scenario with its data loaded, split and encoded, ready for runs.
#[derive(Debug, Clone)]
pub struct PreparedScenario {
    scenario: Scenario,
    class_names: Vec<String>,
    train: Vec<ClassSamples>,
    /// Encoded test rows per class.
    test: Vec<Array2<f64>>,
}

impl PreparedScenario {
    pub fn new(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let dataset = scenario.load_data()?;
        Self::from_dataset(scenario, &dataset)
    }

    pub fn from_dataset(scenario: &Scenario, dataset: &GestureDataset) -> Result<Self> {
        scenario.validate()?;
        let n_classes = dataset.classes().len();
        if n_classes < scenario.n_init + 1 {
            return Err(Error::Config(format!(
                "dataset has {n_classes} classes, need at least n_init + 1 = {}",
                scenario.n_init + 1
            )));
        }
        let split = match &scenario.split {
            Some(s) => s.clone(),
            None => SubjectSplit::holdout_last(dataset.subjects())?,
        };
        let parts = split_by_subject(dataset, &split)?;
        let enc = scenario.encoding;
        let train_ids = parts.train.label_ids();
        let test_ids = parts.test.label_ids();
        let mut train: Vec<ClassSamples> =
            (0..n_classes).map(|class| ClassSamples { class, features: Vec::new() }).collect();
        for (f, &c) in parts.train.frames().iter().zip(&train_ids) {
            train[c].features.push(encode(f, enc));
        }
        if let Some(empty) = train.iter().find(|cs| cs.features.is_empty()) {
            return Err(Error::Config(format!(
                "class `{}` has no training frames under this split",
                dataset.classes().names()[empty.class]
            )));
        }
        let test = (0..n_classes)
            .map(|c| {
                encode_matrix(
                    parts.test.frames().iter().zip(&test_ids).filter(|(_, &l)| l == c).map(|(f, _)| f),
                    enc,
                )
            })
            .collect();
        Ok(PreparedScenario {
            scenario: scenario.clone(),
            class_names: dataset.classes().names().to_vec(),
            train,
            test,
        })
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn train(&self) -> &[ClassSamples] {
        &self.train
    }

    /// One run. Depends only on the scenario and `run`.
    pub fn run(&self, run: usize) -> Result<RunResult> {
        let sc = &self.scenario;
        let seed = sc.seed.wrapping_add(run as u64);
        let mut order: Vec<usize> = (0..self.class_names.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

        let mut learner = Learner::new(sc.learner_config(seed))?;
        let mut tasks = Vec::new();
        let mut chunks = vec![&order[..sc.n_init]];
        chunks.extend(order[sc.n_init..].chunks(sc.classes_per_task));
        for (t, chunk) in chunks.into_iter().enumerate() {
            let data: Vec<ClassSamples> = chunk.iter().map(|&c| self.train[c].clone()).collect();
            let start = Instant::now();
            if t == 0 {
                learner.learn_initial(&data)?;
            } else {
                learner.learn_increment(&data)?;
            }
            let train_seconds = start.elapsed().as_secs_f64();
            let mut record = self.evaluate(&learner)?;
            record.task = t;
            record.train_seconds = train_seconds;
            tasks.push(record);
        }
        let final_avg_acc = tasks.iter().map(|t| t.task_acc).sum::<f64>() / tasks.len() as f64;
        Ok(RunResult {
            run,
            seed,
            class_order: order.iter().map(|&c| self.class_names[c].clone()).collect(),
            tasks,
            final_avg_acc,
        })
    }

    fn evaluate(&self, learner: &Learner) -> Result<TaskRecord> {
        let mut correct_total = 0usize;
        let mut n_total = 0usize;
        let mut per_class = Vec::new();
        for &c in learner.seen() {
            let x = &self.test[c];
            if x.nrows() == 0 {
                log::warn!("class `{}` has no test samples; left out of the per-class table", self.class_names[c]);
                continue;
            }
            let correct = learner.classify_batch(x.view())?.iter().filter(|p| p.class == c).count();
            correct_total += correct;
            n_total += x.nrows();
            per_class.push(ClassAccuracy {
                class: self.class_names[c].clone(),
                n_test: x.nrows(),
                accuracy: correct as f64 / x.nrows() as f64,
            });
        }
        let task_acc = if n_total == 0 { 0.0 } else { correct_total as f64 / n_total as f64 };
        let macro_acc = if per_class.is_empty() {
            0.0
        } else {
            per_class.iter().map(|p| p.accuracy).sum::<f64>() / per_class.len() as f64
        };
        Ok(TaskRecord {
            task: 0,
            classes_learned: learner.seen().len(),
            task_acc,
            macro_acc,
            per_class,
            train_seconds: 0.0,
        })
    }

    /// All runs of the scenario, on up to `threads` workers (`None` or 1
    /// means sequential). Results come back sorted by run index.
    pub fn run_all(&self, threads: Option<usize>) -> Result<Vec<RunResult>> {
        let runs = 0..self.scenario.runs;
        match threads {
            Some(n) if n > 1 => {
                let pool = rayon::ThreadPoolBuilder::new()
                    .num_threads(n)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
                pool.install(|| runs.into_par_iter().map(|r| self.run(r)).collect())
            }
            _ => runs.map(|r| self.run(r)).collect(),
        }
    }
}

/// Loads the scenario's data and performs run `run`.
pub fn run_scenario(scenario: &Scenario, run: usize) -> Result<RunResult> {
    PreparedScenario::new(scenario)?.run(run)
}
