use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::data::{synth_gestures, HandFrame, SynthConfig};
use crate::error::{Error, Result};
use crate::features::{encode, Encoding};
use crate::net::{TrainConfig, DEFAULT_HIDDEN};
use crate::strategies::{ClassSamples, Learner, LearnerConfig, StrategyKind};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub samples: usize,
    pub median_s: f64,
    pub p95_s: f64,
}

impl StageTiming {
    fn from_samples(mut secs: Vec<f64>) -> Self {
        secs.sort_by(f64::total_cmp);
        let n = secs.len();
        let median_s = if n % 2 == 1 { secs[n / 2] } else { 0.5 * (secs[n / 2 - 1] + secs[n / 2]) };
        // Nearest-rank percentile.
        let p95_s = secs[((0.95 * n as f64).ceil() as usize).clamp(1, n) - 1];
        StageTiming { samples: n, median_s, p95_s }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageLatencies {
    pub encode: StageTiming,
    /// Forward pass plus the strategy's decision rule.
    pub inference: StageTiming,
    pub total: StageTiming,
}

/// Per-sample latency of encoding and classifying each frame. The first
/// frame is processed once beforehand as a warm-up and not counted.
pub fn stage_latencies(learner: &Learner, frames: &[HandFrame]) -> Result<StageLatencies> {
    let first = frames.first().ok_or_else(|| Error::Config("no frames to time".into()))?;
    let enc = learner.config().encoding;
    learner.classify(&encode(first, enc))?;
    let mut e = Vec::with_capacity(frames.len());
    let mut i = Vec::with_capacity(frames.len());
    let mut t = Vec::with_capacity(frames.len());
    for f in frames {
        let t0 = Instant::now();
        let fv = encode(f, enc);
        let t1 = Instant::now();
        std::hint::black_box(learner.classify(&fv)?);
        let t2 = Instant::now();
        e.push((t1 - t0).as_secs_f64());
        i.push((t2 - t1).as_secs_f64());
        t.push((t2 - t0).as_secs_f64());
    }
    Ok(StageLatencies {
        encode: StageTiming::from_samples(e),
        inference: StageTiming::from_samples(i),
        total: StageTiming::from_samples(t),
    })
}

/// Trains `config.strategy` on every class but the last, then returns the
/// wall-clock seconds of one increment with the last class, together with
/// the learner.
pub fn time_increment(config: &LearnerConfig, data: &[ClassSamples]) -> Result<(f64, Learner)> {
    if data.len() < 3 {
        return Err(Error::Config("a timed increment needs at least 3 classes".into()));
    }
    let mut learner = Learner::new(config.clone())?;
    let (pre, last) = data.split_at(data.len() - 1);
    learner.learn_initial(pre)?;
    let start = Instant::now();
    learner.learn_increment(last)?;
    Ok((start.elapsed().as_secs_f64(), learner))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProfileConfig {
    pub synth: SynthConfig,
    pub encoding: Encoding,
    pub hidden: Vec<usize>,
    /// Epochs for the untimed pre-training on all but one class.
    pub epochs_pretrain: usize,
    pub epochs_inc: usize,
    pub m: usize,
    pub strategies: Vec<StrategyKind>,
    /// Frames used for the per-stage latencies.
    pub latency_samples: usize,
    pub seed: u64,
}

impl Default for ProfileConfig {
    fn default() -> Self {
        ProfileConfig {
            synth: SynthConfig { n_classes: 28, samples_per_class: 200, ..SynthConfig::default() },
            encoding: Encoding::Combined,
            hidden: DEFAULT_HIDDEN.to_vec(),
            epochs_pretrain: 10,
            epochs_inc: 15,
            m: 5,
            strategies: vec![StrategyKind::ICaRL, StrategyKind::Joint],
            latency_samples: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeTiming {
    pub strategy: StrategyKind,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeProfile {
    pub stages: StageLatencies,
    pub training: Vec<EpisodeTiming>,
}

/// Times one "learn one more class" episode per strategy on synthetic data,
/// then the per-sample stages on the first strategy's learner.
pub fn time_profile(config: &ProfileConfig) -> Result<TimeProfile> {
    if config.strategies.is_empty() {
        return Err(Error::Config("no strategies to time".into()));
    }
    if config.latency_samples == 0 {
        return Err(Error::Config("latency_samples must be positive".into()));
    }
    let ds = synth_gestures(&SynthConfig { seed: config.seed, ..config.synth.clone() })?;
    let labels = ds.label_ids();
    let mut data: Vec<ClassSamples> =
        (0..ds.classes().len()).map(|class| ClassSamples { class, features: Vec::new() }).collect();
    for (f, &c) in ds.frames().iter().zip(&labels) {
        data[c].features.push(encode(f, config.encoding));
    }
    let mut training = Vec::new();
    let mut first_learner = None;
    for &strategy in &config.strategies {
        let lc = LearnerConfig {
            strategy,
            encoding: config.encoding,
            hidden: config.hidden.clone(),
            m: config.m,
            initial: TrainConfig { epochs: config.epochs_pretrain, ..TrainConfig::default() },
            incremental: TrainConfig { epochs: config.epochs_inc, ..TrainConfig::default() },
            seed: config.seed,
            ..LearnerConfig::default()
        };
        let (seconds, learner) = time_increment(&lc, &data)?;
        training.push(EpisodeTiming { strategy, seconds });
        first_learner.get_or_insert(learner);
    }
    let frames: Vec<HandFrame> = ds.frames().iter().cycle().take(config.latency_samples).cloned().collect();
    let stages = stage_latencies(first_learner.as_ref().expect("at least one strategy"), &frames)?;
    Ok(TimeProfile { stages, training })
}
