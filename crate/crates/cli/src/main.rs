//! `hagil`: synthesize landmark data, encode it, and run incremental-learning
//! scenarios and timing profiles.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use hagil_core::data::{load_dataset_with, save_dataset, synth_gestures, LoadOptions, SynthConfig};
use hagil_core::features::{encode, Encoding};
use hagil_core::harness::{
    aggregate, emit_metrics, time_profile, write_atomic, Formats, PreparedScenario, ProfileConfig, Scenario,
};
use hagil_core::rehearsal::Selection;
use hagil_core::strategies::{Ablation, StrategyKind};

const SEED_ENV: &str = "HAGIL_SEED";

#[derive(Debug, Parser)]
#[command(name = "hagil", version, about = "Class-incremental hand gesture recognition from hand landmarks")]
struct Cli {
    /// Log progress (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic landmark file (`<out>/synth.jsonl`).
    Synth(SynthArgs),
    /// Convert landmark files to a feature CSV (`<out>/features.csv`).
    Encode(EncodeArgs),
    /// Run a scenario and write runs.csv, summary.csv, per_class.csv and summary.json.
    Run(RunArgs),
    /// Run a strategy x exemplars x epochs grid, one result directory per cell.
    Bench(BenchArgs),
    /// Time the per-sample stages and one "learn one more class" episode.
    Times(TimesArgs),
}

#[derive(Debug, Args)]
struct OutArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    /// Overwrite files in a non-empty output directory.
    #[arg(long)]
    force: bool,
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long, default_value_t = 10)]
    classes: usize,
    #[arg(long, default_value_t = 30)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 0.02)]
    jitter: f64,
    #[arg(long, default_value_t = 3)]
    subjects: usize,
    /// Random seed (falls back to $HAGIL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct EncodeArgs {
    /// Landmark JSON Lines files.
    #[arg(long, required = true, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long, default_value = "combined", value_parser = parse_encoding)]
    encoding: Encoding,
    /// Mirror left hands so every frame looks like a right hand.
    #[arg(long)]
    mirror_left: bool,
    #[command(flatten)]
    out: OutArgs,
}

/// Scenario overrides shared by `run` and `bench`. Unset flags keep the
/// scenario file's value, or the default.
#[derive(Debug, Args)]
struct ScenarioArgs {
    /// Scenario JSON file.
    #[arg(long)]
    scenario: Option<PathBuf>,
    /// Landmark files; synthetic data is generated when none are given.
    #[arg(long, num_args = 1..)]
    data: Vec<PathBuf>,
    #[arg(long)]
    mirror_left: bool,
    #[arg(long, value_parser = parse_encoding)]
    encoding: Option<Encoding>,
    #[arg(long)]
    n_init: Option<usize>,
    #[arg(long)]
    classes_per_task: Option<usize>,
    #[arg(long)]
    epochs_init: Option<usize>,
    #[arg(long)]
    runs: Option<usize>,
    #[arg(long, value_parser = parse_selection)]
    selection: Option<Selection>,
    /// Hidden layer widths, comma separated.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    /// Joint: retrain a fresh model at every task.
    #[arg(long)]
    joint_from_scratch: bool,
    /// Write training seconds into runs.csv (makes the file run-dependent).
    #[arg(long)]
    record_timings: bool,
    /// Classes of the synthetic dataset.
    #[arg(long)]
    synth_classes: Option<usize>,
    #[arg(long)]
    synth_samples: Option<usize>,
    /// Base seed (falls back to the scenario file, then $HAGIL_SEED, then 0).
    #[arg(long)]
    seed: Option<u64>,
    /// Run up to N runs concurrently.
    #[arg(long, value_name = "N")]
    parallel: Option<usize>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long, value_parser = parse_strategy)]
    strategy: Option<StrategyKind>,
    /// Exemplars per class.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    epochs_inc: Option<usize>,
    /// iCaRL: train without the distillation term.
    #[arg(long)]
    no_distill: bool,
    /// iCaRL: classify with the softmax head instead of nearest mean.
    #[arg(long)]
    no_nem: bool,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Strategies; `icarl-kdl` and `icarl-kdl-nem` select the ablations.
    #[arg(long, value_delimiter = ',', default_value = "joint,icarl,icarl-kdl,icarl-kdl-nem,il2m,lwf,finetune")]
    strategies: Vec<String>,
    /// Exemplars per class (rehearsal strategies only).
    #[arg(long, value_delimiter = ',', default_value = "5")]
    m: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "15")]
    epochs_inc: Vec<usize>,
    #[command(flatten)]
    out: OutArgs,
}

#[derive(Debug, Args)]
struct TimesArgs {
    #[arg(long, default_value_t = 28)]
    classes: usize,
    #[arg(long, default_value_t = 200)]
    samples_per_class: usize,
    #[arg(long, default_value_t = 10)]
    epochs_pretrain: usize,
    #[arg(long, default_value_t = 15)]
    epochs_inc: usize,
    #[arg(long, default_value_t = 5)]
    m: usize,
    #[arg(long, default_value_t = 1000)]
    latency_samples: usize,
    #[arg(long, value_delimiter = ',', default_value = "icarl,joint", value_parser = parse_strategy)]
    strategies: Vec<StrategyKind>,
    #[arg(long)]
    seed: Option<u64>,
    /// Also write `<out>/times.json`.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    force: bool,
}

fn parse_encoding(s: &str) -> Result<Encoding, String> {
    s.parse().map_err(|e: hagil_core::Error| e.to_string())
}

fn parse_strategy(s: &str) -> Result<StrategyKind, String> {
    s.parse().map_err(|e: hagil_core::Error| e.to_string())
}

fn parse_selection(s: &str) -> Result<Selection, String> {
    match s.to_ascii_lowercase().as_str() {
        "herding" => Ok(Selection::Herding),
        "random" => Ok(Selection::Random),
        _ => Err(format!("unknown selection `{s}` (herding, random)")),
    }
}

/// A mistake in how the program was invoked rather than a failure while
/// running; exits with status 2.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| usage(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        Err(_) => Ok(None),
    }
}

/// Fails if `dir` holds files and `force` is off.
fn check_out_dir(dir: &Path, force: bool) -> Result<()> {
    if dir.exists() && !dir.is_dir() {
        return Err(usage(format!("--out {} exists and is not a directory", dir.display())));
    }
    let occupied = dir.is_dir()
        && fs::read_dir(dir)
            .with_context(|| format!("reading {}", dir.display()))?
            .next()
            .is_some();
    if occupied && !force {
        return Err(usage(format!("--out {} is not empty; pass --force to overwrite", dir.display())));
    }
    Ok(())
}

fn write_out(dir: &Path, name: &str, bytes: &[u8]) -> Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    write_atomic(&path, bytes)?;
    Ok(path)
}

fn json_bytes(value: &impl Serialize) -> Result<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn synth(args: SynthArgs) -> Result<()> {
    check_out_dir(&args.out.out, args.out.force)?;
    let config = SynthConfig {
        n_classes: args.classes,
        samples_per_class: args.samples_per_class,
        jitter_std: args.jitter,
        n_subjects: args.subjects,
        seed: args.seed.or(env_seed()?).unwrap_or(0),
    };
    config.validate().map_err(|e| usage(e.to_string()))?;
    let ds = synth_gestures(&config)?;
    fs::create_dir_all(&args.out.out).with_context(|| format!("creating {}", args.out.out.display()))?;
    let path = args.out.out.join("synth.jsonl");
    save_dataset(&ds, &path)?;
    println!("wrote {} frames of {} classes to {}", ds.len(), ds.classes().len(), path.display());
    Ok(())
}

fn encode_cmd(args: EncodeArgs) -> Result<()> {
    check_out_dir(&args.out.out, args.out.force)?;
    let opts = LoadOptions { mirror_left: args.mirror_left };
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["label".to_string(), "subject".to_string()];
    header.extend((0..args.encoding.dim()).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    let mut rows = 0usize;
    for path in &args.data {
        let ds = load_dataset_with(path, opts)?;
        for f in ds.frames() {
            let mut rec = vec![f.label.clone(), f.subject.clone()];
            rec.extend(encode(f, args.encoding).values.iter().map(f64::to_string));
            w.write_record(&rec)?;
            rows += 1;
        }
    }
    let bytes = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    let path = write_out(&args.out.out, "features.csv", &bytes)?;
    println!("wrote {rows} {} rows to {}", args.encoding, path.display());
    Ok(())
}

/// Builds the scenario: flags override the file, which overrides defaults.
fn resolve_scenario(args: &ScenarioArgs) -> Result<Scenario> {
    let (mut sc, file_has_seed) = match &args.scenario {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading --scenario {}", path.display()))?;
            let value: serde_json::Value =
                serde_json::from_str(&text).map_err(|e| usage(format!("--scenario {}: {e}", path.display())))?;
            let has_seed = value.get("seed").is_some();
            let sc: Scenario =
                serde_json::from_value(value).map_err(|e| usage(format!("--scenario {}: {e}", path.display())))?;
            (sc, has_seed)
        }
        None => (Scenario::default(), false),
    };
    if !args.data.is_empty() {
        sc.data = args.data.clone();
    }
    sc.mirror_left |= args.mirror_left;
    sc.joint_from_scratch |= args.joint_from_scratch;
    sc.record_timings |= args.record_timings;
    macro_rules! set {
        ($($field:ident <- $flag:expr),* $(,)?) => {
            $(if let Some(v) = $flag.clone() { sc.$field = v; })*
        };
    }
    set!(
        encoding <- args.encoding,
        n_init <- args.n_init,
        classes_per_task <- args.classes_per_task,
        epochs_init <- args.epochs_init,
        runs <- args.runs,
        selection <- args.selection,
        hidden <- args.hidden,
        batch_size <- args.batch_size,
        lr <- args.lr,
    );
    if let Some(n) = args.synth_classes {
        sc.synth.n_classes = n;
    }
    if let Some(n) = args.synth_samples {
        sc.synth.samples_per_class = n;
    }
    if let Some(seed) = args.seed {
        sc.seed = seed;
    } else if !file_has_seed {
        if let Some(seed) = env_seed()? {
            sc.seed = seed;
        }
    }
    Ok(sc)
}

fn validate(sc: &Scenario) -> Result<()> {
    sc.validate().map_err(|e| usage(e.to_string()))?;
    if sc.data.is_empty() {
        sc.synth.validate().map_err(|e| usage(e.to_string()))?;
    }
    Ok(())
}

fn run(args: RunArgs) -> Result<()> {
    check_out_dir(&args.out.out, args.out.force)?;
    let mut sc = resolve_scenario(&args.scenario)?;
    if let Some(s) = args.strategy {
        sc.strategy = s;
    }
    if let Some(m) = args.m {
        sc.m = m;
    }
    if let Some(e) = args.epochs_inc {
        sc.epochs_inc = e;
    }
    sc.ablation.distill &= !args.no_distill;
    sc.ablation.nem &= !args.no_nem;
    validate(&sc)?;

    let prepared = PreparedScenario::new(&sc)?;
    log::info!("{} runs of {} on {} classes", sc.runs, sc.strategy, prepared.class_names().len());
    let results = prepared.run_all(args.scenario.parallel)?;
    let summary = aggregate(&results)?;
    let scenario_json = json_bytes(&sc)?;
    emit_metrics(&results, &summary, &args.out.out, Formats::default(), sc.record_timings)?;
    write_out(&args.out.out, "scenario.json", &scenario_json)?;
    println!(
        "{}: final average accuracy {:.4} +/- {:.4} over {} runs",
        sc.strategy, summary.final_avg_mean, summary.final_avg_std, summary.runs
    );
    Ok(())
}

#[derive(Debug, Serialize)]
struct BenchRow {
    variant: String,
    m: usize,
    epochs_inc: usize,
    final_avg_mean: f64,
    final_avg_std: f64,
}

fn parse_variant(name: &str) -> Result<(StrategyKind, Ablation)> {
    let lower = name.to_ascii_lowercase();
    let ablation = match lower.as_str() {
        "icarl-kdl" => Ablation { distill: false, nem: true },
        "icarl-kdl-nem" => Ablation { distill: false, nem: false },
        _ => {
            let kind = parse_strategy(name).map_err(|e| usage(format!("--strategies: {e}")))?;
            return Ok((kind, Ablation::default()));
        }
    };
    Ok((StrategyKind::ICaRL, ablation))
}

fn bench(args: BenchArgs) -> Result<()> {
    check_out_dir(&args.out.out, args.out.force)?;
    let base = resolve_scenario(&args.scenario)?;
    let variants = args.strategies.iter().map(|s| Ok((s.clone(), parse_variant(s)?))).collect::<Result<Vec<_>>>()?;
    if args.m.is_empty() || args.epochs_inc.is_empty() {
        bail!(usage("--m and --epochs-inc need at least one value"));
    }
    let mut cells = Vec::new();
    for (name, (kind, ablation)) in &variants {
        let ms: &[usize] = if kind.uses_memory() { &args.m } else { &args.m[..1] };
        for &m in ms {
            for &epochs_inc in &args.epochs_inc {
                let sc = Scenario { strategy: *kind, ablation: *ablation, m, epochs_inc, ..base.clone() };
                validate(&sc)?;
                cells.push((name.clone(), sc));
            }
        }
    }

    // Everything is computed before the first file is written.
    let dataset = base.load_data()?;
    let mut outputs = Vec::new();
    let mut rows = Vec::new();
    for (name, sc) in cells {
        let prepared = PreparedScenario::from_dataset(&sc, &dataset)?;
        log::info!("{name} m={} epochs_inc={}", sc.m, sc.epochs_inc);
        let results = prepared.run_all(args.scenario.parallel)?;
        let summary = aggregate(&results)?;
        rows.push(BenchRow {
            variant: name.clone(),
            m: sc.m,
            epochs_inc: sc.epochs_inc,
            final_avg_mean: summary.final_avg_mean,
            final_avg_std: summary.final_avg_std,
        });
        outputs.push((format!("{name}-m{}-e{}", sc.m, sc.epochs_inc), results, summary, sc));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let table = w.into_inner().map_err(|e| anyhow::anyhow!("csv: {e}"))?;
    for (dir, results, summary, sc) in &outputs {
        let sub = args.out.out.join(dir);
        emit_metrics(results, summary, &sub, Formats::default(), sc.record_timings)?;
        write_out(&sub, "scenario.json", &json_bytes(sc)?)?;
    }
    write_out(&args.out.out, "bench.csv", &table)?;
    for row in &rows {
        println!(
            "{:<14} m={:<3} epochs_inc={:<3} {:.4} +/- {:.4}",
            row.variant, row.m, row.epochs_inc, row.final_avg_mean, row.final_avg_std
        );
    }
    Ok(())
}

fn times(args: TimesArgs) -> Result<()> {
    if let Some(out) = &args.out {
        check_out_dir(out, args.force)?;
    }
    let config = ProfileConfig {
        synth: SynthConfig { n_classes: args.classes, samples_per_class: args.samples_per_class, ..SynthConfig::default() },
        epochs_pretrain: args.epochs_pretrain,
        epochs_inc: args.epochs_inc,
        m: args.m,
        strategies: args.strategies,
        latency_samples: args.latency_samples,
        seed: args.seed.or(env_seed()?).unwrap_or(0),
        ..ProfileConfig::default()
    };
    if config.synth.n_classes < 3 {
        bail!(usage("--classes must be at least 3"));
    }
    let profile = time_profile(&config)?;
    let st = &profile.stages;
    for (name, s) in [("encode", &st.encode), ("inference", &st.inference), ("total", &st.total)] {
        println!("{name:<10} median {:>9.1} us  p95 {:>9.1} us", s.median_s * 1e6, s.p95_s * 1e6);
    }
    for e in &profile.training {
        println!("{:<10} one-class increment {:.3} s", e.strategy, e.seconds);
    }
    if let Some(out) = &args.out {
        write_out(out, "times.json", &json_bytes(&profile)?)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let outcome = match cli.command {
        Command::Synth(a) => synth(a),
        Command::Encode(a) => encode_cmd(a),
        Command::Run(a) => run(a),
        Command::Bench(a) => bench(a),
        Command::Times(a) => times(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
