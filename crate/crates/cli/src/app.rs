//! Subcommand definitions and their implementations.

use std::fs;
use std::io::Write;
use std::net::{IpAddr, SocketAddr};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rec_cbm_core::gradcheck::{self, GradCheckReport};
use rec_cbm_core::rubric::{
    equicorrelation, load_dataset_with_spec, SYNTHETIC_NOISE_SD, SYNTHETIC_RHO,
};
use rec_cbm_core::{
    assign_splits, build_trace, denoising_report, generate_synthetic, intervene_and_score,
    load_checkpoint, save_checkpoint, train_model, Dataset, InterventionKind, InterventionPolicy,
    Metrics, Model, RubricSpec, Split, TrainConfig, WrongRule,
};
use serde::Serialize;

use crate::config::{resolve, ConfigOverrides, RunConfig};
use crate::manifest::RunManifest;
use crate::service::{self, AppState};

pub const SPLIT_RATIOS: [f64; 3] = [0.7, 0.2, 0.1];
pub const CHECKPOINT_FILE: &str = "model.reccbm";
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "rec-cbm",
    version,
    about = "Rubric-aware concept bottleneck grading"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic rubric corpus with a training config.
    Synth(SynthArgs),
    /// Run both training stages for one or more seeds.
    Train(TrainArgs),
    /// Print T-Acc, T-F1, C-Acc and C-F1 of a checkpoint on a split.
    Eval(EvalArgs),
    /// Concept intervention curves (none, oracle, wrong, random).
    Intervene(InterveneArgs),
    /// Decision trace for one instance.
    Trace(TraceArgs),
    /// Empirical label correlation vs learned partial correlation.
    Report(ReportArgs),
    /// Serve traces and interventions over HTTP.
    Serve(ServeArgs),
    /// Finite-difference audit of every analytic gradient.
    Gradcheck(GradcheckArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth(_) => "synth",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Intervene(_) => "intervene",
            Command::Trace(_) => "trace",
            Command::Report(_) => "report",
            Command::Serve(_) => "serve",
            Command::Gradcheck(_) => "gradcheck",
        }
    }

    fn out_dir(&self) -> &Path {
        match self {
            Command::Synth(a) => &a.out,
            Command::Train(a) => &a.out.out,
            Command::Eval(a) => &a.out.out,
            Command::Intervene(a) => &a.out.out,
            Command::Trace(a) => &a.out.out,
            Command::Report(a) => &a.out.out,
            Command::Serve(a) => &a.out.out,
            Command::Gradcheck(a) => &a.out.out,
        }
    }
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Directory for outputs and the run manifest.
    #[arg(long, default_value = "rec-cbm-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Rubric spec JSON.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Line-delimited JSON dataset.
    #[arg(long)]
    pub data: PathBuf,
    /// Seed of the 7:2:1 train/dev/test split.
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Dev,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of rubric concepts K.
    #[arg(long, default_value_t = 4)]
    pub concepts: usize,
    /// Maximum concept level M.
    #[arg(long, default_value_t = 3)]
    pub max_level: usize,
    /// Maximum grade S.
    #[arg(long, default_value_t = 4)]
    pub max_grade: usize,
    #[arg(short, long, default_value_t = 2000)]
    pub n: usize,
    /// Equicorrelation of the latent concept abilities.
    #[arg(long, default_value_t = SYNTHETIC_RHO)]
    pub rho: f64,
    /// Overrides the correlation of concepts 0 and 1.
    #[arg(long)]
    pub pair_rho: Option<f64>,
    /// Standard deviation of the grade noise.
    #[arg(long, default_value_t = SYNTHETIC_NOISE_SD)]
    pub noise: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Config JSON with optional `train` and `embedding` sections.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: ConfigOverrides,
    /// Number of seeds, starting at the configured seed.
    #[arg(long, default_value_t = 1)]
    pub seeds: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub data: DataArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PolicyArg {
    All,
    None,
    Oracle,
    Wrong,
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WrongRuleArg {
    Farthest,
    GradeMin,
}

#[derive(Debug, Args)]
pub struct InterveneArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "all")]
    pub policy: PolicyArg,
    /// Concepts to intervene on for the headline metrics (default K).
    #[arg(long)]
    pub k: Option<usize>,
    /// Seed of the random policy.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "farthest")]
    pub wrong_rule: WrongRuleArg,
    /// Also write the curves as CSV.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct TraceArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long)]
    pub id: String,
    /// Attended tokens kept per concept.
    #[arg(long, default_value_t = service::DEFAULT_TOP_N)]
    pub top_n: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[command(flatten)]
    pub input: CheckpointArgs,
    #[arg(long, value_enum, default_value = "train")]
    pub split: SplitArg,
    /// Also write both matrices as CSV.
    #[arg(long)]
    pub csv: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset whose instances are served by id.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub split_seed: u64,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    #[arg(long, default_value = "127.0.0.1")]
    pub host: IpAddr,
    #[arg(long, default_value_t = 8080)]
    pub port: u16,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of seeded instances per loss.
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    #[command(flatten)]
    pub out: OutArgs,
}

/// Runs `cli`, writing exactly one manifest whatever the outcome.
pub fn run(cli: Cli, argv: Vec<String>) -> Result<()> {
    let out = cli.command.out_dir().to_path_buf();
    let mut manifest = RunManifest::start(cli.command.name(), argv);
    let result = dispatch(&cli.command, &mut manifest);
    manifest.finish(&result);
    manifest.write(&out)?;
    result
}

fn dispatch(command: &Command, m: &mut RunManifest) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a, m),
        Command::Train(a) => train(a, m),
        Command::Eval(a) => eval(a, m),
        Command::Intervene(a) => intervene(a, m),
        Command::Trace(a) => trace(a, m),
        Command::Report(a) => report(a, m),
        Command::Serve(a) => serve(a, m),
        Command::Gradcheck(a) => run_gradcheck(a, m),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T, m: &mut RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))?;
    m.output(path)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn load_split(data: &DataArgs, spec: RubricSpec, m: &mut RunManifest) -> Result<Dataset> {
    m.input(&data.data)?;
    let dataset = load_dataset_with_spec(&data.data, spec)?;
    Ok(assign_splits(dataset, SPLIT_RATIOS, data.split_seed)?)
}

fn select(data: &Dataset, split: SplitArg) -> Result<Dataset> {
    let subset = match split {
        SplitArg::All => data.clone(),
        SplitArg::Train => data.subset(Split::Train),
        SplitArg::Dev => data.subset(Split::Dev),
        SplitArg::Test => data.subset(Split::Test),
    };
    ensure!(!subset.is_empty(), "split {split:?} is empty");
    Ok(subset)
}

/// Loads the checkpoint and its dataset; a given `--spec` must match the
/// checkpoint's.
fn load_model_and_data(args: &CheckpointArgs, m: &mut RunManifest) -> Result<(Model, Dataset)> {
    m.input(&args.checkpoint)?;
    let model = load_checkpoint(&args.checkpoint)
        .with_context(|| format!("loading checkpoint {}", args.checkpoint.display()))?;
    if let Some(path) = &args.data.spec {
        m.input(path)?;
        let spec = RubricSpec::load(path)?;
        ensure!(
            spec == model.spec,
            "spec {} does not match the checkpoint's rubric",
            path.display()
        );
    }
    m.config = serde_json::to_value(RunConfig {
        train: model.config.clone(),
        embedding: model.embedding.clone(),
    })?;
    m.seeds = vec![model.config.seed];
    let data = load_split(&args.data, model.spec.clone(), m)?;
    Ok((model, data))
}

fn synth(a: &SynthArgs, m: &mut RunManifest) -> Result<()> {
    let spec = RubricSpec::with_default_names(a.concepts, a.max_level, a.max_grade)?;
    let mut corr = equicorrelation(a.concepts, a.rho);
    if let Some(r) = a.pair_rho {
        ensure!(a.concepts >= 2, "--pair-rho needs at least two concepts");
        corr[(0, 1)] = r;
        corr[(1, 0)] = r;
    }
    let data = generate_synthetic(&spec, a.n, &corr, a.noise, a.seed)?;
    let config = RunConfig {
        train: TrainConfig::synthetic(),
        ..RunConfig::default()
    };
    fs::create_dir_all(&a.out)?;
    let spec_path = a.out.join("spec.json");
    spec.save(&spec_path)?;
    m.output(&spec_path)?;
    let data_path = a.out.join("data.jsonl");
    data.write_jsonl(&data_path)?;
    m.output(&data_path)?;
    let config_path = a.out.join("config.json");
    config.save(&config_path)?;
    m.output(&config_path)?;
    m.config = serde_json::json!({
        "concepts": a.concepts, "max_level": a.max_level, "max_grade": a.max_grade,
        "n": a.n, "rho": a.rho, "pair_rho": a.pair_rho, "noise": a.noise,
    });
    m.seeds = vec![a.seed];
    println!("wrote {} instances to {}", data.len(), data_path.display());
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedResult {
    pub seed: u64,
    pub checkpoint: PathBuf,
    pub dev: Metrics,
    pub test: Metrics,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainSummary {
    pub runs: Vec<SeedResult>,
    pub test_mean: Metrics,
    pub test_sd: Metrics,
}

fn metric_values(m: &Metrics) -> [f64; 4] {
    [m.task_accuracy, m.task_f1, m.concept_accuracy, m.concept_f1]
}

fn metrics_from(v: [f64; 4]) -> Metrics {
    Metrics {
        task_accuracy: v[0],
        task_f1: v[1],
        concept_accuracy: v[2],
        concept_f1: v[3],
    }
}

/// Mean and sample standard deviation (0 for a single run).
pub fn aggregate(runs: &[Metrics]) -> (Metrics, Metrics) {
    let n = runs.len() as f64;
    let mut mean = [0.0; 4];
    for r in runs {
        for (acc, v) in mean.iter_mut().zip(metric_values(r)) {
            *acc += v / n;
        }
    }
    let mut sd = [0.0; 4];
    if runs.len() > 1 {
        for r in runs {
            for ((acc, v), mu) in sd.iter_mut().zip(metric_values(r)).zip(mean) {
                *acc += (v - mu).powi(2) / (n - 1.0);
            }
        }
        sd.iter_mut().for_each(|v| *v = v.sqrt());
    }
    (metrics_from(mean), metrics_from(sd))
}

fn train(a: &TrainArgs, m: &mut RunManifest) -> Result<()> {
    ensure!(a.seeds >= 1, "--seeds must be at least 1");
    let spec_path = a.data.spec.as_ref().context("train needs --spec")?;
    m.input(spec_path)?;
    if let Some(path) = &a.config {
        m.input(path)?;
    }
    let cfg = resolve(a.config.as_deref(), &a.overrides)?;
    m.config = serde_json::to_value(&cfg)?;
    let spec = RubricSpec::load(spec_path)?;
    let data = load_split(&a.data, spec, m)?;
    let (train_set, dev, test) = (
        data.subset(Split::Train),
        data.subset(Split::Dev),
        data.subset(Split::Test),
    );
    ensure!(!test.is_empty(), "test split is empty");
    fs::create_dir_all(&a.out.out)?;

    let mut runs = Vec::new();
    for i in 0..a.seeds {
        let seed = cfg.train.seed.wrapping_add(i);
        m.seeds.push(seed);
        let train_cfg = TrainConfig {
            seed,
            ..cfg.train.clone()
        };
        log::info!("seed {seed}: training on {} instances", train_set.len());
        let mut model = Model::init(data.spec.clone(), cfg.embedding.clone(), train_cfg)?;
        train_model(&mut model, &train_set, &dev)?;

        let dir = a.out.out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir)?;
        let ckpt = dir.join(CHECKPOINT_FILE);
        save_checkpoint(&model, &ckpt)?;
        m.output(&ckpt)?;
        let log_path = dir.join("train_log.jsonl");
        let mut lines = String::new();
        for entry in &model.log {
            lines.push_str(&serde_json::to_string(entry)?);
            lines.push('\n');
        }
        fs::write(&log_path, lines)?;
        m.output(&log_path)?;

        let result = SeedResult {
            seed,
            checkpoint: ckpt,
            dev: if dev.is_empty() {
                Metrics::default()
            } else {
                model.evaluate(&dev)?
            },
            test: model.evaluate(&test)?,
        };
        log::info!(
            "seed {seed}: test T-Acc {:.4} T-F1 {:.4} C-Acc {:.4} C-F1 {:.4}",
            result.test.task_accuracy,
            result.test.task_f1,
            result.test.concept_accuracy,
            result.test.concept_f1
        );
        runs.push(result);
    }
    let tests: Vec<Metrics> = runs.iter().map(|r| r.test).collect();
    let (test_mean, test_sd) = aggregate(&tests);
    let summary = TrainSummary {
        runs,
        test_mean,
        test_sd,
    };
    write_json(&a.out.out.join("metrics.json"), &summary, m)?;
    println!("metric      mean     sd");
    let names = ["T-Acc", "T-F1", "C-Acc", "C-F1"];
    for ((name, mean), sd) in names
        .iter()
        .zip(metric_values(&summary.test_mean))
        .zip(metric_values(&summary.test_sd))
    {
        println!("{name:<8} {mean:>8.4} {sd:>8.4}");
    }
    Ok(())
}

fn eval(a: &EvalArgs, m: &mut RunManifest) -> Result<()> {
    let (model, data) = load_model_and_data(&a.input, m)?;
    let metrics = model.evaluate(&select(&data, a.split)?)?;
    fs::create_dir_all(&a.out.out)?;
    write_json(&a.out.out.join("metrics.json"), &metrics, m)?;
    print_json(&metrics)
}

fn policy_kinds(p: PolicyArg) -> Vec<InterventionKind> {
    match p {
        PolicyArg::All => vec![
            InterventionKind::None,
            InterventionKind::Oracle,
            InterventionKind::Wrong,
            InterventionKind::Random,
        ],
        PolicyArg::None => vec![InterventionKind::None],
        PolicyArg::Oracle => vec![InterventionKind::Oracle],
        PolicyArg::Wrong => vec![InterventionKind::Wrong],
        PolicyArg::Random => vec![InterventionKind::Random],
    }
}

fn intervene(a: &InterveneArgs, m: &mut RunManifest) -> Result<()> {
    let (model, data) = load_model_and_data(&a.input, m)?;
    let split = select(&data, a.split)?;
    let k = a.k.unwrap_or(model.spec.num_concepts);
    let wrong_rule = match a.wrong_rule {
        WrongRuleArg::Farthest => WrongRule::Farthest,
        WrongRuleArg::GradeMin => WrongRule::GradeMinimizing,
    };
    fs::create_dir_all(&a.out.out)?;
    let mut jsonl = String::new();
    let mut csv = String::from("policy,k,task_accuracy,task_f1\n");
    for kind in policy_kinds(a.policy) {
        let policy = InterventionPolicy {
            kind,
            k,
            seed: a.seed,
            wrong_rule,
        };
        let curve = intervene_and_score(&split, &model, policy)?;
        let line = serde_json::to_string(&curve)?;
        println!("{line}");
        jsonl.push_str(&line);
        jsonl.push('\n');
        let name = serde_json::to_value(kind)?;
        for p in &curve.curve {
            csv.push_str(&format!(
                "{},{},{},{}\n",
                name.as_str().unwrap_or_default(),
                p.k,
                p.task_accuracy,
                p.task_f1
            ));
        }
    }
    let path = a.out.out.join("intervention.jsonl");
    fs::write(&path, jsonl)?;
    m.output(&path)?;
    if a.csv {
        let path = a.out.out.join("intervention.csv");
        fs::write(&path, csv)?;
        m.output(&path)?;
    }
    Ok(())
}

fn trace(a: &TraceArgs, m: &mut RunManifest) -> Result<()> {
    let (model, data) = load_model_and_data(&a.input, m)?;
    let Some(inst) = data.get(&a.id) else {
        bail!(
            "instance `{}` not found in {}",
            a.id,
            a.input.data.data.display()
        );
    };
    let trace = build_trace(inst, &model, a.top_n)?;
    fs::create_dir_all(&a.out.out)?;
    let file = format!("trace-{}.json", sanitize(&a.id));
    write_json(&a.out.out.join(file), &trace, m)?;
    print_json(&trace)
}

fn sanitize(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn matrix_csv(names: &[String], rows: &[Vec<f64>]) -> String {
    let mut out = format!(",{}\n", names.join(","));
    for (name, row) in names.iter().zip(rows) {
        let cells: Vec<String> = row.iter().map(f64::to_string).collect();
        out.push_str(&format!("{name},{}\n", cells.join(",")));
    }
    out
}

fn report(a: &ReportArgs, m: &mut RunManifest) -> Result<()> {
    let (model, data) = load_model_and_data(&a.input, m)?;
    let report = denoising_report(&model, &select(&data, a.split)?)?;
    fs::create_dir_all(&a.out.out)?;
    write_json(&a.out.out.join("report.json"), &report, m)?;
    if a.csv {
        for (file, rows) in [
            ("empirical.csv", &report.empirical),
            ("partial.csv", &report.partial),
        ] {
            let path = a.out.out.join(file);
            fs::write(&path, matrix_csv(&report.concept_names, rows))?;
            m.output(&path)?;
        }
    }
    print_json(&report)
}

fn serve(a: &ServeArgs, m: &mut RunManifest) -> Result<()> {
    m.input(&a.checkpoint)?;
    let model = load_checkpoint(&a.checkpoint)
        .with_context(|| format!("loading checkpoint {}", a.checkpoint.display()))?;
    model.latent()?;
    m.config = serde_json::to_value(RunConfig {
        train: model.config.clone(),
        embedding: model.embedding.clone(),
    })?;
    m.seeds = vec![model.config.seed];
    let (instances, split) = match &a.data {
        Some(path) => {
            m.input(path)?;
            let data = load_dataset_with_spec(path, model.spec.clone())?;
            let data = assign_splits(data, SPLIT_RATIOS, a.split_seed)?;
            let name = format!("{:?}", a.split).to_lowercase();
            (Some(select(&data, a.split)?), Some(name))
        }
        None => (None, None),
    };
    let state = Arc::new(AppState {
        model,
        instances,
        split,
    });
    m.write(&a.out.out)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(service::serve(state, SocketAddr::new(a.host, a.port)))
}

fn run_gradcheck(a: &GradcheckArgs, m: &mut RunManifest) -> Result<()> {
    m.seeds = (0..a.seeds).collect();
    let mut reports: Vec<GradCheckReport> = Vec::new();
    for seed in 0..a.seeds {
        reports.extend(gradcheck::run_all(seed)?);
    }
    let mut worst: Vec<(String, String, f64)> = Vec::new();
    for r in &reports {
        for g in &r.groups {
            match worst
                .iter_mut()
                .find(|(l, n, _)| *l == r.loss && *n == g.group)
            {
                Some(entry) => entry.2 = entry.2.max(g.max_rel_error),
                None => worst.push((r.loss.clone(), g.group.clone(), g.max_rel_error)),
            }
        }
    }
    println!("{:<18} {:<22} {:>12}", "loss", "parameters", "max rel err");
    for (loss, group, err) in &worst {
        println!("{loss:<18} {group:<22} {err:>12.3e}");
    }
    fs::create_dir_all(&a.out.out)?;
    write_json(&a.out.out.join("gradcheck.json"), &reports, m)?;
    let max = worst.iter().map(|w| w.2).fold(0.0, f64::max);
    ensure!(
        max < GRADCHECK_TOLERANCE,
        "gradient check failed: max relative error {max:.3e} >= {GRADCHECK_TOLERANCE:.0e}"
    );
    println!(
        "all {} checks below {GRADCHECK_TOLERANCE:.0e}",
        reports.len()
    );
    Ok(())
}
