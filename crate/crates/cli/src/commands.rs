use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sgmoe_core::analysis;
use sgmoe_core::depth::{self, io as depth_io, PipelineConfig, PipelineMode};
use sgmoe_core::moe::MoeLayer;
use sgmoe_core::policy::{ActorKind, ActorSpec, DensePreset, PolicyNetwork, MOE_REFERENCE_PARAMS};
use sgmoe_core::train::{train_lite, EpochRecord, RegressionTask, TrainConfig};
use sgmoe_core::{Error as CoreError, Rng};

use crate::bench::{self, BenchConfig, BenchReport};
use crate::config::Config;
use crate::weights;

#[derive(Debug, Parser)]
#[command(name = "sgmoe", version, about = "Sparse mixture-of-experts locomotion policy tools")]
pub struct Cli {
    /// Seed for every random draw of the command.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// key = value configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Time batched forward passes of several actor networks.
    Bench(BenchArgs),
    /// Run the depth degradation pipeline on a PGM or PFM image.
    Depth(DepthArgs),
    /// Train a single MoE layer on a synthetic regression task.
    TrainLite(TrainLiteArgs),
    /// Gate trace and sensitivity report for an MoE weight file.
    Analyze(AnalyzeArgs),
    /// Parameter counts of the actor presets.
    Params(ParamsArgs),
    /// Write randomly initialized weights for a named actor.
    Init(InitArgs),
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// presets, moe-default or all.
    #[arg(long, default_value = "presets")]
    pub suite: String,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub passes: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// CSV report path.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Train,
    Deploy,
}

#[derive(Debug, Args)]
pub struct DepthArgs {
    /// Input depth image (PGM or PFM).
    pub input: PathBuf,
    /// Output PFM path.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Option<ModeArg>,
    /// Directory for one PFM per pipeline stage.
    #[arg(long)]
    pub dump_stages: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainLiteArgs {
    /// CSV output path; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub w_importance: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Instead of one run, compare w_importance against 0 over this many
    /// seeds and report the final CV of each run.
    #[arg(long)]
    pub compare_seeds: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Observation sequence: binary container or trajectory text with `obs:` lines.
    #[arg(long)]
    pub sequence: PathBuf,
    /// Output directory for trace.csv, sensitivity.csv and utilization.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InitArgs {
    /// dense-small, dense-medium, dense-large, dense-xl, moe or moe-matched-xl.
    #[arg(long)]
    pub net: String,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = Config::load_opt(cli.config.as_deref())?;
    match cli.command {
        Command::Bench(a) => cmd_bench(&a, &cfg, cli.seed),
        Command::Depth(a) => cmd_depth(&a, &cfg, cli.seed),
        Command::TrainLite(a) => cmd_train_lite(&a, &cfg, cli.seed),
        Command::Analyze(a) => cmd_analyze(&a),
        Command::Params(a) => cmd_params(&a),
        Command::Init(a) => cmd_init(&a, cli.seed),
    }
}

/// Exit status for a failed command: 3 bad input, 4 divergence, 5 resources,
/// 1 anything else. Usage errors exit with 2 from the argument parser.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return match e {
                CoreError::Diverged { .. } => 4,
                CoreError::Io(_) => 1,
                _ => 3,
            };
        }
        if cause.downcast_ref::<weights::WeightError>().is_some() {
            return 3;
        }
        if let Some(e) = cause.downcast_ref::<bench::BenchError>() {
            return match e {
                bench::BenchError::OutOfMemory { .. } => 5,
                _ => 3,
            };
        }
    }
    1
}

fn write_out(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

pub fn named_spec(name: &str) -> Result<ActorSpec> {
    if let Some(p) = DensePreset::parse(name) {
        return Ok(p.spec());
    }
    match name {
        "moe" | "moe-top4-16" => Ok(ActorSpec::moe_default()),
        "moe-matched-xl" => Ok(ActorSpec::moe_param_matched(
            DensePreset::ExtraLarge.spec().param_report().total_params,
        )),
        _ => bail!("unknown network {name:?}"),
    }
}

fn cmd_bench(a: &BenchArgs, cfg: &Config, seed: u64) -> Result<()> {
    cfg.allow_only(&["batch", "passes", "warmup", "suite"])?;
    let defaults = BenchConfig::default();
    let bc = BenchConfig {
        batch: a.batch.map_or_else(|| cfg.get_or("batch", defaults.batch), Ok)?,
        passes: a.passes.map_or_else(|| cfg.get_or("passes", defaults.passes), Ok)?,
        warmup: a.warmup.map_or_else(|| cfg.get_or("warmup", defaults.warmup), Ok)?,
        seed,
    };
    if bc.batch != defaults.batch {
        eprintln!("note: batch {} instead of the reference {}", bc.batch, defaults.batch);
    }
    let suite_name = cfg.get_str("suite").unwrap_or(&a.suite);
    let specs = bench::suite(suite_name).with_context(|| format!("unknown suite {suite_name:?}"))?;
    let reports = bench::run_suite(&specs, &bc, |r| {
        eprintln!("{:<24} mean {:.6} s over {} passes", r.name, r.mean, r.passes);
    })?;
    print!("{}", bench::format_table(&reports));
    for line in comparisons(&reports) {
        println!("{line}");
    }
    if let Some(out) = &a.out {
        fs::write(out, bench::reports_csv(&reports)).with_context(|| format!("writing {}", out.display()))?;
    }
    Ok(())
}

/// Each MoE actor against the dense actor closest to its total count.
pub fn comparisons(reports: &[BenchReport]) -> Vec<String> {
    let moe: Vec<&BenchReport> = reports.iter().filter(|r| r.active_params < r.total_params).collect();
    let dense: Vec<&BenchReport> = reports.iter().filter(|r| r.active_params == r.total_params).collect();
    moe.iter()
        .filter_map(|m| {
            let d = dense.iter().min_by_key(|d| d.total_params.abs_diff(m.total_params))?;
            Some(format!(
                "{} ({} params) is {:.1}% slower than {} ({} total, {} active)",
                d.name,
                d.total_params,
                bench::gap_percent(d, m),
                m.name,
                m.total_params,
                m.active_params
            ))
        })
        .collect()
}

pub fn pipeline_config(cfg: &Config, mode: Option<ModeArg>) -> Result<PipelineConfig> {
    cfg.allow_only(&[
        "mode",
        "clip_min",
        "clip_max",
        "contour_threshold",
        "contour_artifact",
        "depth_artifact",
        "depth_artifact_size_mean",
        "depth_artifact_size_sigma",
        "blur_sigma_low",
        "blur_sigma_high",
        "blur_sigma",
        "crop_left",
        "crop_right",
        "crop_bottom",
        "crop_top",
        "target_width",
        "target_height",
        "input_width",
        "input_height",
    ])?;
    let mut p = PipelineConfig::default();
    let mode = match (mode, cfg.get_str("mode")) {
        (Some(m), _) => m,
        (None, Some("train")) | (None, None) => ModeArg::Train,
        (None, Some("deploy")) => ModeArg::Deploy,
        (None, Some(other)) => bail!("config key mode: expected train or deploy, found {other:?}"),
    };
    p.mode = match mode {
        ModeArg::Train => PipelineMode::Train,
        ModeArg::Deploy => PipelineMode::Deploy,
    };
    p.clip_min = cfg.get_or("clip_min", p.clip_min)?;
    p.clip_max = cfg.get_or("clip_max", p.clip_max)?;
    p.contour_grad_threshold = cfg.get_or("contour_threshold", p.contour_grad_threshold)?;
    p.contour_drop_prob = cfg.get_or("contour_artifact", p.contour_drop_prob)?;
    p.artifact_prob = cfg.get_or("depth_artifact", p.artifact_prob)?;
    p.artifact_size.0 = cfg.get_or("depth_artifact_size_mean", p.artifact_size.0)?;
    p.artifact_size.1 = cfg.get_or("depth_artifact_size_sigma", p.artifact_size.1)?;
    p.blur_sigma_range.0 = cfg.get_or("blur_sigma_low", p.blur_sigma_range.0)?;
    p.blur_sigma_range.1 = cfg.get_or("blur_sigma_high", p.blur_sigma_range.1)?;
    p.blur_sigma = cfg.get("blur_sigma")?;
    p.crop.left = cfg.get_or("crop_left", p.crop.left)?;
    p.crop.right = cfg.get_or("crop_right", p.crop.right)?;
    p.crop.bottom = cfg.get_or("crop_bottom", p.crop.bottom)?;
    p.crop.top = cfg.get_or("crop_top", p.crop.top)?;
    p.target_width = cfg.get_or("target_width", p.target_width)?;
    p.target_height = cfg.get_or("target_height", p.target_height)?;
    p.input_width = cfg.get_or("input_width", p.input_width)?;
    p.input_height = cfg.get_or("input_height", p.input_height)?;
    p.validate()?;
    Ok(p)
}

fn cmd_depth(a: &DepthArgs, cfg: &Config, seed: u64) -> Result<()> {
    let pc = pipeline_config(cfg, a.mode)?;
    let img = depth_io::load(&a.input).with_context(|| format!("reading {}", a.input.display()))?;
    let stages = depth::run_pipeline_stages(&img, &pc, &mut Rng::new(seed))?;
    if let Some(dir) = &a.dump_stages {
        fs::create_dir_all(dir)?;
        for (i, s) in stages.iter().enumerate() {
            depth_io::save_pfm(s, dir.join(format!("{i}_{}.pfm", s.stage().name())))?;
        }
    }
    let out = stages.last().expect("pipeline output");
    depth_io::save_pfm(out, &a.out).with_context(|| format!("writing {}", a.out.display()))?;
    eprintln!("wrote {}x{} image to {}", out.width(), out.height(), a.out.display());
    Ok(())
}

/// Problem size and optimizer settings for `train-lite`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainLiteSetup {
    pub samples: usize,
    pub features: usize,
    pub out_dim: usize,
    pub experts: usize,
    pub top_k: usize,
    pub train: TrainConfig,
}

impl Default for TrainLiteSetup {
    fn default() -> Self {
        Self {
            samples: 512,
            features: 4,
            out_dim: 3,
            experts: 4,
            top_k: 2,
            train: TrainConfig::default(),
        }
    }
}

impl TrainLiteSetup {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        cfg.allow_only(&[
            "samples",
            "features",
            "out_dim",
            "experts",
            "top_k",
            "epochs",
            "lr",
            "w_importance",
            "batch_size",
        ])?;
        let d = Self::default();
        Ok(Self {
            samples: cfg.get_or("samples", d.samples)?,
            features: cfg.get_or("features", d.features)?,
            out_dim: cfg.get_or("out_dim", d.out_dim)?,
            experts: cfg.get_or("experts", d.experts)?,
            top_k: cfg.get_or("top_k", d.top_k)?,
            train: TrainConfig {
                epochs: cfg.get_or("epochs", d.train.epochs)?,
                lr: cfg.get_or("lr", d.train.lr)?,
                w_importance: cfg.get_or("w_importance", d.train.w_importance)?,
                batch_size: cfg.get("batch_size")?,
            },
        })
    }

    /// One seeded run. Task, initial layer and gate noise come from splits of
    /// `seed`, so runs that differ only in `w_importance` are paired.
    pub fn run(&self, seed: u64, w_importance: f64) -> sgmoe_core::Result<Vec<EpochRecord>> {
        let mut rng = Rng::new(seed);
        let task = RegressionTask::piecewise_linear(self.samples, self.features, self.out_dim, &mut rng.split())?;
        let mut layer = MoeLayer::new(self.features + 1, self.out_dim, self.experts, self.top_k, &mut rng.split())?;
        let cfg = TrainConfig {
            w_importance,
            ..self.train
        };
        train_lite(&mut layer, &task, &cfg, &mut rng.split())
    }

    /// Final CV of each seed `0..seeds` with and without the load-balancing term.
    pub fn paired_final_cv(&self, seeds: u64) -> sgmoe_core::Result<(Vec<f64>, Vec<f64>)> {
        let mut with = Vec::new();
        let mut without = Vec::new();
        for s in 0..seeds {
            let last = |t: Vec<EpochRecord>| t.last().map_or(f64::NAN, |r| r.cv);
            with.push(last(self.run(s, self.train.w_importance)?));
            without.push(last(self.run(s, 0.0)?));
        }
        Ok((with, without))
    }
}

pub fn epochs_csv(records: &[EpochRecord], diverged: Option<&CoreError>) -> String {
    let mut out = String::from("epoch,task_loss,importance_loss,cv,diverged\n");
    for r in records {
        let _ = writeln!(out, "{},{},{},{},0", r.epoch, r.task_loss, r.importance_loss, r.cv);
    }
    if let Some(CoreError::Diverged {
        epoch,
        task_loss,
        importance_loss,
    }) = diverged
    {
        let _ = writeln!(out, "{epoch},{task_loss},{importance_loss},NaN,1");
    }
    out
}

fn cmd_train_lite(a: &TrainLiteArgs, cfg: &Config, seed: u64) -> Result<()> {
    let mut setup = TrainLiteSetup::from_config(cfg)?;
    if let Some(w) = a.w_importance {
        setup.train.w_importance = w;
    }
    if let Some(e) = a.epochs {
        setup.train.epochs = e;
    }
    if let Some(n) = a.compare_seeds {
        let (with, without) = setup.paired_final_cv(n)?;
        let mut csv = String::from("seed,w_importance,final_cv\n");
        for (s, (a, b)) in with.iter().zip(&without).enumerate() {
            let _ = writeln!(csv, "{s},{},{a}", setup.train.w_importance);
            let _ = writeln!(csv, "{s},0,{b}");
        }
        write_out(a.out.as_deref(), &csv)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        eprintln!(
            "mean final CV: {:.4} with w_importance = {}, {:.4} without",
            mean(&with),
            setup.train.w_importance,
            mean(&without)
        );
        return Ok(());
    }
    match setup.run(seed, setup.train.w_importance) {
        Ok(records) => write_out(a.out.as_deref(), &epochs_csv(&records, None)),
        Err(e @ CoreError::Diverged { .. }) => {
            write_out(a.out.as_deref(), &epochs_csv(&[], Some(&e)))?;
            Err(e.into())
        }
        Err(e) => Err(e.into()),
    }
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<()> {
    let bytes = fs::read(&a.weights).with_context(|| format!("reading {}", a.weights.display()))?;
    let net = weights::decode_kind(&bytes, ActorKind::Moe)?;
    let obs = analysis::load_observations(&a.sequence)
        .with_context(|| format!("reading {}", a.sequence.display()))?
        .cast::<f32>();
    let trace = analysis::record_trace(&net, &obs)?;
    let report = analysis::sensitivity(&net, &obs)?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("trace.csv"), analysis::trace_csv(&trace))?;
    fs::write(a.out.join("sensitivity.csv"), analysis::report_csv(&report))?;
    let mut util = String::from("expert,utilization\n");
    if !trace.is_empty() {
        for (i, u) in analysis::utilization(&trace)?.iter().enumerate() {
            let _ = writeln!(util, "{i},{u}");
            println!("expert {i:>2}: {:5.1}% of steps", u * 100.0);
        }
    }
    fs::write(a.out.join("utilization.csv"), util)?;
    Ok(())
}

/// Parameter table: every preset with its reference count, plus the default
/// and the XL-matched MoE actors.
pub fn params_table() -> String {
    let mut out = format!(
        "{:<24} {:>10} {:>10} {:>12} {:>10} {:>9}\n",
        "network", "total", "active", "weight-only", "reference", "deviation"
    );
    let mut row = |name: &str, spec: &ActorSpec, reference: f64| {
        let r = spec.param_report();
        let dev = (r.weight_only_total as f64 - reference) / reference * 100.0;
        let _ = writeln!(
            out,
            "{name:<24} {:>10} {:>10} {:>12} {:>10.0} {:>8.1}%",
            r.total_params, r.active_params, r.weight_only_total, reference, dev
        );
    };
    for p in DensePreset::ALL {
        row(p.name(), &p.spec(), p.reference_params());
    }
    let moe = ActorSpec::moe_default();
    row(&moe.name, &moe, MOE_REFERENCE_PARAMS.0);
    let matched = ActorSpec::moe_param_matched(DensePreset::ExtraLarge.spec().param_report().total_params);
    row(&matched.name, &matched, MOE_REFERENCE_PARAMS.0);
    out
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    write_out(a.out.as_deref(), &params_table())
}

fn cmd_init(a: &InitArgs, seed: u64) -> Result<()> {
    let spec = named_spec(&a.net)?;
    let net = PolicyNetwork::<f32>::build(&spec, &mut Rng::new(seed))?;
    weights::save(&net, &a.out)?;
    eprintln!("wrote {} to {}", weights::describe(&spec), a.out.display());
    Ok(())
}
