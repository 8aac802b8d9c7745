//! Batched inference latency harness.
//!
//! Each network gets seeded random weights and a random observation batch.
//! After `warmup` untimed passes, every timed pass runs the forward pass and
//! reduces the action batch to its mean, timed with [`Instant`].

use std::fmt::Write as _;
use std::hint::black_box;
use std::time::Instant;

use sgmoe_core::policy::{ActorSpec, DensePreset, PolicyNetwork};
use sgmoe_core::{Batch, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BenchConfig {
    pub batch: usize,
    pub passes: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            batch: 6000,
            passes: 1000,
            warmup: 10,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("nothing to measure: passes must be at least 1")]
    NoPasses,
    #[error("batch of {batch} needs about {bytes} bytes of activations; reduce it with --batch")]
    OutOfMemory { batch: usize, bytes: usize },
    #[error(transparent)]
    Core(#[from] sgmoe_core::Error),
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub name: String,
    pub total_params: usize,
    pub active_params: usize,
    pub batch: usize,
    pub passes: usize,
    pub warmup: usize,
    /// Seconds per timed pass.
    pub times: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation of `times`.
    pub std: f64,
}

/// Rough peak activation footprint of one forward pass, in bytes.
pub fn working_set_bytes(spec: &ActorSpec, batch: usize) -> usize {
    let mut floats = 2 * spec.input_dim;
    for (i, (inp, out)) in spec.layer_dims().into_iter().enumerate() {
        floats += 2 * out;
        if let Some(m) = spec.moe.filter(|m| m.layer == i) {
            floats += m.k * (inp + out) + 2 * m.n;
        }
    }
    floats.saturating_mul(batch).saturating_mul(4)
}

fn mean_std(times: &[f64]) -> (f64, f64) {
    let n = times.len() as f64;
    let mean = times.iter().sum::<f64>() / n;
    if times.len() < 2 {
        return (mean, 0.0);
    }
    let var = times.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn bench_network(spec: &ActorSpec, cfg: &BenchConfig, rng: &mut Rng) -> Result<BenchReport, BenchError> {
    if cfg.passes == 0 {
        return Err(BenchError::NoPasses);
    }
    let bytes = working_set_bytes(spec, cfg.batch);
    let mut probe: Vec<u8> = Vec::new();
    if probe.try_reserve_exact(bytes).is_err() {
        return Err(BenchError::OutOfMemory {
            batch: cfg.batch,
            bytes,
        });
    }
    drop(probe);

    let net = PolicyNetwork::<f32>::build(spec, &mut rng.split())?;
    let obs = Batch::<f32>::uniform(cfg.batch, spec.input_dim, -1.0, 1.0, &mut rng.split());
    for _ in 0..cfg.warmup {
        black_box(net.forward_policy(black_box(&obs))?.actions.mean());
    }
    let mut times = Vec::with_capacity(cfg.passes);
    for _ in 0..cfg.passes {
        let start = Instant::now();
        let mean = net.forward_policy(black_box(&obs))?.actions.mean();
        black_box(mean);
        times.push(start.elapsed().as_secs_f64());
    }
    let (mean, std) = mean_std(&times);
    let params = spec.param_report();
    Ok(BenchReport {
        name: spec.name.clone(),
        total_params: params.total_params,
        active_params: params.active_params,
        batch: cfg.batch,
        passes: cfg.passes,
        warmup: cfg.warmup,
        times,
        mean,
        std,
    })
}

/// Benchmarks every spec in turn, each with its own split of the seed, and
/// returns the reports sorted by active parameter count. `progress` sees
/// each report as soon as it is ready.
pub fn run_suite(
    specs: &[ActorSpec],
    cfg: &BenchConfig,
    mut progress: impl FnMut(&BenchReport),
) -> Result<Vec<BenchReport>, BenchError> {
    if cfg.passes == 0 {
        return Err(BenchError::NoPasses);
    }
    let mut rng = Rng::new(cfg.seed);
    let mut reports = Vec::with_capacity(specs.len());
    for spec in specs {
        let report = bench_network(spec, cfg, &mut rng.split())?;
        progress(&report);
        reports.push(report);
    }
    reports.sort_by_key(|r| r.active_params);
    Ok(reports)
}

/// The four dense presets plus an MoE actor whose total parameter count
/// matches the extra-large preset.
pub fn preset_suite() -> Vec<ActorSpec> {
    let mut specs: Vec<ActorSpec> = DensePreset::ALL.iter().map(|p| p.spec()).collect();
    let xl = DensePreset::ExtraLarge.spec().param_report().total_params;
    specs.push(ActorSpec::moe_param_matched(xl));
    specs
}

/// The default MoE actor and a dense actor with the same total count.
pub fn moe_default_suite() -> Vec<ActorSpec> {
    let moe = ActorSpec::moe_default();
    let total = moe.param_report().total_params;
    vec![moe, ActorSpec::dense_matched("dense-matched-moe", total)]
}

pub fn suite(name: &str) -> Option<Vec<ActorSpec>> {
    match name {
        "presets" => Some(preset_suite()),
        "moe-default" => Some(moe_default_suite()),
        "all" => Some(preset_suite().into_iter().chain(moe_default_suite()).collect()),
        _ => None,
    }
}

/// How much slower `slow` is than `fast`, in percent of `fast`.
pub fn gap_percent(slow: &BenchReport, fast: &BenchReport) -> f64 {
    (slow.mean - fast.mean) / fast.mean * 100.0
}

pub fn format_table(reports: &[BenchReport]) -> String {
    let mut out = format!(
        "{:<24} {:>12} {:>12} {:>7} {:>7} {:>12} {:>12}\n",
        "network", "total", "active", "batch", "passes", "mean s", "std s"
    );
    for r in reports {
        let _ = writeln!(
            out,
            "{:<24} {:>12} {:>12} {:>7} {:>7} {:>12.6} {:>12.6}",
            r.name, r.total_params, r.active_params, r.batch, r.passes, r.mean, r.std
        );
    }
    out
}

pub fn reports_csv(reports: &[BenchReport]) -> String {
    let mut out = String::from("network,total_params,active_params,batch,passes,warmup,mean_s,std_s\n");
    for r in reports {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.name, r.total_params, r.active_params, r.batch, r.passes, r.warmup, r.mean, r.std
        );
    }
    out
}
