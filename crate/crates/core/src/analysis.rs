//! Expert utilization and gate sensitivity for MoE actors.
//!
//! [`record_trace`] logs the gate weights of every step, [`utilization`]
//! counts how often each expert is selected and [`sensitivity`] averages the
//! absolute gradient of each gate weight over the observation spans.
//!
//! CSV layouts:
//!
//! ```text
//! trace:  timestep,expert_0,...,expert_{n-1}
//! report: expert,steps,proprio,proprio_history,perception_latent,heading,
//!         phys_latent,robot_info,cmd_padding,robot_padding
//! ```
//!
//! A report row with `steps == 0` is absent: the expert was never selected.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::policy::{Layer, ObservationLayout, PolicyNetwork, OBS_DIM};
use crate::tensor::{elu_grad_scalar, matmul_transposed, Batch, Matrix, Scalar};
use crate::{Error, Result};

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GateTrace {
    pub n: usize,
    pub k: usize,
    /// `timesteps × n` gate weights.
    pub weights: Vec<Vec<f64>>,
    /// Selected experts per step, highest logit first.
    pub active: Vec<Vec<usize>>,
}

impl GateTrace {
    pub fn timesteps(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }
}

fn check_obs<T: Scalar>(net: &PolicyNetwork<T>, obs: &Batch<T>) -> Result<()> {
    if net.moe_layer().is_none() {
        return Err(Error::NotMoe);
    }
    if obs.dim() != net.spec().input_dim {
        return Err(Error::DimensionMismatch {
            op: "analysis",
            expected: net.spec().input_dim,
            found: obs.dim(),
        });
    }
    Ok(())
}

fn chunks<T: Scalar>(obs: &Batch<T>) -> impl Iterator<Item = Batch<T>> + '_ {
    let rows: Vec<usize> = (0..obs.batch_size()).collect();
    rows.chunks(CHUNK)
        .map(|idx| obs.select_rows(idx))
        .collect::<Vec<_>>()
        .into_iter()
}

/// Gate weights of every step under deterministic inference.
pub fn record_trace<T: Scalar>(net: &PolicyNetwork<T>, obs: &Batch<T>) -> Result<GateTrace> {
    check_obs(net, obs)?;
    let moe = net.moe_layer().ok_or(Error::NotMoe)?;
    let mut trace = GateTrace {
        n: moe.n(),
        k: moe.k(),
        weights: Vec::with_capacity(obs.batch_size()),
        active: Vec::with_capacity(obs.batch_size()),
    };
    for chunk in chunks(obs) {
        let out = net.forward_policy(&chunk)?;
        let g = out.gates.ok_or(Error::NotMoe)?;
        for i in 0..g.batch_size() {
            trace.weights.push(g.gates.row(i).iter().map(|v| v.as_f64()).collect());
            trace.active.push(g.active(i).to_vec());
        }
    }
    Ok(trace)
}

/// Fraction of steps in which each expert is selected.
pub fn utilization(trace: &GateTrace) -> Result<Vec<f64>> {
    if trace.is_empty() {
        return Err(Error::invalid("utilization of an empty trace"));
    }
    let mut counts = vec![0usize; trace.n];
    for act in &trace.active {
        for &i in act {
            counts[i] += 1;
        }
    }
    let t = trace.timesteps() as f64;
    Ok(counts.into_iter().map(|c| c as f64 / t).collect())
}

/// Linear layers feeding the MoE layer, and its gate matrix, in f64.
struct GatePath {
    moe_index: usize,
    linears: Vec<Matrix<f64>>,
    w_gate: Matrix<f64>,
    n: usize,
}

impl GatePath {
    fn new<T: Scalar>(net: &PolicyNetwork<T>) -> Result<Self> {
        let mut linears = Vec::new();
        for (i, layer) in net.layers().iter().enumerate() {
            match layer {
                Layer::Linear(l) => linears.push(l.weight.cast()),
                Layer::Moe(m) => {
                    return Ok(Self {
                        moe_index: i,
                        linears,
                        w_gate: m.w_gate().cast(),
                        n: m.n(),
                    })
                }
            }
        }
        Err(Error::NotMoe)
    }

    /// `n × input_dim` Jacobian of the gate weights for one row of a trace.
    /// The top-k selection is held fixed, so unselected rows are zero.
    fn jacobian<T: Scalar>(&self, pre: &[Batch<T>], gates: &[f64], active: &[usize], row: usize) -> Result<Batch<f64>> {
        let width = self.w_gate.rows();
        let mut v = Batch::<f64>::zeros(self.n, width);
        for &i in active {
            let out = v.row_mut(i);
            for &j in active {
                let coef = gates[i] * (f64::from(u8::from(i == j)) - gates[j]);
                if coef == 0.0 {
                    continue;
                }
                for (r, o) in out.iter_mut().enumerate() {
                    *o += coef * self.w_gate.get(r, j);
                }
            }
        }
        for l in (0..self.moe_index).rev() {
            let z = pre[l].row(row);
            for i in 0..self.n {
                for (o, zc) in v.row_mut(i).iter_mut().zip(z) {
                    *o *= elu_grad_scalar(zc.as_f64(), 1.0);
                }
            }
            v = matmul_transposed(&v, &self.linears[l])?;
        }
        Ok(v)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GateJacobian {
    pub gates: Vec<f64>,
    pub active: Vec<usize>,
    /// `n × input_dim`, row `i` is `∂G_i/∂x`.
    pub jacobian: Vec<Vec<f64>>,
}

/// Analytic gradient of every gate weight with respect to the network input,
/// for a single observation.
pub fn gate_jacobian<T: Scalar>(net: &PolicyNetwork<T>, obs: &[T]) -> Result<GateJacobian> {
    let x = Batch::new(1, obs.len(), obs.to_vec())?;
    check_obs(net, &x)?;
    let path = GatePath::new(net)?;
    let tr = net.forward_trace(&x)?;
    let g = tr.gates.as_ref().ok_or(Error::NotMoe)?;
    let gates: Vec<f64> = g.gates.row(0).iter().map(|v| v.as_f64()).collect();
    let jac = path.jacobian(&tr.pre_activations, &gates, g.active(0), 0)?;
    Ok(GateJacobian {
        active: g.active(0).to_vec(),
        jacobian: jac.rows().map(<[f64]>::to_vec).collect(),
        gates,
    })
}

pub const REPORT_COLUMNS: [&str; 8] = [
    "proprio",
    "proprio_history",
    "perception_latent",
    "heading",
    "phys_latent",
    "robot_info",
    "cmd_padding",
    "robot_padding",
];

#[derive(Clone, Debug, PartialEq)]
pub struct SensitivityReport {
    /// `n × REPORT_COLUMNS.len()` mean absolute gradients.
    pub values: Vec<Vec<f64>>,
    /// Number of steps that contributed to each expert's row.
    pub steps: Vec<usize>,
}

impl SensitivityReport {
    pub fn absent(&self, expert: usize) -> bool {
        self.steps[expert] == 0
    }
}

/// Observation indices grouped by report column. Padding entries are
/// removed from the six layout spans and listed in the last two columns.
fn column_indices() -> Vec<Vec<usize>> {
    let padding = ObservationLayout::constant_padding();
    let mut cols: Vec<Vec<usize>> = ObservationLayout::SPANS
        .iter()
        .map(|s| s.range().filter(|i| !padding.contains(i)).collect())
        .collect();
    let robot = ObservationLayout::ROBOT.range();
    cols.push(padding.iter().copied().filter(|i| !robot.contains(i)).collect());
    cols.push(padding.iter().copied().filter(|i| robot.contains(i)).collect());
    cols
}

/// Average absolute `∂G_i/∂x` per observation span and expert, over the steps
/// in which expert `i` has a nonzero gradient. Constant padding is held
/// fixed, so its columns are zero.
pub fn sensitivity<T: Scalar>(net: &PolicyNetwork<T>, obs: &Batch<T>) -> Result<SensitivityReport> {
    check_obs(net, obs)?;
    if obs.dim() != OBS_DIM {
        return Err(Error::invalid(format!(
            "sensitivity needs the {OBS_DIM}-entry observation layout"
        )));
    }
    let path = GatePath::new(net)?;
    let cols = column_indices();
    let padding = ObservationLayout::constant_padding();
    let mut sums = vec![vec![0.0; cols.len()]; path.n];
    let mut steps = vec![0usize; path.n];
    for chunk in chunks(obs) {
        let tr = net.forward_trace(&chunk)?;
        let g = tr.gates.as_ref().ok_or(Error::NotMoe)?;
        for row in 0..chunk.batch_size() {
            let gates: Vec<f64> = g.gates.row(row).iter().map(|v| v.as_f64()).collect();
            let mut jac = path.jacobian(&tr.pre_activations, &gates, g.active(row), row)?;
            for i in 0..path.n {
                let r = jac.row_mut(i);
                for &p in &padding {
                    r[p] = 0.0;
                }
                if r.iter().all(|v| *v == 0.0) {
                    continue;
                }
                steps[i] += 1;
                for (sum, idx) in sums[i].iter_mut().zip(&cols) {
                    *sum += idx.iter().map(|&e| r[e].abs()).sum::<f64>() / idx.len() as f64;
                }
            }
        }
    }
    let values = sums
        .into_iter()
        .zip(&steps)
        .map(|(row, &s)| {
            row.into_iter()
                .map(|v| if s == 0 { 0.0 } else { v / s as f64 })
                .collect()
        })
        .collect();
    Ok(SensitivityReport { values, steps })
}

pub fn trace_csv(trace: &GateTrace) -> String {
    let mut out = String::from("timestep");
    for i in 0..trace.n {
        let _ = write!(out, ",expert_{i}");
    }
    out.push('\n');
    for (t, row) in trace.weights.iter().enumerate() {
        let _ = write!(out, "{t}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

pub fn report_csv(report: &SensitivityReport) -> String {
    let mut out = format!("expert,steps,{}\n", REPORT_COLUMNS.join(","));
    for (i, (row, s)) in report.values.iter().zip(&report.steps).enumerate() {
        let _ = write!(out, "{i},{s}");
        for v in row {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

fn csv_rows(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>)> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or_else(|| Error::invalid("CSV has no header"))?
        .split(',')
        .map(|s| s.trim().to_string())
        .collect();
    let mut rows = Vec::new();
    for (n, line) in lines.enumerate() {
        let row: Vec<f64> = line
            .split(',')
            .map(|c| {
                c.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("CSV row {}: bad value {c:?}", n + 1)))
            })
            .collect::<Result<_>>()?;
        if row.len() != header.len() {
            return Err(Error::invalid(format!(
                "CSV row {} has {} columns, header has {}",
                n + 1,
                row.len(),
                header.len()
            )));
        }
        rows.push(row);
    }
    Ok((header, rows))
}

/// Parses [`trace_csv`] output. Active sets are recovered from the nonzero
/// weights, ordered by decreasing weight.
pub fn parse_trace_csv(text: &str) -> Result<GateTrace> {
    let (header, rows) = csv_rows(text)?;
    if header.first().map(String::as_str) != Some("timestep") {
        return Err(Error::invalid("trace CSV must start with a timestep column"));
    }
    let n = header.len() - 1;
    let weights: Vec<Vec<f64>> = rows.into_iter().map(|r| r[1..].to_vec()).collect();
    let active: Vec<Vec<usize>> = weights
        .iter()
        .map(|w| {
            let mut idx: Vec<usize> = (0..n).filter(|&i| w[i] != 0.0).collect();
            idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
            idx
        })
        .collect();
    let k = active.first().map_or(0, Vec::len);
    Ok(GateTrace { n, k, weights, active })
}

pub fn parse_report_csv(text: &str) -> Result<SensitivityReport> {
    let (header, rows) = csv_rows(text)?;
    if header.len() != REPORT_COLUMNS.len() + 2 || header[0] != "expert" || header[1] != "steps" {
        return Err(Error::invalid("unexpected sensitivity report header"));
    }
    Ok(SensitivityReport {
        steps: rows.iter().map(|r| r[1] as usize).collect(),
        values: rows.into_iter().map(|r| r[2..].to_vec()).collect(),
    })
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    fs::write(path, text)?;
    Ok(())
}

pub const OBS_MAGIC: [u8; 4] = *b"SGOB";
pub const OBS_VERSION: u32 = 1;

/// Binary observation sequence: 16-byte header (magic, version, timesteps,
/// dim; little-endian u32) followed by `timesteps × dim` little-endian f32.
pub fn encode_observations(obs: &Batch<f64>) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + obs.data().len() * 4);
    out.extend_from_slice(&OBS_MAGIC);
    out.extend_from_slice(&OBS_VERSION.to_le_bytes());
    out.extend_from_slice(&(obs.batch_size() as u32).to_le_bytes());
    out.extend_from_slice(&(obs.dim() as u32).to_le_bytes());
    for v in obs.data() {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    out
}

pub fn decode_observations(bytes: &[u8]) -> Result<Batch<f64>> {
    if bytes.len() < 16 {
        return Err(Error::format(bytes.len(), "observation container shorter than its header"));
    }
    if bytes[..4] != OBS_MAGIC {
        return Err(Error::format(0, "bad observation container magic"));
    }
    let word = |o: usize| u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]);
    if word(4) != OBS_VERSION {
        return Err(Error::format(4, format!("unsupported container version {}", word(4))));
    }
    let (t, d) = (word(8) as usize, word(12) as usize);
    let need = t
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::format(8, "container dimensions overflow"))?;
    let body = &bytes[16..];
    if body.len() != need {
        return Err(Error::format(
            16 + body.len().min(need),
            format!("expected {need} payload bytes, found {}", body.len()),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Batch::new(t, d, data)
}

/// Observations from the `obs:` lines of a trajectory log, one per line.
pub fn observations_from_trajectory(text: &str) -> Result<Batch<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        let Some(rest) = line.strip_prefix("obs:") else {
            continue;
        };
        let row = rest
            .split_whitespace()
            .map(|t| {
                t.parse()
                    .map_err(|_| Error::invalid(format!("line {}: bad observation value {t:?}", n + 1)))
            })
            .collect::<Result<Vec<f64>>>()?;
        rows.push(row);
    }
    if rows.is_empty() {
        return Batch::new(0, OBS_DIM, Vec::new());
    }
    Batch::from_rows(&rows)
}

pub fn load_observations(path: impl AsRef<Path>) -> Result<Batch<f64>> {
    let bytes = fs::read(path)?;
    if bytes.starts_with(&OBS_MAGIC) {
        decode_observations(&bytes)
    } else {
        let text = String::from_utf8(bytes).map_err(|e| Error::format(e.utf8_error().valid_up_to(), "not UTF-8 text"))?;
        observations_from_trajectory(&text)
    }
}
