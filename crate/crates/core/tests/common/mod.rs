//! Test-only reference implementations. Nothing here calls into the sparse
//! MoE code paths under test; the dense oracle evaluates every expert with
//! plain loops.
#![allow(dead_code)]

use sgmoe_core::analysis::gate_jacobian;
use sgmoe_core::depth::DepthImage;
use sgmoe_core::moe::MoeLayer;
use sgmoe_core::policy::{Layer, PolicyNetwork};
use sgmoe_core::rewards::{EdgeMap, RewardState};
use sgmoe_core::{Batch, Matrix, Rng};

/// Result of the dense reference for one batch.
pub struct DenseRef {
    pub logits: Vec<Vec<f64>>,
    pub gates: Vec<Vec<f64>>,
    pub y: Vec<Vec<f64>>,
}

fn naive_row_times(x: &[f64], w: &Matrix<f64>) -> Vec<f64> {
    (0..w.cols())
        .map(|c| (0..w.rows()).map(|r| x[r] * w.get(r, c)).sum())
        .collect()
}

fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| if x.is_finite() { (x - m).exp() } else { 0.0 }).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Evaluates all `n` experts and blends with the full (masked) gate vector.
pub fn dense_moe(layer: &MoeLayer<f64>, x: &Batch<f64>, eps: Option<&Batch<f64>>) -> DenseRef {
    let n = layer.n();
    let k = layer.k();
    let mut out = DenseRef { logits: vec![], gates: vec![], y: vec![] };
    for s in 0..x.batch_size() {
        let xr = x.row(s);
        let mut h = naive_row_times(xr, layer.w_gate());
        if let Some(eps) = eps {
            let scale = naive_softmax(&naive_row_times(xr, layer.w_noise()));
            for i in 0..n {
                h[i] += eps.row(s)[i] * scale[i];
            }
        }
        let mut order: Vec<usize> = (0..n).collect();
        // stable sort keeps lower index first among equal logits
        order.sort_by(|&a, &b| h[b].partial_cmp(&h[a]).unwrap());
        let mut masked = vec![f64::NEG_INFINITY; n];
        for &i in &order[..k] {
            masked[i] = h[i];
        }
        let g = naive_softmax(&masked);
        let mut y = vec![0.0; layer.out_dim()];
        for (i, e) in layer.experts().iter().enumerate() {
            let ey = naive_row_times(xr, e);
            for (acc, v) in y.iter_mut().zip(ey) {
                *acc += g[i] * v;
            }
        }
        out.logits.push(h);
        out.gates.push(g);
        out.y.push(y);
    }
    out
}

/// Max over entries of `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err(a: &[f64], b: &[f64], floor: f64) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central difference of `f` at every entry of `params`.
pub fn central_diff(params: &mut [f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.len());
    for i in 0..params.len() {
        let orig = params[i];
        params[i] = orig + h;
        let up = f(params);
        params[i] = orig - h;
        let down = f(params);
        params[i] = orig;
        out.push((up - down) / (2.0 * h));
    }
    out
}

/// Population CV² computed independently of the library.
pub fn cv_squared(importance: &[f64]) -> f64 {
    let n = importance.len() as f64;
    let m = importance.iter().sum::<f64>() / n;
    let var = importance.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
    var / (m * m)
}

pub fn random_layer(rng: &mut Rng, in_dim: usize, out_dim: usize, n: usize, k: usize) -> MoeLayer<f64> {
    let w_gate = Matrix::uniform(in_dim, n, 1.0, rng);
    let w_noise = Matrix::uniform(in_dim, n, 1.0, rng);
    let experts = (0..n).map(|_| Matrix::uniform(in_dim, out_dim, 1.0, rng)).collect();
    MoeLayer::from_parts(w_gate, w_noise, experts, k).unwrap()
}

/// Random 160x120 scenes: noise outside the clip range, step edges,
/// occasional NaN.
pub fn random_scene(rng: &mut Rng) -> DepthImage {
    let (w, h) = (160, 120);
    let base = rng.uniform_range(-0.5, 5.0);
    let step_col = (rng.uniform() * w as f64) as usize;
    let step = rng.uniform_range(-3.0, 3.0);
    let noise = rng.uniform_range(0.0, 2.0);
    let data = (0..w * h)
        .map(|i| {
            if rng.bernoulli(0.001) {
                return f32::NAN;
            }
            let c = i % w;
            let v = base + if c >= step_col { step } else { 0.0 } + noise * rng.uniform_range(-1.0, 1.0);
            v as f32
        })
        .collect();
    DepthImage::new(w, h, data).unwrap()
}

fn triple(rng: &mut Rng, s: f64) -> [f64; 3] {
    [rng.uniform_range(-s, s), rng.uniform_range(-s, s), rng.uniform_range(-s, s)]
}

fn vec_n(rng: &mut Rng, n: usize, s: f64) -> Vec<f64> {
    (0..n).map(|_| rng.uniform_range(-s, s)).collect()
}

/// Every field populated with values well outside the typical operating range.
pub fn random_reward_state(rng: &mut Rng) -> RewardState {
    let cells = (0..64).map(|_| rng.bernoulli(0.3)).collect();
    let mut goal = triple(rng, 5.0);
    goal[0] += 6.0;
    RewardState {
        yaw: Some(rng.uniform_range(-3.2, 3.2)),
        yaw_goal: Some(rng.uniform_range(-3.2, 3.2)),
        lin_vel: Some(triple(rng, 2.0)),
        ang_vel: Some(triple(rng, 3.0)),
        projected_gravity: Some(triple(rng, 1.0)),
        dof_pos: Some(vec_n(rng, 12, 1.5)),
        dof_vel: Some(vec_n(rng, 12, 20.0)),
        dof_vel_prev: Some(vec_n(rng, 12, 20.0)),
        actions: Some(vec_n(rng, 12, 3.0)),
        actions_prev: Some(vec_n(rng, 12, 3.0)),
        torques: Some(vec_n(rng, 12, 40.0)),
        torques_prev: Some(vec_n(rng, 12, 40.0)),
        contact_forces: Some((0..17).map(|_| triple(rng, 60.0)).collect()),
        collision_bodies: Some((0..13).collect()),
        feet_bodies: Some(vec![13, 14, 15, 16]),
        foot_positions: Some((0..4).map(|_| triple(rng, 2.0)).collect()),
        foot_contacts: Some((0..4).map(|_| rng.bernoulli(0.5)).collect()),
        edge_map: Some(EdgeMap::new([-2.0, -2.0], 0.5, 8, 8, cells).unwrap()),
        default_dof_pos: Some(vec_n(rng, 12, 1.0)),
        hip_indices: Some(vec![0, 3, 6, 9]),
        robot_pos: Some(triple(rng, 5.0)),
        goal_pos: Some(goal),
        v_x_target: Some(rng.uniform_range(0.3, 0.8)),
        walking_env: Some(rng.bernoulli(0.5)),
    }
}

pub fn randomize_gate(net: &mut PolicyNetwork<f64>, scale: f64, rng: &mut Rng) {
    for layer in net.layers_mut() {
        if let Layer::Moe(m) = layer {
            let (r, c) = (m.in_dim(), m.n());
            *m.w_gate_mut() = Matrix::uniform(r, c, scale, rng);
        }
    }
}

fn elu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        v.exp_m1()
    }
}

/// Gate weights by direct evaluation of the layers in front of the MoE
/// layer, with the selected experts given.
pub fn naive_gates(net: &PolicyNetwork<f64>, x: &[f64], active: &[usize]) -> (Vec<f64>, Vec<f64>) {
    let mut h = x.to_vec();
    for layer in net.layers() {
        match layer {
            Layer::Linear(l) => {
                let w = &l.weight;
                h = (0..w.cols())
                    .map(|c| elu((0..w.rows()).map(|r| h[r] * w.get(r, c)).sum::<f64>() + l.bias[c]))
                    .collect();
            }
            Layer::Moe(m) => {
                let wg = m.w_gate();
                let logits: Vec<f64> = (0..m.n())
                    .map(|j| (0..wg.rows()).map(|r| h[r] * wg.get(r, j)).sum())
                    .collect();
                let top = active.iter().map(|&j| logits[j]).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = active.iter().map(|&j| (logits[j] - top).exp()).sum();
                let mut g = vec![0.0; m.n()];
                for &j in active {
                    g[j] = (logits[j] - top).exp() / z;
                }
                return (g, logits);
            }
        }
    }
    unreachable!("network has an MoE layer")
}

pub fn gate_margin(logits: &[f64], active: &[usize]) -> f64 {
    let kth = active.iter().map(|&j| logits[j]).fold(f64::INFINITY, f64::min);
    let out = (0..logits.len())
        .filter(|j| !active.contains(j))
        .map(|j| logits[j])
        .fold(f64::NEG_INFINITY, f64::max);
    kth - out
}

/// Worst relative error between the analytic gate Jacobian and central
/// differences of [`naive_gates`] over `coords`. `None` near top-k ties.
pub fn gate_fd_error(net: &PolicyNetwork<f64>, x: &[f64], coords: &[usize]) -> Option<f64> {
    let jac = gate_jacobian(net, x).unwrap();
    let (g, logits) = naive_gates(net, x, &jac.active);
    if gate_margin(&logits, &jac.active) < 1e-4 {
        return None;
    }
    assert!(max_rel_err(&jac.gates, &g, 1e-12) < 1e-9);
    let h = 1e-6;
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    for &c in coords {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[c] += h;
        xm[c] -= h;
        let (gp, _) = naive_gates(net, &xp, &jac.active);
        let (gm, _) = naive_gates(net, &xm, &jac.active);
        for i in 0..g.len() {
            analytic.push(jac.jacobian[i][c]);
            numeric.push((gp[i] - gm[i]) / (2.0 * h));
        }
    }
    Some(max_rel_err(&analytic, &numeric, 1e-6))
}

/// Loss used for the gradient checks: a linear plus a quadratic readout of
/// `y`, plus the weighted CV² of the importance.
struct Probe {
    c: Vec<f64>,
    w: f64,
}

impl Probe {
    fn loss(&self, y: &[Vec<f64>], gates: &[Vec<f64>]) -> f64 {
        let flat: Vec<f64> = y.concat();
        let task: f64 = flat
            .iter()
            .zip(&self.c)
            .map(|(v, c)| c * v + 0.5 * v * v)
            .sum();
        let n = gates[0].len();
        let imp: Vec<f64> = (0..n).map(|i| gates.iter().map(|g| g[i]).sum()).collect();
        task + self.w * cv_squared(&imp)
    }

    fn upstream(&self, y: &Batch<f64>) -> Batch<f64> {
        let data = y.data().iter().zip(&self.c).map(|(v, c)| c + v).collect();
        Batch::new(y.batch_size(), y.dim(), data).unwrap()
    }
}

struct Shapes {
    in_dim: usize,
    out_dim: usize,
    n: usize,
    k: usize,
    batch: usize,
}

fn rebuild(p: &[f64], s: &Shapes) -> (MoeLayer<f64>, Batch<f64>) {
    let g = s.in_dim * s.n;
    let e = s.in_dim * s.out_dim;
    let w_gate = Matrix::new(s.in_dim, s.n, p[..g].to_vec()).unwrap();
    let w_noise = Matrix::new(s.in_dim, s.n, p[g..2 * g].to_vec()).unwrap();
    let experts = (0..s.n)
        .map(|i| Matrix::new(s.in_dim, s.out_dim, p[2 * g + i * e..2 * g + (i + 1) * e].to_vec()).unwrap())
        .collect();
    let off = 2 * g + s.n * e;
    let x = Batch::new(s.batch, s.in_dim, p[off..].to_vec()).unwrap();
    (MoeLayer::from_parts(w_gate, w_noise, experts, s.k).unwrap(), x)
}

/// One gradient check of a random noisy layer (5 inputs, 3 outputs, top-2
/// of 4, batch 3) against central differences of the dense oracle, with
/// `h = 1e-6`. `None` when the instance sits within 1e-4 of a top-k tie.
pub fn moe_gradient_fd_error(rng: &mut Rng) -> Option<f64> {
    let shapes = Shapes {
        in_dim: 5,
        out_dim: 3,
        n: 4,
        k: 2,
        batch: 3,
    };
    let layer = random_layer(rng, shapes.in_dim, shapes.out_dim, shapes.n, shapes.k);
    let x = Batch::uniform(shapes.batch, shapes.in_dim, -1.0, 1.0, rng);
    let eps = Batch::standard_normal(shapes.batch, shapes.n, rng);
    let probe = Probe {
        c: (0..shapes.batch * shapes.out_dim).map(|_| rng.uniform_range(-1.0, 1.0)).collect(),
        w: 0.1,
    };
    let (y, cache) = layer.forward_with_noise(&x, Some(&eps)).unwrap();
    if cache.gate.min_topk_margin() < 1e-4 {
        return None;
    }
    let grads = layer.backward_from(&cache, &probe.upstream(&y), probe.w).unwrap();

    let mut params: Vec<f64> = layer
        .w_gate()
        .data()
        .iter()
        .chain(layer.w_noise().data())
        .chain(layer.experts().iter().flat_map(|e| e.data().iter()))
        .chain(x.data())
        .copied()
        .collect();
    let numeric = central_diff(&mut params, 1e-6, |p| {
        let (l, xx) = rebuild(p, &shapes);
        let r = dense_moe(&l, &xx, Some(&eps));
        probe.loss(&r.y, &r.gates)
    });
    let analytic: Vec<f64> = grads
        .w_gate
        .data()
        .iter()
        .chain(grads.w_noise.data())
        .chain(grads.experts.iter().flat_map(|e| e.data().iter()))
        .chain(grads.input.data())
        .copied()
        .collect();
    Some(max_rel_err(&analytic, &numeric, 1e-6))
}
