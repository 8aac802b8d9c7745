//! Sparsely-gated mixture-of-experts layer.
//!
//! For an input row `x` the layer computes gate logits
//!
//! ```text
//! H(x)ᵢ = (x·W_g)ᵢ + εᵢ · softmax(x·W_noise)ᵢ        ε ~ 𝒩(0, 1), train mode only
//! G(x)  = softmax(KeepTopK(H(x), k))
//! y     = Σᵢ G(x)ᵢ · (x·Eᵢ)
//! ```
//!
//! Only the `k` selected experts are evaluated for each row. Rows are grouped
//! by expert so every expert runs one GEMM over the samples routed to it.
//!
//! The load-balancing penalty is `w · CV(Importance)²` where the importance
//! of an expert is the column sum of `G` over the batch and CV uses the
//! population standard deviation.

use crate::rng::Rng;
use crate::tensor::{matmul, matmul_transposed, outer_sum, softmax_in_place, Batch, Matrix, Scalar};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Noisy gating; requires a random source.
    Train,
    /// Deterministic gating, the noise term is dropped.
    Inference,
}

/// Output of the gating network for one batch.
#[derive(Clone, Debug, PartialEq)]
pub struct GateResult<T> {
    /// Pre-top-k logits `H`, `batch × n`.
    pub logits: Batch<T>,
    /// Final gate weights `G`, `batch × n`; zero outside the active set.
    pub gates: Batch<T>,
    k: usize,
    active: Vec<usize>,
}

impl<T: Scalar> GateResult<T> {
    /// Indices of the `k` experts selected for sample `i`, highest logit
    /// first, ties resolved towards the lower index.
    pub fn active(&self, i: usize) -> &[usize] {
        &self.active[i * self.k..(i + 1) * self.k]
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn batch_size(&self) -> usize {
        self.gates.batch_size()
    }

    /// Smallest gap between the k-th and (k+1)-th logit over the batch;
    /// `+inf` when `k == n`.
    pub fn min_topk_margin(&self) -> f64 {
        let n = self.logits.dim();
        if self.k >= n {
            return f64::INFINITY;
        }
        let mut margin = f64::INFINITY;
        for i in 0..self.batch_size() {
            let row = self.logits.row(i);
            let act = self.active(i);
            let kth = row[act[self.k - 1]].as_f64();
            let best_out = (0..n)
                .filter(|j| !act.contains(j))
                .map(|j| row[j].as_f64())
                .fold(f64::NEG_INFINITY, f64::max);
            margin = margin.min(kth - best_out);
        }
        margin
    }
}

/// Gate noise drawn during a train-mode forward pass, kept for replay.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseRecord<T> {
    pub eps: Batch<T>,
    /// Row-wise softmax of `x·W_noise`.
    pub scale: Batch<T>,
}

/// Everything backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    pub input: Batch<T>,
    pub gate: GateResult<T>,
    pub noise: Option<NoiseRecord<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoadBalanceReport {
    pub importance: Vec<f64>,
    pub cv: f64,
    pub loss: f64,
    pub w_importance: f64,
}

#[derive(Clone, Debug)]
pub struct MoeGradients<T> {
    pub w_gate: Matrix<T>,
    pub w_noise: Matrix<T>,
    pub experts: Vec<Matrix<T>>,
    pub input: Batch<T>,
    pub load: LoadBalanceReport,
}

#[derive(Clone, Debug)]
pub struct MoeLayer<T> {
    k: usize,
    w_gate: Matrix<T>,
    w_noise: Matrix<T>,
    experts: Vec<Matrix<T>>,
    mode: Mode,
    tape: Option<ForwardCache<T>>,
}

impl<T: Scalar> MoeLayer<T> {
    /// Fresh layer: zero gate and noise weights, experts uniform in
    /// `±√(1/in_dim)`. Starts in inference mode.
    pub fn new(in_dim: usize, out_dim: usize, n: usize, k: usize, rng: &mut Rng) -> Result<Self> {
        if in_dim == 0 || out_dim == 0 {
            return Err(Error::invalid("MoE dimensions must be positive"));
        }
        let bound = (1.0 / in_dim as f64).sqrt();
        let experts = (0..n)
            .map(|_| Matrix::uniform(in_dim, out_dim, bound, rng))
            .collect();
        Self::from_parts(
            Matrix::zeros(in_dim, n),
            Matrix::zeros(in_dim, n),
            experts,
            k,
        )
    }

    pub fn from_parts(
        w_gate: Matrix<T>,
        w_noise: Matrix<T>,
        experts: Vec<Matrix<T>>,
        k: usize,
    ) -> Result<Self> {
        let n = experts.len();
        if n == 0 {
            return Err(Error::invalid("an MoE layer needs at least one expert"));
        }
        if k == 0 || k > n {
            return Err(Error::TopKOutOfRange { k, n });
        }
        let (in_dim, out_dim) = (experts[0].rows(), experts[0].cols());
        if experts.iter().any(|e| e.rows() != in_dim || e.cols() != out_dim) {
            return Err(Error::invalid("all experts must share their dimensions"));
        }
        for (name, m) in [("W_g", &w_gate), ("W_noise", &w_noise)] {
            if m.rows() != in_dim || m.cols() != n {
                return Err(Error::invalid(format!(
                    "{name} is {}x{}, expected {in_dim}x{n}",
                    m.rows(),
                    m.cols()
                )));
            }
        }
        Ok(Self {
            k,
            w_gate,
            w_noise,
            experts,
            mode: Mode::Inference,
            tape: None,
        })
    }

    pub fn n(&self) -> usize {
        self.experts.len()
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn in_dim(&self) -> usize {
        self.w_gate.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.experts[0].cols()
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub fn set_top_k(&mut self, k: usize) -> Result<()> {
        if k == 0 || k > self.n() {
            return Err(Error::TopKOutOfRange { k, n: self.n() });
        }
        self.k = k;
        Ok(())
    }

    pub fn w_gate(&self) -> &Matrix<T> {
        &self.w_gate
    }

    pub fn w_gate_mut(&mut self) -> &mut Matrix<T> {
        &mut self.w_gate
    }

    pub fn w_noise(&self) -> &Matrix<T> {
        &self.w_noise
    }

    pub fn w_noise_mut(&mut self) -> &mut Matrix<T> {
        &mut self.w_noise
    }

    pub fn experts(&self) -> &[Matrix<T>] {
        &self.experts
    }

    pub fn experts_mut(&mut self) -> &mut [Matrix<T>] {
        &mut self.experts
    }

    pub fn params_per_expert(&self) -> usize {
        self.in_dim() * self.out_dim()
    }

    /// Gate and noise weights plus every expert.
    pub fn param_count(&self) -> usize {
        2 * self.in_dim() * self.n() + self.n() * self.params_per_expert()
    }

    /// Gate weights for a batch. In train mode the noise is drawn from `rng`.
    pub fn gate(&self, x: &Batch<T>, rng: Option<&mut Rng>) -> Result<GateResult<T>> {
        let eps = self.draw_noise(x.batch_size(), rng)?;
        Ok(self.gate_impl(x, eps.as_ref())?.0)
    }

    /// Sparse forward pass. Returns the blended output and the gate telemetry.
    pub fn forward(&self, x: &Batch<T>, rng: Option<&mut Rng>) -> Result<(Batch<T>, GateResult<T>)> {
        let eps = self.draw_noise(x.batch_size(), rng)?;
        let (gate, _) = self.gate_impl(x, eps.as_ref())?;
        let y = self.blend(x, &gate)?;
        Ok((y, gate))
    }

    /// Deterministic forward pass regardless of the layer mode.
    pub fn forward_inference(&self, x: &Batch<T>) -> Result<(Batch<T>, GateResult<T>)> {
        let (gate, _) = self.gate_impl(x, None)?;
        let y = self.blend(x, &gate)?;
        Ok((y, gate))
    }

    /// Forward pass with caller-supplied gate noise (`None` for deterministic
    /// gating), independent of the layer mode. Used to replay a recorded pass.
    pub fn forward_with_noise(
        &self,
        x: &Batch<T>,
        eps: Option<&Batch<T>>,
    ) -> Result<(Batch<T>, ForwardCache<T>)> {
        let (gate, noise) = self.gate_impl(x, eps)?;
        let y = self.blend(x, &gate)?;
        Ok((
            y,
            ForwardCache {
                input: x.clone(),
                gate,
                noise,
            },
        ))
    }

    /// Forward pass that records its state for a later [`MoeLayer::backward`].
    pub fn forward_train(&mut self, x: &Batch<T>, rng: Option<&mut Rng>) -> Result<Batch<T>> {
        let eps = self.draw_noise(x.batch_size(), rng)?;
        let (y, cache) = self.forward_with_noise(x, eps.as_ref())?;
        self.tape = Some(cache);
        Ok(y)
    }

    pub fn recorded(&self) -> Option<&ForwardCache<T>> {
        self.tape.as_ref()
    }

    pub fn clear_recorded(&mut self) {
        self.tape = None;
    }

    /// Gradients of `L(y) + w·CV(Importance)²` for the recorded pass, where
    /// `upstream = ∂L/∂y`.
    pub fn backward(&self, upstream: &Batch<T>, w_importance: f64) -> Result<MoeGradients<T>> {
        let cache = self.tape.as_ref().ok_or(Error::NoForwardState)?;
        self.backward_from(cache, upstream, w_importance)
    }

    /// As [`MoeLayer::backward`] against an explicit cache. The top-k mask is
    /// held fixed; gradients reach only the softmax over kept logits.
    pub fn backward_from(
        &self,
        cache: &ForwardCache<T>,
        upstream: &Batch<T>,
        w_importance: f64,
    ) -> Result<MoeGradients<T>> {
        let x = &cache.input;
        let gate = &cache.gate;
        let (b, n, k) = (x.batch_size(), self.n(), gate.k());
        if upstream.batch_size() != b || upstream.dim() != self.out_dim() {
            return Err(Error::DimensionMismatch {
                op: "MoeLayer::backward",
                expected: b * self.out_dim(),
                found: upstream.batch_size() * upstream.dim(),
            });
        }
        if x.dim() != self.in_dim() || gate.gates.dim() != n {
            return Err(Error::invalid("recorded forward pass does not match this layer"));
        }

        let load = load_balance_loss(&gate.gates, w_importance)?;
        let load_grad = cv_squared_grad(&load.importance)
            .into_iter()
            .map(|g| T::lit(g * w_importance))
            .collect::<Vec<_>>();

        // ∂L/∂G, seeded with the load-balancing term (identical for every row).
        let mut d_gates = Batch::zeros(b, n);
        for row in 0..b {
            d_gates.row_mut(row).copy_from_slice(&load_grad);
        }

        let mut d_input = Batch::zeros(b, self.in_dim());
        let mut d_experts = vec![Matrix::zeros(self.in_dim(), self.out_dim()); n];
        for (e, rows) in route(gate, n).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let xs = x.select_rows(&rows);
            let mut up = upstream.select_rows(&rows);
            // ∂L/∂G_e = ⟨upstream, x·E_e⟩ = ⟨upstream·E_eᵀ, x⟩
            let back = matmul_transposed(&up, &self.experts[e])?;
            for (j, &s) in rows.iter().enumerate() {
                let dot: T = back.row(j).iter().zip(xs.row(j)).map(|(a, b)| *a * *b).sum();
                d_gates.row_mut(s)[e] += dot;
                let g = gate.gates.row(s)[e];
                for (dx, v) in d_input.row_mut(s).iter_mut().zip(back.row(j)) {
                    *dx += g * *v;
                }
                for v in up.row_mut(j) {
                    *v *= g;
                }
            }
            d_experts[e] = outer_sum(&xs, &up)?;
        }

        // softmax over the kept logits
        let mut d_logits = Batch::zeros(b, n);
        for s in 0..b {
            let g = gate.gates.row(s);
            let dg = d_gates.row(s);
            let act = gate.active(s);
            let inner: T = act.iter().map(|&i| g[i] * dg[i]).sum();
            let dh = d_logits.row_mut(s);
            for &i in act {
                dh[i] = g[i] * (dg[i] - inner);
            }
        }
        debug_assert_eq!(k, gate.k());

        let w_gate = outer_sum(x, &d_logits)?;
        let gate_back = matmul_transposed(&d_logits, &self.w_gate)?;
        for (dx, v) in d_input.data_mut().iter_mut().zip(gate_back.data()) {
            *dx += *v;
        }

        let w_noise = match &cache.noise {
            Some(noise) => {
                let mut d_noise_logits = Batch::zeros(b, n);
                for s in 0..b {
                    let sc = noise.scale.row(s);
                    let eps = noise.eps.row(s);
                    let dh = d_logits.row(s);
                    let d_scale: Vec<T> = (0..n).map(|i| eps[i] * dh[i]).collect();
                    let inner: T = (0..n).map(|i| sc[i] * d_scale[i]).sum();
                    let out = d_noise_logits.row_mut(s);
                    for i in 0..n {
                        out[i] = sc[i] * (d_scale[i] - inner);
                    }
                }
                let back = matmul_transposed(&d_noise_logits, &self.w_noise)?;
                for (dx, v) in d_input.data_mut().iter_mut().zip(back.data()) {
                    *dx += *v;
                }
                outer_sum(x, &d_noise_logits)?
            }
            None => Matrix::zeros(self.in_dim(), n),
        };

        Ok(MoeGradients {
            w_gate,
            w_noise,
            experts: d_experts,
            input: d_input,
            load,
        })
    }

    /// Plain gradient-descent step.
    pub fn apply_gradients(&mut self, grads: &MoeGradients<T>, lr: T) {
        self.w_gate.sub_scaled(&grads.w_gate, lr);
        self.w_noise.sub_scaled(&grads.w_noise, lr);
        for (e, g) in self.experts.iter_mut().zip(&grads.experts) {
            e.sub_scaled(g, lr);
        }
    }

    fn draw_noise(&self, batch: usize, rng: Option<&mut Rng>) -> Result<Option<Batch<T>>> {
        match self.mode {
            Mode::Inference => Ok(None),
            Mode::Train => {
                let rng = rng.ok_or(Error::MissingRng)?;
                Ok(Some(Batch::standard_normal(batch, self.n(), rng)))
            }
        }
    }

    fn gate_impl(
        &self,
        x: &Batch<T>,
        eps: Option<&Batch<T>>,
    ) -> Result<(GateResult<T>, Option<NoiseRecord<T>>)> {
        let n = self.n();
        if self.k == 0 || self.k > n {
            return Err(Error::TopKOutOfRange { k: self.k, n });
        }
        if x.dim() != self.in_dim() {
            return Err(Error::DimensionMismatch {
                op: "MoeLayer::gate",
                expected: self.in_dim(),
                found: x.dim(),
            });
        }
        let mut logits = matmul(x, &self.w_gate)?;
        let noise = match eps {
            Some(eps) => {
                if eps.batch_size() != x.batch_size() || eps.dim() != n {
                    return Err(Error::invalid("gate noise shape does not match batch × experts"));
                }
                let mut scale = matmul(x, &self.w_noise)?;
                for s in 0..scale.batch_size() {
                    softmax_in_place(scale.row_mut(s))?;
                }
                for ((h, e), sc) in logits
                    .data_mut()
                    .iter_mut()
                    .zip(eps.data())
                    .zip(scale.data())
                {
                    *h += *e * *sc;
                }
                Some(NoiseRecord {
                    eps: eps.clone(),
                    scale,
                })
            }
            None => None,
        };

        let (b, k) = (x.batch_size(), self.k);
        let mut gates = Batch::zeros(b, n);
        let mut active = Vec::with_capacity(b * k);
        let mut kept = vec![T::zero(); k];
        for s in 0..b {
            let h = logits.row(s);
            let start = active.len();
            top_k_into(h, k, &mut active);
            let sel = &active[start..];
            for (slot, &i) in kept.iter_mut().zip(sel) {
                *slot = h[i];
            }
            softmax_in_place(&mut kept)?;
            let g = gates.row_mut(s);
            for (&i, &v) in sel.iter().zip(&kept) {
                g[i] = v;
            }
        }
        Ok((
            GateResult {
                logits,
                gates,
                k,
                active,
            },
            noise,
        ))
    }

    fn blend(&self, x: &Batch<T>, gate: &GateResult<T>) -> Result<Batch<T>> {
        let mut y = Batch::zeros(x.batch_size(), self.out_dim());
        for (e, rows) in route(gate, self.n()).into_iter().enumerate() {
            if rows.is_empty() {
                continue;
            }
            let out = matmul(&x.select_rows(&rows), &self.experts[e])?;
            for (j, &s) in rows.iter().enumerate() {
                let g = gate.gates.row(s)[e];
                for (acc, v) in y.row_mut(s).iter_mut().zip(out.row(j)) {
                    *acc += g * *v;
                }
            }
        }
        Ok(y)
    }
}

/// Samples routed to each expert, in batch order.
fn route<T: Scalar>(gate: &GateResult<T>, n: usize) -> Vec<Vec<usize>> {
    let mut rows = vec![Vec::new(); n];
    for s in 0..gate.batch_size() {
        for &e in gate.active(s) {
            rows[e].push(s);
        }
    }
    rows
}

/// Appends the indices of the `k` largest entries, descending; equal values
/// keep the lower index first.
fn top_k_into<T: Scalar>(h: &[T], k: usize, out: &mut Vec<usize>) {
    let start = out.len();
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &v) in h.iter().enumerate() {
            if out[start..].contains(&i) {
                continue;
            }
            match best {
                Some(b) if !(v > h[b]) => {}
                _ => best = Some(i),
            }
        }
        out.push(best.expect("k <= n"));
    }
}

/// Column sums of the gate matrix: the importance of every expert.
pub fn importance<T: Scalar>(gates: &Batch<T>) -> Vec<T> {
    gates.column_sums()
}

/// `w · CV(Importance)²` with the population standard deviation.
pub fn load_balance_loss<T: Scalar>(gates: &Batch<T>, w_importance: f64) -> Result<LoadBalanceReport> {
    let importance: Vec<f64> = importance(gates).into_iter().map(Scalar::as_f64).collect();
    load_balance_from_importance(importance, w_importance)
}

pub fn load_balance_from_importance(importance: Vec<f64>, w_importance: f64) -> Result<LoadBalanceReport> {
    let cv = coefficient_of_variation(&importance)?;
    Ok(LoadBalanceReport {
        importance,
        cv,
        loss: w_importance * (cv * cv),
        w_importance,
    })
}

pub fn coefficient_of_variation(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::invalid("coefficient of variation of an empty vector"));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return Err(Error::ZeroImportance);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    Ok(var.sqrt() / mean)
}

/// `∂CV²/∂Iⱼ = 2/(n·m²) · ((Iⱼ − m) − var/m)`.
fn cv_squared_grad(importance: &[f64]) -> Vec<f64> {
    let n = importance.len() as f64;
    let mean = importance.iter().sum::<f64>() / n;
    let var = importance.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    importance
        .iter()
        .map(|i| 2.0 / (n * mean * mean) * ((i - mean) - var / mean))
        .collect()
}
