//! Actor networks and the observation they consume.
//!
//! Two families share one representation: dense MLP actors and the MoE actor
//! whose middle hidden layer is an [`MoeLayer`]. ELU sits between layers and a
//! dense head maps the last hidden width to the 12 joint targets.

use std::ops::Range;

use crate::moe::{GateResult, MoeLayer};
use crate::rng::Rng;
use crate::tensor::{affine, elu_in_place, Batch, Matrix, Scalar};
use crate::{Error, Result};

pub const OBS_DIM: usize = 591;
pub const ACTION_DIM: usize = 12;
pub const PROPRIO_DIM: usize = 48;
pub const HISTORY_LEN: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Span {
    pub name: &'static str,
    pub offset: usize,
    pub len: usize,
}

impl Span {
    pub const fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len
    }
}

const fn span(name: &'static str, offset: usize, len: usize) -> Span {
    Span { name, offset, len }
}

/// Layout of the 591-wide observation. Top-level spans are contiguous and in
/// this order.
#[derive(Clone, Copy, Debug, Default)]
pub struct ObservationLayout;

impl ObservationLayout {
    pub const PROPRIO: Span = span("proprio", 0, PROPRIO_DIM);
    pub const HISTORY: Span = span("proprio_history", 48, HISTORY_LEN * PROPRIO_DIM);
    pub const PERCEPTION: Span = span("perception_latent", 528, 32);
    pub const HEADING: Span = span("heading", 560, 2);
    pub const PHYS: Span = span("phys_latent", 562, 20);
    pub const ROBOT: Span = span("robot_info", 582, 9);

    pub const SPANS: [Span; 6] = [
        Self::PROPRIO,
        Self::HISTORY,
        Self::PERCEPTION,
        Self::HEADING,
        Self::PHYS,
        Self::ROBOT,
    ];

    /// Fields of one 48-wide proprioceptive frame, offsets relative to the
    /// frame start.
    pub const ANG_VEL: Span = span("ang_vel", 0, 3);
    pub const ROLL_PITCH: Span = span("roll_pitch", 3, 2);
    pub const COMMAND: Span = span("command", 5, 3);
    pub const JOINT_POS: Span = span("joint_pos", 8, 12);
    pub const JOINT_VEL: Span = span("joint_vel", 20, 12);
    pub const LAST_ACTION: Span = span("last_action", 32, 12);
    pub const CONTACTS: Span = span("contacts", 44, 4);

    pub const PROPRIO_FIELDS: [Span; 7] = [
        Self::ANG_VEL,
        Self::ROLL_PITCH,
        Self::COMMAND,
        Self::JOINT_POS,
        Self::JOINT_VEL,
        Self::LAST_ACTION,
        Self::CONTACTS,
    ];

    pub fn span(name: &str) -> Option<Span> {
        Self::SPANS.iter().copied().find(|s| s.name == name)
    }

    /// Indices that always hold zero padding: the two trailing command slots
    /// of the current and every history frame, and the robot-info padding.
    pub fn constant_padding() -> Vec<usize> {
        let mut idx = Vec::new();
        for frame in 0..=HISTORY_LEN {
            let base = frame * PROPRIO_DIM;
            idx.extend(base + Self::COMMAND.offset + 1..base + Self::COMMAND.offset + 3);
        }
        idx.extend(Self::ROBOT.offset + 3..Self::ROBOT.offset + Self::ROBOT.len);
        idx
    }

    /// Padding indices restricted to one top-level span.
    pub fn padding_in(span: Span) -> Vec<usize> {
        Self::constant_padding()
            .into_iter()
            .filter(|i| span.range().contains(i))
            .collect()
    }
}

/// One proprioceptive frame before assembly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ProprioFrame {
    pub ang_vel: Vec<f64>,
    pub roll_pitch: Vec<f64>,
    /// Forward velocity command; padded with two zeros on assembly.
    pub command_vx: f64,
    pub joint_pos: Vec<f64>,
    pub joint_vel: Vec<f64>,
    pub last_action: Vec<f64>,
    pub contacts: Vec<f64>,
}

impl ProprioFrame {
    pub fn zeros() -> Self {
        Self {
            ang_vel: vec![0.0; 3],
            roll_pitch: vec![0.0; 2],
            command_vx: 0.0,
            joint_pos: vec![0.0; 12],
            joint_vel: vec![0.0; 12],
            last_action: vec![0.0; 12],
            contacts: vec![0.0; 4],
        }
    }

    pub fn to_vec(&self) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(PROPRIO_DIM);
        let command = [self.command_vx, 0.0, 0.0];
        let parts: [(&Span, &[f64]); 7] = [
            (&ObservationLayout::ANG_VEL, &self.ang_vel),
            (&ObservationLayout::ROLL_PITCH, &self.roll_pitch),
            (&ObservationLayout::COMMAND, &command),
            (&ObservationLayout::JOINT_POS, &self.joint_pos),
            (&ObservationLayout::JOINT_VEL, &self.joint_vel),
            (&ObservationLayout::LAST_ACTION, &self.last_action),
            (&ObservationLayout::CONTACTS, &self.contacts),
        ];
        for (span, values) in parts {
            check_len(span.name, span.len, values.len())?;
            out.extend_from_slice(values);
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObservationComponents {
    pub proprio: ProprioFrame,
    /// Ten assembled 48-wide frames, most recent first.
    pub history: Vec<Vec<f64>>,
    pub perception_latent: Vec<f64>,
    pub heading: Vec<f64>,
    pub phys_latent: Vec<f64>,
    /// Linear velocity; padded with six zeros on assembly.
    pub robot_velocity: Vec<f64>,
}

impl ObservationComponents {
    pub fn zeros() -> Self {
        Self {
            proprio: ProprioFrame::zeros(),
            history: vec![vec![0.0; PROPRIO_DIM]; HISTORY_LEN],
            perception_latent: vec![0.0; 32],
            heading: vec![0.0; 2],
            phys_latent: vec![0.0; 20],
            robot_velocity: vec![0.0; 3],
        }
    }
}

fn check_len(span: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected != found {
        return Err(Error::SpanLength {
            span,
            expected,
            found,
        });
    }
    Ok(())
}

/// A 591-wide observation vector.
#[derive(Clone, Debug, PartialEq)]
pub struct Observation(Vec<f64>);

impl Observation {
    pub fn from_vec(v: Vec<f64>) -> Result<Self> {
        check_len("observation", OBS_DIM, v.len())?;
        Ok(Self(v))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn span(&self, span: Span) -> &[f64] {
        &self.0[span.range()]
    }
}

/// Concatenates the components in layout order, applying the paddings.
pub fn assemble_observation(c: &ObservationComponents) -> Result<Observation> {
    let mut out = Vec::with_capacity(OBS_DIM);
    out.extend(c.proprio.to_vec()?);
    check_len(
        ObservationLayout::HISTORY.name,
        HISTORY_LEN,
        c.history.len(),
    )?;
    for frame in &c.history {
        check_len(ObservationLayout::HISTORY.name, PROPRIO_DIM, frame.len())?;
        out.extend_from_slice(frame);
    }
    for (span, values) in [
        (ObservationLayout::PERCEPTION, &c.perception_latent),
        (ObservationLayout::HEADING, &c.heading),
        (ObservationLayout::PHYS, &c.phys_latent),
    ] {
        check_len(span.name, span.len, values.len())?;
        out.extend_from_slice(values);
    }
    check_len(ObservationLayout::ROBOT.name, 3, c.robot_velocity.len())?;
    out.extend_from_slice(&c.robot_velocity);
    out.extend_from_slice(&[0.0; 6]);
    debug_assert_eq!(out.len(), OBS_DIM);
    Ok(Observation(out))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActorKind {
    Dense,
    Moe,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MoeSpec {
    pub n: usize,
    pub k: usize,
    pub w_importance: f64,
    /// Index into the hidden sizes of the layer built as an MoE layer.
    pub layer: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DensePreset {
    Small,
    Medium,
    Large,
    ExtraLarge,
}

impl DensePreset {
    pub const ALL: [DensePreset; 4] = [
        DensePreset::Small,
        DensePreset::Medium,
        DensePreset::Large,
        DensePreset::ExtraLarge,
    ];

    pub fn hidden(self) -> [usize; 3] {
        match self {
            DensePreset::Small => [256, 128, 64],
            DensePreset::Medium => [512, 256, 128],
            DensePreset::Large => [512, 512, 387],
            DensePreset::ExtraLarge => [1024, 620, 512],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            DensePreset::Small => "dense-small",
            DensePreset::Medium => "dense-medium",
            DensePreset::Large => "dense-large",
            DensePreset::ExtraLarge => "dense-xl",
        }
    }

    /// Published actor size, in parameters.
    pub fn reference_params(self) -> f64 {
        match self {
            DensePreset::Small => 0.2e6,
            DensePreset::Medium => 0.5e6,
            DensePreset::Large => 0.8e6,
            DensePreset::ExtraLarge => 1.6e6,
        }
    }

    pub fn spec(self) -> ActorSpec {
        ActorSpec::dense(self.name(), &self.hidden())
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "small" | "dense-small" => Some(DensePreset::Small),
            "medium" | "dense-medium" => Some(DensePreset::Medium),
            "large" | "dense-large" => Some(DensePreset::Large),
            "xl" | "extra-large" | "dense-xl" => Some(DensePreset::ExtraLarge),
            _ => None,
        }
    }
}

/// Published MoE actor sizes: total and active-at-inference parameters.
pub const MOE_REFERENCE_PARAMS: (f64, f64) = (1.6e6, 0.8e6);

#[derive(Clone, Debug, PartialEq)]
pub struct ActorSpec {
    pub name: String,
    pub hidden: Vec<usize>,
    pub input_dim: usize,
    pub output_dim: usize,
    pub moe: Option<MoeSpec>,
}

impl ActorSpec {
    pub fn dense(name: impl Into<String>, hidden: &[usize]) -> Self {
        Self {
            name: name.into(),
            hidden: hidden.to_vec(),
            input_dim: OBS_DIM,
            output_dim: ACTION_DIM,
            moe: None,
        }
    }

    /// 591 → 512 → [MoE 512→256, top-4 of 16] → 256 → 12.
    pub fn moe_default() -> Self {
        Self {
            name: "moe-top4-16".into(),
            hidden: vec![512, 256, 256],
            input_dim: OBS_DIM,
            output_dim: ACTION_DIM,
            moe: Some(MoeSpec {
                n: 16,
                k: 4,
                w_importance: 0.1,
                layer: 1,
            }),
        }
    }

    /// Default MoE actor with the expert output width changed.
    pub fn moe_with_expert_width(width: usize) -> Self {
        let mut spec = Self::moe_default();
        spec.hidden[1] = width;
        spec.name = format!("moe-top4-16-w{width}");
        spec
    }

    /// Default MoE actor whose expert width is chosen so the total parameter
    /// count lands as close as possible to `target_total`.
    pub fn moe_param_matched(target_total: usize) -> Self {
        let best = (1..=512)
            .min_by_key(|&w| {
                Self::moe_with_expert_width(w)
                    .param_report()
                    .total_params
                    .abs_diff(target_total)
            })
            .unwrap_or(256);
        Self::moe_with_expert_width(best)
    }

    /// Dense actor shaped like the extra-large preset and scaled so its total
    /// parameter count is as close as possible to `target_total`.
    pub fn dense_matched(name: impl Into<String>, target_total: usize) -> Self {
        let base = DensePreset::ExtraLarge.hidden();
        let shape = |s: f64| -> Vec<usize> {
            base.iter()
                .map(|&h| ((h as f64 * s).round() as usize).max(1))
                .collect()
        };
        let total = |s: f64| Self::dense("probe", &shape(s)).param_report().total_params;
        let (mut lo, mut hi) = (0.01, 16.0);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if total(mid) < target_total {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let s = if total(lo).abs_diff(target_total) <= total(hi).abs_diff(target_total) {
            lo
        } else {
            hi
        };
        Self::dense(name, &shape(s))
    }

    pub fn kind(&self) -> ActorKind {
        if self.moe.is_some() {
            ActorKind::Moe
        } else {
            ActorKind::Dense
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::invalid(format!(
                "actor `{}` has a non-positive dimension",
                self.name
            )));
        }
        if let Some(m) = &self.moe {
            if m.layer == 0 || m.layer >= self.hidden.len() {
                return Err(Error::invalid(
                    "the MoE layer must have a dense layer on each side",
                ));
            }
            if m.k == 0 || m.k > m.n {
                return Err(Error::TopKOutOfRange { k: m.k, n: m.n });
            }
        }
        Ok(())
    }

    /// `(in, out)` of every layer, head included.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut prev = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((prev, h));
            prev = h;
        }
        dims
    }

    /// Parameter accounting derived from the spec alone.
    pub fn param_report(&self) -> ParamReport {
        let layers = self
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (inp, out))| match &self.moe {
                Some(m) if m.layer == i => LayerParams::moe(inp, out, m.n, m.k),
                _ => LayerParams::linear(inp, out),
            })
            .collect();
        ParamReport::from_layers(layers)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerParams {
    pub description: String,
    pub weights: usize,
    pub biases: usize,
    pub total: usize,
    pub active: usize,
}

impl LayerParams {
    fn linear(inp: usize, out: usize) -> Self {
        Self {
            description: format!("linear {inp}->{out}"),
            weights: inp * out,
            biases: out,
            total: inp * out + out,
            active: inp * out + out,
        }
    }

    fn moe(inp: usize, out: usize, n: usize, k: usize) -> Self {
        let per_expert = inp * out;
        let total = 2 * inp * n + n * per_expert;
        Self {
            description: format!("moe {inp}->{out} top-{k}/{n}"),
            weights: total,
            biases: 0,
            total,
            active: total - (n - k) * per_expert,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub total_params: usize,
    pub active_params: usize,
    /// Totals with biases excluded.
    pub weight_only_total: usize,
    pub weight_only_active: usize,
    pub layers: Vec<LayerParams>,
}

impl ParamReport {
    fn from_layers(layers: Vec<LayerParams>) -> Self {
        let total_params = layers.iter().map(|l| l.total).sum();
        let active_params = layers.iter().map(|l| l.active).sum();
        let biases: usize = layers.iter().map(|l| l.biases).sum();
        Self {
            total_params,
            active_params,
            weight_only_total: total_params - biases,
            weight_only_active: active_params - biases,
            layers,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn new(weight: Matrix<T>, bias: Vec<T>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::DimensionMismatch {
                op: "Linear::new",
                expected: weight.cols(),
                found: bias.len(),
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Batch<T>) -> Result<Batch<T>> {
        affine(x, &self.weight, &self.bias)
    }
}

#[derive(Clone, Debug)]
pub enum Layer<T> {
    Linear(Linear<T>),
    Moe(MoeLayer<T>),
}

impl<T: Scalar> Layer<T> {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Layer::Linear(l) => (l.weight.rows(), l.weight.cols()),
            Layer::Moe(m) => (m.in_dim(), m.out_dim()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct PolicyOutput<T> {
    pub actions: Batch<T>,
    pub gates: Option<GateResult<T>>,
}

/// Per-layer values kept by [`PolicyNetwork::forward_trace`].
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    /// Input to each layer (post-activation of the previous one).
    pub inputs: Vec<Batch<T>>,
    /// Output of each layer before the activation.
    pub pre_activations: Vec<Batch<T>>,
    pub gates: Option<GateResult<T>>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn actions(&self) -> &Batch<T> {
        self.pre_activations.last().expect("network has a head")
    }
}

#[derive(Clone, Debug)]
pub struct PolicyNetwork<T> {
    spec: ActorSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> PolicyNetwork<T> {
    /// Random initialization: dense weights and biases uniform in
    /// `±1/√fan_in`, MoE layers as in [`MoeLayer::new`].
    pub fn build(spec: &ActorSpec, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let mut layers = Vec::new();
        for (i, (inp, out)) in spec.layer_dims().into_iter().enumerate() {
            let layer = match &spec.moe {
                Some(m) if m.layer == i => Layer::Moe(MoeLayer::new(inp, out, m.n, m.k, rng)?),
                _ => {
                    let bound = (1.0 / inp as f64).sqrt();
                    let weight = Matrix::uniform(inp, out, bound, rng);
                    let bias = (0..out)
                        .map(|_| T::lit(rng.uniform_range(-bound, bound)))
                        .collect();
                    Layer::Linear(Linear::new(weight, bias)?)
                }
            };
            layers.push(layer);
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// All parameters zero. Gates are then uniform and every action is zero.
    pub fn zeros(spec: &ActorSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(i, (inp, out))| match &spec.moe {
                Some(m) if m.layer == i => MoeLayer::from_parts(
                    Matrix::zeros(inp, m.n),
                    Matrix::zeros(inp, m.n),
                    vec![Matrix::zeros(inp, out); m.n],
                    m.k,
                )
                .map(Layer::Moe),
                _ => Linear::new(Matrix::zeros(inp, out), vec![T::zero(); out]).map(Layer::Linear),
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// Assemble from existing layers, checking them against the spec.
    pub fn from_layers(spec: ActorSpec, layers: Vec<Layer<T>>) -> Result<Self> {
        spec.validate()?;
        let dims = spec.layer_dims();
        if dims.len() != layers.len() {
            return Err(Error::invalid(format!(
                "spec has {} layers, got {}",
                dims.len(),
                layers.len()
            )));
        }
        for (i, (layer, want)) in layers.iter().zip(&dims).enumerate() {
            let is_moe = matches!(layer, Layer::Moe(_));
            let want_moe = spec.moe.is_some_and(|m| m.layer == i);
            if is_moe != want_moe || layer.dims() != *want {
                return Err(Error::invalid(format!("layer {i} does not match the spec")));
            }
            if let (Layer::Moe(l), Some(m)) = (layer, &spec.moe) {
                if l.n() != m.n || l.k() != m.k {
                    return Err(Error::invalid(format!("layer {i} expert counts differ from the spec")));
                }
            }
        }
        Ok(Self { spec, layers })
    }

    pub fn spec(&self) -> &ActorSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    pub fn moe_layer(&self) -> Option<&MoeLayer<T>> {
        self.layers.iter().find_map(|l| match l {
            Layer::Moe(m) => Some(m),
            Layer::Linear(_) => None,
        })
    }

    pub fn count_params(&self) -> ParamReport {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Linear(lin) => LayerParams::linear(lin.weight.rows(), lin.weight.cols()),
                Layer::Moe(m) => LayerParams::moe(m.in_dim(), m.out_dim(), m.n(), m.k()),
            })
            .collect();
        ParamReport::from_layers(layers)
    }

    /// Deterministic mean action for a batch of observations. MoE layers gate
    /// without noise.
    pub fn forward_policy(&self, obs: &Batch<T>) -> Result<PolicyOutput<T>> {
        self.check_input(obs)?;
        let alpha = T::one();
        let last = self.layers.len() - 1;
        let mut x = obs.clone();
        let mut gates = None;
        for (i, layer) in self.layers.iter().enumerate() {
            x = match layer {
                Layer::Linear(l) => l.forward(&x)?,
                Layer::Moe(m) => {
                    let (y, g) = m.forward_inference(&x)?;
                    gates = Some(g);
                    y
                }
            };
            if i != last {
                elu_in_place(&mut x, alpha);
            }
        }
        Ok(PolicyOutput { actions: x, gates })
    }

    /// Like [`PolicyNetwork::forward_policy`] but keeps every intermediate.
    pub fn forward_trace(&self, obs: &Batch<T>) -> Result<ForwardTrace<T>> {
        self.check_input(obs)?;
        let last = self.layers.len() - 1;
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut gates = None;
        let mut x = obs.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = match layer {
                Layer::Linear(l) => l.forward(&x)?,
                Layer::Moe(m) => {
                    let (y, g) = m.forward_inference(&x)?;
                    gates = Some(g);
                    y
                }
            };
            inputs.push(x);
            x = z.clone();
            if i != last {
                elu_in_place(&mut x, T::one());
            }
            pre.push(z);
        }
        Ok(ForwardTrace {
            inputs,
            pre_activations: pre,
            gates,
        })
    }

    fn check_input(&self, obs: &Batch<T>) -> Result<()> {
        if obs.dim() != self.spec.input_dim {
            return Err(Error::DimensionMismatch {
                op: "forward_policy",
                expected: self.spec.input_dim,
                found: obs.dim(),
            });
        }
        Ok(())
    }
}
