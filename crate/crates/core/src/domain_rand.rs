//! Domain-randomization samplers and observation noise.
//!
//! [`table`] lists every randomized quantity with its distribution. The
//! camera and FOV rows have no consumer here since nothing is rendered.

use std::fmt;

use crate::policy::{Observation, ObservationLayout, Span};
use crate::rng::Rng;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Distribution {
    Uniform { low: f64, high: f64 },
    Gaussian { mean: f64, sigma: f64 },
    Binomial { p: f64 },
}

impl Distribution {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            Distribution::Uniform { low, high } => low.is_finite() && high.is_finite() && low <= high,
            Distribution::Gaussian { mean, sigma } => mean.is_finite() && sigma.is_finite() && sigma >= 0.0,
            Distribution::Binomial { p } => (0.0..=1.0).contains(&p),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid distribution {self:?}")))
        }
    }

    pub fn sample(&self, rng: &mut Rng) -> Sample {
        match *self {
            Distribution::Uniform { low, high } => Sample::Real(rng.uniform_range(low, high)),
            Distribution::Gaussian { mean, sigma } => Sample::Real(rng.gaussian(mean, sigma)),
            Distribution::Binomial { p } => Sample::Bool(rng.bernoulli(p)),
        }
    }

    fn type_tag(&self) -> char {
        match self {
            Distribution::Uniform { .. } => 'u',
            Distribution::Gaussian { .. } => 'g',
            Distribution::Binomial { .. } => 'b',
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Sample {
    Real(f64),
    Bool(bool),
}

impl Sample {
    pub fn as_f64(self) -> f64 {
        match self {
            Sample::Real(v) => v,
            Sample::Bool(b) => f64::from(u8::from(b)),
        }
    }
}

impl fmt::Display for Sample {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Sample::Real(v) => write!(f, "{v}"),
            Sample::Bool(b) => write!(f, "{b}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RandSpec {
    pub name: String,
    pub dist: Distribution,
}

impl RandSpec {
    pub fn new(name: impl Into<String>, dist: Distribution) -> Result<Self> {
        dist.validate()?;
        Ok(Self {
            name: name.into(),
            dist,
        })
    }
}

/// One draw from a validated spec.
pub fn sample(spec: &RandSpec, rng: &mut Rng) -> Result<Sample> {
    spec.dist.validate()?;
    Ok(spec.dist.sample(rng))
}

fn u(name: &str, low: f64, high: f64) -> RandSpec {
    RandSpec {
        name: name.into(),
        dist: Distribution::Uniform { low, high },
    }
}

fn g(name: &str, mean: f64, sigma: f64) -> RandSpec {
    RandSpec {
        name: name.into(),
        dist: Distribution::Gaussian { mean, sigma },
    }
}

fn b(name: &str, p: f64) -> RandSpec {
    RandSpec {
        name: name.into(),
        dist: Distribution::Binomial { p },
    }
}

/// The full randomization table. Angles in degrees for the camera rows,
/// radians elsewhere; lengths in meters, mass in kilograms.
pub fn table() -> Vec<RandSpec> {
    vec![
        g("rotation", 0.0, 0.025),
        g("joint_pos", 0.0, 0.01),
        g("joint_vel", 0.0, 1.5),
        g("ang_vel", 0.0, 0.2),
        b("foot_contact", 0.05),
        g("cam_x_pos", 0.32, 0.01),
        g("cam_y_pos", -0.0175, 0.0025),
        g("cam_z_pos", 0.15, 0.02),
        u("cam_x_rot", -1.0, 1.0),
        u("cam_y_rot", 21.2, 24.6),
        u("cam_z_rot", -1.0, 1.0),
        u("horizontal_fov", 85.0, 89.0),
        b("depth_artifact", 0.001),
        g("depth_artifact_height", 3.0, 3.0),
        g("depth_artifact_width", 3.0, 3.0),
        b("contour_artifact", 0.1),
        u("gaussian_blur_sigma", 0.1, 2.0),
        u("v_x_target", 0.3, 0.8),
        u("friction", 0.6, 2.0),
        u("com", -0.2, 0.2),
        u("mass", 0.0, 3.0),
        u("motor", 0.8, 1.2),
    ]
}

pub fn lookup<'a>(specs: &'a [RandSpec], name: &str) -> Result<&'a RandSpec> {
    specs
        .iter()
        .find(|s| s.name == name)
        .ok_or_else(|| Error::invalid(format!("no randomization entry named {name:?}")))
}

const COLUMNS: [&str; 7] = ["name", "type", "l", "h", "mu", "sigma", "p"];

/// Renders specs in the whitespace-separated table format read by
/// [`parse_table`].
pub fn format_table(specs: &[RandSpec]) -> String {
    let mut out = COLUMNS.join(" ");
    out.push('\n');
    for s in specs {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| v.to_string());
        let (l, h, mu, sigma, p) = match s.dist {
            Distribution::Uniform { low, high } => (Some(low), Some(high), None, None, None),
            Distribution::Gaussian { mean, sigma } => (None, None, Some(mean), Some(sigma), None),
            Distribution::Binomial { p } => (None, None, None, None, Some(p)),
        };
        out.push_str(&format!(
            "{} {} {} {} {} {} {}\n",
            s.name,
            s.dist.type_tag(),
            cell(l),
            cell(h),
            cell(mu),
            cell(sigma),
            cell(p)
        ));
    }
    out
}

/// Parses a table with columns `name type l h mu sigma p`. `type` is one of
/// `u`, `g`, `b`; unused cells hold `-`. Blank lines and `#` comments are
/// skipped, as is a header line starting with `name`.
pub fn parse_table(text: &str) -> Result<Vec<RandSpec>> {
    let mut specs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split_whitespace().collect();
        if cells[0] == "name" {
            continue;
        }
        let at = |msg: String| Error::invalid(format!("line {}: {msg}", lineno + 1));
        if cells.len() != COLUMNS.len() {
            return Err(at(format!("expected {} columns, found {}", COLUMNS.len(), cells.len())));
        }
        let num = |i: usize| -> Result<f64> {
            cells[i]
                .parse()
                .map_err(|_| at(format!("column {} must be a number, found {:?}", COLUMNS[i], cells[i])))
        };
        let dist = match cells[1] {
            "u" => Distribution::Uniform {
                low: num(2)?,
                high: num(3)?,
            },
            "g" => Distribution::Gaussian {
                mean: num(4)?,
                sigma: num(5)?,
            },
            "b" => Distribution::Binomial { p: num(6)? },
            other => return Err(at(format!("unknown distribution type {other:?}"))),
        };
        dist.validate().map_err(|e| at(e.to_string()))?;
        specs.push(RandSpec {
            name: cells[0].to_string(),
            dist,
        });
    }
    Ok(specs)
}

/// Per-step proprioceptive noise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseProfile {
    pub rotation: f64,
    pub joint_pos: f64,
    pub joint_vel: f64,
    pub ang_vel: f64,
    pub contact_flip: f64,
}

impl Default for NoiseProfile {
    fn default() -> Self {
        Self {
            rotation: 0.025,
            joint_pos: 0.01,
            joint_vel: 1.5,
            ang_vel: 0.2,
            contact_flip: 0.05,
        }
    }
}

impl NoiseProfile {
    pub fn zero() -> Self {
        Self {
            rotation: 0.0,
            joint_pos: 0.0,
            joint_vel: 0.0,
            ang_vel: 0.0,
            contact_flip: 0.0,
        }
    }

    pub fn from_table(specs: &[RandSpec]) -> Result<Self> {
        let sigma = |name: &str| match lookup(specs, name)?.dist {
            Distribution::Gaussian { sigma, .. } => Ok(sigma),
            other => Err(Error::invalid(format!("{name} must be Gaussian, found {other:?}"))),
        };
        let p = match lookup(specs, "foot_contact")?.dist {
            Distribution::Binomial { p } => p,
            other => return Err(Error::invalid(format!("foot_contact must be binomial, found {other:?}"))),
        };
        Ok(Self {
            rotation: sigma("rotation")?,
            joint_pos: sigma("joint_pos")?,
            joint_vel: sigma("joint_vel")?,
            ang_vel: sigma("ang_vel")?,
            contact_flip: p,
        })
    }
}

/// Adds zero-mean Gaussian noise to the current frame's angular velocity,
/// roll/pitch, joint positions and joint velocities, and flips each contact
/// flag independently. History frames and every other span are untouched.
/// Contacts read as set when above 0.5 and are written back as 0 or 1.
pub fn noise_observation(obs: &Observation, profile: &NoiseProfile, rng: &mut Rng) -> Observation {
    let mut out = obs.clone();
    let v = out.as_mut_slice();
    let base = ObservationLayout::PROPRIO.offset;
    let mut jitter = |span: Span, sigma: f64, rng: &mut Rng| {
        for x in &mut v[base + span.offset..base + span.offset + span.len] {
            *x += rng.gaussian(0.0, sigma);
        }
    };
    jitter(ObservationLayout::ANG_VEL, profile.ang_vel, rng);
    jitter(ObservationLayout::ROLL_PITCH, profile.rotation, rng);
    jitter(ObservationLayout::JOINT_POS, profile.joint_pos, rng);
    jitter(ObservationLayout::JOINT_VEL, profile.joint_vel, rng);
    let c = ObservationLayout::CONTACTS;
    for x in &mut v[base + c.offset..base + c.offset + c.len] {
        if rng.bernoulli(profile.contact_flip) {
            *x = if *x > 0.5 { 0.0 } else { 1.0 };
        }
    }
    out
}

/// Privileged physics parameters drawn once per episode.
#[derive(Clone, Debug, PartialEq)]
pub struct PhysicsSample {
    pub com_offset: [f64; 3],
    pub mass_offset: f64,
    pub friction: f64,
    /// Two gains per joint.
    pub motor_strength: [f64; 24],
    pub command_vx: f64,
}

pub fn sample_physics(rng: &mut Rng) -> PhysicsSample {
    PhysicsSample {
        com_offset: std::array::from_fn(|_| rng.uniform_range(-0.2, 0.2)),
        mass_offset: rng.uniform_range(0.0, 3.0),
        friction: rng.uniform_range(0.6, 2.0),
        motor_strength: std::array::from_fn(|_| rng.uniform_range(0.8, 1.2)),
        command_vx: rng.uniform_range(0.3, 0.8),
    }
}
