//! Locomotion reward terms, their weighted sum and reward flooring.
//!
//! Every term is a pure function of a [`RewardState`]. Fields are optional so
//! that replayed logs may omit what a subset of terms needs; evaluating a
//! term whose inputs are absent fails with [`Error::MissingField`].

use std::fmt::Write as _;

use crate::{Error, Result};

/// Control period in seconds (50 Hz).
pub const DT: f64 = 0.02;

/// Boolean grid over the ground plane marking cells near an edge.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeMap {
    pub origin: [f64; 2],
    pub resolution: f64,
    pub width: usize,
    pub height: usize,
    pub cells: Vec<bool>,
}

impl EdgeMap {
    pub fn new(origin: [f64; 2], resolution: f64, width: usize, height: usize, cells: Vec<bool>) -> Result<Self> {
        if !(resolution > 0.0) || cells.len() != width * height {
            return Err(Error::invalid("edge map needs a positive resolution and width*height cells"));
        }
        Ok(Self {
            origin,
            resolution,
            width,
            height,
            cells,
        })
    }

    /// False outside the mapped area.
    pub fn is_edge(&self, p: [f64; 3]) -> bool {
        let cx = ((p[0] - self.origin[0]) / self.resolution).floor();
        let cy = ((p[1] - self.origin[1]) / self.resolution).floor();
        if cx < 0.0 || cy < 0.0 || cx >= self.width as f64 || cy >= self.height as f64 {
            return false;
        }
        self.cells[cy as usize * self.width + cx as usize]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RewardState {
    pub yaw: Option<f64>,
    pub yaw_goal: Option<f64>,
    pub lin_vel: Option<[f64; 3]>,
    pub ang_vel: Option<[f64; 3]>,
    pub projected_gravity: Option<[f64; 3]>,
    pub dof_pos: Option<Vec<f64>>,
    pub dof_vel: Option<Vec<f64>>,
    pub dof_vel_prev: Option<Vec<f64>>,
    pub actions: Option<Vec<f64>>,
    pub actions_prev: Option<Vec<f64>>,
    pub torques: Option<Vec<f64>>,
    pub torques_prev: Option<Vec<f64>>,
    /// Contact force on every body of the robot model.
    pub contact_forces: Option<Vec<[f64; 3]>>,
    /// Indices into `contact_forces`.
    pub collision_bodies: Option<Vec<usize>>,
    /// Indices into `contact_forces`, one per foot.
    pub feet_bodies: Option<Vec<usize>>,
    pub foot_positions: Option<Vec<[f64; 3]>>,
    pub foot_contacts: Option<Vec<bool>>,
    pub edge_map: Option<EdgeMap>,
    pub default_dof_pos: Option<Vec<f64>>,
    pub hip_indices: Option<Vec<usize>>,
    pub robot_pos: Option<[f64; 3]>,
    pub goal_pos: Option<[f64; 3]>,
    pub v_x_target: Option<f64>,
    pub walking_env: Option<bool>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Term {
    TrackingYaw,
    LinVelZ,
    AngVelXy,
    Orientation,
    DofAcc,
    Collision,
    ActionRate,
    DeltaTorques,
    Torques,
    HipPos,
    DofError,
    FeetStumble,
    FeetEdge,
    TrackingGoalVel,
}

impl Term {
    pub const ALL: [Term; 14] = [
        Term::TrackingYaw,
        Term::LinVelZ,
        Term::AngVelXy,
        Term::Orientation,
        Term::DofAcc,
        Term::Collision,
        Term::ActionRate,
        Term::DeltaTorques,
        Term::Torques,
        Term::HipPos,
        Term::DofError,
        Term::FeetStumble,
        Term::FeetEdge,
        Term::TrackingGoalVel,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Term::TrackingYaw => "tracking_yaw",
            Term::LinVelZ => "lin_vel_z",
            Term::AngVelXy => "ang_vel_xy",
            Term::Orientation => "orientation",
            Term::DofAcc => "dof_acc",
            Term::Collision => "collision",
            Term::ActionRate => "action_rate",
            Term::DeltaTorques => "delta_torques",
            Term::Torques => "torques",
            Term::HipPos => "hip_pos",
            Term::DofError => "dof_error",
            Term::FeetStumble => "feet_stumble",
            Term::FeetEdge => "feet_edge",
            Term::TrackingGoalVel => "tracking_goal_vel",
        }
    }

    pub fn coefficient(self) -> f64 {
        match self {
            Term::TrackingYaw => 0.5,
            Term::LinVelZ => -1.5,
            Term::AngVelXy => -0.05,
            Term::Orientation => -1.0,
            Term::DofAcc => -2.5e-7,
            Term::Collision => -10.0,
            Term::ActionRate => -0.1,
            Term::DeltaTorques => -1.0e-7,
            Term::Torques => -1e-5,
            Term::HipPos => -0.5,
            Term::DofError => -0.04,
            Term::FeetStumble => -1.0,
            Term::FeetEdge => -1.0,
            Term::TrackingGoalVel => 1.5,
        }
    }

    pub fn parse(name: &str) -> Option<Term> {
        Term::ALL.into_iter().find(|t| t.name() == name)
    }
}

fn need<'a, T>(term: Term, field: &'static str, v: &'a Option<T>) -> Result<&'a T> {
    v.as_ref().ok_or(Error::MissingField {
        term: term.name(),
        field,
    })
}

fn same_len(term: Term, field: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "{}: {field} has {} entries, expected {}",
            term.name(),
            b.len(),
            a.len()
        )));
    }
    Ok(())
}

fn sq_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn body(term: Term, forces: &[[f64; 3]], i: usize) -> Result<&[f64; 3]> {
    forces.get(i).ok_or_else(|| {
        Error::invalid(format!(
            "{}: body index {i} outside {} contact forces",
            term.name(),
            forces.len()
        ))
    })
}

/// Raw (unweighted) value of one term.
pub fn reward_term(term: Term, s: &RewardState) -> Result<f64> {
    use Term::*;
    let t = term;
    Ok(match term {
        TrackingYaw => {
            let goal = need(t, "yaw_goal", &s.yaw_goal)?;
            let yaw = need(t, "yaw", &s.yaw)?;
            (-(goal - yaw).abs()).exp()
        }
        LinVelZ => {
            let vz = need(t, "lin_vel", &s.lin_vel)?[2];
            if *need(t, "walking_env", &s.walking_env)? {
                vz
            } else {
                0.5 * vz
            }
        }
        AngVelXy => {
            let w = need(t, "ang_vel", &s.ang_vel)?;
            w[0] * w[0] + w[1] * w[1]
        }
        Orientation => {
            if *need(t, "walking_env", &s.walking_env)? {
                let g = need(t, "projected_gravity", &s.projected_gravity)?;
                g[0] * g[0] + g[1] * g[1]
            } else {
                0.0
            }
        }
        DofAcc => {
            let v = need(t, "dof_vel", &s.dof_vel)?;
            let p = need(t, "dof_vel_prev", &s.dof_vel_prev)?;
            same_len(t, "dof_vel_prev", v, p)?;
            v.iter().zip(p).map(|(a, b)| ((a - b) / DT).powi(2)).sum()
        }
        Collision => {
            let f = need(t, "contact_forces", &s.contact_forces)?;
            let mut hits = 0.0;
            for &j in need(t, "collision_bodies", &s.collision_bodies)? {
                let fj = body(t, f, j)?;
                if (fj[0] * fj[0] + fj[1] * fj[1] + fj[2] * fj[2]).sqrt() > 0.1 {
                    hits += 1.0;
                }
            }
            hits
        }
        ActionRate => {
            let a = need(t, "actions", &s.actions)?;
            let p = need(t, "actions_prev", &s.actions_prev)?;
            same_len(t, "actions_prev", a, p)?;
            sq_diff(a, p).sqrt()
        }
        DeltaTorques => {
            let a = need(t, "torques", &s.torques)?;
            let p = need(t, "torques_prev", &s.torques_prev)?;
            same_len(t, "torques_prev", a, p)?;
            sq_diff(a, p)
        }
        Torques => need(t, "torques", &s.torques)?.iter().map(|x| x * x).sum(),
        HipPos => {
            let q = need(t, "dof_pos", &s.dof_pos)?;
            let w = need(t, "default_dof_pos", &s.default_dof_pos)?;
            same_len(t, "default_dof_pos", q, w)?;
            let mut acc = 0.0;
            for &i in need(t, "hip_indices", &s.hip_indices)? {
                if i >= q.len() {
                    return Err(Error::invalid(format!("hip_pos: joint index {i} out of range")));
                }
                acc += (q[i] - w[i]).powi(2);
            }
            acc
        }
        DofError => {
            let q = need(t, "dof_pos", &s.dof_pos)?;
            let w = need(t, "default_dof_pos", &s.default_dof_pos)?;
            same_len(t, "default_dof_pos", q, w)?;
            sq_diff(q, w)
        }
        FeetStumble => {
            let f = need(t, "contact_forces", &s.contact_forces)?;
            let mut stumble = false;
            for &j in need(t, "feet_bodies", &s.feet_bodies)? {
                let fj = body(t, f, j)?;
                stumble |= fj[0].hypot(fj[1]) > 4.0 * fj[2].abs();
            }
            f64::from(u8::from(stumble))
        }
        FeetEdge => {
            let c = need(t, "foot_contacts", &s.foot_contacts)?;
            let p = need(t, "foot_positions", &s.foot_positions)?;
            let m = need(t, "edge_map", &s.edge_map)?;
            if c.len() != p.len() {
                return Err(Error::invalid("feet_edge: foot_contacts and foot_positions differ in length"));
            }
            c.iter()
                .zip(p)
                .filter(|(&ci, &pi)| ci && m.is_edge(pi))
                .count() as f64
        }
        TrackingGoalVel => tracking_goal_vel(s)?,
    })
}

/// `min(⟨v, d̂⟩, v_x_target)` with `d̂` the horizontal unit vector from the
/// robot towards the goal.
pub fn tracking_goal_vel(s: &RewardState) -> Result<f64> {
    let t = Term::TrackingGoalVel;
    let v = need(t, "lin_vel", &s.lin_vel)?;
    let robot = need(t, "robot_pos", &s.robot_pos)?;
    let goal = need(t, "goal_pos", &s.goal_pos)?;
    let target = *need(t, "v_x_target", &s.v_x_target)?;
    let d = [goal[0] - robot[0], goal[1] - robot[1]];
    let norm = d[0].hypot(d[1]);
    if norm == 0.0 {
        return Err(Error::invalid("tracking_goal_vel: robot is at the goal, direction undefined"));
    }
    let along = (v[0] * d[0] + v[1] * d[1]) / norm;
    Ok(along.min(target))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermValue {
    pub term: Term,
    pub raw: f64,
    pub coefficient: f64,
    pub weighted: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RewardBreakdown {
    pub terms: Vec<TermValue>,
    pub total: f64,
    pub floored_total: f64,
}

impl RewardBreakdown {
    pub fn get(&self, term: Term) -> Option<&TermValue> {
        self.terms.iter().find(|v| v.term == term)
    }
}

pub fn step_reward(s: &RewardState) -> Result<RewardBreakdown> {
    let mut terms = Vec::with_capacity(Term::ALL.len());
    for term in Term::ALL {
        let raw = reward_term(term, s)?;
        let coefficient = term.coefficient();
        terms.push(TermValue {
            term,
            raw,
            coefficient,
            weighted: coefficient * raw,
        });
    }
    let total = terms.iter().map(|v| v.weighted).sum::<f64>();
    Ok(RewardBreakdown {
        terms,
        total,
        floored_total: total.max(0.0),
    })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum FlooringMode {
    /// Each step's summed reward is floored at zero.
    #[default]
    PerStep,
    /// Steps are summed unfloored and only the episode return is floored.
    Trajectory,
}

pub fn trajectory_return(steps: &[RewardBreakdown], mode: FlooringMode) -> f64 {
    match mode {
        FlooringMode::PerStep => steps.iter().map(|b| b.floored_total).sum(),
        FlooringMode::Trajectory => steps.iter().map(|b| b.total).sum::<f64>().max(0.0),
    }
}

/// Long-format CSV: one row per step and term, then the totals.
pub fn breakdown_csv(steps: &[RewardBreakdown]) -> String {
    let mut out = String::from("step,term,raw,coefficient,weighted\n");
    for (i, b) in steps.iter().enumerate() {
        for v in &b.terms {
            let _ = writeln!(out, "{i},{},{},{},{}", v.term.name(), v.raw, v.coefficient, v.weighted);
        }
        let _ = writeln!(out, "{i},total,,,{}", b.total);
        let _ = writeln!(out, "{i},floored_total,,,{}", b.floored_total);
    }
    out
}

/// Parses a trajectory log.
///
/// Each line is `key: v1 v2 ...`; `#` starts a comment and a line holding
/// `---` ends a step. A step inherits every field of the previous step that
/// it does not set, so static data (default pose, edge map, body indices)
/// need only appear once. Keys:
///
/// ```text
/// yaw yaw_goal v_x_target                 scalar
/// walking_env                             0 or 1
/// lin_vel ang_vel projected_gravity       3 values
/// robot_pos goal_pos                      3 values
/// dof_pos dof_vel dof_vel_prev            12 values
/// actions actions_prev torques torques_prev default_dof_pos
/// contact_forces foot_positions           flat x y z triples
/// collision_bodies feet_bodies hip_indices  body or joint indices
/// foot_contacts                           0 or 1 per foot
/// edge_map                                ox oy resolution width height cell...
/// obs                                     ignored (raw observation)
/// ```
pub fn parse_trajectory(text: &str) -> Result<Vec<RewardState>> {
    let mut steps = Vec::new();
    let mut cur = RewardState::default();
    let mut dirty = false;
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let err = |msg: String| Error::invalid(format!("line {}: {msg}", lineno + 1));
        if line == "---" {
            if dirty {
                steps.push(cur.clone());
                dirty = false;
            }
            continue;
        }
        let (key, rest) = line
            .split_once(':')
            .ok_or_else(|| err(format!("expected `key: values`, found {line:?}")))?;
        let key = key.trim();
        let nums: Vec<f64> = rest
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| err(format!("{key}: {t:?} is not a number"))))
            .collect::<Result<_>>()?;
        let scalar = || -> Result<f64> {
            match nums[..] {
                [v] => Ok(v),
                _ => Err(err(format!("{key} takes one value, found {}", nums.len()))),
            }
        };
        let triple = || -> Result<[f64; 3]> {
            <[f64; 3]>::try_from(nums.as_slice()).map_err(|_| err(format!("{key} takes 3 values, found {}", nums.len())))
        };
        let triples = || -> Result<Vec<[f64; 3]>> {
            if !nums.len().is_multiple_of(3) {
                return Err(err(format!("{key} takes x y z triples, found {} values", nums.len())));
            }
            Ok(nums.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
        };
        let indices = || -> Result<Vec<usize>> {
            nums.iter()
                .map(|&v| {
                    if v >= 0.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(err(format!("{key}: {v} is not an index")))
                    }
                })
                .collect()
        };
        let flags = || -> Result<Vec<bool>> {
            nums.iter()
                .map(|&v| match v {
                    0.0 => Ok(false),
                    1.0 => Ok(true),
                    _ => Err(err(format!("{key}: {v} is not 0 or 1"))),
                })
                .collect()
        };
        match key {
            "yaw" => cur.yaw = Some(scalar()?),
            "yaw_goal" => cur.yaw_goal = Some(scalar()?),
            "v_x_target" => cur.v_x_target = Some(scalar()?),
            "walking_env" => {
                cur.walking_env = Some(match flags()?[..] {
                    [b] => b,
                    _ => return Err(err("walking_env takes one flag".into())),
                })
            }
            "lin_vel" => cur.lin_vel = Some(triple()?),
            "ang_vel" => cur.ang_vel = Some(triple()?),
            "projected_gravity" => cur.projected_gravity = Some(triple()?),
            "robot_pos" => cur.robot_pos = Some(triple()?),
            "goal_pos" => cur.goal_pos = Some(triple()?),
            "dof_pos" => cur.dof_pos = Some(nums.clone()),
            "dof_vel" => cur.dof_vel = Some(nums.clone()),
            "dof_vel_prev" => cur.dof_vel_prev = Some(nums.clone()),
            "actions" => cur.actions = Some(nums.clone()),
            "actions_prev" => cur.actions_prev = Some(nums.clone()),
            "torques" => cur.torques = Some(nums.clone()),
            "torques_prev" => cur.torques_prev = Some(nums.clone()),
            "default_dof_pos" => cur.default_dof_pos = Some(nums.clone()),
            "contact_forces" => cur.contact_forces = Some(triples()?),
            "foot_positions" => cur.foot_positions = Some(triples()?),
            "collision_bodies" => cur.collision_bodies = Some(indices()?),
            "feet_bodies" => cur.feet_bodies = Some(indices()?),
            "hip_indices" => cur.hip_indices = Some(indices()?),
            "foot_contacts" => cur.foot_contacts = Some(flags()?),
            "edge_map" => {
                if nums.len() < 5 {
                    return Err(err("edge_map needs ox oy resolution width height cells".into()));
                }
                let (w, h) = (nums[3] as usize, nums[4] as usize);
                let cells = nums[5..].iter().map(|&v| v != 0.0).collect();
                cur.edge_map = Some(EdgeMap::new([nums[0], nums[1]], nums[2], w, h, cells).map_err(|e| err(e.to_string()))?);
            }
            "obs" => {}
            other => return Err(err(format!("unknown key {other:?}"))),
        }
        dirty = true;
    }
    if dirty {
        steps.push(cur);
    }
    Ok(steps)
}
