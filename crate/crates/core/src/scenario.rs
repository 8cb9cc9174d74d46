//! Scenario files: TOML schema, validation, normalized dumps, dotted-path
//! overrides and the bundled mission scenarios.
//!
//! Files use 1-based agent numbers and degrees. The in-memory [`Scenario`]
//! uses 0-based indices; angles stay in degrees until converted by
//! [`WaypointSpec::to_waypoint`] and [`SimSpec::to_config`].

use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::allocation::AllocationMode;
use crate::constraint::{rigidity_check, BaumgarteGains, ConstraintSet, DistanceConstraint, ParticleSystem, RigidityReport, SolveMode};
use crate::dynamics::FrameSpec;
use crate::guidance::{Hold, LqrWeights, Waypoint};
use crate::sim::SimConfig;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error: {0}")]
    Parse(String),
    #[error("invalid scenario at `{path}`: {message}")]
    Validation { path: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn invalid(path: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Validation {
        path: path.into(),
        message: message.into(),
    }
}

const BUNDLED: &[(&str, &str)] = &[
    ("triangle_establish", include_str!("../scenarios/triangle_establish.toml")),
    ("table2_mission", include_str!("../scenarios/table2_mission.toml")),
    ("table3_mission", include_str!("../scenarios/table3_mission.toml")),
    ("cube_establish", include_str!("../scenarios/cube_establish.toml")),
    ("cube_waypoint", include_str!("../scenarios/cube_waypoint.toml")),
    ("two_agent_line", include_str!("../scenarios/two_agent_line.toml")),
    ("four_agent_square", include_str!("../scenarios/four_agent_square.toml")),
    ("five_agent_pyramid", include_str!("../scenarios/five_agent_pyramid.toml")),
    ("six_agent_hexagon", include_str!("../scenarios/six_agent_hexagon.toml")),
];

pub fn bundled_names() -> impl Iterator<Item = &'static str> {
    BUNDLED.iter().map(|(n, _)| *n)
}

pub fn bundled(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Reads a bundled scenario by name, or a file by path.
pub fn load_text(name_or_path: &str) -> Result<String, ScenarioError> {
    if let Some(t) = bundled(name_or_path) {
        return Ok(t.to_string());
    }
    std::fs::read_to_string(Path::new(name_or_path)).map_err(|source| ScenarioError::Io {
        path: name_or_path.to_string(),
        source,
    })
}

// ---------------------------------------------------------------- file schema

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileScenario {
    name: String,
    #[serde(default)]
    description: String,
    #[serde(default = "default_gravity")]
    gravity: f64,
    #[serde(default)]
    ground: bool,
    #[serde(default)]
    partial: bool,
    agents: Vec<FileAgent>,
    constraints: FileConstraints,
    frame: FileFrame,
    #[serde(default)]
    control: FileControl,
    #[serde(default)]
    waypoints: Vec<FileWaypoint>,
    #[serde(default)]
    sim: SimSpec,
}

fn default_gravity() -> f64 {
    9.81
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileAgent {
    mass: f64,
    position: [f64; 3],
    #[serde(default)]
    velocity: [f64; 3],
    #[serde(default)]
    input: [f64; 3],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConstraints {
    pairs: Vec<[usize; 2]>,
    phases: Vec<FilePhase>,
    #[serde(default)]
    gains: FileGains,
    #[serde(default = "default_solve")]
    solve: String,
    #[serde(default = "default_kappa")]
    taper_kappa: f64,
}

fn default_solve() -> String {
    "tapered".into()
}

fn default_kappa() -> f64 {
    1e-3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePhase {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    on_waypoint: Option<String>,
    distances: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct FileGains {
    alpha: f64,
    beta: f64,
    gamma: f64,
}

impl Default for FileGains {
    fn default() -> Self {
        let g = BaumgarteGains::default();
        Self {
            alpha: g.alpha,
            beta: g.beta,
            gamma: g.gamma,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileFrame {
    x_axis_agent: usize,
    y_axis_pair: [usize; 2],
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileControl {
    #[serde(default = "default_mode")]
    mode: String,
    #[serde(default = "default_allocation")]
    allocation: String,
    #[serde(default)]
    torque_split: Option<Vec<f64>>,
    #[serde(default = "default_tq")]
    translation_q: [f64; 2],
    #[serde(default = "default_tr")]
    translation_r: f64,
    #[serde(default = "default_aq")]
    attitude_q: [f64; 2],
    #[serde(default = "default_ar")]
    attitude_r: f64,
    #[serde(default = "default_threshold")]
    schedule_threshold: f64,
    #[serde(default = "default_null")]
    null_axis_rtol: f64,
}

fn default_mode() -> String {
    "wrench".into()
}
fn default_allocation() -> String {
    "min_norm_wrench".into()
}
fn default_tq() -> [f64; 2] {
    crate::guidance::DEFAULT_TRANSLATION.q
}
fn default_tr() -> f64 {
    crate::guidance::DEFAULT_TRANSLATION.r
}
fn default_aq() -> [f64; 2] {
    crate::guidance::DEFAULT_ATTITUDE.q
}
fn default_ar() -> f64 {
    crate::guidance::DEFAULT_ATTITUDE.r
}
fn default_threshold() -> f64 {
    0.05
}
fn default_null() -> f64 {
    1e-2
}

impl Default for FileControl {
    fn default() -> Self {
        Self {
            mode: default_mode(),
            allocation: default_allocation(),
            torque_split: None,
            translation_q: default_tq(),
            translation_r: default_tr(),
            attitude_q: default_aq(),
            attitude_r: default_ar(),
            schedule_threshold: default_threshold(),
            null_axis_rtol: default_null(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileWaypoint {
    label: Option<String>,
    position: [f64; 3],
    #[serde(default)]
    velocity: [f64; 3],
    #[serde(default)]
    attitude_deg: [f64; 3],
    #[serde(default)]
    rate_deg: [f64; 3],
    #[serde(default = "default_hold")]
    hold: String,
}

fn default_hold() -> String {
    "stop".into()
}

/// Simulation settings as written in files (degrees for angular tolerances).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimSpec {
    pub dt: f64,
    pub t_end: f64,
    pub establish_tol: f64,
    pub establish_hold: f64,
    pub wp_pos_tol: f64,
    pub wp_vel_tol: f64,
    pub wp_att_tol_deg: f64,
    pub wp_rate_tol_deg: f64,
    pub flythrough_radius: f64,
    pub flythrough_gate_radius: f64,
    pub stop_when_complete: bool,
    pub record_stage_forces: bool,
}

impl Default for SimSpec {
    fn default() -> Self {
        Self {
            dt: 0.01,
            t_end: 20.0,
            establish_tol: 0.05,
            establish_hold: 1.0,
            wp_pos_tol: 0.1,
            wp_vel_tol: 0.05,
            wp_att_tol_deg: 1.0,
            wp_rate_tol_deg: 0.5,
            flythrough_radius: 0.5,
            flythrough_gate_radius: 2.0,
            stop_when_complete: false,
            record_stage_forces: false,
        }
    }
}

impl SimSpec {
    pub fn to_config(&self) -> SimConfig {
        SimConfig {
            dt: self.dt,
            t_end: self.t_end,
            establish_tol: self.establish_tol,
            establish_hold: self.establish_hold,
            wp_pos_tol: self.wp_pos_tol,
            wp_vel_tol: self.wp_vel_tol,
            wp_att_tol: self.wp_att_tol_deg.to_radians(),
            wp_rate_tol: self.wp_rate_tol_deg.to_radians(),
            flythrough_radius: self.flythrough_radius,
            flythrough_gate_radius: self.flythrough_gate_radius,
            stop_when_complete: self.stop_when_complete,
            record_stage_forces: self.record_stage_forces,
        }
    }
}

// ---------------------------------------------------------------- validated model

#[derive(Debug, Clone, PartialEq)]
pub struct AgentSpec {
    pub mass: f64,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    /// Open-loop input applied while the formation is not under guidance.
    pub input: Vector3<f64>,
}

/// When a constraint schedule phase begins.
#[derive(Debug, Clone, PartialEq)]
pub enum PhaseTrigger {
    /// At a fixed time (s).
    At(f64),
    /// When the waypoint with this index is reached.
    OnWaypoint(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ControlMode {
    Wrench,
    Local,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControlSpec {
    pub mode: ControlMode,
    pub allocation: AllocationMode,
    pub torque_split: Option<Vec<f64>>,
    pub translation: LqrWeights,
    pub attitude: LqrWeights,
    pub schedule_threshold: f64,
    pub null_axis_rtol: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WaypointSpec {
    pub label: String,
    pub position: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub attitude_deg: Vector3<f64>,
    pub rate_deg: Vector3<f64>,
    pub hold: Hold,
}

impl WaypointSpec {
    pub fn to_waypoint(&self) -> Waypoint {
        Waypoint {
            r_cm_des: self.position,
            v_cm_des: self.velocity,
            sigma_des: self.attitude_deg.map(f64::to_radians),
            omega_b_des: self.rate_deg.map(f64::to_radians),
            hold: self.hold,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    pub name: String,
    pub description: String,
    pub gravity: f64,
    pub ground: bool,
    pub partial: bool,
    pub agents: Vec<AgentSpec>,
    /// 0-based pairs with `agent_i < agent_j`; `schedule[p]` per phase.
    pub constraints: Vec<DistanceConstraint>,
    /// Trigger of phase `p + 1`.
    pub triggers: Vec<PhaseTrigger>,
    pub gains: BaumgarteGains,
    pub solve_mode: SolveMode,
    pub frame: FrameSpec,
    pub control: ControlSpec,
    pub waypoints: Vec<WaypointSpec>,
    pub sim: SimSpec,
}

impl Scenario {
    pub fn masses(&self) -> Vec<f64> {
        self.agents.iter().map(|a| a.mass).collect()
    }

    pub fn initial_particles(&self) -> ParticleSystem {
        let pos: Vec<_> = self.agents.iter().map(|a| a.position).collect();
        let vel: Vec<_> = self.agents.iter().map(|a| a.velocity).collect();
        ParticleSystem::new(self.masses(), &pos, &vel)
    }

    pub fn constraint_set(&self) -> ConstraintSet {
        let mut cs = ConstraintSet::new(self.constraints.clone(), self.gains);
        cs.solve_mode = self.solve_mode;
        cs
    }

    pub fn phase_count(&self) -> usize {
        self.triggers.len() + 1
    }

    pub fn waypoints(&self) -> Vec<Waypoint> {
        self.waypoints.iter().map(WaypointSpec::to_waypoint).collect()
    }

    pub fn config(&self) -> SimConfig {
        self.sim.to_config()
    }

    pub fn rigidity(&self) -> Result<RigidityReport, ScenarioError> {
        rigidity_check(&self.constraint_set(), &self.initial_particles()).map_err(|e| invalid("agents", e.to_string()))
    }
}

fn vec3(a: [f64; 3]) -> Vector3<f64> {
    Vector3::new(a[0], a[1], a[2])
}

fn arr3(v: &Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

fn finite3(path: String, a: &[f64; 3]) -> Result<(), ScenarioError> {
    if a.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(invalid(path, "components must be finite"))
    }
}

fn positive(path: &str, x: f64) -> Result<(), ScenarioError> {
    if x > 0.0 && x.is_finite() {
        Ok(())
    } else {
        Err(invalid(path, format!("must be positive and finite, got {x}")))
    }
}

pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let file: FileScenario = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    validate(file)
}

/// Parses after applying `path=value` overrides (see [`apply_override`]).
pub fn parse_with_overrides(text: &str, overrides: &[String]) -> Result<Scenario, ScenarioError> {
    let mut value: toml::Table = toml::from_str(text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    for o in overrides {
        apply_override(&mut value, o)?;
    }
    let file: FileScenario = value.try_into().map_err(|e: toml::de::Error| ScenarioError::Parse(e.to_string()))?;
    validate(file)
}

/// Sets a value addressed by a dotted path such as `sim.dt`,
/// `constraints.gains.alpha` or `waypoints.2.position`. Array elements are
/// addressed by 0-based position. The value is read as a TOML value and
/// falls back to a plain string.
pub fn apply_override(root: &mut toml::Table, assignment: &str) -> Result<(), ScenarioError> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| ScenarioError::Parse(format!("override `{assignment}` is not of the form path=value")))?;
    let path = path.trim();
    let raw = raw.trim();
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    let (last, parents) = keys.split_last().ok_or_else(|| invalid(path, "empty override path"))?;
    let mut cur: &mut toml::Value = {
        let first = parents.first().copied().unwrap_or(last);
        if parents.is_empty() {
            root.insert(last.to_string(), value);
            return Ok(());
        }
        root.entry(first.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
    };
    for key in &parents[1..] {
        cur = step_into(cur, key, path)?;
    }
    match cur {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let idx: usize = last.parse().map_err(|_| invalid(path, format!("`{last}` is not an array index")))?;
            let slot = a.get_mut(idx).ok_or_else(|| invalid(path, format!("index {idx} out of range")))?;
            *slot = value;
        }
        _ => return Err(invalid(path, "parent is not a table or array")),
    }
    Ok(())
}

fn step_into<'a>(cur: &'a mut toml::Value, key: &str, path: &str) -> Result<&'a mut toml::Value, ScenarioError> {
    match cur {
        toml::Value::Table(t) => Ok(t
            .entry(key.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))),
        toml::Value::Array(a) => {
            let idx: usize = key.parse().map_err(|_| invalid(path, format!("`{key}` is not an array index")))?;
            a.get_mut(idx).ok_or_else(|| invalid(path, format!("index {idx} out of range")))
        }
        _ => Err(invalid(path, format!("`{key}` does not address a table or array"))),
    }
}

fn validate(f: FileScenario) -> Result<Scenario, ScenarioError> {
    let n = f.agents.len();
    if n == 0 {
        return Err(invalid("agents", "at least one agent is required"));
    }
    positive("gravity", f.gravity).or_else(|e| if f.gravity == 0.0 { Ok(()) } else { Err(e) })?;
    let mut agents = Vec::with_capacity(n);
    for (k, a) in f.agents.iter().enumerate() {
        positive(&format!("agents[{k}].mass"), a.mass)?;
        finite3(format!("agents[{k}].position"), &a.position)?;
        finite3(format!("agents[{k}].velocity"), &a.velocity)?;
        finite3(format!("agents[{k}].input"), &a.input)?;
        agents.push(AgentSpec {
            mass: a.mass,
            position: vec3(a.position),
            velocity: vec3(a.velocity),
            input: vec3(a.input),
        });
    }

    let c = &f.constraints;
    if c.phases.is_empty() {
        return Err(invalid("constraints.phases", "at least one phase is required"));
    }
    let mut seen = std::collections::HashSet::new();
    for (k, p) in c.pairs.iter().enumerate() {
        let path = format!("constraints.pairs[{k}]");
        for &a in p {
            if a == 0 || a > n {
                return Err(invalid(path, format!("agent {a} is outside 1..={n}")));
            }
        }
        if p[0] == p[1] {
            return Err(invalid(path, format!("pair ({}, {}) joins an agent to itself", p[0], p[1])));
        }
        let key = (p[0].min(p[1]), p[0].max(p[1]));
        if !seen.insert(key) {
            return Err(invalid(path, format!("duplicate pair ({}, {})", key.0, key.1)));
        }
    }
    let labels: Vec<String> = f
        .waypoints
        .iter()
        .enumerate()
        .map(|(k, w)| w.label.clone().unwrap_or_else(|| (k + 1).to_string()))
        .collect();
    let mut triggers = Vec::new();
    let mut last_start = 0.0;
    for (k, ph) in c.phases.iter().enumerate() {
        let path = format!("constraints.phases[{k}]");
        if ph.distances.len() != c.pairs.len() {
            return Err(invalid(
                format!("{path}.distances"),
                format!("expected {} distances, got {}", c.pairs.len(), ph.distances.len()),
            ));
        }
        for (j, d) in ph.distances.iter().enumerate() {
            positive(&format!("{path}.distances[{j}]"), *d)?;
        }
        match (k, ph.start, &ph.on_waypoint) {
            (0, None, None) => {}
            (0, _, _) => return Err(invalid(path, "the first phase starts at t = 0 and takes no trigger")),
            (_, Some(t), None) => {
                if !(t > last_start) || !t.is_finite() {
                    return Err(invalid(format!("{path}.start"), "phase start times must be strictly increasing and positive"));
                }
                last_start = t;
                triggers.push(PhaseTrigger::At(t));
            }
            (_, None, Some(label)) => {
                let idx = labels
                    .iter()
                    .position(|l| l == label)
                    .ok_or_else(|| invalid(format!("{path}.on_waypoint"), format!("no waypoint labelled `{label}`")))?;
                triggers.push(PhaseTrigger::OnWaypoint(idx));
            }
            _ => return Err(invalid(path, "give exactly one of `start` or `on_waypoint`")),
        }
    }
    let constraints = c
        .pairs
        .iter()
        .enumerate()
        .map(|(k, p)| DistanceConstraint {
            agent_i: p[0].min(p[1]) - 1,
            agent_j: p[0].max(p[1]) - 1,
            schedule: c.phases.iter().map(|ph| ph.distances[k]).collect(),
        })
        .collect();

    positive("constraints.gains.alpha", c.gains.alpha)?;
    positive("constraints.gains.beta", c.gains.beta)?;
    positive("constraints.gains.gamma", c.gains.gamma)?;
    let solve_mode = match c.solve.as_str() {
        "exact" => SolveMode::Exact,
        "tapered" => {
            positive("constraints.taper_kappa", c.taper_kappa)?;
            SolveMode::Tapered { kappa: c.taper_kappa }
        }
        other => return Err(invalid("constraints.solve", format!("unknown solve mode `{other}`"))),
    };

    let fr = &f.frame;
    for (path, a) in [
        ("frame.x_axis_agent", fr.x_axis_agent),
        ("frame.y_axis_pair[0]", fr.y_axis_pair[0]),
        ("frame.y_axis_pair[1]", fr.y_axis_pair[1]),
    ] {
        if n >= 2 && (a == 0 || a > n) {
            return Err(invalid(path, format!("agent {a} is outside 1..={n}")));
        }
    }
    if n >= 3
        && (fr.x_axis_agent == fr.y_axis_pair[0] || fr.x_axis_agent == fr.y_axis_pair[1] || fr.y_axis_pair[0] == fr.y_axis_pair[1])
    {
        return Err(invalid("frame", "x axis agent and y axis pair must be three distinct agents"));
    }
    let frame = FrameSpec {
        x_axis_agent: fr.x_axis_agent.saturating_sub(1),
        y_axis_pair: (fr.y_axis_pair[0].saturating_sub(1), fr.y_axis_pair[1].saturating_sub(1)),
    };

    let ct = &f.control;
    let mode = match ct.mode.as_str() {
        "wrench" => ControlMode::Wrench,
        "local" => ControlMode::Local,
        other => return Err(invalid("control.mode", format!("unknown control mode `{other}`"))),
    };
    let allocation = match ct.allocation.as_str() {
        "min_norm_wrench" => AllocationMode::MinNormWrench,
        "paper_left_pinv" => AllocationMode::PaperLeftPinv,
        other => return Err(invalid("control.allocation", format!("unknown allocation mode `{other}`"))),
    };
    if let Some(split) = &ct.torque_split {
        if split.len() != n || split.iter().any(|x| !x.is_finite()) {
            return Err(invalid("control.torque_split", format!("expected {n} finite weights")));
        }
    }
    for (path, q) in [("control.translation_q", ct.translation_q), ("control.attitude_q", ct.attitude_q)] {
        if q.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(invalid(path, "state weights must be non-negative"));
        }
    }
    positive("control.translation_r", ct.translation_r)?;
    positive("control.attitude_r", ct.attitude_r)?;
    positive("control.schedule_threshold", ct.schedule_threshold)?;
    positive("control.null_axis_rtol", ct.null_axis_rtol)?;
    let control = ControlSpec {
        mode,
        allocation,
        torque_split: ct.torque_split.clone(),
        translation: LqrWeights {
            q: ct.translation_q,
            r: ct.translation_r,
        },
        attitude: LqrWeights {
            q: ct.attitude_q,
            r: ct.attitude_r,
        },
        schedule_threshold: ct.schedule_threshold,
        null_axis_rtol: ct.null_axis_rtol,
    };

    let mut waypoints = Vec::new();
    for (k, w) in f.waypoints.iter().enumerate() {
        let path = format!("waypoints[{k}]");
        finite3(format!("{path}.position"), &w.position)?;
        finite3(format!("{path}.velocity"), &w.velocity)?;
        finite3(format!("{path}.attitude_deg"), &w.attitude_deg)?;
        finite3(format!("{path}.rate_deg"), &w.rate_deg)?;
        let hold = match w.hold.as_str() {
            "stop" => Hold::Stop,
            "fly_through" => Hold::FlyThrough,
            other => return Err(invalid(format!("{path}.hold"), format!("unknown hold `{other}`"))),
        };
        if hold == Hold::FlyThrough && w.velocity.iter().all(|x| *x == 0.0) {
            return Err(invalid(format!("{path}.velocity"), "fly_through waypoints need a nonzero velocity"));
        }
        if labels[..k].contains(&labels[k]) {
            return Err(invalid(format!("{path}.label"), format!("duplicate label `{}`", labels[k])));
        }
        waypoints.push(WaypointSpec {
            label: labels[k].clone(),
            position: vec3(w.position),
            velocity: vec3(w.velocity),
            attitude_deg: vec3(w.attitude_deg),
            rate_deg: vec3(w.rate_deg),
            hold,
        });
    }

    let s = &f.sim;
    positive("sim.dt", s.dt)?;
    if !(s.t_end >= 0.0) || !s.t_end.is_finite() {
        return Err(invalid("sim.t_end", "must be non-negative"));
    }
    for (path, x) in [
        ("sim.establish_tol", s.establish_tol),
        ("sim.wp_pos_tol", s.wp_pos_tol),
        ("sim.wp_vel_tol", s.wp_vel_tol),
        ("sim.wp_att_tol_deg", s.wp_att_tol_deg),
        ("sim.wp_rate_tol_deg", s.wp_rate_tol_deg),
        ("sim.flythrough_radius", s.flythrough_radius),
        ("sim.flythrough_gate_radius", s.flythrough_gate_radius),
    ] {
        positive(path, x)?;
    }
    if !(s.establish_hold >= 0.0) {
        return Err(invalid("sim.establish_hold", "must be non-negative"));
    }

    let scenario = Scenario {
        name: f.name,
        description: f.description,
        gravity: f.gravity,
        ground: f.ground,
        partial: f.partial,
        agents,
        constraints,
        triggers,
        gains: BaumgarteGains {
            alpha: c.gains.alpha,
            beta: c.gains.beta,
            gamma: c.gains.gamma,
        },
        solve_mode,
        frame,
        control,
        waypoints,
        sim: f.sim,
    };

    let report = scenario.rigidity()?;
    if report.is_overconstrained {
        return Err(invalid(
            "constraints.pairs",
            format!("{} constraints but rank {}: the set is over-constrained", report.constraints, report.rank),
        ));
    }
    if !report.is_rigid && !scenario.partial {
        return Err(invalid(
            "constraints.pairs",
            format!(
                "rank {} / required {}: not rigid (set `partial = true` for partial constraint sets)",
                report.rank, report.required
            ),
        ));
    }
    Ok(scenario)
}

/// Normalized TOML with every default filled in.
pub fn dump_scenario(s: &Scenario) -> String {
    let file = FileScenario {
        name: s.name.clone(),
        description: s.description.clone(),
        gravity: s.gravity,
        ground: s.ground,
        partial: s.partial,
        agents: s
            .agents
            .iter()
            .map(|a| FileAgent {
                mass: a.mass,
                position: arr3(&a.position),
                velocity: arr3(&a.velocity),
                input: arr3(&a.input),
            })
            .collect(),
        constraints: FileConstraints {
            pairs: s.constraints.iter().map(|c| [c.agent_i + 1, c.agent_j + 1]).collect(),
            phases: (0..s.phase_count())
                .map(|p| FilePhase {
                    start: match s.triggers.get(p.wrapping_sub(1)) {
                        Some(PhaseTrigger::At(t)) if p > 0 => Some(*t),
                        _ => None,
                    },
                    on_waypoint: match s.triggers.get(p.wrapping_sub(1)) {
                        Some(PhaseTrigger::OnWaypoint(k)) if p > 0 => Some(s.waypoints[*k].label.clone()),
                        _ => None,
                    },
                    distances: s.constraints.iter().map(|c| c.schedule[p]).collect(),
                })
                .collect(),
            gains: FileGains {
                alpha: s.gains.alpha,
                beta: s.gains.beta,
                gamma: s.gains.gamma,
            },
            solve: match s.solve_mode {
                SolveMode::Exact => "exact".into(),
                SolveMode::Tapered { .. } => "tapered".into(),
            },
            taper_kappa: match s.solve_mode {
                SolveMode::Exact => default_kappa(),
                SolveMode::Tapered { kappa } => kappa,
            },
        },
        frame: FileFrame {
            x_axis_agent: s.frame.x_axis_agent + 1,
            y_axis_pair: [s.frame.y_axis_pair.0 + 1, s.frame.y_axis_pair.1 + 1],
        },
        control: FileControl {
            mode: match s.control.mode {
                ControlMode::Wrench => "wrench".into(),
                ControlMode::Local => "local".into(),
            },
            allocation: match s.control.allocation {
                AllocationMode::MinNormWrench => "min_norm_wrench".into(),
                AllocationMode::PaperLeftPinv => "paper_left_pinv".into(),
            },
            torque_split: s.control.torque_split.clone(),
            translation_q: s.control.translation.q,
            translation_r: s.control.translation.r,
            attitude_q: s.control.attitude.q,
            attitude_r: s.control.attitude.r,
            schedule_threshold: s.control.schedule_threshold,
            null_axis_rtol: s.control.null_axis_rtol,
        },
        waypoints: s
            .waypoints
            .iter()
            .map(|w| FileWaypoint {
                label: Some(w.label.clone()),
                position: arr3(&w.position),
                velocity: arr3(&w.velocity),
                attitude_deg: arr3(&w.attitude_deg),
                rate_deg: arr3(&w.rate_deg),
                hold: match w.hold {
                    Hold::Stop => "stop".into(),
                    Hold::FlyThrough => "fly_through".into(),
                },
            })
            .collect(),
        sim: s.sim,
    };
    toml::to_string_pretty(&file).expect("scenario serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_bundled_scenario_parses_and_round_trips() {
        for name in bundled_names() {
            let s = parse_scenario(bundled(name).unwrap()).unwrap_or_else(|e| panic!("{name}: {e}"));
            let again = parse_scenario(&dump_scenario(&s)).unwrap();
            assert_eq!(s, again, "{name}");
            let r = s.rigidity().unwrap();
            assert_eq!(r.rank, s.constraints.len(), "{name}");
            assert!(r.is_rigid || s.partial, "{name}");
        }
    }

    #[test]
    fn triangle_schedule() {
        let s = parse_scenario(bundled("triangle_establish").unwrap()).unwrap();
        assert_eq!(s.agents.len(), 3);
        assert_eq!(s.triggers, vec![PhaseTrigger::At(6.0), PhaseTrigger::At(13.0)]);
        let by_phase: Vec<Vec<f64>> = (0..3).map(|p| s.constraints.iter().map(|c| c.schedule[p]).collect()).collect();
        assert_eq!(by_phase, vec![vec![4.0, 4.0, 4.0], vec![4.0, 8.0, 4.0], vec![4.0, 4.0, 4.0]]);
        assert_eq!(s.agents[0].position, Vector3::new(1.0, 6.0, 3.0));
    }

    #[test]
    fn cube_distances() {
        let s = parse_scenario(bundled("cube_establish").unwrap()).unwrap();
        assert_eq!(s.constraints.len(), 18);
        let diag = 4.0 * 2f64.sqrt();
        for c in &s.constraints {
            let d = c.schedule[0];
            assert!((d - 4.0).abs() < 1e-12 || (d - diag).abs() < 1e-12, "{d}");
        }
        assert_eq!(s.constraints.iter().filter(|c| (c.schedule[0] - 4.0).abs() < 1e-12).count(), 12);
        let r = s.rigidity().unwrap();
        assert_eq!((r.rank, r.required, r.is_rigid), (18, 18, true));
    }

    #[test]
    fn duplicate_pair_is_named() {
        let text = bundled("triangle_establish").unwrap().replace("[[1, 2], [1, 3], [2, 3]]", "[[1, 2], [1, 3], [2, 1]]");
        match parse_scenario(&text) {
            Err(ScenarioError::Validation { path, message }) => {
                assert_eq!(path, "constraints.pairs[2]");
                assert!(message.contains("(1, 2)"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_text_is_a_parse_error() {
        assert!(matches!(parse_scenario("name = [1,"), Err(ScenarioError::Parse(_))));
        assert!(matches!(parse_scenario("name = \"x\"\nbogus = 1"), Err(ScenarioError::Parse(_))));
    }

    #[test]
    fn bad_values_report_field_paths() {
        let base = bundled("table2_mission").unwrap();
        let cases = [
            ("sim.dt=0", "sim.dt"),
            ("agents.1.mass=-1", "agents[1].mass"),
            ("constraints.gains.beta=0", "constraints.gains.beta"),
            ("frame.x_axis_agent=7", "frame.x_axis_agent"),
            ("waypoints.0.hold=\"hover\"", "waypoints[0].hold"),
        ];
        for (o, expect) in cases {
            match parse_with_overrides(base, &[o.to_string()]) {
                Err(ScenarioError::Validation { path, .. }) => assert_eq!(path, expect, "{o}"),
                other => panic!("{o}: unexpected {other:?}"),
            }
        }
    }

    #[test]
    fn overrides_set_nested_values() {
        let base = bundled("table2_mission").unwrap();
        let s = parse_with_overrides(
            base,
            &["sim.dt=0.005".into(), "constraints.gains.alpha=3".into(), "waypoints.0.attitude_deg=[0, 0, 45]".into()],
        )
        .unwrap();
        assert_eq!(s.sim.dt, 0.005);
        assert_eq!(s.gains.alpha, 3.0);
        assert_eq!(s.waypoints[0].attitude_deg, Vector3::new(0.0, 0.0, 45.0));
        assert!(parse_with_overrides(base, &["sim.dt".into()]).is_err());
    }

    #[test]
    fn redundant_constraints_are_rejected() {
        let text = bundled("triangle_establish")
            .unwrap()
            .replace("[[1, 2], [1, 3], [2, 3]]", "[[1, 2], [1, 3], [2, 3], [3, 1]]");
        assert!(parse_scenario(&text).is_err());
    }
}
