//! Mission orchestration: fixed-step RK4, the phase state machine and logging.

use std::fmt;

use nalgebra::{DVector, Quaternion, Vector3};
use thiserror::Error;

use crate::allocation::{allocate, build_allocation, recombine, WrenchCommand};
use crate::attitude;
use crate::care::CareError;
use crate::constraint::{
    compute_constraint_force, constraint_jacobian, evaluate_constraints, stack, unstack, ConstraintError, ConstraintForce,
    ConstraintSet, ParticleSystem,
};
use crate::dynamics::{self, attach_body_frame, DynamicsError, InertiaSolve, VrbDerivative, VrbState};
use crate::guidance::{
    desired_agent_states, local_agent_control, local_designs, wrench_command, GuidanceDesign, GuidanceError, Hold,
    LqrDesign, Waypoint,
};
use crate::linalg::Svd;
use crate::scenario::{ControlMode, PhaseTrigger, Scenario};

/// Per-agent thrust available to the vehicles the formation is sized for (N).
pub const THRUST_BUDGET: f64 = 23.6;
pub const DIVERGENCE_LIMIT: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub t_end: f64,
    pub establish_tol: f64,
    pub establish_hold: f64,
    pub wp_pos_tol: f64,
    pub wp_vel_tol: f64,
    /// Radians.
    pub wp_att_tol: f64,
    /// Radians per second.
    pub wp_rate_tol: f64,
    pub flythrough_radius: f64,
    /// Lateral miss allowed when the CM crosses the plane through a
    /// fly-through waypoint normal to its velocity.
    pub flythrough_gate_radius: f64,
    pub stop_when_complete: bool,
    pub record_stage_forces: bool,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Constraint(#[from] ConstraintError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error("gain design failed: {0}")]
    Care(#[from] CareError),
    #[error("numerical divergence at t = {t}: state magnitude {value:e}")]
    NumericalDivergence { t: f64, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Resume {
    Holding,
    Tracking(usize),
    Complete,
}

impl Resume {
    fn phase(self) -> PhaseKind {
        match self {
            Resume::Holding => PhaseKind::Holding,
            Resume::Tracking(k) => PhaseKind::Tracking(k),
            Resume::Complete => PhaseKind::Complete,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseKind {
    Establishing,
    /// Established with no waypoints; open-loop input continues.
    Holding,
    Tracking(usize),
    /// Converging onto schedule `schedule` while holding waypoint `hold`.
    Reconfiguring {
        schedule: usize,
        hold: Option<usize>,
        resume: Resume,
    },
    /// Every waypoint reached; station-keeping at the last one.
    Complete,
}

impl fmt::Display for PhaseKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PhaseKind::Establishing => write!(f, "establishing"),
            PhaseKind::Holding => write!(f, "holding"),
            PhaseKind::Tracking(k) => write!(f, "tracking:{k}"),
            PhaseKind::Reconfiguring { schedule, .. } => write!(f, "reconfiguring:{schedule}"),
            PhaseKind::Complete => write!(f, "complete"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissionPhase {
    pub kind: PhaseKind,
    pub entered_at: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Event {
    pub t: f64,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    /// All waypoints reached, or established when there are none.
    Completed,
    /// `t_end` came first.
    Timeout,
    Failed(SimError),
}

/// Signals at the start of one step. Forces are the first RK4 stage.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub t: f64,
    pub phase: PhaseKind,
    pub schedule: usize,
    pub attached: bool,
    pub positions: Vec<Vector3<f64>>,
    pub velocities: Vec<Vector3<f64>>,
    pub f_ext: Vec<Vector3<f64>>,
    pub f_c: Vec<Vector3<f64>>,
    pub f_u: Vec<Vector3<f64>>,
    pub c: Vec<f64>,
    pub d_des: Vec<f64>,
    pub r_cm: Vector3<f64>,
    pub v_cm: Vector3<f64>,
    pub q: Quaternion<f64>,
    pub omega_b: Vector3<f64>,
    pub commanded: WrenchCommand,
    pub achieved: WrenchCommand,
    pub tapered: usize,
    /// `| |q| - 1 |` before the renormalization that ended the previous step.
    pub q_drift: f64,
    pub cm_pos_residual: f64,
    pub cm_vel_residual: f64,
    pub row_space_residual: f64,
    pub net_fc: f64,
    pub net_tc: f64,
}

impl LogRow {
    pub fn euler_deg(&self) -> Vector3<f64> {
        attitude::euler321(&self.q).map(f64::to_degrees)
    }

    pub fn max_abs_c(&self) -> f64 {
        self.c.iter().fold(0.0, |a, x| a.max(x.abs()))
    }

    pub fn distances(&self) -> Vec<f64> {
        self.c.iter().zip(&self.d_des).map(|(c, d)| c + d).collect()
    }
}

/// Non-constraint forces at each RK4 stage of one aggregate-dynamics step,
/// with the constraint state they were evaluated under.
#[derive(Debug, Clone, PartialEq)]
pub struct StageRecord {
    pub row: usize,
    pub schedule: usize,
    pub integral: Vec<f64>,
    pub applied: [Vec<Vector3<f64>>; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimLog {
    pub scenario: String,
    pub masses: Vec<f64>,
    /// 0-based constraint pairs.
    pub pairs: Vec<(usize, usize)>,
    pub dt: f64,
    pub rows: Vec<LogRow>,
    pub events: Vec<Event>,
    pub phases: Vec<MissionPhase>,
    pub established_at: Option<f64>,
    pub waypoint_labels: Vec<String>,
    pub waypoint_times: Vec<Option<f64>>,
    pub stages: Vec<StageRecord>,
    pub outcome: Outcome,
}

impl SimLog {
    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }

    pub fn all_waypoints_reached(&self) -> bool {
        self.waypoint_times.iter().all(Option::is_some)
    }
}

enum Body {
    Free(ParticleSystem),
    Rigid(VrbState),
}

struct StageForces {
    f_ext: Vec<Vector3<f64>>,
    f_u: Vec<Vector3<f64>>,
    cf: ConstraintForce,
    commanded: WrenchCommand,
    achieved: WrenchCommand,
}

impl StageForces {
    fn applied(&self) -> Vec<Vector3<f64>> {
        self.f_ext.iter().zip(&self.f_u).map(|(a, b)| a + b).collect()
    }

    fn total(&self) -> Vec<Vector3<f64>> {
        let fc = unstack(&self.cf.force);
        self.applied().iter().zip(&fc).map(|(a, b)| a + b).collect()
    }
}

pub struct Simulator<'a> {
    scenario: &'a Scenario,
    cfg: SimConfig,
    masses: Vec<f64>,
    waypoints: Vec<Waypoint>,
    inertia_solve: InertiaSolve,
    cs: ConstraintSet,
    body: Body,
    phase: MissionPhase,
    step: usize,
    steps: usize,
    hold_steps: usize,
    converged_steps: usize,
    fired: Vec<bool>,
    prev_tapered: usize,
    prev_r_cm: Option<Vector3<f64>>,
    q_drift: f64,
    design: Option<GuidanceDesign>,
    local: Option<Vec<LqrDesign>>,
    log: SimLog,
}

impl<'a> Simulator<'a> {
    pub fn new(scenario: &'a Scenario) -> Self {
        let cfg = scenario.config();
        let steps = (cfg.t_end / cfg.dt).round() as usize;
        let mut cs = scenario.constraint_set();
        let sys = scenario.initial_particles();
        if let Ok(c) = evaluate_constraints(&sys, &cs) {
            let c_dot = constraint_jacobian(&sys, &cs).map(|j| j * &sys.velocities);
            if let Ok(c_dot) = c_dot {
                cs.bumpless_init(&c, &c_dot);
            }
        }
        let phase = MissionPhase {
            kind: PhaseKind::Establishing,
            entered_at: 0.0,
        };
        Self {
            scenario,
            cfg,
            masses: scenario.masses(),
            waypoints: scenario.waypoints(),
            inertia_solve: InertiaSolve::Pseudo {
                rtol: scenario.control.null_axis_rtol,
            },
            cs,
            body: Body::Free(sys),
            phase,
            step: 0,
            steps,
            hold_steps: (cfg.establish_hold / cfg.dt).round() as usize,
            converged_steps: 0,
            fired: vec![false; scenario.triggers.len()],
            prev_tapered: 0,
            prev_r_cm: None,
            q_drift: 0.0,
            design: None,
            local: None,
            log: SimLog {
                scenario: scenario.name.clone(),
                masses: scenario.masses(),
                pairs: scenario.constraints.iter().map(|c| (c.agent_i, c.agent_j)).collect(),
                dt: cfg.dt,
                rows: Vec::new(),
                events: Vec::new(),
                phases: vec![phase],
                established_at: None,
                waypoint_labels: scenario.waypoints.iter().map(|w| w.label.clone()).collect(),
                waypoint_times: vec![None; scenario.waypoints.len()],
                stages: Vec::new(),
                outcome: Outcome::Timeout,
            },
        }
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt
    }

    pub fn phase(&self) -> MissionPhase {
        self.phase
    }

    pub fn constraint_set(&self) -> &ConstraintSet {
        &self.cs
    }

    pub fn particles(&self) -> ParticleSystem {
        match &self.body {
            Body::Free(s) => s.clone(),
            Body::Rigid(s) => dynamics::to_particles(s, &self.masses),
        }
    }

    pub fn vrb_state(&self) -> Option<&VrbState> {
        match &self.body {
            Body::Rigid(s) => Some(s),
            Body::Free(_) => None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.step >= self.steps
    }

    fn event(&mut self, message: String) {
        let t = self.time();
        self.log.events.push(Event { t, message });
    }

    fn enter(&mut self, kind: PhaseKind) {
        self.phase = MissionPhase {
            kind,
            entered_at: self.time(),
        };
        self.log.phases.push(self.phase);
        self.event(format!("phase {kind}"));
    }

    fn target(&self) -> Option<usize> {
        match self.phase.kind {
            PhaseKind::Tracking(k) => Some(k),
            PhaseKind::Reconfiguring { hold, .. } => hold,
            PhaseKind::Complete => self.waypoints.len().checked_sub(1),
            PhaseKind::Establishing | PhaseKind::Holding => None,
        }
    }

    fn after_waypoint(&self, k: usize) -> Resume {
        if k + 1 < self.waypoints.len() {
            Resume::Tracking(k + 1)
        } else {
            Resume::Complete
        }
    }

    fn switch_schedule(&mut self, schedule: usize, hold: Option<usize>, resume: Resume) -> Result<(), SimError> {
        self.cs.set_phase(schedule);
        let sys = self.particles();
        let c = evaluate_constraints(&sys, &self.cs)?;
        let c_dot = constraint_jacobian(&sys, &self.cs)? * &sys.velocities;
        self.cs.bumpless_init(&c, &c_dot);
        self.converged_steps = 0;
        self.event(format!("constraint schedule {schedule}"));
        if self.phase.kind != PhaseKind::Establishing {
            self.enter(PhaseKind::Reconfiguring { schedule, hold, resume });
        }
        Ok(())
    }

    fn fire_time_triggers(&mut self) -> Result<(), SimError> {
        let t = self.time();
        let mut latest = None;
        for (k, trig) in self.scenario.triggers.iter().enumerate() {
            if let PhaseTrigger::At(ts) = trig {
                if !self.fired[k] && t >= *ts - 1e-9 * self.cfg.dt {
                    self.fired[k] = true;
                    latest = Some(k + 1);
                }
            }
        }
        let Some(schedule) = latest else { return Ok(()) };
        let (hold, resume) = match self.phase.kind {
            PhaseKind::Reconfiguring { hold, resume, .. } => (hold, resume),
            PhaseKind::Tracking(k) => (Some(k), Resume::Tracking(k)),
            PhaseKind::Complete => (self.target(), Resume::Complete),
            PhaseKind::Holding | PhaseKind::Establishing => (None, Resume::Holding),
        };
        self.switch_schedule(schedule, hold, resume)
    }

    fn attach(&mut self) -> Result<(), SimError> {
        let Body::Free(sys) = &self.body else { return Ok(()) };
        let frame = attach_body_frame(sys, &self.scenario.frame)?;
        let state = dynamics::from_particles(sys, frame.q0, self.inertia_solve);
        let inert = dynamics::inertia(&state.rel_pos_b, &state.rel_vel_b, &self.masses);
        let ctl = &self.scenario.control;
        let m_tot: f64 = self.masses.iter().sum();
        self.design = Some(GuidanceDesign::new(
            ctl.translation,
            ctl.attitude,
            m_tot,
            &inert.i_cm_b,
            self.scenario.gravity,
            ctl.schedule_threshold,
            ctl.null_axis_rtol,
        )?);
        if ctl.mode == ControlMode::Local {
            self.local = Some(local_designs(ctl.translation, &self.masses)?);
        }
        let e = attitude::euler321(&frame.q0).map(f64::to_degrees);
        self.body = Body::Rigid(state);
        self.event(format!("body frame attached, euler [{:.3}, {:.3}, {:.3}] deg", e.x, e.y, e.z));
        Ok(())
    }

    fn waypoint_reached(&self, k: usize, state: &VrbState) -> bool {
        let wp = &self.waypoints[k];
        let cfg = &self.cfg;
        match wp.hold {
            Hold::Stop => {
                if (state.r_cm - wp.r_cm_des).norm() >= cfg.wp_pos_tol || (state.v_cm - wp.v_cm_des).norm() >= cfg.wp_vel_tol {
                    return false;
                }
                let Some(design) = &self.design else { return false };
                let axes = design.attitude.controlled_axes();
                let e = attitude::error(&state.q, &wp.q_des());
                let ev = e.imag();
                let rate = state.omega_b - wp.omega_b_des;
                let att: f64 = axes.iter().map(|a| a.dot(&ev).powi(2)).sum::<f64>().sqrt();
                let rate: f64 = axes.iter().map(|a| a.dot(&rate).powi(2)).sum::<f64>().sqrt();
                2.0 * att.min(1.0).asin() < cfg.wp_att_tol && rate < cfg.wp_rate_tol
            }
            Hold::FlyThrough => {
                let d = state.r_cm - wp.r_cm_des;
                if d.norm() < cfg.flythrough_radius {
                    return true;
                }
                let Some(prev) = self.prev_r_cm else { return false };
                let n = wp.v_cm_des.normalize();
                let s_prev = (prev - wp.r_cm_des).dot(&n);
                let s_now = d.dot(&n);
                s_prev < 0.0 && s_now >= 0.0 && (d - n * s_now).norm() < cfg.flythrough_gate_radius
            }
        }
    }

    fn open_loop(&self) -> Vec<Vector3<f64>> {
        self.scenario.agents.iter().map(|a| a.input).collect()
    }

    fn stage_forces(&self, body: &Body) -> Result<StageForces, SimError> {
        let g = Vector3::new(0.0, 0.0, -self.scenario.gravity);
        let f_ext: Vec<_> = self.masses.iter().map(|m| g * *m).collect();
        let (sys, f_u, commanded, achieved) = match body {
            Body::Free(sys) => (sys.clone(), self.open_loop(), WrenchCommand::default(), WrenchCommand::default()),
            Body::Rigid(state) => {
                let sys = dynamics::to_particles(state, &self.masses);
                let t = state.dcm();
                match (self.target(), &self.design) {
                    (Some(k), Some(design)) => {
                        let wp = &self.waypoints[k];
                        let (f_u, commanded) = match &self.local {
                            None => {
                                let inert = dynamics::inertia(&state.rel_pos_b, &state.rel_vel_b, &self.masses);
                                let cmd = wrench_command(state, &inert, wp, design)?;
                                let mut alloc = build_allocation(&state.rel_pos_b, self.scenario.control.allocation);
                                if let Some(split) = &self.scenario.control.torque_split {
                                    alloc.torque_split = split.clone();
                                }
                                let a = allocate(&alloc, &cmd);
                                (a.forces_b.iter().map(|f| t.transpose() * f).collect::<Vec<_>>(), cmd)
                            }
                            Some(local) => {
                                let des = desired_agent_states(
                                    &wp.r_cm_des,
                                    &wp.v_cm_des,
                                    &wp.q_des(),
                                    &wp.omega_b_des,
                                    &state.rel_pos_b,
                                );
                                let f: Vec<_> = (0..sys.len())
                                    .map(|i| {
                                        local_agent_control(
                                            &sys.pos(i),
                                            &sys.vel(i),
                                            &des[i].0,
                                            &des[i].1,
                                            self.masses[i],
                                            &local[i],
                                            self.scenario.gravity,
                                        )
                                    })
                                    .collect();
                                let fb: Vec<_> = f.iter().map(|x| t * x).collect();
                                (f, recombine(&state.rel_pos_b, &fb))
                            }
                        };
                        let fb: Vec<_> = f_u.iter().map(|x| t * x).collect();
                        let achieved = recombine(&state.rel_pos_b, &fb);
                        (sys, f_u, commanded, achieved)
                    }
                    _ => {
                        let f_u = self.open_loop();
                        let fb: Vec<_> = f_u.iter().map(|x| t * x).collect();
                        let achieved = recombine(&state.rel_pos_b, &fb);
                        (sys, f_u, WrenchCommand::default(), achieved)
                    }
                }
            }
        };
        let applied: Vec<_> = f_ext.iter().zip(&f_u).map(|(a, b)| a + b).collect();
        let cf = compute_constraint_force(&sys, &self.cs, &stack(&applied))?;
        Ok(StageForces {
            f_ext,
            f_u,
            cf,
            commanded,
            achieved,
        })
    }

    fn free_derivative(&self, sys: &ParticleSystem, forces: &[Vector3<f64>]) -> (DVector<f64>, DVector<f64>) {
        let acc: Vec<_> = forces.iter().zip(&self.masses).map(|(f, m)| f / *m).collect();
        (sys.velocities.clone(), stack(&acc))
    }

    fn record(&mut self, f1: &StageForces) -> Result<(), SimError> {
        let sys = self.particles();
        let fc = unstack(&f1.cf.force);
        let cm = sys.center_of_mass();
        let net_fc: Vector3<f64> = fc.iter().sum();
        let net_tc: Vector3<f64> = (0..sys.len()).map(|i| (sys.pos(i) - cm).cross(&fc[i])).sum();
        let row_space_residual = if self.cs.is_empty() {
            f1.cf.force.amax()
        } else {
            let j = constraint_jacobian(&sys, &self.cs)?;
            let svd = Svd::new(&j);
            let tol = svd.max() * 1e-12;
            let mut proj = DVector::zeros(f1.cf.force.len());
            for k in 0..svd.s.len() {
                if svd.s[k] > tol {
                    let v = svd.v.column(k);
                    proj += v * v.dot(&f1.cf.force);
                }
            }
            (&f1.cf.force - proj).amax()
        };
        let (q, omega_b, cm_res) = match &self.body {
            Body::Rigid(s) => (s.q, s.omega_b, dynamics::cm_residuals(s, &self.masses)),
            Body::Free(_) => (attitude::identity(), Vector3::zeros(), (0.0, 0.0)),
        };
        self.log.rows.push(LogRow {
            t: self.time(),
            phase: self.phase.kind,
            schedule: self.cs.phase,
            attached: matches!(self.body, Body::Rigid(_)),
            positions: (0..sys.len()).map(|i| sys.pos(i)).collect(),
            velocities: (0..sys.len()).map(|i| sys.vel(i)).collect(),
            f_ext: f1.f_ext.clone(),
            f_c: fc,
            f_u: f1.f_u.clone(),
            c: f1.cf.c.iter().copied().collect(),
            d_des: self.cs.desired(),
            r_cm: cm,
            v_cm: sys.cm_velocity(),
            q,
            omega_b,
            commanded: f1.commanded,
            achieved: f1.achieved,
            tapered: f1.cf.tapered,
            q_drift: self.q_drift,
            cm_pos_residual: cm_res.0,
            cm_vel_residual: cm_res.1,
            row_space_residual,
            net_fc: net_fc.norm(),
            net_tc: net_tc.norm(),
        });
        Ok(())
    }

    /// Phase transitions and waypoint checks at the start of a step.
    fn transitions(&mut self) -> Result<(), SimError> {
        let sys = self.particles();
        let c = evaluate_constraints(&sys, &self.cs)?;
        if c.iter().all(|x| x.abs() < self.cfg.establish_tol) {
            self.converged_steps += 1;
        } else {
            self.converged_steps = 0;
        }
        let settled = self.converged_steps > self.hold_steps;
        match self.phase.kind {
            PhaseKind::Establishing if settled => {
                self.log.established_at = Some(self.time());
                self.event("formation established".into());
                if self.waypoints.is_empty() {
                    self.enter(PhaseKind::Holding);
                } else {
                    self.attach()?;
                    self.enter(PhaseKind::Tracking(0));
                }
            }
            PhaseKind::Reconfiguring { resume, .. } if settled => {
                self.event("reconfiguration settled".into());
                self.enter(resume.phase());
            }
            PhaseKind::Tracking(k) => {
                let reached = match &self.body {
                    Body::Rigid(s) => self.waypoint_reached(k, s),
                    Body::Free(_) => false,
                };
                if reached {
                    self.log.waypoint_times[k] = Some(self.time());
                    self.event(format!("waypoint {} reached", self.log.waypoint_labels[k]));
                    let next = self.after_waypoint(k);
                    let trigger = self
                        .scenario
                        .triggers
                        .iter()
                        .position(|t| *t == PhaseTrigger::OnWaypoint(k));
                    match trigger {
                        Some(p) if !self.fired[p] => {
                            self.fired[p] = true;
                            self.switch_schedule(p + 1, Some(k), next)?;
                        }
                        _ => self.enter(next.phase()),
                    }
                }
            }
            _ => {}
        }
        Ok(())
    }

    fn reschedule(&mut self) -> Result<(), SimError> {
        let (Body::Rigid(state), Some(design)) = (&self.body, &mut self.design) else { return Ok(()) };
        let inert = dynamics::inertia(&state.rel_pos_b, &state.rel_vel_b, &self.masses);
        let change = design.attitude.inertia_change(&inert.i_cm_b);
        if change > 0.5 * design.schedule_threshold {
            design.reschedule(&inert.i_cm_b)?;
            self.event(format!("attitude gains rescheduled (inertia change {change:.4})"));
        }
        Ok(())
    }

    /// Stage-one forces with taper-exit handling.
    fn first_stage(&mut self) -> Result<StageForces, SimError> {
        let mut f1 = self.stage_forces(&self.body)?;
        if self.prev_tapered > 0 && f1.cf.tapered == 0 {
            self.cs.bumpless_init(&f1.cf.c, &f1.cf.c_dot);
            f1 = self.stage_forces(&self.body)?;
        }
        Ok(f1)
    }

    fn integrate(&mut self, f1: &StageForces) -> Result<Option<[Vec<Vector3<f64>>; 4]>, SimError> {
        let h = self.cfg.dt;
        match &self.body {
            Body::Free(sys) => {
                let deriv = |s: &ParticleSystem, f: &StageForces| self.free_derivative(s, &f.total());
                let shifted = |k: &(DVector<f64>, DVector<f64>), a: f64| ParticleSystem {
                    masses: sys.masses.clone(),
                    positions: &sys.positions + &k.0 * a,
                    velocities: &sys.velocities + &k.1 * a,
                };
                let k1 = deriv(sys, f1);
                let s2 = Body::Free(shifted(&k1, h / 2.0));
                let f2 = self.stage_forces(&s2)?;
                let Body::Free(p2) = &s2 else { unreachable!() };
                let k2 = deriv(p2, &f2);
                let s3 = Body::Free(shifted(&k2, h / 2.0));
                let f3 = self.stage_forces(&s3)?;
                let Body::Free(p3) = &s3 else { unreachable!() };
                let k3 = deriv(p3, &f3);
                let s4 = Body::Free(shifted(&k3, h));
                let f4 = self.stage_forces(&s4)?;
                let Body::Free(p4) = &s4 else { unreachable!() };
                let k4 = deriv(p4, &f4);
                let mut next = sys.clone();
                next.positions += (&k1.0 + &k2.0 * 2.0 + &k3.0 * 2.0 + &k4.0) * (h / 6.0);
                next.velocities += (&k1.1 + &k2.1 * 2.0 + &k3.1 * 2.0 + &k4.1) * (h / 6.0);
                if self.scenario.ground && self.phase.kind == PhaseKind::Establishing {
                    for i in 0..next.len() {
                        if next.positions[3 * i + 2] < 0.0 {
                            next.positions[3 * i + 2] = 0.0;
                        }
                        if next.positions[3 * i + 2] <= 0.0 && next.velocities[3 * i + 2] < 0.0 {
                            next.velocities[3 * i + 2] = 0.0;
                        }
                    }
                }
                self.body = Body::Free(next);
                Ok(None)
            }
            Body::Rigid(state) => {
                let mode = self.inertia_solve;
                let deriv = |s: &VrbState, f: &StageForces| dynamics::derivative(s, &self.masses, &f.total(), mode);
                let k1 = deriv(state, f1)?;
                let s2 = state.add_scaled(h / 2.0, &k1);
                let f2 = self.stage_forces(&Body::Rigid(s2.clone()))?;
                let k2 = deriv(&s2, &f2)?;
                let s3 = state.add_scaled(h / 2.0, &k2);
                let f3 = self.stage_forces(&Body::Rigid(s3.clone()))?;
                let k3 = deriv(&s3, &f3)?;
                let s4 = state.add_scaled(h, &k3);
                let f4 = self.stage_forces(&Body::Rigid(s4.clone()))?;
                let k4 = deriv(&s4, &f4)?;
                let d = VrbDerivative::combine(&[(1.0, &k1), (2.0, &k2), (2.0, &k3), (1.0, &k4)]);
                let mut next = state.add_scaled(h / 6.0, &d);
                let norm = attitude::step_normalize(&mut next.q);
                self.q_drift = (norm - 1.0).abs();
                dynamics::regauge_null_axes(&mut next, &self.masses, self.scenario.control.null_axis_rtol);
                self.body = Body::Rigid(next);
                let stages = self
                    .cfg
                    .record_stage_forces
                    .then(|| [f1.applied(), f2.applied(), f3.applied(), f4.applied()]);
                Ok(stages)
            }
        }
    }

    fn check_divergence(&self) -> Result<(), SimError> {
        let value = match &self.body {
            Body::Free(s) => s.positions.amax().max(s.velocities.amax()),
            Body::Rigid(s) => s.max_abs(),
        };
        let bad = match &self.body {
            Body::Free(s) => s.positions.iter().chain(s.velocities.iter()).any(|x| !x.is_finite()),
            Body::Rigid(_) => !value.is_finite(),
        };
        if bad || value > DIVERGENCE_LIMIT {
            return Err(SimError::NumericalDivergence {
                t: self.time(),
                value,
            });
        }
        Ok(())
    }

    /// Advances one step. The final call at `t_end` only records.
    pub fn step(&mut self) -> Result<(), SimError> {
        self.fire_time_triggers()?;
        self.transitions()?;
        self.reschedule()?;
        let f1 = self.first_stage()?;
        if self.is_finished() {
            return self.record(&f1);
        }
        let integral = self.cs.integral_state.clone();
        self.record(&f1)?;
        let stages = self.integrate(&f1)?;
        if let Some(applied) = stages {
            self.log.stages.push(StageRecord {
                row: self.log.rows.len() - 1,
                schedule: self.cs.phase,
                integral,
                applied,
            });
        }
        if f1.cf.tapered == 0 {
            self.cs.advance_integral(&f1.cf.c, self.cfg.dt);
        }
        self.prev_tapered = f1.cf.tapered;
        self.prev_r_cm = Some(self.log.rows.last().map(|r| r.r_cm).unwrap_or_default());
        self.step += 1;
        self.check_divergence()
    }

    fn mission_done(&self) -> bool {
        if self.waypoints.is_empty() {
            self.log.established_at.is_some()
        } else {
            self.log.waypoint_times.iter().all(Option::is_some)
                && !matches!(self.phase.kind, PhaseKind::Reconfiguring { .. })
        }
    }

    pub fn run(mut self) -> SimLog {
        if self.steps > 0 {
            loop {
                if let Err(e) = self.step() {
                    self.event(format!("failed: {e}"));
                    self.log.outcome = Outcome::Failed(e);
                    return self.log;
                }
                if self.log.rows.len() > self.steps
                    || (self.cfg.stop_when_complete && !self.waypoints.is_empty() && self.phase.kind == PhaseKind::Complete)
                {
                    break;
                }
            }
        }
        self.log.outcome = if self.mission_done() {
            Outcome::Completed
        } else {
            Outcome::Timeout
        };
        self.log
    }
}

pub fn run_mission(scenario: &Scenario) -> SimLog {
    Simulator::new(scenario).run()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    pub rows: usize,
    pub max_net_fc: f64,
    pub max_net_tc: f64,
    pub max_row_space_residual: f64,
    pub max_q_drift: f64,
    pub max_cm_pos_residual: f64,
    pub max_cm_vel_residual: f64,
    /// Largest commanded input `|f_u|` per agent.
    pub max_input: Vec<f64>,
    /// Largest total actuator force `|f_u + f_C|` per agent.
    pub max_actuator: Vec<f64>,
    pub budget: f64,
}

impl AuditReport {
    pub fn peak_input(&self) -> f64 {
        self.max_input.iter().copied().fold(0.0, f64::max)
    }

    pub fn peak_actuator(&self) -> f64 {
        self.max_actuator.iter().copied().fold(0.0, f64::max)
    }

    pub fn within_budget(&self) -> bool {
        self.peak_input() < self.budget
    }
}

pub fn momentum_energy_audit(log: &SimLog) -> AuditReport {
    let n = log.masses.len();
    let mut r = AuditReport {
        rows: log.rows.len(),
        max_net_fc: 0.0,
        max_net_tc: 0.0,
        max_row_space_residual: 0.0,
        max_q_drift: 0.0,
        max_cm_pos_residual: 0.0,
        max_cm_vel_residual: 0.0,
        max_input: vec![0.0; n],
        max_actuator: vec![0.0; n],
        budget: THRUST_BUDGET,
    };
    for row in &log.rows {
        r.max_net_fc = r.max_net_fc.max(row.net_fc);
        r.max_net_tc = r.max_net_tc.max(row.net_tc);
        r.max_row_space_residual = r.max_row_space_residual.max(row.row_space_residual);
        r.max_q_drift = r.max_q_drift.max(row.q_drift);
        r.max_cm_pos_residual = r.max_cm_pos_residual.max(row.cm_pos_residual);
        r.max_cm_vel_residual = r.max_cm_vel_residual.max(row.cm_vel_residual);
        for i in 0..n {
            r.max_input[i] = r.max_input[i].max(row.f_u[i].norm());
            r.max_actuator[i] = r.max_actuator[i].max((row.f_u[i] + row.f_c[i]).norm());
        }
    }
    r
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "rows                      {}", self.rows)?;
        writeln!(f, "max |sum f_C|             {:.6e} N", self.max_net_fc)?;
        writeln!(f, "max |constraint torque|   {:.6e} N m", self.max_net_tc)?;
        writeln!(f, "max row-space residual    {:.6e} N", self.max_row_space_residual)?;
        writeln!(f, "max quaternion drift      {:.6e}", self.max_q_drift)?;
        writeln!(f, "max CM position residual  {:.6e} kg m", self.max_cm_pos_residual)?;
        writeln!(f, "max CM velocity residual  {:.6e} kg m/s", self.max_cm_vel_residual)?;
        for (i, (u, a)) in self.max_input.iter().zip(&self.max_actuator).enumerate() {
            writeln!(f, "agent {:<3} max |f_u| {:>10.6} N   max |f_u + f_C| {:>10.6} N", i + 1, u, a)?;
        }
        writeln!(
            f,
            "peak input {:.6} N vs budget {:.1} N: {}",
            self.peak_input(),
            self.budget,
            if self.within_budget() { "within" } else { "EXCEEDED" }
        )
    }
}

/// Re-propagates the aggregate-dynamics segment of a log with Newton's law
/// on absolute agent coordinates, using the logged non-constraint stage
/// forces and recomputing constraint forces from the Newton states.
/// Returns the largest agent position disagreement. Needs
/// `record_stage_forces`.
pub fn newton_replay(scenario: &Scenario, log: &SimLog) -> Result<f64, SimError> {
    let Some(first) = log.stages.first() else { return Ok(0.0) };
    let row = &log.rows[first.row];
    let h = log.dt;
    let masses = &log.masses;
    let mut sys = ParticleSystem::new(masses.clone(), &row.positions, &row.velocities);
    let mut cs = scenario.constraint_set();
    let mut worst: f64 = 0.0;
    for st in &log.stages {
        cs.phase = st.schedule;
        cs.integral_state.clone_from(&st.integral);
        let accel = |s: &ParticleSystem, applied: &[Vector3<f64>]| -> Result<DVector<f64>, SimError> {
            let fe = stack(applied);
            let fc = compute_constraint_force(s, &cs, &fe)?.force;
            let f = fe + fc;
            Ok(DVector::from_fn(f.len(), |k, _| f[k] / masses[k / 3]))
        };
        let at = |s: &ParticleSystem, dr: &DVector<f64>, dv: &DVector<f64>| ParticleSystem {
            masses: masses.clone(),
            positions: &s.positions + dr,
            velocities: &s.velocities + dv,
        };
        let a1 = accel(&sys, &st.applied[0])?;
        let v1 = sys.velocities.clone();
        let s2 = at(&sys, &(&v1 * (h / 2.0)), &(&a1 * (h / 2.0)));
        let a2 = accel(&s2, &st.applied[1])?;
        let v2 = s2.velocities.clone();
        let s3 = at(&sys, &(&v2 * (h / 2.0)), &(&a2 * (h / 2.0)));
        let a3 = accel(&s3, &st.applied[2])?;
        let v3 = s3.velocities.clone();
        let s4 = at(&sys, &(&v3 * h), &(&a3 * h));
        let a4 = accel(&s4, &st.applied[3])?;
        let v4 = s4.velocities.clone();
        sys.positions += (&v1 + &v2 * 2.0 + &v3 * 2.0 + &v4) * (h / 6.0);
        sys.velocities += (&a1 + &a2 * 2.0 + &a3 * 2.0 + &a4) * (h / 6.0);
        if let Some(next) = log.rows.get(st.row + 1) {
            for (i, p) in next.positions.iter().enumerate() {
                worst = worst.max((sys.pos(i) - p).norm());
            }
        }
    }
    Ok(worst)
}
