//! Aggregated rigid-body dynamics of a formation written in CM-relative body
//! coordinates, plus body-frame attachment and conversions to and from
//! absolute agent states.

use nalgebra::{Matrix3, Quaternion, SymmetricEigen, Vector3};
use thiserror::Error;

use crate::attitude;
use crate::constraint::ParticleSystem;

/// Minimum angle between the x axis and the y seed when attaching a frame.
pub const FRAME_MIN_ANGLE_DEG: f64 = 1.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DynamicsError {
    #[error("ill-conditioned body frame: {0}")]
    IllConditionedFrame(String),
    #[error("inertia tensor is singular (smallest principal moment {0:e} kg m^2)")]
    SingularInertia(f64),
}

/// Aggregate state. `q` maps inertial to body; relative quantities are body-frame.
#[derive(Debug, Clone, PartialEq)]
pub struct VrbState {
    pub r_cm: Vector3<f64>,
    pub v_cm: Vector3<f64>,
    pub q: Quaternion<f64>,
    pub omega_b: Vector3<f64>,
    pub rel_pos_b: Vec<Vector3<f64>>,
    pub rel_vel_b: Vec<Vector3<f64>>,
}

/// Time derivative of a [`VrbState`].
#[derive(Debug, Clone, PartialEq)]
pub struct VrbDerivative {
    pub r_cm: Vector3<f64>,
    pub v_cm: Vector3<f64>,
    pub q: Quaternion<f64>,
    pub omega_b: Vector3<f64>,
    pub rel_pos_b: Vec<Vector3<f64>>,
    pub rel_vel_b: Vec<Vector3<f64>>,
}

impl VrbState {
    pub fn len(&self) -> usize {
        self.rel_pos_b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rel_pos_b.is_empty()
    }

    /// Inertial-to-body DCM.
    pub fn dcm(&self) -> Matrix3<f64> {
        attitude::dcm(&self.q)
    }

    /// `self + h * d`, without renormalizing the quaternion.
    pub fn add_scaled(&self, h: f64, d: &VrbDerivative) -> VrbState {
        VrbState {
            r_cm: self.r_cm + h * d.r_cm,
            v_cm: self.v_cm + h * d.v_cm,
            q: self.q + d.q * h,
            omega_b: self.omega_b + h * d.omega_b,
            rel_pos_b: self.rel_pos_b.iter().zip(&d.rel_pos_b).map(|(a, b)| a + h * b).collect(),
            rel_vel_b: self.rel_vel_b.iter().zip(&d.rel_vel_b).map(|(a, b)| a + h * b).collect(),
        }
    }

    /// Largest absolute state component, used for divergence checks.
    pub fn max_abs(&self) -> f64 {
        let mut m = self.r_cm.amax().max(self.v_cm.amax()).max(self.omega_b.amax());
        for v in self.rel_pos_b.iter().chain(&self.rel_vel_b) {
            m = m.max(v.amax());
        }
        if self.q.coords.iter().any(|x| !x.is_finite()) {
            return f64::INFINITY;
        }
        m
    }
}

impl VrbDerivative {
    /// Weighted sum of stage derivatives.
    pub fn combine(parts: &[(f64, &VrbDerivative)]) -> VrbDerivative {
        let n = parts[0].1.rel_pos_b.len();
        let mut out = VrbDerivative {
            r_cm: Vector3::zeros(),
            v_cm: Vector3::zeros(),
            q: Quaternion::new(0.0, 0.0, 0.0, 0.0),
            omega_b: Vector3::zeros(),
            rel_pos_b: vec![Vector3::zeros(); n],
            rel_vel_b: vec![Vector3::zeros(); n],
        };
        for (w, d) in parts {
            out.r_cm += *w * d.r_cm;
            out.v_cm += *w * d.v_cm;
            out.q += d.q * *w;
            out.omega_b += *w * d.omega_b;
            for i in 0..n {
                out.rel_pos_b[i] += *w * d.rel_pos_b[i];
                out.rel_vel_b[i] += *w * d.rel_vel_b[i];
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InertiaTensor {
    pub i_cm_b: Matrix3<f64>,
    pub i_dot_cm_b: Matrix3<f64>,
}

/// Picks the agents that define the body axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameSpec {
    /// Agent whose CM-relative position is the body x axis.
    pub x_axis_agent: usize,
    /// `(a, b)`: `r_b - r_a` seeds the body y axis.
    pub y_axis_pair: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BodyFrame {
    pub dcm: Matrix3<f64>,
    pub q0: Quaternion<f64>,
}

/// How the rotational equation is solved for the body acceleration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InertiaSolve {
    /// Full inverse; collinear formations fail with `SingularInertia`.
    Full,
    /// Principal axes with moment below `rtol` times the largest are dropped
    /// and the rate along them is held.
    Pseudo { rtol: f64 },
}

impl Default for InertiaSolve {
    fn default() -> Self {
        InertiaSolve::Pseudo { rtol: 1e-2 }
    }
}

pub fn attach_body_frame(sys: &ParticleSystem, spec: &FrameSpec) -> Result<BodyFrame, DynamicsError> {
    let n = sys.len();
    let (a, b) = spec.y_axis_pair;
    if spec.x_axis_agent >= n || a >= n || b >= n {
        return Err(DynamicsError::IllConditionedFrame("agent index out of range".into()));
    }
    if spec.x_axis_agent == a || spec.x_axis_agent == b || a == b {
        return Err(DynamicsError::IllConditionedFrame(
            "x agent must differ from both y pair agents".into(),
        ));
    }
    let cm = sys.center_of_mass();
    let xs = sys.pos(spec.x_axis_agent) - cm;
    let ys = sys.pos(b) - sys.pos(a);
    let scale = (0..n).map(|i| (sys.pos(i) - cm).norm()).fold(0.0, f64::max);
    if xs.norm() <= 1e-9 * scale.max(1e-300) || ys.norm() <= 1e-9 * scale.max(1e-300) {
        return Err(DynamicsError::IllConditionedFrame("axis seed has zero length".into()));
    }
    let x = xs.normalize();
    let sin = x.cross(&ys.normalize()).norm();
    if sin < FRAME_MIN_ANGLE_DEG.to_radians().sin() {
        return Err(DynamicsError::IllConditionedFrame(format!(
            "y seed is within {FRAME_MIN_ANGLE_DEG} deg of the x axis"
        )));
    }
    let y = (ys - x * x.dot(&ys)).normalize();
    let z = x.cross(&y);
    let dcm = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
    Ok(BodyFrame {
        dcm,
        q0: attitude::from_dcm(&dcm),
    })
}

/// Inertia tensor about the CM and its rate, from body-frame relative states.
pub fn inertia(rel_pos_b: &[Vector3<f64>], rel_vel_b: &[Vector3<f64>], masses: &[f64]) -> InertiaTensor {
    let mut i_cm = Matrix3::zeros();
    let mut i_dot = Matrix3::zeros();
    for ((r, v), m) in rel_pos_b.iter().zip(rel_vel_b).zip(masses) {
        i_cm += *m * (Matrix3::identity() * r.norm_squared() - r * r.transpose());
        i_dot += *m * (Matrix3::identity() * (2.0 * r.dot(v)) - v * r.transpose() - r * v.transpose());
    }
    InertiaTensor {
        i_cm_b: i_cm,
        i_dot_cm_b: i_dot,
    }
}

/// Principal axes whose moment is below `rtol` times the largest moment.
pub fn null_axes(i_cm: &Matrix3<f64>, rtol: f64) -> Vec<Vector3<f64>> {
    let eig = SymmetricEigen::new(*i_cm);
    let max = eig.eigenvalues.amax();
    (0..3)
        .filter(|&k| eig.eigenvalues[k] <= rtol * max)
        .map(|k| eig.eigenvectors.column(k).into_owned())
        .collect()
}

fn solve_inertia(i_cm: &Matrix3<f64>, rhs: &Vector3<f64>, mode: InertiaSolve) -> Result<Vector3<f64>, DynamicsError> {
    let eig = SymmetricEigen::new(*i_cm);
    let max = eig.eigenvalues.amax();
    let min = eig.eigenvalues.min();
    let rtol = match mode {
        InertiaSolve::Full => {
            if min <= 1e-12 * max || max == 0.0 {
                return Err(DynamicsError::SingularInertia(min));
            }
            0.0
        }
        InertiaSolve::Pseudo { rtol } => rtol,
    };
    let mut out = Vector3::zeros();
    for k in 0..3 {
        let ev = eig.eigenvalues[k];
        if ev > rtol * max && ev > 0.0 {
            let axis = eig.eigenvectors.column(k);
            out += axis * (axis.dot(rhs) / ev);
        }
    }
    Ok(out)
}

/// Body angular acceleration from agent forces (body frame). Uses the frame
/// gauge `sum m dr x dr_ddot = 0`, which makes the agent-relative
/// acceleration term vanish and closes the rotational equation on its own.
pub fn rotational_dynamics(
    state: &VrbState,
    inertia: &InertiaTensor,
    forces_b: &[Vector3<f64>],
    masses: &[f64],
    mode: InertiaSolve,
) -> Result<Vector3<f64>, DynamicsError> {
    let w = state.omega_b;
    let i_cm = inertia.i_cm_b;
    let mut rhs = -w.cross(&(i_cm * w)) - inertia.i_dot_cm_b * w;
    for i in 0..state.len() {
        let (r, v, m) = (state.rel_pos_b[i], state.rel_vel_b[i], masses[i]);
        rhs += r.cross(&forces_b[i]);
        rhs -= m * r.cross(&w.cross(&v));
        rhs -= m * w.cross(&r).cross(&v);
    }
    solve_inertia(&i_cm, &rhs, mode)
}

/// Relative accelerations in the body frame for a given body angular acceleration.
/// `forces_i` are inertial agent forces and `f_cm_total` their sum.
pub fn translational_dynamics(
    state: &VrbState,
    forces_i: &[Vector3<f64>],
    f_cm_total: &Vector3<f64>,
    masses: &[f64],
    omega_dot_b: &Vector3<f64>,
) -> Vec<Vector3<f64>> {
    let t = state.dcm();
    let m_tot: f64 = masses.iter().sum();
    let w = state.omega_b;
    (0..state.len())
        .map(|i| {
            let (r, v) = (state.rel_pos_b[i], state.rel_vel_b[i]);
            -2.0 * w.cross(&v) - omega_dot_b.cross(&r) - w.cross(&w.cross(&r))
                + t * (forces_i[i] / masses[i] - f_cm_total / m_tot)
        })
        .collect()
}

/// Full state derivative under inertial agent forces.
pub fn derivative(
    state: &VrbState,
    masses: &[f64],
    forces_i: &[Vector3<f64>],
    mode: InertiaSolve,
) -> Result<VrbDerivative, DynamicsError> {
    let t = state.dcm();
    let f_tot: Vector3<f64> = forces_i.iter().sum();
    let m_tot: f64 = masses.iter().sum();
    let forces_b: Vec<_> = forces_i.iter().map(|f| t * f).collect();
    let inert = inertia(&state.rel_pos_b, &state.rel_vel_b, masses);
    let omega_dot = rotational_dynamics(state, &inert, &forces_b, masses, mode)?;
    let rel_acc = translational_dynamics(state, forces_i, &f_tot, masses, &omega_dot);
    Ok(VrbDerivative {
        r_cm: state.v_cm,
        v_cm: f_tot / m_tot,
        q: attitude::kinematics(&state.q, &state.omega_b),
        omega_b: omega_dot,
        rel_pos_b: state.rel_vel_b.clone(),
        rel_vel_b: rel_acc,
    })
}

/// Inertial agent velocities from the aggregate state.
pub fn translational_kinematics(state: &VrbState) -> Vec<Vector3<f64>> {
    let tt = state.dcm().transpose();
    (0..state.len())
        .map(|i| state.v_cm + tt * (state.rel_vel_b[i] + state.omega_b.cross(&state.rel_pos_b[i])))
        .collect()
}

pub fn agent_positions(state: &VrbState) -> Vec<Vector3<f64>> {
    let tt = state.dcm().transpose();
    state.rel_pos_b.iter().map(|r| state.r_cm + tt * r).collect()
}

pub fn to_particles(state: &VrbState, masses: &[f64]) -> ParticleSystem {
    ParticleSystem::new(masses.to_vec(), &agent_positions(state), &translational_kinematics(state))
}

/// Builds the aggregate state from absolute agent states and an attitude.
/// The body rate is the mass-weighted least-squares rigid rate, which is
/// the rate that leaves no angular momentum in the relative motion.
pub fn from_particles(sys: &ParticleSystem, q: Quaternion<f64>, mode: InertiaSolve) -> VrbState {
    let t = attitude::dcm(&q);
    let cm = sys.center_of_mass();
    let vcm = sys.cm_velocity();
    let n = sys.len();
    let rel_pos_b: Vec<_> = (0..n).map(|i| t * (sys.pos(i) - cm)).collect();
    let rel_vel_app: Vec<_> = (0..n).map(|i| t * (sys.vel(i) - vcm)).collect();
    let inert = inertia(&rel_pos_b, &vec![Vector3::zeros(); n], &sys.masses);
    let mut h = Vector3::zeros();
    for i in 0..n {
        h += sys.masses[i] * rel_pos_b[i].cross(&rel_vel_app[i]);
    }
    let rtol = match mode {
        InertiaSolve::Full => 1e-12,
        InertiaSolve::Pseudo { rtol } => rtol,
    };
    let omega = solve_inertia(&inert.i_cm_b, &h, InertiaSolve::Pseudo { rtol }).unwrap_or_else(|_| Vector3::zeros());
    let rel_vel_b = (0..n).map(|i| rel_vel_app[i] - omega.cross(&rel_pos_b[i])).collect();
    VrbState {
        r_cm: cm,
        v_cm: vcm,
        q,
        omega_b: omega,
        rel_pos_b,
        rel_vel_b,
    }
}

/// Angular momentum about the CM, inertial frame.
pub fn angular_momentum(state: &VrbState, masses: &[f64]) -> Vector3<f64> {
    let inert = inertia(&state.rel_pos_b, &state.rel_vel_b, masses);
    let mut h = inert.i_cm_b * state.omega_b;
    for i in 0..state.len() {
        h += masses[i] * state.rel_pos_b[i].cross(&state.rel_vel_b[i]);
    }
    state.dcm().transpose() * h
}

/// Linear momentum of each agent, inertial frame.
pub fn linear_momenta(state: &VrbState, masses: &[f64]) -> Vec<Vector3<f64>> {
    translational_kinematics(state)
        .into_iter()
        .zip(masses)
        .map(|(v, m)| *m * v)
        .collect()
}

/// Mass-weighted sums of relative positions and velocities; both vanish by
/// definition of the CM.
pub fn cm_residuals(state: &VrbState, masses: &[f64]) -> (f64, f64) {
    let mut p = Vector3::zeros();
    let mut v = Vector3::zeros();
    for i in 0..state.len() {
        p += masses[i] * state.rel_pos_b[i];
        v += masses[i] * state.rel_vel_b[i];
    }
    (p.norm(), v.norm())
}

/// Moves the body-rate component along near-null principal axes into the
/// relative velocities. Inertial agent velocities are unchanged.
pub fn regauge_null_axes(state: &mut VrbState, masses: &[f64], rtol: f64) {
    let inert = inertia(&state.rel_pos_b, &state.rel_vel_b, masses);
    for n in null_axes(&inert.i_cm_b, rtol) {
        let dw = n * n.dot(&state.omega_b);
        state.omega_b -= dw;
        for i in 0..state.len() {
            let r = state.rel_pos_b[i];
            state.rel_vel_b[i] += dw.cross(&r);
        }
    }
}
