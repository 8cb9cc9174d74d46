//! LQR waypoint guidance for the formation and for individual agents.

use nalgebra::{DMatrix, Matrix3, Quaternion, SymmetricEigen, Vector2, Vector3};
use thiserror::Error;

use crate::allocation::WrenchCommand;
use crate::attitude;
use crate::care::{solve_care, CareError, CareSolution};
use crate::dynamics::{InertiaTensor, VrbState};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GuidanceError {
    #[error("attitude gains are stale: inertia changed by {change:.4} (threshold {threshold})")]
    StaleGains { change: f64, threshold: f64 },
    #[error(transparent)]
    Care(#[from] CareError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Hold {
    #[default]
    Stop,
    FlyThrough,
}

/// Target state of the CM and the body frame. Angles are radians.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Waypoint {
    pub r_cm_des: Vector3<f64>,
    pub v_cm_des: Vector3<f64>,
    /// 3-2-1 Euler angles `[roll, pitch, yaw]`.
    pub sigma_des: Vector3<f64>,
    pub omega_b_des: Vector3<f64>,
    pub hold: Hold,
}

impl Waypoint {
    pub fn stop_at(r: Vector3<f64>) -> Self {
        Self {
            r_cm_des: r,
            v_cm_des: Vector3::zeros(),
            sigma_des: Vector3::zeros(),
            omega_b_des: Vector3::zeros(),
            hold: Hold::Stop,
        }
    }

    pub fn q_des(&self) -> Quaternion<f64> {
        attitude::from_euler321(&self.sigma_des)
    }
}

/// Diagonal state weight and scalar input weight of one double-integrator channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LqrWeights {
    pub q: [f64; 2],
    pub r: f64,
}

/// Double-integrator design `x' = [[0, 1], [0, 0]] x + [0, b] u`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqrDesign {
    pub weights: LqrWeights,
    pub b: f64,
    pub k: Vector2<f64>,
    pub care: CareSolution,
}

impl LqrDesign {
    pub fn solve(weights: LqrWeights, b: f64) -> Result<Self, CareError> {
        let a = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0]);
        let bm = DMatrix::from_row_slice(2, 1, &[0.0, b]);
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&weights.q));
        let r = DMatrix::from_element(1, 1, weights.r);
        let care = solve_care(&a, &bm, &q, &r)?;
        Ok(Self {
            weights,
            b,
            k: Vector2::new(care.k[(0, 0)], care.k[(0, 1)]),
            care,
        })
    }

    pub fn input(&self, e: f64, e_dot: f64) -> f64 {
        -(self.k[0] * e + self.k[1] * e_dot)
    }
}

/// Per-principal-axis attitude designs. Axes whose moment is below
/// `null_rtol` of the largest get no gain.
#[derive(Debug, Clone, PartialEq)]
pub struct AttitudeDesign {
    /// Principal axes as columns, body frame.
    pub axes: Matrix3<f64>,
    pub moments: Vector3<f64>,
    pub channels: [Option<LqrDesign>; 3],
    pub inertia_at_solve: Matrix3<f64>,
}

impl AttitudeDesign {
    pub fn solve(weights: LqrWeights, i_cm: &Matrix3<f64>, null_rtol: f64) -> Result<Self, CareError> {
        let eig = SymmetricEigen::new(*i_cm);
        let max = eig.eigenvalues.amax();
        let mut channels = [None, None, None];
        for (k, ch) in channels.iter_mut().enumerate() {
            let ik = eig.eigenvalues[k];
            if ik > null_rtol * max && ik > 0.0 {
                *ch = Some(LqrDesign::solve(weights, 1.0 / ik)?);
            }
        }
        Ok(Self {
            axes: eig.eigenvectors,
            moments: eig.eigenvalues,
            channels,
            inertia_at_solve: *i_cm,
        })
    }

    /// Axes with control authority, as body-frame unit vectors.
    pub fn controlled_axes(&self) -> Vec<Vector3<f64>> {
        (0..3)
            .filter(|&k| self.channels[k].is_some())
            .map(|k| self.axes.column(k).into_owned())
            .collect()
    }

    pub fn designs(&self) -> impl Iterator<Item = &LqrDesign> {
        self.channels.iter().flatten()
    }

    /// Relative Frobenius change of `i_cm` since the gains were solved.
    pub fn inertia_change(&self, i_cm: &Matrix3<f64>) -> f64 {
        let n = i_cm.norm();
        if n == 0.0 {
            return 0.0;
        }
        (i_cm - self.inertia_at_solve).norm() / n
    }

    pub fn torque(&self, att_err: &Vector3<f64>, rate_err: &Vector3<f64>) -> Vector3<f64> {
        let mut tau = Vector3::zeros();
        for k in 0..3 {
            if let Some(d) = &self.channels[k] {
                let axis = self.axes.column(k);
                tau += axis * d.input(axis.dot(att_err), axis.dot(rate_err));
            }
        }
        tau
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceDesign {
    pub translation: LqrDesign,
    pub attitude: AttitudeDesign,
    pub attitude_weights: LqrWeights,
    pub total_mass: f64,
    pub gravity: f64,
    /// Relative inertia change beyond which attitude gains are stale.
    pub schedule_threshold: f64,
    pub null_rtol: f64,
}

pub const DEFAULT_TRANSLATION: LqrWeights = LqrWeights { q: [10.0, 4.0], r: 10.0 };
pub const DEFAULT_ATTITUDE: LqrWeights = LqrWeights { q: [20.0, 5.0], r: 1.0 };

impl GuidanceDesign {
    pub fn new(
        translation: LqrWeights,
        attitude: LqrWeights,
        total_mass: f64,
        i_cm: &Matrix3<f64>,
        gravity: f64,
        schedule_threshold: f64,
        null_rtol: f64,
    ) -> Result<Self, CareError> {
        Ok(Self {
            translation: LqrDesign::solve(translation, 1.0 / total_mass)?,
            attitude: AttitudeDesign::solve(attitude, i_cm, null_rtol)?,
            attitude_weights: attitude,
            total_mass,
            gravity,
            schedule_threshold,
            null_rtol,
        })
    }

    /// Re-solves the attitude channels for a new inertia.
    pub fn reschedule(&mut self, i_cm: &Matrix3<f64>) -> Result<(), CareError> {
        self.attitude = AttitudeDesign::solve(self.attitude_weights, i_cm, self.null_rtol)?;
        Ok(())
    }

    pub fn all_designs(&self) -> impl Iterator<Item = &LqrDesign> {
        std::iter::once(&self.translation).chain(self.attitude.designs())
    }
}

/// Attitude error as twice the vector part of the short-way error
/// quaternion, and the body rate error.
pub fn attitude_errors(state: &VrbState, wp: &Waypoint) -> (Vector3<f64>, Vector3<f64>) {
    let e = attitude::error(&state.q, &wp.q_des());
    (2.0 * e.imag(), state.omega_b - wp.omega_b_des)
}

pub fn wrench_command(
    state: &VrbState,
    inertia: &InertiaTensor,
    wp: &Waypoint,
    design: &GuidanceDesign,
) -> Result<WrenchCommand, GuidanceError> {
    let change = design.attitude.inertia_change(&inertia.i_cm_b);
    if change > design.schedule_threshold {
        return Err(GuidanceError::StaleGains {
            change,
            threshold: design.schedule_threshold,
        });
    }
    let dr = state.r_cm - wp.r_cm_des;
    let dv = state.v_cm - wp.v_cm_des;
    let tr = &design.translation;
    let f_i = Vector3::from_fn(|k, _| tr.input(dr[k], dv[k])) + Vector3::z() * (design.total_mass * design.gravity);
    let (att, rate) = attitude_errors(state, wp);
    Ok(WrenchCommand {
        f_cm_b: state.dcm() * f_i,
        tau_cm_b: design.attitude.torque(&att, &rate),
    })
}

/// Desired agent position and velocity implied by a rigid motion of the
/// formation through `(r_cm, v_cm, q, omega_b)`.
pub fn desired_agent_states(
    r_cm: &Vector3<f64>,
    v_cm: &Vector3<f64>,
    q: &Quaternion<f64>,
    omega_b: &Vector3<f64>,
    rel_pos_b: &[Vector3<f64>],
) -> Vec<(Vector3<f64>, Vector3<f64>)> {
    let tt = attitude::dcm(q).transpose();
    rel_pos_b
        .iter()
        .map(|r| (r_cm + tt * r, v_cm + tt * omega_b.cross(r)))
        .collect()
}

/// Per-agent translation designs whose gains are `m_i / M` times the
/// formation design, so the agents together reproduce the CM loop.
pub fn local_designs(weights: LqrWeights, masses: &[f64]) -> Result<Vec<LqrDesign>, CareError> {
    let m_tot: f64 = masses.iter().sum();
    masses
        .iter()
        .map(|m| {
            let w = LqrWeights {
                q: weights.q,
                r: weights.r * (m_tot / m).powi(2),
            };
            LqrDesign::solve(w, 1.0 / m)
        })
        .collect()
}

/// Local LQR force on one agent (inertial frame) including its weight.
pub fn local_agent_control(
    r: &Vector3<f64>,
    v: &Vector3<f64>,
    r_des: &Vector3<f64>,
    v_des: &Vector3<f64>,
    mass: f64,
    design: &LqrDesign,
    gravity: f64,
) -> Vector3<f64> {
    let dr = r - r_des;
    let dv = v - v_des;
    Vector3::from_fn(|k, _| design.input(dr[k], dv[k])) + Vector3::z() * (mass * gravity)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::care::HURWITZ_MARGIN;
    use crate::dynamics::inertia;

    const G: f64 = 9.81;

    fn triangle() -> Vec<Vector3<f64>> {
        let rc = 4.0 / 3f64.sqrt();
        vec![
            Vector3::new(-rc / 2.0, 2.0, 0.0),
            Vector3::new(-rc / 2.0, -2.0, 0.0),
            Vector3::new(rc, 0.0, 0.0),
        ]
    }

    fn at_rest(r: Vector3<f64>, q: Quaternion<f64>) -> VrbState {
        VrbState {
            r_cm: r,
            v_cm: Vector3::zeros(),
            q,
            omega_b: Vector3::zeros(),
            rel_pos_b: triangle(),
            rel_vel_b: vec![Vector3::zeros(); 3],
        }
    }

    fn design() -> (GuidanceDesign, InertiaTensor) {
        let it = inertia(&triangle(), &[Vector3::zeros(); 3], &[1.0; 3]);
        let d = GuidanceDesign::new(DEFAULT_TRANSLATION, DEFAULT_ATTITUDE, 3.0, &it.i_cm_b, G, 0.05, 1e-2).unwrap();
        (d, it)
    }

    #[test]
    fn zero_error_gives_feedforward_only() {
        let (d, it) = design();
        let wp = Waypoint::stop_at(Vector3::new(15.0, 15.0, 15.0));
        let cmd = wrench_command(&at_rest(wp.r_cm_des, attitude::identity()), &it, &wp, &d).unwrap();
        assert_eq!(cmd.f_cm_b, Vector3::new(0.0, 0.0, 3.0 * G));
        assert_eq!(cmd.tau_cm_b, Vector3::zeros());
    }

    #[test]
    fn vertical_error_uses_position_gain() {
        let (d, it) = design();
        let wp = Waypoint::stop_at(Vector3::zeros());
        let cmd = wrench_command(&at_rest(Vector3::z(), attitude::identity()), &it, &wp, &d).unwrap();
        let k_r = d.translation.k[0];
        assert!((cmd.f_cm_b - Vector3::new(0.0, 0.0, 3.0 * G - k_r)).norm() < 1e-12);
        assert_eq!(cmd.tau_cm_b, Vector3::zeros());
    }

    #[test]
    fn translation_gains_match_closed_form() {
        // A = [[0,1],[0,0]], B = [0, b], Q = diag(q1, q2), R = r:
        // k1 = sqrt(q1 / r), k2 = sqrt(q2 / r + 2 k1 / b)
        let (d, _) = design();
        let (q1, q2, r, b) = (10.0f64, 4.0, 10.0, 1.0 / 3.0);
        let k1 = (q1 / r).sqrt();
        let k2 = (q2 / r + 2.0 * k1 / b).sqrt();
        assert!((d.translation.k[0] - k1).abs() < 1e-10);
        assert!((d.translation.k[1] - k2).abs() < 1e-10);
    }

    #[test]
    fn every_design_is_hurwitz_and_accurate() {
        let (d, _) = design();
        assert_eq!(d.all_designs().count(), 4);
        for x in d.all_designs() {
            assert!(x.care.residual < 1e-8);
            assert!(x.care.max_real_eig < HURWITZ_MARGIN);
        }
    }

    #[test]
    fn per_axis_design_matches_full_attitude_care() {
        let rel = vec![
            Vector3::new(1.5, 0.2, -0.3),
            Vector3::new(-0.7, 1.1, 0.4),
            Vector3::new(-0.3, -1.4, 0.6),
            Vector3::new(-0.5, 0.1, -0.7),
        ];
        let it = inertia(&rel, &[Vector3::zeros(); 4], &[1.0; 4]).i_cm_b;
        let ad = AttitudeDesign::solve(DEFAULT_ATTITUDE, &it, 1e-2).unwrap();
        let mut a = DMatrix::zeros(6, 6);
        a.view_mut((0, 3), (3, 3)).fill_with_identity();
        let mut b = DMatrix::zeros(6, 3);
        b.view_mut((3, 0), (3, 3)).copy_from(&it.try_inverse().unwrap());
        let q = DMatrix::from_diagonal(&nalgebra::DVector::from_column_slice(&[20.0, 20.0, 20.0, 5.0, 5.0, 5.0]));
        let full = solve_care(&a, &b, &q, &DMatrix::identity(3, 3)).unwrap();
        let att = Vector3::new(0.1, -0.2, 0.05);
        let rate = Vector3::new(-0.03, 0.07, 0.2);
        let x = nalgebra::DVector::from_iterator(6, att.iter().chain(rate.iter()).copied());
        let tau_full = -(&full.k * x);
        let tau = ad.torque(&att, &rate);
        for k in 0..3 {
            assert!((tau[k] - tau_full[k]).abs() < 1e-9);
        }
    }

    #[test]
    fn collinear_axis_has_no_gain() {
        let rel = [Vector3::new(2.0, 0.0, 0.0), Vector3::new(-2.0, 0.0, 0.0)];
        let it = inertia(&rel, &[Vector3::zeros(); 2], &[1.0; 2]).i_cm_b;
        let ad = AttitudeDesign::solve(DEFAULT_ATTITUDE, &it, 1e-2).unwrap();
        assert_eq!(ad.controlled_axes().len(), 2);
        let tau = ad.torque(&Vector3::new(0.3, 0.0, 0.0), &Vector3::new(0.1, 0.0, 0.0));
        assert!(tau.norm() < 1e-15);
    }

    #[test]
    fn quaternion_sign_does_not_change_torque() {
        let (d, it) = design();
        let mut wp = Waypoint::stop_at(Vector3::zeros());
        wp.sigma_des = Vector3::new(0.0, 0.0, -90f64.to_radians());
        let q = attitude::from_euler321(&Vector3::new(0.2, -0.1, 1.0));
        let a = wrench_command(&at_rest(Vector3::zeros(), q), &it, &wp, &d).unwrap();
        let b = wrench_command(&at_rest(Vector3::zeros(), -q), &it, &wp, &d).unwrap();
        assert!((a.tau_cm_b - b.tau_cm_b).norm() < 1e-14);
        assert!(a.tau_cm_b.norm() > 0.1);
    }

    #[test]
    fn stale_gains_are_reported() {
        let (d, _) = design();
        let rel = vec![Vector3::new(4.0, 0.0, 0.0), Vector3::new(-4.0, 0.0, 0.0), Vector3::new(0.0, 0.5, 0.0)];
        let it = inertia(&rel, &[Vector3::zeros(); 3], &[1.0; 3]);
        let wp = Waypoint::stop_at(Vector3::zeros());
        assert!(matches!(
            wrench_command(&at_rest(Vector3::zeros(), attitude::identity()), &it, &wp, &d),
            Err(GuidanceError::StaleGains { .. })
        ));
    }

    #[test]
    fn desired_states() {
        let rel = [Vector3::new(2.0, 0.0, 0.0)];
        let out = desired_agent_states(&Vector3::zeros(), &Vector3::x(), &attitude::identity(), &Vector3::zeros(), &rel);
        assert_eq!(out[0].1, Vector3::x());
        let out = desired_agent_states(&Vector3::zeros(), &Vector3::zeros(), &attitude::identity(), &Vector3::z(), &rel);
        assert!((out[0].1 - Vector3::new(0.0, 2.0, 0.0)).norm() < 1e-15);

        let c = Vector3::new(15.0, 15.0, 15.0);
        let q = attitude::from_euler321(&Vector3::new(0.0, 0.0, -90f64.to_radians()));
        let out = desired_agent_states(&c, &Vector3::zeros(), &q, &Vector3::zeros(), &triangle());
        for (r, (p, _)) in triangle().iter().zip(&out) {
            // -90 deg yaw: body x maps to inertial -y, body y to inertial +x
            let expect = c + Vector3::new(r.y, -r.x, r.z);
            assert!((p - expect).norm() < 1e-12);
        }
    }

    #[test]
    fn local_control_examples() {
        let masses = [1.0, 1.0, 1.0];
        let ds = local_designs(DEFAULT_TRANSLATION, &masses).unwrap();
        let (d, _) = design();
        assert!((ds[0].k - d.translation.k / 3.0).norm() < 1e-10);
        let r = Vector3::new(1.0, 2.0, 3.0);
        let f = local_agent_control(&r, &Vector3::zeros(), &r, &Vector3::zeros(), 1.0, &ds[0], G);
        assert_eq!(f, Vector3::new(0.0, 0.0, G));
        let f = local_agent_control(&(r + Vector3::x()), &Vector3::zeros(), &r, &Vector3::zeros(), 1.0, &ds[0], G);
        assert!((f - Vector3::new(-ds[0].k[0], 0.0, G)).norm() < 1e-12);
    }
}
