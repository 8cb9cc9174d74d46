//! Scalar-first attitude quaternions and direction cosine matrices.
//!
//! A quaternion `q = [q0, q1, q2, q3]` describes the formation body frame.
//! [`dcm`] returns the inertial-to-body matrix `[T]_I^b`, whose rows are the
//! body axes written in inertial coordinates. Rates are body rates `[p, q, r]`.

use nalgebra::{Matrix3, Matrix4, Quaternion, Vector3, Vector4};

/// Identity attitude.
pub fn identity() -> Quaternion<f64> {
    Quaternion::new(1.0, 0.0, 0.0, 0.0)
}

/// Scalar-first components `[q0, q1, q2, q3]`.
pub fn components(q: &Quaternion<f64>) -> [f64; 4] {
    [q.w, q.i, q.j, q.k]
}

/// The 4x4 rate matrix of the quaternion kinematic equation, `q_dot = 0.5 * omega_matrix * q`.
pub fn omega_matrix(omega_b: &Vector3<f64>) -> Matrix4<f64> {
    let (p, q, r) = (omega_b.x, omega_b.y, omega_b.z);
    #[rustfmt::skip]
    let m = Matrix4::new(
        0.0, -p,  -q,  -r,
        p,   0.0,  r,  -q,
        q,  -r,   0.0,  p,
        r,   q,   -p,  0.0,
    );
    m
}

/// Quaternion rate for body angular velocity `omega_b`.
pub fn kinematics(q: &Quaternion<f64>, omega_b: &Vector3<f64>) -> Quaternion<f64> {
    let v = Vector4::new(q.w, q.i, q.j, q.k);
    let d = 0.5 * omega_matrix(omega_b) * v;
    Quaternion::new(d[0], d[1], d[2], d[3])
}

/// Rescales to unit norm. Returns the norm before rescaling.
pub fn step_normalize(q: &mut Quaternion<f64>) -> f64 {
    let n = q.norm();
    *q /= n;
    n
}

/// Inertial-to-body direction cosine matrix.
pub fn dcm(q: &Quaternion<f64>) -> Matrix3<f64> {
    let (q0, q1, q2, q3) = (q.w, q.i, q.j, q.k);
    Matrix3::new(
        q0 * q0 + q1 * q1 - q2 * q2 - q3 * q3,
        2.0 * (q1 * q2 + q0 * q3),
        2.0 * (q1 * q3 - q0 * q2),
        2.0 * (q1 * q2 - q0 * q3),
        q0 * q0 - q1 * q1 + q2 * q2 - q3 * q3,
        2.0 * (q2 * q3 + q0 * q1),
        2.0 * (q1 * q3 + q0 * q2),
        2.0 * (q2 * q3 - q0 * q1),
        q0 * q0 - q1 * q1 - q2 * q2 + q3 * q3,
    )
}

/// Quaternion of an inertial-to-body DCM, largest-component branch.
/// The result has `q0 >= 0`.
pub fn from_dcm(t: &Matrix3<f64>) -> Quaternion<f64> {
    let tr = t.trace();
    let cands = [
        1.0 + tr,
        1.0 + 2.0 * t[(0, 0)] - tr,
        1.0 + 2.0 * t[(1, 1)] - tr,
        1.0 + 2.0 * t[(2, 2)] - tr,
    ];
    let (idx, &big) = cands
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .expect("four candidates");
    let s = big.sqrt(); // 2|q_idx|
    let q = match idx {
        0 => Quaternion::new(
            0.5 * s,
            (t[(1, 2)] - t[(2, 1)]) / (2.0 * s),
            (t[(2, 0)] - t[(0, 2)]) / (2.0 * s),
            (t[(0, 1)] - t[(1, 0)]) / (2.0 * s),
        ),
        1 => Quaternion::new(
            (t[(1, 2)] - t[(2, 1)]) / (2.0 * s),
            0.5 * s,
            (t[(0, 1)] + t[(1, 0)]) / (2.0 * s),
            (t[(0, 2)] + t[(2, 0)]) / (2.0 * s),
        ),
        2 => Quaternion::new(
            (t[(2, 0)] - t[(0, 2)]) / (2.0 * s),
            (t[(0, 1)] + t[(1, 0)]) / (2.0 * s),
            0.5 * s,
            (t[(1, 2)] + t[(2, 1)]) / (2.0 * s),
        ),
        _ => Quaternion::new(
            (t[(0, 1)] - t[(1, 0)]) / (2.0 * s),
            (t[(0, 2)] + t[(2, 0)]) / (2.0 * s),
            (t[(1, 2)] + t[(2, 1)]) / (2.0 * s),
            0.5 * s,
        ),
    };
    let q = q.normalize();
    if q.w < 0.0 {
        -q
    } else {
        q
    }
}

/// 3-2-1 Euler angles `[roll, pitch, yaw]` in radians from an inertial-to-body DCM.
pub fn euler321_from_dcm(t: &Matrix3<f64>) -> Vector3<f64> {
    let roll = t[(1, 2)].atan2(t[(2, 2)]);
    let pitch = -t[(0, 2)].clamp(-1.0, 1.0).asin();
    let yaw = t[(0, 1)].atan2(t[(0, 0)]);
    Vector3::new(roll, pitch, yaw)
}

/// 3-2-1 Euler angles `[roll, pitch, yaw]` in radians.
pub fn euler321(q: &Quaternion<f64>) -> Vector3<f64> {
    euler321_from_dcm(&dcm(q))
}

/// Attitude quaternion for 3-2-1 Euler angles `[roll, pitch, yaw]` in radians.
pub fn from_euler321(angles: &Vector3<f64>) -> Quaternion<f64> {
    let (sr, cr) = (0.5 * angles.x).sin_cos();
    let (sp, cp) = (0.5 * angles.y).sin_cos();
    let (sy, cy) = (0.5 * angles.z).sin_cos();
    Quaternion::new(
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    )
}

/// Error quaternion taking the desired body frame to the actual one, on the
/// short-rotation branch (`q0 >= 0`). Its vector part is half the error
/// rotation expressed in body axes for small errors.
pub fn error(q: &Quaternion<f64>, q_des: &Quaternion<f64>) -> Quaternion<f64> {
    let e = q_des.conjugate() * q;
    if e.w < 0.0 {
        -e
    } else {
        e
    }
}

/// Rotation angle of an attitude error quaternion, radians in `[0, pi]`.
pub fn error_angle(e: &Quaternion<f64>) -> f64 {
    2.0 * e.imag().norm().atan2(e.w.abs())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

    #[test]
    fn zero_rate_gives_zero_derivative() {
        let q = Quaternion::new(0.3, -0.5, 0.1, 0.8).normalize();
        let d = kinematics(&q, &Vector3::zeros());
        assert_eq!(components(&d), [0.0; 4]);
    }

    #[test]
    fn yaw_rate_from_identity() {
        let d = kinematics(&identity(), &Vector3::new(0.0, 0.0, 0.7));
        assert_eq!(components(&d), [0.0, 0.0, 0.0, 0.35]);
    }

    #[test]
    fn dcm_of_yaw_quarter_turn() {
        let q = Quaternion::new(FRAC_PI_4.cos(), 0.0, 0.0, FRAC_PI_4.sin());
        let t = dcm(&q);
        // body x axis is inertial +y
        assert!((t.row(0) - Vector3::new(0.0, 1.0, 0.0).transpose()).norm() < 1e-15);
        let e = euler321(&q);
        assert!((e.z - FRAC_PI_2).abs() < 1e-14);
    }

    #[test]
    fn dcm_round_trip_all_branches() {
        let samples = [
            Quaternion::new(0.9, 0.1, -0.3, 0.2),
            Quaternion::new(0.05, 0.9, 0.3, -0.1),
            Quaternion::new(0.01, 0.2, -0.95, 0.1),
            Quaternion::new(0.02, -0.1, 0.2, 0.97),
        ];
        for q in samples {
            let q = q.normalize();
            let back = from_dcm(&dcm(&q));
            let same = if q.w < 0.0 { -q } else { q };
            assert!((back.coords - same.coords).norm() < 1e-12, "{q:?} -> {back:?}");
            let t = dcm(&q);
            assert!((t.transpose() * t - Matrix3::identity()).amax() < 1e-12);
        }
    }

    #[test]
    fn euler_round_trip() {
        let a = Vector3::new(0.3, -0.4, 2.5);
        let q = from_euler321(&a);
        assert!((euler321(&q) - a).norm() < 1e-12);
    }

    #[test]
    fn error_is_sign_invariant() {
        let q = Quaternion::new(0.7, 0.1, 0.2, 0.3).normalize();
        let qd = from_euler321(&Vector3::new(0.0, 0.0, -FRAC_PI_2));
        let a = error(&q, &qd);
        let b = error(&-q, &qd);
        assert!((a.coords - b.coords).norm() < 1e-15);
        assert!(a.w >= 0.0);
    }
}
