//! Distance constraints between point-mass agents and the stabilized
//! constraint force that holds them on the constraint manifold.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use thiserror::Error;

use crate::linalg::Svd;

/// Separations below this are treated as coincident agents.
pub const EPS_SEP: f64 = 1e-6;
/// Cholesky pivots below this fraction of the largest diagonal entry mark a rank-deficient system.
pub const PIVOT_RTOL: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConstraintError {
    #[error("agents {i} and {j} are {separation:e} m apart; constraint direction undefined")]
    DegenerateGeometry { i: usize, j: usize, separation: f64 },
    #[error("constraint system is rank deficient (pivot {pivot:e} at row {row})")]
    RankDeficient { row: usize, pivot: f64 },
}

/// Point masses with stacked agent-major coordinates `[r1; r2; ...; rN]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticleSystem {
    pub masses: Vec<f64>,
    pub positions: DVector<f64>,
    pub velocities: DVector<f64>,
}

impl ParticleSystem {
    pub fn new(masses: Vec<f64>, positions: &[Vector3<f64>], velocities: &[Vector3<f64>]) -> Self {
        assert_eq!(masses.len(), positions.len());
        assert_eq!(masses.len(), velocities.len());
        Self {
            masses,
            positions: stack(positions),
            velocities: stack(velocities),
        }
    }

    pub fn len(&self) -> usize {
        self.masses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masses.is_empty()
    }

    pub fn pos(&self, i: usize) -> Vector3<f64> {
        self.positions.fixed_rows::<3>(3 * i).into_owned()
    }

    pub fn vel(&self, i: usize) -> Vector3<f64> {
        self.velocities.fixed_rows::<3>(3 * i).into_owned()
    }

    pub fn total_mass(&self) -> f64 {
        self.masses.iter().sum()
    }

    pub fn center_of_mass(&self) -> Vector3<f64> {
        let mut s = Vector3::zeros();
        for (i, m) in self.masses.iter().enumerate() {
            s += *m * self.pos(i);
        }
        s / self.total_mass()
    }

    pub fn cm_velocity(&self) -> Vector3<f64> {
        let mut s = Vector3::zeros();
        for (i, m) in self.masses.iter().enumerate() {
            s += *m * self.vel(i);
        }
        s / self.total_mass()
    }

    /// Diagonal of `M^-1` in stacked coordinates.
    pub fn inv_mass_diag(&self) -> DVector<f64> {
        DVector::from_fn(3 * self.len(), |k, _| 1.0 / self.masses[k / 3])
    }
}

pub fn stack(v: &[Vector3<f64>]) -> DVector<f64> {
    DVector::from_iterator(3 * v.len(), v.iter().flat_map(|x| [x.x, x.y, x.z]))
}

pub fn unstack(v: &DVector<f64>) -> Vec<Vector3<f64>> {
    (0..v.len() / 3)
        .map(|i| v.fixed_rows::<3>(3 * i).into_owned())
        .collect()
}

/// One pairwise distance constraint. `schedule[p]` is the desired distance
/// while schedule phase `p` is active.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceConstraint {
    pub agent_i: usize,
    pub agent_j: usize,
    pub schedule: Vec<f64>,
}

/// Baumgarte gains: `alpha`, `beta` in 1/s, `gamma` in 1/s^3.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaumgarteGains {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for BaumgarteGains {
    fn default() -> Self {
        Self {
            alpha: 2.0,
            beta: 2.0,
            gamma: 0.5,
        }
    }
}

impl BaumgarteGains {
    /// Largest real root of `s^3 + 2 alpha s^2 + beta^2 s + gamma`, the slowest
    /// real mode of the closed-loop constraint error.
    pub fn slowest_real_root(&self) -> f64 {
        let (a2, a1, a0) = (2.0 * self.alpha, self.beta * self.beta, self.gamma);
        let companion = Matrix3::new(-a2, -a1, -a0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0);
        companion
            .complex_eigenvalues()
            .iter()
            .filter(|z| z.im.abs() <= 1e-9 * (1.0 + z.re.abs()))
            .map(|z| z.re)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// How `(J M^-1 J^T) lambda = rhs` is solved.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SolveMode {
    /// Cholesky; fails with `RankDeficient` on a small pivot.
    Exact,
    /// Spectral solve that rolls off eigen-directions below `kappa` times the
    /// largest eigenvalue. Identical to `Exact` on well-conditioned systems.
    Tapered { kappa: f64 },
}

impl Default for SolveMode {
    fn default() -> Self {
        SolveMode::Tapered { kappa: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub constraints: Vec<DistanceConstraint>,
    pub gains: BaumgarteGains,
    /// Per-constraint accumulated integral of `c` (m s).
    pub integral_state: Vec<f64>,
    /// Index into each constraint's schedule.
    pub phase: usize,
    pub solve_mode: SolveMode,
}

impl ConstraintSet {
    pub fn new(constraints: Vec<DistanceConstraint>, gains: BaumgarteGains) -> Self {
        let m = constraints.len();
        Self {
            constraints,
            gains,
            integral_state: vec![0.0; m],
            phase: 0,
            solve_mode: SolveMode::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.constraints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.constraints.is_empty()
    }

    pub fn phase_count(&self) -> usize {
        self.constraints.first().map_or(1, |c| c.schedule.len())
    }

    pub fn desired(&self) -> Vec<f64> {
        self.constraints.iter().map(|c| c.schedule[self.phase]).collect()
    }

    /// Switches the schedule phase and clears the integral.
    pub fn set_phase(&mut self, phase: usize) {
        assert!(phase < self.phase_count());
        self.phase = phase;
        self.integral_state.iter_mut().for_each(|x| *x = 0.0);
    }

    pub fn advance_integral(&mut self, c: &DVector<f64>, dt: f64) {
        for (x, ck) in self.integral_state.iter_mut().zip(c.iter()) {
            *x += ck * dt;
        }
    }

    /// Seeds the integral so the current `(c, c_dot)` carries no component
    /// along the slowest closed-loop mode. Convergence is then governed by the
    /// two faster poles and does not overshoot through the slow one.
    pub fn bumpless_init(&mut self, c: &DVector<f64>, c_dot: &DVector<f64>) {
        let g = self.gains;
        let s1 = g.slowest_real_root();
        let den = s1 * s1 + 2.0 * g.alpha * s1 + g.beta * g.beta;
        for k in 0..self.len() {
            self.integral_state[k] = -((s1 + 2.0 * g.alpha) * c[k] + c_dot[k]) / den;
        }
    }

    fn unit(&self, sys: &ParticleSystem, k: usize) -> Result<(Vector3<f64>, f64), ConstraintError> {
        let ck = &self.constraints[k];
        let d = sys.pos(ck.agent_i) - sys.pos(ck.agent_j);
        let l = d.norm();
        if l < EPS_SEP {
            return Err(ConstraintError::DegenerateGeometry {
                i: ck.agent_i,
                j: ck.agent_j,
                separation: l,
            });
        }
        Ok((d / l, l))
    }
}

/// `c_k = |r_i - r_j| - d_k` for the active schedule phase.
pub fn evaluate_constraints(sys: &ParticleSystem, cs: &ConstraintSet) -> Result<DVector<f64>, ConstraintError> {
    let mut c = DVector::zeros(cs.len());
    for k in 0..cs.len() {
        let (_, l) = cs.unit(sys, k)?;
        c[k] = l - cs.constraints[k].schedule[cs.phase];
    }
    Ok(c)
}

pub fn constraint_jacobian(sys: &ParticleSystem, cs: &ConstraintSet) -> Result<DMatrix<f64>, ConstraintError> {
    let mut j = DMatrix::zeros(cs.len(), 3 * sys.len());
    for k in 0..cs.len() {
        let (u, _) = cs.unit(sys, k)?;
        let ck = &cs.constraints[k];
        j.fixed_view_mut::<1, 3>(k, 3 * ck.agent_i).copy_from(&u.transpose());
        j.fixed_view_mut::<1, 3>(k, 3 * ck.agent_j).copy_from(&(-u.transpose()));
    }
    Ok(j)
}

pub fn jacobian_rate(sys: &ParticleSystem, cs: &ConstraintSet) -> Result<DMatrix<f64>, ConstraintError> {
    let mut jd = DMatrix::zeros(cs.len(), 3 * sys.len());
    for k in 0..cs.len() {
        let (u, l) = cs.unit(sys, k)?;
        let ck = &cs.constraints[k];
        let dv = sys.vel(ck.agent_i) - sys.vel(ck.agent_j);
        let row = (dv - u * u.dot(&dv)) / l;
        jd.fixed_view_mut::<1, 3>(k, 3 * ck.agent_i).copy_from(&row.transpose());
        jd.fixed_view_mut::<1, 3>(k, 3 * ck.agent_j).copy_from(&(-row.transpose()));
    }
    Ok(jd)
}

/// Result of one constraint-force evaluation.
#[derive(Debug, Clone)]
pub struct ConstraintForce {
    /// Stacked 3N force.
    pub force: DVector<f64>,
    pub lambda: DVector<f64>,
    pub c: DVector<f64>,
    pub c_dot: DVector<f64>,
    /// Number of eigen-directions that were rolled off by the tapered solve.
    pub tapered: usize,
}

/// Stabilized constraint force without touching the integral state.
pub fn compute_constraint_force(
    sys: &ParticleSystem,
    cs: &ConstraintSet,
    f_external: &DVector<f64>,
) -> Result<ConstraintForce, ConstraintError> {
    let m = cs.len();
    if m == 0 {
        return Ok(ConstraintForce {
            force: DVector::zeros(3 * sys.len()),
            lambda: DVector::zeros(0),
            c: DVector::zeros(0),
            c_dot: DVector::zeros(0),
            tapered: 0,
        });
    }
    let c = evaluate_constraints(sys, cs)?;
    let j = constraint_jacobian(sys, cs)?;
    let jd = jacobian_rate(sys, cs)?;
    let minv = sys.inv_mass_diag();
    let c_dot = &j * &sys.velocities;

    let g = cs.gains;
    let integral = DVector::from_column_slice(&cs.integral_state);
    let rhs = -(&j * minv.component_mul(f_external))
        - &jd * &sys.velocities
        - 2.0 * g.alpha * &c_dot
        - g.beta * g.beta * &c
        - g.gamma * integral;

    let mut jm = j.clone();
    for (col, w) in minv.iter().enumerate() {
        jm.column_mut(col).scale_mut(*w);
    }
    let a = &jm * j.transpose();
    let (lambda, tapered) = match cs.solve_mode {
        SolveMode::Exact => (cholesky_solve(a, &rhs)?, 0),
        SolveMode::Tapered { kappa } => tapered_solve(a, &rhs, kappa),
    };
    Ok(ConstraintForce {
        force: j.transpose() * &lambda,
        lambda,
        c,
        c_dot,
        tapered,
    })
}

/// Stabilized constraint force; advances the integral state by `c dt` afterwards.
pub fn constraint_force(
    sys: &ParticleSystem,
    cs: &mut ConstraintSet,
    f_external: &DVector<f64>,
    dt: f64,
) -> Result<DVector<f64>, ConstraintError> {
    let out = compute_constraint_force(sys, cs, f_external)?;
    cs.advance_integral(&out.c, dt);
    Ok(out.force)
}

fn cholesky_solve(mut a: DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>, ConstraintError> {
    let n = a.nrows();
    let scale = a.diagonal().amax();
    for k in 0..n {
        let mut d = a[(k, k)];
        for p in 0..k {
            d -= a[(k, p)] * a[(k, p)];
        }
        if !(d > PIVOT_RTOL * scale) {
            return Err(ConstraintError::RankDeficient { row: k, pivot: d });
        }
        let d = d.sqrt();
        a[(k, k)] = d;
        for i in k + 1..n {
            let mut s = a[(i, k)];
            for p in 0..k {
                s -= a[(i, p)] * a[(k, p)];
            }
            a[(i, k)] = s / d;
        }
    }
    let mut y = b.clone();
    for i in 0..n {
        for p in 0..i {
            y[i] -= a[(i, p)] * y[p];
        }
        y[i] /= a[(i, i)];
    }
    for i in (0..n).rev() {
        for p in i + 1..n {
            y[i] -= a[(p, i)] * y[p];
        }
        y[i] /= a[(i, i)];
    }
    Ok(y)
}

fn tapered_solve(a: DMatrix<f64>, b: &DVector<f64>, kappa: f64) -> (DVector<f64>, usize) {
    let eig = a.symmetric_eigen();
    let amax = eig.eigenvalues.amax();
    let floor = kappa * amax;
    let proj = eig.eigenvectors.transpose() * b;
    let mut tapered = 0;
    let scaled = DVector::from_fn(proj.len(), |k, _| {
        let ev = eig.eigenvalues[k];
        if ev >= floor && ev > 0.0 {
            proj[k] / ev
        } else {
            tapered += 1;
            proj[k] * ev.max(0.0) / (floor * floor)
        }
    });
    (&eig.eigenvectors * scaled, tapered)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RigidityReport {
    pub rank: usize,
    pub required: usize,
    pub constraints: usize,
    pub is_rigid: bool,
    pub is_overconstrained: bool,
}

/// Numerical rank of `J` against the `3N - 6` rigidity count.
pub fn rigidity_check(cs: &ConstraintSet, sys: &ParticleSystem) -> Result<RigidityReport, ConstraintError> {
    let j = constraint_jacobian(sys, cs)?;
    let n = sys.len();
    let required = (3 * n).saturating_sub(6);
    let rank = if cs.is_empty() {
        0
    } else {
        let svd = Svd::new(&j);
        svd.rank(svd.max() * (3 * n) as f64 * f64::EPSILON)
    };
    Ok(RigidityReport {
        rank,
        required,
        constraints: cs.len(),
        is_rigid: rank == required,
        is_overconstrained: cs.len() > rank,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{rngs::StdRng, Rng, SeedableRng};

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    fn pair(i: usize, j: usize, d: f64) -> DistanceConstraint {
        DistanceConstraint {
            agent_i: i,
            agent_j: j,
            schedule: vec![d],
        }
    }

    fn triangle() -> (ParticleSystem, ConstraintSet) {
        let sys = ParticleSystem::new(
            vec![1.0; 3],
            &[v(1.0, 6.0, 3.0), v(8.0, 3.0, 3.0), v(7.0, 6.0, 3.0)],
            &[Vector3::zeros(); 3],
        );
        let cs = ConstraintSet::new(vec![pair(0, 1, 4.0), pair(0, 2, 4.0), pair(1, 2, 4.0)], BaumgarteGains::default());
        (sys, cs)
    }

    fn random_system(rng: &mut StdRng, n: usize) -> (ParticleSystem, ConstraintSet) {
        let pos: Vec<_> = (0..n)
            .map(|_| v(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)))
            .collect();
        let vel: Vec<_> = (0..n)
            .map(|_| v(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)))
            .collect();
        let masses = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let mut cons = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                cons.push(pair(i, j, rng.random_range(1.0..6.0)));
            }
        }
        cons.truncate(3 * n - 6);
        let mut cs = ConstraintSet::new(cons, BaumgarteGains::default());
        for x in cs.integral_state.iter_mut() {
            *x = rng.random_range(-1.0..1.0);
        }
        (ParticleSystem::new(masses, &pos, &vel), cs)
    }

    #[test]
    fn point_on_surface() {
        let sys = ParticleSystem::new(vec![1.0, 1.0], &[Vector3::zeros(), v(3.0, 4.0, 0.0)], &[Vector3::zeros(); 2]);
        let cs = ConstraintSet::new(vec![pair(0, 1, 5.0)], BaumgarteGains::default());
        assert_eq!(evaluate_constraints(&sys, &cs).unwrap()[0], 0.0);
    }

    #[test]
    fn triangle_initial_violation() {
        let (sys, cs) = triangle();
        let c = evaluate_constraints(&sys, &cs).unwrap();
        assert!((c[0] - (58f64.sqrt() - 4.0)).abs() < 1e-14);
        assert!((c[0] - 3.6158).abs() < 1e-4);
    }

    #[test]
    fn coincident_pair_is_degenerate() {
        let sys = ParticleSystem::new(vec![1.0, 1.0], &[Vector3::zeros(); 2], &[Vector3::zeros(); 2]);
        let cs = ConstraintSet::new(vec![pair(0, 1, 2.0)], BaumgarteGains::default());
        assert!(matches!(
            evaluate_constraints(&sys, &cs),
            Err(ConstraintError::DegenerateGeometry { i: 0, j: 1, .. })
        ));
        assert!(constraint_jacobian(&sys, &cs).is_err());
    }

    /// Central-difference Jacobian of `c` with respect to stacked positions.
    fn fd_jacobian(sys: &ParticleSystem, cs: &ConstraintSet, h: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(cs.len(), sys.positions.len());
        for col in 0..sys.positions.len() {
            let mut p = sys.clone();
            p.positions[col] += h;
            let mut m = sys.clone();
            m.positions[col] -= h;
            let d = (evaluate_constraints(&p, cs).unwrap() - evaluate_constraints(&m, cs).unwrap()) / (2.0 * h);
            out.set_column(col, &d);
        }
        out
    }

    #[test]
    fn jacobian_row_matches_fd() {
        let sys = ParticleSystem::new(vec![1.0, 1.0], &[Vector3::zeros(), v(3.0, 4.0, 0.0)], &[Vector3::zeros(); 2]);
        let cs = ConstraintSet::new(vec![pair(0, 1, 5.0)], BaumgarteGains::default());
        let j = constraint_jacobian(&sys, &cs).unwrap();
        let expect = [-0.6, -0.8, 0.0, 0.6, 0.8, 0.0];
        for (a, b) in j.iter().zip(expect) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((fd_jacobian(&sys, &cs, 1e-6) - j).amax() < 1e-8);
        assert_eq!(jacobian_rate(&sys, &cs).unwrap().amax(), 0.0);
    }

    #[test]
    fn jacobian_and_rate_match_fd_on_random_states() {
        let mut rng = StdRng::seed_from_u64(7);
        let h = 1e-6;
        for _ in 0..100 {
            let n = rng.random_range(3..7);
            let (sys, cs) = random_system(&mut rng, n);
            let j = constraint_jacobian(&sys, &cs).unwrap();
            let jfd = fd_jacobian(&sys, &cs, h);
            assert!((&j - &jfd).amax() / j.amax() < 1e-5);

            let shifted = |s: f64| {
                let mut p = sys.clone();
                p.positions += s * &sys.velocities;
                constraint_jacobian(&p, &cs).unwrap()
            };
            let jd_fd = (shifted(h) - shifted(-h)) / (2.0 * h);
            let jd = jacobian_rate(&sys, &cs).unwrap();
            assert!((&jd - &jd_fd).amax() / jd.amax().max(1e-12) < 1e-5);
        }
    }

    #[test]
    fn zero_residual_gives_zero_force() {
        let sys = ParticleSystem::new(vec![1.0, 1.0], &[Vector3::zeros(), v(2.0, 0.0, 0.0)], &[Vector3::zeros(); 2]);
        let mut cs = ConstraintSet::new(vec![pair(0, 1, 2.0)], BaumgarteGains::default());
        let f = constraint_force(&sys, &mut cs, &DVector::zeros(6), 0.01).unwrap();
        assert_eq!(f.amax(), 0.0);
    }

    #[test]
    fn gravity_orthogonal_to_constraint() {
        let g = 9.81;
        let sys = ParticleSystem::new(vec![1.0, 1.0], &[Vector3::zeros(), v(5.0, 0.0, 0.0)], &[Vector3::zeros(); 2]);
        let mut cs = ConstraintSet::new(vec![pair(0, 1, 5.0)], BaumgarteGains::default());
        let fe = stack(&[v(0.0, 0.0, -g), v(0.0, 0.0, -g)]);
        let f = constraint_force(&sys, &mut cs, &fe, 0.01).unwrap();
        assert!(f.amax() < 1e-15);
    }

    fn net_force_and_torque(sys: &ParticleSystem, f: &DVector<f64>) -> (f64, f64) {
        let cm = sys.center_of_mass();
        let mut fs = Vector3::zeros();
        let mut ts = Vector3::zeros();
        for (i, fi) in unstack(f).iter().enumerate() {
            fs += fi;
            ts += (sys.pos(i) - cm).cross(fi);
        }
        (fs.norm(), ts.norm())
    }

    #[test]
    fn triangle_force_is_internal() {
        let (sys, mut cs) = triangle();
        let fe = stack(&[v(0.1, 0.1, 0.0); 3]);
        let f = constraint_force(&sys, &mut cs, &fe, 0.01).unwrap();
        let (nf, nt) = net_force_and_torque(&sys, &f);
        assert!(nf < 1e-9 && nt < 1e-9, "{nf} {nt}");
        assert!(f.amax() > 1.0);
    }

    #[test]
    fn integral_advances_by_c_dt() {
        let (sys, mut cs) = triangle();
        constraint_force(&sys, &mut cs, &DVector::zeros(9), 0.01).unwrap();
        let c = evaluate_constraints(&sys, &cs).unwrap();
        for k in 0..3 {
            assert!((cs.integral_state[k] - 0.01 * c[k]).abs() < 1e-15);
        }
    }

    #[test]
    fn exact_mode_detects_redundant_rows() {
        let (sys, mut cs) = triangle();
        cs.constraints.push(pair(0, 1, 4.0));
        cs.integral_state.push(0.0);
        cs.solve_mode = SolveMode::Exact;
        assert!(matches!(
            compute_constraint_force(&sys, &cs, &DVector::zeros(9)),
            Err(ConstraintError::RankDeficient { .. })
        ));
        cs.solve_mode = SolveMode::default();
        let out = compute_constraint_force(&sys, &cs, &DVector::zeros(9)).unwrap();
        assert_eq!(out.tapered, 1);
    }

    #[test]
    fn exact_and_tapered_agree_when_well_conditioned() {
        let mut rng = StdRng::seed_from_u64(3);
        for _ in 0..20 {
            let (sys, mut cs) = random_system(&mut rng, 4);
            let fe = DVector::from_fn(12, |_, _| rng.random_range(-3.0..3.0));
            let a = compute_constraint_force(&sys, &cs, &fe).unwrap();
            cs.solve_mode = SolveMode::Exact;
            let b = compute_constraint_force(&sys, &cs, &fe).unwrap();
            if a.tapered == 0 {
                assert!((&a.force - &b.force).amax() < 1e-9 * (1.0 + b.force.amax()));
            }
        }
    }

    #[test]
    fn bumpless_seed_removes_slow_mode() {
        let g = BaumgarteGains::default();
        let s1 = g.slowest_real_root();
        let p = s1.powi(3) + 2.0 * g.alpha * s1 * s1 + g.beta * g.beta * s1 + g.gamma;
        assert!(p.abs() < 1e-12);
        assert!(s1 < 0.0 && s1 > -0.2);
        // x''' + 2a x'' + b^2 x' + g x = 0 from the seeded state stays on the fast subspace
        let mut cs = ConstraintSet::new(vec![pair(0, 1, 1.0)], g);
        cs.bumpless_init(&DVector::from_element(1, 1.0), &DVector::from_element(1, 0.0));
        let a = s1 + 2.0 * g.alpha;
        let b = g.beta * g.beta + s1 * a;
        // residual of the reduced second-order relation c' + a c + b x = 0
        assert!((0.0 + a * 1.0 + b * cs.integral_state[0]).abs() < 1e-12);
    }

    #[test]
    fn rigidity_of_triangle_and_duplicate() {
        let (sys, mut cs) = triangle();
        let r = rigidity_check(&cs, &sys).unwrap();
        assert_eq!((r.rank, r.required), (3, 3));
        assert!(r.is_rigid && !r.is_overconstrained);
        cs.constraints.push(pair(1, 2, 4.0));
        cs.integral_state.push(0.0);
        let r = rigidity_check(&cs, &sys).unwrap();
        assert!(r.is_overconstrained);
        assert_eq!(r.rank, 3);
    }

    fn random_case() -> impl Strategy<Value = (ParticleSystem, ConstraintSet, DVector<f64>)> {
        (any::<u64>(), 3usize..7).prop_map(|(seed, n)| {
            let mut rng = StdRng::seed_from_u64(seed);
            let (sys, cs) = random_system(&mut rng, n);
            let fe = DVector::from_fn(3 * n, |_, _| rng.random_range(-10.0..10.0));
            (sys, cs, fe)
        })
    }

    proptest! {
        #[test]
        fn force_is_internal_and_in_row_space((sys, cs, fe) in random_case()) {
            let out = compute_constraint_force(&sys, &cs, &fe).unwrap();
            let (nf, nt) = net_force_and_torque(&sys, &out.force);
            let scale = 1.0 + out.force.amax();
            prop_assert!(nf < 1e-9 * scale && nt < 1e-9 * scale);
            let j = constraint_jacobian(&sys, &cs).unwrap();
            let jt = j.transpose();
            let ls = Svd::new(&jt).solve(&out.force, 1e-12);
            prop_assert!((jt * ls - &out.force).amax() < 1e-10 * scale);
        }

        #[test]
        fn closed_loop_constraint_ode_holds((sys, cs, fe) in random_case()) {
            let out = compute_constraint_force(&sys, &cs, &fe).unwrap();
            prop_assume!(out.tapered == 0);
            let j = constraint_jacobian(&sys, &cs).unwrap();
            let jd = jacobian_rate(&sys, &cs).unwrap();
            let acc = sys.inv_mass_diag().component_mul(&(&fe + &out.force));
            let c_ddot = &j * acc + &jd * &sys.velocities;
            let g = cs.gains;
            let res = c_ddot + 2.0 * g.alpha * &out.c_dot + g.beta * g.beta * &out.c
                + g.gamma * DVector::from_column_slice(&cs.integral_state);
            prop_assert!(res.amax() < 1e-8 * (1.0 + fe.amax()));
        }

        #[test]
        fn permuting_constraints_permutes_rows((sys, cs, fe) in random_case(), seed in any::<u64>()) {
            let mut rng = StdRng::seed_from_u64(seed);
            let m = cs.len();
            let mut perm: Vec<usize> = (0..m).collect();
            for k in (1..m).rev() {
                perm.swap(k, rng.random_range(0..=k));
            }
            let mut pcs = cs.clone();
            pcs.constraints = perm.iter().map(|&k| cs.constraints[k].clone()).collect();
            pcs.integral_state = perm.iter().map(|&k| cs.integral_state[k]).collect();
            let j = constraint_jacobian(&sys, &cs).unwrap();
            let pj = constraint_jacobian(&sys, &pcs).unwrap();
            for (r, &k) in perm.iter().enumerate() {
                prop_assert_eq!(pj.row(r), j.row(k));
            }
            let a = compute_constraint_force(&sys, &cs, &fe).unwrap();
            let b = compute_constraint_force(&sys, &pcs, &fe).unwrap();
            prop_assume!(a.tapered == 0);
            prop_assert!((&a.force - &b.force).amax() < 1e-12 * (1.0 + b.force.amax()));
        }
    }
}
