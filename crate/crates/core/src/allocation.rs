//! Distribution of a CM force and torque demand over the agents.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::linalg::Svd;

/// Desired force at the CM and torque about it, both in body axes.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct WrenchCommand {
    pub f_cm_b: Vector3<f64>,
    pub tau_cm_b: Vector3<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AllocationMode {
    /// Block-diagonal torque rows with a per-agent torque target each,
    /// solved in the least-squares sense.
    PaperLeftPinv,
    /// Minimum-norm forces reproducing the net force and torque exactly.
    #[default]
    MinNormWrench,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    pub h: DMatrix<f64>,
    pub mode: AllocationMode,
    pub rank: usize,
    /// Fraction of the total torque demanded of each agent in left-pinv mode.
    pub torque_split: Vec<f64>,
}

/// Allocated agent forces (body frame).
#[derive(Debug, Clone, PartialEq)]
pub struct Allocation {
    pub forces_b: Vec<Vector3<f64>>,
    /// Set when part of the demand is outside the range of `H` and was dropped.
    pub rank_deficient: bool,
}

pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    v.cross_matrix()
}

pub fn build_allocation(rel_pos_b: &[Vector3<f64>], mode: AllocationMode) -> AllocationMatrix {
    let n = rel_pos_b.len();
    let h = match mode {
        AllocationMode::MinNormWrench => {
            let mut h = DMatrix::zeros(6, 3 * n);
            for (i, r) in rel_pos_b.iter().enumerate() {
                h.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&Matrix3::identity());
                h.fixed_view_mut::<3, 3>(3, 3 * i).copy_from(&skew(r));
            }
            h
        }
        AllocationMode::PaperLeftPinv => {
            let mut h = DMatrix::zeros(3 + 3 * n, 3 * n);
            for (i, r) in rel_pos_b.iter().enumerate() {
                h.fixed_view_mut::<3, 3>(0, 3 * i).copy_from(&Matrix3::identity());
                h.fixed_view_mut::<3, 3>(3 + 3 * i, 3 * i).copy_from(&skew(r));
            }
            h
        }
    };
    let svd = Svd::new(&h);
    AllocationMatrix {
        rank: svd.rank(svd.max() * 1e-9),
        h,
        mode,
        torque_split: vec![1.0 / n as f64; n],
    }
}

impl AllocationMatrix {
    pub fn agents(&self) -> usize {
        self.h.ncols() / 3
    }

    /// Stacked demand vector matching the rows of `H`.
    pub fn demand(&self, cmd: &WrenchCommand) -> DVector<f64> {
        let mut d = DVector::zeros(self.h.nrows());
        d.fixed_rows_mut::<3>(0).copy_from(&cmd.f_cm_b);
        match self.mode {
            AllocationMode::MinNormWrench => d.fixed_rows_mut::<3>(3).copy_from(&cmd.tau_cm_b),
            AllocationMode::PaperLeftPinv => {
                for (i, w) in self.torque_split.iter().enumerate() {
                    d.fixed_rows_mut::<3>(3 + 3 * i).copy_from(&(cmd.tau_cm_b * *w));
                }
            }
        }
        d
    }
}

pub fn allocate(alloc: &AllocationMatrix, cmd: &WrenchCommand) -> Allocation {
    let d = alloc.demand(cmd);
    let svd = Svd::new(&alloc.h);
    let f = svd.solve(&d, svd.max() * 1e-9);
    let rank_deficient = match alloc.mode {
        AllocationMode::MinNormWrench => (&alloc.h * &f - &d).amax() > 1e-9 * (1.0 + d.amax()),
        AllocationMode::PaperLeftPinv => alloc.rank < alloc.h.ncols(),
    };
    Allocation {
        forces_b: (0..alloc.agents()).map(|i| f.fixed_rows::<3>(3 * i).into_owned()).collect(),
        rank_deficient,
    }
}

/// Net force and torque about the CM produced by body-frame agent forces.
pub fn recombine(rel_pos_b: &[Vector3<f64>], forces_b: &[Vector3<f64>]) -> WrenchCommand {
    let mut out = WrenchCommand::default();
    for (r, f) in rel_pos_b.iter().zip(forces_b) {
        out.f_cm_b += f;
        out.tau_cm_b += r.cross(f);
    }
    out
}
