use nalgebra::{DMatrix, Matrix3};
use rayon::prelude::*;

use super::{Result, SimError, SimState};
use crate::Vec3;

/// Sensitivity `∂x/∂p` of every particle to the end-effector position, (3N)×3.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationJacobian {
    pub matrix: DMatrix<f64>,
}

impl DeformationJacobian {
    pub fn particle_count(&self) -> usize {
        self.matrix.nrows() / 3
    }

    /// The 3×3 block of particle `i`.
    pub fn block(&self, i: usize) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(3 * i, 0).into_owned()
    }

    /// Predicted first-order displacement for an end-effector move.
    pub fn apply(&self, dp: &Vec3) -> Vec<Vec3> {
        (0..self.particle_count())
            .map(|i| self.block(i) * dp)
            .collect()
    }
}

impl SimState {
    /// Central finite differences over the three control axes, each
    /// perturbation a warm-started solve from the current state.
    pub fn deformation_jacobian(&self, target: Vec3) -> Result<DeformationJacobian> {
        self.deformation_jacobian_with_step(target, self.config.fd_step)
    }

    pub fn deformation_jacobian_with_step(
        &self,
        target: Vec3,
        step: f64,
    ) -> Result<DeformationJacobian> {
        if self.coupling.is_none() {
            return Err(SimError::NotCoupled);
        }
        let perturbations: Vec<Vec3> = (0..3)
            .flat_map(|j| {
                let e = Vec3::ith(j, step);
                [target + e, target - e]
            })
            .collect();
        let solved: Vec<Result<Vec<Vec3>>> = perturbations
            .par_iter()
            .map(|p| {
                let mut sim = self.clone();
                sim.solve(Some(*p), None).map(|s| s.positions.clone())
            })
            .collect();
        let n = self.mesh.vertex_count();
        let mut matrix = DMatrix::zeros(3 * n, 3);
        let mut results = solved.into_iter();
        for j in 0..3 {
            let plus = results.next().unwrap()?;
            let minus = results.next().unwrap()?;
            for i in 0..n {
                let col = (plus[i] - minus[i]) / (2.0 * step);
                for k in 0..3 {
                    matrix[(3 * i + k, j)] = col[k];
                }
            }
        }
        Ok(DeformationJacobian { matrix })
    }
}
