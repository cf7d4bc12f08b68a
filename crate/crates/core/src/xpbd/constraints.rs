use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::sparse::BlockCsr;
use super::{Result, SimError};
use crate::geometry::TetMesh;
use crate::Vec3;

/// Smallest compliance used internally; a compliance of zero is treated as this.
pub const MIN_COMPLIANCE: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialParams {
    /// Compliance of tet-edge distance constraints.
    pub distance_compliance: f64,
    /// Compliance of per-tet shape matching constraints.
    pub shape_compliance: f64,
}

impl Default for MaterialParams {
    fn default() -> Self {
        Self {
            distance_compliance: 1e-3,
            shape_compliance: 1e-3,
        }
    }
}

impl MaterialParams {
    /// Scales both compliances, e.g. to model a stiffness mismatch.
    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            distance_compliance: self.distance_compliance * factor,
            shape_compliance: self.shape_compliance * factor,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DistanceConstraint {
    pub a: usize,
    pub b: usize,
    pub rest_length: f64,
    pub compliance: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapeMatchConstraint {
    pub vertices: [usize; 4],
    /// Rest positions relative to the rest centroid.
    pub rest_offsets: [Vec3; 4],
    pub compliance: f64,
}

/// Geometric constraints `C` with their weights `K = 1 / compliance`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub distances: Vec<DistanceConstraint>,
    pub shapes: Vec<ShapeMatchConstraint>,
    pub fixed: Vec<usize>,
}

impl ConstraintSet {
    /// Distance constraints on every tet edge and one shape matching
    /// constraint per tet, measured from the rest geometry.
    pub fn from_mesh(mesh: &TetMesh, material: &MaterialParams) -> Self {
        let x = &mesh.vertices;
        let distances = mesh
            .edges()
            .into_iter()
            .map(|[a, b]| DistanceConstraint {
                a,
                b,
                rest_length: (x[a] - x[b]).norm(),
                compliance: material.distance_compliance,
            })
            .collect();
        let shapes = mesh
            .tets
            .iter()
            .map(|&t| {
                let c = t.iter().map(|&v| x[v]).sum::<Vec3>() / 4.0;
                ShapeMatchConstraint {
                    vertices: t,
                    rest_offsets: t.map(|v| x[v] - c),
                    compliance: material.shape_compliance,
                }
            })
            .collect();
        Self {
            distances,
            shapes,
            fixed: mesh.fixed.clone(),
        }
    }

    pub fn validate(&self, vertex_count: usize) -> Result<()> {
        for (i, d) in self.distances.iter().enumerate() {
            if d.a >= vertex_count || d.b >= vertex_count {
                return Err(SimError::InvalidConstraint(format!(
                    "distance constraint {i} references a missing vertex"
                )));
            }
            if !(d.rest_length > 0.0) || !(d.compliance >= 0.0) {
                return Err(SimError::InvalidConstraint(format!(
                    "distance constraint {i} needs rest length > 0 and compliance >= 0"
                )));
            }
        }
        for (i, s) in self.shapes.iter().enumerate() {
            if s.vertices.iter().any(|&v| v >= vertex_count) {
                return Err(SimError::InvalidConstraint(format!(
                    "shape constraint {i} references a missing vertex"
                )));
            }
            if !(s.compliance >= 0.0) {
                return Err(SimError::InvalidConstraint(format!(
                    "shape constraint {i} has negative compliance"
                )));
            }
        }
        if let Some(&v) = self.fixed.iter().find(|&&v| v >= vertex_count) {
            return Err(SimError::InvalidConstraint(format!(
                "fixed vertex {v} does not exist"
            )));
        }
        Ok(())
    }

    /// Mean distance stiffness, used to scale the registration data term.
    pub fn reference_stiffness(&self) -> f64 {
        if self.distances.is_empty() {
            return 1.0 / MIN_COMPLIANCE.max(1e-3);
        }
        let sum: f64 = self
            .distances
            .iter()
            .map(|d| 1.0 / d.compliance.max(MIN_COMPLIANCE))
            .sum();
        sum / self.distances.len() as f64
    }

    /// Weighted constraint energy `0.5 * C^T K C`.
    pub fn energy(&self, x: &[Vec3]) -> f64 {
        let mut e = 0.0;
        for d in &self.distances {
            let c = (x[d.a] - x[d.b]).norm() - d.rest_length;
            e += 0.5 * c * c / d.compliance.max(MIN_COMPLIANCE);
        }
        for s in &self.shapes {
            e += 0.5 * shape_violation_sq(s, x) / s.compliance.max(MIN_COMPLIANCE);
        }
        e
    }

    /// Largest absolute constraint value: meters for distance constraints,
    /// Frobenius deviation from the best-fit rigid rest shape for shape matching.
    pub fn max_violation(&self, x: &[Vec3]) -> f64 {
        let d = self
            .distances
            .iter()
            .map(|d| ((x[d.a] - x[d.b]).norm() - d.rest_length).abs())
            .fold(0.0, f64::max);
        let s = self
            .shapes
            .iter()
            .map(|s| shape_violation_sq(s, x).sqrt())
            .fold(0.0, f64::max);
        d.max(s)
    }

    /// Accumulates the energy gradient and Gauss-Newton Hessian into `grad`, `hess`.
    pub fn assemble(&self, x: &[Vec3], grad: &mut [Vec3], hess: &mut BlockCsr) {
        for d in &self.distances {
            let k = 1.0 / d.compliance.max(MIN_COMPLIANCE);
            let diff = x[d.a] - x[d.b];
            let len = diff.norm();
            if len == 0.0 {
                continue;
            }
            let n = diff / len;
            let c = len - d.rest_length;
            grad[d.a] += k * c * n;
            grad[d.b] -= k * c * n;
            let mut block = k * n * n.transpose();
            if c > 0.0 {
                // Geometric stiffness is positive semi-definite only under tension.
                block += k * (c / len) * (Matrix3::identity() - n * n.transpose());
            }
            hess.add(d.a, d.a, &block);
            hess.add(d.b, d.b, &block);
            hess.add(d.a, d.b, &(-block));
            hess.add(d.b, d.a, &(-block));
        }
        for s in &self.shapes {
            let k = 1.0 / s.compliance.max(MIN_COMPLIANCE);
            let (c, r, sym) = shape_frame(s, x);
            for (i, &v) in s.vertices.iter().enumerate() {
                grad[v] += k * (x[v] - c - r * s.rest_offsets[i]);
            }
            let m = rotation_coupling(s, &sym);
            let b = s.rest_offsets.map(|o| o.cross_matrix() * r.transpose());
            for (i, &vi) in s.vertices.iter().enumerate() {
                for (j, &vj) in s.vertices.iter().enumerate() {
                    let w = if i == j { 0.75 } else { -0.25 };
                    let block = Matrix3::identity() * w - b[i].transpose() * m * b[j];
                    hess.add(vi, vj, &(block * k));
                }
            }
        }
    }
}

/// Rotation-mode part of the shape matching Hessian, projected so that the
/// element Hessian stays positive semi-definite. Zero when the rotation
/// derivative is singular (inverted or flat elements).
fn rotation_coupling(s: &ShapeMatchConstraint, sym: &Matrix3<f64>) -> Matrix3<f64> {
    let m = Matrix3::identity() * sym.trace() - sym;
    let eig = m.symmetric_eigen();
    let scale = sym.trace().abs().max(f64::MIN_POSITIVE);
    if eig.eigenvalues.min() <= 1e-9 * scale {
        return Matrix3::zeros();
    }
    let m_inv = eig.eigenvectors
        * Matrix3::from_diagonal(&eig.eigenvalues.map(|l| 1.0 / l))
        * eig.eigenvectors.transpose();
    let mut n = Matrix3::zeros();
    for o in &s.rest_offsets {
        n += Matrix3::identity() * o.norm_squared() - o * o.transpose();
    }
    let ne = n.symmetric_eigen();
    let root = |p: f64| ne.eigenvectors * Matrix3::from_diagonal(&ne.eigenvalues.map(|l| l.max(0.0).powf(p))) * ne.eigenvectors.transpose();
    if ne.eigenvalues.min() <= 0.0 {
        return Matrix3::zeros();
    }
    let (half, inv_half) = (root(0.5), root(-0.5));
    let c = Matrix3::identity() - half * m_inv * half;
    let ce = c.symmetric_eigen();
    let c_plus = ce.eigenvectors
        * Matrix3::from_diagonal(&ce.eigenvalues.map(|l| l.max(0.0)))
        * ce.eigenvectors.transpose();
    inv_half * (Matrix3::identity() - c_plus) * inv_half
}

/// Closest rotation to `a` (polar decomposition), with det = +1.
pub fn best_rotation(a: &Matrix3<f64>) -> Matrix3<f64> {
    // Symmetric positive definite: the polar factor is exactly the identity.
    if *a == a.transpose() && a.cholesky().is_some() {
        return Matrix3::identity();
    }
    let svd = a.svd(true, true);
    let (Some(mut u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Matrix3::identity();
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, &s)| if s < acc.1 { (i, s) } else { acc });
        let mut col = u.column_mut(imin);
        col *= -1.0;
        r = u * v_t;
    }
    r
}

/// Current centroid, best-fit rotation and the symmetric factor `R^T A`.
fn shape_frame(s: &ShapeMatchConstraint, x: &[Vec3]) -> (Vec3, Matrix3<f64>, Matrix3<f64>) {
    let c = s.vertices.iter().map(|&v| x[v]).sum::<Vec3>() / 4.0;
    let mut a = Matrix3::zeros();
    for (i, &v) in s.vertices.iter().enumerate() {
        a += (x[v] - c) * s.rest_offsets[i].transpose();
    }
    let r = best_rotation(&a);
    let sym = r.transpose() * a;
    (c, r, 0.5 * (sym + sym.transpose()))
}

/// Goal positions `c + R r_i` of a shape matching constraint.
pub fn shape_goals(s: &ShapeMatchConstraint, x: &[Vec3]) -> [Vec3; 4] {
    let (c, r, _) = shape_frame(s, x);
    s.rest_offsets.map(|o| c + r * o)
}

fn shape_violation_sq(s: &ShapeMatchConstraint, x: &[Vec3]) -> f64 {
    let goals = shape_goals(s, x);
    s.vertices
        .iter()
        .enumerate()
        .map(|(i, &v)| (x[v] - goals[i]).norm_squared())
        .sum()
}
