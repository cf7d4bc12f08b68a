use nalgebra::DMatrix;

use crate::geometry::{eval_anchor, MaterialAnchor, ParticleState};
use crate::xpbd::DeformationJacobian;
use crate::Vec3;

use super::{cosine_similarity, wedge_normal, ExposureError, FeatureSet, Result};

/// Sparse `m × 3N` Jacobian of the observation vector; each row stores
/// per-vertex gradient blocks sorted by vertex index.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationJacobian {
    pub rows: Vec<Vec<(usize, Vec3)>>,
    pub particle_count: usize,
}

impl ObservationJacobian {
    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.rows.len(), 3 * self.particle_count);
        for (r, row) in self.rows.iter().enumerate() {
            for (v, g) in row {
                for k in 0..3 {
                    m[(r, 3 * v + k)] = g[k];
                }
            }
        }
        m
    }

    /// `J_O J_d`, an `m × 3` matrix.
    pub fn compose(&self, jd: &DeformationJacobian) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.rows.len(), 3);
        for (r, row) in self.rows.iter().enumerate() {
            for (v, g) in row {
                let block = jd.block(*v);
                let contrib = g.transpose() * block;
                for k in 0..3 {
                    out[(r, k)] += contrib[k];
                }
            }
        }
        out
    }

    /// Row `r` applied to a full displacement field.
    pub fn row_dot(&self, r: usize, dx: &[Vec3]) -> f64 {
        self.rows[r].iter().map(|(v, g)| g.dot(&dx[*v])).sum()
    }
}

/// Gradient of `cos(a, b)` with respect to `a`.
fn cos_grad(a: &Vec3, b: &Vec3) -> Vec3 {
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Vec3::zeros();
    }
    b / (na * nb) - cosine_similarity(a, b) * a / (na * na)
}

struct Row<'a> {
    set: &'a FeatureSet,
    acc: Vec<(usize, Vec3)>,
}

impl<'a> Row<'a> {
    fn new(set: &'a FeatureSet) -> Self {
        Self {
            set,
            acc: Vec::with_capacity(12),
        }
    }

    fn push(&mut self, anchor: &MaterialAnchor, g: Vec3) {
        for (v, w) in anchor.stencil(self.set.surface()) {
            self.acc.push((v, w * g));
        }
    }

    fn finish(mut self) -> Vec<(usize, Vec3)> {
        self.acc.sort_by_key(|(v, _)| *v);
        let mut out: Vec<(usize, Vec3)> = Vec::with_capacity(self.acc.len());
        for (v, g) in self.acc {
            match out.last_mut() {
                Some((u, h)) if *u == v => *h += g,
                _ => out.push((v, g)),
            }
        }
        out
    }
}

impl FeatureSet {
    /// Closed-form `∂O/∂x` through the barycentric anchors of `v`, `w`,
    /// `q1` and `q2`.
    pub fn observation_jacobian(&self, state: &ParticleState) -> Result<ObservationJacobian> {
        let s = self.surface();
        let (q1, q2) = self.segment.endpoints(s, state);
        let e = q2 - q1;
        let le = e.norm();
        if !(le > 0.0) {
            return Err(ExposureError::DegenerateSegment);
        }
        let dir = e / le;
        let proj = nalgebra::Matrix3::identity() - dir * dir.transpose();
        let n = self.pairs.len();
        let mut wedge = Vec::with_capacity(n);
        let mut shear = Vec::with_capacity(n);
        let mut sv = Vec::with_capacity(n);
        let mut sw = Vec::with_capacity(n);
        let (a1, a2) = (&self.segment.q1, &self.segment.q2);

        for (i, p) in self.pairs.iter().enumerate() {
            let k = p.ring.k;
            let d = q1 + k * e;
            let v = eval_anchor(s, &p.v_anchor, state) - d;
            let w = eval_anchor(s, &p.w_anchor, state) - d;
            if v.norm() == 0.0 || w.norm() == 0.0 {
                return Err(ExposureError::ZeroLengthFeature { pair: i });
            }
            // A gradient on a feature vector pulls on its point and pushes
            // on D(k) = (1 - k) q1 + k q2.
            let feature = |row: &mut Row, gv: Vec3, gw: Vec3| {
                row.push(&p.v_anchor, gv);
                row.push(&p.w_anchor, gw);
                row.push(a1, -(1.0 - k) * (gv + gw));
                row.push(a2, -k * (gv + gw));
            };

            let mut row = Row::new(self);
            feature(&mut row, cos_grad(&v, &w), cos_grad(&w, &v));
            wedge.push(row.finish());

            let u = wedge_normal(&v, &w);
            let gu = cos_grad(&u, &dir);
            let gd = cos_grad(&dir, &u);
            let mut row = Row::new(self);
            feature(&mut row, w.cross(&gu), gu.cross(&v));
            let ge = proj * gd / le;
            row.push(a2, ge);
            row.push(a1, -ge);
            shear.push(row.finish());

            let mut row = Row::new(self);
            feature(&mut row, v / v.norm(), Vec3::zeros());
            sv.push(row.finish());

            let mut row = Row::new(self);
            feature(&mut row, Vec3::zeros(), w / w.norm());
            sw.push(row.finish());
        }
        let mut rows = wedge;
        rows.extend(shear);
        rows.extend(sv);
        rows.extend(sw);
        Ok(ObservationJacobian {
            rows,
            particle_count: state.len(),
        })
    }
}
