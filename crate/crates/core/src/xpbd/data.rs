//! Point-cloud data term: each cloud point is attracted by its closest point
//! on the visible surface, with correspondences rebuilt once per sweep.

use crate::geometry::{closest_point_on_triangle, KdTree, SurfaceMesh};
use crate::Vec3;

use super::sparse::BlockCsr;

/// Observed cloud with the surface faces it may be matched against.
#[derive(Clone, Copy, Debug)]
pub struct RegistrationData<'a> {
    pub cloud: &'a [Vec3],
    /// Per-surface-face visibility flags.
    pub visible: &'a [bool],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Correspondence {
    pub face: usize,
    pub barycentric: [f64; 3],
    pub target: Vec3,
}

#[derive(Clone, Debug, Default)]
pub struct DataTerm {
    pub correspondences: Vec<Correspondence>,
    /// Stiffness applied to each correspondence.
    pub weight: f64,
}

const CANDIDATE_FACES: usize = 8;

impl DataTerm {
    pub fn build(
        surface: &SurfaceMesh,
        x: &[Vec3],
        data: &RegistrationData,
        stiffness: f64,
        gate: f64,
    ) -> Self {
        let faces: Vec<usize> = (0..surface.face_count())
            .filter(|&f| data.visible.get(f).copied().unwrap_or(false))
            .collect();
        if faces.is_empty() || data.cloud.is_empty() {
            return Self::default();
        }
        let tree = KdTree::new(faces.iter().map(|&f| surface.centroid(f, x)).collect());
        let mut correspondences = Vec::with_capacity(data.cloud.len());
        for z in data.cloud {
            let mut best: Option<(f64, Correspondence)> = None;
            for (slot, _) in tree.k_nearest(z, CANDIDATE_FACES) {
                let f = faces[slot];
                let [a, b, c] = surface.corners(f, x);
                let bary = closest_point_on_triangle(z, &a, &b, &c);
                let y = bary[0] * a + bary[1] * b + bary[2] * c;
                let d = (y - z).norm();
                let better = match &best {
                    None => true,
                    Some((bd, bc)) => d < *bd || (d == *bd && f < bc.face),
                };
                if better {
                    best = Some((
                        d,
                        Correspondence {
                            face: f,
                            barycentric: bary,
                            target: *z,
                        },
                    ));
                }
            }
            if let Some((d, c)) = best {
                if d <= gate {
                    correspondences.push(c);
                }
            }
        }
        let mut verts: Vec<usize> = faces.iter().flat_map(|&f| surface.faces[f]).collect();
        verts.sort_unstable();
        verts.dedup();
        let weight = if correspondences.is_empty() {
            0.0
        } else {
            stiffness * verts.len() as f64 / correspondences.len() as f64
        };
        Self {
            correspondences,
            weight,
        }
    }

    fn point(surface: &SurfaceMesh, c: &Correspondence, x: &[Vec3]) -> Vec3 {
        let t = surface.faces[c.face];
        c.barycentric[0] * x[t[0]] + c.barycentric[1] * x[t[1]] + c.barycentric[2] * x[t[2]]
    }

    pub fn energy(&self, surface: &SurfaceMesh, x: &[Vec3]) -> f64 {
        self.correspondences
            .iter()
            .map(|c| 0.5 * self.weight * (c.target - Self::point(surface, c, x)).norm_squared())
            .sum()
    }

    pub fn assemble(&self, surface: &SurfaceMesh, x: &[Vec3], grad: &mut [Vec3], hess: &mut BlockCsr) {
        for c in &self.correspondences {
            let t = surface.faces[c.face];
            let r = Self::point(surface, c, x) - c.target;
            for i in 0..3 {
                grad[t[i]] += self.weight * c.barycentric[i] * r;
                for j in 0..3 {
                    let w = self.weight * c.barycentric[i] * c.barycentric[j];
                    hess.add(t[i], t[j], &(nalgebra::Matrix3::identity() * w));
                }
            }
        }
    }
}
