use serde::{Deserialize, Serialize};

use super::{GeometryError, ParticleState, Result, SurfaceMesh};
use crate::Vec3;

/// A point fixed to the material of a surface triangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialAnchor {
    pub face: usize,
    pub barycentric: [f64; 3],
}

impl MaterialAnchor {
    pub fn new(face: usize, barycentric: [f64; 3]) -> Self {
        let clamped = barycentric.map(|w| w.max(0.0));
        let sum: f64 = clamped.iter().sum();
        let barycentric = if sum > 0.0 {
            clamped.map(|w| w / sum)
        } else {
            [1.0 / 3.0; 3]
        };
        Self { face, barycentric }
    }

    /// Mesh vertices and weights this anchor interpolates.
    pub fn stencil(&self, surface: &SurfaceMesh) -> [(usize, f64); 3] {
        let tri = surface.faces[self.face];
        [
            (tri[0], self.barycentric[0]),
            (tri[1], self.barycentric[1]),
            (tri[2], self.barycentric[2]),
        ]
    }
}

/// Barycentric interpolation of the anchored triangle at `state`.
pub fn eval_anchor(surface: &SurfaceMesh, anchor: &MaterialAnchor, state: &ParticleState) -> Vec3 {
    anchor
        .stencil(surface)
        .iter()
        .fold(Vec3::zeros(), |acc, &(v, w)| acc + w * state.positions[v])
}

/// Closest point on triangle `abc` to `p`, returned as barycentric weights.
pub fn closest_point_on_triangle(p: &Vec3, a: &Vec3, b: &Vec3, c: &Vec3) -> [f64; 3] {
    let ab = b - a;
    let ac = c - a;
    let ap = p - a;
    let d1 = ab.dot(&ap);
    let d2 = ac.dot(&ap);
    if d1 <= 0.0 && d2 <= 0.0 {
        return [1.0, 0.0, 0.0];
    }
    let bp = p - b;
    let d3 = ab.dot(&bp);
    let d4 = ac.dot(&bp);
    if d3 >= 0.0 && d4 <= d3 {
        return [0.0, 1.0, 0.0];
    }
    let vc = d1 * d4 - d3 * d2;
    if vc <= 0.0 && d1 >= 0.0 && d3 <= 0.0 {
        let v = d1 / (d1 - d3);
        return [1.0 - v, v, 0.0];
    }
    let cp = p - c;
    let d5 = ab.dot(&cp);
    let d6 = ac.dot(&cp);
    if d6 >= 0.0 && d5 <= d6 {
        return [0.0, 0.0, 1.0];
    }
    let vb = d5 * d2 - d1 * d6;
    if vb <= 0.0 && d2 >= 0.0 && d6 <= 0.0 {
        let w = d2 / (d2 - d6);
        return [1.0 - w, 0.0, w];
    }
    let va = d3 * d6 - d5 * d4;
    if va <= 0.0 && (d4 - d3) >= 0.0 && (d5 - d6) >= 0.0 {
        let w = (d4 - d3) / ((d4 - d3) + (d5 - d6));
        return [0.0, 1.0 - w, w];
    }
    let denom = 1.0 / (va + vb + vc);
    let v = vb * denom;
    let w = vc * denom;
    [1.0 - v - w, v, w]
}

/// Binds `point` to the nearest surface triangle of the deformed surface.
/// Ties between faces go to the lowest face index.
pub fn bind_material_point(
    surface: &SurfaceMesh,
    point: &Vec3,
    state: &ParticleState,
    tolerance: f64,
) -> Result<MaterialAnchor> {
    let mut best: Option<(f64, MaterialAnchor)> = None;
    for f in 0..surface.face_count() {
        let [a, b, c] = surface.corners(f, &state.positions);
        let bary = closest_point_on_triangle(point, &a, &b, &c);
        let q = bary[0] * a + bary[1] * b + bary[2] * c;
        let d = (q - point).norm();
        if best.as_ref().is_none_or(|(bd, _)| d < *bd) {
            best = Some((d, MaterialAnchor::new(f, bary)));
        }
    }
    match best {
        Some((d, anchor)) if d <= tolerance => Ok(anchor),
        Some((d, _)) => Err(GeometryError::OffSurface {
            distance: d,
            tolerance,
        }),
        None => Err(GeometryError::OffSurface {
            distance: f64::INFINITY,
            tolerance,
        }),
    }
}
