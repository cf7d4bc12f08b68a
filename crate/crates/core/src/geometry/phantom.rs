//! Procedural V-groove phantom.
//!
//! The block spans `x ∈ [-L/2, L/2]`, `y ∈ [-W/2, W/2]`, `z ∈ [0, H]`. The
//! groove runs along the x axis; its crease is the line `y = 0, z = H - depth`
//! and its walls rise to the top face at `y = ±depth·tan(angle/2)`. The base
//! layer `z = 0` is flagged as fixed. The tetrahedralization is mirror
//! symmetric about both `x = 0` and `y = 0`.

use serde::{Deserialize, Serialize};

use super::{tet_volume, GeometryError, Result, TetMesh};
use crate::Vec3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSize {
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub groove_depth: f64,
}

impl Default for PhantomSize {
    fn default() -> Self {
        Self {
            length: 0.04,
            width: 0.04,
            height: 0.02,
            groove_depth: 0.012,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomResolution {
    /// Cells along the groove axis (rounded up to even).
    pub along: usize,
    /// Cells across the groove (rounded up to even, at least 6).
    pub across: usize,
    /// Cells through the thickness.
    pub depth: usize,
}

impl Default for PhantomResolution {
    fn default() -> Self {
        Self {
            along: 12,
            across: 12,
            depth: 4,
        }
    }
}

/// Parameters of a generated wedge phantom.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WedgePhantom {
    pub opening_angle_deg: f64,
    pub size: PhantomSize,
    pub resolution: PhantomResolution,
}

impl WedgePhantom {
    pub fn is_flat(&self) -> bool {
        self.opening_angle_deg >= 180.0 || self.size.groove_depth == 0.0
    }

    /// Half width of the groove at the top face.
    pub fn groove_half_width(&self) -> f64 {
        if self.is_flat() {
            0.0
        } else {
            self.size.groove_depth * (self.opening_angle_deg.to_radians() / 2.0).tan()
        }
    }

    /// Height of the crease line (or of the top face when flat).
    pub fn crease_height(&self) -> f64 {
        if self.is_flat() {
            self.size.height
        } else {
            self.size.height - self.size.groove_depth
        }
    }

    /// Block volume minus the groove prism.
    pub fn analytic_volume(&self) -> f64 {
        let s = &self.size;
        let groove = if self.is_flat() {
            0.0
        } else {
            self.groove_half_width() * s.groove_depth
        };
        s.length * (s.width * s.height - groove)
    }

    pub fn generate(&self) -> Result<TetMesh> {
        gen_wedge_phantom(self.opening_angle_deg, self.size, self.resolution)
    }
}

fn top_height(y: f64, size: &PhantomSize, half_width: f64) -> f64 {
    if half_width <= 0.0 {
        size.height
    } else {
        size.height - size.groove_depth * (1.0 - y.abs() / half_width).max(0.0)
    }
}

/// Column positions across the block for y >= 0, including the groove edge.
fn half_columns(half: f64, groove: f64, cells: usize) -> Vec<f64> {
    if groove <= 0.0 {
        return (0..=cells).map(|j| half * j as f64 / cells as f64).collect();
    }
    let spacing = half / cells as f64;
    let inner = ((groove / spacing).round() as usize).clamp(2, cells - 1);
    let outer = cells - inner;
    let mut cols: Vec<f64> = (0..=inner)
        .map(|j| groove * j as f64 / inner as f64)
        .collect();
    cols.extend((1..=outer).map(|j| groove + (half - groove) * j as f64 / outer as f64));
    cols
}

pub fn gen_wedge_phantom(
    opening_angle_deg: f64,
    size: PhantomSize,
    resolution: PhantomResolution,
) -> Result<TetMesh> {
    if !(opening_angle_deg > 0.0 && opening_angle_deg <= 180.0) {
        return Err(GeometryError::InvalidPhantom(format!(
            "opening angle {opening_angle_deg} must lie in (0, 180]"
        )));
    }
    if resolution.along == 0 || resolution.across == 0 || resolution.depth == 0 {
        return Err(GeometryError::InvalidPhantom(
            "resolution must be at least 1 in every direction".into(),
        ));
    }
    if !(size.length > 0.0 && size.width > 0.0 && size.height > 0.0) {
        return Err(GeometryError::InvalidPhantom("extents must be positive".into()));
    }
    let params = WedgePhantom {
        opening_angle_deg,
        size,
        resolution,
    };
    let half_width = params.groove_half_width();
    if !params.is_flat() && !(size.groove_depth < size.height) {
        return Err(GeometryError::InvalidPhantom(
            "groove depth must be smaller than the block height".into(),
        ));
    }
    if half_width >= size.width / 2.0 {
        return Err(GeometryError::InvalidPhantom(format!(
            "groove half width {half_width:.4} m exceeds the block half width"
        )));
    }

    let nx = resolution.along.div_ceil(2) * 2;
    let half_cells = resolution.across.div_ceil(2).max(3);
    let nz = resolution.depth;

    let pos = half_columns(size.width / 2.0, half_width, half_cells);
    let mut ys: Vec<f64> = pos.iter().rev().map(|y| -y).collect();
    ys.extend(pos.iter().skip(1));
    let ny = ys.len() - 1;

    // Cross-section nodes (j across, k up).
    let node2d = |j: usize, k: usize| j * (nz + 1) + k;
    let n2d = (ny + 1) * (nz + 1);
    let mut section = Vec::with_capacity(n2d);
    for &y in &ys {
        let top = top_height(y, &size, half_width);
        for k in 0..=nz {
            section.push((y, top * k as f64 / nz as f64));
        }
    }
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for j in 0..ny {
        let mirrored = ys[j + 1] <= 0.0;
        for k in 0..nz {
            let (a, b, c, d) = (
                node2d(j, k),
                node2d(j + 1, k),
                node2d(j + 1, k + 1),
                node2d(j, k + 1),
            );
            if mirrored {
                triangles.push([a, b, d]);
                triangles.push([b, c, d]);
            } else {
                triangles.push([a, b, c]);
                triangles.push([a, c, d]);
            }
        }
    }

    let xs: Vec<f64> = (0..=nx)
        .map(|i| -size.length / 2.0 + size.length * i as f64 / nx as f64)
        .collect();
    let mut vertices = Vec::with_capacity((nx + 1) * n2d);
    for &x in &xs {
        for &(y, z) in &section {
            vertices.push(Vec3::new(x, y, z));
        }
    }

    let mut tets = Vec::with_capacity(nx * triangles.len() * 3);
    for i in 0..nx {
        // Diagonals of lateral faces run from the layer nearer x = 0.
        let (near, far) = if i < nx / 2 { (i + 1, i) } else { (i, i + 1) };
        for tri in &triangles {
            let mut t = *tri;
            t.sort_unstable();
            let n = |v: usize| near * n2d + v;
            let f = |v: usize| far * n2d + v;
            let (a, b, c) = (t[0], t[1], t[2]);
            for tet in [
                [n(a), n(b), n(c), f(c)],
                [n(a), n(b), f(b), f(c)],
                [n(a), f(a), f(b), f(c)],
            ] {
                let vol = tet_volume(
                    &vertices[tet[0]],
                    &vertices[tet[1]],
                    &vertices[tet[2]],
                    &vertices[tet[3]],
                );
                tets.push(if vol < 0.0 {
                    [tet[0], tet[2], tet[1], tet[3]]
                } else {
                    tet
                });
            }
        }
    }

    let fixed: Vec<usize> = (0..vertices.len())
        .filter(|&v| vertices[v].z == 0.0)
        .collect();
    TetMesh::new(vertices, tets)?.with_fixed(fixed)
}
