//! Synthetic sensing: a pinhole camera, ray-cast visibility with a
//! segmentation mask, noisy partial point clouds, Chamfer distance, and
//! registration of the simulation to a cloud.

use std::fmt::Write as _;

use nalgebra::Matrix3;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{Bvh, KdTree, MaterialAnchor, ParticleState, Ray, SurfaceMesh};
use crate::xpbd::{RegistrationData, SimError, SimState};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PerceptionError {
    #[error("no visible faces")]
    NothingVisible,
    #[error("Chamfer distance of an empty point set")]
    EmptySet,
    #[error("invalid camera: {0}")]
    InvalidCamera(String),
    #[error("noise level must be finite and non-negative")]
    BadNoise,
    #[error(transparent)]
    Sim(#[from] SimError),
}

pub type Result<T> = std::result::Result<T, PerceptionError>;

/// Camera placement as written in scenario files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub eye: Vec3,
    pub target: Vec3,
    pub up: Vec3,
    /// Vertical field of view (degrees).
    pub fov_y_deg: f64,
    pub width: usize,
    pub height: usize,
}

impl Default for CameraSpec {
    fn default() -> Self {
        Self {
            eye: Vec3::new(0.0, -0.05, 0.12),
            target: Vec3::new(0.0, 0.0, 0.01),
            up: Vec3::new(0.0, 0.0, 1.0),
            fov_y_deg: 40.0,
            width: 640,
            height: 480,
        }
    }
}

/// Pinhole camera. `rotation` maps camera axes to world axes: columns are
/// image right, image down and the viewing direction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub position: Vec3,
    pub rotation: Matrix3<f64>,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn look_at(spec: &CameraSpec) -> Result<Self> {
        let forward = spec.target - spec.eye;
        if !(forward.norm() > 0.0) {
            return Err(PerceptionError::InvalidCamera("eye and target coincide".into()));
        }
        let forward = forward.normalize();
        let right = forward.cross(&spec.up);
        if !(right.norm() > 1e-12) {
            return Err(PerceptionError::InvalidCamera("up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        if spec.width == 0 || spec.height == 0 {
            return Err(PerceptionError::InvalidCamera("resolution must be at least 1x1".into()));
        }
        if !(spec.fov_y_deg > 0.0 && spec.fov_y_deg < 180.0) {
            return Err(PerceptionError::InvalidCamera("field of view must be in (0, 180)".into()));
        }
        let f = 0.5 * spec.height as f64 / (0.5 * spec.fov_y_deg.to_radians()).tan();
        Ok(Self {
            position: spec.eye,
            rotation: Matrix3::from_columns(&[right, down, forward]),
            fx: f,
            fy: f,
            cx: 0.5 * spec.width as f64,
            cy: 0.5 * spec.height as f64,
            width: spec.width,
            height: spec.height,
        })
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Ray through the centre of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Ray {
        let x = (u as f64 + 0.5 - self.cx) / self.fx;
        let y = (v as f64 + 0.5 - self.cy) / self.fy;
        Ray::new(self.position, self.rotation * Vec3::new(x, y, 1.0))
    }

    /// Image coordinates of a world point in front of the camera.
    pub fn project(&self, p: &Vec3) -> Option<(f64, f64)> {
        let c = self.rotation.transpose() * (p - self.position);
        if c.z <= 0.0 {
            return None;
        }
        Some((self.fx * c.x / c.z + self.cx, self.fy * c.y / c.z + self.cy))
    }

    /// First surface face hit by each pixel ray, row-major.
    pub fn render(&self, surface: &SurfaceMesh, state: &ParticleState) -> Vec<Option<usize>> {
        let bvh = Bvh::from_faces(&surface.faces, &state.positions);
        (0..self.height)
            .into_par_iter()
            .flat_map_iter(|v| {
                let bvh = &bvh;
                (0..self.width).map(move |u| bvh.first_hit(&self.pixel_ray(u, v)).map(|h| h.face))
            })
            .collect()
    }
}

/// Binary image, row-major, one byte per pixel (0 or 1).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl MaskImage {
    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn get(&self, u: usize, v: usize) -> bool {
        self.data[v * self.width + u] != 0
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&p| p != 0).count()
    }

    /// Binary PGM (P5), tissue pixels at 255.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.data.iter().map(|&p| if p != 0 { 255u8 } else { 0 }));
        out
    }
}

/// Per-face visibility flags.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VisibilityMask {
    pub faces: Vec<bool>,
    /// Simulation step of the state it was rendered from.
    pub step: usize,
}

impl VisibilityMask {
    pub fn visible_count(&self) -> usize {
        self.faces.iter().filter(|&&v| v).count()
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.faces
    }
}

/// Pixel mask of rays that hit the tissue (stand-in for a learned segmentation).
pub fn synth_segmentation(camera: &CameraModel, surface: &SurfaceMesh, state: &ParticleState) -> MaskImage {
    let hits = camera.render(surface, state);
    MaskImage {
        width: camera.width,
        height: camera.height,
        data: hits.iter().map(|h| u8::from(h.is_some())).collect(),
    }
}

/// A face is visible iff it is the first hit of some pixel ray inside `seg`.
pub fn render_visibility(
    camera: &CameraModel,
    surface: &SurfaceMesh,
    state: &ParticleState,
    seg: &MaskImage,
) -> VisibilityMask {
    let hits = camera.render(surface, state);
    let mut faces = vec![false; surface.face_count()];
    for (i, h) in hits.iter().enumerate() {
        if let Some(f) = h {
            if seg.data.get(i).copied().unwrap_or(0) != 0 {
                faces[*f] = true;
            }
        }
    }
    VisibilityMask {
        faces,
        step: state.step,
    }
}

/// Pixel count of each visible face, used for exposure measurements.
pub fn face_pixel_counts(camera: &CameraModel, surface: &SurfaceMesh, state: &ParticleState) -> Vec<usize> {
    let mut counts = vec![0; surface.face_count()];
    for f in camera.render(surface, state).into_iter().flatten() {
        counts[f] += 1;
    }
    counts
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
    pub sigma: f64,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// ASCII PLY with vertex positions only.
    pub fn to_ply(&self) -> String {
        let mut s = format!(
            "ply\nformat ascii 1.0\ncomment sigma {}\nelement vertex {}\nproperty double x\nproperty double y\nproperty double z\nend_header\n",
            self.sigma,
            self.points.len()
        );
        for p in &self.points {
            let _ = writeln!(s, "{} {} {}", p.x, p.y, p.z);
        }
        s
    }
}

fn uniform_in_triangle(rng: &mut ChaCha8Rng) -> [f64; 3] {
    let (a, b): (f64, f64) = (rng.random(), rng.random());
    let s = a.sqrt();
    [1.0 - s, s * (1.0 - b), s * b]
}

/// `count` material points drawn area-uniformly from the visible faces.
pub fn sample_visible_anchors(
    surface: &SurfaceMesh,
    state: &ParticleState,
    visible: &[bool],
    count: usize,
    seed: u64,
) -> Result<Vec<MaterialAnchor>> {
    let faces: Vec<usize> = (0..surface.face_count()).filter(|&f| visible[f]).collect();
    let areas: Vec<f64> = faces.iter().map(|&f| surface.area(f, &state.positions)).collect();
    let pick = WeightedIndex::new(&areas).map_err(|_| PerceptionError::NothingVisible)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let f = faces[pick.sample(&mut rng)];
            MaterialAnchor {
                face: f,
                barycentric: uniform_in_triangle(&mut rng),
            }
        })
        .collect())
}

/// Area-uniform samples of the visible surface with isotropic Gaussian noise.
pub fn synth_point_cloud(
    surface: &SurfaceMesh,
    state: &ParticleState,
    visible: &[bool],
    samples: usize,
    sigma: f64,
    seed: u64,
) -> Result<PointCloud> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(PerceptionError::BadNoise);
    }
    let anchors = sample_visible_anchors(surface, state, visible, samples, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let noise = Normal::new(0.0, sigma).map_err(|_| PerceptionError::BadNoise)?;
    let points = anchors
        .iter()
        .map(|a| {
            let p = crate::geometry::eval_anchor(surface, a, state);
            if sigma == 0.0 {
                p
            } else {
                p + Vec3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng))
            }
        })
        .collect();
    Ok(PointCloud { points, sigma })
}

/// Symmetric sum of squared nearest-neighbour distances.
pub fn chamfer(a: &[Vec3], b: &[Vec3]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(PerceptionError::EmptySet);
    }
    let one_way = |from: &[Vec3], to: &[Vec3]| -> f64 {
        let tree = KdTree::new(to.to_vec());
        from.iter().map(|p| tree.nearest(p).expect("non-empty").1).sum()
    };
    Ok(one_way(a, b) + one_way(b, a))
}

/// Registers the simulation to `cloud` over the visible faces; the
/// coupling and fixed vertices keep precedence.
pub fn estimate_state(sim: &mut SimState, cloud: &PointCloud, visible: &VisibilityMask) -> Result<ParticleState> {
    if visible.visible_count() == 0 {
        return Err(PerceptionError::NothingVisible);
    }
    let data = RegistrationData {
        cloud: &cloud.points,
        visible: &visible.faces,
    };
    Ok(sim.solve(None, Some(data))?.clone())
}

#[cfg(test)]
mod tests;
