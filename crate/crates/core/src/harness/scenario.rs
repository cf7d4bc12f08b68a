use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aps::{point_segment_distance, ApsConfig};
use crate::exposure::{DissectionSegment, FeatureParams, FeatureSet};
use crate::geometry::{bind_material_point, load_tet_mesh, MaterialAnchor, ParticleState, SurfaceMesh, TetMesh, WedgePhantom};
use crate::perception::CameraSpec;
use crate::servo::ServoConfig;
use crate::xpbd::{MaterialParams, SimConfig};
use crate::Vec3;

use super::{HarnessError, Result};

pub const SCENARIO_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MeshSource {
    Phantom(WedgePhantom),
    /// Tet mesh file; relative paths resolve against the scenario file.
    File { path: PathBuf },
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FixedSpec {
    /// Whatever the mesh flags as fixed.
    #[default]
    FromMesh,
    Vertices { vertices: Vec<usize> },
    /// Every vertex at or below height `z`.
    BelowHeight { z: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SegmentSpec {
    /// Surface picks, bound to the nearest surface point within `tolerance`.
    Points { start: Vec3, end: Vec3, tolerance: f64 },
    Anchors { q1: MaterialAnchor, q2: MaterialAnchor },
}

impl SegmentSpec {
    pub fn resolve(&self, surface: &SurfaceMesh, state: &ParticleState) -> Result<DissectionSegment> {
        Ok(match self {
            SegmentSpec::Points { start, end, tolerance } => DissectionSegment::new(
                bind_material_point(surface, start, state, *tolerance)?,
                bind_material_point(surface, end, state, *tolerance)?,
            ),
            SegmentSpec::Anchors { q1, q2 } => {
                for a in [q1, q2] {
                    if a.face >= surface.face_count() {
                        return Err(HarnessError::Scenario(format!("segment anchor face {} out of range", a.face)));
                    }
                }
                DissectionSegment::new(*q1, *q2)
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkedSpec {
    /// Faces whose centroid lies within `radius` of the segment (default:
    /// the largest ring radius).
    NearSegment { radius: Option<f64> },
    FromMesh,
    Faces { faces: Vec<usize> },
}

impl Default for MarkedSpec {
    fn default() -> Self {
        MarkedSpec::NearSegment { radius: None }
    }
}

impl MarkedSpec {
    pub fn resolve(&self, mesh: &TetMesh, state: &ParticleState, features: &FeatureSet) -> Result<Vec<bool>> {
        let s = &mesh.surface;
        let mut marked = vec![false; s.face_count()];
        let list = |faces: &[usize], marked: &mut Vec<bool>| -> Result<()> {
            for &f in faces {
                *marked
                    .get_mut(f)
                    .ok_or_else(|| HarnessError::Scenario(format!("marked face {f} out of range")))? = true;
            }
            Ok(())
        };
        match self {
            MarkedSpec::NearSegment { radius } => {
                let r = radius.unwrap_or_else(|| features.params.radii.iter().copied().fold(0.0, f64::max));
                let (a, b) = features.segment.endpoints(s, state);
                for (f, m) in marked.iter_mut().enumerate() {
                    *m = point_segment_distance(&s.centroid(f, &state.positions), &a, &b) <= r;
                }
            }
            MarkedSpec::FromMesh => list(&mesh.marked, &mut marked)?,
            MarkedSpec::Faces { faces } => list(faces, &mut marked)?,
        }
        if !marked.iter().any(|&m| m) {
            return Err(HarnessError::Scenario("marked region is empty".into()));
        }
        Ok(marked)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AssistSpec {
    #[default]
    Aps,
    Fixed { point: Vec3 },
}

/// Versioned scenario file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub version: u32,
    pub name: String,
    pub mesh: MeshSource,
    #[serde(default)]
    pub fixed: FixedSpec,
    pub camera: CameraSpec,
    pub segment: SegmentSpec,
    #[serde(default)]
    pub marked: MarkedSpec,
    #[serde(default)]
    pub features: FeatureParams,
    #[serde(default)]
    pub servo: ServoConfig,
    #[serde(default)]
    pub aps: ApsConfig,
    #[serde(default)]
    pub sim: SimConfig,
    /// Material of the controller's model.
    #[serde(default)]
    pub material: MaterialParams,
    /// Material of the simulated ground truth, when it differs from the model.
    #[serde(default)]
    pub truth_material: Option<MaterialParams>,
    #[serde(default)]
    pub assist: AssistSpec,
    pub seed: u64,
    /// Directory of the scenario file, for relative mesh paths.
    #[serde(skip)]
    pub base_dir: Option<PathBuf>,
}

impl Scenario {
    /// Wedge phantom of `angle` degrees at default size and resolution, with
    /// a 2 cm segment along the crease and an overhead camera.
    pub fn wedge(name: &str, angle: f64) -> Self {
        Self::phantom(
            name,
            WedgePhantom {
                opening_angle_deg: angle,
                size: Default::default(),
                resolution: Default::default(),
            },
        )
    }

    /// Same layout as [`Scenario::wedge`] on an arbitrary phantom.
    pub fn phantom(name: &str, phantom: WedgePhantom) -> Self {
        let z = phantom.crease_height();
        Self {
            version: SCENARIO_VERSION,
            name: name.into(),
            mesh: MeshSource::Phantom(phantom),
            fixed: FixedSpec::FromMesh,
            camera: CameraSpec {
                eye: Vec3::new(0.0, -0.01, 0.12),
                target: Vec3::new(0.0, 0.0, z),
                up: Vec3::y(),
                fov_y_deg: 30.0,
                width: 320,
                height: 240,
            },
            segment: SegmentSpec::Points {
                start: Vec3::new(-0.01, 0.0, z),
                end: Vec3::new(0.01, 0.0, z),
                tolerance: 1e-6,
            },
            marked: MarkedSpec::default(),
            features: FeatureParams::default(),
            servo: ServoConfig::default(),
            aps: ApsConfig {
                stride: 4,
                ..ApsConfig::default()
            },
            sim: SimConfig::default(),
            material: MaterialParams::default(),
            truth_material: None,
            assist: AssistSpec::Aps,
            seed: 0,
            base_dir: None,
        }
    }

    /// 45 degree groove with the reference gains and feature parameters.
    pub fn p1_analogue() -> Self {
        Self::wedge("p1-analogue", 45.0)
    }

    /// Point on the top face 1.5 cm from the segment of a default wedge.
    pub fn default_fixed_point(&self) -> Vec3 {
        let top = match &self.mesh {
            MeshSource::Phantom(p) => p.size.height,
            MeshSource::File { .. } => 0.02,
        };
        let z = match &self.segment {
            SegmentSpec::Points { start, .. } => start.z,
            SegmentSpec::Anchors { .. } => top,
        };
        let dz = top - z;
        let y = (0.015f64 * 0.015 - dz * dz).max(0.0).sqrt();
        Vec3::new(0.0, y, top)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| HarnessError::Scenario(format!("invalid JSON: {e}")))?;
        match value.get("version").and_then(|v| v.as_u64()) {
            Some(v) if v == SCENARIO_VERSION as u64 => {}
            Some(v) => {
                return Err(HarnessError::Scenario(format!(
                    "unsupported scenario version {v} (expected {SCENARIO_VERSION})"
                )))
            }
            None => return Err(HarnessError::Scenario("missing scenario version".into())),
        }
        let s: Scenario = serde_json::from_value(value).map_err(|e| HarnessError::Scenario(e.to_string()))?;
        s.validate()?;
        Ok(s)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("{}: {e}", path.display())))?;
        let mut s = Self::from_json(&text)?;
        s.base_dir = path.parent().map(Path::to_path_buf);
        Ok(s)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenarios serialize")
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("scenarios serialize");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != SCENARIO_VERSION {
            return Err(HarnessError::Scenario(format!("unsupported scenario version {}", self.version)));
        }
        self.features.validate()?;
        self.servo.gains.validate()?;
        if !(self.aps.alpha.is_finite() && self.aps.l_min >= 0.0) {
            return Err(HarnessError::Scenario("APS alpha must be finite and l_min non-negative".into()));
        }
        Ok(())
    }

    pub fn build_mesh(&self) -> Result<TetMesh> {
        let mesh = match &self.mesh {
            MeshSource::Phantom(p) => p.generate()?,
            MeshSource::File { path } => {
                let full = match (&self.base_dir, path.is_relative()) {
                    (Some(base), true) => base.join(path),
                    _ => path.clone(),
                };
                load_tet_mesh(&full)?
            }
        };
        let mesh = match &self.fixed {
            FixedSpec::FromMesh => mesh,
            FixedSpec::Vertices { vertices } => mesh.with_fixed(vertices.clone())?,
            FixedSpec::BelowHeight { z } => {
                let v: Vec<usize> = (0..mesh.vertex_count()).filter(|&i| mesh.vertices[i].z <= *z).collect();
                mesh.with_fixed(v)?
            }
        };
        Ok(mesh)
    }
}
