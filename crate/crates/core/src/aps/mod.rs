//! Assistance position selection: score every visible surface face by how
//! cleanly a pull there drives the mean wedge cosine without driving the
//! mean shear cosine, and pick the best.

use nalgebra::{Matrix2, Matrix2x3, RowVector3, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exposure::{ExposureError, FeatureSet, ObservationJacobian};
use crate::geometry::{ParticleState, SurfaceMesh};
use crate::xpbd::{SimError, SimState};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ApsError {
    #[error("no feasible assistance position")]
    NoFeasibleCandidate,
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("visibility mask has {got} entries for {faces} faces")]
    BadVisibility { got: usize, faces: usize },
}

pub type Result<T> = std::result::Result<T, ApsError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ApsConfig {
    /// Weight of the shear penalty.
    pub alpha: f64,
    /// Minimum distance from the dissection segment (m).
    pub l_min: f64,
    /// Evaluate every `stride`-th feasible candidate.
    pub stride: usize,
}

impl Default for ApsConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            l_min: 0.005,
            stride: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Feasibility {
    Feasible,
    TooClose { distance: f64 },
    NotVisible,
    Skipped,
    SolverFailed { reason: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateScore {
    pub face: usize,
    pub centroid: Vec3,
    pub j_avg: Option<Matrix2x3<f64>>,
    pub score: Option<f64>,
    pub feasibility: Feasibility,
}

impl CandidateScore {
    pub fn is_scored(&self) -> bool {
        self.score.is_some()
    }
}

/// SVD of a 2×3 Jacobian with the wedge/shear pairing of its left vectors.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decomposition {
    /// Left singular vectors as columns, ordered by descending singular value.
    pub u: Matrix2<f64>,
    pub sigma: [f64; 2],
    pub wedge_index: usize,
    pub shear_index: usize,
}

impl Decomposition {
    pub fn sigma_wedge(&self) -> f64 {
        self.sigma[self.wedge_index]
    }

    pub fn sigma_shear(&self) -> f64 {
        self.sigma[self.shear_index]
    }

    pub fn u_wedge(&self) -> Vector2<f64> {
        self.u.column(self.wedge_index).into_owned()
    }

    pub fn u_shear(&self) -> Vector2<f64> {
        self.u.column(self.shear_index).into_owned()
    }
}

/// Left singular pairs of `j`, sorted so that `σ1 ≥ σ2 ≥ 0`.
pub fn left_singular(j: &Matrix2x3<f64>) -> (Matrix2<f64>, [f64; 2]) {
    let svd = j.svd(true, false);
    let u = svd.u.expect("left vectors requested");
    let s = svd.singular_values;
    let (a, b) = if s[0] >= s[1] { (0, 1) } else { (1, 0) };
    let mut out = Matrix2::zeros();
    out.set_column(0, &u.column(a));
    out.set_column(1, &u.column(b));
    (out, [s[a], s[b]])
}

/// Heuristic `M = |cos(u^w, b^w)| σ^w − α |cos(u^s, b^s)| σ^s`.
///
/// `u^w` is the left vector with the larger `|x|` component; on an exact
/// tie it is `u1`. `u^s` is always the other vector. The zero matrix
/// scores 0.
pub fn heuristic_score(j: &Matrix2x3<f64>, alpha: f64) -> (f64, Decomposition) {
    let (u, sigma) = left_singular(j);
    let wedge_index = if u[(0, 1)].abs() > u[(0, 0)].abs() { 1 } else { 0 };
    let shear_index = 1 - wedge_index;
    let d = Decomposition {
        u,
        sigma,
        wedge_index,
        shear_index,
    };
    // Columns of U are unit, so |cos(u, b)| is the matching component.
    let m = d.u_wedge()[0].abs() * d.sigma_wedge() - alpha * d.u_shear()[1].abs() * d.sigma_shear();
    (m, d)
}

/// Euclidean distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
    let e = b - a;
    let len2 = e.norm_squared();
    let t = if len2 > 0.0 {
        ((p - a).dot(&e) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    (p - (a + t * e)).norm()
}

/// Every surface face centroid with its feasibility: visible and at least
/// `l_min` from the segment.
pub fn candidate_set(
    surface: &SurfaceMesh,
    state: &ParticleState,
    visible: &[bool],
    features: &FeatureSet,
    l_min: f64,
) -> Result<Vec<CandidateScore>> {
    if visible.len() != surface.face_count() {
        return Err(ApsError::BadVisibility {
            got: visible.len(),
            faces: surface.face_count(),
        });
    }
    let (q1, q2) = features.segment.endpoints(surface, state);
    let out: Vec<CandidateScore> = (0..surface.face_count())
        .map(|f| {
            let centroid = surface.centroid(f, &state.positions);
            let distance = point_segment_distance(&centroid, &q1, &q2);
            let feasibility = if !visible[f] {
                Feasibility::NotVisible
            } else if distance < l_min {
                Feasibility::TooClose { distance }
            } else {
                Feasibility::Feasible
            };
            CandidateScore {
                face: f,
                centroid,
                j_avg: None,
                score: None,
                feasibility,
            }
        })
        .collect();
    if !out.iter().any(|c| c.feasibility == Feasibility::Feasible) {
        return Err(ApsError::NoFeasibleCandidate);
    }
    Ok(out)
}

/// Mean of the wedge rows and mean of the shear rows of `J_O`, as dense
/// `2 × 3N` rows.
fn average_rows(jo: &ObservationJacobian, pairs: usize) -> [Vec<Vec3>; 2] {
    let mut rows = [vec![Vec3::zeros(); jo.particle_count], vec![Vec3::zeros(); jo.particle_count]];
    for (block, out) in rows.iter_mut().enumerate() {
        for r in block * pairs..(block + 1) * pairs {
            for (v, g) in &jo.rows[r] {
                out[*v] += g / pairs as f64;
            }
        }
    }
    rows
}

/// `J_avg` for coupling `face` at its current centroid, at zero displacement.
/// The simulation is left untouched.
pub fn avg_jacobian(sim: &SimState, face: usize, features: &FeatureSet) -> Result<Matrix2x3<f64>> {
    let jo = features.observation_jacobian(sim.state())?;
    let rows = average_rows(&jo, features.pair_count());
    avg_jacobian_with_rows(sim, face, &rows)
}

fn avg_jacobian_with_rows(sim: &SimState, face: usize, rows: &[Vec<Vec3>; 2]) -> Result<Matrix2x3<f64>> {
    let mut local = sim.clone();
    local.decouple();
    let p0 = local.mesh().surface.centroid(face, &local.state().positions);
    local.couple_face(face, p0)?;
    let jd = local.deformation_jacobian(p0)?;
    let mut j = Matrix2x3::zeros();
    for (r, row) in rows.iter().enumerate() {
        let mut acc = RowVector3::zeros();
        for (v, g) in row.iter().enumerate() {
            if *g != Vec3::zeros() {
                acc += g.transpose() * jd.block(v);
            }
        }
        j.set_row(r, &acc);
    }
    Ok(j)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ApsResult {
    pub best: CandidateScore,
    pub map: Vec<CandidateScore>,
}

impl ApsResult {
    /// Largest score in the map.
    pub fn map_max(&self) -> Option<f64> {
        self.map.iter().filter_map(|c| c.score).reduce(f64::max)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "best_face": self.best.face,
            "best_score": self.best.score,
            "faces": self.map.iter().map(|c| serde_json::json!({
                "face": c.face,
                "centroid": [c.centroid.x, c.centroid.y, c.centroid.z],
                "score": c.score,
                "feasibility": c.feasibility,
            })).collect::<Vec<_>>(),
        })
    }
}

/// Greedy selection over all feasible candidates (Jacobians evaluated in
/// parallel, merged by face index). Ties go to the lowest face index.
pub fn select_position(
    sim: &SimState,
    visible: &[bool],
    features: &FeatureSet,
    config: &ApsConfig,
) -> Result<ApsResult> {
    let surface = &sim.mesh().surface;
    let mut map = candidate_set(surface, sim.state(), visible, features, config.l_min)?;
    let stride = config.stride.max(1);
    let mut feasible_seen = 0;
    for c in map.iter_mut() {
        if c.feasibility == Feasibility::Feasible {
            if feasible_seen % stride != 0 {
                c.feasibility = Feasibility::Skipped;
            }
            feasible_seen += 1;
        }
    }
    let jo = features.observation_jacobian(sim.state())?;
    let rows = average_rows(&jo, features.pair_count());
    let evaluated: Vec<(usize, std::result::Result<Matrix2x3<f64>, String>)> = map
        .par_iter()
        .filter(|c| c.feasibility == Feasibility::Feasible)
        .map(|c| {
            (
                c.face,
                avg_jacobian_with_rows(sim, c.face, &rows).map_err(|e| e.to_string()),
            )
        })
        .collect();
    for (face, res) in evaluated {
        let c = &mut map[face];
        match res {
            Ok(j) if j.iter().all(|x| x.is_finite()) => {
                c.score = Some(heuristic_score(&j, config.alpha).0);
                c.j_avg = Some(j);
            }
            Ok(_) => {
                c.feasibility = Feasibility::SolverFailed {
                    reason: "non-finite Jacobian".into(),
                }
            }
            Err(reason) => c.feasibility = Feasibility::SolverFailed { reason },
        }
    }
    let best = map
        .iter()
        .filter_map(|c| c.score.map(|s| (s, c.face)))
        .fold(None, |acc: Option<(f64, usize)>, (s, f)| match acc {
            Some((bs, _)) if bs >= s => acc,
            _ => Some((s, f)),
        })
        .ok_or(ApsError::NoFeasibleCandidate)?;
    Ok(ApsResult {
        best: map[best.1].clone(),
        map,
    })
}

#[cfg(test)]
mod tests;
