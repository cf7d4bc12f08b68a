//! Exposure features: ring/surface feature pairs along a dissection segment,
//! their wedge, shear and stretch observations, errors, and the analytic
//! observation Jacobian.
//!
//! Layout of observation and error vectors, with `m = 4·L·R`:
//! wedge block, shear block, stretch-v block, stretch-w block. Within a
//! block, pair `(k_i, r_j)` sits at `i·R + j` (radius varies fastest).

mod jacobian;
mod ring;

use std::sync::Arc;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{eval_anchor, MaterialAnchor, ParticleState, SurfaceMesh};
use crate::Vec3;

pub use jacobian::ObservationJacobian;
pub use ring::{ring_surface_intersection, RingHit, RingIntersection};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExposureError {
    #[error("dissection segment endpoints coincide")]
    DegenerateSegment,
    #[error("ring r = {radius} m at k = {k} has no intersection on the {side} side")]
    RingOffSurface { radius: f64, k: f64, side: &'static str },
    #[error("feature pair {pair} has a zero-length vector")]
    ZeroLengthFeature { pair: usize },
    #[error("invalid feature parameters: {0}")]
    InvalidParams(String),
}

pub type Result<T> = std::result::Result<T, ExposureError>;

/// Segment `D(k) = q1 + k (q2 - q1)` with materially bound endpoints.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DissectionSegment {
    pub q1: MaterialAnchor,
    pub q2: MaterialAnchor,
}

impl DissectionSegment {
    pub fn new(q1: MaterialAnchor, q2: MaterialAnchor) -> Self {
        Self { q1, q2 }
    }

    pub fn endpoints(&self, surface: &SurfaceMesh, state: &ParticleState) -> (Vec3, Vec3) {
        (
            eval_anchor(surface, &self.q1, state),
            eval_anchor(surface, &self.q2, state),
        )
    }

    pub fn point(&self, surface: &SurfaceMesh, state: &ParticleState, k: f64) -> Vec3 {
        let (a, b) = self.endpoints(surface, state);
        a + k * (b - a)
    }

    /// Unit direction `d_t` in the given state.
    pub fn direction(&self, surface: &SurfaceMesh, state: &ParticleState) -> Result<Vec3> {
        let (a, b) = self.endpoints(surface, state);
        let e = b - a;
        let len = e.norm();
        if !(len > 0.0) {
            return Err(ExposureError::DegenerateSegment);
        }
        Ok(e / len)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RingSpec {
    pub radius: f64,
    pub k: f64,
}

/// Which side of the dissection line a feature point lies on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Side {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePair {
    pub ring: RingSpec,
    /// Left point `v`.
    pub v_anchor: MaterialAnchor,
    /// Right point `w`.
    pub w_anchor: MaterialAnchor,
    pub initial_v: f64,
    pub initial_w: f64,
}

/// Tunable parameters of the feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureParams {
    /// Segment parameters `L`, each in [0, 1].
    pub ks: Vec<f64>,
    /// Ring radii `R` (m).
    pub radii: Vec<f64>,
    pub gamma_v: f64,
    pub gamma_w: f64,
    /// Target wedge cosine `o^e`, shared by all pairs.
    pub wedge_target: f64,
}

impl Default for FeatureParams {
    fn default() -> Self {
        Self {
            ks: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            radii: vec![3e-3, 6e-3, 9e-3],
            gamma_v: 1.5,
            gamma_w: 1.5,
            wedge_target: -1.0,
        }
    }
}

impl FeatureParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(ExposureError::InvalidParams(m.into()));
        if self.ks.is_empty() || self.radii.is_empty() {
            return bad("L and R must be non-empty");
        }
        if self.ks.iter().any(|k| !(0.0..=1.0).contains(k)) {
            return bad("segment parameters must lie in [0, 1]");
        }
        if self.radii.iter().any(|r| !(*r > 0.0) || !r.is_finite()) {
            return bad("ring radii must be positive");
        }
        if !self.gamma_v.is_finite() || !self.gamma_w.is_finite() {
            return bad("stretch multipliers must be finite");
        }
        if !(-1.0..=1.0).contains(&self.wedge_target) {
            return bad("wedge target must lie in [-1, 1]");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeatureSet {
    #[serde(skip)]
    surface: Option<Arc<SurfaceMesh>>,
    pub segment: DissectionSegment,
    pub params: FeatureParams,
    /// `L·R` pairs in layout order.
    pub pairs: Vec<FeaturePair>,
}

/// Observation blocks, each of length `L·R`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub wedge: Vec<f64>,
    pub shear: Vec<f64>,
    pub stretch_v: Vec<f64>,
    pub stretch_w: Vec<f64>,
}

impl Observation {
    pub fn len(&self) -> usize {
        4 * self.wedge.len()
    }

    pub fn is_empty(&self) -> bool {
        self.wedge.is_empty()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.len(),
            self.wedge
                .iter()
                .chain(&self.shear)
                .chain(&self.stretch_v)
                .chain(&self.stretch_w)
                .copied(),
        )
    }

    pub fn mean_wedge(&self) -> f64 {
        self.wedge.iter().sum::<f64>() / self.wedge.len() as f64
    }

    pub fn mean_shear(&self) -> f64 {
        self.shear.iter().sum::<f64>() / self.shear.len() as f64
    }
}

/// Error blocks `target - observation`, same layout as [`Observation`].
pub type ErrorVector = Observation;

/// Cosine similarity; zero when either vector vanishes.
pub fn cosine_similarity(a: &Vec3, b: &Vec3) -> f64 {
    let n = a.norm() * b.norm();
    if n == 0.0 {
        return 0.0;
    }
    (a.dot(b) / n).clamp(-1.0, 1.0)
}

/// `v × w`, or zero when the two are parallel to within rounding.
pub(crate) fn wedge_normal(v: &Vec3, w: &Vec3) -> Vec3 {
    let u = v.cross(w);
    if u.norm() <= 64.0 * f64::EPSILON * v.norm() * w.norm() {
        Vec3::zeros()
    } else {
        u
    }
}

impl FeatureSet {
    pub fn surface(&self) -> &SurfaceMesh {
        self.surface
            .as_deref()
            .expect("feature set not bound to a surface")
    }

    /// Re-attaches the surface after deserialization.
    pub fn bind_surface(&mut self, surface: Arc<SurfaceMesh>) {
        self.surface = Some(surface);
    }

    pub fn pair_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn observation_len(&self) -> usize {
        4 * self.pairs.len()
    }

    pub fn pair_index(&self, k_index: usize, r_index: usize) -> usize {
        k_index * self.params.radii.len() + r_index
    }

    /// Feature vectors `(v - D(k), w - D(k))` of one pair.
    pub fn feature_vectors(&self, pair: usize, state: &ParticleState) -> (Vec3, Vec3) {
        let s = self.surface();
        let p = &self.pairs[pair];
        let d = self.segment.point(s, state, p.ring.k);
        (
            eval_anchor(s, &p.v_anchor, state) - d,
            eval_anchor(s, &p.w_anchor, state) - d,
        )
    }

    pub fn observe(&self, state: &ParticleState) -> Result<Observation> {
        let dir = self.segment.direction(self.surface(), state)?;
        let n = self.pairs.len();
        let mut obs = Observation {
            wedge: Vec::with_capacity(n),
            shear: Vec::with_capacity(n),
            stretch_v: Vec::with_capacity(n),
            stretch_w: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (v, w) = self.feature_vectors(i, state);
            let (lv, lw) = (v.norm(), w.norm());
            if lv == 0.0 || lw == 0.0 {
                return Err(ExposureError::ZeroLengthFeature { pair: i });
            }
            let u = wedge_normal(&v, &w);
            if u.dot(&dir) < 0.0 {
                tracing::warn!(pair = i, "wedge opened past 180 degrees; cosine is ambiguous");
            }
            obs.wedge.push(cosine_similarity(&v, &w));
            obs.shear.push(cosine_similarity(&u, &dir));
            obs.stretch_v.push(lv);
            obs.stretch_w.push(lw);
        }
        Ok(obs)
    }

    /// Stacked targets `[o^e; o^s = 1; γ^v Λ^v(x0); γ^w Λ^w(x0)]`.
    pub fn targets(&self) -> Observation {
        let n = self.pairs.len();
        Observation {
            wedge: vec![self.params.wedge_target; n],
            shear: vec![1.0; n],
            stretch_v: self
                .pairs
                .iter()
                .map(|p| self.params.gamma_v * p.initial_v)
                .collect(),
            stretch_w: self
                .pairs
                .iter()
                .map(|p| self.params.gamma_w * p.initial_w)
                .collect(),
        }
    }

    pub fn error(&self, obs: &Observation) -> ErrorVector {
        let t = self.targets();
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect();
        Observation {
            wedge: sub(&t.wedge, &obs.wedge),
            shear: sub(&t.shear, &obs.shear),
            stretch_v: sub(&t.stretch_v, &obs.stretch_v),
            stretch_w: sub(&t.stretch_w, &obs.stretch_w),
        }
    }
}

/// Binds every `(k, r)` pair at the state `state0`.
pub fn init_observation(
    surface: Arc<SurfaceMesh>,
    state0: &ParticleState,
    segment: DissectionSegment,
    params: FeatureParams,
) -> Result<FeatureSet> {
    params.validate()?;
    segment.direction(&surface, state0)?;
    let mut pairs = Vec::with_capacity(params.ks.len() * params.radii.len());
    for &k in &params.ks {
        for &radius in &params.radii {
            let ring = RingSpec { radius, k };
            let hit = ring_surface_intersection(&surface, state0, &ring, &segment)?;
            pairs.push(FeaturePair {
                ring,
                v_anchor: hit.left.anchor,
                w_anchor: hit.right.anchor,
                initial_v: (hit.left.point - hit.center).norm(),
                initial_w: (hit.right.point - hit.center).norm(),
            });
        }
    }
    Ok(FeatureSet {
        surface: Some(surface),
        segment,
        params,
        pairs,
    })
}

/// Free-function form of [`FeatureSet::observe`].
pub fn observe(features: &FeatureSet, state: &ParticleState) -> Result<Observation> {
    features.observe(state)
}

/// Free-function form of [`FeatureSet::error`].
pub fn error(obs: &Observation, features: &FeatureSet) -> ErrorVector {
    features.error(obs)
}

/// Free-function form of [`FeatureSet::observation_jacobian`].
pub fn observation_jacobian(features: &FeatureSet, state: &ParticleState) -> Result<ObservationJacobian> {
    features.observation_jacobian(state)
}
