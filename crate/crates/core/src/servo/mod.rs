//! PD visual servoing on the composed Jacobian `J_O J_d`, and the
//! per-request control loop: sense, register, observe, step, move.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::{debug, info, warn};

use crate::exposure::{ExposureError, FeatureSet};
use crate::geometry::ParticleState;
use crate::perception::{
    estimate_state, render_visibility, synth_point_cloud, synth_segmentation, CameraModel, PerceptionError,
    VisibilityMask,
};
use crate::xpbd::{DeformationJacobian, SimError, SimState};
use crate::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ServoError {
    #[error("non-finite controller input")]
    NonFinite,
    #[error("error vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("composed Jacobian is {rows}x{cols}; expected {expected}x3")]
    BadJacobian { rows: usize, cols: usize, expected: usize },
    #[error("invalid gains: {0}")]
    InvalidGains(&'static str),
    #[error("session has no coupling installed")]
    NotCoupled,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
}

pub type Result<T> = std::result::Result<T, ServoError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlGains {
    pub kp: f64,
    pub kd: f64,
    /// Tikhonov damping of the pseudoinverse.
    pub damping: f64,
    /// Largest end-effector move per step (m).
    pub max_step: f64,
    pub max_iterations: usize,
}

impl Default for ControlGains {
    fn default() -> Self {
        Self {
            kp: 3e-4,
            kd: 1e-5,
            damping: 1e-6,
            max_step: 8e-4,
            max_iterations: 40,
        }
    }
}

impl ControlGains {
    pub fn validate(&self) -> Result<()> {
        if !(self.kp > 0.0 && self.kp.is_finite()) {
            return Err(ServoError::InvalidGains("kp must be positive"));
        }
        if !(self.kd >= 0.0 && self.kd.is_finite()) {
            return Err(ServoError::InvalidGains("kd must be non-negative"));
        }
        if !(self.damping >= 0.0 && self.damping.is_finite()) {
            return Err(ServoError::InvalidGains("damping must be non-negative"));
        }
        if !(self.max_step > 0.0 && self.max_step.is_finite()) {
            return Err(ServoError::InvalidGains("max step must be positive"));
        }
        Ok(())
    }
}

/// Damped pseudoinverse `(JᵀJ + λ²I)⁻¹ Jᵀ` of an `m × 3` matrix, computed
/// from the SVD as `V diag(σ / (σ² + λ²)) Uᵀ`. Zero singular values map to
/// zero, so `λ = 0` gives the Moore-Penrose inverse.
pub fn damped_pinv(j: &DMatrix<f64>, damping: f64) -> DMatrix<f64> {
    let svd = j.clone().svd(true, true);
    let u = svd.u.expect("left vectors requested");
    let vt = svd.v_t.expect("right vectors requested");
    let lam2 = damping * damping;
    let scale = svd.singular_values.map(|s| {
        let d = s * s + lam2;
        if d > 0.0 {
            s / d
        } else {
            0.0
        }
    });
    vt.transpose() * DMatrix::from_diagonal(&scale) * u.transpose()
}

/// Block weights applied to both the error and the rows of `J_O J_d`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BlockWeights {
    pub wedge: f64,
    pub shear: f64,
    pub stretch: f64,
}

impl Default for BlockWeights {
    fn default() -> Self {
        Self {
            wedge: 1.0,
            shear: 1.0,
            stretch: 1.0,
        }
    }
}

impl BlockWeights {
    fn is_uniform(&self) -> bool {
        self.wedge == 1.0 && self.shear == 1.0 && self.stretch == 1.0
    }

    /// Weight of each row of a `4n` observation.
    pub fn rows(&self, pairs: usize) -> Vec<f64> {
        let mut w = vec![self.wedge; pairs];
        w.extend(std::iter::repeat_n(self.shear, pairs));
        w.extend(std::iter::repeat_n(self.stretch, 2 * pairs));
        w
    }
}

/// Clamps `dp` to length `max_step`.
pub fn clamp_step(dp: Vec3, max_step: f64) -> Vec3 {
    let n = dp.norm();
    if n > max_step {
        dp * (max_step / n)
    } else {
        dp
    }
}

/// PD step `K_p J⁺ ℰ + K_d J⁺ (ℰ − ℰ_prev)` on the composed `m × 3`
/// Jacobian, clamped to the maximum step.
pub fn control_step(
    error: &DVector<f64>,
    prev_error: &DVector<f64>,
    composed: &DMatrix<f64>,
    gains: &ControlGains,
) -> Result<Vec3> {
    if error.len() != prev_error.len() {
        return Err(ServoError::LengthMismatch(error.len(), prev_error.len()));
    }
    if composed.nrows() != error.len() || composed.ncols() != 3 {
        return Err(ServoError::BadJacobian {
            rows: composed.nrows(),
            cols: composed.ncols(),
            expected: error.len(),
        });
    }
    if !(error.iter().chain(prev_error.iter()).chain(composed.iter()).all(|x| x.is_finite())) {
        return Err(ServoError::NonFinite);
    }
    let pinv = damped_pinv(composed, gains.damping);
    let drive = gains.kp * error + gains.kd * (error - prev_error);
    let dp = &pinv * drive;
    let dp = Vec3::new(dp[0], dp[1], dp[2]);
    if !dp.iter().all(|x| x.is_finite()) {
        return Err(ServoError::NonFinite);
    }
    Ok(clamp_step(dp, gains.max_step))
}

/// Sensing inside the loop.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SensingConfig {
    /// Register the model to a synthetic cloud every `registration_every`
    /// steps; otherwise the model copies the true state.
    pub registration: bool,
    pub registration_every: usize,
    pub cloud_samples: usize,
    /// Isotropic cloud noise (m).
    pub noise_sigma: f64,
    /// Sweep cap of each registration solve.
    pub registration_sweeps: usize,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            registration: true,
            registration_every: 1,
            cloud_samples: 2000,
            noise_sigma: 5e-4,
            registration_sweeps: 10,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServoConfig {
    pub gains: ControlGains,
    /// Stop when `‖ℰ‖` falls below this.
    pub epsilon: f64,
    /// A step shorter than this counts toward a stall (m).
    pub stall_step: f64,
    pub stall_count: usize,
    /// Recompute `J_d` every n steps.
    pub jacobian_refresh: usize,
    pub weights: BlockWeights,
    pub sensing: SensingConfig,
}

impl Default for ServoConfig {
    fn default() -> Self {
        Self {
            gains: ControlGains::default(),
            epsilon: 1e-3,
            stall_step: 1e-6,
            stall_count: 5,
            jacobian_refresh: 1,
            weights: BlockWeights::default(),
            sensing: SensingConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StopReason {
    IterationCap,
    Converged,
    /// Several consecutive negligible steps without convergence.
    LocalMinimum,
    Aborted { category: String, message: String },
}

impl StopReason {
    pub fn aborted(e: &ServoError) -> Self {
        let category = match e {
            ServoError::Sim(_) => "solver",
            ServoError::Exposure(_) => "features",
            ServoError::Perception(_) => "perception",
            _ => "controller",
        };
        StopReason::Aborted {
            category: category.into(),
            message: e.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    /// End-effector position when the step was computed.
    pub p: Vec3,
    pub dp: Vec3,
    pub error: Vec<f64>,
    pub observation: Vec<f64>,
    pub error_norm: f64,
    pub wedge_error_norm: f64,
    pub shear_error_norm: f64,
    pub stretch_error_norm: f64,
    /// Hard-constraint violation and stationarity residual of the true state after the move.
    pub hard_error: f64,
    pub residual: f64,
    pub visible_faces: usize,
    pub wall_ms: f64,
}

impl StepRecord {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ServoTrace {
    pub steps: Vec<StepRecord>,
    pub stop: Option<StopReason>,
}

impl ServoTrace {
    pub fn to_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.steps {
            s.push_str(&r.to_json_line());
            s.push('\n');
        }
        s
    }

    pub fn final_p(&self) -> Option<Vec3> {
        self.steps.last().map(|r| r.p + r.dp)
    }

    pub fn path_length(&self) -> f64 {
        self.steps.iter().map(|r| r.dp.norm()).sum()
    }
}

fn block_norms(e: &[f64], pairs: usize) -> [f64; 3] {
    let n = |a: usize, b: usize| e[a..b].iter().map(|x| x * x).sum::<f64>().sqrt();
    [n(0, pairs), n(pairs, 2 * pairs), n(2 * pairs, 4 * pairs)]
}

/// Outcome of one control iteration.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Continue(StepRecord),
    Stop(Option<StepRecord>, StopReason),
}

/// One assistance request after position selection: the true tissue, the
/// controller's model of it, and the features to drive.
#[derive(Clone)]
pub struct AssistSession {
    /// Simulated ground truth; only sensed through the camera.
    pub truth: SimState,
    /// Estimator used for observation and Jacobians.
    pub model: SimState,
    pub features: FeatureSet,
    pub camera: CameraModel,
    pub config: ServoConfig,
    pub seed: u64,
    step: usize,
    prev_error: Option<DVector<f64>>,
    small_steps: usize,
    jd_cache: Option<DeformationJacobian>,
}

impl AssistSession {
    /// Both simulations must already carry the coupling at the selected face.
    pub fn new(
        truth: SimState,
        model: SimState,
        features: FeatureSet,
        camera: CameraModel,
        config: ServoConfig,
        seed: u64,
    ) -> Result<Self> {
        config.gains.validate()?;
        if truth.coupling().is_none() || model.coupling().is_none() {
            return Err(ServoError::NotCoupled);
        }
        Ok(Self {
            truth,
            model,
            features,
            camera,
            config,
            seed,
            step: 0,
            prev_error: None,
            small_steps: 0,
            jd_cache: None,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    pub fn ee_position(&self) -> Vec3 {
        self.truth.coupling().expect("coupled").target
    }

    /// Faces of the true tissue visible to the camera.
    pub fn visibility(&self, state: &ParticleState) -> VisibilityMask {
        let surface = &self.truth.mesh().surface;
        let seg = synth_segmentation(&self.camera, surface, state);
        render_visibility(&self.camera, surface, state, &seg)
    }

    fn sense(&mut self) -> Result<VisibilityMask> {
        let vis = self.visibility(self.truth.state());
        let s = self.config.sensing;
        let every = s.registration_every.max(1);
        if s.registration && self.step % every == 0 {
            let cloud = synth_point_cloud(
                &self.truth.mesh().surface,
                self.truth.state(),
                &vis.faces,
                s.cloud_samples,
                s.noise_sigma,
                self.seed.wrapping_mul(1_000_003).wrapping_add(self.step as u64),
            )?;
            let sweeps = self.model.config().iterations;
            self.model.config_mut().iterations = s.registration_sweeps.max(1);
            let res = estimate_state(&mut self.model, &cloud, &vis);
            self.model.config_mut().iterations = sweeps;
            res?;
        } else if !s.registration {
            self.model.set_state(self.truth.state().clone());
        }
        Ok(vis)
    }

    fn composed_jacobian(&mut self) -> Result<DMatrix<f64>> {
        let p = self.model.coupling().ok_or(ServoError::NotCoupled)?.target;
        let refresh = self.config.jacobian_refresh.max(1);
        if self.jd_cache.is_none() || self.step % refresh == 0 {
            self.jd_cache = Some(self.model.deformation_jacobian(p)?);
        }
        let jo = self.features.observation_jacobian(self.model.state())?;
        let mut j = jo.compose(self.jd_cache.as_ref().expect("just set"));
        if !self.config.weights.is_uniform() {
            for (r, w) in self.config.weights.rows(self.features.pair_count()).into_iter().enumerate() {
                j.row_mut(r).scale_mut(w);
            }
        }
        Ok(j)
    }

    fn weighted(&self, e: DVector<f64>) -> DVector<f64> {
        if self.config.weights.is_uniform() {
            return e;
        }
        let w = DVector::from_vec(self.config.weights.rows(self.features.pair_count()));
        e.component_mul(&w)
    }

    /// Sense, register, observe, compute and apply one clamped step.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let start = Instant::now();
        let vis = self.sense()?;
        let obs = self.features.observe(self.model.state())?;
        let err = self.features.error(&obs).to_vector();
        let pairs = self.features.pair_count();
        let [we, se, te] = block_norms(err.as_slice(), pairs);
        let p = self.ee_position();
        let mut record = StepRecord {
            step: self.step,
            p,
            dp: Vec3::zeros(),
            error: err.iter().copied().collect(),
            observation: obs.to_vector().iter().copied().collect(),
            error_norm: err.norm(),
            wedge_error_norm: we,
            shear_error_norm: se,
            stretch_error_norm: te,
            hard_error: self.truth.hard_constraint_error(),
            residual: self.truth.constraint_residual(),
            visible_faces: vis.visible_count(),
            wall_ms: 0.0,
        };
        if record.error_norm < self.config.epsilon {
            record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
            self.step += 1;
            return Ok(StepOutcome::Stop(Some(record), StopReason::Converged));
        }

        let werr = self.weighted(err.clone());
        let prev = self.prev_error.clone().unwrap_or_else(|| werr.clone());
        let j = self.composed_jacobian()?;
        let dp = control_step(&werr, &prev, &j, &self.config.gains)?;
        self.prev_error = Some(werr);

        let target = p + dp;
        self.truth.solve(Some(target), None)?;
        self.model.solve(Some(target), None)?;
        record.dp = dp;
        record.hard_error = self.truth.hard_constraint_error();
        record.residual = self.truth.constraint_residual();
        record.wall_ms = start.elapsed().as_secs_f64() * 1e3;
        debug!(
            step = self.step,
            error = record.error_norm,
            wedge = record.wedge_error_norm,
            dp = dp.norm(),
            "servo step"
        );
        self.step += 1;

        if dp.norm() < self.config.stall_step {
            self.small_steps += 1;
        } else {
            self.small_steps = 0;
        }
        if self.small_steps >= self.config.stall_count {
            return Ok(StepOutcome::Stop(Some(record), StopReason::LocalMinimum));
        }
        Ok(StepOutcome::Continue(record))
    }
}

/// Runs up to `iterations` control steps. Errors end the loop with the
/// trace so far and an `Aborted` stop reason.
pub fn run_servo_loop(session: &mut AssistSession, iterations: usize) -> ServoTrace {
    let mut trace = ServoTrace::default();
    for _ in 0..iterations {
        match session.step() {
            Ok(StepOutcome::Continue(r)) => trace.steps.push(r),
            Ok(StepOutcome::Stop(r, reason)) => {
                trace.steps.extend(r);
                trace.stop = Some(reason);
                break;
            }
            Err(e) => {
                warn!(step = session.step_index(), error = %e, "servo loop aborted");
                trace.stop = Some(StopReason::aborted(&e));
                break;
            }
        }
    }
    if trace.stop.is_none() {
        trace.stop = Some(StopReason::IterationCap);
    }
    info!(steps = trace.steps.len(), stop = ?trace.stop, "servo loop finished");
    trace
}
