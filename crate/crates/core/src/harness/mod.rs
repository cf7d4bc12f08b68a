//! Scenarios, request orchestration, the expansion-ratio metric, batches,
//! paired APS comparisons and run persistence.

mod report;
mod scenario;

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tracing::info;

use crate::aps::{point_segment_distance, select_position, ApsError, ApsResult};
use crate::exposure::{init_observation, ExposureError, FeatureSet};
use crate::geometry::{closest_point_on_triangle, ParticleState, SurfaceMesh, TetMesh};
use crate::perception::{face_pixel_counts, render_visibility, synth_segmentation, CameraModel, PerceptionError, VisibilityMask};
use crate::servo::{run_servo_loop, AssistSession, ServoError, ServoTrace, StopReason};
use crate::xpbd::{ConstraintSet, SimError, SimState};
use crate::Vec3;

pub use report::{
    append_summary_csv, output_dir_from_env, persist_run, BatchSummary, ColumnStats, ComparisonTable, ErrorSummary,
    Failure, RunOutput, RunReport, Timings, TrialPair, OUTPUT_ENV,
};
pub use scenario::{AssistSpec, FixedSpec, MarkedSpec, MeshSource, Scenario, SegmentSpec, SCENARIO_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum HarnessError {
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("geometry: {0}")]
    Geometry(String),
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Exposure(#[from] ExposureError),
    #[error(transparent)]
    Aps(#[from] ApsError),
    #[error(transparent)]
    Servo(#[from] ServoError),
    #[error(transparent)]
    Perception(#[from] PerceptionError),
    #[error("marked region covers no pixels in the initial view")]
    ZeroInitialArea,
    #[error("io: {0}")]
    Io(String),
}

impl HarnessError {
    /// Short failure category recorded in reports.
    pub fn category(&self) -> &'static str {
        match self {
            HarnessError::Scenario(_) => "scenario",
            HarnessError::Geometry(_) => "geometry",
            HarnessError::Sim(_) => "solver",
            HarnessError::Exposure(_) => "features",
            HarnessError::Aps(_) => "aps",
            HarnessError::Servo(_) => "controller",
            HarnessError::Perception(_) => "perception",
            HarnessError::ZeroInitialArea => "metric",
            HarnessError::Io(_) => "io",
        }
    }
}

impl From<crate::geometry::GeometryError> for HarnessError {
    fn from(e: crate::geometry::GeometryError) -> Self {
        HarnessError::Geometry(e.to_string())
    }
}

pub type Result<T> = std::result::Result<T, HarnessError>;

/// Projected pixel area of the marked faces that are visible at `state`.
pub fn marked_area(camera: &CameraModel, surface: &SurfaceMesh, marked: &[bool], state: &ParticleState) -> usize {
    face_pixel_counts(camera, surface, state)
        .iter()
        .zip(marked)
        .filter(|(_, &m)| m)
        .map(|(c, _)| c)
        .sum()
}

/// `ρ = 𝓐(x_T) / 𝓐(x_0)` from exact synthetic rendering.
pub fn expansion_ratio(
    camera: &CameraModel,
    surface: &SurfaceMesh,
    marked: &[bool],
    state0: &ParticleState,
    state_t: &ParticleState,
) -> Result<f64> {
    let a0 = marked_area(camera, surface, marked, state0);
    if a0 == 0 {
        return Err(HarnessError::ZeroInitialArea);
    }
    Ok(marked_area(camera, surface, marked, state_t) as f64 / a0 as f64)
}

/// Where the assistant grasps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AssistChoice {
    pub face: usize,
    pub point: Vec3,
    /// Heuristic score when chosen by APS.
    pub score: Option<f64>,
    pub method: String,
}

/// A loaded scenario with everything needed to run requests.
#[derive(Clone)]
pub struct Workbench {
    pub scenario: Scenario,
    pub scenario_digest: String,
    pub mesh: Arc<TetMesh>,
    pub features: FeatureSet,
    pub camera: CameraModel,
    pub marked: Vec<bool>,
    /// Estimator at rest, uncoupled.
    pub model: SimState,
    /// Ground truth at rest, uncoupled.
    pub truth: SimState,
}

impl Workbench {
    pub fn prepare(scenario: &Scenario) -> Result<Self> {
        scenario.validate()?;
        let mesh = scenario.build_mesh()?;
        let x0 = mesh.rest_state();
        let segment = scenario.segment.resolve(&mesh.surface, &x0)?;
        let features = init_observation(Arc::new(mesh.surface.clone()), &x0, segment, scenario.features.clone())?;
        let marked = scenario.marked.resolve(&mesh, &x0, &features)?;
        let camera = CameraModel::look_at(&scenario.camera)?;
        let mesh = Arc::new(mesh);
        let model = SimState::new(
            mesh.clone(),
            ConstraintSet::from_mesh(&mesh, &scenario.material),
            scenario.sim,
        )?;
        let truth_material = scenario.truth_material.unwrap_or(scenario.material);
        let truth = SimState::new(mesh.clone(), ConstraintSet::from_mesh(&mesh, &truth_material), scenario.sim)?;
        Ok(Self {
            scenario: scenario.clone(),
            scenario_digest: scenario.digest(),
            mesh,
            features,
            camera,
            marked,
            model,
            truth,
        })
    }

    pub fn surface(&self) -> &SurfaceMesh {
        &self.mesh.surface
    }

    pub fn rest_state(&self) -> &ParticleState {
        self.truth.state()
    }

    pub fn visibility(&self, state: &ParticleState) -> VisibilityMask {
        let seg = synth_segmentation(&self.camera, self.surface(), state);
        render_visibility(&self.camera, self.surface(), state, &seg)
    }

    /// Full APS score map at the rest state.
    pub fn aps_map(&self) -> Result<ApsResult> {
        let vis = self.visibility(self.model.state());
        Ok(select_position(&self.model, &vis.faces, &self.features, &self.scenario.aps)?)
    }

    /// Grasp on the surface point closest to `point`; a point already on the
    /// surface (within 1 nm) is used as given.
    pub fn fixed_choice(&self, point: &Vec3) -> AssistChoice {
        let s = self.surface();
        let x = &self.rest_state().positions;
        let mut best = (f64::INFINITY, 0, *point);
        for f in 0..s.face_count() {
            let [a, b, c] = s.corners(f, x);
            let w = closest_point_on_triangle(point, &a, &b, &c);
            let q = w[0] * a + w[1] * b + w[2] * c;
            let d = (q - point).norm();
            if d < best.0 {
                best = (d, f, q);
            }
        }
        AssistChoice {
            face: best.1,
            point: if best.0 <= 1e-9 { *point } else { best.2 },
            score: None,
            method: "fixed".into(),
        }
    }

    /// The assistance position the scenario asks for.
    pub fn select(&self) -> Result<(AssistChoice, Option<ApsResult>)> {
        match &self.scenario.assist {
            AssistSpec::Aps => {
                let res = self.aps_map()?;
                let choice = AssistChoice {
                    face: res.best.face,
                    point: res.best.centroid,
                    score: res.best.score,
                    method: "aps".into(),
                };
                Ok((choice, Some(res)))
            }
            AssistSpec::Fixed { point } => Ok((self.fixed_choice(point), None)),
        }
    }

    /// Distance of a grasp point from the dissection segment.
    pub fn segment_distance(&self, p: &Vec3) -> f64 {
        let (a, b) = self.features.segment.endpoints(self.surface(), self.rest_state());
        point_segment_distance(p, &a, &b)
    }

    /// Runs the servo loop from `choice` with sensing noise drawn from `seed`.
    /// Module failures are recorded in the report.
    pub fn run(&self, choice: &AssistChoice, seed: u64) -> RunOutput {
        let start = Instant::now();
        let mut report = RunReport::new(&self.scenario.name, &self.scenario_digest, seed);
        report.assist = Some(choice.clone());
        let result = self.run_inner(choice, seed, &mut report);
        report.timings.servo_ms = start.elapsed().as_secs_f64() * 1e3;
        let trace = match result {
            Ok(trace) => trace,
            Err((e, trace)) => {
                report.failure = Some(Failure {
                    category: e.category().into(),
                    message: e.to_string(),
                });
                trace
            }
        };
        report.finish(&trace);
        info!(
            scenario = %report.scenario,
            seed,
            rho = ?report.rho,
            success = report.success,
            "request finished"
        );
        RunOutput {
            report,
            trace,
            aps: None,
        }
    }

    /// Couples both simulations at `choice` and opens a servo session.
    pub fn start_session(&self, choice: &AssistChoice, seed: u64) -> Result<AssistSession> {
        let mut truth = self.truth.clone();
        let mut model = self.model.clone();
        truth.couple_face(choice.face, choice.point)?;
        model.couple_face(choice.face, choice.point)?;
        Ok(AssistSession::new(
            truth,
            model,
            self.features.clone(),
            self.camera,
            self.scenario.servo,
            seed,
        )?)
    }

    /// Marked area and true errors at rest, recorded before a request.
    pub fn begin_report(&self, report: &mut RunReport) -> Result<()> {
        let x0 = self.rest_state();
        let a0 = marked_area(&self.camera, self.surface(), &self.marked, x0);
        report.area_initial = a0;
        if a0 == 0 {
            return Err(HarnessError::ZeroInitialArea);
        }
        let obs0 = self.features.observe(x0)?;
        report.initial_error = Some(ErrorSummary::of(&self.features, &obs0));
        Ok(())
    }

    /// `ρ` and true errors of the session's current state.
    pub fn end_report(&self, report: &mut RunReport, session: &AssistSession, trace: &ServoTrace) -> Result<()> {
        let xt = session.truth.state();
        let at = marked_area(&self.camera, self.surface(), &self.marked, xt);
        report.area_final = at;
        if report.area_initial > 0 {
            report.rho = Some(at as f64 / report.area_initial as f64);
        }
        report.final_hard_error = session.truth.hard_constraint_error();
        if let Some(StopReason::Aborted { category, message }) = &trace.stop {
            report.failure = Some(Failure {
                category: category.clone(),
                message: message.clone(),
            });
        }
        let obs = self.features.observe(xt)?;
        report.final_error = Some(ErrorSummary::of(&self.features, &obs));
        Ok(())
    }

    fn run_inner(
        &self,
        choice: &AssistChoice,
        seed: u64,
        report: &mut RunReport,
    ) -> std::result::Result<ServoTrace, (HarnessError, ServoTrace)> {
        let fail = |e: HarnessError| (e, ServoTrace::default());
        self.begin_report(report).map_err(fail)?;
        let mut session = self.start_session(choice, seed).map_err(fail)?;
        let trace = run_servo_loop(&mut session, self.scenario.servo.gains.max_iterations);
        match self.end_report(report, &session, &trace) {
            Ok(()) => Ok(trace),
            Err(e) => Err((e, trace)),
        }
    }

    /// The same workbench with a different dissection segment; features and
    /// the default marked region are rebuilt on the rest state.
    pub fn with_segment(&self, segment: SegmentSpec) -> Result<Self> {
        let mut scenario = self.scenario.clone();
        scenario.segment = segment;
        let x0 = self.rest_state();
        let seg = scenario.segment.resolve(self.surface(), x0)?;
        let features = init_observation(Arc::new(self.surface().clone()), x0, seg, scenario.features.clone())?;
        let marked = scenario.marked.resolve(&self.mesh, x0, &features)?;
        Ok(Self {
            scenario_digest: scenario.digest(),
            scenario,
            features,
            marked,
            ..self.clone()
        })
    }
}

/// One assistance request: load, select, servo, measure. The simulation is
/// freshly initialized for every request.
pub fn run_assist_request(scenario: &Scenario) -> RunOutput {
    let start = Instant::now();
    let bench = match Workbench::prepare(scenario) {
        Ok(b) => b,
        Err(e) => return RunOutput::failed(scenario, scenario.seed, &e),
    };
    let t = Instant::now();
    let (choice, aps) = match bench.select() {
        Ok(c) => c,
        Err(e) => return RunOutput::failed(scenario, scenario.seed, &e),
    };
    let aps_ms = t.elapsed().as_secs_f64() * 1e3;
    let mut out = bench.run(&choice, scenario.seed);
    out.aps = aps;
    out.report.timings.aps_ms = aps_ms;
    out.report.timings.total_ms = start.elapsed().as_secs_f64() * 1e3;
    out
}

/// Runs the scenario for each seed. Position selection happens once (it
/// works on the noise-free rest state); trials run in parallel and are
/// listed in seed order.
pub fn batch(scenario: &Scenario, seeds: &[u64]) -> Result<BatchSummary> {
    let bench = Workbench::prepare(scenario)?;
    let (choice, _) = bench.select()?;
    let outputs: Vec<RunOutput> = seeds.par_iter().map(|&s| bench.run(&choice, s)).collect();
    Ok(BatchSummary::from_outputs(outputs))
}

/// Paired trials, APS against a fixed grasp point, on matched seeds
/// `scenario.seed, scenario.seed + 1, …`.
pub fn compare_aps(scenario: &Scenario, fixed_point: &Vec3, n: usize) -> Result<ComparisonTable> {
    if n == 0 {
        return Ok(ComparisonTable::default());
    }
    let bench = Workbench::prepare(scenario)?;
    let aps = bench.aps_map()?;
    let aps_choice = AssistChoice {
        face: aps.best.face,
        point: aps.best.centroid,
        score: aps.best.score,
        method: "aps".into(),
    };
    let fixed_choice = bench.fixed_choice(fixed_point);
    let seeds: Vec<u64> = (0..n as u64).map(|i| scenario.seed.wrapping_add(i)).collect();
    let rows: Vec<(RunOutput, RunOutput)> = seeds
        .par_iter()
        .map(|&s| (bench.run(&aps_choice, s), bench.run(&fixed_choice, s)))
        .collect();
    Ok(ComparisonTable::from_pairs(rows))
}

/// Accuracy of the analytic Jacobians on one scenario.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianCheck {
    /// Relative Frobenius error of `J_O` against central differences, per state.
    pub observation_errors: Vec<f64>,
    /// Relative error of the first-order prediction `J_d δ` against a solve.
    pub deformation_error: f64,
}

impl JacobianCheck {
    pub fn max_observation_error(&self) -> f64 {
        self.observation_errors.iter().copied().fold(0.0, f64::max)
    }
}

/// Smooth random deformation of the free vertices, amplitude `amp`.
pub fn random_state(mesh: &TetMesh, rng: &mut ChaCha8Rng, amp: f64) -> ParticleState {
    let mut x = mesh.rest_state();
    let fixed: std::collections::HashSet<usize> = mesh.fixed.iter().copied().collect();
    let k: [Vec3; 3] = std::array::from_fn(|_| {
        Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)) * 150.0
    });
    let phase: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.0..std::f64::consts::TAU));
    let a: [f64; 3] = std::array::from_fn(|_| rng.random_range(-amp..amp));
    for (i, p) in x.positions.iter_mut().enumerate() {
        if fixed.contains(&i) {
            continue;
        }
        let r = *p;
        *p += Vec3::new(
            a[0] * (k[0].dot(&r) + phase[0]).sin(),
            a[1] * (k[1].dot(&r) + phase[1]).sin(),
            a[2] * (k[2].dot(&r) + phase[2]).sin(),
        );
    }
    x
}

/// `J_O` against central differences of `observe` over every coordinate.
pub fn observation_jacobian_error(features: &FeatureSet, state: &ParticleState, h: f64) -> Result<f64> {
    let analytic = features.observation_jacobian(state)?.to_dense();
    let mut fd = nalgebra::DMatrix::zeros(analytic.nrows(), analytic.ncols());
    let cols: Vec<(usize, nalgebra::DVector<f64>)> = (0..analytic.ncols())
        .into_par_iter()
        .map(|c| {
            let (v, axis) = (c / 3, c % 3);
            let mut plus = state.clone();
            let mut minus = state.clone();
            plus.positions[v][axis] += h;
            minus.positions[v][axis] -= h;
            let op = features.observe(&plus).map(|o| o.to_vector());
            let om = features.observe(&minus).map(|o| o.to_vector());
            match (op, om) {
                (Ok(a), Ok(b)) => Ok((c, (a - b) / (2.0 * h))),
                (Err(e), _) | (_, Err(e)) => Err(e),
            }
        })
        .collect::<std::result::Result<_, _>>()?;
    for (c, col) in cols {
        fd.set_column(c, &col);
    }
    Ok((&analytic - &fd).norm() / fd.norm().max(f64::MIN_POSITIVE))
}

/// Checks `J_O` on `states` random deformations, and `J_d` by a first-order
/// prediction for a grasp on the nearest upward face at least `l_min` from
/// the segment.
pub fn verify_jacobians(bench: &Workbench, states: usize, seed: u64) -> Result<JacobianCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut errors = Vec::with_capacity(states);
    for _ in 0..states {
        let x = random_state(&bench.mesh, &mut rng, 3e-4);
        errors.push(observation_jacobian_error(&bench.features, &x, 1e-6)?);
    }
    let s = bench.surface();
    let x0 = bench.rest_state();
    let face = (0..s.face_count())
        .filter(|&f| s.area_normal(f, &x0.positions).z > 0.0)
        .filter(|&f| bench.segment_distance(&s.centroid(f, &x0.positions)) >= bench.scenario.aps.l_min)
        .min_by(|&a, &b| {
            let da = bench.segment_distance(&s.centroid(a, &x0.positions));
            let db = bench.segment_distance(&s.centroid(b, &x0.positions));
            da.total_cmp(&db).then(a.cmp(&b))
        })
        .ok_or(HarnessError::Scenario("no upward surface face for the grasp check".into()))?;
    let mut sim = bench.model.clone();
    let p0 = s.centroid(face, &x0.positions);
    sim.couple_face(face, p0)?;
    let jd = sim.deformation_jacobian(p0)?;
    let delta = Vec3::new(1.0, -2.0, 1.5).normalize() * 1e-5;
    let predicted = jd.apply(&delta);
    let mut moved = sim.clone();
    moved.solve(Some(p0 + delta), None)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (i, d) in predicted.iter().enumerate() {
        let actual = moved.state().positions[i] - x0.positions[i];
        num += (actual - d).norm_squared();
        den += actual.norm_squared();
    }
    Ok(JacobianCheck {
        observation_errors: errors,
        deformation_error: (num / den.max(f64::MIN_POSITIVE)).sqrt(),
    })
}
