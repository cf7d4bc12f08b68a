//! Quasi-static constraint solver.
//!
//! Each solve computes the equilibrium `argmin 0.5 C(x)^T K C(x)` with the
//! coupled face rigidly following the end effector and fixed vertices held at
//! rest. Distance constraints cover every tet edge and a shape matching
//! constraint covers every tet; `K` is the inverse compliance. Sweeps are
//! Gauss-Newton steps on that energy (PCG inner solve, Armijo backtracking),
//! warm-started from the previous converged state. Hard conditions are
//! imposed by elimination, so they hold exactly after every solve.

mod constraints;
mod data;
mod jacobian;
pub mod sparse;

pub use constraints::{
    best_rotation, shape_goals, ConstraintSet, DistanceConstraint, MaterialParams,
    ShapeMatchConstraint, MIN_COMPLIANCE,
};
pub use data::{Correspondence, DataTerm, RegistrationData};
pub use jacobian::DeformationJacobian;

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{ParticleState, TetMesh};
use crate::Vec3;
use sparse::{pcg, BlockCsr};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("invalid constraint set: {0}")]
    InvalidConstraint(String),
    #[error("face {0} is not a surface face")]
    UnknownFace(usize),
    #[error("face {0} is already coupled")]
    AlreadyCoupled(usize),
    #[error("no face is coupled to the end effector")]
    NotCoupled,
    #[error("solver diverged at sweep {sweep}: {reason}")]
    Divergence { sweep: usize, reason: String },
    #[error("registration data given without a visibility mask of matching length")]
    BadVisibility,
}

pub type Result<T> = std::result::Result<T, SimError>;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    /// Maximum outer sweeps per solve.
    pub iterations: usize,
    /// Convergence threshold on the largest per-particle update (m).
    pub tolerance: f64,
    /// Relative weight of the cloud data term.
    pub chamfer_weight: f64,
    /// Surface samples per visible face when evaluating the Chamfer objective.
    pub chamfer_samples_per_face: usize,
    /// Cloud points farther than this from the visible surface are ignored (m).
    pub registration_gate: f64,
    /// Finite-difference step for the deformation Jacobian (m).
    pub fd_step: f64,
    /// Largest per-particle move in a single sweep (m).
    pub max_sweep_displacement: f64,
    pub cg_tolerance: f64,
    pub cg_max_iterations: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            iterations: 60,
            tolerance: 1e-8,
            chamfer_weight: 5.0,
            chamfer_samples_per_face: 5,
            registration_gate: 3e-3,
            fd_step: 1e-4,
            max_sweep_displacement: 5e-3,
            cg_tolerance: 1e-10,
            cg_max_iterations: 2000,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || !(self.tolerance > 0.0) || !(self.fd_step > 0.0) {
            return Err(SimError::InvalidConstraint(
                "solver config needs iterations >= 1, tolerance > 0 and fd_step > 0".into(),
            ));
        }
        Ok(())
    }
}

/// Rigid coupling of a surface face to the end-effector translation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coupling {
    pub face: usize,
    pub vertices: [usize; 3],
    /// End-effector position at first contact.
    pub rest_anchor: Vec3,
    pub target: Vec3,
    /// Positions of the face vertices at first contact.
    pub base: [Vec3; 3],
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub sweeps: usize,
    /// Objective at the start of the solve and after every sweep.
    pub energies: Vec<f64>,
    pub converged: bool,
    pub last_update: f64,
    pub cg_iterations: usize,
}

/// Value-semantic simulation state; clone it to evaluate perturbations.
#[derive(Clone, Debug)]
pub struct SimState {
    mesh: Arc<TetMesh>,
    constraints: Arc<ConstraintSet>,
    config: SimConfig,
    pattern: Arc<BlockCsr>,
    fixed: Arc<Vec<bool>>,
    state: ParticleState,
    coupling: Option<Coupling>,
    last_data: Option<Arc<DataTerm>>,
    last_report: SolveReport,
}

impl SimState {
    /// Simulation at rest.
    pub fn new(mesh: Arc<TetMesh>, constraints: ConstraintSet, config: SimConfig) -> Result<Self> {
        config.validate()?;
        constraints.validate(mesh.vertex_count())?;
        let mut fixed = vec![false; mesh.vertex_count()];
        for &v in &constraints.fixed {
            fixed[v] = true;
        }
        let pattern = BlockCsr::from_tets(mesh.vertex_count(), &mesh.tets);
        Ok(Self {
            state: mesh.rest_state(),
            mesh,
            constraints: Arc::new(constraints),
            config,
            pattern: Arc::new(pattern),
            fixed: Arc::new(fixed),
            coupling: None,
            last_data: None,
            last_report: SolveReport::default(),
        })
    }

    pub fn mesh(&self) -> &Arc<TetMesh> {
        &self.mesh
    }

    pub fn constraints(&self) -> &ConstraintSet {
        &self.constraints
    }

    pub fn config(&self) -> &SimConfig {
        &self.config
    }

    pub fn config_mut(&mut self) -> &mut SimConfig {
        &mut self.config
    }

    pub fn state(&self) -> &ParticleState {
        &self.state
    }

    pub fn coupling(&self) -> Option<&Coupling> {
        self.coupling.as_ref()
    }

    pub fn last_report(&self) -> &SolveReport {
        &self.last_report
    }

    pub fn is_fixed(&self, v: usize) -> bool {
        self.fixed[v]
    }

    /// Replaces the particle state, e.g. to restore a snapshot.
    pub fn set_state(&mut self, state: ParticleState) {
        assert_eq!(state.len(), self.mesh.vertex_count());
        self.state = state;
        self.last_data = None;
    }

    /// Back to the rest configuration with no coupling.
    pub fn reset(&mut self) {
        self.state = self.mesh.rest_state();
        self.coupling = None;
        self.last_data = None;
        self.last_report = SolveReport::default();
    }

    /// Couples `face` to the end effector whose first contact is at `p0`.
    pub fn couple_face(&mut self, face: usize, p0: Vec3) -> Result<Coupling> {
        if let Some(c) = &self.coupling {
            return Err(SimError::AlreadyCoupled(c.face));
        }
        let vertices = *self
            .mesh
            .surface
            .faces
            .get(face)
            .ok_or(SimError::UnknownFace(face))?;
        let coupling = Coupling {
            face,
            vertices,
            rest_anchor: p0,
            target: p0,
            base: vertices.map(|v| self.state.positions[v]),
        };
        self.coupling = Some(coupling.clone());
        Ok(coupling)
    }

    pub fn decouple(&mut self) -> Option<Coupling> {
        self.coupling.take()
    }

    fn impose_hard(&self, x: &mut [Vec3], target: Option<Vec3>) {
        if let (Some(c), Some(p)) = (&self.coupling, target) {
            let shift = p - c.rest_anchor;
            for (k, &v) in c.vertices.iter().enumerate() {
                if !self.fixed[v] {
                    x[v] = c.base[k] + shift;
                }
            }
        }
        for &v in &self.constraints.fixed {
            x[v] = self.mesh.vertices[v];
        }
    }

    fn free_mask(&self) -> Vec<bool> {
        let mut free: Vec<bool> = self.fixed.iter().map(|f| !f).collect();
        if let Some(c) = &self.coupling {
            for &v in &c.vertices {
                free[v] = false;
            }
        }
        free
    }

    fn objective(&self, x: &[Vec3], data: Option<&DataTerm>) -> f64 {
        let e = self.constraints.energy(x);
        match data {
            Some(d) => e + d.energy(&self.mesh.surface, x),
            None => e,
        }
    }

    fn assemble(&self, x: &[Vec3], data: Option<&DataTerm>) -> (Vec<Vec3>, BlockCsr) {
        let mut hess = (*self.pattern).clone();
        hess.clear();
        let mut grad = vec![Vec3::zeros(); x.len()];
        self.constraints.assemble(x, &mut grad, &mut hess);
        if let Some(d) = data {
            d.assemble(&self.mesh.surface, x, &mut grad, &mut hess);
        }
        (grad, hess)
    }

    /// Quasi-static solve with the end effector at `target` (or the current
    /// coupling target when `None`), optionally registering to a cloud.
    pub fn solve(
        &mut self,
        target: Option<Vec3>,
        data: Option<RegistrationData>,
    ) -> Result<&ParticleState> {
        if target.is_some() && self.coupling.is_none() {
            return Err(SimError::NotCoupled);
        }
        if let Some(d) = &data {
            if d.visible.len() != self.mesh.surface.face_count() {
                return Err(SimError::BadVisibility);
            }
        }
        let target = target.or(self.coupling.as_ref().map(|c| c.target));
        if let (Some(c), Some(p)) = (self.coupling.as_mut(), target) {
            c.target = p;
        }
        let mut x = self.state.positions.clone();
        self.impose_hard(&mut x, target);
        let free = self.free_mask();
        let cfg = self.config;
        let stiffness = cfg.chamfer_weight * self.constraints.reference_stiffness();

        let mut report = SolveReport::default();
        let mut term: Option<DataTerm> = None;
        for sweep in 0..cfg.iterations {
            if let Some(d) = &data {
                term = Some(DataTerm::build(
                    &self.mesh.surface,
                    &x,
                    d,
                    stiffness,
                    cfg.registration_gate,
                ));
            }
            let e0 = self.objective(&x, term.as_ref());
            if sweep == 0 {
                report.energies.push(e0);
            }
            if !e0.is_finite() {
                return Err(SimError::Divergence {
                    sweep,
                    reason: "non-finite energy".into(),
                });
            }
            let (grad, hess) = self.assemble(&x, term.as_ref());
            let rhs: Vec<Vec3> = grad
                .iter()
                .zip(&free)
                .map(|(g, &f)| if f { -g } else { Vec3::zeros() })
                .collect();
            let mut dx = vec![Vec3::zeros(); x.len()];
            let cg = pcg(&hess, &rhs, &free, &mut dx, cfg.cg_tolerance, cfg.cg_max_iterations);
            report.cg_iterations += cg.iterations;

            let max_dx = dx.iter().map(|d| d.norm()).fold(0.0, f64::max);
            if !max_dx.is_finite() {
                return Err(SimError::Divergence {
                    sweep,
                    reason: "non-finite update".into(),
                });
            }
            if max_dx < NEGLIGIBLE_UPDATE {
                report.sweeps = sweep + 1;
                report.energies.push(e0);
                report.converged = true;
                report.last_update = 0.0;
                break;
            }
            if max_dx > cfg.max_sweep_displacement {
                let s = cfg.max_sweep_displacement / max_dx;
                dx.iter_mut().for_each(|d| *d *= s);
            }
            let slope: f64 = grad.iter().zip(&dx).map(|(g, d)| g.dot(d)).sum();

            let mut step = 1.0;
            let mut accepted = None;
            for _ in 0..40 {
                let trial: Vec<Vec3> = x.iter().zip(&dx).map(|(p, d)| p + step * d).collect();
                let e = self.objective(&trial, term.as_ref());
                if e <= e0 + 1e-4 * step * slope.min(0.0) {
                    accepted = Some((trial, e));
                    break;
                }
                step *= 0.5;
            }
            report.sweeps = sweep + 1;
            let Some((trial, e)) = accepted else {
                // No descent left at machine precision.
                report.energies.push(e0);
                report.converged = true;
                report.last_update = 0.0;
                break;
            };
            x = trial;
            report.energies.push(e);
            report.last_update = step * max_dx.min(cfg.max_sweep_displacement);
            if !x.iter().all(|p| p.iter().all(|c| c.is_finite())) {
                return Err(SimError::Divergence {
                    sweep,
                    reason: "non-finite positions".into(),
                });
            }
            if report.last_update < cfg.tolerance {
                report.converged = true;
                break;
            }
        }
        self.impose_hard(&mut x, target);
        self.state.positions = x;
        self.state.step += 1;
        self.last_data = term.map(Arc::new);
        self.last_report = report;
        Ok(&self.state)
    }

    /// Largest Newton-scaled force imbalance over free particles (m): the
    /// distance each particle would move to reach local equilibrium. Zero at
    /// any equilibrium of the last solve's objective, including rest.
    pub fn constraint_residual(&self) -> f64 {
        let x = &self.state.positions;
        let (grad, hess) = self.assemble(x, self.last_data.as_deref());
        let free = self.free_mask();
        (0..x.len())
            .filter(|&i| free[i])
            .map(|i| {
                let d = hess.diag_block(i);
                match d.try_inverse() {
                    Some(inv) => (inv * grad[i]).norm(),
                    None => grad[i].norm(),
                }
            })
            .fold(0.0, f64::max)
    }

    /// Raw constraint violation `max |C_j(x)|` (nonzero whenever the tissue is strained).
    pub fn max_constraint_violation(&self) -> f64 {
        self.constraints.max_violation(&self.state.positions)
    }

    /// Weighted constraint energy of the current state.
    pub fn energy(&self) -> f64 {
        self.constraints.energy(&self.state.positions)
    }

    /// Distance by which the hard conditions are violated (exactly 0 after a solve).
    pub fn hard_constraint_error(&self) -> f64 {
        let x = &self.state.positions;
        let mut err: f64 = 0.0;
        for &v in &self.constraints.fixed {
            err = err.max((x[v] - self.mesh.vertices[v]).norm());
        }
        if let Some(c) = &self.coupling {
            let shift = c.target - c.rest_anchor;
            for (k, &v) in c.vertices.iter().enumerate() {
                if !self.fixed[v] {
                    err = err.max((x[v] - c.base[k] - shift).norm());
                }
            }
        }
        err
    }
}

/// Updates below this (m) are round-off and are not applied.
const NEGLIGIBLE_UPDATE: f64 = 1e-14;

/// Initializes a simulation at rest.
pub fn init_sim(mesh: Arc<TetMesh>, constraints: ConstraintSet, config: SimConfig) -> Result<SimState> {
    SimState::new(mesh, constraints, config)
}

/// One forward step `x_t = f(x_{t-1}, p_t)` with an optional registration term.
pub fn solve_quasistatic(
    sim: &mut SimState,
    target: Option<Vec3>,
    data: Option<RegistrationData>,
) -> Result<ParticleState> {
    sim.solve(target, data).cloned()
}

#[cfg(test)]
mod tests;
