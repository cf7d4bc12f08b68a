use std::collections::VecDeque;
use std::sync::Arc;

use super::*;
use crate::geometry::{gen_wedge_phantom, PhantomResolution, PhantomSize, TetMesh};

fn small_phantom() -> TetMesh {
    gen_wedge_phantom(
        45.0,
        PhantomSize::default(),
        PhantomResolution {
            along: 6,
            across: 6,
            depth: 3,
        },
    )
    .unwrap()
}

fn nearest_face(mesh: &TetMesh, p: Vec3) -> usize {
    (0..mesh.surface.face_count())
        .min_by(|&a, &b| {
            let da = (mesh.surface.centroid(a, &mesh.vertices) - p).norm();
            let db = (mesh.surface.centroid(b, &mesh.vertices) - p).norm();
            da.total_cmp(&db)
        })
        .unwrap()
}

fn sim_for(mesh: TetMesh) -> (SimState, usize, Vec3) {
    let mesh = Arc::new(mesh);
    let set = ConstraintSet::from_mesh(&mesh, &MaterialParams::default());
    let mut sim = SimState::new(mesh.clone(), set, SimConfig::default()).unwrap();
    let face = nearest_face(&mesh, Vec3::new(0.0, -0.012, 0.02));
    let p0 = mesh.surface.centroid(face, &mesh.vertices);
    sim.couple_face(face, p0).unwrap();
    (sim, face, p0)
}

fn free_floating() -> TetMesh {
    let mut mesh = small_phantom();
    mesh.fixed.clear();
    mesh
}

#[test]
fn rest_is_equilibrium() {
    let (mut sim, _, p0) = sim_for(small_phantom());
    assert_eq!(sim.constraint_residual(), 0.0);
    let before = sim.state().clone();
    sim.solve(Some(p0), None).unwrap();
    assert_eq!(sim.state().positions, before.positions);
}

#[test]
fn double_coupling_rejected() {
    let (mut sim, face, p0) = sim_for(small_phantom());
    assert_eq!(sim.couple_face(face, p0), Err(SimError::AlreadyCoupled(face)));
}

#[test]
fn solve_without_coupling_rejected() {
    let mesh = Arc::new(small_phantom());
    let set = ConstraintSet::from_mesh(&mesh, &MaterialParams::default());
    let mut sim = SimState::new(mesh, set, SimConfig::default()).unwrap();
    assert_eq!(sim.solve(Some(Vec3::zeros()), None).err(), Some(SimError::NotCoupled));
}

#[test]
fn free_mesh_translates_rigidly() {
    let (mut sim, _, p0) = sim_for(free_floating());
    let delta = Vec3::new(1e-3, -2e-3, 5e-4);
    sim.solve(Some(p0 + delta), None).unwrap();
    let rest = &sim.mesh().vertices;
    for (x, x0) in sim.state().positions.iter().zip(rest) {
        assert!((x - x0 - delta).norm() < 1e-9);
    }
}

#[test]
fn hard_constraints_exact_with_fixed_base() {
    let (mut sim, _, p0) = sim_for(small_phantom());
    let delta = Vec3::new(0.0, -2e-3, 1e-3);
    sim.solve(Some(p0 + delta), None).unwrap();
    let coupling = sim.coupling().unwrap().clone();
    for (k, &v) in coupling.vertices.iter().enumerate() {
        assert!((sim.state().positions[v] - coupling.base[k] - delta).norm() <= 1e-12);
    }
    for &v in &sim.mesh().fixed {
        assert_eq!(sim.state().positions[v], sim.mesh().vertices[v]);
    }
    assert!(sim.hard_constraint_error() <= 1e-9);
    assert!(sim.constraint_residual() <= 1e-4, "{}", sim.constraint_residual());
    assert!(sim.last_report().converged);
}

#[test]
fn energy_trace_non_increasing() {
    let (mut sim, _, p0) = sim_for(small_phantom());
    sim.solve(Some(p0 + Vec3::new(0.0, -4e-3, 2e-3)), None).unwrap();
    let e = &sim.last_report().energies;
    assert!(e.len() >= 2);
    for w in e.windows(2) {
        assert!(w[1] <= w[0] * (1.0 + 1e-12), "{} -> {}", w[0], w[1]);
    }
}

#[test]
fn displacement_decays_with_graph_distance() {
    let (mut sim, face, p0) = sim_for(small_phantom());
    sim.solve(Some(p0 + Vec3::new(0.0, -1e-4, 0.0)), None).unwrap();
    let mesh = sim.mesh().clone();
    let disp: Vec<f64> = sim
        .state()
        .positions
        .iter()
        .zip(&mesh.vertices)
        .map(|(a, b)| (a - b).norm())
        .collect();
    let coupled = mesh.surface.faces[face];
    let max = disp.iter().cloned().fold(0.0, f64::max);
    assert!((disp[coupled[0]] - max).abs() < 1e-15);

    let mut adj = vec![Vec::new(); mesh.vertex_count()];
    for [a, b] in mesh.edges() {
        adj[a].push(b);
        adj[b].push(a);
    }
    let mut shell = vec![usize::MAX; mesh.vertex_count()];
    let mut queue = VecDeque::new();
    for &v in &coupled {
        shell[v] = 0;
        queue.push_back(v);
    }
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if shell[w] == usize::MAX {
                shell[w] = shell[v] + 1;
                queue.push_back(w);
            }
        }
    }
    let depth = *shell.iter().max().unwrap();
    let means: Vec<f64> = (0..=depth)
        .map(|s| {
            let vals: Vec<f64> = (0..disp.len()).filter(|&v| shell[v] == s).map(|v| disp[v]).collect();
            vals.iter().sum::<f64>() / vals.len() as f64
        })
        .collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] + 1e-12, "shell means {means:?}");
    }
}

#[test]
fn solves_are_deterministic() {
    let (mut a, _, p0) = sim_for(small_phantom());
    let mut b = a.clone();
    let target = p0 + Vec3::new(3e-4, -1e-3, 1e-3);
    a.solve(Some(target), None).unwrap();
    b.solve(Some(target), None).unwrap();
    assert_eq!(a.state().positions, b.state().positions);
}

#[test]
fn perturbed_state_has_positive_residual() {
    let (mut sim, _, _) = sim_for(small_phantom());
    let mut s = sim.state().clone();
    s.positions[40] += Vec3::new(1e-4, 0.0, 0.0);
    sim.set_state(s);
    assert!(sim.constraint_residual() > 0.0);
    assert!(sim.max_constraint_violation() > 0.0);
}

#[test]
fn free_floating_jacobian_is_identity() {
    let (sim, _, p0) = sim_for(free_floating());
    let jd = sim.deformation_jacobian(p0).unwrap();
    for i in 0..jd.particle_count() {
        let err = (jd.block(i) - nalgebra::Matrix3::identity()).abs().max();
        assert!(err < 1e-6, "particle {i}: {err}");
    }
}

#[test]
fn fixed_rows_are_zero_and_coupled_rows_identity() {
    let (sim, face, p0) = sim_for(small_phantom());
    let jd = sim.deformation_jacobian(p0).unwrap();
    for &v in &sim.mesh().fixed {
        assert_eq!(jd.block(v), nalgebra::Matrix3::zeros());
    }
    for &v in &sim.mesh().surface.faces[face] {
        assert!((jd.block(v) - nalgebra::Matrix3::identity()).abs().max() < 1e-9);
    }
}

#[test]
fn jacobian_robust_to_step_size() {
    let (mut sim, _, p0) = sim_for(small_phantom());
    let p = p0 + Vec3::new(0.0, -2e-3, 1e-3);
    sim.solve(Some(p), None).unwrap();
    let a = sim.deformation_jacobian_with_step(p, 1e-4).unwrap();
    let b = sim.deformation_jacobian_with_step(p, 5e-5).unwrap();
    let rel = (&a.matrix - &b.matrix).norm() / a.matrix.norm();
    assert!(rel < 1e-2, "relative difference {rel}");
}

#[test]
fn jacobian_first_order_consistency() {
    let (mut sim, _, p0) = sim_for(small_phantom());
    let p = p0 + Vec3::new(0.0, -3e-3, 1e-3);
    sim.solve(Some(p), None).unwrap();
    let jd = sim.deformation_jacobian(p).unwrap();
    let base = sim.state().positions.clone();
    let u = Vec3::new(0.3, -0.8, 0.5).normalize();
    let ratio = |delta: f64| {
        let mut s = sim.clone();
        s.solve(Some(p + delta * u), None).unwrap();
        let pred = jd.apply(&(delta * u));
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..base.len() {
            num += (s.state().positions[i] - base[i] - pred[i]).norm_squared();
            den += pred[i].norm_squared();
        }
        (num / den).sqrt()
    };
    let r1 = ratio(2e-3);
    let r2 = ratio(1e-3);
    assert!(r1 < 0.2, "r1 = {r1}");
    assert!(r2 < 0.75 * r1, "not first order: {r1} then {r2}");
}
