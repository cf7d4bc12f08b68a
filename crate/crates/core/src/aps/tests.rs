use std::sync::Arc;

use nalgebra::Matrix2x3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::exposure::{init_observation, DissectionSegment, FeatureParams};
use crate::geometry::{bind_material_point, gen_wedge_phantom, PhantomResolution, PhantomSize, TetMesh, WedgePhantom};
use crate::xpbd::{ConstraintSet, MaterialParams, SimConfig};

const SMALL: PhantomResolution = PhantomResolution {
    along: 6,
    across: 8,
    depth: 2,
};

fn setup(angle: f64) -> (SimState, FeatureSet) {
    setup_sized(angle, PhantomSize::default())
}

fn setup_sized(angle: f64, size: PhantomSize) -> (SimState, FeatureSet) {
    let mesh: TetMesh = gen_wedge_phantom(angle, size, SMALL).unwrap();
    let z = WedgePhantom {
        opening_angle_deg: angle,
        size,
        resolution: SMALL,
    }
    .crease_height();
    let state = mesh.rest_state();
    let bind = |x: f64| bind_material_point(&mesh.surface, &Vec3::new(x, 0.0, z), &state, 1e-9).unwrap();
    let seg = DissectionSegment::new(bind(-0.01), bind(0.01));
    let features = init_observation(Arc::new(mesh.surface.clone()), &state, seg, FeatureParams::default()).unwrap();
    let mesh = Arc::new(mesh);
    let set = ConstraintSet::from_mesh(&mesh, &MaterialParams::default());
    let sim = SimState::new(mesh, set, SimConfig::default()).unwrap();
    (sim, features)
}

/// Upward-facing faces stand in for a camera overhead.
fn overhead_visibility(sim: &SimState) -> Vec<bool> {
    let s = &sim.mesh().surface;
    (0..s.face_count())
        .map(|f| s.area_normal(f, &sim.state().positions).z > 0.0)
        .collect()
}

/// SVD through the eigen-decomposition of `J J^T`, written out by hand.
fn oracle_score(j: &Matrix2x3<f64>, alpha: f64) -> f64 {
    let a = j.row(0).dot(&j.row(0));
    let b = j.row(0).dot(&j.row(1));
    let c = j.row(1).dot(&j.row(1));
    let mean = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    let (l1, l2) = (mean + rad, (mean - rad).max(0.0));
    let u1 = if b != 0.0 {
        let v = (l1 - c, b);
        let n = (v.0 * v.0 + v.1 * v.1).sqrt();
        (v.0 / n, v.1 / n)
    } else if a >= c {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let u2 = (-u1.1, u1.0);
    let (s1, s2) = (l1.sqrt(), l2.sqrt());
    let (uw, sw, us, ss) = if u2.0.abs() > u1.0.abs() {
        (u2, s2, u1, s1)
    } else {
        (u1, s1, u2, s2)
    };
    uw.0.abs() * sw - alpha * us.1.abs() * ss
}

#[test]
fn diagonal_example() {
    let j = Matrix2x3::new(2.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let (m, d) = heuristic_score(&j, 0.1);
    assert!((m - 1.9).abs() < 1e-15);
    assert_eq!(d.sigma, [2.0, 1.0]);
    assert_eq!(d.wedge_index, 0);
}

#[test]
fn pure_shear_is_penalized() {
    let j = Matrix2x3::new(0.0, 0.0, 0.0, 0.0, 1.0, 0.0);
    let (m, _) = heuristic_score(&j, 0.1);
    assert!((m + 0.1).abs() < 1e-15, "{m}");
}

#[test]
fn zero_matrix_scores_zero() {
    assert_eq!(heuristic_score(&Matrix2x3::zeros(), 0.1).0, 0.0);
}

#[test]
fn heuristic_matches_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let j = Matrix2x3::from_fn(|_, _| rng.random_range(-1.0..1.0));
        let (m, d) = heuristic_score(&j, 0.1);
        assert!((m - oracle_score(&j, 0.1)).abs() < 1e-10);
        assert!((d.u.transpose() * d.u - Matrix2::identity()).abs().max() < 1e-10);
        assert!(d.sigma[0] >= d.sigma[1] && d.sigma[1] >= 0.0);
    }
}

#[test]
fn exact_alignment_tie_assigns_first_vector_to_wedge() {
    // Left vectors at 45 degrees to both axes.
    let j = Matrix2x3::new(2.0, 1.0, 0.0, 2.0, -1.0, 0.0) * std::f64::consts::FRAC_1_SQRT_2;
    let (_, d) = heuristic_score(&j, 0.1);
    assert_ne!(d.wedge_index, d.shear_index);
}

proptest! {
    #[test]
    fn score_scales_with_the_matrix(
        e in prop::array::uniform6(-1.0f64..1.0),
        c in 0.1f64..10.0,
    ) {
        let j = Matrix2x3::from_row_slice(&e);
        let (m, _) = heuristic_score(&j, 0.1);
        let (mc, _) = heuristic_score(&(j * c), 0.1);
        prop_assert!((mc - c * m).abs() <= 1e-9 * (1.0 + m.abs() * c));
    }
}

#[test]
fn point_segment_distance_cases() {
    let (a, b) = (Vec3::zeros(), Vec3::x());
    assert_eq!(point_segment_distance(&Vec3::new(0.5, 2.0, 0.0), &a, &b), 2.0);
    assert_eq!(point_segment_distance(&Vec3::new(-3.0, 4.0, 0.0), &a, &b), 5.0);
}

#[test]
fn candidates_respect_distance_and_visibility() {
    let (sim, features) = setup(45.0);
    let s = &sim.mesh().surface;
    let all = vec![true; s.face_count()];
    let c = candidate_set(s, sim.state(), &all, &features, 0.0).unwrap();
    assert!(c.iter().all(|c| c.feasibility == Feasibility::Feasible));
    let c = candidate_set(s, sim.state(), &all, &features, 0.005).unwrap();
    let (q1, q2) = features.segment.endpoints(s, sim.state());
    for cand in &c {
        let d = point_segment_distance(&cand.centroid, &q1, &q2);
        assert_eq!(cand.feasibility == Feasibility::Feasible, d >= 0.005);
    }
    let none = vec![false; s.face_count()];
    assert_eq!(
        candidate_set(s, sim.state(), &none, &features, 0.0).err(),
        Some(ApsError::NoFeasibleCandidate)
    );
}

#[test]
fn fixed_face_has_zero_jacobian() {
    let (sim, features) = setup(45.0);
    let s = &sim.mesh().surface;
    let base = (0..s.face_count())
        .find(|&f| s.faces[f].iter().all(|&v| sim.is_fixed(v)))
        .unwrap();
    let j = avg_jacobian(&sim, base, &features).unwrap();
    assert_eq!(j, Matrix2x3::zeros());
}

#[test]
fn shear_row_vanishes_at_the_bisector_of_a_symmetric_groove() {
    let shallow = PhantomSize {
        groove_depth: 0.003,
        ..PhantomSize::default()
    };
    let (sim, features) = setup_sized(150.0, shallow);
    let s = &sim.mesh().surface;
    let x = &sim.state().positions;
    let face = (0..s.face_count())
        .filter(|&f| s.area_normal(f, x).z > 0.0 && s.centroid(f, x).y > 0.012)
        .min_by(|&a, &b| s.centroid(a, x).x.abs().total_cmp(&s.centroid(b, x).x.abs()))
        .unwrap();
    let j = avg_jacobian(&sim, face, &features).unwrap();
    let (wedge, shear) = (j.row(0).norm(), j.row(1).norm());
    assert!(wedge > 0.0);
    assert!(shear < 1e-3 * wedge, "shear {shear} wedge {wedge}");
}

#[test]
fn avg_jacobian_matches_end_to_end_differences() {
    let (sim, features) = setup(45.0);
    let s = &sim.mesh().surface;
    let x = &sim.state().positions;
    let face = (0..s.face_count())
        .filter(|&f| s.area_normal(f, x).z > 0.0)
        .min_by(|&a, &b| {
            let da = (s.centroid(a, x) - Vec3::new(0.003, 0.012, 0.02)).norm();
            let db = (s.centroid(b, x) - Vec3::new(0.003, 0.012, 0.02)).norm();
            da.total_cmp(&db)
        })
        .unwrap();
    let j = avg_jacobian(&sim, face, &features).unwrap();
    let p0 = s.centroid(face, x);
    let mut coupled = sim.clone();
    coupled.couple_face(face, p0).unwrap();
    let h = 1e-5;
    let mut fd = Matrix2x3::zeros();
    for axis in 0..3 {
        let mut means = [[0.0; 2]; 2];
        for (slot, sign) in [1.0, -1.0].into_iter().enumerate() {
            let mut local = coupled.clone();
            let mut p = p0;
            p[axis] += sign * h;
            local.solve(Some(p), None).unwrap();
            let obs = features.observe(local.state()).unwrap();
            means[slot] = [obs.mean_wedge(), obs.mean_shear()];
        }
        fd[(0, axis)] = (means[0][0] - means[1][0]) / (2.0 * h);
        fd[(1, axis)] = (means[0][1] - means[1][1]) / (2.0 * h);
    }
    let rel = (j - fd).norm() / j.norm();
    assert!(rel < 1e-3, "relative {rel}\n{j}\n{fd}");
}

#[test]
fn selection_is_the_map_maximum() {
    let (sim, features) = setup(45.0);
    let vis = overhead_visibility(&sim);
    let cfg = ApsConfig {
        stride: 3,
        ..ApsConfig::default()
    };
    let res = select_position(&sim, &vis, &features, &cfg).unwrap();
    assert_eq!(res.best.score, res.map_max());
    let first = res.map.iter().find(|c| c.score == res.map_max()).unwrap();
    assert_eq!(first.face, res.best.face);
    assert!(res.map.iter().any(|c| c.feasibility == Feasibility::Skipped));
    for c in &res.map {
        if c.is_scored() {
            assert!(vis[c.face]);
        }
    }
    let json = res.to_json();
    assert_eq!(json["faces"].as_array().unwrap().len(), sim.mesh().surface.face_count());
}

#[test]
fn single_candidate_is_selected() {
    let (sim, features) = setup(45.0);
    let s = &sim.mesh().surface;
    let x = &sim.state().positions;
    let (q1, q2) = features.segment.endpoints(s, sim.state());
    let only = (0..s.face_count())
        .find(|&f| s.area_normal(f, x).z > 0.0 && point_segment_distance(&s.centroid(f, x), &q1, &q2) > 0.01)
        .unwrap();
    let mut vis = vec![false; s.face_count()];
    vis[only] = true;
    let res = select_position(&sim, &vis, &features, &ApsConfig::default()).unwrap();
    assert_eq!(res.best.face, only);
}
