use std::sync::Arc;

use dissect_core::geometry::{gen_wedge_phantom, ParticleState, PhantomResolution, PhantomSize, WedgePhantom};
use dissect_core::harness::{persist_run, run_assist_request, AssistSpec, Scenario};
use dissect_core::perception::{
    chamfer, estimate_state, render_visibility, synth_point_cloud, synth_segmentation, CameraModel,
};
use dissect_core::xpbd::{ConstraintSet, MaterialParams, SimConfig, SimState};
use dissect_core::Vec3;

const COARSE: PhantomResolution = PhantomResolution {
    along: 6,
    across: 8,
    depth: 2,
};

fn coarse_scenario() -> Scenario {
    let mut s = Scenario::phantom(
        "coarse",
        WedgePhantom {
            opening_angle_deg: 45.0,
            size: PhantomSize::default(),
            resolution: COARSE,
        },
    );
    s.servo.gains.max_iterations = 4;
    s.camera.width = 160;
    s.camera.height = 120;
    s
}

#[test]
fn persisted_scenario_replays_to_the_same_report() {
    let mut s = coarse_scenario();
    s.assist = AssistSpec::Fixed {
        point: s.default_fixed_point(),
    };
    let first = run_assist_request(&s);
    assert!(first.report.failure.is_none(), "{:?}", first.report.failure);
    assert!(first.report.steps <= 4);
    assert!(first.report.final_hard_error < 1e-12);
    assert_eq!(first.trace.steps.len(), first.report.steps);

    let root = tempfile::tempdir().unwrap();
    let dir = persist_run(root.path(), &s, &first).unwrap();
    let reloaded = Scenario::load(dir.join("scenario.json")).unwrap();
    assert_eq!(reloaded.digest(), s.digest());
    let again = run_assist_request(&reloaded);
    assert_eq!(again.report.digest, first.report.digest);
    assert_eq!(again.report.trace_digest, first.report.trace_digest);

    let text = std::fs::read_to_string(dir.join("report.json")).unwrap();
    let v: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(v["digest"], first.report.digest.as_str());
}

#[test]
fn aps_request_reports_its_choice() {
    let s = coarse_scenario();
    let out = run_assist_request(&s);
    let choice = out.report.assist.as_ref().expect("choice");
    assert_eq!(choice.method, "aps");
    let aps = out.aps.as_ref().expect("aps map");
    let best = aps
        .map
        .iter()
        .filter_map(|c| c.score.map(|s| (c.face, s)))
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap();
    assert_eq!(aps.best.face, best.0);
    assert_eq!(choice.face, best.0);
}

#[test]
fn registration_keeps_hard_constraints_and_lowers_chamfer() {
    let mesh = Arc::new(gen_wedge_phantom(45.0, PhantomSize::default(), COARSE).unwrap());
    let make = |m: &MaterialParams| {
        SimState::new(mesh.clone(), ConstraintSet::from_mesh(&mesh, m), SimConfig::default()).unwrap()
    };
    let soft = MaterialParams {
        shape_compliance: 2e-2,
        ..MaterialParams::default()
    };
    let mut truth = make(&soft);
    let mut est = make(&MaterialParams::default());
    let s = &mesh.surface;
    let face = (0..s.face_count())
        .filter(|&f| s.area_normal(f, &mesh.vertices).z > 0.0)
        .min_by(|&a, &b| {
            let d = |f| (s.centroid(f, &mesh.vertices) - Vec3::new(0.0, 0.015, 0.02)).norm();
            d(a).total_cmp(&d(b))
        })
        .unwrap();
    let p0 = s.centroid(face, &mesh.vertices);
    let p = p0 + Vec3::new(0.0, 3e-3, 2e-3);
    for sim in [&mut truth, &mut est] {
        sim.couple_face(face, p0).unwrap();
        sim.solve(Some(p), None).unwrap();
    }
    let cam = CameraModel::look_at(&coarse_scenario().camera).unwrap();
    let seg = synth_segmentation(&cam, s, truth.state());
    let vis = render_visibility(&cam, s, truth.state(), &seg);
    let cloud = synth_point_cloud(s, truth.state(), &vis.faces, 1500, 0.0, 3).unwrap();
    let model_cloud = |x: &ParticleState| synth_point_cloud(s, x, &vis.faces, 1500, 0.0, 3).unwrap().points;
    let before = chamfer(&model_cloud(est.state()), &cloud.points).unwrap();
    let after_state = estimate_state(&mut est, &cloud, &vis).unwrap();
    let after = chamfer(&model_cloud(&after_state), &cloud.points).unwrap();
    assert!(after < before, "chamfer {before} -> {after}");
    assert_eq!(est.hard_constraint_error(), 0.0);
    for &v in &s.faces[face] {
        assert_eq!(after_state.positions[v], truth.state().positions[v]);
    }
}
