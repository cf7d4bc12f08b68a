use dissect_core::geometry::PhantomResolution;
use dissect_core::harness::MeshSource;

use super::*;

pub(crate) fn small() -> Scenario {
    let mut s = Scenario::wedge("bridge", 45.0);
    if let MeshSource::Phantom(p) = &mut s.mesh {
        p.resolution = PhantomResolution {
            along: 6,
            across: 8,
            depth: 2,
        };
    }
    s.camera.width = 80;
    s.camera.height = 60;
    s.aps.stride = 6;
    s.servo.gains.kp = 0.05;
    s.servo.gains.max_iterations = 4;
    s.servo.sensing.cloud_samples = 300;
    s
}

fn crease(s: &Scenario) -> ClientMessage {
    match &s.segment {
        SegmentSpec::Points { start, end, .. } => ClientMessage::SetSegment {
            start: *start,
            end: *end,
            tolerance: None,
        },
        SegmentSpec::Anchors { .. } => unreachable!(),
    }
}

fn send(b: &mut BridgeSession, msg: ClientMessage) -> Vec<ServerMessage> {
    let mut out = Vec::new();
    b.handle(msg, &mut |m| out.push(m));
    out
}

fn assert_rejected(b: &mut BridgeSession, msg: ClientMessage) {
    let before = b.phase();
    let positions = b.positions().to_vec();
    let out = send(b, msg.clone());
    assert_eq!(out.len(), 1, "{msg:?}");
    match &out[0] {
        ServerMessage::Error(e) => assert_eq!(e.state, before),
        other => panic!("{msg:?} accepted: {other:?}"),
    }
    assert_eq!(b.phase(), before);
    assert_eq!(b.positions(), &positions[..]);
}

#[test]
fn out_of_order_messages_are_rejected_in_every_state() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    assert_eq!(b.phase(), Phase::Idle);
    for m in [ClientMessage::RunAps, ClientMessage::StepControl { n: 1 }, ClientMessage::MarkDissected] {
        assert_rejected(&mut b, m);
    }

    send(&mut b, crease(&s));
    assert_eq!(b.phase(), Phase::SegmentSet);
    for m in [ClientMessage::StepControl { n: 1 }, ClientMessage::MarkDissected] {
        assert_rejected(&mut b, m);
    }

    send(&mut b, ClientMessage::RunAps);
    assert_eq!(b.phase(), Phase::Selected);
    for n in [0, MAX_STEPS_PER_MESSAGE + 1] {
        assert_rejected(&mut b, ClientMessage::StepControl { n });
    }

    send(&mut b, ClientMessage::StepControl { n: 1 });
    assert_eq!(b.phase(), Phase::Servoing);
    assert_rejected(&mut b, crease(&s));
    assert_rejected(&mut b, ClientMessage::RunAps);

    let out = send(&mut b, ClientMessage::StepControl { n: 10 });
    let summary = out.iter().find_map(|m| match m {
        ServerMessage::StepControl(s) => Some(s.clone()),
        _ => None,
    });
    let summary = summary.unwrap();
    assert_eq!(summary.total_steps, 4);
    assert_eq!(summary.stop, Some(StopReason::IterationCap));
    assert_rejected(&mut b, ClientMessage::StepControl { n: 1 });
}

#[test]
fn bad_picks_leave_the_selection_intact() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    send(&mut b, crease(&s));
    let first = send(&mut b, ClientMessage::RunAps);
    let off = ClientMessage::SetSegment {
        start: Vec3::new(0.0, 0.0, 0.5),
        end: Vec3::new(0.01, 0.0, 0.5),
        tolerance: None,
    };
    assert_rejected(&mut b, off);
    let same = ClientMessage::SetSegment {
        start: Vec3::new(0.0, 0.0, 0.008),
        end: Vec3::new(0.0, 0.0, 0.008),
        tolerance: None,
    };
    assert_rejected(&mut b, same);
    let nan = ClientMessage::SetSegment {
        start: Vec3::new(f64::NAN, 0.0, 0.008),
        end: Vec3::zeros(),
        tolerance: None,
    };
    assert_rejected(&mut b, nan);
    let again = send(&mut b, ClientMessage::RunAps);
    match (&first[0], &again[0]) {
        (ServerMessage::RunAps(a), ServerMessage::RunAps(c)) => {
            assert!(!a.cached);
            assert!(c.cached);
            assert_eq!(a.scores, c.scores);
            assert_eq!(a.choice, c.choice);
            assert_eq!(a.choice.score, a.map_max);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn segment_binding_echoes_every_pair() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    let out = send(&mut b, crease(&s));
    let ServerMessage::SetSegment(bound) = &out[0] else {
        panic!("{out:?}")
    };
    assert_eq!(bound.pairs.len(), 15);
    for p in &bound.pairs {
        assert!(((p.left - p.center).norm() - p.radius).abs() < 1e-9);
        assert!(((p.right - p.center).norm() - p.radius).abs() < 1e-9);
    }
    assert!(!bound.marked.is_empty());
}

#[test]
fn snapshots_and_deltas_track_the_true_state_exactly() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    let snap = b.snapshot();
    assert_eq!(snap.vertices, b.positions());
    assert_eq!(snap.state, Phase::Idle);
    assert!(snap.segment.is_none());

    send(&mut b, crease(&s));
    send(&mut b, ClientMessage::RunAps);
    let mut mirror = b.snapshot().vertices;
    let out = send(&mut b, ClientMessage::StepControl { n: 3 });
    let mut steps = Vec::new();
    for m in &out {
        if let ServerMessage::TraceEvent(e) = m {
            steps.push(e.step);
            for d in &e.moved {
                mirror[d.index] = d.position;
            }
        }
    }
    assert_eq!(steps, vec![0, 1, 2]);
    assert!(matches!(out.last(), Some(ServerMessage::StepControl(_))));
    assert_eq!(mirror, b.positions());

    // The wire format keeps every bit.
    let snap = b.snapshot();
    let text = serde_json::to_string(&ServerMessage::Snapshot(snap.clone())).unwrap();
    let back: ServerMessage = serde_json::from_str(&text).unwrap();
    assert_eq!(back, ServerMessage::Snapshot(snap.clone()));
    assert_eq!(snap.vertices, b.positions());
    assert_eq!(snap.step, 3);
    assert!(snap.p.is_some());
}

#[test]
fn closing_a_request_persists_and_reinitializes() {
    let dir = tempfile::tempdir().unwrap();
    let s = small();
    let mut b = BridgeSession::new(&s, Some(dir.path().to_path_buf())).unwrap();
    let rest = b.positions().to_vec();
    send(&mut b, crease(&s));
    send(&mut b, ClientMessage::RunAps);
    send(&mut b, ClientMessage::StepControl { n: 2 });
    let out = send(&mut b, ClientMessage::MarkDissected);
    assert_eq!(out.len(), 2);
    let ServerMessage::MarkDissected(closed) = &out[0] else {
        panic!("{out:?}")
    };
    assert_eq!(closed.request, 1);
    assert_eq!(closed.report.steps, 2);
    assert!(closed.report.failure.is_none(), "{:?}", closed.report.failure);
    assert_eq!(closed.report.digest, closed.report.compute_digest());
    let run_dir = std::path::PathBuf::from(closed.persisted.as_ref().unwrap());
    assert!(run_dir.join("report.json").exists());
    assert!(dir.path().join("summary.csv").exists());

    let ServerMessage::Snapshot(snap) = &out[1] else {
        panic!("{out:?}")
    };
    assert_eq!(snap.state, Phase::Idle);
    assert_eq!(snap.request, 1);
    assert_eq!(snap.vertices, rest);
    assert_eq!(b.closed_requests(), 1);
}

#[test]
fn closing_before_any_step_reports_unit_ratio() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    send(&mut b, crease(&s));
    send(&mut b, ClientMessage::RunAps);
    let out = send(&mut b, ClientMessage::MarkDissected);
    let ServerMessage::MarkDissected(closed) = &out[0] else {
        panic!("{out:?}")
    };
    assert_eq!(closed.report.steps, 0);
    assert_eq!(closed.report.rho, Some(1.0));
    assert!(closed.persisted.is_none());
}

#[test]
fn reset_restores_the_scenario_from_any_state() {
    let s = small();
    let mut b = BridgeSession::new(&s, None).unwrap();
    let rest = b.positions().to_vec();
    send(&mut b, crease(&s));
    send(&mut b, ClientMessage::RunAps);
    send(&mut b, ClientMessage::StepControl { n: 1 });
    assert_ne!(b.positions(), &rest[..]);
    let out = send(&mut b, ClientMessage::Reset);
    let ServerMessage::Snapshot(snap) = &out[0] else {
        panic!("{out:?}")
    };
    assert_eq!(snap.state, Phase::Idle);
    assert_eq!(snap.vertices, rest);
    assert!(snap.assist.is_none() && snap.scores.is_none());
    assert_eq!(b.phase(), Phase::Idle);
    assert_eq!(send(&mut b, ClientMessage::Reset).len(), 1);
}
