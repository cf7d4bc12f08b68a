//! Operator session state machine, independent of the transport.
//!
//! Requests follow `set_segment → run_aps → step_control* → mark_dissected`.
//! Out-of-order messages are answered with an error and change nothing.

use std::path::PathBuf;
use std::time::Instant;

use dissect_core::aps::ApsResult;
use dissect_core::harness::{
    append_summary_csv, marked_area, persist_run, AssistChoice, HarnessError, RunOutput, RunReport, Scenario,
    SegmentSpec, Workbench,
};
use dissect_core::servo::{AssistSession, ServoTrace, StepOutcome, StepRecord, StopReason};
use dissect_core::Vec3;
use tracing::{info, warn};

use crate::protocol::{
    ApsMap, ClientMessage, ErrorPayload, PairEcho, Phase, RequestClosed, SegmentBound, ServerMessage, Snapshot,
    StepSummary, TraceEvent, VertexDelta,
};

/// Default binding tolerance for surface picks (m).
pub const PICK_TOLERANCE: f64 = 1e-6;

/// Largest `n` accepted by one `step_control`.
pub const MAX_STEPS_PER_MESSAGE: usize = 1000;

struct Request {
    session: AssistSession,
    report: RunReport,
    trace: ServoTrace,
    started: Instant,
}

pub struct BridgeSession {
    base: Workbench,
    bench: Workbench,
    phase: Phase,
    aps: Option<ApsResult>,
    choice: Option<AssistChoice>,
    request: Option<Request>,
    closed: usize,
    /// Positions as last sent to the client.
    sent: Vec<Vec3>,
    output_dir: Option<PathBuf>,
}

type Reply<'a> = &'a mut dyn FnMut(ServerMessage);

impl BridgeSession {
    pub fn new(scenario: &Scenario, output_dir: Option<PathBuf>) -> Result<Self, HarnessError> {
        let base = Workbench::prepare(scenario)?;
        Ok(Self {
            bench: base.clone(),
            base,
            phase: Phase::Idle,
            aps: None,
            choice: None,
            request: None,
            closed: 0,
            sent: Vec::new(),
            output_dir,
        })
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    /// Requests closed since the last reset.
    pub fn closed_requests(&self) -> usize {
        self.closed
    }

    /// Current true tissue positions.
    pub fn positions(&self) -> &[Vec3] {
        match &self.request {
            Some(r) => &r.session.truth.state().positions,
            None => &self.bench.rest_state().positions,
        }
    }

    pub fn handle(&mut self, msg: ClientMessage, out: Reply) {
        let kind = msg.kind();
        let result = match msg {
            ClientMessage::Snapshot => {
                let s = self.snapshot();
                out(ServerMessage::Snapshot(s));
                Ok(())
            }
            ClientMessage::SetSegment { start, end, tolerance } => self.set_segment(start, end, tolerance, out),
            ClientMessage::RunAps => self.run_aps(out),
            ClientMessage::StepControl { n } => self.step_control(n, out),
            ClientMessage::MarkDissected => self.mark_dissected(out),
            ClientMessage::Reset => {
                self.reinitialize();
                self.closed = 0;
                let s = self.snapshot();
                out(ServerMessage::Snapshot(s));
                Ok(())
            }
        };
        if let Err(reason) = result {
            warn!(message = kind, %reason, "rejected");
            out(ServerMessage::Error(ErrorPayload {
                reason,
                state: self.phase,
            }));
        }
    }

    /// Full state; later trace events carry deltas against it.
    pub fn snapshot(&mut self) -> Snapshot {
        let surface = self.bench.surface();
        let vertices = self.positions().to_vec();
        self.sent = vertices.clone();
        let segment = (self.phase != Phase::Idle).then(|| {
            let (a, b) = self.bench.features.segment.endpoints(surface, self.bench.rest_state());
            [a, b]
        });
        Snapshot {
            state: self.phase,
            request: self.closed,
            step: self.request.as_ref().map_or(0, |r| r.trace.steps.len()),
            vertices,
            faces: surface.faces.clone(),
            marked: marked_list(&self.bench.marked),
            camera: self.bench.scenario.camera,
            segment,
            assist: self.choice.clone(),
            p: self.request.as_ref().map(|r| r.session.ee_position()),
            scores: self.aps.as_ref().map(scores),
        }
    }

    fn set_segment(&mut self, start: Vec3, end: Vec3, tolerance: Option<f64>, out: Reply) -> Result<(), String> {
        if self.phase == Phase::Servoing {
            return Err("request in progress; send mark_dissected or reset first".into());
        }
        let tolerance = tolerance.unwrap_or(PICK_TOLERANCE);
        if !(tolerance >= 0.0) || !start.iter().chain(end.iter()).all(|x| x.is_finite()) {
            return Err("segment picks must be finite with a non-negative tolerance".into());
        }
        let bench = self
            .base
            .with_segment(SegmentSpec::Points { start, end, tolerance })
            .map_err(|e| e.to_string())?;
        let x0 = bench.rest_state();
        let s = bench.surface();
        let (a, b) = bench.features.segment.endpoints(s, x0);
        let pairs = bench
            .features
            .pairs
            .iter()
            .map(|p| PairEcho {
                radius: p.ring.radius,
                k: p.ring.k,
                center: bench.features.segment.point(s, x0, p.ring.k),
                left: dissect_core::geometry::eval_anchor(s, &p.v_anchor, x0),
                right: dissect_core::geometry::eval_anchor(s, &p.w_anchor, x0),
            })
            .collect();
        let marked = marked_list(&bench.marked);
        info!(pairs = bench.features.pair_count(), "segment bound");
        self.bench = bench;
        self.phase = Phase::SegmentSet;
        self.aps = None;
        self.choice = None;
        out(ServerMessage::SetSegment(SegmentBound {
            endpoints: [a, b],
            pairs,
            marked,
        }));
        Ok(())
    }

    fn run_aps(&mut self, out: Reply) -> Result<(), String> {
        let cached = match self.phase {
            Phase::Idle => return Err("no segment; send set_segment first".into()),
            Phase::Servoing => return Err("request in progress; send mark_dissected or reset first".into()),
            Phase::Selected => true,
            Phase::SegmentSet => {
                let res = self.bench.aps_map().map_err(|e| e.to_string())?;
                self.choice = Some(AssistChoice {
                    face: res.best.face,
                    point: res.best.centroid,
                    score: res.best.score,
                    method: "aps".into(),
                });
                self.aps = Some(res);
                self.phase = Phase::Selected;
                false
            }
        };
        let aps = self.aps.as_ref().expect("selected sessions hold a map");
        out(ServerMessage::RunAps(ApsMap {
            cached,
            choice: self.choice.clone().expect("selected sessions hold a choice"),
            scores: scores(aps),
            map_max: aps.map_max(),
        }));
        Ok(())
    }

    fn open_request(&self) -> Result<Request, String> {
        let choice = self.choice.as_ref().expect("selected sessions hold a choice");
        let seed = self.bench.scenario.seed.wrapping_add(self.closed as u64);
        let mut report = RunReport::new(&self.bench.scenario.name, &self.bench.scenario_digest, seed);
        report.assist = Some(choice.clone());
        self.bench.begin_report(&mut report).map_err(|e| e.to_string())?;
        let session = self.bench.start_session(choice, seed).map_err(|e| e.to_string())?;
        Ok(Request {
            session,
            report,
            trace: ServoTrace::default(),
            started: Instant::now(),
        })
    }

    fn step_control(&mut self, n: usize, out: Reply) -> Result<(), String> {
        if n == 0 || n > MAX_STEPS_PER_MESSAGE {
            return Err(format!("step count must be in 1..={MAX_STEPS_PER_MESSAGE}"));
        }
        match self.phase {
            Phase::Idle | Phase::SegmentSet => return Err("no assistance position; send run_aps first".into()),
            Phase::Selected => {
                self.request = Some(self.open_request()?);
                self.phase = Phase::Servoing;
            }
            Phase::Servoing => {
                let stop = &self.request.as_ref().expect("servoing holds a request").trace.stop;
                if let Some(stop) = stop {
                    return Err(format!("servo loop already stopped ({stop:?}); send mark_dissected"));
                }
            }
        }
        let cap = self.bench.scenario.servo.gains.max_iterations;
        let mut run = 0;
        for _ in 0..n {
            let req = self.request.as_mut().expect("servoing holds a request");
            if req.trace.steps.len() >= cap {
                req.trace.stop = Some(StopReason::IterationCap);
                break;
            }
            let (record, stop) = match req.session.step() {
                Ok(StepOutcome::Continue(r)) => (Some(r), None),
                Ok(StepOutcome::Stop(r, reason)) => (r, Some(reason)),
                Err(e) => (None, Some(StopReason::aborted(&e))),
            };
            if let Some(r) = record {
                let event = self.trace_event(&r);
                let req = self.request.as_mut().expect("servoing holds a request");
                req.trace.steps.push(r);
                run += 1;
                out(ServerMessage::TraceEvent(event));
            }
            let req = self.request.as_mut().expect("servoing holds a request");
            if stop.is_some() {
                req.trace.stop = stop;
                break;
            }
            if req.trace.steps.len() >= cap {
                req.trace.stop = Some(StopReason::IterationCap);
                break;
            }
        }
        let rho = self.current_rho();
        let req = self.request.as_ref().expect("servoing holds a request");
        out(ServerMessage::StepControl(StepSummary {
            steps_run: run,
            total_steps: req.trace.steps.len(),
            stop: req.trace.stop.clone(),
            rho,
        }));
        Ok(())
    }

    fn current_rho(&self) -> f64 {
        let req = self.request.as_ref().expect("servoing holds a request");
        let b = &self.bench;
        let at = marked_area(&b.camera, b.surface(), &b.marked, req.session.truth.state());
        at as f64 / req.report.area_initial as f64
    }

    fn trace_event(&mut self, r: &StepRecord) -> TraceEvent {
        let rho = self.current_rho();
        let x = &self.request.as_ref().expect("servoing holds a request").session.truth.state().positions;
        let mut moved = Vec::new();
        for (i, (p, q)) in x.iter().zip(self.sent.iter_mut()).enumerate() {
            if p != q {
                *q = *p;
                moved.push(VertexDelta { index: i, position: *p });
            }
        }
        TraceEvent {
            step: r.step,
            p: r.p,
            dp: r.dp,
            error_norm: r.error_norm,
            wedge_error_norm: r.wedge_error_norm,
            shear_error_norm: r.shear_error_norm,
            stretch_error_norm: r.stretch_error_norm,
            rho,
            moved,
        }
    }

    fn mark_dissected(&mut self, out: Reply) -> Result<(), String> {
        match self.phase {
            Phase::Idle | Phase::SegmentSet => return Err("no open request; send run_aps first".into()),
            Phase::Selected => {
                self.request = Some(self.open_request()?);
                self.phase = Phase::Servoing;
            }
            Phase::Servoing => {}
        }
        let mut req = self.request.take().expect("servoing holds a request");
        if let Err(e) = self.bench.end_report(&mut req.report, &req.session, &req.trace) {
            req.report.failure = Some(dissect_core::harness::Failure {
                category: e.category().into(),
                message: e.to_string(),
            });
        }
        req.report.timings.servo_ms = req.started.elapsed().as_secs_f64() * 1e3;
        req.report.timings.total_ms = req.report.timings.servo_ms;
        req.report.finish(&req.trace);
        let output = RunOutput {
            report: req.report,
            trace: req.trace,
            aps: self.aps.clone(),
        };
        let persisted = match &self.output_dir {
            Some(root) => {
                let dir = persist_run(root, &self.bench.scenario, &output)
                    .and_then(|d| append_summary_csv(root, [&output.report]).map(|_| d));
                match dir {
                    Ok(d) => Some(d.display().to_string()),
                    Err(e) => {
                        warn!(error = %e, "could not persist the request");
                        None
                    }
                }
            }
            None => None,
        };
        info!(request = self.closed, rho = ?output.report.rho, "request closed");
        self.closed += 1;
        out(ServerMessage::MarkDissected(RequestClosed {
            request: self.closed,
            report: output.report,
            persisted,
        }));
        self.reinitialize();
        let s = self.snapshot();
        out(ServerMessage::Snapshot(s));
        Ok(())
    }

    fn reinitialize(&mut self) {
        self.bench = self.base.clone();
        self.phase = Phase::Idle;
        self.aps = None;
        self.choice = None;
        self.request = None;
    }
}

fn marked_list(marked: &[bool]) -> Vec<usize> {
    marked.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

fn scores(aps: &ApsResult) -> Vec<Option<f64>> {
    aps.map.iter().map(|c| c.score).collect()
}

#[cfg(test)]
mod tests;
