//! The engine thread. Every request funnels through one command queue that
//! is drained between ticks, so the engine never sees concurrent access.

use std::collections::BTreeSet;
use std::path::PathBuf;
use std::sync::mpsc::{self, RecvTimeoutError, TryRecvError};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::{json, Value};
use skylane::authority::{ControlOrder, TOPIC_ORDER};
use skylane::engine::{FrameKind, StreamFrame};
use skylane::scenario::load_scenario;
use skylane::traffic::FlightDemand;
use skylane::{ControlSetpoint, Engine, EngineOptions, Scenario, SimError};
use tokio::sync::{broadcast, oneshot};

use crate::bridge::{ExternalLink, Slot};
use crate::protocol::{ApiRequest, ApiResponse, ErrorCode, Role, OPEN_VERB, VERBS};

#[derive(Debug, Clone)]
pub struct GatewayConfig {
    pub token: String,
    /// How long a tick waits for an external role before the run aborts.
    pub ack_timeout: Duration,
    /// Ticks per wall-clock second while running; `None` runs flat out.
    pub tick_rate: Option<f64>,
    pub out_dir: Option<PathBuf>,
    /// Frames a stream client may fall behind before it is dropped.
    pub stream_buffer: usize,
    /// Roles served by attached connections unless a load says otherwise.
    pub external: Vec<Role>,
}

impl GatewayConfig {
    pub fn new(token: impl Into<String>) -> Self {
        Self {
            token: token.into(),
            ack_timeout: Duration::from_secs(5),
            tick_rate: None,
            out_dir: None,
            stream_buffer: 4096,
            external: Vec::new(),
        }
    }
}

/// One outbound stream frame, serialized once for every subscriber.
#[derive(Debug, Clone)]
pub struct Outbound {
    pub kind: FrameKind,
    pub uav: Option<String>,
    pub line: Arc<str>,
}

type Reply = oneshot::Sender<ApiResponse>;

struct Command {
    req: ApiRequest,
    reply: Reply,
}

/// Cheap handle to a running gateway.
#[derive(Clone)]
pub struct Gateway {
    inner: Arc<Inner>,
}

struct Inner {
    cmd: mpsc::Sender<Command>,
    frames: broadcast::Sender<Outbound>,
    config: GatewayConfig,
    authority: Arc<Slot>,
    traffic: Arc<Slot>,
}

impl Gateway {
    /// Starts the engine thread with nothing loaded.
    pub fn start(config: GatewayConfig) -> Self {
        let (cmd, rx) = mpsc::channel();
        let (frames, _) = broadcast::channel(config.stream_buffer.max(1));
        let authority = Arc::new(Slot::default());
        let traffic = Arc::new(Slot::default());
        let mut worker = Worker {
            config: config.clone(),
            frames: frames.clone(),
            authority: authority.clone(),
            traffic: traffic.clone(),
            session: None,
        };
        // the thread exits once every handle, and so the command sender, is gone
        std::thread::Builder::new().name("engine".into()).spawn(move || worker.run(rx)).expect("engine thread starts");
        Self { inner: Arc::new(Inner { cmd, frames, config, authority, traffic }) }
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.inner.config
    }

    pub fn subscribe(&self) -> broadcast::Receiver<Outbound> {
        self.inner.frames.subscribe()
    }

    pub(crate) fn slot(&self, role: Role) -> &Arc<Slot> {
        match role {
            Role::Authority => &self.inner.authority,
            Role::Traffic => &self.inner.traffic,
        }
    }

    pub fn token_ok(&self, token: Option<&str>) -> bool {
        token == Some(self.inner.config.token.as_str())
    }

    /// Checks verb and token, then hands the request to the engine thread.
    /// `conn_token` is a token presented when the connection was opened.
    pub async fn call(&self, req: ApiRequest, conn_token: Option<&str>) -> ApiResponse {
        if let Some(e) = self.precheck(&req, conn_token) {
            return e;
        }
        let id = req.id.clone();
        let (tx, rx) = oneshot::channel();
        if self.inner.cmd.send(Command { req, reply: tx }).is_err() {
            return ApiResponse::error(id, ErrorCode::Engine, "engine thread has stopped");
        }
        rx.await.unwrap_or_else(|_| ApiResponse::error(id, ErrorCode::Engine, "engine dropped the request"))
    }

    /// Blocking variant of [`Gateway::call`] for non-async callers.
    pub fn call_blocking(&self, req: ApiRequest) -> ApiResponse {
        if let Some(e) = self.precheck(&req, None) {
            return e;
        }
        let id = req.id.clone();
        let (tx, rx) = oneshot::channel();
        if self.inner.cmd.send(Command { req, reply: tx }).is_err() {
            return ApiResponse::error(id, ErrorCode::Engine, "engine thread has stopped");
        }
        rx.blocking_recv().unwrap_or_else(|_| ApiResponse::error(id, ErrorCode::Engine, "engine dropped the request"))
    }

    pub(crate) fn precheck(&self, req: &ApiRequest, conn_token: Option<&str>) -> Option<ApiResponse> {
        if !VERBS.contains(&req.verb.as_str()) {
            return Some(ApiResponse::error(req.id.clone(), ErrorCode::Protocol, format!("unknown verb `{}`", req.verb)));
        }
        if req.verb != OPEN_VERB && !self.token_ok(req.token.as_deref().or(conn_token)) {
            return Some(ApiResponse::error(req.id.clone(), ErrorCode::Auth, "missing or wrong token"));
        }
        None
    }

}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Loaded,
    Running,
    Paused,
    Finished,
}

impl Phase {
    fn as_str(self) -> &'static str {
        match self {
            Phase::Loaded => "loaded",
            Phase::Running => "running",
            Phase::Paused => "paused",
            Phase::Finished => "finished",
        }
    }
}

struct Session {
    engine: Engine,
    phase: Phase,
    until: Option<u64>,
    external: BTreeSet<Role>,
    end_reason: Option<String>,
}

struct Worker {
    config: GatewayConfig,
    frames: broadcast::Sender<Outbound>,
    authority: Arc<Slot>,
    traffic: Arc<Slot>,
    session: Option<Session>,
}

type Handled = std::result::Result<Value, (ErrorCode, String)>;

fn state_err(msg: impl Into<String>) -> (ErrorCode, String) {
    (ErrorCode::State, msg.into())
}

fn sim_err(e: SimError) -> (ErrorCode, String) {
    let code = match &e {
        SimError::Validation(_) | SimError::Numeric(_) => ErrorCode::Invalid,
        SimError::Lookup { .. } => ErrorCode::NotFound,
        SimError::Scheduling(_) => ErrorCode::State,
        _ => ErrorCode::Engine,
    };
    (code, e.to_string())
}

fn parse<T: for<'de> Deserialize<'de>>(body: &Value) -> std::result::Result<T, (ErrorCode, String)> {
    serde_json::from_value(body.clone()).map_err(|e| (ErrorCode::Invalid, e.to_string()))
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LoadBody {
    #[serde(default)]
    path: Option<PathBuf>,
    #[serde(default)]
    scenario: Option<Value>,
    #[serde(default)]
    seed: Option<u64>,
    #[serde(default)]
    external: Option<Vec<Role>>,
}

#[derive(Deserialize)]
struct StartBody {
    #[serde(default)]
    until: Option<u64>,
}

#[derive(Deserialize)]
struct PlanQueryBody {
    plan_id: String,
}

#[derive(Deserialize)]
struct CommandBody {
    uav: String,
    /// `null` hands the UAV back to its plan.
    #[serde(default)]
    setpoint: Option<ControlSetpoint>,
}

impl Worker {
    fn run(&mut self, rx: mpsc::Receiver<Command>) {
        let mut next = Instant::now();
        loop {
            if self.running() {
                loop {
                    match rx.try_recv() {
                        Ok(c) => self.handle(c),
                        Err(TryRecvError::Empty) => break,
                        Err(TryRecvError::Disconnected) => return,
                    }
                }
                if !self.running() {
                    continue;
                }
                self.tick();
                if let Some(rate) = self.config.tick_rate.filter(|r| *r > 0.0) {
                    next = next.max(Instant::now() - Duration::from_secs(1)) + Duration::from_secs_f64(1.0 / rate);
                    // serve requests while waiting for the next tick slot
                    loop {
                        let left = next.saturating_duration_since(Instant::now());
                        if left.is_zero() {
                            break;
                        }
                        match rx.recv_timeout(left) {
                            Ok(c) => self.handle(c),
                            Err(RecvTimeoutError::Timeout) => break,
                            Err(RecvTimeoutError::Disconnected) => return,
                        }
                    }
                }
            } else {
                match rx.recv() {
                    Ok(c) => self.handle(c),
                    Err(_) => return,
                }
                next = Instant::now();
            }
        }
    }

    fn running(&self) -> bool {
        self.session.as_ref().is_some_and(|s| s.phase == Phase::Running)
    }

    fn broadcast(&self, frames: Vec<StreamFrame>) {
        for f in frames {
            let uav = match f.kind {
                FrameKind::Telemetry => f.payload.get("uav").and_then(Value::as_str).map(str::to_owned),
                _ => None,
            };
            let line: Arc<str> = serde_json::to_string(&f).expect("frame serializes").into();
            // no subscribers is fine
            let _ = self.frames.send(Outbound { kind: f.kind, uav, line });
        }
    }

    fn tick(&mut self) {
        let s = self.session.as_mut().expect("running session");
        let reason = if s.engine.all_terminal() {
            Some("all_terminal".to_owned())
        } else if s.until.is_some_and(|u| s.engine.tick() >= u) {
            Some("until".to_owned())
        } else {
            match s.engine.step() {
                Ok(()) => None,
                Err(SimError::External(m)) => Some(m),
                Err(e) => Some(e.to_string()),
            }
        };
        let frames = s.engine.take_stream();
        self.broadcast(frames);
        if let Some(r) = reason {
            self.end_run(&r);
        }
    }

    fn end_run(&mut self, reason: &str) -> Option<Value> {
        let s = self.session.as_mut()?;
        let tick = s.engine.tick();
        let report = match s.engine.finish(reason) {
            Ok(r) => json!(r),
            Err(e) => json!({"error": e.to_string()}),
        };
        s.phase = Phase::Finished;
        s.end_reason = Some(reason.to_owned());
        let frames = s.engine.take_stream();
        self.broadcast(frames);
        self.broadcast(vec![StreamFrame {
            kind: FrameKind::Event,
            tick,
            payload: json!({"event": "run_finished", "end_reason": reason}),
        }]);
        Some(report)
    }

    fn handle(&mut self, c: Command) {
        let id = c.req.id.clone();
        let out = self.dispatch(&c.req);
        let resp = match out {
            Ok(body) => ApiResponse::ok(id, body),
            Err((code, msg)) => ApiResponse::error(id, code, msg),
        };
        // the caller may have gone away
        let _ = c.reply.send(resp);
    }

    fn session(&mut self) -> std::result::Result<&mut Session, (ErrorCode, String)> {
        self.session.as_mut().ok_or_else(|| state_err("no scenario loaded"))
    }

    /// The session while its run can still change.
    fn live(&mut self) -> std::result::Result<&mut Session, (ErrorCode, String)> {
        let s = self.session()?;
        if s.phase == Phase::Finished {
            return Err(state_err("run has finished"));
        }
        Ok(s)
    }

    fn dispatch(&mut self, req: &ApiRequest) -> Handled {
        let body = &req.body;
        match req.verb.as_str() {
            "sim.status" => Ok(self.status()),
            "scenario.load" => self.load(parse(body)?),
            "sim.start" => {
                let b: StartBody = if body.is_null() { StartBody { until: None } } else { parse(body)? };
                let (auth, traffic) = (self.authority.clone(), self.traffic.clone());
                let s = self.session()?;
                if s.phase != Phase::Loaded {
                    return Err(state_err(format!("cannot start while {}", s.phase.as_str())));
                }
                for r in &s.external {
                    let slot = if *r == Role::Authority { &auth } else { &traffic };
                    if !slot.is_attached() {
                        return Err(state_err(format!("{} subsystem not attached", r.as_str())));
                    }
                }
                s.until = b.until;
                s.phase = Phase::Running;
                Ok(json!({"state": "running", "tick": s.engine.tick()}))
            }
            "sim.pause" => {
                let s = self.session()?;
                if s.phase != Phase::Running {
                    return Err(state_err(format!("cannot pause while {}", s.phase.as_str())));
                }
                s.phase = Phase::Paused;
                Ok(json!({"state": "paused", "tick": s.engine.tick()}))
            }
            "sim.resume" => {
                let s = self.session()?;
                if s.phase != Phase::Paused {
                    return Err(state_err(format!("cannot resume while {}", s.phase.as_str())));
                }
                s.phase = Phase::Running;
                Ok(json!({"state": "running", "tick": s.engine.tick()}))
            }
            "sim.stop" => {
                // on a finished run this just returns its report
                let s = self.session()?;
                if let Some(r) = s.engine.report() {
                    return Ok(json!(r));
                }
                Ok(self.end_run("stopped").unwrap_or(Value::Null))
            }
            "network.get" => Ok(json!(self.session()?.engine.network().to_doc())),
            "plan.submit" => {
                let d: FlightDemand = parse(body)?;
                let s = self.live()?;
                let plan_id = format!("P-{}", d.id);
                s.engine.submit_demand(d).map_err(sim_err)?;
                Ok(json!({"plan_id": plan_id, "tick": s.engine.tick()}))
            }
            "plan.query" => {
                let q: PlanQueryBody = parse(body)?;
                self.session()?.engine.plan_query(&q.plan_id).ok_or_else(|| (ErrorCode::NotFound, format!("unknown plan `{}`", q.plan_id)))
            }
            "uav.command" => {
                let c: CommandBody = parse(body)?;
                let s = self.live()?;
                s.engine.set_override(&c.uav, c.setpoint).map_err(sim_err)?;
                Ok(json!({"uav": c.uav, "tick": s.engine.tick()}))
            }
            "anomaly.inject" => {
                if !body.is_object() {
                    return Err((ErrorCode::Invalid, "anomaly must be an object".into()));
                }
                let s = self.live()?;
                s.engine.inject_anomaly(body.clone());
                // applied or rejected in the next tick's anomaly phase
                Ok(json!({"queued": true, "tick": s.engine.tick()}))
            }
            "airspace.control" => {
                let _: ControlOrder = parse(body)?;
                let s = self.live()?;
                let env = s.engine.publish(TOPIC_ORDER, body.clone()).map_err(sim_err)?;
                Ok(json!({"topic": env.topic, "sequence": env.sequence, "deliver_tick": env.deliver_tick}))
            }
            "stats.get" => Ok(json!(self.session()?.engine.stats())),
            "uav.telemetry.subscribe" => Err((ErrorCode::Protocol, "uav.telemetry.subscribe needs a stream connection".into())),
            other => Err((ErrorCode::Protocol, format!("unknown verb `{other}`"))),
        }
    }

    fn status(&self) -> Value {
        let Some(s) = &self.session else {
            return json!({"state": "idle"});
        };
        let st = s.engine.status();
        json!({
            "state": s.phase.as_str(),
            "scenario": s.engine.scenario().map.name,
            "tick": st.tick,
            "elapsed_s": st.elapsed_s,
            "active_uavs": st.active_uavs,
            "demands": st.demands,
            "terminal": st.terminal,
            "collisions": st.collisions,
            "until": s.until,
            "end_reason": s.end_reason,
            "external": s.external,
        })
    }

    fn load(&mut self, b: LoadBody) -> Handled {
        if let Some(s) = &self.session {
            if matches!(s.phase, Phase::Running | Phase::Paused) {
                return Err(state_err("stop the current run before loading another"));
            }
        }
        let mut scenario = match (b.path, b.scenario) {
            (Some(p), None) => load_scenario(&p).map_err(sim_err)?,
            (None, Some(doc)) => {
                let s: Scenario = serde_json::from_value(doc).map_err(|e| (ErrorCode::Invalid, format!("scenario parse error: {e}")))?;
                s
            }
            _ => return Err((ErrorCode::Invalid, "give exactly one of `path` or `scenario`".into())),
        };
        if let Some(seed) = b.seed {
            scenario.seed = seed;
        }
        let violations = scenario.violations();
        if !violations.is_empty() {
            return Err((ErrorCode::Invalid, violations.join("\n")));
        }
        let external: BTreeSet<Role> = b.external.unwrap_or_else(|| self.config.external.clone()).into_iter().collect();
        let link = |r: Role, slot: &Arc<Slot>| -> Option<Box<dyn skylane::engine::RoleLink>> {
            external.contains(&r).then(|| Box::new(ExternalLink::new(r, slot.clone(), self.config.ack_timeout)) as _)
        };
        let opts = EngineOptions {
            out_dir: self.config.out_dir.clone(),
            authority: link(Role::Authority, &self.authority),
            traffic: link(Role::Traffic, &self.traffic),
            stream: true,
        };
        let engine = Engine::new(scenario, opts).map_err(sim_err)?;
        let body = json!({
            "scenario": engine.scenario().map.name,
            "seed": engine.scenario().seed,
            "demands": engine.scenario().demands.len(),
            "fleet": engine.scenario().fleet.len(),
            "external": external,
        });
        self.session = Some(Session { engine, phase: Phase::Loaded, until: None, external, end_reason: None });
        Ok(body)
    }
}
