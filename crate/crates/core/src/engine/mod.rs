//! Lockstep tick loop: bus delivery, anomalies, authority, traffic
//! management, per-UAV sense/avoid/control/physics, collisions, stats,
//! telemetry and logs, in that order every tick.

pub mod collision;
pub mod logs;

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use nalgebra::{UnitQuaternion, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub use collision::{detect_collisions, detect_collisions_all_pairs, min_pair_distance, Body, CollisionEvent, CollisionKind};
use logs::{write_document, HashingWriter};

use crate::airway::AirwayNetwork;
use crate::anomaly::{AnomalyHooks, AnomalyLogEntry, AnomalyManager, Fog, TOPIC_APPLIED, TOPIC_INJECT, TOPIC_REJECTED, TOPIC_REVERTED};
use crate::authority::{
    ApprovalDecision, Authority, ControlOrder, FlightMonitor, FlightObservation, TrafficStats, StatsUpdate, TOPIC_AIRSPACE, TOPIC_DECISION,
    TOPIC_ORDER, TOPIC_STATS, TOPIC_SUBMIT,
};
use crate::bus::{Bus, BusCounters, Envelope, LinkModel, Publication, TopicPattern};
use crate::dynamics::{run_controller, step_dynamics, ControlSetpoint, UavState};
use crate::error::{Result, SimError};
use crate::scenario::{FleetUav, Scenario};
use crate::sensing::{avoidance_override, build_histogram, degrade_scan, scan_lidar, select_heading, VfhConfig};
use crate::traffic::{
    telemetry_topic, DemandOutcome, FlightDemand, PlanRequest, PlanState, PlanStateEvent, TelemetryFrame, TrafficManager, UavCommand,
    TOPIC_CMD_PREFIX, TOPIC_PLAN_STATE,
};
use crate::world::geometry::{LocalPoint, Obstacle, Shape};
use crate::world::{RandomStream, SimClock};

/// Topics consumed by the authority role.
pub const AUTHORITY_TOPICS: &[&str] = &[TOPIC_SUBMIT, TOPIC_ORDER, TOPIC_STATS, TOPIC_PLAN_STATE];
/// Topics consumed by the traffic-management role.
pub const TRAFFIC_TOPICS: &[&str] = &[TOPIC_DECISION, TOPIC_AIRSPACE, "uav/telemetry/*", TOPIC_DEMAND];
/// Demands handed to an external traffic manager.
pub const TOPIC_DEMAND: &str = "demand/submit";
pub const TOPIC_CONTROL_REJECTED: &str = "control/rejected";

pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// A subsystem running outside the engine. The engine hands it the
/// messages delivered for its role and waits for its publications before
/// the tick continues.
pub trait RoleLink: Send {
    fn phase(&mut self, tick: u64, inbox: &[Envelope]) -> Result<Vec<Publication>>;
}

enum AuthorityRole {
    BuiltIn(Box<Authority>),
    External(Box<dyn RoleLink>),
}

enum TrafficRole {
    BuiltIn(Box<TrafficManager>),
    External(Box<dyn RoleLink>),
}

#[derive(Default)]
pub struct EngineOptions {
    /// Log directory; `None` keeps logs in memory (digests only).
    pub out_dir: Option<PathBuf>,
    pub authority: Option<Box<dyn RoleLink>>,
    pub traffic: Option<Box<dyn RoleLink>>,
    /// Buffer stream frames for [`Engine::take_stream`].
    pub stream: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameKind {
    Telemetry,
    Event,
    Stats,
}

/// One element of the outbound data feed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StreamFrame {
    pub kind: FrameKind,
    pub tick: u64,
    pub payload: Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionOutcome {
    pub demand_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub uav: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<DemandOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<PlanState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub departed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arrived: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub scenario: String,
    pub seed: u64,
    pub ticks: u64,
    pub end_reason: String,
    pub demands: usize,
    pub completed: usize,
    pub aborted: usize,
    pub unfinished: usize,
    pub missions: Vec<MissionOutcome>,
    pub collisions: Vec<CollisionEvent>,
    pub stats: TrafficStats,
    pub anomalies: Vec<AnomalyLogEntry>,
    pub anomaly_rejections: usize,
    pub bus: BusCounters,
    pub peak_active: usize,
    /// Smallest distance between two airborne UAVs closer than `s_min`.
    pub min_separation: Option<f64>,
    /// Ticks where active entities differed from in-flight plans.
    pub accounting_mismatches: u64,
    pub illegal_transitions: u64,
    /// SHA-256 of each log file.
    pub digests: BTreeMap<String, String>,
}

/// Wall-clock figures, kept apart from the deterministic report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub ticks: u64,
    pub wall_seconds: f64,
    pub ticks_per_second: f64,
    pub peak_active: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunState {
    Running,
    Finished,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngineStatus {
    pub tick: u64,
    pub elapsed_s: f64,
    pub active_uavs: usize,
    pub demands: usize,
    pub terminal: usize,
    pub collisions: usize,
    pub state: RunState,
}

/// Scan sizes from the last LiDAR sweep: raw and after degradation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanStats {
    pub tick: u64,
    pub raw: usize,
    pub degraded: usize,
}

#[derive(Debug, Clone)]
struct PoolUav {
    spec: FleetUav,
    health: [f64; 4],
    override_sp: Option<ControlSetpoint>,
    rng: RandomStream,
}

#[derive(Debug, Clone)]
struct Entity {
    id: String,
    plan_id: String,
    spawned_at: u64,
    state: UavState,
    command: Option<UavCommand>,
    override_sp: Option<ControlSetpoint>,
    rng: RandomStream,
    ground_contact: bool,
    scan: Option<ScanStats>,
}

#[derive(Debug, Clone, Default)]
struct World {
    wind: Vector3<f64>,
    obstacles: Vec<Obstacle>,
    fog: Option<Fog>,
}

struct PhaseCtx<'a> {
    now: u64,
    wind: Vector3<f64>,
    scene: &'a [Shape],
    fog: Option<Fog>,
    avoidance: bool,
    vfh: Option<&'a VfhConfig>,
    dt: f64,
    substeps: u32,
    pads: &'a [(Vector2<f64>, f64)],
    /// Everyone's position before this phase, for LiDAR returns off other UAVs.
    snapshot: &'a [(String, Vector3<f64>, f64)],
    states: &'a BTreeMap<String, PlanState>,
}

fn surface(pads: &[(Vector2<f64>, f64)], p: &Vector3<f64>) -> f64 {
    let h = Vector2::new(p.x, p.y);
    pads.iter().filter(|(c, _)| (c - h).norm() < 3.0).map(|(_, u)| *u).fold(0.0, f64::max)
}

fn yaw_only(yaw: f64) -> UnitQuaternion<f64> {
    UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw)
}

/// Sense, avoid, control and integrate one UAV for one tick.
fn uav_phase(e: &mut Entity, spec: &FleetUav, ctx: &PhaseCtx) -> Result<()> {
    let pos = e.state.position;
    let plan_state = ctx.states.get(&e.plan_id).copied();
    let mut sp = match (&e.override_sp, &e.command) {
        (Some(o), _) => o.clone(),
        (None, Some(c)) => c.setpoint.clone(),
        (None, None) => ControlSetpoint::hold(pos, e.state.yaw()),
    };

    if let (Some(lidar), true, Some(PlanState::Enroute)) = (&spec.lidar, ctx.avoidance, plan_state) {
        let mut scene: Vec<Shape> = ctx.scene.to_vec();
        for (id, p, r) in ctx.snapshot {
            if *id != e.id && (p - pos.vec()).norm() <= lidar.max_range + r {
                scene.push(Shape::Sphere { center: LocalPoint::from_vec(p), radius: *r });
            }
        }
        let yaw = e.state.yaw();
        // the sensor is yaw-stabilised, so the cloud is level in the world frame
        let raw = scan_lidar(&pos, &yaw_only(yaw), lidar, &scene, ctx.now);
        let cloud = match ctx.fog {
            Some(f) => degrade_scan(&raw, f.dropout, f.range_scale, lidar.max_range, &mut e.rng),
            None => raw.clone(),
        };
        e.scan = Some(ScanStats { tick: ctx.now, raw: raw.len(), degraded: cloud.len() });
        if let Some(target) = sp.target().copied() {
            let d = target.horizontal() - pos.horizontal();
            if d.norm() > 1.0 {
                let derived;
                let cfg = match ctx.vfh {
                    Some(c) => c,
                    None => {
                        derived = VfhConfig::for_range(lidar.max_range);
                        &derived
                    }
                };
                let hist = build_histogram(&cloud, cfg, yaw);
                let bearing = d.y.atan2(d.x);
                let steer = select_heading(&hist, bearing, cfg.s_max);
                sp = avoidance_override(&sp, steer, bearing, &hist, cfg);
            }
        }
    }

    let exempt = matches!(plan_state, Some(PlanState::TakingOff | PlanState::Landing));
    let mut contact = false;
    for _ in 0..ctx.substeps {
        let motor = run_controller(&e.state, &sp, &spec.params, &spec.gains);
        let mut s = step_dynamics(&e.state, &spec.params, &motor, &ctx.wind, ctx.dt)
            .map_err(|err| SimError::Numeric(format!("uav {} at tick {}: {err}", e.id, ctx.now)))?;
        let g = surface(ctx.pads, &s.position.vec());
        if s.position.up <= g {
            // resting on skids: no sinking, sliding or tipping
            s.position.up = g;
            s.velocity = Vector3::zeros();
            s.angular_rate = Vector3::zeros();
            s.attitude = yaw_only(s.yaw());
            contact = true;
        }
        e.state = s;
    }
    e.ground_contact = contact && !exempt;
    Ok(())
}

struct Hooks<'a> {
    now: u64,
    net: &'a AirwayNetwork,
    authority: &'a mut AuthorityRole,
    bus: &'a mut Bus,
    world: &'a mut World,
    pool: &'a mut BTreeMap<String, PoolUav>,
    active: &'a mut BTreeMap<String, Entity>,
    out: &'a mut Vec<Publication>,
}

impl AnomalyHooks for Hooks<'_> {
    fn has_uav(&self, uav: &str) -> bool {
        self.pool.contains_key(uav)
    }

    fn has_airway(&self, airway: &str) -> bool {
        self.net.airway(airway).is_ok()
    }

    fn has_airport(&self, airport: &str) -> bool {
        self.net.airport(airport).is_ok()
    }

    fn control(&mut self, order: ControlOrder) -> Result<Vec<String>> {
        match self.authority {
            AuthorityRole::BuiltIn(a) => {
                let ack = a.issue_airspace_control(&order, self.now)?;
                let affected = ack.affected_plans.clone();
                self.out.push(Publication::new(TOPIC_AIRSPACE, json!(a.airspace_state(self.now, ack.affected_plans))));
                Ok(affected)
            }
            AuthorityRole::External(_) => {
                self.out.push(Publication::new(TOPIC_ORDER, json!(order)));
                Ok(Vec::new())
            }
        }
    }

    fn wind(&mut self) -> &mut Vector3<f64> {
        &mut self.world.wind
    }

    fn add_obstacle(&mut self, obstacle: Obstacle) -> Result<()> {
        if self.world.obstacles.iter().any(|o| o.id == obstacle.id) {
            return Err(SimError::Injection(format!("obstacle `{}` already exists", obstacle.id)));
        }
        self.world.obstacles.push(obstacle);
        Ok(())
    }

    fn remove_obstacle(&mut self, id: &str) -> Result<()> {
        let before = self.world.obstacles.len();
        self.world.obstacles.retain(|o| o.id != id);
        if self.world.obstacles.len() == before {
            return Err(SimError::Injection(format!("unknown target: obstacle `{id}`")));
        }
        Ok(())
    }

    fn fog(&mut self) -> &mut Option<Fog> {
        &mut self.world.fog
    }

    fn motor_health(&mut self, uav: &str, motor: usize) -> Result<&mut f64> {
        if motor >= 4 {
            return Err(SimError::Injection(format!("motor index {motor} out of range")));
        }
        if let Some(e) = self.active.get_mut(uav) {
            return Ok(&mut e.state.health[motor]);
        }
        self.pool.get_mut(uav).map(|p| &mut p.health[motor]).ok_or_else(|| SimError::Injection(format!("unknown target: uav `{uav}`")))
    }

    fn set_link(&mut self, prefix: &str, link: Option<LinkModel>) -> Result<Option<LinkModel>> {
        self.bus.set_link(prefix, link).map_err(|e| SimError::Injection(e.to_string()))
    }
}

/// Plan facts gathered from bus traffic, so that accounting works the same
/// with built-in and external subsystems.
#[derive(Debug, Clone, Default)]
struct PlanBook {
    requests: BTreeMap<String, PlanRequest>,
    last: BTreeMap<String, PlanStateEvent>,
    decisions: BTreeMap<String, ApprovalDecision>,
    departed: BTreeMap<String, u64>,
    arrived: BTreeMap<String, u64>,
    illegal: u64,
}

impl PlanBook {
    fn state(&self, plan: &str) -> Option<PlanState> {
        self.last.get(plan).map(|e| e.to)
    }

    fn in_flight(&self) -> usize {
        self.last.values().filter(|e| e.to.is_in_flight()).count()
    }
}

pub struct Engine {
    scenario: Scenario,
    net: Arc<AirwayNetwork>,
    clock: SimClock,
    bus: Bus,
    authority_patterns: Vec<TopicPattern>,
    traffic_patterns: Vec<TopicPattern>,
    authority: AuthorityRole,
    traffic: TrafficRole,
    anomalies: AnomalyManager,
    world: World,
    pads: Vec<(Vector2<f64>, f64)>,
    cell_size: f64,
    pool: BTreeMap<String, PoolUav>,
    active: BTreeMap<String, Entity>,
    monitor: FlightMonitor,
    stats: TrafficStats,
    last_occupancy: BTreeMap<String, u32>,
    book: PlanBook,
    demand_ids: Vec<String>,
    contacts: BTreeSet<(CollisionKind, Vec<String>)>,
    collisions: Vec<CollisionEvent>,
    telemetry_log: HashingWriter,
    events_log: HashingWriter,
    out_dir: Option<PathBuf>,
    live_queue: Vec<Value>,
    stream: Option<Vec<StreamFrame>>,
    peak_active: usize,
    min_separation: Option<f64>,
    accounting_mismatches: u64,
    /// UAVs launched outside any plan.
    free: BTreeSet<String>,
    finished: Option<RunReport>,
    wall: f64,
    ticks_run: u64,
}

impl std::fmt::Debug for Engine {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Engine").field("tick", &self.clock.tick).field("active", &self.active.len()).finish()
    }
}

impl Engine {
    /// Validates the scenario and prepares tick 0.
    pub fn new(scenario: Scenario, opts: EngineOptions) -> Result<Self> {
        scenario.validate()?;
        let net = Arc::new(scenario.network());
        let clock = scenario.sim_clock()?;
        let mut bus = Bus::new(scenario.seed);
        for l in &scenario.links {
            bus.set_link(&l.prefix, Some(l.link))?;
        }
        let authority = match opts.authority {
            Some(link) => AuthorityRole::External(link),
            None => AuthorityRole::BuiltIn(Box::new(Authority::new(net.clone(), scenario.map.no_fly_zones.clone(), scenario.policy.clone()))),
        };
        let fleet = scenario.resolve_fleet()?;
        let traffic = match opts.traffic {
            Some(link) => TrafficRole::External(link),
            None => {
                let homes = fleet.iter().map(|f| (f.id.clone(), f.home.clone())).collect();
                let mut tm = TrafficManager::new(net.clone(), homes, scenario.traffic.clone(), clock.ticks_per_second());
                for d in &scenario.demands {
                    tm.add_demand(d.clone())?;
                }
                TrafficRole::BuiltIn(Box::new(tm))
            }
        };
        let pool = fleet
            .into_iter()
            .map(|f| {
                let rng = RandomStream::new(scenario.seed, &format!("uav/{}", f.id));
                (f.id.clone(), PoolUav { spec: f, health: [1.0; 4], override_sp: None, rng })
            })
            .collect();
        let pads = net.airports().iter().map(|a| (a.ground_position.horizontal(), a.ground_position.up)).collect();
        let max_radius = net.airways().iter().map(|w| w.corridor_radius).fold(0.0, f64::max);
        if let Some(d) = &opts.out_dir {
            std::fs::create_dir_all(d)?;
        }
        let dir = opts.out_dir.as_deref();
        let mut engine = Self {
            demand_ids: scenario.demands.iter().map(|d| d.id.clone()).collect(),
            anomalies: AnomalyManager::new(scenario.anomalies.clone()),
            world: World { wind: Vector3::from(scenario.wind), obstacles: scenario.map.obstacles.clone(), fog: None },
            stats: TrafficStats::for_network(&net),
            authority_patterns: AUTHORITY_TOPICS.iter().map(|p| TopicPattern::parse(p)).collect::<Result<_>>()?,
            traffic_patterns: TRAFFIC_TOPICS.iter().map(|p| TopicPattern::parse(p)).collect::<Result<_>>()?,
            telemetry_log: HashingWriter::create(logs::log_path(dir, "telemetry.jsonl").as_deref())?,
            events_log: HashingWriter::create(logs::log_path(dir, "events.jsonl").as_deref())?,
            out_dir: opts.out_dir,
            stream: opts.stream.then(Vec::new),
            cell_size: if max_radius > 0.0 { 2.0 * max_radius } else { 20.0 },
            monitor: FlightMonitor::new(2.0),
            scenario,
            net,
            clock,
            bus,
            authority,
            traffic,
            pads,
            pool,
            active: BTreeMap::new(),
            last_occupancy: BTreeMap::new(),
            book: PlanBook::default(),
            contacts: BTreeSet::new(),
            collisions: Vec::new(),
            live_queue: Vec::new(),
            peak_active: 0,
            min_separation: None,
            accounting_mismatches: 0,
            free: BTreeSet::new(),
            finished: None,
            wall: 0.0,
            ticks_run: 0,
        };
        if matches!(engine.traffic, TrafficRole::External(_)) {
            for d in engine.scenario.demands.clone() {
                engine.bus.publish(TOPIC_DEMAND, json!(d), 0)?;
            }
        }
        Ok(engine)
    }

    pub fn from_path(path: impl AsRef<Path>, opts: EngineOptions) -> Result<Self> {
        Self::new(crate::scenario::load_scenario(path)?, opts)
    }

    pub fn scenario(&self) -> &Scenario {
        &self.scenario
    }

    pub fn network(&self) -> &Arc<AirwayNetwork> {
        &self.net
    }

    pub fn tick(&self) -> u64 {
        self.clock.tick
    }

    pub fn clock(&self) -> &SimClock {
        &self.clock
    }

    pub fn active_uavs(&self) -> Vec<String> {
        self.active.keys().cloned().collect()
    }

    pub fn uav_state(&self, uav: &str) -> Option<&UavState> {
        self.active.get(uav).map(|e| &e.state)
    }

    pub fn health(&self, uav: &str) -> Option<[f64; 4]> {
        self.active.get(uav).map(|e| e.state.health).or_else(|| self.pool.get(uav).map(|p| p.health))
    }

    pub fn wind(&self) -> Vector3<f64> {
        self.world.wind
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.world.obstacles
    }

    pub fn fog(&self) -> Option<Fog> {
        self.world.fog
    }

    pub fn bus(&self) -> &Bus {
        &self.bus
    }

    pub fn last_scan(&self, uav: &str) -> Option<ScanStats> {
        self.active.get(uav).and_then(|e| e.scan)
    }

    pub fn stats(&self) -> &TrafficStats {
        &self.stats
    }

    pub fn collisions(&self) -> &[CollisionEvent] {
        &self.collisions
    }

    pub fn anomaly_log(&self) -> &[AnomalyLogEntry] {
        self.anomalies.log()
    }

    pub fn traffic_manager(&self) -> Option<&TrafficManager> {
        match &self.traffic {
            TrafficRole::BuiltIn(tm) => Some(tm),
            TrafficRole::External(_) => None,
        }
    }

    pub fn authority(&self) -> Option<&Authority> {
        match &self.authority {
            AuthorityRole::BuiltIn(a) => Some(a),
            AuthorityRole::External(_) => None,
        }
    }

    pub fn plan_state(&self, plan_id: &str) -> Option<PlanState> {
        self.book.state(plan_id)
    }

    /// Everything known about a plan: request, latest decision and state.
    pub fn plan_query(&self, plan_id: &str) -> Option<Value> {
        let req = self.book.requests.get(plan_id);
        let dec = self.book.decisions.get(plan_id);
        let st = self.book.last.get(plan_id);
        if req.is_none() && dec.is_none() && st.is_none() {
            return None;
        }
        Some(json!({
            "plan_id": plan_id,
            "request": req,
            "decision": dec,
            "state": st.map(|e| e.to),
            "reason": st.and_then(|e| e.reason.clone()),
        }))
    }

    pub fn status(&self) -> EngineStatus {
        EngineStatus {
            tick: self.clock.tick,
            elapsed_s: self.clock.elapsed(),
            active_uavs: self.active.len(),
            demands: self.demand_ids.len(),
            terminal: self.terminal_count(),
            collisions: self.collisions.len(),
            state: if self.finished.is_some() { RunState::Finished } else { RunState::Running },
        }
    }

    pub fn take_stream(&mut self) -> Vec<StreamFrame> {
        self.stream.as_mut().map(std::mem::take).unwrap_or_default()
    }

    /// Queues a live anomaly request for the next anomaly phase.
    pub fn inject_anomaly(&mut self, request: Value) {
        self.live_queue.push(request);
    }

    /// Adds a demand at run time.
    pub fn submit_demand(&mut self, demand: FlightDemand) -> Result<()> {
        demand.validate(&self.net)?;
        if self.demand_ids.contains(&demand.id) {
            return Err(SimError::validation(format!("duplicate demand id {}", demand.id)));
        }
        match &mut self.traffic {
            TrafficRole::BuiltIn(tm) => tm.add_demand(demand.clone())?,
            TrafficRole::External(_) => {
                self.bus.publish(TOPIC_DEMAND, json!(demand), self.clock.tick)?;
            }
        }
        self.demand_ids.push(demand.id);
        Ok(())
    }

    /// Publishes on the bus at the current tick, as an outside client would.
    pub fn publish(&mut self, topic: &str, payload: Value) -> Result<Envelope> {
        self.bus.publish(topic, payload, self.clock.tick)
    }

    /// Operator override of a UAV's setpoint; `None` hands control back.
    pub fn set_override(&mut self, uav: &str, setpoint: Option<ControlSetpoint>) -> Result<()> {
        if let Some(sp) = &setpoint {
            if !sp.is_finite() {
                return Err(SimError::validation("setpoint must be finite"));
            }
        }
        let p = self.pool.get_mut(uav).ok_or_else(|| SimError::lookup("uav", uav))?;
        p.override_sp = setpoint.clone();
        if let Some(e) = self.active.get_mut(uav) {
            e.override_sp = setpoint;
        }
        Ok(())
    }

    /// Puts an idle UAV in the air outside any flight plan, steered only by
    /// `setpoint`. It stays up until the run finishes.
    pub fn launch(&mut self, uav: &str, at: LocalPoint, setpoint: ControlSetpoint) -> Result<()> {
        if !at.is_finite() || !setpoint.is_finite() {
            return Err(SimError::validation("launch position and setpoint must be finite"));
        }
        if self.active.contains_key(uav) {
            return Err(SimError::Scheduling(format!("uav {uav} is already flying")));
        }
        let p = self.pool.get_mut(uav).ok_or_else(|| SimError::lookup("uav", uav))?;
        p.override_sp = Some(setpoint.clone());
        let mut state = UavState::hovering(at, &p.spec.params);
        state.health = p.health;
        self.active.insert(
            uav.to_owned(),
            Entity {
                id: uav.to_owned(),
                plan_id: format!("free:{uav}"),
                spawned_at: self.clock.tick,
                state,
                command: None,
                override_sp: Some(setpoint),
                rng: p.rng.clone(),
                ground_contact: false,
                scan: None,
            },
        );
        self.free.insert(uav.to_owned());
        Ok(())
    }

    fn terminal_count(&self) -> usize {
        self.book.last.values().filter(|e| e.to.is_terminal()).count()
    }

    /// Every demand has reached a terminal plan state.
    pub fn all_terminal(&self) -> bool {
        match &self.traffic {
            TrafficRole::BuiltIn(tm) => tm.all_terminal() && self.active.len() == self.free.len(),
            TrafficRole::External(_) => self.terminal_count() >= self.demand_ids.len() && self.active.len() == self.free.len(),
        }
    }

    fn frame(&mut self, kind: FrameKind, payload: Value) {
        let tick = self.clock.tick;
        if let Some(s) = &mut self.stream {
            s.push(StreamFrame { kind, tick, payload });
        }
    }

    fn log_event(&mut self, event: &str, data: &Value) -> Result<()> {
        let mut rec = serde_json::Map::new();
        rec.insert("tick".into(), json!(self.clock.tick));
        rec.insert("event".into(), json!(event));
        match data {
            Value::Object(m) => {
                for (k, v) in m {
                    if k != "tick" && k != "event" {
                        rec.insert(k.clone(), v.clone());
                    }
                }
            }
            other => {
                rec.insert("data".into(), other.clone());
            }
        }
        let rec = Value::Object(rec);
        self.events_log.write_line(&rec)?;
        self.frame(FrameKind::Event, rec);
        Ok(())
    }

    fn spawn(&mut self, ev: &PlanStateEvent) -> Result<()> {
        let now = self.clock.tick;
        if self.active.contains_key(&ev.uav) {
            return Err(SimError::Scheduling(format!("uav {} is already flying", ev.uav)));
        }
        let p = self.pool.get_mut(&ev.uav).ok_or_else(|| SimError::lookup("uav", &ev.uav))?;
        let origin = self.book.requests.get(&ev.plan_id).map(|r| r.origin.clone()).unwrap_or_else(|| p.spec.home.clone());
        let pad = self.net.airport(&origin)?.ground_position;
        let mut state = UavState::at_rest(pad);
        state.health = p.health;
        // face the first leg so the climb needs no yaw manoeuvre
        if let Some(r) = self.book.requests.get(&ev.plan_id) {
            if let Some(first) = r.route.first() {
                let d = self.net.node(first)?.position.horizontal() - pad.horizontal();
                if d.norm() > 1e-6 {
                    state.attitude = yaw_only(d.y.atan2(d.x));
                }
            }
        }
        self.active.insert(
            ev.uav.clone(),
            Entity {
                id: ev.uav.clone(),
                plan_id: ev.plan_id.clone(),
                spawned_at: now,
                state,
                command: None,
                override_sp: p.override_sp.clone(),
                rng: p.rng.clone(),
                ground_contact: false,
                scan: None,
            },
        );
        self.stats.record_departure(&origin);
        self.book.departed.insert(ev.plan_id.clone(), now);
        Ok(())
    }

    fn reclaim(&mut self, ev: &PlanStateEvent) {
        if let Some(e) = self.active.remove(&ev.uav) {
            if let Some(p) = self.pool.get_mut(&ev.uav) {
                // motor damage persists across missions
                p.health = e.state.health;
                p.rng = e.rng;
            }
        }
        if ev.to == PlanState::Completed {
            if let Some(r) = self.book.requests.get(&ev.plan_id) {
                let dest = r.destination.clone();
                self.stats.record_arrival(&dest);
            }
            self.stats.completed_missions += 1;
            self.book.arrived.insert(ev.plan_id.clone(), self.clock.tick);
        }
    }

    /// Publishes, logs and tracks one batch of role outputs.
    fn emit(&mut self, pubs: Vec<Publication>) -> Result<()> {
        let now = self.clock.tick;
        for p in pubs {
            match p.topic.as_str() {
                TOPIC_PLAN_STATE => {
                    if let Ok(ev) = serde_json::from_value::<PlanStateEvent>(p.payload.clone()) {
                        let prev = self.book.state(&ev.plan_id).unwrap_or(PlanState::Draft);
                        if prev != ev.from || !ev.from.can_transition(ev.to) {
                            self.book.illegal += 1;
                        }
                        self.book.last.insert(ev.plan_id.clone(), ev.clone());
                        if ev.to == PlanState::TakingOff && ev.from != PlanState::TakingOff {
                            if let Err(e) = self.spawn(&ev) {
                                self.log_event("spawn_rejected", &json!({"plan_id": ev.plan_id, "uav": ev.uav, "reason": e.to_string()}))?;
                            }
                        }
                        if ev.to.is_terminal() {
                            self.reclaim(&ev);
                        }
                    }
                    self.log_event("plan_state", &p.payload)?;
                }
                TOPIC_SUBMIT => {
                    if let Ok(r) = serde_json::from_value::<PlanRequest>(p.payload.clone()) {
                        self.book.requests.insert(r.plan_id.clone(), r);
                    }
                }
                TOPIC_DECISION => {
                    if let Ok(d) = serde_json::from_value::<ApprovalDecision>(p.payload.clone()) {
                        self.book.decisions.insert(d.plan_id.clone(), d);
                    }
                    self.log_event("decision", &p.payload)?;
                }
                TOPIC_AIRSPACE => self.log_event("airspace", &p.payload)?,
                TOPIC_CONTROL_REJECTED => self.log_event("control_rejected", &p.payload)?,
                TOPIC_APPLIED => self.log_event("anomaly_applied", &p.payload)?,
                TOPIC_REJECTED => self.log_event("anomaly_rejected", &p.payload)?,
                TOPIC_REVERTED => self.log_event("anomaly_reverted", &p.payload)?,
                _ => {}
            }
            if let Err(e) = self.bus.publish(&p.topic, p.payload, now) {
                self.log_event("publish_rejected", &json!({"reason": e.to_string()}))?;
            }
        }
        Ok(())
    }

    /// Advances one tick through every phase.
    pub fn step(&mut self) -> Result<()> {
        if self.finished.is_some() {
            return Err(SimError::Scheduling("run already finished".into()));
        }
        let now = self.clock.tick;

        // deliver
        let delivered = self.bus.deliver_due(now);
        let mut auth_in = Vec::new();
        let mut tm_in = Vec::new();
        let mut commands: BTreeMap<String, UavCommand> = BTreeMap::new();
        let mut live = std::mem::take(&mut self.live_queue);
        for env in delivered {
            if self.authority_patterns.iter().any(|p| p.matches(&env.topic)) {
                auth_in.push(env.clone());
            }
            if self.traffic_patterns.iter().any(|p| p.matches(&env.topic)) {
                tm_in.push(env.clone());
            }
            if let Some(uav) = env.topic.strip_prefix(TOPIC_CMD_PREFIX).and_then(|r| r.strip_prefix('/')) {
                if let Ok(c) = serde_json::from_value::<UavCommand>(env.payload.clone()) {
                    commands.insert(uav.to_owned(), c);
                }
            } else if env.topic == TOPIC_INJECT {
                live.push(env.payload);
            }
        }

        // anomalies
        let mut out = Vec::new();
        let pubs = {
            let mut hooks = Hooks {
                now,
                net: &self.net,
                authority: &mut self.authority,
                bus: &mut self.bus,
                world: &mut self.world,
                pool: &mut self.pool,
                active: &mut self.active,
                out: &mut out,
            };
            self.anomalies.step(now, &mut hooks, &live)
        };
        out.extend(pubs);
        self.emit(out)?;

        // authority
        let pubs = match &mut self.authority {
            AuthorityRole::BuiltIn(a) => a.step(now, &auth_in),
            AuthorityRole::External(link) => link.phase(now, &auth_in)?,
        };
        self.emit(pubs)?;

        // traffic management; lifecycle events spawn and reclaim entities
        let pubs = match &mut self.traffic {
            TrafficRole::BuiltIn(tm) => tm.step(now, &tm_in),
            TrafficRole::External(link) => link.phase(now, &tm_in)?,
        };
        self.emit(pubs)?;

        // per-UAV phase
        for (uav, c) in commands {
            if let Some(e) = self.active.get_mut(&uav) {
                if e.plan_id == c.plan_id {
                    e.command = Some(c);
                }
            }
        }
        let dt = self.scenario.clock.physics_substeps as f64;
        let dt = self.clock.tick_duration / dt;
        for o in self.world.obstacles.iter_mut().filter(|o| o.dynamic) {
            o.shape = o.shape.translated(&(o.velocity_vec() * self.clock.tick_duration));
        }
        let scene: Vec<Shape> = self.world.obstacles.iter().map(|o| o.shape.clone()).collect();
        let snapshot: Vec<(String, Vector3<f64>, f64)> =
            self.active.values().map(|e| (e.id.clone(), e.state.position.vec(), self.pool[&e.id].spec.params.body_radius)).collect();
        let states: BTreeMap<String, PlanState> = self.active.values().filter_map(|e| self.book.state(&e.plan_id).map(|s| (e.plan_id.clone(), s))).collect();
        let ctx = PhaseCtx {
            now,
            wind: self.world.wind,
            scene: &scene,
            fog: self.world.fog,
            avoidance: self.scenario.avoidance.enabled,
            vfh: self.scenario.avoidance.vfh.as_ref(),
            dt,
            substeps: self.clock.physics_substeps,
            pads: &self.pads,
            snapshot: &snapshot,
            states: &states,
        };
        let pool = &self.pool;
        let results: Vec<Result<()>> = self
            .active
            .par_iter_mut()
            .filter(|(_, e)| e.spawned_at < now)
            .map(|(id, e)| uav_phase(e, &pool[id].spec, &ctx))
            .collect();
        for r in results {
            r?;
        }

        // collisions
        let bodies: Vec<Body> = self
            .active
            .values()
            .map(|e| Body {
                id: e.id.clone(),
                position: e.state.position.vec(),
                radius: self.pool[&e.id].spec.params.body_radius,
                ground_contact: e.ground_contact,
            })
            .collect();
        let found = detect_collisions(now, &bodies, &self.world.obstacles, self.cell_size);
        let keys: BTreeSet<(CollisionKind, Vec<String>)> = found.iter().map(|c| c.key()).collect();
        for c in found {
            if !self.contacts.contains(&c.key()) {
                self.log_event("collision", &json!(c))?;
                self.collisions.push(c);
                self.stats.collisions += 1;
            }
        }
        self.contacts = keys;
        let airborne: Vec<Body> = bodies
            .into_iter()
            .filter(|b| b.position.z - surface(&self.pads, &b.position) > 0.5)
            .collect();
        if let Some(d) = min_pair_distance(&airborne, self.scenario.traffic.s_min) {
            self.min_separation = Some(self.min_separation.map_or(d, |m| m.min(d)));
        }

        // stats
        let obs: Vec<FlightObservation> = self
            .active
            .values()
            .map(|e| FlightObservation {
                uav: e.id.clone(),
                airway: e.command.as_ref().and_then(|c| c.airway.clone()),
                position: e.state.position,
            })
            .collect();
        let events = self.monitor.monitor_flights(&obs, &self.net, &mut self.stats, now);
        for ev in events {
            self.log_event("monitor", &json!(ev))?;
        }
        let occ = self.stats.occupancy();
        if occ != self.last_occupancy {
            let upd = StatsUpdate { tick: now, occupancy: occ.clone() };
            self.bus.publish(TOPIC_STATS, json!(upd), now)?;
            self.frame(FrameKind::Stats, json!(upd));
            self.last_occupancy = occ;
        }

        // telemetry
        let log_now = now % self.scenario.telemetry_every == 0;
        let frames: Vec<TelemetryFrame> = self
            .active
            .values()
            .map(|e| {
                let s = &e.state;
                let q = s.attitude.quaternion();
                TelemetryFrame {
                    tick: now,
                    uav: e.id.clone(),
                    position: s.position,
                    velocity: [s.velocity.x, s.velocity.y, s.velocity.z],
                    attitude: [q.w, q.i, q.j, q.k],
                    motor_speed: s.motor_speed,
                    health: s.health,
                    plan_id: Some(e.plan_id.clone()),
                    plan_state: self.book.state(&e.plan_id),
                    airway: e.command.as_ref().and_then(|c| c.airway.clone()),
                }
            })
            .collect();
        for f in frames {
            let v = json!(f);
            if log_now {
                self.telemetry_log.write_line(&v)?;
                self.frame(FrameKind::Telemetry, v.clone());
            }
            self.bus.publish(&telemetry_topic(&f.uav), v, now)?;
        }

        // accounting and flush
        if self.active.len() - self.free.len() != self.book.in_flight() {
            self.accounting_mismatches += 1;
        }
        self.peak_active = self.peak_active.max(self.active.len());
        if now % 300 == 0 {
            self.telemetry_log.flush()?;
            self.events_log.flush()?;
        }
        self.clock.advance();
        self.ticks_run += 1;
        Ok(())
    }

    /// Runs until every demand is terminal or `until` ticks have elapsed.
    pub fn run(&mut self, until: Option<u64>) -> Result<RunReport> {
        let start = Instant::now();
        let reason = loop {
            if self.all_terminal() {
                break "all_terminal";
            }
            if until.is_some_and(|u| self.clock.tick >= u) {
                break "until";
            }
            self.step()?;
        };
        self.wall += start.elapsed().as_secs_f64();
        self.finish(reason)
    }

    pub fn performance(&self) -> Performance {
        Performance {
            ticks: self.ticks_run,
            wall_seconds: self.wall,
            ticks_per_second: if self.wall > 0.0 { self.ticks_run as f64 / self.wall } else { 0.0 },
            peak_active: self.peak_active,
        }
    }

    /// Closes the run: writes stats, report and performance files, clears
    /// caches and returns the report. Idempotent.
    pub fn finish(&mut self, end_reason: &str) -> Result<RunReport> {
        if let Some(r) = &self.finished {
            return Ok(r.clone());
        }
        self.telemetry_log.flush()?;
        self.events_log.flush()?;
        let dir = self.out_dir.clone();
        let mut digests = BTreeMap::new();
        digests.insert("telemetry.jsonl".to_owned(), self.telemetry_log.digest());
        digests.insert("events.jsonl".to_owned(), self.events_log.digest());
        digests.insert("stats.json".to_owned(), write_document(dir.as_deref(), "stats.json", &self.stats)?);

        let mut missions = Vec::new();
        let by_demand: BTreeMap<&str, &PlanStateEvent> = self.book.last.values().map(|e| (e.demand_id.as_str(), e)).collect();
        for d in &self.demand_ids {
            let ev = by_demand.get(d.as_str());
            let state = ev.map(|e| e.to);
            missions.push(MissionOutcome {
                demand_id: d.clone(),
                plan_id: ev.map(|e| e.plan_id.clone()),
                uav: ev.map(|e| e.uav.clone()),
                outcome: state.and_then(|s| match s {
                    PlanState::Completed => Some(DemandOutcome::Completed),
                    PlanState::Aborted | PlanState::Rejected => Some(DemandOutcome::Aborted),
                    _ => None,
                }),
                state,
                reason: ev.and_then(|e| e.reason.clone()),
                departed: ev.and_then(|e| self.book.departed.get(&e.plan_id).copied()),
                arrived: ev.and_then(|e| self.book.arrived.get(&e.plan_id).copied()),
            });
        }
        let completed = missions.iter().filter(|m| m.outcome == Some(DemandOutcome::Completed)).count();
        let aborted = missions.iter().filter(|m| m.outcome == Some(DemandOutcome::Aborted)).count();
        let mut report = RunReport {
            schema_version: REPORT_SCHEMA_VERSION,
            scenario: self.scenario.map.name.clone(),
            seed: self.scenario.seed,
            ticks: self.clock.tick,
            end_reason: end_reason.to_owned(),
            demands: self.demand_ids.len(),
            completed,
            aborted,
            unfinished: missions.len() - completed - aborted,
            missions,
            collisions: self.collisions.clone(),
            stats: self.stats.clone(),
            anomalies: self.anomalies.log().to_vec(),
            anomaly_rejections: self.anomalies.rejections().len(),
            bus: self.bus.counters(),
            peak_active: self.peak_active,
            min_separation: self.min_separation,
            accounting_mismatches: self.accounting_mismatches,
            illegal_transitions: self.book.illegal,
            digests,
        };
        let h = write_document(dir.as_deref(), "report.json", &report)?;
        report.digests.insert("report.json".to_owned(), h);
        write_document(dir.as_deref(), "perf.json", &self.performance())?;
        if !self.anomalies.live_history().is_empty() {
            // live injections, ready to paste into a scenario's anomaly schedule
            write_document(dir.as_deref(), "live_anomalies.json", &self.anomalies.live_history())?;
        }
        self.active.clear();
        self.live_queue.clear();
        self.contacts.clear();
        self.finished = Some(report.clone());
        Ok(report)
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    pub fn report(&self) -> Option<&RunReport> {
        self.finished.as_ref()
    }
}

/// Throughput figures from [`bench`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub scenario: String,
    pub demands: usize,
    pub completed: usize,
    pub collisions: usize,
    /// The scenario run to completion.
    pub run: Performance,
    /// Every fleet UAV airborne at once for a fixed number of ticks.
    pub saturation: Performance,
}

/// Runs `scenario` to completion, then a saturation pass: the whole fleet
/// is launched at once onto parallel east-west tracks and flown for
/// `saturation_ticks` with every phase active.
pub fn bench(scenario: Scenario, saturation_ticks: u64, out_dir: Option<PathBuf>) -> Result<BenchReport> {
    let mut e = Engine::new(scenario.clone(), EngineOptions { out_dir: out_dir.clone(), ..Default::default() })?;
    let r = e.run(None)?;
    let run = e.performance();

    let mut quiet = scenario;
    quiet.demands.clear();
    quiet.anomalies.clear();
    let mut s = Engine::new(quiet, EngineOptions { out_dir: out_dir.map(|d| d.join("saturation")), ..Default::default() })?;
    let (lo, hi) = s.net.nodes().iter().fold((Vector2::repeat(f64::INFINITY), Vector2::repeat(f64::NEG_INFINITY)), |(lo, hi), n| {
        let h = n.position.horizontal();
        (lo.inf(&h), hi.sup(&h))
    });
    let alt = s.net.nodes().iter().map(|n| n.position.up).fold(0.0, f64::max).max(30.0);
    let ids: Vec<String> = s.pool.keys().cloned().collect();
    let rows = (ids.len() as f64).sqrt().ceil().max(1.0) as usize;
    let span = hi - lo;
    for (k, id) in ids.iter().enumerate() {
        let (row, col) = (k / rows, k % rows);
        let north = lo.y + span.y * (row as f64 + 0.5) / rows as f64;
        let east = lo.x + span.x * (col as f64 + 0.5) / (2 * rows) as f64;
        // alternate rows fly opposite ways at different heights
        let (dir, up) = if row % 2 == 0 { (1.0, alt - 10.0) } else { (-1.0, alt + 10.0) };
        let start = LocalPoint::new(if dir > 0.0 { east } else { hi.x - (east - lo.x) }, north, up);
        let goal = LocalPoint::new(start.east + dir * 1e4, north, up);
        let mut sp = ControlSetpoint::waypoint(goal, if dir > 0.0 { 0.0 } else { std::f64::consts::PI });
        sp.speed_limit = Some(s.scenario.traffic.cruise_speed);
        s.launch(id, start, sp)?;
    }
    let t0 = Instant::now();
    for _ in 0..saturation_ticks {
        s.step()?;
    }
    s.wall = t0.elapsed().as_secs_f64();
    s.finish("bench")?;
    Ok(BenchReport {
        scenario: r.scenario.clone(),
        demands: r.demands,
        completed: r.completed,
        collisions: r.collisions.len(),
        run,
        saturation: s.performance(),
    })
}

/// Convenience: load, run to completion, return the report.
pub fn run_scenario(scenario: Scenario, out_dir: Option<PathBuf>, until: Option<u64>) -> Result<RunReport> {
    let mut e = Engine::new(scenario, EngineOptions { out_dir, ..Default::default() })?;
    e.run(until)
}
