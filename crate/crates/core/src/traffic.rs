//! Flight-plan lifecycle, in-flight guidance and separation.
//!
//! The traffic manager owns every plan from demand ingest to a terminal
//! state. In flight it steers each UAV along offset lanes of its airways,
//! gates node entry through exclusive reservations and scales speeds to keep
//! same-lane followers apart.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::sync::Arc;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::airway::{shortest_route, shortest_route_from_node, AirwayNetwork};
use crate::authority::{AirspaceState, ApprovalDecision, Verdict, TOPIC_AIRSPACE, TOPIC_DECISION, TOPIC_SUBMIT};
use crate::bus::{Envelope, Publication};
use crate::dynamics::ControlSetpoint;
use crate::error::{Result, SimError};
use crate::world::geometry::{segment_intersects_nfz, LocalPoint, NoFlyZone};

pub const TOPIC_PLAN_STATE: &str = "plan/state";
pub const TOPIC_CMD_PREFIX: &str = "uav/cmd";
pub const TOPIC_TELEMETRY_PREFIX: &str = "uav/telemetry";

pub fn cmd_topic(uav: &str) -> String {
    format!("{TOPIC_CMD_PREFIX}/{uav}")
}

pub fn telemetry_topic(uav: &str) -> String {
    format!("{TOPIC_TELEMETRY_PREFIX}/{uav}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlightDemand {
    pub id: String,
    pub origin: String,
    pub destination: String,
    /// Requested departure tick.
    pub departure: u64,
    #[serde(default)]
    pub payload: String,
}

impl FlightDemand {
    pub fn validate(&self, net: &AirwayNetwork) -> Result<()> {
        if self.id.is_empty() {
            return Err(SimError::validation("demand id must not be empty"));
        }
        if self.origin == self.destination {
            return Err(SimError::validation(format!("demand {}: origin equals destination", self.id)));
        }
        net.airport(&self.origin)?;
        net.airport(&self.destination)?;
        Ok(())
    }

    pub fn plan_id(&self) -> String {
        format!("P-{}", self.id)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanState {
    Draft,
    Submitted,
    Approved,
    TakingOff,
    Enroute,
    Landing,
    Completed,
    Rejected,
    Aborted,
}

impl PlanState {
    pub fn is_terminal(self) -> bool {
        matches!(self, PlanState::Completed | PlanState::Rejected | PlanState::Aborted)
    }

    pub fn is_in_flight(self) -> bool {
        matches!(self, PlanState::TakingOff | PlanState::Enroute | PlanState::Landing)
    }

    /// The legal-transition relation. Self-loops record a re-plan.
    pub fn can_transition(self, to: PlanState) -> bool {
        use PlanState::*;
        if self.is_terminal() {
            return false;
        }
        matches!(
            (self, to),
            (_, Aborted)
                | (Draft, Submitted)
                | (Submitted, Approved)
                | (Submitted, Rejected)
                | (Approved, TakingOff)
                | (TakingOff, Enroute)
                | (Enroute, Landing)
                | (Landing, Completed)
                | (Submitted, Submitted)
                | (Approved, Approved)
                | (TakingOff, TakingOff)
                | (Enroute, Enroute)
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DemandOutcome {
    Completed,
    Aborted,
}

/// Payload of `plan/submit`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanRequest {
    pub plan_id: String,
    pub demand_id: String,
    pub uav: String,
    pub origin: String,
    pub destination: String,
    pub route: Vec<String>,
    pub requested_departure: u64,
}

/// Payload of `plan/state`: one lifecycle transition.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanStateEvent {
    pub plan_id: String,
    pub demand_id: String,
    pub uav: String,
    pub from: PlanState,
    pub to: PlanState,
    pub tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Present when the route changed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub route: Option<Vec<String>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlightPlan {
    pub plan_id: String,
    pub demand_id: String,
    pub uav: String,
    pub origin: String,
    pub destination: String,
    /// Node ids from the origin's linked node to the destination's.
    pub route: Vec<String>,
    pub state: PlanState,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Index of the leg being flown; leg 0 joins the origin column to the first node.
    pub progress: usize,
    pub requested_departure: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_departure: Option<u64>,
}

impl FlightPlan {
    pub fn request(&self) -> PlanRequest {
        PlanRequest {
            plan_id: self.plan_id.clone(),
            demand_id: self.demand_id.clone(),
            uav: self.uav.clone(),
            origin: self.origin.clone(),
            destination: self.destination.clone(),
            route: self.route.clone(),
            requested_departure: self.requested_departure,
        }
    }

    /// Applies a legal transition and returns the event to publish.
    pub fn transition(&mut self, to: PlanState, tick: u64, reason: Option<String>) -> Result<PlanStateEvent> {
        if !self.state.can_transition(to) {
            return Err(SimError::Scheduling(format!("plan {}: illegal transition {:?} -> {:?}", self.plan_id, self.state, to)));
        }
        let ev = PlanStateEvent {
            plan_id: self.plan_id.clone(),
            demand_id: self.demand_id.clone(),
            uav: self.uav.clone(),
            from: self.state,
            to,
            tick,
            reason: reason.clone(),
            route: None,
        };
        self.state = to;
        if reason.is_some() {
            self.reason = reason;
        }
        Ok(ev)
    }

    pub fn outcome(&self) -> Option<DemandOutcome> {
        match self.state {
            PlanState::Completed => Some(DemandOutcome::Completed),
            PlanState::Rejected | PlanState::Aborted => Some(DemandOutcome::Aborted),
            _ => None,
        }
    }

    /// Pad, column top, route nodes, destination column top and pad.
    pub fn waypoints(&self, net: &AirwayNetwork) -> Result<Vec<LocalPoint>> {
        net.flight_path(&self.origin, &self.destination, &self.route)
    }
}

/// Builds a draft plan over open airways. No route gives an aborted plan
/// with reason `unreachable`.
pub fn plan_mission(demand: &FlightDemand, net: &AirwayNetwork, closures: &HashSet<String>, uav: &str) -> Result<FlightPlan> {
    demand.validate(net)?;
    let route = shortest_route(net, &demand.origin, &demand.destination, closures)?;
    let (state, reason, nodes) = match route {
        Some(r) => (PlanState::Draft, None, r.nodes),
        None => (PlanState::Aborted, Some("unreachable".to_owned()), Vec::new()),
    };
    Ok(FlightPlan {
        plan_id: demand.plan_id(),
        demand_id: demand.id.clone(),
        uav: uav.to_owned(),
        origin: demand.origin.clone(),
        destination: demand.destination.clone(),
        route: nodes,
        state,
        reason,
        progress: 0,
        requested_departure: demand.departure,
        assigned_departure: None,
    })
}

/// Where a UAV is along the lane it flies.
#[derive(Debug, Clone, PartialEq)]
pub struct LanePosition {
    pub uav: String,
    /// Identifies a directed lane; UAVs compare only within one lane.
    pub lane: String,
    /// Distance along the lane, metres.
    pub progress: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SeparationOrder {
    /// Speed scale in `[0, 1]`.
    pub scale: f64,
    /// Progress of the leader ahead on the same lane, if any.
    pub leader_progress: Option<f64>,
}

/// Per-lane follower speed scaling. Within each lane UAVs are ordered by
/// progress (ties by uav id); a follower closer than `s_min` to its leader
/// gets `clamp((gap − s_stop)/(s_min − s_stop), 0, 1)` with `s_stop = s_min/2`.
pub fn enforce_separation(positions: &[LanePosition], s_min: f64) -> BTreeMap<String, SeparationOrder> {
    let s_stop = s_min / 2.0;
    let mut lanes: BTreeMap<&str, Vec<&LanePosition>> = BTreeMap::new();
    for p in positions {
        lanes.entry(p.lane.as_str()).or_default().push(p);
    }
    let mut out = BTreeMap::new();
    for (_, mut v) in lanes {
        // leader first
        v.sort_by(|a, b| b.progress.total_cmp(&a.progress).then_with(|| a.uav.cmp(&b.uav)));
        for (i, p) in v.iter().enumerate() {
            let order = if i == 0 {
                SeparationOrder { scale: 1.0, leader_progress: None }
            } else {
                let leader = v[i - 1].progress;
                let gap = leader - p.progress;
                SeparationOrder { scale: ((gap - s_stop) / (s_min - s_stop)).clamp(0.0, 1.0), leader_progress: Some(leader) }
            };
            out.insert(p.uav.clone(), order);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrafficParams {
    pub s_min: f64,
    pub node_radius: f64,
    /// Extra hold-back beyond `node_radius` while a node is unavailable.
    pub gate_margin: f64,
    /// Distance to a node at which its reservation is requested.
    pub acquire_distance: f64,
    /// Lateral offset of the travel lane to the right of an airway centerline.
    pub lane_offset: f64,
    pub cruise_speed: f64,
    /// Carrot distance ahead along the lane.
    pub lookahead: f64,
    /// Distance to a node centre at which the next leg starts.
    pub switch_radius: f64,
    /// Horizontal speed cap in the climb and descent columns.
    pub column_speed: f64,
    pub touchdown_altitude: f64,
    pub touchdown_speed: f64,
    /// Seconds without 2 m of movement before an in-flight plan aborts.
    pub stall_timeout_s: f64,
    /// Seconds to wait for a decision before resubmitting.
    pub decision_timeout_s: f64,
    /// Seconds a submitted or approved plan may wait before it is abandoned.
    pub ground_timeout_s: f64,
}

impl Default for TrafficParams {
    fn default() -> Self {
        Self {
            s_min: 15.0,
            node_radius: 8.0,
            gate_margin: 15.0,
            acquire_distance: 40.0,
            lane_offset: 6.0,
            cruise_speed: 10.0,
            lookahead: 12.0,
            switch_radius: 4.0,
            column_speed: 2.0,
            touchdown_altitude: 0.1,
            touchdown_speed: 0.2,
            stall_timeout_s: 300.0,
            decision_timeout_s: 10.0,
            ground_timeout_s: 3600.0,
        }
    }
}

impl TrafficParams {
    pub fn validate(&self) -> Result<()> {
        let pos = [
            ("s_min", self.s_min),
            ("node_radius", self.node_radius),
            ("acquire_distance", self.acquire_distance),
            ("cruise_speed", self.cruise_speed),
            ("lookahead", self.lookahead),
            ("switch_radius", self.switch_radius),
            ("column_speed", self.column_speed),
            ("stall_timeout_s", self.stall_timeout_s),
            ("decision_timeout_s", self.decision_timeout_s),
            ("ground_timeout_s", self.ground_timeout_s),
        ];
        for (k, v) in pos {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::validation(format!("traffic {k} must be positive")));
            }
        }
        if !(self.gate_margin >= 0.0 && self.lane_offset >= 0.0) {
            return Err(SimError::validation("traffic gate_margin and lane_offset must be non-negative"));
        }
        if self.acquire_distance <= self.node_radius + self.gate_margin {
            return Err(SimError::validation("traffic acquire_distance must exceed the gate distance"));
        }
        Ok(())
    }

    pub fn gate_distance(&self) -> f64 {
        self.node_radius + self.gate_margin
    }
}

/// Payload of `uav/cmd/<id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UavCommand {
    pub plan_id: String,
    pub state: PlanState,
    pub setpoint: ControlSetpoint,
    /// Airway the UAV is assigned to right now.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airway: Option<String>,
}

/// Payload of `uav/telemetry/<id>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryFrame {
    pub tick: u64,
    pub uav: String,
    pub position: LocalPoint,
    pub velocity: [f64; 3],
    /// Body-to-world quaternion `[w, x, y, z]`.
    pub attitude: [f64; 4],
    pub motor_speed: [f64; 4],
    pub health: [f64; 4],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub plan_state: Option<PlanState>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub airway: Option<String>,
}

impl TelemetryFrame {
    pub fn speed(&self) -> f64 {
        Vector3::from(self.velocity).norm()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Leg {
    from_id: String,
    to_id: String,
    from: Vector3<f64>,
    to: Vector3<f64>,
    /// Node the leg ends at; `None` for the final leg into the destination column.
    node: Option<String>,
    airway: Option<String>,
    offset: f64,
}

impl Leg {
    fn lane_key(&self) -> String {
        format!("{}>{}", self.from_id, self.to_id)
    }

    /// Lane endpoints, shifted right of travel by the offset.
    fn lane(&self) -> (Vector3<f64>, Vector3<f64>) {
        let d = self.to - self.from;
        let h = Vector3::new(d.x, d.y, 0.0);
        if self.offset == 0.0 || h.norm() < 1e-9 {
            return (self.from, self.to);
        }
        let h = h.normalize();
        let right = Vector3::new(h.y, -h.x, 0.0) * self.offset;
        (self.from + right, self.to + right)
    }

    fn heading(&self) -> Option<f64> {
        let d = self.to - self.from;
        (d.x.hypot(d.y) > 1e-6).then(|| d.y.atan2(d.x))
    }
}

/// Extra standoff behind the stop distance for a queued follower's target;
/// covers the position loop's overshoot when it settles.
const QUEUE_MARGIN: f64 = 3.5;

fn col_id(airport: &str) -> String {
    format!("col:{airport}")
}

/// Legs from the origin column top along `route` to the destination column top.
fn build_legs(net: &AirwayNetwork, origin: &str, destination: &str, route: &[String], lane_offset: f64) -> Result<Vec<Leg>> {
    let c0 = net.column_top(origin)?.vec();
    let c1 = net.column_top(destination)?.vec();
    let mut legs = Vec::with_capacity(route.len() + 1);
    let first = route.first().ok_or_else(|| SimError::validation("empty route"))?;
    legs.push(Leg {
        from_id: col_id(origin),
        to_id: first.clone(),
        from: c0,
        to: net.node(first)?.position.vec(),
        node: Some(first.clone()),
        airway: None,
        offset: 0.0,
    });
    let airways = net.route_airways(route)?;
    for (w, pair) in airways.into_iter().zip(route.windows(2)) {
        legs.push(Leg {
            from_id: pair[0].clone(),
            to_id: pair[1].clone(),
            from: net.node(&pair[0])?.position.vec(),
            to: net.node(&pair[1])?.position.vec(),
            node: Some(pair[1].clone()),
            airway: Some(w),
            offset: lane_offset,
        });
    }
    let last = route.last().expect("non-empty");
    legs.push(Leg {
        from_id: last.clone(),
        to_id: col_id(destination),
        from: net.node(last)?.position.vec(),
        to: c1,
        node: None,
        airway: None,
        offset: 0.0,
    });
    Ok(legs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Phase {
    Climb,
    Leg(usize),
    Descend,
}

#[derive(Debug, Clone)]
struct Flight {
    plan_id: String,
    phase: Phase,
    legs: Vec<Leg>,
    pad: Vector3<f64>,
    dest_pad: Vector3<f64>,
    climb_top: Vector3<f64>,
    /// Reserved node and the index of the leg ending there.
    node: Option<(String, usize)>,
    columns: BTreeSet<String>,
    commits: BTreeSet<String>,
    /// Best (phase, distance to go) so far and when it was reached; a
    /// flight that stops closing on its target for too long has stalled.
    best: (usize, f64),
    anchor_tick: u64,
    yaw: f64,
}

impl Flight {
    fn airway(&self) -> Option<String> {
        match self.phase {
            Phase::Leg(j) => self.legs[j].airway.clone(),
            _ => None,
        }
    }
}

/// Exclusive node and column locks plus airway commitments.
#[derive(Debug, Clone, Default)]
struct Reservations {
    nodes: HashMap<String, String>,
    columns: HashMap<String, String>,
    committed: BTreeMap<String, BTreeSet<String>>,
}

impl Reservations {
    fn committed_others(&self, airway: &str, uav: &str) -> usize {
        self.committed.get(airway).map_or(0, |s| s.iter().filter(|u| *u != uav).count())
    }

    fn commit(&mut self, airway: &str, uav: &str) {
        self.committed.entry(airway.to_owned()).or_default().insert(uav.to_owned());
    }

    fn uncommit(&mut self, airway: &str, uav: &str) {
        if let Some(s) = self.committed.get_mut(airway) {
            s.remove(uav);
            if s.is_empty() {
                self.committed.remove(airway);
            }
        }
    }

    fn free_or_mine(map: &HashMap<String, String>, key: &str, uav: &str) -> bool {
        map.get(key).is_none_or(|h| h == uav)
    }

    fn release_all(&mut self, uav: &str, fl: &mut Flight) {
        if let Some((n, _)) = fl.node.take() {
            if self.nodes.get(&n).is_some_and(|h| h == uav) {
                self.nodes.remove(&n);
            }
        }
        for c in std::mem::take(&mut fl.columns) {
            if self.columns.get(&c).is_some_and(|h| h == uav) {
                self.columns.remove(&c);
            }
        }
        for w in std::mem::take(&mut fl.commits) {
            self.uncommit(&w, uav);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Tracked {
    position: Vector3<f64>,
    velocity: Vector3<f64>,
}

/// Built-in traffic management subsystem.
#[derive(Debug, Clone)]
pub struct TrafficManager {
    net: Arc<AirwayNetwork>,
    params: TrafficParams,
    ticks_per_second: f64,
    /// uav id → home airport.
    fleet: BTreeMap<String, String>,
    /// Demands not yet planned, keyed by (departure, id).
    pending: BTreeMap<(u64, String), FlightDemand>,
    plans: BTreeMap<String, FlightPlan>,
    /// In-flight state keyed by uav id.
    flights: BTreeMap<String, Flight>,
    telemetry: HashMap<String, Tracked>,
    closed: BTreeSet<String>,
    zones: Vec<NoFlyZone>,
    ground_stops: BTreeSet<String>,
    res: Reservations,
    /// plan id → tick of the last submission.
    submitted_at: BTreeMap<String, u64>,
    /// plan id → tick a deferred plan may resubmit.
    resubmit_at: BTreeMap<String, u64>,
    /// plan id → tick the plan was created.
    created_at: BTreeMap<String, u64>,
    airspace_dirty: bool,
}

impl TrafficManager {
    pub fn new(net: Arc<AirwayNetwork>, fleet: BTreeMap<String, String>, params: TrafficParams, ticks_per_second: f64) -> Self {
        Self {
            net,
            params,
            ticks_per_second,
            fleet,
            pending: BTreeMap::new(),
            plans: BTreeMap::new(),
            flights: BTreeMap::new(),
            telemetry: HashMap::new(),
            closed: BTreeSet::new(),
            zones: Vec::new(),
            ground_stops: BTreeSet::new(),
            res: Reservations::default(),
            submitted_at: BTreeMap::new(),
            resubmit_at: BTreeMap::new(),
            created_at: BTreeMap::new(),
            airspace_dirty: false,
        }
    }

    pub fn params(&self) -> &TrafficParams {
        &self.params
    }

    /// Queues a demand. It is planned once its departure tick is reached.
    pub fn add_demand(&mut self, demand: FlightDemand) -> Result<()> {
        demand.validate(&self.net)?;
        let pid = demand.plan_id();
        if self.plans.contains_key(&pid) || self.pending.values().any(|d| d.id == demand.id) {
            return Err(SimError::validation(format!("duplicate demand id {}", demand.id)));
        }
        self.pending.insert((demand.departure, demand.id.clone()), demand);
        Ok(())
    }

    pub fn plans(&self) -> &BTreeMap<String, FlightPlan> {
        &self.plans
    }

    pub fn plan(&self, id: &str) -> Option<&FlightPlan> {
        self.plans.get(id)
    }

    pub fn pending_demands(&self) -> usize {
        self.pending.len()
    }

    /// True once every demand has reached a terminal plan state.
    pub fn all_terminal(&self) -> bool {
        self.pending.is_empty() && self.plans.values().all(|p| p.state.is_terminal())
    }

    fn ticks(&self, seconds: f64) -> u64 {
        (seconds * self.ticks_per_second).ceil() as u64
    }

    fn busy_uavs(&self) -> HashSet<&str> {
        self.plans.values().filter(|p| !p.state.is_terminal()).map(|p| p.uav.as_str()).collect()
    }

    /// Airways unusable for routing at `now`: closures plus those crossing an active zone.
    fn blocked_airways(&self, now: u64) -> HashSet<String> {
        let mut out: HashSet<String> = self.closed.iter().cloned().collect();
        for (i, w) in self.net.airways().iter().enumerate() {
            if let Some((a, b)) = self.net.centerline(i) {
                let (a, b) = (LocalPoint::from_vec(&a), LocalPoint::from_vec(&b));
                if self.zones.iter().any(|z| segment_intersects_nfz(&a, &b, z, now)) {
                    out.insert(w.id.clone());
                }
            }
        }
        out
    }

    fn pos_of(&self, uav: &str, fallback: Vector3<f64>) -> Tracked {
        self.telemetry.get(uav).copied().unwrap_or(Tracked { position: fallback, velocity: Vector3::zeros() })
    }

    fn emit(out: &mut Vec<Publication>, ev: PlanStateEvent) {
        out.push(Publication::new(TOPIC_PLAN_STATE, json!(ev)));
    }

    fn abort(&mut self, plan_id: &str, reason: &str, now: u64, out: &mut Vec<Publication>) {
        let Some(plan) = self.plans.get_mut(plan_id) else { return };
        if plan.state.is_terminal() {
            return;
        }
        if let Ok(ev) = plan.transition(PlanState::Aborted, now, Some(reason.to_owned())) {
            Self::emit(out, ev);
        }
        let uav = plan.uav.clone();
        if let Some(mut fl) = self.flights.remove(&uav) {
            self.res.release_all(&uav, &mut fl);
        }
        self.submitted_at.remove(plan_id);
        self.resubmit_at.remove(plan_id);
    }

    fn ingest(&mut self, now: u64, inbox: &[Envelope], out: &mut Vec<Publication>) {
        let mut decisions: BTreeMap<String, ApprovalDecision> = BTreeMap::new();
        for env in inbox {
            let topic = env.topic.as_str();
            if topic == TOPIC_DECISION {
                if let Ok(d) = serde_json::from_value::<ApprovalDecision>(env.payload.clone()) {
                    decisions.insert(d.plan_id.clone(), d);
                }
            } else if topic == TOPIC_AIRSPACE {
                if let Ok(s) = serde_json::from_value::<AirspaceState>(env.payload.clone()) {
                    self.closed = s.closed_airways.into_iter().collect();
                    self.zones = s.zones;
                    self.ground_stops = s.ground_stops.into_iter().collect();
                    self.airspace_dirty = true;
                }
            } else if let Some(uav) = topic.strip_prefix(TOPIC_TELEMETRY_PREFIX).and_then(|r| r.strip_prefix('/')) {
                if let Ok(f) = serde_json::from_value::<TelemetryFrame>(env.payload.clone()) {
                    self.telemetry.insert(uav.to_owned(), Tracked { position: f.position.vec(), velocity: Vector3::from(f.velocity) });
                }
            }
        }
        for (id, d) in decisions {
            let Some(plan) = self.plans.get_mut(&id) else { continue };
            if plan.state != PlanState::Submitted {
                continue;
            }
            match d.verdict {
                Verdict::Approved => {
                    plan.assigned_departure = Some(d.assigned_departure.unwrap_or(now));
                    if let Ok(ev) = plan.transition(PlanState::Approved, now, None) {
                        Self::emit(out, ev);
                    }
                    self.submitted_at.remove(&id);
                    self.resubmit_at.remove(&id);
                }
                Verdict::Rejected { reason } => {
                    if let Ok(ev) = plan.transition(PlanState::Rejected, now, Some(reason)) {
                        Self::emit(out, ev);
                    }
                    self.submitted_at.remove(&id);
                    self.resubmit_at.remove(&id);
                }
                Verdict::Deferred { until } => {
                    self.resubmit_at.insert(id.clone(), until.max(now + 1));
                }
            }
        }
    }

    /// Re-plans every plan whose remaining route uses a blocked airway.
    fn replan(&mut self, now: u64, out: &mut Vec<Publication>) {
        let blocked = self.blocked_airways(now);
        let ids: Vec<String> = self.plans.iter().filter(|(_, p)| !p.state.is_terminal()).map(|(k, _)| k.clone()).collect();
        for id in ids {
            let plan = &self.plans[&id];
            let uav = plan.uav.clone();
            match plan.state {
                PlanState::Draft | PlanState::Submitted | PlanState::Approved => {
                    let airways = self.net.route_airways(&plan.route).unwrap_or_default();
                    if !airways.iter().any(|w| blocked.contains(w)) {
                        continue;
                    }
                    match shortest_route(&self.net, &plan.origin, &plan.destination, &blocked) {
                        Ok(Some(r)) => {
                            let p = self.plans.get_mut(&id).expect("plan");
                            p.route = r.nodes.clone();
                            let state = p.state;
                            if let Ok(mut ev) = p.transition(state, now, Some("replan".into())) {
                                ev.route = Some(r.nodes);
                                Self::emit(out, ev);
                            }
                            if state == PlanState::Submitted {
                                // the authority must judge the new route
                                out.push(Publication::new(TOPIC_SUBMIT, json!(p.request())));
                                self.submitted_at.insert(id.clone(), now);
                                self.resubmit_at.remove(&id);
                            }
                        }
                        _ => self.abort(&id, "unreachable", now, out),
                    }
                }
                PlanState::TakingOff | PlanState::Enroute => {
                    let Some(fl) = self.flights.get(&uav) else { continue };
                    let j = match fl.phase {
                        Phase::Climb => 0,
                        Phase::Leg(j) => j,
                        Phase::Descend => continue,
                    };
                    // leg j ends at route[j]; the airways after it are still avoidable
                    if j >= plan.route.len() {
                        continue;
                    }
                    let remaining = self.net.route_airways(&plan.route[j..]).unwrap_or_default();
                    if !remaining.iter().any(|w| blocked.contains(w)) {
                        continue;
                    }
                    let from = plan.route[j].clone();
                    let dest_node = self.net.airport(&plan.destination).map(|a| a.linked_node.clone());
                    let new = match dest_node {
                        Ok(dn) => shortest_route_from_node(&self.net, &from, &dn, &blocked).ok().flatten(),
                        Err(_) => None,
                    };
                    let Some(r) = new else {
                        self.abort(&id, "unreachable", now, out);
                        continue;
                    };
                    let mut nodes: Vec<String> = plan.route[..j].to_vec();
                    nodes.extend(r.nodes);
                    let Ok(legs) = build_legs(&self.net, &plan.origin, &plan.destination, &nodes, self.params.lane_offset) else {
                        self.abort(&id, "unreachable", now, out);
                        continue;
                    };
                    let pos = self.pos_of(&uav, Vector3::zeros()).position;
                    let mut fl = self.flights.remove(&uav).expect("flight");
                    // drop commitments beyond the current leg
                    let current = fl.legs.get(j).and_then(|l| l.airway.clone());
                    for w in fl.commits.clone() {
                        if Some(&w) != current.as_ref() {
                            self.res.uncommit(&w, &uav);
                            fl.commits.remove(&w);
                        }
                    }
                    if let Some((n, li)) = fl.node.clone() {
                        if li == j {
                            let near = (pos - legs[j].to).norm() <= self.params.node_radius + 2.0;
                            if near {
                                // too deep in the node to back out: keep it and take the next leg
                                if legs[j + 1].airway.is_none() {
                                    self.res.columns.insert(plan.destination.clone(), uav.clone());
                                    fl.columns.insert(plan.destination.clone());
                                }
                            } else {
                                self.res.nodes.remove(&n);
                                fl.node = None;
                            }
                        }
                    }
                    // the detour is committed whole, even past capacity: backing
                    // out mid-air is not an option
                    for w in legs[j + 1..].iter().filter_map(|l| l.airway.clone()) {
                        self.res.commit(&w, &uav);
                        fl.commits.insert(w);
                    }
                    fl.legs = legs;
                    fl.best = (0, f64::INFINITY);
                    self.flights.insert(uav.clone(), fl);
                    let p = self.plans.get_mut(&id).expect("plan");
                    p.route = nodes.clone();
                    let state = p.state;
                    if let Ok(mut ev) = p.transition(state, now, Some("replan".into())) {
                        ev.route = Some(nodes);
                        Self::emit(out, ev);
                    }
                }
                _ => {}
            }
        }
    }

    fn create_plans(&mut self, now: u64, out: &mut Vec<Publication>) {
        let due: Vec<(u64, String)> = self.pending.range(..(now + 1, String::new())).map(|(k, _)| k.clone()).collect();
        let blocked = self.blocked_airways(now);
        for key in due {
            let demand = &self.pending[&key];
            let busy = self.busy_uavs();
            let Some(uav) = self.fleet.iter().find(|(u, home)| **home == demand.origin && !busy.contains(u.as_str())).map(|(u, _)| u.clone())
            else {
                continue;
            };
            let demand = self.pending.remove(&key).expect("pending");
            let mut plan = match plan_mission(&demand, &self.net, &blocked, &uav) {
                Ok(p) => p,
                Err(e) => {
                    // validated at ingest, so only lookups can fail here
                    let mut p = FlightPlan {
                        plan_id: demand.plan_id(),
                        demand_id: demand.id.clone(),
                        uav,
                        origin: demand.origin.clone(),
                        destination: demand.destination.clone(),
                        route: vec![],
                        state: PlanState::Draft,
                        reason: None,
                        progress: 0,
                        requested_departure: demand.departure,
                        assigned_departure: None,
                    };
                    if let Ok(ev) = p.transition(PlanState::Aborted, now, Some(e.to_string())) {
                        Self::emit(out, ev);
                    }
                    self.plans.insert(p.plan_id.clone(), p);
                    continue;
                }
            };
            let id = plan.plan_id.clone();
            self.created_at.insert(id.clone(), now);
            if plan.state == PlanState::Aborted {
                Self::emit(
                    out,
                    PlanStateEvent {
                        plan_id: id.clone(),
                        demand_id: plan.demand_id.clone(),
                        uav: plan.uav.clone(),
                        from: PlanState::Draft,
                        to: PlanState::Aborted,
                        tick: now,
                        reason: plan.reason.clone(),
                        route: None,
                    },
                );
                self.plans.insert(id, plan);
                continue;
            }
            plan.requested_departure = plan.requested_departure.max(now);
            if let Ok(mut ev) = plan.transition(PlanState::Submitted, now, None) {
                ev.route = Some(plan.route.clone());
                Self::emit(out, ev);
            }
            out.push(Publication::new(TOPIC_SUBMIT, json!(plan.request())));
            self.submitted_at.insert(id.clone(), now);
            self.plans.insert(id, plan);
        }
    }

    fn resubmissions(&mut self, now: u64, out: &mut Vec<Publication>) {
        let timeout = self.ticks(self.params.decision_timeout_s);
        let ground_timeout = self.ticks(self.params.ground_timeout_s);
        let ids: Vec<String> = self.plans.iter().filter(|(_, p)| p.state == PlanState::Submitted).map(|(k, _)| k.clone()).collect();
        for id in ids {
            if self.created_at.get(&id).is_some_and(|&c| now.saturating_sub(c) > ground_timeout) {
                self.abort(&id, "not approved in time", now, out);
                continue;
            }
            let due = match self.resubmit_at.get(&id) {
                Some(&t) => now >= t,
                None => self.submitted_at.get(&id).is_none_or(|&t| now >= t + timeout),
            };
            if due {
                let p = &self.plans[&id];
                out.push(Publication::new(TOPIC_SUBMIT, json!(p.request())));
                self.submitted_at.insert(id.clone(), now);
                self.resubmit_at.remove(&id);
            }
        }
    }

    fn departures(&mut self, now: u64, out: &mut Vec<Publication>) {
        let ids: Vec<String> = self
            .plans
            .iter()
            .filter(|(_, p)| p.state == PlanState::Approved && p.assigned_departure.is_some_and(|t| t <= now))
            .map(|(k, _)| k.clone())
            .collect();
        for id in ids {
            let p = &self.plans[&id];
            if self.ground_stops.contains(&p.origin) || self.res.columns.contains_key(&p.origin) {
                continue;
            }
            let legs = match build_legs(&self.net, &p.origin, &p.destination, &p.route, self.params.lane_offset) {
                Ok(l) => l,
                Err(_) => {
                    self.abort(&id, "invalid route", now, out);
                    continue;
                }
            };
            let (Ok(pad), Ok(dest_pad), Ok(top)) =
                (self.net.airport(&p.origin), self.net.airport(&p.destination), self.net.column_top(&p.origin))
            else {
                continue;
            };
            let (pad, dest_pad, top) = (pad.ground_position.vec(), dest_pad.ground_position.vec(), top.vec());
            let uav = p.uav.clone();
            // capacity for the whole route is taken at once, so nobody
            // airborne ever waits on capacity held by someone waiting on them
            let route_ways: BTreeSet<String> = legs.iter().filter_map(|l| l.airway.clone()).collect();
            let full = route_ways.iter().any(|w| {
                let cap = self.net.airway(w).map(|a| a.capacity as usize).unwrap_or(usize::MAX);
                self.res.committed_others(w, &uav) >= cap
            });
            if full {
                continue;
            }
            let yaw = legs[0].heading().unwrap_or(0.0);
            let mut fl = Flight {
                plan_id: id.clone(),
                phase: Phase::Climb,
                legs,
                pad,
                dest_pad,
                climb_top: top,
                node: None,
                columns: BTreeSet::new(),
                commits: BTreeSet::new(),
                best: (0, f64::INFINITY),
                anchor_tick: now,
                yaw,
            };
            self.res.columns.insert(p.origin.clone(), uav.clone());
            fl.columns.insert(p.origin.clone());
            for w in route_ways {
                self.res.commit(&w, &uav);
                fl.commits.insert(w);
            }
            // a fresh takeoff starts on the pad whatever the last telemetry said
            self.telemetry.insert(uav.clone(), Tracked { position: pad, velocity: Vector3::zeros() });
            self.flights.insert(uav.clone(), fl);
            let p = self.plans.get_mut(&id).expect("plan");
            p.progress = 0;
            if let Ok(ev) = p.transition(PlanState::TakingOff, now, None) {
                Self::emit(out, ev);
            }
        }
    }

    /// Tries to reserve the node ending leg `j` plus what the next leg needs.
    fn try_acquire(&mut self, uav: &str, fl: &mut Flight, j: usize, destination: &str) -> bool {
        let Some(n) = fl.legs[j].node.clone() else { return false };
        if !Reservations::free_or_mine(&self.res.nodes, &n, uav) {
            return false;
        }
        // first come first served per lane: a follower that took the node
        // could never get past the leader waiting at the gate
        if let Some(me) = self.lane_position(uav, fl) {
            let ahead = self
                .flights
                .iter()
                .filter(|(u, _)| u.as_str() != uav)
                .filter_map(|(u, f)| self.lane_position(u, f))
                .any(|o| o.lane == me.lane && (o.progress, std::cmp::Reverse(&o.uav)) > (me.progress, std::cmp::Reverse(&me.uav)));
            if ahead {
                return false;
            }
        }
        let next = &fl.legs[j + 1];
        if let Some(w) = &next.airway {
            let cap = self.net.airway(w).map(|a| a.capacity as usize).unwrap_or(usize::MAX);
            if !fl.commits.contains(w) && self.res.committed_others(w, uav) >= cap {
                return false;
            }
        } else if !Reservations::free_or_mine(&self.res.columns, destination, uav) {
            return false;
        }
        self.res.nodes.insert(n.clone(), uav.to_owned());
        fl.node = Some((n, j));
        if let Some(w) = next.airway.clone() {
            self.res.commit(&w, uav);
            fl.commits.insert(w);
        } else {
            self.res.columns.insert(destination.to_owned(), uav.to_owned());
            fl.columns.insert(destination.to_owned());
        }
        true
    }

    /// Phase bookkeeping for one flight: reservations, leg switches and
    /// lifecycle transitions. Returns false when the flight ended.
    fn advance_lifecycle(&mut self, uav: &str, now: u64, out: &mut Vec<Publication>) -> bool {
        let Some(mut fl) = self.flights.remove(uav) else { return false };
        let plan_id = fl.plan_id.clone();
        let (origin, destination) = {
            let p = &self.plans[&plan_id];
            (p.origin.clone(), p.destination.clone())
        };
        let t = self.pos_of(uav, fl.pad);
        let pos = t.position;
        let prm = self.params.clone();

        let togo = match fl.phase {
            Phase::Climb => (0, (pos - fl.climb_top).norm()),
            Phase::Leg(j) => (j + 1, (pos - fl.legs[j].to).norm()),
            Phase::Descend => (fl.legs.len() + 1, (pos - fl.dest_pad).norm()),
        };
        if togo.0 > fl.best.0 || togo.1 < fl.best.1 - 2.0 {
            fl.best = togo;
            fl.anchor_tick = now;
        } else if now.saturating_sub(fl.anchor_tick) > self.ticks(prm.stall_timeout_s) {
            self.flights.insert(uav.to_owned(), fl);
            self.abort(&plan_id, "stalled", now, out);
            return false;
        }

        let cur = match fl.phase {
            Phase::Leg(j) => Some(j),
            _ => None,
        };
        if let (Some((n, li)), Some(j)) = (fl.node.clone(), cur) {
            if j > li && (pos - fl.legs[li].to).norm() > prm.node_radius {
                if self.res.nodes.get(&n).is_some_and(|h| h == uav) {
                    self.res.nodes.remove(&n);
                }
                fl.node = None;
            }
        }
        if fl.columns.contains(&origin) && cur.is_some_and(|j| j >= 1) && (pos - fl.legs[0].to).norm() > prm.node_radius {
            self.res.columns.remove(&origin);
            fl.columns.remove(&origin);
        }

        let mut events = Vec::new();
        match fl.phase {
            Phase::Climb => {
                let d = pos - fl.climb_top;
                if d.x.hypot(d.y) < 1.5 && d.z >= -1.0 {
                    fl.phase = Phase::Leg(0);
                    events.push((PlanState::Enroute, None));
                }
            }
            Phase::Leg(_) => {}
            Phase::Descend => {
                let ground = self.net.airport(&destination).map(|a| a.ground_position.up).unwrap_or(0.0);
                let h = pos - fl.dest_pad;
                if pos.z - ground <= prm.touchdown_altitude && t.velocity.norm() <= prm.touchdown_speed && h.x.hypot(h.y) < 2.0 {
                    events.push((PlanState::Completed, None));
                }
            }
        }
        while let Phase::Leg(j) = fl.phase {
            let leg = &fl.legs[j];
            if let Some(n) = leg.node.clone() {
                let d = (pos - leg.to).norm();
                let mut holds = fl.node.as_ref().is_some_and(|(h, li)| *h == n && *li == j);
                if !holds && d <= prm.acquire_distance {
                    holds = self.try_acquire(uav, &mut fl, j, &destination);
                }
                if holds && d < prm.switch_radius {
                    if let Some(w) = fl.legs[j].airway.clone() {
                        self.res.uncommit(&w, uav);
                        fl.commits.remove(&w);
                    }
                    fl.phase = Phase::Leg(j + 1);
                    continue;
                }
            } else {
                let d = pos - leg.to;
                if d.x.hypot(d.y) < 1.5 && d.z.abs() < 1.5 {
                    fl.phase = Phase::Descend;
                    events.push((PlanState::Landing, None));
                }
            }
            break;
        }
        if let Phase::Leg(j) = fl.phase {
            self.plans.get_mut(&plan_id).expect("plan").progress = j;
        }

        let mut alive = true;
        for (to, reason) in events {
            let p = self.plans.get_mut(&plan_id).expect("plan");
            if let Ok(ev) = p.transition(to, now, reason) {
                Self::emit(out, ev);
            }
            if to == PlanState::Completed {
                self.res.release_all(uav, &mut fl);
                alive = false;
            }
        }
        if alive {
            self.flights.insert(uav.to_owned(), fl);
        }
        alive
    }

    fn lane_position(&self, uav: &str, fl: &Flight) -> Option<LanePosition> {
        let Phase::Leg(j) = fl.phase else { return None };
        let leg = &fl.legs[j];
        let (a, b) = leg.lane();
        let len = (b - a).norm();
        if len < 1e-9 {
            return None;
        }
        let pos = self.pos_of(uav, fl.pad).position;
        Some(LanePosition { uav: uav.to_owned(), lane: leg.lane_key(), progress: (pos - a).dot(&((b - a) / len)) })
    }

    fn guidance(&self, uav: &str, fl: &Flight, sep: Option<&SeparationOrder>) -> ControlSetpoint {
        let prm = &self.params;
        let pos = self.pos_of(uav, fl.pad).position;
        match fl.phase {
            Phase::Climb => {
                let mut sp = ControlSetpoint::waypoint(LocalPoint::from_vec(&fl.climb_top), fl.yaw);
                sp.speed_limit = Some(prm.column_speed);
                sp
            }
            Phase::Descend => {
                let target = fl.dest_pad - Vector3::new(0.0, 0.0, 0.3);
                let mut sp = ControlSetpoint::waypoint(LocalPoint::from_vec(&target), fl.yaw);
                sp.speed_limit = Some(prm.column_speed);
                sp
            }
            Phase::Leg(j) => {
                let leg = &fl.legs[j];
                let (a, b) = leg.lane();
                let len = (b - a).norm().max(1e-9);
                let u = (b - a) / len;
                let s = (pos - a).dot(&u).max(0.0);
                let holds_end = match &leg.node {
                    Some(n) => fl.node.as_ref().is_some_and(|(h, li)| h == n && *li == j),
                    None => true,
                };
                let mut ts = s + prm.lookahead;
                let mut scale = 1.0;
                if let Some(o) = sep {
                    scale = o.scale;
                    if let Some(lead) = o.leader_progress {
                        // never aim past the stop distance behind the leader
                        ts = ts.min(lead - prm.s_min / 2.0 - QUEUE_MARGIN).max(0.0);
                    }
                }
                let target = if holds_end {
                    if ts >= len && sep.is_none_or(|o| o.leader_progress.is_none()) {
                        leg.to
                    } else {
                        a + u * ts.min(len)
                    }
                } else {
                    a + u * ts.min((len - prm.gate_distance()).max(0.0))
                };
                let yaw = leg.heading().unwrap_or(fl.yaw);
                let mut sp = ControlSetpoint::waypoint(LocalPoint::from_vec(&target), yaw);
                sp.speed_limit = Some(prm.cruise_speed * scale);
                sp
            }
        }
    }

    /// One traffic-management phase.
    pub fn step(&mut self, now: u64, inbox: &[Envelope]) -> Vec<Publication> {
        let mut out = Vec::new();
        self.ingest(now, inbox, &mut out);
        if self.airspace_dirty {
            self.airspace_dirty = false;
            self.replan(now, &mut out);
        }
        self.create_plans(now, &mut out);
        self.resubmissions(now, &mut out);
        self.departures(now, &mut out);

        let uavs: Vec<String> = self.flights.keys().cloned().collect();
        for uav in &uavs {
            self.advance_lifecycle(uav, now, &mut out);
        }
        for (uav, fl) in self.flights.iter_mut() {
            if let Phase::Leg(j) = fl.phase {
                fl.yaw = fl.legs[j].heading().unwrap_or(fl.yaw);
            }
            let _ = uav;
        }
        let lanes: Vec<LanePosition> = self.flights.iter().filter_map(|(u, f)| self.lane_position(u, f)).collect();
        let orders = enforce_separation(&lanes, self.params.s_min);
        for (uav, fl) in &self.flights {
            let sp = self.guidance(uav, fl, orders.get(uav));
            let state = self.plans[&fl.plan_id].state;
            let cmd = UavCommand { plan_id: fl.plan_id.clone(), state, setpoint: sp, airway: fl.airway() };
            out.push(Publication::new(cmd_topic(uav), json!(cmd)));
        }
        out
    }

    /// Airway each in-flight UAV is currently assigned to.
    pub fn assignments(&self) -> BTreeMap<String, Option<String>> {
        self.flights.iter().map(|(u, f)| (u.clone(), f.airway())).collect()
    }

    /// Committed airway load by the traffic manager.
    pub fn committed_load(&self) -> BTreeMap<String, usize> {
        self.res.committed.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::airway::generate_grid_network;
    use crate::bus::Fate;
    use crate::dynamics::{run_controller, step_dynamics, ControllerGains, UavParams, UavState};
    use proptest::prelude::*;

    fn net() -> Arc<AirwayNetwork> {
        Arc::new(generate_grid_network(3, 3, 100.0, 50.0, 1).unwrap())
    }

    fn demand(id: &str, o: &str, d: &str, dep: u64) -> FlightDemand {
        FlightDemand { id: id.into(), origin: o.into(), destination: d.into(), departure: dep, payload: String::new() }
    }

    fn env(topic: &str, payload: serde_json::Value) -> Envelope {
        Envelope { topic: topic.into(), payload, publish_tick: 0, deliver_tick: 0, fate: Fate::Delivered, sequence: 0 }
    }

    #[test]
    fn adjacent_airports_route_is_two_nodes() {
        let n = net();
        let p = plan_mission(&demand("d1", "A000", "A001", 0), &n, &HashSet::new(), "U0").unwrap();
        assert_eq!(p.state, PlanState::Draft);
        assert_eq!(p.route, vec!["N0000", "N0001"]);
        let w = p.waypoints(&n).unwrap();
        assert_eq!(w.len(), 6);
        // vertical climb and descent legs
        assert_eq!(w[0].horizontal(), w[1].horizontal());
        assert_eq!(w[4].horizontal(), w[5].horizontal());
        assert_eq!(w[1].up, 50.0);
    }

    #[test]
    fn same_origin_and_destination_rejected_at_ingest() {
        let n = net();
        assert!(plan_mission(&demand("d1", "A000", "A000", 0), &n, &HashSet::new(), "U0").is_err());
        let mut tm = TrafficManager::new(n, BTreeMap::new(), TrafficParams::default(), 30.0);
        assert!(tm.add_demand(demand("d1", "A000", "A000", 0)).is_err());
    }

    #[test]
    fn unreachable_plan_is_aborted() {
        let n = net();
        let all: HashSet<String> = n.airways().iter().filter(|w| w.endpoints.0 == "N0000" || w.endpoints.1 == "N0000").map(|w| w.id.clone()).collect();
        let p = plan_mission(&demand("d1", "A000", "A008", 0), &n, &all, "U0").unwrap();
        assert_eq!(p.state, PlanState::Aborted);
        assert_eq!(p.reason.as_deref(), Some("unreachable"));
    }

    #[test]
    fn legal_transitions() {
        use PlanState::*;
        let chain = [Draft, Submitted, Approved, TakingOff, Enroute, Landing, Completed];
        for w in chain.windows(2) {
            assert!(w[0].can_transition(w[1]), "{:?}->{:?}", w[0], w[1]);
        }
        assert!(Submitted.can_transition(Rejected));
        for s in [Draft, Submitted, Approved, TakingOff, Enroute, Landing] {
            assert!(s.can_transition(Aborted));
        }
        for s in [Completed, Rejected, Aborted] {
            assert!(!s.can_transition(Aborted));
        }
        assert!(!Draft.can_transition(Approved));
        assert!(!Enroute.can_transition(TakingOff));
        assert!(!Approved.can_transition(Rejected));
    }

    #[test]
    fn single_uav_scale_one() {
        let o = enforce_separation(&[LanePosition { uav: "U0".into(), lane: "a>b".into(), progress: 30.0 }], 15.0);
        assert_eq!(o["U0"].scale, 1.0);
    }

    #[test]
    fn follower_at_stop_distance_holds() {
        let p = |u: &str, s: f64| LanePosition { uav: u.into(), lane: "a>b".into(), progress: s };
        let o = enforce_separation(&[p("U1", 50.0), p("U2", 42.5)], 15.0);
        assert_eq!(o["U1"].scale, 1.0);
        assert_eq!(o["U2"].scale, 0.0);
        let o = enforce_separation(&[p("U1", 50.0), p("U2", 35.0)], 15.0);
        assert_eq!(o["U2"].scale, 1.0);
        let o = enforce_separation(&[p("U1", 50.0), p("U2", 40.0)], 15.0);
        assert!((o["U2"].scale - 2.5 / 7.5).abs() < 1e-12);
    }

    #[test]
    fn separation_ignores_other_lanes_and_breaks_ties_by_id() {
        let o = enforce_separation(
            &[
                LanePosition { uav: "U1".into(), lane: "a>b".into(), progress: 10.0 },
                LanePosition { uav: "U2".into(), lane: "b>a".into(), progress: 10.0 },
                LanePosition { uav: "U3".into(), lane: "c>d".into(), progress: 5.0 },
                LanePosition { uav: "U4".into(), lane: "c>d".into(), progress: 5.0 },
            ],
            15.0,
        );
        assert_eq!(o["U1"].scale, 1.0);
        assert_eq!(o["U2"].scale, 1.0);
        assert_eq!(o["U3"].scale, 1.0);
        assert_eq!(o["U4"].scale, 0.0);
    }

    proptest! {
        #[test]
        fn separation_scale_oracle(ps in proptest::collection::vec(0.0f64..200.0, 1..8), s_min in 5.0f64..30.0) {
            let pos: Vec<LanePosition> = ps.iter().enumerate().map(|(i, &s)| LanePosition { uav: format!("U{i}"), lane: "L".into(), progress: s }).collect();
            let o = enforce_separation(&pos, s_min);
            for p in &pos {
                // leader = nearest strictly ahead, or equal progress with smaller id
                let ahead = pos.iter().filter(|q| q.progress > p.progress || (q.progress == p.progress && q.uav < p.uav))
                    .map(|q| q.progress).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.min(x))));
                let expect = ahead.map_or(1.0, |l| ((l - p.progress - s_min / 2.0) / (s_min / 2.0)).clamp(0.0, 1.0));
                prop_assert!((o[&p.uav].scale - expect).abs() < 1e-12);
            }
        }
    }

    /// Closed-loop chain: five UAVs on one lane behind a leader that stops.
    #[test]
    fn five_uav_chain_never_closer_than_stop_distance() {
        let params = UavParams::<f64>::default();
        let gains = ControllerGains::<f64>::default();
        let s_min = 15.0;
        let mut states: Vec<UavState> =
            (0..5).map(|i| UavState::hovering(LocalPoint::new(100.0 - i as f64 * 0.75 * s_min, 0.0, 50.0), &params)).collect();
        let (dt, sub) = (1.0 / 240.0, 8);
        let mut min_gap = f64::INFINITY;
        let mut slowed = [false; 5];
        for tick in 0..(60 * 30) {
            let lanes: Vec<LanePosition> =
                states.iter().enumerate().map(|(i, s)| LanePosition { uav: format!("U{i}"), lane: "L".into(), progress: s.position.east }).collect();
            let orders = enforce_separation(&lanes, s_min);
            let sps: Vec<ControlSetpoint> = states
                .iter()
                .enumerate()
                .map(|(i, s)| {
                    let o = orders[&format!("U{i}")];
                    if o.scale < 1.0 {
                        slowed[i] = true;
                    }
                    // the leader parks at 250 m after 10 s
                    let mut ts = if i == 0 && tick > 300 { 250.0 } else { s.position.east + 12.0 };
                    if let Some(l) = o.leader_progress {
                        ts = ts.min(l - s_min / 2.0 - 1.5);
                    }
                    let mut sp = ControlSetpoint::waypoint(LocalPoint::new(ts, 0.0, 50.0), 0.0);
                    sp.speed_limit = Some(10.0 * o.scale);
                    sp
                })
                .collect();
            for (s, sp) in states.iter_mut().zip(&sps) {
                for _ in 0..sub {
                    let cmd = run_controller(s, sp, &params, &gains);
                    *s = step_dynamics(s, &params, &cmd, &Vector3::zeros(), dt).unwrap();
                }
            }
            for i in 0..5 {
                for k in i + 1..5 {
                    min_gap = min_gap.min(states[i].position.distance(&states[k].position));
                }
            }
        }
        assert!(slowed[1..].iter().all(|&s| s), "{slowed:?}");
        assert!(min_gap >= s_min / 2.0, "min gap {min_gap}");
    }

    fn run_tm_alone(tm: &mut TrafficManager, ticks: u64) -> Vec<Publication> {
        // answers every submission with an approval and reports the setpoint as
        // the achieved position, enough to drive the state machine
        let mut all = Vec::new();
        let mut inbox: Vec<Envelope> = Vec::new();
        for now in 0..ticks {
            let out = tm.step(now, &inbox);
            inbox.clear();
            for p in &out {
                if p.topic == TOPIC_SUBMIT {
                    let r: PlanRequest = serde_json::from_value(p.payload.clone()).unwrap();
                    let d = ApprovalDecision { plan_id: r.plan_id, verdict: Verdict::Approved, assigned_departure: Some(now), tick: now };
                    inbox.push(env(TOPIC_DECISION, json!(d)));
                }
                if let Some(u) = p.topic.strip_prefix("uav/cmd/") {
                    let c: UavCommand = serde_json::from_value(p.payload.clone()).unwrap();
                    let tgt = *c.setpoint.target().unwrap();
                    let cur = tm.telemetry.get(u).map(|t| t.position).unwrap_or(tgt.vec());
                    let step = tgt.vec() - cur;
                    let lim = 10.0 / 30.0;
                    let mv = if step.norm() > lim { step.normalize() * lim } else { step };
                    let npos = cur + mv;
                    let ground = 0.0;
                    let npos = Vector3::new(npos.x, npos.y, npos.z.max(ground));
                    let f = TelemetryFrame {
                        tick: now,
                        uav: u.into(),
                        position: LocalPoint::from_vec(&npos),
                        velocity: if npos.z <= 0.0 && c.state == PlanState::Landing { [0.0; 3] } else { [mv.x * 30.0, mv.y * 30.0, mv.z * 30.0] },
                        attitude: [1.0, 0.0, 0.0, 0.0],
                        motor_speed: [0.0; 4],
                        health: [1.0; 4],
                        plan_id: Some(c.plan_id),
                        plan_state: Some(c.state),
                        airway: c.airway,
                    };
                    inbox.push(env(&telemetry_topic(u), json!(f)));
                }
            }
            all.extend(out);
        }
        all
    }

    fn events(out: &[Publication]) -> Vec<PlanStateEvent> {
        out.iter().filter(|p| p.topic == TOPIC_PLAN_STATE).map(|p| serde_json::from_value(p.payload.clone()).unwrap()).collect()
    }

    #[test]
    fn lifecycle_runs_to_completion() {
        let n = net();
        let fleet: BTreeMap<String, String> = [("U0".to_string(), "A000".to_string())].into();
        let mut tm = TrafficManager::new(n, fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 5)).unwrap();
        let out = run_tm_alone(&mut tm, 4000);
        let ev = events(&out);
        let seq: Vec<PlanState> = ev.iter().map(|e| e.to).collect();
        use PlanState::*;
        assert_eq!(seq, vec![Submitted, Approved, TakingOff, Enroute, Landing, Completed]);
        assert!(ev.iter().all(|e| e.from.can_transition(e.to)));
        assert!(tm.all_terminal());
        // takeoff at the assigned tick
        let to = ev.iter().find(|e| e.to == TakingOff).unwrap();
        assert_eq!(to.tick, 6);
    }

    #[test]
    fn closure_mid_route_replans_from_next_node() {
        let n = net();
        let fleet: BTreeMap<String, String> = [("U0".to_string(), "A000".to_string())].into();
        let mut tm = TrafficManager::new(n.clone(), fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 0)).unwrap();
        let mut out = run_tm_alone(&mut tm, 400);
        let p = tm.plan("P-d1").unwrap().clone();
        assert_eq!(p.state, PlanState::Enroute);
        assert_eq!(p.route, vec!["N0000", "N0001", "N0002"]);
        let w = n.route_airways(&p.route).unwrap();
        let closed = w[1].clone();
        let st = AirspaceState { tick: 400, closed_airways: vec![closed.clone()], ground_stops: vec![], zones: vec![], affected_plans: vec!["P-d1".into()] };
        out.extend(tm.step(400, &[env(TOPIC_AIRSPACE, json!(st))]));
        let p2 = tm.plan("P-d1").unwrap();
        assert_eq!(p2.state, PlanState::Enroute);
        let j = p.progress.max(1);
        let blocked: HashSet<String> = [closed.clone()].into();
        let expect = shortest_route_from_node(&n, &p.route[j], "N0002", &blocked).unwrap().unwrap();
        assert_eq!(&p2.route[j..], &expect.nodes[..]);
        assert!(!n.route_airways(&p2.route[j..]).unwrap().contains(&closed));
        let ev = events(&out);
        assert!(ev.iter().any(|e| e.from == PlanState::Enroute && e.to == PlanState::Enroute && e.route.is_some()));
    }

    #[test]
    fn lowest_idle_uav_from_home_pool() {
        let n = net();
        let fleet: BTreeMap<String, String> =
            [("U2", "A000"), ("U1", "A000"), ("U3", "A001")].iter().map(|(a, b)| (a.to_string(), b.to_string())).collect();
        let mut tm = TrafficManager::new(n, fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 0)).unwrap();
        tm.add_demand(demand("d2", "A000", "A002", 0)).unwrap();
        tm.add_demand(demand("d3", "A000", "A002", 0)).unwrap();
        tm.step(0, &[]);
        assert_eq!(tm.plan("P-d1").unwrap().uav, "U1");
        assert_eq!(tm.plan("P-d2").unwrap().uav, "U2");
        assert!(tm.plan("P-d3").is_none());
        assert_eq!(tm.pending_demands(), 1);
    }

    #[test]
    fn ground_stop_holds_departure() {
        let n = net();
        let fleet: BTreeMap<String, String> = [("U0".to_string(), "A000".to_string())].into();
        let mut tm = TrafficManager::new(n, fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 0)).unwrap();
        let st = AirspaceState { tick: 0, closed_airways: vec![], ground_stops: vec!["A000".into()], zones: vec![], affected_plans: vec![] };
        tm.step(0, &[env(TOPIC_AIRSPACE, json!(st))]);
        let d = ApprovalDecision { plan_id: "P-d1".into(), verdict: Verdict::Approved, assigned_departure: Some(1), tick: 1 };
        tm.step(1, &[env(TOPIC_DECISION, json!(d))]);
        for t in 2..50 {
            tm.step(t, &[]);
        }
        assert_eq!(tm.plan("P-d1").unwrap().state, PlanState::Approved);
        let st = AirspaceState { tick: 50, closed_airways: vec![], ground_stops: vec![], zones: vec![], affected_plans: vec![] };
        tm.step(50, &[env(TOPIC_AIRSPACE, json!(st))]);
        assert_eq!(tm.plan("P-d1").unwrap().state, PlanState::TakingOff);
    }

    #[test]
    fn deferral_resubmits_at_until_and_rejection_is_terminal() {
        let n = net();
        let fleet: BTreeMap<String, String> = [("U0".to_string(), "A000".to_string()), ("U1".to_string(), "A001".to_string())].into();
        let mut tm = TrafficManager::new(n, fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 0)).unwrap();
        tm.add_demand(demand("d2", "A001", "A002", 0)).unwrap();
        tm.step(0, &[]);
        let d1 = ApprovalDecision { plan_id: "P-d1".into(), verdict: Verdict::Deferred { until: 20 }, assigned_departure: None, tick: 1 };
        let d2 = ApprovalDecision { plan_id: "P-d2".into(), verdict: Verdict::Rejected { reason: "nfz".into() }, assigned_departure: None, tick: 1 };
        let out = tm.step(1, &[env(TOPIC_DECISION, json!(d1)), env(TOPIC_DECISION, json!(d2))]);
        assert_eq!(tm.plan("P-d2").unwrap().state, PlanState::Rejected);
        assert_eq!(tm.plan("P-d2").unwrap().outcome(), Some(DemandOutcome::Aborted));
        assert!(out.iter().all(|p| p.topic != TOPIC_SUBMIT));
        for t in 2..20 {
            assert!(tm.step(t, &[]).iter().all(|p| p.topic != TOPIC_SUBMIT), "early resubmit at {t}");
        }
        assert!(tm.step(20, &[]).iter().any(|p| p.topic == TOPIC_SUBMIT));
    }

    #[test]
    fn commands_never_target_a_closed_centerline() {
        let n = net();
        let fleet: BTreeMap<String, String> = [("U0".to_string(), "A000".to_string())].into();
        let mut tm = TrafficManager::new(n.clone(), fleet, TrafficParams::default(), 30.0);
        tm.add_demand(demand("d1", "A000", "A002", 0)).unwrap();
        let out = run_tm_alone(&mut tm, 3000);
        for p in out.iter().filter(|p| p.topic.starts_with("uav/cmd/")) {
            let c: UavCommand = serde_json::from_value(p.payload.clone()).unwrap();
            let t = c.setpoint.target().unwrap().vec();
            for i in 0..n.airways().len() {
                let (a, b) = n.centerline(i).unwrap();
                let s = crate::world::geometry::closest_param_on_segment(&a, &b, &t);
                let d = crate::world::geometry::point_segment_distance(&a, &b, &t);
                // lane targets sit off the centerline except at its end nodes
                if s > 0.1 && s < 0.9 {
                    assert!(d > 1.0, "target on centerline of airway {i}");
                }
            }
        }
    }
}
