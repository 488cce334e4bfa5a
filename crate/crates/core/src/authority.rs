//! Control subsystem: flight-plan approval, airspace orders, flight
//! monitoring and traffic statistics.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::airway::AirwayNetwork;
use crate::bus::{Envelope, Publication};
use crate::error::{Result, SimError};
use crate::traffic::{PlanRequest, PlanState, PlanStateEvent};
use crate::world::geometry::{point_segment_distance, segment_intersects_nfz, LocalPoint, NoFlyZone};

pub const TOPIC_SUBMIT: &str = "plan/submit";
pub const TOPIC_DECISION: &str = "plan/decision";
pub const TOPIC_ORDER: &str = "control/order";
pub const TOPIC_AIRSPACE: &str = "airspace/state";
pub const TOPIC_STATS: &str = "stats/traffic";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ApprovalPolicy {
    pub max_airway_occupancy_fraction: f64,
    /// Minimum ticks between departures sharing one pad.
    pub departure_separation: u64,
    pub nfz_check: bool,
    /// When false, airway occupancy never defers a plan.
    pub enforce_capacity: bool,
    /// Retry delay handed out with congestion deferrals.
    pub retry_interval: u64,
}

impl Default for ApprovalPolicy {
    fn default() -> Self {
        Self { max_airway_occupancy_fraction: 1.0, departure_separation: 900, nfz_check: true, enforce_capacity: true, retry_interval: 150 }
    }
}

impl ApprovalPolicy {
    /// Approves every plan at its requested tick.
    pub fn permissive() -> Self {
        Self { max_airway_occupancy_fraction: 1.0, departure_separation: 0, nfz_check: false, enforce_capacity: false, retry_interval: 150 }
    }

    pub fn validate(&self) -> Result<()> {
        let f = self.max_airway_occupancy_fraction;
        if !(f > 0.0 && f <= 1.0) {
            return Err(SimError::validation("max_airway_occupancy_fraction must lie in (0, 1]"));
        }
        if self.retry_interval == 0 {
            return Err(SimError::validation("retry_interval must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "verdict")]
pub enum Verdict {
    Approved,
    Rejected { reason: String },
    Deferred { until: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ApprovalDecision {
    pub plan_id: String,
    #[serde(flatten)]
    pub verdict: Verdict,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub assigned_departure: Option<u64>,
    pub tick: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "order")]
pub enum ControlOrder {
    CloseAirway { airways: Vec<String> },
    OpenAirway { airways: Vec<String> },
    ActivateNfz { zone: NoFlyZone },
    DeactivateNfz { zone_id: String },
    GroundStop { airport: String },
    LiftGroundStop { airport: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlAck {
    pub order: ControlOrder,
    pub affected_plans: Vec<String>,
    pub tick: u64,
}

/// Published on `airspace/state` after every order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AirspaceState {
    pub tick: u64,
    pub closed_airways: Vec<String>,
    pub ground_stops: Vec<String>,
    pub zones: Vec<NoFlyZone>,
    /// Plans whose route the last order touched; they should re-plan.
    pub affected_plans: Vec<String>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirwayStats {
    pub transits: u64,
    pub occupancy: u32,
    pub peak_occupancy: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AirportStats {
    pub departures: u64,
    pub arrivals: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrafficStats {
    pub airways: BTreeMap<String, AirwayStats>,
    pub airports: BTreeMap<String, AirportStats>,
    pub completed_missions: u64,
    pub collisions: u64,
}

impl TrafficStats {
    pub fn for_network(net: &AirwayNetwork) -> Self {
        Self {
            airways: net.airways().iter().map(|w| (w.id.clone(), AirwayStats::default())).collect(),
            airports: net.airports().iter().map(|a| (a.id.clone(), AirportStats::default())).collect(),
            completed_missions: 0,
            collisions: 0,
        }
    }

    pub fn occupancy(&self) -> BTreeMap<String, u32> {
        self.airways.iter().filter(|(_, s)| s.occupancy > 0).map(|(k, s)| (k.clone(), s.occupancy)).collect()
    }

    pub fn record_departure(&mut self, airport: &str) {
        self.airports.entry(airport.to_owned()).or_default().departures += 1;
    }

    pub fn record_arrival(&mut self, airport: &str) {
        self.airports.entry(airport.to_owned()).or_default().arrivals += 1;
    }

    pub fn total_transits(&self) -> u64 {
        self.airways.values().map(|s| s.transits).sum()
    }
}

/// Occupancy snapshot published on `stats/traffic`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsUpdate {
    pub tick: u64,
    pub occupancy: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq)]
struct KnownPlan {
    request: PlanRequest,
    decision: Option<ApprovalDecision>,
    state: PlanState,
}

/// Built-in control subsystem. Owns airspace custody and approval state.
#[derive(Debug, Clone)]
pub struct Authority {
    net: Arc<AirwayNetwork>,
    policy: ApprovalPolicy,
    zones: Vec<NoFlyZone>,
    closed: BTreeSet<String>,
    ground_stops: BTreeSet<String>,
    occupancy: BTreeMap<String, u32>,
    /// Assigned departure ticks per origin airport.
    pad_schedule: HashMap<String, Vec<u64>>,
    plans: BTreeMap<String, KnownPlan>,
}

impl Authority {
    pub fn new(net: Arc<AirwayNetwork>, zones: Vec<NoFlyZone>, policy: ApprovalPolicy) -> Self {
        Self {
            net,
            policy,
            zones,
            closed: BTreeSet::new(),
            ground_stops: BTreeSet::new(),
            occupancy: BTreeMap::new(),
            pad_schedule: HashMap::new(),
            plans: BTreeMap::new(),
        }
    }

    pub fn policy(&self) -> &ApprovalPolicy {
        &self.policy
    }

    pub fn closed_airways(&self) -> &BTreeSet<String> {
        &self.closed
    }

    pub fn set_occupancy(&mut self, occupancy: BTreeMap<String, u32>) {
        self.occupancy = occupancy;
    }

    fn pad_conflicts(&self, airport: &str, t: u64) -> Vec<u64> {
        let sep = self.policy.departure_separation;
        self.pad_schedule
            .get(airport)
            .map(|v| v.iter().copied().filter(|&d| d.abs_diff(t) < sep).collect())
            .unwrap_or_default()
    }

    /// Earliest tick `>= t` with a free pad at `airport`.
    fn next_pad_slot(&self, airport: &str, pads: u32, mut t: u64) -> u64 {
        loop {
            let c = self.pad_conflicts(airport, t);
            if (c.len() as u64) < pads as u64 {
                return t;
            }
            t = c.iter().map(|d| d + self.policy.departure_separation).min().expect("conflicts present").max(t + 1);
        }
    }

    fn path_hits_zone(&self, req: &PlanRequest, now: u64) -> Result<Option<String>> {
        let path = self.net.flight_path(&req.origin, &req.destination, &req.route)?;
        Ok(self
            .zones
            .iter()
            .find(|z| path.windows(2).any(|w| segment_intersects_nfz(&w[0], &w[1], z, now)))
            .map(|z| z.id.clone()))
    }

    /// Decides on a plan. Deterministic in the request and current state.
    pub fn approve_plan(&mut self, req: &PlanRequest, now: u64) -> Result<ApprovalDecision> {
        let origin = self.net.airport(&req.origin)?.clone();
        self.net.airport(&req.destination)?;
        let airways = self.net.route_airways(&req.route)?;
        let decision = |verdict, assigned_departure| ApprovalDecision { plan_id: req.plan_id.clone(), verdict, assigned_departure, tick: now };

        if let Some(w) = airways.iter().find(|w| self.closed.contains(*w)) {
            return Ok(decision(Verdict::Rejected { reason: format!("closed airway {w}") }, None));
        }
        if self.policy.nfz_check && self.path_hits_zone(req, now)?.is_some() {
            return Ok(decision(Verdict::Rejected { reason: "nfz".into() }, None));
        }
        let retry = now + self.policy.retry_interval;
        if self.ground_stops.contains(&req.origin) {
            return Ok(decision(Verdict::Deferred { until: retry }, None));
        }
        if self.policy.enforce_capacity {
            for w in &airways {
                let cap = self.net.airway(w)?.capacity as f64 * self.policy.max_airway_occupancy_fraction;
                if *self.occupancy.get(w).unwrap_or(&0) as f64 >= cap {
                    return Ok(decision(Verdict::Deferred { until: retry }, None));
                }
            }
        }
        let base = req.requested_departure.max(now);
        let slot = self.next_pad_slot(&req.origin, origin.pads, base);
        if slot > base {
            return Ok(decision(Verdict::Deferred { until: slot }, None));
        }
        if self.policy.departure_separation > 0 {
            self.pad_schedule.entry(req.origin.clone()).or_default().push(base);
        }
        Ok(decision(Verdict::Approved, Some(base)))
    }

    fn live_plans(&self) -> impl Iterator<Item = &KnownPlan> {
        self.plans.values().filter(|p| !p.state.is_terminal())
    }

    /// Applies an airspace order and returns the plans it affects.
    pub fn issue_airspace_control(&mut self, order: &ControlOrder, now: u64) -> Result<ControlAck> {
        let mut affected = Vec::new();
        match order {
            ControlOrder::CloseAirway { airways } | ControlOrder::OpenAirway { airways } => {
                for w in airways {
                    self.net.airway(w)?;
                }
                if matches!(order, ControlOrder::CloseAirway { .. }) {
                    self.closed.extend(airways.iter().cloned());
                    for p in self.live_plans() {
                        let route = self.net.route_airways(&p.request.route)?;
                        if route.iter().any(|w| airways.contains(w)) {
                            affected.push(p.request.plan_id.clone());
                        }
                    }
                } else {
                    for w in airways {
                        self.closed.remove(w);
                    }
                }
            }
            ControlOrder::ActivateNfz { zone } => {
                zone.validate()?;
                self.zones.retain(|z| z.id != zone.id);
                self.zones.push(zone.clone());
                for p in self.live_plans() {
                    let path = self.net.flight_path(&p.request.origin, &p.request.destination, &p.request.route)?;
                    if path.windows(2).any(|w| segment_intersects_nfz(&w[0], &w[1], zone, now)) {
                        affected.push(p.request.plan_id.clone());
                    }
                }
            }
            ControlOrder::DeactivateNfz { zone_id } => {
                let before = self.zones.len();
                self.zones.retain(|z| &z.id != zone_id);
                if self.zones.len() == before {
                    return Err(SimError::lookup("no-fly zone", zone_id.clone()));
                }
            }
            ControlOrder::GroundStop { airport } | ControlOrder::LiftGroundStop { airport } => {
                self.net.airport(airport)?;
                if matches!(order, ControlOrder::GroundStop { .. }) {
                    self.ground_stops.insert(airport.clone());
                    // queued departures: approved or waiting, not yet airborne
                    affected = self
                        .live_plans()
                        .filter(|p| &p.request.origin == airport && matches!(p.state, PlanState::Submitted | PlanState::Approved))
                        .map(|p| p.request.plan_id.clone())
                        .collect();
                } else {
                    self.ground_stops.remove(airport);
                }
            }
        }
        affected.sort();
        Ok(ControlAck { order: order.clone(), affected_plans: affected, tick: now })
    }

    pub fn airspace_state(&self, now: u64, affected_plans: Vec<String>) -> AirspaceState {
        AirspaceState {
            tick: now,
            closed_airways: self.closed.iter().cloned().collect(),
            ground_stops: self.ground_stops.iter().cloned().collect(),
            zones: self.zones.clone(),
            affected_plans,
        }
    }

    /// One authority phase: consume delivered messages, publish decisions and
    /// airspace updates. Simultaneous submissions are decided in plan-id order.
    pub fn step(&mut self, now: u64, inbox: &[Envelope]) -> Vec<Publication> {
        let mut out = Vec::new();
        let mut submits: BTreeMap<String, PlanRequest> = BTreeMap::new();
        for env in inbox {
            match env.topic.as_str() {
                TOPIC_ORDER => match serde_json::from_value::<ControlOrder>(env.payload.clone()) {
                    Ok(order) => match self.issue_airspace_control(&order, now) {
                        Ok(ack) => out.push(Publication::new(TOPIC_AIRSPACE, json!(self.airspace_state(now, ack.affected_plans)))),
                        Err(e) => out.push(Publication::new("control/rejected", json!({"tick": now, "order": env.payload, "reason": e.to_string()}))),
                    },
                    Err(e) => out.push(Publication::new("control/rejected", json!({"tick": now, "order": env.payload, "reason": e.to_string()}))),
                },
                TOPIC_STATS => {
                    if let Ok(u) = serde_json::from_value::<StatsUpdate>(env.payload.clone()) {
                        self.occupancy = u.occupancy;
                    }
                }
                crate::traffic::TOPIC_PLAN_STATE => {
                    if let Ok(ev) = serde_json::from_value::<PlanStateEvent>(env.payload.clone()) {
                        if let Some(p) = self.plans.get_mut(&ev.plan_id) {
                            p.state = ev.to;
                            if let Some(route) = ev.route {
                                p.request.route = route;
                            }
                        }
                    }
                }
                TOPIC_SUBMIT => {
                    if let Ok(req) = serde_json::from_value::<PlanRequest>(env.payload.clone()) {
                        submits.insert(req.plan_id.clone(), req);
                    }
                }
                _ => {}
            }
        }
        for (id, req) in submits {
            // a resubmitted approved plan gets its original decision again
            if let Some(KnownPlan { decision: Some(d), .. }) = self.plans.get(&id) {
                if d.verdict == Verdict::Approved {
                    out.push(Publication::new(TOPIC_DECISION, json!(d)));
                    continue;
                }
            }
            let decision = match self.approve_plan(&req, now) {
                Ok(d) => d,
                Err(e) => ApprovalDecision {
                    plan_id: id.clone(),
                    verdict: Verdict::Rejected { reason: e.to_string() },
                    assigned_departure: None,
                    tick: now,
                },
            };
            let state = match decision.verdict {
                Verdict::Approved => PlanState::Approved,
                Verdict::Rejected { .. } => PlanState::Rejected,
                Verdict::Deferred { .. } => PlanState::Submitted,
            };
            out.push(Publication::new(TOPIC_DECISION, json!(decision)));
            self.plans.insert(id, KnownPlan { request: req, decision: Some(decision), state });
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum MonitorEvent {
    Enter { uav: String, airway: String, tick: u64 },
    Exit { uav: String, airway: String, tick: u64 },
    Deviation { uav: String, airway: String, lateral: f64, tick: u64 },
}

/// Where one UAV is and which airway it has been assigned.
#[derive(Debug, Clone, PartialEq)]
pub struct FlightObservation {
    pub uav: String,
    pub airway: Option<String>,
    pub position: LocalPoint,
}

/// Tracks airway membership and corridor conformance from telemetry.
#[derive(Debug, Clone)]
pub struct FlightMonitor {
    tolerance: f64,
    current: BTreeMap<String, String>,
    deviating: BTreeSet<String>,
}

impl FlightMonitor {
    pub fn new(tolerance: f64) -> Self {
        Self { tolerance, current: BTreeMap::new(), deviating: BTreeSet::new() }
    }

    /// Processes one telemetry snapshot. UAVs absent from `obs` are treated
    /// as having left their airway.
    pub fn monitor_flights(&mut self, obs: &[FlightObservation], net: &AirwayNetwork, stats: &mut TrafficStats, tick: u64) -> Vec<MonitorEvent> {
        let mut events = Vec::new();
        let seen: BTreeSet<&str> = obs.iter().map(|o| o.uav.as_str()).collect();
        let gone: Vec<String> = self.current.keys().filter(|u| !seen.contains(u.as_str())).cloned().collect();
        for uav in gone {
            let w = self.current.remove(&uav).expect("present");
            self.deviating.remove(&uav);
            if let Some(s) = stats.airways.get_mut(&w) {
                s.occupancy = s.occupancy.saturating_sub(1);
            }
            events.push(MonitorEvent::Exit { uav, airway: w, tick });
        }
        let mut sorted: Vec<&FlightObservation> = obs.iter().collect();
        sorted.sort_by(|a, b| a.uav.cmp(&b.uav));
        for o in sorted {
            let prev = self.current.get(&o.uav).cloned();
            if prev != o.airway {
                if let Some(w) = prev {
                    self.current.remove(&o.uav);
                    if let Some(s) = stats.airways.get_mut(&w) {
                        s.occupancy = s.occupancy.saturating_sub(1);
                    }
                    events.push(MonitorEvent::Exit { uav: o.uav.clone(), airway: w, tick });
                }
                self.deviating.remove(&o.uav);
                if let Some(w) = &o.airway {
                    self.current.insert(o.uav.clone(), w.clone());
                    let s = stats.airways.entry(w.clone()).or_default();
                    s.transits += 1;
                    s.occupancy += 1;
                    s.peak_occupancy = s.peak_occupancy.max(s.occupancy);
                    events.push(MonitorEvent::Enter { uav: o.uav.clone(), airway: w.clone(), tick });
                }
            }
            let Some(w) = &o.airway else { continue };
            let Ok(idx) = net.airway_idx(w) else { continue };
            let (a, b) = net.centerline(idx).expect("valid airway");
            let lateral = point_segment_distance(&a, &b, &o.position.vec());
            let limit = net.airways()[idx].corridor_radius + self.tolerance;
            if lateral > limit {
                if self.deviating.insert(o.uav.clone()) {
                    events.push(MonitorEvent::Deviation { uav: o.uav.clone(), airway: w.clone(), lateral, tick });
                }
            } else {
                self.deviating.remove(&o.uav);
            }
        }
        events
    }
}
