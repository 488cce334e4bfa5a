//! Fault injection: scheduled and live anomalies applied through hooks the
//! engine provides, with automatic revert for bounded ones.

use std::collections::BTreeMap;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::authority::ControlOrder;
use crate::bus::{LinkModel, Publication};
use crate::dynamics::ROTORS;
use crate::error::{Result, SimError};
use crate::world::geometry::{NoFlyZone, Obstacle};

pub const TOPIC_INJECT: &str = "anomaly/inject";
pub const TOPIC_APPLIED: &str = "anomaly/applied";
pub const TOPIC_REJECTED: &str = "anomaly/rejected";
pub const TOPIC_REVERTED: &str = "anomaly/reverted";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Control,
    Environment,
    Uav,
    Communication,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AnomalyKind {
    CloseAirway { airways: Vec<String> },
    ActivateNfz { zone: NoFlyZone },
    GroundStop { airport: String },
    /// Uniform wind added to the base field, m/s.
    WindGust { vector: [f64; 3] },
    SpawnObstacle { obstacle: Obstacle },
    FogLidar { dropout: f64, range_scale: f64 },
    MotorFailure { uav: String, motor: usize, residual: f64 },
    PropellerBreakage { uav: String, motor: usize },
    SetLink { prefix: String, link: LinkModel },
}

impl AnomalyKind {
    pub fn category(&self) -> Category {
        match self {
            AnomalyKind::CloseAirway { .. } | AnomalyKind::ActivateNfz { .. } | AnomalyKind::GroundStop { .. } => Category::Control,
            AnomalyKind::WindGust { .. } | AnomalyKind::SpawnObstacle { .. } | AnomalyKind::FogLidar { .. } => Category::Environment,
            AnomalyKind::MotorFailure { .. } | AnomalyKind::PropellerBreakage { .. } => Category::Uav,
            AnomalyKind::SetLink { .. } => Category::Communication,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            AnomalyKind::CloseAirway { .. } => "close_airway",
            AnomalyKind::ActivateNfz { .. } => "activate_nfz",
            AnomalyKind::GroundStop { .. } => "ground_stop",
            AnomalyKind::WindGust { .. } => "wind_gust",
            AnomalyKind::SpawnObstacle { .. } => "spawn_obstacle",
            AnomalyKind::FogLidar { .. } => "fog_lidar",
            AnomalyKind::MotorFailure { .. } => "motor_failure",
            AnomalyKind::PropellerBreakage { .. } => "propeller_breakage",
            AnomalyKind::SetLink { .. } => "set_link",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Anomaly {
    pub id: String,
    #[serde(flatten)]
    pub kind: AnomalyKind,
    #[serde(default)]
    pub onset: u64,
    /// Ticks until automatic revert; absent means permanent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub duration: Option<u64>,
}

impl Anomaly {
    pub fn category(&self) -> Category {
        self.kind.category()
    }

    /// Checks parameter ranges. Target existence is checked at onset.
    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(SimError::validation("anomaly id must not be empty"));
        }
        if self.duration == Some(0) {
            return Err(SimError::validation(format!("anomaly {}: duration must be positive", self.id)));
        }
        match &self.kind {
            AnomalyKind::CloseAirway { airways } if airways.is_empty() => {
                Err(SimError::validation(format!("anomaly {}: no airways given", self.id)))
            }
            AnomalyKind::ActivateNfz { zone } => zone.validate(),
            AnomalyKind::WindGust { vector } if !vector.iter().all(|v| v.is_finite()) => {
                Err(SimError::validation(format!("anomaly {}: wind must be finite", self.id)))
            }
            AnomalyKind::SpawnObstacle { obstacle } => obstacle.validate(),
            AnomalyKind::FogLidar { dropout, range_scale } => {
                if !(0.0..=1.0).contains(dropout) || !(*range_scale > 0.0 && *range_scale <= 1.0) {
                    Err(SimError::validation(format!("anomaly {}: fog needs dropout in [0,1] and range_scale in (0,1]", self.id)))
                } else {
                    Ok(())
                }
            }
            AnomalyKind::MotorFailure { motor, residual, .. } => {
                if *motor >= ROTORS {
                    Err(SimError::validation(format!("anomaly {}: motor index {motor} out of range", self.id)))
                } else if !(0.0..1.0).contains(residual) {
                    Err(SimError::validation(format!("anomaly {}: residual efficiency must lie in [0, 1)", self.id)))
                } else {
                    Ok(())
                }
            }
            AnomalyKind::PropellerBreakage { motor, .. } if *motor >= ROTORS => {
                Err(SimError::validation(format!("anomaly {}: motor index {motor} out of range", self.id)))
            }
            AnomalyKind::SetLink { prefix, link } => {
                crate::bus::validate_topic(prefix)?;
                link.validate()
            }
            _ => Ok(()),
        }
    }
}

/// LiDAR degradation currently in force.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Fog {
    pub dropout: f64,
    pub range_scale: f64,
}

/// World mutation points an anomaly may touch. The engine implements this.
pub trait AnomalyHooks {
    fn has_uav(&self, uav: &str) -> bool;
    fn has_airway(&self, airway: &str) -> bool;
    fn has_airport(&self, airport: &str) -> bool;
    /// Forwards an order to the control subsystem; returns affected plan ids.
    fn control(&mut self, order: ControlOrder) -> Result<Vec<String>>;
    fn wind(&mut self) -> &mut Vector3<f64>;
    fn add_obstacle(&mut self, obstacle: Obstacle) -> Result<()>;
    fn remove_obstacle(&mut self, id: &str) -> Result<()>;
    fn fog(&mut self) -> &mut Option<Fog>;
    fn motor_health(&mut self, uav: &str, motor: usize) -> Result<&mut f64>;
    fn set_link(&mut self, prefix: &str, link: Option<LinkModel>) -> Result<Option<LinkModel>>;
}

/// What reverting an applied anomaly must restore.
#[derive(Debug, Clone, PartialEq)]
pub enum Undo {
    Order(ControlOrder),
    Wind(Vector3<f64>),
    Obstacle(String),
    Fog(Option<Fog>),
    Health { uav: String, motor: usize, previous: f64 },
    Link { prefix: String, previous: Option<LinkModel> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnomalyLogEntry {
    pub anomaly_id: String,
    pub kind: String,
    pub category: Category,
    pub applied_tick: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reverted_tick: Option<u64>,
    pub affected: Vec<String>,
    #[serde(default)]
    pub live: bool,
}

fn injection(msg: impl Into<String>) -> SimError {
    SimError::Injection(msg.into())
}

fn unknown_target(what: &str, id: &str) -> SimError {
    injection(format!("unknown target: {what} `{id}`"))
}

/// Applies one anomaly now. Missing targets are injection errors and leave
/// the world untouched.
pub fn apply_anomaly(a: &Anomaly, hooks: &mut dyn AnomalyHooks, now: u64) -> Result<(AnomalyLogEntry, Undo)> {
    a.validate().map_err(|e| injection(e.to_string()))?;
    let (affected, undo) = match &a.kind {
        AnomalyKind::CloseAirway { airways } => {
            if let Some(w) = airways.iter().find(|w| !hooks.has_airway(w)) {
                return Err(unknown_target("airway", w));
            }
            let plans = hooks.control(ControlOrder::CloseAirway { airways: airways.clone() })?;
            let mut affected = airways.clone();
            affected.extend(plans);
            (affected, Undo::Order(ControlOrder::OpenAirway { airways: airways.clone() }))
        }
        AnomalyKind::ActivateNfz { zone } => {
            let mut affected = vec![zone.id.clone()];
            affected.extend(hooks.control(ControlOrder::ActivateNfz { zone: zone.clone() })?);
            (affected, Undo::Order(ControlOrder::DeactivateNfz { zone_id: zone.id.clone() }))
        }
        AnomalyKind::GroundStop { airport } => {
            if !hooks.has_airport(airport) {
                return Err(unknown_target("airport", airport));
            }
            let mut affected = vec![airport.clone()];
            affected.extend(hooks.control(ControlOrder::GroundStop { airport: airport.clone() })?);
            (affected, Undo::Order(ControlOrder::LiftGroundStop { airport: airport.clone() }))
        }
        AnomalyKind::WindGust { vector } => {
            let v = Vector3::from(*vector);
            *hooks.wind() += v;
            (vec!["wind".into()], Undo::Wind(v))
        }
        AnomalyKind::SpawnObstacle { obstacle } => {
            hooks.add_obstacle(obstacle.clone())?;
            (vec![obstacle.id.clone()], Undo::Obstacle(obstacle.id.clone()))
        }
        AnomalyKind::FogLidar { dropout, range_scale } => {
            let prev = std::mem::replace(hooks.fog(), Some(Fog { dropout: *dropout, range_scale: *range_scale }));
            (vec!["lidar".into()], Undo::Fog(prev))
        }
        AnomalyKind::MotorFailure { uav, motor, residual } => set_health(hooks, uav, *motor, *residual)?,
        AnomalyKind::PropellerBreakage { uav, motor } => set_health(hooks, uav, *motor, 0.0)?,
        AnomalyKind::SetLink { prefix, link } => {
            let previous = hooks.set_link(prefix, Some(*link))?;
            (vec![prefix.clone()], Undo::Link { prefix: prefix.clone(), previous })
        }
    };
    let entry = AnomalyLogEntry {
        anomaly_id: a.id.clone(),
        kind: a.kind.name().into(),
        category: a.category(),
        applied_tick: now,
        reverted_tick: None,
        affected,
        live: false,
    };
    Ok((entry, undo))
}

fn set_health(hooks: &mut dyn AnomalyHooks, uav: &str, motor: usize, residual: f64) -> Result<(Vec<String>, Undo)> {
    if !hooks.has_uav(uav) {
        return Err(unknown_target("uav", uav));
    }
    let h = hooks.motor_health(uav, motor)?;
    let previous = *h;
    *h = residual;
    Ok((vec![uav.to_owned()], Undo::Health { uav: uav.to_owned(), motor, previous }))
}

pub fn revert_anomaly(undo: Undo, hooks: &mut dyn AnomalyHooks) -> Result<()> {
    match undo {
        Undo::Order(o) => hooks.control(o).map(|_| ()),
        Undo::Wind(v) => {
            *hooks.wind() -= v;
            Ok(())
        }
        Undo::Obstacle(id) => hooks.remove_obstacle(&id),
        Undo::Fog(prev) => {
            *hooks.fog() = prev;
            Ok(())
        }
        Undo::Health { uav, motor, previous } => {
            *hooks.motor_health(&uav, motor)? = previous;
            Ok(())
        }
        Undo::Link { prefix, previous } => hooks.set_link(&prefix, previous).map(|_| ()),
    }
}

/// Parses a live request. The onset is forced to `now`.
pub fn live_inject(request: &Value, now: u64) -> Result<Anomaly> {
    let mut a: Anomaly = serde_json::from_value(request.clone()).map_err(|e| injection(format!("schema violation: {e}")))?;
    a.onset = now;
    a.validate().map_err(|e| injection(e.to_string()))?;
    Ok(a)
}

#[derive(Debug, Clone)]
struct Active {
    log_index: usize,
    revert_at: u64,
    undo: Undo,
}

/// Owns the schedule, the active set and the log.
#[derive(Debug, Clone, Default)]
pub struct AnomalyManager {
    /// Keyed by (onset, schedule position).
    schedule: BTreeMap<(u64, usize), Anomaly>,
    active: Vec<Active>,
    log: Vec<AnomalyLogEntry>,
    rejected: Vec<Value>,
    live: Vec<Anomaly>,
}

impl AnomalyManager {
    pub fn new(schedule: Vec<Anomaly>) -> Self {
        Self { schedule: schedule.into_iter().enumerate().map(|(i, a)| ((a.onset, i), a)).collect(), ..Default::default() }
    }

    pub fn log(&self) -> &[AnomalyLogEntry] {
        &self.log
    }

    pub fn rejections(&self) -> &[Value] {
        &self.rejected
    }

    /// Live anomalies applied so far, in application order.
    pub fn live_history(&self) -> &[Anomaly] {
        &self.live
    }

    pub fn pending(&self) -> usize {
        self.schedule.len()
    }

    pub fn active(&self) -> usize {
        self.active.len()
    }

    /// One anomaly phase: due reverts, then scheduled onsets, then live
    /// requests in arrival order.
    pub fn step(&mut self, now: u64, hooks: &mut dyn AnomalyHooks, live_requests: &[Value]) -> Vec<Publication> {
        let mut out = Vec::new();
        // newest first, so stacked anomalies on one field unwind correctly
        let mut i = self.active.len();
        while i > 0 {
            i -= 1;
            if self.active[i].revert_at <= now {
                let act = self.active.remove(i);
                let entry = &mut self.log[act.log_index];
                match revert_anomaly(act.undo, hooks) {
                    Ok(()) => {
                        entry.reverted_tick = Some(now);
                        out.push(Publication::new(TOPIC_REVERTED, json!(entry)));
                    }
                    Err(e) => out.push(Publication::new(
                        TOPIC_REJECTED,
                        json!({"tick": now, "anomaly_id": entry.anomaly_id, "reason": format!("revert failed: {e}")}),
                    )),
                }
            }
        }
        let due: Vec<(u64, usize)> = self.schedule.range(..=(now, usize::MAX)).map(|(k, _)| *k).collect();
        for key in due {
            let a = self.schedule.remove(&key).expect("scheduled");
            self.apply(a, now, false, hooks, &mut out);
        }
        for req in live_requests {
            match live_inject(req, now) {
                Ok(a) => self.apply(a, now, true, hooks, &mut out),
                Err(e) => self.reject(req.clone(), e, now, &mut out),
            }
        }
        out
    }

    fn reject(&mut self, request: Value, e: SimError, now: u64, out: &mut Vec<Publication>) {
        let reason = match e {
            SimError::Injection(m) => m,
            other => other.to_string(),
        };
        let r = json!({"tick": now, "request": request, "reason": reason});
        self.rejected.push(r.clone());
        out.push(Publication::new(TOPIC_REJECTED, r));
    }

    fn apply(&mut self, a: Anomaly, now: u64, live: bool, hooks: &mut dyn AnomalyHooks, out: &mut Vec<Publication>) {
        match apply_anomaly(&a, hooks, now) {
            Ok((mut entry, undo)) => {
                entry.live = live;
                out.push(Publication::new(TOPIC_APPLIED, json!(entry)));
                self.log.push(entry);
                if let Some(d) = a.duration {
                    self.active.push(Active { log_index: self.log.len() - 1, revert_at: now + d, undo });
                }
                if live {
                    self.live.push(a);
                }
            }
            Err(e) => self.reject(serde_json::to_value(&a).unwrap_or(Value::Null), e, now, out),
        }
    }
}
