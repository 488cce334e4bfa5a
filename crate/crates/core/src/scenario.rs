//! Scenario documents: parsing, parameter merging and validation.

use std::collections::{BTreeMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::airway::{validate_network, AirwayNetwork, NetworkDoc};
use crate::anomaly::Anomaly;
use crate::authority::ApprovalPolicy;
use crate::bus::{validate_topic, LinkModel};
use crate::dynamics::{ControllerGains, UavParams};
use crate::error::{Result, SimError};
use crate::sensing::{LidarConfig, VfhConfig};
use crate::traffic::{FlightDemand, TrafficParams};
use crate::world::geometry::{NoFlyZone, Obstacle};
use crate::world::{GeodeticPoint, SimClock};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapDoc {
    pub name: String,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub no_fly_zones: Vec<NoFlyZone>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClockDoc {
    pub tick_hz: f64,
    pub physics_substeps: u32,
}

impl Default for ClockDoc {
    fn default() -> Self {
        Self { tick_hz: 30.0, physics_substeps: 8 }
    }
}

/// One fleet member. `params` and `gains` are partial overrides of the defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FleetEntry {
    pub uav: String,
    pub home: String,
    #[serde(default, skip_serializing_if = "is_empty_object")]
    pub params: Value,
    #[serde(default, skip_serializing_if = "is_empty_object")]
    pub gains: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lidar: Option<LidarConfig>,
}

fn is_empty_object(v: &Value) -> bool {
    v.is_null() || v.as_object().is_some_and(|m| m.is_empty())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkEntry {
    pub prefix: String,
    pub link: LinkModel,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AvoidanceDoc {
    pub enabled: bool,
    /// Defaults are derived from each UAV's LiDAR range when absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub vfh: Option<VfhConfig>,
}

impl Default for AvoidanceDoc {
    fn default() -> Self {
        Self { enabled: true, vfh: None }
    }
}

fn one() -> u64 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub datum: GeodeticPoint,
    pub map: MapDoc,
    pub network: NetworkDoc,
    pub fleet: Vec<FleetEntry>,
    #[serde(default)]
    pub demands: Vec<FlightDemand>,
    #[serde(default)]
    pub anomalies: Vec<Anomaly>,
    pub seed: u64,
    #[serde(default)]
    pub clock: ClockDoc,
    #[serde(default)]
    pub wind: [f64; 3],
    #[serde(default)]
    pub policy: ApprovalPolicy,
    #[serde(default)]
    pub traffic: TrafficParams,
    #[serde(default)]
    pub links: Vec<LinkEntry>,
    #[serde(default)]
    pub avoidance: AvoidanceDoc,
    /// Telemetry log decimation: one record per UAV every this many ticks.
    #[serde(default = "one")]
    pub telemetry_every: u64,
}

/// Fleet member with all parameters resolved.
#[derive(Debug, Clone, PartialEq)]
pub struct FleetUav {
    pub id: String,
    pub home: String,
    pub params: UavParams,
    pub gains: ControllerGains,
    pub lidar: Option<LidarConfig>,
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: &Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (b, p) if !p.is_null() => *b = p.clone(),
        _ => {}
    }
}

fn with_overrides<T: Serialize + serde::de::DeserializeOwned>(default: &T, patch: &Value) -> Result<T> {
    let mut v = serde_json::to_value(default)?;
    merge(&mut v, patch);
    Ok(serde_json::from_value(v)?)
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| SimError::validation(format!("scenario parse error: {e}")))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }

    pub fn network(&self) -> AirwayNetwork {
        AirwayNetwork::from(&self.network)
    }

    pub fn sim_clock(&self) -> Result<SimClock> {
        if !(self.clock.tick_hz > 0.0 && self.clock.tick_hz.is_finite()) {
            return Err(SimError::validation("clock tick_hz must be positive"));
        }
        SimClock::new(1.0 / self.clock.tick_hz, self.clock.physics_substeps)
    }

    pub fn resolve_fleet(&self) -> Result<Vec<FleetUav>> {
        let (dp, dg) = (UavParams::<f64>::default(), ControllerGains::<f64>::default());
        self.fleet
            .iter()
            .map(|f| {
                let params = with_overrides(&dp, &f.params).map_err(|e| SimError::validation(format!("fleet {}: params: {e}", f.uav)))?;
                let gains = with_overrides(&dg, &f.gains).map_err(|e| SimError::validation(format!("fleet {}: gains: {e}", f.uav)))?;
                Ok(FleetUav { id: f.uav.clone(), home: f.home.clone(), params, gains, lidar: f.lidar.clone() })
            })
            .collect()
    }

    /// Every violation found; empty means the scenario may run.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.datum.validate() {
            out.push(format!("datum: {e}"));
        }
        match self.sim_clock() {
            Ok(c) if c.physics_dt() > 0.01 => out.push("clock: physics substep longer than 10 ms".into()),
            Err(e) => out.push(format!("clock: {e}")),
            _ => {}
        }
        if !self.wind.iter().all(|w| w.is_finite()) {
            out.push("wind must be finite".into());
        }
        if self.telemetry_every == 0 {
            out.push("telemetry_every must be positive".into());
        }
        let net = self.network();
        out.extend(validate_network(&net).into_iter().map(|v| format!("network: {v}")));

        let mut ids = HashSet::new();
        for o in &self.map.obstacles {
            if !ids.insert(o.id.as_str()) {
                out.push(format!("obstacle `{}` defined twice", o.id));
            }
            if let Err(e) = o.validate() {
                out.push(format!("obstacle `{}`: {e}", o.id));
            }
        }
        let mut ids = HashSet::new();
        for z in &self.map.no_fly_zones {
            if !ids.insert(z.id.as_str()) {
                out.push(format!("no-fly zone `{}` defined twice", z.id));
            }
            if let Err(e) = z.validate() {
                out.push(format!("no-fly zone `{}`: {e}", z.id));
            }
        }

        let mut homes: BTreeMap<&str, usize> = BTreeMap::new();
        let mut ids = HashSet::new();
        for f in &self.fleet {
            if !ids.insert(f.uav.as_str()) {
                out.push(format!("uav `{}` listed twice", f.uav));
            }
            if net.airport(&f.home).is_err() {
                out.push(format!("uav `{}`: unknown home airport `{}`", f.uav, f.home));
            }
            *homes.entry(f.home.as_str()).or_default() += 1;
            if let Some(l) = &f.lidar {
                if let Err(e) = l.validate() {
                    out.push(format!("uav `{}`: {e}", f.uav));
                }
            }
        }
        match self.resolve_fleet() {
            Ok(fleet) => {
                for f in fleet {
                    if let Err(e) = f.params.validate() {
                        out.push(format!("uav `{}`: {e}", f.id));
                    }
                }
            }
            Err(e) => out.push(e.to_string()),
        }

        let mut ids = HashSet::new();
        for d in &self.demands {
            if !ids.insert(d.id.as_str()) {
                out.push(format!("demand `{}` listed twice", d.id));
            }
            if let Err(e) = d.validate(&net) {
                out.push(format!("demand `{}`: {e}", d.id));
            } else if !homes.contains_key(d.origin.as_str()) {
                out.push(format!("demand `{}`: no UAV based at `{}`", d.id, d.origin));
            }
        }
        let mut ids = HashSet::new();
        for a in &self.anomalies {
            if !ids.insert(a.id.as_str()) {
                out.push(format!("anomaly `{}` listed twice", a.id));
            }
            if let Err(e) = a.validate() {
                out.push(e.to_string());
            }
        }
        for l in &self.links {
            if let Err(e) = validate_topic(&l.prefix).and_then(|_| l.link.validate()) {
                out.push(format!("link `{}`: {e}", l.prefix));
            }
        }
        if let Err(e) = self.policy.validate() {
            out.push(format!("policy: {e}"));
        }
        if let Err(e) = self.traffic.validate() {
            out.push(format!("traffic: {e}"));
        }
        if let Some(v) = &self.avoidance.vfh {
            if let Err(e) = v.validate() {
                out.push(format!("avoidance: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let v = self.violations();
        if v.is_empty() {
            Ok(())
        } else {
            Err(SimError::Validation(v.join("\n")))
        }
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| SimError::Io(format!("{}: {e}", path.display())))?;
    let s = Scenario::from_json(&text)?;
    s.validate()?;
    Ok(s)
}

pub fn shared_network(s: &Scenario) -> Arc<AirwayNetwork> {
    Arc::new(s.network())
}
