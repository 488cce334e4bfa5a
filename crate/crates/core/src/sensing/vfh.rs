//! Vector field histogram obstacle avoidance.
//!
//! Bearings are radians counter-clockwise from east. The histogram is built
//! in the world frame: a return at sensor azimuth `az` lands at bearing
//! `az + heading_offset`.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use super::lidar::PointCloud;
use crate::dynamics::{ControlSetpoint, SetpointMode};
use crate::error::{Result, SimError};
use crate::scalar::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct VfhConfig<T = f64> {
    pub sector_width_deg: T,
    /// Weight intercept; a return at range `r` weighs `max(0, a - b·r)`.
    pub a: T,
    pub b: T,
    pub threshold: T,
    /// Half-width of the smoothing window in sectors.
    pub smoothing: usize,
    /// Returns more than this far above or below the sensor are ignored, m.
    pub vertical_band: T,
    /// Sectors separating a wide valley from a narrow one.
    pub s_max: usize,
    pub cruise_speed: T,
    /// Lower bound on the speed scale while steering around something.
    pub min_speed_scale: T,
}

impl<T: Real> VfhConfig<T> {
    /// Defaults scaled to a sensor range.
    pub fn for_range(max_range: T) -> Self {
        let b = T::one();
        let a = T::lit(2.0) * max_range * b;
        Self {
            sector_width_deg: T::lit(5.0),
            a,
            b,
            threshold: T::lit(0.3) * a,
            smoothing: 2,
            vertical_band: T::lit(2.5),
            s_max: 8,
            cruise_speed: T::lit(5.0),
            min_speed_scale: T::lit(0.3),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let w = self.sector_width_deg.to_f64_lossy();
        let n = 360.0 / w;
        if !(w > 0.0) || (n - n.round()).abs() > 1e-9 {
            return Err(SimError::validation("VFH sector width must divide 360 degrees"));
        }
        if !(self.a > T::zero() && self.b >= T::zero() && self.threshold >= T::zero()) {
            return Err(SimError::validation("VFH weights and threshold must be non-negative"));
        }
        if self.s_max < 2 || !(self.cruise_speed > T::zero()) {
            return Err(SimError::validation("VFH needs s_max >= 2 and positive cruise speed"));
        }
        if !(self.min_speed_scale >= T::zero() && self.min_speed_scale <= T::one()) {
            return Err(SimError::validation("VFH minimum speed scale must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn sectors(&self) -> usize {
        (360.0 / self.sector_width_deg.to_f64_lossy()).round() as usize
    }
}

impl Default for VfhConfig<f64> {
    fn default() -> Self {
        Self::for_range(40.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PolarHistogram<T = f64> {
    pub sector_width_deg: T,
    pub density: Vec<T>,
    pub threshold: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Steering<T = f64> {
    Bearing(T),
    Stop,
}

fn wrap_two_pi<T: Real>(x: T) -> T {
    let tau = T::two_pi();
    let r = x % tau;
    if r < T::zero() {
        r + tau
    } else {
        r
    }
}

impl<T: Real> PolarHistogram<T> {
    pub fn sectors(&self) -> usize {
        self.density.len()
    }

    fn width_rad(&self) -> T {
        self.sector_width_deg * T::pi() / T::lit(180.0)
    }

    /// Sector holding a bearing.
    pub fn sector_of(&self, bearing: T) -> usize {
        let n = self.sectors();
        let k = (wrap_two_pi(bearing) / self.width_rad()).floor().to_f64_lossy() as usize;
        k.min(n - 1)
    }

    /// Bearing of a sector's centre.
    pub fn sector_center(&self, k: usize) -> T {
        (T::lit(k as f64) + T::lit(0.5)) * self.width_rad()
    }

    pub fn is_free(&self, k: usize) -> bool {
        self.density[k] < self.threshold
    }
}

/// Bins the returns inside the vertical band into sectors, then smooths with
/// weights `ℓ+1-|i|` over `|i| ≤ ℓ`, normalised and wrapping around.
pub fn build_histogram<T: Real>(cloud: &PointCloud<T>, cfg: &VfhConfig<T>, heading_offset: T) -> PolarHistogram<T> {
    let n = cfg.sectors();
    let width = cfg.sector_width_deg * T::pi() / T::lit(180.0);
    let mut raw = vec![T::zero(); n];
    for p in &cloud.points {
        let (se, ce) = p.elevation.sin_cos();
        if (p.range * se).abs() > cfg.vertical_band {
            continue;
        }
        let horizontal = p.range * ce;
        let w = (cfg.a - cfg.b * horizontal).max(T::zero());
        let k = (wrap_two_pi(p.azimuth + heading_offset) / width).floor().to_f64_lossy() as usize;
        raw[k.min(n - 1)] += w;
    }
    let density = smooth(&raw, cfg.smoothing);
    PolarHistogram { sector_width_deg: cfg.sector_width_deg, density, threshold: cfg.threshold }
}

fn smooth<T: Real>(raw: &[T], l: usize) -> Vec<T> {
    if l == 0 {
        return raw.to_vec();
    }
    let n = raw.len() as isize;
    let li = l as isize;
    let norm = T::lit(((l + 1) * (l + 1)) as f64);
    (0..n)
        .map(|k| {
            let mut s = T::zero();
            for i in -li..=li {
                let wgt = T::lit((li + 1 - i.abs()) as f64);
                s += wgt * raw[(k + i).rem_euclid(n) as usize];
            }
            s / norm
        })
        .collect()
}

/// A maximal circular run of free sectors.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Valley {
    pub start: usize,
    pub len: usize,
}

impl Valley {
    pub fn end(&self, n: usize) -> usize {
        (self.start + self.len - 1) % n
    }

    pub fn contains(&self, k: usize, n: usize) -> bool {
        (k + n - self.start) % n < self.len
    }
}

/// Valleys in ascending order of start sector. Empty when every sector is
/// blocked; a single full-circle valley when none is.
pub fn valleys<T: Real>(hist: &PolarHistogram<T>) -> Vec<Valley> {
    let n = hist.sectors();
    let Some(blocked) = (0..n).find(|&k| !hist.is_free(k)) else {
        return vec![Valley { start: 0, len: n }];
    };
    let mut out = Vec::new();
    // walk once around starting just after a blocked sector
    let mut run: Option<Valley> = None;
    for step in 1..=n {
        let k = (blocked + step) % n;
        if hist.is_free(k) {
            match run.as_mut() {
                Some(v) => v.len += 1,
                None => run = Some(Valley { start: k, len: 1 }),
            }
        } else if let Some(v) = run.take() {
            out.push(v);
        }
    }
    out.sort_by_key(|v| v.start);
    out
}

fn circ_dist(a: usize, b: usize, n: usize) -> usize {
    let d = (a + n - b) % n;
    d.min(n - d)
}

/// Picks the steering bearing.
///
/// The valley whose nearest edge is closest to the target sector wins (ties
/// go to the lower start sector). Wide valleys steer `s_max/2` sectors in
/// from the near edge, narrow ones at their centre sector. The target is kept
/// as is when its sector sits in a wide valley at least `s_max/2` from both
/// edges, or when the candidate is the target sector itself.
pub fn select_heading<T: Real>(hist: &PolarHistogram<T>, target_bearing: T, s_max: usize) -> Steering<T> {
    let n = hist.sectors();
    let vs = valleys(hist);
    if vs.is_empty() {
        return Steering::Stop;
    }
    if vs.len() == 1 && vs[0].len == n {
        return Steering::Bearing(target_bearing);
    }
    let kt = hist.sector_of(target_bearing);
    let edge_dist = |v: &Valley| {
        if v.contains(kt, n) {
            0
        } else {
            circ_dist(kt, v.start, n).min(circ_dist(kt, v.end(n), n))
        }
    };
    let best = *vs.iter().min_by_key(|v| (edge_dist(v), v.start)).expect("non-empty");
    let half = s_max / 2;
    let candidate = if best.len >= s_max {
        let from_start = (kt + n - best.start) % n;
        let from_end = (best.end(n) + n - kt) % n;
        if best.contains(kt, n) {
            if from_start >= half && from_end >= half {
                return Steering::Bearing(target_bearing);
            }
            if from_start <= from_end {
                (best.start + half) % n
            } else {
                (best.end(n) + n - half) % n
            }
        } else if circ_dist(kt, best.start, n) <= circ_dist(kt, best.end(n), n) {
            (best.start + half) % n
        } else {
            (best.end(n) + n - half) % n
        }
    } else {
        (best.start + (best.len - 1) / 2) % n
    };
    if candidate == kt {
        Steering::Bearing(target_bearing)
    } else {
        Steering::Bearing(hist.sector_center(candidate))
    }
}

/// Turns a steering decision into a setpoint.
///
/// Speed is `cruise · clamp(1 - peak / (2·threshold), min_scale, 1)` where
/// `peak` is the densest sector within one sector of the steering bearing.
/// The altitude of the original setpoint is held.
pub fn avoidance_override<T: Real>(
    setpoint: &ControlSetpoint<T>,
    steering: Steering<T>,
    target_bearing: T,
    hist: &PolarHistogram<T>,
    cfg: &VfhConfig<T>,
) -> ControlSetpoint<T> {
    let altitude = match &setpoint.mode {
        SetpointMode::PositionHold { target } | SetpointMode::Waypoint { target } => Some(target.up),
        SetpointMode::Velocity { hold_altitude, .. } => *hold_altitude,
    };
    let bearing = match steering {
        Steering::Stop => {
            return ControlSetpoint { speed_limit: Some(T::zero()), ..ControlSetpoint::velocity(Vector3::zeros(), altitude, setpoint.yaw) };
        }
        Steering::Bearing(b) => b,
    };
    let n = hist.sectors();
    let k = hist.sector_of(bearing);
    let peak = [n - 1, 0, 1]
        .iter()
        .map(|d| hist.density[(k + d) % n])
        .fold(T::zero(), |m, x| m.max(x));
    let scale = if hist.threshold > T::zero() {
        (T::one() - peak / (T::lit(2.0) * hist.threshold)).clamp_to(cfg.min_speed_scale, T::one())
    } else {
        T::one()
    };
    let speed = cfg.cruise_speed * scale;
    if bearing == target_bearing {
        let limit = setpoint.speed_limit.map_or(speed, |s| s.min(speed));
        return ControlSetpoint { speed_limit: Some(limit), ..setpoint.clone() };
    }
    let (s, c) = bearing.sin_cos();
    ControlSetpoint {
        speed_limit: Some(speed),
        ..ControlSetpoint::velocity(Vector3::new(c * speed, s * speed, T::zero()), altitude, setpoint.yaw)
    }
}
