//! Geometric multi-channel LiDAR.

use nalgebra::{UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Real;
use crate::world::geometry::{LocalPoint, Shape};
use crate::world::RandomStream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct LidarConfig<T = f64> {
    pub channels: u32,
    /// `[min, max]` elevation, degrees.
    pub vertical_fov: [T; 2],
    /// Azimuth step, degrees. Must divide 360.
    pub horizontal_resolution: T,
    pub max_range: T,
    /// Full scans per control period.
    #[serde(default = "one")]
    pub scan_rate: u32,
}

fn one() -> u32 {
    1
}

impl<T: Real> Default for LidarConfig<T> {
    /// 12 channels over ±5°, full circle at 1° steps.
    fn default() -> Self {
        Self {
            channels: 12,
            vertical_fov: [T::lit(-5.0), T::lit(5.0)],
            horizontal_resolution: T::lit(1.0),
            max_range: T::lit(40.0),
            scan_rate: 1,
        }
    }
}

impl<T: Real> LidarConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.channels < 1 {
            return Err(SimError::validation("LiDAR needs at least one channel"));
        }
        if !(self.vertical_fov[0] < self.vertical_fov[1]) {
            return Err(SimError::validation("LiDAR vertical field of view must have min < max"));
        }
        let res = self.horizontal_resolution.to_f64_lossy();
        let steps = 360.0 / res;
        if !(res > 0.0) || (steps - steps.round()).abs() > 1e-9 {
            return Err(SimError::validation("LiDAR horizontal resolution must divide 360 degrees"));
        }
        if !(self.max_range > T::zero()) {
            return Err(SimError::validation("LiDAR max range must be positive"));
        }
        if self.scan_rate < 1 {
            return Err(SimError::validation("LiDAR scan rate must be positive"));
        }
        Ok(())
    }

    pub fn azimuth_steps(&self) -> usize {
        (360.0 / self.horizontal_resolution.to_f64_lossy()).round() as usize
    }

    /// Channel elevations in degrees, evenly spaced from min to max inclusive.
    pub fn elevations_deg(&self) -> Vec<T> {
        let [lo, hi] = self.vertical_fov;
        if self.channels == 1 {
            return vec![(lo + hi) * T::lit(0.5)];
        }
        let step = (hi - lo) / T::lit((self.channels - 1) as f64);
        (0..self.channels).map(|k| lo + step * T::lit(k as f64)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct LidarPoint<T = f64> {
    pub range: T,
    /// Sensor-frame azimuth, radians counter-clockwise from sensor x.
    pub azimuth: T,
    pub elevation: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct PointCloud<T = f64> {
    pub points: Vec<LidarPoint<T>>,
    pub scan_tick: u64,
}

impl<T: Real> PointCloud<T> {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

fn deg<T: Real>(x: T) -> T {
    x * T::pi() / T::lit(180.0)
}

/// Casts one ray per (channel, azimuth step) and keeps the nearest return
/// within range. Misses produce no point.
pub fn scan_lidar<T: Real>(
    position: &LocalPoint<T>,
    attitude: &UnitQuaternion<T>,
    config: &LidarConfig<T>,
    scene: &[Shape<T>],
    scan_tick: u64,
) -> PointCloud<T> {
    let origin = position.vec();
    // broad phase: only solids within reach of the sensor
    let near: Vec<&Shape<T>> = scene.iter().filter(|s| s.distance_to(&origin) <= config.max_range).collect();
    let mut points = Vec::new();
    if near.is_empty() {
        return PointCloud { points, scan_tick };
    }
    let steps = config.azimuth_steps();
    let res = deg(config.horizontal_resolution);
    for el_deg in config.elevations_deg() {
        let el = deg(el_deg);
        let (se, ce) = el.sin_cos();
        for j in 0..steps {
            let az = res * T::lit(j as f64);
            let (sa, ca) = az.sin_cos();
            let dir = attitude * Vector3::new(ce * ca, ce * sa, se);
            let hit = near
                .iter()
                .filter_map(|s| s.ray_hit(&origin, &dir, config.max_range))
                .fold(None, |best: Option<T>, t| Some(best.map_or(t, |b| b.min(t))));
            if let Some(range) = hit {
                points.push(LidarPoint { range, azimuth: az, elevation: el });
            }
        }
    }
    PointCloud { points, scan_tick }
}

/// Degrades a scan: each return is dropped with probability `dropout`, and
/// returns beyond `range_scale · max_range` are lost.
pub fn degrade_scan<T: Real>(cloud: &PointCloud<T>, dropout: f64, range_scale: T, max_range: T, rng: &mut RandomStream) -> PointCloud<T> {
    let limit = max_range * range_scale;
    let points = cloud
        .points
        .iter()
        .filter(|p| {
            // one draw per ray keeps the stream aligned regardless of range
            let keep = rng.unit() >= dropout;
            keep && p.range <= limit
        })
        .copied()
        .collect();
    PointCloud { points, scan_tick: cloud.scan_tick }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::geometry::Shape;

    fn level() -> UnitQuaternion<f64> {
        UnitQuaternion::identity()
    }

    #[test]
    fn empty_scene_gives_empty_cloud() {
        let c = scan_lidar(&LocalPoint::new(0.0, 0.0, 18.0), &level(), &LidarConfig::default(), &[], 0);
        assert!(c.is_empty());
    }

    #[test]
    fn sphere_ahead_on_boresight() {
        let cfg = LidarConfig::<f64> { channels: 11, ..Default::default() };
        let scene = [Shape::Sphere { center: LocalPoint::new(10.0, 0.0, 18.0), radius: 1.0 }];
        let c = scan_lidar(&LocalPoint::new(0.0, 0.0, 18.0), &level(), &cfg, &scene, 3);
        let min = c.points.iter().map(|p| p.range).fold(f64::INFINITY, f64::min);
        assert!((min - 9.0).abs() < 1e-6, "{min}");
        let bore = c.points.iter().find(|p| p.azimuth == 0.0 && p.elevation.abs() < 1e-12).unwrap();
        assert!((bore.range - 9.0).abs() < 1e-6);
        assert_eq!(c.scan_tick, 3);
    }

    #[test]
    fn twelve_channel_elevations() {
        let e = LidarConfig::<f64>::default().elevations_deg();
        assert_eq!(e.len(), 12);
        for (k, v) in e.iter().enumerate() {
            assert!((v - (-5.0 + k as f64 * 10.0 / 11.0)).abs() < 1e-12);
        }
        assert_eq!(e[0], -5.0);
        assert!((e[11] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut c = LidarConfig::<f64>::default();
        c.horizontal_resolution = 7.0;
        assert!(c.validate().is_err());
        let mut c = LidarConfig::<f64>::default();
        c.vertical_fov = [5.0, -5.0];
        assert!(c.validate().is_err());
        LidarConfig::<f64>::default().validate().unwrap();
    }

    #[test]
    fn ranges_bounded_and_exact_for_box() {
        let cfg = LidarConfig::<f64>::default();
        let b = Shape::Box { min: LocalPoint::new(5.0, -50.0, 0.0), max: LocalPoint::new(8.0, 50.0, 40.0) };
        let c = scan_lidar(&LocalPoint::new(0.0, 0.0, 18.0), &level(), &cfg, &[b], 0);
        assert!(!c.is_empty());
        for p in &c.points {
            assert!(p.range > 0.0 && p.range <= cfg.max_range);
            // the face at east = 5 is hit first: range = 5 / (cos el · cos az)
            let expect = 5.0 / (p.elevation.cos() * p.azimuth.cos());
            assert!((p.range - expect).abs() < 1e-6);
        }
    }

    #[test]
    fn dropout_thins_returns() {
        let cfg = LidarConfig::<f64>::default();
        let b = Shape::Cylinder { center: LocalPoint::new(0.0, 0.0, 0.0), radius: 20.0, height: 40.0 };
        let c = scan_lidar(&LocalPoint::new(0.0, 0.0, 18.0), &level(), &cfg, &[b], 0);
        let mut rng = RandomStream::new(1, "fog");
        let d = degrade_scan(&c, 0.3, 1.0, cfg.max_range, &mut rng);
        let frac = d.len() as f64 / c.len() as f64;
        assert!((frac - 0.7).abs() < 0.05, "{frac}");
        let short = degrade_scan(&c, 0.0, 0.25, cfg.max_range, &mut rng);
        assert!(short.is_empty());
    }
}
