//! Local-frame points, scene solids and the containment tests used for
//! collision checks, plan approval and LiDAR ray casting.
//!
//! All containment is closed: a point on a boundary counts as inside.

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Real;

/// Position in the scenario's east-north-up frame, metres.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[T; 3]", into = "[T; 3]")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct LocalPoint<T = f64> {
    pub east: T,
    pub north: T,
    pub up: T,
}

impl<T: Real> From<[T; 3]> for LocalPoint<T> {
    fn from(v: [T; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

impl<T: Real> From<LocalPoint<T>> for [T; 3] {
    fn from(p: LocalPoint<T>) -> Self {
        [p.east, p.north, p.up]
    }
}

impl<T: Real> LocalPoint<T> {
    pub fn new(east: T, north: T, up: T) -> Self {
        Self { east, north, up }
    }

    pub fn origin() -> Self {
        Self::new(T::zero(), T::zero(), T::zero())
    }

    #[inline]
    pub fn vec(&self) -> Vector3<T> {
        Vector3::new(self.east, self.north, self.up)
    }

    #[inline]
    pub fn from_vec(v: &Vector3<T>) -> Self {
        Self::new(v.x, v.y, v.z)
    }

    #[inline]
    pub fn horizontal(&self) -> Vector2<T> {
        Vector2::new(self.east, self.north)
    }

    pub fn is_finite(&self) -> bool {
        self.east.is_finite() && self.north.is_finite() && self.up.is_finite()
    }

    pub fn distance(&self, other: &Self) -> T {
        (self.vec() - other.vec()).norm()
    }

    pub fn offset(&self, d: &Vector3<T>) -> Self {
        Self::from_vec(&(self.vec() + d))
    }

    pub fn with_up(&self, up: T) -> Self {
        Self::new(self.east, self.north, up)
    }
}

/// Closest point on segment `[a, b]` to `p`, as the segment parameter in `[0, 1]`.
pub fn closest_param_on_segment<T: Real>(a: &Vector3<T>, b: &Vector3<T>, p: &Vector3<T>) -> T {
    let d = b - a;
    let len2 = d.norm_squared();
    if len2 <= T::zero() {
        return T::zero();
    }
    ((p - a).dot(&d) / len2).clamp_to(T::zero(), T::one())
}

pub fn point_segment_distance<T: Real>(a: &Vector3<T>, b: &Vector3<T>, p: &Vector3<T>) -> T {
    let t = closest_param_on_segment(a, b, p);
    (a + (b - a) * t - p).norm()
}

/// Minimum distance between segments `[p1, q1]` and `[p2, q2]`.
pub fn segment_segment_distance<T: Real>(
    p1: &Vector3<T>,
    q1: &Vector3<T>,
    p2: &Vector3<T>,
    q2: &Vector3<T>,
) -> T {
    let eps = T::lit(1e-12);
    let d1 = q1 - p1;
    let d2 = q2 - p2;
    let r = p1 - p2;
    let a = d1.norm_squared();
    let e = d2.norm_squared();
    let f = d2.dot(&r);
    let (s, t);
    if a <= eps && e <= eps {
        return r.norm();
    }
    if a <= eps {
        s = T::zero();
        t = (f / e).clamp_to(T::zero(), T::one());
    } else {
        let c = d1.dot(&r);
        if e <= eps {
            t = T::zero();
            s = (-c / a).clamp_to(T::zero(), T::one());
        } else {
            let b = d1.dot(&d2);
            let denom = a * e - b * b;
            let mut s0 = if denom > eps * a * e {
                ((b * f - c * e) / denom).clamp_to(T::zero(), T::one())
            } else {
                T::zero()
            };
            let mut t0 = (b * s0 + f) / e;
            if t0 < T::zero() {
                t0 = T::zero();
                s0 = (-c / a).clamp_to(T::zero(), T::one());
            } else if t0 > T::one() {
                t0 = T::one();
                s0 = ((b - c) / a).clamp_to(T::zero(), T::one());
            }
            s = s0;
            t = t0;
        }
    }
    let c1 = p1 + d1 * s;
    let c2 = p2 + d2 * t;
    (c1 - c2).norm()
}

/// Solid shape of a scene obstacle.
///
/// A cylinder is vertical; `center` is the centre of its base disk and the
/// solid spans `[center.up, center.up + height]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum Shape<T = f64> {
    Sphere { center: LocalPoint<T>, radius: T },
    Box { min: LocalPoint<T>, max: LocalPoint<T> },
    Cylinder { center: LocalPoint<T>, radius: T, height: T },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct Obstacle<T = f64> {
    pub id: String,
    pub shape: Shape<T>,
    #[serde(default)]
    pub dynamic: bool,
    #[serde(default = "zero3")]
    pub velocity: [T; 3],
}

fn zero3<T: Real>() -> [T; 3] {
    [T::zero(); 3]
}

impl<T: Real> Shape<T> {
    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            Shape::Sphere { center, radius } => center.is_finite() && *radius > T::zero(),
            Shape::Box { min, max } => {
                min.is_finite()
                    && max.is_finite()
                    && min.east < max.east
                    && min.north < max.north
                    && min.up < max.up
            }
            Shape::Cylinder { center, radius, height } => {
                center.is_finite() && *radius > T::zero() && *height > T::zero()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(SimError::validation(format!("degenerate obstacle shape {self:?}")))
        }
    }

    pub fn contains(&self, p: &Vector3<T>) -> bool {
        match self {
            Shape::Sphere { center, radius } => (p - center.vec()).norm_squared() <= *radius * *radius,
            Shape::Box { min, max } => {
                p.x >= min.east
                    && p.x <= max.east
                    && p.y >= min.north
                    && p.y <= max.north
                    && p.z >= min.up
                    && p.z <= max.up
            }
            Shape::Cylinder { center, radius, height } => {
                let dx = p.x - center.east;
                let dy = p.y - center.north;
                p.z >= center.up && p.z <= center.up + *height && dx * dx + dy * dy <= *radius * *radius
            }
        }
    }

    /// Distance from `p` to the solid (zero inside).
    pub fn distance_to(&self, p: &Vector3<T>) -> T {
        let zero = T::zero();
        match self {
            Shape::Sphere { center, radius } => ((p - center.vec()).norm() - *radius).max(zero),
            Shape::Box { min, max } => {
                let dx = (min.east - p.x).max(zero).max(p.x - max.east);
                let dy = (min.north - p.y).max(zero).max(p.y - max.north);
                let dz = (min.up - p.z).max(zero).max(p.z - max.up);
                (dx * dx + dy * dy + dz * dz).sqrt()
            }
            Shape::Cylinder { center, radius, height } => {
                let h = Vector2::new(p.x - center.east, p.y - center.north).norm();
                let dr = (h - *radius).max(zero);
                let dz = (center.up - p.z).max(zero).max(p.z - (center.up + *height));
                (dr * dr + dz * dz).sqrt()
            }
        }
    }

    pub fn translated(&self, d: &Vector3<T>) -> Self {
        match self {
            Shape::Sphere { center, radius } => Shape::Sphere { center: center.offset(d), radius: *radius },
            Shape::Box { min, max } => Shape::Box { min: min.offset(d), max: max.offset(d) },
            Shape::Cylinder { center, radius, height } => Shape::Cylinder {
                center: center.offset(d),
                radius: *radius,
                height: *height,
            },
        }
    }

    /// Nearest intersection distance along the unit ray `origin + t·dir`,
    /// `t ∈ (0, max_t]`. An origin inside the solid reports the exit distance.
    pub fn ray_hit(&self, origin: &Vector3<T>, dir: &Vector3<T>, max_t: T) -> Option<T> {
        let t = match self {
            Shape::Sphere { center, radius } => ray_sphere(origin, dir, &center.vec(), *radius),
            Shape::Box { min, max } => ray_box(origin, dir, &min.vec(), &max.vec()),
            Shape::Cylinder { center, radius, height } => ray_cylinder(origin, dir, center, *radius, *height),
        }?;
        (t > T::zero() && t <= max_t).then_some(t)
    }
}

fn ray_sphere<T: Real>(o: &Vector3<T>, d: &Vector3<T>, c: &Vector3<T>, r: T) -> Option<T> {
    let oc = o - c;
    let b = oc.dot(d);
    let cc = oc.norm_squared() - r * r;
    let disc = b * b - cc;
    if disc < T::zero() {
        return None;
    }
    let s = disc.sqrt();
    let t0 = -b - s;
    let t1 = -b + s;
    if t0 > T::zero() {
        Some(t0)
    } else if t1 > T::zero() {
        Some(t1)
    } else {
        None
    }
}

fn ray_box<T: Real>(o: &Vector3<T>, d: &Vector3<T>, lo: &Vector3<T>, hi: &Vector3<T>) -> Option<T> {
    let mut tmin = T::lit(f64::NEG_INFINITY);
    let mut tmax = T::lit(f64::INFINITY);
    for i in 0..3 {
        if d[i] == T::zero() {
            if o[i] < lo[i] || o[i] > hi[i] {
                return None;
            }
        } else {
            let inv = T::one() / d[i];
            let mut t1 = (lo[i] - o[i]) * inv;
            let mut t2 = (hi[i] - o[i]) * inv;
            if t1 > t2 {
                std::mem::swap(&mut t1, &mut t2);
            }
            tmin = tmin.max(t1);
            tmax = tmax.min(t2);
            if tmin > tmax {
                return None;
            }
        }
    }
    if tmin > T::zero() {
        Some(tmin)
    } else if tmax > T::zero() {
        Some(tmax)
    } else {
        None
    }
}

fn ray_cylinder<T: Real>(o: &Vector3<T>, d: &Vector3<T>, base: &LocalPoint<T>, r: T, h: T) -> Option<T> {
    let zero = T::zero();
    let z0 = base.up;
    let z1 = base.up + h;
    let ox = o.x - base.east;
    let oy = o.y - base.north;
    let mut best: Option<T> = None;
    let mut consider = |t: T| {
        if t > zero && best.is_none_or(|b| t < b) {
            best = Some(t);
        }
    };
    // lateral surface
    let a = d.x * d.x + d.y * d.y;
    if a > zero {
        let b = ox * d.x + oy * d.y;
        let c = ox * ox + oy * oy - r * r;
        let disc = b * b - a * c;
        if disc >= zero {
            let s = disc.sqrt();
            for t in [(-b - s) / a, (-b + s) / a] {
                let z = o.z + d.z * t;
                if z >= z0 && z <= z1 {
                    consider(t);
                }
            }
        }
    }
    // caps
    if d.z != zero {
        for zc in [z0, z1] {
            let t = (zc - o.z) / d.z;
            let x = ox + d.x * t;
            let y = oy + d.y * t;
            if x * x + y * y <= r * r {
                consider(t);
            }
        }
    }
    best
}

impl<T: Real> Obstacle<T> {
    pub fn new_static(id: impl Into<String>, shape: Shape<T>) -> Self {
        Self { id: id.into(), shape, dynamic: false, velocity: [T::zero(); 3] }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        if !self.dynamic && self.velocity.iter().any(|v| *v != T::zero()) {
            return Err(SimError::validation(format!("static obstacle `{}` has non-zero velocity", self.id)));
        }
        Ok(())
    }

    pub fn velocity_vec(&self) -> Vector3<T> {
        Vector3::new(self.velocity[0], self.velocity[1], self.velocity[2])
    }
}

/// True iff the closed segment `[a, b]` meets the closed solid.
pub fn segment_intersects_obstacle<T: Real>(a: &LocalPoint<T>, b: &LocalPoint<T>, obs: &Obstacle<T>) -> bool {
    segment_intersects_shape(&a.vec(), &b.vec(), &obs.shape)
}

pub fn segment_intersects_shape<T: Real>(a: &Vector3<T>, b: &Vector3<T>, shape: &Shape<T>) -> bool {
    let zero = T::zero();
    let one = T::one();
    let d = b - a;
    if d.norm_squared() == zero {
        return shape.contains(a);
    }
    match shape {
        Shape::Sphere { center, radius } => point_segment_distance(a, b, &center.vec()) <= *radius,
        Shape::Box { min, max } => {
            let lo = min.vec();
            let hi = max.vec();
            let mut t0 = zero;
            let mut t1 = one;
            for i in 0..3 {
                if d[i] == zero {
                    if a[i] < lo[i] || a[i] > hi[i] {
                        return false;
                    }
                } else {
                    let mut ta = (lo[i] - a[i]) / d[i];
                    let mut tb = (hi[i] - a[i]) / d[i];
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    t0 = t0.max(ta);
                    t1 = t1.min(tb);
                    if t0 > t1 {
                        return false;
                    }
                }
            }
            true
        }
        Shape::Cylinder { center, radius, height } => {
            // clip to the height interval
            let (mut t0, mut t1) = (zero, one);
            let z0 = center.up;
            let z1 = center.up + *height;
            if d.z == zero {
                if a.z < z0 || a.z > z1 {
                    return false;
                }
            } else {
                let mut ta = (z0 - a.z) / d.z;
                let mut tb = (z1 - a.z) / d.z;
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
            // minimum horizontal distance to the axis over [t0, t1]
            let ox = a.x - center.east;
            let oy = a.y - center.north;
            let qa = d.x * d.x + d.y * d.y;
            let t = if qa == zero {
                t0
            } else {
                (-(ox * d.x + oy * d.y) / qa).clamp_to(t0, t1)
            };
            let x = ox + d.x * t;
            let y = oy + d.y * t;
            x * x + y * y <= *radius * *radius
        }
    }
}

/// Prism-shaped restricted volume over a convex footprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoFlyZone {
    pub id: String,
    /// Counter-clockwise `(east, north)` vertices.
    pub footprint: Vec<[f64; 2]>,
    pub floor: f64,
    pub ceiling: f64,
    /// Inclusive `[start, end]` ticks.
    pub active_window: [u64; 2],
}

impl NoFlyZone {
    pub fn validate(&self) -> Result<()> {
        let n = self.footprint.len();
        if n < 3 {
            return Err(SimError::validation(format!("no-fly zone `{}` needs at least 3 vertices", self.id)));
        }
        if !(self.floor < self.ceiling) {
            return Err(SimError::validation(format!("no-fly zone `{}` floor must be below ceiling", self.id)));
        }
        if self.active_window[0] > self.active_window[1] {
            return Err(SimError::validation(format!("no-fly zone `{}` has an empty window", self.id)));
        }
        for i in 0..n {
            let [ax, ay] = self.footprint[i];
            let [bx, by] = self.footprint[(i + 1) % n];
            let [cx, cy] = self.footprint[(i + 2) % n];
            let cross = (bx - ax) * (cy - by) - (by - ay) * (cx - bx);
            if !(cross > 0.0) {
                return Err(SimError::validation(format!(
                    "no-fly zone `{}` footprint must be convex and counter-clockwise",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn active_at(&self, tick: u64) -> bool {
        tick >= self.active_window[0] && tick <= self.active_window[1]
    }
}

/// True iff the zone is active at `at_tick` and the closed segment meets the
/// closed prism. The segment is clipped against the altitude slab and every
/// footprint half-plane.
pub fn segment_intersects_nfz(a: &LocalPoint, b: &LocalPoint, zone: &NoFlyZone, at_tick: u64) -> bool {
    if !zone.active_at(at_tick) {
        return false;
    }
    let d = b.vec() - a.vec();
    let (mut t0, mut t1) = (0.0_f64, 1.0_f64);
    let mut clip = |f0: f64, df: f64| -> bool {
        // keep t where f0 + t·df >= 0
        if df == 0.0 {
            return f0 >= 0.0;
        }
        let t = -f0 / df;
        if df > 0.0 {
            t0 = t0.max(t);
        } else {
            t1 = t1.min(t);
        }
        t0 <= t1
    };
    if !clip(a.up - zone.floor, d.z) || !clip(zone.ceiling - a.up, -d.z) {
        return false;
    }
    let n = zone.footprint.len();
    for i in 0..n {
        let [vx, vy] = zone.footprint[i];
        let [wx, wy] = zone.footprint[(i + 1) % n];
        let (ex, ey) = (wx - vx, wy - vy);
        let f0 = ex * (a.north - vy) - ey * (a.east - vx);
        let df = ex * d.y - ey * d.x;
        if !clip(f0, df) {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn p(e: f64, n: f64, u: f64) -> LocalPoint {
        LocalPoint::new(e, n, u)
    }

    fn sphere(c: LocalPoint, r: f64) -> Obstacle {
        Obstacle::new_static("s", Shape::Sphere { center: c, radius: r })
    }

    #[test]
    fn segment_through_sphere_center() {
        assert!(segment_intersects_obstacle(&p(0., 0., 0.), &p(10., 0., 0.), &sphere(p(5., 0., 0.), 1.0)));
        assert!(!segment_intersects_obstacle(&p(0., 0., 0.), &p(10., 0., 0.), &sphere(p(5., 5., 0.), 1.0)));
    }

    #[test]
    fn grazing_tangent_counts() {
        // closed-form distance from (5,1,0) to the x-axis segment is exactly 1
        assert!(segment_intersects_obstacle(&p(0., 0., 0.), &p(10., 0., 0.), &sphere(p(5., 1., 0.), 1.0)));
        assert!(!segment_intersects_obstacle(&p(0., 0., 0.), &p(10., 0., 0.), &sphere(p(5., 1.0 + 1e-9, 0.), 1.0)));
    }

    #[test]
    fn degenerate_segment_is_point_test() {
        let s = sphere(p(0., 0., 0.), 1.0);
        assert!(segment_intersects_obstacle(&p(0.5, 0., 0.), &p(0.5, 0., 0.), &s));
        assert!(!segment_intersects_obstacle(&p(1.5, 0., 0.), &p(1.5, 0., 0.), &s));
    }

    #[test]
    fn cylinder_height_interval() {
        let c = Obstacle::new_static(
            "c",
            Shape::Cylinder { center: p(0., 0., 0.), radius: 2.0, height: 10.0 },
        );
        assert!(segment_intersects_obstacle(&p(-5., 0., 5.), &p(5., 0., 5.), &c));
        assert!(!segment_intersects_obstacle(&p(-5., 0., 10.5), &p(5., 0., 10.5), &c));
        // diagonal that enters the height band only outside the disk
        assert!(!segment_intersects_obstacle(&p(-5., 0., 20.), &p(-3., 0., 0.), &c));
    }

    fn random_shape(rng: &mut impl Rng) -> Shape {
        let c = p(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0));
        match rng.random_range(0..3) {
            0 => Shape::Sphere { center: c, radius: rng.random_range(0.5..3.0) },
            1 => {
                let ext = p(rng.random_range(0.5..4.0), rng.random_range(0.5..4.0), rng.random_range(0.5..4.0));
                Shape::Box { min: c, max: c.offset(&ext.vec()) }
            }
            _ => Shape::Cylinder { center: c, radius: rng.random_range(0.5..3.0), height: rng.random_range(0.5..6.0) },
        }
    }

    #[test]
    fn agrees_with_dense_sampling() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let mut checked = 0;
        while checked < 1000 {
            let shape = random_shape(&mut rng);
            let a = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let b = Vector3::new(rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0));
            let sampled = (0..=10_000).any(|i| shape.contains(&(a + (b - a) * (i as f64 / 10_000.0))));
            let exact = segment_intersects_shape(&a, &b, &shape);
            if sampled != exact {
                // Sampling can miss a sliver; the exact answer must then be a
                // near-boundary hit.
                assert!(exact && !sampled, "sampling found a hit the exact test missed");
                let min_dist = (0..=10_000)
                    .map(|i| shape.distance_to(&(a + (b - a) * (i as f64 / 10_000.0))))
                    .fold(f64::INFINITY, f64::min);
                assert!(min_dist < (b - a).norm() / 10_000.0, "exact hit far from solid: {min_dist}");
            }
            checked += 1;
        }
    }

    #[test]
    fn ray_hits_sphere_front() {
        let s = Shape::Sphere { center: p(10., 0., 0.), radius: 1.0 };
        let t = s.ray_hit(&Vector3::zeros(), &Vector3::x(), 100.0).unwrap();
        assert!((t - 9.0).abs() < 1e-12);
        assert!(s.ray_hit(&Vector3::zeros(), &Vector3::x(), 8.5).is_none());
        assert!(s.ray_hit(&Vector3::zeros(), &(-Vector3::x()), 100.0).is_none());
    }

    #[test]
    fn ray_hits_box_and_cylinder() {
        let b = Shape::Box { min: p(5., -1., -1.), max: p(6., 1., 1.) };
        assert_eq!(b.ray_hit(&Vector3::zeros(), &Vector3::x(), 50.0), Some(5.0));
        let c = Shape::Cylinder { center: p(10., 0., -5.), radius: 2.0, height: 10.0 };
        assert!((c.ray_hit(&Vector3::zeros(), &Vector3::x(), 50.0).unwrap() - 8.0).abs() < 1e-12);
        let down = Vector3::new(0.0, 0.0, -1.0);
        assert!((c.ray_hit(&Vector3::new(10.0, 0.0, 20.0), &down, 50.0).unwrap() - 15.0).abs() < 1e-12);
    }

    fn square_zone() -> NoFlyZone {
        NoFlyZone {
            id: "z".into(),
            footprint: vec![[0., 0.], [10., 0.], [10., 10.], [0., 10.]],
            floor: 0.0,
            ceiling: 100.0,
            active_window: [0, 1000],
        }
    }

    #[test]
    fn nfz_altitude_and_window() {
        let z = square_zone();
        z.validate().unwrap();
        assert!(!segment_intersects_nfz(&p(-5., 5., 150.), &p(15., 5., 150.), &z, 10));
        assert!(segment_intersects_nfz(&p(-5., 5., 50.), &p(15., 5., 50.), &z, 10));
        assert!(!segment_intersects_nfz(&p(-5., 5., 50.), &p(15., 5., 50.), &z, 1001));
    }

    #[test]
    fn nfz_boundary_is_inside() {
        let z = square_zone();
        assert!(segment_intersects_nfz(&p(-5., 5., 50.), &p(0., 5., 50.), &z, 0));
        assert!(segment_intersects_nfz(&p(-5., -5., 100.), &p(5., 5., 100.), &z, 0));
        assert!(!segment_intersects_nfz(&p(-5., 5., 50.), &p(-1e-9, 5., 50.), &z, 0));
    }

    #[test]
    fn nfz_rejects_clockwise_or_concave() {
        let mut z = square_zone();
        z.footprint.reverse();
        assert!(z.validate().is_err());
        let mut z = square_zone();
        z.footprint = vec![[0., 0.], [10., 0.], [5., 2.], [10., 10.], [0., 10.]];
        assert!(z.validate().is_err());
    }
}
