//! Cascaded position → velocity → attitude → rate controller and route tracking.
//!
//! Pitch is reported as the elevation of the nose (body x) above the horizon,
//! so a vehicle tilting forward to accelerate has negative pitch.

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use super::model::{UavParams, UavState, ROTORS};
use crate::scalar::Real;
use crate::world::geometry::LocalPoint;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ControllerGains<T = f64> {
    /// Position error to commanded velocity, 1/s.
    pub position_p: T,
    /// Velocity error to commanded acceleration, 1/s.
    pub velocity_p: T,
    /// Attitude error to commanded body rate, 1/s.
    pub attitude_p: T,
    /// Rate error to torque, as a multiple of the inertia matrix, 1/s.
    pub rate_p: T,
    pub max_speed: T,
    pub max_climb_rate: T,
    pub tilt_limit_deg: T,
    pub max_body_rate: T,
}

impl<T: Real> Default for ControllerGains<T> {
    fn default() -> Self {
        let l = T::lit;
        Self {
            position_p: l(1.0),
            velocity_p: l(2.0),
            attitude_p: l(8.0),
            rate_p: l(20.0),
            max_speed: l(12.0),
            max_climb_rate: l(4.0),
            tilt_limit_deg: l(30.0),
            max_body_rate: l(4.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode")]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub enum SetpointMode<T = f64> {
    PositionHold { target: LocalPoint<T> },
    Waypoint { target: LocalPoint<T> },
    /// Horizontal velocity command; the vertical axis either holds an
    /// altitude or follows the commanded vertical speed.
    Velocity { velocity: [T; 3], hold_altitude: Option<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct ControlSetpoint<T = f64> {
    #[serde(flatten)]
    pub mode: SetpointMode<T>,
    /// Heading of body x, radians counter-clockwise from east.
    pub yaw: T,
    /// Horizontal speed cap, m/s. `None` uses the controller maximum.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speed_limit: Option<T>,
}

impl<T: Real> ControlSetpoint<T> {
    pub fn hold(target: LocalPoint<T>, yaw: T) -> Self {
        Self { mode: SetpointMode::PositionHold { target }, yaw, speed_limit: None }
    }

    pub fn waypoint(target: LocalPoint<T>, yaw: T) -> Self {
        Self { mode: SetpointMode::Waypoint { target }, yaw, speed_limit: None }
    }

    pub fn velocity(velocity: Vector3<T>, hold_altitude: Option<T>, yaw: T) -> Self {
        Self {
            mode: SetpointMode::Velocity { velocity: [velocity.x, velocity.y, velocity.z], hold_altitude },
            yaw,
            speed_limit: None,
        }
    }

    pub fn target(&self) -> Option<&LocalPoint<T>> {
        match &self.mode {
            SetpointMode::PositionHold { target } | SetpointMode::Waypoint { target } => Some(target),
            SetpointMode::Velocity { .. } => None,
        }
    }

    pub fn is_finite(&self) -> bool {
        let mode_ok = match &self.mode {
            SetpointMode::PositionHold { target } | SetpointMode::Waypoint { target } => target.is_finite(),
            SetpointMode::Velocity { velocity, hold_altitude } => {
                velocity.iter().all(|v| v.is_finite()) && hold_altitude.is_none_or(|a| a.is_finite())
            }
        };
        mode_ok && self.yaw.is_finite() && self.speed_limit.is_none_or(|s| s.is_finite())
    }
}

/// Attitude and collective thrust demanded by the outer loops.
#[derive(Debug, Clone)]
pub struct AttitudeCommand<T> {
    pub attitude: UnitQuaternion<T>,
    pub thrust: T,
}

fn clamp_norm<T: Real>(v: Vector3<T>, max: T) -> Vector3<T> {
    let n = v.norm();
    if n > max && n > T::zero() {
        v * (max / n)
    } else {
        v
    }
}

/// Commanded velocity from the setpoint (position loop or direct).
pub fn velocity_command<T: Real>(state: &UavState<T>, setpoint: &ControlSetpoint<T>, gains: &ControllerGains<T>) -> Vector3<T> {
    let cap = setpoint.speed_limit.map_or(gains.max_speed, |s| s.max(T::zero()).min(gains.max_speed));
    let mut v = match &setpoint.mode {
        SetpointMode::PositionHold { target } | SetpointMode::Waypoint { target } => {
            (target.vec() - state.position.vec()) * gains.position_p
        }
        SetpointMode::Velocity { velocity, hold_altitude } => {
            let vz = match hold_altitude {
                Some(alt) => (*alt - state.position.up) * gains.position_p,
                None => velocity[2],
            };
            Vector3::new(velocity[0], velocity[1], vz)
        }
    };
    let h = clamp_norm(Vector3::new(v.x, v.y, T::zero()), cap);
    v.x = h.x;
    v.y = h.y;
    v.z = v.z.clamp_to(-gains.max_climb_rate, gains.max_climb_rate);
    v
}

/// Outer loops: setpoint to desired attitude and collective thrust.
pub fn attitude_command<T: Real>(
    state: &UavState<T>,
    setpoint: &ControlSetpoint<T>,
    params: &UavParams<T>,
    gains: &ControllerGains<T>,
) -> AttitudeCommand<T> {
    let g = params.gravity;
    let v_cmd = velocity_command(state, setpoint, gains);
    // feed forward the vehicle's own drag; wind is unknown to the controller
    let mut acc = (v_cmd - state.velocity) * gains.velocity_p + state.velocity * (params.drag_coeff / params.mass);
    acc.z = acc.z.clamp_to(-g * T::lit(0.7), g * T::lit(1.5));
    let mut force = (acc + Vector3::new(T::zero(), T::zero(), g)) * params.mass;
    let max_h = force.z * gains.tilt_limit_deg.to_radians_().tan();
    let h = clamp_norm(Vector3::new(force.x, force.y, T::zero()), max_h);
    force.x = h.x;
    force.y = h.y;

    let z_d = force.normalize();
    let x_c = Vector3::new(setpoint.yaw.cos(), setpoint.yaw.sin(), T::zero());
    let y_d = z_d.cross(&x_c).normalize();
    let x_d = y_d.cross(&z_d);
    let rot = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[x_d, y_d, z_d]));
    let attitude = UnitQuaternion::from_rotation_matrix(&rot);
    let body_z = state.attitude * Vector3::z();
    let thrust = force.dot(&body_z).max(T::zero());
    AttitudeCommand { attitude, thrust }
}

/// Full cascade down to motor speed commands clamped to `[0, max_motor_speed]`.
pub fn run_controller<T: Real>(
    state: &UavState<T>,
    setpoint: &ControlSetpoint<T>,
    params: &UavParams<T>,
    gains: &ControllerGains<T>,
) -> [T; ROTORS] {
    let cmd = attitude_command(state, setpoint, params, gains);

    let mut q_err = state.attitude.inverse() * cmd.attitude;
    if q_err.w < T::zero() {
        q_err = UnitQuaternion::new_unchecked(-q_err.into_inner());
    }
    let rate_cmd = clamp_norm(q_err.scaled_axis() * gains.attitude_p, gains.max_body_rate);

    let j = params.inertia_matrix();
    let w = state.angular_rate;
    let torque = j * ((rate_cmd - w) * gains.rate_p) + w.cross(&(j * w)) + w * params.damp_coeff;

    let t_max = params.max_rotor_thrust();
    let feasible = |t: &[T; ROTORS]| t.iter().all(|x| *x >= T::zero() && *x <= t_max);
    let mut thrusts = params.allocate(cmd.thrust, &torque);
    if !feasible(&thrusts) {
        // give up yaw authority before roll and pitch
        thrusts = params.allocate(cmd.thrust, &Vector3::new(torque.x, torque.y, T::zero()));
    }
    thrusts.map(|t| (t.clamp_to(T::zero(), t_max) / params.thrust_coeff).sqrt().min(params.max_motor_speed))
}

/// Nose elevation above the horizon, radians.
pub fn pitch_of<T: Real>(attitude: &UnitQuaternion<T>) -> T {
    let nose = attitude * Vector3::x();
    nose.z.clamp_to(-T::one(), T::one()).asin()
}

/// Route following: emits a waypoint setpoint for the current route point,
/// advancing while the vehicle is inside `acceptance_radius`. The last point
/// is held in position-hold mode. Returns the setpoint and updated index.
pub fn track_route<T: Real>(
    state: &UavState<T>,
    route: &[LocalPoint<T>],
    index: usize,
    acceptance_radius: T,
) -> (ControlSetpoint<T>, usize) {
    assert!(!route.is_empty(), "route must not be empty");
    let last = route.len() - 1;
    let mut i = index.min(last);
    while i < last && state.position.distance(&route[i]) <= acceptance_radius {
        i += 1;
    }
    let yaw = leg_heading(route, i).unwrap_or_else(|| state.yaw());
    if i == last {
        (ControlSetpoint::hold(route[last], yaw), last)
    } else {
        (ControlSetpoint::waypoint(route[i], yaw), i)
    }
}

/// Heading of the horizontal leg ending at `route[i]`, searching backwards
/// past vertical legs.
pub fn leg_heading<T: Real>(route: &[LocalPoint<T>], i: usize) -> Option<T> {
    let mut end = i;
    while end > 0 {
        let d = route[end].horizontal() - route[end - 1].horizontal();
        if d.norm() > T::lit(1.0) {
            return Some(d.y.atan2(d.x));
        }
        end -= 1;
    }
    None
}

trait Radians {
    fn to_radians_(self) -> Self;
}

impl<T: Real> Radians for T {
    fn to_radians_(self) -> Self {
        self * T::pi() / T::lit(180.0)
    }
}

#[cfg(test)]
mod tests {
    use super::super::model::step_dynamics;
    use super::*;

    fn sim_to(target: LocalPoint, seconds: f64) -> (UavState, f64) {
        let p = UavParams::<f64>::default();
        let g = ControllerGains::default();
        let mut s = UavState::hovering(LocalPoint::new(0.0, 0.0, 50.0), &p);
        let sp = ControlSetpoint::waypoint(target, 0.0);
        let dt = 1.0 / 240.0;
        let mut arrived = None;
        for k in 0..(seconds / dt) as usize {
            let cmd = run_controller(&s, &sp, &p, &g);
            s = step_dynamics(&s, &p, &cmd, &Vector3::zeros(), dt).unwrap();
            if arrived.is_none() && s.position.distance(&target) < 1.0 && s.velocity.norm() < 0.5 {
                arrived = Some(k as f64 * dt);
            }
        }
        (s, arrived.unwrap_or(f64::INFINITY))
    }

    #[test]
    fn equilibrium_commands_hover() {
        let p = UavParams::<f64>::default();
        let s = UavState::hovering(LocalPoint::new(3.0, 4.0, 20.0), &p);
        let cmd = run_controller(&s, &ControlSetpoint::hold(s.position, 0.0), &p, &ControllerGains::default());
        let wh = p.hover_speed();
        for c in cmd {
            assert!((c - wh).abs() / wh < 0.01, "{c} vs {wh}");
        }
    }

    #[test]
    fn northward_waypoint_pitches_nose_down() {
        let p = UavParams::<f64>::default();
        let s = UavState::hovering(LocalPoint::new(0.0, 0.0, 20.0), &p);
        let north = std::f64::consts::FRAC_PI_2;
        let sp = ControlSetpoint::waypoint(LocalPoint::new(0.0, 10.0, 20.0), north);
        let cmd = attitude_command(&s, &sp, &p, &ControllerGains::default());
        assert!(pitch_of(&cmd.attitude) < 0.0);
        let thrust_axis = cmd.attitude * Vector3::z();
        assert!(thrust_axis.y > 0.0 && thrust_axis.x.abs() < 1e-12);
        // the tilt respects the 30 degree limit
        assert!(thrust_axis.z >= 30f64.to_radians().cos() - 1e-12);
    }

    #[test]
    fn reaches_waypoint_fifty_metres_away() {
        let target = LocalPoint::new(30.0, 40.0, 50.0);
        let (s, t) = sim_to(target, 30.0);
        assert!(t <= 30.0, "arrival time {t}");
        assert!(s.position.distance(&target) < 1.0);
        assert!((s.position.up - 50.0).abs() < 1.0);
    }

    #[test]
    fn output_is_clamped() {
        let p = UavParams::<f64>::default();
        let mut s = UavState::hovering(LocalPoint::new(0.0, 0.0, 20.0), &p);
        s.angular_rate = Vector3::new(30.0, -30.0, 10.0);
        let cmd = run_controller(&s, &ControlSetpoint::hold(LocalPoint::new(500.0, 0.0, 400.0), 2.0), &p, &ControllerGains::default());
        assert!(cmd.iter().all(|c| *c >= 0.0 && *c <= p.max_motor_speed));
    }

    #[test]
    fn track_single_point_route() {
        let p = UavParams::<f64>::default();
        let s = UavState::hovering(LocalPoint::new(0.0, 0.0, 10.0), &p);
        let route = [LocalPoint::new(0.5, 0.0, 10.0)];
        let (sp, i) = track_route(&s, &route, 0, 1.0);
        assert_eq!(i, 0);
        assert!(matches!(sp.mode, SetpointMode::PositionHold { .. }));
    }

    #[test]
    fn track_advances_past_reached_point() {
        let p = UavParams::<f64>::default();
        let s = UavState::hovering(LocalPoint::new(0.0, 0.0, 10.0), &p);
        let route = [LocalPoint::new(0.0, 0.0, 10.0), LocalPoint::new(0.0, 50.0, 10.0)];
        let (sp, i) = track_route(&s, &route, 0, 2.0);
        assert_eq!(i, 1);
        assert_eq!(sp.target(), Some(&route[1]));
        assert!((sp.yaw - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
    }
}
