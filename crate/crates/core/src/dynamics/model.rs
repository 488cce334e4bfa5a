//! Rigid-body quadrotor model with first-order motors.
//!
//! Frames: world is ENU, body is FLU (x forward, y left, z up). The attitude
//! quaternion rotates body vectors into the world frame. Rotors sit on the
//! diagonals of an X frame:
//!
//! | motor | position    | spin | yaw reaction |
//! |-------|-------------|------|--------------|
//! | 0     | front-right | CCW  | −Q           |
//! | 1     | rear-left   | CCW  | −Q           |
//! | 2     | front-left  | CW   | +Q           |
//! | 3     | rear-right  | CW   | +Q           |

use nalgebra::{Matrix3, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use crate::scalar::Real;
use crate::world::geometry::LocalPoint;

pub const ROTORS: usize = 4;

/// Sign of each rotor's contribution to roll, pitch and yaw torque.
const ROLL_SIGN: [f64; ROTORS] = [-1.0, 1.0, 1.0, -1.0];
const PITCH_SIGN: [f64; ROTORS] = [-1.0, 1.0, -1.0, 1.0];
const YAW_SIGN: [f64; ROTORS] = [-1.0, -1.0, 1.0, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct UavParams<T = f64> {
    pub mass: T,
    pub gravity: T,
    /// Body-frame inertia, rows.
    pub inertia: [[T; 3]; 3],
    pub thrust_coeff: T,
    pub torque_coeff: T,
    pub motor_tau: T,
    pub drag_coeff: T,
    pub damp_coeff: T,
    pub arm_length: T,
    pub rotor_count: u32,
    pub max_motor_speed: T,
    pub body_radius: T,
}

impl<T: Real> Default for UavParams<T> {
    fn default() -> Self {
        let l = T::lit;
        Self {
            mass: l(1.5),
            gravity: l(9.81),
            inertia: [[l(0.029), l(0.0), l(0.0)], [l(0.0), l(0.029), l(0.0)], [l(0.0), l(0.0), l(0.055)]],
            thrust_coeff: l(1.2e-5),
            torque_coeff: l(2.0e-7),
            motor_tau: l(0.02),
            drag_coeff: l(0.25),
            damp_coeff: l(0.01),
            arm_length: l(0.225),
            rotor_count: 4,
            max_motor_speed: l(1200.0),
            body_radius: l(0.3),
        }
    }
}

impl<T: Real> UavParams<T> {
    pub fn inertia_matrix(&self) -> Matrix3<T> {
        let j = &self.inertia;
        Matrix3::new(j[0][0], j[0][1], j[0][2], j[1][0], j[1][1], j[1][2], j[2][0], j[2][1], j[2][2])
    }

    pub fn validate(&self) -> Result<()> {
        let scalars = [
            ("mass", self.mass),
            ("gravity", self.gravity),
            ("thrust_coeff", self.thrust_coeff),
            ("torque_coeff", self.torque_coeff),
            ("motor_tau", self.motor_tau),
            ("drag_coeff", self.drag_coeff),
            ("damp_coeff", self.damp_coeff),
            ("arm_length", self.arm_length),
            ("max_motor_speed", self.max_motor_speed),
            ("body_radius", self.body_radius),
        ];
        for (name, v) in scalars {
            if !(v > T::zero() && v.is_finite()) {
                return Err(SimError::validation(format!("UAV parameter `{name}` must be positive")));
            }
        }
        if self.rotor_count != ROTORS as u32 {
            return Err(SimError::validation("only four-rotor airframes are supported"));
        }
        let j = self.inertia_matrix();
        if (j - j.transpose()).abs().max() > T::lit(1e-12) * j.abs().max() {
            return Err(SimError::validation("inertia matrix must be symmetric"));
        }
        if j.cholesky().is_none() {
            return Err(SimError::validation("inertia matrix must be positive definite"));
        }
        Ok(())
    }

    /// Per-motor speed at which total thrust balances weight.
    pub fn hover_speed(&self) -> T {
        (self.mass * self.gravity / (T::lit(ROTORS as f64) * self.thrust_coeff)).sqrt()
    }

    pub fn max_rotor_thrust(&self) -> T {
        self.thrust_coeff * self.max_motor_speed * self.max_motor_speed
    }

    fn moment_arm(&self) -> T {
        self.arm_length / T::lit(std::f64::consts::SQRT_2)
    }

    /// Total thrust and body torque produced by per-rotor thrusts and drag torques.
    pub fn mix(&self, thrust: &[T; ROTORS], rotor_torque: &[T; ROTORS]) -> (T, Vector3<T>) {
        let d = self.moment_arm();
        let mut total = T::zero();
        let mut tau = Vector3::zeros();
        for i in 0..ROTORS {
            total += thrust[i];
            tau.x += T::lit(ROLL_SIGN[i]) * d * thrust[i];
            tau.y += T::lit(PITCH_SIGN[i]) * d * thrust[i];
            tau.z += T::lit(YAW_SIGN[i]) * rotor_torque[i];
        }
        (total, tau)
    }

    /// Inverse of [`UavParams::mix`]: per-rotor thrusts realising a total
    /// thrust and body torque. Entries may be negative when infeasible.
    pub fn allocate(&self, total: T, torque: &Vector3<T>) -> [T; ROTORS] {
        let d = self.moment_arm();
        let k = self.torque_coeff / self.thrust_coeff;
        let quarter = T::lit(0.25);
        std::array::from_fn(|i| {
            quarter
                * (total
                    + T::lit(ROLL_SIGN[i]) * torque.x / d
                    + T::lit(PITCH_SIGN[i]) * torque.y / d
                    + T::lit(YAW_SIGN[i]) * torque.z / k)
        })
    }
}

/// Full kinematic and dynamic state of one vehicle.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(bound(serialize = "T: Real + Serialize", deserialize = "T: Real + Deserialize<'de>"))]
pub struct UavState<T = f64> {
    pub position: LocalPoint<T>,
    pub velocity: Vector3<T>,
    pub attitude: UnitQuaternion<T>,
    pub angular_rate: Vector3<T>,
    pub motor_speed: [T; ROTORS],
    /// Per-motor efficiency in `[0, 1]`.
    pub health: [T; ROTORS],
}

impl<T: Real> PartialEq for UavState<T> {
    fn eq(&self, other: &Self) -> bool {
        self.position == other.position
            && self.velocity == other.velocity
            && self.attitude.coords == other.attitude.coords
            && self.angular_rate == other.angular_rate
            && self.motor_speed == other.motor_speed
            && self.health == other.health
    }
}

impl<T: Real> UavState<T> {
    /// Level, at rest, motors stopped, all motors healthy.
    pub fn at_rest(position: LocalPoint<T>) -> Self {
        Self {
            position,
            velocity: Vector3::zeros(),
            attitude: UnitQuaternion::identity(),
            angular_rate: Vector3::zeros(),
            motor_speed: [T::zero(); ROTORS],
            health: [T::one(); ROTORS],
        }
    }

    /// Level and at rest with motors spinning at hover speed.
    pub fn hovering(position: LocalPoint<T>, params: &UavParams<T>) -> Self {
        Self { motor_speed: [params.hover_speed(); ROTORS], ..Self::at_rest(position) }
    }

    pub fn is_finite(&self) -> bool {
        self.position.is_finite()
            && self.velocity.iter().all(|v| v.is_finite())
            && self.attitude.coords.iter().all(|v| v.is_finite())
            && self.angular_rate.iter().all(|v| v.is_finite())
            && self.motor_speed.iter().all(|v| v.is_finite())
            && self.health.iter().all(|v| v.is_finite())
    }

    /// Heading of the body x axis, radians counter-clockwise from east.
    pub fn yaw(&self) -> T {
        let x = self.attitude * Vector3::x();
        x.y.atan2(x.x)
    }

    /// Mechanical energy: translational, potential and rotational.
    pub fn energy(&self, params: &UavParams<T>) -> T {
        let half = T::lit(0.5);
        let j = params.inertia_matrix();
        half * params.mass * self.velocity.norm_squared()
            + params.mass * params.gravity * self.position.up
            + half * self.angular_rate.dot(&(j * self.angular_rate))
    }
}

/// Advances one semi-implicit Euler substep.
pub fn step_dynamics<T: Real>(
    state: &UavState<T>,
    params: &UavParams<T>,
    motor_cmd: &[T; ROTORS],
    wind: &Vector3<T>,
    dt: T,
) -> Result<UavState<T>> {
    if !(dt > T::zero() && dt <= T::lit(0.01)) {
        return Err(SimError::validation(format!("substep {} outside (0, 0.01] s", dt.to_f64_lossy())));
    }
    if !state.is_finite() || !motor_cmd.iter().all(|c| c.is_finite()) || !wind.iter().all(|w| w.is_finite()) {
        return Err(SimError::Numeric("non-finite dynamics input".into()));
    }
    let max = params.max_motor_speed;
    if motor_cmd.iter().any(|c| *c < T::zero() || *c > max) {
        return Err(SimError::validation("motor command outside [0, max_motor_speed]"));
    }

    // motors
    let alpha = dt / params.motor_tau;
    let mut motor_speed = state.motor_speed;
    let mut thrust = [T::zero(); ROTORS];
    let mut rotor_torque = [T::zero(); ROTORS];
    for i in 0..ROTORS {
        let w = (motor_speed[i] + alpha * (motor_cmd[i] - motor_speed[i])).clamp_to(T::zero(), max);
        motor_speed[i] = w;
        let effective = state.health[i] * w;
        let sq = effective * effective;
        thrust[i] = params.thrust_coeff * sq;
        rotor_torque[i] = params.torque_coeff * sq;
    }
    let (total, mixer_torque) = params.mix(&thrust, &rotor_torque);

    // forces in the world frame
    let thrust_world = state.attitude * Vector3::new(T::zero(), T::zero(), total);
    let drag = (state.velocity - wind) * (-params.drag_coeff);
    let gravity = Vector3::new(T::zero(), T::zero(), -params.mass * params.gravity);
    let accel = (thrust_world + drag + gravity) / params.mass;

    // rotational dynamics (body frame)
    let j = params.inertia_matrix();
    let w = state.angular_rate;
    let torque = mixer_torque - w * params.damp_coeff;
    let j_inv = j.try_inverse().ok_or_else(|| SimError::Numeric("singular inertia".into()))?;
    // implicit midpoint on body momentum: keeps |L| and spin energy of a
    // torque-free body, where explicit Euler on -w×Jw pumps energy in
    let l0 = j * w;
    let mut l1 = l0 + (torque - w.cross(&l0)) * dt;
    for _ in 0..8 {
        let lm = (l0 + l1) * T::lit(0.5);
        let next = l0 + (torque - (j_inv * lm).cross(&lm)) * dt;
        let done = (next - l1).norm() <= T::lit(1e-15) * (T::one() + l1.norm());
        l1 = next;
        if done {
            break;
        }
    }
    let angular_rate = j_inv * l1;
    let attitude = state.attitude * UnitQuaternion::from_scaled_axis(angular_rate * dt);
    let attitude = UnitQuaternion::new_normalize(attitude.into_inner());

    let velocity = state.velocity + accel * dt;
    let position = state.position.offset(&(velocity * dt));

    let next = UavState { position, velocity, attitude, angular_rate, motor_speed, health: state.health };
    if !next.is_finite() {
        return Err(SimError::Numeric("dynamics diverged".into()));
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn params() -> UavParams<f64> {
        UavParams { mass: 1.0, gravity: 9.81, thrust_coeff: 1e-5, ..Default::default() }
    }

    #[test]
    fn default_params_validate() {
        UavParams::<f64>::default().validate().unwrap();
        UavParams::<f32>::default().validate().unwrap();
        let mut p = params();
        p.inertia[0][1] = 0.01;
        assert!(p.validate().is_err());
        let mut p = params();
        p.mass = 0.0;
        assert!(p.validate().is_err());
    }

    #[test]
    fn hover_speed_balances_weight() {
        let p = params();
        let w = p.hover_speed();
        assert!((w - (9.81f64 / 4e-5).sqrt()).abs() < 1e-9);
        assert!((w - 495.23).abs() < 0.01);
    }

    #[test]
    fn hover_is_a_fixed_point() {
        let p = params();
        let mut s = UavState::hovering(LocalPoint::new(0.0, 0.0, 50.0), &p);
        let cmd = [p.hover_speed(); 4];
        for _ in 0..240 {
            let n = step_dynamics(&s, &p, &cmd, &Vector3::zeros(), 1.0 / 240.0).unwrap();
            assert!(n.position.distance(&s.position) < 1e-9);
            s = n;
        }
    }

    #[test]
    fn free_fall_matches_ballistic_drop() {
        let p = params();
        let mut s = UavState::at_rest(LocalPoint::new(0.0, 0.0, 100.0));
        let dt = 1.0 / 240.0;
        for _ in 0..120 {
            s = step_dynamics(&s, &p, &[0.0; 4], &Vector3::zeros(), dt).unwrap();
        }
        let drop = 100.0 - s.position.up;
        // closed form under linear drag: (g/k)(t - (1 - e^{-kt})/k), k = c/m
        let (g, t, k) = (9.81, 0.5, p.drag_coeff / p.mass);
        let with_drag = g / k * (t - (1.0 - (-k * t).exp()) / k);
        assert!((drop - with_drag).abs() / with_drag < 0.01, "drop {drop} vs {with_drag}");
        // drag only shortens the drop; the integrator adds at most a factor (1 + 1/n)
        let ballistic = 0.5 * g * t * t;
        assert!(drop <= ballistic * (1.0 + 1.0 / 120.0));
    }

    #[test]
    fn dead_motor_induces_rotation() {
        let p = params();
        let mut s = UavState::hovering(LocalPoint::new(0.0, 0.0, 50.0), &p);
        s.health = [0.0, 1.0, 1.0, 1.0];
        let n = step_dynamics(&s, &p, &[p.hover_speed(); 4], &Vector3::zeros(), 1.0 / 240.0).unwrap();
        assert!(n.angular_rate.norm() > 0.0);
    }

    #[test]
    fn input_checks() {
        let p = params();
        let s = UavState::at_rest(LocalPoint::new(0.0, 0.0, 0.0));
        assert!(matches!(step_dynamics(&s, &p, &[0.0; 4], &Vector3::zeros(), 0.02), Err(SimError::Validation(_))));
        assert!(matches!(step_dynamics(&s, &p, &[0.0; 4], &Vector3::zeros(), 0.0), Err(SimError::Validation(_))));
        assert!(matches!(
            step_dynamics(&s, &p, &[f64::NAN, 0.0, 0.0, 0.0], &Vector3::zeros(), 0.004),
            Err(SimError::Numeric(_))
        ));
        assert!(step_dynamics(&s, &p, &[5000.0, 0.0, 0.0, 0.0], &Vector3::zeros(), 0.004).is_err());
    }

    #[test]
    fn mixer_round_trip_and_symmetry() {
        let p = UavParams::<f64>::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let total = rng.random_range(0.0..30.0);
            let tau = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-0.05..0.05));
            let t = p.allocate(total, &tau);
            let k = p.torque_coeff / p.thrust_coeff;
            let q = t.map(|x| x * k);
            let (tot2, tau2) = p.mix(&t, &q);
            assert!((tot2 - total).abs() < 1e-9);
            assert!((tau2 - tau).norm() < 1e-9);
            assert!((t.iter().sum::<f64>() - total).abs() < 1e-9);
        }
        // mirroring left/right swaps motors 0<->2 and 1<->3: roll flips, pitch is kept
        let t = [1.0, 2.0, 3.0, 4.5];
        let mirrored = [t[2], t[3], t[0], t[1]];
        let (_, a) = p.mix(&t, &[0.0; 4]);
        let (_, b) = p.mix(&mirrored, &[0.0; 4]);
        assert!((a.x + b.x).abs() < 1e-12);
        assert!((a.y - b.y).abs() < 1e-12);
        // mirroring front/back swaps 0<->3 and 1<->2: pitch flips
        let mirrored = [t[3], t[2], t[1], t[0]];
        let (_, c) = p.mix(&mirrored, &[0.0; 4]);
        assert!((a.y + c.y).abs() < 1e-12);
        assert!((a.x - c.x).abs() < 1e-12);
    }

    #[test]
    fn healthy_vector_matches_default_path_bitwise() {
        let p = UavParams::<f64>::default();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut a = UavState::hovering(LocalPoint::new(0.0, 0.0, 10.0), &p);
        let mut b = a.clone();
        b.health = [1.0; 4];
        for _ in 0..1000 {
            let cmd: [f64; 4] = std::array::from_fn(|_| rng.random_range(400.0..700.0));
            a = step_dynamics(&a, &p, &cmd, &Vector3::new(1.0, 0.0, 0.0), 1.0 / 240.0).unwrap();
            b = step_dynamics(&b, &p, &cmd, &Vector3::new(1.0, 0.0, 0.0), 1.0 / 240.0).unwrap();
        }
        assert_eq!(a, b);
    }

    #[test]
    fn runs_in_single_precision() {
        let p = UavParams::<f32>::default();
        let s = UavState::hovering(LocalPoint::new(0.0f32, 0.0, 10.0), &p);
        let n = step_dynamics(&s, &p, &[p.hover_speed(); 4], &Vector3::zeros(), 1.0 / 240.0).unwrap();
        assert!((n.position.up - 10.0).abs() < 1e-4);
    }

    fn tumbling() -> UavState<f64> {
        let mut s = UavState::at_rest(LocalPoint::new(0.0, 0.0, 100.0));
        s.velocity = Vector3::new(3.0, -1.0, 5.0);
        s.angular_rate = Vector3::new(1.0, 0.5, 2.0);
        s
    }

    #[test]
    fn quaternion_norm_stays_unit_over_a_million_steps() {
        let p = UavParams { drag_coeff: 0.0, damp_coeff: 0.0, ..params() };
        let mut s = tumbling();
        let spin = |s: &UavState<f64>| 0.5 * s.angular_rate.dot(&(p.inertia_matrix() * s.angular_rate));
        let e0 = spin(&s);
        let mut worst = 0.0f64;
        let mut spin_err = 0.0f64;
        for _ in 0..1_000_000 {
            s = step_dynamics(&s, &p, &[0.0; 4], &Vector3::zeros(), 1.0 / 240.0).unwrap();
            // keep it from falling out of f64 comfort over 70 minutes
            s.position.up = 100.0;
            s.velocity = Vector3::zeros();
            worst = worst.max((s.attitude.into_inner().norm() - 1.0).abs());
            spin_err = spin_err.max((spin(&s) - e0).abs() / e0);
        }
        assert!(worst < 1e-9, "drift {worst}");
        assert!(spin_err < 0.01, "rotational energy error {spin_err}");
    }

    #[test]
    fn undamped_energy_is_conserved() {
        let p = UavParams { drag_coeff: 0.0, damp_coeff: 0.0, ..params() };
        let mut s = tumbling();
        let e0 = s.energy(&p);
        let dt = 1.0 / 240.0;
        let mut worst = 0.0f64;
        for _ in 0..2400 {
            s = step_dynamics(&s, &p, &[0.0; 4], &Vector3::zeros(), dt).unwrap();
            worst = worst.max((s.energy(&p) - e0).abs() / e0);
        }
        assert!(worst < 0.005, "relative energy error {worst}");
    }

    #[test]
    fn halving_the_step_halves_the_error() {
        let p = params();
        let w = p.hover_speed();
        let cmd = [w * 1.02, w * 0.99, w * 1.01, w * 0.98];
        let run = |dt: f64| {
            let mut s = UavState::hovering(LocalPoint::new(0.0, 0.0, 50.0), &p);
            for _ in 0..(1.0 / dt).round() as usize {
                s = step_dynamics(&s, &p, &cmd, &Vector3::new(2.0, 0.0, 0.0), dt).unwrap();
            }
            s.position.vec()
        };
        let reference = run(0.01 / 128.0);
        let e1 = (run(0.01) - reference).norm();
        let e2 = (run(0.005) - reference).norm();
        assert!(e1 / e2 >= 1.8, "ratio {} ({e1} vs {e2})", e1 / e2);
    }
}
