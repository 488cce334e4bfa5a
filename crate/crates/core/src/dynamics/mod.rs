//! Multirotor flight model and flight controller.

pub mod control;
pub mod model;

pub use control::{
    attitude_command, pitch_of, run_controller, track_route, ControlSetpoint, ControllerGains, SetpointMode,
};
pub use model::{step_dynamics, UavParams, UavState, ROTORS};
