//! Deterministic, headless low-altitude UAV traffic simulation.

pub mod airway;
pub mod anomaly;
pub mod authority;
pub mod bus;
pub mod dynamics;
pub mod engine;
pub mod error;
pub mod presets;
pub mod scalar;
pub mod scenario;
pub mod sensing;
pub mod traffic;
pub mod world;

pub use error::{Result, SimError};
pub use scalar::Real;

/// Concrete `f64` instantiations used by the engine, scenarios and gateway.
pub type LocalPoint = world::LocalPoint<f64>;
pub type GeodeticPoint = world::GeodeticPoint<f64>;
pub type Shape = world::Shape<f64>;
pub type Obstacle = world::Obstacle<f64>;
pub type UavParams = dynamics::UavParams<f64>;
pub type UavState = dynamics::UavState<f64>;
pub type ControllerGains = dynamics::ControllerGains<f64>;
pub type ControlSetpoint = dynamics::ControlSetpoint<f64>;
pub type LidarConfig = sensing::LidarConfig<f64>;
pub type PointCloud = sensing::PointCloud<f64>;
pub type PolarHistogram = sensing::PolarHistogram<f64>;
pub type VfhConfig = sensing::VfhConfig<f64>;

pub use engine::{Engine, EngineOptions, RunReport};
pub use scenario::Scenario;
