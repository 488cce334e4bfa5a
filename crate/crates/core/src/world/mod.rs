//! Shared foundation: frames, clock, scene geometry and seeded randomness.

pub mod clock;
pub mod geodesy;
pub mod geometry;
pub mod rng;

pub use clock::SimClock;
pub use geodesy::{geodetic_to_local, local_to_geodetic, GeodeticPoint};
pub use geometry::{segment_intersects_nfz, segment_intersects_obstacle, LocalPoint, NoFlyZone, Obstacle, Shape};
pub use rng::RandomStream;
