//! LiDAR simulation and VFH avoidance.

pub mod lidar;
pub mod vfh;

pub use lidar::{degrade_scan, scan_lidar, LidarConfig, LidarPoint, PointCloud};
pub use vfh::{avoidance_override, build_histogram, select_heading, valleys, PolarHistogram, Steering, Valley, VfhConfig};
