//! SE(3)-manifold IMU propagation, cross-term-aware relative pose
//! covariance, uncertainty-aware motion compensation and an error-state
//! Kalman filter for LiDAR-inertial odometry.

pub mod error;
pub mod eskf;
pub mod io;
pub mod jointcov;
pub mod liegroup;
pub mod metrics;
pub mod planarmap;
pub mod propagation;
pub mod sim;
pub mod state;
pub mod uamc;

pub use error::{Error, Result};
pub use liegroup::{Cov6, Pose3, Rot3, Twist6};
pub use state::{ErrorState15, ImuNoiseParams, ImuSample, NavState};
