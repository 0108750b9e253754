//! JSON run configuration shared by every subcommand.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use se3lio::eskf::FilterConfig;
use se3lio::liegroup::so3_exp;
use se3lio::sim::{Fig3Config, LioSimConfig, TwistProfile};
use se3lio::state::Matrix15;
use se3lio::uamc::DEFAULT_RAW_SIGMA;
use se3lio::{ImuSample, NavState, Pose3};

use crate::error::CliError;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seed for every random draw; `--seed` overrides it.
    pub seed: u64,
    /// Output directory; `--out` overrides it. Defaults to `out`.
    pub out: Option<PathBuf>,
    pub filter: FilterConfig,
    pub fig2: Fig2Params,
    pub fig3: Fig3Config,
    /// Synthetic world, sensors and trajectory for `--synthetic` runs.
    pub sim: LioSimConfig,
    /// Interpretation of recorded `--imu` / `--points` inputs.
    pub input: InputParams,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fig2Params {
    pub profile: TwistProfile,
    /// IMU period, s.
    pub dt: f64,
    pub n_steps: usize,
    /// Ground-truth integration step, s.
    pub dt_gt: f64,
}

impl Default for Fig2Params {
    fn default() -> Self {
        Fig2Params {
            profile: TwistProfile::default(),
            dt: 1e-2,
            n_steps: 10,
            dt_gt: 1e-4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InputParams {
    /// Isotropic std of every recorded point, m.
    pub raw_sigma: f64,
    /// IMU position in the world at the first IMU timestamp, m.
    pub position: [f64; 3],
    /// Initial attitude as a rotation vector, rad.
    pub rotation_vector: [f64; 3],
    /// Initial body-frame velocity, m/s.
    pub velocity: [f64; 3],
    /// Std of every initial error-state component.
    pub p0_sigma: f64,
    /// Filter start time, s. Each IMU sample covers the interval ending at its
    /// timestamp, so the default is one sample period before the first sample.
    pub t0: Option<f64>,
}

impl Default for InputParams {
    fn default() -> Self {
        InputParams {
            raw_sigma: DEFAULT_RAW_SIGMA,
            position: [0.0; 3],
            rotation_vector: [0.0; 3],
            velocity: [0.0; 3],
            p0_sigma: 1e-3,
            t0: None,
        }
    }
}

impl InputParams {
    pub fn validate(&self) -> Result<(), CliError> {
        let finite = [self.position, self.rotation_vector, self.velocity]
            .iter()
            .flatten()
            .all(|v| v.is_finite());
        let finite = finite && self.t0.is_none_or(f64::is_finite);
        if !finite || !(self.raw_sigma >= 0.0) || !(self.p0_sigma >= 0.0) {
            return Err(CliError::Config(
                "input: raw_sigma and p0_sigma must be non-negative and the initial state finite".into(),
            ));
        }
        Ok(())
    }

    pub fn start_time(&self, imu: &[ImuSample]) -> Option<f64> {
        self.t0.or(match imu {
            [a, b, ..] => Some(a.t - (b.t - a.t)),
            [a] => Some(a.t),
            [] => None,
        })
    }

    pub fn initial_state(&self) -> (NavState, Matrix15) {
        let pose = Pose3::new(
            so3_exp(&Vector3::from(self.rotation_vector)),
            Vector3::from(self.position),
        );
        let x0 = NavState::new(pose, Vector3::from(self.velocity));
        (x0, Matrix15::identity() * (self.p0_sigma * self.p0_sigma))
    }
}

impl RunConfig {
    /// Loads and validates a config file; absent path means all defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let cfg: RunConfig = match path {
            None => RunConfig::default(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
        };
        cfg.filter.validate().map_err(CliError::config)?;
        cfg.input.validate()?;
        Ok(cfg)
    }
}
