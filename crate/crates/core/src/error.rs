use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("poses are out of chart: relative rotation angle {angle} rad is too close to pi")]
    OutOfChart { angle: f64 },

    #[error("timestamps not strictly increasing at index {index}: {t} follows {prev}")]
    NonMonotoneTime { index: usize, prev: f64, t: f64 },

    #[error("index {index} out of range for history of length {len}")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("time {t} outside history span [{start}, {end}]")]
    TimeOutOfSpan { t: f64, start: f64, end: f64 },

    #[error("point {index} at time {t} outside history span [{start}, {end}]")]
    PointOutOfSpan {
        index: usize,
        t: f64,
        start: f64,
        end: f64,
    },

    #[error("scan {index} ending at {t} outside the IMU span [{start}, {end}]")]
    ScanOutOfSpan {
        index: usize,
        t: f64,
        start: f64,
        end: f64,
    },

    #[error("joint covariance of {entries} entries exceeds the limit of {max}")]
    SizeGuard { entries: usize, max: usize },

    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("ray {index} escaped the world model")]
    RayEscaped { index: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("numerical failure: {0}")]
    Numerical(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
