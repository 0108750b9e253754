//! Plain-text dataset and result formats.
//!
//! Readers validate headers and timestamps and report failures with the
//! 1-based line number. Writers format every number with 9 significant digits
//! in the shortest decimal form, so identical inputs give identical bytes.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use nalgebra::{Matrix3, Quaternion, Rotation3, UnitQuaternion, Vector3};
use serde::Deserialize;

use crate::error::{Error, Result};
use crate::eskf::{Scan, ScanResult};
use crate::liegroup::{Pose3, Rot3};
use crate::state::ImuSample;
use crate::uamc::{ProbabilisticPoint, RawPoint};

pub const IMU_HEADER: &str = "t,gx,gy,gz,ax,ay,az";
pub const POINTS_HEADER: &str = "scan,t,x,y,z";
pub const SCAN_FILE_HEADER: &str = "t,x,y,z";
pub const UNDISTORTED_HEADER: &str = "scan,t,x,y,z,cxx,cxy,cxz,cyy,cyz,czz";

#[derive(Debug, Deserialize)]
struct ImuCsvRecord {
    t: f64,
    gx: f64,
    gy: f64,
    gz: f64,
    ax: f64,
    ay: f64,
    az: f64,
}

#[derive(Debug, Deserialize)]
struct PointCsvRecord {
    scan: usize,
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

#[derive(Debug, Deserialize)]
struct ScanFileRecord {
    t: f64,
    x: f64,
    y: f64,
    z: f64,
}

/// Formats `x` rounded to 9 significant digits, without exponent noise or a
/// negative zero.
pub fn fmt_num(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let rounded: f64 = format!("{x:.8e}").parse().expect("formatted float parses");
    if rounded == 0.0 {
        "0".to_string()
    } else {
        format!("{rounded}")
    }
}

fn join(values: &[f64]) -> String {
    values.iter().map(|v| fmt_num(*v)).collect::<Vec<_>>().join(",")
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(io_err(path))
}

/// Buffered text writer that remembers its path for error reporting.
pub struct TextWriter {
    path: PathBuf,
    out: BufWriter<File>,
}

impl TextWriter {
    pub fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(io_err(path))?;
        Ok(TextWriter {
            path: path.to_path_buf(),
            out: BufWriter::new(file),
        })
    }

    pub fn line(&mut self, s: &str) -> Result<()> {
        self.out
            .write_all(s.as_bytes())
            .and_then(|_| self.out.write_all(b"\n"))
            .map_err(io_err(&self.path))
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(io_err(&self.path))
    }
}

/// Reads rows of `T` after checking the exact header. Yields each record with
/// its 1-based line number.
fn read_rows<T, R>(path: &Path, source: R, header: &str) -> Result<Vec<(u64, T)>>
where
    T: for<'de> Deserialize<'de>,
    R: Read,
{
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let found = reader
        .headers()
        .map_err(|e| parse_err(path, 1, e.to_string()))?
        .iter()
        .collect::<Vec<_>>()
        .join(",");
    // An empty file has no header line at all; treat it as an empty table.
    if found.is_empty() {
        return Ok(Vec::new());
    }
    if found != header {
        return Err(parse_err(
            path,
            1,
            format!("expected header \"{header}\", found \"{found}\""),
        ));
    }
    let mut rows = Vec::new();
    let mut record = csv::StringRecord::new();
    loop {
        let line = reader.position().line() + 1;
        match reader.read_record(&mut record) {
            Ok(false) => break,
            Ok(true) => {
                let line = record.position().map_or(line, |p| p.line());
                let row: T = record
                    .deserialize(None)
                    .map_err(|e| parse_err(path, line, e.to_string()))?;
                rows.push((line, row));
            }
            Err(e) => {
                let line = e.position().map_or(line, |p| p.line());
                return Err(parse_err(path, line, e.to_string()));
            }
        }
    }
    Ok(rows)
}

fn check_finite(path: &Path, line: u64, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(parse_err(path, line, "non-finite value"))
    }
}

/// IMU stream with strictly increasing timestamps.
pub fn read_imu_csv(path: &Path) -> Result<Vec<ImuSample>> {
    let rows: Vec<(u64, ImuCsvRecord)> = read_rows(path, open(path)?, IMU_HEADER)?;
    let mut out: Vec<ImuSample> = Vec::with_capacity(rows.len());
    for (line, r) in rows {
        check_finite(path, line, &[r.t, r.gx, r.gy, r.gz, r.ax, r.ay, r.az])?;
        if let Some(prev) = out.last() {
            if !(r.t > prev.t) {
                return Err(parse_err(
                    path,
                    line,
                    format!("timestamp {} does not follow {}", r.t, prev.t),
                ));
            }
        }
        out.push(ImuSample::new(
            r.t,
            Vector3::new(r.gx, r.gy, r.gz),
            Vector3::new(r.ax, r.ay, r.az),
        ));
    }
    Ok(out)
}

pub fn write_imu_csv(path: &Path, imu: &[ImuSample]) -> Result<()> {
    let mut w = TextWriter::create(path)?;
    w.line(IMU_HEADER)?;
    for s in imu {
        w.line(&join(&[
            s.t, s.gyro.x, s.gyro.y, s.gyro.z, s.acc.x, s.acc.y, s.acc.z,
        ]))?;
    }
    w.finish()
}

/// Collects points of one scan; the scan ends at its latest point.
fn finish_scan(path: &Path, line: u64, points: Vec<RawPoint>) -> Result<Scan> {
    let t_end = points.iter().map(|p| p.t).fold(f64::NEG_INFINITY, f64::max);
    if points.is_empty() {
        return Err(parse_err(path, line, "scan has no points"));
    }
    Ok(Scan { t_end, points })
}

fn push_point(
    path: &Path,
    line: u64,
    scan: &mut Vec<RawPoint>,
    t: f64,
    xyz: Vector3<f64>,
    sigma_raw: f64,
) -> Result<()> {
    check_finite(path, line, &[t, xyz.x, xyz.y, xyz.z])?;
    if let Some(prev) = scan.last() {
        if t < prev.t {
            return Err(parse_err(
                path,
                line,
                format!("point time {t} precedes {} within the scan", prev.t),
            ));
        }
    }
    scan.push(RawPoint::isotropic(xyz, t, sigma_raw));
    Ok(())
}

fn check_scan_order(path: &Path, line: u64, scans: &[Scan], next: &Scan) -> Result<()> {
    match scans.last() {
        Some(prev) if !(next.t_end > prev.t_end) => Err(parse_err(
            path,
            line,
            format!("scan end {} does not follow {}", next.t_end, prev.t_end),
        )),
        _ => Ok(()),
    }
}

/// Points grouped by a scan-index column. Indices must be contiguous blocks in
/// increasing order; points within a scan are time-ordered and scans end at
/// strictly increasing times. `sigma_raw` is the isotropic range noise (m).
pub fn read_points_csv(path: &Path, sigma_raw: f64) -> Result<Vec<Scan>> {
    let rows: Vec<(u64, PointCsvRecord)> = read_rows(path, open(path)?, POINTS_HEADER)?;
    let mut scans: Vec<Scan> = Vec::new();
    let mut current: Vec<RawPoint> = Vec::new();
    let mut current_index: Option<(usize, u64)> = None;
    for (line, r) in rows {
        match current_index {
            Some((idx, _)) if idx == r.scan => {}
            Some((idx, start)) => {
                if r.scan < idx {
                    return Err(parse_err(
                        path,
                        line,
                        format!("scan index {} after {idx}", r.scan),
                    ));
                }
                let scan = finish_scan(path, start, std::mem::take(&mut current))?;
                check_scan_order(path, start, &scans, &scan)?;
                scans.push(scan);
                current_index = Some((r.scan, line));
            }
            None => current_index = Some((r.scan, line)),
        }
        push_point(path, line, &mut current, r.t, Vector3::new(r.x, r.y, r.z), sigma_raw)?;
    }
    if let Some((_, start)) = current_index {
        let scan = finish_scan(path, start, current)?;
        check_scan_order(path, start, &scans, &scan)?;
        scans.push(scan);
    }
    Ok(scans)
}

/// One scan per `*.csv` file in `dir`, taken in file-name order.
pub fn read_points_dir(dir: &Path, sigma_raw: f64) -> Result<Vec<Scan>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(io_err(dir))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(dir)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_file() && p.extension().is_some_and(|e| e == "csv"))
        .collect();
    files.sort();
    let mut scans = Vec::with_capacity(files.len());
    for file in &files {
        let rows: Vec<(u64, ScanFileRecord)> = read_rows(file, open(file)?, SCAN_FILE_HEADER)?;
        let mut points = Vec::with_capacity(rows.len());
        for (line, r) in rows {
            push_point(file, line, &mut points, r.t, Vector3::new(r.x, r.y, r.z), sigma_raw)?;
        }
        let scan = finish_scan(file, 1, points)?;
        check_scan_order(file, 1, &scans, &scan)?;
        scans.push(scan);
    }
    Ok(scans)
}

pub fn write_points_csv(path: &Path, scans: &[Scan]) -> Result<()> {
    let mut w = TextWriter::create(path)?;
    w.line(POINTS_HEADER)?;
    for (k, scan) in scans.iter().enumerate() {
        for p in &scan.points {
            w.line(&format!("{k},{}", join(&[p.t, p.xyz.x, p.xyz.y, p.xyz.z])))?;
        }
    }
    w.finish()
}

/// Undistorted points with the six unique covariance entries, one block per scan.
pub fn write_undistorted_csv(path: &Path, scans: &[Vec<ProbabilisticPoint>]) -> Result<()> {
    let mut w = TextWriter::create(path)?;
    w.line(UNDISTORTED_HEADER)?;
    for (k, points) in scans.iter().enumerate() {
        for p in points {
            let c = &p.cov;
            w.line(&format!(
                "{k},{}",
                join(&[
                    p.t,
                    p.xyz.x,
                    p.xyz.y,
                    p.xyz.z,
                    c[(0, 0)],
                    c[(0, 1)],
                    c[(0, 2)],
                    c[(1, 1)],
                    c[(1, 2)],
                    c[(2, 2)],
                ])
            ))?;
        }
    }
    w.finish()
}

/// Hamilton quaternion `(x, y, z, w)` with `w > 0`. Half turns (`|w|` below
/// 1e-12) instead make the first significant vector component positive.
pub fn rot_to_quat(rot: &Rot3) -> [f64; 4] {
    let q = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(*rot.matrix()));
    let (x, y, z, w) = (q.i, q.j, q.k, q.w);
    let flip = if w.abs() >= 1e-12 {
        w < 0.0
    } else {
        [x, y, z].iter().find(|v| v.abs() >= 1e-12).is_some_and(|v| *v < 0.0)
    };
    let s = if flip { -1.0 } else { 1.0 };
    [s * x, s * y, s * z, s * w]
}

/// Rotation from `(x, y, z, w)`; the quaternion is normalized first.
pub fn quat_to_rot(q: [f64; 4]) -> Result<Rot3> {
    let raw = Quaternion::new(q[3], q[0], q[1], q[2]);
    if !(raw.norm() > 0.0) || !raw.coords.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidParameter(format!("degenerate quaternion {q:?}")));
    }
    let m: Matrix3<f64> = *UnitQuaternion::from_quaternion(raw).to_rotation_matrix().matrix();
    Ok(Rot3::from_matrix_unchecked(m))
}

pub fn tum_line(t: f64, pose: &Pose3) -> String {
    let q = rot_to_quat(&pose.rot);
    [t, pose.trans.x, pose.trans.y, pose.trans.z, q[0], q[1], q[2], q[3]]
        .iter()
        .map(|v| fmt_num(*v))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn write_poses_tum(path: &Path, poses: &[(f64, Pose3)]) -> Result<()> {
    let mut w = TextWriter::create(path)?;
    for (t, pose) in poses {
        w.line(&tum_line(*t, pose))?;
    }
    w.finish()
}

/// One record per scan posterior.
pub fn write_trajectory_tum(path: &Path, results: &[ScanResult]) -> Result<()> {
    let poses: Vec<(f64, Pose3)> = results.iter().map(|r| (r.t, r.posterior.pose)).collect();
    write_poses_tum(path, &poses)
}

/// Reads a TUM file. Blank lines and lines starting with `#` are skipped.
pub fn read_trajectory_tum(path: &Path) -> Result<Vec<(f64, Pose3)>> {
    let text = std::fs::read_to_string(path).map_err(io_err(path))?;
    let mut out: Vec<(f64, Pose3)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i as u64 + 1;
        let raw = raw.trim();
        if raw.is_empty() || raw.starts_with('#') {
            continue;
        }
        let v: Vec<f64> = raw
            .split_whitespace()
            .map(|s| s.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(path, line, e.to_string()))?;
        if v.len() != 8 {
            return Err(parse_err(path, line, format!("expected 8 fields, found {}", v.len())));
        }
        check_finite(path, line, &v)?;
        if let Some((prev, _)) = out.last() {
            if !(v[0] > *prev) {
                return Err(parse_err(path, line, format!("timestamp {} does not follow {prev}", v[0])));
            }
        }
        let rot = quat_to_rot([v[4], v[5], v[6], v[7]]).map_err(|e| parse_err(path, line, e.to_string()))?;
        out.push((v[0], Pose3::new(rot, Vector3::new(v[1], v[2], v[3]))));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::liegroup::so3_exp;

    #[test]
    fn number_formatting() {
        assert_eq!(fmt_num(0.0), "0");
        assert_eq!(fmt_num(-0.0), "0");
        assert_eq!(fmt_num(1.0), "1");
        assert_eq!(fmt_num(-2.5), "-2.5");
        assert_eq!(fmt_num(0.1 + 0.2), "0.3");
        assert_eq!(fmt_num(123456789.4), "123456789");
        assert_eq!(fmt_num(1.0 / 3.0), "0.333333333");
        assert_eq!(fmt_num(-1e-20), "-0.00000000000000000001");
    }

    #[test]
    fn identity_pose_line() {
        assert_eq!(tum_line(0.0, &Pose3::identity()), "0 0 0 0 0 0 0 1");
    }

    #[test]
    fn quaternion_roundtrip_and_sign() {
        for k in 0..50 {
            let a = k as f64 * 0.37;
            let w = Vector3::new(a.sin(), (1.3 * a).cos(), 0.4 - 0.01 * k as f64).normalize() * (0.06 * k as f64);
            let r = so3_exp(&w);
            let q = rot_to_quat(&r);
            assert!(q[3] >= 0.0);
            assert!((q.iter().map(|v| v * v).sum::<f64>().sqrt() - 1.0).abs() < 1e-9);
            let back = quat_to_rot(q).unwrap();
            assert!((back.matrix() - r.matrix()).norm() < 1e-12);
        }
        let half_turn = so3_exp(&Vector3::new(0.0, -std::f64::consts::PI, 0.0));
        let q = rot_to_quat(&half_turn);
        assert!(q[3].abs() < 1e-15);
        assert!(q[1] > 0.0, "{q:?}");
    }
}
