//! Subcommand bodies. Each writes its files under the output directory and
//! reports wall-clock timing on stderr only, so output files stay a pure
//! function of config, inputs and seed.

use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::Serialize;

use se3lio::eskf::{run_lio, undistort_stream, Ablation, FilterConfig, Scan, ScanResult, UpdateStatus};
use se3lio::io::{
    fmt_num, read_imu_csv, read_points_csv, read_points_dir, write_imu_csv, write_points_csv,
    write_poses_tum, write_trajectory_tum, write_undistorted_csv, TextWriter,
};
use se3lio::sim::{evaluate_lio, run_fig2_experiment, run_fig3_experiment, synthesize_dataset, McReport};
use se3lio::state::Matrix15;
use se3lio::{ImuSample, NavState};

use crate::config::RunConfig;
use crate::error::CliError;

/// Where recorded inputs come from.
#[derive(Clone, Debug)]
pub enum Source {
    Synthetic,
    Files {
        imu: PathBuf,
        points: PointsSource,
    },
}

#[derive(Clone, Debug)]
pub enum PointsSource {
    /// One CSV with a scan-index column.
    Table(PathBuf),
    /// A directory with one CSV per scan.
    Directory(PathBuf),
}

struct Inputs {
    imu: Vec<ImuSample>,
    scans: Vec<Scan>,
    x0: NavState,
    p0: Matrix15,
    t0: f64,
}

fn round9(x: f64) -> f64 {
    fmt_num(x).parse().expect("formatted number parses")
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Numerical(e.to_string()))?;
    let mut w = TextWriter::create(path)?;
    w.line(&text)?;
    Ok(w.finish()?)
}

fn report_time(what: &str, elapsed: Duration) {
    eprintln!("{what}: {:.3} s", elapsed.as_secs_f64());
}

pub fn fig2(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let p = &cfg.fig2;
    let rows = run_fig2_experiment(&p.profile, p.dt, p.n_steps, p.dt_gt)?;
    let mut w = TextWriter::create(&out.join("fig2.csv"))?;
    w.line("step,t,se3_trans_err,se3_rot_err,base_trans_err,base_rot_err")?;
    for r in &rows {
        w.line(&format!(
            "{},{},{},{},{},{}",
            r.step,
            fmt_num(r.t),
            fmt_num(r.se3_trans_err),
            fmt_num(r.se3_rot_err),
            fmt_num(r.base_trans_err),
            fmt_num(r.base_rot_err)
        ))?;
    }
    w.finish()?;
    report_time("fig2", clock.elapsed());
    Ok(())
}

#[derive(Serialize)]
struct LookbackSummary {
    index: usize,
    t: f64,
    trace_cross: f64,
    trace_indep: f64,
    nees_mean_cross: f64,
    nees_mean_indep: f64,
    coverage_cross: f64,
    coverage_indep: f64,
}

#[derive(Serialize)]
struct Fig3Summary {
    seed: u64,
    n_trials: usize,
    n_inputs: usize,
    nees_mean: f64,
    nees_ci_low: f64,
    nees_ci_high: f64,
    nees_in_ci: bool,
    chi2_95: f64,
    coverage_95: f64,
    min_coverage_indep: f64,
    lookbacks: Vec<LookbackSummary>,
}

fn fig3_summary(report: &McReport, seed: u64) -> Fig3Summary {
    let lookbacks = report
        .lookbacks
        .iter()
        .map(|l| LookbackSummary {
            index: l.index,
            t: round9(l.t),
            trace_cross: round9(l.cov_cross.trace()),
            trace_indep: round9(l.cov_indep.trace()),
            nees_mean_cross: round9(l.nees_mean_cross),
            nees_mean_indep: round9(l.nees_mean_indep),
            coverage_cross: round9(l.coverage_cross),
            coverage_indep: round9(l.coverage_indep),
        })
        .collect();
    Fig3Summary {
        seed,
        n_trials: report.n_trials,
        n_inputs: report.n_inputs,
        nees_mean: round9(report.nees_mean),
        nees_ci_low: round9(report.nees_ci_low),
        nees_ci_high: round9(report.nees_ci_high),
        nees_in_ci: report.nees_mean >= report.nees_ci_low && report.nees_mean <= report.nees_ci_high,
        chi2_95: round9(report.chi2_95),
        coverage_95: round9(report.coverage_95),
        min_coverage_indep: round9(
            report.lookbacks.iter().map(|l| l.coverage_indep).fold(f64::INFINITY, f64::min),
        ),
        lookbacks,
    }
}

pub fn fig3(cfg: &RunConfig, seed: u64, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let report = run_fig3_experiment(&cfg.fig3, seed)?;
    write_json(&out.join("fig3_report.json"), &fig3_summary(&report, seed))?;

    let mut w = TextWriter::create(&out.join("fig3_covariances.csv"))?;
    w.line("index,t,variant,row,col,value")?;
    for l in &report.lookbacks {
        for (variant, cov) in [("cross", &l.cov_cross), ("indep", &l.cov_indep)] {
            for r in 0..6 {
                for c in 0..6 {
                    w.line(&format!("{},{},{variant},{r},{c},{}", l.index, fmt_num(l.t), fmt_num(cov[(r, c)])))?;
                }
            }
        }
    }
    w.finish()?;

    let mut w = TextWriter::create(&out.join("fig3_samples.csv"))?;
    w.line("index,t,trial,vx,vy,vz,wx,wy,wz")?;
    for l in &report.lookbacks {
        for (trial, e) in l.samples.iter().enumerate() {
            let cols: Vec<String> = e.iter().map(|v| fmt_num(*v)).collect();
            w.line(&format!("{},{},{trial},{}", l.index, fmt_num(l.t), cols.join(",")))?;
        }
    }
    w.finish()?;
    report_time("fig3", clock.elapsed());
    Ok(())
}

fn load_inputs(cfg: &RunConfig, imu: &Path, points: &PointsSource) -> Result<Inputs, CliError> {
    let imu = read_imu_csv(imu)?;
    let scans = match points {
        PointsSource::Table(p) => read_points_csv(p, cfg.input.raw_sigma)?,
        PointsSource::Directory(d) => read_points_dir(d, cfg.input.raw_sigma)?,
    };
    let t0 = cfg.input.start_time(&imu).ok_or(se3lio::Error::EmptyInput("IMU stream"))?;
    let (x0, p0) = cfg.input.initial_state();
    Ok(Inputs { imu, scans, x0, p0, t0 })
}

fn ensure_scans(scans: &[Scan]) -> Result<(), CliError> {
    if scans.is_empty() {
        return Err(se3lio::Error::EmptyInput("scans").into());
    }
    Ok(())
}

pub fn undistort(cfg: &RunConfig, seed: u64, source: &Source, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let inputs = match source {
        Source::Synthetic => {
            cfg.sim.validate().map_err(CliError::config)?;
            let data = synthesize_dataset(&cfg.sim, seed)?;
            write_imu_csv(&out.join("imu.csv"), &data.imu)?;
            write_points_csv(&out.join("points.csv"), &data.scans)?;
            Inputs { imu: data.imu, scans: data.scans, x0: data.x0, p0: data.p0, t0: 0.0 }
        }
        Source::Files { imu, points } => load_inputs(cfg, imu, points)?,
    };
    ensure_scans(&inputs.scans)?;
    let points = undistort_stream(&cfg.filter, inputs.x0, inputs.p0, inputs.t0, inputs.imu, &inputs.scans)?;
    write_undistorted_csv(&out.join("undistorted.csv"), &points)?;
    report_time("undistort", clock.elapsed());
    Ok(())
}

fn status_name(s: UpdateStatus) -> &'static str {
    match s {
        UpdateStatus::Updated => "updated",
        UpdateStatus::MapInitialized => "map_initialized",
        UpdateStatus::NoCorrespondences => "no_correspondences",
    }
}

fn write_stats(path: &Path, results: &[ScanResult]) -> Result<(), CliError> {
    let mut w = TextWriter::create(path)?;
    w.line("scan,t,n_points,n_residuals,n_rejected,iterations,status")?;
    for (k, r) in results.iter().enumerate() {
        w.line(&format!(
            "{k},{},{},{},{},{},{}",
            fmt_num(r.t),
            r.n_points,
            r.n_residuals,
            r.n_rejected,
            r.iterations,
            status_name(r.status)
        ))?;
    }
    Ok(w.finish()?)
}

fn report_module_times(results: &[ScanResult]) {
    let mut total = [Duration::ZERO; 4];
    for r in results {
        let t = &r.timings;
        for (acc, d) in total.iter_mut().zip([t.propagation, t.undistortion, t.update, t.map]) {
            *acc += d;
        }
    }
    let n = results.len().max(1) as f64;
    for (name, d) in ["propagation", "undistortion", "update", "map"].iter().zip(total) {
        eprintln!("  {name:<13} {:9.3} ms/scan", d.as_secs_f64() * 1e3 / n);
    }
}

#[derive(Serialize)]
struct LioSummary {
    seed: u64,
    /// Absent when the filter flags come from the config unchanged.
    ablation: Option<Ablation>,
    n_scans: usize,
    ate: f64,
}

pub fn lio(cfg: &RunConfig, seed: u64, source: &Source, ablation: Option<Ablation>, out: &Path) -> Result<(), CliError> {
    let clock = Instant::now();
    let filter_cfg: FilterConfig = ablation.map_or(cfg.filter, |a| a.apply(&cfg.filter));
    let results = match source {
        Source::Synthetic => {
            cfg.sim.validate().map_err(CliError::config)?;
            let data = synthesize_dataset(&cfg.sim, seed)?;
            write_imu_csv(&out.join("imu.csv"), &data.imu)?;
            write_points_csv(&out.join("points.csv"), &data.scans)?;
            let run = evaluate_lio(&data, &filter_cfg)?;
            let gt: Vec<_> = run.results.iter().map(|r| r.t).zip(run.truth.iter().copied()).collect();
            write_poses_tum(&out.join("groundtruth.tum"), &gt)?;
            let summary = LioSummary {
                seed,
                ablation,
                n_scans: run.results.len(),
                ate: round9(run.ate),
            };
            write_json(&out.join("summary.json"), &summary)?;
            eprintln!("ATE {:.6} m over {} scans", run.ate, run.results.len());
            run.results
        }
        Source::Files { imu, points } => {
            let inputs = load_inputs(cfg, imu, points)?;
            ensure_scans(&inputs.scans)?;
            run_lio(filter_cfg, inputs.x0, inputs.p0, inputs.t0, inputs.imu, &inputs.scans)?
        }
    };
    write_trajectory_tum(&out.join("trajectory.tum"), &results)?;
    write_stats(&out.join("stats.csv"), &results)?;
    report_time("lio", clock.elapsed());
    report_module_times(&results);
    Ok(())
}
