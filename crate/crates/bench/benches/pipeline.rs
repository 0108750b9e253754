use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use nalgebra::Vector3;
use std::hint::black_box;

use se3lio::eskf::{Filter, FilterConfig};
use se3lio::jointcov::PoseHistory;
use se3lio::propagation::{error_jacobians, propagate_batch, propagate_se3, PropagationModel};
use se3lio::sim::{synthesize_dataset, LioSimConfig};
use se3lio::uamc::{ExtrinsicCalib, UamcOptions, Undistorter};
use se3lio::{ImuNoiseParams, ImuSample, NavState, Pose3};

fn propagation(c: &mut Criterion) {
    let noise = ImuNoiseParams::typical();
    let x = NavState::new(Pose3::identity(), Vector3::new(1.0, 0.5, 0.0));
    let u = ImuSample::new(0.01, Vector3::new(0.3, -0.2, 1.1), Vector3::new(0.4, 0.1, 9.9));
    c.bench_function("propagate_se3", |b| b.iter(|| propagate_se3(black_box(&x), &u, &noise, 0.01)));
    c.bench_function("error_jacobians", |b| b.iter(|| error_jacobians(black_box(&x), &u, &noise, 0.01)));
}

fn history_of_one_scan(data: &se3lio::sim::Dataset, cfg: &FilterConfig) -> PoseHistory {
    let t_end = data.scans[0].t_end;
    let imu: Vec<ImuSample> = data.imu.iter().copied().take_while(|u| u.t <= t_end).collect();
    let steps = propagate_batch(&data.x0, &data.p0, 0.0, &imu, &cfg.imu_noise, PropagationModel::Se3).unwrap();
    let mut history = PoseHistory::new(0.0, data.x0.pose, data.p0);
    history.extend(&steps).unwrap();
    history
}

fn covariance_and_deskew(c: &mut Criterion) {
    let data = synthesize_dataset(&LioSimConfig::default(), 0).unwrap();
    let cfg = FilterConfig::default();
    let history = history_of_one_scan(&data, &cfg);
    c.bench_function("relative_cov", |b| b.iter(|| history.relative_cov(black_box(0), true).unwrap()));
    let scan = &data.scans[0].points;
    c.bench_function("undistort_scan", |b| {
        b.iter(|| {
            let und = Undistorter::new(&history, ExtrinsicCalib::default(), UamcOptions::default()).unwrap();
            und.undistort_scan(black_box(scan)).unwrap()
        })
    });
}

fn process_scan(c: &mut Criterion) {
    let data = synthesize_dataset(&LioSimConfig::default(), 0).unwrap();
    let cfg = FilterConfig::default();
    // Warm the map with the first scan, then time the second one.
    let mut warm = Filter::new(cfg, data.x0, data.p0, 0.0).unwrap();
    let split = |lo: f64, hi: f64| -> Vec<ImuSample> { data.imu.iter().copied().filter(|u| u.t > lo && u.t <= hi).collect() };
    let (t1, t2) = (data.scans[0].t_end, data.scans[1].t_end);
    warm.process_scan(&split(0.0, t1), &data.scans[0].points).unwrap();
    let imu = split(t1, t2);
    c.bench_function("process_scan", |b| {
        b.iter_batched(
            || warm.clone(),
            |mut f| f.process_scan(&imu, &data.scans[1].points).unwrap(),
            BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, propagation, covariance_and_deskew, process_scan);
criterion_main!(benches);
