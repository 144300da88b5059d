use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use lidarmc_core::association::{associate_window, project, AssociationParams, Window};
use lidarmc_core::dynamics::{classify, DynamicsParams, SpacetimePoint};
use lidarmc_core::features::extract_features;
use lidarmc_core::pipeline::{run, PipelineConfig};
use lidarmc_core::preintegration::preintegrate;
use lidarmc_core::scenarios;
use lidarmc_core::simulator::{synth_imu, synth_sweep, SimPoint};
use lidarmc_core::{ImuSample, LidarPoint, WindowState};

struct Data {
    sim: Vec<SimPoint>,
    imu: Vec<ImuSample>,
    config: PipelineConfig,
}

fn window_data() -> Data {
    let traj = scenarios::handheld(2.0, 0.1);
    let lidar = scenarios::lidar32(0.02);
    Data {
        sim: synth_sweep(&traj, &scenarios::room(), &lidar, 0.3, 0.75, 1),
        imu: synth_imu(&traj, &scenarios::biased_imu(), 0.3, 0.75, 1),
        config: PipelineConfig { extrinsic: lidar.extrinsic, ..PipelineConfig::default() },
    }
}

fn benches(c: &mut Criterion) {
    let data = window_data();
    let points: Vec<LidarPoint> = data.sim.iter().map(|s| s.point).collect();
    let window = Window::new(0.3, 0.75, 3).unwrap();

    c.bench_function("preintegrate_450ms_1khz", |b| {
        b.iter(|| preintegrate(&data.imu, 0.3, 0.75, 1000.0, &Default::default()).unwrap())
    });
    c.bench_function("extract_features_window", |b| b.iter(|| extract_features(&points, &data.config.features)));

    let features = extract_features(&points, &data.config.features).features;
    let grid = preintegrate(&data.imu, 0.3, 0.75, 1000.0, &Default::default()).unwrap();
    let init = WindowState::cold(&data.imu, 0.3, 0.75);
    let projected = project(&features, &grid, &init, &data.config.extrinsic(), &window).unwrap();
    c.bench_function("associate_window", |b| b.iter(|| associate_window(&projected, 3, &AssociationParams::default())));

    let mut group = c.benchmark_group("end_to_end");
    group.sample_size(10);
    group.bench_function("solve_one_window_cold", |b| {
        b.iter_batched(|| points.clone(), |pts| run(&pts, &data.imu, &data.config).unwrap(), BatchSize::LargeInput)
    });
    let spacetime: Vec<SpacetimePoint> = data.sim.iter().map(|s| SpacetimePoint::new(s.world, s.point.t)).collect();
    group.bench_function("classify_window", |b| b.iter(|| classify(&spacetime, &DynamicsParams::default())));
    group.finish();
}

criterion_group!(pipeline, benches);
criterion_main!(pipeline);
