use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use edps::decel_model::build_curve;
use edps::envelope;
use edps::planner::{self, Interpolation, PlannerConfig};
use edps::simroute::{self, SimConfig};
use edps::{Route, SignalLight, VehicleParams};
use edps_bench::{stop_request, synthetic_envelope};

fn decel_curve(c: &mut Criterion) {
    let travelled: Vec<f64> = (0..40).map(|k| 150.0 * k as f64 / 40.0).collect();
    c.bench_function("build_curve n=40", |b| {
        b.iter(|| build_curve(black_box(16.67), 0.0, 30, 40, 0.5, 150.0, 0.5, &travelled).unwrap())
    });
}

fn envelope_fit(c: &mut Criterion) {
    let recs = envelope::synth_braking_data(7, &VehicleParams::synthetic());
    let ex = envelope::extract_observations(&recs, 2.0);
    c.bench_function("extract_observations", |b| {
        b.iter(|| envelope::extract_observations(black_box(&recs), 2.0))
    });
    c.bench_function("fit_envelope", |b| {
        b.iter(|| envelope::fit_envelope(black_box(&ex.observations), 0.05).unwrap())
    });
}

fn plan(c: &mut Criterion) {
    let params = VehicleParams::synthetic();
    let env = synthetic_envelope();
    let req = stop_request();
    let mut group = c.benchmark_group("plan 150 m stop");
    for (name, interpolation) in [
        ("bilinear", Interpolation::Bilinear),
        ("nearest", Interpolation::Nearest),
    ] {
        let cfg = PlannerConfig {
            interpolation,
            ..PlannerConfig::default()
        };
        group.bench_function(name, |b| {
            b.iter(|| planner::plan(black_box(&req), &params, &env, &cfg).unwrap())
        });
    }
    group.finish();
}

fn simulate(c: &mut Criterion) {
    let light = |position_m, phase_offset_s| SignalLight {
        position_m,
        green_s: 12.0,
        yellow_s: 3.0,
        red_s: 10.0,
        phase_offset_s,
    };
    let route = Route::new(
        vec![(0.0, 0.0), (800.0, 0.02), (1600.0, -0.01)],
        vec![light(400.0, 0.0), light(1000.0, 7.0)],
    )
    .unwrap();
    let cfg = SimConfig::new(VehicleParams::synthetic(), synthetic_envelope());
    let mut group = c.benchmark_group("simulate");
    group.sample_size(10);
    group.bench_function("1.6 km, 2 lights", |b| {
        b.iter(|| simroute::run(black_box(&route), &cfg).unwrap())
    });
    group.finish();
}

criterion_group!(benches, decel_curve, envelope_fit, plan, simulate);
criterion_main!(benches);
