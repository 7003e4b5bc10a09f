use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use ocmatch_bench::{frames, orbit_fixture};
use ocmatch_core::cpd::{e_step, init_sigma2, normalize_pointset};
use ocmatch_core::pipeline::reconstruct_frames;
use ocmatch_core::sweep::{sweep_cost, ViewSet};
use ocmatch_core::{register, CpdConfig, SimilarityTransform};

fn kernels(c: &mut Criterion) {
    let fx = orbit_fixture(8);
    let cfg = &fx.config;
    let views = ViewSet::from_sequence(cfg.camera, frames(&fx.rendered)).unwrap();

    let mut g = c.benchmark_group("reconstruction");
    g.sample_size(10);
    g.bench_function("render_one_frame", |b| {
        b.iter(|| fx.scene.render(&cfg.camera, &fx.rendered[0].pose, &cfg.light, 0))
    });
    g.bench_function("sweep_cost_8_views", |b| b.iter(|| sweep_cost(black_box(&views), &cfg.sweep).unwrap()));
    g.bench_function("reconstruct_8_views", |b| {
        b.iter(|| reconstruct_frames(cfg, cfg.camera, frames(&fx.rendered)).unwrap())
    });
    g.finish();

    let source = reconstruct_frames(cfg, cfg.camera, frames(&fx.rendered)).unwrap().source;
    let target = &fx.polyps[0].points;
    let cpd = CpdConfig {
        max_points: 1000,
        ..cfg.effective_cpd()
    };
    let (x, _) = normalize_pointset(&target.subsample(1000, 1)).unwrap();
    let (y, _) = normalize_pointset(&source.subsample(1000, 2)).unwrap();
    let s2 = init_sigma2(&x, &y).unwrap();

    let mut g = c.benchmark_group("registration");
    g.sample_size(10);
    g.bench_function("init_sigma2", |b| b.iter(|| init_sigma2(black_box(&x), &y).unwrap()));
    g.bench_function("e_step", |b| {
        b.iter(|| e_step(black_box(&x), &y, &SimilarityTransform::identity(), s2, cpd.outlier_weight).unwrap())
    });
    g.bench_function("register_polyp_patch", |b| b.iter(|| register(black_box(target), &source, &cpd).unwrap()));
    g.finish();
}

criterion_group!(benches, kernels);
criterion_main!(benches);
