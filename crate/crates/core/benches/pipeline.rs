//! Sequential against data-parallel execution of the hot paths.
//!
//! `sequential` runs on a one-thread rayon pool, `parallel` on the global
//! pool. Build with `--no-default-features` to time the fallback code path
//! instead; the ids then only differ by pool size.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use celltile::detector::{jitter_detect, DetectorBackend, NoiseSpec, OracleBackend};
use celltile::metrics::{sweep_threshold, EvalConfig};
use celltile::pipeline::{run_slide, PipelineConfig};
use celltile::slide_io::{SyntheticSlide, SyntheticSlideSpec};
use celltile::stain::{compute_tissue_mask, rgb_to_hed, StainMatrix, TissueMaskParams};
use celltile::tiler::{axis_origins, merge_tiles};
use celltile::{Detection, PixelRect, Result, SlideSource};

fn modes() -> Vec<(&'static str, rayon::ThreadPool)> {
    let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let all = rayon::ThreadPoolBuilder::new().build().unwrap();
    vec![("sequential", one), ("parallel", all)]
}

fn stain(c: &mut Criterion) {
    let slide = SyntheticSlide::generate(&SyntheticSlideSpec::new(2048, 2048, 2000, 1)).unwrap();
    let m = StainMatrix::ruifrok_johnson();
    let mut g = c.benchmark_group("stain");
    g.sample_size(10);
    for (mode, pool) in modes() {
        g.bench_function(BenchmarkId::new("rgb_to_hed_2048", mode), |b| {
            pool.install(|| b.iter(|| black_box(rgb_to_hed(&slide.image, &m))))
        });
        g.bench_function(BenchmarkId::new("tissue_mask_2048", mode), |b| {
            pool.install(|| b.iter(|| black_box(compute_tissue_mask(&slide.image, 1.0, &m, &TissueMaskParams::default()).unwrap())))
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let s = SyntheticSlide::generate(&SyntheticSlideSpec::new(4096, 4096, 6000, 2)).unwrap();
    let src = SlideSource::from_raster(s.image.clone(), 0.25).unwrap();
    let oracle = OracleBackend::new(&s.annotations);
    let factory = move |_: usize| -> Result<Box<dyn DetectorBackend>> { Ok(Box::new(oracle.clone())) };
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut g = c.benchmark_group("run_slide_oracle_4096");
    g.sample_size(10);
    for (mode, pool) in modes() {
        let workers = if mode == "sequential" { 1 } else { cores };
        let cfg = PipelineConfig {
            worker_count: workers,
            ..Default::default()
        };
        g.bench_function(BenchmarkId::new("workers", format!("{mode}-{workers}")), |b| {
            pool.install(|| b.iter(|| black_box(run_slide(&cfg, &src, &factory).unwrap().detections.len())))
        });
    }
    g.finish();
}

fn sweep(c: &mut Criterion) {
    let s = SyntheticSlide::generate(&SyntheticSlideSpec::new(4096, 4096, 10000, 3)).unwrap();
    let preds = jitter_detect(&s.annotations, PixelRect::new(0, 0, 4096, 4096), &NoiseSpec::default(), 5, (4096, 4096)).unwrap();
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let eval = EvalConfig::default();
    let mut g = c.benchmark_group("sweep_threshold_10k");
    g.sample_size(10);
    for (mode, pool) in modes() {
        g.bench_function(mode, |b| {
            pool.install(|| b.iter(|| black_box(sweep_threshold(&preds, &s.annotations, 0.25, &eval, &grid).unwrap().best_tau)))
        });
    }
    g.finish();
}

fn merge(c: &mut Criterion) {
    let side = 8192u32;
    let origins = axis_origins(side, 1024, 64).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut g = c.benchmark_group("merge_tiles");
    g.sample_size(10);
    for n in [10_000usize, 100_000] {
        let dets: Vec<Detection> = (0..n)
            .map(|_| Detection {
                cx: rng.random_range(0.0..side as f64),
                cy: rng.random_range(0.0..side as f64),
                w: 12.0,
                h: 12.0,
                class_id: rng.random_range(0..5),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let mut per_tile = Vec::new();
        for &ty in &origins {
            for &tx in &origins {
                let rect = PixelRect::new(tx as i64, ty as i64, 1024, 1024);
                let local = dets.iter().filter(|d| rect.contains_point(d.cx, d.cy)).map(|d| d.translated(-(tx as f64), -(ty as f64))).collect();
                per_tile.push((rect, local));
            }
        }
        let slide = PixelRect::new(0, 0, side, side);
        g.bench_function(BenchmarkId::from_parameter(n), |b| b.iter(|| black_box(merge_tiles(&per_tile, slide, 64).len())));
    }
    g.finish();
}

criterion_group!(benches, stain, pipeline, sweep, merge);
criterion_main!(benches);
