//! Whole-slide run: tissue mask and tile grid, parallel tile inference,
//! central-crop merge, timing and run manifest.

mod bench;
mod config;
mod output;

use std::io::Read;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::Mutex;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::protocol::{write_window_index, WindowIndexEntry};
use crate::detector::{detect, filter_by_confidence, BackendFactory, DetectorConfig, WindowInput};
use crate::error::{Error, Result};
use crate::slide_io::{RasterImage, SlideSource};
use crate::stain::{compute_tissue_mask, TissueMask};
use crate::tiler::{enumerate_tiles, merge_tiles, merge_windows, partition_windows, Detection, PixelRect, TileGrid, WindowGrid};

pub use bench::{power_law_exponent, run_bench, BenchJob, BenchReport, BenchRow, LineFit};
pub use config::{BackendKind, DetectorSettings, OutputSettings, PipelineConfig};
pub use output::{read_detections, round_sig9, write_detections, OutputFormat};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub preprocess_s: f64,
    /// Wall time of the tile stage.
    pub inference_s: f64,
    /// Merge, coordinate mapping and sorting.
    pub postprocess_s: f64,
    pub total_s: f64,
    pub tissue_area_mm2: f64,
    pub throughput_mm2_per_s: f64,
    /// Per-tile processing times summed over workers.
    pub tile_time_sum_s: f64,
    pub tiles: usize,
    pub windows: usize,
    pub workers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideIdentity {
    pub path: Option<String>,
    pub sha256: String,
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub slide: SlideIdentity,
    pub config: PipelineConfig,
    pub timings: TimingReport,
    pub detection_count: usize,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    /// Level-0 detections sorted by `(cy, cx, class, score)`.
    pub detections: Vec<Detection>,
    pub timing: TimingReport,
    pub manifest: RunManifest,
    pub mask: TissueMask,
    pub grid: TileGrid,
}

/// A failed run with whatever the finished tiles produced.
#[derive(Debug)]
pub struct PipelineError {
    pub error: Error,
    pub partial: Vec<Detection>,
    pub tiles_done: usize,
}

impl From<Error> for PipelineError {
    fn from(error: Error) -> Self {
        Self {
            error,
            partial: Vec::new(),
            tiles_done: 0,
        }
    }
}

impl std::fmt::Display for PipelineError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} ({} tiles finished)", self.error, self.tiles_done)
    }
}

impl std::error::Error for PipelineError {
    fn source(&self) -> Option<&(dyn std::error::Error + 'static)> {
        Some(&self.error)
    }
}

/// Layout of one run in the resampled (detection) pixel space.
#[derive(Debug, Clone)]
struct Plan {
    /// Level-0 pixels per detection pixel.
    factor: f64,
    dims: (u32, u32),
    grid: TileGrid,
    windows: WindowGrid,
    level: usize,
    downsample: f64,
}

impl Plan {
    fn window_id(&self, tile: usize, window: usize) -> u64 {
        (tile * self.windows.origins.len() + window) as u64
    }

    fn window_index(&self) -> Vec<WindowIndexEntry> {
        let ws = self.windows.window_size;
        let mut out = Vec::with_capacity(self.grid.len() * self.windows.origins.len());
        for (t, &(tx, ty)) in self.grid.origins.iter().enumerate() {
            for (w, &(wx, wy)) in self.windows.origins.iter().enumerate() {
                out.push(WindowIndexEntry {
                    wid: self.window_id(t, w),
                    x: (tx + wx) as f64 * self.factor,
                    y: (ty + wy) as f64 * self.factor,
                    w: ws,
                    h: ws,
                    scale: self.factor,
                });
            }
        }
        out
    }
}

struct TileRecord {
    index: usize,
    detections: Vec<Detection>,
    seconds: f64,
}

fn read_tile(slide: &mut SlideSource, plan: &Plan, origin: (u32, u32)) -> Result<RasterImage> {
    let ts = plan.grid.tile_size;
    let o0 = (
        (origin.0 as f64 * plan.factor).round() as i64,
        (origin.1 as f64 * plan.factor).round() as i64,
    );
    let side = ((ts as f64 * plan.factor / plan.downsample).round() as u32).max(1);
    let img = slide.read_region(o0, (side, side), plan.level)?;
    Ok(if img.dims() == (ts, ts) { img } else { img.resize_area(ts, ts) })
}

/// Runs every window of one tile and merges them; tile-local output.
fn process_tile(
    slide: &mut SlideSource,
    backend: &mut dyn crate::detector::DetectorBackend,
    plan: &Plan,
    det_cfg: &DetectorConfig,
    batch_size: usize,
    index: usize,
) -> Result<Vec<Detection>> {
    let (tx, ty) = plan.grid.origins[index];
    let tile = read_tile(slide, plan, (tx, ty))?;
    let ws = plan.windows.window_size;
    let mut per_window = Vec::with_capacity(plan.windows.origins.len());
    let origins: Vec<(usize, (u32, u32))> = plan.windows.origins.iter().copied().enumerate().collect();
    for chunk in origins.chunks(batch_size) {
        let batch: Vec<WindowInput> = chunk
            .iter()
            .map(|&(w, (wx, wy))| WindowInput {
                id: plan.window_id(index, w),
                origin: ((tx + wx) as f64 * plan.factor, (ty + wy) as f64 * plan.factor),
                scale: plan.factor,
                image: tile.crop(wx as i64, wy as i64, ws, ws),
            })
            .collect();
        let lists = detect(backend, &batch, det_cfg)?;
        for (&(_, (wx, wy)), dets) in chunk.iter().zip(lists) {
            per_window.push((PixelRect::new(wx as i64, wy as i64, ws, ws), dets));
        }
    }
    let ts = plan.grid.tile_size;
    Ok(merge_windows(&per_window, (ts, ts), plan.windows.overlap))
}

/// Merges finished tiles and maps them back to level 0.
fn reduce(plan: &Plan, mut records: Vec<TileRecord>) -> Vec<Detection> {
    records.sort_unstable_by_key(|r| r.index);
    let ts = plan.grid.tile_size;
    let per_tile: Vec<(PixelRect, Vec<Detection>)> = records
        .into_iter()
        .map(|r| {
            let (x, y) = plan.grid.origins[r.index];
            (PixelRect::new(x as i64, y as i64, ts, ts), r.detections)
        })
        .collect();
    let slide_rect = PixelRect::new(0, 0, plan.dims.0, plan.dims.1);
    let mut merged = merge_tiles(&per_tile, slide_rect, plan.grid.overlap);
    if plan.factor != 1.0 {
        let f = plan.factor;
        for d in &mut merged {
            d.cx *= f;
            d.cy *= f;
            d.w *= f;
            d.h *= f;
        }
    }
    merged
}

fn slide_identity(slide: &SlideSource) -> Result<SlideIdentity> {
    let mut hasher = Sha256::new();
    match slide.path() {
        Some(path) => {
            let mut f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
            let mut buf = vec![0u8; 1 << 20];
            loop {
                let n = f.read(&mut buf).map_err(|e| Error::io(path, e))?;
                if n == 0 {
                    break;
                }
                hasher.update(&buf[..n]);
            }
        }
        None => {
            let mut s = slide.try_clone()?;
            hasher.update(s.read_level(0)?.pixels());
        }
    }
    Ok(SlideIdentity {
        path: slide.path().map(|p| p.display().to_string()),
        sha256: hex::encode(hasher.finalize()),
        width: slide.width(),
        height: slide.height(),
        mpp: slide.mpp(),
    })
}

/// Tissue mask and tile grid of a slide, in detection pixel space.
#[derive(Debug, Clone)]
pub struct SlideLayout {
    /// Level-0 pixels per detection pixel.
    pub factor: f64,
    pub dims: (u32, u32),
    pub mask: TissueMask,
    pub tissue_area_mm2: f64,
    pub grid: TileGrid,
}

pub fn layout(cfg: &PipelineConfig, slide: &SlideSource) -> Result<SlideLayout> {
    cfg.validate()?;
    let factor = cfg.mpp_target.map_or(1.0, |t| t / slide.mpp());
    let mut coord = slide.try_clone()?;
    let (thumb, thumb_scale) = coord.thumbnail(cfg.thumbnail_max_dim)?;
    let mask = compute_tissue_mask(&thumb, thumb_scale, &cfg.stains(), &cfg.tissue)?;
    let tissue_area_mm2 = mask.tissue_area_mm2(slide.mpp());
    let dims = (
        ((slide.width() as f64 / factor).round() as u32).max(1),
        ((slide.height() as f64 / factor).round() as u32).max(1),
    );
    let scaled_mask = TissueMask {
        scale: mask.scale / factor,
        ..mask.clone()
    };
    let grid = enumerate_tiles(&scaled_mask, dims, cfg.tile_size, cfg.tile_overlap, cfg.min_tissue_fraction)?;
    Ok(SlideLayout {
        factor,
        dims,
        mask,
        tissue_area_mm2,
        grid,
    })
}

/// Detects nuclei over the whole slide.
///
/// The output does not depend on the number of workers or on the order in
/// which tiles finish. On a backend failure the error carries the merged
/// detections of the tiles that did finish.
pub fn run_slide(cfg: &PipelineConfig, slide: &SlideSource, factory: &dyn BackendFactory) -> std::result::Result<RunOutput, PipelineError> {
    let start = Instant::now();
    cfg.validate()?;
    let det_cfg = cfg.detector_config(slide.mpp());

    // pre-processing
    let SlideLayout {
        factor,
        dims,
        mask,
        tissue_area_mm2,
        grid,
    } = layout(cfg, slide)?;
    let windows = partition_windows(cfg.tile_size, cfg.window_size, cfg.window_overlap)?;
    let level = slide.best_level_for(factor);
    let plan = Plan {
        factor,
        dims,
        grid,
        windows,
        level,
        downsample: slide.levels()[level].downsample,
    };
    if let Some(path) = &cfg.output.window_index {
        write_window_index(path, &plan.window_index())?;
    }
    let preprocess_s = start.elapsed().as_secs_f64();

    // inference
    let infer_start = Instant::now();
    let workers = cfg.workers().min(plan.grid.len()).max(1);
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    let fail = |e: Error| {
        abort.store(true, Ordering::SeqCst);
        failure.lock().unwrap_or_else(|p| p.into_inner()).get_or_insert(e);
    };
    let per_worker: Vec<Vec<TileRecord>> = if plan.grid.is_empty() {
        Vec::new()
    } else {
        crate::par::run_workers(workers, |worker| {
            let mut done = Vec::new();
            let setup = slide.try_clone().and_then(|s| Ok((s, factory.create(worker)?)));
            let (mut handle, mut backend) = match setup {
                Ok(v) => v,
                Err(e) => {
                    fail(e);
                    return done;
                }
            };
            while !abort.load(Ordering::SeqCst) {
                let index = next.fetch_add(1, Ordering::SeqCst);
                if index >= plan.grid.len() {
                    break;
                }
                let t0 = Instant::now();
                match process_tile(&mut handle, backend.as_mut(), &plan, &det_cfg, cfg.batch_size, index) {
                    Ok(detections) => done.push(TileRecord {
                        index,
                        detections,
                        seconds: t0.elapsed().as_secs_f64(),
                    }),
                    Err(e) => {
                        fail(e);
                        break;
                    }
                }
            }
            done
        })
    };
    let records: Vec<TileRecord> = per_worker.into_iter().flatten().collect();
    let tile_time_sum_s = records.iter().map(|r| r.seconds).sum();
    let inference_s = infer_start.elapsed().as_secs_f64();

    // post-processing
    let post_start = Instant::now();
    let tiles_done = records.len();
    let merged = reduce(&plan, records);
    if let Some(error) = failure.into_inner().unwrap_or_else(|p| p.into_inner()) {
        return Err(PipelineError {
            error,
            partial: merged,
            tiles_done,
        });
    }
    let detections = if det_cfg.confidence_threshold > 0.0 {
        filter_by_confidence(&merged, det_cfg.confidence_threshold)
    } else {
        merged
    };
    let postprocess_s = post_start.elapsed().as_secs_f64();
    let total_s = start.elapsed().as_secs_f64();

    let timing = TimingReport {
        preprocess_s,
        inference_s,
        postprocess_s,
        total_s,
        tissue_area_mm2,
        throughput_mm2_per_s: if total_s > 0.0 { tissue_area_mm2 / total_s } else { 0.0 },
        tile_time_sum_s,
        tiles: plan.grid.len(),
        windows: plan.grid.len() * plan.windows.origins.len(),
        workers,
    };
    log::info!(
        "{} tiles, {} detections in {:.3}s (pre {:.3}s, inference {:.3}s, post {:.3}s)",
        timing.tiles,
        detections.len(),
        total_s,
        preprocess_s,
        inference_s,
        postprocess_s
    );
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        slide: slide_identity(slide)?,
        config: cfg.clone(),
        timings: timing.clone(),
        detection_count: detections.len(),
    };
    Ok(RunOutput {
        detections,
        timing,
        manifest,
        mask,
        grid: plan.grid,
    })
}

impl RunManifest {
    pub fn write(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}
