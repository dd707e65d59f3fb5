use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{DetectorBackend, DetectorConfig, WindowInput};
use crate::annotation::{AnnotationRecord, AnnotationSet, CentroidIndex};
use crate::error::{Error, Result};
use crate::tiler::{Detection, PixelRect};

const INDEX_CELL: f64 = 128.0;

fn to_window(r: &AnnotationRecord, score: f64, origin: (f64, f64), scale: f64) -> Detection {
    Detection {
        cx: (r.cx - origin.0) / scale,
        cy: (r.cy - origin.1) / scale,
        w: r.w / scale,
        h: r.h / scale,
        class_id: r.class_id,
        score,
    }
}

/// Annotated nuclei whose centroid lies in `window_rect` (half-open), in
/// window-local coordinates with score 1.
pub fn oracle_detect(annotations: &AnnotationSet, window_rect: PixelRect) -> Vec<Detection> {
    let origin = (window_rect.x as f64, window_rect.y as f64);
    annotations
        .records
        .iter()
        .filter(|r| window_rect.contains_point(r.cx, r.cy))
        .map(|r| to_window(r, 1.0, origin, 1.0))
        .collect()
}

/// Centroid lookup shared by the oracle and jitter backends.
#[derive(Debug, Clone)]
struct ScoredIndex {
    records: Arc<Vec<AnnotationRecord>>,
    scores: Arc<Vec<f64>>,
    index: Arc<CentroidIndex>,
}

impl ScoredIndex {
    fn new(records: Vec<AnnotationRecord>, scores: Vec<f64>) -> Self {
        let index = CentroidIndex::new(&records, INDEX_CELL);
        Self {
            records: Arc::new(records),
            scores: Arc::new(scores),
            index: Arc::new(index),
        }
    }

    fn window(&self, w: &WindowInput) -> Vec<Detection> {
        let (x0, y0, x1, y1) = w.level0_rect();
        self.index
            .query(&self.records, x0, y0, x1, y1)
            .into_iter()
            .map(|i| to_window(&self.records[i], self.scores[i], w.origin, w.scale))
            .collect()
    }
}

/// Returns the ground truth for every window.
#[derive(Debug, Clone)]
pub struct OracleBackend {
    inner: ScoredIndex,
}

impl OracleBackend {
    pub fn new(annotations: &AnnotationSet) -> Self {
        let n = annotations.len();
        Self {
            inner: ScoredIndex::new(annotations.records.clone(), vec![1.0; n]),
        }
    }
}

impl DetectorBackend for OracleBackend {
    fn name(&self) -> &str {
        "oracle"
    }

    fn detect_batch(&mut self, batch: &[WindowInput], _cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
        Ok(batch.iter().map(|w| self.inner.window(w)).collect())
    }

    fn shareable(&self) -> bool {
        true
    }
}

/// Noise model of [`JitterBackend`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    pub drop_prob: f64,
    /// Standard deviation of the centroid jitter, level-0 pixels.
    pub jitter_sigma: f64,
    pub class_flip_prob: f64,
    /// Score interval of detections that correspond to a nucleus.
    pub score_range_true: (f64, f64),
    /// Score interval of spurious detections.
    pub score_range_false: (f64, f64),
    /// Spurious detections added, as a fraction of the nucleus count.
    pub spurious_fraction: f64,
    pub rng_seed: u64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self {
            drop_prob: 0.05,
            jitter_sigma: 1.5,
            class_flip_prob: 0.1,
            score_range_true: (0.5, 1.0),
            score_range_false: (0.0, 0.5),
            spurious_fraction: 0.05,
            rng_seed: 0,
        }
    }
}

impl NoiseSpec {
    /// No noise at all: behaves exactly like the oracle.
    pub fn none() -> Self {
        Self {
            drop_prob: 0.0,
            jitter_sigma: 0.0,
            class_flip_prob: 0.0,
            score_range_true: (1.0, 1.0),
            score_range_false: (0.0, 0.0),
            spurious_fraction: 0.0,
            rng_seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("drop_prob", self.drop_prob), ("class_flip_prob", self.class_flip_prob)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::param(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [("score_range_true", self.score_range_true), ("score_range_false", self.score_range_false)] {
            if !(0.0 <= lo && lo <= hi && hi <= 1.0) {
                return Err(Error::param(format!("{name} must be an interval inside [0, 1]")));
            }
        }
        if !(self.jitter_sigma >= 0.0 && self.jitter_sigma.is_finite()) {
            return Err(Error::param("jitter_sigma must be non-negative"));
        }
        if !(self.spurious_fraction >= 0.0 && self.spurious_fraction.is_finite()) {
            return Err(Error::param("spurious_fraction must be non-negative"));
        }
        Ok(())
    }
}

fn draw_score(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

/// Oracle with drops, centroid jitter, class flips, random scores and
/// spurious detections.
///
/// The noise is drawn once per nucleus from its own random stream, so a
/// nucleus seen by several overlapping windows looks the same in each and
/// the output does not depend on batching or tiling.
#[derive(Debug, Clone)]
pub struct JitterBackend {
    inner: ScoredIndex,
}

impl JitterBackend {
    /// `extent` is the level-0 slide size; jittered centroids are clamped to
    /// it and spurious detections are spread over it.
    pub fn new(annotations: &AnnotationSet, noise: &NoiseSpec, num_classes: u32, extent: (u32, u32)) -> Result<Self> {
        noise.validate()?;
        let (ew, eh) = (extent.0.max(1) as f64, extent.1.max(1) as f64);
        let clamp = |v: f64, hi: f64| v.clamp(0.0, hi.next_down());
        let normal = Normal::new(0.0, noise.jitter_sigma).map_err(|e| Error::param(e.to_string()))?;
        let mut records = Vec::with_capacity(annotations.len());
        let mut scores = Vec::with_capacity(annotations.len());
        for (i, r) in annotations.records.iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed);
            rng.set_stream(i as u64);
            let dropped = rng.random::<f64>() < noise.drop_prob;
            let (dx, dy) = (normal.sample(&mut rng), normal.sample(&mut rng));
            let flip = rng.random::<f64>() < noise.class_flip_prob;
            let other = rng.random_range(0..num_classes.max(2) - 1);
            let score = draw_score(&mut rng, noise.score_range_true);
            if dropped {
                continue;
            }
            let mut rec = r.clone();
            rec.cx = clamp(r.cx + dx, ew);
            rec.cy = clamp(r.cy + dy, eh);
            if flip && num_classes > 1 {
                rec.class_id = if other >= r.class_id { other + 1 } else { other };
            }
            records.push(rec);
            scores.push(score);
        }
        let spurious = (noise.spurious_fraction * annotations.len() as f64).round() as usize;
        for j in 0..spurious {
            let mut rng = ChaCha8Rng::seed_from_u64(noise.rng_seed ^ 0x5eed_f00d_0000_0001);
            rng.set_stream(j as u64);
            let (w, h) = if annotations.is_empty() {
                (12.0, 12.0)
            } else {
                let r = &annotations.records[rng.random_range(0..annotations.len())];
                (r.w, r.h)
            };
            records.push(AnnotationRecord {
                cx: rng.random_range(0.0..ew),
                cy: rng.random_range(0.0..eh),
                w,
                h,
                class_id: rng.random_range(0..num_classes.max(1)),
                tissue: None,
            });
            scores.push(draw_score(&mut rng, noise.score_range_false));
        }
        Ok(Self {
            inner: ScoredIndex::new(records, scores),
        })
    }
}

impl DetectorBackend for JitterBackend {
    fn name(&self) -> &str {
        "jitter"
    }

    fn detect_batch(&mut self, batch: &[WindowInput], _cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
        Ok(batch.iter().map(|w| self.inner.window(w)).collect())
    }

    fn shareable(&self) -> bool {
        true
    }
}

/// One-window convenience over [`JitterBackend`].
pub fn jitter_detect(annotations: &AnnotationSet, window_rect: PixelRect, noise: &NoiseSpec, num_classes: u32, extent: (u32, u32)) -> Result<Vec<Detection>> {
    let backend = JitterBackend::new(annotations, noise, num_classes, extent)?;
    let window = WindowInput::new(
        0,
        (window_rect.x as f64, window_rect.y as f64),
        crate::slide_io::RasterImage::white(window_rect.w, window_rect.h),
    );
    Ok(backend.inner.window(&window))
}
