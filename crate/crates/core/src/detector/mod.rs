//! Detector contract over fixed-size windows.
//!
//! A backend sees a batch of RGB windows and returns window-local
//! detections. [`detect`] wraps every backend call and enforces the output
//! contract (size check, in-window coordinates, score order, top-k).

mod oracle;
pub mod protocol;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::slide_io::RasterImage;
use crate::tiler::Detection;

pub use oracle::{jitter_detect, oracle_detect, JitterBackend, NoiseSpec, OracleBackend};
pub use protocol::{ProcessAdapter, ProtocolSession};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub window_size: u32,
    pub mpp: f64,
    pub num_queries: usize,
    pub top_k: usize,
    pub confidence_threshold: f64,
    pub class_names: Vec<String>,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            window_size: 256,
            mpp: 0.25,
            num_queries: 900,
            top_k: 300,
            confidence_threshold: 0.0,
            class_names: crate::default_class_names(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_size == 0 {
            return Err(Error::param("window_size must be positive"));
        }
        if self.top_k > self.num_queries {
            return Err(Error::param(format!(
                "top_k ({}) exceeds num_queries ({})",
                self.top_k, self.num_queries
            )));
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return Err(Error::param("confidence_threshold must lie in [0, 1]"));
        }
        if !(self.mpp > 0.0 && self.mpp.is_finite()) {
            return Err(Error::param("mpp must be positive"));
        }
        if self.class_names.is_empty() {
            return Err(Error::param("class list is empty"));
        }
        Ok(())
    }
}

/// One window handed to a backend.
///
/// `origin` is the level-0 position of the window's top-left pixel and
/// `scale` the number of level-0 pixels per window pixel, so the window
/// covers level-0 `[origin, origin + size * scale)`.
#[derive(Debug, Clone)]
pub struct WindowInput {
    pub id: u64,
    pub origin: (f64, f64),
    pub scale: f64,
    pub image: RasterImage,
}

impl WindowInput {
    pub fn new(id: u64, origin: (f64, f64), image: RasterImage) -> Self {
        Self {
            id,
            origin,
            scale: 1.0,
            image,
        }
    }

    /// Level-0 extent `(x0, y0, x1, y1)`, half-open.
    pub fn level0_rect(&self) -> (f64, f64, f64, f64) {
        let (w, h) = self.image.dims();
        (
            self.origin.0,
            self.origin.1,
            self.origin.0 + w as f64 * self.scale,
            self.origin.1 + h as f64 * self.scale,
        )
    }
}

pub trait DetectorBackend: Send {
    fn name(&self) -> &str;

    /// Returns one detection list per window, in batch order.
    fn detect_batch(&mut self, batch: &[WindowInput], cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>>;

    /// Largest batch the backend accepts in one call.
    fn max_batch(&self) -> usize {
        usize::MAX
    }

    /// Whether clones of this backend share one underlying model.
    fn shareable(&self) -> bool {
        false
    }
}

/// Creates one backend instance per pipeline worker.
pub trait BackendFactory: Sync {
    fn create(&self, worker: usize) -> Result<Box<dyn DetectorBackend>>;
}

impl<F> BackendFactory for F
where
    F: Fn(usize) -> Result<Box<dyn DetectorBackend>> + Sync,
{
    fn create(&self, worker: usize) -> Result<Box<dyn DetectorBackend>> {
        self(worker)
    }
}

fn by_score_desc(a: &Detection, b: &Detection) -> Ordering {
    b.score.total_cmp(&a.score)
}

/// Runs `backend` over `batch` and enforces the output contract: every list
/// holds only valid detections whose centroid lies inside its window, sorted
/// by descending score (stable) and truncated to `top_k`.
pub fn detect(backend: &mut dyn DetectorBackend, batch: &[WindowInput], cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
    let size = cfg.window_size;
    if let Some(bad) = batch.iter().find(|w| w.image.dims() != (size, size)) {
        return Err(Error::param(format!(
            "window {} is {}x{}, expected {size}x{size}",
            bad.id,
            bad.image.width(),
            bad.image.height()
        )));
    }
    let mut out = Vec::with_capacity(batch.len());
    for chunk in batch.chunks(backend.max_batch().max(1)) {
        let ids = || chunk.iter().map(|w| w.id).collect::<Vec<_>>();
        let lists = backend.detect_batch(chunk, cfg).map_err(|e| match e {
            Error::Backend { .. } | Error::Protocol { .. } => e,
            other => Error::Backend {
                windows: ids(),
                message: other.to_string(),
            },
        })?;
        if lists.len() != chunk.len() {
            return Err(Error::Backend {
                windows: ids(),
                message: format!("{} returned {} lists for {} windows", backend.name(), lists.len(), chunk.len()),
            });
        }
        let limit = size as f64;
        for mut dets in lists {
            dets.retain(|d| {
                d.is_valid()
                    && (d.class_id as usize) < cfg.class_names.len()
                    && d.cx >= 0.0
                    && d.cx < limit
                    && d.cy >= 0.0
                    && d.cy < limit
            });
            dets.sort_by(by_score_desc);
            dets.truncate(cfg.top_k);
            out.push(dets);
        }
    }
    Ok(out)
}

/// Keeps detections with `score >= tau`, preserving order.
pub fn filter_by_confidence(dets: &[Detection], tau: f64) -> Vec<Detection> {
    dets.iter().filter(|d| d.score >= tau).copied().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Fixed(Vec<Detection>);

    impl DetectorBackend for Fixed {
        fn name(&self) -> &str {
            "fixed"
        }

        fn detect_batch(&mut self, batch: &[WindowInput], _cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
            Ok(batch.iter().map(|_| self.0.clone()).collect())
        }

        fn max_batch(&self) -> usize {
            2
        }
    }

    struct Failing;

    impl DetectorBackend for Failing {
        fn name(&self) -> &str {
            "failing"
        }

        fn detect_batch(&mut self, _batch: &[WindowInput], _cfg: &DetectorConfig) -> Result<Vec<Vec<Detection>>> {
            Err(Error::param("model crashed"))
        }
    }

    fn d(cx: f64, score: f64) -> Detection {
        Detection {
            cx,
            cy: 10.0,
            w: 8.0,
            h: 8.0,
            class_id: 0,
            score,
        }
    }

    fn windows(n: u64, size: u32) -> Vec<WindowInput> {
        (0..n)
            .map(|i| WindowInput::new(i, (0.0, 0.0), RasterImage::white(size, size)))
            .collect()
    }

    #[test]
    fn default_config_is_valid() {
        let cfg = DetectorConfig::default();
        cfg.validate().unwrap();
        assert_eq!((cfg.num_queries, cfg.top_k), (900, 300));
        let bad = DetectorConfig {
            top_k: 901,
            ..cfg
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn empty_batch_yields_nothing() {
        let mut b = Fixed(vec![d(1.0, 0.5)]);
        assert!(detect(&mut b, &[], &DetectorConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn truncates_to_top_k_by_score() {
        let cfg = DetectorConfig {
            top_k: 3,
            num_queries: 4,
            ..Default::default()
        };
        let mut b = Fixed(vec![d(1.0, 0.1), d(2.0, 0.9), d(3.0, 0.5), d(4.0, 0.7)]);
        let out = detect(&mut b, &windows(5, 256), &cfg).unwrap();
        assert_eq!(out.len(), 5);
        for list in out {
            assert_eq!(list, vec![d(2.0, 0.9), d(4.0, 0.7), d(3.0, 0.5)]);
        }
    }

    #[test]
    fn drops_out_of_window_and_unknown_class() {
        let mut bad_class = d(5.0, 0.8);
        bad_class.class_id = 5;
        let mut b = Fixed(vec![d(-0.5, 0.9), d(256.0, 0.9), d(255.5, 0.3), bad_class]);
        let out = detect(&mut b, &windows(1, 256), &DetectorConfig::default()).unwrap();
        assert_eq!(out, vec![vec![d(255.5, 0.3)]]);
    }

    #[test]
    fn rejects_wrong_window_size() {
        let mut b = Fixed(vec![]);
        assert!(matches!(
            detect(&mut b, &windows(1, 128), &DetectorConfig::default()),
            Err(Error::InvalidParam(_))
        ));
    }

    #[test]
    fn backend_failure_names_windows() {
        let err = detect(&mut Failing, &windows(3, 256), &DetectorConfig::default()).unwrap_err();
        match err {
            Error::Backend { windows, .. } => assert_eq!(windows, vec![0, 1, 2]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(Error::Backend { windows: vec![], message: String::new() }.exit_code(), 2);
    }

    #[test]
    fn confidence_filter() {
        let dets = vec![d(1.0, 0.9), d(2.0, 0.5), d(3.0, 0.3)];
        assert_eq!(filter_by_confidence(&dets, 0.0), dets);
        assert_eq!(filter_by_confidence(&dets, 0.5), vec![d(1.0, 0.9), d(2.0, 0.5)]);
        assert!(filter_by_confidence(&dets, 1.0).is_empty());
        let once = filter_by_confidence(&dets, 0.4);
        assert_eq!(filter_by_confidence(&once, 0.4), once);
    }
}
