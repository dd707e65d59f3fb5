//! Overlapped tile and window layouts and the central-crop merge rule.
//!
//! Every region keeps only the detections whose centroid falls in its keep
//! rectangle: the region shrunk on each side that another region overlaps.
//! Keep intervals are half-open, `[min, max)`, so adjacent keep rectangles
//! meet on a shared line and every point of the outer rectangle is owned by
//! exactly one region.

mod grid;
mod merge;

use serde::{Deserialize, Serialize};

pub use self::grid::{axis_origins, enumerate_tiles, partition_windows, GridAxis, TileGrid, WindowGrid};
pub use self::merge::{central_crop_filter, merge_regions, merge_tiles, merge_windows, oversized_fraction, sort_detections, CropRule};

/// One predicted nucleus. Coordinates are in whatever frame the producer
/// works in (window-local, tile-local or level-0).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    #[serde(rename = "class")]
    pub class_id: u32,
    pub score: f64,
}

impl Detection {
    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            cx: self.cx + dx,
            cy: self.cy + dy,
            ..*self
        }
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.score) && self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }
}

/// Integer pixel rectangle `[x, x+w) x [y, y+h)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x: i64,
    pub y: i64,
    pub w: u32,
    pub h: u32,
}

impl PixelRect {
    pub fn new(x: i64, y: i64, w: u32, h: u32) -> Self {
        Self { x, y, w, h }
    }

    pub fn x1(&self) -> i64 {
        self.x + self.w as i64
    }

    pub fn y1(&self) -> i64 {
        self.y + self.h as i64
    }

    pub fn contains_point(&self, px: f64, py: f64) -> bool {
        px >= self.x as f64 && px < self.x1() as f64 && py >= self.y as f64 && py < self.y1() as f64
    }
}
