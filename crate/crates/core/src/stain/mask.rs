use serde::{Deserialize, Serialize};

use super::{rgb_to_hed, StainMatrix};
use crate::error::Result;
use crate::slide_io::RasterImage;

/// Per-channel density thresholds (`None` disables a channel) and the square
/// structuring-element radii of the opening and closing that follow.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TissueMaskParams {
    pub hematoxylin: Option<f64>,
    pub eosin: Option<f64>,
    pub dab: Option<f64>,
    pub open_radius: u32,
    pub close_radius: u32,
}

impl Default for TissueMaskParams {
    fn default() -> Self {
        Self {
            hematoxylin: Some(0.05),
            eosin: Some(0.05),
            dab: None,
            open_radius: 2,
            close_radius: 2,
        }
    }
}

impl TissueMaskParams {
    pub fn thresholds(&self) -> [f64; 3] {
        [self.hematoxylin, self.eosin, self.dab].map(|t| t.unwrap_or(f64::INFINITY))
    }

    pub fn with_thresholds(mut self, t: [f64; 3]) -> Self {
        self.hematoxylin = Some(t[0]);
        self.eosin = Some(t[1]);
        self.dab = Some(t[2]);
        self
    }

    pub fn without_morphology(mut self) -> Self {
        self.open_radius = 0;
        self.close_radius = 0;
        self
    }
}

/// Binary tissue map at thumbnail resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct TissueMask {
    pub width: u32,
    pub height: u32,
    pub data: Vec<bool>,
    /// Level-0 pixels per mask pixel.
    pub scale: f64,
}

impl TissueMask {
    pub fn full(width: u32, height: u32, scale: f64) -> Self {
        Self {
            width,
            height,
            data: vec![true; width as usize * height as usize],
            scale,
        }
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.data[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn coverage(&self) -> f64 {
        if self.data.is_empty() {
            0.0
        } else {
            self.count() as f64 / self.data.len() as f64
        }
    }

    /// Area under the mask in square millimeters.
    pub fn tissue_area_mm2(&self, mpp: f64) -> f64 {
        let px = self.scale * mpp;
        self.count() as f64 * px * px / 1.0e6
    }

    /// Fraction of mask pixels under the level-0 rectangle `[x0,x1) x [y0,y1)`
    /// that are tissue. Mask pixels are included when the rectangle touches them.
    pub fn fraction_in(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
        let mx0 = ((x0 / self.scale).floor().max(0.0) as u32).min(self.width);
        let my0 = ((y0 / self.scale).floor().max(0.0) as u32).min(self.height);
        let mx1 = ((x1 / self.scale).ceil().max(0.0) as u32).min(self.width);
        let my1 = ((y1 / self.scale).ceil().max(0.0) as u32).min(self.height);
        let total = (mx1.saturating_sub(mx0) as usize) * (my1.saturating_sub(my0) as usize);
        if total == 0 {
            return 0.0;
        }
        let mut hits = 0usize;
        for y in my0..my1 {
            let row = &self.data[y as usize * self.width as usize..][..self.width as usize];
            hits += row[mx0 as usize..mx1 as usize].iter().filter(|&&v| v).count();
        }
        hits as f64 / total as f64
    }

    pub fn to_image(&self) -> RasterImage {
        let px = self
            .data
            .iter()
            .flat_map(|&v| if v { [255u8; 3] } else { [0u8; 3] })
            .collect();
        RasterImage::from_raw(self.width, self.height, px).expect("mask dims")
    }
}

/// Thresholds the stain densities of `thumb`, then applies opening and closing.
/// A pixel is tissue when some channel density (negatives clamped to zero)
/// reaches that channel's threshold.
pub fn compute_tissue_mask(thumb: &RasterImage, scale: f64, m: &StainMatrix, params: &TissueMaskParams) -> Result<TissueMask> {
    let t = params.thresholds();
    if t.iter().any(|v| v.is_nan() || *v < 0.0) {
        return Err(crate::Error::param("tissue thresholds must be >= 0"));
    }
    let hed = rgb_to_hed(thumb, m);
    let raw: Vec<bool> = hed
        .densities
        .iter()
        .map(|d| (0..3).any(|k| d[k].max(0.0) >= t[k]))
        .collect();
    let (w, h) = thumb.dims();
    let mut data = raw;
    if params.open_radius > 0 {
        data = dilate(&erode(&data, w, h, params.open_radius), w, h, params.open_radius);
    }
    if params.close_radius > 0 {
        data = erode(&dilate(&data, w, h, params.close_radius), w, h, params.close_radius);
    }
    Ok(TissueMask {
        width: w,
        height: h,
        data,
        scale,
    })
}

/// Square-window erosion; out-of-image pixels are ignored.
pub(crate) fn erode(data: &[bool], w: u32, h: u32, r: u32) -> Vec<bool> {
    let inv: Vec<bool> = data.iter().map(|v| !v).collect();
    dilate(&inv, w, h, r).into_iter().map(|v| !v).collect()
}

/// Square-window dilation; out-of-image pixels are ignored.
pub(crate) fn dilate(data: &[bool], w: u32, h: u32, r: u32) -> Vec<bool> {
    let (w, h, r) = (w as usize, h as usize, r as usize);
    let mut rows = vec![false; data.len()];
    for y in 0..h {
        running_any(&data[y * w..(y + 1) * w], r, &mut rows[y * w..(y + 1) * w]);
    }
    let mut out = vec![false; data.len()];
    let mut col = vec![false; h];
    let mut col_out = vec![false; h];
    for x in 0..w {
        for y in 0..h {
            col[y] = rows[y * w + x];
        }
        running_any(&col, r, &mut col_out);
        for y in 0..h {
            out[y * w + x] = col_out[y];
        }
    }
    out
}

fn running_any(src: &[bool], r: usize, dst: &mut [bool]) {
    let n = src.len();
    let mut prefix = vec![0u32; n + 1];
    for i in 0..n {
        prefix[i + 1] = prefix[i] + src[i] as u32;
    }
    for i in 0..n {
        let lo = i.saturating_sub(r);
        let hi = (i + r + 1).min(n);
        dst[i] = prefix[hi] > prefix[lo];
    }
}
