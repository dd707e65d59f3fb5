//! Optical-density color deconvolution into hematoxylin, eosin and DAB.
//!
//! Per channel, `OD = -log10((c + 1) / 256)`; stains mix linearly in OD, so
//! `OD = densities · M` where the rows of `M` are unit stain vectors.

pub mod augment;
mod mask;

use serde::{Deserialize, Serialize};

pub use self::mask::{compute_tissue_mask, TissueMask, TissueMaskParams};
use crate::error::{Error, Result};
use crate::par;
use crate::slide_io::RasterImage;

/// Offset added to every channel before taking the logarithm, so black
/// pixels stay finite. The incident intensity is offset by the same amount,
/// which keeps white at exactly zero optical density.
pub const OD_EPSILON: f64 = 1.0;
const INCIDENT: f64 = 255.0 + OD_EPSILON;

const MAX_CONDITION: f64 = 1.0e6;

/// Three unit-norm optical-density stain vectors (hematoxylin, eosin, DAB).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[[f64; 3]; 3]", into = "[[f64; 3]; 3]")]
pub struct StainMatrix {
    rows: [[f64; 3]; 3],
    inverse: [[f64; 3]; 3],
}

impl StainMatrix {
    /// Normalizes each row to unit length and checks the matrix is well conditioned.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        let mut unit = rows;
        for r in unit.iter_mut() {
            let n = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
            if !(n > 0.0 && n.is_finite()) {
                return Err(Error::SingularMatrix(f64::INFINITY));
            }
            r.iter_mut().for_each(|v| *v /= n);
        }
        let inverse = invert3(&unit).ok_or(Error::SingularMatrix(f64::INFINITY))?;
        let cond = frobenius(&unit) * frobenius(&inverse);
        if !(cond < MAX_CONDITION) {
            return Err(Error::SingularMatrix(cond));
        }
        Ok(Self {
            rows: unit,
            inverse,
        })
    }

    /// The Ruifrok–Johnson H&E-DAB vectors.
    pub fn ruifrok_johnson() -> Self {
        Self::new([[0.65, 0.70, 0.29], [0.07, 0.99, 0.11], [0.27, 0.57, 0.78]])
            .expect("reference stain vectors are well conditioned")
    }

    pub fn rows(&self) -> &[[f64; 3]; 3] {
        &self.rows
    }

    pub fn inverse(&self) -> &[[f64; 3]; 3] {
        &self.inverse
    }

    #[inline]
    pub fn od_to_densities(&self, od: [f64; 3]) -> [f64; 3] {
        row_times(&od, &self.inverse)
    }

    #[inline]
    pub fn densities_to_od(&self, d: [f64; 3]) -> [f64; 3] {
        row_times(&d, &self.rows)
    }

    #[inline]
    pub fn rgb_to_densities(&self, rgb: [u8; 3]) -> [f64; 3] {
        self.od_to_densities([
            channel_to_od(rgb[0]),
            channel_to_od(rgb[1]),
            channel_to_od(rgb[2]),
        ])
    }

    #[inline]
    pub fn densities_to_rgb(&self, d: [f64; 3]) -> [u8; 3] {
        let od = self.densities_to_od(d);
        [od_to_channel(od[0]), od_to_channel(od[1]), od_to_channel(od[2])]
    }
}

impl Default for StainMatrix {
    fn default() -> Self {
        Self::ruifrok_johnson()
    }
}

impl TryFrom<[[f64; 3]; 3]> for StainMatrix {
    type Error = Error;
    fn try_from(rows: [[f64; 3]; 3]) -> Result<Self> {
        Self::new(rows)
    }
}

impl From<StainMatrix> for [[f64; 3]; 3] {
    fn from(m: StainMatrix) -> Self {
        m.rows
    }
}

#[inline]
pub fn channel_to_od(c: u8) -> f64 {
    -((c as f64 + OD_EPSILON) / INCIDENT).log10()
}

#[inline]
pub fn od_to_channel(od: f64) -> u8 {
    (INCIDENT * 10f64.powf(-od) - OD_EPSILON).round().clamp(0.0, 255.0) as u8
}

/// Per-pixel stain densities.
#[derive(Debug, Clone, PartialEq)]
pub struct HedImage {
    pub width: u32,
    pub height: u32,
    pub densities: Vec<[f64; 3]>,
}

impl HedImage {
    pub fn zeros(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            densities: vec![[0.0; 3]; width as usize * height as usize],
        }
    }
}

pub fn rgb_to_hed(img: &RasterImage, m: &StainMatrix) -> HedImage {
    let lut: Vec<f64> = (0..=255u8).map(channel_to_od).collect();
    let (w, h) = img.dims();
    let mut densities = vec![[0.0; 3]; w as usize * h as usize];
    let src = img.pixels();
    par::for_each_row(&mut densities, w as usize, |y, row| {
        let base = y * w as usize * 3;
        for (x, d) in row.iter_mut().enumerate() {
            let p = &src[base + x * 3..base + x * 3 + 3];
            *d = m.od_to_densities([lut[p[0] as usize], lut[p[1] as usize], lut[p[2] as usize]]);
        }
    });
    HedImage {
        width: w,
        height: h,
        densities,
    }
}

pub fn hed_to_rgb(hed: &HedImage, m: &StainMatrix) -> RasterImage {
    let w = hed.width as usize;
    let mut pixels = vec![0u8; w * hed.height as usize * 3];
    par::for_each_row(&mut pixels, w * 3, |y, row| {
        for (x, px) in row.chunks_mut(3).enumerate() {
            px.copy_from_slice(&m.densities_to_rgb(hed.densities[y * w + x]));
        }
    });
    RasterImage::from_raw(hed.width, hed.height, pixels).expect("dimensions carried over")
}

fn row_times(v: &[f64; 3], m: &[[f64; 3]; 3]) -> [f64; 3] {
    [
        v[0] * m[0][0] + v[1] * m[1][0] + v[2] * m[2][0],
        v[0] * m[0][1] + v[1] * m[1][1] + v[2] * m[2][1],
        v[0] * m[0][2] + v[1] * m[1][2] + v[2] * m[2][2],
    ]
}

fn frobenius(m: &[[f64; 3]; 3]) -> f64 {
    m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt()
}

fn invert3(m: &[[f64; 3]; 3]) -> Option<[[f64; 3]; 3]> {
    let c00 = m[1][1] * m[2][2] - m[1][2] * m[2][1];
    let c01 = m[1][2] * m[2][0] - m[1][0] * m[2][2];
    let c02 = m[1][0] * m[2][1] - m[1][1] * m[2][0];
    let det = m[0][0] * c00 + m[0][1] * c01 + m[0][2] * c02;
    if det.abs() < 1e-12 || !det.is_finite() {
        return None;
    }
    let inv_det = 1.0 / det;
    Some([
        [
            c00 * inv_det,
            (m[0][2] * m[2][1] - m[0][1] * m[2][2]) * inv_det,
            (m[0][1] * m[1][2] - m[0][2] * m[1][1]) * inv_det,
        ],
        [
            c01 * inv_det,
            (m[0][0] * m[2][2] - m[0][2] * m[2][0]) * inv_det,
            (m[0][2] * m[1][0] - m[0][0] * m[1][2]) * inv_det,
        ],
        [
            c02 * inv_det,
            (m[0][1] * m[2][0] - m[0][0] * m[2][1]) * inv_det,
            (m[0][0] * m[1][1] - m[0][1] * m[1][0]) * inv_det,
        ],
    ])
}
