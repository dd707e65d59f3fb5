//! Training-time augmentations that keep box targets consistent with pixels.
//!
//! Geometric ops move boxes with the image; photometric ops (blur, stain
//! jitter) leave them alone.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{rgb_to_hed, StainMatrix};
use crate::par;
use crate::slide_io::RasterImage;
use crate::stain::hed_to_rgb;

/// Axis-aligned box target in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxTarget {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub class_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ElasticParams {
    pub p: f64,
    pub alpha: f64,
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotateParams {
    pub p: f64,
    pub angles: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlurParams {
    pub p: f64,
    pub kernel_size: usize,
    pub sigma: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HedJitterParams {
    pub p: f64,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResizedCropParams {
    pub p: f64,
    pub size: u32,
    pub scale: (f64, f64),
}

/// Augmentation probabilities and hyperparameters. Defaults follow the
/// published training recipe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationParams {
    pub elastic: ElasticParams,
    pub hflip_p: f64,
    pub vflip_p: f64,
    pub rotate: RotateParams,
    pub blur: BlurParams,
    pub hed: HedJitterParams,
    pub resized_crop: ResizedCropParams,
}

impl Default for AugmentationParams {
    fn default() -> Self {
        Self {
            elastic: ElasticParams {
                p: 0.2,
                alpha: 0.5,
                sigma: 0.25,
            },
            hflip_p: 0.5,
            vflip_p: 0.5,
            rotate: RotateParams {
                p: 1.0,
                angles: vec![0, 90, 180, 270],
            },
            blur: BlurParams {
                p: 0.2,
                kernel_size: 9,
                sigma: (0.2, 1.0),
            },
            hed: HedJitterParams {
                p: 0.2,
                alpha: 0.04,
                beta: 0.04,
            },
            resized_crop: ResizedCropParams {
                p: 0.2,
                size: 256,
                scale: (0.8, 1.0),
            },
        }
    }
}

impl AugmentationParams {
    /// Every augmentation disabled.
    pub fn none() -> Self {
        let mut p = Self::default();
        p.elastic.p = 0.0;
        p.hflip_p = 0.0;
        p.vflip_p = 0.0;
        p.rotate.p = 0.0;
        p.blur.p = 0.0;
        p.hed.p = 0.0;
        p.resized_crop.p = 0.0;
        p
    }

    pub fn validate(&self) -> crate::Result<()> {
        let probs = [
            self.elastic.p,
            self.hflip_p,
            self.vflip_p,
            self.rotate.p,
            self.blur.p,
            self.hed.p,
            self.resized_crop.p,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(crate::Error::param("augmentation probabilities must lie in [0, 1]"));
        }
        let nonneg = [
            self.elastic.alpha,
            self.elastic.sigma,
            self.blur.sigma.0,
            self.blur.sigma.1,
            self.hed.alpha,
            self.hed.beta,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(crate::Error::param("augmentation alpha/beta/sigma must be >= 0"));
        }
        if self.rotate.angles.iter().any(|a| a % 90 != 0) {
            return Err(crate::Error::param("rotation angles must be multiples of 90"));
        }
        if self.blur.kernel_size.is_multiple_of(2) {
            return Err(crate::Error::param("blur kernel size must be odd"));
        }
        let (lo, hi) = self.resized_crop.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) || self.resized_crop.size == 0 {
            return Err(crate::Error::param("resized crop scale must satisfy 0 < lo <= hi <= 1"));
        }
        Ok(())
    }
}

pub fn hflip(img: &RasterImage, boxes: &[BoxTarget]) -> (RasterImage, Vec<BoxTarget>) {
    let (w, h) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, img.get(w - 1 - x, y));
        }
    }
    let boxes = boxes
        .iter()
        .map(|b| BoxTarget {
            cx: w as f64 - b.cx,
            ..*b
        })
        .collect();
    (out, boxes)
}

pub fn vflip(img: &RasterImage, boxes: &[BoxTarget]) -> (RasterImage, Vec<BoxTarget>) {
    let (w, h) = img.dims();
    let mut out = img.clone();
    for y in 0..h {
        for x in 0..w {
            out.put(x, y, img.get(x, h - 1 - y));
        }
    }
    let boxes = boxes
        .iter()
        .map(|b| BoxTarget {
            cy: h as f64 - b.cy,
            ..*b
        })
        .collect();
    (out, boxes)
}

/// Rotates clockwise by `quarter_turns * 90` degrees.
pub fn rotate90(img: &RasterImage, boxes: &[BoxTarget], quarter_turns: u32) -> (RasterImage, Vec<BoxTarget>) {
    let mut cur = (img.clone(), boxes.to_vec());
    for _ in 0..quarter_turns % 4 {
        let (src, bs) = &cur;
        let (w, h) = src.dims();
        let mut out = RasterImage::white(h, w);
        for y in 0..h {
            for x in 0..w {
                out.put(h - 1 - y, x, src.get(x, y));
            }
        }
        let bs = bs
            .iter()
            .map(|b| BoxTarget {
                cx: h as f64 - b.cy,
                cy: b.cx,
                w: b.h,
                h: b.w,
                class_id: b.class_id,
            })
            .collect();
        cur = (out, bs);
    }
    cur
}

fn gaussian_kernel(radius: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        let mut k = vec![0.0; 2 * radius + 1];
        k[radius] = 1.0;
        return k;
    }
    let k: Vec<f64> = (0..=2 * radius)
        .map(|i| {
            let d = i as f64 - radius as f64;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &RasterImage, kernel_size: usize, sigma: f64) -> RasterImage {
    let radius = kernel_size / 2;
    let k = gaussian_kernel(radius, sigma);
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return img.clone();
    }
    let src = img.pixels();
    let mut tmp = vec![0f64; w * h * 3];
    par::for_each_row(&mut tmp, w * 3, |y, row| {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sx = (x as i64 + i as i64 - radius as i64).clamp(0, w as i64 - 1) as usize;
                    acc += kv * src[(y * w + sx) * 3 + c] as f64;
                }
                row[x * 3 + c] = acc;
            }
        }
    });
    let mut out = vec![0u8; w * h * 3];
    par::for_each_row(&mut out, w * 3, |y, row| {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let sy = (y as i64 + i as i64 - radius as i64).clamp(0, h as i64 - 1) as usize;
                    acc += kv * tmp[(sy * w + x) * 3 + c];
                }
                row[x * 3 + c] = acc.round().clamp(0.0, 255.0) as u8;
            }
        }
    });
    RasterImage::from_raw(w as u32, h as u32, out).expect("dims")
}

/// Per-channel stain jitter drawn once per image: `c' = c * (1 + u1) + u2`
/// with `u1 ~ U(-alpha, alpha)`, `u2 ~ U(-beta, beta)`.
pub fn hed_augment(img: &RasterImage, m: &StainMatrix, alpha: f64, beta: f64, rng: &mut impl Rng) -> RasterImage {
    let mut scale = [1.0; 3];
    let mut shift = [0.0; 3];
    for k in 0..3 {
        scale[k] = 1.0 + rng.random_range(-alpha..=alpha);
        shift[k] = rng.random_range(-beta..=beta);
    }
    hed_perturb(img, m, scale, shift)
}

/// Deterministic core of [`hed_augment`].
pub fn hed_perturb(img: &RasterImage, m: &StainMatrix, scale: [f64; 3], shift: [f64; 3]) -> RasterImage {
    let mut hed = rgb_to_hed(img, m);
    for d in hed.densities.iter_mut() {
        for k in 0..3 {
            d[k] = d[k] * scale[k] + shift[k];
        }
    }
    hed_to_rgb(&hed, m)
}

/// Crops `rect = (x, y, w, h)` and resizes it to `size x size`. Boxes are
/// clipped to the crop; boxes with no overlap are dropped.
pub fn resized_crop(img: &RasterImage, boxes: &[BoxTarget], rect: (u32, u32, u32, u32), size: u32) -> (RasterImage, Vec<BoxTarget>) {
    let (x0, y0, cw, ch) = rect;
    let out = img.crop(x0 as i64, y0 as i64, cw, ch).resize_area(size, size);
    let sx = size as f64 / cw as f64;
    let sy = size as f64 / ch as f64;
    let (fx0, fy0, fx1, fy1) = (x0 as f64, y0 as f64, (x0 + cw) as f64, (y0 + ch) as f64);
    let mut kept = Vec::with_capacity(boxes.len());
    for b in boxes {
        let (bx0, by0, bx1, by1) = (b.cx - b.w / 2.0, b.cy - b.h / 2.0, b.cx + b.w / 2.0, b.cy + b.h / 2.0);
        if bx1 <= fx0 || bx0 >= fx1 || by1 <= fy0 || by0 >= fy1 {
            continue;
        }
        let inside = bx0 >= fx0 && by0 >= fy0 && bx1 <= fx1 && by1 <= fy1;
        let (cx, cy, w, h) = if inside {
            (b.cx, b.cy, b.w, b.h)
        } else {
            let (cx0, cy0, cx1, cy1) = (bx0.max(fx0), by0.max(fy0), bx1.min(fx1), by1.min(fy1));
            ((cx0 + cx1) / 2.0, (cy0 + cy1) / 2.0, cx1 - cx0, cy1 - cy0)
        };
        kept.push(BoxTarget {
            cx: (cx - fx0) * sx,
            cy: (cy - fy0) * sy,
            w: w * sx,
            h: h * sy,
            class_id: b.class_id,
        });
    }
    (out, kept)
}

/// Smoothed random displacement warp. Box centroids follow the field; box
/// sizes are kept.
pub fn elastic(img: &RasterImage, boxes: &[BoxTarget], alpha: f64, sigma: f64, rng: &mut impl Rng) -> (RasterImage, Vec<BoxTarget>) {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let n = w * h;
    let mut field_x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let mut field_y: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..=1.0)).collect();
    let radius = (3.0 * sigma).ceil() as usize;
    let k = gaussian_kernel(radius, sigma);
    smooth_field(&mut field_x, w, h, &k, alpha);
    smooth_field(&mut field_y, w, h, &k, alpha);

    let mut out = vec![0u8; n * 3];
    let src = img.pixels();
    par::for_each_row(&mut out, w * 3, |y, row| {
        for x in 0..w {
            let px = bilinear(src, w, h, x as f64 + field_x[y * w + x], y as f64 + field_y[y * w + x]);
            row[x * 3..x * 3 + 3].copy_from_slice(&px);
        }
    });
    let boxes = boxes
        .iter()
        .map(|b| {
            let (dx, dy) = sample_field(&field_x, &field_y, w, h, b.cx - 0.5, b.cy - 0.5);
            BoxTarget {
                cx: b.cx - dx,
                cy: b.cy - dy,
                ..*b
            }
        })
        .collect();
    (RasterImage::from_raw(w as u32, h as u32, out).expect("dims"), boxes)
}

fn smooth_field(field: &mut [f64], w: usize, h: usize, k: &[f64], alpha: f64) {
    let r = k.len() / 2;
    let mut tmp = vec![0.0; field.len()];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * field[y * w + (x as i64 + i as i64 - r as i64).clamp(0, w as i64 - 1) as usize])
                .sum();
        }
    }
    for y in 0..h {
        for x in 0..w {
            field[y * w + x] = alpha
                * k.iter()
                    .enumerate()
                    .map(|(i, kv)| kv * tmp[(y as i64 + i as i64 - r as i64).clamp(0, h as i64 - 1) as usize * w + x])
                    .sum::<f64>();
        }
    }
}

fn sample_field(fx: &[f64], fy: &[f64], w: usize, h: usize, x: f64, y: f64) -> (f64, f64) {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (xc - x0 as f64, yc - y0 as f64);
    let lerp = |f: &[f64]| {
        let a = f[y0 * w + x0] * (1.0 - tx) + f[y0 * w + x1] * tx;
        let b = f[y1 * w + x0] * (1.0 - tx) + f[y1 * w + x1] * tx;
        a * (1.0 - ty) + b * ty
    };
    (lerp(fx), lerp(fy))
}

fn bilinear(src: &[u8], w: usize, h: usize, x: f64, y: f64) -> [u8; 3] {
    let xc = x.clamp(0.0, (w - 1) as f64);
    let yc = y.clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (xc.floor() as usize, yc.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (tx, ty) = (xc - x0 as f64, yc - y0 as f64);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let p = |xx: usize, yy: usize| src[(yy * w + xx) * 3 + c] as f64;
        let v = (p(x0, y0) * (1.0 - tx) + p(x1, y0) * tx) * (1.0 - ty) + (p(x0, y1) * (1.0 - tx) + p(x1, y1) * tx) * ty;
        out[c] = v.round().clamp(0.0, 255.0) as u8;
    }
    out
}

fn fires(p: f64, rng: &mut impl Rng) -> bool {
    p > 0.0 && rng.random::<f64>() < p
}

/// Applies elastic, flips, rotation, blur, stain jitter and resized crop, in
/// that order, each gated by its probability.
pub fn apply_augmentations(
    img: &RasterImage,
    boxes: &[BoxTarget],
    params: &AugmentationParams,
    m: &StainMatrix,
    rng: &mut impl Rng,
) -> (RasterImage, Vec<BoxTarget>) {
    let mut cur = (img.clone(), boxes.to_vec());
    if fires(params.elastic.p, rng) {
        cur = elastic(&cur.0, &cur.1, params.elastic.alpha, params.elastic.sigma, rng);
    }
    if fires(params.hflip_p, rng) {
        cur = hflip(&cur.0, &cur.1);
    }
    if fires(params.vflip_p, rng) {
        cur = vflip(&cur.0, &cur.1);
    }
    if fires(params.rotate.p, rng) && !params.rotate.angles.is_empty() {
        let angle = params.rotate.angles[rng.random_range(0..params.rotate.angles.len())];
        cur = rotate90(&cur.0, &cur.1, angle / 90);
    }
    if fires(params.blur.p, rng) {
        let (lo, hi) = params.blur.sigma;
        let sigma = rng.random_range(lo..=hi);
        cur.0 = gaussian_blur(&cur.0, params.blur.kernel_size, sigma);
    }
    if fires(params.hed.p, rng) {
        cur.0 = hed_augment(&cur.0, m, params.hed.alpha, params.hed.beta, rng);
    }
    if fires(params.resized_crop.p, rng) {
        let (w, h) = cur.0.dims();
        let (lo, hi) = params.resized_crop.scale;
        let area = rng.random_range(lo..=hi) * w as f64 * h as f64;
        let side = area.sqrt();
        let cw = (side.round() as u32).clamp(1, w);
        let ch = (side.round() as u32).clamp(1, h);
        let x0 = rng.random_range(0..=w - cw);
        let y0 = rng.random_range(0..=h - ch);
        cur = resized_crop(&cur.0, &cur.1, (x0, y0, cw, ch), params.resized_crop.size);
    }
    cur
}
