//! Deterministic synthetic slides: hematoxylin-stained elliptical nuclei on an
//! eosin background, with an exact annotation for every nucleus.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::raster::RasterImage;
use super::tiff::write_pyramidal_tiff;
use crate::annotation::{AnnotationRecord, AnnotationSet};
use crate::error::{Error, Result};
use crate::stain::StainMatrix;

/// Centroids are snapped to this grid so they survive 9-significant-digit
/// text output unchanged.
const CENTROID_QUANTUM: f64 = 1.0 / 16.0;
/// Minimum centroid distance as a fraction of the summed bounding radii.
const MIN_SEPARATION: f64 = 0.8;
const BACKGROUND_DENSITY: [f64; 3] = [0.03, 0.22, 0.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSlideSpec {
    pub width: u32,
    pub height: u32,
    pub mpp: f64,
    pub nucleus_count: usize,
    /// Inclusive diameter range in pixels.
    pub nucleus_diameter_range: (f64, f64),
    pub class_weights: Vec<f64>,
    pub rng_seed: u64,
    /// Placement attempts per nucleus before giving up.
    #[serde(default = "default_attempts")]
    pub max_attempts: usize,
    /// Tissue tag stamped on every annotation.
    #[serde(default)]
    pub tissue: Option<String>,
}

fn default_attempts() -> usize {
    1000
}

impl SyntheticSlideSpec {
    pub fn new(width: u32, height: u32, nucleus_count: usize, rng_seed: u64) -> Self {
        Self {
            width,
            height,
            mpp: 0.25,
            nucleus_count,
            nucleus_diameter_range: (8.0, 20.0),
            class_weights: vec![0.2; 5],
            rng_seed,
            max_attempts: default_attempts(),
            tissue: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.nucleus_diameter_range;
        if !(lo > 0.0 && hi >= lo && hi.is_finite()) {
            return Err(Error::param(format!("invalid diameter range ({lo}, {hi})")));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::param("synthetic slide must be non-empty"));
        }
        if !(self.mpp > 0.0) {
            return Err(Error::param("mpp must be positive"));
        }
        if self.class_weights.is_empty() || self.class_weights.iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::param("class weights must be non-negative"));
        }
        let total: f64 = self.class_weights.iter().sum();
        if (total - 1.0).abs() > 1e-6 {
            return Err(Error::param(format!("class weights sum to {total}, expected 1")));
        }
        if self.max_attempts == 0 {
            return Err(Error::param("max_attempts must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSlide {
    pub image: RasterImage,
    pub annotations: AnnotationSet,
}

struct Nucleus {
    cx: f64,
    cy: f64,
    /// Semi-axes and rotation.
    a: f64,
    b: f64,
    theta: f64,
    class_id: u32,
}

impl Nucleus {
    fn half_extents(&self) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (
            ((self.a * c).powi(2) + (self.b * s).powi(2)).sqrt(),
            ((self.a * s).powi(2) + (self.b * c).powi(2)).sqrt(),
        )
    }
}

impl SyntheticSlide {
    pub fn generate(spec: &SyntheticSlideSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let (w, h) = (spec.width as f64, spec.height as f64);
        let (dmin, dmax) = spec.nucleus_diameter_range;
        let cell = dmax.max(1.0);
        let cols = (w / cell) as usize + 1;
        let rows = (h / cell) as usize + 1;
        let mut grid: Vec<Vec<u32>> = vec![Vec::new(); cols * rows];
        let mut nuclei: Vec<Nucleus> = Vec::with_capacity(spec.nucleus_count);

        for index in 0..spec.nucleus_count {
            let mut placed = false;
            for _ in 0..spec.max_attempts {
                let class_id = sample_class(&spec.class_weights, &mut rng);
                let dx = rng.random_range(dmin..=dmax);
                let dy = rng.random_range(dmin..=dmax);
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let mut n = Nucleus {
                    cx: 0.0,
                    cy: 0.0,
                    a: dx / 2.0,
                    b: dy / 2.0,
                    theta,
                    class_id,
                };
                let (hx, hy) = n.half_extents();
                let (lo_x, hi_x) = (quantize_up(hx), quantize_down(w - hx));
                let (lo_y, hi_y) = (quantize_up(hy), quantize_down(h - hy));
                if lo_x > hi_x || lo_y > hi_y {
                    continue;
                }
                n.cx = quantize_down(rng.random_range(lo_x..=hi_x)).max(lo_x);
                n.cy = quantize_down(rng.random_range(lo_y..=hi_y)).max(lo_y);
                let radius = n.a.max(n.b);
                let gc = ((n.cx / cell) as usize).min(cols - 1);
                let gr = ((n.cy / cell) as usize).min(rows - 1);
                let clash = (gr.saturating_sub(2)..=(gr + 2).min(rows - 1)).any(|r| {
                    (gc.saturating_sub(2)..=(gc + 2).min(cols - 1)).any(|c| {
                        grid[r * cols + c].iter().any(|&j| {
                            let o = &nuclei[j as usize];
                            let d = ((o.cx - n.cx).powi(2) + (o.cy - n.cy).powi(2)).sqrt();
                            d < MIN_SEPARATION * (radius + o.a.max(o.b))
                        })
                    })
                });
                if clash {
                    continue;
                }
                grid[gr * cols + gc].push(nuclei.len() as u32);
                nuclei.push(n);
                placed = true;
                break;
            }
            if !placed {
                return Err(Error::TooDense {
                    index,
                    attempts: spec.max_attempts,
                });
            }
        }

        let stains = StainMatrix::ruifrok_johnson();
        let background = stains.densities_to_rgb(BACKGROUND_DENSITY);
        let palette: Vec<[u8; 3]> = (0..spec.class_weights.len())
            .map(|c| stains.densities_to_rgb([0.55 + 0.12 * (c % 5) as f64, 0.12, 0.0]))
            .collect();
        let mut image = RasterImage::filled(spec.width, spec.height, background);
        let mut records = Vec::with_capacity(nuclei.len());
        for n in &nuclei {
            paint_ellipse(&mut image, n, palette[n.class_id as usize]);
            let (hx, hy) = n.half_extents();
            records.push(AnnotationRecord {
                cx: n.cx,
                cy: n.cy,
                w: 2.0 * quantize_up(hx),
                h: 2.0 * quantize_up(hy),
                class_id: n.class_id,
                tissue: spec.tissue.clone(),
            });
        }
        Ok(Self {
            image,
            annotations: AnnotationSet::new(records, Some(spec.mpp)),
        })
    }

    /// Writes the slide (PNG, or a x1/x4/x16 pyramid for `.tif`/`.tiff`) and
    /// the annotation JSONL.
    pub fn write(&self, slide_path: impl AsRef<Path>, annotation_path: impl AsRef<Path>, mpp: f64) -> Result<()> {
        let slide_path = slide_path.as_ref();
        let ext = slide_path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase());
        match ext.as_deref() {
            Some("tif") | Some("tiff") => {
                let longest = self.image.width().max(self.image.height());
                let downsamples: Vec<u32> = [1, 4, 16].into_iter().filter(|&d| d == 1 || longest / d >= 16).collect();
                write_pyramidal_tiff(slide_path, &self.image, mpp, &downsamples)?
            }
            Some("png") => self.image.write_png(slide_path)?,
            _ => {
                return Err(Error::UnsupportedFormat(format!(
                    "synthetic slide output must be .png or .tif, got {}",
                    slide_path.display()
                )))
            }
        }
        self.annotations.write_jsonl(annotation_path)
    }
}

fn quantize_down(v: f64) -> f64 {
    (v / CENTROID_QUANTUM).floor() * CENTROID_QUANTUM
}

fn quantize_up(v: f64) -> f64 {
    (v / CENTROID_QUANTUM).ceil() * CENTROID_QUANTUM
}

fn sample_class(weights: &[f64], rng: &mut impl Rng) -> u32 {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i as u32;
        }
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0) as u32
}

fn paint_ellipse(img: &mut RasterImage, n: &Nucleus, rgb: [u8; 3]) {
    let (hx, hy) = n.half_extents();
    let (s, c) = n.theta.sin_cos();
    let x0 = (n.cx - hx).floor().max(0.0) as u32;
    let y0 = (n.cy - hy).floor().max(0.0) as u32;
    let x1 = ((n.cx + hx).ceil() as u32).min(img.width());
    let y1 = ((n.cy + hy).ceil() as u32).min(img.height());
    for y in y0..y1 {
        for x in x0..x1 {
            let dx = x as f64 + 0.5 - n.cx;
            let dy = y as f64 + 0.5 - n.cy;
            let u = dx * c + dy * s;
            let v = -dx * s + dy * c;
            if (u / n.a).powi(2) + (v / n.b).powi(2) <= 1.0 {
                img.put(x, y, rgb);
            }
        }
    }
}
