//! Uniform access to pyramidal TIFF and plain PNG slides.

mod raster;
pub mod synth;
mod tiff;

use std::fs::File;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub use self::raster::{RasterImage, WHITE};
pub use self::synth::{SyntheticSlide, SyntheticSlideSpec};
pub use self::tiff::write_pyramidal_tiff;
use self::tiff::TiffPyramid;
use crate::error::{Error, Result};

/// One resolution level of a slide.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Level {
    pub downsample: f64,
    pub width: u32,
    pub height: u32,
}

enum SlideData {
    Raster(Arc<RasterImage>),
    Tiff(TiffPyramid),
}

/// An open slide. Reads through one handle are serialized (`&mut self`);
/// use [`SlideSource::try_clone`] to give each worker its own handle.
pub struct SlideSource {
    width_l0: u32,
    height_l0: u32,
    mpp: f64,
    levels: Vec<Level>,
    path: Option<PathBuf>,
    data: SlideData,
}

impl std::fmt::Debug for SlideSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SlideSource")
            .field("width_l0", &self.width_l0)
            .field("height_l0", &self.height_l0)
            .field("mpp", &self.mpp)
            .field("levels", &self.levels)
            .field("path", &self.path)
            .finish()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Png,
    Tiff,
}

fn sniff(path: &Path) -> Result<Format> {
    let mut head = [0u8; 8];
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let n = file.read(&mut head).map_err(|e| Error::io(path, e))?;
    let head = &head[..n];
    if head.starts_with(b"\x89PNG\r\n\x1a\n") {
        Ok(Format::Png)
    } else if head.starts_with(b"II*\0") || head.starts_with(b"MM\0*") || head.starts_with(b"II+\0") || head.starts_with(b"MM\0+") {
        Ok(Format::Tiff)
    } else {
        Err(Error::UnsupportedFormat(format!(
            "{} is neither a TIFF nor a PNG file",
            path.display()
        )))
    }
}

impl SlideSource {
    /// Opens a pyramidal TIFF or a PNG. `mpp_override` takes precedence over
    /// file metadata; PNG has no usable metadata and requires it.
    pub fn open(path: impl AsRef<Path>, mpp_override: Option<f64>) -> Result<Self> {
        let path = path.as_ref();
        if let Some(m) = mpp_override {
            if !(m > 0.0 && m.is_finite()) {
                return Err(Error::param(format!("mpp override must be positive, got {m}")));
            }
        }
        let slide = match sniff(path)? {
            Format::Png => {
                let mpp = mpp_override.ok_or_else(|| Error::MissingMpp(path.to_path_buf()))?;
                let img = RasterImage::read_png(path)?;
                let mut s = Self::from_raster(img, mpp)?;
                s.path = Some(path.to_path_buf());
                s
            }
            Format::Tiff => {
                let (pyramid, meta) = TiffPyramid::open(path)?;
                let mpp = mpp_override
                    .or(meta.mpp)
                    .ok_or_else(|| Error::MissingMpp(path.to_path_buf()))?;
                let l0 = meta.levels[0];
                Self {
                    width_l0: l0.width,
                    height_l0: l0.height,
                    mpp,
                    levels: meta.levels,
                    path: Some(path.to_path_buf()),
                    data: SlideData::Tiff(pyramid),
                }
            }
        };
        slide.validate()?;
        Ok(slide)
    }

    /// Wraps an in-memory raster as a single-level slide.
    pub fn from_raster(img: RasterImage, mpp: f64) -> Result<Self> {
        let (w, h) = img.dims();
        let slide = Self {
            width_l0: w,
            height_l0: h,
            mpp,
            levels: vec![Level {
                downsample: 1.0,
                width: w,
                height: h,
            }],
            path: None,
            data: SlideData::Raster(Arc::new(img)),
        };
        slide.validate()?;
        Ok(slide)
    }

    fn validate(&self) -> Result<()> {
        if !(self.mpp > 0.0 && self.mpp.is_finite()) {
            return Err(Error::InvalidPyramid(format!("mpp must be positive, got {}", self.mpp)));
        }
        if self.width_l0 == 0 || self.height_l0 == 0 {
            return Err(Error::InvalidPyramid("zero-sized level 0".into()));
        }
        if self.levels.first().map(|l| l.downsample) != Some(1.0) {
            return Err(Error::InvalidPyramid("first level must have downsample 1".into()));
        }
        for pair in self.levels.windows(2) {
            if pair[1].downsample <= pair[0].downsample {
                return Err(Error::InvalidPyramid("downsamples must strictly increase".into()));
            }
        }
        for l in &self.levels {
            let ds = l.downsample;
            let ew = (self.width_l0 as f64 / ds).ceil() as u32;
            let eh = (self.height_l0 as f64 / ds).ceil() as u32;
            if (l.width, l.height) != (ew, eh) {
                return Err(Error::InvalidPyramid(format!(
                    "level x{ds} is {}x{}, expected {ew}x{eh}",
                    l.width, l.height
                )));
            }
        }
        Ok(())
    }

    /// A second, independent handle onto the same slide.
    pub fn try_clone(&self) -> Result<Self> {
        let data = match &self.data {
            SlideData::Raster(img) => SlideData::Raster(Arc::clone(img)),
            SlideData::Tiff(t) => SlideData::Tiff(t.reopen()?),
        };
        Ok(Self {
            width_l0: self.width_l0,
            height_l0: self.height_l0,
            mpp: self.mpp,
            levels: self.levels.clone(),
            path: self.path.clone(),
            data,
        })
    }

    pub fn width(&self) -> u32 {
        self.width_l0
    }

    pub fn height(&self) -> u32 {
        self.height_l0
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width_l0, self.height_l0)
    }

    pub fn mpp(&self) -> f64 {
        self.mpp
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// Slide area in square millimeters.
    pub fn area_mm2(&self) -> f64 {
        self.width_l0 as f64 * self.height_l0 as f64 * self.mpp * self.mpp / 1.0e6
    }

    /// Reads a `size` region (in pixels of `level`) whose top-left corner is
    /// `origin_l0` in level-0 coordinates. Pixels outside the slide are white.
    pub fn read_region(&mut self, origin_l0: (i64, i64), size: (u32, u32), level: usize) -> Result<RasterImage> {
        let lv = *self.levels.get(level).ok_or(Error::InvalidLevel {
            index: level,
            levels: self.levels.len(),
        })?;
        if size.0 == 0 || size.1 == 0 {
            return Err(Error::EmptyRegion);
        }
        let x = (origin_l0.0 as f64 / lv.downsample).floor() as i64;
        let y = (origin_l0.1 as f64 / lv.downsample).floor() as i64;
        match &mut self.data {
            SlideData::Raster(img) => Ok(img.crop(x, y, size.0, size.1)),
            SlideData::Tiff(t) => {
                let mut out = RasterImage::white(size.0, size.1);
                t.read_into(level, (lv.width, lv.height), x, y, &mut out)?;
                Ok(out)
            }
        }
    }

    /// Whole-level read.
    pub fn read_level(&mut self, level: usize) -> Result<RasterImage> {
        let lv = *self.levels.get(level).ok_or(Error::InvalidLevel {
            index: level,
            levels: self.levels.len(),
        })?;
        self.read_region((0, 0), (lv.width, lv.height), level)
    }

    /// Index of the coarsest level whose downsample does not exceed `factor`.
    pub fn best_level_for(&self, factor: f64) -> usize {
        self.levels
            .iter()
            .rposition(|l| l.downsample <= factor + 1e-9)
            .unwrap_or(0)
    }

    /// Thumbnail whose longest side is at most `max_dim`, plus the number of
    /// level-0 pixels per thumbnail pixel along x.
    pub fn thumbnail(&mut self, max_dim: u32) -> Result<(RasterImage, f64)> {
        if max_dim < 16 {
            return Err(Error::param(format!("thumbnail max_dim must be >= 16, got {max_dim}")));
        }
        let (w0, h0) = self.dims();
        let longest = w0.max(h0);
        let (tw, th) = if longest <= max_dim {
            (w0, h0)
        } else {
            let s = longest as f64 / max_dim as f64;
            (
                ((w0 as f64 / s).round() as u32).clamp(1, max_dim),
                ((h0 as f64 / s).round() as u32).clamp(1, max_dim),
            )
        };
        let level = self.best_level_for(w0 as f64 / tw as f64);
        let img = self.read_level(level)?.resize_area(tw, th);
        Ok((img, w0 as f64 / tw as f64))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> RasterImage {
        let mut px = Vec::with_capacity((w * h * 3) as usize);
        for y in 0..h {
            for x in 0..w {
                let v = if (x / 8 + y / 8) % 2 == 0 { 40 } else { 220 };
                px.extend_from_slice(&[v, (x % 251) as u8, (y % 241) as u8]);
            }
        }
        RasterImage::from_raw(w, h, px).unwrap()
    }

    #[test]
    fn png_needs_explicit_mpp() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.png");
        RasterImage::white(64, 32).write_png(&p).unwrap();
        assert!(matches!(SlideSource::open(&p, None), Err(Error::MissingMpp(_))));
        let s = SlideSource::open(&p, Some(0.25)).unwrap();
        assert_eq!(s.dims(), (64, 32));
        assert_eq!(s.levels().len(), 1);
        assert_eq!(s.mpp(), 0.25);
    }

    #[test]
    fn single_level_png_2048() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("big.png");
        RasterImage::white(2048, 2048).write_png(&p).unwrap();
        let s = SlideSource::open(&p, Some(0.25)).unwrap();
        assert_eq!(
            s.levels(),
            &[Level {
                downsample: 1.0,
                width: 2048,
                height: 2048
            }]
        );
    }

    #[test]
    fn text_file_is_unsupported() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("notes.txt");
        std::fs::write(&p, "hello slide").unwrap();
        match SlideSource::open(&p, Some(0.25)) {
            Err(Error::UnsupportedFormat(msg)) => assert!(msg.contains("neither")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn tiff_pyramid_metadata_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("pyr.tif");
        let img = checker(300, 200);
        write_pyramidal_tiff(&p, &img, 0.25, &[1, 4, 16]).unwrap();
        let mut s = SlideSource::open(&p, None).unwrap();
        assert!((s.mpp() - 0.25).abs() < 1e-12);
        let dims: Vec<_> = s.levels().iter().map(|l| (l.downsample, l.width, l.height)).collect();
        assert_eq!(dims, vec![(1.0, 300, 200), (4.0, 75, 50), (16.0, 19, 13)]);
        // level-0 pixels survive the strip encoding untouched
        let region = s.read_region((37, 51), (100, 90), 0).unwrap();
        assert_eq!(region, img.crop(37, 51, 100, 90));
        // override beats metadata
        assert_eq!(SlideSource::open(&p, Some(0.5)).unwrap().mpp(), 0.5);
    }

    #[test]
    fn region_reads() {
        let img = checker(256, 256);
        let mut s = SlideSource::from_raster(img.clone(), 0.25).unwrap();
        assert_eq!(s.read_region((0, 0), (256, 256), 0).unwrap(), img);
        assert_eq!(s.read_region((500, 500), (16, 16), 0).unwrap(), RasterImage::white(16, 16));
        assert!(matches!(s.read_region((0, 0), (0, 0), 0), Err(Error::EmptyRegion)));
        assert!(matches!(s.read_region((0, 0), (4, 4), 3), Err(Error::InvalidLevel { .. })));
    }

    #[test]
    fn thumbnail_geometry() {
        let mut s = SlideSource::from_raster(RasterImage::white(2048, 1024), 0.25).unwrap();
        let (t, scale) = s.thumbnail(512).unwrap();
        assert_eq!(t.dims(), (512, 256));
        assert_eq!(scale, 4.0);
        let mut small = SlideSource::from_raster(RasterImage::white(100, 60), 0.25).unwrap();
        let (t, scale) = small.thumbnail(512).unwrap();
        assert_eq!((t.dims(), scale), ((100, 60), 1.0));
        assert!(small.thumbnail(8).is_err());
    }

    #[test]
    fn area_in_square_millimeters() {
        let s = SlideSource::from_raster(RasterImage::white(4000, 2000), 0.25).unwrap();
        assert!((s.area_mm2() - 0.5).abs() < 1e-12);
        // 300 mm2 at 0.25 um/px is ~69282 px on a side
        let side = (300.0e6f64).sqrt() / 0.25;
        assert!((side * side * 0.25 * 0.25 / 1e6 - 300.0).abs() < 1e-6);
    }
}
