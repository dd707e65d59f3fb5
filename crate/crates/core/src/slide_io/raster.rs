use std::path::Path;

use crate::error::{Error, Result};
use crate::par;

pub const WHITE: [u8; 3] = [255, 255, 255];

/// Row-major 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RasterImage {
    width: u32,
    height: u32,
    pixels: Vec<u8>,
}

impl RasterImage {
    pub fn from_raw(width: u32, height: u32, pixels: Vec<u8>) -> Result<Self> {
        let expected = width as usize * height as usize * 3;
        if pixels.len() != expected {
            return Err(Error::param(format!(
                "pixel buffer has {} bytes, expected {expected} for {width}x{height} RGB",
                pixels.len()
            )));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn filled(width: u32, height: u32, rgb: [u8; 3]) -> Self {
        let n = width as usize * height as usize;
        let mut pixels = Vec::with_capacity(n * 3);
        for _ in 0..n {
            pixels.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            pixels,
        }
    }

    pub fn white(width: u32, height: u32) -> Self {
        Self::filled(width, height, WHITE)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<u8> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> [u8; 3] {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    #[inline]
    pub fn put(&mut self, x: u32, y: u32, rgb: [u8; 3]) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copies the `w x h` rectangle at `(x, y)`; pixels outside the image are white.
    pub fn crop(&self, x: i64, y: i64, w: u32, h: u32) -> RasterImage {
        let mut out = RasterImage::white(w, h);
        blit(self, x, y, &mut out, 0, 0);
        out
    }

    /// Area-averaging resample to `(w, h)`. Each output pixel is the coverage
    /// weighted mean of the source pixels under its footprint.
    pub fn resize_area(&self, w: u32, h: u32) -> RasterImage {
        if (w, h) == self.dims() {
            return self.clone();
        }
        if w == 0 || h == 0 || self.width == 0 || self.height == 0 {
            return RasterImage::white(w, h);
        }
        let xw = axis_weights(self.width, w);
        let yw = axis_weights(self.height, h);
        let src_w = self.width as usize;
        // horizontal pass into f32 rows
        let mut tmp = vec![0f32; self.height as usize * w as usize * 3];
        par::for_each_row(&mut tmp, w as usize * 3, |y, row| {
            let src = &self.pixels[y * src_w * 3..(y + 1) * src_w * 3];
            for (x, taps) in xw.iter().enumerate() {
                let mut acc = [0f32; 3];
                for &(sx, wt) in taps {
                    for c in 0..3 {
                        acc[c] += wt * src[sx * 3 + c] as f32;
                    }
                }
                row[x * 3..x * 3 + 3].copy_from_slice(&acc);
            }
        });
        let mut out = vec![0u8; w as usize * h as usize * 3];
        let row_len = w as usize * 3;
        par::for_each_row(&mut out, row_len, |y, row| {
            for (x, px) in row.chunks_mut(3).enumerate() {
                let mut acc = [0f32; 3];
                for &(sy, wt) in &yw[y] {
                    let base = sy * row_len + x * 3;
                    for c in 0..3 {
                        acc[c] += wt * tmp[base + c];
                    }
                }
                for c in 0..3 {
                    px[c] = acc[c].round().clamp(0.0, 255.0) as u8;
                }
            }
        });
        RasterImage {
            width: w,
            height: h,
            pixels: out,
        }
    }

    pub fn read_png(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let img = image::ImageReader::open(path)
            .map_err(|e| Error::io(path, e))?
            .with_guessed_format()
            .map_err(|e| Error::io(path, e))?
            .decode()?
            .into_rgb8();
        let (w, h) = img.dimensions();
        Self::from_raw(w, h, img.into_raw())
    }

    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        image::save_buffer_with_format(
            path,
            &self.pixels,
            self.width,
            self.height,
            image::ExtendedColorType::Rgb8,
            image::ImageFormat::Png,
        )?;
        Ok(())
    }
}

/// Copies `src` into `dst` so that `src` pixel `(sx0, sy0)` lands on `(dx0, dy0)`.
/// Only the overlapping part is written.
pub(crate) fn blit(src: &RasterImage, sx0: i64, sy0: i64, dst: &mut RasterImage, dx0: i64, dy0: i64) {
    let x_start = sx0.max(0).max(sx0 - dx0);
    let y_start = sy0.max(0).max(sy0 - dy0);
    let x_end = (src.width as i64).min(sx0 - dx0 + dst.width as i64);
    let y_end = (src.height as i64).min(sy0 - dy0 + dst.height as i64);
    if x_end <= x_start || y_end <= y_start {
        return;
    }
    let n = (x_end - x_start) as usize * 3;
    for sy in y_start..y_end {
        let dy = sy - sy0 + dy0;
        let dx = x_start - sx0 + dx0;
        let s = (sy as usize * src.width as usize + x_start as usize) * 3;
        let d = (dy as usize * dst.width as usize + dx as usize) * 3;
        dst.pixels[d..d + n].copy_from_slice(&src.pixels[s..s + n]);
    }
}

/// Per output index, the `(source index, weight)` taps of an area resample.
fn axis_weights(src: u32, dst: u32) -> Vec<Vec<(usize, f32)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|i| {
            let lo = i as f64 * scale;
            let hi = ((i + 1) as f64 * scale).min(src as f64);
            let mut taps = Vec::new();
            let mut s = lo.floor() as usize;
            while (s as f64) < hi && s < src as usize {
                let cover = (hi.min(s as f64 + 1.0) - lo.max(s as f64)).max(0.0);
                if cover > 0.0 {
                    taps.push((s, (cover / (hi - lo)) as f32));
                }
                s += 1;
            }
            taps
        })
        .collect()
}
