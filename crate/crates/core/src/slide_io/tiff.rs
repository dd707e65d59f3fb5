//! Strip- or tile-organized pyramidal TIFF, one IFD per resolution level.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use tiff::decoder::{ChunkType, Decoder, DecodingResult};
use tiff::encoder::{colortype, Rational, TiffEncoder};
use tiff::tags::{ResolutionUnit, Tag};
use tiff::ColorType;

use super::raster::RasterImage;
use super::Level;
use crate::error::{Error, Result};

pub(crate) struct TiffPyramid {
    path: PathBuf,
    decoder: Decoder<BufReader<File>>,
    /// IFD index backing each level.
    ifds: Vec<usize>,
}

pub(crate) struct TiffMetadata {
    pub levels: Vec<Level>,
    pub mpp: Option<f64>,
}

impl TiffPyramid {
    pub fn open(path: &Path) -> Result<(Self, TiffMetadata)> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut decoder = Decoder::new(BufReader::new(file))?;
        let (w0, h0) = decoder.dimensions()?;
        let mpp = read_mpp(&mut decoder);
        check_color(&mut decoder)?;
        let mut levels = vec![Level {
            downsample: 1.0,
            width: w0,
            height: h0,
        }];
        let mut ifds = vec![0];
        let mut ifd = 0;
        while decoder.more_images() {
            decoder.next_image()?;
            ifd += 1;
            let (w, h) = decoder.dimensions()?;
            let prev = levels.last().map(|l| l.downsample).unwrap_or(1.0);
            match integer_downsample(w0, h0, w, h) {
                Some(ds) if ds as f64 > prev && check_color(&mut decoder).is_ok() => {
                    levels.push(Level {
                        downsample: ds as f64,
                        width: w,
                        height: h,
                    });
                    ifds.push(ifd);
                }
                _ => log::debug!("{}: skipping IFD {ifd} ({w}x{h}), not a pyramid level", path.display()),
            }
        }
        Ok((
            Self {
                path: path.to_path_buf(),
                decoder,
                ifds,
            },
            TiffMetadata { levels, mpp },
        ))
    }

    pub fn reopen(&self) -> Result<Self> {
        let file = File::open(&self.path).map_err(|e| Error::io(&self.path, e))?;
        Ok(Self {
            path: self.path.clone(),
            decoder: Decoder::new(BufReader::new(file))?,
            ifds: self.ifds.clone(),
        })
    }

    /// Reads `[x, x+w) x [y, y+h)` of `level` (level pixels) into `out`.
    pub fn read_into(&mut self, level: usize, level_dims: (u32, u32), x: i64, y: i64, out: &mut RasterImage) -> Result<()> {
        self.decoder.seek_to_image(self.ifds[level])?;
        let samples = samples_per_pixel(self.decoder.colortype()?)?;
        let (lw, lh) = level_dims;
        let (cw, ch) = self.decoder.chunk_dimensions();
        let across = match self.decoder.get_chunk_type() {
            ChunkType::Strip => 1,
            ChunkType::Tile => lw.div_ceil(cw),
        };
        let (w, h) = out.dims();
        let x0 = x.max(0);
        let y0 = y.max(0);
        let x1 = (x + w as i64).min(lw as i64);
        let y1 = (y + h as i64).min(lh as i64);
        if x1 <= x0 || y1 <= y0 {
            return Ok(());
        }
        let (col0, col1) = (x0 as u32 / cw, (x1 as u32 - 1) / cw);
        let (row0, row1) = (y0 as u32 / ch, (y1 as u32 - 1) / ch);
        for row in row0..=row1 {
            for col in col0..=col1 {
                let idx = row * across + col;
                let (dw, dh) = self.decoder.chunk_data_dimensions(idx);
                let data = match self.decoder.read_chunk(idx)? {
                    DecodingResult::U8(v) => v,
                    _ => return Err(Error::UnsupportedFormat("non 8-bit TIFF samples".into())),
                };
                let ox = (col * cw) as i64;
                let oy = (row * ch) as i64;
                let ys = oy.max(y0);
                let ye = (oy + dh as i64).min(y1);
                let xs = ox.max(x0);
                let xe = (ox + dw as i64).min(x1);
                for yy in ys..ye {
                    for xx in xs..xe {
                        let s = (((yy - oy) as usize) * dw as usize + (xx - ox) as usize) * samples;
                        let rgb = if samples == 1 {
                            [data[s]; 3]
                        } else {
                            [data[s], data[s + 1], data[s + 2]]
                        };
                        out.put((xx - x) as u32, (yy - y) as u32, rgb);
                    }
                }
            }
        }
        Ok(())
    }
}

fn samples_per_pixel(ct: ColorType) -> Result<usize> {
    match ct {
        ColorType::RGB(8) => Ok(3),
        ColorType::RGBA(8) => Ok(4),
        ColorType::Gray(8) => Ok(1),
        other => Err(Error::UnsupportedFormat(format!("TIFF color type {other:?}"))),
    }
}

fn check_color(decoder: &mut Decoder<BufReader<File>>) -> Result<()> {
    samples_per_pixel(decoder.colortype()?).map(|_| ())
}

fn integer_downsample(w0: u32, h0: u32, w: u32, h: u32) -> Option<u32> {
    if w == 0 || h == 0 {
        return None;
    }
    let ds = ((w0 as f64 / w as f64).round() as u32).max(1);
    (w0.div_ceil(ds) == w && h0.div_ceil(ds) == h).then_some(ds)
}

/// Microns per pixel from an `MPP = x` description token (Aperio style) or,
/// failing that, from a centimeter/inch resolution tag.
fn read_mpp(decoder: &mut Decoder<BufReader<File>>) -> Option<f64> {
    if let Ok(Some(desc)) = decoder.find_tag(Tag::ImageDescription) {
        if let Some(mpp) = desc.into_string().ok().and_then(|d| parse_mpp(&d)) {
            return Some(mpp);
        }
    }
    let xres = match decoder.find_tag(Tag::XResolution).ok().flatten()? {
        tiff::decoder::ifd::Value::Rational(n, d) if d > 0 => n as f64 / d as f64,
        _ => return None,
    };
    let unit = decoder
        .find_tag_unsigned::<u16>(Tag::ResolutionUnit)
        .ok()
        .flatten()
        .unwrap_or(2);
    let um_per_unit = match unit {
        3 => 1.0e4,
        2 => 2.54e4,
        _ => return None,
    };
    (xres > 0.0).then(|| um_per_unit / xres)
}

pub(crate) fn parse_mpp(desc: &str) -> Option<f64> {
    let upper = desc.to_ascii_uppercase();
    let at = upper.find("MPP")?;
    let rest = desc[at + 3..].trim_start();
    let rest = rest.strip_prefix('=')?.trim_start();
    let end = rest
        .find(|c: char| !(c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || c == '-' || c == '+'))
        .unwrap_or(rest.len());
    rest[..end].parse::<f64>().ok().filter(|v| *v > 0.0)
}

/// Writes `img` as a strip TIFF pyramid with the given integer downsamples
/// (first must be 1). Reduced levels are area-averaged from level 0.
pub fn write_pyramidal_tiff(path: impl AsRef<Path>, img: &RasterImage, mpp: f64, downsamples: &[u32]) -> Result<()> {
    let path = path.as_ref();
    if downsamples.first() != Some(&1) || downsamples.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("pyramid downsamples must start at 1 and strictly increase"));
    }
    if !(mpp > 0.0) {
        return Err(Error::param("mpp must be positive"));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = TiffEncoder::new(BufWriter::new(file))?;
    let description = format!("celltile synthetic pyramid|MPP = {mpp}");
    let px_per_cm = 1.0e4 / mpp;
    for &ds in downsamples {
        let (w, h) = (img.width().div_ceil(ds), img.height().div_ceil(ds));
        let level = img.resize_area(w, h);
        let mut image = enc.new_image::<colortype::RGB8>(w, h)?;
        image.resolution(
            ResolutionUnit::Centimeter,
            Rational {
                n: (px_per_cm / ds as f64 * 1000.0).round() as u32,
                d: 1000,
            },
        );
        if ds > 1 {
            image.encoder().write_tag(Tag::NewSubfileType, 1u32)?;
        }
        image.encoder().write_tag(Tag::ImageDescription, description.as_str())?;
        image.write_data(level.pixels())?;
    }
    Ok(())
}
