use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stain::TissueMask;

/// Origins along one axis: steps of `size - overlap`, the last one clamped to
/// `dim - size` when it would overrun. When `size >= dim` there is a single
/// origin at 0.
pub fn axis_origins(dim: u32, size: u32, overlap: u32) -> Result<Vec<u32>> {
    check_sizes(size, overlap)?;
    if size >= dim {
        return Ok(vec![0]);
    }
    let stride = size - overlap;
    let mut out = vec![0u32];
    loop {
        let last = *out.last().unwrap();
        if last + size >= dim {
            break;
        }
        let next = (last + stride).min(dim - size);
        if next <= last {
            break;
        }
        out.push(next);
    }
    Ok(out)
}

fn check_sizes(size: u32, overlap: u32) -> Result<()> {
    if size == 0 {
        return Err(Error::param("region size must be positive"));
    }
    if overlap >= size {
        return Err(Error::param(format!("overlap {overlap} must be smaller than size {size}")));
    }
    if !overlap.is_multiple_of(2) {
        return Err(Error::param(format!("overlap {overlap} must be even")));
    }
    Ok(())
}

/// Origins along one axis together with the extent they cover.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridAxis {
    pub origins: Vec<u32>,
    pub size: u32,
    pub dim: u32,
}

impl GridAxis {
    pub fn new(dim: u32, size: u32, overlap: u32) -> Result<Self> {
        Ok(Self {
            origins: axis_origins(dim, size, overlap)?,
            size,
            dim,
        })
    }

    /// Half-open keep interval of the region at `index`, relative to the
    /// axis frame. Internal boundaries sit at the midpoint of each overlap.
    pub fn keep_interval(&self, index: usize) -> (f64, f64) {
        let o = self.origins[index] as f64;
        let lo = if index == 0 {
            o
        } else {
            (o + self.origins[index - 1] as f64 + self.size as f64) / 2.0
        };
        let hi = if index + 1 == self.origins.len() {
            o + self.size as f64
        } else {
            (self.origins[index + 1] as f64 + o + self.size as f64) / 2.0
        };
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TileGrid {
    pub tile_size: u32,
    pub overlap: u32,
    pub slide_width: u32,
    pub slide_height: u32,
    pub min_tissue_fraction: f64,
    /// Level-0 top-left corners, sorted by `(y, x)`.
    pub origins: Vec<(u32, u32)>,
    /// Origins of the full, unfiltered grid along each axis.
    pub x_axis: Vec<u32>,
    pub y_axis: Vec<u32>,
}

impl TileGrid {
    pub fn axes(&self) -> (GridAxis, GridAxis) {
        (
            GridAxis {
                origins: self.x_axis.clone(),
                size: self.tile_size,
                dim: self.slide_width,
            },
            GridAxis {
                origins: self.y_axis.clone(),
                size: self.tile_size,
                dim: self.slide_height,
            },
        )
    }

    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Lays tiles over the slide and drops those whose tissue fraction under
/// the mask is below `min_tissue_fraction`.
pub fn enumerate_tiles(mask: &TissueMask, slide_dims: (u32, u32), tile_size: u32, overlap: u32, min_tissue_fraction: f64) -> Result<TileGrid> {
    if !(0.0..=1.0).contains(&min_tissue_fraction) {
        return Err(Error::param("min_tissue_fraction must lie in [0, 1]"));
    }
    let xs = axis_origins(slide_dims.0, tile_size, overlap)?;
    let ys = axis_origins(slide_dims.1, tile_size, overlap)?;
    let mut origins = Vec::with_capacity(xs.len() * ys.len());
    for &y in &ys {
        for &x in &xs {
            let keep = min_tissue_fraction <= 0.0 || {
                let x1 = (x + tile_size).min(slide_dims.0);
                let y1 = (y + tile_size).min(slide_dims.1);
                mask.fraction_in(x as f64, y as f64, x1 as f64, y1 as f64) >= min_tissue_fraction
            };
            if keep {
                origins.push((x, y));
            }
        }
    }
    Ok(TileGrid {
        tile_size,
        overlap,
        slide_width: slide_dims.0,
        slide_height: slide_dims.1,
        min_tissue_fraction,
        origins,
        x_axis: xs,
        y_axis: ys,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WindowGrid {
    pub window_size: u32,
    pub overlap: u32,
    pub tile_size: u32,
    /// Tile-local top-left corners, sorted by `(y, x)`.
    pub origins: Vec<(u32, u32)>,
    pub axis: Vec<u32>,
}

impl WindowGrid {
    pub fn axis(&self) -> GridAxis {
        GridAxis {
            origins: self.axis.clone(),
            size: self.window_size,
            dim: self.tile_size,
        }
    }
}

pub fn partition_windows(tile_size: u32, window_size: u32, overlap: u32) -> Result<WindowGrid> {
    if window_size > tile_size {
        return Err(Error::param(format!("window {window_size} larger than tile {tile_size}")));
    }
    let axis = axis_origins(tile_size, window_size, overlap)?;
    let origins = axis.iter().flat_map(|&y| axis.iter().map(move |&x| (x, y))).collect();
    Ok(WindowGrid {
        window_size,
        overlap,
        tile_size,
        origins,
        axis,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn full_mask(w: u32, h: u32) -> TissueMask {
        TissueMask::full(w, h, 1.0)
    }

    #[test]
    fn exact_fit_grid() {
        let g = enumerate_tiles(&full_mask(1984, 1984), (1984, 1984), 1024, 64, 0.05).unwrap();
        assert_eq!(g.origins, vec![(0, 0), (960, 0), (0, 960), (960, 960)]);
    }

    #[test]
    fn last_tile_is_clamped() {
        assert_eq!(axis_origins(2048, 1024, 64).unwrap(), vec![0, 960, 1024]);
        assert_eq!(axis_origins(1024, 1024, 64).unwrap(), vec![0]);
        assert_eq!(axis_origins(500, 1024, 64).unwrap(), vec![0]);
    }

    #[test]
    fn window_partition() {
        let g = partition_windows(1024, 256, 64).unwrap();
        assert_eq!(g.axis, vec![0, 192, 384, 576, 768]);
        assert_eq!(g.origins.len(), 25);
        assert_eq!(partition_windows(256, 256, 64).unwrap().origins, vec![(0, 0)]);
        assert!(partition_windows(1024, 256, 256).is_err());
        assert!(partition_windows(256, 512, 64).is_err());
        assert!(partition_windows(1024, 256, 63).is_err());
    }

    #[test]
    fn tissue_filter_drops_background_tiles() {
        let mut mask = TissueMask::full(20, 20, 100.0);
        // left half background
        for y in 0..20 {
            for x in 0..10 {
                mask.data[y * 20 + x] = false;
            }
        }
        let g = enumerate_tiles(&mask, (2000, 2000), 512, 64, 0.05).unwrap();
        assert!(g.origins.iter().all(|&(x, _)| x + 512 > 1000));
        let empty = TissueMask {
            data: vec![false; 400],
            ..mask
        };
        assert!(enumerate_tiles(&empty, (2000, 2000), 512, 64, 0.05).unwrap().is_empty());
        assert_eq!(enumerate_tiles(&empty, (2000, 2000), 512, 64, 0.0).unwrap().len(), 25);
    }

    #[test]
    fn keep_intervals_meet_at_overlap_midpoints() {
        let a = GridAxis::new(2048, 1024, 64).unwrap();
        assert_eq!(a.keep_interval(0), (0.0, 992.0));
        assert_eq!(a.keep_interval(1), (992.0, 1504.0));
        assert_eq!(a.keep_interval(2), (1504.0, 2048.0));
    }
}
