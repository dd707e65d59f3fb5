
use super::grid::GridAxis;
use super::{Detection, PixelRect};
use crate::annotation::AnnotationSet;

/// Uniform central-crop rule: trim `margin` from every side of a region that
/// lies strictly inside `outer`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropRule {
    pub margin: f64,
    pub outer: PixelRect,
}

impl CropRule {
    pub fn from_overlap(overlap: u32, outer: PixelRect) -> Self {
        Self {
            margin: overlap as f64 / 2.0,
            outer,
        }
    }

    /// Half-open keep rectangle `(x0, y0, x1, y1)` for `region`.
    pub fn keep_rect(&self, region: PixelRect) -> (f64, f64, f64, f64) {
        let m = self.margin;
        let trim = |inside: bool| if inside { m } else { 0.0 };
        (
            region.x as f64 + trim(region.x > self.outer.x),
            region.y as f64 + trim(region.y > self.outer.y),
            region.x1() as f64 - trim(region.x1() < self.outer.x1()),
            region.y1() as f64 - trim(region.y1() < self.outer.y1()),
        )
    }
}

#[inline]
fn in_keep(d: &Detection, k: (f64, f64, f64, f64)) -> bool {
    d.cx >= k.0 && d.cx < k.2 && d.cy >= k.1 && d.cy < k.3
}

/// Keeps detections (same frame as `region`) whose centroid lies in the
/// region's central crop.
pub fn central_crop_filter(dets: &[Detection], region: PixelRect, crop: &CropRule) -> Vec<Detection> {
    let k = crop.keep_rect(region);
    dets.iter().filter(|d| in_keep(d, k)).copied().collect()
}

/// Orders detections by `(cy, cx, class, score, w, h)`.
pub fn sort_detections(dets: &mut [Detection]) {
    dets.sort_unstable_by(|a, b| {
        a.cy.total_cmp(&b.cy)
            .then(a.cx.total_cmp(&b.cx))
            .then(a.class_id.cmp(&b.class_id))
            .then(a.score.total_cmp(&b.score))
            .then(a.w.total_cmp(&b.w))
            .then(a.h.total_cmp(&b.h))
    });
}

/// Merges per-region detections given in region-local coordinates. Regions
/// are positioned relative to `outer`'s origin and laid out on the
/// `(size, overlap)` grid over `outer`. Each region keeps the centroids in
/// its keep rectangle: on regular strides this is the region shrunk by
/// `overlap / 2` on every side shared with a neighbour; next to a clamped
/// last row or column the boundary moves to the middle of the wider overlap
/// so ownership still partitions `outer`. Output is in `outer`'s frame,
/// sorted, and independent of input order.
pub fn merge_regions(per_region: &[(PixelRect, Vec<Detection>)], outer: PixelRect, overlap: u32) -> Vec<Detection> {
    merge_shifted(per_region, (0, 0), outer, overlap)
}

/// [`merge_regions`] with every region rectangle moved by `shift` first.
fn merge_shifted(per_region: &[(PixelRect, Vec<Detection>)], shift: (i64, i64), outer: PixelRect, overlap: u32) -> Vec<Detection> {
    let mut out = Vec::with_capacity(per_region.iter().map(|(_, d)| d.len()).sum());
    let mut axes: Option<(u32, u32, Option<(GridAxis, GridAxis)>)> = None;
    let uniform = CropRule::from_overlap(overlap, PixelRect::new(0, 0, outer.w, outer.h));
    for (region, dets) in per_region {
        let region = &PixelRect::new(region.x + shift.0, region.y + shift.1, region.w, region.h);
        let (rw, rh) = (region.w, region.h);
        let grid = match &axes {
            Some((w, h, g)) if (*w, *h) == (rw, rh) => g.clone(),
            _ => {
                let g = GridAxis::new(outer.w, rw, overlap)
                    .ok()
                    .zip(GridAxis::new(outer.h, rh, overlap).ok());
                axes = Some((rw, rh, g.clone()));
                g
            }
        };
        let keep = grid
            .as_ref()
            .and_then(|(ax, ay)| {
                let ix = ax.origins.binary_search(&u32::try_from(region.x).ok()?).ok()?;
                let iy = ay.origins.binary_search(&u32::try_from(region.y).ok()?).ok()?;
                let (x0, x1) = ax.keep_interval(ix);
                let (y0, y1) = ay.keep_interval(iy);
                Some((x0, y0, x1, y1))
            })
            // regions off the regular grid fall back to the uniform rule
            .unwrap_or_else(|| uniform.keep_rect(*region));
        let (dx, dy) = (region.x as f64, region.y as f64);
        out.extend(
            dets.iter()
                .map(|d| d.translated(dx, dy))
                .filter(|d| in_keep(d, keep))
                .map(|d| d.translated(outer.x as f64, outer.y as f64)),
        );
    }
    sort_detections(&mut out);
    out
}

/// Window-level merge: window rectangles are tile-local, detections
/// window-local; output is tile-local.
pub fn merge_windows(per_window: &[(PixelRect, Vec<Detection>)], tile_size: (u32, u32), overlap: u32) -> Vec<Detection> {
    merge_regions(per_window, PixelRect::new(0, 0, tile_size.0, tile_size.1), overlap)
}

/// Tile-level merge: tile rectangles are level-0, detections tile-local;
/// output is level-0.
pub fn merge_tiles(per_tile: &[(PixelRect, Vec<Detection>)], slide_rect: PixelRect, overlap: u32) -> Vec<Detection> {
    merge_shifted(per_tile, (-slide_rect.x, -slide_rect.y), slide_rect, overlap)
}

/// Fraction of nuclei whose larger box side exceeds `overlap`.
pub fn oversized_fraction(annotations: &AnnotationSet, overlap: u32) -> f64 {
    if annotations.is_empty() {
        return 0.0;
    }
    let big = annotations
        .records
        .iter()
        .filter(|r| r.w.max(r.h) > overlap as f64)
        .count();
    big as f64 / annotations.len() as f64
}


#[cfg(test)]
mod tests {
    use super::*;
    use crate::annotation::AnnotationRecord;
    use crate::tiler::grid::{axis_origins, partition_windows};
    use proptest::prelude::*;

    fn det(cx: f64, cy: f64) -> Detection {
        Detection {
            cx,
            cy,
            w: 6.0,
            h: 6.0,
            class_id: 0,
            score: 1.0,
        }
    }

    #[test]
    fn corner_window_keep_rect() {
        let crop = CropRule::from_overlap(64, PixelRect::new(0, 0, 1024, 1024));
        let window = PixelRect::new(0, 0, 256, 256);
        assert_eq!(crop.keep_rect(window), (0.0, 0.0, 224.0, 224.0));
        let kept = central_crop_filter(&[det(230.0, 100.0), det(100.0, 100.0), det(0.0, 0.0), det(224.0, 5.0)], window, &crop);
        assert_eq!(kept, vec![det(100.0, 100.0), det(0.0, 0.0)]);
    }

    #[test]
    fn region_equal_to_outer_is_untrimmed() {
        let outer = PixelRect::new(0, 0, 256, 256);
        let crop = CropRule::from_overlap(64, outer);
        let dets = vec![det(0.0, 0.0), det(255.9, 255.9), det(128.0, 3.0)];
        assert_eq!(central_crop_filter(&dets, outer, &crop), dets);
    }

    #[test]
    fn single_window_tile_is_translation_only() {
        let dets = vec![det(5.0, 9.0), det(200.0, 1.0)];
        let mut expect = dets.clone();
        sort_detections(&mut expect);
        assert_eq!(merge_windows(&[(PixelRect::new(0, 0, 256, 256), dets)], (256, 256), 64), expect);
    }

    #[test]
    fn shared_band_nucleus_appears_once() {
        // windows at x=0 and x=192 overlap on [192, 256); a centroid right in
        // the middle of that band belongs to the right-hand window only
        let tile = (448, 256);
        let left = PixelRect::new(0, 0, 256, 256);
        let right = PixelRect::new(192, 0, 256, 256);
        let gx = 224.0;
        let merged = merge_windows(
            &[(left, vec![det(gx, 100.0)]), (right, vec![det(gx - 192.0, 100.0)])],
            tile,
            64,
        );
        assert_eq!(merged, vec![det(gx, 100.0)]);
        // and one pixel to the left belongs to the left window only
        let merged = merge_windows(
            &[(left, vec![det(gx - 1.0, 100.0)]), (right, vec![det(gx - 193.0, 100.0)])],
            tile,
            64,
        );
        assert_eq!(merged, vec![det(gx - 1.0, 100.0)]);
    }

    #[test]
    fn whole_slide_tile_and_empty_inputs() {
        let slide = PixelRect::new(0, 0, 800, 600);
        let dets = vec![det(799.0, 599.0), det(0.0, 0.0)];
        let mut expect = dets.clone();
        sort_detections(&mut expect);
        assert_eq!(merge_tiles(&[(PixelRect::new(0, 0, 1024, 1024), dets)], slide, 64), expect);
        assert!(merge_tiles(&[], slide, 64).is_empty());
    }

    #[test]
    fn merge_is_order_independent() {
        let slide = PixelRect::new(0, 0, 2048, 2048);
        let xs = axis_origins(2048, 1024, 64).unwrap();
        let mut per_tile = Vec::new();
        for &y in &xs {
            for &x in &xs {
                let r = PixelRect::new(x as i64, y as i64, 1024, 1024);
                per_tile.push((r, vec![det(10.0, 10.0), det(1000.0, 512.0), det(512.0, 1020.0)]));
            }
        }
        let a = merge_tiles(&per_tile, slide, 64);
        per_tile.reverse();
        assert_eq!(a, merge_tiles(&per_tile, slide, 64));
    }

    #[test]
    fn regular_grid_matches_uniform_rule() {
        // 1984 = 960 + 1024: no clamping, so midpoint and margin rules agree
        let outer = PixelRect::new(0, 0, 1024, 1024);
        let crop = CropRule::from_overlap(64, outer);
        let g = partition_windows(1024, 256, 64).unwrap();
        let ax = g.axis();
        for (i, &o) in ax.origins.iter().enumerate() {
            let (lo, hi) = ax.keep_interval(i);
            let k = crop.keep_rect(PixelRect::new(o as i64, 0, 256, 256));
            assert_eq!((lo, hi), (k.0, k.2));
        }
    }

    #[test]
    fn oversized_counting() {
        let mut recs: Vec<AnnotationRecord> = (0..200)
            .map(|i| AnnotationRecord {
                cx: i as f64,
                cy: 0.0,
                w: 20.0,
                h: 30.0,
                class_id: 0,
                tissue: None,
            })
            .collect();
        let set = AnnotationSet::new(recs.clone(), None);
        assert_eq!(oversized_fraction(&set, 64), 0.0);
        recs[17].h = 70.0;
        assert_eq!(oversized_fraction(&AnnotationSet::new(recs, None), 64), 0.005);
        assert_eq!(oversized_fraction(&AnnotationSet::default(), 64), 0.0);
    }

    proptest! {
        /// Keep rectangles of any grid tile the outer rectangle exactly: every
        /// sample point is owned by exactly one region.
        #[test]
        fn keep_rects_partition_outer(
            dim_x in 64u32..3000, dim_y in 64u32..3000,
            size in 64u32..1200, half_overlap in 0u32..31,
            px in 0.0f64..1.0, py in 0.0f64..1.0,
        ) {
            let overlap = half_overlap * 2;
            prop_assume!(overlap < size);
            let ax = GridAxis::new(dim_x, size, overlap).unwrap();
            let ay = GridAxis::new(dim_y, size, overlap).unwrap();
            // union of tiles covers the outer rect
            prop_assert!(*ax.origins.last().unwrap() + size >= dim_x);
            let x = px * dim_x as f64;
            let y = py * dim_y as f64;
            let mut per_region = Vec::new();
            for &oy in &ay.origins {
                for &ox in &ax.origins {
                    let r = PixelRect::new(ox as i64, oy as i64, size, size);
                    let local = if r.contains_point(x, y) { vec![det(x - ox as f64, y - oy as f64)] } else { vec![] };
                    per_region.push((r, local));
                }
            }
            let merged = merge_regions(&per_region, PixelRect::new(0, 0, dim_x, dim_y), overlap);
            prop_assert_eq!(merged.len(), 1);
        }
    }
}
