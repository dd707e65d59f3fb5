use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matchloss::{assign, CostMatrix};

/// Outcome of centroid matching.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    /// `(gt_index, pred_index, distance_px)`, ascending by ground truth.
    pub pairs: Vec<(usize, usize, f64)>,
    pub unmatched_gt: Vec<usize>,
    pub unmatched_pred: Vec<usize>,
}

impl MatchResult {
    pub fn tp(&self) -> usize {
        self.pairs.len()
    }

    pub fn fp(&self) -> usize {
        self.unmatched_pred.len()
    }

    pub fn fn_(&self) -> usize {
        self.unmatched_gt.len()
    }

    pub fn total_distance(&self) -> f64 {
        self.pairs.iter().map(|p| p.2).sum()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMethod {
    /// Maximum-cardinality matching with minimum total distance.
    #[default]
    Optimal,
    /// Repeatedly pairs the closest remaining gt/prediction.
    Greedy,
}

/// Bucket grid over points with a fixed cell size.
pub(crate) struct PointGrid {
    cell: f64,
    buckets: HashMap<(i64, i64), Vec<usize>>,
}

impl PointGrid {
    pub(crate) fn new(points: &[(f64, f64)], cell: f64) -> Self {
        let mut buckets: HashMap<(i64, i64), Vec<usize>> = HashMap::new();
        for (i, p) in points.iter().enumerate() {
            buckets.entry(Self::key(*p, cell)).or_default().push(i);
        }
        Self { cell, buckets }
    }

    fn key(p: (f64, f64), cell: f64) -> (i64, i64) {
        ((p.0 / cell).floor() as i64, (p.1 / cell).floor() as i64)
    }

    /// Indices within `radius` of `p` (inclusive), ascending.
    pub(crate) fn within(&self, points: &[(f64, f64)], p: (f64, f64), radius: f64) -> Vec<(usize, f64)> {
        let span = (radius / self.cell).ceil() as i64;
        let (kx, ky) = Self::key(p, self.cell);
        let mut out = Vec::new();
        for gy in ky - span..=ky + span {
            for gx in kx - span..=kx + span {
                if let Some(b) = self.buckets.get(&(gx, gy)) {
                    for &i in b {
                        let d = dist(points[i], p);
                        if d <= radius {
                            out.push((i, d));
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|e| e.0);
        out
    }

    /// Nearest point to `p`, lowest index on ties.
    pub(crate) fn nearest(&self, points: &[(f64, f64)], p: (f64, f64)) -> Option<usize> {
        if points.is_empty() {
            return None;
        }
        let (kx, ky) = Self::key(p, self.cell);
        let mut best: Option<(f64, usize)> = None;
        for ring in 0i64.. {
            // every point outside this ring is at least `ring * cell` away
            if let Some((d, _)) = best {
                if d < (ring - 1).max(0) as f64 * self.cell {
                    break;
                }
            }
            if ring as usize > 2 + (points.len() as f64).sqrt() as usize {
                // sparse grid: fall back to a scan
                return points
                    .iter()
                    .enumerate()
                    .map(|(i, q)| (dist(*q, p), i))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
                    .map(|e| e.1);
            }
            for gy in ky - ring..=ky + ring {
                for gx in kx - ring..=kx + ring {
                    if (gy - ky).abs() != ring && (gx - kx).abs() != ring {
                        continue;
                    }
                    if let Some(b) = self.buckets.get(&(gx, gy)) {
                        for &i in b {
                            let d = dist(points[i], p);
                            if best.is_none_or(|(bd, bi)| d < bd || (d == bd && i < bi)) {
                                best = Some((d, i));
                            }
                        }
                    }
                }
            }
        }
        best.map(|b| b.1)
    }
}

#[inline]
fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - b.0).hypot(a.1 - b.1)
}

fn find(parent: &mut [usize], mut x: usize) -> usize {
    while parent[x] != x {
        parent[x] = parent[parent[x]];
        x = parent[x];
    }
    x
}

/// Matches ground-truth and predicted centroids within `radius_um`
/// micrometers (`radius_um / mpp` pixels, inclusive).
pub fn match_centroids(gt: &[(f64, f64)], pred: &[(f64, f64)], radius_um: f64, mpp: f64) -> Result<MatchResult> {
    match_centroids_with(gt, pred, radius_um, mpp, MatchMethod::Optimal)
}

pub fn match_centroids_with(gt: &[(f64, f64)], pred: &[(f64, f64)], radius_um: f64, mpp: f64, method: MatchMethod) -> Result<MatchResult> {
    if !(radius_um > 0.0 && radius_um.is_finite()) {
        return Err(Error::param("matching radius must be positive"));
    }
    if !(mpp > 0.0 && mpp.is_finite()) {
        return Err(Error::param("mpp must be positive"));
    }
    let radius = radius_um / mpp;
    let grid = PointGrid::new(pred, radius);
    // candidate edges (gt, pred, distance), gt-major
    let mut edges = Vec::new();
    for (g, &p) in gt.iter().enumerate() {
        for (j, d) in grid.within(pred, p, radius) {
            edges.push((g, j, d));
        }
    }
    let mut matched: Vec<(usize, usize, f64)> = match method {
        MatchMethod::Greedy => greedy(&edges, gt.len(), pred.len()),
        MatchMethod::Optimal => optimal(&edges, gt.len(), pred.len(), radius)?,
    };
    matched.sort_unstable_by_key(|p| p.0);
    let mut gt_used = vec![false; gt.len()];
    let mut pred_used = vec![false; pred.len()];
    for &(g, p, _) in &matched {
        gt_used[g] = true;
        pred_used[p] = true;
    }
    Ok(MatchResult {
        pairs: matched,
        unmatched_gt: (0..gt.len()).filter(|&i| !gt_used[i]).collect(),
        unmatched_pred: (0..pred.len()).filter(|&i| !pred_used[i]).collect(),
    })
}

fn greedy(edges: &[(usize, usize, f64)], n_gt: usize, n_pred: usize) -> Vec<(usize, usize, f64)> {
    let mut sorted = edges.to_vec();
    sorted.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut gt_used = vec![false; n_gt];
    let mut pred_used = vec![false; n_pred];
    let mut out = Vec::new();
    for (g, p, d) in sorted {
        if !gt_used[g] && !pred_used[p] {
            gt_used[g] = true;
            pred_used[p] = true;
            out.push((g, p, d));
        }
    }
    out
}

/// Solves each connected component of the radius graph separately.
fn optimal(edges: &[(usize, usize, f64)], n_gt: usize, n_pred: usize, radius: f64) -> Result<Vec<(usize, usize, f64)>> {
    // nodes: gts first, then predictions
    let mut parent: Vec<usize> = (0..n_gt + n_pred).collect();
    for &(g, p, _) in edges {
        let (a, b) = (find(&mut parent, g), find(&mut parent, n_gt + p));
        if a != b {
            parent[a.max(b)] = a.min(b);
        }
    }
    let mut components: HashMap<usize, Vec<(usize, usize, f64)>> = HashMap::new();
    for &e in edges {
        let root = find(&mut parent, e.0);
        components.entry(root).or_default().push(e);
    }
    let mut roots: Vec<usize> = components.keys().copied().collect();
    roots.sort_unstable();
    let mut out = Vec::new();
    for root in roots {
        let comp = &components[&root];
        let mut gts: Vec<usize> = comp.iter().map(|e| e.0).collect();
        let mut preds: Vec<usize> = comp.iter().map(|e| e.1).collect();
        gts.sort_unstable();
        gts.dedup();
        preds.sort_unstable();
        preds.dedup();
        if comp.len() == 1 {
            out.push(comp[0]);
            continue;
        }
        // any matching with one more in-radius pair is cheaper than every
        // matching with fewer, since distances sum to at most k * radius
        let forbidden = (gts.len().min(preds.len()) as f64 + 1.0) * (radius + 1.0);
        let mut cost = CostMatrix::from_fn(gts.len(), preds.len(), |_, _| forbidden);
        for &(g, p, d) in comp {
            let r = gts.binary_search(&g).unwrap_or_default();
            let c = preds.binary_search(&p).unwrap_or_default();
            cost.set(r, c, d);
        }
        for (r, c) in assign(&cost)?.pairs {
            let d = cost.get(r, c);
            if d <= radius {
                out.push((gts[r], preds[c], d));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn radius_examples() {
        let m = match_centroids(&[(100.0, 100.0)], &[(105.0, 100.0)], 3.0, 0.25).unwrap();
        assert_eq!(m.pairs, vec![(0, 0, 5.0)]);
        let m = match_centroids(&[(100.0, 100.0)], &[(150.0, 100.0)], 3.0, 0.25).unwrap();
        assert!(m.pairs.is_empty());
        assert_eq!((m.unmatched_gt.clone(), m.unmatched_pred.clone()), (vec![0], vec![0]));
        // exactly on the radius counts
        let m = match_centroids(&[(0.0, 0.0)], &[(12.0, 0.0)], 3.0, 0.25).unwrap();
        assert_eq!(m.tp(), 1);
        let m = match_centroids(&[(0.0, 0.0)], &[(12.0, 0.0)], 3.0, 0.5).unwrap();
        assert_eq!(m.tp(), 0);
    }

    #[test]
    fn optimal_beats_greedy_on_chain() {
        // greedy grabs the 3 px pair and strands both ends
        let gt = [(0.0, 0.0), (10.0, 0.0)];
        let pred = [(7.0, 0.0), (17.0, 0.0)];
        let opt = match_centroids(&gt, &pred, 2.5, 0.25).unwrap();
        assert_eq!(opt.tp(), 2);
        let gr = match_centroids_with(&gt, &pred, 2.5, 0.25, MatchMethod::Greedy).unwrap();
        assert_eq!(gr.tp(), 1);
        assert_eq!(gr.pairs, vec![(1, 0, 3.0)]);
    }

    #[test]
    fn empty_sides() {
        let m = match_centroids(&[], &[(1.0, 1.0)], 3.0, 0.25).unwrap();
        assert_eq!((m.tp(), m.fp(), m.fn_()), (0, 1, 0));
        assert!(match_centroids(&[], &[], 0.0, 0.25).is_err());
    }

    #[test]
    fn nearest_lookup() {
        let pts = [(0.0, 0.0), (100.0, 0.0), (5000.0, 5000.0)];
        let g = PointGrid::new(&pts, 12.0);
        assert_eq!(g.nearest(&pts, (60.0, 1.0)), Some(1));
        assert_eq!(g.nearest(&pts, (50.0, 0.0)), Some(0));
        assert_eq!(g.nearest(&pts, (4000.0, 4000.0)), Some(2));
        assert_eq!(PointGrid::new(&[], 12.0).nearest(&[], (0.0, 0.0)), None);
    }
}
