use crate::error::{Error, Result};

/// Dense row-major cost matrix; rows are predictions, columns ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::param(format!("{} entries for a {rows}x{cols} matrix", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let data = (0..rows * cols).map(|k| f(k / cols.max(1), k % cols.max(1))).collect();
        Self { rows, cols, data }
    }

    /// Builds from nested rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::param("ragged cost matrix"));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `(pred_index, gt_index)`, ascending by prediction.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
}

/// Minimum-cost one-to-one assignment of size `min(rows, cols)`.
///
/// Shortest augmenting paths with dual potentials (Kuhn-Munkres, O(n²m)).
/// Rows are inserted in index order and columns scanned in index order with
/// strict improvement, so equal-cost optima resolve the same way on every
/// run.
pub fn assign(cost: &CostMatrix) -> Result<Assignment> {
    if cost.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::param("cost matrix has non-finite entries"));
    }
    if cost.rows == 0 || cost.cols == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let mut pairs = if cost.rows <= cost.cols {
        solve(cost)
    } else {
        solve(&cost.transpose()).into_iter().map(|(c, r)| (r, c)).collect()
    };
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
    Ok(Assignment { pairs, total_cost })
}

/// Requires `rows <= cols`; returns `(row, col)` for every row.
fn solve(cost: &CostMatrix) -> Vec<(usize, usize)> {
    let (n, m) = (cost.rows, cost.cols);
    // 1-based arrays with index 0 as the virtual source column
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// Exhaustive minimum over all injective maps from the smaller side.
    fn brute_force(cost: &CostMatrix) -> f64 {
        fn rec(cost: &CostMatrix, r: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
            if r == cost.rows() {
                *best = best.min(acc);
                return;
            }
            for c in 0..cost.cols() {
                if !used[c] {
                    used[c] = true;
                    rec(cost, r + 1, used, acc + cost.get(r, c), best);
                    used[c] = false;
                }
            }
        }
        let m = if cost.rows() <= cost.cols() { cost.clone() } else { cost.transpose() };
        if m.rows() == 0 {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        rec(&m, 0, &mut vec![false; m.cols()], 0.0, &mut best);
        best
    }

    fn check_valid(cost: &CostMatrix, a: &Assignment) {
        assert_eq!(a.pairs.len(), cost.rows().min(cost.cols()));
        let mut rows: Vec<usize> = a.pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<usize> = a.pairs.iter().map(|p| p.1).collect();
        rows.dedup();
        cols.sort_unstable();
        cols.dedup();
        assert_eq!(rows.len(), a.pairs.len());
        assert_eq!(cols.len(), a.pairs.len());
    }

    #[test]
    fn two_by_two_example() {
        let cost = CostMatrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        let a = assign(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 1), (1, 0)]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn diagonal_zero_is_identity() {
        let cost = CostMatrix::from_fn(6, 6, |r, c| if r == c { 0.0 } else { 1.0 + (r * c) as f64 });
        let a = assign(&cost).unwrap();
        assert_eq!(a.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn empty_and_rectangular() {
        assert!(assign(&CostMatrix::zeros(0, 5)).unwrap().pairs.is_empty());
        assert!(assign(&CostMatrix::zeros(4, 0)).unwrap().pairs.is_empty());
        let wide = CostMatrix::from_rows(&[vec![5.0, 1.0, 3.0]]).unwrap();
        assert_eq!(assign(&wide).unwrap().pairs, vec![(0, 1)]);
        let tall = wide.transpose();
        assert_eq!(assign(&tall).unwrap().pairs, vec![(1, 0)]);
    }

    #[test]
    fn sentinel_pairs_are_avoided_when_possible() {
        let s = 1e9;
        let cost = CostMatrix::from_rows(&[vec![1.0, s], vec![2.0, s], vec![s, 3.0]]).unwrap();
        let a = assign(&cost).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (2, 1)]);
        assert_eq!(a.total_cost, 4.0);
    }

    #[test]
    fn rejects_nan() {
        let cost = CostMatrix::from_rows(&[vec![f64::NAN]]).unwrap();
        assert!(assign(&cost).is_err());
        assert!(CostMatrix::from_rows(&[vec![1.0], vec![]]).is_err());
    }

    proptest! {
        #[test]
        fn matches_brute_force(rows in 0usize..7, cols in 0usize..7, seed in proptest::collection::vec(0u32..50, 49)) {
            let cost = CostMatrix::from_fn(rows, cols, |r, c| seed[r * 7 + c] as f64);
            let a = assign(&cost).unwrap();
            check_valid(&cost, &a);
            prop_assert_eq!(a.total_cost, brute_force(&cost));
        }

        #[test]
        fn real_valued_near_brute_force(rows in 1usize..7, cols in 1usize..7, seed in proptest::collection::vec(-10.0f64..10.0, 49)) {
            let cost = CostMatrix::from_fn(rows, cols, |r, c| seed[r * 7 + c]);
            let a = assign(&cost).unwrap();
            check_valid(&cost, &a);
            prop_assert!((a.total_cost - brute_force(&cost)).abs() < 1e-9);
        }

        #[test]
        fn permutation_invariant(n in 1usize..7, seed in proptest::collection::vec(0u32..20, 49), shift in 0usize..7) {
            let cost = CostMatrix::from_fn(n, n, |r, c| seed[r * 7 + c] as f64);
            let permuted = CostMatrix::from_fn(n, n, |r, c| cost.get((r + shift) % n, (c + 2 * shift) % n));
            let a = assign(&cost).unwrap();
            let b = assign(&permuted).unwrap();
            prop_assert_eq!(a.total_cost, b.total_cost);
            for &(r, c) in &b.pairs {
                prop_assert_eq!(permuted.get(r, c), cost.get((r + shift) % n, (c + 2 * shift) % n));
            }
        }

        #[test]
        fn deterministic(n in 1usize..7, seed in proptest::collection::vec(0u32..3, 49)) {
            let cost = CostMatrix::from_fn(n, n, |r, c| seed[r * 7 + c] as f64);
            prop_assert_eq!(assign(&cost).unwrap(), assign(&cost).unwrap());
        }
    }
}
