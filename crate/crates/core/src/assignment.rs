//! Exact maximum-weight bipartite matching.
//!
//! The solver pads the `r x c` problem to a square `(r + c)` assignment in
//! which every row and column owns a private zero-weight dummy partner, so
//! "unmatched" is an ordinary assignment. A Kuhn-Munkres pass yields the
//! optimum and its dual potentials; the tight-edge subgraph of those duals
//! contains exactly the optimal matchings, and ties are resolved inside it.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("weight at ({row}, {col}) is not finite")]
    NonFiniteWeight { row: usize, col: usize },
    #[error("weight at ({row}, {col}) is negative: {value}")]
    NegativeWeight { row: usize, col: usize, value: f64 },
    #[error("weight at ({row}, {col}) is outside [0, 1]: {value}")]
    WeightOutOfRange { row: usize, col: usize, value: f64 },
    #[error("matrix data has {got} entries, expected {rows} x {cols}")]
    ShapeMismatch { rows: usize, cols: usize, got: usize },
    #[error("min_weight must be finite and >= 0, got {0}")]
    InvalidMinWeight(f64),
}

/// Dense row-major matrix of finite, non-negative weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl WeightMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, AssignmentError> {
        if data.len() != rows * cols {
            return Err(AssignmentError::ShapeMismatch {
                rows,
                cols,
                got: data.len(),
            });
        }
        for (k, &value) in data.iter().enumerate() {
            let (row, col) = (k / cols.max(1), k % cols.max(1));
            if !value.is_finite() {
                return Err(AssignmentError::NonFiniteWeight { row, col });
            }
            if value < 0.0 {
                return Err(AssignmentError::NegativeWeight { row, col, value });
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(AssignmentError::ShapeMismatch {
                    rows: rows.len(),
                    cols,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    /// Panics on a negative or non-finite value.
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        assert!(value.is_finite() && value >= 0.0, "weight {value} must be finite and >= 0");
        self.data[row * self.cols + col] = value;
    }

    pub fn transpose(&self) -> Self {
        let mut data = Vec::with_capacity(self.data.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                data.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            data,
        }
    }
}

/// Sum of the weights of `pairs`.
pub fn matching_weight(w: &WeightMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| w.get(r, c)).sum()
}

/// Maximum-weight matching restricted to edges with weight `> min_weight`.
///
/// Among matchings of equal total weight the one with more pairs wins, then
/// the lexicographically smallest row-sorted pair sequence. Pairs come back
/// sorted by row.
pub fn max_weight_matching(w: &WeightMatrix, min_weight: f64) -> Result<Vec<(usize, usize)>, AssignmentError> {
    if !min_weight.is_finite() || min_weight < 0.0 {
        return Err(AssignmentError::InvalidMinWeight(min_weight));
    }
    let (r, c) = (w.rows, w.cols);
    if r == 0 || c == 0 {
        return Ok(Vec::new());
    }
    let allowed = |i: usize, j: usize| w.get(i, j) > min_weight;
    if !(0..r).any(|i| (0..c).any(|j| allowed(i, j))) {
        return Ok(Vec::new());
    }

    let n = r + c;
    // Padded cost in minimisation form; `None` is a forbidden edge.
    let padded = |i: usize, j: usize| -> Option<f64> {
        match (i < r, j < c) {
            (true, true) => allowed(i, j).then(|| -w.get(i, j)),
            (true, false) => (j - c == i).then_some(0.0),
            (false, true) => (i - r == j).then_some(0.0),
            (false, false) => Some(0.0),
        }
    };

    // Stage 1: optimal weight and duals.
    let max_w = w.data.iter().copied().fold(0.0f64, f64::max);
    let tol = 1e-9 * max_w.max(1.0);
    let stage1 = Hungarian::solve(n, |i, j| padded(i, j).unwrap_or(f64::INFINITY));
    let tight1 = |i: usize, j: usize| padded(i, j).is_some_and(|cost| stage1.reduced(i, j, cost) <= tol);

    // Stage 2: most real pairs among the optimal matchings. Costs are
    // integers, so potentials and reduced costs stay exact.
    let stage2_cost = |i: usize, j: usize| -> f64 {
        if !tight1(i, j) {
            f64::INFINITY
        } else if i < r && j < c {
            -1.0
        } else {
            0.0
        }
    };
    let mut tight2 = vec![false; n * n];
    let stage2 = {
        let mut costs = vec![f64::INFINITY; n * n];
        for i in 0..n {
            for j in 0..n {
                costs[i * n + j] = stage2_cost(i, j);
            }
        }
        let h = Hungarian::solve(n, |i, j| costs[i * n + j]);
        for i in 0..n {
            for j in 0..n {
                let cost = costs[i * n + j];
                tight2[i * n + j] = cost.is_finite() && h.reduced(i, j, cost) <= 0.5;
            }
        }
        h
    };

    // Stage 3: lexicographic refinement over perfect matchings of the
    // doubly tight subgraph.
    let adjacency: Vec<Vec<usize>> = (0..n)
        .map(|i| (0..n).filter(|&j| tight2[i * n + j]).collect())
        .collect();
    let mut row_to_col = stage2.row_to_col.clone();
    let mut col_to_row = vec![0usize; n];
    for (i, &j) in row_to_col.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut fixed_row = vec![false; n];
    let mut fixed_col = vec![false; n];
    let mut parent = vec![usize::MAX; n];
    let mut queue = Vec::with_capacity(n);

    for i in 0..r {
        let current = row_to_col[i];
        let mut chosen = current;
        for &j in adjacency[i].iter().filter(|&&j| j < c && !fixed_col[j]) {
            if j == current {
                break;
            }
            // Look for an alternating path from j's partner back to `current`
            // that avoids fixed vertices, row i, and column j.
            let start = col_to_row[j];
            parent.iter_mut().for_each(|p| *p = usize::MAX);
            queue.clear();
            queue.push(start);
            let mut head = 0;
            let mut found = false;
            'bfs: while head < queue.len() {
                let a = queue[head];
                head += 1;
                for &x in &adjacency[a] {
                    if fixed_col[x] || x == j || x == row_to_col[a] || parent[x] != usize::MAX {
                        continue;
                    }
                    parent[x] = a;
                    if x == current {
                        found = true;
                        break 'bfs;
                    }
                    let next = col_to_row[x];
                    if !fixed_row[next] && next != i {
                        queue.push(next);
                    }
                }
            }
            if found {
                let mut x = current;
                loop {
                    let a = parent[x];
                    let old = row_to_col[a];
                    row_to_col[a] = x;
                    col_to_row[x] = a;
                    if a == start {
                        break;
                    }
                    x = old;
                }
                row_to_col[i] = j;
                col_to_row[j] = i;
                chosen = j;
                break;
            }
        }
        fixed_row[i] = true;
        fixed_col[chosen] = true;
    }

    Ok((0..r)
        .filter(|&i| row_to_col[i] < c)
        .map(|i| (i, row_to_col[i]))
        .collect())
}

/// All pairs with IoU strictly above 0.5. Such pairs never share a row or a
/// column when the matrix holds IoUs of disjoint segments.
pub fn threshold_matching(iou: &WeightMatrix) -> Result<Vec<(usize, usize)>, AssignmentError> {
    let mut pairs = Vec::new();
    for row in 0..iou.rows {
        for col in 0..iou.cols {
            let value = iou.get(row, col);
            if value > 1.0 {
                return Err(AssignmentError::WeightOutOfRange { row, col, value });
            }
            if value > 0.5 {
                pairs.push((row, col));
            }
        }
    }
    Ok(pairs)
}

/// Square min-cost assignment with dual potentials (1-indexed internally).
struct Hungarian {
    u: Vec<f64>,
    v: Vec<f64>,
    row_to_col: Vec<usize>,
}

impl Hungarian {
    fn solve(n: usize, cost: impl Fn(usize, usize) -> f64) -> Self {
        let inf = f64::INFINITY;
        let mut u = vec![0.0; n + 1];
        let mut v = vec![0.0; n + 1];
        let mut p = vec![0usize; n + 1];
        let mut way = vec![0usize; n + 1];
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0usize;
            minv.iter_mut().for_each(|m| *m = inf);
            used.iter_mut().for_each(|b| *b = false);
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let mut delta = inf;
                let mut j1 = 0usize;
                for j in 1..=n {
                    if used[j] {
                        continue;
                    }
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
                debug_assert!(j1 != 0, "padded assignment is always feasible");
                for j in 0..=n {
                    if used[j] {
                        u[p[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if p[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                p[j0] = p[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        let mut row_to_col = vec![0usize; n];
        for j in 1..=n {
            row_to_col[p[j] - 1] = j - 1;
        }
        Self { u, v, row_to_col }
    }

    #[inline]
    fn reduced(&self, i: usize, j: usize, cost: f64) -> f64 {
        cost - self.u[i + 1] - self.v[j + 1]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> WeightMatrix {
        WeightMatrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    /// Exhaustive search with the full tie-break, for small integer matrices.
    fn brute_force(w: &[Vec<i64>], min_weight: i64) -> (i64, Vec<(usize, usize)>) {
        let rows = w.len();
        let cols = w.first().map_or(0, Vec::len);
        let mut best: Option<(i64, Vec<(usize, usize)>)> = None;
        let mut cur = Vec::new();
        let mut used = vec![false; cols];
        fn rec(
            row: usize,
            w: &[Vec<i64>],
            min_weight: i64,
            cur: &mut Vec<(usize, usize)>,
            used: &mut [bool],
            best: &mut Option<(i64, Vec<(usize, usize)>)>,
        ) {
            if row == w.len() {
                let total: i64 = cur.iter().map(|&(r, c)| w[r][c]).sum();
                let better = match best {
                    None => true,
                    Some((bt, bp)) => {
                        total > *bt || (total == *bt && (cur.len() > bp.len() || (cur.len() == bp.len() && *cur < *bp)))
                    }
                };
                if better {
                    *best = Some((total, cur.clone()));
                }
                return;
            }
            rec(row + 1, w, min_weight, cur, used, best);
            for col in 0..used.len() {
                if !used[col] && w[row][col] > min_weight {
                    used[col] = true;
                    cur.push((row, col));
                    rec(row + 1, w, min_weight, cur, used, best);
                    cur.pop();
                    used[col] = false;
                }
            }
        }
        let _ = (rows, cols);
        rec(0, w, min_weight, &mut cur, &mut used, &mut best);
        best.unwrap()
    }

    #[test]
    fn singleton() {
        assert_eq!(max_weight_matching(&m(&[&[1.0]]), 0.0).unwrap(), vec![(0, 0)]);
    }

    #[test]
    fn beats_greedy_on_two_by_two() {
        // (0,0) alone scores 0.9 and so does (0,1)+(1,0); the two-pair optimum wins.
        let w = m(&[&[0.9, 0.1], &[0.8, 0.0]]);
        let pairs = max_weight_matching(&w, 0.0).unwrap();
        assert_eq!(pairs, vec![(0, 1), (1, 0)]);
        assert!((matching_weight(&w, &pairs) - 0.9).abs() < 1e-12);
    }

    #[test]
    fn empty_and_all_forbidden() {
        assert!(max_weight_matching(&WeightMatrix::zeros(0, 3), 0.0).unwrap().is_empty());
        assert!(max_weight_matching(&WeightMatrix::zeros(3, 3), 0.0).unwrap().is_empty());
        assert!(max_weight_matching(&m(&[&[0.2, 0.3]]), 0.5).unwrap().is_empty());
    }

    #[test]
    fn min_weight_excludes_edges() {
        let w = m(&[&[0.05, 0.5], &[0.4, 0.0]]);
        assert_eq!(max_weight_matching(&w, 0.1).unwrap(), vec![(0, 1), (1, 0)]);
        assert_eq!(max_weight_matching(&w, 0.45).unwrap(), vec![(0, 1)]);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(matches!(
            WeightMatrix::new(1, 2, vec![0.1, f64::NAN]),
            Err(AssignmentError::NonFiniteWeight { row: 0, col: 1 })
        ));
        assert!(matches!(
            WeightMatrix::new(1, 1, vec![-0.1]),
            Err(AssignmentError::NegativeWeight { .. })
        ));
        assert!(WeightMatrix::new(2, 2, vec![0.0; 3]).is_err());
        assert!(max_weight_matching(&m(&[&[1.0]]), -1.0).is_err());
    }

    #[test]
    fn threshold_examples() {
        assert_eq!(threshold_matching(&m(&[&[0.51]])).unwrap(), vec![(0, 0)]);
        assert!(threshold_matching(&m(&[&[0.5]])).unwrap().is_empty());
        assert!(matches!(
            threshold_matching(&m(&[&[1.2]])),
            Err(AssignmentError::WeightOutOfRange { .. })
        ));
    }

    #[test]
    fn tie_break_matches_brute_force_on_integer_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..400 {
            let rows = rng.random_range(1..=5);
            let cols = rng.random_range(1..=5);
            let wi: Vec<Vec<i64>> = (0..rows).map(|_| (0..cols).map(|_| rng.random_range(0..4)).collect()).collect();
            let wf: Vec<Vec<f64>> = wi.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            let (total, pairs) = brute_force(&wi, 0);
            let got = max_weight_matching(&WeightMatrix::from_rows(&wf).unwrap(), 0.0).unwrap();
            assert_eq!(got, pairs, "matrix {wi:?} (optimum {total})");
        }
    }

    fn one_to_one(pairs: &[(usize, usize)]) -> bool {
        let mut rows: Vec<_> = pairs.iter().map(|p| p.0).collect();
        let mut cols: Vec<_> = pairs.iter().map(|p| p.1).collect();
        rows.sort_unstable();
        cols.sort_unstable();
        let n = pairs.len();
        rows.dedup();
        cols.dedup();
        rows.len() == n && cols.len() == n
    }

    fn matrix_strategy() -> impl Strategy<Value = WeightMatrix> {
        (1usize..7, 1usize..7).prop_flat_map(|(r, c)| {
            proptest::collection::vec(0.0f64..1.0, r * c).prop_map(move |d| WeightMatrix::new(r, c, d).unwrap())
        })
    }

    proptest! {
        #[test]
        fn transpose_symmetry(w in matrix_strategy()) {
            let a = max_weight_matching(&w, 0.0).unwrap();
            let mut b: Vec<_> = max_weight_matching(&w.transpose(), 0.0).unwrap().into_iter().map(|(r, c)| (c, r)).collect();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn dominates_threshold_matching(w in matrix_strategy()) {
            let opt = max_weight_matching(&w, 0.0).unwrap();
            let thr = threshold_matching(&w).unwrap();
            prop_assert!(one_to_one(&opt));
            prop_assert!(matching_weight(&w, &opt) >= matching_weight(&w, &thr) - 1e-12 || !one_to_one(&thr));
        }
    }
}
