//! Optimal assignment on dense real weight matrices.

/// Maximum-weight assignment for a `rows x cols` weight matrix (row-major).
///
/// Returns, for every row, the assigned column, or `None` when the row is left
/// unassigned because there are more rows than columns.
pub fn maximize(weights: &[f64], rows: usize, cols: usize) -> Vec<Option<usize>> {
    assert_eq!(weights.len(), rows * cols, "weight matrix shape");
    if rows == 0 || cols == 0 {
        return vec![None; rows];
    }
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if rows <= cols {
        let cost: Vec<f64> = weights.iter().map(|w| max - w).collect();
        minimize_wide(&cost, rows, cols)
            .into_iter()
            .map(Some)
            .collect()
    } else {
        let cost: Vec<f64> = (0..cols)
            .flat_map(|c| (0..rows).map(move |r| (r, c)))
            .map(|(r, c)| max - weights[r * cols + c])
            .collect();
        let col_to_row = minimize_wide(&cost, cols, rows);
        let mut out = vec![None; rows];
        for (c, r) in col_to_row.into_iter().enumerate() {
            out[r] = Some(c);
        }
        out
    }
}

/// Shortest-augmenting-path Hungarian method for `n <= m`; returns the column
/// of every row.
fn minimize_wide(cost: &[f64], n: usize, m: usize) -> Vec<usize> {
    let a = |i: usize, j: usize| cost[(i - 1) * m + (j - 1)];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=m {
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
    let mut ans = vec![0usize; n];
    for j in 1..=m {
        if p[j] != 0 {
            ans[p[j] - 1] = j - 1;
        }
    }
    ans
}
