//! Minimum-cost bipartite assignment (shortest augmenting paths with
//! potentials, O(n²·m)).

/// Solves the assignment problem for an `n×m` cost matrix.
///
/// Entries equal to `+∞` (or NaN) mark forbidden pairs. The result assigns as
/// many rows as possible using only allowed pairs and, among those
/// assignments, has minimum total cost. Returned pairs are `(row, col)` in
/// row order.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<(usize, usize)> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    assert!(cost.iter().all(|r| r.len() == m), "ragged cost matrix");
    if n == 0 || m == 0 {
        return Vec::new();
    }
    let allowed = |v: f64| v.is_finite();
    let finite: Vec<f64> = cost
        .iter()
        .flatten()
        .copied()
        .filter(|v| allowed(*v))
        .collect();
    if finite.is_empty() {
        return Vec::new();
    }
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let k = n.min(m) as f64;
    // Any single forbidden pair outweighs every possible spread of allowed costs.
    let big = hi + (k + 1.0) * (hi - lo + 1.0);
    let fill = |v: f64| if allowed(v) { v } else { big };

    let transpose = n > m;
    let (rows, cols) = if transpose { (m, n) } else { (n, m) };
    let at = |r: usize, c: usize| {
        if transpose {
            fill(cost[c][r])
        } else {
            fill(cost[r][c])
        }
    };

    let col_of_row = solve(rows, cols, at);
    let mut pairs: Vec<(usize, usize)> = col_of_row
        .into_iter()
        .enumerate()
        .map(|(r, c)| if transpose { (c, r) } else { (r, c) })
        .filter(|&(r, c)| allowed(cost[r][c]))
        .collect();
    pairs.sort_unstable();
    pairs
}

/// Total cost of `pairs` under `cost`.
pub fn assignment_cost(cost: &[Vec<f64>], pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(r, c)| cost[r][c]).sum()
}

/// Dense solver for `rows ≤ cols`; returns the column of every row.
fn solve(rows: usize, cols: usize, a: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-based arrays; index 0 is the virtual root column/row.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut out = vec![0; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const INF: f64 = f64::INFINITY;

    #[test]
    fn worked_examples() {
        let c = vec![vec![1.0, 2.0], vec![3.0, 1.0]];
        assert_eq!(hungarian(&c), vec![(0, 0), (1, 1)]);

        let c = vec![
            vec![4.0, 1.0, 3.0],
            vec![2.0, 0.0, 5.0],
            vec![3.0, 2.0, 2.0],
        ];
        let a = hungarian(&c);
        assert_eq!(a, vec![(0, 1), (1, 0), (2, 2)]);
        assert_eq!(assignment_cost(&c, &a), 5.0);

        let z = vec![vec![0.0; 3]; 3];
        let a = hungarian(&z);
        assert_eq!(a.len(), 3);
        assert_eq!(assignment_cost(&z, &a), 0.0);
    }

    #[test]
    fn rectangular_and_forbidden() {
        let c = vec![vec![5.0], vec![1.0], vec![3.0]];
        assert_eq!(hungarian(&c), vec![(1, 0)]);

        let c = vec![vec![INF, 1.0], vec![INF, 2.0]];
        let a = hungarian(&c);
        assert_eq!(a, vec![(0, 1)]);

        // Maximal cardinality wins over a cheaper single pair.
        let c = vec![vec![0.0, 10.0], vec![1.0, INF]];
        assert_eq!(hungarian(&c), vec![(0, 1), (1, 0)]);

        assert!(hungarian(&[vec![INF, INF]]).is_empty());
        assert!(hungarian(&[]).is_empty());
    }
}
