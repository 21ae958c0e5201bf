//! Linear assignment: Hungarian algorithm and exhaustive search.
//!
//! Both solvers minimise the summed cost of a matching between the rows
//! and columns of a (possibly rectangular) cost matrix, matching
//! `min(rows, cols)` pairs. Results are `row -> Option<col>`.

/// Minimum-cost matching via the shortest-augmenting-path form of the
/// Hungarian algorithm, `O(n²m)` for `n ≤ m`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = hungarian(&transposed);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    // 1-based potentials; column 0 is the virtual start
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
    let mut rows = vec![None; n];
    for j in 1..=m {
        if owner[j] != 0 {
            rows[owner[j] - 1] = Some(j - 1);
        }
    }
    rows
}

/// Minimum-cost matching by enumerating every injection of the smaller
/// side into the larger one. Ties keep the first matching found in
/// lexicographic order.
pub fn exhaustive(cost: &[Vec<f64>]) -> Vec<Option<usize>> {
    let n = cost.len();
    let m = cost.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return vec![None; n];
    }
    if n > m {
        let transposed: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        let cols = exhaustive(&transposed);
        let mut rows = vec![None; n];
        for (j, i) in cols.into_iter().enumerate() {
            if let Some(i) = i {
                rows[i] = Some(j);
            }
        }
        return rows;
    }
    let mut best = (f64::INFINITY, Vec::new());
    let mut current = Vec::with_capacity(n);
    let mut used = vec![false; m];
    fn rec(
        cost: &[Vec<f64>],
        current: &mut Vec<usize>,
        used: &mut [bool],
        best: &mut (f64, Vec<usize>),
    ) {
        let i = current.len();
        if i == cost.len() {
            let total = matching_cost(cost, current);
            if best.1.is_empty() || total < best.0 {
                *best = (total, current.clone());
            }
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                current.push(j);
                rec(cost, current, used, best);
                current.pop();
                used[j] = false;
            }
        }
    }
    rec(cost, &mut current, &mut used, &mut best);
    best.1.into_iter().map(Some).collect()
}

/// Sum of `cost[i][cols[i]]` in row order.
pub fn matching_cost(cost: &[Vec<f64>], cols: &[usize]) -> f64 {
    cols.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}

/// Sum over matched rows of an optional matching.
pub fn partial_cost(cost: &[Vec<f64>], rows: &[Option<usize>]) -> f64 {
    rows.iter()
        .enumerate()
        .filter_map(|(i, j)| j.map(|j| cost[i][j]))
        .sum()
}
