//! Dense linear assignment solvers over `f64` costs.
//!
//! Both solvers take a row-major `n x n` cost matrix and return, for each
//! row, the column it is matched to.

/// Exact minimum-cost assignment (Hungarian method with row/column
/// potentials), O(n^3).
pub fn hungarian(costs: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(costs.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }

    let inf = f64::INFINITY;
    // 1-based with a virtual column 0, following the classic formulation
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|m| *m = inf);
        used.iter_mut().for_each(|u| *u = false);

        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let row = &costs[(i0 - 1) * n..i0 * n];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = row[j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
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

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        row_to_col[owner[j] - 1] = j - 1;
    }
    row_to_col
}

/// Forward auction with epsilon scaling.
///
/// The returned assignment costs at most `n * eps_final` more than the
/// optimum. Epsilon starts at a quarter of the largest cost and shrinks by
/// `SCALE` per phase.
pub fn auction(costs: &[f64], n: usize, eps_final: f64) -> Vec<usize> {
    const SCALE: f64 = 5.0;
    assert_eq!(costs.len(), n * n, "cost matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    if n == 1 {
        return vec![0];
    }
    let eps_final = eps_final.max(f64::MIN_POSITIVE);
    let max_cost = costs.iter().cloned().fold(0.0, f64::max);
    let mut eps = (max_cost / 4.0).max(eps_final);

    let mut prices = vec![0.0; n];
    let mut person_of = vec![usize::MAX; n];
    let mut object_of = vec![usize::MAX; n];
    let mut queue: Vec<usize> = Vec::with_capacity(n);

    loop {
        person_of.iter_mut().for_each(|p| *p = usize::MAX);
        object_of.iter_mut().for_each(|o| *o = usize::MAX);
        queue.clear();
        queue.extend((0..n).rev());

        while let Some(i) = queue.pop() {
            let row = &costs[i * n..(i + 1) * n];
            let (mut best, mut best_v, mut second_v) = (0usize, f64::INFINITY, f64::INFINITY);
            for (j, (&c, &p)) in row.iter().zip(&prices).enumerate() {
                let val = c + p;
                if val < best_v {
                    second_v = best_v;
                    best_v = val;
                    best = j;
                } else if val < second_v {
                    second_v = val;
                }
            }
            prices[best] += second_v - best_v + eps;
            let prev = person_of[best];
            if prev != usize::MAX {
                object_of[prev] = usize::MAX;
                queue.push(prev);
            }
            person_of[best] = i;
            object_of[i] = best;
        }

        if eps <= eps_final {
            break;
        }
        eps = (eps / SCALE).max(eps_final);
    }
    object_of
}

/// Total cost of an assignment.
pub fn assignment_cost(costs: &[f64], n: usize, row_to_col: &[usize]) -> f64 {
    row_to_col
        .iter()
        .enumerate()
        .map(|(i, &j)| costs[i * n + j])
        .sum()
}
