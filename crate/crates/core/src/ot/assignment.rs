use super::CostMatrix;
use crate::error::Result;

/// Largest side length solved by enumerating permutations.
const BRUTE_FORCE_MAX: usize = 8;

/// A perfect matching from source to target positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// `perm[i]` is the target matched to source `i`.
    pub perm: Vec<usize>,
    /// Average matched cost `(1/L) Σ C[i, perm[i]]`.
    pub cost: f64,
}

impl Assignment {
    fn from_perm(perm: Vec<usize>, cost: &CostMatrix) -> Self {
        let cost = average_cost(&perm, cost);
        Self { perm, cost }
    }
}

fn average_cost(perm: &[usize], cost: &CostMatrix) -> f64 {
    let c = cost.values();
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
    total / perm.len() as f64
}

/// Exact optimal transport under uniform marginals.
///
/// With equal uniform masses the optimum is attained at a permutation
/// matrix, so this is a minimum-cost perfect matching. Small problems are
/// enumerated, larger ones go through [`hungarian`].
pub fn exact_ot_uniform(cost: &CostMatrix) -> Result<Assignment> {
    if cost.side_len() <= BRUTE_FORCE_MAX {
        brute_force_assignment(cost)
    } else {
        hungarian(cost)
    }
}

/// Enumerates every permutation. Exponential; meant for `L <= 8`.
pub fn brute_force_assignment(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.side_len();
    let c = cost.values();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best_perm = perm.clone();
    let mut best = f64::INFINITY;

    // Heap's algorithm, iterative form.
    let mut counters = vec![0usize; n];
    let mut eval = |p: &[usize]| {
        let total: f64 = p.iter().enumerate().map(|(i, &j)| c[[i, j]]).sum();
        if total < best {
            best = total;
            best_perm.copy_from_slice(p);
        }
    };
    eval(&perm);
    let mut i = 0;
    while i < n {
        if counters[i] < i {
            if i % 2 == 0 {
                perm.swap(0, i);
            } else {
                perm.swap(counters[i], i);
            }
            eval(&perm);
            counters[i] += 1;
            i = 0;
        } else {
            counters[i] = 0;
            i += 1;
        }
    }
    Ok(Assignment::from_perm(best_perm, cost))
}

/// Shortest-augmenting-path Hungarian method with row/column potentials, O(L³).
pub fn hungarian(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.side_len();
    let c = cost.values();
    // 1-based arrays; index 0 is the virtual root column.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut matched_row = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for row in 1..=n {
        matched_row[0] = row;
        let mut col0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[col0] = true;
            let i0 = matched_row[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = c[[i0 - 1, j - 1]] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = col0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    col1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            col0 = col1;
            if matched_row[col0] == 0 {
                break;
            }
        }
        loop {
            let prev = way[col0];
            matched_row[col0] = matched_row[prev];
            col0 = prev;
            if col0 == 0 {
                break;
            }
        }
    }

    let mut perm = vec![0usize; n];
    for j in 1..=n {
        perm[matched_row[j] - 1] = j - 1;
    }
    Ok(Assignment::from_perm(perm, cost))
}
