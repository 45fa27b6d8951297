//! Row pairing between a baseline sheet and a candidate sheet.

use pathfinding::kuhn_munkres::kuhn_munkres_min;
use pathfinding::matrix::Matrix;

/// Pairings with more differing cells than this are not modifications.
pub const MAX_CHANGED_CELLS: usize = 2;

/// Above this many row pairs the optimal assignment gives way to a greedy
/// nearest match.
pub const OPTIMAL_PAIR_LIMIT: usize = 200 * 200;

/// Number of differing cells over the shared columns.
pub fn row_distance(a: &[String], b: &[String], shared: &[(usize, usize)]) -> usize {
    shared.iter().filter(|(i, j)| a[*i] != b[*j]).count()
}

/// Cost used for assignment: every pairing beyond the threshold is as bad as
/// leaving both rows unpaired, so the optimizer only trades between pairings
/// that would be accepted.
pub fn capped_cost(d: usize) -> i64 {
    d.min(MAX_CHANGED_CELLS + 1) as i64
}

/// Pairs baseline rows with candidate rows, minimizing the total capped
/// distance. Returns `(baseline_row, candidate_row, distance)` triples
/// sorted by baseline row, including pairings over the threshold.
pub fn align(distances: &[Vec<usize>]) -> Vec<(usize, usize, usize)> {
    let n = distances.len();
    let m = distances.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Vec::new();
    }
    if n * m > OPTIMAL_PAIR_LIMIT {
        return greedy(distances);
    }
    // Square matrix; padding rows and columns cost the same as a rejected
    // pairing.
    let size = n.max(m);
    let pad = capped_cost(MAX_CHANGED_CELLS + 1);
    let weights = Matrix::from_fn(size, size, |(i, j)| {
        if i < n && j < m {
            capped_cost(distances[i][j])
        } else {
            pad
        }
    });
    let (_, assignment) = kuhn_munkres_min(&weights);
    assignment
        .into_iter()
        .enumerate()
        .filter(|&(i, j)| i < n && j < m)
        .map(|(i, j)| (i, j, distances[i][j]))
        .collect()
}

/// Accepts the closest acceptable pairs first; ties go to the lower row
/// indices.
pub fn greedy(distances: &[Vec<usize>]) -> Vec<(usize, usize, usize)> {
    let m = distances.first().map_or(0, Vec::len);
    let mut candidates: Vec<(usize, usize, usize)> = Vec::new();
    for (i, row) in distances.iter().enumerate() {
        for (j, &d) in row.iter().enumerate() {
            if d <= MAX_CHANGED_CELLS {
                candidates.push((d, i, j));
            }
        }
    }
    candidates.sort_unstable();
    let mut used_b = vec![false; distances.len()];
    let mut used_c = vec![false; m];
    let mut out = Vec::new();
    for (d, i, j) in candidates {
        if !used_b[i] && !used_c[j] {
            used_b[i] = true;
            used_c[j] = true;
            out.push((i, j, d));
        }
    }
    out.sort_unstable();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn total(pairs: &[(usize, usize, usize)], n: usize, m: usize) -> i64 {
        let paired: i64 = pairs.iter().map(|p| capped_cost(p.2)).sum();
        let pad = capped_cost(MAX_CHANGED_CELLS + 1);
        paired + pad * (n.max(m) - pairs.len()) as i64
    }

    /// Exhaustive minimum over all partial matchings.
    fn brute_force(d: &[Vec<usize>]) -> i64 {
        fn go(d: &[Vec<usize>], i: usize, used: &mut Vec<bool>, acc: i64, best: &mut i64) {
            if i == d.len() {
                let m = used.len();
                let paired = used.iter().filter(|u| **u).count();
                let pad = capped_cost(MAX_CHANGED_CELLS + 1) * (d.len().max(m) - paired) as i64;
                *best = (*best).min(acc + pad);
                return;
            }
            // leave row i unpaired
            go(d, i + 1, used, acc, best);
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    go(d, i + 1, used, acc + capped_cost(d[i][j]), best);
                    used[j] = false;
                }
            }
        }
        let mut best = i64::MAX;
        go(d, 0, &mut vec![false; d[0].len()], 0, &mut best);
        best
    }

    #[test]
    fn prefers_exact_match_over_cheaper_total_of_bad_pairings() {
        // Uncapped, pairing (0,1)+(1,0) costs 11 against 20 for the diagonal.
        let d = vec![vec![0, 10], vec![1, 20]];
        let pairs = align(&d);
        assert!(pairs.contains(&(0, 0, 0)));
    }

    #[test]
    fn rectangular_and_empty() {
        assert!(align(&[]).is_empty());
        let d = vec![vec![5, 0, 7]];
        assert_eq!(align(&d), vec![(0, 1, 0)]);
        let d = vec![vec![4], vec![1], vec![0]];
        assert_eq!(align(&d), vec![(2, 0, 0)]);
    }

    #[test]
    fn greedy_takes_nearest_first() {
        let d = vec![vec![2, 1], vec![0, 3]];
        assert_eq!(greedy(&d), vec![(0, 1, 1), (1, 0, 0)]);
        let d = vec![vec![3, 4]];
        assert!(greedy(&d).is_empty());
    }

    proptest! {
        #[test]
        fn assignment_is_optimal(n in 1usize..6, m in 1usize..6, seed in proptest::collection::vec(0usize..6, 36)) {
            let d: Vec<Vec<usize>> = (0..n).map(|i| (0..m).map(|j| seed[i * 6 + j]).collect()).collect();
            let pairs = align(&d);
            prop_assert_eq!(total(&pairs, n, m), brute_force(&d));
            let mut bs: Vec<usize> = pairs.iter().map(|p| p.0).collect();
            let mut cs: Vec<usize> = pairs.iter().map(|p| p.1).collect();
            bs.dedup();
            cs.sort_unstable();
            cs.dedup();
            prop_assert_eq!(bs.len(), pairs.len());
            prop_assert_eq!(cs.len(), pairs.len());
        }
    }
}
