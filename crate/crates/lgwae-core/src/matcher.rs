//! Optimal bipartite assignment between predicted and label centerlines.
//!
//! The solver is the O(n³) shortest-augmenting-path formulation with dual
//! potentials (Jonker-Volgenant style). Problem sizes here are bounded by
//! the query count, so no approximation is needed.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::graph::LaneGraph;
use crate::math;

#[derive(Debug, Clone, PartialEq)]
pub enum MatchError {
    /// Cost matrices must be non-empty rectangles.
    EmptyCostMatrix,
    /// Ragged cost rows.
    RaggedRows { row: usize, expected: usize, got: usize },
    /// NaN or infinite entry.
    NonFiniteCost { row: usize, col: usize },
    /// Graphs with different control-point counts cannot be matched.
    ControlPointMismatch { pred: usize, label: usize },
}

impl fmt::Display for MatchError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MatchError::EmptyCostMatrix => write!(f, "cost matrix must have at least one row and column"),
            MatchError::RaggedRows { row, expected, got } => {
                write!(f, "cost row {row} has {got} entries, expected {expected}")
            }
            MatchError::NonFiniteCost { row, col } => {
                write!(f, "cost[{row}][{col}] is not finite")
            }
            MatchError::ControlPointMismatch { pred, label } => {
                write!(f, "pred uses {pred} control points, label uses {label}")
            }
        }
    }
}

impl core::error::Error for MatchError {}

/// Result of a minimum-cost maximum matching. `pairs` is a partial
/// injection: every index appears exactly once across `pairs` and the
/// corresponding unmatched list.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_label: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn empty(n_pred: usize, n_label: usize) -> Self {
        Assignment {
            pairs: Vec::new(),
            unmatched_pred: (0..n_pred).collect(),
            unmatched_label: (0..n_label).collect(),
            total_cost: 0.0,
        }
    }

    /// Label index matched to a given pred index, if any.
    pub fn label_for_pred(&self, pred: usize) -> Option<usize> {
        self.pairs.iter().find(|(p, _)| *p == pred).map(|(_, l)| *l)
    }
}

/// Minimum-cost assignment of size `min(n, m)` over an `n x m` cost matrix.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment, MatchError> {
    let n = cost.len();
    if n == 0 || cost[0].is_empty() {
        return Err(MatchError::EmptyCostMatrix);
    }
    let m = cost[0].len();
    for (i, row) in cost.iter().enumerate() {
        if row.len() != m {
            return Err(MatchError::RaggedRows {
                row: i,
                expected: m,
                got: row.len(),
            });
        }
        for (j, v) in row.iter().enumerate() {
            if !v.is_finite() {
                return Err(MatchError::NonFiniteCost { row: i, col: j });
            }
        }
    }

    // The augmenting-path loop assigns every row, so orient the problem
    // with rows <= cols and swap the roles back afterwards.
    let flipped = n > m;
    let (rows, cols) = if flipped { (m, n) } else { (n, m) };
    let at = |r: usize, c: usize| -> f64 {
        if flipped {
            cost[c][r]
        } else {
            cost[r][c]
        }
    };

    let mut row_pot = vec![0.0f64; rows];
    let mut col_pot = vec![0.0f64; cols + 1];
    // owner row of each column; index `cols` is the virtual root column
    let mut owner: Vec<Option<usize>> = vec![None; cols + 1];

    for cur in 0..rows {
        let mut col = cols;
        owner[col] = Some(cur);
        let mut min_to = vec![f64::INFINITY; cols + 1];
        let mut prev: Vec<usize> = vec![usize::MAX; cols + 1];
        let mut in_tree = vec![false; cols + 1];

        while let Some(row) = owner[col] {
            in_tree[col] = true;
            let mut delta = f64::INFINITY;
            let mut next_col = cols;
            for j in 0..cols {
                if in_tree[j] {
                    continue;
                }
                let reduced = at(row, j) - row_pot[row] - col_pot[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    prev[j] = col;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    next_col = j;
                }
            }
            for j in 0..=cols {
                if in_tree[j] {
                    if let Some(r) = owner[j] {
                        row_pot[r] += delta;
                    }
                    col_pot[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            col = next_col;
        }
        while col != cols {
            let pc = prev[col];
            owner[col] = owner[pc];
            col = pc;
        }
    }

    let mut pairs = Vec::with_capacity(rows);
    for j in 0..cols {
        if let Some(r) = owner[j] {
            let (p, l) = if flipped { (j, r) } else { (r, j) };
            pairs.push((p, l));
        }
    }
    pairs.sort_unstable();
    let total_cost = pairs.iter().map(|&(p, l)| cost[p][l]).sum();
    let mut pred_used = vec![false; n];
    let mut label_used = vec![false; m];
    for &(p, l) in &pairs {
        pred_used[p] = true;
        label_used[l] = true;
    }
    Ok(Assignment {
        pairs,
        unmatched_pred: (0..n).filter(|&i| !pred_used[i]).collect(),
        unmatched_label: (0..m).filter(|&j| !label_used[j]).collect(),
        total_cost,
    })
}

/// Matching cost between two centerline sets: mean L1 distance over the
/// flattened control points minus a small bonus for confident predictions.
pub fn centerline_cost_matrix(
    pred: &LaneGraph,
    label: &LaneGraph,
    w_exist: f64,
) -> Result<Vec<Vec<f64>>, MatchError> {
    let pb = pred.centerlines[0].control_points.len();
    let lb = label.centerlines[0].control_points.len();
    if pb != lb {
        return Err(MatchError::ControlPointMismatch { pred: pb, label: lb });
    }
    let denom = (2 * pb) as f64;
    let mut cost = Vec::with_capacity(pred.len());
    for p in &pred.centerlines {
        let mut row = Vec::with_capacity(label.len());
        for l in &label.centerlines {
            let mut acc = 0.0;
            for (pp, lp) in p.control_points.iter().zip(&l.control_points) {
                acc += math::abs(pp[0] - lp[0]) + math::abs(pp[1] - lp[1]);
            }
            row.push(acc / denom - w_exist * p.existence);
        }
        cost.push(row);
    }
    Ok(cost)
}

/// Hungarian assignment between two lane graphs using
/// [`centerline_cost_matrix`]. Either side being empty yields a valid empty
/// assignment.
pub fn match_centerlines(
    pred: &LaneGraph,
    label: &LaneGraph,
    w_exist: f64,
) -> Result<Assignment, MatchError> {
    if pred.is_empty() || label.is_empty() {
        return Ok(Assignment::empty(pred.len(), label.len()));
    }
    let cost = centerline_cost_matrix(pred, label, w_exist)?;
    hungarian(&cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{BevExtent, Centerline, IncidenceMatrix};
    use rand::Rng;

    #[test]
    fn diagonal_optimum() {
        let a = hungarian(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1)]);
        assert_eq!(a.total_cost, 2.0);
        assert!(a.unmatched_pred.is_empty());
        assert!(a.unmatched_label.is_empty());
    }

    #[test]
    fn wide_matrix_leaves_labels_unmatched() {
        let a = hungarian(&[vec![5.0, 1.0, 9.0]]).unwrap();
        assert_eq!(a.pairs, vec![(0, 1)]);
        assert_eq!(a.unmatched_label, vec![0, 2]);
        assert!(a.unmatched_pred.is_empty());
    }

    #[test]
    fn rejects_nan() {
        let err = hungarian(&[vec![1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, MatchError::NonFiniteCost { row: 0, col: 1 }));
    }

    fn brute_force_cost(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let m = cost[0].len();
        // enumerate injections of the smaller side into the larger
        fn recurse(
            cost: &[Vec<f64>],
            flip: bool,
            used: &mut Vec<bool>,
            row: usize,
            rows: usize,
            acc: f64,
            best: &mut f64,
        ) {
            if row == rows {
                if acc < *best {
                    *best = acc;
                }
                return;
            }
            for j in 0..used.len() {
                if !used[j] {
                    used[j] = true;
                    let c = if flip { cost[j][row] } else { cost[row][j] };
                    recurse(cost, flip, used, row + 1, rows, acc + c, best);
                    used[j] = false;
                }
            }
        }
        let flip = n > m;
        let (rows, cols) = if flip { (m, n) } else { (n, m) };
        let mut best = f64::INFINITY;
        recurse(cost, flip, &mut vec![false; cols], 0, rows, 0.0, &mut best);
        best
    }

    #[test]
    fn matches_brute_force_on_random_matrices() {
        let mut rng = crate::rng::derive_rng(3, 77, 0);
        for case in 0..300 {
            let n = rng.gen_range(1..=5);
            let m = rng.gen_range(1..=5);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-4.0..6.0)).collect())
                .collect();
            let got = hungarian(&cost).unwrap();
            let want = brute_force_cost(&cost);
            assert!(
                (got.total_cost - want).abs() < 1e-9,
                "case {case}: solver {} vs brute force {want} on {cost:?}",
                got.total_cost
            );
            assert_eq!(got.pairs.len(), n.min(m));
        }
    }

    #[test]
    fn transpose_preserves_cost() {
        let mut rng = crate::rng::derive_rng(3, 78, 0);
        for _ in 0..50 {
            let n = rng.gen_range(1..=6);
            let m = rng.gen_range(1..=6);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..m).map(|_| rng.gen_range(-2.0..8.0)).collect())
                .collect();
            let t: Vec<Vec<f64>> = (0..m)
                .map(|j| (0..n).map(|i| cost[i][j]).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let b = hungarian(&t).unwrap();
            assert!((a.total_cost - b.total_cost).abs() < 1e-9);
        }
    }

    #[test]
    fn constant_shift_keeps_argmin() {
        let mut rng = crate::rng::derive_rng(3, 79, 0);
        for _ in 0..50 {
            let n = rng.gen_range(2..=5);
            let cost: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..n).map(|_| rng.gen_range(0.0..5.0)).collect())
                .collect();
            let shifted: Vec<Vec<f64>> = cost
                .iter()
                .map(|r| r.iter().map(|v| v + 3.25).collect())
                .collect();
            let a = hungarian(&cost).unwrap();
            let b = hungarian(&shifted).unwrap();
            assert_eq!(a.pairs, b.pairs);
        }
    }

    fn toy_graph(points: &[[f64; 2]]) -> LaneGraph {
        let cls: Vec<Centerline> = points
            .iter()
            .map(|p| {
                Centerline::new(vec![*p, [p[0] + 0.05, p[1] + 0.05], [p[0] + 0.1, p[1] + 0.1]], 1.0)
                    .unwrap()
            })
            .collect();
        let n = cls.len();
        LaneGraph::new(cls, IncidenceMatrix::empty(n), BevExtent::default_bev())
    }

    #[test]
    fn identical_graphs_match_identity_at_zero_weight() {
        let g = toy_graph(&[[0.1, 0.1], [0.4, 0.4], [0.7, 0.2]]);
        let a = match_centerlines(&g, &g, 0.0).unwrap();
        assert_eq!(a.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(a.total_cost.abs() < 1e-12);
    }

    #[test]
    fn permuted_graph_recovers_inverse_permutation() {
        let g = toy_graph(&[[0.1, 0.1], [0.4, 0.4], [0.7, 0.2], [0.2, 0.8]]);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = g.clone();
        permuted.centerlines = perm.iter().map(|&i| g.centerlines[i].clone()).collect();
        let a = match_centerlines(&permuted, &g, 0.0).unwrap();
        for (p, l) in a.pairs {
            assert_eq!(perm[p], l);
        }
    }

    #[test]
    fn self_match_under_permutation_costs_zero() {
        let mut rng = crate::rng::derive_rng(3, 80, 0);
        for _ in 0..20 {
            let n = rng.gen_range(1..=6);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.gen_range(0.0..0.9), rng.gen_range(0.0..0.9)])
                .collect();
            let g = toy_graph(&pts);
            let a = match_centerlines(&g, &g, 0.0).unwrap();
            assert!(a.total_cost.abs() < 1e-12);
        }
    }

    #[test]
    fn empty_sides_are_valid() {
        let g = toy_graph(&[[0.1, 0.1]]);
        let empty = LaneGraph::new(
            Vec::new(),
            IncidenceMatrix::empty(0),
            BevExtent::default_bev(),
        );
        let a = match_centerlines(&empty, &g, 0.5).unwrap();
        assert!(a.pairs.is_empty());
        assert_eq!(a.unmatched_label, vec![0]);
        let b = match_centerlines(&g, &empty, 0.5).unwrap();
        assert_eq!(b.unmatched_pred, vec![0]);
    }
}
