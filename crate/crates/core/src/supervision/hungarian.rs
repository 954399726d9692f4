//! Rectangular linear assignment by shortest augmenting paths with dual
//! potentials (the Kuhn-Munkres/Jonker-Volgenant formulation), `O(M^2 N)`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Injective map from rows (label entries) to columns (predictions).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assignment {
    /// `pairs[i]` is the column matched to row `i`.
    pub pairs: Vec<usize>,
    /// Sum of the matched entries, accumulated in row order.
    pub total_cost: f64,
}

impl Assignment {
    /// Matched column of every row, plus `None` for unmatched columns.
    pub fn row_of_column(&self, cols: usize) -> Vec<Option<usize>> {
        let mut out = vec![None; cols];
        for (r, &c) in self.pairs.iter().enumerate() {
            out[c] = Some(r);
        }
        out
    }
}

/// Minimum-cost assignment of every row of an `M x N` matrix (`M <= N`) to a
/// distinct column.
///
/// Rows are inserted in index order; each insertion grows a shortest-path
/// tree over columns scanned in increasing index, taking the first column
/// with the strictly smallest reduced cost. Equal-cost optima are therefore
/// resolved deterministically toward lower column indices in scan order.
pub fn hungarian(cost: &[Vec<f64>]) -> Result<Assignment> {
    let m = cost.len();
    if m == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            total_cost: 0.0,
        });
    }
    let n = cost[0].len();
    if cost.iter().any(|r| r.len() != n) {
        return Err(Error::Shape("ragged cost matrix".into()));
    }
    if m > n {
        return Err(Error::Contract(format!(
            "cannot assign {m} rows injectively into {n} columns"
        )));
    }
    if cost.iter().flatten().any(|c| !c.is_finite()) {
        return Err(Error::Numeric("non-finite matching cost".into()));
    }

    // 1-based with a virtual column 0 holding the row being inserted.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=m {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
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
        // unwind the augmenting path
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = vec![0; m];
    for j in 1..=n {
        if owner[j] != 0 {
            pairs[owner[j] - 1] = j - 1;
        }
    }
    let total_cost = pairs.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { pairs, total_cost })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_zero_is_identity() {
        let c = vec![vec![0., 1., 1.], vec![1., 0., 1.], vec![1., 1., 0.]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![0, 1, 2]);
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn three_by_three_example() {
        // brute force over the 6 permutations gives 1 + 2 + 2 = 5
        let c = vec![vec![4., 1., 3.], vec![2., 0., 5.], vec![3., 2., 2.]];
        let a = hungarian(&c).unwrap();
        assert_eq!(a.pairs, vec![1, 0, 2]);
        assert_eq!(a.total_cost, 5.0);
    }

    #[test]
    fn rectangular_and_empty() {
        let c = vec![vec![5., 1., 4., 0.5]];
        assert_eq!(hungarian(&c).unwrap().pairs, vec![3]);
        assert_eq!(hungarian(&[]).unwrap().pairs, Vec::<usize>::new());
    }

    #[test]
    fn too_many_rows_is_a_contract_error() {
        let c = vec![vec![1.], vec![2.]];
        assert!(matches!(hungarian(&c), Err(Error::Contract(_))));
    }

    #[test]
    fn ties_resolve_to_lower_columns() {
        let c = vec![vec![1.0; 4]; 2];
        assert_eq!(hungarian(&c).unwrap().pairs, vec![0, 1]);
    }

    #[test]
    fn non_finite_is_rejected() {
        let c = vec![vec![f64::NAN, 1.0]];
        assert!(matches!(hungarian(&c), Err(Error::Numeric(_))));
    }
}
