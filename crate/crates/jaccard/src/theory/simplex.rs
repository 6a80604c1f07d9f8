//! Dense two-phase simplex for equality-form problems:
//! minimize `c' x` subject to `A x = b`, `x >= 0`.
//!
//! Bland's rule picks the lowest-index entering column with a negative
//! reduced cost and breaks ratio ties toward the lowest basic variable
//! index, which rules out cycling. Problem sizes here are tiny (the convex
//! closure LP has at most 9 rows and 256 columns), so a full tableau is
//! fine.

use std::fmt;

const EPS: f64 = 1e-10;
const MAX_PIVOTS: usize = 100_000;

#[derive(Debug, Clone, PartialEq)]
pub enum SimplexError {
    Infeasible,
    Unbounded,
    Stalled,
    BadShape { detail: String },
}

impl fmt::Display for SimplexError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimplexError::Infeasible => write!(f, "no feasible point"),
            SimplexError::Unbounded => write!(f, "objective unbounded below"),
            SimplexError::Stalled => write!(f, "pivot limit exceeded"),
            SimplexError::BadShape { detail } => write!(f, "malformed problem: {detail}"),
        }
    }
}

impl std::error::Error for SimplexError {}

#[derive(Debug, Clone)]
pub struct SimplexSolution {
    pub objective: f64,
    pub x: Vec<f64>,
}

struct Tableau {
    rows: usize,
    cols: usize,
    /// rows x (cols + 1); the last column is the right-hand side.
    a: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn at(&self, r: usize, c: usize) -> f64 {
        self.a[r * (self.cols + 1) + c]
    }

    fn rhs(&self, r: usize) -> f64 {
        self.at(r, self.cols)
    }

    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.cols + 1;
        let scale = self.at(row, col);
        for c in 0..width {
            self.a[row * width + c] /= scale;
        }
        for r in 0..self.rows {
            if r == row {
                continue;
            }
            let factor = self.at(r, col);
            if factor == 0.0 {
                continue;
            }
            for c in 0..width {
                self.a[r * width + c] -= factor * self.a[row * width + c];
            }
        }
        self.basis[row] = col;
    }

    /// One simplex phase on the given costs. Returns the objective value.
    fn optimize(&mut self, costs: &[f64], allowed: &[bool]) -> Result<f64, SimplexError> {
        for _ in 0..MAX_PIVOTS {
            // Reduced costs under the current basis.
            let mut entering = None;
            'cols: for col in 0..self.cols {
                if !allowed[col] || self.basis.contains(&col) {
                    continue;
                }
                let mut reduced = costs[col];
                for (row, &basic) in self.basis.iter().enumerate() {
                    reduced -= costs[basic] * self.at(row, col);
                }
                if reduced < -EPS {
                    entering = Some(col);
                    break 'cols; // Bland: lowest index.
                }
            }
            let Some(col) = entering else {
                let value = self
                    .basis
                    .iter()
                    .enumerate()
                    .map(|(row, &basic)| costs[basic] * self.rhs(row))
                    .sum();
                return Ok(value);
            };
            // Ratio test; ties go to the lowest basic variable index.
            let mut leaving: Option<(usize, f64)> = None;
            for row in 0..self.rows {
                let coeff = self.at(row, col);
                if coeff > EPS {
                    let ratio = self.rhs(row) / coeff;
                    let better = match leaving {
                        None => true,
                        Some((best_row, best_ratio)) => {
                            ratio < best_ratio - EPS
                                || (ratio < best_ratio + EPS
                                    && self.basis[row] < self.basis[best_row])
                        }
                    };
                    if better {
                        leaving = Some((row, ratio));
                    }
                }
            }
            let Some((row, _)) = leaving else {
                return Err(SimplexError::Unbounded);
            };
            self.pivot(row, col);
        }
        Err(SimplexError::Stalled)
    }
}

/// Solves `min c' x` s.t. `A x = b`, `x >= 0` with a two-phase dense
/// simplex. `a` holds the rows of A.
pub fn solve_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> Result<SimplexSolution, SimplexError> {
    let rows = a.len();
    let n = c.len();
    if b.len() != rows {
        return Err(SimplexError::BadShape {
            detail: format!("{} rows vs {} rhs entries", rows, b.len()),
        });
    }
    for (i, row) in a.iter().enumerate() {
        if row.len() != n {
            return Err(SimplexError::BadShape {
                detail: format!("row {i} has {} entries, expected {n}", row.len()),
            });
        }
    }

    // Columns: n structural + rows artificial.
    let cols = n + rows;
    let width = cols + 1;
    let mut data = vec![0.0f64; rows * width];
    for (i, row) in a.iter().enumerate() {
        let flip = if b[i] < 0.0 { -1.0 } else { 1.0 };
        for (j, &v) in row.iter().enumerate() {
            data[i * width + j] = flip * v;
        }
        data[i * width + n + i] = 1.0;
        data[i * width + cols] = flip * b[i];
    }
    let mut tableau =
        Tableau { rows, cols, a: data, basis: (n..n + rows).collect() };

    // Phase 1: minimize the artificial sum.
    let mut phase1_costs = vec![0.0f64; cols];
    for cost in phase1_costs.iter_mut().skip(n) {
        *cost = 1.0;
    }
    let all = vec![true; cols];
    let infeasibility = tableau.optimize(&phase1_costs, &all)?;
    if infeasibility > 1e-7 {
        return Err(SimplexError::Infeasible);
    }
    // Drive remaining artificials out of the basis where possible.
    for row in 0..rows {
        if tableau.basis[row] >= n {
            if let Some(col) = (0..n).find(|&c| tableau.at(row, c).abs() > EPS) {
                tableau.pivot(row, col);
            }
        }
    }

    // Phase 2 on the structural columns only.
    let mut phase2_costs = vec![0.0f64; cols];
    phase2_costs[..n].copy_from_slice(c);
    let mut allowed = vec![true; cols];
    for slot in allowed.iter_mut().skip(n) {
        *slot = false;
    }
    let objective = tableau.optimize(&phase2_costs, &allowed)?;

    let mut x = vec![0.0f64; n];
    for (row, &basic) in tableau.basis.iter().enumerate() {
        if basic < n {
            x[basic] = tableau.rhs(row);
        }
    }
    Ok(SimplexSolution { objective, x })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn solves_simple_transport() {
        // min x0 + 2 x1 s.t. x0 + x1 = 1 -> x = (1, 0), objective 1.
        let sol = solve_min(&[1.0, 2.0], &[vec![1.0, 1.0]], &[1.0]).unwrap();
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[0], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn respects_equality_structure() {
        // min x0 s.t. x0 - x1 = 0, x0 + x1 = 2 -> x = (1, 1).
        let sol =
            solve_min(&[1.0, 0.0], &[vec![1.0, -1.0], vec![1.0, 1.0]], &[0.0, 2.0]).unwrap();
        assert_abs_diff_eq!(sol.objective, 1.0, epsilon = 1e-9);
        assert_abs_diff_eq!(sol.x[1], 1.0, epsilon = 1e-9);
    }

    #[test]
    fn detects_infeasibility() {
        // x0 = -1 with x0 >= 0 is infeasible.
        let err = solve_min(&[1.0], &[vec![1.0]], &[-1.0]).unwrap_err();
        assert_eq!(err, SimplexError::Infeasible);
    }

    #[test]
    fn handles_degenerate_ties_with_bland() {
        // Degenerate constraints sharing a corner; must terminate.
        let a = vec![
            vec![1.0, 1.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0, 1.0],
        ];
        let sol = solve_min(&[-1.0, -2.0, 0.0, 0.0], &a, &[1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(sol.objective, -2.0, epsilon = 1e-9);
    }

    #[test]
    fn matches_brute_force_on_random_closure_problems() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        // Convex-closure-shaped LPs with p = 2: 3 rows, 4 columns. The
        // oracle enumerates all basis subsets of size <= 3.
        for _ in 0..200 {
            let values: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
            let x0: f64 = rng.gen();
            let x1: f64 = rng.gen();
            let a = vec![
                vec![1.0, 1.0, 1.0, 1.0],
                vec![0.0, 1.0, 0.0, 1.0], // bit 0 of vertex index
                vec![0.0, 0.0, 1.0, 1.0], // bit 1
            ];
            let b = vec![1.0, x0, x1];
            let sol = solve_min(&values, &a, &b).unwrap();
            let oracle = brute_force_min(&values, &a, &b);
            assert_abs_diff_eq!(sol.objective, oracle, epsilon = 1e-8);
        }
    }

    /// Enumerates all column subsets of size <= rows, solving each square
    /// system by Gaussian elimination; the minimum feasible objective is the
    /// LP optimum (a basic optimal solution always exists).
    fn brute_force_min(c: &[f64], a: &[Vec<f64>], b: &[f64]) -> f64 {
        let n = c.len();
        let m = a.len();
        let mut best = f64::INFINITY;
        let mut indices: Vec<usize> = Vec::new();
        enumerate_subsets(n, m, 0, &mut indices, &mut |subset| {
            if let Some(alpha) = solve_subset(a, b, subset) {
                if alpha.iter().all(|&v| v >= -1e-9) {
                    let obj: f64 =
                        subset.iter().zip(&alpha).map(|(&j, &v)| c[j] * v).sum();
                    if obj < best {
                        best = obj;
                    }
                }
            }
        });
        best
    }

    fn enumerate_subsets(
        n: usize,
        max_size: usize,
        start: usize,
        current: &mut Vec<usize>,
        visit: &mut impl FnMut(&[usize]),
    ) {
        if !current.is_empty() {
            visit(current);
        }
        if current.len() == max_size {
            return;
        }
        for j in start..n {
            current.push(j);
            enumerate_subsets(n, max_size, j + 1, current, visit);
            current.pop();
        }
    }

    /// Least-squares-free exact solve of `A[:, subset] alpha = b` when the
    /// subset is square-solvable; returns None on singular systems or
    /// over/under-determined mismatches.
    fn solve_subset(a: &[Vec<f64>], b: &[f64], subset: &[usize]) -> Option<Vec<f64>> {
        let m = a.len();
        let k = subset.len();
        // Build the m x k system and solve by elimination on the augmented
        // matrix; require consistency for all m rows.
        let mut aug: Vec<Vec<f64>> = (0..m)
            .map(|i| {
                let mut row: Vec<f64> = subset.iter().map(|&j| a[i][j]).collect();
                row.push(b[i]);
                row
            })
            .collect();
        let mut pivot_row = 0usize;
        for col in 0..k {
            let Some(best) = (pivot_row..m)
                .filter(|&r| aug[r][col].abs() > 1e-12)
                .max_by(|&x, &y| aug[x][col].abs().partial_cmp(&aug[y][col].abs()).unwrap())
            else {
                continue;
            };
            aug.swap(pivot_row, best);
            let scale = aug[pivot_row][col];
            for c in col..=k {
                aug[pivot_row][c] /= scale;
            }
            for r in 0..m {
                if r != pivot_row && aug[r][col].abs() > 0.0 {
                    let f = aug[r][col];
                    for c in col..=k {
                        aug[r][c] -= f * aug[pivot_row][c];
                    }
                }
            }
            pivot_row += 1;
            if pivot_row == m {
                break;
            }
        }
        // Inconsistent rows mean no solution.
        for row in aug.iter().skip(pivot_row) {
            if row[..k].iter().all(|&v| v.abs() < 1e-9) && row[k].abs() > 1e-9 {
                return None;
            }
        }
        // Under-determined subsets are skipped (a larger subset covers them).
        let mut alpha = vec![0.0f64; k];
        let mut seen = vec![false; k];
        for (r, row) in aug.iter().enumerate().take(pivot_row) {
            let mut lead = None;
            for (c, &v) in row[..k].iter().enumerate() {
                if v.abs() > 1e-9 {
                    lead = Some(c);
                    break;
                }
            }
            let Some(c) = lead else { continue };
            if row[..k].iter().enumerate().any(|(cc, &v)| cc != c && v.abs() > 1e-9) {
                return None;
            }
            alpha[c] = row[k];
            seen[c] = true;
            let _ = r;
        }
        if seen.iter().all(|&s| s) {
            Some(alpha)
        } else {
            None
        }
    }
}
