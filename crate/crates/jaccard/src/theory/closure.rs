//! Convex closure of a set function over the unit hypercube.
//!
//! The closure at `x` is the cheapest convex combination of vertex values
//! whose barycenter is `x`: minimize `sum_v alpha_v f(v)` subject to
//! `sum alpha_v = 1`, `sum alpha_v v = x`, `alpha >= 0`. Vertices are
//! indexed by bitmask with coordinate `i` stored in bit `i`.

use super::simplex::{solve_min, SimplexError};
use super::TheoryError;

/// Hard cap on the dimension: the LP enumerates all `2^p` vertices.
pub const MAX_CLOSURE_DIM: usize = 8;

/// Value of coordinate `i` of vertex `v`.
pub fn vertex_coordinate(v: usize, i: usize) -> f64 {
    ((v >> i) & 1) as f64
}

/// Evaluates the convex closure of the set function given by `values`
/// (indexed by vertex bitmask, length `2^p`) at `point` in `[0,1]^p`.
///
/// At an exact vertex the only feasible combination is the vertex itself,
/// so the set function's value is returned without solving the LP.
pub fn convex_closure(values: &[f64], point: &[f64]) -> Result<f64, TheoryError> {
    let p = point.len();
    if p == 0 || p > MAX_CLOSURE_DIM {
        return Err(TheoryError::UnsupportedDimension { p, max: MAX_CLOSURE_DIM });
    }
    let vertices = 1usize << p;
    if values.len() != vertices {
        return Err(TheoryError::ValueTableSize { expected: vertices, actual: values.len() });
    }
    for (index, &v) in point.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) {
            return Err(TheoryError::PointOutsideCube { index, value: v });
        }
    }

    if point.iter().all(|&v| v == 0.0 || v == 1.0) {
        let mut mask = 0usize;
        for (i, &v) in point.iter().enumerate() {
            if v == 1.0 {
                mask |= 1 << i;
            }
        }
        return Ok(values[mask]);
    }

    let mut a: Vec<Vec<f64>> = Vec::with_capacity(p + 1);
    a.push(vec![1.0; vertices]);
    for i in 0..p {
        a.push((0..vertices).map(|v| vertex_coordinate(v, i)).collect());
    }
    let mut b = Vec::with_capacity(p + 1);
    b.push(1.0);
    b.extend_from_slice(point);

    let solution = solve_min(values, &a, &b).map_err(TheoryError::Simplex)?;
    Ok(solution.objective)
}

impl From<SimplexError> for TheoryError {
    fn from(e: SimplexError) -> Self {
        TheoryError::Simplex(e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};

    #[test]
    fn vertex_points_return_exact_values() {
        let values = [0.3, 0.9, 0.1, 0.7];
        assert_eq!(convex_closure(&values, &[0.0, 0.0]).unwrap(), 0.3);
        assert_eq!(convex_closure(&values, &[1.0, 0.0]).unwrap(), 0.9);
        assert_eq!(convex_closure(&values, &[0.0, 1.0]).unwrap(), 0.1);
        assert_eq!(convex_closure(&values, &[1.0, 1.0]).unwrap(), 0.7);
    }

    #[test]
    fn edge_midpoint_is_bounded_by_interpolation() {
        // Vertices 0 and 1 carry values 0 and 1; their edge midpoint can be
        // interpolated at cost 0.5, so the closure is at most that.
        let values = [0.0, 1.0, 1.0, 1.0];
        let v = convex_closure(&values, &[0.5, 0.0]).unwrap();
        assert!(v <= 0.5 + 1e-9, "closure {v}");
    }

    #[test]
    fn interior_point_of_linear_function_is_exact() {
        // f(v) = v0 + v1 is linear, so the closure equals it everywhere.
        let values = [0.0, 1.0, 1.0, 2.0];
        let v = convex_closure(&values, &[0.25, 0.75]).unwrap();
        assert_abs_diff_eq!(v, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            convex_closure(&[0.0; 4], &[0.5; 9]),
            Err(TheoryError::UnsupportedDimension { .. })
        ));
        assert!(matches!(
            convex_closure(&[0.0; 3], &[0.5, 0.5]),
            Err(TheoryError::ValueTableSize { expected: 4, actual: 3 })
        ));
        assert!(matches!(
            convex_closure(&[0.0; 4], &[0.5, 1.5]),
            Err(TheoryError::PointOutsideCube { index: 1, .. })
        ));
    }

    #[test]
    fn closure_is_midpoint_convex() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for p in [1usize, 2, 3] {
            let values: Vec<f64> = (0..1 << p).map(|_| rng.gen::<f64>()).collect();
            for _ in 0..200 {
                let a: Vec<f64> = (0..p).map(|_| rng.gen::<f64>()).collect();
                let b: Vec<f64> = (0..p).map(|_| rng.gen::<f64>()).collect();
                let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
                let ca = convex_closure(&values, &a).unwrap();
                let cb = convex_closure(&values, &b).unwrap();
                let cm = convex_closure(&values, &mid).unwrap();
                assert!(cm <= 0.5 * (ca + cb) + 1e-9, "{cm} > ({ca} + {cb})/2");
            }
        }
    }
}
