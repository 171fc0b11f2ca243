//! Dense Gauss-Jordan elimination with partial pivoting.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};

const PIVOT_TOLERANCE: f64 = 1e-11;
const CONSISTENCY_TOLERANCE: f64 = 1e-9;

/// Solves `a x = b`.
///
/// Columns without a usable pivot are free and set to zero, so a
/// rank-deficient system still solves as long as it is consistent; an
/// inconsistent one is reported as [`Error::SingularSystem`].
pub fn solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Result<Array1<f64>> {
    let (rows, cols) = a.dim();
    if b.len() != rows {
        return Err(Error::DimensionMismatch(format!(
            "system has {rows} rows but right-hand side has {}",
            b.len()
        )));
    }
    let scale = a.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let rhs_scale = b.iter().fold(1.0_f64, |m, v| m.max(v.abs()));
    let mut pivots = Vec::with_capacity(cols);
    let mut r = 0;
    for col in 0..cols {
        if r == rows {
            break;
        }
        let (p, best) = (r..rows)
            .map(|i| (i, a[[i, col]].abs()))
            .fold((r, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best <= PIVOT_TOLERANCE * scale {
            continue;
        }
        if p != r {
            for j in 0..cols {
                a.swap([p, j], [r, j]);
            }
            b.swap(p, r);
        }
        let inv = 1.0 / a[[r, col]];
        for j in 0..cols {
            a[[r, j]] *= inv;
        }
        b[r] *= inv;
        for i in 0..rows {
            if i == r {
                continue;
            }
            let f = a[[i, col]];
            if f != 0.0 {
                for j in 0..cols {
                    a[[i, j]] -= f * a[[r, j]];
                }
                b[i] -= f * b[r];
            }
        }
        pivots.push((r, col));
        r += 1;
    }
    if let Some(i) = (r..rows).find(|&i| b[i].abs() > CONSISTENCY_TOLERANCE * rhs_scale) {
        return Err(Error::SingularSystem(format!(
            "rank {r} of {cols}, equation {i} inconsistent by {:e}",
            b[i]
        )));
    }
    let mut x = Array1::zeros(cols);
    for (row, col) in pivots {
        x[col] = b[row];
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    #[test]
    fn regular_system() {
        let a = array![[2.0, 1.0, -1.0], [-3.0, -1.0, 2.0], [-2.0, 1.0, 2.0]];
        let b = array![8.0, -11.0, -3.0];
        let x = solve(a, b).unwrap();
        assert_abs_diff_eq!(x[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[1], 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(x[2], -1.0, epsilon = 1e-12);
    }

    #[test]
    fn needs_pivoting() {
        let a = array![[0.0, 1.0], [1.0, 0.0]];
        let x = solve(a, array![3.0, 4.0]).unwrap();
        assert_eq!(x, array![4.0, 3.0]);
    }

    #[test]
    fn consistent_rank_deficient() {
        let a = array![[1.0, 1.0], [2.0, 2.0]];
        let x = solve(a, array![1.0, 2.0]).unwrap();
        assert_abs_diff_eq!(x[0] + x[1], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn inconsistent_is_singular() {
        let a = array![[1.0, 1.0], [2.0, 2.0]];
        assert!(matches!(solve(a, array![1.0, 3.0]), Err(Error::SingularSystem(_))));
    }
}
