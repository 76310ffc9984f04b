//! Oracles shared by unit tests: independent solution routes kept away from
//! the implementation paths they check.

use crate::numerics::Matrix;

/// Neumaier compensated summation of an iterator.
pub(crate) fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let mut s = 0.0;
    let mut c = 0.0;
    for v in values {
        let t = s + v;
        if s.abs() >= v.abs() {
            c += (s - t) + v;
        } else {
            c += (v - t) + s;
        }
        s = t;
    }
    s + c
}

/// Explicit (A'A)^{-1} A' b by Gauss-Jordan elimination with compensated dot
/// products; requires full column rank.
pub(crate) fn normal_equations_oracle(a: &Matrix, b: &[f64]) -> Vec<f64> {
    let k = a.cols();
    let mut aug = vec![vec![0.0; k + 1]; k];
    for i in 0..k {
        for j in 0..k {
            aug[i][j] = compensated_sum((0..a.rows()).map(|r| a.get(r, i) * a.get(r, j)));
        }
        aug[i][k] = compensated_sum((0..a.rows()).map(|r| a.get(r, i) * b[r]));
    }
    for col in 0..k {
        let piv = (col..k)
            .max_by(|&x, &y| aug[x][col].abs().total_cmp(&aug[y][col].abs()))
            .unwrap();
        aug.swap(col, piv);
        let p = aug[col][col];
        for j in col..=k {
            aug[col][j] /= p;
        }
        for r in 0..k {
            if r != col {
                let f = aug[r][col];
                for j in col..=k {
                    aug[r][j] -= f * aug[col][j];
                }
            }
        }
    }
    (0..k).map(|i| aug[i][k]).collect()
}
