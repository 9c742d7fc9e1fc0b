//! Pfaffian of a real antisymmetric matrix by pivoted Parlett-Reid
//! (`A = P L T Lᵀ Pᵀ`) elimination.

use ndarray::{Array2, ArrayView2};

use crate::error::{Error, Result};

pub fn pfaffian(a: ArrayView2<f64>) -> Result<f64> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(Error::InvalidInput(format!("pfaffian of a {}x{} matrix", n, a.ncols())));
    }
    if n % 2 == 1 {
        return Ok(0.0);
    }
    let mut a: Array2<f64> = a.to_owned();
    let mut pf = 1.0;
    for k in (0..n.saturating_sub(1)).step_by(2) {
        let mut kp = k + 1;
        let mut best = a[[k + 1, k]].abs();
        for r in k + 2..n {
            if a[[r, k]].abs() > best {
                best = a[[r, k]].abs();
                kp = r;
            }
        }
        if kp != k + 1 {
            for c in k..n {
                a.swap([k + 1, c], [kp, c]);
            }
            for r in k..n {
                a.swap([r, k + 1], [r, kp]);
            }
            pf = -pf;
        }
        let pivot = a[[k, k + 1]];
        if pivot == 0.0 {
            return Ok(0.0);
        }
        pf *= pivot;
        if k + 2 < n {
            let tau: Vec<f64> = (k + 2..n).map(|c| a[[k, c]] / pivot).collect();
            let col: Vec<f64> = (k + 2..n).map(|r| a[[r, k + 1]]).collect();
            for (i, r) in (k + 2..n).enumerate() {
                for (j, c) in (k + 2..n).enumerate() {
                    a[[r, c]] += tau[i] * col[j] - col[i] * tau[j];
                }
            }
        }
    }
    Ok(pf)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray_linalg::Determinant;
    use proptest::prelude::*;

    /// Expansion along the first row; exponential, for checks only.
    fn pfaffian_by_expansion(a: &Array2<f64>) -> f64 {
        let n = a.nrows();
        if n == 0 {
            return 1.0;
        }
        let mut total = 0.0;
        for j in 1..n {
            let keep: Vec<usize> = (1..n).filter(|&k| k != j).collect();
            let minor = Array2::from_shape_fn((n - 2, n - 2), |(r, c)| a[[keep[r], keep[c]]]);
            let sign = if j % 2 == 1 { 1.0 } else { -1.0 };
            total += sign * a[[0, j]] * pfaffian_by_expansion(&minor);
        }
        total
    }

    fn antisymmetric(n: usize, entries: &[f64]) -> Array2<f64> {
        let mut a = Array2::zeros((n, n));
        let mut k = 0;
        for i in 0..n {
            for j in i + 1..n {
                a[[i, j]] = entries[k];
                a[[j, i]] = -entries[k];
                k += 1;
            }
        }
        a
    }

    #[test]
    fn two_by_two() {
        let a = antisymmetric(2, &[-0.7]);
        assert_eq!(pfaffian(a.view()).unwrap(), -0.7);
    }

    #[test]
    fn odd_dimension_vanishes() {
        let a = antisymmetric(3, &[1.0, 2.0, 3.0]);
        assert_eq!(pfaffian(a.view()).unwrap(), 0.0);
    }

    #[test]
    fn block_diagonal_product() {
        let mut a = Array2::zeros((6, 6));
        for (k, x) in [0.5, -2.0, 3.0].iter().enumerate() {
            a[[2 * k, 2 * k + 1]] = *x;
            a[[2 * k + 1, 2 * k]] = -*x;
        }
        assert!((pfaffian(a.view()).unwrap() - (-3.0)).abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn matches_expansion_and_determinant(
            half in 1usize..4,
            entries in proptest::collection::vec(-2.0f64..2.0, 28),
        ) {
            let n = 2 * half;
            let a = antisymmetric(n, &entries[..n * (n - 1) / 2]);
            let pf = pfaffian(a.view()).unwrap();
            let reference = pfaffian_by_expansion(&a);
            prop_assert!((pf - reference).abs() < 1e-10 * (1.0 + reference.abs()));
            let det = a.det().unwrap();
            prop_assert!((pf * pf - det).abs() < 1e-9 * (1.0 + det.abs()));
        }
    }
}
