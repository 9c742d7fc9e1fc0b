//! Sanity check of the LAPACK backend.
//!
//! Some OpenBLAS builds select kernels at load time that return wrong LU
//! factorizations on certain CPUs. Setting `OPENBLAS_CORETYPE` before the
//! library loads avoids them; this check detects a bad backend so that
//! results are never silently wrong.

use ndarray::{Array1, Array2};
use ndarray_linalg::{Determinant, Inverse, Norm, Solve, SVD};

use crate::error::{Error, Result};

/// Environment variable that pins the OpenBLAS kernel family.
pub const CORETYPE_VAR: &str = "OPENBLAS_CORETYPE";
/// Kernel family used when none is configured.
pub const DEFAULT_CORETYPE: &str = "Haswell";

/// Solves, inverts and factorizes a fixed well-conditioned 48×48 matrix and
/// compares with independent results.
pub fn self_check() -> Result<()> {
    let n = 48;
    let a = Array2::from_shape_fn((n, n), |(i, j)| {
        ((i * 7 + j * 13) % 11) as f64 / 11.0 + if i == j { 3.0 } else { 0.0 }
    });
    let b = Array1::from_shape_fn(n, |i| (i as f64).sin());
    let x = a.solve(&b)?;
    let solve_err = (a.dot(&x) - &b).norm_max();
    let mut eye = a.dot(&a.inv()?);
    eye.diag_mut().mapv_inplace(|v| v - 1.0);
    let inv_err = eye.norm_max();
    let (_, s, _) = a.svd(false, false)?;
    let log_det_svd: f64 = s.iter().map(|v| v.ln()).sum();
    let log_det_lu = a.det()?.abs().ln();
    let det_err = (log_det_svd - log_det_lu).abs();
    if solve_err > 1e-10 || inv_err > 1e-10 || det_err > 1e-8 {
        return Err(Error::NumericalInstability(format!(
            "LAPACK backend self-check failed (solve {solve_err:.1e}, inverse {inv_err:.1e}, \
             log det {det_err:.1e}); set {CORETYPE_VAR}={DEFAULT_CORETYPE}"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    #[test]
    fn backend_is_sound() {
        super::self_check().unwrap();
    }
}
