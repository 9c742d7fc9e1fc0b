//! Single-particle entanglement spectra, entropies and correlation decay.

use std::ops::Range;

use ndarray::{s, Array2, ArrayView2};
use ndarray_linalg::SVD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gaussian::CorrelationMatrix;

/// Values of `λ` within this distance outside `[0, 1]` are clamped.
pub const CLAMP_TOL: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntanglementSpectrum {
    /// One `λ_r ∈ [0, 1]` per site of the region, ascending.
    pub lambdas: Vec<f64>,
}

/// Principal submatrix of the Majoranas on `sites` (0-based, contiguous).
pub fn reduce(c: &CorrelationMatrix, sites: Range<usize>) -> Result<Array2<f64>> {
    if sites.is_empty() || sites.end > c.m {
        return Err(Error::InvalidInput(format!("region {sites:?} for M = {}", c.m)));
    }
    let (lo, hi) = (2 * sites.start, 2 * sites.end);
    Ok(c.c.slice(s![lo..hi, lo..hi]).to_owned())
}

/// Sites `0..M/2`.
pub fn half_cut(m: usize) -> Range<usize> {
    0..m / 2
}

pub fn spectrum(ca: ArrayView2<f64>) -> Result<EntanglementSpectrum> {
    let n = ca.nrows();
    if n != ca.ncols() || n % 2 == 1 || n == 0 {
        return Err(Error::InvalidInput(format!("reduced matrix of shape {:?}", ca.dim())));
    }
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in i..n {
            asym = asym.max((ca[[i, j]] + ca[[j, i]]).abs());
        }
    }
    if asym > 1e-8 {
        return Err(Error::InvalidInput(format!("matrix is not antisymmetric ({asym:.3e})")));
    }
    let (_, sv, _) = ca.to_owned().svd(false, false)?;
    let mut sv = sv.to_vec();
    sv.sort_by(|a, b| a.total_cmp(b));
    // Singular values of a real antisymmetric matrix come in equal pairs.
    let mut lambdas = Vec::with_capacity(n / 2);
    for pair in sv.chunks(2) {
        let lam = 0.5 * (pair[0] + pair[1]);
        if lam > 1.0 + CLAMP_TOL || !lam.is_finite() {
            return Err(Error::InvalidInput(format!("entanglement eigenvalue {lam} exceeds 1")));
        }
        lambdas.push(lam.clamp(0.0, 1.0));
    }
    Ok(EntanglementSpectrum { lambdas })
}

fn h(x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else {
        -x * x.ln()
    }
}

/// `S = Σ_r h((1-λ_r)/2) + h((1+λ_r)/2)`, `h(x) = -x ln x`, in nats.
pub fn entropy(spec: &EntanglementSpectrum) -> f64 {
    spec.lambdas
        .iter()
        .map(|&l| h(0.5 * (1.0 - l)) + h(0.5 * (1.0 + l)))
        .sum()
}

/// `(λ_0, λ_1)`, the two smallest entries of the spectrum.
pub fn zero_mode_and_gap(spec: &EntanglementSpectrum) -> Result<(f64, f64)> {
    if spec.lambdas.len() < 2 {
        return Err(Error::InvalidInput("spectrum has fewer than two levels".into()));
    }
    Ok((spec.lambdas[0], spec.lambdas[1]))
}

pub fn half_cut_spectrum(c: &CorrelationMatrix) -> Result<EntanglementSpectrum> {
    spectrum(reduce(c, half_cut(c.m))?.view())
}

pub fn half_cut_entropy(c: &CorrelationMatrix) -> Result<f64> {
    Ok(entropy(&half_cut_spectrum(c)?))
}

/// Mean `|C_ab|` over Majorana pairs at ring distance `d = min(|a-b|, 2M-|a-b|)`
/// for `d = 2..=M`.
pub fn correlation_profile(c: &CorrelationMatrix) -> Vec<(usize, f64)> {
    let n = 2 * c.m;
    let mut sums = vec![0.0; c.m + 1];
    let mut counts = vec![0usize; c.m + 1];
    for a in 0..n {
        for b in a + 1..n {
            let d = (b - a).min(n - (b - a));
            if d >= 2 {
                sums[d] += c.c[[a, b]].abs();
                counts[d] += 1;
            }
        }
    }
    (2..=c.m).map(|d| (d, sums[d] / counts[d] as f64)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gaussian::{initial_state, InitialState};
    use approx::assert_abs_diff_eq;

    #[test]
    fn full_region_is_whole_matrix() {
        let c = initial_state(&InitialState::HalfFilledRandom(1), 4).unwrap();
        assert_eq!(reduce(&c, 0..4).unwrap(), c.c);
        let single = reduce(&initial_state(&InitialState::Vacuum, 3).unwrap(), 1..2).unwrap();
        assert_eq!(single, ndarray::arr2(&[[0.0, -1.0], [1.0, 0.0]]));
    }

    #[test]
    fn spectrum_of_single_block() {
        let ca = ndarray::arr2(&[[0.0, 0.3], [-0.3, 0.0]]);
        let spec = spectrum(ca.view()).unwrap();
        assert_abs_diff_eq!(spec.lambdas[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn product_state_is_unentangled() {
        let c = initial_state(&InitialState::HalfFilledRandom(3), 8).unwrap();
        let spec = half_cut_spectrum(&c).unwrap();
        assert!(spec.lambdas.iter().all(|&l| (l - 1.0).abs() < 1e-15));
        assert_eq!(entropy(&spec), 0.0);
        assert!(correlation_profile(&c).iter().all(|&(_, v)| v == 0.0));
    }

    #[test]
    fn entropy_values() {
        let s = |l: Vec<f64>| entropy(&EntanglementSpectrum { lambdas: l });
        assert_eq!(s(vec![1.0, 1.0]), 0.0);
        assert_abs_diff_eq!(s(vec![0.0]), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(s(vec![0.5]), 0.562335144618808, epsilon = 1e-12);
    }

    #[test]
    fn zero_mode_and_gap_ordering() {
        let spec = EntanglementSpectrum {
            lambdas: vec![0.0, 0.9, 1.0],
        };
        assert_eq!(zero_mode_and_gap(&spec).unwrap(), (0.0, 0.9));
    }

    #[test]
    fn asymmetric_input_rejected() {
        let ca = ndarray::arr2(&[[0.0, 0.3], [0.3, 0.0]]);
        assert!(matches!(spectrum(ca.view()), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn roundoff_above_one_is_clamped() {
        let ca = ndarray::arr2(&[[0.0, 1.0 + 1e-12], [-1.0 - 1e-12, 0.0]]);
        assert_eq!(spectrum(ca.view()).unwrap().lambdas, vec![1.0]);
    }

    #[test]
    fn profile_distances() {
        let c = initial_state(&InitialState::Vacuum, 5).unwrap();
        let profile = correlation_profile(&c);
        assert_eq!(profile.first().unwrap().0, 2);
        assert_eq!(profile.last().unwrap().0, 5);
    }
}
