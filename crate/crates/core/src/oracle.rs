//! Brute-force many-body reference: explicit Jordan-Wigner Majoranas on the
//! `2^M`-dimensional qubit space, state-vector evolution and direct
//! evaluation of `C_jk = Re ⟨i γ_j γ_k⟩`.
//!
//! Qubit `i` is the `i`-th tensor factor (most significant bit first) and
//! `γ_{2i} = X_0 … X_{i-1} Z_i`, `γ_{2i+1} = -X_0 … X_{i-1} Y_i`.

use ndarray::{Array1, Array2};
use num_complex::Complex64;

use crate::circuit::GateSchedule;
use crate::error::{Error, Result};
use crate::gaussian::CorrelationMatrix;

pub const MAX_SITES: usize = 6;

type CMat = Array2<Complex64>;
type CVec = Array1<Complex64>;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn pauli(name: char) -> CMat {
    let z = c(0.0, 0.0);
    let o = c(1.0, 0.0);
    let i = c(0.0, 1.0);
    let entries = match name {
        'I' => [o, z, z, o],
        'X' => [z, o, o, z],
        'Y' => [z, -i, i, z],
        'Z' => [o, z, z, -o],
        _ => unreachable!(),
    };
    Array2::from_shape_vec((2, 2), entries.to_vec()).unwrap()
}

fn kron(a: &CMat, b: &CMat) -> CMat {
    let (ar, ac) = a.dim();
    let (br, bc) = b.dim();
    Array2::from_shape_fn((ar * br, ac * bc), |(r, col)| {
        a[[r / br, col / bc]] * b[[r % br, col % bc]]
    })
}

fn string(ops: &[char]) -> CMat {
    ops.iter()
        .skip(1)
        .fold(pauli(ops[0]), |acc, &p| kron(&acc, &pauli(p)))
}

/// Jordan-Wigner Majorana matrices for `m` sites.
pub fn majoranas(m: usize) -> Vec<CMat> {
    let mut out = Vec::with_capacity(2 * m);
    for i in 0..m {
        let mut ops = vec!['I'; m];
        for op in ops.iter_mut().take(i) {
            *op = 'X';
        }
        ops[i] = 'Z';
        out.push(string(&ops));
        ops[i] = 'Y';
        out.push(string(&ops).mapv(|x| -x));
    }
    out
}

/// `P = ∏_j X_j`.
pub fn parity_operator(m: usize) -> CMat {
    string(&vec!['X'; m])
}

/// Product state with `X_j = +1` on empty and `-1` on occupied sites.
pub fn product_state(occupations: &[u8]) -> CVec {
    let s = std::f64::consts::FRAC_1_SQRT_2;
    occupations.iter().fold(Array1::from(vec![c(1.0, 0.0)]), |acc, &n| {
        let site = if n == 0 { [c(s, 0.0), c(s, 0.0)] } else { [c(s, 0.0), c(-s, 0.0)] };
        Array1::from_shape_fn(acc.len() * 2, |k| acc[k / 2] * site[k % 2])
    })
}

pub struct Oracle {
    m: usize,
    gammas: Vec<CMat>,
}

impl Oracle {
    pub fn new(m: usize) -> Result<Self> {
        if m == 0 || m > MAX_SITES {
            return Err(Error::RefusedScale(m));
        }
        Ok(Oracle {
            m,
            gammas: majoranas(m),
        })
    }

    /// `exp(i z γ_a γ_b) = cosh z + sinh z · (i γ_a γ_b)`, valid because
    /// `(i γ_a γ_b)² = 1`.
    pub fn gate(&self, a: usize, b: usize, z: Complex64) -> CMat {
        let g = self.gammas[a].dot(&self.gammas[b]).mapv(|x| x * c(0.0, 1.0));
        let dim = 1 << self.m;
        let mut out = g.mapv(|x| x * z.sinh());
        for k in 0..dim {
            out[[k, k]] += z.cosh();
        }
        out
    }

    pub fn correlation(&self, psi: &CVec) -> CorrelationMatrix {
        let n = 2 * self.m;
        let norm: f64 = psi.iter().map(|x| x.norm_sqr()).sum();
        let mut out = Array2::zeros((n, n));
        let conj: CVec = psi.mapv(|x| x.conj());
        let applied: Vec<CVec> = self.gammas.iter().map(|g| g.dot(psi)).collect();
        for j in 0..n {
            let bra = self.gammas[j].t().dot(&conj);
            for k in j + 1..n {
                // ⟨ψ|γ_j γ_k|ψ⟩ with γ_j Hermitian.
                let value: Complex64 = bra.iter().zip(applied[k].iter()).map(|(x, y)| x * y).sum();
                let cjk = (c(0.0, 1.0) * value).re / norm;
                out[[j, k]] = cjk;
                out[[k, j]] = -cjk;
            }
        }
        CorrelationMatrix { m: self.m, c: out }
    }

    pub fn parity(&self, psi: &CVec) -> f64 {
        let p = parity_operator(self.m).dot(psi);
        let num: Complex64 = psi.iter().zip(p.iter()).map(|(x, y)| x.conj() * y).sum();
        let norm: f64 = psi.iter().map(|x| x.norm_sqr()).sum();
        num.re / norm
    }

    /// Evolves a state vector through every gate of the schedule,
    /// renormalising after each layer.
    pub fn evolve(&self, schedule: &GateSchedule, psi: &CVec) -> CVec {
        let mut psi = psi.clone();
        for layer in schedule.layers() {
            for g in layer {
                psi = self.gate(g.a, g.b, g.z).dot(&psi);
            }
            let norm: f64 = psi.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt();
            psi.mapv_inplace(|x| x / norm);
        }
        psi
    }
}

/// Correlation matrix after evolving the product state `occupations` by
/// `schedule`, computed from the full state vector.
pub fn dense_oracle(schedule: &GateSchedule, occupations: &[u8]) -> Result<CorrelationMatrix> {
    let oracle = Oracle::new(schedule.m)?;
    if occupations.len() != schedule.m {
        return Err(Error::InvalidInput(format!(
            "{} occupations for M = {}",
            occupations.len(),
            schedule.m
        )));
    }
    let psi = oracle.evolve(schedule, &product_state(occupations));
    Ok(oracle.correlation(&psi))
}
