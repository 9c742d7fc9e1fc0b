//! Gaussian-state evolution through the correlation matrix
//! `C_jk = (i/2) tr(ρ [γ_j, γ_k])`.
//!
//! A gate `T = exp(i z γ_a γ_b)` maps `C ↦ B (1 - C A)⁻¹ C Bᵀ + A` where `A`
//! and `B` differ from `0` and `1` only on the `(a, b)` sector. Because `A`
//! has rank two, the inverse reduces to a scalar Woodbury correction:
//! with `c = C_ab`, `t = tanh(2 Re z)` and `u_a`, `u_b` the columns of `C`,
//! `(1 - C A)⁻¹ C = C - t/(1 + t c) (u_a u_bᵀ - u_b u_aᵀ)`.
//!
//! Sign convention: an empty mode has `⟨X_j⟩ = +1`, so its block on
//! `(2j, 2j+1)` is `[[0, -1], [1, 0]]`; an occupied mode has the opposite
//! sign.

use ndarray::{Array2, ArrayView2};
use ndarray_linalg::Norm;
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{Gate, GateSchedule};
use crate::entanglement;
use crate::error::{Error, Result};
use crate::network;
use crate::pfaffian::pfaffian;

/// Purity tolerance enforced after each layer when checking is enabled.
pub const PURITY_TOL: f64 = 1e-8;

/// Defect below which a layer's output is left untouched.
pub const REPURIFY_TOL: f64 = 1e-14;
const REPURIFY_STEPS: usize = 3;
const SINGULAR_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMatrix {
    #[serde(rename = "M")]
    pub m: usize,
    pub c: Array2<f64>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitialState {
    Vacuum,
    /// `M/2` occupied sites drawn uniformly from the seed.
    HalfFilledRandom(u64),
    /// One occupation number (0 or 1) per site.
    Occupations(Vec<u8>),
}

impl InitialState {
    pub fn occupations(&self, m: usize) -> Result<Vec<u8>> {
        match self {
            InitialState::Vacuum => Ok(vec![0; m]),
            InitialState::HalfFilledRandom(seed) => {
                if m % 2 == 1 {
                    return Err(Error::InvalidGeometry(format!("half filling needs even M, got {m}")));
                }
                let mut rng = ChaCha8Rng::seed_from_u64(*seed);
                let mut occ = vec![0; m];
                for i in rand::seq::index::sample(&mut rng, m, m / 2) {
                    occ[i] = 1;
                }
                Ok(occ)
            }
            InitialState::Occupations(occ) => {
                if occ.len() != m {
                    return Err(Error::InvalidInput(format!(
                        "{} occupations given for M = {m}",
                        occ.len()
                    )));
                }
                if occ.iter().any(|&n| n > 1) {
                    return Err(Error::InvalidInput("occupations must be 0 or 1".into()));
                }
                Ok(occ.clone())
            }
        }
    }
}

pub fn initial_state(kind: &InitialState, m: usize) -> Result<CorrelationMatrix> {
    if m == 0 {
        return Err(Error::InvalidGeometry("M must be positive".into()));
    }
    let occ = kind.occupations(m)?;
    let mut c = Array2::zeros((2 * m, 2 * m));
    for (j, &n) in occ.iter().enumerate() {
        let s = if n == 0 { -1.0 } else { 1.0 };
        c[[2 * j, 2 * j + 1]] = s;
        c[[2 * j + 1, 2 * j]] = -s;
    }
    Ok(CorrelationMatrix { m, c })
}

impl CorrelationMatrix {
    pub fn new(c: Array2<f64>) -> Result<Self> {
        let n = c.nrows();
        if n != c.ncols() || n % 2 == 1 || n == 0 {
            return Err(Error::InvalidInput(format!("correlation matrix of shape {:?}", c.dim())));
        }
        Ok(CorrelationMatrix { m: n / 2, c })
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.c.view()
    }

    /// `max |C Cᵀ - 1|`.
    pub fn purity_defect(&self) -> f64 {
        let mut p = self.c.dot(&self.c.t());
        p.diag_mut().mapv_inplace(|x| x - 1.0);
        p.iter().fold(0.0f64, |acc, x| acc.max(x.abs()))
    }

    /// `max |C + Cᵀ|`.
    pub fn asymmetry(&self) -> f64 {
        let n = self.c.nrows();
        let mut worst = 0.0f64;
        for i in 0..n {
            for j in i..n {
                worst = worst.max((self.c[[i, j]] + self.c[[j, i]]).abs());
            }
        }
        worst
    }

    pub fn antisymmetrize(&mut self) {
        let n = self.c.nrows();
        for i in 0..n {
            self.c[[i, i]] = 0.0;
            for j in i + 1..n {
                let x = 0.5 * (self.c[[i, j]] - self.c[[j, i]]);
                self.c[[i, j]] = x;
                self.c[[j, i]] = -x;
            }
        }
    }

    /// Pulls `C` back onto the pure-state manifold with Newton-Schulz steps
    /// `C ← C + ½ C (1 + C²)` towards its orthogonal polar factor. Returns the
    /// defect `max |1 + C²|` measured before the last step.
    pub fn repurify(&mut self) -> f64 {
        let mut defect = f64::INFINITY;
        for _ in 0..REPURIFY_STEPS {
            let mut e = self.c.dot(&self.c);
            e.diag_mut().mapv_inplace(|x| x + 1.0);
            defect = e.norm_max();
            if defect < REPURIFY_TOL || defect > 0.5 {
                break;
            }
            let step = self.c.dot(&e);
            self.c.scaled_add(0.5, &step);
            self.antisymmetrize();
        }
        defect
    }

    pub fn max_abs_diff(&self, other: &CorrelationMatrix) -> f64 {
        (&self.c - &other.c).norm_max()
    }
}

/// Fermion parity `(-i)^M ⟨γ_0 … γ_{2M-1}⟩ = (-1)^M sgn Pf C` of a pure state.
pub fn parity(c: &CorrelationMatrix) -> Result<i8> {
    let pf = pfaffian(c.view())?;
    if pf.abs() < 1e-10 || !pf.is_finite() {
        return Err(Error::IndeterminateParity(pf.abs()));
    }
    let sign = if pf > 0.0 { 1 } else { -1 };
    Ok(if c.m % 2 == 0 { sign } else { -sign })
}

/// Blocks of `exp(i z γ_a γ_b)` on the `(a, b)` sector:
/// `A = [[0, τ], [-τ, 0]]` with `τ = tanh(2 Re z)` and
/// `B = R(2 Im z) / cosh(2 Re z)` with `R(θ) = [[cos θ, -sin θ], [sin θ, cos θ]]`.
/// An infinite real part is allowed and gives a projector.
pub fn gate_blocks(z: Complex64) -> ([[f64; 2]; 2], [[f64; 2]; 2]) {
    let tau = (2.0 * z.re).tanh();
    let sech = sech(2.0 * z.re);
    let (sin, cos) = (2.0 * z.im).sin_cos();
    (
        [[0.0, tau], [-tau, 0.0]],
        [[cos * sech, -sin * sech], [sin * sech, cos * sech]],
    )
}

pub(crate) fn sech(x: f64) -> f64 {
    if x.abs() > 710.0 {
        0.0
    } else {
        1.0 / x.cosh()
    }
}

/// Rotation sense of the `B` block. Only the verification harness uses the
/// flipped value, to check that the oracle suite notices a wrong convention.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Convention {
    pub rotation_sign: f64,
}

impl Convention {
    pub const STANDARD: Convention = Convention { rotation_sign: 1.0 };
    pub const FLIPPED: Convention = Convention { rotation_sign: -1.0 };
}

pub fn apply_gate(c: &mut CorrelationMatrix, gate: &Gate) -> Result<()> {
    apply_gate_with(c, gate.a, gate.b, gate.z, Convention::STANDARD)
}

pub fn apply_gate_with(
    c: &mut CorrelationMatrix,
    a: usize,
    b: usize,
    z: Complex64,
    convention: Convention,
) -> Result<()> {
    let n = c.c.nrows();
    if a >= n || b >= n || a == b {
        return Err(Error::InvalidInput(format!("gate on ({a}, {b}) for {n} Majoranas")));
    }
    let tau = (2.0 * z.re).tanh();
    let data = c.c.as_slice_mut().expect("correlation matrix is contiguous");
    if tau != 0.0 {
        let cab = data[a * n + b];
        let denom = 1.0 + tau * cab;
        if denom.abs() < SINGULAR_TOL {
            return Err(Error::SingularUpdate {
                a,
                b,
                residual: denom.abs(),
            });
        }
        let g = tau / denom;
        let ua: Vec<f64> = (0..n).map(|i| data[i * n + a]).collect();
        let ub: Vec<f64> = (0..n).map(|i| data[i * n + b]).collect();
        for i in 0..n {
            let x = g * ua[i];
            let y = g * ub[i];
            if x == 0.0 && y == 0.0 {
                continue;
            }
            let row = &mut data[i * n..(i + 1) * n];
            for ((r, &va), &vb) in row.iter_mut().zip(&ua).zip(&ub) {
                *r -= x * vb - y * va;
            }
        }
    }
    let sech = sech(2.0 * z.re);
    let (sin, cos) = (2.0 * convention.rotation_sign * z.im).sin_cos();
    let (b00, b01, b10, b11) = (cos * sech, -sin * sech, sin * sech, cos * sech);
    if (b00, b01, b10, b11) != (1.0, 0.0, 0.0, 1.0) {
        // Rows a, b.
        for j in 0..n {
            let (xa, xb) = (data[a * n + j], data[b * n + j]);
            data[a * n + j] = b00 * xa + b01 * xb;
            data[b * n + j] = b10 * xa + b11 * xb;
        }
        // Columns a, b.
        for i in 0..n {
            let (xa, xb) = (data[i * n + a], data[i * n + b]);
            data[i * n + a] = b00 * xa + b01 * xb;
            data[i * n + b] = b10 * xa + b11 * xb;
        }
    }
    data[a * n + b] += tau;
    data[b * n + a] -= tau;
    Ok(())
}

pub fn apply_layer(c: &mut CorrelationMatrix, layer: &[Gate], convention: Convention) -> Result<()> {
    for g in layer {
        apply_gate_with(c, g.a, g.b, g.z, convention)?;
    }
    c.antisymmetrize();
    c.repurify();
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolveOptions {
    /// Plateau tolerance on the recorded half-cut entropies.
    pub tol_conv: f64,
    /// Upper bound on the number of layers applied.
    pub max_layers: Option<usize>,
    /// Stop as soon as the plateau criterion is met.
    pub early_stop: bool,
    /// Measure `|C Cᵀ - 1|` after every layer and fail beyond [`PURITY_TOL`].
    pub check_purity: bool,
}

impl Default for EvolveOptions {
    fn default() -> Self {
        EvolveOptions {
            tol_conv: 1e-3,
            max_layers: None,
            early_stop: false,
            check_purity: false,
        }
    }
}

/// Number of trailing entropy records that must agree for convergence.
pub const PLATEAU_WINDOW: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvolutionReport {
    pub c_final: CorrelationMatrix,
    pub layers_applied: usize,
    /// Entropy-plateau surrogate for having reached the long-time state.
    pub converged: bool,
    /// `(layers applied, S_{M/2})`, recorded every `M` layers.
    pub entropy_trace: Vec<(usize, f64)>,
    pub parity: i8,
    /// Largest `|C Cᵀ - 1|` seen after a layer, when checked.
    pub max_purity_defect: Option<f64>,
}

pub fn plateau_reached(trace: &[(usize, f64)], tol: f64) -> bool {
    if trace.len() < PLATEAU_WINDOW {
        return false;
    }
    let tail = &trace[trace.len() - PLATEAU_WINDOW..];
    let lo = tail.iter().map(|x| x.1).fold(f64::INFINITY, f64::min);
    let hi = tail.iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
    hi - lo < tol
}

pub fn evolve(
    c0: &CorrelationMatrix,
    schedule: &GateSchedule,
    options: &EvolveOptions,
) -> Result<EvolutionReport> {
    evolve_with(c0, schedule, options, Convention::STANDARD)
}

pub fn evolve_with(
    c0: &CorrelationMatrix,
    schedule: &GateSchedule,
    options: &EvolveOptions,
    convention: Convention,
) -> Result<EvolutionReport> {
    if c0.m != schedule.m {
        return Err(Error::InvalidGeometry(format!(
            "state has M = {}, schedule has M = {}",
            c0.m, schedule.m
        )));
    }
    let total = options
        .max_layers
        .map_or(schedule.num_layers(), |cap| cap.min(schedule.num_layers()));
    let mut c = c0.clone();
    let mut trace = Vec::new();
    let mut converged = false;
    let mut max_defect = options.check_purity.then_some(0.0f64);
    let mut applied = 0;
    for layer in schedule.layers().take(total) {
        apply_layer(&mut c, layer, convention)?;
        applied += 1;
        if options.check_purity {
            let defect = c.purity_defect();
            max_defect = max_defect.map(|d| d.max(defect));
            if defect > PURITY_TOL {
                return Err(Error::NumericalInstability(format!(
                    "purity defect {defect:.3e} after layer {applied}"
                )));
            }
        }
        if applied % schedule.m == 0 {
            trace.push((applied, entanglement::half_cut_entropy(&c)?));
            converged = plateau_reached(&trace, options.tol_conv);
            if converged && options.early_stop {
                break;
            }
        }
    }
    let parity = parity(&c)?;
    Ok(EvolutionReport {
        c_final: c,
        layers_applied: applied,
        converged,
        entropy_trace: trace,
        parity,
        max_purity_defect: max_defect,
    })
}

/// Applies every layer of the schedule without bookkeeping.
pub fn evolve_layers(c0: &CorrelationMatrix, schedule: &GateSchedule) -> Result<CorrelationMatrix> {
    let mut c = c0.clone();
    for layer in schedule.layers() {
        apply_layer(&mut c, layer, Convention::STANDARD)?;
    }
    Ok(c)
}

/// `C ↦ O C Oᵀ` for a real orthogonal single-particle map `O`.
pub fn apply_orthogonal(c: &mut CorrelationMatrix, o: ArrayView2<f64>) {
    c.c = o.dot(&c.c).dot(&o.t());
    c.antisymmetrize();
}

/// Evolution through the polar (CS) decomposition of the composed network:
/// the whole schedule acts as `exp(h_v) exp(DY) exp(h_u)`, i.e. two
/// orthogonal maps around `M` commuting imaginary-time gates.
///
/// Complex-coupling schedules are only current conserving over multiples of
/// four layers; the remaining layers are applied gate by gate. Falls back to
/// layered evolution with a warning when the decomposition fails to
/// reproduce the scattering matrix.
pub fn fast_evolve(schedule: &GateSchedule, c0: &CorrelationMatrix) -> Result<CorrelationMatrix> {
    if c0.m != schedule.m {
        return Err(Error::InvalidGeometry(format!(
            "state has M = {}, schedule has M = {}",
            c0.m, schedule.m
        )));
    }
    let layers = schedule.num_layers();
    let fast_layers = if schedule.is_complex_layout() {
        4 * (layers / 4)
    } else {
        layers
    };
    let head = schedule.truncated(fast_layers);
    let mut c = match fast_three_step(&head, c0) {
        Ok(c) => c,
        Err(e) => {
            log::warn!("fast evolution failed ({e}); falling back to layered evolution");
            evolve_layers(c0, &head)?
        }
    };
    for layer in schedule.layers().skip(fast_layers) {
        apply_layer(&mut c, layer, Convention::STANDARD)?;
    }
    Ok(c)
}

fn fast_three_step(schedule: &GateSchedule, c0: &CorrelationMatrix) -> Result<CorrelationMatrix> {
    let m = schedule.m;
    let layout = network::Layout::for_schedule(schedule)?;
    let scattering = network::compose_network(schedule)?;
    let polar = network::polar_decomposition(&scattering)?;
    if polar.reconstruction_error > 1e-9 {
        return Err(Error::NumericalInstability(format!(
            "polar decomposition reproduces S only to {:.3e}",
            polar.reconstruction_error
        )));
    }
    // Channel lists at the bottom (= top) of the network.
    let (fwd, bwd) = layout.channels_at(0);
    let n = 2 * m;
    // exp(h_u) = diag(u', uᵀ) and exp(h_v) = diag(v, v'ᵀ) in the
    // (forward, backward) grading; both are real in the Majorana basis.
    let mut t_u = Array2::zeros((n, n));
    let mut t_v = Array2::zeros((n, n));
    let ut = polar.u.t();
    let v_prime_t = polar.v_prime.t();
    for (r, &fr) in fwd.iter().enumerate() {
        for (k, &fk) in fwd.iter().enumerate() {
            t_u[[fr, fk]] = polar.u_prime[[r, k]];
            t_v[[fr, fk]] = polar.v[[r, k]];
        }
    }
    for (r, &br) in bwd.iter().enumerate() {
        for (k, &bk) in bwd.iter().enumerate() {
            t_u[[br, bk]] = ut[[r, k]];
            t_v[[br, bk]] = v_prime_t[[r, k]];
        }
    }
    let mut c = c0.clone();
    apply_orthogonal(&mut c, t_u.view());
    for j in 0..m {
        // exp(D_j Y) on (F_j, B_j) is the gate with z = -D_j / 2.
        let z = Complex64::new(-0.5 * polar.d[j], 0.0);
        apply_gate_with(&mut c, fwd[j], bwd[j], z, Convention::STANDARD)?;
    }
    c.antisymmetrize();
    c.repurify();
    apply_orthogonal(&mut c, t_v.view());
    Ok(c)
}
