//! The single-particle transfer matrix read as a class-D scattering network.
//!
//! Every Majorana line carries a propagation direction. Conjugating a gate's
//! transfer block `t = exp(-2zY)` with the phases `e^{+iπ/4}` (forward) and
//! `e^{-iπ/4}` (backward) makes it real. For real couplings odd and even
//! Majoranas run in opposite directions throughout; for complex couplings the
//! two Majoranas of a site are co-propagating, neighbouring sites alternate,
//! and every `V` gate exchanges the directions of its pair, so the layout
//! repeats every four layers.
//!
//! Each junction is turned into a 2×2 scattering matrix and the layers are
//! composed with the Redheffer star product, which never forms the
//! exponentially ill-conditioned transfer product. The total scattering
//! matrix `S = [[R, T'], [T, R']]` maps incoming waves (forward at the bottom,
//! backward at the top) to outgoing ones (backward at the bottom, forward at
//! the top); channels are ordered by Majorana index.

use std::f64::consts::FRAC_PI_4;
use std::os::raw::c_char;

use ndarray::{Array1, Array2, ShapeBuilder};
use ndarray_linalg::{Determinant, Inverse, Norm, SVD};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::circuit::{build_schedule, is_swap_angle, BoundaryCondition, Gate, GateSchedule, Ordering};
use crate::disorder::CouplingField;
use crate::error::{Error, Result};
use crate::gaussian::sech;

/// Largest tolerated `|S Sᵀ - 1|` of a composed network.
pub const UNITARITY_TOL: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Backward,
}

impl Direction {
    fn phase(self) -> Complex64 {
        match self {
            Direction::Forward => Complex64::from_polar(1.0, FRAC_PI_4),
            Direction::Backward => Complex64::from_polar(1.0, -FRAC_PI_4),
        }
    }

    fn flipped(self) -> Self {
        match self {
            Direction::Forward => Direction::Backward,
            Direction::Backward => Direction::Forward,
        }
    }
}

/// Directions of all Majorana lines at every cut between layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    /// `cuts[k][j]`: direction of Majorana `j` below layer `k`.
    pub cuts: Vec<Vec<Direction>>,
}

impl Layout {
    pub fn for_schedule(schedule: &GateSchedule) -> Result<Self> {
        let m = schedule.m;
        let complex = schedule.is_complex_layout();
        if complex && m % 2 == 1 {
            return Err(Error::InvalidGeometry(format!(
                "complex-coupling network needs even M, got {m}"
            )));
        }
        let first: Vec<Direction> = (0..2 * m)
            .map(|j| {
                let forward = if complex { (j / 2) % 2 == 0 } else { j % 2 == 0 };
                if forward {
                    Direction::Forward
                } else {
                    Direction::Backward
                }
            })
            .collect();
        let mut cuts = vec![first];
        for (k, layer) in schedule.layers().enumerate() {
            let mut next = cuts[k].clone();
            for g in layer {
                let (da, db) = (cuts[k][g.a], cuts[k][g.b]);
                match junction_type(g, da, db)? {
                    JunctionType::Swap => {
                        next[g.a] = da.flipped();
                        next[g.b] = db.flipped();
                    }
                    JunctionType::Keep | JunctionType::Co => {}
                }
            }
            cuts.push(next);
        }
        Ok(Layout { cuts })
    }

    /// `(forward, backward)` Majorana indices at cut `k`, ascending.
    pub fn channels_at(&self, k: usize) -> (Vec<usize>, Vec<usize>) {
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        for (j, d) in self.cuts[k].iter().enumerate() {
            match d {
                Direction::Forward => fwd.push(j),
                Direction::Backward => bwd.push(j),
            }
        }
        (fwd, bwd)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum JunctionType {
    /// Counter-propagating pair that keeps its directions.
    Keep,
    /// Counter-propagating pair whose directions are exchanged.
    Swap,
    /// Co-propagating pair (unitary gate).
    Co,
}

fn junction_type(g: &Gate, da: Direction, db: Direction) -> Result<JunctionType> {
    let theta = g.z.im;
    if da == db {
        if g.z.re.abs() > 1e-12 {
            return Err(Error::NumericalInstability(format!(
                "non-unitary gate on co-propagating pair ({}, {}) in layer {}",
                g.a, g.b, g.layer
            )));
        }
        return Ok(JunctionType::Co);
    }
    let r = (theta / std::f64::consts::FRAC_PI_2).rem_euclid(1.0);
    if r < 1e-9 || r > 1.0 - 1e-9 {
        Ok(JunctionType::Keep)
    } else if is_swap_angle(theta) {
        Ok(JunctionType::Swap)
    } else {
        Err(Error::NumericalInstability(format!(
            "gate on counter-propagating pair ({}, {}) in layer {} does not conserve current",
            g.a, g.b, g.layer
        )))
    }
}

/// `exp(-2zY) / cosh(2 Re z)` conjugated into the real junction basis, in
/// `(a, b)` order (rows after the gate, columns before).
fn scaled_junction(z: Complex64, before: [Direction; 2], after: [Direction; 2]) -> Result<[[f64; 2]; 2]> {
    let tau = (2.0 * z.re).tanh();
    let (s, c) = (2.0 * z.im).sin_cos();
    let i = Complex64::i();
    let one = Complex64::new(1.0, 0.0);
    let hyp = [[one, i * tau], [-i * tau, one]];
    let rot = [[c, -s], [s, c]];
    let mut out = [[0.0; 2]; 2];
    for r in 0..2 {
        for k in 0..2 {
            let t = hyp[r][0] * rot[0][k] + hyp[r][1] * rot[1][k];
            let v = after[r].phase() * t * before[k].phase().conj();
            if v.im.abs() > 1e-10 * (1.0 + v.re.abs()) {
                return Err(Error::NumericalInstability(format!(
                    "junction is not real in the network basis ({v})"
                )));
            }
            out[r][k] = v.re;
        }
    }
    Ok(out)
}

/// Sparse matrix as `(row, col, value)` triplets.
#[derive(Clone, Debug, Default)]
struct Sparse {
    entries: Vec<(usize, usize, f64)>,
}

impl Sparse {
    fn push(&mut self, r: usize, c: usize, v: f64) {
        self.entries.push((r, c, v));
    }

    fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// `self · d` with `self` of shape `rows × d.nrows()`.
    fn left_mul(&self, rows: usize, d: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((rows, d.ncols()));
        for &(r, c, v) in &self.entries {
            out.row_mut(r).scaled_add(v, &d.row(c));
        }
        out
    }

    /// `d · self` with `self` of shape `d.ncols() × cols`.
    fn right_mul(&self, d: &Array2<f64>, cols: usize) -> Array2<f64> {
        let mut out = Array2::zeros((d.nrows(), cols));
        for &(r, c, v) in &self.entries {
            out.column_mut(c).scaled_add(v, &d.column(r));
        }
        out
    }

    fn add_to(&self, d: &mut Array2<f64>) {
        for &(r, c, v) in &self.entries {
            d[[r, c]] += v;
        }
    }
}

/// One layer's scattering blocks over the channels of its two cuts.
struct LayerScattering {
    r: Sparse,
    t: Sparse,
    t_prime: Sparse,
    r_prime: Sparse,
}

fn positions(channels: &[usize], n: usize) -> Vec<usize> {
    let mut pos = vec![usize::MAX; n];
    for (p, &j) in channels.iter().enumerate() {
        pos[j] = p;
    }
    pos
}

fn layer_scattering(layer: &[Gate], layout: &Layout, k: usize) -> Result<LayerScattering> {
    let before = &layout.cuts[k];
    let after = &layout.cuts[k + 1];
    let n = before.len();
    let (fb, bb) = layout.channels_at(k);
    let (fa, ba) = layout.channels_at(k + 1);
    let (pfb, pbb, pfa, pba) = (positions(&fb, n), positions(&bb, n), positions(&fa, n), positions(&ba, n));
    let mut out = LayerScattering {
        r: Sparse::default(),
        t: Sparse::default(),
        t_prime: Sparse::default(),
        r_prime: Sparse::default(),
    };
    for g in layer {
        let idx = [g.a, g.b];
        let db = [before[g.a], before[g.b]];
        let da = [after[g.a], after[g.b]];
        let m = scaled_junction(g.z, db, da)?;
        if db[0] == db[1] {
            for (x, &jx) in idx.iter().enumerate() {
                for (y, &jy) in idx.iter().enumerate() {
                    if db[0] == Direction::Forward {
                        out.t.push(pfa[jx], pfb[jy], m[x][y]);
                    } else {
                        out.t_prime.push(pbb[jy], pba[jx], m[x][y]);
                    }
                }
            }
            continue;
        }
        // Local (forward, backward) slots before and after the junction.
        let f = if db[0] == Direction::Forward { 0 } else { 1 };
        let b = 1 - f;
        let f2 = if da[0] == Direction::Forward { 0 } else { 1 };
        let b2 = 1 - f2;
        let sign = if f == f2 { 1.0 } else { -1.0 };
        let (m12, m21, m22) = (m[f2][b], m[b2][f], m[b2][b]);
        let s = sech(2.0 * g.z.re);
        out.r.push(pbb[idx[b]], pfb[idx[f]], -m21 / m22);
        out.t_prime.push(pbb[idx[b]], pba[idx[b2]], s / m22);
        out.t.push(pfa[idx[f2]], pfb[idx[f]], sign * s / m22);
        out.r_prime.push(pfa[idx[f2]], pba[idx[b2]], m12 / m22);
    }
    Ok(out)
}

/// Composed scattering matrix of a schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatteringState {
    #[serde(rename = "M")]
    pub m: usize,
    pub composed_layers: usize,
    /// Backward-out at the bottom from forward-in at the bottom.
    pub r: Array2<f64>,
    /// Backward-out at the bottom from backward-in at the top.
    pub t_prime: Array2<f64>,
    /// Forward-out at the top from forward-in at the bottom.
    pub t: Array2<f64>,
    /// Forward-out at the top from backward-in at the top.
    pub r_prime: Array2<f64>,
    /// `max |S Sᵀ - 1|`.
    pub unitarity_defect: f64,
}

impl ScatteringState {
    pub fn full_matrix(&self) -> Array2<f64> {
        let m = self.m;
        let mut s = Array2::zeros((2 * m, 2 * m));
        s.slice_mut(ndarray::s![..m, ..m]).assign(&self.r);
        s.slice_mut(ndarray::s![..m, m..]).assign(&self.t_prime);
        s.slice_mut(ndarray::s![m.., ..m]).assign(&self.t);
        s.slice_mut(ndarray::s![m.., m..]).assign(&self.r_prime);
        s
    }
}

/// Transmission data only: `T` and `R'`, enough for conductance, quasienergies
/// and the invariant. About half the cost of the full composition.
#[derive(Clone, Debug, PartialEq)]
pub struct Transmission {
    pub m: usize,
    pub composed_layers: usize,
    pub t: Array2<f64>,
    pub r_prime: Array2<f64>,
    /// `max |T Tᵀ + R' R'ᵀ - 1|`.
    pub unitarity_defect: f64,
}

struct Accumulated {
    r: Option<Array2<f64>>,
    t_prime: Option<Array2<f64>>,
    t: Array2<f64>,
    r_prime: Array2<f64>,
}

fn compose(schedule: &GateSchedule, full: bool) -> Result<(Accumulated, usize)> {
    let m = schedule.m;
    let layout = Layout::for_schedule(schedule)?;
    let mut acc = Accumulated {
        r: full.then(|| Array2::zeros((m, m))),
        t_prime: full.then(|| Array2::eye(m)),
        t: Array2::eye(m),
        r_prime: Array2::zeros((m, m)),
    };
    for (k, layer) in schedule.layers().enumerate() {
        let ls = layer_scattering(layer, &layout, k)?;
        if ls.r.is_empty() {
            // No reflection into the accumulated network: plain products.
            acc.t = ls.t.left_mul(m, &acc.t);
            let mut rp = ls.t_prime.right_mul(&ls.t.left_mul(m, &acc.r_prime), m);
            ls.r_prime.add_to(&mut rp);
            acc.r_prime = rp;
            if let Some(tp) = acc.t_prime.as_mut() {
                *tp = ls.t_prime.right_mul(tp, m);
            }
            continue;
        }
        let mut a = ls.r.right_mul(&acc.r_prime, m);
        a.mapv_inplace(|x| -x);
        for d in 0..m {
            a[[d, d]] += 1.0;
        }
        let k_inv = a.inv()?;
        let kt = k_inv.dot(&acc.t);
        let kr = k_inv.dot(&acc.r_prime);
        let kr_t = ls.t_prime.right_mul(&kr, m);
        let new_t = ls.t.left_mul(m, &kt);
        let mut new_rp = ls.t.left_mul(m, &kr_t);
        ls.r_prime.add_to(&mut new_rp);
        if full {
            let tp = acc.t_prime.as_ref().unwrap();
            let w = ls.r.right_mul(tp, m);
            let r = acc.r.as_mut().unwrap();
            *r += &w.dot(&kt);
            let mut new_tp = ls.t_prime.right_mul(tp, m);
            new_tp += &w.dot(&kr_t);
            acc.t_prime = Some(new_tp);
        }
        acc.t = new_t;
        acc.r_prime = new_rp;
    }
    Ok((acc, schedule.num_layers()))
}

fn defect_of(x: &Array2<f64>) -> f64 {
    let mut d = x.clone();
    for i in 0..d.nrows() {
        d[[i, i]] -= 1.0;
    }
    d.norm_max()
}

pub fn compose_network(schedule: &GateSchedule) -> Result<ScatteringState> {
    let (acc, layers) = compose(schedule, true)?;
    let mut state = ScatteringState {
        m: schedule.m,
        composed_layers: layers,
        r: acc.r.unwrap(),
        t_prime: acc.t_prime.unwrap(),
        t: acc.t,
        r_prime: acc.r_prime,
        unitarity_defect: 0.0,
    };
    let s = state.full_matrix();
    state.unitarity_defect = defect_of(&s.dot(&s.t()));
    check_defect(state.unitarity_defect)?;
    Ok(state)
}

pub fn compose_transmission(schedule: &GateSchedule) -> Result<Transmission> {
    let (acc, layers) = compose(schedule, false)?;
    let gram = acc.t.dot(&acc.t.t()) + acc.r_prime.dot(&acc.r_prime.t());
    let defect = defect_of(&gram);
    check_defect(defect)?;
    Ok(Transmission {
        m: schedule.m,
        composed_layers: layers,
        t: acc.t,
        r_prime: acc.r_prime,
        unitarity_defect: defect,
    })
}

fn check_defect(defect: f64) -> Result<()> {
    if defect > UNITARITY_TOL || !defect.is_finite() {
        return Err(Error::NumericalInstability(format!(
            "scattering matrix unitarity defect {defect:.3e}"
        )));
    }
    Ok(())
}

/// Number of Ising rows (`V` layers) spanned by `layers` layers.
pub fn rows_spanned(layers: usize) -> usize {
    layers.div_ceil(2)
}

/// `g = (L/M) tr(T Tᵀ)`.
pub fn conductivity(t: &Array2<f64>, l: usize, m: usize) -> f64 {
    let tr: f64 = t.iter().map(|x| x * x).sum();
    l as f64 / m as f64 * tr
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuasienergySpectrum {
    /// `ε_j ≥ 0` ascending, in units of inverse length.
    pub eps: Vec<f64>,
    /// `ε'_0` with sign `(-1)^M sgn det R`; `NaN` when `R` is unavailable.
    pub eps0_signed: f64,
    /// Length used for the normalisation.
    pub l: usize,
}

impl QuasienergySpectrum {
    /// `Σ_j 1/cosh²(L ε_j)`.
    pub fn transmission_sum(&self) -> f64 {
        self.eps
            .iter()
            .map(|&e| sech(self.l as f64 * e).powi(2))
            .sum()
    }
}

/// `L ε_j` from the transmission singular values `sech(Lε_j)` and the
/// reflection singular values `tanh(Lε_j)`, using whichever is better
/// conditioned for each channel. Ascending.
pub fn scaled_energies(t: &Array2<f64>, r_prime: &Array2<f64>) -> Result<Vec<f64>> {
    let (_, st, _) = t.svd(false, false)?;
    let (_, sr, _) = r_prime.svd(false, false)?;
    let mut st = st.to_vec();
    let mut sr = sr.to_vec();
    st.sort_by(|a, b| b.total_cmp(a));
    sr.sort_by(|a, b| a.total_cmp(b));
    let mut out = Vec::with_capacity(st.len());
    for (&sigma, &rho) in st.iter().zip(&sr) {
        if !(sigma > 0.0) {
            return Err(Error::NumericalInstability(format!(
                "transmission eigenvalue {:.3e} is not positive",
                sigma * sigma
            )));
        }
        let le = if sigma < 0.5 {
            (1.0 / sigma).acosh()
        } else {
            rho.min(1.0 - f64::EPSILON).atanh()
        };
        out.push(le.max(0.0));
    }
    out.sort_by(|a, b| a.total_cmp(b));
    Ok(out)
}

/// `(sgn det X, |det X|)`.
pub fn det_sign(x: &Array2<f64>) -> Result<(f64, f64)> {
    let d = x.det()?;
    Ok((d.signum(), d.abs()))
}

pub fn quasienergies(schedule: &GateSchedule) -> Result<QuasienergySpectrum> {
    let s = compose_network(schedule)?;
    let l = rows_spanned(s.composed_layers);
    let le = scaled_energies(&s.t, &s.r_prime)?;
    let (sign_r, _) = det_sign(&s.r)?;
    let parity_sign = if s.m % 2 == 0 { 1.0 } else { -1.0 };
    let eps: Vec<f64> = le.iter().map(|x| x / l as f64).collect();
    Ok(QuasienergySpectrum {
        eps0_signed: parity_sign * sign_r * eps[0],
        eps,
        l,
    })
}

/// Polar (cosine-sine) decomposition of the network:
/// `R = -u tanh(D) u'`, `T' = u sech(D) v'`, `T = v sech(D) u'`,
/// `R' = v tanh(D) v'`, with `det u · det u' = 1`.
#[derive(Clone, Debug)]
pub struct PolarDecomposition {
    pub u: Array2<f64>,
    pub u_prime: Array2<f64>,
    pub v: Array2<f64>,
    pub v_prime: Array2<f64>,
    /// `L ε'_j`; only the first entry may be negative.
    pub d: Array1<f64>,
    pub reconstruction_error: f64,
}

pub fn polar_decomposition(s: &ScatteringState) -> Result<PolarDecomposition> {
    let m = s.m;
    let n = 2 * m;
    // Column-major copy of S for LAPACK.
    let full = s.full_matrix();
    let mut x = vec![0.0; n * n];
    for j in 0..n {
        for i in 0..n {
            x[i + j * n] = full[[i, j]];
        }
    }
    let mut theta = vec![0.0; m];
    let mut u1 = vec![0.0; m * m];
    let mut u2 = vec![0.0; m * m];
    let mut v1t = vec![0.0; m * m];
    let mut v2t = vec![0.0; m * m];
    let mut iwork = vec![0i32; m.max(1)];
    let (nn, mm) = (n as i32, m as i32);
    let yes = b'Y' as c_char;
    let trans = b'N' as c_char;
    let signs = b'D' as c_char;
    let mut info = 0i32;
    let mut query = 0.0;
    let call = |x: &mut [f64],
                    theta: &mut [f64],
                    u1: &mut [f64],
                    u2: &mut [f64],
                    v1t: &mut [f64],
                    v2t: &mut [f64],
                    work: &mut [f64],
                    lwork: i32,
                    iwork: &mut [i32],
                    info: &mut i32| {
        let base = x.as_mut_ptr();
        // SAFETY: all buffers are sized for an n×n matrix split into four
        // m×m blocks with leading dimension n; the block pointers stay inside
        // `x`.
        unsafe {
            lapack_sys::dorcsd_(
                &yes,
                &yes,
                &yes,
                &yes,
                &trans,
                &signs,
                &nn,
                &mm,
                &mm,
                base,
                &nn,
                base.add(m * n),
                &nn,
                base.add(m),
                &nn,
                base.add(m + m * n),
                &nn,
                theta.as_mut_ptr(),
                u1.as_mut_ptr(),
                &mm,
                u2.as_mut_ptr(),
                &mm,
                v1t.as_mut_ptr(),
                &mm,
                v2t.as_mut_ptr(),
                &mm,
                work.as_mut_ptr(),
                &lwork,
                iwork.as_mut_ptr(),
                info,
            );
        }
    };
    let mut xq = x.clone();
    call(
        &mut xq,
        &mut theta,
        &mut u1,
        &mut u2,
        &mut v1t,
        &mut v2t,
        std::slice::from_mut(&mut query),
        -1,
        &mut iwork,
        &mut info,
    );
    if info != 0 {
        return Err(Error::NumericalInstability(format!("dorcsd workspace query failed ({info})")));
    }
    let mut work = vec![0.0; query as usize + 1];
    let lwork = work.len() as i32;
    call(
        &mut x, &mut theta, &mut u1, &mut u2, &mut v1t, &mut v2t, &mut work, lwork, &mut iwork, &mut info,
    );
    if info != 0 {
        return Err(Error::NumericalInstability(format!("dorcsd did not converge ({info})")));
    }
    let colmajor = |buf: Vec<f64>| Array2::from_shape_vec((m, m).f(), buf).unwrap();
    let mut u = colmajor(u1).mapv(|x| -x);
    let v = colmajor(u2);
    let u_prime = colmajor(v1t);
    let mut v_prime = colmajor(v2t);
    // tanh D = cos θ, sech D = sin θ.
    let mut d = Array1::from_iter(theta.iter().map(|&t| -(0.5 * t).tan().ln()));
    let det_u = u.det()? * u_prime.det()?;
    if det_u < 0.0 && m > 0 {
        u.column_mut(0).mapv_inplace(|x| -x);
        v_prime.row_mut(0).mapv_inplace(|x| -x);
        d[0] = -d[0];
    }
    let mut polar = PolarDecomposition {
        u,
        u_prime,
        v,
        v_prime,
        d,
        reconstruction_error: 0.0,
    };
    polar.reconstruction_error = polar_error(&polar, s);
    Ok(polar)
}

fn polar_error(p: &PolarDecomposition, s: &ScatteringState) -> f64 {
    let th = Array2::from_diag(&p.d.mapv(f64::tanh));
    let se = Array2::from_diag(&p.d.mapv(sech));
    let r = -p.u.dot(&th).dot(&p.u_prime);
    let tp = p.u.dot(&se).dot(&p.v_prime);
    let t = p.v.dot(&se).dot(&p.u_prime);
    let rp = p.v.dot(&th).dot(&p.v_prime);
    [
        (&r - &s.r).norm_max(),
        (&tp - &s.t_prime).norm_max(),
        (&t - &s.t).norm_max(),
        (&rp - &s.r_prime).norm_max(),
    ]
    .into_iter()
    .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct InvariantSample {
    /// `sgn det(R'_pbc) · sgn det(R'_apbc)`.
    pub i_sample: i8,
    pub det_sign_pbc: i8,
    pub det_sign_apbc: i8,
    /// Whether `min_j L ε_j` exceeds the gap threshold in both sectors.
    pub gapped: bool,
    /// `min_j L ε_j` over both boundary conditions.
    pub min_scaled_gap: f64,
    /// Conductivity of the periodic network.
    pub g_pbc: f64,
    pub eps_min: f64,
}

/// Default threshold on `min_j L ε_j` for trusting the invariant.
pub const DEFAULT_GAP_THRESHOLD: f64 = 2.0;

/// Topological invariant of the first `l_inv` rows of a realization.
pub fn topological_invariant(field: &CouplingField, l_inv: usize, gap_threshold: f64) -> Result<InvariantSample> {
    if l_inv == 0 || l_inv > field.l {
        return Err(Error::InvalidGeometry(format!(
            "invariant length {l_inv} outside 1..={}",
            field.l
        )));
    }
    let field = field.truncated(l_inv);
    let mut signs = [0i8; 2];
    let mut min_gap = f64::INFINITY;
    let mut g_pbc = 0.0;
    for (k, bc) in [BoundaryCondition::Pbc, BoundaryCondition::Apbc].into_iter().enumerate() {
        let schedule = build_schedule(&field, bc, 0, Ordering::EvolutionOrder);
        let tr = compose_transmission(&schedule)?;
        let (sign, magnitude) = det_sign(&tr.r_prime)?;
        if magnitude < 1e-12 {
            return Err(Error::IndeterminateInvariant(magnitude));
        }
        signs[k] = sign as i8;
        let le = scaled_energies(&tr.t, &tr.r_prime)?;
        min_gap = min_gap.min(le[0]);
        if k == 0 {
            g_pbc = conductivity(&tr.t, l_inv, field.m);
        }
    }
    Ok(InvariantSample {
        i_sample: signs[0] * signs[1],
        det_sign_pbc: signs[0],
        det_sign_apbc: signs[1],
        gapped: min_gap > gap_threshold,
        min_scaled_gap: min_gap,
        g_pbc,
        eps_min: min_gap / l_inv as f64,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalizationFit {
    pub xi: f64,
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
}

/// `g ∝ e^{-2L/ξ}`: least squares of `ln g` against `L`.
pub fn localization_length(series: &[(f64, f64)]) -> Result<LocalizationFit> {
    if series.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "localization fit needs at least 4 points, got {}",
            series.len()
        )));
    }
    if series.iter().any(|&(_, g)| !(g > 0.0)) {
        return Err(Error::InvalidInput("conductivities must be positive".into()));
    }
    let xs: Vec<f64> = series.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = series.iter().map(|p| p.1.ln()).collect();
    let fit = crate::stats::linear_fit(&xs, &ys)?;
    if fit.slope >= 0.0 {
        return Err(Error::NotLocalized { slope: fit.slope });
    }
    Ok(LocalizationFit {
        xi: -2.0 / fit.slope,
        slope: fit.slope,
        intercept: fit.intercept,
        r_squared: fit.r_squared,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit::build_schedule;
    use crate::disorder::{sample_field, ErrorModel};
    use std::f64::consts::PI;

    fn schedule(model: ErrorModel, m: usize, l: usize, seed: u64) -> GateSchedule {
        let field = sample_field(model, m, l, seed).unwrap();
        build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder)
    }

    #[test]
    fn zero_coupling_transmits_perfectly() {
        let mut s = schedule(ErrorModel::nishimori(0.2).unwrap(), 6, 4, 1);
        s.gates.iter_mut().for_each(|g| g.z = Complex64::new(0.0, 0.0));
        let net = compose_network(&s).unwrap();
        assert!((&net.t - &Array2::<f64>::eye(6)).norm_max() < 1e-15);
        assert!(net.r.norm_max() < 1e-15);
        assert!((conductivity(&net.t, 6, 6) - 6.0).abs() < 1e-12);
        let q = quasienergies(&s);
        // R = 0 has no sign; only the unsigned spectrum is meaningful.
        assert!(q.is_ok());
        assert!(q.unwrap().eps.iter().all(|&e| e.abs() < 1e-7));
    }

    #[test]
    fn layouts_restore_every_four_layers() {
        let s = schedule(ErrorModel::twirl(0.12 * PI).unwrap(), 6, 4, 3);
        let layout = Layout::for_schedule(&s).unwrap();
        assert_eq!(layout.cuts[0], layout.cuts[4]);
        assert_ne!(layout.cuts[0], layout.cuts[1]);
        let (f, b) = layout.channels_at(0);
        assert_eq!(f, vec![0, 1, 4, 5, 8, 9]);
        assert_eq!(b, vec![2, 3, 6, 7, 10, 11]);
    }

    #[test]
    fn odd_circumference_complex_layout_rejected() {
        let field = sample_field(ErrorModel::twirl(0.1).unwrap(), 4, 2, 1).unwrap();
        let mut s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        s.m = 3;
        s.gates.truncate(12);
        assert!(matches!(Layout::for_schedule(&s), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn composed_networks_are_orthogonal() {
        for (model, l) in [
            (ErrorModel::nishimori(0.1).unwrap(), 7),
            (ErrorModel::twirl(0.15 * PI).unwrap(), 8),
        ] {
            let s = compose_network(&schedule(model, 8, l, 4)).unwrap();
            assert!(s.unitarity_defect < 1e-12, "{}", s.unitarity_defect);
        }
    }

    #[test]
    fn transmission_matches_full_composition() {
        let s = schedule(ErrorModel::nishimori(0.2).unwrap(), 6, 9, 2);
        let full = compose_network(&s).unwrap();
        let part = compose_transmission(&s).unwrap();
        assert!((&full.t - &part.t).norm_max() < 1e-12);
        assert!((&full.r_prime - &part.r_prime).norm_max() < 1e-12);
    }

    #[test]
    fn localization_fit_on_exact_data() {
        let series: Vec<(f64, f64)> = (1..6).map(|l| (l as f64, (-2.0 * l as f64 / 7.0).exp())).collect();
        let fit = localization_length(&series).unwrap();
        assert!((fit.xi - 7.0).abs() < 1e-6);
        let growing: Vec<(f64, f64)> = (1..6).map(|l| (l as f64, l as f64)).collect();
        assert!(matches!(localization_length(&growing), Err(Error::NotLocalized { .. })));
    }

    #[test]
    fn polar_decomposition_reconstructs() {
        let s = compose_network(&schedule(ErrorModel::nishimori(0.15).unwrap(), 6, 5, 8)).unwrap();
        let p = polar_decomposition(&s).unwrap();
        assert!(p.reconstruction_error < 1e-10);
        assert!(p.u.det().unwrap() * p.u_prime.det().unwrap() > 0.0);
        assert!(p.d.iter().skip(1).all(|&x| x >= 0.0));
    }
}
