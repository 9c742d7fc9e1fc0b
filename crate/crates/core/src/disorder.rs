//! Random-bond Ising couplings and disorder realizations.
//!
//! Two error models feed the same square-lattice Ising model on a cylinder of
//! circumference `M` and length `L`:
//!
//! * incoherent bit flips give a real coupling `J = ½ ln((1-p)/p)` (the
//!   Nishimori line when the bond signs are drawn with the same `p`);
//! * coherent rotations `exp(iφX)` give `J = -½ log(i tan φ)`, so that
//!   `Re J = -½ ln tan φ` and `Im J = -π/4`.
//!
//! Bond signs `η = ±1` are i.i.d. with `P(η = -1) = p`. Each sign is a pure
//! function of `(seed, layer, site, orientation)`, drawn from a keyed ChaCha
//! stream, so grids can be regenerated in any order or in parallel.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4};

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use num_complex::Complex64;
use rand::RngCore;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which physical error process the Ising model encodes.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ErrorModel {
    /// Bit flips with probability `p`; real coupling on the Nishimori line.
    Incoherent { p: f64 },
    /// Coherent rotation by `phi` with bond-flip probability `p`.
    Coherent { p: f64, phi: f64 },
}

impl ErrorModel {
    pub fn nishimori(p: f64) -> Result<Self> {
        let model = ErrorModel::Incoherent { p };
        model.validate()?;
        Ok(model)
    }

    /// Coherent model on the partial Pauli twirl line `p = sin² φ`.
    pub fn twirl(phi: f64) -> Result<Self> {
        let model = ErrorModel::Coherent {
            p: phi.sin().powi(2),
            phi,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn coherent(p: f64, phi: f64) -> Result<Self> {
        let model = ErrorModel::Coherent { p, phi };
        model.validate()?;
        Ok(model)
    }

    pub fn p(&self) -> f64 {
        match *self {
            ErrorModel::Incoherent { p } | ErrorModel::Coherent { p, .. } => p,
        }
    }

    pub fn phi(&self) -> Option<f64> {
        match *self {
            ErrorModel::Incoherent { .. } => None,
            ErrorModel::Coherent { phi, .. } => Some(phi),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::InvalidInput(format!("p = {p} outside [0, 1]")));
        }
        if let Some(phi) = self.phi() {
            if !(0.0..=FRAC_PI_4 + 1e-15).contains(&phi) {
                return Err(Error::InvalidInput(format!("phi = {phi} outside [0, pi/4]")));
            }
        }
        Ok(())
    }

    /// The Ising coupling this model induces.
    pub fn coupling(&self) -> Result<Coupling> {
        match *self {
            ErrorModel::Incoherent { p } => real_coupling(p),
            ErrorModel::Coherent { phi, .. } => complex_coupling(phi),
        }
    }
}

/// The (dimensionless) Ising coupling `J`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Coupling {
    Real(f64),
    /// `J = -½ log(i tan φ)`; the angle is kept because the horizontal
    /// layer parameters are expressed through it.
    Complex { phi: f64 },
}

impl Coupling {
    pub fn j(&self) -> Complex64 {
        match *self {
            Coupling::Real(j) => Complex64::new(j, 0.0),
            Coupling::Complex { phi } => Complex64::new(-0.5 * phi.tan().ln(), -FRAC_PI_4),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Coupling::Real(_))
    }
}

/// `J = ½ ln((1-p)/p)`.
pub fn real_coupling(p: f64) -> Result<Coupling> {
    if p <= 0.0 || p >= 1.0 || p.is_nan() {
        return Err(Error::DivergentCoupling {
            what: format!("p = {p}"),
        });
    }
    Ok(Coupling::Real(0.5 * ((1.0 - p) / p).ln()))
}

/// `J = -½ [ln tan φ + iπ/2]`.
pub fn complex_coupling(phi: f64) -> Result<Coupling> {
    if phi <= 0.0 || phi.is_nan() {
        return Err(Error::DivergentCoupling {
            what: format!("phi = {phi}"),
        });
    }
    if phi > FRAC_PI_4 + 1e-15 {
        return Err(Error::InvalidInput(format!("phi = {phi} exceeds pi/4")));
    }
    Ok(Coupling::Complex { phi })
}

/// Bond orientation; selects the random stream.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bond {
    Horizontal,
    Vertical,
}

/// One disorder realization on an `L × M` cylinder.
#[derive(Clone, Debug, PartialEq)]
pub struct CouplingField {
    pub m: usize,
    pub l: usize,
    pub model: ErrorModel,
    pub coupling: Coupling,
    pub seed: u64,
    /// Horizontal bond signs, row-major `L × M`.
    pub eta_h: Vec<i8>,
    /// Vertical bond signs, row-major `L × M`.
    pub eta_v: Vec<i8>,
}

/// Uniform variate in `[0, 1)` for one bond.
fn bond_uniform(seed: u64, layer: usize, site: usize, bond: Bond) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(match bond {
        Bond::Horizontal => 0,
        Bond::Vertical => 1,
    });
    // Two 32-bit words per bond; the position is independent of the geometry.
    let index = ((layer as u128) << 32) | site as u128;
    rng.set_word_pos(index * 2);
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Sign of bond `(layer, site)`; `-1` with probability `p`.
pub fn bond_sign(seed: u64, layer: usize, site: usize, bond: Bond, p: f64) -> i8 {
    if bond_uniform(seed, layer, site, bond) < p {
        -1
    } else {
        1
    }
}

pub fn sample_field(model: ErrorModel, m: usize, l: usize, seed: u64) -> Result<CouplingField> {
    model.validate()?;
    if m == 0 || m % 2 == 1 {
        return Err(Error::InvalidGeometry(format!("circumference M = {m} must be even and positive")));
    }
    if l == 0 {
        return Err(Error::InvalidGeometry("length L must be at least 1".into()));
    }
    let coupling = model.coupling()?;
    let p = model.p();
    let grid = |bond| {
        (0..l)
            .flat_map(|n| (0..m).map(move |i| (n, i)))
            .map(|(n, i)| bond_sign(seed, n, i, bond, p))
            .collect::<Vec<_>>()
    };
    Ok(CouplingField {
        m,
        l,
        model,
        coupling,
        seed,
        eta_h: grid(Bond::Horizontal),
        eta_v: grid(Bond::Vertical),
    })
}

/// Parameters of layer `n` (0-based): `κ_{n,i} = J η^v_{n,i}` and
/// `κ̃_{n,i} = -½ log tanh(J η^h_{n,i})`.
///
/// For real `J` a negative `tanh` takes the `+iπ/2` branch. For complex `J`
/// the horizontal parameter is `i(φ - (1 - η^h) π/4)`.
pub fn layer_parameters(field: &CouplingField, n: usize) -> (Vec<Complex64>, Vec<Complex64>) {
    assert!(n < field.l, "layer {n} out of range (L = {})", field.l);
    let j = field.coupling.j();
    let row = n * field.m..(n + 1) * field.m;
    let kappa = field.eta_v[row.clone()]
        .iter()
        .map(|&eta| j * eta as f64)
        .collect();
    let kappa_tilde = field.eta_h[row]
        .iter()
        .map(|&eta| horizontal_parameter(&field.coupling, eta))
        .collect();
    (kappa, kappa_tilde)
}

pub fn horizontal_parameter(coupling: &Coupling, eta: i8) -> Complex64 {
    match *coupling {
        Coupling::Real(j) => {
            let t = (j * eta as f64).tanh();
            let im = if t < 0.0 { FRAC_PI_2 } else { 0.0 };
            Complex64::new(-0.5 * t.abs().ln(), im)
        }
        Coupling::Complex { phi } => Complex64::new(0.0, phi - (1 - eta) as f64 * FRAC_PI_4),
    }
}

fn pack_bits(signs: &[i8]) -> String {
    let mut bytes = vec![0u8; signs.len().div_ceil(8)];
    for (k, &s) in signs.iter().enumerate() {
        if s < 0 {
            bytes[k / 8] |= 1 << (k % 8);
        }
    }
    BASE64.encode(bytes)
}

fn unpack_bits(encoded: &str, count: usize) -> Result<Vec<i8>> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| Error::InvalidInput(format!("bad base64 bond grid: {e}")))?;
    if bytes.len() != count.div_ceil(8) {
        return Err(Error::InvalidInput(format!(
            "bond grid holds {} bytes, expected {}",
            bytes.len(),
            count.div_ceil(8)
        )));
    }
    Ok((0..count)
        .map(|k| if bytes[k / 8] >> (k % 8) & 1 == 1 { -1 } else { 1 })
        .collect())
}

#[derive(Serialize, Deserialize)]
struct FieldDocument {
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "L")]
    l: usize,
    seed: u64,
    model: ModelDocument,
    eta_h: String,
    eta_v: String,
}

#[derive(Serialize, Deserialize)]
struct ModelDocument {
    kind: String,
    p: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    phi: Option<f64>,
}

impl CouplingField {
    /// The first `rows` rows of the field.
    pub fn truncated(&self, rows: usize) -> CouplingField {
        let rows = rows.min(self.l);
        CouplingField {
            l: rows,
            eta_h: self.eta_h[..rows * self.m].to_vec(),
            eta_v: self.eta_v[..rows * self.m].to_vec(),
            ..self.clone()
        }
    }

    pub fn eta_h(&self, n: usize, i: usize) -> i8 {
        self.eta_h[n * self.m + i]
    }

    pub fn eta_v(&self, n: usize, i: usize) -> i8 {
        self.eta_v[n * self.m + i]
    }

    /// JSON document with both sign grids packed as base64 bit strings
    /// (bit `n·M + i`, LSB first; `1` means `η = -1`).
    pub fn to_json(&self) -> Result<String> {
        let model = match self.model {
            ErrorModel::Incoherent { p } => ModelDocument {
                kind: "Incoherent".into(),
                p,
                phi: None,
            },
            ErrorModel::Coherent { p, phi } => ModelDocument {
                kind: "Coherent".into(),
                p,
                phi: Some(phi),
            },
        };
        let doc = FieldDocument {
            m: self.m,
            l: self.l,
            seed: self.seed,
            model,
            eta_h: pack_bits(&self.eta_h),
            eta_v: pack_bits(&self.eta_v),
        };
        Ok(serde_json::to_string(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: FieldDocument = serde_json::from_str(text)?;
        let model = match (doc.model.kind.as_str(), doc.model.phi) {
            ("Incoherent", None) => ErrorModel::Incoherent { p: doc.model.p },
            ("Coherent", Some(phi)) => ErrorModel::Coherent { p: doc.model.p, phi },
            (kind, _) => return Err(Error::InvalidInput(format!("bad model kind {kind:?}"))),
        };
        model.validate()?;
        if doc.m == 0 || doc.m % 2 == 1 || doc.l == 0 {
            return Err(Error::InvalidGeometry(format!("M = {}, L = {}", doc.m, doc.l)));
        }
        let count = doc.m * doc.l;
        Ok(CouplingField {
            m: doc.m,
            l: doc.l,
            coupling: model.coupling()?,
            model,
            seed: doc.seed,
            eta_h: unpack_bits(&doc.eta_h, count)?,
            eta_v: unpack_bits(&doc.eta_v, count)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    #[test]
    fn real_coupling_values() {
        assert_eq!(real_coupling(0.5).unwrap(), Coupling::Real(0.0));
        let Coupling::Real(j) = real_coupling(0.1093).unwrap() else { unreachable!() };
        assert_abs_diff_eq!(j, 1.048955637627665, epsilon = 1e-12);
        assert!(matches!(real_coupling(0.0), Err(Error::DivergentCoupling { .. })));
        assert!(matches!(real_coupling(1.0), Err(Error::DivergentCoupling { .. })));
    }

    #[test]
    fn complex_coupling_values() {
        let j = complex_coupling(PI / 4.0).unwrap().j();
        assert_abs_diff_eq!(j.re, 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(j.im, -PI / 4.0, epsilon = 1e-15);
        let j = complex_coupling(0.095 * PI).unwrap().j();
        assert_abs_diff_eq!(j.re, 0.589412229652507, epsilon = 1e-12);
        assert_abs_diff_eq!(j.im, -PI / 4.0, epsilon = 1e-15);
        assert!(matches!(complex_coupling(0.0), Err(Error::DivergentCoupling { .. })));
    }

    #[test]
    fn coupling_identities() {
        for p in [0.01, 0.1093, 0.3, 0.49] {
            let j = real_coupling(p).unwrap().j().re;
            assert_abs_diff_eq!((2.0 * j).exp() * p / (1.0 - p), 1.0, epsilon = 1e-13);
        }
        for phi in [0.01, 0.1 * PI, 0.2 * PI, PI / 4.0] {
            let lhs = (-2.0 * complex_coupling(phi).unwrap().j()).exp();
            assert_abs_diff_eq!(lhs.re, 0.0, epsilon = 1e-14);
            assert_abs_diff_eq!(lhs.im, phi.tan(), epsilon = 1e-14);
        }
    }

    #[test]
    fn extreme_probabilities() {
        let ones = sample_field(ErrorModel::Coherent { p: 0.0, phi: 0.1 }, 4, 3, 9).unwrap();
        assert!(ones.eta_h.iter().chain(&ones.eta_v).all(|&s| s == 1));
        let flipped = sample_field(ErrorModel::Coherent { p: 1.0, phi: 0.1 }, 4, 3, 9).unwrap();
        assert!(flipped.eta_h.iter().chain(&flipped.eta_v).all(|&s| s == -1));
    }

    #[test]
    fn odd_circumference_rejected() {
        let model = ErrorModel::nishimori(0.1).unwrap();
        assert!(matches!(sample_field(model, 5, 2, 0), Err(Error::InvalidGeometry(_))));
        assert!(matches!(sample_field(model, 4, 0, 0), Err(Error::InvalidGeometry(_))));
    }

    #[test]
    fn half_probability_fraction() {
        let model = ErrorModel::Coherent { p: 0.5, phi: 0.1 };
        let field = sample_field(model, 1000, 500, 42).unwrap();
        let n = field.eta_h.len() + field.eta_v.len();
        let flips = field.eta_h.iter().chain(&field.eta_v).filter(|&&s| s < 0).count();
        assert_eq!(n, 1_000_000);
        assert!((flips as f64 / n as f64 - 0.5).abs() < 0.0015);
    }

    #[test]
    fn frequencies_within_binomial_bounds() {
        for p in [0.1, 0.3, 0.5] {
            let field = sample_field(ErrorModel::Coherent { p, phi: 0.2 }, 200, 250, 7).unwrap();
            let n = (field.eta_h.len() + field.eta_v.len()) as f64;
            let flips = field.eta_h.iter().chain(&field.eta_v).filter(|&&s| s < 0).count() as f64;
            let sigma = (p * (1.0 - p) / n).sqrt();
            assert!((flips / n - p).abs() < 4.0 * sigma, "p = {p}");
        }
    }

    #[test]
    fn signs_independent_of_geometry() {
        let model = ErrorModel::nishimori(0.3).unwrap();
        let small = sample_field(model, 4, 3, 11).unwrap();
        let large = sample_field(model, 8, 5, 11).unwrap();
        for n in 0..3 {
            for i in 0..4 {
                assert_eq!(small.eta_h(n, i), large.eta_h(n, i));
                assert_eq!(small.eta_v(n, i), large.eta_v(n, i));
            }
        }
    }

    #[test]
    fn horizontal_parameter_branches() {
        let k = horizontal_parameter(&Coupling::Real(1.0), 1);
        assert_abs_diff_eq!(k.re, 0.136170734455916, epsilon = 1e-12);
        assert_eq!(k.im, 0.0);
        let k = horizontal_parameter(&Coupling::Real(1.0), -1);
        assert_abs_diff_eq!(k.re, 0.136170734455916, epsilon = 1e-12);
        assert_abs_diff_eq!(k.im, PI / 2.0, epsilon = 1e-15);
        let k = horizontal_parameter(&Coupling::Complex { phi: 0.1 * PI }, 1);
        assert_eq!(k.re, 0.0);
        assert_abs_diff_eq!(k.im, 0.1 * PI, epsilon = 1e-15);
    }

    #[test]
    fn complex_horizontal_matches_log_tanh() {
        // κ̃ = -½ log tanh(Jη) up to the iπ branch of the logarithm.
        for phi in [0.05 * PI, 0.15 * PI, 0.24 * PI] {
            let c = Coupling::Complex { phi };
            for eta in [1i8, -1] {
                let direct = -0.5 * (c.j() * eta as f64).tanh().ln();
                let k = horizontal_parameter(&c, eta);
                assert_abs_diff_eq!(k.re, direct.re, epsilon = 1e-12);
                let dim = (k.im - direct.im) / PI;
                assert_abs_diff_eq!(dim, dim.round(), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let field = sample_field(ErrorModel::twirl(0.12 * PI).unwrap(), 6, 5, 3).unwrap();
        let back = CouplingField::from_json(&field.to_json().unwrap()).unwrap();
        assert_eq!(back, field);
        let doc: serde_json::Value = serde_json::from_str(&field.to_json().unwrap()).unwrap();
        assert_eq!(doc["M"], 6);
        assert_eq!(doc["model"]["kind"], "Coherent");
    }
}
