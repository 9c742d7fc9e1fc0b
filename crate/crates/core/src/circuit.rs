//! Compilation of a coupling field into a schedule of two-Majorana gates.
//!
//! Majorana indices are 0-based: site `i` (0-based) carries `γ_{2i}` and
//! `γ_{2i+1}`. Every gate is `exp(i z γ_a γ_b)` with
//!
//! * `H` on `(2i, 2i+1)` with `z = -κ̃_{n,i}`,
//! * `V` on `(2i+1, 2i+2)` with `z = -κ_{n,i}` for `i < M-1`,
//! * the wrap-around `Vboundary` on `(2M-1, 0)` with `z = -κ_{n,M-1}` for
//!   periodic and `z = +κ_{n,M-1}` for antiperiodic fermion boundary conditions.
//!
//! The homology sector `q = 1` flips the vertical bonds of the wrap-around
//! column in every layer, which is equivalent to swapping pbc and apbc.

use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::disorder::{layer_parameters, CouplingField};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GateKind {
    H,
    V,
    Vboundary,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Pbc,
    Apbc,
}

impl BoundaryCondition {
    pub fn flipped(self) -> Self {
        match self {
            BoundaryCondition::Pbc => BoundaryCondition::Apbc,
            BoundaryCondition::Apbc => BoundaryCondition::Pbc,
        }
    }
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BoundaryCondition::Pbc => "pbc",
            BoundaryCondition::Apbc => "apbc",
        })
    }
}

impl FromStr for BoundaryCondition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pbc" => Ok(BoundaryCondition::Pbc),
            "apbc" => Ok(BoundaryCondition::Apbc),
            _ => Err(Error::InvalidInput(format!("unknown boundary condition {s:?}"))),
        }
    }
}

/// Layer order of the schedule.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Ordering {
    /// `H_L V_L … H_1 V_1`: `2L` layers.
    EvolutionOrder,
    /// `V_L H_{L-1} … H_1 V_1`: `2L - 1` layers.
    PartitionOrder,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "GateRecord", from = "GateRecord")]
pub struct Gate {
    pub a: usize,
    pub b: usize,
    /// Coefficient in `exp(i z γ_a γ_b)`.
    pub z: Complex64,
    /// Position of the layer in the schedule (0-based).
    pub layer: usize,
    pub kind: GateKind,
}

#[derive(Serialize, Deserialize)]
struct GateRecord {
    layer: usize,
    kind: GateKind,
    a: usize,
    b: usize,
    re_z: f64,
    im_z: f64,
}

impl From<Gate> for GateRecord {
    fn from(g: Gate) -> Self {
        GateRecord {
            layer: g.layer,
            kind: g.kind,
            a: g.a,
            b: g.b,
            re_z: g.z.re,
            im_z: g.z.im,
        }
    }
}

impl From<GateRecord> for Gate {
    fn from(r: GateRecord) -> Self {
        Gate {
            a: r.a,
            b: r.b,
            z: Complex64::new(r.re_z, r.im_z),
            layer: r.layer,
            kind: r.kind,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateSchedule {
    #[serde(rename = "M")]
    pub m: usize,
    #[serde(rename = "L")]
    pub l: usize,
    pub bc: BoundaryCondition,
    pub q: u8,
    pub ordering: Ordering,
    /// Gates layer by layer; every layer holds exactly `M` gates on
    /// disjoint Majorana pairs.
    pub gates: Vec<Gate>,
}

impl GateSchedule {
    pub fn num_layers(&self) -> usize {
        self.gates.len() / self.m
    }

    pub fn layer(&self, k: usize) -> &[Gate] {
        &self.gates[k * self.m..(k + 1) * self.m]
    }

    pub fn layers(&self) -> std::slice::Chunks<'_, Gate> {
        self.gates.chunks(self.m)
    }

    /// Schedule restricted to its first `count` layers.
    pub fn truncated(&self, count: usize) -> GateSchedule {
        let count = count.min(self.num_layers());
        GateSchedule {
            gates: self.gates[..count * self.m].to_vec(),
            ..self.clone()
        }
    }

    /// Schedule made of layers `start..end`, renumbered from zero.
    pub fn slice_layers(&self, start: usize, end: usize) -> GateSchedule {
        let end = end.min(self.num_layers());
        let gates = self.gates[start * self.m..end * self.m]
            .iter()
            .map(|g| Gate {
                layer: g.layer - start,
                ..*g
            })
            .collect();
        GateSchedule {
            gates,
            ..self.clone()
        }
    }

    /// Whether some V gate carries an imaginary part of `π/4` modulo `π/2`,
    /// i.e. the network uses the co-propagating (complex coupling) layout.
    pub fn is_complex_layout(&self) -> bool {
        self.gates
            .iter()
            .any(|g| g.kind != GateKind::H && is_swap_angle(g.z.im))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schedule: GateSchedule = serde_json::from_str(text)?;
        if schedule.m == 0 || schedule.gates.len() % schedule.m != 0 {
            return Err(Error::InvalidInput("gate count is not a multiple of M".into()));
        }
        Ok(schedule)
    }
}

pub(crate) fn is_swap_angle(theta: f64) -> bool {
    let r = (theta / std::f64::consts::FRAC_PI_2).rem_euclid(1.0);
    (r - 0.5).abs() < 1e-9
}

pub fn build_schedule(
    field: &CouplingField,
    bc: BoundaryCondition,
    q: u8,
    ordering: Ordering,
) -> GateSchedule {
    let m = field.m;
    let l = field.l;
    // q = 1 negates κ on the wrap-around bond, which is the same sign flip as
    // toggling the boundary condition.
    let wrap_sign = match (bc, q % 2) {
        (BoundaryCondition::Pbc, 0) | (BoundaryCondition::Apbc, 1) => -1.0,
        _ => 1.0,
    };
    let layer_count = match ordering {
        Ordering::EvolutionOrder => 2 * l,
        Ordering::PartitionOrder => 2 * l - 1,
    };
    let mut gates = Vec::with_capacity(layer_count * m);
    for n in 0..l {
        let (kappa, kappa_tilde) = layer_parameters(field, n);
        let layer = 2 * n;
        for i in 0..m {
            let gate = if i + 1 < m {
                Gate {
                    a: 2 * i + 1,
                    b: 2 * i + 2,
                    z: -kappa[i],
                    layer,
                    kind: GateKind::V,
                }
            } else {
                Gate {
                    a: 2 * m - 1,
                    b: 0,
                    z: wrap_sign * kappa[i],
                    layer,
                    kind: GateKind::Vboundary,
                }
            };
            gates.push(gate);
        }
        if layer + 1 < layer_count {
            for (i, &kt) in kappa_tilde.iter().enumerate() {
                gates.push(Gate {
                    a: 2 * i,
                    b: 2 * i + 1,
                    z: -kt,
                    layer: layer + 1,
                    kind: GateKind::H,
                });
            }
        }
    }
    GateSchedule {
        m,
        l,
        bc,
        q: q % 2,
        ordering,
        gates,
    }
}

/// 2×2 single-particle transfer block of one gate, acting on `(a, b)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PlacedBlock {
    pub a: usize,
    pub b: usize,
    pub layer: usize,
    pub t: [[Complex64; 2]; 2],
}

/// `t = exp(-2zY)` with `Y = [[0, -i], [i, 0]]`, so `γ_i ↦ Σ_j t_{ji} γ_j`
/// under conjugation by the gate. With `z = -κ` this is `exp(2κY)`.
pub fn transfer_block(z: Complex64) -> [[Complex64; 2]; 2] {
    let x = -2.0 * z;
    let c = x.cosh();
    let s = x.sinh();
    let i = Complex64::i();
    [[c, -i * s], [i * s, c]]
}

pub fn single_particle_blocks(schedule: &GateSchedule) -> Vec<PlacedBlock> {
    schedule
        .gates
        .iter()
        .map(|g| PlacedBlock {
            a: g.a,
            b: g.b,
            layer: g.layer,
            t: transfer_block(g.z),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::disorder::{sample_field, ErrorModel};
    use std::f64::consts::PI;

    type Mat2 = [[Complex64; 2]; 2];

    fn mul(x: &Mat2, y: &Mat2) -> Mat2 {
        let mut out = [[Complex64::new(0.0, 0.0); 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = x[i][0] * y[0][j] + x[i][1] * y[1][j];
            }
        }
        out
    }

    fn dagger(x: &Mat2) -> Mat2 {
        [[x[0][0].conj(), x[1][0].conj()], [x[0][1].conj(), x[1][1].conj()]]
    }

    fn inverse(x: &Mat2) -> Mat2 {
        let det = x[0][0] * x[1][1] - x[0][1] * x[1][0];
        [[x[1][1] / det, -x[0][1] / det], [-x[1][0] / det, x[0][0] / det]]
    }

    fn max_diff(x: &Mat2, y: &Mat2) -> f64 {
        let mut d: f64 = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                d = d.max((x[i][j] - y[i][j]).norm());
            }
        }
        d
    }

    const ONE: Complex64 = Complex64::new(1.0, 0.0);
    const ZERO: Complex64 = Complex64::new(0.0, 0.0);
    const PZ: Mat2 = [[ONE, ZERO], [ZERO, Complex64::new(-1.0, 0.0)]];
    const PX: Mat2 = [[ZERO, ONE], [ONE, ZERO]];

    #[test]
    fn counting_and_order() {
        let field = sample_field(ErrorModel::nishimori(0.2).unwrap(), 4, 3, 1).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        assert_eq!(s.num_layers(), 6);
        assert_eq!(s.gates.len(), 24);
        for (k, layer) in s.layers().enumerate() {
            let expected = if k % 2 == 0 { GateKind::V } else { GateKind::H };
            assert!(layer.iter().all(|g| g.layer == k));
            assert!(layer.iter().all(|g| (g.kind == GateKind::H) == (expected == GateKind::H)));
        }
        let p = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::PartitionOrder);
        assert_eq!(p.num_layers(), 5);
        assert_eq!(p.gates[..], s.gates[..20]);
    }

    #[test]
    fn disjoint_pairs_cover_all_modes() {
        let field = sample_field(ErrorModel::twirl(0.1).unwrap(), 6, 2, 5).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Apbc, 1, Ordering::EvolutionOrder);
        for layer in s.layers() {
            let mut seen = vec![false; 12];
            for g in layer {
                assert_ne!(g.a, g.b);
                assert!(!seen[g.a] && !seen[g.b]);
                seen[g.a] = true;
                seen[g.b] = true;
            }
            assert!(seen.iter().all(|&x| x));
        }
    }

    #[test]
    fn boundary_toggle_only_flips_wrap_gates() {
        let field = sample_field(ErrorModel::nishimori(0.3).unwrap(), 4, 3, 2).unwrap();
        let pbc = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let apbc = build_schedule(&field, BoundaryCondition::Apbc, 0, Ordering::EvolutionOrder);
        let mut flipped = 0;
        for (x, y) in pbc.gates.iter().zip(&apbc.gates) {
            if x.kind == GateKind::Vboundary {
                assert_eq!(x.z, -y.z);
                flipped += 1;
            } else {
                assert_eq!(x, y);
            }
        }
        assert_eq!(flipped, 3);
    }

    #[test]
    fn homology_toggle_equals_boundary_toggle() {
        let field = sample_field(ErrorModel::nishimori(0.3).unwrap(), 4, 3, 2).unwrap();
        let a = build_schedule(&field, BoundaryCondition::Pbc, 1, Ordering::EvolutionOrder);
        let b = build_schedule(&field, BoundaryCondition::Apbc, 0, Ordering::EvolutionOrder);
        assert_eq!(a.gates, b.gates);
    }

    #[test]
    fn gate_strengths_follow_layer_parameters() {
        let field = sample_field(ErrorModel::nishimori(0.3).unwrap(), 4, 2, 8).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let (kappa, kappa_tilde) = layer_parameters(&field, 1);
        for (i, g) in s.layer(2).iter().enumerate() {
            assert_eq!(g.z, -kappa[i]);
        }
        for (i, g) in s.layer(3).iter().enumerate() {
            assert_eq!(g.z, -kappa_tilde[i]);
            assert_eq!((g.a, g.b), (2 * i, 2 * i + 1));
        }
    }

    #[test]
    fn zero_strength_block_is_identity() {
        let t = transfer_block(Complex64::new(0.0, 0.0));
        assert_eq!(t, [[ONE, ZERO], [ZERO, ONE]]);
    }

    #[test]
    fn real_blocks_are_pseudo_unitary() {
        for r in [-1.3, -0.2, 0.4, 2.0] {
            let t = transfer_block(Complex64::new(r, 0.0));
            let lhs = mul(&mul(&PZ, &inverse(&t)), &PZ);
            assert!(max_diff(&lhs, &dagger(&t)) < 1e-12 * t[0][0].norm().powi(3));
        }
    }

    #[test]
    fn complex_blocks() {
        let field = sample_field(ErrorModel::twirl(0.13 * PI).unwrap(), 6, 4, 3).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        assert!(s.is_complex_layout());
        let eye = [[ONE, ZERO], [ZERO, ONE]];
        for block in single_particle_blocks(&s) {
            let g = &s.gates.iter().find(|g| g.a == block.a && g.layer == block.layer).unwrap();
            if g.kind == GateKind::H {
                assert!(max_diff(&mul(&dagger(&block.t), &block.t), &eye) < 1e-12);
            } else {
                let xv = mul(&PX, &block.t);
                let lhs = mul(&mul(&PZ, &dagger(&xv)), &PZ);
                assert!(max_diff(&lhs, &inverse(&xv)) < 1e-12);
            }
        }
    }

    #[test]
    fn real_layout_detected() {
        let field = sample_field(ErrorModel::nishimori(0.3).unwrap(), 4, 5, 2).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        assert!(!s.is_complex_layout());
    }

    #[test]
    fn json_round_trip() {
        let field = sample_field(ErrorModel::twirl(0.1).unwrap(), 4, 2, 3).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Apbc, 0, Ordering::PartitionOrder);
        let text = s.to_json().unwrap();
        assert!(text.contains("\"re_z\""));
        assert_eq!(GateSchedule::from_json(&text).unwrap(), s);
    }

    #[test]
    fn deterministic() {
        let field = sample_field(ErrorModel::nishimori(0.1).unwrap(), 8, 6, 99).unwrap();
        let a = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let b = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        assert_eq!(a, b);
    }
}
