//! Self-verification suite: dense-oracle equivalence, the transmission
//! identity, purity, parity and unitarity, and fast-path equivalence.

use std::f64::consts::PI;
use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::circuit::{build_schedule, BoundaryCondition, GateSchedule, Ordering};
use crate::disorder::{bond_sign, sample_field, Bond, CouplingField, ErrorModel};
use crate::error::Result;
use crate::gaussian::{evolve_with, fast_evolve, initial_state, parity, Convention, EvolveOptions, InitialState};
use crate::network::{compose_network, conductivity, quasienergies};
use crate::oracle::dense_oracle;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Largest deviation seen.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checks: Vec<CheckResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for c in &self.checks {
            writeln!(
                f,
                "{} {:<12} worst {:.3e} (tol {:.0e}, {} cases){}",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.worst,
                c.tolerance,
                c.cases,
                if c.detail.is_empty() { String::new() } else { format!(": {}", c.detail) }
            )?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct VerifyOptions {
    /// Gate convention used by the Gaussian engine under test.
    pub convention: Convention,
    pub seed: u64,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions {
            convention: Convention::STANDARD,
            seed: 2024,
        }
    }
}

/// A random schedule with `p = 0.3` disorder, real or complex coupling.
pub fn random_schedule(rng: &mut ChaCha8Rng, m: usize, rows: usize) -> Result<GateSchedule> {
    let model = if rng.gen_bool(0.5) {
        ErrorModel::coherent(0.3, rng.gen_range(0.02..0.24) * PI)?
    } else {
        ErrorModel::nishimori(0.3)?
    };
    let bc = if rng.gen_bool(0.5) { BoundaryCondition::Pbc } else { BoundaryCondition::Apbc };
    let ordering = if rng.gen_bool(0.5) { Ordering::EvolutionOrder } else { Ordering::PartitionOrder };
    let field = any_field(model, m, rows, rng.gen())?;
    Ok(build_schedule(&field, bc, rng.gen_range(0..2), ordering))
}

/// Like [`sample_field`] but also for odd `M`, which the state-vector
/// comparison allows even though half cuts need even `M`.
pub fn any_field(model: ErrorModel, m: usize, rows: usize, seed: u64) -> Result<CouplingField> {
    let p = model.p();
    let grid = |bond| {
        (0..rows)
            .flat_map(|n| (0..m).map(move |i| (n, i)))
            .map(|(n, i)| bond_sign(seed, n, i, bond, p))
            .collect()
    };
    Ok(CouplingField {
        m,
        l: rows,
        model,
        coupling: model.coupling()?,
        seed,
        eta_h: grid(Bond::Horizontal),
        eta_v: grid(Bond::Vertical),
    })
}

fn check(name: &str, worst: f64, tolerance: f64, cases: usize, errors: Vec<String>) -> CheckResult {
    let passed = errors.is_empty() && worst <= tolerance;
    CheckResult {
        name: name.into(),
        passed,
        worst,
        tolerance,
        cases,
        detail: errors.join("; "),
    }
}

fn oracle_check(opts: &VerifyOptions) -> CheckResult {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (mut worst, mut cases, mut errors) = (0.0f64, 0, Vec::new());
    for m in 2..=4 {
        for _ in 0..8 {
            let mut run = || -> Result<f64> {
                let s = random_schedule(&mut rng, m, 7)?;
                let occ: Vec<u8> = (0..m).map(|_| rng.gen_range(0..2)).collect();
                let c0 = initial_state(&InitialState::Occupations(occ.clone()), m)?;
                let report = evolve_with(&c0, &s, &EvolveOptions::default(), opts.convention)?;
                Ok(report.c_final.max_abs_diff(&dense_oracle(&s, &occ)?))
            };
            match run() {
                Ok(d) => worst = worst.max(d),
                Err(e) => errors.push(e.to_string()),
            }
            cases += 1;
        }
    }
    check("oracle", worst, 1e-10, cases, errors)
}

fn models() -> [ErrorModel; 2] {
    [
        ErrorModel::nishimori(0.1).expect("valid model"),
        ErrorModel::twirl(0.1 * PI).expect("valid model"),
    ]
}

fn identity_check(opts: &VerifyOptions) -> CheckResult {
    let (mut worst, mut cases, mut errors) = (0.0f64, 0, Vec::new());
    for model in models() {
        for r in 0..4 {
            let run = || -> Result<f64> {
                let (m, l) = (16, 16);
                let field = sample_field(model, m, l, opts.seed + r)?;
                let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
                let g = conductivity(&compose_network(&s)?.t, l, m);
                let from_eps = l as f64 / m as f64 * quasienergies(&s)?.transmission_sum();
                Ok((g - from_eps).abs() / g)
            };
            match run() {
                Ok(d) => worst = worst.max(d),
                Err(e) => errors.push(e.to_string()),
            }
            cases += 1;
        }
    }
    check("identity", worst, 1e-6, cases, errors)
}

fn purity_parity_check(opts: &VerifyOptions) -> CheckResult {
    let (mut worst, mut cases, mut errors) = (0.0f64, 0, Vec::new());
    let options = EvolveOptions {
        check_purity: true,
        ..EvolveOptions::default()
    };
    for model in models() {
        for r in 0..2 {
            let run = || -> Result<f64> {
                let field = sample_field(model, 8, 16, opts.seed + 10 + r)?;
                let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
                let c0 = initial_state(&InitialState::HalfFilledRandom(r), 8)?;
                let report = evolve_with(&c0, &s, &options, Convention::STANDARD)?;
                if report.parity != parity(&c0)? {
                    return Err(crate::Error::NumericalInstability("parity changed".into()));
                }
                Ok(report.max_purity_defect.unwrap_or(f64::INFINITY))
            };
            match run() {
                Ok(d) => worst = worst.max(d),
                Err(e) => errors.push(e.to_string()),
            }
            cases += 1;
        }
    }
    check("purity", worst, 1e-8, cases, errors)
}

fn unitarity_check(opts: &VerifyOptions) -> CheckResult {
    let (mut worst, mut cases, mut errors) = (0.0f64, 0, Vec::new());
    for model in models() {
        for (m, l) in [(8, 8), (16, 16)] {
            match sample_field(model, m, l, opts.seed + 20)
                .and_then(|f| compose_network(&build_schedule(&f, BoundaryCondition::Apbc, 0, Ordering::EvolutionOrder)))
            {
                Ok(net) => worst = worst.max(net.unitarity_defect),
                Err(e) => errors.push(e.to_string()),
            }
            cases += 1;
        }
    }
    check("unitarity", worst, 1e-8, cases, errors)
}

fn fast_path_check(opts: &VerifyOptions) -> CheckResult {
    let (mut worst, mut cases, mut errors) = (0.0f64, 0, Vec::new());
    for model in models() {
        let run = || -> Result<f64> {
            let field = sample_field(model, 8, 16, opts.seed + 30)?;
            let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
            let c0 = initial_state(&InitialState::HalfFilledRandom(3), 8)?;
            let slow = evolve_with(&c0, &s, &EvolveOptions::default(), Convention::STANDARD)?.c_final;
            Ok(slow.max_abs_diff(&fast_evolve(&s, &c0)?))
        };
        match run() {
            Ok(d) => worst = worst.max(d),
            Err(e) => errors.push(e.to_string()),
        }
        cases += 1;
    }
    check("fast-path", worst, 1e-8, cases, errors)
}

fn backend_check() -> CheckResult {
    match crate::linalg::self_check() {
        Ok(()) => check("backend", 0.0, 0.0, 1, Vec::new()),
        Err(e) => check("backend", f64::INFINITY, 0.0, 1, vec![e.to_string()]),
    }
}

pub fn run_verify(opts: &VerifyOptions) -> VerifyReport {
    VerifyReport {
        checks: vec![
            backend_check(),
            oracle_check(opts),
            identity_check(opts),
            purity_parity_check(opts),
            unitarity_check(opts),
            fast_path_check(opts),
        ],
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_is_repeatable() {
        let a = run_verify(&VerifyOptions::default());
        assert!(a.passed(), "{a}");
        assert_eq!(a, run_verify(&VerifyOptions::default()));
    }

    #[test]
    fn flipped_convention_is_caught() {
        let report = run_verify(&VerifyOptions {
            convention: Convention::FLIPPED,
            ..VerifyOptions::default()
        });
        let oracle = report.checks.iter().find(|c| c.name == "oracle").unwrap();
        assert!(!oracle.passed);
        assert!(!report.passed());
    }
}
