//! Invariants over randomly drawn fields, states and curves.

use std::f64::consts::PI;

use ffcircuit::circuit::{build_schedule, BoundaryCondition, Ordering};
use ffcircuit::disorder::{sample_field, ErrorModel};
use ffcircuit::ensemble::cell_seed;
use ffcircuit::entanglement::{entropy, reduce, spectrum};
use ffcircuit::gaussian::{evolve_layers, fast_evolve, initial_state, parity, InitialState};
use ffcircuit::network::{compose_network, conductivity, quasienergies};
use ffcircuit::oracle::dense_oracle;
use ffcircuit::scaling::{collapse, Curve};
use ffcircuit::verify::any_field;
use proptest::prelude::*;

fn model_strategy() -> impl Strategy<Value = ErrorModel> {
    prop_oneof![
        (0.0..0.5f64).prop_map(|p| ErrorModel::nishimori(p).unwrap()),
        (0.01..0.24f64).prop_map(|f| ErrorModel::twirl(f * PI).unwrap()),
        (0.0..0.5f64, 0.01..0.24f64).prop_map(|(p, f)| ErrorModel::coherent(p, f * PI).unwrap()),
    ]
}

fn bc_strategy() -> impl Strategy<Value = BoundaryCondition> {
    prop_oneof![Just(BoundaryCondition::Pbc), Just(BoundaryCondition::Apbc)]
}

fn ordering_strategy() -> impl Strategy<Value = Ordering> {
    prop_oneof![Just(Ordering::EvolutionOrder), Just(Ordering::PartitionOrder)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gaussian_evolution_matches_dense_oracle(
        model in model_strategy(),
        m in 2usize..=4,
        rows in 6usize..=8,
        seed in any::<u64>(),
        bc in bc_strategy(),
        ordering in ordering_strategy(),
        q in 0u8..2,
        occ_bits in any::<u8>(),
    ) {
        let field = any_field(model, m, rows, seed).unwrap();
        let s = build_schedule(&field, bc, q, ordering);
        let occ: Vec<u8> = (0..m).map(|i| (occ_bits >> i) & 1).collect();
        let c0 = initial_state(&InitialState::Occupations(occ.clone()), m).unwrap();
        let c = evolve_layers(&c0, &s).unwrap();
        prop_assert!(c.max_abs_diff(&dense_oracle(&s, &occ).unwrap()) < 1e-10);
    }

    #[test]
    fn evolution_keeps_purity_and_parity(
        model in model_strategy(),
        half in 2usize..=5,
        rows in 4usize..=12,
        seed in any::<u64>(),
        state in any::<u64>(),
    ) {
        let m = 2 * half;
        let field = sample_field(model, m, rows, seed).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let c0 = initial_state(&InitialState::HalfFilledRandom(state), m).unwrap();
        let c = evolve_layers(&c0, &s).unwrap();
        prop_assert!(c.purity_defect() < 1e-8);
        prop_assert!(c.asymmetry() < 1e-12);
        prop_assert_eq!(parity(&c).unwrap(), parity(&c0).unwrap());
    }

    #[test]
    fn fast_path_agrees_with_layers(
        model in model_strategy(),
        half in 2usize..=5,
        rows in 4usize..=12,
        seed in any::<u64>(),
        state in any::<u64>(),
    ) {
        let m = 2 * half;
        let field = sample_field(model, m, 2 * rows, seed).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let c0 = initial_state(&InitialState::HalfFilledRandom(state), m).unwrap();
        let layered = evolve_layers(&c0, &s).unwrap();
        match fast_evolve(&s, &c0) {
            Ok(fast) => prop_assert!(fast.max_abs_diff(&layered) < 1e-8),
            // A singular polar step is reported, never silently wrong.
            Err(e) => prop_assert!(e.to_string().contains("singular")),
        }
    }

    #[test]
    fn complementary_regions_share_entropy_and_spectrum_is_bounded(
        model in model_strategy(),
        half in 2usize..=5,
        rows in 4usize..=12,
        seed in any::<u64>(),
        state in any::<u64>(),
        cut in 1usize..10,
    ) {
        let m = 2 * half;
        let cut = 1 + cut % (m - 1);
        let field = sample_field(model, m, rows, seed).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Apbc, 0, Ordering::EvolutionOrder);
        let c0 = initial_state(&InitialState::HalfFilledRandom(state), m).unwrap();
        let c = evolve_layers(&c0, &s).unwrap();
        let a = spectrum(reduce(&c, 0..cut).unwrap().view()).unwrap();
        let b = spectrum(reduce(&c, cut..m).unwrap().view()).unwrap();
        for l in a.lambdas.iter().chain(&b.lambdas) {
            prop_assert!((0.0..=1.0).contains(l));
        }
        let (sa, sb) = (entropy(&a), entropy(&b));
        prop_assert!(sa >= 0.0 && sa <= cut.min(m - cut) as f64 * 2f64.ln() + 1e-9);
        prop_assert!((sa - sb).abs() < 1e-7, "S_A = {sa}, S_B = {sb}");
    }

    #[test]
    fn transmission_identity_holds(
        model in model_strategy(),
        half in 2usize..=6,
        rows in 1usize..=4,
        seed in any::<u64>(),
    ) {
        let (m, l) = (2 * half, 4 * rows);
        let field = sample_field(model, m, l, seed).unwrap();
        let s = build_schedule(&field, BoundaryCondition::Pbc, 0, Ordering::EvolutionOrder);
        let net = compose_network(&s).unwrap();
        prop_assert!(net.unitarity_defect < 1e-8);
        let g = conductivity(&net.t, l, m);
        let from_eps = l as f64 / m as f64 * quasienergies(&s).unwrap().transmission_sum();
        prop_assert!(g >= 0.0);
        prop_assert!((g - from_eps).abs() <= 1e-6 * g.max(1e-12), "g = {g}, from eps = {from_eps}");
    }

    #[test]
    fn collapse_is_covariant_under_global_rescaling(
        shifts in prop::collection::vec(0.5..3.0f64, 3),
        scale in 0.1..10.0f64,
        slope in 0.2..2.0f64,
    ) {
        let curves: Vec<Curve> = shifts
            .iter()
            .enumerate()
            .map(|(k, &ell)| {
                let pts: Vec<(f64, f64, f64)> = (0..8)
                    .map(|i| {
                        let x = 4.0 * 1.3f64.powi(i) * ell;
                        (x, slope * (x / ell).ln(), 0.01)
                    })
                    .collect();
                Curve::new(k as f64, &pts)
            })
            .collect();
        let scaled: Vec<Curve> = curves
            .iter()
            .map(|c| {
                let pts: Vec<(f64, f64, f64)> = c.points.iter().map(|p| (p.x * scale, p.y, p.err)).collect();
                Curve::new(c.parameter, &pts)
            })
            .collect();
        let a = collapse(&curves).unwrap();
        let b = collapse(&scaled).unwrap();
        prop_assert_eq!(a.scale_factors[0], 1.0);
        for (fa, fb) in a.scale_factors.iter().zip(&b.scale_factors) {
            prop_assert!((fa / fb - 1.0).abs() < 1e-3, "{:?} vs {:?}", a.scale_factors, b.scale_factors);
        }
        prop_assert!((a.residual_spread - b.residual_spread).abs() < 1e-6);
    }

    #[test]
    fn cell_seeds_are_deterministic_and_distinct(base in any::<u64>(), k in 0usize..1000, r in 0usize..1000) {
        prop_assert_eq!(cell_seed(base, k, r), cell_seed(base, k, r));
        prop_assert_ne!(cell_seed(base, k, r), cell_seed(base, k, r + 1));
        prop_assert_ne!(cell_seed(base, k, r), cell_seed(base, k + 1, r));
        prop_assert_ne!(cell_seed(base, k, r), cell_seed(base.wrapping_add(1), k, r));
    }

    #[test]
    fn fields_are_reproducible_from_seed(model in model_strategy(), seed in any::<u64>()) {
        let a = sample_field(model, 8, 6, seed).unwrap();
        let b = sample_field(model, 8, 6, seed).unwrap();
        prop_assert_eq!(&a.eta_h, &b.eta_h);
        prop_assert_eq!(&a.eta_v, &b.eta_v);
    }
}
