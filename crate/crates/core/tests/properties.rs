//! Property tests for the library-wide invariants.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

use icecal::history_match::{
    binarize, chi2_quantile, jth_max_implausibility, lhs_design, scaled_implausibility,
};
use icecal::kron::{kron_inverse_apply, FieldVector, KroneckerCov};
use icecal::synthetic::{ice_volume, toy_simulate, ToySimulatorConfig};

fn small_sim() -> ToySimulatorConfig {
    ToySimulatorConfig {
        nx: 6,
        ny: 5,
        n_timesteps: 8,
        ..ToySimulatorConfig::default()
    }
}

fn params_in_bounds() -> impl Strategy<Value = Vec<f64>> {
    let cfg = small_sim();
    cfg.param_bounds
        .into_iter()
        .map(|(lo, hi)| lo..hi)
        .collect::<Vec<_>>()
}

fn flat_boundary(cfg: &ToySimulatorConfig, level: f64) -> FieldVector {
    FieldVector::new(
        DVector::from_element(cfg.n_cells() * cfg.n_timesteps, level),
        cfg.n_cells(),
        cfg.n_timesteps,
    )
    .unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn simulator_deterministic_and_nonnegative(
        x in params_in_bounds(),
        level in -5.0f64..5.0,
    ) {
        let cfg = small_sim();
        let boundary = flat_boundary(&cfg, level);
        let a = toy_simulate(&cfg, &x, &boundary).unwrap();
        let b = toy_simulate(&cfg, &x, &boundary).unwrap();
        prop_assert_eq!(&a, &b);
        for field in &a {
            prop_assert!(field.iter().all(|&v| v >= 0.0));
            prop_assert!(ice_volume(field, cfg.cell_area).unwrap() >= 0.0);
        }
    }

    #[test]
    fn warming_does_not_grow_ice(
        x in params_in_bounds(),
        level in -4.0f64..2.0,
        delta in 0.1f64..3.0,
    ) {
        let cfg = small_sim();
        let cold = toy_simulate(&cfg, &x, &flat_boundary(&cfg, level)).unwrap();
        let warm = toy_simulate(&cfg, &x, &flat_boundary(&cfg, level + delta)).unwrap();
        let v_cold = ice_volume(cold.last().unwrap(), cfg.cell_area).unwrap();
        let v_warm = ice_volume(warm.last().unwrap(), cfg.cell_area).unwrap();
        prop_assert!(v_warm <= v_cold + 1e-9);
    }

    #[test]
    fn scaled_threshold_equivalence(
        impl_value in 0.0f64..200.0,
        ell in 1usize..50,
    ) {
        let chi2 = chi2_quantile(ell).unwrap();
        let scaled = scaled_implausibility(impl_value, ell).unwrap();
        prop_assert_eq!(scaled < 3.0, impl_value < chi2);
    }

    #[test]
    fn jth_max_matches_sorting_oracle(
        values in prop::collection::vec(-10.0f64..10.0, 1..12),
        j in 1usize..5,
    ) {
        let j = j.min(values.len());
        let got = jth_max_implausibility(&values, j).unwrap();
        let mut sorted = values.clone();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        prop_assert_eq!(got, sorted[j - 1]);
    }

    #[test]
    fn binarize_is_idempotent_and_binary(
        values in prop::collection::vec(-20.0f64..40.0, 1..30),
        threshold in -5.0f64..15.0,
    ) {
        let field = DVector::from_vec(values);
        let b = binarize(&field, threshold);
        prop_assert!(b.iter().all(|&v| v == 0.0 || v == 1.0));
        // Binary maps are a fixed point of any threshold in (0, 1).
        prop_assert_eq!(&binarize(&b, 0.5), &b);
        for i in 0..field.len() {
            prop_assert_eq!(b[i] == 1.0, field[i] > threshold);
        }
    }

    #[test]
    fn lhs_design_is_stratified(
        n in 2usize..25,
        seed in 0u64..1000,
    ) {
        let bounds = vec![(0.0, 1.0), (-2.0, 3.0), (10.0, 11.0)];
        let design = lhs_design(&bounds, 1, n, seed).unwrap();
        prop_assert_eq!(design.len(), n);
        for (d, &(lo, hi)) in bounds.iter().enumerate() {
            let mut strata = vec![false; n];
            for p in &design {
                let v = p.flat()[d];
                prop_assert!((lo..hi).contains(&v));
                let k = (((v - lo) / (hi - lo)) * n as f64).floor() as usize;
                strata[k.min(n - 1)] = true;
            }
            prop_assert!(strata.iter().all(|&s| s), "dimension {} not stratified", d);
        }
    }

    #[test]
    fn kron_inverse_apply_inverts_multiplication(
        seed in 0u64..500,
        ls in 2usize..5,
        lt in 2usize..5,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut spd = |k: usize| {
            let a = DMatrix::from_fn(k, k, |_, _| rng.random_range(-1.0..1.0));
            &a * a.transpose() + DMatrix::identity(k, k) * (k as f64)
        };
        let sigma_s = spd(ls);
        let sigma_t = spd(lt);
        let cov = KroneckerCov::new(sigma_s.clone(), sigma_t.clone()).unwrap();
        let v = FieldVector::new(
            DVector::from_fn(ls * lt, |_, _| rng.random_range(-2.0..2.0)),
            ls,
            lt,
        )
        .unwrap();
        let dense = icecal::kron::kron_dense(&sigma_s, &sigma_t);
        let prod = FieldVector::new(&dense * v.values(), ls, lt).unwrap();
        let back = kron_inverse_apply(&cov, &prod).unwrap();
        let err = (back.values() - v.values()).norm() / v.values().norm().max(1.0);
        prop_assert!(err < 1e-8, "round-trip error {}", err);
    }

    #[test]
    fn field_vector_matrix_round_trip(
        seed in 0u64..500,
        ls in 1usize..6,
        lt in 1usize..6,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let f = FieldVector::new(
            DVector::from_fn(ls * lt, |_, _| rng.random_range(-5.0..5.0)),
            ls,
            lt,
        )
        .unwrap();
        let m = f.as_matrix();
        prop_assert_eq!((m.nrows(), m.ncols()), (lt, ls));
        for s in 0..ls {
            for t in 0..lt {
                prop_assert_eq!(m[(t, s)], f.get(s, t));
            }
        }
        let back = FieldVector::from_matrix(&m).unwrap();
        prop_assert_eq!(back.values(), f.values());
    }
}
