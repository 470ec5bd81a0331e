//! Acceptance suite: one test per criterion, each printing a single
//! pass/fail line (visible with `cargo test -- --nocapture`).

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use icecal::basis::{
    optimal_rotation, project, recon_error, reconstruct, svd_basis, CentredEnsemble, Weight,
};
use icecal::boundary::{
    generate_boundary, mean_function, monthly_disaggregate, smooth_transition, BoundaryModel,
    CoefficientVector, Period, SpatialVector, TemporalVector,
};
use icecal::config::PipelineConfig;
use icecal::emulator::{GpEmulator, MeanSpec};
use icecal::history_match::{
    binarize, binary_implausibility, chi2_quantile, lhs_design, parse_bound,
    scaled_implausibility,
};
use icecal::kron::{kron_dense, FieldVector, ImputeMode};
use icecal::obs::{ObsEntry, ObservationSet};
use icecal::pipeline::{
    obs_error_factor, prior_stage, run_synthetic_pipeline, simulate_design, write_run_artifacts,
};
use icecal::synthetic::{ice_volume, N_PHYSICS_PARAMS};

fn verdict(criterion: usize, name: &str, ok: bool, detail: &str) {
    println!(
        "acceptance criterion {} ({}): {}{}",
        criterion,
        name,
        if ok { "PASS" } else { "FAIL" },
        if detail.is_empty() { String::new() } else { format!(" [{}]", detail) }
    );
    assert!(ok, "criterion {} ({}) failed: {}", criterion, name, detail);
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0));
    &a * a.transpose() + DMatrix::identity(n, n) * (n as f64)
}

fn random_field(rng: &mut ChaCha8Rng, ls: usize, lt: usize) -> FieldVector {
    FieldVector::new(
        DVector::from_fn(ls * lt, |_, _| rng.random_range(-2.0..2.0)),
        ls,
        lt,
    )
    .unwrap()
}

fn tiny_model(rng: &mut ChaCha8Rng, ls: usize, lt: usize) -> (BoundaryModel, CoefficientVector) {
    let model = BoundaryModel {
        mu: random_field(rng, ls, lt),
        temporal: vec![
            TemporalVector { field: random_field(rng, ls, lt), period: 0 },
            TemporalVector { field: random_field(rng, ls, lt), period: 0 },
        ],
        spatial: vec![SpatialVector {
            pattern: DVector::from_fn(ls, |_, _| rng.random_range(-1.0..1.0)),
            period: 0,
        }],
        periods: vec![Period { start: 0, end: lt }],
        lifts: vec![],
        source_hash: 0,
    };
    let c = CoefficientVector::new(
        vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
        vec![rng.random_range(-1.0..1.0)],
        vec![(-5.0, 5.0); 3],
    )
    .unwrap();
    (model, c)
}

#[test]
fn criterion_1_kronecker_conditioning_oracle() {
    let start = Instant::now();
    let mut worst = 0.0_f64;
    for seed in 0..50u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ls = rng.random_range(2..=6);
        let lt = rng.random_range(2..=6);
        let sigma_s = spd(&mut rng, ls);
        let sigma_t = spd(&mut rng, lt);
        let sd_t: Vec<f64> = (0..lt).map(|_| rng.random_range(0.3..1.0)).collect();
        let sigma_t_obs = DMatrix::from_diagonal(&DVector::from_fn(lt, |t, _| sd_t[t] * sd_t[t]));
        let (model, c) = tiny_model(&mut rng, ls, lt);
        let h = mean_function(&model, &c).unwrap();

        let n_obs_locs = rng.random_range(1..=ls);
        let mut locs: Vec<usize> = (0..ls).collect();
        for i in (1..ls).rev() {
            let j = rng.random_range(0..=i);
            locs.swap(i, j);
        }
        locs.truncate(n_obs_locs);
        locs.sort_unstable();

        let mut entries = Vec::new();
        for &s in &locs {
            let n_t = rng.random_range(1..=lt);
            let mut ts: Vec<usize> = (0..lt).collect();
            for i in (1..lt).rev() {
                let j = rng.random_range(0..=i);
                ts.swap(i, j);
            }
            ts.truncate(n_t);
            for &t in &ts {
                entries.push(ObsEntry {
                    location: s,
                    time: t,
                    value: rng.random_range(-3.0..3.0),
                    error_sd: sd_t[t],
                });
            }
        }
        let obs = ObservationSet::new(entries.clone()).unwrap();

        let got = generate_boundary(
            &model,
            &c,
            &obs,
            &sigma_s,
            &sigma_t,
            &sigma_t_obs,
            ImputeMode::Mean,
        )
        .unwrap();

        // Dense joint-Gaussian oracle over the observed-location block.
        let sigma_s_o = DMatrix::from_fn(locs.len(), locs.len(), |i, j| sigma_s[(locs[i], locs[j])]);
        let cov = kron_dense(&sigma_s_o, &sigma_t);
        let err = kron_dense(&sigma_s_o, &sigma_t_obs);
        let block_dim = locs.len() * lt;
        let mut h_block = DVector::zeros(block_dim);
        for (k, &s) in locs.iter().enumerate() {
            for t in 0..lt {
                h_block[k * lt + t] = h.get(s, t);
            }
        }
        let mut idx = Vec::new();
        let mut z = Vec::new();
        for e in &entries {
            let k = locs.iter().position(|&s| s == e.location).unwrap();
            idx.push(k * lt + e.time);
            z.push(e.value);
        }
        let m = idx.len();
        let c_oi = DMatrix::from_fn(block_dim, m, |r, j| cov[(r, idx[j])]);
        let a = DMatrix::from_fn(m, m, |i, j| cov[(idx[i], idx[j])] + err[(idx[i], idx[j])]);
        let resid = DVector::from_fn(m, |i, _| z[i] - h_block[idx[i]]);
        let expect = &h_block + &c_oi * a.lu().solve(&resid).unwrap();

        for (k, &s) in locs.iter().enumerate() {
            for t in 0..lt {
                let e = expect[k * lt + t];
                let g = got.get(s, t);
                worst = worst.max((e - g).abs() / e.abs().max(1.0));
            }
        }
        for s in 0..ls {
            if !locs.contains(&s) {
                for t in 0..lt {
                    assert_eq!(got.get(s, t), h.get(s, t));
                }
            }
        }
    }
    let elapsed = start.elapsed();
    let ok = worst < 1e-6 && elapsed.as_secs_f64() < 10.0;
    verdict(
        1,
        "Kronecker conditioning oracle",
        ok,
        &format!("max relative error {:.2e}, {:.2}s", worst, elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_2_rotation_dominance() {
    let mut all_dominated = true;
    let mut worst_span = 0.0_f64;
    for seed in 0..30u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(1000 + seed);
        let ell = 12;
        let members = 8;
        let raw = DMatrix::from_fn(ell, members, |_, _| rng.random_range(-1.0..1.0));
        let ens = CentredEnsemble::from_raw(raw, None).unwrap();
        let full = svd_basis(&ens).unwrap();
        let w = if seed % 2 == 0 {
            Weight::Identity
        } else {
            Weight::Spd(spd(&mut rng, ell))
        };
        let z = DVector::from_fn(ell, |_, _| rng.random_range(-1.0..1.0));
        let q = rng.random_range(1..=full.rank().min(4));
        let rotated = optimal_rotation(&full, &w, &z, q, 0.0).unwrap();
        let truncated = full.truncate(q).unwrap();
        let r_rot = recon_error(&rotated, &w, &z).unwrap();
        let r_svd = recon_error(&truncated, &w, &z).unwrap();
        if r_rot > r_svd + 1e-10 {
            all_dominated = false;
        }
        // Span membership: every rotated vector lies in the SVD span.
        let u = &full.vectors;
        let gram = (u.transpose() * u).lu();
        for j in 0..rotated.vectors.ncols() {
            let v = rotated.vectors.column(j).into_owned();
            let coef = gram.solve(&(u.transpose() * &v)).unwrap();
            let resid = (&v - u * coef).norm();
            worst_span = worst_span.max(resid);
        }
    }
    let ok = all_dominated && worst_span < 1e-8;
    verdict(
        2,
        "rotation dominance",
        ok,
        &format!("dominated {}, max span residual {:.2e}", all_dominated, worst_span),
    );
}

#[test]
fn criterion_3_reconstruction_exactness() {
    let mut worst = 0.0_f64;
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(2000 + seed);
        let ell = 15;
        let members = 9;
        let raw = DMatrix::from_fn(ell, members, |_, _| rng.random_range(-2.0..2.0));
        let ens = CentredEnsemble::from_raw(raw.clone(), None).unwrap();
        let full = svd_basis(&ens).unwrap();
        for k in 0..members {
            let member = raw.column(k).into_owned();
            let coeffs = project(&full, &Weight::Identity, &member, ens.mean()).unwrap();
            let recon = reconstruct(&full, &coeffs, ens.mean()).unwrap();
            let rel = (&recon - &member).norm() / member.norm().max(1.0);
            worst = worst.max(rel);
        }
    }
    let ok = worst < 1e-8;
    verdict(
        3,
        "full-basis reconstruction exactness",
        ok,
        &format!("max relative error {:.2e}", worst),
    );
}

#[test]
fn criterion_4_scaled_implausibility_fixed_point() {
    let mut worst = 0.0_f64;
    for &ell in &[1usize, 10, 43, 100, 1116] {
        let q = chi2_quantile(ell).unwrap();
        let s = scaled_implausibility(q, ell).unwrap();
        worst = worst.max((s - 3.0).abs());
    }
    let q1 = chi2_quantile(1).unwrap();
    let ok = worst < 1e-9 && (q1 - 7.879).abs() < 1e-3;
    verdict(
        4,
        "scaled-implausibility fixed point",
        ok,
        &format!("max |3 - scaled| {:.2e}, chi2(1) = {:.6}", worst, q1),
    );
}

#[test]
fn criterion_5_binary_implausibility_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(3000);
    let ell = 9;
    let q = 2;
    let n = 20;
    let d = 2;
    let design = DMatrix::from_fn(n, d, |_, _| rng.random_range(0.0..1.0));
    let emulators: Vec<GpEmulator> = (0..q)
        .map(|j| {
            let y = DVector::from_fn(n, |i, _| {
                (design[(i, 0)] * (j + 1) as f64).sin() + design[(i, 1)]
            });
            GpEmulator::fit(&design, &y, MeanSpec::Linear, 7 + j as u64).unwrap()
        })
        .collect();
    let vectors = DMatrix::from_fn(ell, q, |_, _| rng.random_range(-3.0..3.0));
    let mean = DVector::from_fn(ell, |_, _| rng.random_range(8.0..12.0));
    let z_field = DVector::from_fn(ell, |_, _| rng.random_range(5.0..15.0));
    let threshold = 10.0;
    let z_b = binarize(&z_field, threshold);
    let x = vec![0.4, 0.6];
    let m_samples = 60;
    let seed = 99;

    let counts =
        binary_implausibility(&z_b, &emulators, &vectors, &mean, &x, m_samples, threshold, seed)
            .unwrap();

    // Brute force through the public posterior-sampling API.
    let draws: Vec<Vec<f64>> = (0..q)
        .map(|j| emulators[j].sample_posterior(&x, m_samples, seed + j as u64).unwrap())
        .collect();
    let mut expect = Vec::with_capacity(m_samples);
    for i in 0..m_samples {
        let mut field = mean.clone();
        for j in 0..q {
            field += vectors.column(j) * draws[j][i];
        }
        let b = binarize(&field, threshold);
        expect.push((0..ell).filter(|&k| b[k] != z_b[k]).count());
    }
    let exact = counts == expect;

    let t1 = parse_bound("0.25*ell", 1116).unwrap();
    let t2 = parse_bound("0.025*ell", 868).unwrap();
    let arithmetic = t1 == 279.0 && (t2 - 21.7).abs() < 1e-12;
    let ok = exact && arithmetic;
    verdict(
        5,
        "binary implausibility oracle",
        ok,
        &format!("counts exact {}, thresholds {} / {}", exact, t1, t2),
    );
}

#[test]
fn criterion_6_seasonality_identity() {
    let mut worst = 0.0_f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(4000 + seed);
        let (ls, lt) = (4, 5);
        let (model, c) = tiny_model(&mut rng, ls, lt);
        // Monthly versions: coarse value plus a seasonal cycle built from
        // six random deviations and their negatives, so the yearly mean is
        // exact.
        let monthly_of = |coarse: &FieldVector, rng: &mut ChaCha8Rng| -> Vec<FieldVector> {
            let halves: Vec<DVector<f64>> = (0..6)
                .map(|_| DVector::from_fn(ls * lt, |_, _| rng.random_range(-0.5..0.5)))
                .collect();
            (0..12)
                .map(|m| {
                    let delta = if m < 6 { &halves[m] } else { &halves[m - 6] };
                    let sign = if m < 6 { 1.0 } else { -1.0 };
                    FieldVector::new(coarse.values() + delta * sign, ls, lt).unwrap()
                })
                .collect()
        };
        let monthly_mu = monthly_of(&model.mu, &mut rng);
        let monthly_temporal: Vec<Vec<FieldVector>> = model
            .temporal
            .iter()
            .map(|tv| monthly_of(&tv.field, &mut rng))
            .collect();
        let months = monthly_disaggregate(&model, &monthly_mu, &monthly_temporal, &c).unwrap();
        let h = mean_function(&model, &c).unwrap();
        let mut acc = DVector::zeros(ls * lt);
        for m in &months {
            acc += m.values();
        }
        acc /= 12.0;
        worst = worst.max((&acc - h.values()).norm() / h.values().norm().max(1.0));
    }

    // Unit-step smoothing: window 7 gives plateaus k/7 exactly.
    let (ls, lt) = (1, 20);
    let mut step = FieldVector::zeros(ls, lt);
    for t in 10..lt {
        step.set(0, t, 1.0);
    }
    let sm = smooth_transition(&step, 7, 7..14).unwrap();
    let mut exact_sevenths = true;
    for t in 7..14 {
        let k = (t - 6) as f64;
        if sm.get(0, t) != k / 7.0 {
            exact_sevenths = false;
        }
    }
    let ok = worst < 1e-10 && exact_sevenths;
    verdict(
        6,
        "seasonality identity",
        ok,
        &format!("max averaging error {:.2e}, 1/7 increments {}", worst, exact_sevenths),
    );
}

/// Desk-scale acceptance configuration: default problem size (20x15 grid,
/// 7 physics parameters + 13 coefficients, 150-point waves) with cheaper
/// Monte-Carlo and hyperparameter-search settings so 20 seeds finish within
/// the runtime budget.
fn acceptance_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::default();
    cfg.seed = seed;
    cfg.mc_samples = 2000;
    cfg.emulator_restarts = 2;
    cfg.prior.n_samples = 1000;
    cfg
}

#[test]
fn criterion_7_end_to_end_truth_retention() {
    let start = Instant::now();
    let mut ok_seeds = 0;
    let n_seeds = 20;
    for seed in 0..n_seeds as u64 {
        let cfg = acceptance_config(seed);
        match run_synthetic_pipeline(&cfg) {
            Ok(run) => {
                let decreasing = run.state.fractions.windows(2).all(|w| w[1] < w[0]);
                let retained = run.reports.iter().all(|r| r.truth_retained);
                if decreasing && retained {
                    ok_seeds += 1;
                }
            }
            Err(_) => {}
        }
    }
    let elapsed = start.elapsed();
    let ok = ok_seeds >= 19 && elapsed.as_secs_f64() < 600.0;
    verdict(
        7,
        "end-to-end truth retention",
        ok,
        &format!("{}/{} seeds, {:.1}s", ok_seeds, n_seeds, elapsed.as_secs_f64()),
    );
}

#[test]
fn criterion_8_emulator_diagnostics() {
    let cfg = acceptance_config(42);
    let stage = prior_stage(&cfg).unwrap();
    let design = lhs_design(&stage.bounds, N_PHYSICS_PARAMS, cfg.n_design, cfg.seed.wrapping_add(4))
        .unwrap();
    let sigma_t_obs = obs_error_factor(&stage.truth.boundary_obs, cfg.simulator.n_timesteps).unwrap();
    let runs = simulate_design(
        &cfg,
        &stage.fitted.model,
        &stage.truth.boundary_obs,
        &stage.fitted.covs,
        &sigma_t_obs,
        &stage.c_box,
        &design,
    )
    .unwrap();
    let inputs = DMatrix::from_fn(design.len(), stage.bounds.len(), |i, j| design[i].flat()[j]);

    let mut min_loo = 1.0_f64;
    let mut worst_interp = 0.0_f64;
    for &time in &[9usize, 19, 29] {
        let y = DVector::from_fn(design.len(), |i, _| {
            ice_volume(&runs[i][time], cfg.simulator.cell_area).unwrap()
        });
        let em = GpEmulator::fit_with_restarts(&inputs, &y, MeanSpec::Linear, 7, 5).unwrap();
        min_loo = min_loo.min(em.loo_pass_fraction());
        let tol = 3.0 * em.hyper.nugget_var.sqrt();
        for i in 0..design.len() {
            let p = em.predict(&design[i].flat()).unwrap();
            worst_interp = worst_interp.max(((p.mean - y[i]).abs() - tol).max(0.0));
        }
    }
    let ok = min_loo >= 0.93 && worst_interp == 0.0;
    verdict(
        8,
        "emulator diagnostics",
        ok,
        &format!("min LOO pass fraction {:.3}, interpolation excess {:.2e}", min_loo, worst_interp),
    );
}

#[test]
fn criterion_9_byte_identical_artifacts() {
    let mut cfg = acceptance_config(7);
    cfg.simulator.nx = 10;
    cfg.simulator.ny = 8;
    cfg.n_design = 40;
    for w in &mut cfg.waves {
        w.n_design = 40;
    }
    cfg.n_t_per_period = 1;
    cfg.n_s_per_period = 1;
    cfg.prior.n_samples = 400;
    cfg.mc_samples = 1500;
    if let Some(icecal::config::OutputTarget::Extent { region, .. }) =
        cfg.targets.get_mut("sw_extent")
    {
        *region = icecal::config::RegionSpec { x0: 0, x1: 5, y0: 0, y1: 4 };
    }
    if let Some(icecal::config::OutputTarget::Extent { region, .. }) =
        cfg.targets.get_mut("ce_extent")
    {
        *region = icecal::config::RegionSpec { x0: 2, x1: 8, y0: 2, y1: 6 };
    }
    cfg.extent_basis_rank = 2;

    let dir1 = tempfile::tempdir().unwrap();
    let dir2 = tempfile::tempdir().unwrap();
    let run1 = run_synthetic_pipeline(&cfg).unwrap();
    let paths1 = write_run_artifacts(&cfg, &run1, dir1.path()).unwrap();
    let run2 = run_synthetic_pipeline(&cfg).unwrap();
    let paths2 = write_run_artifacts(&cfg, &run2, dir2.path()).unwrap();
    let mut identical = paths1.len() == paths2.len();
    for (a, b) in paths1.iter().zip(&paths2) {
        if std::fs::read(a).unwrap() != std::fs::read(b).unwrap() {
            identical = false;
        }
    }
    verdict(
        9,
        "byte-identical artifacts",
        identical,
        &format!("{} artifacts compared", paths1.len()),
    );
}
