//! End-to-end synthetic study: generate an ensemble and a hidden truth, fit
//! the boundary model, carve out the prior coefficient space, then run the
//! emulator-based history match wave by wave.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::basis::{project_columns, CentredEnsemble, Weight};
use crate::boundary::{fit_model, generate_boundary, sq_exp_cov_1d, sq_exp_cov_2d, BoundaryFitConfig, BoundaryModel, CoefficientVector};
use crate::config::{OutputTarget, PipelineConfig};
use crate::error::{Error, Result};
use crate::history_match::{
    lhs_design, nroy_resample, prior_coeff_space, run_wave, DesignPoint, OutputData, OutputKind,
    OutputSpec, PriorSpaceReport, WaveData, WaveOptions, WaveState,
};
use crate::kron::ImputeMode;
use crate::obs::{ObsEntry, ObservationSet};
use crate::synthetic::{
    extent_region, ice_volume, rect_mask, synthetic_ensemble, synthetic_truth, toy_simulate,
    SyntheticTruth, N_PHYSICS_PARAMS,
};

/// Squared-exponential spatial and temporal factors for the simulator grid.
pub struct Covariances {
    pub sigma_s: DMatrix<f64>,
    pub sigma_t: DMatrix<f64>,
}

pub fn build_covariances(cfg: &PipelineConfig) -> Covariances {
    let sim = &cfg.simulator;
    let cov = &cfg.covariance;
    let coords: Vec<(f64, f64)> = (0..sim.n_cells())
        .map(|s| ((s % sim.nx) as f64, (s / sim.nx) as f64))
        .collect();
    let times: Vec<f64> = (0..sim.n_timesteps).map(|t| t as f64).collect();
    Covariances {
        sigma_s: sq_exp_cov_2d(&coords, cov.spatial_length_scale, cov.spatial_variance, cov.nugget),
        sigma_t: sq_exp_cov_1d(
            &times,
            cov.temporal_length_scale,
            cov.temporal_variance,
            cov.nugget,
        ),
    }
}

/// Diagonal observation-error temporal factor for an observation set.
pub fn obs_error_factor(obs: &ObservationSet, n_times: usize) -> Result<DMatrix<f64>> {
    let vars = obs.temporal_error_variances(n_times)?;
    Ok(DMatrix::from_diagonal(&DVector::from_vec(vars)))
}

/// Evenly spaced model-fitting sites including every anchor.
fn fitting_sites(cfg: &PipelineConfig) -> Vec<usize> {
    let n = cfg.simulator.n_cells();
    let target = 12.min(n);
    let mut sites: Vec<usize> = cfg.anchors.clone();
    let step = (n / target).max(1);
    let mut s = step / 2;
    while s < n {
        if !sites.contains(&s) {
            sites.push(s);
        }
        s += step;
    }
    sites.sort_unstable();
    sites
}

/// Dense low-noise pseudo-observations of one reference ensemble member,
/// used only to anchor the boundary-model fit.
fn proto_observations(
    ens: &CentredEnsemble,
    _n_locations: usize,
    n_times: usize,
    sites: &[usize],
    seed: u64,
) -> Result<ObservationSet> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let reference = ens.mean() + ens.data().column(0);
    let sd = 0.3;
    let mut entries = Vec::new();
    for &s in sites {
        for t in 0..n_times {
            let noise: f64 = rng.random_range(-1.0..1.0) * sd;
            entries.push(ObsEntry {
                location: s,
                time: t,
                value: reference[s * n_times + t] + noise,
                error_sd: sd,
            });
        }
    }
    ObservationSet::new(entries)
}

/// Fit config with fitting sites substituted when the user left the spatial
/// location lists empty.
fn effective_fit_config(cfg: &PipelineConfig, sites: &[usize]) -> BoundaryFitConfig {
    let mut fc = cfg.fit_config();
    if fc.fit_locations.is_empty() {
        fc.fit_locations = sites
            .iter()
            .copied()
            .filter(|s| !fc.holdout_locations.contains(s))
            .collect();
    }
    fc
}

/// Unit-height Gaussian bump centred on the grid, used as the expert
/// spatial vector.
fn expert_bump(sim: &crate::synthetic::ToySimulatorConfig) -> DVector<f64> {
    let (cx, cy) = ((sim.nx as f64 - 1.0) / 2.0, (sim.ny as f64 - 1.0) / 2.0);
    let sigma = (sim.nx.max(sim.ny) as f64) / 4.0;
    DVector::from_fn(sim.n_cells(), |s, _| {
        let (x, y) = ((s % sim.nx) as f64, (s / sim.nx) as f64);
        let d2 = (x - cx).powi(2) + (y - cy).powi(2);
        (-d2 / (2.0 * sigma * sigma)).exp()
    })
}

/// Coefficient bounds inferred from the least-squares projection of the
/// ensemble members onto the fitted basis, widened by half their range.
pub fn auto_prior_bounds(model: &BoundaryModel, ens: &CentredEnsemble) -> Result<Vec<(f64, f64)>> {
    let ell = model.n_locations() * model.n_times();
    let d_c = model.n_coefficients();
    let mut b = DMatrix::zeros(ell, d_c);
    for (j, tv) in model.temporal.iter().enumerate() {
        b.set_column(j, tv.field.values());
    }
    for (j, sv) in model.spatial.iter().enumerate() {
        let f = sv.to_field(&model.periods, model.n_locations(), model.n_times());
        b.set_column(model.n_temporal() + j, f.values());
    }
    let mut raw = ens.data().clone();
    for mut col in raw.column_iter_mut() {
        col += ens.mean();
    }
    let coeffs = project_columns(&b, &Weight::Identity, &raw, model.mu.values())?;
    let mut bounds = Vec::with_capacity(d_c);
    for j in 0..d_c {
        let row = coeffs.row(j);
        let lo = row.min();
        let hi = row.max();
        let half = ((hi - lo) / 2.0).max(0.5);
        let mid = (hi + lo) / 2.0;
        bounds.push((mid - half, mid + half));
    }
    Ok(bounds)
}

/// Resolve placeholder output specs against the generated truth: volume
/// outputs get their noisy observed value, binary-region outputs get their
/// size and observed ice map.
pub fn resolve_specs(
    cfg: &PipelineConfig,
    truth: &SyntheticTruth,
) -> Result<Vec<OutputSpec>> {
    let mut out = Vec::with_capacity(cfg.outputs.len());
    for spec in &cfg.outputs {
        let target = cfg
            .targets
            .get(&spec.id)
            .ok_or_else(|| Error::Config(format!("no simulator target for output {}", spec.id)))?;
        let mut spec = spec.clone();
        match (target, spec.kind) {
            (OutputTarget::Volume { time }, OutputKind::Scalar) => {
                let (_, value, _) = truth
                    .volume_obs
                    .iter()
                    .find(|(t, _, _)| t == time)
                    .ok_or_else(|| {
                        Error::Config(format!(
                            "output {} needs a volume target at time {}",
                            spec.id, time
                        ))
                    })?;
                spec.obs = vec![*value];
            }
            (OutputTarget::Extent { region, time }, OutputKind::BinaryRegion) => {
                let mask = rect_mask(&cfg.simulator, region.x0, region.x1, region.y0, region.y1);
                let map = extent_region(
                    &truth.true_thickness[*time],
                    &mask,
                    cfg.binary_threshold,
                )?;
                spec.ell = mask.len();
                spec.obs = map.iter().copied().collect();
            }
            _ => {
                return Err(Error::Config(format!(
                    "output {} kind does not match its simulator target",
                    spec.id
                )))
            }
        }
        spec.validate()?;
        out.push(spec);
    }
    Ok(out)
}

/// Split a design point's coefficient part into a bounded coefficient vector.
pub fn coefficient_vector(
    model: &BoundaryModel,
    c: &[f64],
    bounds: &[(f64, f64)],
) -> Result<CoefficientVector> {
    let n_t = model.n_temporal();
    if c.len() != model.n_coefficients() {
        return Err(Error::shape(
            "coefficient_vector",
            model.n_coefficients().to_string(),
            c.len().to_string(),
        ));
    }
    CoefficientVector::new(c[..n_t].to_vec(), c[n_t..].to_vec(), bounds.to_vec())
}

/// Run the simulator at every design point: boundary from the fitted model
/// conditioned on the truth's observations, then the toy ice sheet.
pub fn simulate_design(
    cfg: &PipelineConfig,
    model: &BoundaryModel,
    obs: &ObservationSet,
    covs: &Covariances,
    sigma_t_obs: &DMatrix<f64>,
    c_bounds: &[(f64, f64)],
    design: &[DesignPoint],
) -> Result<Vec<Vec<DVector<f64>>>> {
    design
        .iter()
        .map(|p| {
            let c = coefficient_vector(model, &p.c, c_bounds)?;
            let h = generate_boundary(
                model,
                &c,
                obs,
                &covs.sigma_s,
                &covs.sigma_t,
                sigma_t_obs,
                ImputeMode::Mean,
            )?;
            toy_simulate(&cfg.simulator, &p.x, &h)
        })
        .collect()
}

/// Assemble emulator training data for one wave's output specs from the
/// simulated thickness histories.
pub fn build_wave_data(
    cfg: &PipelineConfig,
    specs: &[OutputSpec],
    wave_spec_ids: &[String],
    runs: &[Vec<DVector<f64>>],
) -> Result<WaveData> {
    let mut data = WaveData::default();
    for id in wave_spec_ids {
        let spec = specs
            .iter()
            .find(|s| &s.id == id)
            .ok_or_else(|| Error::Config(format!("unknown output {}", id)))?;
        let target = cfg
            .targets
            .get(id)
            .ok_or_else(|| Error::Config(format!("no simulator target for output {}", id)))?;
        let entry = match target {
            OutputTarget::Volume { time } => {
                let values = runs
                    .iter()
                    .map(|r| ice_volume(&r[*time], cfg.simulator.cell_area))
                    .collect::<Result<Vec<f64>>>()?;
                OutputData::Scalar(values)
            }
            OutputTarget::Extent { region, time } => {
                let mask = rect_mask(&cfg.simulator, region.x0, region.x1, region.y0, region.y1);
                let ell = mask.len();
                let mut fields = DMatrix::zeros(ell, runs.len());
                for (k, r) in runs.iter().enumerate() {
                    for (i, &s) in mask.iter().enumerate() {
                        fields[(i, k)] = r[*time][s];
                    }
                }
                let region_ens = CentredEnsemble::from_raw(fields.clone(), None)?;
                let full = crate::basis::svd_basis(&region_ens)?;
                let q = cfg.extent_basis_rank.min(full.rank()).max(1);
                let basis = full.truncate(q)?;
                let coeffs = project_columns(
                    &basis.vectors,
                    &Weight::Identity,
                    &fields,
                    region_ens.mean(),
                )?;
                OutputData::Binary {
                    coeffs: coeffs.transpose(),
                    vectors: basis.vectors.clone(),
                    mean: region_ens.mean().clone(),
                }
            }
        };
        if spec.kind == OutputKind::BinaryRegion
            && !matches!(entry, OutputData::Binary { .. })
        {
            return Err(Error::Config(format!(
                "output {} kind does not match its simulator target",
                id
            )));
        }
        data.outputs.insert(id.clone(), entry);
    }
    Ok(data)
}

/// Per-wave summary of the history match.
#[derive(Debug, Clone, Serialize)]
pub struct WaveReport {
    pub wave_index: usize,
    pub n_design: usize,
    pub n_survivors: usize,
    pub fraction: f64,
    pub truth_retained: bool,
}

/// Everything produced by one pipeline run.
pub struct PipelineRun {
    pub model: BoundaryModel,
    pub truth: SyntheticTruth,
    pub specs: Vec<OutputSpec>,
    pub prior_bounds: Vec<(f64, f64)>,
    pub prior_report: PriorSpaceReport,
    /// Physics bounds followed by the coefficient design box.
    pub bounds: Vec<(f64, f64)>,
    pub designs: Vec<Vec<DesignPoint>>,
    pub state: WaveState,
    pub reports: Vec<WaveReport>,
    /// Final-wave volume trajectories, one row per design point.
    pub volume_fan: DMatrix<f64>,
}

/// Ensemble, covariance factors, and the fitted boundary model.
pub struct FittedModel {
    pub ens: CentredEnsemble,
    pub covs: Covariances,
    pub model: BoundaryModel,
}

/// Fit the boundary model against low-noise pseudo-observations of one
/// reference ensemble member; the truth's sparse records come later.
pub fn fit_boundary_model(cfg: &PipelineConfig) -> Result<FittedModel> {
    cfg.validate()?;
    let sim = &cfg.simulator;
    let (n, lt) = (sim.n_cells(), sim.n_timesteps);
    let ens = synthetic_ensemble(sim, cfg.ensemble_members, cfg.seed)?;
    let covs = build_covariances(cfg);
    let sites = fitting_sites(cfg);
    let proto = proto_observations(&ens, n, lt, &sites, cfg.seed.wrapping_add(1))?;
    let proto_factor = obs_error_factor(&proto, lt)?;
    let fc = effective_fit_config(cfg, &sites);
    let mut model =
        fit_model(&ens, n, lt, &proto, &covs.sigma_s, &covs.sigma_t, &proto_factor, &fc)?;
    if cfg.expert_vector {
        let pattern = expert_bump(sim);
        model = crate::boundary::append_expert_vector(&model, pattern, model.periods.len() - 1)?;
    }
    Ok(FittedModel { ens, covs, model })
}

/// Everything up to and including the prior coefficient space.
pub struct PriorStage {
    pub fitted: FittedModel,
    pub truth: SyntheticTruth,
    pub specs: Vec<OutputSpec>,
    pub prior_bounds: Vec<(f64, f64)>,
    pub accepted: Vec<CoefficientVector>,
    pub report: PriorSpaceReport,
    /// Physics ranges followed by the coefficient design box.
    pub bounds: Vec<(f64, f64)>,
    pub c_box: Vec<(f64, f64)>,
}

pub fn prior_stage(cfg: &PipelineConfig) -> Result<PriorStage> {
    let fitted = fit_boundary_model(cfg)?;
    let model = &fitted.model;

    let prior_bounds = if cfg.prior.bounds.len() == model.n_coefficients() {
        cfg.prior.bounds.clone()
    } else if cfg.prior.bounds.is_empty() {
        auto_prior_bounds(model, &fitted.ens)?
    } else {
        return Err(Error::shape(
            "prior bounds",
            model.n_coefficients().to_string(),
            cfg.prior.bounds.len().to_string(),
        ));
    };

    let truth = synthetic_truth(
        &cfg.simulator,
        model,
        &prior_bounds,
        &cfg.truth,
        cfg.seed.wrapping_add(2),
    )?;
    let specs = resolve_specs(cfg, &truth)?;

    let (accepted, report) = prior_coeff_space(
        model,
        &truth.boundary_obs,
        &prior_bounds,
        cfg.prior.j,
        cfg.prior.n_samples,
        cfg.seed.wrapping_add(3),
    )?;

    // Design box: physics ranges times the bounding box of the accepted
    // prior-space sample, padded by five percent.
    let d_c = model.n_coefficients();
    let mut c_box = Vec::with_capacity(d_c);
    for j in 0..d_c {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for c in &accepted {
            let v = c.flat()[j];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let pad = (0.05 * (hi - lo)).max(1e-3);
        c_box.push((lo - pad, hi + pad));
    }
    let mut bounds: Vec<(f64, f64)> = cfg.simulator.param_bounds.to_vec();
    bounds.extend(c_box.iter().copied());

    Ok(PriorStage {
        fitted,
        truth,
        specs,
        prior_bounds,
        accepted,
        report,
        bounds,
        c_box,
    })
}

pub fn run_synthetic_pipeline(cfg: &PipelineConfig) -> Result<PipelineRun> {
    run_waves(cfg, None)
}

/// Run the pipeline through the first `upto` waves (all waves when `None`).
pub fn run_waves(cfg: &PipelineConfig, upto: Option<usize>) -> Result<PipelineRun> {
    let stage = prior_stage(cfg)?;
    let sim = &cfg.simulator;
    let lt = sim.n_timesteps;
    let PriorStage {
        fitted,
        truth,
        specs,
        prior_bounds,
        accepted: _,
        report: prior_report,
        bounds,
        c_box,
    } = stage;
    let model = fitted.model;
    let covs = fitted.covs;
    let sigma_t_obs = obs_error_factor(&truth.boundary_obs, lt)?;
    let n_waves = match upto {
        Some(k) => {
            if k == 0 || k > cfg.waves.len() {
                return Err(Error::Config(format!(
                    "wave index {} out of range 1..={}",
                    k,
                    cfg.waves.len()
                )));
            }
            k
        }
        None => cfg.waves.len(),
    };

    let options = WaveOptions {
        restarts: cfg.emulator_restarts,
        m_samples: crate::history_match::DEFAULT_M_SAMPLES,
        binary_threshold: cfg.binary_threshold,
    };

    let mut state = WaveState::new(bounds.clone(), N_PHYSICS_PARAMS, cfg.mc_samples, cfg.seed)?;
    let mut design = lhs_design(&bounds, N_PHYSICS_PARAMS, cfg.n_design, cfg.seed.wrapping_add(4))?;
    let truth_point: Vec<f64> = truth
        .x_star
        .iter()
        .chain(truth.c_star.flat().iter())
        .copied()
        .collect();

    let mut designs = Vec::new();
    let mut reports = Vec::new();
    let mut volume_fan = DMatrix::zeros(0, 0);
    for (wi, wave) in cfg.waves.iter().take(n_waves).enumerate() {
        let runs = simulate_design(cfg, &model, &truth.boundary_obs, &covs, &sigma_t_obs, &c_box, &design)?;
        let data = build_wave_data(cfg, &specs, &wave.specs, &runs)?;
        let wave_specs: Vec<OutputSpec> = wave
            .specs
            .iter()
            .map(|id| specs.iter().find(|s| &s.id == id).unwrap().clone())
            .collect();
        state = run_wave(&state, &design, &data, &wave_specs, wave.combine, &options)?;
        let space = state.space.as_ref().unwrap();
        reports.push(WaveReport {
            wave_index: wi + 1,
            n_design: design.len(),
            n_survivors: state.n_survivors(),
            fraction: state.fractions[wi],
            truth_retained: space.contains(&truth_point)?,
        });
        if wi + 1 == n_waves {
            volume_fan = DMatrix::from_fn(runs.len(), lt, |i, t| {
                runs[i][t].sum() * sim.cell_area
            });
        }
        designs.push(std::mem::take(&mut design));
        if wi + 1 < n_waves {
            // Linear-mean emulators need dim + 2 training points; grow the
            // rejection budget if the NROY fraction is too small to supply
            // them on the first try.
            let min_needed = (bounds.len() + 2).min(wave.n_design);
            let mut budget = 500 * wave.n_design;
            loop {
                design = nroy_resample(
                    space,
                    &bounds,
                    N_PHYSICS_PARAMS,
                    wave.n_design,
                    wave.frac_best,
                    cfg.seed.wrapping_add(100 + wi as u64),
                    budget,
                )?;
                if design.len() >= min_needed || budget >= 8000 * wave.n_design {
                    break;
                }
                budget *= 2;
            }
            if design.len() < min_needed {
                return Err(Error::EmptyNroy(format!(
                    "wave {} resample found only {} NROY points, need {}",
                    wi + 1,
                    design.len(),
                    min_needed
                )));
            }
        }
    }

    Ok(PipelineRun {
        model,
        truth,
        specs,
        prior_bounds,
        prior_report,
        bounds,
        designs,
        state,
        reports,
        volume_fan,
    })
}

#[derive(Serialize)]
struct RunSummary<'a> {
    seed: u64,
    prior: &'a PriorSpaceReport,
    bounds: &'a [(f64, f64)],
    fractions: &'a [f64],
    waves: &'a [WaveReport],
    truth_x: &'a [f64],
    truth_c: Vec<f64>,
}

/// Write the run's artifacts (summary JSON, per-wave designs, volume fan)
/// into `out_dir`; returns the paths written. Output is deterministic:
/// rerunning the same configuration reproduces every byte.
pub fn write_run_artifacts(cfg: &PipelineConfig, run: &PipelineRun, out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::Io {
        path: out_dir.display().to_string(),
        source: e,
    })?;
    let mut paths = Vec::new();

    let summary = RunSummary {
        seed: cfg.seed,
        prior: &run.prior_report,
        bounds: &run.bounds,
        fractions: &run.state.fractions,
        waves: &run.reports,
        truth_x: &run.truth.x_star,
        truth_c: run.truth.c_star.flat(),
    };
    let p = out_dir.join("report.json");
    crate::io::write_json(&p, &summary)?;
    paths.push(p);

    for (wi, design) in run.designs.iter().enumerate() {
        let p = out_dir.join(format!("design_wave_{}.csv", wi + 1));
        crate::io::write_design_csv(&p, design)?;
        paths.push(p);
    }

    let p = out_dir.join("volume_fan.csv");
    crate::io::write_matrix_csv(&p, &run.volume_fan)?;
    paths.push(p);

    Ok(paths)
}
