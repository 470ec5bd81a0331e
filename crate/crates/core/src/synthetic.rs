//! A cheap toy ice simulator and synthetic data generators, so the full
//! calibration pipeline is runnable and falsifiable at desk scale. The
//! simulator is deliberately simple: its only contract is smoothness in all
//! inputs, a physical floor at zero thickness, monotone response to warming,
//! and nontrivial dependence on every physics parameter.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::CentredEnsemble;
use crate::boundary::{mean_function, BoundaryModel, CoefficientVector};
use crate::error::{Error, Result};
use crate::kron::FieldVector;
use crate::obs::{ObsEntry, ObservationSet};

pub const N_PHYSICS_PARAMS: usize = 7;

/// Simulator configuration: grid, time axis, physics-parameter bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ToySimulatorConfig {
    pub nx: usize,
    pub ny: usize,
    pub n_timesteps: usize,
    pub cell_area: f64,
    /// Bounds for (melt sensitivity, accumulation rate, flow factor,
    /// lapse-rate analogue, melt threshold, accumulation width, initial
    /// scale).
    pub param_bounds: Vec<(f64, f64)>,
}

impl Default for ToySimulatorConfig {
    fn default() -> Self {
        ToySimulatorConfig {
            nx: 20,
            ny: 15,
            n_timesteps: 30,
            cell_area: 1.0,
            param_bounds: vec![
                (0.0, 1.5),   // melt sensitivity
                (0.2, 2.0),   // accumulation rate
                (0.01, 0.2),  // flow factor (diffusion)
                (0.0, 0.02),  // lapse-rate analogue
                (-2.0, 2.0),  // melt threshold
                (0.5, 3.0),   // accumulation width
                (0.5, 2.0),   // initial-thickness scale
            ],
        }
    }
}

impl ToySimulatorConfig {
    pub fn n_cells(&self) -> usize {
        self.nx * self.ny
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cells() < 4 {
            return Err(Error::Config("grid must have at least 4 cells".into()));
        }
        if self.n_timesteps == 0 {
            return Err(Error::Config("need at least one timestep".into()));
        }
        if self.param_bounds.len() != N_PHYSICS_PARAMS {
            return Err(Error::Config(format!(
                "expected {} physics-parameter bounds, got {}",
                N_PHYSICS_PARAMS,
                self.param_bounds.len()
            )));
        }
        if self
            .param_bounds
            .iter()
            .any(|&(lo, hi)| !(lo.is_finite() && hi.is_finite() && lo < hi))
        {
            return Err(Error::Config("physics-parameter bounds must be finite and ordered".into()));
        }
        if !(self.cell_area > 0.0) {
            return Err(Error::Config("cell area must be positive".into()));
        }
        Ok(())
    }

    fn cell_xy(&self, s: usize) -> (usize, usize) {
        (s % self.nx, s / self.nx)
    }

    /// Initial dome profile: a Gaussian bump centred on the grid.
    pub fn initial_thickness(&self, scale: f64) -> DVector<f64> {
        let (cx, cy) = ((self.nx as f64 - 1.0) / 2.0, (self.ny as f64 - 1.0) / 2.0);
        let sigma = (self.nx.max(self.ny) as f64) / 3.0;
        DVector::from_fn(self.n_cells(), |s, _| {
            let (x, y) = self.cell_xy(s);
            let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
            scale * 30.0 * (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

/// Run the toy simulator: thickness evolves by accumulation minus
/// temperature-driven melt with diffusive flow. Returns one thickness field
/// per timestep (after the step).
pub fn toy_simulate(
    cfg: &ToySimulatorConfig,
    x: &[f64],
    boundary: &FieldVector,
) -> Result<Vec<DVector<f64>>> {
    cfg.validate()?;
    if x.len() != N_PHYSICS_PARAMS {
        return Err(Error::shape(
            "toy_simulate",
            N_PHYSICS_PARAMS.to_string(),
            x.len().to_string(),
        ));
    }
    if x.iter().any(|v| !v.is_finite()) || boundary.values().iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite simulator input".into()));
    }
    let n = cfg.n_cells();
    if boundary.n_locations() != n || boundary.n_times() != cfg.n_timesteps {
        return Err(Error::shape(
            "toy_simulate boundary",
            format!("{} cells x {} timesteps", n, cfg.n_timesteps),
            format!("{}x{}", boundary.n_locations(), boundary.n_times()),
        ));
    }
    let (melt_sens, accum_rate, flow, lapse, melt_thresh, accum_width, init_scale) =
        (x[0], x[1], x[2], x[3], x[4], x[5], x[6]);

    let mut h = cfg.initial_thickness(init_scale);
    let mut out = Vec::with_capacity(cfg.n_timesteps);
    for t in 0..cfg.n_timesteps {
        // Diffusive flow on the grid (explicit 5-point stencil).
        let mut next = h.clone();
        for s in 0..n {
            let (xi, yi) = cfg.cell_xy(s);
            let mut lap = 0.0;
            let mut deg = 0.0;
            let add = |dx: isize, dy: isize, lap: &mut f64, deg: &mut f64| {
                let (nx, ny) = (xi as isize + dx, yi as isize + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < cfg.nx && (ny as usize) < cfg.ny {
                    *lap += h[ny as usize * cfg.nx + nx as usize];
                    *deg += 1.0;
                }
            };
            add(-1, 0, &mut lap, &mut deg);
            add(1, 0, &mut lap, &mut deg);
            add(0, -1, &mut lap, &mut deg);
            add(0, 1, &mut lap, &mut deg);
            next[s] = h[s] + flow * (lap - deg * h[s]);
        }
        // Mass balance: accumulation falls off smoothly with warmth; melt
        // grows smoothly past the threshold. Thicker ice sits higher and so
        // feels a colder effective temperature (lapse feedback).
        for s in 0..n {
            let temp = boundary.get(s, t) - lapse * next[s];
            let accum = accum_rate * sigmoid(-temp / accum_width);
            let melt = melt_sens * softplus(temp - melt_thresh);
            next[s] = (next[s] + accum - melt).max(0.0);
        }
        h = next;
        out.push(h.clone());
    }
    Ok(out)
}

/// Total ice volume of one thickness field.
pub fn ice_volume(thickness: &DVector<f64>, cell_area: f64) -> Result<f64> {
    if thickness.iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::Data("negative or non-finite thickness".into()));
    }
    Ok(thickness.sum() * cell_area)
}

/// Binary ice-extent map over a region: binarise the thickness restricted to
/// the masked cells.
pub fn extent_region(
    thickness: &DVector<f64>,
    mask: &[usize],
    threshold: f64,
) -> Result<DVector<f64>> {
    if mask.is_empty() {
        return Err(Error::Config("empty region mask".into()));
    }
    let mut out = DVector::zeros(mask.len());
    for (i, &s) in mask.iter().enumerate() {
        if s >= thickness.len() {
            return Err(Error::Index(format!("mask cell {} out of range", s)));
        }
        out[i] = if thickness[s] > threshold { 1.0 } else { 0.0 };
    }
    Ok(out)
}

/// Rectangular region mask: cells with x0 <= x < x1 and y0 <= y < y1.
pub fn rect_mask(cfg: &ToySimulatorConfig, x0: usize, x1: usize, y0: usize, y1: usize) -> Vec<usize> {
    let mut mask = Vec::new();
    for y in y0..y1.min(cfg.ny) {
        for x in x0..x1.min(cfg.nx) {
            mask.push(y * cfg.nx + x);
        }
    }
    mask
}

/// A smooth synthetic climate-model ensemble over the simulator grid:
/// spatially and temporally correlated random fields around a cooling-then-
/// warming base trajectory, standing in for the GCM runs.
pub fn synthetic_ensemble(
    cfg: &ToySimulatorConfig,
    n_members: usize,
    seed: u64,
) -> Result<CentredEnsemble> {
    cfg.validate()?;
    let (n, lt) = (cfg.n_cells(), cfg.n_timesteps);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut raw = DMatrix::zeros(n * lt, n_members);
    // Low-order smooth modes in space and time with random weights.
    let modes_t: Vec<DVector<f64>> = (1..=3)
        .map(|k| {
            DVector::from_fn(lt, |t, _| {
                (std::f64::consts::PI * k as f64 * (t as f64 + 0.5) / lt as f64).cos()
            })
        })
        .collect();
    let modes_s: Vec<DVector<f64>> = (0..3)
        .map(|k| {
            DVector::from_fn(n, |s, _| {
                let (x, y) = cfg.cell_xy(s);
                match k {
                    0 => 1.0,
                    1 => (x as f64 / cfg.nx as f64) * 2.0 - 1.0,
                    _ => (y as f64 / cfg.ny as f64) * 2.0 - 1.0,
                }
            })
        })
        .collect();
    for i in 0..n_members {
        let warming: f64 = 4.0 + 2.0 * rng.random::<f64>();
        for s in 0..n {
            for t in 0..lt {
                // Base warming trajectory: cold early, warm late.
                let frac = t as f64 / (lt - 1).max(1) as f64;
                let mut v = -8.0 + warming * frac;
                for (kt, mt) in modes_t.iter().enumerate() {
                    for (ks, ms) in modes_s.iter().enumerate() {
                        let w: f64 = {
                            // Member-specific smooth weights, deterministic in i.
                            let phase = (i * 7 + kt * 3 + ks) as f64;
                            (phase * 0.7).sin() * 1.2
                        };
                        v += w * mt[t] * ms[s] / (1.0 + kt as f64 + ks as f64);
                    }
                }
                v += 0.3 * rng.random::<f64>();
                raw[(s * lt + t, i)] = v;
            }
        }
    }
    CentredEnsemble::from_raw(raw, None)
}

/// Synthetic-truth configuration: observation sparsity and noise levels.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthConfig {
    /// Fraction of (location, time) cells observed at chosen record sites.
    pub obs_fraction: f64,
    /// Number of boundary record sites.
    pub n_record_sites: usize,
    /// Range of heteroscedastic boundary observation error SDs.
    pub boundary_sd: (f64, f64),
    /// (time index, observation error SD) per ice-volume target.
    pub volume_targets: Vec<(usize, f64)>,
    pub binary_threshold: f64,
}

impl Default for TruthConfig {
    fn default() -> Self {
        TruthConfig {
            obs_fraction: 0.6,
            n_record_sites: 8,
            boundary_sd: (0.6, 1.5),
            volume_targets: vec![(9, 2.0), (19, 1.19), (29, 0.53)],
            binary_threshold: 10.0,
        }
    }
}

/// A generated truth: parameters, boundary observations, and ice targets.
#[derive(Debug, Clone)]
pub struct SyntheticTruth {
    pub x_star: Vec<f64>,
    pub c_star: CoefficientVector,
    pub true_boundary: FieldVector,
    pub true_thickness: Vec<DVector<f64>>,
    pub boundary_obs: ObservationSet,
    /// (time index, noisy observed volume, error SD).
    pub volume_obs: Vec<(usize, f64, f64)>,
}

/// Sample a truth (x*, c*), run the simulator on h(c*), and generate sparse
/// heteroscedastic boundary observations plus noisy ice-volume targets.
pub fn synthetic_truth(
    cfg: &ToySimulatorConfig,
    model: &BoundaryModel,
    prior_bounds: &[(f64, f64)],
    tcfg: &TruthConfig,
    seed: u64,
) -> Result<SyntheticTruth> {
    cfg.validate()?;
    let d_c = model.n_coefficients();
    if prior_bounds.len() != d_c {
        return Err(Error::shape(
            "synthetic_truth",
            d_c.to_string(),
            prior_bounds.len().to_string(),
        ));
    }
    if !(0.0..=1.0).contains(&tcfg.obs_fraction) {
        return Err(Error::Config("obs_fraction must be in [0, 1]".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Truth drawn from the middle half of each range so nominal noise keeps
    // it comfortably inside the box.
    let mid_draw = |lo: f64, hi: f64, rng: &mut ChaCha8Rng| {
        lo + (0.25 + 0.5 * rng.random::<f64>()) * (hi - lo)
    };
    let x_star: Vec<f64> = cfg
        .param_bounds
        .iter()
        .map(|&(lo, hi)| mid_draw(lo, hi, &mut rng))
        .collect();
    let c_flat: Vec<f64> = prior_bounds
        .iter()
        .map(|&(lo, hi)| if hi > lo { mid_draw(lo, hi, &mut rng) } else { lo })
        .collect();
    let c_star = CoefficientVector {
        temporal: c_flat[..model.n_temporal()].to_vec(),
        spatial: c_flat[model.n_temporal()..].to_vec(),
        bounds: prior_bounds.to_vec(),
    };

    let true_boundary = mean_function(model, &c_star)?;
    let true_thickness = toy_simulate(cfg, &x_star, &true_boundary)?;

    // Sparse boundary records at a few sites, heteroscedastic noise.
    let n = cfg.n_cells();
    let lt = cfg.n_timesteps;
    let mut sites: Vec<usize> = Vec::new();
    while sites.len() < tcfg.n_record_sites.min(n) {
        let s = rng.random_range(0..n);
        if !sites.contains(&s) {
            sites.push(s);
        }
    }
    sites.sort_unstable();
    let (sd_lo, sd_hi) = tcfg.boundary_sd;
    let mut entries = Vec::new();
    for &s in &sites {
        let mut times: Vec<usize> = (0..lt).collect();
        for i in (1..lt).rev() {
            let k = rng.random_range(0..=i);
            times.swap(i, k);
        }
        let keep = ((tcfg.obs_fraction * lt as f64).round() as usize).max(1);
        let mut kept = times[..keep].to_vec();
        kept.sort_unstable();
        for t in kept {
            let sd = sd_lo + (sd_hi - sd_lo) * rng.random::<f64>();
            let noise: f64 = StandardNormal.sample(&mut rng);
            entries.push(ObsEntry {
                location: s,
                time: t,
                value: true_boundary.get(s, t) + sd * noise,
                error_sd: sd,
            });
        }
    }
    let boundary_obs = ObservationSet::new(entries)?;

    let mut volume_obs = Vec::new();
    for &(t, sd) in &tcfg.volume_targets {
        if t >= lt {
            return Err(Error::Index(format!("volume target time {} out of range", t)));
        }
        let v = ice_volume(&true_thickness[t], cfg.cell_area)?;
        let noise: f64 = StandardNormal.sample(&mut rng);
        volume_obs.push((t, v + sd * noise, sd));
    }

    Ok(SyntheticTruth {
        x_star,
        c_star,
        true_boundary,
        true_thickness,
        boundary_obs,
        volume_obs,
    })
}
