//! The low-dimensional boundary-condition model: a spatio-temporal mean
//! field mu plus per-period temporal and spatial basis vectors, each scaled
//! by a calibration coefficient. Temporal vectors are fitted to anchor
//! observations and lifted back to full fields as ensemble combinations;
//! spatial vectors correct time-averaged residual biases.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::{
    optimal_rotation, project_columns, svd_basis, Basis, CentredEnsemble,
    Weight,
};
use crate::error::{Error, Result};
use crate::kron::{
    conditional_mean, impute_missing, kron_dense, marginal_obs_cov, FieldVector, ImputeMode,
    KroneckerCov,
};
use crate::obs::ObservationSet;

pub const DEFAULT_MIN_SIGNAL: f64 = 0.001;

/// Half-open time-index range of one fitting period.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Period {
    pub start: usize,
    pub end: usize,
}

impl Period {
    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.start
    }

    pub fn contains(&self, t: usize) -> bool {
        t >= self.start && t < self.end
    }
}

fn check_periods(periods: &[Period], n_times: usize) -> Result<()> {
    if periods.is_empty() {
        return Err(Error::Config("at least one period required".into()));
    }
    let mut expect = 0;
    for (i, p) in periods.iter().enumerate() {
        if p.is_empty() || p.start != expect {
            return Err(Error::Config(format!(
                "periods must partition the time axis without overlap; period {} is [{}, {})",
                i, p.start, p.end
            )));
        }
        expect = p.end;
    }
    if expect != n_times {
        return Err(Error::Config(format!(
            "periods end at {} but the time axis has {} steps",
            expect, n_times
        )));
    }
    Ok(())
}

/// A full-field temporal basis vector, nonzero only within its period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalVector {
    pub field: FieldVector,
    pub period: usize,
}

/// A spatial pattern repeated at every time point of its period.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpatialVector {
    pub pattern: DVector<f64>,
    pub period: usize,
}

impl SpatialVector {
    /// Expand to a full field: pattern at every time step of the period,
    /// zero elsewhere.
    pub fn to_field(&self, periods: &[Period], n_locations: usize, n_times: usize) -> FieldVector {
        let p = periods[self.period];
        let mut f = FieldVector::zeros(n_locations, n_times);
        for s in 0..n_locations {
            for t in p.start..p.end {
                f.set(s, t, self.pattern[s]);
            }
        }
        f
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryModel {
    pub mu: FieldVector,
    pub temporal: Vec<TemporalVector>,
    pub spatial: Vec<SpatialVector>,
    pub periods: Vec<Period>,
    /// Per-period ensemble-combination weights (n x n_t of that period).
    pub lifts: Vec<DMatrix<f64>>,
    pub source_hash: u64,
}

impl BoundaryModel {
    pub fn n_locations(&self) -> usize {
        self.mu.n_locations()
    }

    pub fn n_times(&self) -> usize {
        self.mu.n_times()
    }

    pub fn n_temporal(&self) -> usize {
        self.temporal.len()
    }

    pub fn n_spatial(&self) -> usize {
        self.spatial.len()
    }

    pub fn n_coefficients(&self) -> usize {
        self.n_temporal() + self.n_spatial()
    }
}

/// Calibration coefficients (c^t, c^s) with per-coefficient bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientVector {
    pub temporal: Vec<f64>,
    pub spatial: Vec<f64>,
    pub bounds: Vec<(f64, f64)>,
}

impl CoefficientVector {
    pub fn new(temporal: Vec<f64>, spatial: Vec<f64>, bounds: Vec<(f64, f64)>) -> Result<Self> {
        let c = CoefficientVector { temporal, spatial, bounds };
        c.validate()?;
        Ok(c)
    }

    pub fn len(&self) -> usize {
        self.temporal.len() + self.spatial.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.temporal.clone();
        v.extend_from_slice(&self.spatial);
        v
    }

    pub fn validate(&self) -> Result<()> {
        if self.bounds.len() != self.len() {
            return Err(Error::shape(
                "coefficient bounds",
                self.len().to_string(),
                self.bounds.len().to_string(),
            ));
        }
        for (i, (v, &(lo, hi))) in self.flat().into_iter().zip(self.bounds.iter()).enumerate() {
            if v < lo || v > hi {
                return Err(Error::Bounds { index: i, value: v, lo, hi });
            }
        }
        Ok(())
    }
}

/// Squared-exponential covariance over 1-d coordinates (e.g. time indices).
pub fn sq_exp_cov_1d(coords: &[f64], length_scale: f64, variance: f64, nugget: f64) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        let d = (coords[i] - coords[j]) / length_scale;
        variance * (-0.5 * d * d).exp() + if i == j { nugget } else { 0.0 }
    })
}

/// Squared-exponential covariance over points in the plane (site coordinates).
pub fn sq_exp_cov_2d(
    coords: &[(f64, f64)],
    length_scale: f64,
    variance: f64,
    nugget: f64,
) -> DMatrix<f64> {
    let n = coords.len();
    DMatrix::from_fn(n, n, |i, j| {
        let dx = coords[i].0 - coords[j].0;
        let dy = coords[i].1 - coords[j].1;
        let d2 = (dx * dx + dy * dy) / (length_scale * length_scale);
        variance * (-0.5 * d2).exp() + if i == j { nugget } else { 0.0 }
    })
}

/// Block-average a raw time series field by `factor` (ingestion support for
/// coarse time stepping). The time axis must divide evenly.
pub fn block_average_time(field: &FieldVector, factor: usize) -> Result<FieldVector> {
    if factor == 0 || field.n_times() % factor != 0 {
        return Err(Error::Config(format!(
            "block factor {} does not divide time axis {}",
            factor,
            field.n_times()
        )));
    }
    let lt = field.n_times() / factor;
    let ls = field.n_locations();
    let mut out = FieldVector::zeros(ls, lt);
    for s in 0..ls {
        for t in 0..lt {
            let mut acc = 0.0;
            for k in 0..factor {
                acc += field.get(s, t * factor + k);
            }
            out.set(s, t, acc / factor as f64);
        }
    }
    Ok(out)
}

/// Row indices of the field layout for the given locations (all times).
fn location_rows(locations: &[usize], n_times: usize) -> Vec<usize> {
    let mut rows = Vec::with_capacity(locations.len() * n_times);
    for &s in locations {
        for t in 0..n_times {
            rows.push(s * n_times + t);
        }
    }
    rows
}

/// Fit the temporal basis for one period: SVD of the anchor-restricted
/// centred ensemble, rotated against the centred anchor observations with
/// W = [sigma_s]_anchors (x) sigma_t_obs, truncated to `n_t`. Returns the
/// rotated anchor basis and the ensemble-combination lift matrix.
///
/// `ens` covers one period (all locations); `z_anchor` is the imputed,
/// complete observation field over `anchors` for the same period.
pub fn fit_temporal_basis(
    ens: &CentredEnsemble,
    n_times: usize,
    z_anchor: &FieldVector,
    anchors: &[usize],
    sigma_s: &DMatrix<f64>,
    sigma_t_obs: &DMatrix<f64>,
    n_t: usize,
    min_signal: f64,
) -> Result<(Basis, DMatrix<f64>)> {
    if anchors.is_empty() {
        return Err(Error::Data("no anchor locations".into()));
    }
    if n_t >= ens.n_members() {
        return Err(Error::RankDeficient {
            name: format!("n_t = {} with only {} ensemble members", n_t, ens.n_members()),
        });
    }
    if z_anchor.n_locations() != anchors.len() || z_anchor.n_times() != n_times {
        return Err(Error::shape(
            "fit_temporal_basis",
            format!("anchor field {}x{}", anchors.len(), n_times),
            format!("{}x{}", z_anchor.n_locations(), z_anchor.n_times()),
        ));
    }

    let rows = location_rows(anchors, n_times);
    let sub = ens.restrict_rows(&rows)?;
    let full = svd_basis(&sub)?;

    let sigma_s_anchor = DMatrix::from_fn(anchors.len(), anchors.len(), |i, j| {
        sigma_s[(anchors[i], anchors[j])]
    });
    let w = Weight::Spd(kron_dense(&sigma_s_anchor, sigma_t_obs));
    let z_centred = z_anchor.values() - sub.mean();
    let n_t = n_t.min(full.rank());
    let mut rotated = optimal_rotation(&full, &w, &z_centred, n_t, min_signal)?;
    // Lift provenance is against the caller's (full-field) ensemble.
    rotated.source_hash = ens.provenance_hash();
    let lift = rotated.lift_matrix();
    Ok((rotated, lift))
}

/// Lift a rotated anchor basis to full spatio-temporal vectors: each is the
/// ensemble combination recorded in the lift matrix.
pub fn lift_temporal(
    ens: &CentredEnsemble,
    lift: &DMatrix<f64>,
    source_hash: u64,
    n_locations: usize,
    n_times: usize,
) -> Result<Vec<FieldVector>> {
    if ens.provenance_hash() != source_hash {
        return Err(Error::Consistency(
            "lift matrix was fitted on a different ensemble".into(),
        ));
    }
    if lift.nrows() != ens.n_members() {
        return Err(Error::shape(
            "lift_temporal",
            ens.n_members().to_string(),
            lift.nrows().to_string(),
        ));
    }
    let lifted = ens.data() * lift;
    (0..lift.ncols())
        .map(|j| FieldVector::new(lifted.column(j).into_owned(), n_locations, n_times))
        .collect()
}

/// Result of the spatial-basis fit: per-location patterns plus the holdout
/// reconstruction-error diagnostic.
#[derive(Debug, Clone)]
pub struct SpatialFit {
    pub patterns: Vec<DVector<f64>>,
    pub holdout_error: f64,
}

/// Fit spatial correction vectors for one period. Centred ensemble members
/// and the (imputed) observations have their projection onto the temporal
/// vectors removed, are averaged across time, and the SVD basis of the
/// ensemble residual is rotated against the observation residual at
/// `fit_locations` with W = [sigma_s] restricted there.
pub fn fit_spatial_basis(
    ens: &CentredEnsemble,
    n_locations: usize,
    n_times: usize,
    temporal_vectors: &[FieldVector],
    z_obs: &FieldVector,
    obs_locations: &[usize],
    fit_locations: &[usize],
    holdout_locations: &[usize],
    sigma_s: &DMatrix<f64>,
    sigma_t_obs: &DMatrix<f64>,
    n_s: usize,
    min_signal: f64,
) -> Result<SpatialFit> {
    if fit_locations.iter().any(|l| holdout_locations.contains(l)) {
        return Err(Error::Config("fit and holdout locations must be disjoint".into()));
    }
    for locs in [fit_locations, holdout_locations] {
        for l in locs {
            if !obs_locations.contains(l) {
                return Err(Error::Config(format!("location {} is not observed", l)));
            }
        }
    }
    if z_obs.n_locations() != obs_locations.len() || z_obs.n_times() != n_times {
        return Err(Error::shape(
            "fit_spatial_basis",
            format!("{}x{}", obs_locations.len(), n_times),
            format!("{}x{}", z_obs.n_locations(), z_obs.n_times()),
        ));
    }

    let ell = n_locations * n_times;
    let t_mat = if temporal_vectors.is_empty() {
        DMatrix::zeros(ell, 0)
    } else {
        DMatrix::from_columns(
            &temporal_vectors
                .iter()
                .map(|f| f.values().clone())
                .collect::<Vec<_>>(),
        )
    };

    // Ensemble residuals after removing the temporal projection.
    let resid_ens = if t_mat.ncols() == 0 {
        ens.data().clone()
    } else {
        let coeffs = project_columns(&t_mat, &Weight::Identity, ens.data(), &DVector::zeros(ell))?;
        ens.data() - &t_mat * coeffs
    };

    // Observation residual, projecting over observed entries only with the
    // observation-error weight.
    let obs_rows = location_rows(obs_locations, n_times);
    let mu_obs = DVector::from_fn(obs_rows.len(), |i, _| ens.mean()[obs_rows[i]]);
    let z_centred = z_obs.values() - &mu_obs;
    let resid_obs = if t_mat.ncols() == 0 {
        z_centred.clone()
    } else {
        let t_obs = t_mat.select_rows(obs_rows.iter());
        let sigma_s_obs = DMatrix::from_fn(obs_locations.len(), obs_locations.len(), |i, j| {
            sigma_s[(obs_locations[i], obs_locations[j])]
        });
        let w = Weight::Spd(kron_dense(&sigma_s_obs, sigma_t_obs));
        let c_z = project_columns(
            &t_obs,
            &w,
            &DMatrix::from_column_slice(z_centred.len(), 1, z_centred.as_slice()),
            &DVector::zeros(z_centred.len()),
        )?;
        &z_centred - t_obs * c_z.column(0)
    };

    // Average across time: per-location means.
    let ens_avg = DMatrix::from_fn(n_locations, ens.n_members(), |s, i| {
        (0..n_times).map(|t| resid_ens[(s * n_times + t, i)]).sum::<f64>() / n_times as f64
    });
    let obs_avg = DVector::from_fn(obs_locations.len(), |k, _| {
        (0..n_times).map(|t| resid_obs[k * n_times + t]).sum::<f64>() / n_times as f64
    });

    let resid_rank = ens_avg.rank(1e-10);
    if n_s > resid_rank {
        return Err(Error::RankDeficient {
            name: format!("n_s = {} exceeds residual rank {}", n_s, resid_rank),
        });
    }

    let resid_ensemble = CentredEnsemble::new(
        ens_avg.clone(),
        DVector::zeros(n_locations),
        ens.member_ids().to_vec(),
    )?;
    let fit_rows: Vec<usize> = fit_locations
        .iter()
        .map(|l| obs_locations.iter().position(|o| o == l).unwrap())
        .collect();
    let sub = resid_ensemble.restrict_rows(fit_locations)?;
    let full = svd_basis(&sub)?;
    let sigma_s_fit = DMatrix::from_fn(fit_locations.len(), fit_locations.len(), |i, j| {
        sigma_s[(fit_locations[i], fit_locations[j])]
    });
    let w = Weight::Spd(sigma_s_fit);
    let z_fit = DVector::from_fn(fit_rows.len(), |i, _| obs_avg[fit_rows[i]]);
    let n_s_eff = n_s.min(full.rank());
    let rotated = optimal_rotation(&full, &w, &z_fit, n_s_eff, min_signal)?;

    // Lift restricted patterns to all locations via the ensemble combination.
    let lift = rotated.lift_matrix();
    let lifted = &ens_avg * &lift;
    let patterns: Vec<DVector<f64>> = (0..lifted.ncols()).map(|j| lifted.column(j).into_owned()).collect();

    // Holdout diagnostic: reconstruction error of the observation residual
    // at held-out locations, using coefficients fitted at `fit_locations`.
    let holdout_error = if holdout_locations.is_empty() {
        0.0
    } else {
        let coeffs = project_columns(
            &rotated.vectors,
            &w,
            &DMatrix::from_column_slice(z_fit.len(), 1, z_fit.as_slice()),
            &DVector::zeros(z_fit.len()),
        )?;
        let mut err = 0.0;
        for l in holdout_locations {
            let k = obs_locations.iter().position(|o| o == l).unwrap();
            let mut recon = 0.0;
            for (j, p) in patterns.iter().enumerate() {
                recon += coeffs[(j, 0)] * p[*l];
            }
            err += (obs_avg[k] - recon).powi(2);
        }
        err
    };

    Ok(SpatialFit { patterns, holdout_error })
}

/// Append a hand-specified spatial pattern for one period, with its own
/// coefficient.
pub fn append_expert_vector(
    model: &BoundaryModel,
    pattern: DVector<f64>,
    period: usize,
) -> Result<BoundaryModel> {
    if pattern.len() != model.n_locations() {
        return Err(Error::shape(
            "append_expert_vector",
            model.n_locations().to_string(),
            pattern.len().to_string(),
        ));
    }
    if period >= model.periods.len() {
        return Err(Error::Index(format!("period {} out of range", period)));
    }
    let mut out = model.clone();
    out.spatial.push(SpatialVector { pattern, period });
    Ok(out)
}

/// h(c) = mu + sum c_j^t t_j + sum c_j^s s_j.
pub fn mean_function(model: &BoundaryModel, c: &CoefficientVector) -> Result<FieldVector> {
    c.validate()?;
    mean_function_unchecked(model, c)
}

/// As [`mean_function`] but skipping the bounds check (diagnostics mode).
pub fn mean_function_unchecked(model: &BoundaryModel, c: &CoefficientVector) -> Result<FieldVector> {
    if c.temporal.len() != model.n_temporal() || c.spatial.len() != model.n_spatial() {
        return Err(Error::shape(
            "mean_function",
            format!("{} temporal + {} spatial", model.n_temporal(), model.n_spatial()),
            format!("{} + {}", c.temporal.len(), c.spatial.len()),
        ));
    }
    let (ls, lt) = (model.n_locations(), model.n_times());
    let mut values = model.mu.values().clone();
    for (cj, tv) in c.temporal.iter().zip(model.temporal.iter()) {
        values += tv.field.values() * *cj;
    }
    for (cj, sv) in c.spatial.iter().zip(model.spatial.iter()) {
        let p = model.periods[sv.period];
        for s in 0..ls {
            let base = s * lt;
            for t in p.start..p.end {
                values[base + t] += cj * sv.pattern[s];
            }
        }
    }
    FieldVector::new(values, ls, lt)
}

/// Generate the final boundary condition at `c`: the conditional expectation
/// of the field given the (imputed) observations. Only observed locations
/// are updated away from h(c).
pub fn generate_boundary(
    model: &BoundaryModel,
    c: &CoefficientVector,
    obs: &ObservationSet,
    sigma_s: &DMatrix<f64>,
    sigma_t: &DMatrix<f64>,
    sigma_t_obs: &DMatrix<f64>,
    mode: ImputeMode,
) -> Result<FieldVector> {
    let h = mean_function(model, c)?;
    if obs.is_empty() {
        return Ok(h);
    }
    let locs = obs.observed_locations();
    let eps = KroneckerCov::new(sigma_s.clone(), sigma_t.clone())?.restrict_locations(&locs)?;
    let e = KroneckerCov::new(sigma_s.clone(), sigma_t_obs.clone())?.restrict_locations(&locs)?;
    let marginal = marginal_obs_cov(&eps, &e)?;
    let prior = h.restrict_locations(&locs)?;
    let z = impute_missing(obs, &locs, &prior, &marginal, mode)?;
    let updated = conditional_mean(&prior, sigma_t, sigma_t_obs, &z)?;
    let mut out = h;
    for (k, &s) in locs.iter().enumerate() {
        for t in 0..out.n_times() {
            out.set(s, t, updated.get(k, t));
        }
    }
    Ok(out)
}

/// Replace each spatial slice in `time_range` with the centred moving
/// average of odd width `window`; slices outside the range are untouched.
pub fn smooth_transition(
    field: &FieldVector,
    window: usize,
    time_range: std::ops::Range<usize>,
) -> Result<FieldVector> {
    if window % 2 == 0 || window == 0 {
        return Err(Error::Config(format!("window must be odd, got {}", window)));
    }
    let half = window / 2;
    let lt = field.n_times();
    if !time_range.is_empty()
        && (time_range.start < half || time_range.end > lt || time_range.end - 1 + half >= lt)
    {
        return Err(Error::Index(format!(
            "window {} at range {:?} reaches outside the time axis of length {}",
            window, time_range, lt
        )));
    }
    let mut out = field.clone();
    for s in 0..field.n_locations() {
        for t in time_range.clone() {
            let mut acc = 0.0;
            for i in (t - half)..=(t + half) {
                acc += field.get(s, i);
            }
            out.set(s, t, acc / window as f64);
        }
    }
    Ok(out)
}

/// Disaggregate the coarse field h(c) into per-month fields. `monthly_mu[m]`
/// is the month-m ensemble mean and `monthly_temporal[j][m]` the month-m
/// version of temporal vector j; both must average back to the coarse
/// components. Spatial vectors repeat identically across months, so each
/// month's output averages exactly to h(c).
pub fn monthly_disaggregate(
    model: &BoundaryModel,
    monthly_mu: &[FieldVector],
    monthly_temporal: &[Vec<FieldVector>],
    c: &CoefficientVector,
) -> Result<Vec<FieldVector>> {
    let n_months = monthly_mu.len();
    if n_months != 12 {
        return Err(Error::Config(format!("expected 12 monthly means, got {}", n_months)));
    }
    if monthly_temporal.len() != model.n_temporal() {
        return Err(Error::shape(
            "monthly_disaggregate",
            model.n_temporal().to_string(),
            monthly_temporal.len().to_string(),
        ));
    }
    let dim = model.mu.values().len();
    let check_average = |parts: &[FieldVector], whole: &DVector<f64>, what: &str| -> Result<()> {
        let mut acc = DVector::zeros(dim);
        for p in parts {
            if p.values().len() != dim {
                return Err(Error::shape(what, dim.to_string(), p.values().len().to_string()));
            }
            acc += p.values();
        }
        acc /= n_months as f64;
        let scale = whole.norm().max(1.0);
        if (&acc - whole).norm() > 1e-8 * scale {
            return Err(Error::Consistency(format!(
                "{} monthly components do not average to the coarse component",
                what
            )));
        }
        Ok(())
    };
    check_average(monthly_mu, model.mu.values(), "mean")?;
    for (j, months) in monthly_temporal.iter().enumerate() {
        if months.len() != 12 {
            return Err(Error::Config(format!(
                "temporal vector {} has {} monthly versions, expected 12",
                j,
                months.len()
            )));
        }
        check_average(months, model.temporal[j].field.values(), "temporal")?;
    }
    c.validate()?;

    let (ls, lt) = (model.n_locations(), model.n_times());
    let mut out = Vec::with_capacity(12);
    for m in 0..12 {
        let mut values = monthly_mu[m].values().clone();
        for (cj, months) in c.temporal.iter().zip(monthly_temporal.iter()) {
            values += months[m].values() * *cj;
        }
        for (cj, sv) in c.spatial.iter().zip(model.spatial.iter()) {
            let p = model.periods[sv.period];
            for s in 0..ls {
                for t in p.start..p.end {
                    values[s * lt + t] += cj * sv.pattern[s];
                }
            }
        }
        out.push(FieldVector::new(values, ls, lt)?);
    }
    Ok(out)
}

/// Configuration for fitting a full boundary model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BoundaryFitConfig {
    pub periods: Vec<Period>,
    pub anchors: Vec<usize>,
    pub fit_locations: Vec<usize>,
    pub holdout_locations: Vec<usize>,
    pub n_t_per_period: usize,
    pub n_s_per_period: usize,
    pub min_signal: f64,
}

/// Fit the complete boundary model: impute observations at observed
/// locations, then per period fit and lift the temporal basis and fit the
/// spatial corrections.
pub fn fit_model(
    ens: &CentredEnsemble,
    n_locations: usize,
    n_times: usize,
    obs: &ObservationSet,
    sigma_s: &DMatrix<f64>,
    sigma_t: &DMatrix<f64>,
    sigma_t_obs: &DMatrix<f64>,
    cfg: &BoundaryFitConfig,
) -> Result<BoundaryModel> {
    check_periods(&cfg.periods, n_times)?;
    if ens.field_dim() != n_locations * n_times {
        return Err(Error::shape(
            "fit_model",
            (n_locations * n_times).to_string(),
            ens.field_dim().to_string(),
        ));
    }
    let obs_locations = obs.observed_locations();
    for a in &cfg.anchors {
        if obs.count_at(*a) == 0 {
            return Err(Error::Data(format!("anchor location {} has no observations", a)));
        }
    }

    // Complete the observations at observed locations, conditioning on the
    // ensemble mean as the prior.
    let mu = FieldVector::new(ens.mean().clone(), n_locations, n_times)?;
    let eps = KroneckerCov::new(sigma_s.clone(), sigma_t.clone())?.restrict_locations(&obs_locations)?;
    let e =
        KroneckerCov::new(sigma_s.clone(), sigma_t_obs.clone())?.restrict_locations(&obs_locations)?;
    let marginal = marginal_obs_cov(&eps, &e)?;
    let prior = mu.restrict_locations(&obs_locations)?;
    let z_complete = impute_missing(obs, &obs_locations, &prior, &marginal, ImputeMode::Mean)?;

    let mut temporal = Vec::new();
    let mut spatial = Vec::new();
    let mut lifts = Vec::new();
    for (pi, p) in cfg.periods.iter().enumerate() {
        // Period restriction of the ensemble (all locations).
        let rows: Vec<usize> = (0..n_locations)
            .flat_map(|s| (p.start..p.end).map(move |t| s * n_times + t))
            .collect();
        let ens_p = ens.restrict_rows(&rows)?;
        let lt_p = p.len();

        // Anchor observations for this period.
        let anchor_cols: Vec<usize> = cfg
            .anchors
            .iter()
            .map(|a| obs_locations.iter().position(|o| o == a).unwrap())
            .collect();
        let mut z_anchor = FieldVector::zeros(cfg.anchors.len(), lt_p);
        for (i, &col) in anchor_cols.iter().enumerate() {
            for t in 0..lt_p {
                z_anchor.set(i, t, z_complete.get(col, p.start + t));
            }
        }
        let sigma_t_obs_p = DMatrix::from_fn(lt_p, lt_p, |i, j| {
            sigma_t_obs[(p.start + i, p.start + j)]
        });

        let (_basis, lift) = fit_temporal_basis(
            &ens_p,
            lt_p,
            &z_anchor,
            &cfg.anchors,
            sigma_s,
            &sigma_t_obs_p,
            cfg.n_t_per_period,
            cfg.min_signal,
        )?;
        let lifted = lift_temporal(&ens_p, &lift, ens_p.provenance_hash(), n_locations, lt_p)?;
        for f in &lifted {
            // Embed the period field into the full time axis.
            let mut full = FieldVector::zeros(n_locations, n_times);
            for s in 0..n_locations {
                for t in 0..lt_p {
                    full.set(s, p.start + t, f.get(s, t));
                }
            }
            temporal.push(TemporalVector { field: full, period: pi });
        }
        lifts.push(lift);

        // Spatial corrections for this period.
        let temporal_p: Vec<FieldVector> = lifted;
        let mut z_obs_p = FieldVector::zeros(obs_locations.len(), lt_p);
        for (k, _) in obs_locations.iter().enumerate() {
            for t in 0..lt_p {
                z_obs_p.set(k, t, z_complete.get(k, p.start + t));
            }
        }
        let fit = fit_spatial_basis(
            &ens_p,
            n_locations,
            lt_p,
            &temporal_p,
            &z_obs_p,
            &obs_locations,
            &cfg.fit_locations,
            &cfg.holdout_locations,
            sigma_s,
            &sigma_t_obs_p,
            cfg.n_s_per_period,
            cfg.min_signal,
        )?;
        for pattern in fit.patterns {
            spatial.push(SpatialVector { pattern, period: pi });
        }
    }

    Ok(BoundaryModel {
        mu,
        temporal,
        spatial,
        periods: cfg.periods.clone(),
        lifts,
        source_hash: ens.provenance_hash(),
    })
}
