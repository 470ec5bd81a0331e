//! Implausibility measures, prior coefficient-space construction, NROY
//! predicates, experimental design, and multi-wave orchestration.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::boundary::{mean_function_unchecked, BoundaryModel, CoefficientVector};
use crate::emulator::GpEmulator;
use crate::error::{Error, Result};
use crate::obs::ObservationSet;

/// Binarisation threshold for "ice present", in field units.
pub const DEFAULT_BINARY_THRESHOLD: f64 = 10.0;
/// Keep probability for the probability-mode binary decision.
pub const KEEP_PROBABILITY: f64 = 0.05;
/// Posterior draws per point for binary implausibility.
pub const DEFAULT_M_SAMPLES: usize = 100;
/// Monte-Carlo samples for NROY volume estimation.
pub const DEFAULT_MC_SAMPLES: usize = 100_000;
/// The scaled-implausibility cutoff.
pub const SCALED_CUTOFF: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputKind {
    Scalar,
    BinaryRegion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarySummary {
    Probability,
    Min,
    Mean,
}

/// One calibration output: id, dimension, observed value(s), error and
/// discrepancy variances, and the implausibility bound as an expression in
/// `ell` (e.g. "3^2", "0.25*ell").
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct OutputSpec {
    pub id: String,
    pub kind: OutputKind,
    pub wave_list: Vec<usize>,
    pub ell: usize,
    pub obs: Vec<f64>,
    pub sigma_e: Vec<f64>,
    #[serde(default)]
    pub sigma_eta: Vec<f64>,
    pub bound: String,
    #[serde(default)]
    pub binary_summary: Option<BinarySummary>,
}

impl OutputSpec {
    pub fn validate(&self) -> Result<()> {
        if self.ell == 0 {
            return Err(Error::Config(format!("{}: ell must be positive", self.id)));
        }
        if self.obs.len() != self.ell {
            return Err(Error::shape(
                format!("{} obs", self.id),
                self.ell.to_string(),
                self.obs.len().to_string(),
            ));
        }
        match self.kind {
            OutputKind::Scalar => {
                if self.sigma_e.len() != self.ell {
                    return Err(Error::shape(
                        format!("{} sigma_e", self.id),
                        self.ell.to_string(),
                        self.sigma_e.len().to_string(),
                    ));
                }
                if self.sigma_e.iter().any(|&v| v <= 0.0) {
                    return Err(Error::Config(format!("{}: sigma_e must be positive", self.id)));
                }
            }
            OutputKind::BinaryRegion => {
                if self.obs.iter().any(|&v| v != 0.0 && v != 1.0) {
                    return Err(Error::Config(format!(
                        "{}: binary observations must be 0/1",
                        self.id
                    )));
                }
            }
        }
        if !self.sigma_eta.is_empty() && self.sigma_eta.len() != self.ell {
            return Err(Error::shape(
                format!("{} sigma_eta", self.id),
                self.ell.to_string(),
                self.sigma_eta.len().to_string(),
            ));
        }
        let b = self.bound_value()?;
        if b <= 0.0 {
            return Err(Error::Config(format!("{}: bound {} must be positive", self.id, b)));
        }
        Ok(())
    }

    /// Evaluate the bound expression with `ell` bound to this output's
    /// dimension.
    pub fn bound_value(&self) -> Result<f64> {
        parse_bound(&self.bound, self.ell)
            .map_err(|e| Error::Config(format!("{}: {}", self.id, e)))
    }

    pub fn total_variance(&self) -> Vec<f64> {
        (0..self.ell)
            .map(|i| {
                self.sigma_e.get(i).copied().unwrap_or(0.0)
                    + self.sigma_eta.get(i).copied().unwrap_or(0.0)
            })
            .collect()
    }
}

/// Parse a bound expression: a number, `a^b`, `a*ell`, or `ell*a`.
pub fn parse_bound(expr: &str, ell: usize) -> std::result::Result<f64, String> {
    let atom = |s: &str| -> std::result::Result<f64, String> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("ell") {
            return Ok(ell as f64);
        }
        s.parse::<f64>().map_err(|_| format!("malformed bound expression `{}`", s))
    };
    let s = expr.trim();
    if let Some((a, b)) = s.split_once('^') {
        return Ok(atom(a)?.powf(atom(b)?));
    }
    if let Some((a, b)) = s.split_once('*') {
        return Ok(atom(a)? * atom(b)?);
    }
    atom(s)
}

/// Mahalanobis implausibility (z - m)^T V^-1 (z - m).
pub fn implausibility(z: &DVector<f64>, pred_mean: &DVector<f64>, total_var: &DMatrix<f64>) -> Result<f64> {
    let ell = z.len();
    if pred_mean.len() != ell || total_var.nrows() != ell || total_var.ncols() != ell {
        return Err(Error::shape(
            "implausibility",
            format!("{} entries", ell),
            format!("mean {}, var {}x{}", pred_mean.len(), total_var.nrows(), total_var.ncols()),
        ));
    }
    let chol = total_var.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        name: "total variance".into(),
    })?;
    let resid = z - pred_mean;
    Ok(resid.dot(&chol.solve(&resid)).max(0.0))
}

/// Scalar shortcut: (z - m)^2 / v.
pub fn implausibility_scalar(z: f64, pred_mean: f64, total_var: f64) -> Result<f64> {
    if total_var <= 0.0 {
        return Err(Error::NotPositiveDefinite { name: "total variance".into() });
    }
    Ok((z - pred_mean).powi(2) / total_var)
}

/// The j-th largest implausibility (j = 1 is the maximum).
pub fn jth_max_implausibility(impls: &[f64], j: usize) -> Result<f64> {
    if j == 0 || j > impls.len() {
        return Err(Error::Index(format!(
            "j = {} not in 1..={}",
            j,
            impls.len()
        )));
    }
    let mut sorted = impls.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    Ok(sorted[j - 1])
}

/// The 99.5% chi-squared quantile with `ell` degrees of freedom.
pub fn chi2_quantile(ell: usize) -> Result<f64> {
    if ell == 0 {
        return Err(Error::Config("chi-squared quantile needs ell >= 1".into()));
    }
    let dist = ChiSquared::new(ell as f64)
        .map_err(|e| Error::Config(format!("chi-squared({}) unavailable: {}", ell, e)))?;
    Ok(dist.inverse_cdf(0.995))
}

/// Scale an implausibility so the cutoff is 3 regardless of dimension:
/// 3 * I / chi^2_{ell, 0.995}.
pub fn scaled_implausibility(impl_value: f64, ell: usize) -> Result<f64> {
    Ok(SCALED_CUTOFF * impl_value / chi2_quantile(ell)?)
}

/// Elementwise binarisation: 0 where the field is at or below the threshold,
/// 1 above it.
pub fn binarize(field: &DVector<f64>, threshold: f64) -> DVector<f64> {
    DVector::from_fn(field.len(), |i, _| if field[i] > threshold { 1.0 } else { 0.0 })
}

/// Diagnostics from prior coefficient-space rejection sampling.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriorSpaceReport {
    pub n_samples: usize,
    pub n_accepted: usize,
    /// Per observed location: (location, median scaled implausibility over
    /// the prior draws).
    pub location_medians: Vec<(usize, f64)>,
}

/// Construct the prior coefficient space C by rejection: draw c uniformly
/// over `prior_bounds`, compute per-observed-location implausibilities of
/// h(c) with zero discrepancy and no emulator (observation error only),
/// scale each by its location's observation count, and keep c whose j-th
/// maximum scaled implausibility is below 3.
pub fn prior_coeff_space(
    model: &BoundaryModel,
    obs: &ObservationSet,
    prior_bounds: &[(f64, f64)],
    j: usize,
    n_samples: usize,
    seed: u64,
) -> Result<(Vec<CoefficientVector>, PriorSpaceReport)> {
    let d = model.n_coefficients();
    if prior_bounds.len() != d {
        return Err(Error::shape(
            "prior_coeff_space",
            d.to_string(),
            prior_bounds.len().to_string(),
        ));
    }
    let locations = obs.observed_locations();
    if locations.is_empty() {
        return Err(Error::Data("no observations".into()));
    }
    if j == 0 || j > locations.len() {
        return Err(Error::Index(format!(
            "j = {} not in 1..={} observed locations",
            j,
            locations.len()
        )));
    }
    for (i, &(lo, hi)) in prior_bounds.iter().enumerate() {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("bad prior bound {} at index {}", lo, i)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n_temporal = model.n_temporal();
    let mut accepted = Vec::new();
    let mut all_scaled: Vec<Vec<f64>> = vec![Vec::with_capacity(n_samples); locations.len()];
    for _ in 0..n_samples {
        let draw: Vec<f64> = prior_bounds
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect();
        let c = CoefficientVector {
            temporal: draw[..n_temporal].to_vec(),
            spatial: draw[n_temporal..].to_vec(),
            bounds: prior_bounds.to_vec(),
        };
        let h = mean_function_unchecked(model, &c)?;
        let mut scaled = Vec::with_capacity(locations.len());
        for (k, &s) in locations.iter().enumerate() {
            let entries = obs.at_location(s);
            let mut impl_s = 0.0;
            for e in &entries {
                let v = e.error_sd * e.error_sd;
                if v <= 0.0 {
                    return Err(Error::Data(format!(
                        "zero observation error at location {} time {}",
                        e.location, e.time
                    )));
                }
                impl_s += (e.value - h.get(s, e.time)).powi(2) / v;
            }
            let sc = scaled_implausibility(impl_s, entries.len())?;
            all_scaled[k].push(sc);
            scaled.push(sc);
        }
        if jth_max_implausibility(&scaled, j)? < SCALED_CUTOFF {
            accepted.push(c);
        }
    }

    let location_medians = locations
        .iter()
        .zip(all_scaled.iter_mut())
        .map(|(&s, v)| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (s, v[v.len() / 2])
        })
        .collect();
    let report = PriorSpaceReport {
        n_samples,
        n_accepted: accepted.len(),
        location_medians,
    };
    if accepted.is_empty() {
        return Err(Error::EmptyNroy(format!(
            "no prior coefficients accepted out of {}; median scaled implausibility per location: {:?}",
            n_samples, report.location_medians
        )));
    }
    Ok((accepted, report))
}

/// Per-sample misclassification counts: draw coefficient vectors from the
/// emulator posteriors at `x`, reconstruct and binarise the field, and count
/// cells disagreeing with the binary observation.
pub fn binary_implausibility(
    z_b: &DVector<f64>,
    emulators: &[GpEmulator],
    vectors: &DMatrix<f64>,
    mean: &DVector<f64>,
    x: &[f64],
    m_samples: usize,
    threshold: f64,
    seed: u64,
) -> Result<Vec<usize>> {
    let ell = z_b.len();
    if vectors.nrows() != ell || mean.len() != ell {
        return Err(Error::shape(
            "binary_implausibility",
            format!("{} cells", ell),
            format!("vectors {}, mean {}", vectors.nrows(), mean.len()),
        ));
    }
    if vectors.ncols() != emulators.len() {
        return Err(Error::shape(
            "binary_implausibility",
            format!("{} coefficient emulators", vectors.ncols()),
            emulators.len().to_string(),
        ));
    }
    if z_b.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::Data("binary observation must be 0/1".into()));
    }
    if m_samples == 0 {
        return Err(Error::Config("m_samples must be positive".into()));
    }
    let draws: Vec<Vec<f64>> = emulators
        .iter()
        .enumerate()
        .map(|(jj, em)| em.sample_posterior(x, m_samples, seed.wrapping_add(jj as u64)))
        .collect::<Result<_>>()?;
    let mut counts = Vec::with_capacity(m_samples);
    for i in 0..m_samples {
        let c = DVector::from_fn(emulators.len(), |jj, _| draws[jj][i]);
        let field = vectors * c + mean;
        let fb = binarize(&field, threshold);
        counts.push(fb.iter().zip(z_b.iter()).filter(|(a, b)| a != b).count());
    }
    Ok(counts)
}

/// Keep decision from misclassification counts.
pub fn binary_nroy_membership(counts: &[usize], n_t: f64, summary: BinarySummary) -> Result<bool> {
    if counts.is_empty() {
        return Err(Error::Data("empty misclassification counts".into()));
    }
    Ok(match summary {
        BinarySummary::Probability => {
            let below = counts.iter().filter(|&&c| (c as f64) <= n_t).count();
            below as f64 / counts.len() as f64 >= KEEP_PROBABILITY
        }
        BinarySummary::Min => {
            (*counts.iter().min().unwrap() as f64) <= n_t
        }
        BinarySummary::Mean => {
            counts.iter().sum::<usize>() as f64 / counts.len() as f64 <= n_t
        }
    })
}

/// One point of the joint (x, c) design.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignPoint {
    pub x: Vec<f64>,
    pub c: Vec<f64>,
}

impl DesignPoint {
    pub fn flat(&self) -> Vec<f64> {
        let mut v = self.x.clone();
        v.extend_from_slice(&self.c);
        v
    }

    pub fn from_flat(flat: &[f64], d_x: usize) -> DesignPoint {
        DesignPoint {
            x: flat[..d_x].to_vec(),
            c: flat[d_x..].to_vec(),
        }
    }
}

fn min_pairwise_dist2(points: &[Vec<f64>], norm: &[(f64, f64)]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for k in (i + 1)..points.len() {
            let mut d2 = 0.0;
            for (jj, &(lo, hi)) in norm.iter().enumerate() {
                let span = (hi - lo).max(1e-300);
                let d = (points[i][jj] - points[k][jj]) / span;
                d2 += d * d;
            }
            best = best.min(d2);
        }
    }
    best
}

/// Seeded maximin-improved Latin hypercube over a box; exactly one point per
/// axis stratum in every dimension. Degenerate dimensions (lo = hi) collapse
/// to the constant.
pub fn lhs_matrix(bounds: &[(f64, f64)], n_points: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    if n_points < 2 {
        return Err(Error::Config(format!("LHS needs n_points >= 2, got {}", n_points)));
    }
    let d = bounds.len();
    if d == 0 {
        return Err(Error::Config("LHS needs at least one dimension".into()));
    }
    for &(lo, hi) in bounds {
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::Config(format!("bad LHS bound [{}, {}]", lo, hi)));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // Stratum permutation plus within-stratum jitter, per dimension.
    let mut strata: Vec<Vec<usize>> = (0..d)
        .map(|_| {
            let mut p: Vec<usize> = (0..n_points).collect();
            for i in (1..n_points).rev() {
                let k = rng.random_range(0..=i);
                p.swap(i, k);
            }
            p
        })
        .collect();
    let jitter: Vec<Vec<f64>> = (0..d)
        .map(|_| (0..n_points).map(|_| rng.random::<f64>()).collect())
        .collect();
    let realise = |strata: &[Vec<usize>], jitter: &[Vec<f64>]| -> Vec<Vec<f64>> {
        (0..n_points)
            .map(|i| {
                (0..d)
                    .map(|jj| {
                        let (lo, hi) = bounds[jj];
                        if hi > lo {
                            let u = (strata[jj][i] as f64 + jitter[jj][i]) / n_points as f64;
                            lo + u * (hi - lo)
                        } else {
                            lo
                        }
                    })
                    .collect()
            })
            .collect()
    };

    // Maximin improvement: random stratum swaps within a dimension, kept when
    // they increase the minimum pairwise distance.
    let mut points = realise(&strata, &jitter);
    let mut best = min_pairwise_dist2(&points, bounds);
    let sweeps = 50.min(2000 / n_points.max(1)).max(5);
    for _ in 0..sweeps {
        let jj = rng.random_range(0..d);
        let a = rng.random_range(0..n_points);
        let b = rng.random_range(0..n_points);
        if a == b {
            continue;
        }
        strata[jj].swap(a, b);
        let cand = realise(&strata, &jitter);
        let score = min_pairwise_dist2(&cand, bounds);
        if score > best {
            best = score;
            points = cand;
        } else {
            strata[jj].swap(a, b);
        }
    }
    Ok(points)
}

/// LHS over the joint (x, c) box; the first `d_x` dimensions are physics
/// parameters.
pub fn lhs_design(bounds: &[(f64, f64)], d_x: usize, n_points: usize, seed: u64) -> Result<Vec<DesignPoint>> {
    if d_x > bounds.len() {
        return Err(Error::Config(format!(
            "d_x = {} exceeds {} design dimensions",
            d_x,
            bounds.len()
        )));
    }
    Ok(lhs_matrix(bounds, n_points, seed)?
        .iter()
        .map(|p| DesignPoint::from_flat(p, d_x))
        .collect())
}

/// Per-output emulated predictor used inside a wave predicate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum OutputEmulator {
    Scalar(GpEmulator),
    Binary {
        emulators: Vec<GpEmulator>,
        vectors: DMatrix<f64>,
        mean: DVector<f64>,
    },
}

/// One (spec, emulator) predicate within a wave.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Predicate {
    pub spec: OutputSpec,
    pub emulator: OutputEmulator,
    pub m_samples: usize,
    pub binary_threshold: f64,
    pub seed: u64,
}

impl Predicate {
    /// Scalar implausibility at a point (error + discrepancy + emulator
    /// variance on the diagonal). Binary specs have no scalar value.
    pub fn scalar_implausibility(&self, point: &[f64]) -> Result<Option<f64>> {
        match &self.emulator {
            OutputEmulator::Scalar(em) => {
                let pred = em.predict(point)?;
                let v = self.spec.total_variance()[0] + pred.variance;
                Ok(Some(implausibility_scalar(self.spec.obs[0], pred.mean, v)?))
            }
            OutputEmulator::Binary { .. } => Ok(None),
        }
    }

    pub fn satisfied(&self, point: &[f64]) -> Result<bool> {
        let bound = self.spec.bound_value()?;
        match &self.emulator {
            OutputEmulator::Scalar(_) => {
                let i = self.scalar_implausibility(point)?.unwrap();
                Ok(i < bound)
            }
            OutputEmulator::Binary { emulators, vectors, mean } => {
                let z_b = DVector::from_column_slice(&self.spec.obs);
                let counts = binary_implausibility(
                    &z_b,
                    emulators,
                    vectors,
                    mean,
                    point,
                    self.m_samples,
                    self.binary_threshold,
                    self.seed,
                )?;
                let summary = self.spec.binary_summary.unwrap_or(BinarySummary::Probability);
                binary_nroy_membership(&counts, bound, summary)
            }
        }
    }
}

/// How a wave combines its per-output rules.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Combine {
    All,
    JthMax(usize),
}

/// The not-ruled-out-yet region after some wave: this wave's predicate
/// conjoined with the parent space.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NroySpace {
    pub wave_index: usize,
    pub predicates: Vec<Predicate>,
    pub combine: Combine,
    pub parent: Option<Box<NroySpace>>,
}

impl NroySpace {
    /// This wave's own rule, ignoring the parent.
    pub fn own_predicate(&self, point: &[f64]) -> Result<bool> {
        match self.combine {
            Combine::All => {
                for p in &self.predicates {
                    if !p.satisfied(point)? {
                        return Ok(false);
                    }
                }
                Ok(true)
            }
            Combine::JthMax(j) => {
                let mut scaled = Vec::new();
                for p in &self.predicates {
                    match p.scalar_implausibility(point)? {
                        Some(i) => scaled.push(scaled_implausibility(i, p.spec.ell)?),
                        None => {
                            // Binary rules cannot be ranked; they stay hard.
                            if !p.satisfied(point)? {
                                return Ok(false);
                            }
                        }
                    }
                }
                if scaled.is_empty() {
                    return Ok(true);
                }
                let j = j.min(scaled.len());
                Ok(jth_max_implausibility(&scaled, j)? < SCALED_CUTOFF)
            }
        }
    }

    pub fn contains(&self, point: &[f64]) -> Result<bool> {
        if let Some(parent) = &self.parent {
            if !parent.contains(point)? {
                return Ok(false);
            }
        }
        self.own_predicate(point)
    }
}

/// Training data for one wave's emulators, keyed by output id.
#[derive(Debug, Clone)]
pub enum OutputData {
    /// One value per design point.
    Scalar(Vec<f64>),
    /// Basis-coefficient targets (`n_points x n_coeffs`) plus the basis used
    /// to reconstruct the region field.
    Binary {
        coeffs: DMatrix<f64>,
        vectors: DMatrix<f64>,
        mean: DVector<f64>,
    },
}

#[derive(Debug, Clone, Default)]
pub struct WaveData {
    pub outputs: BTreeMap<String, OutputData>,
}

/// Rolling state of the multi-wave history match. The Monte-Carlo pool is
/// drawn once from the original bounds and filtered wave by wave, so volume
/// fractions are non-increasing by construction.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WaveState {
    pub bounds: Vec<(f64, f64)>,
    pub d_x: usize,
    pub space: Option<NroySpace>,
    /// NROY volume fraction of the original box after each completed wave.
    pub fractions: Vec<f64>,
    pub mc_samples: usize,
    pub seed: u64,
    /// Pool members still NROY (indices into the regenerable pool).
    survivor_indices: Vec<usize>,
}

impl WaveState {
    pub fn new(bounds: Vec<(f64, f64)>, d_x: usize, mc_samples: usize, seed: u64) -> Result<WaveState> {
        if bounds.is_empty() || d_x > bounds.len() {
            return Err(Error::Config("empty bounds or d_x out of range".into()));
        }
        if mc_samples == 0 {
            return Err(Error::Config("mc_samples must be positive".into()));
        }
        Ok(WaveState {
            bounds,
            d_x,
            space: None,
            fractions: Vec::new(),
            mc_samples,
            seed,
            survivor_indices: (0..mc_samples).collect(),
        })
    }

    pub fn wave_index(&self) -> usize {
        self.fractions.len()
    }

    /// Regenerate the fixed Monte-Carlo pool (common random numbers across
    /// waves).
    pub fn mc_pool(&self) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        (0..self.mc_samples)
            .map(|_| {
                self.bounds
                    .iter()
                    .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
                    .collect()
            })
            .collect()
    }

    pub fn n_survivors(&self) -> usize {
        self.survivor_indices.len()
    }
}

/// Knobs for wave execution: hyperparameter-search restarts, posterior
/// draws for binary rules, and the ice/no-ice threshold.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct WaveOptions {
    pub restarts: usize,
    pub m_samples: usize,
    pub binary_threshold: f64,
}

impl Default for WaveOptions {
    fn default() -> Self {
        WaveOptions {
            restarts: crate::emulator::DEFAULT_RESTARTS,
            m_samples: DEFAULT_M_SAMPLES,
            binary_threshold: DEFAULT_BINARY_THRESHOLD,
        }
    }
}

fn fit_output_emulator(
    inputs: &DMatrix<f64>,
    data: &OutputData,
    spec: &OutputSpec,
    seed: u64,
    restarts: usize,
) -> Result<OutputEmulator> {
    match data {
        OutputData::Scalar(values) => {
            if values.len() != inputs.nrows() {
                return Err(Error::shape(
                    format!("{} targets", spec.id),
                    inputs.nrows().to_string(),
                    values.len().to_string(),
                ));
            }
            let y = DVector::from_column_slice(values);
            let em = GpEmulator::fit_with_restarts(
                inputs,
                &y,
                crate::emulator::MeanSpec::Linear,
                seed,
                restarts,
            )?;
            Ok(OutputEmulator::Scalar(em))
        }
        OutputData::Binary { coeffs, vectors, mean } => {
            if coeffs.nrows() != inputs.nrows() {
                return Err(Error::shape(
                    format!("{} coefficient targets", spec.id),
                    inputs.nrows().to_string(),
                    coeffs.nrows().to_string(),
                ));
            }
            if vectors.nrows() != spec.ell || mean.len() != spec.ell {
                return Err(Error::shape(
                    format!("{} basis", spec.id),
                    spec.ell.to_string(),
                    vectors.nrows().to_string(),
                ));
            }
            let emulators = (0..coeffs.ncols())
                .map(|jj| {
                    let y = coeffs.column(jj).into_owned();
                    GpEmulator::fit_with_restarts(
                        inputs,
                        &y,
                        crate::emulator::MeanSpec::Linear,
                        seed.wrapping_add(1000 + jj as u64),
                        restarts,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(OutputEmulator::Binary {
                emulators,
                vectors: vectors.clone(),
                mean: mean.clone(),
            })
        }
    }
}

/// Run one wave: fit emulators for every spec, build the predicate, compose
/// it with the parent NROY space, and update the Monte-Carlo volume fraction.
pub fn run_wave(
    state: &WaveState,
    design: &[DesignPoint],
    data: &WaveData,
    specs: &[OutputSpec],
    combine: Combine,
    options: &WaveOptions,
) -> Result<WaveState> {
    if specs.is_empty() {
        return Err(Error::Config("wave has no output specs".into()));
    }
    let wave_index = state.wave_index() + 1;
    let dim = state.bounds.len();
    for p in design {
        if p.flat().len() != dim {
            return Err(Error::shape(
                "run_wave design",
                dim.to_string(),
                p.flat().len().to_string(),
            ));
        }
    }
    let inputs = DMatrix::from_fn(design.len(), dim, |i, jj| design[i].flat()[jj]);

    let mut predicates = Vec::new();
    for spec in specs {
        spec.validate()?;
        if !spec.wave_list.contains(&wave_index) {
            return Err(Error::Config(format!(
                "output {} is not registered for wave {}",
                spec.id, wave_index
            )));
        }
        let data = data.outputs.get(&spec.id).ok_or_else(|| {
            Error::Config(format!("no ensemble data for output {}", spec.id))
        })?;
        let emulator = fit_output_emulator(
            &inputs,
            data,
            spec,
            state.seed.wrapping_add(wave_index as u64),
            options.restarts,
        )?;
        predicates.push(Predicate {
            spec: spec.clone(),
            emulator,
            m_samples: options.m_samples,
            binary_threshold: options.binary_threshold,
            seed: state.seed.wrapping_mul(31).wrapping_add(wave_index as u64),
        });
    }

    let space = NroySpace {
        wave_index,
        predicates,
        combine,
        parent: state.space.clone().map(Box::new),
    };

    // Filter the surviving pool members through this wave's own rule only;
    // parents already filtered them.
    let pool = state.mc_pool();
    let mut survivors = Vec::new();
    for &idx in &state.survivor_indices {
        if space.own_predicate(&pool[idx])? {
            survivors.push(idx);
        }
    }
    let fraction = survivors.len() as f64 / state.mc_samples as f64;

    let mut out = state.clone();
    out.space = Some(space);
    out.fractions.push(fraction);
    out.survivor_indices = survivors;
    Ok(out)
}

/// Draw a new design inside the NROY space: `frac_best * n_points` lowest-
/// implausibility members of a rejection-sampled candidate pool, the rest by
/// greedy maximin selection among accepted candidates.
pub fn nroy_resample(
    space: &NroySpace,
    bounds: &[(f64, f64)],
    d_x: usize,
    n_points: usize,
    frac_best: f64,
    seed: u64,
    budget: usize,
) -> Result<Vec<DesignPoint>> {
    if !(0.0..=1.0).contains(&frac_best) {
        return Err(Error::Config(format!("frac_best {} not in [0, 1]", frac_best)));
    }
    if n_points == 0 {
        return Err(Error::Config("n_points must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut accepted: Vec<Vec<f64>> = Vec::new();
    let mut scores: Vec<f64> = Vec::new();
    for _ in 0..budget {
        let p: Vec<f64> = bounds
            .iter()
            .map(|&(lo, hi)| if hi > lo { rng.random_range(lo..hi) } else { lo })
            .collect();
        if space.contains(&p)? {
            // Rank candidates by their worst scaled scalar implausibility
            // across the chain.
            let mut worst = 0.0_f64;
            let mut chain = Some(space);
            while let Some(s) = chain {
                for pred in &s.predicates {
                    if let Some(i) = pred.scalar_implausibility(&p)? {
                        worst = worst.max(scaled_implausibility(i, pred.spec.ell)?);
                    }
                }
                chain = s.parent.as_deref();
            }
            accepted.push(p);
            scores.push(worst);
        }
        if accepted.len() >= n_points * 20 {
            break;
        }
    }
    if accepted.is_empty() {
        return Err(Error::EmptyNroy(format!(
            "no NROY members found in {} samples at wave {}",
            budget, space.wave_index
        )));
    }

    let n_best = ((frac_best * n_points as f64).round() as usize).min(n_points).min(accepted.len());
    let mut order: Vec<usize> = (0..accepted.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut chosen: Vec<usize> = order[..n_best].to_vec();

    // Fill the remainder by greedy maximin among accepted candidates.
    while chosen.len() < n_points.min(accepted.len()) {
        let mut best_idx = None;
        let mut best_dist = -1.0;
        for (i, cand) in accepted.iter().enumerate() {
            if chosen.contains(&i) {
                continue;
            }
            let d = chosen
                .iter()
                .map(|&k| {
                    bounds
                        .iter()
                        .enumerate()
                        .map(|(jj, &(lo, hi))| {
                            let span = (hi - lo).max(1e-300);
                            ((cand[jj] - accepted[k][jj]) / span).powi(2)
                        })
                        .sum::<f64>()
                })
                .fold(f64::INFINITY, f64::min);
            if d > best_dist {
                best_dist = d;
                best_idx = Some(i);
            }
        }
        match best_idx {
            Some(i) => chosen.push(i),
            None => break,
        }
    }

    Ok(chosen
        .into_iter()
        .map(|i| DesignPoint::from_flat(&accepted[i], d_x))
        .collect())
}
