//! Gaussian-process regression for basis coefficients and scalar outputs,
//! with posterior sampling for binary history matching.
//!
//! Squared-exponential kernel with per-dimension length-scales plus a nugget;
//! constant or linear-in-inputs mean. Hyperparameters by maximum marginal
//! likelihood from seeded multi-start Nelder-Mead.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::nelder_mead;

pub const MIN_NUGGET: f64 = 1e-10;
pub const DEFAULT_RESTARTS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MeanSpec {
    Constant,
    Linear,
}

/// Kernel hyperparameters on the normalised input cube.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub length_scales: Vec<f64>,
    pub signal_var: f64,
    pub nugget_var: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub mean: f64,
    pub variance: f64,
    /// Set when the query point lies outside the normalised design cube.
    pub extrapolation: bool,
}

#[derive(Debug, Clone)]
struct Cache {
    chol: Cholesky<f64, Dyn>,
    alpha: DVector<f64>,
    beta: DVector<f64>,
    hkh_inv: DMatrix<f64>,
    h: DMatrix<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GpEmulator {
    design: DMatrix<f64>,
    targets: DVector<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    pub mean_spec: MeanSpec,
    pub hyper: Hyperparameters,
    /// Targets had (near-)zero variance; predictions are the constant mean.
    pub degenerate: bool,
    #[serde(skip)]
    cache: Option<Cache>,
}

fn normalise_row(x: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    x.iter()
        .zip(lo.iter().zip(hi.iter()))
        .map(|(v, (l, h))| if h > l { (v - l) / (h - l) } else { 0.5 })
        .collect()
}

fn regressors(x: &[f64], spec: MeanSpec) -> Vec<f64> {
    match spec {
        MeanSpec::Constant => vec![1.0],
        MeanSpec::Linear => {
            let mut h = Vec::with_capacity(x.len() + 1);
            h.push(1.0);
            h.extend_from_slice(x);
            h
        }
    }
}

fn se_kernel(a: &[f64], b: &[f64], ls: &[f64]) -> f64 {
    let mut s = 0.0;
    for ((x, y), l) in a.iter().zip(b.iter()).zip(ls.iter()) {
        let d = (x - y) / l;
        s += d * d;
    }
    (-0.5 * s).exp()
}

fn kernel_matrix(x: &DMatrix<f64>, hyper: &Hyperparameters) -> DMatrix<f64> {
    let m = x.nrows();
    let mut k = DMatrix::zeros(m, m);
    for i in 0..m {
        k[(i, i)] = hyper.signal_var + hyper.nugget_var;
        for j in (i + 1)..m {
            let v = hyper.signal_var
                * se_kernel(
                    x.row(i).transpose().as_slice(),
                    x.row(j).transpose().as_slice(),
                    &hyper.length_scales,
                );
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

fn design_matrix(x: &DMatrix<f64>, spec: MeanSpec) -> DMatrix<f64> {
    let rows: Vec<Vec<f64>> = (0..x.nrows())
        .map(|i| regressors(x.row(i).transpose().as_slice(), spec))
        .collect();
    DMatrix::from_fn(x.nrows(), rows[0].len(), |i, j| rows[i][j])
}

/// Negative log marginal likelihood with the mean coefficients profiled out.
fn neg_log_likelihood(
    x: &DMatrix<f64>,
    y: &DVector<f64>,
    h: &DMatrix<f64>,
    hyper: &Hyperparameters,
) -> f64 {
    let k = kernel_matrix(x, hyper);
    let chol = match k.cholesky() {
        Some(c) => c,
        None => return f64::INFINITY,
    };
    let kinv_h = chol.solve(h);
    let kinv_y = chol.solve(y);
    let hkh = h.transpose() * &kinv_h;
    let hkh_chol = match hkh.cholesky() {
        Some(c) => c,
        None => return f64::INFINITY,
    };
    let beta = hkh_chol.solve(&(h.transpose() * &kinv_y));
    let resid = y - h * &beta;
    let kinv_r = chol.solve(&resid);
    let quad = resid.dot(&kinv_r);
    let logdet: f64 = chol.l().diagonal().iter().map(|d| 2.0 * d.ln()).sum();
    let nll = 0.5 * (quad + logdet);
    if nll.is_finite() {
        nll
    } else {
        f64::INFINITY
    }
}

impl GpEmulator {
    /// Fit a GP to a raw `m x d` design and targets. `seed` drives the
    /// multi-start hyperparameter search.
    pub fn fit(
        design_raw: &DMatrix<f64>,
        targets: &DVector<f64>,
        mean_spec: MeanSpec,
        seed: u64,
    ) -> Result<GpEmulator> {
        Self::fit_with_restarts(design_raw, targets, mean_spec, seed, DEFAULT_RESTARTS)
    }

    pub fn fit_with_restarts(
        design_raw: &DMatrix<f64>,
        targets: &DVector<f64>,
        mean_spec: MeanSpec,
        seed: u64,
        restarts: usize,
    ) -> Result<GpEmulator> {
        let (m, d) = (design_raw.nrows(), design_raw.ncols());
        if targets.len() != m {
            return Err(Error::shape("fit_gp", m.to_string(), targets.len().to_string()));
        }
        let min_m = match mean_spec {
            MeanSpec::Constant => 3,
            MeanSpec::Linear => d + 2,
        };
        if m < min_m {
            return Err(Error::Fit(format!(
                "need at least {} design points for this mean function, got {}",
                min_m, m
            )));
        }
        if design_raw.iter().any(|v| !v.is_finite()) || targets.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite design or target values".into()));
        }

        let lo: Vec<f64> = (0..d).map(|j| design_raw.column(j).min()).collect();
        let hi: Vec<f64> = (0..d).map(|j| design_raw.column(j).max()).collect();
        let x = DMatrix::from_fn(m, d, |i, j| {
            if hi[j] > lo[j] {
                (design_raw[(i, j)] - lo[j]) / (hi[j] - lo[j])
            } else {
                0.5
            }
        });

        let y_mean = targets.mean();
        let y_var = targets.iter().map(|v| (v - y_mean).powi(2)).sum::<f64>() / (m - 1) as f64;
        if y_var < 1e-14 * (1.0 + y_mean.abs()).powi(2) {
            // Degenerate targets: constant emulator.
            let mut em = GpEmulator {
                design: x,
                targets: targets.clone(),
                lo,
                hi,
                mean_spec: MeanSpec::Constant,
                hyper: Hyperparameters {
                    length_scales: vec![1.0; d],
                    signal_var: 0.0,
                    nugget_var: MIN_NUGGET,
                },
                degenerate: true,
                cache: None,
            };
            em.rebuild_cache()?;
            return Ok(em);
        }

        let h = design_matrix(&x, mean_spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut best: Option<(Vec<f64>, f64)> = None;
        for _ in 0..restarts.max(1) {
            let mut theta: Vec<f64> = (0..d)
                .map(|_| (0.1 + 1.9 * rng.random::<f64>()).ln())
                .collect();
            theta.push((y_var * (0.5 + 1.5 * rng.random::<f64>())).ln());
            theta.push((y_var * 10f64.powf(-6.0 + 3.0 * rng.random::<f64>())).max(MIN_NUGGET).ln());

            let obj = |t: &[f64]| {
                let hyper = Hyperparameters {
                    length_scales: t[..d].iter().map(|v| v.exp().clamp(1e-3, 1e3)).collect(),
                    signal_var: t[d].exp(),
                    nugget_var: t[d + 1].exp().max(MIN_NUGGET),
                };
                neg_log_likelihood(&x, targets, &h, &hyper)
            };
            let (t, v) = nelder_mead(obj, &theta, 0.5, 150, 1e-9);
            if v.is_finite() && best.as_ref().map_or(true, |(_, bv)| v < *bv) {
                best = Some((t, v));
            }
        }
        let (t, _) = best.ok_or_else(|| {
            Error::Fit("marginal likelihood non-finite at every restart".into())
        })?;
        let hyper = Hyperparameters {
            length_scales: t[..d].iter().map(|v| v.exp().clamp(1e-3, 1e3)).collect(),
            signal_var: t[d].exp(),
            nugget_var: t[d + 1].exp().max(MIN_NUGGET),
        };

        let mut em = GpEmulator {
            design: x,
            targets: targets.clone(),
            lo,
            hi,
            mean_spec,
            hyper,
            degenerate: false,
            cache: None,
        };
        em.rebuild_cache()?;

        // Interpolation check: training targets within 3 posterior SD. A
        // too-small nugget can fail this; bump and retry.
        for _ in 0..3 {
            if em.interpolates() {
                break;
            }
            em.hyper.nugget_var *= 100.0;
            em.rebuild_cache()?;
        }
        if !em.interpolates() {
            return Err(Error::Fit("emulator does not interpolate training data".into()));
        }
        Ok(em)
    }

    fn interpolates(&self) -> bool {
        (0..self.design.nrows()).all(|i| {
            let p = self.predict_normalised(self.design.row(i).transpose().as_slice());
            let sd = p.variance.sqrt();
            (p.mean - self.targets[i]).abs() <= 3.0 * sd.max(self.hyper.nugget_var.sqrt())
        })
    }

    fn rebuild_cache(&mut self) -> Result<()> {
        let h = design_matrix(&self.design, self.mean_spec);
        let k = kernel_matrix(&self.design, &self.hyper);
        let chol = k.cholesky().ok_or(Error::NotPositiveDefinite {
            name: "kernel matrix".into(),
        })?;
        let kinv_h = chol.solve(&h);
        let hkh = h.transpose() * &kinv_h;
        let hkh_chol = hkh.clone().cholesky().ok_or(Error::RankDeficient {
            name: "H^T K^-1 H".into(),
        })?;
        let beta = hkh_chol.solve(&(h.transpose() * chol.solve(&self.targets)));
        let resid = &self.targets - &h * &beta;
        let alpha = chol.solve(&resid);
        let hkh_inv = hkh_chol.solve(&DMatrix::identity(h.ncols(), h.ncols()));
        self.cache = Some(Cache {
            chol,
            alpha,
            beta,
            hkh_inv,
            h,
        });
        Ok(())
    }

    fn cache(&self) -> &Cache {
        self.cache.as_ref().expect("cache built at fit/load time")
    }

    pub fn input_dim(&self) -> usize {
        self.design.ncols()
    }

    pub fn n_training(&self) -> usize {
        self.design.nrows()
    }

    fn predict_normalised(&self, xn: &[f64]) -> Prediction {
        let c = self.cache();
        let hx = DVector::from_vec(regressors(xn, self.mean_spec));
        if self.degenerate {
            return Prediction {
                mean: c.beta[0],
                variance: self.hyper.nugget_var,
                extrapolation: false,
            };
        }
        let m = self.design.nrows();
        let kstar = DVector::from_fn(m, |i, _| {
            self.hyper.signal_var
                * se_kernel(
                    self.design.row(i).transpose().as_slice(),
                    xn,
                    &self.hyper.length_scales,
                )
        });
        let mean = hx.dot(&c.beta) + kstar.dot(&c.alpha);
        let kinv_kstar = c.chol.solve(&kstar);
        let u = &hx - c.h.transpose() * &kinv_kstar;
        let mean_term = (u.transpose() * &c.hkh_inv * &u)[(0, 0)];
        let variance = (self.hyper.signal_var + self.hyper.nugget_var - kstar.dot(&kinv_kstar)
            + mean_term)
            .max(self.hyper.nugget_var);
        let extrapolation = xn.iter().any(|&v| !(-1e-9..=1.0 + 1e-9).contains(&v));
        Prediction {
            mean,
            variance,
            extrapolation,
        }
    }

    /// Posterior mean and variance at a raw input point.
    pub fn predict(&self, x: &[f64]) -> Result<Prediction> {
        if x.len() != self.input_dim() {
            return Err(Error::shape("predict", self.input_dim().to_string(), x.len().to_string()));
        }
        Ok(self.predict_normalised(&normalise_row(x, &self.lo, &self.hi)))
    }

    pub fn predict_batch(&self, xs: &[Vec<f64>]) -> Result<Vec<Prediction>> {
        xs.iter().map(|x| self.predict(x)).collect()
    }

    /// Seeded i.i.d. draws from the marginal posterior at `x`.
    pub fn sample_posterior(&self, x: &[f64], m_samples: usize, seed: u64) -> Result<Vec<f64>> {
        let p = self.predict(x)?;
        let sd = p.variance.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..m_samples)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                p.mean + sd * z
            })
            .collect())
    }

    /// Leave-one-out diagnostics via the closed form on K^-1 (mean
    /// coefficients held fixed). Returns (loo_mean, loo_sd, standardised
    /// residual) per training point.
    pub fn loo_diagnostics(&self) -> Vec<(f64, f64, f64)> {
        let c = self.cache();
        let m = self.design.nrows();
        let kinv = c.chol.solve(&DMatrix::identity(m, m));
        (0..m)
            .map(|i| {
                let kii = kinv[(i, i)].max(1e-300);
                let loo_mean = self.targets[i] - c.alpha[i] / kii;
                let loo_var = (1.0 / kii).max(self.hyper.nugget_var);
                let z = (self.targets[i] - loo_mean) / loo_var.sqrt();
                (loo_mean, loo_var.sqrt(), z)
            })
            .collect()
    }

    /// Fraction of training points with |standardised LOO residual| < 3.
    pub fn loo_pass_fraction(&self) -> f64 {
        let d = self.loo_diagnostics();
        if d.is_empty() {
            return 1.0;
        }
        d.iter().filter(|(_, _, z)| z.abs() < 3.0).count() as f64 / d.len() as f64
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<GpEmulator> {
        let mut em: GpEmulator = serde_json::from_str(s)?;
        em.rebuild_cache()?;
        Ok(em)
    }
}
