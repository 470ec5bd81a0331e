//! Gaussian-field linear algebra for separable spatio-temporal covariances.
//!
//! A field vector is vec(M) for M an `n_times x n_locations` matrix whose
//! column s is the time series at spatial location s, so that
//! Cov(vec(M)) = sigma_s (x) sigma_t. All operations exploit the factored
//! form and never materialise the full covariance.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::obs::ObservationSet;

const SYM_RTOL: f64 = 1e-10;

/// Relative nugget added to the diagonal if a first Cholesky attempt fails.
pub const DEFAULT_NUGGET_REL: f64 = 1e-8;

/// Cholesky with a single nugget retry: if factorisation fails, add
/// `nugget_rel * mean(diag)` to the diagonal and try once more.
pub fn cholesky_with_nugget(
    m: &DMatrix<f64>,
    name: &str,
    nugget_rel: f64,
) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = m.clone().cholesky() {
        return Ok(c);
    }
    let mean_diag = m.diagonal().mean().abs();
    let nugget = nugget_rel * if mean_diag > 0.0 { mean_diag } else { 1.0 };
    let mut bumped = m.clone();
    for i in 0..m.nrows() {
        bumped[(i, i)] += nugget;
    }
    bumped.cholesky().ok_or_else(|| Error::NotPositiveDefinite {
        name: name.to_string(),
    })
}

fn check_symmetric(m: &DMatrix<f64>, name: &str) -> Result<()> {
    if m.nrows() != m.ncols() {
        return Err(Error::shape(name, "square matrix", format!("{}x{}", m.nrows(), m.ncols())));
    }
    let scale = m.amax().max(1e-300);
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            if (m[(i, j)] - m[(j, i)]).abs() > SYM_RTOL * scale {
                return Err(Error::NotSymmetric { name: name.to_string() });
            }
        }
    }
    Ok(())
}

/// Separable covariance sigma_s (x) sigma_t, stored as its factors.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KroneckerCov {
    sigma_s: DMatrix<f64>,
    sigma_t: DMatrix<f64>,
}

impl KroneckerCov {
    pub fn new(sigma_s: DMatrix<f64>, sigma_t: DMatrix<f64>) -> Result<Self> {
        check_symmetric(&sigma_s, "sigma_s")?;
        check_symmetric(&sigma_t, "sigma_t")?;
        if sigma_s.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { name: "sigma_s".into() });
        }
        if sigma_t.clone().cholesky().is_none() {
            return Err(Error::NotPositiveDefinite { name: "sigma_t".into() });
        }
        Ok(KroneckerCov { sigma_s, sigma_t })
    }

    pub fn sigma_s(&self) -> &DMatrix<f64> {
        &self.sigma_s
    }

    pub fn sigma_t(&self) -> &DMatrix<f64> {
        &self.sigma_t
    }

    pub fn n_locations(&self) -> usize {
        self.sigma_s.nrows()
    }

    pub fn n_times(&self) -> usize {
        self.sigma_t.nrows()
    }

    pub fn dim(&self) -> usize {
        self.n_locations() * self.n_times()
    }

    /// Restrict the spatial factor to a subset of locations.
    pub fn restrict_locations(&self, locations: &[usize]) -> Result<KroneckerCov> {
        for &s in locations {
            if s >= self.n_locations() {
                return Err(Error::Index(format!(
                    "location {} out of range (n_locations = {})",
                    s,
                    self.n_locations()
                )));
            }
        }
        let k = locations.len();
        let sub = DMatrix::from_fn(k, k, |i, j| self.sigma_s[(locations[i], locations[j])]);
        Ok(KroneckerCov {
            sigma_s: sub,
            sigma_t: self.sigma_t.clone(),
        })
    }
}

/// A spatio-temporal field in the fixed column-stacked layout: entry
/// `s * n_times + t` is the value at location s and time t.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FieldVector {
    values: DVector<f64>,
    n_locations: usize,
    n_times: usize,
}

impl FieldVector {
    pub fn new(values: DVector<f64>, n_locations: usize, n_times: usize) -> Result<Self> {
        if values.len() != n_locations * n_times {
            return Err(Error::shape(
                "FieldVector",
                format!("{} entries ({}x{})", n_locations * n_times, n_locations, n_times),
                values.len().to_string(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Data("field vector contains non-finite entries".into()));
        }
        Ok(FieldVector { values, n_locations, n_times })
    }

    pub fn zeros(n_locations: usize, n_times: usize) -> Self {
        FieldVector {
            values: DVector::zeros(n_locations * n_times),
            n_locations,
            n_times,
        }
    }

    /// Build from the `n_times x n_locations` matrix form.
    pub fn from_matrix(m: &DMatrix<f64>) -> Result<Self> {
        let (lt, ls) = (m.nrows(), m.ncols());
        let mut values = DVector::zeros(ls * lt);
        for s in 0..ls {
            for t in 0..lt {
                values[s * lt + t] = m[(t, s)];
            }
        }
        FieldVector::new(values, ls, lt)
    }

    pub fn values(&self) -> &DVector<f64> {
        &self.values
    }

    pub fn n_locations(&self) -> usize {
        self.n_locations
    }

    pub fn n_times(&self) -> usize {
        self.n_times
    }

    pub fn get(&self, location: usize, time: usize) -> f64 {
        self.values[location * self.n_times + time]
    }

    pub fn set(&mut self, location: usize, time: usize, value: f64) {
        self.values[location * self.n_times + time] = value;
    }

    /// The `n_times x n_locations` matrix M with vec(M) = values.
    pub fn as_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n_times, self.n_locations, |t, s| self.get(s, t))
    }

    /// Restrict to a subset of locations, preserving their given order.
    pub fn restrict_locations(&self, locations: &[usize]) -> Result<FieldVector> {
        let lt = self.n_times;
        let mut values = DVector::zeros(locations.len() * lt);
        for (i, &s) in locations.iter().enumerate() {
            if s >= self.n_locations {
                return Err(Error::Index(format!("location {} out of range", s)));
            }
            for t in 0..lt {
                values[i * lt + t] = self.get(s, t);
            }
        }
        FieldVector::new(values, locations.len(), lt)
    }
}

/// Dense Kronecker product, for small instances (restricted imputation and
/// test oracles only).
pub fn kron_dense(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let (ar, ac) = (a.nrows(), a.ncols());
    let (br, bc) = (b.nrows(), b.ncols());
    DMatrix::from_fn(ar * br, ac * bc, |i, j| {
        a[(i / br, j / bc)] * b[(i % br, j % bc)]
    })
}

/// (sigma_s (x) sigma_t)^-1 v, computed as vec(sigma_t^-1 M sigma_s^-1)
/// without forming the full matrix.
pub fn kron_inverse_apply(cov: &KroneckerCov, v: &FieldVector) -> Result<FieldVector> {
    if v.n_locations() != cov.n_locations() || v.n_times() != cov.n_times() {
        return Err(Error::shape(
            "kron_inverse_apply",
            format!("field {}x{}", cov.n_locations(), cov.n_times()),
            format!("field {}x{}", v.n_locations(), v.n_times()),
        ));
    }
    let chol_t = cov.sigma_t.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        name: "sigma_t".into(),
    })?;
    let chol_s = cov.sigma_s.clone().cholesky().ok_or(Error::NotPositiveDefinite {
        name: "sigma_s".into(),
    })?;
    let m = v.as_matrix();
    // sigma_t^-1 M, then right-multiply by sigma_s^-1 via a transposed solve.
    let x = chol_t.solve(&m);
    let result = chol_s.solve(&x.transpose()).transpose();
    FieldVector::from_matrix(&result)
}

/// E[T | z] = h + vec(sigma_t (sigma_t_obs + sigma_t)^-1 (Z - H)), the
/// temporal-only conditional update applied independently per location.
/// `prior_mean` and `z` cover the same location set; `z` must be complete
/// (impute first).
pub fn conditional_mean(
    prior_mean: &FieldVector,
    sigma_t: &DMatrix<f64>,
    sigma_t_obs: &DMatrix<f64>,
    z: &FieldVector,
) -> Result<FieldVector> {
    let lt = prior_mean.n_times();
    if z.n_locations() != prior_mean.n_locations() || z.n_times() != lt {
        return Err(Error::shape(
            "conditional_mean",
            format!("field {}x{}", prior_mean.n_locations(), lt),
            format!("field {}x{}", z.n_locations(), z.n_times()),
        ));
    }
    if sigma_t.nrows() != lt || sigma_t_obs.nrows() != lt {
        return Err(Error::shape(
            "conditional_mean",
            format!("{}x{} temporal factors", lt, lt),
            format!("{}x{} and {}x{}", sigma_t.nrows(), sigma_t.ncols(), sigma_t_obs.nrows(), sigma_t_obs.ncols()),
        ));
    }
    let sum = sigma_t + sigma_t_obs;
    let chol = sum.clone().cholesky().ok_or(Error::RankDeficient {
        name: "sigma_t + sigma_t_obs".into(),
    })?;
    let resid = z.as_matrix() - prior_mean.as_matrix();
    let updated = prior_mean.as_matrix() + sigma_t * chol.solve(&resid);
    FieldVector::from_matrix(&updated)
}

/// Marginal covariance of the observation vector: sigma_s (x) (sigma_t +
/// sigma_t_obs). Requires the shared spatial factor of the model.
pub fn marginal_obs_cov(sigma_eps: &KroneckerCov, sigma_e: &KroneckerCov) -> Result<KroneckerCov> {
    let a = sigma_eps.sigma_s();
    let b = sigma_e.sigma_s();
    if a.nrows() != b.nrows() {
        return Err(Error::ModelAssumption(format!(
            "spatial factors differ in size: {} vs {}",
            a.nrows(),
            b.nrows()
        )));
    }
    let scale = a.amax().max(b.amax()).max(1e-300);
    if (a - b).amax() > SYM_RTOL * scale {
        return Err(Error::ModelAssumption(
            "spatial covariance factor must be shared between field and observation models".into(),
        ));
    }
    KroneckerCov::new(a.clone(), sigma_eps.sigma_t() + sigma_e.sigma_t())
}

/// How missing entries are completed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum ImputeMode {
    Mean,
    Sample { seed: u64 },
}

/// Fill missing temporal entries at observed locations with the conditional
/// mean (or a seeded conditional draw) of the Gaussian z | c restricted to
/// those locations. `locations` orders the columns of `prior_mean`, which
/// covers exactly the observed-location subset; `marginal` is the covariance
/// of z over that subset.
pub fn impute_missing(
    obs: &ObservationSet,
    locations: &[usize],
    prior_mean: &FieldVector,
    marginal: &KroneckerCov,
    mode: ImputeMode,
) -> Result<FieldVector> {
    let lt = prior_mean.n_times();
    let ls = locations.len();
    if prior_mean.n_locations() != ls || marginal.n_locations() != ls || marginal.n_times() != lt {
        return Err(Error::shape(
            "impute_missing",
            format!("{} locations x {} times", ls, lt),
            format!(
                "prior {}x{}, marginal {}x{}",
                prior_mean.n_locations(),
                lt,
                marginal.n_locations(),
                marginal.n_times()
            ),
        ));
    }
    for (i, &loc) in locations.iter().enumerate() {
        if obs.count_at(loc) == 0 {
            return Err(Error::EmptyLocation { location: locations[i] });
        }
    }

    // Scatter observed values; everything else is missing.
    let mut z = prior_mean.clone();
    let mut observed = vec![false; ls * lt];
    for e in obs.entries() {
        let col = match locations.iter().position(|&l| l == e.location) {
            Some(c) => c,
            None => continue,
        };
        if e.time >= lt {
            return Err(Error::Index(format!("observation time {} out of range", e.time)));
        }
        if !e.value.is_finite() {
            return Err(Error::Data("non-finite observation".into()));
        }
        z.set(col, e.time, e.value);
        observed[col * lt + e.time] = true;
    }
    let missing: Vec<usize> = (0..ls * lt).filter(|&i| !observed[i]).collect();
    if missing.is_empty() {
        return Ok(z);
    }
    let obs_idx: Vec<usize> = (0..ls * lt).filter(|&i| observed[i]).collect();

    // The restricted problem is small by construction; condition densely.
    let k = kron_dense(marginal.sigma_s(), marginal.sigma_t());
    let k_oo = k.select_rows(obs_idx.iter()).select_columns(obs_idx.iter());
    let k_mo = k.select_rows(missing.iter()).select_columns(obs_idx.iter());
    let chol = cholesky_with_nugget(&k_oo, "marginal[obs,obs]", DEFAULT_NUGGET_REL)?;

    let resid_o = DVector::from_fn(obs_idx.len(), |i, _| {
        z.values()[obs_idx[i]] - prior_mean.values()[obs_idx[i]]
    });
    let mut fill = DVector::from_fn(missing.len(), |i, _| prior_mean.values()[missing[i]])
        + &k_mo * chol.solve(&resid_o);

    if let ImputeMode::Sample { seed } = mode {
        let k_mm = k.select_rows(missing.iter()).select_columns(missing.iter());
        let schur = &k_mm - &k_mo * chol.solve(&k_mo.transpose());
        let l = cholesky_with_nugget(&schur, "imputation Schur complement", DEFAULT_NUGGET_REL)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let eps = DVector::from_fn(missing.len(), |_, _| StandardNormal.sample(&mut rng));
        fill += l.l() * eps;
    }

    for (i, &idx) in missing.iter().enumerate() {
        z.values_mut_at(idx, fill[i]);
    }
    Ok(z)
}

impl FieldVector {
    fn values_mut_at(&mut self, idx: usize, value: f64) {
        self.values[idx] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::obs::ObsEntry;
    use rand::Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |_, _| rng.random::<f64>() - 0.5);
        &a * a.transpose() + DMatrix::identity(n, n) * (0.5 + rng.random::<f64>())
    }

    fn random_field(ls: usize, lt: usize, rng: &mut ChaCha8Rng) -> FieldVector {
        FieldVector::new(
            DVector::from_fn(ls * lt, |_, _| rng.random::<f64>() * 4.0 - 2.0),
            ls,
            lt,
        )
        .unwrap()
    }

    #[test]
    fn identity_covariance_is_identity_map() {
        let cov = KroneckerCov::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let v = FieldVector::new(DVector::from_element(6, 1.0), 2, 3).unwrap();
        let out = kron_inverse_apply(&cov, &v).unwrap();
        assert_eq!(out.values(), v.values());
    }

    #[test]
    fn diagonal_scaling_under_layout() {
        let cov = KroneckerCov::new(
            DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 4.0])),
            DMatrix::identity(2, 2),
        )
        .unwrap();
        let v = FieldVector::new(DVector::from_element(4, 1.0), 2, 2).unwrap();
        let out = kron_inverse_apply(&cov, &v).unwrap();
        let expected = [0.5, 0.5, 0.25, 0.25];
        for (a, b) in out.values().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_dense_kron_inverse() {
        let mut r = rng(7);
        let ss = random_spd(3, &mut r);
        let st = random_spd(4, &mut r);
        let cov = KroneckerCov::new(ss.clone(), st.clone()).unwrap();
        let v = random_field(3, 4, &mut r);
        let out = kron_inverse_apply(&cov, &v).unwrap();

        let dense = kron_dense(&ss, &st);
        let expected = dense.clone().cholesky().unwrap().solve(v.values());
        let rel = (out.values() - &expected).norm() / expected.norm();
        assert!(rel < 1e-8, "rel error {}", rel);
    }

    #[test]
    fn non_spd_factor_names_offender() {
        let bad = DMatrix::from_diagonal(&DVector::from_vec(vec![1.0, -1.0]));
        let err = KroneckerCov::new(bad, DMatrix::identity(2, 2)).unwrap_err();
        assert!(err.to_string().contains("sigma_s"));
    }

    #[test]
    fn dimension_mismatch_is_shape_error() {
        let cov = KroneckerCov::new(DMatrix::identity(2, 2), DMatrix::identity(3, 3)).unwrap();
        let v = FieldVector::new(DVector::zeros(4), 2, 2).unwrap();
        assert!(matches!(kron_inverse_apply(&cov, &v), Err(Error::Shape { .. })));
    }

    #[test]
    fn conditional_mean_uninformative_limit() {
        let mut r = rng(11);
        let st = random_spd(3, &mut r);
        let prior = random_field(2, 3, &mut r);
        let z = random_field(2, 3, &mut r);
        let huge = DMatrix::identity(3, 3) * 1e8;
        let out = conditional_mean(&prior, &st, &huge, &z).unwrap();
        let rel = (out.values() - prior.values()).norm() / prior.values().norm();
        assert!(rel < 1e-4, "rel {}", rel);
    }

    #[test]
    fn conditional_mean_exact_observation_limit() {
        let mut r = rng(12);
        let st = random_spd(3, &mut r);
        let prior = random_field(2, 3, &mut r);
        let z = random_field(2, 3, &mut r);
        let tiny = DMatrix::identity(3, 3) * 1e-10;
        let out = conditional_mean(&prior, &st, &tiny, &z).unwrap();
        let rel = (out.values() - z.values()).norm() / z.values().norm();
        assert!(rel < 1e-6, "rel {}", rel);
    }

    #[test]
    fn conditional_mean_matches_dense_gaussian_oracle() {
        // Joint (T, z): T ~ N(h, Ss x St), z = T + e, e ~ N(0, Ss x St').
        // E[T | z] = h + C (C + E)^-1 (z - h) with C = Ss x St, E = Ss x St'.
        let mut r = rng(13);
        let ss = random_spd(2, &mut r);
        let st = random_spd(3, &mut r);
        let st_obs = random_spd(3, &mut r);
        let prior = random_field(2, 3, &mut r);
        let z = random_field(2, 3, &mut r);

        let out = conditional_mean(&prior, &st, &st_obs, &z).unwrap();

        let c = kron_dense(&ss, &st);
        let e = kron_dense(&ss, &st_obs);
        let sum = &c + &e;
        let expected = prior.values()
            + &c * sum.cholesky().unwrap().solve(&(z.values() - prior.values()));
        let rel = (out.values() - &expected).norm() / expected.norm();
        assert!(rel < 1e-8, "rel {}", rel);
    }

    #[test]
    fn marginal_obs_cov_sum_of_identities() {
        let ss = DMatrix::identity(2, 2);
        let eps = KroneckerCov::new(ss.clone(), DMatrix::identity(2, 2)).unwrap();
        let e = KroneckerCov::new(ss, DMatrix::identity(2, 2)).unwrap();
        let out = marginal_obs_cov(&eps, &e).unwrap();
        assert_eq!(out.sigma_t(), &(DMatrix::identity(2, 2) * 2.0));
    }

    #[test]
    fn marginal_obs_cov_matches_woodbury_oracle() {
        let mut r = rng(17);
        let ss = random_spd(3, &mut r);
        let st = random_spd(3, &mut r);
        let st_obs = random_spd(3, &mut r);
        let eps = KroneckerCov::new(ss.clone(), st.clone()).unwrap();
        let e = KroneckerCov::new(ss.clone(), st_obs.clone()).unwrap();
        let out = marginal_obs_cov(&eps, &e).unwrap();
        let result = kron_dense(out.sigma_s(), out.sigma_t());

        // (Se^-1 - Se^-1 (Se^-1 + Seps^-1)^-1 Se^-1)^-1 on the dense forms.
        let se = kron_dense(&ss, &st_obs);
        let seps = kron_dense(&ss, &st);
        let se_inv = se.clone().try_inverse().unwrap();
        let seps_inv = seps.try_inverse().unwrap();
        let mid = (&se_inv + &seps_inv).try_inverse().unwrap();
        let expected = (&se_inv - &se_inv * mid * &se_inv).try_inverse().unwrap();
        let rel = (&result - &expected).norm() / expected.norm();
        assert!(rel < 1e-8, "rel {}", rel);
    }

    #[test]
    fn marginal_obs_cov_rejects_mismatched_spatial_factor() {
        let mut r = rng(18);
        let eps = KroneckerCov::new(random_spd(3, &mut r), DMatrix::identity(2, 2)).unwrap();
        let e = KroneckerCov::new(random_spd(3, &mut r), DMatrix::identity(2, 2)).unwrap();
        assert!(matches!(marginal_obs_cov(&eps, &e), Err(Error::ModelAssumption(_))));
    }

    fn full_obs(ls: usize, lt: usize, z: &FieldVector) -> ObservationSet {
        let mut entries = Vec::new();
        for s in 0..ls {
            for t in 0..lt {
                entries.push(ObsEntry { location: s, time: t, value: z.get(s, t), error_sd: 0.5 });
            }
        }
        ObservationSet::new(entries).unwrap()
    }

    #[test]
    fn impute_complete_data_is_identity() {
        let mut r = rng(21);
        let marginal = KroneckerCov::new(random_spd(2, &mut r), random_spd(3, &mut r)).unwrap();
        let prior = random_field(2, 3, &mut r);
        let z = random_field(2, 3, &mut r);
        let obs = full_obs(2, 3, &z);
        let out = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Mean).unwrap();
        assert_eq!(out.values(), z.values());
    }

    #[test]
    fn impute_independent_times_fill_with_prior() {
        // Single location, sigma_t = I: missing times are independent of the
        // observed ones, so the conditional mean is the prior there.
        let marginal = KroneckerCov::new(DMatrix::identity(1, 1), DMatrix::identity(3, 3)).unwrap();
        let prior = FieldVector::new(DVector::from_vec(vec![1.0, 2.0, 3.0]), 1, 3).unwrap();
        let obs = ObservationSet::new(vec![ObsEntry {
            location: 0,
            time: 0,
            value: 9.0,
            error_sd: 0.1,
        }])
        .unwrap();
        let out = impute_missing(&obs, &[0], &prior, &marginal, ImputeMode::Mean).unwrap();
        assert_eq!(out.get(0, 0), 9.0);
        assert!((out.get(0, 1) - 2.0).abs() < 1e-12);
        assert!((out.get(0, 2) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn impute_matches_dense_conditional_oracle() {
        let mut r = rng(23);
        let ss = random_spd(2, &mut r);
        let st = random_spd(4, &mut r);
        let marginal = KroneckerCov::new(ss.clone(), st.clone()).unwrap();
        let prior = random_field(2, 4, &mut r);
        let z_true = random_field(2, 4, &mut r);

        // 3 entries missing out of 8.
        let missing = [(0usize, 1usize), (1, 0), (1, 3)];
        let mut entries = Vec::new();
        for s in 0..2 {
            for t in 0..4 {
                if missing.contains(&(s, t)) {
                    continue;
                }
                entries.push(ObsEntry { location: s, time: t, value: z_true.get(s, t), error_sd: 0.3 });
            }
        }
        let obs = ObservationSet::new(entries).unwrap();
        let out = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Mean).unwrap();

        // Dense conditional-mean oracle over the full joint.
        let k = kron_dense(&ss, &st);
        let obs_idx: Vec<usize> = (0..8)
            .filter(|&i| !missing.contains(&(i / 4, i % 4)))
            .collect();
        let mis_idx: Vec<usize> = (0..8).filter(|&i| missing.contains(&(i / 4, i % 4))).collect();
        let koo = k.select_rows(obs_idx.iter()).select_columns(obs_idx.iter());
        let kmo = k.select_rows(mis_idx.iter()).select_columns(obs_idx.iter());
        let resid = DVector::from_fn(obs_idx.len(), |i, _| {
            z_true.values()[obs_idx[i]] - prior.values()[obs_idx[i]]
        });
        let fill = DVector::from_fn(mis_idx.len(), |i, _| prior.values()[mis_idx[i]])
            + &kmo * koo.cholesky().unwrap().solve(&resid);
        for (i, &idx) in mis_idx.iter().enumerate() {
            let rel = (out.values()[idx] - fill[i]).abs() / fill[i].abs().max(1.0);
            assert!(rel < 1e-8, "entry {} rel {}", idx, rel);
        }
        // Observed entries unchanged.
        for &idx in &obs_idx {
            assert_eq!(out.values()[idx], z_true.values()[idx]);
        }
    }

    #[test]
    fn impute_empty_location_is_error() {
        let marginal = KroneckerCov::new(DMatrix::identity(2, 2), DMatrix::identity(2, 2)).unwrap();
        let prior = FieldVector::zeros(2, 2);
        let obs = ObservationSet::new(vec![ObsEntry { location: 0, time: 0, value: 1.0, error_sd: 0.1 }])
            .unwrap();
        let err = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Mean).unwrap_err();
        assert!(matches!(err, Error::EmptyLocation { location: 1 }));
    }

    #[test]
    fn impute_sample_mode_is_seed_deterministic() {
        let mut r = rng(29);
        let marginal = KroneckerCov::new(random_spd(2, &mut r), random_spd(3, &mut r)).unwrap();
        let prior = random_field(2, 3, &mut r);
        let obs = ObservationSet::new(vec![
            ObsEntry { location: 0, time: 0, value: 1.0, error_sd: 0.2 },
            ObsEntry { location: 1, time: 2, value: -0.5, error_sd: 0.2 },
        ])
        .unwrap();
        let a = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Sample { seed: 4 }).unwrap();
        let b = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Sample { seed: 4 }).unwrap();
        let c = impute_missing(&obs, &[0, 1], &prior, &marginal, ImputeMode::Sample { seed: 5 }).unwrap();
        assert_eq!(a.values(), b.values());
        assert_ne!(a.values(), c.values());
    }

    #[test]
    fn shrinkage_with_growing_observation_error() {
        let mut r = rng(31);
        let st = random_spd(4, &mut r);
        let st_obs = {
            let d = DVector::from_fn(4, |_, _| 0.2 + r.random::<f64>());
            DMatrix::from_diagonal(&d)
        };
        let prior = random_field(3, 4, &mut r);
        let z = random_field(3, 4, &mut r);
        let mut last = f64::INFINITY;
        for k in [1.0, 2.0, 5.0, 20.0, 100.0] {
            let out = conditional_mean(&prior, &st, &(st_obs.clone() * k), &z).unwrap();
            let d = (out.values() - prior.values()).norm();
            assert!(d <= last + 1e-12, "update norm grew: {} -> {}", last, d);
            last = d;
        }
    }
}
