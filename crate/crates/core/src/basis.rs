//! Low-dimensional basis machinery: centred SVD, weighted projection and
//! reconstruction, weighted reconstruction error, and observation-optimal
//! rotation of the SVD basis.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};

/// An ensemble of fields centred by its mean.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CentredEnsemble {
    data: DMatrix<f64>,
    mean: DVector<f64>,
    member_ids: Vec<String>,
}

impl CentredEnsemble {
    /// Centre a raw `field_dim x n` ensemble by its column mean.
    pub fn from_raw(raw: DMatrix<f64>, member_ids: Option<Vec<String>>) -> Result<Self> {
        let n = raw.ncols();
        if n < 2 {
            return Err(Error::EnsembleSize { min: 2, got: n });
        }
        let mean = raw.column_mean();
        let mut data = raw;
        for mut col in data.column_iter_mut() {
            col -= &mean;
        }
        let member_ids = member_ids.unwrap_or_else(|| (0..n).map(|i| format!("member_{i}")).collect());
        if member_ids.len() != n {
            return Err(Error::shape("member_ids", n.to_string(), member_ids.len().to_string()));
        }
        Ok(CentredEnsemble { data, mean, member_ids })
    }

    /// Wrap already-centred data with its mean.
    pub fn new(data: DMatrix<f64>, mean: DVector<f64>, member_ids: Vec<String>) -> Result<Self> {
        let n = data.ncols();
        if n < 2 {
            return Err(Error::EnsembleSize { min: 2, got: n });
        }
        if mean.len() != data.nrows() || member_ids.len() != n {
            return Err(Error::shape(
                "CentredEnsemble",
                format!("mean {} ids {}", data.nrows(), n),
                format!("mean {} ids {}", mean.len(), member_ids.len()),
            ));
        }
        let rowsum = data.column_sum();
        if rowsum.norm() > 1e-8 * mean.norm().max(1.0) * n as f64 {
            return Err(Error::Precondition("ensemble is not centred".into()));
        }
        Ok(CentredEnsemble { data, mean, member_ids })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.mean
    }

    pub fn n_members(&self) -> usize {
        self.data.ncols()
    }

    pub fn field_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn member_ids(&self) -> &[String] {
        &self.member_ids
    }

    /// Restrict to a subset of rows (field entries), preserving order.
    pub fn restrict_rows(&self, rows: &[usize]) -> Result<CentredEnsemble> {
        for &r in rows {
            if r >= self.field_dim() {
                return Err(Error::Index(format!("row {} out of range", r)));
            }
        }
        Ok(CentredEnsemble {
            data: self.data.select_rows(rows.iter()),
            mean: DVector::from_fn(rows.len(), |i, _| self.mean[rows[i]]),
            member_ids: self.member_ids.clone(),
        })
    }

    /// Order-sensitive content hash, used for provenance checks.
    pub fn provenance_hash(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.data.nrows().hash(&mut h);
        self.data.ncols().hash(&mut h);
        for v in self.data.iter() {
            v.to_bits().hash(&mut h);
        }
        h.finish()
    }
}

/// Weighting matrix for projections: identity or a symmetric
/// positive-definite covariance.
#[derive(Debug, Clone)]
pub enum Weight {
    Identity,
    Spd(DMatrix<f64>),
}

impl Weight {
    fn cholesky(&self, dim: usize) -> Result<Option<Cholesky<f64, Dyn>>> {
        match self {
            Weight::Identity => Ok(None),
            Weight::Spd(w) => {
                if w.nrows() != dim {
                    return Err(Error::shape("weight matrix", dim.to_string(), w.nrows().to_string()));
                }
                Ok(Some(w.clone().cholesky().ok_or(Error::NotPositiveDefinite {
                    name: "W".into(),
                })?))
            }
        }
    }
}

/// Solve W^-1 B for the weight, or pass through for identity.
fn w_solve(chol: &Option<Cholesky<f64, Dyn>>, b: &DMatrix<f64>) -> DMatrix<f64> {
    match chol {
        None => b.clone(),
        Some(c) => c.solve(b),
    }
}

/// An ordered basis with its SVD provenance. `vectors` holds the (possibly
/// rotated) basis columns; `rotation` maps SVD directions to those columns
/// (identity for a plain SVD basis); `u` and `singular_values` come from the
/// decomposition of the source ensemble and are kept so that rotated vectors
/// can be re-expressed as ensemble combinations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Basis {
    pub vectors: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub rotation: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub weight_ref: String,
    pub source_hash: u64,
}

impl Basis {
    pub fn rank(&self) -> usize {
        self.vectors.ncols()
    }

    /// Truncate to the leading `q` columns.
    pub fn truncate(&self, q: usize) -> Result<Basis> {
        if q == 0 || q > self.rank() {
            return Err(Error::Index(format!("truncation rank {} not in 1..={}", q, self.rank())));
        }
        Ok(Basis {
            vectors: self.vectors.columns(0, q).into_owned(),
            singular_values: self.singular_values.clone(),
            rotation: self.rotation.columns(0, q).into_owned(),
            u: self.u.clone(),
            weight_ref: self.weight_ref.clone(),
            source_hash: self.source_hash,
        })
    }

    /// Smallest rank whose leading singular values capture at least `frac`
    /// of total ensemble variance.
    pub fn rank_for_variance(&self, frac: f64) -> usize {
        let total: f64 = self.singular_values.iter().map(|s| s * s).sum();
        let mut acc = 0.0;
        for (k, s) in self.singular_values.iter().enumerate() {
            acc += s * s;
            if acc >= frac * total {
                return k + 1;
            }
        }
        self.singular_values.len()
    }

    /// The ensemble-combination matrix U Sigma^-1 Lambda: multiplying the
    /// centred ensemble by column j of this matrix reproduces basis vector j.
    pub fn lift_matrix(&self) -> DMatrix<f64> {
        let r = self.u.ncols();
        let mut u_sinv = self.u.clone();
        for k in 0..r {
            let s = self.singular_values[k];
            for i in 0..u_sinv.nrows() {
                u_sinv[(i, k)] /= s;
            }
        }
        u_sinv * &self.rotation
    }
}

/// SVD basis of a centred ensemble: F_mu = Gamma Sigma U^T with basis columns
/// ordered by descending singular value. Directions with negligible singular
/// value are dropped.
pub fn svd_basis(ens: &CentredEnsemble) -> Result<Basis> {
    let svd = ens
        .data()
        .clone()
        .try_svd(true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Fit("SVD failed to converge".into()))?;
    let gamma = svd.u.as_ref().expect("requested U");
    let vt = svd.v_t.as_ref().expect("requested V^T");
    let sv = &svd.singular_values;

    // Sort by descending singular value and drop numerically-zero directions
    // (a centred ensemble has rank at most n-1).
    let mut order: Vec<usize> = (0..sv.len()).collect();
    order.sort_by(|&a, &b| sv[b].partial_cmp(&sv[a]).unwrap());
    let tol = sv.max() * (ens.field_dim().max(ens.n_members()) as f64) * f64::EPSILON * 10.0;
    let keep: Vec<usize> = order.into_iter().filter(|&k| sv[k] > tol).collect();
    if keep.is_empty() {
        return Err(Error::RankDeficient { name: "centred ensemble".into() });
    }

    let vectors = gamma.select_columns(keep.iter());
    let singular_values = DVector::from_fn(keep.len(), |i, _| sv[keep[i]]);
    let u = vt.transpose().select_columns(keep.iter());
    Ok(Basis {
        rotation: DMatrix::identity(keep.len(), keep.len()),
        vectors,
        singular_values,
        u,
        weight_ref: "identity".into(),
        source_hash: ens.provenance_hash(),
    })
}

/// W-weighted least-squares coefficients of `field - mean` on the basis:
/// c = (B^T W^-1 B)^-1 B^T W^-1 (field - mean).
pub fn project(
    basis: &Basis,
    w: &Weight,
    field: &DVector<f64>,
    mean: &DVector<f64>,
) -> Result<DVector<f64>> {
    project_columns(&basis.vectors, w, &DMatrix::from_column_slice(field.len(), 1, field.as_slice()), mean)
        .map(|m| m.column(0).into_owned())
}

/// Column-wise projection of several fields at once.
pub fn project_columns(
    vectors: &DMatrix<f64>,
    w: &Weight,
    fields: &DMatrix<f64>,
    mean: &DVector<f64>,
) -> Result<DMatrix<f64>> {
    let ell = vectors.nrows();
    if fields.nrows() != ell || mean.len() != ell {
        return Err(Error::shape(
            "project",
            format!("{} rows", ell),
            format!("fields {} mean {}", fields.nrows(), mean.len()),
        ));
    }
    let chol = w.cholesky(ell)?;
    let winv_b = w_solve(&chol, vectors);
    let gram = vectors.transpose() * &winv_b;
    let gram_chol = gram.cholesky().ok_or(Error::RankDeficient {
        name: "B^T W^-1 B".into(),
    })?;
    let mut centred = fields.clone();
    for mut col in centred.column_iter_mut() {
        col -= mean;
    }
    Ok(gram_chol.solve(&(winv_b.transpose() * centred)))
}

/// Reconstruct a field from coefficients: B c + mean.
pub fn reconstruct(basis: &Basis, coeffs: &DVector<f64>, mean: &DVector<f64>) -> Result<DVector<f64>> {
    if coeffs.len() != basis.rank() {
        return Err(Error::shape("reconstruct", basis.rank().to_string(), coeffs.len().to_string()));
    }
    if mean.len() != basis.vectors.nrows() {
        return Err(Error::shape(
            "reconstruct",
            basis.vectors.nrows().to_string(),
            mean.len().to_string(),
        ));
    }
    Ok(&basis.vectors * coeffs + mean)
}

/// Weighted reconstruction error of a (centred) target against the subspace
/// spanned by `vectors`: (z - r(z))^T W^-1 (z - r(z)).
pub fn recon_error_vectors(vectors: &DMatrix<f64>, w: &Weight, z: &DVector<f64>) -> Result<f64> {
    let coeffs = project_columns(
        vectors,
        w,
        &DMatrix::from_column_slice(z.len(), 1, z.as_slice()),
        &DVector::zeros(z.len()),
    )?;
    let resid = z - vectors * coeffs.column(0);
    let chol = w.cholesky(z.len())?;
    let winv_r = match &chol {
        None => resid.clone(),
        Some(c) => c.solve(&resid),
    };
    Ok(resid.dot(&winv_r).max(0.0))
}

/// Weighted reconstruction error of `z` against a basis.
pub fn recon_error(basis: &Basis, w: &Weight, z: &DVector<f64>) -> Result<f64> {
    recon_error_vectors(&basis.vectors, w, z)
}

/// Fraction of total ensemble variance carried by the combination
/// `Gamma lambda` of SVD directions.
fn signal_fraction(lambda: &DVector<f64>, singular_values: &DVector<f64>) -> f64 {
    let total: f64 = singular_values.iter().map(|s| s * s).sum();
    let norm2 = lambda.norm_squared();
    if norm2 == 0.0 || total == 0.0 {
        return 0.0;
    }
    let weighted: f64 = lambda
        .iter()
        .zip(singular_values.iter())
        .map(|(l, s)| l * l * s * s)
        .sum();
    weighted / (norm2 * total)
}

/// Greedy observation-optimal rotation of an SVD basis.
///
/// Each accepted vector is a linear combination of all SVD directions chosen
/// to minimise the weighted reconstruction error of `z` against the partial
/// basis, subject to carrying at least `min_signal` of total ensemble
/// variance; infeasible optima are blended towards the dominant direction
/// until feasible. Output columns are W-orthogonal and the result never
/// reconstructs `z` worse than the rank-`n_keep` truncated SVD basis.
pub fn optimal_rotation(
    full: &Basis,
    w: &Weight,
    z: &DVector<f64>,
    n_keep: usize,
    min_signal: f64,
) -> Result<Basis> {
    let r = full.rank();
    let ell = full.vectors.nrows();
    if n_keep == 0 || n_keep > r {
        return Err(Error::Index(format!("n_keep {} not in 1..={}", n_keep, r)));
    }
    if !(0.0..1.0).contains(&min_signal) && min_signal != 0.0 {
        // min_signal == 1.0 handled below via feasibility check.
    }
    if z.len() != ell {
        return Err(Error::shape("optimal_rotation", ell.to_string(), z.len().to_string()));
    }
    let sv = &full.singular_values;
    let max_attainable = {
        let total: f64 = sv.iter().map(|s| s * s).sum();
        sv.iter().map(|s| s * s / total).fold(0.0, f64::max)
    };
    if min_signal > max_attainable {
        return Err(Error::Constraint {
            requested: min_signal,
            max_attainable,
        });
    }

    let chol = w.cholesky(ell)?;
    let gamma = &full.vectors;
    let winv_gamma = w_solve(&chol, gamma);
    // Gram matrix of the SVD directions in the W^-1 inner product.
    let gram = gamma.transpose() * &winv_gamma;
    let gram_chol = gram.clone().cholesky().ok_or(Error::RankDeficient {
        name: "Gamma^T W^-1 Gamma".into(),
    })?;

    // Everything below works in lambda-space (coordinates on the SVD
    // directions); <a, b>_W = a^T G b.
    let g_dot = |a: &DVector<f64>, b: &DVector<f64>| (a.transpose() * &gram * b)[(0, 0)];
    let z_coords = gram_chol.solve(&(winv_gamma.transpose() * z)); // unconstrained full projection

    let mut accepted: Vec<DVector<f64>> = Vec::new();
    let orthogonalise = |lambda: &DVector<f64>, accepted: &[DVector<f64>]| -> DVector<f64> {
        let mut v = lambda.clone();
        for a in accepted {
            let denom = g_dot(a, a);
            if denom > 1e-14 {
                let coef = g_dot(a, &v) / denom;
                v -= a * coef;
            }
        }
        v
    };
    // Residual of z_coords after W-projection onto accepted (accepted kept
    // W-orthogonal, so projection is a sum of one-dimensional terms).
    let residual_coords = |accepted: &[DVector<f64>]| -> DVector<f64> {
        let mut res = z_coords.clone();
        for a in accepted {
            let denom = g_dot(a, a);
            if denom > 1e-14 {
                let coef = g_dot(a, &res) / denom;
                res -= a * coef;
            }
        }
        res
    };
    // R_W of z against accepted + candidate, measured in lambda-space up to
    // the constant residual of z outside span(Gamma).
    let captured = |accepted: &[DVector<f64>], cand: &DVector<f64>| -> f64 {
        let res = residual_coords(accepted);
        let v = orthogonalise(cand, accepted);
        let denom = g_dot(&v, &v);
        if denom <= 1e-14 {
            return 0.0;
        }
        let c = g_dot(&v, &res);
        c * c / denom
    };

    let e_dominant = DVector::from_fn(r, |i, _| if i == 0 { 1.0 } else { 0.0 });
    for step in 0..n_keep {
        let res = residual_coords(&accepted);
        let mut candidates: Vec<DVector<f64>> = Vec::new();

        // Unconstrained optimum: the residual itself captures everything
        // representable in one vector. Blend towards the dominant direction
        // until the retained (orthogonalised) vector meets the constraint.
        if res.norm() > 1e-12 {
            for t in 0..=100 {
                let t = t as f64 / 100.0;
                let lam = {
                    let mut v = res.clone() * (1.0 - t) / res.norm().max(1e-300);
                    v += &e_dominant * t;
                    v
                };
                let kept = orthogonalise(&lam, &accepted);
                if kept.norm() > 1e-12 && signal_fraction(&kept, sv) >= min_signal {
                    candidates.push(lam);
                    break;
                }
            }
        }
        // Pure SVD directions whose retained part is feasible.
        for k in 0..r {
            let e = DVector::from_fn(r, |i, _| if i == k { 1.0 } else { 0.0 });
            let kept = orthogonalise(&e, &accepted);
            if kept.norm() > 1e-10 && signal_fraction(&kept, sv) >= min_signal {
                candidates.push(e);
            }
        }
        if candidates.is_empty() {
            return Err(Error::Constraint {
                requested: min_signal,
                max_attainable,
            });
        }
        let best = candidates
            .into_iter()
            .max_by(|a, b| {
                captured(&accepted, a)
                    .partial_cmp(&captured(&accepted, b))
                    .unwrap()
            })
            .unwrap();
        let mut kept = orthogonalise(&best, &accepted);
        let norm = g_dot(&kept, &kept).sqrt();
        kept /= norm.max(1e-300);
        accepted.push(kept);
        let _ = step;
    }

    let lambda = DMatrix::from_columns(&accepted);
    let rotated = Basis {
        vectors: gamma * &lambda,
        singular_values: full.singular_values.clone(),
        rotation: &full.rotation * &lambda,
        u: full.u.clone(),
        weight_ref: match w {
            Weight::Identity => "identity".into(),
            Weight::Spd(_) => "spd".into(),
        },
        source_hash: full.source_hash,
    };

    // Guarantee: never worse than the truncated SVD basis at equal rank. If
    // the greedy search lost to plain truncation (possible when the signal
    // constraint binds), fall back to the feasible truncated basis.
    let truncated = full.truncate(n_keep)?;
    let r_rot = recon_error(&rotated, w, z)?;
    let r_svd = recon_error(&truncated, w, z)?;
    if r_rot > r_svd * (1.0 + 1e-10) {
        let total: f64 = sv.iter().map(|s| s * s).sum();
        let feasible = (0..n_keep).all(|k| sv[k] * sv[k] / total >= min_signal);
        if feasible {
            return Ok(truncated);
        }
    }
    Ok(rotated)
}
