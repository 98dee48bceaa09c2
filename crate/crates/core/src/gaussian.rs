//! Quadratic Wasserstein geometry of Gaussian measures: the closed-form
//! distance, pushforward under orthogonal projection, and the best rank-d
//! Gaussian approximation (top-d eigenspace of the covariance with the mean
//! left unchanged).

use crate::linear::{symmetric_eigen_desc, top_d_columns, Subspace};
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Largest tolerated negative covariance eigenvalue; anything in
/// [−NEG_EIG_TOL, 0) is treated as roundoff and clamped to zero.
pub const NEG_EIG_TOL: f64 = 1e-10;

/// A Gaussian measure N(m, Σ) with symmetric positive-semidefinite Σ.
#[derive(Debug, Clone)]
pub struct Gaussian {
    mean: Tensor,
    cov: Tensor,
}

impl Gaussian {
    /// Validates shapes, symmetry (to 1e-10) and positive semidefiniteness
    /// (eigenvalues ≥ −1e-10, negatives clamped to zero).
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        if mean.rank() != 1 {
            return Err(Error::invalid("gaussian mean must be a vector"));
        }
        if cov.rank() != 2 || cov.rows() != cov.cols() || cov.rows() != mean.len() {
            return Err(Error::ShapeMismatch {
                op: "gaussian",
                lhs: mean.shape().to_vec(),
                rhs: cov.shape().to_vec(),
            });
        }
        let asym = cov.sub(&cov.transpose())?.frobenius_norm();
        if asym > 1e-10 {
            return Err(Error::invalid(format!(
                "covariance not symmetric: ‖Σ − Σᵀ‖_F = {asym:.3e}"
            )));
        }
        let sym = cov.add(&cov.transpose())?.scale(0.5);
        let (vals, vecs) = symmetric_eigen_desc(&sym)?;
        let min = *vals.last().expect("covariance has at least one eigenvalue");
        if min < -NEG_EIG_TOL {
            return Err(Error::invalid(format!(
                "covariance has negative eigenvalue {min:.3e}"
            )));
        }
        let cov = if min < 0.0 {
            let clamped: Vec<f64> = vals.iter().map(|&v| v.max(0.0)).collect();
            eigen_reconstruct(&clamped, &vecs)?
        } else {
            sym
        };
        Ok(Gaussian { mean, cov })
    }

    pub fn mean(&self) -> &Tensor {
        &self.mean
    }

    pub fn cov(&self) -> &Tensor {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// V diag(vals) Vᵀ for eigenvector columns V.
fn eigen_reconstruct(vals: &[f64], vecs: &Tensor) -> Result<Tensor> {
    let n = vecs.rows();
    let mut scaled = vecs.clone();
    for j in 0..n {
        for i in 0..n {
            *scaled.at_mut(i, j) = vecs.at(i, j) * vals[j];
        }
    }
    scaled.matmul(&vecs.transpose())
}

fn trace(m: &Tensor) -> f64 {
    (0..m.rows()).map(|i| m.at(i, i)).sum()
}

/// Symmetric square root of a (numerically) PSD matrix via its
/// eigen-decomposition; eigenvalues in [−1e-10, 0) are clamped to zero and
/// anything more negative is an error.
fn sqrt_psd(m: &Tensor) -> Result<Tensor> {
    let (vals, vecs) = symmetric_eigen_desc(m)?;
    let scale = vals[0].max(1.0);
    if *vals.last().expect("nonempty") < -NEG_EIG_TOL * scale {
        return Err(Error::invalid(format!(
            "matrix square root of indefinite input (eigenvalue {:.3e})",
            vals.last().unwrap()
        )));
    }
    // Eigenvalues below the relative noise floor are clamped to exact zero
    // before the square root: √ amplifies an O(ε) perturbation of a true
    // zero eigenvalue into an O(√ε) error otherwise.
    let tol = vals[0].max(0.0) * vals.len() as f64 * f64::EPSILON;
    let roots: Vec<f64> = vals
        .iter()
        .map(|&v| if v > tol { v.sqrt() } else { 0.0 })
        .collect();
    eigen_reconstruct(&roots, &vecs)
}

/// Quadratic Wasserstein distance between Gaussians:
/// W₂² = ‖m₁ − m₂‖² + tr(Σ₁) + tr(Σ₂) − 2·tr((Σ₁^{1/2} Σ₂ Σ₁^{1/2})^{1/2}).
/// Small negative squared distances from roundoff are clamped to zero.
pub fn gaussian_w2(g1: &Gaussian, g2: &Gaussian) -> Result<f64> {
    if g1.dim() != g2.dim() {
        return Err(Error::ShapeMismatch {
            op: "gaussian_w2",
            lhs: g1.mean.shape().to_vec(),
            rhs: g2.mean.shape().to_vec(),
        });
    }
    let mean_sq: f64 = g1
        .mean
        .data()
        .iter()
        .zip(g2.mean.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let s1h = sqrt_psd(&g1.cov)?;
    let inner = s1h.matmul(&g2.cov)?.matmul(&s1h)?;
    let inner = inner.add(&inner.transpose())?.scale(0.5);
    let (vals, _) = symmetric_eigen_desc(&inner)?;
    // Same relative clamping as in the matrix square root: √ of a slightly
    // perturbed zero eigenvalue would otherwise cost O(√ε) accuracy.
    let tol = vals[0].max(0.0) * vals.len() as f64 * f64::EPSILON;
    let cross: f64 = vals
        .iter()
        .map(|&v| if v > tol { v.sqrt() } else { 0.0 })
        .sum();
    let sq = mean_sq + trace(&g1.cov) + trace(&g2.cov) - 2.0 * cross;
    Ok(sq.max(0.0).sqrt())
}

/// Pushforward of a Gaussian under the orthoprojector P = U Uᵀ:
/// N(m, Σ) ↦ N(P m, P Σ P).
pub fn project_gaussian(g: &Gaussian, s: &Subspace) -> Result<Gaussian> {
    let dim = g.dim();
    if s.ambient_dim() != dim {
        return Err(Error::ShapeMismatch {
            op: "project_gaussian",
            lhs: g.mean.shape().to_vec(),
            rhs: s.basis().shape().to_vec(),
        });
    }
    let p = s.projector();
    let mut mean = vec![0.0; dim];
    for (i, m) in mean.iter_mut().enumerate() {
        for j in 0..dim {
            *m += p.at(i, j) * g.mean.data()[j];
        }
    }
    let cov = p.matmul(&g.cov)?.matmul(&p)?;
    let cov = cov.add(&cov.transpose())?.scale(0.5);
    Gaussian::new(Tensor::from_parts(vec![dim], mean), cov)
}

/// Best rank-d Gaussian approximation in quadratic Wasserstein distance for
/// a full-rank covariance: the covariance is compressed onto its own top-d
/// eigenspace (P Σ P) while the mean is kept exactly.
pub fn best_rank_d_gaussian(g: &Gaussian, d: usize) -> Result<(Subspace, Gaussian)> {
    let dim = g.dim();
    if d == 0 || d > dim {
        return Err(Error::invalid(format!(
            "target rank {d} must lie in [1, {dim}]"
        )));
    }
    let (vals, vecs) = symmetric_eigen_desc(&g.cov)?;
    let tol = vals[0].max(0.0) * dim as f64 * f64::EPSILON;
    let rank = vals.iter().filter(|&&v| v > tol).count();
    if rank < dim {
        return Err(Error::RankDeficient {
            needed: dim,
            got: rank,
        });
    }
    let subspace = Subspace::new(top_d_columns(&vecs, d))?;
    let projected = project_gaussian(g, &subspace)?;
    let approx = Gaussian {
        mean: g.mean.clone(),
        cov: projected.cov,
    };
    Ok((subspace, approx))
}
