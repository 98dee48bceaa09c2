//! Linear robust-subspace baselines: PCA, the least q-th power subspace
//! energy, an iteratively reweighted median-subspace solver (plus its
//! spherized variant), and a linear autoencoder trained by gradient descent
//! whose optimum coincides with the PCA orthoprojector.

use std::cmp::Ordering;

use nalgebra as na;

use crate::data::Rng;
use crate::losses::check_power;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Maximum allowed deviation of UᵀU from the identity.
pub const ORTHONORMAL_TOL: f64 = 1e-10;

/// A d-dimensional linear subspace of R^D, stored as a D×d matrix with
/// orthonormal columns. Represents the orthoprojector P = U Uᵀ.
#[derive(Debug, Clone)]
pub struct Subspace {
    basis: Tensor,
}

impl Subspace {
    /// Validates orthonormality (‖UᵀU − I‖_F ≤ 1e-10) before accepting.
    pub fn new(basis: Tensor) -> Result<Self> {
        if basis.rank() != 2 {
            return Err(Error::invalid("subspace basis must be a matrix"));
        }
        let (dim, d) = (basis.rows(), basis.cols());
        if d == 0 || d > dim {
            return Err(Error::invalid(format!(
                "subspace dimension {d} must lie in [1, {dim}]"
            )));
        }
        let gram = basis.transpose().matmul(&basis)?;
        let dev = gram.sub(&Tensor::eye(d))?.frobenius_norm();
        if dev > ORTHONORMAL_TOL {
            return Err(Error::invalid(format!(
                "basis columns not orthonormal: ‖UᵀU − I‖_F = {dev:.3e}"
            )));
        }
        Ok(Subspace { basis })
    }

    pub fn basis(&self) -> &Tensor {
        &self.basis
    }

    pub fn ambient_dim(&self) -> usize {
        self.basis.rows()
    }

    pub fn d(&self) -> usize {
        self.basis.cols()
    }

    /// The D×D orthoprojector U Uᵀ.
    pub fn projector(&self) -> Tensor {
        self.basis
            .matmul(&self.basis.transpose())
            .expect("basis shapes are consistent by construction")
    }

    /// Project each row of Y onto the subspace: Y U Uᵀ.
    pub fn project_rows(&self, y: &Tensor) -> Result<Tensor> {
        let coords = y.matmul(&self.basis)?;
        coords.matmul(&self.basis.transpose())
    }

    /// Per-row distances ‖(I − P) y⁽ᵗ⁾‖₂.
    pub fn residual_norms(&self, y: &Tensor) -> Result<Vec<f64>> {
        let resid = y.sub(&self.project_rows(y)?)?;
        Ok(resid.row_l2_norms().into_data())
    }
}

fn to_na(t: &Tensor) -> na::DMatrix<f64> {
    na::DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn from_na(m: &na::DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        for j in 0..c {
            data.push(m[(i, j)]);
        }
    }
    Tensor::from_parts(vec![r, c], data)
}

/// Deterministic sign convention: flip each column so its largest-magnitude
/// entry (first such entry on ties) is positive.
fn fix_column_signs(u: &mut Tensor) {
    let (rows, cols) = (u.rows(), u.cols());
    for j in 0..cols {
        let mut best_i = 0;
        let mut best_abs = -1.0;
        for i in 0..rows {
            let a = u.at(i, j).abs();
            if a > best_abs {
                best_abs = a;
                best_i = i;
            }
        }
        if u.at(best_i, j) < 0.0 {
            for i in 0..rows {
                *u.at_mut(i, j) = -u.at(i, j);
            }
        }
    }
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// descending order and sign-fixed eigenvector columns.
pub(crate) fn symmetric_eigen_desc(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    if m.rank() != 2 || m.rows() != m.cols() {
        return Err(Error::invalid("symmetric eigen needs a square matrix"));
    }
    if !m.all_finite() {
        return Err(Error::invalid("non-finite entries in eigen input"));
    }
    let n = m.rows();
    let eig = na::SymmetricEigen::new(to_na(m));
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        eig.eigenvalues[b]
            .partial_cmp(&eig.eigenvalues[a])
            .unwrap_or(Ordering::Equal)
    });
    let vals: Vec<f64> = idx.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vecs = Tensor::zeros(&[n, n]);
    for (newj, &oldj) in idx.iter().enumerate() {
        for i in 0..n {
            *vecs.at_mut(i, newj) = eig.eigenvectors[(i, oldj)];
        }
    }
    if !vals.iter().all(|v| v.is_finite()) || !vecs.all_finite() {
        return Err(Error::Format(
            "eigen-decomposition produced non-finite values".into(),
        ));
    }
    fix_column_signs(&mut vecs);
    Ok((vals, vecs))
}

pub(crate) fn top_d_columns(vecs: &Tensor, d: usize) -> Tensor {
    let dim = vecs.rows();
    let mut u = Tensor::zeros(&[dim, d]);
    for j in 0..d {
        for i in 0..dim {
            *u.at_mut(i, j) = vecs.at(i, j);
        }
    }
    u
}

/// Orthonormal basis for the top-d right-singular subspace of Y (N×D).
/// Data are treated as centered at the origin; callers center explicitly.
pub fn pca_subspace(y: &Tensor, d: usize) -> Result<Subspace> {
    if y.rank() != 2 {
        return Err(Error::invalid("pca_subspace needs a matrix of samples"));
    }
    let (n, dim) = (y.rows(), y.cols());
    if d == 0 || d > dim {
        return Err(Error::invalid(format!(
            "subspace dimension {d} must lie in [1, {dim}]"
        )));
    }
    if n < d {
        return Err(Error::invalid(format!(
            "need at least d = {d} samples, got {n}"
        )));
    }
    let svd = to_na(y).svd(false, true);
    let v_t = svd
        .v_t
        .ok_or_else(|| Error::Format("SVD produced no right singular vectors".into()))?;
    let s = &svd.singular_values;
    let tol = s[0] * n.max(dim) as f64 * f64::EPSILON;
    let rank = s.iter().filter(|&&v| v > tol).count();
    if rank < d {
        return Err(Error::RankDeficient { needed: d, got: rank });
    }
    let mut u = Tensor::zeros(&[dim, d]);
    for j in 0..d {
        for i in 0..dim {
            *u.at_mut(i, j) = v_t[(j, i)];
        }
    }
    fix_column_signs(&mut u);
    Subspace::new(u)
}

/// Least q-th power deviation energy Σₜ ‖(I − P) y⁽ᵗ⁾‖₂^q, q ∈ {1, 2}.
pub fn lad_energy(subspace: &Subspace, y: &Tensor, q: u32) -> Result<f64> {
    check_power(q, "subspace energy")?;
    if y.rank() != 2 || y.cols() != subspace.ambient_dim() {
        return Err(Error::ShapeMismatch {
            op: "lad_energy",
            lhs: y.shape().to_vec(),
            rhs: subspace.basis.shape().to_vec(),
        });
    }
    let norms = subspace.residual_norms(y)?;
    Ok(norms
        .iter()
        .map(|&r| if q == 1 { r } else { r * r })
        .sum())
}

/// Settings for the iteratively reweighted median-subspace solver.
#[derive(Debug, Clone)]
pub struct FmsConfig {
    /// Floor on residual norms in the reweighting (regularization).
    pub delta: f64,
    pub max_iters: usize,
    /// Stop when the principal angle between successive iterates drops
    /// below this.
    pub tol: f64,
}

impl Default for FmsConfig {
    fn default() -> Self {
        FmsConfig {
            delta: 1e-10,
            max_iters: 100,
            tol: 1e-8,
        }
    }
}

/// Full iterate history of one solver run. `iterates[0]` is the PCA
/// initialization; `smoothed_energies[k]` is the δ-regularized energy
/// Σₜ h_δ(‖(I−P_k)y⁽ᵗ⁾‖) with h_δ(r) = r²/(2δ) + δ/2 below δ and r above.
#[derive(Debug, Clone)]
pub struct FmsTrace {
    pub iterates: Vec<Subspace>,
    pub smoothed_energies: Vec<f64>,
    pub converged: bool,
}

impl FmsTrace {
    pub fn final_subspace(&self) -> &Subspace {
        self.iterates.last().expect("trace holds the initial iterate")
    }
}

fn smoothed_energy(s: &Subspace, y: &Tensor, delta: f64) -> Result<f64> {
    Ok(s.residual_norms(y)?
        .iter()
        .map(|&r| {
            if r < delta {
                r * r / (2.0 * delta) + delta / 2.0
            } else {
                r
            }
        })
        .sum())
}

fn reweighted_step(s: &Subspace, y: &Tensor, d: usize, delta: f64) -> Result<Subspace> {
    let (n, dim) = (y.rows(), y.cols());
    let norms = s.residual_norms(y)?;
    let mut scaled = y.clone();
    for i in 0..n {
        let w = (1.0 / norms[i].max(delta)).sqrt();
        for v in &mut scaled.data_mut()[i * dim..(i + 1) * dim] {
            *v *= w;
        }
    }
    let c = scaled.transpose().matmul(&scaled)?;
    let (vals, vecs) = symmetric_eigen_desc(&c)?;
    let tol = vals[0].max(0.0) * dim as f64 * f64::EPSILON;
    let rank = vals.iter().filter(|&&v| v > tol).count();
    if rank < d {
        return Err(Error::RankDeficient { needed: d, got: rank });
    }
    Subspace::new(top_d_columns(&vecs, d))
}

/// Robust subspace recovery by iterative reweighting of the scatter matrix:
/// P_{k+1} = top-d eigenspace of Σₜ y⁽ᵗ⁾y⁽ᵗ⁾ᵀ / max(‖(I−P_k)y⁽ᵗ⁾‖₂, δ),
/// initialized at PCA. The δ-regularized energy must not increase between
/// iterates (the solver errors out otherwise).
pub fn fms(y: &Tensor, d: usize, config: &FmsConfig) -> Result<Subspace> {
    let mut trace = fms_with_trace(y, d, config)?;
    Ok(trace.iterates.pop().expect("trace holds the initial iterate"))
}

/// As [`fms`], but returns every iterate and its regularized energy.
pub fn fms_with_trace(y: &Tensor, d: usize, config: &FmsConfig) -> Result<FmsTrace> {
    if config.delta.is_nan() || config.delta <= 0.0 {
        return Err(Error::invalid("delta must be positive"));
    }
    if config.max_iters == 0 {
        return Err(Error::invalid("max_iters must be >= 1"));
    }
    if y.rank() != 2 || y.rows() <= d {
        return Err(Error::invalid(format!(
            "need more than d = {d} samples, got {}",
            y.rows()
        )));
    }
    let mut current = pca_subspace(y, d)?;
    let mut energy = smoothed_energy(&current, y, config.delta)?;
    let mut trace = FmsTrace {
        iterates: vec![current.clone()],
        smoothed_energies: vec![energy],
        converged: false,
    };
    for _ in 0..config.max_iters {
        let next = reweighted_step(&current, y, d, config.delta)?;
        let next_energy = smoothed_energy(&next, y, config.delta)?;
        if next_energy > energy + 1e-9 * energy.abs().max(1.0) {
            return Err(Error::Diverged(format!(
                "subspace energy increased from {energy} to {next_energy}"
            )));
        }
        let angle = principal_angle(&current, &next)?;
        trace.iterates.push(next.clone());
        trace.smoothed_energies.push(next_energy);
        current = next;
        energy = next_energy;
        if angle < config.tol {
            trace.converged = true;
            break;
        }
    }
    Ok(trace)
}

/// Coordinate-wise medians of the rows (the robust centering point).
pub fn column_medians(y: &Tensor) -> Result<Vec<f64>> {
    if y.rank() != 2 {
        return Err(Error::invalid("column_medians needs a matrix"));
    }
    let (n, dim) = (y.rows(), y.cols());
    let mut median = vec![0.0; dim];
    for (j, m) in median.iter_mut().enumerate() {
        let mut col: Vec<f64> = (0..n).map(|i| y.at(i, j)).collect();
        col.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
        *m = if n % 2 == 1 {
            col[n / 2]
        } else {
            0.5 * (col[n / 2 - 1] + col[n / 2])
        };
    }
    Ok(median)
}

/// Subtract the coordinate-wise median, then scale every nonzero row to the
/// unit sphere. Rows that are exactly zero after centering are dropped;
/// the count of dropped rows is returned alongside the normalized data.
pub fn spherical_normalize(y: &Tensor) -> Result<(Tensor, usize)> {
    let median = column_medians(y)?;
    let (n, dim) = (y.rows(), y.cols());
    let mut kept = Vec::new();
    let mut dropped = 0usize;
    for i in 0..n {
        let centered: Vec<f64> = y
            .row(i)
            .iter()
            .zip(&median)
            .map(|(v, m)| v - m)
            .collect();
        let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            kept.extend(centered.iter().map(|v| v / norm));
        } else {
            dropped += 1;
        }
    }
    if kept.is_empty() {
        return Err(Error::invalid("all rows zero after median centering"));
    }
    let rows = kept.len() / dim;
    Ok((Tensor::from_parts(vec![rows, dim], kept), dropped))
}

/// Largest principal angle between two subspaces of equal ambient dimension
/// and equal d: arccos of the smallest singular value of U1ᵀU2.
pub fn principal_angle(s1: &Subspace, s2: &Subspace) -> Result<f64> {
    if s1.ambient_dim() != s2.ambient_dim() || s1.d() != s2.d() {
        return Err(Error::ShapeMismatch {
            op: "principal_angle",
            lhs: s1.basis.shape().to_vec(),
            rhs: s2.basis.shape().to_vec(),
        });
    }
    let m = s1.basis.transpose().matmul(&s2.basis)?;
    let svd = to_na(&m).svd(false, false);
    let smin = svd
        .singular_values
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
        .clamp(0.0, 1.0);
    Ok(smin.acos())
}

/// Uniformly random d-dimensional subspace of R^ambient (QR of a Gaussian
/// matrix).
pub fn random_subspace(ambient: usize, d: usize, rng: &mut Rng) -> Result<Subspace> {
    if d == 0 || d > ambient {
        return Err(Error::invalid(format!(
            "subspace dimension {d} must lie in [1, {ambient}]"
        )));
    }
    let g = Tensor::from_parts(
        vec![ambient, d],
        (0..ambient * d).map(|_| rng.normal()).collect(),
    );
    let q = to_na(&g).qr().q();
    Subspace::new(from_na(&q))
}

/// Linear autoencoder x ↦ D E x with E: d×D and D: D×d.
#[derive(Debug, Clone)]
pub struct LinearAE {
    pub e: Tensor,
    pub d_mat: Tensor,
}

impl LinearAE {
    pub fn validate(&self) -> Result<()> {
        if self.e.rank() != 2 || self.d_mat.rank() != 2 {
            return Err(Error::invalid("linear autoencoder factors must be matrices"));
        }
        if self.e.rows() != self.d_mat.cols() || self.e.cols() != self.d_mat.rows() {
            return Err(Error::ShapeMismatch {
                op: "linear_ae",
                lhs: self.e.shape().to_vec(),
                rhs: self.d_mat.shape().to_vec(),
            });
        }
        if !self.e.all_finite() || !self.d_mat.all_finite() {
            return Err(Error::invalid("non-finite linear autoencoder factors"));
        }
        Ok(())
    }

    /// The D×D product D E, which at the optimum equals the PCA projector.
    pub fn product(&self) -> Result<Tensor> {
        self.d_mat.matmul(&self.e)
    }

    /// Row-wise reconstruction Y (D E)ᵀ.
    pub fn reconstruct(&self, y: &Tensor) -> Result<Tensor> {
        y.matmul(&self.product()?.transpose())
    }

    /// Σₜ ‖y⁽ᵗ⁾ − D E y⁽ᵗ⁾‖₂ᵖ.
    pub fn loss(&self, y: &Tensor, p: u32) -> Result<f64> {
        check_power(p, "reconstruction")?;
        let resid = y.sub(&self.reconstruct(y)?)?;
        Ok(resid
            .row_l2_norms()
            .data()
            .iter()
            .map(|&r| if p == 1 { r } else { r * r })
            .sum())
    }
}

/// Gradient-descent settings for the linear autoencoder.
#[derive(Debug, Clone)]
pub struct LinearAeConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Stop when the Frobenius norm of the full gradient drops below this.
    pub grad_tol: f64,
    /// Reconstruction power; 2 is the case provably equivalent to PCA, 1 is
    /// exposed for experimentation but has a non-unique optimum.
    pub p: u32,
    pub seed: u64,
}

impl Default for LinearAeConfig {
    fn default() -> Self {
        LinearAeConfig {
            learning_rate: 1e-2,
            max_epochs: 20_000,
            grad_tol: 1e-8,
            p: 2,
            seed: 0,
        }
    }
}

/// Analytic gradients of Σₜ‖y⁽ᵗ⁾ − D E y⁽ᵗ⁾‖ᵖ with respect to (E, D).
/// For p = 2: ∂L/∂E = −2 Dᵀ Rᵀ Y and ∂L/∂D = −2 Rᵀ Y Eᵀ with R = Y − Y(DE)ᵀ.
/// For p = 1 the residual rows are replaced by unit residuals (zero rows
/// contribute the zero subgradient).
fn linear_ae_gradients(ae: &LinearAE, y: &Tensor, p: u32) -> Result<(Tensor, Tensor)> {
    let resid = y.sub(&ae.reconstruct(y)?)?;
    let scaled = match p {
        2 => resid.scale(2.0),
        _ => {
            let (n, dim) = (resid.rows(), resid.cols());
            let norms = resid.row_l2_norms();
            let mut unit = resid.clone();
            for i in 0..n {
                let r = norms.data()[i];
                let inv = if r > 0.0 { 1.0 / r } else { 0.0 };
                for v in &mut unit.data_mut()[i * dim..(i + 1) * dim] {
                    *v *= inv;
                }
            }
            unit
        }
    };
    let sty = scaled.transpose().matmul(y)?;
    let grad_e = ae.d_mat.transpose().matmul(&sty)?.scale(-1.0);
    let grad_d = sty.matmul(&ae.e.transpose())?.scale(-1.0);
    Ok((grad_e, grad_d))
}

/// Full-batch gradient descent on the linear autoencoder reconstruction
/// loss over centered data. Stops when the gradient norm drops below
/// `grad_tol`; reports divergence if the loss increases for ten consecutive
/// epochs.
pub fn train_linear_ae(y: &Tensor, d: usize, config: &LinearAeConfig) -> Result<LinearAE> {
    check_power(config.p, "reconstruction")?;
    if y.rank() != 2 {
        return Err(Error::invalid("train_linear_ae needs a matrix of samples"));
    }
    let dim = y.cols();
    if d == 0 || d > dim {
        return Err(Error::invalid(format!(
            "latent dimension {d} must lie in [1, {dim}]"
        )));
    }
    if config.learning_rate.is_nan() || config.learning_rate <= 0.0 {
        return Err(Error::invalid("learning rate must be positive"));
    }
    if config.max_epochs == 0 {
        return Err(Error::invalid("max_epochs must be >= 1"));
    }
    let mut rng = Rng::new(config.seed);
    let scale = 1.0 / (dim as f64).sqrt();
    let mut ae = LinearAE {
        e: Tensor::from_parts(
            vec![d, dim],
            (0..d * dim).map(|_| rng.normal() * scale).collect(),
        ),
        d_mat: Tensor::from_parts(
            vec![dim, d],
            (0..dim * d).map(|_| rng.normal() * scale).collect(),
        ),
    };
    let mut prev_loss = f64::INFINITY;
    let mut rising = 0usize;
    for epoch in 0..config.max_epochs {
        let loss = ae.loss(y, config.p)?;
        if !loss.is_finite() {
            return Err(Error::Diverged(format!("epoch {epoch}: non-finite loss")));
        }
        if loss > prev_loss {
            rising += 1;
            if rising >= 10 {
                return Err(Error::Diverged(format!(
                    "loss increased for {rising} consecutive epochs (now {loss:.6e})"
                )));
            }
        } else {
            rising = 0;
        }
        prev_loss = loss;

        let (grad_e, grad_d) = linear_ae_gradients(&ae, y, config.p)?;
        let gnorm = (grad_e.frobenius_norm().powi(2) + grad_d.frobenius_norm().powi(2)).sqrt();
        if gnorm < config.grad_tol {
            break;
        }
        ae.e = ae.e.sub(&grad_e.scale(config.learning_rate))?;
        ae.d_mat = ae.d_mat.sub(&grad_d.scale(config.learning_rate))?;
        if !ae.e.all_finite() || !ae.d_mat.all_finite() {
            return Err(Error::Diverged(format!(
                "epoch {epoch}: non-finite parameters"
            )));
        }
    }
    ae.validate()?;
    Ok(ae)
}
