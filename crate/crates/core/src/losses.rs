//! The three training losses and per-sample anomaly scoring.
//!
//! For a batch X with reconstructions X̃, latents Z, and RSR matrix A (d×D):
//!
//! * reconstruction: Σₜ ‖x⁽ᵗ⁾ − x̃⁽ᵗ⁾‖₂ᵖ (p = 1 for robust training),
//! * subspace residual: Σₜ ‖z⁽ᵗ⁾ − AᵀA z⁽ᵗ⁾‖₂^q (q = 1),
//! * orthonormality penalty: ‖A Aᵀ − I_d‖_F².
//!
//! Each loss has a plain (tensor) and a taped (differentiable) form; tests
//! pin the two together and against naive loop oracles.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub(crate) fn check_power(p: u32, what: &str) -> Result<()> {
    if p != 1 && p != 2 {
        return Err(Error::invalid(format!("{what} power must be 1 or 2, got {p}")));
    }
    Ok(())
}

/// Σₜ ‖x⁽ᵗ⁾ − x̃⁽ᵗ⁾‖₂ᵖ with p ∈ {1, 2}.
pub fn loss_ae(x: &Tensor, x_hat: &Tensor, p: u32) -> Result<f64> {
    check_power(p, "reconstruction")?;
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "loss_ae",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    let diff = x.sub(x_hat)?;
    let norms = diff.row_l2_norms();
    Ok(norms
        .data()
        .iter()
        .map(|&n| if p == 1 { n } else { n * n })
        .sum())
}

/// Σₜ ‖z⁽ᵗ⁾ − AᵀA z⁽ᵗ⁾‖₂^q with q ∈ {1, 2}; Z is N×D, A is d×D.
pub fn loss_rsr1(z: &Tensor, a: &Tensor, q: u32) -> Result<f64> {
    check_power(q, "subspace residual")?;
    if z.cols() != a.cols() {
        return Err(Error::ShapeMismatch {
            op: "loss_rsr1",
            lhs: z.shape().to_vec(),
            rhs: a.shape().to_vec(),
        });
    }
    // Row convention: residual = Z − (Z·Aᵀ)·A.
    let za = z.matmul(&a.transpose())?;
    let zaa = za.matmul(a)?;
    let diff = z.sub(&zaa)?;
    let norms = diff.row_l2_norms();
    Ok(norms
        .data()
        .iter()
        .map(|&n| if q == 1 { n } else { n * n })
        .sum())
}

/// ‖A Aᵀ − I_d‖_F².
pub fn loss_rsr2(a: &Tensor) -> Result<f64> {
    if a.rank() != 2 {
        return Err(Error::ShapeMismatch {
            op: "loss_rsr2",
            lhs: a.shape().to_vec(),
            rhs: vec![],
        });
    }
    let aat = a.matmul(&a.transpose())?;
    let diff = aat.sub(&Tensor::eye(a.rows()))?;
    Ok(diff.data().iter().map(|v| v * v).sum())
}

/// All loss terms of one forward pass and their weighted combination
/// (p = q = 1): combined = l_ae + λ1·l_rsr1 + λ2·l_rsr2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_ae: f64,
    pub l_rsr1: f64,
    pub l_rsr2: f64,
    pub combined: f64,
    pub lambda1: f64,
    pub lambda2: f64,
}

/// Evaluate the combined loss. The alternating trainer does not weight its
/// sub-steps; pass λ1 = λ2 = 1 there so `combined` stays interpretable.
pub fn loss_combined(
    x: &Tensor,
    z: &Tensor,
    x_hat: &Tensor,
    a: &Tensor,
    lambda1: f64,
    lambda2: f64,
) -> Result<LossBreakdown> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::invalid(format!(
            "loss weights must be positive, got {lambda1}, {lambda2}"
        )));
    }
    let l_ae = loss_ae(x, x_hat, 1)?;
    let l_rsr1 = loss_rsr1(z, a, 1)?;
    let l_rsr2 = loss_rsr2(a)?;
    Ok(LossBreakdown {
        l_ae,
        l_rsr1,
        l_rsr2,
        combined: l_ae + lambda1 * l_rsr1 + lambda2 * l_rsr2,
        lambda1,
        lambda2,
    })
}

/// Per-sample anomaly score: ‖x⁽ᵗ⁾ − x̃⁽ᵗ⁾‖₂. Higher means more anomalous
/// (distance is the negation of the similarity ordering).
pub fn anomaly_scores(x: &Tensor, x_hat: &Tensor) -> Result<Vec<f64>> {
    if x.shape() != x_hat.shape() {
        return Err(Error::ShapeMismatch {
            op: "anomaly_scores",
            lhs: x.shape().to_vec(),
            rhs: x_hat.shape().to_vec(),
        });
    }
    Ok(x.sub(x_hat)?.row_l2_norms().into_data())
}

// ---------------------------------------------------------------------------
// Taped (differentiable) forms
// ---------------------------------------------------------------------------

/// Taped Σₜ ‖x − x̃‖ᵖ.
pub fn taped_loss_ae(tape: &mut Tape, x: Var, x_hat: Var, p: u32) -> Result<Var> {
    check_power(p, "reconstruction")?;
    let diff = tape.sub(x, x_hat)?;
    let norms = tape.row_l2_norm(diff)?;
    let powered = if p == 2 { tape.square(norms)? } else { norms };
    tape.sum(powered)
}

/// Taped Σₜ ‖z − AᵀA z‖^q.
pub fn taped_loss_rsr1(tape: &mut Tape, z: Var, a: Var, q: u32) -> Result<Var> {
    check_power(q, "subspace residual")?;
    let at = tape.transpose(a)?;
    let za = tape.matmul(z, at)?;
    let zaa = tape.matmul(za, a)?;
    let diff = tape.sub(z, zaa)?;
    let norms = tape.row_l2_norm(diff)?;
    let powered = if q == 2 { tape.square(norms)? } else { norms };
    tape.sum(powered)
}

/// Taped ‖A Aᵀ − I_d‖_F².
pub fn taped_loss_rsr2(tape: &mut Tape, a: Var) -> Result<Var> {
    let d = tape.value(a).rows();
    let at = tape.transpose(a)?;
    let aat = tape.matmul(a, at)?;
    let eye = tape.constant(Tensor::eye(d));
    let diff = tape.sub(aat, eye)?;
    let sq = tape.square(diff)?;
    tape.sum(sq)
}

/// Taped combined loss l_ae + λ1·l_rsr1 + λ2·l_rsr2 at p = q = 1.
pub fn taped_loss_combined(
    tape: &mut Tape,
    x: Var,
    z: Var,
    x_hat: Var,
    a: Var,
    lambda1: f64,
    lambda2: f64,
) -> Result<Var> {
    let l_ae = taped_loss_ae(tape, x, x_hat, 1)?;
    let l1 = taped_loss_rsr1(tape, z, a, 1)?;
    let l2 = taped_loss_rsr2(tape, a)?;
    let w1 = tape.scalar_mul(l1, lambda1)?;
    let w2 = tape.scalar_mul(l2, lambda2)?;
    let partial = tape.add(l_ae, w1)?;
    tape.add(partial, w2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    fn random(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn loss_ae_trivial_cases() {
        let x = Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(loss_ae(&x, &x, 1).unwrap(), 0.0);
        assert_eq!(loss_ae(&x, &x, 2).unwrap(), 0.0);

        let x0 = Tensor::matrix(&[vec![0.0, 0.0]]).unwrap();
        let xh = Tensor::matrix(&[vec![3.0, 4.0]]).unwrap();
        assert_eq!(loss_ae(&x0, &xh, 1).unwrap(), 5.0);
        assert_eq!(loss_ae(&x0, &xh, 2).unwrap(), 25.0);
        assert!(loss_ae(&x0, &xh, 3).is_err());
    }

    #[test]
    fn loss_ae_matches_loop_oracle() {
        let mut rng = Rng::new(50);
        let x = random(&mut rng, &[50, 7]);
        let xh = random(&mut rng, &[50, 7]);
        for p in [1u32, 2] {
            let got = loss_ae(&x, &xh, p).unwrap();
            let mut want = 0.0;
            for i in 0..50 {
                let mut s = 0.0;
                for j in 0..7 {
                    let d = x.at(i, j) - xh.at(i, j);
                    s += d * d;
                }
                want += s.sqrt().powi(p as i32);
            }
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "p={p}: {got} vs {want}");
        }
    }

    #[test]
    fn loss_rsr1_subspace_membership_and_residual() {
        // Orthonormal rows spanning the first two coordinates; rows of Z in
        // that span have zero residual.
        let a = Tensor::matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let z = Tensor::matrix(&[vec![2.0, -3.0, 0.0], vec![0.5, 0.1, 0.0]]).unwrap();
        assert!(loss_rsr1(&z, &a, 1).unwrap().abs() < 1e-15);

        // A = [1 0], z = (0, 1): the residual is the whole vector.
        let a = Tensor::matrix(&[vec![1.0, 0.0]]).unwrap();
        let z = Tensor::matrix(&[vec![0.0, 1.0]]).unwrap();
        assert!((loss_rsr1(&z, &a, 1).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn loss_rsr1_matches_loop_oracle() {
        let mut rng = Rng::new(51);
        let z = random(&mut rng, &[20, 6]);
        let a = random(&mut rng, &[3, 6]);
        for q in [1u32, 2] {
            let got = loss_rsr1(&z, &a, q).unwrap();
            // Oracle: per-row residual r = z − Aᵀ(Az) via explicit loops.
            let mut want = 0.0;
            for t in 0..20 {
                let zrow = z.row(t);
                let mut az = [0.0; 3];
                for i in 0..3 {
                    for j in 0..6 {
                        az[i] += a.at(i, j) * zrow[j];
                    }
                }
                let mut s = 0.0;
                for j in 0..6 {
                    let mut back = 0.0;
                    for i in 0..3 {
                        back += a.at(i, j) * az[i];
                    }
                    let r = zrow[j] - back;
                    s += r * r;
                }
                want += s.sqrt().powi(q as i32);
            }
            assert!((got - want).abs() <= 1e-12 * want.max(1.0), "q={q}");
        }
    }

    #[test]
    fn loss_rsr2_known_values_and_oracle() {
        // Orthonormal rows → 0.
        let a = Tensor::matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
        assert!(loss_rsr2(&a).unwrap().abs() < 1e-15);

        // 2·I_d padded with zeros: AAᵀ = 4I, so (4−1)² per diagonal entry.
        for d in [1usize, 2, 3] {
            let mut a = Tensor::zeros(&[d, d + 3]);
            for i in 0..d {
                *a.at_mut(i, i) = 2.0;
            }
            assert!((loss_rsr2(&a).unwrap() - 9.0 * d as f64).abs() < 1e-12);
        }

        // Random A against a double-loop oracle.
        let mut rng = Rng::new(52);
        let a = random(&mut rng, &[4, 9]);
        let got = loss_rsr2(&a).unwrap();
        let mut want = 0.0;
        for i in 0..4 {
            for k in 0..4 {
                let mut dot = 0.0;
                for j in 0..9 {
                    dot += a.at(i, j) * a.at(k, j);
                }
                let target = if i == k { 1.0 } else { 0.0 };
                want += (dot - target) * (dot - target);
            }
        }
        assert!((got - want).abs() <= 1e-12 * want.max(1.0));
    }

    #[test]
    fn combined_is_definitional_sum() {
        let mut rng = Rng::new(53);
        let x = random(&mut rng, &[12, 5]);
        let xh = random(&mut rng, &[12, 5]);
        let z = random(&mut rng, &[12, 8]);
        let a = random(&mut rng, &[3, 8]);
        let b = loss_combined(&x, &z, &xh, &a, 0.1, 0.1).unwrap();
        let expect = b.l_ae + 0.1 * b.l_rsr1 + 0.1 * b.l_rsr2;
        assert!((b.combined - expect).abs() <= 1e-12 * expect.max(1.0));
        assert!(b.l_ae >= 0.0 && b.l_rsr1 >= 0.0 && b.l_rsr2 >= 0.0);
        assert!(loss_combined(&x, &z, &xh, &a, 0.0, 0.1).is_err());
    }

    #[test]
    fn combined_zero_for_perfect_model() {
        // Perfect reconstruction, orthonormal A, Z inside the subspace.
        let a = Tensor::matrix(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0]]).unwrap();
        let z = Tensor::matrix(&[vec![1.0, 2.0, 0.0]]).unwrap();
        let x = Tensor::matrix(&[vec![5.0, 6.0]]).unwrap();
        let b = loss_combined(&x, &z, &x, &a, 0.1, 0.1).unwrap();
        assert!(b.combined.abs() < 1e-15);
    }

    #[test]
    fn anomaly_scores_are_row_distances() {
        let x = Tensor::matrix(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap();
        let xh = Tensor::matrix(&[vec![3.0, 4.0], vec![1.0, 1.0]]).unwrap();
        let s = anomaly_scores(&x, &xh).unwrap();
        assert_eq!(s, vec![5.0, 0.0]);
    }

    #[test]
    fn taped_losses_equal_plain_losses() {
        let mut rng = Rng::new(54);
        let x = random(&mut rng, &[15, 4]);
        let xh = random(&mut rng, &[15, 4]);
        let z = random(&mut rng, &[15, 9]);
        let a = random(&mut rng, &[3, 9]);

        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let xhv = tape.constant(xh.clone());
        let zv = tape.constant(z.clone());
        let av = tape.leaf(a.clone());

        for p in [1u32, 2] {
            let t = taped_loss_ae(&mut tape, xv, xhv, p).unwrap();
            assert_eq!(tape.value(t).item().to_bits(), loss_ae(&x, &xh, p).unwrap().to_bits());
        }
        for q in [1u32, 2] {
            let t = taped_loss_rsr1(&mut tape, zv, av, q).unwrap();
            let plain = loss_rsr1(&z, &a, q).unwrap();
            assert!((tape.value(t).item() - plain).abs() <= 1e-12 * plain.max(1.0));
        }
        let t = taped_loss_rsr2(&mut tape, av).unwrap();
        let plain = loss_rsr2(&a).unwrap();
        assert!((tape.value(t).item() - plain).abs() <= 1e-12 * plain.max(1.0));

        let t = taped_loss_combined(&mut tape, xv, zv, xhv, av, 0.1, 0.1).unwrap();
        let plain = loss_combined(&x, &z, &xh, &a, 0.1, 0.1).unwrap();
        assert!((tape.value(t).item() - plain.combined).abs() <= 1e-12 * plain.combined);
    }

    #[test]
    fn taped_loss_gradients_match_finite_differences() {
        use crate::autodiff::{finite_difference_gradient, relative_error};
        let mut rng = Rng::new(55);
        let z = random(&mut rng, &[10, 6]);
        let a0 = random(&mut rng, &[2, 6]);

        // d(l_rsr1 + 0.5 l_rsr2)/dA against central differences.
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let av = tape.leaf(a0.clone());
        let l1 = taped_loss_rsr1(&mut tape, zv, av, 1).unwrap();
        let l2 = taped_loss_rsr2(&mut tape, av).unwrap();
        let l2w = tape.scalar_mul(l2, 0.5).unwrap();
        let total = tape.add(l1, l2w).unwrap();
        let grads = tape.backward(total).unwrap();

        let f = |a: &Tensor| -> crate::Result<f64> {
            Ok(loss_rsr1(&z, a, 1)? + 0.5 * loss_rsr2(a)?)
        };
        let fd = finite_difference_gradient(f, &a0, 1e-6).unwrap();
        let err = relative_error(grads.get(av).unwrap(), &fd);
        assert!(err <= 1e-5, "rel err {err}");
    }
}
