//! Reverse-mode automatic differentiation on a Wengert tape.
//!
//! The tape records a small closed set of primitives — matrix multiply,
//! elementwise add, bias broadcast, elementwise activation, row-wise L2
//! norm, sum, scalar multiply, square, transpose, row normalization, and
//! batch normalization — each with a hand-derived local gradient rule.
//! Every layer in the crate is composed from these, so the finite-difference
//! oracle in this module covers the whole model zoo automatically.
//!
//! Usage is define-by-run: tape operations execute eagerly and return a
//! [`Var`] handle, so "backward before forward" is unrepresentable. A tape
//! is single-owner during forward/backward; independent tapes may run in
//! parallel.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;
use crate::{Error, Result};

/// Elementwise activation functions used by dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// No nonlinearity.
    None,
    Relu,
    /// max(x, αx) with slope α on the negative side.
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    pub fn value(self, x: f64) -> f64 {
        match self {
            Activation::None => x,
            Activation::Relu => {
                if x > 0.0 {
                    x
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    x
                } else {
                    a * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    /// Derivative at x; the kink at 0 uses the negative-side slope.
    pub fn slope(self, x: f64) -> f64 {
        match self {
            Activation::None => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(a) => {
                if x > 0.0 {
                    1.0
                } else {
                    a
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }

    pub fn validate(self) -> Result<()> {
        if let Activation::LeakyRelu(a) = self {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::invalid(format!(
                    "leaky relu slope must lie in (0,1), got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Per-column batch statistics computed by the batch-norm primitive,
/// returned so the caller can maintain running averages.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (1/N) variance, the quantity actually used for normalization.
    pub var: Vec<f64>,
}

enum Op {
    Leaf { tracked: bool },
    MatMul(Var, Var),
    Add(Var, Var),
    /// Matrix plus a row vector broadcast across rows.
    BiasAdd(Var, Var),
    Activation(Var, Activation),
    RowL2Norm(Var),
    Sum(Var),
    ScalarMul(Var, f64),
    Square(Var),
    Transpose(Var),
    /// Each row divided by its L2 norm; rows with norm below the threshold
    /// pass through unchanged.
    RowNormalize { input: Var, min_norm: f64 },
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        /// Cached (x − μ)·inv_std, needed by the backward rule.
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// The Wengert tape: an append-only list of executed primitives in
/// topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Record a tracked leaf: backward will produce a gradient for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf { tracked: true })
    }

    /// Record an untracked leaf (e.g. input data): gradients are not
    /// accumulated for it.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_unchecked(value, Op::Leaf { tracked: false })
    }

    /// The forward value of a recorded variable.
    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push_unchecked(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Append a computed node, enforcing the finite-intermediate invariant.
    fn push(&mut self, value: Tensor, op: Op, context: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                context,
                node: self.nodes.len(),
            });
        }
        Ok(self.push_unchecked(value, op))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        self.push(value, Op::Add(a, b), "add")
    }

    /// Convenience composition: a − b as add(a, (−1)·b).
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let neg = self.scalar_mul(b, -1.0)?;
        self.add(a, neg)
    }

    /// Add a length-D bias vector to every row of an N×D matrix.
    pub fn bias_add(&mut self, m: Var, bias: Var) -> Result<Var> {
        let mv = self.value(m);
        let bv = self.value(bias);
        if mv.rank() != 2 || bv.rank() != 1 || mv.cols() != bv.len() {
            return Err(Error::ShapeMismatch {
                op: "bias_add",
                lhs: mv.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let (n, d) = (mv.rows(), mv.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                data.push(mv.at(i, j) + bv.data()[j]);
            }
        }
        let value = Tensor::from_parts(vec![n, d], data);
        self.push(value, Op::BiasAdd(m, bias), "bias_add")
    }

    pub fn activation(&mut self, x: Var, act: Activation) -> Result<Var> {
        act.validate()?;
        let value = self.value(x).map(|v| act.value(v));
        self.push(value, Op::Activation(x, act), "activation")
    }

    /// L2 norm of each row: N×D → length-N vector.
    pub fn row_l2_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 && xv.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "row_l2_norm",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = xv.row_l2_norms();
        self.push(value, Op::RowL2Norm(x), "row_l2_norm")
    }

    /// Sum of all entries, as a rank-0 scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x), "sum")
    }

    pub fn scalar_mul(&mut self, x: Var, c: f64) -> Result<Var> {
        let value = self.value(x).scale(c);
        self.push(value, Op::ScalarMul(x, c), "scalar_mul")
    }

    /// Elementwise square.
    pub fn square(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(|v| v * v);
        self.push(value, Op::Square(x), "square")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "transpose",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = xv.transpose();
        self.push(value, Op::Transpose(x), "transpose")
    }

    /// Divide each row by its L2 norm; rows with norm below `min_norm` pass
    /// through unchanged (transiently near-zero latents must not blow up).
    pub fn row_normalize(&mut self, x: Var, min_norm: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::ShapeMismatch {
                op: "row_normalize",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, d) = (xv.rows(), xv.cols());
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = xv.row(i);
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < min_norm {
                data.extend_from_slice(row);
            } else {
                data.extend(row.iter().map(|v| v / norm));
            }
        }
        let value = Tensor::from_parts(vec![n, d], data);
        self.push(value, Op::RowNormalize { input: x, min_norm }, "row_normalize")
    }

    /// Batch normalization in training mode: per-column batch statistics,
    /// x̂ = (x − μ)/√(σ² + ε), output γ·x̂ + β. Returns the batch statistics
    /// so the caller can update running averages. Requires N ≥ 2.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        if xv.rank() != 2 || gv.rank() != 1 || bv.rank() != 1 {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (n, d) = (xv.rows(), xv.cols());
        if gv.len() != d || bv.len() != d {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                lhs: vec![n, d],
                rhs: vec![gv.len(), bv.len()],
            });
        }
        if n < 2 {
            return Err(Error::invalid(
                "batch_norm in training mode needs a batch of at least 2",
            ));
        }
        if eps <= 0.0 {
            return Err(Error::invalid("batch_norm epsilon must be positive"));
        }

        let nf = n as f64;
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                mean[j] += xv.at(i, j);
            }
        }
        for m in &mut mean {
            *m /= nf;
        }
        let mut var = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let c = xv.at(i, j) - mean[j];
                var[j] += c * c;
            }
        }
        for v in &mut var {
            *v /= nf;
        }
        let inv_std: Vec<f64> = var.iter().map(|&v| 1.0 / (v + eps).sqrt()).collect();

        let mut normalized = Vec::with_capacity(n * d);
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let xh = (xv.at(i, j) - mean[j]) * inv_std[j];
                normalized.push(xh);
                out.push(gv.data()[j] * xh + bv.data()[j]);
            }
        }
        let stats = BatchStats {
            mean,
            var: var.clone(),
        };
        let value = Tensor::from_parts(vec![n, d], out);
        let v = self.push(
            value,
            Op::BatchNorm {
                input: x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            "batch_norm",
        )?;
        Ok((v, stats))
    }

    /// Reverse pass seeded with d(output)/d(output) = 1. `output` must be a
    /// scalar.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.value(output);
        if out.len() != 1 {
            return Err(Error::invalid(format!(
                "backward without an explicit seed needs a scalar output, got shape {:?}",
                out.shape()
            )));
        }
        let seed = Tensor::from_parts(out.shape().to_vec(), vec![1.0]);
        self.backward_with_seed(output, &seed)
    }

    /// Reverse pass with an arbitrary seed gradient of the output's shape.
    pub fn backward_with_seed(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::ShapeMismatch {
                op: "backward seed",
                lhs: seed.shape().to_vec(),
                rhs: self.value(output).shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());

        for idx in (0..=output.0).rev() {
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Leaf { tracked } => {
                    if *tracked {
                        grads[idx] = Some(g); // keep for the caller
                    }
                }
                Op::MatMul(a, b) => {
                    // C = A·B ⇒ dA = G·Bᵀ, dB = Aᵀ·G.
                    let da = g.matmul(&self.value(*b).transpose())?;
                    let db = self.value(*a).transpose().matmul(&g)?;
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g);
                }
                Op::BiasAdd(m, bias) => {
                    // Bias receives the column sums of the upstream gradient.
                    let (n, d) = (g.rows(), g.cols());
                    let mut db = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            db[j] += g.at(i, j);
                        }
                    }
                    accumulate(&mut grads, *bias, Tensor::from_parts(vec![d], db));
                    accumulate(&mut grads, *m, g);
                }
                Op::Activation(x, act) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| g * act.slope(x))
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts(xv.shape().to_vec(), data),
                    );
                }
                Op::RowL2Norm(x) => {
                    // d‖r‖/dr = r/‖r‖; the zero subgradient is used at r = 0.
                    let xv = self.value(*x);
                    let mut dx = vec![0.0; xv.len()];
                    let norms = self.value(Var(idx));
                    if xv.rank() == 1 {
                        let norm = norms.data()[0];
                        if norm > 0.0 {
                            for (o, &v) in dx.iter_mut().zip(xv.data()) {
                                *o = g.data()[0] * v / norm;
                            }
                        }
                    } else {
                        let (n, d) = (xv.rows(), xv.cols());
                        for i in 0..n {
                            let norm = norms.data()[i];
                            if norm > 0.0 {
                                let gi = g.data()[i];
                                for j in 0..d {
                                    dx[i * d + j] = gi * xv.at(i, j) / norm;
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, Tensor::from_parts(xv.shape().to_vec(), dx));
                }
                Op::Sum(x) => {
                    let xv = self.value(*x);
                    accumulate(&mut grads, *x, Tensor::ones(xv.shape()).scale(g.item()));
                }
                Op::ScalarMul(x, c) => {
                    accumulate(&mut grads, *x, g.scale(*c));
                }
                Op::Square(x) => {
                    let xv = self.value(*x);
                    let data = xv
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &g)| 2.0 * x * g)
                        .collect();
                    accumulate(
                        &mut grads,
                        *x,
                        Tensor::from_parts(xv.shape().to_vec(), data),
                    );
                }
                Op::Transpose(x) => {
                    accumulate(&mut grads, *x, g.transpose());
                }
                Op::RowNormalize { input, min_norm } => {
                    // y = x/‖x‖ ⇒ dx = (g − (g·y)·y)/‖x‖; pass-through rows
                    // forward the gradient unchanged.
                    let xv = self.value(*input);
                    let yv = self.value(Var(idx));
                    let (n, d) = (xv.rows(), xv.cols());
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        let xr = xv.row(i);
                        let yr = yv.row(i);
                        let gr = g.row(i);
                        let norm = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < *min_norm {
                            dx[i * d..(i + 1) * d].copy_from_slice(gr);
                        } else {
                            let gy: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                dx[i * d + j] = (gr[j] - gy * yr[j]) / norm;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_parts(vec![n, d], dx));
                }
                Op::BatchNorm {
                    input,
                    gamma,
                    beta,
                    normalized,
                    inv_std,
                } => {
                    let xv = self.value(*input);
                    let gv = self.value(*gamma);
                    let (n, d) = (xv.rows(), xv.cols());
                    let nf = n as f64;
                    let mut dgamma = vec![0.0; d];
                    let mut dbeta = vec![0.0; d];
                    let mut gsum = vec![0.0; d];
                    let mut gxsum = vec![0.0; d];
                    for i in 0..n {
                        for j in 0..d {
                            let gij = g.at(i, j);
                            let xh = normalized[i * d + j];
                            dgamma[j] += gij * xh;
                            dbeta[j] += gij;
                            gsum[j] += gij;
                            gxsum[j] += gij * xh;
                        }
                    }
                    let mut dx = vec![0.0; n * d];
                    for i in 0..n {
                        for j in 0..d {
                            let gij = g.at(i, j);
                            let xh = normalized[i * d + j];
                            dx[i * d + j] = gv.data()[j] * inv_std[j]
                                * (gij - gsum[j] / nf - xh * gxsum[j] / nf);
                        }
                    }
                    accumulate(&mut grads, *input, Tensor::from_parts(vec![n, d], dx));
                    accumulate(&mut grads, *gamma, Tensor::from_parts(vec![d], dgamma));
                    accumulate(&mut grads, *beta, Tensor::from_parts(vec![d], dbeta));
                }
            }
        }

        Ok(Gradients { grads })
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the seeded output w.r.t. this variable, if any path
    /// reached it.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient as an owned tensor, zeros when no path reached the variable.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.grads[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

/// Central-difference gradient of a scalar function, one probe pair per
/// coordinate: (f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h.
pub fn finite_difference_gradient<F>(mut f: F, point: &Tensor, step: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut grad = vec![0.0; point.len()];
    let mut probe = point.clone();
    for i in 0..point.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let hi = f(&probe)?;
        probe.data_mut()[i] = orig - step;
        let lo = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !hi.is_finite() || !lo.is_finite() {
            return Err(Error::invalid(format!(
                "non-finite probe value at coordinate {i}: {hi} / {lo}"
            )));
        }
        grad[i] = (hi - lo) / (2.0 * step);
    }
    Ok(Tensor::from_parts(point.shape().to_vec(), grad))
}

/// Norm-wise relative error ‖a − b‖ / max(‖b‖, floor); used by the gradient
/// oracle tests.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape(), "relative_error shape mismatch");
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / b.frobenius_norm().max(1e-12)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Rng;

    const FD_STEP: f64 = 1e-6;
    const FD_TOL: f64 = 1e-5;

    fn random_tensor(rng: &mut Rng, shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.normal()).collect())
    }

    #[test]
    fn sum_of_squares_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = tape.square(x).unwrap();
        let out = tape.sum(sq).unwrap();
        assert_eq!(tape.value(out).item(), 5.0);
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn l2_norm_gradient_is_unit_direction() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&[vec![3.0, 4.0]]).unwrap());
        let norm = tape.row_l2_norm(x).unwrap();
        let out = tape.sum(norm).unwrap();
        assert_eq!(tape.value(out).item(), 5.0);
        let grads = tape.backward(out).unwrap();
        let g = grads.get(x).unwrap();
        assert!((g.data()[0] - 0.6).abs() < 1e-15);
        assert!((g.data()[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn l2_norm_zero_subgradient_matches_smoothing_limit() {
        // Backward at the kink returns the zero vector.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::matrix(&[vec![0.0, 0.0]]).unwrap());
        let norm = tape.row_l2_norm(x).unwrap();
        let out = tape.sum(norm).unwrap();
        let grads = tape.backward(out).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[0.0, 0.0]);

        // Independent oracle: the ε-smoothed norm √(‖x‖² + ε) has exact
        // gradient x/√(‖x‖²+ε) → 0 at x = 0 for every ε, so the limit as
        // ε → 0 is the zero vector.
        for eps in [1e-2, 1e-6, 1e-10] {
            let smooth = |p: &Tensor| -> crate::Result<f64> {
                Ok((p.data().iter().map(|v| v * v).sum::<f64>() + eps).sqrt())
            };
            let fd = finite_difference_gradient(
                smooth,
                &Tensor::vector(vec![0.0, 0.0]).unwrap(),
                1e-7,
            )
            .unwrap();
            for &g in fd.data() {
                assert!(g.abs() < 1e-6, "eps {eps}: {g}");
            }
        }
    }

    /// Check one scalar-valued graph builder against central differences on
    /// every leaf.
    fn check_against_fd(
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        leaves: &[Tensor],
        tag: &str,
    ) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = leaves.iter().map(|t| tape.leaf(t.clone())).collect();
        let out = build(&mut tape, &vars);
        let grads = tape.backward(out).unwrap();

        for (k, leaf) in leaves.iter().enumerate() {
            let f = |p: &Tensor| -> crate::Result<f64> {
                let mut t = Tape::new();
                let vs: Vec<Var> = leaves
                    .iter()
                    .enumerate()
                    .map(|(i, l)| t.leaf(if i == k { p.clone() } else { l.clone() }))
                    .collect();
                let o = build(&mut t, &vs);
                Ok(t.value(o).item())
            };
            let fd = finite_difference_gradient(f, leaf, FD_STEP).unwrap();
            let ad = grads.get_or_zeros(vars[k], leaf.shape());
            let err = relative_error(&ad, &fd);
            assert!(err <= FD_TOL, "{tag}, leaf {k}: rel err {err}");
        }
    }

    #[test]
    fn every_primitive_matches_finite_differences() {
        let mut rng = Rng::new(1234);

        // matmul → square → sum.
        let a = random_tensor(&mut rng, &[3, 4]);
        let b = random_tensor(&mut rng, &[4, 2]);
        check_against_fd(
            &|t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let s = t.square(m).unwrap();
                t.sum(s).unwrap()
            },
            &[a, b],
            "matmul",
        );

        // add and scalar_mul.
        let a = random_tensor(&mut rng, &[4, 3]);
        let b = random_tensor(&mut rng, &[4, 3]);
        check_against_fd(
            &|t, v| {
                let scaled = t.scalar_mul(v[1], -2.5).unwrap();
                let s = t.add(v[0], scaled).unwrap();
                let sq = t.square(s).unwrap();
                t.sum(sq).unwrap()
            },
            &[a, b],
            "add+scalar_mul",
        );

        // bias_add.
        let x = random_tensor(&mut rng, &[5, 3]);
        let bias = random_tensor(&mut rng, &[3]);
        check_against_fd(
            &|t, v| {
                let y = t.bias_add(v[0], v[1]).unwrap();
                let sq = t.square(y).unwrap();
                t.sum(sq).unwrap()
            },
            &[x, bias],
            "bias_add",
        );

        // activations (tanh smooth everywhere; leaky relu away from 0 —
        // shift inputs so no coordinate sits near the kink).
        for act in [Activation::Tanh, Activation::LeakyRelu(0.2), Activation::Relu] {
            let x = random_tensor(&mut rng, &[4, 4])
                .map(|v| if v.abs() < 0.05 { v + 0.5 } else { v });
            check_against_fd(
                &|t, v| {
                    let y = t.activation(v[0], act).unwrap();
                    let sq = t.square(y).unwrap();
                    t.sum(sq).unwrap()
                },
                &[x],
                "activation",
            );
        }

        // row_l2_norm away from the kink.
        let x = random_tensor(&mut rng, &[6, 3]).map(|v| v + 1.0);
        check_against_fd(
            &|t, v| {
                let n = t.row_l2_norm(v[0]).unwrap();
                t.sum(n).unwrap()
            },
            &[x],
            "row_l2_norm",
        );

        // transpose in a nontrivial composition.
        let a = random_tensor(&mut rng, &[3, 5]);
        check_against_fd(
            &|t, v| {
                let at = t.transpose(v[0]).unwrap();
                let g = t.matmul(v[0], at).unwrap();
                let sq = t.square(g).unwrap();
                t.sum(sq).unwrap()
            },
            &[a],
            "transpose",
        );

        // row_normalize (rows well away from zero norm). Project the unit
        // rows through a fixed matrix first — the squared norm of a
        // normalized row alone is constant and would hide a wrong backward.
        let x = random_tensor(&mut rng, &[5, 4]).map(|v| v + 2.0);
        check_against_fd(
            &|t, v| {
                let y = t.row_normalize(v[0], 1e-12).unwrap();
                let c = t.constant(random_like_weights());
                let p = t.matmul(y, c).unwrap();
                let sq = t.square(p).unwrap();
                t.sum(sq).unwrap()
            },
            &[x],
            "row_normalize",
        );

        // batch_norm w.r.t. input, gamma, beta.
        let x = random_tensor(&mut rng, &[8, 3]);
        let gamma = random_tensor(&mut rng, &[3]).map(|v| v + 2.0);
        let beta = random_tensor(&mut rng, &[3]);
        check_against_fd(
            &|t, v| {
                let (y, _) = t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap();
                let sq = t.square(y).unwrap();
                let s = t.sum(sq).unwrap();
                // Make the objective asymmetric in rows so dx is nontrivial.
                let n = t.row_l2_norm(y).unwrap();
                let sn = t.sum(n).unwrap();
                t.add(s, sn).unwrap()
            },
            &[x, gamma, beta],
            "batch_norm",
        );
    }

    fn random_like_weights() -> Tensor {
        let mut rng = Rng::new(777);
        Tensor::from_parts(vec![4, 2], (0..8).map(|_| rng.normal()).collect())
    }

    #[test]
    fn random_composite_graphs_match_finite_differences() {
        // Random chains over the primitive set, ≤ 1000 parameters.
        let mut rng = Rng::new(5150);
        for case in 0..20 {
            let n = 2 + rng.below(5);
            let d0 = 1 + rng.below(6);
            let d1 = 1 + rng.below(6);
            let x = random_tensor(&mut rng, &[n, d0]);
            let w = random_tensor(&mut rng, &[d0, d1]).scale(1.0 / (d0 as f64).sqrt());
            let b = random_tensor(&mut rng, &[d1]);
            let pick = rng.below(3);
            let act = match pick {
                0 => Activation::Tanh,
                1 => Activation::LeakyRelu(0.2),
                _ => Activation::None,
            };
            check_against_fd(
                &|t, v| {
                    let h = t.matmul(v[0], v[1]).unwrap();
                    let h = t.bias_add(h, v[2]).unwrap();
                    let h = t.activation(h, act).unwrap();
                    let ht = t.transpose(h).unwrap();
                    let g = t.matmul(ht, h).unwrap();
                    let sq = t.square(g).unwrap();
                    let s1 = t.sum(sq).unwrap();
                    let norms = t.row_l2_norm(h).unwrap();
                    let s2 = t.sum(norms).unwrap();
                    let s2w = t.scalar_mul(s2, 0.3).unwrap();
                    t.add(s1, s2w).unwrap()
                },
                &[x, w, b],
                &format!("composite case {case}"),
            );
        }
    }

    #[test]
    fn backward_is_linear_in_the_objective() {
        let mut rng = Rng::new(88);
        let x = random_tensor(&mut rng, &[4, 3]);
        let (a, b) = (1.7, -0.4);

        // f = Σ x², g = Σ row-norms; build a·f + b·g on one tape.
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone());
        let sq = tape.square(v).unwrap();
        let f = tape.sum(sq).unwrap();
        let norms = tape.row_l2_norm(v).unwrap();
        let g = tape.sum(norms).unwrap();
        let af = tape.scalar_mul(f, a).unwrap();
        let bg = tape.scalar_mul(g, b).unwrap();
        let combined = tape.add(af, bg).unwrap();
        let grads_combined = tape.backward(combined).unwrap();
        let grads_f = tape.backward(f).unwrap();
        let grads_g = tape.backward(g).unwrap();

        let gc = grads_combined.get(v).unwrap();
        let gf = grads_f.get(v).unwrap();
        let gg = grads_g.get(v).unwrap();
        for i in 0..x.len() {
            let expect = a * gf.data()[i] + b * gg.data()[i];
            assert!((gc.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn forward_and_backward_are_bit_deterministic() {
        let run = || {
            let mut rng = Rng::new(3141);
            let x = random_tensor(&mut rng, &[6, 4]);
            let w = random_tensor(&mut rng, &[4, 3]);
            let mut tape = Tape::new();
            let xv = tape.leaf(x);
            let wv = tape.leaf(w);
            let h = tape.matmul(xv, wv).unwrap();
            let h = tape.activation(h, Activation::Tanh).unwrap();
            let n = tape.row_l2_norm(h).unwrap();
            let out = tape.sum(n).unwrap();
            let grads = tape.backward(out).unwrap();
            (
                tape.value(out).item().to_bits(),
                grads
                    .get(wv)
                    .unwrap()
                    .data()
                    .iter()
                    .map(|v| v.to_bits())
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn identity_matmul_and_leaky_relu_examples() {
        let mut tape = Tape::new();
        let i2 = tape.constant(Tensor::eye(2));
        let x = tape.leaf(Tensor::matrix(&[vec![3.0], vec![4.0]]).unwrap());
        let y = tape.matmul(i2, x).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0]);

        let v = tape.leaf(Tensor::matrix(&[vec![-1.0]]).unwrap());
        let a = tape.activation(v, Activation::LeakyRelu(0.2)).unwrap();
        assert!((tape.value(a).data()[0] - (-0.2)).abs() < 1e-15);
    }

    #[test]
    fn error_paths_report_cleanly() {
        // Shape mismatch reports both shapes.
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::zeros(&[2, 3]));
        let b = tape.leaf(Tensor::zeros(&[2, 3]));
        let err = tape.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");

        // Non-finite intermediate reports the node index: (1e200)² overflows.
        let mut tape = Tape::new();
        let big = tape.leaf(Tensor::vector(vec![1e200]).unwrap());
        let err = tape.square(big).unwrap_err().to_string();
        assert!(err.contains("node"), "{err}");

        // Seed shape mismatch.
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = tape.sum(x).unwrap();
        let bad_seed = Tensor::vector(vec![1.0, 1.0]).unwrap();
        assert!(tape.backward_with_seed(s, &bad_seed).is_err());
    }

    #[test]
    fn finite_difference_oracle_sanity() {
        let f = |p: &Tensor| -> crate::Result<f64> { Ok(p.data()[0] * p.data()[0]) };
        let g = finite_difference_gradient(f, &Tensor::vector(vec![3.0]).unwrap(), 1e-5).unwrap();
        assert!((g.data()[0] - 6.0).abs() < 1e-9);

        let sum_f = |p: &Tensor| -> crate::Result<f64> { Ok(p.data().iter().sum()) };
        let g =
            finite_difference_gradient(sum_f, &Tensor::vector(vec![0.3, -2.0, 5.5]).unwrap(), 1e-6)
                .unwrap();
        for &v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
