//! Dense encoder/decoder layers, the trainable subspace-recovery (RSR)
//! layer, whole-model forward passes, and checkpoint I/O.
//!
//! A model maps a batch X (N×M) through the encoder to latent codes Z (N×D),
//! through the d×D matrix A to Z̃ = Z·Aᵀ (N×d, optionally row-normalized),
//! and through the decoder to reconstructions X̃ (N×M). Rows are samples
//! throughout.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use crate::autodiff::Activation;
use crate::autodiff::{BatchStats, Tape, Var};
use crate::data::Rng;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// 8-byte magic prefix for model checkpoint files.
pub const MODEL_MAGIC: &[u8; 8] = b"RSRKMODL";
const MODEL_VERSION: u32 = 1;

/// Latent rows with L2 norm below this pass through normalization unchanged
/// (transiently tiny latents early in training must not explode).
pub const NORMALIZE_MIN_NORM: f64 = 1e-12;

/// A fully connected layer: y = activation(x·Wᵀ + b), weights out×in.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn in_width(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn out_width(&self) -> usize {
        self.weights.shape()[0]
    }

    fn validate(&self) -> Result<()> {
        if self.weights.rank() != 2
            || self.bias.rank() != 1
            || self.bias.len() != self.out_width()
        {
            return Err(Error::ShapeMismatch {
                op: "dense layer",
                lhs: self.weights.shape().to_vec(),
                rhs: self.bias.shape().to_vec(),
            });
        }
        self.activation.validate()
    }

    /// Plain (untaped) forward: activation(x·Wᵀ + b).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.cols() != self.in_width() {
            return Err(Error::ShapeMismatch {
                op: "dense forward",
                lhs: x.shape().to_vec(),
                rhs: self.weights.shape().to_vec(),
            });
        }
        let mut y = x.matmul(&self.weights.transpose())?;
        let (n, out) = (y.rows(), self.out_width());
        for i in 0..n {
            for j in 0..out {
                let v = self.activation.value(y.at(i, j) + self.bias.data()[j]);
                *y.at_mut(i, j) = v;
            }
        }
        Ok(y)
    }
}

/// The linear robust-subspace layer: Z̃ = Z·Aᵀ with A of shape d×D, d < D.
/// Near-orthonormality of A's rows is a trained property, not enforced here.
#[derive(Debug, Clone)]
pub struct RsrLayer {
    pub a: Tensor,
}

impl RsrLayer {
    pub fn d(&self) -> usize {
        self.a.shape()[0]
    }

    pub fn big_d(&self) -> usize {
        self.a.shape()[1]
    }
}

/// Batch normalization state for one layer.
#[derive(Debug, Clone)]
pub struct BatchNormState {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub fn new(width: usize, momentum: f64, eps: f64) -> Self {
        BatchNormState {
            gamma: Tensor::ones(&[width]),
            beta: Tensor::zeros(&[width]),
            running_mean: Tensor::zeros(&[width]),
            running_var: Tensor::ones(&[width]),
            momentum,
            eps,
        }
    }

    /// Fold one batch's statistics into the running averages:
    /// running ← (1 − momentum)·running + momentum·batch.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let m = self.momentum;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = (1.0 - m) * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = (1.0 - m) * *r + m * b;
        }
    }
}

/// Normalize a batch. Training mode uses batch statistics and updates the
/// running averages (needs N ≥ 2); inference mode uses the running averages.
pub fn batch_norm_forward(
    state: &mut BatchNormState,
    x: &Tensor,
    training: bool,
) -> Result<Tensor> {
    let (n, d) = (x.rows(), x.cols());
    if d != state.gamma.len() {
        return Err(Error::ShapeMismatch {
            op: "batch_norm_forward",
            lhs: x.shape().to_vec(),
            rhs: state.gamma.shape().to_vec(),
        });
    }
    if training {
        // Reuse the taped implementation so train-time semantics have a
        // single source of truth.
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(state.gamma.clone());
        let b = tape.constant(state.beta.clone());
        let (y, stats) = tape.batch_norm(xv, g, b, state.eps)?;
        state.update_running(&stats);
        Ok(tape.value(y).clone())
    } else {
        let mut out = Vec::with_capacity(n * d);
        for i in 0..n {
            for j in 0..d {
                let inv = 1.0 / (state.running_var.data()[j] + state.eps).sqrt();
                let xh = (x.at(i, j) - state.running_mean.data()[j]) * inv;
                out.push(state.gamma.data()[j] * xh + state.beta.data()[j]);
            }
        }
        Ok(Tensor::from_parts(vec![n, d], out))
    }
}

/// Architecture and initialization options for [`init_model`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    /// Hidden widths of the encoder; the last entry is the latent width D.
    pub encoder_widths: Vec<usize>,
    /// Rows of A (the recovered subspace dimension), d < D.
    pub d: usize,
    /// Widths of the decoder including the final output width, which must
    /// equal `input_dim`.
    pub decoder_widths: Vec<usize>,
    /// Activation for hidden layers.
    pub activation: Activation,
    /// Activation for the final decoder layer.
    pub output_activation: Activation,
    pub normalize_latent: bool,
    pub batch_norm: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Keep raw standard-normal weights instead of scaling by 1/√(fan-in).
    pub unscaled_init: bool,
}

impl ModelSpec {
    /// The 3 → (32, 64, 128) → d=2 → (128, 64, 32, 3) architecture with
    /// leaky ReLU (α = 0.2) on every dense layer, no latent normalization,
    /// no batch norm.
    pub fn swiss_roll() -> Self {
        ModelSpec {
            input_dim: 3,
            encoder_widths: vec![32, 64, 128],
            d: 2,
            decoder_widths: vec![128, 64, 32, 3],
            activation: Activation::LeakyRelu(0.2),
            output_activation: Activation::LeakyRelu(0.2),
            normalize_latent: false,
            batch_norm: false,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            unscaled_init: false,
        }
    }

    /// The generic dense configuration: (32, 64, 128) encoder, tanh hidden
    /// activations, linear output, batch norm on hidden layers, and
    /// L2-normalized latents.
    pub fn generic(input_dim: usize, d: usize) -> Self {
        ModelSpec {
            input_dim,
            encoder_widths: vec![32, 64, 128],
            d,
            decoder_widths: vec![128, 64, 32, input_dim],
            activation: Activation::Tanh,
            output_activation: Activation::None,
            normalize_latent: true,
            batch_norm: true,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
            unscaled_init: false,
        }
    }

    pub fn latent_width(&self) -> usize {
        *self.encoder_widths.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(Error::invalid("input dimension must be positive"));
        }
        if self.encoder_widths.is_empty() || self.decoder_widths.is_empty() {
            return Err(Error::invalid("encoder and decoder need at least one layer"));
        }
        if self.encoder_widths.contains(&0) || self.decoder_widths.contains(&0) {
            return Err(Error::invalid("zero-width layer"));
        }
        let big_d = self.latent_width();
        if self.d == 0 || self.d >= big_d {
            return Err(Error::invalid(format!(
                "subspace dimension d={} must satisfy 1 <= d < D={big_d}",
                self.d
            )));
        }
        if *self.decoder_widths.last().unwrap() != self.input_dim {
            return Err(Error::invalid(format!(
                "decoder output width {} must equal input dimension {}",
                self.decoder_widths.last().unwrap(),
                self.input_dim
            )));
        }
        self.activation.validate()?;
        self.output_activation.validate()?;
        if self.batch_norm && (self.bn_eps.is_nan() || self.bn_eps <= 0.0) {
            return Err(Error::invalid("batch-norm epsilon must be positive"));
        }
        Ok(())
    }
}

/// The full autoencoder with its RSR layer. Batch-norm states (when
/// enabled) sit between each hidden layer's linear map and activation; the
/// final decoder layer is never batch-normalized so the output range stays
/// unconstrained.
#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    pub spec: ModelSpec,
    pub encoder: Vec<DenseLayer>,
    pub encoder_bn: Vec<BatchNormState>,
    pub rsr: RsrLayer,
    pub decoder: Vec<DenseLayer>,
    pub decoder_bn: Vec<BatchNormState>,
}

impl AutoencoderModel {
    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        for l in self.encoder.iter().chain(&self.decoder) {
            l.validate()?;
        }
        if self.encoder.last().unwrap().out_width() != self.rsr.big_d() {
            return Err(Error::invalid("encoder output width must match columns of A"));
        }
        if self.decoder.first().unwrap().in_width() != self.rsr.d() {
            return Err(Error::invalid("decoder input width must match rows of A"));
        }
        if !self.rsr.a.all_finite() {
            return Err(Error::invalid("A contains non-finite entries"));
        }
        Ok(())
    }
}

fn init_dense(rng: &mut Rng, in_w: usize, out_w: usize, act: Activation, scaled: bool) -> DenseLayer {
    let scale = if scaled { 1.0 / (in_w as f64).sqrt() } else { 1.0 };
    let weights = Tensor::from_parts(
        vec![out_w, in_w],
        (0..out_w * in_w).map(|_| scale * rng.normal()).collect(),
    );
    let bias = Tensor::from_parts(vec![out_w], (0..out_w).map(|_| scale * rng.normal()).collect());
    DenseLayer {
        weights,
        bias,
        activation: act,
    }
}

/// Build a model with i.i.d. standard-normal parameters, scaled by
/// 1/√(fan-in) unless `ModelSpec` opts out. Deterministic per seed: parameters
/// are drawn in a fixed order (encoder layers, then A, then decoder layers;
/// weights row-major before bias).
pub fn init_model(spec: &ModelSpec, seed: u64) -> Result<AutoencoderModel> {
    spec.validate()?;
    let mut rng = Rng::new(seed);
    let scaled = !spec.unscaled_init;

    let mut encoder = Vec::new();
    let mut in_w = spec.input_dim;
    for &out_w in &spec.encoder_widths {
        encoder.push(init_dense(&mut rng, in_w, out_w, spec.activation, scaled));
        in_w = out_w;
    }

    let big_d = spec.latent_width();
    let a_scale = if scaled { 1.0 / (big_d as f64).sqrt() } else { 1.0 };
    let a = Tensor::from_parts(
        vec![spec.d, big_d],
        (0..spec.d * big_d).map(|_| a_scale * rng.normal()).collect(),
    );

    let mut decoder = Vec::new();
    let n_dec = spec.decoder_widths.len();
    let mut in_w = spec.d;
    for (i, &out_w) in spec.decoder_widths.iter().enumerate() {
        let act = if i + 1 == n_dec {
            spec.output_activation
        } else {
            spec.activation
        };
        decoder.push(init_dense(&mut rng, in_w, out_w, act, scaled));
        in_w = out_w;
    }

    let encoder_bn = if spec.batch_norm {
        spec.encoder_widths
            .iter()
            .map(|&w| BatchNormState::new(w, spec.bn_momentum, spec.bn_eps))
            .collect()
    } else {
        Vec::new()
    };
    let decoder_bn = if spec.batch_norm {
        // All decoder layers except the final reconstruction layer.
        spec.decoder_widths[..n_dec - 1]
            .iter()
            .map(|&w| BatchNormState::new(w, spec.bn_momentum, spec.bn_eps))
            .collect()
    } else {
        Vec::new()
    };

    let model = AutoencoderModel {
        spec: spec.clone(),
        encoder,
        encoder_bn,
        rsr: RsrLayer { a },
        decoder,
        decoder_bn,
    };
    model.validate()?;
    Ok(model)
}

/// The three stage outputs of a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Encoder output Z (N×D).
    pub z: Tensor,
    /// Decoder input Z̃ (N×d): Z·Aᵀ, row-normalized when the model says so.
    pub z_tilde: Tensor,
    /// Reconstruction X̃ (N×M).
    pub x_hat: Tensor,
}

fn check_layer_finite(t: &Tensor, layer: usize, context: &'static str) -> Result<()> {
    if !t.all_finite() {
        return Err(Error::NonFinite {
            context,
            node: layer,
        });
    }
    Ok(())
}

fn run_dense_stack(
    layers: &[DenseLayer],
    bn: &mut [BatchNormState],
    x: &Tensor,
    training: bool,
    context: &'static str,
) -> Result<Tensor> {
    let mut h = x.clone();
    for (i, layer) in layers.iter().enumerate() {
        // Linear → batch norm (if present for this layer) → activation.
        let mut pre = h.matmul(&layer.weights.transpose())?;
        for r in 0..pre.rows() {
            for c in 0..pre.cols() {
                *pre.at_mut(r, c) += layer.bias.data()[c];
            }
        }
        if let Some(state) = bn.get_mut(i) {
            pre = batch_norm_forward(state, &pre, training)?;
        }
        h = pre.map(|v| layer.activation.value(v));
        check_layer_finite(&h, i, context)?;
    }
    Ok(h)
}

/// Inference-mode forward pass: batch norm uses running statistics. Returns
/// (Z, Z̃, X̃). Errors name the offending layer if activations go non-finite.
pub fn model_forward(model: &AutoencoderModel, x: &Tensor) -> Result<ForwardOutputs> {
    model_forward_inner(&mut model.clone(), x, false)
}

/// Training-mode plain forward on a mutable model: batch norm uses batch
/// statistics and running averages are updated.
pub fn model_forward_train(model: &mut AutoencoderModel, x: &Tensor) -> Result<ForwardOutputs> {
    model_forward_inner(model, x, true)
}

/// Encoder-only forward in training mode (batch statistics) WITHOUT
/// touching running averages — used to recompute latents between the
/// sub-steps of a training step.
pub fn encoder_forward_detached(model: &AutoencoderModel, x: &Tensor) -> Result<Tensor> {
    let mut scratch = model.encoder_bn.clone();
    run_dense_stack(
        &model.encoder,
        &mut scratch,
        x,
        !model.encoder_bn.is_empty(),
        "encoder_layer",
    )
}

fn model_forward_inner(
    model: &mut AutoencoderModel,
    x: &Tensor,
    training: bool,
) -> Result<ForwardOutputs> {
    if x.cols() != model.input_dim() {
        return Err(Error::ShapeMismatch {
            op: "model_forward",
            lhs: x.shape().to_vec(),
            rhs: vec![model.input_dim()],
        });
    }
    let z = run_dense_stack(
        &model.encoder,
        &mut model.encoder_bn,
        x,
        training,
        "encoder_layer",
    )?;
    let mut z_tilde = z.matmul(&model.rsr.a.transpose())?;
    if model.spec.normalize_latent {
        z_tilde = plain_row_normalize(&z_tilde, NORMALIZE_MIN_NORM);
    }
    let x_hat = run_dense_stack(
        &model.decoder,
        &mut model.decoder_bn,
        &z_tilde,
        training,
        "decoder_layer",
    )?;
    Ok(ForwardOutputs { z, z_tilde, x_hat })
}

fn plain_row_normalize(x: &Tensor, min_norm: f64) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        let row = x.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < min_norm {
            out.extend_from_slice(row);
        } else {
            out.extend(row.iter().map(|v| v / norm));
        }
    }
    Tensor::from_parts(vec![n, d], out)
}

/// Tape handles for every trainable parameter of a model.
pub struct TapedParams {
    pub enc_w: Vec<Var>,
    pub enc_b: Vec<Var>,
    /// (γ, β) per batch-normalized encoder layer.
    pub enc_bn: Vec<(Var, Var)>,
    pub a: Var,
    pub dec_w: Vec<Var>,
    pub dec_b: Vec<Var>,
    pub dec_bn: Vec<(Var, Var)>,
}

impl TapedParams {
    /// Encoder/decoder parameter handles (everything except A), used to
    /// assert which sub-steps may touch them.
    pub fn theta_phi(&self) -> Vec<Var> {
        let mut v = Vec::new();
        v.extend(&self.enc_w);
        v.extend(&self.enc_b);
        for (g, b) in &self.enc_bn {
            v.push(*g);
            v.push(*b);
        }
        v.extend(&self.dec_w);
        v.extend(&self.dec_b);
        for (g, b) in &self.dec_bn {
            v.push(*g);
            v.push(*b);
        }
        v
    }
}

/// Record all model parameters as tracked leaves on a tape.
pub fn record_params(model: &AutoencoderModel, tape: &mut Tape) -> TapedParams {
    TapedParams {
        enc_w: model.encoder.iter().map(|l| tape.leaf(l.weights.clone())).collect(),
        enc_b: model.encoder.iter().map(|l| tape.leaf(l.bias.clone())).collect(),
        enc_bn: model
            .encoder_bn
            .iter()
            .map(|s| (tape.leaf(s.gamma.clone()), tape.leaf(s.beta.clone())))
            .collect(),
        a: tape.leaf(model.rsr.a.clone()),
        dec_w: model.decoder.iter().map(|l| tape.leaf(l.weights.clone())).collect(),
        dec_b: model.decoder.iter().map(|l| tape.leaf(l.bias.clone())).collect(),
        dec_bn: model
            .decoder_bn
            .iter()
            .map(|s| (tape.leaf(s.gamma.clone()), tape.leaf(s.beta.clone())))
            .collect(),
    }
}

/// Stage outputs of a taped forward pass plus the batch statistics each
/// batch-norm layer produced (for the caller to fold into running averages).
pub struct TapedForward {
    pub z: Var,
    pub z_tilde: Var,
    pub x_hat: Var,
    pub enc_stats: Vec<BatchStats>,
    pub dec_stats: Vec<BatchStats>,
}

#[allow(clippy::too_many_arguments)]
fn taped_dense_stack(
    tape: &mut Tape,
    layers: &[DenseLayer],
    weights: &[Var],
    biases: &[Var],
    bn: &[(Var, Var)],
    bn_eps: f64,
    mut h: Var,
    stats_out: &mut Vec<BatchStats>,
) -> Result<Var> {
    for i in 0..layers.len() {
        let wt = tape.transpose(weights[i])?;
        let lin = tape.matmul(h, wt)?;
        let mut pre = tape.bias_add(lin, biases[i])?;
        if let Some(&(g, b)) = bn.get(i) {
            let (y, stats) = tape.batch_norm(pre, g, b, bn_eps)?;
            stats_out.push(stats);
            pre = y;
        }
        h = tape.activation(pre, layers[i].activation)?;
    }
    Ok(h)
}

/// Encoder parameters recorded as tape leaves plus the latent they produce.
pub(crate) struct TapedEncoderPass {
    pub w: Vec<Var>,
    pub b: Vec<Var>,
    pub bn: Vec<(Var, Var)>,
    pub z: Var,
}

/// Training-mode encoder-only forward recorded on a tape. Batch-norm batch
/// statistics are discarded: callers that train through this pass leave the
/// running averages to the reconstruction step.
pub(crate) fn taped_encoder_forward(
    tape: &mut Tape,
    model: &AutoencoderModel,
    x: Var,
) -> Result<TapedEncoderPass> {
    let w: Vec<Var> = model.encoder.iter().map(|l| tape.leaf(l.weights.clone())).collect();
    let b: Vec<Var> = model.encoder.iter().map(|l| tape.leaf(l.bias.clone())).collect();
    let bn: Vec<(Var, Var)> = model
        .encoder_bn
        .iter()
        .map(|s| (tape.leaf(s.gamma.clone()), tape.leaf(s.beta.clone())))
        .collect();
    let mut stats = Vec::new();
    let z = taped_dense_stack(tape, &model.encoder, &w, &b, &bn, model.spec.bn_eps, x, &mut stats)?;
    Ok(TapedEncoderPass { w, b, bn, z })
}

/// Training-mode forward recorded on a tape: batch norm uses batch
/// statistics (returned, not applied). `x` should be a tape constant.
pub fn taped_model_forward(
    tape: &mut Tape,
    model: &AutoencoderModel,
    params: &TapedParams,
    x: Var,
) -> Result<TapedForward> {
    let mut enc_stats = Vec::new();
    let z = taped_dense_stack(
        tape,
        &model.encoder,
        &params.enc_w,
        &params.enc_b,
        &params.enc_bn,
        model.spec.bn_eps,
        x,
        &mut enc_stats,
    )?;
    let at = tape.transpose(params.a)?;
    let mut z_tilde = tape.matmul(z, at)?;
    if model.spec.normalize_latent {
        z_tilde = tape.row_normalize(z_tilde, NORMALIZE_MIN_NORM)?;
    }
    let mut dec_stats = Vec::new();
    let x_hat = taped_dense_stack(
        tape,
        &model.decoder,
        &params.dec_w,
        &params.dec_b,
        &params.dec_bn,
        model.spec.bn_eps,
        z_tilde,
        &mut dec_stats,
    )?;
    Ok(TapedForward {
        z,
        z_tilde,
        x_hat,
        enc_stats,
        dec_stats,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    spec: ModelSpec,
}

fn write_len_prefixed_json<W: Write, T: Serialize>(w: &mut W, value: &T) -> Result<()> {
    let json = serde_json::to_vec(value).map_err(|e| Error::Format(e.to_string()))?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    Ok(())
}

fn read_len_prefixed_json<R: Read, T: for<'de> Deserialize<'de>>(r: &mut R) -> Result<T> {
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b8)?;
    let len = u64::from_le_bytes(b8) as usize;
    if len > 1 << 24 {
        return Err(Error::Format(format!("implausible header length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    serde_json::from_slice(&buf).map_err(|e| Error::Format(e.to_string()))
}

/// Save a model: magic, version, JSON header with the architecture spec,
/// then all tensors in a fixed order (encoder w/b, encoder BN γ/β/mean/var,
/// A, decoder w/b, decoder BN).
pub fn save_model(model: &AutoencoderModel, path: &Path) -> Result<()> {
    let mut w = Vec::new();
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    write_len_prefixed_json(&mut w, &CheckpointHeader { spec: model.spec.clone() })?;
    for l in &model.encoder {
        l.weights.write_to(&mut w)?;
        l.bias.write_to(&mut w)?;
    }
    for s in &model.encoder_bn {
        s.gamma.write_to(&mut w)?;
        s.beta.write_to(&mut w)?;
        s.running_mean.write_to(&mut w)?;
        s.running_var.write_to(&mut w)?;
    }
    model.rsr.a.write_to(&mut w)?;
    for l in &model.decoder {
        l.weights.write_to(&mut w)?;
        l.bias.write_to(&mut w)?;
    }
    for s in &model.decoder_bn {
        s.gamma.write_to(&mut w)?;
        s.beta.write_to(&mut w)?;
        s.running_mean.write_to(&mut w)?;
        s.running_var.write_to(&mut w)?;
    }
    fs::write(path, w)?;
    Ok(())
}

/// Load a model checkpoint written by [`save_model`].
pub fn load_model(path: &Path) -> Result<AutoencoderModel> {
    let bytes = fs::read(path)?;
    let mut r = bytes.as_slice();
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::Format(format!(
            "bad model magic {magic:?}, expected {MODEL_MAGIC:?}"
        )));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4)?;
    let version = u32::from_le_bytes(b4);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let header: CheckpointHeader = read_len_prefixed_json(&mut r)?;
    let spec = header.spec;
    spec.validate()?;

    // Rebuild the skeleton from the stored `ModelSpec` so shapes are known, then overwrite
    // every tensor from the stream in the same order save_model wrote them.
    let mut model = init_model(&spec, 0)?;
    for l in &mut model.encoder {
        l.weights = Tensor::read_from(&mut r)?;
        l.bias = Tensor::read_from(&mut r)?;
    }
    for s in &mut model.encoder_bn {
        s.gamma = Tensor::read_from(&mut r)?;
        s.beta = Tensor::read_from(&mut r)?;
        s.running_mean = Tensor::read_from(&mut r)?;
        s.running_var = Tensor::read_from(&mut r)?;
    }
    model.rsr.a = Tensor::read_from(&mut r)?;
    for l in &mut model.decoder {
        l.weights = Tensor::read_from(&mut r)?;
        l.bias = Tensor::read_from(&mut r)?;
    }
    for s in &mut model.decoder_bn {
        s.gamma = Tensor::read_from(&mut r)?;
        s.beta = Tensor::read_from(&mut r)?;
        s.running_mean = Tensor::read_from(&mut r)?;
        s.running_var = Tensor::read_from(&mut r)?;
    }
    model.validate()?;
    Ok(model)
}
