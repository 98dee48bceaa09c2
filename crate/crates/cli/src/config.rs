//! Experiment configuration: a flat key = value text format with dotted
//! section prefixes (`model.d = 2`), parsed into a validated config.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rsrkit_core::linear::FmsConfig;
use rsrkit_core::net::{Activation, ModelSpec};
use rsrkit_core::optim::{TrainConfig, TrainMode};

/// Failures are split into the two nonzero exit classes: problems with what
/// the user supplied (exit 2) and numeric failures during a run (exit 3).
#[derive(Debug)]
pub enum CliError {
    Config(String),
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Numeric(msg) => write!(f, "numeric failure: {msg}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Map a core error onto an exit class: divergence and rank problems are
/// numeric failures, everything else traces back to the supplied inputs.
pub fn classify(e: rsrkit_core::Error) -> CliError {
    use rsrkit_core::Error as E;
    match &e {
        E::Diverged(_) | E::NonFinite { .. } | E::RankDeficient { .. } => {
            CliError::Numeric(e.to_string())
        }
        _ => CliError::Config(e.to_string()),
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Which detector to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Alternating minimization of the autoencoder with subspace layer.
    Rsrae,
    /// Joint minimization of the λ-weighted combined loss.
    RsraePlus,
    /// Plain autoencoder, quadratic reconstruction loss.
    Ae,
    /// Plain autoencoder, absolute (p = 1) reconstruction loss.
    Ae1,
    /// Principal component subspace + residual scores.
    Pca,
    /// Robust median-subspace solver + residual scores.
    Fms,
    /// The same solver on spherized data.
    Sfms,
}

impl Mode {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "rsrae" => Mode::Rsrae,
            "rsrae_plus" => Mode::RsraePlus,
            "ae" => Mode::Ae,
            "ae1" => Mode::Ae1,
            "pca" => Mode::Pca,
            "fms" => Mode::Fms,
            "sfms" => Mode::Sfms,
            other => {
                return Err(config_err(format!(
                    "mode: unknown mode '{other}' (expected rsrae, rsrae_plus, ae, ae1, pca, fms, or sfms)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Mode::Rsrae => "rsrae",
            Mode::RsraePlus => "rsrae_plus",
            Mode::Ae => "ae",
            Mode::Ae1 => "ae1",
            Mode::Pca => "pca",
            Mode::Fms => "fms",
            Mode::Sfms => "sfms",
        }
    }

    /// Modes that train the autoencoder (as opposed to linear solvers).
    pub fn is_neural(self) -> bool {
        matches!(self, Mode::Rsrae | Mode::RsraePlus | Mode::Ae | Mode::Ae1)
    }
}

/// Where the data comes from; exactly one source.
#[derive(Debug, Clone)]
pub enum DatasetSpec {
    SwissRoll {
        n_inliers: usize,
        outlier_ratio: f64,
        sigma: f64,
    },
    Csv { path: PathBuf, labeled: bool },
}

/// Architecture settings; the input dimension is taken from the data at
/// run time, so the final decoder layer is appended then.
#[derive(Debug, Clone)]
pub struct ModelSettings {
    pub encoder_widths: Vec<usize>,
    pub d: usize,
    /// Hidden decoder widths; the output layer (input_dim) is implicit.
    pub decoder_widths: Vec<usize>,
    pub activation: Activation,
    pub output_activation: Activation,
    pub batch_norm: bool,
    pub normalize_latent: bool,
    pub bn_momentum: f64,
    pub bn_eps: f64,
    /// Initialize weights i.i.d. standard normal instead of scaling by
    /// 1/√(fan-in).
    pub unscaled_init: bool,
}

impl ModelSettings {
    pub fn to_model_spec(&self, input_dim: usize) -> ModelSpec {
        let mut decoder_widths = self.decoder_widths.clone();
        decoder_widths.push(input_dim);
        ModelSpec {
            input_dim,
            encoder_widths: self.encoder_widths.clone(),
            d: self.d,
            decoder_widths,
            activation: self.activation,
            output_activation: self.output_activation,
            normalize_latent: self.normalize_latent,
            batch_norm: self.batch_norm,
            bn_momentum: self.bn_momentum,
            bn_eps: self.bn_eps,
            unscaled_init: self.unscaled_init,
        }
    }
}

/// A fully parsed experiment description.
#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub model: ModelSettings,
    /// Batch size 0 means full batch (resolved against N at run time);
    /// the seed field is overwritten per run from `seeds`.
    pub train: TrainConfig,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    pub fms: FmsConfig,
}

/// Key → (value, line) with duplicate detection.
struct KeyMap {
    entries: BTreeMap<String, (String, usize)>,
}

impl KeyMap {
    fn parse(text: &str) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, (String, usize)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(config_err(format!(
                    "line {lineno}: expected 'key = value', got '{line}'"
                )));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if key.is_empty() {
                return Err(config_err(format!("line {lineno}: empty key")));
            }
            if let Some((_, first)) = entries.get(&key) {
                return Err(config_err(format!(
                    "duplicate key '{key}' (lines {first} and {lineno})"
                )));
            }
            entries.insert(key, (value, lineno));
        }
        Ok(KeyMap { entries })
    }

    fn take(&mut self, key: &str) -> Option<(String, usize)> {
        self.entries.remove(key)
    }

    fn take_parsed<T, F>(&mut self, key: &str, default: T, parse: F) -> Result<T, CliError>
    where
        F: FnOnce(&str) -> Result<T, String>,
    {
        match self.take(key) {
            None => Ok(default),
            Some((value, lineno)) => parse(&value)
                .map_err(|msg| config_err(format!("line {lineno}: {key}: {msg}"))),
        }
    }

    fn finish(self) -> Result<(), CliError> {
        if let Some((key, (_, lineno))) = self.entries.into_iter().next() {
            return Err(config_err(format!("line {lineno}: unknown key '{key}'")));
        }
        Ok(())
    }
}

fn parse_scalar<T: std::str::FromStr>(s: &str) -> Result<T, String>
where
    T::Err: fmt::Display,
{
    s.parse::<T>().map_err(|e| format!("invalid value '{s}': {e}"))
}

fn parse_bool(s: &str) -> Result<bool, String> {
    match s {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("expected true or false, got '{other}'")),
    }
}

fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>, String>
where
    T::Err: fmt::Display,
{
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|part| parse_scalar::<T>(part.trim()))
        .collect()
}

fn parse_activation(s: &str) -> Result<Activation, String> {
    match s.split_once(':') {
        None => match s {
            "none" => Ok(Activation::None),
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            "leaky_relu" => Err("leaky_relu needs a slope, e.g. leaky_relu:0.2".into()),
            other => Err(format!(
                "unknown activation '{other}' (expected none, relu, tanh, or leaky_relu:<slope>)"
            )),
        },
        Some(("leaky_relu", alpha)) => {
            let a: f64 = parse_scalar(alpha)?;
            if !(a > 0.0 && a < 1.0) {
                return Err(format!("leaky_relu slope must lie in (0, 1), got {a}"));
            }
            Ok(Activation::LeakyRelu(a))
        }
        Some((other, _)) => Err(format!("unknown activation '{other}'")),
    }
}

/// Parse a config file's text. Unknown keys, duplicates, and mixed dataset
/// sources are rejected with line-level messages.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let mut keys = KeyMap::parse(text)?;

    let mode = keys.take_parsed("mode", Mode::Rsrae, |s| {
        Mode::parse(s).map_err(|e| match e {
            CliError::Config(m) => m,
            CliError::Numeric(m) => m,
        })
    })?;

    // ---- data.* ----
    let source = keys.take_parsed("data.source", "swiss_roll".to_string(), |s| {
        Ok(s.to_string())
    })?;
    let dataset = match source.as_str() {
        "swiss_roll" => {
            if let Some((_, lineno)) = keys.take("data.path") {
                return Err(config_err(format!(
                    "line {lineno}: data.path: only valid with data.source = csv"
                )));
            }
            DatasetSpec::SwissRoll {
                n_inliers: keys.take_parsed("data.n_inliers", 1000, parse_scalar)?,
                outlier_ratio: keys.take_parsed("data.outlier_ratio", 0.5, parse_scalar)?,
                sigma: keys.take_parsed("data.sigma", 2.0, parse_scalar)?,
            }
        }
        "csv" => {
            for bad in ["data.n_inliers", "data.outlier_ratio", "data.sigma"] {
                if let Some((_, lineno)) = keys.take(bad) {
                    return Err(config_err(format!(
                        "line {lineno}: {bad}: only valid with data.source = swiss_roll"
                    )));
                }
            }
            let Some((path, _)) = keys.take("data.path") else {
                return Err(config_err("data.path is required with data.source = csv"));
            };
            DatasetSpec::Csv {
                path: PathBuf::from(path),
                labeled: keys.take_parsed("data.labeled", true, parse_bool)?,
            }
        }
        other => {
            return Err(config_err(format!(
                "data.source: unknown source '{other}' (expected swiss_roll or csv)"
            )))
        }
    };

    // ---- model.* ----
    let model = ModelSettings {
        encoder_widths: keys.take_parsed("model.encoder_widths", vec![32, 64, 128], parse_list)?,
        d: keys.take_parsed("model.d", 2, parse_scalar)?,
        decoder_widths: keys.take_parsed("model.decoder_widths", vec![128, 64, 32], parse_list)?,
        activation: keys.take_parsed(
            "model.activation",
            Activation::LeakyRelu(0.2),
            parse_activation,
        )?,
        output_activation: keys.take_parsed(
            "model.output_activation",
            Activation::LeakyRelu(0.2),
            parse_activation,
        )?,
        batch_norm: keys.take_parsed("model.batch_norm", false, parse_bool)?,
        normalize_latent: keys.take_parsed("model.normalize_latent", false, parse_bool)?,
        bn_momentum: keys.take_parsed("model.bn_momentum", 0.1, parse_scalar)?,
        bn_eps: keys.take_parsed("model.bn_eps", 1e-5, parse_scalar)?,
        unscaled_init: keys.take_parsed("model.unscaled_init", false, parse_bool)?,
    };

    // ---- train.* ----
    let mut train = TrainConfig::new(
        keys.take_parsed("train.epochs", 200, parse_scalar)?,
        keys.take_parsed("train.batch_size", 128, parse_scalar)?,
        keys.take_parsed("train.learning_rate", 0.00025, parse_scalar)?,
        if mode == Mode::RsraePlus {
            TrainMode::RsraePlus
        } else {
            TrainMode::Rsrae
        },
    );
    train.lambda1 = keys.take_parsed("train.lambda1", 0.1, parse_scalar)?;
    train.lambda2 = keys.take_parsed("train.lambda2", 0.1, parse_scalar)?;
    train.eps_ae = keys.take_parsed("train.eps_ae", 0.0, parse_scalar)?;
    train.eps_rsr1 = keys.take_parsed("train.eps_rsr1", 0.0, parse_scalar)?;
    train.eps_rsr2 = keys.take_parsed("train.eps_rsr2", 0.0, parse_scalar)?;
    train.shuffle = keys.take_parsed("train.shuffle", true, parse_bool)?;
    train.separate_rsr_adam =
        keys.take_parsed("train.separate_rsr_adam", false, parse_bool)?;
    train.rsr_updates_encoder =
        keys.take_parsed("train.rsr_updates_encoder", false, parse_bool)?;

    // ---- fms.* ----
    let fms_defaults = FmsConfig::default();
    let fms = FmsConfig {
        delta: keys.take_parsed("fms.delta", fms_defaults.delta, parse_scalar)?,
        max_iters: keys.take_parsed("fms.max_iters", fms_defaults.max_iters, parse_scalar)?,
        tol: keys.take_parsed("fms.tol", fms_defaults.tol, parse_scalar)?,
    };

    let out_dir = PathBuf::from(keys.take_parsed("out", "out".to_string(), |s| Ok(s.to_string()))?);
    let seeds: Vec<u64> = keys.take_parsed("seeds", vec![0], parse_list)?;

    keys.finish()?;

    let config = ExperimentConfig {
        dataset,
        model,
        train,
        mode,
        out_dir,
        seeds,
        fms,
    };
    config.validate()?;
    Ok(config)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| config_err(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        if self.seeds.is_empty() {
            return Err(config_err("seeds: at least one seed is required"));
        }
        if self.model.d == 0 {
            return Err(config_err("model.d: must be >= 1"));
        }
        if self.model.encoder_widths.is_empty() || self.model.decoder_widths.is_empty() {
            return Err(config_err(
                "model.encoder_widths / model.decoder_widths: must be non-empty",
            ));
        }
        let enc_out = *self.model.encoder_widths.last().unwrap();
        if self.model.d >= enc_out {
            return Err(config_err(format!(
                "model.d: {} must be smaller than the encoder output width {enc_out}",
                self.model.d
            )));
        }
        if self.train.epochs == 0 {
            return Err(config_err("train.epochs: must be >= 1"));
        }
        if self.train.learning_rate.is_nan() || self.train.learning_rate <= 0.0 {
            return Err(config_err("train.learning_rate: must be positive"));
        }
        if self.train.lambda1 < 0.0 || self.train.lambda2 < 0.0 {
            return Err(config_err("train.lambda1 / train.lambda2: must be nonnegative"));
        }
        if let DatasetSpec::SwissRoll {
            n_inliers,
            outlier_ratio,
            sigma,
        } = &self.dataset
        {
            if *n_inliers == 0 {
                return Err(config_err("data.n_inliers: must be >= 1"));
            }
            if !(*outlier_ratio > 0.0 && *outlier_ratio < 1.0) {
                return Err(config_err(format!(
                    "data.outlier_ratio: must lie strictly between 0 and 1, got {outlier_ratio}"
                )));
            }
            if sigma.is_nan() || *sigma <= 0.0 {
                return Err(config_err("data.sigma: must be positive"));
            }
        }
        if self.fms.delta.is_nan() || self.fms.delta <= 0.0 {
            return Err(config_err("fms.delta: must be positive"));
        }
        if self.fms.max_iters == 0 {
            return Err(config_err("fms.max_iters: must be >= 1"));
        }
        Ok(())
    }

    /// Apply command-line overrides on top of the parsed file.
    pub fn apply_overrides(
        &mut self,
        out: Option<PathBuf>,
        seeds: &[u64],
        full_scale: bool,
    ) -> Result<(), CliError> {
        if let Some(out) = out {
            self.out_dir = out;
        }
        if !seeds.is_empty() {
            self.seeds = seeds.to_vec();
        }
        if full_scale {
            self.train.epochs = 10_000;
        }
        self.validate()
    }
}

/// One sweepable hyperparameter axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    D,
    LearningRate,
    /// Grid over (λ1, λ2) pairs; requires the joint training mode.
    Lambda,
    OutlierRatio,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Result<Self, CliError> {
        Ok(match s {
            "d" => SweepAxis::D,
            "learning_rate" => SweepAxis::LearningRate,
            "lambda" => SweepAxis::Lambda,
            "outlier_ratio" => SweepAxis::OutlierRatio,
            other => {
                return Err(config_err(format!(
                    "axis: unknown axis '{other}' (expected d, learning_rate, lambda, or outlier_ratio)"
                )))
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            SweepAxis::D => "d",
            SweepAxis::LearningRate => "learning_rate",
            SweepAxis::Lambda => "lambda",
            SweepAxis::OutlierRatio => "outlier_ratio",
        }
    }
}
