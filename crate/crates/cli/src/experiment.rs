//! Experiment execution: build the dataset, run the chosen detector per
//! seed, and write artifacts (score CSVs, checkpoints, loss/trace curves,
//! a pooled score histogram, and an aggregated metrics JSON).

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use rsrkit_core::data::{self, fmt_f64, LabeledDataset};
use rsrkit_core::linear;
use rsrkit_core::losses;
use rsrkit_core::metrics;
use rsrkit_core::net;
use rsrkit_core::optim::{self, TrainMode};
use rsrkit_core::tensor::Tensor;
use rsrkit_core::Error as CoreError;

use crate::config::{classify, CliError, DatasetSpec, ExperimentConfig, Mode, SweepAxis};

/// Aggregate numbers for printing after a successful run.
#[derive(Debug)]
pub struct RunSummary {
    pub mean_auc: Option<f64>,
    pub sd_auc: Option<f64>,
    pub mean_ap: Option<f64>,
    pub sd_ap: Option<f64>,
    pub seeds_run: usize,
    pub metrics_path: PathBuf,
}

/// Per-seed block of the metrics JSON. File fields are names relative to
/// the output directory; absent fields are omitted from the JSON.
#[derive(Debug, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub auc: Option<f64>,
    pub ap: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub n_outliers: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub score_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub loss_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub checkpoint: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub trace_file: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub error: Option<String>,
}

/// Top-level schema of metrics.json. `manifest` lists every artifact file
/// the run wrote (relative names); `partial` marks runs where a seed failed.
#[derive(Debug, Serialize, Deserialize)]
pub struct ExperimentMetrics {
    pub mode: String,
    pub seeds: Vec<u64>,
    pub mean_auc: Option<f64>,
    pub sd_auc: Option<f64>,
    pub mean_ap: Option<f64>,
    pub sd_ap: Option<f64>,
    pub per_seed: Vec<SeedMetrics>,
    pub manifest: Vec<String>,
    pub partial: bool,
}

/// Saved linear detector: the centering offset and an orthonormal basis
/// (rows = ambient coordinates, columns = basis vectors).
#[derive(Debug, Serialize, Deserialize)]
pub struct SubspaceCheckpoint {
    pub kind: String,
    pub mode: String,
    pub center: Vec<f64>,
    pub basis: Vec<Vec<f64>>,
}

/// Mean and sample standard deviation (n − 1 denominator; 0 when n < 2).
/// Exposed so reported aggregates can be recomputed exactly from the
/// per-seed score files.
pub fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, var.sqrt())
}

/// Subtract one row vector from every row of a sample matrix.
fn subtract_row(x: &Tensor, row: &[f64]) -> Result<Tensor, CoreError> {
    if x.rank() != 2 || row.len() != x.cols() {
        return Err(CoreError::ShapeMismatch {
            op: "center",
            lhs: x.shape().to_vec(),
            rhs: vec![row.len()],
        });
    }
    let m = x.cols();
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v -= row[i % m];
    }
    Ok(out)
}

fn column_means(x: &Tensor) -> Vec<f64> {
    let (n, m) = (x.rows(), x.cols());
    let mut means = vec![0.0; m];
    for i in 0..n {
        for (j, mean) in means.iter_mut().enumerate() {
            *mean += x.at(i, j);
        }
    }
    for mean in &mut means {
        *mean /= n as f64;
    }
    means
}

/// Assemble the dataset for one seed. Synthetic sources derive three
/// independent streams from the run seed (inliers, outliers, shuffle);
/// CSV data is reloaded as-is, so only the detector varies with the seed.
fn build_dataset(spec: &DatasetSpec, seed: u64) -> Result<LabeledDataset, CoreError> {
    match spec {
        DatasetSpec::SwissRoll {
            n_inliers,
            outlier_ratio,
            sigma,
        } => {
            let corruption = data::CorruptionSpec::new(*outlier_ratio, *n_inliers)?;
            let base = seed.wrapping_mul(3);
            let inliers = data::swiss_roll(*n_inliers, base)?;
            let outliers = data::gaussian_outliers(
                corruption.outlier_count(),
                *sigma,
                base.wrapping_add(1),
            )?;
            data::mix(&inliers, &outliers, base.wrapping_add(2))
        }
        DatasetSpec::Csv { path, labeled } => data::load_csv(path, *labeled),
    }
}

struct SeedOutcome {
    metrics: SeedMetrics,
    scores: Vec<f64>,
    labels: Option<Vec<u8>>,
    files: Vec<String>,
}

fn run_seed(
    config: &ExperimentConfig,
    seed: u64,
    out_dir: &Path,
) -> Result<SeedOutcome, CoreError> {
    let ds = build_dataset(&config.dataset, seed)?;
    let mut files = Vec::new();

    let (scores, loss_file, checkpoint, trace_file) = if config.mode.is_neural() {
        let spec = config.model.to_model_spec(ds.dim());
        let mut model = net::init_model(&spec, seed)?;
        let mut tc = config.train.clone();
        tc.seed = seed;
        if tc.batch_size == 0 {
            tc.batch_size = ds.n();
        }
        tc.mode = match config.mode {
            Mode::RsraePlus => TrainMode::RsraePlus,
            _ => TrainMode::Rsrae,
        };
        let history = match config.mode {
            Mode::Rsrae => optim::train_rsrae(&mut model, &ds.x, &tc)?,
            Mode::RsraePlus => optim::train_rsrae_plus(&mut model, &ds.x, &tc)?,
            Mode::Ae => optim::train_plain_ae(&mut model, &ds.x, &tc, 2)?,
            Mode::Ae1 => optim::train_plain_ae(&mut model, &ds.x, &tc, 1)?,
            _ => unreachable!("linear mode in neural branch"),
        };
        let fwd = net::model_forward(&model, &ds.x)?;
        let scores = losses::anomaly_scores(&ds.x, &fwd.x_hat)?;

        let checkpoint = format!("model_seed{seed}.bin");
        net::save_model(&model, &out_dir.join(&checkpoint))?;
        let loss_file = format!("loss_seed{seed}.csv");
        optim::save_loss_history(&out_dir.join(&loss_file), &history)?;
        (scores, Some(loss_file), checkpoint, None)
    } else {
        let d = config.model.d;
        let (center, subspace, trace) = match config.mode {
            Mode::Pca => {
                let center = column_means(&ds.x);
                let centered = subtract_row(&ds.x, &center)?;
                (center, linear::pca_subspace(&centered, d)?, None)
            }
            Mode::Fms => {
                let center = linear::column_medians(&ds.x)?;
                let centered = subtract_row(&ds.x, &center)?;
                let trace = linear::fms_with_trace(&centered, d, &config.fms)?;
                (center, trace.final_subspace().clone(), Some(trace))
            }
            Mode::Sfms => {
                let center = linear::column_medians(&ds.x)?;
                let (spherized, _dropped) = linear::spherical_normalize(&ds.x)?;
                let trace = linear::fms_with_trace(&spherized, d, &config.fms)?;
                (center, trace.final_subspace().clone(), Some(trace))
            }
            _ => unreachable!("neural mode in linear branch"),
        };
        let centered = subtract_row(&ds.x, &center)?;
        let scores = subspace.residual_norms(&centered)?;

        let checkpoint = format!("subspace_seed{seed}.json");
        let basis = subspace.basis();
        let ck = SubspaceCheckpoint {
            kind: "subspace".to_string(),
            mode: config.mode.name().to_string(),
            center,
            basis: (0..basis.rows()).map(|i| basis.row(i).to_vec()).collect(),
        };
        let json = serde_json::to_string_pretty(&ck)
            .map_err(|e| CoreError::Format(format!("checkpoint serialization: {e}")))?;
        fs::write(out_dir.join(&checkpoint), json + "\n")?;

        let trace_file = match trace {
            Some(trace) => {
                let name = format!("trace_seed{seed}.csv");
                let mut text = String::from("iteration,smoothed_energy\n");
                for (i, e) in trace.smoothed_energies.iter().enumerate() {
                    text.push_str(&format!("{i},{}\n", fmt_f64(*e)));
                }
                fs::write(out_dir.join(&name), text)?;
                Some(name)
            }
            None => None,
        };
        (scores, None, checkpoint, trace_file)
    };

    let score_file = format!("scores_seed{seed}.csv");
    data::save_scores_raw(&out_dir.join(&score_file), &scores, ds.labels.as_deref())?;

    let (auc, ap, n_outliers) = match &ds.labels {
        Some(labels) => (
            Some(metrics::roc_auc(&scores, labels)?),
            Some(metrics::average_precision(&scores, labels)?),
            Some(labels.iter().filter(|&&l| l == 1).count()),
        ),
        None => (None, None, None),
    };

    files.push(score_file.clone());
    files.extend(loss_file.clone());
    files.push(checkpoint.clone());
    files.extend(trace_file.clone());

    Ok(SeedOutcome {
        metrics: SeedMetrics {
            seed,
            auc,
            ap,
            n: Some(ds.n()),
            n_outliers,
            score_file: Some(score_file),
            loss_file,
            checkpoint: Some(checkpoint),
            trace_file,
            error: None,
        },
        scores,
        labels: ds.labels,
        files,
    })
}

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::Config(format!("cannot write {}: {e}", path.display())))
}

/// Run every seed, writing artifacts into `config.out_dir`. A seed that
/// fails numerically stops the run: the metrics JSON is still written with
/// `partial: true` and the seed's error message, and the failure is
/// returned so the process exits nonzero.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunSummary, CliError> {
    config.validate()?;
    fs::create_dir_all(&config.out_dir).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            config.out_dir.display()
        ))
    })?;

    let mut per_seed = Vec::new();
    let mut manifest = Vec::new();
    let mut pooled: Vec<(f64, Option<u8>)> = Vec::new();
    let mut aucs = Vec::new();
    let mut aps = Vec::new();
    let mut failure: Option<CliError> = None;

    for &seed in &config.seeds {
        match run_seed(config, seed, &config.out_dir) {
            Ok(outcome) => {
                if let Some(auc) = outcome.metrics.auc {
                    aucs.push(auc);
                }
                if let Some(ap) = outcome.metrics.ap {
                    aps.push(ap);
                }
                for (i, &s) in outcome.scores.iter().enumerate() {
                    pooled.push((s, outcome.labels.as_ref().map(|l| l[i])));
                }
                manifest.extend(outcome.files);
                per_seed.push(outcome.metrics);
            }
            Err(e) => {
                per_seed.push(SeedMetrics {
                    seed,
                    auc: None,
                    ap: None,
                    n: None,
                    n_outliers: None,
                    score_file: None,
                    loss_file: None,
                    checkpoint: None,
                    trace_file: None,
                    error: Some(e.to_string()),
                });
                failure = Some(classify(e));
                break;
            }
        }
    }

    let mut histogram = String::from("score,label\n");
    for (score, label) in &pooled {
        match label {
            Some(l) => histogram.push_str(&format!("{},{}\n", fmt_f64(*score), l)),
            None => histogram.push_str(&format!("{},\n", fmt_f64(*score))),
        }
    }
    write_text(&config.out_dir.join("histogram.csv"), &histogram)?;
    manifest.push("histogram.csv".to_string());

    let (mean_auc, sd_auc) = match aucs.is_empty() {
        true => (None, None),
        false => {
            let (m, s) = mean_sd(&aucs);
            (Some(m), Some(s))
        }
    };
    let (mean_ap, sd_ap) = match aps.is_empty() {
        true => (None, None),
        false => {
            let (m, s) = mean_sd(&aps);
            (Some(m), Some(s))
        }
    };

    let seeds_run = per_seed.iter().filter(|s| s.error.is_none()).count();
    let metrics = ExperimentMetrics {
        mode: config.mode.name().to_string(),
        seeds: config.seeds.clone(),
        mean_auc,
        sd_auc,
        mean_ap,
        sd_ap,
        per_seed,
        manifest,
        partial: failure.is_some(),
    };
    let json = serde_json::to_string_pretty(&metrics)
        .map_err(|e| CliError::Config(format!("metrics serialization: {e}")))?;
    let metrics_path = config.out_dir.join("metrics.json");
    write_text(&metrics_path, &(json + "\n"))?;

    match failure {
        Some(e) => Err(e),
        None => Ok(RunSummary {
            mean_auc,
            sd_auc,
            mean_ap,
            sd_ap,
            seeds_run,
            metrics_path,
        }),
    }
}

fn metric_cell(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

/// Run one experiment per axis value (a full (λ1, λ2) grid for the lambda
/// axis), each in its own subdirectory, and write a summary table CSV.
/// Returns the table path.
pub fn run_sweep(
    base: &ExperimentConfig,
    axis: SweepAxis,
    values: &[f64],
) -> Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::Config("values: at least one value is required".into()));
    }
    match axis {
        SweepAxis::Lambda if base.mode != Mode::RsraePlus => {
            return Err(CliError::Config(
                "axis lambda requires mode = rsrae_plus".into(),
            ));
        }
        SweepAxis::LearningRate if !base.mode.is_neural() => {
            return Err(CliError::Config(
                "axis learning_rate requires an autoencoder mode (rsrae, rsrae_plus, ae, ae1)"
                    .into(),
            ));
        }
        SweepAxis::OutlierRatio if !matches!(base.dataset, DatasetSpec::SwissRoll { .. }) => {
            return Err(CliError::Config(
                "axis outlier_ratio requires data.source = swiss_roll".into(),
            ));
        }
        SweepAxis::D => {
            for &v in values {
                if v.is_nan() || v < 1.0 || v.fract() != 0.0 {
                    return Err(CliError::Config(format!(
                        "axis d takes positive integer values, got {v}"
                    )));
                }
            }
        }
        _ => {}
    }

    fs::create_dir_all(&base.out_dir).map_err(|e| {
        CliError::Config(format!(
            "cannot create output directory {}: {e}",
            base.out_dir.display()
        ))
    })?;

    // Each grid point: (label cells for the table row, configured run).
    let mut points: Vec<(String, ExperimentConfig)> = Vec::new();
    match axis {
        SweepAxis::D => {
            for &v in values {
                let mut c = base.clone();
                c.model.d = v as usize;
                c.out_dir = base.out_dir.join(format!("d={}", v as usize));
                points.push((format!("{}", v as usize), c));
            }
        }
        SweepAxis::LearningRate => {
            for &v in values {
                let mut c = base.clone();
                c.train.learning_rate = v;
                c.out_dir = base.out_dir.join(format!("lr={v}"));
                points.push((format!("{v}"), c));
            }
        }
        SweepAxis::OutlierRatio => {
            for &v in values {
                let mut c = base.clone();
                match &mut c.dataset {
                    DatasetSpec::SwissRoll { outlier_ratio, .. } => *outlier_ratio = v,
                    _ => unreachable!("checked above"),
                }
                c.out_dir = base.out_dir.join(format!("c={v}"));
                points.push((format!("{v}"), c));
            }
        }
        SweepAxis::Lambda => {
            for &l1 in values {
                for &l2 in values {
                    let mut c = base.clone();
                    c.train.lambda1 = l1;
                    c.train.lambda2 = l2;
                    c.out_dir = base.out_dir.join(format!("lambda={l1}x{l2}"));
                    points.push((format!("{l1},{l2}"), c));
                }
            }
        }
    }

    let mut table = match axis {
        SweepAxis::Lambda => String::from("lambda1,lambda2,mean_auc,sd_auc,mean_ap,sd_ap\n"),
        _ => format!("{},mean_auc,sd_auc,mean_ap,sd_ap\n", axis.name()),
    };
    for (label, c) in &points {
        let summary = run_experiment(c)?;
        table.push_str(&format!(
            "{label},{},{},{},{}\n",
            metric_cell(summary.mean_auc),
            metric_cell(summary.sd_auc),
            metric_cell(summary.mean_ap),
            metric_cell(summary.sd_ap),
        ));
    }

    let table_path = base.out_dir.join(format!("sweep_{}.csv", axis.name()));
    write_text(&table_path, &table)?;
    Ok(table_path)
}

/// Score a CSV with a saved checkpoint (either a serialized model or a
/// subspace JSON, told apart by the leading magic bytes) and write the
/// standard score CSV.
pub fn score_with_checkpoint(
    checkpoint: &Path,
    input: &Path,
    output: &Path,
    labeled: bool,
) -> Result<usize, CliError> {
    let ds = data::load_csv(input, labeled).map_err(classify)?;
    let bytes = fs::read(checkpoint)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", checkpoint.display())))?;

    let scores = if bytes.len() >= net::MODEL_MAGIC.len()
        && &bytes[..net::MODEL_MAGIC.len()] == net::MODEL_MAGIC
    {
        let model = net::load_model(checkpoint).map_err(classify)?;
        let fwd = net::model_forward(&model, &ds.x).map_err(classify)?;
        losses::anomaly_scores(&ds.x, &fwd.x_hat).map_err(classify)?
    } else {
        let ck: SubspaceCheckpoint = serde_json::from_slice(&bytes).map_err(|e| {
            CliError::Config(format!(
                "{}: neither a model checkpoint nor a subspace JSON: {e}",
                checkpoint.display()
            ))
        })?;
        if ck.kind != "subspace" {
            return Err(CliError::Config(format!(
                "{}: unknown checkpoint kind '{}'",
                checkpoint.display(),
                ck.kind
            )));
        }
        let basis = Tensor::matrix(&ck.basis).map_err(classify)?;
        let subspace = linear::Subspace::new(basis).map_err(classify)?;
        if ck.center.len() != ds.dim() || subspace.ambient_dim() != ds.dim() {
            return Err(CliError::Config(format!(
                "checkpoint dimension {} does not match data dimension {}",
                ck.center.len(),
                ds.dim()
            )));
        }
        let centered = subtract_row(&ds.x, &ck.center).map_err(classify)?;
        subspace.residual_norms(&centered).map_err(classify)?
    };

    data::save_scores_raw(output, &scores, ds.labels.as_deref()).map_err(classify)?;
    Ok(scores.len())
}

/// Recompute AUC and AP from a labeled score CSV; returns the report as a
/// pretty-printed JSON string.
pub fn metrics_from_scores(input: &Path) -> Result<String, CliError> {
    let (scores, labels) = data::load_scores(input).map_err(classify)?;
    let Some(labels) = labels else {
        return Err(CliError::Config(format!(
            "{}: score file has no labels; AUC/AP need labeled data",
            input.display()
        )));
    };
    let auc = metrics::roc_auc(&scores, &labels).map_err(classify)?;
    let ap = metrics::average_precision(&scores, &labels).map_err(classify)?;

    #[derive(Serialize)]
    struct Report {
        auc: f64,
        ap: f64,
        n: usize,
        n_outliers: usize,
    }
    let report = Report {
        auc,
        ap,
        n: scores.len(),
        n_outliers: labels.iter().filter(|&&l| l == 1).count(),
    };
    serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::Config(format!("report serialization: {e}")))
}
