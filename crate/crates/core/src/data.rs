//! Synthetic dataset generation (Swiss roll plus isotropic Gaussian
//! outliers), corruption mixing, and CSV ingestion/export.
//!
//! Everything here is a pure function of (parameters, seed): the RNG is a
//! named, seedable generator (ChaCha8) and normal variates come from a fixed
//! Box–Muller transform, so datasets are bit-identical across runs and
//! platforms.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand_core::{RngCore, SeedableRng};

use crate::metrics::ScoreReport;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Format a float with 17 significant digits so text artifacts round-trip to
/// the exact f64 bit pattern.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Deterministic random number generator: ChaCha with 8 rounds, seeded from
/// a u64, with uniform doubles in [0,1) and Box–Muller normals (two uniforms
/// per variate, no spare-value caching).
pub struct Rng {
    inner: rand_chacha::ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: rand_chacha::ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform double in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform double in [lo, hi).
    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box–Muller: z = √(−2 ln u₁)·cos(2π u₂) with
    /// u₁ ∈ (0, 1]. The sine companion is deliberately discarded so each
    /// variate consumes exactly two uniforms — this keeps draw positions
    /// stable and documentable.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
    }

    /// Unbiased integer in [0, bound) via rejection sampling.
    pub fn below(&mut self, bound: usize) -> usize {
        assert!(bound > 0, "below(0)");
        let b = bound as u128;
        // Largest multiple of `bound` representable in 64 bits; values at or
        // above it are rejected to avoid modulo bias.
        let limit = ((1u128 << 64) / b) * b;
        loop {
            let v = self.inner.next_u64() as u128;
            if v < limit {
                return (v % b) as usize;
            }
        }
    }

    /// Fisher–Yates permutation of 0..n.
    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            let j = self.below(i + 1);
            idx.swap(i, j);
        }
        idx
    }
}

/// The permutation `mix` and the epoch shuffler use for a given (n, seed).
/// Exposed so callers can invert a shuffle deterministically.
pub fn shuffle_permutation(n: usize, seed: u64) -> Vec<usize> {
    Rng::new(seed).permutation(n)
}

/// A data matrix with optional ground-truth outlier labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// N×M sample matrix, one row per sample.
    pub x: Tensor,
    /// Per-row labels, 1 = outlier; `None` for unlabeled data.
    pub labels: Option<Vec<u8>>,
    /// Seed the generator used (0 for loaded files).
    pub seed: u64,
    /// Human-readable origin of the data.
    pub note: String,
}

impl LabeledDataset {
    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    fn validate(&self) -> Result<()> {
        if let Some(labels) = &self.labels {
            if labels.len() != self.n() {
                return Err(Error::ShapeMismatch {
                    op: "dataset labels",
                    lhs: vec![self.n()],
                    rhs: vec![labels.len()],
                });
            }
        }
        if !self.x.all_finite() {
            return Err(Error::invalid("dataset contains non-finite values"));
        }
        Ok(())
    }
}

/// How much of a dataset is corrupted: `outlier_count` outliers are added to
/// `n_inliers` inliers, where the count is `round(ratio · n_inliers)`.
#[derive(Debug, Clone, Copy)]
pub struct CorruptionSpec {
    pub outlier_ratio: f64,
    pub n_inliers: usize,
}

impl CorruptionSpec {
    pub fn new(outlier_ratio: f64, n_inliers: usize) -> Result<Self> {
        if !(outlier_ratio > 0.0 && outlier_ratio < 1.0) {
            return Err(Error::invalid(format!(
                "outlier ratio must lie strictly between 0 and 1, got {outlier_ratio}"
            )));
        }
        if n_inliers == 0 {
            return Err(Error::invalid("need at least one inlier"));
        }
        Ok(CorruptionSpec {
            outlier_ratio,
            n_inliers,
        })
    }

    pub fn outlier_count(&self) -> usize {
        (self.outlier_ratio * self.n_inliers as f64).round() as usize
    }
}

/// The Swiss-roll embedding of (angle t, height s): (t·cos t, s, t·sin t).
pub fn swiss_roll_point(t: f64, s: f64) -> [f64; 3] {
    [t * t.cos(), s, t * t.sin()]
}

/// Lower/upper bounds of the Swiss-roll angle parameter t.
pub const SWISS_ROLL_T_RANGE: (f64, f64) = (1.5 * PI, 4.5 * PI);
/// Lower/upper bounds of the Swiss-roll height parameter s.
pub const SWISS_ROLL_S_RANGE: (f64, f64) = (0.0, 21.0);

/// n points on a Swiss roll in R³: angle t ~ U[3π/2, 9π/2], height
/// s ~ U[0, 21], mapped through (t·cos t, s, t·sin t). All labels 0.
pub fn swiss_roll(n: usize, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("swiss_roll needs n >= 1"));
    }
    let mut rng = Rng::new(seed);
    let mut data = Vec::with_capacity(3 * n);
    for _ in 0..n {
        // Fixed draw order per sample: angle first, then height.
        let t = rng.uniform_in(SWISS_ROLL_T_RANGE.0, SWISS_ROLL_T_RANGE.1);
        let s = rng.uniform_in(SWISS_ROLL_S_RANGE.0, SWISS_ROLL_S_RANGE.1);
        data.extend_from_slice(&swiss_roll_point(t, s));
    }
    Ok(LabeledDataset {
        x: Tensor::from_parts(vec![n, 3], data),
        labels: Some(vec![0; n]),
        seed,
        note: format!("swiss-roll n={n}"),
    })
}

/// n i.i.d. points from N(0, σ²I₃). All labels 1.
pub fn gaussian_outliers(n: usize, sigma: f64, seed: u64) -> Result<LabeledDataset> {
    if n == 0 {
        return Err(Error::invalid("gaussian_outliers needs n >= 1"));
    }
    if sigma <= 0.0 {
        return Err(Error::invalid(format!("sigma must be positive, got {sigma}")));
    }
    let mut rng = Rng::new(seed);
    let data = (0..3 * n).map(|_| sigma * rng.normal()).collect();
    Ok(LabeledDataset {
        x: Tensor::from_parts(vec![n, 3], data),
        labels: Some(vec![1; n]),
        seed,
        note: format!("gaussian-outliers n={n} sigma={sigma}"),
    })
}

/// Concatenate two datasets and deterministically shuffle the rows. Labels
/// are preserved; a dataset without labels contributes its positional
/// default (first argument 0 = inlier, second 1 = outlier).
pub fn mix(
    inliers: &LabeledDataset,
    outliers: &LabeledDataset,
    shuffle_seed: u64,
) -> Result<LabeledDataset> {
    if inliers.dim() != outliers.dim() {
        return Err(Error::ShapeMismatch {
            op: "mix",
            lhs: inliers.x.shape().to_vec(),
            rhs: outliers.x.shape().to_vec(),
        });
    }
    let n = inliers.n() + outliers.n();
    let m = inliers.dim();
    let default_in = vec![0u8; inliers.n()];
    let default_out = vec![1u8; outliers.n()];
    let lab_in = inliers.labels.as_ref().unwrap_or(&default_in);
    let lab_out = outliers.labels.as_ref().unwrap_or(&default_out);

    let perm = shuffle_permutation(n, shuffle_seed);
    let mut data = Vec::with_capacity(n * m);
    let mut labels = Vec::with_capacity(n);
    for &src in &perm {
        if src < inliers.n() {
            data.extend_from_slice(inliers.x.row(src));
            labels.push(lab_in[src]);
        } else {
            let k = src - inliers.n();
            data.extend_from_slice(outliers.x.row(k));
            labels.push(lab_out[k]);
        }
    }
    Ok(LabeledDataset {
        x: Tensor::from_parts(vec![n, m], data),
        labels: Some(labels),
        seed: shuffle_seed,
        note: format!("mix({}; {})", inliers.note, outliers.note),
    })
}

/// Load a rectangular numeric CSV. With `has_labels`, the last column must
/// be an integer label in {0, 1}. No header row; errors name the 1-based
/// line.
pub fn load_csv(path: &Path, has_labels: bool) -> Result<LabeledDataset> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut labels: Vec<u8> = Vec::new();
    let mut width: Option<usize> = None;

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        match width {
            None => {
                if has_labels && cells.len() < 2 {
                    return Err(Error::Parse {
                        line: lineno,
                        msg: "labeled CSV needs at least one feature column".into(),
                    });
                }
                width = Some(cells.len());
            }
            Some(w) if cells.len() != w => {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("row has {} cells, expected {w}", cells.len()),
                });
            }
            _ => {}
        }
        let feature_cells = if has_labels {
            &cells[..cells.len() - 1]
        } else {
            &cells[..]
        };
        let mut row = Vec::with_capacity(feature_cells.len());
        for cell in feature_cells {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("cell {cell:?} is not a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("non-finite value {v}"),
                });
            }
            row.push(v);
        }
        if has_labels {
            let cell = cells[cells.len() - 1];
            let label: i64 = cell.parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("label {cell:?} is not an integer"),
            })?;
            if label != 0 && label != 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("label {label} outside {{0,1}}"),
                });
            }
            labels.push(label as u8);
        }
        rows.push(row);
    }

    if rows.is_empty() {
        return Err(Error::invalid(format!("{}: empty CSV", path.display())));
    }
    let m = rows[0].len();
    let mut data = Vec::with_capacity(rows.len() * m);
    for row in &rows {
        data.extend_from_slice(row);
    }
    let ds = LabeledDataset {
        x: Tensor::from_parts(vec![rows.len(), m], data),
        labels: if has_labels { Some(labels) } else { None },
        seed: 0,
        note: format!("csv:{}", path.display()),
    };
    ds.validate()?;
    Ok(ds)
}

/// Write a feature matrix (optionally with a trailing label column) in the
/// format `load_csv` reads, with full-precision floats.
pub fn save_csv(path: &Path, x: &Tensor, labels: Option<&[u8]>) -> Result<()> {
    let mut out = String::new();
    for i in 0..x.rows() {
        let cells: Vec<String> = x.row(i).iter().map(|&v| fmt_f64(v)).collect();
        out.push_str(&cells.join(","));
        if let Some(labels) = labels {
            out.push_str(&format!(",{}", labels[i]));
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

/// Write per-sample scores as `index,score,label` (label blank when
/// unlabeled).
pub fn save_scores_raw(path: &Path, scores: &[f64], labels: Option<&[u8]>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "index,score,label")?;
    for (i, &s) in scores.iter().enumerate() {
        match labels {
            Some(labels) => writeln!(f, "{i},{},{}", fmt_f64(s), labels[i])?,
            None => writeln!(f, "{i},{},", fmt_f64(s))?,
        }
    }
    Ok(())
}

/// Write a score report as `index,score,label` CSV.
pub fn save_scores(path: &Path, report: &ScoreReport) -> Result<()> {
    save_scores_raw(path, &report.scores, Some(&report.labels))
}

/// Read back a score CSV written by [`save_scores`]. Returns (scores,
/// labels); labels is `None` if every label cell is blank.
pub fn load_scores(path: &Path) -> Result<(Vec<f64>, Option<Vec<u8>>)> {
    let text = fs::read_to_string(path)?;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    let mut any_label = false;
    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if lineno == 1 {
            if line.trim() != "index,score,label" {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header \"index,score,label\", got {line:?}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<&str> = line.split(',').map(str::trim).collect();
        if cells.len() != 3 {
            return Err(Error::Parse {
                line: lineno,
                msg: format!("expected 3 cells, got {}", cells.len()),
            });
        }
        let s: f64 = cells[1].parse().map_err(|_| Error::Parse {
            line: lineno,
            msg: format!("score {:?} is not a number", cells[1]),
        })?;
        scores.push(s);
        if cells[2].is_empty() {
            labels.push(0);
        } else {
            any_label = true;
            let l: i64 = cells[2].parse().map_err(|_| Error::Parse {
                line: lineno,
                msg: format!("label {:?} is not an integer", cells[2]),
            })?;
            if l != 0 && l != 1 {
                return Err(Error::Parse {
                    line: lineno,
                    msg: format!("label {l} outside {{0,1}}"),
                });
            }
            labels.push(l as u8);
        }
    }
    Ok((scores, if any_label { Some(labels) } else { None }))
}
