//! Single-image FID and the storage / training-time accounting.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Archive, ArchiveKind};
use crate::error::{arg_err, shape_err, Error, Result};
use crate::inference::stylize_code;
use crate::inversion::{invert, InversionConfig};
use crate::losses::feature_columns;
use crate::model::MultiStyleModel;
use crate::nets::{Discriminator, Image};
use crate::par::Exec;
use crate::rng;
use crate::stn::stn_param_count;
use crate::trainer::read_metrics;

/// Covariance regularizer added to both Gaussians.
pub const SIFID_EPS: f64 = 1e-6;

/// Per-pixel features from one tap of a frozen discriminator.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    disc: Discriminator<f32>,
    tap: usize,
}

impl FeatureExtractor {
    /// Features after the first block.
    pub fn new(disc: &Discriminator<f32>) -> Self {
        Self::with_tap(disc, 0).expect("every discriminator has a first block")
    }

    pub fn with_tap(disc: &Discriminator<f32>, tap: usize) -> Result<Self> {
        if tap >= disc.num_taps() {
            return Err(arg_err!("tap {tap} out of {}", disc.num_taps()));
        }
        Ok(Self {
            disc: disc.clone(),
            tap,
        })
    }

    /// `(channels, pixels)` in f64.
    pub fn features(&self, img: &Image) -> Result<Array2<f64>> {
        let taps = self.disc.features(img)?;
        Ok(feature_columns(taps[self.tap].view()).mapv(|v| v as f64))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SifidScore {
    pub value: f64,
    pub feature_dim: usize,
    pub samples: (usize, usize),
}

fn gaussian_fit(f: ArrayView2<'_, f64>, eps: f64) -> (DVector<f64>, DMatrix<f64>) {
    let (d, n) = f.dim();
    let m = DMatrix::from_fn(d, n, |i, j| f[[i, j]]);
    let mu = m.column_mean();
    let centered = DMatrix::from_fn(d, n, |i, j| m[(i, j)] - mu[i]);
    let denom = (n.max(2) - 1) as f64;
    let mut cov = &centered * centered.transpose() / denom;
    cov = (&cov + cov.transpose()) * 0.5;
    for i in 0..d {
        cov[(i, i)] += eps;
    }
    (mu, cov)
}

fn sym_eigen(m: DMatrix<f64>) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    SymmetricEigen::try_new(m, 1e-14, 10_000)
        .ok_or_else(|| Error::Numeric("symmetric eigendecomposition did not converge".into()))
}

/// Trace of `(A B)^(1/2)` for symmetric positive semi-definite `A`, `B`,
/// via the eigenvalues of `A^(1/2) B A^(1/2)`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<f64> {
    let ea = sym_eigen(a.clone())?;
    let roots = ea.eigenvalues.map(|l| l.max(0.0).sqrt());
    let root_a = &ea.eigenvectors * DMatrix::from_diagonal(&roots) * ea.eigenvectors.transpose();
    let m = &root_a * b * &root_a;
    let m = (&m + m.transpose()) * 0.5;
    Ok(sym_eigen(m)?.eigenvalues.iter().map(|l| l.max(0.0).sqrt()).sum())
}

/// Frechet distance between Gaussians fit to two feature sets, each given as
/// `(dim, samples)`.
pub fn sifid_from_features(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>, eps: f64) -> Result<SifidScore> {
    if a.nrows() != b.nrows() {
        return Err(shape_err!("feature dims {} and {} differ", a.nrows(), b.nrows()));
    }
    if a.ncols() == 0 || b.ncols() == 0 {
        return Err(arg_err!("feature sets must be non-empty"));
    }
    if eps <= 0.0 && (a.ncols() < a.nrows() || b.ncols() < b.nrows()) {
        return Err(arg_err!("fewer samples than feature dims needs a positive eps"));
    }
    let (mu1, s1) = gaussian_fit(a, eps);
    let (mu2, s2) = gaussian_fit(b, eps);
    let mean_term = (&mu1 - &mu2).norm_squared();
    let value = mean_term + s1.trace() + s2.trace() - 2.0 * trace_sqrt_product(&s1, &s2)?;
    if !value.is_finite() {
        return Err(Error::Numeric("SIFID is not finite".into()));
    }
    Ok(SifidScore {
        value: value.max(0.0),
        feature_dim: a.nrows(),
        samples: (a.ncols(), b.ncols()),
    })
}

pub fn sifid(gen: &Image, reference: &Image, fx: &FeatureExtractor, eps: f64) -> Result<SifidScore> {
    let a = fx.features(gen)?;
    let b = fx.features(reference)?;
    sifid_from_features(a.view(), b.view(), eps)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub styles: Vec<String>,
    /// `scores[i][k]`: SIFID of input `i` stylized to style `k` against reference `k`.
    pub scores: Vec<Vec<f64>>,
    pub per_style: Vec<f64>,
    pub mean: f64,
}

impl EvalReport {
    pub fn from_scores(styles: Vec<String>, scores: Vec<Vec<f64>>) -> Self {
        let n = scores.len().max(1) as f64;
        let per_style: Vec<f64> = (0..styles.len())
            .map(|k| scores.iter().map(|row| row[k]).sum::<f64>() / n)
            .collect();
        let mean = per_style.iter().sum::<f64>() / per_style.len().max(1) as f64;
        Self {
            styles,
            scores,
            per_style,
            mean,
        }
    }

    /// Tab-separated table: one row per input, one column per style.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("input\t{}\n", self.styles.join("\t"));
        for (i, row) in self.scores.iter().enumerate() {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            out += &format!("{i}\t{}\n", cells.join("\t"));
        }
        let cells: Vec<String> = self.per_style.iter().map(|v| format!("{v:.6}")).collect();
        out += &format!("mean\t{}\n", cells.join("\t"));
        out
    }

    pub fn summary(&self) -> String {
        let w = self.styles.iter().map(|s| s.len()).max().unwrap_or(5).max(5);
        let mut out = format!("{:<w$}  SIFID\n", "style");
        for (s, v) in self.styles.iter().zip(&self.per_style) {
            out += &format!("{s:<w$}  {v:.4}\n");
        }
        out += &format!("{:<w$}  {:.4}\n", "mean", self.mean);
        out
    }
}

/// Mean SIFID per style between stylized inputs and the style references.
/// Inputs are inverted once each; inversions run through `exec`.
pub fn eval_model(
    model: &MultiStyleModel,
    inputs: &[Image],
    references: &[Image],
    inversion: &InversionConfig,
    seed: u64,
    exec: Exec,
) -> Result<EvalReport> {
    if inputs.is_empty() {
        return Err(arg_err!("evaluation needs at least one input"));
    }
    if references.len() != model.len() {
        return Err(arg_err!("{} references for {} styles", references.len(), model.len()));
    }
    let fx = FeatureExtractor::new(&model.base.discriminator);
    let styles: Vec<usize> = (0..model.len()).collect();
    let scores = exec.try_map(inputs, |u| -> Result<Vec<f64>> {
        let inv = invert(&model.base, u, inversion, rng::derive(seed, &[hash_image(u)]))?;
        stylize_code(model, &inv.code, &styles)?
            .iter()
            .zip(references)
            .map(|((_, out), r)| Ok(sifid(out, r, &fx, SIFID_EPS)?.value))
            .collect()
    })?;
    Ok(EvalReport::from_scores(model.names().to_vec(), scores))
}

/// Inversion seeds follow image content, so scores do not depend on input order.
fn hash_image(img: &Image) -> u64 {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub styles: usize,
    /// Arrays needed to run one generator: mapping, style affines and
    /// synthesis weights.
    pub generator_bytes: u64,
    /// STN bytes per style, in style order.
    pub stn_bytes: Vec<(String, u64)>,
    /// `generator_bytes + sum(stn_bytes)`.
    pub total_bytes: u64,
    /// Storage for one separately fine-tuned generator per style.
    pub separate_generators_bytes: u64,
    pub file_bytes: u64,
}

/// Byte accounting of a saved multi-style model.
pub fn storage_report(path: impl AsRef<Path>) -> Result<StorageReport> {
    let path = path.as_ref();
    let file_bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len();
    let a = Archive::read(path)?;
    if a.kind() != ArchiveKind::Multistyle {
        return Err(Error::integrity("manifest.kind", "expected a multi-style model archive"));
    }
    let names: Vec<String> = a.metadata("styles")?;
    let generator_bytes = a.bytes_with_prefix("gen/") + a.bytes_with_prefix("map/") + a.bytes_with_prefix("style/");
    let stn_bytes: Vec<(String, u64)> = names
        .iter()
        .map(|n| (n.clone(), a.bytes_with_prefix(&format!("stn/{n}/"))))
        .collect();
    let total_bytes = generator_bytes + stn_bytes.iter().map(|(_, b)| b).sum::<u64>();
    Ok(StorageReport {
        styles: names.len(),
        generator_bytes,
        separate_generators_bytes: names.len() as u64 * generator_bytes,
        stn_bytes,
        total_bytes,
        file_bytes,
    })
}

/// Bytes of one style's STN at 32-bit precision.
pub fn stn_bytes(schedule: &crate::latent::RowSchedule) -> u64 {
    4 * stn_param_count(schedule) as u64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRun {
    pub log: PathBuf,
    pub styles: usize,
    pub iterations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub multistyle: TimingRun,
    pub single: Vec<TimingRun>,
    /// Time to train every style separately.
    pub single_total_s: f64,
    /// `single_total_s / multistyle.seconds`; absent when not measurable.
    pub ratio: Option<f64>,
}

fn parse_header(path: &Path) -> Result<(usize, usize)> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let first = text.lines().next().unwrap_or_default();
    let mut styles = None;
    let mut iterations = None;
    for tok in first.trim_start_matches('#').split_whitespace() {
        if let Some(v) = tok.strip_prefix("styles=") {
            styles = v.parse().ok();
        } else if let Some(v) = tok.strip_prefix("iterations=") {
            iterations = v.parse().ok();
        }
    }
    match (styles, iterations) {
        (Some(s), Some(i)) => Ok((s, i)),
        _ => Err(Error::integrity(path.display().to_string(), "metrics log header missing")),
    }
}

fn timing_run(path: &Path) -> Result<TimingRun> {
    let (styles, iterations) = parse_header(path)?;
    let log = read_metrics(path)?;
    Ok(TimingRun {
        log: path.to_path_buf(),
        styles,
        iterations,
        seconds: log.last().map_or(0.0, |r| r.elapsed_s),
    })
}

/// Compares a multi-style run against single-style runs. With a single
/// single-style log and `N > 1` styles, its time is counted `N` times.
pub fn timing_report(multistyle: &Path, single: &[PathBuf]) -> Result<TimingReport> {
    let multi = timing_run(multistyle)?;
    let single: Vec<TimingRun> = single.iter().map(|p| timing_run(p)).collect::<Result<_>>()?;
    if single.is_empty() {
        return Err(arg_err!("at least one single-style log is required"));
    }
    let measured: f64 = single.iter().map(|r| r.seconds).sum();
    let single_total_s = if single.len() == 1 {
        measured * multi.styles as f64
    } else {
        measured
    };
    let ratio = (multi.iterations > 0 && multi.seconds > 1e-9 && single.iter().all(|r| r.iterations > 0))
        .then(|| single_total_s / multi.seconds);
    Ok(TimingReport {
        multistyle: multi,
        single,
        single_total_s,
        ratio,
    })
}

impl TimingReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("run\tstyles\titerations\tseconds\n");
        out += &format!(
            "multistyle\t{}\t{}\t{:.3}\n",
            self.multistyle.styles, self.multistyle.iterations, self.multistyle.seconds
        );
        for (i, r) in self.single.iter().enumerate() {
            out += &format!("single{i}\t{}\t{}\t{:.3}\n", r.styles, r.iterations, r.seconds);
        }
        out += &format!("single_total\t-\t-\t{:.3}\n", self.single_total_s);
        out += &format!(
            "ratio\t-\t-\t{}\n",
            self.ratio.map_or("n/a".to_string(), |r| format!("{r:.3}"))
        );
        out
    }
}
