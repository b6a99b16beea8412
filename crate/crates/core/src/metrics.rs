//! Generator quality: Fréchet distance, Inception Score, Density and Coverage
//! over features from a pluggable embedder.
//!
//! Values are only comparable between reports that share an embedder
//! fingerprint; the shipped embedders are not the canonical Inception network.

use std::path::{Path, PathBuf};

use log::warn;
use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{CModule, Kind, Tensor};

use crate::classifier::ClassifierCheckpoint;
use crate::error::{Error, IoContext, Result};
use crate::io::{read_json, write_json};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_IS_SPLITS: usize = 10;
/// Floor applied inside logarithms of the Inception Score.
pub const IS_EPSILON: f64 = 1e-12;
const ROW_SUM_TOLERANCE: f64 = 1e-4;
const EMBED_BATCH: i64 = 128;

/// `N` feature vectors of dimension `D`, row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureMatrix {
    data: Vec<f64>,
    n: usize,
    dim: usize,
    pub fingerprint: String,
}

impl FeatureMatrix {
    pub fn new(data: Vec<f64>, dim: usize, fingerprint: impl Into<String>) -> Result<Self> {
        if dim == 0 || data.is_empty() || data.len() % dim != 0 {
            return Err(Error::shape("feature matrix", format!("N×{dim} with N ≥ 1"), data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature matrix".into()));
        }
        Ok(Self {
            n: data.len() / dim,
            data,
            dim,
            fingerprint: fingerprint.into(),
        })
    }

    pub fn from_rows(rows: &[Vec<f64>], fingerprint: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::invalid("feature rows differ in length"));
        }
        Self::new(rows.concat(), dim, fingerprint)
    }

    pub fn from_tensor(t: &Tensor, fingerprint: impl Into<String>) -> Result<Self> {
        let size = t.size();
        if size.len() != 2 {
            return Err(Error::shape("feature tensor", "N×D", format!("{size:?}")));
        }
        let data = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().flatten(0, -1))?;
        Self::new(data, size[1] as usize, fingerprint)
    }

    pub fn rows(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.n, self.dim, &self.data)
    }
}

/// Maps images to feature vectors, and optionally to class probabilities.
pub trait Embedder {
    /// Identifies the network and its weights.
    fn fingerprint(&self) -> String;
    /// Expected `(height, width)` of inputs.
    fn input_size(&self) -> (usize, usize);
    fn embed_batch(&self, images: &Tensor) -> Result<Tensor>;
    fn class_probabilities(&self, _images: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

/// Penultimate-layer features of a trained classifier.
pub struct ClassifierEmbedder<'a> {
    checkpoint: &'a ClassifierCheckpoint,
    fingerprint: String,
}

impl<'a> ClassifierEmbedder<'a> {
    pub fn new(checkpoint: &'a ClassifierCheckpoint) -> Result<Self> {
        Ok(Self {
            fingerprint: format!("classifier:{}", checkpoint.fingerprint()?),
            checkpoint,
        })
    }
}

impl Embedder for ClassifierEmbedder<'_> {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_size(&self) -> (usize, usize) {
        self.checkpoint.meta.image_size
    }

    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        self.checkpoint.features(images)
    }

    fn class_probabilities(&self, images: &Tensor) -> Result<Option<Tensor>> {
        self.checkpoint.probabilities(images).map(Some)
    }
}

/// A user-supplied TorchScript module taking `N × 3 × H × W` images in
/// [-1, 1] and returning `N × D` features.
pub struct TorchScriptEmbedder {
    module: CModule,
    input_size: (usize, usize),
    fingerprint: String,
}

impl TorchScriptEmbedder {
    pub fn load(path: &Path, input_size: (usize, usize)) -> Result<Self> {
        let bytes = std::fs::read(path).at(path)?;
        let mut module = CModule::load(path)?;
        module.set_eval();
        Ok(Self {
            module,
            input_size,
            fingerprint: format!("torchscript:{}", hex::encode(&Sha256::digest(&bytes)[..16])),
        })
    }
}

impl Embedder for TorchScriptEmbedder {
    fn fingerprint(&self) -> String {
        self.fingerprint.clone()
    }

    fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    fn embed_batch(&self, images: &Tensor) -> Result<Tensor> {
        let out = tch::no_grad(|| self.module.forward_ts(&[images]))?;
        Ok(out.flatten(1, -1))
    }
}

fn check_images(images: &Tensor, size: (usize, usize)) -> Result<i64> {
    let s = images.size();
    if s.len() != 4 || s[1] != 3 || s[2] != size.0 as i64 || s[3] != size.1 as i64 {
        return Err(Error::shape(
            "embedder input",
            format!("N×3×{}×{}", size.0, size.1),
            format!("{s:?}"),
        ));
    }
    Ok(s[0])
}

fn batched(images: &Tensor, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
    let n = images.size()[0];
    let parts = (0..n)
        .step_by(EMBED_BATCH as usize)
        .map(|start| f(&images.narrow(0, start, EMBED_BATCH.min(n - start))))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::cat(&parts, 0))
}

/// Features for `N × 3 × H × W` images.
pub fn embed(images: &Tensor, embedder: &dyn Embedder) -> Result<FeatureMatrix> {
    if check_images(images, embedder.input_size())? == 0 {
        return Err(Error::invalid("no images to embed"));
    }
    let features = batched(images, |x| embedder.embed_batch(x))?;
    FeatureMatrix::from_tensor(&features, embedder.fingerprint())
}

/// Class probabilities for `images`, when the embedder provides them.
pub fn class_probabilities(images: &Tensor, embedder: &dyn Embedder) -> Result<Option<Tensor>> {
    if check_images(images, embedder.input_size())? == 0 {
        return Ok(None);
    }
    if embedder.class_probabilities(&images.narrow(0, 0, 1))?.is_none() {
        return Ok(None);
    }
    let probs = batched(images, |x| {
        embedder
            .class_probabilities(x)?
            .ok_or_else(|| Error::invalid("embedder stopped returning probabilities"))
    })?;
    Ok(Some(probs))
}

/// Sample mean and covariance of a feature set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianStats {
    pub n: usize,
    pub mean: Vec<f64>,
    /// Row-major `D × D`.
    pub cov: Vec<f64>,
}

impl GaussianStats {
    pub fn of(features: &FeatureMatrix) -> Self {
        let (n, d) = (features.rows(), features.dim());
        let x = features.matrix();
        let mean = x.row_mean();
        let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
        let denom = n.saturating_sub(1).max(1) as f64;
        let cov = (centered.transpose() * &centered) / denom;
        Self {
            n,
            mean: mean.iter().copied().collect(),
            cov: cov.transpose().as_slice().to_vec(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        let d = self.dim();
        DMatrix::from_row_slice(d, d, &self.cov)
    }
}

/// Eigenvalues clipped at zero, with the clipped mass.
fn clipped_eigen(m: &DMatrix<f64>) -> (SymmetricEigen<f64, nalgebra::Dyn>, f64) {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = sym.symmetric_eigen();
    let mut clipped = 0.0;
    for v in eig.eigenvalues.iter_mut() {
        if *v < 0.0 {
            clipped += -*v;
            *v = 0.0;
        }
    }
    (eig, clipped)
}

fn psd_sqrt(m: &DMatrix<f64>) -> (DMatrix<f64>, f64) {
    let (eig, clipped) = clipped_eigen(m);
    let roots = eig.eigenvalues.map(f64::sqrt);
    let v = &eig.eigenvectors;
    (v * DMatrix::from_diagonal(&roots) * v.transpose(), clipped)
}

/// `tr((A B)^{1/2})` as `tr((A^{1/2} B A^{1/2})^{1/2})`.
fn trace_sqrt_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> (f64, f64) {
    let (root_a, clip_a) = psd_sqrt(a);
    let (eig, clip) = clipped_eigen(&(&root_a * b * &root_a));
    (eig.eigenvalues.iter().map(|v| v.sqrt()).sum(), clip_a + clip)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FidValue {
    pub value: f64,
    /// Total magnitude of negative eigenvalues clipped in the square roots.
    pub sqrtm_clipped: f64,
}

/// Fréchet distance between two Gaussian fits.
pub fn fid_from_stats(a: &GaussianStats, b: &GaussianStats) -> Result<FidValue> {
    if a.dim() != b.dim() {
        return Err(Error::shape("FID feature dimension", a.dim(), b.dim()));
    }
    for s in [a, b] {
        if s.n < s.dim() + 1 {
            warn!(
                "FID from {} samples in {} dimensions; the covariance is rank-deficient",
                s.n,
                s.dim()
            );
        }
    }
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    let (ca, cb) = (a.cov_matrix(), b.cov_matrix());
    // Averaging both orders keeps the result exactly symmetric.
    let (t_ab, clip_ab) = trace_sqrt_product(&ca, &cb);
    let (t_ba, clip_ba) = trace_sqrt_product(&cb, &ca);
    let value = mean_term + ca.trace() + cb.trace() - (t_ab + t_ba);
    if !value.is_finite() {
        return Err(Error::NonFinite("FID".into()));
    }
    Ok(FidValue {
        value: value.max(0.0),
        sqrtm_clipped: 0.5 * (clip_ab + clip_ba),
    })
}

pub fn fid(real: &FeatureMatrix, gen: &FeatureMatrix) -> Result<f64> {
    check_comparable(real, gen)?;
    Ok(fid_from_stats(&GaussianStats::of(real), &GaussianStats::of(gen))?.value)
}

fn check_comparable(a: &FeatureMatrix, b: &FeatureMatrix) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::shape("feature dimension", a.dim(), b.dim()));
    }
    if a.fingerprint != b.fingerprint {
        return Err(Error::invalid(format!(
            "features come from different embedders ({} vs {})",
            a.fingerprint, b.fingerprint
        )));
    }
    Ok(())
}

/// `exp(mean_i KL(p_i ‖ p̂))` over `splits` contiguous chunks, as
/// (mean, standard error). Each score is clamped to its bounds `[1, C]`.
pub fn inception_score(probabilities: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = probabilities.len();
    let c = probabilities.first().map_or(0, Vec::len);
    if n == 0 || c == 0 {
        return Err(Error::invalid("inception score needs a nonempty probability matrix"));
    }
    if splits == 0 || splits > n {
        return Err(Error::invalid(format!("{splits} splits for {n} rows")));
    }
    for (i, row) in probabilities.iter().enumerate() {
        if row.len() != c {
            return Err(Error::shape(format!("probability row {i}"), c, row.len()));
        }
        let sum: f64 = row.iter().sum();
        if row.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::invalid(format!(
                "probability row {i} is not a distribution (sum {sum})"
            )));
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|s| {
            let rows = &probabilities[s * n / splits..(s + 1) * n / splits];
            let mut marginal = vec![0.0; c];
            for row in rows {
                for (m, p) in marginal.iter_mut().zip(row) {
                    *m += p;
                }
            }
            for m in &mut marginal {
                *m /= rows.len() as f64;
            }
            let mean_kl = rows
                .iter()
                .map(|row| {
                    row.iter()
                        .zip(&marginal)
                        .filter(|(p, _)| **p > 0.0)
                        .map(|(p, m)| p * (p.max(IS_EPSILON).ln() - m.max(IS_EPSILON).ln()))
                        .sum::<f64>()
                })
                .sum::<f64>()
                / rows.len() as f64;
            mean_kl.exp().clamp(1.0, c as f64)
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let stderr = if splits > 1 {
        let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (splits - 1) as f64;
        (var / splits as f64).sqrt()
    } else {
        0.0
    };
    Ok((mean, stderr))
}

/// Rows of an `N × C` probability tensor.
pub fn probability_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    let size = t.size();
    if size.len() != 2 {
        return Err(Error::shape("probabilities", "N×C", format!("{size:?}")));
    }
    let flat = Vec::<f64>::try_from(t.to_kind(Kind::Double).contiguous().flatten(0, -1))?;
    Ok(flat.chunks(size[1].max(1) as usize).map(<[f64]>::to_vec).collect())
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Squared distance from every real point to its `k`-th nearest other real
/// point.
pub fn knn_radii(real: &FeatureMatrix, k: usize) -> Result<Vec<f64>> {
    let n = real.rows();
    if k == 0 || k >= n {
        return Err(Error::invalid(format!("k = {k} needs 1 ≤ k < {n} real samples")));
    }
    Ok((0..n)
        .map(|i| {
            let mut d: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| squared_distance(real.row(i), real.row(j)))
                .collect();
            d.select_nth_unstable_by(k - 1, f64::total_cmp);
            d[k - 1]
        })
        .collect())
}

/// Density and coverage given precomputed squared kNN radii.
pub fn density_coverage_with_radii(
    real: &FeatureMatrix,
    radii: &[f64],
    gen: &FeatureMatrix,
    k: usize,
) -> Result<(f64, f64)> {
    check_comparable(real, gen)?;
    if radii.len() != real.rows() {
        return Err(Error::shape("kNN radii", real.rows(), radii.len()));
    }
    let mut inside = 0usize;
    let mut covered = vec![false; real.rows()];
    for j in 0..gen.rows() {
        for (i, &r) in radii.iter().enumerate() {
            if squared_distance(gen.row(j), real.row(i)) < r {
                inside += 1;
                covered[i] = true;
            }
        }
    }
    let density = inside as f64 / (k * gen.rows()) as f64;
    let coverage = covered.iter().filter(|&&c| c).count() as f64 / real.rows() as f64;
    Ok((density, coverage))
}

/// Density and coverage of `gen` against kNN balls around `real`.
pub fn density_coverage(real: &FeatureMatrix, gen: &FeatureMatrix, k: usize) -> Result<(f64, f64)> {
    check_comparable(real, gen)?;
    density_coverage_with_radii(real, &knn_radii(real, k)?, gen, k)
}

/// Real-side statistics, computed once per (reference set, embedder, k).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealStatistics {
    pub embedder: String,
    pub reference_fingerprint: String,
    pub k: usize,
    pub gaussian: GaussianStats,
    pub radii: Vec<f64>,
    pub features: FeatureMatrix,
}

impl RealStatistics {
    pub fn compute(features: FeatureMatrix, k: usize, reference_fingerprint: &str) -> Result<Self> {
        Ok(Self {
            embedder: features.fingerprint.clone(),
            reference_fingerprint: reference_fingerprint.to_string(),
            k,
            gaussian: GaussianStats::of(&features),
            radii: knn_radii(&features, k)?,
            features,
        })
    }

    /// Cache location beside a manifest.
    pub fn cache_path(manifest_path: &Path, embedder: &str, k: usize) -> PathBuf {
        let digest = hex::encode(&Sha256::digest(embedder.as_bytes())[..8]);
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        dir.join("stats").join(format!("real_{digest}_k{k}.json"))
    }

    /// Loads a cache entry if it matches, otherwise computes and stores it.
    pub fn cached(
        path: &Path,
        embedder: &str,
        k: usize,
        reference_fingerprint: &str,
        compute: impl FnOnce() -> Result<FeatureMatrix>,
    ) -> Result<Self> {
        if path.exists() {
            if let Ok(stats) = read_json::<Self>(path) {
                if stats.embedder == embedder
                    && stats.k == k
                    && stats.reference_fingerprint == reference_fingerprint
                {
                    return Ok(stats);
                }
            }
        }
        let stats = Self::compute(compute()?, k, reference_fingerprint)?;
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).at(parent)?;
        }
        write_json(path, &stats)?;
        Ok(stats)
    }
}

/// The contents of `metrics.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub fid: f64,
    pub fid_sqrtm_clipped: f64,
    pub is_mean: Option<f64>,
    pub is_stderr: Option<f64>,
    pub is_splits: usize,
    pub density: f64,
    pub coverage: f64,
    pub k: usize,
    pub embedder: String,
    pub n_real: usize,
    pub n_gen: usize,
}

impl MetricReport {
    pub fn compute(
        real: &RealStatistics,
        gen: &FeatureMatrix,
        gen_probabilities: Option<&[Vec<f64>]>,
        is_splits: usize,
    ) -> Result<Self> {
        check_comparable(&real.features, gen)?;
        let fid = fid_from_stats(&real.gaussian, &GaussianStats::of(gen))?;
        let (density, coverage) = density_coverage_with_radii(&real.features, &real.radii, gen, real.k)?;
        let is = gen_probabilities
            .map(|p| inception_score(p, is_splits.min(p.len()).max(1)))
            .transpose()?;
        Ok(Self {
            fid: fid.value,
            fid_sqrtm_clipped: fid.sqrtm_clipped,
            is_mean: is.map(|v| v.0),
            is_stderr: is.map(|v| v.1),
            is_splits,
            density,
            coverage,
            k: real.k,
            embedder: real.embedder.clone(),
            n_real: real.features.rows(),
            n_gen: gen.rows(),
        })
    }

    /// Reports are comparable only under the same embedder.
    pub fn comparable_with(&self, other: &MetricReport) -> bool {
        self.embedder == other.embedder
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        read_json(path)
    }
}

/// Embeds `gen_images` and scores them against cached real statistics.
pub fn evaluate_generated(
    embedder: &dyn Embedder,
    real: &RealStatistics,
    gen_images: &Tensor,
    is_splits: usize,
) -> Result<MetricReport> {
    if embedder.fingerprint() != real.embedder {
        return Err(Error::invalid("real statistics were computed with another embedder"));
    }
    let gen = embed(gen_images, embedder)?;
    let probs = class_probabilities(gen_images, embedder)?
        .map(|p| probability_rows(&p))
        .transpose()?;
    MetricReport::compute(real, &gen, probs.as_deref(), is_splits)
}
