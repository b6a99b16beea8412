//! Balanced synthetic datasets from trained generators, scored and filtered
//! by a real-data classifier.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::Rng;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::classifier::{ClassifierCheckpoint, Strategy};
use crate::datasets::{read_rgb, rgb_to_tensor, tensor_to_rgb, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, IoContext, Result};
use crate::gan::{Conditioning, GanCheckpoint, GanMode, LatentCode};
use crate::io::{read_json, write_json, StagingDir};
use crate::pose::{stack_maps, HandPose};
use crate::seed;

/// The paper's per-class default; more than this gave no major improvement.
pub const DEFAULT_N_PER_CLASS: usize = 1000;
const GENERATION_BATCH: usize = 64;
const SCORING_BATCH: usize = 128;
const META_FILE: &str = "synthetic.json";
const SCORES_FILE: &str = "scores.csv";

/// What drove the generation of a sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum ConditionRef {
    Label(usize),
    /// `sample_id` of the source record whose pose was rendered.
    Pose(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub sample_id: String,
    pub label: usize,
    /// Position among the samples generated for this class.
    pub index: usize,
    pub latent_seed: u64,
    pub condition_ref: ConditionRef,
    pub score: Option<f64>,
    /// Interleaved RGB8 pixels.
    pub image: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterProvenance {
    pub keep_fraction: f64,
    pub per_class: bool,
    pub scorer_fingerprint: Option<String>,
    pub counts_before: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub samples: Vec<SyntheticSample>,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub mode: GanMode,
    pub generator_fingerprint: String,
    /// Fingerprint of the dataset the generator was trained on.
    pub generator_dataset: String,
    /// Fingerprint of the pose source, when poses drove generation.
    pub pose_source: Option<String>,
    /// Set when the poses came from a different dataset than the generator's.
    pub multi_source: bool,
    pub seed: u64,
    pub scorer_fingerprint: Option<String>,
    pub filter: Option<FilterProvenance>,
}

/// Per-sample metadata as stored in `synthetic.json`.
#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredSample {
    sample_id: String,
    label: usize,
    index: usize,
    latent_seed: u64,
    condition_ref: ConditionRef,
    image: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct StoredDataset {
    num_classes: usize,
    image_size: (usize, usize),
    mode: GanMode,
    generator_fingerprint: String,
    generator_dataset: String,
    pose_source: Option<String>,
    multi_source: bool,
    seed: u64,
    counts: Vec<usize>,
    scorer_fingerprint: Option<String>,
    filter: Option<FilterProvenance>,
    scores_file: Option<String>,
    samples: Vec<StoredSample>,
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn is_scored(&self) -> bool {
        self.samples.iter().all(|s| s.score.is_some())
    }

    /// Content hash over metadata and pixels.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(self.generator_fingerprint.as_bytes());
        h.update(self.seed.to_le_bytes());
        for s in &self.samples {
            h.update(s.sample_id.as_bytes());
            h.update((s.label as u64).to_le_bytes());
            h.update(s.latent_seed.to_le_bytes());
            if let Some(score) = s.score {
                h.update(score.to_le_bytes());
            }
            h.update(&s.image);
        }
        hex::encode(&h.finalize()[..16])
    }

    /// All images as an `N × 3 × H × W` tensor in [-1, 1].
    pub fn images(&self) -> Tensor {
        self.images_of(0..self.samples.len())
    }

    pub fn images_of(&self, indices: impl IntoIterator<Item = usize>) -> Tensor {
        let (h, w) = self.image_size;
        let tensors: Vec<Tensor> = indices
            .into_iter()
            .map(|i| rgb_to_tensor(&self.samples[i].image, self.image_size))
            .collect();
        if tensors.is_empty() {
            return Tensor::zeros([0, 3, h as i64, w as i64], (Kind::Float, tch::Device::Cpu));
        }
        Tensor::stack(&tensors, 0)
    }

    fn image_file(sample: &SyntheticSample) -> PathBuf {
        Path::new("images")
            .join(sample.label.to_string())
            .join(format!("{:06}.png", sample.index))
    }

    /// Writes `images/<class>/<index>.png`, `synthetic.json` and, once
    /// scored, `scores.csv`. The directory is replaced atomically.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let staging = StagingDir::new(dir)?;
        let (h, w) = self.image_size;
        let mut stored = Vec::with_capacity(self.samples.len());
        for s in &self.samples {
            let rel = Self::image_file(s);
            let path = staging.path().join(&rel);
            if let Some(parent) = path.parent() {
                fs::create_dir_all(parent).at(parent)?;
            }
            let buffer = image::RgbImage::from_raw(w as u32, h as u32, s.image.clone())
                .ok_or_else(|| Error::shape("synthetic image", h * w * 3, s.image.len()))?;
            buffer.save(&path)?;
            stored.push(StoredSample {
                sample_id: s.sample_id.clone(),
                label: s.label,
                index: s.index,
                latent_seed: s.latent_seed,
                condition_ref: s.condition_ref.clone(),
                image: rel,
            });
        }
        let scored = self.samples.iter().any(|s| s.score.is_some());
        if scored {
            let path = staging.path().join(SCORES_FILE);
            let mut writer = csv::Writer::from_path(&path)?;
            writer.write_record(["sample_id", "label", "score"])?;
            for s in &self.samples {
                let score = s.score.map(|v| v.to_string()).unwrap_or_default();
                writer.write_record([s.sample_id.as_str(), &s.label.to_string(), &score])?;
            }
            writer.flush().at(&path)?;
        }
        let meta = StoredDataset {
            num_classes: self.num_classes,
            image_size: self.image_size,
            mode: self.mode,
            generator_fingerprint: self.generator_fingerprint.clone(),
            generator_dataset: self.generator_dataset.clone(),
            pose_source: self.pose_source.clone(),
            multi_source: self.multi_source,
            seed: self.seed,
            counts: self.counts(),
            scorer_fingerprint: self.scorer_fingerprint.clone(),
            filter: self.filter.clone(),
            scores_file: scored.then(|| SCORES_FILE.to_string()),
            samples: stored,
        };
        write_json(&staging.path().join(META_FILE), &meta)?;
        staging.commit()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: StoredDataset = read_json(&dir.join(META_FILE))?;
        let mut scores: BTreeMap<String, f64> = BTreeMap::new();
        if let Some(file) = &meta.scores_file {
            let path = dir.join(file);
            let mut reader = csv::Reader::from_path(&path)?;
            for (line, row) in reader.records().enumerate() {
                let row = row?;
                if row[2].is_empty() {
                    continue;
                }
                let score = row[2].parse::<f64>().map_err(|e| Error::Parse {
                    path: path.clone(),
                    line: line + 2,
                    message: e.to_string(),
                })?;
                scores.insert(row[0].to_string(), score);
            }
        }
        let samples = meta
            .samples
            .into_iter()
            .map(|s| {
                if s.label >= meta.num_classes {
                    return Err(Error::LabelOutOfRange {
                        sample_id: s.sample_id.clone(),
                        label: s.label,
                        num_classes: meta.num_classes,
                    });
                }
                Ok(SyntheticSample {
                    image: read_rgb(&dir.join(&s.image), meta.image_size)?,
                    score: scores.get(&s.sample_id).copied(),
                    sample_id: s.sample_id,
                    label: s.label,
                    index: s.index,
                    latent_seed: s.latent_seed,
                    condition_ref: s.condition_ref,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let dataset = Self {
            samples,
            num_classes: meta.num_classes,
            image_size: meta.image_size,
            mode: meta.mode,
            generator_fingerprint: meta.generator_fingerprint,
            generator_dataset: meta.generator_dataset,
            pose_source: meta.pose_source,
            multi_source: meta.multi_source,
            seed: meta.seed,
            scorer_fingerprint: meta.scorer_fingerprint,
            filter: meta.filter,
        };
        if dataset.counts() != meta.counts {
            return Err(Error::invalid(format!(
                "{}: per-class counts disagree with samples",
                dir.display()
            )));
        }
        Ok(dataset)
    }
}

fn latent_stream(class: usize) -> String {
    format!("latent/{class}")
}

fn empty_dataset(ckpt: &GanCheckpoint, num_classes: usize, seed: u64) -> SyntheticDataset {
    let side = ckpt.image_size();
    SyntheticDataset {
        samples: Vec::new(),
        num_classes,
        image_size: (side, side),
        mode: ckpt.mode(),
        generator_fingerprint: ckpt.meta.generator_fingerprint.clone(),
        generator_dataset: ckpt.meta.dataset_fingerprint.clone(),
        pose_source: None,
        multi_source: false,
        seed,
        scorer_fingerprint: None,
        filter: None,
    }
}

fn check_mode(ckpt: &GanCheckpoint, expected: GanMode) -> Result<()> {
    if ckpt.mode() != expected {
        return Err(Error::ModeMismatch {
            expected: expected.to_string(),
            got: ckpt.mode().to_string(),
        });
    }
    Ok(())
}

/// Runs the generator over fixed-size chunks so the output never depends on
/// anything but the ordered list of (latent, condition) pairs.
fn run_generator(
    ckpt: &GanCheckpoint,
    latents: &[LatentCode],
    conditions: impl Fn(std::ops::Range<usize>) -> Result<Conditioning>,
) -> Result<Vec<Vec<u8>>> {
    let mut images = Vec::with_capacity(latents.len());
    let mut start = 0;
    while start < latents.len() {
        let end = (start + GENERATION_BATCH).min(latents.len());
        let z = LatentCode::stack(&latents[start..end]);
        let batch = ckpt.generate(&z, &conditions(start..end)?)?;
        for i in 0..(end - start) as i64 {
            images.push(tensor_to_rgb(&batch.get(i)));
        }
        start = end;
    }
    Ok(images)
}

/// Exactly `n_per_class` samples per class from a label-mode generator.
/// Sample `i` of class `c` uses the latent seeded by `(seed, c, i)`.
pub fn generate_balanced(
    ckpt: &GanCheckpoint,
    n_per_class: usize,
    num_classes: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    check_mode(ckpt, GanMode::Label)?;
    if num_classes != ckpt.meta.arch.num_classes {
        return Err(Error::ClassCountMismatch {
            expected: ckpt.meta.arch.num_classes,
            got: num_classes,
        });
    }
    let mut dataset = empty_dataset(ckpt, num_classes, seed);
    let mut latents = Vec::with_capacity(n_per_class * num_classes);
    let mut labels = Vec::with_capacity(latents.capacity());
    for class in 0..num_classes {
        for index in 0..n_per_class {
            let latent_seed = seed::derive(seed, &latent_stream(class), index as u64);
            latents.push(LatentCode::from_seed(latent_seed, ckpt.z_dim()));
            labels.push(class);
            dataset.samples.push(SyntheticSample {
                sample_id: format!("c{class}_{index:06}"),
                label: class,
                index,
                latent_seed,
                condition_ref: ConditionRef::Label(class),
                score: None,
                image: Vec::new(),
            });
        }
    }
    let images = run_generator(ckpt, &latents, |r| Ok(Conditioning::labels(&labels[r])))?;
    for (sample, image) in dataset.samples.iter_mut().zip(images) {
        sample.image = image;
    }
    info!(
        "generated {} label-conditioned samples ({} per class)",
        dataset.len(),
        n_per_class
    );
    Ok(dataset)
}

/// How source poses are turned into samples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "n_per_class")]
pub enum PoseSampling {
    /// One sample per source record, in manifest order.
    PassThrough,
    /// `n` samples per class, poses drawn with replacement.
    Balanced(usize),
}

/// Drives a pose-mode generator with poses from `source` (records of
/// `split`). Every sample inherits the label of the record whose pose it was
/// rendered from.
pub fn generate_from_poses(
    ckpt: &GanCheckpoint,
    source: &DatasetManifest,
    split: Split,
    sampling: PoseSampling,
    seed: u64,
) -> Result<SyntheticDataset> {
    check_mode(ckpt, GanMode::Pose)?;
    let render = ckpt
        .meta
        .pose_render
        .ok_or_else(|| Error::invalid("pose checkpoint lacks its render settings"))?;
    let records: Vec<&SampleRecord> = source.split_records(split).collect();
    for r in &records {
        if r.keypoints.is_none() {
            return Err(Error::MissingKeypoints(r.sample_id.clone()));
        }
        if r.label >= source.num_classes {
            return Err(Error::LabelOutOfRange {
                sample_id: r.sample_id.clone(),
                label: r.label,
                num_classes: source.num_classes,
            });
        }
    }
    if records.is_empty() {
        return Err(Error::EmptySplit(split));
    }

    let picks: Vec<&SampleRecord> = match sampling {
        PoseSampling::PassThrough => records.clone(),
        PoseSampling::Balanced(n) => {
            let mut by_class: Vec<Vec<&SampleRecord>> = vec![Vec::new(); source.num_classes];
            for r in &records {
                by_class[r.label].push(r);
            }
            let mut picks = Vec::with_capacity(n * source.num_classes);
            for (class, pool) in by_class.iter().enumerate() {
                if pool.is_empty() {
                    return Err(Error::invalid(format!(
                        "class {class} has no source poses in the {split} split"
                    )));
                }
                let mut rng = seed::rng(seed, "pose-pick", class as u64);
                picks.extend((0..n).map(|_| pool[rng.gen_range(0..pool.len())]));
            }
            picks
        }
    };

    let source_fingerprint = source.fingerprint()?;
    let mut dataset = empty_dataset(ckpt, source.num_classes, seed);
    dataset.multi_source = source_fingerprint != ckpt.meta.dataset_fingerprint;
    dataset.pose_source = Some(source_fingerprint);
    let side = ckpt.image_size();
    let mut next_index = vec![0usize; source.num_classes];
    let mut latents = Vec::with_capacity(picks.len());
    let mut maps = Vec::with_capacity(picks.len());
    for record in &picks {
        let class = record.label;
        let index = next_index[class];
        next_index[class] += 1;
        let latent_seed = seed::derive(seed, &latent_stream(class), index as u64);
        latents.push(LatentCode::from_seed(latent_seed, ckpt.z_dim()));
        let kps = record.keypoints.as_ref().expect("checked above");
        maps.push(render.render(&HandPose::from_keypoints(kps), side, side)?);
        dataset.samples.push(SyntheticSample {
            sample_id: format!("c{class}_{index:06}"),
            label: class,
            index,
            latent_seed,
            condition_ref: ConditionRef::Pose(record.sample_id.clone()),
            score: None,
            image: Vec::new(),
        });
    }
    let images = run_generator(ckpt, &latents, |r| Ok(Conditioning::Maps(stack_maps(&maps[r])?)))?;
    for (sample, image) in dataset.samples.iter_mut().zip(images) {
        sample.image = image;
    }
    if dataset.multi_source {
        info!("pose source differs from the generator's training data (multi-source)");
    }
    Ok(dataset)
}

/// Sets each sample's score to the scorer's softmax probability of its own
/// label. The scorer must have been trained on real data only.
pub fn score_samples(
    scorer: &ClassifierCheckpoint,
    dataset: &SyntheticDataset,
) -> Result<SyntheticDataset> {
    if scorer.meta.strategy != Strategy::Real {
        return Err(Error::invalid(format!(
            "scorer must be trained on real data only, got {}",
            scorer.meta.strategy
        )));
    }
    if scorer.num_classes() != dataset.num_classes {
        return Err(Error::ClassCountMismatch {
            expected: scorer.num_classes(),
            got: dataset.num_classes,
        });
    }
    let mut out = dataset.clone();
    let mut start = 0;
    while start < out.samples.len() {
        let end = (start + SCORING_BATCH).min(out.samples.len());
        let probs = scorer.probabilities(&dataset.images_of(start..end))?;
        let labels: Vec<i64> = out.samples[start..end].iter().map(|s| s.label as i64).collect();
        let own = probs
            .gather(1, &Tensor::from_slice(&labels).unsqueeze(1), false)
            .squeeze_dim(1)
            .to_kind(Kind::Double);
        let own = Vec::<f64>::try_from(own)?;
        for (sample, p) in out.samples[start..end].iter_mut().zip(own) {
            sample.score = Some(p.clamp(0.0, 1.0));
        }
        start = end;
    }
    out.scorer_fingerprint = Some(scorer.meta.weights_fingerprint.clone());
    Ok(out)
}

/// `ceil(fraction · n)`, ignoring the rounding noise of the product.
pub fn keep_count(fraction: f64, n: usize) -> usize {
    if n == 0 {
        return 0;
    }
    let exact = fraction * n as f64;
    let count = (exact - exact.abs() * 1e-12).ceil() as usize;
    count.clamp(1, n)
}

/// Keeps the `ceil(keep_fraction · N_c)` best-scoring samples of every class.
/// Ties are broken by ascending latent seed, then sample id. Kept samples
/// stay in their original order.
pub fn filter_topk(dataset: &SyntheticDataset, keep_fraction: f64) -> Result<SyntheticDataset> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::invalid(format!(
            "keep_fraction {keep_fraction} outside (0, 1]"
        )));
    }
    if let Some(s) = dataset.samples.iter().find(|s| s.score.is_none()) {
        return Err(Error::Unscored(s.sample_id.clone()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.num_classes];
    for (i, s) in dataset.samples.iter().enumerate() {
        by_class[s.label].push(i);
    }
    let mut keep = vec![false; dataset.samples.len()];
    for members in &mut by_class {
        let k = keep_count(keep_fraction, members.len());
        members.sort_by(|&a, &b| {
            let (sa, sb) = (&dataset.samples[a], &dataset.samples[b]);
            sb.score
                .partial_cmp(&sa.score)
                .expect("scores are comparable")
                .then(sa.latent_seed.cmp(&sb.latent_seed))
                .then_with(|| sa.sample_id.cmp(&sb.sample_id))
        });
        for &i in &members[..k] {
            keep[i] = true;
        }
    }
    let counts_before = dataset.counts();
    let mut out = dataset.clone();
    out.samples = dataset
        .samples
        .iter()
        .zip(&keep)
        .filter(|(_, &k)| k)
        .map(|(s, _)| s.clone())
        .collect();
    if dataset.filter.is_some() {
        warn!("filtering an already filtered synthetic set");
    }
    out.filter = Some(FilterProvenance {
        keep_fraction,
        per_class: true,
        scorer_fingerprint: dataset.scorer_fingerprint.clone(),
        counts_before,
    });
    Ok(out)
}
