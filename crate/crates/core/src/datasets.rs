//! Labeled image manifests: ingestion, validation, stratified splitting and
//! sub-sampling, class statistics.
//!
//! A manifest stores image paths, never pixels. Images are decoded on demand
//! by [`load_images`] when a trainer assembles its tensors.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{Kind, Tensor};

use crate::error::{Error, IoContext, Result};
use crate::seed;

pub const NUM_KEYPOINTS: usize = 21;
const HEADER_TAG: &str = "#balancegen-manifest";
const HEADER_VERSION: &str = "v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(format!("unknown split {other:?}")),
        }
    }
}

/// One detected keypoint in normalized crop coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleRecord {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub label: usize,
    pub split: Split,
    pub keypoints: Option<[Keypoint; NUM_KEYPOINTS]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub records: Vec<SampleRecord>,
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    /// (height, width) in pixels.
    pub image_size: (usize, usize),
    pub provenance: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassDistribution {
    pub counts: Vec<usize>,
    pub imbalance_ratio: f64,
}

impl ClassDistribution {
    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

impl DatasetManifest {
    pub fn new(num_classes: usize, image_size: (usize, usize)) -> Self {
        Self {
            records: Vec::new(),
            num_classes,
            class_names: None,
            image_size,
            provenance: String::new(),
        }
    }

    /// Checks every manifest invariant.
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::invalid("num_classes must be at least 1"));
        }
        if self.image_size.0 == 0 || self.image_size.1 == 0 {
            return Err(Error::invalid("image_size must be positive"));
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                return Err(Error::ClassCountMismatch {
                    expected: self.num_classes,
                    got: names.len(),
                });
            }
        }
        let mut seen = HashSet::with_capacity(self.records.len());
        for record in &self.records {
            validate_record(record, self.num_classes)?;
            if !seen.insert(record.sample_id.as_str()) {
                return Err(Error::DuplicateSampleId(record.sample_id.clone()));
            }
        }
        Ok(())
    }

    pub fn split_records(&self, split: Split) -> impl Iterator<Item = &SampleRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn count(&self, split: Split) -> usize {
        self.split_records(split).count()
    }

    /// A copy restricted to records carrying keypoints.
    pub fn with_keypoints_only(&self) -> DatasetManifest {
        let mut out = self.clone();
        out.records.retain(|r| r.keypoints.is_some());
        out
    }

    /// Content fingerprint over the manifest metadata, every record and the
    /// bytes of every referenced image that exists on disk.
    pub fn fingerprint(&self) -> Result<String> {
        let mut hasher = Sha256::new();
        hasher.update(header_line(self).as_bytes());
        for record in &self.records {
            hasher.update(record.sample_id.as_bytes());
            hasher.update([0]);
            hasher.update(record.label.to_le_bytes());
            hasher.update(record.split.as_str().as_bytes());
            hasher.update(format_keypoints(record.keypoints.as_ref()).as_bytes());
            if record.image_path.exists() {
                let bytes = fs::read(&record.image_path).at(&record.image_path)?;
                hasher.update(Sha256::digest(&bytes));
            } else {
                hasher.update(record.image_path.to_string_lossy().as_bytes());
            }
        }
        Ok(hex::encode(&hasher.finalize()[..16]))
    }
}

fn validate_record(record: &SampleRecord, num_classes: usize) -> Result<()> {
    if record.label >= num_classes {
        return Err(Error::LabelOutOfRange {
            sample_id: record.sample_id.clone(),
            label: record.label,
            num_classes,
        });
    }
    if let Some(kps) = &record.keypoints {
        for kp in kps {
            if !(kp.x.is_finite() && kp.y.is_finite() && kp.confidence.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "keypoints of sample {}",
                    record.sample_id
                )));
            }
            if !(0.0..=1.0).contains(&kp.confidence) {
                return Err(Error::invalid(format!(
                    "sample {}: keypoint confidence {} outside [0, 1]",
                    record.sample_id, kp.confidence
                )));
            }
        }
    }
    Ok(())
}

fn header_line(manifest: &DatasetManifest) -> String {
    format!(
        "{HEADER_TAG} {HEADER_VERSION} num_classes={} height={} width={}",
        manifest.num_classes, manifest.image_size.0, manifest.image_size.1
    )
}

fn format_keypoints(keypoints: Option<&[Keypoint; NUM_KEYPOINTS]>) -> String {
    match keypoints {
        None => "-".to_string(),
        Some(kps) => kps
            .iter()
            .flat_map(|kp| [kp.x, kp.y, kp.confidence])
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(","),
    }
}

fn parse_keypoints(field: &str) -> std::result::Result<Option<[Keypoint; NUM_KEYPOINTS]>, String> {
    if field == "-" {
        return Ok(None);
    }
    let values = field
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|e| format!("bad keypoint value {v:?}: {e}"))
        })
        .collect::<std::result::Result<Vec<_>, _>>()?;
    if values.len() != NUM_KEYPOINTS * 3 {
        return Err(format!(
            "expected {} keypoint values, found {}",
            NUM_KEYPOINTS * 3,
            values.len()
        ));
    }
    let mut kps = [Keypoint {
        x: 0.0,
        y: 0.0,
        confidence: 0.0,
    }; NUM_KEYPOINTS];
    for (kp, chunk) in kps.iter_mut().zip(values.chunks_exact(3)) {
        *kp = Keypoint {
            x: chunk[0],
            y: chunk[1],
            confidence: chunk[2],
        };
    }
    Ok(Some(kps))
}

fn parse_header(line: &str) -> std::result::Result<(usize, (usize, usize)), String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(HEADER_TAG) {
        return Err(format!("missing {HEADER_TAG} header"));
    }
    match parts.next() {
        Some(HEADER_VERSION) => {}
        other => return Err(format!("unsupported manifest version {other:?}")),
    }
    let mut fields = BTreeMap::new();
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| format!("malformed header field {part:?}"))?;
        let value: usize = value
            .parse()
            .map_err(|e| format!("header field {key}: {e}"))?;
        fields.insert(key, value);
    }
    let get = |key: &str| {
        fields
            .get(key)
            .copied()
            .ok_or_else(|| format!("header is missing {key}="))
    };
    Ok((get("num_classes")?, (get("height")?, get("width")?)))
}

/// Loads and validates a manifest. Relative image paths are resolved against
/// the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let file = fs::File::open(path).at(path)?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };

    let mut lines = BufReader::new(file).lines().enumerate();
    let header = match lines.next() {
        Some((_, line)) => line.at(path)?,
        None => return Err(parse_err(1, "empty manifest".into())),
    };
    let (num_classes, image_size) = parse_header(header.trim()).map_err(|m| parse_err(1, m))?;
    let mut manifest = DatasetManifest::new(num_classes, image_size);
    let mut seen = HashSet::new();

    for (index, line) in lines {
        let line_no = index + 1;
        let line = line.at(path)?;
        let trimmed = line.trim_end_matches(['\r', '\n']);
        if trimmed.trim().is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("#provenance ") {
            manifest.provenance = rest.to_string();
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix("#class_names ") {
            manifest.class_names = Some(rest.split(',').map(str::to_string).collect());
            continue;
        }
        if trimmed.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split('\t').collect();
        if fields.len() != 5 {
            return Err(parse_err(
                line_no,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let label: usize = fields[2]
            .parse()
            .map_err(|e| parse_err(line_no, format!("bad label {:?}: {e}", fields[2])))?;
        let split: Split = fields[3].parse().map_err(|m| parse_err(line_no, m))?;
        let keypoints = parse_keypoints(fields[4]).map_err(|m| parse_err(line_no, m))?;
        let image_path = PathBuf::from(fields[1]);
        let image_path = if image_path.is_relative() {
            base.join(image_path)
        } else {
            image_path
        };
        let record = SampleRecord {
            sample_id: fields[0].to_string(),
            image_path,
            label,
            split,
            keypoints,
        };
        validate_record(&record, num_classes)?;
        if !seen.insert(record.sample_id.clone()) {
            return Err(Error::DuplicateSampleId(record.sample_id));
        }
        manifest.records.push(record);
    }
    manifest.validate()?;
    Ok(manifest)
}

/// Writes `manifest` to `path` atomically. Image paths under the manifest's
/// directory are stored relative to it.
pub fn write_manifest(manifest: &DatasetManifest, path: &Path) -> Result<()> {
    manifest.validate()?;
    let base = path.parent().unwrap_or(Path::new(""));
    let mut out = String::new();
    out.push_str(&header_line(manifest));
    out.push('\n');
    if !manifest.provenance.is_empty() {
        out.push_str(&format!(
            "#provenance {}\n",
            manifest.provenance.replace('\n', " ")
        ));
    }
    if let Some(names) = &manifest.class_names {
        out.push_str(&format!("#class_names {}\n", names.join(",")));
    }
    for record in &manifest.records {
        let image_path = record
            .image_path
            .strip_prefix(base)
            .unwrap_or(&record.image_path);
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            record.sample_id,
            image_path.display(),
            record.label,
            record.split,
            format_keypoints(record.keypoints.as_ref())
        ));
    }
    crate::io::write_atomic(path, out.as_bytes())
}

pub fn class_histogram(manifest: &DatasetManifest, split: Split) -> Result<ClassDistribution> {
    let mut counts = vec![0usize; manifest.num_classes];
    for record in manifest.split_records(split) {
        counts[record.label] += 1;
    }
    if counts.iter().all(|&c| c == 0) {
        return Err(Error::EmptySplit(split));
    }
    let max = *counts.iter().max().expect("num_classes >= 1");
    let min_nonzero = counts.iter().copied().filter(|&c| c > 0).min().unwrap_or(1);
    Ok(ClassDistribution {
        imbalance_ratio: max as f64 / min_nonzero as f64,
        counts,
    })
}

/// Indices of the records of `split`, grouped by class, in file order.
fn indices_by_class(manifest: &DatasetManifest, split: Option<Split>) -> Vec<Vec<usize>> {
    let mut by_class = vec![Vec::new(); manifest.num_classes];
    for (i, record) in manifest.records.iter().enumerate() {
        if split.map_or(true, |s| record.split == s) {
            by_class[record.label].push(i);
        }
    }
    by_class
}

/// Keeps at most `k_per_class` train records per class. Each class draws one
/// permutation from the seed and keeps a prefix, so selections for growing k
/// are nested. Val and test records pass through untouched.
pub fn stratified_subsample(
    manifest: &DatasetManifest,
    k_per_class: usize,
    seed: u64,
) -> Result<DatasetManifest> {
    if k_per_class == 0 {
        return Err(Error::invalid("k_per_class must be at least 1"));
    }
    manifest.validate()?;
    let mut keep = vec![true; manifest.records.len()];
    for (class, mut indices) in indices_by_class(manifest, Some(Split::Train))
        .into_iter()
        .enumerate()
    {
        let mut rng = seed::rng(seed, "subsample", class as u64);
        indices.shuffle(&mut rng);
        for &i in indices.iter().skip(k_per_class) {
            keep[i] = false;
        }
    }
    let mut out = manifest.clone();
    out.records = manifest
        .records
        .iter()
        .zip(keep)
        .filter_map(|(r, k)| k.then(|| r.clone()))
        .collect();
    out.provenance = format!(
        "{} | stratified_subsample k={k_per_class} seed={seed}",
        manifest.provenance
    );
    Ok(out)
}

/// Per-class (train, val, test) counts for a class of `n` records.
fn split_counts(n: usize, fractions: (f64, f64, f64)) -> (usize, usize, usize) {
    match n {
        0 => (0, 0, 0),
        1 => (1, 0, 0),
        2 => (1, 0, 1),
        _ => {
            let mut val = ((n as f64 * fractions.1).round() as usize).max(1);
            let mut test = ((n as f64 * fractions.2).round() as usize).max(1);
            while val + test >= n {
                if val > 1 {
                    val -= 1;
                } else {
                    test -= 1;
                }
            }
            (n - val - test, val, test)
        }
    }
}

/// Assigns every record a split tag, stratified per class. Classes too small
/// to populate all three splits fill train first, then test, then val.
pub fn split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<DatasetManifest> {
    let (train, val, test) = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!(
            "split fractions must be positive and sum to 1, got ({train}, {val}, {test})"
        )));
    }
    manifest.validate()?;
    let mut out = manifest.clone();
    for (class, mut indices) in indices_by_class(manifest, None).into_iter().enumerate() {
        let mut rng = seed::rng(seed, "split", class as u64);
        indices.shuffle(&mut rng);
        let (n_train, n_val, _) = split_counts(indices.len(), fractions);
        for (pos, &i) in indices.iter().enumerate() {
            out.records[i].split = if pos < n_train {
                Split::Train
            } else if pos < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    out.provenance = format!(
        "{} | split ({train}, {val}, {test}) seed={seed}",
        manifest.provenance
    );
    Ok(out)
}

/// Decodes one RGB image, checking it matches the declared geometry.
pub fn read_rgb(path: &Path, image_size: (usize, usize)) -> Result<Vec<u8>> {
    let img = image::open(path)
        .map_err(|e| match e {
            image::ImageError::IoError(source) => Error::Io {
                path: path.to_path_buf(),
                source,
            },
            other => Error::Image(other),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    if (h as usize, w as usize) != image_size {
        return Err(Error::shape(
            format!("image {}", path.display()),
            format!("{}x{}", image_size.0, image_size.1),
            format!("{h}x{w}"),
        ));
    }
    Ok(img.into_raw())
}

/// Converts interleaved RGB8 pixels to a `3 × H × W` float tensor in [-1, 1].
pub fn rgb_to_tensor(pixels: &[u8], image_size: (usize, usize)) -> Tensor {
    let (h, w) = image_size;
    Tensor::from_slice(pixels)
        .view([h as i64, w as i64, 3])
        .permute([2, 0, 1])
        .to_kind(Kind::Float)
        / 127.5
        - 1.0
}

/// Converts a `3 × H × W` tensor in [-1, 1] to interleaved RGB8 pixels.
pub fn tensor_to_rgb(image: &Tensor) -> Vec<u8> {
    let pixels = ((image.clamp(-1.0, 1.0) + 1.0) * 127.5)
        .round()
        .to_kind(Kind::Uint8)
        .permute([1, 2, 0])
        .contiguous();
    Vec::<u8>::try_from(pixels.flatten(0, -1)).expect("uint8 tensor converts")
}

pub fn write_png(path: &Path, image: &Tensor) -> Result<()> {
    let size = image.size();
    let (h, w) = (size[1] as u32, size[2] as u32);
    let buffer = image::RgbImage::from_raw(w, h, tensor_to_rgb(image))
        .ok_or_else(|| Error::shape("png buffer", "3xHxW", format!("{size:?}")))?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).at(parent)?;
    }
    buffer.save(path)?;
    Ok(())
}

/// Decodes the images of `records` into an `N × 3 × H × W` tensor in [-1, 1].
pub fn load_images<'a>(
    records: impl IntoIterator<Item = &'a SampleRecord>,
    image_size: (usize, usize),
) -> Result<Tensor> {
    let tensors = records
        .into_iter()
        .map(|r| read_rgb(&r.image_path, image_size).map(|px| rgb_to_tensor(&px, image_size)))
        .collect::<Result<Vec<_>>>()?;
    if tensors.is_empty() {
        return Ok(Tensor::zeros(
            [0, 3, image_size.0 as i64, image_size.1 as i64],
            (Kind::Float, tch::Device::Cpu),
        ));
    }
    Ok(Tensor::stack(&tensors, 0))
}

/// Images and labels of one split, decoded.
pub struct LabeledImages {
    pub images: Tensor,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn from_manifest(manifest: &DatasetManifest, split: Split) -> Result<Self> {
        let records: Vec<&SampleRecord> = manifest.split_records(split).collect();
        Ok(Self {
            images: load_images(records.iter().copied(), manifest.image_size)?,
            labels: records.iter().map(|r| r.label).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}
