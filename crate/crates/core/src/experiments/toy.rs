//! Procedurally drawn hand-like glyphs with exact keypoints.
//!
//! Each class is a pattern of extended and curled fingers on a 21-point
//! skeleton. Samples vary in rotation, scale, position, finger angles, skin
//! tone, brightness and background.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datasets::{load_manifest, write_manifest, DatasetManifest, Keypoint, SampleRecord, Split, NUM_KEYPOINTS};
use crate::error::{Error, IoContext, Result};
use crate::seed;

/// Train counts of the 10-class long-tail preset.
pub const LONG_TAIL_COUNTS: [usize; 10] = [200, 120, 70, 40, 25, 15, 9, 6, 4, 3];

/// Finger extension per class: thumb, index, middle, ring, pinky.
const PATTERNS: [[bool; 5]; 10] = [
    [true, true, true, true, true],
    [false, true, false, false, false],
    [false, true, true, false, false],
    [false, false, false, false, false],
    [false, true, true, true, true],
    [true, true, false, false, false],
    [true, false, false, false, true],
    [false, true, true, true, false],
    [true, false, false, false, false],
    [false, false, false, false, true],
];

const CLASS_NAMES: [&str; 10] = [
    "open", "point", "vee", "fist", "four", "ell", "why", "three", "thumb", "pinky",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToySpec {
    /// Train samples per class; the class count is its length (at most 10).
    pub counts: Vec<usize>,
    pub val_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    /// Palette family; different domains mimic different source datasets.
    pub domain: u32,
}

impl Default for ToySpec {
    fn default() -> Self {
        Self::long_tail()
    }
}

impl ToySpec {
    pub fn long_tail() -> Self {
        Self {
            counts: LONG_TAIL_COUNTS.to_vec(),
            val_per_class: 10,
            test_per_class: 20,
            image_size: 64,
            domain: 0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.counts.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.counts.is_empty() || self.counts.len() > PATTERNS.len() {
            return Err(Error::Config(format!(
                "toy datasets have 1 to {} classes",
                PATTERNS.len()
            )));
        }
        if self.counts.contains(&0) {
            return Err(Error::Config("toy class counts must be positive".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("toy images must be at least 16 px".into()));
        }
        Ok(())
    }
}

struct Palette {
    background: [f64; 3],
    background_jitter: f64,
    skin: [f64; 3],
    skin_jitter: f64,
}

fn palette(domain: u32) -> Palette {
    match domain % 2 {
        0 => Palette {
            background: [0.25, 0.35, 0.45],
            background_jitter: 0.1,
            skin: [0.85, 0.65, 0.5],
            skin_jitter: 0.06,
        },
        _ => Palette {
            background: [0.5, 0.4, 0.3],
            background_jitter: 0.1,
            skin: [0.7, 0.5, 0.4],
            skin_jitter: 0.06,
        },
    }
}

type Point = (f64, f64);

/// Keypoints in hand-local units: wrist at the origin, fingers towards −y.
fn local_skeleton(pattern: &[bool; 5], rng: &mut ChaCha8Rng) -> [Point; NUM_KEYPOINTS] {
    let mut kp = [(0.0, 0.0); NUM_KEYPOINTS];
    let bases: [Point; 5] = [(-0.3, -0.3), (-0.3, -0.95), (-0.1, -1.02), (0.1, -0.98), (0.3, -0.88)];
    let headings = [-150f64, -97.0, -90.0, -84.0, -76.0];
    let lengths = [
        [0.3, 0.25, 0.22],
        [0.42, 0.27, 0.22],
        [0.46, 0.3, 0.24],
        [0.43, 0.28, 0.22],
        [0.34, 0.22, 0.19],
    ];
    for finger in 0..5 {
        let first = 1 + finger * 4;
        let jitter = |rng: &mut ChaCha8Rng, amount: f64| rng.gen_range(-amount..=amount);
        let (bx, by) = bases[finger];
        kp[first] = (bx + jitter(rng, 0.03), by + jitter(rng, 0.03));
        let mut heading = (headings[finger] + jitter(rng, 8.0)).to_radians();
        let bends: [f64; 3] = if pattern[finger] {
            [0.0, jitter(rng, 6.0), jitter(rng, 6.0)]
        } else if finger == 0 {
            // A curled thumb folds across the palm.
            [115.0 + jitter(rng, 10.0), 25.0 + jitter(rng, 8.0), 20.0]
        } else {
            [0.0, 150.0 + jitter(rng, 12.0), 40.0 + jitter(rng, 10.0)]
        };
        let scale = if pattern[finger] { 1.0 } else { 0.7 };
        for seg in 0..3 {
            heading += bends[seg].to_radians();
            let len = lengths[finger][seg] * scale * (1.0 + jitter(rng, 0.08));
            let (px, py) = kp[first + seg];
            kp[first + seg + 1] = (px + len * heading.cos(), py + len * heading.sin());
        }
    }
    kp
}

fn clamp01(v: f64) -> f64 {
    v.clamp(0.0, 1.0)
}

fn distance_to_segment(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        clamp01(((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2)
    };
    ((p.0 - a.0 - t * dx).powi(2) + (p.1 - a.1 - t * dy).powi(2)).sqrt()
}

fn inside_polygon(p: Point, poly: &[Point]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (a, b) = (poly[i], poly[j]);
        if (a.1 > p.1) != (b.1 > p.1) && p.0 < (b.0 - a.0) * (p.1 - a.1) / (b.1 - a.1) + a.0 {
            inside = !inside;
        }
        j = i;
    }
    inside
}

/// One glyph: RGB8 pixels plus keypoints normalized so that pixel
/// `x·(size−1)` is the keypoint location.
fn draw_sample(
    class: usize,
    size: usize,
    palette: &Palette,
    rng: &mut ChaCha8Rng,
) -> (Vec<u8>, [Keypoint; NUM_KEYPOINTS]) {
    let local = local_skeleton(&PATTERNS[class], rng);
    let extent = (size - 1) as f64;
    let angle = rng.gen_range(-0.35..=0.35);
    let scale = rng.gen_range(0.29..=0.35) * extent;
    let origin = (
        (0.5 + rng.gen_range(-0.06..=0.06)) * extent,
        (0.86 + rng.gen_range(-0.04..=0.03)) * extent,
    );
    let (sin, cos) = f64::sin_cos(angle);
    let to_pixel = |(x, y): Point| {
        (
            origin.0 + scale * (x * cos - y * sin),
            origin.1 + scale * (x * sin + y * cos),
        )
    };
    let pixels: Vec<Point> = local.iter().map(|&p| to_pixel(p)).collect();

    let jitter3 = |base: [f64; 3], amount: f64, rng: &mut ChaCha8Rng| {
        let shift = rng.gen_range(-amount..=amount);
        base.map(|c| clamp01(c + shift + rng.gen_range(-amount..=amount) * 0.5))
    };
    let bg_a = jitter3(palette.background, palette.background_jitter, rng);
    let bg_b = jitter3(palette.background, palette.background_jitter, rng);
    let skin = jitter3(palette.skin, palette.skin_jitter, rng);
    let brightness = rng.gen_range(0.9..=1.1);
    let gradient_angle = rng.gen_range(0.0..2.0 * PI);
    let (gs, gc) = gradient_angle.sin_cos();
    let noise = rng.gen_range(0.01..=0.05);
    // Half-width of a finger in pixels.
    let thickness = rng.gen_range(0.12..=0.14) * scale;
    let palm = [
        pixels[0],
        to_pixel((-0.38, -0.25)),
        pixels[5],
        pixels[9],
        pixels[13],
        pixels[17],
        to_pixel((0.32, -0.2)),
    ];

    let mut image = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let p = (col as f64, row as f64);
            let t = 0.5 + 0.5 * ((p.0 / extent - 0.5) * gc + (p.1 / extent - 0.5) * gs);
            let mut color: [f64; 3] = std::array::from_fn(|c| bg_a[c] * (1.0 - t) + bg_b[c] * t);
            let mut cover: f64 = if inside_polygon(p, &palm) { 1.0 } else { 0.0 };
            let mut edge = f64::INFINITY;
            for finger in 0..5 {
                let first = 1 + finger * 4;
                let chain = [0, first, first + 1, first + 2, first + 3];
                for w in chain.windows(2).skip(1) {
                    let d = distance_to_segment(p, pixels[w[0]], pixels[w[1]]);
                    edge = edge.min(d);
                }
            }
            cover = cover.max(clamp01(thickness + 0.5 - edge));
            // Darker rim along finger outlines.
            let shade = if edge < thickness + 0.5 && edge > thickness - 1.0 { 0.8 } else { 1.0 };
            for c in 0..3 {
                color[c] = color[c] * (1.0 - cover) + skin[c] * shade * cover;
                color[c] = clamp01(color[c] * brightness + rng.gen_range(-noise..=noise));
                image.push((color[c] * 255.0).round() as u8);
            }
        }
    }
    let keypoints = std::array::from_fn(|i| Keypoint {
        x: clamp01(pixels[i].0 / extent),
        y: clamp01(pixels[i].1 / extent),
        confidence: rng.gen_range(0.6..=1.0),
    });
    (image, keypoints)
}

/// Renders a toy dataset into `out_dir` (`images/` plus `manifest.tsv`) and
/// returns the manifest as loaded back from disk. The train split holds
/// `spec.counts[c]` samples of class `c`; val and test are balanced.
pub fn make_toy_dataset(spec: &ToySpec, seed: u64, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let size = spec.image_size;
    let palette = palette(spec.domain);
    let mut manifest = DatasetManifest::new(spec.num_classes(), (size, size));
    manifest.class_names = Some(CLASS_NAMES[..spec.num_classes()].iter().map(|s| s.to_string()).collect());
    manifest.provenance = format!(
        "toy counts={:?} val={} test={} domain={} seed={seed}",
        spec.counts, spec.val_per_class, spec.test_per_class, spec.domain
    );
    for (class, &train) in spec.counts.iter().enumerate() {
        let plan = [
            (Split::Train, train),
            (Split::Val, spec.val_per_class),
            (Split::Test, spec.test_per_class),
        ];
        for (split, count) in plan {
            let dir = out_dir.join("images").join(split.as_str()).join(class.to_string());
            fs::create_dir_all(&dir).at(&dir)?;
            for i in 0..count {
                let stream = format!("toy/{split}/{class}");
                let mut rng = seed::rng(seed, &stream, i as u64);
                let (pixels, keypoints) = draw_sample(class, size, &palette, &mut rng);
                let path = dir.join(format!("{i:05}.png"));
                image::RgbImage::from_raw(size as u32, size as u32, pixels)
                    .expect("buffer matches geometry")
                    .save(&path)?;
                manifest.records.push(SampleRecord {
                    sample_id: format!("{split}-{class}-{i:05}"),
                    image_path: path,
                    label: class,
                    split,
                    keypoints: Some(keypoints),
                });
            }
        }
    }
    let manifest_path = out_dir.join("manifest.tsv");
    write_manifest(&manifest, &manifest_path)?;
    load_manifest(&manifest_path)
}
