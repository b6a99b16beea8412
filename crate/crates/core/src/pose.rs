//! Hand keypoints and their multi-channel raster renderings.
//!
//! Keypoint `(x, y)` in normalized crop coordinates maps to pixel
//! `(round(x·(W−1)), round(y·(H−1)))`, rounding half to even. That mapping
//! keeps horizontally mirrored poses pixel-exact on odd-width rasters; on
//! even widths a keypoint at the exact center lands one pixel right of its
//! mirror image.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::datasets::{Keypoint, NUM_KEYPOINTS};
use crate::error::{Error, Result};

pub const NUM_BONES: usize = 20;

/// Keypoints whose confidence falls below this render as an all-zero channel.
pub const DEFAULT_CONFIDENCE_GATE: f64 = 0.05;

/// Standard 21-point hand topology: keypoint 0 is the wrist, then four joints
/// per finger from base to tip (thumb 1–4, index 5–8, middle 9–12, ring
/// 13–16, pinky 17–20). Each entry is `(parent, child)`.
pub const HAND_BONES: [(usize, usize); NUM_BONES] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (0, 5),
    (5, 6),
    (6, 7),
    (7, 8),
    (0, 9),
    (9, 10),
    (10, 11),
    (11, 12),
    (0, 13),
    (13, 14),
    (14, 15),
    (15, 16),
    (0, 17),
    (17, 18),
    (18, 19),
    (19, 20),
];

#[derive(Clone, Debug, PartialEq)]
pub struct HandSkeleton {
    pub bones: Vec<(usize, usize)>,
}

impl Default for HandSkeleton {
    fn default() -> Self {
        Self {
            bones: HAND_BONES.to_vec(),
        }
    }
}

impl HandSkeleton {
    /// Checks the edge list is a 20-edge tree over the 21 keypoints rooted at
    /// the wrist, with every parent reached before its child.
    pub fn validate(&self) -> Result<()> {
        if self.bones.len() != NUM_BONES {
            return Err(Error::shape("skeleton bones", NUM_BONES, self.bones.len()));
        }
        let mut reached = [false; NUM_KEYPOINTS];
        reached[0] = true;
        for &(parent, child) in &self.bones {
            if parent >= NUM_KEYPOINTS || child >= NUM_KEYPOINTS {
                return Err(Error::invalid(format!("bone ({parent}, {child}) out of range")));
            }
            if !reached[parent] || reached[child] {
                return Err(Error::invalid(format!(
                    "bone ({parent}, {child}) does not extend a wrist-rooted tree"
                )));
            }
            reached[child] = true;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HandPose {
    /// `(x, y)` per keypoint, clamped to [0, 1].
    pub keypoints: [(f64, f64); NUM_KEYPOINTS],
    pub confidences: [f64; NUM_KEYPOINTS],
}

impl HandPose {
    pub fn new(keypoints: [(f64, f64); NUM_KEYPOINTS], confidences: [f64; NUM_KEYPOINTS]) -> Self {
        Self {
            keypoints: keypoints.map(|(x, y)| (x.clamp(0.0, 1.0), y.clamp(0.0, 1.0))),
            confidences: confidences.map(|c| c.clamp(0.0, 1.0)),
        }
    }

    pub fn from_keypoints(kps: &[Keypoint; NUM_KEYPOINTS]) -> Self {
        Self::new(kps.map(|k| (k.x, k.y)), kps.map(|k| k.confidence))
    }

    pub fn mean_confidence(&self) -> f64 {
        self.confidences.iter().sum::<f64>() / NUM_KEYPOINTS as f64
    }

    /// The pose mirrored across the vertical axis (`x ← 1 − x`).
    pub fn flipped_horizontal(&self) -> Self {
        Self {
            keypoints: self.keypoints.map(|(x, y)| (1.0 - x, y)),
            confidences: self.confidences,
        }
    }
}

/// Picks the detected hand with the highest mean confidence (first on ties).
pub fn select_primary_hand(candidates: &[HandPose]) -> Option<HandPose> {
    candidates
        .iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            a.mean_confidence()
                .total_cmp(&b.mean_confidence())
                .then(ib.cmp(ia))
        })
        .map(|(_, pose)| pose.clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseMode {
    Joints,
    Bones,
}

impl PoseMode {
    pub fn channels(self) -> usize {
        match self {
            PoseMode::Joints => NUM_KEYPOINTS,
            PoseMode::Bones => NUM_BONES,
        }
    }
}

/// A `C × H × W` raster with values in [0, 1].
#[derive(Clone, Debug, PartialEq)]
pub struct ConditioningMap {
    pub mode: PoseMode,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ConditioningMap {
    fn zeros(mode: PoseMode, height: usize, width: usize) -> Self {
        Self {
            mode,
            height,
            width,
            data: vec![0.0; mode.channels() * height * width],
        }
    }

    pub fn channels(&self) -> usize {
        self.mode.channels()
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let plane = self.height * self.width;
        &self.data[c * plane..(c + 1) * plane]
    }

    fn channel_mut(&mut self, c: usize) -> &mut [f32] {
        let plane = self.height * self.width;
        &mut self.data[c * plane..(c + 1) * plane]
    }

    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.channel(c)[row * self.width + col]
    }

    /// Mirror across the vertical axis.
    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for c in 0..self.channels() {
            let src = self.channel(c).to_vec();
            let dst = out.channel_mut(c);
            for row in 0..self.height {
                for col in 0..self.width {
                    dst[row * self.width + col] = src[row * self.width + self.width - 1 - col];
                }
            }
        }
        out
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_slice(&self.data).view([
            self.channels() as i64,
            self.height as i64,
            self.width as i64,
        ])
    }
}

/// Renderer settings. `sigma_px = None` scales 1.5 px at 64 px width
/// proportionally with the raster width.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub mode: PoseMode,
    pub sigma_px: Option<f64>,
    pub thickness_px: f64,
    pub confidence_gate: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            mode: PoseMode::Bones,
            sigma_px: None,
            thickness_px: 1.0,
            confidence_gate: DEFAULT_CONFIDENCE_GATE,
        }
    }
}

pub fn default_sigma(width: usize) -> f64 {
    1.5 * width as f64 / 64.0
}

impl RenderConfig {
    pub fn render(&self, pose: &HandPose, height: usize, width: usize) -> Result<ConditioningMap> {
        match self.mode {
            PoseMode::Joints => render_joints_gated(
                pose,
                height,
                width,
                self.sigma_px.unwrap_or_else(|| default_sigma(width)),
                self.confidence_gate,
            ),
            PoseMode::Bones => render_bones_gated(
                pose,
                &HandSkeleton::default(),
                height,
                width,
                self.thickness_px,
                self.confidence_gate,
            ),
        }
    }
}

fn to_pixel(value: f64, extent: usize) -> f64 {
    (value * (extent as f64 - 1.0)).round_ties_even()
}

pub fn render_joints(
    pose: &HandPose,
    height: usize,
    width: usize,
    sigma_px: f64,
) -> Result<ConditioningMap> {
    render_joints_gated(pose, height, width, sigma_px, DEFAULT_CONFIDENCE_GATE)
}

/// One isotropic Gaussian per keypoint, each in its own channel, peaking at
/// exactly 1 on the keypoint pixel.
pub fn render_joints_gated(
    pose: &HandPose,
    height: usize,
    width: usize,
    sigma_px: f64,
    confidence_gate: f64,
) -> Result<ConditioningMap> {
    if !(sigma_px > 0.0 && sigma_px.is_finite()) {
        return Err(Error::invalid(format!("sigma_px must be positive, got {sigma_px}")));
    }
    let mut map = ConditioningMap::zeros(PoseMode::Joints, height, width);
    let denom = 2.0 * sigma_px * sigma_px;
    for (k, &(x, y)) in pose.keypoints.iter().enumerate() {
        if pose.confidences[k] < confidence_gate {
            continue;
        }
        let (u, v) = (to_pixel(x, width), to_pixel(y, height));
        let channel = map.channel_mut(k);
        for row in 0..height {
            let dv = row as f64 - v;
            for col in 0..width {
                let du = col as f64 - u;
                channel[row * width + col] = (-(du * du + dv * dv) / denom).exp() as f32;
            }
        }
    }
    Ok(map)
}

pub fn render_bones(
    pose: &HandPose,
    skeleton: &HandSkeleton,
    height: usize,
    width: usize,
    thickness_px: f64,
) -> Result<ConditioningMap> {
    render_bones_gated(pose, skeleton, height, width, thickness_px, DEFAULT_CONFIDENCE_GATE)
}

/// One anti-aliased segment per bone, each in its own channel. Pixel coverage
/// is `clamp(t/2 + 1/2 − d, 0, 1)` where `d` is the distance from the pixel to
/// the segment, so a zero-length bone becomes a disc of radius `t/2`.
pub fn render_bones_gated(
    pose: &HandPose,
    skeleton: &HandSkeleton,
    height: usize,
    width: usize,
    thickness_px: f64,
    confidence_gate: f64,
) -> Result<ConditioningMap> {
    if !(thickness_px >= 1.0 && thickness_px.is_finite()) {
        return Err(Error::invalid(format!(
            "thickness_px must be at least 1, got {thickness_px}"
        )));
    }
    skeleton.validate()?;
    let mut map = ConditioningMap::zeros(PoseMode::Bones, height, width);
    let reach = thickness_px / 2.0 + 0.5;
    for (b, &(parent, child)) in skeleton.bones.iter().enumerate() {
        if pose.confidences[parent] < confidence_gate || pose.confidences[child] < confidence_gate
        {
            continue;
        }
        let a = (
            to_pixel(pose.keypoints[parent].0, width),
            to_pixel(pose.keypoints[parent].1, height),
        );
        let z = (
            to_pixel(pose.keypoints[child].0, width),
            to_pixel(pose.keypoints[child].1, height),
        );
        let col_lo = (a.0.min(z.0) - reach).floor().max(0.0) as usize;
        let col_hi = ((a.0.max(z.0) + reach).ceil() as usize).min(width - 1);
        let row_lo = (a.1.min(z.1) - reach).floor().max(0.0) as usize;
        let row_hi = ((a.1.max(z.1) + reach).ceil() as usize).min(height - 1);
        let channel = map.channel_mut(b);
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let d = point_segment_distance((col as f64, row as f64), a, z);
                let value = (reach - d).clamp(0.0, 1.0);
                channel[row * width + col] = value as f32;
            }
        }
    }
    Ok(map)
}

fn point_segment_distance(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a.0 + t * dx, a.1 + t * dy);
    ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt()
}

/// Stacks rendered maps into an `N × C × H × W` float tensor.
pub fn stack_maps(maps: &[ConditioningMap]) -> Result<Tensor> {
    let first = maps
        .first()
        .ok_or_else(|| Error::invalid("cannot stack zero conditioning maps"))?;
    let tensors: Vec<Tensor> = maps.iter().map(ConditioningMap::to_tensor).collect();
    for m in maps {
        if (m.mode, m.height, m.width) != (first.mode, first.height, first.width) {
            return Err(Error::shape(
                "conditioning map",
                format!("{:?} {}x{}", first.mode, first.height, first.width),
                format!("{:?} {}x{}", m.mode, m.height, m.width),
            ));
        }
    }
    Ok(Tensor::stack(&tensors, 0).to_kind(Kind::Float))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pose_at(points: &[(f64, f64)]) -> HandPose {
        let mut kps = [(0.5, 0.5); NUM_KEYPOINTS];
        for (i, &p) in points.iter().enumerate() {
            kps[i] = p;
        }
        HandPose::new(kps, [1.0; NUM_KEYPOINTS])
    }

    #[test]
    fn skeleton_is_a_wrist_rooted_tree() {
        HandSkeleton::default().validate().unwrap();
        let mut bad = HandSkeleton::default();
        bad.bones[3] = (4, 3);
        assert!(bad.validate().is_err());
        bad.bones.pop();
        assert!(bad.validate().is_err());
    }

    #[test]
    fn primary_hand_selection() {
        assert_eq!(select_primary_hand(&[]), None);
        let a = HandPose::new([(0.1, 0.1); NUM_KEYPOINTS], [0.9; NUM_KEYPOINTS]);
        let b = HandPose::new([(0.2, 0.2); NUM_KEYPOINTS], [0.4; NUM_KEYPOINTS]);
        assert_eq!(select_primary_hand(&[a.clone()]), Some(a.clone()));
        assert_eq!(select_primary_hand(&[b.clone(), a.clone()]), Some(a.clone()));
        let a2 = HandPose::new([(0.3, 0.3); NUM_KEYPOINTS], [0.9; NUM_KEYPOINTS]);
        assert_eq!(select_primary_hand(&[a.clone(), a2]), Some(a));
    }

    #[test]
    fn out_of_range_keypoints_are_clamped() {
        let pose = pose_at(&[(-0.2, 1.4)]);
        assert_eq!(pose.keypoints[0], (0.0, 1.0));
    }

    #[test]
    fn gaussian_peak_and_offset_value() {
        let pose = pose_at(&[(0.5, 0.5)]);
        let map = render_joints(&pose, 64, 64, 1.5).unwrap();
        assert_eq!(map.channels(), 21);
        let ch = map.channel(0);
        let (argmax, &max) = ch
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        assert_eq!((argmax / 64, argmax % 64), (32, 32));
        assert_eq!(max, 1.0);
        let expected = (-2.0f64).exp();
        assert!((map.at(0, 32, 35) as f64 - expected).abs() < 1e-6);
        assert!((expected - 0.1353).abs() < 1e-4);
    }

    #[test]
    fn overlapping_keypoints_keep_separate_channels() {
        let pose = pose_at(&[(0.3, 0.6), (0.3, 0.6)]);
        let map = render_joints(&pose, 64, 64, 1.5).unwrap();
        assert_eq!(map.channel(0), map.channel(1));
        assert!(map.channel(0).iter().any(|&v| v == 1.0));
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let pose = pose_at(&[]);
        assert!(render_joints(&pose, 8, 8, 0.0).is_err());
        assert!(render_joints(&pose, 8, 8, -1.0).is_err());
    }

    #[test]
    fn degenerate_bone_is_a_disc() {
        let pose = pose_at(&[(0.5, 0.5), (0.5, 0.5)]);
        let map = render_bones(&pose, &HandSkeleton::default(), 64, 64, 3.0).unwrap();
        let ch = map.channel(0);
        for row in 0..64 {
            for col in 0..64 {
                let d = (((row as f64) - 32.0).powi(2) + ((col as f64) - 32.0).powi(2)).sqrt();
                let v = ch[row * 64 + col] as f64;
                assert!((v - (2.0 - d).clamp(0.0, 1.0)).abs() < 1e-6);
                if d <= 1.5 - 0.5 {
                    assert_eq!(v, 1.0);
                }
            }
        }
    }

    #[test]
    fn gated_keypoints_render_zero() {
        let pose = HandPose::new([(0.4, 0.4); NUM_KEYPOINTS], [0.01; NUM_KEYPOINTS]);
        let bones = render_bones(&pose, &HandSkeleton::default(), 32, 32, 1.0).unwrap();
        assert_eq!(bones.channels(), 20);
        assert!(bones.data.iter().all(|&v| v == 0.0));
        let joints = render_joints(&pose, 32, 32, 1.5).unwrap();
        assert!(joints.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn thin_bones_require_unit_thickness() {
        let pose = pose_at(&[]);
        assert!(render_bones(&pose, &HandSkeleton::default(), 8, 8, 0.5).is_err());
    }
}
