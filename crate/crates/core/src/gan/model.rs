//! Residual generator and discriminator shared by both conditioning modes.
//!
//! The generator upsamples a 4×4 seed through `log2(size/4)` residual blocks,
//! each normalized by class-conditional batch norm (label mode) or SPADE
//! (pose mode). The discriminator mirrors it with spectrally normalized
//! downsampling blocks; in pose mode the conditioning map is concatenated to
//! the image, in label mode a second head emits a unit embedding for the
//! data-to-data cross-entropy.

use serde::{Deserialize, Serialize};
use tch::nn;
use tch::{Kind, Tensor};

use super::layers::{conv3x3, ConditionalBatchNorm, SnConv2d, SnLinear, Spade};
use super::{Conditioning, GanMode};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSpec {
    pub mode: GanMode,
    /// Square image side in pixels; must be `4 · 2^k` for some `k ≥ 1`.
    pub image_size: usize,
    pub z_dim: usize,
    pub num_classes: usize,
    /// Conditioning-map channels (pose mode only, else 0).
    pub cond_channels: usize,
    pub g_width: usize,
    pub d_width: usize,
    pub d_embed: usize,
    pub spade_hidden: usize,
}

impl ArchSpec {
    pub fn stages(&self) -> Result<usize> {
        let mut size = self.image_size;
        let mut stages = 0;
        while size > 4 && size % 2 == 0 {
            size /= 2;
            stages += 1;
        }
        if size != 4 || stages == 0 {
            return Err(Error::invalid(format!(
                "image size {} is not 4·2^k",
                self.image_size
            )));
        }
        Ok(stages)
    }

    fn g_channels(&self, stages: usize) -> Vec<i64> {
        (0..=stages)
            .map(|i| (self.g_width << (stages - i)).min(self.g_width * 8) as i64)
            .collect()
    }

    fn d_channels(&self, stages: usize) -> Vec<i64> {
        (0..stages)
            .map(|i| (self.d_width << i).min(self.d_width * 8) as i64)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.stages()?;
        if self.z_dim == 0 || self.g_width == 0 || self.d_width == 0 {
            return Err(Error::invalid("z_dim and widths must be positive"));
        }
        match self.mode {
            GanMode::Label if self.num_classes == 0 || self.d_embed == 0 => Err(Error::invalid(
                "label mode needs num_classes and d_embed",
            )),
            GanMode::Pose if self.cond_channels == 0 || self.spade_hidden == 0 => Err(
                Error::invalid("pose mode needs cond_channels and spade_hidden"),
            ),
            _ => Ok(()),
        }
    }
}

#[derive(Debug)]
enum CondNorm {
    Label(ConditionalBatchNorm),
    Pose(Spade),
}

impl CondNorm {
    fn new(p: &nn::Path, channels: i64, spec: &ArchSpec) -> Self {
        match spec.mode {
            GanMode::Label => {
                CondNorm::Label(ConditionalBatchNorm::new(p, channels, spec.num_classes as i64))
            }
            GanMode::Pose => CondNorm::Pose(Spade::new(
                p,
                channels,
                spec.cond_channels as i64,
                spec.spade_hidden as i64,
            )),
        }
    }

    fn forward_t(&self, x: &Tensor, cond: &Conditioning, train: bool) -> Result<Tensor> {
        match (self, cond) {
            (CondNorm::Label(cbn), Conditioning::Labels(labels)) => {
                Ok(cbn.forward_t(x, labels, train))
            }
            (CondNorm::Pose(spade), Conditioning::Maps(maps)) => spade.forward_t(x, maps, train),
            (CondNorm::Label(_), other) | (CondNorm::Pose(_), other) => Err(Error::ModeMismatch {
                expected: match self {
                    CondNorm::Label(_) => "label".into(),
                    CondNorm::Pose(_) => "pose".into(),
                },
                got: other.mode().to_string(),
            }),
        }
    }
}

#[derive(Debug)]
struct GBlock {
    norm1: CondNorm,
    conv1: nn::Conv2D,
    norm2: CondNorm,
    conv2: nn::Conv2D,
    shortcut: nn::Conv2D,
}

impl GBlock {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64, spec: &ArchSpec) -> Self {
        Self {
            norm1: CondNorm::new(&(p / "norm1"), in_ch, spec),
            conv1: conv3x3(p / "conv1", in_ch, out_ch),
            norm2: CondNorm::new(&(p / "norm2"), out_ch, spec),
            conv2: conv3x3(p / "conv2", out_ch, out_ch),
            shortcut: nn::conv2d(p / "shortcut", in_ch, out_ch, 1, Default::default()),
        }
    }

    fn forward_t(&self, x: &Tensor, cond: &Conditioning, train: bool) -> Result<Tensor> {
        let size = x.size();
        let up = |t: &Tensor| t.upsample_nearest2d([size[2] * 2, size[3] * 2], None::<f64>, None::<f64>);
        let h = self.norm1.forward_t(x, cond, train)?.relu();
        let h = up(&h).apply(&self.conv1);
        let h = self.norm2.forward_t(&h, cond, train)?.relu().apply(&self.conv2);
        Ok(h + up(x).apply(&self.shortcut))
    }
}

#[derive(Debug)]
pub struct Generator {
    spec: ArchSpec,
    base_channels: i64,
    input: nn::Linear,
    blocks: Vec<GBlock>,
    out_norm: nn::BatchNorm,
    out_conv: nn::Conv2D,
}

impl Generator {
    pub fn new(p: &nn::Path, spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let stages = spec.stages()?;
        let ch = spec.g_channels(stages);
        let blocks = (0..stages)
            .map(|i| GBlock::new(&(p / format!("block{i}")), ch[i], ch[i + 1], spec))
            .collect();
        Ok(Self {
            spec: spec.clone(),
            base_channels: ch[0],
            input: nn::linear(p / "input", spec.z_dim as i64, ch[0] * 16, Default::default()),
            blocks,
            out_norm: nn::batch_norm2d(p / "out_norm", ch[stages], Default::default()),
            out_conv: conv3x3(p / "out_conv", ch[stages], 3),
        })
    }

    /// Maps latents `N × z_dim` to images `N × 3 × S × S` in [−1, 1].
    pub fn forward_t(&self, z: &Tensor, cond: &Conditioning, train: bool) -> Result<Tensor> {
        let zs = z.size();
        if zs.len() != 2 || zs[1] != self.spec.z_dim as i64 {
            return Err(Error::shape("latent", format!("N×{}", self.spec.z_dim), format!("{zs:?}")));
        }
        cond.check(&self.spec, zs[0])?;
        let mut h = z.apply(&self.input).view([zs[0], self.base_channels, 4, 4]);
        for block in &self.blocks {
            h = block.forward_t(&h, cond, train)?;
        }
        Ok(h.apply_t(&self.out_norm, train).relu().apply(&self.out_conv).tanh())
    }
}

#[derive(Debug)]
struct DBlock {
    conv1: SnConv2d,
    conv2: SnConv2d,
    shortcut: SnConv2d,
    first: bool,
}

impl DBlock {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64, first: bool) -> Self {
        Self {
            conv1: SnConv2d::new(&(p / "conv1"), in_ch, out_ch, 3),
            conv2: SnConv2d::new(&(p / "conv2"), out_ch, out_ch, 3),
            shortcut: SnConv2d::new(&(p / "shortcut"), in_ch, out_ch, 1),
            first,
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        if self.first {
            let h = self.conv1.forward_t(x, train).relu();
            let h = self.conv2.forward_t(&h, train).avg_pool2d_default(2);
            h + self.shortcut.forward_t(&x.avg_pool2d_default(2), train)
        } else {
            let h = self.conv1.forward_t(&x.relu(), train).relu();
            let h = self.conv2.forward_t(&h, train).avg_pool2d_default(2);
            h + self.shortcut.forward_t(x, train).avg_pool2d_default(2)
        }
    }

    fn spectral_norms(&self) -> [f64; 3] {
        [
            self.conv1.spectral().normalized_spectral_norm(),
            self.conv2.spectral().normalized_spectral_norm(),
            self.shortcut.spectral().normalized_spectral_norm(),
        ]
    }
}

pub struct DiscriminatorOutput {
    /// `N` adversarial scores.
    pub adv: Tensor,
    /// `N × d_embed` unit embeddings (label mode only).
    pub embedding: Option<Tensor>,
}

#[derive(Debug)]
pub struct Discriminator {
    spec: ArchSpec,
    blocks: Vec<DBlock>,
    adv: SnLinear,
    embed: Option<SnLinear>,
    proxies: Option<Tensor>,
}

fn normalize_rows(t: &Tensor) -> Tensor {
    t / t.norm_scalaropt_dim(2.0, [1], true).clamp_min(1e-12)
}

impl Discriminator {
    pub fn new(p: &nn::Path, spec: &ArchSpec) -> Result<Self> {
        spec.validate()?;
        let stages = spec.stages()?;
        let ch = spec.d_channels(stages);
        let in_ch = match spec.mode {
            GanMode::Label => 3,
            GanMode::Pose => 3 + spec.cond_channels as i64,
        };
        let blocks = (0..stages)
            .map(|i| {
                let prev = if i == 0 { in_ch } else { ch[i - 1] };
                DBlock::new(&(p / format!("block{i}")), prev, ch[i], i == 0)
            })
            .collect();
        let feat = ch[stages - 1];
        let (embed, proxies) = match spec.mode {
            GanMode::Label => (
                Some(SnLinear::new(&(p / "embed"), feat, spec.d_embed as i64)),
                Some(p.var(
                    "proxies",
                    &[spec.num_classes as i64, spec.d_embed as i64],
                    nn::Init::Randn {
                        mean: 0.0,
                        stdev: 1.0,
                    },
                )),
            ),
            GanMode::Pose => (None, None),
        };
        Ok(Self {
            spec: spec.clone(),
            blocks,
            adv: SnLinear::new(&(p / "adv"), feat, 1),
            embed,
            proxies,
        })
    }

    /// Number of channels the first layer consumes.
    pub fn input_channels(&self) -> usize {
        match self.spec.mode {
            GanMode::Label => 3,
            GanMode::Pose => 3 + self.spec.cond_channels,
        }
    }

    pub fn forward_t(
        &self,
        images: &Tensor,
        cond: &Conditioning,
        train: bool,
    ) -> Result<DiscriminatorOutput> {
        let s = images.size();
        let side = self.spec.image_size as i64;
        if s.len() != 4 || s[1] != 3 || s[2] != side || s[3] != side {
            return Err(Error::shape(
                "discriminator input",
                format!("N×3×{side}×{side}"),
                format!("{s:?}"),
            ));
        }
        cond.check(&self.spec, s[0])?;
        let mut h = match cond {
            Conditioning::Maps(maps) => Tensor::cat(&[images, maps], 1),
            Conditioning::Labels(_) => images.shallow_clone(),
        };
        for block in &self.blocks {
            h = block.forward_t(&h, train);
        }
        let features = h.relu().sum_dim_intlist([2i64, 3].as_slice(), false, Kind::Float);
        let adv = self.adv.forward_t(&features, train).squeeze_dim(1);
        let embedding = self
            .embed
            .as_ref()
            .map(|e| normalize_rows(&e.forward_t(&features, train)));
        Ok(DiscriminatorOutput { adv, embedding })
    }

    /// Unit-normalized class proxies `K × d_embed` (label mode only).
    pub fn proxies(&self) -> Option<Tensor> {
        self.proxies.as_ref().map(normalize_rows)
    }

    /// Largest exact spectral norm over every normalized weight.
    pub fn spectral_norm_max(&self) -> f64 {
        let mut all: Vec<f64> = self.blocks.iter().flat_map(DBlock::spectral_norms).collect();
        all.push(self.adv.spectral().normalized_spectral_norm());
        if let Some(e) = &self.embed {
            all.push(e.spectral().normalized_spectral_norm());
        }
        all.into_iter().fold(0.0, f64::max)
    }
}
