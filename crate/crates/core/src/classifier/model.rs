use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, Module, ModuleT};
use tch::{Device, Kind, Tensor};

use super::{CurvePoint, Strategy};
use crate::error::{Error, Result};
use crate::io::{read_json, write_json, StagingDir};

pub const SCHEMA_VERSION: u32 = 1;
const WEIGHTS_FILE: &str = "weights.safetensors";
const META_FILE: &str = "meta.json";
const INFERENCE_BATCH: i64 = 128;

/// A small residual network: a stride-2 stem, then `stages` groups of
/// `blocks` basic blocks, doubling the width and halving the resolution at
/// every group after the first.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierArch {
    pub width: usize,
    pub stages: usize,
    pub blocks: usize,
}

impl Default for ClassifierArch {
    fn default() -> Self {
        Self {
            width: 32,
            stages: 3,
            blocks: 1,
        }
    }
}

impl ClassifierArch {
    pub fn feature_dim(&self) -> usize {
        self.width << (self.stages - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.stages == 0 || self.blocks == 0 {
            return Err(Error::Config("classifier width, stages and blocks must be positive".into()));
        }
        Ok(())
    }
}

fn conv(p: nn::Path, in_ch: i64, out_ch: i64, k: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding: k / 2,
        bias: false,
        ..Default::default()
    };
    nn::conv2d(p, in_ch, out_ch, k, cfg)
}

#[derive(Debug)]
struct BasicBlock {
    conv1: nn::Conv2D,
    bn1: nn::BatchNorm,
    conv2: nn::Conv2D,
    bn2: nn::BatchNorm,
    shortcut: Option<(nn::Conv2D, nn::BatchNorm)>,
}

impl BasicBlock {
    fn new(p: &nn::Path, in_ch: i64, out_ch: i64, stride: i64) -> Self {
        let shortcut = (stride != 1 || in_ch != out_ch).then(|| {
            (
                conv(p / "short", in_ch, out_ch, 1, stride),
                nn::batch_norm2d(p / "short_bn", out_ch, Default::default()),
            )
        });
        Self {
            conv1: conv(p / "conv1", in_ch, out_ch, 3, stride),
            bn1: nn::batch_norm2d(p / "bn1", out_ch, Default::default()),
            conv2: conv(p / "conv2", out_ch, out_ch, 3, 1),
            bn2: nn::batch_norm2d(p / "bn2", out_ch, Default::default()),
            shortcut,
        }
    }

    fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        let h = x.apply(&self.conv1).apply_t(&self.bn1, train).relu();
        let h = h.apply(&self.conv2).apply_t(&self.bn2, train);
        let skip = match &self.shortcut {
            Some((c, bn)) => x.apply(c).apply_t(bn, train),
            None => x.shallow_clone(),
        };
        (h + skip).relu()
    }
}

#[derive(Debug)]
pub struct ClassifierNet {
    stem: nn::Conv2D,
    stem_bn: nn::BatchNorm,
    blocks: Vec<BasicBlock>,
    head: nn::Linear,
}

impl ClassifierNet {
    pub fn new(p: &nn::Path, arch: &ClassifierArch, num_classes: usize) -> Result<Self> {
        arch.validate()?;
        let w = arch.width as i64;
        let mut blocks = Vec::new();
        let mut in_ch = w;
        for stage in 0..arch.stages {
            let out_ch = w << stage;
            for b in 0..arch.blocks {
                let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                blocks.push(BasicBlock::new(
                    &(p / format!("s{stage}b{b}")),
                    in_ch,
                    out_ch,
                    stride,
                ));
                in_ch = out_ch;
            }
        }
        Ok(Self {
            stem: conv(p / "stem", 3, w, 3, 2),
            stem_bn: nn::batch_norm2d(p / "stem_bn", w, Default::default()),
            blocks,
            head: nn::linear(p / "head", in_ch, num_classes as i64, Default::default()),
        })
    }

    /// Globally pooled penultimate features.
    pub fn features_t(&self, x: &Tensor, train: bool) -> Tensor {
        let mut h = x.apply(&self.stem).apply_t(&self.stem_bn, train).relu();
        for block in &self.blocks {
            h = block.forward_t(&h, train);
        }
        h.mean_dim([2i64, 3].as_slice(), false, Kind::Float)
    }

    pub fn logits_t(&self, x: &Tensor, train: bool) -> Tensor {
        self.head.forward(&self.features_t(x, train))
    }
}

impl ModuleT for ClassifierNet {
    fn forward_t(&self, xs: &Tensor, train: bool) -> Tensor {
        self.logits_t(xs, train)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMeta {
    pub schema_version: u32,
    pub arch: ClassifierArch,
    pub num_classes: usize,
    pub image_size: (usize, usize),
    pub strategy: Strategy,
    pub seed: u64,
    pub dataset_fingerprint: String,
    pub synthetic_fingerprint: Option<String>,
    /// Real training samples per class.
    pub train_class_counts: Vec<usize>,
    pub curve: Vec<CurvePoint>,
    pub epochs_trained: usize,
    pub runtime_seconds: f64,
    #[serde(default)]
    pub weights_fingerprint: String,
}

pub struct ClassifierCheckpoint {
    pub meta: ClassifierMeta,
    pub(crate) vs: nn::VarStore,
    pub net: ClassifierNet,
}

impl ClassifierCheckpoint {
    pub fn init(meta: ClassifierMeta) -> Result<Self> {
        let vs = nn::VarStore::new(Device::Cpu);
        let net = ClassifierNet::new(&vs.root(), &meta.arch, meta.num_classes)?;
        Ok(Self { meta, vs, net })
    }

    pub fn num_classes(&self) -> usize {
        self.meta.num_classes
    }

    pub fn save(&mut self, dir: &Path) -> Result<()> {
        let staging = StagingDir::new(dir)?;
        self.vs.save(staging.path().join(WEIGHTS_FILE))?;
        self.meta.weights_fingerprint = self.fingerprint()?;
        write_json(&staging.path().join(META_FILE), &self.meta)?;
        staging.commit()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: ClassifierMeta = read_json(&dir.join(META_FILE))?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported classifier schema {}",
                meta.schema_version
            )));
        }
        let mut ckpt = Self::init(meta)?;
        ckpt.vs.load(dir.join(WEIGHTS_FILE))?;
        Ok(ckpt)
    }

    /// Hash over every named tensor, independent of how it is stored.
    pub fn fingerprint(&self) -> Result<String> {
        let mut vars: Vec<(String, Tensor)> = self.vs.variables().into_iter().collect();
        vars.sort_by(|a, b| a.0.cmp(&b.0));
        let mut h = Sha256::new();
        for (name, t) in vars {
            h.update(name.as_bytes());
            let values = Vec::<f64>::try_from(t.detach().to_kind(Kind::Double).flatten(0, -1))?;
            for v in values {
                h.update(v.to_le_bytes());
            }
        }
        Ok(hex::encode(&h.finalize()[..16]))
    }

    fn check_geometry(&self, images: &Tensor) -> Result<()> {
        let (h, w) = self.meta.image_size;
        let size = images.size();
        if size.len() != 4 || size[1] != 3 || size[2] != h as i64 || size[3] != w as i64 {
            return Err(Error::shape(
                "classifier input",
                format!("N×3×{h}×{w}"),
                format!("{size:?}"),
            ));
        }
        Ok(())
    }

    fn batched(&self, images: &Tensor, f: impl Fn(&Tensor) -> Tensor) -> Result<Tensor> {
        self.check_geometry(images)?;
        let n = images.size()[0];
        let outputs: Vec<Tensor> = tch::no_grad(|| {
            (0..n)
                .step_by(INFERENCE_BATCH as usize)
                .map(|start| f(&images.narrow(0, start, INFERENCE_BATCH.min(n - start))))
                .collect()
        });
        if outputs.is_empty() {
            let width = f(&images.narrow(0, 0, 0)).size()[1];
            return Ok(Tensor::zeros([0, width], (Kind::Float, Device::Cpu)));
        }
        Ok(Tensor::cat(&outputs, 0))
    }

    /// Logits in evaluation mode, `N × C`.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        self.batched(images, |x| self.net.logits_t(x, false))
    }

    pub fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.logits(images)?.softmax(1, Kind::Float))
    }

    /// Penultimate-layer features, `N × D`.
    pub fn features(&self, images: &Tensor) -> Result<Tensor> {
        self.batched(images, |x| self.net.features_t(x, false))
    }
}
