use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::{nn, Device, Kind, Tensor};

use super::model::{ArchSpec, Discriminator, Generator};
use super::{Conditioning, D2dceParams, GanCondition, GanMode, LatentCode};
use crate::error::{Error, IoContext, Result};
use crate::io::{read_json, write_json, StagingDir};
use crate::pose::RenderConfig;

pub const SCHEMA_VERSION: u32 = 1;
const GENERATOR_FILE: &str = "generator.safetensors";
const DISCRIMINATOR_FILE: &str = "discriminator.safetensors";
const META_FILE: &str = "meta.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanMeta {
    pub schema_version: u32,
    pub arch: ArchSpec,
    /// How poses are rasterized for this generator (pose mode only).
    pub pose_render: Option<RenderConfig>,
    pub lambda_cond: f64,
    pub d2dce: D2dceParams,
    pub training_step: usize,
    pub dataset_fingerprint: String,
    pub seed: u64,
    /// Decay of the generator weight average, when one was kept.
    pub ema_decay: Option<f64>,
    /// Hash of the generator parameter blob; filled in on save.
    #[serde(default)]
    pub generator_fingerprint: String,
}

/// Generator and discriminator state plus everything needed to rebuild them.
pub struct GanCheckpoint {
    pub meta: GanMeta,
    pub(crate) gen_vs: nn::VarStore,
    pub generator: Generator,
    pub(crate) disc_vs: nn::VarStore,
    pub discriminator: Discriminator,
}

impl GanCheckpoint {
    /// Freshly initialized networks; parameter draws come from torch's global
    /// generator, which the caller seeds.
    pub fn init(meta: GanMeta) -> Result<Self> {
        let gen_vs = nn::VarStore::new(Device::Cpu);
        let generator = Generator::new(&gen_vs.root(), &meta.arch)?;
        let disc_vs = nn::VarStore::new(Device::Cpu);
        let discriminator = Discriminator::new(&disc_vs.root(), &meta.arch)?;
        Ok(Self {
            meta,
            gen_vs,
            generator,
            disc_vs,
            discriminator,
        })
    }

    pub fn mode(&self) -> GanMode {
        self.meta.arch.mode
    }

    pub fn z_dim(&self) -> usize {
        self.meta.arch.z_dim
    }

    pub fn image_size(&self) -> usize {
        self.meta.arch.image_size
    }

    /// Writes `meta.json` and both parameter blobs into `dir`, replacing it
    /// atomically. Returns the generator fingerprint.
    pub fn save(&mut self, dir: &Path) -> Result<String> {
        let staging = StagingDir::new(dir)?;
        let gen_path = staging.path().join(GENERATOR_FILE);
        self.gen_vs.save(&gen_path)?;
        self.disc_vs.save(staging.path().join(DISCRIMINATOR_FILE))?;
        let bytes = std::fs::read(&gen_path).at(&gen_path)?;
        self.meta.generator_fingerprint = hex::encode(&Sha256::digest(&bytes)[..16]);
        write_json(&staging.path().join(META_FILE), &self.meta)?;
        staging.commit()?;
        Ok(self.meta.generator_fingerprint.clone())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: GanMeta = read_json(&dir.join(META_FILE))?;
        if meta.schema_version != SCHEMA_VERSION {
            return Err(Error::invalid(format!(
                "unsupported checkpoint schema {}",
                meta.schema_version
            )));
        }
        let mut ckpt = Self::init(meta)?;
        ckpt.gen_vs.load(dir.join(GENERATOR_FILE))?;
        ckpt.disc_vs.load(dir.join(DISCRIMINATOR_FILE))?;
        Ok(ckpt)
    }

    /// Generates a batch in evaluation mode.
    pub fn generate(&self, z: &Tensor, cond: &Conditioning) -> Result<Tensor> {
        tch::no_grad(|| self.generator.forward_t(z, cond, false))
    }

    /// One image `3 × S × S` in [−1, 1] for one latent and condition.
    pub fn generator_forward(&self, latent: &LatentCode, condition: &GanCondition) -> Result<Tensor> {
        if condition.mode() != self.mode() {
            return Err(Error::ModeMismatch {
                expected: self.mode().to_string(),
                got: condition.mode().to_string(),
            });
        }
        if latent.dim() != self.z_dim() {
            return Err(Error::shape("latent dimension", self.z_dim(), latent.dim()));
        }
        let z = LatentCode::stack(std::slice::from_ref(latent));
        let cond = GanCondition::batch(std::slice::from_ref(condition))?;
        Ok(self.generate(&z, &cond)?.squeeze_dim(0))
    }

    /// Scores one image; label mode also returns its unit embedding.
    pub fn discriminator_forward(
        &self,
        image: &Tensor,
        condition: &GanCondition,
    ) -> Result<(f64, Option<Vec<f32>>)> {
        let side = self.image_size() as i64;
        if image.size() != [3, side, side] {
            return Err(Error::shape(
                "image",
                format!("3×{side}×{side}"),
                format!("{:?}", image.size()),
            ));
        }
        let cond = GanCondition::batch(std::slice::from_ref(condition))?;
        let out = tch::no_grad(|| {
            self.discriminator
                .forward_t(&image.unsqueeze(0).to_kind(Kind::Float), &cond, false)
        })?;
        let embedding = out
            .embedding
            .map(|e| Vec::<f32>::try_from(e.squeeze_dim(0)))
            .transpose()?;
        Ok((out.adv.double_value(&[0]), embedding))
    }
}
