use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};
use tch::nn::OptimizerConfig;
use tch::{nn, Device, Kind, Tensor};

use super::checkpoint::{GanCheckpoint, GanMeta, SCHEMA_VERSION};
use super::losses::{d2dce_loss, hinge_generator_loss, hinge_losses, D2dceParams};
use super::model::ArchSpec;
use super::{Conditioning, GanMode};
use crate::datasets::{load_images, DatasetManifest, SampleRecord, Split};
use crate::error::{Error, IoContext, Result};
use crate::pose::{stack_maps, HandPose, RenderConfig};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GanTrainConfig {
    pub mode: GanMode,
    /// Rasterization of poses into conditioning maps (pose mode).
    pub pose: RenderConfig,
    pub z_dim: usize,
    pub g_width: usize,
    pub d_width: usize,
    pub d_embed: usize,
    pub spade_hidden: usize,
    pub lambda_cond: f64,
    pub d2dce: D2dceParams,
    pub steps: usize,
    pub batch_size: usize,
    /// Discriminator updates per generator update.
    pub d_steps: usize,
    pub lr_d: f64,
    pub lr_g: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub checkpoint_every: usize,
    /// Log the discriminator's largest normalized spectral norm every this
    /// many steps (and at the last step).
    pub sn_log_every: usize,
    /// Keep an exponential moving average of the generator weights and save
    /// it in place of the raw generator.
    pub ema_decay: Option<f64>,
    /// Random horizontal flips of real images (and their maps).
    pub flip: bool,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            mode: GanMode::Label,
            pose: RenderConfig::default(),
            z_dim: 64,
            g_width: 8,
            d_width: 8,
            d_embed: 64,
            spade_hidden: 16,
            lambda_cond: 1.0,
            d2dce: D2dceParams::default(),
            steps: 2000,
            batch_size: 32,
            d_steps: 1,
            lr_d: 2e-4,
            lr_g: 5e-5,
            beta1: 0.0,
            beta2: 0.999,
            checkpoint_every: 500,
            sn_log_every: 10,
            ema_decay: None,
            flip: true,
        }
    }
}

impl GanTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.d_steps == 0 || self.checkpoint_every == 0 || self.sn_log_every == 0 {
            return Err(Error::Config(
                "gan batch_size, d_steps, checkpoint_every and sn_log_every must be positive".into(),
            ));
        }
        if !(self.lambda_cond >= 0.0) || !(self.lr_d > 0.0) || !(self.lr_g > 0.0) {
            return Err(Error::Config("gan lambda_cond/learning rates out of range".into()));
        }
        if let Some(d) = self.ema_decay {
            if !(0.0..1.0).contains(&d) {
                return Err(Error::Config(format!("ema_decay {d} outside [0, 1)")));
            }
        }
        Ok(())
    }
}

/// Losses logged for one training step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GanLossReport {
    pub step: usize,
    pub d_adversarial: f64,
    pub g_adversarial: f64,
    /// Label mode only: the discriminator-side conditional loss on reals.
    pub d2dce: Option<f64>,
    /// Only on steps where it was measured.
    pub spectral_norm_max: Option<f64>,
}

pub struct GanTrainOutcome {
    pub checkpoint: GanCheckpoint,
    pub reports: Vec<GanLossReport>,
    /// Every checkpoint directory written, in step order, ending with `final`.
    pub checkpoint_dirs: Vec<(usize, PathBuf)>,
}

struct TrainData {
    images: Tensor,
    labels: Tensor,
    maps: Option<Tensor>,
}

impl TrainData {
    fn len(&self) -> i64 {
        self.images.size()[0]
    }

    fn batch(&self, index: &Tensor, flip: Option<&Tensor>) -> (Tensor, Tensor, Option<Tensor>) {
        let mut images = self.images.index_select(0, index);
        let labels = self.labels.index_select(0, index);
        let mut maps = self.maps.as_ref().map(|m| m.index_select(0, index));
        if let Some(mask) = flip {
            let mask = mask.view([-1, 1, 1, 1]);
            images = images.flip([3]).where_self(&mask, &images);
            maps = maps.map(|m| m.flip([3]).where_self(&mask, &m));
        }
        (images, labels, maps)
    }
}

fn render_pose_maps(
    records: &[&SampleRecord],
    render: &RenderConfig,
    size: usize,
) -> Result<Tensor> {
    let maps = records
        .iter()
        .map(|r| {
            let kps = r
                .keypoints
                .as_ref()
                .ok_or_else(|| Error::MissingKeypoints(r.sample_id.clone()))?;
            render.render(&HandPose::from_keypoints(kps), size, size)
        })
        .collect::<Result<Vec<_>>>()?;
    stack_maps(&maps)
}

fn losses_header() -> &'static str {
    "step,d_adv,g_adv,d2dce,sn_max"
}

fn losses_row(r: &GanLossReport) -> String {
    format!(
        "{},{},{},{},{}",
        r.step,
        r.d_adversarial,
        r.g_adversarial,
        r.d2dce.map(|v| v.to_string()).unwrap_or_default(),
        r.spectral_norm_max.map(|v| v.to_string()).unwrap_or_default(),
    )
}

fn check_finite(step: usize, what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            what: what.to_string(),
        })
    }
}

/// Trains a conditional GAN on the train split of `manifest`.
///
/// Writes `losses.csv` and checkpoints under `out_dir/checkpoints/step_NNNNNN`
/// (including step 0), plus `out_dir/final`. A non-finite loss aborts the run;
/// checkpoints already on disk are kept.
pub fn train_gan(
    config: &GanTrainConfig,
    manifest: &DatasetManifest,
    master_seed: u64,
    out_dir: &Path,
    mut on_step: impl FnMut(&GanLossReport),
) -> Result<GanTrainOutcome> {
    config.validate()?;
    manifest.validate()?;
    if manifest.image_size.0 != manifest.image_size.1 {
        return Err(Error::invalid("GAN training needs square images"));
    }
    let size = manifest.image_size.0;
    let records: Vec<&SampleRecord> = manifest
        .split_records(Split::Train)
        .filter(|r| config.mode == GanMode::Label || r.keypoints.is_some())
        .collect();
    if records.is_empty() {
        return Err(Error::EmptySplit(Split::Train));
    }
    let labels: Vec<i64> = records.iter().map(|r| r.label as i64).collect();
    let data = TrainData {
        images: load_images(records.iter().copied(), manifest.image_size)?,
        labels: Tensor::from_slice(&labels),
        maps: match config.mode {
            GanMode::Label => None,
            GanMode::Pose => Some(render_pose_maps(&records, &config.pose, size)?),
        },
    };
    info!(
        "training {} GAN on {} images for {} steps",
        config.mode,
        data.len(),
        config.steps
    );

    tch::manual_seed(seed::torch_seed(seed::derive(master_seed, "gan", 0)));
    let arch = ArchSpec {
        mode: config.mode,
        image_size: size,
        z_dim: config.z_dim,
        num_classes: manifest.num_classes,
        cond_channels: match config.mode {
            GanMode::Label => 0,
            GanMode::Pose => config.pose.mode.channels(),
        },
        g_width: config.g_width,
        d_width: config.d_width,
        d_embed: config.d_embed,
        spade_hidden: config.spade_hidden,
    };
    let meta = GanMeta {
        schema_version: SCHEMA_VERSION,
        arch,
        pose_render: (config.mode == GanMode::Pose).then_some(config.pose),
        lambda_cond: config.lambda_cond,
        d2dce: config.d2dce,
        training_step: 0,
        dataset_fingerprint: manifest.fingerprint()?,
        seed: master_seed,
        ema_decay: config.ema_decay,
        generator_fingerprint: String::new(),
    };
    let mut ckpt = GanCheckpoint::init(meta)?;
    let mut ema = match config.ema_decay {
        Some(_) => {
            let mut vs = nn::VarStore::new(Device::Cpu);
            let _ = super::model::Generator::new(&vs.root(), &ckpt.meta.arch)?;
            vs.copy(&ckpt.gen_vs)?;
            Some(vs)
        }
        None => None,
    };
    let mut opt_d = nn::adam(config.beta1, config.beta2, 0.0).build(&ckpt.disc_vs, config.lr_d)?;
    let mut opt_g = nn::adam(config.beta1, config.beta2, 0.0).build(&ckpt.gen_vs, config.lr_g)?;

    fs::create_dir_all(out_dir).at(out_dir)?;
    let losses_path = out_dir.join("losses.csv");
    let mut losses_file = fs::File::create(&losses_path).at(&losses_path)?;
    writeln!(losses_file, "{}", losses_header()).at(&losses_path)?;

    let mut checkpoint_dirs = Vec::new();
    let mut save = |ckpt: &mut GanCheckpoint, ema: &Option<nn::VarStore>, step: usize, dir: PathBuf| -> Result<()> {
        ckpt.meta.training_step = step;
        match ema {
            // The averaged weights stand in for the generator on disk.
            Some(avg) => {
                let mut snapshot = nn::VarStore::new(Device::Cpu);
                let _ = super::model::Generator::new(&snapshot.root(), &ckpt.meta.arch)?;
                snapshot.copy(&ckpt.gen_vs)?;
                ckpt.gen_vs.copy(avg)?;
                let saved = ckpt.save(&dir);
                ckpt.gen_vs.copy(&snapshot)?;
                saved?;
            }
            None => {
                ckpt.save(&dir)?;
            }
        }
        checkpoint_dirs.push((step, dir));
        Ok(())
    };
    let step_dir = |step: usize| out_dir.join("checkpoints").join(format!("step_{step:06}"));
    save(&mut ckpt, &ema, 0, step_dir(0))?;

    let n = data.len();
    let batch = config.batch_size as i64;
    let num_classes = ckpt.meta.arch.num_classes as i64;
    let z_dim = config.z_dim as i64;
    let opts = (Kind::Float, Device::Cpu);
    let sample_index = || Tensor::randint(n, [batch], (Kind::Int64, Device::Cpu));
    let flip_mask = || config.flip.then(|| Tensor::rand([batch], opts).lt(0.5));
    let mut reports = Vec::with_capacity(config.steps);

    for step in 1..=config.steps {
        let mut d_adv = 0.0;
        let mut d_cond = None;
        for _ in 0..config.d_steps {
            let (real, real_labels, real_maps) = data.batch(&sample_index(), flip_mask().as_ref());
            let (real_cond, fake_cond) = match real_maps {
                Some(maps) => (Conditioning::Maps(maps.shallow_clone()), Conditioning::Maps(maps)),
                None => (
                    Conditioning::Labels(real_labels.shallow_clone()),
                    Conditioning::Labels(Tensor::randint(num_classes, [batch], (Kind::Int64, Device::Cpu))),
                ),
            };
            let z = Tensor::randn([batch, z_dim], opts);
            let fake = tch::no_grad(|| ckpt.generator.forward_t(&z, &fake_cond, true))?;
            let real_out = ckpt.discriminator.forward_t(&real, &real_cond, true)?;
            let fake_out = ckpt.discriminator.forward_t(&fake, &fake_cond, true)?;
            let (hinge_d, _) = hinge_losses(&real_out.adv, &fake_out.adv)?;
            let mut loss = hinge_d.shallow_clone();
            if let (Some(emb), Some(proxies)) = (&real_out.embedding, ckpt.discriminator.proxies()) {
                let cond_loss = d2dce_loss(emb, &real_labels, &proxies, &ckpt.meta.d2dce)?;
                d_cond = Some(cond_loss.double_value(&[]));
                loss = loss + cond_loss * config.lambda_cond;
            }
            d_adv = hinge_d.double_value(&[]);
            check_finite(step, "discriminator loss", loss.double_value(&[]))?;
            opt_d.backward_step(&loss);
        }

        let gen_cond = match &data.maps {
            Some(_) => {
                let (_, _, maps) = data.batch(&sample_index(), flip_mask().as_ref());
                Conditioning::Maps(maps.expect("pose data has maps"))
            }
            None => Conditioning::Labels(Tensor::randint(num_classes, [batch], (Kind::Int64, Device::Cpu))),
        };
        let z = Tensor::randn([batch, z_dim], opts);
        let fake = ckpt.generator.forward_t(&z, &gen_cond, true)?;
        let fake_out = ckpt.discriminator.forward_t(&fake, &gen_cond, true)?;
        let g_adv_loss = hinge_generator_loss(&fake_out.adv);
        let mut g_loss = g_adv_loss.shallow_clone();
        if let (Some(emb), Some(proxies), Conditioning::Labels(labels)) =
            (&fake_out.embedding, ckpt.discriminator.proxies(), &gen_cond)
        {
            g_loss = g_loss + d2dce_loss(emb, labels, &proxies, &ckpt.meta.d2dce)? * config.lambda_cond;
        }
        check_finite(step, "generator loss", g_loss.double_value(&[]))?;
        opt_g.backward_step(&g_loss);

        if let (Some(avg), Some(decay)) = (&mut ema, config.ema_decay) {
            // Warm-up keeps the average from dwelling on the untrained start.
            let decay = decay.min((1 + step) as f64 / (10 + step) as f64);
            tch::no_grad(|| {
                let current = ckpt.gen_vs.variables();
                for (name, mut target) in avg.variables() {
                    let source = &current[&name];
                    if source.requires_grad() {
                        target.copy_(&(&target * decay + source * (1.0 - decay)));
                    } else {
                        target.copy_(source);
                    }
                }
            });
        }

        let report = GanLossReport {
            step,
            d_adversarial: d_adv,
            g_adversarial: g_adv_loss.double_value(&[]),
            d2dce: d_cond,
            spectral_norm_max: (step % config.sn_log_every == 0 || step == config.steps)
                .then(|| ckpt.discriminator.spectral_norm_max()),
        };
        writeln!(losses_file, "{}", losses_row(&report)).at(&losses_path)?;
        on_step(&report);
        reports.push(report);

        if step % config.checkpoint_every == 0 && step != config.steps {
            save(&mut ckpt, &ema, step, step_dir(step))?;
        }
    }
    losses_file.flush().at(&losses_path)?;
    save(&mut ckpt, &ema, config.steps, out_dir.join("final"))?;
    drop(save);
    // Hand back exactly what was written to `final`.
    let checkpoint = GanCheckpoint::load(&out_dir.join("final"))?;
    Ok(GanTrainOutcome {
        checkpoint,
        reports,
        checkpoint_dirs,
    })
}

/// Reads back a `losses.csv` written by [`train_gan`].
pub fn read_losses(path: &Path) -> Result<Vec<GanLossReport>> {
    let mut reader = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for row in reader.records() {
        let row = row?;
        let parse = |i: usize| -> Result<f64> {
            row[i]
                .parse::<f64>()
                .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))
        };
        out.push(GanLossReport {
            step: parse(0)? as usize,
            d_adversarial: parse(1)?,
            g_adversarial: parse(2)?,
            d2dce: if row[3].is_empty() { None } else { Some(parse(3)?) },
            spectral_norm_max: if row[4].is_empty() { None } else { Some(parse(4)?) },
        });
    }
    Ok(out)
}
