use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::toy::ToySpec;
use crate::classifier::{Strategy, StrategyConfig, TrainSettings, TrainingSchedule};
use crate::datasets::Split;
use crate::error::{Error, IoContext, Result};
use crate::gan::{GanMode, GanTrainConfig};
use crate::metrics::{DEFAULT_IS_SPLITS, DEFAULT_K};
use crate::synthesis::DEFAULT_N_PER_CLASS;

/// Where a dataset comes from: an existing manifest or a generated toy set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SourceSection {
    /// Label used in result tables.
    pub name: String,
    pub manifest: Option<PathBuf>,
    pub toy: Option<ToySpec>,
    /// Seed of the toy renderer; derived from the master seed when unset.
    pub toy_seed: Option<u64>,
}

impl SourceSection {
    pub fn validate(&self, what: &str) -> Result<()> {
        match (&self.manifest, &self.toy) {
            (Some(_), Some(_)) => Err(Error::Config(format!("{what}: give either manifest or toy, not both"))),
            (None, None) => Err(Error::Config(format!("{what}: needs a manifest or a toy spec"))),
            (None, Some(toy)) => toy.validate(),
            (Some(_), None) => Ok(()),
        }
    }

    pub fn display_name(&self) -> String {
        if !self.name.is_empty() {
            return self.name.clone();
        }
        match &self.manifest {
            Some(p) => p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| "dataset".into()),
            None => "toy".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    #[serde(flatten)]
    pub source: SourceSection,
    /// Re-split the pooled records into (train, val, test) fractions.
    pub split_fractions: Option<[f64; 3]>,
    /// Keep at most this many training samples per class.
    pub subsample_k: Option<usize>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            source: SourceSection {
                name: "toy".into(),
                manifest: None,
                toy: Some(ToySpec::long_tail()),
                toy_seed: None,
            },
            split_fractions: None,
            subsample_k: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct GanSection {
    /// Train the generator on a different dataset than the classifier
    /// (multi-source); by default it uses the prepared dataset.
    pub source: Option<SourceSection>,
    pub train: GanTrainConfig,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PoseSamplingMode {
    /// `n_per_class` per class, source poses drawn with replacement.
    #[default]
    Balanced,
    /// One sample per source record.
    PassThrough,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisSection {
    pub n_per_class: usize,
    /// Keep this fraction of each class after scoring; no filtering if unset.
    pub filter_fraction: Option<f64>,
    /// Pose mode: how poses of the prepared dataset drive the generator.
    pub pose_sampling: PoseSamplingMode,
    /// Pose mode: which split of the prepared dataset supplies poses.
    pub pose_split: Split,
}

impl Default for SynthesisSection {
    fn default() -> Self {
        Self {
            n_per_class: DEFAULT_N_PER_CLASS,
            filter_fraction: None,
            pose_sampling: PoseSamplingMode::Balanced,
            pose_split: Split::Train,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClassifierSection {
    /// Strategies to train; the real-only baseline is always trained since
    /// it also scores synthetic samples and embeds images for metrics.
    pub strategies: Vec<Strategy>,
    pub settings: TrainSettings,
    pub regularizer_schedule: TrainingSchedule,
    pub mixup_schedule: TrainingSchedule,
}

impl Default for ClassifierSection {
    fn default() -> Self {
        Self {
            strategies: vec![Strategy::Real, Strategy::Pretrain],
            settings: TrainSettings::default(),
            regularizer_schedule: TrainingSchedule::regularizer_default(),
            mixup_schedule: TrainingSchedule::mixup_default(),
        }
    }
}

impl ClassifierSection {
    pub fn strategy_config(&self, strategy: Strategy) -> StrategyConfig {
        StrategyConfig {
            strategy,
            schedule: match strategy {
                Strategy::Regularizer => Some(self.regularizer_schedule),
                Strategy::Mixup => Some(self.mixup_schedule),
                _ => None,
            },
            settings: self.settings.clone(),
        }
    }

    /// Strategies in canonical order, the baseline first.
    pub fn all_strategies(&self) -> Vec<Strategy> {
        let mut s = self.strategies.clone();
        s.push(Strategy::Real);
        s.sort();
        s.dedup();
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum EmbedderSpec {
    /// Penultimate layer of the real-only baseline classifier.
    #[default]
    Classifier,
    /// A TorchScript module mapping images to features.
    Torchscript { path: PathBuf },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub enabled: bool,
    pub embedder: EmbedderSpec,
    pub k: usize,
    pub is_splits: usize,
    /// Reference split of the prepared dataset.
    pub reference_split: Split,
    /// Generated samples per evaluated checkpoint.
    pub n_gen: usize,
    /// Also score every intermediate GAN checkpoint.
    pub all_checkpoints: bool,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self {
            enabled: true,
            embedder: EmbedderSpec::Classifier,
            k: DEFAULT_K,
            is_splits: DEFAULT_IS_SPLITS,
            reference_split: Split::Val,
            n_gen: 500,
            all_checkpoints: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    pub k_values: Vec<usize>,
    pub seeds: Vec<u64>,
    /// GAN steps for the reduced datasets; the main setting when unset.
    pub gan_steps: Option<usize>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            k_values: vec![5, 10, 20],
            seeds: vec![0],
            gan_steps: None,
        }
    }
}

/// A complete experiment, read from TOML.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    /// Torch intra-op threads; 1 keeps runs bit-reproducible.
    pub threads: usize,
    pub dataset: DatasetSection,
    pub gan: GanSection,
    pub synthesis: SynthesisSection,
    pub classifier: ClassifierSection,
    pub metrics: MetricsSection,
    pub sweep: SweepSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            threads: 1,
            dataset: DatasetSection::default(),
            gan: GanSection::default(),
            synthesis: SynthesisSection::default(),
            classifier: ClassifierSection::default(),
            metrics: MetricsSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let mut config = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut config.out_dir);
        if let Some(m) = &mut config.dataset.source.manifest {
            resolve(m);
        }
        if let Some(m) = config.gan.source.as_mut().and_then(|s| s.manifest.as_mut()) {
            resolve(m);
        }
        if let EmbedderSpec::Torchscript { path } = &mut config.metrics.embedder {
            resolve(path);
        }
        if let crate::classifier::InitSpec::Pretrained { path } = &mut config.classifier.settings.init {
            resolve(path);
        }
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset.source.validate("dataset")?;
        if let Some(source) = &self.gan.source {
            source.validate("gan.source")?;
        }
        if let Some(f) = self.dataset.split_fractions {
            if f.iter().any(|v| !(*v >= 0.0)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                return Err(Error::Config("split_fractions must be nonnegative and sum to 1".into()));
            }
        }
        if self.dataset.subsample_k == Some(0) {
            return Err(Error::Config("subsample_k must be positive".into()));
        }
        self.gan.train.validate()?;
        if self.gan.source.is_some() && self.gan.train.mode == GanMode::Label {
            return Err(Error::Config(
                "a separate GAN source needs pose mode, since labels do not transfer across datasets".into(),
            ));
        }
        if self.synthesis.n_per_class == 0 {
            return Err(Error::Config("n_per_class must be positive".into()));
        }
        if let Some(f) = self.synthesis.filter_fraction {
            if !(f > 0.0 && f <= 1.0) {
                return Err(Error::Config(format!("filter_fraction {f} outside (0, 1]")));
            }
        }
        if self.classifier.strategies.is_empty() {
            return Err(Error::Config("classifier.strategies is empty".into()));
        }
        for s in self.classifier.all_strategies() {
            self.classifier.strategy_config(s).validate()?;
        }
        if self.metrics.k == 0 || self.metrics.is_splits == 0 || self.metrics.n_gen == 0 {
            return Err(Error::Config("metrics k, is_splits and n_gen must be positive".into()));
        }
        if self.sweep.k_values.contains(&0) {
            return Err(Error::Config("sweep k_values must be positive".into()));
        }
        if self.threads == 0 {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(())
    }

    pub fn needs_synthetic(&self) -> bool {
        self.classifier.strategies.iter().any(|s| s.uses_synthetic())
    }
}
