use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::{EmbedderSpec, ExperimentConfig, PoseSamplingMode, SourceSection, SynthesisSection};
use super::report::{emit_report, ReportBundle};
use super::toy::make_toy_dataset;
use crate::classifier::{evaluate, train_classifier, ClassifierCheckpoint, EvalReport, Strategy};
use crate::datasets::{
    load_manifest, split, stratified_subsample, write_manifest, DatasetManifest, LabeledImages,
};
use crate::error::{Error, IoContext, Result};
use crate::gan::{read_losses, train_gan, GanCheckpoint, GanLossReport, GanMode};
use crate::io::{read_json, write_json, StagingDir};
use crate::metrics::{
    embed, evaluate_generated, ClassifierEmbedder, Embedder, MetricReport, RealStatistics,
    TorchScriptEmbedder,
};
use crate::seed;
use crate::synthesis::{
    filter_topk, generate_balanced, generate_from_poses, score_samples, PoseSampling,
    SyntheticDataset,
};

const STAGE_FILE: &str = "stage.json";

/// Pipeline stages in dependency order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Prepare,
    TrainGan,
    Generate,
    /// The real-only classifier, needed as scorer and embedder.
    Baseline,
    Filter,
    TrainClf,
    Evaluate,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::TrainGan,
        Stage::Generate,
        Stage::Baseline,
        Stage::Filter,
        Stage::TrainClf,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainGan => "train-gan",
            Stage::Generate => "generate",
            Stage::Baseline => "baseline",
            Stage::Filter => "filter",
            Stage::TrainClf => "train-clf",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Identity of a stage's outputs, stored as `stage.json` in its directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub key: String,
    pub seed: u64,
    pub upstream: Vec<String>,
    pub runtime_seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ran,
    Skipped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageOutcome {
    pub stage: String,
    pub dir: PathBuf,
    pub status: StageStatus,
    pub key: String,
    pub seed: u64,
    pub runtime_seconds: f64,
}

/// Provenance written to `run.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub master_seed: u64,
    pub config: ExperimentConfig,
    pub seeds: BTreeMap<String, u64>,
    pub stages: Vec<StageOutcome>,
    pub runtime_seconds: f64,
}

/// Everything a finished (or partial) run produced.
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub stages: Vec<StageOutcome>,
    pub report: Option<ReportBundle>,
}

impl RunSummary {
    pub fn ran(&self) -> Vec<&str> {
        self.stages
            .iter()
            .filter(|s| s.status == StageStatus::Ran)
            .map(|s| s.stage.as_str())
            .collect()
    }
}

/// Named seeds derived from the master seed.
pub fn derived_seeds(master: u64) -> BTreeMap<String, u64> {
    [
        "toy",
        "gan-source-toy",
        "split",
        "subsample",
        "gan",
        "generate",
        "classifier",
        "metrics",
    ]
    .iter()
    .map(|name| (name.to_string(), seed::derive(master, &format!("stage/{name}"), 0)))
    .collect()
}

fn stage_key(stage: &str, section: &impl Serialize, upstream: &[&str], seed: u64) -> Result<String> {
    let value = serde_json::json!({
        "stage": stage,
        "section": section,
        "upstream": upstream,
        "seed": seed,
    });
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(&value)?)))
}

/// Runs the experiment through `until` (inclusive), skipping stages whose
/// outputs already exist with a matching key.
pub struct Pipeline {
    config: ExperimentConfig,
    force: bool,
    seeds: BTreeMap<String, u64>,
    outcomes: Vec<StageOutcome>,
    started: Instant,
}

impl Pipeline {
    pub fn new(config: ExperimentConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let seeds = derived_seeds(config.seed);
        Ok(Self {
            config,
            force,
            seeds,
            outcomes: Vec::new(),
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    fn seed(&self, name: &str) -> u64 {
        self.seeds[name]
    }

    fn dir(&self, rel: &str) -> PathBuf {
        self.config.out_dir.join(rel)
    }

    /// Returns the key of the stage in `rel`, running `body` into a staging
    /// directory unless matching outputs already exist.
    fn stage(
        &mut self,
        name: &str,
        rel: &str,
        section: &impl Serialize,
        upstream: &[&str],
        seed: u64,
        body: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<String> {
        let dir = self.dir(rel);
        let key = stage_key(name, section, upstream, seed)?;
        let record_path = dir.join(STAGE_FILE);
        if record_path.exists() {
            let found: StageRecord = read_json(&record_path)?;
            if found.key == key {
                info!("{name}: up to date, skipping");
                self.outcomes.push(StageOutcome {
                    stage: name.to_string(),
                    dir,
                    status: StageStatus::Skipped,
                    key: key.clone(),
                    seed,
                    runtime_seconds: found.runtime_seconds,
                });
                return Ok(key);
            }
            if !self.force {
                return Err(Error::StaleStage {
                    stage: name.to_string(),
                    dir,
                    found: found.key,
                    expected: key,
                });
            }
        }
        info!("{name}: running");
        let start = Instant::now();
        let staging = StagingDir::new(&dir)?;
        body(staging.path()).map_err(|e| Error::Stage {
            stage: name.to_string(),
            source: Box::new(e),
        })?;
        let runtime_seconds = start.elapsed().as_secs_f64();
        let record = StageRecord {
            stage: name.to_string(),
            key: key.clone(),
            seed,
            upstream: upstream.iter().map(|s| s.to_string()).collect(),
            runtime_seconds,
        };
        write_json(&staging.path().join(STAGE_FILE), &record)?;
        staging.commit()?;
        self.outcomes.push(StageOutcome {
            stage: name.to_string(),
            dir,
            status: StageStatus::Ran,
            key: key.clone(),
            seed,
            runtime_seconds,
        });
        self.write_run_record()?;
        Ok(key)
    }

    fn write_run_record(&self) -> Result<()> {
        fs::create_dir_all(&self.config.out_dir).at(&self.config.out_dir)?;
        write_json(
            &self.config.out_dir.join("run.json"),
            &RunRecord {
                master_seed: self.config.seed,
                config: self.config.clone(),
                seeds: self.seeds.clone(),
                stages: self.outcomes.clone(),
                runtime_seconds: self.started.elapsed().as_secs_f64(),
            },
        )
    }

    /// Runs every stage up to and including `until`.
    pub fn run_until(mut self, until: Stage) -> Result<RunSummary> {
        tch::set_num_threads(self.config.threads as i32);
        fs::create_dir_all(&self.config.out_dir).at(&self.config.out_dir)?;
        let text = self.config.to_toml()?;
        crate::io::write_atomic(&self.config.out_dir.join("config.toml"), text.as_bytes())?;

        let prepared = self.prepare()?;
        let mut report = None;
        if until >= Stage::TrainGan && self.needs_gan() {
            let gan = self.train_gan(&prepared)?;
            if until >= Stage::Generate {
                let synthetic = self.generate(&prepared, &gan)?;
                if until >= Stage::Baseline {
                    let baseline = self.baseline(&prepared)?;
                    if until >= Stage::Filter {
                        let filtered = self.filter(&synthetic, &baseline)?;
                        if until >= Stage::TrainClf {
                            let clfs = self.train_classifiers(&prepared, Some(&filtered), &baseline)?;
                            if until >= Stage::Evaluate {
                                let eval = self.evaluate(&prepared, &clfs, Some(&gan))?;
                                if until >= Stage::Report {
                                    report = Some(self.report(&eval)?);
                                }
                            }
                        }
                    }
                }
            }
        } else if until >= Stage::Baseline {
            let baseline = self.baseline(&prepared)?;
            if until >= Stage::TrainClf {
                let clfs = self.train_classifiers(&prepared, None, &baseline)?;
                if until >= Stage::Evaluate {
                    let eval = self.evaluate(&prepared, &clfs, None)?;
                    if until >= Stage::Report {
                        report = Some(self.report(&eval)?);
                    }
                }
            }
        }
        self.write_run_record()?;
        Ok(RunSummary {
            out_dir: self.config.out_dir.clone(),
            stages: self.outcomes,
            report,
        })
    }

    fn needs_gan(&self) -> bool {
        self.config.needs_synthetic() || self.config.metrics.enabled
    }

    fn prepare(&mut self) -> Result<Artifact<Prepared>> {
        let c = self.config.clone();
        let section = (&c.dataset, &c.gan.source);
        let seeds = (self.seed("toy"), self.seed("gan-source-toy"), self.seed("split"), self.seed("subsample"));
        let key = self.stage("prepare", "prepare", &section, &[], c.seed, |dir| {
            let base = materialize(&c.dataset.source, seeds.0, &dir.join("data"))?;
            let mut manifest = base;
            if let Some([tr, va, te]) = c.dataset.split_fractions {
                manifest = split(&manifest, (tr, va, te), seeds.2)?;
            }
            if let Some(k) = c.dataset.subsample_k {
                manifest = stratified_subsample(&manifest, k, seeds.3)?;
            }
            write_manifest(&manifest, &dir.join("manifest.tsv"))?;
            if let Some(source) = &c.gan.source {
                let m = materialize(source, seeds.1, &dir.join("gan_source_data"))?;
                write_manifest(&m, &dir.join("gan_source.tsv"))?;
            }
            Ok(())
        })?;
        let dir = self.dir("prepare");
        let manifest_path = dir.join("manifest.tsv");
        let manifest = load_manifest(&manifest_path)?;
        let gan_source = match c.gan.source {
            Some(_) => Some(load_manifest(&dir.join("gan_source.tsv"))?),
            None => None,
        };
        Ok(Artifact {
            key,
            value: Prepared {
                manifest,
                manifest_path,
                gan_source,
            },
        })
    }

    fn train_gan(&mut self, prepared: &Artifact<Prepared>) -> Result<Artifact<GanRun>> {
        let config = self.config.gan.train.clone();
        let seed = self.seed("gan");
        let manifest = prepared.value.gan_manifest().clone();
        let key = self.stage("train-gan", "gan", &config, &[&prepared.key], seed, |dir| {
            train_gan(&config, &manifest, seed, dir, |r| {
                if r.step % 100 == 0 {
                    info!(
                        "gan step {}: d {:.4} g {:.4}",
                        r.step, r.d_adversarial, r.g_adversarial
                    );
                }
            })
            .map(|_| ())
        })?;
        let dir = self.dir("gan");
        let mut checkpoints = Vec::new();
        let ckpt_root = dir.join("checkpoints");
        let mut entries: Vec<PathBuf> = fs::read_dir(&ckpt_root)
            .at(&ckpt_root)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        entries.sort();
        for path in entries {
            let step = path
                .file_name()
                .and_then(|n| n.to_str())
                .and_then(|n| n.strip_prefix("step_"))
                .and_then(|n| n.parse::<usize>().ok());
            if let Some(step) = step {
                checkpoints.push((step, path));
            }
        }
        let final_dir = dir.join("final");
        let final_step = GanCheckpoint::load(&final_dir)?.meta.training_step;
        checkpoints.push((final_step, final_dir.clone()));
        Ok(Artifact {
            key,
            value: GanRun {
                final_dir,
                checkpoints,
                losses: read_losses(&dir.join("losses.csv"))?,
            },
        })
    }

    fn generate(&mut self, prepared: &Artifact<Prepared>, gan: &Artifact<GanRun>) -> Result<Artifact<SyntheticDataset>> {
        let s = self.config.synthesis.clone();
        let section = (s.n_per_class, s.pose_sampling, s.pose_split);
        let seed = self.seed("generate");
        let final_dir = &gan.value.final_dir;
        let key = self.stage("generate", "synthetic", &section, &[&prepared.key, &gan.key], seed, |dir| {
            let ckpt = GanCheckpoint::load(final_dir)?;
            synthesize(&ckpt, &prepared.value.manifest, &s, s.n_per_class, seed)?.save(dir)
        })?;
        let value = SyntheticDataset::load(&self.dir("synthetic"))?;
        Ok(Artifact { key, value })
    }

    fn baseline(&mut self, prepared: &Artifact<Prepared>) -> Result<Artifact<ClassifierCheckpoint>> {
        let config = self.config.classifier.strategy_config(Strategy::Real);
        let seed = self.seed("classifier");
        let manifest = prepared.value.manifest.clone();
        let source = self.config.dataset.source.display_name();
        let spc = self.config.dataset.subsample_k;
        let master = self.config.seed;
        let key = self.stage("baseline", "clf/real", &config, &[&prepared.key], seed, |dir| {
            let (mut ckpt, mut report) = train_classifier(&config, &manifest, None, seed)?;
            ckpt.save(&dir.join("checkpoint"))?;
            report.source = source;
            report.samples_per_class = spc;
            report.experiment_seed = Some(master);
            report.save(dir)
        })?;
        let value = ClassifierCheckpoint::load(&self.dir("clf/real/checkpoint"))?;
        Ok(Artifact { key, value })
    }

    fn filter(
        &mut self,
        synthetic: &Artifact<SyntheticDataset>,
        baseline: &Artifact<ClassifierCheckpoint>,
    ) -> Result<Artifact<SyntheticDataset>> {
        let Some(fraction) = self.config.synthesis.filter_fraction else {
            return Ok(Artifact {
                key: synthetic.key.clone(),
                value: synthetic.value.clone(),
            });
        };
        let key = self.stage(
            "filter",
            "filtered",
            &fraction,
            &[&synthetic.key, &baseline.key],
            self.config.seed,
            |dir| {
                let scored = score_samples(&baseline.value, &synthetic.value)?;
                filter_topk(&scored, fraction)?.save(dir)
            },
        )?;
        let value = SyntheticDataset::load(&self.dir("filtered"))?;
        Ok(Artifact { key, value })
    }

    fn train_classifiers(
        &mut self,
        prepared: &Artifact<Prepared>,
        synthetic: Option<&Artifact<SyntheticDataset>>,
        baseline: &Artifact<ClassifierCheckpoint>,
    ) -> Result<Vec<(Strategy, Artifact<ClassifierCheckpoint>)>> {
        let seed = self.seed("classifier");
        let master = self.config.seed;
        let source = self.config.dataset.source.display_name();
        let spc = self.config.dataset.subsample_k;
        let mut out = Vec::new();
        for strategy in self.config.classifier.all_strategies() {
            if strategy == Strategy::Real {
                out.push((
                    strategy,
                    Artifact {
                        key: baseline.key.clone(),
                        value: ClassifierCheckpoint::load(&self.dir("clf/real/checkpoint"))?,
                    },
                ));
                continue;
            }
            let synthetic = synthetic.ok_or_else(|| Error::invalid("synthetic data missing"))?;
            let config = self.config.classifier.strategy_config(strategy);
            let rel = format!("clf/{strategy}");
            let manifest = &prepared.value.manifest;
            let syn = &synthetic.value;
            let name = format!("train-clf:{strategy}");
            let source = source.clone();
            let key = self.stage(&name, &rel, &config, &[&prepared.key, &synthetic.key], seed, |dir| {
                let (mut ckpt, mut report) = train_classifier(&config, manifest, Some(syn), seed)?;
                ckpt.save(&dir.join("checkpoint"))?;
                report.source = source;
                report.samples_per_class = spc;
                report.experiment_seed = Some(master);
                report.save(dir)
            })?;
            let value = ClassifierCheckpoint::load(&self.dir(&rel).join("checkpoint"))?;
            out.push((strategy, Artifact { key, value }));
        }
        Ok(out)
    }

    fn evaluate(
        &mut self,
        prepared: &Artifact<Prepared>,
        clfs: &[(Strategy, Artifact<ClassifierCheckpoint>)],
        gan: Option<&Artifact<GanRun>>,
    ) -> Result<String> {
        let metrics = self.config.metrics.clone();
        let seed = self.seed("metrics");
        let master = self.config.seed;
        let source = self.config.dataset.source.display_name();
        let spc = self.config.dataset.subsample_k;
        let mut upstream: Vec<&str> = vec![&prepared.key];
        upstream.extend(clfs.iter().map(|(_, a)| a.key.as_str()));
        if let Some(g) = gan {
            upstream.push(&g.key);
        }
        let synthesis = self.config.synthesis.clone();
        let body = |dir: &Path| -> Result<()> {
            for (strategy, clf) in clfs {
                let mut report = evaluate(&clf.value, &prepared.value.manifest, crate::datasets::Split::Test)?;
                report.source = source.clone();
                report.samples_per_class = spc;
                report.experiment_seed = Some(master);
                report.save(&dir.join(strategy.as_str()))?;
            }
            let Some(gan) = gan.filter(|_| metrics.enabled) else {
                return Ok(());
            };
            let baseline = &clfs
                .iter()
                .find(|(s, _)| *s == Strategy::Real)
                .expect("baseline is always trained")
                .1
                .value;
            let torchscript;
            let classifier;
            let embedder: &dyn Embedder = match &metrics.embedder {
                EmbedderSpec::Classifier => {
                    classifier = ClassifierEmbedder::new(baseline)?;
                    &classifier
                }
                EmbedderSpec::Torchscript { path } => {
                    torchscript = TorchScriptEmbedder::load(path, prepared.value.manifest.image_size)?;
                    &torchscript
                }
            };
            let reference = LabeledImages::from_manifest(&prepared.value.manifest, metrics.reference_split)?;
            let cache = RealStatistics::cache_path(&prepared.value.manifest_path, &embedder.fingerprint(), metrics.k);
            let reference_fp = format!(
                "{}:{}",
                prepared.value.manifest.fingerprint()?,
                metrics.reference_split
            );
            let real = RealStatistics::cached(&cache, &embedder.fingerprint(), metrics.k, &reference_fp, || {
                embed(&reference.images, embedder)
            })?;
            let per_class = metrics.n_gen.div_ceil(prepared.value.manifest.num_classes).max(1);
            let score = |ckpt_dir: &Path| -> Result<MetricReport> {
                let ckpt = GanCheckpoint::load(ckpt_dir)?;
                let samples = synthesize(&ckpt, &prepared.value.manifest, &synthesis, per_class, seed)?;
                evaluate_generated(embedder, &real, &samples.images(), metrics.is_splits)
            };
            score(&gan.value.final_dir)?.save(&dir.join("metrics.json"))?;
            if metrics.all_checkpoints {
                let path = dir.join("gan_metrics.csv");
                let mut w = csv::Writer::from_path(&path)?;
                w.write_record(["step", "fid", "is_mean", "density", "coverage"])?;
                for (step, ckpt_dir) in &gan.value.checkpoints {
                    let m = score(ckpt_dir)?;
                    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                    w.write_record([
                        step.to_string(),
                        m.fid.to_string(),
                        opt(m.is_mean),
                        m.density.to_string(),
                        m.coverage.to_string(),
                    ])?;
                }
                w.flush().at(&path)?;
            }
            Ok(())
        };
        self.stage("evaluate", "eval", &metrics, &upstream, seed, body)
    }

    fn report(&mut self, eval_key: &str) -> Result<ReportBundle> {
        let eval_dir = self.dir("eval");
        let out = self.dir("report");
        self.stage("report", "report", &(), &[eval_key], self.config.seed, |dir| {
            emit_report(&eval_dir, dir).map(|_| ())
        })?;
        ReportBundle::scan(&out)
    }
}

/// A stage output with the key it was produced under.
pub struct Artifact<T> {
    pub key: String,
    pub value: T,
}

pub struct Prepared {
    pub manifest: DatasetManifest,
    pub manifest_path: PathBuf,
    /// Separate GAN training data (multi-source runs).
    pub gan_source: Option<DatasetManifest>,
}

impl Prepared {
    fn gan_manifest(&self) -> &DatasetManifest {
        self.gan_source.as_ref().unwrap_or(&self.manifest)
    }
}

pub struct GanRun {
    pub final_dir: PathBuf,
    /// `(step, dir)` for every saved checkpoint, ending with `final`.
    pub checkpoints: Vec<(usize, PathBuf)>,
    pub losses: Vec<GanLossReport>,
}

/// Synthesizes `n_per_class` samples per class; pose generators are driven
/// by poses of `manifest`.
fn synthesize(
    ckpt: &GanCheckpoint,
    manifest: &DatasetManifest,
    synthesis: &SynthesisSection,
    n_per_class: usize,
    seed: u64,
) -> Result<SyntheticDataset> {
    match ckpt.meta.arch.mode {
        GanMode::Label => generate_balanced(ckpt, n_per_class, manifest.num_classes, seed),
        GanMode::Pose => {
            let sampling = match synthesis.pose_sampling {
                PoseSamplingMode::Balanced => PoseSampling::Balanced(n_per_class),
                PoseSamplingMode::PassThrough => PoseSampling::PassThrough,
            };
            generate_from_poses(ckpt, manifest, synthesis.pose_split, sampling, seed)
        }
    }
}

fn materialize(source: &SourceSection, derived_seed: u64, dir: &Path) -> Result<DatasetManifest> {
    match (&source.manifest, &source.toy) {
        (Some(path), _) => load_manifest(path),
        (None, Some(toy)) => make_toy_dataset(toy, source.toy_seed.unwrap_or(derived_seed), dir),
        (None, None) => Err(Error::Config("dataset source is empty".into())),
    }
}

/// Runs the whole pipeline.
pub fn run_pipeline(config: &ExperimentConfig, force: bool) -> Result<RunSummary> {
    Pipeline::new(config.clone(), force)?.run_until(Stage::Report)
}

/// Test-split reports of a finished run, keyed by strategy.
pub fn load_eval_reports(out_dir: &Path) -> Result<BTreeMap<Strategy, EvalReport>> {
    let eval = out_dir.join("eval");
    let mut out = BTreeMap::new();
    for strategy in Strategy::ALL {
        let dir = eval.join(strategy.as_str());
        if dir.join("eval.json").exists() {
            out.insert(strategy, EvalReport::load(&dir)?);
        }
    }
    Ok(out)
}
