use std::time::Instant;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tch::nn::{self, OptimizerConfig};
use tch::{Kind, Tensor};

use super::eval::{evaluate, EvalReport};
use super::mixup::{choose_mixup_source, mixup_batch, Batch, MixupSource};
use super::model::{ClassifierCheckpoint, ClassifierMeta, SCHEMA_VERSION};
use super::schedule::regularized_loss;
use super::{CurvePoint, InitSpec, OptimizerSpec, Phase, Strategy, StrategyConfig};
use crate::datasets::{class_histogram, DatasetManifest, LabeledImages, Split};
use crate::error::{Error, Result};
use crate::seed;
use crate::synthesis::SyntheticDataset;

/// Images held in memory with their labels.
struct Pool {
    images: Tensor,
    labels: Vec<usize>,
}

impl Pool {
    fn len(&self) -> usize {
        self.labels.len()
    }

    fn subset(&self, idx: &[usize]) -> Pool {
        let index = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
        Pool {
            images: self.images.index_select(0, &index),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }

    /// A training batch with optional per-sample horizontal flips.
    fn take(&self, idx: &[usize], flips: Option<&[bool]>) -> (Tensor, Vec<usize>) {
        let index = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
        let mut images = self.images.index_select(0, &index);
        if let Some(flips) = flips {
            let mask = Tensor::from_slice(flips).view([-1, 1, 1, 1]);
            images = images.flip([3]).where_self(&mask, &images);
        }
        (images, idx.iter().map(|&i| self.labels[i]).collect())
    }
}

fn label_tensor(labels: &[usize]) -> Tensor {
    Tensor::from_slice(&labels.iter().map(|&l| l as i64).collect::<Vec<_>>())
}

/// Shuffled index batches; a trailing singleton joins the previous batch
/// because batch norm needs two samples.
fn epoch_batches(n: usize, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch).map(<[usize]>::to_vec).collect();
    if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
        let last = batches.pop().expect("nonempty");
        batches.last_mut().expect("nonempty").extend(last);
    }
    batches
}

fn flips(n: usize, enabled: bool, rng: &mut ChaCha8Rng) -> Option<Vec<bool>> {
    enabled.then(|| (0..n).map(|_| rng.gen_bool(0.5)).collect())
}

fn draw(n: usize, pool_len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..pool_len)).collect()
}

fn optimizer(vs: &nn::VarStore, spec: &OptimizerSpec) -> Result<nn::Optimizer> {
    let adam = nn::Adam {
        beta1: spec.beta1,
        beta2: spec.beta2,
        wd: spec.weight_decay,
        eps: spec.eps,
        amsgrad: false,
    };
    Ok(adam.build(vs, spec.lr)?)
}

fn snapshot(vs: &nn::VarStore) -> Vec<(String, Tensor)> {
    let mut vars: Vec<(String, Tensor)> = vs
        .variables()
        .into_iter()
        .map(|(name, t)| (name, t.detach().copy()))
        .collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}

fn restore(vs: &nn::VarStore, snap: &[(String, Tensor)]) {
    let vars = vs.variables();
    tch::no_grad(|| {
        for (name, saved) in snap {
            let mut target = vars[name].shallow_clone();
            target.copy_(saved);
        }
    });
}

fn accuracy(ckpt: &ClassifierCheckpoint, pool: &Pool) -> Result<f64> {
    if pool.len() == 0 {
        return Ok(0.0);
    }
    let predicted = super::eval::predict(ckpt, &pool.images)?;
    let correct = predicted
        .iter()
        .zip(&pool.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / pool.len() as f64)
}

fn finite(loss: &Tensor, epoch: usize) -> Result<f64> {
    let v = loss.double_value(&[]);
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Diverged {
            step: epoch,
            what: "classifier loss".into(),
        })
    }
}

struct EpochStats {
    loss: f64,
    sigma: Option<f64>,
    running_accuracy: f64,
}

/// Runs up to `max_epochs` epochs with early stopping on `val` and leaves
/// the best-validation weights in place.
fn run_phase(
    ckpt: &ClassifierCheckpoint,
    phase: Phase,
    max_epochs: usize,
    patience: usize,
    val: Option<&Pool>,
    train_eval: Option<&Pool>,
    mut epoch: impl FnMut(usize) -> Result<EpochStats>,
) -> Result<Vec<CurvePoint>> {
    let mut curve = Vec::new();
    let mut best: Option<(f64, Vec<(String, Tensor)>)> = None;
    let mut stale = 0;
    for e in 0..max_epochs {
        let stats = epoch(e)?;
        let train_accuracy = match train_eval {
            Some(pool) => accuracy(ckpt, pool)?,
            None => stats.running_accuracy,
        };
        let val_accuracy = match val {
            Some(pool) if pool.len() > 0 => Some(accuracy(ckpt, pool)?),
            _ => None,
        };
        debug!(
            "{phase:?} epoch {e}: loss {:.4} train {train_accuracy:.3} val {val_accuracy:?}",
            stats.loss
        );
        curve.push(CurvePoint {
            phase,
            epoch: e,
            train_accuracy,
            val_accuracy,
            sigma: stats.sigma,
            loss: stats.loss,
        });
        if let Some(acc) = val_accuracy {
            if best.as_ref().is_none_or(|(b, _)| acc > *b) {
                best = Some((acc, snapshot(&ckpt.vs)));
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
    if let Some((_, snap)) = best {
        restore(&ckpt.vs, &snap);
    }
    Ok(curve)
}

fn soft_cross_entropy(logits: &Tensor, targets: &Tensor) -> Tensor {
    -(targets * logits.log_softmax(1, Kind::Float))
        .sum_dim_intlist([1i64].as_slice(), false, Kind::Float)
        .mean(Kind::Float)
}

/// Trains a classifier on the train split of `real`, with `synthetic`
/// combined according to the strategy, and reports on the validation split
/// (the train split when there is none).
pub fn train_classifier(
    config: &StrategyConfig,
    real: &DatasetManifest,
    synthetic: Option<&SyntheticDataset>,
    seed: u64,
) -> Result<(ClassifierCheckpoint, EvalReport)> {
    config.validate()?;
    real.validate()?;
    let strategy = config.strategy;
    let settings = &config.settings;
    match (strategy.uses_synthetic(), synthetic) {
        (false, Some(_)) => {
            return Err(Error::invalid("the real-only strategy takes no synthetic set"))
        }
        (true, None) => {
            return Err(Error::invalid(format!("{strategy} needs a synthetic set")))
        }
        (true, Some(s)) if s.num_classes != real.num_classes => {
            return Err(Error::ClassCountMismatch {
                expected: real.num_classes,
                got: s.num_classes,
            })
        }
        (true, Some(s)) if s.image_size != real.image_size => {
            return Err(Error::shape(
                "synthetic image size",
                format!("{:?}", real.image_size),
                format!("{:?}", s.image_size),
            ))
        }
        (true, Some(s)) if s.is_empty() => {
            return Err(Error::invalid("synthetic set is empty"))
        }
        _ => {}
    }
    let started = Instant::now();
    let num_classes = real.num_classes;
    let train_data = LabeledImages::from_manifest(real, Split::Train)?;
    if train_data.len() < 2 {
        return Err(Error::EmptySplit(Split::Train));
    }
    let train = Pool {
        images: train_data.images,
        labels: train_data.labels,
    };
    let val_data = LabeledImages::from_manifest(real, Split::Val)?;
    let val = Pool {
        images: val_data.images,
        labels: val_data.labels,
    };
    let synth = synthetic.map(|s| Pool {
        images: s.images(),
        labels: s.labels(),
    });

    tch::manual_seed(seed::torch_seed(seed::derive(seed, "classifier-init", 0)));
    let meta = ClassifierMeta {
        schema_version: SCHEMA_VERSION,
        arch: settings.arch,
        num_classes,
        image_size: real.image_size,
        strategy,
        seed,
        dataset_fingerprint: real.fingerprint()?,
        synthetic_fingerprint: synthetic.map(SyntheticDataset::fingerprint),
        train_class_counts: class_histogram(real, Split::Train)?.counts,
        curve: Vec::new(),
        epochs_trained: 0,
        runtime_seconds: 0.0,
        weights_fingerprint: String::new(),
    };
    let mut ckpt = ClassifierCheckpoint::init(meta)?;
    if let InitSpec::Pretrained { path } = &settings.init {
        let missing = ckpt.vs.load_partial(path)?;
        info!("initialized from {} ({} tensors left random)", path.display(), missing.len());
    }
    info!(
        "training {strategy} classifier on {} real{} images",
        train.len(),
        synth
            .as_ref()
            .map(|s| format!(" + {} synthetic", s.len()))
            .unwrap_or_default()
    );

    let batch = settings.batch_size;
    let mut curve = Vec::new();

    if strategy == Strategy::Pretrain {
        let synth = synth.as_ref().expect("checked above");
        let mut order: Vec<usize> = (0..synth.len()).collect();
        order.shuffle(&mut seed::rng(seed, "pretrain-holdout", 0));
        let held = ((synth.len() as f64 * settings.pretrain_holdout).round() as usize)
            .clamp(1, synth.len().saturating_sub(2).max(1));
        let (held_idx, fit_idx) = if synth.len() >= 3 {
            order.split_at(held)
        } else {
            (&order[..0], &order[..])
        };
        let holdout = synth.subset(held_idx);
        let fit = synth.subset(fit_idx);
        let mut opt = optimizer(&ckpt.vs, &settings.optimizer)?;
        let mut rng = seed::rng(seed, "order/pretrain", 0);
        let net = &ckpt.net;
        curve.extend(run_phase(
            &ckpt,
            Phase::Pretrain,
            settings.pretrain_epochs,
            settings.patience,
            Some(&holdout),
            None,
            |e| {
                let mut total = 0.0;
                let mut correct = 0i64;
                let batches = epoch_batches(fit.len(), batch, &mut rng);
                for idx in &batches {
                    let f = flips(idx.len(), settings.flip, &mut rng);
                    let (x, y) = fit.take(idx, f.as_deref());
                    let y = label_tensor(&y);
                    let logits = net.logits_t(&x, true);
                    let loss = logits.cross_entropy_for_logits(&y);
                    total += finite(&loss, e)?;
                    correct += logits.argmax(1, false).eq_tensor(&y).sum(Kind::Int64).int64_value(&[]);
                    opt.backward_step(&loss);
                }
                Ok(EpochStats {
                    loss: total / batches.len() as f64,
                    sigma: None,
                    running_accuracy: correct as f64 / fit.len() as f64,
                })
            },
        )?);
    }

    let main_epochs = settings.epochs;
    if main_epochs > 0 {
        let mut opt = optimizer(&ckpt.vs, &settings.optimizer)?;
        let mut order_rng = seed::rng(seed, "order/main", 0);
        let mut synth_rng = seed::rng(seed, "synthetic-draw", 0);
        let mut mix_rng = seed::rng(seed, "mixup-source", 0);
        let mut step = 0u64;
        let net = &ckpt.net;
        let schedule = config.schedule;
        curve.extend(run_phase(
            &ckpt,
            Phase::Main,
            main_epochs,
            settings.patience,
            Some(&val),
            Some(&train),
            |e| {
                let sigma = schedule.map(|s| s.sigma(e));
                let mut total = 0.0;
                let batches = epoch_batches(train.len(), batch, &mut order_rng);
                for idx in &batches {
                    let f = flips(idx.len(), settings.flip, &mut order_rng);
                    let (x, y) = train.take(idx, f.as_deref());
                    let loss = match strategy {
                        Strategy::Real | Strategy::Pretrain => {
                            net.logits_t(&x, true).cross_entropy_for_logits(&label_tensor(&y))
                        }
                        Strategy::Regularizer => {
                            let sigma = sigma.expect("validated");
                            let real_loss =
                                net.logits_t(&x, true).cross_entropy_for_logits(&label_tensor(&y));
                            if sigma > 0.0 {
                                let pool = synth.as_ref().expect("checked above");
                                let sidx = draw(idx.len(), pool.len(), &mut synth_rng);
                                let sf = flips(sidx.len(), settings.flip, &mut synth_rng);
                                let (sx, sy) = pool.take(&sidx, sf.as_deref());
                                let gen_loss = net
                                    .logits_t(&sx, true)
                                    .cross_entropy_for_logits(&label_tensor(&sy));
                                regularized_loss(&real_loss, &gen_loss, sigma)?
                            } else {
                                real_loss
                            }
                        }
                        Strategy::Mixup => {
                            let source = choose_mixup_source(
                                e,
                                schedule.as_ref().expect("validated"),
                                mix_rng.gen::<f64>(),
                            );
                            let pool = match source {
                                MixupSource::RealReal => &train,
                                MixupSource::RealSynthetic => synth.as_ref().expect("checked above"),
                            };
                            let pidx = draw(idx.len(), pool.len(), &mut mix_rng);
                            let pf = flips(pidx.len(), settings.flip, &mut mix_rng);
                            let (px, py) = pool.take(&pidx, pf.as_deref());
                            let mixed = mixup_batch(
                                &Batch::one_hot(px, &py, num_classes),
                                &Batch::one_hot(x, &y, num_classes),
                                &settings.mixup_lambda,
                                seed::derive(seed, "mixup-step", step),
                            )?;
                            soft_cross_entropy(&net.logits_t(&mixed.images, true), &mixed.targets)
                        }
                    };
                    step += 1;
                    total += finite(&loss, e)?;
                    opt.backward_step(&loss);
                }
                Ok(EpochStats {
                    loss: total / batches.len() as f64,
                    sigma,
                    running_accuracy: 0.0,
                })
            },
        )?);
    }

    ckpt.meta.epochs_trained = curve.len();
    ckpt.meta.curve = curve;
    ckpt.meta.runtime_seconds = started.elapsed().as_secs_f64();
    let report_split = if real.count(Split::Val) > 0 {
        Split::Val
    } else {
        Split::Train
    };
    let report = evaluate(&ckpt, real, report_split)?;
    info!(
        "{strategy}: {} epochs, {report_split} accuracy {:.3}",
        ckpt.meta.epochs_trained, report.overall_accuracy
    );
    Ok((ckpt, report))
}
