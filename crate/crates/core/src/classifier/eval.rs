use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use super::{ClassifierCheckpoint, CurvePoint, Phase, Strategy};
use crate::datasets::{DatasetManifest, LabeledImages, Split};
use crate::error::{Error, IoContext, Result};
use crate::io::{read_json, write_json};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub overall_accuracy: f64,
    pub per_class_accuracy: Vec<f64>,
    /// Evaluated samples per class.
    pub support: Vec<usize>,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub epoch_curve: Vec<CurvePoint>,
    pub epochs_trained: usize,
    pub strategy: Strategy,
    pub seed: u64,
    pub runtime_seconds: f64,
    /// Real training samples per class.
    pub train_class_counts: Vec<usize>,
    /// Free-form name of the data the classifier was trained on.
    #[serde(default)]
    pub source: String,
    /// Per-class training budget, when the real data was subsampled.
    #[serde(default)]
    pub samples_per_class: Option<usize>,
    /// Master seed of the experiment that produced this classifier.
    #[serde(default)]
    pub experiment_seed: Option<u64>,
}

impl EvalReport {
    pub fn num_classes(&self) -> usize {
        self.per_class_accuracy.len()
    }

    /// Mean per-class accuracy over classes present in the split.
    pub fn macro_accuracy(&self) -> f64 {
        let present: Vec<f64> = self
            .per_class_accuracy
            .iter()
            .zip(&self.support)
            .filter(|(_, &s)| s > 0)
            .map(|(&a, _)| a)
            .collect();
        if present.is_empty() {
            return 0.0;
        }
        present.iter().sum::<f64>() / present.len() as f64
    }

    /// Per-epoch train accuracy of the final phase (fine-tuning for PRETRAIN).
    pub fn main_train_curve(&self) -> Vec<f64> {
        self.epoch_curve
            .iter()
            .filter(|p| p.phase == Phase::Main)
            .map(|p| p.train_accuracy)
            .collect()
    }

    /// Writes `eval.json`, `curve.csv` and `per_class.csv` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).at(dir)?;
        write_json(&dir.join("eval.json"), self)?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let path = dir.join("curve.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["epoch", "train_acc", "val_acc", "sigma", "phase", "loss"])?;
        for p in &self.epoch_curve {
            let phase = match p.phase {
                Phase::Pretrain => "pretrain",
                Phase::Main => "main",
            };
            w.write_record([
                p.epoch.to_string(),
                p.train_accuracy.to_string(),
                opt(p.val_accuracy),
                opt(p.sigma),
                phase.to_string(),
                p.loss.to_string(),
            ])?;
        }
        w.flush().at(&path)?;
        let path = dir.join("per_class.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(["class", "support", "accuracy"])?;
        for (c, (s, a)) in self.support.iter().zip(&self.per_class_accuracy).enumerate() {
            w.write_record([c.to_string(), s.to_string(), a.to_string()])?;
        }
        w.flush().at(&path)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        read_json(&dir.join("eval.json"))
    }

    pub(crate) fn from_predictions(
        num_classes: usize,
        truth: &[usize],
        predicted: &[usize],
        split: Split,
        ckpt_meta: &super::ClassifierMeta,
    ) -> Self {
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for (&t, &p) in truth.iter().zip(predicted) {
            confusion[t][p] += 1;
        }
        let support: Vec<usize> = confusion.iter().map(|row| row.iter().sum()).collect();
        let per_class_accuracy = (0..num_classes)
            .map(|c| {
                if support[c] == 0 {
                    0.0
                } else {
                    confusion[c][c] as f64 / support[c] as f64
                }
            })
            .collect();
        let correct: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let total = truth.len().max(1);
        Self {
            split,
            overall_accuracy: correct as f64 / total as f64,
            per_class_accuracy,
            support,
            confusion,
            epoch_curve: ckpt_meta.curve.clone(),
            epochs_trained: ckpt_meta.epochs_trained,
            strategy: ckpt_meta.strategy,
            seed: ckpt_meta.seed,
            runtime_seconds: ckpt_meta.runtime_seconds,
            train_class_counts: ckpt_meta.train_class_counts.clone(),
            source: String::new(),
            samples_per_class: None,
            experiment_seed: None,
        }
    }
}

pub(crate) fn predict(ckpt: &ClassifierCheckpoint, images: &Tensor) -> Result<Vec<usize>> {
    let argmax = ckpt.logits(images)?.argmax(1, false);
    Ok(Vec::<i64>::try_from(argmax)?
        .into_iter()
        .map(|p| p as usize)
        .collect())
}

/// Accuracy, per-class accuracy and confusion matrix on one split.
pub fn evaluate(
    ckpt: &ClassifierCheckpoint,
    manifest: &DatasetManifest,
    split: Split,
) -> Result<EvalReport> {
    if manifest.num_classes != ckpt.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: ckpt.num_classes(),
            got: manifest.num_classes,
        });
    }
    let data = LabeledImages::from_manifest(manifest, split)?;
    if data.is_empty() {
        return Err(Error::EmptySplit(split));
    }
    let predicted = predict(ckpt, &data.images)?;
    Ok(EvalReport::from_predictions(
        ckpt.num_classes(),
        &data.labels,
        &predicted,
        split,
        &ckpt.meta,
    ))
}

/// `treated[c] − baseline[c]` for every class.
pub fn per_class_delta(treated: &EvalReport, baseline: &EvalReport) -> Result<Vec<f64>> {
    if treated.num_classes() != baseline.num_classes() {
        return Err(Error::ClassCountMismatch {
            expected: baseline.num_classes(),
            got: treated.num_classes(),
        });
    }
    Ok(treated
        .per_class_accuracy
        .iter()
        .zip(&baseline.per_class_accuracy)
        .map(|(t, b)| (t - b).clamp(-1.0, 1.0))
        .collect())
}

/// First epoch whose train accuracy reaches `threshold`.
pub fn epochs_to_threshold(train_accuracy: &[f64], threshold: f64) -> Option<usize> {
    train_accuracy.iter().position(|&a| a >= threshold)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::model::{ClassifierArch, ClassifierMeta, SCHEMA_VERSION};

    fn meta(num_classes: usize) -> ClassifierMeta {
        ClassifierMeta {
            schema_version: SCHEMA_VERSION,
            arch: ClassifierArch::default(),
            num_classes,
            image_size: (8, 8),
            strategy: Strategy::Real,
            seed: 0,
            dataset_fingerprint: String::new(),
            synthetic_fingerprint: None,
            train_class_counts: vec![1; num_classes],
            curve: Vec::new(),
            epochs_trained: 0,
            runtime_seconds: 0.0,
            weights_fingerprint: String::new(),
        }
    }

    #[test]
    fn perfect_predictions() {
        let truth = [0, 1, 2, 2];
        let r = EvalReport::from_predictions(3, &truth, &truth, Split::Test, &meta(3));
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.confusion, vec![vec![1, 0, 0], vec![0, 1, 0], vec![0, 0, 2]]);
    }

    #[test]
    fn constant_predictions_on_balanced_pair() {
        let r = EvalReport::from_predictions(2, &[0, 0, 1, 1], &[0, 0, 0, 0], Split::Test, &meta(2));
        assert_eq!(r.overall_accuracy, 0.5);
        assert_eq!(r.per_class_accuracy, vec![1.0, 0.0]);
        let trace: usize = (0..2).map(|c| r.confusion[c][c]).sum();
        assert_eq!(trace as f64 / 4.0, r.overall_accuracy);
        assert_eq!(r.support, vec![2, 2]);
    }

    #[test]
    fn deltas() {
        let mut a = EvalReport::from_predictions(2, &[0, 1], &[0, 1], Split::Test, &meta(2));
        let mut b = a.clone();
        assert_eq!(per_class_delta(&a, &b).unwrap(), vec![0.0, 0.0]);
        a.per_class_accuracy = vec![1.0, 0.2];
        b.per_class_accuracy = vec![0.0, 0.4];
        let d = per_class_delta(&a, &b).unwrap();
        assert_eq!(d[0], 1.0);
        assert!((d[1] + 0.2).abs() < 1e-12);
        b.per_class_accuracy.push(0.0);
        assert!(per_class_delta(&a, &b).is_err());
    }

    #[test]
    fn threshold_crossings() {
        assert_eq!(epochs_to_threshold(&[0.5, 0.8, 0.95], 0.9), Some(2));
        assert_eq!(epochs_to_threshold(&[0.5, 0.8, 0.95], 0.99), None);
        assert_eq!(epochs_to_threshold(&[0.91, 0.85, 0.92], 0.9), Some(0));
    }

    #[test]
    fn report_files() {
        let dir = tempfile::tempdir().unwrap();
        let r = EvalReport::from_predictions(2, &[0, 1], &[1, 1], Split::Val, &meta(2));
        r.save(dir.path()).unwrap();
        assert_eq!(EvalReport::load(dir.path()).unwrap(), r);
        let per_class = std::fs::read_to_string(dir.path().join("per_class.csv")).unwrap();
        assert_eq!(per_class, "class,support,accuracy\n0,1,0\n1,1,1\n");
    }
}
