use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::schedule::TrainingSchedule;
use crate::error::{Error, Result};
use crate::seed;

/// Distribution of the per-pair mixing weight λ.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum LambdaSampler {
    #[default]
    Uniform,
    Beta {
        a: f64,
    },
}

impl LambdaSampler {
    pub fn sample(&self, n: usize, seed: u64) -> Result<Vec<f64>> {
        let mut rng = seed::rng(seed, "mixup-lambda", 0);
        match *self {
            LambdaSampler::Uniform => Ok((0..n).map(|_| rng.gen::<f64>()).collect()),
            LambdaSampler::Beta { a } => {
                let beta = Beta::new(a, a)
                    .map_err(|e| Error::Config(format!("mixup Beta({a}, {a}): {e}")))?;
                Ok((0..n).map(|_| beta.sample(&mut rng)).collect())
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixupSource {
    RealReal,
    RealSynthetic,
}

/// Real-real mixup when `u < σ(epoch)`, real-synthetic otherwise.
pub fn choose_mixup_source(epoch: usize, schedule: &TrainingSchedule, u: f64) -> MixupSource {
    if u < schedule.sigma(epoch) {
        MixupSource::RealReal
    } else {
        MixupSource::RealSynthetic
    }
}

/// Images with their target distributions (one-hot or soft), `N × C`.
pub struct Batch {
    pub images: Tensor,
    pub targets: Tensor,
}

impl Batch {
    pub fn one_hot(images: Tensor, labels: &[usize], num_classes: usize) -> Self {
        let labels: Vec<i64> = labels.iter().map(|&l| l as i64).collect();
        let targets = Tensor::from_slice(&labels)
            .one_hot(num_classes as i64)
            .to_kind(Kind::Float);
        Self { images, targets }
    }
}

/// `x̃ = λ·x′ + (1 − λ)·x` and `ỹ = λ·y′ + (1 − λ)·y`, with one λ per pair
/// drawn from `sampler`. `primary` plays the role of `x′`.
pub fn mixup_batch(
    primary: &Batch,
    secondary: &Batch,
    sampler: &LambdaSampler,
    seed: u64,
) -> Result<Batch> {
    let n = primary.images.size().first().copied().unwrap_or(0) as usize;
    let lambdas = sampler.sample(n, seed)?;
    mix_with(primary, secondary, &lambdas)
}

/// Mixup with explicit per-pair weights.
pub fn mix_with(primary: &Batch, secondary: &Batch, lambdas: &[f64]) -> Result<Batch> {
    if primary.images.size() != secondary.images.size() {
        return Err(Error::shape(
            "mixup images",
            format!("{:?}", primary.images.size()),
            format!("{:?}", secondary.images.size()),
        ));
    }
    if primary.targets.size() != secondary.targets.size() {
        return Err(Error::shape(
            "mixup targets",
            format!("{:?}", primary.targets.size()),
            format!("{:?}", secondary.targets.size()),
        ));
    }
    let n = primary.images.size()[0];
    if lambdas.len() as i64 != n || primary.targets.size()[0] != n {
        return Err(Error::shape("mixup weights", n, lambdas.len()));
    }
    if let Some(l) = lambdas.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        return Err(Error::invalid(format!("mixup weight {l} outside [0, 1]")));
    }
    let lam = Tensor::from_slice(lambdas).to_kind(Kind::Float);
    let mix = |a: &Tensor, b: &Tensor| {
        let mut shape = vec![n];
        shape.resize(a.dim(), 1);
        let l = lam.view(shape.as_slice());
        let mixed = a * &l + b * (-&l + 1.0);
        // Rounding may step a hair outside the segment; pull it back.
        mixed.maximum(&a.minimum(b)).minimum(&a.maximum(b))
    };
    Ok(Batch {
        images: mix(&primary.images, &secondary.images),
        targets: mix(&primary.targets, &secondary.targets),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::schedule::Direction;

    fn batch(values: &[f32], labels: &[usize], c: usize) -> Batch {
        Batch::one_hot(Tensor::from_slice(values).view([-1, 1]), labels, c)
    }

    fn vec(t: &Tensor) -> Vec<f32> {
        Vec::<f32>::try_from(t.flatten(0, -1)).unwrap()
    }

    #[test]
    fn boundary_weights_are_exact() {
        let synth = batch(&[0.3, -0.7], &[1, 2], 3);
        let real = batch(&[0.9, 0.1], &[0, 0], 3);
        let zero = mix_with(&synth, &real, &[0.0, 0.0]).unwrap();
        assert_eq!(vec(&zero.images), vec(&real.images));
        assert_eq!(vec(&zero.targets), vec(&real.targets));
        let one = mix_with(&synth, &real, &[1.0, 1.0]).unwrap();
        assert_eq!(vec(&one.images), vec(&synth.images));
        assert_eq!(vec(&one.targets), vec(&synth.targets));
    }

    #[test]
    fn midpoint_splits_the_label_mass() {
        let a = batch(&[0.0], &[2], 10);
        let b = batch(&[1.0], &[7], 10);
        let m = mix_with(&a, &b, &[0.5]).unwrap();
        let t = vec(&m.targets);
        assert_eq!((t[2], t[7]), (0.5, 0.5));
        assert_eq!(t.iter().sum::<f32>(), 1.0);
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let a = batch(&[0.0, 1.0], &[0, 1], 2);
        let b = batch(&[0.0], &[0], 2);
        assert!(mixup_batch(&a, &b, &LambdaSampler::Uniform, 0).is_err());
    }

    #[test]
    fn samplers_are_seeded_and_bounded() {
        let u = LambdaSampler::Uniform.sample(100, 3).unwrap();
        assert_eq!(u, LambdaSampler::Uniform.sample(100, 3).unwrap());
        let b = LambdaSampler::Beta { a: 0.4 }.sample(100, 3).unwrap();
        assert!(b.iter().chain(&u).all(|l| (0.0..=1.0).contains(l)));
        assert!(LambdaSampler::Beta { a: -1.0 }.sample(1, 0).is_err());
    }

    #[test]
    fn source_choice_follows_sigma() {
        let always = TrainingSchedule::constant(1.0).unwrap();
        let never = TrainingSchedule::constant(0.0).unwrap();
        for u in [0.0, 0.5, 0.999] {
            assert_eq!(choose_mixup_source(3, &always, u), MixupSource::RealReal);
            assert_eq!(choose_mixup_source(3, &never, u), MixupSource::RealSynthetic);
        }
        let up = TrainingSchedule::new(Direction::Increasing, 0.0, 1.0).unwrap();
        assert_eq!(choose_mixup_source(0, &up, 0.0), MixupSource::RealSynthetic);
    }
}
