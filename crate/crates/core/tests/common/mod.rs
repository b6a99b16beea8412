//! Brute-force reference implementations shared by the integration tests and
//! the acceptance runner.

#![allow(dead_code)]

use std::collections::BTreeSet;

use balancegen::gan::GanMode;
use balancegen::synthesis::{ConditionRef, SyntheticDataset, SyntheticSample};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Data-to-data cross-entropy evaluated term by term in f64.
pub fn d2dce_reference(
    embeddings: &[Vec<f64>],
    labels: &[usize],
    proxies: &[Vec<f64>],
    tau: f64,
    m_p: f64,
    m_n: f64,
) -> f64 {
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    let n = embeddings.len();
    let mut total = 0.0;
    for i in 0..n {
        let p = (dot(&embeddings[i], &proxies[labels[i]]) - m_p).min(0.0) / tau;
        let mut terms = vec![p];
        for j in 0..n {
            if labels[j] != labels[i] {
                terms.push((dot(&embeddings[i], &embeddings[j]) - m_n).max(0.0) / tau);
            }
        }
        let top = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = top + terms.iter().map(|t| (t - top).exp()).sum::<f64>().ln();
        total += lse - p;
    }
    total / n as f64
}

pub fn unit_vectors(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let v: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-9);
            v.into_iter().map(|x| x / norm).collect()
        })
        .collect()
}

/// One synthetic sample as the filter sees it.
#[derive(Clone, Debug)]
pub struct Scored {
    pub label: usize,
    pub score: f64,
    pub latent_seed: u64,
}

pub fn scored_dataset(items: &[Scored], num_classes: usize) -> SyntheticDataset {
    SyntheticDataset {
        samples: items
            .iter()
            .enumerate()
            .map(|(i, s)| SyntheticSample {
                sample_id: format!("s{i:05}"),
                label: s.label,
                index: i,
                latent_seed: s.latent_seed,
                condition_ref: ConditionRef::Label(s.label),
                score: Some(s.score),
                image: vec![0; 3],
            })
            .collect(),
        num_classes,
        image_size: (1, 1),
        mode: GanMode::Label,
        generator_fingerprint: "g".into(),
        generator_dataset: "d".into(),
        pose_source: None,
        multi_source: false,
        seed: 0,
        scorer_fingerprint: Some("scorer".into()),
        filter: None,
    }
}

/// Random scored set; scores come from a small grid so ties are common.
pub fn random_scored(rng: &mut ChaCha8Rng, max_n: usize, num_classes: usize) -> Vec<Scored> {
    let n = rng.gen_range(1..=max_n);
    (0..n)
        .map(|_| Scored {
            label: rng.gen_range(0..num_classes),
            score: rng.gen_range(0..20) as f64 / 19.0,
            latent_seed: rng.gen_range(0..50),
        })
        .collect()
}

/// Indices kept by per-class top-k with `ceil(num/den · N_c)` per class,
/// ranking by (score desc, latent seed asc, index asc).
pub fn filter_reference(items: &[Scored], num_classes: usize, num: u64, den: u64) -> BTreeSet<usize> {
    let mut kept = BTreeSet::new();
    for c in 0..num_classes {
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| items[i].label == c).collect();
        if members.is_empty() {
            continue;
        }
        let k = ((num * members.len() as u64).div_ceil(den) as usize).max(1);
        // Selection by repeated extraction of the best remaining member.
        for _ in 0..k {
            let mut best = 0;
            for pos in 1..members.len() {
                let (a, b) = (&items[members[pos]], &items[members[best]]);
                let better = a.score > b.score
                    || (a.score == b.score && a.latent_seed < b.latent_seed)
                    || (a.score == b.score && a.latent_seed == b.latent_seed && members[pos] < members[best]);
                if better {
                    best = pos;
                }
            }
            kept.insert(members.remove(best));
        }
    }
    kept
}

pub fn kept_indices(filtered: &SyntheticDataset) -> BTreeSet<usize> {
    filtered
        .samples
        .iter()
        .map(|s| s.sample_id[1..].parse().unwrap())
        .collect()
}

/// Inception score of one chunk straight from the definition.
pub fn inception_reference(rows: &[Vec<f64>]) -> f64 {
    let c = rows[0].len();
    let n = rows.len() as f64;
    let marginal: Vec<f64> = (0..c).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let kl: f64 = rows
        .iter()
        .map(|r| {
            (0..c)
                .filter(|&j| r[j] > 0.0)
                .map(|j| r[j] * (r[j] / marginal[j]).ln())
                .sum::<f64>()
        })
        .sum::<f64>()
        / n;
    kl.exp()
}

/// (number of (gen, real) pairs inside real kNN balls, number of real points
/// whose ball holds a generated point), from a full distance matrix.
pub fn density_coverage_counts(real: &[Vec<f64>], gen: &[Vec<f64>], k: usize) -> (usize, usize) {
    let d2 = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let radii: Vec<f64> = real
        .iter()
        .map(|r| {
            let mut d: Vec<f64> = real.iter().map(|o| d2(r, o)).collect();
            d.sort_by(f64::total_cmp);
            // d[0] is the point itself.
            d[k]
        })
        .collect();
    let mut inside = 0;
    let mut covered = 0;
    for (r, &radius) in real.iter().zip(&radii) {
        let hits = gen.iter().filter(|g| d2(g, r) < radius).count();
        inside += hits;
        covered += usize::from(hits > 0);
    }
    (inside, covered)
}

pub fn gaussian_rows(rng: &mut ChaCha8Rng, n: usize, d: usize, shift: &[f64]) -> Vec<Vec<f64>> {
    use rand_distr::{Distribution, StandardNormal};
    (0..n)
        .map(|_| {
            (0..d)
                .map(|j| {
                    let z: f64 = StandardNormal.sample(rng);
                    z + shift.get(j).copied().unwrap_or(0.0)
                })
                .collect()
        })
        .collect()
}
