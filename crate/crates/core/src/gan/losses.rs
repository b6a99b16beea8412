//! Adversarial and conditional objectives.

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Unit-norm tolerance for embeddings and proxies fed to [`d2dce_loss`].
pub const UNIT_NORM_TOLERANCE: f64 = 1e-3;

/// Hinge losses for a batch of discriminator scores:
/// `L_D = mean(relu(1 − real)) + mean(relu(1 + fake))`, `L_G = −mean(fake)`.
pub fn hinge_losses(real_scores: &Tensor, fake_scores: &Tensor) -> Result<(Tensor, Tensor)> {
    if real_scores.numel() == 0 || fake_scores.numel() == 0 {
        return Err(Error::invalid("hinge loss needs nonempty score batches"));
    }
    let d_loss = (-real_scores + 1.0).relu().mean(Kind::Float)
        + (fake_scores + 1.0).relu().mean(Kind::Float);
    Ok((d_loss, hinge_generator_loss(fake_scores)))
}

pub fn hinge_generator_loss(fake_scores: &Tensor) -> Tensor {
    -fake_scores.mean(Kind::Float)
}

/// Hyperparameters of the data-to-data cross-entropy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct D2dceParams {
    pub temperature: f64,
    /// Positive margin: similarity to the own-class proxy is clipped above at
    /// `m_p`, so it stops pulling once it exceeds the margin.
    pub margin_positive: f64,
    /// Negative margin: sample-to-sample similarity below `m_n` does not repel.
    pub margin_negative: f64,
}

impl Default for D2dceParams {
    fn default() -> Self {
        Self {
            temperature: 0.25,
            margin_positive: 0.98,
            margin_negative: 0.02,
        }
    }
}

fn check_unit_rows(what: &str, rows: &Tensor) -> Result<()> {
    let norms = rows.detach().to_kind(Kind::Double).norm_scalaropt_dim(2.0, [1], false);
    let worst = (norms - 1.0).abs().max().double_value(&[]);
    if !(worst <= UNIT_NORM_TOLERANCE) {
        return Err(Error::NotNormalized {
            what: what.to_string(),
            norm: 1.0 + worst,
        });
    }
    Ok(())
}

/// Data-to-data cross-entropy over a batch of unit embeddings `N × d`, their
/// labels `N`, and per-class unit proxies `K × d`:
///
/// ```text
/// p_i   = min(f_i·v_{y_i} − m_p, 0) / τ
/// n_ij  = max(f_i·f_j − m_n, 0) / τ          for j with y_j ≠ y_i
/// loss  = mean_i −log( e^{p_i} / (e^{p_i} + Σ_j e^{n_ij}) )
/// ```
pub fn d2dce_loss(
    embeddings: &Tensor,
    labels: &Tensor,
    proxies: &Tensor,
    params: &D2dceParams,
) -> Result<Tensor> {
    let size = embeddings.size();
    if size.len() != 2 || size[0] == 0 {
        return Err(Error::invalid("d2dce needs a nonempty N × d embedding batch"));
    }
    if labels.size() != [size[0]] {
        return Err(Error::shape("d2dce labels", size[0], format!("{:?}", labels.size())));
    }
    let psize = proxies.size();
    if psize.len() != 2 || psize[1] != size[1] {
        return Err(Error::shape("d2dce proxies", format!("K×{}", size[1]), format!("{psize:?}")));
    }
    if !(params.temperature > 0.0) {
        return Err(Error::invalid("d2dce temperature must be positive"));
    }
    check_unit_rows("d2dce embeddings", embeddings)?;
    check_unit_rows("d2dce proxies", proxies)?;

    let tau = params.temperature;
    let own_proxy = proxies.index_select(0, labels);
    let positive = ((embeddings * own_proxy).sum_dim_intlist([1i64].as_slice(), false, Kind::Float)
        - params.margin_positive)
        .clamp_max(0.0)
        / tau;
    let similarity = embeddings.matmul(&embeddings.tr());
    let negative = (similarity - params.margin_negative).clamp_min(0.0) / tau;
    let different = labels.unsqueeze(1).ne_tensor(&labels.unsqueeze(0));
    // Same-label pairs (including the diagonal) drop out of the denominator.
    let negative = negative.masked_fill(&different.logical_not(), f64::NEG_INFINITY);
    let logits = Tensor::cat(&[positive.unsqueeze(1), negative], 1);
    let loss = logits.logsumexp([1], false) - positive;
    Ok(loss.mean(Kind::Float))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tch::Device;

    fn scalar(t: &Tensor) -> f64 {
        t.double_value(&[])
    }

    fn scores(v: &[f32]) -> Tensor {
        Tensor::from_slice(v)
    }

    #[test]
    fn hinge_examples() {
        let (d, g) = hinge_losses(&scores(&[1.0]), &scores(&[-1.0])).unwrap();
        assert_eq!((scalar(&d), scalar(&g)), (0.0, 1.0));
        let (d, g) = hinge_losses(&scores(&[0.0]), &scores(&[0.0])).unwrap();
        assert_eq!((scalar(&d), scalar(&g)), (2.0, 0.0));
        let (d, g) = hinge_losses(&scores(&[2.0, 0.5]), &scores(&[-3.0, 0.0])).unwrap();
        assert!((scalar(&d) - 0.75).abs() < 1e-7);
        assert!((scalar(&g) - 1.5).abs() < 1e-7);
        assert!(hinge_losses(&scores(&[]), &scores(&[1.0])).is_err());
    }

    fn unit(v: &[f32]) -> Vec<f32> {
        let n = v.iter().map(|x| x * x).sum::<f32>().sqrt();
        v.iter().map(|x| x / n).collect()
    }

    fn matrix(rows: &[Vec<f32>]) -> Tensor {
        let d = rows[0].len() as i64;
        Tensor::from_slice(&rows.concat()).view([-1, d])
    }

    #[test]
    fn singleton_batch_above_margin_is_zero() {
        let e = matrix(&[unit(&[1.0, 0.0, 0.0])]);
        let p = matrix(&[unit(&[1.0, 0.01, 0.0])]);
        let labels = Tensor::from_slice(&[0i64]);
        let loss = d2dce_loss(&e, &labels, &p, &D2dceParams::default()).unwrap();
        assert_eq!(scalar(&loss), 0.0);
    }

    #[test]
    fn single_label_batch_has_no_negatives() {
        let e = matrix(&[unit(&[1.0, 0.0]), unit(&[1.0, 0.001]), unit(&[1.0, -0.001])]);
        let p = matrix(&[unit(&[1.0, 0.0]), unit(&[0.0, 1.0])]);
        let labels = Tensor::from_slice(&[0i64, 0, 0]);
        let loss = d2dce_loss(&e, &labels, &p, &D2dceParams::default()).unwrap();
        assert!(scalar(&loss).abs() < 1e-7);
    }

    #[test]
    fn rejects_unnormalized_inputs() {
        let e = matrix(&[vec![2.0, 0.0]]);
        let p = matrix(&[unit(&[1.0, 0.0])]);
        let labels = Tensor::from_slice(&[0i64]);
        assert!(matches!(
            d2dce_loss(&e, &labels, &p, &D2dceParams::default()),
            Err(Error::NotNormalized { .. })
        ));
        let e = matrix(&[unit(&[1.0, 0.0])]);
        let p = matrix(&[vec![1.0, 0.1]]);
        assert!(d2dce_loss(&e, &labels, &p, &D2dceParams::default()).is_err());
    }

    #[test]
    fn loss_is_differentiable_and_nonnegative() {
        tch::manual_seed(5);
        let raw = Tensor::randn([6, 4], (Kind::Float, Device::Cpu)).set_requires_grad(true);
        let e = &raw / raw.norm_scalaropt_dim(2.0, [1], true);
        let p = Tensor::randn([3, 4], (Kind::Float, Device::Cpu));
        let p = &p / p.norm_scalaropt_dim(2.0, [1], true);
        let labels = Tensor::from_slice(&[0i64, 1, 2, 0, 1, 2]);
        let loss = d2dce_loss(&e, &labels, &p, &D2dceParams::default()).unwrap();
        assert!(scalar(&loss) >= 0.0);
        loss.backward();
        assert!(f64::try_from(raw.grad().abs().sum(Kind::Float)).unwrap() > 0.0);
    }
}
