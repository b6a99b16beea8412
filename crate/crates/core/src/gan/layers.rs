//! Building blocks shared by the generator and discriminator.

use tch::nn::{self, Module};
use tch::{Kind, Tensor};

use crate::error::{Error, Result};

/// Power iterations run when a spectrally normalized layer is created, so the
/// first training step already uses a converged estimate.
const SN_INIT_ITERS: usize = 15;
const SN_EPS: f64 = 1e-12;

fn l2_normalize(v: &Tensor) -> Tensor {
    v / (v.norm() + SN_EPS)
}

/// A weight divided by a running power-iteration estimate of its largest
/// singular value. `u` and `v` are non-trainable buffers stored alongside the
/// weight, updated by one iteration per training-mode forward pass.
#[derive(Debug)]
pub struct SpectralWeight {
    pub weight: Tensor,
    u: Tensor,
    v: Tensor,
}

impl SpectralWeight {
    pub fn new(p: &nn::Path, shape: &[i64], fan_in: i64) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt() * 0.5;
        let weight = p.var("weight", shape, nn::Init::Uniform { lo: -bound, up: bound });
        let rows = shape[0];
        let cols: i64 = shape[1..].iter().product();
        let u = p.zeros_no_train("sn_u", &[rows]);
        let v = p.zeros_no_train("sn_v", &[cols]);
        let sw = Self { weight, u, v };
        tch::no_grad(|| {
            let init = Tensor::randn([rows], (Kind::Float, sw.u.device()));
            sw.u.shallow_clone().copy_(&l2_normalize(&init));
            for _ in 0..SN_INIT_ITERS {
                sw.power_iteration();
            }
        });
        sw
    }

    fn matrix(&self) -> Tensor {
        let rows = self.weight.size()[0];
        self.weight.view([rows, -1])
    }

    fn power_iteration(&self) {
        let w = self.matrix().detach();
        let v = l2_normalize(&w.tr().mv(&self.u));
        let u = l2_normalize(&w.mv(&v));
        self.v.shallow_clone().copy_(&v);
        self.u.shallow_clone().copy_(&u);
    }

    /// Current estimate of the largest singular value (differentiable in the weight).
    fn sigma(&self) -> Tensor {
        // Copies: the buffers change in place on the next training forward,
        // while this graph may still be waiting for its backward pass.
        self.u.copy().dot(&self.matrix().mv(&self.v.copy()))
    }

    pub fn normalized(&self, train: bool) -> Tensor {
        if train {
            tch::no_grad(|| self.power_iteration());
        }
        &self.weight / self.sigma()
    }

    /// Exact largest singular value of the normalized weight.
    pub fn normalized_spectral_norm(&self) -> f64 {
        tch::no_grad(|| {
            let w = self.matrix() / self.sigma();
            let w = w.to_kind(Kind::Double);
            w.tr().matmul(&w).linalg_eigvalsh("L").max().sqrt().double_value(&[])
        })
    }
}

#[derive(Debug)]
pub struct SnConv2d {
    weight: SpectralWeight,
    bias: Tensor,
    padding: i64,
}

impl SnConv2d {
    pub fn new(p: &nn::Path, in_ch: i64, out_ch: i64, kernel: i64) -> Self {
        let fan_in = in_ch * kernel * kernel;
        Self {
            weight: SpectralWeight::new(p, &[out_ch, in_ch, kernel, kernel], fan_in),
            bias: p.zeros("bias", &[out_ch]),
            padding: kernel / 2,
        }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        x.conv2d(
            &self.weight.normalized(train),
            Some(&self.bias),
            [1, 1],
            [self.padding, self.padding],
            [1, 1],
            1,
        )
    }

    pub fn spectral(&self) -> &SpectralWeight {
        &self.weight
    }
}

#[derive(Debug)]
pub struct SnLinear {
    weight: SpectralWeight,
    bias: Tensor,
}

impl SnLinear {
    pub fn new(p: &nn::Path, in_dim: i64, out_dim: i64) -> Self {
        Self {
            weight: SpectralWeight::new(p, &[out_dim, in_dim], in_dim),
            bias: p.zeros("bias", &[out_dim]),
        }
    }

    pub fn forward_t(&self, x: &Tensor, train: bool) -> Tensor {
        x.linear(&self.weight.normalized(train), Some(&self.bias))
    }

    pub fn spectral(&self) -> &SpectralWeight {
        &self.weight
    }
}

pub fn conv3x3(p: nn::Path, in_ch: i64, out_ch: i64) -> nn::Conv2D {
    nn::conv2d(
        p,
        in_ch,
        out_ch,
        3,
        nn::ConvConfig {
            padding: 1,
            ..Default::default()
        },
    )
}

fn zero_conv3x3(p: nn::Path, in_ch: i64, out_ch: i64) -> nn::Conv2D {
    nn::conv2d(
        p,
        in_ch,
        out_ch,
        3,
        nn::ConvConfig {
            padding: 1,
            ws_init: nn::Init::Const(0.0),
            bs_init: nn::Init::Const(0.0),
            ..Default::default()
        },
    )
}

/// Parameter-free per-channel standardization (batch statistics in training,
/// running statistics in evaluation).
fn plain_norm(p: nn::Path, channels: i64) -> nn::BatchNorm {
    nn::batch_norm2d(
        p,
        channels,
        nn::BatchNormConfig {
            affine: false,
            ..Default::default()
        },
    )
}

/// Nearest-neighbor resampling of `N × C × H × W` maps to `h × w`.
pub fn resize_nearest(map: &Tensor, h: i64, w: i64) -> Tensor {
    let size = map.size();
    if size[2] == h && size[3] == w {
        return map.shallow_clone();
    }
    map.upsample_nearest2d([h, w], None::<f64>, None::<f64>)
}

/// Class-conditional batch normalization: `(1 + Δγ[y]) ⊙ norm(x) + β[y]` with
/// zero-initialized per-class tables.
#[derive(Debug)]
pub struct ConditionalBatchNorm {
    norm: nn::BatchNorm,
    delta_gamma: nn::Embedding,
    beta: nn::Embedding,
}

impl ConditionalBatchNorm {
    pub fn new(p: &nn::Path, channels: i64, num_classes: i64) -> Self {
        let zeros = nn::EmbeddingConfig {
            ws_init: nn::Init::Const(0.0),
            ..Default::default()
        };
        Self {
            norm: plain_norm(p / "norm", channels),
            delta_gamma: nn::embedding(p / "delta_gamma", num_classes, channels, zeros),
            beta: nn::embedding(p / "beta", num_classes, channels, zeros),
        }
    }

    pub fn forward_t(&self, x: &Tensor, labels: &Tensor, train: bool) -> Tensor {
        let n = x.size()[0];
        let gamma = self.delta_gamma.forward(labels).view([n, -1, 1, 1]) + 1.0;
        let beta = self.beta.forward(labels).view([n, -1, 1, 1]);
        x.apply_t(&self.norm, train) * gamma + beta
    }
}

/// Spatially-adaptive normalization: `(1 + Δγ(map)) ⊙ norm(x) + β(map)`, where
/// Δγ and β are convolutions over a shared hidden projection of the map,
/// resampled to the feature resolution. Δγ and β start at zero.
#[derive(Debug)]
pub struct Spade {
    norm: nn::BatchNorm,
    shared: nn::Conv2D,
    delta_gamma: nn::Conv2D,
    beta: nn::Conv2D,
    map_channels: i64,
    channels: i64,
}

impl Spade {
    pub fn new(p: &nn::Path, channels: i64, map_channels: i64, hidden: i64) -> Self {
        Self {
            norm: plain_norm(p / "norm", channels),
            shared: conv3x3(p / "shared", map_channels, hidden),
            delta_gamma: zero_conv3x3(p / "delta_gamma", hidden, channels),
            beta: zero_conv3x3(p / "beta", hidden, channels),
            map_channels,
            channels,
        }
    }

    pub fn normalize(&self, features: &Tensor, train: bool) -> Tensor {
        features.apply_t(&self.norm, train)
    }

    pub fn forward_t(&self, features: &Tensor, map: &Tensor, train: bool) -> Result<Tensor> {
        let fs = features.size();
        let ms = map.size();
        if fs.len() != 4 || fs[1] != self.channels {
            return Err(Error::shape("spade features", format!("N×{}×h×w", self.channels), format!("{fs:?}")));
        }
        if ms.len() != 4 || ms[0] != fs[0] || ms[1] != self.map_channels {
            return Err(Error::shape(
                "spade conditioning map",
                format!("{}×{}×H×W", fs[0], self.map_channels),
                format!("{ms:?}"),
            ));
        }
        let map = resize_nearest(map, fs[2], fs[3]);
        let ms = map.size();
        if ms[2] != fs[2] || ms[3] != fs[3] {
            return Err(Error::shape(
                "resampled conditioning map",
                format!("{}x{}", fs[2], fs[3]),
                format!("{}x{}", ms[2], ms[3]),
            ));
        }
        let hidden = map.apply(&self.shared).relu();
        let gamma = hidden.apply(&self.delta_gamma) + 1.0;
        let beta = hidden.apply(&self.beta);
        Ok(self.normalize(features, train) * gamma + beta)
    }
}
