//! Multilayer-perceptron variational autoencoder with hand-written
//! backpropagation, plus a deterministic autoencoder baseline.

mod adam;
mod mlp;
mod train;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use adam::{Adam, AdamConfig};
pub use mlp::{
    sigmoid, softplus, Activation, InitScheme, LayerGrad, Mlp, MlpLayer, Trace, VAR_FLOOR,
};
pub use train::{train, train_plain_ae, TrainConfig, TrainReport};

/// Normalized channels span this interval over the training set.
pub const NORM_LOW: f64 = 0.05;
pub const NORM_HIGH: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Likelihood {
    Gaussian,
    Bernoulli,
}

/// Per-channel affine map `x_n = (x - offset) * scale`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl NormStats {
    pub fn identity(dim: usize) -> Self {
        NormStats {
            offset: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Maps each channel's training min/max onto [0.05, 0.95]; a constant
    /// channel maps to 0.5.
    pub fn fit(data: &[Vec<f64>]) -> Result<Self> {
        let dim = check_dataset(data)?;
        let mut offset = vec![0.0; dim];
        let mut scale = vec![1.0; dim];
        for c in 0..dim {
            let (lo, hi) = data.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), x| {
                (l.min(x[c]), h.max(x[c]))
            });
            if hi > lo {
                scale[c] = (NORM_HIGH - NORM_LOW) / (hi - lo);
                offset[c] = lo - NORM_LOW / scale[c];
            } else {
                offset[c] = lo - 0.5;
            }
        }
        Ok(NormStats { offset, scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.offset.len() != self.scale.len() {
            return Err(Error::DimensionMismatch {
                expected: self.scale.len(),
                got: self.offset.len(),
            });
        }
        if self
            .scale
            .iter()
            .zip(&self.offset)
            .any(|(s, o)| !(*s > 0.0 && s.is_finite() && o.is_finite()))
        {
            return Err(Error::Config("normalization scales must be positive and finite".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| (v - o) * s)
            .collect())
    }

    pub fn denormalize(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        Ok(x.iter()
            .zip(self.offset.iter().zip(&self.scale))
            .map(|(v, (o, s))| v / s + o)
            .collect())
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(())
    }
}

/// Diagonal Gaussian over the latent space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentDistribution {
    pub mu: Vec<f64>,
    pub var: Vec<f64>,
}

/// `Σ ½(−ln σ² + σ² + μ² − 1)`: KL divergence to the standard normal.
pub fn kl_gauss(dist: &LatentDistribution) -> f64 {
    dist.mu
        .iter()
        .zip(&dist.var)
        .map(|(m, v)| 0.5 * (-v.ln() + v + m * m - 1.0))
        .sum()
}

/// Squared error (gaussian) or binary cross-entropy (bernoulli).
pub fn recon_loss(x_hat: &[f64], x: &[f64], likelihood: Likelihood) -> Result<f64> {
    if x_hat.len() != x.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: x_hat.len(),
        });
    }
    match likelihood {
        Likelihood::Gaussian => Ok(x.iter().zip(x_hat).map(|(a, b)| (a - b) * (a - b)).sum()),
        Likelihood::Bernoulli => {
            let inside = |v: &f64| (0.0..=1.0).contains(v);
            if !x.iter().all(inside) || !x_hat.iter().all(inside) {
                return Err(Error::Domain(
                    "cross-entropy needs values in [0, 1]".into(),
                ));
            }
            let xlogy = |a: f64, b: f64| if a == 0.0 { 0.0 } else { a * b.ln() };
            Ok(-x
                .iter()
                .zip(x_hat)
                .map(|(&xi, &yi)| xlogy(xi, yi) + xlogy(1.0 - xi, 1.0 - yi))
                .sum::<f64>())
        }
    }
}

/// `z = μ + √σ² ⊙ ε`, ε standard normal.
pub fn reparameterize<R: Rng + ?Sized>(dist: &LatentDistribution, rng: &mut R) -> Vec<f64> {
    dist.mu
        .iter()
        .zip(&dist.var)
        .map(|(m, v)| {
            let e: f64 = StandardNormal.sample(rng);
            m + v.sqrt() * e
        })
        .collect()
}

/// Layer widths: hidden encoder units, latent size, hidden decoder units.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Arch {
    pub encoder_hidden: Vec<usize>,
    pub latent_dim: usize,
    pub decoder_hidden: Vec<usize>,
}

impl Arch {
    /// From unit lists written as in `encoder 100,100,4 / decoder
    /// 100,100,10`: the encoder's last entry counts both latent heads and
    /// the decoder's last entry is the input width.
    pub fn from_unit_lists(encoder: &[usize], decoder: &[usize], input_dim: usize) -> Result<Self> {
        let (&heads, enc_hidden) = encoder
            .split_last()
            .ok_or_else(|| Error::Config("encoder unit list is empty".into()))?;
        let (&out, dec_hidden) = decoder
            .split_last()
            .ok_or_else(|| Error::Config("decoder unit list is empty".into()))?;
        if heads == 0 || heads % 2 != 0 {
            return Err(Error::Config(format!(
                "encoder output {heads} must hold a mean and a variance per latent unit"
            )));
        }
        if out != input_dim {
            return Err(Error::DimensionMismatch {
                expected: input_dim,
                got: out,
            });
        }
        let arch = Arch {
            encoder_hidden: enc_hidden.to_vec(),
            latent_dim: heads / 2,
            decoder_hidden: dec_hidden.to_vec(),
        };
        arch.validate()?;
        Ok(arch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        if self
            .encoder_hidden
            .iter()
            .chain(&self.decoder_hidden)
            .any(|&w| w == 0)
        {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(())
    }
}

/// Loss terms averaged over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ElboParts {
    pub loss: f64,
    pub recon: f64,
    pub kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VaeModel {
    pub encoder: Mlp,
    pub mean_head: MlpLayer,
    pub var_head: MlpLayer,
    pub decoder: Mlp,
    pub latent_dim: usize,
    pub norm_stats: NormStats,
    pub recon_likelihood: Likelihood,
    /// Multiplier on the reconstruction term of the training loss.
    #[serde(default = "unit_weight")]
    pub recon_weight: f64,
}

fn unit_weight() -> f64 {
    1.0
}

impl VaeModel {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        arch: &Arch,
        likelihood: Likelihood,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        if input_dim == 0 {
            return Err(Error::Config("input dimension must be positive".into()));
        }
        let encoder = Mlp::build(
            input_dim,
            &arch.encoder_hidden,
            Activation::Relu,
            Activation::Relu,
            init,
            rng,
        );
        let h = arch.encoder_hidden.last().copied().unwrap_or(input_dim);
        let mean_head = MlpLayer::new(h, arch.latent_dim, Activation::Identity, init, rng);
        let var_head = MlpLayer::new(h, arch.latent_dim, Activation::Softplus, init, rng);
        let out_act = match likelihood {
            Likelihood::Gaussian => Activation::Identity,
            Likelihood::Bernoulli => Activation::Sigmoid,
        };
        let mut widths = arch.decoder_hidden.clone();
        widths.push(input_dim);
        let decoder = Mlp::build(arch.latent_dim, &widths, Activation::Relu, out_act, init, rng);
        Ok(VaeModel {
            encoder,
            mean_head,
            var_head,
            decoder,
            latent_dim: arch.latent_dim,
            norm_stats: NormStats::identity(input_dim),
            recon_likelihood: likelihood,
            recon_weight: 1.0,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.norm_stats.dim()
    }

    pub fn output_dim(&self) -> usize {
        self.decoder.out_dim()
    }

    /// Structural checks for a model loaded from disk.
    pub fn validate(&self) -> Result<()> {
        self.norm_stats.validate()?;
        self.encoder.validate()?;
        self.decoder.validate()?;
        let h = if self.encoder.layers.is_empty() {
            self.input_dim()
        } else {
            self.encoder.out_dim()
        };
        if !self.encoder.layers.is_empty() && self.encoder.in_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: self.encoder.in_dim(),
            });
        }
        for head in [&self.mean_head, &self.var_head] {
            if head.in_dim() != h || head.out_dim() != self.latent_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.latent_dim,
                    got: head.out_dim(),
                });
            }
        }
        if self.decoder.in_dim() != self.latent_dim || self.output_dim() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: self.output_dim(),
            });
        }
        let all_finite = self.encoder.is_finite()
            && self.decoder.is_finite()
            && self.mean_head.is_finite()
            && self.var_head.is_finite();
        if !all_finite {
            return Err(Error::Config("model has non-finite parameters".into()));
        }
        Ok(())
    }

    /// Latent means and variances for a normalized batch (columns).
    pub fn encode_batch(&self, x: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        let h = self.encoder.forward(x)?;
        let mu = self.mean_head.forward(&h)?;
        let var = self.var_head.forward(&h)?.map(|v| v.max(VAR_FLOOR));
        Ok((mu, var))
    }

    /// Latent distribution of a normalized input.
    pub fn encode(&self, x: &[f64]) -> Result<LatentDistribution> {
        if x.len() != self.input_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        let (mu, var) = self.encode_batch(&DMatrix::from_column_slice(x.len(), 1, x))?;
        Ok(LatentDistribution {
            mu: mu.as_slice().to_vec(),
            var: var.as_slice().to_vec(),
        })
    }

    /// Latent distribution of a raw measurement vector.
    pub fn encode_raw(&self, x: &[f64]) -> Result<LatentDistribution> {
        self.encode(&self.norm_stats.normalize(x)?)
    }

    /// Decoder output (normalized units) for a latent point.
    pub fn decode(&self, z: &[f64]) -> Result<Vec<f64>> {
        let out = self
            .decoder
            .forward(&DMatrix::from_column_slice(z.len(), 1, z))?;
        Ok(out.as_slice().to_vec())
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        p.extend(self.mean_head.params_mut());
        p.extend(self.var_head.params_mut());
        p.extend(self.decoder.params_mut());
        p
    }

    /// Batch-mean negative ELBO for normalized inputs `x` (columns) with
    /// the noise `eps` (latent_dim × batch) held fixed, and its gradient
    /// in `params_mut` order.
    pub fn elbo_with_noise(
        &self,
        x: &DMatrix<f64>,
        eps: &DMatrix<f64>,
    ) -> Result<(ElboParts, Vec<Vec<f64>>)> {
        let b = x.ncols();
        if eps.nrows() != self.latent_dim || eps.ncols() != b {
            return Err(Error::DimensionMismatch {
                expected: self.latent_dim * b,
                got: eps.nrows() * eps.ncols(),
            });
        }
        let bf = b as f64;
        let enc = self.encoder.forward_trace(x)?;
        let h = &enc.output;
        let a_mu = self.mean_head.pre_activation(h)?;
        let a_v = self.var_head.pre_activation(h)?;
        let var = a_v.map(|a| softplus(a).max(VAR_FLOOR));
        let sd = var.map(f64::sqrt);
        let z = &a_mu + sd.component_mul(eps);

        let dec = self.decoder.forward_trace(&z)?;
        let x_hat = &dec.output;
        let (recon, d_out, is_pre) = match self.recon_likelihood {
            Likelihood::Gaussian => {
                let diff = x_hat - x;
                let r = diff.norm_squared() / bf;
                (r, diff * (2.0 / bf), false)
            }
            Likelihood::Bernoulli => {
                let logits = dec.pre.last().expect("decoder has layers");
                let mut r = 0.0;
                for (a, t) in logits.iter().zip(x.iter()) {
                    r += softplus(*a) - t * a;
                }
                (r / bf, (x_hat - x) / bf, true)
            }
        };
        let mut kl = 0.0;
        for (m, v) in a_mu.iter().zip(var.iter()) {
            kl += 0.5 * (-v.ln() + v + m * m - 1.0);
        }
        kl /= bf;
        let loss = self.recon_weight * recon + kl;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }

        let (dec_grads, dz) = self.decoder.backward(&dec, d_out * self.recon_weight, is_pre);
        let d_mu = &dz + &a_mu / bf;
        let mut d_av = DMatrix::zeros(self.latent_dim, b);
        for k in 0..d_av.len() {
            let v = var[k];
            let dv = dz[k] * eps[k] / (2.0 * sd[k]) + 0.5 * (1.0 - 1.0 / v) / bf;
            d_av[k] = if softplus(a_v[k]) > VAR_FLOOR {
                dv * sigmoid(a_v[k])
            } else {
                0.0
            };
        }
        let head_grad = |d: &DMatrix<f64>| LayerGrad {
            weights: d * h.transpose(),
            bias: d.column_sum(),
        };
        let mu_grad = head_grad(&d_mu);
        let v_grad = head_grad(&d_av);
        let dh = self.mean_head.weights.transpose() * &d_mu
            + self.var_head.weights.transpose() * &d_av;
        let (enc_grads, _) = self.encoder.backward(&enc, dh, false);

        let mut grads = Vec::new();
        for g in enc_grads.into_iter().chain([mu_grad, v_grad]).chain(dec_grads) {
            grads.extend(g.into_slices());
        }
        Ok((ElboParts { loss, recon, kl }, grads))
    }

    /// Negative ELBO with noise drawn from `rng`.
    pub fn elbo_loss<R: Rng + ?Sized>(
        &self,
        x: &DMatrix<f64>,
        rng: &mut R,
    ) -> Result<(ElboParts, Vec<Vec<f64>>)> {
        let eps = DMatrix::from_fn(self.latent_dim, x.ncols(), |_, _| StandardNormal.sample(rng));
        self.elbo_with_noise(x, &eps)
    }
}

/// Deterministic autoencoder trained on squared reconstruction error.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Autoencoder {
    pub encoder: Mlp,
    pub decoder: Mlp,
    pub norm_stats: NormStats,
}

impl Autoencoder {
    pub fn new<R: Rng + ?Sized>(
        input_dim: usize,
        arch: &Arch,
        init: InitScheme,
        rng: &mut R,
    ) -> Result<Self> {
        arch.validate()?;
        let mut enc = arch.encoder_hidden.clone();
        enc.push(arch.latent_dim);
        let mut dec = arch.decoder_hidden.clone();
        dec.push(input_dim);
        Ok(Autoencoder {
            encoder: Mlp::build(input_dim, &enc, Activation::Relu, Activation::Identity, init, rng),
            decoder: Mlp::build(
                arch.latent_dim,
                &dec,
                Activation::Relu,
                Activation::Identity,
                init,
                rng,
            ),
            norm_stats: NormStats::identity(input_dim),
        })
    }

    /// Latent code of a normalized input.
    pub fn code(&self, x: &[f64]) -> Result<Vec<f64>> {
        let m = DMatrix::from_column_slice(x.len(), 1, x);
        Ok(self.encoder.forward(&m)?.as_slice().to_vec())
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Batch-mean squared reconstruction error and its gradient.
    pub fn mse_loss(&self, x: &DMatrix<f64>) -> Result<(f64, Vec<Vec<f64>>)> {
        let bf = x.ncols() as f64;
        let enc = self.encoder.forward_trace(x)?;
        let dec = self.decoder.forward_trace(&enc.output)?;
        let diff = &dec.output - x;
        let loss = diff.norm_squared() / bf;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!("non-finite loss {loss}")));
        }
        let (dec_grads, dcode) = self.decoder.backward(&dec, diff * (2.0 / bf), false);
        let (enc_grads, _) = self.encoder.backward(&enc, dcode, false);
        let grads = enc_grads
            .into_iter()
            .chain(dec_grads)
            .flat_map(LayerGrad::into_slices)
            .collect();
        Ok((loss, grads))
    }
}

pub(crate) fn check_dataset(data: &[Vec<f64>]) -> Result<usize> {
    let dim = data
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::EmptyRequest("dataset is empty".into()))?;
    if dim == 0 {
        return Err(Error::EmptyRequest("dataset vectors are empty".into()));
    }
    if let Some(bad) = data.iter().find(|v| v.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: bad.len(),
        });
    }
    if data.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Domain("dataset contains non-finite values".into()));
    }
    Ok(dim)
}
