use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_dataset, Adam, AdamConfig, Arch, Autoencoder, InitScheme, Likelihood, NormStats, VaeModel};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    /// When set, overrides `max_steps` with this many passes over the data.
    pub epochs: Option<usize>,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub init_scheme: InitScheme,
    pub likelihood: Likelihood,
    /// Multiplier on the reconstruction term; 1 gives the plain negative
    /// ELBO, which on [0.05, 0.95]-normalized phasors collapses the latent
    /// code onto the prior.
    pub recon_weight: f64,
    /// Steps averaged into one smoothed-loss value.
    pub eval_window: usize,
    /// Stop once the smoothed loss improved by less than
    /// `min_rel_improvement` over this many windows.
    pub patience: usize,
    pub min_rel_improvement: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 64,
            max_steps: 20_000,
            epochs: None,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            init_scheme: InitScheme::Scaled,
            likelihood: Likelihood::Gaussian,
            recon_weight: 100.0,
            eval_window: 100,
            patience: 50,
            min_rel_improvement: 1e-4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.recon_weight > 0.0 && self.recon_weight.is_finite()) {
            return Err(Error::Config("recon_weight must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.eval_window == 0 || self.patience == 0 {
            return Err(Error::Config("eval_window and patience must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }

    fn step_budget(&self, n: usize) -> usize {
        match self.epochs {
            Some(e) => e * n.div_ceil(self.batch_size),
            None => self.max_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Batch loss at every step.
    pub losses: Vec<f64>,
    pub steps: usize,
    /// True when the plateau criterion stopped training before the budget.
    pub stopped_early: bool,
}

impl TrainReport {
    /// Mean loss over consecutive windows of `w` steps.
    pub fn smoothed(&self, w: usize) -> Vec<f64> {
        self.losses
            .chunks_exact(w.max(1))
            .map(|c| c.iter().sum::<f64>() / c.len() as f64)
            .collect()
    }
}

/// Fit a VAE to raw measurement vectors. Normalization statistics are
/// frozen from `dataset` before training.
pub fn train(dataset: &[Vec<f64>], arch: &Arch, config: &TrainConfig) -> Result<(VaeModel, TrainReport)> {
    config.validate()?;
    let dim = check_dataset(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = VaeModel::new(dim, arch, config.likelihood, config.init_scheme, &mut rng)?;
    model.norm_stats = NormStats::fit(dataset)?;
    model.recon_weight = config.recon_weight;
    let data = normalized(&model.norm_stats, dataset)?;
    let report = run(&mut model, &data, config, &mut rng, |m, x, r| {
        m.elbo_loss(x, r).map(|(parts, g)| (parts.loss, g))
    }, VaeModel::params_mut)?;
    Ok((model, report))
}

/// Fit the deterministic autoencoder baseline on squared error.
pub fn train_plain_ae(
    dataset: &[Vec<f64>],
    arch: &Arch,
    config: &TrainConfig,
) -> Result<(Autoencoder, TrainReport)> {
    config.validate()?;
    let dim = check_dataset(dataset)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Autoencoder::new(dim, arch, config.init_scheme, &mut rng)?;
    model.norm_stats = NormStats::fit(dataset)?;
    let data = normalized(&model.norm_stats, dataset)?;
    let report = run(&mut model, &data, config, &mut rng, |m, x, _| m.mse_loss(x), Autoencoder::params_mut)?;
    Ok((model, report))
}

fn normalized(norm: &NormStats, data: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    data.iter().map(|x| norm.normalize(x)).collect()
}

type LossFn<M> = fn(&M, &DMatrix<f64>, &mut ChaCha8Rng) -> Result<(f64, Vec<Vec<f64>>)>;

fn run<M>(
    model: &mut M,
    data: &[Vec<f64>],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
    loss: LossFn<M>,
    params: fn(&mut M) -> Vec<&mut [f64]>,
) -> Result<TrainReport> {
    let dim = data[0].len();
    let budget = config.step_budget(data.len());
    let batch = config.batch_size.min(data.len());
    let mut adam = Adam::new(config.adam());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut losses = Vec::with_capacity(budget);
    let mut windows: Vec<f64> = Vec::new();
    let mut stopped_early = false;

    for step in 0..budget {
        let mut x = DMatrix::zeros(dim, batch);
        for c in 0..batch {
            if cursor == order.len() {
                order.shuffle(rng);
                cursor = 0;
            }
            x.set_column(c, &nalgebra::DVector::from_column_slice(&data[order[cursor]]));
            cursor += 1;
        }
        let (l, grads) = loss(model, &x, rng)?;
        adam.step(params(model), &grads);
        losses.push(l);

        if (step + 1) % config.eval_window == 0 {
            let w = &losses[losses.len() - config.eval_window..];
            windows.push(w.iter().sum::<f64>() / w.len() as f64);
            let k = windows.len();
            if k % 50 == 0 {
                log::debug!("step {} smoothed loss {:.6}", step + 1, windows[k - 1]);
            }
            if k > config.patience {
                let old = windows[k - 1 - config.patience];
                let rel = (old - windows[k - 1]) / old.abs().max(f64::MIN_POSITIVE);
                if rel < config.min_rel_improvement {
                    stopped_early = true;
                    break;
                }
            }
        }
    }
    Ok(TrainReport {
        steps: losses.len(),
        losses,
        stopped_early,
    })
}
