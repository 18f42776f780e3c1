//! Training loop: adaptive moment estimation with decoupled weight decay
//! and a cosine-annealed learning rate.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::model::{DynRslModel, TrainSample};
use crate::alignment::LossReport;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            steps: 200,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 || self.steps == 0 || self.batch_size < 2 {
            return Err(Error::Config {
                what: "learning_rate must be > 0, weight_decay >= 0, steps >= 1, batch_size >= 2".into(),
            });
        }
        Ok(())
    }
}

/// Cosine annealing from `lr0` down to zero at the final step.
pub fn cosine_lr(step: usize, total_steps: usize, lr0: f64) -> f64 {
    if total_steps <= 1 {
        return lr0;
    }
    let t = step.min(total_steps - 1) as f64 / (total_steps - 1) as f64;
    0.5 * lr0 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// AdamW. Parameters without a gradient this step are skipped entirely, so
/// frozen or unused heads stay bitwise unchanged.
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl AdamW {
    pub fn new(params: &[(String, Tensor)], weight_decay: f64) -> AdamW {
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            m: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![0.0; p.len()]).collect(),
            t: vec![0; params.len()],
        }
    }

    /// One update at learning rate `lr`; clears consumed gradients.
    pub fn step(&mut self, params: &[(String, Tensor)], lr: f64) -> Result<()> {
        for (i, (_, p)) in params.iter().enumerate() {
            if !p.requires_grad() {
                continue;
            }
            let Some(grad) = p.grad() else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as f64;
            let bc1 = 1.0 - self.beta1.powf(t);
            let bc2 = 1.0 - self.beta2.powf(t);
            let mut data = p.to_vec();
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            for j in 0..data.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * grad[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * data[j]);
            }
            p.set_data(&data)?;
            p.zero_grad();
        }
        Ok(())
    }
}

/// Run `cfg.steps` optimization steps over the dataset. Batches are sampled
/// without replacement each step under a per-step seed (the whole dataset
/// when it fits in one batch), so runs are bit-reproducible.
pub fn train(model: &DynRslModel, dataset: &[TrainSample], cfg: &TrainConfig) -> Result<Vec<LossReport>> {
    cfg.validate()?;
    if dataset.len() < 2 {
        return Err(Error::Contract {
            what: "training needs at least 2 samples".into(),
        });
    }
    let params = model.named_params();
    let mut opt = AdamW::new(&params, cfg.weight_decay);
    let mut reports = Vec::with_capacity(cfg.steps);
    let all: Vec<usize> = (0..dataset.len()).collect();
    for step in 0..cfg.steps {
        let step_seed = cfg.seed ^ (step as u64).wrapping_mul(0x9e3779b97f4a7c15);
        let batch: Vec<TrainSample> = if cfg.batch_size >= dataset.len() {
            dataset.to_vec()
        } else {
            let mut rng = ChaCha20Rng::seed_from_u64(step_seed);
            let mut idx = all.clone();
            idx.shuffle(&mut rng);
            idx.truncate(cfg.batch_size);
            idx.into_iter().map(|i| dataset[i].clone()).collect()
        };
        let (loss, report) = model.total_loss(&batch, step_seed)?;
        if !report.is_finite() {
            return Err(Error::TrainAbort {
                step,
                detail: format!(
                    "non-finite loss (itc={}, itm={}, itg={})",
                    report.itc, report.itm, report.itg
                ),
            });
        }
        loss.backward()?;
        opt.step(&params, cosine_lr(step, cfg.steps, cfg.learning_rate))?;
        reports.push(report);
    }
    Ok(reports)
}
