//! Finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use super::Tensor;
use crate::error::Result;

/// Settings for [`finite_diff_check`].
#[derive(Debug, Clone)]
pub struct FiniteDiffConfig {
    /// Central-difference step.
    pub step: f64,
    /// Coordinates sampled per parameter tensor (all of them if fewer).
    pub samples_per_param: usize,
    /// Seed for coordinate sampling.
    pub seed: u64,
}

impl Default for FiniteDiffConfig {
    fn default() -> Self {
        FiniteDiffConfig {
            step: 1e-5,
            samples_per_param: 4,
            seed: 0x5eed,
        }
    }
}

/// Compare analytic gradients of a deterministic scalar map against central
/// finite differences over sampled coordinates of `params`.
///
/// Returns the max over sampled coordinates of
/// `|analytic - central| / max(1e-8, |central|)`. Frozen parameters
/// (`requires_grad == false`) are skipped: their analytic gradient is
/// exactly absent by contract.
pub fn finite_diff_check<F>(params: &[Tensor], f: F, cfg: &FiniteDiffConfig) -> Result<f64>
where
    F: Fn() -> Result<Tensor>,
{
    for p in params {
        p.zero_grad();
    }
    let loss = f()?;
    loss.backward()?;
    let analytic: Vec<Option<Vec<f64>>> = params.iter().map(|p| p.grad()).collect();
    for p in params {
        p.zero_grad();
    }

    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let mut worst: f64 = 0.0;
    for (p, grad) in params.iter().zip(&analytic) {
        if !p.requires_grad() {
            continue;
        }
        let grad = match grad {
            Some(g) => g.clone(),
            // Disconnected from the loss: analytic gradient is zero.
            None => vec![0.0; p.len()],
        };
        let mut coords: Vec<usize> = (0..p.len()).collect();
        coords.shuffle(&mut rng);
        coords.truncate(cfg.samples_per_param.min(p.len()));
        for &i in &coords {
            let original = p.data()[i];
            let mut buf = p.to_vec();
            buf[i] = original + cfg.step;
            p.set_data(&buf)?;
            let plus = f()?.item()?;
            buf[i] = original - cfg.step;
            p.set_data(&buf)?;
            let minus = f()?.item()?;
            buf[i] = original;
            p.set_data(&buf)?;
            let central = (plus - minus) / (2.0 * cfg.step);
            let rel = (grad[i] - central).abs() / central.abs().max(1e-8);
            if rel > worst {
                worst = rel;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{cross_entropy_rows, matmul, mean, mul, relu, softmax_rows, sum};

    #[test]
    fn linear_map_is_exact() {
        let w = Tensor::param(vec![2, 2], vec![0.3, -0.7, 1.1, 0.4]).unwrap();
        let x = Tensor::new(vec![2, 2], vec![1.0, 2.0, -0.5, 0.25]).unwrap();
        let err = finite_diff_check(
            std::slice::from_ref(&w),
            || sum(&matmul(&x, &w)?),
            &FiniteDiffConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-9, "linear map should be exact, got {err}");
    }

    #[test]
    fn softmax_cross_entropy_passes() {
        let logits = Tensor::param(
            vec![3, 4],
            vec![0.5, -1.2, 0.3, 0.9, -0.4, 0.1, 1.5, -0.8, 0.2, 0.6, -1.1, 0.0],
        )
        .unwrap();
        let err = finite_diff_check(
            std::slice::from_ref(&logits),
            || cross_entropy_rows(&logits, &[1, 3, 0], &[1.0, 1.0, 1.0]),
            &FiniteDiffConfig::default(),
        )
        .unwrap();
        assert!(err <= 1e-4, "got {err}");
    }

    #[test]
    fn frozen_parameter_is_skipped() {
        let w = Tensor::param(vec![2], vec![1.0, -2.0]).unwrap();
        w.set_requires_grad(false);
        let x = Tensor::param(vec![2], vec![0.5, 0.5]).unwrap();
        let err = finite_diff_check(
            &[w.clone(), x.clone()],
            || sum(&mul(&w, &x)?),
            &FiniteDiffConfig::default(),
        )
        .unwrap();
        assert!(err < 1e-9);
        assert!(w.grad().is_none());
    }

    #[test]
    fn composite_graph_matches_central_differences() {
        let w1 = Tensor::param(vec![3, 3], vec![0.2, -0.1, 0.4, 0.7, 0.05, -0.3, -0.6, 0.9, 0.15]).unwrap();
        let w2 = Tensor::param(vec![3, 2], vec![0.3, -0.2, 0.1, 0.8, -0.5, 0.25]).unwrap();
        let x = Tensor::new(vec![2, 3], vec![0.4, -1.0, 0.6, 1.2, 0.3, -0.7]).unwrap();
        let f = || {
            let h = relu(&matmul(&x, &w1)?)?;
            let z = matmul(&h, &w2)?;
            let p = softmax_rows(&z, 0.5)?;
            mean(&p)
        };
        let err = finite_diff_check(&[w1.clone(), w2.clone()], f, &FiniteDiffConfig::default()).unwrap();
        assert!(err <= 1e-4, "got {err}");
    }
}
