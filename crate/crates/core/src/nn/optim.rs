use serde::{Deserialize, Serialize};

use super::layers::Parameterized;
use super::tensor::{Float, Tensor};
use crate::error::{Error, Result};

/// How weight decay enters the update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightDecayMode {
    /// L2 term folded into the gradient: `g ← g + λ·w`.
    #[default]
    Coupled,
    /// Applied directly to the weights after the Adam step: `w ← w − lr·λ·w`.
    Decoupled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub decay_mode: WeightDecayMode,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            decay_mode: WeightDecayMode::Coupled,
        }
    }
}

/// Adam optimizer state: one first/second moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam<T: Float = f32> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    step: u64,
}

impl<T: Float> Adam<T> {
    pub fn new(config: AdamConfig, params: &impl Parameterized<T>) -> Self {
        let first: Vec<_> = params.named_params().iter().map(|(_, t)| t.zeros_like()).collect();
        Self {
            config,
            second: first.clone(),
            first,
            step: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn set_learning_rate(&mut self, lr: f64) {
        self.config.learning_rate = lr;
    }

    pub fn update<P: Parameterized<T>>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let grads = grads.named_params();
        for (name, g) in &grads {
            if !g.all_finite() {
                return Err(Error::Training(format!("non-finite gradient for parameter {name}")));
            }
        }
        let mut params = params.named_params_mut();
        if params.len() != self.first.len() || grads.len() != params.len() {
            return Err(Error::Dimension("optimizer state does not match parameter list".into()));
        }
        self.step += 1;
        let c = &self.config;
        let (b1, b2) = (T::of_f64(c.beta1), T::of_f64(c.beta2));
        let bc1 = T::of_f64(1.0 - c.beta1.powi(self.step as i32));
        let bc2 = T::of_f64(1.0 - c.beta2.powi(self.step as i32));
        let lr = T::of_f64(c.learning_rate);
        let wd = T::of_f64(c.weight_decay);
        let eps = T::of_f64(c.eps);
        let coupled = c.decay_mode == WeightDecayMode::Coupled;
        for (k, ((name, p), (_, g))) in params.iter_mut().zip(&grads).enumerate() {
            if p.shape() != g.shape() || p.shape() != self.first[k].shape() {
                return Err(Error::Dimension(format!(
                    "parameter {name} {:?} vs gradient {:?}",
                    p.shape(),
                    g.shape()
                )));
            }
            let m = self.first[k].data_mut();
            let v = self.second[k].data_mut();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gi = if coupled { gi + wd * *w } else { gi };
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                if !coupled {
                    *w -= lr * wd * *w;
                }
                *w -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Piecewise-linear schedule from `start_value` to `end_value`, reached at
/// `end_fraction · total_steps` and held afterwards.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinearSchedule {
    pub start_value: f64,
    pub end_value: f64,
    pub end_fraction: f64,
    pub total_steps: u64,
}

impl LinearSchedule {
    pub fn new(start_value: f64, end_value: f64, end_fraction: f64, total_steps: u64) -> Result<Self> {
        if !(end_fraction > 0.0 && end_fraction <= 1.0) || total_steps == 0 {
            return Err(Error::InvalidInput(format!(
                "schedule needs end_fraction in (0,1] and total_steps > 0, got {end_fraction} / {total_steps}"
            )));
        }
        Ok(Self {
            start_value,
            end_value,
            end_fraction,
            total_steps,
        })
    }

    pub fn value(&self, step: u64) -> f64 {
        let end = self.end_fraction * self.total_steps as f64;
        let progress = step as f64 / end;
        if progress >= 1.0 {
            self.end_value
        } else {
            self.start_value + (self.end_value - self.start_value) * progress
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::{Activation, Dense};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar(v: f64) -> Dense<f64> {
        Dense::from_parts(
            Tensor::new(vec![1, 1], vec![v]).unwrap(),
            Tensor::new(vec![1], vec![0.0]).unwrap(),
            Activation::Identity,
        )
        .unwrap()
    }

    #[test]
    fn zero_gradient_without_decay_is_identity() {
        let mut p: Dense<f64> = Dense::new(3, 2, Activation::Relu, &mut ChaCha8Rng::seed_from_u64(0));
        let before = p.clone();
        let g = p.zeroed();
        let mut opt = Adam::new(AdamConfig::default(), &p);
        for _ in 0..5 {
            opt.update(&mut p, &g).unwrap();
        }
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = scalar(1.0);
        let mut g = p.zeroed();
        g.w.data_mut()[0] = 1.0;
        let mut opt = Adam::new(AdamConfig { learning_rate: 0.1, ..Default::default() }, &p);
        opt.update(&mut p, &g).unwrap();
        assert!((p.w.data()[0] - 0.9).abs() < 1e-6);
    }

    #[test]
    fn decoupled_decay_shrinks_by_lr_lambda_w() {
        let mut p = scalar(2.0);
        let g = p.zeroed();
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            weight_decay: 1e-5,
            decay_mode: WeightDecayMode::Decoupled,
            ..Default::default()
        };
        let mut opt = Adam::new(cfg, &p);
        opt.update(&mut p, &g).unwrap();
        let expected = 2.0 - 1e-3 * 1e-5 * 2.0;
        assert!((p.w.data()[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn coupled_decay_pulls_toward_zero() {
        let mut p = scalar(2.0);
        let g = p.zeroed();
        let cfg = AdamConfig { weight_decay: 1e-5, ..Default::default() };
        let mut opt = Adam::new(cfg, &p);
        opt.update(&mut p, &g).unwrap();
        let w = p.w.data()[0];
        assert!(w < 2.0 && w > 1.99);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = scalar(1.0);
        let mut g = p.zeroed();
        g.b.data_mut()[0] = f64::NAN;
        let mut opt = Adam::new(AdamConfig::default(), &p);
        let err = opt.update(&mut p, &g).unwrap_err().to_string();
        assert!(err.contains('b'), "{err}");
    }

    #[test]
    fn schedule_endpoints_and_clamp() {
        let s = LinearSchedule::new(1.0, 0.05, 0.5, 1000).unwrap();
        assert_eq!(s.value(0), 1.0);
        assert_eq!(s.value(500), 0.05);
        assert_eq!(s.value(999), 0.05);
        assert!((s.value(250) - 0.525).abs() < 1e-12);
        assert!(LinearSchedule::new(1.0, 0.0, 0.0, 10).is_err());
    }
}
