use super::Tensor;
use crate::error::{shape_err, Error, Result};
use crate::scalar::Real;

/// Adam hyper-parameters. Moment decay rates and epsilon are the optimizer's
/// canonical defaults.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamConfig {
    pub const PIXEL_LR: f64 = 1.5e-4;
    pub const PATCH_LR: f64 = 1.0e-4;

    pub fn with_lr(lr: f64) -> Self {
        Self { lr, ..Self::default() }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: Self::PIXEL_LR,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam optimizer state: one first/second moment buffer per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    config: AdamConfig,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    t: u64,
}

impl<T: Real> Adam<T> {
    pub fn new(config: AdamConfig) -> Self {
        Self {
            config,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Restores state saved by a checkpoint.
    pub fn from_parts(config: AdamConfig, m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64) -> Result<Self> {
        if m.len() != v.len() || m.iter().zip(&v).any(|(a, b)| a.len() != b.len()) {
            return Err(shape_err("adam", "first and second moment buffers disagree"));
        }
        Ok(Self { config, m, v, t })
    }

    pub fn config(&self) -> &AdamConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn first_moments(&self) -> &[Vec<T>] {
        &self.m
    }

    pub fn second_moments(&self) -> &[Vec<T>] {
        &self.v
    }

    /// One bias-corrected Adam update. `names` label parameters in errors.
    ///
    /// All gradients are validated before anything is written, so a rejected
    /// step leaves both parameters and state untouched.
    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Vec<T>], names: &[String]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(shape_err(
                "adam",
                format!("{} parameters but {} gradients", params.len(), grads.len()),
            ));
        }
        let label = |i: usize| names.get(i).cloned().unwrap_or_else(|| format!("#{i}"));
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != g.len() {
                return Err(shape_err(
                    "adam",
                    format!("parameter `{}` has {} values, gradient {}", label(i), p.len(), g.len()),
                ));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(label(i)));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::zero(); p.len()]).collect();
            self.v = self.m.clone();
        } else if self.m.len() != params.len() || self.m.iter().zip(params.iter()).any(|(m, p)| m.len() != p.len()) {
            return Err(shape_err("adam", "optimizer state does not match parameter shapes"));
        }

        self.t += 1;
        let c = &self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let lr = T::lit(c.lr);
        let eps = T::lit(c.epsilon);
        let bc1 = T::one() - T::lit(c.beta1.powi(self.t as i32));
        let bc2 = T::one() - T::lit(c.beta2.powi(self.t as i32));
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for (((pi, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *pi = *pi - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
