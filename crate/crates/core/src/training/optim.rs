//! Adam with bias correction and learning-rate schedules.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayKind {
    /// `lr * rate^floor((step - warmup) / decay_steps)`.
    ExponentialStaircase,
    /// Half-cosine from `lr` to zero at `total_steps`.
    Cosine,
    Constant,
}

impl DecayKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "exponential_staircase" | "exponential" => Ok(Self::ExponentialStaircase),
            "cosine" => Ok(Self::Cosine),
            "constant" => Ok(Self::Constant),
            _ => Err(Error::config("optim.decay", format!("unknown decay kind `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Schedule {
    pub lr: f64,
    pub warmup_steps: usize,
    pub decay: DecayKind,
    pub decay_steps: usize,
    #[serde(default = "default_rate")]
    pub decay_rate: f64,
    pub total_steps: usize,
}

fn default_rate() -> f64 {
    0.9
}

impl Schedule {
    pub fn constant(lr: f64) -> Self {
        Self { lr, warmup_steps: 0, decay: DecayKind::Constant, decay_steps: 1, decay_rate: 1.0, total_steps: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::config("optim.lr", format!("learning rate {} must be finite and non-negative", self.lr)));
        }
        if self.decay == DecayKind::ExponentialStaircase && self.decay_steps == 0 {
            return Err(Error::config("optim.decay_steps", "must be positive"));
        }
        Ok(())
    }
}

/// Learning rate at `step`: linear warmup from zero, then the decay rule.
pub fn lr_schedule(step: usize, s: &Schedule) -> f64 {
    if step < s.warmup_steps {
        return s.lr * step as f64 / s.warmup_steps as f64;
    }
    let k = step - s.warmup_steps;
    match s.decay {
        DecayKind::Constant => s.lr,
        DecayKind::ExponentialStaircase => s.lr * s.decay_rate.powi((k / s.decay_steps.max(1)) as i32),
        DecayKind::Cosine => {
            let span = s.total_steps.saturating_sub(s.warmup_steps);
            if span == 0 {
                return s.lr;
            }
            let frac = (k as f64 / span as f64).min(1.0);
            s.lr * 0.5 * (1.0 + (PI * frac).cos())
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], eps: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One bias-corrected update. A non-finite gradient leaves parameters and state untouched.
    pub fn update(&mut self, params: &mut [&mut Vec<f64>], grads: &[Vec<f64>], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::Shape(format!("{} parameter tensors, {} gradients, {} moments", params.len(), grads.len(), self.m.len())));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != self.m[i].len() {
                return Err(Error::Shape(format!("tensor {i}: {} params, {} grads, {} moments", p.len(), g.len(), self.m[i].len())));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::PoisonedStep { tensor: i });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            for j in 0..g.len() {
                m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p[j] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}
