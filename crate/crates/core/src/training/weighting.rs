//! Loss-term balancing by gradient norms and causal weighting of time chunks.

use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightingState {
    pub weights: Vec<f64>,
    /// Steps between grad-norm updates; zero disables them.
    pub period: usize,
    pub momentum: f64,
}

impl WeightingState {
    pub fn new(weights: Vec<f64>, period: usize) -> Self {
        Self { weights, period, momentum: 0.9 }
    }

    pub fn due(&self, step: usize) -> bool {
        self.period > 0 && step % self.period == 0
    }
}

/// Target weights `sum_j |g_j| / (m |g_i|)` over the terms with nonzero norm; `None` where skipped.
pub fn grad_norm_targets(norms: &[f64]) -> Vec<Option<f64>> {
    let live: Vec<f64> = norms.iter().copied().filter(|&n| n > 0.0 && n.is_finite()).collect();
    if live.is_empty() {
        return vec![None; norms.len()];
    }
    let mean = live.iter().sum::<f64>() / live.len() as f64;
    norms.iter().map(|&n| (n > 0.0 && n.is_finite()).then(|| mean / n)).collect()
}

/// EMA update of the weights toward the grad-norm targets.
pub fn grad_norm_weights(norms: &[f64], state: &mut WeightingState) {
    let a = state.momentum;
    for (w, t) in state.weights.iter_mut().zip(grad_norm_targets(norms)) {
        if let Some(t) = t {
            *w = a * *w + (1.0 - a) * t;
        }
    }
}

/// `w_k = exp(-tol * sum_{j<k} L_j)`.
pub fn causal_weights(losses: &[f64], tol: f64) -> Vec<f64> {
    let mut acc = 0.0;
    losses
        .iter()
        .map(|&l| {
            let w = (-tol * acc).exp();
            acc += l;
            w
        })
        .collect()
}
