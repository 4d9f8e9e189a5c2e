//! Training of the self-similar profile ansatz.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{lr_schedule, Adam, Schedule};
use crate::autodiff::Tape;
use crate::diagnostics::{burgers_report, BurgersReport};
use crate::error::{Error, Result};
use crate::field::{Inner, ProfileAnsatz};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfileTrainConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub adam_eps: f64,
    /// Collocation points per step; the pyramid path uses a jittered grid of twice this size.
    pub batch: usize,
    pub log_every: usize,
    /// Steps between diagnostic-grid reports; zero reports only at the end.
    pub report_every: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub report: Option<BurgersReport>,
}

#[derive(Clone, Debug)]
pub struct ProfileTrainer {
    pub ansatz: ProfileAnsatz,
    pub config: ProfileTrainConfig,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl ProfileTrainer {
    pub fn new(ansatz: ProfileAnsatz, config: ProfileTrainConfig) -> Result<Self> {
        ansatz.validate()?;
        config.schedule.validate()?;
        if config.batch == 0 || (matches!(ansatz.inner, Inner::Beignet(_)) && !config.batch.is_power_of_two()) {
            return Err(Error::config("batch", format!("batch {} must be a positive power of two for the pyramid path", config.batch)));
        }
        let shapes: Vec<usize> = ansatz.tensors().iter().map(|t| t.len()).collect();
        let adam = Adam::new(&shapes, config.adam_eps);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(3);
        Ok(Self { ansatz, config, adam, rng, step: 0 })
    }

    /// Loss and gradient on a fresh batch.
    pub fn loss_and_grad(&mut self) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars = self.ansatz.tape_params(&mut tape);
        let (pv, eta) = match self.ansatz.inner {
            Inner::Beignet(_) => {
                let m = 2 * self.config.batch;
                let delta = self.rng.random::<f64>() / m as f64;
                self.ansatz.grid_on_tape(&mut tape, &vars, m, delta)?
            }
            Inner::Mlp(_) => {
                let c = self.ansatz.c;
                let eta: Vec<f64> = (0..self.config.batch).map(|_| c * self.rng.random::<f64>()).collect();
                (self.ansatz.points_on_tape(&mut tape, &vars, &eta)?, eta)
            }
        };
        let loss = self.ansatz.loss_on_tape(&mut tape, &pv, &eta);
        let v = tape.value(loss).data[0];
        if !v.is_finite() {
            return Err(Error::PoisonedLoss(format!("profile step {}: loss {v}", self.step)));
        }
        Ok((v, tape.grad(loss)?))
    }

    pub fn step(&mut self) -> Result<ProfileRecord> {
        let lr = lr_schedule(self.step, &self.config.schedule);
        let (loss, grads) = self.loss_and_grad()?;
        self.adam.update(&mut self.ansatz.tensors_mut(), &grads, lr)?;
        let rec = ProfileRecord { step: self.step, lr, loss, report: None };
        self.step += 1;
        Ok(rec)
    }
}

/// Trains for the configured steps and returns the trainer with its log; the last record
/// carries the final diagnostic report.
pub fn train_profile(ansatz: ProfileAnsatz, config: &ProfileTrainConfig, sink: &mut dyn FnMut(&ProfileRecord)) -> Result<(ProfileTrainer, Vec<ProfileRecord>)> {
    let mut tr = ProfileTrainer::new(ansatz, config.clone())?;
    let log = run_profile(&mut tr, sink)?;
    Ok((tr, log))
}

/// Runs the remaining configured steps of `tr`.
pub fn run_profile(tr: &mut ProfileTrainer, sink: &mut dyn FnMut(&ProfileRecord)) -> Result<Vec<ProfileRecord>> {
    let config = tr.config.clone();
    let mut log = Vec::new();
    while tr.step < config.steps {
        let mut rec = tr.step()?;
        let done = tr.step == config.steps;
        let report_due = config.report_every > 0 && rec.step % config.report_every == 0;
        if report_due || done {
            rec.report = Some(burgers_report(&tr.ansatz)?);
        }
        if rec.report.is_some() || (config.log_every > 0 && rec.step % config.log_every == 0) {
            sink(&rec);
            log.push(rec);
        }
    }
    Ok(log)
}
