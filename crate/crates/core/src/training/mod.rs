//! Residual training loops: batches, weighted losses, optimizer steps, time windows.

mod optim;
mod profile;
mod weighting;

pub use optim::{lr_schedule, Adam, DecayKind, Schedule};
pub use profile::{run_profile, train_profile, ProfileRecord, ProfileTrainConfig, ProfileTrainer};
pub use weighting::{causal_weights, grad_norm_targets, grad_norm_weights, WeightingState};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::diagnostics::{relative_l2_against, FieldPredictor};
use crate::error::{Error, Result};
use crate::field::{BeignetModel, ModelConfig, ModelVars};
use crate::problems::{ic_loss_on_tape, IcData, ProblemSpec, ReferenceSolution};
use crate::pyramid::{grid_points, Slice};

/// Stream of the batch sampler; model initialization uses streams 1 and 2.
const SAMPLER_STREAM: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShiftMode {
    /// Independent spatial shift and time jitter per time slice.
    PerSlice,
    /// One spatial shift per step shared by all slices, time jitter per slice.
    Shared,
    /// Fixed collocation grid.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualPath {
    Fft,
    Pointwise,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub schedule: Schedule,
    pub adam_eps: f64,
    /// Spatial residual grid per axis.
    pub grid: Vec<usize>,
    /// Time slices per step.
    pub mt: usize,
    pub ic_grid: Vec<usize>,
    pub shift_mode: ShiftMode,
    pub path: ResidualPath,
    /// Steps between grad-norm weight updates; zero keeps the initial weights.
    pub grad_norm_period: usize,
    pub log_every: usize,
    /// Steps between reference evaluations; zero evaluates only at the end.
    pub eval_every: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn validate(&self, problem: &ProblemSpec) -> Result<()> {
        self.schedule.validate()?;
        if self.grid.len() != problem.dims() || self.ic_grid.len() != problem.dims() {
            return Err(Error::config("grid", format!("{} spatial axes expected", problem.dims())));
        }
        for (name, g) in [("grid", &self.grid), ("ic_grid", &self.ic_grid)] {
            if let Some(&bad) = g.iter().find(|m| !m.is_power_of_two()) {
                return Err(Error::config(name, format!("size {bad} is not a power of two")));
            }
        }
        if self.mt == 0 || problem.chunks == 0 || self.mt % problem.chunks != 0 {
            return Err(Error::config("Mt", format!("{} time slices do not split into {} chunks", self.mt, problem.chunks)));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::config("optim.eps", "must be positive"));
        }
        Ok(())
    }
}

/// Collocation slices for one step; slice times are in the model's unit time.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualBatch {
    pub m: Vec<usize>,
    pub slices: Vec<Slice>,
}

impl ResidualBatch {
    /// Stratified times `(s + u_s) / mt` and shifts in `[0, 1/m)` per axis.
    pub fn sample(m: &[usize], mt: usize, mode: ShiftMode, rng: &mut ChaCha8Rng) -> Self {
        let shift = |rng: &mut ChaCha8Rng| m.iter().map(|&n| rng.random::<f64>() / n as f64).collect::<Vec<f64>>();
        let shared = if mode == ShiftMode::Shared { shift(rng) } else { vec![0.0; m.len()] };
        let slices = (0..mt)
            .map(|s| match mode {
                ShiftMode::None => Slice { t: if mt == 1 { 0.0 } else { s as f64 / (mt - 1) as f64 }, shift: vec![0.0; m.len()] },
                ShiftMode::Shared => Slice { t: (s as f64 + rng.random::<f64>()) / mt as f64, shift: shared.clone() },
                ShiftMode::PerSlice => {
                    let t = (s as f64 + rng.random::<f64>()) / mt as f64;
                    Slice { t, shift: shift(rng) }
                }
            })
            .collect();
        Self { m: m.to_vec(), slices }
    }

    pub fn points_per_slice(&self) -> usize {
        self.m.iter().product()
    }

    /// Physical collocation points in slice-major order.
    pub fn points(&self, model: &BeignetModel) -> Vec<(Vec<f64>, f64)> {
        let d = &model.domain;
        let mut out = Vec::with_capacity(self.slices.len() * self.points_per_slice());
        for s in &self.slices {
            let t = d.t_lo + s.t * (d.t_hi - d.t_lo);
            out.extend(grid_points(&self.m, &s.shift).into_iter().map(|u| (d.from_torus(&u), t)));
        }
        out
    }
}

/// Loss graph pieces of one step.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Var,
    /// IC terms then causally weighted residual terms, unweighted by the term weights.
    pub terms: Vec<Var>,
    /// Residual loss per time chunk, summed over residual terms.
    pub chunk_losses: Vec<f64>,
    pub causal: Vec<f64>,
}

/// Builds `sum_i w_i L_i` where residual terms are `mean_k(c_k L_{r,k})` over time chunks.
/// `causal` overrides the causal weights computed from the chunk losses.
#[allow(clippy::too_many_arguments)]
pub fn build_loss(
    tape: &mut Tape,
    model: &BeignetModel,
    vars: &ModelVars,
    problem: &ProblemSpec,
    ic: &IcData,
    batch: &ResidualBatch,
    path: ResidualPath,
    weights: &[f64],
    causal: Option<&[f64]>,
) -> Result<LossParts> {
    if weights.len() != problem.terms.len() {
        return Err(Error::Shape(format!("{} weights for {} loss terms", weights.len(), problem.terms.len())));
    }
    let mut terms = ic_loss_on_tape(tape, model, vars, ic)?;
    let k = problem.chunks;
    let (per_term, chunk_losses) = residual_chunks(tape, model, vars, problem, batch, path, k)?;
    let causal = match causal {
        Some(c) if c.len() == k => c.to_vec(),
        Some(c) => return Err(Error::Shape(format!("{} causal weights for {k} chunks", c.len()))),
        None => causal_weights(&chunk_losses, problem.causal_tol),
    };
    for chunks in per_term {
        let mut acc: Option<Var> = None;
        for (c, w) in chunks.into_iter().zip(&causal) {
            let s = tape.scale(c, w / k as f64);
            acc = Some(match acc {
                Some(a) => tape.add(a, s),
                None => s,
            });
        }
        terms.push(acc.expect("at least one chunk"));
    }
    let total = weighted_sum(tape, &terms, weights);
    Ok(LossParts { total, terms, chunk_losses, causal })
}

/// Per residual term, the mean squared residual of each of `k` consecutive slice chunks,
/// with chunk values summed over terms.
fn residual_chunks(
    tape: &mut Tape,
    model: &BeignetModel,
    vars: &ModelVars,
    problem: &ProblemSpec,
    batch: &ResidualBatch,
    path: ResidualPath,
    k: usize,
) -> Result<(Vec<Vec<Var>>, Vec<f64>)> {
    if k == 0 || batch.slices.len() % k != 0 {
        return Err(Error::config("chunks", format!("{} slices do not split into {k} chunks", batch.slices.len())));
    }
    let (out, layout) = match path {
        ResidualPath::Fft => model.grid_on_tape(tape, vars, &problem.request, &batch.m, &batch.slices)?,
        ResidualPath::Pointwise => model.points_on_tape(tape, vars, &problem.request, &batch.points(model))?,
    };
    let residuals = problem.residual_on_tape(tape, out, &layout);
    let rows = batch.slices.len() / k * batch.points_per_slice();
    let mut per_term = Vec::with_capacity(residuals.len());
    let mut chunk_losses = vec![0.0; k];
    for r in residuals {
        let sq = tape.square(r);
        let chunks: Vec<Var> = (0..k)
            .map(|c| {
                let s = tape.slice_rows(sq, c * rows, rows);
                tape.mean(s)
            })
            .collect();
        for (acc, &c) in chunk_losses.iter_mut().zip(&chunks) {
            *acc += tape.value(c).data[0];
        }
        per_term.push(chunks);
    }
    Ok((per_term, chunk_losses))
}

/// Collocation points per tape above which a step is split into groups of whole chunks.
pub const PASS_POINTS: usize = 4096;

/// Loss values and gradients of one step.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub loss: f64,
    pub terms: Vec<f64>,
    pub causal: Vec<f64>,
    /// One gradient per loss term, or a single gradient of the weighted loss.
    pub grads: Vec<Vec<Vec<f64>>>,
}

fn add_into(acc: &mut Option<Vec<Vec<f64>>>, g: Vec<Vec<f64>>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(a, g)| a.iter_mut().zip(g).for_each(|(a, g)| *a += g)),
        None => *acc = Some(g),
    }
}

fn term_grads(tape: &mut Tape, terms: &[Var], weights: &[f64], per_term: bool) -> Result<Vec<Vec<Vec<f64>>>> {
    if per_term {
        terms
            .iter()
            .map(|&t| {
                let mut g = tape.backward(t, 1.0)?;
                Ok(tape.param_grads(&mut g))
            })
            .collect()
    } else {
        let total = weighted_sum(tape, terms, weights);
        Ok(vec![tape.grad(total)?])
    }
}

/// Evaluates the loss of `build_loss` and its gradients, splitting large batches into
/// groups of at most `budget` points so that only one group's graph is alive at a time.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &BeignetModel,
    problem: &ProblemSpec,
    ic: &IcData,
    batch: &ResidualBatch,
    path: ResidualPath,
    weights: &[f64],
    causal: Option<&[f64]>,
    per_term: bool,
    budget: usize,
) -> Result<Evaluation> {
    let k = problem.chunks;
    let pps = batch.points_per_slice();
    if batch.slices.len() * pps <= budget || k == 0 || batch.slices.len() % k != 0 {
        let mut tape = Tape::new();
        let vars = model.tape_params(&mut tape);
        let parts = build_loss(&mut tape, model, &vars, problem, ic, batch, path, weights, causal)?;
        let terms = parts.terms.iter().map(|&t| tape.value(t).data[0]).collect();
        let loss = tape.value(parts.total).data[0];
        let grads = if per_term {
            term_grads(&mut tape, &parts.terms, weights, true)?
        } else {
            vec![tape.grad(parts.total)?]
        };
        return Ok(Evaluation { loss, terms, causal: parts.causal, grads });
    }
    if weights.len() != problem.terms.len() {
        return Err(Error::Shape(format!("{} weights for {} loss terms", weights.len(), problem.terms.len())));
    }
    let per_chunk = batch.slices.len() / k;
    let group_chunks = (budget / (per_chunk * pps)).max(1);
    let groups: Vec<(usize, ResidualBatch)> = (0..k)
        .step_by(group_chunks)
        .map(|c0| {
            let c1 = (c0 + group_chunks).min(k);
            (c0, ResidualBatch { m: batch.m.clone(), slices: batch.slices[c0 * per_chunk..c1 * per_chunk].to_vec() })
        })
        .collect();
    let causal = match causal {
        Some(c) if c.len() == k => c.to_vec(),
        Some(c) => return Err(Error::Shape(format!("{} causal weights for {k} chunks", c.len()))),
        None => {
            let mut chunk_losses = Vec::with_capacity(k);
            for (_, g) in &groups {
                let mut tape = Tape::new();
                let vars = model.tape_params(&mut tape);
                let (_, losses) = residual_chunks(&mut tape, model, &vars, problem, g, path, g.slices.len() / per_chunk)?;
                chunk_losses.extend(losses);
            }
            causal_weights(&chunk_losses, problem.causal_tol)
        }
    };

    let mut tape = Tape::new();
    let vars = model.tape_params(&mut tape);
    let ic_terms = ic_loss_on_tape(&mut tape, model, &vars, ic)?;
    let n_ic = ic_terms.len();
    let mut terms: Vec<f64> = ic_terms.iter().map(|&t| tape.value(t).data[0]).collect();
    terms.resize(weights.len(), 0.0);
    let mut acc: Vec<Option<Vec<Vec<f64>>>> = vec![None; if per_term { weights.len() } else { 1 }];
    if n_ic > 0 {
        for (i, g) in term_grads(&mut tape, &ic_terms, &weights[..n_ic], per_term)?.into_iter().enumerate() {
            add_into(&mut acc[i], g);
        }
    }
    drop(tape);

    for (c0, g) in &groups {
        let mut tape = Tape::new();
        let vars = model.tape_params(&mut tape);
        let local = g.slices.len() / per_chunk;
        let (chunks, _) = residual_chunks(&mut tape, model, &vars, problem, g, path, local)?;
        let mut partial = Vec::with_capacity(chunks.len());
        for (r, term_chunks) in chunks.into_iter().enumerate() {
            let mut sum: Option<Var> = None;
            for (j, c) in term_chunks.into_iter().enumerate() {
                let s = tape.scale(c, causal[c0 + j] / k as f64);
                sum = Some(match sum {
                    Some(a) => tape.add(a, s),
                    None => s,
                });
            }
            let sum = sum.expect("at least one chunk");
            terms[n_ic + r] += tape.value(sum).data[0];
            partial.push(sum);
        }
        for (i, grad) in term_grads(&mut tape, &partial, &weights[n_ic..], per_term)?.into_iter().enumerate() {
            add_into(&mut acc[if per_term { n_ic + i } else { 0 }], grad);
        }
    }
    let loss = terms.iter().zip(weights).map(|(t, w)| t * w).sum();
    let grads = acc.into_iter().map(|g| g.expect("every term has a gradient")).collect();
    Ok(Evaluation { loss, terms, causal, grads })
}

fn weighted_sum(tape: &mut Tape, terms: &[Var], weights: &[f64]) -> Var {
    let mut acc = tape.scale(terms[0], weights[0]);
    for (t, &w) in terms.iter().zip(weights).skip(1) {
        let s = tape.scale(*t, w);
        acc = tape.add(acc, s);
    }
    acc
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TermMetric {
    pub name: String,
    pub loss: f64,
    pub weight: f64,
}

/// One JSON line of the metric log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub terms: Vec<TermMetric>,
    /// Smallest causal weight of the step.
    pub causal_min: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub rel_l2: Option<Vec<f64>>,
}

fn dot_grads(weights: &[f64], per_term: &[Vec<Vec<f64>>]) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = per_term[0].iter().map(|t| vec![0.0; t.len()]).collect();
    for (w, g) in weights.iter().zip(per_term) {
        for (o, t) in out.iter_mut().zip(g) {
            o.iter_mut().zip(t).for_each(|(o, t)| *o += w * t);
        }
    }
    out
}

pub fn grad_norm(g: &[Vec<f64>]) -> f64 {
    g.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

/// Single-owner training state for one model on one time window.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub problem: ProblemSpec,
    pub config: TrainConfig,
    pub model: BeignetModel,
    pub ic: IcData,
    pub adam: Adam,
    pub weighting: WeightingState,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

impl Trainer {
    pub fn new(problem: ProblemSpec, config: TrainConfig, model: BeignetModel, ic: IcData) -> Result<Self> {
        config.validate(&problem)?;
        if model.components() != problem.components() || model.dims() != problem.dims() {
            return Err(Error::Shape(format!(
                "model with {} outputs on {} axes for {} ({} components)",
                model.components(),
                model.dims(),
                problem.kind.name(),
                problem.components()
            )));
        }
        let shapes: Vec<usize> = model.tensors().iter().map(|t| t.len()).collect();
        let adam = Adam::new(&shapes, config.adam_eps);
        let weighting = WeightingState::new(problem.terms.iter().map(|t| t.weight).collect(), config.grad_norm_period);
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(SAMPLER_STREAM);
        Ok(Self { problem, config, model, ic, adam, weighting, rng, step: 0 })
    }

    pub fn sample_batch(&mut self) -> ResidualBatch {
        ResidualBatch::sample(&self.config.grid, self.config.mt, self.config.shift_mode, &mut self.rng)
    }

    /// Loss value, per-term values, causal weights and the gradient of the weighted loss
    /// for a given batch and term weights.
    pub fn loss_and_grad(&self, batch: &ResidualBatch, weights: &[f64], causal: Option<&[f64]>) -> Result<(f64, Vec<f64>, Vec<f64>, Vec<Vec<f64>>)> {
        let e = evaluate(&self.model, &self.problem, &self.ic, batch, self.config.path, weights, causal, false, PASS_POINTS)?;
        let grads = e.grads.into_iter().next().expect("weighted gradient");
        Ok((e.loss, e.terms, e.causal, grads))
    }

    /// Samples a batch, updates weights when due, and applies one Adam step.
    pub fn step(&mut self) -> Result<MetricRecord> {
        let lr = lr_schedule(self.step, &self.config.schedule);
        let batch = self.sample_batch();
        let due = self.weighting.due(self.step);
        let e = evaluate(&self.model, &self.problem, &self.ic, &batch, self.config.path, &self.weighting.weights, None, due, PASS_POINTS)?;
        let (loss, term_values) = (e.loss, e.terms);
        if !loss.is_finite() {
            return Err(Error::PoisonedLoss(format!("step {}: loss {loss}, terms {term_values:?}", self.step)));
        }
        let grads = if due {
            let norms: Vec<f64> = e.grads.iter().map(|g| grad_norm(g)).collect();
            grad_norm_weights(&norms, &mut self.weighting);
            dot_grads(&self.weighting.weights, &e.grads)
        } else {
            e.grads.into_iter().next().expect("weighted gradient")
        };
        let mut params = self.model.tensors_mut();
        self.adam.update(&mut params, &grads, lr)?;
        let record = MetricRecord {
            step: self.step,
            lr,
            loss,
            terms: self
                .problem
                .terms
                .iter()
                .zip(&term_values)
                .zip(&self.weighting.weights)
                .map(|((t, &l), &w)| TermMetric { name: t.name.clone(), loss: l, weight: w })
                .collect(),
            causal_min: e.causal.iter().copied().fold(f64::INFINITY, f64::min),
            rel_l2: None,
        };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` more steps, passing logged records to `sink`.
    pub fn run(&mut self, steps: usize, reference: Option<&ReferenceSolution>, sink: &mut dyn FnMut(&MetricRecord)) -> Result<Vec<MetricRecord>> {
        let mut log = Vec::new();
        for i in 0..steps {
            let eval_now = reference.is_some() && self.config.eval_every > 0 && self.step % self.config.eval_every == 0;
            let rel = if eval_now { Some(relative_l2_against(&self.model, reference.unwrap())?) } else { None };
            let mut rec = self.step()?;
            rec.rel_l2 = rel;
            let last = i + 1 == steps;
            if rec.rel_l2.is_some() || last || (self.config.log_every > 0 && rec.step % self.config.log_every == 0) {
                sink(&rec);
                log.push(rec);
            }
        }
        Ok(log)
    }
}

/// A field made of consecutive time windows, each with its own model.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowedModel {
    pub models: Vec<BeignetModel>,
}

impl WindowedModel {
    /// Index of the window covering physical time `t`.
    pub fn window_for(&self, t: f64) -> usize {
        let first = &self.models[0].domain;
        let last = &self.models[self.models.len() - 1].domain;
        let span = (last.t_hi - first.t_lo) / self.models.len() as f64;
        (((t - first.t_lo) / span).floor().max(0.0) as usize).min(self.models.len() - 1)
    }
}

impl FieldPredictor for WindowedModel {
    fn components(&self) -> usize {
        self.models[0].components()
    }

    fn predict_slice(&self, t: f64, reference: &ReferenceSolution) -> Result<Vec<Vec<f64>>> {
        self.models[self.window_for(t)].predict_slice(t, reference)
    }
}

/// Domain of window `w` of `windows` equal pieces.
pub fn window_problem(problem: &ProblemSpec, w: usize, windows: usize) -> ProblemSpec {
    let mut p = problem.clone();
    let d = &problem.domain;
    let span = (d.t_hi - d.t_lo) / windows as f64;
    p.domain.t_lo = d.t_lo + w as f64 * span;
    p.domain.t_hi = if w + 1 == windows { d.t_hi } else { d.t_lo + (w + 1) as f64 * span };
    p
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: WindowedModel,
    pub log: Vec<MetricRecord>,
    /// Final trainer of the last window.
    pub trainer: Trainer,
}

/// Trains window after window from `initial` data; the terminal field of each window, sampled on the IC grid,
/// is the initial data of the next. Window `w` uses seed `seed + w`.
pub fn train_windows(
    problem: &ProblemSpec,
    model_config: &ModelConfig,
    config: &TrainConfig,
    windows: usize,
    initial: IcData,
    reference: Option<&ReferenceSolution>,
    sink: &mut dyn FnMut(usize, &MetricRecord),
) -> Result<TrainOutcome> {
    train_windows_with(problem, model_config, config, windows, initial, reference, sink, &mut |_, _, _| {})
}

/// [`train_windows`] that hands the failing window's trainer to `on_failure` before returning the error.
#[allow(clippy::too_many_arguments)]
pub fn train_windows_with(
    problem: &ProblemSpec,
    model_config: &ModelConfig,
    config: &TrainConfig,
    windows: usize,
    initial: IcData,
    reference: Option<&ReferenceSolution>,
    sink: &mut dyn FnMut(usize, &MetricRecord),
    on_failure: &mut dyn FnMut(usize, &Trainer, &Error),
) -> Result<TrainOutcome> {
    if windows == 0 {
        return Err(Error::config("windows", "at least one window is required"));
    }
    let mut ic = initial;
    let mut models = Vec::with_capacity(windows);
    let mut log = Vec::new();
    let mut trainer = None;
    for w in 0..windows {
        let p = window_problem(problem, w, windows);
        let mut cfg = config.clone();
        cfg.seed = config.seed.wrapping_add(w as u64);
        let model = BeignetModel::init(model_config.clone(), p.domain.clone(), cfg.seed)?;
        let mut tr = Trainer::new(p, cfg, model, ic.clone())?;
        // Per-window evaluation is left to the caller; windows only cover part of the reference.
        let eval = if windows == 1 { reference } else { None };
        let recs = match tr.run(config.steps, eval, &mut |r| sink(w, r)) {
            Ok(r) => r,
            Err(e) => {
                on_failure(w, &tr, &e);
                return Err(e);
            }
        };
        log.extend(recs);
        ic = IcData::from_model(&tr.model, &config.ic_grid, 1.0)?;
        models.push(tr.model.clone());
        trainer = Some(tr);
    }
    Ok(TrainOutcome { model: WindowedModel { models }, log, trainer: trainer.unwrap() })
}

/// Trains one model on the whole horizon.
pub fn train(
    problem: &ProblemSpec,
    model: BeignetModel,
    config: &TrainConfig,
    reference: Option<&ReferenceSolution>,
    sink: &mut dyn FnMut(&MetricRecord),
) -> Result<Trainer> {
    let ic = problem.ic_data(&config.ic_grid);
    let mut tr = Trainer::new(problem.clone(), config.clone(), model, ic)?;
    tr.run(config.steps, reference, sink)?;
    Ok(tr)
}
