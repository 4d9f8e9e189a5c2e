//! MLP decoders: the gated modified MLP, a plain coordinate MLP, and random Fourier
//! feature embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, JetLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    ModifiedMlp,
    VanillaMlp,
}

/// Row-wise weight factorization `W = diag(exp(s)) V` with `s ~ N(ln mean, std)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WeightFact {
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub architecture: Architecture,
    pub width: usize,
    /// Hidden layers.
    pub depth: usize,
    pub activation: Activation,
    #[serde(default)]
    pub weight_fact: Option<WeightFact>,
    pub input_dim: usize,
    pub output_dim: usize,
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 {
            return Err(Error::config("decoder.width", "must be at least 1"));
        }
        if self.depth == 0 {
            return Err(Error::config("decoder.depth", "must be at least 1"));
        }
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::config("decoder", "input and output dimensions must be positive"));
        }
        if let Some(wf) = self.weight_fact {
            if !(wf.mean > 0.0 && wf.std > 0.0 && wf.mean.is_finite() && wf.std.is_finite()) {
                return Err(Error::config("decoder.weight_fact", format!("need mean > 0 and std > 0, got {wf:?}")));
            }
        }
        Ok(())
    }

    /// `(in, out)` of every dense layer in storage order.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let (d, w) = (self.input_dim, self.width);
        let mut v = Vec::new();
        if self.architecture == Architecture::ModifiedMlp {
            v.push((d, w));
            v.push((d, w));
        }
        v.push((d, w));
        v.extend((1..self.depth).map(|_| (w, w)));
        v.push((w, self.output_dim));
        v
    }

    pub fn param_count(&self) -> usize {
        let extra = usize::from(self.weight_fact.is_some());
        self.layer_shapes().iter().map(|&(i, o)| i * o + o + extra * o).sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dense {
    pub inputs: usize,
    pub outputs: usize,
    /// `outputs x inputs`, row-major.
    pub v: Vec<f64>,
    pub b: Vec<f64>,
    /// Row log-scales when factorized.
    pub s: Option<Vec<f64>>,
}

impl Dense {
    /// Effective weight matrix.
    pub fn weight(&self) -> Vec<f64> {
        match &self.s {
            None => self.v.clone(),
            Some(s) => self.v.chunks(self.inputs).zip(s).flat_map(|(row, &g)| row.iter().map(move |x| x * g.exp())).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub config: DecoderConfig,
    pub layers: Vec<Dense>,
}

/// Tape handles of one dense layer.
#[derive(Clone, Copy, Debug)]
pub struct DenseVars {
    pub v: Var,
    pub b: Var,
    pub s: Option<Var>,
}

impl DecoderParams {
    pub fn init(config: DecoderConfig, seed: u64) -> Result<Self> {
        Self::init_with(config, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn init_with(config: DecoderConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let scale = match config.weight_fact {
            Some(wf) => Some(Normal::new(wf.mean.ln(), wf.std).map_err(|e| Error::config("decoder.weight_fact", e.to_string()))?),
            None => None,
        };
        let layers = config
            .layer_shapes()
            .into_iter()
            .map(|(i, o)| {
                let limit = (6.0 / (i + o) as f64).sqrt();
                let glorot = Uniform::new_inclusive(-limit, limit).expect("finite Glorot bound");
                let v = (0..i * o).map(|_| glorot.sample(rng)).collect();
                let s = scale.map(|n| (0..o).map(|_| n.sample(rng)).collect());
                Dense { inputs: i, outputs: o, v, b: vec![0.0; o], s }
            })
            .collect();
        Ok(Self { config, layers })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter arrays in tape registration order.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.v);
            v.push(&l.b);
            if let Some(s) = &l.s {
                v.push(s);
            }
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.v);
            v.push(&mut l.b);
            if let Some(s) = &mut l.s {
                v.push(s);
            }
        }
        v
    }

    pub fn tape_params(&self, tape: &mut Tape) -> Vec<DenseVars> {
        self.layers
            .iter()
            .map(|l| DenseVars {
                v: tape.param(Tensor::new(l.outputs, l.inputs, l.v.clone())),
                b: tape.param(Tensor::new(1, l.outputs, l.b.clone())),
                s: l.s.as_ref().map(|s| tape.param(Tensor::column(s.clone()))),
            })
            .collect()
    }

    /// Decoder on a stacked jet tensor (`layout.rows() x input_dim`).
    pub fn forward(&self, tape: &mut Tape, vars: &[DenseVars], x: Var, layout: &JetLayout) -> Result<Var> {
        let xin = tape.value(x);
        if xin.cols != self.config.input_dim || xin.rows != layout.rows() {
            return Err(Error::Shape(format!(
                "decoder expects {} rows x {} inputs, got {}x{}",
                layout.rows(),
                self.config.input_dim,
                xin.rows,
                xin.cols
            )));
        }
        let act = self.config.activation;
        let dense = |tape: &mut Tape, lv: &DenseVars, h: Var| {
            let w = match lv.s {
                Some(s) => {
                    let g = tape.exp(s);
                    tape.scale_rows(lv.v, g)
                }
                None => lv.v,
            };
            let z = tape.matmul_t(h, w);
            tape.add_bias(z, lv.b, layout.points)
        };
        let (hidden, mut h) = match self.config.architecture {
            Architecture::ModifiedMlp => {
                let zu = dense(tape, &vars[0], x);
                let u = tape.jet_activation(zu, act, layout);
                let zv = dense(tape, &vars[1], x);
                let v = tape.jet_activation(zv, act, layout);
                let gap = tape.sub(u, v);
                let mut h = x;
                for lv in &vars[2..2 + self.config.depth] {
                    let z = dense(tape, lv, h);
                    let a = tape.jet_activation(z, act, layout);
                    let gated = tape.jet_mul(a, gap, layout);
                    h = tape.add(gated, v);
                }
                (2 + self.config.depth, h)
            }
            Architecture::VanillaMlp => {
                let mut h = x;
                for lv in &vars[..self.config.depth] {
                    let z = dense(tape, lv, h);
                    h = tape.jet_activation(z, act, layout);
                }
                (self.config.depth, h)
            }
        };
        h = dense(tape, &vars[hidden], h);
        Ok(h)
    }

    /// Plain evaluation of a batch of inputs (`points x input_dim`).
    pub fn forward_values(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.tape_params(&mut tape);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &vars, xv, &JetLayout::value_only(x.rows))?;
        Ok(tape.value(out).clone())
    }
}

/// Fixed Gaussian random Fourier features `[cos(Bx), sin(Bx)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct RffEmbedding {
    /// `features x dim`, row-major.
    pub b: Vec<f64>,
    pub features: usize,
    pub dim: usize,
    pub sigma: f64,
}

impl RffEmbedding {
    pub fn new(features: usize, dim: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::config("rff.sigma", e.to_string()))?;
        Ok(Self { b: (0..features * dim).map(|_| normal.sample(rng)).collect(), features, dim, sigma })
    }

    pub fn output_dim(&self) -> usize {
        2 * self.features
    }

    pub fn embed(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim);
        let proj: Vec<f64> = self.b.chunks(self.dim).map(|row| row.iter().zip(x).map(|(b, x)| b * x).sum()).collect();
        proj.iter().map(|p| p.cos()).chain(proj.iter().map(|p| p.sin())).collect()
    }
}
