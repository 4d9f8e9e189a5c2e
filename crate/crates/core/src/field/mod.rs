//! Pyramid + decoder composition evaluated with derivatives on grids or at points.

mod profile;

pub use profile::{profile_residual, tail, Inner, InnerVars, ProfileAnsatz, ProfileValues, ProfileVars};

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{JetLayout, Tape, Tensor, Var};
use crate::decoder::{DecoderConfig, DecoderParams, DenseVars};
use crate::error::{Error, Result};
use crate::pyramid::{FeatureRequest, FourierPyramid, PyramidConfig, Query, Slice};

/// Affine map from the physical box to the unit torus, per spatial axis, plus time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainMap {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub t_lo: f64,
    pub t_hi: f64,
}

impl DomainMap {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, t_lo: f64, t_hi: f64) -> Result<Self> {
        let ok = lo.len() == hi.len() && lo.iter().zip(&hi).all(|(a, b)| b > a) && t_hi > t_lo;
        if !ok {
            return Err(Error::Domain(format!("degenerate domain [{lo:?}, {hi:?}] x [{t_lo}, {t_hi}]")));
        }
        Ok(Self { lo, hi, t_lo, t_hi })
    }

    pub fn unit(dims: usize) -> Self {
        Self { lo: vec![0.0; dims], hi: vec![1.0; dims], t_lo: 0.0, t_hi: 1.0 }
    }

    pub fn dims(&self) -> usize {
        self.lo.len()
    }

    pub fn to_torus(&self, x: &[f64]) -> Vec<f64> {
        x.iter().enumerate().map(|(a, v)| (v - self.lo[a]) / (self.hi[a] - self.lo[a])).collect()
    }

    pub fn from_torus(&self, u: &[f64]) -> Vec<f64> {
        u.iter().enumerate().map(|(a, v)| self.lo[a] + v * (self.hi[a] - self.lo[a])).collect()
    }

    pub fn time_to_unit(&self, t: f64) -> f64 {
        (t - self.t_lo) / (self.t_hi - self.t_lo)
    }

    pub fn chain(&self) -> Vec<f64> {
        self.lo.iter().zip(&self.hi).map(|(a, b)| 1.0 / (b - a)).collect()
    }

    pub fn time_chain(&self) -> f64 {
        1.0 / (self.t_hi - self.t_lo)
    }
}

/// Derivatives a residual needs: per-axis highest spatial order and whether `u_t` is needed.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DerivativeRequest {
    pub orders: Vec<usize>,
    pub time: bool,
}

impl DerivativeRequest {
    pub fn new(orders: Vec<usize>, time: bool) -> Self {
        Self { orders, time }
    }

    pub fn values(dims: usize) -> Self {
        Self { orders: vec![0; dims], time: false }
    }

    pub fn layout(&self, points: usize) -> JetLayout {
        let mut o = self.orders.clone();
        o.push(self.time as usize);
        JetLayout::new(points, o)
    }

    fn check(&self) -> Result<()> {
        if let Some(o) = self.orders.iter().find(|&&o| o > crate::autodiff::MAX_ORDER) {
            return Err(Error::Unsupported(format!("derivative order {o} requested; at most 3 is supported")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    pub decoder: DecoderConfig,
    /// Append `(cos 2 pi x, sin 2 pi x)` per spatial axis to the decoder input.
    pub use_coords: bool,
    /// Append the normalized time to the decoder input.
    pub time_input: bool,
}

impl ModelConfig {
    /// Decoder input width implied by the pyramid and coordinate options.
    pub fn input_dim(&self) -> usize {
        self.pyramid.features() + if self.use_coords { 2 * self.pyramid.dims } else { 0 } + usize::from(self.time_input)
    }

    /// Copy with the decoder input width fixed up to match.
    pub fn consistent(mut self) -> Self {
        self.decoder.input_dim = self.input_dim();
        self
    }

    pub fn param_count(&self) -> usize {
        self.pyramid.param_count() + self.decoder.param_count()
    }
}

/// Field, derivatives and their layout.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldValues {
    pub layout: JetLayout,
    /// `layout.rows() x components`.
    pub data: Tensor,
}

impl FieldValues {
    /// Values of one derivative channel of component `comp` over all points.
    /// `dir` indexes spatial axes, `dims` is time; `order == 0` is the field itself.
    pub fn channel(&self, comp: usize, dir: usize, order: usize) -> Vec<f64> {
        let ch = self.layout.channel(dir, order);
        let p = self.layout.points;
        (0..p).map(|i| self.data.get(ch * p + i, comp)).collect()
    }
}

/// Tape handles of all model parameters.
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub pyramid: Vec<Var>,
    pub decoder: Vec<DenseVars>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeignetModel {
    pub config: ModelConfig,
    pub domain: DomainMap,
    pub pyramid: FourierPyramid,
    pub decoder: DecoderParams,
}

impl BeignetModel {
    /// Pyramid and decoder draw from independent streams of one seed.
    pub fn init(config: ModelConfig, domain: DomainMap, seed: u64) -> Result<Self> {
        let config = config.consistent();
        if domain.dims() != config.pyramid.dims {
            return Err(Error::config("domain", format!("{} axes for a {}-axis pyramid", domain.dims(), config.pyramid.dims)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        let pyramid = FourierPyramid::init_with(config.pyramid.clone(), &mut rng)?;
        rng.set_stream(2);
        let decoder = DecoderParams::init_with(config.decoder.clone(), &mut rng)?;
        Ok(Self { config, domain, pyramid, decoder })
    }

    pub fn dims(&self) -> usize {
        self.config.pyramid.dims
    }

    pub fn components(&self) -> usize {
        self.config.decoder.output_dim
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Parameter arrays in tape registration order: pyramid levels, then decoder.
    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        let mut v: Vec<&Vec<f64>> = self.pyramid.levels.iter().collect();
        v.extend(self.decoder.tensors());
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v: Vec<&mut Vec<f64>> = self.pyramid.levels.iter_mut().collect();
        v.extend(self.decoder.tensors_mut());
        v
    }

    pub fn tape_params(&self, tape: &mut Tape) -> ModelVars {
        ModelVars { pyramid: self.pyramid.tape_params(tape), decoder: self.decoder.tape_params(tape) }
    }

    fn feature_request(&self, req: &DerivativeRequest) -> Result<FeatureRequest> {
        req.check()?;
        if req.orders.len() != self.dims() {
            return Err(Error::Shape(format!("request for {} axes on a {}-axis model", req.orders.len(), self.dims())));
        }
        Ok(FeatureRequest::new(req.orders.clone(), req.time).with_chain(self.domain.chain(), self.domain.time_chain()))
    }

    /// Coordinate inputs with their jet channels, for points given in torus coordinates.
    fn coordinate_block(&self, req: &DerivativeRequest, torus: &[Vec<f64>], times: &[f64]) -> Option<Tensor> {
        let dims = self.dims();
        let cols = if self.config.use_coords { 2 * dims } else { 0 } + usize::from(self.config.time_input);
        if cols == 0 {
            return None;
        }
        let layout = req.layout(torus.len());
        let p = torus.len();
        let mut out = Tensor::zeros(layout.rows(), cols);
        let chain = self.domain.chain();
        for (i, (x, &t)) in torus.iter().zip(times).enumerate() {
            if self.config.use_coords {
                for a in 0..dims {
                    let (s, c) = (2.0 * PI * x[a]).sin_cos();
                    out.data[i * cols + 2 * a] = c;
                    out.data[i * cols + 2 * a + 1] = s;
                    let w = 2.0 * PI * chain[a];
                    // d^o/dx^o of (cos, sin) cycles through (-sin, cos), (-cos, -sin), (sin, -cos).
                    for o in 1..=req.orders[a] {
                        let (dc, ds) = match o % 4 {
                            1 => (-s, c),
                            2 => (-c, -s),
                            3 => (s, -c),
                            _ => (c, s),
                        };
                        let row = layout.channel(a, o) * p + i;
                        let f = w.powi(o as i32);
                        out.data[row * cols + 2 * a] = f * dc;
                        out.data[row * cols + 2 * a + 1] = f * ds;
                    }
                }
            }
            if self.config.time_input {
                out.data[i * cols + cols - 1] = t;
                if req.time {
                    let row = layout.channel(dims, 1) * p + i;
                    out.data[row * cols + cols - 1] = self.domain.time_chain();
                }
            }
        }
        Some(out)
    }

    fn decode(&self, tape: &mut Tape, vars: &ModelVars, feats: Var, coords: Option<Tensor>, layout: &JetLayout) -> Result<Var> {
        let input = match coords {
            Some(c) => {
                let cv = tape.constant(c);
                tape.concat_cols(&[feats, cv])
            }
            None => feats,
        };
        self.decoder.forward(tape, &vars.decoder, input, layout)
    }

    /// Field and derivatives on structured grids `m` (one per slice), FFT feature path.
    /// Slice times are normalized to `[0, 1]`.
    pub fn grid_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        req: &DerivativeRequest,
        m: &[usize],
        slices: &[Slice],
    ) -> Result<(Var, JetLayout)> {
        self.grid_subset_on_tape(tape, vars, req, m, slices, None)
    }

    /// As [`Self::grid_on_tape`], decoding only the grid points listed in `select`
    /// (indices into the slice-major point order), in that order.
    pub fn grid_subset_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        req: &DerivativeRequest,
        m: &[usize],
        slices: &[Slice],
        select: Option<&[usize]>,
    ) -> Result<(Var, JetLayout)> {
        let freq = self.feature_request(req)?;
        let mut feats = self.pyramid.spectral_on_tape(tape, &vars.pyramid, m, slices, &freq)?;
        let mut torus = Vec::new();
        let mut times = Vec::new();
        for s in slices {
            for x in crate::pyramid::grid_points(m, &s.shift) {
                torus.push(x);
                times.push(s.t);
            }
        }
        if let Some(sel) = select {
            let total = torus.len();
            if let Some(&bad) = sel.iter().find(|&&i| i >= total) {
                return Err(Error::Shape(format!("selected point {bad} of {total}")));
            }
            let channels = req.layout(1).channels();
            let rows = (0..channels).flat_map(|c| sel.iter().map(move |&i| c * total + i)).collect();
            feats = tape.gather_rows(feats, rows);
            torus = sel.iter().map(|&i| torus[i].clone()).collect();
            times = sel.iter().map(|&i| times[i]).collect();
        }
        let layout = req.layout(torus.len());
        let coords = self.coordinate_block(req, &torus, &times);
        let out = self.decode(tape, vars, feats, coords, &layout)?;
        Ok((out, layout))
    }

    /// Field and derivatives at physical points `(x, t)`, direct mode-sum feature path.
    pub fn points_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        req: &DerivativeRequest,
        points: &[(Vec<f64>, f64)],
    ) -> Result<(Var, JetLayout)> {
        let freq = self.feature_request(req)?;
        let queries: Vec<Query> = points
            .iter()
            .map(|(x, t)| Query { x: self.domain.to_torus(x), t: self.domain.time_to_unit(*t) })
            .collect();
        let feats = self.pyramid.pointwise_on_tape(tape, &vars.pyramid, &queries, &freq)?;
        let torus: Vec<Vec<f64>> = queries.iter().map(|q| q.x.clone()).collect();
        let times: Vec<f64> = queries.iter().map(|q| q.t).collect();
        let layout = req.layout(points.len());
        let coords = self.coordinate_block(req, &torus, &times);
        let out = self.decode(tape, vars, feats, coords, &layout)?;
        Ok((out, layout))
    }

    pub fn eval_grid(&self, req: &DerivativeRequest, m: &[usize], slices: &[Slice]) -> Result<FieldValues> {
        let mut tape = Tape::new();
        let vars = self.tape_params(&mut tape);
        let (out, layout) = self.grid_on_tape(&mut tape, &vars, req, m, slices)?;
        Ok(FieldValues { layout, data: tape.value(out).clone() })
    }

    pub fn eval_points(&self, req: &DerivativeRequest, points: &[(Vec<f64>, f64)]) -> Result<FieldValues> {
        let mut tape = Tape::new();
        let vars = self.tape_params(&mut tape);
        let (out, layout) = self.points_on_tape(&mut tape, &vars, req, points)?;
        Ok(FieldValues { layout, data: tape.value(out).clone() })
    }

    /// Plain field values at physical points, evaluated in batches.
    pub fn values_at(&self, points: &[(Vec<f64>, f64)]) -> Result<Tensor> {
        let req = DerivativeRequest::values(self.dims());
        let mut data = Vec::with_capacity(points.len() * self.components());
        for chunk in points.chunks(4096) {
            data.extend(self.eval_points(&req, chunk)?.data.data);
        }
        Ok(Tensor::new(points.len(), self.components(), data))
    }

    /// Values on the full structured grid `m` at normalized time `t`, no shift.
    pub fn values_on_grid(&self, m: &[usize], t: f64) -> Result<Tensor> {
        let slice = Slice { t, shift: vec![0.0; self.dims()] };
        Ok(self.eval_grid(&DerivativeRequest::values(self.dims()), m, &[slice])?.data)
    }
}
