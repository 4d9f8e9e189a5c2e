//! Learnable multi-resolution Fourier feature pyramid.
//!
//! Each level stores `anchors` periodic grids of shape `[n; dims] x channels`. A query
//! at normalized time `t` blends the two bracketing anchors linearly, applies the
//! preconditioner in Fourier space and evaluates the trigonometric interpolant of
//! every level. Two evaluation paths share this definition: [`FourierPyramid::spectral_features`]
//! fills whole shifted grids with inverse FFTs, [`FourierPyramid::pointwise_features`]
//! sums the modes directly at arbitrary points.
//!
//! Feature tensors are stacked in jet layout: rows are `channel * points + point` with
//! channel 0 the value, then per spatial axis the derivative orders, then `d/dt`.
//! Columns are `level * channels + c`.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{JetLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fft::{mode_term, signed_mode, strides, transform_axis};

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PyramidConfig {
    /// Number of spatial axes.
    pub dims: usize,
    /// Per-level grid size, shared by all spatial axes.
    pub sizes: Vec<usize>,
    /// Feature channels per level.
    pub channels: usize,
    /// Stored temporal anchors; `anchors - 1` time bins.
    pub anchors: usize,
    pub global_precond: f64,
    pub per_level_precond: f64,
    pub spectral_precond_k: f64,
    pub init_noise: f64,
}

impl PyramidConfig {
    /// Levels `min_size, 2 min_size, ..` with unit preconditioning.
    pub fn dyadic(dims: usize, levels: usize, min_size: usize, channels: usize, anchors: usize) -> Self {
        Self {
            dims,
            sizes: (0..levels).map(|l| min_size << l).collect(),
            channels,
            anchors,
            global_precond: 1.0,
            per_level_precond: 1.0,
            spectral_precond_k: 0.0,
            init_noise: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, msg: String| Err(Error::config(path, msg));
        if self.dims == 0 {
            return bad("pyramid.dims", "at least one spatial axis is required".into());
        }
        if self.sizes.is_empty() {
            return bad("num_scales", "at least one level is required".into());
        }
        for (l, &n) in self.sizes.iter().enumerate() {
            if n < 2 || !n.is_power_of_two() {
                return bad("pyramid.sizes", format!("level {l} has size {n}; sizes must be even powers of two"));
            }
        }
        if self.channels == 0 {
            return bad("num_features", "need at least one channel per level".into());
        }
        if self.anchors == 0 {
            return bad("pyramid.anchors", "need at least one temporal anchor".into());
        }
        if !(self.init_noise > 0.0 && self.init_noise.is_finite()) {
            return bad("init_noise", format!("must be positive, got {}", self.init_noise));
        }
        for (name, v) in [
            ("global_precond", self.global_precond),
            ("per_level_precond", self.per_level_precond),
            ("spectral_precond_K", self.spectral_precond_k),
        ] {
            if !v.is_finite() {
                return bad(name, format!("must be finite, got {v}"));
            }
        }
        Ok(())
    }

    pub fn levels(&self) -> usize {
        self.sizes.len()
    }

    pub fn finest(&self) -> usize {
        self.sizes.iter().copied().max().unwrap_or(0)
    }

    /// Number of decoder inputs contributed by the pyramid.
    pub fn features(&self) -> usize {
        self.levels() * self.channels
    }

    pub fn level_points(&self, l: usize) -> usize {
        self.sizes[l].pow(self.dims as u32)
    }

    /// Values in one anchor of level `l`.
    pub fn level_len(&self, l: usize) -> usize {
        self.level_points(l) * self.channels
    }

    pub fn level_shape(&self, l: usize) -> Vec<usize> {
        let mut s = vec![self.sizes[l]; self.dims];
        s.push(self.channels);
        s
    }

    pub fn param_count(&self) -> usize {
        self.anchors * (0..self.levels()).map(|l| self.level_len(l)).sum::<usize>()
    }

    /// `g_global * g_level^l` for zero-based level `l`.
    pub fn level_scale(&self, l: usize) -> f64 {
        self.global_precond * self.per_level_precond.powi(l as i32)
    }

    /// Real multiplier taking the FFT of a stored grid to its effective spectrum, including
    /// the `1/n^dims` interpolation normalization. One entry per spatial storage index.
    fn multipliers(&self, l: usize) -> Vec<f64> {
        let n = self.sizes[l];
        let points = self.level_points(l);
        let norm = self.level_scale(l) / points as f64;
        let k_exp = self.spectral_precond_k;
        (0..points)
            .map(|flat| {
                if k_exp == 0.0 {
                    return norm;
                }
                let mut rem = flat;
                let mut k2 = 0.0;
                for _ in 0..self.dims {
                    let k = signed_mode(rem % n, n) as f64;
                    k2 += k * k;
                    rem /= n;
                }
                norm * (1.0 + k2.sqrt()).powf(-k_exp)
            })
            .collect()
    }
}

/// Which derivatives of the features to produce, and the chain factors that map
/// unit-torus derivatives to physical ones.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRequest {
    /// Highest derivative order per spatial axis.
    pub orders: Vec<usize>,
    pub time: bool,
    /// `d(torus)/d(physical)` per spatial axis.
    pub chain: Vec<f64>,
    /// `d(normalized t)/d(physical t)`.
    pub time_chain: f64,
}

impl FeatureRequest {
    pub fn values(dims: usize) -> Self {
        Self { orders: vec![0; dims], time: false, chain: vec![1.0; dims], time_chain: 1.0 }
    }

    pub fn new(orders: Vec<usize>, time: bool) -> Self {
        let dims = orders.len();
        Self { orders, time, chain: vec![1.0; dims], time_chain: 1.0 }
    }

    pub fn with_chain(mut self, chain: Vec<f64>, time_chain: f64) -> Self {
        self.chain = chain;
        self.time_chain = time_chain;
        self
    }

    /// Jet directions: one per spatial axis, then time.
    pub fn layout(&self, points: usize) -> JetLayout {
        let mut o = self.orders.clone();
        o.push(self.time as usize);
        JetLayout::new(points, o)
    }

    fn channels(&self) -> Vec<Channel> {
        let mut v = vec![Channel::Value];
        for (a, &o) in self.orders.iter().enumerate() {
            v.extend((1..=o).map(|k| Channel::Space(a, k as u32)));
        }
        if self.time {
            v.push(Channel::Time);
        }
        v
    }

    fn check(&self, dims: usize) -> Result<()> {
        if self.orders.len() != dims || self.chain.len() != dims {
            return Err(Error::Shape(format!("feature request for {} axes on a {dims}-axis pyramid", self.orders.len())));
        }
        if let Some(&o) = self.orders.iter().find(|&&o| o > crate::autodiff::MAX_ORDER) {
            return Err(Error::Unsupported(format!("derivative order {o} exceeds {}", crate::autodiff::MAX_ORDER)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Channel {
    Value,
    Space(usize, u32),
    Time,
}

/// One time slice of a structured residual grid: nodes `j / M + shift` at time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct Slice {
    pub t: f64,
    pub shift: Vec<f64>,
}

/// A scattered query point in unit-torus coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Query {
    pub x: Vec<f64>,
    pub t: f64,
}

/// Bracketing anchor and blend weight for normalized time `t`.
pub fn time_bin(t: f64, anchors: usize) -> Result<(usize, f64)> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("normalized time {t} outside [0, 1]")));
    }
    if anchors == 1 {
        return Ok((0, 0.0));
    }
    let bins = (anchors - 1) as f64;
    let s = t * bins;
    let i = (s.floor() as usize).min(anchors - 2);
    Ok((i, s - i as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FourierPyramid {
    pub config: PyramidConfig,
    /// Per level, `anchors` stored grids back to back (channels last).
    pub levels: Vec<Vec<f64>>,
}

impl FourierPyramid {
    pub fn init(config: PyramidConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init_with(config, &mut rng)
    }

    pub fn init_with(config: PyramidConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let normal = Normal::new(0.0, config.init_noise).map_err(|e| Error::config("init_noise", e.to_string()))?;
        let levels = (0..config.levels())
            .map(|l| (0..config.anchors * config.level_len(l)).map(|_| normal.sample(rng)).collect())
            .collect();
        Ok(Self { config, levels })
    }

    pub fn from_levels(config: PyramidConfig, levels: Vec<Vec<f64>>) -> Result<Self> {
        config.validate()?;
        if levels.len() != config.levels() {
            return Err(Error::Shape(format!("{} level arrays for {} levels", levels.len(), config.levels())));
        }
        for (l, v) in levels.iter().enumerate() {
            if v.len() != config.anchors * config.level_len(l) {
                return Err(Error::Shape(format!("level {l} holds {} values, expected {}", v.len(), config.anchors * config.level_len(l))));
            }
        }
        Ok(Self { config, levels })
    }

    pub fn anchor(&self, l: usize, a: usize) -> &[f64] {
        let len = self.config.level_len(l);
        &self.levels[l][a * len..(a + 1) * len]
    }

    pub fn anchor_mut(&mut self, l: usize, a: usize) -> &mut [f64] {
        let len = self.config.level_len(l);
        &mut self.levels[l][a * len..(a + 1) * len]
    }

    /// Stored grids blended at `t`, with their time derivative `T (theta_{i+1} - theta_i)`.
    pub fn blend_temporal(&self, t: f64) -> Result<Vec<(Vec<f64>, Vec<f64>)>> {
        let (i, w) = time_bin(t, self.config.anchors)?;
        let bins = (self.config.anchors - 1) as f64;
        Ok((0..self.config.levels())
            .map(|l| {
                if self.config.anchors == 1 {
                    let a = self.anchor(l, 0).to_vec();
                    let z = vec![0.0; a.len()];
                    return (a, z);
                }
                let (a, b) = (self.anchor(l, i), self.anchor(l, i + 1));
                let val = a.iter().zip(b).map(|(p, q)| (1.0 - w) * p + w * q).collect();
                let dt = a.iter().zip(b).map(|(p, q)| bins * (q - p)).collect();
                (val, dt)
            })
            .collect())
    }

    /// The effective (preconditioned) grid of one anchor in real space.
    pub fn effective_grid(&self, l: usize, a: usize) -> Vec<f64> {
        let mut spec = self.effective_spectrum(l, a);
        let shape = self.config.level_shape(l);
        for ax in 0..self.config.dims {
            transform_axis(&mut spec, &shape, ax, true);
        }
        spec.iter().map(|c| c.re).collect()
    }

    /// `multiplier * FFT(stored)` for one anchor: the spectrum whose plain mode sum is the
    /// effective interpolant.
    fn effective_spectrum(&self, l: usize, a: usize) -> Vec<Complex64> {
        let shape = self.config.level_shape(l);
        let mut buf: Vec<Complex64> = self.anchor(l, a).iter().map(|&v| Complex64::new(v, 0.0)).collect();
        for ax in 0..self.config.dims {
            transform_axis(&mut buf, &shape, ax, false);
        }
        let dh = self.config.channels;
        for (m, &p) in self.config.multipliers(l).iter().enumerate() {
            buf[m * dh..(m + 1) * dh].iter_mut().for_each(|v| *v *= p);
        }
        buf
    }

    fn all_spectra(&self) -> Vec<Vec<Vec<Complex64>>> {
        (0..self.config.levels())
            .map(|l| (0..self.config.anchors).map(|a| self.effective_spectrum(l, a)).collect())
            .collect()
    }

    /// Features on the structured grid of sizes `m` for every slice, stacked in jet layout.
    pub fn spectral_features(&self, m: &[usize], slices: &[Slice], req: &FeatureRequest) -> Result<Tensor> {
        check_grid(&self.config, m, slices)?;
        req.check(self.config.dims)?;
        let cfg = &self.config;
        let spectra = self.all_spectra();
        let channels = req.channels();
        let p_count: usize = m.iter().product();
        let points = slices.len() * p_count;
        let cols = cfg.features();
        let dh = cfg.channels;
        let mut out = Tensor::zeros(channels.len() * points, cols);
        let mut grid_shape = m.to_vec();
        grid_shape.push(dh);
        let mut y = vec![ZERO; p_count * dh];
        let mut src = Vec::new();
        for (s, slice) in slices.iter().enumerate() {
            let (i, w) = time_bin(slice.t, cfg.anchors)?;
            for l in 0..cfg.levels() {
                for (ci, ch) in channels.iter().enumerate() {
                    if !blended_source(cfg, &spectra[l], i, w, *ch, req, &mut src) {
                        continue;
                    }
                    y.iter_mut().for_each(|v| *v = ZERO);
                    for (from, to, f) in scatter(cfg.sizes[l], m, &slice.shift, *ch, req) {
                        for c in 0..dh {
                            y[to * dh + c] += f * src[from * dh + c];
                        }
                    }
                    for ax in 0..cfg.dims {
                        transform_axis(&mut y, &grid_shape, ax, true);
                    }
                    let row0 = ci * points + s * p_count;
                    for p in 0..p_count {
                        let row = &mut out.data[(row0 + p) * cols + l * dh..(row0 + p) * cols + (l + 1) * dh];
                        for (o, v) in row.iter_mut().zip(&y[p * dh..(p + 1) * dh]) {
                            *o = v.re;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    /// Features at scattered points, same layout and meaning as [`Self::spectral_features`].
    pub fn pointwise_features(&self, queries: &[Query], req: &FeatureRequest) -> Result<Tensor> {
        req.check(self.config.dims)?;
        check_queries(&self.config, queries)?;
        let cfg = &self.config;
        let spectra = self.all_spectra();
        let channels = req.channels();
        let points = queries.len();
        let (cols, dh) = (cfg.features(), cfg.channels);
        let mut out = Tensor::zeros(channels.len() * points, cols);
        let mut src = Vec::new();
        for (q, query) in queries.iter().enumerate() {
            let (i, w) = time_bin(query.t, cfg.anchors)?;
            for l in 0..cfg.levels() {
                let table = PointFactors::new(cfg.sizes[l], &query.x, req);
                for (ci, ch) in channels.iter().enumerate() {
                    if !blended_source(cfg, &spectra[l], i, w, *ch, req, &mut src) {
                        continue;
                    }
                    let mut acc = vec![ZERO; dh];
                    table.for_each(*ch, |flat, f| {
                        for (a, v) in acc.iter_mut().zip(&src[flat * dh..(flat + 1) * dh]) {
                            *a += f * v;
                        }
                    });
                    let row = (ci * points + q) * cols + l * dh;
                    for (c, a) in acc.iter().enumerate() {
                        out.data[row + c] = a.re;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Registers one parameter tensor per level (`anchors x level_len`).
    pub fn tape_params(&self, tape: &mut Tape) -> Vec<Var> {
        (0..self.config.levels())
            .map(|l| tape.param(Tensor::new(self.config.anchors, self.config.level_len(l), self.levels[l].clone())))
            .collect()
    }

    /// Taped [`Self::spectral_features`]; `vars` come from [`Self::tape_params`] and must hold
    /// this pyramid's values.
    pub fn spectral_on_tape(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        m: &[usize],
        slices: &[Slice],
        req: &FeatureRequest,
    ) -> Result<Var> {
        let value = self.spectral_features(m, slices, req)?;
        let (cfg, m, slices, req) = (self.config.clone(), m.to_vec(), slices.to_vec(), req.clone());
        Ok(tape.linear("spectral_features", vars, value, move |g| {
            level_tensors(&cfg, spectral_adjoint(&cfg, &m, &slices, &req, g))
        }))
    }

    /// Taped [`Self::pointwise_features`].
    pub fn pointwise_on_tape(&self, tape: &mut Tape, vars: &[Var], queries: &[Query], req: &FeatureRequest) -> Result<Var> {
        let value = self.pointwise_features(queries, req)?;
        let (cfg, queries, req) = (self.config.clone(), queries.to_vec(), req.clone());
        Ok(tape.linear("pointwise_features", vars, value, move |g| {
            level_tensors(&cfg, pointwise_adjoint(&cfg, &queries, &req, g))
        }))
    }
}

fn level_tensors(cfg: &PyramidConfig, grads: Vec<Vec<f64>>) -> Vec<Tensor> {
    grads.into_iter().enumerate().map(|(l, g)| Tensor::new(cfg.anchors, cfg.level_len(l), g)).collect()
}

fn check_grid(cfg: &PyramidConfig, m: &[usize], slices: &[Slice]) -> Result<()> {
    if m.len() != cfg.dims {
        return Err(Error::Shape(format!("{}-axis residual grid for a {}-axis pyramid", m.len(), cfg.dims)));
    }
    for (axis, &size) in m.iter().enumerate() {
        if size == 0 || !size.is_power_of_two() {
            return Err(Error::UnsupportedSize { axis, size });
        }
    }
    for s in slices {
        if s.shift.len() != cfg.dims || s.shift.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid shift {:?}", s.shift)));
        }
    }
    Ok(())
}

fn check_queries(cfg: &PyramidConfig, queries: &[Query]) -> Result<()> {
    for q in queries {
        if q.x.len() != cfg.dims || q.x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid query point {:?}", q.x)));
        }
    }
    Ok(())
}

/// Fills `src` with the spectrum feeding channel `ch` at blend `(i, w)`. Returns false when
/// the channel is identically zero (time derivative of a single anchor).
fn blended_source(
    cfg: &PyramidConfig,
    spectra: &[Vec<Complex64>],
    i: usize,
    w: f64,
    ch: Channel,
    req: &FeatureRequest,
    src: &mut Vec<Complex64>,
) -> bool {
    src.clear();
    if cfg.anchors == 1 {
        if ch == Channel::Time {
            return false;
        }
        src.extend_from_slice(&spectra[0]);
        return true;
    }
    let (a, b) = (&spectra[i], &spectra[i + 1]);
    if ch == Channel::Time {
        let s = (cfg.anchors - 1) as f64 * req.time_chain;
        src.extend(a.iter().zip(b).map(|(p, q)| (q - p) * s));
    } else {
        src.extend(a.iter().zip(b).map(|(p, q)| p * (1.0 - w) + q * w));
    }
    true
}

/// Adjoint weights of [`blended_source`]: `(anchor, weight)` pairs.
fn blend_weights(cfg: &PyramidConfig, i: usize, w: f64, ch: Channel, req: &FeatureRequest) -> Vec<(usize, f64)> {
    if cfg.anchors == 1 {
        return if ch == Channel::Time { vec![] } else { vec![(0, 1.0)] };
    }
    if ch == Channel::Time {
        let s = (cfg.anchors - 1) as f64 * req.time_chain;
        vec![(i, -s), (i + 1, s)]
    } else {
        vec![(i, 1.0 - w), (i + 1, w)]
    }
}

fn axis_order(ch: Channel, axis: usize) -> u32 {
    match ch {
        Channel::Space(a, o) if a == axis => o,
        _ => 0,
    }
}

/// Mode scatter list from a level of size `n` onto the residual grid `m` for channel `ch`:
/// `(source flat index, destination flat index, factor)`. Modes fold modulo `m`, so any
/// power-of-two `m` reproduces the interpolant exactly at the shifted grid nodes.
fn scatter(n: usize, m: &[usize], shift: &[f64], ch: Channel, req: &FeatureRequest) -> Vec<(usize, usize, Complex64)> {
    let dims = m.len();
    let per_axis: Vec<Vec<(usize, usize, Complex64)>> = (0..dims)
        .map(|a| {
            let o = axis_order(ch, a);
            let chain = req.chain[a].powi(o as i32);
            let mut v = Vec::with_capacity(n + 1);
            let half = (n / 2) as i64;
            for idx in 0..n {
                let k = signed_mode(idx, n);
                if k == -half {
                    for kk in [-half, half] {
                        let f = mode_term(kk, shift[a], o) * (0.5 * chain);
                        v.push((idx, kk.rem_euclid(m[a] as i64) as usize, f));
                    }
                } else {
                    v.push((idx, k.rem_euclid(m[a] as i64) as usize, mode_term(k, shift[a], o) * chain));
                }
            }
            v
        })
        .collect();
    if dims == 1 {
        return per_axis.into_iter().next().unwrap();
    }
    let src_strides = strides(&vec![n; dims]);
    let dst_strides = strides(m);
    let mut out = vec![(0usize, 0usize, Complex64::new(1.0, 0.0))];
    for a in 0..dims {
        let mut next = Vec::with_capacity(out.len() * per_axis[a].len());
        for &(s, d, f) in &out {
            for &(sa, da, fa) in &per_axis[a] {
                next.push((s + sa * src_strides[a], d + da * dst_strides[a], f * fa));
            }
        }
        out = next;
    }
    out
}

/// Per-axis symmetrized mode factors at a point, for derivative orders `0..=max`.
struct PointFactors {
    n: usize,
    /// `axes[a][order][storage index]`
    axes: Vec<Vec<Vec<Complex64>>>,
}

impl PointFactors {
    fn new(n: usize, x: &[f64], req: &FeatureRequest) -> Self {
        let axes = x
            .iter()
            .enumerate()
            .map(|(a, &xa)| {
                let xa = xa.rem_euclid(1.0);
                (0..=req.orders[a] as u32)
                    .map(|o| {
                        let chain = req.chain[a].powi(o as i32);
                        (0..n).map(|m| crate::fft::mode_factor(signed_mode(m, n), n, xa, o) * chain).collect()
                    })
                    .collect()
            })
            .collect();
        Self { n, axes }
    }

    /// Calls `f(flat storage index, factor)` over all modes of the level for channel `ch`.
    fn for_each(&self, ch: Channel, mut f: impl FnMut(usize, Complex64)) {
        let dims = self.axes.len();
        let rows: Vec<&Vec<Complex64>> = (0..dims).map(|a| &self.axes[a][axis_order(ch, a) as usize]).collect();
        if dims == 1 {
            for (m, v) in rows[0].iter().enumerate() {
                f(m, *v);
            }
            return;
        }
        let count = self.n.pow(dims as u32);
        let mut idx = vec![0usize; dims];
        for flat in 0..count {
            let mut w = Complex64::new(1.0, 0.0);
            for a in 0..dims {
                w *= rows[a][idx[a]];
            }
            f(flat, w);
            for a in (0..dims).rev() {
                idx[a] += 1;
                if idx[a] < self.n {
                    break;
                }
                idx[a] = 0;
            }
        }
    }
}

/// Per-level, per-anchor spectral accumulators for the adjoint.
fn spectral_accumulators(cfg: &PyramidConfig) -> Vec<Vec<Vec<Complex64>>> {
    (0..cfg.levels()).map(|l| vec![vec![ZERO; cfg.level_len(l)]; cfg.anchors]).collect()
}

/// Maps spectral accumulators back to stored-grid gradients.
fn finish_adjoint(cfg: &PyramidConfig, acc: Vec<Vec<Vec<Complex64>>>) -> Vec<Vec<f64>> {
    let dh = cfg.channels;
    acc.into_iter()
        .enumerate()
        .map(|(l, anchors)| {
            let mult = cfg.multipliers(l);
            let shape = cfg.level_shape(l);
            let mut out = Vec::with_capacity(cfg.anchors * cfg.level_len(l));
            for mut spec in anchors {
                for (m, &p) in mult.iter().enumerate() {
                    spec[m * dh..(m + 1) * dh].iter_mut().for_each(|v| *v *= p);
                }
                for ax in 0..cfg.dims {
                    transform_axis(&mut spec, &shape, ax, true);
                }
                out.extend(spec.iter().map(|c| c.re));
            }
            out
        })
        .collect()
}

/// Gradient of `<spectral_features(theta), grad>` with respect to the stored grids.
pub fn spectral_adjoint(cfg: &PyramidConfig, m: &[usize], slices: &[Slice], req: &FeatureRequest, grad: &Tensor) -> Vec<Vec<f64>> {
    let channels = req.channels();
    let p_count: usize = m.iter().product();
    let points = slices.len() * p_count;
    let (cols, dh) = (cfg.features(), cfg.channels);
    let mut acc = spectral_accumulators(cfg);
    let mut grid_shape = m.to_vec();
    grid_shape.push(dh);
    let mut g = vec![ZERO; p_count * dh];
    for (s, slice) in slices.iter().enumerate() {
        let (i, w) = time_bin(slice.t, cfg.anchors).expect("slice times validated in forward");
        for l in 0..cfg.levels() {
            for (ci, ch) in channels.iter().enumerate() {
                let weights = blend_weights(cfg, i, w, *ch, req);
                if weights.is_empty() {
                    continue;
                }
                let row0 = ci * points + s * p_count;
                for p in 0..p_count {
                    let row = &grad.data[(row0 + p) * cols + l * dh..(row0 + p) * cols + (l + 1) * dh];
                    for (o, v) in g[p * dh..(p + 1) * dh].iter_mut().zip(row) {
                        *o = Complex64::new(*v, 0.0);
                    }
                }
                for ax in 0..cfg.dims {
                    transform_axis(&mut g, &grid_shape, ax, false);
                }
                for (from, to, f) in scatter(cfg.sizes[l], m, &slice.shift, *ch, req) {
                    let fc = f.conj();
                    for &(a, wt) in &weights {
                        let dst = &mut acc[l][a][from * dh..(from + 1) * dh];
                        for (d, v) in dst.iter_mut().zip(&g[to * dh..(to + 1) * dh]) {
                            *d += fc * v * wt;
                        }
                    }
                }
            }
        }
    }
    finish_adjoint(cfg, acc)
}

/// Gradient of `<pointwise_features(theta), grad>` with respect to the stored grids.
pub fn pointwise_adjoint(cfg: &PyramidConfig, queries: &[Query], req: &FeatureRequest, grad: &Tensor) -> Vec<Vec<f64>> {
    let channels = req.channels();
    let points = queries.len();
    let (cols, dh) = (cfg.features(), cfg.channels);
    let mut acc = spectral_accumulators(cfg);
    for (q, query) in queries.iter().enumerate() {
        let (i, w) = time_bin(query.t, cfg.anchors).expect("query times validated in forward");
        for l in 0..cfg.levels() {
            let table = PointFactors::new(cfg.sizes[l], &query.x, req);
            for (ci, ch) in channels.iter().enumerate() {
                let weights = blend_weights(cfg, i, w, *ch, req);
                let row = (ci * points + q) * cols + l * dh;
                let g = &grad.data[row..row + dh];
                if weights.is_empty() || g.iter().all(|v| *v == 0.0) {
                    continue;
                }
                table.for_each(*ch, |flat, f| {
                    let fc = f.conj();
                    for &(a, wt) in &weights {
                        let dst = &mut acc[l][a][flat * dh..(flat + 1) * dh];
                        for (d, v) in dst.iter_mut().zip(g) {
                            *d += fc * (v * wt);
                        }
                    }
                });
            }
        }
    }
    finish_adjoint(cfg, acc)
}

/// Unit-torus coordinates of the nodes of grid `m` shifted by `shift`, row-major.
pub fn grid_points(m: &[usize], shift: &[f64]) -> Vec<Vec<f64>> {
    let count: usize = m.iter().product();
    let st = strides(m);
    (0..count)
        .map(|flat| (0..m.len()).map(|a| ((flat / st[a]) % m[a]) as f64 / m[a] as f64 + shift[a]).collect())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::{dft_derivative_at_point, fft, RealGrid};
    use std::f64::consts::PI;

    fn random_pyramid(dims: usize, sizes: &[usize], dh: usize, anchors: usize, seed: u64) -> FourierPyramid {
        let mut cfg = PyramidConfig::dyadic(dims, 1, 2, dh, anchors);
        cfg.sizes = sizes.to_vec();
        cfg.init_noise = 1.0;
        cfg.global_precond = 1.7;
        cfg.per_level_precond = 0.6;
        cfg.spectral_precond_k = 0.5;
        FourierPyramid::init(cfg, seed).unwrap()
    }

    fn single(n: usize, f: impl Fn(f64) -> f64) -> FourierPyramid {
        let cfg = PyramidConfig::dyadic(1, 1, n, 1, 1);
        let data = (0..n).map(|j| f(j as f64 / n as f64)).collect();
        FourierPyramid::from_levels(cfg, vec![data]).unwrap()
    }

    #[test]
    fn zero_noise_rejected() {
        let mut cfg = PyramidConfig::dyadic(1, 2, 2, 1, 2);
        cfg.init_noise = 0.0;
        assert!(matches!(FourierPyramid::init(cfg, 0), Err(Error::Config { .. })));
    }

    #[test]
    fn init_is_deterministic_with_requested_spread() {
        let mut cfg = PyramidConfig::dyadic(2, 2, 128, 4, 2);
        cfg.init_noise = 0.1;
        let a = FourierPyramid::init(cfg.clone(), 5).unwrap();
        let b = FourierPyramid::init(cfg, 5).unwrap();
        assert_eq!(a, b);
        let all: Vec<f64> = a.levels.concat();
        assert!(all.len() >= 100_000);
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        let std = (all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64).sqrt();
        assert!((std - 0.1).abs() / 0.1 < 0.02, "std {std}");
    }

    #[test]
    fn blend_hits_anchors_and_midpoints() {
        let p = random_pyramid(1, &[4, 8], 2, 5, 1);
        for i in 0..5 {
            let b = p.blend_temporal(i as f64 / 4.0).unwrap();
            assert_eq!(b[1].0, p.anchor(1, i));
        }
        let b = p.blend_temporal(2.5 / 4.0).unwrap();
        for (j, v) in b[0].0.iter().enumerate() {
            let mid = 0.5 * (p.anchor(0, 2)[j] + p.anchor(0, 3)[j]);
            assert!((v - mid).abs() < 1e-15);
        }
        assert!(matches!(p.blend_temporal(1.5), Err(Error::Domain(_))));
    }

    #[test]
    fn blend_time_derivative_matches_finite_differences() {
        let p = random_pyramid(1, &[4], 3, 9, 2);
        let t = 0.37;
        let eps = 1e-6;
        let (hi, lo, mid) = (p.blend_temporal(t + eps).unwrap(), p.blend_temporal(t - eps).unwrap(), p.blend_temporal(t).unwrap());
        for j in 0..hi[0].0.len() {
            let fd = (hi[0].0[j] - lo[0].0[j]) / (2.0 * eps);
            assert!((fd - mid[0].1[j]).abs() < 1e-6 * (1.0 + fd.abs()));
        }
    }

    #[test]
    fn preconditioner_scales_levels() {
        let mut cfg = PyramidConfig::dyadic(1, 3, 2, 1, 1);
        cfg.global_precond = 1000.0;
        cfg.per_level_precond = 0.25;
        let p = FourierPyramid::init(cfg, 3).unwrap();
        let eff = p.effective_grid(2, 0);
        for (e, s) in eff.iter().zip(p.anchor(2, 0)) {
            assert!((e - 62.5 * s).abs() < 1e-12 * 62.5 * (1.0 + s.abs()));
        }
        let id = FourierPyramid::init(PyramidConfig::dyadic(1, 2, 4, 2, 1), 3).unwrap();
        for (e, s) in id.effective_grid(1, 0).iter().zip(id.anchor(1, 0)) {
            assert!((e - s).abs() < 1e-15);
        }
    }

    #[test]
    fn spectral_preconditioner_damps_single_mode() {
        let k = 3.0;
        let mut p = single(16, |x| (2.0 * PI * k * x).cos());
        p.config.spectral_precond_k = 1.0;
        let eff = RealGrid::new(vec![16, 1], p.effective_grid(0, 0)).unwrap();
        let spec = fft(&eff, &[0]).unwrap();
        let v = dft_derivative_at_point(&spec, &[0.0], &[0]).unwrap()[0];
        assert!((v - 1.0 / (1.0 + k)).abs() < 1e-12);
    }

    #[test]
    fn derivative_of_cosine_grid() {
        let p = single(8, |x| (2.0 * PI * x).cos());
        let req = FeatureRequest::new(vec![1], false);
        let slices = [Slice { t: 0.0, shift: vec![0.0] }];
        let f = p.spectral_features(&[8], &slices, &req).unwrap();
        for j in 0..8 {
            let expect = -2.0 * PI * (2.0 * PI * j as f64 / 8.0).sin();
            assert!((f.get(8 + j, 0) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn shift_by_one_cell_is_circular_shift() {
        let p = random_pyramid(1, &[8], 2, 1, 4);
        let req = FeatureRequest::values(1);
        let base = p.spectral_features(&[8], &[Slice { t: 0.0, shift: vec![0.0] }], &req).unwrap();
        let moved = p.spectral_features(&[8], &[Slice { t: 0.0, shift: vec![1.0 / 8.0] }], &req).unwrap();
        for j in 0..8 {
            for c in 0..2 {
                assert!((moved.get(j, c) - base.get((j + 1) % 8, c)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn unshifted_values_reproduce_effective_grid() {
        let p = random_pyramid(2, &[4, 8], 2, 1, 5);
        let f = p.spectral_features(&[8, 8], &[Slice { t: 0.0, shift: vec![0.0, 0.0] }], &FeatureRequest::values(2)).unwrap();
        let eff = p.effective_grid(1, 0);
        for (pt, e) in eff.chunks(2).enumerate() {
            for c in 0..2 {
                assert!((f.get(pt, 2 + c) - e[c]).abs() < 1e-12);
            }
        }
    }

    /// Independent oracle: FFT of the blended effective grid, then the direct mode sum.
    fn oracle(p: &FourierPyramid, l: usize, x: &[f64], t: f64, orders: &[u32], time: bool) -> Vec<f64> {
        let cfg = &p.config;
        let (i, w) = time_bin(t, cfg.anchors).unwrap();
        let grid = |a: usize| p.effective_grid(l, a);
        let data: Vec<f64> = if cfg.anchors == 1 {
            if time {
                vec![0.0; cfg.level_len(l)]
            } else {
                grid(0)
            }
        } else {
            let (a, b) = (grid(i), grid(i + 1));
            let bins = (cfg.anchors - 1) as f64;
            a.iter().zip(&b).map(|(p, q)| if time { bins * (q - p) } else { p + w * (q - p) }).collect()
        };
        let spec = fft(&RealGrid::new(cfg.level_shape(l), data).unwrap(), &(0..cfg.dims).collect::<Vec<_>>()).unwrap();
        dft_derivative_at_point(&spec, x, orders).unwrap()
    }

    #[test]
    fn grid_paths_match_direct_sum() {
        for (dims, sizes, m) in [(1, vec![2, 4, 16], vec![8]), (2, vec![2, 8], vec![4, 16])] {
            let p = random_pyramid(dims, &sizes, 2, 3, 6);
            let req = FeatureRequest::new(vec![3; dims], true);
            let slices = vec![
                Slice { t: 0.3, shift: vec![0.013; dims] },
                Slice { t: 1.0, shift: (0..dims).map(|a| 0.05 - 0.02 * a as f64).collect() },
            ];
            let f = p.spectral_features(&m, &slices, &req).unwrap();
            let queries: Vec<Query> = slices
                .iter()
                .flat_map(|s| grid_points(&m, &s.shift).into_iter().map(move |x| Query { x, t: s.t }))
                .collect();
            let g = p.pointwise_features(&queries, &req).unwrap();
            let chans = req.channels();
            let points = queries.len();
            for (ci, ch) in chans.iter().enumerate() {
                for (q, query) in queries.iter().enumerate() {
                    for l in 0..sizes.len() {
                        let orders: Vec<u32> = (0..dims).map(|a| axis_order(*ch, a)).collect();
                        let want = oracle(&p, l, &query.x, query.t, &orders, *ch == Channel::Time);
                        for c in 0..2 {
                            let col = l * 2 + c;
                            let (a, b) = (f.get(ci * points + q, col), g.get(ci * points + q, col));
                            let scale = 1.0 + want[c].abs();
                            assert!((a - want[c]).abs() < 1e-10 * scale, "{ch:?} level {l}: fft {a} vs {}", want[c]);
                            assert!((b - want[c]).abs() < 1e-10 * scale, "{ch:?} level {l}: pointwise {b} vs {}", want[c]);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn coarse_residual_grid_folds_exactly() {
        let p = random_pyramid(1, &[4, 32], 1, 1, 7);
        let req = FeatureRequest::new(vec![2], false);
        let slices = [Slice { t: 0.0, shift: vec![0.021] }];
        let f = p.spectral_features(&[8], &slices, &req).unwrap();
        let q: Vec<Query> = grid_points(&[8], &[0.021]).into_iter().map(|x| Query { x, t: 0.0 }).collect();
        let g = p.pointwise_features(&q, &req).unwrap();
        for (a, b) in f.data.iter().zip(&g.data) {
            assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn fine_grid_is_bandlimited() {
        let p = random_pyramid(1, &[8], 1, 1, 8);
        let m = 64;
        let f = p.spectral_features(&[m], &[Slice { t: 0.0, shift: vec![0.004] }], &FeatureRequest::new(vec![3], false)).unwrap();
        for ch in 0..4 {
            let grid = RealGrid::new(vec![m], f.data[ch * m..(ch + 1) * m].to_vec()).unwrap();
            let s = fft(&grid, &[0]).unwrap();
            let total: f64 = s.data.iter().map(|c| c.norm_sqr()).sum();
            let high: f64 = (0..m).filter(|&i| signed_mode(i, m).abs() > 4).map(|i| s.data[i].norm_sqr()).sum();
            assert!(high <= 1e-20 * total.max(1.0), "channel {ch}: {high} of {total}");
        }
    }

    #[test]
    fn constant_pyramid_has_no_spatial_derivatives() {
        let p = single(8, |_| 2.5);
        let req = FeatureRequest::new(vec![3], false);
        let q = [Query { x: vec![0.123], t: 0.0 }];
        let f = p.pointwise_features(&q, &req).unwrap();
        assert!((f.data[0] - 2.5).abs() < 1e-14);
        assert!(f.data[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn pointwise_is_periodic() {
        let p = random_pyramid(2, &[4, 8], 2, 2, 9);
        let req = FeatureRequest::new(vec![1, 1], true);
        let a = p.pointwise_features(&[Query { x: vec![0.31, 0.77], t: 0.4 }], &req).unwrap();
        let b = p.pointwise_features(&[Query { x: vec![1.31, -0.23], t: 0.4 }], &req).unwrap();
        for (u, v) in a.data.iter().zip(&b.data) {
            assert!((u - v).abs() < 1e-12 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn adjoints_pass_dot_product_test() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for dims in [1, 2] {
            let sizes = if dims == 1 { vec![2, 8, 32] } else { vec![2, 4, 8] };
            let p = random_pyramid(dims, &sizes, 2, 3, 11);
            let req = FeatureRequest::new(vec![2; dims], true).with_chain(vec![0.5; dims], 2.0);
            let m = vec![16; dims];
            let slices = vec![Slice { t: 0.2, shift: vec![0.01; dims] }, Slice { t: 0.9, shift: vec![0.03; dims] }];
            let queries = vec![Query { x: vec![0.41; dims], t: 0.6 }, Query { x: vec![0.05; dims], t: 1.0 }];
            let f = p.spectral_features(&m, &slices, &req).unwrap();
            let h = p.pointwise_features(&queries, &req).unwrap();
            let rand_like = |t: &Tensor, rng: &mut ChaCha8Rng| {
                Tensor::new(t.rows, t.cols, (0..t.data.len()).map(|_| rng.random_range(-1.0..1.0)).collect())
            };
            let (g1, g2) = (rand_like(&f, &mut rng), rand_like(&h, &mut rng));
            let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
            for (out, g, adj) in [
                (&f, &g1, spectral_adjoint(&p.config, &m, &slices, &req, &g1)),
                (&h, &g2, pointwise_adjoint(&p.config, &queries, &req, &g2)),
            ] {
                let lhs = dot(&out.data, &g.data);
                let rhs: f64 = adj.iter().zip(&p.levels).map(|(a, t)| dot(a, t)).sum();
                assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
            }
        }
    }
}
