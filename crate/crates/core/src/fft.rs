//! Dense real/complex grids and power-of-two FFTs.
//!
//! Conventions used everywhere in the crate:
//! * forward transforms are unnormalized, `X_k = sum_j x_j exp(-2 pi i k j / N)`;
//! * inverse transforms carry the `1/N` factor per axis;
//! * storage index `m` on an axis of size `N` is the signed mode `m` for `m < N/2`
//!   and `m - N` otherwise.
//!
//! The signed mode set `{-N/2, .., N/2 - 1}` is asymmetric. Whenever a spectrum is
//! evaluated off-grid, differentiated or phase shifted, the `-N/2` coefficient is
//! split half-and-half across `+-N/2`, so real grids always interpolate to real
//! values.

use std::cell::RefCell;
use std::collections::HashMap;
use std::f64::consts::PI;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Real samples on a row-major grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Complex coefficients (or complex samples) on a row-major grid, FFT mode order.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexSpectrum {
    pub shape: Vec<usize>,
    pub data: Vec<Complex64>,
}

/// Signed FFT mode ranges `{-N/2, .., N/2 - 1}` per axis.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModeSet {
    sizes: Vec<usize>,
}

fn check_shape(shape: &[usize], len: usize) -> Result<()> {
    if shape.iter().any(|&s| s == 0) {
        return Err(Error::Shape(format!("zero-sized axis in {shape:?}")));
    }
    let n: usize = shape.iter().product();
    if n != len {
        return Err(Error::Shape(format!("shape {shape:?} holds {n} values, data has {len}")));
    }
    Ok(())
}

impl RealGrid {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![0.0; n] }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn to_complex(&self) -> ComplexSpectrum {
        ComplexSpectrum {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

impl ComplexSpectrum {
    pub fn new(shape: Vec<usize>, data: Vec<Complex64>) -> Result<Self> {
        check_shape(&shape, data.len())?;
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self { shape, data: vec![Complex64::new(0.0, 0.0); n] }
    }

    /// Real parts as a [`RealGrid`].
    pub fn real(&self) -> RealGrid {
        RealGrid { shape: self.shape.clone(), data: self.data.iter().map(|c| c.re).collect() }
    }

    /// Largest `|coeff(k) - conj(coeff(-k))|` over the given axes, relative to the
    /// largest coefficient magnitude.
    pub fn hermitian_defect(&self, axes: &[usize]) -> f64 {
        let scale = self.data.iter().map(|c| c.norm()).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
        let strides = strides(&self.shape);
        let mut worst: f64 = 0.0;
        for (flat, c) in self.data.iter().enumerate() {
            let mut partner = 0;
            for (axis, (&n, &s)) in self.shape.iter().zip(&strides).enumerate() {
                let m = (flat / s) % n;
                let pm = if axes.contains(&axis) { (n - m) % n } else { m };
                partner += pm * s;
            }
            worst = worst.max((c - self.data[partner].conj()).norm());
        }
        worst / scale
    }
}

impl ModeSet {
    pub fn new(sizes: Vec<usize>) -> Result<Self> {
        for (axis, &n) in sizes.iter().enumerate() {
            if n == 0 || n % 2 != 0 {
                return Err(Error::UnsupportedSize { axis, size: n });
            }
        }
        Ok(Self { sizes })
    }

    /// Signed modes of one axis in ascending order.
    pub fn axis(&self, axis: usize) -> std::ops::Range<i64> {
        let half = (self.sizes[axis] / 2) as i64;
        -half..half
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }
}

/// Signed mode of storage index `m` on an axis of size `n`.
#[inline]
pub fn signed_mode(m: usize, n: usize) -> i64 {
    if m < n / 2 {
        m as i64
    } else {
        m as i64 - n as i64
    }
}

/// Storage index of signed mode `k` on an axis of size `n` (aliased modulo `n`).
#[inline]
pub fn mode_index(k: i64, n: usize) -> usize {
    k.rem_euclid(n as i64) as usize
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        s[a] = s[a + 1] * shape[a + 1];
    }
    s
}

thread_local! {
    static PLANS: RefCell<(FftPlanner<f64>, HashMap<(usize, bool), Arc<dyn Fft<f64>>>)> =
        RefCell::new((FftPlanner::new(), HashMap::new()));
}

/// Cached rustfft plan for a power-of-two length.
pub(crate) fn plan(n: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANS.with(|p| {
        let mut p = p.borrow_mut();
        let (planner, cache) = &mut *p;
        cache
            .entry((n, inverse))
            .or_insert_with(|| {
                if inverse {
                    planner.plan_fft_inverse(n)
                } else {
                    planner.plan_fft_forward(n)
                }
            })
            .clone()
    })
}

fn check_axes(shape: &[usize], axes: &[usize]) -> Result<()> {
    for &a in axes {
        let n = *shape
            .get(a)
            .ok_or_else(|| Error::Shape(format!("axis {a} out of range for {shape:?}")))?;
        if !n.is_power_of_two() {
            return Err(Error::UnsupportedSize { axis: a, size: n });
        }
    }
    Ok(())
}

/// Unnormalized in-place transform of `data` (row-major `shape`) along `axis`.
/// The axis length must already be validated as a power of two.
pub(crate) fn transform_axis(data: &mut [Complex64], shape: &[usize], axis: usize, inverse: bool) {
    let n = shape[axis];
    if n == 1 {
        return;
    }
    let fft = plan(n, inverse);
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let mut scratch = vec![Complex64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
    if inner == 1 {
        fft.process_with_scratch(data, &mut scratch);
        return;
    }
    let mut line = vec![Complex64::new(0.0, 0.0); n];
    for o in 0..outer {
        let base = o * n * inner;
        for i in 0..inner {
            for (j, v) in line.iter_mut().enumerate() {
                *v = data[base + j * inner + i];
            }
            fft.process_with_scratch(&mut line, &mut scratch);
            for (j, v) in line.iter().enumerate() {
                data[base + j * inner + i] = *v;
            }
        }
    }
}

/// Forward FFT of a real grid along `axes`.
pub fn fft(grid: &RealGrid, axes: &[usize]) -> Result<ComplexSpectrum> {
    fft_complex(&grid.to_complex(), axes)
}

/// Forward FFT of complex samples along `axes`.
pub fn fft_complex(grid: &ComplexSpectrum, axes: &[usize]) -> Result<ComplexSpectrum> {
    check_shape(&grid.shape, grid.data.len())?;
    check_axes(&grid.shape, axes)?;
    let mut out = grid.clone();
    for &a in axes {
        transform_axis(&mut out.data, &out.shape, a, false);
    }
    Ok(out)
}

/// Inverse FFT along `axes`, including the `1/N` factor per axis.
pub fn ifft(spec: &ComplexSpectrum, axes: &[usize]) -> Result<ComplexSpectrum> {
    check_shape(&spec.shape, spec.data.len())?;
    check_axes(&spec.shape, axes)?;
    let mut out = spec.clone();
    let mut norm = 1.0;
    for &a in axes {
        transform_axis(&mut out.data, &out.shape, a, true);
        norm *= out.shape[a] as f64;
    }
    let inv = 1.0 / norm;
    out.data.iter_mut().for_each(|v| *v *= inv);
    Ok(out)
}

/// Inverse FFT keeping only real parts.
pub fn ifft_real(spec: &ComplexSpectrum, axes: &[usize]) -> Result<RealGrid> {
    Ok(ifft(spec, axes)?.real())
}

/// Per-storage-index factor `(2 pi i k)^order exp(2 pi i k x)` on an axis of size `n`,
/// with the Nyquist index symmetrized over `+-n/2`.
pub fn axis_factors(n: usize, x: f64, order: u32) -> Vec<Complex64> {
    let x = x.rem_euclid(1.0);
    (0..n).map(|m| mode_factor(signed_mode(m, n), n, x, order)).collect()
}

/// Factor of a single signed mode; `k == -n/2` is treated as the symmetrized Nyquist pair.
#[inline]
pub fn mode_factor(k: i64, n: usize, x: f64, order: u32) -> Complex64 {
    let term = |k: i64| mode_term(k, x, order);
    if n >= 2 && k == -((n / 2) as i64) {
        (term(k) + term(-k)) * 0.5
    } else {
        term(k)
    }
}

/// `(2 pi i k)^order exp(2 pi i k x)` for one signed mode, no Nyquist handling.
#[inline]
pub(crate) fn mode_term(k: i64, x: f64, order: u32) -> Complex64 {
    // (k x) mod 1 keeps the phase argument small for large k.
    let phase = 2.0 * PI * (k as f64 * x).rem_euclid(1.0);
    let (s, c) = phase.sin_cos();
    Complex64::new(0.0, 2.0 * PI * k as f64).powu(order) * Complex64::new(c, s)
}

/// Evaluates the Fourier interpolant of `spec` at `x`, returning real parts.
///
/// The first `x.len()` axes are spatial; any trailing axes are channels and one value
/// per channel is returned. Normalized so that `x = j / N` reproduces sample `j`.
pub fn dft_at_point(spec: &ComplexSpectrum, x: &[f64]) -> Result<Vec<f64>> {
    dft_derivative_at_point(spec, x, &vec![0; x.len()])
}

/// As [`dft_at_point`], for the mixed derivative with per-axis `orders`.
pub fn dft_derivative_at_point(spec: &ComplexSpectrum, x: &[f64], orders: &[u32]) -> Result<Vec<f64>> {
    let d = x.len();
    if d > spec.shape.len() || orders.len() != d {
        return Err(Error::Shape(format!(
            "{d}-dimensional query against spectrum of shape {:?}",
            spec.shape
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(format!("non-finite query point {x:?}")));
    }
    let spatial = &spec.shape[..d];
    let channels: usize = spec.shape[d..].iter().product();
    let factors: Vec<Vec<Complex64>> =
        spatial.iter().zip(x).zip(orders).map(|((&n, &xi), &o)| axis_factors(n, xi, o)).collect();
    let norm: f64 = spatial.iter().map(|&n| n as f64).product();
    let count: usize = spatial.iter().product();
    let mut acc = vec![Complex64::new(0.0, 0.0); channels];
    let mut idx = vec![0usize; d];
    for flat in 0..count {
        let mut w = Complex64::new(1.0, 0.0);
        for a in 0..d {
            w *= factors[a][idx[a]];
        }
        let row = &spec.data[flat * channels..(flat + 1) * channels];
        for (c, v) in acc.iter_mut().zip(row) {
            *c += w * v;
        }
        for a in (0..d).rev() {
            idx[a] += 1;
            if idx[a] < spatial[a] {
                break;
            }
            idx[a] = 0;
        }
    }
    Ok(acc.into_iter().map(|c| c.re / norm).collect())
}
