//! Error metrics, residual reports, spectra and modal tangent energies.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::fft::{signed_mode, transform_axis};
use crate::field::{BeignetModel, DerivativeRequest, ProfileAnsatz};
use crate::problems::{ProblemSpec, ReferenceSolution, KDV_DISPERSION};
use crate::pyramid::Slice;

pub const PSNR_CAP_DB: f64 = 200.0;

/// `||pred - ref|| / ||ref||`.
pub fn relative_l2(pred: &[f64], reference: &[f64]) -> Result<f64> {
    if pred.len() != reference.len() {
        return Err(Error::Shape(format!("{} predicted vs {} reference values", pred.len(), reference.len())));
    }
    let den: f64 = reference.iter().map(|r| r * r).sum();
    if den == 0.0 {
        return Err(Error::UndefinedMetric("reference has zero norm".into()));
    }
    let num: f64 = pred.iter().zip(reference).map(|(p, r)| (p - r) * (p - r)).sum();
    Ok((num / den).sqrt())
}

/// Anything that can be sampled on a reference grid at one time.
pub trait FieldPredictor {
    fn components(&self) -> usize;
    /// Values of every component at physical time `t` on the reference's spatial grid.
    fn predict_slice(&self, t: f64, reference: &ReferenceSolution) -> Result<Vec<Vec<f64>>>;
}

impl FieldPredictor for BeignetModel {
    fn components(&self) -> usize {
        BeignetModel::components(self)
    }

    fn predict_slice(&self, t: f64, reference: &ReferenceSolution) -> Result<Vec<Vec<f64>>> {
        let tu = self.domain.time_to_unit(t).clamp(0.0, 1.0);
        let v = match reference.torus_sizes(&self.domain.lo, &self.domain.hi) {
            Some(m) => self.values_on_grid(&m, tu)?,
            None => {
                let tp = self.domain.t_lo + tu * (self.domain.t_hi - self.domain.t_lo);
                let pts: Vec<(Vec<f64>, f64)> = reference.spatial_points().into_iter().map(|x| (x, tp)).collect();
                self.values_at(&pts)?
            }
        };
        Ok((0..v.cols).map(|c| (0..v.rows).map(|i| v.get(i, c)).collect()).collect())
    }
}

/// Predictions over the full reference grid, one row-major array per component.
pub fn predict_reference(model: &dyn FieldPredictor, reference: &ReferenceSolution) -> Result<Vec<Vec<f64>>> {
    if model.components() != reference.components() {
        return Err(Error::Shape(format!("model has {} components, reference has {}", model.components(), reference.components())));
    }
    let mut out = vec![Vec::with_capacity(reference.fields[0].len()); reference.components()];
    for &t in &reference.t {
        for (o, s) in out.iter_mut().zip(model.predict_slice(t, reference)?) {
            o.extend(s);
        }
    }
    Ok(out)
}

/// Relative L2 error per component over the whole space-time reference grid.
pub fn relative_l2_against(model: &dyn FieldPredictor, reference: &ReferenceSolution) -> Result<Vec<f64>> {
    let pred = predict_reference(model, reference)?;
    pred.iter().zip(&reference.fields).map(|(p, r)| relative_l2(p, r)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BurgersReport {
    pub pde_mse: f64,
    pub log10_max_residual: f64,
}

/// Centered diagnostic grid `eta_i = c (i + 1/2) / 1000`.
pub fn burgers_grid(c: f64) -> Vec<f64> {
    (0..1000).map(|i| c * (i as f64 + 0.5) / 1000.0).collect()
}

pub fn burgers_report(ansatz: &ProfileAnsatz) -> Result<BurgersReport> {
    let (f, _) = ansatz.residuals(&burgers_grid(ansatz.c))?;
    Ok(residual_report(&f))
}

/// Mean square and `log10 max |F|` of residual values.
pub fn residual_report(f: &[f64]) -> BurgersReport {
    let mse = f.iter().map(|v| v * v).sum::<f64>() / f.len() as f64;
    let max = f.iter().map(|v| v.abs()).fold(0.0, f64::max);
    BurgersReport { pde_mse: mse, log10_max_residual: max.log10() }
}

/// `10 log10(1 / MSE)` for pixels in `[0, 1]`, capped for exact matches.
pub fn psnr(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(Error::Shape(format!("{} vs {} pixel values", pred.len(), target.len())));
    }
    let mse = crate::problems::mse(pred, target);
    Ok(if mse == 0.0 { PSNR_CAP_DB } else { (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSpectrum {
    /// `|k| = 0..=N/2`.
    pub modes: Vec<usize>,
    /// RMS over time of the normalized coefficient magnitude, `+k` and `-k` combined.
    pub magnitude: Vec<f64>,
    /// RMS over the neighbouring pairs `(2j, 2j + 1)` of `magnitude`.
    pub binned: Vec<f64>,
}

/// Spectrum of `pred - ref` for 1D fields given as `times x N` row-major arrays.
pub fn error_spectrum(pred: &[f64], reference: &[f64], n: usize) -> Result<ErrorSpectrum> {
    if pred.len() != reference.len() || n == 0 || pred.len() % n != 0 {
        return Err(Error::Shape(format!("{} vs {} values on {n}-point slices", pred.len(), reference.len())));
    }
    if !n.is_power_of_two() {
        return Err(Error::UnsupportedSize { axis: 0, size: n });
    }
    let times = pred.len() / n;
    let half = n / 2;
    let mut energy = vec![0.0; half + 1];
    for s in 0..times {
        let mut e: Vec<Complex64> = (0..n).map(|j| Complex64::from(pred[s * n + j] - reference[s * n + j])).collect();
        transform_axis(&mut e, &[n], 0, false);
        for (m, c) in e.iter().enumerate() {
            energy[signed_mode(m, n).unsigned_abs() as usize] += (c / n as f64).norm_sqr();
        }
    }
    let magnitude: Vec<f64> = energy.iter().map(|e| (e / times as f64).sqrt()).collect();
    let binned = magnitude.chunks_exact(2).map(|p| ((p[0] * p[0] + p[1] * p[1]) / 2.0).sqrt()).collect();
    Ok(ErrorSpectrum { modes: (0..=half).collect(), magnitude, binned })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Cos,
    Sin,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalVariant {
    /// Tangent of the projection of the model output.
    Output,
    /// Tangent after the linearized KdV spatial operator.
    Operator,
}

/// Unit-normalized Fourier probe on `m` grid points: `mean(q^2) = 1`.
pub fn probe(m: usize, k: usize, kind: ProbeKind) -> Vec<f64> {
    let raw: Vec<f64> = (0..m)
        .map(|j| {
            let a = 2.0 * PI * (k * j % m) as f64 / m as f64;
            match kind {
                ProbeKind::Cos => a.cos(),
                ProbeKind::Sin => a.sin(),
            }
        })
        .collect();
    let norm = (raw.iter().map(|v| v * v).sum::<f64>() / m as f64).sqrt();
    if norm == 0.0 {
        return raw;
    }
    raw.iter().map(|v| v / norm).collect()
}

/// Grid-mean inner product `<u, q>` of a column with a fixed probe.
pub fn projection(tape: &mut Tape, u: Var, q: &[f64]) -> Var {
    let qv = tape.constant(Tensor::column(q.to_vec()));
    let p = tape.mul(u, qv);
    tape.mean(p)
}

/// `||d a / d theta||^2` over all tape parameters.
pub fn tangent_energy(tape: &Tape, a: Var) -> Result<f64> {
    let g = tape.grad(a)?;
    Ok(g.iter().flatten().map(|x| x * x).sum())
}

/// Modal tangent energy of a 1D model at probe wavenumber `k` on an `m`-point grid at unit time `t`.
pub fn modal_tangent(model: &BeignetModel, k: usize, kind: ProbeKind, variant: ModalVariant, m: usize, t: f64) -> Result<f64> {
    if model.dims() != 1 {
        return Err(Error::Unsupported("modal tangents are defined for 1D models".into()));
    }
    if 2 * k > m {
        return Err(Error::Domain(format!("probe wavenumber {k} above the Nyquist mode of {m} points")));
    }
    let mut tape = Tape::new();
    let vars = model.tape_params(&mut tape);
    let orders = if variant == ModalVariant::Output { 0 } else { 3 };
    let req = DerivativeRequest::new(vec![orders], false);
    let (out, layout) = model.grid_on_tape(&mut tape, &vars, &req, &[m], &[Slice { t, shift: vec![0.0] }])?;
    let q = probe(m, k, kind);
    let u = tape.slice_rows(out, 0, m);
    let field = match variant {
        ModalVariant::Output => u,
        ModalVariant::Operator => {
            let ux = tape.slice_rows(out, layout.channel(0, 1) * m, m);
            let uxxx = tape.slice_rows(out, layout.channel(0, 3) * m, m);
            let ubar = tape.constant(tape.value(u).clone());
            let ubar_x = tape.constant(tape.value(ux).clone());
            let a = tape.mul(ubar, ux);
            let b = tape.mul(ubar_x, u);
            let c = tape.scale(uxxx, KDV_DISPERSION);
            let ab = tape.add(a, b);
            tape.add(ab, c)
        }
    };
    let a = projection(&mut tape, field, &q);
    tangent_energy(&tape, a)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StiffnessReport {
    /// Mean squared residual on the fixed diagnostic grid.
    pub residual_loss: f64,
    /// Norm of the residual-loss gradient over pyramid parameters.
    pub pyramid_grad_norm: f64,
}

/// Residual loss and its pyramid gradient on the unshifted `m x mt` grid (slices at `s / (mt - 1)`).
pub fn init_stiffness(problem: &ProblemSpec, model: &BeignetModel, m: &[usize], mt: usize) -> Result<StiffnessReport> {
    let slices: Vec<Slice> = (0..mt)
        .map(|s| Slice { t: if mt == 1 { 0.0 } else { s as f64 / (mt - 1) as f64 }, shift: vec![0.0; m.len()] })
        .collect();
    let mut tape = Tape::new();
    let vars = model.tape_params(&mut tape);
    let (out, layout) = model.grid_on_tape(&mut tape, &vars, &problem.request, m, &slices)?;
    let mut loss: Option<Var> = None;
    for r in problem.residual_on_tape(&mut tape, out, &layout) {
        let sq = tape.square(r);
        let l = tape.mean(sq);
        loss = Some(match loss {
            Some(a) => tape.add(a, l),
            None => l,
        });
    }
    let loss = loss.expect("every problem has a residual");
    let grads = tape.grad(loss)?;
    let n = vars.pyramid.len();
    let norm = grads[..n].iter().flatten().map(|x| x * x).sum::<f64>().sqrt();
    Ok(StiffnessReport { residual_loss: tape.value(loss).data[0], pyramid_grad_norm: norm })
}
