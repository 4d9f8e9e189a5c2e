//! PDE residuals, initial conditions and loss layouts for the benchmark problems.

mod etdrk4;
mod reference;

pub use etdrk4::{generate_reference, SolverConfig};
pub use reference::ReferenceSolution;

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::autodiff::{JetLayout, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::field::{BeignetModel, DerivativeRequest, DomainMap, FieldValues, ModelVars, ProfileAnsatz};
use crate::pyramid::Slice;

pub const AC_DIFFUSION: f64 = 1e-4;
pub const AC_REACTION: f64 = 5.0;
pub const KDV_DISPERSION: f64 = 0.022 * 0.022;
pub const GL_KAPPA: f64 = 10.0;
pub const GL_EPSILON: f64 = GL_KAPPA / 2500.0;
/// `(eps_u, eps_v, b1, b2, c1, c2)`.
pub const GS_PARAMS: [f64; 6] = [0.2, 0.1, 40.0, 100.0, 1000.0, 1000.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProblemKind {
    AllenCahn,
    Kdv,
    GinzburgLandau,
    GrayScott,
}

impl ProblemKind {
    pub const ALL: [ProblemKind; 4] = [Self::AllenCahn, Self::Kdv, Self::GinzburgLandau, Self::GrayScott];

    pub fn name(self) -> &'static str {
        match self {
            Self::AllenCahn => "allen_cahn",
            Self::Kdv => "kdv",
            Self::GinzburgLandau => "ginzburg_landau",
            Self::GrayScott => "gray_scott",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config("problem", format!("unknown problem `{s}`")))
    }

    pub fn dims(self) -> usize {
        match self {
            Self::AllenCahn | Self::Kdv => 1,
            _ => 2,
        }
    }

    pub fn components(self) -> usize {
        self.dims()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossTerm {
    pub name: String,
    pub weight: f64,
}

/// A time-dependent benchmark: domain, derivatives consumed, and loss terms.
#[derive(Clone, Debug, PartialEq)]
pub struct ProblemSpec {
    pub kind: ProblemKind,
    pub domain: DomainMap,
    pub request: DerivativeRequest,
    /// Initial-condition terms (one per component) followed by residual terms.
    pub terms: Vec<LossTerm>,
    pub causal_tol: f64,
    pub chunks: usize,
    pub windows: usize,
}

fn terms(spec: &[(&str, f64)]) -> Vec<LossTerm> {
    spec.iter().map(|&(n, w)| LossTerm { name: n.into(), weight: w }).collect()
}

impl ProblemSpec {
    pub fn new(kind: ProblemKind) -> Self {
        let d = kind.dims();
        let domain = DomainMap::new(
            vec![-1.0; d],
            vec![1.0; d],
            0.0,
            if kind == ProblemKind::GrayScott { 2.0 } else { 1.0 },
        )
        .expect("static domain");
        let (request, terms, causal_tol, chunks, windows) = match kind {
            ProblemKind::AllenCahn => (DerivativeRequest::new(vec![2], true), terms(&[("ics", 1.0), ("res", 1.0)]), 1.0, 32, 1),
            ProblemKind::Kdv => (DerivativeRequest::new(vec![3], true), terms(&[("ics", 1.0), ("res", 1.0)]), 1.0, 16, 1),
            ProblemKind::GinzburgLandau => (
                DerivativeRequest::new(vec![2, 2], true),
                terms(&[("u_ic", 100.0), ("v_ic", 100.0), ("ru", 1.0), ("rv", 1.0)]),
                5.0,
                16,
                5,
            ),
            ProblemKind::GrayScott => (
                DerivativeRequest::new(vec![2, 2], true),
                terms(&[("u_ic", 1.0), ("v_ic", 1.0), ("ru", 1.0), ("rv", 1.0)]),
                1.0,
                32,
                10,
            ),
        };
        Self { kind, domain, request, terms, causal_tol, chunks, windows }
    }

    pub fn dims(&self) -> usize {
        self.kind.dims()
    }

    pub fn components(&self) -> usize {
        self.kind.components()
    }

    pub fn ic_terms(&self) -> std::ops::Range<usize> {
        0..self.components()
    }

    pub fn residual_terms(&self) -> std::ops::Range<usize> {
        self.components()..self.terms.len()
    }

    /// Initial state at a physical point.
    pub fn initial_condition(&self, x: &[f64]) -> Vec<f64> {
        match self.kind {
            ProblemKind::AllenCahn => vec![x[0] * x[0] * (PI * x[0]).cos()],
            ProblemKind::Kdv => vec![(PI * x[0]).cos()],
            ProblemKind::GinzburgLandau => {
                let (px, py) = (PI * x[0], PI * x[1]);
                vec![
                    0.5 * px.cos() * py.cos() + 0.3 * (2.0 * px).sin() * py.sin(),
                    0.5 * px.sin() * py.cos() - 0.3 * (px + 2.0 * py).cos(),
                ]
            }
            ProblemKind::GrayScott => {
                let bump = |cx: f64, cy: f64| (((PI * (x[0] - cx)).cos() + (PI * (x[1] - cy)).cos() - 2.0) / 0.08).exp();
                let b = bump(0.0, 0.0) + 0.7 * bump(0.4, -0.3);
                vec![1.0 - 0.5 * b, 0.25 * b]
            }
        }
    }

    /// Initial state sampled on the unshifted torus grid of sizes `m`.
    pub fn ic_data(&self, m: &[usize]) -> IcData {
        let pts = crate::pyramid::grid_points(m, &vec![0.0; m.len()]);
        let mut values = vec![Vec::with_capacity(pts.len()); self.components()];
        for u in &pts {
            for (c, v) in self.initial_condition(&self.domain.from_torus(u)).into_iter().enumerate() {
                values[c].push(v);
            }
        }
        IcData { m: m.to_vec(), values }
    }

    /// Pointwise residuals from evaluated fields, one vector per residual term.
    pub fn residual(&self, f: &FieldValues) -> Vec<Vec<f64>> {
        let p = f.layout.points;
        let ch = |c: usize, dir: usize, o: usize| f.channel(c, dir, o);
        match self.kind {
            ProblemKind::AllenCahn => {
                let (u, ut, uxx) = (ch(0, 0, 0), ch(0, 1, 1), ch(0, 0, 2));
                vec![(0..p).map(|i| residual_allen_cahn(u[i], ut[i], uxx[i])).collect()]
            }
            ProblemKind::Kdv => {
                let (u, ut, ux, uxxx) = (ch(0, 0, 0), ch(0, 1, 1), ch(0, 0, 1), ch(0, 0, 3));
                vec![(0..p).map(|i| residual_kdv(u[i], ut[i], ux[i], uxxx[i])).collect()]
            }
            ProblemKind::GinzburgLandau | ProblemKind::GrayScott => {
                let get = |c: usize| {
                    let (v, t, xx, yy) = (ch(c, 0, 0), ch(c, 2, 1), ch(c, 0, 2), ch(c, 1, 2));
                    (v, t, xx.iter().zip(&yy).map(|(a, b)| a + b).collect::<Vec<_>>())
                };
                let (u, ut, lu) = get(0);
                let (v, vt, lv) = get(1);
                let f = if self.kind == ProblemKind::GinzburgLandau { residual_ginzburg_landau } else { residual_gray_scott };
                let (ru, rv): (Vec<f64>, Vec<f64>) =
                    (0..p).map(|i| f(FieldPair { u: u[i], v: v[i], u_t: ut[i], v_t: vt[i], lap_u: lu[i], lap_v: lv[i] })).unzip();
                vec![ru, rv]
            }
        }
    }

    /// Taped residual columns, one per residual term, from a model output in `layout`.
    pub fn residual_on_tape(&self, tape: &mut Tape, out: Var, layout: &JetLayout) -> Vec<Var> {
        let comps = self.components();
        let p = layout.points;
        let ch = |tape: &mut Tape, c: usize, dir: usize, o: usize| {
            let rows = tape.slice_rows(out, layout.channel(dir, o) * p, p);
            if comps == 1 {
                rows
            } else {
                tape.slice_cols(rows, c, 1)
            }
        };
        match self.kind {
            ProblemKind::AllenCahn => {
                let (u, ut, uxx) = (ch(tape, 0, 0, 0), ch(tape, 0, 1, 1), ch(tape, 0, 0, 2));
                let u2 = tape.square(u);
                let u3 = tape.mul(u2, u);
                let a = tape.scale(uxx, -AC_DIFFUSION);
                let b = tape.scale(u3, AC_REACTION);
                let c = tape.scale(u, -AC_REACTION);
                let r = tape.add(ut, a);
                let r = tape.add(r, b);
                vec![tape.add(r, c)]
            }
            ProblemKind::Kdv => {
                let (u, ut, ux, uxxx) = (ch(tape, 0, 0, 0), ch(tape, 0, 1, 1), ch(tape, 0, 0, 1), ch(tape, 0, 0, 3));
                let uux = tape.mul(u, ux);
                let d = tape.scale(uxxx, KDV_DISPERSION);
                let r = tape.add(ut, uux);
                vec![tape.add(r, d)]
            }
            ProblemKind::GinzburgLandau | ProblemKind::GrayScott => {
                let get = |tape: &mut Tape, c: usize| {
                    let (v, t, xx, yy) = (ch(tape, c, 0, 0), ch(tape, c, 2, 1), ch(tape, c, 0, 2), ch(tape, c, 1, 2));
                    (v, t, tape.add(xx, yy))
                };
                let (u, ut, lu) = get(tape, 0);
                let (v, vt, lv) = get(tape, 1);
                if self.kind == ProblemKind::GinzburgLandau {
                    let u2 = tape.square(u);
                    let v2 = tape.square(v);
                    let s = tape.add(u2, v2);
                    let us = tape.mul(u, s);
                    let vs = tape.mul(v, s);
                    // r_u = u_t - eps lap_u - k (u - u s + 1.5 v s)
                    let du = tape.scale(lu, -GL_EPSILON);
                    let a = tape.scale(u, -GL_KAPPA);
                    let b = tape.scale(us, GL_KAPPA);
                    let c = tape.scale(vs, -1.5 * GL_KAPPA);
                    let ru = tape.add(ut, du);
                    let ru = tape.add(ru, a);
                    let ru = tape.add(ru, b);
                    let ru = tape.add(ru, c);
                    // r_v = v_t - eps lap_v - k (v - v s - 1.5 u s)
                    let dv = tape.scale(lv, -GL_EPSILON);
                    let a = tape.scale(v, -GL_KAPPA);
                    let b = tape.scale(vs, GL_KAPPA);
                    let c = tape.scale(us, 1.5 * GL_KAPPA);
                    let rv = tape.add(vt, dv);
                    let rv = tape.add(rv, a);
                    let rv = tape.add(rv, b);
                    let rv = tape.add(rv, c);
                    vec![ru, rv]
                } else {
                    let [eu, ev, b1, b2, c1, c2] = GS_PARAMS;
                    let v2 = tape.square(v);
                    let uv2 = tape.mul(u, v2);
                    // r_u = u_t - eu lap_u - b1 + b1 u + c1 u v^2
                    let du = tape.scale(lu, -eu);
                    let a = tape.scale(u, b1);
                    let c = tape.scale(uv2, c1);
                    let ru = tape.add(ut, du);
                    let ru = tape.add_scalar(ru, -b1);
                    let ru = tape.add(ru, a);
                    let ru = tape.add(ru, c);
                    // r_v = v_t - ev lap_v + b2 v - c2 u v^2
                    let dv = tape.scale(lv, -ev);
                    let a = tape.scale(v, b2);
                    let c = tape.scale(uv2, -c2);
                    let rv = tape.add(vt, dv);
                    let rv = tape.add(rv, a);
                    let rv = tape.add(rv, c);
                    vec![ru, rv]
                }
            }
        }
    }
}

/// Two-field values and the derivatives the 2D residuals consume.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldPair {
    pub u: f64,
    pub v: f64,
    pub u_t: f64,
    pub v_t: f64,
    pub lap_u: f64,
    pub lap_v: f64,
}

pub fn residual_allen_cahn(u: f64, u_t: f64, u_xx: f64) -> f64 {
    u_t - AC_DIFFUSION * u_xx + AC_REACTION * u * u * u - AC_REACTION * u
}

pub fn residual_kdv(u: f64, u_t: f64, u_x: f64, u_xxx: f64) -> f64 {
    u_t + u * u_x + KDV_DISPERSION * u_xxx
}

/// `(u_t - RHS_u, v_t - RHS_v)`.
pub fn residual_ginzburg_landau(f: FieldPair) -> (f64, f64) {
    let s = f.u * f.u + f.v * f.v;
    let ru = f.u_t - GL_EPSILON * f.lap_u - GL_KAPPA * (f.u - f.u * s + 1.5 * f.v * s);
    let rv = f.v_t - GL_EPSILON * f.lap_v - GL_KAPPA * (f.v - f.v * s - 1.5 * f.u * s);
    (ru, rv)
}

/// `(u_t - RHS_u, v_t - RHS_v)`.
pub fn residual_gray_scott(f: FieldPair) -> (f64, f64) {
    let [eu, ev, b1, b2, c1, c2] = GS_PARAMS;
    let uv2 = f.u * f.v * f.v;
    let ru = f.u_t - (eu * f.lap_u + b1 * (1.0 - f.u) - c1 * uv2);
    let rv = f.v_t - (ev * f.lap_v - b2 * f.v + c2 * uv2);
    (ru, rv)
}

pub use crate::field::profile_residual as residual_burgers_profile;

/// Initial-condition targets on a structured torus grid.
#[derive(Clone, Debug, PartialEq)]
pub struct IcData {
    pub m: Vec<usize>,
    /// One row-major grid per component.
    pub values: Vec<Vec<f64>>,
}

impl IcData {
    /// Samples a model's values at its window start.
    pub fn from_model(model: &BeignetModel, m: &[usize], t_unit: f64) -> Result<Self> {
        let v = model.values_on_grid(m, t_unit)?;
        let comps = v.cols;
        Ok(Self { m: m.to_vec(), values: (0..comps).map(|c| (0..v.rows).map(|i| v.get(i, c)).collect()).collect() })
    }
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64
}

/// Per-component MSE of `u(x, t_lo)` against the initial data.
pub fn ic_loss(model: &BeignetModel, ic: &IcData) -> Result<Vec<f64>> {
    let v = model.values_on_grid(&ic.m, 0.0)?;
    check_ic(&v, ic)?;
    Ok(ic.values.iter().enumerate().map(|(c, target)| mse(&(0..v.rows).map(|i| v.get(i, c)).collect::<Vec<_>>(), target)).collect())
}

fn check_ic(v: &Tensor, ic: &IcData) -> Result<()> {
    if v.cols != ic.values.len() || ic.values.iter().any(|c| c.len() != v.rows) {
        return Err(Error::Shape(format!("{} components on {} points vs initial data {:?}", v.cols, v.rows, ic.values.iter().map(Vec::len).collect::<Vec<_>>())));
    }
    Ok(())
}

/// Taped per-component IC losses.
pub fn ic_loss_on_tape(tape: &mut Tape, model: &BeignetModel, vars: &ModelVars, ic: &IcData) -> Result<Vec<Var>> {
    let slice = Slice { t: 0.0, shift: vec![0.0; ic.m.len()] };
    let (out, _) = model.grid_on_tape(tape, vars, &DerivativeRequest::values(ic.m.len()), &ic.m, &[slice])?;
    check_ic(tape.value(out), ic)?;
    let comps = ic.values.len();
    let mut losses = Vec::with_capacity(comps);
    for (c, target) in ic.values.iter().enumerate() {
        let col = if comps == 1 { out } else { tape.slice_cols(out, c, 1) };
        let t = tape.constant(Tensor::column(target.clone()));
        let d = tape.sub(col, t);
        let sq = tape.square(d);
        losses.push(tape.mean(sq));
    }
    Ok(losses)
}

/// Mean squared error over all pixels and channels.
pub fn image_fit_loss(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if (pred.rows, pred.cols) != (target.rows, target.cols) {
        return Err(Error::Shape(format!("prediction {}x{} vs image {}x{}", pred.rows, pred.cols, target.rows, target.cols)));
    }
    Ok(mse(&pred.data, &target.data))
}

/// `mean(F^2 + (dF/d eta)^2)` over the batch, pointwise path.
pub fn profile_loss(ansatz: &ProfileAnsatz, eta: &[f64]) -> Result<f64> {
    if eta.is_empty() {
        return Err(Error::Shape("empty profile batch".into()));
    }
    let mut tape = Tape::new();
    let vars = ansatz.tape_params(&mut tape);
    let pv = ansatz.points_on_tape(&mut tape, &vars, eta)?;
    let l = ansatz.loss_on_tape(&mut tape, &pv, eta);
    let v = tape.value(l).data[0];
    if !v.is_finite() {
        return Err(Error::PoisonedLoss(format!("profile loss is {v}")));
    }
    Ok(v)
}
