//! Exponential time differencing RK4 on periodic Fourier grids.

use std::f64::consts::PI;

use num_complex::Complex64;

use super::{ProblemKind, ProblemSpec, ReferenceSolution, GL_EPSILON, GL_KAPPA, GS_PARAMS, KDV_DISPERSION};
use crate::error::{Error, Result};
use crate::fft::{signed_mode, transform_axis};

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Grid points per spatial axis (power of two).
    pub modes: usize,
    /// Internal step, rounded down so that it divides the sampling interval.
    pub dt: f64,
    /// Output time samples including both ends.
    pub samples: usize,
}

impl SolverConfig {
    pub fn for_problem(kind: ProblemKind) -> Self {
        match kind {
            ProblemKind::AllenCahn => Self { modes: 512, dt: 1e-3, samples: 201 },
            ProblemKind::Kdv => Self { modes: 512, dt: 2e-4, samples: 251 },
            ProblemKind::GinzburgLandau => Self { modes: 128, dt: 1e-3, samples: 101 },
            ProblemKind::GrayScott => Self { modes: 128, dt: 2e-4, samples: 101 },
        }
    }
}

struct Grid {
    shape: Vec<usize>,
    /// Squared wavenumber magnitude per mode.
    k2: Vec<f64>,
    /// `i k_x` with the Nyquist entry zeroed.
    ikx: Vec<Complex64>,
}

impl Grid {
    fn new(shape: Vec<usize>, lengths: &[f64]) -> Self {
        let n: usize = shape.iter().product();
        let mut k2 = vec![0.0; n];
        let mut ikx = vec![Complex64::new(0.0, 0.0); n];
        for (i, (k2, ikx)) in k2.iter_mut().zip(&mut ikx).enumerate() {
            let mut rem = i;
            for a in (0..shape.len()).rev() {
                let m = rem % shape[a];
                rem /= shape[a];
                let s = signed_mode(m, shape[a]);
                let k = 2.0 * PI * s as f64 / lengths[a];
                *k2 += k * k;
                if a == 0 && 2 * s.unsigned_abs() as usize != shape[a] {
                    *ikx = Complex64::new(0.0, k);
                }
            }
        }
        Self { shape, k2, ikx }
    }

    fn forward(&self, data: &mut [Complex64]) {
        for a in 0..self.shape.len() {
            transform_axis(data, &self.shape, a, false);
        }
    }

    fn inverse(&self, data: &mut [Complex64]) {
        for a in 0..self.shape.len() {
            transform_axis(data, &self.shape, a, true);
        }
        let s = 1.0 / data.len() as f64;
        data.iter_mut().for_each(|v| *v *= s);
    }
}

/// Scalar ETDRK4 coefficients `(E, E/2, Q, f1, f2, f3)` by contour averaging.
fn coefficients(l: Complex64, h: f64) -> [Complex64; 6] {
    const POINTS: usize = 32;
    let hl = l * h;
    let (mut q, mut f1, mut f2, mut f3) = (Complex64::default(), Complex64::default(), Complex64::default(), Complex64::default());
    for j in 0..POINTS {
        let r = Complex64::from_polar(1.0, 2.0 * PI * (j as f64 + 0.5) / POINTS as f64);
        let z = hl + r;
        let ez = z.exp();
        let z3 = z * z * z;
        q += ((z / 2.0).exp() - 1.0) / z;
        f1 += (-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3;
        f2 += (2.0 + z + ez * (z - 2.0)) / z3;
        f3 += (-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3;
    }
    let s = h / POINTS as f64;
    [hl.exp(), (hl / 2.0).exp(), q * s, f1 * s, f2 * s, f3 * s]
}

/// Nonlinear remainder in spectral space.
struct System<'a> {
    grid: &'a Grid,
    kind: ProblemKind,
}

impl System<'_> {
    fn nonlinear(&self, state: &[Vec<Complex64>]) -> Vec<Vec<Complex64>> {
        let g = self.grid;
        let phys: Vec<Vec<Complex64>> = state
            .iter()
            .map(|s| {
                let mut p = s.clone();
                g.inverse(&mut p);
                p
            })
            .collect();
        let mut out: Vec<Vec<Complex64>> = match self.kind {
            ProblemKind::AllenCahn => vec![phys[0].iter().map(|u| Complex64::from(-5.0 * u.re.powi(3))).collect()],
            ProblemKind::Kdv => vec![phys[0].iter().map(|u| Complex64::from(-0.5 * u.re * u.re)).collect()],
            ProblemKind::GinzburgLandau => {
                let c = Complex64::new(1.0, 1.5) * -GL_KAPPA;
                vec![phys[0].iter().map(|a| c * a.norm_sqr() * a).collect()]
            }
            ProblemKind::GrayScott => {
                let [_, _, b1, _, c1, c2] = GS_PARAMS;
                let uv2: Vec<f64> = phys[0].iter().zip(&phys[1]).map(|(u, v)| u.re * v.re * v.re).collect();
                vec![
                    uv2.iter().map(|w| Complex64::from(b1 - c1 * w)).collect(),
                    uv2.iter().map(|w| Complex64::from(c2 * w)).collect(),
                ]
            }
        };
        for o in &mut out {
            g.forward(o);
        }
        if self.kind == ProblemKind::Kdv {
            out[0].iter_mut().zip(&g.ikx).for_each(|(v, k)| *v *= k);
        }
        out
    }
}

/// Integrates the problem's PDE from its initial condition and samples it uniformly in time.
pub fn generate_reference(spec: &ProblemSpec, cfg: &SolverConfig) -> Result<ReferenceSolution> {
    if !cfg.modes.is_power_of_two() || cfg.modes < 4 {
        return Err(Error::UnsupportedSize { axis: 0, size: cfg.modes });
    }
    if cfg.samples < 2 || !(cfg.dt > 0.0) {
        return Err(Error::config("solver", "need at least two samples and a positive step"));
    }
    let d = spec.dims();
    let dom = &spec.domain;
    let lengths: Vec<f64> = (0..d).map(|a| dom.hi[a] - dom.lo[a]).collect();
    let grid = Grid::new(vec![cfg.modes; d], &lengths);
    let n = grid.k2.len();
    let kind = spec.kind;

    let lin = |f: &dyn Fn(usize) -> Complex64| (0..n).map(f).collect::<Vec<_>>();
    let linear: Vec<Vec<Complex64>> = match kind {
        ProblemKind::AllenCahn => vec![lin(&|i| Complex64::from(-1e-4 * grid.k2[i] + 5.0))],
        ProblemKind::Kdv => vec![lin(&|i| {
            let ik = grid.ikx[i];
            -(ik * ik * ik) * KDV_DISPERSION
        })],
        ProblemKind::GinzburgLandau => vec![lin(&|i| Complex64::from(-GL_EPSILON * grid.k2[i] + GL_KAPPA))],
        ProblemKind::GrayScott => {
            let [eu, ev, b1, b2, _, _] = GS_PARAMS;
            vec![lin(&|i| Complex64::from(-eu * grid.k2[i] - b1)), lin(&|i| Complex64::from(-ev * grid.k2[i] - b2))]
        }
    };

    let axes: Vec<Vec<f64>> = (0..d).map(|a| (0..cfg.modes).map(|j| dom.lo[a] + lengths[a] * j as f64 / cfg.modes as f64).collect()).collect();
    let pts = crate::pyramid::grid_points(&grid.shape, &vec![0.0; d]);
    let ic: Vec<Vec<f64>> = pts.iter().map(|u| spec.initial_condition(&dom.from_torus(u))).collect();
    let mut state: Vec<Vec<Complex64>> = match kind {
        ProblemKind::GinzburgLandau => vec![ic.iter().map(|p| Complex64::new(p[0], p[1])).collect()],
        _ => (0..spec.components()).map(|c| ic.iter().map(|p| Complex64::from(p[c])).collect()).collect(),
    };
    for s in &mut state {
        grid.forward(s);
    }

    let interval = (dom.t_hi - dom.t_lo) / (cfg.samples - 1) as f64;
    let substeps = (interval / cfg.dt).ceil().max(1.0) as usize;
    let h = interval / substeps as f64;
    let coef: Vec<Vec<[Complex64; 6]>> = linear.iter().map(|l| l.iter().map(|&l| coefficients(l, h)).collect()).collect();
    let sys = System { grid: &grid, kind };

    let comps = spec.components();
    let mut fields = vec![Vec::with_capacity(cfg.samples * n); comps];
    let record = |state: &[Vec<Complex64>], fields: &mut Vec<Vec<f64>>| -> Result<()> {
        let phys: Vec<Vec<Complex64>> = state
            .iter()
            .map(|s| {
                let mut p = s.clone();
                grid.inverse(&mut p);
                p
            })
            .collect();
        match kind {
            ProblemKind::GinzburgLandau => {
                fields[0].extend(phys[0].iter().map(|a| a.re));
                fields[1].extend(phys[0].iter().map(|a| a.im));
            }
            _ => {
                for (c, p) in phys.iter().enumerate() {
                    fields[c].extend(p.iter().map(|a| a.re));
                }
            }
        }
        if fields.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(Error::PoisonedLoss(format!("{} integration diverged", kind.name())));
        }
        Ok(())
    };
    record(&state, &mut fields)?;
    for _ in 1..cfg.samples {
        for _ in 0..substeps {
            step(&sys, &coef, &mut state);
        }
        record(&state, &mut fields)?;
    }
    let t = (0..cfg.samples).map(|i| dom.t_lo + i as f64 * interval).collect();
    ReferenceSolution::new(kind.name(), t, axes, lengths, fields)
}

fn step(sys: &System, coef: &[Vec<[Complex64; 6]>], v: &mut [Vec<Complex64>]) {
    let comb = |a: &[Vec<Complex64>], b: &[Vec<Complex64>], f: &dyn Fn(&[Complex64; 6], Complex64, Complex64) -> Complex64| -> Vec<Vec<Complex64>> {
        a.iter()
            .zip(b)
            .zip(coef)
            .map(|((a, b), c)| a.iter().zip(b).zip(c).map(|((&x, &y), c)| f(c, x, y)).collect())
            .collect()
    };
    let nv = sys.nonlinear(v);
    let a = comb(v, &nv, &|c, x, n| c[1] * x + c[2] * n);
    let na = sys.nonlinear(&a);
    let b = comb(v, &na, &|c, x, n| c[1] * x + c[2] * n);
    let nb = sys.nonlinear(&b);
    let twice: Vec<Vec<Complex64>> = nb.iter().zip(&nv).map(|(b, v)| b.iter().zip(v).map(|(b, v)| 2.0 * b - v).collect()).collect();
    let c = comb(&a, &twice, &|c, x, n| c[1] * x + c[2] * n);
    let nc = sys.nonlinear(&c);
    for (comp, vc) in v.iter_mut().enumerate() {
        for (i, x) in vc.iter_mut().enumerate() {
            let k = &coef[comp][i];
            *x = k[0] * *x + nv[comp][i] * k[3] + (na[comp][i] + nb[comp][i]) * 2.0 * k[4] + nc[comp][i] * k[5];
        }
    }
}
