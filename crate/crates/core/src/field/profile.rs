//! Self-similar profile ansatz `U(z(eta)) = inner(eta) - inner(-eta) + tail(z)`, `z = sinh(eta)`.

use crate::autodiff::{JetLayout, Tape, Tensor, Var};
use crate::decoder::{DecoderParams, DenseVars};
use crate::error::{Error, Result};
use crate::pyramid::Slice;

use super::{BeignetModel, DerivativeRequest, ModelVars};

/// The learned part of the ansatz.
#[derive(Clone, Debug, PartialEq)]
pub enum Inner {
    /// Pyramid model over `eta in [-c, c]` mapped to `(eta + c) / (2c)`.
    Beignet(BeignetModel),
    /// Coordinate MLP fed `eta / c`.
    Mlp(DecoderParams),
}

#[derive(Clone, Debug)]
pub enum InnerVars {
    Beignet(ModelVars),
    Mlp(Vec<DenseVars>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileAnsatz {
    pub c: f64,
    pub lambda: f64,
    pub inner: Inner,
    pub tail: bool,
    /// Adds the exact solution `U = -z`; a test hook.
    pub exact_linear: bool,
}

/// `U`, `dU/d eta` and `d2U/d eta2` as taped columns.
#[derive(Clone, Copy, Debug)]
pub struct ProfileVars {
    pub u: Var,
    pub u_eta: Var,
    pub u_eta2: Var,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProfileValues {
    pub eta: Vec<f64>,
    pub u: Vec<f64>,
    /// `dU/dz`.
    pub u_z: Vec<f64>,
}

/// Stationary profile residual `-lambda U + ((1 + lambda) y + U) U_y`.
pub fn profile_residual(u: f64, u_y: f64, y: f64, lambda: f64) -> f64 {
    -lambda * u + ((1.0 + lambda) * y + u) * u_y
}

/// Far-field term `-(z/(1+z))^15 z^(lambda/(1+lambda))` and its first two `eta`-derivatives,
/// extended oddly to `eta < 0`.
pub fn tail(eta: f64, lambda: f64) -> [f64; 3] {
    let sign = if eta < 0.0 { -1.0 } else { 1.0 };
    let eta = eta.abs();
    let z = eta.sinh();
    if z == 0.0 {
        return [0.0; 3];
    }
    let (n, p) = (15.0, lambda / (1.0 + lambda));
    let r = z / (1.0 + z);
    let rn = r.powf(n);
    let t = -rn * z.powf(p);
    // dT/dz = -(z/(1+z))^n z^(p-1) (n + p + p z) / (1 + z)
    let a = rn * z.powf(p - 1.0) / (1.0 + z);
    let b = n + p + p * z;
    let t1 = -a * b;
    // a' = a ((n + p - 1)/z - (n + 1)/(1 + z))
    let da = a * ((n + p - 1.0) / z - (n + 1.0) / (1.0 + z));
    let t2 = -(da * b + a * p);
    let (ch, sh) = (eta.cosh(), z);
    // The eta-derivative of an odd function is even: only the value and second derivative flip.
    [sign * t, t1 * ch, sign * (t2 * ch * ch + t1 * sh)]
}

impl ProfileAnsatz {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.lambda > 0.0) {
            return Err(Error::config("profile", format!("need c > 0 and lambda > 0, got c={} lambda={}", self.c, self.lambda)));
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Vec<f64>> {
        match &self.inner {
            Inner::Beignet(m) => m.tensors(),
            Inner::Mlp(d) => d.tensors(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Vec<f64>> {
        match &mut self.inner {
            Inner::Beignet(m) => m.tensors_mut(),
            Inner::Mlp(d) => d.tensors_mut(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn tape_params(&self, tape: &mut Tape) -> InnerVars {
        match &self.inner {
            Inner::Beignet(m) => InnerVars::Beignet(m.tape_params(tape)),
            Inner::Mlp(d) => InnerVars::Mlp(d.tape_params(tape)),
        }
    }

    fn check_eta(&self, eta: &[f64]) -> Result<()> {
        if let Some(e) = eta.iter().find(|e| !(e.abs() <= self.c)) {
            return Err(Error::Domain(format!("eta {e} outside [-{c}, {c}]", c = self.c)));
        }
        Ok(())
    }

    /// Inner model with two `eta`-derivatives at the given points (layout: 3 channels).
    fn inner_points(&self, tape: &mut Tape, vars: &InnerVars, eta: &[f64]) -> Result<Var> {
        match (&self.inner, vars) {
            (Inner::Beignet(m), InnerVars::Beignet(v)) => {
                let pts: Vec<(Vec<f64>, f64)> = eta.iter().map(|&e| (vec![e], 0.0)).collect();
                Ok(m.points_on_tape(tape, v, &DerivativeRequest::new(vec![2], false), &pts)?.0)
            }
            (Inner::Mlp(d), InnerVars::Mlp(v)) => {
                let p = eta.len();
                let layout = JetLayout::new(p, vec![2]);
                let mut x = vec![0.0; 3 * p];
                for (i, &e) in eta.iter().enumerate() {
                    x[i] = e / self.c;
                    x[p + i] = 1.0 / self.c;
                }
                let xv = tape.constant(Tensor::new(3 * p, 1, x));
                d.forward(tape, v, xv, &layout)
            }
            _ => Err(Error::Shape("tape handles do not match the inner model".into())),
        }
    }

    /// Combines inner outputs at `+eta` (first half of each channel) and `-eta` (second
    /// half) with the tail and hook terms.
    fn assemble(&self, tape: &mut Tape, inner: Var, eta: &[f64]) -> ProfileVars {
        let h = eta.len();
        let ch = |tape: &mut Tape, c: usize, half: usize| tape.slice_rows(inner, c * 2 * h + half * h, h);
        let (p0, m0) = (ch(tape, 0, 0), ch(tape, 0, 1));
        let (p1, m1) = (ch(tape, 1, 0), ch(tape, 1, 1));
        let (p2, m2) = (ch(tape, 2, 0), ch(tape, 2, 1));
        let mut u = tape.sub(p0, m0);
        let mut u_eta = tape.add(p1, m1);
        let mut u_eta2 = tape.sub(p2, m2);
        let mut extra = [vec![0.0; h], vec![0.0; h], vec![0.0; h]];
        for (i, &e) in eta.iter().enumerate() {
            if self.tail {
                let t = tail(e, self.lambda);
                for k in 0..3 {
                    extra[k][i] += t[k];
                }
            }
            if self.exact_linear {
                extra[0][i] -= e.sinh();
                extra[1][i] -= e.cosh();
                extra[2][i] -= e.sinh();
            }
        }
        if self.tail || self.exact_linear {
            let [e0, e1, e2] = extra;
            let (c0, c1, c2) = (tape.constant(Tensor::column(e0)), tape.constant(Tensor::column(e1)), tape.constant(Tensor::column(e2)));
            u = tape.add(u, c0);
            u_eta = tape.add(u_eta, c1);
            u_eta2 = tape.add(u_eta2, c2);
        }
        ProfileVars { u, u_eta, u_eta2 }
    }

    /// Profile and derivatives at `eta` (any path; the inner model is queried pointwise).
    pub fn points_on_tape(&self, tape: &mut Tape, vars: &InnerVars, eta: &[f64]) -> Result<ProfileVars> {
        self.check_eta(eta)?;
        let both: Vec<f64> = eta.iter().copied().chain(eta.iter().map(|e| -e)).collect();
        let inner = self.inner_points(tape, vars, &both)?;
        Ok(self.assemble(tape, inner, eta))
    }

    /// Profile on the jittered half-grid `eta_j = c (2 j / m - 1) + 2 c delta`, `j in [m/2, m)`,
    /// using the FFT feature path. Mirror points come from the grid shifted by `-delta`.
    /// Returns the taped profile and the `eta` values.
    pub fn grid_on_tape(&self, tape: &mut Tape, vars: &InnerVars, m: usize, delta: f64) -> Result<(ProfileVars, Vec<f64>)> {
        let (Inner::Beignet(model), InnerVars::Beignet(v)) = (&self.inner, vars) else {
            return Err(Error::Unsupported("grid evaluation needs a pyramid inner model".into()));
        };
        if !(0.0..1.0 / m as f64).contains(&delta) {
            return Err(Error::Domain(format!("grid jitter {delta} outside [0, 1/{m})")));
        }
        let half = m / 2;
        let select: Vec<usize> = (half..m).chain((half..m).map(|j| m + (m - j) % m)).collect();
        let slices = [Slice { t: 0.0, shift: vec![delta] }, Slice { t: 0.0, shift: vec![-delta] }];
        let req = DerivativeRequest::new(vec![2], false);
        let (inner, _) = model.grid_subset_on_tape(tape, v, &req, &[m], &slices, Some(&select))?;
        let c = self.c;
        let eta: Vec<f64> = (half..m).map(|j| c * (2.0 * j as f64 / m as f64 - 1.0) + 2.0 * c * delta).collect();
        Ok((self.assemble(tape, inner, &eta), eta))
    }

    /// Taped residual `F` and `dF/d eta` columns.
    pub fn residual_on_tape(&self, tape: &mut Tape, pv: &ProfileVars, eta: &[f64]) -> (Var, Var) {
        let lam = self.lambda;
        let col = |tape: &mut Tape, f: &dyn Fn(f64) -> f64| tape.constant(Tensor::column(eta.iter().map(|&e| f(e)).collect()));
        let sech = col(tape, &|e| 1.0 / e.cosh());
        let coef = col(tape, &|e| (1.0 + lam) * e.sinh());
        let coef_eta = col(tape, &|e| (1.0 + lam) * e.cosh());
        let tanh = col(tape, &|e| e.tanh());
        let u_z = tape.mul(pv.u_eta, sech);
        let adv = tape.add(coef, pv.u);
        let adv_uz = tape.mul(adv, u_z);
        let lu = tape.scale(pv.u, -lam);
        let f = tape.add(lu, adv_uz);
        // dF/d eta = -lam U_eta + ((1+lam) cosh + U_eta) U_z + ((1+lam) z + U) (U_eta2 - U_eta tanh) sech
        let a = tape.scale(pv.u_eta, -lam);
        let s = tape.add(coef_eta, pv.u_eta);
        let b = tape.mul(s, u_z);
        let ut = tape.mul(pv.u_eta, tanh);
        let d = tape.sub(pv.u_eta2, ut);
        let d = tape.mul(d, sech);
        let c = tape.mul(adv, d);
        let ab = tape.add(a, b);
        let df = tape.add(ab, c);
        (f, df)
    }

    /// Mean of `F^2 + (dF/d eta)^2` on the tape.
    pub fn loss_on_tape(&self, tape: &mut Tape, pv: &ProfileVars, eta: &[f64]) -> Var {
        let (f, df) = self.residual_on_tape(tape, pv, eta);
        let f2 = tape.square(f);
        let df2 = tape.square(df);
        let s = tape.add(f2, df2);
        tape.mean(s)
    }

    /// `U` and `U_z` at `eta >= 0`.
    pub fn profile_eval(&self, eta: &[f64]) -> Result<ProfileValues> {
        if let Some(e) = eta.iter().find(|e| !(**e >= 0.0)) {
            return Err(Error::Domain(format!("profile queried at eta = {e} < 0")));
        }
        let mut tape = Tape::new();
        let vars = self.tape_params(&mut tape);
        let pv = self.points_on_tape(&mut tape, &vars, eta)?;
        let u = tape.value(pv.u).data.clone();
        let u_z = tape.value(pv.u_eta).data.iter().zip(eta).map(|(d, e)| d / e.cosh()).collect();
        Ok(ProfileValues { eta: eta.to_vec(), u, u_z })
    }

    /// Residual values `F` and `dF/d eta` at `eta`, evaluated pointwise.
    pub fn residuals(&self, eta: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut tape = Tape::new();
        let vars = self.tape_params(&mut tape);
        let mut f = Vec::with_capacity(eta.len());
        let mut df = Vec::with_capacity(eta.len());
        for chunk in eta.chunks(2048) {
            let pv = self.points_on_tape(&mut tape, &vars, chunk)?;
            let (a, b) = self.residual_on_tape(&mut tape, &pv, chunk);
            f.extend_from_slice(&tape.value(a).data);
            df.extend_from_slice(&tape.value(b).data);
        }
        Ok((f, df))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::decoder::{Architecture, DecoderConfig};
    use crate::field::{DomainMap, ModelConfig};
    use crate::pyramid::PyramidConfig;

    fn mlp(seed: u64) -> DecoderParams {
        DecoderParams::init(
            DecoderConfig {
                architecture: Architecture::VanillaMlp,
                width: 8,
                depth: 2,
                activation: Activation::Tanh,
                weight_fact: None,
                input_dim: 1,
                output_dim: 1,
            },
            seed,
        )
        .unwrap()
    }

    fn beignet(c: f64) -> BeignetModel {
        let mut p = PyramidConfig::dyadic(1, 4, 2, 2, 1);
        p.init_noise = 0.3;
        let cfg = ModelConfig {
            pyramid: p,
            decoder: DecoderConfig {
                architecture: Architecture::VanillaMlp,
                width: 6,
                depth: 2,
                activation: Activation::Tanh,
                weight_fact: None,
                input_dim: 0,
                output_dim: 1,
            },
            use_coords: false,
            time_input: false,
        };
        BeignetModel::init(cfg, DomainMap::new(vec![-c], vec![c], 0.0, 1.0).unwrap(), 4).unwrap()
    }

    fn ansatz(inner: Inner, tail: bool) -> ProfileAnsatz {
        ProfileAnsatz { c: 3.0, lambda: 0.5, inner, tail, exact_linear: false }
    }

    #[test]
    fn residual_arithmetic() {
        assert_eq!(profile_residual(-2.0, -1.0, 2.0, 0.5), 0.0);
        assert_eq!(profile_residual(0.0, 0.0, 1.3, 0.5), 0.0);
        let (u, uy, y, l) = (0.3, -1.7, 0.9, 0.5);
        assert!((profile_residual(u, uy, y, l) - (-0.15 + (1.35 + 0.3) * -1.7)).abs() < 1e-14);
    }

    #[test]
    fn zero_at_origin() {
        let a = ansatz(Inner::Mlp(mlp(1)), true);
        let v = a.profile_eval(&[0.0]).unwrap();
        assert_eq!(v.u[0], 0.0);
    }

    #[test]
    fn tail_closed_form_at_z_one() {
        let mut d = mlp(1);
        d.layers.last_mut().unwrap().v.iter_mut().for_each(|v| *v = 0.0);
        let a = ansatz(Inner::Mlp(d), true);
        let eta = 1f64.asinh();
        let v = a.profile_eval(&[eta]).unwrap();
        assert!((v.u[0] + 0.5f64.powi(15)).abs() < 1e-12);
    }

    #[test]
    fn tail_derivatives_match_finite_differences() {
        for &e in &[0.2, 1.3, 4.0, -0.7] {
            let t = tail(e, 0.5);
            let h = 1e-4;
            let (hi, lo) = (tail(e + h, 0.5), tail(e - h, 0.5));
            let d1 = (hi[0] - lo[0]) / (2.0 * h);
            let d2 = (hi[0] - 2.0 * t[0] + lo[0]) / (h * h);
            assert!((t[1] - d1).abs() < 1e-7 * (1.0 + d1.abs()), "{e}: {} vs {d1}", t[1]);
            assert!((t[2] - d2).abs() < 1e-5 * (1.0 + d2.abs()), "{e}: {} vs {d2}", t[2]);
        }
    }

    #[test]
    fn profile_is_odd() {
        for inner in [Inner::Mlp(mlp(2)), Inner::Beignet(beignet(3.0))] {
            let a = ansatz(inner, true);
            let mut tape = Tape::new();
            let vars = a.tape_params(&mut tape);
            let pv = a.points_on_tape(&mut tape, &vars, &[0.4, -0.4, 2.2, -2.2]).unwrap();
            let u = &tape.value(pv.u).data;
            assert!((u[0] + u[1]).abs() < 1e-12 && (u[2] + u[3]).abs() < 1e-12);
        }
    }

    #[test]
    fn derivative_in_z_matches_finite_differences() {
        let a = ansatz(Inner::Beignet(beignet(3.0)), true);
        for &eta in &[0.35, 1.1, 2.4] {
            let z = f64::sinh(eta);
            let h = 1e-6;
            let u_at = |z: f64| a.profile_eval(&[z.asinh()]).unwrap().u[0];
            let fd = (u_at(z + h) - u_at(z - h)) / (2.0 * h);
            let uz = a.profile_eval(&[eta]).unwrap().u_z[0];
            assert!((fd - uz).abs() < 1e-6 * (1.0 + uz.abs()), "{fd} vs {uz}");
        }
    }

    #[test]
    fn exact_hook_has_zero_loss() {
        let mut d = mlp(3);
        for l in &mut d.layers {
            l.v.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut a = ansatz(Inner::Mlp(d), false);
        a.exact_linear = true;
        let eta = [0.1, 0.9, 2.5];
        let mut tape = Tape::new();
        let vars = a.tape_params(&mut tape);
        let pv = a.points_on_tape(&mut tape, &vars, &eta).unwrap();
        let l = a.loss_on_tape(&mut tape, &pv, &eta);
        assert!(tape.value(l).data[0] < 1e-25);
    }

    #[test]
    fn loss_matches_pointwise_loop() {
        let a = ansatz(Inner::Beignet(beignet(3.0)), true);
        let eta = [0.05, 0.8, 1.7, 2.9];
        let mut tape = Tape::new();
        let vars = a.tape_params(&mut tape);
        let pv = a.points_on_tape(&mut tape, &vars, &eta).unwrap();
        let lv = a.loss_on_tape(&mut tape, &pv, &eta);
        let l = tape.value(lv).data[0];
        let (f, df) = a.residuals(&eta).unwrap();
        let mut acc = 0.0;
        for i in 0..4 {
            let one = a.residuals(&eta[i..i + 1]).unwrap();
            assert_eq!(one.0[0], f[i]);
            acc += f[i] * f[i] + df[i] * df[i];
            // Residual from plain values agrees with the taped form.
            let v = a.profile_eval(&eta[i..i + 1]).unwrap();
            let r = profile_residual(v.u[0], v.u_z[0], eta[i].sinh(), 0.5);
            assert!((r - f[i]).abs() < 1e-12 * (1.0 + r.abs()));
        }
        assert!((l - acc / 4.0).abs() < 1e-14 * (1.0 + l));
    }

    #[test]
    fn dfdeta_matches_finite_differences() {
        let a = ansatz(Inner::Beignet(beignet(3.0)), true);
        let h = 1e-5;
        for &e in &[0.4, 1.9] {
            let (f, df) = a.residuals(&[e - h, e, e + h]).unwrap();
            let fd = (f[2] - f[0]) / (2.0 * h);
            assert!((fd - df[1]).abs() < 1e-6 * (1.0 + fd.abs()), "{fd} vs {}", df[1]);
        }
    }

    #[test]
    fn grid_path_matches_points() {
        let a = ansatz(Inner::Beignet(beignet(3.0)), true);
        let mut tape = Tape::new();
        let vars = a.tape_params(&mut tape);
        let (g, eta) = a.grid_on_tape(&mut tape, &vars, 32, 0.011).unwrap();
        let p = a.points_on_tape(&mut tape, &vars, &eta).unwrap();
        for (x, y) in [(g.u, p.u), (g.u_eta, p.u_eta), (g.u_eta2, p.u_eta2)] {
            for (u, v) in tape.value(x).data.iter().zip(&tape.value(y).data) {
                assert!((u - v).abs() < 1e-10 * (1.0 + v.abs()), "{u} vs {v}");
            }
        }
        assert!(eta.iter().all(|&e| (0.0..3.0).contains(&e)));
    }
}
