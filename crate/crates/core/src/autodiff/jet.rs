use std::ops::{Add, Mul, Neg, Sub};

use super::compose;
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 3;

/// Value plus raw directional derivatives `c[1..=order]` along one direction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Jet {
    order: usize,
    c: [f64; 4],
}

impl Jet {
    pub fn new(order: usize, coeffs: &[f64]) -> Result<Self> {
        if order > MAX_ORDER {
            return Err(Error::Unsupported(format!("jet order {order} exceeds {MAX_ORDER}")));
        }
        if coeffs.len() > order + 1 {
            return Err(Error::Shape(format!("{} coefficients for order {order}", coeffs.len())));
        }
        let mut c = [0.0; 4];
        c[..coeffs.len()].copy_from_slice(coeffs);
        Ok(Self { order, c })
    }

    pub fn constant(order: usize, value: f64) -> Self {
        Self { order: order.min(MAX_ORDER), c: [value, 0.0, 0.0, 0.0] }
    }

    /// The identity jet `x + h` at `x`.
    pub fn variable(order: usize, value: f64) -> Self {
        let order = order.min(MAX_ORDER);
        let mut c = [value, 0.0, 0.0, 0.0];
        if order >= 1 {
            c[1] = 1.0;
        }
        Self { order, c }
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn value(&self) -> f64 {
        self.c[0]
    }

    /// Raw `m`-th derivative (zero above the jet order).
    pub fn coeff(&self, m: usize) -> f64 {
        if m <= self.order {
            self.c[m]
        } else {
            0.0
        }
    }

    pub fn coeffs(&self) -> &[f64] {
        &self.c[..=self.order]
    }

    /// Applies a scalar function given by its derivatives `[f, f', f'', f''', ..]` at the value.
    pub fn chain(&self, f: &[f64; 5]) -> Self {
        Self { order: self.order, c: compose(f, &self.c, self.order) }
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut c = self.c;
        c.iter_mut().for_each(|v| *v *= s);
        Self { order: self.order, c }
    }

    pub fn tanh(&self) -> Self {
        self.chain(&super::Activation::Tanh.derivs(self.c[0]))
    }

    pub fn sigmoid(&self) -> Self {
        self.chain(&super::Activation::Sigmoid.derivs(self.c[0]))
    }

    pub fn swish(&self) -> Self {
        self.chain(&super::Activation::Swish.derivs(self.c[0]))
    }

    pub fn exp(&self) -> Self {
        let e = self.c[0].exp();
        self.chain(&[e; 5])
    }

    pub fn sinh(&self) -> Self {
        let (s, c) = (self.c[0].sinh(), self.c[0].cosh());
        self.chain(&[s, c, s, c, s])
    }

    pub fn cosh(&self) -> Self {
        let (s, c) = (self.c[0].sinh(), self.c[0].cosh());
        self.chain(&[c, s, c, s, c])
    }

    pub fn sin(&self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.chain(&[s, c, -s, -c, s])
    }

    pub fn cos(&self) -> Self {
        let (s, c) = self.c[0].sin_cos();
        self.chain(&[c, -s, -c, s, c])
    }

    pub fn recip(&self) -> Self {
        let r = 1.0 / self.c[0];
        self.chain(&[r, -r * r, 2.0 * r * r * r, -6.0 * r * r * r * r, 24.0 * r.powi(5)])
    }

    /// Real power `x^p` (requires a positive value unless `p` is a non-negative integer).
    pub fn powf(&self, p: f64) -> Self {
        let x = self.c[0];
        let mut f = [0.0; 5];
        let mut coef = 1.0;
        for (k, slot) in f.iter_mut().enumerate() {
            let e = p - k as f64;
            *slot = if coef == 0.0 { 0.0 } else { coef * x.powf(e) };
            coef *= e;
        }
        self.chain(&f)
    }

    fn binary_order(&self, other: &Self) -> usize {
        self.order.min(other.order)
    }
}

impl Add for Jet {
    type Output = Jet;
    fn add(self, o: Jet) -> Jet {
        let order = self.binary_order(&o);
        let mut c = [0.0; 4];
        for m in 0..=order {
            c[m] = self.c[m] + o.c[m];
        }
        Jet { order, c }
    }
}

impl Sub for Jet {
    type Output = Jet;
    fn sub(self, o: Jet) -> Jet {
        self + (-o)
    }
}

impl Neg for Jet {
    type Output = Jet;
    fn neg(self) -> Jet {
        self.scale(-1.0)
    }
}

impl Mul for Jet {
    type Output = Jet;
    fn mul(self, o: Jet) -> Jet {
        let order = self.binary_order(&o);
        let mut c = [0.0; 4];
        for n in 0..=order {
            for i in 0..=n {
                c[n] += binom(n, i) * self.c[i] * o.c[n - i];
            }
        }
        Jet { order, c }
    }
}

impl Add<f64> for Jet {
    type Output = Jet;
    fn add(mut self, v: f64) -> Jet {
        self.c[0] += v;
        self
    }
}

impl Mul<f64> for Jet {
    type Output = Jet;
    fn mul(self, v: f64) -> Jet {
        self.scale(v)
    }
}

#[inline]
pub(crate) fn binom(n: usize, k: usize) -> f64 {
    const T: [[f64; 4]; 4] =
        [[1.0, 0.0, 0.0, 0.0], [1.0, 1.0, 0.0, 0.0], [1.0, 2.0, 1.0, 0.0], [1.0, 3.0, 3.0, 1.0]];
    T[n][k]
}

/// Elementary functions accepted by [`jet_eval`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Primitive {
    Add,
    Mul,
    Tanh,
    Exp,
    Reciprocal,
    Sigmoid,
    Swish,
    Power(f64),
}

impl Primitive {
    pub fn parse(name: &str) -> Result<Self> {
        Ok(match name {
            "add" => Primitive::Add,
            "mul" => Primitive::Mul,
            "tanh" => Primitive::Tanh,
            "exp" => Primitive::Exp,
            "reciprocal" | "recip" => Primitive::Reciprocal,
            "sigmoid" => Primitive::Sigmoid,
            "swish" => Primitive::Swish,
            other => {
                if let Some(p) = other.strip_prefix("pow:") {
                    let p = p.parse().map_err(|_| Error::Unsupported(format!("jet opcode `{other}`")))?;
                    Primitive::Power(p)
                } else {
                    return Err(Error::Unsupported(format!(
                        "jet opcode `{other}` (supported: add, mul, tanh, exp, reciprocal, sigmoid, swish, pow:<p>)"
                    )));
                }
            }
        })
    }

    fn arity(self) -> usize {
        match self {
            Primitive::Add | Primitive::Mul => 2,
            _ => 1,
        }
    }
}

/// Evaluates `f` on jet arguments with exact truncated derivative propagation.
pub fn jet_eval(f: Primitive, args: &[Jet]) -> Result<Jet> {
    if args.len() != f.arity() {
        return Err(Error::Unsupported(format!("{f:?} takes {} jet arguments, got {}", f.arity(), args.len())));
    }
    let x = args[0];
    Ok(match f {
        Primitive::Add => x + args[1],
        Primitive::Mul => x * args[1],
        Primitive::Tanh => x.tanh(),
        Primitive::Exp => x.exp(),
        Primitive::Reciprocal => x.recip(),
        Primitive::Sigmoid => x.sigmoid(),
        Primitive::Swish => x.swish(),
        Primitive::Power(p) => x.powf(p),
    })
}

/// A value with independent pure-direction derivative channels (e.g. `x, xx, t`).
///
/// Direction `d` carries derivatives up to `orders[d]`; no mixed derivatives are held.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiJet {
    pub value: f64,
    orders: Vec<usize>,
    /// `derivs[d][m-1]` is the raw `m`-th derivative along direction `d`.
    derivs: Vec<[f64; 3]>,
}

impl MultiJet {
    pub fn constant(orders: &[usize], value: f64) -> Self {
        Self { value, orders: orders.to_vec(), derivs: vec![[0.0; 3]; orders.len()] }
    }

    /// Independent coordinate along direction `dir` (unit first derivative there).
    pub fn coordinate(orders: &[usize], dir: usize, value: f64) -> Self {
        let mut j = Self::constant(orders, value);
        if orders[dir] >= 1 {
            j.derivs[dir][0] = 1.0;
        }
        j
    }

    pub fn orders(&self) -> &[usize] {
        &self.orders
    }

    pub fn derivative(&self, dir: usize, order: usize) -> f64 {
        match order {
            0 => self.value,
            m if m <= self.orders[dir] => self.derivs[dir][m - 1],
            _ => 0.0,
        }
    }

    pub fn set_derivative(&mut self, dir: usize, order: usize, v: f64) {
        assert!(order >= 1 && order <= self.orders[dir], "order {order} not carried by direction {dir}");
        self.derivs[dir][order - 1] = v;
    }

    /// The pure jet along one direction.
    pub fn direction(&self, dir: usize) -> Jet {
        let o = self.orders[dir];
        let d = self.derivs[dir];
        Jet { order: o, c: [self.value, d[0], d[1], d[2]] }
    }

    fn from_directions(orders: &[usize], jets: &[Jet]) -> Self {
        let value = jets.first().map_or(0.0, |j| j.c[0]);
        let derivs = jets.iter().map(|j| [j.c[1], j.c[2], j.c[3]]).collect();
        Self { value, orders: orders.to_vec(), derivs }
    }

    fn zip_with(&self, o: &Self, f: impl Fn(Jet, Jet) -> Jet) -> Self {
        assert_eq!(self.orders, o.orders, "multijet layouts differ");
        if self.orders.is_empty() {
            let v = f(Jet::constant(0, self.value), Jet::constant(0, o.value));
            return Self { value: v.value(), orders: vec![], derivs: vec![] };
        }
        let jets: Vec<Jet> =
            (0..self.orders.len()).map(|d| f(self.direction(d), o.direction(d))).collect();
        Self::from_directions(&self.orders, &jets)
    }

    pub fn map(&self, f: impl Fn(Jet) -> Jet) -> Self {
        if self.orders.is_empty() {
            let v = f(Jet::constant(0, self.value));
            return Self { value: v.value(), orders: vec![], derivs: vec![] };
        }
        let jets: Vec<Jet> = (0..self.orders.len()).map(|d| f(self.direction(d))).collect();
        Self::from_directions(&self.orders, &jets)
    }

    pub fn add(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a + b)
    }

    pub fn sub(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a - b)
    }

    pub fn mul(&self, o: &Self) -> Self {
        self.zip_with(o, |a, b| a * b)
    }
}
