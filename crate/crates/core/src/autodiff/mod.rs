//! Differentiation machinery.
//!
//! Two mechanisms live here. [`Jet`] and [`MultiJet`] are truncated Taylor objects
//! (raw derivatives, not divided by `m!`) used to push spatial and temporal
//! derivatives forward through the decoder. [`Tape`] is a reverse-mode engine over
//! dense tensors used for the training gradient; jet coefficients are ordinary taped
//! values, so derivatives of jet-computed quantities come out of the same backward
//! pass.

mod jet;
mod tape;

pub use jet::{jet_eval, Jet, MultiJet, Primitive, MAX_ORDER};
pub use tape::{Gradients, JetLayout, Tape, Tensor, Var};

use serde::{Deserialize, Serialize};

/// Pointwise nonlinearities understood by both jets and the tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Swish,
    Sigmoid,
    Relu,
    Identity,
}

impl Activation {
    /// `[f, f', f'', f''', f'''']` at `z`.
    #[inline]
    pub fn derivs(self, z: f64) -> [f64; 5] {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                let d2 = -2.0 * t * d1;
                let d3 = -2.0 * d1 * d1 - 2.0 * t * d2;
                let d4 = -6.0 * d1 * d2 - 2.0 * t * d3;
                [t, d1, d2, d3, d4]
            }
            Activation::Sigmoid => sigmoid_derivs(z),
            Activation::Swish => {
                let [s, s1, s2, s3, s4] = sigmoid_derivs(z);
                [z * s, s + z * s1, 2.0 * s1 + z * s2, 3.0 * s2 + z * s3, 4.0 * s3 + z * s4]
            }
            Activation::Relu => {
                if z > 0.0 {
                    [z, 1.0, 0.0, 0.0, 0.0]
                } else {
                    [0.0; 5]
                }
            }
            Activation::Identity => [z, 1.0, 0.0, 0.0, 0.0],
        }
    }

    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Sigmoid => sigmoid(z),
            Activation::Swish => z * sigmoid(z),
            Activation::Relu => z.max(0.0),
            Activation::Identity => z,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Swish => "swish",
            Activation::Sigmoid => "sigmoid",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn sigmoid_derivs(z: f64) -> [f64; 5] {
    let s = sigmoid(z);
    let s1 = s * (1.0 - s);
    let s2 = s1 * (1.0 - 2.0 * s);
    let s3 = s2 * (1.0 - 2.0 * s) - 2.0 * s1 * s1;
    let s4 = s3 * (1.0 - 2.0 * s) - 6.0 * s1 * s2;
    [s, s1, s2, s3, s4]
}

/// Faà di Bruno composition of `f` (given by its derivatives at `x[0]`) with the
/// jet coefficients `x[0..=order]`.
#[inline]
pub(crate) fn compose(f: &[f64; 5], x: &[f64; 4], order: usize) -> [f64; 4] {
    let mut y = [f[0], 0.0, 0.0, 0.0];
    if order >= 1 {
        y[1] = f[1] * x[1];
    }
    if order >= 2 {
        y[2] = f[2] * x[1] * x[1] + f[1] * x[2];
    }
    if order >= 3 {
        y[3] = f[3] * x[1] * x[1] * x[1] + 3.0 * f[2] * x[1] * x[2] + f[1] * x[3];
    }
    y
}
