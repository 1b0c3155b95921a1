//! Reverse-mode automatic differentiation over dense matrices.
//!
//! Everything the model computes in a forward pass is recorded on a [`Tape`];
//! [`Tape::backward`] then produces exact gradients for every parameter
//! reachable from the scalar loss. Values are 64-bit reals throughout, and any
//! operation producing a non-finite entry is an error rather than a silent NaN.

mod matrix;
mod tape;

pub mod check;

pub use matrix::{Matrix, ParamRef};
pub use tape::{Mode, Tape, Var};

use rand::Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GradError {
    #[error("matrix construction: {rows}x{cols} needs {} values, got {len}", rows * cols)]
    BadConstruction { rows: usize, cols: usize, len: usize },
    #[error("{op}: incompatible shapes {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: (usize, usize),
        rhs: (usize, usize),
    },
    #[error("{op}: empty input list")]
    EmptyList { op: &'static str },
    #[error("{op}: produced non-finite values")]
    NonFinite { op: &'static str },
    #[error("backward root must be 1x1, got {shape:?}")]
    NotScalar { shape: (usize, usize) },
    #[error("backward already ran on this tape")]
    DoubleBackward,
    #[error("dropout rate {0} outside [0, 1)")]
    InvalidDropoutRate(f64),
    #[error("label {label} out of range for {num_cls} classes")]
    LabelOutOfRange { label: usize, num_cls: usize },
}

/// One fully-connected layer: weight in×out plus bias 1×out.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamRef,
    pub b: ParamRef,
}

impl Linear {
    /// Glorot-uniform weight, zero bias.
    pub fn glorot(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: Matrix::glorot(in_dim, out_dim, rng).into_param(),
            b: Matrix::zeros(1, out_dim).into_param(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.borrow().rows()
    }

    pub fn out_dim(&self) -> usize {
        self.w.borrow().cols()
    }

    pub fn params(&self) -> Vec<ParamRef> {
        vec![self.w.clone(), self.b.clone()]
    }

    pub fn param_count(&self) -> usize {
        self.w.borrow().len() + self.b.borrow().len()
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var, GradError> {
        let w = tape.param(&self.w)?;
        let b = tape.param(&self.b)?;
        tape.linear(x, w, b)
    }
}
