//! Parameter-free regrouping between sequence and patch layouts.
//!
//! All three operations keep the row-major element order untouched, so on
//! the underlying buffer they are pure reshapes: merging concatenates
//! patches `2i` and `2i+1` along the temporal axis, splitting undoes it.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub fn segment_shape(shape: &[usize], patch: usize) -> Result<[usize; 3]> {
    match shape {
        &[len, dim] if patch > 0 && len % patch == 0 => Ok([len / patch, patch, dim]),
        &[len, _] => Err(Error::shape(format!(
            "cannot segment a sequence of length {} into patches of {}",
            len, patch
        ))),
        _ => Err(Error::shape(format!("segment expects [L, D], got {:?}", shape))),
    }
}

pub fn merged_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[s, p, d] if s % 2 == 0 => Ok([s / 2, 2 * p, d]),
        &[s, _, _] => Err(Error::shape(format!("cannot merge an odd number of patches ({})", s))),
        _ => Err(Error::shape(format!("merge expects [S, P, D], got {:?}", shape))),
    }
}

pub fn split_shape(shape: &[usize]) -> Result<[usize; 3]> {
    match shape {
        &[s, p, d] if p % 2 == 0 => Ok([2 * s, p / 2, d]),
        &[_, p, _] => Err(Error::shape(format!("cannot split patches of odd length {}", p))),
        _ => Err(Error::shape(format!("split expects [S, P, D], got {:?}", shape))),
    }
}

/// `[L, D]` into `[L/P, P, D]`.
pub fn segment(x: &Tensor, patch: usize) -> Result<Tensor> {
    let shape = segment_shape(x.shape(), patch)?;
    x.clone().reshape(shape.to_vec())
}

/// `[S, P, D]` into `[S/2, 2P, D]`.
pub fn merge_patches(x: &Tensor) -> Result<Tensor> {
    let shape = merged_shape(x.shape())?;
    x.clone().reshape(shape.to_vec())
}

/// `[S, P, D]` into `[2S, P/2, D]`.
pub fn split_patches(x: &Tensor) -> Result<Tensor> {
    let shape = split_shape(x.shape())?;
    x.clone().reshape(shape.to_vec())
}

pub fn segment_var(tape: &mut Tape, x: Var, patch: usize) -> Result<Var> {
    let shape = segment_shape(tape.shape(x), patch)?;
    tape.reshape(x, shape.to_vec())
}

pub fn merge_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = merged_shape(tape.shape(x))?;
    tape.reshape(x, shape.to_vec())
}

pub fn split_var(tape: &mut Tape, x: Var) -> Result<Var> {
    let shape = split_shape(tape.shape(x))?;
    tape.reshape(x, shape.to_vec())
}
