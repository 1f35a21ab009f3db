//! Differentiable ops, each a [`Backward`](crate::Backward) impl plus a
//! recording method on [`Graph`](crate::Graph).

pub(crate) mod conv;
mod elementwise;
mod linear;
mod pool;
mod reduce;

use crate::TensorError;

pub(crate) fn expect_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<(), TensorError> {
    if shape.len() != rank {
        return Err(TensorError::Rank {
            op,
            expected: rank,
            got: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn expect_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<(), TensorError> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            op,
            expected: a.to_vec(),
            got: b.to_vec(),
        });
    }
    Ok(())
}
