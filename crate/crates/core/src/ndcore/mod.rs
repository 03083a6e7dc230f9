//! Dense `f64` tensors and a reverse-mode tape.
//!
//! Storage is contiguous row-major with no strides or views. The only
//! broadcasting is scalar-with-tensor plus the explicit row/column ops
//! ([`Tape::scale_rows`], [`Tape::scale_cols`], [`Tape::add_row`]).

mod tape;
mod tensor;

pub use tape::{BinaryOp, CustomOp, ReduceOp, Tape, UnaryOp, Var};
pub use tensor::Tensor;
