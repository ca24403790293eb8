//! Reverse-mode automatic differentiation over dense `f32` tensors.
//!
//! Values live on a [`Tape`]; every primitive application is recorded with
//! its inputs. Backward rules are compositions of the same primitives, so
//! gradients computed with `create_graph = true` can be differentiated again
//! (double backprop, as needed by a gradient penalty).

mod kernels;
mod ops;
mod tape;

pub use kernels::NORM_EPS;
pub use ops::{Attrs, Op};
pub use tape::{Gradients, Tape, Var};
