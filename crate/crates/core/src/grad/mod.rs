//! Reverse-mode automatic differentiation on an explicit tape.

mod finite_diff;
mod primitive;
mod rng;
mod tape;
mod tensor;

pub use finite_diff::finite_diff_check;
pub use primitive::Primitive;
pub use rng::{Rng, Stream};
pub use tape::{Tape, TapeMode};
pub use tensor::{NodeId, Tensor};

/// Free-function shorthands for [`Tape::apply`]. They keep model code close
/// to the math it implements.
pub mod ops {
    use super::{Primitive, Tape, Tensor};
    use crate::error::Result;

    macro_rules! unary {
        ($name:ident, $prim:ident) => {
            pub fn $name(tape: &mut Tape, a: &Tensor) -> Result<Tensor> {
                tape.apply(Primitive::$prim, &[a])
            }
        };
    }
    macro_rules! binary {
        ($name:ident, $prim:ident) => {
            pub fn $name(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
                tape.apply(Primitive::$prim, &[a, b])
            }
        };
    }

    binary!(matmul, MatMul);
    binary!(add, Add);
    binary!(sub, Sub);
    binary!(mul, Mul);
    binary!(div, Div);
    binary!(sq_dist, SqDist);
    binary!(softmax_cross_entropy, SoftmaxCrossEntropy);
    unary!(transpose, Transpose);
    unary!(neg, Neg);
    unary!(relu, Relu);
    unary!(softplus, Softplus);
    unary!(exp, Exp);
    unary!(log, Log);
    unary!(sqrt, Sqrt);
    unary!(mean, Mean);
    unary!(sum, Sum);
    unary!(mean_axis0, MeanAxis0);
    unary!(sum_axis0, SumAxis0);

    /// a * scalar constant
    pub fn scale(tape: &mut Tape, a: &Tensor, c: f64) -> Result<Tensor> {
        let s = tape.scalar(c);
        tape.apply(Primitive::Mul, &[a, &s])
    }

    /// a + scalar constant
    pub fn shift(tape: &mut Tape, a: &Tensor, c: f64) -> Result<Tensor> {
        let s = tape.scalar(c);
        tape.apply(Primitive::Add, &[a, &s])
    }
}
