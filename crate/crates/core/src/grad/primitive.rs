//! The primitive operations the tape understands.

use std::fmt;
use std::str::FromStr;

use crate::error::UdgError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Primitive {
    /// (n,k) x (k,m) -> (n,m)
    MatMul,
    /// (n,m) -> (m,n)
    Transpose,
    /// Element-count preserving shape change. Apply via [`Tape::reshape`],
    /// which carries the target shape.
    Reshape,
    Add,
    Sub,
    Neg,
    Mul,
    Div,
    Relu,
    Softplus,
    Exp,
    Log,
    Sqrt,
    /// Mean of all elements -> scalar.
    Mean,
    /// Sum of all elements -> scalar.
    Sum,
    /// (n,d) -> (d,), column means.
    MeanAxis0,
    /// (n,d) -> (d,), column sums.
    SumAxis0,
    /// Squared L2 distance between two same-shape tensors -> scalar.
    SqDist,
    /// Mean over rows of -sum_c t[i,c] * log_softmax(z)[i,c] for logits z and
    /// soft targets t, both (n,c) -> scalar.
    SoftmaxCrossEntropy,
}

impl Primitive {
    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Transpose => "transpose",
            Primitive::Reshape => "reshape",
            Primitive::Add => "add",
            Primitive::Sub => "sub",
            Primitive::Neg => "neg",
            Primitive::Mul => "mul",
            Primitive::Div => "div",
            Primitive::Relu => "relu",
            Primitive::Softplus => "softplus",
            Primitive::Exp => "exp",
            Primitive::Log => "log",
            Primitive::Sqrt => "sqrt",
            Primitive::Mean => "mean",
            Primitive::Sum => "sum",
            Primitive::MeanAxis0 => "mean_axis0",
            Primitive::SumAxis0 => "sum_axis0",
            Primitive::SqDist => "sq_dist",
            Primitive::SoftmaxCrossEntropy => "softmax_cross_entropy",
        }
    }

    pub fn arity(self) -> usize {
        match self {
            Primitive::MatMul
            | Primitive::Add
            | Primitive::Sub
            | Primitive::Mul
            | Primitive::Div
            | Primitive::SqDist
            | Primitive::SoftmaxCrossEntropy => 2,
            _ => 1,
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Primitive {
    type Err = UdgError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "matmul" => Primitive::MatMul,
            "transpose" => Primitive::Transpose,
            "reshape" => Primitive::Reshape,
            "add" => Primitive::Add,
            "sub" => Primitive::Sub,
            "neg" => Primitive::Neg,
            "mul" => Primitive::Mul,
            "div" => Primitive::Div,
            "relu" => Primitive::Relu,
            "softplus" => Primitive::Softplus,
            "exp" => Primitive::Exp,
            "log" => Primitive::Log,
            "sqrt" => Primitive::Sqrt,
            "mean" => Primitive::Mean,
            "sum" => Primitive::Sum,
            "mean_axis0" => Primitive::MeanAxis0,
            "sum_axis0" => Primitive::SumAxis0,
            "sq_dist" => Primitive::SqDist,
            "softmax_cross_entropy" => Primitive::SoftmaxCrossEntropy,
            other => return Err(UdgError::UnknownPrimitive(other.to_string())),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_roundtrip() {
        let all = [
            Primitive::MatMul,
            Primitive::Transpose,
            Primitive::Reshape,
            Primitive::Add,
            Primitive::Sub,
            Primitive::Neg,
            Primitive::Mul,
            Primitive::Div,
            Primitive::Relu,
            Primitive::Softplus,
            Primitive::Exp,
            Primitive::Log,
            Primitive::Sqrt,
            Primitive::Mean,
            Primitive::Sum,
            Primitive::MeanAxis0,
            Primitive::SumAxis0,
            Primitive::SqDist,
            Primitive::SoftmaxCrossEntropy,
        ];
        for p in all {
            assert_eq!(p.name().parse::<Primitive>().unwrap(), p);
        }
    }

    #[test]
    fn unknown_name_is_an_error() {
        let err = "conv2d".parse::<Primitive>().unwrap_err();
        assert!(matches!(err, UdgError::UnknownPrimitive(ref n) if n == "conv2d"));
    }
}
