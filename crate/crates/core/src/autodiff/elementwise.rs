use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Elementwise {
    Add,
    Sub,
    Mul,
    Relu,
    Sigmoid,
    Exp,
}

impl Elementwise {
    pub fn is_binary(self) -> bool {
        matches!(self, Elementwise::Add | Elementwise::Sub | Elementwise::Mul)
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Scalar> Tape<T> {
    /// Applies an elementwise kind. Binary kinds need `b` with exactly the
    /// shape of `a`; unary kinds take no `b`.
    pub fn elementwise(&mut self, kind: Elementwise, a: Var, b: Option<Var>) -> Result<Var> {
        match (kind.is_binary(), b) {
            (true, Some(b)) => {
                let (x, y) = (self.value(a), self.value(b));
                if x.shape() != y.shape() {
                    return Err(Error::shape("elementwise", x.shape(), y.shape()));
                }
                let data = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .map(|(&p, &q)| match kind {
                        Elementwise::Add => p + q,
                        Elementwise::Sub => p - q,
                        _ => p * q,
                    })
                    .collect();
                let value = Tensor::from_parts(x.shape().to_vec(), data);
                Ok(self.push(value, Op::Binary(kind, a, b)))
            }
            (false, None) => {
                let value = self.value(a).map(|v| match kind {
                    Elementwise::Relu => v.max(T::zero()),
                    Elementwise::Sigmoid => sigmoid(v),
                    _ => v.exp(),
                });
                Ok(self.push(value, Op::Unary(kind, a)))
            }
            (true, None) => Err(Error::invalid(format!("{kind:?} needs two operands"))),
            (false, Some(_)) => Err(Error::invalid(format!("{kind:?} takes one operand"))),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Add, a, Some(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Sub, a, Some(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise(Elementwise::Mul, a, Some(b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Relu, a, None)
            .expect("unary kind")
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Sigmoid, a, None)
            .expect("unary kind")
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.elementwise(Elementwise::Exp, a, None)
            .expect("unary kind")
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = T::of(c);
        let value = self.value(a).map(|v| v * c);
        self.push(value, Op::Scale(a, c))
    }
}

pub(super) fn binary_backward<T: Scalar>(
    kind: Elementwise,
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
) -> [Tensor<T>; 2] {
    match kind {
        Elementwise::Add => [g.clone(), g.clone()],
        Elementwise::Sub => [g.clone(), g.map(|v| -v)],
        _ => {
            let zip = |x: &Tensor<T>| {
                let data = g.data().iter().zip(x.data()).map(|(&p, &q)| p * q).collect();
                Tensor::from_parts(g.shape().to_vec(), data)
            };
            [zip(b), zip(a)]
        }
    }
}

pub(super) fn unary_backward<T: Scalar>(
    kind: Elementwise,
    input: &Tensor<T>,
    output: &Tensor<T>,
    g: &Tensor<T>,
) -> Tensor<T> {
    let data = match kind {
        Elementwise::Relu => g
            .data()
            .iter()
            .zip(input.data())
            .map(|(&d, &x)| if x > T::zero() { d } else { T::zero() })
            .collect(),
        Elementwise::Sigmoid => g
            .data()
            .iter()
            .zip(output.data())
            .map(|(&d, &y)| d * y * (T::one() - y))
            .collect(),
        _ => g
            .data()
            .iter()
            .zip(output.data())
            .map(|(&d, &y)| d * y)
            .collect(),
    };
    Tensor::from_parts(g.shape().to_vec(), data)
}
