use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

impl<T: Scalar> Tape<T> {
    /// Matrix product of an `m x k` and a `k x n` matrix.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 2 || y.rank() != 2 || x.shape()[1] != y.shape()[0] {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (m, k, n) = (x.shape()[0], x.shape()[1], y.shape()[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(false, false, m, k, n, T::one(), x.data(), y.data(), T::zero(), &mut out);
        let value = Tensor::from_parts(vec![m, n], out);
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    /// Batched matrix product of `batch x m x k` and `batch x k x n`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let ok = x.rank() == 3
            && y.rank() == 3
            && x.shape()[0] == y.shape()[0]
            && x.shape()[2] == y.shape()[1];
        if !ok {
            return Err(Error::shape("bmm", x.shape(), y.shape()));
        }
        let (batch, m, k, n) = (x.shape()[0], x.shape()[1], x.shape()[2], y.shape()[2]);
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            T::gemm(
                false,
                false,
                m,
                k,
                n,
                T::one(),
                &x.data()[i * m * k..(i + 1) * m * k],
                &y.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        let value = Tensor::from_parts(vec![batch, m, n], out);
        Ok(self.push(value, Op::BatchMatMul(a, b)))
    }

    /// Swaps the last two axes of a rank-2 or rank-3 tensor.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        if !(2..=3).contains(&x.rank()) {
            return Err(Error::invalid(format!(
                "transpose expects rank 2 or 3, got {:?}",
                x.shape()
            )));
        }
        let value = transpose_last2(x);
        Ok(self.push(value, Op::Transpose(a)))
    }
}

pub(super) fn transpose_last2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let r = x.rank();
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.len() / (rows * cols);
    let mut out = vec![T::zero(); x.len()];
    for b in 0..batch {
        let src = &x.data()[b * rows * cols..(b + 1) * rows * cols];
        let dst = &mut out[b * rows * cols..(b + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                dst[j * rows + i] = src[i * cols + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::from_parts(shape, out)
}

pub(super) fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let da = want_a.then(|| {
        let mut d = vec![T::zero(); m * k];
        T::gemm(false, true, m, n, k, T::one(), g.data(), b.data(), T::zero(), &mut d);
        Tensor::from_parts(vec![m, k], d)
    });
    let db = want_b.then(|| {
        let mut d = vec![T::zero(); k * n];
        T::gemm(true, false, k, m, n, T::one(), a.data(), g.data(), T::zero(), &mut d);
        Tensor::from_parts(vec![k, n], d)
    });
    (da, db)
}

pub(super) fn bmm_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    want_a: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>) {
    let (batch, m, k, n) = (a.shape()[0], a.shape()[1], a.shape()[2], b.shape()[2]);
    let da = want_a.then(|| {
        let mut d = vec![T::zero(); batch * m * k];
        for i in 0..batch {
            T::gemm(
                false,
                true,
                m,
                n,
                k,
                T::one(),
                &g.data()[i * m * n..(i + 1) * m * n],
                &b.data()[i * k * n..(i + 1) * k * n],
                T::zero(),
                &mut d[i * m * k..(i + 1) * m * k],
            );
        }
        Tensor::from_parts(a.shape().to_vec(), d)
    });
    let db = want_b.then(|| {
        let mut d = vec![T::zero(); batch * k * n];
        for i in 0..batch {
            T::gemm(
                true,
                false,
                k,
                m,
                n,
                T::one(),
                &a.data()[i * m * k..(i + 1) * m * k],
                &g.data()[i * m * n..(i + 1) * m * n],
                T::zero(),
                &mut d[i * k * n..(i + 1) * k * n],
            );
        }
        Tensor::from_parts(b.shape().to_vec(), d)
    });
    (da, db)
}
