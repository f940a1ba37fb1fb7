use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

/// Source offset of every element of `shape` when walking it in row-major
/// order with the given per-axis `steps`.
pub(super) fn offsets(shape: &[usize], steps: &[usize]) -> Vec<usize> {
    let n = numel(shape);
    let rank = shape.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..n {
        out.push(off);
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            off += steps[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= steps[ax] * shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

fn expand_steps(from: &[usize], to: &[usize]) -> Vec<usize> {
    strides(from)
        .into_iter()
        .zip(from.iter().zip(to))
        .map(|(s, (&f, &t))| if f == 1 && t != 1 { 0 } else { s })
        .collect()
}

impl<T: Scalar> Tape<T> {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if numel(shape) != x.len() || shape.contains(&0) {
            return Err(Error::shape("reshape", x.shape(), shape));
        }
        let value = Tensor::from_parts(shape.to_vec(), x.data().to_vec());
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Explicit broadcast: every axis of `a` must have extent 1 or match
    /// `shape`, and the ranks must agree.
    pub fn expand(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let ok = x.rank() == shape.len()
            && x.shape().iter().zip(shape).all(|(&f, &t)| f == t || (f == 1 && t > 0));
        if !ok {
            return Err(Error::shape("expand", x.shape(), shape));
        }
        let src = offsets(shape, &expand_steps(x.shape(), shape));
        let data = src.iter().map(|&o| x.data()[o]).collect();
        let value = Tensor::from_parts(shape.to_vec(), data);
        Ok(self.push(value, Op::Expand(a)))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::invalid("concat needs at least one input"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: base.len(),
            });
        }
        let mut out_shape = base.clone();
        out_shape[axis] = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            out_shape[axis] += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(numel(&out_shape));
        for o in 0..outer {
            for v in inputs {
                let x = self.value(*v);
                let block = x.shape()[axis] * inner;
                data.extend_from_slice(&x.data()[o * block..(o + 1) * block]);
            }
        }
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
        ))
    }
}

pub(super) fn expand_backward<T: Scalar>(input_shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let src = offsets(g.shape(), &expand_steps(input_shape, g.shape()));
    let mut out = vec![T::zero(); numel(input_shape)];
    for (&o, &d) in src.iter().zip(g.data()) {
        out[o] += d;
    }
    Tensor::from_parts(input_shape.to_vec(), out)
}

pub(super) fn concat_backward<T: Scalar>(
    shapes: &[&[usize]],
    axis: usize,
    g: &Tensor<T>,
) -> Vec<Tensor<T>> {
    let outer: usize = shapes[0][..axis].iter().product();
    let inner: usize = shapes[0][axis + 1..].iter().product();
    let mut parts: Vec<Vec<T>> = shapes.iter().map(|s| Vec::with_capacity(numel(s))).collect();
    let mut pos = 0;
    for _ in 0..outer {
        for (part, s) in parts.iter_mut().zip(shapes) {
            let block = s[axis] * inner;
            part.extend_from_slice(&g.data()[pos..pos + block]);
            pos += block;
        }
    }
    parts
        .into_iter()
        .zip(shapes)
        .map(|(p, s)| Tensor::from_parts(s.to_vec(), p))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn expand_tiles_unit_axes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let e = tape.expand(a, &[2, 3]).unwrap();
        assert_eq!(tape.value(e).data(), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = tape.sum_all(e);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[3.0, 3.0]);
    }

    #[test]
    fn expand_requires_matching_rank() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.expand(a, &[2, 3]).is_err());
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.expand(b, &[4, 3]).is_err());
    }

    #[test]
    fn concat_middle_axis_and_split_back() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.leaf(Tensor::new(&[2, 2, 2], (5..13).map(f64::from).collect()).unwrap());
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[2, 3, 2]);
        assert_eq!(
            tape.value(c).data(),
            &[1.0, 2.0, 5.0, 6.0, 7.0, 8.0, 3.0, 4.0, 9.0, 10.0, 11.0, 12.0]
        );
        let w = tape.constant(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let p = tape.mul(c, w).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 6.0, 7.0]);
        assert_eq!(
            g.get(b).unwrap().data(),
            &[2.0, 3.0, 4.0, 5.0, 8.0, 9.0, 10.0, 11.0]
        );
    }

    #[test]
    fn reshape_checks_element_count() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(tape.reshape(a, &[3, 2]).is_ok());
        assert!(tape.reshape(a, &[4, 2]).is_err());
    }
}
