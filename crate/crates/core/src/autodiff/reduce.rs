use super::shape::offsets;
use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{numel, strides, Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reduce {
    Sum,
    Mean,
    Max,
}

/// Output shape with `axes` removed and, for each input element, the offset
/// of the output element it reduces into.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let kept: Vec<usize> = (0..shape.len()).filter(|a| !axes.contains(a)).collect();
    let out_shape: Vec<usize> = kept.iter().map(|&a| shape[a]).collect();
    let out_strides = strides(&out_shape);
    let mut steps = vec![0; shape.len()];
    for (k, &a) in kept.iter().enumerate() {
        steps[a] = out_strides[k];
    }
    (out_shape, offsets(shape, &steps))
}

impl<T: Scalar> Tape<T> {
    /// Reduces over the axis set `axes`, removing those axes from the shape.
    /// `Max` routes gradients to the first maximal element.
    pub fn reduce(&mut self, kind: Reduce, a: Var, axes: &[usize]) -> Result<Var> {
        let x = self.value(a);
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() {
            return Err(Error::invalid(format!("repeated axis in {axes:?}")));
        }
        if let Some(&bad) = sorted.iter().find(|&&ax| ax >= x.rank()) {
            return Err(Error::InvalidAxis {
                axis: bad,
                rank: x.rank(),
            });
        }
        let (out_shape, map) = reduction_map(x.shape(), &sorted);
        let n_out = numel(&out_shape);
        let mut argmax = Vec::new();
        let data = match kind {
            Reduce::Sum | Reduce::Mean => {
                let mut acc = vec![T::zero(); n_out];
                for (&o, &v) in map.iter().zip(x.data()) {
                    acc[o] += v;
                }
                if kind == Reduce::Mean {
                    let count = T::of((x.len() / n_out) as f64);
                    acc.iter_mut().for_each(|v| *v /= count);
                }
                acc
            }
            Reduce::Max => {
                let mut best = vec![T::neg_infinity(); n_out];
                argmax = vec![usize::MAX; n_out];
                for (i, (&o, &v)) in map.iter().zip(x.data()).enumerate() {
                    if argmax[o] == usize::MAX || v > best[o] {
                        best[o] = v;
                        argmax[o] = i;
                    }
                }
                best
            }
        };
        let value = Tensor::from_parts(out_shape, data);
        Ok(self.push(
            value,
            Op::Reduce {
                kind,
                input: a,
                axes: sorted,
                argmax,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(Reduce::Sum, a, &axes).expect("all axes are valid")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.value(a).rank()).collect();
        self.reduce(Reduce::Mean, a, &axes).expect("all axes are valid")
    }
}

pub(super) fn backward<T: Scalar>(
    kind: Reduce,
    input_shape: &[usize],
    axes: &[usize],
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let n = numel(input_shape);
    let data = match kind {
        Reduce::Max => {
            let mut d = vec![T::zero(); n];
            for (&i, &v) in argmax.iter().zip(g.data()) {
                d[i] += v;
            }
            d
        }
        Reduce::Sum | Reduce::Mean => {
            let (_, map) = reduction_map(input_shape, axes);
            let scale = if kind == Reduce::Mean {
                T::of(g.len() as f64 / n as f64)
            } else {
                T::one()
            };
            map.iter().map(|&o| g.data()[o] * scale).collect()
        }
    };
    Tensor::from_parts(input_shape.to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn mean_of_constant_is_constant() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[2, 3, 4], 2.5));
        let m = tape.mean_all(a);
        assert_eq!(tape.value(m).item(), 2.5);
        assert_eq!(tape.shape(m), &[] as &[usize]);
    }

    #[test]
    fn sum_of_vector() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = tape.sum_all(a);
        assert_eq!(tape.value(s).item(), 6.0);
    }

    #[test]
    fn max_over_axis_matches_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[3, 4], data).unwrap();
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(t.clone());
        let m = tape.reduce(Reduce::Max, a, &[1]).unwrap();
        for r in 0..3 {
            let mut best = f64::NEG_INFINITY;
            for c in 0..4 {
                best = best.max(t.get(&[r, c]));
            }
            assert_eq!(tape.value(m).get(&[r]), best);
        }
        let s = tape.sum_all(m);
        let g = tape.backward(s).unwrap();
        let grad = g.get(a).unwrap();
        for r in 0..3 {
            let hits = (0..4).filter(|&c| grad.get(&[r, c]) == 1.0).count();
            assert_eq!(hits, 1);
        }
    }

    #[test]
    fn max_ties_route_to_first_index() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::from_vec(vec![1.0, 3.0, 3.0, 0.0]));
        let m = tape.reduce(Reduce::Max, a, &[0]).unwrap();
        let g = tape.backward(m).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mean_over_trailing_axes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.leaf(Tensor::new(&[2, 2, 2], (1..9).map(f64::from).collect()).unwrap());
        let m = tape.reduce(Reduce::Mean, a, &[1, 2]).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5, 6.5]);
        let s = tape.sum_all(m);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[0.25; 8]);
    }

    #[test]
    fn invalid_axis_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(
            tape.reduce(Reduce::Sum, a, &[2]),
            Err(Error::InvalidAxis { axis: 2, rank: 2 })
        ));
        assert!(tape.reduce(Reduce::Sum, a, &[0, 0]).is_err());
    }
}
