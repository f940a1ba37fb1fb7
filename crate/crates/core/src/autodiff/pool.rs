use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Output extents of non-overlapping pooling (floor rule).
pub fn pooled_extents(input: [usize; 3], kernel: [usize; 3]) -> Option<[usize; 3]> {
    let mut out = [0; 3];
    for a in 0..3 {
        if kernel[a] == 0 || input[a] < kernel[a] {
            return None;
        }
        out[a] = input[a] / kernel[a];
    }
    Some(out)
}

impl<T: Scalar> Tape<T> {
    /// Max pooling over the trailing three axes with stride equal to the
    /// kernel. Leading axes (batch, channels) are carried through.
    pub fn maxpool3d(&mut self, x: Var, kernel: [usize; 3]) -> Result<Var> {
        let input = self.value(x);
        let r = input.rank();
        if r < 3 {
            return Err(Error::invalid(format!(
                "maxpool3d needs at least three axes, got {:?}",
                input.shape()
            )));
        }
        let ext = [input.shape()[r - 3], input.shape()[r - 2], input.shape()[r - 1]];
        let out_ext = pooled_extents(ext, kernel).ok_or_else(|| {
            Error::invalid(format!(
                "maxpool3d kernel {kernel:?} exceeds extents {ext:?}"
            ))
        })?;
        let planes = input.len() / ext.iter().product::<usize>();
        let [l, h, w] = ext;
        let [ol, oh, ow] = out_ext;
        let [kd, kh, kw] = kernel;
        let mut out = Vec::with_capacity(planes * ol * oh * ow);
        let mut argmax = Vec::with_capacity(planes * ol * oh * ow);
        let data = input.data();
        for p in 0..planes {
            let base = p * l * h * w;
            for z in 0..ol {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut best = T::neg_infinity();
                        let mut best_i = usize::MAX;
                        // Window visited in increasing linear index; strict
                        // comparison keeps the first maximum.
                        for a in 0..kd {
                            for b in 0..kh {
                                let row = base + ((z * kd + a) * h + y * kh + b) * w + xx * kw;
                                for (e, &v) in data[row..row + kw].iter().enumerate() {
                                    if best_i == usize::MAX || v > best {
                                        best = v;
                                        best_i = row + e;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let mut shape = input.shape().to_vec();
        shape[r - 3..].copy_from_slice(&out_ext);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::MaxPool3d { input: x, argmax }))
    }
}

pub(super) fn backward<T: Scalar>(input_shape: &[usize], argmax: &[u32], g: &Tensor<T>) -> Tensor<T> {
    let mut d = vec![T::zero(); input_shape.iter().product()];
    for (&i, &v) in argmax.iter().zip(g.data()) {
        d[i as usize] += v;
    }
    Tensor::from_parts(input_shape.to_vec(), d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn constant_input_gives_constant_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::full(&[2, 4, 4, 4], 1.25));
        let y = tape.maxpool3d(x, [2, 2, 2]).unwrap();
        assert_eq!(tape.shape(y), &[2, 2, 2, 2]);
        assert!(tape.value(y).data().iter().all(|&v| v == 1.25));
    }

    #[test]
    fn first_stage_shape_arithmetic() {
        assert_eq!(pooled_extents([16, 90, 180], [1, 2, 2]), Some([16, 45, 90]));
        assert_eq!(pooled_extents([1, 45, 90], [2, 2, 2]), None);
        assert_eq!(pooled_extents([3, 5, 5], [2, 2, 2]), Some([1, 2, 2]));
    }

    #[test]
    fn matches_loop_oracle_and_routes_gradient_to_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let data: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let t = Tensor::new(&[1, 4, 4, 4], data).unwrap();
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(t.clone());
        let y = tape.maxpool3d(x, [2, 2, 2]).unwrap();
        let mut hits = vec![0.0; 64];
        for z in 0..2 {
            for yy in 0..2 {
                for xx in 0..2 {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for a in 0..2 {
                        for b in 0..2 {
                            for e in 0..2 {
                                let idx = [0, 2 * z + a, 2 * yy + b, 2 * xx + e];
                                if t.get(&idx) > best {
                                    best = t.get(&idx);
                                    best_i = ((idx[1]) * 4 + idx[2]) * 4 + idx[3];
                                }
                            }
                        }
                    }
                    assert_eq!(tape.value(y).get(&[0, z, yy, xx]), best);
                    hits[best_i] = 1.0;
                }
            }
        }
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &hits[..]);
    }

    #[test]
    fn odd_extents_drop_trailing_elements() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 3], vec![1.0, 2.0, 9.0]).unwrap());
        let y = tape.maxpool3d(x, [1, 1, 2]).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0]);
    }

    #[test]
    fn ties_route_to_first_element() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(Tensor::zeros(&[1, 2, 2]));
        let y = tape.maxpool3d(x, [1, 2, 2]).unwrap();
        let s = tape.sum_all(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kernel_larger_than_extent_is_rejected() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 4, 4]));
        assert!(tape.maxpool3d(x, [2, 2, 2]).is_err());
    }
}
