//! Stride-1 3D convolution via im2col and GEMM, parallel over the batch.

use rayon::prelude::*;

use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    out_ch: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    padding: [usize; 3],
    output: [usize; 3],
}

impl Geometry {
    fn new(x: &[usize], w: &[usize], padding: [usize; 3]) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 || x[1] != w[1] {
            return Err(Error::shape("conv3d", x, w));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let padded = x[2 + a] + 2 * padding[a];
            if padded < w[2 + a] {
                return Err(Error::invalid(format!(
                    "conv3d output would be empty: input {x:?}, kernel {w:?}, padding {padding:?}"
                )));
            }
            output[a] = padded - w[2 + a] + 1;
        }
        Ok(Geometry {
            batch: x[0],
            in_ch: x[1],
            out_ch: w[0],
            input: [x[2], x[3], x[4]],
            kernel: [w[2], w[3], w[4]],
            padding,
            output,
        })
    }

    fn rows(&self) -> usize {
        self.in_ch * self.kernel.iter().product::<usize>()
    }

    fn positions(&self) -> usize {
        self.output.iter().product()
    }

    fn sample_len(&self) -> usize {
        self.in_ch * self.input.iter().product::<usize>()
    }

    /// A 1x1x1 unpadded kernel reads the input directly as its column matrix.
    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.padding == [0, 0, 0]
    }

    /// Valid output range along one axis for kernel offset `k`.
    fn valid(&self, axis: usize, k: usize) -> (usize, usize) {
        let p = self.padding[axis];
        let lo = p.saturating_sub(k).min(self.output[axis]);
        let hi = (self.input[axis] + p).saturating_sub(k).min(self.output[axis]);
        (lo, hi.max(lo))
    }

    /// Calls `f(row, dst_offset, src_offset, len)` for every contiguous run
    /// of in-bounds elements of the column matrix.
    fn for_each_run(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let [il, ih, iw] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [pd, ph, pw] = self.padding;
        let [_, oh, ow] = self.output;
        let mut row = 0;
        for c in 0..self.in_ch {
            for a in 0..kd {
                let (z0, z1) = self.valid(0, a);
                for b in 0..kh {
                    let (y0, y1) = self.valid(1, b);
                    for e in 0..kw {
                        let (x0, x1) = self.valid(2, e);
                        if x1 > x0 {
                            for z in z0..z1 {
                                let iz = z + a - pd;
                                for y in y0..y1 {
                                    let iy = y + b - ph;
                                    let dst = (z * oh + y) * ow + x0;
                                    let src = ((c * il + iz) * ih + iy) * iw + x0 + e - pw;
                                    f(row, dst, src, x1 - x0);
                                }
                            }
                        }
                        row += 1;
                    }
                }
            }
        }
        debug_assert_eq!(row, self.rows());
    }

    fn im2col<T: Scalar>(&self, x: &[T], col: &mut [T]) {
        let p = self.positions();
        col.fill(T::zero());
        self.for_each_run(|row, dst, src, len| {
            col[row * p + dst..row * p + dst + len].copy_from_slice(&x[src..src + len]);
        });
    }

    fn col2im<T: Scalar>(&self, col: &[T], dx: &mut [T]) {
        let p = self.positions();
        self.for_each_run(|row, dst, src, len| {
            let from = &col[row * p + dst..row * p + dst + len];
            for (d, &v) in dx[src..src + len].iter_mut().zip(from) {
                *d += v;
            }
        });
    }
}

impl<T: Scalar> Tape<T> {
    /// Stride-1 convolution of a `batch x in x L x H x W` input with an
    /// `out x in x d x k x k` weight, zero padding `padding` on each side.
    pub fn conv3d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        padding: [usize; 3],
    ) -> Result<Var> {
        let input = self.value(x);
        let w = self.value(weight);
        let geom = Geometry::new(input.shape(), w.shape(), padding)?;
        if let Some(b) = bias {
            let bs = self.shape(b);
            if bs != [geom.out_ch] {
                return Err(Error::shape("conv3d bias", bs, &[geom.out_ch]));
            }
        }
        let bias_data = bias.map(|b| self.value(b).data());
        let (rows, positions) = (geom.rows(), geom.positions());
        let out_len = geom.out_ch * positions;
        let mut out = vec![T::zero(); geom.batch * out_len];
        out.par_chunks_mut(out_len)
            .zip(input.data().par_chunks(geom.sample_len()))
            .for_each(|(dst, src)| {
                let owned;
                let col: &[T] = if geom.is_pointwise() {
                    src
                } else {
                    let mut buf = vec![T::zero(); rows * positions];
                    geom.im2col(src, &mut buf);
                    owned = buf;
                    &owned
                };
                T::gemm(
                    false,
                    false,
                    geom.out_ch,
                    rows,
                    positions,
                    T::one(),
                    w.data(),
                    col,
                    T::zero(),
                    dst,
                );
                if let Some(b) = bias_data {
                    for (o, chunk) in dst.chunks_mut(positions).enumerate() {
                        chunk.iter_mut().for_each(|v| *v += b[o]);
                    }
                }
            });
        let shape = vec![
            geom.batch,
            geom.out_ch,
            geom.output[0],
            geom.output[1],
            geom.output[2],
        ];
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(
            value,
            Op::Conv3d {
                input: x,
                weight,
                bias,
                padding,
            },
        ))
    }
}

pub(super) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(super) fn backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    padding: [usize; 3],
    g: &Tensor<T>,
    want_input: bool,
    want_weight: bool,
    want_bias: bool,
) -> ConvGrads<T> {
    let geom = Geometry::new(x.shape(), w.shape(), padding).expect("validated in forward");
    let (rows, positions) = (geom.rows(), geom.positions());
    let out_len = geom.out_ch * positions;
    let sample_len = geom.sample_len();

    let mut dx = want_input.then(|| vec![T::zero(); x.len()]);
    let per_sample = |(n, dx_n): (usize, Option<&mut [T]>)| -> Option<Vec<T>> {
        let src = &x.data()[n * sample_len..(n + 1) * sample_len];
        let gn = &g.data()[n * out_len..(n + 1) * out_len];
        let mut col_buf = Vec::new();
        let col: &[T] = if geom.is_pointwise() {
            src
        } else {
            if want_weight {
                col_buf = vec![T::zero(); rows * positions];
                geom.im2col(src, &mut col_buf);
            }
            &col_buf
        };
        let dw_n = want_weight.then(|| {
            let mut dw = vec![T::zero(); geom.out_ch * rows];
            T::gemm(false, true, geom.out_ch, positions, rows, T::one(), gn, col, T::zero(), &mut dw);
            dw
        });
        if let Some(dx_n) = dx_n {
            if geom.is_pointwise() {
                T::gemm(true, false, rows, geom.out_ch, positions, T::one(), w.data(), gn, T::zero(), dx_n);
            } else {
                let mut dcol = if col_buf.is_empty() {
                    vec![T::zero(); rows * positions]
                } else {
                    col_buf
                };
                T::gemm(true, false, rows, geom.out_ch, positions, T::one(), w.data(), gn, T::zero(), &mut dcol);
                geom.col2im(&dcol, dx_n);
            }
        }
        dw_n
    };

    let partial_dw: Vec<Option<Vec<T>>> = match dx.as_mut() {
        Some(dx) => dx
            .par_chunks_mut(sample_len)
            .enumerate()
            .map(|(n, d)| per_sample((n, Some(d))))
            .collect(),
        None => (0..geom.batch)
            .into_par_iter()
            .map(|n| per_sample((n, None)))
            .collect(),
    };

    // Summed in batch order so the result does not depend on thread count.
    let weight = want_weight.then(|| {
        let mut dw = vec![T::zero(); w.len()];
        for part in partial_dw.into_iter().flatten() {
            for (a, b) in dw.iter_mut().zip(part) {
                *a += b;
            }
        }
        #[cfg(any(test, feature = "fault-injection"))]
        if fault::conv_weight_grad_corrupted() {
            dw.iter_mut().for_each(|v| *v *= T::of(1.05));
        }
        Tensor::from_parts(w.shape().to_vec(), dw)
    });

    let bias = want_bias.then(|| {
        let mut db = vec![T::zero(); geom.out_ch];
        for n in 0..geom.batch {
            for (o, acc) in db.iter_mut().enumerate() {
                let start = n * out_len + o * positions;
                *acc += g.data()[start..start + positions].iter().copied().sum::<T>();
            }
        }
        Tensor::from_parts(vec![geom.out_ch], db)
    });

    ConvGrads {
        input: dx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        weight,
        bias,
    }
}

/// Deliberate corruption of the conv weight gradient on the current thread,
/// used as a negative control for the verification suite.
#[cfg(any(test, feature = "fault-injection"))]
pub mod fault {
    use std::cell::Cell;

    thread_local! {
        static CONV_WEIGHT_GRAD: Cell<bool> = const { Cell::new(false) };
    }

    pub fn corrupt_conv_weight_grad(on: bool) {
        CONV_WEIGHT_GRAD.with(|c| c.set(on));
    }

    pub(crate) fn conv_weight_grad_corrupted() -> bool {
        CONV_WEIGHT_GRAD.with(|c| c.get())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct seven-deep loop over (out, in, z, y, x, kernel) per sample.
    fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], pad: [usize; 3]) -> Tensor<f64> {
        let (n, c, l, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3], x.shape()[4]);
        let (o, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
        let (ol, oh, ow) = (l + 2 * pad[0] - kd + 1, h + 2 * pad[1] - kh + 1, wd + 2 * pad[2] - kw + 1);
        let mut out = Tensor::zeros(&[n, o, ol, oh, ow]);
        let mut idx = 0;
        for s in 0..n {
            for oc in 0..o {
                for z in 0..ol {
                    for y in 0..oh {
                        for xx in 0..ow {
                            let mut acc = b[oc];
                            for ic in 0..c {
                                for a in 0..kd {
                                    for bb in 0..kh {
                                        for e in 0..kw {
                                            let iz = z as isize + a as isize - pad[0] as isize;
                                            let iy = y as isize + bb as isize - pad[1] as isize;
                                            let ix = xx as isize + e as isize - pad[2] as isize;
                                            if iz < 0 || iy < 0 || ix < 0 || iz >= l as isize || iy >= h as isize || ix >= wd as isize {
                                                continue;
                                            }
                                            acc += w.get(&[oc, ic, a, bb, e])
                                                * x.get(&[s, ic, iz as usize, iy as usize, ix as usize]);
                                        }
                                    }
                                }
                            }
                            out.data_mut()[idx] = acc;
                            idx += 1;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn all_ones_kernel_sums_input() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[1, 1, 2, 2, 2], (1..=8).map(|v| v as f32).collect()).unwrap());
        let w = tape.constant(Tensor::ones(&[1, 1, 2, 2, 2]));
        let b = tape.constant(Tensor::zeros(&[1]));
        let y = tape.conv3d(x, w, Some(b), [0, 0, 0]).unwrap();
        assert_eq!(tape.value(y).data(), &[36.0]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 3, 4, 4]));
        let w = tape.constant(random(&mut rng, &[3, 2, 3, 3, 3]));
        let b = tape.constant(Tensor::zeros(&[3]));
        let y = tape.conv3d(x, w, Some(b), [1, 1, 1]).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(&mut rng, &[1, 2, 3, 4, 8]);
        let w = random(&mut rng, &[2, 2, 3, 3, 3]);
        let b = vec![0.3, -0.1];
        let want = conv_oracle(&x, &w, &b, [1, 1, 1]);
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x), tape.constant(w));
        let bv = tape.constant(Tensor::from_vec(b));
        let y = tape.conv3d(xv, wv, Some(bv), [1, 1, 1]).unwrap();
        assert!(tape.value(y).max_abs_diff(&want) <= 1e-12);
    }

    #[test]
    fn asymmetric_kernel_and_padding_match_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = random(&mut rng, &[2, 3, 2, 5, 3]);
        let w = random(&mut rng, &[4, 3, 1, 3, 2]);
        let b = vec![0.0; 4];
        for pad in [[0, 0, 0], [0, 1, 0], [1, 2, 1]] {
            let want = conv_oracle(&x, &w, &b, pad);
            let mut tape = Tape::<f64>::new();
            let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
            let y = tape.conv3d(xv, wv, None, pad).unwrap();
            assert!(tape.value(y).max_abs_diff(&want) <= 1e-12, "{pad:?}");
        }
    }

    #[test]
    fn dirac_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let x = random(&mut rng, &[1, 2, 3, 4, 5]);
        let mut w = Tensor::zeros(&[2, 2, 3, 3, 3]);
        for c in 0..2 {
            let i = (((c * 2 + c) * 3 + 1) * 3 + 1) * 3 + 1;
            w.data_mut()[i] = 1.0;
        }
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w));
        let y = tape.conv3d(xv, wv, None, [1, 1, 1]).unwrap();
        assert_eq!(tape.value(y), &x);
    }

    #[test]
    fn rejects_channel_mismatch_and_empty_output() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 2, 2, 2]));
        let w = tape.constant(Tensor::zeros(&[1, 3, 1, 1, 1]));
        assert!(tape.conv3d(x, w, None, [0, 0, 0]).is_err());
        let w = tape.constant(Tensor::zeros(&[1, 2, 3, 3, 3]));
        assert!(tape.conv3d(x, w, None, [0, 0, 0]).is_err());
    }

    #[test]
    fn backward_matches_oracle_adjoint() {
        // <dY, conv(x)> is linear in x and w, so its gradients are exactly the
        // adjoint products computed by brute force through the oracle.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let x = random(&mut rng, &[2, 2, 2, 3, 3]);
        let w = random(&mut rng, &[3, 2, 2, 2, 2]);
        let pad = [1, 0, 1];
        let mut tape = Tape::<f64>::new();
        let (xv, wv) = (tape.leaf(x.clone()), tape.leaf(w.clone()));
        let bv = tape.leaf(Tensor::zeros(&[3]));
        let y = tape.conv3d(xv, wv, Some(bv), pad).unwrap();
        let dy = random(&mut rng, tape.shape(y));
        let dyv = tape.constant(dy.clone());
        let p = tape.mul(y, dyv).unwrap();
        let s = tape.sum_all(p);
        let g = tape.backward(s).unwrap();

        let inner = |x: &Tensor<f64>, w: &Tensor<f64>| -> f64 {
            let y = conv_oracle(x, w, &[0.0; 3], pad);
            y.data().iter().zip(dy.data()).map(|(a, b)| a * b).sum()
        };
        let basis = |len: usize, i: usize, shape: &[usize]| {
            let mut d = vec![0.0; len];
            d[i] = 1.0;
            Tensor::new(shape, d).unwrap()
        };
        for i in 0..x.len() {
            let want = inner(&basis(x.len(), i, x.shape()), &w);
            assert!((g.get(xv).unwrap().data()[i] - want).abs() < 1e-12);
        }
        for i in 0..w.len() {
            let want = inner(&x, &basis(w.len(), i, w.shape()));
            assert!((g.get(wv).unwrap().data()[i] - want).abs() < 1e-12);
        }
        let db = g.get(bv).unwrap();
        let per_channel = dy.len() / (2 * 3);
        for o in 0..3 {
            let want: f64 = (0..2)
                .flat_map(|n| {
                    let start = (n * 3 + o) * per_channel;
                    dy.data()[start..start + per_channel].to_vec()
                })
                .sum();
            assert!((db.data()[o] - want).abs() < 1e-12);
        }
    }
}
