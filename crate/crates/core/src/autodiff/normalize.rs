use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Smallest probability fed to the log in [`Tape::cross_entropy`].
pub const PROB_FLOOR: f64 = 1e-30;

fn last_axis(shape: &[usize]) -> (usize, usize) {
    let width = shape.last().copied().unwrap_or(1);
    (shape.iter().product::<usize>() / width.max(1), width)
}

impl<T: Scalar> Tape<T> {
    /// Softmax of `a / tau` along the last axis, computed with max
    /// subtraction.
    pub fn softmax(&mut self, a: Var, tau: f64) -> Result<Var> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!(
                "softmax temperature must be positive, got {tau}"
            )));
        }
        let x = self.value(a);
        let (rows, width) = last_axis(x.shape());
        let inv = T::of(1.0 / tau);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let src = &x.data()[r * width..(r + 1) * width];
            let dst = &mut out[r * width..(r + 1) * width];
            let m = src.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = ((v - m) * inv).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::Softmax {
                input: a,
                tau: T::of(tau),
            },
        ))
    }

    /// `a / max(||a||, eps)` along the last axis. Vectors shorter than `eps`
    /// are divided by `eps`, so a zero vector stays zero.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::invalid(format!("eps must be positive, got {eps}")));
        }
        let eps = T::of(eps);
        let x = self.value(a);
        let (rows, width) = last_axis(x.shape());
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![T::zero(); x.len()];
        for r in 0..rows {
            let src = &x.data()[r * width..(r + 1) * width];
            let norm = src.iter().map(|&v| v * v).sum::<T>().sqrt();
            let denom = norm.max(eps);
            for (d, &v) in out[r * width..(r + 1) * width].iter_mut().zip(src) {
                *d = v / denom;
            }
            norms.push(norm);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.push(
            value,
            Op::L2Normalize {
                input: a,
                eps,
                norms,
            },
        ))
    }

    /// Mean negative log-likelihood of `targets` under a row-wise softmax of
    /// the `rows x classes` logits. When `subsets` is given, row `r` only
    /// competes over the listed columns, which must include its target.
    /// The per-row probability is floored at [`PROB_FLOOR`] inside the log.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        subsets: Option<&[Vec<usize>]>,
    ) -> Result<Var> {
        let x = self.value(logits);
        if x.rank() != 2 || x.shape()[0] != targets.len() {
            return Err(Error::shape("cross_entropy", x.shape(), &[targets.len()]));
        }
        let (rows, width) = (x.shape()[0], x.shape()[1]);
        if let Some(s) = subsets {
            if s.len() != rows {
                return Err(Error::invalid(format!(
                    "{} column subsets for {rows} rows",
                    s.len()
                )));
            }
        }
        let all: Vec<usize> = (0..width).collect();
        let mut probs = vec![T::zero(); rows * width];
        let mut total = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let cols = subsets.map_or(&all[..], |s| &s[r][..]);
            if t >= width || !cols.contains(&t) || cols.iter().any(|&c| c >= width) {
                return Err(Error::invalid(format!(
                    "row {r}: target {t} is not among its {width} candidate columns"
                )));
            }
            let row = &x.data()[r * width..(r + 1) * width];
            let m = cols.iter().fold(T::neg_infinity(), |m, &c| m.max(row[c]));
            let z: T = cols.iter().map(|&c| (row[c] - m).exp()).sum();
            let lse = m + z.ln();
            for &c in cols {
                probs[r * width + c] = (row[c] - lse).exp();
            }
            let nll = (lse - row[t]).as_f64();
            total += nll.min(-PROB_FLOOR.ln());
        }
        let value = Tensor::scalar(T::of(total / rows as f64));
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }
}

pub(super) fn softmax_backward<T: Scalar>(y: &Tensor<T>, tau: T, g: &Tensor<T>) -> Tensor<T> {
    let (rows, width) = last_axis(y.shape());
    let mut out = vec![T::zero(); y.len()];
    for r in 0..rows {
        let ys = &y.data()[r * width..(r + 1) * width];
        let gs = &g.data()[r * width..(r + 1) * width];
        let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
        for ((d, &yv), &gv) in out[r * width..(r + 1) * width].iter_mut().zip(ys).zip(gs) {
            *d = yv * (gv - dot) / tau;
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(super) fn l2_backward<T: Scalar>(
    y: &Tensor<T>,
    norms: &[T],
    eps: T,
    g: &Tensor<T>,
) -> Tensor<T> {
    let (rows, width) = last_axis(y.shape());
    let mut out = vec![T::zero(); y.len()];
    for (r, &norm) in norms.iter().enumerate().take(rows) {
        let ys = &y.data()[r * width..(r + 1) * width];
        let gs = &g.data()[r * width..(r + 1) * width];
        let dst = &mut out[r * width..(r + 1) * width];
        if norm >= eps {
            let dot: T = ys.iter().zip(gs).map(|(&a, &b)| a * b).sum();
            for ((d, &yv), &gv) in dst.iter_mut().zip(ys).zip(gs) {
                *d = (gv - yv * dot) / norm;
            }
        } else {
            for (d, &gv) in dst.iter_mut().zip(gs) {
                *d = gv / eps;
            }
        }
    }
    Tensor::from_parts(y.shape().to_vec(), out)
}

pub(super) fn cross_entropy_backward<T: Scalar>(
    shape: &[usize],
    targets: &[usize],
    probs: &[T],
    g: &Tensor<T>,
) -> Tensor<T> {
    let width = shape[1];
    let scale = g.item() / T::of(targets.len() as f64);
    let mut out: Vec<T> = probs.iter().map(|&p| p * scale).collect();
    for (r, &t) in targets.iter().enumerate() {
        out[r * width + t] -= scale;
    }
    Tensor::from_parts(shape.to_vec(), out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_equal_logits_is_uniform() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::full(&[3], 7.0));
        let s = tape.softmax(a, 1.0).unwrap();
        for &v in tape.value(s).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_single_element_is_one() {
        let mut tape = Tape::<f32>::new();
        for x in [-50.0f32, 0.0, 1e4] {
            let a = tape.constant(Tensor::from_vec(vec![x]));
            let s = tape.softmax(a, 0.1).unwrap();
            assert_eq!(tape.value(s).data(), &[1.0]);
        }
    }

    #[test]
    fn softmax_low_temperature_matches_direct_evaluation() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let s = tape.softmax(a, 0.1).unwrap();
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|x| (x / 0.1).exp()).collect();
        let z: f64 = e.iter().sum();
        for (got, want) in tape.value(s).data().iter().zip(e.iter().map(|v| v / z)) {
            assert!((*got as f64 - want).abs() < 1e-6);
        }
        let total: f32 = tape.value(s).data().iter().sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn softmax_rejects_non_positive_temperature() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        assert!(tape.softmax(a, 0.0).is_err());
        assert!(tape.softmax(a, -1.0).is_err());
    }

    #[test]
    fn l2_normalize_three_four_five() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_vec(vec![3.0, 4.0]));
        let n = tape.l2_normalize(a, 1e-12).unwrap();
        assert_eq!(tape.value(n).data(), &[0.6, 0.8]);
    }

    #[test]
    fn l2_normalize_keeps_zero_vector_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.leaf(Tensor::zeros(&[4]));
        let n = tape.l2_normalize(a, 1e-12).unwrap();
        assert_eq!(tape.value(n).data(), &[0.0; 4]);
        let s = tape.sum_all(n);
        let g = tape.backward(s).unwrap();
        assert!(g.get(a).unwrap().all_finite());
    }

    #[test]
    fn cross_entropy_uniform_is_log_n() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[2, 5]));
        let l = tape.cross_entropy(a, &[0, 3], None).unwrap();
        assert!((tape.value(l).item() - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_subset_must_hold_target() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(&[1, 4]));
        let subsets = vec![vec![1, 2]];
        assert!(tape.cross_entropy(a, &[0], Some(&subsets)).is_err());
        let subsets = vec![vec![0, 2]];
        let l = tape.cross_entropy(a, &[0], Some(&subsets)).unwrap();
        assert!((tape.value(l).item() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_clamps_vanishing_probability() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::new(&[1, 2], vec![0.0, 500.0]).unwrap());
        let l = tape.cross_entropy(a, &[0], None).unwrap();
        assert!((tape.value(l).item() + PROB_FLOOR.ln()).abs() < 1e-9);
    }
}
