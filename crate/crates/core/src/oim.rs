//! Online instance matching: a lookup table of labeled identity features
//! and a FIFO queue of unlabeled ones, scored by a tempered softmax.

use std::collections::VecDeque;

use rand::Rng;

use crate::autodiff::{Tape, Var, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct OimState {
    /// `classes x dim`, zero until a class is first seen.
    table: Tensor<f32>,
    queue: VecDeque<Vec<f32>>,
    capacity: usize,
    tau: f64,
    momentum: f64,
}

impl OimState {
    pub fn new(classes: usize, dim: usize, capacity: usize, tau: f64, momentum: f64) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::invalid("OIM table needs at least one class and one dimension"));
        }
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::invalid(format!("momentum must lie in [0, 1], got {momentum}")));
        }
        Ok(OimState {
            table: Tensor::zeros(&[classes, dim]),
            queue: VecDeque::new(),
            capacity,
            tau,
            momentum,
        })
    }

    /// Rebuilds a state from stored parts; queue rows must match `dim`.
    pub fn from_parts(table: Tensor<f32>, queue: Vec<Vec<f32>>, capacity: usize, tau: f64, momentum: f64) -> Result<Self> {
        if table.rank() != 2 {
            return Err(Error::invalid(format!("OIM table must be 2-D, got {:?}", table.shape())));
        }
        let mut state = OimState::new(table.shape()[0], table.shape()[1], capacity, tau, momentum)?;
        if queue.len() > capacity || queue.iter().any(|q| q.len() != state.dim()) {
            return Err(Error::invalid("OIM queue does not fit the table or capacity"));
        }
        state.table = table;
        state.queue = queue.into();
        Ok(state)
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn table(&self) -> &Tensor<f32> {
        &self.table
    }

    pub fn queue(&self) -> impl Iterator<Item = &[f32]> {
        self.queue.iter().map(Vec::as_slice)
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    /// Table columns followed by queue entries.
    pub fn candidates(&self) -> usize {
        self.classes() + self.queue.len()
    }

    pub fn candidate(&self, i: usize) -> &[f32] {
        let (c, d) = (self.classes(), self.dim());
        if i < c {
            &self.table.data()[i * d..(i + 1) * d]
        } else {
            &self.queue[i - c]
        }
    }

    /// All candidates as a `candidates x dim` matrix.
    pub fn candidate_matrix<T: Scalar>(&self) -> Tensor<T> {
        let mut data: Vec<T> = self.table.data().iter().map(|&v| T::of(v as f64)).collect();
        for q in &self.queue {
            data.extend(q.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::from_parts(vec![self.candidates(), self.dim()], data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OimProbabilities {
    pub labeled: Vec<f64>,
    pub unlabeled: Vec<f64>,
}

impl OimProbabilities {
    pub fn total(&self) -> f64 {
        self.labeled.iter().chain(&self.unlabeled).sum()
    }
}

/// Joint softmax of `candidate . v / tau` over table and queue, in 64-bit.
pub fn oim_probabilities<T: Scalar>(v: &[T], state: &OimState) -> Result<OimProbabilities> {
    if v.len() != state.dim() {
        return Err(Error::shape("oim_probabilities", &[v.len()], &[state.dim()]));
    }
    let logits: Vec<f64> = (0..state.candidates())
        .map(|i| {
            let e = state.candidate(i);
            e.iter().zip(v).map(|(&a, b)| a as f64 * b.as_f64()).sum::<f64>() / state.tau
        })
        .collect();
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let z: f64 = e.iter().sum();
    let mut p: Vec<f64> = e.iter().map(|x| x / z).collect();
    let unlabeled = p.split_off(state.classes());
    Ok(OimProbabilities { labeled: p, unlabeled })
}

pub struct OimLoss {
    /// Mean negative log-likelihood over the rows.
    pub loss: Var,
    /// Some true-class probability fell below the log floor.
    pub underflow: bool,
}

/// Loss of descriptors `v` (`rows x dim` or a single vector) against their
/// class `labels`. The table and queue enter as constants, so only `v`
/// receives a gradient. `samples` restricts each row's denominator to the
/// listed candidate columns, see [`subsample_partition`].
pub fn oim_loss<T: Scalar>(
    tape: &mut Tape<T>,
    v: Var,
    labels: &[usize],
    state: &OimState,
    samples: Option<&[Vec<usize>]>,
) -> Result<OimLoss> {
    let vs = tape.shape(v).to_vec();
    let v2 = match vs.len() {
        1 => tape.reshape(v, &[1, vs[0]])?,
        2 => v,
        _ => return Err(Error::invalid(format!("oim_loss expects vectors, got {vs:?}"))),
    };
    let rows = tape.shape(v2)[0];
    if tape.shape(v2)[1] != state.dim() || rows != labels.len() {
        return Err(Error::shape("oim_loss", &vs, &[labels.len(), state.dim()]));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= state.classes()) {
        return Err(Error::invalid(format!(
            "label {bad} outside the {} table classes",
            state.classes()
        )));
    }
    let table = tape.constant(state.candidate_matrix());
    let tt = tape.transpose(table)?;
    let dots = tape.matmul(v2, tt)?;
    let logits = tape.scale(dots, 1.0 / state.tau);

    let lv = tape.value(logits);
    let width = state.candidates();
    let all: Vec<usize> = (0..width).collect();
    let mut underflow = false;
    for (r, &t) in labels.iter().enumerate() {
        let cols = samples.map_or(&all[..], |s| s.get(r).map_or(&all[..], |c| &c[..]));
        let row = &lv.data()[r * width..(r + 1) * width];
        let m = cols.iter().fold(f64::NEG_INFINITY, |m, &c| m.max(row.get(c).map_or(m, |x| x.as_f64())));
        let lse = m + cols.iter().filter_map(|&c| row.get(c)).map(|x| (x.as_f64() - m).exp()).sum::<f64>().ln();
        if (row[t].as_f64() - lse).exp() < PROB_FLOOR {
            underflow = true;
        }
    }
    let loss = tape.cross_entropy(logits, labels, samples)?;
    Ok(OimLoss { loss, underflow })
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 1e-12 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

/// `e_label <- normalize(momentum * e_label + (1 - momentum) * v)`.
pub fn lut_update<T: Scalar>(state: &mut OimState, label: usize, v: &[T]) -> Result<()> {
    if label >= state.classes() {
        return Err(Error::invalid(format!(
            "label {label} outside the {} table classes",
            state.classes()
        )));
    }
    if v.len() != state.dim() {
        return Err(Error::shape("lut_update", &[v.len()], &[state.dim()]));
    }
    let d = state.dim();
    let g = state.momentum;
    let row = &mut state.table.data_mut()[label * d..(label + 1) * d];
    if g == 1.0 {
        return Ok(());
    }
    let mut mixed: Vec<f64> = row.iter().zip(v).map(|(&e, x)| g * e as f64 + (1.0 - g) * x.as_f64()).collect();
    normalize(&mut mixed);
    row.iter_mut().zip(mixed).for_each(|(e, m)| *e = m as f32);
    Ok(())
}

/// Appends `v`, dropping the oldest entries beyond capacity.
pub fn queue_push<T: Scalar>(state: &mut OimState, v: &[T]) -> Result<()> {
    if v.len() != state.dim() {
        return Err(Error::shape("queue_push", &[v.len()], &[state.dim()]));
    }
    if state.capacity == 0 {
        return Ok(());
    }
    state.queue.push_back(v.iter().map(|x| x.as_f64() as f32).collect());
    while state.queue.len() > state.capacity {
        state.queue.pop_front();
    }
    Ok(())
}

/// Candidate columns for one row: `label` plus `size - 1` others drawn
/// uniformly without replacement by a partial Fisher-Yates shuffle,
/// returned in ascending order. Sizes beyond the candidate count use all.
pub fn subsample_partition(state: &OimState, label: usize, size: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if size == 0 {
        return Err(Error::invalid("sample size must be at least 1"));
    }
    let total = state.candidates();
    if label >= state.classes() {
        return Err(Error::invalid(format!("label {label} outside the table")));
    }
    if size >= total {
        return Ok((0..total).collect());
    }
    let mut others: Vec<usize> = (0..total).filter(|&i| i != label).collect();
    for i in 0..size - 1 {
        let j = rng.gen_range(i..others.len());
        others.swap(i, j);
    }
    let mut cols = others[..size - 1].to_vec();
    cols.push(label);
    cols.sort_unstable();
    Ok(cols)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vlad::random_unit_vectors;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state_with(table: &[Vec<f64>], queue: &[Vec<f64>], tau: f64) -> OimState {
        let d = table[0].len();
        let flat: Vec<f32> = table.iter().flatten().map(|&v| v as f32).collect();
        let q = queue.iter().map(|v| v.iter().map(|&x| x as f32).collect()).collect();
        OimState::from_parts(Tensor::new(&[table.len(), d], flat).unwrap(), q, 8, tau, 0.5).unwrap()
    }

    fn loss_of(state: &OimState, v: &[f64], label: usize, samples: Option<&[Vec<usize>]>) -> f64 {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(v.to_vec()));
        let out = oim_loss(&mut tape, x, &[label], state, samples).unwrap();
        tape.value(out.loss).item()
    }

    #[test]
    fn single_class_is_certain() {
        let s = state_with(&[vec![1.0, 0.0]], &[], 0.1);
        let p = oim_probabilities(&[0.0f64, 1.0], &s).unwrap();
        assert_eq!(p.labeled, vec![1.0]);
        assert!(p.unlabeled.is_empty());
        assert_eq!(loss_of(&s, &[0.0, 1.0], 0, None), 0.0);
    }

    #[test]
    fn equal_scores_are_uniform() {
        let e = vec![0.0, 1.0];
        let s = state_with(&[e.clone(), e.clone(), e.clone()], &[e.clone(), e], 0.1);
        let p = oim_probabilities(&[0.6f64, 0.8], &s).unwrap();
        for x in p.labeled.iter().chain(&p.unlabeled) {
            assert!((x - 0.2).abs() < 1e-12);
        }
        assert!((loss_of(&s, &[0.6, 0.8], 1, None) - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn probabilities_match_direct_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let units = random_unit_vectors(6, 4, &mut rng);
        let s = state_with(&units[..3], &units[3..5], 0.1);
        let v = &units[5];
        let p = oim_probabilities(v, &s).unwrap();
        let e: Vec<f64> = (0..5)
            .map(|i| {
                let c: Vec<f64> = s.candidate(i).iter().map(|&x| x as f64).collect();
                (c.iter().zip(v).map(|(a, b)| a * b).sum::<f64>() / 0.1).exp()
            })
            .collect();
        let z: f64 = e.iter().sum();
        for (got, want) in p.labeled.iter().chain(&p.unlabeled).zip(&e) {
            assert!((got - want / z).abs() < 1e-12);
        }
        assert!((p.total() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_temperature_and_empty_table() {
        assert!(OimState::new(2, 3, 4, 0.0, 0.5).is_err());
        assert!(OimState::new(0, 3, 4, 0.1, 0.5).is_err());
    }

    #[test]
    fn underflow_is_flagged_and_clamped() {
        let s = state_with(&[vec![1.0, 0.0], vec![-1.0, 0.0]], &[], 0.01);
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_vec(vec![1.0, 0.0]));
        let out = oim_loss(&mut tape, x, &[1], &s, None).unwrap();
        assert!(out.underflow);
        assert!((tape.value(out.loss).item() + PROB_FLOOR.ln()).abs() < 1e-9);
    }

    #[test]
    fn lut_update_momentum_cases() {
        let mut s = state_with(&[vec![1.0, 0.0]], &[], 0.1);
        lut_update(&mut s, 0, &[0.0f64, 1.0]).unwrap();
        let h = std::f32::consts::FRAC_1_SQRT_2;
        assert!((s.candidate(0)[0] - h).abs() < 1e-7 && (s.candidate(0)[1] - h).abs() < 1e-7);

        let mut frozen = OimState::from_parts(s.table().clone(), vec![], 4, 0.1, 1.0).unwrap();
        lut_update(&mut frozen, 0, &[1.0f64, 0.0]).unwrap();
        assert_eq!(frozen.table(), s.table());

        let mut copy = OimState::from_parts(s.table().clone(), vec![], 4, 0.1, 0.0).unwrap();
        lut_update(&mut copy, 0, &[0.6f64, 0.8]).unwrap();
        assert_eq!(copy.candidate(0), &[0.6, 0.8]);
        assert!(lut_update(&mut copy, 1, &[0.6f64, 0.8]).is_err());
    }

    #[test]
    fn repeated_update_converges_geometrically() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let units = random_unit_vectors(2, 8, &mut rng);
        let mut s = state_with(&units[..1], &[], 0.1);
        let target = &units[1];
        let dist = |s: &OimState| -> f64 {
            s.candidate(0).iter().zip(target).map(|(&a, b)| (a as f64 - b).powi(2)).sum::<f64>().sqrt()
        };
        // With momentum 0.5 the update bisects the angle to the target, so
        // the chord shrinks by 1 / (2 cos(angle / 4)) per step.
        let mut prev = dist(&s);
        for _ in 0..50 {
            lut_update(&mut s, 0, target).unwrap();
            let now = dist(&s);
            let angle = 2.0 * (prev / 2.0).asin();
            assert!(now <= prev / (2.0 * (angle / 4.0).cos()) + 1e-6, "{now} vs {prev}");
            prev = now;
        }
        assert!(prev < 1e-5);
    }

    #[test]
    fn queue_is_fifo_with_capacity() {
        let mut s = OimState::new(1, 1, 2, 0.1, 0.5).unwrap();
        for x in [1.0f64, 2.0, 3.0] {
            queue_push(&mut s, &[x]).unwrap();
        }
        let q: Vec<f32> = s.queue().map(|v| v[0]).collect();
        assert_eq!(q, vec![2.0, 3.0]);

        let mut none = OimState::new(1, 1, 0, 0.1, 0.5).unwrap();
        queue_push(&mut none, &[1.0f64]).unwrap();
        assert_eq!(none.queue_len(), 0);

        let mut s = OimState::new(1, 2, 5, 0.1, 0.5).unwrap();
        let mut reference = VecDeque::new();
        for i in 0..8 {
            let v = [i as f64, -(i as f64)];
            queue_push(&mut s, &v).unwrap();
            reference.push_back(v.map(|x| x as f32).to_vec());
            if reference.len() > 5 {
                reference.pop_front();
            }
        }
        assert_eq!(s.queue_len(), 5);
        assert!(s.queue().zip(&reference).all(|(a, b)| a == &b[..]));
    }

    #[test]
    fn full_sample_reproduces_exact_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let units = random_unit_vectors(7, 5, &mut rng);
        let s = state_with(&units[..4], &units[4..6], 0.1);
        let v = &units[6];
        let cols = subsample_partition(&s, 2, 6, &mut rng).unwrap();
        assert_eq!(cols, (0..6).collect::<Vec<_>>());
        let full = loss_of(&s, v, 2, None);
        let sampled = loss_of(&s, v, 2, Some(&[cols]));
        assert!((full - sampled).abs() <= 1e-12);
    }

    #[test]
    fn single_sample_is_certain() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        let units = random_unit_vectors(4, 3, &mut rng);
        let s = state_with(&units[..3], &[], 0.1);
        let cols = subsample_partition(&s, 1, 1, &mut rng).unwrap();
        assert_eq!(cols, vec![1]);
        assert_eq!(loss_of(&s, &units[3], 1, Some(&[cols])), 0.0);
    }

    #[test]
    fn sampler_replays_reference_draws() {
        let s = OimState::new(10, 2, 0, 0.1, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let cols = subsample_partition(&s, 3, 5, &mut rng).unwrap();

        let mut replay = ChaCha8Rng::seed_from_u64(19);
        let mut others: Vec<usize> = (0..10).filter(|&i| i != 3).collect();
        for i in 0..4 {
            let j = replay.gen_range(i..others.len());
            others.swap(i, j);
        }
        let mut want = others[..4].to_vec();
        want.push(3);
        want.sort_unstable();
        assert_eq!(cols, want);
        assert_eq!(cols.len(), 5);
        assert!(cols.contains(&3));
    }
}
