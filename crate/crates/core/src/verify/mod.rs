//! Named self-checks: tape gradients against central differences, fast
//! kernels against direct loops, and the retrieval, clip, schedule and
//! OIM invariants. Each check reports its largest error next to the
//! tolerance it was held to.

pub mod oracles;

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::attention::{attend, part_map, PartMode};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::eval::{cmc_curve, mean_ap, Entry, RetrievalIndex};
use crate::gradcheck::{grad_check_coords, grad_check_smooth, GradCheckReport};
use crate::model::{ModelConfig, PersonVladNet};
use crate::nn::{fully_connected, global_avgpool3d, BackboneSpec};
use crate::oim::{oim_loss, oim_probabilities, queue_push, subsample_partition, OimState};
use crate::tensor::{Scalar, Tensor};
use crate::train::{clip_split, clip_windows, lr_schedule};
use crate::vlad::{self, flatten_l2, hard_vlad_oracle, intra_normalize, kmeans_centers, random_unit_vectors, soft_assign, vlad_aggregate, VladParams};
use oracles::{brute_cmc, brute_map, naive_conv3d, naive_maxpool3d, window_starts};

/// Arithmetic used by the forward-pass checks. Gradient checks always
/// difference in 64-bit; `Double` divides every tolerance by ten.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

impl Precision {
    fn tolerance(self, base: f64) -> f64 {
        match self {
            Precision::Single => base,
            Precision::Double => base / 10.0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub max_error: f64,
    pub tolerance: f64,
    /// Set when the check could not run to completion.
    pub failure: Option<String>,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max_error <= self.tolerance
    }
}

type CheckFn = fn(Precision, &mut ChaCha8Rng) -> Result<f64>;

/// Name, base tolerance and body of every check, in run order.
const CHECKS: &[(&str, f64, CheckFn)] = &[
    ("grad.elementwise", 1e-5, grad_elementwise),
    ("grad.matmul", 1e-5, grad_matmul),
    ("grad.softmax", 1e-5, grad_softmax),
    ("grad.conv3d", 1e-5, grad_conv3d),
    ("grad.maxpool3d", 1e-5, grad_maxpool3d),
    ("grad.global_avgpool3d", 1e-5, grad_avgpool),
    ("grad.fully_connected", 1e-5, grad_fully_connected),
    ("grad.part_map", 1e-5, grad_part_map),
    ("grad.attend", 1e-5, grad_attend),
    ("grad.soft_assign", 1e-5, grad_soft_assign),
    ("grad.vlad_aggregate", 1e-5, grad_vlad_aggregate),
    ("grad.intra_normalize", 1e-5, grad_intra_normalize),
    ("grad.flatten_l2", 1e-5, grad_flatten_l2),
    ("grad.oim_loss", 1e-5, grad_oim_loss),
    ("grad.composed_model", 1e-3, grad_composed),
    ("oracle.conv3d_forward", 1e-4, conv_forward),
    ("oracle.maxpool3d_forward", 0.0, maxpool_forward),
    ("oracle.vlad_hard_assignment", 1e-3, vlad_hard),
    ("oracle.vlad_alpha_monotone", 0.0, vlad_alpha_monotone),
    ("oracle.clip_windows", 0.0, clip_windows_check),
    ("oracle.cmc", 0.0, cmc_check),
    ("oracle.map", 1e-11, map_check),
    ("schedule.lr_halving", 0.0, schedule_check),
    ("oim.probabilities_sum_to_one", 1e-5, oim_sum_check),
    ("oim.full_sample_equals_exact", 1e-11, oim_full_sample_check),
    ("norm.unit_descriptors", 1e-5, descriptor_norm_check),
];

pub fn check_names() -> Vec<&'static str> {
    CHECKS.iter().map(|c| c.0).collect()
}

/// Runs every check whose name contains `filter` (all when `None`).
pub fn run_checks(precision: Precision, seed: u64, filter: Option<&str>) -> Vec<CheckOutcome> {
    CHECKS
        .iter()
        .enumerate()
        .filter(|(_, (name, _, _))| filter.is_none_or(|f| name.contains(f)))
        .map(|(i, &(name, base, body))| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(100 + i as u64);
            let start = Instant::now();
            let result = body(precision, &mut rng);
            let seconds = start.elapsed().as_secs_f64();
            let tolerance = precision.tolerance(base);
            match result {
                Ok(e) if e.is_finite() => CheckOutcome {
                    name,
                    max_error: e,
                    tolerance,
                    failure: None,
                    seconds,
                },
                Ok(e) => CheckOutcome {
                    name,
                    max_error: e,
                    tolerance,
                    failure: Some("non-finite error".into()),
                    seconds,
                },
                Err(e) => CheckOutcome {
                    name,
                    max_error: f64::INFINITY,
                    tolerance,
                    failure: Some(e.to_string()),
                    seconds,
                },
            }
        })
        .collect()
}

pub fn format_report(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        let _ = write!(
            s,
            "{status} {:<32} max_err {:>10.3e}  tol {:>8.1e}  {:>6.2}s",
            o.name, o.max_error, o.tolerance, o.seconds
        );
        if let Some(f) = &o.failure {
            let _ = write!(s, "  ({f})");
        }
        s.push('\n');
    }
    let failed = outcomes.iter().filter(|o| !o.passed()).count();
    let _ = writeln!(s, "{} checks, {failed} failed", outcomes.len());
    s
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()).expect("shape and length agree")
}

/// Uniform values kept at least `gap` away from zero, so that ReLU kinks
/// lie outside the difference stencil.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize], gap: f64) -> Tensor<f64> {
    gaussian(rng, shape).map(|v| if v >= 0.0 { v + gap } else { v - gap })
}

/// `sum(y * r)` for a fixed random `r`, so every output element carries an
/// O(1) weight into the scalar.
fn project(tape: &mut Tape<f64>, y: Var, weights: &Tensor<f64>) -> Result<Var> {
    let r = tape.constant(weights.clone());
    let p = tape.mul(y, r)?;
    Ok(tape.sum_all(p))
}

const STEP: f64 = 1e-5;
/// Largest step of the smooth-coordinate check on the deep model. It falls
/// back to 1e-4 and 1e-5 where the soft assignment curves sharply.
const COMPOSED_STEP: f64 = 1e-3;

/// Every coordinate in random order, so a smooth-coordinate check can take
/// replacements for the ones it passes over.
fn shuffled_coords(len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(rng);
    all
}

fn check_all<F>(f: F, x: &Tensor<f64>) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, Var) -> Result<Var>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    grad_check_coords(f, x, STEP, &coords)
}

fn worst(reports: impl IntoIterator<Item = Result<GradCheckReport>>) -> Result<f64> {
    reports.into_iter().try_fold(0.0f64, |m, r| Ok(m.max(r?.max_rel_error)))
}

fn grad_elementwise(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = away_from_zero(rng, &[3, 4], 0.05);
    let other = gaussian(rng, &[3, 4]);
    let r = gaussian(rng, &[3, 4]);
    worst([check_all(
        |t, x| {
            let o = t.constant(other.clone());
            let a = t.add(x, o)?;
            let s = t.sub(a, x)?;
            let s = t.mul(s, x)?;
            let relu = t.relu(x);
            let sig = t.sigmoid(x);
            let e = t.scale(x, 0.3);
            let e = t.exp(e);
            let y = t.mul(sig, e)?;
            let y = t.add(y, relu)?;
            let y = t.add(y, s)?;
            project(t, y, &r)
        },
        &x,
    )])
}

fn grad_matmul(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let a = gaussian(rng, &[3, 4]);
    let b = gaussian(rng, &[4, 5]);
    let ba = gaussian(rng, &[2, 3, 4]);
    let bb = gaussian(rng, &[2, 4, 2]);
    let r = gaussian(rng, &[3, 5]);
    let rb = gaussian(rng, &[2, 3, 2]);
    worst([
        check_all(|t, x| { let c = t.constant(b.clone()); let y = t.matmul(x, c)?; project(t, y, &r) }, &a),
        check_all(|t, x| { let c = t.constant(a.clone()); let y = t.matmul(c, x)?; project(t, y, &r) }, &b),
        check_all(|t, x| { let c = t.constant(bb.clone()); let y = t.bmm(x, c)?; project(t, y, &rb) }, &ba),
        check_all(|t, x| { let c = t.constant(ba.clone()); let y = t.bmm(c, x)?; project(t, y, &rb) }, &bb),
    ])
}

fn grad_softmax(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[3, 5]);
    let r = gaussian(rng, &[3, 5]);
    worst([check_all(|t, x| { let y = t.softmax(x, 0.7)?; project(t, y, &r) }, &x)])
}

fn grad_conv3d(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[2, 2, 3, 4, 4]);
    let w = gaussian(rng, &[3, 2, 3, 3, 3]);
    let b = gaussian(rng, &[3]);
    let r = gaussian(rng, &[2, 3, 3, 4, 4]);
    let pad = [1, 1, 1];
    worst([
        check_all(
            |t, x| {
                let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
                let y = t.conv3d(x, w, Some(b), pad)?;
                project(t, y, &r)
            },
            &x,
        ),
        check_all(
            |t, w| {
                let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
                let y = t.conv3d(x, w, Some(b), pad)?;
                project(t, y, &r)
            },
            &w,
        ),
        check_all(
            |t, b| {
                let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
                let y = t.conv3d(x, w, Some(b), pad)?;
                project(t, y, &r)
            },
            &b,
        ),
    ])
}

/// Distinct values spaced well beyond the difference step, in random
/// order, so each pooling window has a clear maximum.
fn spaced_values(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut v: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    v.shuffle(rng);
    Tensor::new(shape, v).expect("shape and length agree")
}

fn grad_maxpool3d(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = spaced_values(rng, &[1, 2, 4, 5, 4]);
    let r = gaussian(rng, &[1, 2, 2, 2, 2]);
    worst([check_all(|t, x| { let y = t.maxpool3d(x, [2, 2, 2])?; project(t, y, &r) }, &x)])
}

fn grad_avgpool(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[2, 3, 2, 3, 2]);
    let r = gaussian(rng, &[2, 3]);
    worst([check_all(|t, x| { let y = global_avgpool3d(t, x)?; project(t, y, &r) }, &x)])
}

fn grad_fully_connected(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[3, 4]);
    let w = gaussian(rng, &[5, 4]);
    let b = gaussian(rng, &[5]);
    let r = gaussian(rng, &[3, 5]);
    worst([
        check_all(|t, x| { let (w, b) = (t.constant(w.clone()), t.constant(b.clone())); let y = fully_connected(t, x, w, b)?; project(t, y, &r) }, &x),
        check_all(|t, w| { let (x, b) = (t.constant(x.clone()), t.constant(b.clone())); let y = fully_connected(t, x, w, b)?; project(t, y, &r) }, &w),
        check_all(|t, b| { let (x, w) = (t.constant(x.clone()), t.constant(w.clone())); let y = fully_connected(t, x, w, b)?; project(t, y, &r) }, &b),
    ])
}

fn grad_part_map(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = gaussian(rng, &[2, 3, 2, 3, 3]);
    let w = gaussian(rng, &[1, 3, 1, 1, 1]);
    let b = gaussian(rng, &[1]);
    let r = gaussian(rng, &[2, 1, 2, 3, 3]);
    worst([
        check_all(|t, f| { let (w, b) = (t.constant(w.clone()), t.constant(b.clone())); let y = part_map(t, f, w, b)?; project(t, y, &r) }, &f),
        check_all(|t, w| { let (f, b) = (t.constant(f.clone()), t.constant(b.clone())); let y = part_map(t, f, w, b)?; project(t, y, &r) }, &w),
        check_all(|t, b| { let (f, w) = (t.constant(f.clone()), t.constant(w.clone())); let y = part_map(t, f, w, b)?; project(t, y, &r) }, &b),
    ])
}

fn grad_attend(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = gaussian(rng, &[2, 3, 2, 3, 3]);
    let m = gaussian(rng, &[2, 1, 2, 3, 3]);
    let r = gaussian(rng, &[2, 3, 2, 3, 3]);
    worst([
        check_all(|t, f| { let m = t.constant(m.clone()); let y = attend(t, f, m)?; project(t, y, &r) }, &f),
        check_all(|t, m| { let f = t.constant(f.clone()); let y = attend(t, f, m)?; project(t, y, &r) }, &m),
    ])
}

fn grad_soft_assign(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let f = gaussian(rng, &[6, 4]);
    let w = gaussian(rng, &[3, 4]);
    let z = gaussian(rng, &[3]);
    let r = gaussian(rng, &[6, 3]);
    worst([
        check_all(|t, f| { let (w, z) = (t.constant(w.clone()), t.constant(z.clone())); let y = soft_assign(t, f, w, z)?; project(t, y, &r) }, &f),
        check_all(|t, w| { let (f, z) = (t.constant(f.clone()), t.constant(z.clone())); let y = soft_assign(t, f, w, z)?; project(t, y, &r) }, &w),
        check_all(|t, z| { let (f, w) = (t.constant(f.clone()), t.constant(w.clone())); let y = soft_assign(t, f, w, z)?; project(t, y, &r) }, &z),
    ])
}

fn grad_vlad_aggregate(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let d = gaussian(rng, &[2, 5, 4]);
    let c = gaussian(rng, &[3, 4]);
    let w = gaussian(rng, &[3, 4]);
    let z = gaussian(rng, &[3]);
    let r = gaussian(rng, &[2, 3, 4]);
    let run = |t: &mut Tape<f64>, vars: [Var; 4]| -> Result<Var> {
        let y = vlad_aggregate(t, vars[0], vars[1], vars[2], vars[3])?;
        project(t, y, &r)
    };
    let inputs = [&d, &c, &w, &z];
    worst((0..4).map(|slot| {
        check_all(
            |t, x| {
                let mut vars = inputs.map(|v| t.constant(v.clone()));
                vars[slot] = x;
                run(t, vars)
            },
            inputs[slot],
        )
    }))
}

fn grad_intra_normalize(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let v = gaussian(rng, &[3, 4]);
    let r = gaussian(rng, &[3, 4]);
    worst([check_all(|t, v| { let y = intra_normalize(t, v, 1e-12)?; project(t, y, &r) }, &v)])
}

fn grad_flatten_l2(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let v = gaussian(rng, &[3, 4]);
    let vb = gaussian(rng, &[2, 3, 4]);
    let r = gaussian(rng, &[12]);
    let rb = gaussian(rng, &[2, 12]);
    worst([
        check_all(|t, v| { let y = flatten_l2(t, v, 1e-12)?; project(t, y, &r) }, &v),
        check_all(|t, v| { let y = flatten_l2(t, v, 1e-12)?; project(t, y, &rb) }, &vb),
    ])
}

fn unit_rows(rng: &mut ChaCha8Rng, rows: usize, dim: usize) -> Vec<Vec<f64>> {
    random_unit_vectors(rows, dim, rng)
}

/// OIM state with a random unit table and a partly filled queue.
pub fn random_oim_state(rng: &mut ChaCha8Rng, classes: usize, dim: usize, queued: usize, tau: f64) -> Result<OimState> {
    let flat: Vec<f64> = unit_rows(rng, classes, dim).into_iter().flatten().collect();
    let table = Tensor::<f32>::from_f64(&[classes, dim], &flat)?;
    let mut state = OimState::from_parts(table, Vec::new(), queued.max(1) + 1, tau, 0.5)?;
    for q in unit_rows(rng, queued, dim) {
        queue_push(&mut state, &q)?;
    }
    Ok(state)
}

fn grad_oim_loss(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let state = random_oim_state(rng, 4, 6, 3, 0.5)?;
    let v = gaussian(rng, &[3, 6]);
    let labels = [0usize, 2, 3];
    let samples = vec![vec![0, 1, 5], vec![2, 4, 6], vec![0, 3]];
    worst([
        check_all(|t, v| Ok(oim_loss(t, v, &labels, &state, None)?.loss), &v),
        check_all(|t, v| Ok(oim_loss(t, v, &labels, &state, Some(&samples))?.loss), &v),
    ])
}

/// Small end-to-end model over a `3 x 8 x 16 x 16` clip: backbone whose
/// fifth pooling stage is the identity, six learned part detectors, three
/// VLAD clusters.
pub fn composed_check_config() -> ModelConfig {
    ModelConfig {
        input: [8, 16, 16],
        backbone: BackboneSpec {
            filters: vec![3, 4, 4, 4, 5],
            pool_kernels: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [1, 1, 1]],
            ..BackboneSpec::default()
        },
        parts: PartMode::Learned,
        branches: 6,
        clusters: 3,
        alpha: 1000.0,
        ..ModelConfig::default()
    }
}

fn grad_composed(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut net = PersonVladNet::<f64>::new(composed_check_config(), rng)?;
    let [l, h, w] = net.config().input;
    let clips: Vec<Tensor<f32>> = (0..2).map(|_| gaussian(rng, &[3, l, h, w]).map(|v| 0.5 + 0.2 * v).cast()).collect();
    let refs: Vec<&Tensor<f32>> = clips.iter().collect();
    // Distinct part detectors. Near-identical parts share one assignment,
    // which intra-normalization then cancels, starving the assignment
    // weights of gradient.
    let detectors: Vec<String> = net.params().names().into_iter().filter(|n| n.starts_with("detector.")).collect();
    for name in detectors {
        let t = net.params_mut().get_mut(&name)?;
        *t = gaussian(rng, t.shape()).map(|v| 2.0 * v);
    }
    // Centers from k-means over part descriptors of other clips, as in
    // training, so the soft assignment sits in its sensitive range without
    // any checked descriptor landing exactly on a center.
    let init: Vec<Tensor<f32>> = (0..12).map(|_| gaussian(rng, &[3, l, h, w]).map(|v| 0.5 + 0.2 * v).cast()).collect();
    let parts: Vec<Vec<f64>> = net
        .embed_with_parts(&init.iter().collect::<Vec<_>>())?
        .1
        .into_iter()
        .flatten()
        .map(|p| p.into_iter().map(f64::from).collect())
        .collect();
    let k = net.config().clusters;
    let dim = net.config().feature_dim();
    let centers = kmeans_centers(&parts, k, dim, 10, rng);
    net.set_centers(Tensor::from_f64(&[k, dim], &centers.concat())?)?;
    let batch = net.prepare_batch(&refs)?;
    let flat: Vec<f64> = unit_rows(rng, 3, net.descriptor_dim()).into_iter().flatten().collect();
    let mut state = OimState::from_parts(Tensor::from_f64(&[3, net.descriptor_dim()], &flat)?, Vec::new(), 4, 0.5, 0.5)?;
    queue_push(&mut state, &unit_rows(rng, 1, net.descriptor_dim())[0])?;
    let labels = [0usize, 2];

    // Every parameter is checked on a sample of coordinates, swapping the
    // probed tensor in for its bound constant.
    let loss_with = |t: &mut Tape<f64>, name: Option<&str>, x: Var| -> Result<Var> {
        let mut params = net.bind(t, |_| false);
        let input = match name {
            Some(n) => {
                params.set(n, x);
                t.constant(batch.clone())
            }
            None => x,
        };
        let out = net.forward(t, &params, input)?;
        Ok(oim_loss(t, out.descriptors, &labels, &state, None)?.loss)
    };
    let mut reports = Vec::new();
    let order = shuffled_coords(batch.len(), rng);
    reports.push(grad_check_smooth(|t, x| loss_with(t, None, x), &batch, COMPOSED_STEP, &order, 48));
    for (name, value) in net.params().iter() {
        if name == vlad::ALPHA {
            continue;
        }
        let order = shuffled_coords(value.len(), rng);
        reports.push(grad_check_smooth(|t, x| loss_with(t, Some(name), x), value, COMPOSED_STEP, &order, 16));
    }
    worst(reports)
}

fn conv_forward_in<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[2, 3, 4, 5, 6]);
    let w = gaussian(rng, &[4, 3, 3, 3, 3]);
    let b = gaussian(rng, &[4]);
    let pad = [1, 1, 1];
    let want = naive_conv3d(&x, &w, b.data(), pad);
    let mut t = Tape::<T>::new();
    let (xv, wv, bv) = (t.constant(x.cast()), t.constant(w.cast()), t.constant(b.cast()));
    let y = t.conv3d(xv, wv, Some(bv), pad)?;
    Ok(t.value(y).cast::<f64>().max_abs_diff(&want))
}

fn conv_forward(p: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    match p {
        Precision::Single => conv_forward_in::<f32>(rng),
        Precision::Double => conv_forward_in::<f64>(rng),
    }
}

fn maxpool_forward_in<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<f64> {
    let x = gaussian(rng, &[2, 3, 5, 6, 7]).map(|v| T::of(v).as_f64());
    let want = naive_maxpool3d(&x, [2, 2, 3]);
    let mut t = Tape::<T>::new();
    let xv = t.constant(x.cast());
    let y = t.maxpool3d(xv, [2, 2, 3])?;
    Ok(t.value(y).cast::<f64>().max_abs_diff(&want))
}

fn maxpool_forward(p: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    match p {
        Precision::Single => maxpool_forward_in::<f32>(rng),
        Precision::Double => maxpool_forward_in::<f64>(rng),
    }
}

/// Unit centers at pairwise distance at least 0.5, and descriptors drawn
/// around randomly chosen centers whose nearest center wins by a squared
/// distance margin of at least `margin`.
pub fn separated_vlad_instance(
    rng: &mut ChaCha8Rng,
    clusters: usize,
    dim: usize,
    count: usize,
    margin: f64,
) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let sq = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
    let mut centers: Vec<Vec<f64>> = Vec::new();
    while centers.len() < clusters {
        let c = random_unit_vectors(1, dim, rng).remove(0);
        if centers.iter().all(|o| sq(o, &c).sqrt() >= 0.5) {
            centers.push(c);
        }
    }
    let mut descriptors = Vec::with_capacity(count);
    while descriptors.len() < count {
        let k = rng.gen_range(0..clusters);
        let f: Vec<f64> = centers[k].iter().map(|&c| c + 0.15 * rng.sample::<f64, _>(StandardNormal)).collect();
        let mut d: Vec<f64> = centers.iter().map(|c| sq(&f, c)).collect();
        d.sort_by(f64::total_cmp);
        if clusters == 1 || d[1] - d[0] >= margin {
            descriptors.push(f);
        }
    }
    (descriptors, centers)
}

/// L-infinity distance between the soft aggregation at `alpha` with tied
/// parameters and the nearest-center aggregation.
pub fn soft_vs_hard<T: Scalar>(descriptors: &[Vec<f64>], centers: &[Vec<f64>], alpha: f64) -> Result<f64> {
    let (k, d) = (centers.len(), centers[0].len());
    let hard = hard_vlad_oracle(descriptors, centers)?;
    let c = Tensor::<T>::from_f64(&[k, d], &centers.concat())?;
    let params = VladParams::tied(c, alpha)?;
    let mut t = Tape::<T>::new();
    let f = t.constant(Tensor::from_f64(&[descriptors.len(), d], &descriptors.concat())?);
    let (cv, wv, zv) = (
        t.constant(params.centers.clone()),
        t.constant(params.assign_w.clone()),
        t.constant(params.assign_z.clone()),
    );
    let v = vlad_aggregate(&mut t, f, cv, wv, zv)?;
    Ok(t.value(v)
        .data()
        .iter()
        .zip(&hard.matrix)
        .fold(0.0f64, |m, (&a, &b)| m.max((a.as_f64() - b).abs())))
}

const VLAD_MARGIN: f64 = 0.02;

fn vlad_hard(p: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..100 {
        let k = [2, 4, 8][i % 3];
        let (desc, centers) = separated_vlad_instance(rng, k, 8, 24, VLAD_MARGIN);
        let e = match p {
            Precision::Single => soft_vs_hard::<f32>(&desc, &centers, 1000.0)?,
            Precision::Double => soft_vs_hard::<f64>(&desc, &centers, 1000.0)?,
        };
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Count of alpha steps (10 -> 100 -> 1000) where the mean soft-vs-hard
/// error failed to shrink.
fn vlad_alpha_monotone(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let instances: Vec<_> = (0..30)
        .map(|i| separated_vlad_instance(rng, [2, 4, 8][i % 3], 8, 24, VLAD_MARGIN))
        .collect();
    let mut means = Vec::new();
    for alpha in [10.0, 100.0, 1000.0] {
        let mut sum = 0.0;
        for (d, c) in &instances {
            sum += soft_vs_hard::<f64>(d, c, alpha)?;
        }
        means.push(sum / instances.len() as f64);
    }
    Ok(means.windows(2).filter(|w| w[1] >= w[0]).count() as f64)
}

/// Mismatching window lists plus mismatching clip frames.
fn clip_windows_check(_: Precision, _: &mut ChaCha8Rng) -> Result<f64> {
    let mut bad = 0usize;
    for len in 1..=200 {
        if clip_windows(len, 16, 8)? != window_starts(len, 16, 8) {
            bad += 1;
        }
    }
    for len in [1, 5, 16, 17, 31, 32, 45] {
        // Frame f of the tracklet holds the value f in every pixel.
        let data: Vec<f32> = (0..3).flat_map(|_| (0..len).flat_map(|f| [f as f32; 2])).collect();
        let tracklet = Tensor::new(&[3, len, 1, 2], data)?;
        let clips = clip_split(&tracklet, 16, 8)?;
        for (clip, start) in clips.iter().zip(window_starts(len, 16, 8)) {
            for ch in 0..3 {
                for f in 0..16 {
                    if clip.get(&[ch, f, 0, 1]) != ((start + f) % len) as f32 {
                        bad += 1;
                    }
                }
            }
        }
    }
    Ok(bad as f64)
}

/// Random retrieval problem where every probe identity has a match on
/// another camera.
pub fn random_index(rng: &mut ChaCha8Rng, probes: usize, gallery: usize, dim: usize) -> RetrievalIndex {
    let ids = probes.max(2);
    let unit = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        random_unit_vectors(1, dim, rng)[0].iter().map(|&v| v as f32).collect()
    };
    let mut index = RetrievalIndex::default();
    for p in 0..probes {
        index.probes.push(Entry { identity: p as i64, camera: 1, descriptor: unit(rng) });
        index.gallery.push(Entry { identity: p as i64, camera: 0, descriptor: unit(rng) });
    }
    while index.gallery.len() < gallery.max(probes) {
        let identity = rng.gen_range(0..ids) as i64;
        let camera = rng.gen_range(0..3);
        index.gallery.push(Entry { identity, camera, descriptor: unit(rng) });
    }
    index.gallery.shuffle(rng);
    index
}

fn random_sizes(rng: &mut ChaCha8Rng) -> (usize, usize) {
    let p = rng.gen_range(1..=50);
    (p, rng.gen_range(p..=200))
}

fn cmc_check(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p, g) = random_sizes(rng);
        let index = random_index(rng, p, g, 4);
        let fast = cmc_curve(&index, 20)?;
        let slow = brute_cmc(&index, 20);
        worst = fast.iter().zip(&slow).fold(worst, |m, (a, b)| m.max((a - b).abs()));
    }
    Ok(worst)
}

fn map_check(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p, g) = random_sizes(rng);
        let index = random_index(rng, p, g, 4);
        worst = worst.max((mean_ap(&index)? - brute_map(&index)).abs());
    }
    Ok(worst)
}

fn schedule_check(_: Precision, _: &mut ChaCha8Rng) -> Result<f64> {
    let want = [(0, 0.003), (1000, 0.0015), (2500, 0.00075)];
    Ok(want.iter().map(|&(i, lr)| (lr_schedule(i) - lr).abs()).fold(0.0, f64::max))
}

fn oim_sum_check(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let classes = rng.gen_range(1..12);
        let dim = rng.gen_range(2..10);
        let queued = rng.gen_range(0..6);
        let tau = [0.05, 0.1, 1.0][rng.gen_range(0..3)];
        let state = random_oim_state(rng, classes, dim, queued, tau)?;
        let v = &random_unit_vectors(1, dim, rng)[0];
        worst = worst.max((oim_probabilities(v, &state)?.total() - 1.0).abs());
    }
    Ok(worst)
}

fn oim_full_sample_check(_: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let state = random_oim_state(rng, 10, 8, 4, 0.1)?;
        let rows = 3;
        let labels: Vec<usize> = (0..rows).map(|_| rng.gen_range(0..10)).collect();
        let v = gaussian(rng, &[rows, 8]);
        let samples: Vec<Vec<usize>> = labels
            .iter()
            .map(|&l| subsample_partition(&state, l, state.candidates(), rng))
            .collect::<Result<_>>()?;
        let mut t = Tape::<f64>::new();
        let vv = t.constant(v);
        let exact = oim_loss(&mut t, vv, &labels, &state, None)?.loss;
        let sampled = oim_loss(&mut t, vv, &labels, &state, Some(&samples))?.loss;
        worst = worst.max((t.value(exact).item() - t.value(sampled).item()).abs());
    }
    Ok(worst)
}

fn descriptor_norm_in<T: Scalar>(rng: &mut ChaCha8Rng) -> Result<f64> {
    let net = PersonVladNet::<T>::new(composed_check_config(), rng)?;
    let [l, h, w] = net.config().input;
    let clips: Vec<Tensor<f32>> = (0..3).map(|_| gaussian(rng, &[3, l, h, w]).map(|v| 0.5 + 0.2 * v).cast()).collect();
    let refs: Vec<&Tensor<f32>> = clips.iter().collect();
    let mut worst = 0.0f64;
    for v in net.embed(&refs)? {
        let n = v.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
        if n != 0.0 {
            worst = worst.max((n - 1.0).abs());
        }
    }
    Ok(worst)
}

fn descriptor_norm_check(p: Precision, rng: &mut ChaCha8Rng) -> Result<f64> {
    match p {
        Precision::Single => descriptor_norm_in::<f32>(rng),
        Precision::Double => descriptor_norm_in::<f64>(rng),
    }
}

/// Turns a failed suite into an error naming the failing checks.
pub fn require_all_passed(outcomes: &[CheckOutcome]) -> Result<()> {
    let failed: Vec<&str> = outcomes.iter().filter(|o| !o.passed()).map(|o| o.name).collect();
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::Verification(failed.join(", ")))
    }
}
