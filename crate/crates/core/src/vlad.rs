//! Soft-assignment VLAD aggregation of part descriptors.
//!
//! A VLAD matrix is stored as `K x D`: row `k` holds the residual sum for
//! cluster `k`, so a row-major flatten places cluster `k` in slots
//! `[k*D, (k+1)*D)`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Bindings, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const CENTERS: &str = "vlad.centers";
pub const ASSIGN_W: &str = "vlad.assign_w";
pub const ASSIGN_Z: &str = "vlad.assign_z";
pub const ALPHA: &str = "vlad.alpha";

/// Cluster centers plus the assignment weights and biases.
#[derive(Clone, Debug, PartialEq)]
pub struct VladParams<T> {
    pub centers: Tensor<T>,
    pub assign_w: Tensor<T>,
    pub assign_z: Tensor<T>,
    pub alpha: f64,
}

impl<T: Scalar> VladParams<T> {
    /// `w_k = 2 alpha c_k`, `z_k = -alpha |c_k|^2`.
    pub fn tied(centers: Tensor<T>, alpha: f64) -> Result<Self> {
        if centers.rank() != 2 {
            return Err(Error::invalid(format!(
                "centers must be K x D, got {:?}",
                centers.shape()
            )));
        }
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::invalid(format!("alpha must be positive, got {alpha}")));
        }
        let d = centers.shape()[1];
        let a = T::of(alpha);
        let assign_w = centers.map(|v| T::of(2.0) * a * v);
        let z = centers
            .data()
            .chunks(d)
            .map(|c| -a * c.iter().map(|&v| v * v).sum::<T>())
            .collect();
        Ok(VladParams {
            assign_z: Tensor::from_vec(z),
            centers,
            assign_w,
            alpha,
        })
    }

    pub fn clusters(&self) -> usize {
        self.centers.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.centers.shape()[1]
    }

    pub fn insert_into(&self, store: &mut ParamStore<T>) {
        store.insert(CENTERS, self.centers.clone());
        store.insert(ASSIGN_W, self.assign_w.clone());
        store.insert(ASSIGN_Z, self.assign_z.clone());
        store.insert(ALPHA, Tensor::from_vec(vec![T::of(self.alpha)]));
    }

    pub fn from_store(store: &ParamStore<T>) -> Result<Self> {
        Ok(VladParams {
            centers: store.get(CENTERS)?.clone(),
            assign_w: store.get(ASSIGN_W)?.clone(),
            assign_z: store.get(ASSIGN_Z)?.clone(),
            alpha: store.get(ALPHA)?.data()[0].as_f64(),
        })
    }
}

pub fn is_vlad_param(name: &str) -> bool {
    name.starts_with("vlad.")
}

/// Softmax over clusters of `f . w_k + z_k` for each row of `f` (`M x D`);
/// returns `M x K`.
pub fn soft_assign<T: Scalar>(tape: &mut Tape<T>, f: Var, w: Var, z: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ws = tape.shape(w).to_vec();
    if fs.len() != 2 || ws.len() != 2 || fs[1] != ws[1] {
        return Err(Error::shape("soft_assign", &fs, &ws));
    }
    if tape.shape(z) != [ws[0]] {
        return Err(Error::shape("soft_assign bias", tape.shape(z), &[ws[0]]));
    }
    let (m, k) = (fs[0], ws[0]);
    let wt = tape.transpose(w)?;
    let logits = tape.matmul(f, wt)?;
    let z2 = tape.reshape(z, &[1, k])?;
    let z2 = tape.expand(z2, &[m, k])?;
    let logits = tape.add(logits, z2)?;
    tape.softmax(logits, 1.0)
}

/// `V[k] = sum_b a_k(f_b) (f_b - c_k)`. `descriptors` is `B x D` or
/// `batch x B x D`; the result is `K x D` or `batch x K x D`.
pub fn vlad_aggregate<T: Scalar>(
    tape: &mut Tape<T>,
    descriptors: Var,
    centers: Var,
    w: Var,
    z: Var,
) -> Result<Var> {
    let ds = tape.shape(descriptors).to_vec();
    let cs = tape.shape(centers).to_vec();
    let single = ds.len() == 2;
    if !(2..=3).contains(&ds.len()) || cs.len() != 2 || ds[ds.len() - 1] != cs[1] {
        return Err(Error::shape("vlad_aggregate", &ds, &cs));
    }
    if tape.shape(w) != cs.as_slice() {
        return Err(Error::shape("vlad_aggregate weights", tape.shape(w), &cs));
    }
    let (n, b, d) = if single { (1, ds[0], ds[1]) } else { (ds[0], ds[1], ds[2]) };
    let k = cs[0];
    let flat = tape.reshape(descriptors, &[n * b, d])?;
    let a = soft_assign(tape, flat, w, z)?;
    let a = tape.reshape(a, &[n, b, k])?;
    let at = tape.transpose(a)?;
    let f3 = tape.reshape(descriptors, &[n, b, d])?;
    let weighted = tape.bmm(at, f3)?;
    let mass = tape.reduce(Reduce::Sum, a, &[1])?;
    let mass = tape.reshape(mass, &[n, k, 1])?;
    let mass = tape.expand(mass, &[n, k, d])?;
    let c3 = tape.reshape(centers, &[1, k, d])?;
    let c3 = tape.expand(c3, &[n, k, d])?;
    let pulled = tape.mul(mass, c3)?;
    let v = tape.sub(weighted, pulled)?;
    if single {
        tape.reshape(v, &[k, d])
    } else {
        Ok(v)
    }
}

/// Aggregates with the parameters bound under their checkpoint names.
pub fn vlad_from_bindings<T: Scalar>(tape: &mut Tape<T>, params: &Bindings, descriptors: Var) -> Result<Var> {
    let c = params.get(CENTERS)?;
    let w = params.get(ASSIGN_W)?;
    let z = params.get(ASSIGN_Z)?;
    vlad_aggregate(tape, descriptors, c, w, z)
}

/// Each cluster row divided by `max(norm, eps)`.
pub fn intra_normalize<T: Scalar>(tape: &mut Tape<T>, v: Var, eps: f64) -> Result<Var> {
    tape.l2_normalize(v, eps)
}

/// Flattens `K x D` (or `batch x K x D`) cluster-major and L2 normalizes.
pub fn flatten_l2<T: Scalar>(tape: &mut Tape<T>, v: Var, eps: f64) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    let flat = match s.len() {
        2 => tape.reshape(v, &[s[0] * s[1]])?,
        3 => tape.reshape(v, &[s[0], s[1] * s[2]])?,
        _ => return Err(Error::invalid(format!("flatten_l2 expects K x D, got {s:?}"))),
    };
    tape.l2_normalize(flat, eps)
}

/// Nearest-center VLAD, for checking the soft layer.
#[derive(Clone, Debug, PartialEq)]
pub struct HardVlad {
    /// `K x D`, row-major.
    pub matrix: Vec<f64>,
    /// Nearest cluster of each descriptor.
    pub assignment: Vec<usize>,
    /// Descriptors equidistant to their two nearest centers. These went to
    /// the lower cluster index.
    pub ties: Vec<usize>,
}

pub fn hard_vlad_oracle(descriptors: &[Vec<f64>], centers: &[Vec<f64>]) -> Result<HardVlad> {
    let d = centers.first().map_or(0, Vec::len);
    if centers.is_empty() || descriptors.iter().chain(centers).any(|v| v.len() != d) {
        return Err(Error::invalid("hard_vlad_oracle needs equal-length descriptors and centers"));
    }
    let mut matrix = vec![0.0; centers.len() * d];
    let mut assignment = Vec::with_capacity(descriptors.len());
    let mut ties = Vec::new();
    for (i, f) in descriptors.iter().enumerate() {
        let dist: Vec<f64> = centers
            .iter()
            .map(|c| f.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum())
            .collect();
        let mut best = 0;
        for k in 1..dist.len() {
            if dist[k] < dist[best] {
                best = k;
            }
        }
        if dist.iter().enumerate().any(|(k, &v)| k != best && v == dist[best]) {
            ties.push(i);
        }
        for j in 0..d {
            matrix[best * d + j] += f[j] - centers[best][j];
        }
        assignment.push(best);
    }
    Ok(HardVlad {
        matrix,
        assignment,
        ties,
    })
}

/// Gaussian directions scaled to unit length.
pub fn random_unit_vectors(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    (0..count)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            v.into_iter().map(|x| x / n).collect()
        })
        .collect()
}

/// Lloyd's k-means seeded from `k` distinct random descriptors. With fewer
/// than `k` descriptors the centers are random unit vectors instead.
/// Clusters that empty out keep their previous center.
pub fn kmeans_centers(descriptors: &[Vec<f64>], k: usize, dim: usize, iterations: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    if descriptors.len() < k {
        return random_unit_vectors(k, dim, rng);
    }
    let mut order: Vec<usize> = (0..descriptors.len()).collect();
    order.shuffle(rng);
    let mut centers: Vec<Vec<f64>> = order[..k].iter().map(|&i| descriptors[i].clone()).collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for f in descriptors {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (c, center) in centers.iter().enumerate() {
                let dist: f64 = f.iter().zip(center).map(|(a, b)| (a - b) * (a - b)).sum();
                if dist < best_d {
                    best_d = dist;
                    best = c;
                }
            }
            counts[best] += 1;
            sums[best].iter_mut().zip(f).for_each(|(s, v)| *s += v);
        }
        for c in 0..k {
            if counts[c] > 0 {
                centers[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
    }
    centers
}
