//! Part maps over the last backbone cubic, attention weighting and the
//! fixed-partition alternatives.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fully_connected, global_avgpool3d, global_maxpool3d, uniform_fan_in, Bindings, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Where the per-part masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PartMode {
    Learned,
    Stripes,
    Grid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionLayout {
    Stripes,
    Grid,
}

/// `branches` independent 1x1x1 detectors reading `channels`-deep cubics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PartDetectorBank {
    pub branches: usize,
    pub channels: usize,
}

impl PartDetectorBank {
    pub fn weight_name(branch: usize) -> String {
        format!("detector.{branch}.weight")
    }

    pub fn bias_name(branch: usize) -> String {
        format!("detector.{branch}.bias")
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for b in 0..self.branches {
            store.insert(
                Self::weight_name(b),
                uniform_fan_in(&[1, self.channels, 1, 1, 1], self.channels, rng),
            );
            store.insert(Self::bias_name(b), Tensor::zeros(&[1]));
        }
    }

    /// One map per branch, each `batch x 1 x L x H x W`.
    pub fn part_maps<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, f: Var) -> Result<Vec<Var>> {
        (0..self.branches)
            .map(|b| {
                let w = params.get(&Self::weight_name(b))?;
                let bias = params.get(&Self::bias_name(b))?;
                part_map(tape, f, w, bias)
            })
            .collect()
    }
}

/// `sigmoid(sum_c w[c] f(c, l, x, y) + bias)` for a batched cubic `f`
/// (`batch x C x L x H x W`). `weight` is `1 x C x 1 x 1 x 1`.
pub fn part_map<T: Scalar>(tape: &mut Tape<T>, f: Var, weight: Var, bias: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ws = tape.shape(weight).to_vec();
    if fs.len() != 5 {
        return Err(Error::invalid(format!("part_map expects a batched cubic, got {fs:?}")));
    }
    if ws != [1, fs[1], 1, 1, 1] {
        return Err(Error::shape("part_map weight", &ws, &[1, fs[1], 1, 1, 1]));
    }
    if tape.shape(bias) != [1] {
        return Err(Error::shape("part_map bias", tape.shape(bias), &[1]));
    }
    let logits = tape.conv3d(f, weight, Some(bias), [0, 0, 0])?;
    Ok(tape.sigmoid(logits))
}

/// Scales every channel of `f` by the map `m` (`batch x 1 x L x H x W`).
pub fn attend<T: Scalar>(tape: &mut Tape<T>, f: Var, m: Var) -> Result<Var> {
    let fs = tape.shape(f).to_vec();
    let ms = tape.shape(m).to_vec();
    let ok = fs.len() == 5 && ms.len() == 5 && ms[0] == fs[0] && ms[1] == 1 && ms[2..] == fs[2..];
    if !ok {
        return Err(Error::shape("attend", &fs, &ms));
    }
    let wide = tape.expand(m, &fs)?;
    tape.mul(f, wide)
}

/// Per-channel average of an attended cubic: `batch x C`.
pub fn part_descriptor<T: Scalar>(tape: &mut Tape<T>, fb: Var) -> Result<Var> {
    global_avgpool3d(tape, fb)
}

/// Splits `n` into `parts` bands of `n / parts`, the last one taking the
/// remainder. Bands are empty when `n < parts`, except the last.
fn band_bounds(n: usize, parts: usize) -> Vec<(usize, usize)> {
    let step = n / parts;
    (0..parts)
        .map(|i| {
            let start = i * step;
            let end = if i + 1 == parts { n } else { start + step };
            (start, end)
        })
        .collect()
}

/// Binary `L x H x W` masks partitioning every frame: `count` horizontal
/// stripes, or a `count x count` grid in row-major cell order.
pub fn fixed_region_maps<T: Scalar>(layout: RegionLayout, extents: [usize; 3], count: usize) -> Result<Vec<Tensor<T>>> {
    if count == 0 || extents.contains(&0) {
        return Err(Error::invalid(format!(
            "cannot partition extents {extents:?} into {count} regions"
        )));
    }
    let [l, h, w] = extents;
    let rows = band_bounds(h, count);
    let cols = match layout {
        RegionLayout::Stripes => vec![(0, w)],
        RegionLayout::Grid => band_bounds(w, count),
    };
    let mut maps = Vec::with_capacity(rows.len() * cols.len());
    for &(r0, r1) in &rows {
        for &(c0, c1) in &cols {
            let mut data = vec![T::zero(); l * h * w];
            for z in 0..l {
                for y in r0..r1 {
                    let row = (z * h + y) * w;
                    data[row + c0..row + c1].iter_mut().for_each(|v| *v = T::one());
                }
            }
            maps.push(Tensor::from_parts(vec![l, h, w], data));
        }
    }
    Ok(maps)
}

/// Puts fixed masks on the tape as constants shaped for [`attend`].
pub fn fixed_map_vars<T: Scalar>(tape: &mut Tape<T>, maps: &[Tensor<T>], batch: usize) -> Result<Vec<Var>> {
    maps.iter()
        .map(|m| {
            let s = m.shape();
            let one = tape.constant(m.clone().reshape(&[1, 1, s[0], s[1], s[2]])?);
            tape.expand(one, &[batch, 1, s[0], s[1], s[2]])
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadPooling {
    Avg,
    Max,
}

/// Per-branch pool, FC, ReLU, FC; the branch outputs are concatenated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BaselineHead {
    pub branches: usize,
    pub in_dim: usize,
    pub hidden: usize,
    pub out_dim: usize,
    pub pooling: HeadPooling,
}

impl BaselineHead {
    fn name(branch: usize, layer: &str, what: &str) -> String {
        format!("head.{branch}.{layer}.{what}")
    }

    pub fn output_len(&self) -> usize {
        self.branches * self.out_dim
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for b in 0..self.branches {
            store.insert(
                Self::name(b, "fc6", "weight"),
                uniform_fan_in(&[self.hidden, self.in_dim], self.in_dim, rng),
            );
            store.insert(Self::name(b, "fc6", "bias"), Tensor::zeros(&[self.hidden]));
            store.insert(
                Self::name(b, "fc7", "weight"),
                uniform_fan_in(&[self.out_dim, self.hidden], self.hidden, rng),
            );
            store.insert(Self::name(b, "fc7", "bias"), Tensor::zeros(&[self.out_dim]));
        }
    }

    /// `parts` are the attended cubics, one per branch; returns
    /// `batch x (branches * out_dim)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, parts: &[Var]) -> Result<Var> {
        if parts.len() != self.branches {
            return Err(Error::invalid(format!(
                "head has {} branches, got {} cubics",
                self.branches,
                parts.len()
            )));
        }
        let mut outs = Vec::with_capacity(parts.len());
        for (b, &fb) in parts.iter().enumerate() {
            let pooled = match self.pooling {
                HeadPooling::Avg => global_avgpool3d(tape, fb)?,
                HeadPooling::Max => global_maxpool3d(tape, fb)?,
            };
            let w6 = params.get(&Self::name(b, "fc6", "weight"))?;
            let b6 = params.get(&Self::name(b, "fc6", "bias"))?;
            let w7 = params.get(&Self::name(b, "fc7", "weight"))?;
            let b7 = params.get(&Self::name(b, "fc7", "bias"))?;
            let h = fully_connected(tape, pooled, w6, b6)?;
            let h = tape.relu(h);
            outs.push(fully_connected(tape, h, w7, b7)?);
        }
        let axis = tape.shape(outs[0]).len() - 1;
        tape.concat(&outs, axis)
    }
}
