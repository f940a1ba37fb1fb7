use rand::Rng;

use super::params::{uniform_fan_in, ParamStore};
use crate::autodiff::{Reduce, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A stride-1 3D convolution layer: `kernel` is (temporal depth, k, k).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub padding: [usize; 3],
}

impl Conv3dSpec {
    /// `d x k x k` kernel with padding that preserves extents.
    pub fn same(in_channels: usize, out_channels: usize, d: usize, k: usize) -> Self {
        Conv3dSpec {
            in_channels,
            out_channels,
            kernel: [d, k, k],
            padding: [(d - 1) / 2, (k - 1) / 2, (k - 1) / 2],
        }
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        let [d, h, w] = self.kernel;
        [self.out_channels, self.in_channels, d, h, w]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    /// `floor((X + 2p - kernel) / 1) + 1` per axis, or `None` if empty.
    pub fn output_extents(&self, input: [usize; 3]) -> Option<[usize; 3]> {
        let mut out = [0; 3];
        for a in 0..3 {
            let padded = input[a] + 2 * self.padding[a];
            if padded < self.kernel[a] {
                return None;
            }
            out[a] = padded - self.kernel[a] + 1;
        }
        Some(out)
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, rng: &mut impl Rng) {
        store.insert(
            format!("{prefix}.weight"),
            uniform_fan_in(&self.weight_shape(), self.fan_in(), rng),
        );
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[self.out_channels]));
    }
}

/// Convolution checked against `spec`; `x` is `batch x channels x L x H x W`.
pub fn conv3d<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    weight: Var,
    bias: Var,
    spec: &Conv3dSpec,
) -> Result<Var> {
    let xs = tape.shape(x);
    if xs.len() != 5 || xs[1] != spec.in_channels {
        return Err(Error::invalid(format!(
            "conv3d expects {} input channels in a rank-5 tensor, got {xs:?}",
            spec.in_channels
        )));
    }
    let ws = tape.shape(weight);
    if ws != spec.weight_shape() {
        return Err(Error::shape("conv3d weight", ws, &spec.weight_shape()));
    }
    tape.conv3d(x, weight, Some(bias), spec.padding)
}

pub fn maxpool3d<T: Scalar>(tape: &mut Tape<T>, x: Var, kernel: [usize; 3]) -> Result<Var> {
    tape.maxpool3d(x, kernel)
}

/// Per-channel mean over (frames, height, width). A `C x L x H x W` cubic
/// gives a length-`C` vector, a batched one gives `batch x C`.
pub fn global_avgpool3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    global_pool3d(tape, x, Reduce::Mean)
}

pub fn global_maxpool3d<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    global_pool3d(tape, x, Reduce::Max)
}

fn global_pool3d<T: Scalar>(tape: &mut Tape<T>, x: Var, kind: Reduce) -> Result<Var> {
    let r = tape.shape(x).len();
    if !(4..=5).contains(&r) {
        return Err(Error::invalid(format!(
            "global pooling expects a rank-4 or rank-5 cubic, got {:?}",
            tape.shape(x)
        )));
    }
    tape.reduce(kind, x, &[r - 3, r - 2, r - 1])
}

/// `weights . x + bias` for a vector `x` or each row of a `batch x in`
/// matrix; `weights` is `out x in`.
pub fn fully_connected<T: Scalar>(tape: &mut Tape<T>, x: Var, weights: Var, bias: Var) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    let ws = tape.shape(weights).to_vec();
    let bs = tape.shape(bias).to_vec();
    let features = *xs.last().unwrap_or(&0);
    if ws.len() != 2 || xs.is_empty() || xs.len() > 2 || ws[1] != features {
        return Err(Error::shape("fully_connected", &xs, &ws));
    }
    if bs != [ws[0]] {
        return Err(Error::shape("fully_connected bias", &bs, &[ws[0]]));
    }
    let rows = if xs.len() == 2 { xs[0] } else { 1 };
    let x2 = tape.reshape(x, &[rows, features])?;
    let wt = tape.transpose(weights)?;
    let y = tape.matmul(x2, wt)?;
    let b2 = tape.reshape(bias, &[1, ws[0]])?;
    let b2 = tape.expand(b2, &[rows, ws[0]])?;
    let y = tape.add(y, b2)?;
    if xs.len() == 1 {
        tape.reshape(y, &[ws[0]])
    } else {
        Ok(y)
    }
}
