use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{conv3d, maxpool3d, Conv3dSpec};
use super::params::{Bindings, ParamStore};
use crate::autodiff::pooled_extents;
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Five conv/ReLU/max-pool stages over RGB clips.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub filters: Vec<usize>,
    pub pool_kernels: Vec<[usize; 3]>,
    /// Temporal depth `d` and spatial size `k` of every conv kernel.
    pub kernel_depth: usize,
    pub kernel_size: usize,
}

impl Default for BackboneSpec {
    fn default() -> Self {
        BackboneSpec {
            in_channels: 3,
            filters: vec![64, 128, 256, 256, 256],
            pool_kernels: vec![[1, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2]],
            kernel_depth: 3,
            kernel_size: 3,
        }
    }
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.filters.len() != 5 || self.pool_kernels.len() != 5 {
            return Err(Error::Config(format!(
                "backbone needs exactly 5 conv and 5 pool stages, got {} and {}",
                self.filters.len(),
                self.pool_kernels.len()
            )));
        }
        if self.filters.contains(&0)
            || self.in_channels == 0
            || self.kernel_depth.is_multiple_of(2)
            || self.kernel_size.is_multiple_of(2)
            || self.pool_kernels.iter().flatten().any(|&k| k == 0)
        {
            return Err(Error::Config(
                "backbone filters and pool kernels must be positive, conv kernels odd".into(),
            ));
        }
        Ok(())
    }

    pub fn conv_specs(&self) -> Vec<Conv3dSpec> {
        let mut in_ch = self.in_channels;
        self.filters
            .iter()
            .map(|&out| {
                let spec = Conv3dSpec::same(in_ch, out, self.kernel_depth, self.kernel_size);
                in_ch = out;
                spec
            })
            .collect()
    }

    pub fn out_channels(&self) -> usize {
        *self.filters.last().expect("validated backbone has 5 stages")
    }

    /// Pool5 extents for an `(L, H, W)` clip, stage by stage with the floor
    /// rule.
    pub fn output_extents(&self, input: [usize; 3]) -> Result<[usize; 3]> {
        let mut ext = input;
        for (conv, &kernel) in self.conv_specs().iter().zip(&self.pool_kernels) {
            ext = conv
                .output_extents(ext)
                .and_then(|e| pooled_extents(e, kernel))
                .ok_or_else(|| Error::InputTooSmall {
                    shape: input.to_vec(),
                    minimal: self.minimal_input(),
                })?;
        }
        Ok(ext)
    }

    /// Smallest `(L, H, W)` that survives all five pooling stages.
    pub fn minimal_input(&self) -> [usize; 3] {
        let mut m = [1; 3];
        for k in &self.pool_kernels {
            for a in 0..3 {
                m[a] *= k[a];
            }
        }
        m
    }

    pub fn init_params<T: Scalar>(&self, store: &mut ParamStore<T>, rng: &mut impl Rng) {
        for (i, spec) in self.conv_specs().iter().enumerate() {
            spec.init_params(store, &format!("backbone.conv{}", i + 1), rng);
        }
    }

    /// `clips` is `batch x channels x L x H x W`; returns the pool5 cubic.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, params: &Bindings, clips: Var) -> Result<Var> {
        let shape = tape.shape(clips).to_vec();
        if shape.len() != 5 || shape[1] != self.in_channels {
            return Err(Error::invalid(format!(
                "backbone expects batch x {} x L x H x W clips, got {shape:?}",
                self.in_channels
            )));
        }
        self.output_extents([shape[2], shape[3], shape[4]])?;
        let mut x = clips;
        for (i, (spec, &kernel)) in self.conv_specs().iter().zip(&self.pool_kernels).enumerate() {
            let w = params.get(&format!("backbone.conv{}.weight", i + 1))?;
            let b = params.get(&format!("backbone.conv{}.bias", i + 1))?;
            x = conv3d(tape, x, w, b, spec)?;
            x = tape.relu(x);
            x = maxpool3d(tape, x, kernel)?;
        }
        Ok(x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Floor rule applied independently, stage by stage.
    fn shape_oracle(mut ext: [usize; 3]) -> [usize; 3] {
        for k in [[1, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2], [2, 2, 2]] {
            for a in 0..3 {
                ext[a] /= k[a];
            }
        }
        ext
    }

    #[test]
    fn pool5_extents_follow_the_floor_rule() {
        let spec = BackboneSpec::default();
        assert_eq!(spec.output_extents([16, 32, 64]).unwrap(), shape_oracle([16, 32, 64]));
        assert_eq!(spec.output_extents([16, 32, 64]).unwrap(), [1, 1, 2]);
        assert_eq!(spec.output_extents([16, 90, 180]).unwrap(), shape_oracle([16, 90, 180]));
        assert_eq!(spec.out_channels(), 256);
    }

    #[test]
    fn too_small_input_reports_minimal_shape() {
        let spec = BackboneSpec::default();
        match spec.output_extents([8, 16, 16]) {
            Err(Error::InputTooSmall { minimal, .. }) => assert_eq!(minimal, [16, 32, 32]),
            other => panic!("expected InputTooSmall, got {other:?}"),
        }
    }

    #[test]
    fn zero_input_with_zero_biases_gives_zero_cubic() {
        let spec = BackboneSpec {
            filters: vec![4, 4, 4, 4, 4],
            ..BackboneSpec::default()
        };
        let mut store = ParamStore::<f32>::new();
        spec.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(1));
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| false);
        let x = tape.constant(Tensor::zeros(&[1, 3, 16, 32, 32]));
        let f = spec.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.shape(f), &[1, 4, 1, 1, 1]);
        assert!(tape.value(f).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn default_backbone_emits_256_channels() {
        let spec = BackboneSpec::default();
        let mut store = ParamStore::<f32>::new();
        spec.init_params(&mut store, &mut ChaCha8Rng::seed_from_u64(2));
        let mut tape = Tape::new();
        let params = store.bind(&mut tape, |_| false);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = (0..3 * 16 * 32 * 32).map(|_| rng.gen_range(0.0..1.0)).collect();
        let x = tape.constant(Tensor::new(&[1, 3, 16, 32, 32], data).unwrap());
        let f = spec.forward(&mut tape, &params, x).unwrap();
        assert_eq!(tape.shape(f), &[1, 256, 1, 1, 1]);
    }

    #[test]
    fn stage_count_is_enforced() {
        let spec = BackboneSpec {
            filters: vec![8, 8],
            ..BackboneSpec::default()
        };
        assert!(spec.validate().is_err());
        assert!(BackboneSpec::default().validate().is_ok());
    }
}
