//! The assembled network: backbone, part attention, aggregation and the
//! final normalization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, fixed_map_vars, fixed_region_maps, part_descriptor, BaselineHead, HeadPooling, PartDetectorBank, PartMode,
    RegionLayout,
};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BackboneSpec, Bindings, ParamStore};
use crate::tensor::{Scalar, Tensor};
use crate::vlad::{self, flatten_l2, intra_normalize, random_unit_vectors, VladParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Vlad,
    Avg,
    Max,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Clip extents: frames, height, width.
    pub input: [usize; 3],
    pub backbone: BackboneSpec,
    pub parts: PartMode,
    /// Learned part detectors.
    pub branches: usize,
    /// Stripes, or grid cells per side, for fixed partitions.
    pub regions: usize,
    pub aggregation: Aggregation,
    pub clusters: usize,
    pub alpha: f64,
    /// Output width of each baseline head branch.
    pub head_dim: usize,
    pub eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input: [16, 32, 64],
            backbone: BackboneSpec::default(),
            parts: PartMode::Learned,
            branches: 6,
            regions: 5,
            aggregation: Aggregation::Vlad,
            clusters: 64,
            alpha: 1000.0,
            head_dim: 128,
            eps: 1e-12,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.backbone.output_extents(self.input)?;
        if self.branches == 0 || self.regions == 0 || self.clusters == 0 || self.head_dim == 0 {
            return Err(Error::Config(
                "branches, regions, clusters and head_dim must all be positive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!("eps must be positive, got {}", self.eps)));
        }
        Ok(())
    }

    pub fn part_count(&self) -> usize {
        match self.parts {
            PartMode::Learned => self.branches,
            PartMode::Stripes => self.regions,
            PartMode::Grid => self.regions * self.regions,
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn descriptor_dim(&self) -> usize {
        match self.aggregation {
            Aggregation::Vlad => self.clusters * self.feature_dim(),
            Aggregation::Avg | Aggregation::Max => self.part_count() * self.head_dim,
        }
    }

    fn head(&self) -> Option<BaselineHead> {
        let pooling = match self.aggregation {
            Aggregation::Vlad => return None,
            Aggregation::Avg => HeadPooling::Avg,
            Aggregation::Max => HeadPooling::Max,
        };
        Some(BaselineHead {
            branches: self.part_count(),
            in_dim: self.feature_dim(),
            hidden: self.head_dim,
            out_dim: self.head_dim,
            pooling,
        })
    }

    fn detectors(&self) -> Option<PartDetectorBank> {
        (self.parts == PartMode::Learned).then(|| PartDetectorBank {
            branches: self.branches,
            channels: self.feature_dim(),
        })
    }
}

/// Output of one forward pass.
pub struct Forward {
    /// `batch x descriptor_dim`, unit rows.
    pub descriptors: Var,
    /// `batch x parts x feature_dim` part descriptors (VLAD models only).
    pub parts: Option<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PersonVladNet<T> {
    config: ModelConfig,
    params: ParamStore<T>,
}

impl<T: Scalar> PersonVladNet<T> {
    /// Fresh parameters. VLAD centers start as random unit vectors; callers
    /// normally replace them with [`PersonVladNet::set_centers`].
    pub fn new(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        config.backbone.init_params(&mut params, rng);
        if let Some(bank) = config.detectors() {
            bank.init_params(&mut params, rng);
        }
        match config.head() {
            Some(head) => head.init_params(&mut params, rng),
            None => {
                let d = config.feature_dim();
                let units = random_unit_vectors(config.clusters, d, rng);
                let flat: Vec<f64> = units.into_iter().flatten().collect();
                let centers = Tensor::from_f64(&[config.clusters, d], &flat)?;
                VladParams::tied(centers, config.alpha)?.insert_into(&mut params);
            }
        }
        Ok(PersonVladNet { config, params })
    }

    /// Wraps loaded parameters, checking every expected name and shape.
    pub fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let reference = PersonVladNet::<T>::new(config.clone(), &mut rng)?;
        for (name, want) in reference.params.iter() {
            let got = params.get(name).map_err(|_| Error::format("checkpoint", format!("missing parameter {name}")))?;
            if got.shape() != want.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, model expects {:?}", got.shape(), want.shape()),
                ));
            }
        }
        if let Some((extra, _)) = params.iter().find(|(n, _)| !reference.params.contains(n)) {
            return Err(Error::format("checkpoint", format!("unexpected parameter {extra}")));
        }
        Ok(PersonVladNet { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn descriptor_dim(&self) -> usize {
        self.config.descriptor_dim()
    }

    /// Replaces the cluster centers and re-ties the assignment parameters.
    pub fn set_centers(&mut self, centers: Tensor<T>) -> Result<()> {
        let want = [self.config.clusters, self.config.feature_dim()];
        if self.config.aggregation != Aggregation::Vlad || centers.shape() != want {
            return Err(Error::shape("set_centers", centers.shape(), &want));
        }
        VladParams::tied(centers, self.config.alpha)?.insert_into(&mut self.params);
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bindings {
        self.params.bind(tape, |n| n != vlad::ALPHA && trainable(n))
    }

    /// Stacks clips (`3 x L x H x W`, values in [0, 1]) into a centered
    /// batch.
    pub fn prepare_batch(&self, clips: &[&Tensor<f32>]) -> Result<Tensor<T>> {
        let [l, h, w] = self.config.input;
        let c = self.config.backbone.in_channels;
        let want = [c, l, h, w];
        let mut data = Vec::with_capacity(clips.len() * c * l * h * w);
        for clip in clips {
            if clip.shape() != want {
                return Err(Error::shape("clip", clip.shape(), &want));
            }
            data.extend(clip.data().iter().map(|&v| T::of(v as f64 - 0.5)));
        }
        Tensor::new(&[clips.len(), c, l, h, w], data)
    }

    pub fn forward(&self, tape: &mut Tape<T>, params: &Bindings, clips: Var) -> Result<Forward> {
        let cfg = &self.config;
        let f = cfg.backbone.forward(tape, params, clips)?;
        let shape = tape.shape(f).to_vec();
        let (n, ext) = (shape[0], [shape[2], shape[3], shape[4]]);
        let maps = match cfg.parts {
            PartMode::Learned => cfg.detectors().expect("learned parts").part_maps(tape, params, f)?,
            PartMode::Stripes | PartMode::Grid => {
                let layout = if cfg.parts == PartMode::Stripes {
                    RegionLayout::Stripes
                } else {
                    RegionLayout::Grid
                };
                let fixed = fixed_region_maps::<T>(layout, ext, cfg.regions)?;
                fixed_map_vars(tape, &fixed, n)?
            }
        };
        let attended = maps.iter().map(|&m| attend(tape, f, m)).collect::<Result<Vec<_>>>()?;
        match cfg.head() {
            Some(head) => {
                let out = head.forward(tape, params, &attended)?;
                let descriptors = tape.l2_normalize(out, cfg.eps)?;
                Ok(Forward {
                    descriptors,
                    parts: None,
                })
            }
            None => {
                let d = cfg.feature_dim();
                let mut rows = Vec::with_capacity(attended.len());
                for &fb in &attended {
                    let p = part_descriptor(tape, fb)?;
                    rows.push(tape.reshape(p, &[n, 1, d])?);
                }
                let parts = tape.concat(&rows, 1)?;
                let v = vlad::vlad_from_bindings(tape, params, parts)?;
                let v = intra_normalize(tape, v, cfg.eps)?;
                let descriptors = flatten_l2(tape, v, cfg.eps)?;
                Ok(Forward {
                    descriptors,
                    parts: Some(parts),
                })
            }
        }
    }

    /// Inference pass: one descriptor per clip.
    pub fn embed(&self, clips: &[&Tensor<f32>]) -> Result<Vec<Vec<f32>>> {
        Ok(self.embed_with_parts(clips)?.0)
    }

    /// Descriptors plus, for VLAD models, each clip's part descriptors.
    pub fn embed_with_parts(&self, clips: &[&Tensor<f32>]) -> Result<(Vec<Vec<f32>>, Vec<Vec<Vec<f32>>>)> {
        let batch = self.prepare_batch(clips)?;
        let mut tape = Tape::new();
        let params = self.params.bind(&mut tape, |_| false);
        let x = tape.constant(batch);
        let out = self.forward(&mut tape, &params, x)?;
        let to_rows = |t: &Tensor<T>, width: usize| -> Vec<Vec<f32>> {
            t.data().chunks(width).map(|r| r.iter().map(|v| v.as_f64() as f32).collect()).collect()
        };
        let descriptors = to_rows(tape.value(out.descriptors), self.descriptor_dim());
        let parts = match out.parts {
            Some(p) => {
                let d = self.config.feature_dim();
                let per_clip = self.config.part_count() * d;
                tape.value(p)
                    .data()
                    .chunks(per_clip)
                    .map(|c| c.chunks(d).map(|r| r.iter().map(|v| v.as_f64() as f32).collect()).collect())
                    .collect()
            }
            None => Vec::new(),
        };
        Ok((descriptors, parts))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;

    /// A narrow network on the smallest clip the default pooling accepts.
    pub(crate) fn small_config() -> ModelConfig {
        ModelConfig {
            input: [16, 32, 32],
            backbone: BackboneSpec {
                filters: vec![4, 4, 4, 4, 6],
                ..BackboneSpec::default()
            },
            branches: 2,
            clusters: 3,
            alpha: 10.0,
            head_dim: 4,
            ..ModelConfig::default()
        }
    }

    fn clip(rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Tensor<f32> {
        let [l, h, w] = cfg.input;
        let n = 3 * l * h * w;
        Tensor::new(&[3, l, h, w], (0..n).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn default_descriptor_is_16384_long() {
        assert_eq!(ModelConfig::default().descriptor_dim(), 16_384);
        let cfg = ModelConfig {
            aggregation: Aggregation::Avg,
            ..ModelConfig::default()
        };
        assert_eq!(cfg.descriptor_dim(), 768);
    }

    #[test]
    fn every_variant_emits_unit_descriptors() {
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        for aggregation in [Aggregation::Vlad, Aggregation::Avg, Aggregation::Max] {
            for parts in [PartMode::Learned, PartMode::Stripes, PartMode::Grid] {
                let cfg = ModelConfig {
                    aggregation,
                    parts,
                    ..small_config()
                };
                let net = PersonVladNet::<f32>::new(cfg.clone(), &mut rng).unwrap();
                let clips = [clip(&mut rng, &cfg), clip(&mut rng, &cfg)];
                let (desc, parts_out) = net.embed_with_parts(&[&clips[0], &clips[1]]).unwrap();
                assert_eq!(desc.len(), 2);
                for d in &desc {
                    assert_eq!(d.len(), cfg.descriptor_dim());
                    let n: f64 = d.iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
                    assert!(n == 0.0 || (n - 1.0).abs() <= 1e-5, "{aggregation:?} {parts:?} {n}");
                }
                if aggregation == Aggregation::Vlad {
                    assert_eq!(parts_out[0].len(), cfg.part_count());
                }
            }
        }
    }

    #[test]
    fn wrong_clip_shape_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let net = PersonVladNet::<f32>::new(small_config(), &mut rng).unwrap();
        let bad = Tensor::zeros(&[3, 16, 32, 64]);
        assert!(net.embed(&[&bad]).is_err());
    }

    #[test]
    fn too_small_input_is_a_config_error() {
        let cfg = ModelConfig {
            input: [8, 16, 16],
            ..small_config()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn from_parts_checks_names_and_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let net = PersonVladNet::<f32>::new(small_config(), &mut rng).unwrap();
        assert!(PersonVladNet::from_parts(small_config(), net.params().clone()).is_ok());
        let mut missing = net.params().clone();
        missing.remove("detector.0.bias");
        assert!(PersonVladNet::from_parts(small_config(), missing).is_err());
        let mut reshaped = net.params().clone();
        reshaped.insert("vlad.centers", Tensor::zeros(&[2, 6]));
        assert!(PersonVladNet::from_parts(small_config(), reshaped).is_err());
    }
}
