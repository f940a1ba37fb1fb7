use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::augment::augment_flip;
use super::clips::clip_split;
use super::schedule::{Phase, TrainSchedule};
use super::synth::Tracklet;
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::model::{Aggregation, ModelConfig, PersonVladNet};
use crate::oim::{lut_update, oim_loss, queue_push, subsample_partition, OimState};
use crate::tensor::Tensor;
use crate::vlad::{is_vlad_param, kmeans_centers};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OimConfig {
    pub tau: f64,
    pub queue_size: usize,
    pub momentum: f64,
    /// Candidates per row in the loss denominator; all when unset.
    pub sample_size: Option<usize>,
}

impl Default for OimConfig {
    fn default() -> Self {
        OimConfig {
            tau: 0.1,
            queue_size: 32,
            momentum: 0.5,
            sample_size: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamSettings {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamSettings {
    fn default() -> Self {
        let d = AdamConfig::default();
        AdamSettings {
            beta1: d.beta1,
            beta2: d.beta2,
            eps: d.eps,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Steps {
    #[serde(rename = "1")]
    One,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "both")]
    Both,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub schedule: TrainSchedule,
    pub adam: AdamSettings,
    pub oim: OimConfig,
    pub clip_len: usize,
    pub overlap: usize,
    pub kmeans_iterations: usize,
    pub steps: Steps,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            schedule: TrainSchedule::default(),
            adam: AdamSettings::default(),
            oim: OimConfig::default(),
            clip_len: 16,
            overlap: 8,
            kmeans_iterations: 10,
            steps: Steps::Both,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.adam_config(self.schedule.step1_lr).validate()?;
        if self.overlap >= self.clip_len {
            return Err(Error::Config(format!(
                "clip length {} must exceed overlap {}",
                self.clip_len, self.overlap
            )));
        }
        if self.oim.sample_size == Some(0) {
            return Err(Error::Config("OIM sample size must be at least 1".into()));
        }
        Ok(())
    }

    fn adam_config(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam.beta1,
            beta2: self.adam.beta2,
            eps: self.adam.eps,
        }
    }
}

/// Where training starts from.
pub enum Start {
    Fresh(ModelConfig),
    /// Trained weights with a new OIM table sized for this dataset.
    Finetune(PersonVladNet<f32>),
    /// Weights and OIM state of an earlier run on the same identities.
    Resume(PersonVladNet<f32>, OimState),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub iteration: u64,
    pub lr: f64,
    pub loss: f64,
}

pub struct Trained {
    pub net: PersonVladNet<f32>,
    pub oim: OimState,
    pub trace: Vec<TraceRow>,
    /// Identity of each OIM table row.
    pub identities: Vec<i64>,
}

pub fn write_trace_csv(mut w: impl Write, trace: &[TraceRow]) -> std::io::Result<()> {
    writeln!(w, "iteration,lr,loss")?;
    for r in trace {
        writeln!(w, "{},{},{}", r.iteration, r.lr, r.loss)?;
    }
    Ok(())
}

pub fn save_trace_csv(path: &Path, trace: &[TraceRow]) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_csv(&mut buf, trace).map_err(|e| Error::io(path, e))?;
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless sequence of reshuffled passes over `0..n`.
struct BatchOrder {
    order: Vec<usize>,
    next: usize,
}

impl BatchOrder {
    fn new(n: usize) -> Self {
        BatchOrder {
            order: (0..n).collect(),
            next: n,
        }
    }

    fn take(&mut self, size: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        (0..size)
            .map(|_| {
                if self.next == self.order.len() {
                    self.order.shuffle(rng);
                    self.next = 0;
                }
                self.next += 1;
                self.order[self.next - 1]
            })
            .collect()
    }
}

struct Sample {
    clip: Tensor<f32>,
    label: Option<usize>,
}

const EMBED_BATCH: usize = 8;

fn init_centers(net: &mut PersonVladNet<f32>, samples: &[Sample], iterations: usize, rng: &mut ChaCha8Rng) -> Result<()> {
    let mut descriptors = Vec::new();
    for chunk in samples.chunks(EMBED_BATCH) {
        let clips: Vec<&Tensor<f32>> = chunk.iter().map(|s| &s.clip).collect();
        let (_, parts) = net.embed_with_parts(&clips)?;
        for clip in parts {
            descriptors.extend(clip.into_iter().map(|p| p.into_iter().map(f64::from).collect::<Vec<f64>>()));
        }
    }
    let cfg = net.config();
    let (k, d) = (cfg.clusters, cfg.feature_dim());
    let centers = kmeans_centers(&descriptors, k, d, iterations, rng);
    let flat: Vec<f64> = centers.into_iter().flatten().collect();
    net.set_centers(Tensor::from_f64(&[k, d], &flat)?)
}

/// Runs the selected training phases over `tracklets` (labeled ones with
/// `identity >= 0`, unlabeled ones with `-1`). Phase one keeps the VLAD
/// parameters fixed; phase two trains everything. `progress` sees every
/// trace row as it is produced.
pub fn train_two_step(
    tracklets: &[&Tracklet],
    start: Start,
    config: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&TraceRow),
) -> Result<Trained> {
    config.validate()?;
    let identities: Vec<i64> = tracklets
        .iter()
        .map(|t| t.record.identity)
        .filter(|&i| i >= 0)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if identities.len() < 2 {
        return Err(Error::Config(format!(
            "training needs at least 2 labeled identities, found {}",
            identities.len()
        )));
    }
    let mut samples = Vec::new();
    for t in tracklets {
        let label = identities.binary_search(&t.record.identity).ok();
        for clip in clip_split(&t.frames, config.clip_len, config.overlap)? {
            samples.push(Sample { clip, label });
        }
    }

    let mut init_rng = stream(seed, 1);
    let mut order_rng = stream(seed, 2);
    let mut flip_rng = stream(seed, 3);
    let mut sample_rng = stream(seed, 4);

    let new_oim = |dim: usize| {
        let o = &config.oim;
        OimState::new(identities.len(), dim, o.queue_size, o.tau, o.momentum)
    };
    let (mut net, mut oim) = match start {
        Start::Fresh(model) => {
            if config.steps == Steps::Two {
                return Err(Error::Config(
                    "step 2 alone needs a finetune or resume checkpoint".into(),
                ));
            }
            let mut net = PersonVladNet::new(model, &mut init_rng)?;
            if net.config().aggregation == Aggregation::Vlad {
                init_centers(&mut net, &samples, config.kmeans_iterations, &mut init_rng)?;
            }
            let oim = new_oim(net.descriptor_dim())?;
            (net, oim)
        }
        Start::Finetune(net) => {
            let oim = new_oim(net.descriptor_dim())?;
            (net, oim)
        }
        Start::Resume(net, oim) => {
            if oim.classes() != identities.len() || oim.dim() != net.descriptor_dim() {
                return Err(Error::Config(format!(
                    "checkpoint OIM table is {} x {}, dataset needs {} x {}",
                    oim.classes(),
                    oim.dim(),
                    identities.len(),
                    net.descriptor_dim()
                )));
            }
            (net, oim)
        }
    };
    for s in &samples {
        let want = [3, net.config().input[0], net.config().input[1], net.config().input[2]];
        if s.clip.shape() != want {
            return Err(Error::Config(format!(
                "dataset clips are {:?} but the model expects {want:?}",
                s.clip.shape()
            )));
        }
    }

    let schedule = &config.schedule;
    let phases: Vec<(Phase, u64)> = match config.steps {
        Steps::One => vec![(Phase::One, schedule.step1_iterations)],
        Steps::Two => vec![(Phase::Two, schedule.step2_iterations)],
        Steps::Both => vec![
            (Phase::One, schedule.step1_iterations),
            (Phase::Two, schedule.step2_iterations),
        ],
    };
    let mut order = BatchOrder::new(samples.len());
    let mut trace = Vec::new();
    let mut iteration = 0u64;
    for (phase, count) in phases {
        let mut adam = AdamState::new();
        for it in 0..count {
            let lr = schedule.lr(phase, it);
            let picked = order.take(schedule.batch_size, &mut order_rng);
            let clips: Vec<Tensor<f32>> = picked
                .iter()
                .map(|&i| augment_flip(&samples[i].clip, schedule.flip_probability, &mut flip_rng).0)
                .collect();
            let labels: Vec<Option<usize>> = picked.iter().map(|&i| samples[i].label).collect();
            let loss = train_step(
                &mut net,
                &mut oim,
                &mut adam,
                &clips,
                &labels,
                phase,
                config,
                lr,
                it + 1,
                &mut sample_rng,
            )?;
            let row = TraceRow { iteration, lr, loss };
            progress(&row);
            trace.push(row);
            iteration += 1;
        }
    }
    Ok(Trained {
        net,
        oim,
        trace,
        identities,
    })
}

/// One forward, backward, optimizer update and table refresh. Returns the
/// batch loss, or NaN when the batch held no labeled clip (no update).
#[allow(clippy::too_many_arguments)]
fn train_step(
    net: &mut PersonVladNet<f32>,
    oim: &mut OimState,
    adam: &mut AdamState<f32>,
    clips: &[Tensor<f32>],
    labels: &[Option<usize>],
    phase: Phase,
    config: &TrainConfig,
    lr: f64,
    t: u64,
    sample_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let refs: Vec<&Tensor<f32>> = clips.iter().collect();
    let batch = net.prepare_batch(&refs)?;
    let mut tape = Tape::new();
    let params = net.bind(&mut tape, |n| phase == Phase::Two || !is_vlad_param(n));
    let x = tape.constant(batch);
    let out = net.forward(&mut tape, &params, x)?;

    let rows: Vec<usize> = (0..labels.len()).filter(|&r| labels[r].is_some()).collect();
    let targets: Vec<usize> = rows.iter().map(|&r| labels[r].expect("filtered")).collect();
    let mut loss_value = f64::NAN;
    if !rows.is_empty() {
        let mut select = Tensor::zeros(&[rows.len(), labels.len()]);
        for (i, &r) in rows.iter().enumerate() {
            select.data_mut()[i * labels.len() + r] = 1.0;
        }
        let select = tape.constant(select);
        let v = tape.matmul(select, out.descriptors)?;
        let subsets = match config.oim.sample_size {
            Some(s) => Some(
                targets
                    .iter()
                    .map(|&l| subsample_partition(oim, l, s, sample_rng))
                    .collect::<Result<Vec<_>>>()?,
            ),
            None => None,
        };
        let loss = oim_loss(&mut tape, v, &targets, oim, subsets.as_deref())?;
        loss_value = tape.value(loss.loss).item() as f64;
        if !loss_value.is_finite() {
            return Err(Error::invalid(format!("training diverged: loss {loss_value}")));
        }
        let mut grads = tape.backward(loss.loss)?;
        let grads = params.collect(&mut grads);
        adam_step(net.params_mut(), &grads, &config.adam_config(lr), adam, t)?;
    }

    let dim = net.descriptor_dim();
    let descriptors = tape.value(out.descriptors).data();
    for (r, label) in labels.iter().enumerate() {
        let v = &descriptors[r * dim..(r + 1) * dim];
        match label {
            Some(l) => lut_update(oim, *l, v)?,
            None => queue_push(oim, v)?,
        }
    }
    Ok(loss_value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::small_config;
    use crate::train::synth::{generate_synthetic, Split, SynthConfig};

    fn tiny_data(identities: usize) -> Vec<Tracklet> {
        let cfg = SynthConfig {
            identities,
            tracklets_per_identity: 2,
            frames: 16,
            height: 32,
            width: 32,
            distractors: 1,
            heldout_per_identity: 0,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg, 16, 9).unwrap().tracklets
    }

    fn tiny_config(iterations: u64) -> TrainConfig {
        TrainConfig {
            schedule: TrainSchedule {
                step1_iterations: iterations,
                step2_iterations: iterations,
                batch_size: 3,
                ..TrainSchedule::default()
            },
            oim: OimConfig {
                queue_size: 2,
                ..OimConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_identity_is_rejected() {
        let data = tiny_data(2);
        let one: Vec<&Tracklet> = data.iter().filter(|t| t.record.identity <= 0).collect();
        let r = train_two_step(&one, Start::Fresh(small_config()), &tiny_config(1), 0, |_| {});
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn step_two_alone_needs_a_checkpoint() {
        let data = tiny_data(2);
        let all: Vec<&Tracklet> = data.iter().collect();
        let cfg = TrainConfig {
            steps: Steps::Two,
            ..tiny_config(1)
        };
        assert!(train_two_step(&all, Start::Fresh(small_config()), &cfg, 0, |_| {}).is_err());
    }

    #[test]
    fn first_phase_leaves_cluster_parameters_untouched() {
        let data = tiny_data(2);
        let all: Vec<&Tracklet> = data.iter().filter(|t| t.record.split == Split::Train).collect();
        let cfg = TrainConfig {
            steps: Steps::One,
            ..tiny_config(2)
        };
        let mut rng = stream(0, 1);
        let mut net = PersonVladNet::new(small_config(), &mut rng).unwrap();
        let mut samples = Vec::new();
        for t in &all {
            for clip in clip_split(&t.frames, 16, 8).unwrap() {
                samples.push(Sample { clip, label: None });
            }
        }
        init_centers(&mut net, &samples, 10, &mut rng).unwrap();
        let before = net.clone();
        let out = train_two_step(&all, Start::Finetune(net), &cfg, 0, |_| {}).unwrap();
        for (name, value) in before.params().iter() {
            let after = out.net.params().get(name).unwrap();
            if is_vlad_param(name) {
                assert_eq!(after, value, "{name}");
            }
        }
        assert_ne!(
            out.net.params().get("backbone.conv1.weight").unwrap(),
            before.params().get("backbone.conv1.weight").unwrap()
        );
        assert_eq!(out.trace.len(), 2);
        assert!(out.oim.queue_len() <= 2);
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let data = tiny_data(2);
        let all: Vec<&Tracklet> = data.iter().collect();
        let run = || train_two_step(&all, Start::Fresh(small_config()), &tiny_config(2), 5, |_| {}).unwrap();
        let (a, b) = (run(), run());
        let bits = |t: &[TraceRow]| t.iter().map(|r| r.loss.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.trace), bits(&b.trace));
        assert_eq!(a.net, b.net);
        assert_eq!(a.trace.len(), 4);
        assert_eq!(a.trace[2].lr, 1e-4);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let mut buf = Vec::new();
        let rows = [TraceRow {
            iteration: 0,
            lr: 0.003,
            loss: 1.5,
        }];
        write_trace_csv(&mut buf, &rows).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "iteration,lr,loss\n0,0.003,1.5\n");
    }
}
