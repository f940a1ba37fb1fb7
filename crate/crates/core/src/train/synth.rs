//! Deterministic synthetic pedestrian videos and the on-disk manifest.

use std::f32::consts::TAU;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{load_pvt, save_pvt, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub identities: usize,
    pub tracklets_per_identity: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub cameras: usize,
    /// Extra unlabeled tracklets (identity -1).
    pub distractors: usize,
    /// Trailing tracklets of each identity kept out of training.
    pub heldout_per_identity: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            identities: 8,
            tracklets_per_identity: 4,
            frames: 32,
            height: 32,
            width: 64,
            cameras: 2,
            distractors: 0,
            heldout_per_identity: 1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self, clip_len: usize) -> Result<()> {
        if self.identities < 2 {
            return Err(Error::Config(format!(
                "need at least 2 identities, got {}",
                self.identities
            )));
        }
        if self.tracklets_per_identity < 2 {
            return Err(Error::Config(format!(
                "need at least 2 tracklets per identity, got {}",
                self.tracklets_per_identity
            )));
        }
        if self.heldout_per_identity >= self.tracklets_per_identity {
            return Err(Error::Config("every identity needs a training tracklet".into()));
        }
        if self.frames < clip_len {
            return Err(Error::Config(format!(
                "{} frames per tracklet is shorter than a {clip_len}-frame clip",
                self.frames
            )));
        }
        if self.height < 8 || self.width < 8 || self.cameras == 0 {
            return Err(Error::Config("frames must be at least 8x8 with one camera".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Heldout,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrackletRecord {
    pub id: usize,
    /// -1 for unlabeled tracklets.
    pub identity: i64,
    pub camera: u32,
    pub frame_count: usize,
    /// Relative to the manifest's directory.
    pub tensor_path: String,
    #[serde(default)]
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub tracklets: Vec<TrackletRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tracklet {
    pub record: TrackletRecord,
    /// `3 x frames x H x W`, values in [0, 1].
    pub frames: Tensor<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub tracklets: Vec<Tracklet>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            version: 1,
            tracklets: self.tracklets.iter().map(|t| t.record.clone()).collect(),
        }
    }

    /// Writes the manifest and one tensor file per tracklet under `dir`.
    pub fn save(&self, dir: &Path) -> Result<PathBuf> {
        for t in &self.tracklets {
            let path = dir.join(&t.record.tensor_path);
            if let Some(parent) = path.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_pvt(&path, &t.frames)?;
        }
        let manifest = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&self.manifest())?;
        std::fs::write(&manifest, text + "\n").map_err(|e| Error::io(&manifest, e))?;
        Ok(manifest)
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| Error::format(manifest_path.display().to_string(), e.to_string()))?;
        let root = manifest_path.parent().unwrap_or(Path::new("."));
        let tracklets = manifest
            .tracklets
            .into_iter()
            .map(|record| {
                let frames = load_pvt(&root.join(&record.tensor_path))?;
                let s = frames.shape();
                if s.len() != 4 || s[0] != 3 || s[1] != record.frame_count {
                    return Err(Error::format(
                        record.tensor_path.clone(),
                        format!("expected 3 x {} x H x W frames, got {s:?}", record.frame_count),
                    ));
                }
                Ok(Tracklet { record, frames })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset { tracklets })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Tracklet> {
        self.tracklets.iter().filter(move |t| t.record.split == split)
    }
}

struct Appearance {
    top: [f32; 3],
    bottom: [f32; 3],
    height: f32,
    width: f32,
    period: f32,
    /// Horizontal oscillation: start phase and amplitude as a fraction of
    /// the frame width.
    phase: f32,
    amplitude: f32,
}

fn hsv(h: f32, s: f32, v: f32) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

impl Appearance {
    /// `hue` fixes the upper-body color; the rest comes from `rng`.
    fn draw(hue: f32, rng: &mut ChaCha8Rng) -> Self {
        let bottom = (hue + 0.25 + 0.5 * rng.gen::<f32>()).rem_euclid(1.0);
        Appearance {
            top: hsv(hue, 0.85, 0.95),
            bottom: hsv(bottom, 0.6, 0.55 + 0.3 * rng.gen::<f32>()),
            height: rng.gen_range(0.7..0.95),
            width: rng.gen_range(0.12..0.2),
            period: rng.gen_range(12.0..24.0),
            phase: rng.gen_range(0.0..TAU),
            amplitude: rng.gen_range(0.12..0.3),
        }
    }
}

/// Camera look: backdrop and a brightness/contrast shift.
struct Scene {
    background: f32,
    texture: Vec<f32>,
    contrast: f32,
    brightness: f32,
}

/// Draws `frames` frames starting `offset` frames into the walk cycle.
fn render(look: &Appearance, scene: &Scene, offset: f32, frames: usize, h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (hf, wf) = (h as f32, w as f32);
    let body_h = look.height * hf;
    let body_w = (look.width * wf).max(3.0);
    let head_r = 0.12 * body_h;
    let skin = [0.92, 0.78, 0.62];
    let mut data = vec![0.0f32; 3 * frames * h * w];
    for t in 0..frames {
        let step = TAU * (t as f32 + offset) / look.period;
        let cx = wf / 2.0 + look.amplitude * wf * (step + look.phase).sin();
        let y0 = (hf - body_h) / 2.0 + if (2.0 * step).sin() > 0.0 { 1.0 } else { 0.0 };
        let waist = y0 + 0.55 * body_h;
        let swing = 0.15 * body_w * (2.0 * step + look.phase).sin();
        for y in 0..h {
            for x in 0..w {
                let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
                let head = (px - cx).powi(2) + (py - y0 - head_r).powi(2) <= head_r * head_r;
                let torso = py >= y0 + 2.0 * head_r && py < waist && (px - cx).abs() <= body_w / 2.0;
                let legs = py >= waist
                    && py < y0 + body_h
                    && ((px - cx + body_w / 4.0 - swing).abs() <= body_w / 5.0
                        || (px - cx - body_w / 4.0 + swing).abs() <= body_w / 5.0);
                let noise = rng.gen_range(-0.02f32..0.02);
                let rgb = if head {
                    skin
                } else if torso {
                    look.top
                } else if legs {
                    look.bottom
                } else {
                    let v = scene.background + scene.texture[y * w + x];
                    [v, v, v * 0.95]
                };
                for (c, &v) in rgb.iter().enumerate() {
                    let v = scene.contrast * (v + noise - 0.5) + 0.5 + scene.brightness;
                    data[((c * frames + t) * h + y) * w + x] = v.clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(&[3, frames, h, w], data).expect("extents match the buffer")
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn scene(config: &SynthConfig, camera: usize, rng: &mut ChaCha8Rng) -> Scene {
    let t = if config.cameras > 1 {
        camera as f32 / (config.cameras - 1) as f32
    } else {
        0.0
    };
    Scene {
        background: rng.gen_range(0.25..0.55),
        texture: (0..config.height * config.width).map(|_| rng.gen_range(-0.05..0.05)).collect(),
        contrast: 1.0 - 0.2 * t,
        brightness: 0.08 * t,
    }
}

/// Builds the dataset. Identity `i` gets an upper-body hue inside its own
/// slice `[i, i + 1) / identities` of the color wheel plus its own build and
/// walk; tracklet `j` of an identity is seen by camera `j % cameras` and
/// starts at a random point of the walk cycle. Each camera has a fixed
/// backdrop and brightness/contrast shift.
pub fn generate_synthetic(config: &SynthConfig, clip_len: usize, seed: u64) -> Result<Dataset> {
    config.validate(clip_len)?;
    let n = config.identities;
    let per = config.tracklets_per_identity;
    let scenes: Vec<Scene> = (0..config.cameras)
        .map(|c| scene(config, c, &mut stream(seed, 3_000_000 + c as u64)))
        .collect();
    let mut tracklets = Vec::with_capacity(n * per + config.distractors);
    let mut push = |identity: i64, camera: usize, split: Split, look: &Appearance, rng: &mut ChaCha8Rng| {
        let id = tracklets.len();
        let offset = rng.gen_range(0.0..look.period);
        let frames = render(look, &scenes[camera], offset, config.frames, config.height, config.width, rng);
        tracklets.push(Tracklet {
            record: TrackletRecord {
                id,
                identity,
                camera: camera as u32,
                frame_count: config.frames,
                tensor_path: format!("tracklets/t{id:04}.pvt"),
                split,
            },
            frames,
        });
    };
    for i in 0..n {
        let mut rng = stream(seed, 1 + i as u64);
        let hue = (i as f32 + rng.gen_range(0.15..0.85)) / n as f32;
        let look = Appearance::draw(hue, &mut rng);
        for j in 0..per {
            let split = if j >= per - config.heldout_per_identity {
                Split::Heldout
            } else {
                Split::Train
            };
            let mut trng = stream(seed, 1_000_000 + (i * per + j) as u64);
            push(i as i64, j % config.cameras, split, &look, &mut trng);
        }
    }
    for k in 0..config.distractors {
        let mut rng = stream(seed, 2_000_000 + k as u64);
        let look = Appearance::draw(rng.gen(), &mut rng);
        push(-1, k % config.cameras, Split::Train, &look, &mut rng);
    }
    Ok(Dataset { tracklets })
}
