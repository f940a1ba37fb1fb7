//! Optimizer, schedule, clip extraction, augmentation, synthetic data and
//! the two-phase training loop.

pub mod adam;
pub mod augment;
pub mod clips;
pub mod schedule;
pub mod synth;
pub mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use augment::{augment_flip, flip_horizontal};
pub use clips::{clip_split, clip_windows};
pub use schedule::{lr_schedule, Phase, TrainSchedule};
pub use synth::{generate_synthetic, Dataset, Manifest, Split, SynthConfig, Tracklet, TrackletRecord, MANIFEST_FILE};
pub use trainer::{save_trace_csv, train_two_step, write_trace_csv, OimConfig, Start, Steps, TraceRow, TrainConfig, Trained};
