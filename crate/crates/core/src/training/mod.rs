//! Pre-training: model assembly in both weight-sharing modes, Adam with a
//! warmup + quarter-period schedule, checkpoints, the low-rank linear probe
//! and positional-table resampling.

mod adam;
pub mod checkpoint;
mod checks;
mod interp;
mod model;
mod probe;
mod schedule;
mod step;
mod trainer;

pub use adam::Adam;
pub use checkpoint::NamedTensors;
pub use checks::{bind_leaves, gradcheck_suite, micro_batch, micro_data_spec, CheckLine, SuiteOptions};
pub use interp::{interpolate_positional, resize_video_positional};
pub use model::{build_model, Census, ForwardOutput, ModelConfig, ModelInputs, ShareMode, VattModel};
pub use probe::{multiview_logits, LowRankClassifier, PROBE_COMPONENTS, PROBE_LR, PROBE_SAMPLE_RATE};
pub use schedule::{lr_at, Schedule};
pub use step::{loss_and_grads, train_step, LossAndGrads, StepStats, TrainConfig};
pub use trainer::{check_geometry, checkpoint_step, load_model_weights, Trainer, HELDOUT_SPLIT, TRAIN_SPLIT};
