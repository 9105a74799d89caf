//! Decoder, pseudo-label refinement, losses, schedule and training.

pub mod config;
pub mod decoder;
pub mod losses;
pub mod model;
pub mod par;
pub mod schedule;
pub mod trainer;

pub use config::{Preset, TrainConfig};
pub use losses::{seg_loss, total_loss, LossBreakdown, LossWeights, Regularizer};
pub use model::{Inference, TocoModel};
pub use par::{par_refine, ParConfig};
pub use schedule::{lr_schedule, ScheduleConfig};
pub use trainer::{MetricsWriter, StepReport, Trainer};
