//! Models, losses and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod loss;
pub mod model;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use config::{Arch, ConvReplacement, FilterVariant, ModelConfig, NormKind};
pub use loss::{accuracy, correct_count, cross_entropy, entropy};
pub use model::{ForwardOutput, Mode, Model, Slot, SlotKind};
