//! Synthetic scenes, task sequences and the on-disk dataset layout.

pub mod disk;
pub mod synth;
pub mod task;

pub use synth::{generate_dataset, generate_image, LabeledImage, SceneSpec, Shape, ShapeKind};
pub use task::{build_task_sequence, collapse_unseen, materialize_step, Mode, StepDataset, TaskSequence};
