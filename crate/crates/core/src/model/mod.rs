//! Network definition: configuration, per-layer plan, executor and
//! checkpoint container.

pub mod checkpoint;
pub mod config;
pub mod network;
pub mod plan;

pub use checkpoint::{load_checkpoint, load_checkpoint_as, save_checkpoint, Checkpoint, StoredTensor};
pub use config::{Guidance, HeadKind, HrResolution, ModelConfig};
pub use network::{build_model, Model, ModelOutput};
pub use plan::{build_plan, LayerKind, LayerPlan, LayerRecord, Role};
