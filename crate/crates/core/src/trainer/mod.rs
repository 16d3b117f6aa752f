//! Toy omni-modal encoder and its training loop.
//!
//! The fusion backbone is reduced to one shared linear mixing layer applied
//! per token, so gradients stay hand-derivable; see [`ToyEncoder`].

mod certify;
mod checkpoint;
mod distill;
mod encoder;
mod optim;
mod plan;
mod step;

pub use encoder::{EncoderConfig, Encoded, ToyEncoder, ViewGrads};
pub use optim::{draw_dataset, lr_schedule, validate_weights, OptimizerConfig, OptimizerState, UpdateInfo};
pub use step::{batch_loss, initial_tau, train_step, BatchContext, BatchLoss, StepMetrics, StepSettings, TrainExample};
pub use plan::{
    assemble_batch, catalog, encode_records, mine_training_set, run_plan, Catalog, HardNegativeSettings, MiningSummary,
    StagePlan, StageReport, StageSpec, TrainingSet,
};
pub use certify::{composition_gradient_check, distill_gradient_checks};
pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointManifest, TensorEntry, CHECKPOINT_FORMAT, MANIFEST_FILE};
pub use distill::{
    id2item_loss, id2item_step, id_alignment_loss, resolve_sequence, run_id2item, run_seq2item, seq2item_loss, seq2item_step, sequence_embedding,
    AuxTask, DistillConfig, DistillMetrics, DistillMode, IdExample, IdProjection, Id2itemLoss, SequenceExample,
    ID_PROJECTION_KEY, SEQ_TAU_KEY,
};
