//! Contrastive semi-supervised learning lab.
//!
//! Pseudo-labels from a (simulated) teacher are cut into segments; one
//! representative frame per segment is contrasted against others with the
//! same or a different pseudo-label. The library contains the loss and its
//! analytic gradient, label-aware batching, a small context-window MLP with
//! hand-written backpropagation, a synthetic corpus generator with a noisy
//! teacher, and the experiment drivers that compare contrastive
//! pre-training with cross-entropy pseudo-labeling.

pub mod batching;
pub mod error;
pub mod losses;
pub mod model;
pub mod numerics;
pub mod segmentation;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};
pub use losses::{ce_loss, csl_loss, ContrastiveBatch, CslConfig, LossResult, NegativePolicy};
pub use model::{Checkpoint, MaskPolicy, ModelConfig, ModelParams, TriStageSchedule};
pub use numerics::{Matrix, Rng, RngState};
pub use segmentation::{extract_segments, Label, Segment};
pub use synthdata::{Corpus, CorpusConfig, TeacherNoise, Utterance};
pub use trainer::{
    evaluate, finetune, pretrain, BatcherKind, ExperimentReport, FinetuneConfig, LossKind, Scenario, TrainConfig,
};
