//! Toy byte-level transformer language model: architecture, trainer,
//! head-redundancy analysis, ablation grids, corpus utilities and
//! checkpoints.

mod analysis;
mod checkpoint;
mod corpus;
mod train;
mod transformer;

pub use analysis::{
    ablate, exponent_grid, head_distance, pairwise_head_distance, r_init_grid, summarize, AblationCell,
    AblationRow, AblationTable, HeadDistanceReport, HeadDistanceSource, LayerDistance,
};
pub use checkpoint::{read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use corpus::{order0_entropy, order0_perplexity, synthetic_corpus};
pub use train::{
    clip_global_norm, evaluate, split_corpus, train_lm, train_step, validation_starts, Adam, CorpusSplit,
    Divergence, EvalRecord, StepRecord, TrainConfig, TrainReport, DIVERGENCE_PATIENCE,
};
pub use transformer::{
    positional_encoding, FourierSettings, ForwardPass, Transformer, TransformerConfig, VOCAB,
};
