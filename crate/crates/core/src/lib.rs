//! Weighted grouped-query attention (WGQA) and its relatives.
//!
//! The crate covers the whole pipeline at desk scale: attention variants with
//! analytic gradients, conversion of multi-head checkpoints into grouped or
//! weighted ones, a toy encoder-decoder trainer, and the statistics used to
//! compare learned aggregation weights against mean pooling.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod checkpoint;
pub mod numerics;
pub mod trainer;

pub use attention::{
    attention_forward, fold_weights, group_index, init_aggregation, kv_cache_bytes,
    mean_pool_heads, param_count_extra, weighted_aggregate, AggregationWeights, AttentionBlock,
    AttentionConfig, AttentionError, InitScheme, ProjectionSet, Variant, Weighting,
};
pub use autograd::{attention_backward, grad_check, ForwardCache, GradCheckReport, Gradients};
pub use numerics::{finite_diff_grad, SeededRng, Tensor, TensorError};
pub use checkpoint::{convert, Checkpoint, CheckpointError};
pub use analysis::{head_divergence, one_sample_ttest, DivergenceReport, TTest};
pub use trainer::{evaluate, train, ModelConfig, TaskKind, ToyModel, ToyTask, TrainConfig, TrainError};
