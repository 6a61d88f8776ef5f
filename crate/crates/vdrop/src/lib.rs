//! Progressive visual-token pruning over a seeded toy transformer stack.
//!
//! The crate builds a small deterministic encoder/decoder pair, scores
//! visual tokens from attention tensors (visual-only or text-guided), prunes
//! and merges them stage by stage under a shrinking budget schedule, and
//! reports the analytic attention-cost savings. Externally dumped attention
//! tensors can be scored through the same selection path via the `.vdmp`
//! format.

pub mod cli;
pub mod formats;
pub mod linalg;
pub mod model;
pub mod pipeline;
pub mod pruning;
pub mod scoring;

pub use formats::{read_dump, write_dump, DumpKind, Manifest, TensorDump};
pub use linalg::{matmul, rand_matrix, softmax_rows, Matrix, Rng};
pub use model::{AttentionTensor, Modality, ModelConfig, TokenSequence, ToyModel};
pub use pipeline::{
    compare_strategies, flops_attention, run_on_dumps, run_pipeline, CompareReport, RunOptions,
    RunReport,
};
pub use pruning::{build_schedule, prune_stage, select_dominant, PruneSchedule, StageBoundary};
pub use scoring::{
    score_cls_query, score_mean_visual_query, score_text_guided, ImportanceVector, Strategy,
};
