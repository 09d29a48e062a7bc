//! Parallel decoding of independent reasoning branches inside one token
//! sequence and one KV cache.
//!
//! A run has three stages: a skeleton of step titles is generated under
//! logit forcing, every step body is then decoded side by side under a
//! tree-shaped attention mask (one token per branch per forward pass), and
//! finally the finished steps are concatenated and decoding continues.

pub mod harness;
pub mod layout;
pub mod model;
pub mod oracle;
pub mod pipeline;
pub mod skeleton;
pub mod vocab;

pub use layout::{build_layout, step_positions, tree_mask, LayoutError, SegmentKind, SequenceLayout, TreeMask};
pub use model::{
    argmax, init_model, EngineError, ForwardEngine, ForwardRequest, GuidedEngine, KvCache, Logits, ModelConfig,
    ScriptedEngine, Transformer,
};
pub use pipeline::{
    run_pipeline, BlockTrace, DecodeConfig, DecodeSession, DecodeTrace, Mode, ParallelBlock, PipelineError,
};
pub use skeleton::{apply_forcing, parse_skeleton, stage1_prompt, ForcingState, Instruction, Skeleton};
pub use vocab::TokenId;
