//! Synthetic tasks, the scripted answers that drive the engines, and the
//! benchmark runner comparing normal and parallel decoding.

mod bench;
mod generators;
mod task;

pub use bench::{
    exact_match, run_bench, run_task, structure_ok, BenchError, BenchReport, EngineChoice, ModeStats, ModeSummary,
    MultidocSuite, PlanningSuite, RetrievalSuite, SuiteConfig, SuiteSummary, TaskRow,
};
pub use generators::{gen_multidoc_task, gen_planning_task, gen_retrieval_task, sample_planning_k, solve_retrieval};
pub use task::{Branch, CompiledTask, Segment, TaskError, TaskKind, TaskScript, TaskShape};
