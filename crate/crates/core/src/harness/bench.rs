//! Runs task suites in both modes and reports passes, tokens and answers.

use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::generators::{gen_multidoc_task, gen_planning_task, gen_retrieval_task, sample_planning_k};
use super::task::{Segment, TaskError, TaskKind, TaskScript};
use crate::model::{GuidedEngine, ScriptedEngine, Transformer};
use crate::pipeline::{run_pipeline, DecodeConfig, DecodeTrace, Mode, PipelineError};
use crate::skeleton::Instruction;

const BUILTIN_SUITE: &str = include_str!("../../assets/suite.toml");

#[derive(Debug, Error)]
pub enum BenchError {
    #[error("suite config: {0}")]
    Config(String),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error("suite is empty")]
    EmptySuite,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrievalSuite {
    pub instances: usize,
    pub n_branches: usize,
    pub body_len: usize,
    pub body_jitter: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MultidocSuite {
    pub instances: usize,
    pub n_branches: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanningSuite {
    pub instances: usize,
    pub seed: u64,
}

/// Sizes and seeds of the three suites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub retrieval: RetrievalSuite,
    pub multidoc: MultidocSuite,
    pub planning: PlanningSuite,
}

impl SuiteConfig {
    pub fn builtin() -> Self {
        Self::from_toml_str(BUILTIN_SUITE).expect("shipped suite config parses")
    }

    pub fn from_toml_str(text: &str) -> Result<Self, BenchError> {
        toml::from_str(text).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, BenchError> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    /// Task `index` of the `kind` suite.
    pub fn task(&self, kind: TaskKind, index: usize) -> Result<TaskScript, BenchError> {
        let i = index as u64;
        Ok(match kind {
            TaskKind::Retrieval => {
                let r = &self.retrieval;
                gen_retrieval_task(r.n_branches, r.seed.wrapping_add(i), r.body_len, r.body_jitter)?
            }
            TaskKind::Multidoc => gen_multidoc_task(self.multidoc.n_branches, self.multidoc.seed.wrapping_add(i))?,
            TaskKind::Planning => {
                let seed = self.planning.seed.wrapping_add(i);
                let k = sample_planning_k(&mut ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9));
                gen_planning_task(k, seed)?
            }
            TaskKind::Custom => return Err(BenchError::Config("custom tasks have no generator".into())),
        })
    }

    pub fn instances(&self, kind: TaskKind) -> usize {
        match kind {
            TaskKind::Retrieval => self.retrieval.instances,
            TaskKind::Multidoc => self.multidoc.instances,
            TaskKind::Planning => self.planning.instances,
            TaskKind::Custom => 0,
        }
    }

    /// Every task of one suite, in index order.
    pub fn tasks(&self, kind: TaskKind) -> Result<Vec<TaskScript>, BenchError> {
        (0..self.instances(kind)).map(|i| self.task(kind, i)).collect()
    }
}

/// Which engine executes the tasks.
#[derive(Clone, Default)]
pub enum EngineChoice {
    /// Rule-driven engine, no numeric model.
    #[default]
    Scripted,
    /// Seeded transformer steered by the task script.
    Guided(Arc<Transformer>),
}

/// Result of one task in one mode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeStats {
    pub tokens_emitted: usize,
    pub decode_passes: usize,
    pub prefill_passes: usize,
    pub wall_time_s: f64,
    pub tokens_per_pass: f64,
    pub blocks: usize,
    pub fallback: bool,
    pub exact_match: Option<bool>,
    pub structure_ok: bool,
    pub position_violations: usize,
    pub pass_accounting_ok: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRow {
    pub kind: TaskKind,
    pub index: usize,
    pub n_branches: usize,
    pub normal: Option<ModeStats>,
    pub parallel: Option<ModeStats>,
    /// Parallel tokens-per-pass over normal tokens-per-pass.
    pub speedup: Option<f64>,
    pub analytic_speedup: f64,
    pub modes_agree: Option<bool>,
    pub errors: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeSummary {
    pub mean_tokens_per_pass: f64,
    pub mean_decode_passes: f64,
    pub mean_prefill_passes: f64,
    pub mean_wall_time_s: f64,
    /// Share of exact matches among tasks that define an answer.
    pub accuracy: Option<f64>,
    pub structure_ok_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub kind: TaskKind,
    pub tasks: usize,
    pub failed: usize,
    pub mean_branches: f64,
    pub normal: Option<ModeSummary>,
    pub parallel: Option<ModeSummary>,
    pub mean_speedup: Option<f64>,
    pub mean_analytic_speedup: f64,
    pub max_speedup_deviation: Option<f64>,
    pub position_violations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub rows: Vec<TaskRow>,
    pub suites: Vec<SuiteSummary>,
}

/// Whether `text` carries the expected answer on its last line.
pub fn exact_match(text: &str, expected: &str) -> bool {
    text.lines().last().map(str::trim) == Some(expected)
}

/// Every branch of every block appears as marker, title, colon, body.
pub fn structure_ok(task: &TaskScript, text: &str) -> bool {
    task.segments.iter().all(|s| match s {
        Segment::Text(_) => true,
        Segment::Block(bs) => bs.iter().all(|b| text.contains(&format!("####{}:{}", b.title, b.body))),
    })
}

fn mode_stats(task: &TaskScript, text: &str, trace: &DecodeTrace) -> ModeStats {
    let passes = trace.total_passes();
    ModeStats {
        tokens_emitted: trace.output_tokens,
        decode_passes: trace.decode_passes(),
        prefill_passes: trace.prefill_passes(),
        wall_time_s: trace.wall_time_s(),
        tokens_per_pass: trace.output_tokens as f64 / passes as f64,
        blocks: trace.block_count,
        fallback: trace.fallback,
        exact_match: task.expected_answer.as_deref().map(|a| exact_match(text, a)),
        structure_ok: structure_ok(task, text),
        position_violations: trace.position_law_violations(),
        pass_accounting_ok: trace.blocks.iter().all(|b| b.passes == b.expected_passes()),
    }
}

/// Runs one task in `mode`.
pub fn run_task(
    task: &TaskScript,
    engine: &EngineChoice,
    instruction: &Instruction,
    config: &DecodeConfig,
    mode: Mode,
) -> Result<(String, DecodeTrace), PipelineError> {
    let script = task.compile(instruction);
    let prompt = script.prompt().to_vec();
    match engine {
        EngineChoice::Scripted => run_pipeline(ScriptedEngine::new(script), &prompt, config, mode),
        EngineChoice::Guided(model) => run_pipeline(GuidedEngine::new(model.clone(), script), &prompt, config, mode),
    }
}

fn run_row(
    kind: TaskKind,
    index: usize,
    task: &TaskScript,
    engine: &EngineChoice,
    instruction: &Instruction,
    config: &DecodeConfig,
) -> TaskRow {
    let mut errors = Vec::new();
    let mut texts = Vec::new();
    let mut stats = |mode| match run_task(task, engine, instruction, config, mode) {
        Ok((text, trace)) => {
            let s = mode_stats(task, &text, &trace);
            texts.push(text);
            Some(s)
        }
        Err(e) => {
            errors.push(format!("{mode:?}: {e}"));
            None
        }
    };
    let normal = stats(Mode::Normal);
    let parallel = stats(Mode::Parallel);
    let speedup = match (&normal, &parallel) {
        (Some(n), Some(p)) => Some(p.tokens_per_pass / n.tokens_per_pass),
        _ => None,
    };
    TaskRow {
        kind,
        index,
        n_branches: task.shape.n_branches,
        modes_agree: (texts.len() == 2).then(|| texts[0] == texts[1]),
        normal,
        parallel,
        speedup,
        analytic_speedup: task.analytic_speedup(),
        errors,
    }
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

fn summarize_mode<'a>(stats: impl Iterator<Item = &'a ModeStats> + Clone) -> Option<ModeSummary> {
    stats.clone().next()?;
    let answered: Vec<bool> = stats.clone().filter_map(|s| s.exact_match).collect();
    Some(ModeSummary {
        mean_tokens_per_pass: mean(stats.clone().map(|s| s.tokens_per_pass)),
        mean_decode_passes: mean(stats.clone().map(|s| s.decode_passes as f64)),
        mean_prefill_passes: mean(stats.clone().map(|s| s.prefill_passes as f64)),
        mean_wall_time_s: mean(stats.clone().map(|s| s.wall_time_s)),
        accuracy: (!answered.is_empty())
            .then(|| answered.iter().filter(|&&m| m).count() as f64 / answered.len() as f64),
        structure_ok_rate: mean(stats.map(|s| f64::from(u8::from(s.structure_ok)))),
    })
}

fn summarize(kind: TaskKind, rows: &[TaskRow]) -> SuiteSummary {
    let speedups: Vec<f64> = rows.iter().filter_map(|r| r.speedup).collect();
    SuiteSummary {
        kind,
        tasks: rows.len(),
        failed: rows.iter().filter(|r| !r.errors.is_empty()).count(),
        mean_branches: mean(rows.iter().map(|r| r.n_branches as f64)),
        normal: summarize_mode(rows.iter().filter_map(|r| r.normal.as_ref())),
        parallel: summarize_mode(rows.iter().filter_map(|r| r.parallel.as_ref())),
        mean_speedup: (!speedups.is_empty()).then(|| mean(speedups.iter().copied())),
        mean_analytic_speedup: mean(rows.iter().map(|r| r.analytic_speedup)),
        max_speedup_deviation: rows
            .iter()
            .filter_map(|r| r.speedup.map(|s| (s / r.analytic_speedup - 1.0).abs()))
            .reduce(f64::max),
        position_violations: rows.iter().filter_map(|r| r.parallel.as_ref()).map(|p| p.position_violations).sum(),
    }
}

/// Runs every task in both modes. Tasks run concurrently, each with its
/// own engine and cache; a failing task is recorded in its row and the
/// rest of the suite still runs. Rows keep suite and index order.
pub fn run_bench(
    suites: &[(TaskKind, Vec<TaskScript>)],
    engine: &EngineChoice,
    instruction: &Instruction,
    config: &DecodeConfig,
) -> Result<BenchReport, BenchError> {
    if suites.iter().all(|(_, tasks)| tasks.is_empty()) {
        return Err(BenchError::EmptySuite);
    }
    let mut rows = Vec::new();
    let mut summaries = Vec::new();
    for (kind, tasks) in suites {
        let suite_rows: Vec<TaskRow> = tasks
            .par_iter()
            .enumerate()
            .map(|(i, t)| run_row(*kind, i, t, engine, instruction, config))
            .collect();
        summaries.push(summarize(*kind, &suite_rows));
        rows.extend(suite_rows);
    }
    Ok(BenchReport { rows, suites: summaries })
}

impl BenchReport {
    /// Copy with every wall time zeroed; what remains depends only on the
    /// seeds and the engine.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for row in &mut r.rows {
            for s in [&mut row.normal, &mut row.parallel].into_iter().flatten() {
                s.wall_time_s = 0.0;
            }
        }
        for s in &mut r.suites {
            for m in [&mut s.normal, &mut s.parallel].into_iter().flatten() {
                m.mean_wall_time_s = 0.0;
            }
        }
        r
    }

    /// One line per suite and mode: tokens per pass, passes, time,
    /// accuracy and speedup over normal decoding.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "task,method,tasks,mean_branches,tokens_per_pass,decode_passes,prefill_passes,wall_time_s,accuracy,speedup\n",
        );
        for s in &self.suites {
            for (method, m) in [("normal", &s.normal), ("parallel", &s.parallel)] {
                let Some(m) = m else { continue };
                let acc = m.accuracy.map_or_else(|| "-".to_string(), |a| format!("{a:.2}"));
                let speedup = match method {
                    "normal" => "1.00".to_string(),
                    _ => s.mean_speedup.map_or_else(|| "-".to_string(), |x| format!("{x:.2}")),
                };
                out.push_str(&format!(
                    "{},{method},{},{:.2},{:.4},{:.1},{:.1},{:.6},{acc},{speedup}\n",
                    s.kind,
                    s.tasks,
                    s.mean_branches,
                    m.mean_tokens_per_pass,
                    m.mean_decode_passes,
                    m.mean_prefill_passes,
                    m.mean_wall_time_s,
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtin_suite_sizes() {
        let s = SuiteConfig::builtin();
        assert_eq!(s.retrieval.instances, 100);
        assert_eq!(s.multidoc.instances, 100);
        assert_eq!(s.planning.instances, 100);
        assert_eq!(s.retrieval.n_branches, 10);
        assert!(SuiteConfig::from_toml_str("[retrieval]\ninstances = 1").is_err());
    }

    #[test]
    fn answer_checks() {
        assert!(exact_match("x\nname: Lily", "name: Lily"));
        assert!(!exact_match("name: Lily\nmore", "name: Lily"));
    }

    #[test]
    fn small_bench_agrees_with_analytic() {
        let s = SuiteConfig::builtin();
        let tasks: Vec<TaskScript> = (0..4).map(|i| s.task(TaskKind::Retrieval, i).unwrap()).collect();
        let report = run_bench(
            &[(TaskKind::Retrieval, tasks)],
            &EngineChoice::Scripted,
            &Instruction::builtin(),
            &DecodeConfig::default(),
        )
        .unwrap();
        for row in &report.rows {
            assert!(row.errors.is_empty(), "{:?}", row.errors);
            assert_eq!(row.modes_agree, Some(true));
            let p = row.parallel.as_ref().unwrap();
            assert_eq!(p.exact_match, Some(true));
            assert!(p.pass_accounting_ok);
            assert!((row.speedup.unwrap() - row.analytic_speedup).abs() < 1e-9);
            let n = row.normal.as_ref().unwrap();
            let total = (n.decode_passes + n.prefill_passes) as f64;
            assert!((n.tokens_per_pass * total - n.tokens_emitted as f64).abs() < 1e-6);
        }
        assert_eq!(report.to_csv().lines().count(), 3);
    }
}
