//! Scripted tasks: the text a well-behaved model would produce for a task,
//! and a [`Script`] that reproduces it from whatever part of the sequence a
//! query can see.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Script;
use crate::skeleton::{stage1_prompt, Instruction};
use crate::vocab::{self, TokenId, COLON, ELLIPSIS, EOS, MARK, TERM};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TaskError {
    #[error("branch count {0} outside 1..=16")]
    BranchCount(usize),
    #[error("{what} {text:?} contains a reserved token")]
    ReservedToken { what: &'static str, text: String },
    #[error("branch title is empty")]
    EmptyTitle,
    #[error("duplicate title {0:?} in one block")]
    DuplicateTitle(String),
    #[error("{0} must be in {1}")]
    InvalidParameter(&'static str, &'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskKind {
    Retrieval,
    Multidoc,
    Planning,
    Custom,
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Retrieval => "retrieval",
            TaskKind::Multidoc => "multidoc",
            TaskKind::Planning => "planning",
            TaskKind::Custom => "custom",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "retrieval" => Ok(TaskKind::Retrieval),
            "multidoc" => Ok(TaskKind::Multidoc),
            "planning" => Ok(TaskKind::Planning),
            other => Err(format!("unknown suite {other:?}, expected retrieval, multidoc or planning")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Branch {
    pub title: String,
    pub body: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Segment {
    Text(String),
    Block(Vec<Branch>),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskShape {
    pub n_branches: usize,
    pub body_lens: Vec<usize>,
    pub prefix_len: usize,
}

/// A task and the answer a deterministic model is scripted to give.
///
/// The answer is the segments in order: plain text, and parallel blocks
/// written as marker, title, colon, body for each branch, then marker and
/// terminator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskScript {
    pub kind: TaskKind,
    pub task_text: String,
    pub segments: Vec<Segment>,
    pub expected_answer: Option<String>,
    pub shape: TaskShape,
}

fn check_plain(what: &'static str, text: &str, allow_colon: bool) -> Result<(), TaskError> {
    let bad = vocab::encode(text)
        .iter()
        .any(|&t| vocab::is_format_token(t) || vocab::is_special(t) && !(allow_colon && t == COLON));
    if bad {
        return Err(TaskError::ReservedToken { what, text: text.to_string() });
    }
    Ok(())
}

impl TaskScript {
    pub fn new(
        kind: TaskKind,
        task_text: impl Into<String>,
        segments: Vec<Segment>,
        expected_answer: Option<String>,
    ) -> Result<Self, TaskError> {
        let mut shape = TaskShape { n_branches: 0, body_lens: Vec::new(), prefix_len: 0 };
        let mut seen_block = false;
        for seg in &segments {
            match seg {
                Segment::Text(t) => {
                    check_plain("text", t, true)?;
                    if !seen_block {
                        shape.prefix_len += vocab::encode(t).len();
                    }
                }
                Segment::Block(branches) => {
                    if branches.is_empty() || branches.len() > 16 {
                        return Err(TaskError::BranchCount(branches.len()));
                    }
                    for (i, b) in branches.iter().enumerate() {
                        if b.title.is_empty() {
                            return Err(TaskError::EmptyTitle);
                        }
                        check_plain("title", &b.title, false)?;
                        check_plain("body", &b.body, false)?;
                        if branches[..i].iter().any(|o| o.title == b.title) {
                            return Err(TaskError::DuplicateTitle(b.title.clone()));
                        }
                    }
                    if !seen_block {
                        shape.n_branches = branches.len();
                        shape.body_lens = branches.iter().map(|b| vocab::encode(&b.body).len()).collect();
                    }
                    seen_block = true;
                }
            }
        }
        Ok(Self { kind, task_text: task_text.into(), segments, expected_answer, shape })
    }

    pub fn n_blocks(&self) -> usize {
        self.segments.iter().filter(|s| matches!(s, Segment::Block(_))).count()
    }

    /// The full scripted answer as text.
    pub fn answer_text(&self) -> String {
        vocab::decode(&self.answer_tokens())
    }

    pub fn answer_tokens(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => out.extend(vocab::encode(t)),
                Segment::Block(branches) => {
                    for b in branches {
                        out.push(MARK);
                        out.extend(vocab::encode(&b.title));
                        out.push(COLON);
                        out.extend(vocab::encode(&b.body));
                    }
                    out.extend([MARK, TERM]);
                }
            }
        }
        out
    }

    pub fn compile(&self, instruction: &Instruction) -> CompiledTask {
        let segments = self
            .segments
            .iter()
            .map(|s| match s {
                Segment::Text(t) => CompiledSegment::Text(vocab::encode(t)),
                Segment::Block(bs) => CompiledSegment::Block(
                    bs.iter().map(|b| (vocab::encode(&b.title), vocab::encode(&b.body))).collect(),
                ),
            })
            .collect();
        CompiledTask { prompt: stage1_prompt(&self.task_text, instruction), segments }
    }

    /// Forward passes each mode needs for this task, counted from the
    /// script alone: `(normal, parallel)`.
    pub fn analytic_passes(&self) -> (usize, usize) {
        let normal = 1 + self.answer_tokens().len();
        let mut parallel = 1;
        let mut pending_text = 0;
        let mut first_block = true;
        let mut after_block = false;
        for seg in &self.segments {
            match seg {
                Segment::Text(t) => pending_text += vocab::encode(t).len(),
                Segment::Block(branches) => {
                    if after_block {
                        // text since the previous block is continuation output
                        parallel += 1 + pending_text;
                    }
                    let preamble = if first_block { pending_text } else { 0 };
                    let generated: usize =
                        preamble + branches.iter().map(|b| vocab::encode(&b.title).len() + 3).sum::<usize>() + 2;
                    let longest = branches.iter().map(|b| vocab::encode(&b.body).len()).max().unwrap_or(0);
                    parallel += (generated - 1) + (1 + longest);
                    pending_text = 0;
                    first_block = false;
                    after_block = true;
                }
            }
        }
        if after_block {
            parallel += 1 + pending_text;
        } else {
            // no marker: the skeleton pass decodes everything, then the
            // fallback decodes it again
            parallel += 2 * pending_text;
        }
        (normal, parallel)
    }

    /// Tokens-per-pass speedup implied by [`Self::analytic_passes`]; both
    /// modes emit the same answer.
    pub fn analytic_speedup(&self) -> f64 {
        let (normal, parallel) = self.analytic_passes();
        normal as f64 / parallel as f64
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum CompiledSegment {
    Text(Vec<TokenId>),
    Block(Vec<(Vec<TokenId>, Vec<TokenId>)>),
}

/// A [`TaskScript`] as a next-token rule.
///
/// The visible stream after the prompt is matched against the answer. A
/// block accepts its branches in any order (a branch only sees its own
/// title) and accepts an ellipsis in place of a body (the skeleton). After
/// a marker the next unseen title is proposed, or the terminator once all
/// titles appeared. Anything that does not fit the answer has no
/// continuation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CompiledTask {
    prompt: Vec<TokenId>,
    segments: Vec<CompiledSegment>,
}

fn common_prefix(a: &[TokenId], b: &[TokenId]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

impl CompiledTask {
    pub fn prompt(&self) -> &[TokenId] {
        &self.prompt
    }

    fn continue_output(&self, out: &[TokenId]) -> Option<TokenId> {
        let mut i = 0;
        for seg in &self.segments {
            match seg {
                CompiledSegment::Text(t) => {
                    let k = common_prefix(&out[i..], t);
                    if i + k == out.len() && k < t.len() {
                        return Some(t[k]);
                    }
                    if k < t.len() {
                        return None;
                    }
                    i += k;
                }
                CompiledSegment::Block(branches) => {
                    let mut seen = vec![false; branches.len()];
                    loop {
                        let Some(&tok) = out.get(i) else { return Some(MARK) };
                        if tok != MARK {
                            return None;
                        }
                        i += 1;
                        let unseen = || (0..branches.len()).filter(|&b| !seen[b]);
                        let Some(&tok) = out.get(i) else {
                            return Some(unseen().next().map_or(TERM, |b| branches[b].0[0]));
                        };
                        if tok == TERM {
                            if seen.iter().any(|s| !s) {
                                return None;
                            }
                            i += 1;
                            break;
                        }
                        let Some(colon) = out[i..].iter().position(|&t| t == COLON) else {
                            let partial = &out[i..];
                            let b = unseen().find(|&b| branches[b].0.starts_with(partial))?;
                            return Some(branches[b].0.get(partial.len()).copied().unwrap_or(COLON));
                        };
                        let title = &out[i..i + colon];
                        let b = unseen().find(|&b| branches[b].0 == title)?;
                        seen[b] = true;
                        i += colon + 1;
                        let body = &branches[b].1;
                        if out.get(i) == Some(&ELLIPSIS) {
                            i += 1;
                            continue;
                        }
                        let k = common_prefix(&out[i..], body);
                        if i + k == out.len() {
                            return Some(body.get(k).copied().unwrap_or(MARK));
                        }
                        if k < body.len() {
                            return None;
                        }
                        i += k;
                    }
                }
            }
        }
        (i == out.len()).then_some(EOS)
    }
}

impl Script for CompiledTask {
    fn next_token(&self, visible: &[TokenId]) -> Option<TokenId> {
        let p = self.prompt.len();
        if visible.len() < p {
            return (self.prompt[..visible.len()] == *visible).then(|| self.prompt[visible.len()]);
        }
        if visible[..p] != self.prompt[..] {
            return None;
        }
        self.continue_output(&visible[p..])
    }
}
