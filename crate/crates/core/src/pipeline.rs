//! Three-stage decoding over a single sequence and KV cache.
//!
//! 1. Skeleton: greedy decoding under logit forcing until the terminator.
//! 2. Parallel: the cache is cut back to the shared prefix, every step
//!    head (marker, title, colon) is encoded in one tree-masked pass, then
//!    each pass advances every branch by one token at a shared position.
//! 3. Continuation: the cache is cut back again, the finished steps are
//!    prefilled causally in order, and greedy decoding resumes. A new
//!    marker starts another block.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::{build_layout, tree_mask, LayoutError, SequenceLayout};
use crate::model::{argmax, EngineError, ForwardEngine, ForwardRequest, KvCache};
use crate::skeleton::{parse_skeleton, ForcingState, Skeleton, SkeletonError};
use crate::vocab::{self, TokenId, COLON, EOS, MARK, PAD, TERM};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Skeleton(#[from] SkeletonError),
    #[error(transparent)]
    Layout(#[from] LayoutError),
    #[error("skeleton exceeded {cap} tokens without a terminator")]
    SkeletonCapExceeded { cap: usize },
    #[error("continuation exceeded {cap} tokens")]
    ContinuationCapExceeded { cap: usize },
    #[error("more than {max} parallel blocks")]
    TooManyBlocks { max: usize },
    #[error("invalid decode config: {0}")]
    InvalidConfig(String),
    #[error("prompt is empty")]
    EmptyPrompt,
}

/// Caps and switches for one run. Selection is always greedy with ties
/// broken toward the lowest token id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub max_skeleton_tokens: usize,
    pub max_steps_per_branch: usize,
    pub max_continuation_tokens: usize,
    /// Cap for plain causal decoding (normal mode and the no-marker fallback).
    pub max_normal_tokens: usize,
    pub max_blocks: usize,
    /// Keep every branch's per-step logits on the returned block.
    #[serde(default)]
    pub record_branch_logits: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_skeleton_tokens: 2048,
            max_steps_per_branch: 256,
            max_continuation_tokens: 2048,
            max_normal_tokens: 8192,
            max_blocks: 16,
            record_branch_logits: false,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        for (name, v) in [
            ("max_skeleton_tokens", self.max_skeleton_tokens),
            ("max_steps_per_branch", self.max_steps_per_branch),
            ("max_continuation_tokens", self.max_continuation_tokens),
            ("max_normal_tokens", self.max_normal_tokens),
            ("max_blocks", self.max_blocks),
        ] {
            if v == 0 {
                return Err(PipelineError::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Normal,
    Parallel,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "normal" => Ok(Mode::Normal),
            "parallel" => Ok(Mode::Parallel),
            other => Err(format!("unknown mode {other:?}, expected normal or parallel")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Normal,
    Skeleton,
    Parallel,
    Continuation,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageStats {
    pub prefill_passes: usize,
    pub decode_passes: usize,
    pub tokens_emitted: usize,
    pub wall_time_s: f64,
}

impl StageStats {
    pub fn passes(&self) -> usize {
        self.prefill_passes + self.decode_passes
    }
}

/// Stage-2 record of one parallel block.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub block_start: usize,
    pub n_branches: usize,
    /// Tokens per step head (marker + title + colon).
    pub head_lens: Vec<usize>,
    pub body_lens: Vec<usize>,
    pub capped: Vec<bool>,
    /// Position id shared by body step 0.
    pub first_step_position: u32,
    /// Position id of every row, for each decode pass.
    pub step_positions: Vec<Vec<u32>>,
    /// Head prefill plus decode passes.
    pub passes: usize,
}

impl BlockTrace {
    /// Rows whose position breaks "one shared id per step, +1 per step".
    pub fn position_law_violations(&self) -> usize {
        self.step_positions
            .iter()
            .enumerate()
            .map(|(t, rows)| {
                let expected = self.first_step_position + t as u32;
                rows.iter().filter(|&&p| p != expected).count() + usize::from(rows.len() != self.n_branches)
            })
            .sum()
    }

    /// Passes implied by the body lengths: one head prefill, then one pass
    /// per body token each branch feeds back (a capped branch never feeds
    /// its last token).
    pub fn expected_passes(&self) -> usize {
        let fed = self
            .body_lens
            .iter()
            .zip(&self.capped)
            .map(|(&l, &c)| if c { l.saturating_sub(1) } else { l })
            .max()
            .unwrap_or(0);
        1 + fed
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeTrace {
    pub mode: Mode,
    pub normal: StageStats,
    pub skeleton: StageStats,
    pub parallel: StageStats,
    pub continuation: StageStats,
    pub blocks: Vec<BlockTrace>,
    pub block_count: usize,
    /// Skeleton had no step marker and the answer was decoded plainly.
    pub fallback: bool,
    /// Plain decoding stopped at `max_normal_tokens`.
    pub hit_cap: bool,
    pub prompt_tokens: usize,
    pub output_tokens: usize,
    pub final_text: String,
}

impl DecodeTrace {
    fn new(mode: Mode) -> Self {
        Self {
            mode,
            normal: StageStats::default(),
            skeleton: StageStats::default(),
            parallel: StageStats::default(),
            continuation: StageStats::default(),
            blocks: Vec::new(),
            block_count: 0,
            fallback: false,
            hit_cap: false,
            prompt_tokens: 0,
            output_tokens: 0,
            final_text: String::new(),
        }
    }

    pub fn stage(&self, stage: Stage) -> &StageStats {
        match stage {
            Stage::Normal => &self.normal,
            Stage::Skeleton => &self.skeleton,
            Stage::Parallel => &self.parallel,
            Stage::Continuation => &self.continuation,
        }
    }

    fn stage_mut(&mut self, stage: Stage) -> &mut StageStats {
        match stage {
            Stage::Normal => &mut self.normal,
            Stage::Skeleton => &mut self.skeleton,
            Stage::Parallel => &mut self.parallel,
            Stage::Continuation => &mut self.continuation,
        }
    }

    fn all(&self) -> [&StageStats; 4] {
        [&self.normal, &self.skeleton, &self.parallel, &self.continuation]
    }

    pub fn prefill_passes(&self) -> usize {
        self.all().iter().map(|s| s.prefill_passes).sum()
    }

    pub fn decode_passes(&self) -> usize {
        self.all().iter().map(|s| s.decode_passes).sum()
    }

    pub fn total_passes(&self) -> usize {
        self.prefill_passes() + self.decode_passes()
    }

    pub fn wall_time_s(&self) -> f64 {
        self.all().iter().map(|s| s.wall_time_s).sum()
    }

    pub fn position_law_violations(&self) -> usize {
        self.blocks.iter().map(BlockTrace::position_law_violations).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchState {
    Active,
    /// Finished after `step` body tokens; `capped` when the step cap, not a
    /// marker, ended it.
    Terminated { step: usize, capped: bool },
}

/// One group of parallel branches after stage 2.
#[derive(Debug, Clone, PartialEq)]
pub struct ParallelBlock {
    pub layout: SequenceLayout,
    pub titles: Vec<Vec<TokenId>>,
    pub states: Vec<BranchState>,
    pub bodies: Vec<Vec<TokenId>>,
    pub max_steps: usize,
    /// Per branch, the logits that produced each body token (and the
    /// terminating marker, if any). Only filled when requested.
    pub branch_logits: Option<Vec<Vec<Vec<f32>>>>,
}

impl ParallelBlock {
    pub fn n_branches(&self) -> usize {
        self.titles.len()
    }

    pub fn block_start(&self) -> usize {
        self.layout.block_start()
    }

    /// Steps in title order as marker, title, colon, body; then marker and
    /// terminator.
    pub fn flatten(&self) -> Vec<TokenId> {
        let mut out = Vec::new();
        for (title, body) in self.titles.iter().zip(&self.bodies) {
            out.push(MARK);
            out.extend_from_slice(title);
            out.push(COLON);
            out.extend_from_slice(body);
        }
        out.push(MARK);
        out.push(TERM);
        out
    }
}

/// Marker, title and colon: the tokens a branch is conditioned on.
pub fn step_head(title: &[TokenId]) -> Vec<TokenId> {
    let mut head = Vec::with_capacity(title.len() + 2);
    head.push(MARK);
    head.extend_from_slice(title);
    head.push(COLON);
    head
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Stage1Outcome {
    Skeleton { skeleton: Skeleton, block_start: usize, transcript: Vec<TokenId> },
    /// No usable marker; the session was rewound to where stage 1 began.
    NoMark { transcript: Vec<TokenId> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContinuationEnd {
    Eos,
    /// A marker was chosen next; it is not yet committed.
    NewBlock,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Stage3Outcome {
    pub tokens: Vec<TokenId>,
    pub end: ContinuationEnd,
}

/// One decoding run: the engine, its cache, and the committed sequence.
///
/// Invariant: `cache` holds entries for a prefix of `tokens` at positions
/// equal to their indices (outside stage 2), and when the two have equal
/// length `next_logits` predicts the next token.
pub struct DecodeSession<E> {
    engine: E,
    config: DecodeConfig,
    cache: KvCache,
    tokens: Vec<TokenId>,
    next_logits: Vec<f32>,
    prompt_len: usize,
    trace: DecodeTrace,
}

impl<E: ForwardEngine> DecodeSession<E> {
    /// Prefills `prompt` in one pass, accounted to the first stage of `mode`.
    pub fn new(engine: E, config: DecodeConfig, prompt: &[TokenId], mode: Mode) -> Result<Self, PipelineError> {
        config.validate()?;
        if prompt.is_empty() {
            return Err(PipelineError::EmptyPrompt);
        }
        let cache = engine.new_cache();
        let mut session = Self {
            engine,
            config,
            cache,
            tokens: Vec::new(),
            next_logits: Vec::new(),
            prompt_len: prompt.len(),
            trace: DecodeTrace::new(mode),
        };
        session.trace.prompt_tokens = prompt.len();
        let stage = match mode {
            Mode::Normal => Stage::Normal,
            Mode::Parallel => Stage::Skeleton,
        };
        let start = Instant::now();
        session.commit_and_feed(prompt, stage, true)?;
        session.trace.stage_mut(stage).wall_time_s += start.elapsed().as_secs_f64();
        Ok(session)
    }

    pub fn cache(&self) -> &KvCache {
        &self.cache
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn trace(&self) -> &DecodeTrace {
        &self.trace
    }

    pub fn engine(&self) -> &E {
        &self.engine
    }

    /// Generated text so far (everything after the prompt).
    pub fn output(&self) -> &[TokenId] {
        &self.tokens[self.prompt_len..]
    }

    fn count_pass(&mut self, stage: Stage, prefill: bool) {
        let s = self.trace.stage_mut(stage);
        if prefill {
            s.prefill_passes += 1;
        } else {
            s.decode_passes += 1;
        }
    }

    /// Appends `new` to the committed sequence and encodes it causally.
    fn commit_and_feed(&mut self, new: &[TokenId], stage: Stage, prefill: bool) -> Result<(), PipelineError> {
        debug_assert_eq!(self.cache.len(), self.tokens.len());
        let req = ForwardRequest::causal(self.cache.len(), new);
        let logits = self.engine.forward(&req, &mut self.cache)?;
        self.tokens.extend_from_slice(new);
        self.next_logits.clear();
        self.next_logits.extend_from_slice(logits.last());
        self.count_pass(stage, prefill);
        Ok(())
    }

    fn rewind(&mut self, length: usize) -> Result<(), PipelineError> {
        self.tokens.truncate(length);
        if self.cache.len() > length {
            self.cache.truncate(length)?;
        }
        Ok(())
    }

    /// Plain greedy decoding until EOS or `max_normal_tokens`.
    pub fn run_normal(&mut self) -> Result<(), PipelineError> {
        let start = Instant::now();
        let mut emitted = 0;
        loop {
            let tok = argmax(&self.next_logits);
            if tok == EOS {
                break;
            }
            emitted += 1;
            if emitted == self.config.max_normal_tokens {
                self.tokens.push(tok);
                self.trace.hit_cap = true;
                break;
            }
            self.commit_and_feed(&[tok], Stage::Normal, false)?;
        }
        let s = &mut self.trace.normal;
        s.tokens_emitted += emitted;
        s.wall_time_s += start.elapsed().as_secs_f64();
        Ok(())
    }

    /// Greedy skeleton generation under logit forcing.
    pub fn run_stage1(&mut self) -> Result<Stage1Outcome, PipelineError> {
        let timer = Instant::now();
        let start = self.tokens.len();
        let entry_logits = self.next_logits.clone();
        let mut state = ForcingState::Free;
        let mut generated = Vec::new();
        let mut logits = Vec::with_capacity(self.next_logits.len());
        loop {
            logits.clear();
            logits.extend_from_slice(&self.next_logits);
            state.mask(&mut logits);
            let tok = argmax(&logits);
            state = state.advance(tok);
            generated.push(tok);
            if tok == TERM || tok == EOS {
                self.tokens.push(tok);
                break;
            }
            if generated.len() >= self.config.max_skeleton_tokens {
                return Err(PipelineError::SkeletonCapExceeded { cap: self.config.max_skeleton_tokens });
            }
            self.commit_and_feed(&[tok], Stage::Skeleton, false)?;
        }
        let s = &mut self.trace.skeleton;
        s.tokens_emitted += generated.len();
        s.wall_time_s += timer.elapsed().as_secs_f64();

        match parse_skeleton(&generated) {
            Ok(skeleton) => {
                let block_start = start + skeleton.block_start;
                Ok(Stage1Outcome::Skeleton { skeleton, block_start, transcript: generated })
            }
            Err(SkeletonError::NoMarkFound) => {
                self.rewind(start)?;
                self.next_logits = entry_logits;
                Ok(Stage1Outcome::NoMark { transcript: generated })
            }
            Err(e) => Err(e.into()),
        }
    }

    /// Decodes every branch of `skeleton` in parallel on top of the shared
    /// prefix `..block_start`.
    pub fn run_stage2(&mut self, skeleton: &Skeleton, block_start: usize) -> Result<ParallelBlock, PipelineError> {
        let timer = Instant::now();
        self.rewind(block_start)?;
        let n = skeleton.n_branches();
        let heads: Vec<Vec<TokenId>> = skeleton.branches.iter().map(|t| step_head(t)).collect();
        let head_lens: Vec<usize> = heads.iter().map(Vec::len).collect();
        let mut layout = build_layout(block_start, &head_lens)?;
        let max_steps = self.config.max_steps_per_branch;

        let mut states = vec![BranchState::Active; n];
        let mut bodies: Vec<Vec<TokenId>> = vec![Vec::new(); n];
        let mut logit_log: Option<Vec<Vec<Vec<f32>>>> = self.config.record_branch_logits.then(|| vec![Vec::new(); n]);
        let mut block = BlockTrace {
            block_start,
            n_branches: n,
            head_lens: head_lens.clone(),
            first_step_position: crate::layout::step_positions(&layout, 0),
            ..Default::default()
        };

        let mut choose = |b: usize, row: &[f32], states: &mut [BranchState], bodies: &mut [Vec<TokenId>]| {
            let tok = argmax(row);
            if let Some(log) = logit_log.as_mut() {
                log[b].push(row.to_vec());
            }
            if matches!(tok, MARK | TERM | EOS) {
                states[b] = BranchState::Terminated { step: bodies[b].len(), capped: false };
            } else {
                bodies[b].push(tok);
                if bodies[b].len() >= max_steps {
                    states[b] = BranchState::Terminated { step: bodies[b].len(), capped: true };
                }
            }
        };

        // every head in one pass; each head's last row yields the branch's first token
        let titles = layout.title_range();
        let req = ForwardRequest {
            token_ids: heads.concat(),
            position_ids: layout.entries()[titles.clone()].iter().map(|e| e.position).collect(),
            mask_rows: tree_mask(&layout).rows_for(titles.clone()),
        };
        let logits = self.engine.forward(&req, &mut self.cache)?;
        self.count_pass(Stage::Parallel, true);
        block.passes += 1;
        for b in 0..n {
            choose(b, logits.row(layout.title_end(b) - titles.start), &mut states, &mut bodies);
        }

        while states.contains(&BranchState::Active) {
            let active: Vec<bool> = states.iter().map(|s| *s == BranchState::Active).collect();
            let slots = layout.push_step(&active)?;
            let token_ids = (0..n)
                .map(|b| if active[b] { *bodies[b].last().expect("active branch has a body token") } else { PAD })
                .collect();
            let position_ids: Vec<u32> = layout.entries()[slots.clone()].iter().map(|e| e.position).collect();
            let req = ForwardRequest {
                token_ids,
                position_ids: position_ids.clone(),
                mask_rows: tree_mask(&layout).rows_for(slots),
            };
            let logits = self.engine.forward(&req, &mut self.cache)?;
            self.count_pass(Stage::Parallel, false);
            block.passes += 1;
            block.step_positions.push(position_ids);
            for b in (0..n).filter(|&b| active[b]) {
                choose(b, logits.row(b), &mut states, &mut bodies);
            }
        }

        block.body_lens = bodies.iter().map(Vec::len).collect();
        block.capped = states.iter().map(|s| matches!(s, BranchState::Terminated { capped: true, .. })).collect();
        let s = &mut self.trace.parallel;
        s.tokens_emitted += block.body_lens.iter().sum::<usize>();
        s.wall_time_s += timer.elapsed().as_secs_f64();
        self.trace.blocks.push(block);

        Ok(ParallelBlock {
            layout,
            titles: skeleton.branches.clone(),
            states,
            bodies,
            max_steps,
            branch_logits: logit_log,
        })
    }

    /// Replaces stage-2 state with the flattened block and continues
    /// decoding until EOS or the next marker.
    pub fn run_stage3(&mut self, block: &ParallelBlock) -> Result<Stage3Outcome, PipelineError> {
        let timer = Instant::now();
        self.rewind(block.block_start())?;
        self.commit_and_feed(&block.flatten(), Stage::Continuation, true)?;
        let mut tokens = Vec::new();
        let end = loop {
            let tok = argmax(&self.next_logits);
            if tok == EOS {
                break ContinuationEnd::Eos;
            }
            if tok == MARK {
                break ContinuationEnd::NewBlock;
            }
            if tokens.len() == self.config.max_continuation_tokens {
                return Err(PipelineError::ContinuationCapExceeded { cap: self.config.max_continuation_tokens });
            }
            tokens.push(tok);
            self.commit_and_feed(&[tok], Stage::Continuation, false)?;
        };
        self.trace.block_count += 1;
        let s = &mut self.trace.continuation;
        s.tokens_emitted += tokens.len();
        s.wall_time_s += timer.elapsed().as_secs_f64();
        Ok(Stage3Outcome { tokens, end })
    }

    /// Runs to completion in the session's mode.
    pub fn run(&mut self) -> Result<(), PipelineError> {
        if self.trace.mode == Mode::Normal {
            return self.run_normal();
        }
        loop {
            if self.trace.block_count == self.config.max_blocks {
                return Err(PipelineError::TooManyBlocks { max: self.config.max_blocks });
            }
            match self.run_stage1()? {
                Stage1Outcome::NoMark { .. } => {
                    self.trace.fallback = true;
                    return self.run_normal();
                }
                Stage1Outcome::Skeleton { skeleton, block_start, .. } => {
                    let block = self.run_stage2(&skeleton, block_start)?;
                    if self.run_stage3(&block)?.end == ContinuationEnd::Eos {
                        return Ok(());
                    }
                }
            }
        }
    }

    /// Final answer text and the completed trace.
    pub fn finish(mut self) -> (String, DecodeTrace) {
        let text = vocab::decode(self.output());
        self.trace.output_tokens = self.output().len();
        self.trace.final_text = text.clone();
        (text, self.trace)
    }
}

/// Runs `prompt` to completion in `mode`.
pub fn run_pipeline<E: ForwardEngine>(
    engine: E,
    prompt: &[TokenId],
    config: &DecodeConfig,
    mode: Mode,
) -> Result<(String, DecodeTrace), PipelineError> {
    let mut session = DecodeSession::new(engine, config.clone(), prompt, mode)?;
    session.run()?;
    Ok(session.finish())
}
