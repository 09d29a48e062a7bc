//! Reference checks that do not share code with the thing they check.
//!
//! The mask oracle restates visibility as a predicate over pairs of
//! segment kinds; the isolation oracle decodes each branch alone in a
//! fresh cache with the same position ids the parallel pass used.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::layout::{build_layout, tree_mask, SegmentKind, SequenceLayout};
use crate::model::{
    argmax, init_model, EngineError, ForwardEngine, ForwardRequest, KvCache, Logits, ModelConfig, Transformer,
};
use crate::pipeline::{step_head, DecodeConfig, DecodeSession, Mode, PipelineError};
use crate::skeleton::Skeleton;
use crate::vocab::{TokenId, COLON, ELLIPSIS, EOS, MARK, TERM};

/// Whether `key` is visible to `query`, decided from the two entries'
/// kinds alone.
pub fn brute_force_visible(layout: &SequenceLayout, query: usize, key: usize) -> bool {
    if key == query {
        return true;
    }
    if key > query {
        return false;
    }
    let q = layout.entry(query).kind;
    let k = layout.entry(key).kind;
    match (q, k) {
        (_, SegmentKind::Pad { .. }) => false,
        (_, SegmentKind::SharedPrefix) => true,
        (SegmentKind::SharedPrefix, _) => false,
        (SegmentKind::Continuation, _) => true,
        (_, SegmentKind::Continuation) => false,
        (SegmentKind::BranchTitle { branch: a }, SegmentKind::BranchTitle { branch: b }) => a == b,
        (SegmentKind::BranchTitle { .. }, _) => false,
        (
            SegmentKind::BranchBody { branch: a, .. } | SegmentKind::Pad { branch: a, .. },
            SegmentKind::BranchTitle { branch: b } | SegmentKind::BranchBody { branch: b, .. },
        ) => a == b,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct MaskMismatch {
    pub query: usize,
    pub key: usize,
    pub expected: bool,
}

/// First disagreement between the tree mask and the brute-force predicate.
pub fn check_mask(layout: &SequenceLayout) -> Result<(), MaskMismatch> {
    let mask = tree_mask(layout);
    for q in 0..layout.len() {
        let visible = mask.visible(q);
        for k in 0..layout.len() {
            let expected = brute_force_visible(layout, q, k);
            if visible.binary_search(&k).is_ok() != expected {
                return Err(MaskMismatch { query: q, key: k, expected });
            }
        }
    }
    Ok(())
}

/// A single-branch layout must reproduce the causal mask index by index
/// and number positions like a plain sequence.
pub fn check_causal_collapse(layout: &SequenceLayout) -> Result<(), MaskMismatch> {
    assert_eq!(layout.n_branches(), 1);
    let mask = tree_mask(layout);
    for q in 0..layout.len() {
        let expected: Vec<usize> = (0..=q).collect();
        let visible = mask.visible(q);
        if visible != expected {
            let key = (0..=q).find(|k| visible.binary_search(k).is_err()).unwrap_or(q);
            return Err(MaskMismatch { query: q, key, expected: true });
        }
        if layout.entry(q).position != q as u32 {
            return Err(MaskMismatch { query: q, key: q, expected: true });
        }
    }
    Ok(())
}

/// Random layout: prefix, titles, body steps with branches dropping out
/// for good, then a few continuation slots.
pub fn random_layout(rng: &mut impl Rng, max_branches: usize) -> SequenceLayout {
    let n = rng.random_range(1..=max_branches);
    let titles: Vec<usize> = (0..n).map(|_| rng.random_range(1..=5)).collect();
    let mut layout = build_layout(rng.random_range(0..=8), &titles).expect("non-empty titles");
    let mut active = vec![true; n];
    for _ in 0..rng.random_range(0..=6) {
        for a in active.iter_mut() {
            if *a && rng.random_bool(0.25) {
                *a = false;
            }
        }
        layout.push_step(&active).expect("branch count matches");
    }
    layout.push_continuation(rng.random_range(0..=3));
    layout
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct MaskOracleReport {
    pub layouts: usize,
    pub mismatches: usize,
    pub collapse_checked: usize,
    pub collapse_failures: usize,
    pub first_mismatch: Option<MaskMismatch>,
}

impl MaskOracleReport {
    pub fn passed(&self) -> bool {
        self.mismatches == 0 && self.collapse_failures == 0 && self.collapse_checked > 0
    }
}

/// Checks `trials` random layouts against the predicate, and as many
/// single-branch layouts (no pads) against the causal mask.
pub fn run_mask_oracle(trials: usize, seed: u64) -> MaskOracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = MaskOracleReport::default();
    for _ in 0..trials {
        let layout = random_layout(&mut rng, 6);
        report.layouts += 1;
        if let Err(m) = check_mask(&layout) {
            report.mismatches += 1;
            report.first_mismatch.get_or_insert(m);
        }

        let mut single = build_layout(rng.random_range(0..=8), &[rng.random_range(1..=5)]).expect("one title");
        for _ in 0..rng.random_range(0..=6) {
            single.push_step(&[true]).expect("one branch");
        }
        single.push_continuation(rng.random_range(0..=3));
        report.collapse_checked += 1;
        if check_causal_collapse(&single).is_err() {
            report.collapse_failures += 1;
        }
    }
    report
}

/// Per-step logits of one branch decoded alone: the prefix causally at
/// positions `0..prefix.len()`, the head at positions restarting at the
/// prefix end, then each fed body token at `first_step_position + j`.
/// Returns the logits after the head and after every fed token.
pub fn isolated_branch_logits<E: ForwardEngine>(
    engine: &E,
    prefix: &[TokenId],
    head: &[TokenId],
    first_step_position: u32,
    body: &[TokenId],
) -> Result<Vec<Vec<f32>>, EngineError> {
    let mut cache = engine.new_cache();
    if !prefix.is_empty() {
        engine.forward(&ForwardRequest::causal(0, prefix), &mut cache)?;
    }
    let p = prefix.len() as u32;
    let positions = (0..head.len() as u32).map(|i| p + i).collect();
    let logits = engine.forward(&ForwardRequest::causal_at(cache.len(), head, positions), &mut cache)?;
    let mut out = vec![logits.last().to_vec()];
    for (j, &tok) in body.iter().enumerate() {
        let req = ForwardRequest::causal_at(cache.len(), &[tok], vec![first_step_position + j as u32]);
        out.push(engine.forward(&req, &mut cache)?.last().to_vec());
    }
    Ok(out)
}

/// Greedy isolated decode of one branch, terminating like the parallel
/// stage does (marker, terminator or end token; or the step cap).
pub fn isolated_branch_body<E: ForwardEngine>(
    engine: &E,
    prefix: &[TokenId],
    head: &[TokenId],
    first_step_position: u32,
    max_steps: usize,
) -> Result<Vec<TokenId>, EngineError> {
    let mut cache = engine.new_cache();
    if !prefix.is_empty() {
        engine.forward(&ForwardRequest::causal(0, prefix), &mut cache)?;
    }
    let p = prefix.len() as u32;
    let positions = (0..head.len() as u32).map(|i| p + i).collect();
    let mut logits = engine.forward(&ForwardRequest::causal_at(cache.len(), head, positions), &mut cache)?;
    let mut body = Vec::new();
    loop {
        let tok = argmax(logits.last());
        if matches!(tok, MARK | TERM | EOS) {
            return Ok(body);
        }
        body.push(tok);
        if body.len() >= max_steps {
            return Ok(body);
        }
        let pos = first_step_position + body.len() as u32 - 1;
        logits = engine.forward(&ForwardRequest::causal_at(cache.len(), &[tok], vec![pos]), &mut cache)?;
    }
}

/// Wraps an engine and pushes a row toward the step marker once its own
/// branch body reaches a length derived from the branch title.
///
/// The decision reads only the row's visible tokens, so an isolated decode
/// under the same wrapper stops at the same step.
pub struct StopTrigger<E> {
    inner: E,
    max_len: usize,
}

impl<E: ForwardEngine> StopTrigger<E> {
    pub fn new(inner: E, max_len: usize) -> Self {
        Self { inner, max_len }
    }

    fn stops(&self, visible: &[TokenId]) -> bool {
        let Some(mark) = visible.iter().rposition(|&t| t == MARK) else { return false };
        let Some(colon) = visible[mark..].iter().position(|&t| t == COLON) else { return false };
        let title = &visible[mark + 1..mark + colon];
        let target = title.iter().map(|&t| t as usize).sum::<usize>() % (self.max_len + 1);
        visible.len() - (mark + colon + 1) >= target
    }
}

impl<E: ForwardEngine> ForwardEngine for StopTrigger<E> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn new_cache(&self) -> KvCache {
        self.inner.new_cache()
    }

    fn forward(&self, request: &ForwardRequest, cache: &mut KvCache) -> Result<Logits, EngineError> {
        let base = cache.len();
        let rows = request.normalized_rows(base, self.vocab_size())?;
        let stop: Vec<bool> = rows
            .iter()
            .map(|row| {
                let visible: Vec<TokenId> = row
                    .iter()
                    .map(|&k| if k < base { cache.token(k) } else { request.token_ids[k - base] })
                    .collect();
                self.stops(&visible)
            })
            .collect();
        let logits = self.inner.forward(request, cache)?;
        let v = logits.vocab_size();
        let mut data: Vec<f32> = logits.iter_rows().flatten().copied().collect();
        for (r, _) in stop.iter().enumerate().filter(|(_, &s)| s) {
            data[r * v + MARK as usize] += 1000.0;
        }
        Ok(Logits::new(v, data))
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IsolationOutcome {
    pub n_branches: usize,
    pub bodies_match: bool,
    pub max_abs_diff: f32,
    pub body_lens: Vec<usize>,
}

/// Runs the parallel stage on `prefix` + `titles` and compares every
/// branch against its isolated decode.
pub fn check_branch_isolation<E: ForwardEngine>(
    engine: &E,
    prefix: &[TokenId],
    titles: &[Vec<TokenId>],
    max_steps: usize,
) -> Result<IsolationOutcome, PipelineError> {
    let config = DecodeConfig { max_steps_per_branch: max_steps, record_branch_logits: true, ..Default::default() };
    let mut session = DecodeSession::new(engine, config, prefix, Mode::Parallel)?;
    let skeleton =
        Skeleton { preamble: Vec::new(), branches: titles.to_vec(), block_start: prefix.len(), terminated: true };
    let block = session.run_stage2(&skeleton, prefix.len())?;
    let first = crate::layout::step_positions(&block.layout, 0);
    let recorded = block.branch_logits.as_ref().expect("logits were requested");

    let mut outcome = IsolationOutcome { n_branches: titles.len(), bodies_match: true, ..Default::default() };
    for (b, title) in titles.iter().enumerate() {
        let head = step_head(title);
        let reference = isolated_branch_body(engine, prefix, &head, first, max_steps)?;
        outcome.bodies_match &= reference == block.bodies[b];
        outcome.body_lens.push(block.bodies[b].len());
        let fed = &block.bodies[b][..recorded[b].len() - 1];
        let iso = isolated_branch_logits(engine, prefix, &head, first, fed)?;
        for (a, r) in recorded[b].iter().zip(&iso) {
            for (x, y) in a.iter().zip(r) {
                outcome.max_abs_diff = outcome.max_abs_diff.max((x - y).abs());
            }
        }
        if iso.len() != recorded[b].len() {
            outcome.bodies_match = false;
        }
    }
    Ok(outcome)
}

/// One randomized isolation case: a small transformer, a prefix and
/// titles of byte tokens.
#[derive(Debug, Clone)]
pub struct IsolationCase {
    pub config: ModelConfig,
    pub prefix: Vec<TokenId>,
    pub titles: Vec<Vec<TokenId>>,
    pub max_steps: usize,
}

impl IsolationCase {
    /// Up to 4 layers, 4 heads, head_dim 16, 8 branches, 6-token titles,
    /// 32 body steps.
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n_heads = rng.random_range(1..=4);
        let head_dim = 2 * rng.random_range(1..=8);
        let config = ModelConfig {
            n_layers: rng.random_range(1..=4),
            n_heads,
            head_dim,
            hidden_dim: n_heads * head_dim,
            seed: rng.random(),
            ..Default::default()
        };
        let byte = |rng: &mut ChaCha8Rng| rng.random_range(0..256u32);
        let prefix = (0..rng.random_range(1..=12)).map(|_| byte(&mut rng)).collect();
        let titles = (0..rng.random_range(1..=8))
            .map(|_| (0..rng.random_range(1..=6)).map(|_| byte(&mut rng)).collect())
            .collect();
        Self { config, prefix, titles, max_steps: rng.random_range(1..=32) }
    }

    pub fn model(&self) -> Result<Transformer, EngineError> {
        init_model(self.config.clone())
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct IsolationOracleReport {
    pub cases: usize,
    pub body_mismatches: usize,
    pub max_abs_diff: f32,
    pub errors: Vec<String>,
}

impl IsolationOracleReport {
    pub fn passed(&self, tolerance: f32) -> bool {
        self.cases > 0 && self.body_mismatches == 0 && self.errors.is_empty() && self.max_abs_diff <= tolerance
    }
}

pub fn run_isolation_oracle(cases: usize, seed: u64) -> IsolationOracleReport {
    let mut report = IsolationOracleReport::default();
    for i in 0..cases as u64 {
        let case = IsolationCase::random(seed.wrapping_mul(1_000_003).wrapping_add(i));
        // odd cases stop branches early so pads and marker termination occur
        let result = case.model().map_err(PipelineError::from).and_then(|m| {
            if i % 2 == 0 {
                check_branch_isolation(&m, &case.prefix, &case.titles, case.max_steps)
            } else {
                let engine = StopTrigger::new(m, case.max_steps);
                check_branch_isolation(&engine, &case.prefix, &case.titles, case.max_steps)
            }
        });
        report.cases += 1;
        match result {
            Ok(o) => {
                report.body_mismatches += usize::from(!o.bodies_match);
                report.max_abs_diff = report.max_abs_diff.max(o.max_abs_diff);
            }
            Err(e) => report.errors.push(format!("case {i}: {e}")),
        }
    }
    report
}

/// Forcing post-conditions over a generated skeleton transcript: a colon
/// closing a marker-opened title is followed by an ellipsis, and an
/// ellipsis by a marker or terminator. Returns the first offending index.
pub fn forcing_violation(transcript: &[TokenId]) -> Option<usize> {
    let mut in_title = false;
    let mut title_len = 0;
    for (i, pair) in transcript.windows(2).enumerate() {
        let (cur, next) = (pair[0], pair[1]);
        match cur {
            MARK => {
                in_title = true;
                title_len = 0;
            }
            COLON if in_title && title_len > 0 => {
                in_title = false;
                if next != ELLIPSIS {
                    return Some(i + 1);
                }
            }
            ELLIPSIS => {
                in_title = false;
                if next != MARK && next != TERM {
                    return Some(i + 1);
                }
            }
            TERM => in_title = false,
            _ if in_title => title_len += 1,
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predicate_matches_hand_cases() {
        let mut l = build_layout(2, &[1, 2]).unwrap();
        l.push_step(&[true, false]).unwrap();
        // 0,1 prefix; 2 T0; 3,4 T1; 5 B0.0; 6 X1.0
        assert!(brute_force_visible(&l, 5, 2));
        assert!(!brute_force_visible(&l, 5, 3));
        assert!(brute_force_visible(&l, 4, 3));
        assert!(!brute_force_visible(&l, 6, 5));
        assert!(brute_force_visible(&l, 6, 4));
        l.push_continuation(1);
        assert!(brute_force_visible(&l, 7, 5));
        assert!(!brute_force_visible(&l, 7, 6));
    }

    #[test]
    fn small_mask_oracle_run() {
        let r = run_mask_oracle(100, 3);
        assert!(r.passed(), "{r:?}");
    }

    #[test]
    fn small_isolation_oracle_run() {
        let r = run_isolation_oracle(3, 11);
        assert!(r.passed(1e-4), "{r:?}");
    }

    #[test]
    fn stop_trigger_ends_branches_at_title_length() {
        let case = IsolationCase::random(5);
        let engine = StopTrigger::new(case.model().unwrap(), 32);
        let titles = vec![vec![1], vec![2, 3], vec![7]];
        let o = check_branch_isolation(&engine, &case.prefix, &titles, 32).unwrap();
        assert_eq!(o.body_lens, vec![1, 5, 7]);
        assert!(o.bodies_match);
        assert_eq!(o.max_abs_diff, 0.0);
    }

    #[test]
    fn forcing_violation_scan() {
        assert_eq!(forcing_violation(&[MARK, 65, COLON, ELLIPSIS, MARK, TERM]), None);
        assert_eq!(forcing_violation(&[MARK, 65, COLON, 66]), Some(3));
        assert_eq!(forcing_violation(&[MARK, 65, COLON, ELLIPSIS, 66]), Some(4));
        // a preamble colon is free
        assert_eq!(forcing_violation(&[65, COLON, 66, MARK, TERM]), None);
    }
}
