//! Skeleton stage: the format instruction appended to a task, the logit
//! forcing automaton that keeps generated steps well formed, and the parser
//! that recovers branch titles from the generated skeleton.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::{self, TokenId, COLON, ELLIPSIS, EOS, MARK, PAD, TERM, VOCAB_SIZE};

const BUILTIN_INSTRUCTION: &str = include_str!("../assets/stage1_instruction.txt");

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SkeletonError {
    #[error("instruction text is empty")]
    EmptyInstruction,
    #[error("cannot read instruction: {0}")]
    InstructionIo(String),
    #[error("no step marker found in generated output")]
    NoMarkFound,
    #[error("malformed branch at token {at}: {reason}")]
    MalformedBranch { at: usize, reason: &'static str },
}

/// Format instruction appended after the task text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Instruction(String);

impl Instruction {
    pub fn builtin() -> Self {
        Self(BUILTIN_INSTRUCTION.trim_end().to_string())
    }

    pub fn from_text(text: impl Into<String>) -> Result<Self, SkeletonError> {
        let text = text.into();
        if text.trim().is_empty() {
            return Err(SkeletonError::EmptyInstruction);
        }
        Ok(Self(text))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SkeletonError> {
        let text = std::fs::read_to_string(path).map_err(|e| SkeletonError::InstructionIo(e.to_string()))?;
        Self::from_text(text.trim_end())
    }

    pub fn text(&self) -> &str {
        &self.0
    }
}

impl Default for Instruction {
    fn default() -> Self {
        Self::builtin()
    }
}

/// Full prompt text: the task, a blank line, then the instruction block.
pub fn stage1_prompt_text(task: &str, instruction: &Instruction) -> String {
    format!("{task}\n\n{}\n", instruction.text())
}

pub fn stage1_prompt(task: &str, instruction: &Instruction) -> Vec<TokenId> {
    vocab::encode(&stage1_prompt_text(task, instruction))
}

/// Logit forcing automaton for skeleton generation.
///
/// After a step marker the title must be non-empty and free of format
/// tokens; the colon closing a title forces an ellipsis, and an ellipsis
/// forces either the next marker or the terminator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ForcingState {
    #[default]
    Free,
    /// Inside a title opened by a marker.
    InTitle { has_text: bool },
    AfterColonInTitle,
    AfterEllipsis,
}

impl ForcingState {
    fn allows(&self, token: TokenId) -> bool {
        match *self {
            ForcingState::Free => true,
            ForcingState::InTitle { has_text } => {
                if matches!(token, MARK | ELLIPSIS | PAD | EOS) || token as usize >= VOCAB_SIZE {
                    false
                } else if has_text {
                    token != TERM
                } else {
                    token != COLON
                }
            }
            ForcingState::AfterColonInTitle => token == ELLIPSIS,
            ForcingState::AfterEllipsis => token == MARK || token == TERM,
        }
    }

    /// Sets every disallowed logit to negative infinity.
    pub fn mask(&self, logits: &mut [f32]) {
        if *self == ForcingState::Free {
            return;
        }
        for (t, x) in logits.iter_mut().enumerate() {
            if !self.allows(t as TokenId) {
                *x = f32::NEG_INFINITY;
            }
        }
    }

    pub fn advance(self, token: TokenId) -> ForcingState {
        match (self, token) {
            (ForcingState::InTitle { has_text: true }, COLON) => ForcingState::AfterColonInTitle,
            (_, MARK) => ForcingState::InTitle { has_text: false },
            (_, ELLIPSIS) => ForcingState::AfterEllipsis,
            (_, TERM) => ForcingState::Free,
            (ForcingState::InTitle { .. }, _) => ForcingState::InTitle { has_text: true },
            _ => ForcingState::Free,
        }
    }
}

/// Masks `logits` for `state`, picks greedily, and returns the masked
/// logits with the state after the picked token.
pub fn apply_forcing(state: ForcingState, logits: &[f32]) -> (Vec<f32>, ForcingState) {
    let mut masked = logits.to_vec();
    state.mask(&mut masked);
    let next = state.advance(crate::model::argmax(&masked));
    (masked, next)
}

/// Parsed skeleton of one parallel block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Skeleton {
    /// Tokens before the first step marker.
    pub preamble: Vec<TokenId>,
    /// Title tokens of each step, without marker or colon.
    pub branches: Vec<Vec<TokenId>>,
    /// Index of the first step marker in the parsed token sequence.
    pub block_start: usize,
    /// Whether the terminator was seen.
    pub terminated: bool,
}

impl Skeleton {
    pub fn n_branches(&self) -> usize {
        self.branches.len()
    }

    /// Canonical token form: preamble, each step as marker, title, colon,
    /// ellipsis, then marker and terminator.
    pub fn render(&self) -> Vec<TokenId> {
        let mut out = self.preamble.clone();
        for title in &self.branches {
            out.push(MARK);
            out.extend_from_slice(title);
            out.push(COLON);
            out.push(ELLIPSIS);
        }
        out.push(MARK);
        out.push(TERM);
        out
    }

    pub fn dump(&self) -> SkeletonDump {
        SkeletonDump {
            preamble: vocab::decode(&self.preamble),
            titles: self.branches.iter().map(|t| vocab::decode(t)).collect(),
            n_branches: self.branches.len(),
            block_start: self.block_start,
            terminated: self.terminated,
        }
    }
}

/// JSON form of a [`Skeleton`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonDump {
    pub preamble: String,
    pub titles: Vec<String>,
    pub n_branches: usize,
    pub block_start: usize,
    pub terminated: bool,
}

/// Parses generated tokens into a skeleton.
///
/// Parsing stops at the terminator, which is accepted with or without a
/// preceding marker. Output that ends before the terminator yields
/// `terminated = false` and drops a trailing incomplete step.
pub fn parse_skeleton(tokens: &[TokenId]) -> Result<Skeleton, SkeletonError> {
    let block_start = tokens
        .iter()
        .take_while(|&&t| t != TERM)
        .position(|&t| t == MARK)
        .ok_or(SkeletonError::NoMarkFound)?;
    let malformed = |at, reason| SkeletonError::MalformedBranch { at, reason };

    let mut branches = Vec::new();
    let mut terminated = false;
    let mut i = block_start;
    // invariant at loop head: tokens[i] == MARK
    loop {
        i += 1;
        match tokens.get(i) {
            None => break,
            Some(&TERM) => {
                terminated = true;
                break;
            }
            Some(_) => {}
        }
        let title_start = i;
        while i < tokens.len() && tokens[i] != COLON {
            if vocab::is_format_token(tokens[i]) {
                return Err(malformed(i, "step title interrupted before its colon"));
            }
            i += 1;
        }
        if i == tokens.len() {
            break;
        }
        if i == title_start {
            return Err(malformed(i, "empty step title"));
        }
        let title = tokens[title_start..i].to_vec();
        i += 1;
        match tokens.get(i) {
            None => break,
            Some(&ELLIPSIS) => {}
            Some(_) => return Err(malformed(i, "step colon not followed by an ellipsis")),
        }
        branches.push(title);
        i += 1;
        match tokens.get(i) {
            None => break,
            Some(&MARK) => {}
            Some(&TERM) => {
                terminated = true;
                break;
            }
            Some(_) => return Err(malformed(i, "ellipsis not followed by a marker or terminator")),
        }
    }
    if branches.is_empty() {
        return Err(SkeletonError::NoMarkFound);
    }
    Ok(Skeleton { preamble: tokens[..block_start].to_vec(), branches, block_start, terminated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::encode;
    use proptest::prelude::*;

    #[test]
    fn prompt_ends_with_instruction_and_round_trips() {
        let instr = Instruction::builtin();
        let prompt = stage1_prompt("analyze A,B", &instr);
        let text = vocab::decode(&prompt);
        assert!(text.starts_with("analyze A,B"));
        assert!(text.trim_end().ends_with(instr.text()));
        assert!(instr.text().contains("strictly adhere to the following format"));
        assert_eq!(text, stage1_prompt_text("analyze A,B", &instr));
    }

    #[test]
    fn empty_instruction_is_a_config_error() {
        assert_eq!(Instruction::from_text("  \n"), Err(SkeletonError::EmptyInstruction));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.txt");
        std::fs::write(&p, "").unwrap();
        assert_eq!(Instruction::load(&p), Err(SkeletonError::EmptyInstruction));
    }

    #[test]
    fn forcing_after_colon_yields_ellipsis() {
        let logits: Vec<f32> = (0..VOCAB_SIZE).map(|i| i as f32 * 0.01).collect();
        let (masked, next) = apply_forcing(ForcingState::AfterColonInTitle, &logits);
        assert_eq!(crate::model::argmax(&masked), ELLIPSIS);
        assert_eq!(next, ForcingState::AfterEllipsis);
    }

    #[test]
    fn forcing_after_ellipsis_yields_marker_or_terminator() {
        let mut logits = vec![0.0; VOCAB_SIZE];
        logits[b'x' as usize] = 9.0;
        let (masked, next) = apply_forcing(ForcingState::AfterEllipsis, &logits);
        assert_eq!(crate::model::argmax(&masked), MARK);
        assert_eq!(next, ForcingState::InTitle { has_text: false });
        logits[TERM as usize] = 1.0;
        let (masked, next) = apply_forcing(ForcingState::AfterEllipsis, &logits);
        assert_eq!(crate::model::argmax(&masked), TERM);
        assert_eq!(next, ForcingState::Free);
    }

    #[test]
    fn free_state_passes_through() {
        let logits: Vec<f32> = (0..VOCAB_SIZE).map(|i| ((i * 37) % 11) as f32).collect();
        let (masked, _) = apply_forcing(ForcingState::Free, &logits);
        assert_eq!(masked, logits);
    }

    #[test]
    fn preamble_colon_does_not_force() {
        let s = ForcingState::Free.advance(COLON);
        assert_eq!(s, ForcingState::Free);
        let s = ForcingState::Free.advance(MARK).advance(b'a' as u32).advance(COLON);
        assert_eq!(s, ForcingState::AfterColonInTitle);
    }

    #[test]
    fn parses_two_document_skeleton() {
        let toks = encode("Let us analyze. ####Doc 1:......####Doc 2:......####%%%%");
        let s = parse_skeleton(&toks).unwrap();
        assert_eq!(s.n_branches(), 2);
        assert_eq!(s.dump().titles, vec!["Doc 1", "Doc 2"]);
        assert_eq!(s.dump().preamble, "Let us analyze. ");
        assert_eq!(s.block_start, "Let us analyze. ".len());
        assert!(s.terminated);
    }

    #[test]
    fn missing_marker_is_reported() {
        assert_eq!(parse_skeleton(&encode("just an answer")), Err(SkeletonError::NoMarkFound));
        assert_eq!(parse_skeleton(&encode("pre ####%%%%")), Err(SkeletonError::NoMarkFound));
        assert_eq!(parse_skeleton(&encode("pre %%%% ####a:......")), Err(SkeletonError::NoMarkFound));
    }

    #[test]
    fn ten_groups_counted_by_independent_scan() {
        let mut text = String::from("Check each student.\n");
        for i in 0..10 {
            text.push_str(&format!("####Student {i}:......"));
        }
        text.push_str("####%%%%");
        let expected = text.matches("####").count() - 1;
        let s = parse_skeleton(&encode(&text)).unwrap();
        assert_eq!(s.n_branches(), expected);
        assert_eq!(expected, 10);
    }

    #[test]
    fn terminator_without_final_marker_is_accepted() {
        let s = parse_skeleton(&encode("####a:......%%%%")).unwrap();
        assert!(s.terminated);
        assert_eq!(s.n_branches(), 1);
    }

    #[test]
    fn malformed_branches() {
        for bad in ["####a####b:......", "####:......", "####a:x####", "####a:......x"] {
            assert!(
                matches!(parse_skeleton(&encode(bad)), Err(SkeletonError::MalformedBranch { .. })),
                "{bad}"
            );
        }
    }

    #[test]
    fn unterminated_output_drops_trailing_step() {
        let s = parse_skeleton(&encode("p####a:......####bc")).unwrap();
        assert!(!s.terminated);
        assert_eq!(s.n_branches(), 1);
    }

    fn arb_skeleton() -> impl Strategy<Value = Skeleton> {
        let text = proptest::collection::vec(0u32..256, 0..12);
        let title = proptest::collection::vec(0u32..256, 1..8);
        (text, proptest::collection::vec(title, 1..6)).prop_map(|(mut preamble, mut branches)| {
            // plain bytes can still spell a format string
            preamble = encode(&String::from_utf8_lossy(&vocab::decode_bytes(&preamble)).replace(['#', '%', '.'], ""));
            for t in &mut branches {
                t.retain(|&b| b != b':' as u32 && b != b'#' as u32 && b != b'%' as u32 && b != b'.' as u32);
                if t.is_empty() {
                    t.push(b'x' as u32);
                }
            }
            preamble.retain(|&t| t != MARK && t != TERM);
            let block_start = preamble.len();
            Skeleton { preamble, branches, block_start, terminated: true }
        })
    }

    proptest! {
        #[test]
        fn parse_inverts_render(s in arb_skeleton()) {
            prop_assert_eq!(parse_skeleton(&s.render()).unwrap(), s);
        }
    }
}
