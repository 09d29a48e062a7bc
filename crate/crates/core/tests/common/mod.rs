#![allow(dead_code)]

use pdos_core::harness::{Branch, Segment, TaskKind, TaskScript};
use pdos_core::vocab::{TokenId, COLON, ELLIPSIS, EOS, MARK, TERM};
use pdos_core::{Instruction, ModelConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn short_instruction() -> Instruction {
    Instruction::from_text("Mark each independent step with #### and end the list with ####%%%%.").unwrap()
}

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { n_layers: 2, n_heads: 2, head_dim: 8, hidden_dim: 16, seed, ..Default::default() }
}

fn word(rng: &mut ChaCha8Rng, max: usize) -> String {
    let len = rng.random_range(1..=max);
    (0..len).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}

fn block(rng: &mut ChaCha8Rng, max_branches: usize, max_body: usize) -> Segment {
    let n = rng.random_range(1..=max_branches);
    let mut branches: Vec<Branch> = Vec::new();
    while branches.len() < n {
        let title = word(rng, 6);
        if branches.iter().any(|b| b.title == title) {
            continue;
        }
        let body_len = rng.random_range(0..=max_body);
        let body = if body_len == 0 { String::new() } else { format!(" {}", word(rng, body_len)) };
        branches.push(Branch { title, body });
    }
    Segment::Block(branches)
}

/// Random task with one block, sometimes two, with text around them.
pub fn random_task(seed: u64) -> TaskScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut segments = vec![Segment::Text(format!("Plan {}.", word(&mut rng, 8))), block(&mut rng, 6, 12)];
    segments.push(Segment::Text(format!(" then {}", word(&mut rng, 6))));
    if rng.random_bool(0.3) {
        segments.push(block(&mut rng, 4, 8));
        segments.push(Segment::Text(format!(" done {}", word(&mut rng, 4))));
    }
    TaskScript::new(TaskKind::Custom, format!("Task {}", word(&mut rng, 10)), segments, None).unwrap()
}

/// Task with two parallel blocks separated by text.
pub fn two_block_task() -> TaskScript {
    let br = |t: &str, b: &str| Branch { title: t.into(), body: b.into() };
    TaskScript::new(
        TaskKind::Custom,
        "Compare the two offers, then plan the move.",
        vec![
            Segment::Text("First the offers.".into()),
            Segment::Block(vec![br("Offer A", " pays more, long commute"), br("Offer B", " pays less, remote")]),
            Segment::Text("\nOffer B wins. Next the move.".into()),
            Segment::Block(vec![
                br("Housing", " stay put"),
                br("Budget", " cut travel costs"),
                br("Timing", " start in spring"),
            ]),
            Segment::Text("\nDecision: take Offer B.".into()),
        ],
        Some("Decision: take Offer B.".into()),
    )
    .unwrap()
}

/// Task whose branches have equal bodies of `len` bytes.
pub fn equal_body_task(n: usize, len: usize) -> TaskScript {
    let branches = (0..n)
        .map(|i| Branch { title: format!("S{i}"), body: format!("{:x<len$}", format!(" b{i}")) })
        .collect();
    TaskScript::new(
        TaskKind::Custom,
        "Work through the steps.",
        vec![Segment::Text("Go.".into()), Segment::Block(branches), Segment::Text(" ok".into())],
        None,
    )
    .unwrap()
}

/// Next-token rule that wanders through bytes and format tokens at
/// random (as a function of the visible tokens) and always stops
/// eventually.
pub struct RandomSkeletonScript {
    pub seed: u64,
    pub prompt_len: usize,
}

impl pdos_core::model::Script for RandomSkeletonScript {
    fn next_token(&self, visible: &[TokenId]) -> Option<TokenId> {
        let mut h = self.seed ^ 0x9e37_79b9_7f4a_7c15;
        for &t in visible.iter().rev().take(4) {
            h = (h ^ t as u64).wrapping_mul(0x0100_0000_01b3);
        }
        h = (h ^ visible.len() as u64).wrapping_mul(0x0100_0000_01b3);
        let mut rng = ChaCha8Rng::seed_from_u64(h);
        if visible.len() > self.prompt_len + 300 {
            // close whatever is open: colon, ellipsis, terminator
            return Some(match visible.last() {
                Some(&MARK) | Some(&ELLIPSIS) => TERM,
                Some(&COLON) => ELLIPSIS,
                _ => COLON,
            });
        }
        let r: f64 = rng.random();
        Some(match r {
            r if r < 0.12 => MARK,
            r if r < 0.24 => COLON,
            r if r < 0.28 => ELLIPSIS,
            r if r < 0.31 => TERM,
            r if r < 0.32 => EOS,
            _ => rng.random_range(32..127),
        })
    }
}
