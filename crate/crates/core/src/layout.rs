//! Sequence layout of a parallel block and the tree-like visibility mask
//! derived from it.
//!
//! Cache order is: shared prefix, every branch title (branch-major), then
//! body steps (step-major, one slot per branch per step), then optional
//! continuation tokens. Titles of every branch restart at position
//! `block_start`; every slot of body step `t` carries position
//! `block_start + max_title_len + t`.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum LayoutError {
    #[error("a parallel block needs at least one branch")]
    EmptyBranchSet,
    #[error("branch {0} has an empty title")]
    EmptyTitle(usize),
    #[error("step activity has {got} entries for {expected} branches")]
    BranchCountMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SegmentKind {
    SharedPrefix,
    BranchTitle { branch: usize },
    BranchBody { branch: usize, step: usize },
    Pad { branch: usize, step: usize },
    Continuation,
}

impl SegmentKind {
    pub fn branch(&self) -> Option<usize> {
        match *self {
            SegmentKind::BranchTitle { branch }
            | SegmentKind::BranchBody { branch, .. }
            | SegmentKind::Pad { branch, .. } => Some(branch),
            SegmentKind::SharedPrefix | SegmentKind::Continuation => None,
        }
    }

    fn label(&self) -> String {
        match *self {
            SegmentKind::SharedPrefix => "P".into(),
            SegmentKind::BranchTitle { branch } => format!("T{branch}"),
            SegmentKind::BranchBody { branch, step } => format!("B{branch}.{step}"),
            SegmentKind::Pad { branch, step } => format!("X{branch}.{step}"),
            SegmentKind::Continuation => "C".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub kind: SegmentKind,
    pub position: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceLayout {
    entries: Vec<LayoutEntry>,
    n_branches: usize,
    block_start: usize,
    title_lens: Vec<usize>,
    steps: usize,
    /// Non-pad cache indices of each branch, ascending.
    branch_members: Vec<Vec<usize>>,
}

/// Lays out the shared prefix and every branch title.
pub fn build_layout(prefix_len: usize, title_lens: &[usize]) -> Result<SequenceLayout, LayoutError> {
    if title_lens.is_empty() {
        return Err(LayoutError::EmptyBranchSet);
    }
    if let Some(b) = title_lens.iter().position(|&l| l == 0) {
        return Err(LayoutError::EmptyTitle(b));
    }
    let mut entries: Vec<LayoutEntry> = (0..prefix_len)
        .map(|p| LayoutEntry { kind: SegmentKind::SharedPrefix, position: p as u32 })
        .collect();
    let mut branch_members = vec![Vec::new(); title_lens.len()];
    for (branch, &len) in title_lens.iter().enumerate() {
        for i in 0..len {
            branch_members[branch].push(entries.len());
            entries.push(LayoutEntry {
                kind: SegmentKind::BranchTitle { branch },
                position: (prefix_len + i) as u32,
            });
        }
    }
    Ok(SequenceLayout {
        entries,
        n_branches: title_lens.len(),
        block_start: prefix_len,
        title_lens: title_lens.to_vec(),
        steps: 0,
        branch_members,
    })
}

/// Shared position id of every slot in body step `step`.
pub fn step_positions(layout: &SequenceLayout, step: usize) -> u32 {
    (layout.block_start + layout.max_title_len() + step) as u32
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn entry(&self, index: usize) -> LayoutEntry {
        self.entries[index]
    }

    pub fn n_branches(&self) -> usize {
        self.n_branches
    }

    pub fn block_start(&self) -> usize {
        self.block_start
    }

    pub fn title_lens(&self) -> &[usize] {
        &self.title_lens
    }

    pub fn max_title_len(&self) -> usize {
        self.title_lens.iter().copied().max().unwrap_or(0)
    }

    /// Body steps appended so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Cache indices of the title entries, branch-major.
    pub fn title_range(&self) -> std::ops::Range<usize> {
        self.block_start..self.block_start + self.title_lens.iter().sum::<usize>()
    }

    /// Index of the last title token of `branch`.
    pub fn title_end(&self, branch: usize) -> usize {
        self.block_start + self.title_lens[..=branch].iter().sum::<usize>() - 1
    }

    pub fn positions(&self) -> Vec<u32> {
        self.entries.iter().map(|e| e.position).collect()
    }

    /// Appends one body step: a `BranchBody` slot for every active branch
    /// and a `Pad` slot for every finished one. Returns the new indices.
    pub fn push_step(&mut self, active: &[bool]) -> Result<std::ops::Range<usize>, LayoutError> {
        if active.len() != self.n_branches {
            return Err(LayoutError::BranchCountMismatch { expected: self.n_branches, got: active.len() });
        }
        let step = self.steps;
        let position = step_positions(self, step);
        let start = self.entries.len();
        for (branch, &is_active) in active.iter().enumerate() {
            let kind = if is_active {
                self.branch_members[branch].push(self.entries.len());
                SegmentKind::BranchBody { branch, step }
            } else {
                SegmentKind::Pad { branch, step }
            };
            self.entries.push(LayoutEntry { kind, position });
        }
        self.steps += 1;
        Ok(start..self.entries.len())
    }

    /// Appends `count` continuation slots numbered after the last position.
    pub fn push_continuation(&mut self, count: usize) -> std::ops::Range<usize> {
        let start = self.entries.len();
        let next = self.entries.iter().map(|e| e.position + 1).max().unwrap_or(0);
        for position in (next..).take(count) {
            self.entries.push(LayoutEntry { kind: SegmentKind::Continuation, position });
        }
        start..self.entries.len()
    }
}

/// Visibility relation over a layout.
#[derive(Debug, Clone, Copy)]
pub struct TreeMask<'a> {
    layout: &'a SequenceLayout,
}

pub fn tree_mask(layout: &SequenceLayout) -> TreeMask<'_> {
    TreeMask { layout }
}

impl TreeMask<'_> {
    /// Keys visible to `query`, ascending.
    ///
    /// A query sees itself, the shared prefix, and earlier non-pad entries
    /// of its own branch. Continuation queries see every earlier non-pad
    /// entry. Pad entries are seen only by themselves.
    pub fn visible(&self, query: usize) -> Vec<usize> {
        let layout = self.layout;
        let kind = layout.entries[query].kind;
        let prefix = layout.block_start.min(query);
        let mut out: Vec<usize> = (0..prefix).collect();
        match kind {
            SegmentKind::SharedPrefix => {}
            SegmentKind::BranchTitle { branch }
            | SegmentKind::BranchBody { branch, .. }
            | SegmentKind::Pad { branch, .. } => {
                let members = &layout.branch_members[branch];
                let end = members.partition_point(|&k| k < query);
                out.extend_from_slice(&members[..end]);
            }
            SegmentKind::Continuation => {
                out.extend(
                    (layout.block_start..query)
                        .filter(|&k| !matches!(layout.entries[k].kind, SegmentKind::Pad { .. })),
                );
            }
        }
        out.push(query);
        out
    }

    pub fn is_visible(&self, query: usize, key: usize) -> bool {
        self.visible(query).binary_search(&key).is_ok()
    }

    pub fn rows(&self) -> Vec<Vec<usize>> {
        (0..self.layout.len()).map(|q| self.visible(q)).collect()
    }

    pub fn rows_for(&self, queries: std::ops::Range<usize>) -> Vec<Vec<usize>> {
        queries.map(|q| self.visible(q)).collect()
    }

    /// Text grid: one line per query, one column per key, `1` visible and
    /// `·` hidden, each line prefixed with the query index, its segment
    /// label and position id.
    pub fn to_grid(&self) -> String {
        let layout = self.layout;
        let n = layout.len();
        let mut out = String::new();
        for q in 0..n {
            let e = layout.entries[q];
            let visible = self.visible(q);
            let mut it = visible.iter().peekable();
            let _ = write!(out, "{q:>4} {:<7} {:>4} ", e.kind.label(), e.position);
            for k in 0..n {
                if it.peek() == Some(&&k) {
                    it.next();
                    out.push('1');
                } else {
                    out.push('·');
                }
            }
            out.push('\n');
        }
        out
    }
}
