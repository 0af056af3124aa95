//! Interleaved planner contexts `[task] g SEP o_1 SEP a_1 EOS … o_t SEP`.
//!
//! Every non-empty segment is followed by one separator: SEP after the task
//! block, the goal and each observation, EOS after each action. Using EOS as
//! the action terminator means the context for step `t+1` literally extends
//! the teacher-forced target of step `t`, so a whole episode can be trained
//! as one causal sequence. Empty observation segments (`m = 0`) are skipped
//! together with their separator, which yields the text-only context.

use crate::error::{CoreError, Result};
use crate::graph::{Graph, Var};
use crate::lm::TransformerLm;
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::vocab::{EOS, SEP};

/// A run of context rows: token ids or precomputed embedding rows.
#[derive(Clone, Debug, PartialEq)]
pub enum Piece {
    Tokens(Vec<u32>),
    Embeds { var: Var, rows: usize },
}

impl Piece {
    pub fn len(&self) -> usize {
        match self {
            Piece::Tokens(t) => t.len(),
            Piece::Embeds { rows, .. } => *rows,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn empty() -> Self {
        Piece::Tokens(Vec::new())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SegmentTag {
    Task,
    Goal,
    /// 1-based step index of the observation.
    Observation(usize),
    /// 1-based step index of the action.
    Action(usize),
    /// Teacher-forced target appended after the context.
    Target,
    Separator,
}

/// Inputs for `cxt_t`: prior `(o_i, a_i)` pairs plus the current observation.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSpec {
    pub task: Option<Piece>,
    pub goal: Vec<u32>,
    pub history: Vec<(Piece, Vec<u32>)>,
    pub current: Piece,
    /// Step index of `history[0]`; advances as old pairs are trimmed.
    pub first_step: usize,
    pub max_embeddings: usize,
}

impl ContextSpec {
    pub fn new(goal: Vec<u32>, current: Piece, max_embeddings: usize) -> Self {
        ContextSpec {
            task: None,
            goal,
            history: Vec::new(),
            current,
            first_step: 1,
            max_embeddings,
        }
    }

    /// Assembled length including separators.
    pub fn len(&self) -> usize {
        self.layout().iter().map(|(_, n)| n).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shortest context `trim_context` can reach, with room for the longest
    /// history action.
    pub fn min_viable_len(&self) -> usize {
        let sep = |n: usize| if n > 0 { n + 1 } else { 0 };
        let longest = self
            .history
            .iter()
            .map(|(_, a)| sep(a.len()))
            .max()
            .unwrap_or(0);
        self.task.as_ref().map_or(0, |t| sep(t.len()))
            + sep(self.goal.len())
            + sep(self.current.len())
            + longest
    }

    /// Segment tags and lengths in assembly order, separators included.
    pub fn layout(&self) -> Vec<(SegmentTag, usize)> {
        let mut out = Vec::new();
        let mut seg = |tag, n: usize| {
            if n > 0 {
                out.push((tag, n));
                out.push((SegmentTag::Separator, 1));
            }
        };
        if let Some(t) = &self.task {
            seg(SegmentTag::Task, t.len());
        }
        seg(SegmentTag::Goal, self.goal.len());
        for (i, (o, a)) in self.history.iter().enumerate() {
            seg(SegmentTag::Observation(self.first_step + i), o.len());
            seg(SegmentTag::Action(self.first_step + i), a.len());
        }
        seg(
            SegmentTag::Observation(self.first_step + self.history.len()),
            self.current.len(),
        );
        out
    }

    /// Appends the pieces of this context to a builder.
    pub fn push_into(&self, b: &mut SequenceBuilder) {
        if let Some(t) = &self.task {
            b.segment(SegmentTag::Task, t.clone(), SEP);
        }
        b.segment(SegmentTag::Goal, Piece::Tokens(self.goal.clone()), SEP);
        for (i, (o, a)) in self.history.iter().enumerate() {
            b.segment(SegmentTag::Observation(self.first_step + i), o.clone(), SEP);
            b.segment(
                SegmentTag::Action(self.first_step + i),
                Piece::Tokens(a.clone()),
                EOS,
            );
        }
        b.segment(
            SegmentTag::Observation(self.first_step + self.history.len()),
            self.current.clone(),
            SEP,
        );
    }
}

/// Accumulates pieces and materializes them as one `(len, E)` embedding
/// sequence, gathering adjacent token runs in a single lookup.
#[derive(Clone, Debug, Default)]
pub struct SequenceBuilder {
    pieces: Vec<Piece>,
    tags: Vec<(SegmentTag, usize, usize)>,
    len: usize,
}

impl SequenceBuilder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// `(tag, start, len)` for every pushed segment.
    pub fn tags(&self) -> &[(SegmentTag, usize, usize)] {
        &self.tags
    }

    /// Pushes a raw piece with no separator.
    pub fn push(&mut self, tag: SegmentTag, piece: Piece) {
        let n = piece.len();
        if n == 0 {
            return;
        }
        self.tags.push((tag, self.len, n));
        self.len += n;
        match (self.pieces.last_mut(), piece) {
            (Some(Piece::Tokens(prev)), Piece::Tokens(t)) => prev.extend(t),
            (_, p) => self.pieces.push(p),
        }
    }

    /// Pushes a non-empty piece followed by `terminator`; empty pieces are skipped.
    pub fn segment(&mut self, tag: SegmentTag, piece: Piece, terminator: u32) {
        if piece.is_empty() {
            return;
        }
        self.push(tag, piece);
        self.push(SegmentTag::Separator, Piece::Tokens(vec![terminator]));
    }

    pub fn build<T: Scalar>(
        &self,
        lm: &TransformerLm,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
    ) -> Result<Var> {
        if self.pieces.is_empty() {
            return Err(CoreError::invalid("assemble-context", "empty sequence"));
        }
        let mut parts = Vec::with_capacity(self.pieces.len());
        for p in &self.pieces {
            parts.push(match p {
                Piece::Tokens(t) => lm.embed_tokens(g, store, t)?,
                Piece::Embeds { var, rows } => {
                    let shape = g.shape(*var);
                    if shape != [*rows, lm.embed_dim()] {
                        return Err(CoreError::Shape {
                            op: "assemble-context",
                            lhs: shape.to_vec(),
                            rhs: vec![*rows, lm.embed_dim()],
                        });
                    }
                    *var
                }
            });
        }
        if parts.len() == 1 {
            Ok(parts[0])
        } else {
            g.concat(&parts, 0)
        }
    }
}

/// Context embedding sequence plus its segment boundaries.
#[derive(Clone, Debug)]
pub struct Assembled {
    pub var: Var,
    pub len: usize,
    pub segments: Vec<(SegmentTag, usize, usize)>,
}

/// Builds `cxt_t`; errors if the `ContextSpec` exceeds its budget (trim first).
pub fn assemble_context<T: Scalar>(
    lm: &TransformerLm,
    g: &mut Graph<T>,
    store: &ParamStore<T>,
    spec: &ContextSpec,
) -> Result<Assembled> {
    let needed = spec.len();
    if needed > spec.max_embeddings {
        return Err(CoreError::Budget {
            needed,
            budget: spec.max_embeddings,
        });
    }
    let mut b = SequenceBuilder::new();
    spec.push_into(&mut b);
    let var = b.build(lm, g, store)?;
    Ok(Assembled {
        var,
        len: b.len(),
        segments: b.tags().to_vec(),
    })
}

/// Drops the oldest `(o_i, a_i)` pairs until the context fits `budget`.
pub fn trim_context(spec: &ContextSpec, budget: usize) -> Result<ContextSpec> {
    let min = spec.min_viable_len();
    if min > budget {
        return Err(CoreError::Budget {
            needed: min,
            budget,
        });
    }
    let mut out = spec.clone();
    out.max_embeddings = budget;
    let mut len = out.len();
    let mut drop = 0;
    while len > budget {
        let (o, a) = &out.history[drop];
        len -= [o.len(), a.len()]
            .iter()
            .map(|&n| if n > 0 { n + 1 } else { 0 })
            .sum::<usize>();
        drop += 1;
    }
    out.history.drain(..drop);
    out.first_step += drop;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: usize, actions: &[usize]) -> ContextSpec {
        let obs = || Piece::Tokens(vec![9; m]);
        ContextSpec {
            task: None,
            goal: vec![5, 6, 7],
            history: actions.iter().map(|&n| (obs(), vec![8; n])).collect(),
            current: obs(),
            first_step: 1,
            max_embeddings: 256,
        }
    }

    #[test]
    fn worked_length() {
        // 3 + 2 + 2 + 2 rows plus four separators
        assert_eq!(spec(2, &[2]).len(), 13);
        assert_eq!(spec(2, &[]).len(), 3 + 1 + 2 + 1);
    }

    #[test]
    fn trim_drops_oldest_first() {
        let s = spec(2, &[2, 2, 2]);
        assert_eq!(
            trim_context(&s, s.len()).unwrap(),
            ContextSpec {
                max_embeddings: s.len(),
                ..s.clone()
            }
        );
        let t = trim_context(&s, s.len() - 1).unwrap();
        assert_eq!(t.history.len(), 2);
        assert_eq!(t.first_step, 2);
        assert!(trim_context(&s, 5).is_err());
    }
}
