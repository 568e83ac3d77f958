//! Step-wise beam search over a pluggable token constraint.
//!
//! The search never calls a scorer itself: [`BeamSearch::contexts`] yields
//! the batch for the next decode step and [`BeamSearch::advance`] consumes the
//! resulting rows. Callers may therefore merge several searches into a single
//! scorer call per step.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::token_index::{TokenId, Trie};

/// Which tokens may follow a partial sequence.
pub trait Constraint {
    type Node: Copy;

    fn root(&self) -> Self::Node;

    /// Pushes the allowed `(token, next node)` pairs in ascending token order.
    fn expand(&self, node: Self::Node, out: &mut Vec<(TokenId, Self::Node)>);

    /// Whether taking `token` into `next` finishes a sequence.
    fn is_complete(&self, next: Self::Node, token: TokenId) -> bool;
}

impl<T: Constraint + ?Sized> Constraint for &T {
    type Node = T::Node;

    fn root(&self) -> T::Node {
        (**self).root()
    }

    fn expand(&self, node: T::Node, out: &mut Vec<(TokenId, T::Node)>) {
        (**self).expand(node, out)
    }

    fn is_complete(&self, next: T::Node, token: TokenId) -> bool {
        (**self).is_complete(next, token)
    }
}

impl Constraint for Trie {
    type Node = usize;

    fn root(&self) -> usize {
        Trie::root(self)
    }

    fn expand(&self, node: usize, out: &mut Vec<(TokenId, usize)>) {
        out.extend(self.children(node));
    }

    fn is_complete(&self, next: usize, _token: TokenId) -> bool {
        !self.terminal_ids(next).is_empty()
    }
}

/// A fixed token whitelist; a sequence is complete once it emits `end`.
#[derive(Clone, Debug)]
pub struct VocabMask {
    allowed: Vec<TokenId>,
    end: TokenId,
}

impl VocabMask {
    pub fn new(mut allowed: Vec<TokenId>, end: TokenId) -> VocabMask {
        allowed.sort_unstable();
        allowed.dedup();
        VocabMask { allowed, end }
    }

    pub fn allowed(&self) -> &[TokenId] {
        &self.allowed
    }
}

impl Constraint for VocabMask {
    type Node = ();

    fn root(&self) {}

    fn expand(&self, _node: (), out: &mut Vec<(TokenId, ())>) {
        out.extend(self.allowed.iter().map(|&t| (t, ())));
    }

    fn is_complete(&self, _next: (), token: TokenId) -> bool {
        token == self.end
    }
}

/// One partial or finished path.
#[derive(Clone, Debug)]
pub struct Hypothesis<N> {
    pub prefix: Vec<TokenId>,
    pub node: N,
    /// Sum of conditional log-probabilities along `prefix`.
    pub cond: f64,
    /// Sum of null-prompt log-probabilities along `prefix` (zero when untracked).
    pub prior: f64,
}

impl<N> Hypothesis<N> {
    pub fn rank_value(&self, eta: f64) -> f64 {
        if eta == 0.0 {
            self.cond
        } else {
            self.cond - eta * self.prior
        }
    }
}

/// Descending by value, then lexicographically smallest prefix.
pub fn rank_cmp(a_value: f64, a_prefix: &[TokenId], b_value: f64, b_prefix: &[TokenId]) -> Ordering {
    b_value
        .partial_cmp(&a_value)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a_prefix.cmp(b_prefix))
}

struct Candidate<N> {
    value: f64,
    parent: u32,
    /// (parent prefix rank, token): the lexicographic tie-break key.
    order: (u32, TokenId),
    node: N,
    cond: f64,
    prior: f64,
    done: bool,
}

#[derive(Clone, Debug)]
pub struct BeamSearch<C: Constraint> {
    constraint: C,
    width: usize,
    rank_eta: f64,
    cond_prefix: Vec<TokenId>,
    prior_prefix: Option<Vec<TokenId>>,
    live: Vec<Hypothesis<C::Node>>,
    completed: Vec<Hypothesis<C::Node>>,
    steps: usize,
    max_steps: usize,
    scratch: Vec<(TokenId, C::Node)>,
}

impl<C: Constraint> BeamSearch<C> {
    /// `cond_prefix` is the conditioning context placed before every
    /// hypothesis. When `prior_prefix` is given, a paired null-prompt stream
    /// is scored alongside and hypotheses rank by `cond - rank_eta * prior`.
    pub fn new(
        constraint: C,
        width: usize,
        max_steps: usize,
        cond_prefix: Vec<TokenId>,
        prior_prefix: Option<Vec<TokenId>>,
        rank_eta: f64,
    ) -> Result<Self> {
        if width == 0 {
            return Err(Error::InvalidConfig("beam size must be at least 1".into()));
        }
        if max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        let root = Hypothesis {
            prefix: Vec::new(),
            node: constraint.root(),
            cond: 0.0,
            prior: 0.0,
        };
        Ok(BeamSearch {
            constraint,
            width,
            rank_eta: if prior_prefix.is_some() { rank_eta } else { 0.0 },
            cond_prefix,
            prior_prefix,
            live: vec![root],
            completed: Vec::new(),
            steps: 0,
            max_steps,
            scratch: Vec::new(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.live.is_empty() || self.completed.len() >= self.width || self.steps >= self.max_steps
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn live(&self) -> &[Hypothesis<C::Node>] {
        &self.live
    }

    pub fn completed(&self) -> &[Hypothesis<C::Node>] {
        &self.completed
    }

    pub fn tracks_prior(&self) -> bool {
        self.prior_prefix.is_some()
    }

    /// Contexts for the next decode step: every live hypothesis under the
    /// conditioning prefix, then (if tracked) every one under the null prefix.
    pub fn contexts(&self) -> Vec<Vec<TokenId>> {
        if self.is_done() {
            return Vec::new();
        }
        let with = |head: &[TokenId], h: &Hypothesis<C::Node>| {
            let mut c = Vec::with_capacity(head.len() + h.prefix.len());
            c.extend_from_slice(head);
            c.extend_from_slice(&h.prefix);
            c
        };
        let mut out: Vec<Vec<TokenId>> = self.live.iter().map(|h| with(&self.cond_prefix, h)).collect();
        if let Some(prior) = &self.prior_prefix {
            out.extend(self.live.iter().map(|h| with(prior, h)));
        }
        out
    }

    /// Expands every live hypothesis with the rows answering [`Self::contexts`].
    pub fn advance(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        let k = self.live.len();
        let expected = if self.prior_prefix.is_some() { 2 * k } else { k };
        if rows.len() != expected {
            return Err(Error::Protocol(format!(
                "beam step expected {expected} rows, got {}",
                rows.len()
            )));
        }
        // Live hypotheses share one length, so a child's prefix order is its
        // parent's prefix order, then its token.
        let mut parent_order: Vec<usize> = (0..k).collect();
        parent_order.sort_by(|&a, &b| self.live[a].prefix.cmp(&self.live[b].prefix));
        let mut parent_rank = vec![0u32; k];
        for (r, &i) in parent_order.iter().enumerate() {
            parent_rank[i] = r as u32;
        }

        let mut candidates: Vec<Candidate<C::Node>> = Vec::new();
        for (i, h) in self.live.iter().enumerate() {
            self.scratch.clear();
            self.constraint.expand(h.node, &mut self.scratch);
            let cond_row = &rows[i];
            let prior_row = self.prior_prefix.as_ref().map(|_| &rows[k + i]);
            for &(token, node) in &self.scratch {
                let lp = *cond_row
                    .get(token as usize)
                    .ok_or_else(|| Error::Protocol(format!("row too short for token {token}")))?;
                let cond = h.cond + lp;
                let prior = match prior_row {
                    Some(row) => h.prior + row[token as usize],
                    None => h.prior,
                };
                let value = if self.rank_eta == 0.0 {
                    cond
                } else {
                    cond - self.rank_eta * prior
                };
                candidates.push(Candidate {
                    value,
                    parent: i as u32,
                    order: (parent_rank[i], token),
                    node,
                    cond,
                    prior,
                    done: self.constraint.is_complete(node, token),
                });
            }
        }
        let by_rank = |a: &Candidate<C::Node>, b: &Candidate<C::Node>| {
            b.value
                .partial_cmp(&a.value)
                .unwrap_or(Ordering::Equal)
                .then_with(|| a.order.cmp(&b.order))
        };
        // at most `width` live and `width - completed` finished candidates are consumed
        let needed = 2 * self.width - self.completed.len().min(self.width);
        if candidates.len() > needed {
            candidates.select_nth_unstable_by(needed - 1, by_rank);
            candidates.truncate(needed);
        }
        candidates.sort_unstable_by(by_rank);

        let mut live = Vec::with_capacity(self.width);
        for c in candidates {
            if live.len() == self.width {
                break;
            }
            if c.done && self.completed.len() >= self.width {
                continue;
            }
            let parent = &self.live[c.parent as usize];
            let mut prefix = Vec::with_capacity(parent.prefix.len() + 1);
            prefix.extend_from_slice(&parent.prefix);
            prefix.push(c.order.1);
            let h = Hypothesis {
                prefix,
                node: c.node,
                cond: c.cond,
                prior: c.prior,
            };
            if c.done {
                self.completed.push(h);
            } else {
                live.push(h);
            }
        }
        self.live = live;
        self.steps += 1;
        Ok(())
    }

    /// Completed hypotheses, then the live ones.
    #[allow(clippy::type_complexity)]
    pub fn into_parts(self) -> (Vec<Hypothesis<C::Node>>, Vec<Hypothesis<C::Node>>) {
        (self.completed, self.live)
    }
}
