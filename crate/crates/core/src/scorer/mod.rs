//! Next-token log-probability providers.
//!
//! A [`Scorer`] stands in for the multimodal language model: given a batch of
//! contexts it returns one dense, natural-log distribution over the unified
//! text + visual vocabulary per context. Everything downstream (proxies, beam
//! search, generation) is expressed in terms of this single call.

mod external;
pub mod protocol;
mod table;

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use external::{connect_external, ExternalScorer, Transport};
pub use table::ToyScorer;

use crate::error::{Error, Result};
use crate::token_index::{IndexParams, TokenId};

/// `ln(1e-300)`, substituted for zero probabilities so sums of logs stay finite.
pub const LOG_FLOOR: f64 = -690.7755278982137;

/// Static description of a scorer's vocabulary.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInfo {
    pub vocab_size: u32,
    pub image_start: TokenId,
    pub image_end: TokenId,
    pub visual_lo: TokenId,
    pub visual_hi: TokenId,
    pub supports_tokenize: bool,
    pub name: String,
}

impl ScorerInfo {
    pub fn validate(&self) -> Result<()> {
        let v = self.vocab_size;
        if self.image_start >= v || self.image_end >= v {
            return Err(Error::InvalidConfig(format!(
                "special tokens ({}, {}) must be below vocab_size {v}",
                self.image_start, self.image_end
            )));
        }
        if self.image_start == self.image_end {
            return Err(Error::InvalidConfig("image_start equals image_end".into()));
        }
        if self.visual_lo > self.visual_hi || self.visual_hi >= v {
            return Err(Error::InvalidConfig(format!(
                "visual range {}-{} not inside [0, {v})",
                self.visual_lo, self.visual_hi
            )));
        }
        Ok(())
    }

    pub fn is_visual(&self, token: TokenId) -> bool {
        (self.visual_lo..=self.visual_hi).contains(&token)
    }

    pub fn index_params(&self) -> IndexParams {
        IndexParams {
            vocab_size: self.vocab_size,
            image_end: self.image_end,
        }
    }

    pub fn check_context(&self, context: &[TokenId]) -> Result<()> {
        match context.iter().find(|&&t| t >= self.vocab_size) {
            Some(&t) => Err(Error::TokenOutOfRange {
                token: t as u64,
                vocab_size: self.vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// Batched next-token log-probabilities.
///
/// Implementations must be deterministic and batching-invariant: scoring a
/// batch yields the same vectors as scoring each context on its own.
pub trait Scorer: Send + Sync {
    fn info(&self) -> &ScorerInfo;

    /// One log-probability vector of length `vocab_size` per context, in order.
    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>>;

    fn tokenize(&self, _text: &str) -> Result<Vec<TokenId>> {
        Err(Error::Unsupported("tokenize"))
    }
}

impl<S: Scorer + ?Sized> Scorer for &S {
    fn info(&self) -> &ScorerInfo {
        (**self).info()
    }
    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        (**self).next_logprobs(contexts)
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
}

impl<S: Scorer + ?Sized> Scorer for Box<S> {
    fn info(&self) -> &ScorerInfo {
        (**self).info()
    }
    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        (**self).next_logprobs(contexts)
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
}

impl<S: Scorer + ?Sized> Scorer for Arc<S> {
    fn info(&self) -> &ScorerInfo {
        (**self).info()
    }
    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        (**self).next_logprobs(contexts)
    }
    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        (**self).tokenize(text)
    }
}

/// Shared request validation for in-process scorers.
pub fn check_batch(info: &ScorerInfo, contexts: &[Vec<TokenId>]) -> Result<()> {
    if contexts.is_empty() {
        return Err(Error::EmptyInput);
    }
    for ctx in contexts {
        if ctx.is_empty() {
            return Err(Error::EmptyInput);
        }
        info.check_context(ctx)?;
    }
    Ok(())
}

pub fn logsumexp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Converts raw logits into floored log-probabilities in place.
pub fn log_softmax_in_place(logits: &mut [f64]) {
    let lse = logsumexp(logits);
    for v in logits.iter_mut() {
        *v = (*v - lse).max(LOG_FLOOR);
    }
}

/// Wraps a scorer and counts batched calls and scored contexts.
pub struct CountingScorer<S> {
    inner: S,
    calls: AtomicU64,
    contexts: AtomicU64,
}

impl<S: Scorer> CountingScorer<S> {
    pub fn new(inner: S) -> Self {
        CountingScorer {
            inner,
            calls: AtomicU64::new(0),
            contexts: AtomicU64::new(0),
        }
    }

    /// Number of `next_logprobs` invocations so far.
    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn contexts(&self) -> u64 {
        self.contexts.load(Ordering::Relaxed)
    }

    pub fn reset(&self) {
        self.calls.store(0, Ordering::Relaxed);
        self.contexts.store(0, Ordering::Relaxed);
    }

    pub fn inner(&self) -> &S {
        &self.inner
    }
}

impl<S: Scorer> Scorer for CountingScorer<S> {
    fn info(&self) -> &ScorerInfo {
        self.inner.info()
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.contexts.fetch_add(contexts.len() as u64, Ordering::Relaxed);
        self.inner.next_logprobs(contexts)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn floor_is_ln_1e_minus_300() {
        assert_eq!(LOG_FLOOR, 1e-300f64.ln());
    }

    #[test]
    fn log_softmax_normalizes() {
        let mut v = vec![1.0, 2.0, 3.0, -4.0];
        log_softmax_in_place(&mut v);
        assert!(logsumexp(&v).abs() < 1e-12);
        assert!(v.iter().all(|&x| x <= 0.0));
    }

    #[test]
    fn info_validation() {
        let mut info = ScorerInfo {
            vocab_size: 10,
            image_start: 8,
            image_end: 9,
            visual_lo: 2,
            visual_hi: 7,
            supports_tokenize: false,
            name: "t".into(),
        };
        assert!(info.validate().is_ok());
        info.image_end = 8;
        assert!(info.validate().is_err());
        info.image_end = 10;
        assert!(info.validate().is_err());
        info.image_end = 9;
        info.visual_hi = 12;
        assert!(info.validate().is_err());
    }
}
