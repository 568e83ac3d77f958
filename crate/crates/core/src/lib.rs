//! Generative text-to-image retrieval and generation over a next-token scorer.
//!
//! Images are stored as discrete visual token sequences in a prefix [`Trie`].
//! A [`Scorer`] supplies next-token log-probabilities over a joint text and
//! visual vocabulary; retrieval decodes stored sequences under the Trie
//! constraint, generation decodes freely, and a decision step picks the
//! better of the two.

pub mod beam;
pub mod engine;
pub mod error;
pub mod eval;
pub mod proxies;
pub mod retrieval;
pub mod scorer;
pub mod synth;
pub mod token_index;

pub use engine::{
    decide, generate, generate_tokens, synchronous_generate_retrieve, unify, Choice, Decision, GenConfig, GenMode,
    Generated, Generator, UnifiedResult, UnifyConfig,
};
pub use error::{Error, Result};
pub use proxies::{
    debiased_pmi, forward_likelihood, prior_likelihood, reverse_likelihood, similarity, Prompt, ProxyConfig, ProxyKind,
    SimilarityScore,
};
pub use retrieval::{
    exhaustive_rank, forward_beam_search, retrieve, reverse_rerank, BeamConfig, RankedList, RetrieveConfig,
    ScoredCandidate,
};
pub use scorer::{connect_external, CountingScorer, ExternalScorer, Scorer, ScorerInfo, ToyScorer, Transport};
pub use token_index::{ImageDatabase, ImageRecord, Index, IndexParams, TokenId, TokenSequence, Trie};
