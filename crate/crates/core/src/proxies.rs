//! Training-free similarity proxies between a text prompt and an image's
//! visual token sequence, all computed by teacher forcing through a [`Scorer`].
//!
//! * forward: `Σ log p(y_i | X, Y<i)` with initial context `X ⧺ [image_start]`
//! * debiased PMI: forward minus `eta` times the same sum under a null prompt
//! * reverse: `Σ log p(x_i | Y, X<i)` with initial context `Y` (image_end kept)

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::Scorer;
use crate::token_index::TokenId;

/// Largest number of contexts sent to the scorer in one call while teacher forcing.
pub const MAX_BATCH: usize = 256;

/// Content-free phrase accepted as an alternative null prompt.
pub const NULL_PROMPT_PHRASE: &str = "Can you give me an image?";

#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub text: Option<String>,
    pub tokens: Vec<TokenId>,
}

impl Prompt {
    pub fn from_tokens(tokens: Vec<TokenId>) -> Prompt {
        Prompt { text: None, tokens }
    }

    pub fn from_text<S: Scorer + ?Sized>(scorer: &S, text: &str) -> Result<Prompt> {
        Ok(Prompt {
            text: Some(text.to_string()),
            tokens: scorer.tokenize(text)?,
        })
    }

    /// Reads whitespace-separated token ids when every word is a number,
    /// and tokenizes `text` with `scorer` otherwise.
    pub fn parse<S: Scorer + ?Sized>(scorer: &S, text: &str) -> Result<Prompt> {
        let ids: Option<Vec<TokenId>> = text.split_whitespace().map(|t| t.parse().ok()).collect();
        match ids {
            Some(tokens) if !tokens.is_empty() => {
                scorer.info().check_context(&tokens)?;
                Ok(Prompt::from_tokens(tokens))
            }
            _ => Prompt::from_text(scorer, text),
        }
    }

    /// The empty null prompt.
    pub fn null() -> Prompt {
        Prompt::default()
    }

    pub fn null_phrase<S: Scorer + ?Sized>(scorer: &S) -> Result<Prompt> {
        Prompt::from_text(scorer, NULL_PROMPT_PHRASE)
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProxyKind {
    Forward,
    DebiasedPmi,
    Reverse,
}

impl std::str::FromStr for ProxyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "forward" => Ok(ProxyKind::Forward),
            "pmi" | "debiased_pmi" | "debiased-pmi" => Ok(ProxyKind::DebiasedPmi),
            "reverse" => Ok(ProxyKind::Reverse),
            other => Err(Error::InvalidConfig(format!("unknown proxy `{other}`"))),
        }
    }
}

pub const DEFAULT_ETA: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub kind: ProxyKind,
    /// Debiasing strength; only read by [`ProxyKind::DebiasedPmi`].
    pub eta: f64,
    #[serde(skip)]
    pub null_prompt: Prompt,
    pub length_normalize: bool,
}

impl ProxyConfig {
    pub fn new(kind: ProxyKind) -> ProxyConfig {
        ProxyConfig {
            kind,
            eta: DEFAULT_ETA,
            null_prompt: Prompt::null(),
            length_normalize: false,
        }
    }

    pub fn forward() -> ProxyConfig {
        ProxyConfig::new(ProxyKind::Forward)
    }

    pub fn debiased_pmi(eta: f64) -> ProxyConfig {
        ProxyConfig {
            eta,
            ..ProxyConfig::new(ProxyKind::DebiasedPmi)
        }
    }

    pub fn reverse() -> ProxyConfig {
        ProxyConfig::new(ProxyKind::Reverse)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.eta.is_finite() || self.eta < 0.0 {
            return Err(Error::InvalidConfig(format!(
                "eta must be finite and >= 0, got {}",
                self.eta
            )));
        }
        Ok(())
    }

    /// The eta actually applied: zero for every proxy but debiased PMI.
    pub fn effective_eta(&self) -> f64 {
        match self.kind {
            ProxyKind::DebiasedPmi => self.eta,
            _ => 0.0,
        }
    }
}

/// A proxy value in the log domain, with its additive components.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityScore {
    pub value: f64,
    /// Sum of conditional log-probabilities (forward or reverse direction).
    pub conditional: f64,
    /// Sum of null-prompt log-probabilities, for debiased PMI.
    pub prior: Option<f64>,
    /// Number of scored positions.
    pub positions: usize,
}

impl SimilarityScore {
    /// Combines accumulated sums exactly the way every ranking path does, so
    /// beam search and exhaustive scoring agree to the bit.
    pub fn combine(cfg: &ProxyConfig, conditional: f64, prior: Option<f64>, positions: usize) -> Self {
        let raw = match (cfg.kind, prior) {
            (ProxyKind::DebiasedPmi, Some(p)) => conditional - cfg.eta * p,
            _ => conditional,
        };
        let value = if cfg.length_normalize && positions > 0 {
            raw / positions as f64
        } else {
            raw
        };
        SimilarityScore {
            value,
            conditional,
            prior,
            positions,
        }
    }
}

/// Teacher-forced contexts for the forward direction.
pub fn forward_contexts(prefix: &[TokenId], image_start: TokenId, y: &[TokenId]) -> Vec<Vec<TokenId>> {
    (0..y.len())
        .map(|i| {
            let mut ctx = Vec::with_capacity(prefix.len() + 1 + i);
            ctx.extend_from_slice(prefix);
            ctx.push(image_start);
            ctx.extend_from_slice(&y[..i]);
            ctx
        })
        .collect()
}

/// Teacher-forced contexts for the reverse direction.
pub fn reverse_contexts(y: &[TokenId], x: &[TokenId]) -> Vec<Vec<TokenId>> {
    (0..x.len())
        .map(|i| {
            let mut ctx = Vec::with_capacity(y.len() + i);
            ctx.extend_from_slice(y);
            ctx.extend_from_slice(&x[..i]);
            ctx
        })
        .collect()
}

struct Job {
    contexts: Vec<Vec<TokenId>>,
    targets: Vec<TokenId>,
}

/// Runs teacher forcing for every job, chunking scorer calls, and returns
/// each job's log-probability sum accumulated left to right from zero.
fn run_jobs<S: Scorer + ?Sized>(scorer: &S, jobs: &[Job]) -> Result<Vec<f64>> {
    let flat: Vec<(usize, &Vec<TokenId>, TokenId)> = jobs
        .iter()
        .enumerate()
        .flat_map(|(j, job)| job.contexts.iter().zip(&job.targets).map(move |(c, &t)| (j, c, t)))
        .collect();
    let mut sums = vec![0.0f64; jobs.len()];
    for chunk in flat.chunks(MAX_BATCH) {
        let contexts: Vec<Vec<TokenId>> = chunk.iter().map(|(_, c, _)| (*c).clone()).collect();
        let rows = scorer.next_logprobs(&contexts)?;
        if rows.len() != contexts.len() {
            return Err(Error::Protocol("scorer returned wrong batch size".into()));
        }
        for ((j, _, target), row) in chunk.iter().zip(rows) {
            sums[*j] += row[*target as usize];
        }
    }
    Ok(sums)
}

fn check_image_tokens<S: Scorer + ?Sized>(scorer: &S, y: &[TokenId]) -> Result<()> {
    let info = scorer.info();
    if y.last() != Some(&info.image_end) {
        return Err(Error::InvalidSequence {
            id: String::new(),
            message: "image sequence must end with image_end".into(),
        });
    }
    info.check_context(y)
}

/// Caches null-prompt sums per image sequence within a ranking run.
#[derive(Debug, Default)]
pub struct PriorCache {
    entries: HashMap<(Vec<TokenId>, Vec<TokenId>), f64>,
}

impl PriorCache {
    pub fn new() -> PriorCache {
        PriorCache::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Scores many candidate sequences against one prompt, batching scorer calls.
pub fn score_candidates<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    candidates: &[&[TokenId]],
    cfg: &ProxyConfig,
    cache: &mut PriorCache,
) -> Result<Vec<SimilarityScore>> {
    cfg.validate()?;
    let info = scorer.info();
    for y in candidates {
        check_image_tokens(scorer, y)?;
    }
    info.check_context(&prompt.tokens)?;
    info.check_context(&cfg.null_prompt.tokens)?;

    match cfg.kind {
        ProxyKind::Reverse => {
            if prompt.is_empty() {
                return Err(Error::EmptyPrompt);
            }
            let jobs: Vec<Job> = candidates
                .iter()
                .map(|y| Job {
                    contexts: reverse_contexts(y, &prompt.tokens),
                    targets: prompt.tokens.clone(),
                })
                .collect();
            let sums = run_jobs(scorer, &jobs)?;
            Ok(sums
                .into_iter()
                .map(|s| SimilarityScore::combine(cfg, s, None, prompt.len()))
                .collect())
        }
        ProxyKind::Forward | ProxyKind::DebiasedPmi => {
            let mut jobs: Vec<Job> = candidates
                .iter()
                .map(|y| Job {
                    contexts: forward_contexts(&prompt.tokens, info.image_start, y),
                    targets: y.to_vec(),
                })
                .collect();
            let n_forward = jobs.len();
            let mut missing: Vec<Vec<TokenId>> = Vec::new();
            if cfg.kind == ProxyKind::DebiasedPmi {
                for y in candidates {
                    let key = (cfg.null_prompt.tokens.clone(), y.to_vec());
                    if !cache.entries.contains_key(&key) && !missing.contains(&key.1) {
                        missing.push(key.1);
                    }
                }
                jobs.extend(missing.iter().map(|y| Job {
                    contexts: forward_contexts(&cfg.null_prompt.tokens, info.image_start, y),
                    targets: y.clone(),
                }));
            }
            let sums = run_jobs(scorer, &jobs)?;
            for (y, &s) in missing.iter().zip(&sums[n_forward..]) {
                cache.entries.insert((cfg.null_prompt.tokens.clone(), y.clone()), s);
            }
            Ok(candidates
                .iter()
                .zip(&sums[..n_forward])
                .map(|(y, &cond)| {
                    let prior = (cfg.kind == ProxyKind::DebiasedPmi)
                        .then(|| cache.entries[&(cfg.null_prompt.tokens.clone(), y.to_vec())]);
                    SimilarityScore::combine(cfg, cond, prior, y.len())
                })
                .collect())
        }
    }
}

/// `log p(Y | X)`.
pub fn forward_likelihood<S: Scorer + ?Sized>(scorer: &S, x: &Prompt, y: &[TokenId]) -> Result<SimilarityScore> {
    let cfg = ProxyConfig::forward();
    Ok(score_candidates(scorer, x, &[y], &cfg, &mut PriorCache::new())?[0])
}

/// `log p(Y | X̄)`, the null-prompt estimate of the visual prior.
pub fn prior_likelihood<S: Scorer + ?Sized>(
    scorer: &S,
    y: &[TokenId],
    null_prompt: &Prompt,
) -> Result<SimilarityScore> {
    forward_likelihood(scorer, null_prompt, y)
}

/// `log p(Y | X) - eta * log p(Y | X̄)`.
pub fn debiased_pmi<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Prompt,
    y: &[TokenId],
    cfg: &ProxyConfig,
) -> Result<SimilarityScore> {
    if cfg.kind != ProxyKind::DebiasedPmi {
        return Err(Error::InvalidConfig("debiased_pmi needs a DebiasedPmi config".into()));
    }
    let raw = ProxyConfig {
        length_normalize: false,
        ..cfg.clone()
    };
    Ok(score_candidates(scorer, x, &[y], &raw, &mut PriorCache::new())?[0])
}

/// `log p(X | Y)`.
pub fn reverse_likelihood<S: Scorer + ?Sized>(scorer: &S, x: &Prompt, y: &[TokenId]) -> Result<SimilarityScore> {
    let cfg = ProxyConfig::reverse();
    Ok(score_candidates(scorer, x, &[y], &cfg, &mut PriorCache::new())?[0])
}

/// Dispatches to the proxy selected by `cfg`, dividing by the number of
/// scored positions when `cfg.length_normalize` is set.
pub fn similarity<S: Scorer + ?Sized>(
    scorer: &S,
    x: &Prompt,
    y: &[TokenId],
    cfg: &ProxyConfig,
) -> Result<SimilarityScore> {
    Ok(score_candidates(scorer, x, &[y], cfg, &mut PriorCache::new())?[0])
}
