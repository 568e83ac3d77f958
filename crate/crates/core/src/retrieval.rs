//! Generative retrieval: Trie-constrained forward beam search, reverse
//! re-ranking, and the exhaustive ranking used as their oracle.

use std::cmp::Ordering;
use std::io::Write;

use serde::Serialize;

use crate::beam::{rank_cmp, BeamSearch};
use crate::error::{Error, Result};
use crate::proxies::{score_candidates, PriorCache, Prompt, ProxyConfig, ProxyKind, SimilarityScore};
use crate::scorer::Scorer;
use crate::token_index::{ImageDatabase, Index, TokenId, TokenSequence, Trie};

pub const DEFAULT_BEAM_SIZE: usize = 800;

#[derive(Clone, Debug, PartialEq)]
pub struct BeamConfig {
    pub beam_size: usize,
    /// Forward or debiased PMI; the search runs text to image.
    pub proxy: ProxyConfig,
    /// Defaults to the longest stored sequence.
    pub max_steps: Option<usize>,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig {
            beam_size: DEFAULT_BEAM_SIZE,
            proxy: ProxyConfig::debiased_pmi(crate::proxies::DEFAULT_ETA),
            max_steps: None,
        }
    }
}

impl BeamConfig {
    pub fn new(beam_size: usize, proxy: ProxyConfig) -> BeamConfig {
        BeamConfig {
            beam_size,
            proxy,
            max_steps: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::InvalidConfig("beam size must be at least 1".into()));
        }
        if self.proxy.kind == ProxyKind::Reverse {
            return Err(Error::InvalidConfig(
                "beam search scores text to image; the reverse proxy cannot drive it".into(),
            ));
        }
        if self.max_steps == Some(0) {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        self.proxy.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ScoredCandidate {
    pub rank: usize,
    pub image_id: String,
    pub tokens: TokenSequence,
    /// Score under the list's active proxy.
    pub score: SimilarityScore,
    pub forward_score: Option<SimilarityScore>,
    pub reverse_score: Option<SimilarityScore>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedList {
    pub items: Vec<ScoredCandidate>,
    pub proxy_used: ProxyConfig,
    /// Config behind every item's `forward_score`, when present.
    pub forward_proxy: Option<ProxyConfig>,
    /// Scorer calls issued by the beam loop (zero for exhaustive ranking).
    pub decode_steps: usize,
}

impl RankedList {
    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.items.iter().map(|c| c.image_id.as_str())
    }

    pub fn top(&self) -> Option<&ScoredCandidate> {
        self.items.first()
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn truncate(&mut self, k: usize) {
        self.items.truncate(k);
    }

    /// One JSON object per line: rank, image_id, score, optional forward and
    /// reverse scores, tokens.
    pub fn write_jsonl<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for item in &self.items {
            serde_json::to_writer(&mut out, &candidate_json(item))?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

pub fn candidate_json(item: &ScoredCandidate) -> serde_json::Value {
    let mut v = serde_json::json!({
        "rank": item.rank,
        "image_id": item.image_id,
        "score": item.score.value,
    });
    if let Some(f) = &item.forward_score {
        v["forward_score"] = f.value.into();
    }
    if let Some(r) = &item.reverse_score {
        v["reverse_score"] = r.value.into();
    }
    v["tokens"] = serde_json::to_value(&item.tokens).expect("tokens serialize");
    v
}

/// Score descending, then token sequence, then image id.
pub fn candidate_cmp(a: &ScoredCandidate, b: &ScoredCandidate) -> Ordering {
    rank_cmp(a.score.value, &a.tokens, b.score.value, &b.tokens).then_with(|| a.image_id.cmp(&b.image_id))
}

fn finalize(mut items: Vec<ScoredCandidate>) -> Vec<ScoredCandidate> {
    items.sort_by(candidate_cmp);
    for (i, item) in items.iter_mut().enumerate() {
        item.rank = i + 1;
    }
    items
}

/// Scores every database image under `cfg` and sorts the lot.
pub fn exhaustive_rank<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    db: &ImageDatabase,
    cfg: &ProxyConfig,
) -> Result<RankedList> {
    exhaustive_rank_cached(scorer, prompt, db, cfg, &mut PriorCache::new())
}

/// [`exhaustive_rank`] reusing null-prompt sums across calls.
pub fn exhaustive_rank_cached<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    db: &ImageDatabase,
    cfg: &ProxyConfig,
    cache: &mut PriorCache,
) -> Result<RankedList> {
    if db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    let ys: Vec<&[TokenId]> = db.records().iter().map(|r| r.tokens.as_slice()).collect();
    let scores = score_candidates(scorer, prompt, &ys, cfg, cache)?;
    let reverse = cfg.kind == ProxyKind::Reverse;
    let items = db
        .records()
        .iter()
        .zip(scores)
        .map(|(rec, score)| ScoredCandidate {
            rank: 0,
            image_id: rec.image_id.clone(),
            tokens: rec.tokens.clone(),
            score,
            forward_score: (!reverse).then_some(score),
            reverse_score: reverse.then_some(score),
        })
        .collect();
    Ok(RankedList {
        items: finalize(items),
        proxy_used: cfg.clone(),
        forward_proxy: (!reverse).then(|| cfg.clone()),
        decode_steps: 0,
    })
}

/// Forward beam search restricted to stored sequences, driven step by step.
pub struct TrieSearch<'t> {
    trie: &'t Trie,
    beam: BeamSearch<&'t Trie>,
    cfg: BeamConfig,
}

impl<'t> TrieSearch<'t> {
    pub fn new<S: Scorer + ?Sized>(
        scorer: &S,
        prompt: &Prompt,
        trie: &'t Trie,
        cfg: &BeamConfig,
    ) -> Result<TrieSearch<'t>> {
        cfg.validate()?;
        if trie.is_empty() {
            return Err(Error::EmptyTrie);
        }
        let info = scorer.info();
        info.check_context(&prompt.tokens)?;
        let mut cond_prefix = prompt.tokens.clone();
        cond_prefix.push(info.image_start);
        let prior_prefix = (cfg.proxy.kind == ProxyKind::DebiasedPmi).then(|| {
            let mut p = cfg.proxy.null_prompt.tokens.clone();
            p.push(info.image_start);
            p
        });
        if let Some(p) = &prior_prefix {
            info.check_context(p)?;
        }
        let max_steps = cfg.max_steps.unwrap_or_else(|| trie.max_depth());
        let beam = BeamSearch::new(
            trie,
            cfg.beam_size,
            max_steps,
            cond_prefix,
            prior_prefix,
            cfg.proxy.effective_eta(),
        )?;
        Ok(TrieSearch {
            trie,
            beam,
            cfg: cfg.clone(),
        })
    }

    pub fn is_done(&self) -> bool {
        self.beam.is_done()
    }

    pub fn contexts(&self) -> Vec<Vec<TokenId>> {
        self.beam.contexts()
    }

    pub fn advance(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        self.beam.advance(rows)
    }

    pub fn steps(&self) -> usize {
        self.beam.steps()
    }

    pub fn beam(&self) -> &BeamSearch<&'t Trie> {
        &self.beam
    }

    pub fn finish(self) -> RankedList {
        let steps = self.beam.steps();
        let tracks_prior = self.beam.tracks_prior();
        let (completed, _) = self.beam.into_parts();
        let proxy = &self.cfg.proxy;
        let mut done: Vec<(SimilarityScore, Vec<TokenId>)> = completed
            .into_iter()
            .map(|h| {
                let score = SimilarityScore::combine(proxy, h.cond, tracks_prior.then_some(h.prior), h.prefix.len());
                (score, h.prefix)
            })
            .collect();
        done.sort_by(|a, b| rank_cmp(a.0.value, &a.1, b.0.value, &b.1));

        let mut items = Vec::new();
        'outer: for (score, prefix) in done {
            for id in self.trie.lookup(&prefix) {
                if items.len() == self.cfg.beam_size {
                    break 'outer;
                }
                items.push(ScoredCandidate {
                    rank: items.len() + 1,
                    image_id: id.clone(),
                    tokens: TokenSequence::new(prefix.clone()).expect("completed prefix is non-empty"),
                    score,
                    forward_score: Some(score),
                    reverse_score: None,
                });
            }
        }
        RankedList {
            items,
            proxy_used: proxy.clone(),
            forward_proxy: Some(proxy.clone()),
            decode_steps: steps,
        }
    }
}

/// Runs one batched scorer call per decode step until the search finishes.
pub fn forward_beam_search<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    trie: &Trie,
    cfg: &BeamConfig,
) -> Result<RankedList> {
    let mut search = TrieSearch::new(scorer, prompt, trie, cfg)?;
    while !search.is_done() {
        let rows = scorer.next_logprobs(&search.contexts())?;
        search.advance(&rows)?;
    }
    Ok(search.finish())
}

/// Re-scores `candidates` with the reverse proxy and re-sorts them.
pub fn reverse_rerank<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    candidates: &RankedList,
    cfg: &ProxyConfig,
) -> Result<RankedList> {
    if cfg.kind != ProxyKind::Reverse {
        return Err(Error::InvalidConfig("re-ranking uses the reverse proxy".into()));
    }
    if candidates.is_empty() {
        return Err(Error::EmptyInput);
    }
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    let ys: Vec<&[TokenId]> = candidates.items.iter().map(|c| c.tokens.as_slice()).collect();
    let scores = score_candidates(scorer, prompt, &ys, cfg, &mut PriorCache::new())?;
    let items = candidates
        .items
        .iter()
        .zip(scores)
        .map(|(c, score)| ScoredCandidate {
            score,
            reverse_score: Some(score),
            ..c.clone()
        })
        .collect();
    Ok(RankedList {
        items: finalize(items),
        proxy_used: cfg.clone(),
        forward_proxy: candidates.forward_proxy.clone(),
        decode_steps: candidates.decode_steps,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrieveConfig {
    pub beam: BeamConfig,
    pub rrr: bool,
    /// Reverse proxy settings used when `rrr` is on.
    pub rerank: ProxyConfig,
    pub top_k: Option<usize>,
}

impl Default for RetrieveConfig {
    fn default() -> Self {
        RetrieveConfig {
            beam: BeamConfig::default(),
            rrr: true,
            rerank: ProxyConfig::reverse(),
            top_k: None,
        }
    }
}

/// Reverse re-ranking (when enabled) of an already finished forward search,
/// then truncation to `top_k`.
pub fn rerank_and_truncate<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    forward: RankedList,
    cfg: &RetrieveConfig,
) -> Result<RankedList> {
    let mut list = if cfg.rrr && !forward.is_empty() {
        reverse_rerank(scorer, prompt, &forward, &cfg.rerank)?
    } else {
        forward
    };
    if let Some(k) = cfg.top_k {
        list.truncate(k);
    }
    Ok(list)
}

/// Forward beam search, optional reverse re-ranking, then truncation.
pub fn retrieve<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    index: &Index,
    cfg: &RetrieveConfig,
) -> Result<RankedList> {
    let forward = forward_beam_search(scorer, prompt, &index.trie, &cfg.beam)?;
    rerank_and_truncate(scorer, prompt, forward, cfg)
}
