//! Unified generation and retrieval in one decoding loop, plus the decision
//! between the generated sequence and the top retrieved image.

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::beam::{rank_cmp, BeamSearch, VocabMask};
use crate::error::{Error, Result};
use crate::proxies::{score_candidates, PriorCache, Prompt, ProxyConfig, ProxyKind, SimilarityScore};
use crate::retrieval::{candidate_json, rerank_and_truncate, RankedList, RetrieveConfig, ScoredCandidate, TrieSearch};
use crate::scorer::{CountingScorer, Scorer, ScorerInfo};
use crate::token_index::{Index, TokenId, TokenSequence};

#[derive(Clone, Debug, PartialEq)]
pub enum GenMode {
    Greedy,
    Beam(usize),
    Sample {
        seed: u64,
        temperature: f64,
        top_k: Option<usize>,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub mode: GenMode,
    pub max_steps: usize,
    /// Limit decoding to visual tokens plus `image_end`.
    pub restrict_to_visual: bool,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            mode: GenMode::Greedy,
            max_steps: 32,
            restrict_to_visual: true,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_steps == 0 {
            return Err(Error::InvalidConfig("max_steps must be at least 1".into()));
        }
        match self.mode {
            GenMode::Beam(0) => Err(Error::InvalidConfig("generation beam must be at least 1".into())),
            GenMode::Sample { temperature, top_k, .. } => {
                if !(temperature.is_finite() && temperature > 0.0) {
                    return Err(Error::InvalidConfig(format!("temperature {temperature} must be > 0")));
                }
                if top_k == Some(0) {
                    return Err(Error::InvalidConfig("top_k must be at least 1".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// An unconstrained decode result.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub tokens: TokenSequence,
    /// Sum of `log p(y_i | X, Y<i)` over decoded tokens.
    pub cond: f64,
    /// Same sum under the tracked null prompt, if any.
    pub prior: Option<f64>,
    /// Decoding hit `max_steps` and `image_end` was appended unscored.
    pub truncated: bool,
    pub steps: usize,
}

struct SinglePath {
    tokens: Vec<TokenId>,
    cond: f64,
    prior: f64,
    rng: Option<ChaCha8Rng>,
    done: bool,
}

enum GenState {
    Single(SinglePath),
    Beam(BeamSearch<VocabMask>),
}

/// Unconstrained decoder, driven one scorer batch at a time.
pub struct Generator {
    cfg: GenConfig,
    mask: VocabMask,
    image_end: TokenId,
    cond_prefix: Vec<TokenId>,
    prior_prefix: Option<Vec<TokenId>>,
    state: GenState,
    steps: usize,
}

impl Generator {
    /// `track_prior` additionally scores every decoded token under that null
    /// prompt, so a debiased PMI score of the result needs no extra calls.
    pub fn new(info: &ScorerInfo, prompt: &Prompt, cfg: &GenConfig, track_prior: Option<&Prompt>) -> Result<Generator> {
        cfg.validate()?;
        info.check_context(&prompt.tokens)?;
        let allowed: Vec<TokenId> = if cfg.restrict_to_visual {
            (info.visual_lo..=info.visual_hi)
                .chain(std::iter::once(info.image_end))
                .collect()
        } else {
            (0..info.vocab_size).collect()
        };
        let mask = VocabMask::new(allowed, info.image_end);
        let mut cond_prefix = prompt.tokens.clone();
        cond_prefix.push(info.image_start);
        let prior_prefix = match track_prior {
            Some(p) => {
                info.check_context(&p.tokens)?;
                let mut v = p.tokens.clone();
                v.push(info.image_start);
                Some(v)
            }
            None => None,
        };
        let state = match cfg.mode {
            GenMode::Beam(width) => GenState::Beam(BeamSearch::new(
                mask.clone(),
                width,
                cfg.max_steps,
                cond_prefix.clone(),
                prior_prefix.clone(),
                0.0,
            )?),
            GenMode::Greedy => GenState::Single(SinglePath::new(None)),
            GenMode::Sample { seed, .. } => GenState::Single(SinglePath::new(Some(ChaCha8Rng::seed_from_u64(seed)))),
        };
        Ok(Generator {
            cfg: cfg.clone(),
            mask,
            image_end: info.image_end,
            cond_prefix,
            prior_prefix,
            state,
            steps: 0,
        })
    }

    pub fn is_done(&self) -> bool {
        match &self.state {
            GenState::Single(p) => p.done,
            GenState::Beam(b) => b.is_done(),
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn contexts(&self) -> Vec<Vec<TokenId>> {
        match &self.state {
            GenState::Single(p) if !p.done => {
                let with = |head: &[TokenId]| [head, &p.tokens].concat();
                let mut out = vec![with(&self.cond_prefix)];
                if let Some(prior) = &self.prior_prefix {
                    out.push(with(prior));
                }
                out
            }
            GenState::Single(_) => Vec::new(),
            GenState::Beam(b) => b.contexts(),
        }
    }

    pub fn advance(&mut self, rows: &[Vec<f64>]) -> Result<()> {
        match &mut self.state {
            GenState::Beam(b) => b.advance(rows)?,
            GenState::Single(p) => {
                let expected = 1 + usize::from(self.prior_prefix.is_some());
                if rows.len() != expected {
                    return Err(Error::Protocol(format!(
                        "generator expected {expected} rows, got {}",
                        rows.len()
                    )));
                }
                let row = &rows[0];
                if row.len() <= self.mask.allowed().iter().copied().max().unwrap_or(0) as usize {
                    return Err(Error::Protocol("row shorter than vocabulary".into()));
                }
                let tok = match (&mut p.rng, &self.cfg.mode) {
                    (Some(rng), GenMode::Sample { temperature, top_k, .. }) => {
                        sample(row, self.mask.allowed(), *temperature, *top_k, rng)
                    }
                    _ => argmax(row, self.mask.allowed()),
                };
                p.cond += row[tok as usize];
                if self.prior_prefix.is_some() {
                    p.prior += rows[1][tok as usize];
                }
                p.tokens.push(tok);
                if tok == self.image_end {
                    p.done = true;
                }
            }
        }
        self.steps += 1;
        if let GenState::Single(p) = &mut self.state {
            if self.steps >= self.cfg.max_steps {
                p.done = true;
            }
        }
        Ok(())
    }

    pub fn finish(self) -> Generated {
        let tracked = self.prior_prefix.is_some();
        let (mut tokens, cond, prior) = match self.state {
            GenState::Single(p) => (p.tokens, p.cond, p.prior),
            GenState::Beam(b) => {
                let (completed, live) = b.into_parts();
                let best = |hs: Vec<crate::beam::Hypothesis<()>>| {
                    hs.into_iter()
                        .min_by(|a, b| rank_cmp(a.cond, &a.prefix, b.cond, &b.prefix))
                };
                let h = best(completed)
                    .or_else(|| best(live))
                    .expect("beam search keeps at least one hypothesis");
                (h.prefix, h.cond, h.prior)
            }
        };
        let truncated = tokens.last() != Some(&self.image_end);
        if truncated {
            tokens.push(self.image_end);
        }
        Generated {
            tokens: TokenSequence::new(tokens).expect("non-empty"),
            cond,
            prior: tracked.then_some(prior),
            truncated,
            steps: self.steps,
        }
    }
}

impl SinglePath {
    fn new(rng: Option<ChaCha8Rng>) -> Self {
        SinglePath {
            tokens: Vec::new(),
            cond: 0.0,
            prior: 0.0,
            rng,
            done: false,
        }
    }
}

fn argmax(row: &[f64], allowed: &[TokenId]) -> TokenId {
    // allowed is ascending, so the first maximum wins ties
    let mut best = allowed[0];
    for &t in &allowed[1..] {
        if row[t as usize] > row[best as usize] {
            best = t;
        }
    }
    best
}

fn sample(row: &[f64], allowed: &[TokenId], temperature: f64, top_k: Option<usize>, rng: &mut ChaCha8Rng) -> TokenId {
    let mut support: Vec<TokenId> = allowed.to_vec();
    if let Some(k) = top_k {
        support.sort_by(|&a, &b| rank_cmp(row[a as usize], &[a], row[b as usize], &[b]));
        support.truncate(k);
        support.sort_unstable();
    }
    let max = support
        .iter()
        .map(|&t| row[t as usize])
        .fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = support
        .iter()
        .map(|&t| ((row[t as usize] - max) / temperature).exp())
        .collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&t, w) in support.iter().zip(&weights) {
        if u < *w {
            return t;
        }
        u -= w;
    }
    *support.last().expect("support is non-empty")
}

/// Decodes from `X ⧺ [image_start]` without Trie constraints.
pub fn generate<S: Scorer + ?Sized>(scorer: &S, prompt: &Prompt, cfg: &GenConfig) -> Result<Generated> {
    let mut gen = Generator::new(scorer.info(), prompt, cfg, None)?;
    while !gen.is_done() {
        let rows = scorer.next_logprobs(&gen.contexts())?;
        gen.advance(&rows)?;
    }
    Ok(gen.finish())
}

pub fn generate_tokens<S: Scorer + ?Sized>(scorer: &S, prompt: &Prompt, cfg: &GenConfig) -> Result<TokenSequence> {
    generate(scorer, prompt, cfg).map(|g| g.tokens)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyncOutput {
    pub generated: Generated,
    pub retrieved: RankedList,
    /// Batched scorer calls issued by the shared loop.
    pub steps: usize,
}

/// Runs unconstrained generation and Trie-constrained beam search side by
/// side, merging both paths' contexts into one scorer call per step.
pub fn synchronous_generate_retrieve<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    index: &Index,
    gen_cfg: &GenConfig,
    retrieve_cfg: &RetrieveConfig,
    track_prior: Option<&Prompt>,
) -> Result<SyncOutput> {
    let mut search = TrieSearch::new(scorer, prompt, &index.trie, &retrieve_cfg.beam)?;
    let mut gen = Generator::new(scorer.info(), prompt, gen_cfg, track_prior)?;
    let mut steps = 0;
    loop {
        let gen_ctx = if gen.is_done() { Vec::new() } else { gen.contexts() };
        let ret_ctx = if search.is_done() {
            Vec::new()
        } else {
            search.contexts()
        };
        if gen_ctx.is_empty() && ret_ctx.is_empty() {
            break;
        }
        let split = gen_ctx.len();
        let mut batch = gen_ctx;
        batch.extend(ret_ctx);
        let rows = scorer.next_logprobs(&batch)?;
        if rows.len() != batch.len() {
            return Err(Error::Protocol("scorer returned wrong batch size".into()));
        }
        if split > 0 {
            gen.advance(&rows[..split])?;
        }
        if split < rows.len() {
            search.advance(&rows[split..])?;
        }
        steps += 1;
    }
    Ok(SyncOutput {
        generated: gen.finish(),
        retrieved: search.finish(),
        steps,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Choice {
    Generation,
    Retrieval,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Decision {
    pub chosen: Choice,
    pub s_gen: SimilarityScore,
    pub s_ret: SimilarityScore,
    pub s_gen_cached: bool,
    pub s_ret_cached: bool,
}

/// Same scoring under both configs, ignoring fields the kind does not read.
fn same_scoring(a: &ProxyConfig, b: &ProxyConfig) -> bool {
    a.kind == b.kind
        && a.length_normalize == b.length_normalize
        && (a.kind != ProxyKind::DebiasedPmi || (a.eta == b.eta && a.null_prompt == b.null_prompt))
}

/// Chooses between the generated sequence and the top retrieved candidate.
///
/// Scores already computed under an identical proxy are reused; ties go to
/// retrieval.
pub fn decide<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    generated: &Generated,
    retrieved: &ScoredCandidate,
    retrieved_list: &RankedList,
    cfg: &ProxyConfig,
) -> Result<Decision> {
    if cfg.kind == ProxyKind::Forward {
        return Err(Error::InvalidConfig(
            "the plain forward proxy is visually biased and cannot decide".into(),
        ));
    }
    cfg.validate()?;

    let cached_ret = match cfg.kind {
        ProxyKind::Reverse => retrieved
            .reverse_score
            .filter(|_| same_scoring(&retrieved_list.proxy_used, cfg)),
        _ => retrieved.forward_score.filter(|_| {
            retrieved_list
                .forward_proxy
                .as_ref()
                .is_some_and(|p| same_scoring(p, cfg))
        }),
    };
    let cached_gen = match (cfg.kind, generated.prior) {
        (ProxyKind::DebiasedPmi, Some(prior)) if !generated.truncated => Some(SimilarityScore::combine(
            cfg,
            generated.cond,
            Some(prior),
            generated.tokens.len(),
        )),
        _ => None,
    };

    let mut missing: Vec<&[TokenId]> = Vec::new();
    if cached_gen.is_none() {
        missing.push(&generated.tokens);
    }
    if cached_ret.is_none() {
        missing.push(&retrieved.tokens);
    }
    let mut fresh = if missing.is_empty() {
        Vec::new()
    } else {
        score_candidates(scorer, prompt, &missing, cfg, &mut PriorCache::new())?
    }
    .into_iter();
    let s_gen = cached_gen.unwrap_or_else(|| fresh.next().expect("scored"));
    let s_ret = cached_ret.unwrap_or_else(|| fresh.next().expect("scored"));
    let chosen = if s_gen.value > s_ret.value {
        Choice::Generation
    } else {
        Choice::Retrieval
    };
    Ok(Decision {
        chosen,
        s_gen,
        s_ret,
        s_gen_cached: cached_gen.is_some(),
        s_ret_cached: cached_ret.is_some(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnifyConfig {
    pub gen: GenConfig,
    pub retrieve: RetrieveConfig,
    pub decision: ProxyConfig,
}

impl Default for UnifyConfig {
    fn default() -> Self {
        UnifyConfig {
            gen: GenConfig::default(),
            retrieve: RetrieveConfig::default(),
            decision: ProxyConfig::reverse(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunStats {
    pub decode_steps: usize,
    pub decode_calls: u64,
    pub rerank_calls: u64,
    pub decide_calls: u64,
    pub decode_time: Duration,
    pub rerank_time: Duration,
    pub decide_time: Duration,
}

impl RunStats {
    pub fn scorer_calls(&self) -> u64 {
        self.decode_calls + self.rerank_calls + self.decide_calls
    }
}

/// Everything one unified run produced.
#[derive(Clone, Debug, PartialEq)]
pub struct UnifiedResult {
    pub prompt: Prompt,
    pub generated: Generated,
    /// Forward beam search output before re-ranking.
    pub forward: RankedList,
    /// Final list after optional re-ranking and truncation.
    pub retrieved: RankedList,
    pub chosen: Choice,
    pub chosen_tokens: TokenSequence,
    pub chosen_image_id: Option<String>,
    pub s_gen: SimilarityScore,
    pub s_ret: SimilarityScore,
    pub decision_proxy: ProxyConfig,
    pub stats: RunStats,
}

impl UnifiedResult {
    /// JSON record for the result log. Wall-clock timings are included only
    /// on request so that identical runs produce identical bytes.
    pub fn to_json(&self, with_wall_clock: bool) -> Value {
        let prompt = match &self.prompt.text {
            Some(t) => json!(t),
            None => json!(self.prompt.tokens),
        };
        let mut timings = json!({
            "decode_steps": self.stats.decode_steps,
            "decode_calls": self.stats.decode_calls,
            "rerank_calls": self.stats.rerank_calls,
            "decide_calls": self.stats.decide_calls,
        });
        if with_wall_clock {
            timings["decode_ms"] = json!(self.stats.decode_time.as_secs_f64() * 1e3);
            timings["rerank_ms"] = json!(self.stats.rerank_time.as_secs_f64() * 1e3);
            timings["decide_ms"] = json!(self.stats.decide_time.as_secs_f64() * 1e3);
        }
        json!({
            "prompt": prompt,
            "generated_tokens": self.generated.tokens,
            "retrieved": self.retrieved.items.iter().map(candidate_json).collect::<Vec<_>>(),
            "chosen": self.chosen,
            "chosen_image_id": self.chosen_image_id,
            "chosen_tokens": self.chosen_tokens,
            "s_gen": self.s_gen.value,
            "s_ret": self.s_ret.value,
            "decision_proxy": self.decision_proxy,
            "timings": timings,
            "scorer_calls": self.stats.scorer_calls(),
        })
    }
}

/// Synchronous generation and retrieval, optional reverse re-ranking, then
/// the decision between the two outputs.
pub fn unify<S: Scorer + ?Sized>(
    scorer: &S,
    prompt: &Prompt,
    index: &Index,
    cfg: &UnifyConfig,
) -> Result<UnifiedResult> {
    if prompt.is_empty() {
        return Err(Error::EmptyPrompt);
    }
    if index.db.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if cfg.decision.kind == ProxyKind::Forward {
        return Err(Error::InvalidConfig(
            "the plain forward proxy is visually biased and cannot decide".into(),
        ));
    }
    cfg.decision.validate()?;
    let counted = CountingScorer::new(scorer);
    let mut stats = RunStats::default();

    let track = (cfg.decision.kind == ProxyKind::DebiasedPmi).then_some(&cfg.decision.null_prompt);
    let t0 = Instant::now();
    let sync = synchronous_generate_retrieve(&counted, prompt, index, &cfg.gen, &cfg.retrieve, track)?;
    stats.decode_time = t0.elapsed();
    stats.decode_steps = sync.steps;
    stats.decode_calls = counted.calls();

    let t1 = Instant::now();
    let forward = sync.retrieved;
    let retrieved = rerank_and_truncate(&counted, prompt, forward.clone(), &cfg.retrieve)?;
    stats.rerank_time = t1.elapsed();
    stats.rerank_calls = counted.calls() - stats.decode_calls;

    let top = retrieved
        .top()
        .cloned()
        .ok_or_else(|| Error::InvalidConfig("retrieval produced no complete candidate".into()))?;
    let t2 = Instant::now();
    let decision = decide(&counted, prompt, &sync.generated, &top, &retrieved, &cfg.decision)?;
    stats.decide_time = t2.elapsed();
    stats.decide_calls = counted.calls() - stats.decode_calls - stats.rerank_calls;

    let (chosen_tokens, chosen_image_id) = match decision.chosen {
        Choice::Retrieval => (top.tokens.clone(), Some(top.image_id.clone())),
        Choice::Generation => (sync.generated.tokens.clone(), None),
    };
    Ok(UnifiedResult {
        prompt: prompt.clone(),
        generated: sync.generated,
        forward,
        retrieved,
        chosen: decision.chosen,
        chosen_tokens,
        chosen_image_id,
        s_gen: decision.s_gen,
        s_ret: decision.s_ret,
        decision_proxy: cfg.decision.clone(),
        stats,
    })
}
