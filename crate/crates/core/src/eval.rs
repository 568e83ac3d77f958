//! Metrics, parameter sweeps, the dense baseline and benchmark filtration.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, HashSet};
use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::engine::{Choice, UnifiedResult};
use crate::error::{Error, Result};
use crate::proxies::{Prompt, ProxyConfig, ProxyKind, SimilarityScore};
use crate::retrieval::{
    candidate_cmp, exhaustive_rank, exhaustive_rank_cached, retrieve, RankedList, RetrieveConfig, ScoredCandidate,
};
use crate::scorer::{CountingScorer, Scorer};
use crate::synth::random_database;
use crate::token_index::{ImageDatabase, Index};

#[derive(Clone, Debug, PartialEq)]
pub struct EvalQuery {
    pub prompt_id: String,
    pub prompt: Prompt,
    pub ground_truth: String,
}

/// Queries whose ground-truth ids all exist in one database.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSet {
    queries: Vec<EvalQuery>,
}

impl EvalSet {
    pub fn new(queries: Vec<EvalQuery>, db: &ImageDatabase) -> Result<EvalSet> {
        if let Some(q) = queries.iter().find(|q| db.get(&q.ground_truth).is_none()) {
            return Err(Error::UnknownImage(q.ground_truth.clone()));
        }
        Ok(EvalSet { queries })
    }

    /// Builds a set from `(prompt, ground truth)` pairs, numbering prompts `q0000`, ...
    pub fn from_pairs(pairs: Vec<(Prompt, String)>, db: &ImageDatabase) -> Result<EvalSet> {
        let queries = pairs
            .into_iter()
            .enumerate()
            .map(|(i, (prompt, ground_truth))| EvalQuery {
                prompt_id: format!("q{i:04}"),
                prompt,
                ground_truth,
            })
            .collect();
        EvalSet::new(queries, db)
    }

    pub fn queries(&self) -> &[EvalQuery] {
        &self.queries
    }

    pub fn len(&self) -> usize {
        self.queries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.queries.is_empty()
    }
}

/// Parses `prompt_id<TAB>image_id<TAB>prompt`. A prompt made only of integers
/// is taken as pre-tokenized; anything else goes through `scorer.tokenize`.
pub fn parse_evalset<S: Scorer + ?Sized>(text: &str, scorer: &S) -> Result<Vec<EvalQuery>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line_no = n + 1;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.splitn(3, '\t');
        let (Some(id), Some(gt), Some(prompt)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::parse(
                line_no,
                "expected prompt_id, image id and prompt separated by tabs",
            ));
        };
        let prompt = Prompt::parse(scorer, prompt)?;
        out.push(EvalQuery {
            prompt_id: id.to_string(),
            prompt,
            ground_truth: gt.to_string(),
        });
    }
    Ok(out)
}

/// 1-based position of `image_id` in `list`.
pub fn rank_of(list: &RankedList, image_id: &str) -> Option<usize> {
    list.items.iter().position(|c| c.image_id == image_id).map(|p| p + 1)
}

/// Fraction of queries whose ground truth appears within the first `k` items.
pub fn recall_at_k(results: &[RankedList], truth: &EvalSet, ks: &[usize]) -> Result<BTreeMap<usize, f64>> {
    if results.len() != truth.len() {
        return Err(Error::LengthMismatch {
            left: results.len(),
            right: truth.len(),
        });
    }
    if ks.contains(&0) {
        return Err(Error::InvalidConfig("k must be positive".into()));
    }
    let ranks: Vec<Option<usize>> = results
        .iter()
        .zip(truth.queries())
        .map(|(list, q)| rank_of(list, &q.ground_truth))
        .collect();
    let n = results.len().max(1) as f64;
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranks.iter().filter(|r| r.is_some_and(|r| r <= k)).count();
            (k, hits as f64 / n)
        })
        .collect())
}

/// Fraction of runs whose decision picked the retrieved image.
pub fn retrieval_percentage(results: &[UnifiedResult]) -> Result<f64> {
    retrieval_fraction(results.iter().map(|r| r.chosen))
}

pub fn retrieval_fraction<I: IntoIterator<Item = Choice>>(choices: I) -> Result<f64> {
    let (mut n, mut ret) = (0usize, 0usize);
    for c in choices {
        n += 1;
        ret += usize::from(c == Choice::Retrieval);
    }
    if n == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(ret as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EtaRow {
    pub eta: f64,
    pub r_at_1: f64,
    pub r_at_5: f64,
}

/// Exhaustive debiased-PMI ranking for each `eta`.
///
/// The conditional and null-prompt sums are computed once per query and
/// recombined per `eta`, which yields exactly what a fresh exhaustive ranking
/// at that `eta` would.
pub fn sweep_eta<S: Scorer + ?Sized>(
    scorer: &S,
    evalset: &EvalSet,
    db: &ImageDatabase,
    etas: &[f64],
    null_prompt: &Prompt,
) -> Result<Vec<EtaRow>> {
    if etas.is_empty() {
        return Err(Error::EmptyInput);
    }
    let base = ProxyConfig {
        null_prompt: null_prompt.clone(),
        ..ProxyConfig::debiased_pmi(1.0)
    };
    let mut cache = Default::default();
    let components: Vec<RankedList> = evalset
        .queries()
        .iter()
        .map(|q| exhaustive_rank_cached(scorer, &q.prompt, db, &base, &mut cache))
        .collect::<Result<_>>()?;
    etas.iter()
        .map(|&eta| {
            let cfg = ProxyConfig { eta, ..base.clone() };
            cfg.validate()?;
            let lists: Vec<RankedList> = components.iter().map(|l| recombine(l, &cfg)).collect();
            let r = recall_at_k(&lists, evalset, &[1, 5])?;
            Ok(EtaRow {
                eta,
                r_at_1: r[&1],
                r_at_5: r[&5],
            })
        })
        .collect()
}

fn recombine(list: &RankedList, cfg: &ProxyConfig) -> RankedList {
    let mut items: Vec<ScoredCandidate> = list
        .items
        .iter()
        .map(|c| {
            let s = SimilarityScore::combine(cfg, c.score.conditional, c.score.prior, c.score.positions);
            ScoredCandidate {
                score: s,
                forward_score: Some(s),
                ..c.clone()
            }
        })
        .collect();
    items.sort_by(candidate_cmp);
    for (i, c) in items.iter_mut().enumerate() {
        c.rank = i + 1;
    }
    RankedList {
        items,
        proxy_used: cfg.clone(),
        forward_proxy: Some(cfg.clone()),
        decode_steps: 0,
    }
}

pub fn eta_csv(rows: &[EtaRow]) -> String {
    let mut out = String::from("eta,r_at_1,r_at_5\n");
    for r in rows {
        let _ = writeln!(out, "{:.6},{:.6},{:.6}", r.eta, r.r_at_1, r.r_at_5);
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct BeamRow {
    /// `None` marks the exhaustive-ranking upper bound.
    pub beam: Option<usize>,
    pub r_at_1: f64,
    pub r_at_5: f64,
    pub r_at_10: f64,
}

/// Recall of [`retrieve`] per beam size, followed by the exhaustive row
/// (the beam proxy without re-ranking, the re-rank proxy with it).
pub fn sweep_beam<S: Scorer + ?Sized>(
    scorer: &S,
    evalset: &EvalSet,
    index: &Index,
    beams: &[usize],
    rrr: bool,
    base: &RetrieveConfig,
) -> Result<Vec<BeamRow>> {
    if beams.contains(&0) {
        return Err(Error::InvalidConfig("beam sizes must be positive".into()));
    }
    let row = |beam: Option<usize>, lists: Vec<RankedList>| -> Result<BeamRow> {
        let r = recall_at_k(&lists, evalset, &[1, 5, 10])?;
        Ok(BeamRow {
            beam,
            r_at_1: r[&1],
            r_at_5: r[&5],
            r_at_10: r[&10],
        })
    };
    let mut rows = Vec::with_capacity(beams.len() + 1);
    for &b in beams {
        let mut cfg = base.clone();
        cfg.beam.beam_size = b;
        cfg.rrr = rrr;
        cfg.top_k = None;
        let lists = evalset
            .queries()
            .iter()
            .map(|q| retrieve(scorer, &q.prompt, index, &cfg))
            .collect::<Result<Vec<_>>>()?;
        rows.push(row(Some(b), lists)?);
    }
    let upper = upper_bound_proxy(base, rrr);
    let lists = evalset
        .queries()
        .iter()
        .map(|q| exhaustive_rank(scorer, &q.prompt, &index.db, upper))
        .collect::<Result<Vec<_>>>()?;
    rows.push(row(None, lists)?);
    Ok(rows)
}

pub fn beam_csv(rows: &[BeamRow]) -> String {
    let mut out = String::from("beam,r_at_1,r_at_5,r_at_10\n");
    for r in rows {
        let beam = r.beam.map_or_else(|| "exhaustive".to_string(), |b| b.to_string());
        let _ = writeln!(out, "{beam},{:.6},{:.6},{:.6}", r.r_at_1, r.r_at_5, r.r_at_10);
    }
    out
}

/// Row-major image embeddings with precomputed norms.
#[derive(Debug)]
pub struct EmbeddingMatrix {
    ids: Vec<String>,
    dim: usize,
    data: Vec<f32>,
    norms: Vec<f32>,
    comparisons: AtomicU64,
}

impl EmbeddingMatrix {
    pub fn new(ids: Vec<String>, dim: usize, rows: Vec<Vec<f32>>) -> Result<EmbeddingMatrix> {
        if ids.len() != rows.len() {
            return Err(Error::LengthMismatch {
                left: ids.len(),
                right: rows.len(),
            });
        }
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in &rows {
            if row.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: row.len(),
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("embedding entries must be finite".into()));
            }
            data.extend_from_slice(row);
        }
        Ok(EmbeddingMatrix::from_flat(ids, dim, data))
    }

    fn from_flat(ids: Vec<String>, dim: usize, data: Vec<f32>) -> EmbeddingMatrix {
        let norms = data.chunks_exact(dim.max(1)).map(|r| dot(r, r).sqrt()).collect();
        EmbeddingMatrix {
            ids,
            dim,
            data,
            norms,
            comparisons: AtomicU64::new(0),
        }
    }

    /// Gaussian rows, ids `img00000`, ... matching [`random_database`].
    pub fn random(n: usize, dim: usize, seed: u64) -> EmbeddingMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect();
        EmbeddingMatrix::from_flat((0..n).map(|i| format!("img{i:05}")).collect(), dim, data)
    }

    /// Parses a `d=<dim>` header followed by `image_id<TAB>f f f ...` lines.
    pub fn parse(text: &str) -> Result<EmbeddingMatrix> {
        let mut lines = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'));
        let (n, header) = lines.next().ok_or_else(|| Error::parse(1, "missing `d=` header"))?;
        let dim: usize = header
            .trim()
            .strip_prefix("d=")
            .and_then(|d| d.parse().ok())
            .filter(|&d| d > 0)
            .ok_or_else(|| Error::parse(n + 1, "expected `d=<positive integer>`"))?;
        let mut ids = Vec::new();
        let mut rows = Vec::new();
        for (n, line) in lines {
            let (id, values) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(n + 1, "expected image id and values separated by a tab"))?;
            let row = values
                .split_whitespace()
                .map(|v| {
                    v.parse::<f32>()
                        .map_err(|e| Error::parse(n + 1, format!("bad value `{v}`: {e}")))
                })
                .collect::<Result<Vec<_>>>()?;
            ids.push(id.to_string());
            rows.push(row);
        }
        EmbeddingMatrix::new(ids, dim, rows)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Rows in id order.
    pub fn rows(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim.max(1))
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    /// Row similarity evaluations performed so far.
    pub fn comparisons(&self) -> u64 {
        self.comparisons.load(AtomicOrdering::Relaxed)
    }
}

fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseHit {
    pub rank: usize,
    pub image_id: String,
    pub score: f64,
}

struct HeapEntry<'a> {
    score: f32,
    id: &'a str,
}

impl HeapEntry<'_> {
    // Greater means better: higher score, then smaller id.
    fn better(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| other.id.cmp(self.id))
    }
}

impl PartialEq for HeapEntry<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.better(other) == Ordering::Equal
    }
}

impl Eq for HeapEntry<'_> {}

impl PartialOrd for HeapEntry<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapEntry<'_> {
    // reversed so the max-heap root is the worst kept entry
    fn cmp(&self, other: &Self) -> Ordering {
        other.better(self)
    }
}

/// Brute-force cosine top-`k`; ties go to the smaller image id.
pub fn dense_rank(embeddings: &EmbeddingMatrix, query: &[f32], k: usize) -> Result<Vec<DenseHit>> {
    if query.len() != embeddings.dim {
        return Err(Error::DimensionMismatch {
            expected: embeddings.dim,
            actual: query.len(),
        });
    }
    let qn = dot(query, query).sqrt();
    if qn == 0.0 || !qn.is_finite() {
        return Err(Error::DegenerateQuery);
    }
    let mut heap: BinaryHeap<HeapEntry> = BinaryHeap::with_capacity(k + 1);
    for (i, row) in embeddings.data.chunks_exact(embeddings.dim).enumerate() {
        let rn = embeddings.norms[i];
        let score = if rn == 0.0 { 0.0 } else { dot(query, row) / (qn * rn) };
        if k == 0 {
            continue;
        }
        let entry = HeapEntry {
            score,
            id: &embeddings.ids[i],
        };
        if heap.len() < k {
            heap.push(entry);
        } else if entry.better(heap.peek().expect("heap is full")) == Ordering::Greater {
            heap.pop();
            heap.push(entry);
        }
    }
    embeddings
        .comparisons
        .fetch_add(embeddings.len() as u64, AtomicOrdering::Relaxed);
    let mut kept = heap.into_vec();
    kept.sort_by(|a, b| b.better(a));
    Ok(kept
        .into_iter()
        .enumerate()
        .map(|(i, e)| DenseHit {
            rank: i + 1,
            image_id: e.id.to_string(),
            score: e.score as f64,
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub db_sizes: Vec<usize>,
    /// Visual tokens per synthetic image, before `image_end`.
    pub seq_len: usize,
    pub queries: usize,
    pub beam: usize,
    pub max_steps: usize,
    pub dim: usize,
    pub k: usize,
    /// Timing repetitions; the fastest is kept.
    pub repeats: usize,
    pub seed: u64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            db_sizes: vec![1_000, 10_000, 100_000],
            seq_len: 7,
            queries: 32,
            beam: 8,
            max_steps: 8,
            dim: 256,
            k: 10,
            repeats: 5,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchRow {
    pub db_size: usize,
    pub generative_pps: f64,
    pub dense_pps: f64,
    /// Scorer calls summed over the query set.
    pub decode_steps: u64,
    /// Dense similarity evaluations per query.
    pub dense_comparisons: u64,
}

fn best_of<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<Duration> {
    let mut best = Duration::MAX;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        f()?;
        best = best.min(t.elapsed());
    }
    Ok(best)
}

/// Throughput of forward beam search against brute-force dense ranking over
/// seeded synthetic databases of each size.
pub fn bench_efficiency<S: Scorer + ?Sized>(scorer: &S, cfg: &BenchConfig) -> Result<Vec<BenchRow>> {
    if cfg.queries == 0 || cfg.db_sizes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let info = scorer.info();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let text_hi = info.visual_lo.max(1);
    let prompts: Vec<Prompt> = (0..cfg.queries)
        .map(|_| Prompt::from_tokens((0..4).map(|_| rng.random_range(0..text_hi)).collect()))
        .collect();
    let query_vecs: Vec<Vec<f32>> = (0..cfg.queries)
        .map(|_| (0..cfg.dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect())
        .collect();
    let mut retrieve_cfg = RetrieveConfig::default();
    retrieve_cfg.beam.beam_size = cfg.beam;
    retrieve_cfg.beam.max_steps = Some(cfg.max_steps);
    retrieve_cfg.beam.proxy = ProxyConfig::forward();
    retrieve_cfg.rrr = false;

    let mut rows = Vec::new();
    for &n in &cfg.db_sizes {
        let db = random_database(info, n, cfg.seq_len..=cfg.seq_len, cfg.seed ^ n as u64);
        let index = Index::new(db);
        let emb = EmbeddingMatrix::random(n, cfg.dim, cfg.seed ^ (n as u64).rotate_left(17));

        let counted = CountingScorer::new(scorer);
        for p in &prompts {
            retrieve(&counted, p, &index, &retrieve_cfg)?;
        }
        let decode_steps = counted.calls();
        let gen_time = best_of(cfg.repeats, || {
            for p in &prompts {
                retrieve(scorer, p, &index, &retrieve_cfg)?;
            }
            Ok(())
        })?;

        let before = emb.comparisons();
        for q in &query_vecs {
            dense_rank(&emb, q, cfg.k)?;
        }
        let dense_comparisons = (emb.comparisons() - before) / cfg.queries as u64;
        let dense_time = best_of(cfg.repeats, || {
            for q in &query_vecs {
                dense_rank(&emb, q, cfg.k)?;
            }
            Ok(())
        })?;
        let pps = |d: Duration| cfg.queries as f64 / d.as_secs_f64().max(1e-12);
        log::info!(
            "bench |G|={n}: generative {:.1}/s, dense {:.1}/s",
            pps(gen_time),
            pps(dense_time)
        );
        rows.push(BenchRow {
            db_size: n,
            generative_pps: pps(gen_time),
            dense_pps: pps(dense_time),
            decode_steps,
            dense_comparisons,
        });
    }
    Ok(rows)
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("db_size,generative_pps,dense_pps,decode_steps,dense_comparisons\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{},{}",
            r.db_size, r.generative_pps, r.dense_pps, r.decode_steps, r.dense_comparisons
        );
    }
    out
}

/// External text-image agreement scores for one benchmark prompt.
#[derive(Clone, Debug, PartialEq)]
pub struct FiltrationRecord {
    pub prompt_id: String,
    pub s_gt: f64,
    pub s_gen: f64,
    pub delta: f64,
}

impl FiltrationRecord {
    pub fn new(prompt_id: impl Into<String>, s_gt: f64, s_gen: f64) -> FiltrationRecord {
        FiltrationRecord {
            prompt_id: prompt_id.into(),
            s_gt,
            s_gen,
            delta: s_gt - s_gen,
        }
    }
}

/// Parses `prompt_id<TAB>s_gt<TAB>s_gen` lines.
pub fn parse_filtration(text: &str) -> Result<Vec<FiltrationRecord>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, gt, gen] = fields[..] else {
            return Err(Error::parse(
                n + 1,
                "expected prompt_id, s_gt and s_gen separated by tabs",
            ));
        };
        let num = |s: &str| -> Result<f64> {
            s.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::parse(n + 1, format!("bad score `{s}`")))
        };
        out.push(FiltrationRecord::new(id, num(gt)?, num(gen)?));
    }
    Ok(out)
}

/// Drops records whose ground-truth score is below `threshold`, orders the
/// rest by `delta` descending (ties by prompt id) and keeps the first `top_n`
/// distinct prompt ids.
pub fn filter_benchmark(records: &[FiltrationRecord], threshold: f64, top_n: usize) -> Vec<String> {
    let mut kept: Vec<&FiltrationRecord> = records.iter().filter(|r| r.s_gt >= threshold).collect();
    kept.sort_by(|a, b| {
        b.delta
            .partial_cmp(&a.delta)
            .unwrap_or(Ordering::Equal)
            .then_with(|| a.prompt_id.cmp(&b.prompt_id))
    });
    let mut seen = HashSet::new();
    kept.into_iter()
        .filter(|r| seen.insert(r.prompt_id.as_str()))
        .take(top_n)
        .map(|r| r.prompt_id.clone())
        .collect()
}

/// Ranking proxy used for the exhaustive upper bound of a beam sweep.
pub fn upper_bound_proxy(cfg: &RetrieveConfig, rrr: bool) -> &ProxyConfig {
    if rrr {
        &cfg.rerank
    } else {
        debug_assert_ne!(cfg.beam.proxy.kind, ProxyKind::Reverse);
        &cfg.beam.proxy
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::token_index::{ImageRecord, IndexParams, TokenSequence};

    fn list(ids: &[&str]) -> RankedList {
        let items = ids
            .iter()
            .enumerate()
            .map(|(i, id)| {
                let s = SimilarityScore {
                    value: -(i as f64),
                    conditional: -(i as f64),
                    prior: None,
                    positions: 1,
                };
                ScoredCandidate {
                    rank: i + 1,
                    image_id: id.to_string(),
                    tokens: TokenSequence::new(vec![1, 9]).unwrap(),
                    score: s,
                    forward_score: Some(s),
                    reverse_score: None,
                }
            })
            .collect();
        RankedList {
            items,
            proxy_used: ProxyConfig::forward(),
            forward_proxy: None,
            decode_steps: 0,
        }
    }

    fn db(n: usize) -> ImageDatabase {
        let recs = (0..n)
            .map(|i| ImageRecord::new(format!("i{i}"), TokenSequence::new(vec![1, 9]).unwrap()))
            .collect();
        ImageDatabase::new(
            recs,
            IndexParams {
                vocab_size: 10,
                image_end: 9,
            },
        )
        .unwrap()
    }

    fn set(truth: &[&str]) -> EvalSet {
        let pairs = truth
            .iter()
            .map(|t| (Prompt::from_tokens(vec![0]), t.to_string()))
            .collect();
        EvalSet::from_pairs(pairs, &db(12)).unwrap()
    }

    #[test]
    fn recall_hand_count() {
        let all: Vec<String> = (0..10).map(|i| format!("i{i}")).collect();
        let order = |first: &[usize]| -> RankedList {
            let mut ids: Vec<&str> = first.iter().map(|&i| all[i].as_str()).collect();
            ids.extend(
                all.iter()
                    .map(String::as_str)
                    .filter(|s| !ids.contains(s))
                    .collect::<Vec<_>>(),
            );
            list(&ids)
        };
        // truth i0 at rank 1, i1 at rank 2, i5 at rank 6, i11 absent
        let results = vec![order(&[0]), order(&[0, 1]), order(&[0]), order(&[])];
        let truth = set(&["i0", "i1", "i5", "i11"]);
        let r = recall_at_k(&results, &truth, &[1, 5, 10]).unwrap();
        assert_eq!(r[&1], 0.25);
        assert_eq!(r[&5], 0.5);
        assert_eq!(r[&10], 0.75);
        assert!(matches!(
            recall_at_k(&results[..3], &truth, &[1]),
            Err(Error::LengthMismatch { .. })
        ));
        let short = vec![list(&["i0", "i1"]); 4];
        assert_eq!(recall_at_k(&short, &set(&["i1"; 4]), &[50]).unwrap()[&50], 1.0);
    }

    #[test]
    fn unknown_ground_truth() {
        let r = EvalSet::from_pairs(vec![(Prompt::from_tokens(vec![0]), "nope".into())], &db(2));
        assert!(matches!(r, Err(Error::UnknownImage(_))));
    }

    #[test]
    fn retrieval_fraction_counts() {
        use Choice::*;
        assert_eq!(
            retrieval_fraction([Retrieval, Generation, Retrieval, Retrieval]).unwrap(),
            0.75
        );
        assert_eq!(retrieval_fraction([Generation, Generation]).unwrap(), 0.0);
        assert_eq!(retrieval_fraction([Retrieval]).unwrap(), 1.0);
        assert!(matches!(retrieval_fraction([]), Err(Error::EmptyInput)));
    }

    #[test]
    fn dense_examples() {
        let ids: Vec<String> = (0..10).map(|i| i.to_string()).collect();
        let rows: Vec<Vec<f32>> = (0..10)
            .map(|i| (0..10).map(|j| if i == j { 1.0 } else { 0.0 }).collect())
            .collect();
        let m = EmbeddingMatrix::new(ids, 10, rows.clone()).unwrap();
        let hits = dense_rank(&m, &rows[7], 3).unwrap();
        assert_eq!(hits[0].image_id, "7");
        assert_eq!(hits[0].score, 1.0);
        // remaining rows tie at 0 and come back in id order
        assert_eq!(hits[1].image_id, "0");
        assert_eq!(hits[2].image_id, "1");
        assert_eq!(m.comparisons(), 10);
        assert!(matches!(dense_rank(&m, &[0.0; 10], 1), Err(Error::DegenerateQuery)));
        assert!(matches!(
            dense_rank(&m, &[1.0; 3], 1),
            Err(Error::DimensionMismatch { .. })
        ));

        let m = EmbeddingMatrix::parse("d=2\na\t1 0\nb\t0 1\n").unwrap();
        assert_eq!(dense_rank(&m, &[1.0, 0.1], 2).unwrap()[0].image_id, "a");
        assert!(EmbeddingMatrix::parse("d=2\na\t1 0 3\n").is_err());
        assert!(EmbeddingMatrix::parse("a\t1 0\n").is_err());
    }

    #[test]
    fn filtration_examples() {
        let recs = vec![
            FiltrationRecord::new("a", 29.9, 10.0),
            FiltrationRecord::new("b", 30.0, 25.0),
            FiltrationRecord::new("c", 35.0, 26.0),
        ];
        assert_eq!(filter_benchmark(&recs, 30.0, 10), vec!["c", "b"]);
        let recs = vec![
            FiltrationRecord::new("x", 40.0, 35.0),
            FiltrationRecord::new("y", 40.0, 31.0),
            FiltrationRecord::new("z", 40.0, 39.0),
        ];
        assert_eq!(filter_benchmark(&recs, 30.0, 2), vec!["y", "x"]);
        assert!(filter_benchmark(&recs, 30.0, 0).is_empty());
        let parsed = parse_filtration("p1\t31.5\t30.0\n").unwrap();
        assert_eq!(parsed[0].delta, 31.5 - 30.0);
        assert!(parse_filtration("p1\t31.5\n").is_err());
    }

    #[test]
    fn csv_formats() {
        let rows = [EtaRow {
            eta: 1.0,
            r_at_1: 0.5,
            r_at_5: 1.0,
        }];
        assert_eq!(eta_csv(&rows), "eta,r_at_1,r_at_5\n1.000000,0.500000,1.000000\n");
        let rows = [BeamRow {
            beam: None,
            r_at_1: 1.0,
            r_at_5: 1.0,
            r_at_10: 1.0,
        }];
        assert!(beam_csv(&rows).ends_with("exhaustive,1.000000,1.000000,1.000000\n"));
    }
}
