//! Seeded synthetic scorers and databases for tests, sweeps and benchmarks.
//!
//! Every scorer here is a pure function of its parameters and the context, so
//! results do not depend on batching or call order.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::proxies::Prompt;
use crate::scorer::{check_batch, log_softmax_in_place, Scorer, ScorerInfo};
use crate::token_index::{ImageDatabase, TokenId};

/// FNV-1a over the seed and the context tokens.
pub fn context_hash(seed: u64, context: &[TokenId]) -> u64 {
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in seed.to_le_bytes() {
        h = (h ^ byte as u64).wrapping_mul(PRIME);
    }
    for &t in context {
        for byte in t.to_le_bytes() {
            h = (h ^ byte as u64).wrapping_mul(PRIME);
        }
    }
    h
}

fn context_rng(seed: u64, context: &[TokenId]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(context_hash(seed, context))
}

fn layout(vocab_size: u32, visual_lo: TokenId, visual_hi: TokenId, name: &str) -> ScorerInfo {
    ScorerInfo {
        vocab_size,
        image_start: vocab_size - 2,
        image_end: vocab_size - 1,
        visual_lo,
        visual_hi,
        supports_tokenize: false,
        name: name.to_string(),
    }
}

/// Gaussian logits drawn from a generator seeded by the context hash.
#[derive(Clone, Debug)]
pub struct RandomScorer {
    info: ScorerInfo,
    seed: u64,
    scale: f64,
}

impl RandomScorer {
    /// Token ids `[0, text_tokens)` are text, `[text_tokens, vocab_size - 2)`
    /// visual, then `image_start` and `image_end`.
    pub fn new(vocab_size: u32, text_tokens: u32, seed: u64, scale: f64) -> RandomScorer {
        assert!(vocab_size >= text_tokens + 3, "vocabulary too small");
        RandomScorer {
            info: layout(vocab_size, text_tokens, vocab_size - 3, &format!("random:{seed}")),
            seed,
            scale,
        }
    }
}

impl Scorer for RandomScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        check_batch(&self.info, contexts)?;
        Ok(contexts
            .iter()
            .map(|ctx| {
                let mut rng = context_rng(self.seed, ctx);
                let mut row: Vec<f64> = (0..self.info.vocab_size)
                    .map(|_| self.scale * rng.sample::<f64, _>(StandardNormal))
                    .collect();
                log_softmax_in_place(&mut row);
                row
            })
            .collect())
    }
}

/// `n` random visual sequences with lengths in `lengths`, ids `img00000`, ...
pub fn random_database(
    info: &ScorerInfo,
    n: usize,
    lengths: std::ops::RangeInclusive<usize>,
    seed: u64,
) -> ImageDatabase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let entries: Vec<(String, Vec<TokenId>)> = (0..n)
        .map(|i| {
            let len = rng.random_range(lengths.clone());
            let toks = (0..len)
                .map(|_| rng.random_range(info.visual_lo..=info.visual_hi))
                .collect();
            (format!("img{i:05}"), toks)
        })
        .collect();
    ImageDatabase::from_tokens(entries, info.index_params()).expect("generated database is valid")
}

/// A database whose images have disjoint token blocks and whose forward
/// likelihood carries a per-token visual prior.
///
/// Forward rows are prefix independent: after `X ⧺ [image_start] ⧺ Y<i` the
/// logit of visual token `v` is `kappa·[v in the block named by X] + b(v)`,
/// and `image_end` has logit 0. The empty prompt names no block, so its
/// rows are `b` alone and debiased PMI at `eta = 1` removes `b` exactly.
/// Reverse rows depend only on which block the image tokens come from.
#[derive(Clone, Debug)]
pub struct BiasedFamily {
    pub groups: u32,
    pub block: u32,
    pub seq_len: usize,
    pub kappa: f64,
    /// Per-visual-token prior log-weight.
    pub bias: Vec<f64>,
    pub reverse_kappa: f64,
    seed: u64,
}

impl BiasedFamily {
    /// `popular` groups get prior weight `beta` on every token; the rest get 0.
    pub fn new(groups: u32, block: u32, seq_len: usize, kappa: f64, beta: f64, popular: &[u32], seed: u64) -> Self {
        let mut bias = vec![0.0; (groups * block) as usize];
        for &g in popular {
            for j in 0..block {
                bias[(g * block + j) as usize] = beta;
            }
        }
        BiasedFamily {
            groups,
            block,
            seq_len,
            kappa,
            bias,
            reverse_kappa: 4.0,
            seed,
        }
    }

    /// The default instance: 16 groups, one in four popular with `beta > kappa`.
    pub fn standard() -> BiasedFamily {
        BiasedFamily::new(16, 4, 3, 2.0, 5.0, &[1, 5, 9, 13], 17)
    }

    pub fn with_bias(&self, bias: Vec<f64>) -> BiasedFamily {
        assert_eq!(bias.len(), self.bias.len());
        BiasedFamily { bias, ..self.clone() }
    }

    pub fn vocab_size(&self) -> u32 {
        self.groups + self.groups * self.block + 2
    }

    pub fn info(&self) -> ScorerInfo {
        let v = self.vocab_size();
        layout(v, self.groups, self.groups + self.groups * self.block - 1, "biased")
    }

    fn group_of_visual(&self, t: TokenId) -> Option<u32> {
        (t >= self.groups && t < self.groups * (self.block + 1)).then(|| (t - self.groups) / self.block)
    }

    pub fn image_id(g: u32) -> String {
        format!("g{g:02}")
    }

    /// One image per group, tokens drawn from the group's block.
    pub fn database(&self) -> ImageDatabase {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let entries: Vec<(String, Vec<TokenId>)> = (0..self.groups)
            .map(|g| {
                let lo = self.groups + g * self.block;
                let toks = (0..self.seq_len)
                    .map(|_| rng.random_range(lo..lo + self.block))
                    .collect();
                (Self::image_id(g), toks)
            })
            .collect();
        ImageDatabase::from_tokens(entries, self.info().index_params()).expect("valid database")
    }

    /// One single-token prompt per group, paired with its image id.
    pub fn queries(&self) -> Vec<(Prompt, String)> {
        (0..self.groups)
            .map(|g| (Prompt::from_tokens(vec![g]), Self::image_id(g)))
            .collect()
    }

    fn forward_row(&self, group: Option<u32>) -> Vec<f64> {
        let info = self.info();
        let mut row = vec![-30.0; info.vocab_size as usize];
        for (i, b) in self.bias.iter().enumerate() {
            let t = self.groups + i as u32;
            let hit = group.is_some_and(|g| self.group_of_visual(t) == Some(g));
            row[t as usize] = if hit { self.kappa } else { 0.0 } + b;
        }
        row[info.image_end as usize] = 0.0;
        log_softmax_in_place(&mut row);
        row
    }

    fn reverse_row(&self, image_group: Option<u32>) -> Vec<f64> {
        let info = self.info();
        let mut row = vec![0.0; info.vocab_size as usize];
        if let Some(g) = image_group {
            row[g as usize] = self.reverse_kappa;
        }
        log_softmax_in_place(&mut row);
        row
    }

    /// Row for any context, used by the scorer and the table export alike.
    pub fn row(&self, ctx: &[TokenId]) -> Vec<f64> {
        let info = self.info();
        match ctx.iter().position(|&t| t == info.image_start) {
            Some(start) => {
                let text_group = ctx[..start].iter().copied().find(|&t| t < self.groups);
                self.forward_row(text_group)
            }
            None => {
                let image_group = ctx.iter().find_map(|&t| self.group_of_visual(t));
                self.reverse_row(image_group)
            }
        }
    }

    pub fn scorer(&self) -> BiasedScorer {
        BiasedScorer {
            info: self.info(),
            family: self.clone(),
        }
    }

    /// The family as a toy table: every context met while teacher forcing the
    /// queries, the empty null prompt and the reverse direction.
    pub fn to_table(&self) -> String {
        let info = self.info();
        let db = self.database();
        let mut contexts: Vec<Vec<TokenId>> = Vec::new();
        let mut prompts: Vec<Vec<TokenId>> = self.queries().into_iter().map(|(p, _)| p.tokens).collect();
        prompts.push(Vec::new());
        for x in &prompts {
            for rec in db.records() {
                for i in 0..rec.tokens.len() {
                    let mut c = x.clone();
                    c.push(info.image_start);
                    c.extend_from_slice(&rec.tokens[..i]);
                    contexts.push(c);
                }
            }
        }
        for rec in db.records() {
            contexts.push(rec.tokens.to_vec());
        }
        contexts.sort();
        contexts.dedup();
        let mut out = format!(
            "INFO vocab_size={} image_start={} image_end={} visual={}-{}\n",
            info.vocab_size, info.image_start, info.image_end, info.visual_lo, info.visual_hi
        );
        for c in contexts {
            let row = self.row(&c);
            let ctx: Vec<String> = c.iter().map(|t| t.to_string()).collect();
            let probs: Vec<String> = row
                .iter()
                .enumerate()
                .map(|(t, lp)| format!("{t}={:e}", lp.exp()))
                .collect();
            out.push_str(&format!("CTX {} : {}\n", ctx.join(" "), probs.join(" ")));
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct BiasedScorer {
    info: ScorerInfo,
    family: BiasedFamily,
}

impl Scorer for BiasedScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        check_batch(&self.info, contexts)?;
        Ok(contexts.iter().map(|c| self.family.row(c)).collect())
    }
}

/// Caption-style retrieval family for beam-size sweeps.
///
/// Images are random sequences over a small visual alphabet, so their Trie
/// prefixes overlap heavily. A query's prompt spells its ground-truth image
/// token by token in text ids, with some positions replaced at random. The
/// forward row at step `i` favours the visual token named by prompt position
/// `i`, with a signal that grows along the sequence so early decoding steps
/// are the ambiguous ones, plus a fixed per-token visual prior. The reverse
/// row at prompt position `j` favours the text id of the image's `j`-th token
/// and carries no prior. Both directions add context-hashed Gaussian noise.
#[derive(Clone, Debug)]
pub struct CaptionFamily {
    pub alphabet: u32,
    pub seq_len: usize,
    pub images: usize,
    pub kappa: f64,
    /// Forward signal at step `i` is `kappa · (1 + ramp · i)`.
    pub ramp: f64,
    pub reverse_kappa: f64,
    /// Scale of the forward-only visual prior, one Gaussian logit per token.
    pub bias: f64,
    pub noise: f64,
    pub reverse_noise: f64,
    pub corruption: f64,
    pub seed: u64,
}

impl Default for CaptionFamily {
    fn default() -> Self {
        CaptionFamily {
            alphabet: 8,
            seq_len: 4,
            images: 64,
            kappa: 1.0,
            ramp: 2.0,
            reverse_kappa: 4.0,
            bias: 1.5,
            noise: 1.0,
            reverse_noise: 0.5,
            corruption: 0.2,
            seed: 2024,
        }
    }
}

impl CaptionFamily {
    /// Text ids `[0, alphabet)`, visual ids `[alphabet, 2·alphabet)`.
    pub fn info(&self) -> ScorerInfo {
        layout(2 * self.alphabet + 2, self.alphabet, 2 * self.alphabet - 1, "caption")
    }

    /// Distinct random sequences, ids `c000`, `c001`, ...
    pub fn database(&self) -> ImageDatabase {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let mut seen = std::collections::HashSet::new();
        let mut entries = Vec::with_capacity(self.images);
        while entries.len() < self.images {
            let toks: Vec<TokenId> = (0..self.seq_len)
                .map(|_| self.alphabet + rng.random_range(0..self.alphabet))
                .collect();
            if seen.insert(toks.clone()) {
                entries.push((format!("c{:03}", entries.len()), toks));
            }
        }
        ImageDatabase::from_tokens(entries, self.info().index_params()).expect("valid database")
    }

    /// `n` queries, each naming a uniformly drawn ground-truth image.
    pub fn queries(&self, db: &ImageDatabase, n: usize) -> Vec<(Prompt, String)> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed);
        (0..n)
            .map(|_| {
                let rec = db.records().choose(&mut rng).expect("non-empty database");
                let tokens = rec.tokens[..self.seq_len]
                    .iter()
                    .map(|&v| {
                        if rng.random_bool(self.corruption) {
                            rng.random_range(0..self.alphabet)
                        } else {
                            v - self.alphabet
                        }
                    })
                    .collect();
                (Prompt::from_tokens(tokens), rec.image_id.clone())
            })
            .collect()
    }

    pub fn scorer(&self) -> CaptionScorer {
        CaptionScorer {
            info: self.info(),
            family: self.clone(),
        }
    }

    fn prior_logit(&self, v: TokenId) -> f64 {
        let mut rng = context_rng(self.seed ^ 0xb1a5, &[v]);
        self.bias * rng.sample::<f64, _>(StandardNormal)
    }

    fn row(&self, info: &ScorerInfo, ctx: &[TokenId]) -> Vec<f64> {
        let mut rng = context_rng(self.seed, ctx);
        let mut draw = |scale: f64| -> Vec<f64> {
            (0..info.vocab_size)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        };
        let mut row = match ctx.iter().position(|&t| t == info.image_start) {
            Some(start) => {
                let mut row = draw(self.noise);
                let step = ctx.len() - start - 1;
                for t in 0..self.alphabet {
                    row[t as usize] = -30.0;
                }
                if step < self.seq_len {
                    for v in self.alphabet..2 * self.alphabet {
                        row[v as usize] += self.prior_logit(v);
                    }
                    if let Some(&x) = ctx[..start].get(step) {
                        if x < self.alphabet {
                            row[(x + self.alphabet) as usize] += self.kappa * (1.0 + self.ramp * step as f64);
                        }
                    }
                    row[info.image_end as usize] = -30.0;
                } else {
                    row[info.image_end as usize] = 10.0;
                }
                row
            }
            None => {
                let mut row = draw(self.reverse_noise);
                // image tokens (ending in image_end) come first, then the prompt prefix
                let image_len = ctx
                    .iter()
                    .position(|&t| t == info.image_end)
                    .map_or(ctx.len(), |p| p + 1);
                let j = ctx.len() - image_len;
                if j < self.seq_len.min(image_len) {
                    let v = ctx[j];
                    if v >= self.alphabet && v < 2 * self.alphabet {
                        row[(v - self.alphabet) as usize] += self.reverse_kappa;
                    }
                }
                row
            }
        };
        log_softmax_in_place(&mut row);
        row
    }
}

#[derive(Clone, Debug)]
pub struct CaptionScorer {
    info: ScorerInfo,
    family: CaptionFamily,
}

impl Scorer for CaptionScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        check_batch(&self.info, contexts)?;
        Ok(contexts.iter().map(|c| self.family.row(&self.info, c)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scorer::logsumexp;

    #[test]
    fn random_scorer_is_batch_invariant() {
        let s = RandomScorer::new(16, 4, 3, 1.0);
        let a = vec![1, 14];
        let b = vec![2, 14, 5];
        let both = s.next_logprobs(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(both[1], s.next_logprobs(&[b]).unwrap()[0]);
        assert_eq!(both[0], s.next_logprobs(&[a]).unwrap()[0]);
        assert!(logsumexp(&both[0]).abs() < 1e-12);
    }

    #[test]
    fn random_database_is_seeded() {
        let s = RandomScorer::new(16, 4, 3, 1.0);
        let a = random_database(s.info(), 20, 1..=4, 9);
        let b = random_database(s.info(), 20, 1..=4, 9);
        assert_eq!(a.records(), b.records());
        assert!(a.records().iter().all(|r| r.tokens.len() <= 5));
    }

    #[test]
    fn biased_rows_factorize() {
        let fam = BiasedFamily::standard();
        let info = fam.info();
        let x = fam.row(&[3, info.image_start]);
        let null = fam.row(&[info.image_start]);
        // inside block 3 the gap is kappa, elsewhere it is a shared constant
        let t_in = fam.groups + 3 * fam.block;
        let t_out = fam.groups + 7 * fam.block;
        let c = x[t_out as usize] - null[t_out as usize];
        assert!((x[t_in as usize] - null[t_in as usize] - c - fam.kappa).abs() < 1e-12);
        assert!((x[info.image_end as usize] - null[info.image_end as usize] - c).abs() < 1e-12);
    }

    #[test]
    fn biased_table_round_trips() {
        let fam = BiasedFamily::standard();
        let toy = crate::scorer::ToyScorer::parse(&fam.to_table()).unwrap();
        let info = fam.info();
        let ctx = vec![2, info.image_start];
        let a = toy.next_logprobs(std::slice::from_ref(&ctx)).unwrap();
        let b = fam.scorer().next_logprobs(&[ctx]).unwrap();
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn caption_database_is_distinct() {
        let fam = CaptionFamily::default();
        let db = fam.database();
        assert_eq!(db.len(), fam.images);
        let qs = fam.queries(&db, 10);
        assert_eq!(qs.len(), 10);
        assert!(qs.iter().all(|(p, _)| p.len() == fam.seq_len));
    }
}
