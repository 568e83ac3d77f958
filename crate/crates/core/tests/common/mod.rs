//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Mutex;

use genret::scorer::logsumexp;
use genret::{Prompt, Result, Scorer, ScorerInfo, TokenId, ToyScorer};

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn t1_scorer() -> ToyScorer {
    ToyScorer::from_file(fixture("t1.tbl")).expect("t1 table loads")
}

pub fn t1_index() -> genret::Index {
    genret::Index::load(fixture("t1.idx")).expect("t1 index loads")
}

/// Forwards to `inner` and remembers the worst `|logsumexp|` of any row.
pub struct CheckingScorer<S> {
    pub inner: S,
    worst: Mutex<f64>,
    rows: Mutex<u64>,
}

impl<S: Scorer> CheckingScorer<S> {
    pub fn new(inner: S) -> Self {
        CheckingScorer {
            inner,
            worst: Mutex::new(0.0),
            rows: Mutex::new(0),
        }
    }

    pub fn worst(&self) -> f64 {
        *self.worst.lock().unwrap()
    }

    pub fn rows(&self) -> u64 {
        *self.rows.lock().unwrap()
    }
}

impl<S: Scorer> Scorer for CheckingScorer<S> {
    fn info(&self) -> &ScorerInfo {
        self.inner.info()
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        let rows = self.inner.next_logprobs(contexts)?;
        let mut worst = self.worst.lock().unwrap();
        for row in &rows {
            assert_eq!(row.len(), self.info().vocab_size as usize);
            let lse = logsumexp(row).abs();
            *worst = if lse.is_nan() { f64::INFINITY } else { worst.max(lse) };
        }
        *self.rows.lock().unwrap() += rows.len() as u64;
        Ok(rows)
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        self.inner.tokenize(text)
    }
}

/// Reference teacher forcing: one context per call, summed left to right.
pub fn oracle_forward<S: Scorer + ?Sized>(s: &S, prefix: &[TokenId], y: &[TokenId]) -> f64 {
    let start = s.info().image_start;
    let mut total = 0.0;
    for i in 0..y.len() {
        let mut ctx = prefix.to_vec();
        ctx.push(start);
        ctx.extend_from_slice(&y[..i]);
        total += s.next_logprobs(&[ctx]).unwrap()[0][y[i] as usize];
    }
    total
}

pub fn oracle_reverse<S: Scorer + ?Sized>(s: &S, x: &[TokenId], y: &[TokenId]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.len() {
        let mut ctx = y.to_vec();
        ctx.extend_from_slice(&x[..i]);
        total += s.next_logprobs(&[ctx]).unwrap()[0][x[i] as usize];
    }
    total
}

pub fn oracle_pmi<S: Scorer + ?Sized>(s: &S, x: &Prompt, null: &Prompt, y: &[TokenId], eta: f64) -> f64 {
    oracle_forward(s, &x.tokens, y) - eta * oracle_forward(s, &null.tokens, y)
}

/// Sorts `(score, tokens, id)` triples the way every ranking in the crate must.
pub fn oracle_order(mut scored: Vec<(f64, Vec<TokenId>, String)>) -> Vec<String> {
    scored.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| a.1.cmp(&b.1))
            .then_with(|| a.2.cmp(&b.2))
    });
    scored.into_iter().map(|t| t.2).collect()
}
