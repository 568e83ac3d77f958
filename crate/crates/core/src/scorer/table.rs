//! Table-backed toy scorer.
//!
//! ```text
//! INFO vocab_size=200 image_start=198 image_end=199 visual=100-197
//! WORD red=7 car=12
//! CTX 7 198 : 101=0.5 104=0.5
//! DEFAULT : 199=1.0
//! ```
//!
//! `CTX` rows match a context exactly; anything else falls back to the
//! `DEFAULT` row, or to a uniform distribution when none is declared.

use std::collections::HashMap;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use super::{check_batch, Scorer, ScorerInfo, LOG_FLOOR};
use crate::error::{Error, Result};
use crate::token_index::TokenId;

const NORMALIZATION_SLACK: f64 = 1e-9;

#[derive(Debug, Clone)]
pub struct ToyScorer {
    info: ScorerInfo,
    rows: HashMap<Vec<TokenId>, Arc<[f64]>>,
    default_row: Arc<[f64]>,
    words: HashMap<String, TokenId>,
    warnings: Vec<String>,
}

/// Line number, context (`None` for DEFAULT) and listed `(token, p)` pairs.
type RawRow = (usize, Option<Vec<TokenId>>, Vec<(u64, f64)>);

impl ToyScorer {
    pub fn from_file(path: impl AsRef<Path>) -> Result<ToyScorer> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let mut scorer = ToyScorer::parse(&text)?;
        scorer.info.name = format!("toy:{}", path.display());
        Ok(scorer)
    }

    pub fn parse(text: &str) -> Result<ToyScorer> {
        let mut info: Option<ScorerInfo> = None;
        let mut raw_rows: Vec<RawRow> = Vec::new();
        let mut words = HashMap::new();

        for (i, line) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (keyword, rest) = line.split_once(char::is_whitespace).unwrap_or((line, ""));
            match keyword {
                "INFO" => info = Some(parse_info(lineno, rest)?),
                "WORD" => {
                    if rest.trim().is_empty() {
                        return Err(Error::parse(lineno, "expected WORD <word>=<tok> ..."));
                    }
                    for pair in rest.split_ascii_whitespace() {
                        let (word, tok) = pair
                            .rsplit_once('=')
                            .ok_or_else(|| Error::parse(lineno, "expected WORD <word>=<tok> ..."))?;
                        let tok = parse_num::<TokenId>(lineno, tok)?;
                        words.insert(normalize_word(word), tok);
                    }
                }
                "CTX" | "DEFAULT" => {
                    let (ctx, probs) = rest
                        .split_once(':')
                        .ok_or_else(|| Error::parse(lineno, "missing `:` separator"))?;
                    let context = if keyword == "CTX" {
                        let ctx = ctx
                            .split_ascii_whitespace()
                            .map(|t| parse_num::<TokenId>(lineno, t))
                            .collect::<Result<Vec<_>>>()?;
                        if ctx.is_empty() {
                            return Err(Error::parse(lineno, "CTX row with empty context"));
                        }
                        Some(ctx)
                    } else {
                        if !ctx.trim().is_empty() {
                            return Err(Error::parse(lineno, "DEFAULT takes no context"));
                        }
                        None
                    };
                    let entries = probs
                        .split_ascii_whitespace()
                        .map(|kv| {
                            let (t, p) = kv
                                .split_once('=')
                                .ok_or_else(|| Error::parse(lineno, format!("expected <tok>=<prob>, got `{kv}`")))?;
                            let p = parse_num::<f64>(lineno, p)?;
                            if !(p.is_finite() && p >= 0.0) {
                                return Err(Error::parse(lineno, format!("bad probability `{kv}`")));
                            }
                            Ok((parse_num::<u64>(lineno, t)?, p))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    raw_rows.push((lineno, context, entries));
                }
                other => return Err(Error::parse(lineno, format!("unknown keyword `{other}`"))),
            }
        }

        let mut info = info.ok_or_else(|| Error::parse(0, "missing INFO line"))?;
        info.supports_tokenize = !words.is_empty();
        info.validate()?;
        for &tok in words.values() {
            info.check_context(&[tok])?;
        }

        let vocab = info.vocab_size as usize;
        let mut warnings = Vec::new();
        let mut rows = HashMap::new();
        let mut default_row: Arc<[f64]> = vec![-(vocab as f64).ln(); vocab].into();
        for (lineno, context, entries) in raw_rows {
            if let Some(ctx) = &context {
                info.check_context(ctx)?;
            }
            let row = build_row(lineno, &context, &entries, info.vocab_size, &mut warnings)?;
            match context {
                Some(ctx) => {
                    if rows.insert(ctx, row).is_some() {
                        return Err(Error::parse(lineno, "duplicate CTX row"));
                    }
                }
                None => default_row = row,
            }
        }
        for w in &warnings {
            log::warn!("{w}");
        }

        Ok(ToyScorer {
            info,
            rows,
            default_row,
            words,
            warnings,
        })
    }

    /// Normalization warnings raised while loading the table.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    fn row(&self, context: &[TokenId]) -> &Arc<[f64]> {
        self.rows.get(context).unwrap_or(&self.default_row)
    }
}

fn normalize_word(w: &str) -> String {
    w.trim_matches(|c: char| c.is_ascii_punctuation()).to_lowercase()
}

fn parse_num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid number `{s}`")))
}

fn parse_info(line: usize, rest: &str) -> Result<ScorerInfo> {
    let mut vocab_size = None;
    let mut image_start = None;
    let mut image_end = None;
    let mut visual = None;
    for kv in rest.split_ascii_whitespace() {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::parse(line, format!("expected key=value, got `{kv}`")))?;
        match k {
            "vocab_size" => vocab_size = Some(parse_num(line, v)?),
            "image_start" => image_start = Some(parse_num(line, v)?),
            "image_end" => image_end = Some(parse_num(line, v)?),
            "visual" => {
                let (lo, hi) = v
                    .split_once('-')
                    .ok_or_else(|| Error::parse(line, "visual range must be <lo>-<hi>"))?;
                visual = Some((parse_num(line, lo)?, parse_num(line, hi)?));
            }
            other => return Err(Error::parse(line, format!("unknown INFO key `{other}`"))),
        }
    }
    let missing = |name| Error::parse(line, format!("INFO is missing `{name}`"));
    let (visual_lo, visual_hi) = visual.ok_or_else(|| missing("visual"))?;
    Ok(ScorerInfo {
        vocab_size: vocab_size.ok_or_else(|| missing("vocab_size"))?,
        image_start: image_start.ok_or_else(|| missing("image_start"))?,
        image_end: image_end.ok_or_else(|| missing("image_end"))?,
        visual_lo,
        visual_hi,
        supports_tokenize: false,
        name: "toy".into(),
    })
}

fn build_row(
    line: usize,
    context: &Option<Vec<TokenId>>,
    entries: &[(u64, f64)],
    vocab_size: u32,
    warnings: &mut Vec<String>,
) -> Result<Arc<[f64]>> {
    let mut probs = vec![0.0f64; vocab_size as usize];
    for &(tok, p) in entries {
        if tok >= vocab_size as u64 {
            return Err(Error::TokenOutOfRange { token: tok, vocab_size });
        }
        if probs[tok as usize] != 0.0 {
            return Err(Error::parse(line, format!("token {tok} listed twice")));
        }
        probs[tok as usize] = p;
    }
    let total: f64 = probs.iter().sum();
    if total <= 0.0 {
        return Err(Error::NonNormalizable {
            context: context.clone(),
        });
    }
    if (total - 1.0).abs() > NORMALIZATION_SLACK {
        warnings.push(format!("line {line}: row sums to {total}, renormalizing"));
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
    Ok(probs
        .into_iter()
        .map(|p| if p > 0.0 { p.ln().max(LOG_FLOOR) } else { LOG_FLOOR })
        .collect())
}

impl Scorer for ToyScorer {
    fn info(&self) -> &ScorerInfo {
        &self.info
    }

    fn next_logprobs(&self, contexts: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        check_batch(&self.info, contexts)?;
        Ok(contexts.iter().map(|c| self.row(c).to_vec()).collect())
    }

    fn tokenize(&self, text: &str) -> Result<Vec<TokenId>> {
        if !self.info.supports_tokenize {
            return Err(Error::Unsupported("tokenize"));
        }
        text.split_whitespace()
            .map(normalize_word)
            .filter(|w| !w.is_empty())
            .map(|w| self.words.get(&w).copied().ok_or(Error::UnknownWord(w)))
            .collect()
    }
}
