//! Tokenized image database, the prefix tree built over it, and the
//! line-based index file format.
//!
//! Every stored sequence ends with the scorer's `image_end` token, which
//! appears nowhere else in it. Terminal nodes of the [`Trie`] are therefore
//! leaves, and a beam that emits `image_end` has finished exactly one stored
//! sequence.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::Deref;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};

/// Index of a token in the scorer's unified vocabulary.
pub type TokenId = u32;

/// A non-empty, ordered list of token ids.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(transparent)]
pub struct TokenSequence(Vec<TokenId>);

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::InvalidSequence {
                id: String::new(),
                message: "sequence is empty".into(),
            });
        }
        Ok(TokenSequence(tokens))
    }

    pub fn as_slice(&self) -> &[TokenId] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<TokenId> {
        self.0
    }
}

impl Deref for TokenSequence {
    type Target = [TokenId];

    fn deref(&self) -> &[TokenId] {
        &self.0
    }
}

impl TryFrom<Vec<TokenId>> for TokenSequence {
    type Error = Error;

    fn try_from(tokens: Vec<TokenId>) -> Result<Self> {
        TokenSequence::new(tokens)
    }
}

/// One database image: its identifier, visual token codes and free-form metadata.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageRecord {
    pub image_id: String,
    pub tokens: TokenSequence,
    pub metadata: BTreeMap<String, String>,
}

impl ImageRecord {
    pub fn new(image_id: impl Into<String>, tokens: TokenSequence) -> Self {
        ImageRecord {
            image_id: image_id.into(),
            tokens,
            metadata: BTreeMap::new(),
        }
    }
}

/// Vocabulary parameters needed to validate and terminate stored sequences.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IndexParams {
    pub vocab_size: u32,
    pub image_end: TokenId,
}

/// The tokenized image database.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ImageDatabase {
    records: Vec<ImageRecord>,
    params: IndexParams,
}

impl ImageDatabase {
    /// Validates `records` as a database. Sequences must already end with
    /// `image_end`; use [`ImageDatabase::from_tokens`] to have it appended.
    pub fn new(records: Vec<ImageRecord>, params: IndexParams) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyDatabase);
        }
        if params.image_end >= params.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: params.image_end as u64,
                vocab_size: params.vocab_size,
            });
        }
        let mut seen = HashSet::with_capacity(records.len());
        for rec in &records {
            if !seen.insert(rec.image_id.as_str()) {
                return Err(Error::DuplicateId(rec.image_id.clone()));
            }
            validate_stored(&rec.image_id, &rec.tokens, params)?;
        }
        Ok(ImageDatabase { records, params })
    }

    /// Builds a database from raw `(id, tokens)` pairs, appending `image_end`
    /// to any sequence that lacks it.
    pub fn from_tokens<I, S>(entries: I, params: IndexParams) -> Result<Self>
    where
        I: IntoIterator<Item = (S, Vec<TokenId>)>,
        S: Into<String>,
    {
        let records = entries
            .into_iter()
            .map(|(id, mut tokens)| {
                if tokens.last() != Some(&params.image_end) {
                    tokens.push(params.image_end);
                }
                ImageRecord::new(id, TokenSequence(tokens))
            })
            .collect();
        ImageDatabase::new(records, params)
    }

    pub fn records(&self) -> &[ImageRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn params(&self) -> IndexParams {
        self.params
    }

    pub fn vocab_size(&self) -> u32 {
        self.params.vocab_size
    }

    pub fn image_end(&self) -> TokenId {
        self.params.image_end
    }

    pub fn get(&self, image_id: &str) -> Option<&ImageRecord> {
        self.records.iter().find(|r| r.image_id == image_id)
    }

    /// Length of the longest stored sequence, `image_end` included.
    pub fn max_len(&self) -> usize {
        self.records.iter().map(|r| r.tokens.len()).max().unwrap_or(0)
    }
}

fn validate_stored(id: &str, tokens: &[TokenId], params: IndexParams) -> Result<()> {
    for &t in tokens {
        if t >= params.vocab_size {
            return Err(Error::TokenOutOfRange {
                token: t as u64,
                vocab_size: params.vocab_size,
            });
        }
    }
    let ends = tokens.iter().filter(|&&t| t == params.image_end).count();
    if tokens.last() != Some(&params.image_end) || ends != 1 {
        return Err(Error::InvalidSequence {
            id: id.to_string(),
            message: format!(
                "image_end ({}) must appear exactly once, as the final token",
                params.image_end
            ),
        });
    }
    Ok(())
}

const ROOT: usize = 0;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
struct TrieNode {
    // ascending by token id
    children: Vec<(TokenId, usize)>,
    terminal_ids: Vec<String>,
}

/// Prefix tree over every stored token sequence.
///
/// Nodes live in an arena; construction sorts its input first, so the arena
/// layout (and hence equality) does not depend on record order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trie {
    nodes: Vec<TrieNode>,
    sequences: usize,
    max_depth: usize,
}

impl Default for Trie {
    fn default() -> Self {
        Trie {
            nodes: vec![TrieNode::default()],
            sequences: 0,
            max_depth: 0,
        }
    }
}

impl Trie {
    pub fn build(db: &ImageDatabase) -> Trie {
        Trie::from_entries(db.records().iter().map(|r| (r.image_id.as_str(), r.tokens.as_slice())))
    }

    pub fn from_entries<'a, I>(entries: I) -> Trie
    where
        I: IntoIterator<Item = (&'a str, &'a [TokenId])>,
    {
        let mut entries: Vec<(&[TokenId], &str)> = entries.into_iter().map(|(id, toks)| (toks, id)).collect();
        entries.sort_unstable();

        let mut trie = Trie::default();
        for (tokens, id) in entries {
            let mut node = ROOT;
            for &tok in tokens {
                node = match trie.child(node, tok) {
                    Some(next) => next,
                    None => {
                        let next = trie.nodes.len();
                        trie.nodes.push(TrieNode::default());
                        // input is sorted, so new children always go last
                        trie.nodes[node].children.push((tok, next));
                        next
                    }
                };
            }
            trie.nodes[node].terminal_ids.push(id.to_string());
            trie.sequences += 1;
            trie.max_depth = trie.max_depth.max(tokens.len());
        }
        trie
    }

    pub fn root(&self) -> usize {
        ROOT
    }

    pub fn is_empty(&self) -> bool {
        self.sequences == 0
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    /// Number of stored `(id, sequence)` entries.
    pub fn len(&self) -> usize {
        self.sequences
    }

    pub fn max_depth(&self) -> usize {
        self.max_depth
    }

    pub fn child(&self, node: usize, token: TokenId) -> Option<usize> {
        let children = &self.nodes[node].children;
        children
            .binary_search_by_key(&token, |&(t, _)| t)
            .ok()
            .map(|i| children[i].1)
    }

    /// Children of `node` in ascending token order.
    pub fn children(&self, node: usize) -> impl Iterator<Item = (TokenId, usize)> + '_ {
        self.nodes[node].children.iter().copied()
    }

    pub fn terminal_ids(&self, node: usize) -> &[String] {
        &self.nodes[node].terminal_ids
    }

    pub fn walk(&self, prefix: &[TokenId]) -> Option<usize> {
        prefix.iter().try_fold(ROOT, |node, &tok| self.child(node, tok))
    }

    /// Tokens that extend `prefix` towards at least one stored sequence,
    /// ascending. Empty when `prefix` is absent or already complete.
    pub fn allowed_next(&self, prefix: &[TokenId]) -> Vec<TokenId> {
        match self.walk(prefix) {
            Some(node) => self.children(node).map(|(t, _)| t).collect(),
            None => Vec::new(),
        }
    }

    /// Image ids whose stored sequence equals `sequence` exactly, sorted.
    pub fn lookup(&self, sequence: &[TokenId]) -> &[String] {
        match self.walk(sequence) {
            Some(node) => self.terminal_ids(node),
            None => &[],
        }
    }
}

/// A database together with its prefix tree.
#[derive(Clone, Debug)]
pub struct Index {
    pub db: ImageDatabase,
    pub trie: Trie,
}

impl Index {
    pub fn new(db: ImageDatabase) -> Index {
        let trie = Trie::build(&db);
        Index { db, trie }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Index> {
        load_index(path).map(Index::new)
    }
}

const HDR_VOCAB: &str = "#vocab_size=";
const HDR_END: &str = "#image_end=";
const HDR_RECORDS: &str = "#records=";

/// Line number, id, raw token values and metadata of one record line.
type RawRecord = (usize, String, Vec<u64>, BTreeMap<String, String>);

/// Parses index-file text. Header values take precedence over `defaults`;
/// when both are present they must agree.
pub fn parse_index(text: &str, defaults: Option<IndexParams>) -> Result<ImageDatabase> {
    let mut vocab_size: Option<u32> = None;
    let mut image_end: Option<TokenId> = None;
    let mut declared_records: Option<usize> = None;
    let mut raw: Vec<RawRecord> = Vec::new();

    for (i, line) in text.lines().enumerate() {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(v) = line.strip_prefix(HDR_VOCAB) {
            vocab_size = Some(parse_header(lineno, v)?);
            continue;
        }
        if let Some(v) = line.strip_prefix(HDR_END) {
            image_end = Some(parse_header(lineno, v)?);
            continue;
        }
        if let Some(v) = line.strip_prefix(HDR_RECORDS) {
            declared_records = Some(parse_header(lineno, v)?);
            continue;
        }
        if line.starts_with('#') {
            continue;
        }

        let mut fields = line.split('\t');
        let id = fields.next().unwrap_or_default();
        if id.is_empty() {
            return Err(Error::parse(lineno, "missing image id"));
        }
        let toks = fields
            .next()
            .ok_or_else(|| Error::parse(lineno, "expected `image_id<TAB>tokens`"))?;
        let tokens = toks
            .split_ascii_whitespace()
            .map(|t| {
                t.parse::<u64>()
                    .map_err(|_| Error::parse(lineno, format!("invalid token `{t}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        if tokens.is_empty() {
            return Err(Error::parse(lineno, format!("no tokens for `{id}`")));
        }
        let mut metadata = BTreeMap::new();
        for kv in fields {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::parse(lineno, format!("metadata `{kv}` is not key=value")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        raw.push((lineno, id.to_string(), tokens, metadata));
    }

    let params = resolve_params(vocab_size, image_end, defaults)?;
    if raw.is_empty() {
        return Err(Error::EmptyDatabase);
    }
    if let Some(n) = declared_records {
        if n != raw.len() {
            return Err(Error::parse(
                text.lines().count(),
                format!("header declares {n} records, found {}", raw.len()),
            ));
        }
    }

    let mut records = Vec::with_capacity(raw.len());
    for (_, id, tokens, metadata) in raw {
        let mut seq = Vec::with_capacity(tokens.len() + 1);
        for t in tokens {
            if t >= params.vocab_size as u64 {
                return Err(Error::TokenOutOfRange {
                    token: t,
                    vocab_size: params.vocab_size,
                });
            }
            seq.push(t as TokenId);
        }
        if seq.last() != Some(&params.image_end) {
            seq.push(params.image_end);
        }
        records.push(ImageRecord {
            image_id: id,
            tokens: TokenSequence(seq),
            metadata,
        });
    }
    ImageDatabase::new(records, params)
}

fn parse_header<T: std::str::FromStr>(line: usize, value: &str) -> Result<T> {
    value
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("invalid header value `{value}`")))
}

fn resolve_params(
    vocab_size: Option<u32>,
    image_end: Option<TokenId>,
    defaults: Option<IndexParams>,
) -> Result<IndexParams> {
    let pick = |hdr: Option<u32>, def: Option<u32>, name: &str| -> Result<u32> {
        match (hdr, def) {
            (Some(h), Some(d)) if h != d => Err(Error::InvalidConfig(format!(
                "{name}: file declares {h}, caller expects {d}"
            ))),
            (Some(v), _) | (None, Some(v)) => Ok(v),
            (None, None) => Err(Error::parse(0, format!("missing `#{name}=` header"))),
        }
    };
    Ok(IndexParams {
        vocab_size: pick(vocab_size, defaults.map(|d| d.vocab_size), "vocab_size")?,
        image_end: pick(image_end, defaults.map(|d| d.image_end), "image_end")?,
    })
}

/// Imports a raw index file, appending `image_end` where missing.
pub fn load_database(path: impl AsRef<Path>, params: IndexParams) -> Result<ImageDatabase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    parse_index(&text, Some(params))
}

/// Serializes `db` in the canonical on-disk form, headers first.
pub fn index_to_string(db: &ImageDatabase) -> String {
    let mut out = String::new();
    let p = db.params();
    let _ = writeln!(out, "{HDR_VOCAB}{}", p.vocab_size);
    let _ = writeln!(out, "{HDR_END}{}", p.image_end);
    let _ = writeln!(out, "{HDR_RECORDS}{}", db.len());
    for rec in db.records() {
        out.push_str(&rec.image_id);
        out.push('\t');
        for (i, t) in rec.tokens.iter().enumerate() {
            if i > 0 {
                out.push(' ');
            }
            let _ = write!(out, "{t}");
        }
        for (k, v) in &rec.metadata {
            let _ = write!(out, "\t{k}={v}");
        }
        out.push('\n');
    }
    out
}

pub fn save_index(db: &ImageDatabase, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, index_to_string(db)).map_err(|e| Error::file(path, e))?;
    Ok(())
}

/// Loads a file written by [`save_index`]. A missing trailing newline or a
/// record count that disagrees with the header is reported as truncation.
pub fn load_index(path: impl AsRef<Path>) -> Result<ImageDatabase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
    if !text.ends_with('\n') {
        return Err(Error::parse(text.lines().count(), "file is truncated"));
    }
    parse_index(&text, None)
}
