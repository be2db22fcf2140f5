//! Corpus ingestion: tokenization, vocabulary, span segmentation,
//! neighbouring pairs, TF-IDF statistics and pre-generated PLM outputs.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"];

/// Minimum non-special length for a trailing span to be kept when a
/// document produced more than one span.
pub const MIN_TRAILING_SPAN: usize = 8;

pub fn is_special(id: usize) -> bool {
    id < SPECIAL_TOKENS.len()
}

/// Lowercases and splits on Unicode whitespace; every punctuation character
/// becomes a token of its own.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut cur = String::new();
    for ch in text.chars().flat_map(char::to_lowercase) {
        if ch.is_whitespace() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
        } else if ch.is_ascii_punctuation() || (!ch.is_alphanumeric() && !ch.is_whitespace()) {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            out.push(ch.to_string());
        } else {
            cur.push(ch);
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary token {t:?}")));
            }
        }
        for (i, s) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("special token {s} must have id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    /// Token ids of `text`, out-of-vocabulary tokens mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text)
            .iter()
            .map(|t| self.id(t).unwrap_or(UNK))
            .collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Writes `token<TAB>id` lines, specials first.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
        for (i, t) in self.tokens.iter().enumerate() {
            writeln!(f, "{t}\t{i}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn read_tsv(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut tokens = Vec::new();
        for (n, line) in BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let (tok, id) = line
                .split_once('\t')
                .ok_or_else(|| Error::parse(path, n + 1, "expected token<TAB>id"))?;
            let id: usize = id
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, n + 1, format!("bad id {id:?}")))?;
            if id != tokens.len() {
                return Err(Error::parse(path, n + 1, "ids must be dense and ordered"));
            }
            tokens.push(tok.to_string());
        }
        Self::from_tokens(tokens)
    }
}

/// Builds a frequency-ranked vocabulary (ties broken lexicographically).
/// `max_vocab` counts the special tokens.
pub fn build_vocab<I, S>(texts: I, max_vocab: usize, min_freq: usize) -> Result<Vocab>
where
    I: IntoIterator<Item = S>,
    S: AsRef<str>,
{
    if max_vocab <= SPECIAL_TOKENS.len() {
        return Err(Error::Config(format!(
            "max_vocab must exceed the {} special tokens",
            SPECIAL_TOKENS.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for text in texts {
        for tok in tokenize(text.as_ref()) {
            any = true;
            *counts.entry(tok).or_default() += 1;
        }
    }
    if !any {
        return Err(Error::EmptyCorpus);
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, c)| *c >= min_freq.max(1) && !SPECIAL_TOKENS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_vocab - SPECIAL_TOKENS.len());
    let tokens = SPECIAL_TOKENS
        .iter()
        .map(|s| s.to_string())
        .chain(ranked.into_iter().map(|(t, _)| t))
        .collect();
    Vocab::from_tokens(tokens)
}

/// One line of `corpus.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorpusRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub doc_id: Option<String>,
}

impl CorpusRecord {
    pub fn doc_id(&self) -> &str {
        self.doc_id.as_deref().unwrap_or(&self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Passage {
    pub pid: String,
    pub doc_id: String,
    pub position_in_doc: usize,
    /// `[CLS] tokens.. [SEP]`
    pub token_ids: Vec<usize>,
}

impl Passage {
    pub fn new(pid: String, doc_id: String, position_in_doc: usize, body: &[usize]) -> Self {
        let mut token_ids = Vec::with_capacity(body.len() + 2);
        token_ids.push(CLS);
        token_ids.extend_from_slice(body);
        token_ids.push(SEP);
        Self {
            pid,
            doc_id,
            position_in_doc,
            token_ids,
        }
    }

    /// Tokens without the CLS/SEP frame.
    pub fn body(&self) -> &[usize] {
        &self.token_ids[1..self.token_ids.len() - 1]
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PassagePair {
    pub left: Passage,
    pub right: Passage,
}

/// Splits a tokenized document into consecutive non-overlapping windows of
/// `max_span_len` tokens; only the last window may be shorter.
pub fn split_spans(
    doc_id: &str,
    pid_base: &str,
    first_position: usize,
    tokens: &[usize],
    max_span_len: usize,
) -> Result<Vec<Passage>> {
    if max_span_len == 0 {
        return Err(Error::Config("max_span_len must be at least 1".into()));
    }
    let chunks: Vec<&[usize]> = tokens.chunks(max_span_len).collect();
    let single = chunks.len() == 1;
    Ok(chunks
        .into_iter()
        .enumerate()
        .map(|(k, body)| {
            let pid = if single {
                pid_base.to_string()
            } else {
                format!("{pid_base}#{k}")
            };
            Passage::new(pid, doc_id.to_string(), first_position + k, body)
        })
        .collect())
}

/// Neighbouring pairs `(s1,s2), (s2,s3), …` of one document's ordered spans.
pub fn make_pairs(spans: &[Passage]) -> Vec<PassagePair> {
    spans
        .windows(2)
        .filter(|w| w[0].doc_id == w[1].doc_id && w[1].position_in_doc == w[0].position_in_doc + 1)
        .map(|w| PassagePair {
            left: w[0].clone(),
            right: w[1].clone(),
        })
        .collect()
}

/// Result of segmenting a whole corpus.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SegmentedCorpus {
    pub passages: Vec<Passage>,
    pub pairs: Vec<PassagePair>,
    pub dropped_trailing: usize,
}

/// Groups records by `doc_id` (file order), splits every record into spans,
/// numbers spans across the document and collects neighbouring pairs.
pub fn segment_corpus(
    records: &[CorpusRecord],
    vocab: &Vocab,
    max_span_len: usize,
) -> Result<SegmentedCorpus> {
    if records.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut doc_order: Vec<&str> = Vec::new();
    let mut by_doc: HashMap<&str, Vec<&CorpusRecord>> = HashMap::new();
    for r in records {
        let d = r.doc_id();
        by_doc
            .entry(d)
            .or_insert_with(|| {
                doc_order.push(d);
                Vec::new()
            })
            .push(r);
    }

    let mut out = SegmentedCorpus::default();
    for doc in doc_order {
        let mut spans: Vec<Passage> = Vec::new();
        for r in &by_doc[doc] {
            let tokens = vocab.encode(&r.text);
            if tokens.is_empty() {
                continue;
            }
            let mut pieces = split_spans(doc, &r.id, spans.len(), &tokens, max_span_len)?;
            if pieces.len() > 1 && pieces.last().unwrap().body().len() < MIN_TRAILING_SPAN {
                pieces.pop();
                out.dropped_trailing += 1;
            }
            spans.extend(pieces);
        }
        out.pairs.extend(make_pairs(&spans));
        out.passages.extend(spans);
    }
    Ok(out)
}

/// Corpus-level document frequencies and smoothed inverse document frequency
/// `idf(t) = ln((N+1)/(df(t)+1)) + 1`, keyed by token id.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TfIdfTable {
    pub n: usize,
    pub df: BTreeMap<usize, usize>,
    pub idf: BTreeMap<usize, f64>,
}

impl TfIdfTable {
    pub fn smoothed_idf(n: usize, df: usize) -> f64 {
        ((n as f64 + 1.0) / (df as f64 + 1.0)).ln() + 1.0
    }

    /// Table with explicit idf weights (document frequencies left empty).
    pub fn from_idf(n: usize, idf: BTreeMap<usize, f64>) -> Self {
        Self {
            n,
            df: BTreeMap::new(),
            idf,
        }
    }

    pub fn min_idf(&self) -> f64 {
        let min = self.idf.values().copied().fold(f64::INFINITY, f64::min);
        if min.is_finite() {
            min
        } else {
            1.0
        }
    }

    /// idf of `token`; tokens absent from the table get the minimum idf.
    pub fn idf(&self, token: usize) -> f64 {
        self.idf.get(&token).copied().unwrap_or_else(|| self.min_idf())
    }

    /// Per-position weights `tf(t, seq) · idf(t)`; special tokens get 0.
    pub fn position_weights(&self, seq: &[usize]) -> Vec<f64> {
        let mut tf: HashMap<usize, usize> = HashMap::new();
        for &t in seq.iter().filter(|&&t| !is_special(t)) {
            *tf.entry(t).or_default() += 1;
        }
        let min = self.min_idf();
        seq.iter()
            .map(|&t| {
                if is_special(t) {
                    0.0
                } else {
                    tf[&t] as f64 * self.idf.get(&t).copied().unwrap_or(min)
                }
            })
            .collect()
    }

    /// `tf(t, seq) · idf(t)` for one token.
    pub fn weight(&self, token: usize, seq: &[usize]) -> f64 {
        let tf = seq.iter().filter(|&&t| t == token).count();
        tf as f64 * self.idf(token)
    }
}

pub fn compute_tfidf(passages: &[Passage]) -> Result<TfIdfTable> {
    if passages.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut df: BTreeMap<usize, usize> = BTreeMap::new();
    for p in passages {
        let uniq: BTreeSet<usize> = p
            .token_ids
            .iter()
            .copied()
            .filter(|&t| !is_special(t))
            .collect();
        for t in uniq {
            *df.entry(t).or_default() += 1;
        }
    }
    let n = passages.len();
    let idf = df
        .iter()
        .map(|(&t, &d)| (t, TfIdfTable::smoothed_idf(n, d)))
        .collect();
    Ok(TfIdfTable { n, df, idf })
}

/// Pre-generated doc2query queries and LM continuations, per passage id.
/// Sequences are CLS-free; generated queries are joined with SEP.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PlmOutputs {
    pub gen_queries: BTreeMap<String, Vec<usize>>,
    pub gen_continuations: BTreeMap<String, Vec<usize>>,
    pub k_queries: BTreeMap<String, usize>,
}

impl PlmOutputs {
    pub fn is_empty(&self) -> bool {
        self.gen_queries.is_empty() && self.gen_continuations.is_empty()
    }
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenQueriesLine {
    pid: String,
    queries: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct GenContinuationLine {
    pid: String,
    text: String,
}

/// Reads a JSON-lines file, reporting the 1-based line number on failure.
pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::parse(path, n + 1, e.to_string()))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut f = std::io::BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?);
    for item in items {
        serde_json::to_writer(&mut f, item)?;
        f.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    f.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Loads generated queries and continuations. Either file may be absent;
/// a pid may appear in one file and not the other.
pub fn load_plm_outputs(
    gen_queries: Option<&Path>,
    gen_continuations: Option<&Path>,
    vocab: &Vocab,
    known_pids: &BTreeSet<String>,
) -> Result<PlmOutputs> {
    let mut out = PlmOutputs::default();
    let mut unknown = BTreeSet::new();
    if let Some(path) = gen_queries {
        for line in read_jsonl::<GenQueriesLine>(path)? {
            if !known_pids.contains(&line.pid) {
                unknown.insert(line.pid);
                continue;
            }
            if line.queries.is_empty() {
                return Err(Error::EmptyGeneration(line.pid));
            }
            out.k_queries.insert(line.pid.clone(), line.queries.len());
            out.gen_queries
                .insert(line.pid, join_queries(&line.queries, vocab));
        }
    }
    if let Some(path) = gen_continuations {
        for line in read_jsonl::<GenContinuationLine>(path)? {
            if !known_pids.contains(&line.pid) {
                unknown.insert(line.pid);
                continue;
            }
            let ids = vocab.encode(&line.text);
            if ids.is_empty() {
                return Err(Error::EmptyGeneration(line.pid));
            }
            out.gen_continuations.insert(line.pid, ids);
        }
    }
    if !unknown.is_empty() {
        return Err(Error::UnknownPids(unknown.into_iter().collect()));
    }
    Ok(out)
}

/// `q1 [SEP] q2 [SEP] … qk`
pub fn join_queries<S: AsRef<str>>(queries: &[S], vocab: &Vocab) -> Vec<usize> {
    let mut seq = Vec::new();
    for (i, q) in queries.iter().enumerate() {
        if i > 0 {
            seq.push(SEP);
        }
        seq.extend(vocab.encode(q.as_ref()));
    }
    seq
}
