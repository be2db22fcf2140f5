//! Synthetic retrieval corpus with planted structure.
//!
//! Topics own concepts; each concept has a document surface form and a
//! query surface form. Documents are runs of spans that mix concepts from a
//! per-document concept set with filler words. Pseudo doc2query outputs use
//! query forms, continuations use the document's concept set, and train/dev
//! queries pick a concept subset that identifies exactly one passage.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::QueryRecord;
use crate::retrieval::{write_qrels, Qrels};
use crate::rng::{self, StreamRng};
use crate::textcorpus::{write_jsonl, CorpusRecord};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub topics: usize,
    pub concepts_per_topic: usize,
    pub concepts_per_doc: usize,
    pub docs: usize,
    pub spans_per_doc: usize,
    pub concepts_per_span: usize,
    pub filler_per_span: usize,
    pub filler_vocab: usize,
    /// Generated queries per passage.
    pub k_queries: usize,
    pub continuation_len: usize,
    pub train_queries: usize,
    pub dev_queries: usize,
    /// Probability that a train/dev query uses a concept's query form.
    pub query_form_prob: f64,
    /// Same, for generated doc2query outputs.
    pub gen_query_form_prob: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            topics: 40,
            concepts_per_topic: 12,
            concepts_per_doc: 6,
            docs: 660,
            spans_per_doc: 3,
            concepts_per_span: 4,
            filler_per_span: 8,
            filler_vocab: 120,
            k_queries: 3,
            continuation_len: 10,
            train_queries: 1500,
            dev_queries: 200,
            query_form_prob: 0.7,
            gen_query_form_prob: 0.9,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenQueries {
    pub pid: String,
    pub queries: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenContinuation {
    pub pid: String,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    /// One record per span; spans of a document share `doc_id`.
    pub records: Vec<CorpusRecord>,
    pub gen_queries: Vec<GenQueries>,
    pub gen_continuations: Vec<GenContinuation>,
    pub train: Vec<QueryRecord>,
    pub dev: Vec<QueryRecord>,
    pub dev_qrels: Qrels,
    /// Document surface forms of every concept.
    pub keywords: BTreeSet<String>,
    pub fillers: Vec<String>,
}

/// Paths written by [`SynthCorpus::write`].
#[derive(Clone, Debug)]
pub struct SynthFiles {
    pub corpus: PathBuf,
    pub gen_queries: PathBuf,
    pub gen_continuations: PathBuf,
    pub train: PathBuf,
    pub dev: PathBuf,
    pub dev_qrels: PathBuf,
}

const ONSETS: [&str; 16] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br"];
const VOWELS: [&str; 6] = ["a", "e", "i", "o", "u", "ai"];

/// Distinct pronounceable pseudo-words.
fn words(n: usize, syllables: usize, used: &mut BTreeSet<String>, r: &mut StreamRng) -> Result<Vec<String>> {
    let capacity = (ONSETS.len() * VOWELS.len()).pow(syllables as u32);
    if used.len() + n > capacity / 2 {
        return Err(Error::Config(format!("cannot draw {n} distinct {syllables}-syllable words")));
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let w: String = (0..syllables)
            .map(|_| format!("{}{}", ONSETS.choose(r).unwrap(), VOWELS.choose(r).unwrap()))
            .collect();
        if used.insert(w.clone()) {
            out.push(w);
        }
    }
    Ok(out)
}

struct Concept {
    doc_form: String,
    query_form: String,
}

struct Span {
    pid: String,
    doc: usize,
    concepts: Vec<usize>,
}

impl SynthCorpus {
    pub fn generate(cfg: &SynthConfig) -> Result<Self> {
        if cfg.concepts_per_span > cfg.concepts_per_doc || cfg.concepts_per_doc > cfg.concepts_per_topic {
            return Err(Error::Config("need concepts_per_span <= concepts_per_doc <= concepts_per_topic".into()));
        }
        if cfg.topics == 0 || cfg.docs == 0 || cfg.spans_per_doc == 0 {
            return Err(Error::Config("synthetic corpus needs topics, docs and spans".into()));
        }
        let mut r = rng::stream(cfg.seed, &["synth", "lexicon"]);
        let mut used = BTreeSet::new();
        let fillers = words(cfg.filler_vocab, 2, &mut used, &mut r)?;
        let n_concepts = cfg.topics * cfg.concepts_per_topic;
        let doc_forms = words(n_concepts, 3, &mut used, &mut r)?;
        let query_forms = words(n_concepts, 3, &mut used, &mut r)?;
        let concepts: Vec<Concept> = doc_forms
            .into_iter()
            .zip(query_forms)
            .map(|(doc_form, query_form)| Concept { doc_form, query_form })
            .collect();

        let mut r = rng::stream(cfg.seed, &["synth", "docs"]);
        let mut records = Vec::new();
        let mut spans: Vec<Span> = Vec::new();
        let mut doc_sets: Vec<Vec<usize>> = Vec::new();
        for d in 0..cfg.docs {
            let topic = d % cfg.topics;
            let base = topic * cfg.concepts_per_topic;
            let mut pool: Vec<usize> = (base..base + cfg.concepts_per_topic).collect();
            pool.shuffle(&mut r);
            pool.truncate(cfg.concepts_per_doc);
            let doc_id = format!("d{d:04}");
            for s in 0..cfg.spans_per_doc {
                let chosen: Vec<usize> = pool.choose_multiple(&mut r, cfg.concepts_per_span).copied().collect();
                let mut tokens: Vec<&str> = chosen.iter().map(|&c| concepts[c].doc_form.as_str()).collect();
                tokens.extend((0..cfg.filler_per_span).map(|_| fillers.choose(&mut r).unwrap().as_str()));
                tokens.shuffle(&mut r);
                let pid = format!("{doc_id}-{s}");
                records.push(CorpusRecord {
                    id: pid.clone(),
                    text: tokens.join(" "),
                    doc_id: Some(doc_id.clone()),
                });
                spans.push(Span {
                    pid,
                    doc: d,
                    concepts: chosen,
                });
            }
            doc_sets.push(pool);
        }

        let mut r = rng::stream(cfg.seed, &["synth", "plm"]);
        let surface = |c: usize, p: f64, r: &mut StreamRng| -> String {
            if r.random_bool(p) {
                concepts[c].query_form.clone()
            } else {
                concepts[c].doc_form.clone()
            }
        };
        let mut gen_queries = Vec::new();
        let mut gen_continuations = Vec::new();
        for s in &spans {
            let queries = (0..cfg.k_queries)
                .map(|_| {
                    let n = r.random_range(2..=3.min(s.concepts.len()).max(2)).min(s.concepts.len());
                    s.concepts
                        .choose_multiple(&mut r, n)
                        .map(|&c| surface(c, cfg.gen_query_form_prob, &mut r))
                        .collect::<Vec<_>>()
                        .join(" ")
                })
                .collect();
            gen_queries.push(GenQueries {
                pid: s.pid.clone(),
                queries,
            });
            let doc = &doc_sets[s.doc];
            let text: Vec<String> = (0..cfg.continuation_len)
                .map(|i| {
                    if i % 2 == 0 {
                        concepts[*doc.choose(&mut r).unwrap()].doc_form.clone()
                    } else {
                        fillers.choose(&mut r).unwrap().clone()
                    }
                })
                .collect();
            gen_continuations.push(GenContinuation {
                pid: s.pid.clone(),
                text: text.join(" "),
            });
        }

        // passages containing a given concept set
        let sets: Vec<BTreeSet<usize>> = spans.iter().map(|s| s.concepts.iter().copied().collect()).collect();
        let unique = |q: &BTreeSet<usize>| sets.iter().filter(|s| q.is_subset(s)).count() == 1;
        let mut r = rng::stream(cfg.seed, &["synth", "queries"]);
        let mut order: Vec<usize> = (0..spans.len()).collect();
        order.shuffle(&mut r);
        let mut train = Vec::new();
        let mut dev = Vec::new();
        let wanted = cfg.train_queries + cfg.dev_queries;
        for &i in &order {
            if train.len() + dev.len() == wanted {
                break;
            }
            let s = &spans[i];
            let mut found = None;
            for _ in 0..20 {
                let n = if s.concepts.len() >= 3 { 3 } else { s.concepts.len() };
                let q: BTreeSet<usize> = s.concepts.choose_multiple(&mut r, n).copied().collect();
                if unique(&q) {
                    found = Some(q);
                    break;
                }
            }
            let Some(q) = found else { continue };
            let mut toks: Vec<String> = q.iter().map(|&c| surface(c, cfg.query_form_prob, &mut r)).collect();
            toks.shuffle(&mut r);
            toks.insert(0, fillers.choose(&mut r).unwrap().clone());
            let is_dev = dev.len() < cfg.dev_queries && (train.len() >= cfg.train_queries || (train.len() + dev.len()) % 3 == 2);
            let rec = QueryRecord {
                qid: String::new(),
                query: toks.join(" "),
                positives: vec![s.pid.clone()],
                negatives: Vec::new(),
                teacher_scores: None,
            };
            if is_dev {
                dev.push(QueryRecord {
                    qid: format!("dev{:04}", dev.len()),
                    ..rec
                });
            } else {
                train.push(QueryRecord {
                    qid: format!("train{:04}", train.len()),
                    ..rec
                });
            }
        }
        let dev_qrels: Qrels = dev
            .iter()
            .map(|q| (q.qid.clone(), q.positives.iter().map(|p| (p.clone(), 1)).collect::<BTreeMap<_, _>>()))
            .collect();
        Ok(Self {
            records,
            gen_queries,
            gen_continuations,
            train,
            dev,
            dev_qrels,
            keywords: concepts.iter().map(|c| c.doc_form.clone()).collect(),
            fillers,
        })
    }

    pub fn write(&self, dir: &Path) -> Result<SynthFiles> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let files = SynthFiles {
            corpus: dir.join("corpus.jsonl"),
            gen_queries: dir.join("gen_queries.jsonl"),
            gen_continuations: dir.join("gen_continuations.jsonl"),
            train: dir.join("train.jsonl"),
            dev: dir.join("dev.jsonl"),
            dev_qrels: dir.join("dev_qrels.tsv"),
        };
        write_jsonl(&files.corpus, &self.records)?;
        write_jsonl(&files.gen_queries, &self.gen_queries)?;
        write_jsonl(&files.gen_continuations, &self.gen_continuations)?;
        write_jsonl(&files.train, &self.train)?;
        write_jsonl(&files.dev, &self.dev)?;
        write_qrels(&files.dev_qrels, &self.dev_qrels)?;
        Ok(files)
    }
}
