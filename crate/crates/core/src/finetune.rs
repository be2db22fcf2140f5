//! Dual-encoder fine-tuning: contrastive retrievers, hard-negative mining,
//! a cross-encoder reranker and a distilled retriever.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::seq::{IndexedRandom, SliceRandom};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BottleneckModel, DenseVector};
use crate::retrieval::{encode_corpus, evaluate, search_all, DenseIndex, MetricsReport, Qrels, Run};
use crate::rng;
use crate::tensor::{AdamConfig, Gradients, Tape, Tensor, Var};
use crate::textcorpus::{read_jsonl, write_jsonl, Passage, Vocab, CLS, SEP};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Retriever1,
    Retriever2,
    Reranker,
    Distil,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::Retriever1, Stage::Retriever2, Stage::Reranker, Stage::Distil];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Retriever1 => "retriever1",
            Stage::Retriever2 => "retriever2",
            Stage::Reranker => "reranker",
            Stage::Distil => "distil",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::UnknownVariant(format!("stage {s:?}")))
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Encoder the cross-encoder reranker starts from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RerankerInit {
    Pretrained,
    Retriever2,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NegativeSource {
    Lexical,
    Mined,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Contrastive,
    Kd,
}

/// Tunable knobs of one stage. `in_batch` falls back to the stage default
/// (on for contrastive retrievers, off otherwise) when unset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageHyper {
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
    /// Explicit negatives sampled per query per step.
    pub train_negatives: usize,
    pub in_batch: Option<bool>,
    pub warmup_frac: f64,
}

impl Default for StageHyper {
    fn default() -> Self {
        Self {
            epochs: 2,
            lr: 1e-4,
            temperature: 1.0,
            batch_size: 16,
            train_negatives: 1,
            in_batch: None,
            warmup_frac: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StagePlan {
    pub stage: Stage,
    pub negatives: NegativeSource,
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub temperature: f64,
    pub batch_size: usize,
    pub train_negatives: usize,
    pub in_batch: bool,
    pub warmup_frac: f64,
}

impl StagePlan {
    pub fn new(stage: Stage, h: &StageHyper) -> Self {
        let (negatives, loss) = match stage {
            Stage::Retriever1 => (NegativeSource::Lexical, LossKind::Contrastive),
            Stage::Retriever2 | Stage::Reranker => (NegativeSource::Mined, LossKind::Contrastive),
            Stage::Distil => (NegativeSource::Mined, LossKind::Kd),
        };
        let default_in_batch = matches!(stage, Stage::Retriever1 | Stage::Retriever2);
        Self {
            stage,
            negatives,
            loss,
            epochs: h.epochs,
            lr: h.lr,
            temperature: h.temperature,
            batch_size: h.batch_size,
            train_negatives: h.train_negatives,
            in_batch: h.in_batch.unwrap_or(default_in_batch),
            warmup_frac: h.warmup_frac,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("{}: {m}", self.stage)));
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1");
        }
        if self.temperature <= 0.0 || self.lr <= 0.0 {
            return bad("temperature and lr must be positive");
        }
        if self.stage == Stage::Reranker && self.in_batch {
            return bad("in-batch negatives are not defined for the cross-encoder");
        }
        if self.stage != Stage::Retriever1 && self.negatives != NegativeSource::Mined {
            return bad("only retriever1 uses lexical negatives");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub retriever1: StageHyper,
    pub retriever2: StageHyper,
    pub reranker: StageHyper,
    pub distil: StageHyper,
    pub reranker_init: RerankerInit,
    /// Negatives kept per query by lexical selection and by mining.
    pub mine_top_k: usize,
    pub max_query_len: usize,
    pub eval_cutoffs: Vec<usize>,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            retriever1: StageHyper::default(),
            retriever2: StageHyper::default(),
            reranker: StageHyper {
                train_negatives: 3,
                batch_size: 8,
                ..StageHyper::default()
            },
            distil: StageHyper {
                train_negatives: 8,
                ..StageHyper::default()
            },
            reranker_init: RerankerInit::Retriever2,
            mine_top_k: 8,
            max_query_len: 32,
            eval_cutoffs: vec![10, 50, 1000],
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn plan(&self, stage: Stage) -> StagePlan {
        let h = match stage {
            Stage::Retriever1 => &self.retriever1,
            Stage::Retriever2 => &self.retriever2,
            Stage::Reranker => &self.reranker,
            Stage::Distil => &self.distil,
        };
        StagePlan::new(stage, h)
    }

    pub fn validate(&self) -> Result<()> {
        for s in Stage::ALL {
            self.plan(s).validate()?;
        }
        if self.mine_top_k == 0 || self.eval_cutoffs.is_empty() || self.eval_cutoffs.contains(&0) {
            return Err(Error::Config("mine_top_k and eval cutoffs must be >= 1".into()));
        }
        Ok(())
    }
}

/// One line of `train.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QueryRecord {
    pub qid: String,
    pub query: String,
    pub positives: Vec<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub negatives: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_scores: Option<BTreeMap<String, f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingExample {
    pub qid: String,
    /// Query body tokens without CLS/SEP.
    pub query: Vec<usize>,
    pub positives: Vec<String>,
    pub negatives: Vec<String>,
    pub teacher: Option<BTreeMap<String, f64>>,
}

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        if self.query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        if self.positives.is_empty() {
            return Err(Error::Config(format!("query {} has no positives", self.qid)));
        }
        if let Some(p) = self.negatives.iter().find(|n| self.positives.contains(n)) {
            return Err(Error::Config(format!("query {}: {p} is both positive and negative", self.qid)));
        }
        if let Some(t) = &self.teacher {
            if let Some(p) = self.positives.iter().chain(&self.negatives).find(|p| !t.contains_key(*p)) {
                return Err(Error::Config(format!("query {}: no teacher score for {p}", self.qid)));
            }
        }
        Ok(())
    }

    fn candidates(&self) -> Vec<&String> {
        self.positives.iter().chain(&self.negatives).collect()
    }
}

/// `[CLS] q [SEP]`, with the body clipped to `max_len`.
pub fn frame_query(query: &[usize], max_len: usize) -> Vec<usize> {
    let mut seq = Vec::with_capacity(query.len().min(max_len) + 2);
    seq.push(CLS);
    seq.extend_from_slice(&query[..query.len().min(max_len)]);
    seq.push(SEP);
    seq
}

pub fn load_queries(path: &Path, vocab: &Vocab) -> Result<Vec<TrainingExample>> {
    let records: Vec<QueryRecord> = read_jsonl(path)?;
    records
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let ex = TrainingExample {
                qid: r.qid,
                query: vocab.encode(&r.query),
                positives: r.positives,
                negatives: r.negatives,
                teacher: r.teacher_scores,
            };
            ex.validate()
                .map_err(|e| Error::parse(path, i + 1, e.to_string()))?;
            Ok(ex)
        })
        .collect()
}

/// Grade-1 qrels from the positives of each query.
pub fn qrels_from_examples(examples: &[TrainingExample]) -> Qrels {
    examples
        .iter()
        .map(|e| (e.qid.clone(), e.positives.iter().map(|p| (p.clone(), 1)).collect()))
        .collect()
}

/// Passages, training queries and dev queries with judgments.
#[derive(Clone, Debug)]
pub struct FinetuneData {
    pub passages: Vec<Passage>,
    pub train: Vec<TrainingExample>,
    pub dev: Vec<TrainingExample>,
    pub dev_qrels: Qrels,
    by_pid: HashMap<String, usize>,
}

impl FinetuneData {
    pub fn new(passages: Vec<Passage>, train: Vec<TrainingExample>, dev: Vec<TrainingExample>, dev_qrels: Qrels) -> Result<Self> {
        if passages.is_empty() {
            return Err(Error::EmptyPool);
        }
        let by_pid: HashMap<String, usize> = passages.iter().enumerate().map(|(i, p)| (p.pid.clone(), i)).collect();
        let unknown: BTreeSet<String> = train
            .iter()
            .flat_map(|e| e.candidates())
            .filter(|p| !by_pid.contains_key(*p))
            .cloned()
            .collect();
        if !unknown.is_empty() {
            return Err(Error::UnknownPids(unknown.into_iter().collect()));
        }
        Ok(Self {
            passages,
            train,
            dev,
            dev_qrels,
            by_pid,
        })
    }

    pub fn passage(&self, pid: &str) -> Option<&Passage> {
        self.by_pid.get(pid).map(|&i| &self.passages[i])
    }
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// InfoNCE over a score vector: mean over `positives` of
/// `-log softmax(s/τ)` where each positive competes only with the
/// non-positive candidates.
pub fn info_nce(scores: &[f64], positives: &[usize], tau: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    if positives.is_empty() {
        return Err(Error::Config("no positive candidate".into()));
    }
    let negs: Vec<f64> = (0..scores.len())
        .filter(|i| !positives.contains(i))
        .map(|i| scores[i] / tau)
        .collect();
    let mut total = 0.0;
    for &p in positives {
        let mut row = vec![scores[p] / tau];
        row.extend_from_slice(&negs);
        total += log_sum_exp(&row) - scores[p] / tau;
    }
    Ok(total / positives.len() as f64)
}

/// `KL(softmax(teacher/τ) ‖ softmax(student/τ))`. A teacher score of
/// `-inf` marks a candidate with zero target mass.
pub fn kd_loss(student: &[f64], teacher: &[f64], tau: f64) -> Result<f64> {
    if student.len() != teacher.len() {
        return Err(Error::DimMismatch {
            left: student.len(),
            right: teacher.len(),
        });
    }
    if student.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let s: Vec<f64> = student.iter().map(|x| x / tau).collect();
    let t: Vec<f64> = teacher.iter().map(|x| x / tau).collect();
    let (ls, lt) = (log_sum_exp(&s), log_sum_exp(&t));
    Ok(t.iter()
        .zip(&s)
        .filter(|(ti, _)| ti.is_finite())
        .map(|(ti, si)| {
            let log_pt = ti - lt;
            log_pt.exp() * (log_pt - (si - ls))
        })
        .sum::<f64>()
        .max(0.0))
}

/// Contrastive loss of one query against positives, explicit negatives and
/// in-batch passages. Candidates are deduplicated by pid (first occurrence
/// wins) before scoring.
pub fn contrastive_loss(
    model: &BottleneckModel,
    query: &[usize],
    positives: &[&Passage],
    explicit_negs: &[&Passage],
    in_batch: &[&Passage],
    tau: f64,
) -> Result<f64> {
    if query.is_empty() {
        return Err(Error::EmptyQuery);
    }
    let pos_ids: BTreeSet<&str> = positives.iter().map(|p| p.pid.as_str()).collect();
    let mut seen = BTreeSet::new();
    let mut cands = Vec::new();
    for p in positives.iter().chain(explicit_negs).chain(in_batch) {
        if seen.insert(p.pid.as_str()) {
            cands.push(*p);
        }
    }
    if cands.is_empty() {
        return Err(Error::EmptyCandidates);
    }
    let hq = model.embed_sequence(&frame_query(query, model.config().max_positions - 2))?;
    let scores: Vec<f64> = cands
        .iter()
        .map(|p| Ok(crate::model::score(&hq, &model.embed_sequence(&p.token_ids)?)?))
        .collect::<Result<_>>()?;
    let pos_idx: Vec<usize> = (0..cands.len()).filter(|&i| pos_ids.contains(cands[i].pid.as_str())).collect();
    info_nce(&scores, &pos_idx, tau)
}

/// Top-`k` pool passages by number of distinct query tokens they contain,
/// positives excluded, ties broken by pid.
pub fn lexical_negatives(query: &[usize], positives: &[String], passages: &[Passage], k: usize) -> Vec<String> {
    let q: BTreeSet<usize> = query.iter().copied().filter(|&t| !crate::textcorpus::is_special(t)).collect();
    let mut scored: Vec<(usize, &str)> = passages
        .iter()
        .filter(|p| !positives.contains(&p.pid))
        .map(|p| {
            let body: BTreeSet<usize> = p.body().iter().copied().collect();
            (q.intersection(&body).count(), p.pid.as_str())
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(b.1)));
    scored.into_iter().take(k).map(|(_, p)| p.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningRecord {
    pub qid: String,
    pub negatives: Vec<String>,
    /// Judged positives skipped while filling the list.
    pub excluded_positives: usize,
    pub empty: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    pub records: Vec<MiningRecord>,
    pub empty_queries: usize,
}

/// Top-`k` exact-search results per query minus judged positives, filled
/// from further down the ranking so each list has `k` entries when the pool
/// allows.
pub fn mine_hard_negatives(
    model: &BottleneckModel,
    queries: &[TrainingExample],
    pool: &DenseIndex,
    top_k: usize,
    qrels: &Qrels,
    max_query_len: usize,
) -> Result<MiningReport> {
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    pool.check_fingerprint(&model.fingerprint())?;
    let records: Vec<MiningRecord> = queries
        .par_iter()
        .map(|q| {
            let judged: BTreeSet<&str> = qrels
                .get(&q.qid)
                .map(|m| m.iter().filter(|(_, &g)| g >= 1).map(|(p, _)| p.as_str()).collect())
                .unwrap_or_default();
            let pos: BTreeSet<&str> = judged.iter().copied().chain(q.positives.iter().map(|s| s.as_str())).collect();
            let h = model.embed_sequence(&frame_query(&q.query, max_query_len))?;
            let hits = pool.search(&h, top_k + pos.len())?;
            let mut negatives = Vec::new();
            let mut excluded = 0;
            for (pid, _) in hits {
                if negatives.len() == top_k {
                    break;
                }
                if pos.contains(pid.as_str()) {
                    excluded += 1;
                } else {
                    negatives.push(pid);
                }
            }
            Ok(MiningRecord {
                qid: q.qid.clone(),
                empty: negatives.is_empty(),
                negatives,
                excluded_positives: excluded,
            })
        })
        .collect::<Result<_>>()?;
    let empty_queries = records.iter().filter(|r| r.empty).count();
    if empty_queries > 0 {
        warn!("{empty_queries} queries have no mined negatives");
    }
    Ok(MiningReport { records, empty_queries })
}

/// Per-stage summary written to `stage_report.json`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stages: Vec<StageEntry>,
    pub mining_passes: Vec<MiningSummary>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageEntry {
    pub stage: Stage,
    pub artifact: String,
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    /// Dev metrics; retriever stages only.
    pub dev_mrr_at_10: Option<f64>,
    pub dev_summary: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub after: Stage,
    pub queries: usize,
    pub empty_queries: usize,
    pub mean_excluded_positives: f64,
}

impl StageReport {
    pub fn entry(&self, stage: Stage) -> Option<&StageEntry> {
        self.stages.iter().find(|e| e.stage == stage)
    }

    pub fn mrr(&self, stage: Stage) -> Option<f64> {
        self.entry(stage).and_then(|e| e.dev_mrr_at_10)
    }

    /// Replaces any earlier entry for the same stage; keeps stage order.
    pub fn merge_stage(&mut self, entry: StageEntry) {
        self.stages.retain(|e| e.stage != entry.stage);
        self.stages.push(entry);
        self.stages.sort_by_key(|e| e.stage);
    }

    pub fn merge_mining(&mut self, pass: MiningSummary) {
        self.mining_passes.retain(|m| m.after != pass.after);
        self.mining_passes.push(pass);
        self.mining_passes.sort_by_key(|m| m.after);
    }
}

fn apply_negatives(examples: &[TrainingExample], report: &MiningReport) -> Vec<TrainingExample> {
    let by_qid: HashMap<&str, &MiningRecord> = report.records.iter().map(|r| (r.qid.as_str(), r)).collect();
    examples
        .iter()
        .map(|e| TrainingExample {
            negatives: by_qid.get(e.qid.as_str()).map(|r| r.negatives.clone()).unwrap_or_default(),
            teacher: None,
            ..e.clone()
        })
        .collect()
}

struct Encoded {
    tape: Tape,
    h: Var,
}

fn encode_with_tape(model: &BottleneckModel, seq: &[usize]) -> Result<Encoded> {
    let mut tape = Tape::new();
    let pass = model.encode_graph(&mut tape, seq, &[])?;
    Ok(Encoded { tape, h: pass.h })
}

/// One optimizer step's worth of sampled candidates for a query.
struct Sampled<'a> {
    ex: &'a TrainingExample,
    positive: &'a str,
    negatives: Vec<&'a str>,
}

fn sample_for_step<'a>(ex: &'a TrainingExample, plan: &StagePlan, seed: u64, step: usize) -> Sampled<'a> {
    let mut r = rng::stream(seed, &["finetune", plan.stage.name(), &step.to_string(), &ex.qid]);
    let positive = ex.positives.choose(&mut r).map(|s| s.as_str()).unwrap_or_default();
    let negatives: Vec<&str> = if plan.loss == LossKind::Kd {
        // distillation keeps the candidate order of the teacher list
        let mut idx: Vec<usize> = (0..ex.negatives.len()).collect();
        idx.shuffle(&mut r);
        idx.truncate(plan.train_negatives);
        idx.sort_unstable();
        idx.into_iter().map(|i| ex.negatives[i].as_str()).collect()
    } else {
        ex.negatives
            .choose_multiple(&mut r, plan.train_negatives)
            .map(|s| s.as_str())
            .collect()
    };
    Sampled { ex, positive, negatives }
}

/// Shared loop: epochs over shuffled examples, batches of `plan.batch_size`,
/// warmup then constant learning rate. Returns per-step losses.
fn train_loop(
    model: &mut BottleneckModel,
    examples: &[TrainingExample],
    plan: &StagePlan,
    cfg: &FinetuneConfig,
    data: &FinetuneData,
    mut step_fn: impl FnMut(&BottleneckModel, &[Sampled<'_>], &FinetuneData) -> Result<(f64, Vec<Gradients>)>,
) -> Result<Vec<f64>> {
    let batches_per_epoch = examples.len().div_ceil(plan.batch_size);
    let total = batches_per_epoch * plan.epochs;
    let warmup = (plan.warmup_frac * total as f64).ceil() as usize;
    let mut losses = Vec::with_capacity(total);
    let adam = AdamConfig { lr: plan.lr, ..cfg.adam };
    let mut step = 0;
    for epoch in 0..plan.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &["finetune", plan.stage.name(), "epoch", &epoch.to_string()]));
        for chunk in order.chunks(plan.batch_size) {
            let batch: Vec<Sampled<'_>> = chunk
                .iter()
                .map(|&i| sample_for_step(&examples[i], plan, cfg.seed, step))
                .collect();
            let (loss, grads) = step_fn(model, &batch, data)?;
            let store = model.params_mut();
            for g in &grads {
                store.accumulate(g, 1.0);
            }
            let lr = if warmup > 0 && step < warmup {
                plan.lr * (step + 1) as f64 / warmup as f64
            } else {
                plan.lr
            };
            store.adam_step(&adam, lr);
            losses.push(loss);
            step += 1;
        }
        info!(
            "{} epoch {}/{} loss {:.4}",
            plan.stage,
            epoch + 1,
            plan.epochs,
            losses.last().copied().unwrap_or(f64::NAN)
        );
    }
    Ok(losses)
}

/// Row-wise gradients of `loss` with respect to query and passage vectors,
/// pushed back through each encoder tape.
fn backprop_embeddings(encs: Vec<Encoded>, seeds: Vec<Tensor>) -> Result<Vec<Gradients>> {
    encs.into_par_iter()
        .zip(seeds)
        .map(|(mut e, seed)| e.tape.backward_with(e.h, seed))
        .collect()
}

fn dual_encoder_step(
    model: &BottleneckModel,
    batch: &[Sampled<'_>],
    data: &FinetuneData,
    plan: &StagePlan,
    max_query_len: usize,
) -> Result<(f64, Vec<Gradients>)> {
    let d = model.config().hidden;
    // unique passages in first-appearance order
    let mut pids: Vec<&str> = Vec::new();
    let mut slot: HashMap<&str, usize> = HashMap::new();
    for s in batch {
        for p in std::iter::once(s.positive).chain(s.negatives.iter().copied()) {
            if !slot.contains_key(p) {
                slot.insert(p, pids.len());
                pids.push(p);
            }
        }
    }
    let mut seqs: Vec<Vec<usize>> = batch.iter().map(|s| frame_query(&s.ex.query, max_query_len)).collect();
    for p in &pids {
        let passage = data.passage(p).ok_or_else(|| Error::UnknownPids(vec![p.to_string()]))?;
        seqs.push(passage.token_ids.clone());
    }
    let encs: Vec<Encoded> = seqs
        .par_iter()
        .map(|s| encode_with_tape(model, s))
        .collect::<Result<_>>()?;

    let (b, m) = (batch.len(), pids.len());
    let mut qdata = Vec::with_capacity(b * d);
    let mut pdata = Vec::with_capacity(m * d);
    for (i, e) in encs.iter().enumerate() {
        let v = e.tape.value(e.h).data();
        if i < b { qdata.extend_from_slice(v) } else { pdata.extend_from_slice(v) }
    }
    let mut tape = Tape::new();
    let q = tape.input(Tensor::matrix(b, d, qdata)?);
    let p = tape.input(Tensor::matrix(m, d, pdata)?);
    let scores = tape.matmul_nt(q, p)?;
    let scores = tape.scale(scores, 1.0 / plan.temperature);
    let mut per_query = Vec::with_capacity(b);
    for (i, s) in batch.iter().enumerate() {
        let own_pos: BTreeSet<&str> = s.ex.positives.iter().map(|x| x.as_str()).collect();
        let mut cand = vec![slot[s.positive]];
        let mut seen: BTreeSet<usize> = cand.iter().copied().collect();
        let negs = s.negatives.iter().map(|n| slot[n]);
        let others: Vec<usize> = if plan.in_batch {
            (0..m).filter(|&j| !own_pos.contains(pids[j])).collect()
        } else {
            Vec::new()
        };
        for j in negs.chain(others) {
            if seen.insert(j) {
                cand.push(j);
            }
        }
        let flat: Vec<usize> = cand.iter().map(|&j| i * m + j).collect();
        let row = tape.pick(scores, &flat)?;
        let row = tape.reshape(row, &[1, flat.len()])?;
        per_query.push(tape.masked_cross_entropy(row, &[0], &[0])?);
    }
    let loss = mean_of(&mut tape, &per_query)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let seeds = split_rows(&grads, q, p, b, m, d)?;
    Ok((value, backprop_embeddings(encs, seeds)?))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, 1.0 / terms.len() as f64))
}

fn split_rows(grads: &Gradients, q: Var, p: Var, b: usize, m: usize, d: usize) -> Result<Vec<Tensor>> {
    let zero_q = Tensor::zeros(&[b, d]);
    let zero_p = Tensor::zeros(&[m, d]);
    let gq = grads.wrt(q).unwrap_or(&zero_q);
    let gp = grads.wrt(p).unwrap_or(&zero_p);
    let mut seeds = Vec::with_capacity(b + m);
    for i in 0..b {
        seeds.push(Tensor::matrix(1, d, gq.row(i).to_vec())?);
    }
    for j in 0..m {
        seeds.push(Tensor::matrix(1, d, gp.row(j).to_vec())?);
    }
    Ok(seeds)
}

fn kd_step(
    model: &BottleneckModel,
    batch: &[Sampled<'_>],
    data: &FinetuneData,
    plan: &StagePlan,
    max_query_len: usize,
) -> Result<(f64, Vec<Gradients>)> {
    let d = model.config().hidden;
    let mut seqs = Vec::new();
    let mut groups = Vec::with_capacity(batch.len());
    for s in batch {
        let teacher = s
            .ex
            .teacher
            .as_ref()
            .ok_or_else(|| Error::Config(format!("query {} has no teacher scores", s.ex.qid)))?;
        let cands: Vec<&str> = s.ex.positives.iter().map(|x| x.as_str()).chain(s.negatives.iter().copied()).collect();
        let t: Vec<f64> = cands
            .iter()
            .map(|p| teacher.get(*p).copied().ok_or_else(|| Error::Config(format!("no teacher score for {p}"))))
            .collect::<Result<_>>()?;
        seqs.push(frame_query(&s.ex.query, max_query_len));
        let start = seqs.len();
        for p in &cands {
            let passage = data.passage(p).ok_or_else(|| Error::UnknownPids(vec![p.to_string()]))?;
            seqs.push(passage.token_ids.clone());
        }
        groups.push((start - 1, cands, t));
    }
    // leaf index of every passage, in first-appearance order
    let mut leaf_of: Vec<(&str, usize)> = Vec::new();
    for (qi, cands, _) in &groups {
        for (k, p) in cands.iter().enumerate() {
            if !leaf_of.iter().any(|(q, _)| q == p) {
                leaf_of.push((p, qi + 1 + k));
            }
        }
    }
    let encs: Vec<Encoded> = seqs
        .par_iter()
        .map(|s| encode_with_tape(model, s))
        .collect::<Result<_>>()?;
    let mut tape = Tape::new();
    let leaves: Vec<Var> = encs
        .iter()
        .map(|e| {
            let v = e.tape.value(e.h).data().to_vec();
            Ok(tape.input(Tensor::matrix(1, d, v)?))
        })
        .collect::<Result<_>>()?;
    let mut per_query = Vec::with_capacity(groups.len());
    let tau = plan.temperature;
    for (bi, (qi, cands, t)) in groups.iter().enumerate() {
        let mut cols: Vec<Var> = (0..cands.len()).map(|k| leaves[qi + 1 + k]).collect();
        let mut t = t.clone();
        if plan.in_batch {
            // other queries' candidates: student-only, zero teacher mass
            for (p, leaf) in &leaf_of {
                if !cands.contains(p) && !batch[bi].ex.positives.iter().any(|x| x == p) {
                    cols.push(leaves[*leaf]);
                    t.push(f64::NEG_INFINITY);
                }
            }
        }
        let n = cols.len();
        let pm = tape.concat(&cols, 0)?;
        let s = tape.matmul_nt(leaves[*qi], pm)?;
        let s = tape.scale(s, 1.0 / tau);
        let log_q = tape.log_softmax(s)?;
        let ts: Vec<f64> = t.iter().map(|x| x / tau).collect();
        let lt = log_sum_exp(&ts);
        let pt: Vec<f64> = ts.iter().map(|x| (x - lt).exp()).collect();
        let neg_entropy: f64 = pt.iter().zip(&ts).filter(|(p, _)| **p > 0.0).map(|(p, x)| p * (x - lt)).sum();
        let w = tape.constant(Tensor::matrix(1, n, pt)?);
        let cross = tape.mul(w, log_q)?;
        let cross = tape.sum(cross);
        let cross = tape.scale(cross, -1.0);
        let c = tape.constant(Tensor::scalar(neg_entropy));
        per_query.push(tape.add(cross, c)?);
    }
    let loss = mean_of(&mut tape, &per_query)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let zero = Tensor::zeros(&[1, d]);
    let seeds: Vec<Tensor> = leaves.iter().map(|&v| grads.wrt(v).unwrap_or(&zero).clone()).collect();
    Ok((value, backprop_embeddings(encs, seeds)?))
}

fn reranker_step(
    model: &BottleneckModel,
    batch: &[Sampled<'_>],
    data: &FinetuneData,
    max_query_len: usize,
) -> Result<(f64, Vec<Gradients>)> {
    let results: Vec<(f64, Gradients)> = batch
        .par_iter()
        .map(|s| {
            let mut tape = Tape::new();
            let query = &s.ex.query[..s.ex.query.len().min(max_query_len)];
            let mut scores = Vec::with_capacity(1 + s.negatives.len());
            for p in std::iter::once(s.positive).chain(s.negatives.iter().copied()) {
                let passage = data.passage(p).ok_or_else(|| Error::UnknownPids(vec![p.to_string()]))?;
                let sc = model.cross_encode_graph(&mut tape, query, passage.body())?;
                scores.push(tape.reshape(sc, &[1])?);
            }
            let row = tape.concat(&scores, 0)?;
            let n = scores.len();
            let row = tape.reshape(row, &[1, n])?;
            let loss = tape.masked_cross_entropy(row, &[0], &[0])?;
            let scaled = tape.scale(loss, 1.0 / batch.len() as f64);
            let value = tape.value(loss).item();
            Ok((value, tape.backward(scaled)?))
        })
        .collect::<Result<_>>()?;
    let mean = results.iter().map(|r| r.0).sum::<f64>() / results.len() as f64;
    Ok((mean, results.into_iter().map(|r| r.1).collect()))
}

/// Trains a shared-tower retriever from `init` on `examples`.
pub fn train_retriever(
    init: &BottleneckModel,
    examples: &[TrainingExample],
    data: &FinetuneData,
    cfg: &FinetuneConfig,
    stage: Stage,
) -> Result<(BottleneckModel, Vec<f64>)> {
    let plan = cfg.plan(stage);
    plan.validate()?;
    let mut model = init.encoder_only()?;
    let usable: Vec<TrainingExample> = match plan.loss {
        LossKind::Contrastive => examples.to_vec(),
        LossKind::Kd => examples.iter().filter(|e| e.teacher.is_some()).cloned().collect(),
    };
    if usable.is_empty() {
        return Err(Error::NoPairs);
    }
    let mq = cfg.max_query_len;
    let losses = match plan.loss {
        LossKind::Contrastive => train_loop(&mut model, &usable, &plan, cfg, data, |m, b, d| {
            dual_encoder_step(m, b, d, &plan, mq)
        })?,
        LossKind::Kd => train_loop(&mut model, &usable, &plan, cfg, data, |m, b, d| kd_step(m, b, d, &plan, mq))?,
    };
    Ok((model, losses))
}

/// Cross-entropy over cross-encoder scores of one positive and sampled
/// negatives. Queries without negatives are skipped.
pub fn train_reranker(
    init: &BottleneckModel,
    examples: &[TrainingExample],
    data: &FinetuneData,
    cfg: &FinetuneConfig,
) -> Result<(BottleneckModel, Vec<f64>)> {
    let plan = cfg.plan(Stage::Reranker);
    plan.validate()?;
    let usable: Vec<TrainingExample> = examples.iter().filter(|e| !e.negatives.is_empty()).cloned().collect();
    let skipped = examples.len() - usable.len();
    if skipped > 0 {
        warn!("reranker: skipping {skipped} queries without negatives");
    }
    if usable.is_empty() {
        return Err(Error::NoPairs);
    }
    let mut model = init.encoder_only()?;
    model.add_score_head(rng::child_seed(cfg.seed, &["reranker-head"]))?;
    let mq = cfg.max_query_len;
    let losses = train_loop(&mut model, &usable, &plan, cfg, data, |m, b, d| reranker_step(m, b, d, mq))?;
    Ok((model, losses))
}

/// Reranker scores over each query's positives and negatives.
pub fn teacher_scores(reranker: &BottleneckModel, examples: &[TrainingExample], data: &FinetuneData, max_query_len: usize) -> Result<Vec<TrainingExample>> {
    examples
        .par_iter()
        .map(|e| {
            let q = &e.query[..e.query.len().min(max_query_len)];
            let mut t = BTreeMap::new();
            for p in e.candidates() {
                let passage = data.passage(p).ok_or_else(|| Error::UnknownPids(vec![p.clone()]))?;
                t.insert(p.clone(), reranker.cross_encode(q, passage.body())?);
            }
            Ok(TrainingExample {
                teacher: Some(t),
                ..e.clone()
            })
        })
        .collect()
}

/// Reorders the top `depth` passages of each query in `run` by cross-encoder
/// score (ties keep the retriever order); deeper results are dropped.
pub fn rerank_run(
    reranker: &BottleneckModel,
    run: &Run,
    queries: &[TrainingExample],
    data: &FinetuneData,
    depth: usize,
    max_query_len: usize,
) -> Result<Run> {
    let by_qid: HashMap<&str, &TrainingExample> = queries.iter().map(|q| (q.qid.as_str(), q)).collect();
    run.par_iter()
        .map(|(qid, hits)| {
            let q = by_qid.get(qid.as_str()).ok_or_else(|| Error::Config(format!("query {qid} not in run queries")))?;
            let q = &q.query[..q.query.len().min(max_query_len)];
            let mut scored = hits
                .iter()
                .take(depth)
                .map(|(pid, _)| {
                    let p = data.passage(pid).ok_or_else(|| Error::UnknownPids(vec![pid.clone()]))?;
                    Ok((pid.clone(), reranker.cross_encode(q, p.body())?))
                })
                .collect::<Result<Vec<_>>>()?;
            scored.sort_by(|a, b| b.1.total_cmp(&a.1));
            Ok((qid.clone(), scored))
        })
        .collect()
}

/// Query vectors in input order.
pub fn encode_queries(model: &BottleneckModel, queries: &[TrainingExample], max_query_len: usize) -> Result<Vec<(String, DenseVector)>> {
    queries
        .par_iter()
        .map(|q| Ok((q.qid.clone(), model.embed_sequence(&frame_query(&q.query, max_query_len))?)))
        .collect()
}

/// Encodes the pool and dev queries with `model` and evaluates.
pub fn dev_metrics(model: &BottleneckModel, data: &FinetuneData, cfg: &FinetuneConfig) -> Result<(DenseIndex, Run, MetricsReport)> {
    let index = encode_corpus(model, &data.passages)?;
    let queries = encode_queries(model, &data.dev, cfg.max_query_len)?;
    let depth = cfg.eval_cutoffs.iter().copied().max().unwrap_or(10);
    let run = search_all(&index, &queries, depth)?;
    let report = evaluate(&run, &data.dev_qrels, &cfg.eval_cutoffs)?;
    Ok((index, run, report))
}

/// Models available to [`run_stages`] and produced by it.
#[derive(Default)]
pub struct StageModels {
    pub retriever1: Option<BottleneckModel>,
    pub retriever2: Option<BottleneckModel>,
    pub reranker: Option<BottleneckModel>,
    pub distil: Option<BottleneckModel>,
}

impl StageModels {
    pub fn get(&self, stage: Stage) -> Option<&BottleneckModel> {
        match stage {
            Stage::Retriever1 => self.retriever1.as_ref(),
            Stage::Retriever2 => self.retriever2.as_ref(),
            Stage::Reranker => self.reranker.as_ref(),
            Stage::Distil => self.distil.as_ref(),
        }
    }

    fn slot(&mut self, stage: Stage) -> &mut Option<BottleneckModel> {
        match stage {
            Stage::Retriever1 => &mut self.retriever1,
            Stage::Retriever2 => &mut self.retriever2,
            Stage::Reranker => &mut self.reranker,
            Stage::Distil => &mut self.distil,
        }
    }

    fn require(&self, stage: Stage, needed_by: Stage) -> Result<&BottleneckModel> {
        self.get(stage).ok_or_else(|| {
            Error::in_stage(
                needed_by.name(),
                Error::Config(format!("stage {needed_by} needs a trained {stage} model")),
            )
        })
    }

    /// Loads whichever stage checkpoints exist under `dir`.
    pub fn load_existing(dir: &Path) -> Result<Self> {
        let mut out = Self::default();
        for stage in Stage::ALL {
            let d = dir.join(stage.name());
            if d.join("model_config.json").exists() {
                *out.slot(stage) = Some(BottleneckModel::load(&d)?);
            }
        }
        Ok(out)
    }
}

pub struct PipelineOutput {
    pub report: StageReport,
    pub models: StageModels,
}

impl PipelineOutput {
    pub fn retriever(&self, stage: Stage) -> Option<&BottleneckModel> {
        self.models.get(stage)
    }
}

fn with_stage<T>(stage: Stage, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::in_stage(stage.name(), e))
}

fn summarize_mining(after: Stage, r: &MiningReport) -> MiningSummary {
    let n = r.records.len();
    MiningSummary {
        after,
        queries: n,
        empty_queries: r.empty_queries,
        mean_excluded_positives: r.records.iter().map(|x| x.excluded_positives).sum::<usize>() as f64 / n.max(1) as f64,
    }
}

fn stage_entry(stage: Stage, losses: &[f64], dev: Option<&MetricsReport>) -> StageEntry {
    StageEntry {
        stage,
        artifact: stage.name().to_string(),
        steps: losses.len(),
        first_loss: losses.first().copied().unwrap_or(f64::NAN),
        last_loss: losses.last().copied().unwrap_or(f64::NAN),
        dev_mrr_at_10: dev.map(|r| r.mrr(10)),
        dev_summary: dev.map(|r| r.summary()),
    }
}

/// Mines with `model` over the pool and records the pass.
fn mine_pass(
    model: &BottleneckModel,
    after: Stage,
    data: &FinetuneData,
    cfg: &FinetuneConfig,
    report: &mut StageReport,
    out: Option<&Path>,
) -> Result<Vec<TrainingExample>> {
    let index = encode_corpus(model, &data.passages)?;
    let qrels = qrels_from_examples(&data.train);
    let mined = mine_hard_negatives(model, &data.train, &index, cfg.mine_top_k, &qrels, cfg.max_query_len)?;
    report.merge_mining(summarize_mining(after, &mined));
    if let Some(out) = out {
        write_jsonl(&out.join(format!("mining_{}.jsonl", after.name())), &mined.records)?;
    }
    Ok(apply_negatives(&data.train, &mined))
}

/// Runs stages `from..=through` of retriever1 → mine → retriever2 → mine →
/// reranker → distil. Every trained model starts from `pretrained`; models of
/// earlier stages come from `prior`. Artifacts go under `out` when given,
/// and an existing `stage_report.json` there is updated in place.
pub fn run_stages(
    pretrained: &BottleneckModel,
    data: &FinetuneData,
    cfg: &FinetuneConfig,
    from: Stage,
    through: Stage,
    prior: StageModels,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    if from > through {
        return Err(Error::Config(format!("stage range {from}..{through} is empty")));
    }
    let report_path = out.map(|o| o.join("stage_report.json"));
    let mut report = match &report_path {
        Some(p) if p.exists() => {
            let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text)?
        }
        _ => StageReport::default(),
    };
    if let Some(out) = out {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    }
    let mut models = prior;
    // hard negatives mined by retriever2, shared by the reranker and distil
    let mut mined2: Option<Vec<TrainingExample>> = None;

    for stage in Stage::ALL.into_iter().filter(|s| (from..=through).contains(s)) {
        let (model, losses, dev) = match stage {
            Stage::Retriever1 => {
                let lexical: Vec<TrainingExample> = data
                    .train
                    .par_iter()
                    .map(|e| TrainingExample {
                        negatives: lexical_negatives(&e.query, &e.positives, &data.passages, cfg.mine_top_k),
                        teacher: None,
                        ..e.clone()
                    })
                    .collect();
                let (m, losses) = with_stage(stage, train_retriever(pretrained, &lexical, data, cfg, stage))?;
                let (_, _, dev) = with_stage(stage, dev_metrics(&m, data, cfg))?;
                (m, losses, Some(dev))
            }
            Stage::Retriever2 => {
                let r1 = models.require(Stage::Retriever1, stage)?;
                let ex = with_stage(stage, mine_pass(r1, Stage::Retriever1, data, cfg, &mut report, out))?;
                let (m, losses) = with_stage(stage, train_retriever(pretrained, &ex, data, cfg, stage))?;
                let (_, _, dev) = with_stage(stage, dev_metrics(&m, data, cfg))?;
                (m, losses, Some(dev))
            }
            Stage::Reranker => {
                let r2 = models.require(Stage::Retriever2, stage)?;
                let ex = with_stage(stage, mine_pass(r2, Stage::Retriever2, data, cfg, &mut report, out))?;
                let init = match cfg.reranker_init {
                    RerankerInit::Pretrained => pretrained,
                    RerankerInit::Retriever2 => r2,
                };
                let (m, losses) = with_stage(stage, train_reranker(init, &ex, data, cfg))?;
                mined2 = Some(ex);
                (m, losses, None)
            }
            Stage::Distil => {
                let ex = match mined2.take() {
                    Some(ex) => ex,
                    None => {
                        let r2 = models.require(Stage::Retriever2, stage)?;
                        with_stage(stage, mine_pass(r2, Stage::Retriever2, data, cfg, &mut report, out))?
                    }
                };
                let reranker = models.require(Stage::Reranker, stage)?;
                let soft = with_stage(stage, teacher_scores(reranker, &ex, data, cfg.max_query_len))?;
                if let Some(out) = out {
                    let records: Vec<QueryRecord> = soft
                        .iter()
                        .map(|e| QueryRecord {
                            qid: e.qid.clone(),
                            query: String::new(),
                            positives: e.positives.clone(),
                            negatives: e.negatives.clone(),
                            teacher_scores: e.teacher.clone(),
                        })
                        .collect();
                    write_jsonl(&out.join("soft_labels.jsonl"), &records)?;
                }
                let (m, losses) = with_stage(stage, train_retriever(pretrained, &soft, data, cfg, stage))?;
                let (_, _, dev) = with_stage(stage, dev_metrics(&m, data, cfg))?;
                (m, losses, Some(dev))
            }
        };
        if let Some(dev) = &dev {
            info!("{stage}: {}", dev.summary());
        }
        if let Some(out) = out {
            model.save(&out.join(stage.name()), false)?;
        }
        report.merge_stage(stage_entry(stage, &losses, dev.as_ref()));
        *models.slot(stage) = Some(model);
    }

    if let Some(p) = &report_path {
        fs::write(p, serde_json::to_string_pretty(&report)?).map_err(|e| Error::io(p, e))?;
    }
    Ok(PipelineOutput { report, models })
}

/// All stages through `through`, starting from scratch.
pub fn run_pipeline(
    pretrained: &BottleneckModel,
    data: &FinetuneData,
    cfg: &FinetuneConfig,
    through: Stage,
    out: Option<&Path>,
) -> Result<PipelineOutput> {
    run_stages(pretrained, data, cfg, Stage::Retriever1, through, StageModels::default(), out)
}
