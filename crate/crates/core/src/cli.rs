//! Command-line workflow: prepare, pretrain, finetune, encode, search, eval,
//! ablate, plus `synth` for the synthetic retrieval corpus.
//!
//! Each command is also exposed as a plain function so that examples and
//! tests can drive the same code path without spawning a process.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{AblationSpec, RunConfig};
use crate::error::{Error, Result};
use crate::finetune::{
    encode_queries, load_queries, qrels_from_examples, run_pipeline, run_stages, FinetuneData, PipelineOutput, Stage,
    StageModels, TrainingExample,
};
use crate::masking::Task;
use crate::model::BottleneckModel;
use crate::pretrain::{PretrainConfig, PretrainData, Pretrainer};
use crate::retrieval::{
    encode_corpus, evaluate, read_qrels, read_run, search_all, write_run, DenseIndex, MetricsReport, Qrels,
};
use crate::synth::{SynthConfig, SynthCorpus};
use crate::textcorpus::{
    build_vocab, compute_tfidf, load_plm_outputs, read_jsonl, segment_corpus, write_jsonl, CorpusRecord, Passage,
    PassagePair, PlmOutputs, TfIdfTable, Vocab,
};

pub const VOCAB_FILE: &str = "vocab.tsv";
pub const PASSAGES_FILE: &str = "passages.jsonl";
pub const PAIRS_FILE: &str = "pairs.jsonl";
pub const TFIDF_FILE: &str = "tfidf.json";
pub const PLM_FILE: &str = "plm.json";
pub const HASHES_FILE: &str = "hashes.json";
pub const PREPARE_REPORT_FILE: &str = "prepare_report.json";
pub const ABLATION_CSV: &str = "ablation.csv";

#[derive(Debug, Parser)]
#[command(name = "mtmae", version, about = "Bottlenecked multi-task pre-training and dense retrieval")]
pub struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Output location of the command; defaults under `paths.work_dir`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Writes the synthetic retrieval corpus and a config that points at it.
    Synth(SynthArgs),
    /// Builds vocabulary, spans, pairs, TF-IDF and generated-text bindings.
    Prepare(PrepareArgs),
    /// Multi-task pre-training.
    Pretrain(PretrainArgs),
    /// Fine-tuning stages.
    Finetune(FinetuneArgs),
    /// Encodes the passage pool into a dense index.
    Encode(EncodeArgs),
    /// Exact top-k search for a query file; writes a TREC run.
    Search(SearchArgs),
    /// Scores a TREC run against qrels.
    Eval(EvalArgs),
    /// Pre-trains and fine-tunes each ablation variant and tabulates dev metrics.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Generator settings (JSON); defaults when omitted.
    #[arg(long)]
    pub synth_config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub gen_queries: Option<PathBuf>,
    #[arg(long)]
    pub gen_continuations: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Prepared artifacts; defaults to `<work_dir>/prepared`.
    #[arg(long)]
    pub prepared: Option<PathBuf>,
    /// Pairs file overriding the prepared one.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Continue from a checkpoint directory written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    /// retriever1 | retriever2 | reranker | distil | all
    #[arg(long, default_value = "all")]
    pub stage: String,
    /// Pre-trained checkpoint; defaults to `<work_dir>/pretrain/final`.
    #[arg(long)]
    pub pretrained: Option<PathBuf>,
    #[arg(long)]
    pub prepared: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EncodeArgs {
    /// Retriever checkpoint; defaults to the latest fine-tuned retriever.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[arg(long)]
    pub prepared: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long, default_value_t = 1000)]
    pub k: usize,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Index directory; defaults to `<work_dir>/index`.
    #[arg(long)]
    pub index: Option<PathBuf>,
    /// Query file in train.jsonl format; defaults to the dev queries.
    #[arg(long)]
    pub queries: Option<PathBuf>,
    #[arg(long)]
    pub prepared: Option<PathBuf>,
    #[arg(long, default_value = "mtmae")]
    pub tag: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run file; defaults to `<work_dir>/runs/dev.trec`.
    #[arg(long)]
    pub run: Option<PathBuf>,
    /// Qrels; defaults to `paths.dev_qrels` or the dev positives.
    #[arg(long)]
    pub qrels: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "10,50,1000")]
    pub cutoffs: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// Comma-separated variants; defaults to `ablation.variants`.
    #[arg(long, value_delimiter = ',')]
    pub variants: Option<Vec<String>>,
    #[arg(long)]
    pub prepared: Option<PathBuf>,
}

/// Parses arguments, runs the command and maps errors to a single
/// `error[CODE]: message` line. Returns the process exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MASTER_LOG", "info"))
        .format_timestamp(None)
        .init();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error[{}]: {}", e.code(), e.to_string().replace('\n', " "));
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    let out = cli.out.as_deref();
    match cli.command {
        Command::Synth(a) => {
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| PathBuf::from("synth"));
            let mut sc = match &a.synth_config {
                Some(p) => {
                    let text = fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                    serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
                }
                None => SynthConfig::default(),
            };
            sc.seed = cfg.seed;
            cmd_synth(&sc, &dir)?;
        }
        Command::Prepare(a) => {
            if let Some(p) = a.corpus {
                cfg.paths.corpus = p;
            }
            if a.gen_queries.is_some() {
                cfg.paths.gen_queries = a.gen_queries;
            }
            if a.gen_continuations.is_some() {
                cfg.paths.gen_continuations = a.gen_continuations;
            }
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.prepared_dir());
            let report = cmd_prepare(&cfg, &dir)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
        }
        Command::Pretrain(a) => {
            let prepared = a.prepared.unwrap_or_else(|| cfg.paths.prepared_dir());
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.pretrain_dir());
            let mut art = Prepared::load(&prepared)?;
            if let Some(p) = &a.pairs {
                art.pairs = read_pairs(p, &art.passages)?;
            }
            let trainer = cmd_pretrain(&cfg, &art, &dir, a.resume.as_deref())?;
            if let Some(l) = trainer.history().last() {
                println!("step {} l_total {:.6}", trainer.step(), l.l_total);
            }
        }
        Command::Finetune(a) => {
            let prepared = a.prepared.unwrap_or_else(|| cfg.paths.prepared_dir());
            let pretrained = a.pretrained.unwrap_or_else(|| cfg.paths.pretrain_dir().join("final"));
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.finetune_dir());
            let (from, through) = match a.stage.as_str() {
                "all" => (Stage::Retriever1, Stage::Distil),
                s => {
                    let st = Stage::parse(s)?;
                    (st, st)
                }
            };
            let art = Prepared::load(&prepared)?;
            let res = cmd_finetune(&cfg, &art, &pretrained, from, through, &dir)?;
            for e in &res.report.stages {
                println!("{}: {}", e.stage, e.dev_summary.as_deref().unwrap_or("trained"));
            }
        }
        Command::Encode(a) => {
            let prepared = a.prepared.unwrap_or_else(|| cfg.paths.prepared_dir());
            let model_dir = resolve_model(&cfg, a.model)?;
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.work_dir.join("index"));
            let art = Prepared::load(&prepared)?;
            let index = cmd_encode(&cfg, &art, &model_dir, &dir)?;
            println!("{} passages, dim {}, fingerprint {}", index.len(), index.dim(), index.fingerprint());
        }
        Command::Search(a) => {
            let prepared = a.prepared.unwrap_or_else(|| cfg.paths.prepared_dir());
            let model_dir = resolve_model(&cfg, a.model)?;
            let index_dir = a.index.unwrap_or_else(|| cfg.paths.work_dir.join("index"));
            let queries = a.queries.unwrap_or_else(|| cfg.paths.dev.clone());
            let path = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.work_dir.join("runs").join("dev.trec"));
            let vocab = Vocab::read_tsv(&prepared.join(VOCAB_FILE))?;
            let n = cmd_search(&cfg, &vocab, &model_dir, &index_dir, &queries, a.k, &a.tag, &path)?;
            println!("{n} queries -> {}", path.display());
        }
        Command::Eval(a) => {
            let run = a.run.unwrap_or_else(|| cfg.paths.work_dir.join("runs").join("dev.trec"));
            let dir = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| run.parent().map(Path::to_path_buf).unwrap_or_default());
            let qrels = match a.qrels.or_else(|| cfg.paths.dev_qrels.clone()) {
                Some(p) => read_qrels(&p)?,
                None => {
                    let vocab = Vocab::read_tsv(&cfg.paths.prepared_dir().join(VOCAB_FILE))?;
                    qrels_from_examples(&load_queries(&cfg.paths.dev, &vocab)?)
                }
            };
            let report = cmd_eval(&cfg, &run, &qrels, &a.cutoffs, &dir)?;
            println!("{}", report.summary());
        }
        Command::Ablate(a) => {
            let prepared = a.prepared.unwrap_or_else(|| cfg.paths.prepared_dir());
            let dir = out.map(Path::to_path_buf).unwrap_or_else(|| cfg.paths.work_dir.join("ablation"));
            let variants = match a.variants {
                Some(v) => v.iter().map(|s| AblationSpec::parse(s.trim())).collect::<Result<Vec<_>>>()?,
                None => cfg.ablation.variants.clone(),
            };
            let art = Prepared::load(&prepared)?;
            let rows = cmd_ablate(&cfg, &art, &variants, &dir)?;
            print!("{}", ablation_csv(&rows, &cfg.finetune.eval_cutoffs));
        }
    }
    Ok(())
}

fn resolve_model(cfg: &RunConfig, explicit: Option<PathBuf>) -> Result<PathBuf> {
    if let Some(p) = explicit {
        return Ok(p);
    }
    let ft = cfg.paths.finetune_dir();
    [Stage::Distil, Stage::Retriever2, Stage::Retriever1]
        .into_iter()
        .map(|s| ft.join(s.name()))
        .find(|d| d.join("model_config.json").exists())
        .ok_or_else(|| Error::Config(format!("no fine-tuned retriever under {}; pass --model", ft.display())))
}

fn sha256_file(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line(), e.to_string()))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// Writes the synthetic corpus into `dir` plus a `config.json` whose paths
/// point at it.
pub fn cmd_synth(sc: &SynthConfig, dir: &Path) -> Result<RunConfig> {
    let corpus = SynthCorpus::generate(sc)?;
    let files = corpus.write(dir)?;
    let name = |p: &Path| PathBuf::from(p.file_name().unwrap());
    let mut cfg = RunConfig {
        seed: sc.seed,
        ..RunConfig::synthetic()
    };
    cfg.paths.corpus = name(&files.corpus);
    cfg.paths.gen_queries = Some(name(&files.gen_queries));
    cfg.paths.gen_continuations = Some(name(&files.gen_continuations));
    cfg.paths.train = name(&files.train);
    cfg.paths.dev = name(&files.dev);
    cfg.paths.dev_qrels = Some(name(&files.dev_qrels));
    write_json(&dir.join("config.json"), &cfg)?;
    write_json(&dir.join("synth_config.json"), sc)?;
    info!(
        "synthetic corpus: {} spans, {} train / {} dev queries in {}",
        corpus.records.len(),
        corpus.train.len(),
        corpus.dev.len(),
        dir.display()
    );
    Ok(cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub records: usize,
    pub passages: usize,
    pub pairs: usize,
    pub dropped_trailing_spans: usize,
    pub vocab_size: usize,
    pub gen_queries: usize,
    pub gen_continuations: usize,
    /// False when neither generated-text file was available.
    pub por_available: bool,
    pub warnings: Vec<String>,
    pub hashes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct PairRef {
    left: String,
    right: String,
}

/// Artifacts written by [`cmd_prepare`].
#[derive(Clone, Debug)]
pub struct Prepared {
    pub vocab: Vocab,
    pub passages: Vec<Passage>,
    pub pairs: Vec<PassagePair>,
    pub tfidf: TfIdfTable,
    pub plm: PlmOutputs,
}

impl Prepared {
    pub fn load(dir: &Path) -> Result<Self> {
        let vocab = Vocab::read_tsv(&dir.join(VOCAB_FILE))?;
        let passages: Vec<Passage> = read_jsonl(&dir.join(PASSAGES_FILE))?;
        let pairs = read_pairs(&dir.join(PAIRS_FILE), &passages)?;
        let tfidf = read_json(&dir.join(TFIDF_FILE))?;
        let plm = read_json(&dir.join(PLM_FILE))?;
        Ok(Self {
            vocab,
            passages,
            pairs,
            tfidf,
            plm,
        })
    }
}

fn read_pairs(path: &Path, passages: &[Passage]) -> Result<Vec<PassagePair>> {
    let by_pid: BTreeMap<&str, &Passage> = passages.iter().map(|p| (p.pid.as_str(), p)).collect();
    let refs: Vec<PairRef> = read_jsonl(path)?;
    let mut unknown = BTreeSet::new();
    let mut out = Vec::with_capacity(refs.len());
    for r in refs {
        match (by_pid.get(r.left.as_str()), by_pid.get(r.right.as_str())) {
            (Some(l), Some(rt)) => out.push(PassagePair {
                left: (*l).clone(),
                right: (*rt).clone(),
            }),
            _ => {
                unknown.insert(r.left);
                unknown.insert(r.right);
            }
        }
    }
    unknown.retain(|p| !by_pid.contains_key(p.as_str()));
    if !unknown.is_empty() {
        return Err(Error::UnknownPids(unknown.into_iter().collect()));
    }
    Ok(out)
}

/// Configured generated-text file, or `None` with a warning when it is
/// unset or missing.
fn optional_input(path: &Option<PathBuf>, what: &str, warnings: &mut Vec<String>) -> Option<PathBuf> {
    match path {
        Some(p) if p.exists() => Some(p.clone()),
        Some(p) => {
            warnings.push(format!("{what} file {} not found", p.display()));
            None
        }
        None => None,
    }
}

pub fn cmd_prepare(cfg: &RunConfig, dir: &Path) -> Result<PrepareReport> {
    cfg.validate()?;
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    let mut warnings = Vec::new();
    let records: Vec<CorpusRecord> = read_jsonl(&cfg.paths.corpus)?;
    let gq = optional_input(&cfg.paths.gen_queries, "generated queries", &mut warnings);
    let gc = optional_input(&cfg.paths.gen_continuations, "generated continuations", &mut warnings);

    // vocabulary over every text the model will see
    let mut texts: Vec<String> = records.iter().map(|r| r.text.clone()).collect();
    if let Some(p) = &gq {
        #[derive(Deserialize)]
        struct Line {
            queries: Vec<String>,
        }
        for l in read_jsonl::<serde_json::Value>(p)? {
            if let Ok(l) = serde_json::from_value::<Line>(l) {
                texts.extend(l.queries);
            }
        }
    }
    if let Some(p) = &gc {
        #[derive(Deserialize)]
        struct Line {
            text: String,
        }
        for l in read_jsonl::<serde_json::Value>(p)? {
            if let Ok(l) = serde_json::from_value::<Line>(l) {
                texts.push(l.text);
            }
        }
    }
    if cfg.paths.train.exists() {
        texts.extend(read_jsonl::<crate::finetune::QueryRecord>(&cfg.paths.train)?.into_iter().map(|q| q.query));
    }
    let vocab = build_vocab(&texts, cfg.data.max_vocab, cfg.data.min_freq)?;
    let seg = segment_corpus(&records, &vocab, cfg.data.max_span_len)?;
    if seg.pairs.is_empty() {
        warnings.push("no pairs".to_string());
    }
    let tfidf = compute_tfidf(&seg.passages)?;
    let known: BTreeSet<String> = seg.passages.iter().map(|p| p.pid.clone()).collect();
    let plm = load_plm_outputs(gq.as_deref(), gc.as_deref(), &vocab, &known)?;
    let por_available = !plm.is_empty();
    if !por_available {
        warnings.push("no generated texts; POR unavailable".to_string());
    }
    for w in &warnings {
        warn!("{w}");
    }

    vocab.write_tsv(&dir.join(VOCAB_FILE))?;
    write_jsonl(&dir.join(PASSAGES_FILE), &seg.passages)?;
    let refs: Vec<PairRef> = seg
        .pairs
        .iter()
        .map(|p| PairRef {
            left: p.left.pid.clone(),
            right: p.right.pid.clone(),
        })
        .collect();
    write_jsonl(&dir.join(PAIRS_FILE), &refs)?;
    write_json(&dir.join(TFIDF_FILE), &tfidf)?;
    write_json(&dir.join(PLM_FILE), &plm)?;
    let mut hashes = BTreeMap::new();
    for f in [VOCAB_FILE, PASSAGES_FILE, PAIRS_FILE, TFIDF_FILE, PLM_FILE] {
        hashes.insert(f.to_string(), sha256_file(&dir.join(f))?);
    }
    write_json(&dir.join(HASHES_FILE), &hashes)?;
    let report = PrepareReport {
        records: records.len(),
        passages: seg.passages.len(),
        pairs: seg.pairs.len(),
        dropped_trailing_spans: seg.dropped_trailing,
        vocab_size: vocab.len(),
        gen_queries: plm.gen_queries.len(),
        gen_continuations: plm.gen_continuations.len(),
        por_available,
        warnings,
        hashes,
    };
    write_json(&dir.join(PREPARE_REPORT_FILE), &report)?;
    Ok(report)
}

/// Pre-training configuration for prepared artifacts; POR tasks are dropped
/// from the trained set when no generated texts exist.
pub fn pretrain_config_for(cfg: &RunConfig, art: &Prepared) -> PretrainConfig {
    let mut pc = cfg.pretrain_config(art.vocab.len());
    if art.plm.is_empty() {
        pc.tasks.retain(|t| !matches!(t, Task::Dor | Task::Gor));
    }
    pc
}

pub fn cmd_pretrain(cfg: &RunConfig, art: &Prepared, dir: &Path, resume: Option<&Path>) -> Result<Pretrainer> {
    cfg.validate()?;
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    pretrain_with(pretrain_config_for(cfg, art), art, dir, resume)
}

fn pretrain_with(pc: PretrainConfig, art: &Prepared, dir: &Path, resume: Option<&Path>) -> Result<Pretrainer> {
    let data = PretrainData::new(art.pairs.clone(), art.plm.clone(), art.tfidf.clone(), pc.model.max_positions)?;
    let mut trainer = match resume {
        Some(r) => Pretrainer::resume(r, pc)?,
        None => Pretrainer::new(pc)?,
    };
    trainer.run(&data, Some(dir))?;
    Ok(trainer)
}

/// Passages plus train/dev queries encoded with the prepared vocabulary.
pub fn finetune_data(cfg: &RunConfig, art: &Prepared) -> Result<FinetuneData> {
    let train = load_queries(&cfg.paths.train, &art.vocab)?;
    let dev = load_queries(&cfg.paths.dev, &art.vocab)?;
    let qrels = match &cfg.paths.dev_qrels {
        Some(p) => read_qrels(p)?,
        None => qrels_from_examples(&dev),
    };
    FinetuneData::new(art.passages.clone(), train, dev, qrels)
}

pub fn cmd_finetune(
    cfg: &RunConfig,
    art: &Prepared,
    pretrained: &Path,
    from: Stage,
    through: Stage,
    dir: &Path,
) -> Result<PipelineOutput> {
    cfg.validate()?;
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    let model = BottleneckModel::load(pretrained)?;
    let data = finetune_data(cfg, art)?;
    let fc = cfg.finetune_config();
    if from == Stage::Retriever1 {
        run_pipeline(&model, &data, &fc, through, Some(dir))
    } else {
        let prior = StageModels::load_existing(dir)?;
        run_stages(&model, &data, &fc, from, through, prior, Some(dir))
    }
}

pub fn cmd_encode(cfg: &RunConfig, art: &Prepared, model_dir: &Path, dir: &Path) -> Result<DenseIndex> {
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    let model = BottleneckModel::load(model_dir)?;
    let index = encode_corpus(&model, &art.passages)?;
    index.save(dir)?;
    Ok(index)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_search(
    cfg: &RunConfig,
    vocab: &Vocab,
    model_dir: &Path,
    index_dir: &Path,
    queries: &Path,
    k: usize,
    tag: &str,
    run_path: &Path,
) -> Result<usize> {
    if k == 0 {
        return Err(Error::Config("--k must be at least 1".into()));
    }
    let parent = run_path.parent().unwrap_or(Path::new("."));
    ensure_dir(parent)?;
    cfg.echo(parent)?;
    let model = BottleneckModel::load(model_dir)?;
    let index = DenseIndex::load(index_dir)?;
    index.check_fingerprint(&model.fingerprint())?;
    let qs: Vec<TrainingExample> = load_queries(queries, vocab)?;
    let vectors = encode_queries(&model, &qs, cfg.finetune.max_query_len)?;
    let run = search_all(&index, &vectors, k)?;
    write_run(run_path, &run, tag)?;
    Ok(run.len())
}

pub fn cmd_eval(cfg: &RunConfig, run_path: &Path, qrels: &Qrels, cutoffs: &[usize], dir: &Path) -> Result<MetricsReport> {
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    let run = read_run(run_path)?;
    let report = evaluate(&run, qrels, cutoffs)?;
    write_json(&dir.join("metrics.json"), &report)?;
    Ok(report)
}

/// One line of the ablation table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: AblationSpec,
    pub stage: Stage,
    pub mrr_at_10: f64,
    pub recall: BTreeMap<usize, f64>,
    pub ndcg_at_10: f64,
}

pub fn ablation_csv(rows: &[AblationRow], cutoffs: &[usize]) -> String {
    let mut s = String::from("variant,stage,mrr@10");
    for k in cutoffs {
        let _ = write!(s, ",recall@{k}");
    }
    s.push_str(",ndcg@10\n");
    for r in rows {
        let _ = write!(s, "{},{},{:.6}", r.variant, r.stage, r.mrr_at_10);
        for k in cutoffs {
            let _ = write!(s, ",{:.6}", r.recall.get(k).copied().unwrap_or(f64::NAN));
        }
        let _ = writeln!(s, ",{:.6}", r.ndcg_at_10);
    }
    s
}

/// Pre-trains `variant` into `dir/pretrain`, fine-tunes through
/// `cfg.ablation.through` into `dir/finetune` and evaluates the last
/// retriever on dev.
pub fn ablation_row(cfg: &RunConfig, art: &Prepared, data: &FinetuneData, variant: AblationSpec, dir: &Path) -> Result<AblationRow> {
    let fc = cfg.finetune_config();
    let through = cfg.ablation.through;
    let mut pc = variant.apply(&pretrain_config_for(cfg, art));
    if art.plm.is_empty() {
        pc.tasks.retain(|t| !matches!(t, Task::Dor | Task::Gor));
    }
    let trainer = pretrain_with(pc, art, &dir.join("pretrain"), None)?;
    let out = run_pipeline(&trainer.model, data, &fc, through, Some(&dir.join("finetune")))?;
    let retriever = [Stage::Distil, Stage::Retriever2, Stage::Retriever1]
        .into_iter()
        .find(|s| *s <= through && out.retriever(*s).is_some())
        .expect("pipeline yields retriever1");
    let (_, _, report) = crate::finetune::dev_metrics(out.retriever(retriever).unwrap(), data, &fc)?;
    Ok(AblationRow {
        variant,
        stage: retriever,
        mrr_at_10: report.mrr(10),
        recall: fc.eval_cutoffs.iter().map(|&k| (k, report.recall(k))).collect(),
        ndcg_at_10: report.ndcg(10),
    })
}

/// Pre-trains each variant, fine-tunes through `ablation.through`, and
/// writes `ablation.csv` under `dir` (per-variant artifacts in
/// `dir/<variant>/`).
pub fn cmd_ablate(cfg: &RunConfig, art: &Prepared, variants: &[AblationSpec], dir: &Path) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    ensure_dir(dir)?;
    cfg.echo(dir)?;
    let data = finetune_data(cfg, art)?;
    let mut rows = Vec::with_capacity(variants.len());
    for &v in variants {
        info!("ablation variant {v}");
        rows.push(ablation_row(cfg, art, &data, v, &dir.join(v.name()))?);
    }
    let path = dir.join(ABLATION_CSV);
    fs::write(&path, ablation_csv(&rows, &cfg.finetune.eval_cutoffs)).map_err(|e| Error::io(&path, e))?;
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_corpus(dir: &Path, records: &[CorpusRecord]) -> RunConfig {
        write_jsonl(&dir.join("corpus.jsonl"), records).unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = dir.join("corpus.jsonl");
        cfg.paths.train = dir.join("train.jsonl");
        cfg.paths.dev = dir.join("dev.jsonl");
        cfg.paths.work_dir = dir.join("work");
        cfg
    }

    #[test]
    fn single_short_doc_has_no_pairs() {
        let dir = tempfile::tempdir().unwrap();
        let text: Vec<String> = (0..40).map(|i| format!("w{i}")).collect();
        let cfg = write_corpus(
            dir.path(),
            &[CorpusRecord {
                id: "d0".into(),
                text: text.join(" "),
                doc_id: None,
            }],
        );
        let report = cmd_prepare(&cfg, &cfg.paths.prepared_dir()).unwrap();
        assert_eq!(report.passages, 1);
        assert_eq!(report.pairs, 0);
        assert!(report.warnings.iter().any(|w| w == "no pairs"));
        assert!(!report.por_available);
        let art = Prepared::load(&cfg.paths.prepared_dir()).unwrap();
        assert!(pretrain_config_for(&cfg, &art).tasks.iter().all(|t| !matches!(t, Task::Dor | Task::Gor)));
    }

    #[test]
    fn prepare_is_idempotent() {
        let dir = tempfile::tempdir().unwrap();
        let sc = SynthConfig {
            topics: 4,
            docs: 30,
            train_queries: 10,
            dev_queries: 5,
            ..Default::default()
        };
        let cfg = cmd_synth(&sc, dir.path()).unwrap();
        let cfg = RunConfig::load(&dir.path().join("config.json")).unwrap_or(cfg);
        let a = cmd_prepare(&cfg, &dir.path().join("p1")).unwrap();
        let b = cmd_prepare(&cfg, &dir.path().join("p2")).unwrap();
        assert_eq!(a.hashes, b.hashes);
        assert!(a.por_available);
        assert!(a.pairs > 0);
        let art = Prepared::load(&dir.path().join("p1")).unwrap();
        assert_eq!(art.pairs.len(), a.pairs);
        assert_eq!(art.vocab.len(), a.vocab_size);
    }

    #[test]
    fn malformed_input_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("corpus.jsonl");
        fs::write(&p, "{\"id\":\"a\",\"text\":\"x y\"}\n{oops\n").unwrap();
        let mut cfg = RunConfig::default();
        cfg.paths.corpus = p;
        match cmd_prepare(&cfg, &dir.path().join("out")) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ablation_table_schema() {
        let row = |v| AblationRow {
            variant: v,
            stage: Stage::Retriever1,
            mrr_at_10: 0.5,
            recall: [(10, 0.7), (50, 0.9)].into_iter().collect(),
            ndcg_at_10: 0.6,
        };
        let rows: Vec<AblationRow> = AblationSpec::ALL.into_iter().map(row).collect();
        let csv = ablation_csv(&rows, &[10, 50]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines.len(), 7);
        assert_eq!(lines[0], "variant,stage,mrr@10,recall@10,recall@50,ndcg@10");
        assert!(lines[1..].iter().all(|l| l.split(',').count() == 6));
    }

    #[test]
    fn cli_parses_subcommands() {
        let c = Cli::try_parse_from(["mtmae", "--seed", "3", "eval", "--cutoffs", "1,5"]).unwrap();
        assert_eq!(c.seed, Some(3));
        match c.command {
            Command::Eval(a) => assert_eq!(a.cutoffs, vec![1, 5]),
            _ => panic!(),
        }
        let c = Cli::try_parse_from(["mtmae", "finetune", "--stage", "distil", "--threads", "1"]).unwrap();
        assert_eq!(c.threads, Some(1));
        assert!(Cli::try_parse_from(["mtmae", "frobnicate"]).is_err());
    }
}
