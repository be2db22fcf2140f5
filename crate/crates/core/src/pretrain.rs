//! Multi-task pre-training: loss assembly, the optimization loop, loss log
//! and resumable checkpoints.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::{debug, info};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::masking::{assemble_pretrain_example, MaskingConfig, PretrainExample, Task};
use crate::model::{BottleneckModel, ModelConfig};
use crate::rng;
use crate::tensor::{AdamConfig, Gradients, Tape, Tensor, Var};
use crate::textcorpus::{PassagePair, PlmOutputs, TfIdfTable};

pub const LOSSES_FILE: &str = "losses.csv";
pub const TRAINER_STATE_FILE: &str = "trainer_state.json";

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainLosses {
    pub l_mlm: f64,
    pub l_mkp: f64,
    pub l_cmp: f64,
    pub l_npr: f64,
    pub l_dor: f64,
    pub l_gor: f64,
    pub l_cpr: f64,
    pub l_rpr: f64,
    pub l_por: f64,
    pub l_total: f64,
}

impl PretrainLosses {
    pub const CSV_HEADER: &'static str =
        "step,l_mlm,l_mkp,l_cmp,l_npr,l_dor,l_gor,l_cpr,l_rpr,l_por,l_total";

    /// Builds the group and total terms from the six primitive terms.
    pub fn from_terms(mlm: f64, mkp: f64, cmp: f64, npr: f64, dor: f64, gor: f64) -> Self {
        let l_cpr = mkp + cmp;
        let l_rpr = npr;
        let l_por = dor + gor;
        Self {
            l_mlm: mlm,
            l_mkp: mkp,
            l_cmp: cmp,
            l_npr: npr,
            l_dor: dor,
            l_gor: gor,
            l_cpr,
            l_rpr,
            l_por,
            l_total: mlm + l_cpr + l_rpr + l_por,
        }
    }

    pub fn task(&self, task: Task) -> f64 {
        match task {
            Task::Mkp => self.l_mkp,
            Task::Cmp => self.l_cmp,
            Task::Npr => self.l_npr,
            Task::Dor => self.l_dor,
            Task::Gor => self.l_gor,
        }
    }

    /// Per-term mean, with the composite terms rebuilt from the means.
    pub fn mean(items: &[PretrainLosses]) -> Self {
        let n = items.len().max(1) as f64;
        let avg = |f: fn(&PretrainLosses) -> f64| items.iter().map(f).sum::<f64>() / n;
        Self::from_terms(
            avg(|l| l.l_mlm),
            avg(|l| l.l_mkp),
            avg(|l| l.l_cmp),
            avg(|l| l.l_npr),
            avg(|l| l.l_dor),
            avg(|l| l.l_gor),
        )
    }

    fn csv_row(&self, step: usize) -> String {
        format!(
            "{step},{},{},{},{},{},{},{},{},{},{}",
            self.l_mlm,
            self.l_mkp,
            self.l_cmp,
            self.l_npr,
            self.l_dor,
            self.l_gor,
            self.l_cpr,
            self.l_rpr,
            self.l_por,
            self.l_total
        )
    }

    fn parse_csv_row(line: &str) -> Option<(usize, Self)> {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 11 {
            return None;
        }
        let step = cols[0].parse().ok()?;
        let v: Vec<f64> = cols[1..7].iter().map(|c| c.parse().ok()).collect::<Option<_>>()?;
        Some((step, Self::from_terms(v[0], v[1], v[2], v[3], v[4], v[5])))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    /// Fraction of `steps` with linear learning-rate warmup.
    pub warmup_frac: f64,
    /// Decoder tasks that contribute to the loss; must exist in the model.
    pub tasks: BTreeSet<Task>,
    /// Save an intermediate checkpoint every this many steps (0: final only).
    pub checkpoint_every: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            masking: MaskingConfig::default(),
            model: ModelConfig::default(),
            batch_size: 16,
            steps: 2000,
            adam: AdamConfig::default(),
            warmup_frac: 0.1,
            tasks: Task::ALL.into_iter().collect(),
            checkpoint_every: 0,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        self.model.validate()?;
        if self.steps == 0 || self.batch_size == 0 {
            return Err(Error::Config("steps and batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config("warmup_frac must lie in [0, 1]".into()));
        }
        if let Some(t) = self.tasks.iter().find(|t| !self.model.tasks.contains(t)) {
            return Err(Error::TaskDisabled(*t));
        }
        Ok(())
    }

    /// Linear warmup to `adam.lr`, then constant.
    pub fn learning_rate(&self, step: usize) -> f64 {
        let warmup = (self.warmup_frac * self.steps as f64).ceil() as usize;
        if warmup == 0 || step >= warmup {
            self.adam.lr
        } else {
            self.adam.lr * (step + 1) as f64 / warmup as f64
        }
    }
}

/// Pairs, TF-IDF table and generated texts, ready for example assembly.
#[derive(Clone, Debug)]
pub struct PretrainData {
    pub pairs: Vec<PassagePair>,
    pub plm: PlmOutputs,
    pub tfidf: TfIdfTable,
}

impl PretrainData {
    /// Clips generated sequences so that `[CLS] + s` fits `max_positions`,
    /// and checks that every passage fits too.
    pub fn new(pairs: Vec<PassagePair>, mut plm: PlmOutputs, tfidf: TfIdfTable, max_positions: usize) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::NoPairs);
        }
        for pair in &pairs {
            for p in [&pair.left, &pair.right] {
                if p.token_ids.len() > max_positions {
                    return Err(Error::TooLong {
                        len: p.token_ids.len(),
                        max: max_positions,
                    });
                }
            }
        }
        let limit = max_positions - 1;
        for seq in plm.gen_queries.values_mut().chain(plm.gen_continuations.values_mut()) {
            seq.truncate(limit);
        }
        Ok(Self { pairs, plm, tfidf })
    }

    /// Example `slot` of batch `step`. Pairs are visited in a fresh
    /// permutation each epoch; all randomness is keyed by position, so any
    /// step can be reproduced without replaying earlier ones.
    pub fn example(&self, cfg: &PretrainConfig, step: usize, slot: usize) -> Result<PretrainExample> {
        let n = self.pairs.len();
        let global = step * cfg.batch_size + slot;
        let (epoch, offset) = (global / n, global % n);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(cfg.seed, &["pretrain", "epoch", &epoch.to_string()]));
        let pair = &self.pairs[order[offset]];
        let mut r = rng::stream(
            cfg.seed,
            &["pretrain", "mask", &step.to_string(), &slot.to_string()],
        );
        assemble_pretrain_example(pair, &self.plm, &cfg.masking, &self.tfidf, &mut r)
    }

    pub fn batch(&self, cfg: &PretrainConfig, step: usize) -> Result<Vec<PretrainExample>> {
        (0..cfg.batch_size).map(|j| self.example(cfg, step, j)).collect()
    }
}

/// Graph handles for one example's losses.
#[derive(Clone, Debug)]
pub struct LossGraph {
    pub total: Var,
    pub h: Var,
    pub mlm: Var,
    pub decoders: Vec<(Task, Var)>,
}

fn view_loss(tape: &mut Tape, logits: Var, source: &[usize], positions: &[usize]) -> Result<Var> {
    let targets: Vec<usize> = positions.iter().map(|&p| source[p]).collect();
    let rows: Vec<usize> = (0..positions.len()).collect();
    tape.masked_cross_entropy(logits, &targets, &rows)
}

/// Records the full multi-task loss of `ex` on `tape`. One encoder pass feeds
/// the MLM term and the bottleneck vector of every decoder. With `detach_h`
/// the decoders see a constant copy of `h`.
pub fn loss_graph(
    tape: &mut Tape,
    model: &BottleneckModel,
    ex: &PretrainExample,
    tasks: &BTreeSet<Task>,
    detach_h: bool,
) -> Result<LossGraph> {
    let enc = &ex.encoder_view;
    let pass = model.encode_graph(tape, &enc.input_tokens, &enc.masked_positions)?;
    let logits = pass.logits.ok_or(Error::NoSupervisedPositions)?;
    let mlm = view_loss(tape, logits, &enc.source, &enc.masked_positions)?;
    let h = if detach_h { tape.detach(pass.h) } else { pass.h };
    let mut decoders = Vec::new();
    for task in Task::ALL {
        if !tasks.contains(&task) {
            continue;
        }
        let Some(view) = ex.decoder_views.get(&task) else {
            continue;
        };
        let logits = model.decode_graph(tape, task, &view.input_tokens, h, &view.masked_positions)?;
        decoders.push((task, view_loss(tape, logits, &view.source, &view.masked_positions)?));
    }
    let zero = tape.constant(Tensor::scalar(0.0));
    let term = |t: Task| decoders.iter().find(|(k, _)| *k == t).map_or(zero, |(_, v)| *v);
    let cpr = tape.add(term(Task::Mkp), term(Task::Cmp))?;
    let por = tape.add(term(Task::Dor), term(Task::Gor))?;
    let total = tape.add(mlm, cpr)?;
    let total = tape.add(total, term(Task::Npr))?;
    let total = tape.add(total, por)?;
    Ok(LossGraph {
        total,
        h,
        mlm,
        decoders,
    })
}

fn read_losses(tape: &Tape, g: &LossGraph) -> PretrainLosses {
    let v = |t: Task| {
        g.decoders
            .iter()
            .find(|(k, _)| *k == t)
            .map_or(0.0, |(_, var)| tape.value(*var).item())
    };
    PretrainLosses::from_terms(
        tape.value(g.mlm).item(),
        v(Task::Mkp),
        v(Task::Cmp),
        v(Task::Npr),
        v(Task::Dor),
        v(Task::Gor),
    )
}

/// Loss terms of one example without gradients.
pub fn compute_losses(ex: &PretrainExample, model: &BottleneckModel, tasks: &BTreeSet<Task>) -> Result<PretrainLosses> {
    let mut tape = Tape::new();
    let g = loss_graph(&mut tape, model, ex, tasks, false)?;
    Ok(read_losses(&tape, &g))
}

/// Loss terms and parameter gradients of one example.
pub fn example_gradients(
    ex: &PretrainExample,
    model: &BottleneckModel,
    tasks: &BTreeSet<Task>,
) -> Result<(PretrainLosses, Gradients)> {
    let mut tape = Tape::new();
    let g = loss_graph(&mut tape, model, ex, tasks, false)?;
    let losses = read_losses(&tape, &g);
    let grads = tape.backward(g.total)?;
    Ok((losses, grads))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainerState {
    step: usize,
    seed: u64,
}

/// Owns the model, configuration and loss history of a pre-training run.
pub struct Pretrainer {
    pub model: BottleneckModel,
    pub cfg: PretrainConfig,
    step: usize,
    history: Vec<PretrainLosses>,
}

impl Pretrainer {
    pub fn new(cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = BottleneckModel::new(cfg.model.clone(), rng::child_seed(cfg.seed, &["model-init"]))?;
        Ok(Self {
            model,
            cfg,
            step: 0,
            history: Vec::new(),
        })
    }

    /// Continues a run from a directory written by [`save`](Self::save).
    pub fn resume(dir: &Path, cfg: PretrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = BottleneckModel::load_expecting(dir, &cfg.model)?;
        let path = dir.join(TRAINER_STATE_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let state: TrainerState = serde_json::from_str(&text)?;
        if state.seed != cfg.seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint seed {} differs from configured seed {}",
                state.seed, cfg.seed
            )));
        }
        let path = dir.join(LOSSES_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut history = Vec::new();
        for (i, line) in text.lines().enumerate().skip(1) {
            let (_, l) = PretrainLosses::parse_csv_row(line)
                .ok_or_else(|| Error::parse(&path, i + 1, "malformed loss row"))?;
            history.push(l);
        }
        if history.len() != state.step {
            return Err(Error::Checkpoint(format!(
                "loss log has {} rows for step {}",
                history.len(),
                state.step
            )));
        }
        Ok(Self {
            model,
            cfg,
            step: state.step,
            history,
        })
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[PretrainLosses] {
        &self.history
    }

    /// One optimization step on the batch for the current step index.
    pub fn train_step(&mut self, data: &PretrainData) -> Result<PretrainLosses> {
        let batch = data.batch(&self.cfg, self.step)?;
        let model = &self.model;
        let tasks = &self.cfg.tasks;
        let results: Vec<(PretrainLosses, Gradients)> = batch
            .par_iter()
            .map(|ex| example_gradients(ex, model, tasks))
            .collect::<Result<_>>()?;
        let scale = 1.0 / results.len() as f64;
        let store = self.model.params_mut();
        for (_, g) in &results {
            store.accumulate(g, scale);
        }
        let lr = self.cfg.learning_rate(self.step);
        let trainable = trainable_filter(&self.cfg);
        store.adam_step_where(&self.cfg.adam, lr, trainable);
        let losses: Vec<PretrainLosses> = results.into_iter().map(|(l, _)| l).collect();
        let mean = PretrainLosses::mean(&losses);
        self.history.push(mean);
        self.step += 1;
        debug!("step {} lr {lr:.3e} l_total {:.5}", self.step, mean.l_total);
        Ok(mean)
    }

    /// Trains until `cfg.steps`, saving intermediate checkpoints under `out`
    /// (as `step-NNNNNN/`) when configured, and the final state as `final/`.
    pub fn run(&mut self, data: &PretrainData, out: Option<&Path>) -> Result<()> {
        let every = self.cfg.checkpoint_every;
        let log_every = (self.cfg.steps / 20).max(1);
        while self.step < self.cfg.steps {
            let l = self.train_step(data)?;
            if self.step % log_every == 0 {
                info!(
                    "step {}/{} l_total {:.4} (mlm {:.4} cpr {:.4} rpr {:.4} por {:.4})",
                    self.step, self.cfg.steps, l.l_total, l.l_mlm, l.l_cpr, l.l_rpr, l.l_por
                );
            }
            if let Some(out) = out {
                if every > 0 && self.step % every == 0 && self.step < self.cfg.steps {
                    self.save(&out.join(format!("step-{:06}", self.step)))?;
                }
            }
        }
        if let Some(out) = out {
            self.save(&out.join("final"))?;
            self.write_losses(&out.join(LOSSES_FILE))?;
        }
        Ok(())
    }

    pub fn write_losses(&self, path: &Path) -> Result<()> {
        let mut s = String::from(PretrainLosses::CSV_HEADER);
        s.push('\n');
        for (i, l) in self.history.iter().enumerate() {
            let _ = writeln!(s, "{}", l.csv_row(i + 1));
        }
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    /// Model checkpoint with optimizer state, trainer state and loss log.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.model.save(dir, true)?;
        let state = TrainerState {
            step: self.step,
            seed: self.cfg.seed,
        };
        let path = dir.join(TRAINER_STATE_FILE);
        fs::write(&path, serde_json::to_string_pretty(&state)?).map_err(|e| Error::io(&path, e))?;
        self.write_losses(&dir.join(LOSSES_FILE))
    }
}

/// Parameters updated by pre-training: everything except decoder stacks of
/// tasks outside the enabled set.
fn trainable_filter(cfg: &PretrainConfig) -> impl Fn(&str) -> bool + '_ {
    move |name: &str| {
        let Some(rest) = name.strip_prefix("dec.") else {
            return true;
        };
        if rest.starts_with("shared.") {
            return !cfg.tasks.is_empty();
        }
        cfg.tasks.iter().any(|t| rest.starts_with(&format!("{}.", t.name())))
    }
}
