//! Encoder/decoder masked views: uniform, TF-IDF-weighted and complementary
//! masking, and assembly of full five-decoder pre-training examples.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::textcorpus::{is_special, write_jsonl, PassagePair, PlmOutputs, TfIdfTable, CLS, MASK};

/// Decoder tasks. Each owns one shallow decoder stack.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    /// masked keywords prediction
    Mkp,
    /// complementary mask prediction
    Cmp,
    /// neighbouring passage recovering
    Npr,
    /// generated-query recovering
    Dor,
    /// generated-continuation recovering
    Gor,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Mkp, Task::Cmp, Task::Npr, Task::Dor, Task::Gor];

    pub fn name(self) -> &'static str {
        match self {
            Task::Mkp => "mkp",
            Task::Cmp => "cmp",
            Task::Npr => "npr",
            Task::Dor => "dor",
            Task::Gor => "gor",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskedView {
    pub source: Vec<usize>,
    /// Sorted, never includes special-token positions.
    pub masked_positions: Vec<usize>,
    pub input_tokens: Vec<usize>,
    pub rate: f64,
}

impl MaskedView {
    fn build(source: &[usize], mut positions: Vec<usize>, rate: f64) -> Self {
        positions.sort_unstable();
        let mut input_tokens = source.to_vec();
        for &p in &positions {
            input_tokens[p] = MASK;
        }
        Self {
            source: source.to_vec(),
            masked_positions: positions,
            input_tokens,
            rate,
        }
    }

    pub fn len(&self) -> usize {
        self.source.len()
    }

    pub fn is_empty(&self) -> bool {
        self.source.is_empty()
    }

    /// A view with nothing masked (used for plain encoding).
    pub fn unmasked(source: &[usize]) -> Self {
        Self::build(source, Vec::new(), 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskingConfig {
    /// encoder mask rate
    pub alpha: f64,
    /// decoder mask rate
    pub beta: f64,
}

impl Default for MaskingConfig {
    fn default() -> Self {
        Self {
            alpha: 0.30,
            beta: 0.50,
        }
    }
}

impl MaskingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} not in (0, 1)", self.alpha)));
        }
        if !(self.beta >= 0.5 && self.beta < 1.0) {
            return Err(Error::Config(format!("beta {} not in [0.5, 1)", self.beta)));
        }
        Ok(())
    }
}

pub fn maskable_positions(seq: &[usize]) -> Vec<usize> {
    seq.iter()
        .enumerate()
        .filter(|(_, &t)| !is_special(t))
        .map(|(i, _)| i)
        .collect()
}

/// `ceil(rate · n)`, at least 1 and at most `n`.
pub fn mask_count(rate: f64, n: usize) -> usize {
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let k = (rate * n as f64 - 1e-9).ceil() as usize;
    k.clamp(1, n.max(1)).min(n)
}

fn check_rate(rate: f64) -> Result<()> {
    if rate > 0.0 && rate < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("mask rate {rate} not in (0, 1)")))
    }
}

/// Masks `ceil(rate · n_maskable)` positions drawn uniformly without replacement.
pub fn mask_uniform<R: Rng + ?Sized>(seq: &[usize], rate: f64, rng: &mut R) -> Result<MaskedView> {
    check_rate(rate)?;
    let mut cand = maskable_positions(seq);
    if cand.is_empty() {
        return Err(Error::NothingToMask);
    }
    let k = mask_count(rate, cand.len());
    // partial Fisher-Yates
    for i in 0..k {
        let j = rng.random_range(i..cand.len());
        cand.swap(i, j);
    }
    cand.truncate(k);
    Ok(MaskedView::build(seq, cand, rate))
}

/// Sequential weighted sampling without replacement: each draw picks a
/// remaining maskable position with probability proportional to its weight.
pub fn mask_weighted<R: Rng + ?Sized>(
    seq: &[usize],
    rate: f64,
    weights: &[f64],
    rng: &mut R,
) -> Result<MaskedView> {
    check_rate(rate)?;
    if weights.len() != seq.len() {
        return Err(Error::DimMismatch {
            left: seq.len(),
            right: weights.len(),
        });
    }
    let mut cand: Vec<(usize, f64)> = maskable_positions(seq)
        .into_iter()
        .map(|i| (i, weights[i].max(0.0)))
        .collect();
    if cand.is_empty() {
        return Err(Error::NothingToMask);
    }
    let k = mask_count(rate, cand.len());
    let mut chosen = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = cand.iter().map(|c| c.1).sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut idx = cand.len() - 1;
            for (j, c) in cand.iter().enumerate() {
                if u < c.1 {
                    idx = j;
                    break;
                }
                u -= c.1;
            }
            // land on a positive-weight entry if rounding pushed past the end
            while cand[idx].1 <= 0.0 && idx > 0 {
                idx -= 1;
            }
            idx
        } else {
            rng.random_range(0..cand.len())
        };
        chosen.push(cand.remove(pick).0);
    }
    Ok(MaskedView::build(seq, chosen, rate))
}

/// Keyword-biased masking with `tf(t, seq) · idf(t)` position weights.
pub fn mask_tfidf<R: Rng + ?Sized>(
    seq: &[usize],
    rate: f64,
    tfidf: &TfIdfTable,
    rng: &mut R,
) -> Result<MaskedView> {
    mask_weighted(seq, rate, &tfidf.position_weights(seq), rng)
}

/// Masks exactly the maskable positions the encoder view left visible.
pub fn mask_complement(encoder_view: &MaskedView) -> MaskedView {
    let maskable = maskable_positions(&encoder_view.source);
    let positions: Vec<usize> = maskable
        .iter()
        .copied()
        .filter(|p| encoder_view.masked_positions.binary_search(p).is_err())
        .collect();
    let rate = if maskable.is_empty() {
        0.0
    } else {
        positions.len() as f64 / maskable.len() as f64
    };
    MaskedView::build(&encoder_view.source, positions, rate)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainExample {
    pub pid: String,
    pub encoder_view: MaskedView,
    pub decoder_views: BTreeMap<Task, MaskedView>,
}

fn labelled<T>(task: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::TaskMasking {
        task,
        source: Box::new(e),
    })
}

/// Prepends the CLS slot that decoders replace with the bottleneck vector.
fn with_cls(seq: &[usize]) -> Vec<usize> {
    let mut v = Vec::with_capacity(seq.len() + 1);
    v.push(CLS);
    v.extend_from_slice(seq);
    v
}

/// Builds the encoder view of `pair.left` and every decoder view whose
/// source text is available.
pub fn assemble_pretrain_example<R: Rng + ?Sized>(
    pair: &PassagePair,
    plm: &PlmOutputs,
    cfg: &MaskingConfig,
    tfidf: &TfIdfTable,
    rng: &mut R,
) -> Result<PretrainExample> {
    let p = &pair.left.token_ids;
    let encoder_view = labelled("mlm", mask_uniform(p, cfg.alpha, rng))?;
    let mut views = BTreeMap::new();
    views.insert(
        Task::Mkp,
        labelled("mkp", mask_tfidf(p, cfg.beta, tfidf, rng))?,
    );
    let cmp = mask_complement(&encoder_view);
    if !cmp.masked_positions.is_empty() {
        views.insert(Task::Cmp, cmp);
    }
    views.insert(
        Task::Npr,
        labelled("npr", mask_tfidf(&pair.right.token_ids, cfg.beta, tfidf, rng))?,
    );
    if let Some(sq) = plm.gen_queries.get(&pair.left.pid) {
        views.insert(
            Task::Dor,
            labelled("dor", mask_uniform(&with_cls(sq), cfg.beta, rng))?,
        );
    }
    if let Some(sg) = plm.gen_continuations.get(&pair.left.pid) {
        views.insert(
            Task::Gor,
            labelled("gor", mask_uniform(&with_cls(sg), cfg.beta, rng))?,
        );
    }
    Ok(PretrainExample {
        pid: pair.left.pid.clone(),
        encoder_view,
        decoder_views: views,
    })
}

#[derive(Serialize)]
struct ViewDump<'a> {
    positions: &'a [usize],
    input_tokens: &'a [usize],
}

#[derive(Serialize)]
struct ExampleDump<'a> {
    pid: &'a str,
    encoder: ViewDump<'a>,
    decoders: BTreeMap<Task, ViewDump<'a>>,
}

/// Writes `examples.jsonl` with per-task `{positions, input_tokens}`.
pub fn write_examples_jsonl(path: &Path, examples: &[PretrainExample]) -> Result<()> {
    fn dump(v: &MaskedView) -> ViewDump<'_> {
        ViewDump {
            positions: &v.masked_positions,
            input_tokens: &v.input_tokens,
        }
    }
    let rows: Vec<ExampleDump<'_>> = examples
        .iter()
        .map(|e| ExampleDump {
            pid: &e.pid,
            encoder: dump(&e.encoder_view),
            decoders: e.decoder_views.iter().map(|(t, v)| (*t, dump(v))).collect(),
        })
        .collect();
    write_jsonl(path, &rows)
}
