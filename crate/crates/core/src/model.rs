//! Bottlenecked encoder / multi-decoder Transformer.
//!
//! A deep pre-LN encoder produces the CLS vector `h`. Each decoder task owns
//! a shallow (default 2-layer) bidirectional stack whose position-0 input is
//! `h + pos[0]` instead of the CLS token embedding. The token embedding
//! matrix, position embeddings and LM head are shared by every stack, and
//! the LM head output projection is the token embedding matrix itself.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::masking::{MaskedView, Task};
use crate::rng;
use crate::tensor::{load_checkpoint, save_checkpoint, ParamId, ParamStore, Tape, Tensor, Var};
use crate::textcorpus::{CLS, SEP};

pub const MODEL_CONFIG_FILE: &str = "model_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub hidden: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_positions: usize,
    pub ffn_mult: usize,
    /// Decoder stacks that exist in the model.
    pub tasks: BTreeSet<Task>,
    /// One stack serves every task.
    pub shared_decoder: bool,
    pub init_std: f64,
    pub ln_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 8000,
            hidden: 64,
            heads: 4,
            encoder_layers: 4,
            decoder_layers: 2,
            max_positions: 130,
            ffn_mult: 4,
            tasks: Task::ALL.into_iter().collect(),
            shared_decoder: false,
            init_std: 0.02,
            ln_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size <= crate::textcorpus::SPECIAL_TOKENS.len() {
            return Err(Error::Config("vocab_size too small".into()));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 || self.max_positions < 4 {
            return Err(Error::Config(
                "encoder_layers, decoder_layers must be >= 1 and max_positions >= 4".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DenseVector(pub Vec<f64>);

impl DenseVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Inner-product relevance score.
pub fn score(h_q: &DenseVector, h_p: &DenseVector) -> Result<f64> {
    if h_q.dim() != h_p.dim() {
        return Err(Error::DimMismatch {
            left: h_q.dim(),
            right: h_p.dim(),
        });
    }
    Ok(h_q.0.iter().zip(&h_p.0).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Debug)]
struct Layer {
    ln1_g: ParamId,
    ln1_b: ParamId,
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Clone, Debug)]
struct Stack {
    layers: Vec<Layer>,
    ln_g: ParamId,
    ln_b: ParamId,
}

#[derive(Clone, Debug)]
struct LmHead {
    dense_w: ParamId,
    dense_b: ParamId,
    ln_g: ParamId,
    ln_b: ParamId,
    out_bias: ParamId,
}

#[derive(Clone, Debug)]
struct ScoreHead {
    w: ParamId,
    b: ParamId,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    seed: u64,
    std: f64,
}

impl Init<'_> {
    fn normal(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        let mut r = rng::stream(self.seed, &["init", name]);
        self.store.add(name, Tensor::randn(shape, self.std, &mut r))
    }

    fn fill(&mut self, name: &str, shape: &[usize], v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::full(shape, v))
    }

    fn stack(&mut self, prefix: &str, n_layers: usize, d: usize, ffn: usize) -> Result<Stack> {
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let p = format!("{prefix}.l{i}");
            layers.push(Layer {
                ln1_g: self.fill(&format!("{p}.ln1.g"), &[d], 1.0)?,
                ln1_b: self.fill(&format!("{p}.ln1.b"), &[d], 0.0)?,
                wq: self.normal(&format!("{p}.attn.wq"), &[d, d])?,
                bq: self.fill(&format!("{p}.attn.bq"), &[d], 0.0)?,
                wk: self.normal(&format!("{p}.attn.wk"), &[d, d])?,
                bk: self.fill(&format!("{p}.attn.bk"), &[d], 0.0)?,
                wv: self.normal(&format!("{p}.attn.wv"), &[d, d])?,
                bv: self.fill(&format!("{p}.attn.bv"), &[d], 0.0)?,
                wo: self.normal(&format!("{p}.attn.wo"), &[d, d])?,
                bo: self.fill(&format!("{p}.attn.bo"), &[d], 0.0)?,
                ln2_g: self.fill(&format!("{p}.ln2.g"), &[d], 1.0)?,
                ln2_b: self.fill(&format!("{p}.ln2.b"), &[d], 0.0)?,
                w1: self.normal(&format!("{p}.ffn.w1"), &[d, ffn])?,
                b1: self.fill(&format!("{p}.ffn.b1"), &[ffn], 0.0)?,
                w2: self.normal(&format!("{p}.ffn.w2"), &[ffn, d])?,
                b2: self.fill(&format!("{p}.ffn.b2"), &[d], 0.0)?,
            });
        }
        Ok(Stack {
            layers,
            ln_g: self.fill(&format!("{prefix}.ln.g"), &[d], 1.0)?,
            ln_b: self.fill(&format!("{prefix}.ln.b"), &[d], 0.0)?,
        })
    }
}

/// Graph handles produced by one encoder pass.
#[derive(Clone, Copy, Debug)]
pub struct EncoderPass {
    /// Final hidden states `[T, d]`.
    pub hidden: Var,
    /// CLS output `[1, d]`.
    pub h: Var,
    /// LM logits at the requested positions `[M, V]`, when any were requested.
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BottleneckModel {
    cfg: ModelConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    head: LmHead,
    encoder: Stack,
    decoders: BTreeMap<Task, Stack>,
    score_head: Option<ScoreHead>,
}

impl BottleneckModel {
    /// Random initialization; each parameter draws from its own named stream,
    /// so adding or removing decoders leaves every other tensor unchanged.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let ffn = d * cfg.ffn_mult;
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            seed,
            std: cfg.init_std,
        };
        let tok_emb = init.normal("emb.tok", &[cfg.vocab_size, d])?;
        let pos_emb = init.normal("emb.pos", &[cfg.max_positions, d])?;
        let head = LmHead {
            dense_w: init.normal("lm_head.dense.w", &[d, d])?,
            dense_b: init.fill("lm_head.dense.b", &[d], 0.0)?,
            ln_g: init.fill("lm_head.ln.g", &[d], 1.0)?,
            ln_b: init.fill("lm_head.ln.b", &[d], 0.0)?,
            out_bias: init.fill("lm_head.out_bias", &[cfg.vocab_size], 0.0)?,
        };
        let encoder = init.stack("enc", cfg.encoder_layers, d, ffn)?;
        let mut decoders = BTreeMap::new();
        if cfg.shared_decoder {
            if !cfg.tasks.is_empty() {
                let stack = init.stack("dec.shared", cfg.decoder_layers, d, ffn)?;
                for &t in &cfg.tasks {
                    decoders.insert(t, stack.clone());
                }
            }
        } else {
            for &t in &cfg.tasks {
                let stack = init.stack(&format!("dec.{}", t.name()), cfg.decoder_layers, d, ffn)?;
                decoders.insert(t, stack);
            }
        }
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            head,
            encoder,
            decoders,
            score_head: None,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn token_embedding_id(&self) -> ParamId {
        self.tok_emb
    }

    pub fn has_task(&self, task: Task) -> bool {
        self.decoders.contains_key(&task)
    }

    /// Parameter ids belonging to the encoder stack.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with("enc."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Parameter ids of the decoder stack serving `task`.
    pub fn decoder_param_ids(&self, task: Task) -> Vec<ParamId> {
        let prefix = if self.cfg.shared_decoder {
            "dec.shared.".to_string()
        } else {
            format!("dec.{}.", task.name())
        };
        self.store
            .iter()
            .filter(|(_, p)| p.name.starts_with(&prefix))
            .map(|(id, _)| id)
            .collect()
    }

    /// Adds the scalar scoring head used by the cross-encoder.
    pub fn add_score_head(&mut self, seed: u64) -> Result<()> {
        if self.score_head.is_some() {
            return Ok(());
        }
        let d = self.cfg.hidden;
        let mut init = Init {
            store: &mut self.store,
            seed,
            std: self.cfg.init_std,
        };
        self.score_head = Some(ScoreHead {
            w: init.normal("xenc.head.w", &[d, 1])?,
            b: init.fill("xenc.head.b", &[1], 0.0)?,
        });
        Ok(())
    }

    pub fn has_score_head(&self) -> bool {
        self.score_head.is_some()
    }

    /// Token + position embeddings; when `slot0` is given it replaces the
    /// token embedding at position 0.
    fn embed(&self, tape: &mut Tape, tokens: &[usize], slot0: Option<Var>) -> Result<Var> {
        let t = tokens.len();
        if t == 0 {
            return Err(Error::shape("embed", "empty sequence"));
        }
        if t > self.cfg.max_positions {
            return Err(Error::TooLong {
                len: t,
                max: self.cfg.max_positions,
            });
        }
        let tok = tape.param(&self.store, self.tok_emb);
        let pos = tape.param(&self.store, self.pos_emb);
        let tok_rows = match slot0 {
            None => tape.embedding_gather(tok, tokens)?,
            Some(h) => {
                if t == 1 {
                    h
                } else {
                    let rest = tape.embedding_gather(tok, &tokens[1..])?;
                    tape.concat(&[h, rest], 0)?
                }
            }
        };
        let positions: Vec<usize> = (0..t).collect();
        let pos_rows = tape.embedding_gather(pos, &positions)?;
        tape.add(tok_rows, pos_rows)
    }

    fn attention(&self, tape: &mut Tape, x: Var, l: &Layer) -> Result<Var> {
        let s = &self.store;
        let proj = |tape: &mut Tape, w: ParamId, b: ParamId| -> Result<Var> {
            let wv = tape.param(s, w);
            let bv = tape.param(s, b);
            let y = tape.matmul(x, wv)?;
            tape.add_row(y, bv)
        };
        let q = proj(tape, l.wq, l.bq)?;
        let k = proj(tape, l.wk, l.bk)?;
        let v = proj(tape, l.wv, l.bv)?;
        let heads = self.cfg.heads;
        let dh = self.cfg.hidden / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut ctx = Vec::with_capacity(heads);
        for h in 0..heads {
            let (a, b) = (h * dh, (h + 1) * dh);
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    tape.slice(q, 1, a, b)?,
                    tape.slice(k, 1, a, b)?,
                    tape.slice(v, 1, a, b)?,
                )
            };
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, scale);
            // no causal mask: every position attends to every other
            let probs = tape.softmax(scores, 1)?;
            ctx.push(tape.matmul(probs, vh)?);
        }
        let ctx = if heads == 1 { ctx[0] } else { tape.concat(&ctx, 1)? };
        let wo = tape.param(s, l.wo);
        let bo = tape.param(s, l.bo);
        let out = tape.matmul(ctx, wo)?;
        tape.add_row(out, bo)
    }

    fn layer_norm(&self, tape: &mut Tape, x: Var, g: ParamId, b: ParamId) -> Result<Var> {
        let g = tape.param(&self.store, g);
        let b = tape.param(&self.store, b);
        tape.layer_norm(x, g, b, self.cfg.ln_eps)
    }

    fn run_stack(&self, tape: &mut Tape, mut x: Var, stack: &Stack) -> Result<Var> {
        let s = &self.store;
        for l in &stack.layers {
            let a = self.layer_norm(tape, x, l.ln1_g, l.ln1_b)?;
            let att = self.attention(tape, a, l)?;
            x = tape.add(x, att)?;
            let b = self.layer_norm(tape, x, l.ln2_g, l.ln2_b)?;
            let w1 = tape.param(s, l.w1);
            let b1 = tape.param(s, l.b1);
            let w2 = tape.param(s, l.w2);
            let b2 = tape.param(s, l.b2);
            let f = tape.matmul(b, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            x = tape.add(x, f)?;
        }
        self.layer_norm(tape, x, stack.ln_g, stack.ln_b)
    }

    /// Tied LM head over selected rows of `hidden`.
    fn lm_logits(&self, tape: &mut Tape, hidden: Var, positions: &[usize]) -> Result<Var> {
        let s = &self.store;
        let rows = tape.embedding_gather(hidden, positions)?;
        let w = tape.param(s, self.head.dense_w);
        let b = tape.param(s, self.head.dense_b);
        let y = tape.matmul(rows, w)?;
        let y = tape.add_row(y, b)?;
        let y = tape.gelu(y);
        let y = self.layer_norm(tape, y, self.head.ln_g, self.head.ln_b)?;
        let emb = tape.param(s, self.tok_emb);
        let logits = tape.matmul_nt(y, emb)?;
        let ob = tape.param(s, self.head.out_bias);
        tape.add_row(logits, ob)
    }

    /// Encoder pass over `tokens` (CLS at position 0); LM logits are produced
    /// for `mlm_positions` when non-empty.
    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mlm_positions: &[usize],
    ) -> Result<EncoderPass> {
        let x = self.embed(tape, tokens, None)?;
        let hidden = self.run_stack(tape, x, &self.encoder)?;
        let h = tape.slice(hidden, 0, 0, 1)?;
        let logits = if mlm_positions.is_empty() {
            None
        } else {
            Some(self.lm_logits(tape, hidden, mlm_positions)?)
        };
        Ok(EncoderPass { hidden, h, logits })
    }

    /// Decoder pass for `task`: `h` (`[1, d]`) replaces the position-0 token
    /// embedding of `tokens`; returns LM logits at `positions`.
    pub fn decode_graph(
        &self,
        tape: &mut Tape,
        task: Task,
        tokens: &[usize],
        h: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let stack = self.decoders.get(&task).ok_or(Error::TaskDisabled(task))?;
        if tape.shape(h) != [1, self.cfg.hidden] {
            return Err(Error::shape(
                "decode",
                format!("h must be [1, {}], got {:?}", self.cfg.hidden, tape.shape(h)),
            ));
        }
        let x = self.embed(tape, tokens, Some(h))?;
        let hidden = self.run_stack(tape, x, stack)?;
        self.lm_logits(tape, hidden, positions)
    }

    /// CLS vector and LM logits at the masked positions of `view`.
    pub fn encode(&self, view: &MaskedView) -> Result<(DenseVector, Option<Tensor>)> {
        let mut tape = Tape::new();
        let pass = self.encode_graph(&mut tape, &view.input_tokens, &view.masked_positions)?;
        let h = DenseVector(tape.value(pass.h).data().to_vec());
        Ok((h, pass.logits.map(|l| tape.value(l).clone())))
    }

    /// Dense vector of an unmasked token sequence (CLS first).
    pub fn embed_sequence(&self, tokens: &[usize]) -> Result<DenseVector> {
        let mut tape = Tape::new();
        let pass = self.encode_graph(&mut tape, tokens, &[])?;
        Ok(DenseVector(tape.value(pass.h).data().to_vec()))
    }

    /// Decoder logits at the masked positions of `view`, conditioned on `h`.
    pub fn decode(&self, task: Task, view: &MaskedView, h: &DenseVector) -> Result<Tensor> {
        if h.dim() != self.cfg.hidden {
            return Err(Error::DimMismatch {
                left: h.dim(),
                right: self.cfg.hidden,
            });
        }
        let mut tape = Tape::new();
        let hv = tape.constant(Tensor::matrix(1, h.dim(), h.0.clone())?);
        let logits = self.decode_graph(&mut tape, task, &view.input_tokens, hv, &view.masked_positions)?;
        Ok(tape.value(logits).clone())
    }

    /// `[CLS] query [SEP] passage [SEP]`, passage clipped from the tail to fit.
    pub fn cross_input(&self, query: &[usize], passage: &[usize]) -> Result<Vec<usize>> {
        if query.is_empty() {
            return Err(Error::EmptyQuery);
        }
        let budget = self.cfg.max_positions;
        if query.len() + 3 > budget {
            return Err(Error::TooLong {
                len: query.len() + 3,
                max: budget,
            });
        }
        let room = budget - query.len() - 3;
        let mut seq = Vec::with_capacity(budget);
        seq.push(CLS);
        seq.extend_from_slice(query);
        seq.push(SEP);
        seq.extend_from_slice(&passage[..passage.len().min(room)]);
        seq.push(SEP);
        Ok(seq)
    }

    /// Cross-encoder relevance: linear head on the CLS output over the
    /// concatenated pair. `query` and `passage` are unframed token bodies.
    pub fn cross_encode_graph(&self, tape: &mut Tape, query: &[usize], passage: &[usize]) -> Result<Var> {
        let head = self
            .score_head
            .as_ref()
            .ok_or_else(|| Error::Config("model has no cross-encoder head".into()))?;
        let seq = self.cross_input(query, passage)?;
        let pass = self.encode_graph(tape, &seq, &[])?;
        let w = tape.param(&self.store, head.w);
        let b = tape.param(&self.store, head.b);
        let s = tape.matmul(pass.h, w)?;
        let s = tape.reshape(s, &[1])?;
        let s = tape.add(s, b)?;
        tape.reshape(s, &[])
    }

    pub fn cross_encode(&self, query: &[usize], passage: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let s = self.cross_encode_graph(&mut tape, query, passage)?;
        Ok(tape.value(s).item())
    }

    /// SHA-256 over parameter names, shapes and values.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (_, p) in self.store.iter() {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, with_optimizer: bool) -> Result<()> {
        save_checkpoint(dir, &self.store, with_optimizer)?;
        let path = dir.join(MODEL_CONFIG_FILE);
        let cfg = SavedConfig {
            model: self.cfg.clone(),
            score_head: self.score_head.is_some(),
        };
        fs::write(&path, serde_json::to_string_pretty(&cfg)?).map_err(|e| Error::io(path, e))
    }

    /// Loads a checkpoint directory written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(MODEL_CONFIG_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let saved: SavedConfig = serde_json::from_str(&text)?;
        let mut model = Self::new(saved.model, 0)?;
        if saved.score_head {
            model.add_score_head(0)?;
        }
        load_checkpoint(dir, &mut model.store)?;
        Ok(model)
    }

    /// Like [`load`](Self::load) but rejects a checkpoint whose config differs.
    pub fn load_expecting(dir: &Path, expected: &ModelConfig) -> Result<Self> {
        let model = Self::load(dir)?;
        if model.config() != expected {
            return Err(Error::Checkpoint(format!(
                "model config mismatch: checkpoint {:?}, expected {:?}",
                model.config(),
                expected
            )));
        }
        Ok(model)
    }

    /// Copy holding only the encoder-side parameters (embeddings, LM head,
    /// encoder stack), used to initialize retrievers and rerankers.
    pub fn encoder_only(&self) -> Result<Self> {
        let mut cfg = self.cfg.clone();
        cfg.tasks.clear();
        cfg.shared_decoder = false;
        let mut m = Self::new(cfg, 0)?;
        m.store.copy_values_from(&self.store);
        Ok(m)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedConfig {
    model: ModelConfig,
    score_head: bool,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::mask_uniform;

    fn tiny(tasks: &[Task], shared: bool) -> ModelConfig {
        ModelConfig {
            vocab_size: 40,
            hidden: 16,
            heads: 2,
            encoder_layers: 2,
            decoder_layers: 2,
            max_positions: 24,
            tasks: tasks.iter().copied().collect(),
            shared_decoder: shared,
            ..Default::default()
        }
    }

    fn seq() -> Vec<usize> {
        vec![CLS, 10, 11, 12, 13, 14, 15, SEP]
    }

    #[test]
    fn score_is_inner_product() {
        let a = DenseVector(vec![1.0, 2.0]);
        let b = DenseVector(vec![3.0, -1.0]);
        assert_eq!(score(&a, &b).unwrap(), 1.0);
        assert_eq!(score(&a, &b).unwrap(), score(&b, &a).unwrap());
        assert_eq!(score(&DenseVector(vec![1.0, 0.0]), &DenseVector(vec![0.0, 5.0])).unwrap(), 0.0);
        assert!(score(&a, &DenseVector(vec![1.0])).is_err());
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let m = BottleneckModel::new(tiny(&Task::ALL, false), 3).unwrap();
        let view = mask_uniform(&seq(), 0.3, &mut rng::stream(0, &["v"])).unwrap();
        let (h, logits) = m.encode(&view).unwrap();
        assert_eq!(h.dim(), 16);
        let logits = logits.unwrap();
        assert_eq!(logits.shape(), &[view.masked_positions.len(), 40]);
        let (h2, _) = m.encode(&view).unwrap();
        assert_eq!(h, h2);
        let dec = m.decode(Task::Mkp, &view, &h).unwrap();
        assert_eq!(dec.shape(), &[view.masked_positions.len(), 40]);
    }

    #[test]
    fn permuting_interior_tokens_changes_h() {
        let m = BottleneckModel::new(tiny(&[], false), 3).unwrap();
        let a = m.embed_sequence(&seq()).unwrap();
        let mut swapped = seq();
        swapped.swap(2, 5);
        let b = m.embed_sequence(&swapped).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn over_length_rejected() {
        let m = BottleneckModel::new(tiny(&[], false), 3).unwrap();
        let long = vec![10; 25];
        assert!(matches!(m.embed_sequence(&long), Err(Error::TooLong { .. })));
    }

    #[test]
    fn disabled_task_rejected() {
        let m = BottleneckModel::new(tiny(&[Task::Mkp], false), 3).unwrap();
        let view = MaskedView::unmasked(&seq());
        let h = DenseVector(vec![0.0; 16]);
        assert!(matches!(m.decode(Task::Dor, &view, &h), Err(Error::TaskDisabled(Task::Dor))));
    }

    #[test]
    fn shared_decoder_has_one_stack() {
        let shared = BottleneckModel::new(tiny(&Task::ALL, true), 1).unwrap();
        let single = BottleneckModel::new(tiny(&[Task::Mkp], false), 1).unwrap();
        let full = BottleneckModel::new(tiny(&Task::ALL, false), 1).unwrap();
        let one = single.params().num_scalars_with_prefix("dec.");
        assert_eq!(shared.params().num_scalars_with_prefix("dec."), one);
        assert_eq!(full.params().num_scalars_with_prefix("dec."), 5 * one);
    }

    #[test]
    fn ablated_decoders_are_absent() {
        let m = BottleneckModel::new(tiny(&[Task::Mkp, Task::Cmp, Task::Npr], false), 1).unwrap();
        assert!(m.params().names().all(|n| !n.starts_with("dec.dor") && !n.starts_with("dec.gor")));
        // encoder init is independent of which decoders exist
        let other = BottleneckModel::new(tiny(&[], false), 1).unwrap();
        let id = m.params().id("enc.l0.attn.wq").unwrap();
        let id2 = other.params().id("enc.l0.attn.wq").unwrap();
        assert_eq!(m.params().value(id), other.params().value(id2));
    }

    #[test]
    fn tied_embedding_drives_every_head() {
        let mut m = BottleneckModel::new(tiny(&Task::ALL, false), 5).unwrap();
        let view = mask_uniform(&seq(), 0.5, &mut rng::stream(0, &["v"])).unwrap();
        let (h, enc_before) = m.encode(&view).unwrap();
        let dec_before: Vec<Tensor> = Task::ALL.iter().map(|&t| m.decode(t, &view, &h).unwrap()).collect();
        let tok = m.token_embedding_id();
        // perturb only an output row that is never an input token
        let d = 16;
        for j in 0..d {
            m.params_mut().get_mut(tok).value.data_mut()[30 * d + j] += 0.5;
        }
        let (h_after, enc_after) = m.encode(&view).unwrap();
        assert_eq!(h, h_after);
        assert_ne!(enc_before.unwrap().row(0)[30], enc_after.unwrap().row(0)[30]);
        for (t, before) in Task::ALL.iter().zip(dec_before) {
            let after = m.decode(*t, &view, &h).unwrap();
            assert_ne!(before.row(0)[30], after.row(0)[30], "{t}");
        }
    }

    #[test]
    fn cross_encoder_truncates_passage_tail_only() {
        let mut m = BottleneckModel::new(tiny(&[], false), 2).unwrap();
        m.add_score_head(2).unwrap();
        let q = vec![10, 11, 12];
        let p: Vec<usize> = (13..40).collect();
        let input = m.cross_input(&q, &p).unwrap();
        assert_eq!(input.len(), 24);
        assert_eq!(&input[1..4], &q[..]);
        assert_eq!(&input[5..23], &p[..18]);
        let s = m.cross_encode(&q, &p).unwrap();
        assert!(s.is_finite());
        assert_eq!(s, m.cross_encode(&q, &p).unwrap());
        assert!(matches!(m.cross_encode(&[], &p), Err(Error::EmptyQuery)));
    }

    #[test]
    fn save_load_round_trip_and_config_guard() {
        let dir = tempfile::tempdir().unwrap();
        let m = BottleneckModel::new(tiny(&[Task::Npr], false), 9).unwrap();
        m.save(dir.path(), true).unwrap();
        let back = BottleneckModel::load(dir.path()).unwrap();
        assert_eq!(back.fingerprint(), m.fingerprint());
        let mut other = tiny(&[Task::Npr], false);
        other.hidden = 8;
        assert!(BottleneckModel::load_expecting(dir.path(), &other).is_err());
    }
}
