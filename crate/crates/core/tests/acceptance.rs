//! Acceptance criteria 1-9. Each criterion prints one PASS/FAIL line; the test
//! fails if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::IndexedRandom;
use rand::Rng;

use mtmae::cli::{ablation_csv, cmd_ablate, ABLATION_CSV};
use mtmae::config::AblationSpec;
use mtmae::experiment::{seed_trial, SeedTrial, Workspace};
use mtmae::masking::{assemble_pretrain_example, maskable_positions, mask_tfidf, MaskingConfig, Task};
use mtmae::model::{BottleneckModel, DenseVector, ModelConfig};
use mtmae::pretrain::{example_gradients, loss_graph, PretrainConfig, PretrainData, Pretrainer};
use mtmae::retrieval::{evaluate, DenseIndex, Qrels, Run};
use mtmae::rng::{self, StreamRng};
use mtmae::synth::{SynthConfig, SynthCorpus};
use mtmae::tensor::{AdamConfig, ParamId, Tape, Tensor, Var};
use mtmae::textcorpus::{compute_tfidf, is_special, make_pairs, Passage, PassagePair, PlmOutputs, TfIdfTable, SEP};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- fixtures

/// `docs × spans` passages of random body tokens in `5..vocab`, their
/// neighbour pairs, generated texts for every passage and the TF-IDF table.
fn toy_corpus(
    docs: usize,
    spans: usize,
    span_len: usize,
    vocab: usize,
    seed: u64,
) -> (Vec<Passage>, Vec<PassagePair>, PlmOutputs, TfIdfTable) {
    let mut r = rng::stream(seed, &["toy-corpus"]);
    let mut passages = Vec::new();
    let mut pairs = Vec::new();
    for d in 0..docs {
        let doc: Vec<Passage> = (0..spans)
            .map(|k| {
                let body: Vec<usize> = (0..span_len).map(|_| r.random_range(5..vocab)).collect();
                Passage::new(format!("d{d}#{k}"), format!("d{d}"), k, &body)
            })
            .collect();
        pairs.extend(make_pairs(&doc));
        passages.extend(doc);
    }
    let mut plm = PlmOutputs::default();
    for p in &passages {
        let mut q: Vec<usize> = (0..3).map(|_| r.random_range(5..vocab)).collect();
        q.push(SEP);
        q.extend((0..3).map(|_| r.random_range(5..vocab)));
        plm.gen_queries.insert(p.pid.clone(), q);
        plm.gen_continuations
            .insert(p.pid.clone(), (0..6).map(|_| r.random_range(5..vocab)).collect());
    }
    let tfidf = compute_tfidf(&passages).unwrap();
    (passages, pairs, plm, tfidf)
}

fn small_model(vocab: usize, hidden: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        hidden,
        heads: 2,
        encoder_layers: 2,
        decoder_layers: 2,
        max_positions: 24,
        ..Default::default()
    }
}

fn pretrain_cfg(model: ModelConfig, batch_size: usize, steps: usize, lr: f64, seed: u64) -> PretrainConfig {
    PretrainConfig {
        model,
        batch_size,
        steps,
        adam: AdamConfig {
            lr,
            ..Default::default()
        },
        seed,
        ..Default::default()
    }
}

// ------------------------------------------------- 1. gradient correctness

const FD_H: f64 = 1e-4;
const FD_TOL: f64 = 1e-3;

fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> mtmae::Result<Var>;

/// Checks every input element of `op` against central differences of
/// `sum(op(inputs) ⊙ R)` for a fixed random `R`. Returns (probes, max error).
fn check_op(inputs: &[Tensor], op: &OpFn) -> (usize, f64) {
    let eval = |vals: &[Tensor], weights: Option<&Tensor>| -> (f64, Option<Tensor>, Option<Vec<Tensor>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.input(t.clone())).collect();
        let out = op(&mut tape, &vars).unwrap();
        let w = weights.cloned().unwrap_or_else(|| {
            let shape = tape.shape(out).to_vec();
            Tensor::randn(&shape, 1.0, &mut rng::stream(7, &["fd-weights"]))
        });
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let value = tape.value(loss).item();
        if weights.is_some() {
            return (value, None, None);
        }
        let grads = tape.backward(loss).unwrap();
        let g = vars
            .iter()
            .zip(vals)
            .map(|(v, t)| grads.wrt(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        (value, Some(w), Some(g))
    };
    let (_, w, grads) = eval(inputs, None);
    let (w, grads) = (w.unwrap(), grads.unwrap());
    let mut worst: f64 = 0.0;
    let mut probes = 0;
    for (i, t) in inputs.iter().enumerate() {
        for k in 0..t.numel() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[k] += FD_H;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[k] -= FD_H;
            let numeric = (eval(&plus, Some(&w)).0 - eval(&minus, Some(&w)).0) / (2.0 * FD_H);
            worst = worst.max(rel_err(grads[i].data()[k], numeric));
            probes += 1;
        }
    }
    (probes, worst)
}

fn randn(shape: &[usize], r: &mut StreamRng) -> Tensor {
    Tensor::randn(shape, 1.0, r)
}

fn op_gradient_checks() -> Vec<(&'static str, usize, f64)> {
    let mut r = rng::stream(1, &["op-gradcheck"]);
    let mut cases: Vec<(&'static str, Vec<Tensor>, Box<OpFn>)> = Vec::new();
    let a = randn(&[3, 4], &mut r);
    let b = randn(&[4, 5], &mut r);
    cases.push(("matmul", vec![a.clone(), b], Box::new(|t, v| t.matmul(v[0], v[1]))));
    let bn = randn(&[5, 4], &mut r);
    cases.push(("matmul_nt", vec![a.clone(), bn], Box::new(|t, v| t.matmul_nt(v[0], v[1]))));
    let a2 = randn(&[3, 4], &mut r);
    cases.push(("add", vec![a.clone(), a2.clone()], Box::new(|t, v| t.add(v[0], v[1]))));
    cases.push(("mul", vec![a.clone(), a2], Box::new(|t, v| t.mul(v[0], v[1]))));
    cases.push((
        "add_row",
        vec![a.clone(), randn(&[4], &mut r)],
        Box::new(|t, v| t.add_row(v[0], v[1])),
    ));
    cases.push(("scale", vec![a.clone()], Box::new(|t, v| Ok(t.scale(v[0], -1.7)))));
    cases.push(("gelu", vec![a.clone()], Box::new(|t, v| Ok(t.gelu(v[0])))));
    cases.push((
        "layer_norm",
        vec![a.clone(), randn(&[4], &mut r), randn(&[4], &mut r)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
    ));
    cases.push(("softmax(axis 0)", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 0))));
    cases.push(("softmax(axis 1)", vec![a.clone()], Box::new(|t, v| t.softmax(v[0], 1))));
    cases.push(("log_softmax", vec![a.clone()], Box::new(|t, v| t.log_softmax(v[0]))));
    cases.push((
        "embedding_gather",
        vec![randn(&[6, 3], &mut r)],
        Box::new(|t, v| t.embedding_gather(v[0], &[2, 0, 2, 5])),
    ));
    cases.push((
        "concat(axis 0)",
        vec![a.clone(), randn(&[2, 4], &mut r)],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 0)),
    ));
    cases.push((
        "concat(axis 1)",
        vec![a.clone(), randn(&[3, 2], &mut r)],
        Box::new(|t, v| t.concat(&[v[0], v[1]], 1)),
    ));
    cases.push(("slice(axis 0)", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 0, 1, 3))));
    cases.push(("slice(axis 1)", vec![a.clone()], Box::new(|t, v| t.slice(v[0], 1, 1, 3))));
    cases.push(("transpose", vec![a.clone()], Box::new(|t, v| t.transpose(v[0]))));
    cases.push(("reshape", vec![a.clone()], Box::new(|t, v| t.reshape(v[0], &[2, 6]))));
    cases.push(("pick", vec![a.clone()], Box::new(|t, v| t.pick(v[0], &[0, 5, 5, 11]))));
    cases.push(("sum", vec![a.clone()], Box::new(|t, v| Ok(t.sum(v[0])))));
    cases.push(("mean", vec![a.clone()], Box::new(|t, v| Ok(t.mean(v[0])))));
    cases.push((
        "masked_cross_entropy",
        vec![randn(&[4, 5], &mut r)],
        Box::new(|t, v| t.masked_cross_entropy(v[0], &[1, 4, 0, 2], &[0, 1, 3])),
    ));
    cases
        .into_iter()
        .map(|(name, inputs, op)| {
            let (n, worst) = check_op(&inputs, op.as_ref());
            (name, n, worst)
        })
        .collect()
}

/// Central differences of the six-term loss on seeded parameter probes: one
/// per parameter tensor with a nonzero gradient, topped up to `min_probes`.
fn model_gradient_check(min_probes: usize) -> (usize, usize, f64, String) {
    let cfg = pretrain_cfg(small_model(48, 16), 1, 1, 1e-3, 21);
    let (_, pairs, plm, tfidf) = toy_corpus(3, 3, 10, 48, 21);
    let data = PretrainData::new(pairs, plm, tfidf, cfg.model.max_positions).unwrap();
    let ex = data.example(&cfg, 0, 0).unwrap();
    assert_eq!(ex.decoder_views.len(), 5, "all five decoder views present");
    let mut model = BottleneckModel::new(cfg.model.clone(), 21).unwrap();
    let (_, grads) = example_gradients(&ex, &model, &cfg.tasks).unwrap();

    let mut r = rng::stream(21, &["model-probes"]);
    let mut probes: Vec<(ParamId, usize)> = Vec::new();
    let candidates: Vec<(ParamId, Vec<usize>)> = model
        .params()
        .iter()
        .filter_map(|(id, _)| {
            let g = grads.param(id)?;
            let nz: Vec<usize> = (0..g.numel()).filter(|&k| g.data()[k] != 0.0).collect();
            (!nz.is_empty()).then_some((id, nz))
        })
        .collect();
    let tensors_with_grad = candidates.len();
    for (id, nz) in &candidates {
        probes.push((*id, *nz.choose(&mut r).unwrap()));
    }
    while probes.len() < min_probes {
        let (id, nz) = candidates.choose(&mut r).unwrap();
        probes.push((*id, *nz.choose(&mut r).unwrap()));
    }

    let total = |m: &BottleneckModel| {
        let mut tape = Tape::new();
        let g = loss_graph(&mut tape, m, &ex, &cfg.tasks, false).unwrap();
        tape.value(g.total).item()
    };
    let mut worst: f64 = 0.0;
    let mut worst_name = String::new();
    for &(id, k) in &probes {
        let orig = model.params().value(id).data()[k];
        model.params_mut().get_mut(id).value.data_mut()[k] = orig + FD_H;
        let up = total(&model);
        model.params_mut().get_mut(id).value.data_mut()[k] = orig - FD_H;
        let down = total(&model);
        model.params_mut().get_mut(id).value.data_mut()[k] = orig;
        let e = rel_err(grads.param(id).unwrap().data()[k], (up - down) / (2.0 * FD_H));
        if e > worst {
            worst = e;
            worst_name = format!("{}[{k}]", model.params().get(id).name);
        }
    }
    (probes.len(), tensors_with_grad, worst, worst_name)
}

fn criterion_1() -> Verdict {
    let ops = op_gradient_checks();
    let op_fail: Vec<String> = ops
        .iter()
        .filter(|(_, _, e)| *e > FD_TOL)
        .map(|(n, _, e)| format!("{n} {e:.2e}"))
        .collect();
    let op_probes: usize = ops.iter().map(|o| o.1).sum();
    let op_worst = ops.iter().map(|o| o.2).fold(0.0, f64::max);
    let (n, tensors, worst, at) = model_gradient_check(150);
    verdict(
        op_fail.is_empty() && worst <= FD_TOL && n >= 100,
        format!(
            "{} ops / {op_probes} element probes max rel err {op_worst:.2e}{}; six-term loss (d=16, L_E=2) {n} probes over {tensors} tensors max rel err {worst:.2e} at {at}",
            ops.len(),
            if op_fail.is_empty() { String::new() } else { format!(" FAILED {op_fail:?}") }
        ),
    )
}

// ----------------------------------------------------- 2. masking invariants

fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}

fn criterion_2() -> Verdict {
    let start = Instant::now();
    let cfg = MaskingConfig::default();

    // partition and special tokens on 10,000 random examples
    let (_, pairs, plm, tfidf) = toy_corpus(40, 4, 12, 300, 2);
    let mut r = rng::stream(2, &["partition"]);
    let mut partition_ok = 0;
    let mut special_masked = 0;
    let trials = 10_000;
    for _ in 0..trials {
        let pair = pairs.choose(&mut r).unwrap();
        let ex = assemble_pretrain_example(pair, &plm, &cfg, &tfidf, &mut r).unwrap();
        let enc: BTreeSet<usize> = ex.encoder_view.masked_positions.iter().copied().collect();
        let cmp: BTreeSet<usize> = ex.decoder_views[&Task::Cmp].masked_positions.iter().copied().collect();
        let maskable: BTreeSet<usize> = maskable_positions(&ex.encoder_view.source).into_iter().collect();
        let union: BTreeSet<usize> = enc.union(&cmp).copied().collect();
        if union == maskable && enc.is_disjoint(&cmp) {
            partition_ok += 1;
        }
        for v in std::iter::once(&ex.encoder_view).chain(ex.decoder_views.values()) {
            special_masked += v.masked_positions.iter().filter(|&&p| is_special(v.source[p])).count();
        }
    }

    // TF-IDF bias on the planted-keyword synthetic corpus
    let corpus = SynthCorpus::generate(&SynthConfig::default()).unwrap();
    let vocab = mtmae::textcorpus::build_vocab(corpus.records.iter().map(|c| c.text.as_str()), 8000, 1).unwrap();
    let passages: Vec<Passage> = corpus
        .records
        .iter()
        .map(|c| Passage::new(c.id.clone(), c.doc_id().to_string(), 0, &vocab.encode(&c.text)))
        .collect();
    let table = compute_tfidf(&passages).unwrap();
    let mut rhos = Vec::new();
    for p in passages.iter().step_by(passages.len() / 5).take(5) {
        let seq = &p.token_ids;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        let mut rr = rng::stream(2, &["spearman", &p.pid]);
        for _ in 0..10_000 {
            for pos in mask_tfidf(seq, cfg.beta, &table, &mut rr).unwrap().masked_positions {
                *counts.entry(seq[pos]).or_default() += 1;
            }
        }
        let tokens: BTreeSet<usize> = seq.iter().copied().filter(|&t| !is_special(t)).collect();
        let freq: Vec<f64> = tokens.iter().map(|t| counts.get(t).copied().unwrap_or(0) as f64).collect();
        let weight: Vec<f64> = tokens.iter().map(|&t| table.weight(t, seq)).collect();
        rhos.push(spearman(&freq, &weight));
    }
    let min_rho = rhos.iter().copied().fold(f64::INFINITY, f64::min);
    let secs = start.elapsed().as_secs_f64();
    verdict(
        partition_ok == trials && special_masked == 0 && min_rho > 0.9 && secs <= 60.0,
        format!(
            "CMP partition {partition_ok}/{trials}; special tokens masked {special_masked}; Spearman over {} passages min {min_rho:.3} (all {:?}); {secs:.1}s",
            rhos.len(),
            rhos.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>()
        ),
    )
}

// ---------------------------------------- 3. composition and task isolation

fn criterion_3() -> Verdict {
    let (_, pairs, plm, tfidf) = toy_corpus(6, 3, 10, 40, 3);
    let base = pretrain_cfg(small_model(40, 16), 4, 100, 1e-3, 3);
    let data = PretrainData::new(pairs, plm, tfidf, base.model.max_positions).unwrap();

    // exact identity on every example of a batch, tape total vs terms
    let model = BottleneckModel::new(base.model.clone(), 3).unwrap();
    let mut identity_ok = true;
    for ex in data.batch(&base, 0).unwrap() {
        let mut tape = Tape::new();
        let g = loss_graph(&mut tape, &model, &ex, &base.tasks, false).unwrap();
        let (l, _) = example_gradients(&ex, &model, &base.tasks).unwrap();
        identity_ok &= tape.value(g.total).item() == l.l_total;
        identity_ok &= l.l_total == l.l_mlm + l.l_cpr + l.l_rpr + l.l_por;
        identity_ok &= l.l_cpr == l.l_mkp + l.l_cmp && l.l_rpr == l.l_npr && l.l_por == l.l_dor + l.l_gor;
    }

    let mut frozen = Vec::new();
    for task in Task::ALL {
        let mut cfg = base.clone();
        cfg.tasks.remove(&task);
        let mut p = Pretrainer::new(cfg).unwrap();
        let dec_ids = p.model.decoder_param_ids(task);
        let snapshot = |m: &BottleneckModel| -> Vec<Vec<u64>> {
            dec_ids
                .iter()
                .map(|&id| m.params().value(id).data().iter().map(|x| x.to_bits()).collect())
                .collect()
        };
        let before = snapshot(&p.model);
        let enc_before = p.model.params().value(p.model.encoder_param_ids()[0]).clone();
        let mut zero_terms = true;
        let mut batch_identity = true;
        for _ in 0..100 {
            let l = p.train_step(&data).unwrap();
            zero_terms &= l.task(task) == 0.0;
            batch_identity &= l.l_total == l.l_mlm + l.l_cpr + l.l_rpr + l.l_por;
        }
        let ok = zero_terms
            && batch_identity
            && before == snapshot(&p.model)
            && &enc_before != p.model.params().value(p.model.encoder_param_ids()[0]);
        frozen.push((task, ok));
    }
    let all_frozen = frozen.iter().all(|f| f.1);
    verdict(
        identity_ok && all_frozen,
        format!(
            "per-example identity {}; disabled task zero and decoder bit-identical over 100 steps: {}",
            if identity_ok { "exact" } else { "BROKEN" },
            frozen
                .iter()
                .map(|(t, ok)| format!("{t} {}", if *ok { "ok" } else { "FAIL" }))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// --------------------------------------------------- 4. bottleneck exclusivity

fn criterion_4() -> Verdict {
    let cfg = pretrain_cfg(small_model(40, 16), 1, 1, 1e-3, 4);
    let (_, pairs, plm, tfidf) = toy_corpus(3, 3, 10, 40, 4);
    let data = PretrainData::new(pairs, plm, tfidf, cfg.model.max_positions).unwrap();
    let model = BottleneckModel::new(cfg.model.clone(), 4).unwrap();
    let enc_ids = model.encoder_param_ids();
    let mut lines = Vec::new();
    let mut ok = true;
    for slot in 0..4 {
        let ex = data.example(&cfg, 0, slot).unwrap();
        for detach in [true, false] {
            for task in Task::ALL {
                let mut tape = Tape::new();
                let g = loss_graph(&mut tape, &model, &ex, &cfg.tasks, detach).unwrap();
                let Some(&(_, term)) = g.decoders.iter().find(|(t, _)| *t == task) else {
                    continue;
                };
                let grads = tape.backward(term).unwrap();
                let norm: f64 = enc_ids
                    .iter()
                    .filter_map(|&id| grads.param(id))
                    .map(|t| t.data().iter().map(|x| x * x).sum::<f64>())
                    .sum::<f64>()
                    .sqrt();
                let good = if detach { norm == 0.0 } else { norm > 0.0 };
                ok &= good;
                if slot == 0 {
                    lines.push(format!("{task}{} {:.1e}", if detach { "/detached" } else { "" }, norm.abs()));
                }
            }
        }
    }
    verdict(ok, format!("‖∂L_dec/∂Θ_E‖ on 4 examples, first: {}", lines.join(", ")))
}

// -------------------------------------------------------- 5. overfit sanity

fn criterion_5() -> Verdict {
    let start = Instant::now();
    let vocab = 40;
    // 8 documents of 4 spans = 32 passages
    let (passages, pairs, plm, tfidf) = toy_corpus(8, 4, 12, vocab, 5);
    let mut model = small_model(vocab, 64);
    model.decoder_layers = 1;
    let mut cfg = pretrain_cfg(model, 8, 500, 3e-3, 5);
    cfg.warmup_frac = 0.05;
    let data = PretrainData::new(pairs, plm, tfidf, cfg.model.max_positions).unwrap();
    let mut p = Pretrainer::new(cfg).unwrap();
    p.run(&data, None).unwrap();
    let h = p.history();
    let first = h[0];
    let ln_v = (vocab as f64).ln();
    let terms = [first.l_mlm, first.l_mkp, first.l_cmp, first.l_npr, first.l_dor, first.l_gor];
    let init_ok = terms.iter().all(|t| (t - ln_v).abs() / ln_v <= 0.1);
    let last: f64 = h[h.len() - 10..].iter().map(|l| l.l_total).sum::<f64>() / 10.0;
    let factor = first.l_total / last;
    let secs = start.elapsed().as_secs_f64();
    verdict(
        init_ok && factor >= 10.0 && secs <= 300.0,
        format!(
            "{} passages; initial terms {:?} vs ln V {ln_v:.3}; l_total {:.3} -> {last:.3} (mean of last 10 steps), factor {factor:.1} in {} steps; {secs:.0}s",
            passages.len(),
            terms.iter().map(|t| format!("{t:.3}")).collect::<Vec<_>>(),
            first.l_total,
            h.len()
        ),
    )
}

// ------------------------------------------------ 6. search and metric oracles

fn criterion_6() -> Verdict {
    let mut r = rng::stream(6, &["search"]);
    let (n, d) = (500, 16);
    let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect()).collect();
    let pids: Vec<String> = (0..n).map(|i| format!("p{i:04}")).collect();
    let index = DenseIndex::from_vectors(pids.clone(), rows.iter().cloned().map(DenseVector).collect(), String::new()).unwrap();
    let mut mismatches = 0;
    let queries = 1000;
    for _ in 0..queries {
        let q: Vec<f64> = (0..d).map(|_| r.random_range(-1.0..1.0)).collect();
        let k = r.random_range(1..=50);
        let mut naive: Vec<(String, f64)> = rows
            .iter()
            .zip(&pids)
            .map(|(row, p)| (p.clone(), row.iter().zip(&q).map(|(a, b)| a * b).sum()))
            .collect();
        naive.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        naive.truncate(k);
        if index.search(&DenseVector(q), k).unwrap() != naive {
            mismatches += 1;
        }
    }

    let run_of = |qid: &str, pids: &[&str]| -> Run {
        let mut run = Run::new();
        run.insert(qid.into(), pids.iter().enumerate().map(|(i, p)| (p.to_string(), -(i as f64))).collect());
        run
    };
    let qrels_of = |qid: &str, rel: &[&str]| -> Qrels {
        let mut q = Qrels::new();
        q.insert(qid.into(), rel.iter().map(|p| (p.to_string(), 1)).collect());
        q
    };
    let mrr3 = evaluate(&run_of("q", &["a", "b", "c"]), &qrels_of("q", &["c"]), &[10]).unwrap().mrr(10);
    let mut run = run_of("q1", &["r", "x"]);
    run.extend(run_of("q2", &["w", "x", "y", "r"]));
    let mut qrels = qrels_of("q1", &["r"]);
    qrels.extend(qrels_of("q2", &["r"]));
    let mrr_mean = evaluate(&run, &qrels, &[10]).unwrap().mrr(10);
    let ndcg = evaluate(&run_of("q", &["a", "b"]), &qrels_of("q", &["b"]), &[10]).unwrap().ndcg(10);
    let recall = evaluate(&run_of("q", &["a", "b", "c"]), &qrels_of("q", &["b", "z"]), &[2]).unwrap().recall(2);
    let checks = [
        ("MRR@10 rank 3", mrr3, 1.0 / 3.0),
        ("MRR@10 ranks 1,4", mrr_mean, 0.625),
        ("nDCG@10 rank 2", ndcg, 1.0 / 3f64.log2()),
        ("Recall@2 one of two", recall, 0.5),
    ];
    let metrics_ok = checks.iter().all(|(_, got, want)| (got - want).abs() <= 1e-6);
    verdict(
        mismatches == 0 && metrics_ok,
        format!(
            "{}/{queries} queries match the naive scan ({n} passages, random k); {}",
            queries - mismatches,
            checks
                .iter()
                .map(|(n, g, w)| format!("{n} {g:.6} (want {w:.6})"))
                .collect::<Vec<_>>()
                .join(", ")
        ),
    )
}

// ------------------------------------------------------- 7 and 8. experiments

const SEEDS: u64 = 5;

fn run_trials(root: &Path) -> (Vec<SeedTrial>, f64, f64) {
    let mut trials = Vec::new();
    let (mut pipeline_secs, mut mlm_secs) = (0.0, 0.0);
    for seed in 0..SEEDS {
        let t0 = Instant::now();
        let t = seed_trial(&SynthConfig::default(), seed, &root.join(format!("seed{seed}")), true).unwrap();
        let total = t0.elapsed().as_secs_f64();
        pipeline_secs += total - t.mlm_only_secs;
        mlm_secs += t.mlm_only_secs;
        println!("  {}", t.summary());
        trials.push(t);
    }
    (trials, pipeline_secs, mlm_secs)
}

fn criterion_7(trials: &[SeedTrial], secs: f64) -> Verdict {
    let ok = trials.iter().filter(|t| t.monotone(0.01)).count();
    verdict(
        ok >= 4 && secs <= 1800.0,
        format!(
            "R2 >= R1 and distil >= R2 - 0.01 in {ok}/{} seeds; {:.1} min",
            trials.len(),
            secs / 60.0
        ),
    )
}

fn criterion_8(trials: &[SeedTrial], root: &Path) -> Verdict {
    let wins = trials.iter().filter(|t| t.full_beats_mlm_only() == Some(true)).count();
    // six-variant table from the ablate command on a reduced budget
    let ws = Workspace::create(&SynthConfig::default(), 0, &root.join("table")).unwrap();
    let mut cfg = ws.cfg.clone();
    cfg.pretrain.steps = 60;
    cfg.finetune.retriever1.epochs = 1;
    let dir = root.join("table/ablation");
    let rows = cmd_ablate(&cfg, &ws.art, &AblationSpec::ALL, &dir).unwrap();
    let csv = fs::read_to_string(dir.join(ABLATION_CSV)).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    let names: Vec<&str> = lines[1..].iter().map(|l| l.split(',').next().unwrap()).collect();
    let expected: Vec<&str> = AblationSpec::ALL.iter().map(|v| v.name()).collect();
    let table_ok = lines.len() == 7 && names == expected && csv == ablation_csv(&rows, &cfg.finetune.eval_cutoffs);
    verdict(
        wins >= 4 && table_ok,
        format!(
            "full > mlm_only at Retriever1 in {wins}/{} seeds; ablation table {} rows [{}] header {:?}",
            trials.len(),
            lines.len().saturating_sub(1),
            names.join(" "),
            lines.first().copied().unwrap_or("")
        ),
    )
}

// ------------------------------------------------------------ 9. determinism

fn files_under(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn cli_session(dir: &Path) -> Vec<String> {
    fs::create_dir_all(dir).unwrap();
    let sc = SynthConfig {
        topics: 6,
        docs: 40,
        train_queries: 40,
        dev_queries: 20,
        ..SynthConfig::default()
    };
    fs::write(dir.join("sc.json"), serde_json::to_string(&sc).unwrap()).unwrap();
    let bin = env!("CARGO_BIN_EXE_mtmae");
    let run = |args: &[&str]| {
        let out = Command::new(bin)
            .current_dir(dir)
            .env("MASTER_LOG", "warn")
            .args(["--threads", "2", "--seed", "9"])
            .args(args)
            .output()
            .unwrap();
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    };
    run(&["--out", "data", "synth", "--synth-config", "sc.json"]);
    // shrink the training budget in the generated config
    let path = dir.join("data/config.json");
    let mut cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    cfg["pretrain"]["steps"] = 8.into();
    for stage in ["retriever1", "retriever2", "reranker", "distil"] {
        cfg["finetune"][stage]["epochs"] = 1.into();
    }
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let c = ["--config", "data/config.json"];
    let commands: Vec<Vec<&str>> = vec![
        vec!["prepare"],
        vec!["pretrain"],
        vec!["finetune"],
        vec!["finetune", "--stage", "distil"],
        vec!["encode"],
        vec!["search", "--k", "50"],
        vec!["eval"],
        vec!["ablate", "--variants", "full,mlm_only"],
    ];
    let mut names = Vec::new();
    for cmd in &commands {
        let args: Vec<&str> = c.iter().copied().chain(cmd.iter().copied()).collect();
        run(&args);
        names.push(cmd[0].to_string());
    }
    names
}

fn criterion_9(root: &Path) -> Verdict {
    let a = root.join("a");
    let b = root.join("b");
    let commands = cli_session(&a);
    cli_session(&b);
    let (fa, fb) = (files_under(&a), files_under(&b));
    let differing: Vec<String> = fa
        .keys()
        .chain(fb.keys())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .filter(|k| fa.get(*k) != fb.get(*k))
        .map(|k| k.display().to_string())
        .collect();
    let has = |suffix: &str| fa.keys().any(|k| k.to_string_lossy().ends_with(suffix));
    let kinds = ["tensors.bin", "vectors.f32", "dev.trec", "metrics.json", "soft_labels.jsonl", "ablation.csv"];
    let missing: Vec<&str> = kinds.iter().copied().filter(|k| !has(k)).collect();
    verdict(
        differing.is_empty() && missing.is_empty(),
        format!(
            "{} files from [synth {}] compared across two runs; differing {:?}; missing artifact kinds {:?}",
            fa.len(),
            commands.join(" "),
            differing,
            missing
        ),
    )
}

/// `ACCEPTANCE_ONLY=1,5` restricts the run to the listed criteria.
fn selected() -> BTreeSet<usize> {
    match std::env::var("ACCEPTANCE_ONLY") {
        Ok(v) => v.split(',').filter_map(|s| s.trim().parse().ok()).collect(),
        Err(_) => (1..=9).collect(),
    }
}

#[test]
fn acceptance() {
    let root = tempfile::tempdir().unwrap();
    let only = selected();
    let mut results: Vec<(usize, Verdict)> = Vec::new();
    let mut report = |n: usize, v: Verdict| {
        println!("criterion {n}: {} ({})", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        results.push((n, v));
    };
    let checks: [(usize, fn() -> Verdict); 6] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
    ];
    for (n, f) in checks {
        if only.contains(&n) {
            report(n, f());
        }
    }
    if only.contains(&7) || only.contains(&8) {
        let (trials, pipeline_secs, _) = run_trials(&root.path().join("trials"));
        if only.contains(&7) {
            report(7, criterion_7(&trials, pipeline_secs));
        }
        if only.contains(&8) {
            report(8, criterion_8(&trials, &root.path().join("ablation")));
        }
    }
    if only.contains(&9) {
        report(9, criterion_9(&root.path().join("cli")));
    }
    let failed: Vec<usize> = results.iter().filter(|r| !r.1.pass).map(|r| r.0).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
