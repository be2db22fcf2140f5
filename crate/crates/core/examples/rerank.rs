//! Reranks Retriever2's dev run with the cross-encoder and compares both
//! orderings.

mod common;

use mtmae::cli::{cmd_pretrain, finetune_data};
use mtmae::finetune::{dev_metrics, rerank_run, run_pipeline, Stage};
use mtmae::retrieval::evaluate;

fn main() {
    let (dir, _tmp) = common::out_dir();
    let ws = common::small_workspace(&dir, 0);
    let cfg = &ws.cfg;
    let trainer = cmd_pretrain(cfg, &ws.art, &cfg.paths.pretrain_dir(), None).expect("pretrain");
    let data = finetune_data(cfg, &ws.art).expect("data");
    let fc = cfg.finetune_config();
    let out = run_pipeline(&trainer.model, &data, &fc, Stage::Reranker, Some(&cfg.paths.finetune_dir())).expect("pipeline");
    let r2 = out.retriever(Stage::Retriever2).expect("retriever2");
    let reranker = out.models.reranker.as_ref().expect("reranker");
    let (_, run, report) = dev_metrics(r2, &data, &fc).expect("dev");
    println!("retriever2          {}", report.summary());
    for depth in [10, 20] {
        let reranked = rerank_run(reranker, &run, &data.dev, &data, depth, fc.max_query_len).expect("rerank");
        let m = evaluate(&reranked, &data.dev_qrels, &fc.eval_cutoffs).expect("eval");
        println!("reranked top {depth:<5} {}", m.summary());
    }
}
