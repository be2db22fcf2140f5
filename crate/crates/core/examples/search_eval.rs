//! Encodes the corpus with a fine-tuned retriever, searches the dev queries
//! exactly and scores the run.

mod common;

use mtmae::cli::{cmd_encode, cmd_eval, cmd_pretrain, cmd_search, finetune_data};
use mtmae::finetune::{run_pipeline, Stage};

fn main() {
    let (dir, _tmp) = common::out_dir();
    let ws = common::small_workspace(&dir, 0);
    let cfg = &ws.cfg;
    let trainer = cmd_pretrain(cfg, &ws.art, &cfg.paths.pretrain_dir(), None).expect("pretrain");
    let data = finetune_data(cfg, &ws.art).expect("data");
    let ft = cfg.paths.finetune_dir();
    run_pipeline(&trainer.model, &data, &cfg.finetune_config(), Stage::Retriever1, Some(&ft)).expect("retriever1");

    let model = ft.join(Stage::Retriever1.name());
    let index_dir = dir.join("index");
    let index = cmd_encode(cfg, &ws.art, &model, &index_dir).expect("encode");
    println!("indexed {} passages, dim {}", index.len(), index.dim());
    let run_path = dir.join("runs/dev.trec");
    let n = cmd_search(cfg, &ws.art.vocab, &model, &index_dir, &cfg.paths.dev, 100, "retriever1", &run_path).expect("search");
    println!("searched {n} queries -> {}", run_path.display());
    let report = cmd_eval(cfg, &run_path, &data.dev_qrels, &cfg.finetune.eval_cutoffs, &dir.join("eval")).expect("eval");
    println!("{}", report.summary());
}
