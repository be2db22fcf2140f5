//! Pre-training followed by the full fine-tuning pipeline:
//! Retriever1, mining, Retriever2, mining, reranker, distillation.

mod common;

use mtmae::cli::{cmd_pretrain, finetune_data};
use mtmae::finetune::{run_pipeline, Stage};

fn main() {
    let (dir, _tmp) = common::out_dir();
    let ws = common::small_workspace(&dir, 0);
    let trainer = cmd_pretrain(&ws.cfg, &ws.art, &ws.cfg.paths.pretrain_dir(), None).expect("pretrain");
    let data = finetune_data(&ws.cfg, &ws.art).expect("data");
    let fc = ws.cfg.finetune_config();
    let out = run_pipeline(&trainer.model, &data, &fc, Stage::Distil, Some(&ws.cfg.paths.finetune_dir())).expect("pipeline");
    for e in &out.report.stages {
        println!(
            "{:<10} steps {:>4} loss {:.3} -> {:.3}  {}",
            e.stage.name(),
            e.steps,
            e.first_loss,
            e.last_loss,
            e.dev_summary.as_deref().unwrap_or("-")
        );
    }
}
