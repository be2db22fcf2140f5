//! Pre-training ablation: every variant is pre-trained and fine-tuned
//! through Retriever1, then scored on dev.
//!
//! `cargo run --release --example ablation [out_dir]`

mod common;

use mtmae::cli::{cmd_ablate, ABLATION_CSV};
use mtmae::config::AblationSpec;
use mtmae::finetune::Stage;

fn main() {
    let (dir, _tmp) = common::out_dir();
    let mut ws = common::small_workspace(&dir, 0);
    ws.cfg.ablation.through = Stage::Retriever1;
    let out = dir.join("ablation");
    let rows = cmd_ablate(&ws.cfg, &ws.art, &AblationSpec::ALL, &out).expect("ablate");
    for r in &rows {
        println!("{:<14} {:<10} MRR@10 {:.4}", r.variant.name(), r.stage.name(), r.mrr_at_10);
    }
    println!("table in {}", out.join(ABLATION_CSV).display());
}
