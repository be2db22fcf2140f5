//! Small synthetic workspace shared by the examples.
#![allow(dead_code)]

use std::path::PathBuf;

use mtmae::experiment::Workspace;
use mtmae::synth::SynthConfig;

/// Output directory from the first CLI argument, or a fresh temp dir.
pub fn out_dir() -> (PathBuf, Option<tempfile::TempDir>) {
    match std::env::args().nth(1) {
        Some(d) => (PathBuf::from(d), None),
        None => {
            let t = tempfile::tempdir().expect("tempdir");
            (t.path().to_path_buf(), Some(t))
        }
    }
}

/// A corpus small enough for every example to finish in about a minute.
pub fn small_workspace(dir: &std::path::Path, seed: u64) -> Workspace {
    let sc = SynthConfig {
        topics: 10,
        docs: 120,
        train_queries: 240,
        dev_queries: 60,
        ..SynthConfig::default()
    };
    let mut ws = Workspace::create(&sc, seed, dir).expect("synthetic workspace");
    ws.cfg.pretrain.steps = 600;
    for h in [
        &mut ws.cfg.finetune.retriever1,
        &mut ws.cfg.finetune.retriever2,
        &mut ws.cfg.finetune.reranker,
        &mut ws.cfg.finetune.distil,
    ] {
        h.epochs = 4;
    }
    ws
}
