//! Generates a synthetic corpus and runs corpus preparation on it.
//!
//! `cargo run --release --example synth_prepare [out_dir]`

mod common;

use mtmae::cli::{cmd_prepare, cmd_synth, Prepared};
use mtmae::config::RunConfig;
use mtmae::synth::SynthConfig;

fn main() {
    let (dir, _tmp) = common::out_dir();
    let sc = SynthConfig::default();
    cmd_synth(&sc, &dir).expect("synth");
    let cfg = RunConfig::load(&dir.join("config.json")).expect("config");
    let prepared = cfg.paths.prepared_dir();
    let report = cmd_prepare(&cfg, &prepared).expect("prepare");
    println!(
        "{} records -> {} passages, {} neighbour pairs, vocab {}",
        report.records, report.passages, report.pairs, report.vocab_size
    );
    println!("{} generated query sets, {} continuations", report.gen_queries, report.gen_continuations);
    for w in &report.warnings {
        println!("warning: {w}");
    }
    let art = Prepared::load(&prepared).expect("load");
    let p = &art.passages[0];
    println!("{}: {}", p.pid, art.vocab.decode(&p.token_ids));
}
