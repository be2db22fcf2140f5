//! Multi-task pre-training on the small synthetic corpus.

mod common;

use mtmae::cli::cmd_pretrain;

fn main() {
    let (dir, _tmp) = common::out_dir();
    let ws = common::small_workspace(&dir, 0);
    let out = ws.cfg.paths.pretrain_dir();
    cmd_pretrain(&ws.cfg, &ws.art, &out, None).expect("pretrain");
    let csv = std::fs::read_to_string(out.join("losses.csv")).expect("losses.csv");
    let lines: Vec<&str> = csv.lines().collect();
    println!("{}", lines[0]);
    let n = lines.len() - 1;
    for l in lines.iter().skip(1).step_by((n / 10).max(1)) {
        println!("{l}");
    }
    println!("{}", lines[n]);
    println!("checkpoint in {}", out.join("final").display());
}
