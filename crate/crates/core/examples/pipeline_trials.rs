//! Runs the synthetic pipeline experiment over several seeds and prints the
//! per-stage dev MRR@10.
//!
//! cargo run --release --example pipeline_trials -- [seeds] [--mlm-only]

use mtmae::experiment::seed_trial;
use mtmae::synth::SynthConfig;

fn main() -> mtmae::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seeds: u64 = args.iter().find_map(|a| a.parse().ok()).unwrap_or(5);
    let mlm_only = args.iter().any(|a| a == "--mlm-only");
    let root = tempfile::tempdir().map_err(|e| mtmae::Error::io(std::path::Path::new("tmp"), e))?;
    let (mut monotone, mut ablation) = (0, 0);
    for seed in 0..seeds {
        let start = std::time::Instant::now();
        let t = seed_trial(&SynthConfig::default(), seed, &root.path().join(seed.to_string()), mlm_only)?;
        println!("{} ({:.0}s)", t.summary(), start.elapsed().as_secs_f64());
        monotone += t.monotone(0.01) as usize;
        ablation += t.full_beats_mlm_only().unwrap_or(false) as usize;
    }
    println!("monotone in {monotone}/{seeds} seeds");
    if mlm_only {
        println!("full > mlm_only in {ablation}/{seeds} seeds");
    }
    Ok(())
}
