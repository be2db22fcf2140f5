//! Seeded end-to-end runs on the synthetic corpus: synth, prepare, pretrain,
//! the fine-tuning pipeline, and the `mlm_only` comparison.

use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use serde::{Deserialize, Serialize};

use crate::cli::{ablation_row, cmd_prepare, cmd_pretrain, cmd_synth, finetune_data, Prepared};
use crate::config::{AblationSpec, RunConfig};
use crate::error::Result;
use crate::finetune::{run_pipeline, Stage, StageReport};
use crate::synth::SynthConfig;

/// Synthetic corpus plus prepared artifacts for one seed.
pub struct Workspace {
    pub dir: PathBuf,
    pub cfg: RunConfig,
    pub art: Prepared,
}

impl Workspace {
    /// Writes the corpus for `seed` into `dir` and prepares it.
    pub fn create(sc: &SynthConfig, seed: u64, dir: &Path) -> Result<Self> {
        let sc = SynthConfig { seed, ..sc.clone() };
        cmd_synth(&sc, dir)?;
        let cfg = RunConfig::load(&dir.join("config.json"))?;
        let prepared = cfg.paths.prepared_dir();
        cmd_prepare(&cfg, &prepared)?;
        let art = Prepared::load(&prepared)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            cfg,
            art,
        })
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedTrial {
    pub seed: u64,
    pub report: StageReport,
    /// Retriever₁ dev MRR@10 after `mlm_only` pre-training, when run.
    pub mlm_only_mrr: Option<f64>,
    /// Wall time of the `mlm_only` run.
    #[serde(skip)]
    pub mlm_only_secs: f64,
}

impl SeedTrial {
    fn stage(&self, s: Stage) -> f64 {
        self.report.mrr(s).unwrap_or(f64::NAN)
    }

    /// Retriever₂ ≥ Retriever₁ and distil ≥ Retriever₂ − `slack`.
    pub fn monotone(&self, slack: f64) -> bool {
        let (r1, r2, d) = (self.stage(Stage::Retriever1), self.stage(Stage::Retriever2), self.stage(Stage::Distil));
        r2 >= r1 && d >= r2 - slack
    }

    /// Full pre-training beats `mlm_only` at Retriever₁.
    pub fn full_beats_mlm_only(&self) -> Option<bool> {
        self.mlm_only_mrr.map(|m| self.stage(Stage::Retriever1) > m)
    }

    pub fn summary(&self) -> String {
        let mut s = format!(
            "seed {}: r1 {:.4} r2 {:.4} distil {:.4}",
            self.seed,
            self.stage(Stage::Retriever1),
            self.stage(Stage::Retriever2),
            self.stage(Stage::Distil)
        );
        if let Some(m) = self.mlm_only_mrr {
            s.push_str(&format!(" mlm_only r1 {m:.4}"));
        }
        s
    }
}

/// Full pre-training and all fine-tuning stages for `seed`, optionally
/// followed by `mlm_only` pre-training and Retriever₁.
pub fn seed_trial(sc: &SynthConfig, seed: u64, dir: &Path, with_mlm_only: bool) -> Result<SeedTrial> {
    let ws = Workspace::create(sc, seed, dir)?;
    let trainer = cmd_pretrain(&ws.cfg, &ws.art, &ws.cfg.paths.pretrain_dir(), None)?;
    let data = finetune_data(&ws.cfg, &ws.art)?;
    let fc = ws.cfg.finetune_config();
    let out = run_pipeline(&trainer.model, &data, &fc, Stage::Distil, Some(&ws.cfg.paths.finetune_dir()))?;
    let t0 = Instant::now();
    let mlm_only_mrr = if with_mlm_only {
        let mut cfg = ws.cfg.clone();
        cfg.ablation.through = Stage::Retriever1;
        Some(ablation_row(&cfg, &ws.art, &data, AblationSpec::MlmOnly, &dir.join("mlm_only"))?.mrr_at_10)
    } else {
        None
    };
    let trial = SeedTrial {
        seed,
        report: out.report,
        mlm_only_mrr,
        mlm_only_secs: t0.elapsed().as_secs_f64(),
    };
    info!("{}", trial.summary());
    Ok(trial)
}
