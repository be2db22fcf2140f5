//! Run configuration shared by all commands, and ablation variants.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{FinetuneConfig, Stage};
use crate::masking::{MaskingConfig, Task};
use crate::model::ModelConfig;
use crate::pretrain::PretrainConfig;
use crate::tensor::AdamConfig;

pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub gen_queries: Option<PathBuf>,
    pub gen_continuations: Option<PathBuf>,
    pub train: PathBuf,
    pub dev: PathBuf,
    /// TREC qrels for dev; derived from dev positives when absent.
    pub dev_qrels: Option<PathBuf>,
    /// Root for every artifact a command writes.
    pub work_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.jsonl".into(),
            gen_queries: None,
            gen_continuations: None,
            train: "train.jsonl".into(),
            dev: "dev.jsonl".into(),
            dev_qrels: None,
            work_dir: "work".into(),
        }
    }
}

impl Paths {
    fn rebase(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.corpus);
        fix(&mut self.train);
        fix(&mut self.dev);
        fix(&mut self.work_dir);
        for p in [&mut self.gen_queries, &mut self.gen_continuations, &mut self.dev_qrels]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }

    pub fn prepared_dir(&self) -> PathBuf {
        self.work_dir.join("prepared")
    }

    pub fn pretrain_dir(&self) -> PathBuf {
        self.work_dir.join("pretrain")
    }

    pub fn finetune_dir(&self) -> PathBuf {
        self.work_dir.join("finetune")
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub max_vocab: usize,
    pub min_freq: usize,
    pub max_span_len: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            max_vocab: 8000,
            min_freq: 1,
            max_span_len: 64,
        }
    }
}

/// Pre-training knobs that are not covered by the masking/model sections.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainSection {
    pub batch_size: usize,
    pub steps: usize,
    pub adam: AdamConfig,
    pub warmup_frac: f64,
    pub tasks: BTreeSet<Task>,
    pub checkpoint_every: usize,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        Self {
            batch_size: p.batch_size,
            steps: p.steps,
            adam: p.adam,
            warmup_frac: p.warmup_frac,
            tasks: p.tasks,
            checkpoint_every: p.checkpoint_every,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub variants: Vec<AblationSpec>,
    /// Last fine-tuning stage run for each variant.
    pub through: Stage,
}

impl Default for AblationSection {
    fn default() -> Self {
        Self {
            variants: AblationSpec::ALL.to_vec(),
            through: Stage::Retriever1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneConfig,
    pub ablation: AblationSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            data: DataConfig::default(),
            masking: MaskingConfig::default(),
            model: ModelConfig::default(),
            pretrain: PretrainSection::default(),
            finetune: FinetuneConfig::default(),
            ablation: AblationSection::default(),
        }
    }
}

impl RunConfig {
    /// Small-model settings sized for the synthetic corpus on a single core.
    pub fn synthetic() -> Self {
        let mut cfg = Self::default();
        cfg.data.max_span_len = 32;
        cfg.model.hidden = 32;
        cfg.model.heads = 2;
        cfg.model.encoder_layers = 2;
        cfg.model.decoder_layers = 1;
        cfg.model.max_positions = 40;
        cfg.pretrain.steps = 1500;
        cfg.pretrain.batch_size = 16;
        cfg.pretrain.adam.lr = 1e-3;
        let ft = &mut cfg.finetune;
        for h in [&mut ft.retriever1, &mut ft.retriever2, &mut ft.reranker, &mut ft.distil] {
            h.lr = 1e-3;
        }
        ft.retriever1.epochs = 6;
        ft.retriever2.epochs = 6;
        ft.reranker.epochs = 4;
        ft.distil.epochs = 12;
        ft.distil.in_batch = Some(true);
        ft.distil.temperature = 8.0;
        cfg
    }

    /// Parses a JSON config; relative paths resolve against the file's
    /// directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        cfg.paths.rebase(base);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.masking.validate()?;
        self.model.validate()?;
        self.finetune.validate()?;
        if self.data.max_span_len == 0 || self.data.max_vocab <= crate::textcorpus::SPECIAL_TOKENS.len() {
            return Err(Error::Config("max_span_len must be >= 1 and max_vocab above the special tokens".into()));
        }
        if self.data.max_span_len + 2 > self.model.max_positions {
            return Err(Error::Config(format!(
                "max_span_len {} does not fit max_positions {}",
                self.data.max_span_len, self.model.max_positions
            )));
        }
        Ok(())
    }

    /// Pre-training configuration with the model's vocabulary size taken from
    /// the prepared vocabulary.
    pub fn pretrain_config(&self, vocab_size: usize) -> PretrainConfig {
        PretrainConfig {
            masking: self.masking,
            model: ModelConfig {
                vocab_size,
                ..self.model.clone()
            },
            batch_size: self.pretrain.batch_size,
            steps: self.pretrain.steps,
            adam: self.pretrain.adam,
            warmup_frac: self.pretrain.warmup_frac,
            tasks: self.pretrain.tasks.clone(),
            checkpoint_every: self.pretrain.checkpoint_every,
            seed: self.seed,
        }
    }

    pub fn finetune_config(&self) -> FinetuneConfig {
        FinetuneConfig {
            seed: self.seed,
            ..self.finetune.clone()
        }
    }

    /// Writes the fully-resolved configuration into `dir`.
    pub fn echo(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationSpec {
    Full,
    WoCpr,
    WoRpr,
    WoPor,
    SharedDec,
    MlmOnly,
}

impl AblationSpec {
    pub const ALL: [AblationSpec; 6] = [
        AblationSpec::Full,
        AblationSpec::WoCpr,
        AblationSpec::WoRpr,
        AblationSpec::WoPor,
        AblationSpec::SharedDec,
        AblationSpec::MlmOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationSpec::Full => "full",
            AblationSpec::WoCpr => "wo_cpr",
            AblationSpec::WoRpr => "wo_rpr",
            AblationSpec::WoPor => "wo_por",
            AblationSpec::SharedDec => "shared_dec",
            AblationSpec::MlmOnly => "mlm_only",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }

    /// Decoder tasks instantiated and trained by the variant.
    pub fn tasks(self) -> BTreeSet<Task> {
        let all: BTreeSet<Task> = Task::ALL.into_iter().collect();
        let without = |drop: &[Task]| all.iter().copied().filter(|t| !drop.contains(t)).collect();
        match self {
            AblationSpec::Full | AblationSpec::SharedDec => all,
            AblationSpec::WoCpr => without(&[Task::Mkp, Task::Cmp]),
            AblationSpec::WoRpr => without(&[Task::Npr]),
            AblationSpec::WoPor => without(&[Task::Dor, Task::Gor]),
            AblationSpec::MlmOnly => BTreeSet::new(),
        }
    }

    pub fn shared_decoder(self) -> bool {
        self == AblationSpec::SharedDec
    }

    /// Applies the variant to a pre-training configuration.
    pub fn apply(self, cfg: &PretrainConfig) -> PretrainConfig {
        let tasks = self.tasks();
        PretrainConfig {
            model: ModelConfig {
                tasks: tasks.clone(),
                shared_decoder: self.shared_decoder(),
                ..cfg.model.clone()
            },
            tasks,
            ..cfg.clone()
        }
    }
}

impl fmt::Display for AblationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BottleneckModel;

    #[test]
    fn unknown_keys_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        fs::write(&p, r#"{"seed": 1, "modle": {}}"#).unwrap();
        assert!(matches!(RunConfig::load(&p), Err(Error::Config(_))));
        fs::write(&p, r#"{"seed": 1, "paths": {"corpus": "c.jsonl"}}"#).unwrap();
        let cfg = RunConfig::load(&p).unwrap();
        assert_eq!(cfg.seed, 1);
        assert_eq!(cfg.paths.corpus, dir.path().join("c.jsonl"));
        assert_eq!(cfg.model, ModelConfig::default());
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn variants_map_to_valid_models() {
        let base = PretrainConfig {
            model: ModelConfig {
                vocab_size: 30,
                hidden: 8,
                heads: 2,
                encoder_layers: 1,
                max_positions: 8,
                ..Default::default()
            },
            ..Default::default()
        };
        for v in AblationSpec::ALL {
            let cfg = v.apply(&base);
            cfg.validate().unwrap();
            let m = BottleneckModel::new(cfg.model.clone(), 0).unwrap();
            let names: Vec<&str> = m.params().names().collect();
            if v == AblationSpec::WoPor {
                assert!(names.iter().all(|n| !n.starts_with("dec.dor") && !n.starts_with("dec.gor")));
            }
            if v == AblationSpec::MlmOnly {
                assert!(names.iter().all(|n| !n.starts_with("dec.")));
            }
        }
        assert_eq!(AblationSpec::parse("wo_rpr").unwrap(), AblationSpec::WoRpr);
        assert!(matches!(AblationSpec::parse("nope"), Err(Error::UnknownVariant(_))));
    }
}
