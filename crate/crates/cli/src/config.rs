//! Run configuration: one JSON file with a section per pipeline stage.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use evolm::adapt::{FinetuneConfig, KdConfig, LambdaMode, PromptConfig, TransductiveConfig};
use evolm::data::{SyntheticCorpusSpec, TaskPairSpec};
use evolm::evolution::SelfEvolutionConfig;
use evolm::model::ModelConfig;
use evolm::pretrain::PretrainConfig;
use evolm::{Error, Result};

/// File locations, relative ones resolved against `--out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub corpus: PathBuf,
    pub slots: PathBuf,
    pub vocab: PathBuf,
    pub tasks: PathBuf,
    pub checkpoint: PathBuf,
    pub evolved: PathBuf,
    pub index: PathBuf,
    pub metrics: PathBuf,
    pub prompts: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            corpus: "corpus.txt".into(),
            slots: "slots.jsonl".into(),
            vocab: "vocab.json".into(),
            tasks: "tasks".into(),
            checkpoint: "encoder.ckpt".into(),
            evolved: "evolved.ckpt".into(),
            index: "neglected.jsonl".into(),
            metrics: "metrics".into(),
            prompts: "prompts".into(),
        }
    }
}

impl Paths {
    fn resolve(&mut self, out: &Path) {
        for p in [
            &mut self.corpus,
            &mut self.slots,
            &mut self.vocab,
            &mut self.tasks,
            &mut self.checkpoint,
            &mut self.evolved,
            &mut self.index,
            &mut self.metrics,
            &mut self.prompts,
        ] {
            if p.is_relative() {
                *p = out.join(&*p);
            }
        }
    }
}

/// Encoder architecture; the vocabulary size comes from the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub layers: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub heads: usize,
    pub head_size: usize,
    pub max_seq_len: usize,
    pub max_relative_distance: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let t = ModelConfig::tiny(0);
        Self {
            layers: t.layers,
            hidden_size: t.hidden_size,
            ffn_size: t.ffn_size,
            heads: t.heads,
            head_size: t.head_size,
            max_seq_len: t.max_seq_len,
            max_relative_distance: t.max_relative_distance,
        }
    }
}

impl ModelSection {
    pub fn build(&self, vocab_size: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            hidden_size: self.hidden_size,
            ffn_size: self.ffn_size,
            heads: self.heads,
            head_size: self.head_size,
            vocab_size,
            max_seq_len: self.max_seq_len,
            max_relative_distance: self.max_relative_distance,
            seed,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScanSection {
    pub margin: f64,
}

impl Default for ScanSection {
    fn default() -> Self {
        Self { margin: 0.0 }
    }
}

/// Distillation settings; the student's prompt settings come from `prompt`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KdSection {
    pub temperature: f64,
    pub lambda: LambdaMode,
    pub static_lambda: bool,
    pub eval_interval: usize,
}

impl Default for KdSection {
    fn default() -> Self {
        let k = KdConfig::default();
        Self {
            temperature: k.temperature,
            lambda: k.lambda,
            static_lambda: k.static_lambda,
            eval_interval: k.eval_interval,
        }
    }
}

/// Self-training settings; each round's fine-tune comes from `finetune`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransductiveSection {
    pub t_max: usize,
    pub agreement_threshold: f64,
    pub confidence_filter: Option<f64>,
}

impl Default for TransductiveSection {
    fn default() -> Self {
        let t = TransductiveConfig::default();
        Self {
            t_max: t.t_max,
            agreement_threshold: t.agreement_threshold,
            confidence_filter: t.confidence_filter,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    /// Target tasks with at least this many training examples are better
    /// served by full fine-tuning than by prompt transfer.
    pub low_resource_threshold: usize,
    pub max_vocab: usize,
    pub relatedness: f64,
    pub paths: Paths,
    pub corpus: SyntheticCorpusSpec,
    pub tasks: TaskPairSpec,
    pub model: ModelSection,
    pub pretrain: PretrainConfig,
    pub scan: ScanSection,
    pub evolve: SelfEvolutionConfig,
    pub finetune: FinetuneConfig,
    pub prompt: PromptConfig,
    pub kd: KdSection,
    pub transductive: TransductiveSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            low_resource_threshold: 300,
            max_vocab: 10_000,
            relatedness: 1.0,
            paths: Paths::default(),
            corpus: SyntheticCorpusSpec::default(),
            tasks: TaskPairSpec::default(),
            model: ModelSection::default(),
            pretrain: PretrainConfig::default(),
            scan: ScanSection::default(),
            evolve: SelfEvolutionConfig::default(),
            finetune: FinetuneConfig::default(),
            prompt: PromptConfig::default(),
            kd: KdSection::default(),
            transductive: TransductiveSection::default(),
        }
    }
}

/// Command-line values that override the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub steps: Option<usize>,
}

impl RunConfig {
    /// Reads `path` (or the defaults), applies overrides, propagates the
    /// seed to every stage and validates everything.
    pub fn load(path: Option<&Path>, out: &Path, overrides: &Overrides) -> Result<Self> {
        let mut cfg: RunConfig = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
                serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
        }
        let s = cfg.seed;
        cfg.corpus.seed = s;
        cfg.pretrain.seed = s;
        cfg.evolve.seed = s;
        cfg.finetune.seed = s;
        cfg.prompt.seed = s;
        if let Some(steps) = overrides.steps {
            cfg.pretrain.steps = steps;
            cfg.evolve.steps = steps;
            cfg.finetune.steps = steps;
            cfg.prompt.steps = steps;
        }
        cfg.paths.resolve(out);
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.build(8, 0).validate()?;
        self.pretrain.validate()?;
        self.evolve.validate()?;
        self.finetune.validate()?;
        self.prompt.validate()?;
        if self.max_vocab < 5 {
            return Err(Error::Config("max_vocab must be at least 5".into()));
        }
        if !(0.0..=1.0).contains(&self.relatedness) {
            return Err(Error::Config(format!("relatedness {} outside [0, 1]", self.relatedness)));
        }
        if !(self.kd.temperature > 0.0) || self.kd.eval_interval == 0 {
            return Err(Error::Config("kd temperature and eval_interval must be positive".into()));
        }
        if let LambdaMode::Fixed(v) = self.kd.lambda {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("fixed lambda {v} outside [0, 1]")));
            }
        }
        let t = &self.transductive;
        if !(0.0..=1.0).contains(&t.agreement_threshold) {
            return Err(Error::Config("agreement_threshold must lie in [0, 1]".into()));
        }
        if let Some(c) = t.confidence_filter {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::Config("confidence_filter must lie in [0, 1]".into()));
            }
        }
        Ok(())
    }

    pub fn kd_config(&self) -> KdConfig {
        KdConfig {
            prompt: self.prompt,
            temperature: self.kd.temperature,
            lambda: self.kd.lambda,
            static_lambda: self.kd.static_lambda,
            eval_interval: self.kd.eval_interval,
        }
    }

    pub fn transductive_config(&self) -> TransductiveConfig {
        TransductiveConfig {
            t_max: self.transductive.t_max,
            agreement_threshold: self.transductive.agreement_threshold,
            confidence_filter: self.transductive.confidence_filter,
            finetune: self.finetune,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let err = serde_json::from_str::<RunConfig>(r#"{"pretrain": {"stpes": 3}}"#);
        assert!(err.is_err());
        let err = serde_json::from_str::<RunConfig>(r#"{"sed": 3}"#);
        assert!(err.is_err());
    }

    #[test]
    fn seed_and_steps_override_every_stage() {
        let dir = Path::new("/tmp/run");
        let cfg = RunConfig::load(None, dir, &Overrides { seed: Some(7), steps: Some(3) }).unwrap();
        assert_eq!((cfg.pretrain.seed, cfg.evolve.seed, cfg.prompt.seed, cfg.corpus.seed), (7, 7, 7, 7));
        assert_eq!((cfg.pretrain.steps, cfg.finetune.steps), (3, 3));
        assert_eq!(cfg.paths.corpus, dir.join("corpus.txt"));
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let cfg: RunConfig = serde_json::from_str(r#"{"pretrain": {"steps": 5}, "kd": {"lambda": {"fixed": 0.5}}}"#).unwrap();
        assert_eq!(cfg.pretrain.steps, 5);
        assert_eq!(cfg.pretrain.batch_size, PretrainConfig::default().batch_size);
        assert_eq!(cfg.kd.lambda, LambdaMode::Fixed(0.5));
        assert_eq!(cfg.low_resource_threshold, 300);
    }
}
