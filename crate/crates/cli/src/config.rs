//! Layered run configuration: built-in defaults, then the optional JSON
//! config file, then command-line flags. The fully resolved view is logged
//! at startup so every run is reproducible from its log line.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use gensf_core::copy::CopyMode;
use gensf_core::templating::TemplateMode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum OnOff {
    On,
    Off,
}

impl OnOff {
    pub fn as_bool(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum CopySourceArg {
    Utterance,
    FullContext,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum TemplateArg {
    Natural,
    Trivial,
}

impl TemplateArg {
    pub fn mode(self) -> TemplateMode {
        match self {
            TemplateArg::Natural => TemplateMode::Natural,
            TemplateArg::Trivial => TemplateMode::Trivial,
        }
    }
}

/// Optional config file sections; absent keys fall back to defaults.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub corpus: CorpusSection,
    pub model: ModelSection,
    pub train: TrainSection,
    pub pipeline: PipelineSection,
    pub recovery: RecoverySection,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub train_size: Option<usize>,
    pub test_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub layers: Option<usize>,
    pub heads: Option<usize>,
    pub hidden_dim: Option<usize>,
    pub context_window: Option<usize>,
    pub vocab_size: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub epochs: Option<usize>,
    pub weight_decay: Option<f64>,
    pub negative_ratio: Option<f64>,
    pub clip_norm: Option<f64>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    pub copy: Option<String>,
    pub copy_source: Option<String>,
    pub constrained: Option<bool>,
    pub recover: Option<bool>,
    pub max_len: Option<usize>,
    pub template: Option<String>,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecoverySection {
    pub threshold_ratio: Option<f64>,
    pub max_span_tokens: Option<usize>,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("reading config file {}", p.display()))?;
                serde_json::from_str(&text)
                    .with_context(|| format!("parsing config file {}", p.display()))
            }
        }
    }
}

/// The fully resolved run configuration, logged at startup.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: Option<usize>,
    pub weight_decay: f64,
    pub negative_ratio: Option<f64>,
    pub clip_norm: f64,
    pub copy: String,
    pub constrained: bool,
    pub recover: bool,
    pub max_len: usize,
    pub template: String,
    pub recover_threshold: f64,
    pub max_span_tokens: usize,
}

#[derive(Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub copy: Option<OnOff>,
    pub copy_source: Option<CopySourceArg>,
    pub constrained: Option<OnOff>,
    pub recover: Option<OnOff>,
    pub recover_threshold: Option<f64>,
    pub max_len: Option<usize>,
    pub template: Option<TemplateArg>,
}


fn copy_mode_from(name: &str) -> Result<CopyMode> {
    match name {
        "off" => Ok(CopyMode::Off),
        "utterance" | "on" => Ok(CopyMode::Utterance),
        "full-context" => Ok(CopyMode::FullContext),
        other => anyhow::bail!("unknown copy mode '{other}'"),
    }
}

impl RunConfig {
    /// defaults <- file <- flags; seed: flag > file > GENSF_SEED > 7.
    pub fn resolve(file: &FileConfig, ov: &Overrides) -> Result<RunConfig> {
        let env_seed = std::env::var("GENSF_SEED")
            .ok()
            .map(|s| {
                s.parse::<u64>()
                    .with_context(|| format!("GENSF_SEED must be an integer, got '{s}'"))
            })
            .transpose()?;
        let seed = ov.seed.or(file.seed).or(env_seed).unwrap_or(7);

        let copy = match (ov.copy, ov.copy_source) {
            (Some(OnOff::Off), _) => CopyMode::Off,
            (_, Some(CopySourceArg::FullContext)) => CopyMode::FullContext,
            (Some(OnOff::On), _) | (_, Some(CopySourceArg::Utterance)) => CopyMode::Utterance,
            (None, None) => match (&file.pipeline.copy, &file.pipeline.copy_source) {
                (Some(c), _) if c == "off" => CopyMode::Off,
                (_, Some(s)) if s == "full-context" => CopyMode::FullContext,
                _ => CopyMode::Utterance,
            },
        };
        let template = ov
            .template
            .map(|t| t.mode())
            .or(match file.pipeline.template.as_deref() {
                Some("trivial") => Some(TemplateMode::Trivial),
                Some("natural") => Some(TemplateMode::Natural),
                _ => None,
            })
            .unwrap_or(TemplateMode::Natural);

        Ok(RunConfig {
            seed,
            train_size: file.corpus.train_size.unwrap_or(2000),
            test_size: file.corpus.test_size.unwrap_or(500),
            layers: file.model.layers.unwrap_or(2),
            heads: file.model.heads.unwrap_or(4),
            hidden_dim: file.model.hidden_dim.unwrap_or(96),
            context_window: file.model.context_window.unwrap_or(128),
            vocab_size: file.model.vocab_size.unwrap_or(1283),
            learning_rate: file.train.learning_rate.unwrap_or(5e-5),
            batch_size: file.train.batch_size.unwrap_or(16),
            epochs: file.train.epochs,
            weight_decay: file.train.weight_decay.unwrap_or(0.01),
            negative_ratio: file.train.negative_ratio,
            clip_norm: file.train.clip_norm.unwrap_or(1.0),
            copy: match copy {
                CopyMode::Off => "off".into(),
                CopyMode::Utterance => "utterance".into(),
                CopyMode::FullContext => "full-context".into(),
            },
            constrained: ov
                .constrained
                .map(OnOff::as_bool)
                .or(file.pipeline.constrained)
                .unwrap_or(true),
            recover: ov
                .recover
                .map(OnOff::as_bool)
                .or(file.pipeline.recover)
                .unwrap_or(true),
            max_len: ov.max_len.or(file.pipeline.max_len).unwrap_or(16),
            template: match template {
                TemplateMode::Natural => "natural".into(),
                TemplateMode::Trivial => "trivial".into(),
            },
            recover_threshold: ov
                .recover_threshold
                .or(file.recovery.threshold_ratio)
                .unwrap_or(0.3),
            max_span_tokens: file.recovery.max_span_tokens.unwrap_or(10),
        })
    }

    pub fn copy_mode(&self) -> CopyMode {
        copy_mode_from(&self.copy).expect("resolved copy mode is valid")
    }

    pub fn template_mode(&self) -> TemplateMode {
        if self.template == "trivial" {
            TemplateMode::Trivial
        } else {
            TemplateMode::Natural
        }
    }

    pub fn log(&self) {
        eprintln!(
            "resolved config: {}",
            serde_json::to_string(self).expect("config serializes")
        );
    }
}
