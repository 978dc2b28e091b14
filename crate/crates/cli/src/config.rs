//! Run configuration: structured TOML with a strict schema — unknown keys
//! are errors, which catches typos in ablation studies.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqlab_core::arch::ModelConfig;
use seqlab_core::data::TaskKind;
use seqlab_core::optim::ClipConfig;

use crate::error::{CliError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Output directory for metrics and checkpoints; the SEQLAB_LOG_DIR
    /// environment variable overrides it.
    #[serde(default)]
    pub log_dir: Option<PathBuf>,
    pub model: ModelConfig,
    #[serde(default)]
    pub schedule: Option<ScheduleConfig>,
    #[serde(default)]
    pub training: Option<TrainingConfig>,
    #[serde(default)]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub clip: ClipConfig,
    #[serde(default)]
    pub pretrained: Option<PretrainedPaths>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScheduleConfig {
    /// Replica-scaled warmup/hold/decay schedule; `n` is taken from
    /// `training.replicas`.
    Rnmt {
        #[serde(default = "default_rnmt_base")]
        base: f64,
        warmup: usize,
        decay_start: usize,
        decay_end: usize,
        #[serde(default = "default_rnmt_floor")]
        floor: f64,
    },
    /// Inverse-square-root schedule; `d_model` defaults from the decoder.
    Transformer {
        r0: f64,
        warmup: usize,
        #[serde(default)]
        d_model: Option<usize>,
    },
    Constant { rate: f64 },
}

fn default_rnmt_base() -> f64 {
    1e-4
}

fn default_rnmt_floor() -> f64 {
    5e-5
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub max_steps: u64,
    #[serde(default = "default_one")]
    pub replicas: usize,
    #[serde(default = "default_eval_every")]
    pub eval_every: u64,
    /// Evaluation-window width for the best-window report.
    #[serde(default = "default_window")]
    pub window: usize,
    #[serde(default)]
    pub weight_decay: f64,
    pub batch: BatchScheme,
    #[serde(default = "default_one")]
    pub eval_beam: usize,
    #[serde(default = "default_decode_len")]
    pub max_decode_len: usize,
    /// Dev sentences decoded for BLEU during training; 0 = all.
    #[serde(default)]
    pub dev_bleu_subset: usize,
    #[serde(default)]
    pub checkpoint_every: u64,
    #[serde(default)]
    pub resume_from: Option<PathBuf>,
    #[serde(default)]
    pub early_stop: Option<EarlyStop>,
}

fn default_one() -> usize {
    1
}

fn default_eval_every() -> u64 {
    100
}

fn default_window() -> usize {
    21
}

fn default_decode_len() -> usize {
    32
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum BatchScheme {
    Sentences { size: usize },
    Tokens { budget: usize },
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EarlyStop {
    pub token_accuracy: f64,
    pub bleu: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub task: TaskKind,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub train_pairs: usize,
    pub dev_pairs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainedPaths {
    #[serde(default)]
    pub encoder: Option<PathBuf>,
    #[serde(default)]
    pub transformer_column: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("reading {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        cfg.model.validate().map_err(CliError::Core)?;
        Ok(cfg)
    }

    /// Resolved output directory: env override, then config, then `./runs`.
    pub fn resolved_log_dir(&self) -> PathBuf {
        if let Ok(dir) = std::env::var("SEQLAB_LOG_DIR") {
            return PathBuf::from(dir);
        }
        self.log_dir.clone().unwrap_or_else(|| PathBuf::from("runs"))
    }

    /// Validate the sections a training run needs, with referenced paths
    /// resolvable at startup.
    pub fn require_training(&self) -> Result<(&ScheduleConfig, &TrainingConfig, &DataConfig)> {
        let schedule = self
            .schedule
            .as_ref()
            .ok_or_else(|| CliError::Config("training needs a [schedule] section".into()))?;
        let training = self
            .training
            .as_ref()
            .ok_or_else(|| CliError::Config("training needs a [training] section".into()))?;
        let data = self
            .data
            .as_ref()
            .ok_or_else(|| CliError::Config("training needs a [data] section".into()))?;
        if data.min_len == 0 || data.min_len > data.max_len {
            return Err(CliError::Config(format!(
                "data lengths {}..={} invalid",
                data.min_len, data.max_len
            )));
        }
        if data.vocab_size != self.model.vocab_size {
            return Err(CliError::Config(format!(
                "data vocab {} does not match model vocab {}",
                data.vocab_size, self.model.vocab_size
            )));
        }
        if let Some(path) = &training.resume_from {
            if !path.exists() {
                return Err(CliError::Config(format!("resume_from {} not found", path.display())));
            }
        }
        if let Some(p) = &self.pretrained {
            for path in [&p.encoder, &p.transformer_column].into_iter().flatten() {
                if !path.exists() {
                    return Err(CliError::Config(format!(
                        "pretrained checkpoint {} not found",
                        path.display()
                    )));
                }
            }
        }
        Ok((schedule, training, data))
    }

    /// The per-step learning rate for this configuration.
    pub fn learning_rate(&self, step: u64) -> Result<f64> {
        let schedule = self
            .schedule
            .as_ref()
            .ok_or_else(|| CliError::Config("no [schedule] section".into()))?;
        let replicas = self.training.as_ref().map_or(1, |t| t.replicas);
        schedule.rate(step, replicas, self.model.decoder_dim()).map_err(CliError::Core)
    }
}

impl ScheduleConfig {
    pub fn rate(&self, step: u64, replicas: usize, default_d_model: usize) -> seqlab_core::Result<f64> {
        match *self {
            ScheduleConfig::Rnmt { base, warmup, decay_start, decay_end, floor } => {
                let cfg = seqlab_core::optim::RnmtScheduleConfig {
                    base,
                    n: replicas,
                    p: warmup,
                    s: decay_start,
                    e: decay_end,
                    floor,
                };
                seqlab_core::optim::lr_rnmt(step, &cfg)
            }
            ScheduleConfig::Transformer { r0, warmup, d_model } => {
                let cfg = seqlab_core::optim::TransformerScheduleConfig {
                    r0,
                    p: warmup,
                    d_model: d_model.unwrap_or(default_d_model),
                };
                seqlab_core::optim::lr_transformer(step, &cfg)
            }
            ScheduleConfig::Constant { rate } => Ok(rate),
        }
    }
}

/// Decoder width used as the schedule's default d_model.
pub trait DecoderDim {
    fn decoder_dim(&self) -> usize;
}

impl DecoderDim for ModelConfig {
    fn decoder_dim(&self) -> usize {
        match &self.decoder {
            seqlab_core::arch::DecoderConfig::Rnmt(d) => d.units,
            seqlab_core::arch::DecoderConfig::Transformer(d) => d.d_model,
            seqlab_core::arch::DecoderConfig::Conv(d) => d.embed_dim,
        }
    }
}

/// Ablation toggles: each removes exactly one technique.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationToggle {
    LabelSmoothing,
    MultiHead,
    LayerNorm,
    SyncTraining,
}

impl AblationToggle {
    pub fn parse(name: &str) -> Result<AblationToggle> {
        Ok(match name {
            "label_smoothing" => AblationToggle::LabelSmoothing,
            "multi_head" => AblationToggle::MultiHead,
            "layer_norm" => AblationToggle::LayerNorm,
            "sync_training" => AblationToggle::SyncTraining,
            other => return Err(CliError::Core(seqlab_core::Error::UnknownToggle(other.into()))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            AblationToggle::LabelSmoothing => "label_smoothing",
            AblationToggle::MultiHead => "multi_head",
            AblationToggle::LayerNorm => "layer_norm",
            AblationToggle::SyncTraining => "sync_training",
        }
    }
}

/// Derive the ablated run: identical except for the removed technique.
pub fn apply_ablation(run: &RunConfig, toggle: AblationToggle) -> RunConfig {
    let mut out = run.clone();
    match toggle {
        AblationToggle::LabelSmoothing => out.model.label_smoothing = 0.0,
        AblationToggle::MultiHead => out.model.set_all_heads(1),
        AblationToggle::LayerNorm => out.model.layer_norm = false,
        AblationToggle::SyncTraining => {
            // single replica, warmup removed: the replica-scaled schedule's
            // warmup term degenerates at n=1, the inverse-root schedule
            // starts decaying immediately
            if let Some(t) = &mut out.training {
                t.replicas = 1;
            }
            if let Some(ScheduleConfig::Transformer { warmup, .. }) = &mut out.schedule {
                *warmup = 1;
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
seed = 7
[model]
family = "rnmt_plus"
vocab_size = 16
[model.encoder]
kind = "rnmt"
layers = 2
units = 16
embed_dim = 16
[model.decoder]
kind = "rnmt"
layers = 2
units = 16
embed_dim = 16
attention_heads = 2
"#;

    #[test]
    fn minimal_config_parses() {
        let cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.model.validate().unwrap();
        assert_eq!(cfg.seed, 7);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad = format!("{MINIMAL}\nunknown_top_level = 3\n");
        assert!(toml::from_str::<RunConfig>(&bad).is_err());
        let bad2 = MINIMAL.replace("vocab_size = 16", "vocab_size = 16\nvocabulary = 16");
        assert!(toml::from_str::<RunConfig>(&bad2).is_err());
    }

    #[test]
    fn schedule_variants_parse() {
        let with_sched = format!(
            "{MINIMAL}\n[schedule]\nkind = \"rnmt\"\nwarmup = 10\ndecay_start = 100\ndecay_end = 200\n"
        );
        let cfg: RunConfig = toml::from_str(&with_sched).unwrap();
        let lr = cfg.learning_rate(0).unwrap();
        assert!((lr - 1e-4).abs() < 1e-18);

        let with_trans = format!(
            "{MINIMAL}\n[schedule]\nkind = \"transformer\"\nr0 = 2.0\nwarmup = 8000\nd_model = 512\n"
        );
        let cfg: RunConfig = toml::from_str(&with_trans).unwrap();
        let lr = cfg.learning_rate(7999).unwrap();
        assert!((lr - 9.882e-4).abs() < 1e-6);
    }

    #[test]
    fn ablation_toggles() {
        let mut cfg: RunConfig = toml::from_str(MINIMAL).unwrap();
        cfg.model.label_smoothing = 0.1;
        let dropped = apply_ablation(&cfg, AblationToggle::LabelSmoothing);
        assert_eq!(dropped.model.label_smoothing, 0.0);

        let heads = apply_ablation(&cfg, AblationToggle::MultiHead);
        if let seqlab_core::arch::DecoderConfig::Rnmt(d) = &heads.model.decoder {
            assert_eq!(d.attention_heads, 1);
        } else {
            panic!();
        }

        let ln = apply_ablation(&cfg, AblationToggle::LayerNorm);
        assert!(!ln.model.layer_norm);

        assert!(AblationToggle::parse("nonsense").is_err());
    }
}
