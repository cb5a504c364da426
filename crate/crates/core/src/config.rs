//! Flat JSON run configuration.
//!
//! Every key is optional; missing keys take their defaults and unknown keys are
//! rejected. The resolved configuration is written next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{StopwordSet, DEFAULT_TAU, DEFAULT_VOCAB_CAP};
use crate::error::{Error, Result};
use crate::optim::OptimizerKind;
use crate::privacy::{PrivacyConfig, SensitivityVariant};
use crate::sculpt::SculptConfig;
use crate::sensitivity::SensitivityConfig;
use crate::synth::SynthConfig;
use crate::trainer::{Mode, RunConfig, StatsScope};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub mode: Mode,
    pub task_order: Vec<u32>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub optimizer: OptimizerKind,
    pub weight_decay: f64,
    pub seed: u64,
    pub alpha: f64,
    pub clamp_negative_score2: bool,
    /// Path to a newline-separated stopword file; the bundled list when absent.
    pub stopwords: Option<PathBuf>,
    pub eps_lower: f64,
    pub eps_upper: f64,
    pub delta: f64,
    pub delta_prime: f64,
    pub clip_norm: f64,
    pub sensitivity_variant: SensitivityVariant,
    /// Defaults to `eps_lower`.
    pub uniform_epsilon: Option<f64>,
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub theta: f64,
    pub lambda_unlearn: f64,
    pub tau: f64,
    pub stats_scope: StatsScope,
    pub d_emb: usize,
    pub n_ctx: usize,
    pub d_hidden: usize,
    pub rank: usize,
    pub full_finetune: bool,
    pub vocab_cap: usize,
    /// JSON-lines corpus; the synthetic stream when absent.
    pub corpus: Option<PathBuf>,
    pub synth_tasks: usize,
    pub synth_train: usize,
    pub synth_eval: usize,
    pub synth_sensitive_rate: f64,
}

impl Default for FileConfig {
    fn default() -> Self {
        let run = RunConfig::default();
        Self {
            mode: run.mode,
            task_order: Vec::new(),
            epochs: run.epochs,
            batch_size: run.batch_size,
            lr: run.lr,
            optimizer: run.optimizer,
            weight_decay: run.weight_decay,
            seed: run.seed,
            alpha: run.sensitivity.alpha,
            clamp_negative_score2: run.sensitivity.clamp_negative_score2,
            stopwords: None,
            eps_lower: run.privacy.eps_lower,
            eps_upper: run.privacy.eps_upper,
            delta: run.privacy.delta,
            delta_prime: run.privacy.delta_prime,
            clip_norm: run.privacy.clip_norm,
            sensitivity_variant: run.privacy.variant,
            uniform_epsilon: None,
            lambda_max: run.sculpt.lambda_max,
            lambda_min: run.sculpt.lambda_min,
            theta: run.sculpt.theta,
            lambda_unlearn: run.sculpt.lambda_unlearn,
            tau: DEFAULT_TAU,
            stats_scope: run.stats_scope,
            d_emb: run.d_emb,
            n_ctx: run.n_ctx,
            d_hidden: run.d_hidden,
            rank: run.rank,
            full_finetune: run.full_finetune,
            vocab_cap: DEFAULT_VOCAB_CAP,
            corpus: None,
            synth_tasks: run.synth.num_tasks,
            synth_train: run.synth.train_per_task,
            synth_eval: run.synth.eval_per_task,
            synth_sensitive_rate: run.synth.sensitive_rate,
        }
    }
}

impl FileConfig {
    /// Builds and validates the run configuration.
    pub fn resolve(&self) -> Result<RunConfig> {
        let stopwords = match &self.stopwords {
            Some(p) => StopwordSet::from_path(p)?,
            None => StopwordSet::bundled(),
        };
        let run = RunConfig {
            mode: self.mode,
            task_order: self.task_order.clone(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            optimizer: self.optimizer,
            weight_decay: self.weight_decay,
            seed: self.seed,
            sensitivity: SensitivityConfig {
                alpha: self.alpha,
                stopwords,
                clamp_negative_score2: self.clamp_negative_score2,
            },
            privacy: PrivacyConfig {
                eps_lower: self.eps_lower,
                eps_upper: self.eps_upper,
                delta: self.delta,
                delta_prime: self.delta_prime,
                clip_norm: self.clip_norm,
                variant: self.sensitivity_variant,
            },
            sculpt: SculptConfig {
                lambda_max: self.lambda_max,
                lambda_min: self.lambda_min,
                theta: self.theta,
                lambda_unlearn: self.lambda_unlearn,
            },
            uniform_epsilon: self.uniform_epsilon.unwrap_or(self.eps_lower),
            tau: self.tau,
            stats_scope: self.stats_scope,
            d_emb: self.d_emb,
            n_ctx: self.n_ctx,
            d_hidden: self.d_hidden,
            rank: self.rank,
            full_finetune: self.full_finetune,
            vocab_cap: self.vocab_cap,
            synth: SynthConfig {
                num_tasks: self.synth_tasks,
                train_per_task: self.synth_train,
                eval_per_task: self.synth_eval,
                sensitive_rate: self.synth_sensitive_rate,
                seed: 0,
            },
        };
        run.validate()?;
        if self.vocab_cap < 3 {
            return Err(Error::config("vocab_cap", "must be at least 3"));
        }
        Ok(run)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

/// Parses a flat JSON object into a validated configuration.
pub fn parse_config(raw: &str) -> Result<(FileConfig, RunConfig)> {
    let file: FileConfig = serde_json::from_str(raw).map_err(|e| {
        let msg = e.to_string();
        // serde reports unknown keys as "unknown field `x`"
        let key = msg
            .split('`')
            .nth(1)
            .filter(|_| msg.starts_with("unknown field") || msg.starts_with("invalid type"))
            .unwrap_or("<root>")
            .to_string();
        Error::Config { key, message: msg }
    })?;
    let run = file.resolve()?;
    Ok((file, run))
}

pub fn load_config(path: &Path) -> Result<(FileConfig, RunConfig)> {
    let raw = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_config(&raw)
}
