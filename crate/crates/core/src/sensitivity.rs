//! Per-token privacy sensitivity.
//!
//! Each position gets a predictive-uncertainty score (surprisal under the
//! current model), a contextual-discriminativeness score (how concentrated the
//! token is in few tasks), and a fused score in `[0,1)`. Stopwords are forced
//! to zero after fusion.

use serde::Serialize;

use crate::corpus::{CorpusStats, StopwordSet, TokenId, TokenizedSequence, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{LoraAdapter, TinyLm};
use crate::privacy::{allocate_budget, noise_sigma, PrivacyConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityConfig {
    pub alpha: f64,
    pub stopwords: StopwordSet,
    pub clamp_negative_score2: bool,
}

impl Default for SensitivityConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            stopwords: StopwordSet::bundled(),
            clamp_negative_score2: true,
        }
    }
}

impl SensitivityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::config("alpha", format!("must lie in [0,1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TokenSensitivity {
    pub token: TokenId,
    pub score1: f64,
    pub score2: f64,
    pub score: f64,
    pub epsilon: Option<f64>,
    pub sigma: Option<f64>,
    pub is_stopword: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityProfile {
    pub sequence_id: usize,
    pub entries: Vec<TokenSensitivity>,
}

impl SensitivityProfile {
    pub fn scores(&self) -> Vec<f64> {
        self.entries.iter().map(|e| e.score).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Score₁ = −ln P(t_i | t_<i) at 0-based position `i ≥ 1`, on clean embeddings.
pub fn surprisal_score(
    model: &TinyLm,
    adapter: Option<&LoraAdapter>,
    seq: &TokenizedSequence,
    i: usize,
) -> Result<f64> {
    if i == 0 || i >= seq.len() {
        return Err(Error::InvalidArgument(format!(
            "position {i} has no preceding context or is out of range for length {}",
            seq.len()
        )));
    }
    let p = model.predict_at(adapter, &seq.tokens, i, None);
    Ok(-p[seq.tokens[i]].ln())
}

/// Score₂ = (1/N) Σ_n p_n(t) · ln(N / (1 + d(t))), optionally clamped at 0.
pub fn contextual_score(stats: &CorpusStats, token: TokenId, clamp_negative: bool) -> f64 {
    let n = stats.num_tasks() as f64;
    let spread = (n / (1.0 + stats.support(token) as f64)).ln();
    let salience: f64 = (0..stats.num_tasks()).map(|k| stats.salience(k, token)).sum();
    let raw = salience * spread / n;
    if clamp_negative {
        raw.max(0.0)
    } else {
        raw
    }
}

/// Score = 1 − exp(−(α·s₁ + (1−α)·s₂)).
pub fn fuse_scores(score1: f64, score2: f64, alpha: f64) -> Result<f64> {
    if !(score1 >= 0.0 && score2 >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "component scores must be non-negative, got ({score1}, {score2})"
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("alpha must lie in [0,1], got {alpha}")));
    }
    let z = alpha * score1 + (1.0 - alpha) * score2;
    Ok((-(-z).exp_m1()).min(MAX_SCORE))
}

/// Largest double below 1; `1 − e^{−z}` rounds to exactly 1 once z exceeds ~37.
pub const MAX_SCORE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Full per-position profile for one sequence, including ε_i and σ_i for positive scores.
pub fn build_profile(
    model: &TinyLm,
    adapter: Option<&LoraAdapter>,
    stats: &CorpusStats,
    vocab: &Vocabulary,
    seq: &TokenizedSequence,
    config: &SensitivityConfig,
    privacy: &PrivacyConfig,
) -> Result<SensitivityProfile> {
    config.validate()?;
    let mut entries = Vec::with_capacity(seq.len());
    for (i, &token) in seq.tokens.iter().enumerate() {
        let score1 = if i == 0 {
            0.0
        } else {
            surprisal_score(model, adapter, seq, i)?
        };
        let score2 = contextual_score(stats, token, config.clamp_negative_score2);
        let is_stopword = config.stopwords.contains(vocab.surface(token));
        // unclamped Score₂ may push z below 0; the fused score still floors at 0
        let z = config.alpha * score1 + (1.0 - config.alpha) * score2;
        let mut score = if z <= 0.0 {
            0.0
        } else {
            (-(-z).exp_m1()).min(MAX_SCORE)
        };
        if is_stopword {
            score = 0.0;
        }
        let (epsilon, sigma) = if score > 0.0 {
            let eps = allocate_budget(score, privacy)?;
            (Some(eps), Some(noise_sigma(eps, privacy.delta, privacy.clip_norm, privacy.variant)?))
        } else {
            (None, None)
        };
        entries.push(TokenSensitivity {
            token,
            score1,
            score2,
            score,
            epsilon,
            sigma,
            is_stopword,
        });
    }
    Ok(SensitivityProfile {
        sequence_id: seq.id,
        entries,
    })
}

/// Forces every stopword entry to zero score and drops its budget.
pub fn apply_stopword_mask(profile: &mut SensitivityProfile) {
    for e in profile.entries.iter_mut().filter(|e| e.is_stopword) {
        e.score = 0.0;
        e.epsilon = None;
        e.sigma = None;
    }
}
