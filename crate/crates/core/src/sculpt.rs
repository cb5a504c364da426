//! Privacy-guided memory sculpting: task importance, sensitivity-modulated
//! drift regularization, and threshold-gated unlearning.

use serde::{Deserialize, Serialize};

use crate::error::{ensure_finite, Error, Result};
use crate::linalg::Matrix;
use crate::sensitivity::SensitivityProfile;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SculptConfig {
    pub lambda_max: f64,
    pub lambda_min: f64,
    pub theta: f64,
    pub lambda_unlearn: f64,
}

impl Default for SculptConfig {
    fn default() -> Self {
        Self {
            lambda_max: 10.0,
            lambda_min: 1.0,
            theta: 0.6,
            lambda_unlearn: 1.0,
        }
    }
}

impl SculptConfig {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("lambda_max", self.lambda_max),
            ("lambda_min", self.lambda_min),
            ("lambda_unlearn", self.lambda_unlearn),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(key, format!("must be a non-negative number, got {v}")));
            }
        }
        if self.lambda_min > self.lambda_max {
            return Err(Error::config(
                "lambda_min",
                format!("lambda_min ({}) exceeds lambda_max ({})", self.lambda_min, self.lambda_max),
            ));
        }
        if !(0.0..=1.0).contains(&self.theta) {
            return Err(Error::config("theta", format!("must lie in [0,1], got {}", self.theta)));
        }
        Ok(())
    }
}

/// Frozen `ΔW` of the previous task.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSnapshot {
    pub task_id: u32,
    delta: Matrix,
}

impl AdapterSnapshot {
    pub fn new(task_id: u32, delta: Matrix) -> Self {
        Self { task_id, delta }
    }

    pub fn delta(&self) -> &Matrix {
        &self.delta
    }
}

/// Importance history across completed tasks.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ImportanceState {
    omega_history: Vec<f64>,
    omega_bar: f64,
    #[serde(skip)]
    activation_sum: f64,
    #[serde(skip)]
    activation_count: u64,
}

impl ImportanceState {
    pub fn omega_history(&self) -> &[f64] {
        &self.omega_history
    }

    pub fn omega_bar(&self) -> f64 {
        self.omega_bar
    }

    pub fn tasks_seen(&self) -> usize {
        self.omega_history.len()
    }

    /// Adds one ‖x‖₂ observation at the adapted layer for the current task.
    pub fn observe_activation(&mut self, norm: f64) {
        self.activation_sum += norm;
        self.activation_count += 1;
    }

    /// Running mean of the observed activation norms (0 before any observation).
    pub fn activation_norm(&self) -> f64 {
        if self.activation_count == 0 {
            0.0
        } else {
            self.activation_sum / self.activation_count as f64
        }
    }

    pub fn reset_activations(&mut self) {
        self.activation_sum = 0.0;
        self.activation_count = 0;
    }
}

/// Ω_k = ‖ΔW‖_F · ‖x‖₂.
pub fn task_importance(delta_w: &Matrix, x_norm: f64) -> Result<f64> {
    if !delta_w.is_finite() {
        return Err(Error::NonFinite("ΔW has a non-finite entry".into()));
    }
    if !(x_norm >= 0.0 && x_norm.is_finite()) {
        return Err(Error::InvalidArgument(format!("activation norm must be non-negative, got {x_norm}")));
    }
    Ok(delta_w.frobenius_norm() * x_norm)
}

/// Appends Ω_k and refreshes Ω̄ as an online mean.
pub fn update_running_importance(state: &mut ImportanceState, omega_k: f64) -> Result<()> {
    if !(omega_k >= 0.0 && omega_k.is_finite()) {
        return Err(Error::InvalidArgument(format!("importance must be non-negative, got {omega_k}")));
    }
    state.omega_history.push(omega_k);
    let k = state.omega_history.len() as f64;
    state.omega_bar += (omega_k - state.omega_bar) / k;
    Ok(())
}

/// Mean fused score over every token of a task (stopwords count as 0).
pub fn mean_task_sensitivity(profiles: &[SensitivityProfile]) -> Result<f64> {
    let (sum, n) = profiles
        .iter()
        .flat_map(|p| p.entries.iter())
        .fold((0.0, 0usize), |(s, n), e| (s + e.score, n + 1));
    if n == 0 {
        return Err(Error::InvalidArgument("task has no tokens".into()));
    }
    Ok(sum / n as f64)
}

/// λ_dyn = λ_max·(1 − s̄) + λ_min·s̄.
pub fn dynamic_lambda(s_bar: f64, config: &SculptConfig) -> Result<f64> {
    if !(0.0..=1.0).contains(&s_bar) {
        return Err(Error::InvalidArgument(format!("mean sensitivity must lie in [0,1], got {s_bar}")));
    }
    Ok(config.lambda_max * (1.0 - s_bar) + config.lambda_min * s_bar)
}

/// L_reg = λ_dyn · Ω̄ · ‖ΔW_current − ΔW_snapshot‖²_F.
pub fn reg_loss(current_delta_w: &Matrix, snapshot: &Matrix, lambda_dyn: f64, omega_bar: f64) -> Result<f64> {
    let diff = current_delta_w.sub(snapshot)?;
    Ok(lambda_dyn * omega_bar * diff.frobenius_norm_sq())
}

/// L_unlearn = (1/M) Σ (s_i − θ)·ℓ_i·𝟙[s_i > θ].
pub fn unlearn_loss(scores: &[f64], losses: &[f64], theta: f64) -> Result<f64> {
    if scores.len() != losses.len() {
        return Err(Error::Shape(format!(
            "{} scores vs {} losses",
            scores.len(),
            losses.len()
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidArgument("no tokens".into()));
    }
    let sum: f64 = scores
        .iter()
        .zip(losses)
        .filter(|(s, _)| **s > theta)
        .map(|(s, l)| (s - theta) * l)
        .sum();
    Ok(sum / scores.len() as f64)
}

/// L_total = L_task + L_reg + λ_unlearn · L_unlearn.
pub fn total_loss(l_task: f64, l_reg: f64, l_unlearn: f64, lambda_unlearn: f64) -> Result<f64> {
    ensure_finite("L_task", l_task)?;
    ensure_finite("L_reg", l_reg)?;
    ensure_finite("L_unlearn", l_unlearn)?;
    ensure_finite("lambda_unlearn", lambda_unlearn)?;
    Ok(l_task + l_reg + lambda_unlearn * l_unlearn)
}
