//! Distance-aware rewards and the clipped group-relative policy objective.
//!
//! The scoring reward combines a smooth distance term with a coarse bucket
//! agreement term:
//!
//! ```text
//! r(pred, human) = exp(-|pred - human| / sigma) + exp(-|b(pred) - b(human)|)
//! b(s) = min(5, max(0, floor(s)))
//! ```
//!
//! so a prediction is rewarded both for being numerically close and for
//! landing in the right integer score band. Rewards live in `(0, 2]`, with
//! the maximum attained exactly at `pred == human`.

use thiserror::Error;

/// Default temperature of the distance term.
pub const DEFAULT_SIGMA: f64 = 1.0;

/// Guard applied to the advantage denominator so constant-reward groups
/// normalize to zero instead of dividing by zero.
pub const ADVANTAGE_STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum RewardError {
    #[error("non-finite {name}: {value}")]
    NonFiniteInput { name: &'static str, value: f64 },
    #[error("sigma must be positive, got {0}")]
    InvalidSigma(f64),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("group is empty")]
    EmptyGroup,
}

/// Integer score bucket: `min(5, max(0, floor(s)))`.
pub fn bucket(score: f64) -> Result<u8, RewardError> {
    if !score.is_finite() {
        return Err(RewardError::NonFiniteInput { name: "score", value: score });
    }
    Ok((score.floor() as i64).clamp(0, 5) as u8)
}

/// The scoring reward at temperature `sigma` (see module docs).
pub fn reward(pred: f64, human: f64, sigma: f64) -> Result<f64, RewardError> {
    if !pred.is_finite() {
        return Err(RewardError::NonFiniteInput { name: "pred", value: pred });
    }
    if !human.is_finite() {
        return Err(RewardError::NonFiniteInput { name: "human", value: human });
    }
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(RewardError::InvalidSigma(sigma));
    }
    let dist = (-(pred - human).abs() / sigma).exp();
    let db = (bucket(pred)? as f64 - bucket(human)? as f64).abs();
    Ok(dist + (-db).exp())
}

/// Group-relative advantages: `(r - mean) / max(std, ADVANTAGE_STD_FLOOR)`,
/// with the population standard deviation of the group.
pub fn group_advantages(rewards: &[f64]) -> Result<Vec<f64>, RewardError> {
    if rewards.is_empty() {
        return Err(RewardError::EmptyGroup);
    }
    for &r in rewards {
        if !r.is_finite() {
            return Err(RewardError::NonFiniteInput { name: "reward", value: r });
        }
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n;
    let denom = var.sqrt().max(ADVANTAGE_STD_FLOOR);
    Ok(rewards.iter().map(|r| (r - mean) / denom).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    /// Clip half-width epsilon.
    pub epsilon: f64,
    /// KL penalty weight beta.
    pub beta: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig { epsilon: 0.1, beta: 0.01 }
    }
}

/// Clipped surrogate objective, symmetric-clip form:
///
/// ```text
/// J = mean_i clip(ratio_i * advantage_i, -epsilon, +epsilon) - beta * kl
/// ```
///
/// The per-sample product of importance ratio and advantage is clamped into
/// the symmetric band before averaging. See [`grpo_surrogate_standard`] for
/// the conventional PPO-style ratio clip.
pub fn grpo_surrogate(
    ratios: &[f64],
    advantages: &[f64],
    kl: f64,
    cfg: GrpoConfig,
) -> Result<f64, RewardError> {
    let terms = per_sample_inputs(ratios, advantages, kl)?;
    let mean = terms
        .map(|(r, a)| (r * a).clamp(-cfg.epsilon, cfg.epsilon))
        .sum::<f64>()
        / ratios.len() as f64;
    Ok(mean - cfg.beta * kl)
}

/// Clipped surrogate objective, standard ratio-clip form:
///
/// ```text
/// J = mean_i min(ratio_i * A_i, clip(ratio_i, 1-epsilon, 1+epsilon) * A_i) - beta * kl
/// ```
pub fn grpo_surrogate_standard(
    ratios: &[f64],
    advantages: &[f64],
    kl: f64,
    cfg: GrpoConfig,
) -> Result<f64, RewardError> {
    let terms = per_sample_inputs(ratios, advantages, kl)?;
    let mean = terms
        .map(|(r, a)| (r * a).min(r.clamp(1.0 - cfg.epsilon, 1.0 + cfg.epsilon) * a))
        .sum::<f64>()
        / ratios.len() as f64;
    Ok(mean - cfg.beta * kl)
}

fn per_sample_inputs<'a>(
    ratios: &'a [f64],
    advantages: &'a [f64],
    kl: f64,
) -> Result<impl Iterator<Item = (f64, f64)> + 'a, RewardError> {
    if ratios.len() != advantages.len() || ratios.is_empty() {
        return Err(RewardError::LengthMismatch {
            left: ratios.len(),
            right: advantages.len(),
        });
    }
    for &v in ratios.iter().chain(advantages) {
        if !v.is_finite() {
            return Err(RewardError::NonFiniteInput { name: "objective input", value: v });
        }
    }
    if !kl.is_finite() {
        return Err(RewardError::NonFiniteInput { name: "kl", value: kl });
    }
    Ok(ratios.iter().copied().zip(advantages.iter().copied()))
}
