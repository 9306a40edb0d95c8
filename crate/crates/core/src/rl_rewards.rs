//! Reward shaping for planner RL.
//!
//! Stage 1 rewards plan format and reasoning length:
//! `R1 = R_tag + R_region + R_reasoning`.
//! Stage 2 adds judge scores, with consistency gated by effect so that an
//! unchanged image cannot collect the consistency reward:
//! `R2 = R_T + R_E + R_C * R_E + lambda * R1`.
//! [`group_advantages`] standardizes rewards within one rollout group.

use serde::{Deserialize, Serialize};

use crate::plan_format::PlanParseReport;

pub const DEFAULT_LAMBDA: f64 = 0.1;
pub const ADVANTAGE_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum RewardError {
    #[error("{name} = {value} is outside [0, 1]")]
    Score { name: &'static str, value: f64 },
    #[error("judge rating {0} is outside [1, 5]")]
    Rating(f64),
    #[error("lambda must be finite and non-negative, got {0}")]
    Lambda(f64),
    #[error("invalid stage-1 config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub tag_reward_value: f64,
    pub region_reward_value: f64,
    /// Word count at which the reasoning reward saturates.
    pub reasoning_cap_words: usize,
    pub reasoning_max_value: f64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { tag_reward_value: 1.0, region_reward_value: 1.0, reasoning_cap_words: 128, reasoning_max_value: 1.0 }
    }
}

impl Stage1Config {
    pub fn validate(&self) -> Result<(), RewardError> {
        let values = [self.tag_reward_value, self.region_reward_value, self.reasoning_max_value];
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(RewardError::Config("reward values must be finite and non-negative".into()));
        }
        if self.reasoning_cap_words == 0 {
            return Err(RewardError::Config("reasoning_cap_words must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reward configuration document: stage-1 values plus the stage-2 weight.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RewardConfig {
    pub stage1: Stage1Config,
    pub lambda: f64,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self { stage1: Stage1Config::default(), lambda: DEFAULT_LAMBDA }
    }
}

/// Judge scores normalized to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JudgeScores {
    pub target: f64,
    pub effect: f64,
    pub consistency: f64,
}

impl JudgeScores {
    pub fn new(target: f64, effect: f64, consistency: f64) -> Result<Self, RewardError> {
        let s = Self { target, effect, consistency };
        s.validate()?;
        Ok(s)
    }

    /// From 5-point ratings via `(s - 1) / 4`.
    pub fn from_ratings(target: f64, effect: f64, consistency: f64) -> Result<Self, RewardError> {
        let norm = |s: f64| {
            if (1.0..=5.0).contains(&s) {
                Ok((s - 1.0) / 4.0)
            } else {
                Err(RewardError::Rating(s))
            }
        };
        Self::new(norm(target)?, norm(effect)?, norm(consistency)?)
    }

    pub fn validate(&self) -> Result<(), RewardError> {
        for (name, value) in [("target", self.target), ("effect", self.effect), ("consistency", self.consistency)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(RewardError::Score { name, value });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stage1Reward {
    pub r_tag: f64,
    pub r_region: f64,
    pub r_reasoning: f64,
    pub r1_total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_tag: f64,
    pub r_region: f64,
    pub r_reasoning: f64,
    pub r1_total: f64,
    pub r_target: f64,
    pub r_effect: f64,
    pub r_consistency: f64,
    pub r_consistency_weighted: f64,
    pub lambda: f64,
    pub r2_total: f64,
}

impl RewardBreakdown {
    /// `R2` recomputed from the stored components.
    pub fn recompute_r2(&self) -> f64 {
        self.r_target + self.r_effect + self.r_consistency_weighted + self.lambda * self.r1_total
    }

    pub fn recompute_r1(&self) -> f64 {
        self.r_tag + self.r_region + self.r_reasoning
    }
}

pub fn reasoning_reward(word_count: usize, cfg: &Stage1Config) -> f64 {
    let frac = (word_count as f64 / cfg.reasoning_cap_words as f64).min(1.0);
    cfg.reasoning_max_value * frac
}

pub fn stage1_reward(report: &PlanParseReport, cfg: &Stage1Config) -> Stage1Reward {
    let r_tag = if report.tag_ok { cfg.tag_reward_value } else { 0.0 };
    let r_region = if report.region_json_ok { cfg.region_reward_value } else { 0.0 };
    let r_reasoning = reasoning_reward(report.reasoning_word_count, cfg);
    Stage1Reward { r_tag, r_region, r_reasoning, r1_total: r_tag + r_region + r_reasoning }
}

pub fn stage2_reward(scores: &JudgeScores, stage1: &Stage1Reward, lambda: f64) -> Result<RewardBreakdown, RewardError> {
    scores.validate()?;
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(RewardError::Lambda(lambda));
    }
    let mut b = RewardBreakdown {
        r_tag: stage1.r_tag,
        r_region: stage1.r_region,
        r_reasoning: stage1.r_reasoning,
        r1_total: stage1.r1_total,
        r_target: scores.target,
        r_effect: scores.effect,
        r_consistency: scores.consistency,
        r_consistency_weighted: scores.consistency * scores.effect,
        lambda,
        r2_total: 0.0,
    };
    b.r2_total = b.recompute_r2();
    Ok(b)
}

/// `(r_i - mean) / (std + eps)` with population std; all zeros when the
/// group has no spread.
pub fn group_advantages(rewards: &[f64]) -> Vec<f64> {
    if rewards.is_empty() {
        return Vec::new();
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if std == 0.0 {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / (std + ADVANTAGE_EPS)).collect()
}
