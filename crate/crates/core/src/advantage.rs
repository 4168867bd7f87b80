//! Group-relative advantages.
//!
//! Standard GRPO normalises each reward against its group. The
//! confidence-aware variant keeps that behaviour whenever at least one
//! response clears the reward threshold, and otherwise switches to an
//! absolute penalty `-(beta * w_i + gamma)` where `w_i` is the min-max
//! normalised sequence log-likelihood of the response.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{Prompt, Response};
use crate::rewards::{reward_to_go, Label};

/// One prompt's sampled responses together with their rewards.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseGroup {
    pub prompt: Prompt,
    pub responses: Vec<Response>,
    pub rewards: Vec<f64>,
    /// Sequence log-likelihoods under the sampling policy.
    pub logliks: Vec<f64>,
    pub truth: Option<Label>,
}

impl ResponseGroup {
    pub fn new(
        prompt: Prompt,
        responses: Vec<Response>,
        rewards: Vec<f64>,
        truth: Option<Label>,
    ) -> Result<Self> {
        if responses.is_empty() {
            return Err(Error::input("response group is empty"));
        }
        if rewards.len() != responses.len() {
            return Err(Error::input(format!(
                "{} rewards for {} responses",
                rewards.len(),
                responses.len()
            )));
        }
        if rewards.iter().any(|r| !r.is_finite()) {
            return Err(Error::input("group rewards must be finite"));
        }
        let logliks = responses.iter().map(Response::total_logprob).collect();
        Ok(Self {
            prompt,
            responses,
            rewards,
            logliks,
            truth,
        })
    }

    pub fn size(&self) -> usize {
        self.responses.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    Standard,
    ConfidencePenalty,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct AdvantageDiagnostics {
    pub mean_reward: f64,
    pub std_reward: f64,
    pub loglik_min: f64,
    pub loglik_max: f64,
    pub confidence_set_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AdvantageSet {
    /// `values[i][t]` is the advantage of token `t` of response `i`.
    pub values: Vec<Vec<f64>>,
    pub branch: Branch,
    pub diagnostics: AdvantageDiagnostics,
}

impl AdvantageSet {
    /// First-token value of each response. Every branch produces values that
    /// are constant along a response, so this is the per-response advantage.
    pub fn per_response(&self) -> Vec<f64> {
        self.values.iter().map(|v| v[0]).collect()
    }

    /// All-zero advantages shaped like `group`.
    pub fn zeros(group: &ResponseGroup) -> Self {
        let (mean, std) = reward_stats(&group.rewards);
        let (lo, hi) = loglik_range(&group.logliks);
        Self {
            values: group.responses.iter().map(|r| vec![0.0; r.len()]).collect(),
            branch: Branch::Standard,
            diagnostics: AdvantageDiagnostics {
                mean_reward: mean,
                std_reward: std,
                loglik_min: lo,
                loglik_max: hi,
                confidence_set_size: 0,
            },
        }
    }
}

/// Indices whose reward meets the threshold (inclusive).
pub fn confidence_set(rewards: &[f64], tau: f64) -> Vec<usize> {
    rewards
        .iter()
        .enumerate()
        .filter(|(_, &r)| r >= tau)
        .map(|(i, _)| i)
        .collect()
}

/// Mean and population standard deviation.
///
/// The mean is accumulated as offsets from the first element so that a group
/// of identical rewards yields exactly that reward and a standard deviation of
/// exactly zero.
pub fn reward_stats(rewards: &[f64]) -> (f64, f64) {
    let m = rewards.len() as f64;
    let pivot = rewards[0];
    let mean = pivot + rewards.iter().map(|r| r - pivot).sum::<f64>() / m;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / m;
    (mean, var.sqrt())
}

fn loglik_range(logliks: &[f64]) -> (f64, f64) {
    logliks
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &l| {
            (lo.min(l), hi.max(l))
        })
}

fn broadcast(group: &ResponseGroup, per_response: impl Fn(usize, f64) -> f64) -> Vec<Vec<f64>> {
    group
        .responses
        .iter()
        .zip(&group.rewards)
        .enumerate()
        .map(|(i, (resp, &r))| {
            reward_to_go(r, resp.len())
                .expect("responses are non-empty")
                .into_iter()
                .map(|rtg| per_response(i, rtg))
                .collect()
        })
        .collect()
}

/// Standard GRPO: `(R_{i,t} - mean) / (std + eps)` with group statistics
/// over terminal rewards.
pub fn grpo_advantage(group: &ResponseGroup, eps: f64) -> AdvantageSet {
    let (mean, std) = reward_stats(&group.rewards);
    let (lo, hi) = loglik_range(&group.logliks);
    AdvantageSet {
        values: broadcast(group, |_, rtg| (rtg - mean) / (std + eps)),
        branch: Branch::Standard,
        diagnostics: AdvantageDiagnostics {
            mean_reward: mean,
            std_reward: std,
            loglik_min: lo,
            loglik_max: hi,
            confidence_set_size: 0,
        },
    }
}

/// `w_i = (l_i - l_min) / (l_max - l_min + eps)`, in `[0, 1)`.
pub fn confidence_weights(logliks: &[f64], eps: f64) -> Vec<f64> {
    let (lo, hi) = loglik_range(logliks);
    logliks.iter().map(|l| (l - lo) / (hi - lo + eps)).collect()
}

/// Confidence-aware advantage. Reduces to [`grpo_advantage`] when the
/// confidence set is non-empty.
pub fn ca_advantage(
    group: &ResponseGroup,
    beta: f64,
    gamma: f64,
    tau: f64,
    eps: f64,
) -> AdvantageSet {
    let set_size = confidence_set(&group.rewards, tau).len();
    if set_size >= 1 {
        let mut adv = grpo_advantage(group, eps);
        adv.diagnostics.confidence_set_size = set_size;
        return adv;
    }
    #[cfg(not(feature = "inject-sign-flip"))]
    let sign = -1.0;
    #[cfg(feature = "inject-sign-flip")]
    let sign = 1.0;

    let weights = confidence_weights(&group.logliks, eps);
    let (mean, std) = reward_stats(&group.rewards);
    let (lo, hi) = loglik_range(&group.logliks);
    AdvantageSet {
        values: broadcast(group, |i, _| sign * (beta * weights[i] + gamma)),
        branch: Branch::ConfidencePenalty,
        diagnostics: AdvantageDiagnostics {
            mean_reward: mean,
            std_reward: std,
            loglik_min: lo,
            loglik_max: hi,
            confidence_set_size: 0,
        },
    }
}

/// Something that turns a scored group into advantages. The trainer and the
/// verifier are written against this so alternative estimators can be
/// dropped in.
pub trait AdvantageEstimator: Send + Sync {
    fn estimate(&self, group: &ResponseGroup) -> AdvantageSet;
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Grpo {
    pub eps: f64,
}

impl AdvantageEstimator for Grpo {
    fn estimate(&self, group: &ResponseGroup) -> AdvantageSet {
        grpo_advantage(group, self.eps)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrpoPlusPlus {
    pub beta: f64,
    pub gamma: f64,
    pub tau: f64,
    pub eps: f64,
}

impl GrpoPlusPlus {
    pub fn new(beta: f64, gamma: f64, tau: f64, eps: f64) -> Result<Self> {
        if !(beta > 0.0 && gamma > 0.0 && eps > 0.0) || !tau.is_finite() {
            return Err(Error::config(format!(
                "need beta > 0, gamma > 0, eps > 0 and finite tau; got beta={beta} gamma={gamma} tau={tau} eps={eps}"
            )));
        }
        Ok(Self {
            beta,
            gamma,
            tau,
            eps,
        })
    }
}

impl AdvantageEstimator for GrpoPlusPlus {
    fn estimate(&self, group: &ResponseGroup) -> AdvantageSet {
        ca_advantage(group, self.beta, self.gamma, self.tau, self.eps)
    }
}
