//! Clipped group-relative surrogate objective and its analytic gradient.
//!
//! ```text
//! J = mean_q (1/m) sum_i (1/|o_i|) sum_t min(rho_it * A_it, clip(rho_it, 1-e, 1+e) * A_it)
//! ```
//!
//! Advantages and the old policy are constants. Where the minimum selects
//! the clipped branch the token contributes no gradient; exact ties select
//! the unclipped branch. An optional KL penalty against a reference policy
//! (the `k3` estimator on sampled tokens) can be subtracted; it is off unless
//! a coefficient is supplied.

use serde::{Deserialize, Serialize};

use crate::advantage::{AdvantageSet, ResponseGroup};
use crate::error::{Error, Result};
use crate::policy::{log_softmax, token_logprobs, PolicyParams, PolicyShape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipConfig {
    pub clip_eps: f64,
}

impl ClipConfig {
    pub fn new(clip_eps: f64) -> Result<Self> {
        if !(clip_eps > 0.0 && clip_eps < 1.0) {
            return Err(Error::config(format!(
                "clip_eps must lie in (0, 1), got {clip_eps}"
            )));
        }
        Ok(Self { clip_eps })
    }
}

impl Default for ClipConfig {
    fn default() -> Self {
        Self { clip_eps: 0.2 }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct KlPenalty<'a> {
    pub reference: &'a PolicyParams,
    pub coeff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RatioStats {
    pub min: f64,
    pub max: f64,
    pub mean: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveReport {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub ratio_stats: RatioStats,
    /// Fraction of tokens where the clipped branch strictly wins the min.
    pub clipped_fraction: f64,
}

impl ObjectiveReport {
    pub fn gradient_norm(&self) -> f64 {
        l2_norm(&self.gradient)
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `min(rho * adv, clip(rho) * adv)`.
pub fn clipped_term(rho: f64, adv: f64, clip_eps: f64) -> f64 {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    (rho * adv).min(clipped * adv)
}

/// Whether the unclipped branch carries the gradient at this token.
fn unclipped_selected(rho: f64, adv: f64, clip_eps: f64) -> bool {
    let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps);
    rho * adv <= clipped * adv
}

pub fn importance_ratios(
    params: &PolicyParams,
    old_params: &PolicyParams,
    group: &ResponseGroup,
) -> Result<Vec<Vec<f64>>> {
    if params.shape() != old_params.shape() {
        return Err(Error::input(
            "current and old parameters have different shapes",
        ));
    }
    group
        .responses
        .iter()
        .map(|resp| {
            let new = token_logprobs(params, &group.prompt, resp.tokens())?;
            let old = token_logprobs(old_params, &group.prompt, resp.tokens())?;
            Ok(new.iter().zip(&old).map(|(n, o)| (n - o).exp()).collect())
        })
        .collect()
}

/// The surrogate for one batch of groups, with old-policy log-probabilities
/// cached so it can be evaluated at many parameter values.
pub struct Surrogate<'a> {
    shape: PolicyShape,
    groups: &'a [ResponseGroup],
    advantages: &'a [AdvantageSet],
    old_logprobs: Vec<Vec<Vec<f64>>>,
    ref_logprobs: Option<Vec<Vec<Vec<f64>>>>,
    kl_coeff: f64,
    clip: ClipConfig,
}

impl<'a> Surrogate<'a> {
    pub fn new(
        old_params: &PolicyParams,
        groups: &'a [ResponseGroup],
        advantages: &'a [AdvantageSet],
        clip: ClipConfig,
        kl: Option<KlPenalty<'_>>,
    ) -> Result<Self> {
        if groups.is_empty() {
            return Err(Error::input("objective needs at least one group"));
        }
        if groups.len() != advantages.len() {
            return Err(Error::input(format!(
                "{} groups but {} advantage sets",
                groups.len(),
                advantages.len()
            )));
        }
        for (g, (group, adv)) in groups.iter().zip(advantages).enumerate() {
            if adv.values.len() != group.size()
                || adv
                    .values
                    .iter()
                    .zip(&group.responses)
                    .any(|(v, r)| v.len() != r.len())
            {
                return Err(Error::input(format!(
                    "advantage shape does not match group {g}"
                )));
            }
        }
        let old_logprobs = logprobs_for(old_params, groups)?;
        let (ref_logprobs, kl_coeff) = match kl {
            Some(kl) if kl.coeff != 0.0 => {
                if kl.reference.shape() != old_params.shape() {
                    return Err(Error::input("reference parameters have a different shape"));
                }
                (Some(logprobs_for(kl.reference, groups)?), kl.coeff)
            }
            _ => (None, 0.0),
        };
        Ok(Self {
            shape: old_params.shape(),
            groups,
            advantages,
            old_logprobs,
            ref_logprobs,
            kl_coeff,
            clip,
        })
    }

    pub fn value(&self, params: &PolicyParams) -> Result<f64> {
        Ok(self.evaluate_inner(params, false)?.value)
    }

    pub fn gradient(&self, params: &PolicyParams) -> Result<Vec<f64>> {
        Ok(self.evaluate_inner(params, true)?.gradient)
    }

    pub fn evaluate(&self, params: &PolicyParams) -> Result<ObjectiveReport> {
        self.evaluate_inner(params, true)
    }

    fn evaluate_inner(
        &self,
        params: &PolicyParams,
        with_gradient: bool,
    ) -> Result<ObjectiveReport> {
        if params.shape() != self.shape {
            return Err(Error::input(
                "parameters do not match the objective's policy shape",
            ));
        }
        let shape = self.shape;
        // log-softmax of every (context, position) block, computed once.
        let blocks: Vec<Vec<f64>> = (0..shape.num_contexts * shape.max_len)
            .map(|b| {
                let start = b * shape.vocab_size;
                log_softmax(&params.values()[start..start + shape.vocab_size])
            })
            .collect();

        let eps = self.clip.clip_eps;
        let batch_scale = 1.0 / self.groups.len() as f64;
        let mut value = 0.0;
        let mut gradient = if with_gradient {
            vec![0.0; params.len()]
        } else {
            Vec::new()
        };
        let (mut rmin, mut rmax, mut rsum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
        let (mut tokens_seen, mut tokens_clipped) = (0usize, 0usize);

        for (g, (group, adv)) in self.groups.iter().zip(self.advantages).enumerate() {
            let ctx = group.prompt.context_id;
            let group_scale = batch_scale / group.size() as f64;
            let mut group_value = 0.0;
            for (i, resp) in group.responses.iter().enumerate() {
                let scale = group_scale / resp.len() as f64;
                let mut resp_value = 0.0;
                for (pos, &tok) in resp.tokens().iter().enumerate() {
                    let block = ctx * shape.max_len + pos;
                    let logp = blocks[block][tok];
                    let rho = (logp - self.old_logprobs[g][i][pos]).exp();
                    let a = adv.values[i][pos];
                    rmin = rmin.min(rho);
                    rmax = rmax.max(rho);
                    rsum += rho;
                    tokens_seen += 1;

                    resp_value += clipped_term(rho, a, eps);
                    let mut weight = 0.0;
                    if unclipped_selected(rho, a, eps) {
                        weight += a * rho;
                    } else {
                        tokens_clipped += 1;
                    }
                    if let Some(refs) = &self.ref_logprobs {
                        let r = (refs[g][i][pos] - logp).exp();
                        resp_value -= self.kl_coeff * (r - (refs[g][i][pos] - logp) - 1.0);
                        weight += self.kl_coeff * (r - 1.0);
                    }
                    if with_gradient && weight != 0.0 {
                        let start = block * shape.vocab_size;
                        let out = &mut gradient[start..start + shape.vocab_size];
                        let w = weight * scale;
                        for (o, lp) in out.iter_mut().zip(&blocks[block]) {
                            *o -= w * lp.exp();
                        }
                        out[tok] += w;
                    }
                }
                group_value += resp_value / resp.len() as f64;
            }
            value += group_value / group.size() as f64;
        }

        Ok(ObjectiveReport {
            value: value * batch_scale,
            gradient,
            ratio_stats: RatioStats {
                min: rmin,
                max: rmax,
                mean: rsum / tokens_seen as f64,
            },
            clipped_fraction: tokens_clipped as f64 / tokens_seen as f64,
        })
    }
}

fn logprobs_for(params: &PolicyParams, groups: &[ResponseGroup]) -> Result<Vec<Vec<Vec<f64>>>> {
    groups
        .iter()
        .map(|group| {
            group
                .responses
                .iter()
                .map(|r| token_logprobs(params, &group.prompt, r.tokens()))
                .collect()
        })
        .collect()
}

pub fn objective_value(
    params: &PolicyParams,
    old_params: &PolicyParams,
    groups: &[ResponseGroup],
    advantages: &[AdvantageSet],
    clip: ClipConfig,
) -> Result<f64> {
    Surrogate::new(old_params, groups, advantages, clip, None)?.value(params)
}

pub fn objective_gradient(
    params: &PolicyParams,
    old_params: &PolicyParams,
    groups: &[ResponseGroup],
    advantages: &[AdvantageSet],
    clip: ClipConfig,
) -> Result<Vec<f64>> {
    Surrogate::new(old_params, groups, advantages, clip, None)?.gradient(params)
}
