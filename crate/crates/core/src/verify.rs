//! Executable checks of the penalty-branch gradient analysis.
//!
//! Every check recomputes its reference side through the private `oracle`
//! module, which re-derives softmax probabilities, token-mean score vectors
//! and confidence weights straight from the raw parameter table. Nothing on
//! that side goes through `policy`, `advantage` or `objective`.
//!
//! The identity and bound checks use the token-mean score `s_i = (1/|o_i|) d log pi(o_i)`,
//! which is what the surrogate's token averaging produces at the old policy
//! and coincides with the plain score for length-1 responses.

use std::slice;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::advantage::{
    AdvantageEstimator, AdvantageSet, Branch, Grpo, GrpoPlusPlus, ResponseGroup,
};
use crate::env::{decode_answer, make_env, render_response, EnvMode, EnvSpec};
use crate::error::{Error, Result};
use crate::objective::{importance_ratios, l2_norm, ClipConfig, KlPenalty, Surrogate};
use crate::policy::{sample_group, PolicyParams, PolicyShape, Prompt, Response};
use crate::rewards::{reward, Label, RewardSpec};

/// Penalty coefficients used on the reference side of every check.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Coefficients {
    pub beta: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for Coefficients {
    fn default() -> Self {
        Self {
            beta: 1.0,
            gamma: 0.5,
            eps: 1e-8,
        }
    }
}

impl Coefficients {
    pub fn estimator(&self) -> Result<GrpoPlusPlus> {
        GrpoPlusPlus::new(self.beta, self.gamma, 0.0, self.eps)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub pass: bool,
    pub measured: f64,
    pub threshold: f64,
}

impl Check {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            pass: measured <= threshold,
            measured,
            threshold,
        }
    }

    fn at_least(name: &str, measured: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            pass: measured >= threshold,
            measured,
            threshold,
        }
    }

    fn holds(name: &str, condition: bool) -> Self {
        Self {
            name: name.to_string(),
            pass: condition,
            measured: if condition { 1.0 } else { 0.0 },
            threshold: 1.0,
        }
    }
}

fn all_pass(checks: &[Check]) -> bool {
    checks.iter().all(|c| c.pass)
}

mod oracle {
    use crate::policy::PolicyParams;

    pub fn probs(logits: &[f64]) -> Vec<f64> {
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|z| (z - top).exp()).collect();
        let total: f64 = exps.iter().sum();
        exps.into_iter().map(|e| e / total).collect()
    }

    fn block(params: &PolicyParams, ctx: usize, pos: usize) -> (usize, &[f64]) {
        let shape = params.shape();
        let start = (ctx * shape.max_len + pos) * shape.vocab_size;
        (start, &params.values()[start..start + shape.vocab_size])
    }

    pub fn loglik(params: &PolicyParams, ctx: usize, tokens: &[usize]) -> f64 {
        tokens
            .iter()
            .enumerate()
            .map(|(pos, &tok)| probs(block(params, ctx, pos).1)[tok].ln())
            .sum()
    }

    /// `(1/|o|) * d log pi(o) / d theta`.
    pub fn mean_score(params: &PolicyParams, ctx: usize, tokens: &[usize]) -> Vec<f64> {
        let mut grad = vec![0.0; params.values().len()];
        let scale = 1.0 / tokens.len() as f64;
        for (pos, &tok) in tokens.iter().enumerate() {
            let (start, logits) = block(params, ctx, pos);
            for (v, p) in probs(logits).into_iter().enumerate() {
                let indicator = if v == tok { 1.0 } else { 0.0 };
                grad[start + v] += scale * (indicator - p);
            }
        }
        grad
    }

    pub fn weights(logliks: &[f64], eps: f64) -> Vec<f64> {
        let lo = logliks.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logliks.iter().map(|l| (l - lo) / (hi - lo + eps)).collect()
    }

    pub fn norm(v: &[f64]) -> f64 {
        v.iter().map(|x| x * x).sum::<f64>().sqrt()
    }
}

/// Surrogate gradient of a single group at `params = theta_old`.
fn assembled_gradient(
    params: &PolicyParams,
    group: &ResponseGroup,
    adv: &AdvantageSet,
) -> Result<Vec<f64>> {
    Surrogate::new(
        params,
        slice::from_ref(group),
        slice::from_ref(adv),
        ClipConfig::default(),
        None,
    )?
    .gradient(params)
}

/// Reference quantities for an all-wrong group.
struct PenaltyTerms {
    scores: Vec<Vec<f64>>,
    weights: Vec<f64>,
    /// `-(1/m) sum_i (gamma + beta w_i) s_i`
    gradient: Vec<f64>,
    g_min: f64,
    g_max: f64,
}

fn penalty_terms(params: &PolicyParams, group: &ResponseGroup, coef: Coefficients) -> PenaltyTerms {
    let ctx = group.prompt.context_id;
    let scores: Vec<Vec<f64>> = group
        .responses
        .iter()
        .map(|r| oracle::mean_score(params, ctx, r.tokens()))
        .collect();
    let logliks: Vec<f64> = group
        .responses
        .iter()
        .map(|r| oracle::loglik(params, ctx, r.tokens()))
        .collect();
    let weights = oracle::weights(&logliks, coef.eps);
    let m = group.size() as f64;
    let mut gradient = vec![0.0; params.len()];
    for (s, w) in scores.iter().zip(&weights) {
        let c = coef.gamma + coef.beta * w;
        for (g, x) in gradient.iter_mut().zip(s) {
            *g -= c * x / m;
        }
    }
    let norms: Vec<f64> = scores.iter().map(|s| oracle::norm(s)).collect();
    PenaltyTerms {
        g_min: norms.iter().cloned().fold(f64::INFINITY, f64::min),
        g_max: norms.iter().cloned().fold(0.0, f64::max),
        scores,
        weights,
        gradient,
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

// ---------------------------------------------------------------------------
// Failure-mode demonstrations

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResponseRecord {
    pub tokens: Vec<usize>,
    pub text: String,
    pub answer: Option<Label>,
    pub reward: f64,
    pub loglik: f64,
    pub confidence_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EstimatorOutcome {
    pub branch: Branch,
    pub advantages: Vec<f64>,
    pub gradient_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FailureModeReport {
    pub scenario: String,
    pub group_size: usize,
    pub seed: u64,
    pub context: usize,
    pub truth: Label,
    /// Groups drawn before one matched the scenario.
    pub draws: usize,
    pub coefficients: Coefficients,
    pub responses: Vec<ResponseRecord>,
    pub grpo: EstimatorOutcome,
    pub grpopp: EstimatorOutcome,
    pub checks: Vec<Check>,
    pub pass: bool,
}

const MAX_DRAWS: usize = 10_000;

fn draw_group(
    mode: EnvMode,
    m: usize,
    seed: u64,
    accept: impl Fn(&ResponseGroup) -> bool,
) -> Result<(PolicyParams, ResponseGroup, usize)> {
    if m < 2 {
        return Err(Error::input(format!(
            "failure-mode demos need m >= 2, got {m}"
        )));
    }
    let env = make_env(&EnvSpec::new(mode))?;
    let spec = RewardSpec::bundled();
    let params = env.initial_params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ctx = rng.random_range(0..env.num_contexts());
    let prompt = Prompt::new(ctx);
    let truth = env.truth(ctx);
    for draw in 1..=MAX_DRAWS {
        let responses = sample_group(&params, &prompt, m, 0.9, &mut rng)?;
        let rewards = responses
            .iter()
            .map(|r| reward(decode_answer(r.tokens()), Some(truth), &spec))
            .collect();
        let group = ResponseGroup::new(prompt, responses, rewards, Some(truth))?;
        if accept(&group) {
            return Ok((params, group, draw));
        }
    }
    Err(Error::input(format!(
        "no matching group in {MAX_DRAWS} draws"
    )))
}

fn outcome(
    params: &PolicyParams,
    group: &ResponseGroup,
    est: &dyn AdvantageEstimator,
) -> Result<EstimatorOutcome> {
    let adv = est.estimate(group);
    let gradient = assembled_gradient(params, group, &adv)?;
    Ok(EstimatorOutcome {
        branch: adv.branch,
        advantages: adv.per_response(),
        gradient_norm: l2_norm(&gradient),
    })
}

fn failure_report(
    scenario: &str,
    seed: u64,
    coef: Coefficients,
    (params, group, draws): (PolicyParams, ResponseGroup, usize),
) -> Result<(FailureModeReport, PenaltyTerms)> {
    let grpo = outcome(&params, &group, &Grpo { eps: coef.eps })?;
    let grpopp = outcome(&params, &group, &coef.estimator()?)?;
    let terms = penalty_terms(&params, &group, coef);
    let responses = group
        .responses
        .iter()
        .zip(&group.rewards)
        .zip(&terms.weights)
        .map(|((r, &reward), &w)| ResponseRecord {
            tokens: r.tokens().to_vec(),
            text: render_response(r.tokens()),
            answer: decode_answer(r.tokens()),
            reward,
            loglik: r.total_logprob(),
            confidence_weight: w,
        })
        .collect();
    let report = FailureModeReport {
        scenario: scenario.to_string(),
        group_size: group.size(),
        seed,
        context: group.prompt.context_id,
        truth: group.truth.expect("demo groups carry a label"),
        draws,
        coefficients: coef,
        responses,
        grpo,
        grpopp,
        checks: Vec::new(),
        pass: false,
    };
    Ok((report, terms))
}

/// A saturated policy emits the same wrong answer `m` times.
pub fn demo_failure_mode_1(m: usize, seed: u64, coef: Coefficients) -> Result<FailureModeReport> {
    let drawn = draw_group(EnvMode::IdenticalWrong, m, seed, |g| {
        g.responses
            .iter()
            .all(|r| r.tokens() == g.responses[0].tokens())
            && g.rewards[0] < 0.0
    })?;
    let (mut report, terms) = failure_report("identical-wrong", seed, coef, drawn)?;

    let mean_score_norm = oracle::norm(&terms.gradient) / coef.gamma;
    let expected = coef.gamma * mean_score_norm;
    report.checks = vec![
        Check::holds(
            "grpo_advantages_exactly_zero",
            report.grpo.advantages.iter().all(|&a| a == 0.0),
        ),
        Check::at_most("grpo_gradient_norm", report.grpo.gradient_norm, 1e-12),
        Check::holds(
            "grpopp_advantages_equal_minus_gamma",
            report.grpopp.advantages.iter().all(|&a| a == -coef.gamma),
        ),
        Check::at_most(
            "grpopp_gradient_norm_vs_gamma_mean_score",
            (report.grpopp.gradient_norm - expected).abs(),
            1e-10,
        ),
        Check::at_least(
            "grpopp_gradient_norm",
            report.grpopp.gradient_norm,
            f64::MIN_POSITIVE,
        ),
    ];
    report.pass = all_pass(&report.checks);
    Ok(report)
}

/// The policy spreads over several wrong answers with different penalties.
pub fn demo_failure_mode_2(m: usize, seed: u64, coef: Coefficients) -> Result<FailureModeReport> {
    let drawn = draw_group(EnvMode::DiverseAllWrong, m, seed, |g| {
        g.rewards.iter().all(|&r| r < 0.0) && g.rewards.iter().any(|&r| r != g.rewards[0])
    })?;
    let (mut report, _) = failure_report("diverse-all-wrong", seed, coef, drawn)?;

    let rewards: Vec<f64> = report.responses.iter().map(|r| r.reward).collect();
    let best = rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let least_wrong_positive = rewards
        .iter()
        .zip(&report.grpo.advantages)
        .filter(|(&r, _)| r == best)
        .all(|(_, &a)| a > 0.0);
    let grpo_sum: f64 = report.grpo.advantages.iter().sum();
    let grpopp_max = report
        .grpopp
        .advantages
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    report.checks = vec![
        Check::holds("all_responses_wrong", rewards.iter().all(|&r| r < 0.0)),
        Check::holds("grpo_reinforces_least_wrong", least_wrong_positive),
        Check::at_most("grpo_advantage_sum", grpo_sum.abs(), 1e-9),
        Check::at_most("grpopp_max_advantage", grpopp_max, -coef.gamma),
    ];
    report.pass = all_pass(&report.checks);
    Ok(report)
}

// ---------------------------------------------------------------------------
// Gradient identity in the penalty regime

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityCase {
    pub scenario: String,
    pub group_size: usize,
    pub response_len: usize,
    /// False when the group violates the preconditions (non-empty
    /// confidence set or all log-likelihoods equal).
    pub valid: bool,
    pub weights: Vec<f64>,
    pub advantages: Vec<f64>,
    pub assembled_norm: f64,
    pub formula_norm: f64,
    /// Max-abs difference between the two gradient vectors.
    pub identity_error: f64,
    pub vanishing: bool,
}

pub fn check_identity(
    scenario: &str,
    params: &PolicyParams,
    group: &ResponseGroup,
    estimator: &dyn AdvantageEstimator,
    coef: Coefficients,
) -> Result<IdentityCase> {
    let ctx = group.prompt.context_id;
    let logliks: Vec<f64> = group
        .responses
        .iter()
        .map(|r| oracle::loglik(params, ctx, r.tokens()))
        .collect();
    let spread = logliks.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - logliks.iter().cloned().fold(f64::INFINITY, f64::min);
    let valid = group.rewards.iter().all(|&r| r < 0.0) && spread > 0.0;

    let adv = estimator.estimate(group);
    let assembled = assembled_gradient(params, group, &adv)?;
    let terms = penalty_terms(params, group, coef);
    let formula_norm = oracle::norm(&terms.gradient);
    Ok(IdentityCase {
        scenario: scenario.to_string(),
        group_size: group.size(),
        response_len: group.responses[0].len(),
        valid,
        weights: terms.weights,
        advantages: adv.per_response(),
        assembled_norm: oracle::norm(&assembled),
        formula_norm,
        identity_error: max_abs_diff(&assembled, &terms.gradient),
        vanishing: formula_norm < 1e-10,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IdentityReport {
    pub coefficients: Coefficients,
    pub random_groups: usize,
    pub max_identity_error: f64,
    pub aligned: IdentityCase,
    pub cancellation: IdentityCase,
    pub random: Vec<IdentityCase>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

/// A two-token policy whose odds equal the ratio of the two penalty
/// coefficients, so the weighted score sum cancels exactly.
pub fn cancellation_group(coef: Coefficients) -> Result<(PolicyParams, ResponseGroup)> {
    // Logits (z, 0): w_0 = z / (z + eps), w_1 = 0, and we need
    // exp(z) = (gamma + beta w_0) / gamma.
    let mut z = (1.0 + coef.beta / coef.gamma).ln();
    for _ in 0..100 {
        z = ((coef.gamma + coef.beta * z / (z + coef.eps)) / coef.gamma).ln();
    }
    let params = PolicyParams::new(PolicyShape::new(1, 1, 2)?, vec![z, 0.0])?;
    labelled_group(&params, Label::Melanoma, &[vec![0], vec![1]])
}

fn labelled_group(
    params: &PolicyParams,
    truth: Label,
    tokens: &[Vec<usize>],
) -> Result<(PolicyParams, ResponseGroup)> {
    let spec = RewardSpec::bundled();
    let prompt = Prompt::new(0);
    let responses = tokens
        .iter()
        .map(|t| Response::new(params, &prompt, t.clone()))
        .collect::<Result<Vec<_>>>()?;
    let rewards = responses
        .iter()
        .map(|r| reward(decode_answer(r.tokens()), Some(truth), &spec))
        .collect();
    let group = ResponseGroup::new(prompt, responses, rewards, Some(truth))?;
    Ok((params.clone(), group))
}

/// Responses that share a long run of an improbable filler token and differ
/// only in the final answer, so their token-mean scores are nearly parallel.
/// Answers are drawn from AK (most likely), Dermatitis and BCC (least
/// likely); the label is Melanoma, so every response is wrong.
pub fn aligned_group(finals: &[Label], len: usize) -> Result<(PolicyParams, ResponseGroup)> {
    if len == 0 || finals.is_empty() {
        return Err(Error::input(
            "aligned group needs len >= 1 and at least one response",
        ));
    }
    if finals.contains(&Label::Melanoma) {
        return Err(Error::input(
            "aligned group answers must be wrong for Melanoma",
        ));
    }
    const FILLER: usize = 7;
    let shape = PolicyShape::new(1, len, 8)?;
    let mut values = Vec::with_capacity(shape.num_params());
    for pos in 0..len {
        if pos + 1 < len {
            values.extend([0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, -4.0]);
        } else {
            // AK, BCC, Dermatitis, Melanoma, Psoriasis, Rosacea, SK, filler
            values.extend([2.0, 0.0, 1.0, -1.0, -1.0, -1.0, -1.0, -4.0]);
        }
    }
    let params = PolicyParams::new(shape, values)?;
    let tokens: Vec<Vec<usize>> = finals
        .iter()
        .map(|label| {
            let mut t = vec![FILLER; len - 1];
            t.push(label.index());
            t
        })
        .collect();
    labelled_group(&params, Label::Melanoma, &tokens)
}

/// A random all-wrong group with distinct log-likelihoods.
pub fn random_wrong_group<R: Rng + ?Sized>(
    rng: &mut R,
    m: usize,
    len: usize,
) -> Result<(PolicyParams, ResponseGroup)> {
    let spec = RewardSpec::bundled();
    let contexts = rng.random_range(1..=3);
    let vocab = rng.random_range(7..=10);
    let shape = PolicyShape::new(contexts, len, vocab)?;
    let scale = [0.3, 1.0, 2.5][rng.random_range(0..3)];
    let normal = Normal::new(0.0, scale).expect("positive scale");
    let ctx = rng.random_range(0..contexts);
    let truth = Label::ALL[rng.random_range(0..7)];
    loop {
        let mut values: Vec<f64> = (0..shape.num_params())
            .map(|_| normal.sample(rng))
            .collect();
        // Make the correct answer unlikely so most draws are all-wrong.
        values[shape.block_offset(ctx, len - 1) + truth.index()] -= 4.0;
        let params = PolicyParams::new(shape, values)?;
        let prompt = Prompt::new(ctx);
        let responses = sample_group(&params, &prompt, m, 1.0, rng)?;
        let rewards: Vec<f64> = responses
            .iter()
            .map(|r| reward(decode_answer(r.tokens()), Some(truth), &spec))
            .collect();
        let distinct = responses
            .iter()
            .any(|r| r.total_logprob() != responses[0].total_logprob());
        if distinct && rewards.iter().all(|&r| r < 0.0) {
            let group = ResponseGroup::new(prompt, responses, rewards, Some(truth))?;
            return Ok((params, group));
        }
    }
}

pub fn check_penalty_identity(
    estimator: &dyn AdvantageEstimator,
    coef: Coefficients,
    n_groups: usize,
    seed: u64,
) -> Result<IdentityReport> {
    let random = (0..n_groups)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let m = 2 + i % 7;
            let (params, group) = random_wrong_group(&mut rng, m, 1)?;
            check_identity("random", &params, &group, estimator, coef)
        })
        .collect::<Result<Vec<_>>>()?;

    let (params, group) = aligned_group(&[Label::AK, Label::Dermatitis, Label::BCC], 16)?;
    let aligned = check_identity("aligned", &params, &group, estimator, coef)?;
    let (params, group) = cancellation_group(coef)?;
    let cancellation = check_identity("cancellation", &params, &group, estimator, coef)?;

    let max_identity_error = random
        .iter()
        .chain([&aligned, &cancellation])
        .map(|c| c.identity_error)
        .fold(0.0, f64::max);
    let checks = vec![
        Check::at_least("random_groups", n_groups as f64, 100.0),
        Check::holds(
            "all_scenarios_valid",
            random
                .iter()
                .chain([&aligned, &cancellation])
                .all(|c| c.valid),
        ),
        Check::at_most("max_identity_error", max_identity_error, 1e-10),
        Check::holds("aligned_non_vanishing", !aligned.vanishing),
        Check::holds("cancellation_vanishing", cancellation.vanishing),
        Check::at_most(
            "cancellation_assembled_norm",
            cancellation.assembled_norm,
            1e-10,
        ),
    ];
    Ok(IdentityReport {
        coefficients: coef,
        random_groups: n_groups,
        max_identity_error,
        aligned,
        cancellation,
        random,
        pass: all_pass(&checks),
        checks,
    })
}

// ---------------------------------------------------------------------------
// Gradient bounds

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundCase {
    pub scenario: String,
    pub group_size: usize,
    pub response_len: usize,
    pub weights: Vec<f64>,
    pub grad_norm: f64,
    pub g_min: f64,
    pub g_max: f64,
    pub upper_bound: f64,
    pub lower_bound: f64,
    /// `grad_norm / upper_bound`
    pub upper_ratio: f64,
    /// `grad_norm / lower_bound`
    pub lower_ratio: f64,
}

pub fn bound_case(
    scenario: &str,
    params: &PolicyParams,
    group: &ResponseGroup,
    estimator: &dyn AdvantageEstimator,
    coef: Coefficients,
) -> Result<BoundCase> {
    let adv = estimator.estimate(group);
    let grad_norm = l2_norm(&assembled_gradient(params, group, &adv)?);
    let terms = penalty_terms(params, group, coef);
    let m = group.size() as f64;
    let upper_bound = (coef.gamma + (m - 1.0) * coef.beta / m) * terms.g_max;
    let lower_bound = (coef.gamma + coef.beta / m) * terms.g_min;
    debug_assert_eq!(terms.scores.len(), group.size());
    Ok(BoundCase {
        scenario: scenario.to_string(),
        group_size: group.size(),
        response_len: group.responses[0].len(),
        weights: terms.weights,
        grad_norm,
        g_min: terms.g_min,
        g_max: terms.g_max,
        upper_bound,
        lower_bound,
        upper_ratio: grad_norm / upper_bound,
        lower_ratio: grad_norm / lower_bound,
    })
}

pub struct FuzzCase {
    pub params: PolicyParams,
    pub group: ResponseGroup,
}

/// Random all-wrong groups with `m` cycling through 2..=8 and response
/// lengths 1, 2 or 4.
pub fn fuzz_groups(n: usize, seed: u64) -> Result<Vec<FuzzCase>> {
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let m = 2 + i % 7;
            let len = [1, 2, 4][rng.random_range(0..3)];
            let (params, group) = random_wrong_group(&mut rng, m, len)?;
            Ok(FuzzCase { params, group })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UpperAudit {
    pub groups: usize,
    pub group_sizes: Vec<usize>,
    pub violations: usize,
    /// Largest `grad_norm / upper_bound` seen.
    pub max_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BoundsReport {
    pub coefficients: Coefficients,
    pub upper: UpperAudit,
    pub lower_aligned: Vec<BoundCase>,
    pub extremal_upper: Vec<BoundCase>,
    /// One response at the top log-likelihood, the rest at the bottom.
    /// Reported only: alignment is imperfect and `w < 1`, so for small groups
    /// the ratio sits just under 1. It tends to 1 as responses lengthen.
    pub extremal_lower: Vec<BoundCase>,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub const UPPER_TOLERANCE: f64 = 1e-9;
const EXTREMAL_LEN: usize = 128;

pub fn check_bounds(
    cases: &[FuzzCase],
    estimator: &dyn AdvantageEstimator,
    coef: Coefficients,
) -> Result<BoundsReport> {
    let upper_cases = cases
        .par_iter()
        .map(|c| bound_case("fuzz", &c.params, &c.group, estimator, coef))
        .collect::<Result<Vec<_>>>()?;
    let violations = upper_cases
        .iter()
        .filter(|c| c.grad_norm > c.upper_bound * (1.0 + UPPER_TOLERANCE))
        .count();
    let mut group_sizes: Vec<usize> = upper_cases.iter().map(|c| c.group_size).collect();
    group_sizes.sort_unstable();
    group_sizes.dedup();
    let upper = UpperAudit {
        groups: cases.len(),
        group_sizes,
        violations,
        max_ratio: upper_cases
            .iter()
            .map(|c| c.upper_ratio)
            .fold(0.0, f64::max),
    };

    use Label::{Dermatitis as D, AK as A, BCC as B};
    let aligned_configs: [(&str, Vec<Label>); 4] = [
        ("m3-two-at-top", vec![A, A, B]),
        ("m3-spread", vec![A, D, B]),
        ("m5-mixed", vec![A, A, D, B, B]),
        ("m8-mixed", vec![A, A, A, D, D, B, B, B]),
    ];
    let lower_aligned = aligned_configs
        .iter()
        .map(|(name, finals)| {
            let (params, group) = aligned_group(finals, 32)?;
            bound_case(name, &params, &group, estimator, coef)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut extremal_upper = Vec::new();
    let mut extremal_lower = Vec::new();
    for m in [2, 3, 5, 8] {
        let mut finals = vec![A; m - 1];
        finals.push(B);
        let (params, group) = aligned_group(&finals, EXTREMAL_LEN)?;
        extremal_upper.push(bound_case(
            &format!("m{m}-top-heavy"),
            &params,
            &group,
            estimator,
            coef,
        )?);
        for len in [16, 64, 256] {
            let mut finals = vec![A];
            finals.extend(vec![B; m - 1]);
            let (params, group) = aligned_group(&finals, len)?;
            extremal_lower.push(bound_case(
                &format!("m{m}-bottom-heavy"),
                &params,
                &group,
                estimator,
                coef,
            )?);
        }
    }

    let lower_margin = lower_aligned
        .iter()
        .map(|c| c.lower_ratio)
        .fold(f64::INFINITY, f64::min);
    let tightest_upper = extremal_upper
        .iter()
        .map(|c| c.upper_ratio)
        .fold(f64::INFINITY, f64::min);
    let checks = vec![
        Check::at_least("fuzzed_groups", cases.len() as f64, 1000.0),
        Check::at_least("fuzzed_group_sizes", upper.group_sizes.len() as f64, 7.0),
        Check::at_most("upper_bound_violations", violations as f64, 0.0),
        Check::at_least("aligned_min_lower_ratio", lower_margin, 1.0),
        Check::at_most(
            "extremal_max_upper_ratio",
            extremal_upper
                .iter()
                .map(|c| c.upper_ratio)
                .fold(0.0, f64::max),
            1.0 + UPPER_TOLERANCE,
        ),
        Check::at_least("extremal_min_upper_ratio", tightest_upper, 0.99),
    ];
    Ok(BoundsReport {
        coefficients: coef,
        upper,
        lower_aligned,
        extremal_upper,
        extremal_lower,
        pass: all_pass(&checks),
        checks,
    })
}

// ---------------------------------------------------------------------------
// Finite-difference audit of the surrogate gradient

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AuditCase {
    pub at_old: bool,
    pub branches: Vec<Branch>,
    pub kl: bool,
    pub clipped_fraction: f64,
    pub grad_norm: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientAuditReport {
    pub cases: Vec<AuditCase>,
    pub max_rel_error: f64,
    pub max_rel_error_at_old: f64,
    pub zero_advantage_exact: bool,
    pub checks: Vec<Check>,
    pub pass: bool,
}

pub const FD_STEP: f64 = 1e-5;
/// Perturbed points are redrawn until every ratio is this far from a clip edge.
pub const CLIP_MARGIN: f64 = 1e-3;

pub fn central_difference(
    f: impl Fn(&PolicyParams) -> Result<f64>,
    at: &PolicyParams,
    h: f64,
) -> Result<Vec<f64>> {
    let mut values = at.values().to_vec();
    let mut grad = Vec::with_capacity(values.len());
    for j in 0..values.len() {
        let orig = values[j];
        values[j] = orig + h;
        let up = f(&PolicyParams::new(at.shape(), values.clone())?)?;
        values[j] = orig - h;
        let down = f(&PolicyParams::new(at.shape(), values.clone())?)?;
        values[j] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Ok(grad)
}

fn perturb<R: Rng + ?Sized>(
    params: &PolicyParams,
    sigma: f64,
    rng: &mut R,
) -> Result<PolicyParams> {
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    let values = params
        .values()
        .iter()
        .map(|v| v + normal.sample(rng))
        .collect();
    PolicyParams::new(params.shape(), values)
}

fn audit_case(index: usize, seed: u64) -> Result<AuditCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let clip = ClipConfig::default();
    let estimator = Coefficients::default().estimator()?;
    let spec = RewardSpec::bundled();

    let len = rng.random_range(1..=3);
    let vocab = rng.random_range(7..=9);
    let shape = PolicyShape::new(2, len, vocab)?;
    let old = perturb(&PolicyParams::zeros(shape), 1.0, &mut rng)?;

    // Alternate all-wrong batches with batches that contain a correct answer.
    let penalty = index.is_multiple_of(2);
    let batch = rng.random_range(1..=3);
    let mut groups = Vec::with_capacity(batch);
    while groups.len() < batch {
        let ctx = rng.random_range(0..2);
        let prompt = Prompt::new(ctx);
        let m = rng.random_range(2..=5);
        let responses = sample_group(&old, &prompt, m, 1.0, &mut rng)?;
        let answers: Vec<Option<Label>> = responses
            .iter()
            .map(|r| decode_answer(r.tokens()))
            .collect();
        let truth = if penalty {
            match Label::ALL.iter().find(|l| !answers.contains(&Some(**l))) {
                Some(&l) => l,
                None => continue,
            }
        } else {
            match answers.iter().flatten().next() {
                Some(&l) => l,
                None => continue,
            }
        };
        let rewards: Vec<f64> = answers
            .iter()
            .map(|&a| reward(a, Some(truth), &spec))
            .collect();
        if !penalty && rewards.iter().all(|&r| r == rewards[0]) {
            continue;
        }
        groups.push(ResponseGroup::new(prompt, responses, rewards, Some(truth))?);
    }
    let advantages: Vec<AdvantageSet> = groups.iter().map(|g| estimator.estimate(g)).collect();

    let use_kl = index.is_multiple_of(3);
    let reference = perturb(&old, 0.3, &mut rng)?;
    let kl = use_kl.then_some(KlPenalty {
        reference: &reference,
        coeff: 0.1,
    });
    let surrogate = Surrogate::new(&old, &groups, &advantages, clip, kl)?;

    let at_old = index % 4 == 1;
    let point = if at_old {
        old.clone()
    } else {
        let sigma = if index.is_multiple_of(4) { 0.05 } else { 0.4 };
        let mut tries = 0;
        loop {
            let candidate = perturb(&old, sigma, &mut rng)?;
            let safe = groups.iter().try_fold(true, |ok, g| -> Result<bool> {
                let ratios = importance_ratios(&candidate, &old, g)?;
                Ok(ok
                    && ratios.iter().flatten().all(|&r| {
                        (r - (1.0 - clip.clip_eps)).abs() > CLIP_MARGIN
                            && (r - (1.0 + clip.clip_eps)).abs() > CLIP_MARGIN
                    }))
            })?;
            tries += 1;
            if safe {
                break candidate;
            }
            if tries > 1000 {
                return Err(Error::input(
                    "could not find a point away from the clip boundaries",
                ));
            }
        }
    };

    let report = surrogate.evaluate(&point)?;
    let fd = central_difference(|p| surrogate.value(p), &point, FD_STEP)?;
    let grad_norm = l2_norm(&report.gradient);
    let diff: Vec<f64> = report
        .gradient
        .iter()
        .zip(&fd)
        .map(|(a, b)| a - b)
        .collect();
    Ok(AuditCase {
        at_old,
        branches: advantages.iter().map(|a| a.branch).collect(),
        kl: use_kl,
        clipped_fraction: report.clipped_fraction,
        grad_norm,
        rel_error: l2_norm(&diff) / grad_norm.max(1e-8),
    })
}

fn zero_advantage_exact(seed: u64) -> Result<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let old = perturb(
        &PolicyParams::zeros(PolicyShape::new(1, 2, 7)?),
        1.0,
        &mut rng,
    )?;
    let prompt = Prompt::new(0);
    let responses = sample_group(&old, &prompt, 4, 1.0, &mut rng)?;
    let group = ResponseGroup::new(prompt, responses, vec![-1.0; 4], None)?;
    let adv = AdvantageSet::zeros(&group);
    let groups = [group];
    let advs = [adv];
    let surrogate = Surrogate::new(&old, &groups, &advs, ClipConfig::default(), None)?;
    let point = perturb(&old, 0.3, &mut rng)?;
    let analytic = surrogate.gradient(&point)?;
    let fd = central_difference(|p| surrogate.value(p), &point, FD_STEP)?;
    Ok(analytic.iter().chain(&fd).all(|&g| g == 0.0))
}

pub fn gradient_audit(n_cases: usize, seed: u64) -> Result<GradientAuditReport> {
    if n_cases == 0 {
        return Err(Error::input("gradient audit needs at least one case"));
    }
    let cases = (0..n_cases)
        .into_par_iter()
        .map(|i| audit_case(i, seed))
        .collect::<Result<Vec<_>>>()?;
    let max_rel_error = cases.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    let max_rel_error_at_old = cases
        .iter()
        .filter(|c| c.at_old)
        .map(|c| c.rel_error)
        .fold(0.0, f64::max);
    let zero_exact = zero_advantage_exact(seed)?;
    let has = |b: Branch| cases.iter().any(|c| c.branches.contains(&b));
    let checks = vec![
        Check::at_most("max_rel_error", max_rel_error, 1e-6),
        Check::at_most("max_rel_error_at_old", max_rel_error_at_old, 1e-8),
        Check::holds("zero_advantage_exact", zero_exact),
        Check::holds(
            "both_branches_covered",
            has(Branch::Standard) && has(Branch::ConfidencePenalty),
        ),
        Check::holds(
            "clipped_regime_covered",
            cases.iter().any(|c| c.clipped_fraction > 0.0),
        ),
    ];
    Ok(GradientAuditReport {
        cases,
        max_rel_error,
        max_rel_error_at_old,
        zero_advantage_exact: zero_exact,
        pass: all_pass(&checks),
        checks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_matches_policy_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (params, group) = random_wrong_group(&mut rng, 4, 3).unwrap();
        for r in &group.responses {
            let reference = crate::policy::score(&params, &group.prompt, r.tokens()).unwrap();
            let mine = oracle::mean_score(&params, group.prompt.context_id, r.tokens());
            for (a, b) in reference.iter().zip(&mine) {
                assert!((a / 3.0 - b).abs() < 1e-14);
            }
            let ll = oracle::loglik(&params, group.prompt.context_id, r.tokens());
            assert!((ll - r.total_logprob()).abs() < 1e-12);
        }
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn failure_mode_1_default() {
        let report = demo_failure_mode_1(3, 0, Coefficients::default()).unwrap();
        assert!(report.pass, "{:?}", report.checks);
        assert_eq!(report.grpo.advantages, vec![0.0; 3]);
        assert_eq!(report.grpopp.advantages, vec![-0.5; 3]);
        assert_eq!(report.grpo.gradient_norm, 0.0);
        assert_eq!(report.grpopp.branch, Branch::ConfidencePenalty);
        let again = demo_failure_mode_1(3, 0, Coefficients::default()).unwrap();
        assert_eq!(report, again);
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn failure_mode_2_default() {
        for seed in 0..5 {
            let report = demo_failure_mode_2(3, seed, Coefficients::default()).unwrap();
            assert!(report.pass, "seed {seed}: {:?}", report.checks);
            assert!(report.grpo.advantages.iter().any(|&a| a > 0.0));
        }
    }

    #[test]
    fn failure_modes_need_two_responses() {
        assert!(demo_failure_mode_1(1, 0, Coefficients::default()).is_err());
        assert!(demo_failure_mode_2(1, 0, Coefficients::default()).is_err());
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn cancellation_is_detected() {
        let coef = Coefficients::default();
        let (params, group) = cancellation_group(coef).unwrap();
        let case = check_identity("c", &params, &group, &coef.estimator().unwrap(), coef).unwrap();
        assert!(case.valid);
        assert!(case.vanishing);
        assert!(case.identity_error < 1e-12);
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn identity_on_aligned_group() {
        let coef = Coefficients::default();
        let (params, group) =
            aligned_group(&[Label::AK, Label::Dermatitis, Label::BCC], 8).unwrap();
        let case = check_identity("a", &params, &group, &coef.estimator().unwrap(), coef).unwrap();
        assert!(case.valid && !case.vanishing);
        assert!(case.identity_error < 1e-12);
        assert!((case.weights[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn identity_rejects_groups_with_a_correct_answer() {
        let coef = Coefficients::default();
        let (params, mut group) = aligned_group(&[Label::AK, Label::BCC], 4).unwrap();
        group.rewards[0] = 10.0;
        let case = check_identity("x", &params, &group, &coef.estimator().unwrap(), coef).unwrap();
        assert!(!case.valid);
    }

    #[test]
    fn plain_grpo_fails_the_identity() {
        let coef = Coefficients::default();
        let report = check_penalty_identity(&Grpo { eps: coef.eps }, coef, 100, 1).unwrap();
        assert!(!report.pass);
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn identity_small_run() {
        let coef = Coefficients::default();
        let report = check_penalty_identity(&coef.estimator().unwrap(), coef, 100, 2).unwrap();
        assert!(report.pass, "{:?}", report.checks);
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn aligned_example_meets_lower_bound() {
        let coef = Coefficients::default();
        let (params, group) = aligned_group(&[Label::AK, Label::AK, Label::BCC], 32).unwrap();
        let case = bound_case("x", &params, &group, &coef.estimator().unwrap(), coef).unwrap();
        assert!(case.grad_norm >= (0.5 + 1.0 / 3.0) * case.g_min);
        assert!(case.grad_norm <= case.upper_bound);
    }

    #[cfg(not(feature = "inject-sign-flip"))]
    #[test]
    fn extremal_lower_ratio_approaches_one() {
        let coef = Coefficients::default();
        let est = coef.estimator().unwrap();
        let ratios: Vec<f64> = [16, 64, 256]
            .iter()
            .map(|&len| {
                let (p, g) = aligned_group(&[Label::AK, Label::BCC, Label::BCC], len).unwrap();
                bound_case("x", &p, &g, &est, coef).unwrap().lower_ratio
            })
            .collect();
        assert!(ratios.windows(2).all(|w| w[1] > w[0]), "{ratios:?}");
        assert!((ratios[2] - 1.0).abs() < 1e-2, "{ratios:?}");
    }

    #[test]
    fn fuzz_is_deterministic() {
        let a = fuzz_groups(20, 9).unwrap();
        let b = fuzz_groups(20, 9).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.params, y.params);
            assert_eq!(x.group.rewards, y.group.rewards);
        }
    }

    #[test]
    fn small_gradient_audit() {
        let report = gradient_audit(12, 3).unwrap();
        assert!(report.max_rel_error < 1e-6, "{}", report.max_rel_error);
        assert!(report.zero_advantage_exact);
    }

    #[cfg(feature = "inject-sign-flip")]
    #[test]
    fn flipped_penalty_is_caught() {
        let coef = Coefficients::default();
        assert!(!demo_failure_mode_1(3, 0, coef).unwrap().pass);
        assert!(!demo_failure_mode_2(3, 0, coef).unwrap().pass);
        assert!(
            !check_penalty_identity(&coef.estimator().unwrap(), coef, 100, 0)
                .unwrap()
                .pass
        );
    }
}
