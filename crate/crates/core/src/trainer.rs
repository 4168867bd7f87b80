//! The outer training loop.
//!
//! Each iteration snapshots a reference policy. Each step snapshots the old
//! policy, samples a batch of prompts and a group of responses per prompt,
//! scores them, picks advantages, and takes `ppo_steps` gradient-ascent
//! steps on the clipped surrogate.

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::advantage::{
    AdvantageEstimator, AdvantageSet, Branch, Grpo, GrpoPlusPlus, ResponseGroup,
};
use crate::env::{decode_answer, Env};
use crate::error::{Error, Result};
use crate::objective::{ClipConfig, KlPenalty, Surrogate};
use crate::policy::{sample_group, PolicyParams};
use crate::rewards::{reward, Label, RewardSpec};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Algorithm {
    #[serde(rename = "grpo")]
    Grpo,
    #[serde(rename = "grpopp")]
    GrpoPlusPlus,
}

impl Algorithm {
    pub fn name(self) -> &'static str {
        match self {
            Algorithm::Grpo => "grpo",
            Algorithm::GrpoPlusPlus => "grpopp",
        }
    }
}

fn one() -> usize {
    1
}
fn three() -> usize {
    3
}
fn four() -> usize {
    4
}
fn default_temperature() -> f64 {
    0.9
}
fn default_eps() -> f64 {
    1e-8
}
fn default_clip() -> f64 {
    0.2
}

/// All loop and algorithm hyperparameters. `learning_rate`, `beta` and
/// `gamma` have no serde defaults: experiment files must pin them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub iterations: usize,
    pub steps_per_iter: usize,
    #[serde(default = "one")]
    pub ppo_steps: usize,
    #[serde(default = "three")]
    pub group_size: usize,
    pub learning_rate: f64,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    pub beta: f64,
    pub gamma: f64,
    #[serde(default)]
    pub tau: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default = "default_clip")]
    pub clip_eps: f64,
    #[serde(default = "four")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub algorithm: Algorithm,
    #[serde(default)]
    pub kl_coeff: f64,
}

impl TrainConfig {
    /// Step size suited to logit tables.
    pub fn desk_scale(algorithm: Algorithm) -> Self {
        Self {
            iterations: 1,
            steps_per_iter: 100,
            ppo_steps: 1,
            group_size: 3,
            learning_rate: 0.1,
            temperature: 0.9,
            beta: 1.0,
            gamma: 0.5,
            tau: 0.0,
            eps: 1e-8,
            clip_eps: 0.2,
            batch_size: 4,
            seed: 0,
            algorithm,
            kl_coeff: 0.0,
        }
    }

    /// The fine-tuning learning rate used for billion-parameter models.
    pub fn full_scale(algorithm: Algorithm) -> Self {
        Self {
            learning_rate: 1e-5,
            ..Self::desk_scale(algorithm)
        }
    }

    pub fn total_steps(&self) -> usize {
        self.iterations * self.steps_per_iter
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("iterations", self.iterations),
            ("steps_per_iter", self.steps_per_iter),
            ("group_size", self.group_size),
            ("batch_size", self.batch_size),
        ] {
            if v == 0 {
                return Err(Error::config(format!("{name} must be >= 1")));
            }
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::config(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if !(self.kl_coeff >= 0.0 && self.kl_coeff.is_finite()) {
            return Err(Error::config(format!(
                "kl_coeff must be >= 0, got {}",
                self.kl_coeff
            )));
        }
        ClipConfig::new(self.clip_eps)?;
        GrpoPlusPlus::new(self.beta, self.gamma, self.tau, self.eps)?;
        Ok(())
    }

    pub fn estimator(&self) -> Box<dyn AdvantageEstimator> {
        match self.algorithm {
            Algorithm::Grpo => Box::new(Grpo { eps: self.eps }),
            Algorithm::GrpoPlusPlus => Box::new(GrpoPlusPlus {
                beta: self.beta,
                gamma: self.gamma,
                tau: self.tau,
                eps: self.eps,
            }),
        }
    }
}

/// One row per training step. Deterministic under a fixed seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRow {
    pub step: usize,
    pub iteration: usize,
    pub mean_reward: f64,
    /// Fraction of groups with an empty confidence set.
    pub empty_set_fraction: f64,
    pub standard_groups: usize,
    pub penalty_groups: usize,
    /// Surrogate gradient norm at the old parameters.
    pub grad_norm: f64,
    pub objective: f64,
    /// Mean clipped-token fraction over the inner steps.
    pub clipped_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub rows: Vec<StepRow>,
    /// Wall-clock milliseconds per step; kept apart from `rows` so rows stay
    /// reproducible.
    pub step_millis: Vec<f64>,
    pub final_params: PolicyParams,
}

impl TrainReport {
    pub fn reward_series(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.mean_reward).collect()
    }

    /// Mean reward over the last `fraction` of steps (at least one step).
    pub fn final_window_mean(&self, fraction: f64) -> f64 {
        let n = window_len(self.rows.len(), fraction);
        mean(
            self.rows[self.rows.len() - n..]
                .iter()
                .map(|r| r.mean_reward),
        )
    }

    /// Mean reward over the first `fraction` of steps (at least one step).
    pub fn initial_window_mean(&self, fraction: f64) -> f64 {
        let n = window_len(self.rows.len(), fraction);
        mean(self.rows[..n].iter().map(|r| r.mean_reward))
    }
}

fn window_len(total: usize, fraction: f64) -> usize {
    ((total as f64 * fraction).round() as usize).clamp(1, total)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n as f64
}

/// `params + alpha * gradient`.
pub fn ascent_step(params: &PolicyParams, gradient: &[f64], alpha: f64) -> Result<PolicyParams> {
    if gradient.len() != params.len() {
        return Err(Error::input(format!(
            "gradient has {} entries, parameters have {}",
            gradient.len(),
            params.len()
        )));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::config(format!(
            "step size must be positive, got {alpha}"
        )));
    }
    let values: Vec<f64> = params
        .values()
        .iter()
        .zip(gradient)
        .map(|(p, g)| p + alpha * g)
        .collect();
    PolicyParams::new(params.shape(), values)
}

/// Scores a sampled group: decode each response's answer and look up its reward.
pub fn score_group(
    group_responses: Vec<crate::policy::Response>,
    prompt: crate::policy::Prompt,
    truth: Option<Label>,
    spec: &RewardSpec,
) -> Result<ResponseGroup> {
    let rewards = group_responses
        .iter()
        .map(|r| reward(decode_answer(r.tokens()), truth, spec))
        .collect();
    ResponseGroup::new(prompt, group_responses, rewards, truth)
}

fn check_labels(env: &Env, spec: &RewardSpec) -> Result<()> {
    for ctx in 0..env.num_contexts() {
        let label = env.truth(ctx);
        if !spec.classes.contains(&label) {
            return Err(Error::config(format!(
                "environment label {label} missing from reward spec"
            )));
        }
    }
    Ok(())
}

pub fn train(config: &TrainConfig, env: &Env, reward_spec: &RewardSpec) -> Result<TrainReport> {
    train_from(config, env, reward_spec, env.initial_params())
}

/// Runs the loop from explicit initial parameters.
pub fn train_from(
    config: &TrainConfig,
    env: &Env,
    reward_spec: &RewardSpec,
    initial: PolicyParams,
) -> Result<TrainReport> {
    config.validate()?;
    check_labels(env, reward_spec)?;
    if initial.shape() != env.policy_shape() {
        return Err(Error::input(
            "initial parameters do not match the environment",
        ));
    }
    let estimator = config.estimator();
    let clip = ClipConfig::new(config.clip_eps)?;

    // Prompt/label draws and response draws use separate streams so the
    // prompt sequence is the same whichever algorithm runs.
    let mut prompt_rng = ChaCha8Rng::seed_from_u64(config.seed);
    prompt_rng.set_stream(0);
    let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
    sample_rng.set_stream(1);

    let mut params = initial;
    let mut rows = Vec::with_capacity(config.total_steps());
    let mut step_millis = Vec::with_capacity(config.total_steps());
    let mut step = 0;

    for iteration in 1..=config.iterations {
        let reference = params.clone();
        for _ in 0..config.steps_per_iter {
            step += 1;
            let started = Instant::now();
            let old = params.clone();

            let mut groups = Vec::with_capacity(config.batch_size);
            for _ in 0..config.batch_size {
                let prompt = env.sample_prompt(&mut prompt_rng);
                let truth = env.sample_truth(prompt.context_id, &mut prompt_rng);
                let responses = sample_group(
                    &old,
                    &prompt,
                    config.group_size,
                    config.temperature,
                    &mut sample_rng,
                )?;
                groups.push(score_group(responses, prompt, Some(truth), reward_spec)?);
            }
            let advantages: Vec<AdvantageSet> =
                groups.iter().map(|g| estimator.estimate(g)).collect();

            let kl = (config.kl_coeff > 0.0).then_some(KlPenalty {
                reference: &reference,
                coeff: config.kl_coeff,
            });
            let surrogate = Surrogate::new(&old, &groups, &advantages, clip, kl)?;

            let diagnostic = surrogate.evaluate(&params)?;
            if !diagnostic.value.is_finite() {
                return Err(Error::NonFinite {
                    step,
                    quantity: "objective",
                    snapshot: Box::new(params),
                });
            }
            let mut clipped = 0.0;
            for inner in 0..config.ppo_steps {
                let report = if inner == 0 {
                    diagnostic.clone()
                } else {
                    surrogate.evaluate(&params)?
                };
                let bad = if !report.value.is_finite() {
                    Some("objective")
                } else if report.gradient.iter().any(|g| !g.is_finite()) {
                    Some("gradient")
                } else {
                    None
                };
                if let Some(quantity) = bad {
                    return Err(Error::NonFinite {
                        step,
                        quantity,
                        snapshot: Box::new(params),
                    });
                }
                clipped += report.clipped_fraction;
                params =
                    ascent_step(&params, &report.gradient, config.learning_rate).map_err(|_| {
                        Error::NonFinite {
                            step,
                            quantity: "parameters",
                            snapshot: Box::new(params.clone()),
                        }
                    })?;
            }

            let penalty_groups = advantages
                .iter()
                .filter(|a| a.branch == Branch::ConfidencePenalty)
                .count();
            let empty_sets = advantages
                .iter()
                .filter(|a| a.diagnostics.confidence_set_size == 0)
                .count();
            let empty_sets = match config.algorithm {
                Algorithm::GrpoPlusPlus => empty_sets,
                // The plain estimator does not compute the confidence set.
                Algorithm::Grpo => groups
                    .iter()
                    .filter(|g| crate::advantage::confidence_set(&g.rewards, config.tau).is_empty())
                    .count(),
            };
            let rewards = groups.iter().flat_map(|g| g.rewards.iter().copied());
            rows.push(StepRow {
                step,
                iteration,
                mean_reward: mean(rewards),
                empty_set_fraction: empty_sets as f64 / groups.len() as f64,
                standard_groups: groups.len() - penalty_groups,
                penalty_groups,
                grad_norm: diagnostic.gradient_norm(),
                objective: diagnostic.value,
                clipped_fraction: if config.ppo_steps == 0 {
                    0.0
                } else {
                    clipped / config.ppo_steps as f64
                },
            });
            step_millis.push(started.elapsed().as_secs_f64() * 1e3);
        }
    }

    Ok(TrainReport {
        config: config.clone(),
        rows,
        step_millis,
        final_params: params,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunPair {
    pub seed: u64,
    pub a: TrainReport,
    pub b: TrainReport,
}

/// Runs two configurations that differ only in algorithm over several seeds.
pub fn compare_runs(
    config_a: &TrainConfig,
    config_b: &TrainConfig,
    env: &Env,
    reward_spec: &RewardSpec,
    seeds: &[u64],
) -> Result<Vec<RunPair>> {
    let normalise = |c: &TrainConfig| TrainConfig {
        algorithm: Algorithm::Grpo,
        seed: 0,
        ..c.clone()
    };
    if normalise(config_a) != normalise(config_b) {
        return Err(Error::config(
            "compared configurations may differ only in algorithm",
        ));
    }
    seeds
        .par_iter()
        .map(|&seed| {
            let a = train(
                &TrainConfig {
                    seed,
                    ..config_a.clone()
                },
                env,
                reward_spec,
            )?;
            let b = train(
                &TrainConfig {
                    seed,
                    ..config_b.clone()
                },
                env,
                reward_spec,
            )?;
            Ok(RunPair { seed, a, b })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{make_env, EnvMode, EnvSpec};
    use crate::policy::PolicyShape;

    fn quick(algorithm: Algorithm) -> TrainConfig {
        TrainConfig {
            iterations: 2,
            steps_per_iter: 10,
            ..TrainConfig::desk_scale(algorithm)
        }
    }

    #[test]
    fn ascent_step_arithmetic() {
        let shape = PolicyShape::new(1, 1, 3).unwrap();
        let p = PolicyParams::new(shape, vec![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(ascent_step(&p, &[0.0; 3], 0.7).unwrap(), p);
        assert_eq!(
            ascent_step(&p, &[1.0, 2.0, -1.0], 1.0).unwrap().values(),
            &[2.0, 0.0, -0.5]
        );
        let g = [0.25, -0.5, 1.0];
        let half = ascent_step(&ascent_step(&p, &g, 0.5).unwrap(), &g, 0.5).unwrap();
        let full = ascent_step(&p, &g, 1.0).unwrap();
        for (a, b) in half.values().iter().zip(full.values()) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(ascent_step(&p, &[f64::NAN, 0.0, 0.0], 1.0).is_err());
        assert!(ascent_step(&p, &[0.0; 2], 1.0).is_err());
        assert!(ascent_step(&p, &[0.0; 3], 0.0).is_err());
    }

    #[test]
    fn zero_inner_steps_leave_params_unchanged() {
        let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
        let config = TrainConfig {
            iterations: 1,
            steps_per_iter: 1,
            ppo_steps: 0,
            ..TrainConfig::desk_scale(Algorithm::GrpoPlusPlus)
        };
        let report = train(&config, &env, &RewardSpec::bundled()).unwrap();
        assert_eq!(report.rows.len(), 1);
        assert_eq!(report.final_params, env.initial_params());
    }

    #[test]
    fn row_count_and_determinism() {
        let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
        let spec = RewardSpec::bundled();
        let a = train(&quick(Algorithm::GrpoPlusPlus), &env, &spec).unwrap();
        let b = train(&quick(Algorithm::GrpoPlusPlus), &env, &spec).unwrap();
        assert_eq!(a.rows.len(), 20);
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.final_params, b.final_params);
        for row in &a.rows {
            assert!((0.0..=1.0).contains(&row.empty_set_fraction));
            assert_eq!(row.standard_groups + row.penalty_groups, 4);
        }
    }

    #[test]
    fn grpo_never_takes_penalty_branch() {
        let env = make_env(&EnvSpec::new(EnvMode::DiverseAllWrong)).unwrap();
        let report = train(&quick(Algorithm::Grpo), &env, &RewardSpec::bundled()).unwrap();
        assert!(report.rows.iter().all(|r| r.penalty_groups == 0));
        assert!(report.rows.iter().all(|r| r.empty_set_fraction == 1.0));
    }

    #[test]
    fn grpo_stalls_on_identical_wrong() {
        let env = make_env(&EnvSpec::new(EnvMode::IdenticalWrong)).unwrap();
        let report = train(&quick(Algorithm::Grpo), &env, &RewardSpec::bundled()).unwrap();
        assert!(report.rows.iter().all(|r| r.grad_norm <= 1e-12));
        assert_eq!(report.final_params, env.initial_params());
    }

    #[test]
    fn grpopp_first_step_gradient_is_gamma_times_score() {
        let env = make_env(&EnvSpec::new(EnvMode::IdenticalWrong)).unwrap();
        let config = TrainConfig {
            iterations: 1,
            steps_per_iter: 1,
            batch_size: 1,
            ..TrainConfig::desk_scale(Algorithm::GrpoPlusPlus)
        };
        let report = train(&config, &env, &RewardSpec::bundled()).unwrap();
        let params = env.initial_params();
        // Every response in every context is the decoy, so all score vectors
        // share one norm.
        let ctx = 0;
        let decoy = env.decoy(ctx).index();
        let g_min = crate::objective::l2_norm(
            &crate::policy::score(&params, &crate::policy::Prompt::new(ctx), &[decoy]).unwrap(),
        );
        assert!(report.rows[0].grad_norm > 0.0);
        assert!(report.rows[0].grad_norm >= config.gamma * g_min * (1.0 - 1e-9));
    }

    #[test]
    fn reward_column_matches_rescoring() {
        // Re-run the sampling streams independently and re-score.
        let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
        let spec = RewardSpec::bundled();
        let config = TrainConfig {
            iterations: 1,
            steps_per_iter: 1,
            ..TrainConfig::desk_scale(Algorithm::GrpoPlusPlus)
        };
        let report = train(&config, &env, &spec).unwrap();
        let mut prompt_rng = ChaCha8Rng::seed_from_u64(config.seed);
        prompt_rng.set_stream(0);
        let mut sample_rng = ChaCha8Rng::seed_from_u64(config.seed);
        sample_rng.set_stream(1);
        let params = env.initial_params();
        let mut total = 0.0;
        for _ in 0..config.batch_size {
            let prompt = env.sample_prompt(&mut prompt_rng);
            let truth = env.sample_truth(prompt.context_id, &mut prompt_rng);
            for r in sample_group(&params, &prompt, 3, 0.9, &mut sample_rng).unwrap() {
                let label = r.tokens().last().and_then(|&t| Label::from_index(t));
                total += reward(label, Some(truth), &spec);
            }
        }
        let expected = total / (3 * config.batch_size) as f64;
        assert!((report.rows[0].mean_reward - expected).abs() < 1e-12);
    }

    #[test]
    fn compare_requires_matching_configs() {
        let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
        let spec = RewardSpec::bundled();
        let a = quick(Algorithm::Grpo);
        let b = TrainConfig {
            learning_rate: 0.5,
            ..quick(Algorithm::GrpoPlusPlus)
        };
        assert!(compare_runs(&a, &b, &env, &spec, &[0]).is_err());

        let pairs = compare_runs(&a, &a, &env, &spec, &[3, 4]).unwrap();
        assert_eq!(pairs.len(), 2);
        for p in &pairs {
            assert_eq!(p.a.rows, p.b.rows);
            assert_eq!(p.a.rows.len(), p.b.rows.len());
        }
    }

    #[test]
    fn config_validation() {
        let mut c = quick(Algorithm::Grpo);
        c.temperature = 0.0;
        assert!(c.validate().is_err());
        let mut c = quick(Algorithm::Grpo);
        c.group_size = 0;
        assert!(c.validate().is_err());
        let mut c = quick(Algorithm::Grpo);
        c.gamma = 0.0;
        assert!(c.validate().is_err());
        assert!(TrainConfig::full_scale(Algorithm::Grpo).validate().is_ok());
        assert_eq!(
            TrainConfig::full_scale(Algorithm::Grpo).learning_rate,
            1e-5
        );
    }

    #[test]
    fn config_requires_pinned_penalty_coefficients() {
        let text = "iterations = 1\nsteps_per_iter = 1\nlearning_rate = 0.1\nalgorithm = \"grpopp\"\ngamma = 0.5\n";
        assert!(toml::from_str::<TrainConfig>(text)
            .unwrap_err()
            .to_string()
            .contains("beta"));
    }

    #[test]
    fn overflow_aborts_with_finite_snapshot() {
        let env = make_env(&EnvSpec::new(EnvMode::Learnable)).unwrap();
        let config = TrainConfig {
            learning_rate: 1.0,
            kl_coeff: 1e308,
            ..quick(Algorithm::GrpoPlusPlus)
        };
        match train(&config, &env, &RewardSpec::bundled()) {
            Err(Error::NonFinite { step, snapshot, .. }) => {
                assert!(step > 1);
                assert!(snapshot.is_finite());
            }
            other => panic!("expected a non-finite abort, got {other:?}"),
        }
    }
}
