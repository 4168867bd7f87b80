//! Synthetic diagnosis environments.
//!
//! Contexts stand in for images: context `c` shows disease
//! `Label::ALL[c % 7]`. Token `k < 7` at the final response position names
//! disease `k`; larger token ids are non-answers. Three modes:
//!
//! * `Learnable`: uniform initial policy, a plain 7-way task.
//! * `IdenticalWrong`: the initial policy is saturated on the mildest wrong
//!   diagnosis for each context, so sampled groups are identical and wrong.
//! * `DiverseAllWrong`: the initial policy spreads its mass over several
//!   wrong diagnoses with different penalties and none on the truth.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::policy::{PolicyParams, PolicyShape, Prompt};
use crate::rewards::{extract_answer, reward, Label, RewardSpec, NUM_CLASSES};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvMode {
    Learnable,
    IdenticalWrong,
    DiverseAllWrong,
}

fn default_saturation() -> f64 {
    8.0
}

fn default_response_len() -> usize {
    1
}

fn default_vocab() -> usize {
    NUM_CLASSES
}

fn default_support() -> usize {
    3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnvSpec {
    pub mode: EnvMode,
    /// Defaults to 21 for `Learnable` and 7 otherwise.
    #[serde(default)]
    pub num_contexts: Option<usize>,
    /// Probability that a training prompt's label is replaced by a random
    /// other label.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Logit magnitude of the adversarial initialisations (`+s` on favoured
    /// tokens, `-s` elsewhere).
    #[serde(default = "default_saturation")]
    pub saturation: f64,
    #[serde(default = "default_response_len")]
    pub response_len: usize,
    #[serde(default = "default_vocab")]
    pub vocab_size: usize,
    /// Number of wrong labels `DiverseAllWrong` spreads mass over.
    #[serde(default = "default_support")]
    pub diverse_support: usize,
}

impl EnvSpec {
    pub fn new(mode: EnvMode) -> Self {
        Self {
            mode,
            num_contexts: None,
            noise: 0.0,
            seed: 0,
            saturation: default_saturation(),
            response_len: default_response_len(),
            vocab_size: default_vocab(),
            diverse_support: default_support(),
        }
    }

    /// Copy with every optional field filled in.
    pub fn resolved(&self) -> Self {
        let mut spec = self.clone();
        spec.num_contexts.get_or_insert(match self.mode {
            EnvMode::Learnable => 3 * NUM_CLASSES,
            _ => NUM_CLASSES,
        });
        spec
    }

    pub fn validate(&self) -> Result<()> {
        let spec = self.resolved();
        if spec.num_contexts == Some(0) {
            return Err(Error::config("num_contexts must be >= 1"));
        }
        if !(0.0..1.0).contains(&spec.noise) {
            return Err(Error::config(format!(
                "noise must lie in [0, 1), got {}",
                spec.noise
            )));
        }
        if !(spec.saturation > 0.0 && spec.saturation.is_finite()) {
            return Err(Error::config(format!(
                "saturation must be positive, got {}",
                spec.saturation
            )));
        }
        if spec.response_len == 0 {
            return Err(Error::config("response_len must be >= 1"));
        }
        if spec.vocab_size < NUM_CLASSES {
            return Err(Error::config(format!(
                "vocab_size must cover the {NUM_CLASSES} labels, got {}",
                spec.vocab_size
            )));
        }
        if !(2..NUM_CLASSES).contains(&spec.diverse_support) {
            return Err(Error::config(format!(
                "diverse_support must lie in 2..{NUM_CLASSES}, got {}",
                spec.diverse_support
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalItem {
    pub prompt: Prompt,
    pub truth: Label,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Env {
    spec: EnvSpec,
    shape: PolicyShape,
    rewards: RewardSpec,
}

pub fn make_env(spec: &EnvSpec) -> Result<Env> {
    spec.validate()?;
    let spec = spec.resolved();
    let shape = PolicyShape::new(
        spec.num_contexts.expect("resolved"),
        spec.response_len,
        spec.vocab_size,
    )?;
    Ok(Env {
        spec,
        shape,
        rewards: RewardSpec::bundled(),
    })
}

impl Env {
    pub fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    pub fn num_contexts(&self) -> usize {
        self.shape.num_contexts
    }

    pub fn policy_shape(&self) -> PolicyShape {
        self.shape
    }

    /// Noise-free label of a context.
    pub fn truth(&self, context: usize) -> Label {
        Label::ALL[context % NUM_CLASSES]
    }

    pub fn sample_prompt<R: Rng + ?Sized>(&self, rng: &mut R) -> Prompt {
        Prompt::new(rng.random_range(0..self.num_contexts()))
    }

    /// Training label for a context, with label noise applied.
    pub fn sample_truth<R: Rng + ?Sized>(&self, context: usize, rng: &mut R) -> Label {
        let truth = self.truth(context);
        if self.spec.noise > 0.0 && rng.random::<f64>() < self.spec.noise {
            let others: Vec<Label> = Label::ALL.into_iter().filter(|&l| l != truth).collect();
            others[rng.random_range(0..others.len())]
        } else {
            truth
        }
    }

    /// Wrong label the `IdenticalWrong` policy is saturated on.
    pub fn decoy(&self, context: usize) -> Label {
        self.rewards.mildest_confusion(self.truth(context))
    }

    /// Wrong labels the `DiverseAllWrong` policy spreads over: distinct
    /// penalty levels spaced from the most severe to the mildest.
    pub fn wrong_support(&self, context: usize) -> Vec<Label> {
        let truth = self.truth(context);
        let k = self.spec.diverse_support;
        let mut wrong: Vec<(Label, f64)> = Label::ALL
            .into_iter()
            .filter(|&l| l != truth)
            .map(|l| (l, reward(Some(l), Some(truth), &self.rewards)))
            .collect();
        wrong.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let mut levels: Vec<(Label, f64)> = Vec::new();
        for &(l, r) in &wrong {
            if levels.last().is_none_or(|&(_, prev)| prev != r) {
                levels.push((l, r));
            }
        }
        let mut chosen: Vec<Label> = if levels.len() >= k {
            (0..k)
                .map(|j| levels[(j * (levels.len() - 1) + (k - 1) / 2) / (k - 1)].0)
                .collect()
        } else {
            levels.iter().map(|&(l, _)| l).collect()
        };
        for (l, _) in wrong {
            if chosen.len() >= k {
                break;
            }
            if !chosen.contains(&l) {
                chosen.push(l);
            }
        }
        chosen.sort();
        chosen.dedup();
        chosen
    }

    pub fn initial_params(&self) -> PolicyParams {
        initial_params(&self.spec, self.shape).expect("env shape is consistent")
    }

    /// Logit table with `+margin` on each context's true label and `-margin`
    /// elsewhere.
    pub fn oracle_params(&self, margin: f64) -> PolicyParams {
        self.favouring(margin, |ctx| vec![self.truth(ctx)])
    }

    fn favouring(&self, s: f64, favoured: impl Fn(usize) -> Vec<Label>) -> PolicyParams {
        let mut params =
            PolicyParams::from_parts_unchecked(self.shape, vec![-s; self.shape.num_params()]);
        for ctx in 0..self.shape.num_contexts {
            let labels = favoured(ctx);
            for pos in 0..self.shape.max_len {
                let logits = params.logits_mut(ctx, pos);
                for l in &labels {
                    logits[l.index()] = s;
                }
            }
        }
        params
    }

    pub fn eval_dataset(&self, n_per_class: usize) -> Result<Vec<EvalItem>> {
        eval_dataset(&self.spec, n_per_class)
    }
}

pub fn initial_params(spec: &EnvSpec, shape: PolicyShape) -> Result<PolicyParams> {
    let env = make_env(spec)?;
    if env.shape != shape {
        return Err(Error::input(format!(
            "policy shape {shape:?} does not match environment shape {:?}",
            env.shape
        )));
    }
    let s = env.spec.saturation;
    Ok(match env.spec.mode {
        EnvMode::Learnable => PolicyParams::zeros(shape),
        EnvMode::IdenticalWrong => env.favouring(s, |ctx| vec![env.decoy(ctx)]),
        EnvMode::DiverseAllWrong => env.favouring(s, |ctx| env.wrong_support(ctx)),
    })
}

/// Balanced evaluation items, `n_per_class` per disease, in a seeded order.
pub fn eval_dataset(spec: &EnvSpec, n_per_class: usize) -> Result<Vec<EvalItem>> {
    if n_per_class == 0 {
        return Err(Error::config("n_per_class must be >= 1"));
    }
    let env = make_env(spec)?;
    if env.num_contexts() < NUM_CLASSES {
        return Err(Error::config(format!(
            "evaluation needs every class represented; environment has {} contexts",
            env.num_contexts()
        )));
    }
    let mut items = Vec::with_capacity(n_per_class * NUM_CLASSES);
    for label in Label::ALL {
        let contexts: Vec<usize> = (0..env.num_contexts())
            .filter(|&c| env.truth(c) == label)
            .collect();
        for j in 0..n_per_class {
            items.push(EvalItem {
                prompt: Prompt::new(contexts[j % contexts.len()]),
                truth: label,
            });
        }
    }
    items.shuffle(&mut ChaCha8Rng::seed_from_u64(env.spec.seed));
    Ok(items)
}

/// Text form of a response: leading tokens as reasoning, the final token as
/// the answer when it names a disease.
pub fn render_response(tokens: &[usize]) -> String {
    let (last, thinking) = tokens.split_last().expect("responses are non-empty");
    let steps: Vec<String> = thinking.iter().map(|t| format!("t{t}")).collect();
    let mut text = format!("<thinking>{}</thinking>", steps.join(" "));
    if let Some(label) = Label::from_index(*last) {
        text.push_str(&format!("<answer>{}</answer>", label.full_name()));
    }
    text
}

/// Diagnosis named by a response, via its rendered text.
pub fn decode_answer(tokens: &[usize]) -> Option<Label> {
    extract_answer(&render_response(tokens))
}
