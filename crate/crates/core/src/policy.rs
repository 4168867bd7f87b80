//! Context-conditioned softmax sequence policy.
//!
//! The policy is a table of logits indexed by `(context, position, token)`.
//! Each position is an independent softmax, so the probability of a response
//! factorises over positions and the score function has the closed form
//! `one_hot(token) - softmax(logits)` per visited block.

use std::fmt;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PolicyShape {
    pub num_contexts: usize,
    pub max_len: usize,
    pub vocab_size: usize,
}

impl PolicyShape {
    pub fn new(num_contexts: usize, max_len: usize, vocab_size: usize) -> Result<Self> {
        if num_contexts == 0 || max_len == 0 || vocab_size == 0 {
            return Err(Error::config(format!(
                "policy shape must be positive in every axis, got {num_contexts}x{max_len}x{vocab_size}"
            )));
        }
        Ok(Self {
            num_contexts,
            max_len,
            vocab_size,
        })
    }

    pub fn num_params(&self) -> usize {
        self.num_contexts * self.max_len * self.vocab_size
    }

    /// Offset of the logit block for `(context, position)` in the flat vector.
    pub fn block_offset(&self, context: usize, position: usize) -> usize {
        (context * self.max_len + position) * self.vocab_size
    }
}

/// Flat logit table plus its shape. Used for the live policy as well as the
/// old and reference snapshots.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParams")]
pub struct PolicyParams {
    shape: PolicyShape,
    values: Vec<f64>,
}

#[derive(Deserialize)]
struct RawParams {
    shape: PolicyShape,
    values: Vec<f64>,
}

impl TryFrom<RawParams> for PolicyParams {
    type Error = Error;

    fn try_from(raw: RawParams) -> Result<Self> {
        PolicyParams::new(raw.shape, raw.values)
    }
}

impl PolicyParams {
    pub fn new(shape: PolicyShape, values: Vec<f64>) -> Result<Self> {
        PolicyShape::new(shape.num_contexts, shape.max_len, shape.vocab_size)?;
        if values.len() != shape.num_params() {
            return Err(Error::input(format!(
                "parameter vector has {} entries, shape requires {}",
                values.len(),
                shape.num_params()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::input(format!("parameter {i} is not finite")));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: PolicyShape) -> Self {
        Self {
            shape,
            values: vec![0.0; shape.num_params()],
        }
    }

    pub fn shape(&self) -> PolicyShape {
        self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn logits(&self, context: usize, position: usize) -> &[f64] {
        let start = self.shape.block_offset(context, position);
        &self.values[start..start + self.shape.vocab_size]
    }

    pub fn logits_mut(&mut self, context: usize, position: usize) -> &mut [f64] {
        let start = self.shape.block_offset(context, position);
        &mut self.values[start..start + self.shape.vocab_size]
    }

    /// Builds params with identical finiteness guarantees but skips
    /// validation; callers must have produced `values` from finite arithmetic
    /// on a vector of the right length.
    pub(crate) fn from_parts_unchecked(shape: PolicyShape, values: Vec<f64>) -> Self {
        debug_assert_eq!(values.len(), shape.num_params());
        Self { shape, values }
    }

    pub(crate) fn check_prompt(&self, prompt: &Prompt) -> Result<()> {
        if prompt.context_id >= self.shape.num_contexts {
            return Err(Error::input(format!(
                "context {} out of range (policy has {} contexts)",
                prompt.context_id, self.shape.num_contexts
            )));
        }
        Ok(())
    }

    pub(crate) fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::input("response has no tokens"));
        }
        if tokens.len() > self.shape.max_len {
            return Err(Error::input(format!(
                "response length {} exceeds max_len {}",
                tokens.len(),
                self.shape.max_len
            )));
        }
        if let Some(&tok) = tokens.iter().find(|&&t| t >= self.shape.vocab_size) {
            return Err(Error::input(format!(
                "token {tok} out of vocabulary (size {})",
                self.shape.vocab_size
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Prompt {
    pub context_id: usize,
}

impl Prompt {
    pub fn new(context_id: usize) -> Self {
        Self { context_id }
    }
}

impl fmt::Display for Prompt {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "context#{}", self.context_id)
    }
}

/// A sampled (or constructed) response with its log-probabilities under the
/// policy that generated it.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Response {
    tokens: Vec<usize>,
    per_token_logprob: Vec<f64>,
    total_logprob: f64,
}

impl Response {
    /// Scores `tokens` under `params`.
    pub fn new(params: &PolicyParams, prompt: &Prompt, tokens: Vec<usize>) -> Result<Self> {
        let per_token_logprob = token_logprobs(params, prompt, &tokens)?;
        let total_logprob = per_token_logprob.iter().sum();
        Ok(Self {
            tokens,
            per_token_logprob,
            total_logprob,
        })
    }

    pub fn tokens(&self) -> &[usize] {
        &self.tokens
    }

    pub fn per_token_logprob(&self) -> &[f64] {
        &self.per_token_logprob
    }

    pub fn total_logprob(&self) -> f64 {
        self.total_logprob
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&z| (z - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&z| z - lse).collect()
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `log pi(o_t | q, o_<t)` for every position of `tokens`.
pub fn token_logprobs(
    params: &PolicyParams,
    prompt: &Prompt,
    tokens: &[usize],
) -> Result<Vec<f64>> {
    params.check_prompt(prompt)?;
    params.check_tokens(tokens)?;
    Ok(tokens
        .iter()
        .enumerate()
        .map(|(pos, &tok)| log_softmax(params.logits(prompt.context_id, pos))[tok])
        .collect())
}

pub fn sequence_logprob(params: &PolicyParams, prompt: &Prompt, tokens: &[usize]) -> Result<f64> {
    Ok(token_logprobs(params, prompt, tokens)?.iter().sum())
}

/// Draws `m` independent full-length responses.
///
/// Temperature only reshapes the sampling distribution; the recorded
/// log-probabilities are those of the untempered policy.
pub fn sample_group<R: Rng + ?Sized>(
    params: &PolicyParams,
    prompt: &Prompt,
    m: usize,
    temperature: f64,
    rng: &mut R,
) -> Result<Vec<Response>> {
    if m == 0 {
        return Err(Error::input("group size must be at least 1"));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::config(format!(
            "temperature must be positive and finite, got {temperature}"
        )));
    }
    params.check_prompt(prompt)?;
    let shape = params.shape();
    let ctx = prompt.context_id;

    let mut samplers = Vec::with_capacity(shape.max_len);
    let mut logprob_tables = Vec::with_capacity(shape.max_len);
    for pos in 0..shape.max_len {
        let logits = params.logits(ctx, pos);
        let tempered: Vec<f64> = logits.iter().map(|z| z / temperature).collect();
        let weights = softmax(&tempered);
        let sampler = WeightedIndex::new(&weights)
            .map_err(|e| Error::input(format!("cannot sample at position {pos}: {e}")))?;
        samplers.push(sampler);
        logprob_tables.push(log_softmax(logits));
    }

    let group = (0..m)
        .map(|_| {
            let tokens: Vec<usize> = samplers.iter().map(|s| s.sample(rng)).collect();
            let per_token_logprob: Vec<f64> = tokens
                .iter()
                .enumerate()
                .map(|(pos, &tok)| logprob_tables[pos][tok])
                .collect();
            let total_logprob = per_token_logprob.iter().sum();
            Response {
                tokens,
                per_token_logprob,
                total_logprob,
            }
        })
        .collect();
    Ok(group)
}

/// Gradient of `log pi(tokens | prompt)` with respect to every parameter.
pub fn score(params: &PolicyParams, prompt: &Prompt, tokens: &[usize]) -> Result<Vec<f64>> {
    params.check_prompt(prompt)?;
    params.check_tokens(tokens)?;
    let mut grad = vec![0.0; params.len()];
    for (pos, &tok) in tokens.iter().enumerate() {
        accumulate_token_score(params, prompt.context_id, pos, tok, 1.0, &mut grad);
    }
    Ok(grad)
}

/// Adds `weight * d/dtheta log pi(token | context, position)` into `out`.
pub(crate) fn accumulate_token_score(
    params: &PolicyParams,
    context: usize,
    position: usize,
    token: usize,
    weight: f64,
    out: &mut [f64],
) {
    let start = params.shape().block_offset(context, position);
    let probs = softmax(params.logits(context, position));
    let block = &mut out[start..start + probs.len()];
    for (g, p) in block.iter_mut().zip(&probs) {
        *g -= weight * p;
    }
    block[token] += weight;
}

/// Most likely token at every position.
pub fn greedy_tokens(params: &PolicyParams, prompt: &Prompt) -> Result<Vec<usize>> {
    params.check_prompt(prompt)?;
    Ok((0..params.shape().max_len)
        .map(|pos| argmax(params.logits(prompt.context_id, pos)))
        .collect())
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
            if v > best.1 {
                (i, v)
            } else {
                best
            }
        })
        .0
}
