//! Fixtures shared by the benchmarks.

use grpo_core::advantage::{AdvantageEstimator, AdvantageSet, ResponseGroup};
use grpo_core::policy::sample_group;
use grpo_core::rewards::{reward, Label, RewardSpec};
use grpo_core::{env::decode_answer, PolicyParams, PolicyShape, Prompt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub struct Batch {
    pub params: PolicyParams,
    pub groups: Vec<ResponseGroup>,
    pub advantages: Vec<AdvantageSet>,
}

/// A random policy with `batch` sampled groups of `m` responses each.
pub fn batch(
    shape: PolicyShape,
    batch: usize,
    m: usize,
    estimator: &dyn AdvantageEstimator,
    seed: u64,
) -> Batch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..shape.num_params())
        .map(|_| rng.random_range(-2.0..2.0))
        .collect();
    let params = PolicyParams::new(shape, values).expect("finite values");
    let spec = RewardSpec::bundled();
    let groups: Vec<ResponseGroup> = (0..batch)
        .map(|_| {
            let ctx = rng.random_range(0..shape.num_contexts);
            let prompt = Prompt::new(ctx);
            let truth = Label::ALL[ctx % Label::ALL.len()];
            let responses = sample_group(&params, &prompt, m, 0.9, &mut rng).expect("valid group");
            let rewards = responses
                .iter()
                .map(|r| reward(decode_answer(r.tokens()), Some(truth), &spec))
                .collect();
            ResponseGroup::new(prompt, responses, rewards, Some(truth)).expect("valid group")
        })
        .collect();
    let advantages = groups.iter().map(|g| estimator.estimate(g)).collect();
    Batch {
        params,
        groups,
        advantages,
    }
}
