//! Single-shot and majority-vote evaluation with per-class metrics.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::env::{decode_answer, EvalItem};
use crate::error::{Error, Result};
use crate::policy::{greedy_tokens, sample_group, PolicyParams, Prompt};
use crate::rewards::{Label, NUM_CLASSES};

/// Anything that answers a prompt with a label, or with nothing usable.
pub trait Predictor: Sync {
    fn predict(&self, prompt: &Prompt, rng: &mut ChaCha8Rng) -> Result<Option<Label>>;
}

/// Samples one response and reads its answer.
pub struct SoftmaxPredictor<'a> {
    pub params: &'a PolicyParams,
    pub temperature: f64,
}

impl Predictor for SoftmaxPredictor<'_> {
    fn predict(&self, prompt: &Prompt, rng: &mut ChaCha8Rng) -> Result<Option<Label>> {
        let response = sample_group(self.params, prompt, 1, self.temperature, rng)?;
        Ok(decode_answer(response[0].tokens()))
    }
}

pub struct GreedyPredictor<'a> {
    pub params: &'a PolicyParams,
}

impl Predictor for GreedyPredictor<'_> {
    fn predict(&self, prompt: &Prompt, _rng: &mut ChaCha8Rng) -> Result<Option<Label>> {
        Ok(decode_answer(&greedy_tokens(self.params, prompt)?))
    }
}

/// Counts indexed `[truth][predicted]`; the last predicted column holds
/// invalid or missing answers.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES + 1]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub const INVALID: usize = NUM_CLASSES;

    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&mut self, truth: Label, predicted: Option<Label>) {
        let col = predicted.map_or(Self::INVALID, Label::index);
        self.counts[truth.index()][col] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    pub fn invalid(&self) -> u64 {
        self.counts.iter().map(|row| row[Self::INVALID]).sum()
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.trace(), self.total())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub per_class: Vec<ClassRow>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
}

/// Precision, recall and F1 per class with 0/0 taken as 0. Invalid answers
/// count against recall only.
pub fn metrics_from_confusion(cm: &ConfusionMatrix) -> ClassMetrics {
    let per_class: Vec<ClassRow> = Label::ALL
        .iter()
        .map(|&label| {
            let c = label.index();
            let tp = cm.counts[c][c];
            let predicted: u64 = (0..NUM_CLASSES).map(|t| cm.counts[t][c]).sum();
            let support: u64 = cm.counts[c].iter().sum();
            let precision = ratio(tp, predicted);
            let recall = ratio(tp, support);
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassRow {
                label,
                precision,
                recall,
                f1,
                support,
            }
        })
        .collect();
    let n = per_class.len() as f64;
    ClassMetrics {
        macro_precision: per_class.iter().map(|r| r.precision).sum::<f64>() / n,
        macro_recall: per_class.iter().map(|r| r.recall).sum::<f64>() / n,
        macro_f1: per_class.iter().map(|r| r.f1).sum::<f64>() / n,
        accuracy: cm.accuracy(),
        per_class,
    }
}

/// Modal valid label; ties go to the earlier label in canonical order.
pub fn majority_vote(votes: &[Option<Label>]) -> Option<Label> {
    let mut tally = [0usize; NUM_CLASSES];
    for label in votes.iter().flatten() {
        tally[label.index()] += 1;
    }
    let (best, count) = tally
        .iter()
        .enumerate()
        .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
    (count > 0).then(|| Label::ALL[best])
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ItemVotes {
    pub context: usize,
    pub truth: Label,
    pub votes: Vec<Option<Label>>,
    pub decision: Option<Label>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalOutcome {
    pub k: usize,
    pub seed: u64,
    pub confusion: ConfusionMatrix,
    pub metrics: ClassMetrics,
    pub items: Vec<ItemVotes>,
}

/// One prediction per item.
pub fn single_shot_eval(
    predictor: &dyn Predictor,
    dataset: &[EvalItem],
    seed: u64,
) -> Result<EvalOutcome> {
    majority_vote_eval(predictor, dataset, 1, seed)
}

/// `k` predictions per item, drawn in order from the item's own stream, so
/// the first vote is exactly the single-shot prediction.
pub fn majority_vote_eval(
    predictor: &dyn Predictor,
    dataset: &[EvalItem],
    k: usize,
    seed: u64,
) -> Result<EvalOutcome> {
    if dataset.is_empty() {
        return Err(Error::input("evaluation dataset is empty"));
    }
    if k == 0 {
        return Err(Error::config("majority vote needs k >= 1"));
    }
    let items = dataset
        .par_iter()
        .enumerate()
        .map(|(i, item)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let votes = (0..k)
                .map(|_| predictor.predict(&item.prompt, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(ItemVotes {
                context: item.prompt.context_id,
                truth: item.truth,
                decision: majority_vote(&votes),
                votes,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut confusion = ConfusionMatrix::new();
    for item in &items {
        confusion.record(item.truth, item.decision);
    }
    Ok(EvalOutcome {
        k,
        seed,
        metrics: metrics_from_confusion(&confusion),
        confusion,
        items,
    })
}
