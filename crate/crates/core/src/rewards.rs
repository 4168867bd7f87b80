//! Severity-weighted disease reward.
//!
//! A correct diagnosis earns a fixed base reward; a wrong one is charged
//! according to a per-(truth, prediction) penalty matrix whose rows are the
//! true disease. Missing predictions and unknown ground truth have their own
//! constants.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_CLASSES: usize = 7;

/// The spec file shipped with the crate.
pub const BUNDLED_SPEC: &str = include_str!("../data/reward_spec.toml");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Label {
    AK,
    BCC,
    Dermatitis,
    Melanoma,
    Psoriasis,
    Rosacea,
    SK,
}

impl Label {
    /// Canonical class order.
    pub const ALL: [Label; NUM_CLASSES] = [
        Label::AK,
        Label::BCC,
        Label::Dermatitis,
        Label::Melanoma,
        Label::Psoriasis,
        Label::Rosacea,
        Label::SK,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::AK => "AK",
            Label::BCC => "BCC",
            Label::Dermatitis => "Dermatitis",
            Label::Melanoma => "Melanoma",
            Label::Psoriasis => "Psoriasis",
            Label::Rosacea => "Rosacea",
            Label::SK => "SK",
        }
    }

    pub fn full_name(self) -> &'static str {
        match self {
            Label::AK => "Actinic Keratosis",
            Label::BCC => "Basal Cell Carcinoma",
            Label::Dermatitis => "Dermatitis",
            Label::Melanoma => "Melanoma",
            Label::Psoriasis => "Psoriasis",
            Label::Rosacea => "Rosacea",
            Label::SK => "Seborrheic Keratosis",
        }
    }

    fn aliases(self) -> &'static [&'static str] {
        match self {
            Label::AK => &["ak", "actinic keratosis"],
            Label::BCC => &["bcc", "basal cell carcinoma"],
            Label::Dermatitis => &["dermatitis", "derm", "derm."],
            Label::Melanoma => &["melanoma", "mel", "mel."],
            Label::Psoriasis => &["psoriasis", "psor", "psor."],
            Label::Rosacea => &["rosacea", "ros", "ros."],
            Label::SK => &["sk", "seborrheic keratosis"],
        }
    }

    /// Case-insensitive lookup over names, abbreviations and full names.
    pub fn parse(text: &str) -> Option<Label> {
        let normalized = text
            .split_whitespace()
            .collect::<Vec<_>>()
            .join(" ")
            .to_lowercase();
        Self::ALL
            .into_iter()
            .find(|label| label.aliases().contains(&normalized.as_str()))
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Validated reward constants and penalty matrix.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RewardSpec {
    pub base_correct: f64,
    pub invalid_prediction_penalty: f64,
    pub unknown_truth_penalty: f64,
    pub default_mismatch_penalty: f64,
    /// Class order as written in the spec file.
    pub classes: Vec<Label>,
    /// `penalty_matrix[truth][predicted]` in canonical label order. `None`
    /// on the diagonal and for confusions routed to the default penalty.
    pub penalty_matrix: Vec<Vec<Option<f64>>>,
}

impl RewardSpec {
    pub fn bundled() -> RewardSpec {
        parse_reward_spec(BUNDLED_SPEC).expect("bundled reward spec is valid")
    }

    pub fn penalty(&self, truth: Label, predicted: Label) -> Option<f64> {
        self.penalty_matrix[truth.index()][predicted.index()]
    }

    /// Off-diagonal confusion with the mildest penalty for `truth`; ties go
    /// to the earlier label in canonical order.
    pub fn mildest_confusion(&self, truth: Label) -> Label {
        let mut best: Option<(Label, f64)> = None;
        for predicted in Label::ALL.into_iter().filter(|&p| p != truth) {
            let r = reward(Some(predicted), Some(truth), self);
            if best.is_none_or(|(_, b)| r > b) {
                best = Some((predicted, r));
            }
        }
        best.map(|(l, _)| l).unwrap_or(truth)
    }
}

/// Label from the first `<answer>...</answer>` span, if it names a known
/// disease. Later spans are ignored even when the first one is unparseable.
pub fn extract_answer(text: &str) -> Option<Label> {
    const OPEN: &str = "<answer>";
    const CLOSE: &str = "</answer>";
    let start = text.find(OPEN)? + OPEN.len();
    let len = text[start..].find(CLOSE)?;
    Label::parse(text[start..start + len].trim())
}

pub fn reward(predicted: Option<Label>, truth: Option<Label>, spec: &RewardSpec) -> f64 {
    let Some(truth) = truth else {
        return spec.unknown_truth_penalty;
    };
    let Some(predicted) = predicted else {
        return spec.invalid_prediction_penalty;
    };
    if predicted == truth {
        return spec.base_correct;
    }
    spec.penalty(truth, predicted)
        .unwrap_or(spec.default_mismatch_penalty)
}

/// Reward-to-go for a terminal-only reward: the same value at every position.
pub fn reward_to_go(terminal_reward: f64, response_len: usize) -> Result<Vec<f64>> {
    if response_len == 0 {
        return Err(Error::input("reward-to-go needs a response of length >= 1"));
    }
    Ok(vec![terminal_reward; response_len])
}

pub fn load_reward_spec(path: impl AsRef<Path>) -> Result<RewardSpec> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::SpecLoad {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    parse_reward_spec(&text).map_err(|e| Error::SpecLoad {
        path: path.to_path_buf(),
        reason: match e {
            Error::InvalidConfig(msg) => msg,
            other => other.to_string(),
        },
    })
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecFile {
    constants: Constants,
    labels: Labels,
    penalties: BTreeMap<String, BTreeMap<String, Cell>>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Constants {
    base_correct: f64,
    invalid_prediction_penalty: f64,
    unknown_truth_penalty: f64,
    default_mismatch_penalty: f64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct Labels {
    order: Vec<String>,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum Cell {
    Value(f64),
    Keyword(String),
}

pub fn parse_reward_spec(text: &str) -> Result<RewardSpec> {
    let file: SpecFile = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
    let c = &file.constants;
    if !(c.base_correct > 0.0) {
        return Err(Error::config(format!(
            "base_correct must be > 0, got {}",
            c.base_correct
        )));
    }
    for (name, v) in [
        ("invalid_prediction_penalty", c.invalid_prediction_penalty),
        ("unknown_truth_penalty", c.unknown_truth_penalty),
        ("default_mismatch_penalty", c.default_mismatch_penalty),
    ] {
        if !(v < 0.0) {
            return Err(Error::config(format!("{name} must be < 0, got {v}")));
        }
    }

    let classes = file
        .labels
        .order
        .iter()
        .map(|name| {
            Label::parse(name)
                .ok_or_else(|| Error::config(format!("unknown label {name:?} in [labels]")))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut seen = [false; NUM_CLASSES];
    for l in &classes {
        if std::mem::replace(&mut seen[l.index()], true) {
            return Err(Error::config(format!("label {l} listed twice in [labels]")));
        }
    }
    if classes.len() != NUM_CLASSES {
        return Err(Error::config(format!(
            "[labels] must list all {NUM_CLASSES} classes, found {}",
            classes.len()
        )));
    }

    let mut matrix = vec![vec![None; NUM_CLASSES]; NUM_CLASSES];
    let mut rows_seen = [false; NUM_CLASSES];
    for (row_name, row) in &file.penalties {
        let truth = Label::parse(row_name)
            .ok_or_else(|| Error::config(format!("unknown penalty row {row_name:?}")))?;
        if std::mem::replace(&mut rows_seen[truth.index()], true) {
            return Err(Error::config(format!("penalty row {truth} given twice")));
        }
        let mut cols_seen = [false; NUM_CLASSES];
        for (col_name, cell) in row {
            let predicted = Label::parse(col_name).ok_or_else(|| {
                Error::config(format!(
                    "unknown column {col_name:?} in penalty row {truth}"
                ))
            })?;
            if std::mem::replace(&mut cols_seen[predicted.index()], true) {
                return Err(Error::config(format!(
                    "cell {truth}/{predicted} given twice"
                )));
            }
            let value = match cell {
                Cell::Keyword(k) if predicted == truth && k.eq_ignore_ascii_case("n/a") => None,
                Cell::Keyword(k) if predicted != truth && k == "default" => None,
                Cell::Keyword(k) => {
                    return Err(Error::config(format!(
                        "cell {truth}/{predicted}: unexpected {k:?}"
                    )))
                }
                Cell::Value(_) if predicted == truth => {
                    return Err(Error::config(format!(
                        "diagonal cell {truth}/{predicted} must be omitted or \"N/A\""
                    )))
                }
                Cell::Value(v) if !(*v < 0.0) => {
                    return Err(Error::config(format!(
                        "penalty {truth}/{predicted} must be negative, got {v}"
                    )))
                }
                Cell::Value(v) => Some(*v),
            };
            matrix[truth.index()][predicted.index()] = value;
        }
        for predicted in Label::ALL {
            if predicted != truth && !cols_seen[predicted.index()] {
                return Err(Error::config(format!(
                    "missing penalty cell {truth}/{predicted}"
                )));
            }
        }
    }
    if let Some(missing) = Label::ALL.into_iter().find(|l| !rows_seen[l.index()]) {
        return Err(Error::config(format!("missing penalty row {missing}")));
    }

    Ok(RewardSpec {
        base_correct: c.base_correct,
        invalid_prediction_penalty: c.invalid_prediction_penalty,
        unknown_truth_penalty: c.unknown_truth_penalty,
        default_mismatch_penalty: c.default_mismatch_penalty,
        classes,
        penalty_matrix: matrix,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    #[test]
    fn answer_extraction() {
        assert_eq!(extract_answer("<answer>Melanoma</answer>"), Some(Melanoma));
        assert_eq!(extract_answer("no tags here"), None);
        assert_eq!(
            extract_answer("<answer>  rosacea \n</answer>"),
            Some(Rosacea)
        );
        assert_eq!(extract_answer("<answer>Melanoma"), None);
        assert_eq!(
            extract_answer("<answer>lupus</answer><answer>SK</answer>"),
            None
        );
    }

    // Scans for every well-formed span independently and takes the first.
    fn scan_oracle(text: &str) -> Option<Label> {
        let bytes = text.as_bytes();
        for i in 0..bytes.len() {
            if text[i..].starts_with("<answer>") {
                let body = &text[i + 8..];
                for j in 0..body.len() {
                    if body[j..].starts_with("</answer>") {
                        return Label::parse(body[..j].trim());
                    }
                }
                return None;
            }
        }
        None
    }

    #[test]
    fn first_span_wins_with_aliases() {
        let text = "<answer>basal cell carcinoma</answer> <answer>Rosacea</answer>";
        assert_eq!(extract_answer(text), Some(BCC));
        assert_eq!(extract_answer(text), scan_oracle(text));
        for t in [
            "<thinking>x</thinking><answer>SEBORRHEIC   keratosis</answer>",
            "<answer></answer><answer>AK</answer>",
            "pre <answer>Derm.</answer>",
        ] {
            assert_eq!(extract_answer(t), scan_oracle(t));
        }
    }

    #[test]
    fn table_lookups() {
        let spec = RewardSpec::bundled();
        assert_eq!(reward(Some(Melanoma), Some(Melanoma), &spec), 10.0);
        assert_eq!(reward(Some(Dermatitis), Some(Melanoma), &spec), -5.0);
        assert_eq!(reward(None, Some(Melanoma), &spec), -5.0);
        assert_eq!(reward(Some(SK), Some(AK), &spec), -2.0);
        assert_eq!(reward(Some(Melanoma), None, &spec), -0.5);
        assert_eq!(reward(None, None, &spec), -0.5);
    }

    #[test]
    fn matrix_is_asymmetric_and_bounded() {
        let spec = RewardSpec::bundled();
        assert_eq!(spec.penalty(Melanoma, Dermatitis), Some(-5.0));
        assert_eq!(spec.penalty(Dermatitis, Melanoma), Some(-3.5));
        assert_eq!(spec.penalty(Dermatitis, Psoriasis), Some(-0.5));
        let mut global_min = f64::INFINITY;
        for t in Label::ALL {
            for p in Label::ALL {
                if t == p {
                    assert_eq!(spec.penalty(t, p), None);
                    continue;
                }
                let v = spec.penalty(t, p).unwrap();
                assert!((-5.0..=-0.5).contains(&v));
                global_min = global_min.min(v);
            }
        }
        let at_min: Vec<_> = Label::ALL
            .into_iter()
            .filter(|&p| spec.penalty(Melanoma, p) == Some(global_min))
            .collect();
        assert_eq!(at_min, vec![Dermatitis, Psoriasis, Rosacea]);
    }

    #[test]
    fn reward_is_total() {
        let spec = RewardSpec::bundled();
        let options: Vec<Option<Label>> =
            std::iter::once(None).chain(Label::ALL.map(Some)).collect();
        for &p in &options {
            for &t in &options {
                assert!(reward(p, t, &spec).is_finite());
            }
        }
    }

    #[test]
    fn reward_to_go_is_constant() {
        assert_eq!(reward_to_go(10.0, 1).unwrap(), vec![10.0]);
        assert_eq!(reward_to_go(-2.5, 3).unwrap(), vec![-2.5; 3]);
        assert_eq!(reward_to_go(0.0, 4).unwrap(), vec![0.0; 4]);
        assert!(reward_to_go(1.0, 0).is_err());
    }

    #[test]
    fn default_cells_route_to_default_penalty() {
        let text = BUNDLED_SPEC.replace(
            "[penalties.SK]\nAK = -1.0",
            "[penalties.SK]\nAK = \"default\"",
        );
        let spec = parse_reward_spec(&text).unwrap();
        assert_eq!(reward(Some(AK), Some(SK), &spec), -2.5);
    }

    #[test]
    fn rejects_invalid_specs() {
        let positive = BUNDLED_SPEC.replace("Psoriasis = -0.5", "Psoriasis = 1.0");
        assert!(parse_reward_spec(&positive)
            .unwrap_err()
            .to_string()
            .contains("negative"));

        let missing = BUNDLED_SPEC.replace("Rosacea = -0.7\n", "");
        assert!(parse_reward_spec(&missing)
            .unwrap_err()
            .to_string()
            .contains("missing penalty cell"));

        let base = BUNDLED_SPEC.replace("base_correct = 10.0", "base_correct = -1.0");
        assert!(parse_reward_spec(&base).is_err());

        let unknown = BUNDLED_SPEC.replace("[constants]", "[constants]\nbonus = 1.0");
        assert!(parse_reward_spec(&unknown).is_err());
    }

    #[test]
    fn label_aliases() {
        assert_eq!(Label::parse("Actinic Keratosis"), Some(AK));
        assert_eq!(Label::parse("MEL"), Some(Melanoma));
        assert_eq!(Label::parse("psor."), Some(Psoriasis));
        assert_eq!(Label::parse("eczema"), None);
        for l in Label::ALL {
            assert_eq!(Label::parse(l.name()), Some(l));
            assert_eq!(Label::parse(l.full_name()), Some(l));
            assert_eq!(Label::from_index(l.index()), Some(l));
        }
    }

    #[test]
    fn mildest_confusions() {
        let spec = RewardSpec::bundled();
        assert_eq!(spec.mildest_confusion(AK), BCC);
        assert_eq!(spec.mildest_confusion(Dermatitis), Psoriasis);
        assert_eq!(spec.mildest_confusion(Melanoma), BCC);
        assert_eq!(spec.mildest_confusion(SK), AK);
    }
}
