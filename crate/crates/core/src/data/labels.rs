use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::Emotion;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    NoVotes,
    /// No label reached two votes.
    NoAgreement,
    /// Two or more labels share the top count.
    Tie,
    /// The agreed label is not one of the four classes.
    OutOfSet,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LabelDecision {
    Accept(Emotion),
    Reject(RejectReason),
}

impl LabelDecision {
    pub fn label(self) -> Option<Emotion> {
        match self {
            LabelDecision::Accept(e) => Some(e),
            LabelDecision::Reject(_) => None,
        }
    }
}

/// Majority vote with at least two agreeing annotators, after merging
/// happiness into excited.
pub fn filter_labels<S: AsRef<str>>(votes: &[S]) -> LabelDecision {
    if votes.is_empty() {
        return LabelDecision::Reject(RejectReason::NoVotes);
    }
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for v in votes {
        let key = match Emotion::from_raw(v.as_ref()) {
            Some(e) => e.name().to_string(),
            None => v.as_ref().trim().to_ascii_lowercase(),
        };
        *counts.entry(key).or_default() += 1;
    }
    let top = counts.values().copied().max().unwrap_or(0);
    if top < 2 {
        return LabelDecision::Reject(RejectReason::NoAgreement);
    }
    let mut winners = counts.iter().filter(|(_, &c)| c == top);
    let (label, _) = winners.next().expect("top count exists");
    if winners.next().is_some() {
        return LabelDecision::Reject(RejectReason::Tie);
    }
    match Emotion::from_raw(label) {
        Some(e) => LabelDecision::Accept(e),
        None => LabelDecision::Reject(RejectReason::OutOfSet),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn majority() {
        assert_eq!(filter_labels(&["anger", "anger", "neutral"]), LabelDecision::Accept(Emotion::Anger));
    }

    #[test]
    fn happiness_merges() {
        assert_eq!(
            filter_labels(&["happiness", "excited", "sadness"]),
            LabelDecision::Accept(Emotion::Excited)
        );
    }

    #[test]
    fn rejections() {
        assert_eq!(
            filter_labels(&["fear", "disgust", "surprise"]),
            LabelDecision::Reject(RejectReason::NoAgreement)
        );
        assert_eq!(
            filter_labels(&["fear", "fear", "anger"]),
            LabelDecision::Reject(RejectReason::OutOfSet)
        );
        assert_eq!(
            filter_labels(&["anger", "anger", "sad", "sadness"]),
            LabelDecision::Reject(RejectReason::Tie)
        );
        assert_eq!(filter_labels::<&str>(&[]), LabelDecision::Reject(RejectReason::NoVotes));
    }
}
