//! Trivial frequency baseline used as the acceptance reference point.

use alloc::vec;
use alloc::vec::Vec;

use crate::ehr::{LabeledExample, Visit};

/// Score margin that puts every code from the patient's own history above
/// every code that is not.
const HISTORY_MARGIN: f64 = 2.0;

/// Scores codes by global training frequency, with the patient's own
/// historical codes ranked above everything else by a fixed margin.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyBaseline {
    freq: Vec<f64>,
}

impl FrequencyBaseline {
    /// Count code frequency over the training feature visits.
    pub fn fit(train: &[LabeledExample], d: usize) -> Self {
        let mut counts = vec![0u64; d];
        for example in train {
            for visit in &example.features {
                for &c in visit.codes() {
                    counts[c] += 1;
                }
            }
        }
        let total: u64 = counts.iter().sum();
        let denom = if total == 0 { 1.0 } else { total as f64 };
        FrequencyBaseline {
            freq: counts.iter().map(|&c| c as f64 / denom).collect(),
        }
    }

    pub fn d(&self) -> usize {
        self.freq.len()
    }

    /// Per-code scores for a patient given their feature visits.
    pub fn score(&self, history: &[Visit]) -> Vec<f64> {
        let mut scores = self.freq.clone();
        for visit in history {
            for &c in visit.codes() {
                if scores[c] < HISTORY_MARGIN {
                    scores[c] = HISTORY_MARGIN + self.freq[c];
                }
            }
        }
        scores
    }
}
