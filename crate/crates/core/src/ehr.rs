//! EHR data model: code vocabulary, multi-hot visits, patient records,
//! patient-level splits, and task label extraction.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Code strings with this prefix mark heart failure diagnoses (ICD-9-CM).
pub const HEART_FAILURE_PREFIX: &str = "428";

/// Ordered set of medical code strings with a bijection to `[0, d)`.
///
/// Built in first-appearance order over the records that define the
/// dataset, so the same records always produce the same vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CodeVocab {
    codes: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl CodeVocab {
    /// Number of distinct codes `d`.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn code(&self, idx: usize) -> &str {
        &self.codes[idx]
    }

    pub fn index_of(&self, code: &str) -> Option<usize> {
        self.index.get(code).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.codes.iter().map(String::as_str)
    }

    fn intern(&mut self, code: &str) -> usize {
        if let Some(&i) = self.index.get(code) {
            return i;
        }
        let i = self.codes.len();
        self.codes.push(code.to_string());
        self.index.insert(code.to_string(), i);
        i
    }
}

/// One hospital visit: the sparse form of the multi-hot diagnosis vector.
/// Indices are sorted, unique, nonempty and valid against the vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Visit {
    codes: Vec<usize>,
}

impl Visit {
    pub fn new(mut codes: Vec<usize>, d: usize) -> Result<Self> {
        codes.sort_unstable();
        codes.dedup();
        if codes.is_empty() {
            return Err(Error::data(None, "visit with no diagnoses"));
        }
        if let Some(&bad) = codes.iter().find(|&&c| c >= d) {
            return Err(Error::data(None, format!("code index {bad} out of vocabulary size {d}")));
        }
        Ok(Visit { codes })
    }

    pub fn codes(&self) -> &[usize] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn contains(&self, code: usize) -> bool {
        self.codes.binary_search(&code).is_ok()
    }
}

/// Chronological visit sequence of one patient. At least two visits, so a
/// feature/label pair can always be formed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PatientRecord {
    pub patient_id: String,
    visits: Vec<Visit>,
}

impl PatientRecord {
    pub fn new(patient_id: String, visits: Vec<Visit>) -> Result<Self> {
        if visits.len() < 2 {
            return Err(Error::data(
                None,
                format!("patient {patient_id} has {} visit(s); at least 2 required", visits.len()),
            ));
        }
        Ok(PatientRecord { patient_id, visits })
    }

    pub fn visits(&self) -> &[Visit] {
        &self.visits
    }
}

/// Counters for records dropped while building a dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LoadStats {
    /// Patients excluded for having fewer than two visits.
    pub skipped_too_few_visits: usize,
}

/// A code vocabulary plus the patient records defined over it. Immutable
/// after construction; splits share the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    vocab: Arc<CodeVocab>,
    patients: Vec<PatientRecord>,
}

impl Dataset {
    /// Build a dataset from raw per-patient visit code strings.
    ///
    /// The vocabulary is the union of all codes seen (label visits
    /// included), in first-appearance order. Patients with fewer than two
    /// visits are dropped and counted; an empty visit is an error naming
    /// the patient; duplicate codes within a visit collapse to one.
    pub fn from_patient_codes<I, V, S>(records: I) -> Result<(Dataset, LoadStats)>
    where
        I: IntoIterator<Item = (String, V)>,
        V: IntoIterator<Item = Vec<S>>,
        S: AsRef<str>,
    {
        let mut vocab = CodeVocab::default();
        let mut staged: Vec<(String, Vec<Vec<usize>>)> = Vec::new();
        for (patient_id, visits) in records {
            let mut patient_visits = Vec::new();
            for visit in visits {
                if visit.is_empty() {
                    return Err(Error::data(None, format!("patient {patient_id} has a visit with no diagnoses")));
                }
                let indices: Vec<usize> = visit.iter().map(|c| vocab.intern(c.as_ref())).collect();
                patient_visits.push(indices);
            }
            staged.push((patient_id, patient_visits));
        }

        let d = vocab.len();
        let mut stats = LoadStats::default();
        let mut patients = Vec::new();
        for (patient_id, visits) in staged {
            if visits.len() < 2 {
                log::warn!("skipping patient {patient_id}: fewer than 2 visits");
                stats.skipped_too_few_visits += 1;
                continue;
            }
            let visits = visits
                .into_iter()
                .map(|codes| Visit::new(codes, d))
                .collect::<Result<Vec<_>>>()
                .map_err(|e| Error::data(None, format!("patient {patient_id}: {e}")))?;
            patients.push(PatientRecord { patient_id, visits });
        }
        if patients.is_empty() {
            return Err(Error::data(None, "no usable patients (every record has fewer than 2 visits)"));
        }
        Ok((
            Dataset {
                vocab: Arc::new(vocab),
                patients,
            },
            stats,
        ))
    }

    pub fn vocab(&self) -> &CodeVocab {
        &self.vocab
    }

    /// Vocabulary size `d`.
    pub fn d(&self) -> usize {
        self.vocab.len()
    }

    pub fn patients(&self) -> &[PatientRecord] {
        &self.patients
    }

    pub fn len(&self) -> usize {
        self.patients.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patients.is_empty()
    }

    /// The visit codes of one patient as strings, for serialization.
    pub fn patient_code_strings(&self, patient: &PatientRecord) -> Vec<Vec<&str>> {
        patient
            .visits
            .iter()
            .map(|v| v.codes().iter().map(|&c| self.vocab.code(c)).collect())
            .collect()
    }

    fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            vocab: Arc::clone(&self.vocab),
            patients: indices.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }
}

/// Deterministically split a dataset by patient into train/validation/test.
///
/// The permutation depends only on `seed`; the three parts are disjoint and
/// share the full vocabulary. Patients beyond `counts` are left out.
pub fn split_dataset(ds: &Dataset, counts: (usize, usize, usize), seed: u64) -> Result<[Dataset; 3]> {
    let (n_train, n_val, n_test) = counts;
    let total = n_train + n_val + n_test;
    if total > ds.len() {
        return Err(Error::config(format!(
            "split {n_train}+{n_val}+{n_test} exceeds {} patients",
            ds.len()
        )));
    }
    let mut order: Vec<usize> = (0..ds.len()).collect();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let train = ds.subset(&order[..n_train]);
    let val = ds.subset(&order[n_train..n_train + n_val]);
    let test = ds.subset(&order[n_train + n_val..total]);
    Ok([train, val, test])
}

/// Prediction target kind.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    /// Predict the full diagnosis set of the next visit (multi-label).
    Diagnosis,
    /// Predict whether the next visit includes a heart failure code.
    HeartFailure,
}

/// Task label extracted from a patient's final visit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Label {
    Diagnosis(Visit),
    HeartFailure(bool),
}

/// Feature visits (all but the last) plus the task label from the last.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub patient_id: String,
    pub features: Vec<Visit>,
    pub label: Label,
}

impl LabeledExample {
    /// Diagnosis label codes, if this is a diagnosis example.
    pub fn diagnosis_label(&self) -> Option<&Visit> {
        match &self.label {
            Label::Diagnosis(v) => Some(v),
            Label::HeartFailure(_) => None,
        }
    }
}

/// Turn each patient into one example: the last visit becomes the label,
/// the rest are features. Heart failure is positive when any code string of
/// the label visit starts with `428`.
pub fn make_examples(ds: &Dataset, task: Task) -> Vec<LabeledExample> {
    ds.patients()
        .iter()
        .map(|p| {
            let (last, features) = p.visits().split_last().expect("records have >= 2 visits");
            let label = match task {
                Task::Diagnosis => Label::Diagnosis(last.clone()),
                Task::HeartFailure => Label::HeartFailure(
                    last.codes()
                        .iter()
                        .any(|&c| ds.vocab().code(c).starts_with(HEART_FAILURE_PREFIX)),
                ),
            };
            LabeledExample {
                patient_id: p.patient_id.clone(),
                features: features.to_vec(),
                label,
            }
        })
        .collect()
}
