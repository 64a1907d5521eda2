//! Labels, per-model prediction sets and their alignment into a score matrix.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};

/// Decision threshold used when none is given. Scores equal to it are positive.
pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// Binary diagnosis. `Pneumonia` is the positive class everywhere.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Label {
    Normal = 0,
    Pneumonia = 1,
}

impl Label {
    pub fn from_bit(bit: u8) -> Option<Label> {
        match bit {
            0 => Some(Label::Normal),
            1 => Some(Label::Pneumonia),
            _ => None,
        }
    }

    pub fn bit(self) -> u8 {
        self as u8
    }

    pub fn is_positive(self) -> bool {
        self == Label::Pneumonia
    }

    pub fn flipped(self) -> Label {
        match self {
            Label::Normal => Label::Pneumonia,
            Label::Pneumonia => Label::Normal,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::Normal => "NORMAL",
            Label::Pneumonia => "PNEUMONIA",
        }
    }
}

impl std::fmt::Display for Label {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

pub(crate) fn check_threshold(threshold: f64) -> Result<()> {
    if threshold > 0.0 && threshold < 1.0 {
        Ok(())
    } else {
        Err(domain(format!("threshold {threshold} must lie strictly inside (0, 1)")))
    }
}

pub(crate) fn check_score(score: f64) -> Result<()> {
    if (0.0..=1.0).contains(&score) {
        Ok(())
    } else {
        Err(domain(format!("score {score} outside [0, 1]")))
    }
}

/// Hard decision for a probability score: `Pneumonia` iff `score >= threshold`.
pub fn label_from_score(score: f64, threshold: f64) -> Result<Label> {
    check_score(score)?;
    check_threshold(threshold)?;
    Ok(decide(score, threshold))
}

/// Unchecked variant of [`label_from_score`] for hot loops over validated data.
#[inline]
pub(crate) fn decide(score: f64, threshold: f64) -> Label {
    if score >= threshold {
        Label::Pneumonia
    } else {
        Label::Normal
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub true_label: Label,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(sample_id: impl Into<String>, true_label: Label, score: f64) -> Result<Self> {
        let sample_id = sample_id.into();
        if sample_id.is_empty() {
            return Err(domain("sample_id must be nonempty"));
        }
        check_score(score)?;
        Ok(Self {
            sample_id,
            true_label,
            score,
        })
    }
}

/// One model's scores over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    model_name: String,
    records: Vec<PredictionRecord>,
}

impl PredictionSet {
    pub fn new(model_name: impl Into<String>, records: Vec<PredictionRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(domain("prediction set is empty"));
        }
        let mut seen = HashSet::with_capacity(records.len());
        for r in &records {
            if !seen.insert(r.sample_id.as_str()) {
                return Err(domain(format!("duplicate sample_id `{}`", r.sample_id)));
            }
        }
        Ok(Self {
            model_name: model_name.into(),
            records,
        })
    }

    pub fn model_name(&self) -> &str {
        &self.model_name
    }

    pub fn records(&self) -> &[PredictionRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scores(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.score).collect()
    }

    pub fn labels(&self) -> Vec<Label> {
        self.records.iter().map(|r| r.true_label).collect()
    }
}

/// Several models' scores joined on `sample_id`.
///
/// Rows are sorted by `sample_id`; `scores` is row-major `n_samples x n_models`
/// with column `j` belonging to `model_names[j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AlignedPredictions {
    sample_ids: Vec<String>,
    true_labels: Vec<Label>,
    scores: Vec<f64>,
    model_names: Vec<String>,
}

impl AlignedPredictions {
    /// Builds an aligned matrix directly from columns that already share a row order.
    pub fn from_columns(
        sample_ids: Vec<String>,
        true_labels: Vec<Label>,
        model_names: Vec<String>,
        columns: &[Vec<f64>],
    ) -> Result<Self> {
        let n = sample_ids.len();
        if n == 0 || columns.is_empty() {
            return Err(domain("aligned predictions need at least one sample and one model"));
        }
        if true_labels.len() != n || model_names.len() != columns.len() {
            return Err(domain("column/label/name counts do not agree"));
        }
        let m = columns.len();
        let mut scores = vec![0.0; n * m];
        for (j, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(domain(format!("column {j} has {} rows, expected {n}", col.len())));
            }
            for (i, &s) in col.iter().enumerate() {
                check_score(s)?;
                scores[i * m + j] = s;
            }
        }
        Ok(Self {
            sample_ids,
            true_labels,
            scores,
            model_names,
        })
    }

    pub fn n_samples(&self) -> usize {
        self.sample_ids.len()
    }

    pub fn n_models(&self) -> usize {
        self.model_names.len()
    }

    pub fn sample_ids(&self) -> &[String] {
        &self.sample_ids
    }

    pub fn true_labels(&self) -> &[Label] {
        &self.true_labels
    }

    pub fn model_names(&self) -> &[String] {
        &self.model_names
    }

    /// Scores of sample `i` across all models.
    pub fn row(&self, i: usize) -> &[f64] {
        let m = self.n_models();
        &self.scores[i * m..(i + 1) * m]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.n_samples()).map(|i| self.row(i)[j]).collect()
    }
}

/// Joins prediction sets on `sample_id`.
pub fn align(sets: &[PredictionSet]) -> Result<AlignedPredictions> {
    let first = sets
        .first()
        .ok_or_else(|| domain("align needs at least one prediction set"))?;
    if let Some(empty) = sets.iter().find(|s| s.is_empty()) {
        return Err(domain(format!("prediction set `{}` is empty", empty.model_name())));
    }

    let maps: Vec<BTreeMap<&str, &PredictionRecord>> = sets
        .iter()
        .map(|s| s.records().iter().map(|r| (r.sample_id.as_str(), r)).collect())
        .collect();

    let mut mismatched = BTreeSet::new();
    let universe: BTreeSet<&str> = maps.iter().flat_map(|m| m.keys().copied()).collect();
    for id in &universe {
        if maps.iter().any(|m| !m.contains_key(id)) {
            mismatched.insert(id.to_string());
        }
    }
    if !mismatched.is_empty() {
        return Err(Error::Alignment {
            ids: mismatched.into_iter().collect(),
        });
    }

    let n = first.len();
    let m = sets.len();
    let mut sample_ids = Vec::with_capacity(n);
    let mut true_labels = Vec::with_capacity(n);
    let mut scores = Vec::with_capacity(n * m);
    // BTreeMap iteration gives ascending sample_id order.
    for (id, rec) in &maps[0] {
        for other in &maps[1..] {
            if other[id].true_label != rec.true_label {
                return Err(Error::LabelConflict {
                    sample_id: id.to_string(),
                });
            }
        }
        sample_ids.push(id.to_string());
        true_labels.push(rec.true_label);
        scores.extend(maps.iter().map(|map| map[id].score));
    }

    Ok(AlignedPredictions {
        sample_ids,
        true_labels,
        scores,
        model_names: sets.iter().map(|s| s.model_name().to_string()).collect(),
    })
}
