//! Weighted-average ensembling and exhaustive weight search.
//!
//! The ensemble score of a sample is the convex combination of the model
//! scores under a shared weight vector. The search walks every point of the
//! lattice `{k * step}` on the weight simplex and keeps the vector with the
//! highest thresholded accuracy.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::metrics::{self, ClassificationReport, ConfusionCounts};
use crate::model::{check_threshold, decide, AlignedPredictions};

/// Grid spacing used when the caller does not pick one.
pub const DEFAULT_STEP: f64 = 0.005;
pub const MAX_MODELS: usize = 4;
const SUM_TOLERANCE: f64 = 1e-9;

/// Nonnegative weights summing to one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(weights: Vec<f64>) -> Result<Self> {
        if weights.is_empty() {
            return Err(domain("weight vector is empty"));
        }
        if let Some(w) = weights.iter().find(|w| !(0.0..=1.0).contains(*w)) {
            return Err(domain(format!("weight {w} outside [0, 1]")));
        }
        let sum: f64 = weights.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(domain(format!("weights sum to {sum}, not 1")));
        }
        Ok(Self(weights))
    }

    /// Weight `j` is `parts[j] / total`.
    fn from_composition(parts: &[u32], total: u32) -> Self {
        Self(parts.iter().map(|&k| k as f64 / total as f64).collect())
    }

    /// The `j`-th unit vector of length `n`.
    pub fn unit(n: usize, j: usize) -> Result<Self> {
        if j >= n {
            return Err(domain(format!("unit index {j} out of range for {n} models")));
        }
        let mut w = vec![0.0; n];
        w[j] = 1.0;
        Ok(Self(w))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

impl TryFrom<Vec<f64>> for WeightVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<WeightVector> for Vec<f64> {
    fn from(w: WeightVector) -> Self {
        w.0
    }
}

/// Number of grid divisions `m = 1/step`; `step` has to divide 1.
pub fn grid_divisions(step: f64) -> Result<u32> {
    if !(step > 0.0 && step <= 1.0) {
        return Err(domain(format!("grid step {step} must lie in (0, 1]")));
    }
    let inv = 1.0 / step;
    let m = inv.round();
    if (inv - m).abs() > 1e-9 || m > u32::MAX as f64 {
        return Err(domain(format!("grid step {step} does not divide 1")));
    }
    Ok(m as u32)
}

fn check_arity(n_models: usize) -> Result<()> {
    if (1..=MAX_MODELS).contains(&n_models) {
        Ok(())
    } else {
        Err(Error::UnsupportedArity(n_models))
    }
}

/// All compositions of `total` into `parts` nonnegative integers, flattened,
/// in ascending lexicographic order.
fn compositions(parts: usize, total: u32) -> Vec<u32> {
    fn rec(prefix: &mut Vec<u32>, parts: usize, left: u32, out: &mut Vec<u32>) {
        if prefix.len() + 1 == parts {
            out.extend_from_slice(prefix);
            out.push(left);
            return;
        }
        for k in 0..=left {
            prefix.push(k);
            rec(prefix, parts, left - k, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::with_capacity(parts), parts, total, &mut out);
    out
}

/// Every weight vector on the simplex lattice of spacing `step`.
pub fn enumerate_weight_grid(n_models: usize, step: f64) -> Result<Vec<WeightVector>> {
    check_arity(n_models)?;
    let m = grid_divisions(step)?;
    Ok(compositions(n_models, m)
        .chunks(n_models)
        .map(|c| WeightVector::from_composition(c, m))
        .collect())
}

fn check_dims(aligned: &AlignedPredictions, w: &WeightVector) -> Result<()> {
    if w.len() != aligned.n_models() {
        return Err(domain(format!(
            "{} weights for {} models",
            w.len(),
            aligned.n_models()
        )));
    }
    Ok(())
}

#[inline]
fn combine_row(row: &[f64], w: &[f64]) -> f64 {
    let s: f64 = row.iter().zip(w).map(|(s, w)| s * w).sum();
    // Rounding may push the sum a hair past the row's range.
    let (lo, hi) = row
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)));
    s.clamp(lo, hi)
}

/// Per-sample weighted average of the model scores.
pub fn combine(aligned: &AlignedPredictions, w: &WeightVector) -> Result<Vec<f64>> {
    check_dims(aligned, w)?;
    Ok((0..aligned.n_samples())
        .map(|i| combine_row(aligned.row(i), w.as_slice()))
        .collect())
}

/// Combined scores and their evaluation at `threshold`.
pub fn apply(
    aligned: &AlignedPredictions,
    w: &WeightVector,
    threshold: f64,
) -> Result<(Vec<f64>, ClassificationReport)> {
    check_threshold(threshold)?;
    let scores = combine(aligned, w)?;
    let report = ClassificationReport::evaluate(&scores, aligned.true_labels(), threshold)?;
    Ok((scores, report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchResult {
    pub best_weights: WeightVector,
    pub best_accuracy: f64,
    pub best_report: ClassificationReport,
    pub grid_size: usize,
    pub per_model_accuracy: Vec<f64>,
}

/// A scored grid point. Ordering: more correct, then higher weighted F1,
/// then lexicographically smaller composition.
#[derive(Debug, Clone, Copy)]
struct Candidate<'a> {
    composition: &'a [u32],
    counts: ConfusionCounts,
    f1: f64,
}

impl Candidate<'_> {
    fn beats(&self, other: &Self) -> bool {
        match self.counts.correct().cmp(&other.counts.correct()) {
            Ordering::Greater => true,
            Ordering::Less => false,
            Ordering::Equal => match self.f1.total_cmp(&other.f1) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => self.composition < other.composition,
            },
        }
    }
}

fn pick<'a>(a: Candidate<'a>, b: Candidate<'a>) -> Candidate<'a> {
    if b.beats(&a) {
        b
    } else {
        a
    }
}

/// Exhaustive grid search using rayon's global pool.
pub fn search(aligned: &AlignedPredictions, step: f64, threshold: f64) -> Result<SearchResult> {
    search_impl(aligned, step, threshold)
}

/// Grid search on a dedicated pool of `threads` workers. The result does not
/// depend on the thread count.
pub fn search_with_threads(
    aligned: &AlignedPredictions,
    step: f64,
    threshold: f64,
    threads: usize,
) -> Result<SearchResult> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads.max(1))
        .build()
        .map_err(|e| domain(format!("cannot build thread pool: {e}")))?;
    pool.install(|| search_impl(aligned, step, threshold))
}

fn score_point<'a>(aligned: &AlignedPredictions, m: u32, threshold: f64, composition: &'a [u32]) -> Candidate<'a> {
    let w: Vec<f64> = composition.iter().map(|&k| k as f64 / m as f64).collect();
    let mut counts = ConfusionCounts::default();
    for (i, &truth) in aligned.true_labels().iter().enumerate() {
        counts.record(truth, decide(combine_row(aligned.row(i), &w), threshold));
    }
    Candidate {
        composition,
        counts,
        f1: metrics::weighted_f1(&counts),
    }
}

fn search_impl(aligned: &AlignedPredictions, step: f64, threshold: f64) -> Result<SearchResult> {
    check_threshold(threshold)?;
    let n_models = aligned.n_models();
    check_arity(n_models)?;
    let m = grid_divisions(step)?;
    let grid = compositions(n_models, m);
    let labels = aligned.true_labels();

    let best = grid
        .par_chunks(n_models)
        .map(|composition| score_point(aligned, m, threshold, composition))
        .reduce_with(pick)
        .expect("grid always contains at least one vector");

    let best_weights = WeightVector::from_composition(best.composition, m);
    let (_, best_report) = apply(aligned, &best_weights, threshold)?;
    let per_model_accuracy = (0..n_models)
        .map(|j| {
            let c = metrics::confusion_at(&aligned.column(j), labels, threshold)?;
            metrics::accuracy(&c)
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SearchResult {
        best_accuracy: best_report.accuracy,
        best_weights,
        best_report,
        grid_size: grid.len() / n_models,
        per_model_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Label;
    use proptest::prelude::*;

    fn aligned(labels: &[Label], columns: &[Vec<f64>]) -> AlignedPredictions {
        let ids = (0..labels.len()).map(|i| format!("s{i:04}")).collect();
        let names = (0..columns.len()).map(|j| format!("m{j}")).collect();
        AlignedPredictions::from_columns(ids, labels.to_vec(), names, columns).unwrap()
    }

    fn binom(n: u64, k: u64) -> u64 {
        (1..=k).fold(1, |acc, i| acc * (n - k + i) / i)
    }

    #[test]
    fn grid_small_cases() {
        let g = enumerate_weight_grid(2, 0.5).unwrap();
        let v: Vec<&[f64]> = g.iter().map(|w| w.as_slice()).collect();
        assert_eq!(v, [&[0.0, 1.0][..], &[0.5, 0.5], &[1.0, 0.0]]);

        // Brute-force triple loop.
        let mut brute = vec![];
        for a in 0..=2u32 {
            for b in 0..=2u32 {
                for c in 0..=2u32 {
                    if a + b + c == 2 {
                        brute.push(vec![a as f64 / 2.0, b as f64 / 2.0, c as f64 / 2.0]);
                    }
                }
            }
        }
        let g: Vec<Vec<f64>> = enumerate_weight_grid(3, 0.5).unwrap().into_iter().map(Vec::from).collect();
        assert_eq!(g, brute);
        assert_eq!(g.len(), 6);

        assert_eq!(enumerate_weight_grid(1, 0.005).unwrap(), [WeightVector::new(vec![1.0]).unwrap()]);
    }

    #[test]
    fn grid_sizes_match_binomial() {
        for n in 1..=4usize {
            for m in [1u32, 2, 5, 10, 20] {
                let g = enumerate_weight_grid(n, 1.0 / m as f64).unwrap();
                assert_eq!(g.len() as u64, binom(m as u64 + n as u64 - 1, n as u64 - 1));
                for w in &g {
                    assert!((w.as_slice().iter().sum::<f64>() - 1.0).abs() < 1e-12);
                }
                assert!(g.windows(2).all(|p| p[0].as_slice() < p[1].as_slice()));
            }
        }
        assert_eq!(enumerate_weight_grid(2, 0.005).unwrap().len(), 201);
    }

    #[test]
    fn grid_errors() {
        assert!(matches!(enumerate_weight_grid(2, 0.3), Err(Error::Domain(_))));
        assert!(matches!(enumerate_weight_grid(2, 0.0), Err(Error::Domain(_))));
        assert!(matches!(enumerate_weight_grid(5, 0.5), Err(Error::UnsupportedArity(5))));
        assert!(matches!(enumerate_weight_grid(0, 0.5), Err(Error::UnsupportedArity(0))));
    }

    #[test]
    fn weight_vector_validation() {
        assert!(WeightVector::new(vec![0.45, 0.55]).is_ok());
        assert!(WeightVector::new(vec![0.5, 0.6]).is_err());
        assert!(WeightVector::new(vec![-0.1, 1.1]).is_err());
        assert!(WeightVector::new(vec![]).is_err());
        let w: std::result::Result<WeightVector, _> = serde_json::from_str("[0.2, 0.2]");
        assert!(w.is_err());
    }

    #[test]
    fn combine_examples() {
        let al = aligned(&[Label::Pneumonia, Label::Normal], &[vec![0.8, 0.3], vec![0.6, 0.1]]);
        assert_eq!(combine(&al, &WeightVector::unit(2, 0).unwrap()).unwrap(), al.column(0));
        let c = combine(&al, &WeightVector::new(vec![0.45, 0.55]).unwrap()).unwrap();
        assert!((c[0] - 0.69).abs() < 1e-12);
        assert!(combine(&al, &WeightVector::new(vec![1.0]).unwrap()).is_err());

        let al = aligned(&[Label::Pneumonia], &[vec![0.37], vec![0.37]]);
        assert_eq!(combine(&al, &WeightVector::new(vec![0.3, 0.7]).unwrap()).unwrap(), [0.37]);
    }

    #[test]
    fn identical_columns_tie_to_lexicographic_minimum() {
        let col = vec![0.9, 0.4, 0.6, 0.2, 0.7];
        let labels = [Label::Pneumonia, Label::Pneumonia, Label::Normal, Label::Normal, Label::Pneumonia];
        let al = aligned(&labels, &[col.clone(), col]);
        let r = search(&al, 0.005, 0.5).unwrap();
        assert_eq!(r.best_weights.as_slice(), [0.0, 1.0]);
        assert_eq!(r.grid_size, 201);
    }

    #[test]
    fn single_model_search() {
        let labels = [Label::Pneumonia, Label::Normal, Label::Normal];
        let al = aligned(&labels, &[vec![0.9, 0.6, 0.1]]);
        let r = search(&al, 0.005, 0.5).unwrap();
        assert_eq!(r.best_weights.as_slice(), [1.0]);
        assert_eq!(r.grid_size, 1);
        assert!((r.best_accuracy - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.per_model_accuracy, [r.best_accuracy]);
    }

    #[test]
    fn unit_weights_reproduce_single_model_report() {
        let labels = [Label::Pneumonia, Label::Normal, Label::Pneumonia, Label::Normal];
        let a = vec![0.8, 0.3, 0.45, 0.55];
        let al = aligned(&labels, &[a.clone(), vec![0.1, 0.9, 0.6, 0.2]]);
        let (_, r) = apply(&al, &WeightVector::unit(2, 0).unwrap(), 0.5).unwrap();
        assert_eq!(r, ClassificationReport::evaluate(&a, &labels, 0.5).unwrap());
    }

    #[test]
    fn constant_scores_follow_threshold() {
        let labels = [Label::Pneumonia, Label::Normal, Label::Normal];
        let al = aligned(&labels, &[vec![0.6; 3], vec![0.6; 3]]);
        let (s, r) = apply(&al, &WeightVector::new(vec![0.25, 0.75]).unwrap(), 0.5).unwrap();
        assert_eq!(s, [0.6; 3]);
        assert_eq!(r.counts, ConfusionCounts::new(1, 0, 2, 0));
        let (_, r) = apply(&al, &WeightVector::new(vec![0.25, 0.75]).unwrap(), 0.7).unwrap();
        assert_eq!(r.counts, ConfusionCounts::new(0, 1, 0, 2));
    }

    #[test]
    fn mixture_fixes_disjoint_errors() {
        use Label::{Normal as N, Pneumonia as P};
        // A errs on samples 0,1; B errs on 4,5. An even mix gets all six right.
        let labels = [P, P, P, N, N, N];
        let a = vec![0.45, 0.40, 0.9, 0.1, 0.2, 0.3];
        let b = vec![0.80, 0.75, 0.8, 0.2, 0.6, 0.65];
        let al = aligned(&labels, &[a, b]);
        let r = search(&al, 0.005, 0.5).unwrap();
        assert_eq!(r.best_accuracy, 1.0);
        assert!(r.best_accuracy >= r.per_model_accuracy.iter().cloned().fold(0.0, f64::max));
    }

    proptest! {
        #[test]
        fn combine_is_linear(
            rows in proptest::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0), 1..20),
            i in 0usize..66, j in 0usize..66, alpha in 0.0f64..=1.0,
        ) {
            let labels = vec![Label::Normal; rows.len()];
            let cols: Vec<Vec<f64>> = (0..3).map(|k| rows.iter().map(|r| [r.0, r.1, r.2][k]).collect()).collect();
            let al = aligned(&labels, &cols);
            let grid = enumerate_weight_grid(3, 0.1).unwrap();
            let (w1, w2) = (&grid[i % grid.len()], &grid[j % grid.len()]);
            let mix: Vec<f64> = w1.as_slice().iter().zip(w2.as_slice()).map(|(a, b)| alpha * a + (1.0 - alpha) * b).collect();
            let lhs = combine(&al, &WeightVector::new(mix).unwrap()).unwrap();
            let c1 = combine(&al, w1).unwrap();
            let c2 = combine(&al, w2).unwrap();
            for k in 0..lhs.len() {
                prop_assert!((lhs[k] - (alpha * c1[k] + (1.0 - alpha) * c2[k])).abs() <= 1e-12);
                let row = al.row(k);
                let lo = row.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                prop_assert!(lhs[k] >= lo && lhs[k] <= hi);
            }
        }
    }
}
