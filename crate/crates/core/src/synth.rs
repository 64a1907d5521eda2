//! Seeded fixture generators: correlated prediction sets, separable feature
//! batches, and a hand-built score pair that reproduces a known ensemble
//! outcome.

use rand::{seq::SliceRandom, Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::head::FeatureBatch;
use crate::model::{Label, PredictionRecord, PredictionSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ErrorProfile {
    pub name: String,
    /// Probability a positive sample is scored below 0.5.
    pub miss_rate: f64,
    /// Probability a negative sample is scored at or above 0.5.
    pub false_alarm_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub n: usize,
    pub n_pos: usize,
    pub models: Vec<ErrorProfile>,
    /// Probability that a model's error coin is the shared one.
    pub error_correlation: f64,
    pub score_margin: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Test-split sizing (586 samples, 423 positive) with two models whose
    /// expected confusion matrices are (413, 10, 7, 156) and (410, 13, 9, 154).
    pub fn test_split(seed: u64) -> Self {
        Self {
            n: 586,
            n_pos: 423,
            models: vec![
                ErrorProfile {
                    name: "mobilenetv2".into(),
                    miss_rate: 10.0 / 423.0,
                    false_alarm_rate: 7.0 / 163.0,
                },
                ErrorProfile {
                    name: "nasnetmobile".into(),
                    miss_rate: 13.0 / 423.0,
                    false_alarm_rate: 9.0 / 163.0,
                },
            ],
            error_correlation: 0.7,
            score_margin: 0.4,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.n_pos > self.n {
            return Err(domain(format!("need 0 <= n_pos <= n and n > 0 (n={}, n_pos={})", self.n, self.n_pos)));
        }
        if self.models.is_empty() {
            return Err(domain("at least one model profile is required"));
        }
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        for m in &self.models {
            if !unit(m.miss_rate) || !unit(m.false_alarm_rate) {
                return Err(domain(format!("error rates of `{}` must lie in [0, 1]", m.name)));
            }
        }
        if !unit(self.error_correlation) {
            return Err(domain("error_correlation must lie in [0, 1]"));
        }
        if !(self.score_margin > 0.0 && self.score_margin < 0.5) {
            return Err(domain("score_margin must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Zero-padded so lexicographic order matches numeric order.
pub fn sample_id(i: usize) -> String {
    format!("s{i:06}")
}

/// Labels with exactly `n_pos` positives in a seeded random order.
fn shuffled_labels(n: usize, n_pos: usize, rng: &mut ChaCha8Rng) -> Vec<Label> {
    let mut labels: Vec<Label> = (0..n)
        .map(|i| if i < n_pos { Label::Pneumonia } else { Label::Normal })
        .collect();
    labels.shuffle(rng);
    labels
}

/// One prediction set per model profile.
///
/// Each model errs on a sample when its error coin falls below the
/// label-conditioned rate; with probability `error_correlation` that coin is
/// shared by all models, otherwise it is private. Correct samples land on the
/// right side of 0.5 by `margin * u`, wrong ones on the wrong side, with
/// `u ~ U(0.2, 1]`.
pub fn gen_predictions(spec: &SynthSpec) -> Result<Vec<PredictionSet>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let labels = shuffled_labels(spec.n, spec.n_pos, &mut rng);
    let mut records: Vec<Vec<PredictionRecord>> = vec![Vec::with_capacity(spec.n); spec.models.len()];

    for (i, &label) in labels.iter().enumerate() {
        let shared: f64 = rng.random();
        for (m, profile) in spec.models.iter().enumerate() {
            let use_shared = rng.random::<f64>() < spec.error_correlation;
            let private: f64 = rng.random();
            let coin = if use_shared { shared } else { private };
            let rate = if label.is_positive() {
                profile.miss_rate
            } else {
                profile.false_alarm_rate
            };
            let correct = coin >= rate;
            let u = 1.0 - 0.8 * rng.random::<f64>();
            let high_side = label.is_positive() == correct;
            let offset = spec.score_margin * u;
            let score = if high_side { 0.5 + offset } else { 0.5 - offset };
            records[m].push(PredictionRecord::new(sample_id(i), label, score)?);
        }
    }

    spec.models
        .iter()
        .zip(records)
        .map(|(p, r)| PredictionSet::new(p.name.clone(), r))
        .collect()
}

/// Label-conditioned Gaussian feature maps.
///
/// Each channel has class means `±separation/2` (in units of the noise σ) with
/// a random per-channel sign shared by all samples. A sample draws a latent
/// channel vector around its class mean with unit noise; every spatial cell is
/// that vector plus further unit i.i.d. noise.
pub fn gen_features(
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    separation: f64,
    n_pos: usize,
    seed: u64,
) -> Result<FeatureBatch> {
    if n == 0 || c == 0 || h == 0 || w == 0 {
        return Err(domain("feature dimensions must be positive"));
    }
    if n_pos > n || !separation.is_finite() || separation < 0.0 {
        return Err(domain("need n_pos <= n and a finite nonnegative separation"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = |rng: &mut ChaCha8Rng| -> f64 { StandardNormal.sample(rng) };

    let dir: Vec<f64> = (0..c)
        .map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 })
        .collect();

    let labels = shuffled_labels(n, n_pos, &mut rng);
    let mut values = Vec::with_capacity(n * h * w * c);
    for &label in &labels {
        let sign = if label.is_positive() { 0.5 } else { -0.5 };
        let latent: Vec<f64> = dir
            .iter()
            .map(|d| sign * separation * d + normal(&mut rng))
            .collect();
        for _ in 0..h * w {
            for &l in &latent {
                values.push((l + normal(&mut rng)) as f32);
            }
        }
    }
    FeatureBatch::new(h, w, c, values, labels)
}

/// Two score columns built so that each model alone and the 0.45/0.55
/// weighted average reproduce fixed confusion matrices on 586 samples.
///
/// * first model: (tp, fn, fp, tn) = (413, 10, 7, 156), 569 correct
/// * second model: (410, 13, 9, 154), 564 correct
/// * 0.45·first + 0.55·second at threshold 0.5: (417, 6, 2, 161), 578 correct
///
/// Samples one model gets wrong are rescued by the mixture only when the
/// second model's weight lies in (0.5475, 0.5526), so on a 0.005 grid the
/// optimum is exactly (0.45, 0.55). Samples both models get wrong cannot be
/// rescued by any weights, capping the reachable accuracy at 578/586.
pub fn ensemble_pair_fixture() -> (PredictionSet, PredictionSet) {
    use Label::{Normal as N, Pneumonia as P};
    // (label, count, first score, second score)
    let groups: [(Label, usize, f64, f64); 8] = [
        (P, 406, 0.90, 0.85), // both right
        (P, 6, 0.30, 0.20),   // both wrong
        (P, 4, 0.258, 0.70),  // first wrong: needs w2/w1 > 1.21
        (P, 7, 0.747, 0.30),  // second wrong: needs w2/w1 < 1.235
        (N, 149, 0.10, 0.15),
        (N, 2, 0.80, 0.70),
        (N, 5, 0.742, 0.30),
        (N, 7, 0.253, 0.70),
    ];
    let mut first = Vec::with_capacity(586);
    let mut second = Vec::with_capacity(586);
    let mut i = 0;
    for (label, count, a, b) in groups {
        for _ in 0..count {
            let id = format!("img{i:04}");
            first.push(PredictionRecord::new(id.clone(), label, a).expect("valid score"));
            second.push(PredictionRecord::new(id, label, b).expect("valid score"));
            i += 1;
        }
    }
    (
        PredictionSet::new("mobilenetv2", first).expect("unique ids"),
        PredictionSet::new("nasnetmobile", second).expect("unique ids"),
    )
}
