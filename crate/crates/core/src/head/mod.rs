//! Classification head trained on frozen backbone feature maps.
//!
//! Pipeline: global average pooling -> inverted dropout -> batch
//! normalization -> dense + ReLU -> dense + sigmoid. Gradients are derived by
//! hand for binary cross-entropy averaged over the batch.

mod adam;
mod train;

pub use adam::{adam_step, Adam, AdamState};
pub use train::{train, train_with_validation, EpochRecord, TrainConfig, TrainHistory};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::model::Label;

/// Lower/upper clamp applied to probabilities inside the loss.
pub const PROB_CLAMP: f64 = 1e-7;

/// Feature maps for `n` samples, each `h x w x c` (channels last), with labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBatch {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    values: Vec<f32>,
    labels: Vec<Label>,
}

impl FeatureBatch {
    pub fn new(h: usize, w: usize, c: usize, values: Vec<f32>, labels: Vec<Label>) -> Result<Self> {
        let n = labels.len();
        if n == 0 {
            return Err(domain("feature batch has no samples"));
        }
        if h == 0 || w == 0 || c == 0 {
            return Err(domain(format!("feature map dims {h}x{w}x{c} must be positive")));
        }
        if values.len() != n * h * w * c {
            return Err(domain(format!(
                "{} values for {n} samples of {h}x{w}x{c}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(domain("feature values must be finite"));
        }
        Ok(Self {
            n,
            h,
            w,
            c,
            values,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `(n, h, w, c)`
    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.h, self.w, self.c)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn labels(&self) -> &[Label] {
        &self.labels
    }

    pub fn sample(&self, i: usize) -> &[f32] {
        let s = self.h * self.w * self.c;
        &self.values[i * s..(i + 1) * s]
    }

    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        let mut values = Vec::with_capacity(idx.len() * self.h * self.w * self.c);
        for &i in idx {
            values.extend_from_slice(self.sample(i));
        }
        Self::new(self.h, self.w, self.c, values, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// GAP of every sample, row-major `n x c`.
    pub fn pooled(&self) -> Vec<f64> {
        (0..self.n)
            .flat_map(|i| gap(self.sample(i), self.h, self.w, self.c).expect("dims validated"))
            .collect()
    }
}

/// Per-channel mean over an `h x w x c` map.
pub fn gap<T: Copy + Into<f64>>(features: &[T], h: usize, w: usize, c: usize) -> Result<Vec<f64>> {
    if h == 0 || w == 0 || c == 0 || features.len() != h * w * c {
        return Err(domain(format!(
            "cannot pool {} values as a {h}x{w}x{c} map",
            features.len()
        )));
    }
    let mut out = vec![0.0; c];
    for cell in features.chunks_exact(c) {
        for (acc, &v) in out.iter_mut().zip(cell) {
            *acc += v.into();
        }
    }
    let cells = (h * w) as f64;
    out.iter_mut().for_each(|v| *v /= cells);
    Ok(out)
}

/// Logistic function, split on sign so neither branch overflows.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(probs: &[f64], labels: &[Label]) -> Result<f64> {
    if probs.len() != labels.len() || probs.is_empty() {
        return Err(domain(format!(
            "{} probabilities for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let sum: f64 = probs
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if y.is_positive() {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    Ok(sum / probs.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    pub d_hidden: usize,
    pub dropout_rate: f64,
    pub bn_momentum: f64,
    pub bn_eps: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            d_hidden: 64,
            dropout_rate: 0.2,
            bn_momentum: 0.99,
            bn_eps: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout active, batch statistics in batch-norm.
    Train,
    /// Deterministic: no dropout, running statistics.
    Infer,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadModel {
    c: usize,
    d_hidden: usize,
    dropout_rate: f64,
    bn_momentum: f64,
    bn_eps: f64,
    bn_gamma: Vec<f64>,
    bn_beta: Vec<f64>,
    bn_running_mean: Vec<f64>,
    bn_running_var: Vec<f64>,
    /// `c x d_hidden`, row-major.
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: f64,
    #[serde(skip)]
    generation: u64,
}

// Equality compares parameters and hyperparameters, not cache bookkeeping.
impl PartialEq for HeadModel {
    fn eq(&self, o: &Self) -> bool {
        (self.c, self.d_hidden) == (o.c, o.d_hidden)
            && (self.dropout_rate, self.bn_momentum, self.bn_eps) == (o.dropout_rate, o.bn_momentum, o.bn_eps)
            && self.trainable() == o.trainable()
            && self.running_stats() == o.running_stats()
    }
}

/// Names of the trainable tensors, in the order used by gradients and the optimizer.
pub const PARAM_NAMES: [&str; 6] = ["bn_gamma", "bn_beta", "w1", "b1", "w2", "b2"];

impl HeadModel {
    /// Glorot-uniform dense weights, zero biases, identity batch-norm.
    pub fn new(c: usize, cfg: &HeadConfig, seed: u64) -> Result<Self> {
        if c == 0 || cfg.d_hidden == 0 {
            return Err(domain("head needs at least one channel and one hidden unit"));
        }
        if !(0.0..1.0).contains(&cfg.dropout_rate) {
            return Err(domain(format!("dropout rate {} outside [0, 1)", cfg.dropout_rate)));
        }
        if !(0.0..1.0).contains(&cfg.bn_momentum) || !(cfg.bn_eps > 0.0) {
            return Err(domain("batch-norm momentum must be in [0, 1) and eps positive"));
        }
        let d = cfg.d_hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut glorot = |fan_in: usize, fan_out: usize, len: usize| -> Vec<f64> {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            (0..len).map(|_| rng.random_range(-limit..limit)).collect()
        };
        let w1 = glorot(c, d, c * d);
        let w2 = glorot(d, 1, d);
        Ok(Self {
            c,
            d_hidden: d,
            dropout_rate: cfg.dropout_rate,
            bn_momentum: cfg.bn_momentum,
            bn_eps: cfg.bn_eps,
            bn_gamma: vec![1.0; c],
            bn_beta: vec![0.0; c],
            bn_running_mean: vec![0.0; c],
            bn_running_var: vec![1.0; c],
            w1,
            b1: vec![0.0; d],
            w2,
            b2: 0.0,
            generation: 0,
        })
    }

    /// Checks shape and positivity invariants, e.g. after deserializing.
    pub fn validate(&self) -> Result<()> {
        let (c, d) = (self.c, self.d_hidden);
        let shapes_ok = c > 0
            && d > 0
            && [&self.bn_gamma, &self.bn_beta, &self.bn_running_mean, &self.bn_running_var]
                .iter()
                .all(|v| v.len() == c)
            && self.w1.len() == c * d
            && self.b1.len() == d
            && self.w2.len() == d;
        if !shapes_ok {
            return Err(domain("head parameter shapes are inconsistent"));
        }
        if self.bn_running_var.iter().any(|&v| !(v > 0.0)) {
            return Err(domain("batch-norm running variance must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) || !(self.bn_eps > 0.0) {
            return Err(domain("dropout rate or batch-norm eps out of range"));
        }
        let all_finite = self
            .trainable()
            .iter()
            .flat_map(|g| g.iter())
            .chain(&self.bn_running_mean)
            .chain(&self.bn_running_var)
            .all(|v| v.is_finite());
        if !all_finite {
            return Err(domain("head parameters must be finite"));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.c
    }

    pub fn d_hidden(&self) -> usize {
        self.d_hidden
    }

    pub fn dropout_rate(&self) -> f64 {
        self.dropout_rate
    }

    pub fn set_dropout_rate(&mut self, rate: f64) -> Result<()> {
        if !(0.0..1.0).contains(&rate) {
            return Err(domain(format!("dropout rate {rate} outside [0, 1)")));
        }
        self.dropout_rate = rate;
        Ok(())
    }

    pub fn running_stats(&self) -> (&[f64], &[f64]) {
        (&self.bn_running_mean, &self.bn_running_var)
    }

    pub fn trainable_param_count(&self) -> usize {
        2 * self.c + self.c * self.d_hidden + 2 * self.d_hidden + 1
    }

    /// Trainable tensors in [`PARAM_NAMES`] order.
    pub fn trainable(&self) -> [&[f64]; 6] {
        [
            &self.bn_gamma,
            &self.bn_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }

    /// Mutable trainable tensors. Invalidates outstanding forward caches.
    pub fn trainable_mut(&mut self) -> [&mut [f64]; 6] {
        self.generation += 1;
        [
            &mut self.bn_gamma,
            &mut self.bn_beta,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            std::slice::from_mut(&mut self.b2),
        ]
    }

    pub fn forward<R: Rng + ?Sized>(
        &self,
        batch: &FeatureBatch,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        if batch.c != self.c {
            return Err(domain(format!(
                "batch has {} channels, head expects {}",
                batch.c, self.c
            )));
        }
        self.forward_pooled(&batch.pooled(), mode, rng)
    }

    /// Forward pass from already pooled `n x c` features.
    pub fn forward_pooled<R: Rng + ?Sized>(
        &self,
        pooled: &[f64],
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Vec<f64>, ForwardCache)> {
        let (c, d) = (self.c, self.d_hidden);
        if pooled.is_empty() || pooled.len() % c != 0 {
            return Err(domain(format!("{} pooled values for {c} channels", pooled.len())));
        }
        let n = pooled.len() / c;

        let mut u = pooled.to_vec();
        if mode == Mode::Train && self.dropout_rate > 0.0 {
            let keep = 1.0 - self.dropout_rate;
            for v in u.iter_mut() {
                if rng.random::<f64>() < self.dropout_rate {
                    *v = 0.0;
                } else {
                    *v /= keep;
                }
            }
        }

        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; c];
                for row in u.chunks_exact(c) {
                    mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
                }
                mean.iter_mut().for_each(|m| *m /= n as f64);
                let mut var = vec![0.0; c];
                for row in u.chunks_exact(c) {
                    for k in 0..c {
                        var[k] += (row[k] - mean[k]).powi(2);
                    }
                }
                var.iter_mut().for_each(|v| *v /= n as f64);
                (mean, var)
            }
            Mode::Infer => (self.bn_running_mean.clone(), self.bn_running_var.clone()),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + self.bn_eps).sqrt()).collect();

        let mut xhat = vec![0.0; n * c];
        let mut z = vec![0.0; n * c];
        for i in 0..n {
            for k in 0..c {
                let xh = (u[i * c + k] - mean[k]) * inv_std[k];
                xhat[i * c + k] = xh;
                z[i * c + k] = self.bn_gamma[k] * xh + self.bn_beta[k];
            }
        }

        let mut hidden = vec![0.0; n * d];
        let mut probs = Vec::with_capacity(n);
        for i in 0..n {
            let h = &mut hidden[i * d..(i + 1) * d];
            h.copy_from_slice(&self.b1);
            for k in 0..c {
                let zk = z[i * c + k];
                let wrow = &self.w1[k * d..(k + 1) * d];
                h.iter_mut().zip(wrow).for_each(|(hj, w)| *hj += zk * w);
            }
            h.iter_mut().for_each(|v| *v = v.max(0.0));
            let logit = self.b2 + h.iter().zip(&self.w2).map(|(a, b)| a * b).sum::<f64>();
            probs.push(sigmoid(logit));
        }

        let cache = ForwardCache {
            generation: self.generation,
            mode,
            n,
            batch_mean: mean,
            batch_var: var,
            xhat,
            z,
            hidden,
            probs: probs.clone(),
        };
        Ok((probs, cache))
    }

    /// Probabilities in inference mode.
    pub fn predict(&self, batch: &FeatureBatch) -> Result<Vec<f64>> {
        // Infer mode draws nothing from the generator.
        let mut unused = ChaCha8Rng::seed_from_u64(0);
        self.forward(batch, Mode::Infer, &mut unused).map(|(p, _)| p)
    }

    /// Folds a train-mode batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, cache: &ForwardCache) -> Result<()> {
        if cache.mode != Mode::Train {
            return Err(Error::Contract("running stats need a train-mode cache".into()));
        }
        let m = self.bn_momentum;
        for k in 0..self.c {
            self.bn_running_mean[k] = m * self.bn_running_mean[k] + (1.0 - m) * cache.batch_mean[k];
            self.bn_running_var[k] = m * self.bn_running_var[k] + (1.0 - m) * cache.batch_var[k];
        }
        Ok(())
    }

    /// Gradients of mean BCE with respect to every trainable tensor.
    pub fn backward(&self, cache: &ForwardCache, labels: &[Label]) -> Result<Gradients> {
        if cache.mode != Mode::Train {
            return Err(Error::Contract("backward needs a train-mode forward cache".into()));
        }
        if cache.generation != self.generation {
            return Err(Error::Contract(
                "forward cache is stale: parameters changed since the forward pass".into(),
            ));
        }
        if labels.len() != cache.n {
            return Err(domain(format!("{} labels for a batch of {}", labels.len(), cache.n)));
        }
        let (n, c, d) = (cache.n, self.c, self.d_hidden);
        let mut g = Gradients::zeros(c, d);

        for i in 0..n {
            let p = cache.probs[i];
            let y = labels[i].bit() as f64;
            // clamped region of the loss is flat
            let dlogit = if (PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&p) {
                (p - y) / n as f64
            } else {
                0.0
            };
            if dlogit == 0.0 {
                continue;
            }
            let h = &cache.hidden[i * d..(i + 1) * d];
            g.b2 += dlogit;
            let mut dpre = vec![0.0; d];
            for j in 0..d {
                g.w2[j] += dlogit * h[j];
                if h[j] > 0.0 {
                    dpre[j] = dlogit * self.w2[j];
                }
            }
            for j in 0..d {
                g.b1[j] += dpre[j];
            }
            for k in 0..c {
                let zk = cache.z[i * c + k];
                let wrow = &self.w1[k * d..(k + 1) * d];
                let grow = &mut g.w1[k * d..(k + 1) * d];
                let mut dz = 0.0;
                for j in 0..d {
                    grow[j] += zk * dpre[j];
                    dz += dpre[j] * wrow[j];
                }
                g.bn_gamma[k] += dz * cache.xhat[i * c + k];
                g.bn_beta[k] += dz;
            }
        }
        Ok(g)
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    generation: u64,
    mode: Mode,
    n: usize,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    xhat: Vec<f64>,
    z: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

impl ForwardCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Batch-norm output before the dense layers, `n x c`.
    pub fn normalized(&self) -> &[f64] {
        &self.z
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub bn_gamma: Vec<f64>,
    pub bn_beta: Vec<f64>,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: f64,
}

impl Gradients {
    fn zeros(c: usize, d: usize) -> Self {
        Self {
            bn_gamma: vec![0.0; c],
            bn_beta: vec![0.0; c],
            w1: vec![0.0; c * d],
            b1: vec![0.0; d],
            w2: vec![0.0; d],
            b2: 0.0,
        }
    }

    /// Tensors in [`PARAM_NAMES`] order.
    pub fn groups(&self) -> [&[f64]; 6] {
        [
            &self.bn_gamma,
            &self.bn_beta,
            &self.w1,
            &self.b1,
            &self.w2,
            std::slice::from_ref(&self.b2),
        ]
    }

    pub fn norm(&self) -> f64 {
        self.groups()
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}
