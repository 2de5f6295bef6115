//! Linear soft-margin SVM trained by stochastic subgradient descent on the
//! primal `λ/2‖w‖² + mean(max(0, 1 − y(w·x + b)))`.

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct SvmTrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// Initial step size; decays as `eta0 / (1 + eta0·λ·t)`.
    pub eta0: f64,
    pub seed: u64,
    pub min_samples_per_model: usize,
    pub min_per_class: usize,
    /// Cap on the pooled per-band fallback training set (strided subsample).
    pub pooled_max_samples: usize,
}

impl Default for SvmTrainConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-2,
            epochs: 10,
            eta0: 0.05,
            seed: 11,
            min_samples_per_model: 20,
            min_per_class: 2,
            pooled_max_samples: 20_000,
        }
    }
}

impl SvmTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidConfig(format!("svm lambda must be > 0, got {}", self.lambda)));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("svm epochs must be >= 1".into()));
        }
        if !(self.eta0 > 0.0 && self.eta0.is_finite()) {
            return Err(Error::InvalidConfig(format!("svm eta0 must be > 0, got {}", self.eta0)));
        }
        if self.min_samples_per_model == 0 || self.min_per_class == 0 {
            return Err(Error::InvalidConfig("svm minimum sample counts must be >= 1".into()));
        }
        if self.pooled_max_samples < self.min_samples_per_model {
            return Err(Error::InvalidConfig("pooled_max_samples below min_samples_per_model".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearSvm {
    pub w: Vec<f64>,
    pub b: f64,
    pub n_samples: usize,
    pub positive_fraction: f64,
}

impl LinearSvm {
    pub fn decision(&self, x: &[f64]) -> f64 {
        self.w.iter().zip(x).map(|(w, &v)| w * v).sum::<f64>() + self.b
    }

    /// Positive decision (ties included) means reliable.
    pub fn predict(&self, x: &[f64]) -> bool {
        self.decision(x) >= 0.0
    }
}

/// Training rows: `x[i]` with label `y[i]` (true = reliable).
pub struct SvmData<'a> {
    pub x: Vec<&'a [f64]>,
    pub y: Vec<bool>,
}

impl<'a> SvmData<'a> {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.y.iter().filter(|&&v| v).count()
    }
}

pub fn objective(m: &LinearSvm, data: &SvmData, lambda: f64) -> f64 {
    let reg = 0.5 * lambda * m.w.iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = data
        .x
        .iter()
        .zip(&data.y)
        .map(|(x, &y)| {
            let s = if y { 1.0 } else { -1.0 };
            (1.0 - s * m.decision(x)).max(0.0)
        })
        .sum();
    reg + hinge / data.len() as f64
}

pub fn training_accuracy(m: &LinearSvm, data: &SvmData) -> f64 {
    let ok = data.x.iter().zip(&data.y).filter(|(x, &y)| m.predict(x) == y).count();
    ok as f64 / data.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmFit {
    pub model: LinearSvm,
    /// Objective of the returned iterate after each epoch; nonincreasing.
    pub objective_history: Vec<f64>,
}

/// Shuffled-epoch subgradient descent. The best iterate seen at an epoch
/// boundary is kept, so the reported objective never increases.
pub fn train_svm(data: &SvmData, cfg: &SvmTrainConfig) -> Result<SvmFit> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("no svm training samples".into()));
    }
    if data.x.len() != data.y.len() {
        return Err(Error::LengthMismatch(data.x.len(), data.y.len()));
    }
    let pos = data.positives();
    if pos == 0 || pos == data.len() {
        return Err(Error::SingleClass);
    }
    let dim = data.x[0].len();
    if data.x.iter().any(|x| x.len() != dim) {
        return Err(Error::ShapeMismatch("svm rows differ in width".into()));
    }
    if data.x.iter().any(|x| x.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite("svm training features".into()));
    }

    let lambda = cfg.lambda;
    let mut rng = seed::rng(cfg.seed, &[]);
    let mut order: Vec<usize> = (0..data.len()).collect();
    // w is kept as scale·v so the shrink step is O(1)
    let mut v = vec![0.0f64; dim];
    let mut scale = 1.0f64;
    let mut b = 0.0f64;
    let mut t = 0u64;

    let n_samples = data.len();
    let positive_fraction = pos as f64 / n_samples as f64;
    let mut best = LinearSvm {
        w: vec![0.0; dim],
        b: 0.0,
        n_samples,
        positive_fraction,
    };
    let mut best_obj = objective(&best, data, lambda);
    let mut history = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = cfg.eta0 / (1.0 + cfg.eta0 * lambda * t as f64);
            t += 1;
            let x = data.x[i];
            let y = if data.y[i] { 1.0 } else { -1.0 };
            let dot: f64 = v.iter().zip(x).map(|(a, &c)| a * c).sum::<f64>() * scale + b;
            scale *= 1.0 - eta * lambda;
            if y * dot < 1.0 {
                let step = eta * y / scale;
                for (a, &c) in v.iter_mut().zip(x) {
                    *a += step * c;
                }
                b += eta * y;
            }
            if scale < 1e-9 {
                v.iter_mut().for_each(|a| *a *= scale);
                scale = 1.0;
            }
        }
        let cur = LinearSvm {
            w: v.iter().map(|a| a * scale).collect(),
            b,
            n_samples,
            positive_fraction,
        };
        let obj = objective(&cur, data, lambda);
        if obj < best_obj {
            best_obj = obj;
            best = cur;
        }
        history.push(best_obj);
    }
    Ok(SvmFit {
        model: best,
        objective_history: history,
    })
}
