//! One linear SVM per (HMM state, band), plus a pooled per-band fallback.

use std::path::Path;

use ndarray::Array2;
use rayon::prelude::*;

use super::features::Standardizer;
use super::svm::{train_svm, LinearSvm, SvmData, SvmTrainConfig};
use crate::error::{Error, Result};
use crate::frontend::DeltaConfig;
use crate::mask::{BinaryMask, DeltaRule};
use crate::mdt_hmm::model::{Reader, Writer};
use crate::mdt_hmm::StateMaskSource;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub enum Slot {
    Trained(LinearSvm),
    Constant(bool),
    /// Defer to the pooled model of the band.
    Fallback,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorBank {
    pub n_states: usize,
    pub n_bands: usize,
    pub standardizer: Standardizer,
    /// Per band; never `Fallback`.
    pub pooled: Vec<Slot>,
    /// Row-major `s * n_bands + k`.
    pub slots: Vec<Slot>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct BankStats {
    pub trained: usize,
    pub constant: usize,
    pub fallback: usize,
}

impl BankStats {
    pub fn total(&self) -> usize {
        self.trained + self.constant + self.fallback
    }
}

fn decide(slot: &Slot, x: &[f64]) -> Option<bool> {
    match slot {
        Slot::Trained(m) => Some(m.predict(x)),
        Slot::Constant(v) => Some(*v),
        Slot::Fallback => None,
    }
}

impl EstimatorBank {
    pub fn feature_dim(&self) -> usize {
        self.standardizer.dim()
    }

    pub fn slot(&self, s: usize, k: usize) -> &Slot {
        &self.slots[s * self.n_bands + k]
    }

    pub fn stats(&self) -> BankStats {
        let mut st = BankStats::default();
        for s in &self.slots {
            match s {
                Slot::Trained(_) => st.trained += 1,
                Slot::Constant(_) => st.constant += 1,
                Slot::Fallback => st.fallback += 1,
            }
        }
        st
    }

    /// Reliability of band `k` for a standardised frame under state `s`.
    pub fn predict(&self, s: usize, k: usize, x: &[f64]) -> bool {
        decide(self.slot(s, k), x).unwrap_or_else(|| self.predict_pooled(k, x))
    }

    pub fn predict_pooled(&self, k: usize, x: &[f64]) -> bool {
        decide(&self.pooled[k], x).expect("pooled slot is never a fallback")
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots.len() != self.n_states * self.n_bands || self.pooled.len() != self.n_bands {
            return Err(Error::Format("bank slot count does not match its dimensions".into()));
        }
        if self.standardizer.scale.len() != self.feature_dim() {
            return Err(Error::Format("standardiser vectors differ in length".into()));
        }
        let dim = self.feature_dim();
        for s in self.pooled.iter().chain(&self.slots) {
            if let Slot::Trained(m) = s {
                if m.w.len() != dim {
                    return Err(Error::Format(format!("model width {} vs feature dim {dim}", m.w.len())));
                }
                if !m.b.is_finite() || m.w.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("svm parameters".into()));
                }
            }
        }
        if self.pooled.iter().any(|s| matches!(s, Slot::Fallback)) {
            return Err(Error::Format("pooled slot refers to a fallback".into()));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(BANK_MAGIC);
        w.u32(self.n_states);
        w.u32(self.n_bands);
        w.u32(self.feature_dim());
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.scale);
        for s in self.pooled.iter().chain(&self.slots) {
            match s {
                Slot::Trained(m) => {
                    w.u8(0);
                    w.f64s(&m.w);
                    w.f64(m.b);
                    w.u32(m.n_samples);
                    w.f64(m.positive_fraction);
                }
                Slot::Constant(v) => {
                    w.u8(1);
                    w.u8(*v as u8);
                }
                Slot::Fallback => w.u8(2),
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != BANK_MAGIC {
            return Err(Error::Format("missing SVMB header".into()));
        }
        let n_states = r.u32()?;
        let n_bands = r.u32()?;
        let dim = r.u32()?;
        let standardizer = Standardizer {
            mean: r.f64s(dim)?,
            scale: r.f64s(dim)?,
        };
        let read_slot = |r: &mut Reader| -> Result<Slot> {
            Ok(match r.u8()? {
                0 => Slot::Trained(LinearSvm {
                    w: r.f64s(dim)?,
                    b: r.f64()?,
                    n_samples: r.u32()?,
                    positive_fraction: r.f64()?,
                }),
                1 => match r.u8()? {
                    0 => Slot::Constant(false),
                    1 => Slot::Constant(true),
                    v => return Err(Error::Format(format!("bad constant label {v}"))),
                },
                2 => Slot::Fallback,
                t => return Err(Error::Format(format!("bad slot tag {t}"))),
            })
        };
        let pooled = (0..n_bands).map(|_| read_slot(&mut r)).collect::<Result<Vec<_>>>()?;
        let slots = (0..n_states * n_bands)
            .map(|_| read_slot(&mut r))
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        let bank = Self {
            n_states,
            n_bands,
            standardizer,
            pooled,
            slots,
        };
        bank.validate()?;
        Ok(bank)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

const BANK_MAGIC: &[u8; 4] = b"SVMB";

/// One training utterance: standardised features, classical oracle labels
/// for the static bands, and the forced state alignment.
#[derive(Debug, Clone)]
pub struct BankTrainItem {
    pub features: Array2<f64>,
    pub labels: Array2<bool>,
    pub alignment: Vec<usize>,
}

fn fit_slot(data: &SvmData, cfg: &SvmTrainConfig, seed: u64, allow_fallback: bool) -> Result<Slot> {
    let n = data.len();
    if n < cfg.min_samples_per_model && allow_fallback {
        return Ok(Slot::Fallback);
    }
    let pos = data.positives();
    if n == 0 {
        return Ok(Slot::Constant(true));
    }
    if pos < cfg.min_per_class || n - pos < cfg.min_per_class {
        return Ok(Slot::Constant(2 * pos >= n));
    }
    let cfg = SvmTrainConfig { seed, ..cfg.clone() };
    Ok(Slot::Trained(train_svm(data, &cfg)?.model))
}

/// Buckets frames by aligned state and fits every (state, band) slot.
/// Slots are trained in parallel with positionally derived seeds, so the
/// result does not depend on scheduling.
pub fn train_estimator_bank(
    items: &[BankTrainItem],
    standardizer: Standardizer,
    n_states: usize,
    cfg: &SvmTrainConfig,
) -> Result<(EstimatorBank, BankStats)> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::EmptyInput("no estimator training utterances".into()));
    }
    let n_bands = items[0].labels.ncols();
    let dim = standardizer.dim();
    let mut buckets: Vec<Vec<(usize, usize)>> = vec![Vec::new(); n_states];
    let mut all = Vec::new();
    for (u, it) in items.iter().enumerate() {
        let t_count = it.features.nrows();
        if it.features.ncols() != dim || it.labels.ncols() != n_bands {
            return Err(Error::ShapeMismatch(format!("training utterance {u} has inconsistent widths")));
        }
        if it.labels.nrows() != t_count || it.alignment.len() != t_count {
            return Err(Error::ShapeMismatch(format!(
                "training utterance {u}: {} feature frames, {} label frames, {} aligned frames",
                t_count,
                it.labels.nrows(),
                it.alignment.len()
            )));
        }
        if !it.features.is_standard_layout() {
            return Err(Error::ShapeMismatch("features must be row-major".into()));
        }
        for (t, &s) in it.alignment.iter().enumerate() {
            if s >= n_states {
                return Err(Error::StateOutOfRange(s, n_states));
            }
            buckets[s].push((u, t));
            all.push((u, t));
        }
    }
    let row = |&(u, t): &(usize, usize)| items[u].features.row(t).to_slice().unwrap();
    let label = |&(u, t): &(usize, usize), k: usize| items[u].labels[[t, k]];

    let stride = all.len().div_ceil(cfg.pooled_max_samples).max(1);
    let pooled_frames: Vec<(usize, usize)> = all.iter().step_by(stride).copied().collect();
    let pooled = (0..n_bands)
        .into_par_iter()
        .map(|k| {
            let data = SvmData {
                x: pooled_frames.iter().map(row).collect(),
                y: pooled_frames.iter().map(|f| label(f, k)).collect(),
            };
            fit_slot(&data, cfg, seed::derive(cfg.seed, &[u64::MAX, k as u64]), false)
        })
        .collect::<Result<Vec<_>>>()?;

    let slots = (0..n_states * n_bands)
        .into_par_iter()
        .map(|i| {
            let (s, k) = (i / n_bands, i % n_bands);
            let data = SvmData {
                x: buckets[s].iter().map(row).collect(),
                y: buckets[s].iter().map(|f| label(f, k)).collect(),
            };
            fit_slot(&data, cfg, seed::derive(cfg.seed, &[s as u64, k as u64]), true)
        })
        .collect::<Result<Vec<_>>>()?;

    let bank = EstimatorBank {
        n_states,
        n_bands,
        standardizer,
        pooled,
        slots,
    };
    bank.validate()?;
    let stats = bank.stats();
    Ok((bank, stats))
}

fn check_features(bank: &EstimatorBank, std_features: &Array2<f64>) -> Result<()> {
    if std_features.ncols() != bank.feature_dim() {
        return Err(Error::ShapeMismatch(format!(
            "feature width {} vs bank {}",
            std_features.ncols(),
            bank.feature_dim()
        )));
    }
    Ok(())
}

/// Mask whose row `t` comes from the estimators of `alignment[t]`, applied
/// to standardised features; the delta companion follows `rule`.
pub fn predict_mask_state_dependent(
    bank: &EstimatorBank,
    std_features: &Array2<f64>,
    alignment: &[usize],
    delta: &DeltaConfig,
    rule: DeltaRule,
) -> Result<BinaryMask> {
    check_features(bank, std_features)?;
    if alignment.len() != std_features.nrows() {
        return Err(Error::LengthMismatch(alignment.len(), std_features.nrows()));
    }
    if let Some(&s) = alignment.iter().find(|&&s| s >= bank.n_states) {
        return Err(Error::StateOutOfRange(s, bank.n_states));
    }
    let feats = std_features.as_standard_layout();
    let values = Array2::from_shape_fn((alignment.len(), bank.n_bands), |(t, k)| {
        bank.predict(alignment[t], k, feats.row(t).to_slice().unwrap())
    });
    BinaryMask::new(values).with_delta(delta, rule)
}

/// State-independent mask from the pooled models alone.
pub fn predict_mask_pooled(
    bank: &EstimatorBank,
    std_features: &Array2<f64>,
    delta: &DeltaConfig,
    rule: DeltaRule,
) -> Result<BinaryMask> {
    check_features(bank, std_features)?;
    let feats = std_features.as_standard_layout();
    let values = Array2::from_shape_fn((feats.nrows(), bank.n_bands), |(t, k)| {
        bank.predict_pooled(k, feats.row(t).to_slice().unwrap())
    });
    BinaryMask::new(values).with_delta(delta, rule)
}

/// Per-state masks for state-conditioned decoding.
pub struct BankMaskSource<'a> {
    pub bank: &'a EstimatorBank,
    pub std_features: Array2<f64>,
    pub delta: DeltaConfig,
    pub rule: DeltaRule,
}

impl StateMaskSource for BankMaskSource<'_> {
    fn frames(&self) -> usize {
        self.std_features.nrows()
    }

    fn state_mask(&self, state: usize) -> Result<BinaryMask> {
        let align = vec![state; self.frames()];
        predict_mask_state_dependent(self.bank, &self.std_features, &align, &self.delta, self.rule)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn constant_bank(n_states: usize, n_bands: usize, dim: usize, v: impl Fn(usize, usize) -> bool) -> EstimatorBank {
        EstimatorBank {
            n_states,
            n_bands,
            standardizer: Standardizer {
                mean: vec![0.0; dim],
                scale: vec![1.0; dim],
            },
            pooled: vec![Slot::Constant(false); n_bands],
            slots: (0..n_states * n_bands)
                .map(|i| Slot::Constant(v(i / n_bands, i % n_bands)))
                .collect(),
        }
    }

    #[test]
    fn all_reliable_constants_give_all_reliable_mask() {
        let bank = constant_bank(3, 4, 5, |_, _| true);
        let f = Array2::zeros((6, 5));
        let m = predict_mask_state_dependent(&bank, &f, &[0, 1, 2, 2, 1, 0], &DeltaConfig::default(), DeltaRule::And)
            .unwrap();
        assert_eq!(m, BinaryMask::all_reliable(6, 4));
    }

    #[test]
    fn opposite_constants_by_state() {
        let bank = constant_bank(2, 3, 2, |s, k| !(s == 1 && k == 2));
        let f = Array2::zeros((2, 2));
        let m = predict_mask_state_dependent(&bank, &f, &[0, 1], &DeltaConfig::default(), DeltaRule::And).unwrap();
        assert_eq!(m.values.column(2).to_vec(), vec![true, false]);
        assert!(predict_mask_state_dependent(&bank, &f, &[0], &DeltaConfig::default(), DeltaRule::And).is_err());
        assert!(matches!(
            predict_mask_state_dependent(&bank, &f, &[0, 2], &DeltaConfig::default(), DeltaRule::And),
            Err(Error::StateOutOfRange(2, 2))
        ));
    }

    fn toy_items() -> Vec<BankTrainItem> {
        // state 0: band 0 reliable iff feature 0 > 0; state 1: always
        // reliable; state 2: only 5 frames
        let mut items = Vec::new();
        for u in 0..4 {
            let t_count = 30;
            let features = Array2::from_shape_fn((t_count, 2), |(t, j)| {
                let a = (((t * 7 + u * 3) % 13) as f64 - 6.0) / 3.0;
                if j == 0 {
                    a
                } else {
                    ((t + u) % 5) as f64 - 2.0
                }
            });
            let alignment: Vec<usize> = (0..t_count).map(|t| if t < 14 { 0 } else if t < 29 { 1 } else { 2 }).collect();
            let labels = Array2::from_shape_fn((t_count, 1), |(t, _)| alignment[t] == 1 || features[[t, 0]] > 0.0);
            items.push(BankTrainItem {
                features,
                labels,
                alignment,
            });
        }
        items
    }

    #[test]
    fn slot_kinds_and_roundtrip() {
        let items = toy_items();
        let st = Standardizer {
            mean: vec![0.0; 2],
            scale: vec![1.0; 2],
        };
        let cfg = SvmTrainConfig {
            epochs: 20,
            ..Default::default()
        };
        let (bank, stats) = train_estimator_bank(&items, st.clone(), 3, &cfg).unwrap();
        assert!(matches!(bank.slot(0, 0), Slot::Trained(_)));
        assert_eq!(bank.slot(1, 0), &Slot::Constant(true));
        assert_eq!(bank.slot(2, 0), &Slot::Fallback);
        assert_eq!(stats, BankStats { trained: 1, constant: 1, fallback: 1 });
        assert_eq!(EstimatorBank::from_bytes(&bank.to_bytes()).unwrap(), bank);
        let (again, _) = train_estimator_bank(&items, st, 3, &cfg).unwrap();
        assert_eq!(again.to_bytes(), bank.to_bytes());
        assert!(bank.predict(0, 0, &[1.5, 0.0]));
        assert!(!bank.predict(0, 0, &[-1.5, 0.0]));
    }

    #[test]
    fn corrupt_bank_rejected() {
        let bank = constant_bank(2, 2, 3, |_, _| true);
        let mut b = bank.to_bytes();
        assert!(EstimatorBank::from_bytes(&b[..b.len() - 1]).is_err());
        b.push(0);
        assert!(EstimatorBank::from_bytes(&b).is_err());
        assert!(EstimatorBank::from_bytes(b"XXXX").is_err());
    }
}
