//! Frame-level features for mask estimation.
//!
//! Per frame and band: subband energy over noise floor (dB), temporal
//! flatness, harmonic and random log-mel components, and the noisy static
//! and delta log-mel vectors. 6K values per frame in that order.

use ndarray::{s, Array2};

use crate::error::{Error, Result};
use crate::frontend::{delta_coefficients, to_log, DeltaConfig, Domain, Frontend, SpectroTemporal, Waveform};

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureConfig {
    pub floor_window: usize,
    pub floor_bias: f64,
    pub flatness_half_width: usize,
    pub snr_clamp_db: (f64, f64),
    pub harmonic: HarmonicConfig,
    pub delta: DeltaConfig,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            floor_window: 40,
            floor_bias: 1.5,
            flatness_half_width: 5,
            snr_clamp_db: (-30.0, 60.0),
            harmonic: HarmonicConfig::default(),
            delta: DeltaConfig::default(),
        }
    }
}

/// Minimum-statistics floor: per band, the smallest mean energy over any
/// window of `window` consecutive frames, times `bias`. Utterances shorter
/// than the window use the whole-utterance mean.
pub fn noise_floor_estimate(noisy: &SpectroTemporal, window: usize, bias: f64) -> Result<Vec<f64>> {
    noisy.expect_domain(Domain::LinearPower)?;
    let (t_count, k_count) = noisy.shape();
    if t_count == 0 || k_count == 0 {
        return Err(Error::EmptyInput("noise floor of an empty matrix".into()));
    }
    if window == 0 {
        return Err(Error::InvalidConfig("noise floor window must be >= 1".into()));
    }
    let w = window.min(t_count);
    let mut floor = vec![0.0; k_count];
    for (k, f) in floor.iter_mut().enumerate() {
        let col = noisy.values.column(k);
        let mut sum: f64 = col.iter().take(w).sum();
        let mut best = sum;
        for t in w..t_count {
            sum += col[t] - col[t - w];
            best = best.min(sum);
        }
        *f = bias * best / w as f64;
    }
    Ok(floor)
}

/// `10·log10(noisy/floor)`, clamped.
pub fn subband_snr_feature(noisy: &SpectroTemporal, floor: &[f64], clamp_db: (f64, f64)) -> Result<Array2<f64>> {
    noisy.expect_domain(Domain::LinearPower)?;
    if floor.len() != noisy.bands() {
        return Err(Error::ShapeMismatch(format!(
            "{} floor values for {} bands",
            floor.len(),
            noisy.bands()
        )));
    }
    if let Some(k) = floor.iter().position(|&f| !(f > 0.0)) {
        return Err(Error::InvalidConfig(format!("nonpositive noise floor in band {k}")));
    }
    Ok(Array2::from_shape_fn(noisy.shape(), |(t, k)| {
        (10.0 * (noisy.values[[t, k]] / floor[k]).log10()).clamp(clamp_db.0, clamp_db.1)
    }))
}

/// Geometric over arithmetic mean of each band over a ±H frame window,
/// with edge replication. Values lie in (0, 1].
pub fn flatness_feature(noisy: &SpectroTemporal, half_width: usize, energy_floor: f64) -> Result<Array2<f64>> {
    noisy.expect_domain(Domain::LinearPower)?;
    if half_width == 0 {
        return Err(Error::InvalidConfig("flatness window must be >= 1".into()));
    }
    let (t_count, k_count) = noisy.shape();
    let last = t_count as isize - 1;
    let h = half_width as isize;
    let n = (2 * h + 1) as f64;
    let mut out = Array2::zeros((t_count, k_count));
    for t in 0..t_count as isize {
        for k in 0..k_count {
            let mut log_sum = 0.0;
            let mut sum = 0.0;
            for u in t - h..=t + h {
                let v = noisy.values[[u.clamp(0, last) as usize, k]].max(energy_floor);
                log_sum += v.ln();
                sum += v;
            }
            let ratio = (log_sum / n).exp() / (sum / n);
            out[[t as usize, k]] = ratio.min(1.0);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicConfig {
    pub f0_min: f64,
    pub f0_max: f64,
    /// Normalised autocorrelation peak below which a frame is unvoiced.
    pub voicing_threshold: f64,
    /// Bins on each side of a harmonic assigned to the harmonic part.
    pub half_width_bins: usize,
}

impl Default for HarmonicConfig {
    fn default() -> Self {
        Self {
            f0_min: 60.0,
            f0_max: 400.0,
            voicing_threshold: 0.3,
            half_width_bins: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HarmonicSplit {
    pub harmonic: SpectroTemporal,
    pub random: SpectroTemporal,
    /// Per-frame f0 estimate; `None` for unvoiced frames.
    pub f0: Vec<Option<f64>>,
}

/// Normalised cross-correlation pitch estimate on `x`.
fn estimate_f0(x: &[f64], sr: f64, cfg: &HarmonicConfig) -> Option<f64> {
    let min_lag = (sr / cfg.f0_max).floor().max(1.0) as usize;
    let max_lag = ((sr / cfg.f0_min).ceil() as usize).min(x.len().saturating_sub(1));
    if min_lag >= max_lag {
        return None;
    }
    let energy: f64 = x.iter().map(|v| v * v).sum();
    if energy <= 0.0 {
        return None;
    }
    let ncc: Vec<f64> = (min_lag..=max_lag)
        .map(|lag| {
            let (a, b) = (&x[..x.len() - lag], &x[lag..]);
            let num: f64 = a.iter().zip(b).map(|(p, q)| p * q).sum();
            let ea: f64 = a.iter().map(|v| v * v).sum();
            let eb: f64 = b.iter().map(|v| v * v).sum();
            if ea > 0.0 && eb > 0.0 {
                num / (ea * eb).sqrt()
            } else {
                0.0
            }
        })
        .collect();
    let peak = ncc.iter().cloned().fold(f64::MIN, f64::max);
    if peak < cfg.voicing_threshold {
        return None;
    }
    // earliest local maximum close to the global peak (guards against
    // picking a multiple of the period)
    let idx = (0..ncc.len())
        .find(|&i| {
            ncc[i] >= 0.9 * peak
                && (i == 0 || ncc[i] >= ncc[i - 1])
                && (i + 1 == ncc.len() || ncc[i] >= ncc[i + 1])
        })
        .unwrap_or(0);
    let mut lag = (idx + min_lag) as f64;
    if idx > 0 && idx + 1 < ncc.len() {
        let (l, c, r) = (ncc[idx - 1], ncc[idx], ncc[idx + 1]);
        let denom = l - 2.0 * c + r;
        if denom < 0.0 {
            lag += 0.5 * (l - r) / denom;
        }
    }
    Some(sr / lag)
}

/// Splits each frame's power spectrum into bins near multiples of the frame's
/// f0 (harmonic) and the rest (random); both go through the mel filterbank.
pub fn harmonic_decomposition(noisy: &Waveform, frontend: &Frontend, cfg: &HarmonicConfig) -> Result<HarmonicSplit> {
    let fc = frontend.config();
    let power = frontend.power_spectra(noisy)?;
    let (t_count, n_bins) = power.dim();
    let sr = fc.sample_rate as f64;
    // two periods of the lowest pitch, centred on the analysis frame
    let span = ((2.0 * sr / cfg.f0_min).ceil() as usize).max(fc.frame_len);
    let bin_hz = fc.bin_hz();
    let nyquist = sr / 2.0;

    let mut harm_pow = Array2::<f64>::zeros((t_count, n_bins));
    let mut rand_pow = Array2::<f64>::zeros((t_count, n_bins));
    let mut f0s = Vec::with_capacity(t_count);
    let mut seg = vec![0.0; span];
    for t in 0..t_count {
        let centre = (t * fc.frame_shift + fc.frame_len / 2) as isize;
        let start = centre - (span / 2) as isize;
        for (i, v) in seg.iter_mut().enumerate() {
            let n = start + i as isize;
            *v = if n >= 0 && (n as usize) < noisy.len() {
                noisy.samples[n as usize] as f64
            } else {
                0.0
            };
        }
        let f0 = estimate_f0(&seg, sr, cfg);
        f0s.push(f0);
        let mut is_harm = vec![false; n_bins];
        if let Some(f0) = f0 {
            let mut h = 1.0;
            while h * f0 <= nyquist {
                let c = (h * f0 / bin_hz).round() as isize;
                let w = cfg.half_width_bins as isize;
                for b in (c - w).max(0)..=(c + w).min(n_bins as isize - 1) {
                    is_harm[b as usize] = true;
                }
                h += 1.0;
            }
        }
        for b in 0..n_bins {
            let p = power[[t, b]];
            if is_harm[b] {
                harm_pow[[t, b]] = p;
            } else {
                rand_pow[[t, b]] = p;
            }
        }
    }
    let lin = |m: Array2<f64>| SpectroTemporal::new(frontend.mel_from_power(&m), Domain::LinearPower);
    Ok(HarmonicSplit {
        harmonic: to_log(&lin(harm_pow)),
        random: to_log(&lin(rand_pow)),
        f0: f0s,
    })
}

pub const FEATURE_GROUPS: usize = 6;

/// Raw (unstandardised) T × 6K feature matrix for one noisy utterance.
pub fn build_feature_matrix(noisy: &Waveform, frontend: &Frontend, cfg: &FeatureConfig) -> Result<Array2<f64>> {
    let lin = frontend.linear_mel(noisy)?;
    let log = to_log(&lin);
    let delta = delta_coefficients(&log, &cfg.delta)?;
    let floor = noise_floor_estimate(&lin, cfg.floor_window, cfg.floor_bias)?;
    let snr = subband_snr_feature(&lin, &floor, cfg.snr_clamp_db)?;
    let flat = flatness_feature(&lin, cfg.flatness_half_width, frontend.config().energy_floor)?;
    let hr = harmonic_decomposition(noisy, frontend, &cfg.harmonic)?;
    assemble(&[&snr, &flat, &hr.harmonic.values, &hr.random.values, &log.values, &delta.values])
}

/// Concatenates equally shaped T×K blocks column-wise.
pub fn assemble(blocks: &[&Array2<f64>]) -> Result<Array2<f64>> {
    let (t, k) = blocks[0].dim();
    if blocks.iter().any(|b| b.dim() != (t, k)) {
        return Err(Error::ShapeMismatch("feature blocks differ in shape".into()));
    }
    let mut out = Array2::zeros((t, k * blocks.len()));
    for (i, b) in blocks.iter().enumerate() {
        out.slice_mut(s![.., i * k..(i + 1) * k]).assign(b);
    }
    Ok(out)
}

/// Global per-dimension standardisation, fitted once on the training frames
/// and applied identically at training and prediction time.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit<'a>(rows: impl Iterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut n = 0usize;
        let mut s1: Vec<f64> = Vec::new();
        let mut mats: Vec<&Array2<f64>> = Vec::new();
        for m in rows {
            if s1.is_empty() {
                s1 = vec![0.0; m.ncols()];
            } else if m.ncols() != s1.len() {
                return Err(Error::ShapeMismatch("feature widths differ".into()));
            }
            for r in m.rows() {
                for (a, v) in s1.iter_mut().zip(r) {
                    *a += v;
                }
                n += 1;
            }
            mats.push(m);
        }
        if n == 0 {
            return Err(Error::EmptyInput("no frames to standardise".into()));
        }
        let mean: Vec<f64> = s1.iter().map(|s| s / n as f64).collect();
        // two-pass variance keeps the fitted statistics exact enough for
        // the mean/scale checks
        let mut s2 = vec![0.0; mean.len()];
        for m in &mats {
            for r in m.rows() {
                for ((a, v), mu) in s2.iter_mut().zip(r).zip(&mean) {
                    *a += (v - mu) * (v - mu);
                }
            }
        }
        let scale = s2
            .iter()
            .map(|s| {
                let sd = (s / n as f64).sqrt();
                if sd > 1e-12 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Self { mean, scale })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply_row(&self, raw: &[f64], out: &mut [f64]) {
        for (((o, x), m), s) in out.iter_mut().zip(raw).zip(&self.mean).zip(&self.scale) {
            *o = (x - m) / s;
        }
    }

    pub fn apply(&self, raw: &Array2<f64>) -> Result<Array2<f64>> {
        if raw.ncols() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "feature width {} vs standardiser {}",
                raw.ncols(),
                self.dim()
            )));
        }
        let mut out = Array2::<f64>::zeros(raw.dim());
        for (r, mut o) in raw.rows().into_iter().zip(out.rows_mut()) {
            let r = r.to_vec();
            self.apply_row(&r, o.as_slice_mut().unwrap());
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::FrontendConfig;
    use proptest::prelude::*;

    fn lin(v: Array2<f64>) -> SpectroTemporal {
        SpectroTemporal::new(v, Domain::LinearPower)
    }

    #[test]
    fn constant_energy_floor() {
        let m = lin(Array2::from_elem((60, 3), 2.0));
        assert_eq!(noise_floor_estimate(&m, 40, 1.5).unwrap(), vec![3.0; 3]);
        let short = lin(Array2::from_elem((10, 2), 2.0));
        assert_eq!(noise_floor_estimate(&short, 40, 1.5).unwrap(), vec![3.0; 2]);
        assert!(noise_floor_estimate(&lin(Array2::zeros((0, 2))), 40, 1.5).is_err());
    }

    #[test]
    fn floor_below_mean_times_bias() {
        let m = lin(Array2::from_shape_fn((80, 2), |(t, k)| 1.0 + ((t * 7 + k) % 11) as f64));
        let f = noise_floor_estimate(&m, 40, 1.0).unwrap();
        for k in 0..2 {
            let mean = m.values.column(k).mean().unwrap();
            assert!(f[k] <= mean + 1e-12);
        }
    }

    #[test]
    fn snr_feature_values() {
        let m = lin(ndarray::array![[1.0, 10.0, 1e-9]]);
        let f = subband_snr_feature(&m, &[1.0, 1.0, 1.0], (-30.0, 60.0)).unwrap();
        assert_eq!(f[[0, 0]], 0.0);
        assert!((f[[0, 1]] - 10.0).abs() < 1e-12);
        assert_eq!(f[[0, 2]], -30.0);
        assert!(subband_snr_feature(&m, &[1.0, 0.0, 1.0], (-30.0, 60.0)).is_err());
    }

    #[test]
    fn flatness_values() {
        let c = lin(Array2::from_elem((12, 2), 3.7));
        let f = flatness_feature(&c, 5, 1e-10).unwrap();
        assert!(f.iter().all(|&v| (v - 1.0).abs() < 1e-15));
        // a window of {1,1,1,1,100}: interior frame 2 with H = 2
        let v = lin(ndarray::Array2::from_shape_vec((5, 1), vec![1.0, 1.0, 1.0, 1.0, 100.0]).unwrap());
        let f = flatness_feature(&v, 2, 1e-10).unwrap();
        let expect = 100f64.powf(0.2) / 20.8;
        assert!((f[[2, 0]] - expect).abs() < 1e-12);
        assert!((expect - 0.1208).abs() < 1e-4);
    }

    proptest! {
        #[test]
        fn flatness_in_unit_interval(vals in proptest::collection::vec(0.0f64..1e3, 3..40), h in 1usize..6) {
            let n = vals.len();
            let m = lin(Array2::from_shape_vec((n, 1), vals).unwrap());
            let f = flatness_feature(&m, h, 1e-10).unwrap();
            for v in f.iter() {
                prop_assert!(*v > 0.0 && *v <= 1.0);
            }
        }
    }

    #[test]
    fn silence_has_floor_components() {
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let w = Waveform::new(vec![0.0; 4000], 8000);
        let hr = harmonic_decomposition(&w, &fe, &HarmonicConfig::default()).unwrap();
        let lf = 1e-10f64.ln();
        assert!(hr.harmonic.values.iter().all(|&v| v == lf));
        assert!(hr.random.values.iter().all(|&v| v == lf));
        assert!(hr.f0.iter().all(Option::is_none));
    }

    fn split_energy(hr: &HarmonicSplit, frames: impl Iterator<Item = usize>) -> (f64, f64) {
        let mut h = 0.0;
        let mut r = 0.0;
        for t in frames {
            h += hr.harmonic.values.row(t).iter().map(|v| v.exp()).sum::<f64>();
            r += hr.random.values.row(t).iter().map(|v| v.exp()).sum::<f64>();
        }
        (h, r)
    }

    #[test]
    fn pulse_train_is_harmonic() {
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let s: Vec<f32> = (0..8000).map(|i| if i % 80 == 0 { 0.5 } else { 0.0 }).collect();
        let hr = harmonic_decomposition(&Waveform::new(s, 8000), &fe, &HarmonicConfig::default()).unwrap();
        let voiced: Vec<usize> = (0..hr.f0.len()).filter(|&t| hr.f0[t].is_some()).collect();
        assert!(voiced.len() * 10 >= hr.f0.len() * 9);
        for &t in &voiced {
            assert!((hr.f0[t].unwrap() - 100.0).abs() < 2.0, "f0 {:?}", hr.f0[t]);
        }
        let (h, r) = split_energy(&hr, voiced.into_iter());
        assert!(h >= 0.9 * (h + r), "harmonic share {}", h / (h + r));
    }

    #[test]
    fn white_noise_is_random() {
        use rand::{Rng, SeedableRng};
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let s: Vec<f32> = (0..8000)
            .map(|_| 0.1 * rng.sample::<f64, _>(rand_distr::StandardNormal) as f32)
            .collect();
        let hr = harmonic_decomposition(&Waveform::new(s, 8000), &fe, &HarmonicConfig::default()).unwrap();
        let voiced = hr.f0.iter().filter(|f| f.is_some()).count();
        assert!(voiced * 2 < hr.f0.len(), "{voiced} of {} voiced", hr.f0.len());
        let (h, r) = split_energy(&hr, 0..hr.f0.len());
        assert!(r >= 0.9 * (h + r), "random share {}", r / (h + r));
    }

    #[test]
    fn components_partition_the_spectrum() {
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let s: Vec<f32> = (0..6000)
            .map(|i| {
                let t = i as f32 / 8000.0;
                0.3 * (2.0 * std::f32::consts::PI * 130.0 * t).sin() + 0.1 * ((i * 7919 % 101) as f32 / 50.0 - 1.0)
            })
            .collect();
        let w = Waveform::new(s, 8000);
        let hr = harmonic_decomposition(&w, &fe, &HarmonicConfig::default()).unwrap();
        let lin = fe.linear_mel(&w).unwrap();
        let fl = fe.config().energy_floor;
        for ((h, r), o) in hr.harmonic.values.iter().zip(hr.random.values.iter()).zip(lin.values.iter()) {
            let sum = h.exp() + r.exp();
            assert!(sum >= (o - 2.0 * fl) * (1.0 - 1e-6));
            assert!(sum <= o + 2.0 * fl + 1e-6 * o);
        }
    }

    #[test]
    fn feature_width_is_six_k() {
        let fe = Frontend::new(&FrontendConfig::default()).unwrap();
        let w = Waveform::new((0..4000).map(|i| (i as f32 * 0.05).sin() * 0.3).collect(), 8000);
        let f = build_feature_matrix(&w, &fe, &FeatureConfig::default()).unwrap();
        assert_eq!(f.ncols(), 138);
        assert!(f.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn standardizer_statistics() {
        let a = Array2::from_shape_fn((50, 3), |(t, k)| (t * (k + 1)) as f64 * 0.37 + k as f64);
        let b = Array2::from_shape_fn((30, 3), |(t, k)| ((t * 13 + k) % 7) as f64);
        let st = Standardizer::fit([&a, &b].into_iter()).unwrap();
        let za = st.apply(&a).unwrap();
        let zb = st.apply(&b).unwrap();
        for k in 0..3 {
            let vals: Vec<f64> = za.column(k).iter().chain(zb.column(k).iter()).copied().collect();
            let m = vals.iter().sum::<f64>() / vals.len() as f64;
            let sd = (vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64).sqrt();
            assert!(m.abs() < 1e-9);
            assert!((sd - 1.0).abs() < 1e-9);
        }
        let mut row = vec![0f64; 3];
        st.apply_row(&a.row(4).to_vec(), &mut row);
        assert_eq!(row.as_slice(), za.row(4).as_slice().unwrap());
    }
}
