//! Log-mel frontend.
//!
//! Waveform → pre-emphasis → Hamming-windowed frames → |DFT|² → triangular
//! mel filterbank → energy floor → (optional) natural log. Also provides
//! regression deltas and the `STFM` / raw-f32 file formats.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

/// Mono audio buffer. Samples are stored as `f32` so that everything written
/// to and read back from the raw audio format is bit-identical.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Self {
        Self {
            samples,
            sample_rate,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Mean squared amplitude.
    pub fn power(&self) -> f64 {
        if self.samples.is_empty() {
            return 0.0;
        }
        self.samples.iter().map(|&s| (s as f64) * (s as f64)).sum::<f64>() / self.len() as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 {
            return Err(Error::InvalidAudio("sample rate must be positive".into()));
        }
        if let Some(i) = self.samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidAudio(format!("non-finite sample at index {i}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub frame_shift: usize,
    pub preemphasis: f64,
    pub n_mel: usize,
    pub f_min: f64,
    pub f_max: f64,
    pub energy_floor: f64,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_len: 200,
            frame_shift: 80,
            preemphasis: 0.97,
            n_mel: 23,
            f_min: 64.0,
            f_max: 4000.0,
            energy_floor: 1e-10,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("frontend: {m}")));
        if self.sample_rate == 0 {
            return bad("sample_rate must be positive");
        }
        if self.frame_shift == 0 || self.frame_shift > self.frame_len {
            return bad("need 0 < frame_shift <= frame_len");
        }
        if !(0.0..1.0).contains(&self.preemphasis) {
            return bad("preemphasis must be in [0, 1)");
        }
        if self.n_mel == 0 {
            return bad("n_mel must be at least 1");
        }
        if !(self.f_min >= 0.0 && self.f_min < self.f_max) {
            return bad("need 0 <= f_min < f_max");
        }
        if self.f_max > self.sample_rate as f64 / 2.0 {
            return bad("f_max above Nyquist");
        }
        if !(self.energy_floor > 0.0 && self.energy_floor.is_finite()) {
            return bad("energy_floor must be positive");
        }
        Ok(())
    }

    /// DFT size: the frame is zero-padded to the next power of two.
    pub fn n_fft(&self) -> usize {
        self.frame_len.next_power_of_two()
    }

    pub fn n_bins(&self) -> usize {
        self.n_fft() / 2 + 1
    }

    pub fn bin_hz(&self) -> f64 {
        self.sample_rate as f64 / self.n_fft() as f64
    }

    /// Number of frames for a signal of `num_samples` samples (0 if shorter
    /// than one frame).
    pub fn frame_count(&self, num_samples: usize) -> usize {
        if num_samples < self.frame_len {
            0
        } else {
            (num_samples - self.frame_len) / self.frame_shift + 1
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    LinearPower,
    Log,
}

impl Domain {
    pub fn tag(self) -> u8 {
        match self {
            Domain::LinearPower => 0,
            Domain::Log => 1,
        }
    }

    pub fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            0 => Ok(Domain::LinearPower),
            1 => Ok(Domain::Log),
            t => Err(Error::Format(format!("unknown domain tag {t}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Domain::LinearPower => "linear_power",
            Domain::Log => "log",
        }
    }
}

/// Where a feature matrix came from. Not part of the on-disk format.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameGeometry {
    pub frame_len: usize,
    pub frame_shift: usize,
    pub sample_rate: u32,
}

/// T×K matrix of per-frame, per-band values.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectroTemporal {
    pub values: Array2<f64>,
    pub domain: Domain,
    pub geometry: Option<FrameGeometry>,
}

impl SpectroTemporal {
    pub fn new(values: Array2<f64>, domain: Domain) -> Self {
        Self {
            values,
            domain,
            geometry: None,
        }
    }

    pub fn frames(&self) -> usize {
        self.values.nrows()
    }

    pub fn bands(&self) -> usize {
        self.values.ncols()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn expect_domain(&self, domain: Domain) -> Result<()> {
        if self.domain != domain {
            return Err(Error::WrongDomain {
                expected: domain.name(),
                actual: self.domain.name(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeltaConfig {
    pub window_half_width: usize,
}

impl Default for DeltaConfig {
    fn default() -> Self {
        Self {
            window_half_width: 2,
        }
    }
}

impl DeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window_half_width == 0 {
            return Err(Error::InvalidConfig("delta window must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular filters with peaks linearly spaced on the mel scale.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    /// K × n_bins weights.
    pub weights: Array2<f64>,
    /// Peak frequency of every band, Hz.
    pub centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &FrontendConfig) -> Self {
        let n_bins = cfg.n_bins();
        let bin_hz = cfg.bin_hz();
        let lo = hz_to_mel(cfg.f_min);
        let hi = hz_to_mel(cfg.f_max);
        let edges: Vec<f64> = (0..cfg.n_mel + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mel + 1) as f64))
            .collect();

        let mut weights = Array2::<f64>::zeros((cfg.n_mel, n_bins));
        for k in 0..cfg.n_mel {
            let (left, center, right) = (edges[k], edges[k + 1], edges[k + 2]);
            for b in 0..n_bins {
                let f = b as f64 * bin_hz;
                let w = if f > left && f <= center {
                    (f - left) / (center - left)
                } else if f > center && f < right {
                    (right - f) / (right - center)
                } else {
                    0.0
                };
                weights[[k, b]] = w;
            }
            // A band narrower than one DFT bin still gets the nearest bin.
            if weights.row(k).iter().all(|&w| w == 0.0) {
                let nearest = ((center / bin_hz).round() as usize).min(n_bins - 1);
                weights[[k, nearest]] = 1.0;
            }
        }
        Self {
            weights,
            centers_hz: edges[1..=cfg.n_mel].to_vec(),
        }
    }

    pub fn bands(&self) -> usize {
        self.weights.nrows()
    }

    /// Band energies for one power spectrum.
    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        for (k, o) in out.iter_mut().enumerate() {
            *o = self
                .weights
                .row(k)
                .iter()
                .zip(power)
                .map(|(w, p)| w * p)
                .sum();
        }
    }
}

/// Reusable analysis state for one [`FrontendConfig`].
pub struct Frontend {
    cfg: FrontendConfig,
    filterbank: MelFilterbank,
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for Frontend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Frontend").field("cfg", &self.cfg).finish()
    }
}

impl Frontend {
    pub fn new(cfg: &FrontendConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.frame_len;
        let window = (0..n)
            .map(|i| {
                if n == 1 {
                    1.0
                } else {
                    0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos()
                }
            })
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(cfg.n_fft());
        Ok(Self {
            cfg: cfg.clone(),
            filterbank: MelFilterbank::new(cfg),
            window,
            fft,
        })
    }

    pub fn config(&self) -> &FrontendConfig {
        &self.cfg
    }

    pub fn filterbank(&self) -> &MelFilterbank {
        &self.filterbank
    }

    pub fn window(&self) -> &[f64] {
        &self.window
    }

    fn check_input(&self, wave: &Waveform) -> Result<()> {
        wave.validate()?;
        if wave.sample_rate != self.cfg.sample_rate {
            return Err(Error::InvalidAudio(format!(
                "sample rate {} does not match frontend rate {}",
                wave.sample_rate, self.cfg.sample_rate
            )));
        }
        if wave.len() < self.cfg.frame_len {
            return Err(Error::InputTooShort {
                samples: wave.len(),
                frame_len: self.cfg.frame_len,
            });
        }
        Ok(())
    }

    fn geometry(&self) -> FrameGeometry {
        FrameGeometry {
            frame_len: self.cfg.frame_len,
            frame_shift: self.cfg.frame_shift,
            sample_rate: self.cfg.sample_rate,
        }
    }

    /// Pre-emphasised signal, `y[0] = x[0]`, `y[n] = x[n] - a·x[n-1]`.
    pub fn preemphasize(&self, samples: &[f32]) -> Vec<f64> {
        let a = self.cfg.preemphasis;
        let mut prev = 0.0;
        samples
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let x = s as f64;
                let y = if i == 0 { x } else { x - a * prev };
                prev = x;
                y
            })
            .collect()
    }

    /// |DFT|² of every windowed frame, T × n_bins.
    pub fn power_spectra(&self, wave: &Waveform) -> Result<Array2<f64>> {
        self.check_input(wave)?;
        let emphasized = self.preemphasize(&wave.samples);
        let t_count = self.cfg.frame_count(wave.len());
        let n_fft = self.cfg.n_fft();
        let n_bins = self.cfg.n_bins();
        let mut out = Array2::<f64>::zeros((t_count, n_bins));
        let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
        for t in 0..t_count {
            let start = t * self.cfg.frame_shift;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (x, w)) in emphasized[start..start + self.cfg.frame_len]
                .iter()
                .zip(&self.window)
                .enumerate()
            {
                buf[i].re = x * w;
            }
            self.fft.process(&mut buf);
            for (b, c) in buf[..n_bins].iter().enumerate() {
                out[[t, b]] = c.norm_sqr();
            }
        }
        Ok(out)
    }

    /// Applies the filterbank and floor to a T × n_bins power matrix.
    pub fn mel_from_power(&self, power: &Array2<f64>) -> Array2<f64> {
        let k = self.filterbank.bands();
        let mut out = Array2::<f64>::zeros((power.nrows(), k));
        let mut row = vec![0.0; k];
        for (t, p) in power.rows().into_iter().enumerate() {
            let p = p.to_vec();
            self.filterbank.apply(&p, &mut row);
            for (j, v) in row.iter().enumerate() {
                out[[t, j]] = v.max(self.cfg.energy_floor);
            }
        }
        out
    }

    pub fn linear_mel(&self, wave: &Waveform) -> Result<SpectroTemporal> {
        let power = self.power_spectra(wave)?;
        Ok(SpectroTemporal {
            values: self.mel_from_power(&power),
            domain: Domain::LinearPower,
            geometry: Some(self.geometry()),
        })
    }

    pub fn log_mel(&self, wave: &Waveform) -> Result<SpectroTemporal> {
        let lin = self.linear_mel(wave)?;
        Ok(to_log(&lin))
    }
}

/// Natural log of a linear-power matrix.
pub fn to_log(lin: &SpectroTemporal) -> SpectroTemporal {
    SpectroTemporal {
        values: lin.values.mapv(f64::ln),
        domain: Domain::Log,
        geometry: lin.geometry,
    }
}

pub fn log_mel_spectrogram(wave: &Waveform, cfg: &FrontendConfig) -> Result<SpectroTemporal> {
    Frontend::new(cfg)?.log_mel(wave)
}

pub fn linear_mel_spectrogram(wave: &Waveform, cfg: &FrontendConfig) -> Result<SpectroTemporal> {
    Frontend::new(cfg)?.linear_mel(wave)
}

/// Regression deltas over ±W frames with edge-frame replication.
pub fn delta_coefficients(stat: &SpectroTemporal, d: &DeltaConfig) -> Result<SpectroTemporal> {
    d.validate()?;
    let (t_count, k_count) = stat.shape();
    if t_count == 0 {
        return Err(Error::EmptyInput("delta of a zero-frame matrix".into()));
    }
    let w_max = d.window_half_width as isize;
    let denom = 2.0 * (1..=w_max).map(|w| (w * w) as f64).sum::<f64>();
    let last = t_count as isize - 1;
    let clamp = |t: isize| t.clamp(0, last) as usize;
    let mut out = Array2::<f64>::zeros((t_count, k_count));
    for t in 0..t_count as isize {
        for k in 0..k_count {
            let mut acc = 0.0;
            for w in 1..=w_max {
                acc += w as f64 * (stat.values[[clamp(t + w), k]] - stat.values[[clamp(t - w), k]]);
            }
            out[[t as usize, k]] = acc / denom;
        }
    }
    Ok(SpectroTemporal {
        values: out,
        domain: stat.domain,
        geometry: stat.geometry,
    })
}

const STFM_MAGIC: &[u8; 4] = b"STFM";

pub fn write_stfm<W: Write>(mut w: W, m: &SpectroTemporal) -> std::io::Result<()> {
    let (t, k) = m.shape();
    w.write_all(STFM_MAGIC)?;
    w.write_all(&(t as u32).to_le_bytes())?;
    w.write_all(&(k as u32).to_le_bytes())?;
    w.write_all(&[m.domain.tag()])?;
    let mut buf = Vec::with_capacity(t * k * 8);
    for v in m.values.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)
}

pub fn read_stfm<R: Read>(mut r: R) -> Result<SpectroTemporal> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)
        .map_err(|e| Error::Format(format!("STFM read: {e}")))?;
    if bytes.len() < 13 || &bytes[..4] != STFM_MAGIC {
        return Err(Error::Format("missing STFM header".into()));
    }
    let t = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let k = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let domain = Domain::from_tag(bytes[12])?;
    let body = &bytes[13..];
    if body.len() != t * k * 8 {
        return Err(Error::Format(format!(
            "STFM body has {} bytes, header declares {t}x{k}",
            body.len()
        )));
    }
    let values: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let values = Array2::from_shape_vec((t, k), values)
        .map_err(|e| Error::Format(format!("STFM shape: {e}")))?;
    Ok(SpectroTemporal::new(values, domain))
}

pub fn save_stfm(path: &Path, m: &SpectroTemporal) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_stfm(std::io::BufWriter::new(f), m).map_err(|e| Error::io(path, e))
}

pub fn load_stfm(path: &Path) -> Result<SpectroTemporal> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_stfm(std::io::BufReader::new(f))
}

/// Raw little-endian f32 samples, no header.
pub fn save_raw_f32(path: &Path, wave: &Waveform) -> Result<()> {
    let mut buf = Vec::with_capacity(wave.len() * 4);
    for s in &wave.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_raw_f32(path: &Path, sample_rate: u32) -> Result<Waveform> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 4",
            path.display(),
            bytes.len()
        )));
    }
    let samples = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Waveform::new(samples, sample_rate))
}
