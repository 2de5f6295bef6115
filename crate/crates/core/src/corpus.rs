//! Deterministic synthetic small-vocabulary corpus.
//!
//! Words are sequences of formant-synthesised phones (pulse-train or noise
//! source through a cascade of two-pole resonators). Each clean utterance is
//! mixed with seeded noise at exact utterance-level SNRs, and the clean and
//! scaled-noise components are kept next to the mixture.

use std::f64::consts::PI;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::frontend::{load_raw_f32, save_raw_f32, Waveform};
use crate::kv::KeyValues;
use crate::seed;

#[derive(Debug, Clone, PartialEq)]
pub struct Formant {
    pub freq_hz: f64,
    pub bandwidth_hz: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phone {
    pub name: String,
    pub formants: Vec<Formant>,
    pub voiced: bool,
    /// Inclusive duration range in frames.
    pub duration_frames: (usize, usize),
    pub gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Word {
    pub name: String,
    pub phones: Vec<Phone>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    pub words: Vec<Word>,
}

fn phone(name: &str, f: [(f64, f64); 3], voiced: bool, dur: (usize, usize), gain: f64) -> Phone {
    Phone {
        name: name.to_string(),
        formants: f
            .iter()
            .map(|&(freq_hz, bandwidth_hz)| Formant {
                freq_hz,
                bandwidth_hz,
            })
            .collect(),
        voiced,
        duration_frames: dur,
        gain,
    }
}

fn inventory(name: &str) -> Phone {
    const V: (usize, usize) = (12, 20);
    const C: (usize, usize) = (6, 10);
    const F: (usize, usize) = (7, 11);
    match name {
        "a" => phone("a", [(730.0, 90.0), (1090.0, 110.0), (2440.0, 170.0)], true, V, 1.0),
        "i" => phone("i", [(270.0, 60.0), (2290.0, 100.0), (3010.0, 150.0)], true, V, 1.0),
        "u" => phone("u", [(300.0, 60.0), (870.0, 90.0), (2240.0, 150.0)], true, V, 1.0),
        "e" => phone("e", [(530.0, 70.0), (1840.0, 100.0), (2480.0, 160.0)], true, V, 1.0),
        "o" => phone("o", [(570.0, 80.0), (840.0, 90.0), (2410.0, 170.0)], true, V, 1.0),
        "ae" => phone("ae", [(660.0, 90.0), (1720.0, 110.0), (2410.0, 170.0)], true, V, 1.0),
        "er" => phone("er", [(490.0, 70.0), (1350.0, 90.0), (1690.0, 110.0)], true, V, 1.0),
        "m" => phone("m", [(250.0, 80.0), (1200.0, 200.0), (2300.0, 250.0)], true, C, 0.35),
        "n" => phone("n", [(250.0, 80.0), (1700.0, 200.0), (2600.0, 250.0)], true, C, 0.35),
        "l" => phone("l", [(350.0, 80.0), (1100.0, 150.0), (2700.0, 200.0)], true, C, 0.45),
        "r" => phone("r", [(420.0, 80.0), (1300.0, 120.0), (1600.0, 150.0)], true, C, 0.45),
        "s" => phone("s", [(2600.0, 300.0), (3300.0, 350.0), (3750.0, 300.0)], false, F, 0.25),
        "sh" => phone("sh", [(1800.0, 250.0), (2600.0, 300.0), (3400.0, 350.0)], false, F, 0.3),
        "f" => phone("f", [(1400.0, 400.0), (2500.0, 450.0), (3500.0, 450.0)], false, F, 0.2),
        other => unreachable!("no phone {other}"),
    }
}

// Ordered so that any prefix holds words sharing a vowel and differing
// only in their weaker consonants.
const WORD_TABLE: [(&str, [&str; 3]); 11] = [
    ("sam", ["s", "a", "m"]),
    ("far", ["f", "a", "r"]),
    ("nis", ["n", "i", "s"]),
    ("sin", ["s", "i", "n"]),
    ("ful", ["f", "u", "l"]),
    ("shum", ["sh", "u", "m"]),
    ("shon", ["sh", "o", "n"]),
    ("nos", ["n", "o", "s"]),
    ("laef", ["l", "ae", "f"]),
    ("res", ["r", "e", "s"]),
    ("mersh", ["m", "er", "sh"]),
];

impl Lexicon {
    /// The built-in synthetic vocabulary, first `n` words (at most 11).
    pub fn builtin(n: usize) -> Result<Self> {
        if n < 2 || n > WORD_TABLE.len() {
            return Err(Error::InvalidConfig(format!(
                "lexicon size must be in 2..={}, got {n}",
                WORD_TABLE.len()
            )));
        }
        let words = WORD_TABLE[..n]
            .iter()
            .map(|(name, phones)| Word {
                name: name.to_string(),
                phones: phones.iter().map(|p| inventory(p)).collect(),
            })
            .collect();
        Ok(Self { words })
    }

    pub fn validate(&self) -> Result<()> {
        if self.words.len() < 2 {
            return Err(Error::InvalidConfig("lexicon needs at least 2 words".into()));
        }
        for w in &self.words {
            if w.phones.is_empty() {
                return Err(Error::InvalidConfig(format!("word {} has no phones", w.name)));
            }
            for p in &w.phones {
                if p.duration_frames.0 == 0 || p.duration_frames.0 > p.duration_frames.1 {
                    return Err(Error::InvalidConfig(format!("bad duration in {}", w.name)));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w.name == name)
            .ok_or_else(|| Error::UnknownWord(name.to_string()))
    }

    pub fn names(&self) -> Vec<String> {
        self.words.iter().map(|w| w.name.clone()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub frame_shift: usize,
    pub frame_len: usize,
    pub lead_silence_frames: usize,
    pub trail_silence_frames: usize,
    /// Inclusive range of silent frames between words of a sequence.
    pub gap_frames: (usize, usize),
    pub pitch_range_hz: (f64, f64),
    pub transition_ms: f64,
    /// Per-utterance vocal-tract scale applied to every formant frequency.
    pub vtl_scale_range: (f64, f64),
    /// Relative standard deviation of per-phone formant jitter.
    pub formant_jitter: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_shift: 80,
            frame_len: 200,
            lead_silence_frames: 15,
            trail_silence_frames: 15,
            gap_frames: (0, 8),
            pitch_range_hz: (90.0, 200.0),
            transition_ms: 20.0,
            vtl_scale_range: (0.85, 1.15),
            formant_jitter: 0.05,
        }
    }
}

/// A labelled span, in samples and in frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub label: String,
    pub start_sample: usize,
    pub end_sample: usize,
    pub start_frame: usize,
    pub end_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Annotations {
    pub words: Vec<Segment>,
    pub phones: Vec<Segment>,
    pub f0_hz: f64,
}

/// Frame whose centre is nearest to sample index `s`.
fn sample_to_frame(s: usize, cfg: &SynthConfig) -> usize {
    let centre = cfg.frame_len as f64 / 2.0;
    ((s as f64 - centre) / cfg.frame_shift as f64).round().max(0.0) as usize
}

struct Resonator {
    y1: f64,
    y2: f64,
}

impl Resonator {
    /// Unit gain at DC (cascade branch) or, with `peak`, unit gain at the
    /// resonance (parallel branch, used for frication).
    fn tick(&mut self, x: f64, freq: f64, bw: f64, sr: f64, peak: bool) -> f64 {
        let r = (-PI * bw / sr).exp();
        let theta = 2.0 * PI * freq / sr;
        let c = -r * r;
        let b = 2.0 * r * theta.cos();
        let a = if peak {
            (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt()
        } else {
            1.0 - b - c
        };
        let y = a * x + b * self.y1 + c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

struct PhoneSpan {
    start: usize,
    end: usize,
    phone: Phone,
    word_start: bool,
    word_end: bool,
}

/// Synthesises a word sequence. Deterministic in `(words, lexicon, seed, cfg)`.
pub fn synth_utterance(
    words: &[usize],
    lexicon: &Lexicon,
    seed: u64,
    cfg: &SynthConfig,
) -> Result<(Waveform, Annotations)> {
    if let Some(&bad) = words.iter().find(|&&w| w >= lexicon.len()) {
        return Err(Error::UnknownWord(format!("word index {bad}")));
    }
    let mut rng = seed::rng(seed, &[0x5157]);
    let sr = cfg.sample_rate as f64;
    let shift = cfg.frame_shift;
    let (plo, phi) = cfg.pitch_range_hz;
    let f0 = if phi > plo { rng.random_range(plo..=phi) } else { plo };
    let (vlo, vhi) = cfg.vtl_scale_range;
    let vtl = if vhi > vlo { rng.random_range(vlo..=vhi) } else { vlo };

    let mut spans: Vec<PhoneSpan> = Vec::new();
    let mut ann = Annotations {
        f0_hz: f0,
        ..Default::default()
    };
    let mut cursor = cfg.lead_silence_frames * shift;
    for (i, &w) in words.iter().enumerate() {
        if i > 0 {
            let (glo, ghi) = cfg.gap_frames;
            cursor += rng.random_range(glo..=ghi) * shift;
        }
        let word = &lexicon.words[w];
        let word_start = cursor;
        for (j, p) in word.phones.iter().enumerate() {
            let (dlo, dhi) = p.duration_frames;
            let len = rng.random_range(dlo..=dhi) * shift;
            let mut phone = p.clone();
            for f in &mut phone.formants {
                let jitter: f64 = rng.sample(StandardNormal);
                f.freq_hz = (f.freq_hz * vtl * (1.0 + cfg.formant_jitter * jitter)).clamp(100.0, 0.45 * sr);
            }
            spans.push(PhoneSpan {
                start: cursor,
                end: cursor + len,
                phone,
                word_start: j == 0,
                word_end: j + 1 == word.phones.len(),
            });
            ann.phones.push(Segment {
                label: p.name.clone(),
                start_sample: cursor,
                end_sample: cursor + len,
                start_frame: sample_to_frame(cursor, cfg),
                end_frame: sample_to_frame(cursor + len, cfg),
            });
            cursor += len;
        }
        ann.words.push(Segment {
            label: word.name.clone(),
            start_sample: word_start,
            end_sample: cursor,
            start_frame: sample_to_frame(word_start, cfg),
            end_frame: sample_to_frame(cursor, cfg),
        });
    }
    let total = cursor + cfg.trail_silence_frames * shift;
    let mut out = vec![0.0f64; total];

    let transition = ((cfg.transition_ms / 1000.0) * sr) as usize;
    let ramp = (0.01 * sr) as usize;
    let mut resonators: Vec<Resonator> = (0..3).map(|_| Resonator { y1: 0.0, y2: 0.0 }).collect();
    let mut glottal = 0.0;
    let period = sr / f0;
    let mut phase = period; // first sample of voicing emits a pulse

    // Pass 1: unscaled source-filter output. The filter branch restarts at
    // word starts and at voicing changes.
    let mut prev: Option<&Phone> = None;
    for span in &spans {
        let p = &span.phone;
        if span.word_start {
            prev = None;
        }
        if prev.is_none_or(|q| q.voiced != p.voiced) {
            resonators.iter_mut().for_each(|r| {
                r.y1 = 0.0;
                r.y2 = 0.0;
            });
        }
        for n in span.start..span.end {
            let into = n - span.start;
            let mix = match prev {
                Some(_) if into < transition => into as f64 / transition as f64,
                _ => 1.0,
            };
            let lerp = |a: f64, b: f64| a + (b - a) * mix;
            let source = if p.voiced {
                phase += 1.0;
                let pulse = if phase >= period {
                    phase -= period;
                    1.0
                } else {
                    0.0
                };
                glottal = 0.9 * glottal + pulse;
                glottal
            } else {
                rng.sample::<f64, _>(StandardNormal)
            };
            let mut y = source;
            for (fi, r) in resonators.iter_mut().enumerate() {
                let target = &p.formants[fi.min(p.formants.len() - 1)];
                // formants glide only between phones of the same branch
                let (freq, bw) = match prev.filter(|q| q.voiced == p.voiced) {
                    Some(q) => {
                        let from = &q.formants[fi.min(q.formants.len() - 1)];
                        (lerp(from.freq_hz, target.freq_hz), lerp(from.bandwidth_hz, target.bandwidth_hz))
                    }
                    None => (target.freq_hz, target.bandwidth_hz),
                };
                y = r.tick(y, freq, bw, sr, !p.voiced);
            }
            out[n] = y;
        }
        prev = Some(p);
    }

    // Pass 2: each phone is scaled to RMS `gain`; the gain glides over
    // transitions.
    let inv_rms: Vec<f64> = spans
        .iter()
        .map(|s| {
            let seg = &out[s.start..s.end];
            let rms = (seg.iter().map(|v| v * v).sum::<f64>() / seg.len() as f64).sqrt();
            if rms > 0.0 {
                1.0 / rms
            } else {
                0.0
            }
        })
        .collect();
    for (i, span) in spans.iter().enumerate() {
        for n in span.start..span.end {
            let into = n - span.start;
            let gain = if !span.word_start && into < transition {
                let from = spans[i - 1].phone.gain;
                from + (span.phone.gain - from) * into as f64 / transition as f64
            } else {
                span.phone.gain
            };
            let mut g = gain * inv_rms[i];
            if span.word_start && into < ramp {
                g *= into as f64 / ramp as f64;
            } else if span.word_end && span.end - n <= ramp {
                g *= (span.end - n) as f64 / ramp as f64;
            }
            out[n] *= g;
        }
    }

    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let samples = if peak > 0.0 {
        out.iter().map(|v| (0.5 * v / peak) as f32).collect()
    } else {
        vec![0.0f32; total]
    };
    Ok((Waveform::new(samples, cfg.sample_rate), ann))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    White,
    Lowpass { cutoff_hz: f64 },
    AmplitudeModulated { rate_hz: f64 },
    HarmonicHum { fundamental_hz: f64 },
}

impl NoiseKind {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseKind::White => "white",
            NoiseKind::Lowpass { .. } => "lowpass",
            NoiseKind::AmplitudeModulated { .. } => "amplitude_modulated",
            NoiseKind::HarmonicHum { .. } => "harmonic_hum",
        }
    }

    /// Default parameters for a kind name.
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "white" => Ok(NoiseKind::White),
            "lowpass" => Ok(NoiseKind::Lowpass { cutoff_hz: 1000.0 }),
            "amplitude_modulated" => Ok(NoiseKind::AmplitudeModulated { rate_hz: 4.0 }),
            "harmonic_hum" => Ok(NoiseKind::HarmonicHum {
                fundamental_hz: 60.0,
            }),
            other => Err(Error::InvalidConfig(format!("unknown noise kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self, sample_rate: u32) -> Result<()> {
        let nyq = sample_rate as f64 / 2.0;
        let ok = match self.kind {
            NoiseKind::White => true,
            NoiseKind::Lowpass { cutoff_hz } => cutoff_hz > 0.0 && cutoff_hz < nyq,
            NoiseKind::AmplitudeModulated { rate_hz } => rate_hz > 0.0 && rate_hz < nyq,
            NoiseKind::HarmonicHum { fundamental_hz } => fundamental_hz > 0.0 && fundamental_hz < nyq,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("noise parameters out of range: {:?}", self.kind)))
        }
    }
}

/// RBJ-cookbook second-order lowpass, Q = 1/sqrt(2).
fn lowpass(x: &[f64], cutoff: f64, sr: f64) -> Vec<f64> {
    let w0 = 2.0 * PI * cutoff / sr;
    let alpha = w0.sin() / (2.0 * std::f64::consts::FRAC_1_SQRT_2);
    let cw = w0.cos();
    let a0 = 1.0 + alpha;
    let b0 = (1.0 - cw) / 2.0 / a0;
    let b1 = (1.0 - cw) / a0;
    let b2 = b0;
    let a1 = -2.0 * cw / a0;
    let a2 = (1.0 - alpha) / a0;
    let (mut x1, mut x2, mut y1, mut y2) = (0.0, 0.0, 0.0, 0.0);
    x.iter()
        .map(|&x0| {
            let y0 = b0 * x0 + b1 * x1 + b2 * x2 - a1 * y1 - a2 * y2;
            x2 = x1;
            x1 = x0;
            y2 = y1;
            y1 = y0;
            y0
        })
        .collect()
}

pub fn generate_noise(spec: &NoiseSpec, len: usize, sample_rate: u32) -> Result<Waveform> {
    spec.validate(sample_rate)?;
    let mut rng = seed::rng(spec.seed, &[0x401e]);
    let sr = sample_rate as f64;
    let white: Vec<f64> = (0..len).map(|_| rng.sample(StandardNormal)).collect();
    let out: Vec<f64> = match spec.kind {
        NoiseKind::White => white,
        NoiseKind::Lowpass { cutoff_hz } => lowpass(&white, cutoff_hz, sr),
        NoiseKind::AmplitudeModulated { rate_hz } => {
            let phase: f64 = rng.random_range(0.0..2.0 * PI);
            white
                .iter()
                .enumerate()
                .map(|(i, w)| w * (1.0 + 0.9 * (2.0 * PI * rate_hz * i as f64 / sr + phase).sin()))
                .collect()
        }
        NoiseKind::HarmonicHum { fundamental_hz } => {
            let n_harm = ((sr / 2.0) / fundamental_hz).floor().min(20.0) as usize;
            let phases: Vec<f64> = (0..n_harm).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            white
                .iter()
                .enumerate()
                .map(|(i, w)| {
                    let t = i as f64 / sr;
                    let hum: f64 = phases
                        .iter()
                        .enumerate()
                        .map(|(h, ph)| {
                            let h = (h + 1) as f64;
                            (2.0 * PI * h * fundamental_hz * t + ph).sin() / h
                        })
                        .sum();
                    hum + 0.05 * w
                })
                .collect()
        }
    };
    Ok(Waveform::new(out.iter().map(|&v| v as f32).collect(), sample_rate))
}

/// Utterance-level SNR in dB; `+∞` is the clean condition.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Snr(pub f64);

impl Snr {
    pub const CLEAN: Snr = Snr(f64::INFINITY);

    pub fn is_clean(self) -> bool {
        self.0 == f64::INFINITY
    }

    pub fn db(self) -> f64 {
        self.0
    }
}

impl fmt::Display for Snr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_clean() {
            write!(f, "clean")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Snr {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("clean") || s.eq_ignore_ascii_case("inf") {
            return Ok(Snr::CLEAN);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::InvalidConfig(format!("bad SNR `{s}`")))?;
        if !v.is_finite() {
            return Err(Error::InvalidConfig(format!("bad SNR `{s}`")));
        }
        Ok(Snr(v))
    }
}

/// Scales `noise_raw` so that the mixture has the requested SNR and returns
/// `(noisy, scaled_noise)` with `noisy[i] = clean[i] + scaled_noise[i]`.
pub fn mix_at_snr(clean: &Waveform, noise_raw: &Waveform, snr: Snr) -> Result<(Waveform, Waveform)> {
    if clean.len() != noise_raw.len() {
        return Err(Error::LengthMismatch(clean.len(), noise_raw.len()));
    }
    let p_clean = clean.power();
    let p_noise = noise_raw.power();
    let gain = if snr.is_clean() {
        0.0
    } else {
        if p_clean == 0.0 {
            return Err(Error::ZeroPowerClean);
        }
        if p_noise == 0.0 {
            return Err(Error::ZeroPowerNoise);
        }
        mix_gain(p_clean, p_noise, snr.db())
    };
    let scaled: Vec<f32> = noise_raw
        .samples
        .iter()
        .map(|&n| (gain * n as f64) as f32)
        .collect();
    let noisy: Vec<f32> = clean.samples.iter().zip(&scaled).map(|(c, n)| c + n).collect();
    Ok((
        Waveform::new(noisy, clean.sample_rate),
        Waveform::new(scaled, clean.sample_rate),
    ))
}

/// `g = sqrt(P_clean / (P_noise · 10^(snr/10)))`.
pub fn mix_gain(p_clean: f64, p_noise: f64, snr_db: f64) -> f64 {
    (p_clean / (p_noise * 10f64.powf(snr_db / 10.0))).sqrt()
}

pub fn achieved_snr_db(clean: &Waveform, scaled_noise: &Waveform) -> f64 {
    10.0 * (clean.power() / scaled_noise.power()).log10()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7e41,
            Split::Test => 0x7e57,
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::Format(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusConfig {
    pub n_words: usize,
    pub train_per_word: usize,
    pub test_per_word: usize,
    /// Every n-th utterance of a word is a 2–4 word sequence; 0 disables.
    pub sequence_every: usize,
    pub noise_kinds: Vec<NoiseKind>,
    pub train_snrs: Vec<Snr>,
    pub test_snrs: Vec<Snr>,
    pub seed: u64,
    pub synth: SynthConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            n_words: 5,
            train_per_word: 40,
            test_per_word: 20,
            sequence_every: 4,
            noise_kinds: vec![
                NoiseKind::from_name("lowpass").unwrap(),
                NoiseKind::from_name("amplitude_modulated").unwrap(),
            ],
            train_snrs: [f64::INFINITY, 20.0, 10.0, 5.0, 0.0].map(Snr).to_vec(),
            test_snrs: [f64::INFINITY, 20.0, 10.0, 5.0, 0.0, -5.0].map(Snr).to_vec(),
            seed: 1,
            synth: SynthConfig::default(),
        }
    }
}

fn parse_list<T>(s: &str, f: impl Fn(&str) -> Result<T>) -> Result<Vec<T>> {
    s.split(',')
        .map(str::trim)
        .filter(|x| !x.is_empty())
        .map(f)
        .collect()
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("corpus: {m}")));
        if self.n_words < 2 {
            return bad("need at least 2 words");
        }
        if self.train_per_word == 0 || self.test_per_word == 0 {
            return bad("utterances per word must be positive");
        }
        if self.train_snrs.is_empty() || self.test_snrs.is_empty() {
            return bad("SNR lists must be non-empty");
        }
        let has_finite = self
            .train_snrs
            .iter()
            .chain(&self.test_snrs)
            .any(|s| !s.is_clean());
        if has_finite && self.noise_kinds.is_empty() {
            return bad("finite SNRs need at least one noise kind");
        }
        for k in &self.noise_kinds {
            NoiseSpec { kind: *k, seed: 0 }.validate(self.synth.sample_rate)?;
        }
        let (lo, hi) = self.synth.pitch_range_hz;
        if !(lo > 0.0 && lo <= hi) {
            return bad("bad pitch range");
        }
        if self.synth.gap_frames.0 > self.synth.gap_frames.1 {
            return bad("bad gap range");
        }
        let (vlo, vhi) = self.synth.vtl_scale_range;
        if !(vlo > 0.0 && vlo <= vhi) {
            return bad("bad vocal-tract scale range");
        }
        if !(self.synth.formant_jitter >= 0.0 && self.synth.formant_jitter < 0.5) {
            return bad("formant jitter must be in [0, 0.5)");
        }
        Ok(())
    }

    /// Reads `[corpus]`-style keys; unknown keys are rejected.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        for (key, val) in kv.iter() {
            match key {
                "words" => c.n_words = kv.parse(key)?,
                "train_per_word" => c.train_per_word = kv.parse(key)?,
                "test_per_word" => c.test_per_word = kv.parse(key)?,
                "sequence_every" => c.sequence_every = kv.parse(key)?,
                "noise_kinds" => c.noise_kinds = parse_list(val, NoiseKind::from_name)?,
                "train_snrs" => c.train_snrs = parse_list(val, str::parse)?,
                "test_snrs" => c.test_snrs = parse_list(val, str::parse)?,
                "seed" => c.seed = kv.parse(key)?,
                "sample_rate" => c.synth.sample_rate = kv.parse(key)?,
                "lead_silence_frames" => c.synth.lead_silence_frames = kv.parse(key)?,
                "trail_silence_frames" => c.synth.trail_silence_frames = kv.parse(key)?,
                "pitch_min_hz" => c.synth.pitch_range_hz.0 = kv.parse(key)?,
                "pitch_max_hz" => c.synth.pitch_range_hz.1 = kv.parse(key)?,
                "vtl_scale_min" => c.synth.vtl_scale_range.0 = kv.parse(key)?,
                "vtl_scale_max" => c.synth.vtl_scale_range.1 = kv.parse(key)?,
                "formant_jitter" => c.synth.formant_jitter = kv.parse(key)?,
                other => {
                    return Err(Error::InvalidConfig(format!("corpus: unknown key `{other}`")))
                }
            }
        }
        c.validate()?;
        Ok(c)
    }

    /// Canonical text form; feeds stage hashes.
    pub fn canonical(&self) -> String {
        let kinds: Vec<String> = self.noise_kinds.iter().map(|k| format!("{k:?}")).collect();
        let snrs = |v: &[Snr]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(",");
        format!(
            "words={} train={} test={} seq={} noise={} train_snrs={} test_snrs={} seed={} synth={:?}",
            self.n_words,
            self.train_per_word,
            self.test_per_word,
            self.sequence_every,
            kinds.join(","),
            snrs(&self.train_snrs),
            snrs(&self.test_snrs),
            self.seed,
            self.synth
        )
    }

    pub fn snrs(&self, split: Split) -> &[Snr] {
        match split {
            Split::Train => &self.train_snrs,
            Split::Test => &self.test_snrs,
        }
    }

    /// (SNR, noise kind) cells of a split; clean appears once without noise.
    pub fn cells(&self, split: Split) -> Vec<(Snr, Option<NoiseKind>)> {
        let mut out = Vec::new();
        for &snr in self.snrs(split) {
            if snr.is_clean() {
                out.push((snr, None));
            } else {
                for &k in &self.noise_kinds {
                    out.push((snr, Some(k)));
                }
            }
        }
        out
    }

    pub fn per_word(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train_per_word,
            Split::Test => self.test_per_word,
        }
    }

    pub fn manifest_len(&self) -> usize {
        [Split::Train, Split::Test]
            .iter()
            .map(|&s| self.n_words * self.per_word(s) * self.cells(s).len())
            .sum()
    }
}

/// One line of the manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub words: Vec<String>,
    pub snr: Snr,
    pub noise_kind: String,
    pub clean_path: PathBuf,
    pub noise_path: PathBuf,
    pub noisy_path: PathBuf,
}

impl ManifestEntry {
    /// Identifier of the underlying clean utterance (shared by all cells).
    pub fn base_id(&self) -> &str {
        self.clean_path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_suffix(".clean.f32"))
            .unwrap_or(&self.id)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub root: PathBuf,
    pub sample_rate: u32,
    pub entries: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const ANNOTATION_FILE: &str = "annotations.tsv";

impl CorpusManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    pub fn load_clean(&self, e: &ManifestEntry) -> Result<Waveform> {
        load_raw_f32(&self.resolve(&e.clean_path), self.sample_rate)
    }

    pub fn load_noise(&self, e: &ManifestEntry) -> Result<Waveform> {
        load_raw_f32(&self.resolve(&e.noise_path), self.sample_rate)
    }

    pub fn load_noisy(&self, e: &ManifestEntry) -> Result<Waveform> {
        load_raw_f32(&self.resolve(&e.noisy_path), self.sample_rate)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            s.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\n",
                e.id,
                e.split.name(),
                e.words.join(","),
                e.snr,
                e.noise_kind,
                e.clean_path.display(),
                e.noise_path.display(),
                e.noisy_path.display()
            ));
        }
        s
    }

    pub fn parse(text: &str, root: PathBuf, sample_rate: u32) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 8 {
                return Err(Error::Format(format!(
                    "manifest line {}: expected 8 fields, got {}",
                    n + 1,
                    f.len()
                )));
            }
            entries.push(ManifestEntry {
                id: f[0].to_string(),
                split: f[1].parse()?,
                words: f[2].split(',').filter(|w| !w.is_empty()).map(String::from).collect(),
                snr: f[3].parse()?,
                noise_kind: f[4].to_string(),
                clean_path: f[5].into(),
                noise_path: f[6].into(),
                noisy_path: f[7].into(),
            });
        }
        Ok(Self {
            root,
            sample_rate,
            entries,
        })
    }

    pub fn load(dir: &Path, sample_rate: u32) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Self::parse(&text, dir.to_path_buf(), sample_rate)
    }
}

/// A fully materialised utterance (in memory).
#[derive(Debug, Clone)]
pub struct UtteranceRecord {
    pub id: String,
    pub split: Split,
    pub words: Vec<String>,
    pub clean: Waveform,
    pub noise: Waveform,
    pub noisy: Waveform,
    pub snr: Snr,
    pub noise_kind: Option<NoiseKind>,
}

/// Word sequence of the `i`-th utterance of word `w`.
fn word_sequence(cfg: &CorpusConfig, split: Split, w: usize, i: usize) -> Vec<usize> {
    if cfg.sequence_every == 0 || !(i + 1).is_multiple_of(cfg.sequence_every) {
        return vec![w];
    }
    let mut rng = seed::rng(cfg.seed, &[split.tag(), w as u64, i as u64, 0x5e9]);
    let len = rng.random_range(2..=4usize);
    let mut seq = vec![w];
    seq.extend((1..len).map(|_| rng.random_range(0..cfg.n_words)));
    seq
}

/// Seed of the clean utterance; train and test draw from disjoint tags.
pub fn utterance_seed(cfg: &CorpusConfig, split: Split, w: usize, i: usize) -> u64 {
    seed::derive(cfg.seed, &[split.tag(), w as u64, i as u64])
}

struct BaseUtterance {
    split: Split,
    base_id: String,
    words: Vec<usize>,
    seed: u64,
}

fn base_utterances(cfg: &CorpusConfig) -> Vec<BaseUtterance> {
    let mut out = Vec::new();
    for split in [Split::Train, Split::Test] {
        for w in 0..cfg.n_words {
            for i in 0..cfg.per_word(split) {
                out.push(BaseUtterance {
                    split,
                    base_id: format!("{}_w{:02}_u{:03}", split.name(), w, i),
                    words: word_sequence(cfg, split, w, i),
                    seed: utterance_seed(cfg, split, w, i),
                });
            }
        }
    }
    out
}

fn cell_label(snr: Snr, kind: Option<NoiseKind>) -> String {
    match kind {
        None => "clean".to_string(),
        Some(k) => format!("{}_{}", k.name(), snr),
    }
}

/// Materialises every record of one base utterance.
fn materialise(
    cfg: &CorpusConfig,
    lexicon: &Lexicon,
    base: &BaseUtterance,
) -> Result<(Annotations, Vec<UtteranceRecord>)> {
    let (clean, ann) = synth_utterance(&base.words, lexicon, base.seed, &cfg.synth)?;
    let names: Vec<String> = base.words.iter().map(|&w| lexicon.words[w].name.clone()).collect();
    let mut records = Vec::new();
    for (ci, (snr, kind)) in cfg.cells(base.split).into_iter().enumerate() {
        let (noisy, noise) = match kind {
            None => {
                let zeros = Waveform::new(vec![0.0; clean.len()], clean.sample_rate);
                mix_at_snr(&clean, &zeros, snr)?
            }
            Some(k) => {
                let spec = NoiseSpec {
                    kind: k,
                    seed: seed::derive(base.seed, &[0x0153, ci as u64]),
                };
                let raw = generate_noise(&spec, clean.len(), clean.sample_rate)?;
                mix_at_snr(&clean, &raw, snr)?
            }
        };
        records.push(UtteranceRecord {
            id: format!("{}_{}", base.base_id, cell_label(snr, kind)),
            split: base.split,
            words: names.clone(),
            clean: clean.clone(),
            noise,
            noisy,
            snr,
            noise_kind: kind,
        });
    }
    Ok((ann, records))
}

/// Writes audio, `manifest.tsv` and `annotations.tsv` under `dir`.
pub fn generate_corpus(cfg: &CorpusConfig, dir: &Path) -> Result<CorpusManifest> {
    cfg.validate()?;
    let lexicon = Lexicon::builtin(cfg.n_words)?;
    let audio = dir.join("audio");
    std::fs::create_dir_all(&audio).map_err(|e| Error::io(&audio, e))?;
    let bases = base_utterances(cfg);

    let per_base: Vec<(Vec<ManifestEntry>, String)> = bases
        .par_iter()
        .map(|base| -> Result<(Vec<ManifestEntry>, String)> {
            let (ann, records) = materialise(cfg, &lexicon, base)?;
            let clean_rel = PathBuf::from("audio").join(format!("{}.clean.f32", base.base_id));
            save_raw_f32(&dir.join(&clean_rel), &records[0].clean)?;
            let mut entries = Vec::new();
            for r in records {
                let noise_rel = PathBuf::from("audio").join(format!("{}.noise.f32", r.id));
                let noisy_rel = PathBuf::from("audio").join(format!("{}.noisy.f32", r.id));
                save_raw_f32(&dir.join(&noise_rel), &r.noise)?;
                save_raw_f32(&dir.join(&noisy_rel), &r.noisy)?;
                entries.push(ManifestEntry {
                    id: r.id,
                    split: r.split,
                    words: r.words,
                    snr: r.snr,
                    noise_kind: r.noise_kind.map_or("none", |k| k.name()).to_string(),
                    clean_path: clean_rel.clone(),
                    noise_path: noise_rel,
                    noisy_path: noisy_rel,
                });
            }
            let spans: Vec<String> = ann
                .words
                .iter()
                .map(|s| format!("{}:{}-{}", s.label, s.start_frame, s.end_frame))
                .collect();
            let ann_line = format!("{}\t{:.3}\t{}\n", base.base_id, ann.f0_hz, spans.join(" "));
            Ok((entries, ann_line))
        })
        .collect::<Result<_>>()?;

    let mut manifest = CorpusManifest {
        root: dir.to_path_buf(),
        sample_rate: cfg.synth.sample_rate,
        entries: Vec::new(),
    };
    let mut ann_text = String::new();
    for (entries, line) in per_base {
        manifest.entries.extend(entries);
        ann_text.push_str(&line);
    }
    let mpath = dir.join(MANIFEST_FILE);
    std::fs::write(&mpath, manifest.to_text()).map_err(|e| Error::io(&mpath, e))?;
    let apath = dir.join(ANNOTATION_FILE);
    std::fs::write(&apath, ann_text).map_err(|e| Error::io(&apath, e))?;
    Ok(manifest)
}

/// Word boundary annotations keyed by base utterance id.
pub fn load_annotations(dir: &Path) -> Result<Vec<(String, Vec<Segment>)>> {
    let path = dir.join(ANNOTATION_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let mut out = Vec::new();
    for line in text.lines().filter(|l| !l.is_empty()) {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 3 {
            return Err(Error::Format(format!("annotation line `{line}`")));
        }
        let mut segs = Vec::new();
        for span in f[2].split_whitespace() {
            let parse = || -> Option<Segment> {
                let (label, range) = span.split_once(':')?;
                let (a, b) = range.split_once('-')?;
                Some(Segment {
                    label: label.to_string(),
                    start_sample: 0,
                    end_sample: 0,
                    start_frame: a.parse().ok()?,
                    end_frame: b.parse().ok()?,
                })
            };
            segs.push(parse().ok_or_else(|| Error::Format(format!("annotation span `{span}`")))?);
        }
        out.push((f[0].to_string(), segs));
    }
    Ok(out)
}
