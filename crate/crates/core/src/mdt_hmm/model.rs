use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KeyValues;

use super::gmm::{DeltaMarginalization, Gaussian, GaussianMixture};

/// Left-to-right state: emission mixture plus self-loop / forward log-probs.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmState {
    pub gmm: GaussianMixture,
    pub log_self: f64,
    pub log_next: f64,
}

/// Which model a global state belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateOwner {
    Word { word: usize, local: usize },
    Silence { local: usize },
}

/// Word models followed by one silence model, in a single global state index
/// space: word 0 states, word 1 states, …, silence states.
#[derive(Debug, Clone, PartialEq)]
pub struct HmmSet {
    pub words: Vec<String>,
    pub states_per_word: Vec<usize>,
    pub n_silence: usize,
    /// Observation dimension (static + delta).
    pub dim: usize,
    pub var_floor: Vec<f64>,
    pub states: Vec<HmmState>,
}

impl HmmSet {
    pub fn n_states(&self) -> usize {
        self.states.len()
    }

    pub fn n_words(&self) -> usize {
        self.words.len()
    }

    pub fn n_static(&self) -> usize {
        self.dim / 2
    }

    pub fn word_offset(&self, w: usize) -> usize {
        self.states_per_word[..w].iter().sum()
    }

    pub fn word_states(&self, w: usize) -> std::ops::Range<usize> {
        let o = self.word_offset(w);
        o..o + self.states_per_word[w]
    }

    pub fn silence_states(&self) -> std::ops::Range<usize> {
        let o: usize = self.states_per_word.iter().sum();
        o..o + self.n_silence
    }

    pub fn owner(&self, g: usize) -> StateOwner {
        let mut base = 0;
        for (w, &n) in self.states_per_word.iter().enumerate() {
            if g < base + n {
                return StateOwner::Word {
                    word: w,
                    local: g - base,
                };
            }
            base += n;
        }
        StateOwner::Silence { local: g - base }
    }

    pub fn word_index(&self, name: &str) -> Result<usize> {
        self.words
            .iter()
            .position(|w| w == name)
            .ok_or_else(|| Error::UnknownWord(name.to_string()))
    }

    /// Emission log-likelihood of global state `s` under a mask.
    pub fn emission(&self, s: usize, obs: &[f64], mask: &[bool], policy: DeltaMarginalization) -> f64 {
        self.states[s]
            .gmm
            .marginal_loglik(obs, mask, self.n_static(), policy)
    }

    pub fn validate(&self) -> Result<()> {
        let expected: usize = self.states_per_word.iter().sum::<usize>() + self.n_silence;
        if expected != self.states.len() || self.words.len() != self.states_per_word.len() {
            return Err(Error::Format("state count does not match topology".into()));
        }
        for (i, s) in self.states.iter().enumerate() {
            if s.gmm.is_empty() {
                return Err(Error::Format(format!("state {i} has an empty mixture")));
            }
            let wsum: f64 = s.gmm.weights.iter().sum();
            if (wsum - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("state {i} weights sum to {wsum}")));
            }
            let psum = s.log_self.exp() + s.log_next.exp();
            if (psum - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("state {i} transitions sum to {psum}")));
            }
            for c in &s.gmm.components {
                if c.dim() != self.dim || c.var.iter().zip(&self.var_floor).any(|(v, f)| v < f) {
                    return Err(Error::Format(format!("state {i} has a bad component")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmmConfig {
    pub states_per_word: usize,
    pub silence_states: usize,
    pub mixtures: usize,
    /// Viterbi re-estimation passes per mixture-splitting stage.
    pub passes_per_stage: usize,
    /// Soft EM passes on the final alignment.
    pub em_passes: usize,
    pub var_floor_frac: f64,
    pub word_insertion_penalty: f64,
    pub delta_marginalization: DeltaMarginalization,
    pub seed: u64,
}

impl Default for HmmConfig {
    fn default() -> Self {
        Self {
            states_per_word: 8,
            silence_states: 3,
            mixtures: 3,
            passes_per_stage: 4,
            em_passes: 3,
            var_floor_frac: 1e-3,
            word_insertion_penalty: 0.0,
            delta_marginalization: DeltaMarginalization::Full,
            seed: 1,
        }
    }
}

impl HmmConfig {
    /// 16 states per word and a 3-state silence model: with 11 words this is
    /// the 179-state layout of the AURORA-2 digit recognizer.
    pub fn aurora2_preset() -> Self {
        Self {
            states_per_word: 16,
            silence_states: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("hmm: {m}")));
        if self.states_per_word == 0 || self.silence_states == 0 {
            return bad("state counts must be positive");
        }
        if self.mixtures == 0 {
            return bad("need at least one mixture component");
        }
        if self.passes_per_stage == 0 {
            return bad("passes_per_stage must be positive");
        }
        if !(self.var_floor_frac > 0.0) {
            return bad("var_floor_frac must be positive");
        }
        Ok(())
    }

    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        let mut c = Self::default();
        if kv.get("preset") == Some("aurora2") {
            c = Self::aurora2_preset();
        }
        for (key, _) in kv.iter() {
            match key {
                "preset" => match kv.get(key) {
                    Some("aurora2") | Some("desk") => {}
                    Some(o) => return Err(Error::InvalidConfig(format!("hmm: unknown preset `{o}`"))),
                    None => {}
                },
                "states_per_word" => c.states_per_word = kv.parse(key)?,
                "silence_states" => c.silence_states = kv.parse(key)?,
                "mixtures" => c.mixtures = kv.parse(key)?,
                "passes_per_stage" => c.passes_per_stage = kv.parse(key)?,
                "em_passes" => c.em_passes = kv.parse(key)?,
                "var_floor_frac" => c.var_floor_frac = kv.parse(key)?,
                "word_insertion_penalty" => c.word_insertion_penalty = kv.parse(key)?,
                "delta_marginalization" => c.delta_marginalization = kv.parse(key)?,
                "seed" => c.seed = kv.parse(key)?,
                other => return Err(Error::InvalidConfig(format!("hmm: unknown key `{other}`"))),
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn canonical(&self) -> String {
        format!("{self:?}")
    }
}

const HMM_MAGIC: &[u8; 4] = b"HMM1";
const HMM_VERSION: u32 = 1;

pub(crate) struct Writer(pub(crate) Vec<u8>);

impl Writer {
    pub(crate) fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    pub(crate) fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    pub(crate) fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    pub(crate) fn f64s(&mut self, v: &[f64]) {
        v.iter().for_each(|&x| self.f64(x));
    }
}

pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format("unexpected end of file".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    pub(crate) fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    pub(crate) fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    pub(crate) fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        (0..n).map(|_| self.f64()).collect()
    }
    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

impl HmmSet {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(HMM_MAGIC);
        w.u32(HMM_VERSION as usize);
        w.u32(self.words.len());
        for (name, &n) in self.words.iter().zip(&self.states_per_word) {
            w.u32(name.len());
            w.0.extend_from_slice(name.as_bytes());
            w.u32(n);
        }
        w.u32(self.n_silence);
        w.u32(self.dim);
        w.f64s(&self.var_floor);
        for s in &self.states {
            w.f64(s.log_self);
            w.f64(s.log_next);
            w.u32(s.gmm.len());
            for (wt, c) in s.gmm.weights.iter().zip(&s.gmm.components) {
                w.f64(*wt);
                w.f64s(&c.mean);
                w.f64s(&c.var);
            }
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != HMM_MAGIC {
            return Err(Error::Format("missing HMM1 header".into()));
        }
        let version = r.u32()?;
        if version != HMM_VERSION as usize {
            return Err(Error::Format(format!("unsupported model version {version}")));
        }
        let n_words = r.u32()?;
        let mut words = Vec::with_capacity(n_words);
        let mut states_per_word = Vec::with_capacity(n_words);
        for _ in 0..n_words {
            let len = r.u32()?;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("word name is not UTF-8".into()))?;
            words.push(name.to_string());
            states_per_word.push(r.u32()?);
        }
        let n_silence = r.u32()?;
        let dim = r.u32()?;
        let var_floor = r.f64s(dim)?;
        let total = states_per_word.iter().sum::<usize>() + n_silence;
        let mut states = Vec::with_capacity(total);
        for _ in 0..total {
            let log_self = r.f64()?;
            let log_next = r.f64()?;
            let m = r.u32()?;
            let mut weights = Vec::with_capacity(m);
            let mut comps = Vec::with_capacity(m);
            for _ in 0..m {
                weights.push(r.f64()?);
                let mean = r.f64s(dim)?;
                let var = r.f64s(dim)?;
                comps.push(Gaussian::new(mean, var));
            }
            states.push(HmmState {
                gmm: GaussianMixture::new(weights, comps),
                log_self,
                log_next,
            });
        }
        r.finish()?;
        let set = HmmSet {
            words,
            states_per_word,
            n_silence,
            dim,
            var_floor,
            states,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
