use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::frontend::{DeltaConfig, FrontendConfig};
use crate::kv::{ConfigText, KeyValues};
use crate::mask::{DeltaRule, OracleThreshold};
use crate::mask_estimator::{FeatureConfig, SvmTrainConfig};
use crate::mdt_hmm::HmmConfig;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    ClassicalOracle,
    StateDependentOracle,
    StateConditionedDecode,
}

impl Method {
    pub const ALL: [Method; 3] = [
        Method::ClassicalOracle,
        Method::StateDependentOracle,
        Method::StateConditionedDecode,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::ClassicalOracle => "classical_oracle",
            Method::StateDependentOracle => "state_dependent_oracle",
            Method::StateConditionedDecode => "state_conditioned_decode",
        }
    }

    /// Row label in the text report.
    pub fn label(self) -> &'static str {
        match self {
            Method::ClassicalOracle => "classical",
            Method::StateDependentOracle => "state dep.",
            Method::StateConditionedDecode => "state cond.",
        }
    }

    pub fn uses_bank(self) -> bool {
        self != Method::ClassicalOracle
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method `{s}`")))
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Which features the forced alignments (bank training and test-time state
/// transcriptions) are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignSource {
    Clean,
    Noisy,
}

/// Which training data the recognizer sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HmmData {
    MultiCondition,
    Clean,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub corpus: CorpusConfig,
    pub frontend: FrontendConfig,
    pub features: FeatureConfig,
    pub hmm: HmmConfig,
    pub svm: SvmTrainConfig,
    pub methods: Vec<Method>,
    pub seed: u64,
    pub output: PathBuf,
    /// Worker threads; 0 lets the pool decide.
    pub threads: usize,
    pub oracle: OracleThreshold,
    pub delta_rule: DeltaRule,
    pub align_on: AlignSource,
    pub hmm_data: HmmData,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            corpus: CorpusConfig::default(),
            frontend: FrontendConfig::default(),
            features: FeatureConfig::default(),
            hmm: HmmConfig::default(),
            svm: SvmTrainConfig::default(),
            methods: vec![Method::ClassicalOracle, Method::StateDependentOracle],
            seed: 1,
            output: PathBuf::from("mdt-run"),
            threads: 0,
            oracle: OracleThreshold::default(),
            delta_rule: DeltaRule::And,
            align_on: AlignSource::Clean,
            hmm_data: HmmData::MultiCondition,
        };
        c.set_seed(1);
        c
    }
}

fn unknown(section: &str, key: &str) -> Error {
    Error::InvalidConfig(format!("{section}: unknown key `{key}`"))
}

fn frontend_from_kv(kv: &KeyValues) -> Result<(FrontendConfig, DeltaConfig)> {
    let mut c = FrontendConfig::default();
    let mut d = DeltaConfig::default();
    for (key, _) in kv.iter() {
        match key {
            "sample_rate" => c.sample_rate = kv.parse(key)?,
            "frame_len" => c.frame_len = kv.parse(key)?,
            "frame_shift" => c.frame_shift = kv.parse(key)?,
            "preemphasis" => c.preemphasis = kv.parse(key)?,
            "n_mel" | "bands" => c.n_mel = kv.parse(key)?,
            "f_min" => c.f_min = kv.parse(key)?,
            "f_max" => c.f_max = kv.parse(key)?,
            "energy_floor" => c.energy_floor = kv.parse(key)?,
            "delta_window" => d.window_half_width = kv.parse(key)?,
            other => return Err(unknown("frontend", other)),
        }
    }
    c.validate()?;
    d.validate()?;
    Ok((c, d))
}

fn svm_from_kv(kv: &KeyValues, feat: &mut FeatureConfig) -> Result<SvmTrainConfig> {
    let mut c = SvmTrainConfig::default();
    for (key, _) in kv.iter() {
        match key {
            "lambda" => c.lambda = kv.parse(key)?,
            "epochs" => c.epochs = kv.parse(key)?,
            "eta0" => c.eta0 = kv.parse(key)?,
            "min_samples_per_model" => c.min_samples_per_model = kv.parse(key)?,
            "min_per_class" => c.min_per_class = kv.parse(key)?,
            "pooled_max_samples" => c.pooled_max_samples = kv.parse(key)?,
            "floor_window" => feat.floor_window = kv.parse(key)?,
            "floor_bias" => feat.floor_bias = kv.parse(key)?,
            "flatness_half_width" => feat.flatness_half_width = kv.parse(key)?,
            "voicing_threshold" => feat.harmonic.voicing_threshold = kv.parse(key)?,
            "f0_min" => feat.harmonic.f0_min = kv.parse(key)?,
            "f0_max" => feat.harmonic.f0_max = kv.parse(key)?,
            other => return Err(unknown("svm", other)),
        }
    }
    if c.min_samples_per_model < 2 {
        return Err(Error::InvalidConfig("svm: min_samples_per_model must be >= 2".into()));
    }
    c.validate()?;
    Ok(c)
}

impl ExperimentConfig {
    /// Parses sectioned config text. Relative output paths resolve against
    /// `base_dir`.
    pub fn parse(text: &str, base_dir: &Path) -> Result<Self> {
        let ct = ConfigText::parse(text)?;
        for name in ct.section_names() {
            if !["", "corpus", "frontend", "hmm", "svm", "experiment"].contains(&name) {
                return Err(Error::InvalidConfig(format!("unknown section [{name}]")));
            }
        }
        if !ct.section("").is_empty() {
            return Err(Error::InvalidConfig("keys must appear inside a section".into()));
        }
        let mut c = Self {
            corpus: CorpusConfig::from_kv(&ct.section("corpus"))?,
            hmm: HmmConfig::from_kv(&ct.section("hmm"))?,
            ..Self::default()
        };
        let (fe, delta) = frontend_from_kv(&ct.section("frontend"))?;
        c.frontend = fe;
        c.features.delta = delta;
        c.svm = svm_from_kv(&ct.section("svm"), &mut c.features)?;

        let ex = ct.section("experiment");
        let mut seed = c.seed;
        for (key, val) in ex.iter() {
            match key {
                "seed" => seed = ex.parse(key)?,
                "methods" => {
                    c.methods = val
                        .split(',')
                        .map(str::trim)
                        .filter(|s| !s.is_empty())
                        .map(str::parse)
                        .collect::<Result<_>>()?
                }
                "output" => c.output = base_dir.join(val),
                "threads" => c.threads = ex.parse(key)?,
                "theta_db" => c.oracle.theta_db = ex.parse(key)?,
                "delta_rule" => c.delta_rule = ex.parse(key)?,
                "align_on" => {
                    c.align_on = match val {
                        "clean" => AlignSource::Clean,
                        "noisy" => AlignSource::Noisy,
                        o => return Err(Error::InvalidConfig(format!("experiment: align_on `{o}`"))),
                    }
                }
                "hmm_data" => {
                    c.hmm_data = match val {
                        "multi" => HmmData::MultiCondition,
                        "clean" => HmmData::Clean,
                        o => return Err(Error::InvalidConfig(format!("experiment: hmm_data `{o}`"))),
                    }
                }
                other => return Err(unknown("experiment", other)),
            }
        }
        if ex.get("output").is_none() {
            c.output = base_dir.join(&c.output);
        }
        c.set_seed(seed);
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::InvalidConfig(format!("config file {} not found", path.display())),
            _ => Error::io(path, e),
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    /// Sets the master seed; every component seed derives from it.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.corpus.seed = seed::derive(seed, &[1]);
        self.hmm.seed = seed::derive(seed, &[2]);
        self.svm.seed = seed::derive(seed, &[3]);
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.frontend.validate()?;
        self.hmm.validate()?;
        self.svm.validate()?;
        if self.methods.is_empty() {
            return Err(Error::InvalidConfig("experiment: methods must be non-empty".into()));
        }
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        if m.len() != self.methods.len() {
            return Err(Error::InvalidConfig("experiment: duplicate method".into()));
        }
        if self.corpus.synth.sample_rate != self.frontend.sample_rate {
            return Err(Error::InvalidConfig(format!(
                "corpus sample rate {} differs from frontend {}",
                self.corpus.synth.sample_rate, self.frontend.sample_rate
            )));
        }
        if self.corpus.synth.frame_shift != self.frontend.frame_shift {
            return Err(Error::InvalidConfig("corpus and frontend frame shifts differ".into()));
        }
        if !self.oracle.theta_db.is_finite() {
            return Err(Error::InvalidConfig("experiment: theta_db must be finite".into()));
        }
        if self.features.floor_window == 0 || self.features.flatness_half_width == 0 {
            return Err(Error::InvalidConfig("svm: feature windows must be >= 1".into()));
        }
        Ok(())
    }

    pub fn has_method(&self, m: Method) -> bool {
        self.methods.contains(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_sections_and_seed() {
        let text = "[experiment]\nseed = 7\nmethods = classical_oracle\noutput = out\n[corpus]\nwords = 3\n[hmm]\nmixtures = 2\n[svm]\nepochs = 4\n";
        let c = ExperimentConfig::parse(text, Path::new("/tmp/x")).unwrap();
        assert_eq!(c.methods, vec![Method::ClassicalOracle]);
        assert_eq!(c.output, PathBuf::from("/tmp/x/out"));
        assert_eq!((c.corpus.n_words, c.hmm.mixtures, c.svm.epochs), (3, 2, 4));
        assert_eq!(c.corpus.seed, seed::derive(7, &[1]));
        let d = ExperimentConfig::parse("", Path::new(".")).unwrap();
        assert_eq!(d.methods.len(), 2);
    }

    #[test]
    fn rejects_bad_configs() {
        for text in [
            "[experiment]\nmethods =\n",
            "[experiment]\nmethods = magic\n",
            "[experiment]\nbogus = 1\n",
            "[nope]\n",
            "loose = 1\n",
            "[svm]\nlambda = 0\n",
            "[svm]\nmin_samples_per_model = 1\n",
            "[corpus]\ntest_snrs =\n",
            "[frontend]\nsample_rate = 16000\n",
        ] {
            let e = ExperimentConfig::parse(text, Path::new(".")).unwrap_err();
            assert!(e.is_validation(), "{text:?} gave {e}");
        }
    }
}
