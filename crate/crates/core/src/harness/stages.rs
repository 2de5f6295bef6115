//! The staged pipeline. Each stage writes its artifacts under the output
//! directory and a stamp holding a hash of its configuration and of its
//! upstream stamps; a stage whose stamp matches is skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{concatenate, Array2, Axis};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::{generate_corpus, CorpusManifest, Lexicon, ManifestEntry, Snr, Split};
use crate::error::{Error, Result};
use crate::frontend::{
    delta_coefficients, load_stfm, save_stfm, DeltaConfig, Domain, Frontend, SpectroTemporal, Waveform,
};
use crate::mask::{count_isolated_reliable, load_mask, oracle_mask, save_mask, BinaryMask};
use crate::mask_estimator::{
    build_feature_matrix, predict_mask_pooled, predict_mask_state_dependent, train_estimator_bank, BankMaskSource,
    BankStats, BankTrainItem, EstimatorBank, Standardizer,
};
use crate::mdt_hmm::{
    align_words, decode_state_conditioned, forced_align, train_hmm, viterbi_decode, Grammar, HmmSet,
    StateAlignment, TrainUtterance,
};

use super::config::{AlignSource, ExperimentConfig, HmmData, Method};
use super::report::{emit_report, Agreement, CellStats, ExperimentReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    GenCorpus,
    Features,
    TrainHmm,
    OracleMasks,
    Align,
    TrainEstimators,
    Decode,
    Evaluate,
    Report,
}

const STAGE_VERSION: u32 = 1;

impl Stage {
    pub const ALL: [Stage; 9] = [
        Stage::GenCorpus,
        Stage::Features,
        Stage::TrainHmm,
        Stage::OracleMasks,
        Stage::Align,
        Stage::TrainEstimators,
        Stage::Decode,
        Stage::Evaluate,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenCorpus => "gen-corpus",
            Stage::Features => "features",
            Stage::TrainHmm => "train-hmm",
            Stage::OracleMasks => "oracle-masks",
            Stage::Align => "align",
            Stage::TrainEstimators => "train-estimators",
            Stage::Decode => "decode",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    pub fn deps(self) -> &'static [Stage] {
        match self {
            Stage::GenCorpus => &[],
            Stage::Features => &[Stage::GenCorpus],
            Stage::TrainHmm => &[Stage::Features],
            Stage::OracleMasks => &[Stage::GenCorpus],
            Stage::Align => &[Stage::Features, Stage::TrainHmm],
            Stage::TrainEstimators => &[Stage::Features, Stage::OracleMasks, Stage::Align],
            Stage::Decode => &[Stage::TrainHmm, Stage::OracleMasks, Stage::Align, Stage::TrainEstimators],
            Stage::Evaluate => &[Stage::Decode],
            Stage::Report => &[Stage::Evaluate, Stage::TrainHmm, Stage::TrainEstimators],
        }
    }

    /// Configuration that influences this stage's own outputs.
    fn key(self, c: &ExperimentConfig) -> String {
        match self {
            Stage::GenCorpus => c.corpus.canonical(),
            Stage::Features => format!("{:?}|{:?}", c.frontend, c.features),
            Stage::TrainHmm => format!("{}|{:?}", c.hmm.canonical(), c.hmm_data),
            Stage::OracleMasks => format!("{:?}|{:?}|{:?}|{:?}", c.frontend, c.oracle, c.delta_rule, c.features.delta),
            Stage::Align => format!("{:?}|{:?}", c.align_on, c.hmm.delta_marginalization),
            Stage::TrainEstimators => format!("{:?}", c.svm),
            Stage::Decode => format!(
                "{:?}|{}|{:?}|{:?}",
                c.methods, c.hmm.word_insertion_penalty, c.hmm.delta_marginalization, c.delta_rule
            ),
            Stage::Evaluate => String::new(),
            Stage::Report => format!("{:?}", c.methods),
        }
    }
}

/// Where every artifact lives under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn features(&self) -> PathBuf {
        self.root.join("features")
    }
    pub fn obs(&self, id: &str) -> PathBuf {
        self.features().join(format!("{id}.obs.stfm"))
    }
    pub fn clean_obs(&self, base: &str) -> PathBuf {
        self.features().join(format!("{base}.clean.obs.stfm"))
    }
    pub fn mask_features(&self, id: &str) -> PathBuf {
        self.features().join(format!("{id}.mfeat.stfm"))
    }
    pub fn hmm(&self) -> PathBuf {
        self.root.join("hmm").join("model.hmm")
    }
    pub fn masks(&self) -> PathBuf {
        self.root.join("masks")
    }
    pub fn mask(&self, id: &str) -> PathBuf {
        self.masks().join(format!("{id}.mask"))
    }
    pub fn aligns(&self) -> PathBuf {
        self.root.join("align")
    }
    pub fn alignment(&self, id: &str) -> PathBuf {
        self.aligns().join(format!("{id}.align"))
    }
    pub fn bank(&self) -> PathBuf {
        self.root.join("estimators").join("bank.svmb")
    }
    pub fn bank_stats(&self) -> PathBuf {
        self.root.join("estimators").join("stats.txt")
    }
    pub fn decode(&self) -> PathBuf {
        self.root.join("decode").join("results.tsv")
    }
    pub fn agreement(&self) -> PathBuf {
        self.root.join("decode").join("agreement.tsv")
    }
    pub fn evaluation(&self) -> PathBuf {
        self.root.join("evaluate").join("summary.tsv")
    }
    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
    pub fn report_txt(&self) -> PathBuf {
        self.report_dir().join(super::report::REPORT_TXT)
    }
    pub fn run_summary(&self) -> PathBuf {
        self.root.join("run_summary.txt")
    }
    pub fn stamp(&self, s: Stage) -> PathBuf {
        self.root.join("stamps").join(format!("{}.stamp", s.name()))
    }

    /// The file whose presence shows that a stage completed.
    pub fn primary(&self, s: Stage) -> PathBuf {
        match s {
            Stage::GenCorpus => self.corpus().join(crate::corpus::MANIFEST_FILE),
            Stage::Features => self.features().join("index.tsv"),
            Stage::TrainHmm => self.hmm(),
            Stage::OracleMasks => self.masks().join("index.tsv"),
            Stage::Align => self.aligns().join("index.tsv"),
            Stage::TrainEstimators => self.bank(),
            Stage::Decode => self.decode(),
            Stage::Evaluate => self.evaluation(),
            Stage::Report => self.report_txt(),
        }
    }
}

fn write_file(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn ensure_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Static log-mel and delta coefficients side by side, T × 2K.
pub fn observations(frontend: &Frontend, delta: &DeltaConfig, wave: &Waveform) -> Result<Array2<f64>> {
    let log = frontend.log_mel(wave)?;
    let d = delta_coefficients(&log, delta)?;
    Ok(concatenate(Axis(1), &[log.values.view(), d.values.view()]).expect("equal frame counts"))
}

fn load_matrix(path: &Path, stage: &'static str) -> Result<Array2<f64>> {
    if !path.exists() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage,
        });
    }
    Ok(load_stfm(path)?.values)
}

fn load_alignment(path: &Path) -> Result<Vec<usize>> {
    Ok(StateAlignment::parse(&read_file(path)?)?.0)
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunSummary {
    pub executed: Vec<Stage>,
    pub skipped: Vec<Stage>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub layout: Layout,
    pool: rayon::ThreadPool,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build()
            .map_err(|e| Error::InvalidConfig(format!("thread pool: {e}")))?;
        Ok(Self {
            layout: Layout {
                root: cfg.output.clone(),
            },
            cfg,
            pool,
        })
    }

    /// Hash of the stage's configuration and, recursively, of its inputs.
    pub fn stage_hash(&self, s: Stage) -> String {
        let mut h = Sha256::new();
        h.update(s.name().as_bytes());
        h.update(STAGE_VERSION.to_le_bytes());
        h.update(s.key(&self.cfg).as_bytes());
        for d in s.deps() {
            h.update(self.stage_hash(*d).as_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn is_current(&self, s: Stage) -> bool {
        let stamp = std::fs::read_to_string(self.layout.stamp(s)).ok();
        stamp.as_deref().map(str::trim) == Some(self.stage_hash(s).as_str()) && self.layout.primary(s).exists()
    }

    fn check_deps(&self, s: Stage) -> Result<()> {
        for &d in s.deps() {
            if !self.is_current(d) {
                return Err(Error::MissingArtifact {
                    path: self.layout.primary(d),
                    stage: d.name(),
                });
            }
        }
        Ok(())
    }

    /// Runs one stage unconditionally (its inputs must be current).
    pub fn run_stage(&self, s: Stage) -> Result<()> {
        let wrap = |e: Error| Error::Stage {
            stage: s.name(),
            source: Box::new(e),
        };
        self.check_deps(s).map_err(wrap)?;
        let stamp = self.layout.stamp(s);
        if stamp.exists() {
            std::fs::remove_file(&stamp).map_err(|e| wrap(Error::io(&stamp, e)))?;
        }
        log::info!("stage {}: running", s.name());
        self.pool.install(|| self.execute(s)).map_err(wrap)?;
        write_file(&stamp, format!("{}\n", self.stage_hash(s))).map_err(wrap)
    }

    /// Runs every stage that is not up to date, in dependency order.
    pub fn run_all(&self) -> Result<RunSummary> {
        let mut summary = RunSummary::default();
        let mut timing = String::new();
        for s in Stage::ALL {
            if self.is_current(s) {
                log::info!("stage {}: up to date", s.name());
                summary.skipped.push(s);
                let _ = writeln!(timing, "{}\tskipped", s.name());
                continue;
            }
            let t0 = Instant::now();
            self.run_stage(s)?;
            summary.executed.push(s);
            let _ = writeln!(timing, "{}\texecuted\t{:.2}s", s.name(), t0.elapsed().as_secs_f64());
        }
        write_file(&self.layout.run_summary(), timing)?;
        Ok(summary)
    }

    fn execute(&self, s: Stage) -> Result<()> {
        match s {
            Stage::GenCorpus => self.gen_corpus(),
            Stage::Features => self.features(),
            Stage::TrainHmm => self.train_hmm(),
            Stage::OracleMasks => self.oracle_masks(),
            Stage::Align => self.align(),
            Stage::TrainEstimators => self.train_estimators(),
            Stage::Decode => self.decode(),
            Stage::Evaluate => self.evaluate(),
            Stage::Report => self.report(),
        }
    }

    pub fn manifest(&self) -> Result<CorpusManifest> {
        CorpusManifest::load(&self.layout.corpus(), self.cfg.corpus.synth.sample_rate)
    }

    fn frontend(&self) -> Result<Frontend> {
        Frontend::new(&self.cfg.frontend)
    }

    fn lexicon(&self) -> Result<Lexicon> {
        Lexicon::builtin(self.cfg.corpus.n_words)
    }

    fn word_ids(&self, lex: &Lexicon, e: &ManifestEntry) -> Result<Vec<usize>> {
        e.words.iter().map(|w| lex.index_of(w)).collect()
    }

    /// First manifest entry of every base utterance, in manifest order.
    fn bases<'a>(&self, m: &'a CorpusManifest) -> Vec<&'a ManifestEntry> {
        let mut seen = std::collections::HashSet::new();
        m.entries.iter().filter(|e| seen.insert(e.base_id().to_string())).collect()
    }

    fn gen_corpus(&self) -> Result<()> {
        let dir = self.layout.corpus();
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let m = generate_corpus(&self.cfg.corpus, &dir)?;
        log::info!("corpus: {} records", m.entries.len());
        Ok(())
    }

    fn features(&self) -> Result<()> {
        let m = self.manifest()?;
        let fe = self.frontend()?;
        let dir = self.layout.features();
        ensure_dir(&dir)?;
        let delta = &self.cfg.features.delta;
        let frames: Vec<usize> = m
            .entries
            .par_iter()
            .map(|e| -> Result<usize> {
                let noisy = m.load_noisy(e)?;
                let obs = observations(&fe, delta, &noisy)?;
                save_stfm(&self.layout.obs(&e.id), &SpectroTemporal::new(obs.clone(), Domain::Log))?;
                let mf = build_feature_matrix(&noisy, &fe, &self.cfg.features)?;
                save_stfm(&self.layout.mask_features(&e.id), &SpectroTemporal::new(mf, Domain::Log))?;
                Ok(obs.nrows())
            })
            .collect::<Result<_>>()?;
        self.bases(&m).par_iter().try_for_each(|e| -> Result<()> {
            let clean = m.load_clean(e)?;
            let obs = observations(&fe, delta, &clean)?;
            save_stfm(&self.layout.clean_obs(e.base_id()), &SpectroTemporal::new(obs, Domain::Log))
        })?;
        let mut index = String::new();
        for (e, t) in m.entries.iter().zip(frames) {
            let _ = writeln!(index, "{}\t{t}", e.id);
        }
        write_file(&self.layout.primary(Stage::Features), index)
    }

    fn train_hmm(&self) -> Result<()> {
        let m = self.manifest()?;
        let lex = self.lexicon()?;
        let entries: Vec<&ManifestEntry> = match self.cfg.hmm_data {
            HmmData::MultiCondition => m.split(Split::Train).collect(),
            HmmData::Clean => self.bases(&m).into_iter().filter(|e| e.split == Split::Train).collect(),
        };
        let utts: Vec<TrainUtterance> = entries
            .par_iter()
            .map(|e| {
                let path = match self.cfg.hmm_data {
                    HmmData::MultiCondition => self.layout.obs(&e.id),
                    HmmData::Clean => self.layout.clean_obs(e.base_id()),
                };
                Ok(TrainUtterance {
                    obs: load_matrix(&path, Stage::Features.name())?,
                    words: self.word_ids(&lex, e)?,
                })
            })
            .collect::<Result<_>>()?;
        let (hmm, report) = train_hmm(&utts, &lex.names(), &self.cfg.hmm)?;
        let summary = format!(
            "states\t{}\nviterbi_passes\t{}\nskipped_utterances\t{}\nem_loglik\t{}\n",
            hmm.n_states(),
            report.viterbi_passes,
            report.skipped_utterances,
            report.em_loglik.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",")
        );
        write_file(&self.layout.hmm(), hmm.to_bytes())?;
        write_file(&self.layout.hmm().with_file_name("train_report.txt"), summary)
    }

    fn oracle_masks(&self) -> Result<()> {
        let m = self.manifest()?;
        let fe = self.frontend()?;
        ensure_dir(&self.layout.masks())?;
        let counts: Vec<usize> = m
            .entries
            .par_iter()
            .map(|e| -> Result<usize> {
                let speech = fe.linear_mel(&m.load_clean(e)?)?;
                let noise = fe.linear_mel(&m.load_noise(e)?)?;
                let mask = oracle_mask(&speech, &noise, self.cfg.oracle)?
                    .with_delta(&self.cfg.features.delta, self.cfg.delta_rule)?;
                save_mask(&self.layout.mask(&e.id), &mask)?;
                Ok(mask.reliable_count())
            })
            .collect::<Result<_>>()?;
        let mut index = String::new();
        for (e, c) in m.entries.iter().zip(counts) {
            let _ = writeln!(index, "{}\t{c}", e.id);
        }
        write_file(&self.layout.primary(Stage::OracleMasks), index)
    }

    fn load_hmm(&self) -> Result<HmmSet> {
        let p = self.layout.hmm();
        if !p.exists() {
            return Err(Error::MissingArtifact {
                path: p,
                stage: Stage::TrainHmm.name(),
            });
        }
        HmmSet::load(&p)
    }

    fn align(&self) -> Result<()> {
        let m = self.manifest()?;
        let lex = self.lexicon()?;
        let hmm = self.load_hmm()?;
        ensure_dir(&self.layout.aligns())?;
        let policy = self.cfg.hmm.delta_marginalization;
        let align_one = |path: PathBuf, e: &ManifestEntry| -> Result<StateAlignment> {
            let obs = load_matrix(&path, Stage::Features.name())?;
            let mask = BinaryMask::all_reliable(obs.nrows(), hmm.n_static());
            Ok(forced_align(&hmm, &obs, &mask, &self.word_ids(&lex, e)?, policy)?.alignment)
        };
        let aligned: Vec<(String, String)> = match self.cfg.align_on {
            AlignSource::Clean => {
                let per_base: BTreeMap<String, String> = self
                    .bases(&m)
                    .par_iter()
                    .map(|e| Ok((e.base_id().to_string(), align_one(self.layout.clean_obs(e.base_id()), e)?.to_text())))
                    .collect::<Result<Vec<_>>>()?
                    .into_iter()
                    .collect();
                m.entries.iter().map(|e| (e.id.clone(), per_base[e.base_id()].clone())).collect()
            }
            AlignSource::Noisy => m
                .entries
                .par_iter()
                .map(|e| Ok((e.id.clone(), align_one(self.layout.obs(&e.id), e)?.to_text())))
                .collect::<Result<_>>()?,
        };
        aligned
            .par_iter()
            .try_for_each(|(id, text)| write_file(&self.layout.alignment(id), text))?;
        let index: String = aligned.iter().map(|(id, _)| format!("{id}\n")).collect();
        write_file(&self.layout.primary(Stage::Align), index)
    }

    fn train_estimators(&self) -> Result<()> {
        let m = self.manifest()?;
        let hmm = self.load_hmm()?;
        let train: Vec<&ManifestEntry> = m.split(Split::Train).collect();
        let raw: Vec<(Array2<f64>, Array2<bool>, Vec<usize>)> = train
            .par_iter()
            .map(|e| {
                let f = load_matrix(&self.layout.mask_features(&e.id), Stage::Features.name())?;
                let mask = load_mask(&self.layout.mask(&e.id))?;
                let a = load_alignment(&self.layout.alignment(&e.id))?;
                Ok((f, mask.values, a))
            })
            .collect::<Result<_>>()?;
        let st = Standardizer::fit(raw.iter().map(|r| &r.0))?;
        let items: Vec<BankTrainItem> = raw
            .into_par_iter()
            .map(|(f, labels, alignment)| {
                Ok(BankTrainItem {
                    features: st.apply(&f)?,
                    labels,
                    alignment,
                })
            })
            .collect::<Result<_>>()?;
        let (bank, stats) = train_estimator_bank(&items, st, hmm.n_states(), &self.cfg.svm)?;
        log::info!(
            "estimator bank: {} trained, {} constant, {} fallback",
            stats.trained,
            stats.constant,
            stats.fallback
        );
        write_file(
            &self.layout.bank_stats(),
            format!(
                "slots\t{}\ntrained\t{}\nconstant\t{}\nfallback\t{}\n",
                stats.total(),
                stats.trained,
                stats.constant,
                stats.fallback
            ),
        )?;
        write_file(&self.layout.bank(), bank.to_bytes())
    }

    fn decode(&self) -> Result<()> {
        let m = self.manifest()?;
        let lex = self.lexicon()?;
        let hmm = self.load_hmm()?;
        let bank = EstimatorBank::load(&self.layout.bank())?;
        let cfg = &self.cfg;
        let policy = cfg.hmm.delta_marginalization;
        let wip = cfg.hmm.word_insertion_penalty;
        let delta = &cfg.features.delta;
        let test: Vec<&ManifestEntry> = m.split(Split::Test).collect();
        let names = lex.names();
        let per_utt: Vec<(String, String)> = test
            .par_iter()
            .map(|e| -> Result<(String, String)> {
                let obs = load_matrix(&self.layout.obs(&e.id), Stage::Features.name())?;
                let oracle = load_mask(&self.layout.mask(&e.id))?;
                let align = load_alignment(&self.layout.alignment(&e.id))?;
                let std = bank.standardizer.apply(&load_matrix(
                    &self.layout.mask_features(&e.id),
                    Stage::Features.name(),
                )?)?;
                let state_dep = predict_mask_state_dependent(&bank, &std, &align, delta, cfg.delta_rule)?;
                let pooled = predict_mask_pooled(&bank, &std, delta, cfg.delta_rule)?;
                let agree = |p: &BinaryMask| p.values.iter().zip(oracle.values.iter()).filter(|(a, b)| a == b).count();
                let agreement = format!(
                    "{}\t{}\t{}\t{}\t{}\t{}\n",
                    e.id,
                    e.snr,
                    e.noise_kind,
                    oracle.values.len(),
                    agree(&state_dep),
                    agree(&pooled)
                );

                let reference = self.word_ids(&lex, e)?;
                let mut lines = String::new();
                for &method in &cfg.methods {
                    let (hyp, mask) = match method {
                        Method::ClassicalOracle => {
                            let d = viterbi_decode(&hmm, &obs, &oracle, &Grammar::WordLoop, wip, policy)?;
                            (d.words, oracle.clone())
                        }
                        Method::StateDependentOracle => {
                            let d = viterbi_decode(&hmm, &obs, &state_dep, &Grammar::WordLoop, wip, policy)?;
                            (d.words, state_dep.clone())
                        }
                        Method::StateConditionedDecode => {
                            let src = BankMaskSource {
                                bank: &bank,
                                std_features: std.clone(),
                                delta: *delta,
                                rule: cfg.delta_rule,
                            };
                            let r = decode_state_conditioned(&hmm, &obs, &src, &Grammar::WordLoop, wip, policy)?;
                            let path_mask = predict_mask_state_dependent(
                                &bank,
                                &std,
                                &r.decoded.alignment.0,
                                delta,
                                cfg.delta_rule,
                            )?;
                            (r.decoded.words, path_mask)
                        }
                    };
                    let words = |v: &[usize]| {
                        if v.is_empty() {
                            "-".to_string()
                        } else {
                            v.iter().map(|&w| names[w].as_str()).collect::<Vec<_>>().join(",")
                        }
                    };
                    let _ = writeln!(
                        lines,
                        "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                        e.id,
                        method.name(),
                        e.snr,
                        e.noise_kind,
                        words(&reference),
                        words(&hyp),
                        count_isolated_reliable(&mask),
                        mask.reliable_count(),
                        mask.delta_or_err()?.iter().filter(|&&v| v).count(),
                        mask.values.len()
                    );
                }
                Ok((lines, agreement))
            })
            .collect::<Result<_>>()?;
        let (results, agreement): (String, String) = per_utt.into_iter().unzip();
        write_file(&self.layout.agreement(), agreement)?;
        write_file(&self.layout.decode(), results)
    }

    fn evaluate(&self) -> Result<()> {
        let text = read_file(&self.layout.decode())?;
        // (snr, noise, method) -> stats, in first-seen order
        let mut keys: Vec<(String, String, String)> = Vec::new();
        let mut acc: BTreeMap<(String, String, String), CellStats> = BTreeMap::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 10 {
                return Err(Error::Format(format!("decode line `{line}`")));
            }
            let split = |s: &str| -> Vec<String> {
                if s == "-" {
                    Vec::new()
                } else {
                    s.split(',').map(String::from).collect()
                }
            };
            let num = |s: &str| s.parse::<usize>().map_err(|_| Error::Format(format!("decode field `{s}`")));
            let st = CellStats {
                edits: align_words(&split(f[4]), &split(f[5])),
                utterances: 1,
                isolated: num(f[6])?,
                reliable: num(f[7])?,
                delta_reliable: num(f[8])?,
                cells: num(f[9])?,
            };
            let key = (f[2].to_string(), f[3].to_string(), f[1].to_string());
            if !acc.contains_key(&key) {
                keys.push(key.clone());
            }
            acc.entry(key).or_default().add(&st);
        }
        let mut out = String::new();
        for k in keys {
            let s = &acc[&k];
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
                k.0,
                k.1,
                k.2,
                s.edits.n,
                s.edits.substitutions,
                s.edits.deletions,
                s.edits.insertions,
                s.utterances,
                s.isolated,
                s.reliable,
                s.delta_reliable,
                s.cells
            );
        }
        write_file(&self.layout.evaluation(), out)
    }

    /// Builds the report from the evaluation summary and bank statistics.
    pub fn load_report(&self) -> Result<ExperimentReport> {
        let text = read_file(&self.layout.evaluation())?;
        let snrs = self.cfg.corpus.test_snrs.clone();
        let methods = self.cfg.methods.clone();
        let mut noise_kinds: Vec<String> = Vec::new();
        if snrs.iter().any(|s| s.is_clean()) {
            noise_kinds.push("none".into());
        }
        noise_kinds.extend(self.cfg.corpus.noise_kinds.iter().map(|k| k.name().to_string()));
        let mut by_snr = vec![vec![CellStats::default(); methods.len()]; snrs.len()];
        let mut by_noise: Vec<(String, usize, Vec<CellStats>)> = Vec::new();
        for line in text.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 12 {
                return Err(Error::Format(format!("evaluation line `{line}`")));
            }
            let num = |i: usize| f[i].parse::<usize>().map_err(|_| Error::Format(format!("evaluation field `{}`", f[i])));
            let snr: Snr = f[0].parse()?;
            let Some(si) = snrs.iter().position(|&s| s == snr) else { continue };
            let method: Method = f[2].parse()?;
            let Some(mi) = methods.iter().position(|&m| m == method) else { continue };
            let st = CellStats {
                edits: crate::mdt_hmm::EditCounts {
                    n: num(3)?,
                    substitutions: num(4)?,
                    deletions: num(5)?,
                    insertions: num(6)?,
                },
                utterances: num(7)?,
                isolated: num(8)?,
                reliable: num(9)?,
                delta_reliable: num(10)?,
                cells: num(11)?,
            };
            by_snr[si][mi].add(&st);
            let pos = by_noise.iter().position(|(k, s, _)| k == f[1] && *s == si);
            let idx = pos.unwrap_or_else(|| {
                by_noise.push((f[1].to_string(), si, vec![CellStats::default(); methods.len()]));
                by_noise.len() - 1
            });
            by_noise[idx].2[mi].add(&st);
        }
        if by_snr.iter().flatten().any(|s| s.edits.n == 0) {
            return Err(Error::Format("evaluation summary lacks an (SNR, method) cell".into()));
        }

        let mut agreement = vec![Agreement::default(); snrs.len()];
        for line in read_file(&self.layout.agreement())?.lines() {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 6 {
                return Err(Error::Format(format!("agreement line `{line}`")));
            }
            let snr: Snr = f[1].parse()?;
            if let Some(si) = snrs.iter().position(|&s| s == snr) {
                let num = |i: usize| f[i].parse::<usize>().map_err(|_| Error::Format(format!("agreement field `{}`", f[i])));
                agreement[si].cells += num(3)?;
                agreement[si].state_dependent += num(4)?;
                agreement[si].pooled += num(5)?;
            }
        }

        let hmm = self.load_hmm()?;
        let bank_text = read_file(&self.layout.bank_stats())?;
        let stat = |key: &str| -> Result<usize> {
            bank_text
                .lines()
                .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('\t')))
                .and_then(|v| v.trim().parse().ok())
                .ok_or_else(|| Error::Format(format!("bank stats lack `{key}`")))
        };
        Ok(ExperimentReport {
            snrs,
            methods,
            noise_kinds,
            by_snr,
            by_noise,
            agreement,
            n_bands: self.cfg.frontend.n_mel,
            n_states: hmm.n_states(),
            bank: BankStats {
                trained: stat("trained")?,
                constant: stat("constant")?,
                fallback: stat("fallback")?,
            },
        })
    }

    fn report(&self) -> Result<()> {
        let r = self.load_report()?;
        emit_report(&r, &self.layout.report_dir())
    }
}

/// Loads the noisy log-mel observations of a manifest entry directly from
/// audio (used by tools that bypass the feature cache).
pub fn entry_observations(m: &CorpusManifest, e: &ManifestEntry, fe: &Frontend, delta: &DeltaConfig) -> Result<Array2<f64>> {
    observations(fe, delta, &m.load_noisy(e)?)
}

/// Linear mel energies of the clean and scaled-noise components.
pub fn entry_components(m: &CorpusManifest, e: &ManifestEntry, fe: &Frontend) -> Result<(SpectroTemporal, SpectroTemporal)> {
    Ok((fe.linear_mel(&m.load_clean(e)?)?, fe.linear_mel(&m.load_noise(e)?)?))
}
