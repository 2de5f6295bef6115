//! Flat-start segmental k-means training with mixture splitting and a final
//! EM refinement of the emission mixtures.

use ndarray::Array2;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

use super::decoder::forced_align;
use super::gmm::{Gaussian, GaussianMixture};
use super::model::{HmmConfig, HmmSet, HmmState};

/// One training utterance: stacked static+delta observations and its
/// transcription as word indices.
#[derive(Debug, Clone)]
pub struct TrainUtterance {
    pub obs: Array2<f64>,
    pub words: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub viterbi_passes: usize,
    pub skipped_utterances: usize,
    /// Total training log-likelihood under the final alignment, before the
    /// first and after every EM pass.
    pub em_loglik: Vec<f64>,
}

const MIN_P_NEXT: f64 = 0.02;
const MAX_P_NEXT: f64 = 0.98;

fn skeleton(names: &[String], cfg: &HmmConfig, dim: usize, var_floor: Vec<f64>) -> HmmSet {
    let n_states = names.len() * cfg.states_per_word + cfg.silence_states;
    let placeholder = HmmState {
        gmm: GaussianMixture::new(vec![1.0], vec![Gaussian::new(vec![0.0; dim], var_floor.clone())]),
        log_self: 0.5f64.ln(),
        log_next: 0.5f64.ln(),
    };
    HmmSet {
        words: names.to_vec(),
        states_per_word: vec![cfg.states_per_word; names.len()],
        n_silence: cfg.silence_states,
        dim,
        var_floor,
        states: vec![placeholder; n_states],
    }
}

/// States of `[sil] w1 … wn [sil]` without inter-word silence.
fn flat_plan(hmm: &HmmSet, words: &[usize]) -> Vec<usize> {
    let mut plan: Vec<usize> = hmm.silence_states().collect();
    for &w in words {
        plan.extend(hmm.word_states(w));
    }
    plan.extend(hmm.silence_states());
    plan
}

type Alignments = Vec<Option<Vec<usize>>>;

fn uniform_alignments(hmm: &HmmSet, utts: &[TrainUtterance]) -> Alignments {
    utts.iter()
        .map(|u| {
            let plan = flat_plan(hmm, &u.words);
            let t_count = u.obs.nrows();
            (t_count >= plan.len()).then(|| (0..t_count).map(|t| plan[t * plan.len() / t_count]).collect())
        })
        .collect()
}

fn realign(hmm: &HmmSet, utts: &[TrainUtterance]) -> Alignments {
    let k = hmm.n_static();
    utts.par_iter()
        .map(|u| {
            let mask = BinaryMask::all_reliable(u.obs.nrows(), k);
            forced_align(hmm, &u.obs, &mask, &u.words, Default::default())
                .ok()
                .map(|d| d.alignment.0)
        })
        .collect()
}

/// Frame references `(utterance, frame)` per state, in corpus order.
fn bucket(n_states: usize, aligns: &Alignments) -> Vec<Vec<(usize, usize)>> {
    let mut out = vec![Vec::new(); n_states];
    for (u, a) in aligns.iter().enumerate() {
        if let Some(a) = a {
            for (t, &s) in a.iter().enumerate() {
                out[s].push((u, t));
            }
        }
    }
    out
}

fn fit_component<'a>(
    frames: impl Iterator<Item = (&'a [f64], f64)>,
    dim: usize,
    floor: &[f64],
) -> Option<(f64, Gaussian)> {
    let mut w_sum = 0.0;
    let mut s1 = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for (x, w) in frames {
        if w == 0.0 {
            continue;
        }
        w_sum += w;
        for d in 0..dim {
            s1[d] += w * x[d];
            s2[d] += w * x[d] * x[d];
        }
    }
    if w_sum <= 0.0 {
        return None;
    }
    let mean: Vec<f64> = s1.iter().map(|s| s / w_sum).collect();
    let var: Vec<f64> = (0..dim)
        .map(|d| (s2[d] / w_sum - mean[d] * mean[d]).max(floor[d]))
        .collect();
    Some((w_sum, Gaussian::new(mean, var)))
}

fn normalise(parts: Vec<(f64, Gaussian)>) -> GaussianMixture {
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let (w, c): (Vec<f64>, Vec<Gaussian>) = parts.into_iter().map(|(w, g)| (w / total, g)).unzip();
    GaussianMixture::new(w, c)
}

/// Hard-assignment re-estimation of one state's mixture.
fn refit_hard(
    prev: Option<&GaussianMixture>,
    frames: &[&[f64]],
    dim: usize,
    floor: &[f64],
    inner: usize,
) -> Option<GaussianMixture> {
    let mut gmm = match prev {
        Some(g) if g.len() > 1 => g.clone(),
        _ => {
            let (w, g) = fit_component(frames.iter().map(|x| (*x, 1.0)), dim, floor)?;
            return Some(normalise(vec![(w, g)]));
        }
    };
    for _ in 0..inner {
        let labels: Vec<usize> = frames
            .iter()
            .map(|x| {
                let post = gmm.log_posteriors(x);
                let mut best = 0;
                for (i, p) in post.iter().enumerate() {
                    if *p > post[best] {
                        best = i;
                    }
                }
                best
            })
            .collect();
        let parts: Vec<(f64, Gaussian)> = (0..gmm.len())
            .filter_map(|c| {
                let n = labels.iter().filter(|&&l| l == c).count();
                if n < 2 {
                    return None;
                }
                fit_component(
                    frames.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(x, _)| (*x, 1.0)),
                    dim,
                    floor,
                )
            })
            .collect();
        if parts.is_empty() {
            return fit_component(frames.iter().map(|x| (*x, 1.0)), dim, floor)
                .map(|p| normalise(vec![p]));
        }
        gmm = normalise(parts);
    }
    Some(gmm)
}

/// One soft EM step for one state's mixture.
fn refit_soft(gmm: &GaussianMixture, frames: &[&[f64]], dim: usize, floor: &[f64]) -> GaussianMixture {
    let posts: Vec<Vec<f64>> = frames
        .iter()
        .map(|x| gmm.log_posteriors(x).iter().map(|p| p.exp()).collect())
        .collect();
    let parts: Vec<(f64, Gaussian)> = (0..gmm.len())
        .filter_map(|c| fit_component(frames.iter().zip(&posts).map(|(x, p)| (*x, p[c])), dim, floor))
        .collect();
    normalise(parts)
}

fn split_heaviest(gmm: &GaussianMixture) -> GaussianMixture {
    let (heavy, _) = gmm
        .weights
        .iter()
        .enumerate()
        .fold((0, f64::MIN), |acc, (i, &w)| if w > acc.1 { (i, w) } else { acc });
    let mut parts: Vec<(f64, Gaussian)> = Vec::new();
    for (i, (w, c)) in gmm.weights.iter().zip(&gmm.components).enumerate() {
        if i == heavy {
            for sign in [-1.0, 1.0] {
                let mean = c.mean.iter().zip(&c.var).map(|(m, v)| m + sign * 0.2 * v.sqrt()).collect();
                parts.push((w / 2.0, Gaussian::new(mean, c.var.clone())));
            }
        } else {
            parts.push((*w, c.clone()));
        }
    }
    normalise(parts)
}

fn estimate(
    hmm: &mut HmmSet,
    utts: &[TrainUtterance],
    aligns: &Alignments,
    target_mixtures: usize,
) {
    let buckets = bucket(hmm.n_states(), aligns);
    let dim = hmm.dim;
    let floor = hmm.var_floor.clone();
    let prev: Vec<GaussianMixture> = hmm.states.iter().map(|s| s.gmm.clone()).collect();
    let fitted: Vec<Option<GaussianMixture>> = buckets
        .par_iter()
        .enumerate()
        .map(|(s, refs)| {
            let frames: Vec<&[f64]> = refs
                .iter()
                .map(|&(u, t)| utts[u].obs.row(t).to_slice().unwrap())
                .collect();
            let p = (target_mixtures > 1).then_some(&prev[s]);
            refit_hard(p, &frames, dim, &floor, 2)
        })
        .collect();
    for (s, g) in fitted.into_iter().enumerate() {
        if let Some(g) = g {
            hmm.states[s].gmm = g;
        }
    }

    // transition estimates: exits / occupancy
    let mut occ = vec![0usize; hmm.n_states()];
    let mut exits = vec![0usize; hmm.n_states()];
    for a in aligns.iter().flatten() {
        for (t, &s) in a.iter().enumerate() {
            occ[s] += 1;
            if t + 1 == a.len() || a[t + 1] != s {
                exits[s] += 1;
            }
        }
    }
    for s in 0..hmm.n_states() {
        if occ[s] > 0 {
            let p = (exits[s] as f64 / occ[s] as f64).clamp(MIN_P_NEXT, MAX_P_NEXT);
            hmm.states[s].log_next = p.ln();
            hmm.states[s].log_self = (1.0 - p).ln();
        }
    }
}

fn total_loglik(hmm: &HmmSet, utts: &[TrainUtterance], aligns: &Alignments) -> f64 {
    let mut total = 0.0;
    for (u, a) in aligns.iter().enumerate() {
        if let Some(a) = a {
            for (t, &s) in a.iter().enumerate() {
                total += hmm.states[s].gmm.loglik(utts[u].obs.row(t).to_slice().unwrap());
            }
        }
    }
    total
}

/// Trains word models plus a silence model from transcribed utterances.
/// Deterministic: no step depends on thread scheduling.
pub fn train_hmm(
    utts: &[TrainUtterance],
    word_names: &[String],
    cfg: &HmmConfig,
) -> Result<(HmmSet, TrainReport)> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(Error::EmptyInput("no training utterances".into()));
    }
    if utts.iter().any(|u| !u.obs.is_standard_layout()) {
        return Err(Error::ShapeMismatch("training observations must be row-major".into()));
    }
    let dim = utts[0].obs.ncols();
    if dim == 0 || dim % 2 != 0 || utts.iter().any(|u| u.obs.ncols() != dim) {
        return Err(Error::ShapeMismatch("training observations must share an even width".into()));
    }
    let mut seen = vec![0usize; word_names.len()];
    for u in utts {
        for &w in &u.words {
            if w >= word_names.len() {
                return Err(Error::UnknownWord(format!("word index {w}")));
            }
            seen[w] += 1;
        }
    }
    if let Some(w) = seen.iter().position(|&c| c == 0) {
        return Err(Error::EmptyInput(format!("no training data for word `{}`", word_names[w])));
    }

    // global variance → floor
    let mut n = 0.0;
    let mut s1 = vec![0.0; dim];
    let mut s2 = vec![0.0; dim];
    for u in utts {
        for row in u.obs.rows() {
            n += 1.0;
            for d in 0..dim {
                s1[d] += row[d];
                s2[d] += row[d] * row[d];
            }
        }
    }
    let var_floor: Vec<f64> = (0..dim)
        .map(|d| {
            let m = s1[d] / n;
            ((s2[d] / n - m * m) * cfg.var_floor_frac).max(1e-12)
        })
        .collect();

    let mut hmm = skeleton(word_names, cfg, dim, var_floor);
    let mut report = TrainReport::default();
    let mut aligns = uniform_alignments(&hmm, utts);
    report.skipped_utterances = aligns.iter().filter(|a| a.is_none()).count();
    estimate(&mut hmm, utts, &aligns, 1);

    for m in 1..=cfg.mixtures {
        if m > 1 {
            for s in &mut hmm.states {
                s.gmm = split_heaviest(&s.gmm);
            }
        }
        for _ in 0..cfg.passes_per_stage {
            let next = realign(&hmm, utts);
            report.viterbi_passes += 1;
            let unchanged = next == aligns;
            aligns = next;
            if unchanged && m == 1 {
                break;
            }
            estimate(&mut hmm, utts, &aligns, m);
        }
    }
    report.skipped_utterances = aligns.iter().filter(|a| a.is_none()).count();

    let buckets = bucket(hmm.n_states(), &aligns);
    report.em_loglik.push(total_loglik(&hmm, utts, &aligns));
    for _ in 0..cfg.em_passes {
        let floor = hmm.var_floor.clone();
        let updated: Vec<GaussianMixture> = buckets
            .par_iter()
            .zip(hmm.states.par_iter())
            .map(|(refs, st)| {
                if refs.is_empty() {
                    return st.gmm.clone();
                }
                let frames: Vec<&[f64]> = refs
                    .iter()
                    .map(|&(u, t)| utts[u].obs.row(t).to_slice().unwrap())
                    .collect();
                refit_soft(&st.gmm, &frames, dim, &floor)
            })
            .collect();
        for (s, g) in updated.into_iter().enumerate() {
            hmm.states[s].gmm = g;
        }
        report.em_loglik.push(total_loglik(&hmm, utts, &aligns));
    }
    log::info!(
        "hmm training: {} states, {} viterbi passes, {} skipped utterances",
        hmm.n_states(),
        report.viterbi_passes,
        report.skipped_utterances
    );
    Ok((hmm, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdt_hmm::decoder::{viterbi_decode, Grammar};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    /// Utterances of piecewise-constant 4-dim frames: silence near 0, word w
    /// as `segs` plateaus around distinct levels, plus Gaussian jitter.
    fn toy_corpus(n: usize, seed: u64) -> (Vec<TrainUtterance>, Vec<String>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let levels = [[4.0, -2.0], [-3.0, 5.0], [6.0, 6.0], [-5.0, -5.0]];
        let mut utts = Vec::new();
        for i in 0..n {
            let words: Vec<usize> = if i % 3 == 2 { vec![i % 2, (i + 1) % 2] } else { vec![i % 2] };
            let mut rows: Vec<[f64; 2]> = Vec::new();
            let sil = rng.random_range(6..10);
            rows.extend(std::iter::repeat_n([0.0, 0.0], sil));
            for &w in &words {
                for p in 0..2 {
                    let len = rng.random_range(5..9);
                    rows.extend(std::iter::repeat_n(levels[2 * w + p], len));
                }
            }
            rows.extend(std::iter::repeat_n([0.0, 0.0], sil));
            let t_count = rows.len();
            let obs = Array2::from_shape_fn((t_count, 4), |(t, d)| {
                let j: f64 = rng.sample(StandardNormal);
                if d < 2 {
                    rows[t][d] + 0.3 * j
                } else {
                    0.3 * j
                }
            });
            utts.push(TrainUtterance { obs, words });
        }
        (utts, vec!["a".into(), "b".into()])
    }

    fn cfg(mixtures: usize) -> HmmConfig {
        HmmConfig {
            states_per_word: 2,
            silence_states: 1,
            mixtures,
            ..HmmConfig::default()
        }
    }

    #[test]
    fn learns_and_recognises_toy_words() {
        let (utts, names) = toy_corpus(24, 5);
        let (hmm, report) = train_hmm(&utts, &names, &cfg(2)).unwrap();
        assert_eq!(report.skipped_utterances, 0);
        assert!(report.em_loglik.windows(2).all(|w| w[1] >= w[0] - 1e-6 * w[0].abs()));
        let (test, _) = toy_corpus(12, 99);
        for u in &test {
            let mask = BinaryMask::all_reliable(u.obs.nrows(), 2);
            let d = viterbi_decode(&hmm, &u.obs, &mask, &Grammar::WordLoop, 0.0, Default::default()).unwrap();
            assert_eq!(d.words, u.words);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (utts, names) = toy_corpus(12, 8);
        let a = train_hmm(&utts, &names, &cfg(3)).unwrap();
        let b = train_hmm(&utts, &names, &cfg(3)).unwrap();
        assert_eq!(a.0.to_bytes(), b.0.to_bytes());
        assert_eq!(a.1, b.1);
        assert_eq!(HmmSet::from_bytes(&a.0.to_bytes()).unwrap().to_bytes(), a.0.to_bytes());
    }

    #[test]
    fn single_mixture_means_are_segment_means() {
        let (utts, names) = toy_corpus(1, 3);
        let repeated = vec![utts[0].clone(); 4];
        let (hmm, _) = train_hmm(&repeated, &names[..1], &cfg(1)).unwrap();
        let u = &repeated[0];
        let mask = BinaryMask::all_reliable(u.obs.nrows(), 2);
        let a = forced_align(&hmm, &u.obs, &mask, &u.words, Default::default()).unwrap().alignment.0;
        for s in 0..hmm.n_states() {
            let rows: Vec<usize> = (0..a.len()).filter(|&t| a[t] == s).collect();
            assert!(!rows.is_empty());
            for d in 0..4 {
                let m = rows.iter().map(|&t| u.obs[[t, d]]).sum::<f64>() / rows.len() as f64;
                assert!((hmm.states[s].gmm.components[0].mean[d] - m).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn rejects_bad_training_sets() {
        let (utts, names) = toy_corpus(4, 1);
        assert!(train_hmm(&[], &names, &cfg(1)).is_err());
        let only_a: Vec<TrainUtterance> = utts.iter().filter(|u| u.words == vec![0]).cloned().collect();
        assert!(train_hmm(&only_a, &names, &cfg(1)).is_err());
        let mut bad = utts.clone();
        bad[0].words = vec![7];
        assert!(train_hmm(&bad, &names, &cfg(1)).is_err());
    }
}
