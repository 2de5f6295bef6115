//! Decoding graphs and exact Viterbi search.

use std::collections::VecDeque;

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

use super::gmm::DeltaMarginalization;
use super::model::HmmSet;

#[derive(Debug, Clone, PartialEq)]
pub struct Arc {
    pub from: usize,
    pub logp: f64,
    /// Set when taking this arc starts a new word.
    pub enters_word: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    /// Global HMM state emitted at this node.
    pub state: usize,
    pub preds: Vec<Arc>,
    pub start: Option<(f64, Option<usize>)>,
    pub exit: Option<f64>,
}

/// A finite-state search graph whose nodes emit HMM states.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DecodeGraph {
    pub nodes: Vec<Node>,
}

impl DecodeGraph {
    pub fn add_node(&mut self, state: usize) -> usize {
        self.nodes.push(Node {
            state,
            preds: Vec::new(),
            start: None,
            exit: None,
        });
        self.nodes.len() - 1
    }

    pub fn add_arc(&mut self, from: usize, to: usize, logp: f64, enters_word: Option<usize>) {
        self.nodes[to].preds.push(Arc {
            from,
            logp,
            enters_word,
        });
    }

    /// Orders predecessor lists by (state, node) so that the first maximum
    /// found is the tie-break winner.
    fn finalize(&mut self) {
        let states: Vec<usize> = self.nodes.iter().map(|n| n.state).collect();
        for n in &mut self.nodes {
            n.preds.sort_by_key(|a| (states[a.from], a.from));
        }
    }

    pub fn n_states(&self) -> usize {
        self.nodes.iter().map(|n| n.state + 1).max().unwrap_or(0)
    }

    /// Fewest frames on any start-to-exit path.
    pub fn min_path_len(&self) -> Option<usize> {
        let n = self.nodes.len();
        let mut succ = vec![Vec::new(); n];
        for (to, node) in self.nodes.iter().enumerate() {
            for a in &node.preds {
                succ[a.from].push(to);
            }
        }
        let mut dist = vec![usize::MAX; n];
        let mut queue = VecDeque::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if node.start.is_some() {
                dist[i] = 1;
                queue.push_back(i);
            }
        }
        while let Some(u) = queue.pop_front() {
            for &v in &succ[u] {
                if dist[v] == usize::MAX {
                    dist[v] = dist[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, nd)| nd.exit.is_some())
            .map(|(i, _)| dist[i])
            .filter(|&d| d != usize::MAX)
            .min()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ViterbiPath {
    pub nodes: Vec<usize>,
    /// Global state per frame.
    pub states: Vec<usize>,
    pub words: Vec<usize>,
    /// Frame at which each word in `words` starts.
    pub word_starts: Vec<usize>,
    pub score: f64,
}

fn better(a: f64, b: f64) -> bool {
    a > b
}

/// Max-product search over `graph` for `t_count` frames. `emit(t, s)` is
/// called exactly once per frame for every state the graph uses.
/// Ties go to the lower (state, node) pair.
pub fn viterbi(
    graph: &DecodeGraph,
    t_count: usize,
    mut emit: impl FnMut(usize, usize) -> f64,
) -> Result<ViterbiPath> {
    if t_count == 0 {
        return Err(Error::EmptyInput("zero frames to decode".into()));
    }
    let n = graph.nodes.len();
    let n_states = graph.n_states();
    let mut used = vec![false; n_states];
    graph.nodes.iter().for_each(|nd| used[nd.state] = true);
    let mut emissions = vec![f64::NEG_INFINITY; n_states];

    let mut prev = vec![f64::NEG_INFINITY; n];
    let mut cur = vec![f64::NEG_INFINITY; n];
    // backpointer: index into preds, or u32::MAX for a start arc
    let mut back = Array2::<u32>::from_elem((t_count, n), u32::MAX);

    for t in 0..t_count {
        for (s, u) in used.iter().enumerate() {
            if *u {
                emissions[s] = emit(t, s);
            }
        }
        for (j, node) in graph.nodes.iter().enumerate() {
            let mut best = f64::NEG_INFINITY;
            let mut arg = u32::MAX;
            if t == 0 {
                if let Some((lp, _)) = node.start {
                    best = lp;
                }
            } else {
                for (ai, a) in node.preds.iter().enumerate() {
                    let v = prev[a.from] + a.logp;
                    if better(v, best) {
                        best = v;
                        arg = ai as u32;
                    }
                }
            }
            cur[j] = best + emissions[node.state];
            back[[t, j]] = arg;
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut best = f64::NEG_INFINITY;
    let mut best_node = None;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| (graph.nodes[i].state, i));
    for i in order {
        if let Some(lp) = graph.nodes[i].exit {
            let v = prev[i] + lp;
            if better(v, best) {
                best = v;
                best_node = Some(i);
            }
        }
    }
    let Some(mut j) = best_node else {
        return Err(Error::InfeasibleAlignment {
            frames: t_count,
            min_frames: graph.min_path_len().unwrap_or(usize::MAX),
        });
    };

    let mut nodes = vec![0; t_count];
    let mut entries: Vec<(usize, usize)> = Vec::new();
    for t in (0..t_count).rev() {
        nodes[t] = j;
        let node = &graph.nodes[j];
        if t == 0 {
            if let Some((_, Some(w))) = node.start {
                entries.push((0, w));
            }
        } else {
            let arc = &node.preds[back[[t, j]] as usize];
            if let Some(w) = arc.enters_word {
                entries.push((t, w));
            }
            j = arc.from;
        }
    }
    entries.reverse();
    Ok(ViterbiPath {
        states: nodes.iter().map(|&i| graph.nodes[i].state).collect(),
        nodes,
        words: entries.iter().map(|e| e.1).collect(),
        word_starts: entries.iter().map(|e| e.0).collect(),
        score: best,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Grammar {
    /// Any number of words with optional silence before, between and after.
    WordLoop,
    /// Exactly one given word, optional surrounding silence.
    SingleWord(usize),
    /// The given word sequence, optional silences (forced alignment).
    Sequence(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Seg {
    Sil,
    Word(usize),
}

/// Branching log-probabilities shared by every grammar, so that a path of a
/// constrained graph scores the same as in the word loop.
struct Branching {
    from_start: f64,
    after_word: f64,
    after_sil: f64,
    wip: f64,
}

impl Branching {
    fn new(n_words: usize, wip: f64) -> Self {
        let n = n_words as f64;
        Self {
            from_start: -(n + 1.0).ln(),
            after_word: -(n + 2.0).ln(),
            after_sil: -(n + 1.0).ln(),
            wip,
        }
    }

    fn start(&self, to: Seg) -> f64 {
        self.from_start + self.entry_penalty(to)
    }

    fn between(&self, from: Seg, to: Seg) -> f64 {
        let base = match from {
            Seg::Sil => self.after_sil,
            Seg::Word(_) => self.after_word,
        };
        base + self.entry_penalty(to)
    }

    fn end(&self, from: Seg) -> f64 {
        match from {
            Seg::Sil => self.after_sil,
            Seg::Word(_) => self.after_word,
        }
    }

    fn entry_penalty(&self, to: Seg) -> f64 {
        match to {
            Seg::Word(_) => self.wip,
            Seg::Sil => 0.0,
        }
    }
}

fn word_of(seg: Seg) -> Option<usize> {
    match seg {
        Seg::Word(w) => Some(w),
        Seg::Sil => None,
    }
}

fn seg_states(hmm: &HmmSet, seg: Seg) -> std::ops::Range<usize> {
    match seg {
        Seg::Sil => hmm.silence_states(),
        Seg::Word(w) => hmm.word_states(w),
    }
}

/// Adds the internal left-to-right chain of a segment; returns its node ids.
fn add_chain(g: &mut DecodeGraph, hmm: &HmmSet, seg: Seg) -> Vec<usize> {
    let ids: Vec<usize> = seg_states(hmm, seg).map(|s| g.add_node(s)).collect();
    for (i, &id) in ids.iter().enumerate() {
        let s = g.nodes[id].state;
        g.add_arc(id, id, hmm.states[s].log_self, None);
        if i > 0 {
            let p = ids[i - 1];
            let ps = g.nodes[p].state;
            g.add_arc(p, id, hmm.states[ps].log_next, None);
        }
    }
    ids
}

pub fn build_graph(hmm: &HmmSet, grammar: &Grammar, wip: f64) -> Result<DecodeGraph> {
    for &w in match grammar {
        Grammar::WordLoop => &[][..],
        Grammar::SingleWord(w) => std::slice::from_ref(w),
        Grammar::Sequence(ws) => ws,
    } {
        if w >= hmm.n_words() {
            return Err(Error::UnknownWord(format!("word index {w}")));
        }
    }
    let br = Branching::new(hmm.n_words(), wip);
    let mut g = DecodeGraph::default();
    match grammar {
        Grammar::WordLoop => {
            let mut segs: Vec<(Seg, Vec<usize>)> = (0..hmm.n_words())
                .map(|w| (Seg::Word(w), add_chain(&mut g, hmm, Seg::Word(w))))
                .collect();
            segs.push((Seg::Sil, add_chain(&mut g, hmm, Seg::Sil)));
            for (seg, ids) in &segs {
                let first = ids[0];
                let last = *ids.last().unwrap();
                g.nodes[first].start = Some((br.start(*seg), word_of(*seg)));
                let last_state = g.nodes[last].state;
                g.nodes[last].exit = Some(hmm.states[last_state].log_next + br.end(*seg));
            }
            for (from_seg, from_ids) in &segs {
                let last = *from_ids.last().unwrap();
                let out = hmm.states[g.nodes[last].state].log_next;
                for (to_seg, to_ids) in &segs {
                    if *from_seg == Seg::Sil && *to_seg == Seg::Sil {
                        continue;
                    }
                    g.add_arc(last, to_ids[0], out + br.between(*from_seg, *to_seg), word_of(*to_seg));
                }
            }
        }
        Grammar::SingleWord(w) => return build_graph(hmm, &Grammar::Sequence(vec![*w]), wip),
        Grammar::Sequence(words) => {
            if words.is_empty() {
                return Err(Error::EmptyInput("empty word sequence".into()));
            }
            let mut plan = vec![(Seg::Sil, true)];
            for (i, &w) in words.iter().enumerate() {
                if i > 0 {
                    plan.push((Seg::Sil, true));
                }
                plan.push((Seg::Word(w), false));
            }
            plan.push((Seg::Sil, true));
            let chains: Vec<Vec<usize>> = plan.iter().map(|(s, _)| add_chain(&mut g, hmm, *s)).collect();
            for j in 0..plan.len() {
                if plan[..j].iter().all(|p| p.1) {
                    let first = chains[j][0];
                    g.nodes[first].start = Some((br.start(plan[j].0), word_of(plan[j].0)));
                }
                if plan[j + 1..].iter().all(|p| p.1) {
                    let last = *chains[j].last().unwrap();
                    let ls = g.nodes[last].state;
                    g.nodes[last].exit = Some(hmm.states[ls].log_next + br.end(plan[j].0));
                }
                for i in 0..j {
                    if !plan[i + 1..j].iter().all(|p| p.1) {
                        continue;
                    }
                    // consecutive silences never occur in the word loop
                    if plan[i].0 == Seg::Sil && plan[j].0 == Seg::Sil {
                        continue;
                    }
                    let last = *chains[i].last().unwrap();
                    let out = hmm.states[g.nodes[last].state].log_next;
                    g.add_arc(
                        last,
                        chains[j][0],
                        out + br.between(plan[i].0, plan[j].0),
                        word_of(plan[j].0),
                    );
                }
            }
        }
    }
    g.finalize();
    Ok(g)
}

/// Static mask and delta mask side by side, T × 2K.
pub fn stack_mask(mask: &BinaryMask) -> Result<Array2<bool>> {
    let delta = mask.delta_or_err()?;
    let (t, k) = mask.values.dim();
    Ok(Array2::from_shape_fn((t, 2 * k), |(r, c)| {
        if c < k {
            mask.values[[r, c]]
        } else {
            delta[[r, c - k]]
        }
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoded {
    pub words: Vec<usize>,
    pub alignment: StateAlignment,
    pub word_starts: Vec<usize>,
    pub score: f64,
}

/// Per-frame global state indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateAlignment(pub Vec<usize>);

impl StateAlignment {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// `frame<TAB>state` lines.
    pub fn to_text(&self) -> String {
        self.0
            .iter()
            .enumerate()
            .map(|(t, s)| format!("{t}\t{s}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut out = Vec::new();
        for (n, line) in text.lines().filter(|l| !l.is_empty()).enumerate() {
            let (t, s) = line
                .split_once('\t')
                .ok_or_else(|| Error::Format(format!("alignment line `{line}`")))?;
            let t: usize = t.parse().map_err(|_| Error::Format(format!("alignment line `{line}`")))?;
            if t != n {
                return Err(Error::Format(format!("alignment frame {t} out of order")));
            }
            out.push(s.parse().map_err(|_| Error::Format(format!("alignment line `{line}`")))?);
        }
        Ok(Self(out))
    }

    /// Within each visit of a word, local indices start at 0, never decrease
    /// and grow by at most one per frame.
    pub fn is_monotone(&self, hmm: &HmmSet) -> bool {
        use super::model::StateOwner;
        let mut prev: Option<StateOwner> = None;
        for &s in &self.0 {
            let cur = hmm.owner(s);
            let ok = match (prev, cur) {
                (Some(StateOwner::Word { word: a, local: i }), StateOwner::Word { word: b, local: j })
                    if a == b =>
                {
                    j == i || j == i + 1 || (j == 0 && i + 1 == hmm.states_per_word[a])
                }
                (Some(StateOwner::Silence { local: i }), StateOwner::Silence { local: j }) => {
                    j == i || j == i + 1
                }
                (_, StateOwner::Word { local, .. }) | (_, StateOwner::Silence { local }) => local == 0,
            };
            if !ok {
                return false;
            }
            prev = Some(cur);
        }
        true
    }
}

/// Viterbi with an arbitrary emission function over an HMM grammar.
pub fn decode_with(
    hmm: &HmmSet,
    grammar: &Grammar,
    wip: f64,
    t_count: usize,
    emit: impl FnMut(usize, usize) -> f64,
) -> Result<Decoded> {
    let g = build_graph(hmm, grammar, wip)?;
    let p = viterbi(&g, t_count, emit)?;
    Ok(Decoded {
        words: p.words,
        alignment: StateAlignment(p.states),
        word_starts: p.word_starts,
        score: p.score,
    })
}

fn check_obs(hmm: &HmmSet, obs: &Array2<f64>, mask: &Array2<bool>) -> Result<()> {
    if obs.ncols() != hmm.dim || mask.dim() != obs.dim() {
        return Err(Error::ShapeMismatch(format!(
            "obs {:?}, mask {:?}, model dim {}",
            obs.dim(),
            mask.dim(),
            hmm.dim
        )));
    }
    if obs.nrows() == 0 {
        return Err(Error::EmptyInput("zero frames to decode".into()));
    }
    Ok(())
}

/// Missing-data Viterbi decode of `obs` (T × 2K) under a static+delta mask.
pub fn viterbi_decode(
    hmm: &HmmSet,
    obs: &Array2<f64>,
    mask: &BinaryMask,
    grammar: &Grammar,
    wip: f64,
    policy: DeltaMarginalization,
) -> Result<Decoded> {
    let stacked = stack_mask(mask)?;
    check_obs(hmm, obs, &stacked)?;
    let obs = obs.as_standard_layout();
    decode_with(hmm, grammar, wip, obs.nrows(), |t, s| {
        hmm.emission(
            s,
            obs.row(t).as_slice().unwrap(),
            stacked.row(t).as_slice().unwrap(),
            policy,
        )
    })
}

/// Viterbi restricted to the transcription `words`.
pub fn forced_align(
    hmm: &HmmSet,
    obs: &Array2<f64>,
    mask: &BinaryMask,
    words: &[usize],
    policy: DeltaMarginalization,
) -> Result<Decoded> {
    if words.is_empty() {
        return Err(Error::EmptyInput("forced alignment needs a transcription".into()));
    }
    viterbi_decode(hmm, obs, mask, &Grammar::Sequence(words.to_vec()), 0.0, policy)
}

/// Supplies, for each state, the mask that state's own estimators predict.
pub trait StateMaskSource {
    fn frames(&self) -> usize;
    fn state_mask(&self, state: usize) -> Result<BinaryMask>;
}

#[derive(Debug, Clone, PartialEq)]
pub struct StateConditionedDecode {
    pub decoded: Decoded,
    /// Number of mask vectors evaluated (frames × states).
    pub mask_evaluations: usize,
}

/// Viterbi in which state `s` at frame `t` is scored with the mask predicted
/// by state `s`'s own estimators.
pub fn decode_state_conditioned(
    hmm: &HmmSet,
    obs: &Array2<f64>,
    masks: &dyn StateMaskSource,
    grammar: &Grammar,
    wip: f64,
    policy: DeltaMarginalization,
) -> Result<StateConditionedDecode> {
    let t_count = obs.nrows();
    if masks.frames() != t_count {
        return Err(Error::ShapeMismatch(format!(
            "{} mask frames vs {t_count} observation frames",
            masks.frames()
        )));
    }
    let per_state: Vec<Array2<bool>> = (0..hmm.n_states())
        .map(|s| masks.state_mask(s).and_then(|m| stack_mask(&m)))
        .collect::<Result<_>>()?;
    for m in &per_state {
        check_obs(hmm, obs, m)?;
    }
    let obs = obs.as_standard_layout();
    let decoded = decode_with(hmm, grammar, wip, t_count, |t, s| {
        hmm.emission(
            s,
            obs.row(t).as_slice().unwrap(),
            per_state[s].row(t).as_slice().unwrap(),
            policy,
        )
    })?;
    Ok(StateConditionedDecode {
        decoded,
        mask_evaluations: t_count * hmm.n_states(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Fully connected toy graph: node i emits state i.
    fn toy(n: usize, rng: &mut ChaCha8Rng) -> DecodeGraph {
        let mut g = DecodeGraph::default();
        for i in 0..n {
            g.add_node(i);
        }
        for to in 0..n {
            for from in 0..n {
                if rng.random_bool(0.8) {
                    g.add_arc(from, to, rng.random_range(-3.0..0.0), None);
                }
            }
            g.nodes[to].start = rng.random_bool(0.8).then(|| (rng.random_range(-2.0..0.0), None));
            g.nodes[to].exit = rng.random_bool(0.8).then(|| rng.random_range(-2.0..0.0));
        }
        g.finalize();
        g
    }

    fn brute(g: &DecodeGraph, em: &Array2<f64>) -> Option<(Vec<usize>, f64)> {
        let n = g.nodes.len();
        let t_count = em.nrows();
        let mut best: Option<(Vec<usize>, f64)> = None;
        let total = n.pow(t_count as u32);
        for code in 0..total {
            let path: Vec<usize> = (0..t_count).map(|t| code / n.pow(t as u32) % n).collect();
            let Some((lp, _)) = g.nodes[path[0]].start else { continue };
            let mut s = lp + em[[0, path[0]]];
            let mut ok = true;
            for t in 1..t_count {
                match g.nodes[path[t]].preds.iter().find(|a| a.from == path[t - 1]) {
                    Some(a) => s = s + a.logp + em[[t, path[t]]],
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            let Some(x) = g.nodes[path[t_count - 1]].exit else { continue };
            if !ok {
                continue;
            }
            s += x;
            if best.as_ref().is_none_or(|b| s > b.1) {
                best = Some((path, s));
            }
        }
        best
    }

    #[test]
    fn two_state_toy_matches_enumeration() {
        let mut g = DecodeGraph::default();
        g.add_node(0);
        g.add_node(1);
        g.add_arc(0, 0, 0.7f64.ln(), None);
        g.add_arc(0, 1, 0.3f64.ln(), None);
        g.add_arc(1, 1, 0.9f64.ln(), None);
        g.add_arc(1, 0, 0.1f64.ln(), None);
        g.nodes[0].start = Some((0.6f64.ln(), None));
        g.nodes[1].start = Some((0.4f64.ln(), None));
        g.nodes[0].exit = Some(0.0);
        g.nodes[1].exit = Some(0.0);
        g.finalize();
        let em = ndarray::array![[-1.0, -2.0], [-3.0, -0.5]];
        let p = viterbi(&g, 2, |t, s| em[[t, s]]).unwrap();
        let (path, score) = brute(&g, &em).unwrap();
        assert_eq!(p.nodes, path);
        assert_eq!(p.score, score);
        assert_eq!(p.nodes, vec![0, 1]);
    }

    #[test]
    fn random_toys_match_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..100 {
            let n = rng.random_range(1..=4);
            let t_count = rng.random_range(1..=6);
            let g = toy(n, &mut rng);
            let em = Array2::from_shape_fn((t_count, n), |_| rng.random_range(-5.0..0.0));
            match (viterbi(&g, t_count, |t, s| em[[t, s]]), brute(&g, &em)) {
                (Ok(p), Some((path, score))) => {
                    assert_eq!(p.nodes, path);
                    assert_eq!(p.score, score);
                }
                (Err(Error::InfeasibleAlignment { .. }), None) => {}
                (a, b) => panic!("disagreement: {a:?} vs {b:?}"),
            }
        }
    }

    #[test]
    fn ties_prefer_lower_state() {
        let mut g = DecodeGraph::default();
        for i in 0..3 {
            g.add_node(i);
            g.nodes[i].start = Some((0.0, None));
            g.nodes[i].exit = Some(0.0);
        }
        g.finalize();
        let p = viterbi(&g, 1, |_, _| -1.0).unwrap();
        assert_eq!(p.states, vec![0]);
    }

    #[test]
    fn zero_frames_rejected() {
        let mut g = DecodeGraph::default();
        g.add_node(0);
        assert!(matches!(viterbi(&g, 0, |_, _| 0.0), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn alignment_text_roundtrip() {
        let a = StateAlignment(vec![4, 4, 5, 0]);
        assert_eq!(a.to_text(), "0\t4\n1\t4\n2\t5\n3\t0\n");
        assert_eq!(StateAlignment::parse(&a.to_text()).unwrap(), a);
        assert!(StateAlignment::parse("1\t4\n").is_err());
    }
}
