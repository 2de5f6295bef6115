use crate::error::{Error, Result};

/// Reference length and edit counts from a minimum-edit word alignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EditCounts {
    pub n: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    /// `100·(N − S − D − I)/N`.
    pub fn accuracy(&self) -> f64 {
        100.0 * (self.n as f64 - self.errors() as f64) / self.n as f64
    }

    pub fn add(&mut self, o: &EditCounts) {
        self.n += o.n;
        self.substitutions += o.substitutions;
        self.deletions += o.deletions;
        self.insertions += o.insertions;
    }
}

/// Levenshtein alignment with unit costs; among equal-cost alignments
/// substitutions are preferred, then deletions.
pub fn align_words<T: PartialEq>(reference: &[T], hyp: &[T]) -> EditCounts {
    let (n, m) = (reference.len(), hyp.len());
    // (cost, S, D, I)
    let mut dp = vec![vec![(0usize, 0usize, 0usize, 0usize); m + 1]; n + 1];
    for i in 1..=n {
        dp[i][0] = (i, 0, i, 0);
    }
    for j in 1..=m {
        dp[0][j] = (j, 0, 0, j);
    }
    for i in 1..=n {
        for j in 1..=m {
            let same = reference[i - 1] == hyp[j - 1];
            let d = dp[i - 1][j - 1];
            let diag = (d.0 + !same as usize, d.1 + !same as usize, d.2, d.3);
            let u = dp[i - 1][j];
            let del = (u.0 + 1, u.1, u.2 + 1, u.3);
            let l = dp[i][j - 1];
            let ins = (l.0 + 1, l.1, l.2, l.3 + 1);
            let mut best = diag;
            if del.0 < best.0 {
                best = del;
            }
            if ins.0 < best.0 {
                best = ins;
            }
            dp[i][j] = best;
        }
    }
    let (_, s, d, i) = dp[n][m];
    EditCounts {
        n,
        substitutions: s,
        deletions: d,
        insertions: i,
    }
}

/// Aggregated word accuracy over parallel reference/hypothesis lists.
pub fn word_accuracy<T: PartialEq>(refs: &[Vec<T>], hyps: &[Vec<T>]) -> Result<EditCounts> {
    if refs.len() != hyps.len() {
        return Err(Error::LengthMismatch(refs.len(), hyps.len()));
    }
    let mut total = EditCounts::default();
    for (r, h) in refs.iter().zip(hyps) {
        total.add(&align_words(r, h));
    }
    if total.n == 0 {
        return Err(Error::EmptyInput("reference set has no words".into()));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn w(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn examples() {
        let r = vec![w("a b c"), w("d")];
        assert_eq!(word_accuracy(&r, &r).unwrap().accuracy(), 100.0);
        let e = word_accuracy(&[w("a b c d")], &[w("a x c d")]).unwrap();
        assert_eq!((e.substitutions, e.accuracy()), (1, 75.0));
        let e = word_accuracy(&[w("a b")], &[w("a b c")]).unwrap();
        assert_eq!((e.insertions, e.accuracy()), (1, 50.0));
        let e = word_accuracy(&[w("a b c")], &[w("b")]).unwrap();
        assert_eq!((e.deletions, e.errors()), (2, 2));
    }

    #[test]
    fn errors() {
        assert!(word_accuracy::<&str>(&[], &[]).is_err());
        assert!(word_accuracy(&[w("a")], &[]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn permutation_invariant(pairs in proptest::collection::vec(
            (proptest::collection::vec(0u8..4, 1..6), proptest::collection::vec(0u8..4, 0..6)), 1..8),
            rot in 0usize..8)
        {
            let refs: Vec<Vec<u8>> = pairs.iter().map(|p| p.0.clone()).collect();
            let hyps: Vec<Vec<u8>> = pairs.iter().map(|p| p.1.clone()).collect();
            let a = word_accuracy(&refs, &hyps).unwrap();
            let k = rot % refs.len();
            let mut r2 = refs.clone();
            let mut h2 = hyps.clone();
            r2.rotate_left(k);
            h2.rotate_left(k);
            let b = word_accuracy(&r2, &h2).unwrap();
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!(a.accuracy() <= 100.0);
        }
    }
}
