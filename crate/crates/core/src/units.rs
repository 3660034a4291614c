//! Unit-sequence algebra: run-length encoding, repeat removal and edit
//! distance based error rates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A discrete unit ID (k-means cluster index).
pub type Unit = u32;

/// One run of identical units; `count` is the duration in frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Run {
    pub unit: Unit,
    pub count: u32,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum UnitsError {
    #[error("run {index} has zero count")]
    ZeroCount { index: usize },
    #[error("reference sequence is empty")]
    EmptyReference,
}

pub fn rle_encode(s: &[Unit]) -> Vec<Run> {
    let mut runs: Vec<Run> = Vec::new();
    for &u in s {
        match runs.last_mut() {
            Some(r) if r.unit == u => r.count += 1,
            _ => runs.push(Run { unit: u, count: 1 }),
        }
    }
    runs
}

/// Expands runs back to frame level.
///
/// Adjacent runs with the same unit are accepted and simply concatenate.
pub fn rle_expand(runs: &[Run]) -> Result<Vec<Unit>, UnitsError> {
    if let Some(index) = runs.iter().position(|r| r.count == 0) {
        return Err(UnitsError::ZeroCount { index });
    }
    let total: usize = runs.iter().map(|r| r.count as usize).sum();
    let mut out = Vec::with_capacity(total);
    for r in runs {
        out.extend(std::iter::repeat_n(r.unit, r.count as usize));
    }
    Ok(out)
}

/// Removes adjacent repeats.
pub fn dedup(s: &[Unit]) -> Vec<Unit> {
    let mut out = s.to_vec();
    out.dedup();
    out
}

/// Per-run durations in frames.
pub fn durations(s: &[Unit]) -> Vec<u32> {
    rle_encode(s).into_iter().map(|r| r.count).collect()
}

/// Unit-cost Levenshtein distance over any comparable symbols, using a
/// single rolling row sized by the shorter input.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if short.is_empty() {
        return long.len();
    }
    let mut row: Vec<usize> = (0..=short.len()).collect();
    for (i, x) in long.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, y) in short.iter().enumerate() {
            let sub = diag + usize::from(x != y);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[short.len()]
}

/// Unit error rate in percent: `100 * lev(hyp, ref) / len(ref)`.
pub fn uer(hyp: &[Unit], reference: &[Unit]) -> Result<f64, UnitsError> {
    if reference.is_empty() {
        return Err(UnitsError::EmptyReference);
    }
    Ok(100.0 * levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Running numerator/denominator for micro-averaged error rates.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorCounts {
    pub errors: usize,
    pub ref_len: usize,
}

impl ErrorCounts {
    pub fn add(&mut self, errors: usize, ref_len: usize) {
        self.errors += errors;
        self.ref_len += ref_len;
    }

    pub fn rate(&self) -> Option<f64> {
        (self.ref_len > 0).then(|| 100.0 * self.errors as f64 / self.ref_len as f64)
    }
}

/// Corpus UER micro-averaged over `(hyp, ref)` pairs.
pub fn corpus_uer<'a, I>(pairs: I) -> Result<f64, UnitsError>
where
    I: IntoIterator<Item = (&'a [Unit], &'a [Unit])>,
{
    let mut c = ErrorCounts::default();
    for (h, r) in pairs {
        if r.is_empty() {
            return Err(UnitsError::EmptyReference);
        }
        c.add(levenshtein(h, r), r.len());
    }
    c.rate().ok_or(UnitsError::EmptyReference)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn runs(v: &[(u32, u32)]) -> Vec<Run> {
        v.iter().map(|&(unit, count)| Run { unit, count }).collect()
    }

    #[test]
    fn rle_examples() {
        assert_eq!(
            rle_encode(&[5, 5, 5, 2, 2, 9]),
            runs(&[(5, 3), (2, 2), (9, 1)])
        );
        assert_eq!(rle_encode(&[7]), runs(&[(7, 1)]));
        assert!(rle_encode(&[]).is_empty());
        assert_eq!(
            rle_expand(&runs(&[(5, 3), (2, 2)])).unwrap(),
            vec![5, 5, 5, 2, 2]
        );
        assert!(rle_expand(&[]).unwrap().is_empty());
        assert_eq!(
            rle_expand(&runs(&[(4, 0)])),
            Err(UnitsError::ZeroCount { index: 0 })
        );
    }

    #[test]
    fn dedup_examples() {
        assert_eq!(dedup(&[5, 5, 5, 2, 2, 9]), vec![5, 2, 9]);
        assert_eq!(dedup(&[1, 2, 1, 2]), vec![1, 2, 1, 2]);
        assert_eq!(durations(&[5, 5, 5, 2, 2, 9]), vec![3, 2, 1]);
    }

    #[test]
    fn levenshtein_examples() {
        assert_eq!(levenshtein::<u32>(&[1, 2, 3], &[1, 2, 3]), 0);
        assert_eq!(levenshtein::<u32>(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein::<u32>(&[], &[4, 5]), 2);
        assert_eq!(levenshtein(b"kitten", b"sitting"), 3);
    }

    #[test]
    fn uer_examples() {
        assert_eq!(uer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert_eq!(uer(&[1, 2, 3], &[1, 3]).unwrap(), 50.0);
        assert_eq!(uer(&[1], &[]), Err(UnitsError::EmptyReference));
        // insertions can push the rate past 100
        assert_eq!(uer(&[1, 2, 3, 4], &[9]).unwrap(), 400.0);
    }

    #[test]
    fn micro_average() {
        let a: (&[u32], &[u32]) = (&[1, 9], &[1, 2]);
        let b: (&[u32], &[u32]) = (&[4, 5, 6], &[4, 5, 6]);
        assert_eq!(corpus_uer([a, b]).unwrap(), 20.0);
    }

    fn seq(max_len: usize, alphabet: u32) -> impl Strategy<Value = Vec<u32>> {
        proptest::collection::vec(0..alphabet, 0..max_len)
    }

    proptest! {
        #[test]
        fn rle_round_trip(s in seq(60, 5)) {
            let r = rle_encode(&s);
            prop_assert_eq!(rle_expand(&r).unwrap(), s.clone());
            prop_assert!(r.windows(2).all(|w| w[0].unit != w[1].unit));
            prop_assert_eq!(rle_encode(&rle_expand(&r).unwrap()), r.clone());
            let ids: Vec<u32> = r.iter().map(|x| x.unit).collect();
            prop_assert_eq!(dedup(&s), ids);
        }

        #[test]
        fn dedup_idempotent(s in seq(60, 4)) {
            let d = dedup(&s);
            prop_assert!(d.len() <= s.len());
            prop_assert_eq!(dedup(&d), d.clone());
            if !d.is_empty() {
                prop_assert_eq!(uer(&d, &d).unwrap(), 0.0);
            }
        }

        #[test]
        fn levenshtein_metric(a in seq(20, 4), b in seq(20, 4), c in seq(20, 4)) {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
            prop_assert!(ab >= a.len().abs_diff(b.len()));
            prop_assert!(ab <= a.len().max(b.len()));
        }
    }
}
