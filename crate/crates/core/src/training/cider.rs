//! CIDEr-D: clipped TF-IDF n-gram cosine (n = 1..4) with a gaussian length
//! penalty, averaged over references and scaled by 10.

use std::collections::{BTreeMap, BTreeSet};

pub const MAX_N: usize = 4;
pub const DEFAULT_SIGMA: f64 = 6.0;

type Ngram = Vec<usize>;

fn ngram_counts(tokens: &[usize]) -> [BTreeMap<Ngram, f64>; MAX_N] {
    let mut out: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
    for (n, counts) in out.iter_mut().enumerate() {
        for w in tokens.windows(n + 1) {
            *counts.entry(w.to_vec()).or_default() += 1.0;
        }
    }
    out
}

/// Document frequencies over a reference corpus, one document per image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CiderIndex {
    df: BTreeMap<Ngram, f64>,
    num_images: usize,
}

struct TfIdf {
    vec: [BTreeMap<Ngram, f64>; MAX_N],
    norm: [f64; MAX_N],
    len: usize,
}

impl CiderIndex {
    /// `corpus[i]` holds the reference captions of image `i`.
    pub fn new(corpus: &[Vec<Vec<usize>>]) -> Self {
        let mut df: BTreeMap<Ngram, f64> = BTreeMap::new();
        for refs in corpus {
            let mut seen = BTreeSet::new();
            for r in refs {
                for counts in ngram_counts(r) {
                    seen.extend(counts.into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_default() += 1.0;
            }
        }
        Self {
            df,
            num_images: corpus.len(),
        }
    }

    pub fn num_images(&self) -> usize {
        self.num_images
    }

    pub fn df(&self, ngram: &[usize]) -> f64 {
        self.df.get(ngram).copied().unwrap_or(0.0)
    }

    fn tfidf(&self, tokens: &[usize]) -> TfIdf {
        let log_n = (self.num_images.max(1) as f64).ln();
        let mut vec: [BTreeMap<Ngram, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        for (n, counts) in ngram_counts(tokens).into_iter().enumerate() {
            for (g, tf) in counts {
                let w = tf * (log_n - self.df(&g).max(1.0).ln());
                norm[n] += w * w;
                vec[n].insert(g, w);
            }
        }
        TfIdf {
            vec,
            norm: norm.map(f64::sqrt),
            len: tokens.len(),
        }
    }

    fn sim(cand: &TfIdf, r: &TfIdf, sigma: f64) -> f64 {
        let delta = cand.len as f64 - r.len as f64;
        let penalty = (-(delta * delta) / (2.0 * sigma * sigma)).exp();
        let mut total = 0.0;
        for n in 0..MAX_N {
            let mut v = 0.0;
            for (g, &c) in &cand.vec[n] {
                if let Some(&rv) = r.vec[n].get(g) {
                    v += c.min(rv) * rv;
                }
            }
            if cand.norm[n] != 0.0 && r.norm[n] != 0.0 {
                v /= cand.norm[n] * r.norm[n];
            }
            total += v * penalty;
        }
        total / MAX_N as f64
    }

    /// CIDEr-D of `candidate` against `refs`; 0 for an empty candidate or no refs.
    pub fn score(&self, candidate: &[usize], refs: &[Vec<usize>], sigma: f64) -> f64 {
        if candidate.is_empty() || refs.is_empty() {
            return 0.0;
        }
        let c = self.tfidf(candidate);
        let sum: f64 = refs.iter().map(|r| Self::sim(&c, &self.tfidf(r), sigma)).sum();
        10.0 * sum / refs.len() as f64
    }
}

pub fn cider_d(candidate: &[usize], refs: &[Vec<usize>], index: &CiderIndex, sigma: f64) -> f64 {
    index.score(candidate, refs, sigma)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_overlap_and_empty() {
        let idx = CiderIndex::new(&[vec![vec![1, 2, 3]], vec![vec![4, 5]]]);
        assert_eq!(cider_d(&[7, 8], &[vec![1, 2, 3]], &idx, DEFAULT_SIGMA), 0.0);
        assert_eq!(cider_d(&[], &[vec![1, 2, 3]], &idx, DEFAULT_SIGMA), 0.0);
    }

    #[test]
    fn single_image_corpus_has_no_idf_signal() {
        let idx = CiderIndex::new(&[vec![vec![1, 2]]]);
        assert_eq!(cider_d(&[1, 2], &[vec![1, 2]], &idx, DEFAULT_SIGMA), 0.0);
    }

    #[test]
    fn order_of_refs_does_not_matter() {
        let refs = vec![vec![1, 2, 3, 4], vec![1, 5, 3], vec![6, 2, 3, 4, 4]];
        let idx = CiderIndex::new(&[refs.clone(), vec![vec![2, 9]], vec![vec![3, 1]]]);
        let a = cider_d(&[1, 2, 3, 4], &refs, &idx, DEFAULT_SIGMA);
        let mut rev = refs.clone();
        rev.reverse();
        let b = cider_d(&[1, 2, 3, 4], &rev, &idx, DEFAULT_SIGMA);
        assert!(a > 0.0);
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn repeated_words_are_clipped() {
        let idx = CiderIndex::new(&[vec![vec![1, 2]], vec![vec![3]]]);
        let once = cider_d(&[1, 2], &[vec![1, 2]], &idx, DEFAULT_SIGMA);
        let many = cider_d(&[1, 1, 1, 2], &[vec![1, 2]], &idx, DEFAULT_SIGMA);
        assert!(many < once);
    }
}
