use std::collections::BTreeMap;

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::kernel::Tensor;
use crate::scalar::Scalar;

use super::{ScoreVector, Strategy};

/// Maps a token sequence to a fixed-size vector; `None` when the sequence has
/// nothing to embed.
pub trait SequenceEmbedder: Sync {
    fn embed(&self, seq: &[u32]) -> Option<Vec<f64>>;
}

/// Mean of the base model's input token embeddings over non-reserved tokens.
pub struct MeanEmbedding<'a, T> {
    table: &'a Tensor<T>,
}

impl<'a, T: Scalar> MeanEmbedding<'a, T> {
    pub fn new(table: &'a Tensor<T>) -> Self {
        MeanEmbedding { table }
    }
}

impl<T: Scalar> SequenceEmbedder for MeanEmbedding<'_, T> {
    fn embed(&self, seq: &[u32]) -> Option<Vec<f64>> {
        let mut acc = vec![0.0; self.table.cols()];
        let mut n = 0usize;
        for &t in seq.iter().filter(|&&t| !Vocab::is_reserved(t)) {
            if t as usize >= self.table.rows() {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(self.table.row(t as usize)) {
                *a += x.as_f64();
            }
            n += 1;
        }
        if n == 0 {
            return None;
        }
        acc.iter_mut().for_each(|a| *a /= n as f64);
        Some(acc)
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some(a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
}

/// Sum of unit vectors and how many vectors were non-zero.
fn unit_sum(vs: &[Vec<f64>]) -> (Vec<f64>, usize) {
    let dim = vs.first().map_or(0, Vec::len);
    let mut sum = vec![0.0; dim];
    let mut n = 0;
    for v in vs {
        let nv = norm(v);
        if nv == 0.0 {
            continue;
        }
        for (s, x) in sum.iter_mut().zip(v) {
            *s += x / nv;
        }
        n += 1;
    }
    (sum, n)
}

/// Mean cosine over all pairs `(a_i, b_j)` with non-zero vectors. Uses
/// `mean(û_a)·mean(û_b)`, which equals the pair average.
pub fn mean_pairwise_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Option<f64> {
    let (sa, na) = unit_sum(a);
    let (sb, nb) = unit_sum(b);
    if na == 0 || nb == 0 {
        return None;
    }
    let dot: f64 = sa.iter().zip(&sb).map(|(x, y)| x * y).sum();
    Some(dot / (na * nb) as f64)
}

fn score_domains(
    strategy: Strategy,
    candidates: &[(String, Vec<Vec<u32>>)],
    per_domain: impl Fn(usize) -> Option<f64>,
) -> Result<ScoreVector> {
    let mut raw = Vec::with_capacity(candidates.len());
    let mut any = false;
    for i in 0..candidates.len() {
        let s = per_domain(i);
        any |= s.is_some();
        raw.push(s.unwrap_or(0.0));
    }
    if !any {
        return Err(Error::Scoring(format!("{strategy}: every sequence pair was excluded")));
    }
    let domains = candidates.iter().map(|(d, _)| d.clone()).collect();
    ScoreVector::new(strategy, domains, raw)
}

/// Mean cosine between embedded candidate dev sequences and target sequences.
pub fn score_sentsim(
    candidates: &[(String, Vec<Vec<u32>>)],
    target: &[Vec<u32>],
    embedder: &dyn SequenceEmbedder,
) -> Result<ScoreVector> {
    let embed_all = |seqs: &[Vec<u32>]| -> Vec<Vec<f64>> { seqs.iter().filter_map(|s| embedder.embed(s)).collect() };
    let t = embed_all(target);
    let cands: Vec<Vec<Vec<f64>>> = candidates.iter().map(|(_, s)| embed_all(s)).collect();
    score_domains(Strategy::SentSim, candidates, |i| mean_pairwise_cosine(&cands[i], &t))
}

/// `ln((1 + n_docs) / (1 + df) + 1)`.
pub fn idf(n_docs: usize, df: usize) -> f64 {
    ((1.0 + n_docs as f64) / (1.0 + df as f64) + 1.0).ln()
}

/// Length-normalized term frequencies over non-reserved tokens.
pub fn tf_vector(doc: &[u32]) -> BTreeMap<u32, f64> {
    let mut tf = BTreeMap::new();
    let mut len = 0usize;
    for &t in doc.iter().filter(|&&t| !Vocab::is_reserved(t)) {
        *tf.entry(t).or_insert(0.0) += 1.0;
        len += 1;
    }
    tf.values_mut().for_each(|c| *c /= len as f64);
    tf
}

type Sparse = BTreeMap<u32, f64>;

fn sparse_unit_sum(vs: &[Sparse]) -> (Sparse, usize) {
    let mut sum = Sparse::new();
    let mut n = 0;
    for v in vs {
        let nv = v.values().map(|x| x * x).sum::<f64>().sqrt();
        if nv == 0.0 {
            continue;
        }
        for (&k, &x) in v {
            *sum.entry(k).or_insert(0.0) += x / nv;
        }
        n += 1;
    }
    (sum, n)
}

/// Each sequence is a document; idf is taken over the union of candidate and
/// target documents.
pub fn score_tfidf(candidates: &[(String, Vec<Vec<u32>>)], target: &[Vec<u32>]) -> Result<ScoreVector> {
    let tfs =
        |seqs: &[Vec<u32>]| -> Vec<Sparse> { seqs.iter().map(|s| tf_vector(s)).filter(|v| !v.is_empty()).collect() };
    let target_tf = tfs(target);
    let cand_tf: Vec<Vec<Sparse>> = candidates.iter().map(|(_, s)| tfs(s)).collect();

    let mut df: BTreeMap<u32, usize> = BTreeMap::new();
    let all_docs = cand_tf.iter().flatten().chain(&target_tf);
    let mut n_docs = 0;
    for doc in all_docs {
        n_docs += 1;
        for &t in doc.keys() {
            *df.entry(t).or_insert(0) += 1;
        }
    }
    let weigh = |docs: &[Sparse]| -> Vec<Sparse> {
        docs.iter()
            .map(|d| d.iter().map(|(&t, &f)| (t, f * idf(n_docs, df[&t]))).collect())
            .collect()
    };
    let (ts, tn) = sparse_unit_sum(&weigh(&target_tf));
    let cands: Vec<(Sparse, usize)> = cand_tf.iter().map(|c| sparse_unit_sum(&weigh(c))).collect();

    score_domains(Strategy::TfIdf, candidates, |i| {
        let (cs, cn) = &cands[i];
        if *cn == 0 || tn == 0 {
            return None;
        }
        let dot: f64 = cs.iter().filter_map(|(t, x)| ts.get(t).map(|y| x * y)).sum();
        Some(dot / (*cn * tn) as f64)
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn idf_examples() {
        assert!((idf(7, 7) - 2f64.ln()).abs() < 1e-15);
        assert!((idf(3, 1) - 3f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn tf_ignores_reserved_tokens() {
        let tf = tf_vector(&[2, 5, 5, 6, 0]);
        assert_eq!(tf.len(), 2);
        assert!((tf[&5] - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn disjoint_vocabularies_score_zero() {
        let cands = vec![
            ("a".to_string(), vec![vec![2, 5, 6], vec![2, 6, 6]]),
            ("b".to_string(), vec![vec![2, 8, 9]]),
        ];
        let s = score_tfidf(&cands, &[vec![2, 5, 5]]).unwrap();
        assert!(s.raw[0] > 0.0);
        assert_eq!(s.raw[1], 0.0);
    }

    #[test]
    fn zero_vectors_are_excluded() {
        let a = vec![vec![1.0, 0.0], vec![0.0, 0.0]];
        let b = vec![vec![2.0, 0.0]];
        assert_eq!(mean_pairwise_cosine(&a, &b), Some(1.0));
        assert_eq!(mean_pairwise_cosine(&[vec![0.0, 0.0]], &b), None);
    }

    #[test]
    fn all_pairs_excluded_is_a_scoring_error() {
        let cands = vec![("a".to_string(), vec![vec![2u32]])];
        assert!(matches!(score_tfidf(&cands, &[vec![2, 5]]), Err(Error::Scoring(_))));
    }
}
