//! The five scoring strategies that rank and weight candidate adapters for
//! an unseen target domain.
//!
//! Corpus-based strategies (SentSim, TF-IDF) compare sampled dev sequences;
//! model-based strategies (domain prior, entropy) run every adapter over the
//! target samples.

mod lexical;
mod model_based;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lexical::{
    cosine, idf, mean_pairwise_cosine, score_sentsim, score_tfidf, tf_vector, MeanEmbedding, SequenceEmbedder,
};
pub use model_based::{batch_entropy, certainty, ema_prior, posterior, score_entropy, score_prior, PriorConfig};

const SUM_TOL: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Uniform,
    SentSim,
    TfIdf,
    Prior,
    Entropy,
}

impl Strategy {
    pub const ALL: [Strategy; 5] = [
        Strategy::Uniform,
        Strategy::SentSim,
        Strategy::TfIdf,
        Strategy::Prior,
        Strategy::Entropy,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::SentSim => "sentsim",
            Strategy::TfIdf => "tfidf",
            Strategy::Prior => "prior",
            Strategy::Entropy => "entropy",
        }
    }

    /// Whether the strategy produces a meaningful ranking for top-k.
    pub fn selects(self) -> bool {
        self != Strategy::Uniform
    }

    pub fn model_based(self) -> bool {
        matches!(self, Strategy::Prior | Strategy::Entropy)
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown scoring strategy `{s}`")))
    }
}

/// Raw per-candidate scores, in candidate order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub strategy: Strategy,
    pub domains: Vec<String>,
    pub raw: Vec<f64>,
}

impl ScoreVector {
    pub fn new(strategy: Strategy, domains: Vec<String>, raw: Vec<f64>) -> Result<Self> {
        if domains.len() != raw.len() {
            return Err(Error::Scoring(format!(
                "{} scores for {} domains",
                raw.len(),
                domains.len()
            )));
        }
        if let Some(bad) = raw.iter().find(|x| !x.is_finite()) {
            return Err(Error::Scoring(format!("{strategy} produced non-finite score {bad}")));
        }
        Ok(ScoreVector { strategy, domains, raw })
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }

    pub fn index_of(&self, domain: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == domain)
            .ok_or_else(|| Error::Scoring(format!("domain `{domain}` was not scored")))
    }

    /// Sum-normalized over every candidate.
    pub fn normalized(&self) -> Result<WeightVector> {
        normalize(self, &self.domains)
    }
}

/// Selected domains with convex weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub domains: Vec<String>,
    pub weights: Vec<f64>,
}

impl WeightVector {
    pub fn new(domains: Vec<String>, weights: Vec<f64>) -> Result<Self> {
        if domains.is_empty() || domains.len() != weights.len() {
            return Err(Error::Scoring(format!(
                "weight vector needs k ≥ 1 matching weights, got {} domains and {} weights",
                domains.len(),
                weights.len()
            )));
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| !(w >= 0.0)) || (sum - 1.0).abs() > SUM_TOL {
            return Err(Error::Scoring(format!("weights {weights:?} are not convex")));
        }
        Ok(WeightVector { domains, weights })
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, f64)> {
        self.domains
            .iter()
            .map(String::as_str)
            .zip(self.weights.iter().copied())
    }
}

/// `1/k` over the given domains.
pub fn score_uniform(domains: &[String]) -> Result<WeightVector> {
    if domains.is_empty() {
        return Err(Error::Argument("uniform weighting needs k ≥ 1".into()));
    }
    let w = 1.0 / domains.len() as f64;
    WeightVector::new(domains.to_vec(), vec![w; domains.len()])
}

/// Restricts `scores` to `selected` (in that order) and divides by the
/// subset sum. Negative raw scores count as zero.
pub fn normalize(scores: &ScoreVector, selected: &[String]) -> Result<WeightVector> {
    let mut vals = Vec::with_capacity(selected.len());
    for d in selected {
        vals.push(scores.raw[scores.index_of(d)?].max(0.0));
    }
    let sum: f64 = vals.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::Scoring(format!(
            "{} scores over {selected:?} are all zero",
            scores.strategy
        )));
    }
    let mut weights: Vec<f64> = vals.iter().map(|v| v / sum).collect();
    // absorb rounding so the sum is 1 to the last bit where possible
    let drift = 1.0 - weights.iter().sum::<f64>();
    if let Some(max) = weights
        .iter_mut()
        .max_by(|a, b| a.partial_cmp(b).expect("finite weights"))
    {
        *max += drift;
    }
    WeightVector::new(selected.to_vec(), weights)
}

/// On-disk form of one scoring run (`scores/<strategy>__<domain>__<seed>.json`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub strategy: Strategy,
    pub eval_domain: String,
    pub seed: u64,
    pub domains: Vec<String>,
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl ScoreRecord {
    pub fn new(scores: &ScoreVector, eval_domain: &str, seed: u64) -> Result<Self> {
        Ok(ScoreRecord {
            strategy: scores.strategy,
            eval_domain: eval_domain.to_string(),
            seed,
            domains: scores.domains.clone(),
            raw: scores.raw.clone(),
            normalized: scores.normalized()?.weights,
        })
    }

    pub fn scores(&self) -> Result<ScoreVector> {
        ScoreVector::new(self.strategy, self.domains.clone(), self.raw.clone())
    }
}
