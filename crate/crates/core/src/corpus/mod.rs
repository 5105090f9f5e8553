//! Domain corpora: synthetic generation with controllable lexical overlap,
//! plain-text ingestion, the on-disk archive, and sequence sampling.

mod archive;
mod ingest;
mod synthetic;
mod vocab;

use std::collections::BTreeSet;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stable_hash};

pub use archive::{load_archive, save_archive};
pub use ingest::{ingest_files, IngestSource};
pub use synthetic::{generate_synthetic, synthetic_domain_id, MixtureSpec, SplitSizes, SyntheticSpec};
pub use vocab::{detokenize, tokenize, Vocab, BOS, PAD, UNK};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "eval" => Ok(Split::Eval),
            other => Err(Error::Argument(format!("unknown split `{other}`"))),
        }
    }
}

/// Whether a domain contributes an adapter or is only ever a target.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Train,
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    /// Drawn from the listed synthetic domain(s) with the given mixture weights.
    Synthetic {
        components: Vec<usize>,
        weights: Vec<f64>,
    },
    File {
        path: PathBuf,
    },
}

#[derive(Clone, Debug, PartialEq)]
pub struct DomainCorpus {
    pub domain_id: String,
    pub role: DomainRole,
    pub source: CorpusSource,
    pub train: Vec<Vec<u32>>,
    pub dev: Vec<Vec<u32>>,
    pub eval: Vec<Vec<u32>>,
}

impl DomainCorpus {
    pub fn split(&self, split: Split) -> &[Vec<u32>] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Eval => &self.eval,
        }
    }

    pub fn split_named(&self, name: &str) -> Result<&[Vec<u32>]> {
        Ok(self.split(name.parse()?))
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        for split in Split::ALL {
            let seqs = self.split(split);
            if seqs.is_empty() || seqs.iter().all(|s| s.is_empty()) {
                return Err(Error::Data(format!(
                    "domain `{}` has an empty {split} split",
                    self.domain_id
                )));
            }
            if let Some(bad) = seqs.iter().flatten().find(|&&t| t as usize >= vocab_size) {
                return Err(Error::Data(format!(
                    "domain `{}` {split} split has id {bad} outside vocabulary of {vocab_size}",
                    self.domain_id
                )));
            }
        }
        Ok(())
    }

    /// Non-reserved token types used anywhere in the corpus.
    pub fn token_types(&self) -> BTreeSet<u32> {
        Split::ALL
            .iter()
            .flat_map(|&s| self.split(s).iter().flatten())
            .copied()
            .filter(|&t| !Vocab::is_reserved(t))
            .collect()
    }
}

/// A vocabulary plus every domain built over it.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSet {
    pub vocab: Vocab,
    pub domains: Vec<DomainCorpus>,
}

impl CorpusSet {
    pub fn get(&self, domain_id: &str) -> Result<&DomainCorpus> {
        self.domains
            .iter()
            .find(|d| d.domain_id == domain_id)
            .ok_or_else(|| Error::Data(format!("unknown domain `{domain_id}`")))
    }

    pub fn with_role(&self, role: DomainRole) -> impl Iterator<Item = &DomainCorpus> {
        self.domains.iter().filter(move |d| d.role == role)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for d in &self.domains {
            if !seen.insert(d.domain_id.as_str()) {
                return Err(Error::Data(format!("duplicate domain `{}`", d.domain_id)));
            }
            d.validate(self.vocab.len())?;
        }
        Ok(())
    }
}

/// Jaccard overlap of the token types of two corpora.
pub fn type_overlap(a: &DomainCorpus, b: &DomainCorpus) -> f64 {
    let (ta, tb) = (a.token_types(), b.token_types());
    let union = ta.union(&tb).count();
    if union == 0 {
        return 0.0;
    }
    ta.intersection(&tb).count() as f64 / union as f64
}

pub fn overlap_matrix(domains: &[DomainCorpus]) -> Vec<Vec<f64>> {
    domains
        .iter()
        .map(|a| domains.iter().map(|b| type_overlap(a, b)).collect())
        .collect()
}

/// Draws `n` sequences truncated to `len` tokens: without replacement while
/// the split lasts, then with replacement.
pub fn sample_sequences(corpus: &DomainCorpus, split: &str, n: usize, len: usize, seed: u64) -> Result<Vec<Vec<u32>>> {
    let seqs = corpus.split_named(split)?;
    if n == 0 {
        return Ok(Vec::new());
    }
    if seqs.is_empty() {
        return Err(Error::Data(format!(
            "domain `{}` has an empty {split} split",
            corpus.domain_id
        )));
    }
    let mut rng = seeded(seed, stable_hash(&["sample", &corpus.domain_id, split]));
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);
    let mut picked: Vec<usize> = order.into_iter().take(n).collect();
    while picked.len() < n {
        picked.push(rng.random_range(0..seqs.len()));
    }
    Ok(picked
        .into_iter()
        .map(|i| seqs[i].iter().take(len).copied().collect())
        .collect())
}

/// Concatenates `seqs` and cuts windows of `window + 1` tokens with stride
/// `window`, so every token after the first is a prediction target once.
pub fn pack_windows(seqs: &[Vec<u32>], window: usize) -> Vec<Vec<u32>> {
    let stream: Vec<u32> = seqs.iter().flatten().copied().collect();
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < stream.len() {
        let end = (start + window + 1).min(stream.len());
        out.push(stream[start..end].to_vec());
        start += window;
    }
    out
}
