use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Zipf};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{seeded, stable_hash};

use super::{CorpusSet, CorpusSource, DomainCorpus, DomainRole, Split, Vocab, BOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub dev: usize,
    pub eval: usize,
}

impl Default for SplitSizes {
    fn default() -> Self {
        SplitSizes {
            train: 8192,
            dev: 2048,
            eval: 2048,
        }
    }
}

impl SplitSizes {
    fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Eval => self.eval,
        }
    }
}

/// A held-out domain whose lines are drawn from training domains.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureSpec {
    /// Defaults to `mix_<a>_<b>...` from the component indices.
    #[serde(default)]
    pub id: Option<String>,
    pub components: Vec<usize>,
    /// Per-line selection probabilities; equal when omitted.
    #[serde(default)]
    pub weights: Option<Vec<f64>>,
}

impl MixtureSpec {
    pub fn domain_id(&self) -> String {
        self.id.clone().unwrap_or_else(|| {
            let parts: Vec<String> = self.components.iter().map(|c| format!("{c:02}")).collect();
            format!("mix_{}", parts.join("_"))
        })
    }

    fn weights(&self) -> Vec<f64> {
        let w = self.weights.clone().unwrap_or_else(|| vec![1.0; self.components.len()]);
        let total: f64 = w.iter().sum();
        w.iter().map(|x| x / total).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub n_domains: usize,
    pub vocab_size: usize,
    /// Fraction α of the non-reserved vocabulary shared by every domain.
    pub shared_fraction: f64,
    pub tokens_per_split: SplitSizes,
    pub zipf_exponent: f64,
    pub seed: u64,
    pub line_len_min: usize,
    pub line_len_max: usize,
    pub mixtures: Vec<MixtureSpec>,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_domains: 4,
            vocab_size: 131,
            shared_fraction: 0.2,
            tokens_per_split: SplitSizes::default(),
            zipf_exponent: 1.1,
            seed: 7,
            line_len_min: 16,
            line_len_max: 64,
            mixtures: vec![
                MixtureSpec {
                    id: None,
                    components: vec![0, 1],
                    weights: None,
                },
                MixtureSpec {
                    id: None,
                    components: vec![2, 3],
                    weights: None,
                },
            ],
        }
    }
}

pub fn synthetic_domain_id(index: usize) -> String {
    format!("dom{index:02}")
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_domains == 0 {
            return fail("n_domains must be positive".into());
        }
        let min_vocab = self.n_domains * 8 + Vocab::reserved();
        if self.vocab_size < min_vocab {
            return fail(format!(
                "vocab_size {} is below n_domains·8 + reserved = {min_vocab}",
                self.vocab_size
            ));
        }
        if !(0.0..=1.0).contains(&self.shared_fraction) {
            return fail(format!("shared_fraction {} outside [0, 1]", self.shared_fraction));
        }
        if !(self.zipf_exponent > 0.0) {
            return fail("zipf_exponent must be positive".into());
        }
        if self.line_len_min == 0 || self.line_len_min > self.line_len_max {
            return fail("need 1 <= line_len_min <= line_len_max".into());
        }
        for split in Split::ALL {
            if self.tokens_per_split.get(split) == 0 {
                return fail(format!("tokens_per_split.{split} must be positive"));
            }
        }
        for m in &self.mixtures {
            if m.components.is_empty() || m.components.iter().any(|&c| c >= self.n_domains) {
                return fail(format!("mixture {:?} references unknown domains", m.components));
            }
            if let Some(w) = &m.weights {
                if w.len() != m.components.len() || w.iter().any(|&x| !(x > 0.0)) {
                    return fail(format!("mixture {:?} has invalid weights", m.components));
                }
            }
        }
        Ok(())
    }

    fn content_size(&self) -> usize {
        self.vocab_size - Vocab::reserved()
    }

    pub fn shared_count(&self) -> usize {
        (self.shared_fraction * self.content_size() as f64).floor() as usize
    }

    pub fn exclusive_count(&self) -> usize {
        (self.content_size() - self.shared_count()) / self.n_domains
    }

    /// Token ids domain `index` may emit: the shared block plus its own block.
    pub fn domain_vocabulary(&self, index: usize) -> Vec<u32> {
        let r = Vocab::reserved();
        let shared = self.shared_count();
        let excl = self.exclusive_count();
        let own = r + shared + index * excl;
        (r..r + shared).chain(own..own + excl).map(|i| i as u32).collect()
    }

    /// Jaccard overlap of two domains' vocabularies, computed from the settings alone.
    pub fn expected_overlap(&self, a: usize, b: usize) -> f64 {
        if a == b {
            return 1.0;
        }
        let shared = self.shared_count() as f64;
        let union = shared + 2.0 * self.exclusive_count() as f64;
        if union == 0.0 {
            0.0
        } else {
            shared / union
        }
    }

    fn words(&self) -> Vec<String> {
        let shared = self.shared_count();
        let excl = self.exclusive_count();
        let mut words: Vec<String> = (0..shared).map(|i| format!("s{i}")).collect();
        for d in 0..self.n_domains {
            words.extend((0..excl).map(|i| format!("d{d}w{i}")));
        }
        let used = words.len();
        words.extend((used..self.content_size()).map(|i| format!("x{i}")));
        words
    }
}

/// Zipf unigram sampler over one domain's vocabulary in a seeded rank order.
struct LineSampler {
    ranked: Vec<u32>,
    zipf: Zipf<f64>,
}

impl LineSampler {
    fn new(spec: &SyntheticSpec, index: usize) -> Result<Self> {
        let mut ranked = spec.domain_vocabulary(index);
        let mut rng = seeded(spec.seed, stable_hash(&["rank-order", &index.to_string()]));
        ranked.shuffle(&mut rng);
        let zipf = Zipf::new(ranked.len() as f64, spec.zipf_exponent)
            .map_err(|e| Error::Config(format!("zipf sampler: {e}")))?;
        Ok(LineSampler { ranked, zipf })
    }

    fn line(&self, spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<u32> {
        let words = rng.random_range(spec.line_len_min..=spec.line_len_max);
        let mut line = Vec::with_capacity(words + 1);
        line.push(BOS);
        for _ in 0..words {
            let rank = self.zipf.sample(rng) as usize;
            line.push(self.ranked[rank.clamp(1, self.ranked.len()) - 1]);
        }
        line
    }
}

fn generate_split(
    spec: &SyntheticSpec,
    samplers: &[LineSampler],
    components: &[usize],
    weights: &[f64],
    rng: &mut ChaCha8Rng,
    split: Split,
) -> Vec<Vec<u32>> {
    let target = spec.tokens_per_split.get(split);
    let mut total = 0;
    let mut lines = Vec::new();
    while total < target {
        let mut u: f64 = rng.random();
        let mut pick = components[components.len() - 1];
        for (&c, &w) in components.iter().zip(weights) {
            if u < w {
                pick = c;
                break;
            }
            u -= w;
        }
        let line = samplers[pick].line(spec, rng);
        total += line.len();
        lines.push(line);
    }
    lines
}

/// Builds `n_domains` training corpora plus the configured held-out mixtures.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<CorpusSet> {
    spec.validate()?;
    let vocab = Vocab::new(spec.words())?;
    let samplers = (0..spec.n_domains)
        .map(|i| LineSampler::new(spec, i))
        .collect::<Result<Vec<_>>>()?;

    let build = |domain_id: String, role, components: Vec<usize>, weights: Vec<f64>| {
        let mut splits = Split::ALL.iter().map(|&split| {
            let mut rng = seeded(spec.seed, stable_hash(&["lines", &domain_id, split.name()]));
            generate_split(spec, &samplers, &components, &weights, &mut rng, split)
        });
        DomainCorpus {
            train: splits.next().expect("train"),
            dev: splits.next().expect("dev"),
            eval: splits.next().expect("eval"),
            domain_id,
            role,
            source: CorpusSource::Synthetic {
                components: components.clone(),
                weights: weights.clone(),
            },
        }
    };

    let mut domains: Vec<DomainCorpus> = (0..spec.n_domains)
        .map(|i| build(synthetic_domain_id(i), DomainRole::Train, vec![i], vec![1.0]))
        .collect();
    for m in &spec.mixtures {
        domains.push(build(
            m.domain_id(),
            DomainRole::Eval,
            m.components.clone(),
            m.weights(),
        ));
    }

    let set = CorpusSet { vocab, domains };
    set.validate()?;
    Ok(set)
}
