use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::CausalLm;

use super::{ScoreVector, Strategy};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorConfig {
    /// EMA decay λ.
    pub lambda: f64,
    /// Number of target sequences N folded into the prior.
    pub n_sequences: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        PriorConfig {
            lambda: 0.3,
            n_sequences: 100,
        }
    }
}

impl PriorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0 && self.lambda < 1.0) || self.n_sequences == 0 {
            return Err(Error::Config(format!("invalid prior configuration {self:?}")));
        }
        Ok(())
    }
}

/// Bayes rule over domains; `None` when every joint probability is zero.
pub fn posterior(likelihoods: &[f64], prior: &[f64]) -> Option<Vec<f64>> {
    let joint: Vec<f64> = likelihoods.iter().zip(prior).map(|(l, p)| l * p).collect();
    let z: f64 = joint.iter().sum();
    if !(z > 0.0) {
        return None;
    }
    Some(joint.iter().map(|j| j / z).collect())
}

/// `Σ_{i=1..N} λ^i · posterior_i`, without normalization.
pub fn ema_prior(posteriors: &[Vec<f64>], lambda: f64) -> Vec<f64> {
    let n = posteriors.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; n];
    let mut w = 1.0;
    for post in posteriors {
        w *= lambda;
        for (a, p) in acc.iter_mut().zip(post) {
            *a += w * p;
        }
    }
    acc
}

fn check_models(models: &[(String, &dyn CausalLm)]) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Scoring("no adapters to score".into()));
    }
    Ok(())
}

fn usable(samples: &[Vec<u32>]) -> Vec<&Vec<u32>> {
    samples.iter().filter(|s| s.len() >= 2).collect()
}

/// Realized-token probabilities of every sample under every model.
fn realized(models: &[(String, &dyn CausalLm)], samples: &[&Vec<u32>]) -> Result<Vec<Vec<Vec<f64>>>> {
    models
        .par_iter()
        .map(|(_, m)| samples.iter().map(|s| m.realized_probs(s)).collect())
        .collect()
}

/// Domain prior: per sequence, the last token's likelihood under each
/// adapter gives a posterior against the running prior (uniform at first,
/// then the normalized EMA so far); the raw score is the EMA itself.
pub fn score_prior(models: &[(String, &dyn CausalLm)], samples: &[Vec<u32>], cfg: &PriorConfig) -> Result<ScoreVector> {
    check_models(models)?;
    cfg.validate()?;
    let seqs: Vec<&Vec<u32>> = usable(samples).into_iter().take(cfg.n_sequences).collect();
    if seqs.is_empty() {
        return Err(Error::Scoring("prior: no target sequence has 2 or more tokens".into()));
    }
    let probs = realized(models, &seqs)?;
    let n = models.len();
    let mut prior = vec![1.0 / n as f64; n];
    let mut posteriors = Vec::with_capacity(seqs.len());
    for i in 0..seqs.len() {
        let lik: Vec<f64> = probs.iter().map(|p| *p[i].last().expect("len ≥ 2")).collect();
        let Some(post) = posterior(&lik, &prior) else { continue };
        posteriors.push(post);
        let ema = ema_prior(&posteriors, cfg.lambda);
        let z: f64 = ema.iter().sum();
        if z > 0.0 {
            prior = ema.iter().map(|e| e / z).collect();
        }
    }
    if posteriors.is_empty() {
        return Err(Error::Scoring("prior: every posterior was degenerate".into()));
    }
    let domains = models.iter().map(|(d, _)| d.clone()).collect();
    ScoreVector::new(Strategy::Prior, domains, ema_prior(&posteriors, cfg.lambda))
}

/// `−Σ_x p(x)·ln p(x)` over per-batch mean realized-token probabilities.
pub fn batch_entropy(batch_means: &[f64]) -> f64 {
    -batch_means
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// `(max H − H_j) / Σ (max H − H_j')`, uniform when every H is equal.
pub fn certainty(entropies: &[f64]) -> Vec<f64> {
    let max = entropies.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let gaps: Vec<f64> = entropies.iter().map(|h| max - h).collect();
    let total: f64 = gaps.iter().sum();
    if !(total > 0.0) {
        return vec![1.0 / entropies.len() as f64; entropies.len()];
    }
    gaps.iter().map(|g| g / total).collect()
}

pub fn score_entropy(
    models: &[(String, &dyn CausalLm)],
    samples: &[Vec<u32>],
    batch_size: usize,
) -> Result<ScoreVector> {
    check_models(models)?;
    if batch_size == 0 {
        return Err(Error::Config("entropy batch size must be positive".into()));
    }
    let seqs = usable(samples);
    if seqs.is_empty() {
        return Err(Error::Scoring(
            "entropy: no target sequence has 2 or more tokens".into(),
        ));
    }
    let probs = realized(models, &seqs)?;
    let entropies: Vec<f64> = probs
        .iter()
        .map(|per_seq| {
            let means: Vec<f64> = per_seq
                .chunks(batch_size)
                .map(|batch| {
                    let flat: Vec<f64> = batch.iter().flatten().copied().collect();
                    flat.iter().sum::<f64>() / flat.len() as f64
                })
                .collect();
            batch_entropy(&means)
        })
        .collect();
    let domains = models.iter().map(|(d, _)| d.clone()).collect();
    ScoreVector::new(Strategy::Entropy, domains, certainty(&entropies))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;

    #[test]
    fn posterior_example() {
        let p = posterior(&[0.02, 0.06], &[0.5, 0.5]).unwrap();
        assert!((p[0] - 0.25).abs() < 1e-12 && (p[1] - 0.75).abs() < 1e-12);
        assert!(posterior(&[0.0, 0.0], &[0.5, 0.5]).is_none());
    }

    #[test]
    fn ema_example() {
        let raw = ema_prior(&[vec![1.0, 0.0], vec![0.5, 0.5]], 0.3);
        assert!((raw[0] - 0.345).abs() < 1e-12);
        assert!((raw[1] - 0.045).abs() < 1e-12);
        let z = raw[0] + raw[1];
        assert!((raw[0] / z - 0.884_615_384_6).abs() < 1e-9);
    }

    #[test]
    fn entropy_of_uniform_predictor() {
        assert!((batch_entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-12);
        assert_eq!(certainty(&[0.7]), vec![1.0]);
        assert_eq!(certainty(&[0.7, 0.7]), vec![0.5, 0.5]);
        let c = certainty(&[1.0, 2.0, 3.0]);
        assert_eq!(c, vec![2.0 / 3.0, 1.0 / 3.0, 0.0]);
    }

    /// Predicts the same fixed distribution at every position.
    struct Fixed(Vec<f64>);

    impl CausalLm for Fixed {
        fn vocab_size(&self) -> usize {
            self.0.len()
        }
        fn max_seq_len(&self) -> usize {
            usize::MAX
        }
        fn next_token_probs(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
            let rows = tokens.len() - 1;
            Tensor::new(vec![rows, self.0.len()], self.0.repeat(rows))
        }
    }

    #[test]
    fn identical_models_score_equally() {
        let m = Fixed(vec![0.1, 0.2, 0.3, 0.4]);
        let models: Vec<(String, &dyn CausalLm)> = vec![("a".into(), &m), ("b".into(), &m)];
        let samples = [vec![0, 1, 2], vec![3, 3]];
        let p = score_prior(&models, &samples, &PriorConfig::default()).unwrap();
        assert_eq!(p.normalized().unwrap().weights, vec![0.5, 0.5]);
        let e = score_entropy(&models, &samples, 1).unwrap();
        assert_eq!(e.raw, vec![0.5, 0.5]);
    }

    #[test]
    fn uniform_model_entropy_over_four_batches() {
        let m = Fixed(vec![0.25; 4]);
        let samples = [vec![0, 1, 2], vec![3, 3], vec![1, 0], vec![2, 2, 2]];
        let per: Vec<f64> = samples
            .iter()
            .map(|s| m.realized_probs(s).unwrap().iter().sum::<f64>() / (s.len() - 1) as f64)
            .collect();
        assert!((batch_entropy(&per) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn prior_prefers_the_likelier_domain() {
        let good = Fixed(vec![0.7, 0.1, 0.1, 0.1]);
        let bad = Fixed(vec![0.1, 0.3, 0.3, 0.3]);
        let models: Vec<(String, &dyn CausalLm)> = vec![("bad".into(), &bad), ("good".into(), &good)];
        let samples = vec![vec![1, 0], vec![2, 0, 0]];
        let w = score_prior(&models, &samples, &PriorConfig::default())
            .unwrap()
            .normalized()
            .unwrap();
        assert!(w.weights[1] > 0.8, "{w:?}");
    }

    #[test]
    fn short_sequences_only_is_an_error() {
        let m = Fixed(vec![0.5, 0.5]);
        let models: Vec<(String, &dyn CausalLm)> = vec![("a".into(), &m)];
        assert!(score_prior(&models, &[vec![1]], &PriorConfig::default()).is_err());
        assert!(score_entropy(&models, &[vec![]], 4).is_err());
    }
}
