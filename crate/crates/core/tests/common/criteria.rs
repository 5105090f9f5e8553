//! Measurements shared by the integration tests and the acceptance report.

use modcomp::corpus::{generate_synthetic, sample_sequences};
use modcomp::evaluator::wilcoxon_from_diffs;
use modcomp::metareg::{cross_validate, fit_ridge, FeatureSet, ModelSpec};
use modcomp::model::{init_base, ModelConfig};
use modcomp::rng::seeded;
use modcomp::scoring::{score_sentsim, score_tfidf, MeanEmbedding, Strategy};
use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::oracles::enumerate_signed_rank_p;
use super::setups::disjoint_spec;

pub const RANKING_TRIALS: usize = 20;

/// How often the true source of an eval sample set is ranked first among
/// disjoint-vocabulary domains.
pub fn ranking_hits(strategy: Strategy) -> usize {
    (0..RANKING_TRIALS)
        .filter(|&t| {
            let seed = 1000 + t as u64;
            let set = generate_synthetic(&disjoint_spec(seed)).unwrap();
            let source = &set.domains[t % set.domains.len()];
            let target = sample_sequences(source, "eval", 16, 64, seed).unwrap();
            let cands: Vec<(String, Vec<Vec<u32>>)> = set
                .domains
                .iter()
                .map(|d| (d.domain_id.clone(), sample_sequences(d, "dev", 16, 64, seed).unwrap()))
                .collect();
            let scores = match strategy {
                Strategy::TfIdf => score_tfidf(&cands, &target).unwrap(),
                Strategy::SentSim => {
                    let cfg = ModelConfig {
                        vocab_size: set.vocab.len(),
                        ..ModelConfig::default()
                    };
                    let base = init_base::<f32>(&cfg, seed).unwrap();
                    let table = base.params.get("tok_emb").unwrap();
                    score_sentsim(&cands, &target, &MeanEmbedding::new(table)).unwrap()
                }
                other => panic!("{other} is not corpus-based"),
            };
            let best = scores
                .raw
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap();
            scores.domains[best] == source.domain_id
        })
        .count()
}

pub struct Recovery {
    pub max_coefficient_error: f64,
    pub cv_r2: f64,
}

/// y = Xβ + ε with ε ~ N(0, σ²), n × p standard-normal design.
pub fn synthetic_linear(n: usize, p: usize, sigma: f64, seed: u64) -> (DMatrix<f64>, Vec<f64>, Vec<f64>) {
    let mut rng = seeded(seed, 7);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let beta: Vec<f64> = (0..p).map(|_| rng.random_range(-2.0..2.0)).collect();
    let x = DMatrix::from_fn(n, p, |_, _| normal.sample(&mut rng));
    let y = (0..n)
        .map(|r| 0.5 + (0..p).map(|c| x[(r, c)] * beta[c]).sum::<f64>() + sigma * normal.sample(&mut rng))
        .collect();
    (x, y, beta)
}

pub fn synthetic_recovery(seed: u64) -> Recovery {
    let (x, y, beta) = synthetic_linear(200, 10, 0.01, seed);
    let fit = fit_ridge(&x, &y, 0.0, true).unwrap();
    let max_coefficient_error = fit
        .coefficients
        .iter()
        .zip(&beta)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let cv = cross_validate(
        &FeatureSet::from_matrix(x, y),
        10,
        seed,
        ModelSpec::Ridge { alpha: 0.0 },
    )
    .unwrap();
    Recovery {
        max_coefficient_error,
        cv_r2: cv.pooled_r2.unwrap(),
    }
}

/// Largest |p − p_enumerated| over 100 random fixtures with n ≤ 10,
/// including ties and zeros.
pub fn wilcoxon_max_deviation() -> f64 {
    let mut rng = seeded(77, 0);
    (0..100)
        .map(|_| {
            let n = rng.random_range(1..=10);
            let diffs: Vec<f64> = (0..n).map(|_| rng.random_range(-6i32..=6) as f64 * 0.5).collect();
            let got = wilcoxon_from_diffs(&diffs).unwrap().p_two_sided;
            (got - enumerate_signed_rank_p(&diffs)).abs()
        })
        .fold(0.0, f64::max)
}
