//! Perplexity, the multi-seed benchmark grid, significance testing, and
//! CO₂ accounting.

mod energy;
mod grid;
mod wilcoxon;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::composer::{KSpec, Method, Weighting};
use crate::corpus::pack_windows;
use crate::error::{Error, Result};
use crate::model::CausalLm;
use crate::scoring::Strategy;

pub use energy::{co2_estimate, EnergyModel, Timing};
pub use grid::{Bench, CompositionRow, GridOutput, GridSpec, ScoringConfig};
pub use wilcoxon::{
    average_ranks, wilcoxon_from_diffs, wilcoxon_normal, wilcoxon_signed_rank, WilcoxonResult, EXACT_MAX_N,
};

/// `exp(−mean ln p)` over realized-token probabilities.
pub fn perplexity_from_probs(probs: &[f64]) -> Result<f64> {
    if probs.is_empty() {
        return Err(Error::Data("perplexity over zero predicted tokens".into()));
    }
    let nll = -probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64;
    let ppl = nll.exp();
    if !ppl.is_finite() {
        return Err(Error::Numerical(
            "perplexity overflowed (a realized token had probability 0)".into(),
        ));
    }
    Ok(ppl)
}

/// Perplexity of `model` over `seqs` packed into windows of `seq_len`
/// predictions.
pub fn perplexity(model: &dyn CausalLm, seqs: &[Vec<u32>], seq_len: usize) -> Result<f64> {
    let windows = pack_windows(seqs, seq_len);
    if windows.is_empty() {
        return Err(Error::Data("perplexity on an empty split".into()));
    }
    let mut probs = Vec::new();
    for w in &windows {
        probs.extend(model.realized_probs(w)?);
    }
    perplexity_from_probs(&probs)
}

/// One benchmark cell; the row format of `results.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: KSpec,
    pub eval_domain: String,
    pub seed: u64,
    pub perplexity: f64,
    pub wall_seconds: f64,
    pub co2_g: f64,
}

/// Plan and domain, everything but the seed.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: String,
    pub eval_domain: String,
}

impl CellKey {
    pub fn of(r: &EvalRecord) -> Self {
        CellKey {
            strategy: r.strategy,
            method: r.method,
            weighting: r.weighting,
            k: r.k.to_string(),
            eval_domain: r.eval_domain.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Aggregate {
    pub key: CellKey,
    pub n: usize,
    pub mean: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std: f64,
    pub single_seed: bool,
    pub mean_wall_seconds: f64,
    pub mean_co2_g: f64,
}

pub fn mean_std(xs: &[f64]) -> Result<(f64, f64)> {
    if xs.is_empty() {
        return Err(Error::Aggregation("mean of an empty cell".into()));
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let std = if xs.len() < 2 {
        0.0
    } else {
        (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    Ok((mean, std))
}

/// Per-(plan, domain) mean and std over seeds, in key order.
pub fn aggregate(records: &[EvalRecord]) -> Result<Vec<Aggregate>> {
    if records.is_empty() {
        return Err(Error::Aggregation("no records to aggregate".into()));
    }
    let mut cells: BTreeMap<CellKey, Vec<&EvalRecord>> = BTreeMap::new();
    for r in records {
        cells.entry(CellKey::of(r)).or_default().push(r);
    }
    cells
        .into_iter()
        .map(|(key, rs)| {
            let ppl: Vec<f64> = rs.iter().map(|r| r.perplexity).collect();
            let (mean, std) = mean_std(&ppl)?;
            let n = rs.len() as f64;
            Ok(Aggregate {
                key,
                n: rs.len(),
                mean,
                std,
                single_seed: rs.len() == 1,
                mean_wall_seconds: rs.iter().map(|r| r.wall_seconds).sum::<f64>() / n,
                mean_co2_g: rs.iter().map(|r| r.co2_g).sum::<f64>() / n,
            })
        })
        .collect()
}

/// Row format of `summary.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: String,
    pub eval_domain: String,
    pub n_seeds: usize,
    pub mean_perplexity: f64,
    pub std_perplexity: f64,
    pub single_seed: bool,
    pub mean_wall_seconds: f64,
    pub mean_co2_g: f64,
    /// Average-vs-ensemble signed-rank p over every (domain, seed) pair of
    /// this strategy, weighting and k.
    pub avg_vs_ens_p: Option<f64>,
    pub avg_vs_ens_n: Option<usize>,
    pub avg_vs_ens_degenerate: Option<bool>,
    /// Mean perplexity with scored weights minus with uniform weights.
    pub weighted_minus_uniform: Option<f64>,
}

type PairKey = (Strategy, Weighting, String);

fn avg_vs_ens(records: &[EvalRecord]) -> Result<BTreeMap<PairKey, WilcoxonResult>> {
    let mut by: BTreeMap<PairKey, BTreeMap<(String, u64), [Option<f64>; 2]>> = BTreeMap::new();
    for r in records {
        let slot = by
            .entry((r.strategy, r.weighting, r.k.to_string()))
            .or_default()
            .entry((r.eval_domain.clone(), r.seed))
            .or_default();
        slot[(r.method == Method::Ensemble) as usize] = Some(r.perplexity);
    }
    let mut out = BTreeMap::new();
    for (key, pairs) in by {
        let diffs: Vec<f64> = pairs.values().filter_map(|[a, e]| Some((*a)? - (*e)?)).collect();
        if !diffs.is_empty() {
            out.insert(key, wilcoxon_from_diffs(&diffs)?);
        }
    }
    Ok(out)
}

pub fn summarize(records: &[EvalRecord]) -> Result<Vec<SummaryRow>> {
    let aggs = aggregate(records)?;
    let tests = avg_vs_ens(records)?;
    let means: BTreeMap<&CellKey, f64> = aggs.iter().map(|a| (&a.key, a.mean)).collect();
    Ok(aggs
        .iter()
        .map(|a| {
            let k = &a.key;
            let test = tests.get(&(k.strategy, k.weighting, k.k.clone()));
            let with = |w: Weighting| CellKey {
                weighting: w,
                ..k.clone()
            };
            let delta = match (
                means.get(&with(Weighting::Scored)),
                means.get(&with(Weighting::Uniform)),
            ) {
                (Some(s), Some(u)) => Some(s - u),
                _ => None,
            };
            SummaryRow {
                strategy: k.strategy,
                method: k.method,
                weighting: k.weighting,
                k: k.k.clone(),
                eval_domain: k.eval_domain.clone(),
                n_seeds: a.n,
                mean_perplexity: a.mean,
                std_perplexity: a.std,
                single_seed: a.single_seed,
                mean_wall_seconds: a.mean_wall_seconds,
                mean_co2_g: a.mean_co2_g,
                avg_vs_ens_p: test.map(|t| t.p_two_sided),
                avg_vs_ens_n: test.map(|t| t.n),
                avg_vs_ens_degenerate: test.map(|t| t.degenerate),
                weighted_minus_uniform: delta,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perplexity_examples() {
        assert!((perplexity_from_probs(&[0.25; 7]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(perplexity_from_probs(&[1.0, 1.0]).unwrap(), 1.0);
        assert!((perplexity_from_probs(&[0.5, 0.125]).unwrap() - 4.0).abs() < 1e-12);
        assert!(matches!(perplexity_from_probs(&[]), Err(Error::Data(_))));
    }

    fn rec(method: Method, seed: u64, ppl: f64) -> EvalRecord {
        EvalRecord {
            strategy: Strategy::TfIdf,
            method,
            weighting: Weighting::Scored,
            k: KSpec::Fixed(2),
            eval_domain: "m".into(),
            seed,
            perplexity: ppl,
            wall_seconds: 1.0,
            co2_g: 2.0,
        }
    }

    #[test]
    fn aggregate_examples() {
        let rs: Vec<_> = (0..4).map(|s| rec(Method::Average, s, 4.0)).collect();
        let a = &aggregate(&rs).unwrap()[0];
        assert_eq!((a.mean, a.std, a.n), (4.0, 0.0, 4));
        let rs = vec![rec(Method::Average, 0, 3.0), rec(Method::Average, 1, 5.0)];
        assert_eq!(aggregate(&rs).unwrap()[0].mean, 4.0);
        let one = aggregate(&[rec(Method::Average, 0, 3.0)]).unwrap();
        assert!(one[0].single_seed && one[0].std == 0.0);
        assert!(matches!(aggregate(&[]), Err(Error::Aggregation(_))));
    }

    #[test]
    fn summary_pairs_methods() {
        let rs = vec![
            rec(Method::Average, 0, 3.0),
            rec(Method::Ensemble, 0, 3.0),
            rec(Method::Average, 1, 5.0),
            rec(Method::Ensemble, 1, 4.0),
        ];
        let s = summarize(&rs).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s[0].avg_vs_ens_n, Some(1));
        assert_eq!(s[0].weighted_minus_uniform, None);
    }
}
