//! Plot-ready data series derived from benchmark outputs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::composer::{auto_k, KSpec, Method, Weighting};
use crate::error::{Error, Result};
use crate::evaluator::{mean_std, EvalRecord};
use crate::scoring::{ScoreRecord, Strategy};

/// Fixed k ascending, then auto thresholds ascending.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct KOrder(u8, usize, f64);

pub fn k_order(k: &KSpec) -> KOrder {
    match *k {
        KSpec::Fixed(k) => KOrder(0, k, 0.0),
        KSpec::Auto(t) => KOrder(1, 0, t),
    }
}

fn sort_k<T>(rows: &mut [T], key: impl Fn(&T) -> (Strategy, Method, Weighting, KSpec)) {
    rows.sort_by(|a, b| {
        let (sa, ma, wa, ka) = key(a);
        let (sb, mb, wb, kb) = key(b);
        (sa, ma, wa)
            .cmp(&(sb, mb, wb))
            .then_with(|| k_order(&ka).partial_cmp(&k_order(&kb)).expect("finite thresholds"))
    });
}

/// Mean base-model perplexity per eval domain (k = 0 rows).
pub fn base_perplexities(records: &[EvalRecord]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in records.iter().filter(|r| r.k == KSpec::Fixed(0)) {
        acc.entry(r.eval_domain.clone()).or_default().push(r.perplexity);
    }
    acc.into_iter()
        .map(|(d, v)| (d, v.iter().sum::<f64>() / v.len() as f64))
        .collect()
}

type PlanKey = (Strategy, Method, Weighting, String);

fn plan_key(r: &EvalRecord) -> PlanKey {
    (r.strategy, r.method, r.weighting, r.k.to_string())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PplVsKRow {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: KSpec,
    pub n_domains: usize,
    /// Mean over domains of the seed-mean perplexity.
    pub mean_perplexity: f64,
    /// Same, divided by each domain's base perplexity first.
    pub mean_relative_to_base: Option<f64>,
}

pub fn ppl_vs_k(records: &[EvalRecord]) -> Result<Vec<PplVsKRow>> {
    let base = base_perplexities(records);
    let mut cells: BTreeMap<PlanKey, (KSpec, BTreeMap<&str, Vec<f64>>)> = BTreeMap::new();
    for r in records {
        cells
            .entry(plan_key(r))
            .or_insert_with(|| (r.k, BTreeMap::new()))
            .1
            .entry(r.eval_domain.as_str())
            .or_default()
            .push(r.perplexity);
    }
    let mut rows = Vec::with_capacity(cells.len());
    for ((strategy, method, weighting, _), (k, per_domain)) in cells {
        let mut means = Vec::new();
        let mut relative = Vec::new();
        for (d, ppl) in &per_domain {
            let (m, _) = mean_std(ppl)?;
            means.push(m);
            if let Some(b) = base.get(*d) {
                relative.push(m / b);
            }
        }
        let n = means.len();
        rows.push(PplVsKRow {
            strategy,
            method,
            weighting,
            k,
            n_domains: n,
            mean_perplexity: means.iter().sum::<f64>() / n as f64,
            mean_relative_to_base: (relative.len() == n).then(|| relative.iter().sum::<f64>() / n as f64),
        });
    }
    sort_k(&mut rows, |r| (r.strategy, r.method, r.weighting, r.k));
    Ok(rows)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Co2Row {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: KSpec,
    pub mean_wall_seconds: f64,
    pub mean_co2_g: f64,
}

pub fn co2_vs_k(records: &[EvalRecord]) -> Vec<Co2Row> {
    let mut cells: BTreeMap<PlanKey, (KSpec, f64, f64, usize)> = BTreeMap::new();
    for r in records {
        let c = cells.entry(plan_key(r)).or_insert((r.k, 0.0, 0.0, 0));
        c.1 += r.wall_seconds;
        c.2 += r.co2_g;
        c.3 += 1;
    }
    let mut rows: Vec<Co2Row> = cells
        .into_iter()
        .map(|((strategy, method, weighting, _), (k, s, g, n))| Co2Row {
            strategy,
            method,
            weighting,
            k,
            mean_wall_seconds: s / n as f64,
            mean_co2_g: g / n as f64,
        })
        .collect();
    sort_k(&mut rows, |r| (r.strategy, r.method, r.weighting, r.k));
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightRow {
    pub strategy: Strategy,
    pub eval_domain: String,
    pub adapter: String,
    /// Normalized score over every candidate, averaged over seeds.
    pub weight: f64,
}

fn seed_means(scores: &[ScoreRecord]) -> Result<BTreeMap<(Strategy, &str), (Vec<String>, Vec<f64>, usize)>> {
    let mut acc: BTreeMap<(Strategy, &str), (Vec<String>, Vec<f64>, usize)> = BTreeMap::new();
    for s in scores {
        let e = acc
            .entry((s.strategy, s.eval_domain.as_str()))
            .or_insert_with(|| (s.domains.clone(), vec![0.0; s.domains.len()], 0));
        if e.0 != s.domains {
            return Err(Error::Data(format!(
                "score records for {}/{} disagree on the candidate list",
                s.strategy, s.eval_domain
            )));
        }
        for (a, w) in e.1.iter_mut().zip(&s.normalized) {
            *a += w;
        }
        e.2 += 1;
    }
    for e in acc.values_mut() {
        let n = e.2 as f64;
        e.1.iter_mut().for_each(|w| *w /= n);
    }
    Ok(acc)
}

pub fn weight_distributions(scores: &[ScoreRecord]) -> Result<Vec<WeightRow>> {
    let mut rows = Vec::new();
    for ((strategy, domain), (ids, w, _)) in seed_means(scores)? {
        for (id, x) in ids.iter().zip(&w) {
            rows.push(WeightRow {
                strategy,
                eval_domain: domain.to_string(),
                adapter: id.clone(),
                weight: *x,
            });
        }
    }
    Ok(rows)
}

/// `KL(w ‖ uniform) = Σ w ln(n w)`, with `0 ln 0 = 0`.
pub fn kl_from_uniform(w: &[f64]) -> f64 {
    let n = w.len() as f64;
    w.iter().filter(|&&x| x > 0.0).map(|&x| x * (n * x).ln()).sum()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightKlRow {
    pub strategy: Strategy,
    /// An eval domain, or `all` for the mean over domains.
    pub eval_domain: String,
    pub n: usize,
    /// Mean over seeds of the per-run divergence.
    pub kl_from_uniform: f64,
}

pub const ALL_DOMAINS: &str = "all";

pub fn weight_kl(scores: &[ScoreRecord]) -> Vec<WeightKlRow> {
    let mut acc: BTreeMap<(Strategy, &str), Vec<f64>> = BTreeMap::new();
    for s in scores {
        acc.entry((s.strategy, s.eval_domain.as_str()))
            .or_default()
            .push(kl_from_uniform(&s.normalized));
    }
    let mut rows = Vec::new();
    let mut per_strategy: BTreeMap<Strategy, Vec<f64>> = BTreeMap::new();
    for ((strategy, domain), kls) in acc {
        let mean = kls.iter().sum::<f64>() / kls.len() as f64;
        per_strategy.entry(strategy).or_default().push(mean);
        rows.push(WeightKlRow {
            strategy,
            eval_domain: domain.to_string(),
            n: kls.len(),
            kl_from_uniform: mean,
        });
    }
    for (strategy, means) in per_strategy {
        rows.push(WeightKlRow {
            strategy,
            eval_domain: ALL_DOMAINS.into(),
            n: means.len(),
            kl_from_uniform: means.iter().sum::<f64>() / means.len() as f64,
        });
    }
    rows
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AutoKRow {
    pub threshold: f64,
    pub strategy: Strategy,
    pub method: Method,
    /// (domain, seed) runs whose chosen k was evaluated in the grid.
    pub n: usize,
    /// Runs skipped because the chosen k has no fixed-k result.
    pub n_missing: usize,
    pub mean_k: Option<f64>,
    /// Mean of best-fixed-k perplexity over chosen-k perplexity.
    pub fraction_of_optimal: Option<f64>,
}

/// For each threshold, how close the gap rule gets to the best fixed `k ≥ 1`
/// of every (strategy, method, domain, seed) run with scored weights.
pub fn autok_sweep(records: &[EvalRecord], scores: &[ScoreRecord], thresholds: &[f64]) -> Result<Vec<AutoKRow>> {
    type RunKey<'a> = (Strategy, Method, &'a str, u64);
    let mut runs: BTreeMap<RunKey, BTreeMap<usize, f64>> = BTreeMap::new();
    for r in records {
        if let (KSpec::Fixed(k), Weighting::Scored) = (r.k, r.weighting) {
            if k >= 1 {
                runs.entry((r.strategy, r.method, r.eval_domain.as_str(), r.seed))
                    .or_default()
                    .insert(k, r.perplexity);
            }
        }
    }
    let weights: BTreeMap<(Strategy, &str, u64), &[f64]> = scores
        .iter()
        .map(|s| ((s.strategy, s.eval_domain.as_str(), s.seed), s.normalized.as_slice()))
        .collect();

    let mut rows = Vec::new();
    for &t in thresholds {
        let mut acc: BTreeMap<(Strategy, Method), (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for (&(strategy, method, domain, seed), by_k) in &runs {
            let Some(w) = weights.get(&(strategy, domain, seed)) else {
                continue;
            };
            let e = acc.entry((strategy, method)).or_default();
            let k = auto_k(w, t)?;
            let best = by_k.values().copied().fold(f64::INFINITY, f64::min);
            match by_k.get(&k) {
                Some(ppl) => {
                    e.0.push(k as f64);
                    e.1.push(best / ppl);
                }
                None => e.2 += 1,
            }
        }
        for ((strategy, method), (ks, fracs, missing)) in acc {
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            rows.push(AutoKRow {
                threshold: t,
                strategy,
                method,
                n: ks.len(),
                n_missing: missing,
                mean_k: mean(&ks),
                fraction_of_optimal: mean(&fracs),
            });
        }
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(method: Method, k: KSpec, seed: u64, ppl: f64, co2: f64) -> EvalRecord {
        EvalRecord {
            strategy: Strategy::TfIdf,
            method,
            weighting: Weighting::Scored,
            k,
            eval_domain: "m".into(),
            seed,
            perplexity: ppl,
            wall_seconds: co2,
            co2_g: co2,
        }
    }

    fn score(strategy: Strategy, seed: u64, w: &[f64]) -> ScoreRecord {
        ScoreRecord {
            strategy,
            eval_domain: "m".into(),
            seed,
            domains: (0..w.len()).map(|i| format!("d{i}")).collect(),
            raw: w.to_vec(),
            normalized: w.to_vec(),
        }
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_from_uniform(&[0.25; 4]), 0.0);
        assert!((kl_from_uniform(&[1.0, 0.0]) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn series_are_sorted_by_k() {
        let records = vec![
            rec(Method::Ensemble, KSpec::Auto(0.004), 1, 3.0, 9.0),
            rec(Method::Ensemble, KSpec::Fixed(2), 1, 3.0, 5.0),
            rec(Method::Ensemble, KSpec::Fixed(10), 1, 3.0, 7.0),
            rec(Method::Ensemble, KSpec::Fixed(0), 1, 4.0, 1.0),
        ];
        let ks: Vec<String> = co2_vs_k(&records).iter().map(|r| r.k.to_string()).collect();
        assert_eq!(ks, ["0", "2", "10", "auto:0.004"]);
        let ppl = ppl_vs_k(&records).unwrap();
        assert_eq!(ppl[1].mean_relative_to_base, Some(0.75));
    }

    #[test]
    fn weights_average_over_seeds() {
        let scores = vec![
            score(Strategy::Prior, 1, &[0.5, 0.5]),
            score(Strategy::Prior, 2, &[1.0, 0.0]),
        ];
        let rows = weight_distributions(&scores).unwrap();
        assert_eq!(rows.iter().map(|r| r.weight).collect::<Vec<_>>(), vec![0.75, 0.25]);
        let kl = weight_kl(&scores);
        assert_eq!(kl.last().unwrap().eval_domain, ALL_DOMAINS);
        assert!((kl[0].kl_from_uniform - 2f64.ln() / 2.0).abs() < 1e-15);
    }

    #[test]
    fn autok_fraction() {
        let records = vec![
            rec(Method::Average, KSpec::Fixed(1), 1, 4.0, 0.0),
            rec(Method::Average, KSpec::Fixed(2), 1, 3.0, 0.0),
            rec(Method::Average, KSpec::Fixed(3), 1, 3.5, 0.0),
            rec(Method::Average, KSpec::Fixed(4), 1, 3.6, 0.0),
        ];
        let scores = vec![score(Strategy::TfIdf, 1, &[0.40, 0.35, 0.15, 0.10])];
        let rows = autok_sweep(&records, &scores, &[0.1, 0.001]).unwrap();
        assert_eq!(rows[0].mean_k, Some(2.0));
        assert_eq!(rows[0].fraction_of_optimal, Some(1.0));
        assert_eq!(rows[1].mean_k, Some(1.0));
        assert_eq!(rows[1].fraction_of_optimal, Some(0.75));
    }
}
