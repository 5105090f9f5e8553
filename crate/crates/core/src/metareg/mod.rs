//! Meta-regression: predict the normalized perplexity improvement of a
//! composition from its metadata.

mod cv;
mod ridge;
mod stats;

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::composer::Method;
use crate::error::{Error, Result};
use crate::evaluator::{CellKey, CompositionRow, EvalRecord};
use crate::scoring::Strategy;

pub use cv::{baseline_mean_diff, cross_validate, fold_assignment, CvResult, FittedRidge, FoldScore, ModelSpec};
pub use ridge::{fit_ridge, independent_columns, RidgeModel};
pub use stats::{pearson, r_squared, spearman};

/// Coefficients with `|c|` at or below this are left out of the report.
pub const COEFFICIENT_FLOOR: f64 = 0.1;

/// Rows of a regression problem with named columns.
#[derive(Clone, Debug)]
pub struct FeatureSet {
    pub names: Vec<String>,
    /// Continuous columns are standardized before fitting; one-hots are not.
    pub continuous: Vec<bool>,
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    /// Evaluation domain of each row, for the mean-difference baseline.
    pub domains: Vec<String>,
}

impl FeatureSet {
    /// All-continuous features from a plain matrix, one shared domain.
    pub fn from_matrix(x: DMatrix<f64>, y: Vec<f64>) -> Self {
        let p = x.ncols();
        FeatureSet {
            names: (0..p).map(|i| format!("x{i}")).collect(),
            continuous: vec![true; p],
            domains: vec!["all".into(); y.len()],
            x,
            y,
        }
    }
}

/// Mean of per-seed perplexities and adapter weights for one (plan, domain).
struct Cell {
    ppl: Vec<f64>,
    weights: BTreeMap<u64, BTreeMap<String, f64>>,
    seeds: BTreeSet<u64>,
}

/// One seed-averaged row per (plan, eval domain). Columns: `w:<adapter>`
/// for every adapter (0 if not chosen), `n_adapters`, then one-hots for
/// method, strategy, and eval domain.
pub fn build_features(records: &[EvalRecord], compositions: &[CompositionRow]) -> Result<FeatureSet> {
    if records.is_empty() {
        return Err(Error::Data("no benchmark records".into()));
    }
    let mut cells: BTreeMap<CellKey, Cell> = BTreeMap::new();
    for r in records {
        let c = cells.entry(CellKey::of(r)).or_insert_with(|| Cell {
            ppl: Vec::new(),
            weights: BTreeMap::new(),
            seeds: BTreeSet::new(),
        });
        c.ppl.push(r.perplexity);
        c.seeds.insert(r.seed);
    }
    for w in compositions {
        let key = CellKey {
            strategy: w.strategy,
            method: w.method,
            weighting: w.weighting,
            k: w.k.to_string(),
            eval_domain: w.eval_domain.clone(),
        };
        let cell = cells.get_mut(&key).ok_or_else(|| {
            Error::Data(format!(
                "composition for {}/{}/{}/k={} on `{}` has no result row",
                w.strategy, w.method, w.weighting, w.k, w.eval_domain
            ))
        })?;
        cell.weights
            .entry(w.seed)
            .or_default()
            .insert(w.adapter.clone(), w.weight);
    }

    let mut base: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    for (k, c) in &cells {
        if k.k == "0" {
            base.entry(k.eval_domain.as_str()).or_default().extend(&c.ppl);
        }
    }
    let adapters: BTreeSet<&str> = compositions.iter().map(|w| w.adapter.as_str()).collect();
    let domains: BTreeSet<&str> = cells.keys().map(|k| k.eval_domain.as_str()).collect();

    let mut names: Vec<String> = adapters.iter().map(|a| format!("w:{a}")).collect();
    names.push("n_adapters".into());
    let n_cont = names.len();
    names.extend(Method::ALL.iter().map(|m| format!("method:{m}")));
    names.extend(Strategy::ALL.iter().map(|s| format!("strategy:{s}")));
    names.extend(domains.iter().map(|d| format!("domain:{d}")));
    let col = |name: &str| names.iter().position(|n| n == name).expect("known column");

    let mut data = Vec::with_capacity(cells.len() * names.len());
    let mut y = Vec::with_capacity(cells.len());
    let mut row_domains = Vec::with_capacity(cells.len());
    for (key, cell) in &cells {
        let base_ppl = base
            .get(key.eval_domain.as_str())
            .ok_or_else(|| Error::Data(format!("missing baseline (k = 0) perplexity for `{}`", key.eval_domain)))?;
        let base_mean = base_ppl.iter().sum::<f64>() / base_ppl.len() as f64;
        let ppl = cell.ppl.iter().sum::<f64>() / cell.ppl.len() as f64;

        let mut row = vec![0.0; names.len()];
        let n_seeds = cell.seeds.len() as f64;
        for per_seed in cell.weights.values() {
            for (a, w) in per_seed {
                row[col(&format!("w:{a}"))] += w / n_seeds;
            }
            row[n_cont - 1] += per_seed.len() as f64 / n_seeds;
        }
        row[col(&format!("method:{}", key.method))] = 1.0;
        row[col(&format!("strategy:{}", key.strategy))] = 1.0;
        row[col(&format!("domain:{}", key.eval_domain))] = 1.0;
        data.extend(row);
        y.push((base_mean - ppl) / base_mean);
        row_domains.push(key.eval_domain.clone());
    }
    let continuous = (0..names.len()).map(|c| c < n_cont).collect();
    Ok(FeatureSet {
        x: DMatrix::from_row_slice(y.len(), names.len(), &data),
        names,
        continuous,
        y,
        domains: row_domains,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetaregConfig {
    pub folds: usize,
    pub seed: u64,
    pub alphas: Vec<f64>,
}

impl Default for MetaregConfig {
    fn default() -> Self {
        MetaregConfig {
            folds: 10,
            seed: 0,
            alphas: vec![0.0, 0.01, 0.1, 1.0, 10.0, 100.0],
        }
    }
}

impl MetaregConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 || self.alphas.is_empty() || self.alphas.iter().any(|a| !(*a >= 0.0)) {
            return Err(Error::Config(format!("invalid metareg configuration {self:?}")));
        }
        Ok(())
    }
}

/// Row format of `metareg.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetaregRow {
    pub model: String,
    pub alpha: Option<f64>,
    /// Fold index, `mean`, or `pooled`.
    pub fold: String,
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
    pub r2: Option<f64>,
}

/// Row format of `coefficients.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub feature: String,
    pub coefficient: f64,
}

pub struct MetaregOutput {
    pub rows: Vec<MetaregRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub feature_names: Vec<String>,
    pub best_alpha: f64,
    pub results: Vec<(String, Option<f64>, CvResult)>,
}

fn cv_rows(model: &str, alpha: Option<f64>, cv: &CvResult) -> Vec<MetaregRow> {
    let mut rows: Vec<MetaregRow> = cv
        .folds
        .iter()
        .map(|f| MetaregRow {
            model: model.into(),
            alpha,
            fold: f.fold.to_string(),
            n: f.n,
            pearson: f.pearson,
            spearman: f.spearman,
            r2: None,
        })
        .collect();
    rows.push(MetaregRow {
        model: model.into(),
        alpha,
        fold: "mean".into(),
        n: cv.n,
        pearson: cv.mean_pearson,
        spearman: cv.mean_spearman,
        r2: None,
    });
    rows.push(MetaregRow {
        model: model.into(),
        alpha,
        fold: "pooled".into(),
        n: cv.n,
        pearson: cv.pooled_pearson,
        spearman: cv.pooled_spearman,
        r2: cv.pooled_r2,
    });
    rows
}

/// Sorted by descending `|c|`, entries with `|c| ≤ 0.1` dropped.
pub fn coefficient_report(named: &[(String, f64)]) -> Vec<CoefficientRow> {
    let mut rows: Vec<CoefficientRow> = named
        .iter()
        .filter(|(_, c)| c.abs() > COEFFICIENT_FLOOR)
        .map(|(f, c)| CoefficientRow {
            feature: f.clone(),
            coefficient: *c,
        })
        .collect();
    rows.sort_by(|a, b| {
        b.coefficient
            .abs()
            .total_cmp(&a.coefficient.abs())
            .then_with(|| a.feature.cmp(&b.feature))
    });
    rows
}

/// Mean-difference baseline, linear regression, the ridge α grid, and the
/// best ridge by mean Spearman; coefficients come from the linear model
/// fitted on every row.
pub fn run_metareg(fs: &FeatureSet, cfg: &MetaregConfig) -> Result<MetaregOutput> {
    cfg.validate()?;
    let mut results = Vec::new();
    results.push((
        "mean_diff".to_string(),
        None,
        cross_validate(fs, cfg.folds, cfg.seed, ModelSpec::MeanDiff)?,
    ));
    results.push((
        "linear".to_string(),
        Some(0.0),
        cross_validate(fs, cfg.folds, cfg.seed, ModelSpec::Ridge { alpha: 0.0 })?,
    ));
    let mut best: Option<(f64, f64, CvResult)> = None;
    for &alpha in &cfg.alphas {
        let cv = cross_validate(fs, cfg.folds, cfg.seed, ModelSpec::Ridge { alpha })?;
        let s = cv.mean_spearman.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(_, bs, _)| s > *bs) {
            best = Some((alpha, s, cv.clone()));
        }
        results.push(("ridge".to_string(), Some(alpha), cv));
    }
    let (best_alpha, _, best_cv) = best.expect("alpha grid is non-empty");
    results.push(("ridge_best".to_string(), Some(best_alpha), best_cv));

    let rows = results.iter().flat_map(|(m, a, cv)| cv_rows(m, *a, cv)).collect();
    let all: Vec<usize> = (0..fs.y.len()).collect();
    let linear = FittedRidge::fit(fs, &all, 0.0)?;
    Ok(MetaregOutput {
        rows,
        coefficients: coefficient_report(&linear.named_coefficients(fs)),
        feature_names: fs.names.clone(),
        best_alpha,
        results,
    })
}

/// Convenience accessor: mean Spearman of a named model.
pub fn mean_spearman(out: &MetaregOutput, model: &str) -> Option<f64> {
    out.results
        .iter()
        .find(|(m, ..)| m == model)
        .and_then(|(_, _, cv)| cv.mean_spearman)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{KSpec, Weighting};

    fn rec(strategy: Strategy, k: usize, domain: &str, seed: u64, ppl: f64) -> EvalRecord {
        EvalRecord {
            strategy,
            method: Method::Average,
            weighting: Weighting::Scored,
            k: KSpec::Fixed(k),
            eval_domain: domain.into(),
            seed,
            perplexity: ppl,
            wall_seconds: 0.0,
            co2_g: 0.0,
        }
    }

    fn comp(k: usize, seed: u64, adapter: &str, weight: f64) -> CompositionRow {
        CompositionRow {
            strategy: Strategy::TfIdf,
            method: Method::Average,
            weighting: Weighting::Scored,
            k: KSpec::Fixed(k),
            eval_domain: "m".into(),
            seed,
            adapter: adapter.into(),
            weight,
        }
    }

    #[test]
    fn targets_and_weights() {
        let records = vec![
            rec(Strategy::TfIdf, 0, "m", 1, 4.0),
            rec(Strategy::TfIdf, 2, "m", 1, 3.0),
        ];
        let comps = vec![comp(2, 1, "a", 0.6), comp(2, 1, "b", 0.4)];
        let fs = build_features(&records, &comps).unwrap();
        assert_eq!(fs.y.len(), 2);
        // cells sort by k string: "0" then "2"
        assert_eq!(fs.y[0], 0.0);
        assert_eq!(fs.y[1], 0.25);
        let nonzero = (0..2).filter(|&c| fs.x[(1, c)] != 0.0).count();
        assert_eq!(nonzero, 2);
        assert_eq!(fs.x[(1, 2)], 2.0);
    }

    #[test]
    fn missing_baseline_is_a_data_error() {
        let records = vec![rec(Strategy::TfIdf, 2, "m", 1, 3.0)];
        assert!(matches!(build_features(&records, &[]), Err(Error::Data(_))));
    }

    #[test]
    fn coefficient_report_filters_and_sorts() {
        let named = vec![("a".to_string(), 0.05), ("b".to_string(), -0.5), ("c".to_string(), 2.0)];
        let rows = coefficient_report(&named);
        assert_eq!(
            rows.iter().map(|r| r.feature.as_str()).collect::<Vec<_>>(),
            vec!["c", "b"]
        );
        assert!(coefficient_report(&[("a".to_string(), -0.1)]).is_empty());
    }

    #[test]
    fn baseline_predicts_domain_means() {
        let x = DMatrix::zeros(4, 1);
        let mut fs = FeatureSet::from_matrix(x, vec![0.1, 0.1, 0.3, 0.3]);
        fs.domains = vec!["a".into(), "a".into(), "b".into(), "b".into()];
        let (p, unseen) = baseline_mean_diff(&fs, &[0, 2], &[1, 3]);
        assert_eq!((p, unseen), (vec![0.1, 0.3], 0));
        let (p, unseen) = baseline_mean_diff(&fs, &[0], &[3]);
        assert_eq!((p, unseen), (vec![0.1], 1));
    }
}
