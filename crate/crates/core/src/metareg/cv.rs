use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::seeded;

use super::ridge::{fit_ridge, independent_columns, RidgeModel};
use super::stats::{pearson, r_squared, spearman};
use super::FeatureSet;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelSpec {
    /// Per-eval-domain mean of the training targets.
    MeanDiff,
    Ridge {
        alpha: f64,
    },
}

/// Ridge on a standardized, rank-reduced design: continuous columns are
/// z-scored with training statistics and columns that are constant or
/// collinear on the training rows are dropped.
#[derive(Clone, Debug)]
pub struct FittedRidge {
    pub columns: Vec<usize>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
    pub model: RidgeModel,
}

impl FittedRidge {
    pub fn fit(fs: &FeatureSet, rows: &[usize], alpha: f64) -> Result<Self> {
        let p = fs.x.ncols();
        let n = rows.len() as f64;
        let mut means = vec![0.0; p];
        let mut scales = vec![1.0; p];
        for c in 0..p {
            if !fs.continuous[c] {
                continue;
            }
            let m = rows.iter().map(|&r| fs.x[(r, c)]).sum::<f64>() / n;
            let sd = (rows.iter().map(|&r| (fs.x[(r, c)] - m).powi(2)).sum::<f64>() / n).sqrt();
            means[c] = m;
            scales[c] = if sd > 0.0 { sd } else { 1.0 };
        }
        let full = DMatrix::from_fn(rows.len(), p, |i, c| (fs.x[(rows[i], c)] - means[c]) / scales[c]);
        let columns = independent_columns(&full);
        let x = full.select_columns(&columns);
        let y: Vec<f64> = rows.iter().map(|&r| fs.y[r]).collect();
        let model = fit_ridge(&x, &y, alpha, true)?;
        Ok(FittedRidge {
            columns,
            means,
            scales,
            model,
        })
    }

    pub fn predict(&self, fs: &FeatureSet, rows: &[usize]) -> Vec<f64> {
        rows.iter()
            .map(|&r| {
                let row: Vec<f64> = self
                    .columns
                    .iter()
                    .map(|&c| (fs.x[(r, c)] - self.means[c]) / self.scales[c])
                    .collect();
                self.model.predict_row(&row)
            })
            .collect()
    }

    /// Names of the kept columns with their coefficients.
    pub fn named_coefficients(&self, fs: &FeatureSet) -> Vec<(String, f64)> {
        self.columns
            .iter()
            .zip(&self.model.coefficients)
            .map(|(&c, &b)| (fs.names[c].clone(), b))
            .collect()
    }
}

/// Predictions of the mean-difference baseline, and how many test rows fell
/// back to the global mean because their domain was unseen.
pub fn baseline_mean_diff(fs: &FeatureSet, train: &[usize], test: &[usize]) -> (Vec<f64>, usize) {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for &r in train {
        let e = sums.entry(fs.domains[r].as_str()).or_default();
        e.0 += fs.y[r];
        e.1 += 1;
    }
    let global = train.iter().map(|&r| fs.y[r]).sum::<f64>() / train.len().max(1) as f64;
    let mut unseen = 0;
    let preds = test
        .iter()
        .map(|&r| match sums.get(fs.domains[r].as_str()) {
            Some((s, n)) => s / *n as f64,
            None => {
                unseen += 1;
                global
            }
        })
        .collect();
    (preds, unseen)
}

/// Balanced fold labels from a seeded shuffle of the row indices.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeded(seed, 0xf01d));
    let mut out = vec![0; n];
    for (i, &r) in order.iter().enumerate() {
        out[r] = i % folds;
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldScore {
    pub fold: usize,
    pub n: usize,
    pub pearson: Option<f64>,
    pub spearman: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CvResult {
    pub folds: Vec<FoldScore>,
    /// Averages over folds with a defined correlation.
    pub mean_pearson: Option<f64>,
    pub mean_spearman: Option<f64>,
    /// Correlations of all held-out predictions pooled together.
    pub pooled_pearson: Option<f64>,
    pub pooled_spearman: Option<f64>,
    pub pooled_r2: Option<f64>,
    /// Folds whose correlation is undefined plus baseline rows with unseen domains.
    pub flagged: usize,
    pub n: usize,
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Vec<f64> = xs.flatten().collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn cross_validate(fs: &FeatureSet, folds: usize, seed: u64, spec: ModelSpec) -> Result<CvResult> {
    let n = fs.y.len();
    if folds < 2 || n < folds {
        return Err(Error::Argument(format!("{n} rows cannot be split into {folds} folds")));
    }
    let labels = fold_assignment(n, folds, seed);
    let mut scores = Vec::with_capacity(folds);
    let mut pooled_pred = vec![0.0; n];
    let mut flagged = 0;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&r| labels[r] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&r| labels[r] == f).collect();
        let pred = match spec {
            ModelSpec::MeanDiff => {
                let (p, unseen) = baseline_mean_diff(fs, &train, &test);
                flagged += unseen;
                p
            }
            ModelSpec::Ridge { alpha } => FittedRidge::fit(fs, &train, alpha)?.predict(fs, &test),
        };
        let truth: Vec<f64> = test.iter().map(|&r| fs.y[r]).collect();
        for (&r, &p) in test.iter().zip(&pred) {
            pooled_pred[r] = p;
        }
        let s = FoldScore {
            fold: f,
            n: test.len(),
            pearson: pearson(&pred, &truth),
            spearman: spearman(&pred, &truth),
        };
        if s.pearson.is_none() || s.spearman.is_none() {
            flagged += 1;
        }
        scores.push(s);
    }
    Ok(CvResult {
        mean_pearson: mean_defined(scores.iter().map(|s| s.pearson)),
        mean_spearman: mean_defined(scores.iter().map(|s| s.spearman)),
        pooled_pearson: pearson(&pooled_pred, &fs.y),
        pooled_spearman: spearman(&pooled_pred, &fs.y),
        pooled_r2: r_squared(&fs.y, &pooled_pred),
        folds: scores,
        flagged,
        n,
    })
}
