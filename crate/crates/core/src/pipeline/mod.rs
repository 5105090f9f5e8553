//! The end-to-end experiment: corpus generation, training, the benchmark
//! grid, meta-regression, and report series, all under one output
//! directory. Outputs are deterministic given the config; wall-clock
//! measurements live only in the `*_metadata.json` files.

mod config;
mod io;
mod report;

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    generate_synthetic, ingest_files, load_archive, overlap_matrix, save_archive, CorpusSet, DomainCorpus, DomainRole,
};
use crate::error::{Error, Result};
use crate::evaluator::{summarize, Bench, CompositionRow, EnergyModel, EvalRecord, SummaryRow};
use crate::metareg::{build_features, run_metareg, CoefficientRow, MetaregRow};
use crate::model::checkpoint::{load_adapter, load_base, save_adapter, save_base, MANIFEST};
use crate::model::{init_base, AdapterModule, BaseModel, ModelConfig};
use crate::rng::stable_hash;
use crate::scoring::ScoreRecord;
use crate::trainer::{pretrain_base, train_adapter, EpochStats, TrainConfig};

pub use config::{BenchConfig, DataConfig, DataSource, PretrainConfig, ReportConfig, RunConfig};
pub use io::{read_csv, read_json, write_atomic, write_csv, write_json, write_table};
pub use report::{
    autok_sweep, base_perplexities, co2_vs_k, k_order, kl_from_uniform, ppl_vs_k, weight_distributions, weight_kl,
    AutoKRow, Co2Row, PplVsKRow, WeightKlRow, WeightRow, ALL_DOMAINS,
};

/// File layout under the output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Layout { root: root.into() }
    }

    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus")
    }
    pub fn base(&self) -> PathBuf {
        self.root.join("checkpoints").join("base")
    }
    pub fn adapter(&self, domain: &str) -> PathBuf {
        self.root.join("checkpoints").join("adapters").join(domain)
    }
    pub fn scores(&self) -> PathBuf {
        self.root.join("scores")
    }
    pub fn file(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
}

pub const TRAINING_LOG: &str = "training_log.csv";
pub const RESULTS: &str = "results.csv";
pub const SUMMARY: &str = "summary.csv";
pub const COMPOSITIONS: &str = "compositions.csv";
pub const METAREG: &str = "metareg.csv";
pub const COEFFICIENTS: &str = "coefficients.csv";
pub const FEATURES: &str = "features.csv";
pub const PPL_VS_K: &str = "ppl_vs_k.csv";
pub const WEIGHTS: &str = "weights.csv";
pub const WEIGHT_KL: &str = "weight_kl.csv";
pub const CO2_VS_K: &str = "co2_vs_k.csv";
pub const AUTOK_SWEEP: &str = "autok_sweep.csv";
const TRAIN_RECORD: &str = "training.json";

#[derive(Serialize)]
struct Metadata<'a, T: Serialize> {
    command: &'a str,
    started_unix_seconds: u64,
    elapsed_seconds: f64,
    details: T,
}

fn write_metadata<T: Serialize>(
    layout: &Layout,
    command: &str,
    started: (SystemTime, Instant),
    details: T,
) -> Result<()> {
    let meta = Metadata {
        command,
        started_unix_seconds: started.0.duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs()),
        elapsed_seconds: started.1.elapsed().as_secs_f64(),
        details,
    };
    write_json(&layout.file(&format!("{command}_metadata.json")), &meta)
}

fn now() -> (SystemTime, Instant) {
    (SystemTime::now(), Instant::now())
}

pub struct GenDataOutput {
    pub corpus: CorpusSet,
    pub overlap: Vec<Vec<f64>>,
}

impl GenDataOutput {
    /// Token-type overlap matrix as an aligned text table.
    pub fn overlap_table(&self) -> String {
        let ids: Vec<&str> = self.corpus.domains.iter().map(|d| d.domain_id.as_str()).collect();
        let width = ids.iter().map(|s| s.len()).max().unwrap_or(0).max(6);
        let mut out = format!("{:width$}", "");
        for id in &ids {
            out += &format!(" {id:>width$}");
        }
        out.push('\n');
        for (id, row) in ids.iter().zip(&self.overlap) {
            out += &format!("{id:width$}");
            for x in row {
                out += &format!(" {x:>width$.3}");
            }
            out.push('\n');
        }
        out
    }
}

pub fn build_corpus(cfg: &RunConfig) -> Result<CorpusSet> {
    let set = match cfg.data.source()? {
        DataSource::Synthetic(spec) => generate_synthetic(&spec)?,
        DataSource::Files(files) => ingest_files(&files)?,
    };
    set.validate()?;
    Ok(set)
}

/// Builds the corpora, writes the archive, and writes `overlap.csv`.
pub fn gen_data(cfg: &RunConfig) -> Result<GenDataOutput> {
    cfg.validate()?;
    let layout = Layout::new(&cfg.output_dir);
    let corpus = build_corpus(cfg)?;
    save_archive(&corpus, &layout.corpus())?;
    let overlap = overlap_matrix(&corpus.domains);
    let mut header = vec!["domain".to_string()];
    header.extend(corpus.domains.iter().map(|d| d.domain_id.clone()));
    let rows: Vec<Vec<String>> = corpus
        .domains
        .iter()
        .zip(&overlap)
        .map(|(d, row)| {
            std::iter::once(d.domain_id.clone())
                .chain(row.iter().map(|x| x.to_string()))
                .collect()
        })
        .collect();
    write_table(&layout.file("overlap.csv"), &header, &rows)?;
    Ok(GenDataOutput { corpus, overlap })
}

/// One epoch of one training run; the row format of `training_log.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRow {
    /// `pretrain` or `adapter`.
    pub stage: String,
    pub domain: String,
    pub epoch: usize,
    pub loss: f64,
    pub tokens: usize,
    /// Counted seconds of forward and backward work.
    pub seconds: f64,
    pub co2_g: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TrainRecord {
    fingerprint: String,
    history: Vec<TrainLogRow>,
}

/// Forward plus backward is taken as three forward passes.
fn log_rows(
    stage: &str,
    domain: &str,
    history: &[EpochStats],
    model: &ModelConfig,
    cfg: &TrainConfig,
    with_adapter: bool,
    energy: &EnergyModel,
) -> Result<Vec<TrainLogRow>> {
    history
        .iter()
        .map(|h| {
            let flops = 3.0 * h.tokens as f64 * model.forward_flops_per_token(cfg.seq_len, with_adapter);
            let seconds = energy.seconds_for_flops(flops);
            Ok(TrainLogRow {
                stage: stage.into(),
                domain: domain.into(),
                epoch: h.epoch,
                loss: h.loss,
                tokens: h.tokens,
                seconds,
                co2_g: crate::evaluator::co2_estimate(seconds / 3600.0, energy)?,
            })
        })
        .collect()
}

fn corpus_digest(domains: &[&DomainCorpus]) -> String {
    let mut parts = Vec::new();
    for d in domains {
        parts.push(d.domain_id.clone());
        parts.push(format!("{:?}", d.train));
    }
    let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
    format!("{:016x}", stable_hash(&refs))
}

fn fingerprint<T: Serialize>(what: &str, settings: &T, data: &str, base: &str) -> String {
    let json = serde_json::to_string(settings).expect("settings serialize");
    format!("{:016x}", stable_hash(&[what, &json, data, base]))
}

/// A checkpoint counts as complete when its manifest exists and its record
/// was produced by identical settings.
fn completed(dir: &Path, fp: &str) -> Result<Option<Vec<TrainLogRow>>> {
    if !dir.join(MANIFEST).exists() {
        return Ok(None);
    }
    let path = dir.join(TRAIN_RECORD);
    if !path.exists() {
        return Ok(None);
    }
    let rec: TrainRecord = read_json(&path).map_err(|e| match e {
        Error::Malformed { path, reason, .. } => Error::Data(format!("corrupted {}: {reason}", path.display())),
        other => other,
    })?;
    Ok((rec.fingerprint == fp).then_some(rec.history))
}

pub struct TrainOutput {
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub log: Vec<TrainLogRow>,
}

fn train_domains(corpus: &CorpusSet) -> Result<Vec<&DomainCorpus>> {
    let train: Vec<&DomainCorpus> = corpus.with_role(DomainRole::Train).collect();
    if train.is_empty() {
        return Err(Error::Data("the corpus has no training domains".into()));
    }
    Ok(train)
}

/// Pre-trains the base (unless done) and trains one adapter per training
/// domain in parallel, skipping checkpoints already complete.
pub fn train(cfg: &RunConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let started = now();
    let layout = Layout::new(&cfg.output_dir);
    let corpus = load_archive(&layout.corpus())?;
    corpus.validate()?;
    let model = cfg.model_for_vocab(corpus.vocab.len())?;
    let domains = train_domains(&corpus)?;
    let energy = &cfg.energy;

    let pre = cfg.pretrain.train_config(&cfg.train);
    let base_fp = fingerprint("base", &(&model, &cfg.pretrain, &pre), &corpus_digest(&domains), "");
    let base_dir = layout.base();
    let mut trained = Vec::new();
    let mut skipped = Vec::new();
    let (base, base_log): (BaseModel<f32>, Vec<TrainLogRow>) = match completed(&base_dir, &base_fp)? {
        Some(log) => {
            skipped.push("base".to_string());
            (load_base(&base_dir)?, log)
        }
        None => {
            let init = init_base::<f32>(&model, cfg.pretrain.seed)?;
            let (base, log) = if cfg.pretrain.epochs > 0 {
                let t = pretrain_base(&init, &domains, &pre)?;
                let log = log_rows("pretrain", "base", &t.history, &model, &pre, false, energy)?;
                (t.model, log)
            } else {
                (init, Vec::new())
            };
            write_json(
                &base_dir.join(TRAIN_RECORD),
                &TrainRecord {
                    fingerprint: base_fp.clone(),
                    history: log.clone(),
                },
            )?;
            save_base(&base, &base_dir)?;
            trained.push("base".to_string());
            (base, log)
        }
    };

    let results: Vec<(String, bool, Vec<TrainLogRow>)> = domains
        .par_iter()
        .map(|d| {
            let dir = layout.adapter(&d.domain_id);
            let fp = fingerprint("adapter", &cfg.train, &corpus_digest(&[d]), &base_fp);
            if let Some(log) = completed(&dir, &fp)? {
                load_adapter(&dir, &base)?;
                return Ok((d.domain_id.clone(), false, log));
            }
            let t = train_adapter(&base, d, &cfg.train)?;
            let log = log_rows("adapter", &d.domain_id, &t.history, &model, &cfg.train, true, energy)?;
            write_json(
                &dir.join(TRAIN_RECORD),
                &TrainRecord {
                    fingerprint: fp,
                    history: log.clone(),
                },
            )?;
            save_adapter(&t.model, &dir)?;
            Ok((d.domain_id.clone(), true, log))
        })
        .collect::<Result<_>>()?;

    let mut log = base_log;
    for (id, fresh, rows) in results {
        if fresh {
            trained.push(id);
        } else {
            skipped.push(id);
        }
        log.extend(rows);
    }
    write_csv(&layout.file(TRAINING_LOG), &log, &[])?;
    write_metadata(
        &layout,
        "train",
        started,
        serde_json::json!({ "trained": trained, "skipped": skipped }),
    )?;
    Ok(TrainOutput { trained, skipped, log })
}

/// Loads the base and every training-domain adapter from `layout`.
pub fn load_checkpoints(layout: &Layout, corpus: &CorpusSet) -> Result<(BaseModel<f32>, Vec<AdapterModule<f32>>)> {
    let base = load_base(&layout.base())?;
    if base.config.vocab_size != corpus.vocab.len() {
        return Err(Error::Data(format!(
            "base checkpoint expects {} tokens but the corpus vocabulary has {}",
            base.config.vocab_size,
            corpus.vocab.len()
        )));
    }
    let adapters = train_domains(corpus)?
        .iter()
        .map(|d| {
            let a = load_adapter(&layout.adapter(&d.domain_id), &base)?;
            if a.domain_id != d.domain_id {
                return Err(Error::Data(format!(
                    "adapter checkpoint for `{}` is labeled `{}`",
                    d.domain_id, a.domain_id
                )));
            }
            Ok(a)
        })
        .collect::<Result<_>>()?;
    Ok((base, adapters))
}

pub struct BenchOutput {
    pub records: Vec<EvalRecord>,
    pub summary: Vec<SummaryRow>,
    pub compositions: Vec<CompositionRow>,
    pub scores: Vec<ScoreRecord>,
}

pub fn score_file_name(s: &ScoreRecord) -> String {
    format!("{}__{}__{}.json", s.strategy, s.eval_domain, s.seed)
}

/// Runs the grid and writes `results.csv`, `summary.csv`,
/// `compositions.csv`, and `scores/`.
pub fn bench(cfg: &RunConfig) -> Result<BenchOutput> {
    cfg.validate()?;
    let started = now();
    let layout = Layout::new(&cfg.output_dir);
    let corpus = load_archive(&layout.corpus())?;
    corpus.validate()?;
    let (base, adapters) = load_checkpoints(&layout, &corpus)?;
    if cfg.bench.eval_seq_len > base.config.max_seq_len {
        return Err(Error::Config(format!(
            "bench.eval_seq_len {} exceeds the checkpoint's max_seq_len {}",
            cfg.bench.eval_seq_len, base.config.max_seq_len
        )));
    }
    cfg.scoring.validate(&base.config)?;
    let bench = Bench {
        base: &base,
        adapters: &adapters,
        corpora: &corpus,
        scoring: cfg.scoring.clone(),
        eval_seq_len: cfg.bench.eval_seq_len,
        energy: cfg.energy.clone(),
        space: cfg.bench.ensemble_space,
    };
    let out = bench.run_grid(&cfg.grid)?;
    let summary = summarize(&out.records)?;

    write_csv(&layout.file(RESULTS), &out.records, &[])?;
    write_csv(&layout.file(SUMMARY), &summary, &[])?;
    write_csv(
        &layout.file(COMPOSITIONS),
        &out.compositions,
        &[
            "strategy",
            "method",
            "weighting",
            "k",
            "eval_domain",
            "seed",
            "adapter",
            "weight",
        ],
    )?;
    let scores_dir = layout.scores();
    if scores_dir.exists() {
        std::fs::remove_dir_all(&scores_dir).map_err(|e| Error::io(&scores_dir, e))?;
    }
    for s in &out.scores {
        write_json(&scores_dir.join(score_file_name(s)), s)?;
    }
    write_metadata(
        &layout,
        "bench",
        started,
        serde_json::json!({
            "cells": out.records.len(),
            "grid_seconds": out.elapsed_seconds,
            "timing": cfg.energy.timing,
            "ensemble_space": cfg.bench.ensemble_space,
        }),
    )?;
    Ok(BenchOutput {
        records: out.records,
        summary,
        compositions: out.compositions,
        scores: out.scores,
    })
}

/// Every score record under `scores/`, in file-name order.
pub fn read_scores(layout: &Layout) -> Result<Vec<ScoreRecord>> {
    let dir = layout.scores();
    if !dir.exists() {
        return Err(Error::missing(&dir, "score directory not found"));
    }
    let mut paths: Vec<PathBuf> = std::fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(&dir, err)))
        .collect::<Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|x| x == "json"));
    paths.sort();
    paths.iter().map(|p| read_json(p)).collect()
}

pub struct MetaregOutputFiles {
    pub rows: Vec<MetaregRow>,
    pub coefficients: Vec<CoefficientRow>,
    pub best_alpha: f64,
}

/// Fits the meta-models on `results.csv` and `compositions.csv`.
pub fn metareg(cfg: &RunConfig) -> Result<MetaregOutputFiles> {
    cfg.metareg.validate()?;
    let started = now();
    let layout = Layout::new(&cfg.output_dir);
    let records: Vec<EvalRecord> = read_csv(&layout.file(RESULTS))?;
    let compositions: Vec<CompositionRow> = read_csv(&layout.file(COMPOSITIONS))?;
    let fs = build_features(&records, &compositions)?;
    let out = run_metareg(&fs, &cfg.metareg)?;

    let mut header = fs.names.clone();
    header.push("eval_domain".into());
    header.push("target".into());
    let rows: Vec<Vec<String>> = (0..fs.y.len())
        .map(|r| {
            (0..fs.x.ncols())
                .map(|c| fs.x[(r, c)].to_string())
                .chain([fs.domains[r].clone(), fs.y[r].to_string()])
                .collect()
        })
        .collect();
    write_table(&layout.file(FEATURES), &header, &rows)?;
    write_csv(&layout.file(METAREG), &out.rows, &[])?;
    write_csv(
        &layout.file(COEFFICIENTS),
        &out.coefficients,
        &["feature", "coefficient"],
    )?;
    write_metadata(
        &layout,
        "metareg",
        started,
        serde_json::json!({
            "rows": fs.y.len(),
            "features": fs.names,
            "standardized": fs.names.iter().zip(&fs.continuous).filter(|(_, c)| **c).map(|(n, _)| n).collect::<Vec<_>>(),
            "target": "(base_perplexity - perplexity) / base_perplexity, seed-averaged",
            "solver": "closed-form ridge, unpenalized intercept by centering; constant or collinear training columns dropped per fold",
            "folds": cfg.metareg.folds,
            "fold_seed": cfg.metareg.seed,
            "best_alpha": out.best_alpha,
            "coefficients_from": "linear model fit on all rows, standardized continuous features",
        }),
    )?;
    Ok(MetaregOutputFiles {
        rows: out.rows,
        coefficients: out.coefficients,
        best_alpha: out.best_alpha,
    })
}

pub struct ReportOutput {
    pub ppl_vs_k: Vec<PplVsKRow>,
    pub weights: Vec<WeightRow>,
    pub weight_kl: Vec<WeightKlRow>,
    pub co2_vs_k: Vec<Co2Row>,
    pub autok: Vec<AutoKRow>,
}

/// Writes the per-figure data series from the benchmark outputs.
pub fn report(cfg: &RunConfig) -> Result<ReportOutput> {
    let layout = Layout::new(&cfg.output_dir);
    let records: Vec<EvalRecord> = read_csv(&layout.file(RESULTS))?;
    if records.is_empty() {
        return Err(Error::Malformed {
            path: layout.file(RESULTS),
            line: 1,
            reason: "no result rows".into(),
        });
    }
    let scores = read_scores(&layout)?;
    let out = ReportOutput {
        ppl_vs_k: ppl_vs_k(&records)?,
        weights: weight_distributions(&scores)?,
        weight_kl: weight_kl(&scores),
        co2_vs_k: co2_vs_k(&records),
        autok: autok_sweep(&records, &scores, &cfg.report.auto_thresholds)?,
    };
    write_csv(&layout.file(PPL_VS_K), &out.ppl_vs_k, &[])?;
    write_csv(
        &layout.file(WEIGHTS),
        &out.weights,
        &["strategy", "eval_domain", "adapter", "weight"],
    )?;
    write_csv(
        &layout.file(WEIGHT_KL),
        &out.weight_kl,
        &["strategy", "eval_domain", "n", "kl_from_uniform"],
    )?;
    write_csv(&layout.file(CO2_VS_K), &out.co2_vs_k, &[])?;
    write_csv(
        &layout.file(AUTOK_SWEEP),
        &out.autok,
        &[
            "threshold",
            "strategy",
            "method",
            "n",
            "n_missing",
            "mean_k",
            "fraction_of_optimal",
        ],
    )?;
    Ok(out)
}
