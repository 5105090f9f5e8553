use std::collections::{BTreeMap, BTreeSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::composer::{
    average_params, compose, select_and_weight, CompositionPlan, EnsembleSpace, KSpec, Method, Weighting,
};
use crate::corpus::{pack_windows, sample_sequences, CorpusSet, DomainRole};
use crate::error::{Error, Result};
use crate::model::{Adapted, AdapterModule, BaseModel, CausalLm, ModelConfig};
use crate::scalar::Scalar;
use crate::scoring::{
    score_entropy, score_prior, score_sentsim, score_tfidf, MeanEmbedding, PriorConfig, ScoreRecord, ScoreVector,
    Strategy, WeightVector,
};

use super::{co2_estimate, perplexity_from_probs, EnergyModel, EvalRecord, Timing};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScoringConfig {
    /// Sequences sampled from each domain for scoring.
    pub n_samples: usize,
    /// Token cap per sampled sequence.
    pub sample_len: usize,
    /// Split the samples are drawn from, for candidates and target alike.
    pub split: String,
    pub prior: PriorConfig,
    pub entropy_batch_size: usize,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        ScoringConfig {
            n_samples: 100,
            sample_len: 128,
            split: "dev".into(),
            prior: PriorConfig::default(),
            entropy_batch_size: 10,
        }
    }
}

impl ScoringConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        self.prior.validate()?;
        self.split
            .parse::<crate::corpus::Split>()
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.n_samples == 0 || self.entropy_batch_size == 0 || self.sample_len < 2 {
            return Err(Error::Config(format!("invalid scoring configuration {self:?}")));
        }
        if self.sample_len > model.max_seq_len + 1 {
            return Err(Error::Config(format!(
                "scoring.sample_len {} exceeds model.max_seq_len + 1",
                self.sample_len
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSpec {
    pub strategies: Vec<Strategy>,
    pub methods: Vec<Method>,
    pub weightings: Vec<Weighting>,
    pub k: Vec<KSpec>,
    pub seeds: Vec<u64>,
    /// Empty means every domain with the eval role.
    pub eval_domains: Vec<String>,
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec {
            strategies: Strategy::ALL.to_vec(),
            methods: Method::ALL.to_vec(),
            weightings: Weighting::ALL.to_vec(),
            k: vec![
                KSpec::Fixed(0),
                KSpec::Fixed(1),
                KSpec::Fixed(2),
                KSpec::Fixed(3),
                KSpec::Fixed(4),
                KSpec::Auto(crate::composer::DEFAULT_AUTO_THRESHOLD),
            ],
            seeds: vec![5, 10, 42, 88],
            eval_domains: Vec::new(),
        }
    }
}

impl GridSpec {
    pub fn validate(&self, n_adapters: usize) -> Result<()> {
        let empty = |axis: &str| Err(Error::Config(format!("grid.{axis} must not be empty")));
        if self.strategies.is_empty() {
            return empty("strategies");
        }
        if self.methods.is_empty() {
            return empty("methods");
        }
        if self.weightings.is_empty() {
            return empty("weightings");
        }
        if self.k.is_empty() {
            return empty("k");
        }
        if self.seeds.is_empty() {
            return empty("seeds");
        }
        for k in &self.k {
            match *k {
                KSpec::Fixed(k) if k > n_adapters => {
                    return Err(Error::Config(format!("grid k = {k} exceeds the {n_adapters} adapters")))
                }
                KSpec::Auto(t) if !(t > 0.0) => {
                    return Err(Error::Config(format!("auto-k threshold {t} must be positive")))
                }
                _ => {}
            }
        }
        if self.plans().is_empty() {
            return Err(Error::Config("the grid contains no valid plan".into()));
        }
        Ok(())
    }

    /// Every (strategy, method, weighting, k) combination, skipping
    /// uniform-after-selection for the uniform strategy.
    pub fn plans(&self) -> Vec<(Strategy, Method, Weighting, KSpec)> {
        let mut out = Vec::new();
        for &s in &self.strategies {
            for &m in &self.methods {
                for &w in &self.weightings {
                    if w == Weighting::Uniform && !s.selects() {
                        continue;
                    }
                    for &k in &self.k {
                        out.push((s, m, w, k));
                    }
                }
            }
        }
        out
    }
}

/// One selected adapter of one cell; the row format of `compositions.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompositionRow {
    pub strategy: Strategy,
    pub method: Method,
    pub weighting: Weighting,
    pub k: KSpec,
    pub eval_domain: String,
    pub seed: u64,
    pub adapter: String,
    pub weight: f64,
}

#[derive(Clone, Debug)]
pub struct GridOutput {
    pub records: Vec<EvalRecord>,
    pub compositions: Vec<CompositionRow>,
    pub scores: Vec<ScoreRecord>,
    /// Wall clock of the whole run.
    pub elapsed_seconds: f64,
}

/// Everything a benchmark run evaluates against.
pub struct Bench<'a, T> {
    pub base: &'a BaseModel<T>,
    /// Candidate adapters, in candidate order.
    pub adapters: &'a [AdapterModule<T>],
    pub corpora: &'a CorpusSet,
    pub scoring: ScoringConfig,
    /// Predictions per evaluation window.
    pub eval_seq_len: usize,
    pub energy: EnergyModel,
    pub space: EnsembleSpace,
}

type ScoreKey = (Strategy, String, u64);

fn windows_flops(cfg: &ModelConfig, windows: &[Vec<u32>], with_adapter: bool) -> f64 {
    windows
        .iter()
        .map(|w| {
            let n = w.len().saturating_sub(1);
            n as f64 * cfg.forward_flops_per_token(n, with_adapter)
        })
        .sum()
}

fn realized_over(model: &dyn CausalLm, windows: &[Vec<u32>]) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    for w in windows {
        out.extend(model.realized_probs(w)?);
    }
    Ok(out)
}

fn weight_key(w: &WeightVector) -> String {
    w.iter()
        .map(|(d, x)| format!("{d}={:016x}", x.to_bits()))
        .collect::<Vec<_>>()
        .join(",")
}

impl<'a, T: Scalar> Bench<'a, T> {
    pub fn candidate_ids(&self) -> Vec<String> {
        self.adapters.iter().map(|a| a.domain_id.clone()).collect()
    }

    pub fn eval_domains(&self, grid: &GridSpec) -> Result<Vec<String>> {
        let ids: Vec<String> = if grid.eval_domains.is_empty() {
            self.corpora
                .with_role(DomainRole::Eval)
                .map(|d| d.domain_id.clone())
                .collect()
        } else {
            grid.eval_domains.clone()
        };
        if ids.is_empty() {
            return Err(Error::Config("no evaluation domains".into()));
        }
        for id in &ids {
            self.corpora
                .get(id)
                .map_err(|_| Error::Config(format!("evaluation domain `{id}` is not in the corpus")))?;
        }
        Ok(ids)
    }

    fn samples(&self, domain: &str, seed: u64) -> Result<Vec<Vec<u32>>> {
        let c = self.corpora.get(domain)?;
        sample_sequences(
            c,
            &self.scoring.split,
            self.scoring.n_samples,
            self.scoring.sample_len,
            seed,
        )
    }

    /// Raw scores of every candidate for `eval_domain` and the counted work
    /// spent producing them.
    pub fn score(&self, strategy: Strategy, eval_domain: &str, seed: u64) -> Result<(ScoreVector, f64)> {
        let ids = self.candidate_ids();
        let cfg = &self.base.config;
        let target = self.samples(eval_domain, seed)?;
        let candidate_samples = || -> Result<Vec<(String, Vec<Vec<u32>>)>> {
            ids.iter().map(|d| Ok((d.clone(), self.samples(d, seed)?))).collect()
        };
        let tokens = |sets: &[(String, Vec<Vec<u32>>)]| -> f64 {
            sets.iter()
                .flat_map(|(_, s)| s)
                .chain(&target)
                .map(|s| s.len() as f64)
                .sum()
        };
        let models = || -> Vec<(String, Adapted<'_, T>)> {
            self.adapters
                .iter()
                .map(|a| (a.domain_id.clone(), Adapted::new(self.base, Some(a))))
                .collect()
        };
        let model_flops = || {
            let per = windows_flops(cfg, &target, true);
            per * self.adapters.len() as f64
        };
        match strategy {
            Strategy::Uniform => Ok((ScoreVector::new(strategy, ids.clone(), vec![1.0; ids.len()])?, 0.0)),
            Strategy::SentSim => {
                let cands = candidate_samples()?;
                let table = self.base.params.get("tok_emb")?;
                let s = score_sentsim(&cands, &target, &MeanEmbedding::new(table))?;
                let flops = tokens(&cands) * 2.0 * cfg.d_model as f64;
                Ok((s, flops))
            }
            Strategy::TfIdf => {
                let cands = candidate_samples()?;
                let s = score_tfidf(&cands, &target)?;
                Ok((s, tokens(&cands) * 4.0))
            }
            Strategy::Prior => {
                let ms = models();
                let dyns: Vec<(String, &dyn CausalLm)> =
                    ms.iter().map(|(d, m)| (d.clone(), m as &dyn CausalLm)).collect();
                Ok((score_prior(&dyns, &target, &self.scoring.prior)?, model_flops()))
            }
            Strategy::Entropy => {
                let ms = models();
                let dyns: Vec<(String, &dyn CausalLm)> =
                    ms.iter().map(|(d, m)| (d.clone(), m as &dyn CausalLm)).collect();
                Ok((
                    score_entropy(&dyns, &target, self.scoring.entropy_batch_size)?,
                    model_flops(),
                ))
            }
        }
    }

    fn eval_windows(&self, domain: &str) -> Result<Vec<Vec<u32>>> {
        let w = pack_windows(&self.corpora.get(domain)?.eval, self.eval_seq_len);
        if w.is_empty() {
            return Err(Error::Data(format!("domain `{domain}` has an empty eval split")));
        }
        Ok(w)
    }

    fn adapter(&self, id: &str) -> Result<&'a AdapterModule<T>> {
        self.adapters
            .iter()
            .find(|a| a.domain_id == id)
            .ok_or_else(|| Error::Structural(format!("no adapter for domain `{id}`")))
    }

    /// Counted work of one cell beyond scoring.
    fn cell_flops(&self, method: Method, weights: Option<&WeightVector>, windows: &[Vec<u32>]) -> f64 {
        let cfg = &self.base.config;
        let Some(w) = weights else {
            return windows_flops(cfg, windows, false);
        };
        let k = w.len() as f64;
        let one = windows_flops(cfg, windows, true);
        match method {
            Method::Average => {
                let numel = self.adapters.first().map_or(0, |a| a.params.numel()) as f64;
                2.0 * k * numel + one
            }
            Method::Ensemble => {
                let tokens: f64 = windows.iter().map(|w| w.len().saturating_sub(1) as f64).sum();
                k * one + 2.0 * k * tokens
            }
        }
    }

    fn timed(&self, flops: f64, measured: Option<f64>) -> Result<(f64, f64)> {
        let seconds = match (self.energy.timing, measured) {
            (Timing::Measured, Some(s)) => s,
            _ => self.energy.seconds_for_flops(flops),
        };
        Ok((seconds, co2_estimate(seconds / 3600.0, &self.energy)?))
    }

    /// Perplexity of one cell straight from the composer, without caches.
    pub fn direct_perplexity(&self, plan: &CompositionPlan, eval_domain: &str) -> Result<(f64, Option<WeightVector>)> {
        let (scores, _) = self.score(plan.strategy, eval_domain, plan.seed)?;
        let comp = compose(plan, self.base, self.adapters, &scores, self.space)?;
        let windows = self.eval_windows(eval_domain)?;
        let ppl = perplexity_from_probs(&realized_over(&comp.model, &windows)?)?;
        Ok((ppl, comp.weights))
    }

    pub fn run_grid(&self, grid: &GridSpec) -> Result<GridOutput> {
        let started = Instant::now();
        grid.validate(self.adapters.len())?;
        let domains = self.eval_domains(grid)?;
        let plans = grid.plans();

        let mut score_keys: BTreeSet<ScoreKey> = BTreeSet::new();
        for &(s, ..) in &plans {
            for d in &domains {
                for &seed in &grid.seeds {
                    score_keys.insert((s, d.clone(), seed));
                }
            }
        }
        let score_keys: Vec<ScoreKey> = score_keys.into_iter().collect();
        let scored: Vec<(ScoreVector, f64)> = score_keys
            .par_iter()
            .map(|(s, d, seed)| self.score(*s, d, *seed))
            .collect::<Result<_>>()?;
        let scores: BTreeMap<&ScoreKey, &(ScoreVector, f64)> = score_keys.iter().zip(&scored).collect();

        struct Cell<'p> {
            plan: CompositionPlan,
            domain: &'p str,
            weights: Option<WeightVector>,
        }
        let mut cells = Vec::new();
        for &(strategy, method, weighting, k) in &plans {
            for d in &domains {
                for &seed in &grid.seeds {
                    let plan = CompositionPlan {
                        strategy,
                        k,
                        weighting,
                        method,
                        seed,
                    };
                    let (sv, _) = scores[&(strategy, d.clone(), seed)];
                    let weights = select_and_weight(&plan, sv)?;
                    cells.push(Cell {
                        plan,
                        domain: d.as_str(),
                        weights,
                    });
                }
            }
        }

        let windows: BTreeMap<&str, Vec<Vec<u32>>> = domains
            .iter()
            .map(|d| Ok((d.as_str(), self.eval_windows(d)?)))
            .collect::<Result<_>>()?;

        let measured: Vec<Option<(f64, f64)>> = if self.energy.timing == Timing::Measured {
            cells
                .iter()
                .map(|c| {
                    let t = Instant::now();
                    let (ppl, _) = self.direct_perplexity(&c.plan, c.domain)?;
                    Ok(Some((ppl, t.elapsed().as_secs_f64())))
                })
                .collect::<Result<_>>()?
        } else {
            vec![None; cells.len()]
        };

        // base and single-adapter realized probabilities, reused by every
        // probability-space ensemble
        let mut member_keys: BTreeSet<(Option<String>, &str)> = BTreeSet::new();
        let mut average_keys: BTreeMap<(String, &str), &WeightVector> = BTreeMap::new();
        let mut logit_keys: BTreeMap<(String, &str), &WeightVector> = BTreeMap::new();
        for (c, m) in cells.iter().zip(&measured) {
            if m.is_some() {
                continue;
            }
            match (&c.weights, c.plan.method) {
                (None, _) => {
                    member_keys.insert((None, c.domain));
                }
                (Some(w), Method::Ensemble) if self.space == EnsembleSpace::Probability => {
                    for d in &w.domains {
                        member_keys.insert((Some(d.clone()), c.domain));
                    }
                }
                (Some(w), Method::Ensemble) => {
                    logit_keys.insert((weight_key(w), c.domain), w);
                }
                (Some(w), Method::Average) => {
                    average_keys.insert((weight_key(w), c.domain), w);
                }
            }
        }
        let member_keys: Vec<_> = member_keys.into_iter().collect();
        let member_probs: Vec<Vec<f64>> = member_keys
            .par_iter()
            .map(|(a, d)| {
                let adapter = a.as_deref().map(|id| self.adapter(id)).transpose()?;
                realized_over(&Adapted::new(self.base, adapter), &windows[d])
            })
            .collect::<Result<_>>()?;
        let member_probs: BTreeMap<_, _> = member_keys.iter().cloned().zip(member_probs).collect();

        let composed_ppl = |keys: BTreeMap<(String, &'_ str), &WeightVector>,
                            method: Method|
         -> Result<BTreeMap<(String, String), f64>> {
            let keys: Vec<_> = keys.into_iter().collect();
            let ppls: Vec<f64> = keys
                .par_iter()
                .map(|((_, d), w)| {
                    let members = w
                        .domains
                        .iter()
                        .map(|id| self.adapter(id))
                        .collect::<Result<Vec<_>>>()?;
                    let probs = match method {
                        Method::Average => {
                            let avg = average_params(&members, &w.weights)?;
                            realized_over(&Adapted::new(self.base, Some(&avg)), &windows[d])?
                        }
                        Method::Ensemble => {
                            let model = crate::composer::ComposedModel::Ensemble {
                                base: self.base,
                                members,
                                weights: w.weights.clone(),
                                space: self.space,
                            };
                            realized_over(&model, &windows[d])?
                        }
                    };
                    perplexity_from_probs(&probs)
                })
                .collect::<Result<_>>()?;
            Ok(keys
                .into_iter()
                .map(|((k, d), _)| (k, d.to_string()))
                .zip(ppls)
                .collect())
        };
        let averaged = composed_ppl(average_keys, Method::Average)?;
        let logit = composed_ppl(logit_keys, Method::Ensemble)?;

        let mut records = Vec::with_capacity(cells.len());
        let mut compositions = Vec::new();
        for (c, m) in cells.iter().zip(&measured) {
            let win = &windows[c.domain];
            let ppl = match (m, &c.weights, c.plan.method) {
                (Some((ppl, _)), ..) => *ppl,
                (None, None, _) => perplexity_from_probs(&member_probs[&(None, c.domain)])?,
                (None, Some(w), Method::Average) => averaged[&(weight_key(w), c.domain.to_string())],
                (None, Some(w), Method::Ensemble) if self.space == EnsembleSpace::Probability => {
                    let mut mix = vec![0.0; member_probs[&(Some(w.domains[0].clone()), c.domain)].len()];
                    for (id, x) in w.iter() {
                        for (o, p) in mix.iter_mut().zip(&member_probs[&(Some(id.to_string()), c.domain)]) {
                            *o += x * p;
                        }
                    }
                    perplexity_from_probs(&mix)?
                }
                (None, Some(w), Method::Ensemble) => logit[&(weight_key(w), c.domain.to_string())],
            };
            let score_flops = if c.weights.is_some() {
                scores[&(c.plan.strategy, c.domain.to_string(), c.plan.seed)].1
            } else {
                0.0
            };
            let flops = score_flops + self.cell_flops(c.plan.method, c.weights.as_ref(), win);
            let (wall_seconds, co2_g) = self.timed(flops, m.map(|(_, s)| s))?;
            records.push(EvalRecord {
                strategy: c.plan.strategy,
                method: c.plan.method,
                weighting: c.plan.weighting,
                k: c.plan.k,
                eval_domain: c.domain.to_string(),
                seed: c.plan.seed,
                perplexity: ppl,
                wall_seconds,
                co2_g,
            });
            if let Some(w) = &c.weights {
                for (id, x) in w.iter() {
                    compositions.push(CompositionRow {
                        strategy: c.plan.strategy,
                        method: c.plan.method,
                        weighting: c.plan.weighting,
                        k: c.plan.k,
                        eval_domain: c.domain.to_string(),
                        seed: c.plan.seed,
                        adapter: id.to_string(),
                        weight: x,
                    });
                }
            }
        }

        let score_records = score_keys
            .iter()
            .map(|key| ScoreRecord::new(&scores[key].0, &key.1, key.2))
            .collect::<Result<_>>()?;
        Ok(GridOutput {
            records,
            compositions,
            scores: score_records,
            elapsed_seconds: started.elapsed().as_secs_f64(),
        })
    }
}
