//! Adapter training by causal language modeling over a frozen base, plus an
//! optional short pre-training pass that gives the base some structure.

use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::corpus::{pack_windows, DomainCorpus};
use crate::error::{Error, Result};
use crate::kernel::{adam_step, AdamConfig, AdamState, GradTape, NodeId, ParamTree};
use crate::model::{bind, build_logits, AdapterModule, BaseModel, Bound};
use crate::rng::{seeded, stable_hash};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Packed windows per optimizer step.
    pub batch_size: usize,
    pub seq_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 5,
            lr: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            batch_size: 4,
            seq_len: 128,
            seed: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.lr > 0.0
            && self.weight_decay >= 0.0
            && self.beta1 > 0.0
            && self.beta1 < 1.0
            && self.beta2 > 0.0
            && self.beta2 < 1.0
            && self.eps > 0.0
            && self.batch_size > 0
            && self.seq_len > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training configuration {self:?}")))
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Token-weighted mean training NLL over the epoch.
    pub loss: f64,
    pub seconds: f64,
    pub tokens: usize,
}

#[derive(Clone, Debug)]
pub struct Trained<M> {
    pub model: M,
    pub history: Vec<EpochStats>,
}

impl<M> Trained<M> {
    pub fn losses(&self) -> Vec<f64> {
        self.history.iter().map(|e| e.loss).collect()
    }
}

/// Splits a window of `L + 1` tokens into inputs and next-token targets.
fn io_pair(window: &[u32]) -> (&[u32], Vec<usize>) {
    let inputs = &window[..window.len() - 1];
    let targets = window[1..].iter().map(|&t| t as usize).collect();
    (inputs, targets)
}

/// Shared mini-batch loop. `record` puts the loss of one window on a tape
/// where `trainable` is bound with gradients and returns the loss node.
fn fit<T, F>(
    params: &mut ParamTree<T>,
    windows: &[Vec<u32>],
    cfg: &TrainConfig,
    stream: &str,
    record: F,
) -> Result<Vec<EpochStats>>
where
    T: Scalar,
    F: Fn(&mut GradTape<T>, &Bound, &[u32], &[usize]) -> Result<NodeId>,
{
    let hyper = cfg.adam();
    let mut state = AdamState::new(params);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let mut rng = seeded(cfg.seed, stable_hash(&["epoch", stream, &epoch.to_string()]));
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);

        for batch in order.chunks(cfg.batch_size) {
            let batch_tokens: usize = batch.iter().map(|&i| windows[i].len() - 1).sum();
            let mut grads = params.zeros_like();
            for &i in batch {
                let (inputs, targets) = io_pair(&windows[i]);
                let mut tape = GradTape::new();
                let bound = bind(&mut tape, params, true);
                let loss = record(&mut tape, &bound, inputs, &targets)?;
                let value = tape.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss in {stream}")));
                }
                loss_sum += value * targets.len() as f64;
                tokens += targets.len();

                let share = T::of(targets.len() as f64 / batch_tokens as f64);
                let mut g = tape.backward(loss)?;
                for (name, id) in bound.iter() {
                    if let Some(gi) = g.take(id) {
                        for (acc, x) in grads.get_mut(name)?.data_mut().iter_mut().zip(gi) {
                            *acc += share * x;
                        }
                    }
                }
            }
            adam_step(params, &grads, &mut state, &hyper)?;
        }

        history.push(EpochStats {
            epoch,
            loss: loss_sum / tokens as f64,
            seconds: started.elapsed().as_secs_f64(),
            tokens,
        });
    }
    Ok(history)
}

fn train_windows(corpus: &DomainCorpus, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    let windows = pack_windows(&corpus.train, seq_len);
    if windows.is_empty() {
        return Err(Error::Data(format!(
            "domain `{}` has an empty train split",
            corpus.domain_id
        )));
    }
    Ok(windows)
}

fn check_seq_len<T>(base: &BaseModel<T>, cfg: &TrainConfig) -> Result<()> {
    if cfg.seq_len > base.config.max_seq_len {
        return Err(Error::Config(format!(
            "train.seq_len {} exceeds model.max_seq_len {}",
            cfg.seq_len, base.config.max_seq_len
        )));
    }
    Ok(())
}

/// Trains a fresh adapter for `corpus`; only θ is updated.
pub fn train_adapter<T: Scalar>(
    base: &BaseModel<T>,
    corpus: &DomainCorpus,
    cfg: &TrainConfig,
) -> Result<Trained<AdapterModule<T>>> {
    cfg.validate()?;
    check_seq_len(base, cfg)?;
    let windows = train_windows(corpus, cfg.seq_len)?;
    let init_seed = cfg.seed ^ stable_hash(&["adapter-init", &corpus.domain_id]);
    let mut adapter = base.init_adapter(&corpus.domain_id, init_seed)?;

    let history = fit(
        &mut adapter.params,
        &windows,
        cfg,
        &corpus.domain_id,
        |tape, theta, inputs, targets| {
            let phi = bind(tape, &base.params, false);
            let logits = build_logits(tape, &base.config, &phi, Some(theta), inputs)?;
            tape.cross_entropy_mean(logits, targets)
        },
    )?;
    Ok(Trained {
        model: adapter,
        history,
    })
}

/// Full-gradient language-model training of φ on the union of `corpora`.
pub fn pretrain_base<T: Scalar>(
    base: &BaseModel<T>,
    corpora: &[&DomainCorpus],
    cfg: &TrainConfig,
) -> Result<Trained<BaseModel<T>>> {
    cfg.validate()?;
    check_seq_len(base, cfg)?;
    let mut windows = Vec::new();
    for c in corpora {
        windows.extend(train_windows(c, cfg.seq_len)?);
    }
    if windows.is_empty() {
        return Err(Error::Data("no training domains to pre-train on".into()));
    }
    let mut model = base.clone();
    let config = model.config.clone();
    let history = fit(
        &mut model.params,
        &windows,
        cfg,
        "pretrain",
        |tape, phi, inputs, targets| {
            let logits = build_logits(tape, &config, phi, None, inputs)?;
            tape.cross_entropy_mean(logits, targets)
        },
    )?;
    Ok(Trained { model, history })
}

/// Token-weighted mean NLL over packed windows of `seqs`, without gradients.
pub fn mean_nll<T: Scalar>(
    base: &BaseModel<T>,
    adapter: Option<&AdapterModule<T>>,
    seqs: &[Vec<u32>],
    seq_len: usize,
) -> Result<f64> {
    let windows = pack_windows(seqs, seq_len);
    if windows.is_empty() {
        return Err(Error::Data("no tokens to evaluate".into()));
    }
    let (mut total, mut tokens) = (0.0, 0usize);
    for w in &windows {
        let (inputs, targets) = io_pair(w);
        let logits = base.forward(adapter, inputs)?;
        total += crate::kernel::cross_entropy_mean(&logits, &targets)? * targets.len() as f64;
        tokens += targets.len();
    }
    Ok(total / tokens as f64)
}

/// Mean token NLL on the dev split.
pub fn dev_loss<T: Scalar>(
    base: &BaseModel<T>,
    adapter: Option<&AdapterModule<T>>,
    corpus: &DomainCorpus,
    seq_len: usize,
) -> Result<f64> {
    if corpus.dev.iter().all(|s| s.len() < 2) {
        return Err(Error::Data(format!(
            "domain `{}` has an empty dev split",
            corpus.domain_id
        )));
    }
    mean_nll(base, adapter, &corpus.dev, seq_len)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{CorpusSource, DomainRole};
    use crate::model::{init_base, ModelConfig};

    fn tiny_corpus() -> DomainCorpus {
        // two alternating patterns so a head bias alone already helps
        let line = |k: u32| (0..12).map(|i| 3 + (i * k) % 5).collect::<Vec<u32>>();
        DomainCorpus {
            domain_id: "toy".into(),
            role: DomainRole::Train,
            source: CorpusSource::File { path: "toy".into() },
            train: (0..6).map(|i| line(1 + i % 2)).collect(),
            dev: vec![line(1)],
            eval: vec![line(2)],
        }
    }

    fn tiny_base() -> BaseModel<f32> {
        let cfg = ModelConfig {
            n_layers: 1,
            d_model: 8,
            n_heads: 2,
            vocab_size: 8,
            max_seq_len: 16,
            reduction_factor: 4,
            tie_head: false,
        };
        init_base(&cfg, 1).unwrap()
    }

    fn cfg() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            lr: 1e-2,
            batch_size: 2,
            seq_len: 16,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn base_is_frozen_and_loss_falls() {
        let base = tiny_base();
        let before = base.params.clone();
        let out = train_adapter(&base, &tiny_corpus(), &cfg()).unwrap();
        assert_eq!(base.params, before);
        let losses = out.losses();
        assert_eq!(losses.len(), 4);
        assert!(losses[3] < losses[0], "{losses:?}");
    }

    #[test]
    fn training_is_deterministic() {
        let base = tiny_base();
        let a = train_adapter(&base, &tiny_corpus(), &cfg()).unwrap();
        let b = train_adapter(&base, &tiny_corpus(), &cfg()).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.losses(), b.losses());
    }

    #[test]
    fn trained_adapter_beats_zero_adapter_on_dev() {
        let base = tiny_base();
        let corpus = tiny_corpus();
        let trained = train_adapter(&base, &corpus, &cfg()).unwrap().model;
        let fresh = base.init_adapter("toy", 0).unwrap();
        let a = dev_loss(&base, Some(&trained), &corpus, 16).unwrap();
        let z = dev_loss(&base, Some(&fresh), &corpus, 16).unwrap();
        assert!(a.is_finite() && a < z, "{a} vs {z}");
        assert_eq!(a, dev_loss(&base, Some(&trained), &corpus, 16).unwrap());
    }

    #[test]
    fn empty_splits_are_data_errors() {
        let base = tiny_base();
        let mut c = tiny_corpus();
        c.train.clear();
        assert!(matches!(train_adapter(&base, &c, &cfg()), Err(Error::Data(_))));
        c.dev.clear();
        assert!(matches!(dev_loss(&base, None, &c, 16), Err(Error::Data(_))));
    }

    #[test]
    fn pretraining_moves_only_the_base() {
        let base = tiny_base();
        let corpus = tiny_corpus();
        let out = pretrain_base(&base, &[&corpus], &cfg()).unwrap();
        assert_ne!(out.model.params, base.params);
        assert!(out.history[3].loss < out.history[0].loss);
    }
}
