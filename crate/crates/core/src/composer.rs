//! Top-k selection, re-weighting, and combination of adapters by parameter
//! averaging or output ensembling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::kernel::{ParamTree, Tensor};
use crate::model::{Adapted, AdapterModule, BaseModel, CausalLm};
use crate::scalar::Scalar;
use crate::scoring::{normalize, score_uniform, ScoreVector, Strategy, WeightVector};

pub const DEFAULT_AUTO_THRESHOLD: f64 = 0.004;

/// A fixed `k` (0 = bare base model) or the gap rule with a threshold.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum KSpec {
    Fixed(usize),
    Auto(f64),
}

impl fmt::Display for KSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            KSpec::Fixed(k) => write!(f, "{k}"),
            KSpec::Auto(t) => write!(f, "auto:{t}"),
        }
    }
}

impl FromStr for KSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::Config(format!(
                "invalid k `{s}` (expected an integer, `auto` or `auto:<threshold>`)"
            ))
        };
        match s.strip_prefix("auto") {
            Some("") => Ok(KSpec::Auto(DEFAULT_AUTO_THRESHOLD)),
            Some(rest) => {
                let t: f64 = rest.strip_prefix(':').ok_or_else(bad)?.parse().map_err(|_| bad())?;
                if !(t > 0.0) {
                    return Err(bad());
                }
                Ok(KSpec::Auto(t))
            }
            None => s.parse().map(KSpec::Fixed).map_err(|_| bad()),
        }
    }
}

impl Serialize for KSpec {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for KSpec {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Int(usize),
            Str(String),
        }
        match Raw::deserialize(d)? {
            Raw::Int(k) => Ok(KSpec::Fixed(k)),
            Raw::Str(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

macro_rules! named_enum {
    ($ty:ident { $($var:ident => $name:literal),+ $(,)? }) => {
        impl $ty {
            pub const ALL: &'static [$ty] = &[$($ty::$var),+];

            pub fn name(self) -> &'static str {
                match self { $($ty::$var => $name),+ }
            }
        }

        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $ty {
            type Err = Error;

            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$var),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"), other
                    ))),
                }
            }
        }
    };
}

/// Scored: renormalized scores of the survivors. Uniform: `1/k` after
/// selection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Weighting {
    Scored,
    Uniform,
}
named_enum!(Weighting { Scored => "scored", Uniform => "uniform" });

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Average,
    Ensemble,
}
named_enum!(Method { Average => "average", Ensemble => "ensemble" });

/// Space in which ensemble members are mixed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleSpace {
    #[default]
    Probability,
    Logit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompositionPlan {
    pub strategy: Strategy,
    pub k: KSpec,
    pub weighting: Weighting,
    pub method: Method,
    pub seed: u64,
}

impl CompositionPlan {
    pub fn validate(&self, n_candidates: usize) -> Result<()> {
        if self.weighting == Weighting::Uniform && !self.strategy.selects() {
            return Err(Error::Config(
                "uniform-after-selection needs a selecting strategy, not `uniform`".into(),
            ));
        }
        match self.k {
            KSpec::Fixed(k) if k > n_candidates => Err(Error::Argument(format!(
                "k = {k} exceeds the {n_candidates} available adapters"
            ))),
            KSpec::Auto(t) if !(t > 0.0) => Err(Error::Argument(format!("auto-k threshold {t} must be positive"))),
            _ => Ok(()),
        }
    }
}

/// The `k` best domains, best first; ties go to the smaller domain id.
pub fn select_top_k(scores: &ScoreVector, k: usize) -> Result<Vec<String>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Argument(format!("k = {k} outside 1..={}", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores.raw[b]
            .total_cmp(&scores.raw[a])
            .then_with(|| scores.domains[a].cmp(&scores.domains[b]))
    });
    Ok(order.into_iter().take(k).map(|i| scores.domains[i].clone()).collect())
}

/// Keeps adding adapters in descending weight order until the next weight
/// drops by more than `threshold`.
pub fn auto_k(weights: &[f64], threshold: f64) -> Result<usize> {
    if !(threshold > 0.0) {
        return Err(Error::Argument(format!(
            "auto-k threshold {threshold} must be positive"
        )));
    }
    if weights.is_empty() {
        return Err(Error::Argument("auto-k over no weights".into()));
    }
    let mut sorted = weights.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    Ok(sorted
        .windows(2)
        .position(|w| w[0] - w[1] > threshold)
        .map_or(sorted.len(), |i| i + 1))
}

/// Resolves `k`, selects, and weights. `None` means the bare base model.
pub fn select_and_weight(plan: &CompositionPlan, scores: &ScoreVector) -> Result<Option<WeightVector>> {
    plan.validate(scores.len())?;
    let k = match plan.k {
        KSpec::Fixed(0) => return Ok(None),
        KSpec::Fixed(k) => k,
        KSpec::Auto(t) => auto_k(&scores.normalized()?.weights, t)?,
    };
    let selected = select_top_k(scores, k)?;
    let weights = match (plan.strategy, plan.weighting) {
        (Strategy::Uniform, _) | (_, Weighting::Uniform) => score_uniform(&selected)?,
        _ => normalize(scores, &selected)?,
    };
    Ok(Some(weights))
}

/// Elementwise `Σ ω_i θ_i` over every entry, heads included. Accumulates in
/// f64 so a single adapter with weight 1 is reproduced bit for bit.
pub fn average_params<T: Scalar>(adapters: &[&AdapterModule<T>], weights: &[f64]) -> Result<AdapterModule<T>> {
    if adapters.is_empty() || adapters.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} adapters for {} weights",
            adapters.len(),
            weights.len()
        )));
    }
    let first = &adapters[0].params;
    for a in &adapters[1..] {
        first.check_same_structure(&a.params)?;
    }
    let mut out = ParamTree::new();
    for (name, t) in first.iter() {
        let mut acc = vec![0.0f64; t.len()];
        for (a, &w) in adapters.iter().zip(weights) {
            for (s, x) in acc.iter_mut().zip(a.params.get(name)?.data()) {
                *s += w * x.as_f64();
            }
        }
        let data = acc.into_iter().map(T::of).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data)?);
    }
    let ids: Vec<&str> = adapters.iter().map(|a| a.domain_id.as_str()).collect();
    Ok(AdapterModule {
        domain_id: format!("avg({})", ids.join("+")),
        params: out,
    })
}

/// `Σ ω_i rows_i` for probability rows of equal shape.
pub fn mix_probs(rows: &[Tensor<f64>], weights: &[f64]) -> Result<Tensor<f64>> {
    if rows.is_empty() || rows.len() != weights.len() {
        return Err(Error::Argument(format!(
            "{} members for {} weights",
            rows.len(),
            weights.len()
        )));
    }
    let mut out = Tensor::zeros(rows[0].shape());
    for (r, &w) in rows.iter().zip(weights) {
        if r.shape() != out.shape() {
            return Err(Error::Dimension(format!(
                "member shapes {:?} vs {:?}",
                r.shape(),
                out.shape()
            )));
        }
        for (o, x) in out.data_mut().iter_mut().zip(r.data()) {
            *o += w * x;
        }
    }
    Ok(out)
}

fn softmax_rows(mut t: Tensor<f64>) -> Tensor<f64> {
    let v = t.cols();
    for row in t.data_mut().chunks_mut(v) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for x in row.iter_mut() {
            *x = (*x - max).exp();
            z += *x;
        }
        row.iter_mut().for_each(|x| *x /= z);
    }
    t
}

/// Next-token probability rows of the weighted ensemble.
pub fn ensemble_predict<T: Scalar>(
    base: &BaseModel<T>,
    adapters: &[&AdapterModule<T>],
    weights: &[f64],
    tokens: &[u32],
    space: EnsembleSpace,
) -> Result<Tensor<f64>> {
    let members: Vec<Adapted<T>> = adapters.iter().map(|a| Adapted::new(base, Some(a))).collect();
    match space {
        EnsembleSpace::Probability => {
            let rows = members
                .iter()
                .map(|m| m.next_token_probs(tokens))
                .collect::<Result<Vec<_>>>()?;
            mix_probs(&rows, weights)
        }
        EnsembleSpace::Logit => {
            // log-softmax differs from the logits by a per-row constant, and
            // Σω = 1, so mixing log-probabilities mixes logits
            let rows = members
                .iter()
                .map(|m| m.next_token_log_probs(tokens))
                .collect::<Result<Vec<_>>>()?;
            Ok(softmax_rows(mix_probs(&rows, weights)?))
        }
    }
}

pub enum ComposedModel<'a, T> {
    Base(&'a BaseModel<T>),
    Averaged {
        base: &'a BaseModel<T>,
        adapter: AdapterModule<T>,
    },
    Ensemble {
        base: &'a BaseModel<T>,
        members: Vec<&'a AdapterModule<T>>,
        weights: Vec<f64>,
        space: EnsembleSpace,
    },
}

impl<T: Scalar> ComposedModel<'_, T> {
    fn base(&self) -> &BaseModel<T> {
        match self {
            ComposedModel::Base(b) => b,
            ComposedModel::Averaged { base, .. } | ComposedModel::Ensemble { base, .. } => base,
        }
    }
}

impl<T: Scalar> CausalLm for ComposedModel<'_, T> {
    fn vocab_size(&self) -> usize {
        self.base().config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.base().config.max_seq_len
    }

    fn next_token_probs(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        match self {
            ComposedModel::Base(b) => Adapted::new(b, None).next_token_probs(tokens),
            ComposedModel::Averaged { base, adapter } => Adapted::new(base, Some(adapter)).next_token_probs(tokens),
            ComposedModel::Ensemble {
                base,
                members,
                weights,
                space,
            } => ensemble_predict(base, members, weights, tokens, *space),
        }
    }

    fn realized_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        match self {
            ComposedModel::Base(b) => Adapted::new(b, None).realized_probs(tokens),
            ComposedModel::Averaged { base, adapter } => Adapted::new(base, Some(adapter)).realized_probs(tokens),
            ComposedModel::Ensemble {
                space: EnsembleSpace::Probability,
                base,
                members,
                weights,
            } => {
                let mut out = vec![0.0; tokens.len().saturating_sub(1)];
                for (a, &w) in members.iter().zip(weights) {
                    for (o, p) in out.iter_mut().zip(Adapted::new(base, Some(a)).realized_probs(tokens)?) {
                        *o += w * p;
                    }
                }
                Ok(out)
            }
            ComposedModel::Ensemble { .. } => {
                let probs = self.next_token_probs(tokens)?;
                Ok(tokens[1..]
                    .iter()
                    .enumerate()
                    .map(|(r, &t)| probs.row(r)[t as usize])
                    .collect())
            }
        }
    }
}

pub struct Composition<'a, T> {
    /// `None` for the bare base model.
    pub weights: Option<WeightVector>,
    pub model: ComposedModel<'a, T>,
}

/// Select, weight, combine. `adapters` are looked up by domain id.
pub fn compose<'a, T: Scalar>(
    plan: &CompositionPlan,
    base: &'a BaseModel<T>,
    adapters: &'a [AdapterModule<T>],
    scores: &ScoreVector,
    space: EnsembleSpace,
) -> Result<Composition<'a, T>> {
    let Some(weights) = select_and_weight(plan, scores)? else {
        return Ok(Composition {
            weights: None,
            model: ComposedModel::Base(base),
        });
    };
    let members = weights
        .domains
        .iter()
        .map(|d| {
            adapters
                .iter()
                .find(|a| &a.domain_id == d)
                .ok_or_else(|| Error::Structural(format!("no adapter for domain `{d}`")))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = match plan.method {
        Method::Average => ComposedModel::Averaged {
            base,
            adapter: average_params(&members, &weights.weights)?,
        },
        Method::Ensemble => ComposedModel::Ensemble {
            base,
            members,
            weights: weights.weights.clone(),
            space,
        },
    };
    Ok(Composition {
        weights: Some(weights),
        model,
    })
}
