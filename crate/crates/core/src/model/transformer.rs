use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::kernel::{GradTape, NodeId, ParamTree, Tensor};
use crate::scalar::Scalar;

use super::ModelConfig;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Frozen transformer parameters (φ).
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel<T> {
    pub config: ModelConfig,
    pub params: ParamTree<T>,
}

/// Domain-specific parameters (θ): one bottleneck adapter per layer plus,
/// for untied heads, the output head.
#[derive(Clone, Debug, PartialEq)]
pub struct AdapterModule<T> {
    pub domain_id: String,
    pub params: ParamTree<T>,
}

fn layer_key(layer: usize, rest: &str) -> String {
    format!("layers.{layer}.{rest}")
}

struct Init {
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
            normal: Normal::new(0.0, 1.0).expect("unit normal"),
        }
    }

    fn normal<T: Scalar>(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.normal.sample(&mut self.rng) * std)).collect();
        Tensor::new(shape.to_vec(), data).expect("init shape is valid")
    }
}

/// Deterministically initializes the base transformer.
pub fn init_base<T: Scalar>(config: &ModelConfig, seed: u64) -> Result<BaseModel<T>> {
    config.validate()?;
    let d = config.d_model;
    let ff = config.d_ff();
    let v = config.vocab_size;
    let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
    let mut init = Init::new(seed);
    let mut p = ParamTree::new();

    p.insert("tok_emb", init.normal(&[v, d], INIT_STD));
    p.insert("pos_emb", init.normal(&[config.max_seq_len, d], INIT_STD));
    for l in 0..config.n_layers {
        for ln in ["ln1", "ln2"] {
            p.insert(layer_key(l, &format!("{ln}.gamma")), Tensor::full(&[d], T::one()));
            p.insert(layer_key(l, &format!("{ln}.beta")), Tensor::zeros(&[d]));
        }
        for w in ["wq", "wk", "wv"] {
            p.insert(layer_key(l, &format!("attn.{w}")), init.normal(&[d, d], INIT_STD));
        }
        p.insert(layer_key(l, "attn.wo"), init.normal(&[d, d], resid_std));
        for b in ["bq", "bk", "bv", "bo"] {
            p.insert(layer_key(l, &format!("attn.{b}")), Tensor::zeros(&[d]));
        }
        p.insert(layer_key(l, "ffn.w1"), init.normal(&[d, ff], INIT_STD));
        p.insert(layer_key(l, "ffn.b1"), Tensor::zeros(&[ff]));
        p.insert(layer_key(l, "ffn.w2"), init.normal(&[ff, d], resid_std));
        p.insert(layer_key(l, "ffn.b2"), Tensor::zeros(&[d]));
    }
    p.insert("ln_f.gamma", Tensor::full(&[d], T::one()));
    p.insert("ln_f.beta", Tensor::zeros(&[d]));
    if !config.tie_head {
        p.insert("head.weight", init.normal(&[d, v], INIT_STD));
        p.insert("head.bias", Tensor::zeros(&[v]));
    }

    Ok(BaseModel {
        config: config.clone(),
        params: p,
    })
}

impl<T: Scalar> BaseModel<T> {
    /// Fresh adapter for `domain_id`: random down-projection, zero
    /// up-projection (so the adapter starts as the identity), and a copy of
    /// the base head when heads are untied.
    pub fn init_adapter(&self, domain_id: &str, seed: u64) -> Result<AdapterModule<T>> {
        let cfg = &self.config;
        let (d, b) = (cfg.d_model, cfg.bottleneck());
        let mut init = Init::new(seed);
        let mut p = ParamTree::new();
        for l in 0..cfg.n_layers {
            p.insert(layer_key(l, "adapter.w_down"), init.normal(&[d, b], INIT_STD));
            p.insert(layer_key(l, "adapter.b_down"), Tensor::zeros(&[b]));
            p.insert(layer_key(l, "adapter.w_up"), Tensor::zeros(&[b, d]));
            p.insert(layer_key(l, "adapter.b_up"), Tensor::zeros(&[d]));
        }
        if !cfg.tie_head {
            p.insert("head.weight", self.params.get("head.weight")?.clone());
            p.insert("head.bias", self.params.get("head.bias")?.clone());
        }
        Ok(AdapterModule {
            domain_id: domain_id.to_string(),
            params: p,
        })
    }

    /// Parameter structure every adapter of this base must have.
    pub fn adapter_template(&self) -> Result<ParamTree<T>> {
        Ok(self.init_adapter("template", 0)?.params.zeros_like())
    }

    /// Next-token logits `[T×V]` for `tokens`, optionally through `adapter`.
    pub fn forward(&self, adapter: Option<&AdapterModule<T>>, tokens: &[u32]) -> Result<Tensor<T>> {
        let mut tape = GradTape::new();
        let base = bind(&mut tape, &self.params, false);
        let adapter = adapter.map(|a| bind(&mut tape, &a.params, false));
        let logits = build_logits(&mut tape, &self.config, &base, adapter.as_ref(), tokens)?;
        Ok(tape.value(logits).clone())
    }
}

/// Free-function form of [`BaseModel::forward`].
pub fn forward<T: Scalar>(
    base: &BaseModel<T>,
    adapter: Option<&AdapterModule<T>>,
    tokens: &[u32],
) -> Result<Tensor<T>> {
    base.forward(adapter, tokens)
}

/// Parameter leaves of one tree recorded on a tape.
pub struct Bound {
    ids: BTreeMap<String, NodeId>,
}

impl Bound {
    pub fn from_ids(ids: impl IntoIterator<Item = (String, NodeId)>) -> Self {
        Bound {
            ids: ids.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<NodeId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| Error::Structural(format!("missing parameter `{name}`")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, NodeId)> {
        self.ids.iter().map(|(k, &v)| (k.as_str(), v))
    }
}

/// Records every entry of `tree` as a tape leaf.
pub fn bind<T: Scalar>(tape: &mut GradTape<T>, tree: &ParamTree<T>, requires_grad: bool) -> Bound {
    let ids = tree
        .iter()
        .map(|(name, t)| (name.to_string(), tape.leaf(t.clone().with_grad(requires_grad))))
        .collect();
    Bound { ids }
}

fn linear<T: Scalar>(tape: &mut GradTape<T>, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
    let y = tape.matmul(x, w)?;
    tape.add_bias(y, b)
}

/// Records the full forward pass and returns the logits node.
pub fn build_logits<T: Scalar>(
    tape: &mut GradTape<T>,
    cfg: &ModelConfig,
    base: &Bound,
    adapter: Option<&Bound>,
    tokens: &[u32],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Argument("forward on an empty token sequence".into()));
    }
    if tokens.len() > cfg.max_seq_len {
        return Err(Error::Length {
            len: tokens.len(),
            max: cfg.max_seq_len,
        });
    }
    let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
    if let Some(&bad) = ids.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Index(format!(
            "token {bad} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let positions: Vec<usize> = (0..ids.len()).collect();

    let tok = tape.embedding(base.get("tok_emb")?, &ids)?;
    let pos = tape.embedding(base.get("pos_emb")?, &positions)?;
    let mut x = tape.add(tok, pos)?;

    for l in 0..cfg.n_layers {
        let p = |rest: &str| base.get(&layer_key(l, rest));

        let h = tape.layer_norm(x, p("ln1.gamma")?, p("ln1.beta")?, LN_EPS)?;
        let q = linear(tape, h, p("attn.wq")?, p("attn.bq")?)?;
        let k = linear(tape, h, p("attn.wk")?, p("attn.bk")?)?;
        let v = linear(tape, h, p("attn.wv")?, p("attn.bv")?)?;
        let a = tape.causal_attention(q, k, v, cfg.n_heads)?;
        let a = linear(tape, a, p("attn.wo")?, p("attn.bo")?)?;
        x = tape.add(x, a)?;

        let h = tape.layer_norm(x, p("ln2.gamma")?, p("ln2.beta")?, LN_EPS)?;
        let h = linear(tape, h, p("ffn.w1")?, p("ffn.b1")?)?;
        let h = tape.gelu(h);
        let mut h = linear(tape, h, p("ffn.w2")?, p("ffn.b2")?)?;

        if let Some(ad) = adapter {
            let q = |rest: &str| ad.get(&layer_key(l, rest));
            let z = linear(tape, h, q("adapter.w_down")?, q("adapter.b_down")?)?;
            let z = tape.relu(z);
            let z = linear(tape, z, q("adapter.w_up")?, q("adapter.b_up")?)?;
            h = tape.add(h, z)?;
        }
        x = tape.add(x, h)?;
    }

    let x = tape.layer_norm(x, base.get("ln_f.gamma")?, base.get("ln_f.beta")?, LN_EPS)?;
    if cfg.tie_head {
        return tape.matmul_nt(x, base.get("tok_emb")?);
    }
    let head = adapter.filter(|a| a.get("head.weight").is_ok()).unwrap_or(base);
    linear(tape, x, head.get("head.weight")?, head.get("head.bias")?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(tie_head: bool) -> ModelConfig {
        ModelConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 4,
            vocab_size: 23,
            max_seq_len: 12,
            reduction_factor: 4,
            tie_head,
        }
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_base::<f32>(&small(false), 7).unwrap();
        let b = init_base::<f32>(&small(false), 7).unwrap();
        let c = init_base::<f32>(&small(false), 8).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_config_is_rejected() {
        let cfg = ModelConfig {
            n_heads: 3,
            ..small(false)
        };
        assert!(matches!(init_base::<f32>(&cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn zero_adapter_is_exact_identity() {
        for tie in [false, true] {
            let base = init_base::<f32>(&small(tie), 1).unwrap();
            let adapter = base.init_adapter("a", 2).unwrap();
            let tokens = [2, 5, 9, 22, 3, 3, 0];
            let plain = base.forward(None, &tokens).unwrap();
            let adapted = base.forward(Some(&adapter), &tokens).unwrap();
            assert_eq!(plain.shape(), &[7, 23]);
            assert_eq!(plain.max_abs_diff(&adapted).unwrap(), 0.0);
            assert!(plain.is_finite());
        }
    }

    #[test]
    fn adapter_entry_count() {
        for (tie, extra) in [(false, 2), (true, 0)] {
            let cfg = small(tie);
            let base = init_base::<f32>(&cfg, 1).unwrap();
            let adapter = base.init_adapter("a", 2).unwrap();
            assert_eq!(adapter.params.len(), cfg.n_layers * 4 + extra);
        }
    }

    #[test]
    fn causal_mask_hides_the_future() {
        let base = init_base::<f64>(&small(false), 3).unwrap();
        let mut adapter = base.init_adapter("a", 4).unwrap();
        for (_, t) in adapter.params.iter_mut() {
            for (i, x) in t.data_mut().iter_mut().enumerate() {
                *x += 0.01 * ((i % 7) as f64 - 3.0);
            }
        }
        let tokens = [2u32, 4, 6, 8, 10, 12, 14];
        let before = base.forward(Some(&adapter), &tokens).unwrap();
        let perturb_at = 4;
        let mut changed = tokens;
        changed[perturb_at] = 19;
        let after = base.forward(Some(&adapter), &changed).unwrap();
        for pos in 0..tokens.len() {
            let diff: f64 = before
                .row(pos)
                .iter()
                .zip(after.row(pos))
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            if pos < perturb_at {
                assert_eq!(diff, 0.0, "position {pos} saw the future");
            } else {
                assert!(diff > 0.0, "position {pos} ignored its input");
            }
        }
    }

    #[test]
    fn over_length_and_bad_tokens_fail() {
        let base = init_base::<f32>(&small(false), 1).unwrap();
        let long = vec![2u32; 13];
        assert!(matches!(base.forward(None, &long), Err(Error::Length { .. })));
        assert!(matches!(base.forward(None, &[2, 23]), Err(Error::Index(_))));
    }
}
