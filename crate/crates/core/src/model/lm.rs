use crate::error::{Error, Result};
use crate::kernel::ops::log_sum_exp;
use crate::kernel::Tensor;
use crate::scalar::Scalar;

use super::{AdapterModule, BaseModel};

/// Anything that assigns next-token probabilities to a token sequence.
pub trait CausalLm: Sync {
    fn vocab_size(&self) -> usize;

    fn max_seq_len(&self) -> usize;

    /// Probability rows `[(len-1) × V]` for positions `0..len-1`, each the
    /// distribution over the token that follows.
    fn next_token_probs(&self, tokens: &[u32]) -> Result<Tensor<f64>>;

    /// `p(x[t+1] | x[..=t])` for every `t < len-1`.
    fn realized_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        check_len(tokens)?;
        let probs = self.next_token_probs(tokens)?;
        Ok(tokens[1..]
            .iter()
            .enumerate()
            .map(|(r, &t)| probs.row(r)[t as usize])
            .collect())
    }
}

fn check_len(tokens: &[u32]) -> Result<()> {
    if tokens.len() < 2 {
        return Err(Error::Argument(format!(
            "need at least 2 tokens to score, got {}",
            tokens.len()
        )));
    }
    Ok(())
}

/// Base model with an optional adapter; the unit that scoring and
/// evaluation run against.
#[derive(Clone, Copy)]
pub struct Adapted<'a, T> {
    pub base: &'a BaseModel<T>,
    pub adapter: Option<&'a AdapterModule<T>>,
}

impl<'a, T: Scalar> Adapted<'a, T> {
    pub fn new(base: &'a BaseModel<T>, adapter: Option<&'a AdapterModule<T>>) -> Self {
        Adapted { base, adapter }
    }

    /// Log-softmax rows over the prefix `tokens[..len-1]`, in f64.
    pub fn next_token_log_probs(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        check_len(tokens)?;
        let logits = self.base.forward(self.adapter, &tokens[..tokens.len() - 1])?;
        let v = logits.cols();
        let mut out = Vec::with_capacity(logits.len());
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let lse = log_sum_exp(row);
            out.extend(row.iter().map(|x| x.as_f64() - lse));
        }
        Tensor::new(vec![logits.rows(), v], out)
    }
}

impl<T: Scalar> CausalLm for Adapted<'_, T> {
    fn vocab_size(&self) -> usize {
        self.base.config.vocab_size
    }

    fn max_seq_len(&self) -> usize {
        self.base.config.max_seq_len
    }

    fn next_token_probs(&self, tokens: &[u32]) -> Result<Tensor<f64>> {
        let mut lp = self.next_token_log_probs(tokens)?;
        for x in lp.data_mut() {
            *x = x.exp();
        }
        Ok(lp)
    }

    fn realized_probs(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let lp = self.next_token_log_probs(tokens)?;
        Ok(tokens[1..]
            .iter()
            .enumerate()
            .map(|(r, &t)| lp.row(r)[t as usize].exp())
            .collect())
    }
}
