use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::ParamTree;

/// Adam hyperparameters; weight decay is applied decoupled from the gradient.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-6,
            weight_decay: 0.01,
        }
    }
}

/// First and second moments plus the step counter.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub m: ParamTree<T>,
    pub v: ParamTree<T>,
    pub t: u64,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(params: &ParamTree<T>) -> Self {
        AdamState {
            m: params.zeros_like(),
            v: params.zeros_like(),
            t: 0,
        }
    }
}

/// One bias-corrected AdamW update of every entry in `params`.
pub fn adam_step<T: Scalar>(
    params: &mut ParamTree<T>,
    grads: &ParamTree<T>,
    state: &mut AdamState<T>,
    hyper: &AdamConfig,
) -> Result<()> {
    params.check_same_structure(grads)?;
    params.check_same_structure(&state.m)?;
    params.check_same_structure(&state.v)?;
    if !(hyper.lr > 0.0 && hyper.eps > 0.0 && hyper.weight_decay >= 0.0) {
        return Err(Error::Argument(format!("invalid Adam hyperparameters {hyper:?}")));
    }

    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - hyper.beta1.powi(t);
    let bc2 = 1.0 - hyper.beta2.powi(t);
    let (b1, b2) = (T::of(hyper.beta1), T::of(hyper.beta2));
    let lr = T::of(hyper.lr);
    let eps = T::of(hyper.eps);
    let decay = T::one() - lr * T::of(hyper.weight_decay);
    let (bc1, bc2) = (T::of(bc1), T::of(bc2));

    for (name, p) in params.iter_mut() {
        let g = grads.get(name)?.data();
        let m = state.m.get_mut(name)?.data_mut();
        for (mi, &gi) in m.iter_mut().zip(g) {
            *mi = b1 * *mi + (T::one() - b1) * gi;
        }
        let v = state.v.get_mut(name)?.data_mut();
        for (vi, &gi) in v.iter_mut().zip(g) {
            *vi = b2 * *vi + (T::one() - b2) * gi * gi;
        }
        let m = state.m.get(name)?.data();
        let v = state.v.get(name)?.data();
        for ((pi, &mi), &vi) in p.data_mut().iter_mut().zip(m).zip(v) {
            let m_hat = mi / bc1;
            let v_hat = vi / bc2;
            *pi = *pi * decay - lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Tensor;

    fn tree(x: f64) -> ParamTree<f64> {
        let mut t = ParamTree::new();
        t.insert("p", Tensor::full(&[1], x));
        t
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut params = tree(0.7);
        let grads = tree(0.0);
        let mut state = AdamState::new(&params);
        let hyper = AdamConfig {
            weight_decay: 0.0,
            ..AdamConfig::default()
        };
        for _ in 0..5 {
            adam_step(&mut params, &grads, &mut state, &hyper).unwrap();
        }
        assert_eq!(params.get("p").unwrap().data(), &[0.7]);
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        for g in [3.0, -0.02] {
            let mut params = tree(1.0);
            let mut state = AdamState::new(&params);
            let hyper = AdamConfig {
                lr: 1e-3,
                eps: 1e-12,
                weight_decay: 0.0,
                ..AdamConfig::default()
            };
            adam_step(&mut params, &tree(g), &mut state, &hyper).unwrap();
            let moved = params.get("p").unwrap().data()[0] - 1.0;
            assert!((moved + 1e-3 * f64::signum(g)).abs() < 1e-9, "{moved}");
        }
    }

    #[test]
    fn decay_alone_scales_geometrically() {
        let mut params = tree(2.0);
        let mut state = AdamState::new(&params);
        let hyper = AdamConfig {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamConfig::default()
        };
        for _ in 0..3 {
            adam_step(&mut params, &tree(0.0), &mut state, &hyper).unwrap();
        }
        let expected = 2.0 * (1.0f64 - 0.1 * 0.5).powi(3);
        assert!((params.get("p").unwrap().data()[0] - expected).abs() < 1e-12);
    }

    #[test]
    fn structure_mismatch_is_rejected() {
        let mut params = tree(1.0);
        let mut state = AdamState::new(&params);
        let mut grads = ParamTree::new();
        grads.insert("q", Tensor::full(&[1], 0.0));
        assert!(matches!(
            adam_step(&mut params, &grads, &mut state, &AdamConfig::default()),
            Err(Error::Structural(_))
        ));
    }
}
