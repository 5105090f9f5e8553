//! Central finite-difference oracle for tape gradients (f64 only).

use modcomp::kernel::{GradTape, NodeId, Tensor};

pub const REL_TOL: f64 = 1e-5;
const STEP: f64 = 1e-6;
/// Denominator floor so exactly-zero gradients (e.g. attention key biases,
/// which softmax shift-invariance cancels) are compared against rounding
/// noise rather than divided by it.
const NORM_FLOOR: f64 = 1e-3;

/// Worst per-tensor relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖, 1e-3)`
/// over all `inputs`; `build` must record the loss from the given leaves.
pub fn max_relative_error<F>(inputs: &[Tensor<f64>], build: F) -> f64
where
    F: Fn(&mut GradTape<f64>, &[NodeId]) -> NodeId,
{
    let eval = |vals: &[Tensor<f64>]| -> f64 {
        let mut tape = GradTape::new();
        let ids: Vec<NodeId> = vals.iter().map(|t| tape.leaf(t.clone().with_grad(false))).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).data()[0]
    };

    let mut tape = GradTape::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| tape.leaf(t.clone().with_grad(true))).collect();
    let loss = build(&mut tape, &ids);
    let grads = tape.backward(loss).expect("scalar loss");

    let mut worst: f64 = 0.0;
    let mut vals = inputs.to_vec();
    for (i, id) in ids.iter().enumerate() {
        let analytic = grads.get(*id);
        let mut numeric = vec![0.0; analytic.len()];
        #[allow(clippy::needless_range_loop)]
        for j in 0..numeric.len() {
            let orig = vals[i].data()[j];
            vals[i].data_mut()[j] = orig + STEP;
            let up = eval(&vals);
            vals[i].data_mut()[j] = orig - STEP;
            let down = eval(&vals);
            vals[i].data_mut()[j] = orig;
            numeric[j] = (up - down) / (2.0 * STEP);
        }
        let diff: f64 = analytic
            .data()
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let na: f64 = analytic.data().iter().map(|a| a * a).sum::<f64>().sqrt();
        let nn: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        let scale = na.max(nn);
        let rel = diff / scale.max(NORM_FLOOR);
        if std::env::var("GRADCHECK_DEBUG").is_ok() {
            eprintln!("input {i}: rel {rel:e} |a| {na:e} |n| {nn:e}");
        }
        worst = worst.max(rel);
    }
    worst
}

/// Deterministic pseudo-random tensor with entries in `[-scale, scale]`.
pub fn fixture(shape: &[usize], seed: u64, scale: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let data = (0..n)
        .map(|_| {
            state = state
                .wrapping_mul(6364136223846793005)
                .wrapping_add(1442695040888963407);
            let u = (state >> 11) as f64 / (1u64 << 53) as f64;
            (2.0 * u - 1.0) * scale
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn project(tape: &mut GradTape<f64>, out: NodeId, seed: u64) -> NodeId {
    let shape = tape.value(out).shape().to_vec();
    let w = fixture(&shape, seed, 1.0).into_data();
    tape.dot(out, w).unwrap()
}

/// Relative error of every differentiable kernel op, each projected onto a
/// random direction to obtain a scalar loss.
pub fn kernel_op_errors() -> Vec<(&'static str, f64)> {
    let mut out = Vec::new();

    let a = fixture(&[3, 4], 1, 1.0);
    let b = fixture(&[4, 5], 2, 1.0);
    out.push((
        "matmul",
        max_relative_error(&[a.clone(), b], |t, x| {
            let y = t.matmul(x[0], x[1]).unwrap();
            project(t, y, 10)
        }),
    ));

    let bt = fixture(&[5, 4], 3, 1.0);
    out.push((
        "matmul_nt",
        max_relative_error(&[a.clone(), bt], |t, x| {
            let y = t.matmul_nt(x[0], x[1]).unwrap();
            project(t, y, 11)
        }),
    ));

    let c = fixture(&[3, 4], 4, 1.0);
    out.push((
        "add",
        max_relative_error(&[a.clone(), c], |t, x| {
            let y = t.add(x[0], x[1]).unwrap();
            project(t, y, 12)
        }),
    ));

    let bias = fixture(&[4], 5, 1.0);
    out.push((
        "add_bias",
        max_relative_error(&[a.clone(), bias], |t, x| {
            let y = t.add_bias(x[0], x[1]).unwrap();
            project(t, y, 13)
        }),
    ));

    let table = fixture(&[6, 3], 6, 1.0);
    out.push((
        "embedding",
        max_relative_error(&[table], |t, x| {
            let y = t.embedding(x[0], &[5, 0, 5, 2]).unwrap();
            project(t, y, 14)
        }),
    ));

    let gamma = fixture(&[4], 7, 1.0);
    let beta = fixture(&[4], 8, 1.0);
    out.push((
        "layer_norm",
        max_relative_error(&[a.clone(), gamma, beta], |t, x| {
            let y = t.layer_norm(x[0], x[1], x[2], 1e-5).unwrap();
            project(t, y, 15)
        }),
    ));

    out.push((
        "gelu",
        max_relative_error(&[fixture(&[3, 4], 9, 3.0)], |t, x| {
            let y = t.gelu(x[0]);
            project(t, y, 16)
        }),
    ));

    out.push((
        "relu",
        max_relative_error(&[fixture(&[3, 4], 17, 2.0)], |t, x| {
            let y = t.relu(x[0]);
            project(t, y, 18)
        }),
    ));

    let (q, k, v) = (
        fixture(&[5, 4], 19, 1.0),
        fixture(&[5, 4], 20, 1.0),
        fixture(&[5, 4], 21, 1.0),
    );
    out.push((
        "causal_attention",
        max_relative_error(&[q, k, v], |t, x| {
            let y = t.causal_attention(x[0], x[1], x[2], 2).unwrap();
            project(t, y, 22)
        }),
    ));

    out.push((
        "softmax",
        max_relative_error(&[fixture(&[3, 5], 23, 2.0)], |t, x| {
            let y = t.softmax(x[0]);
            project(t, y, 24)
        }),
    ));

    out.push((
        "cross_entropy",
        max_relative_error(&[fixture(&[4, 6], 25, 2.0)], |t, x| {
            t.cross_entropy_mean(x[0], &[0, 5, 2, 2]).unwrap()
        }),
    ));

    out
}

/// Two-layer network `CE(relu(x·W1 + b1)·W2 + b2)` checked end to end.
pub fn two_layer_network_error() -> f64 {
    let x = fixture(&[4, 5], 30, 1.0);
    let w1 = fixture(&[5, 6], 31, 0.8);
    let b1 = fixture(&[6], 32, 0.3);
    let w2 = fixture(&[6, 3], 33, 0.8);
    let b2 = fixture(&[3], 34, 0.3);
    max_relative_error(&[x, w1, b1, w2, b2], |t, p| {
        let h = t.matmul(p[0], p[1]).unwrap();
        let h = t.add_bias(h, p[2]).unwrap();
        let h = t.relu(h);
        let y = t.matmul(h, p[3]).unwrap();
        let y = t.add_bias(y, p[4]).unwrap();
        t.cross_entropy_mean(y, &[0, 2, 1, 2]).unwrap()
    })
}

/// Full 2-layer transformer with a (non-zero) adapter, gradients for every
/// base and adapter parameter.
pub fn transformer_error(tie_head: bool) -> f64 {
    use modcomp::model::{build_logits, init_base, Bound, ModelConfig};

    let cfg = ModelConfig {
        n_layers: 2,
        d_model: 8,
        n_heads: 2,
        vocab_size: 11,
        max_seq_len: 6,
        reduction_factor: 3,
        tie_head,
    };
    let base = init_base::<f64>(&cfg, 3).unwrap();
    let mut adapter = base.init_adapter("a", 4).unwrap();
    // move away from the zero up-projection so every path carries gradient
    for (i, (_, t)) in adapter.params.iter_mut().enumerate() {
        let noise = fixture(t.shape(), 100 + i as u64, 0.2);
        for (x, n) in t.data_mut().iter_mut().zip(noise.data()) {
            *x += n;
        }
    }
    let names_base: Vec<String> = base.params.names().map(String::from).collect();
    let names_adapter: Vec<String> = adapter.params.names().map(String::from).collect();
    let mut inputs: Vec<Tensor<f64>> = names_base.iter().map(|n| base.params.get(n).unwrap().clone()).collect();
    inputs.extend(names_adapter.iter().map(|n| adapter.params.get(n).unwrap().clone()));
    // scale the base away from its tiny init so layer-norm inputs are well conditioned
    for x in inputs.iter_mut().take(names_base.len()) {
        for v in x.data_mut() {
            *v *= 10.0;
        }
    }

    let tokens = [2u32, 7, 3, 10, 7];
    let targets = [7usize, 3, 10, 7, 1];
    max_relative_error(&inputs, |t, ids| {
        let nb = names_base.len();
        let bound_base = Bound::from_ids(names_base.iter().cloned().zip(ids[..nb].iter().copied()));
        let bound_adapter = Bound::from_ids(names_adapter.iter().cloned().zip(ids[nb..].iter().copied()));
        let logits = build_logits(t, &cfg, &bound_base, Some(&bound_adapter), &tokens).unwrap();
        t.cross_entropy_mean(logits, &targets).unwrap()
    })
}
