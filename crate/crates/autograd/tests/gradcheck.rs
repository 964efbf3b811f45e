//! Central finite-difference checks for every differentiable operation.

use afa_autograd::{Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Builds `sum(op(inputs) * probe)` and compares the analytic gradient of
/// every input against central differences.
fn check(inputs: Vec<Tensor<f64>>, op: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let eval = |inputs: &[Tensor<f64>], probe: Option<&Tensor<f64>>| -> (f64, Vec<Option<Tensor<f64>>>, Tensor<f64>) {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let out = op(&mut g, &vars);
        let out_value = g.value(out).clone();
        let probe = probe.cloned().unwrap_or_else(|| Tensor::full(out_value.shape(), 0.0));
        let p = g.constant(probe);
        let prod = g.mul(out, p);
        let loss = g.sum(prod);
        let grads = g.backward(loss);
        let value = g.value(loss).data()[0];
        (value, vars.iter().map(|v| grads.get(*v).cloned()).collect(), out_value)
    };
    let (_, _, out) = eval(&inputs, None);
    let probe = rand_tensor(&mut rng, out.shape());
    let (_, analytic, _) = eval(&inputs, Some(&probe));
    let h = 1e-6;
    for (idx, input) in inputs.iter().enumerate() {
        let grad = analytic[idx].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let mut plus = inputs.clone();
            plus[idx].data_mut()[e] += h;
            let mut minus = inputs.clone();
            minus[idx].data_mut()[e] -= h;
            let numeric = (eval(&plus, Some(&probe)).0 - eval(&minus, Some(&probe)).0) / (2.0 * h);
            let a = grad.data()[e];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "input {idx} element {e}: analytic {a} vs numeric {numeric}"
            );
        }
    }
}

#[test]
fn elementwise_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let a = rand_tensor(&mut rng, &[2, 3]);
    let b = rand_tensor(&mut rng, &[2, 3]);
    check(vec![a.clone(), b.clone()], |g, v| g.add(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.sub(v[0], v[1]));
    check(vec![a.clone(), b.clone()], |g, v| g.mul(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.scale(v[0], -2.5));
    check(vec![a.clone()], |g, v| g.silu(v[0]));
    check(vec![a.clone()], |g, v| g.softmax(v[0]));
    check(vec![a.clone(), b], |g, v| g.mse(v[0], v[1]));
    check(vec![a.clone()], |g, v| g.mean(v[0]));
    check(vec![a], |g, v| g.reshape(v[0], &[3, 2]));
}

#[test]
fn broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[2, 3, 2, 4]);
    check(vec![x.clone(), rand_tensor(&mut rng, &[4])], |g, v| g.add_bias(v[0], v[1]));
    check(vec![x.clone(), rand_tensor(&mut rng, &[2, 4])], |g, v| g.add_per_batch(v[0], v[1]));
    check(vec![x.clone()], |g, v| g.spatial_mean(v[0]));
    check(vec![rand_tensor(&mut rng, &[3, 2])], |g, v| g.tile(v[0], 3));
    check(vec![x.clone()], |g, v| g.upsample2x(v[0]));
    check(vec![x.clone(), rand_tensor(&mut rng, &[2, 3, 2, 2])], |g, v| g.concat(&[v[0], v[1]]));
    check(vec![x], |g, v| g.slice_last(v[0], 1, 2));
}

#[test]
fn linear_and_conv() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[2, 4, 4, 3]);
    check(
        vec![x.clone(), rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5])],
        |g, v| g.linear(v[0], v[1], Some(v[2])),
    );
    check(
        vec![x.clone(), rand_tensor(&mut rng, &[3, 3, 3, 2]), rand_tensor(&mut rng, &[2])],
        |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1),
    );
    check(
        vec![x.clone(), rand_tensor(&mut rng, &[3, 3, 3, 2])],
        |g, v| g.conv2d(v[0], v[1], None, 2, 1),
    );
    check(vec![x, rand_tensor(&mut rng, &[1, 1, 3, 4])], |g, v| g.conv2d(v[0], v[1], None, 1, 0));
}

#[test]
fn normalization() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let gamma = rand_tensor(&mut rng, &[4]);
    let beta = rand_tensor(&mut rng, &[4]);
    check(vec![x.clone(), gamma.clone(), beta.clone()], |g, v| g.group_norm(v[0], v[1], v[2], 2, 1e-5));
    check(vec![x, gamma, beta], |g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
}

#[test]
fn attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let q = rand_tensor(&mut rng, &[2, 5, 4]);
    let k = rand_tensor(&mut rng, &[2, 3, 4]);
    let v = rand_tensor(&mut rng, &[2, 3, 4]);
    check(vec![q.clone(), k.clone(), v.clone()], |g, x| g.cross_attention(x[0], x[1], x[2], 1));
    check(vec![q, k, v], |g, x| g.cross_attention(x[0], x[1], x[2], 2));
}

#[test]
fn weighted_sum() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let w = rand_tensor(&mut rng, &[2, 3, 3, 2]);
    let f0 = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    let f1 = rand_tensor(&mut rng, &[2, 3, 3, 4]);
    check(vec![w, f0.clone(), f1.clone()], |g, v| g.weighted_sum(v[0], &[v[1], v[2]]));
    let p = rand_tensor(&mut rng, &[2, 2]);
    check(vec![p, f0, f1], |g, v| g.weighted_sum(v[0], &[v[1], v[2]]));
}

#[test]
fn frozen_parameters_get_no_gradient() {
    let w = Tensor::new(&[2, 2], vec![1.0f64, 2.0, 3.0, 4.0]);
    let trained = Tensor::new(&[2], vec![0.5f64, -0.5]);
    let mut g = Graph::new();
    let x = g.constant(Tensor::new(&[1, 2], vec![1.0, 1.0]));
    let wv = g.param(&w);
    g.set_trainable(true);
    let bv = g.param(&trained);
    let y = g.linear(x, wv, Some(bv));
    let loss = g.sum(y);
    let grads = g.backward(loss);
    assert!(grads.of(&w).is_none());
    assert_eq!(grads.of(&trained).unwrap().data(), &[1.0, 1.0]);
    // rebinding returns the same node
    assert_eq!(g.param(&w), wv);
}

#[test]
fn single_unit_weight_reproduces_feature_bitwise() {
    let f = Tensor::new(&[1, 2, 1, 2], vec![-0.0f32, 1.5, -2.25, 3.0]);
    let mut g = Graph::new();
    let w = g.constant(Tensor::full(&[1, 2, 1, 1], 1.0));
    let fv = g.constant(f.clone());
    let out = g.weighted_sum(w, &[fv]);
    assert!(g.value(out).bit_eq(&f));
}
