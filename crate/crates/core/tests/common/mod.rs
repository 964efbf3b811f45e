#![allow(dead_code)]

use afa_core::denoiser::{block_forward, BlockFeature, BlockKind, Condition, DenoiserParams, DenoiserSpec};
use afa_core::ensemble::EnsembleBundle;
use afa_core::layers::Params;
use afa_core::random::{randn, rng, stream};
use afa_core::{Graph, Real, Tensor, Var};
use rand::Rng;

/// Three blocks (down, middle, up) on 4x4 images.
pub fn tiny_spec() -> DenoiserSpec {
    DenoiserSpec {
        n_down: 1,
        n_up: 1,
        base_channels: 4,
        channel_mults: vec![1],
        cond_dim: 4,
        cond_tokens: 2,
        img_channels: 3,
        img_size: 4,
    }
}

/// Five blocks on 8x8 images.
pub fn small_spec() -> DenoiserSpec {
    DenoiserSpec {
        n_down: 2,
        n_up: 2,
        base_channels: 8,
        channel_mults: vec![1, 2],
        cond_dim: 8,
        cond_tokens: 2,
        img_channels: 3,
        img_size: 8,
    }
}

pub fn random_conds<T: Real>(spec: &DenoiserSpec, b: usize, seed: u64) -> Vec<Condition<T>> {
    let mut r = stream(seed, 0xc0);
    (0..b)
        .map(|i| {
            if i % 4 == 3 {
                Condition::null(spec.cond_tokens, spec.cond_dim)
            } else {
                Condition::new(randn(&mut r, &[spec.cond_tokens, spec.cond_dim])).unwrap()
            }
        })
        .collect()
}

/// A batch of noisy images, conditions and timesteps.
pub fn random_inputs<T: Real>(spec: &DenoiserSpec, b: usize, seed: u64) -> (Tensor<T>, Vec<Condition<T>>, Vec<usize>) {
    let [h, w, c] = spec.image_shape();
    let x = randn(&mut stream(seed, 0x1a), &[b, h, w, c]);
    let mut r = stream(seed, 0x7);
    let t = (0..b).map(|_| r.random_range(1..=1000)).collect();
    (x, random_conds(spec, b, seed), t)
}

/// Largest relative error between analytic and central-difference
/// gradients over `picks` randomly chosen scalar parameters of `p`.
pub fn gradcheck<P: Params<f64>>(p: &mut P, picks: usize, seed: u64, loss: impl Fn(&P, &mut Graph<f64>) -> Var) -> f64 {
    let mut g = Graph::new();
    g.set_trainable(true);
    let l = loss(p, &mut g);
    let grads = g.backward(l);
    let mut analytic = Vec::new();
    p.visit("", &mut |_, t| {
        let gr = grads.of(t).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        analytic.extend_from_slice(gr.data());
    });
    let total = analytic.len();
    let mut r = rng(seed);
    let eval = |p: &P| {
        let mut g = Graph::new();
        let l = loss(p, &mut g);
        g.value(l).data()[0]
    };
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for _ in 0..picks {
        let k = r.random_range(0..total);
        let plus = {
            nudge(p, k, h);
            eval(p)
        };
        let minus = {
            nudge(p, k, -2.0 * h);
            eval(p)
        };
        nudge(p, k, h);
        let numeric = (plus - minus) / (2.0 * h);
        let a = analytic[k];
        let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-6);
        worst = worst.max(err);
    }
    worst
}

/// Adds `delta` to the `k`-th scalar of `p` in visit order.
pub fn nudge<P: Params<f64>>(p: &mut P, k: usize, delta: f64) {
    let mut offset = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        if (offset..offset + n).contains(&k) {
            t.data_mut()[k - offset] += delta;
        }
        offset += n;
    });
}

/// Fills every tensor whose name ends with `suffix` with small random values.
pub fn randomize<T: Real, P: Params<T>>(p: &mut P, suffix: &str, scale: f64, seed: u64) {
    let mut r = rng(seed);
    p.visit_mut("", &mut |name, t| {
        if name.ends_with(suffix) {
            let fresh: Tensor<T> = randn(&mut r, t.shape());
            *t = fresh.map(|v| v * T::lit(scale));
        }
    });
}

/// Reference forward: every model runs block `j` on the shared input, the
/// outputs are averaged and the skip stack is managed by hand.
pub fn averaged_forward<T: Real>(models: &[DenoiserParams<T>], x: &Tensor<T>, conds: &[Condition<T>], t: &[usize]) -> Tensor<T> {
    let spec = &models[0].spec;
    let mut stack: Vec<Tensor<T>> = Vec::new();
    let mut cur = x.clone();
    for j in 0..spec.num_blocks() {
        if spec.block_kind(j) == BlockKind::Up {
            let skip = stack.pop().unwrap();
            let (a, b) = (cur.last_dim(), skip.last_dim());
            let mut shape = cur.shape().to_vec();
            *shape.last_mut().unwrap() = a + b;
            cur = Tensor::from_fn(&shape, |i| {
                let (row, c) = (i / (a + b), i % (a + b));
                if c < a {
                    cur.data()[row * a + c]
                } else {
                    skip.data()[row * b + c - a]
                }
            });
        }
        let input = BlockFeature {
            data: cur.clone(),
            block_index: j,
        };
        let outs: Vec<Tensor<T>> = models
            .iter()
            .map(|m| block_forward(m, j, &input, conds, t).unwrap().data)
            .collect();
        cur = Tensor::from_fn(outs[0].shape(), |i| {
            let s = outs.iter().map(|o| o.data()[i].to_f64().unwrap()).sum::<f64>();
            T::lit(s / outs.len() as f64)
        });
        if spec.block_kind(j) == BlockKind::Down {
            stack.push(cur.clone());
        }
    }
    assert!(stack.is_empty());
    cur
}

/// Exposes only the aggregator parameters of a bundle to the checker, so
/// `afa_graph` binds exactly the tensors being perturbed.
pub struct AggregatorOf(pub EnsembleBundle<f64>);

impl Params<f64> for AggregatorOf {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<f64>)) {
        self.0.sabw.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<f64>)) {
        self.0.sabw.visit_mut(prefix, f);
    }
}
