mod common;

use afa_core::denoiser::*;
use afa_core::layers::digest;
use afa_core::{Graph, Tensor};
use common::{gradcheck, random_inputs, small_spec, tiny_spec};

#[test]
fn seven_block_spec() {
    let spec = DenoiserSpec::default();
    assert_eq!(spec.num_blocks(), 7);
    let kinds: Vec<BlockKind> = (0..7).map(|j| spec.block_kind(j)).collect();
    use BlockKind::*;
    assert_eq!(kinds, vec![Down, Down, Down, Middle, Up, Up, Up]);
    let p: DenoiserParams = build_denoiser(&spec, 0).unwrap();
    assert_eq!(p.num_blocks(), 7);
    assert!(p.validate().is_ok());
}

#[test]
fn seeds_control_initialisation() {
    let spec = small_spec();
    let a: DenoiserParams = build_denoiser(&spec, 5).unwrap();
    let b: DenoiserParams = build_denoiser(&spec, 5).unwrap();
    let c: DenoiserParams = build_denoiser(&spec, 6).unwrap();
    assert_eq!(digest(&a), digest(&b));
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn time_embedding_is_injective_over_the_schedule() {
    let e0 = time_embedding(0, 8).unwrap();
    for k in 0..4 {
        assert_eq!(e0[2 * k], 0.0);
        assert_eq!(e0[2 * k + 1], 1.0);
    }
    let all: Vec<Vec<f64>> = (1..=1000).map(|t| time_embedding(t, 32).unwrap()).collect();
    for i in 0..all.len() {
        for j in i + 1..all.len() {
            assert!(all[i] != all[j], "collision between t={} and t={}", i + 1, j + 1);
        }
    }
    assert_eq!(time_embedding(17, 32).unwrap(), time_embedding(17, 32).unwrap());
    assert!(time_embedding(3, 7).is_err());
}

#[test]
fn block_outputs_follow_the_shape_table() {
    let spec = small_spec();
    let p: DenoiserParams = build_denoiser(&spec, 1).unwrap();
    let (x, conds, t) = random_inputs::<f32>(&spec, 2, 3);
    for (j, shape) in spec.shape_table().into_iter().enumerate() {
        let input = BlockFeature {
            data: Tensor::from_fn(&[2, shape.input[0], shape.input[1], shape.input[2]], |i| (i as f32 * 0.37).sin()),
            block_index: j,
        };
        let y = block_forward(&p, j, &input, &conds, &t).unwrap();
        assert_eq!(y.data.shape()[1..], shape.output);
        let again = block_forward(&p, j, &input, &conds, &t).unwrap();
        assert!(y.data.bit_eq(&again.data));
    }
    let wrong = BlockFeature {
        data: Tensor::zeros(&[2, 3, 3, 3]),
        block_index: 0,
    };
    assert!(block_forward(&p, 0, &wrong, &conds, &t).is_err());
    let (y, stats) = denoiser_forward_traced(&p, &x, &conds, &t).unwrap();
    assert_eq!(y.shape(), x.shape());
    assert_eq!(stats.pushes, spec.n_down);
    assert_eq!(stats.pops, spec.n_down);
}

#[test]
fn condition_tokens_reach_every_block() {
    let spec = small_spec();
    let p: DenoiserParams = build_denoiser(&spec, 2).unwrap();
    let (_, conds, t) = random_inputs::<f32>(&spec, 1, 4);
    let mut bumped = conds.clone();
    bumped[0].tokens.data_mut()[0] += 0.5;
    for (j, shape) in spec.shape_table().into_iter().enumerate() {
        let x = BlockFeature {
            data: Tensor::from_fn(&[1, shape.input[0], shape.input[1], shape.input[2]], |i| (i as f32 * 0.11).cos()),
            block_index: j,
        };
        let a = block_forward(&p, j, &x, &conds, &t).unwrap();
        let b = block_forward(&p, j, &x, &bumped, &t).unwrap();
        assert!(a.data.max_abs_diff(&b.data) > 0.0, "block {j} ignores the condition");
    }
}

#[test]
fn models_sharing_a_spec_share_block_shapes() {
    let spec = small_spec();
    let (x, conds, t) = random_inputs::<f32>(&spec, 1, 8);
    let a: DenoiserParams = build_denoiser(&spec, 1).unwrap();
    let b: DenoiserParams = build_denoiser(&spec, 2).unwrap();
    assert_eq!(denoiser_forward(&a, &x, &conds, &t).unwrap().shape(), denoiser_forward(&b, &x, &conds, &t).unwrap().shape());
}

#[test]
fn invalid_specs_are_rejected() {
    let mut s = tiny_spec();
    s.n_up = 2;
    assert!(build_denoiser::<f32>(&s, 0).is_err());
    let mut s = tiny_spec();
    s.img_size = 6;
    s.n_down = 3;
    s.n_up = 3;
    s.channel_mults = vec![1, 1, 1];
    assert!(s.validate().is_err());
}

#[test]
fn skip_stack_detects_imbalance() {
    let mut g = Graph::<f32>::new();
    let v = g.constant(Tensor::zeros(&[1]));
    let mut s = SkipStack::with_capacity(1);
    assert!(s.pop().is_err());
    s.push(v).unwrap();
    assert!(s.push(v).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let spec = tiny_spec();
    let mut p: DenoiserParams<f64> = build_denoiser(&spec, 11).unwrap();
    let (x, conds, t) = random_inputs::<f64>(&spec, 2, 12);
    let target: Tensor<f64> = afa_core::random::randn(&mut afa_core::random::rng(13), x.shape());
    let err = gradcheck(&mut p, 40, 14, |p, g| {
        let xv = g.constant(x.clone());
        let (y, _) = denoiser_graph(p, g, xv, &conds, &t).unwrap();
        let e = g.constant(target.clone());
        g.mse(y, e)
    });
    assert!(err < 1e-3, "relative error {err}");
}
