mod common;

use afa_core::data::*;
use afa_core::denoiser::*;
use afa_core::diffusion::NoiseSchedule;
use afa_core::ensemble::EnsembleBundle;
use afa_core::layers::digest;
use afa_core::moe::*;
use afa_core::sabw::{sabw_init, SabwConfig};
use afa_core::trainer::*;
use common::small_spec;

fn data(n: usize, seed: u64) -> ConditionedBatch {
    let cfg = DataConfig {
        img_size: 8,
        cond_dim: 8,
        cond_tokens: 2,
        ..Default::default()
    };
    gen_dataset(n, &SceneFilter::default(), &cfg, seed).unwrap()
}

fn cfg(lr: f64, epochs: usize) -> TrainConfig {
    TrainConfig {
        lr,
        epochs,
        batch_size: 8,
        seed: 3,
        ..Default::default()
    }
}

#[test]
fn expert_training_reduces_loss_and_is_reproducible() {
    let spec = small_spec();
    let sched = NoiseSchedule::default();
    let d = data(64, 1);
    let (a, ra) = pretrain_expert(&d, &spec, &sched, &cfg(3e-3, 6), 5).unwrap();
    assert_eq!(ra.steps(), 6 * 8);
    assert!(ra.tail_loss(8) < ra.head_loss(8), "{} -> {}", ra.head_loss(8), ra.tail_loss(8));
    let (b, rb) = pretrain_expert(&d, &spec, &sched, &cfg(3e-3, 6), 5).unwrap();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(ra, rb);
    let mut other = cfg(3e-3, 6);
    other.seed = 4;
    let (c, _) = pretrain_expert(&d, &spec, &sched, &other, 5).unwrap();
    assert_ne!(digest(&a), digest(&c));
}

#[test]
fn step_cap_and_prompt_dropout_are_honoured() {
    let spec = small_spec();
    let sched = NoiseSchedule::default();
    let d = data(200, 2);
    let mut c = cfg(1e-3, 3);
    c.max_steps = Some(5);
    c.prompt_drop_prob = 1.0;
    let (_, r) = pretrain_expert(&d, &spec, &sched, &c, 0).unwrap();
    assert_eq!(r.steps(), 5);
    assert_eq!(r.null_examples, r.examples);
    c.prompt_drop_prob = 1.5;
    assert!(pretrain_expert(&d, &spec, &sched, &c, 0).is_err());
}

#[test]
fn aggregator_training_moves_only_the_aggregator() {
    let spec = small_spec();
    let sched = NoiseSchedule::default();
    let d = data(32, 3);
    let models: Vec<DenoiserParams> = (0..2).map(|i| build_denoiser(&spec, i).unwrap()).collect();
    let before = model_digests(&models);
    let bundle = EnsembleBundle::new(models, sabw_init(2, &spec, &SabwConfig::default(), 1).unwrap()).unwrap();
    let (sabw, report) = train_sabw(&bundle, &d, &sched, &cfg(1e-3, 1)).unwrap();
    assert_eq!(report.steps(), 4);
    assert_ne!(digest(&sabw), digest(&bundle.sabw));
    assert!(sabw.blocks.iter().any(|b| b.proj.w.max_abs() > 0.0));
    assert_eq!(model_digests(&bundle.models), before);
    let (again, _) = train_sabw(&bundle, &d, &sched, &cfg(1e-3, 1)).unwrap();
    assert_eq!(digest(&again), digest(&sabw));
}

#[test]
fn router_training_moves_only_the_routers() {
    let spec = small_spec();
    let sched = NoiseSchedule::default();
    let d = data(32, 4);
    for level in [MoeLevel::Block, MoeLevel::Denoiser] {
        let models: Vec<DenoiserParams> = (0..2).map(|i| build_denoiser(&spec, i).unwrap()).collect();
        let before = model_digests(&models);
        let routers = router_init(2, &spec, level, &SabwConfig::default(), 2).unwrap();
        let bundle = MoeBundle::new(models, routers, GumbelConfig::default()).unwrap();
        let (trained, report) = train_router(&bundle, &d, &sched, &cfg(1e-3, 1)).unwrap();
        assert_eq!(report.steps(), 4);
        assert_ne!(digest(&trained), digest(&bundle.routers));
        assert_eq!(model_digests(&bundle.models), before);
    }
}
