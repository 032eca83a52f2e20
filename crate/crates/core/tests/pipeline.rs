use std::collections::HashMap;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tclab_core::exec::Exec;
use tclab_core::learn::{self, TrainConfig};
use tclab_core::nets::{ArchConfig, CriticModel, GeneratorModel};
use tclab_core::sampler::{generate_runs, Predictor, Sampler, SamplerConfig, Selector};
use tclab_core::schedule::{GammaKind, Schedule};
use tclab_core::tokenspace::{ClassLabel, TokenGrid};
use tclab_core::worlds::{SyntheticWorld, WorldKind, WorldSpec};

fn tiny_arch() -> ArchConfig {
    ArchConfig {
        layers: 1,
        heads: 2,
        embed_dim: 8,
        hidden_dim: 16,
        dropout: 0.0,
    }
}

fn small_world() -> SyntheticWorld {
    SyntheticWorld::new(WorldSpec {
        height: 2,
        width: 2,
        codebook: 3,
        class_prior: None,
        kind: WorldKind::Potts { couplings: vec![1.0, -0.5] },
    })
    .unwrap()
}

fn models(world: &SyntheticWorld, seed: u64) -> (GeneratorModel, CriticModel) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, k, c) = (world.positions(), world.vocab().size(), world.num_classes());
    (
        GeneratorModel::new(tiny_arch(), n, k, c, &mut rng).unwrap(),
        CriticModel::new(tiny_arch(), n, k, c, &mut rng).unwrap(),
    )
}

fn exact_schedule(steps: usize) -> Schedule {
    Schedule {
        total_steps: steps,
        gamma: GammaKind::Linear,
        noise_scale: 0.0,
        temp_slope: 0.0,
        temp_intercept: 1.0,
    }
}

// Two binary positions with a hand-written correlated joint. Unmasking one
// random position per step with exact conditionals is ancestral sampling,
// so the output law must be the table itself.
#[test]
fn oracle_random_order_decoding_reproduces_a_hand_joint() {
    let joint = vec![0.1, 0.2, 0.3, 0.4];
    let world = SyntheticWorld::new(WorldSpec {
        height: 1,
        width: 2,
        codebook: 2,
        class_prior: None,
        kind: WorldKind::Table { joints: vec![joint.clone()] },
    })
    .unwrap();
    let want: HashMap<Vec<usize>, f64> = (0..4).map(|s| (world.grid(s).tokens().to_vec(), joint[s])).collect();
    let sampler = Sampler::new(Predictor::Oracle(&world), None, Selector::Random)
        .unwrap()
        .with_shape(world.shape())
        .unwrap();
    let cfg = SamplerConfig {
        schedule: exact_schedule(2),
        selector: Selector::Random,
        seed: 11,
        ..SamplerConfig::default()
    };
    let n = 200_000;
    let runs = generate_runs(&sampler, &vec![ClassLabel(0); n], &cfg, Exec::default(), false).unwrap();
    let mut counts: HashMap<Vec<usize>, usize> = HashMap::new();
    for (g, _) in &runs {
        *counts.entry(g.tokens().to_vec()).or_default() += 1;
    }
    let tv: f64 = want
        .iter()
        .map(|(k, p)| (counts.get(k).copied().unwrap_or(0) as f64 / n as f64 - p).abs())
        .sum::<f64>()
        / 2.0;
    assert!(tv < 0.005, "tv {tv}");
}

#[test]
fn critic_training_leaves_the_generator_untouched() {
    let world = small_world();
    let cfg = TrainConfig {
        epochs: 1,
        steps_per_epoch: 8,
        batch_size: 16,
        eval_interval: 4,
        eval_batches: 2,
        patience: 0,
        ..TrainConfig::default()
    };
    let gen = learn::train_generator(&world, &tiny_arch(), &cfg, Exec::Sequential, |_, _, _| Ok(())).unwrap().model;
    let before = gen.net().params().checksum();
    let outcome = learn::train_critic(Predictor::Model(&gen), &world, &tiny_arch(), &cfg, Exec::Sequential, |_, _, _| Ok(())).unwrap();
    assert_eq!(gen.net().params().checksum(), before);
    assert!(outcome.trace.iter().all(|r| r.value.is_finite()));
}

#[test]
fn outputs_do_not_depend_on_batching_or_workers() {
    let world = small_world();
    let (gen, critic) = models(&world, 3);
    let sampler = Sampler::new(Predictor::Model(&gen), Some(&critic), Selector::Critic)
        .unwrap()
        .with_shape(world.shape())
        .unwrap();
    let classes: Vec<ClassLabel> = (0..37).map(|i| ClassLabel(i % 2)).collect();
    let run = |batch_size, exec| {
        let cfg = SamplerConfig {
            batch_size,
            seed: 5,
            ..SamplerConfig::default()
        };
        generate_runs(&sampler, &classes, &cfg, exec, false)
            .unwrap()
            .into_iter()
            .map(|r| r.0)
            .collect::<Vec<TokenGrid>>()
    };
    assert_eq!(run(1, Exec::Sequential), run(8, Exec::Parallel));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_trace_step_masks_exactly_k(seed in any::<u64>(), steps in 1usize..7, sel in 0usize..3) {
        let world = small_world();
        let (gen, critic) = models(&world, seed);
        let selector = [Selector::Critic, Selector::Confidence, Selector::Random][sel];
        let sampler = Sampler::new(Predictor::Model(&gen), Some(&critic), selector)
            .unwrap()
            .with_shape(world.shape())
            .unwrap();
        let cfg = SamplerConfig {
            schedule: Schedule::default().with_steps(steps),
            selector,
            seed,
            ..SamplerConfig::default()
        };
        let runs = generate_runs(&sampler, &[ClassLabel(0), ClassLabel(1)], &cfg, Exec::Sequential, true).unwrap();
        for (grid, trace) in &runs {
            prop_assert!(grid.is_complete());
            prop_assert_eq!(trace.steps.len(), steps);
            for s in &trace.steps {
                prop_assert_eq!(s.k, cfg.schedule.mask_count(s.t - 1, world.positions()));
                prop_assert_eq!(s.mask.masked_count(), s.k);
                prop_assert_eq!(s.post.masked_count(), s.k);
            }
            if selector != Selector::Critic {
                prop_assert_eq!(trace.lock_violations(), 0);
            }
        }
    }
}
