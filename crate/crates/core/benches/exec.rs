#[global_allocator]
static GLOBAL: mimalloc::MiMalloc = mimalloc::MiMalloc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tclab_core::exec::Exec;
use tclab_core::nets::{ArchConfig, CriticModel, GeneratorModel};
use tclab_core::sampler::{generate_runs, Predictor, Sampler, SamplerConfig, Selector};
use tclab_core::tokenspace::ClassLabel;
use tclab_core::worlds::{SyntheticWorld, WorldSpec};

fn policies() -> [(&'static str, Exec); 2] {
    [("sequential", Exec::Sequential), ("parallel", Exec::Parallel)]
}

fn sampling(c: &mut Criterion) {
    let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
    let arch = ArchConfig {
        layers: 2,
        heads: 2,
        embed_dim: 32,
        hidden_dim: 64,
        dropout: 0.0,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (n, k) = (world.positions(), world.vocab().size());
    let generator = GeneratorModel::new(arch.clone(), n, k, world.num_classes(), &mut rng).unwrap();
    let critic = CriticModel::new(arch, n, k, world.num_classes(), &mut rng).unwrap();
    let sampler = Sampler::new(Predictor::Model(&generator), Some(&critic), Selector::Critic).unwrap();
    let classes = vec![ClassLabel(0); 512];
    let config = SamplerConfig {
        batch_size: 64,
        ..SamplerConfig::default()
    };

    let mut group = c.benchmark_group("generate_512");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| generate_runs(&sampler, &classes, &config, exec, false).unwrap())
        });
    }
    group.finish();
}

fn posteriors(c: &mut Criterion) {
    let world = SyntheticWorld::new(WorldSpec::potts()).unwrap();
    let grids: Vec<_> = (0..world.num_states()).step_by(97).map(|s| world.grid(s)).collect();

    let mut group = c.benchmark_group("class_posterior");
    group.sample_size(10);
    for (name, exec) in policies() {
        group.bench_with_input(BenchmarkId::from_parameter(name), &exec, |b, &exec| {
            b.iter(|| exec.try_map(grids.len(), |i| world.class_posterior(&grids[i])).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, sampling, posteriors);
criterion_main!(benches);
