use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use metasep::dsp::{mix_at_snr, Waveform};
use metasep::model::SeparatorConfig;
use metasep::par::Execution;
use metasep::taskgen::{query_cells, MetaTask};
use metasep::trainer::{joint_gradient, meta_gradient_fomaml, SeparationObjective};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn task(seed: u64, samples: usize) -> MetaTask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut wave = || Waveform::new((0..samples).map(|_| rng.random_range(-1.0..1.0)).collect());
    let a: Vec<Waveform> = (0..3).map(|_| wave()).collect();
    let b: Vec<Waveform> = (0..3).map(|_| wave()).collect();
    let mixtures = (0..9).map(|m| mix_at_snr(&a[m / 3], &b[m % 3], 2.5).unwrap()).collect();
    MetaTask {
        accent: "bench".into(),
        speakers: ["a".into(), "b".into()],
        segments: [[0, 1, 2], [0, 1, 2]],
        mixtures,
        support: 4,
        query: query_cells(4),
        noise_seed: seed,
    }
}

fn bench(c: &mut Criterion) {
    let cfg = SeparatorConfig::tiny();
    let theta = cfg.init_params(0);
    let tasks: Vec<MetaTask> = (0..4).map(|s| task(s, 8000)).collect();
    let refs: Vec<&MetaTask> = tasks.iter().collect();
    let obj = SeparationObjective::new(&cfg);
    let pairs: Vec<_> = tasks.iter().flat_map(|t| &t.mixtures[..2]).collect();

    let mut group = c.benchmark_group("execution");
    group.sample_size(10);
    for exec in [Execution::Sequential, Execution::Parallel] {
        let name = format!("{exec:?}").to_lowercase();
        group.bench_with_input(BenchmarkId::new("fomaml_batch4", &name), &exec, |b, &e| {
            b.iter(|| meta_gradient_fomaml(&obj, &theta, &refs, 0.01, e).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("joint_batch8", &name), &exec, |b, &e| {
            b.iter(|| joint_gradient(&cfg, &theta, &pairs, e).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
