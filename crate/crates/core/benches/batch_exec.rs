use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use vgse::eval::retrieval_eval;
use vgse::exec::Exec;
use vgse::text::{gen_synthetic, make_batches};
use vgse::train::{loss_and_grads, members, LossOptions, Objective, TrainConfig, Trainer};

fn trainer() -> Trainer {
    let synth = gen_synthetic(256, 64, 64, 3).expect("corpus");
    let config = TrainConfig {
        objective: Objective::Cap2all,
        d_e: 32,
        d_cell: 32,
        d_a: 16,
        n_a: 4,
        d_img: 64,
        batch_size: 32,
        seed: 3,
        ..TrainConfig::default()
    };
    Trainer::new(config, &synth.corpus, Exec::Sequential).expect("trainer")
}

fn bench_batch_gradients(c: &mut Criterion) {
    let t = trainer();
    let batch = &make_batches(&t.samples, 32, 3, 0).expect("batches")[0];
    let ms = members(&t.samples, batch);
    let mut group = c.benchmark_group("loss_and_grads");
    group.sample_size(20);
    for exec in [Exec::Sequential, Exec::Parallel] {
        let opts = LossOptions {
            objective: Objective::Cap2all,
            dropout: None,
            exec,
        };
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &opts,
            |b, opts| b.iter(|| loss_and_grads(&t.params, &ms, opts).expect("loss")),
        );
    }
    group.finish();
}

fn bench_retrieval(c: &mut Criterion) {
    let t = trainer();
    let mut group = c.benchmark_group("retrieval_eval");
    group.sample_size(20);
    for exec in [Exec::Sequential, Exec::Parallel] {
        group.bench_with_input(
            BenchmarkId::from_parameter(format!("{exec:?}")),
            &exec,
            |b, &exec| b.iter(|| retrieval_eval(&t.params, &t.samples, exec).expect("retrieval")),
        );
    }
    group.finish();
}

criterion_group!(benches, bench_batch_gradients, bench_retrieval);
criterion_main!(benches);
