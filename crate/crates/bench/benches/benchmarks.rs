use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dml_core::data::{generate_synthetic, sample_pairs, SyntheticSpec};
use dml_core::metric::{init_factor, minibatch_gradient, pair_distance_sq, Hyperparams};
use dml_core::protocol::{decode, encode, Message};
use dml_core::worker::sgd_step;

fn bench_gradients(c: &mut Criterion) {
    let data = generate_synthetic(&SyntheticSpec {
        n_classes: 10,
        per_class: 100,
        d: 200,
        cluster_spread: 1.0,
        center_spread: 0.5,
        seed: 1,
    })
    .unwrap();
    let pairs = sample_pairs(&data, 2000, 2000, 2).unwrap();
    let l = init_factor(32, 200, 3).unwrap();
    let hp = Hyperparams {
        batch_similar: 64,
        batch_dissimilar: 64,
        ..Default::default()
    };

    let mut group = c.benchmark_group("gradient");
    group.throughput(Throughput::Elements(128));
    group.bench_function("minibatch_128_pairs_k32_d200", |b| {
        b.iter(|| {
            minibatch_gradient(
                &l,
                &data,
                &pairs.similar[..64],
                &pairs.dissimilar[..64],
                &hp,
            )
            .unwrap()
        })
    });
    group.bench_function("pair_distance_sq_k32_d200", |b| {
        b.iter(|| pair_distance_sq(&l, data.vector(0), data.vector(1)).unwrap())
    });
    group.bench_function("sgd_step_128_pairs", |b| {
        b.iter_batched(
            || (l.clone(), ChaCha8Rng::seed_from_u64(7)),
            |(mut local, mut rng)| {
                sgd_step(&mut local, &data, &pairs, &hp, 0.01, &mut rng).unwrap()
            },
            BatchSize::SmallInput,
        )
    });
    group.finish();
}

fn bench_protocol(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let delta = dml_core::GradientDelta {
        k: 32,
        d: 200,
        values: (0..32 * 200).map(|_| rng.random_range(-1.0..1.0)).collect(),
    };
    let msg = Message::gradient_push(0, 1, &delta);
    let bytes = encode(&msg).unwrap();

    let mut group = c.benchmark_group("protocol");
    group.throughput(Throughput::Bytes(bytes.len() as u64));
    group.bench_function("encode_k32_d200", |b| b.iter(|| encode(&msg).unwrap()));
    group.bench_function("decode_k32_d200", |b| b.iter(|| decode(&bytes).unwrap()));
    group.finish();
}

criterion_group!(benches, bench_gradients, bench_protocol);
criterion_main!(benches);
