use candle_core::{DType, Device, Tensor};
use criterion::{criterion_group, criterion_main, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use cliprec::params::ParamSet;
use cliprec::student::{Student, StudentConfig};
use cliprec::trainer::desk_student;

fn build(config: StudentConfig) -> Student {
    let mut params = ParamSet::new();
    let mut rng = ChaCha20Rng::seed_from_u64(7);
    Student::init(&mut params, &mut rng, config, DType::F32, &Device::Cpu).unwrap()
}

fn bench_decode(c: &mut Criterion) {
    let student = build(desk_student());
    let images = Tensor::rand(0f32, 1f32, (4, 3, 32, 128), &Device::Cpu).unwrap();

    c.bench_function("desk_encode_b4", |b| {
        b.iter(|| student.memory(&images).unwrap())
    });

    let memory = student.memory(&images).unwrap();
    c.bench_function("desk_greedy_decode_b4", |b| {
        b.iter(|| student.greedy_decode(&memory).unwrap())
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = bench_decode
}
criterion_main!(benches);
