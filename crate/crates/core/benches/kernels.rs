use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spanet::exec::set_parallel;
use spanet::kernels::conv2d;
use spanet::Tensor;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_conv(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&[2, 16, 64, 64], &mut rng);
    let w = random(&[16, 16, 3, 3], &mut rng);
    let b = random(&[16], &mut rng);
    let mut group = c.benchmark_group("conv2d_16x64x64");
    for (name, par) in [("sequential", false), ("parallel", true)] {
        group.bench_function(BenchmarkId::from_parameter(name), |bch| {
            set_parallel(par);
            bch.iter(|| conv2d(&x, &w, Some(&b), 2));
        });
    }
    group.finish();
    set_parallel(true);
}

criterion_group!(benches, bench_conv);
criterion_main!(benches);
