use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use rand::Rng;
use scommer::memory::{ema_blend, Reservoir};
use scommer::net::{cross_entropy, small_conv, ForwardOptions, Mode, NetworkState};
use scommer::rng::{stream, Stream};
use scommer::sparse::{apply_kwta, SparsityRatio};
use scommer::Tensor;

fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = stream(seed, Stream::Data);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn desk_net() -> NetworkState {
    let ratio = SparsityRatio::new(0.9).unwrap();
    let specs = small_conv((16, 32), 128, 10, Some((ratio, ratio)), true);
    NetworkState::build(&[1, 28, 28], &specs, 10, &mut stream(0, Stream::Init)).unwrap()
}

fn kwta(c: &mut Criterion) {
    let map = random_tensor(&[64, 11, 11], 1);
    let ratio = SparsityRatio::new(0.8).unwrap();
    c.bench_function("apply_kwta 64x11x11", |b| b.iter(|| apply_kwta(black_box(&map), None, ratio).unwrap()));
}

fn train_pass(c: &mut Criterion) {
    let net = desk_net();
    let x = random_tensor(&[64, 1, 28, 28], 2);
    let labels: Vec<usize> = (0..64).map(|i| i % 10).collect();
    c.bench_function("small_conv forward+backward batch 64", |b| {
        b.iter(|| {
            let out = net.forward(&x, ForwardOptions { mode: Mode::Train, dropout: None, frozen: None }).unwrap();
            let (_, g) = cross_entropy(&out.logits, &labels).unwrap();
            net.backward(&out, &g).unwrap()
        })
    });
    c.bench_function("small_conv eval batch 64", |b| b.iter(|| net.forward(&x, ForwardOptions::eval()).unwrap()));
}

fn reservoir(c: &mut Criterion) {
    c.bench_function("reservoir 10k inserts into 200", |b| {
        b.iter_batched(
            || (Reservoir::new(200), stream(3, Stream::Reservoir)),
            |(mut r, mut rng)| {
                for i in 0..10_000usize {
                    r.insert(i, &mut rng);
                }
                r
            },
            BatchSize::SmallInput,
        )
    });
}

fn ema(c: &mut Criterion) {
    let working = desk_net();
    let mut stable = desk_net();
    c.bench_function("ema_blend small_conv", |b| b.iter(|| ema_blend(&mut stable, black_box(&working), 0.99).unwrap()));
}

criterion_group!(benches, kwta, train_pass, reservoir, ema);
criterion_main!(benches);
