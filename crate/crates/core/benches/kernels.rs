//! Throughput of the hot kernels. Run once with default features (rayon) and
//! once with `--no-default-features` (sequential); bench ids carry the mode.
//! The `cwcl_samples` group also compares both paths inside one build.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use ndarray::Array2;
use rand::Rng;

use cwcl::confident::predict_corpus;
use cwcl::corpus::datasets::{synthetic, SyntheticSpec};
use cwcl::corpus::{AugPolicy, Augmenter};
use cwcl::losses::{cwcl_loss_grad, Anchors};
use cwcl::nn::{BackboneSpec, TappedBackbone, Tensor4};
use cwcl::par;
use cwcl::rng::{stream, Purpose};

const MODE: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn banks(n: usize, channels: usize, dim: usize) -> Vec<Array2<f64>> {
    let mut rng = stream(0, Purpose::Synthetic, 1, 0);
    (0..n)
        .map(|_| Array2::from_shape_fn((2 * channels, dim), |_| rng.gen_range(-1.0..1.0)))
        .collect()
}

fn cwcl_samples(c: &mut Criterion) {
    let banks = banks(64, 32, 64);
    let mut g = c.benchmark_group("cwcl_samples");
    g.throughput(Throughput::Elements(banks.len() as u64));
    g.bench_function(BenchmarkId::new("par_map", MODE), |b| {
        b.iter(|| par::map_indexed(banks.len(), |i| cwcl_loss_grad(banks[i].view(), 0.5, Anchors::First).unwrap().value))
    });
    g.bench_function("plain_loop", |b| {
        b.iter(|| {
            banks
                .iter()
                .map(|z| cwcl_loss_grad(z.view(), 0.5, Anchors::First).unwrap().value)
                .collect::<Vec<_>>()
        })
    });
    g.finish();
}

fn forward(c: &mut Criterion) {
    let (train, _) = synthetic(&SyntheticSpec {
        train_size: 64,
        test_size: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let shape = train.image_shape();
    let model = TappedBackbone::new(BackboneSpec::small(), shape, 10, 0).unwrap();
    let x = Tensor4::from_images(train.images(), shape).unwrap();
    let mut g = c.benchmark_group("forward");
    g.throughput(Throughput::Elements(train.len() as u64));
    g.sample_size(20);
    g.bench_function(BenchmarkId::new("small_backbone_64x16x16", MODE), |b| b.iter(|| model.forward(&x).unwrap()));
    g.bench_function(BenchmarkId::new("train_step_64x16x16", MODE), |b| {
        b.iter_batched(
            || model.clone(),
            |mut m| {
                let (out, tape) = m.forward_train(x.clone()).unwrap();
                m.backward(&tape, &vec![0.01; out.logits.len()], &[]).unwrap();
            },
            criterion::BatchSize::LargeInput,
        )
    });
    g.finish();
}

fn selection(c: &mut Criterion) {
    let (train, _) = synthetic(&SyntheticSpec {
        train_size: 256,
        test_size: 2,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let shape = train.image_shape();
    let model = TappedBackbone::new(BackboneSpec::small(), shape, 10, 0).unwrap();
    let aug = Augmenter::new(AugPolicy::default(), shape);
    let mut g = c.benchmark_group("selection");
    g.throughput(Throughput::Elements(train.len() as u64));
    g.sample_size(10);
    g.bench_function(BenchmarkId::new("predict_averaged_256", MODE), |b| {
        b.iter(|| predict_corpus(&model, train.images(), &aug, 0, 0, 128).unwrap())
    });
    g.finish();
}

criterion_group!(benches, cwcl_samples, forward, selection);
criterion_main!(benches);
