//! Convolution kernels and evaluation, on rayon's global pool versus a
//! single-thread pool. Build with `--no-default-features` to bench the plain
//! sequential loops instead.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use refseg::eval::{evaluate, Method};
use refseg::synth::{generate_samples, SynthConfig};
use refseg::text::Vocabulary;
use refseg::{ModelConfig, RunConfig, Sample, SegModel, Tape, Tensor};

fn conv_step(image: &Tensor, filters: &Tensor, bias: &Tensor, up: &Tensor) {
    let mut tape = Tape::new();
    let x = tape.param(image.clone());
    let w = tape.param(filters.clone());
    let b = tape.param(bias.clone());
    let k = tape.constant(up.clone());
    let y = tape.conv2d(x, w, b, 2, 1).unwrap();
    let z = tape.conv_transpose2d(y, k, 2, 1).unwrap();
    let loss = tape.sum(z);
    tape.backward(loss).unwrap();
}

fn with_pools(c: &mut Criterion, group: &str, f: impl Fn() + Sync) {
    let mut g = c.benchmark_group(group);
    #[cfg(feature = "parallel")]
    {
        g.bench_function(BenchmarkId::new("parallel", rayon::current_num_threads()), |b| b.iter(&f));
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        g.bench_function(BenchmarkId::new("single-thread", 1), |b| b.iter(|| single.install(&f)));
    }
    #[cfg(not(feature = "parallel"))]
    g.bench_function(BenchmarkId::new("sequential", 1), |b| b.iter(&f));
    g.finish();
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let image = Tensor::uniform(&[32, 64, 64], 1.0, &mut rng);
    let filters = Tensor::uniform(&[32, 32, 3, 3], 0.1, &mut rng);
    let bias = Tensor::zeros(&[32]);
    let up = Tensor::uniform(&[32, 32, 4, 4], 0.1, &mut rng);
    with_pools(c, "conv_forward_backward", || conv_step(&image, &filters, &bias, &up));
}

fn eval(c: &mut Criterion) {
    let cfg = SynthConfig { seed: 3, count: 64, ..Default::default() };
    let samples: Vec<Sample> = generate_samples(&cfg).unwrap().into_iter().map(|(s, _)| s).collect();
    let run = RunConfig::default();
    let vocab = Vocabulary::build(samples.iter().map(|s| s.expression.as_str()));
    let mut model = SegModel::init(ModelConfig::from(&run), vocab, 0).unwrap();
    model.attach_bilinear_deconv().unwrap();
    with_pools(c, "eval_model", || {
        evaluate(Method::Model(&model), &samples, (64, 64)).unwrap();
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = kernels, eval
}
criterion_main!(benches);
