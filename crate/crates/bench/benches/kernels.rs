use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use iur_bench::{examples, toy_rewriter, untrained_rewriter};
use iur_core::dialogue::ConnectionWordList;
use iur_core::edit::{EditMatrix, EditType};
use iur_core::generate::{standardize, two_pass_label};
use iur_core::model::ModelConfig;
use iur_core::nn::{Graph, Tensor};
use iur_core::supervision::build_gold_matrix;

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn random_matrix(rng: &mut ChaCha8Rng, m: usize, n: usize) -> EditMatrix {
    let cells = (0..m * n).map(|_| EditType::from_index(rng.random_range(0..3)).unwrap()).collect();
    EditMatrix::from_cells(m, n, cells).unwrap()
}

fn kernels(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = random_tensor(&mut rng, &[1, 32, 24, 12]);
    let w = random_tensor(&mut rng, &[32, 32, 3, 3]);
    let b = random_tensor(&mut rng, &[32]);
    c.bench_function("conv3x3 32ch 24x12 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (xv, wv, bv) = (g.variable(x.clone()), g.variable(w.clone()), g.variable(b.clone()));
            let out = g.conv3x3(xv, wv, bv).unwrap();
            let s = g.sum(out);
            g.backward(s)
        })
    });

    let seq = random_tensor(&mut rng, &[30, 100]);
    let wi = random_tensor(&mut rng, &[400, 100]);
    let wh = random_tensor(&mut rng, &[400, 100]);
    let lb = random_tensor(&mut rng, &[400]);
    c.bench_function("lstm 30 steps h100 forward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let (s, a, h, bias) = (g.input(seq.clone()), g.input(wi.clone()), g.input(wh.clone()), g.input(lb.clone()));
            g.lstm(s, a, h, bias, false).unwrap()
        })
    });
}

fn inference(c: &mut Criterion) {
    let data = examples(64, 3);
    let rewriter = toy_rewriter(&data);
    let prepared: Vec<_> = data.iter().map(|ex| rewriter.prepare(ex)).collect();
    c.bench_function("predict toy model", |bench| {
        let mut i = 0;
        bench.iter(|| {
            i = (i + 1) % prepared.len();
            rewriter.rewrite_prepared(&prepared[i]).unwrap()
        })
    });

    let small = ModelConfig { embed_dim: 16, hidden_dim: 16, base_channels: 4, ..ModelConfig::default() };
    let rewriter = untrained_rewriter(&data, small);
    c.bench_function("predict small model", |bench| {
        bench.iter(|| rewriter.rewrite_prepared(&rewriter.prepare(&data[0])).unwrap())
    });
}

fn labeling(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    c.bench_function("two-pass labeling 40x20", |bench| {
        bench.iter_batched(|| random_matrix(&mut rng, 40, 20), |y| two_pass_label(&y), BatchSize::SmallInput)
    });
    c.bench_function("standardize 40x20", |bench| {
        bench.iter_batched(|| random_matrix(&mut rng, 40, 20), |y| standardize(&y), BatchSize::SmallInput)
    });

    let data = examples(64, 5);
    let conn = ConnectionWordList::empty();
    c.bench_function("gold matrix derivation", |bench| {
        let mut i = 0;
        bench.iter(|| {
            i = (i + 1) % data.len();
            build_gold_matrix(&data[i], &conn, 0).unwrap()
        })
    });
}

criterion_group!(benches, kernels, inference, labeling);
criterion_main!(benches);
