use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vaenar_core::model::{ModelConfig, NoiseMode, Vaenar};
use vaenar_core::nn::{Ctx, ParamStore};
use vaenar_core::{Tape, Tensor};

fn matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = c.benchmark_group("matmul_forward_backward");
    for n in [32, 64, 128] {
        let a = Tensor::randn(&[n, n], 1.0, &mut rng);
        let b = Tensor::randn(&[n, n], 1.0, &mut rng);
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| {
                let t = Tape::new();
                let (x, y) = (t.leaf(a.clone()), t.leaf(b.clone()));
                let p = t.sum(t.matmul(x, y).unwrap());
                black_box(t.backward(p).unwrap());
            })
        });
    }
    g.finish();
}

fn desk_model() -> (ParamStore, Vaenar) {
    let mut store = ParamStore::new();
    let cfg = ModelConfig {
        reduction_factors: vec![2, 5],
        ..ModelConfig::desk()
    };
    let model = Vaenar::new(cfg, &mut store).unwrap();
    (store, model)
}

fn loss_backward(c: &mut Criterion) {
    let (store, model) = desk_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ids: Vec<usize> = (0..10).map(|i| i % 12).collect();
    let y = Tensor::randn(&[40, model.cfg.n_bins], 1.0, &mut rng);
    let mut g = c.benchmark_group("loss_backward_desk_10chars_40frames");
    for r in [2, 5] {
        let noise = model.latent_noise(40, r, &mut rng);
        g.bench_with_input(BenchmarkId::new("r", r), &r, |bench, &r| {
            bench.iter(|| {
                let ctx = Ctx::train(&store, 0);
                let out = model.compute_loss(&ctx, &ids, &y, &noise, r, 0.03, 1.0).unwrap();
                black_box(ctx.param_grads(&ctx.tape.backward(out.loss).unwrap()));
            })
        });
    }
    g.finish();
}

fn synthesize(c: &mut Criterion) {
    let (store, model) = desk_model();
    let mut g = c.benchmark_group("synthesize_desk_r2");
    for chars in [8, 16, 32] {
        let ids: Vec<usize> = (0..chars).map(|i| i % 12).collect();
        g.bench_with_input(BenchmarkId::new("chars", chars), &ids, |bench, ids| {
            bench.iter(|| {
                let ctx = Ctx::eval(&store);
                black_box(model.synthesize(&ctx, ids, 2, 4 * ids.len(), NoiseMode::Zeros).unwrap());
            })
        });
    }
    g.finish();
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = matmul, loss_backward, synthesize
}
criterion_main!(benches);
