//! Data-parallel kernels against their sequential counterparts.
//!
//! `gemm` and `gemm_seq` are compared directly. The model-level benches
//! follow the build: run once with default features and once with
//! `--no-default-features` to compare the rayon and sequential paths.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use onetok::decoder::{self, DecoderConfig, StageAModel};
use onetok::encoder::{self, VitConfig};
use onetok::eval;
use onetok::graph::Graph;
use onetok::kernels;
use onetok::params::init_normal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MODE: &str = if cfg!(feature = "parallel") { "rayon" } else { "sequential" };

fn gemm(c: &mut Criterion) {
    let mut g = c.benchmark_group("gemm");
    for &n in &[64usize, 256] {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = init_normal(&mut rng, &[n, n], 1.0);
        let b = init_normal(&mut rng, &[n, n], 1.0);
        g.bench_with_input(BenchmarkId::new("parallel", n), &n, |bch, &n| {
            bch.iter(|| kernels::gemm(black_box(a.data()), black_box(b.data()), n, n, n))
        });
        g.bench_with_input(BenchmarkId::new("sequential", n), &n, |bch, &n| {
            bch.iter(|| kernels::gemm_seq(black_box(a.data()), black_box(b.data()), n, n, n))
        });
    }
    g.finish();
}

fn attention(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (batch, tokens, dim) = (32, 17, 64);
    let q = init_normal(&mut rng, &[batch * tokens, dim], 1.0);
    let k = init_normal(&mut rng, &[batch * tokens, dim], 1.0);
    let v = init_normal(&mut rng, &[batch * tokens, dim], 1.0);
    c.bench_function(&format!("attention/{MODE}"), |b| {
        b.iter(|| {
            let mut g = Graph::new();
            let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            black_box(g.attention(qv, kv, vv, batch, 4).unwrap());
        })
    });
}

fn ssim_batch(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = init_normal(&mut rng, &[64, 1, 32, 32], 0.5);
    let b = init_normal(&mut rng, &[64, 1, 32, 32], 0.5);
    c.bench_function(&format!("ssim_64x32x32/{MODE}"), |bch| {
        bch.iter(|| eval::ssim(black_box(&a), black_box(&b)).unwrap())
    });
}

fn stage_a_step(c: &mut Criterion) {
    let enc_cfg = VitConfig {
        image_size: 16,
        embed_dim: 32,
        depth: 2,
        heads: 2,
        mlp_ratio: 2,
        ..VitConfig::default()
    };
    let dec_cfg = DecoderConfig {
        image_size: 16,
        embed_dim: 64,
        depth: 2,
        heads: 2,
        time_embed_dim: 32,
        mlp_ratio: 2,
        ..DecoderConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let enc = encoder::init_encoder(&enc_cfg, &mut rng).unwrap();
    let dec = decoder::init_decoder(&dec_cfg, 32, &mut rng).unwrap();
    let batch = init_normal(&mut rng, &[32, 1, 16, 16], 0.5);
    let model = StageAModel {
        enc_cfg: &enc_cfg,
        encoder: &enc,
        frozen: &enc,
        dec_cfg: &dec_cfg,
        decoder: &dec,
        token_index: 0,
    };
    c.bench_function(&format!("stage_a_forward_backward/{MODE}"), |b| {
        b.iter(|| {
            let f = decoder::stage_a_forward(&model, &batch, 0.1, &mut rng).unwrap();
            black_box(f.graph.backward(f.total).unwrap());
        })
    });
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = gemm, attention, ssim_batch, stage_a_step
}
criterion_main!(benches);
