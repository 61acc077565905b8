//! Parallel-versus-sequential timing for the row-parallel kernels and one
//! whole forward pass. The two paths compute identical arithmetic, so this
//! measures pure scheduling cost: on a single core they should tie, and
//! with more cores the parallel rows should pull ahead on larger shapes.

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mol_core::config::{LayerKind, ModelConfig};
use mol_core::graph::Graph;
use mol_core::kernels::{self, Vis};
use mol_core::model::{build_model, forward_lm};
use mol_core::parallel::set_parallel;
use mol_core::stage::{AttnKind, DispatchMode};

fn rand_vec(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn both_paths(c: &mut Criterion, name: &str, mut f: impl FnMut()) {
    let mut group = c.benchmark_group(name);
    for (label, on) in [("parallel", true), ("sequential", false)] {
        group.bench_function(label, |b| {
            set_parallel(on);
            b.iter(&mut f);
        });
    }
    group.finish();
    set_parallel(true);
}

fn bench_matmul(c: &mut Criterion) {
    let (m, k, n) = (256, 256, 256);
    let a = rand_vec(m * k, 1);
    let b = rand_vec(k * n, 2);
    let mut out = vec![0.0f32; m * n];
    both_paths(c, "matmul_256x256x256", || {
        kernels::mm_nn(&a, &b, 1, m, k, n, false, &mut out);
        criterion::black_box(out[0]);
    });
}

fn bench_attention(c: &mut Criterion) {
    let (groups, t, dh) = (4, 512, 64);
    let q = rand_vec(groups * t * dh, 3);
    let k = rand_vec(groups * t * dh, 4);
    let v = rand_vec(groups * t * dh, 5);
    let mut out = vec![0.0f32; groups * t * dh];
    let scale = 1.0 / (dh as f32).sqrt();
    both_paths(c, "attention_4x512x64", || {
        kernels::attention_forward(&q, &k, &v, groups, t, dh, scale, &Vis::Full, &mut out);
        criterion::black_box(out[0]);
    });
}

fn bench_delta(c: &mut Criterion) {
    let (groups, t, dh) = (4, 512, 64);
    let q = rand_vec(groups * t * dh, 6);
    let k = rand_vec(groups * t * dh, 7);
    let v = rand_vec(groups * t * dh, 8);
    let beta = rand_vec(groups * t, 9);
    let alpha: Vec<f32> = rand_vec(groups * t, 10).iter().map(|x| 0.5 + 0.4 * x).collect();
    both_paths(c, "delta_chunk_4x512x64", || {
        let out = kernels::delta_chunk_forward(&q, &k, &v, &beta, &alpha, groups, t, dh, 64, false);
        criterion::black_box(out.out[0]);
    });
}

fn bench_forward(c: &mut Criterion) {
    let mut cfg = ModelConfig::base(
        128,
        vec![LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 }, LayerKind::Dense],
    );
    cfg.t_max = 256;
    cfg.routed_attn = AttnKind::Delta;
    let model = build_model::<f32>(&cfg).expect("bench model");
    let tokens: Vec<usize> = (0..128).map(|i| (i * 37 + 11) % 256).collect();
    both_paths(c, "forward_hybrid_t128", || {
        let mut g = Graph::new();
        let vars = model.leaf(&mut g, false);
        let out = forward_lm(&mut g, &model, &vars, &tokens, DispatchMode::Sparse)
            .expect("bench forward");
        criterion::black_box(g.value(out.logits).data()[0]);
    });
}

criterion_group!(benches, bench_matmul, bench_attention, bench_delta, bench_forward);
criterion_main!(benches);
