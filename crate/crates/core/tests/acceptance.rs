//! Acceptance gates for the whole crate, one test per gate. Every test
//! prints a single `PASS:`/`FAIL:` line (run with `--nocapture` to see the
//! lines for passing tests). The speed and training gates time real runs,
//! so the full file takes tens of minutes on one core.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mol_core::attention::{attention_sublayer, rope_table, AttnParams, Visibility};
use mol_core::kernels::RopeTable;
use mol_core::bench::{crossover_sweep, equivalence_report, measured_crossover, time_prefill};
use mol_core::checkpoint::{load_checkpoint, model_from_bytes, save_checkpoint};
use mol_core::config::{LayerKind, ModelConfig};
use mol_core::delta::{delta_sublayer, DeltaForm, DeltaParams, DeltaState};
use mol_core::graph::{gradcheck_multi, Graph};
use mol_core::infer::{argmax, greedy_decode, DecodeSession};
use mol_core::mac::MacBreakdown;
use mol_core::model::{build_model, count_params, forward_lm};
use mol_core::router::route_topk;
use mol_core::stage::{
    split_stage, thin_block, AttnKind, AttnSubParams, AttnSubVars, DispatchMode, FfnKind,
    FfnParams, FfnVars, InnerVis, SeqCtx, StageParams, StageSpec, ThinBlockParams, RMSNORM_EPS,
};
use mol_core::tensor::{Real, Tensor};
use mol_core::train::{synthetic_corpus, tokenize_bytes, train, StepRow, TrainConfig};

fn report(name: &str, pass: bool, detail: &str) {
    println!("{}: {name} ({detail})", if pass { "PASS" } else { "FAIL" });
    assert!(pass, "{name}: {detail}");
}

fn rng_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn rand_tokens(n: usize, vocab: usize, seed: u64) -> Vec<usize> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| r.gen_range(0..vocab)).collect()
}

/// Small random values everywhere, norm gains near one.
fn fill_params<E: Real>(name: &str, t: &mut Tensor<E>, rng: &mut ChaCha8Rng) {
    for v in t.data_mut() {
        *v = if name.contains("norm") {
            E::from_f64(1.0 + rng.gen_range(-0.2..0.2))
        } else {
            E::from_f64(rng.gen_range(-0.4..0.4))
        };
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn a01_projection_overhead_fractions() {
    let mut pass = true;
    let mut detail = String::new();
    for (d_thin, want_pct) in [(256usize, 40.0f64), (128, 57.0), (64, 73.0)] {
        let cfg =
            ModelConfig::base(1024, vec![LayerKind::Split { n: 15, s: 1, k: 3, d_thin }]);
        let frac = count_params(&cfg).unwrap().stages[0].wrapper_fraction() * 100.0;
        pass &= (frac - want_pct).abs() <= 1.0;
        let _ = write!(detail, "d_thin {d_thin}: {frac:.1}% vs {want_pct:.0}%; ");
    }
    report("01 projection overhead fractions", pass, detail.trim_end_matches("; "));
}

fn equiv_configs() -> Vec<(&'static str, ModelConfig)> {
    let mk = |layers: Vec<LayerKind>, attn: AttnKind| {
        let mut c = ModelConfig::base(64, layers);
        c.t_max = 256;
        c.dense_d_ff = 128;
        c.routed_attn = attn;
        c
    };
    vec![
        (
            "0+3of5",
            mk(vec![LayerKind::Split { n: 5, s: 0, k: 3, d_thin: 64 }], AttnKind::Softmax),
        ),
        (
            "1+2of5",
            mk(
                vec![LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 }, LayerKind::Dense],
                AttnKind::Delta,
            ),
        ),
        (
            "1+3of15",
            mk(
                vec![LayerKind::Split { n: 15, s: 1, k: 3, d_thin: 64 }, LayerKind::Dense],
                AttnKind::Delta,
            ),
        ),
    ]
}

#[test]
fn a02_dispatch_paths_agree() {
    let (t_list, seeds) = ([16usize, 64, 255], [1u64, 2, 3]);
    let dispatch = |check: &str| check == "dense_vs_sparse" || check == "dense_vs_batched";
    let mut pass = true;
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    let mut rows = 0usize;
    for (id, cfg) in equiv_configs() {
        for row in equivalence_report::<f32>(id, &cfg, &t_list, &seeds, 1e-5).unwrap() {
            if dispatch(row.check) {
                pass &= row.pass;
                worst32 = worst32.max(row.max_diff);
                rows += 1;
            }
        }
        for row in equivalence_report::<f64>(id, &cfg, &t_list, &seeds, 1e-10).unwrap() {
            if dispatch(row.check) {
                pass &= row.pass;
                worst64 = worst64.max(row.max_diff);
                rows += 1;
            }
        }
    }
    let detail =
        format!("{rows} comparisons, worst f32 {worst32:.2e} <= 1e-5, worst f64 {worst64:.2e} <= 1e-10");
    report("02 dense, sparse, and batched dispatch agree", pass, &detail);
}

fn delta_pair<E: Real>(t: usize, chunk: usize, seed: u64) -> f64 {
    let mut p = DeltaParams::<E>::zeros(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("d", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
    let x = rng_tensor(&[t, 8], seed ^ 0xabcd);
    let run = |form: DeltaForm| -> Vec<f64> {
        let mut g = Graph::<E>::new();
        let xv = g.leaf(Tensor::from_f64_slice(&[t, 8], x.data()).unwrap(), false);
        let dv = p.leaf(&mut g, false);
        let (o, _) = delta_sublayer(&mut g, xv, &dv, form, None).unwrap();
        g.value(o).data().iter().map(|&v| Real::to_f64(v)).collect()
    };
    max_abs(&run(DeltaForm::Recurrent), &run(DeltaForm::Chunked(chunk)))
}

#[test]
fn a03_delta_rule_forms_agree() {
    let mut pass = true;
    let (mut worst32, mut worst64) = (0.0f64, 0.0f64);
    for &t in &[1usize, 7, 64, 257] {
        for &chunk in &[1usize, 2, 16, 64, t] {
            let d64 = delta_pair::<f64>(t, chunk, 40 + t as u64);
            let d32 = delta_pair::<f32>(t, chunk, 40 + t as u64);
            worst64 = worst64.max(d64);
            worst32 = worst32.max(d32);
            pass &= d64 <= 1e-10 && d32 <= 1e-5;
        }
    }

    // A token-by-token decode chain must match the recurrent prefill rows.
    let t = 257;
    let mut p = DeltaParams::<f64>::zeros(8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    p.visit_mut("d", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
    let x = rng_tensor(&[t, 8], 78);
    let mut g = Graph::<f64>::new();
    let xv = g.leaf(x.clone(), false);
    let dv = p.leaf(&mut g, false);
    let (o, _) = delta_sublayer(&mut g, xv, &dv, DeltaForm::Recurrent, None).unwrap();
    let prefill = g.value(o).data().to_vec();
    let mut state = DeltaState::new(2, 4);
    let mut macs = MacBreakdown::default();
    let mut chain = 0.0f64;
    for row in 0..t {
        let out = state.decode_step(&p, None, &x.data()[row * 8..(row + 1) * 8], &mut macs);
        chain = chain.max(max_abs(&out, &prefill[row * 8..(row + 1) * 8]));
    }
    pass &= chain <= 1e-10;

    let detail = format!(
        "chunk sweep worst f64 {worst64:.2e}, f32 {worst32:.2e}; decode chain {chain:.2e}"
    );
    report("03 chunked, recurrent, and stepwise delta agree", pass, &detail);
}

fn ctx<'a>(
    rope: &'a Arc<RopeTable<f64>>,
    positions: &'a [usize],
    form: DeltaForm,
) -> SeqCtx<'a, f64> {
    SeqCtx { rope, positions, delta_form: form, delta_rope: false }
}

fn sum_squares(g: &mut Graph<f64>, y: mol_core::Var) -> mol_core::Result<mol_core::Var> {
    let sq = g.mul(y, y)?;
    Ok(g.sum_all(sq))
}

#[test]
fn a04_gradients_match_finite_differences() {
    let (eps, tol) = (1e-5, 1e-4);
    let mut pass = true;
    let mut detail = String::new();
    let mut record = |name: &str, worst: f64, pass: &mut bool| {
        *pass &= worst < tol;
        let _ = write!(detail, "{name} {worst:.1e}; ");
    };

    let mut worst = 0.0f64;
    for seed in [200u64, 201, 202] {
        let err = gradcheck_multi(
            |g, v| {
                let y = g.rmsnorm(v[0], v[1], RMSNORM_EPS)?;
                sum_squares(g, y)
            },
            &[rng_tensor(&[4, 6], seed), rng_tensor(&[6], seed + 50)],
            eps,
            24,
        );
        worst = worst.max(err);
    }
    record("rmsnorm", worst, &mut pass);

    let (t, d, heads) = (5usize, 8usize, 2usize);
    let rope = rope_table::<f64>(d / heads, t);
    let positions: Vec<usize> = (0..t).collect();
    let mut worst = 0.0f64;
    for seed in [210u64, 211, 212] {
        let mut p = AttnParams::<f64>::zeros(d, heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("a", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
        let points =
            vec![rng_tensor(&[t, d], seed + 50), p.wq.clone(), p.wk.clone(), p.wv.clone(), p.wo.clone()];
        let err = gradcheck_multi(
            |g, v| {
                let vars = AttnVarsPatch { heads, v };
                let y = attention_sublayer(g, v[0], &vars.build(), &rope, &positions, Visibility::Full)?;
                sum_squares(g, y)
            },
            &points,
            eps,
            6,
        );
        worst = worst.max(err);
    }
    record("softmax attention", worst, &mut pass);

    let mut worst = 0.0f64;
    for seed in [220u64, 221, 222] {
        let mut p = DeltaParams::<f64>::zeros(d, heads);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("d", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
        let points = vec![
            rng_tensor(&[t, d], seed + 50),
            p.wq.clone(),
            p.wk.clone(),
            p.wv.clone(),
            p.conv_q.clone(),
            p.conv_k.clone(),
            p.conv_v.clone(),
            p.bias_q.clone(),
            p.bias_k.clone(),
            p.bias_v.clone(),
            p.w_beta.clone(),
            p.w_alpha.clone(),
            p.a_head.clone(),
            p.wo.clone(),
        ];
        let err = gradcheck_multi(
            |g, v| {
                let mut dv = p.leaf(g, false);
                dv.wq = v[1];
                dv.wk = v[2];
                dv.wv = v[3];
                dv.conv_q = v[4];
                dv.conv_k = v[5];
                dv.conv_v = v[6];
                dv.bias_q = v[7];
                dv.bias_k = v[8];
                dv.bias_v = v[9];
                dv.w_beta = v[10];
                dv.w_alpha = v[11];
                dv.a_head = v[12];
                dv.wo = v[13];
                let (y, _) = delta_sublayer(g, v[0], &dv, DeltaForm::Recurrent, None)?;
                sum_squares(g, y)
            },
            &points,
            eps,
            4,
        );
        worst = worst.max(err);
    }
    record("delta recurrence", worst, &mut pass);

    let (d_model, d_thin) = (6usize, 4usize);
    let rope_thin = rope_table::<f64>(d_thin / heads, t);
    let mut worst = 0.0f64;
    for seed in [230u64, 231, 232] {
        let mut p = ThinBlockParams::<f64>::zeros(
            d_model,
            d_thin,
            heads,
            AttnKind::Softmax,
            FfnKind::Dense,
            8,
        );
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("b", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
        let (w1, _) = match &p.inner.ffn {
            FfnParams::Dense { w1, w2 } => (w1.clone(), w2.clone()),
            FfnParams::Rank1Moe { .. } => unreachable!(),
        };
        let wq = match &p.inner.attn {
            AttnSubParams::Softmax(a) => a.wq.clone(),
            AttnSubParams::Delta(_) => unreachable!(),
        };
        let points = vec![
            rng_tensor(&[t, d_model], seed + 50),
            p.w_down.clone(),
            p.w_up.clone(),
            p.inner.norm1.clone(),
            p.inner.norm2.clone(),
            wq,
            w1,
        ];
        let err = gradcheck_multi(
            |g, v| {
                let mut vars = p.leaf(g, false);
                vars.w_down = v[1];
                vars.w_up = v[2];
                vars.inner.norm1 = v[3];
                vars.inner.norm2 = v[4];
                match &mut vars.inner.attn {
                    AttnSubVars::Softmax(a) => a.wq = v[5],
                    AttnSubVars::Delta(_) => unreachable!(),
                }
                match &mut vars.inner.ffn {
                    FfnVars::Dense { w1, .. } => *w1 = v[6],
                    FfnVars::Rank1Moe { .. } => unreachable!(),
                }
                let c = ctx(&rope_thin, &positions, DeltaForm::Recurrent);
                let y = thin_block(g, v[0], &vars, &c, InnerVis::Rows)?;
                sum_squares(g, y)
            },
            &points,
            eps,
            5,
        );
        worst = worst.max(err);
    }
    record("thin block", worst, &mut pass);

    let spec = StageSpec {
        n: 4,
        s: 1,
        k: 2,
        d_thin,
        d_ff: 8,
        routed_attn: AttnKind::Softmax,
        ffn: FfnKind::Dense,
        se_gating: true,
        shared_in_average: false,
    };
    let mut worst = 0.0f64;
    for seed in [240u64, 241, 242] {
        let mut p = StageParams::<f64>::zeros(d_model, heads, spec);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        p.visit_mut("s", &mut |name, tensor| fill_params(&name, tensor, &mut rng));
        let se = p.se.as_ref().unwrap();
        let points = vec![
            rng_tensor(&[t, d_model], seed + 50),
            p.router.clone(),
            p.blocks[1].w_down.clone(),
            p.blocks[2].w_up.clone(),
            se.w1.clone(),
            se.b2.clone(),
        ];
        let err = gradcheck_multi(
            |g, v| {
                let mut vars = p.leaf(g, false);
                vars.router = v[1];
                vars.blocks[1].w_down = v[2];
                vars.blocks[2].w_up = v[3];
                let sv = vars.se.as_mut().unwrap();
                sv.w1 = v[4];
                sv.b2 = v[5];
                let c = ctx(&rope_thin, &positions, DeltaForm::Recurrent);
                let (y, aux, _) = split_stage(g, v[0], &spec, &vars, &c, DispatchMode::Dense)?;
                let s = sum_squares(g, y)?;
                g.add(s, aux)
            },
            &points,
            eps,
            6,
        );
        worst = worst.max(err);
    }
    record("split stage", worst, &mut pass);

    let mut worst = 0.0f64;
    for seed in [250u64, 251, 252] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mags = {
            let mut t = Tensor::<f64>::zeros(&[5, 3]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.05..1.0);
            }
            t
        };
        let se = mol_core::router::SeParams::<f64>::zeros(3);
        let mut tensors = vec![mags];
        se.visit("se", &mut |_, t| tensors.push(t.clone()));
        for t in &mut tensors[1..] {
            for v in t.data_mut() {
                *v = rng.gen_range(-0.4..0.4);
            }
        }
        let err = gradcheck_multi(
            |g, v| {
                let vars = mol_core::router::SeVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                let y = mol_core::router::se_gate(g, v[0], &vars)?;
                sum_squares(g, y)
            },
            &tensors,
            eps,
            8,
        );
        worst = worst.max(err);
    }
    record("pick gate", worst, &mut pass);

    let mut worst = 0.0f64;
    for seed in [260u64, 261, 262] {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut load = Tensor::<f64>::zeros(&[6]);
        for v in load.data_mut() {
            *v = rng.gen_range(0.2..1.2);
        }
        let err = gradcheck_multi(|g, v| g.cv2(v[0]), &[load], eps, usize::MAX);
        worst = worst.max(err);
    }
    record("balance penalty", worst, &mut pass);

    report("04 gradients match central differences", pass, detail.trim_end_matches("; "));
}

/// Rebuilds attention vars from gradcheck points while keeping `heads`.
struct AttnVarsPatch<'a> {
    heads: usize,
    v: &'a [mol_core::Var],
}

impl AttnVarsPatch<'_> {
    fn build(&self) -> mol_core::attention::AttnVars {
        mol_core::attention::AttnVars {
            heads: self.heads,
            wq: self.v[1],
            wk: self.v[2],
            wv: self.v[3],
            wo: self.v[4],
        }
    }
}

#[test]
fn a05_structural_identities() {
    let mut pass = true;
    let mut detail = String::new();
    let (t, d_model, d_thin, heads) = (5usize, 8usize, 4usize, 2usize);
    let rope = rope_table::<f64>(d_thin / heads, t);
    let positions: Vec<usize> = (0..t).collect();

    // A block whose inner attention and FFN contribute nothing must write
    // exactly zero back to the stream, whatever its projections are.
    let mut p = ThinBlockParams::<f64>::zeros(
        d_model,
        d_thin,
        heads,
        AttnKind::Softmax,
        FfnKind::Dense,
        8,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    for v in p.w_down.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    for v in p.w_up.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    p.inner.norm1.data_mut().fill(1.0);
    p.inner.norm2.data_mut().fill(1.0);
    let mut g = Graph::<f64>::new();
    let x = g.leaf(rng_tensor(&[t, d_model], 301), false);
    let vars = p.leaf(&mut g, false);
    let c = ctx(&rope, &positions, DeltaForm::Recurrent);
    let y = thin_block(&mut g, x, &vars, &c, InnerVis::Rows).unwrap();
    let zero_out = g.value(y).data().iter().all(|&v| v == 0.0);
    pass &= zero_out;
    let _ = write!(detail, "inert inner block writes zeros: {zero_out}; ");

    // All-zero blocks leave the stream bitwise untouched in every mode.
    let spec = StageSpec {
        n: 3,
        s: 1,
        k: 1,
        d_thin,
        d_ff: 8,
        routed_attn: AttnKind::Softmax,
        ffn: FfnKind::Dense,
        se_gating: false,
        shared_in_average: false,
    };
    let mut sp = StageParams::<f64>::zeros(d_model, heads, spec);
    for v in sp.router.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let x_t = rng_tensor(&[t, d_model], 302);
    let mut identity = true;
    for mode in [DispatchMode::Dense, DispatchMode::Sparse, DispatchMode::Batched] {
        let mut g = Graph::<f64>::new();
        let xv = g.leaf(x_t.clone(), false);
        let sv = sp.leaf(&mut g, false);
        let c = ctx(&rope, &positions, DeltaForm::Recurrent);
        let (y, aux, _) = split_stage(&mut g, xv, &spec, &sv, &c, mode).unwrap();
        identity &= g.value(y).data() == x_t.data();
        identity &= g.value(aux).item().is_finite();
    }
    pass &= identity;
    let _ = write!(detail, "zero blocks keep stream identical: {identity}; ");

    // Shifting every router logit by a constant changes neither the picks
    // nor the selection weights.
    let mut worst_w = 0.0f64;
    let mut picks_equal = true;
    for seed in [303u64, 304, 305] {
        let logits = rng_tensor(&[6, 5], seed);
        let mut shifted = logits.clone();
        for v in shifted.data_mut() {
            *v += 7.25;
        }
        let probs = |l: &Tensor<f64>| -> Tensor<f64> {
            let mut g = Graph::<f64>::new();
            let lv = g.leaf(l.clone(), false);
            let p = g.softmax_lastdim(lv).unwrap();
            g.value(p).clone()
        };
        let a = route_topk(&probs(&logits), 2);
        let b = route_topk(&probs(&shifted), 2);
        picks_equal &= a.picks == b.picks;
        let wa: Vec<f64> = a.weights.clone();
        let wb: Vec<f64> = b.weights.clone();
        worst_w = worst_w.max(max_abs(&wa, &wb));
    }
    pass &= picks_equal && worst_w <= 1e-12;
    let _ = write!(detail, "shift-invariant routing: picks {picks_equal}, weights {worst_w:.1e}");

    report("05 structural identities", pass, &detail);
}

fn cv2_of(load: &[f64]) -> f64 {
    let mut g = Graph::<f64>::new();
    let l = g.leaf(Tensor::new(&[load.len()], load.to_vec()).unwrap(), false);
    let v = g.cv2(l).unwrap();
    g.value(v).item()
}

#[test]
fn a06_balance_penalty_keeps_blocks_alive() {
    let mut pass = true;
    let mut detail = String::new();

    let uniform = cv2_of(&[0.7, 0.7, 0.7, 0.7]);
    let lopsided = cv2_of(&[1.0, 0.0]);
    let scale = (cv2_of(&[0.3, 0.9, 0.6]) - cv2_of(&[1.05, 3.15, 2.1])).abs();
    let pins = uniform == 0.0 && (lopsided - 1.0).abs() < 1e-15 && scale <= 1e-12;
    pass &= pins;
    let _ = write!(
        detail,
        "uniform {uniform}, two-point {lopsided}, scale drift {scale:.1e}; "
    );

    // Train the same stage with and without the penalty. With it, every
    // block keeps at least 1% of assignments at every step; without it,
    // some block starves by the end in at least one seed.
    let mut cfg = ModelConfig::base(64, vec![LayerKind::Split { n: 8, s: 0, k: 2, d_thin: 64 }]);
    cfg.t_max = 128;
    let corpus = tokenize_bytes(&synthetic_corpus(200_000, 17));
    let mut balanced_min = f64::INFINITY;
    let mut starved_seeds = 0usize;
    let mut final_mins = String::new();
    for seed in [11u64, 12, 13] {
        for alpha in [0.05f64, 0.0] {
            let mut c = cfg.clone();
            c.seed = seed;
            let mut model = build_model::<f32>(&c).unwrap();
            let tc = TrainConfig {
                steps: 500,
                seq_len: 64,
                batch: 2,
                lr_peak: 3e-3,
                warmup: 50,
                aux_alpha: alpha,
                sample_seed: seed,
                mode: DispatchMode::Sparse,
                ..Default::default()
            };
            let rows = train(&mut model, &corpus, &tc, &mut |_| {}).unwrap();
            let min_of = |r: &StepRow| r.loads.iter().copied().fold(f64::INFINITY, f64::min);
            if alpha > 0.0 {
                let run_min = rows.iter().map(min_of).fold(f64::INFINITY, f64::min);
                balanced_min = balanced_min.min(run_min);
            } else {
                let fin = min_of(rows.last().unwrap());
                if fin < 0.01 {
                    starved_seeds += 1;
                }
                let _ = write!(final_mins, "{fin:.4} ");
            }
        }
    }
    pass &= balanced_min >= 0.01 && starved_seeds >= 1;
    let _ = write!(
        detail,
        "penalty on: min load {:.3}%; off: final min loads {} ({starved_seeds}/3 seeds starved)",
        balanced_min * 100.0,
        final_mins.trim()
    );

    report("06 balance penalty behavior", pass, &detail);
}

#[test]
fn a07_decode_matches_prefill_and_cost_shape() {
    let mut pass = true;
    let mut detail = String::new();

    // Greedy decode must replay the argmax chain of repeated full forwards.
    let mut cfg = ModelConfig::base(
        64,
        vec![LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 }, LayerKind::Dense],
    );
    cfg.t_max = 64;
    cfg.dense_d_ff = 128;
    cfg.routed_attn = AttnKind::Delta;
    cfg.seed = 31;
    let model = build_model::<f64>(&cfg).unwrap();
    let prompt = vec![1usize, 7, 3, 250, 99, 0, 42, 17];
    let decoded = greedy_decode(&model, &prompt, 32).unwrap();
    let mut chain = prompt.clone();
    for _ in 0..32 {
        let mut g = Graph::<f64>::new();
        let vars = model.leaf(&mut g, false);
        let out = forward_lm(&mut g, &model, &vars, &chain, DispatchMode::Dense).unwrap();
        let logits = g.value(out.logits);
        let vocab = logits.shape()[1];
        let last = &logits.data()[(chain.len() - 1) * vocab..];
        chain.push(argmax(last));
    }
    let chain_ok = decoded == chain[prompt.len()..];
    pass &= chain_ok;
    let _ = write!(detail, "32-step argmax chain: {chain_ok}; ");

    // Softmax attention pays per context token: 4x the context, exactly 4x
    // the per-step attention multiplies.
    let mut dense_cfg = ModelConfig::base(64, vec![LayerKind::Dense]);
    dense_cfg.t_max = 128;
    let dense_model = build_model::<f32>(&dense_cfg).unwrap();
    let mut session = DecodeSession::new(&dense_model);
    let tokens = rand_tokens(64, 256, 5);
    let mut attn_at = [0u64; 2];
    for (i, &tok) in tokens.iter().enumerate() {
        let step = session.step(tok).unwrap();
        if i + 1 == 16 {
            attn_at[0] = step.macs.attn;
        }
        if i + 1 == 64 {
            attn_at[1] = step.macs.attn;
        }
    }
    let ratio_ok = attn_at[1] == 4 * attn_at[0];
    pass &= ratio_ok;
    let _ = write!(detail, "attention step cost 64 vs 16 context = 4.0: {ratio_ok}; ");

    // With one shared softmax block among routed delta blocks, only the
    // shared attention term may grow as the context does.
    let mut hybrid = ModelConfig::base(64, vec![LayerKind::Split { n: 15, s: 1, k: 3, d_thin: 64 }]);
    hybrid.t_max = 64;
    hybrid.routed_attn = AttnKind::Delta;
    hybrid.seed = 9;
    let hybrid_model = build_model::<f32>(&hybrid).unwrap();
    let mut session = DecodeSession::new(&hybrid_model);
    let mut prev: Option<MacBreakdown> = None;
    let mut shape_ok = true;
    for &tok in &rand_tokens(48, 256, 6) {
        let step = session.step(tok).unwrap();
        if let Some(p) = prev {
            shape_ok &= step.macs.attn > p.attn;
            shape_ok &= step.macs.delta == p.delta
                && step.macs.proj == p.proj
                && step.macs.conv == p.conv
                && step.macs.ffn == p.ffn
                && step.macs.router == p.router
                && step.macs.head == p.head
                && step.macs.norm == p.norm;
        }
        prev = Some(step.macs);
    }
    pass &= shape_ok;
    let _ = write!(detail, "only shared attention grows with context: {shape_ok}");

    report("07 decode consistency and cost shape", pass, &detail);
}

#[test]
fn a08_speed_shapes() {
    let mut pass = true;
    let mut detail = String::new();

    // Forward+backward crossover: past some length the delta block is
    // cheaper than the softmax block at the same width.
    let rows = crossover_sweep(256, &[512, 1024, 2048], 3).unwrap();
    let crossover = measured_crossover(&rows);
    pass &= crossover.is_some();
    match crossover {
        Some(t) => {
            let _ = write!(detail, "delta beats softmax from T={t}; ");
        }
        None => {
            let _ = write!(detail, "no crossover up to T=2048; ");
        }
    }

    // Sparse dispatch pays for what it routes: the fewer blocks active per
    // token, the larger the speedup over the dense masked path.
    let op = |n: usize, k: usize| {
        let mut c = ModelConfig::base(256, vec![LayerKind::Split { n, s: 0, k, d_thin: 64 }]);
        c.t_max = 2048;
        c.seed = 3;
        c
    };
    let mut speedups = Vec::new();
    for (name, cfg) in [("2of20", op(20, 2)), ("2of10", op(10, 2)), ("4of7", op(7, 4))] {
        let model = build_model::<f32>(&cfg).unwrap();
        let tokens = rand_tokens(2048, 256, 11);
        let (_, dense) = time_prefill(name, &model, &tokens, DispatchMode::Dense, 3).unwrap();
        let (_, sparse) = time_prefill(name, &model, &tokens, DispatchMode::Sparse, 3).unwrap();
        let speedup = sparse.tokens_per_s / dense.tokens_per_s;
        let _ = write!(detail, "{name} {speedup:.2}x; ");
        speedups.push(speedup);
    }
    pass &= speedups[0] > speedups[1] && speedups[1] > speedups[2];

    // Fusing the per-block calls into batched primitives should not cost
    // wall time at a fixed shape. Routed blocks carry the delta rule here,
    // as in the other 1+3of15 checks; the softmax-routed variant is timed
    // alongside purely as context for the printed detail.
    let flavor = |attn: AttnKind| {
        let mut c = ModelConfig::base(256, vec![LayerKind::Split { n: 15, s: 1, k: 3, d_thin: 64 }]);
        c.t_max = 512;
        c.seed = 3;
        c.routed_attn = attn;
        c
    };
    let tokens = rand_tokens(256, 256, 12);
    let measure = |cfg: &ModelConfig, rounds: usize| {
        let model = build_model::<f32>(cfg).unwrap();
        let mut best = [f64::INFINITY; 2];
        for _ in 0..rounds {
            let (_, s) = time_prefill("1+3of15", &model, &tokens, DispatchMode::Sparse, 7).unwrap();
            let (_, b) = time_prefill("1+3of15", &model, &tokens, DispatchMode::Batched, 7).unwrap();
            best[0] = best[0].min(s.latency_per_token_s);
            best[1] = best[1].min(b.latency_per_token_s);
        }
        best
    };
    let hybrid = measure(&flavor(AttnKind::Delta), 4);
    let softmax = measure(&flavor(AttnKind::Softmax), 2);
    pass &= hybrid[1] <= hybrid[0];
    let _ = write!(
        detail,
        "batched {:.1}us/token vs sparse {:.1}us/token (softmax-routed: {:.1} vs {:.1})",
        hybrid[1] * 1e6,
        hybrid[0] * 1e6,
        softmax[1] * 1e6,
        softmax[0] * 1e6
    );

    report("08 speed shapes", pass, &detail);
}

#[test]
fn a09_training_smoke() {
    let corpus = tokenize_bytes(&synthetic_corpus(1 << 20, 42));
    let base = TrainConfig {
        steps: 500,
        seq_len: 128,
        batch: 2,
        lr_peak: 3e-3,
        warmup: 50,
        sample_seed: 7,
        mode: DispatchMode::Sparse,
        ..Default::default()
    };
    let ceiling = 0.7 * (256.0f64).ln();

    let mk = |layers: Vec<LayerKind>| {
        let mut c = ModelConfig::base(64, layers);
        c.t_max = 256;
        c.dense_d_ff = 128;
        c.seed = 21;
        c
    };
    let split = LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 };
    let mut dense_delta = mk(vec![LayerKind::Dense, LayerKind::Dense]);
    dense_delta.dense_attn = AttnKind::Delta;
    let mut hybrid = mk(vec![split, LayerKind::Dense]);
    hybrid.routed_attn = AttnKind::Delta;
    let wide = mk(vec![LayerKind::Split { n: 5, s: 0, k: 3, d_thin: 64 }]);
    let mut moe = mk(vec![split]);
    moe.ffn = FfnKind::Rank1Moe { experts: 8, active: 2 };
    let configs: Vec<(&str, ModelConfig)> = vec![
        ("dense-softmax", mk(vec![LayerKind::Dense, LayerKind::Dense])),
        ("dense-delta", dense_delta),
        ("hybrid-1+2of5", hybrid),
        ("top3of5", wide),
        ("rank1-moe", moe),
    ];

    let run = |cfg: &ModelConfig, steps: usize| -> Vec<StepRow> {
        let mut model = build_model::<f32>(cfg).unwrap();
        let tc = TrainConfig { steps, ..base.clone() };
        train(&mut model, &corpus, &tc, &mut |_| {}).unwrap()
    };

    let mut pass = true;
    let mut detail = String::new();
    for (i, (name, cfg)) in configs.iter().enumerate() {
        let rows = run(cfg, 500);
        let finite = rows.iter().all(|r| r.ce.is_finite() && r.aux.is_finite() && !r.skipped);
        let final_ce: f64 = rows[490..].iter().map(|r| r.ce).sum::<f64>() / 10.0;
        // Replaying a prefix must reproduce the same losses bit for bit;
        // the busiest config replays in full.
        let replay_steps = if *name == "hybrid-1+2of5" { 500 } else { 120 };
        let replay = run(cfg, replay_steps);
        let deterministic = replay
            .iter()
            .zip(&rows)
            .all(|(a, b)| a.ce.to_bits() == b.ce.to_bits() && a.aux.to_bits() == b.aux.to_bits());
        pass &= finite && deterministic && final_ce <= ceiling;
        let _ = write!(
            detail,
            "{name} ce {final_ce:.2}{}{}{}",
            if finite { "" } else { " non-finite!" },
            if deterministic { "" } else { " replay diverged!" },
            if i + 1 < configs.len() { ", " } else { "" }
        );
    }
    let _ = write!(detail, " (target <= {ceiling:.2})");

    report("09 training smoke", pass, &detail);
}

#[test]
fn a10_checkpoint_round_trip() {
    let mut cfg = ModelConfig::base(
        64,
        vec![LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 }, LayerKind::Dense],
    );
    cfg.t_max = 64;
    cfg.dense_d_ff = 128;
    cfg.routed_attn = AttnKind::Delta;
    cfg.se_gating = true;
    cfg.seed = 7;
    let model = build_model::<f32>(&cfg).unwrap();
    let path = std::env::temp_dir().join(format!("mol-accept-{}.ckpt", std::process::id()));
    save_checkpoint(&model, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();

    let tokens = rand_tokens(12, 256, 1);
    let logits = |m: &mol_core::model::Model<f32>| -> Vec<u32> {
        let mut g = Graph::<f32>::new();
        let vars = m.leaf(&mut g, false);
        let out = forward_lm(&mut g, m, &vars, &tokens, DispatchMode::Dense).unwrap();
        g.value(out.logits).data().iter().map(|v| v.to_bits()).collect()
    };
    let bitwise = logits(&model) == logits(&loaded);

    let bytes = std::fs::read(&path).unwrap();
    let mut bad_magic = bytes.clone();
    bad_magic[1] ^= 0xff;
    // First record header sits right after the magic and the embedded
    // config text; garbling its name length must be caught.
    let cfg_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let mut bad_header = bytes.clone();
    for b in &mut bad_header[12 + cfg_len..12 + cfg_len + 8] {
        *b = 0xff;
    }
    let truncated = &bytes[..bytes.len() - 5];
    let rejected = model_from_bytes(&bad_magic).is_err()
        && model_from_bytes(truncated).is_err()
        && model_from_bytes(&bad_header).is_err();
    let _ = std::fs::remove_file(&path);

    let pass = bitwise && rejected;
    let detail = format!("bitwise logits: {bitwise}; corrupted loads rejected: {rejected}");
    report("10 checkpoint round trip", pass, &detail);
}
