//! Wall-clock measurement, analytic multiply counts, and cross-path
//! equivalence reports. Timing uses a monotonic clock, discards the first
//! run as warmup, and reports the median of the remaining runs.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{attention_sublayer, rope_table, AttnParams, Visibility};
use crate::config::{LayerKind, ModelConfig, D_HEAD};
use crate::delta::{DeltaForm, CONV_WIDTH};
use crate::graph::Graph;
use crate::infer::{argmax, DecodeSession};
use crate::mac::{self, MacBreakdown};
use crate::model::{build_model, forward_lm_form, Model};
use crate::router::SE_HIDDEN;
use crate::stage::{inner_block, AttnKind, DispatchMode, FfnKind, InnerParams, InnerVis, SeqCtx};
use crate::tensor::{Error, Real, Result, Tensor};

/// Post-warmup runs entering each median.
pub const TIMED_RUNS: usize = 5;

fn median(times: &mut [f64]) -> f64 {
    times.sort_by(f64::total_cmp);
    let n = times.len();
    if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    }
}

/// Run `f` once untimed, then `runs` more times, and return the median
/// wall time in seconds.
pub fn median_seconds<F: FnMut()>(runs: usize, mut f: F) -> f64 {
    assert!(runs > 0, "need at least one timed run");
    f();
    let mut times: Vec<f64> = (0..runs)
        .map(|_| {
            let start = Instant::now();
            f();
            start.elapsed().as_secs_f64()
        })
        .collect();
    median(&mut times)
}

/// Which part of a run a MAC count describes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// One full-sequence forward over `t` tokens.
    Prefill,
    /// One generated token with `context` tokens consumed so far,
    /// the new one included.
    DecodeStep { context: usize },
}

struct BlockShape {
    d: usize,
    heads: usize,
    d_ff: usize,
    attn: AttnKind,
    ffn: FfnKind,
}

/// Everything in one block except the sequence mixing itself; all terms
/// here are proportional to the row count.
fn block_row_macs(m: &mut MacBreakdown, rows: usize, b: &BlockShape) {
    m.norm += 2 * mac::norm_macs(rows, b.d);
    match b.attn {
        AttnKind::Softmax => m.proj += 4 * mac::linear_macs(rows, b.d, b.d),
        AttnKind::Delta => {
            m.proj += 4 * mac::linear_macs(rows, b.d, b.d)
                + 2 * mac::linear_macs(rows, b.d, b.heads);
            m.conv += 3 * mac::conv_macs(rows, b.d, CONV_WIDTH);
            m.norm += 2 * mac::norm_macs(rows, b.d);
        }
    }
    match b.ffn {
        FfnKind::Dense => {
            m.ffn += mac::linear_macs(rows, b.d, b.d_ff) + mac::linear_macs(rows, b.d_ff, b.d);
        }
        FfnKind::Rank1Moe { experts, active } => {
            m.router += mac::linear_macs(rows, b.d, experts);
            m.ffn += rows as u64 * active as u64 * 2 * b.d as u64;
        }
    }
}

fn mixing_prefill_macs(m: &mut MacBreakdown, b: &BlockShape, t: usize, chunk: usize) {
    match b.attn {
        AttnKind::Softmax => m.attn += mac::attn_prefill_macs(b.heads, D_HEAD, t),
        AttnKind::Delta => m.delta += mac::delta_chunk_prefill_macs(b.heads, D_HEAD, t, chunk),
    }
}

fn mixing_decode_macs(m: &mut MacBreakdown, b: &BlockShape, context: usize) {
    match b.attn {
        AttnKind::Softmax => m.attn += mac::attn_decode_macs(b.heads, D_HEAD, context),
        AttnKind::Delta => m.delta += mac::delta_step_macs(b.heads, D_HEAD),
    }
}

/// Member rows per routed block when `total` rows spread as evenly as the
/// integers allow.
fn balanced_rows(total: usize, blocks: usize) -> Vec<usize> {
    let base = total / blocks;
    let rem = total % blocks;
    (0..blocks).map(|i| base + usize::from(i < rem)).collect()
}

/// Exact multiply-accumulate counts for one phase of one config. Every
/// row-proportional term is exact because top-k routing sends exactly
/// `t * k` rows through the routed blocks; the sequence-mixing terms of
/// routed softmax or delta blocks additionally assume balanced member
/// counts, since the real split depends on the router weights.
pub fn mac_count(cfg: &ModelConfig, t: usize, phase: Phase) -> MacBreakdown {
    let mut m = MacBreakdown::default();
    let d = cfg.d_model;
    let dense_shape = BlockShape {
        d,
        heads: cfg.n_heads,
        d_ff: cfg.dense_d_ff,
        attn: cfg.dense_attn,
        ffn: FfnKind::Dense,
    };
    for li in 0..cfg.n_layers() {
        match cfg.layers[li] {
            LayerKind::Dense => match phase {
                Phase::Prefill => {
                    block_row_macs(&mut m, t, &dense_shape);
                    mixing_prefill_macs(&mut m, &dense_shape, t, cfg.delta_chunk);
                }
                Phase::DecodeStep { context } => {
                    block_row_macs(&mut m, 1, &dense_shape);
                    mixing_decode_macs(&mut m, &dense_shape, context);
                }
            },
            LayerKind::Split { .. } => {
                let spec = cfg.stage_spec(li).expect("split layer has a stage spec");
                let heads = spec.d_thin / D_HEAD;
                let shared = BlockShape {
                    d: spec.d_thin,
                    heads,
                    d_ff: spec.d_ff,
                    attn: AttnKind::Softmax,
                    ffn: spec.ffn,
                };
                let routed = BlockShape { attn: spec.routed_attn, ..shared };
                let wrapper = |m: &mut MacBreakdown, rows: usize| {
                    m.proj += mac::linear_macs(rows, d, spec.d_thin)
                        + mac::linear_macs(rows, spec.d_thin, d);
                };
                match phase {
                    Phase::Prefill => {
                        m.router += mac::linear_macs(t, d, spec.routed());
                        if spec.se_gating {
                            m.router += mac::linear_macs(t, spec.k, SE_HIDDEN)
                                + mac::linear_macs(t, SE_HIDDEN, spec.k);
                        }
                        for _ in 0..spec.s {
                            wrapper(&mut m, t);
                            block_row_macs(&mut m, t, &shared);
                            mixing_prefill_macs(&mut m, &shared, t, cfg.delta_chunk);
                        }
                        let rows = t * spec.k;
                        wrapper(&mut m, rows);
                        block_row_macs(&mut m, rows, &routed);
                        for tb in balanced_rows(rows, spec.routed()) {
                            mixing_prefill_macs(&mut m, &routed, tb, cfg.delta_chunk);
                        }
                    }
                    Phase::DecodeStep { context } => {
                        m.router += mac::linear_macs(1, d, spec.routed());
                        if spec.se_gating {
                            m.router += mac::linear_macs(1, spec.k, SE_HIDDEN)
                                + mac::linear_macs(1, SE_HIDDEN, spec.k);
                        }
                        for _ in 0..spec.s {
                            wrapper(&mut m, 1);
                            block_row_macs(&mut m, 1, &shared);
                            mixing_decode_macs(&mut m, &shared, context);
                        }
                        wrapper(&mut m, spec.k);
                        block_row_macs(&mut m, spec.k, &routed);
                        let per_block = (context * spec.k).div_ceil(spec.routed());
                        for _ in 0..spec.k {
                            mixing_decode_macs(&mut m, &routed, per_block);
                        }
                    }
                }
            }
        }
    }
    let out_rows = match phase {
        Phase::Prefill => t,
        Phase::DecodeStep { .. } => 1,
    };
    m.head += mac::norm_macs(out_rows, d) + mac::linear_macs(out_rows, d, cfg.vocab);
    m
}

/// One measured cell of a throughput table.
#[derive(Clone, Debug)]
pub struct BenchRow {
    pub id: String,
    pub mode: String,
    pub t: usize,
    pub tokens_per_s: f64,
    pub latency_per_token_s: f64,
    /// Analytic live-scalar estimate (parameters plus retained activations
    /// for prefill, parameters plus per-block states for decode).
    pub peak_live_values: usize,
    pub macs: u64,
}

impl BenchRow {
    pub fn csv_header() -> &'static str {
        "id,mode,t,tokens_per_s,latency_per_token_s,peak_live_values,macs"
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{:.3},{:.6e},{},{}",
            self.id,
            self.mode,
            self.t,
            self.tokens_per_s,
            self.latency_per_token_s,
            self.peak_live_values,
            self.macs
        )
    }
}

pub fn mode_name(mode: DispatchMode) -> &'static str {
    match mode {
        DispatchMode::Dense => "dense",
        DispatchMode::Sparse => "sparse",
        DispatchMode::Batched => "batched",
    }
}

/// Time one full-sequence forward in the chosen dispatch mode and return
/// its logits together with the measured row.
pub fn time_prefill<E: Real>(
    id: &str,
    model: &Model<E>,
    tokens: &[usize],
    mode: DispatchMode,
    runs: usize,
) -> Result<(Tensor<E>, BenchRow)> {
    let t = tokens.len();
    let form = DeltaForm::Chunked(model.cfg.delta_chunk);
    let mut g = Graph::new();
    let vars = model.leaf(&mut g, false);
    let out = forward_lm_form(&mut g, model, &vars, tokens, mode, form)?;
    let logits = g.value(out.logits).clone();
    let peak = g.live_values();
    drop(g);

    let secs = median_seconds(runs, || {
        let mut g = Graph::new();
        let vars = model.leaf(&mut g, false);
        let out = forward_lm_form(&mut g, model, &vars, tokens, mode, form)
            .expect("same pass as the checked run");
        std::hint::black_box(g.value(out.logits).data().last().copied());
    });

    let row = BenchRow {
        id: id.to_string(),
        mode: mode_name(mode).to_string(),
        t,
        tokens_per_s: t as f64 / secs,
        latency_per_token_s: secs / t as f64,
        peak_live_values: peak,
        macs: mac_count(&model.cfg, t, Phase::Prefill).total(),
    };
    Ok((logits, row))
}

/// One decoded token's measurement.
#[derive(Clone, Debug)]
pub struct DecodeStat {
    /// Tokens consumed so far, this one included.
    pub context: usize,
    pub seconds: f64,
    pub macs: MacBreakdown,
}

/// Greedy decode with per-step wall time and exact per-step MAC tallies;
/// the prompt steps are recorded too.
pub fn time_decode<E: Real>(
    model: &Model<E>,
    prompt: &[usize],
    n: usize,
) -> Result<(Vec<usize>, Vec<DecodeStat>)> {
    if prompt.is_empty() {
        return Err(Error::Invalid { op: "decode", msg: "empty prompt".into() });
    }
    let mut session = DecodeSession::new(model);
    let mut stats = Vec::with_capacity(prompt.len() + n);
    let mut timed = |session: &mut DecodeSession<E>, tok: usize| -> Result<Vec<E>> {
        let start = Instant::now();
        let out = session.step(tok)?;
        stats.push(DecodeStat {
            context: session.position(),
            seconds: start.elapsed().as_secs_f64(),
            macs: out.macs,
        });
        Ok(out.logits)
    };
    let mut logits = Vec::new();
    for &tok in prompt {
        logits = timed(&mut session, tok)?;
    }
    let mut generated = Vec::with_capacity(n);
    for _ in 0..n {
        let next = argmax(&logits);
        generated.push(next);
        logits = timed(&mut session, next)?;
    }
    Ok((generated, stats))
}

/// Analytic live-scalar count of a decode session: parameters, the current
/// activation row, and every block's cache or recurrent state.
pub fn session_live_values<E: Real>(model: &Model<E>, session: &DecodeSession<E>) -> usize {
    let cfg = &model.cfg;
    let state_values = |kind: AttnKind, width: usize, ctx: usize| match kind {
        AttnKind::Softmax => 2 * ctx * width,
        AttnKind::Delta => (width / D_HEAD) * D_HEAD * D_HEAD + 3 * CONV_WIDTH * width,
    };
    let mut live = model.param_count() as usize + cfg.d_model;
    for (li, layer) in cfg.layers.iter().enumerate() {
        let ctxs = session.block_contexts(li);
        match layer {
            LayerKind::Dense => live += state_values(cfg.dense_attn, cfg.d_model, ctxs[0]),
            LayerKind::Split { .. } => {
                let spec = cfg.stage_spec(li).expect("split layer has a stage spec");
                for (bi, &ctx) in ctxs.iter().enumerate() {
                    let kind = if bi < spec.s { AttnKind::Softmax } else { spec.routed_attn };
                    live += state_values(kind, spec.d_thin, ctx);
                }
            }
        }
    }
    live
}

/// One sequence length of the isolated-block comparison.
#[derive(Clone, Copy, Debug)]
pub struct CrossoverRow {
    pub t: usize,
    pub softmax_s: f64,
    pub delta_s: f64,
}

impl CrossoverRow {
    pub fn line(&self) -> String {
        format!("{},{:.6},{:.6}", self.t, self.softmax_s, self.delta_s)
    }
}

fn randomized_inner(d: usize, heads: usize, attn: AttnKind, seed: u64) -> InnerParams<f32> {
    let mut p = InnerParams::<f32>::zeros(d, heads, attn, FfnKind::Dense, 4 * d);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("block", &mut |_, t| {
        for v in t.data_mut() {
            *v = rng.gen_range(-0.05..0.05);
        }
    });
    p
}

/// Forward+backward wall time of one softmax block against one delta block
/// of the same width, per sequence length.
pub fn crossover_sweep(d: usize, t_list: &[usize], runs: usize) -> Result<Vec<CrossoverRow>> {
    if d == 0 || d % D_HEAD != 0 {
        return Err(Error::Config(format!("crossover width {d} is not a multiple of {D_HEAD}")));
    }
    let heads = d / D_HEAD;
    let Some(&t_max) = t_list.iter().max() else {
        return Ok(Vec::new());
    };
    let rope = rope_table::<f32>(D_HEAD, t_max);
    let softmax_p = randomized_inner(d, heads, AttnKind::Softmax, 1);
    let delta_p = randomized_inner(d, heads, AttnKind::Delta, 2);

    let mut rows = Vec::with_capacity(t_list.len());
    for &t in t_list {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::new(&[t, d], (0..t * d).map(|_| rng.gen_range(-1.0f32..1.0)).collect())?;
        let positions: Vec<usize> = (0..t).collect();
        let time_block = |p: &InnerParams<f32>| {
            median_seconds(runs, || {
                let mut g = Graph::new();
                let vars = p.leaf(&mut g, true);
                let xv = g.leaf(x.clone(), false);
                let ctx = SeqCtx {
                    rope: &rope,
                    positions: &positions,
                    delta_form: DeltaForm::Chunked(64),
                    delta_rope: false,
                };
                let y = inner_block(&mut g, xv, &vars, &ctx, InnerVis::Rows)
                    .expect("isolated block forward");
                let loss = g.sum_all(y);
                g.backward(loss).expect("isolated block backward");
                std::hint::black_box(g.value(y).data().last().copied());
            })
        };
        rows.push(CrossoverRow { t, softmax_s: time_block(&softmax_p), delta_s: time_block(&delta_p) });
    }
    Ok(rows)
}

/// Smallest swept length where the delta block was faster, if any.
pub fn measured_crossover(rows: &[CrossoverRow]) -> Option<usize> {
    rows.iter().find(|r| r.delta_s < r.softmax_s).map(|r| r.t)
}

/// One check of one config at one length.
#[derive(Clone, Debug)]
pub struct EquivRow {
    pub check: &'static str,
    pub id: String,
    pub t: usize,
    pub max_diff: f64,
    pub pass: bool,
}

impl EquivRow {
    pub fn line(&self) -> String {
        format!(
            "{},{},{},{:.3e},{}",
            self.check,
            self.id,
            self.t,
            self.max_diff,
            if self.pass { "pass" } else { "fail" }
        )
    }
}

fn max_abs_diff<E: Real>(a: &[E], b: &[E]) -> f64 {
    assert_eq!(a.len(), b.len(), "comparing equal-shaped outputs");
    a.iter()
        .zip(b)
        .fold(0.0f64, |m, (&x, &y)| m.max((Real::to_f64(x) - Real::to_f64(y)).abs()))
}

/// Restricted-visibility attention against two oracles at width `d`: the
/// all-rows subset must match full attention exactly, and a proper subset
/// must match attention run on the gathered rows at their original
/// positions.
fn restricted_attention_rows<E: Real>(
    id: &str,
    d: usize,
    heads: usize,
    t: usize,
    seed: u64,
    tol: f64,
) -> Result<[EquivRow; 2]> {
    let mut p = AttnParams::<E>::zeros(d, heads);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    p.visit_mut("attn", &mut |_, w| {
        for v in w.data_mut() {
            *v = E::from_f64(rng.gen_range(-0.05..0.05));
        }
    });
    let x: Vec<E> = (0..t * d).map(|_| E::from_f64(rng.gen_range(-1.0..1.0))).collect();
    let xt = Tensor::new(&[t, d], x.clone())?;
    let rope = rope_table::<E>(D_HEAD, t);
    let positions: Vec<usize> = (0..t).collect();

    let run = |xin: &Tensor<E>, pos: &[usize], vis: Visibility<'_>| -> Result<Vec<E>> {
        let mut g = Graph::new();
        let vars = p.leaf(&mut g, false);
        let xv = g.leaf(xin.clone(), false);
        let y = attention_sublayer(&mut g, xv, &vars, &rope, pos, vis)?;
        Ok(g.value(y).data().to_vec())
    };

    let full = run(&xt, &positions, Visibility::Full)?;
    let all: Vec<usize> = (0..t).collect();
    let sub_all = run(&xt, &positions, Visibility::Subset(&all))?;
    let diff_all = max_abs_diff(&full, &sub_all);

    let sub: Vec<usize> = (0..t).step_by(2).collect();
    let restricted = run(&xt, &positions, Visibility::Subset(&sub))?;
    let gathered: Vec<E> = sub.iter().flat_map(|&r| x[r * d..(r + 1) * d].to_vec()).collect();
    let gt = Tensor::new(&[sub.len(), d], gathered)?;
    let oracle = run(&gt, &sub, Visibility::Full)?;
    let mut diff_sub = 0.0f64;
    for (ci, &r) in sub.iter().enumerate() {
        diff_sub = diff_sub
            .max(max_abs_diff(&restricted[r * d..(r + 1) * d], &oracle[ci * d..(ci + 1) * d]));
    }

    Ok([
        EquivRow {
            check: "restricted_full_subset",
            id: id.to_string(),
            t,
            max_diff: diff_all,
            pass: diff_all == 0.0,
        },
        EquivRow {
            check: "restricted_vs_oracle",
            id: id.to_string(),
            t,
            max_diff: diff_sub,
            pass: diff_sub <= tol,
        },
    ])
}

/// Max-logit-difference report across every redundant evaluation path:
/// the three dispatch modes, the two delta forms, incremental decode
/// against the full pass, and restricted attention against its oracles.
pub fn equivalence_report<E: Real>(
    id: &str,
    cfg: &ModelConfig,
    t_list: &[usize],
    seeds: &[u64],
    tol: f64,
) -> Result<Vec<EquivRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        let mut c = cfg.clone();
        c.seed = seed;
        let model = build_model::<E>(&c)?;
        for &t in t_list {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (t as u64).rotate_left(32));
            let tokens: Vec<usize> = (0..t).map(|_| rng.gen_range(0..c.vocab)).collect();
            let run = |mode: DispatchMode, form: DeltaForm| -> Result<Vec<E>> {
                let mut g = Graph::new();
                let vars = model.leaf(&mut g, false);
                let out = forward_lm_form(&mut g, &model, &vars, &tokens, mode, form)?;
                Ok(g.value(out.logits).data().to_vec())
            };
            let chunked = DeltaForm::Chunked(c.delta_chunk);
            let dense = run(DispatchMode::Dense, chunked)?;
            let mut push = |check: &'static str, diff: f64| {
                rows.push(EquivRow {
                    check,
                    id: id.to_string(),
                    t,
                    max_diff: diff,
                    pass: diff <= tol,
                });
            };
            let sparse = run(DispatchMode::Sparse, chunked)?;
            push("dense_vs_sparse", max_abs_diff(&dense, &sparse));
            let batched = run(DispatchMode::Batched, chunked)?;
            push("dense_vs_batched", max_abs_diff(&dense, &batched));
            let recurrent = run(DispatchMode::Dense, DeltaForm::Recurrent)?;
            push("recurrent_vs_chunked", max_abs_diff(&dense, &recurrent));

            let mut session = DecodeSession::new(&model);
            let mut decode_diff = 0.0f64;
            for (i, &tok) in tokens.iter().enumerate() {
                let step = session.step(tok)?;
                decode_diff = decode_diff
                    .max(max_abs_diff(&step.logits, &dense[i * c.vocab..(i + 1) * c.vocab]));
            }
            push("decode_vs_full", decode_diff);

            rows.extend(restricted_attention_rows::<E>(
                id,
                c.d_model,
                c.n_heads,
                t,
                seed.wrapping_add(101),
                tol,
            )?);
        }
    }
    Ok(rows)
}
