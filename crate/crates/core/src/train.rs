//! Byte-level language-model training: corpus windowing, the learning
//! rate schedule, AdamW with global-norm clipping, and the step loop.

use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::graph::{Graph, Var};
use crate::kernels::axpy;
use crate::model::{forward_lm, LayerVars, Model, ModelVars};
use crate::stage::{AttnSubVars, DispatchMode, FfnVars, InnerVars, ThinVars};
use crate::tensor::{Error, Result};

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub seq_len: usize,
    /// Sequences per optimizer step; gradients are averaged across them.
    pub batch: usize,
    pub lr_peak: f64,
    pub warmup: usize,
    /// Final learning rate as a fraction of the peak.
    pub lr_floor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    /// Weight on the router balance penalty added to the token loss.
    pub aux_alpha: f64,
    pub sample_seed: u64,
    pub mode: DispatchMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 500,
            seq_len: 128,
            batch: 4,
            lr_peak: 3e-4,
            warmup: 1000,
            lr_floor: 0.1,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: 1.0,
            aux_alpha: 0.05,
            sample_seed: 0,
            mode: DispatchMode::Dense,
        }
    }
}

/// Bytes are the vocabulary: token i is byte value i.
pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Deterministic text-like filler for smoke tests and benchmarks.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    const PHRASES: [&str; 8] = [
        "the routing table sends each token to its nearest block. ",
        "thin layers trade width for depth without losing the stream. ",
        "a shared path keeps the common signal while experts split the rest. ",
        "state passes forward one token at a time and never looks back. ",
        "half the budget goes to moving in and out of the narrow lane. ",
        "every head keeps its own running memory of what mattered. ",
        "numbers 0123456789 repeat so the counters stay busy. ",
        "balance penalties keep any one block from hoarding the work. ",
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(len + 80);
    while out.len() < len {
        let p = PHRASES[rng.gen_range(0..PHRASES.len())];
        out.extend_from_slice(p.as_bytes());
    }
    out.truncate(len);
    out
}

/// Hands out non-overlapping window start offsets, reshuffled each epoch,
/// so every window is visited exactly once per pass over the corpus.
pub struct WindowSampler {
    window: usize,
    order: Vec<usize>,
    pos: usize,
    epoch: u64,
    seed: u64,
}

impl WindowSampler {
    pub fn new(n_tokens: usize, window: usize, seed: u64) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        let n_windows = n_tokens / window;
        if n_windows == 0 {
            return Err(Error::Config(format!(
                "corpus of {n_tokens} tokens is smaller than one {window}-token window"
            )));
        }
        let mut s = WindowSampler {
            window,
            order: (0..n_windows).collect(),
            pos: 0,
            epoch: 0,
            seed,
        };
        s.shuffle();
        Ok(s)
    }

    pub fn windows_per_epoch(&self) -> usize {
        self.order.len()
    }

    fn shuffle(&mut self) {
        let mut rng =
            ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(self.epoch.wrapping_mul(0x9e3779b9)));
        for i in (1..self.order.len()).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
    }

    /// Start offset of the next window, in tokens.
    pub fn next_start(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.pos = 0;
            self.epoch += 1;
            self.shuffle();
        }
        let w = self.order[self.pos] * self.window;
        self.pos += 1;
        w
    }
}

/// Zero at step 0, linear ramp to the peak at `warmup`, then a cosine
/// glide down to `lr_floor * lr_peak` at the final step.
pub fn lr_at(tc: &TrainConfig, step: usize) -> f64 {
    let peak = tc.lr_peak;
    if step < tc.warmup {
        return peak * step as f64 / tc.warmup as f64;
    }
    let floor = peak * tc.lr_floor;
    if tc.steps <= tc.warmup || step >= tc.steps {
        return floor;
    }
    let frac = (step - tc.warmup) as f64 / (tc.steps - tc.warmup) as f64;
    floor + (peak - floor) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Routing and gating parameters stay out of weight decay.
pub fn no_decay(name: &str) -> bool {
    name.contains(".router")
        || name.contains(".se.")
        || name.ends_with(".w_beta")
        || name.ends_with(".w_alpha")
        || name.ends_with(".a_head")
}

/// One parameter's AdamW update with bias correction; moments in f64.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    p: &mut [f32],
    g: &[f32],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    wd: f64,
) {
    let bc1 = 1.0 - beta1.powi(t as i32);
    let bc2 = 1.0 - beta2.powi(t as i32);
    for i in 0..p.len() {
        let gi = g[i] as f64;
        m[i] = beta1 * m[i] + (1.0 - beta1) * gi;
        v[i] = beta2 * v[i] + (1.0 - beta2) * gi * gi;
        let mh = m[i] / bc1;
        let vh = v[i] / bc2;
        let pi = p[i] as f64;
        p[i] = (pi - lr * (mh / (vh.sqrt() + eps) + wd * pi)) as f32;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum StepOutcome {
    Applied { grad_norm: f64 },
    SkippedNonFinite,
}

pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    clip_norm: f64,
    decay: Vec<bool>,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn for_model(model: &Model<f32>, tc: &TrainConfig) -> Self {
        let mut decay = Vec::new();
        let mut m = Vec::new();
        model.visit(&mut |name, t| {
            decay.push(!no_decay(&name));
            m.push(vec![0.0f64; t.len()]);
        });
        let v = m.clone();
        AdamW {
            beta1: tc.beta1,
            beta2: tc.beta2,
            eps: tc.eps,
            weight_decay: tc.weight_decay,
            clip_norm: tc.clip_norm,
            decay,
            m,
            v,
            t: 0,
        }
    }

    /// Scale that brings the global gradient norm down to the clip value,
    /// or `None` if any gradient is non-finite.
    pub fn clip_factor(&self, grads: &[Vec<f32>]) -> Option<(f64, f64)> {
        let mut sq = 0.0f64;
        for g in grads {
            for &x in g {
                if !x.is_finite() {
                    return None;
                }
                sq += x as f64 * x as f64;
            }
        }
        let norm = sq.sqrt();
        let scale = if norm > self.clip_norm { self.clip_norm / norm } else { 1.0 };
        Some((scale, norm))
    }

    /// Applies one step in parameter visit order. `grads` must line up
    /// with that order; a non-finite gradient anywhere skips the step.
    pub fn step_model(
        &mut self,
        model: &mut Model<f32>,
        grads: &[Vec<f32>],
        lr: f64,
    ) -> StepOutcome {
        assert_eq!(grads.len(), self.m.len(), "gradient list does not match the model");
        let Some((scale, norm)) = self.clip_factor(grads) else {
            return StepOutcome::SkippedNonFinite;
        };
        self.t += 1;
        let t = self.t;
        let mut i = 0usize;
        let scaled: Vec<Vec<f32>> = if scale == 1.0 {
            Vec::new()
        } else {
            grads
                .iter()
                .map(|g| g.iter().map(|&x| (x as f64 * scale) as f32).collect())
                .collect()
        };
        model.visit_mut(&mut |_, tensor| {
            let g = if scale == 1.0 { &grads[i] } else { &scaled[i] };
            let wd = if self.decay[i] { self.weight_decay } else { 0.0 };
            adamw_update(
                tensor.data_mut(),
                g,
                &mut self.m[i],
                &mut self.v[i],
                t,
                lr,
                self.beta1,
                self.beta2,
                self.eps,
                wd,
            );
            i += 1;
        });
        StepOutcome::Applied { grad_norm: norm }
    }
}

/// Leaf vars in the same order `Model::visit` walks the parameters.
pub fn flat_vars(vars: &ModelVars) -> Vec<Var> {
    fn push_attn(out: &mut Vec<Var>, a: &AttnSubVars) {
        match a {
            AttnSubVars::Softmax(p) => out.extend([p.wq, p.wk, p.wv, p.wo]),
            AttnSubVars::Delta(p) => out.extend([
                p.wq, p.wk, p.wv, p.conv_q, p.conv_k, p.conv_v, p.bias_q, p.bias_k, p.bias_v,
                p.w_beta, p.w_alpha, p.a_head, p.wo,
            ]),
        }
    }
    fn push_ffn(out: &mut Vec<Var>, f: &FfnVars) {
        match f {
            FfnVars::Dense { w1, w2 } => out.extend([*w1, *w2]),
            FfnVars::Rank1Moe { router, w, u, .. } => out.extend([*router, *w, *u]),
        }
    }
    fn push_inner(out: &mut Vec<Var>, iv: &InnerVars) {
        out.extend([iv.norm1, iv.norm2]);
        push_attn(out, &iv.attn);
        push_ffn(out, &iv.ffn);
    }
    fn push_thin(out: &mut Vec<Var>, tv: &ThinVars) {
        out.extend([tv.w_down, tv.w_up]);
        push_inner(out, &tv.inner);
    }

    let mut out = vec![vars.embed];
    for l in &vars.layers {
        match l {
            LayerVars::Dense(iv) => push_inner(&mut out, iv),
            LayerVars::Split(sv) => {
                for b in &sv.blocks {
                    push_thin(&mut out, b);
                }
                out.push(sv.router);
                if let Some(se) = &sv.se {
                    out.extend([se.w1, se.b1, se.w2, se.b2]);
                }
            }
        }
    }
    out.extend([vars.final_norm, vars.head]);
    out
}

#[derive(Clone, Debug)]
pub struct StepRow {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub aux: f64,
    /// Fraction of routing assignments per routed block, split stages in
    /// layer order.
    pub loads: Vec<f64>,
    pub tok_per_s: f64,
    pub skipped: bool,
}

pub fn csv_header(n_loads: usize) -> String {
    let mut s = String::from("step,lr,ce,aux");
    for i in 0..n_loads {
        s.push_str(&format!(",load_{i}"));
    }
    s.push_str(",tok_per_s");
    s
}

impl StepRow {
    pub fn to_csv(&self) -> String {
        let mut s = format!("{},{:.6e},{:.6},{:.6}", self.step, self.lr, self.ce, self.aux);
        for l in &self.loads {
            s.push_str(&format!(",{l:.4}"));
        }
        s.push_str(&format!(",{:.1}", self.tok_per_s));
        s
    }
}

/// Routed-block counts per split stage: `(layer index, n - s)`.
pub fn load_slots(model: &Model<f32>) -> Vec<(usize, usize)> {
    (0..model.cfg.n_layers())
        .filter_map(|i| model.cfg.stage_spec(i).map(|s| (i, s.routed())))
        .collect()
}

/// Runs the step loop, calling `on_step` after every optimizer step.
pub fn train(
    model: &mut Model<f32>,
    tokens: &[usize],
    tc: &TrainConfig,
    on_step: &mut dyn FnMut(&StepRow),
) -> Result<Vec<StepRow>> {
    if tc.steps == 0 || tc.batch == 0 || tc.seq_len == 0 {
        return Err(Error::Config("steps, batch, and seq_len must be positive".into()));
    }
    let window = tc.seq_len + 1;
    let mut sampler = WindowSampler::new(tokens.len(), window, tc.sample_seed)?;
    let mut opt = AdamW::for_model(model, tc);
    let slots = load_slots(model);
    let n_loads: usize = slots.iter().map(|&(_, n)| n).sum();
    let sizes: Vec<usize> = {
        let mut s = Vec::new();
        model.visit(&mut |_, t| s.push(t.len()));
        s
    };

    let mut rows = Vec::with_capacity(tc.steps);
    for step in 0..tc.steps {
        let started = Instant::now();
        let mut acc: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0f32; n]).collect();
        let mut ce_sum = 0.0f64;
        let mut aux_sum = 0.0f64;
        let mut counts = vec![0.0f64; n_loads];

        for _ in 0..tc.batch {
            let start = sampler.next_start();
            let w = &tokens[start..start + window];
            let mut g = Graph::new();
            let vars = model.leaf(&mut g, true);
            let out = forward_lm(&mut g, model, &vars, &w[..tc.seq_len], tc.mode)?;
            let ce = g.cross_entropy_logits(out.logits, &w[1..])?;
            let aux_scaled = g.scale(out.aux, tc.aux_alpha);
            let loss = g.add(ce, aux_scaled)?;
            g.backward(loss)?;

            ce_sum += f64::from(g.value(ce).item());
            aux_sum += f64::from(g.value(out.aux).item());
            let mut off = 0usize;
            for &(layer, routed) in &slots {
                if let Some(dec) = &out.decisions[layer] {
                    for &p in &dec.picks {
                        counts[off + p] += 1.0;
                    }
                }
                off += routed;
            }
            for (a, v) in acc.iter_mut().zip(flat_vars(&vars)) {
                if let Some(gr) = g.grad(v) {
                    axpy(a, 1.0f32, gr.data());
                }
            }
        }

        let inv_b = 1.0 / tc.batch as f32;
        for a in &mut acc {
            for x in a {
                *x *= inv_b;
            }
        }
        let mut off = 0usize;
        for &(_, routed) in &slots {
            let total: f64 = counts[off..off + routed].iter().sum();
            if total > 0.0 {
                for c in &mut counts[off..off + routed] {
                    *c /= total;
                }
            }
            off += routed;
        }

        let lr = lr_at(tc, step);
        let outcome = opt.step_model(model, &acc, lr);
        if let StepOutcome::SkippedNonFinite = outcome {
            eprintln!("step {step}: non-finite gradient, skipping update");
        }
        let elapsed = started.elapsed().as_secs_f64().max(1e-9);
        let row = StepRow {
            step,
            lr,
            ce: ce_sum / tc.batch as f64,
            aux: aux_sum / tc.batch as f64,
            loads: counts,
            tok_per_s: (tc.batch * tc.seq_len) as f64 / elapsed,
            skipped: matches!(outcome, StepOutcome::SkippedNonFinite),
        };
        on_step(&row);
        rows.push(row);
    }
    Ok(rows)
}
