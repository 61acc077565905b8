//! Whole-model assembly: embedding, a stack of dense and split layers,
//! final norm, and the language-model head, plus parameter accounting.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::rope_table;
use crate::config::{ModelConfig, D_HEAD};
use crate::delta::DeltaForm;
use crate::graph::{Graph, Var};
use crate::kernels::RopeTable;
use crate::router::{se_param_count, RoutingDecision};
use crate::stage::{
    inner_block, split_stage, AttnKind, DispatchMode, FfnKind, InnerParams, InnerVars, InnerVis,
    SeqCtx, StageParams, StageVars, RMSNORM_EPS,
};
use crate::tensor::{Error, Real, Result, Tensor};

pub enum LayerParams<E: Real> {
    Dense(InnerParams<E>),
    Split(StageParams<E>),
}

pub enum LayerVars {
    Dense(InnerVars),
    Split(StageVars),
}

pub struct Model<E: Real> {
    pub cfg: ModelConfig,
    /// `[vocab, d_model]`; not tied to the head.
    pub embed: Tensor<E>,
    pub layers: Vec<LayerParams<E>>,
    pub final_norm: Tensor<E>,
    /// `[d_model, vocab]`.
    pub head: Tensor<E>,
    pub rope: Arc<RopeTable<E>>,
}

pub struct ModelVars {
    pub embed: Var,
    pub layers: Vec<LayerVars>,
    pub final_norm: Var,
    pub head: Var,
}

impl<E: Real> Model<E> {
    /// Allocates every parameter at zero; `build_model` adds the init.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.n_layers())
            .map(|i| match cfg.stage_spec(i) {
                None => LayerParams::Dense(InnerParams::zeros(
                    cfg.d_model,
                    cfg.n_heads,
                    cfg.dense_attn,
                    FfnKind::Dense,
                    cfg.dense_d_ff,
                )),
                Some(spec) => {
                    let heads = spec.d_thin / D_HEAD;
                    LayerParams::Split(StageParams::zeros(cfg.d_model, heads, spec))
                }
            })
            .collect();
        Ok(Model {
            cfg: cfg.clone(),
            embed: Tensor::zeros(&[cfg.vocab, cfg.d_model]),
            layers,
            final_norm: Tensor::zeros(&[cfg.d_model]),
            head: Tensor::zeros(&[cfg.d_model, cfg.vocab]),
            rope: rope_table(D_HEAD, cfg.t_max),
        })
    }

    pub fn leaf(&self, g: &mut Graph<E>, trainable: bool) -> ModelVars {
        ModelVars {
            embed: g.leaf(self.embed.clone(), trainable),
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    LayerParams::Dense(p) => LayerVars::Dense(p.leaf(g, trainable)),
                    LayerParams::Split(p) => LayerVars::Split(p.leaf(g, trainable)),
                })
                .collect(),
            final_norm: g.leaf(self.final_norm.clone(), trainable),
            head: g.leaf(self.head.clone(), trainable),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor<E>)) {
        f("embed".into(), &self.embed);
        for (i, l) in self.layers.iter().enumerate() {
            match l {
                LayerParams::Dense(p) => p.visit(&format!("layer{i}"), f),
                LayerParams::Split(p) => p.visit(&format!("layer{i}"), f),
            }
        }
        f("final_norm".into(), &self.final_norm);
        f("head".into(), &self.head);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f("embed".into(), &mut self.embed);
        for (i, l) in self.layers.iter_mut().enumerate() {
            match l {
                LayerParams::Dense(p) => p.visit_mut(&format!("layer{i}"), f),
                LayerParams::Split(p) => p.visit_mut(&format!("layer{i}"), f),
            }
        }
        f("final_norm".into(), &mut self.final_norm);
        f("head".into(), &mut self.head);
    }

    pub fn param_count(&self) -> u64 {
        let mut n = 0u64;
        self.visit(&mut |_, t| n += t.len() as u64);
        n
    }

    pub fn seq_ctx<'a>(&'a self, positions: &'a [usize]) -> SeqCtx<'a, E> {
        SeqCtx {
            rope: &self.rope,
            positions,
            delta_form: DeltaForm::Chunked(self.cfg.delta_chunk),
            delta_rope: self.cfg.delta_rope,
        }
    }
}

/// Standard normal draws rejected outside two standard deviations.
struct TruncNormal {
    rng: ChaCha8Rng,
}

impl TruncNormal {
    fn new(seed: u64) -> Self {
        TruncNormal { rng: ChaCha8Rng::seed_from_u64(seed) }
    }

    fn draw(&mut self, std: f64) -> f64 {
        loop {
            let u1: f64 = self.rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = self.rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            if z.abs() <= 2.0 {
                return std * z;
            }
        }
    }

    fn fill<E: Real>(&mut self, t: &mut Tensor<E>, std: f64) {
        for v in t.data_mut() {
            *v = E::from_f64(self.draw(std));
        }
    }
}

fn is_gain(name: &str) -> bool {
    name.contains("norm")
}

fn is_bias(name: &str) -> bool {
    name.contains(".bias_")
        || name.ends_with(".b1")
        || name.ends_with(".b2")
        || name.ends_with(".a_head")
}

/// Matrices that write into a residual stream get the depth-scaled init.
fn is_residual_out(name: &str) -> bool {
    name.ends_with(".w_up")
        || name.ends_with(".wo")
        || name.ends_with(".ffn.w2")
        || name.ends_with(".ffn.u")
}

/// Builds and initializes a model from the config seed: gains one, biases
/// zero, weights truncated normal with std 0.02, and residual-writing
/// matrices scaled down by `sqrt(2 * n_layers)`. The draw order follows
/// the parameter visit order, so equal seeds give bitwise-equal models.
pub fn build_model<E: Real>(cfg: &ModelConfig) -> Result<Model<E>> {
    let mut m = Model::zeros(cfg)?;
    let mut tn = TruncNormal::new(cfg.seed);
    let residual_std = 0.02 / (2.0 * cfg.n_layers() as f64).sqrt();
    m.visit_mut(&mut |name, t| {
        if is_gain(&name) {
            t.data_mut().fill(E::one());
        } else if is_bias(&name) {
            // already zero
        } else if is_residual_out(&name) {
            tn.fill(t, residual_std);
        } else {
            tn.fill(t, 0.02);
        }
    });
    Ok(m)
}

pub struct LmOutput<E: Real> {
    /// `[t, vocab]` next-token logits.
    pub logits: Var,
    /// Sum of the per-stage router balance penalties; scalar.
    pub aux: Var,
    /// One entry per layer; `None` for dense layers.
    pub decisions: Vec<Option<RoutingDecision<E>>>,
}

/// Full-sequence forward pass: embed, run every layer, final norm, head.
pub fn forward_lm<E: Real>(
    g: &mut Graph<E>,
    model: &Model<E>,
    vars: &ModelVars,
    tokens: &[usize],
    mode: DispatchMode,
) -> Result<LmOutput<E>> {
    let form = DeltaForm::Chunked(model.cfg.delta_chunk);
    forward_lm_form(g, model, vars, tokens, mode, form)
}

/// Same pass with the delta evaluation form chosen by the caller instead
/// of the config, so the two forms can be compared on one model.
pub fn forward_lm_form<E: Real>(
    g: &mut Graph<E>,
    model: &Model<E>,
    vars: &ModelVars,
    tokens: &[usize],
    mode: DispatchMode,
    form: DeltaForm,
) -> Result<LmOutput<E>> {
    let cfg = &model.cfg;
    let t = tokens.len();
    if t == 0 {
        return Err(Error::Invalid { op: "forward_lm", msg: "empty token sequence".into() });
    }
    if t > cfg.t_max {
        return Err(Error::Invalid {
            op: "forward_lm",
            msg: format!("sequence length {t} exceeds t_max {}", cfg.t_max),
        });
    }
    if let Some(&bad) = tokens.iter().find(|&&tk| tk >= cfg.vocab) {
        return Err(Error::Invalid {
            op: "forward_lm",
            msg: format!("token {bad} outside vocab of {}", cfg.vocab),
        });
    }

    let positions: Vec<usize> = (0..t).collect();
    let mut ctx = model.seq_ctx(&positions);
    ctx.delta_form = form;
    let mut x = g.gather_rows(vars.embed, tokens)?;
    let mut aux: Option<Var> = None;
    let mut decisions = Vec::with_capacity(vars.layers.len());
    for (li, lv) in vars.layers.iter().enumerate() {
        match lv {
            LayerVars::Dense(iv) => {
                x = inner_block(g, x, iv, &ctx, InnerVis::Rows)?;
                decisions.push(None);
            }
            LayerVars::Split(sv) => {
                let spec = cfg.stage_spec(li).ok_or_else(|| Error::Invalid {
                    op: "forward_lm",
                    msg: format!("layer {li} vars do not match the config"),
                })?;
                let (y, a, dec) = split_stage(g, x, &spec, sv, &ctx, mode)?;
                x = y;
                aux = Some(match aux {
                    Some(prev) => g.add(prev, a)?,
                    None => a,
                });
                decisions.push(Some(dec));
            }
        }
    }
    let xn = g.rmsnorm(x, vars.final_norm, RMSNORM_EPS)?;
    let logits = g.matmul(xn, vars.head)?;
    let aux = aux.unwrap_or_else(|| g.constant(Tensor::scalar(E::zero())));
    Ok(LmOutput { logits, aux, decisions })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct StageCounts {
    /// Down and up projections around the thin blocks.
    pub projections: u64,
    pub attention: u64,
    pub ffn: u64,
    pub norms: u64,
    /// Routing logits plus the pick-gating network when enabled.
    pub router: u64,
}

impl StageCounts {
    pub fn total(&self) -> u64 {
        self.projections + self.attention + self.ffn + self.norms + self.router
    }

    /// Share of block capacity spent entering and leaving the thin width.
    /// Norms and the router are bookkeeping, not capacity, so they stay out.
    pub fn wrapper_fraction(&self) -> f64 {
        self.projections as f64 / (self.projections + self.attention + self.ffn) as f64
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamReport {
    pub embeddings: u64,
    pub head: u64,
    pub final_norm: u64,
    pub stages: Vec<StageCounts>,
    pub total: u64,
    /// Parameters a single token actually touches in one forward pass.
    pub active_per_token: u64,
}

fn attn_param_count(kind: AttnKind, d: usize, heads: usize) -> u64 {
    let (d, h) = (d as u64, heads as u64);
    match kind {
        AttnKind::Softmax => 4 * d * d,
        // qkv + out, three conv taps of width four with biases, two gate
        // projections, one decay rate per head
        AttnKind::Delta => 4 * d * d + 12 * d + 3 * d + 2 * d * h + h,
    }
}

fn ffn_param_count(kind: FfnKind, d: usize, d_ff: usize) -> u64 {
    match kind {
        FfnKind::Dense => 2 * d as u64 * d_ff as u64,
        FfnKind::Rank1Moe { experts, .. } => 3 * d as u64 * experts as u64,
    }
}

/// Parameter totals computed from the config alone, without allocating.
pub fn count_params(cfg: &ModelConfig) -> Result<ParamReport> {
    cfg.validate()?;
    let dm = cfg.d_model as u64;
    let embeddings = cfg.vocab as u64 * dm;
    let head = dm * cfg.vocab as u64;
    let final_norm = dm;

    let mut stages = Vec::with_capacity(cfg.n_layers());
    let mut active = embeddings + head + final_norm;
    for i in 0..cfg.n_layers() {
        match cfg.stage_spec(i) {
            None => {
                let c = StageCounts {
                    projections: 0,
                    attention: attn_param_count(cfg.dense_attn, cfg.d_model, cfg.n_heads),
                    ffn: ffn_param_count(FfnKind::Dense, cfg.d_model, cfg.dense_d_ff),
                    norms: 2 * dm,
                    router: 0,
                };
                active += c.total();
                stages.push(c);
            }
            Some(spec) => {
                let heads = spec.d_thin / D_HEAD;
                let per_block_proj = 2 * dm * spec.d_thin as u64;
                let shared_attn = attn_param_count(AttnKind::Softmax, spec.d_thin, heads);
                let routed_attn = attn_param_count(spec.routed_attn, spec.d_thin, heads);
                let per_block_ffn = ffn_param_count(spec.ffn, spec.d_thin, spec.d_ff);
                let per_block_norms = 2 * spec.d_thin as u64;
                let n = spec.n as u64;
                let s = spec.s as u64;
                let router = dm * (n - s)
                    + if spec.se_gating { se_param_count(spec.k) as u64 } else { 0 };
                let c = StageCounts {
                    projections: n * per_block_proj,
                    attention: s * shared_attn + (n - s) * routed_attn,
                    ffn: n * per_block_ffn,
                    norms: n * per_block_norms,
                    router,
                };
                let shared_block = per_block_proj + shared_attn + per_block_ffn + per_block_norms;
                let routed_block = per_block_proj + routed_attn + per_block_ffn + per_block_norms;
                active += router + s * shared_block + spec.k as u64 * routed_block;
                stages.push(c);
            }
        }
    }
    let total = embeddings + head + final_norm + stages.iter().map(StageCounts::total).sum::<u64>();
    Ok(ParamReport { embeddings, head, final_norm, stages, total, active_per_token: active })
}

impl ParamReport {
    pub fn table(&self) -> String {
        use std::fmt::Write as _;
        let mut s = String::new();
        let _ = writeln!(s, "embeddings        {:>12}", self.embeddings);
        let _ = writeln!(s, "head              {:>12}", self.head);
        let _ = writeln!(s, "final_norm        {:>12}", self.final_norm);
        for (i, c) in self.stages.iter().enumerate() {
            let _ = writeln!(
                s,
                "stage {i:<3} proj {:>10}  attn {:>10}  ffn {:>10}  norms {:>8}  router {:>8}",
                c.projections, c.attention, c.ffn, c.norms, c.router
            );
            if c.projections > 0 {
                let _ = writeln!(s, "          wrapper fraction {:.3}", c.wrapper_fraction());
            }
        }
        let _ = writeln!(s, "total             {:>12}", self.total);
        let _ = writeln!(s, "active per token  {:>12}", self.active_per_token);
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::LayerKind;
    use crate::graph::Graph;

    fn expect_err<T>(r: Result<T>) -> Error {
        match r {
            Ok(_) => panic!("expected an error"),
            Err(e) => e,
        }
    }

    fn tiny_hybrid_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::base(
            64,
            vec![
                LayerKind::Split { n: 5, s: 1, k: 2, d_thin: 64 },
                LayerKind::Dense,
            ],
        );
        cfg.t_max = 64;
        cfg.dense_d_ff = 128;
        cfg.routed_attn = AttnKind::Delta;
        cfg.seed = 11;
        cfg
    }

    fn collect_params<E: Real>(m: &Model<E>) -> Vec<(String, Vec<E>)> {
        let mut out = Vec::new();
        m.visit(&mut |name, t| out.push((name, t.data().to_vec())));
        out
    }

    #[test]
    fn test_build_is_deterministic_and_seed_sensitive() {
        let cfg = tiny_hybrid_cfg();
        let a = build_model::<f32>(&cfg).unwrap();
        let b = build_model::<f32>(&cfg).unwrap();
        let pa = collect_params(&a);
        let pb = collect_params(&b);
        assert_eq!(pa.len(), pb.len());
        for ((na, va), (nb, vb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert!(va.iter().zip(vb).all(|(x, y)| x.to_bits() == y.to_bits()), "{na}");
        }

        let mut cfg2 = cfg.clone();
        cfg2.seed = 12;
        let c = build_model::<f32>(&cfg2).unwrap();
        let pc = collect_params(&c);
        let same = pa
            .iter()
            .zip(&pc)
            .filter(|((na, _), _)| !na.contains("norm"))
            .all(|((_, va), (_, vc))| va == vc);
        assert!(!same, "different seeds produced identical weights");
    }

    #[test]
    fn test_init_respects_name_rules() {
        let cfg = tiny_hybrid_cfg();
        let m = build_model::<f64>(&cfg).unwrap();
        let residual_std = 0.02 / (2.0 * cfg.n_layers() as f64).sqrt();
        m.visit(&mut |name, t| {
            let vals = t.data();
            if is_gain(&name) {
                assert!(vals.iter().all(|&v| v == 1.0), "{name}");
            } else if is_bias(&name) {
                assert!(vals.iter().all(|&v| v == 0.0), "{name}");
            } else {
                let bound = if is_residual_out(&name) { 2.0 * residual_std } else { 0.04 };
                let max = vals.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
                assert!(max <= bound + 1e-12, "{name}: max {max} vs bound {bound}");
                assert!(max > 0.0, "{name} left at zero");
            }
        });
    }

    #[test]
    fn test_count_params_matches_allocation() {
        let mut cfg = tiny_hybrid_cfg();
        cfg.se_gating = true;
        cfg.ffn = FfnKind::Rank1Moe { experts: 6, active: 2 };
        let report = count_params(&cfg).unwrap();
        let m = Model::<f32>::zeros(&cfg).unwrap();
        assert_eq!(report.total, m.param_count());

        let by_prefix = |p: &str| {
            let mut n = 0u64;
            m.visit(&mut |name, t| {
                if name.starts_with(p) {
                    n += t.len() as u64;
                }
            });
            n
        };
        assert_eq!(report.stages[0].total(), by_prefix("layer0"));
        assert_eq!(report.stages[1].total(), by_prefix("layer1"));
        assert_eq!(report.embeddings, by_prefix("embed"));
    }

    #[test]
    fn test_active_per_token_matches_enumeration() {
        let cfg = tiny_hybrid_cfg();
        let report = count_params(&cfg).unwrap();
        let m = Model::<f32>::zeros(&cfg).unwrap();
        // One token runs the shared block, two routed blocks (which two
        // does not matter, the shapes match), the router, the whole dense
        // layer, and the embedding/head ends.
        let touched = ["embed", "final_norm", "head", "layer0.shared0", "layer0.routed0",
            "layer0.routed1", "layer0.router", "layer1"];
        let mut n = 0u64;
        m.visit(&mut |name, t| {
            if touched.iter().any(|p| name.starts_with(p)) {
                n += t.len() as u64;
            }
        });
        assert_eq!(report.active_per_token, n);
    }

    #[test]
    fn test_wrapper_fraction_hits_known_ratios() {
        for (d_thin, want) in [(256usize, 0.4000), (128, 4.0 / 7.0), (64, 8.0 / 11.0)] {
            let cfg = ModelConfig::base(
                1024,
                vec![LayerKind::Split { n: 15, s: 1, k: 3, d_thin }],
            );
            let report = count_params(&cfg).unwrap();
            let frac = report.stages[0].wrapper_fraction();
            assert!(
                (frac - want).abs() < 1e-9,
                "d_thin {d_thin}: fraction {frac} vs {want}"
            );
        }
    }

    #[test]
    fn test_forward_shapes_and_mode_agreement() {
        let cfg = tiny_hybrid_cfg();
        let m = build_model::<f64>(&cfg).unwrap();
        let tokens: Vec<usize> = (0..17).map(|i| (i * 37 + 5) % cfg.vocab).collect();
        let mut outs = Vec::new();
        for mode in [DispatchMode::Dense, DispatchMode::Sparse, DispatchMode::Batched] {
            let mut g = Graph::new();
            let vars = m.leaf(&mut g, false);
            let out = forward_lm(&mut g, &m, &vars, &tokens, mode).unwrap();
            assert_eq!(g.shape(out.logits), &[tokens.len(), cfg.vocab]);
            assert_eq!(out.decisions.len(), 2);
            assert!(out.decisions[0].is_some() && out.decisions[1].is_none());
            let aux = g.value(out.aux).item();
            assert!(aux.is_finite() && aux >= 0.0);
            outs.push((g.value(out.logits).data().to_vec(), aux));
        }
        for (logits, aux) in &outs[1..] {
            let diff = logits
                .iter()
                .zip(&outs[0].0)
                .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            assert!(diff < 1e-12, "dispatch modes disagree by {diff}");
            assert_eq!(*aux, outs[0].1);
        }
    }

    #[test]
    fn test_forward_rejects_bad_inputs() {
        let cfg = tiny_hybrid_cfg();
        let m = build_model::<f32>(&cfg).unwrap();
        let mut g = Graph::new();
        let vars = m.leaf(&mut g, false);
        let err = expect_err(forward_lm(&mut g, &m, &vars, &[3, 256, 1], DispatchMode::Dense));
        assert!(err.to_string().contains("vocab"), "{err}");
        let long = vec![0usize; cfg.t_max + 1];
        let err = expect_err(forward_lm(&mut g, &m, &vars, &long, DispatchMode::Dense));
        assert!(err.to_string().contains("t_max"), "{err}");
        let err = expect_err(forward_lm(&mut g, &m, &vars, &[], DispatchMode::Dense));
        assert!(err.to_string().contains("empty"), "{err}");
    }

    #[test]
    fn test_backward_through_loss_is_finite() {
        let mut cfg = tiny_hybrid_cfg();
        cfg.se_gating = true;
        let m = build_model::<f32>(&cfg).unwrap();
        let tokens: Vec<usize> = (0..12).map(|i| (i * 31 + 2) % cfg.vocab).collect();
        let targets: Vec<usize> = tokens[1..].to_vec();
        let mut g = Graph::new();
        let vars = m.leaf(&mut g, true);
        let out = forward_lm(&mut g, &m, &vars, &tokens[..targets.len()], DispatchMode::Dense)
            .unwrap();
        let ce = g.cross_entropy_logits(out.logits, &targets).unwrap();
        let aux = g.scale(out.aux, 0.05);
        let loss = g.add(ce, aux).unwrap();
        g.backward(loss).unwrap();
        let mut checked = 0usize;
        for v in [vars.embed, vars.head, vars.final_norm] {
            let grad = g.grad(v).expect("missing grad");
            assert!(grad.data().iter().all(|v| v.is_finite()));
            checked += 1;
        }
        assert!(g.value(ce).item() > 0.0);
        assert_eq!(checked, 3);
    }
}
