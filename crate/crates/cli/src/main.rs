//! Command-line driver: train on a byte corpus, benchmark prefill and
//! decode, run cross-path equivalence checks, sweep the attention
//! crossover point, and print parameter accounting.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};

use mol_core::bench::{
    crossover_sweep, equivalence_report, measured_crossover, session_live_values, time_prefill,
    BenchRow, TIMED_RUNS,
};
use mol_core::checkpoint::{load_checkpoint, save_checkpoint};
use mol_core::config::{LayerKind, ModelConfig};
use mol_core::infer::{argmax, DecodeSession};
use mol_core::model::{build_model, count_params, Model};
use mol_core::stage::{AttnKind, DispatchMode};
use mol_core::train::{csv_header, load_slots, synthetic_corpus, tokenize_bytes, train, TrainConfig};

#[derive(Parser)]
#[command(name = "mol", version, about = "Mixture-of-layers transformer reference tools")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Dense,
    Sparse,
    Batched,
}

impl From<Mode> for DispatchMode {
    fn from(m: Mode) -> DispatchMode {
        match m {
            Mode::Dense => DispatchMode::Dense,
            Mode::Sparse => DispatchMode::Sparse,
            Mode::Batched => DispatchMode::Batched,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a byte corpus, stream step metrics as CSV, and save a
    /// checkpoint.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Corpus file read as raw bytes; a small synthetic corpus when
        /// omitted.
        #[arg(long)]
        corpus: Option<PathBuf>,
        /// Checkpoint path written after the final step.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, value_enum, default_value = "dense")]
        mode: Mode,
    },
    /// Time full-sequence forwards at several lengths.
    BenchPrefill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "sparse")]
        mode: Mode,
        #[arg(long, value_delimiter = ',', default_value = "256,1024")]
        seqlens: Vec<usize>,
    },
    /// Greedy-decode and report per-token cost at chosen context sizes.
    BenchDecode {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        ckpt: Option<PathBuf>,
        #[arg(long = "context-grid", value_delimiter = ',', default_value = "64,128,256")]
        context_grid: Vec<usize>,
    },
    /// Compare every redundant evaluation path, in both precisions.
    CheckEquiv {
        /// Config file; three built-in routing shapes when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 1e-5)]
        tol32: f64,
        #[arg(long, default_value_t = 1e-10)]
        tol64: f64,
        #[arg(long, value_delimiter = ',', default_value = "16,64,255")]
        seqlens: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
    },
    /// Wall-time table of one softmax block against one delta block.
    Crossover {
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, value_delimiter = ',', default_value = "256,512,1024,2048")]
        seqlens: Vec<usize>,
    },
    /// Parameter accounting for a config.
    CountParams {
        #[arg(long)]
        config: PathBuf,
    },
}

fn read_config(path: &Path) -> Result<ModelConfig> {
    let text =
        fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let cfg = ModelConfig::parse(&text)?;
    cfg.validate()?;
    Ok(cfg)
}

fn config_id(path: &Path) -> String {
    path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "config".into())
}

fn load_model(cfg: &ModelConfig, ckpt: &Option<PathBuf>) -> Result<Model<f32>> {
    match ckpt {
        Some(p) => {
            let m = load_checkpoint(p)?;
            if m.cfg != *cfg {
                bail!("checkpoint {} holds a different config", p.display());
            }
            Ok(m)
        }
        None => Ok(build_model(cfg)?),
    }
}

/// The three routing shapes the equivalence suite exercises by default:
/// all-routed softmax, and two hybrids with delta-rule routed blocks.
fn builtin_configs() -> Vec<(String, ModelConfig)> {
    let stage = |n, s, k| LayerKind::Split { n, s, k, d_thin: 64 };
    let mut shapes = vec![
        ("0+3of5".to_string(), vec![stage(5, 0, 3)], AttnKind::Softmax),
        ("1+2of5".to_string(), vec![stage(5, 1, 2), LayerKind::Dense], AttnKind::Delta),
        ("1+3of15".to_string(), vec![stage(15, 1, 3), LayerKind::Dense], AttnKind::Delta),
    ];
    shapes
        .drain(..)
        .map(|(id, layers, routed)| {
            let mut cfg = ModelConfig::base(64, layers);
            cfg.t_max = 256;
            cfg.dense_d_ff = 128;
            cfg.routed_attn = routed;
            (id, cfg)
        })
        .collect()
}

fn cmd_train(
    config: &Path,
    corpus: &Option<PathBuf>,
    out: &Option<PathBuf>,
    steps: Option<usize>,
    mode: Mode,
) -> Result<()> {
    let cfg = read_config(config)?;
    let mut model = build_model::<f32>(&cfg)?;
    let mut tc = TrainConfig { mode: mode.into(), ..TrainConfig::default() };
    if let Some(s) = steps {
        tc.steps = s;
    }
    let bytes = match corpus {
        Some(p) => fs::read(p).with_context(|| format!("reading {}", p.display()))?,
        None => synthetic_corpus(64 * (tc.seq_len + 1), cfg.seed),
    };
    let tokens = tokenize_bytes(&bytes);
    let n_loads: usize = load_slots(&model).iter().map(|&(_, n)| n).sum();
    println!("{}", csv_header(n_loads));
    train(&mut model, &tokens, &tc, &mut |row| println!("{}", row.to_csv()))?;
    if let Some(p) = out {
        save_checkpoint(&model, p)?;
        eprintln!("checkpoint written to {}", p.display());
    }
    Ok(())
}

fn cmd_bench_prefill(
    config: &Path,
    ckpt: &Option<PathBuf>,
    mode: Mode,
    seqlens: &[usize],
) -> Result<()> {
    let cfg = read_config(config)?;
    let model = load_model(&cfg, ckpt)?;
    let id = config_id(config);
    println!("{}", BenchRow::csv_header());
    for &t in seqlens {
        let tokens = tokenize_bytes(&synthetic_corpus(t, cfg.seed));
        let (_, row) = time_prefill(&id, &model, &tokens, mode.into(), TIMED_RUNS)?;
        println!("{}", row.to_csv());
    }
    Ok(())
}

fn cmd_bench_decode(config: &Path, ckpt: &Option<PathBuf>, grid: &[usize]) -> Result<()> {
    let cfg = read_config(config)?;
    let model = load_model(&cfg, ckpt)?;
    let id = config_id(config);
    let Some(&max_ctx) = grid.iter().max() else {
        bail!("empty context grid");
    };
    if max_ctx > cfg.t_max {
        bail!("context {max_ctx} exceeds t_max {}", cfg.t_max);
    }
    let prompt = tokenize_bytes(&synthetic_corpus(8.min(max_ctx), cfg.seed));
    let mut session = DecodeSession::new(&model);
    println!("{}", BenchRow::csv_header());
    let mut logits = Vec::new();
    for ctx in 1..=max_ctx {
        let tok =
            if ctx <= prompt.len() { prompt[ctx - 1] } else { argmax(&logits) };
        let start = Instant::now();
        let step = session.step(tok)?;
        let secs = start.elapsed().as_secs_f64();
        logits = step.logits;
        if grid.contains(&ctx) {
            let row = BenchRow {
                id: id.clone(),
                mode: "decode".to_string(),
                t: ctx,
                tokens_per_s: 1.0 / secs,
                latency_per_token_s: secs,
                peak_live_values: session_live_values(&model, &session),
                macs: step.macs.total(),
            };
            println!("{}", row.to_csv());
        }
    }
    Ok(())
}

fn cmd_check_equiv(
    config: &Option<PathBuf>,
    tol32: f64,
    tol64: f64,
    seqlens: &[usize],
    seeds: &[u64],
) -> Result<()> {
    let configs = match config {
        Some(p) => vec![(config_id(p), read_config(p)?)],
        None => builtin_configs(),
    };
    println!("check,config,T,max_diff,pass");
    let mut failures = 0usize;
    for (id, cfg) in &configs {
        let rows32 = equivalence_report::<f32>(&format!("{id}:f32"), cfg, seqlens, seeds, tol32)?;
        let rows64 = equivalence_report::<f64>(&format!("{id}:f64"), cfg, seqlens, seeds, tol64)?;
        for row in rows32.iter().chain(&rows64) {
            println!("{}", row.line());
            failures += usize::from(!row.pass);
        }
    }
    if failures > 0 {
        bail!("{failures} equivalence checks failed");
    }
    Ok(())
}

fn cmd_crossover(d: usize, seqlens: &[usize]) -> Result<()> {
    let rows = crossover_sweep(d, seqlens, TIMED_RUNS)?;
    println!("t,softmax_s,delta_s");
    for row in &rows {
        println!("{}", row.line());
    }
    match measured_crossover(&rows) {
        Some(t) => println!("crossover_at,{t}"),
        None => println!("crossover_at,none"),
    }
    Ok(())
}

fn cmd_count_params(config: &Path) -> Result<()> {
    let cfg = read_config(config)?;
    let report = count_params(&cfg)?;
    println!("{}", report.table());
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Train { config, corpus, out, steps, mode } => {
            cmd_train(config, corpus, out, *steps, *mode)
        }
        Cmd::BenchPrefill { config, ckpt, mode, seqlens } => {
            cmd_bench_prefill(config, ckpt, *mode, seqlens)
        }
        Cmd::BenchDecode { config, ckpt, context_grid } => {
            cmd_bench_decode(config, ckpt, context_grid)
        }
        Cmd::CheckEquiv { config, tol32, tol64, seqlens, seeds } => {
            cmd_check_equiv(config, *tol32, *tol64, seqlens, seeds)
        }
        Cmd::Crossover { d, seqlens } => cmd_crossover(*d, seqlens),
        Cmd::CountParams { config } => cmd_count_params(config),
    }
}
