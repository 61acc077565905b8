//! Model configuration and its flat text format.
//!
//! Configs are plain `key = value` lines with `#` comments. Layers are
//! listed as `stage.0 = 1+3of15@256` (1 shared block plus top-3 of the
//! remaining 14 routed, all at width 256) or `stage.1 = dense` for an
//! ordinary full-width block. Block kinds, gating, and expert counts are
//! global keys applied to every split stage.

use std::fmt::Write as _;

use crate::stage::{AttnKind, FfnKind, StageSpec};
use crate::tensor::{Error, Result};

/// Head width everywhere; both `d_model` and `d_thin` must be multiples.
pub const D_HEAD: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    /// `s + top-k of (n - s)` thin blocks at width `d_thin`.
    Split { n: usize, s: usize, k: usize, d_thin: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub t_max: usize,
    pub seed: u64,
    pub layers: Vec<LayerKind>,
    pub dense_d_ff: usize,
    pub dense_attn: AttnKind,
    pub routed_attn: AttnKind,
    pub ffn: FfnKind,
    pub se_gating: bool,
    pub shared_in_average: bool,
    pub delta_rope: bool,
    pub delta_chunk: usize,
}

impl ModelConfig {
    /// A minimal valid config the tests build on: callers override fields.
    pub fn base(d_model: usize, layers: Vec<LayerKind>) -> Self {
        ModelConfig {
            vocab: 256,
            d_model,
            n_heads: d_model / D_HEAD,
            t_max: 1024,
            seed: 0,
            layers,
            dense_d_ff: 4 * d_model,
            dense_attn: AttnKind::Softmax,
            routed_attn: AttnKind::Softmax,
            ffn: FfnKind::Dense,
            se_gating: false,
            shared_in_average: false,
            delta_rope: false,
            delta_chunk: 64,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// The stage shape for layer `i`, or `None` for dense layers.
    pub fn stage_spec(&self, i: usize) -> Option<StageSpec> {
        match self.layers[i] {
            LayerKind::Dense => None,
            LayerKind::Split { n, s, k, d_thin } => Some(StageSpec {
                n,
                s,
                k,
                d_thin,
                d_ff: 4 * d_thin,
                routed_attn: self.routed_attn,
                ffn: self.ffn,
                se_gating: self.se_gating,
                shared_in_average: self.shared_in_average,
            }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.vocab < 2 {
            return fail(format!("vocab: need at least 2, got {}", self.vocab));
        }
        if self.n_heads == 0 || self.d_model != self.n_heads * D_HEAD {
            return fail(format!(
                "d_model: must equal n_heads * {D_HEAD}, got {} with n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.t_max == 0 {
            return fail("t_max: must be positive".into());
        }
        if self.layers.is_empty() {
            return fail("stage.0: at least one layer required".into());
        }
        if self.dense_d_ff == 0 {
            return fail("dense_d_ff: must be positive".into());
        }
        if self.delta_chunk == 0 {
            return fail("delta_chunk: must be positive".into());
        }
        if let FfnKind::Rank1Moe { experts, active } = self.ffn {
            if experts == 0 || active == 0 || active > experts {
                return fail(format!("moe_active: top-{active} of {experts} experts"));
            }
        }
        for (i, layer) in self.layers.iter().enumerate() {
            if let LayerKind::Split { d_thin, .. } = layer {
                if d_thin % D_HEAD != 0 || *d_thin == 0 {
                    return fail(format!(
                        "stage.{i}: d_thin {d_thin} is not a multiple of {D_HEAD}"
                    ));
                }
            }
            if let Some(spec) = self.stage_spec(i) {
                spec.validate()
                    .map_err(|e| Error::Config(format!("stage.{i}: {e}")))?;
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut seen: Vec<(String, String)> = Vec::new();
        for (ln, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", ln + 1)));
            };
            let key = key.trim().to_string();
            let value = value.trim().to_string();
            if seen.iter().any(|(k, _)| *k == key) {
                return Err(Error::Config(format!("duplicate key '{key}'")));
            }
            seen.push((key, value));
        }

        let mut stages: Vec<(usize, LayerKind)> = Vec::new();
        let mut cfg = ModelConfig::base(0, Vec::new());
        let mut d_ff_set = false;
        let mut n_layers_declared: Option<usize> = None;
        let (mut moe_experts, mut moe_active) = (4usize, 2usize);
        let mut ffn_kind = "dense".to_string();
        for (key, value) in &seen {
            let bad = |what: &str| Error::Config(format!("{key}: {what} '{value}'"));
            let as_usize =
                |v: &str| v.parse::<usize>().map_err(|_| bad("expected a number, got"));
            match key.as_str() {
                "vocab" => cfg.vocab = as_usize(value)?,
                "d_model" => cfg.d_model = as_usize(value)?,
                "n_heads" => cfg.n_heads = as_usize(value)?,
                "t_max" => cfg.t_max = as_usize(value)?,
                "seed" => {
                    cfg.seed = value.parse::<u64>().map_err(|_| bad("expected a number, got"))?
                }
                "n_layers" => n_layers_declared = Some(as_usize(value)?),
                "dense_d_ff" => {
                    cfg.dense_d_ff = as_usize(value)?;
                    d_ff_set = true;
                }
                "dense_attn" => cfg.dense_attn = parse_attn(key, value)?,
                "routed_attn" => cfg.routed_attn = parse_attn(key, value)?,
                "ffn" => ffn_kind = value.clone(),
                "moe_experts" => moe_experts = as_usize(value)?,
                "moe_active" => moe_active = as_usize(value)?,
                "se_gating" => cfg.se_gating = parse_bool(key, value)?,
                "shared_in_average" => cfg.shared_in_average = parse_bool(key, value)?,
                "delta_rope" => cfg.delta_rope = parse_bool(key, value)?,
                "delta_chunk" => cfg.delta_chunk = as_usize(value)?,
                _ => {
                    if let Some(idx) = key.strip_prefix("stage.") {
                        let i = idx
                            .parse::<usize>()
                            .map_err(|_| Error::Config(format!("bad stage index '{key}'")))?;
                        stages.push((i, parse_stage(key, value)?));
                    } else {
                        return Err(Error::Config(format!("unknown key '{key}'")));
                    }
                }
            }
        }
        cfg.ffn = match ffn_kind.as_str() {
            "dense" => FfnKind::Dense,
            "rank1moe" => FfnKind::Rank1Moe { experts: moe_experts, active: moe_active },
            other => return Err(Error::Config(format!("ffn: expected dense or rank1moe, got '{other}'"))),
        };
        if cfg.d_model == 0 {
            return Err(Error::Config("d_model: missing".into()));
        }
        if cfg.n_heads == 0 {
            cfg.n_heads = cfg.d_model / D_HEAD;
        }
        if !d_ff_set {
            cfg.dense_d_ff = 4 * cfg.d_model;
        }
        stages.sort_by_key(|(i, _)| *i);
        for (want, (got, _)) in stages.iter().enumerate() {
            if *got != want {
                return Err(Error::Config(format!(
                    "stage.{got}: expected contiguous indices starting at stage.0"
                )));
            }
        }
        cfg.layers = stages.into_iter().map(|(_, l)| l).collect();
        if let Some(n) = n_layers_declared {
            if n != cfg.layers.len() {
                return Err(Error::Config(format!(
                    "n_layers: declared {n} but {} stage lines given",
                    cfg.layers.len()
                )));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "vocab = {}", self.vocab);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "n_heads = {}", self.n_heads);
        let _ = writeln!(s, "t_max = {}", self.t_max);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "n_layers = {}", self.layers.len());
        let _ = writeln!(s, "dense_d_ff = {}", self.dense_d_ff);
        let _ = writeln!(s, "dense_attn = {}", attn_name(self.dense_attn));
        let _ = writeln!(s, "routed_attn = {}", attn_name(self.routed_attn));
        match self.ffn {
            FfnKind::Dense => {
                let _ = writeln!(s, "ffn = dense");
            }
            FfnKind::Rank1Moe { experts, active } => {
                let _ = writeln!(s, "ffn = rank1moe");
                let _ = writeln!(s, "moe_experts = {experts}");
                let _ = writeln!(s, "moe_active = {active}");
            }
        }
        let _ = writeln!(s, "se_gating = {}", self.se_gating);
        let _ = writeln!(s, "shared_in_average = {}", self.shared_in_average);
        let _ = writeln!(s, "delta_rope = {}", self.delta_rope);
        let _ = writeln!(s, "delta_chunk = {}", self.delta_chunk);
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerKind::Dense => {
                    let _ = writeln!(s, "stage.{i} = dense");
                }
                LayerKind::Split { n, s: sh, k, d_thin } => {
                    let _ = writeln!(s, "stage.{i} = {sh}+{k}of{n}@{d_thin}");
                }
            }
        }
        s
    }
}

fn parse_attn(key: &str, value: &str) -> Result<AttnKind> {
    match value {
        "softmax" => Ok(AttnKind::Softmax),
        "delta" => Ok(AttnKind::Delta),
        _ => Err(Error::Config(format!("{key}: expected softmax or delta, got '{value}'"))),
    }
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected true or false, got '{value}'"))),
    }
}

/// `S+KofN@D` or `dense`.
fn parse_stage(key: &str, value: &str) -> Result<LayerKind> {
    if value == "dense" {
        return Ok(LayerKind::Dense);
    }
    let bad = || Error::Config(format!("{key}: expected S+KofN@d_thin or dense, got '{value}'"));
    let (s_str, rest) = value.split_once('+').ok_or_else(bad)?;
    let (k_str, rest) = rest.split_once("of").ok_or_else(bad)?;
    let (n_str, d_str) = rest.split_once('@').ok_or_else(bad)?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|_| bad());
    Ok(LayerKind::Split {
        s: parse(s_str)?,
        k: parse(k_str)?,
        n: parse(n_str)?,
        d_thin: parse(d_str)?,
    })
}

fn attn_name(kind: AttnKind) -> &'static str {
    match kind {
        AttnKind::Softmax => "softmax",
        AttnKind::Delta => "delta",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn hybrid_cfg() -> ModelConfig {
        let mut cfg = ModelConfig::base(
            128,
            vec![
                LayerKind::Split { n: 15, s: 1, k: 3, d_thin: 256 },
                LayerKind::Dense,
                LayerKind::Split { n: 5, s: 0, k: 2, d_thin: 64 },
            ],
        );
        cfg.routed_attn = AttnKind::Delta;
        cfg.ffn = FfnKind::Rank1Moe { experts: 8, active: 2 };
        cfg.seed = 7;
        cfg
    }

    #[test]
    fn test_text_round_trip_is_lossless() {
        let cfg = hybrid_cfg();
        let text = cfg.to_text();
        let back = ModelConfig::parse(&text).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn test_parse_accepts_comments_and_defaults() {
        let text = "\
# a tiny model
d_model = 64   # one head
stage.0 = 0+2of4@64
";
        let cfg = ModelConfig::parse(text).unwrap();
        assert_eq!(cfg.d_model, 64);
        assert_eq!(cfg.n_heads, 1);
        assert_eq!(cfg.vocab, 256);
        assert_eq!(cfg.dense_d_ff, 256);
        assert_eq!(cfg.layers, vec![LayerKind::Split { n: 4, s: 0, k: 2, d_thin: 64 }]);
        assert_eq!(cfg.stage_spec(0).unwrap().d_ff, 256);
    }

    #[test]
    fn test_parse_rejects_unknown_and_duplicate_keys() {
        let err = ModelConfig::parse("d_model = 64\nstage.0 = dense\nwat = 1").unwrap_err();
        assert!(err.to_string().contains("unknown key 'wat'"), "{err}");
        let err = ModelConfig::parse("d_model = 64\nd_model = 128\nstage.0 = dense").unwrap_err();
        assert!(err.to_string().contains("duplicate key 'd_model'"), "{err}");
    }

    #[test]
    fn test_parse_rejects_bad_stage_syntax() {
        for bad in ["1+3of", "3of15@256", "1+3of15", "one+3of15@256"] {
            let text = format!("d_model = 64\nstage.0 = {bad}");
            let err = ModelConfig::parse(&text).unwrap_err();
            assert!(err.to_string().contains("stage.0"), "{bad}: {err}");
        }
        let err =
            ModelConfig::parse("d_model = 64\nstage.0 = dense\nstage.2 = dense").unwrap_err();
        assert!(err.to_string().contains("contiguous"), "{err}");
        let err =
            ModelConfig::parse("d_model = 64\nn_layers = 3\nstage.0 = dense").unwrap_err();
        assert!(err.to_string().contains("n_layers"), "{err}");
    }

    #[test]
    fn test_validate_names_offending_field() {
        let mut cfg = ModelConfig::base(100, vec![LayerKind::Dense]);
        cfg.n_heads = 2;
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("d_model"), "{err}");

        let cfg = ModelConfig::base(
            64,
            vec![LayerKind::Split { n: 4, s: 1, k: 1, d_thin: 48 }],
        );
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stage.0"), "{err}");

        let cfg = ModelConfig::base(
            64,
            vec![LayerKind::Split { n: 4, s: 1, k: 5, d_thin: 64 }],
        );
        let err = cfg.validate().unwrap_err();
        assert!(err.to_string().contains("stage.0"), "{err}");
    }
}
