//! Model hyper-parameters and the flat `key = value` file format shared by
//! config files and checkpoint headers.

use std::fmt;
use std::str::FromStr;

use crate::attention::{AttentionKind, AttentionSpec};
use crate::dualpath::ChunkGeometry;
use crate::error::{Error, Result};
use crate::ndkernel::conv_out_len;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    Longformer,
    Linformer,
    Reformer,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Full, Variant::Longformer, Variant::Linformer, Variant::Reformer];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::Longformer => "longformer",
            Variant::Linformer => "linformer",
            Variant::Reformer => "reformer",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown attention variant `{s}`")))
    }
}

/// Inter-chunk attention: the intra variant again, or a fixed one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterAttention {
    Same,
    Variant(Variant),
}

impl fmt::Display for InterAttention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InterAttention::Same => f.write_str("same"),
            InterAttention::Variant(v) => v.fmt(f),
        }
    }
}

impl FromStr for InterAttention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "same" {
            Ok(InterAttention::Same)
        } else {
            s.parse().map(InterAttention::Variant)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Chunking {
    Size(usize),
    /// One chunk spanning the whole latent sequence.
    None,
}

impl fmt::Display for Chunking {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Chunking::Size(c) => write!(f, "{c}"),
            Chunking::None => f.write_str("none"),
        }
    }
}

impl FromStr for Chunking {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "none" {
            return Ok(Chunking::None);
        }
        let c: usize = parse_value("chunk_size", s)?;
        if c < 2 || !c.is_multiple_of(2) {
            return Err(Error::InvalidChunkSize(c));
        }
        Ok(Chunking::Size(c))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SepformerConfig {
    pub filters: usize,
    pub kernel_size: usize,
    pub stride: usize,
    pub chunking: Chunking,
    pub repeats: usize,
    pub intra_layers: usize,
    pub inter_layers: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub sources: usize,
    pub intra_attention: Variant,
    pub inter_attention: InterAttention,
    pub positional_encoding: bool,
    pub sample_rate: u32,
    /// Longest input the model must accept; sizes the Linformer projections.
    pub max_seconds: f64,
    pub longformer_window: usize,
    /// 0 disables global positions.
    pub longformer_global_every: usize,
    pub linformer_k: usize,
    pub reformer_buckets: usize,
    pub reformer_rounds: usize,
    pub reformer_chunk: usize,
    pub seed: u64,
}

impl Default for SepformerConfig {
    fn default() -> Self {
        Self::standard()
    }
}

pub(crate) fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::InvalidConfig(format!("bad value `{value}` for `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::InvalidConfig(format!("bad value `{value}` for `{key}`"))),
    }
}

impl SepformerConfig {
    /// F=256, Kw=16, stride 8, C=250, N=2, 8+8 layers, 8 heads, d_ff 1024.
    pub fn standard() -> Self {
        SepformerConfig {
            filters: 256,
            kernel_size: 16,
            stride: 8,
            chunking: Chunking::Size(250),
            repeats: 2,
            intra_layers: 8,
            inter_layers: 8,
            heads: 8,
            d_ff: 1024,
            sources: 2,
            intra_attention: Variant::Full,
            inter_attention: InterAttention::Same,
            positional_encoding: true,
            sample_rate: 8000,
            max_seconds: 5.0,
            longformer_window: 101,
            longformer_global_every: 100,
            linformer_k: 128,
            reformer_buckets: 8,
            reformer_rounds: 2,
            reformer_chunk: 64,
            seed: 0,
        }
    }

    /// Set one key; `Ok(false)` when the key is not a model key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "filters" => self.filters = parse_value(key, value)?,
            "kernel_size" => self.kernel_size = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            "chunk_size" => self.chunking = value.parse()?,
            "repeats" => self.repeats = parse_value(key, value)?,
            "intra_layers" => self.intra_layers = parse_value(key, value)?,
            "inter_layers" => self.inter_layers = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "d_ff" => self.d_ff = parse_value(key, value)?,
            "sources" => self.sources = parse_value(key, value)?,
            "intra_attention" => self.intra_attention = value.parse()?,
            "inter_attention" => self.inter_attention = value.parse()?,
            "positional_encoding" => self.positional_encoding = parse_bool(key, value)?,
            "sample_rate" => self.sample_rate = parse_value(key, value)?,
            "max_seconds" => self.max_seconds = parse_value(key, value)?,
            "longformer_window" => self.longformer_window = parse_value(key, value)?,
            "longformer_global_every" => self.longformer_global_every = parse_value(key, value)?,
            "linformer_k" => self.linformer_k = parse_value(key, value)?,
            "reformer_buckets" => self.reformer_buckets = parse_value(key, value)?,
            "reformer_rounds" => self.reformer_rounds = parse_value(key, value)?,
            "reformer_chunk" => self.reformer_chunk = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        vec![
            ("filters", self.filters.to_string()),
            ("kernel_size", self.kernel_size.to_string()),
            ("stride", self.stride.to_string()),
            ("chunk_size", self.chunking.to_string()),
            ("repeats", self.repeats.to_string()),
            ("intra_layers", self.intra_layers.to_string()),
            ("inter_layers", self.inter_layers.to_string()),
            ("heads", self.heads.to_string()),
            ("d_ff", self.d_ff.to_string()),
            ("sources", self.sources.to_string()),
            ("intra_attention", self.intra_attention.to_string()),
            ("inter_attention", self.inter_attention.to_string()),
            ("positional_encoding", self.positional_encoding.to_string()),
            ("sample_rate", self.sample_rate.to_string()),
            ("max_seconds", format!("{:?}", self.max_seconds)),
            ("longformer_window", self.longformer_window.to_string()),
            ("longformer_global_every", self.longformer_global_every.to_string()),
            ("linformer_k", self.linformer_k.to_string()),
            ("reformer_buckets", self.reformer_buckets.to_string()),
            ("reformer_rounds", self.reformer_rounds.to_string()),
            ("reformer_chunk", self.reformer_chunk.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    pub fn from_pairs<'a>(pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<Self> {
        let mut cfg = SepformerConfig::standard();
        for (k, v) in pairs {
            if !cfg.set(k, v)? {
                return Err(Error::InvalidConfig(format!("unknown key `{k}`")));
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.filters == 0 || self.kernel_size == 0 || self.stride == 0 {
            return bad("filters, kernel_size and stride must be positive");
        }
        if self.repeats == 0 || self.intra_layers == 0 || self.inter_layers == 0 {
            return bad("repeats and layer counts must be positive");
        }
        if !(1..=3).contains(&self.sources) {
            return bad("sources must be 1, 2 or 3");
        }
        if self.sample_rate == 0 || !(self.max_seconds > 0.0) {
            return bad("sample_rate and max_seconds must be positive");
        }
        if self.d_ff == 0 {
            return bad("d_ff must be positive");
        }
        self.intra_spec()?;
        self.inter_spec()?;
        Ok(())
    }

    pub fn inter_variant(&self) -> Variant {
        match self.inter_attention {
            InterAttention::Same => self.intra_attention,
            InterAttention::Variant(v) => v,
        }
    }

    /// Latent frames for an input of `samples`.
    pub fn frames(&self, samples: usize) -> Result<usize> {
        if samples < self.kernel_size {
            return Err(Error::InputTooShort {
                len: samples,
                kernel: self.kernel_size,
            });
        }
        Ok(conv_out_len(samples, self.kernel_size, self.stride))
    }

    pub fn max_samples(&self) -> usize {
        (self.max_seconds * self.sample_rate as f64).round() as usize
    }

    /// Chunk length used for `frames` latent frames.
    pub fn chunk_len(&self, frames: usize) -> usize {
        match self.chunking {
            Chunking::Size(c) => c,
            Chunking::None => (frames + frames % 2).max(2),
        }
    }

    pub fn geometry(&self, frames: usize) -> Result<ChunkGeometry> {
        ChunkGeometry::new(frames, self.chunk_len(frames))
    }

    fn max_geometry(&self) -> Result<ChunkGeometry> {
        let frames = self.frames(self.max_samples().max(self.kernel_size))?;
        self.geometry(frames)
    }

    fn kind(&self, v: Variant, max_len: usize) -> AttentionKind {
        match v {
            Variant::Full => AttentionKind::Full,
            Variant::Longformer => AttentionKind::Longformer {
                window: self.longformer_window,
                global_every: (self.longformer_global_every > 0).then_some(self.longformer_global_every),
            },
            Variant::Linformer => AttentionKind::Linformer {
                k: self.linformer_k.min(max_len),
                max_len,
            },
            Variant::Reformer => AttentionKind::Reformer {
                n_buckets: self.reformer_buckets,
                n_rounds: self.reformer_rounds,
                bucket_chunk: self.reformer_chunk,
            },
        }
    }

    pub fn intra_spec(&self) -> Result<AttentionSpec> {
        let max_len = self.max_geometry()?.chunk_size;
        Ok(AttentionSpec::new(self.kind(self.intra_attention, max_len), self.heads, self.filters)?
            .with_seed(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(17)))
    }

    pub fn inter_spec(&self) -> Result<AttentionSpec> {
        let max_len = self.max_geometry()?.n_chunks;
        Ok(AttentionSpec::new(self.kind(self.inter_variant(), max_len), self.heads, self.filters)?
            .with_seed(self.seed.wrapping_mul(0x9E37_79B9).wrapping_add(29)))
    }
}

/// One `key = value` entry with its 1-based source line.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Entry {
    pub line: usize,
    pub key: String,
    pub value: String,
}

/// Parse `key = value` lines; `#` starts a comment, blank lines are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<Entry>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::ConfigLine {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            });
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() {
            return Err(Error::ConfigLine {
                line: i + 1,
                msg: "empty key".into(),
            });
        }
        out.push(Entry {
            line: i + 1,
            key: k.to_string(),
            value: v.to_string(),
        });
    }
    Ok(out)
}
