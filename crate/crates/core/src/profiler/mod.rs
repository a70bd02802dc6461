//! Analytical MAC counts, instrumented cross-checks, wall-clock timing and
//! arena peak-memory measurement of forward passes.
//!
//! MAC formulas, with `L` a sequence length, `F` the model width, `h` heads
//! and `d = F / h`:
//!
//! | term | MACs |
//! |---|---|
//! | encoder / decoder conv | `T'·F·Kw` each |
//! | position-wise linear `a → b` | `rows·a·b` |
//! | Q, K, V, O projections | `L·F²` each (no K under shared-QK) |
//! | full attention | `2·L²·F` |
//! | Longformer | `2·pairs·F` with pairs = band + global entries |
//! | Linformer | `4·L·k·F` |
//! | Reformer | `rounds·(L·F·n_buckets/2 + 2·pairs·F)` with pairs from the sorted chunks |
//! | transformer feed-forward | `2·L·F·d_ff` |
//!
//! Only forward work is counted, and only matrix products, convolutions and
//! sparse attention contribute; element-wise work is free.

pub mod baseline;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{longformer_pairs, reformer_pairs, AttentionKind, AttentionSpec};
use crate::config::SepformerConfig;
use crate::error::{Error, Result};
use crate::ndkernel::{arena, Eval, Graph, NdArray};
use crate::sepmodel::Sepformer;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacBreakdown {
    /// Encoder and decoder convolutions.
    pub codec: u64,
    /// Masking-network linears outside the transformer layers.
    pub mask_linears: u64,
    /// Q, K, V and output projections.
    pub projections: u64,
    /// Score and weighted-sum work of the attention mechanism itself.
    pub attention: u64,
    pub feed_forward: u64,
}

impl MacBreakdown {
    pub fn total(&self) -> u64 {
        self.codec + self.mask_linears + self.projections + self.attention + self.feed_forward
    }
}

/// Attention-mechanism MACs for one multi-head call on `len` positions.
pub fn attention_core_macs(spec: &AttentionSpec, len: usize) -> Result<u64> {
    let (l, f) = (len as u64, spec.d_model as u64);
    Ok(match spec.kind {
        AttentionKind::Full => 2 * l * l * f,
        AttentionKind::Longformer { window, global_every } => 2 * longformer_pairs(len, window, global_every) * f,
        AttentionKind::Linformer { k, max_len } => {
            if len > max_len {
                return Err(Error::SequenceTooLong { len, max_len });
            }
            4 * l * k as u64 * f
        }
        AttentionKind::Reformer {
            n_buckets,
            n_rounds,
            bucket_chunk,
        } => n_rounds as u64 * (l * f * (n_buckets / 2) as u64 + 2 * reformer_pairs(len, bucket_chunk) * f),
    })
}

fn projection_macs(spec: &AttentionSpec, len: usize) -> u64 {
    let n = match spec.kind {
        AttentionKind::Reformer { .. } => 3,
        _ => 4,
    };
    n * len as u64 * (spec.d_model * spec.d_model) as u64
}

fn stack_macs(cfg: &SepformerConfig, spec: &AttentionSpec, depth: usize, len: usize, calls: usize, out: &mut MacBreakdown) -> Result<()> {
    let (calls, depth) = (calls as u64, depth as u64);
    out.projections += calls * depth * projection_macs(spec, len);
    out.attention += calls * depth * attention_core_macs(spec, len)?;
    out.feed_forward += calls * depth * 2 * (len * cfg.filters * cfg.d_ff) as u64;
    Ok(())
}

/// Analytical forward MACs of `cfg` on an input of `samples` samples.
pub fn count_macs(cfg: &SepformerConfig, samples: usize) -> Result<MacBreakdown> {
    let frames = cfg.frames(samples)?;
    let geom = cfg.geometry(frames)?;
    let (tp, f, ns) = (frames as u64, cfg.filters as u64, cfg.sources as u64);
    let rows = geom.rows() as u64;
    let mut out = MacBreakdown {
        codec: tp * f * cfg.kernel_size as u64 * (1 + ns),
        mask_linears: tp * f * f + rows * f * f * ns + ns * 2 * tp * f * f,
        ..Default::default()
    };
    let (intra, inter) = (cfg.intra_spec()?, cfg.inter_spec()?);
    for _ in 0..cfg.repeats {
        stack_macs(cfg, &intra, cfg.intra_layers, geom.chunk_size, geom.n_chunks, &mut out)?;
        stack_macs(cfg, &inter, cfg.inter_layers, geom.n_chunks, geom.chunk_size, &mut out)?;
    }
    Ok(out)
}

/// Seeded uniform noise input.
pub fn bench_input(samples: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..samples).map(|_| rng.gen_range(-0.5..0.5)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub macs: u64,
    pub wall_ms: f64,
    /// Arena high-water mark above the storage alive before the call.
    pub peak_bytes: u64,
}

/// Run `f` once on this thread, counting MACs and peak arena growth.
pub fn measure<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, Measurement)> {
    let base = arena::live_bytes();
    arena::reset_peak();
    arena::reset_macs();
    let t0 = Instant::now();
    let out = f()?;
    let wall_ms = t0.elapsed().as_secs_f64() * 1e3;
    let m = Measurement {
        macs: arena::macs(),
        wall_ms,
        peak_bytes: (arena::peak_bytes() - base) as u64,
    };
    Ok((out, m))
}

/// Forward pass in inference mode; intermediates are freed as soon as they
/// are no longer referenced.
pub fn measure_forward(model: &Sepformer, x: &[f64]) -> Result<Measurement> {
    let input = NdArray::vector(x.to_vec());
    let (_, m) = measure(|| {
        let mut g = Eval;
        let xv = g.constant(input);
        let est = model.forward(&mut g, &xv)?;
        Ok(est.len())
    })?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub label: String,
    pub seconds: f64,
    pub macs: u64,
    pub wall_ms: f64,
    pub peak_bytes: u64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One report per duration: analytical MACs, median wall time over
/// `repeats` runs after one warm-up, and peak arena bytes.
pub fn bench_forward(label: &str, cfg: &SepformerConfig, seconds: &[f64], repeats: usize) -> Result<Vec<CostReport>> {
    let model = Sepformer::new(cfg.clone())?;
    bench_model(label, &model, seconds, repeats)
}

pub fn bench_model(label: &str, model: &Sepformer, seconds: &[f64], repeats: usize) -> Result<Vec<CostReport>> {
    let cfg = &model.config;
    let mut out = Vec::with_capacity(seconds.len());
    for (i, &s) in seconds.iter().enumerate() {
        let samples = (s * cfg.sample_rate as f64).round() as usize;
        let macs = count_macs(cfg, samples)?.total();
        let x = bench_input(samples, i as u64);
        let warm = measure_forward(model, &x)?;
        let mut walls = Vec::with_capacity(repeats);
        let mut peak = warm.peak_bytes;
        for _ in 0..repeats.max(1) {
            let m = measure_forward(model, &x)?;
            walls.push(m.wall_ms);
            peak = peak.max(m.peak_bytes);
        }
        out.push(CostReport {
            label: label.to_string(),
            seconds: s,
            macs,
            wall_ms: median(walls),
            peak_bytes: peak,
        });
    }
    Ok(out)
}

pub fn sort_reports(reports: &mut [CostReport]) {
    reports.sort_by(|a, b| a.label.cmp(&b.label).then(a.seconds.total_cmp(&b.seconds)));
}

const COLUMNS: [&str; 5] = ["label", "seconds", "macs", "wall_ms", "peak_bytes"];

/// CSV with columns `label, seconds, macs, wall_ms, peak_bytes`, rows
/// sorted by (label, seconds).
pub fn to_csv(reports: &[CostReport]) -> Result<String> {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in &sorted {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::InvalidConfig(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn from_csv(text: &str) -> Result<Vec<CostReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

pub fn to_markdown(reports: &[CostReport]) -> String {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    let mut s = format!("| {} |\n|{}\n", COLUMNS.join(" | "), "---|".repeat(COLUMNS.len()));
    for r in &sorted {
        s.push_str(&format!(
            "| {} | {} | {} | {:.3} | {} |\n",
            r.label, r.seconds, r.macs, r.wall_ms, r.peak_bytes
        ));
    }
    s
}

pub fn to_json(reports: &[CostReport]) -> String {
    let mut sorted = reports.to_vec();
    sort_reports(&mut sorted);
    serde_json::to_string_pretty(&sorted).expect("reports serialise")
}
