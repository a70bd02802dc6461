//! Command-line front end: `separate`, `train-toy`, `bench` and `gradcheck`.
//!
//! Settings resolve as flag, then config file, then the built-in full-size
//! defaults. Exit codes: 0 success, 1 usage or config error, 2 numeric
//! failure.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::config::{parse_kv, Chunking, InterAttention, SepformerConfig, Variant};
use crate::datagen::{wav_read, wav_write, Signal};
use crate::error::{Error, Result};
use crate::gradcheck;
use crate::objectives::{pit_loss, si_snri};
use crate::profiler::{bench_forward, to_csv, to_json, to_markdown, CostReport};
use crate::sepmodel::Sepformer;
use crate::train::{train_toy, write_trace, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "sepformer", version, about = "Dual-path transformer speech separation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Separate a mono 16-bit WAV into one file per source.
    Separate {
        #[arg(long)]
        model: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        /// Expected source count; must match the checkpoint.
        #[arg(long)]
        sources: Option<usize>,
        /// Reference targets, one WAV per source, for scoring.
        #[arg(long = "ref", num_args = 1..)]
        refs: Vec<PathBuf>,
    },
    /// Train a small model on synthetic mixtures.
    TrainToy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Seeds both weight initialisation and data generation.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// CSV trace path; defaults to the checkpoint path with `.csv`.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Cost reports for attention variants and chunkings.
    Bench {
        #[arg(long, value_delimiter = ',', default_value = "full,longformer,linformer,reformer")]
        attention: Vec<String>,
        /// `c250`, `c1000`, `c<N>` or `none`.
        #[arg(long, value_delimiter = ',', default_value = "c250")]
        chunking: Vec<String>,
        /// Comma list or inclusive integer range such as `1..5`.
        #[arg(long, default_value = "1..5")]
        seconds: String,
        #[arg(long, value_enum, default_value_t = InterChoice::Same)]
        inter_attention: InterChoice,
        #[arg(long, default_value_t = 5)]
        repeats: usize,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Emit::Csv)]
        emit: Emit,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value = "all")]
        module: String,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum InterChoice {
    Full,
    Same,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Emit {
    Csv,
    Md,
    Json,
}

/// Model and training settings resolved from defaults and a config file.
#[derive(Debug, Clone, PartialEq)]
#[derive(Default)]
pub struct RunConfig {
    pub model: SepformerConfig,
    pub train: TrainConfig,
}


impl RunConfig {
    /// Apply a `key = value` text on top of the defaults. Unknown keys and
    /// bad values are reported with their line number.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut rc = RunConfig::default();
        for e in parse_kv(text)? {
            let line_err = |msg: String| Error::ConfigLine { line: e.line, msg };
            let known = match rc.model.set(&e.key, &e.value) {
                Ok(true) => true,
                Ok(false) => rc.train.set(&e.key, &e.value).map_err(|err| line_err(err.to_string()))?,
                Err(err) => return Err(line_err(err.to_string())),
            };
            if !known {
                return Err(line_err(format!("unknown key `{}`", e.key)));
            }
        }
        Ok(rc)
    }

    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                RunConfig::from_text(&text)
            }
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFiniteLoss { .. } => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parse `c250`, `c1000`, `250` or `none`.
pub fn parse_chunking(s: &str) -> Result<Chunking> {
    s.strip_prefix('c').unwrap_or(s).parse()
}

/// Parse `4`, `1,2,4` or `1..5`.
pub fn parse_seconds(s: &str) -> Result<Vec<f64>> {
    let bad = || Error::InvalidConfig(format!("bad --seconds `{s}`"));
    if let Some((a, b)) = s.split_once("..") {
        let (a, b): (u32, u32) = (a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?);
        if a == 0 || b < a {
            return Err(bad());
        }
        return Ok((a..=b).map(f64::from).collect());
    }
    let v = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    if v.iter().any(|x| !(*x > 0.0)) {
        return Err(bad());
    }
    Ok(v)
}

/// Run one parsed command, writing human output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<i32> {
    match cli.command {
        Command::Separate {
            model,
            input,
            out_dir,
            sources,
            refs,
        } => separate(&model, &input, &out_dir, sources, &refs, out),
        Command::TrainToy {
            config,
            steps,
            seed,
            out: ckpt,
            trace,
        } => train(config.as_deref(), steps, seed, &ckpt, trace, out),
        Command::Bench {
            attention,
            chunking,
            seconds,
            inter_attention,
            repeats,
            config,
            emit,
            out: dest,
        } => {
            let rc = RunConfig::load(config.as_deref())?;
            let variants = attention.iter().map(|a| a.parse()).collect::<Result<Vec<Variant>>>()?;
            let chunkings = chunking.iter().map(|c| parse_chunking(c)).collect::<Result<Vec<_>>>()?;
            let secs = parse_seconds(&seconds)?;
            let reports = bench(&rc.model, &variants, &chunkings, &secs, inter_attention, repeats)?;
            let text = match emit {
                Emit::Csv => to_csv(&reports)?,
                Emit::Md => to_markdown(&reports),
                Emit::Json => to_json(&reports) + "\n",
            };
            match dest {
                Some(p) => std::fs::write(&p, text).map_err(|e| Error::io(&p, e))?,
                None => out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?,
            }
            Ok(EXIT_OK)
        }
        Command::Gradcheck { module } => {
            let reports = gradcheck::run(&module)?;
            let mut text = String::new();
            for r in &reports {
                let verdict = if r.passed { "ok" } else { "FAIL" };
                writeln!(text, "{:<10} {:<22} {:.3e} {verdict}", r.suite, r.name, r.rel_error).expect("string write");
            }
            let worst = reports.iter().map(|r| r.rel_error).fold(0.0, f64::max);
            writeln!(text, "max relative error {worst:.3e}").expect("string write");
            out.write_all(text.as_bytes()).map_err(|e| Error::io("<stdout>", e))?;
            Ok(if reports.iter().all(|r| r.passed) { EXIT_OK } else { EXIT_NUMERIC })
        }
    }
}

fn separate(
    model_path: &Path,
    input: &Path,
    out_dir: &Path,
    sources: Option<usize>,
    refs: &[PathBuf],
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let model = Sepformer::load(model_path)?;
    let cfg = &model.config;
    if let Some(n) = sources {
        if n != cfg.sources {
            return Err(Error::InvalidConfig(format!(
                "--sources {n} but the checkpoint separates {} sources",
                cfg.sources
            )));
        }
    }
    let x = wav_read(input)?;
    if x.sample_rate != cfg.sample_rate {
        return Err(Error::SampleRateMismatch(x.sample_rate, cfg.sample_rate));
    }
    let targets = refs.iter().map(|p| wav_read(p)).collect::<Result<Vec<Signal>>>()?;
    if !targets.is_empty() && targets.len() != cfg.sources {
        return Err(Error::SourceCountMismatch {
            estimates: cfg.sources,
            targets: targets.len(),
        });
    }
    let sep = model.separate(&x.samples)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for (k, est) in sep.estimates.iter().enumerate() {
        let p = out_dir.join(format!("source{}.wav", k + 1));
        wav_write(&p, &Signal::new(est.clone(), x.sample_rate))?;
    }
    if !targets.is_empty() {
        let est: Vec<&[f64]> = sep.estimates.iter().map(Vec::as_slice).collect();
        let tgt: Vec<&[f64]> = targets.iter().map(|t| t.samples.as_slice()).collect();
        if let Some(t) = tgt.iter().find(|t| t.len() != x.len()) {
            return Err(Error::LengthMismatch(t.len(), x.len()));
        }
        let (loss, _) = pit_loss(&est, &tgt)?;
        let improvement = si_snri(&x.samples, &est, &tgt)?;
        writeln!(out, "si_snr_db {:.3}\nsi_snri_db {improvement:.3}", -loss).map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(EXIT_OK)
}

fn train(
    config: Option<&Path>,
    steps: Option<usize>,
    seed: Option<u64>,
    ckpt: &Path,
    trace: Option<PathBuf>,
    out: &mut dyn std::io::Write,
) -> Result<i32> {
    let mut rc = RunConfig::load(config)?;
    if let Some(s) = steps {
        rc.train.steps = s;
    }
    if let Some(s) = seed {
        rc.model.seed = s;
        rc.train.seed = s;
    }
    rc.model.validate()?;
    let mut model = Sepformer::new(rc.model.clone())?;
    let mut data = rc.train.data_source(rc.model.sources, rc.model.sample_rate)?;
    let rows = train_toy(&mut model, data.as_mut(), &rc.train)?;
    model.save(ckpt)?;
    let trace = trace.unwrap_or_else(|| ckpt.with_extension("csv"));
    write_trace(&trace, &rows)?;
    match rows.last() {
        Some(r) => writeln!(out, "steps {} loss {:.4} si_snri_db {:.3}", rows.len(), r.loss, r.si_snri),
        None => writeln!(out, "steps 0"),
    }
    .map_err(|e| Error::io("<stdout>", e))?;
    Ok(EXIT_OK)
}

/// One report per (variant, chunking, seconds).
pub fn bench(
    base: &SepformerConfig,
    variants: &[Variant],
    chunkings: &[Chunking],
    seconds: &[f64],
    inter: InterChoice,
    repeats: usize,
) -> Result<Vec<CostReport>> {
    let mut reports = Vec::new();
    for &v in variants {
        for &c in chunkings {
            let mut cfg = base.clone();
            cfg.intra_attention = v;
            cfg.inter_attention = match inter {
                InterChoice::Same => InterAttention::Same,
                InterChoice::Full => InterAttention::Variant(Variant::Full),
            };
            cfg.chunking = c;
            cfg.validate()?;
            if v == Variant::Linformer {
                if let Some(&s) = seconds.iter().find(|&&s| s > cfg.max_seconds) {
                    return Err(Error::InvalidConfig(format!(
                        "linformer projections cover {} s but {s} s was requested",
                        cfg.max_seconds
                    )));
                }
            }
            let chunk = match c {
                Chunking::Size(n) => format!("c{n}"),
                Chunking::None => "none".into(),
            };
            let suffix = if inter == InterChoice::Full { "/inter-full" } else { "" };
            reports.extend(bench_forward(&format!("{v}/{chunk}{suffix}"), &cfg, seconds, repeats)?);
        }
    }
    Ok(reports)
}

/// Parse `args`, run, and return the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
