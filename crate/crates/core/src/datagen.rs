//! Synthetic sources, dynamic mixing, speed perturbation and WAV I/O.

use std::f64::consts::PI;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE: u32 = 8000;

#[derive(Debug, Clone, PartialEq)]
pub struct Signal {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

impl Signal {
    pub fn new(samples: Vec<f64>, sample_rate: u32) -> Self {
        Signal { samples, sample_rate }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn seconds(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

pub fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len().max(1) as f64).sqrt()
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if m > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / m;
        }
    }
}

/// Per-item seed derived from a base seed.
pub fn derive_seed(seed: u64, item: u64) -> u64 {
    let mut z = seed ^ item.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceKind {
    MultiSine,
    FilteredNoise,
    Chirp,
}

impl SourceKind {
    pub fn name(self) -> &'static str {
        match self {
            SourceKind::MultiSine => "multi-sine",
            SourceKind::FilteredNoise => "filtered-noise",
            SourceKind::Chirp => "chirp",
        }
    }
}

impl fmt::Display for SourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SourceKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [SourceKind::MultiSine, SourceKind::FilteredNoise, SourceKind::Chirp]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown source kind `{s}`")))
    }
}

const TONES_PER_SOURCE: usize = 3;

/// Integer-Hz tone frequencies for every source of a multi-sine pool.
///
/// The pool shares one shuffled list of candidate frequencies, so sources of
/// one pool never share a tone.
pub fn multi_sine_frequencies(count: usize, sample_rate: u32, seed: u64) -> Vec<Vec<u32>> {
    let lo = 100u32;
    let hi = (sample_rate / 2).saturating_sub(400).max(lo + (count * TONES_PER_SOURCE) as u32);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX));
    let picks = sample(&mut rng, (hi - lo) as usize, count * TONES_PER_SOURCE);
    let all: Vec<u32> = picks.into_iter().map(|i| lo + i as u32).collect();
    all.chunks(TONES_PER_SOURCE).map(|c| c.to_vec()).collect()
}

const CHIRP_RATE_STEP: f64 = 700.0;

/// Sweep rates in Hz/s for a chirp pool, distinct per source. Equal rates
/// would make two chirps shifted copies of each other.
pub fn chirp_rates(count: usize, seed: u64) -> Vec<f64> {
    let slots = 16 + count;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::MAX - 1));
    sample(&mut rng, slots, count)
        .into_iter()
        .map(|k| (k as f64 - slots as f64 / 2.0 + 0.5) * CHIRP_RATE_STEP)
        .collect()
}

/// Deterministic pool of `count` synthetic sources, each peak-normalised to 0.9.
pub fn synth_sources(kind: SourceKind, count: usize, seconds: f64, sample_rate: u32, seed: u64) -> Vec<Signal> {
    let n = (seconds * sample_rate as f64).round() as usize;
    let fs = sample_rate as f64;
    let tones = match kind {
        SourceKind::MultiSine => multi_sine_frequencies(count, sample_rate, seed),
        _ => Vec::new(),
    };
    let rates = match kind {
        SourceKind::Chirp => chirp_rates(count, seed),
        _ => Vec::new(),
    };
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, i as u64));
            let mut x: Vec<f64> = match kind {
                SourceKind::MultiSine => {
                    let parts: Vec<(f64, f64, f64)> = tones[i]
                        .iter()
                        .map(|&f| (f as f64, rng.gen_range(0.3..1.0), rng.gen_range(0.0..2.0 * PI)))
                        .collect();
                    (0..n)
                        .map(|t| {
                            let tt = t as f64 / fs;
                            parts.iter().map(|(f, a, p)| a * (2.0 * PI * f * tt + p).sin()).sum()
                        })
                        .collect()
                }
                SourceKind::FilteredNoise => {
                    // two-pole resonator around a random centre frequency
                    let fc = rng.gen_range(200.0..fs / 2.0 - 400.0);
                    let r: f64 = rng.gen_range(0.9..0.97);
                    let a1 = 2.0 * r * (2.0 * PI * fc / fs).cos();
                    let a2 = -r * r;
                    let (mut y1, mut y2) = (0.0, 0.0);
                    (0..n)
                        .map(|_| {
                            let e: f64 = rng.sample(StandardNormal);
                            let y = e + a1 * y1 + a2 * y2;
                            y2 = y1;
                            y1 = y;
                            y
                        })
                        .collect()
                }
                SourceKind::Chirp => {
                    let rate = rates[i];
                    let dur = n as f64 / fs;
                    let span = (rate * dur).abs();
                    let (lo, hi) = (100.0, fs / 2.0 - 200.0);
                    let mid = if hi - lo > span {
                        rng.gen_range(lo + span / 2.0..=hi - span / 2.0)
                    } else {
                        (lo + hi) / 2.0
                    };
                    let f0 = mid - rate * dur / 2.0;
                    let phase0 = rng.gen_range(0.0..2.0 * PI);
                    let am = rng.gen_range(1.0..4.0);
                    (0..n)
                        .map(|t| {
                            let tt = t as f64 / fs;
                            let phase = 2.0 * PI * (f0 * tt + 0.5 * rate * tt * tt) + phase0;
                            (0.6 + 0.4 * (2.0 * PI * am * tt).sin()) * phase.sin()
                        })
                        .collect()
                }
            };
            normalize_peak(&mut x, 0.9);
            Signal::new(x, sample_rate)
        })
        .collect()
}

pub const SPEED_RANGE: (f64, f64) = (0.95, 1.05);

/// Plain resampling by linear interpolation: output sample `i` reads the
/// input at `i·r`, so `r > 1` speeds up and raises pitch. Output length is
/// `round(T / r)`.
pub fn speed_perturb(x: &Signal, r: f64) -> Result<Signal> {
    if !(SPEED_RANGE.0 - 1e-12..=SPEED_RANGE.1 + 1e-12).contains(&r) {
        return Err(Error::SpeedOutOfRange(r));
    }
    let t = x.samples.len();
    if r == 1.0 || t == 0 {
        return Ok(x.clone());
    }
    let out_len = (t as f64 / r).round() as usize;
    let s = &x.samples;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * r;
            let j = pos.floor() as usize;
            if j + 1 >= t {
                return s[t - 1];
            }
            let frac = pos - j as f64;
            s[j] * (1.0 - frac) + s[j + 1] * frac
        })
        .collect();
    Ok(Signal::new(samples, x.sample_rate))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixSpec {
    pub sources: usize,
    pub level_db: (f64, f64),
    pub speed: (f64, f64),
    pub seed: u64,
}

impl MixSpec {
    pub fn new(sources: usize, seed: u64) -> Self {
        MixSpec {
            sources,
            level_db: (0.0, 5.0),
            speed: SPEED_RANGE,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mixture {
    pub mixture: Signal,
    pub targets: Vec<Signal>,
    /// Level of each target relative to the first, in dB.
    pub levels_db: Vec<f64>,
    pub speeds: Vec<f64>,
    /// Pool indices of the chosen sources.
    pub picks: Vec<usize>,
}

/// Draw `spec.sources` distinct sources, speed-perturb, truncate to the
/// shortest, set relative levels and sum. An optional noise signal is added
/// to the mixture only, so targets then no longer sum to it.
pub fn dynamic_mix(pool: &[Signal], spec: &MixSpec, noise: Option<&Signal>) -> Result<Mixture> {
    if !(1..=3).contains(&spec.sources) {
        return Err(Error::InvalidConfig(format!("mixtures need 1 to 3 sources, got {}", spec.sources)));
    }
    if pool.len() < spec.sources {
        return Err(Error::PoolTooSmall {
            have: pool.len(),
            need: spec.sources,
        });
    }
    let rate = pool[0].sample_rate;
    if let Some(s) = pool.iter().find(|s| s.sample_rate != rate) {
        return Err(Error::SampleRateMismatch(rate, s.sample_rate));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let picks = sample(&mut rng, pool.len(), spec.sources).into_vec();
    let mut speeds = Vec::with_capacity(spec.sources);
    let mut parts = Vec::with_capacity(spec.sources);
    for &p in &picks {
        let r = rng.gen_range(spec.speed.0..=spec.speed.1);
        speeds.push(r);
        parts.push(speed_perturb(&pool[p], r)?.samples);
    }
    let len = parts.iter().map(Vec::len).min().unwrap_or(0);
    let mut levels_db = vec![0.0];
    for _ in 1..spec.sources {
        levels_db.push(rng.gen_range(spec.level_db.0..=spec.level_db.1));
    }
    let mut targets: Vec<Vec<f64>> = parts
        .into_iter()
        .zip(&levels_db)
        .map(|(mut s, db)| {
            s.truncate(len);
            let gain = 10f64.powf(-db / 20.0) / rms(&s).max(f64::MIN_POSITIVE);
            s.iter_mut().for_each(|v| *v *= gain);
            s
        })
        .collect();
    let mut mix: Vec<f64> = (0..len).map(|i| targets.iter().map(|t| t[i]).sum()).collect();
    if let Some(n) = noise {
        if n.sample_rate != rate {
            return Err(Error::SampleRateMismatch(rate, n.sample_rate));
        }
        for (m, v) in mix.iter_mut().zip(n.samples.iter().cycle()) {
            *m += v;
        }
    }
    // one common gain keeps the additive model and the relative levels
    let peak = mix.iter().chain(targets.iter().flatten()).fold(0.0f64, |a, v| a.max(v.abs()));
    if peak > 0.0 {
        let g = 0.9 / peak;
        mix.iter_mut().for_each(|v| *v *= g);
        targets.iter_mut().flatten().for_each(|v| *v *= g);
    }
    Ok(Mixture {
        mixture: Signal::new(mix, rate),
        targets: targets.into_iter().map(|t| Signal::new(t, rate)).collect(),
        levels_db,
        speeds,
        picks,
    })
}

/// Read a 16-bit PCM mono WAV, mapping samples to `v / 32768`.
pub fn wav_read(path: &Path) -> Result<Signal> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::from(std::io::ErrorKind::NotFound)));
    }
    let reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedWav {
            field: "channels",
            value: spec.channels.to_string(),
        });
    }
    if spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::UnsupportedWav {
            field: "sample_format",
            value: "float".into(),
        });
    }
    if spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedWav {
            field: "bits_per_sample",
            value: spec.bits_per_sample.to_string(),
        });
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok(Signal::new(samples, spec.sample_rate))
}

/// Quantise one sample to 16 bits; the inverse of the `/ 32768` read map,
/// saturating at full scale.
pub fn quantize(v: f64) -> i16 {
    (v.clamp(-1.0, 1.0) * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

pub fn wav_write(path: &Path, x: &Signal) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: x.sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut w = hound::WavWriter::create(path, spec)?;
    for &v in &x.samples {
        w.write_sample(quantize(v))?;
    }
    w.finalize()?;
    Ok(())
}

/// Load every WAV listed in a newline-separated manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<Signal>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| wav_read(&base.join(l)))
        .collect()
}
