//! Single-item-batch training with uPIT SI-SNR loss, Adam, gradient
//! clipping and plateau learning-rate halving.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::parse_value;
use crate::datagen::{dynamic_mix, synth_sources, MixSpec, Mixture, Signal, SourceKind};
use crate::error::{Error, Result};
use crate::ndkernel::{Graph, NdArray, Tape};
use crate::objectives::{pit_from_matrix, si_snr_matrix, si_snri, OptimState, PitResult, SI_SNR_TAU};
use crate::sepmodel::Sepformer;

/// uPIT loss on a graph: the assignment is chosen on values, then
/// `−mean SI-SNR` of that assignment is built as a differentiable node.
pub fn pit_loss_graph<G: Graph>(g: &mut G, estimates: &[G::V], targets: &[&[f64]]) -> Result<(G::V, PitResult)> {
    let est: Vec<Vec<f64>> = estimates.iter().map(|e| g.value(e).data().to_vec()).collect();
    let est_refs: Vec<&[f64]> = est.iter().map(Vec::as_slice).collect();
    let pit = pit_from_matrix(si_snr_matrix(&est_refs, targets)?)?;
    let mut total: Option<G::V> = None;
    for (i, &j) in pit.perm.iter().enumerate() {
        let t = g.constant(NdArray::vector(targets[j].to_vec()));
        let s = g.si_snr(&estimates[i], &t, SI_SNR_TAU)?;
        total = Some(match total {
            Some(acc) => g.add(&acc, &s)?,
            None => s,
        });
    }
    let total = total.ok_or(Error::SourceCountMismatch {
        estimates: 0,
        targets: targets.len(),
    })?;
    let loss = g.scale(&total, -1.0 / estimates.len() as f64)?;
    Ok((loss, pit))
}

/// Halve the learning rate after `patience` evaluations without a new best.
#[derive(Debug, Clone)]
pub struct PlateauScheduler {
    pub patience: usize,
    best: f64,
    bad: usize,
    pub halvings: usize,
}

impl PlateauScheduler {
    pub fn new(patience: usize) -> Self {
        PlateauScheduler {
            patience,
            best: f64::INFINITY,
            bad: 0,
            halvings: 0,
        }
    }

    /// Record an evaluation loss; returns the new learning rate.
    pub fn observe(&mut self, loss: f64, lr: f64) -> f64 {
        if loss < self.best {
            self.best = loss;
            self.bad = 0;
            return lr;
        }
        self.bad += 1;
        if self.bad >= self.patience {
            self.bad = 0;
            self.halvings += 1;
            return lr * 0.5;
        }
        lr
    }
}

pub trait DataSource {
    fn item(&mut self, step: usize) -> Result<Mixture>;
}

/// The same mixture every step.
pub struct FixedItem(pub Mixture);

impl DataSource for FixedItem {
    fn item(&mut self, _step: usize) -> Result<Mixture> {
        Ok(self.0.clone())
    }
}

/// A fresh dynamic mix per step, seeded by step index.
pub struct DynamicMixer {
    pub pool: Vec<Signal>,
    pub sources: usize,
    pub seed: u64,
}

impl DataSource for DynamicMixer {
    fn item(&mut self, step: usize) -> Result<Mixture> {
        let seed = crate::datagen::derive_seed(self.seed, step as u64);
        dynamic_mix(&self.pool, &MixSpec::new(self.sources, seed), None)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// Steps per plateau evaluation window.
    pub eval_every: usize,
    pub seed: u64,
    pub item_seconds: f64,
    pub source_kind: SourceKind,
    pub pool_size: usize,
    /// Train on one fixed mixture instead of fresh dynamic mixes.
    pub fixed_item: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 2000,
            lr: 1.5e-4,
            clip_norm: 5.0,
            patience: 3,
            eval_every: 100,
            seed: 0,
            item_seconds: 0.5,
            source_kind: SourceKind::MultiSine,
            pool_size: 8,
            fixed_item: true,
        }
    }
}

impl TrainConfig {
    /// Set one key; `Ok(false)` when the key is not a training key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "steps" => self.steps = parse_value(key, value)?,
            "lr" => self.lr = parse_value(key, value)?,
            "clip_norm" => self.clip_norm = parse_value(key, value)?,
            "patience" => self.patience = parse_value(key, value)?,
            "eval_every" => self.eval_every = parse_value(key, value)?,
            "train_seed" => self.seed = parse_value(key, value)?,
            "item_seconds" => self.item_seconds = parse_value(key, value)?,
            "source_kind" => self.source_kind = value.parse()?,
            "pool_size" => self.pool_size = parse_value(key, value)?,
            "fixed_item" => {
                self.fixed_item = match value {
                    "true" | "1" => true,
                    "false" | "0" => false,
                    _ => return Err(Error::InvalidConfig(format!("bad value `{value}` for `{key}`"))),
                }
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Data source described by this config.
    pub fn data_source(&self, sources: usize, sample_rate: u32) -> Result<Box<dyn DataSource>> {
        let pool = synth_sources(self.source_kind, self.pool_size.max(sources), self.item_seconds, sample_rate, self.seed);
        if self.fixed_item {
            let m = dynamic_mix(&pool, &MixSpec::new(sources, self.seed), None)?;
            Ok(Box::new(FixedItem(m)))
        } else {
            Ok(Box::new(DynamicMixer {
                pool,
                sources,
                seed: self.seed,
            }))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub si_snri: f64,
    pub wall_ms: f64,
}

/// One optimisation step; returns the loss, the SI-SNRi of the estimates
/// produced before the update, and the pre-clip gradient norm.
pub fn train_step(model: &mut Sepformer, opt: &mut OptimState, item: &Mixture) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let x = tape.constant(NdArray::vector(item.mixture.samples.clone()));
    let estimates = model.forward(&mut tape, &x)?;
    let targets: Vec<&[f64]> = item.targets.iter().map(|t| t.samples.as_slice()).collect();
    let (loss, _) = pit_loss_graph(&mut tape, &estimates, &targets)?;
    let loss_value = tape.value(&loss).data()[0];
    let est: Vec<&[f64]> = estimates.iter().map(|e| tape.value(e).data()).collect();
    let improvement = si_snri(&item.mixture.samples, &est, &targets)?;
    if !loss_value.is_finite() {
        return Ok((loss_value, improvement, f64::NAN));
    }
    let grads = tape.backward(loss);
    let mut params = model.params_mut();
    let mut g: Vec<NdArray> = params
        .iter()
        .map(|(_, p)| grads.param(p).unwrap_or_else(|| NdArray::zeros(p.shape())))
        .collect();
    let mut refs: Vec<&mut crate::ndkernel::Param> = params.iter_mut().map(|(_, p)| &mut **p).collect();
    let norm = opt.step(&mut refs, &mut g);
    Ok((loss_value, improvement, norm))
}

/// Train for `cfg.steps` steps, recording one trace row per step.
pub fn train_toy(model: &mut Sepformer, data: &mut dyn DataSource, cfg: &TrainConfig) -> Result<Vec<TraceRow>> {
    let mut opt = {
        let params = model.params();
        let refs: Vec<&crate::ndkernel::Param> = params.iter().map(|(_, p)| *p).collect();
        OptimState::for_params(&refs, cfg.lr, cfg.clip_norm)
    };
    let mut sched = PlateauScheduler::new(cfg.patience.max(1));
    let mut rows = Vec::with_capacity(cfg.steps);
    let mut window = 0.0;
    for step in 0..cfg.steps {
        let t0 = Instant::now();
        let item = data.item(step)?;
        let (loss, improvement, _) = train_step(model, &mut opt, &item)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        rows.push(TraceRow {
            step,
            loss,
            lr: opt.lr,
            si_snri: improvement,
            wall_ms: t0.elapsed().as_secs_f64() * 1e3,
        });
        window += loss;
        if cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0 {
            opt.lr = sched.observe(window / cfg.eval_every as f64, opt.lr);
            window = 0.0;
        }
    }
    Ok(rows)
}

pub fn write_trace(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    if rows.is_empty() {
        w.write_record(["step", "loss", "lr", "si_snri", "wall_ms"])?;
    }
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
