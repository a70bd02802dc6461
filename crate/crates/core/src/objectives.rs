//! Separation metrics, the permutation-invariant loss, and the optimizer.

use itertools::Itertools;

use crate::error::{Error, Result};
use crate::ndkernel::{NdArray, Param};

/// Soft-clip constant; caps SI-SNR at `10·log10(1/τ) = 30 dB`.
pub const SI_SNR_TAU: f64 = 1e-3;

/// Reporting cap for the simplified SDR when the residual vanishes.
pub const SDR_CAP_DB: f64 = 60.0;

const DB: f64 = 10.0 / std::f64::consts::LN_10;

fn zero_mean(x: &[f64]) -> Vec<f64> {
    let m = x.iter().sum::<f64>() / x.len() as f64;
    x.iter().map(|v| v - m).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Projection {
    est: Vec<f64>,
    target: Vec<f64>,
    /// ⟨ŝ, s⟩
    cross: f64,
    /// ‖s‖²
    target_energy: f64,
    /// ‖s_t‖²
    proj_energy: f64,
    /// ‖ŝ − s_t‖²
    residual_energy: f64,
}

fn project(est: &[f64], target: &[f64]) -> Result<Projection> {
    if est.len() != target.len() {
        return Err(Error::LengthMismatch(est.len(), target.len()));
    }
    let est = zero_mean(est);
    let target = zero_mean(target);
    let target_energy = dot(&target, &target);
    if target_energy == 0.0 {
        return Err(Error::UndefinedTarget);
    }
    let cross = dot(&est, &target);
    let alpha = cross / target_energy;
    let residual_energy = est
        .iter()
        .zip(&target)
        .map(|(e, s)| {
            let r = e - alpha * s;
            r * r
        })
        .sum();
    Ok(Projection {
        proj_energy: cross * cross / target_energy,
        est,
        target,
        cross,
        target_energy,
        residual_energy,
    })
}

/// SI-SNR in dB with the soft ceiling `‖s_t‖² / (‖e‖² + τ‖s_t‖²)`.
/// Both signals are zero-meaned first.
pub fn si_snr_soft(est: &[f64], target: &[f64], tau: f64) -> Result<f64> {
    let p = project(est, target)?;
    Ok(DB * (p.proj_energy / (p.residual_energy + tau * p.proj_energy)).ln())
}

pub fn si_snr(est: &[f64], target: &[f64]) -> Result<f64> {
    si_snr_soft(est, target, SI_SNR_TAU)
}

/// Gradient of [`si_snr_soft`] with respect to the estimate.
pub(crate) fn si_snr_soft_grad(est: &[f64], target: &[f64], tau: f64) -> Vec<f64> {
    let Ok(p) = project(est, target) else {
        return vec![0.0; est.len()];
    };
    let denom = p.residual_energy + tau * p.proj_energy;
    let k_proj = 2.0 * p.cross / p.target_energy;
    // d/dŝ0 [ln P − ln(E − (1−τ)P)] with dP = k_proj·s0, dE = 2·ŝ0
    let mut g: Vec<f64> = p
        .est
        .iter()
        .zip(&p.target)
        .map(|(&e, &s)| {
            let dp = k_proj * s;
            DB * (dp / p.proj_energy - (2.0 * e - (1.0 - tau) * dp) / denom)
        })
        .collect();
    let m = g.iter().sum::<f64>() / g.len() as f64;
    g.iter_mut().for_each(|v| *v -= m);
    g
}

/// Simplified SDR ("SDR-simple"): SNR after a least-squares scalar fit of
/// the target to the estimate. Not BSS-Eval SDR.
pub fn sdr_simple(est: &[f64], target: &[f64]) -> Result<f64> {
    if est.len() != target.len() {
        return Err(Error::LengthMismatch(est.len(), target.len()));
    }
    let energy = dot(target, target);
    if energy == 0.0 {
        return Err(Error::UndefinedTarget);
    }
    let beta = dot(est, target) / energy;
    let signal = beta * beta * energy;
    let noise: f64 = est
        .iter()
        .zip(target)
        .map(|(e, s)| (e - beta * s).powi(2))
        .sum();
    if noise == 0.0 {
        return Ok(SDR_CAP_DB);
    }
    Ok((DB * (signal / noise).ln()).min(SDR_CAP_DB))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PitResult {
    /// `perm[i]` is the target assigned to estimate `i`.
    pub perm: Vec<usize>,
    /// `matrix[i][j]` = metric(estimate i, target j), dB.
    pub matrix: Vec<Vec<f64>>,
    pub mean_best: f64,
}

/// Best assignment by exhaustive enumeration in lexicographic order; ties
/// keep the earliest permutation.
pub fn pit_from_matrix(matrix: Vec<Vec<f64>>) -> Result<PitResult> {
    let ns = matrix.len();
    if ns == 0 || matrix.iter().any(|r| r.len() != ns) {
        return Err(Error::SourceCountMismatch {
            estimates: ns,
            targets: matrix.first().map_or(0, Vec::len),
        });
    }
    if ns > 3 {
        return Err(Error::TooManySources(ns));
    }
    let mut best: Option<(Vec<usize>, f64)> = None;
    for perm in (0..ns).permutations(ns) {
        let mean = perm.iter().enumerate().map(|(i, &j)| matrix[i][j]).sum::<f64>() / ns as f64;
        if best.as_ref().is_none_or(|(_, b)| mean > *b) {
            best = Some((perm, mean));
        }
    }
    let (perm, mean_best) = best.expect("at least one permutation");
    Ok(PitResult {
        perm,
        matrix,
        mean_best,
    })
}

pub fn si_snr_matrix(estimates: &[&[f64]], targets: &[&[f64]]) -> Result<Vec<Vec<f64>>> {
    if estimates.len() != targets.len() {
        return Err(Error::SourceCountMismatch {
            estimates: estimates.len(),
            targets: targets.len(),
        });
    }
    estimates
        .iter()
        .map(|e| targets.iter().map(|t| si_snr(e, t)).collect())
        .collect()
}

/// Utterance-level permutation-invariant loss: `−max_π mean SI-SNR`.
pub fn pit_loss(estimates: &[&[f64]], targets: &[&[f64]]) -> Result<(f64, PitResult)> {
    let pit = pit_from_matrix(si_snr_matrix(estimates, targets)?)?;
    Ok((-pit.mean_best, pit))
}

/// Mean improvement of `metric` over the mixture-as-estimate baseline under
/// the SI-SNR PIT assignment.
pub fn improvement(
    mixture: &[f64],
    estimates: &[&[f64]],
    targets: &[&[f64]],
    metric: fn(&[f64], &[f64]) -> Result<f64>,
) -> Result<f64> {
    let (_, pit) = pit_loss(estimates, targets)?;
    let mut total = 0.0;
    for (i, &j) in pit.perm.iter().enumerate() {
        total += metric(estimates[i], targets[j])? - metric(mixture, targets[j])?;
    }
    Ok(total / estimates.len() as f64)
}

pub fn si_snri(mixture: &[f64], estimates: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
    improvement(mixture, estimates, targets, si_snr)
}

pub fn sdri_simple(mixture: &[f64], estimates: &[&[f64]], targets: &[&[f64]]) -> Result<f64> {
    improvement(mixture, estimates, targets, sdr_simple)
}

/// Rescale `grads` in place so their joint l2-norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [NdArray], max_norm: f64) -> f64 {
    let norm = grads.iter().map(|g| g.dot(g)).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Adam state for an ordered parameter list.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip_norm: f64,
    pub step: u64,
    first: Vec<NdArray>,
    second: Vec<NdArray>,
}

impl OptimState {
    pub fn new(shapes: &[&[usize]], lr: f64, clip_norm: f64) -> Self {
        OptimState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm,
            step: 0,
            first: shapes.iter().map(|s| NdArray::zeros(s)).collect(),
            second: shapes.iter().map(|s| NdArray::zeros(s)).collect(),
        }
    }

    pub fn for_params(params: &[&Param], lr: f64, clip_norm: f64) -> Self {
        let shapes: Vec<&[usize]> = params.iter().map(|p| p.shape()).collect();
        OptimState::new(&shapes, lr, clip_norm)
    }

    /// Clip the joint gradient norm to `clip_norm`, then apply one
    /// bias-corrected Adam update. Returns the pre-clip gradient norm.
    pub fn step(&mut self, params: &mut [&mut Param], grads: &mut [NdArray]) -> f64 {
        assert_eq!(params.len(), self.first.len());
        assert_eq!(grads.len(), self.first.len());
        let norm = clip_grad_norm(grads, self.clip_norm);
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, p) in params.iter_mut().enumerate() {
            let g = grads[i].data();
            let m = self.first[i].data_mut();
            for (mv, gv) in m.iter_mut().zip(g) {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
            }
            let v = self.second[i].data_mut();
            for (vv, gv) in v.iter_mut().zip(g) {
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
            }
            let (m, v) = (self.first[i].data(), self.second[i].data());
            for ((w, mv), vv) in p.value_mut().data_mut().iter_mut().zip(m).zip(v) {
                let mhat = mv / c1;
                let vhat = vv / c2;
                *w -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        norm
    }
}
