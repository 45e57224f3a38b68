//! Minibatch gradient variance under iid masking versus anti-masking.
//!
//! Both modes see the same number of views per batch: `B/2` base samples,
//! each corrupted twice. In iid mode the two masks are independent draws at
//! `t`; in anti-mask mode the second is the complement of the first.

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch_loss_grad;
use crate::denoiser::params::flatten_grads;
use crate::denoiser::ToyTransformer;
use crate::error::{MdmError, Result};
use crate::forward::{anti_mask_pair, corrupt, CorruptedSequence, MaskSchedule, DEFAULT_T_EPSILON};
use crate::vocab::Sequence;

pub const MIN_PROBE_BATCHES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Views per batch (even).
    pub batch_size: usize,
    pub n_batches: usize,
    pub t_grid: Vec<f64>,
    pub schedule: MaskSchedule,
    pub t_epsilon: f64,
    pub z_loss: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            batch_size: 8,
            n_batches: 1000,
            t_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            schedule: MaskSchedule::Linear,
            t_epsilon: DEFAULT_T_EPSILON,
            z_loss: 0.0,
            seed: 0,
        }
    }
}

/// Trace of the covariance of the batch gradient and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEstimate {
    pub trace: f64,
    pub std_err: f64,
}

impl TraceEstimate {
    pub fn from_samples(grads: &[Vec<f64>]) -> Self {
        let n = grads.len();
        let dim = grads.first().map_or(0, Vec::len);
        let mut mean = vec![0.0; dim];
        for g in grads {
            for (m, v) in mean.iter_mut().zip(g) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let q: Vec<f64> = grads
            .iter()
            .map(|g| g.iter().zip(&mean).map(|(v, m)| (v - m) * (v - m)).sum())
            .collect();
        let nf = n as f64;
        let trace = q.iter().sum::<f64>() / (nf - 1.0);
        let q_mean = q.iter().sum::<f64>() / nf;
        let q_var = q.iter().map(|x| (x - q_mean).powi(2)).sum::<f64>() / (nf - 1.0);
        TraceEstimate {
            trace,
            std_err: (q_var / nf).sqrt() * nf / (nf - 1.0),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeReport {
    pub t: f64,
    pub iid: TraceEstimate,
    pub anti: TraceEstimate,
    /// `(anti - iid) / sqrt(se_anti² + se_iid²)`.
    pub z: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub batch_size: usize,
    pub n_batches: usize,
    pub per_t: Vec<TimeReport>,
    /// Sums over the time grid.
    pub iid: TraceEstimate,
    pub anti: TraceEstimate,
    pub z: f64,
}

/// Upper 5% point of the standard normal.
pub const Z_05: f64 = 1.6448536269514722;

impl VarianceReport {
    /// One-sided test of `anti < iid` at the 5% level on the grid totals.
    pub fn anti_significantly_lower(&self) -> bool {
        self.z < -Z_05
    }

    pub fn anti_not_significantly_higher(&self) -> bool {
        self.z < Z_05
    }
}

fn z_score(a: TraceEstimate, b: TraceEstimate) -> f64 {
    let se = (a.std_err.powi(2) + b.std_err.powi(2)).sqrt();
    let d = a.trace - b.trace;
    if se == 0.0 {
        if d == 0.0 {
            0.0
        } else {
            d.signum() * f64::INFINITY
        }
    } else {
        d / se
    }
}

pub fn grad_variance_probe(
    model: &ToyTransformer,
    samples: &[Sequence],
    cfg: &ProbeConfig,
) -> Result<VarianceReport> {
    if cfg.n_batches < MIN_PROBE_BATCHES {
        return Err(MdmError::invalid(format!(
            "variance probe needs at least {MIN_PROBE_BATCHES} batches, got {}",
            cfg.n_batches
        )));
    }
    if cfg.batch_size < 2 || cfg.batch_size % 2 != 0 {
        return Err(MdmError::invalid("probe batch size must be even and >= 2"));
    }
    if samples.is_empty() || cfg.t_grid.is_empty() {
        return Err(MdmError::invalid("probe needs samples and a time grid"));
    }
    let vocab = &model.vocab;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut per_t = Vec::with_capacity(cfg.t_grid.len());
    for &t in &cfg.t_grid {
        let mut iid = Vec::with_capacity(cfg.n_batches);
        let mut anti = Vec::with_capacity(cfg.n_batches);
        for _ in 0..cfg.n_batches {
            let base: Vec<&Sequence> = (0..cfg.batch_size / 2)
                .map(|_| samples.choose(&mut rng).expect("non-empty"))
                .collect();
            let mut iid_views: Vec<(&Sequence, CorruptedSequence)> =
                Vec::with_capacity(cfg.batch_size);
            let mut anti_views = Vec::with_capacity(cfg.batch_size);
            for &s in &base {
                iid_views.push((s, corrupt(vocab, s, t, &cfg.schedule, &mut rng)?));
                iid_views.push((s, corrupt(vocab, s, t, &cfg.schedule, &mut rng)?));
                let (a, b) = anti_mask_pair(vocab, s, t, &cfg.schedule, &mut rng)?;
                anti_views.push((s, a));
                anti_views.push((s, b));
            }
            let (_, g) = batch_loss_grad(
                model,
                &iid_views,
                &cfg.schedule,
                cfg.t_epsilon,
                cfg.z_loss,
                1,
            )?;
            iid.push(flatten_grads(&g));
            let (_, g) = batch_loss_grad(
                model,
                &anti_views,
                &cfg.schedule,
                cfg.t_epsilon,
                cfg.z_loss,
                1,
            )?;
            anti.push(flatten_grads(&g));
        }
        let iid = TraceEstimate::from_samples(&iid);
        let anti = TraceEstimate::from_samples(&anti);
        per_t.push(TimeReport {
            t,
            iid,
            anti,
            z: z_score(anti, iid),
        });
    }
    let total = |f: fn(&TimeReport) -> TraceEstimate| TraceEstimate {
        trace: per_t.iter().map(|r| f(r).trace).sum(),
        std_err: per_t
            .iter()
            .map(|r| f(r).std_err.powi(2))
            .sum::<f64>()
            .sqrt(),
    };
    let iid = total(|r| r.iid);
    let anti = total(|r| r.anti);
    Ok(VarianceReport {
        batch_size: cfg.batch_size,
        n_batches: cfg.n_batches,
        z: z_score(anti, iid),
        per_t,
        iid,
        anti,
    })
}
