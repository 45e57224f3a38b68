//! Training loop: compute-matched batch construction (plain or anti-masked),
//! ELBO-weighted masked loss with z-loss, AdamW updates and run records.

pub mod adamw;
pub mod data;
pub mod probe;

use std::fs::OpenOptions;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::denoiser::{LossBreakdown, ToyTransformer};
use crate::error::{MdmError, Result};
use crate::forward::{
    anti_mask_pair, corrupt, sample_time, CorruptedSequence, MaskDraw, MaskSchedule,
    DEFAULT_T_EPSILON,
};
use crate::vocab::Sequence;

pub use adamw::{adamw_step, AdamWHyper, AdamWState, LrSchedule};
pub use data::{MixtureSource, MixtureWeights, ToyCorpus, ToyCorpusConfig};
pub use probe::{grad_variance_probe, ProbeConfig, VarianceReport};

/// Default z-loss coefficient.
pub const DEFAULT_Z_LOSS: f64 = 1e-5;

/// ELBO weight with the time clamped into `[ε, 1]`.
///
/// Complement views can land below ε; their weight is taken at ε.
pub fn view_weight(t: f64, schedule: &MaskSchedule, epsilon: f64) -> f64 {
    let t = t.clamp(epsilon, 1.0);
    schedule.mask_fraction_rate(t) / schedule.mask_fraction(t)
}

/// One slot of a batch: a unique sample, or the complement of the slot before it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchItem {
    pub sample: usize,
    pub complement: bool,
}

/// Builds `steps` batches of `batch_size` slots over `n_unique` samples.
///
/// Anti-mask mode emits each sample followed by its complement. Each epoch is a
/// (optionally shuffled) pass over the unique samples; the stream is cut after
/// `steps * batch_size` slots.
pub fn batch_schedule<R: Rng + ?Sized>(
    n_unique: usize,
    batch_size: usize,
    steps: usize,
    anti_mask: bool,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<Vec<BatchItem>>> {
    if batch_size == 0 || n_unique == 0 {
        return Err(MdmError::invalid(
            "batch size and sample count must be positive",
        ));
    }
    if anti_mask && batch_size % 2 != 0 {
        return Err(MdmError::invalid("anti-masking needs an even batch size"));
    }
    let needed = steps * batch_size;
    let mut stream = Vec::with_capacity(needed + 2 * n_unique);
    while stream.len() < needed {
        let mut order: Vec<usize> = (0..n_unique).collect();
        if shuffle {
            order.shuffle(rng);
        }
        for s in order {
            stream.push(BatchItem {
                sample: s,
                complement: false,
            });
            if anti_mask {
                stream.push(BatchItem {
                    sample: s,
                    complement: true,
                });
            }
        }
    }
    stream.truncate(needed);
    Ok(stream
        .chunks(batch_size)
        .map(<[BatchItem]>::to_vec)
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Token budget D; the run takes `floor(D / (B L))` steps.
    pub tokens: usize,
    pub anti_mask: bool,
    /// Passes over the unique samples.
    pub epochs: usize,
    pub schedule: MaskSchedule,
    pub t_epsilon: f64,
    pub z_loss: f64,
    pub hyper: AdamWHyper,
    pub shuffle: bool,
    /// Sequential micro-batches per optimizer step.
    pub grad_accum: usize,
    pub seed: u64,
    pub val_samples: usize,
    pub val_grid: Vec<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            tokens: 16 * 16 * 200,
            anti_mask: false,
            epochs: 1,
            schedule: MaskSchedule::Linear,
            t_epsilon: DEFAULT_T_EPSILON,
            z_loss: DEFAULT_Z_LOSS,
            hyper: AdamWHyper::default(),
            shuffle: true,
            grad_accum: 1,
            seed: 0,
            val_samples: 64,
            val_grid: crate::denoiser::eval::decile_grid(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hyper.validate()?;
        self.schedule.validate()?;
        if self.epochs == 0 || self.grad_accum == 0 || self.batch_size % self.grad_accum != 0 {
            return Err(MdmError::invalid(
                "epochs and grad_accum must be >= 1 and grad_accum must divide the batch size",
            ));
        }
        if self.anti_mask && self.batch_size % 2 != 0 {
            return Err(MdmError::invalid("anti-masking needs an even batch size"));
        }
        if !(self.t_epsilon > 0.0 && self.t_epsilon < 1.0) || self.z_loss < 0.0 {
            return Err(MdmError::invalid(
                "t_epsilon must lie in (0, 1) and z_loss must be >= 0",
            ));
        }
        if self
            .val_grid
            .iter()
            .any(|&t| !(t > self.t_epsilon && t <= 1.0))
        {
            return Err(MdmError::invalid(
                "validation times must lie in (t_epsilon, 1]",
            ));
        }
        Ok(())
    }

    /// Steps `S = floor(D / (B L))`.
    pub fn steps(&self, seq_len: usize) -> usize {
        self.tokens / (self.batch_size * seq_len)
    }

    /// Unique samples needed so that `epochs` passes cover `S * B` slots.
    pub fn unique_samples(&self, seq_len: usize) -> usize {
        let views = if self.anti_mask { 2 } else { 1 };
        (self.steps(seq_len) * self.batch_size).div_ceil(views * self.epochs)
    }
}

/// One finished run, as appended to a JSONL log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub n_nonembed: usize,
    pub n_total: usize,
    pub d_tokens: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub steps: usize,
    pub final_loss: f64,
    pub seed: u64,
    pub schedule: String,
    pub lr_schedule: LrSchedule,
    pub warmup_steps: usize,
    pub anti_mask: bool,
    pub epochs: usize,
    pub unique_samples: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tag: Option<String>,
}

impl RunRecord {
    /// Critical-batch conversion `D / (L S)`.
    pub fn batch_for_steps(&self, steps: f64) -> f64 {
        self.d_tokens as f64 / (self.seq_len as f64 * steps)
    }
}

pub fn append_jsonl(path: &Path, record: &RunRecord) -> Result<()> {
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    writeln!(f, "{}", serde_json::to_string(record)?)?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<RunRecord>> {
    let f = std::fs::File::open(path)?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(f).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| MdmError::Format(format!("{}:{}: {e}", path.display(), n + 1)))?,
        );
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: RunRecord,
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
}

/// Loss and gradient for one corrupted view, weighted at the view's own time.
pub fn view_loss_grad(
    model: &ToyTransformer,
    seq: &Sequence,
    view: &CorruptedSequence,
    schedule: &MaskSchedule,
    epsilon: f64,
    z_loss: f64,
) -> Result<(LossBreakdown, Vec<Array2<f64>>)> {
    let attention = seq.attention_mask(&model.vocab);
    let w = view_weight(view.t, schedule, epsilon);
    model.loss_and_grad(
        &view.tokens,
        &attention,
        &seq.tokens,
        &view.masked,
        w,
        z_loss,
    )
}

/// Mean loss and mean gradient over a set of views, summed in a fixed order.
pub fn batch_loss_grad(
    model: &ToyTransformer,
    views: &[(&Sequence, CorruptedSequence)],
    schedule: &MaskSchedule,
    epsilon: f64,
    z_loss: f64,
    grad_accum: usize,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut grads = model.store.zeros_like();
    let mut loss = 0.0;
    let chunk = views.len().div_ceil(grad_accum.max(1)).max(1);
    for micro in views.chunks(chunk) {
        let parts: Vec<(LossBreakdown, Vec<Array2<f64>>)> = micro
            .par_iter()
            .map(|(seq, view)| view_loss_grad(model, seq, view, schedule, epsilon, z_loss))
            .collect::<Result<_>>()?;
        for (l, g) in parts {
            loss += l.total;
            for (acc, gi) in grads.iter_mut().zip(g) {
                *acc += &gi;
            }
        }
    }
    let n = views.len() as f64;
    for g in &mut grads {
        *g /= n;
    }
    Ok((loss / n, grads))
}

/// Weighted masked loss averaged over a frozen validation set and a fixed time grid.
///
/// Each sample owns one seeded mask draw shared by every grid time, so the
/// result depends only on the parameters, the samples and `draw_seed`.
pub fn validation_loss(
    model: &ToyTransformer,
    samples: &[Sequence],
    schedule: &MaskSchedule,
    grid: &[f64],
    epsilon: f64,
    draw_seed: u64,
) -> Result<f64> {
    if samples.is_empty() || grid.is_empty() {
        return Err(MdmError::invalid(
            "validation needs samples and a non-empty time grid",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(draw_seed);
    let draws: Vec<MaskDraw> = samples
        .iter()
        .map(|s| MaskDraw::sample(s.len(), &mut rng))
        .collect();
    let per_sample: Vec<f64> = samples
        .par_iter()
        .zip(draws.par_iter())
        .map(|(seq, draw)| {
            let attention = seq.attention_mask(&model.vocab);
            let mut acc = 0.0;
            for &t in grid {
                let view = draw.apply(&model.vocab, seq, t, schedule)?;
                if view.masked.is_empty() {
                    continue;
                }
                let logits = crate::denoiser::Denoiser::logits(model, &view.tokens, &attention)?;
                let w = view_weight(t, schedule, epsilon);
                acc += crate::denoiser::masked_loss(&logits, &seq.tokens, &view.masked, w, 0.0)
                    .diffusion;
            }
            Ok(acc / grid.len() as f64)
        })
        .collect::<Result<_>>()?;
    Ok(per_sample.iter().sum::<f64>() / samples.len() as f64)
}

/// Trains `model` in place on samples drawn from `source`.
pub fn train(
    model: &mut ToyTransformer,
    source: &MixtureSource,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let seq_len = source.corpus.l_star;
    let steps = cfg.steps(seq_len);
    if steps == 0 {
        return Err(MdmError::invalid(format!(
            "token budget {} is smaller than one batch of {} x {}",
            cfg.tokens, cfg.batch_size, seq_len
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_unique = cfg.unique_samples(seq_len);
    let samples = source.draw(n_unique, &mut rng);
    let val_set = source.draw(cfg.val_samples.max(1), &mut rng);
    let val_seed = rng.random::<u64>();
    let batches = batch_schedule(
        n_unique,
        cfg.batch_size,
        steps,
        cfg.anti_mask,
        cfg.shuffle,
        &mut rng,
    )?;

    let mut state = AdamWState::new(&model.store);
    let mut losses = Vec::with_capacity(steps);
    for (k, batch) in batches.iter().enumerate() {
        let views = build_views(model, &samples, batch, cfg, &mut rng)?;
        let (loss, grads) = batch_loss_grad(
            model,
            &views,
            &cfg.schedule,
            cfg.t_epsilon,
            cfg.z_loss,
            cfg.grad_accum,
        )?;
        if !loss.is_finite() {
            return Err(MdmError::Numerical(format!(
                "training loss became {loss} at step {}",
                k + 1
            )));
        }
        let factor = cfg.hyper.lr_factor(k + 1, steps);
        adamw_step(
            &mut model.store,
            &grads,
            &mut state,
            &cfg.hyper,
            k + 1,
            factor,
        )?;
        losses.push(loss);
    }

    let final_loss = validation_loss(
        model,
        &val_set,
        &cfg.schedule,
        &cfg.val_grid,
        cfg.t_epsilon,
        val_seed,
    )?;
    let record = RunRecord {
        n_nonembed: model.config.non_embedding_params(),
        n_total: model.config.total_params(&model.vocab),
        d_tokens: cfg.batch_size * steps * seq_len,
        batch_size: cfg.batch_size,
        seq_len,
        steps,
        final_loss,
        seed: cfg.seed,
        schedule: cfg.schedule.to_string(),
        lr_schedule: cfg.hyper.schedule,
        warmup_steps: cfg.hyper.warmup_for(steps),
        anti_mask: cfg.anti_mask,
        epochs: cfg.epochs,
        unique_samples: n_unique,
        tag: None,
    };
    Ok(TrainOutcome { record, losses })
}

fn build_views<'a>(
    model: &ToyTransformer,
    samples: &'a [Sequence],
    batch: &[BatchItem],
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(&'a Sequence, CorruptedSequence)>> {
    let vocab = &model.vocab;
    let mut views = Vec::with_capacity(batch.len());
    let mut i = 0;
    while i < batch.len() {
        let seq = &samples[batch[i].sample];
        let t = sample_time(cfg.t_epsilon, rng);
        let pair_follows = batch
            .get(i + 1)
            .is_some_and(|next| next.complement && next.sample == batch[i].sample);
        if pair_follows {
            let (a, b) = anti_mask_pair(vocab, seq, t, &cfg.schedule, rng)?;
            views.push((seq, a));
            views.push((seq, b));
            i += 2;
        } else {
            views.push((seq, corrupt(vocab, seq, t, &cfg.schedule, rng)?));
            i += 1;
        }
    }
    Ok(views)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(batches: &[Vec<BatchItem>]) -> Vec<Vec<(usize, bool)>> {
        batches
            .iter()
            .map(|b| b.iter().map(|x| (x.sample, x.complement)).collect())
            .collect()
    }

    #[test]
    fn anti_mask_stream_pairs_each_sample_with_its_complement() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch_schedule(4, 4, 2, true, false, &mut rng).unwrap();
        assert_eq!(
            ids(&b),
            vec![
                vec![(0, false), (0, true), (1, false), (1, true)],
                vec![(2, false), (2, true), (3, false), (3, true)],
            ]
        );
    }

    #[test]
    fn baseline_two_epochs_repeats_samples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = batch_schedule(8, 4, 4, false, false, &mut rng).unwrap();
        let flat: Vec<usize> = b.iter().flatten().map(|x| x.sample).collect();
        assert_eq!(flat, vec![0, 1, 2, 3, 4, 5, 6, 7, 0, 1, 2, 3, 4, 5, 6, 7]);
    }

    #[test]
    fn shuffled_epochs_each_cover_every_sample_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = batch_schedule(8, 4, 4, false, true, &mut rng).unwrap();
        let flat: Vec<usize> = b.iter().flatten().map(|x| x.sample).collect();
        for epoch in flat.chunks(8) {
            let mut e = epoch.to_vec();
            e.sort();
            assert_eq!(e, (0..8).collect::<Vec<_>>());
        }
    }

    #[test]
    fn odd_batch_rejected_for_anti_mask() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(batch_schedule(4, 3, 1, true, false, &mut rng).is_err());
    }

    #[test]
    fn step_and_unique_accounting() {
        let base = TrainConfig {
            batch_size: 4,
            tokens: 8 * 2 * 10,
            epochs: 2,
            ..Default::default()
        };
        assert_eq!(base.steps(10), 4);
        assert_eq!(base.unique_samples(10), 8);
        let anti = TrainConfig {
            anti_mask: true,
            epochs: 1,
            ..base
        };
        assert_eq!(anti.steps(10), 4);
        assert_eq!(anti.unique_samples(10), 8);
    }

    #[test]
    fn linear_view_weight_is_inverse_time_with_floor() {
        let s = MaskSchedule::Linear;
        assert_eq!(view_weight(0.25, &s, 1e-3), 4.0);
        assert_eq!(view_weight(0.0, &s, 1e-3), 1000.0);
    }
}
