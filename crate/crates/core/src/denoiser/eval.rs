//! Exact expected masked cross-entropy by enumerating every mask pattern.
//!
//! Each maskable position is masked independently with probability `m(t)`, so
//! the expectation over patterns factors through the pattern size `k`. We
//! evaluate the model once per pattern and reuse the per-size sums for any `t`.

use rayon::prelude::*;

use super::loss::masked_loss;
use super::Denoiser;
use crate::error::{MdmError, Result};
use crate::forward::{elbo_weight, CorruptedSequence, MaskSchedule};
use crate::vocab::{Sequence, UnifiedVocab};

pub const MAX_ENUM_MASKABLE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
struct SequenceSums {
    weight: f64,
    /// `sums[k]` = total mean-CE over all patterns with `k` masked positions.
    sums: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PatternTable {
    seqs: Vec<SequenceSums>,
}

impl PatternTable {
    pub fn build(
        model: &dyn Denoiser,
        vocab: &UnifiedVocab,
        corpus: &[(Sequence, f64)],
    ) -> Result<Self> {
        let total: f64 = corpus.iter().map(|(_, w)| w).sum();
        if corpus.is_empty() || !(total > 0.0) {
            return Err(MdmError::invalid(
                "evaluation corpus is empty or has zero weight",
            ));
        }
        let mut seqs = Vec::with_capacity(corpus.len());
        for (seq, w) in corpus {
            let positions = seq.maskable_positions();
            let n = positions.len();
            if n > MAX_ENUM_MASKABLE {
                return Err(MdmError::invalid(format!(
                    "{n} maskable positions exceed the enumeration limit {MAX_ENUM_MASKABLE}"
                )));
            }
            let attention = seq.attention_mask(vocab);
            let per_pattern: Vec<(usize, f64)> = (1u32..(1 << n))
                .into_par_iter()
                .map(|bits| {
                    let masked: Vec<usize> = (0..n)
                        .filter(|b| bits >> b & 1 == 1)
                        .map(|b| positions[b])
                        .collect();
                    let view = CorruptedSequence::with_mask(vocab, seq, 1.0, masked);
                    let logits = model.logits(&view.tokens, &attention)?;
                    let ce = masked_loss(&logits, &seq.tokens, &view.masked, 1.0, 0.0).diffusion;
                    Ok((bits.count_ones() as usize, ce))
                })
                .collect::<Result<_>>()?;
            let mut sums = vec![0.0; n + 1];
            for (k, ce) in per_pattern {
                sums[k] += ce;
            }
            seqs.push(SequenceSums {
                weight: w / total,
                sums,
            });
        }
        Ok(PatternTable { seqs })
    }

    /// `E[mean_{i in I_t} CE_i | I_t non-empty]` under the corpus weights.
    pub fn expected_ce(&self, t: f64, schedule: &MaskSchedule) -> f64 {
        let m = schedule.mask_fraction(t);
        let mut acc = 0.0;
        let mut norm = 0.0;
        for s in &self.seqs {
            let n = s.sums.len() - 1;
            if n == 0 {
                continue;
            }
            let p_nonempty = 1.0 - (1.0 - m).powi(n as i32);
            let e: f64 = (1..=n)
                .map(|k| m.powi(k as i32) * (1.0 - m).powi((n - k) as i32) * s.sums[k])
                .sum();
            acc += s.weight * e;
            norm += s.weight * p_nonempty;
        }
        if norm > 0.0 {
            acc / norm
        } else {
            0.0
        }
    }

    /// Mean of `w(t) * expected_ce(t)` over a time grid.
    pub fn validation_loss(
        &self,
        grid: &[f64],
        schedule: &MaskSchedule,
        epsilon: f64,
    ) -> Result<f64> {
        if grid.is_empty() {
            return Err(MdmError::invalid("empty time grid"));
        }
        let mut acc = 0.0;
        for &t in grid {
            acc += elbo_weight(t, schedule, epsilon)? * self.expected_ce(t, schedule);
        }
        Ok(acc / grid.len() as f64)
    }
}

/// The grid `{0.1, 0.2, ..., 0.9}`.
pub fn decile_grid() -> Vec<f64> {
    (1..=9).map(|k| k as f64 / 10.0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{ExactPosterior, Logits};
    use crate::vocab::{TaskKind, TokenId};
    use ndarray::Array2;

    struct Uniform(usize);
    impl Denoiser for Uniform {
        fn vocab_size(&self) -> usize {
            self.0
        }
        fn logits(&self, tokens: &[TokenId], _: &[bool]) -> Result<Logits> {
            Ok(Logits::new(Array2::zeros((tokens.len(), self.0))))
        }
    }

    #[test]
    fn uniform_model_costs_log_v_at_every_t() {
        let vocab = UnifiedVocab::build([3, 2, 2]).unwrap();
        let task = vocab.task_id(TaskKind::Text);
        let corpus = vec![(
            Sequence::from_tokens(&vocab, vec![task, 0, 1, 2]).unwrap(),
            1.0,
        )];
        let table = PatternTable::build(&Uniform(vocab.size()), &vocab, &corpus).unwrap();
        for t in decile_grid() {
            let e = table.expected_ce(t, &MaskSchedule::Linear);
            assert!((e - (vocab.size() as f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn oracle_on_two_member_corpus() {
        // [A,B] vs [A,C]: only the last position is uncertain, and only when masked
        // jointly with nothing that would reveal it. Position 1 is always A.
        let vocab = UnifiedVocab::build([3, 2, 2]).unwrap();
        let task = vocab.task_id(TaskKind::Text);
        let corpus: Vec<_> = [1, 2]
            .iter()
            .map(|&c| {
                (
                    Sequence::from_tokens(&vocab, vec![task, 0, c]).unwrap(),
                    1.0,
                )
            })
            .collect();
        let oracle = ExactPosterior::new(vocab.clone(), corpus.clone()).unwrap();
        let table = PatternTable::build(&oracle, &vocab, &corpus).unwrap();
        // Patterns with k masked of n=2: {1}: CE 0. {2}: ln 2. {1,2}: mean(0, ln 2).
        let t = 0.5;
        let m = 0.5;
        let expected =
            (m * (1.0 - m) * 2f64.ln() + m * m * 2f64.ln() / 2.0) / (1.0 - (1.0 - m) * (1.0 - m));
        assert!((table.expected_ce(t, &MaskSchedule::Linear) - expected).abs() < 1e-12);
    }
}
