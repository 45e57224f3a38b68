//! Bayes denoiser over a small weighted corpus, by enumeration.

use ndarray::Array2;

use super::{Denoiser, Logits};
use crate::error::{MdmError, Result};
use crate::vocab::{Sequence, TokenId, UnifiedVocab};

pub const MAX_EXACT_CORPUS: usize = 10_000;

#[derive(Clone, Debug)]
pub struct ExactPosterior {
    vocab: UnifiedVocab,
    corpus: Vec<Sequence>,
    /// Normalized to sum to one.
    weights: Vec<f64>,
}

impl ExactPosterior {
    pub fn new(vocab: UnifiedVocab, corpus: Vec<(Sequence, f64)>) -> Result<Self> {
        if corpus.is_empty() || corpus.len() > MAX_EXACT_CORPUS {
            return Err(MdmError::invalid(format!(
                "exact posterior needs 1..={MAX_EXACT_CORPUS} sequences, got {}",
                corpus.len()
            )));
        }
        let len = corpus[0].0.len();
        if corpus.iter().any(|(s, _)| s.len() != len) {
            return Err(MdmError::invalid("corpus sequences must share one length"));
        }
        if corpus.iter().any(|(_, w)| !(w.is_finite() && *w >= 0.0)) {
            return Err(MdmError::invalid(
                "corpus weights must be finite and non-negative",
            ));
        }
        let total: f64 = corpus.iter().map(|(_, w)| w).sum();
        if !(total > 0.0) {
            return Err(MdmError::invalid("corpus weights sum to zero"));
        }
        let (corpus, weights) = corpus.into_iter().map(|(s, w)| (s, w / total)).unzip();
        Ok(ExactPosterior {
            vocab,
            corpus,
            weights,
        })
    }

    pub fn uniform(vocab: UnifiedVocab, corpus: Vec<Sequence>) -> Result<Self> {
        Self::new(vocab, corpus.into_iter().map(|s| (s, 1.0)).collect())
    }

    pub fn corpus(&self) -> impl Iterator<Item = (&Sequence, f64)> {
        self.corpus.iter().zip(self.weights.iter().copied())
    }

    pub fn vocab(&self) -> &UnifiedVocab {
        &self.vocab
    }

    /// A corpus member agrees with `tokens` when every unmasked token matches and
    /// every masked position is a maskable position of the same modality.
    pub fn is_consistent(&self, member: &Sequence, tokens: &[TokenId]) -> bool {
        member.len() == tokens.len()
            && tokens.iter().enumerate().all(|(i, &tok)| {
                if self.vocab.is_mask(tok) {
                    member.maskable[i] && tok == self.vocab.mask_id(member.modality[i])
                } else {
                    tok == member.tokens[i]
                }
            })
    }

    /// Log of the per-position conditional marginals; impossible tokens get `-inf`.
    pub fn posterior(&self, tokens: &[TokenId]) -> Result<Logits> {
        let v = self.vocab.size();
        let mut probs = Array2::<f64>::zeros((tokens.len(), v));
        let mut mass = 0.0;
        for (member, w) in self.corpus() {
            if w > 0.0 && self.is_consistent(member, tokens) {
                mass += w;
                for (i, &tok) in member.tokens.iter().enumerate() {
                    probs[[i, tok as usize]] += w;
                }
            }
        }
        if mass == 0.0 {
            return Err(MdmError::NoSupport(
                "no corpus member is consistent with the observed tokens".into(),
            ));
        }
        Ok(Logits::new(probs.mapv(|p| (p / mass).ln())))
    }
}

impl Denoiser for ExactPosterior {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn logits(&self, tokens: &[TokenId], _attention: &[bool]) -> Result<Logits> {
        self.posterior(tokens)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Modality, TaskKind};

    fn setup() -> (UnifiedVocab, ExactPosterior) {
        let vocab = UnifiedVocab::build([4, 2, 2]).unwrap();
        let task = vocab.task_id(TaskKind::Text);
        let (a, b, c) = (0, 1, 2);
        let corpus = vec![
            Sequence::from_tokens(&vocab, vec![task, a, b]).unwrap(),
            Sequence::from_tokens(&vocab, vec![task, a, c]).unwrap(),
        ];
        let ep = ExactPosterior::uniform(vocab.clone(), corpus).unwrap();
        (vocab, ep)
    }

    #[test]
    fn masked_second_token_splits_evenly() {
        let (vocab, ep) = setup();
        let mask = vocab.mask_id(Modality::Text);
        let l = ep
            .posterior(&[vocab.task_id(TaskKind::Text), 0, mask])
            .unwrap();
        assert!((l.scores[[2, 1]].exp() - 0.5).abs() < 1e-12);
        assert!((l.scores[[2, 2]].exp() - 0.5).abs() < 1e-12);
        assert_eq!(l.scores[[2, 3]], f64::NEG_INFINITY);
    }

    #[test]
    fn observed_token_pins_the_other_position() {
        let (vocab, ep) = setup();
        let mask = vocab.mask_id(Modality::Text);
        let l = ep
            .posterior(&[vocab.task_id(TaskKind::Text), mask, 1])
            .unwrap();
        assert_eq!(l.scores[[1, 0]], 0.0);
    }

    #[test]
    fn fully_masked_gives_marginals() {
        let (vocab, ep) = setup();
        let mask = vocab.mask_id(Modality::Text);
        let l = ep
            .posterior(&[vocab.task_id(TaskKind::Text), mask, mask])
            .unwrap();
        assert_eq!(l.scores[[1, 0]], 0.0);
        assert!((l.scores[[2, 2]].exp() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_observation_has_no_support() {
        let (vocab, ep) = setup();
        let r = ep.posterior(&[vocab.task_id(TaskKind::Text), 3, 1]);
        assert!(matches!(r, Err(MdmError::NoSupport(_))));
    }

    #[test]
    fn weights_are_respected() {
        let vocab = UnifiedVocab::build([4, 2, 2]).unwrap();
        let task = vocab.task_id(TaskKind::Text);
        let corpus = vec![
            (Sequence::from_tokens(&vocab, vec![task, 0]).unwrap(), 3.0),
            (Sequence::from_tokens(&vocab, vec![task, 1]).unwrap(), 1.0),
        ];
        let ep = ExactPosterior::new(vocab.clone(), corpus).unwrap();
        let l = ep
            .posterior(&[task, vocab.mask_id(Modality::Text)])
            .unwrap();
        assert!((l.scores[[1, 0]].exp() - 0.75).abs() < 1e-12);
    }
}
