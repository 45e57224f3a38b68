//! Synthetic tri-modal corpora and mixture sampling.
//!
//! Text is a sparse random Markov chain over the text payload range. Paired
//! samples carry a caption and a modality payload that is a fixed function of
//! the caption, so the two halves of a pair are mutually predictable.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::vocab::{
    assemble_pair, pack_documents, Modality, Sequence, TaskKind, TokenId, UnifiedVocab,
};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MixtureWeights {
    pub text: f64,
    pub image_text: f64,
    pub audio_text: f64,
}

impl Default for MixtureWeights {
    fn default() -> Self {
        MixtureWeights {
            text: 1.0 / 3.0,
            image_text: 1.0 / 3.0,
            audio_text: 1.0 / 3.0,
        }
    }
}

impl MixtureWeights {
    pub fn as_array(&self) -> [f64; 3] {
        [self.text, self.image_text, self.audio_text]
    }

    /// Weights must be non-negative and sum to one; `floor` optionally
    /// enforces a minimum share per category.
    pub fn validate(&self, floor: Option<f64>) -> Result<()> {
        let w = self.as_array();
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(MdmError::invalid("mixture weights must be finite and >= 0"));
        }
        let sum: f64 = w.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(MdmError::invalid(format!(
                "mixture weights sum to {sum}, not 1"
            )));
        }
        if let Some(f) = floor {
            if w.iter().any(|&v| v < f) {
                return Err(MdmError::invalid(format!(
                    "every mixture weight must be >= {f}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyCorpusConfig {
    pub l_star: usize,
    /// Text documents before packing.
    pub text_docs: usize,
    pub text_doc_len: [usize; 2],
    pub image_text_pairs: usize,
    pub audio_text_pairs: usize,
    pub caption_len: [usize; 2],
    pub image_len: usize,
    pub audio_len: usize,
    /// Successors per text token in the Markov chain.
    pub branching: usize,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        ToyCorpusConfig {
            l_star: 16,
            text_docs: 64,
            text_doc_len: [3, 10],
            image_text_pairs: 64,
            audio_text_pairs: 64,
            caption_len: [2, 4],
            image_len: 6,
            audio_len: 5,
            branching: 2,
        }
    }
}

/// Per-task pools of ready-made sequences.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpus {
    pub vocab: UnifiedVocab,
    pub l_star: usize,
    pub pools: [Vec<Sequence>; 3],
}

impl ToyCorpus {
    pub fn generate<R: Rng + ?Sized>(
        vocab: &UnifiedVocab,
        cfg: &ToyCorpusConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let text_range = vocab.range(Modality::Text);
        let n_text = text_range.len();
        if cfg.branching == 0
            || cfg.text_doc_len[0] == 0
            || cfg.text_doc_len[0] > cfg.text_doc_len[1]
        {
            return Err(MdmError::invalid(
                "toy corpus needs branching >= 1 and 1 <= min doc len <= max",
            ));
        }
        if cfg.caption_len[0] == 0 || cfg.caption_len[0] > cfg.caption_len[1] {
            return Err(MdmError::invalid(
                "caption lengths must satisfy 1 <= min <= max",
            ));
        }
        let successors: Vec<Vec<TokenId>> = (0..n_text)
            .map(|_| {
                (0..cfg.branching)
                    .map(|_| text_range.start + rng.random_range(0..n_text as TokenId))
                    .collect()
            })
            .collect();
        let chain = |len: usize, rng: &mut R| -> Vec<TokenId> {
            let mut tok = text_range.start + rng.random_range(0..n_text as TokenId);
            let mut out = Vec::with_capacity(len);
            for _ in 0..len {
                out.push(tok);
                tok = *successors[(tok - text_range.start) as usize]
                    .choose(rng)
                    .expect("non-empty");
            }
            out
        };

        let docs: Vec<Vec<TokenId>> = (0..cfg.text_docs)
            .map(|_| {
                let len = rng.random_range(cfg.text_doc_len[0]..=cfg.text_doc_len[1]);
                chain(len, rng)
            })
            .collect();
        let text = if docs.is_empty() {
            Vec::new()
        } else {
            pack_documents(vocab, &docs, cfg.l_star)?
        };

        let pairs =
            |task: TaskKind, n: usize, payload_len: usize, rng: &mut R| -> Result<Vec<Sequence>> {
                let m = task.primary_modality();
                let range = vocab.range(m);
                (0..n)
                    .map(|_| {
                        let clen = rng.random_range(cfg.caption_len[0]..=cfg.caption_len[1]);
                        let caption = chain(clen, rng);
                        let payload: Vec<TokenId> = (0..payload_len)
                            .map(|j| {
                                let c = (caption[j % caption.len()] - text_range.start) as usize;
                                range.start + ((3 * c + j) % range.len()) as TokenId
                            })
                            .collect();
                        assemble_pair(vocab, task, &payload, &caption, cfg.l_star)
                    })
                    .collect()
            };
        let image = pairs(
            TaskKind::ImageText,
            cfg.image_text_pairs,
            cfg.image_len,
            rng,
        )?;
        let audio = pairs(
            TaskKind::AudioText,
            cfg.audio_text_pairs,
            cfg.audio_len,
            rng,
        )?;
        Ok(ToyCorpus {
            vocab: vocab.clone(),
            l_star: cfg.l_star,
            pools: [text, image, audio],
        })
    }

    pub fn pool(&self, task: TaskKind) -> &[Sequence] {
        &self.pools[task.index()]
    }
}

/// Draws samples by picking a task iid from the mixture, then a uniform pool member.
#[derive(Clone, Debug)]
pub struct MixtureSource {
    pub corpus: ToyCorpus,
    pub weights: MixtureWeights,
    index: WeightedIndex<f64>,
}

impl MixtureSource {
    pub fn new(corpus: ToyCorpus, weights: MixtureWeights) -> Result<Self> {
        weights.validate(None)?;
        for (w, pool) in weights.as_array().iter().zip(&corpus.pools) {
            if *w > 0.0 && pool.is_empty() {
                return Err(MdmError::invalid(
                    "a category with positive weight has an empty pool",
                ));
            }
        }
        let index =
            WeightedIndex::new(weights.as_array()).map_err(|e| MdmError::invalid(e.to_string()))?;
        Ok(MixtureSource {
            corpus,
            weights,
            index,
        })
    }

    pub fn draw<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Sequence> {
        (0..n)
            .map(|_| {
                let pool = &self.corpus.pools[self.index.sample(rng)];
                pool.choose(rng).expect("pool checked non-empty").clone()
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn corpus() -> ToyCorpus {
        let vocab = UnifiedVocab::build([12, 8, 6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        ToyCorpus::generate(&vocab, &ToyCorpusConfig::default(), &mut rng).unwrap()
    }

    #[test]
    fn pools_have_fixed_length_and_correct_tasks() {
        let c = corpus();
        for task in [TaskKind::Text, TaskKind::ImageText, TaskKind::AudioText] {
            assert!(!c.pool(task).is_empty());
            for s in c.pool(task) {
                assert_eq!(s.len(), c.l_star);
                assert_eq!(s.task, task);
            }
        }
    }

    #[test]
    fn mixture_frequencies_follow_weights() {
        let w = MixtureWeights {
            text: 0.2,
            image_text: 0.5,
            audio_text: 0.3,
        };
        let src = MixtureSource::new(corpus(), w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = 20_000;
        let draws = src.draw(n, &mut rng);
        for (task, p) in [
            (TaskKind::Text, 0.2),
            (TaskKind::ImageText, 0.5),
            (TaskKind::AudioText, 0.3),
        ] {
            let f = draws.iter().filter(|s| s.task == task).count() as f64 / n as f64;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((f - p).abs() < 4.0 * sigma, "{task:?}: {f}");
        }
    }

    #[test]
    fn weights_validation() {
        assert!(MixtureWeights::default().validate(Some(0.2)).is_ok());
        let skewed = MixtureWeights {
            text: 0.7,
            image_text: 0.15,
            audio_text: 0.15,
        };
        assert!(skewed.validate(None).is_ok());
        assert!(skewed.validate(Some(0.2)).is_err());
        let bad = MixtureWeights {
            text: 0.5,
            image_text: 0.5,
            audio_text: 0.5,
        };
        assert!(bad.validate(None).is_err());
    }
}
