//! Reverse-process models: an exact Bayes denoiser over a small enumerable
//! corpus and a toy bidirectional transformer. Both produce per-position
//! logits over the unified vocabulary.

pub mod checkpoint;
pub mod eval;
pub mod exact;
pub mod loss;
pub mod params;
pub mod transformer;

use ndarray::{Array2, ArrayView1};

use crate::error::Result;
use crate::vocab::{TokenId, TokenRange};

pub use exact::ExactPosterior;
pub use loss::{masked_loss, LossBreakdown};
pub use params::{DepthBucket, HyperMultipliers, ModuleClass, MultiplierTable, ParamGroup};
pub use transformer::{ToyTransformer, ToyTransformerConfig};

/// Position x vocabulary score matrix `h[i, v]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits {
    pub scores: Array2<f64>,
}

impl Logits {
    pub fn new(scores: Array2<f64>) -> Self {
        Logits { scores }
    }

    pub fn positions(&self) -> usize {
        self.scores.nrows()
    }

    pub fn vocab_size(&self) -> usize {
        self.scores.ncols()
    }

    pub fn row(&self, i: usize) -> ArrayView1<'_, f64> {
        self.scores.row(i)
    }

    /// Scores at position `i` restricted to one modality's payload range.
    pub fn restricted(&self, i: usize, range: TokenRange) -> ArrayView1<'_, f64> {
        self.scores
            .slice(ndarray::s![i, range.start as usize..range.end as usize])
    }

    pub fn all_finite(&self) -> bool {
        self.scores.iter().all(|v| v.is_finite())
    }
}

/// Anything that maps a (partially masked) token vector to logits.
pub trait Denoiser: Sync {
    fn vocab_size(&self) -> usize;

    /// `attention[j] == false` excludes position `j` as an attention key.
    fn logits(&self, tokens: &[TokenId], attention: &[bool]) -> Result<Logits>;
}

/// Numerically stable log-sum-exp; `-inf` when every entry is `-inf`.
pub fn logsumexp<'a, I>(values: I) -> f64
where
    I: IntoIterator<Item = &'a f64>,
    I::IntoIter: Clone,
{
    let it = values.into_iter();
    let max = it.clone().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + it.map(|&v| (v - max).exp()).sum::<f64>().ln()
}
