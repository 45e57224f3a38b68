//! Parameter tensors, their module groups, and per-group hyperparameter multipliers.

use std::collections::BTreeMap;
use std::fmt;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::vocab::Modality;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(into = "String", try_from = "String")]
pub enum ModuleClass {
    Embedding(Modality),
    Unembedding(Modality),
    UnembeddingNorm,
    AttnQkv,
    AttnProj,
    AttnQNorm,
    AttnKNorm,
    MlpGate,
    MlpFc1,
    MlpFc2,
    Norm1,
    Norm2,
}

impl ModuleClass {
    pub const ALL: [ModuleClass; 16] = [
        ModuleClass::Embedding(Modality::Text),
        ModuleClass::Embedding(Modality::Image),
        ModuleClass::Embedding(Modality::Audio),
        ModuleClass::Unembedding(Modality::Text),
        ModuleClass::Unembedding(Modality::Image),
        ModuleClass::Unembedding(Modality::Audio),
        ModuleClass::UnembeddingNorm,
        ModuleClass::AttnQkv,
        ModuleClass::AttnProj,
        ModuleClass::AttnQNorm,
        ModuleClass::AttnKNorm,
        ModuleClass::MlpGate,
        ModuleClass::MlpFc1,
        ModuleClass::MlpFc2,
        ModuleClass::Norm1,
        ModuleClass::Norm2,
    ];

    pub fn is_block(self) -> bool {
        !matches!(
            self,
            ModuleClass::Embedding(_) | ModuleClass::Unembedding(_) | ModuleClass::UnembeddingNorm
        )
    }

    pub fn is_norm(self) -> bool {
        matches!(
            self,
            ModuleClass::UnembeddingNorm
                | ModuleClass::AttnQNorm
                | ModuleClass::AttnKNorm
                | ModuleClass::Norm1
                | ModuleClass::Norm2
        )
    }

    pub fn name(self) -> String {
        match self {
            ModuleClass::Embedding(m) => format!("embedding_{}", m.name()),
            ModuleClass::Unembedding(m) => format!("unembedding_{}", m.name()),
            ModuleClass::UnembeddingNorm => "unembedding_norm".into(),
            ModuleClass::AttnQkv => "attn_qkv".into(),
            ModuleClass::AttnProj => "attn_proj".into(),
            ModuleClass::AttnQNorm => "attn_q_norm".into(),
            ModuleClass::AttnKNorm => "attn_k_norm".into(),
            ModuleClass::MlpGate => "mlp_gate".into(),
            ModuleClass::MlpFc1 => "mlp_fc1".into(),
            ModuleClass::MlpFc2 => "mlp_fc2".into(),
            ModuleClass::Norm1 => "norm1".into(),
            ModuleClass::Norm2 => "norm2".into(),
        }
    }
}

impl From<ModuleClass> for String {
    fn from(c: ModuleClass) -> String {
        c.name()
    }
}

impl TryFrom<String> for ModuleClass {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        ModuleClass::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| format!("unknown module class `{s}`"))
    }
}

/// Which half of the stack a block sits in, counted from the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthBucket {
    FirstHalf,
    SecondHalf,
}

impl DepthBucket {
    /// Bucket for zero-based block `index` of `n_layers`, using the 1-based
    /// depth fraction `(index + 1) / n_layers`.
    pub fn of_block(index: usize, n_layers: usize) -> Self {
        if 2 * (index + 1) <= n_layers {
            DepthBucket::FirstHalf
        } else {
            DepthBucket::SecondHalf
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamGroup {
    pub class: ModuleClass,
    pub depth: Option<DepthBucket>,
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.depth {
            None => write!(f, "{}", self.class.name()),
            Some(DepthBucket::FirstHalf) => write!(f, "{}@0-50%", self.class.name()),
            Some(DepthBucket::SecondHalf) => write!(f, "{}@50-100%", self.class.name()),
        }
    }
}

/// Multipliers on the base AdamW tuple and the init scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperMultipliers {
    pub lr: f64,
    pub wd: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps: f64,
    pub init: f64,
}

impl HyperMultipliers {
    pub const ONE: HyperMultipliers = HyperMultipliers {
        lr: 1.0,
        wd: 1.0,
        alpha1: 1.0,
        alpha2: 1.0,
        eps: 1.0,
        init: 1.0,
    };

    const fn row(lr: f64, wd: f64, alpha1: f64, alpha2: f64, eps: f64, init: f64) -> Self {
        HyperMultipliers {
            lr,
            wd,
            alpha1,
            alpha2,
            eps,
            init,
        }
    }

    pub fn product(self, other: HyperMultipliers) -> HyperMultipliers {
        HyperMultipliers {
            lr: self.lr * other.lr,
            wd: self.wd * other.wd,
            alpha1: self.alpha1 * other.alpha1,
            alpha2: self.alpha2 * other.alpha2,
            eps: self.eps * other.eps,
            init: self.init * other.init,
        }
    }

    pub fn all_positive(&self) -> bool {
        [
            self.lr,
            self.wd,
            self.alpha1,
            self.alpha2,
            self.eps,
            self.init,
        ]
        .iter()
        .all(|v| v.is_finite() && *v > 0.0)
    }
}

impl Default for HyperMultipliers {
    fn default() -> Self {
        HyperMultipliers::ONE
    }
}

/// Module-type factors plus depth factors; a block parameter's effective
/// multiplier is the product of its module factor and its depth factor.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiplierTable {
    pub modules: BTreeMap<ModuleClass, HyperMultipliers>,
    pub first_half: HyperMultipliers,
    pub second_half: HyperMultipliers,
}

impl Default for MultiplierTable {
    fn default() -> Self {
        MultiplierTable::uniform()
    }
}

impl MultiplierTable {
    pub fn uniform() -> Self {
        MultiplierTable {
            modules: BTreeMap::new(),
            first_half: HyperMultipliers::ONE,
            second_half: HyperMultipliers::ONE,
        }
    }

    /// Searched per-module multipliers for the tri-modal model.
    pub fn trimodal_preset() -> Self {
        use HyperMultipliers as H;
        use ModuleClass::*;
        let rows = [
            (
                Embedding(Modality::Audio),
                H::row(2.192, 1.009, 0.962, 1.493, 1.494, 1.826),
            ),
            (
                Embedding(Modality::Image),
                H::row(1.013, 0.864, 2.108, 0.685, 0.734, 0.554),
            ),
            (
                Embedding(Modality::Text),
                H::row(3.937, 1.593, 1.421, 1.791, 0.317, 0.379),
            ),
            (
                Unembedding(Modality::Audio),
                H::row(1.633, 1.510, 3.442, 0.594, 0.742, 3.422),
            ),
            (
                Unembedding(Modality::Image),
                H::row(1.655, 1.213, 1.929, 1.042, 0.635, 1.524),
            ),
            (
                Unembedding(Modality::Text),
                H::row(3.008, 0.737, 1.346, 0.955, 1.206, 0.341),
            ),
            (
                UnembeddingNorm,
                H::row(2.305, 0.817, 4.508, 2.740, 1.938, 2.175),
            ),
            (AttnQkv, H::row(1.714, 0.821, 0.173, 0.557, 0.391, 2.498)),
            (AttnProj, H::row(0.630, 0.354, 0.256, 0.339, 1.627, 4.732)),
            (AttnQNorm, H::row(0.535, 0.731, 1.530, 0.902, 0.848, 1.344)),
            (AttnKNorm, H::row(0.754, 0.497, 1.074, 0.822, 0.368, 0.436)),
            (MlpGate, H::row(0.489, 0.634, 1.171, 1.870, 4.913, 0.643)),
            (MlpFc1, H::row(1.271, 1.295, 1.590, 3.309, 1.415, 1.944)),
            (MlpFc2, H::row(1.405, 1.308, 2.684, 0.655, 1.790, 0.878)),
            (Norm1, H::row(1.311, 1.105, 0.282, 1.161, 1.477, 2.171)),
            (Norm2, H::row(0.899, 0.525, 1.533, 1.789, 0.712, 1.189)),
        ];
        MultiplierTable {
            modules: rows.into_iter().collect(),
            first_half: H::row(1.102, 0.725, 1.030, 3.053, 0.663, 0.997),
            second_half: H::row(0.877, 1.018, 0.911, 1.149, 2.645, 0.485),
        }
    }

    pub fn effective(&self, group: ParamGroup) -> HyperMultipliers {
        let module = self
            .modules
            .get(&group.class)
            .copied()
            .unwrap_or(HyperMultipliers::ONE);
        match group.depth {
            None => module,
            Some(DepthBucket::FirstHalf) => module.product(self.first_half),
            Some(DepthBucket::SecondHalf) => module.product(self.second_half),
        }
    }

    pub fn validate(&self) -> bool {
        self.modules.values().all(HyperMultipliers::all_positive)
            && self.first_half.all_positive()
            && self.second_half.all_positive()
    }
}

/// One named tensor. Vectors are stored as `1 x n`.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Array2<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    pub params: Vec<Param>,
}

impl ParamStore {
    pub fn push(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Array2<f64>,
    ) -> usize {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zeros_like(&self) -> Vec<Array2<f64>> {
        self.params
            .iter()
            .map(|p| Array2::zeros(p.value.raw_dim()))
            .collect()
    }

    /// Flattens all tensors in declaration order.
    pub fn flatten(&self) -> Vec<f64> {
        self.params
            .iter()
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }
}

/// Flattens a gradient list in the same order as [`ParamStore::flatten`].
pub fn flatten_grads(grads: &[Array2<f64>]) -> Vec<f64> {
    grads.iter().flat_map(|g| g.iter().copied()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn depth_buckets() {
        assert_eq!(DepthBucket::of_block(0, 2), DepthBucket::FirstHalf);
        assert_eq!(DepthBucket::of_block(1, 2), DepthBucket::SecondHalf);
        assert_eq!(DepthBucket::of_block(0, 1), DepthBucket::SecondHalf);
        let first = (0..8).filter(|&i| DepthBucket::of_block(i, 8) == DepthBucket::FirstHalf);
        assert_eq!(first.count(), 4);
    }

    #[test]
    fn effective_multiplier_is_module_times_depth() {
        let t = MultiplierTable::trimodal_preset();
        let g = ParamGroup {
            class: ModuleClass::AttnQkv,
            depth: Some(DepthBucket::SecondHalf),
        };
        let e = t.effective(g);
        assert!((e.lr - 1.714 * 0.877).abs() < 1e-12);
        assert!((e.eps - 0.391 * 2.645).abs() < 1e-12);
        let emb = ParamGroup {
            class: ModuleClass::Embedding(Modality::Text),
            depth: None,
        };
        assert_eq!(t.effective(emb).lr, 3.937);
        assert!(t.validate());
        assert_eq!(t.modules.len(), ModuleClass::ALL.len());
        assert_eq!(
            MultiplierTable::uniform().effective(g),
            HyperMultipliers::ONE
        );
    }
}
