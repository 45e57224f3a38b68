//! Experiment configuration: TOML with one table per concern. Every key has a
//! desk-scale default and unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use mdm_core::denoiser::{MultiplierTable, ToyTransformerConfig};
use mdm_core::sampler::SamplerConfig;
use mdm_core::scaling::{FitOptions, FlopsModel, LawForm, LawParams};
use mdm_core::sde::DriftHorizonFit;
use mdm_core::trainer::{MixtureWeights, ProbeConfig, ToyCorpusConfig, TrainConfig};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MultiplierPreset {
    #[default]
    Trimodal,
    Uniform,
}

impl MultiplierPreset {
    pub fn table(self) -> MultiplierTable {
        match self {
            MultiplierPreset::Trimodal => MultiplierTable::trimodal_preset(),
            MultiplierPreset::Uniform => MultiplierTable::uniform(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VocabSection {
    /// Payload sizes `[text, image, audio]`.
    pub sizes: [usize; 3],
}

impl Default for VocabSection {
    fn default() -> Self {
        VocabSection {
            sizes: [64, 32, 24],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorruptSection {
    pub t_grid: Vec<f64>,
    /// Also emit the complement of every view.
    pub anti_mask: bool,
    /// Corpus sequences used when no input file is given.
    pub count: usize,
}

impl Default for CorruptSection {
    fn default() -> Self {
        CorruptSection {
            t_grid: vec![0.1, 0.3, 0.5, 0.7, 0.9],
            anti_mask: false,
            count: 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SdeSection {
    /// Base token horizon.
    pub d_base: f64,
    /// Base batch size in sequences.
    pub b_base: f64,
    pub gamma: f64,
}

impl Default for SdeSection {
    fn default() -> Self {
        SdeSection {
            d_base: 16.0 * 16.0 * 200.0,
            b_base: 16.0,
            gamma: 0.44,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BcritSection {
    /// Relative plateau tolerance.
    pub delta: f64,
}

impl Default for BcritSection {
    fn default() -> Self {
        BcritSection { delta: 0.005 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GammaSweepSection {
    /// Law used to synthesize observations when no points file is given.
    pub planted: DriftHorizonFit,
    pub d_values: Vec<f64>,
    pub seq_len: f64,
    pub gammas: Vec<f64>,
    /// Multiplicative noise on synthesized losses.
    pub noise: f64,
    pub restarts: usize,
}

impl Default for GammaSweepSection {
    fn default() -> Self {
        GammaSweepSection {
            planted: DriftHorizonFit {
                e: 1.8,
                big_a: 40.0,
                big_b: 12.0,
                alpha: 0.18,
                beta: 0.23,
            },
            d_values: vec![1e8, 1e9, 1e10, 1e11],
            seq_len: 1024.0,
            gammas: (0..=10).map(|i| i as f64 / 10.0).collect(),
            noise: 0.002,
            restarts: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSection {
    pub form: LawForm,
    pub params: LawParams,
    pub points: usize,
    pub noise: f64,
    /// Sizes and token counts, in billions.
    pub n_range: [f64; 2],
    pub d_range: [f64; 2],
}

impl Default for PlantedSection {
    fn default() -> Self {
        PlantedSection {
            form: LawForm::Kaplan,
            params: LawParams::new(1.2, 0.5, 300.0, 0.14, 0.17),
            points: 200,
            noise: 0.005,
            n_range: [1e-2, 1e1],
            d_range: [1e0, 1e4],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingSection {
    pub fit: FitOptions,
    pub planted: PlantedSection,
}

impl Default for ScalingSection {
    fn default() -> Self {
        ScalingSection {
            fit: FitOptions::default(),
            planted: PlantedSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FrontierSection {
    pub flops: FlopsModel,
    /// Compute budgets in FLOPs.
    pub budgets: Vec<f64>,
    pub levels: Vec<f64>,
    /// Size range in billions for tables and contours.
    pub n_range: [f64; 2],
    pub grid: usize,
}

impl Default for FrontierSection {
    fn default() -> Self {
        FrontierSection {
            flops: FlopsModel::SixN,
            budgets: (0..9).map(|i| 10f64.powf(18.0 + 0.5 * i as f64)).collect(),
            levels: vec![2.0, 2.2, 2.5, 3.0],
            n_range: [1e-2, 1e2],
            grid: 41,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seeds corpus generation and model initialization.
    pub seed: u64,
    /// Multiplier table used for both initialization and the optimizer.
    pub multipliers: MultiplierPreset,
    pub vocab: VocabSection,
    pub model: ToyTransformerConfig,
    pub corpus: ToyCorpusConfig,
    pub mixture: MixtureWeights,
    pub train: TrainConfig,
    /// Per-task presets apply when absent.
    pub sampler: Option<SamplerConfig>,
    pub probe: ProbeConfig,
    pub corrupt: CorruptSection,
    pub sde: SdeSection,
    pub bcrit: BcritSection,
    pub gamma_sweep: GammaSweepSection,
    pub scaling: ScalingSection,
    pub frontier: FrontierSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 0,
            multipliers: MultiplierPreset::Trimodal,
            vocab: VocabSection::default(),
            model: ToyTransformerConfig::default(),
            corpus: ToyCorpusConfig::default(),
            mixture: MixtureWeights::default(),
            train: TrainConfig::default(),
            sampler: None,
            probe: ProbeConfig::default(),
            corrupt: CorruptSection::default(),
            sde: SdeSection::default(),
            bcrit: BcritSection::default(),
            gamma_sweep: GammaSweepSection::default(),
            scaling: ScalingSection::default(),
            frontier: FrontierSection::default(),
        }
    }
}

impl ExperimentConfig {
    /// Parses `text`, applies `section.key=value` overrides, then deserializes.
    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: toml::Table = text
            .parse()
            .map_err(|e| CliError::Usage(format!("config: {e}")))?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Usage(format!("config: {e}")))
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml(&text, overrides)
    }

    /// Hex SHA-256 of the effective configuration's canonical JSON.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    /// Copies the shared multiplier preset into the optimizer settings.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.hyper.multipliers = self.multipliers.table();
        t
    }
}

fn apply_override(doc: &mut toml::Table, item: &str) -> Result<(), CliError> {
    let (path, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("override `{item}` is not key=value")))?;
    let value: toml::Value = format!("v = {}", raw.trim())
        .parse::<toml::Table>()
        .map(|mut t| t.remove("v").expect("parsed key"))
        .unwrap_or_else(|_| toml::Value::String(raw.trim().to_string()));
    let keys: Vec<&str> = path.trim().split('.').collect();
    let (last, parents) = keys.split_last().expect("split yields one item");
    let mut table = doc;
    for k in parents {
        let entry = table
            .entry(k.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry.as_table_mut().ok_or_else(|| {
            CliError::Usage(format!("override path `{path}` crosses a non-table key"))
        })?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(
            ExperimentConfig::from_toml("", &[]).unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml("[train]\nbatch = 4\n", &[]),
            Err(CliError::Usage(_))
        ));
        assert!(ExperimentConfig::from_toml("colour = 1\n", &[]).is_err());
    }

    #[test]
    fn overrides_reach_nested_tables() {
        let c = ExperimentConfig::from_toml(
            "[train]\nbatch_size = 8\n",
            &[
                "train.hyper.lr=0.002".into(),
                "seed=7".into(),
                "train.schedule=cosine".into(),
            ],
        )
        .unwrap();
        assert_eq!(c.train.batch_size, 8);
        assert_eq!(c.train.hyper.lr, 0.002);
        assert_eq!(c.seed, 7);
        assert_eq!(c.train.schedule, mdm_core::forward::MaskSchedule::Cosine);
    }

    #[test]
    fn defaults_roundtrip_through_toml() {
        let c = ExperimentConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text, &[]).unwrap(), c);
        assert_eq!(c.hash().len(), 64);
    }
}
