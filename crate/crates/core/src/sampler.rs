//! Reverse-process generation: masked initialization, stepwise unmasking,
//! modality-restricted sampling with temperature, top-p and guidance.

use ndarray::ArrayView1;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::denoiser::{Denoiser, Logits};
use crate::error::{MdmError, Result};
use crate::forward::MaskSchedule;
use crate::vocab::{Modality, TaskKind, TokenId, TokenRange, UnifiedVocab};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RevealRule {
    #[default]
    Confidence,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    /// `None` runs the conditional model only.
    pub cfg_scale: Option<f64>,
    pub temperature: f64,
    pub top_p: f64,
    pub schedule: MaskSchedule,
    pub reveal: RevealRule,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 8,
            cfg_scale: None,
            temperature: 1.0,
            top_p: 1.0,
            schedule: MaskSchedule::Linear,
            reveal: RevealRule::Confidence,
        }
    }
}

impl SamplerConfig {
    pub fn image_preset() -> Self {
        SamplerConfig {
            cfg_scale: Some(6.0),
            ..Default::default()
        }
    }

    pub fn audio_preset() -> Self {
        SamplerConfig {
            cfg_scale: Some(3.0),
            temperature: 1.2,
            top_p: 0.9,
            ..Default::default()
        }
    }

    pub fn text_preset() -> Self {
        SamplerConfig::default()
    }

    pub fn preset(task: TaskKind) -> Self {
        match task {
            TaskKind::Text => Self::text_preset(),
            TaskKind::ImageText => Self::image_preset(),
            TaskKind::AudioText => Self::audio_preset(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(MdmError::invalid("generation needs at least one step"));
        }
        if let Some(g) = self.cfg_scale {
            if !(g.is_finite() && g >= 0.0) {
                return Err(MdmError::invalid(format!(
                    "cfg scale must be finite and >= 0, got {g}"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(MdmError::invalid("temperature must be > 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(MdmError::invalid("top_p must lie in (0, 1]"));
        }
        self.schedule.validate()
    }

    /// Positions still masked after step `k` of `K`, starting from `n0`.
    pub fn remaining_after(&self, n0: usize, k: usize) -> usize {
        let t = 1.0 - k as f64 / self.steps as f64;
        let r = (n0 as f64 * self.schedule.mask_fraction(t) + 1e-9).floor() as usize;
        r.min(n0)
    }

    /// Newly revealed counts per step; entries may be zero.
    pub fn reveal_plan(&self, n0: usize) -> Vec<usize> {
        (1..=self.steps)
            .map(|k| self.remaining_after(n0, k - 1) - self.remaining_after(n0, k))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationState {
    pub tokens: Vec<TokenId>,
    /// Sorted positions still holding a mask id.
    pub masked: Vec<usize>,
    /// Text prompt positions, masked for the unconditional guidance pass.
    pub prompt_positions: Vec<usize>,
    pub step: usize,
}

impl GenerationState {
    /// Wraps an arbitrary token vector; every mask id is a position to fill.
    pub fn from_tokens(
        vocab: &UnifiedVocab,
        tokens: Vec<TokenId>,
        prompt_positions: Vec<usize>,
    ) -> Result<Self> {
        if let Some(&id) = tokens.iter().find(|&&id| id as usize >= vocab.size()) {
            return Err(MdmError::invalid(format!("token id {id} out of range")));
        }
        if prompt_positions.iter().any(|&p| p >= tokens.len()) {
            return Err(MdmError::invalid("prompt position out of range"));
        }
        let masked = (0..tokens.len())
            .filter(|&i| vocab.is_mask(tokens[i]))
            .collect();
        Ok(GenerationState {
            tokens,
            masked,
            prompt_positions,
            step: 0,
        })
    }

    pub fn attention(&self, vocab: &UnifiedVocab) -> Vec<bool> {
        self.tokens.iter().map(|&id| id != vocab.pad_text).collect()
    }
}

/// Builds the fully masked starting point for a task.
///
/// Modality tasks: `TASK, BOS_m, MASK_m x n, EOS_m, BOS_text, prompt, EOS_text`.
/// Text: `TASK_text, BOS_text, prompt, MASK_text x n, EOS_text`. Both are padded to `l_star`.
pub fn init_masked(
    vocab: &UnifiedVocab,
    task: TaskKind,
    prompt: &[TokenId],
    target_len: usize,
    l_star: usize,
) -> Result<GenerationState> {
    let text = vocab.range(Modality::Text);
    if let Some(&id) = prompt.iter().find(|&&id| !text.contains(id)) {
        return Err(MdmError::invalid(format!(
            "prompt token {id} is not a text payload token"
        )));
    }
    let required = 1
        + 2
        + target_len
        + if task.is_pair() {
            2 + prompt.len()
        } else {
            prompt.len()
        };
    if required > l_star {
        return Err(MdmError::SequenceTooLong {
            required,
            max: l_star,
        });
    }
    let mut tokens = Vec::with_capacity(l_star);
    let mut prompt_positions = Vec::with_capacity(prompt.len());
    tokens.push(vocab.task_id(task));
    if task.is_pair() {
        let m = task.primary_modality();
        tokens.push(vocab.bos(m));
        tokens.extend(std::iter::repeat_n(vocab.mask_id(m), target_len));
        tokens.push(vocab.eos(m));
        tokens.push(vocab.bos(Modality::Text));
        prompt_positions.extend(tokens.len()..tokens.len() + prompt.len());
        tokens.extend_from_slice(prompt);
        tokens.push(vocab.eos(Modality::Text));
    } else {
        tokens.push(vocab.bos(Modality::Text));
        prompt_positions.extend(tokens.len()..tokens.len() + prompt.len());
        tokens.extend_from_slice(prompt);
        tokens.extend(std::iter::repeat_n(
            vocab.mask_id(Modality::Text),
            target_len,
        ));
        tokens.push(vocab.eos(Modality::Text));
    }
    tokens.resize(l_star, vocab.pad_text);
    GenerationState::from_tokens(vocab, tokens, prompt_positions)
}

/// `l_uncond + g (l_cond - l_uncond)`; `g = 1` and `g = 0` return the inputs unchanged.
pub fn guided_logits(l_cond: &Logits, l_uncond: &Logits, g: f64) -> Result<Logits> {
    if l_cond.scores.dim() != l_uncond.scores.dim() {
        return Err(MdmError::invalid("guidance needs logits of equal shape"));
    }
    if g == 1.0 {
        return Ok(l_cond.clone());
    }
    if g == 0.0 {
        return Ok(l_uncond.clone());
    }
    let mut out = l_uncond.scores.clone();
    ndarray::Zip::from(&mut out)
        .and(&l_cond.scores)
        .for_each(|u, &c| *u += g * (c - *u));
    Ok(Logits::new(out))
}

/// Tempered softmax over `range` followed by nucleus truncation.
///
/// Returns `(token id, probability)` pairs for the retained support, sorted by
/// descending probability with ties broken by lower id, renormalized to one.
pub fn restricted_distribution(
    row: ArrayView1<f64>,
    range: TokenRange,
    temperature: f64,
    top_p: f64,
) -> Result<Vec<(TokenId, f64)>> {
    let scores: Vec<f64> = range
        .iter()
        .map(|v| row[v as usize] / temperature)
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY || max.is_nan() {
        return Err(MdmError::NoSupport(
            "every logit in the modality range is -inf".into(),
        ));
    }
    let weights: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = weights.iter().sum();
    let mut probs: Vec<(TokenId, f64)> =
        range.iter().zip(weights).map(|(v, w)| (v, w / z)).collect();
    probs.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, (_, p)) in probs.iter().enumerate() {
        cum += p;
        if cum >= top_p - 1e-12 {
            keep = i + 1;
            break;
        }
    }
    probs.truncate(keep);
    probs.retain(|(_, p)| *p > 0.0);
    let mass: f64 = probs.iter().map(|(_, p)| p).sum();
    probs.iter_mut().for_each(|(_, p)| *p /= mass);
    Ok(probs)
}

/// Draws one token from [`restricted_distribution`]. Also returns the
/// untruncated tempered probability of the drawn token, used as confidence.
pub fn sample_token<R: Rng + ?Sized>(
    row: ArrayView1<f64>,
    range: TokenRange,
    temperature: f64,
    top_p: f64,
    rng: &mut R,
) -> Result<(TokenId, f64)> {
    let full = restricted_distribution(row, range, temperature, 1.0)?;
    let dist = if top_p < 1.0 {
        restricted_distribution(row, range, temperature, top_p)?
    } else {
        full.clone()
    };
    let u: f64 = rng.random();
    let mut cum = 0.0;
    let mut chosen = dist.last().expect("non-empty support").0;
    for &(v, p) in &dist {
        cum += p;
        if u < cum {
            chosen = v;
            break;
        }
    }
    let conf = full
        .iter()
        .find(|(v, _)| *v == chosen)
        .map_or(0.0, |(_, p)| *p);
    Ok((chosen, conf))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    pub step: usize,
    pub revealed: Vec<(usize, TokenId)>,
    pub remaining: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub tokens: Vec<TokenId>,
    pub trace: Vec<StepTrace>,
}

fn model_logits(
    model: &dyn Denoiser,
    vocab: &UnifiedVocab,
    state: &GenerationState,
    cfg: &SamplerConfig,
) -> Result<Logits> {
    let attention = state.attention(vocab);
    let cond = model.logits(&state.tokens, &attention)?;
    let Some(g) = cfg.cfg_scale else {
        return Ok(cond);
    };
    let mut uncond_tokens = state.tokens.clone();
    for &p in &state.prompt_positions {
        uncond_tokens[p] = vocab.mask_id(Modality::Text);
    }
    let uncond = model.logits(&uncond_tokens, &attention)?;
    guided_logits(&cond, &uncond, g)
}

/// Runs the reverse process until no masks remain.
pub fn generate<R: Rng + ?Sized>(
    model: &dyn Denoiser,
    vocab: &UnifiedVocab,
    mut state: GenerationState,
    cfg: &SamplerConfig,
    rng: &mut R,
) -> Result<Generation> {
    cfg.validate()?;
    if model.vocab_size() != vocab.size() {
        return Err(MdmError::invalid("model and vocabulary sizes differ"));
    }
    let plan = cfg.reveal_plan(state.masked.len());
    let mut trace = Vec::new();
    for (k, &n_reveal) in plan.iter().enumerate() {
        if n_reveal == 0 {
            continue;
        }
        let logits = model_logits(model, vocab, &state, cfg)?;
        let mut candidates = Vec::with_capacity(state.masked.len());
        for &i in &state.masked {
            let m = vocab
                .modality_of(state.tokens[i])
                .expect("mask ids carry a modality");
            let (tok, conf) = sample_token(
                logits.row(i),
                vocab.range(m),
                cfg.temperature,
                cfg.top_p,
                rng,
            )?;
            candidates.push((i, tok, conf));
        }
        match cfg.reveal {
            RevealRule::Confidence => {
                candidates.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)))
            }
            RevealRule::Random => candidates.shuffle(rng),
        }
        let mut revealed: Vec<(usize, TokenId)> = candidates[..n_reveal]
            .iter()
            .map(|&(i, t, _)| (i, t))
            .collect();
        revealed.sort_unstable();
        for &(i, t) in &revealed {
            state.tokens[i] = t;
        }
        state
            .masked
            .retain(|i| revealed.binary_search_by_key(i, |&(p, _)| p).is_err());
        state.step = k + 1;
        trace.push(StepTrace {
            step: k + 1,
            revealed,
            remaining: state.masked.len(),
        });
    }
    debug_assert!(state.masked.is_empty());
    Ok(Generation {
        tokens: state.tokens,
        trace,
    })
}
