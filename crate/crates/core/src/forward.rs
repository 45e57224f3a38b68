//! Continuous-time Bernoulli masking.
//!
//! A schedule is described by its mask fraction `m(t) = 1 - ᾱ_t`, with
//! `m(0) = 0`, `m(1) = 1` and `m` strictly increasing. Every position owns one
//! uniform draw `u_i`; position `i` is masked at time `t` iff it is maskable and
//! `u_i < m(t)`, which makes the masked sets nested in `t` under a shared draw.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::vocab::{Sequence, TokenId, UnifiedVocab};

/// Default lower bound on sampled diffusion time.
pub const DEFAULT_T_EPSILON: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum MaskSchedule {
    /// `m(t) = t`
    Linear,
    /// `m(t) = 1 - cos(πt/2)`
    Cosine,
    /// `m(t) = t^p`
    Polynomial(f64),
    /// `m(t) = (r^t - 1) / (r - 1)`
    Geometric(f64),
}

impl Default for MaskSchedule {
    fn default() -> Self {
        MaskSchedule::Linear
    }
}

impl MaskSchedule {
    pub fn polynomial() -> Self {
        MaskSchedule::Polynomial(2.0)
    }

    pub fn geometric() -> Self {
        MaskSchedule::Geometric(20.0)
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            MaskSchedule::Polynomial(p) if !(p.is_finite() && p > 0.0) => Err(MdmError::invalid(
                format!("polynomial exponent must be > 0, got {p}"),
            )),
            MaskSchedule::Geometric(r) if !(r.is_finite() && r > 0.0 && r != 1.0) => Err(
                MdmError::invalid(format!("geometric ratio must be > 0 and != 1, got {r}")),
            ),
            _ => Ok(()),
        }
    }

    /// Mask fraction `m(t) = 1 - ᾱ_t`. Clamped to the endpoints outside [0, 1].
    pub fn mask_fraction(&self, t: f64) -> f64 {
        if t <= 0.0 {
            return 0.0;
        }
        if t >= 1.0 {
            return 1.0;
        }
        match *self {
            MaskSchedule::Linear => t,
            MaskSchedule::Cosine => 1.0 - (FRAC_PI_2 * t).cos(),
            MaskSchedule::Polynomial(p) => t.powf(p),
            MaskSchedule::Geometric(r) => (r.powf(t) - 1.0) / (r - 1.0),
        }
    }

    /// `dm/dt`.
    pub fn mask_fraction_rate(&self, t: f64) -> f64 {
        match *self {
            MaskSchedule::Linear => 1.0,
            MaskSchedule::Cosine => FRAC_PI_2 * (FRAC_PI_2 * t).sin(),
            MaskSchedule::Polynomial(p) => p * t.powf(p - 1.0),
            MaskSchedule::Geometric(r) => r.powf(t) * r.ln() / (r - 1.0),
        }
    }

    /// Survival probability ᾱ_t.
    pub fn alpha_bar(&self, t: f64) -> f64 {
        1.0 - self.mask_fraction(t)
    }

    /// dᾱ/dt (non-positive).
    pub fn alpha_bar_prime(&self, t: f64) -> f64 {
        -self.mask_fraction_rate(t)
    }

    /// The time at which the mask fraction equals `m`.
    pub fn time_for_mask_fraction(&self, m: f64) -> f64 {
        if m <= 0.0 {
            return 0.0;
        }
        if m >= 1.0 {
            return 1.0;
        }
        match *self {
            MaskSchedule::Linear => m,
            MaskSchedule::Cosine => (1.0 - m).acos() / FRAC_PI_2,
            MaskSchedule::Polynomial(p) => m.powf(1.0 / p),
            MaskSchedule::Geometric(r) => (1.0 + m * (r - 1.0)).ln() / r.ln(),
        }
    }
}

impl fmt::Display for MaskSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MaskSchedule::Linear => write!(f, "linear"),
            MaskSchedule::Cosine => write!(f, "cosine"),
            MaskSchedule::Polynomial(p) => write!(f, "poly:{p}"),
            MaskSchedule::Geometric(r) => write!(f, "geo:{r}"),
        }
    }
}

impl FromStr for MaskSchedule {
    type Err = MdmError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let parse_arg = |arg: &str| {
            arg.parse::<f64>()
                .map_err(|_| MdmError::invalid(format!("bad schedule parameter in `{s}`")))
        };
        let sched = match s.split_once(':') {
            None => match s {
                "linear" => MaskSchedule::Linear,
                "cosine" => MaskSchedule::Cosine,
                "poly" | "polynomial" => MaskSchedule::polynomial(),
                "geo" | "geometric" => MaskSchedule::geometric(),
                _ => return Err(MdmError::invalid(format!("unknown schedule `{s}`"))),
            },
            Some(("poly", p)) => MaskSchedule::Polynomial(parse_arg(p)?),
            Some(("geo", r)) => MaskSchedule::Geometric(parse_arg(r)?),
            Some(_) => return Err(MdmError::invalid(format!("unknown schedule `{s}`"))),
        };
        sched.validate()?;
        Ok(sched)
    }
}

impl TryFrom<String> for MaskSchedule {
    type Error = MdmError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<MaskSchedule> for String {
    fn from(s: MaskSchedule) -> String {
        s.to_string()
    }
}

/// A partially masked view of a sequence at diffusion time `t`.
#[derive(Clone, Debug, PartialEq)]
pub struct CorruptedSequence {
    pub t: f64,
    /// Sorted masked positions (the set I_t).
    pub masked: Vec<usize>,
    pub tokens: Vec<TokenId>,
}

impl CorruptedSequence {
    /// Builds a view with an explicit mask set.
    pub fn with_mask(vocab: &UnifiedVocab, seq: &Sequence, t: f64, masked: Vec<usize>) -> Self {
        let mut tokens = seq.tokens.clone();
        for &i in &masked {
            debug_assert!(seq.maskable[i]);
            tokens[i] = vocab.mask_id(seq.modality[i]);
        }
        CorruptedSequence { t, masked, tokens }
    }

    pub fn is_masked(&self, i: usize) -> bool {
        self.masked.binary_search(&i).is_ok()
    }
}

/// One uniform per position; shared across times to couple corruptions.
#[derive(Clone, Debug)]
pub struct MaskDraw {
    pub uniforms: Vec<f64>,
}

impl MaskDraw {
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        MaskDraw {
            uniforms: (0..len).map(|_| rng.random::<f64>()).collect(),
        }
    }

    pub fn masked_set(&self, seq: &Sequence, t: f64, schedule: &MaskSchedule) -> Vec<usize> {
        let m = schedule.mask_fraction(t);
        (0..seq.len())
            .filter(|&i| seq.maskable[i] && self.uniforms[i] < m)
            .collect()
    }

    pub fn apply(
        &self,
        vocab: &UnifiedVocab,
        seq: &Sequence,
        t: f64,
        schedule: &MaskSchedule,
    ) -> Result<CorruptedSequence> {
        check_time(t)?;
        if self.uniforms.len() != seq.len() {
            return Err(MdmError::invalid(
                "mask draw length differs from sequence length",
            ));
        }
        let masked = self.masked_set(seq, t, schedule);
        Ok(CorruptedSequence::with_mask(vocab, seq, t, masked))
    }
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(MdmError::invalid(format!(
            "diffusion time must lie in (0, 1], got {t}"
        )))
    }
}

/// Masks each maskable position independently with probability `1 - ᾱ_t`.
pub fn corrupt<R: Rng + ?Sized>(
    vocab: &UnifiedVocab,
    seq: &Sequence,
    t: f64,
    schedule: &MaskSchedule,
    rng: &mut R,
) -> Result<CorruptedSequence> {
    check_time(t)?;
    MaskDraw::sample(seq.len(), rng).apply(vocab, seq, t, schedule)
}

/// A draw and its complement over the maskable set.
///
/// The complement view masks each maskable position with probability
/// `1 - m(t)`, so it is itself a forward-process sample at the time `t_c`
/// solving `m(t_c) = 1 - m(t)`; that time is stored on the second view.
pub fn anti_mask_pair<R: Rng + ?Sized>(
    vocab: &UnifiedVocab,
    seq: &Sequence,
    t: f64,
    schedule: &MaskSchedule,
    rng: &mut R,
) -> Result<(CorruptedSequence, CorruptedSequence)> {
    let primary = corrupt(vocab, seq, t, schedule, rng)?;
    let complement = complement_of(vocab, seq, &primary, schedule);
    Ok((primary, complement))
}

pub fn complement_of(
    vocab: &UnifiedVocab,
    seq: &Sequence,
    view: &CorruptedSequence,
    schedule: &MaskSchedule,
) -> CorruptedSequence {
    let masked: Vec<usize> = seq
        .maskable_positions()
        .into_iter()
        .filter(|i| !view.is_masked(*i))
        .collect();
    let t_c = schedule.time_for_mask_fraction(1.0 - schedule.mask_fraction(view.t));
    CorruptedSequence::with_mask(vocab, seq, t_c, masked)
}

/// Reversal posterior π: the probability that a token masked at `t` was
/// masked during `(t - dt, t]`, i.e. `(ᾱ_{t-dt} - ᾱ_t) / (1 - ᾱ_t)`.
pub fn posterior_pi(t: f64, dt: f64, schedule: &MaskSchedule) -> Result<f64> {
    check_time(t)?;
    let prev = t - dt;
    // A previous time within rounding of zero is the first step of the chain.
    if !(dt > 0.0) || prev < -1e-12 {
        return Err(MdmError::invalid(format!(
            "need 0 <= t - dt < t, got t = {t}, dt = {dt}"
        )));
    }
    let m_t = schedule.mask_fraction(t);
    let m_prev = schedule.mask_fraction(prev.max(0.0));
    Ok(((m_t - m_prev) / m_t).clamp(0.0, 1.0))
}

/// Continuous-time hazard `-ᾱ'_t / (1 - ᾱ_t)`.
pub fn posterior_rate(t: f64, schedule: &MaskSchedule) -> Result<f64> {
    check_time(t)?;
    Ok(schedule.mask_fraction_rate(t) / schedule.mask_fraction(t))
}

/// ELBO weight `|ᾱ'_t| / (1 - ᾱ_t)`; exactly `1/t` for the linear schedule.
pub fn elbo_weight(t: f64, schedule: &MaskSchedule, epsilon: f64) -> Result<f64> {
    if !(t > epsilon && t <= 1.0) {
        return Err(MdmError::invalid(format!(
            "weight requested at t = {t}, outside ({epsilon}, 1]"
        )));
    }
    Ok(schedule.mask_fraction_rate(t) / schedule.mask_fraction(t))
}

/// Samples t ~ U(ε, 1).
pub fn sample_time<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> f64 {
    // random::<f64>() is in [0, 1), so 1 - u lands in (0, 1].
    epsilon + (1.0 - epsilon) * (1.0 - rng.random::<f64>())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{assemble_pair, Modality, TaskKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn all_schedules() -> Vec<MaskSchedule> {
        vec![
            MaskSchedule::Linear,
            MaskSchedule::Cosine,
            MaskSchedule::polynomial(),
            MaskSchedule::Polynomial(0.5),
            MaskSchedule::geometric(),
            MaskSchedule::Geometric(0.2),
        ]
    }

    fn text_seq(vocab: &UnifiedVocab, n: usize) -> Sequence {
        let mut tokens = vec![vocab.task_id(TaskKind::Text)];
        tokens.extend((0..n).map(|i| (i % vocab.sizes[0]) as TokenId));
        Sequence::from_tokens(vocab, tokens).unwrap()
    }

    #[test]
    fn schedule_endpoints_and_monotonicity() {
        for s in all_schedules() {
            assert_eq!(s.alpha_bar(0.0), 1.0, "{s}");
            assert_eq!(s.alpha_bar(1.0), 0.0, "{s}");
            let mut prev = 1.0;
            for k in 1..1000 {
                let a = s.alpha_bar(k as f64 / 1000.0);
                assert!(a < prev, "{s} not strictly decreasing at {k}");
                prev = a;
            }
        }
    }

    #[test]
    fn derivative_matches_finite_difference() {
        let h = 1e-6;
        for s in all_schedules() {
            for k in 1..20 {
                let t = k as f64 / 20.0;
                let fd = (s.alpha_bar(t + h) - s.alpha_bar(t - h)) / (2.0 * h);
                assert!((fd - s.alpha_bar_prime(t)).abs() < 1e-6, "{s} at {t}");
            }
        }
    }

    #[test]
    fn inverse_round_trips() {
        for s in all_schedules() {
            for k in 1..50 {
                let t = k as f64 / 50.0;
                let back = s.time_for_mask_fraction(s.mask_fraction(t));
                assert!((back - t).abs() < 1e-10, "{s} at {t}");
            }
        }
    }

    #[test]
    fn schedule_strings() {
        for (text, s) in [
            ("linear", MaskSchedule::Linear),
            ("cosine", MaskSchedule::Cosine),
            ("poly:3", MaskSchedule::Polynomial(3.0)),
            ("geo:20", MaskSchedule::Geometric(20.0)),
        ] {
            assert_eq!(text.parse::<MaskSchedule>().unwrap(), s);
            assert_eq!(s.to_string().parse::<MaskSchedule>().unwrap(), s);
        }
        assert!("geo:1".parse::<MaskSchedule>().is_err());
        assert!("poly:-1".parse::<MaskSchedule>().is_err());
        assert!("zigzag".parse::<MaskSchedule>().is_err());
    }

    #[test]
    fn full_mask_at_t_one() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = assemble_pair(&v, TaskKind::ImageText, &[4, 5], &[0, 1], 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = corrupt(&v, &s, 1.0, &MaskSchedule::Cosine, &mut rng).unwrap();
        assert_eq!(c.masked, s.maskable_positions());
        for &i in &c.masked {
            assert_eq!(c.tokens[i], v.mask_id(s.modality[i]));
        }
        assert_eq!(c.tokens[0], v.task_id(TaskKind::ImageText));
        assert_eq!(c.tokens[9], v.pad_text);
        assert_eq!(c.tokens[3], v.mask_id(Modality::Image));
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = text_seq(&v, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in [0.0, -0.1, 1.01, f64::NAN] {
            assert!(corrupt(&v, &s, t, &MaskSchedule::Linear, &mut rng).is_err());
        }
    }

    #[test]
    fn small_t_masks_almost_nothing() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = text_seq(&v, 1000);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = corrupt(&v, &s, 1e-6, &MaskSchedule::Linear, &mut rng).unwrap();
        assert!(c.masked.len() <= 1);
    }

    #[test]
    fn linear_half_mask_rate_is_binomial() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = text_seq(&v, 10_000);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let c = corrupt(&v, &s, 0.5, &MaskSchedule::Linear, &mut rng).unwrap();
        assert!(
            (c.masked.len() as i64 - 5000).abs() <= 150,
            "{}",
            c.masked.len()
        );
    }

    #[test]
    fn shared_draw_is_monotone_in_time() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = text_seq(&v, 300);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let draw = MaskDraw::sample(s.len(), &mut rng);
        for sched in all_schedules() {
            let mut prev: Vec<usize> = Vec::new();
            for k in 1..=20 {
                let set = draw.masked_set(&s, k as f64 / 20.0, &sched);
                assert!(prev.iter().all(|i| set.binary_search(i).is_ok()));
                prev = set;
            }
        }
    }

    #[test]
    fn posterior_examples() {
        let lin = MaskSchedule::Linear;
        assert!((posterior_pi(0.5, 0.01, &lin).unwrap() - 0.02).abs() < 1e-12);
        assert_eq!(posterior_pi(0.01, 0.01, &lin).unwrap(), 1.0);
        assert!((posterior_rate(0.25, &lin).unwrap() - 4.0).abs() < 1e-12);
        assert!(posterior_pi(0.01, 0.02, &lin).is_err());
        assert!(posterior_pi(0.5, 0.0, &lin).is_err());
    }

    #[test]
    fn weights() {
        let lin = MaskSchedule::Linear;
        assert_eq!(elbo_weight(0.5, &lin, 1e-3).unwrap(), 2.0);
        assert_eq!(elbo_weight(1.0, &lin, 1e-3).unwrap(), 1.0);
        for k in 1..100 {
            let t = k as f64 / 100.0;
            assert_eq!(elbo_weight(t, &lin, 1e-3).unwrap(), 1.0 / t);
        }
        let quad = MaskSchedule::polynomial();
        assert!((elbo_weight(0.5, &quad, 1e-3).unwrap() - 4.0).abs() < 1e-12);
        // finite-difference cross-check of the polynomial weight
        let h = 1e-6;
        let fd = -(quad.alpha_bar(0.5 + h) - quad.alpha_bar(0.5 - h)) / (2.0 * h);
        assert!((fd / quad.mask_fraction(0.5) - 4.0).abs() < 1e-6);
        assert!(elbo_weight(1e-3, &lin, 1e-3).is_err());
        assert!(elbo_weight(1.5, &lin, 1e-3).is_err());
    }

    #[test]
    fn anti_mask_partitions_maskable_set() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = assemble_pair(&v, TaskKind::AudioText, &[8, 9, 10], &[1, 2], 12).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for sched in all_schedules() {
            for _ in 0..50 {
                let t = sample_time(1e-3, &mut rng);
                let (a, b) = anti_mask_pair(&v, &s, t, &sched, &mut rng).unwrap();
                let mut union: Vec<usize> = a.masked.iter().chain(&b.masked).copied().collect();
                union.sort_unstable();
                assert_eq!(union, s.maskable_positions());
                assert!(a.masked.iter().all(|i| !b.is_masked(*i)));
                let expected_tc = sched.time_for_mask_fraction(1.0 - sched.mask_fraction(t));
                assert!((b.t - expected_tc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn complement_of_explicit_draw() {
        let v = UnifiedVocab::build([4, 4, 4]).unwrap();
        let s = text_seq(&v, 4);
        let view = CorruptedSequence::with_mask(&v, &s, 0.5, vec![1, 3]);
        let comp = complement_of(&v, &s, &view, &MaskSchedule::Linear);
        assert_eq!(comp.masked, vec![2, 4]);

        let full = CorruptedSequence::with_mask(&v, &s, 1.0, s.maskable_positions());
        let comp = complement_of(&v, &s, &full, &MaskSchedule::Linear);
        assert!(comp.masked.is_empty());
        assert_eq!(comp.tokens, s.tokens);
    }

    #[test]
    fn sampled_times_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10_000 {
            let t = sample_time(1e-3, &mut rng);
            assert!(t > 1e-3 && t <= 1.0);
        }
    }
}
