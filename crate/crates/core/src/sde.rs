//! Hyperparameter transfer across batch size and token horizon by keeping the
//! optimizer's continuous-time dynamics fixed, plus the drift/horizon law used
//! to pick the batch-versus-steps split and the critical-batch harness.

use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::scaling::optim::{bracket_minimum, golden_section, BasinHoppingOptions};
use crate::scaling::{check_points, fit_law, LawForm, ScalingPoint};
use crate::trainer::AdamWHyper;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWTuple {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamWTuple {
    pub fn from_hyper(h: &AdamWHyper) -> Self {
        AdamWTuple {
            lr: h.lr,
            beta1: h.beta1,
            beta2: h.beta2,
            eps: h.eps,
        }
    }

    pub fn apply_to(&self, h: &mut AdamWHyper) {
        h.lr = self.lr;
        h.beta1 = self.beta1;
        h.beta2 = self.beta2;
        h.eps = self.eps;
    }

    pub fn validate(&self) -> Result<()> {
        let beta_ok = |b: f64| b > 0.0 && b < 1.0;
        if self.lr > 0.0 && self.eps > 0.0 && beta_ok(self.beta1) && beta_ok(self.beta2) {
            Ok(())
        } else {
            Err(MdmError::invalid(format!(
                "AdamW tuple out of range: {self:?}"
            )))
        }
    }
}

/// Reference run the transfer is anchored to.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeBase {
    /// Token horizon of the base run.
    pub d_base: f64,
    /// Batch size of the base run, in sequences.
    pub b_base: f64,
    pub tuple: AdamWTuple,
}

impl SdeBase {
    pub fn validate(&self) -> Result<()> {
        if !(self.d_base > 0.0 && self.b_base > 0.0) {
            return Err(MdmError::invalid("base horizon and batch must be positive"));
        }
        self.tuple.validate()
    }
}

/// `(D_base / D)^gamma * (B / B_base)`.
pub fn kappa(d: f64, b: f64, base: &SdeBase, gamma: f64) -> Result<f64> {
    if !(d > 0.0 && b > 0.0 && d.is_finite() && b.is_finite()) {
        return Err(MdmError::invalid(
            "token horizon and batch must be positive",
        ));
    }
    if !(0.0..=1.0).contains(&gamma) {
        return Err(MdmError::invalid(format!("gamma {gamma} outside [0, 1]")));
    }
    base.validate()?;
    Ok((base.d_base / d).powf(gamma) * (b / base.b_base))
}

pub fn rescale_adamw(t: &AdamWTuple, kappa: f64) -> Result<AdamWTuple> {
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(MdmError::invalid(format!(
            "kappa must be positive, got {kappa}"
        )));
    }
    let s = kappa.sqrt();
    Ok(AdamWTuple {
        lr: t.lr * s,
        beta1: t.beta1.powf(kappa),
        beta2: t.beta2.powf(kappa),
        eps: t.eps / s,
    })
}

/// A base tuple with a pending scale factor. Chained rescalings multiply the
/// factor, so the resolved tuple does not depend on how the change was split.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SdeTuple {
    pub base: AdamWTuple,
    pub kappa: f64,
}

impl SdeTuple {
    pub fn new(base: AdamWTuple) -> Self {
        SdeTuple { base, kappa: 1.0 }
    }

    pub fn rescale(self, kappa: f64) -> Self {
        SdeTuple {
            base: self.base,
            kappa: self.kappa * kappa,
        }
    }

    pub fn resolve(&self) -> Result<AdamWTuple> {
        rescale_adamw(&self.base, self.kappa)
    }
}

/// `E + A S^(-alpha) + B Bv^(-beta)` over virtual steps and virtual batch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftHorizonFit {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    #[serde(rename = "B")]
    pub big_b: f64,
    pub alpha: f64,
    pub beta: f64,
}

impl DriftHorizonFit {
    pub fn new(e: f64, big_a: f64, big_b: f64, alpha: f64, beta: f64) -> Result<Self> {
        let f = DriftHorizonFit {
            e,
            big_a,
            big_b,
            alpha,
            beta,
        };
        f.validate()?;
        Ok(f)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.e, self.big_a, self.big_b, self.alpha, self.beta];
        if all.iter().all(|v| v.is_finite())
            && self.big_a > 0.0
            && self.big_b > 0.0
            && self.alpha > 0.0
            && self.beta > 0.0
        {
            Ok(())
        } else {
            Err(MdmError::invalid(format!(
                "drift/horizon law out of range: {self:?}"
            )))
        }
    }

    pub fn gamma_star(&self) -> f64 {
        self.alpha / (self.alpha + self.beta)
    }

    pub fn g(&self) -> f64 {
        (self.alpha * self.big_a / (self.beta * self.big_b)).powf(1.0 / (self.alpha + self.beta))
    }

    pub fn loss(&self, s_tilde: f64, b_tilde: f64) -> f64 {
        self.e + self.big_a * s_tilde.powf(-self.alpha) + self.big_b * b_tilde.powf(-self.beta)
    }
}

/// Observed `(virtual steps, virtual batch, loss)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftHorizonPoint {
    pub s_tilde: f64,
    pub b_tilde: f64,
    pub loss: f64,
}

/// Fits the drift/horizon law with the same engine as the size/data laws.
pub fn fit_drift_horizon(
    points: &[DriftHorizonPoint],
    restarts: usize,
    seed: u64,
) -> Result<(DriftHorizonFit, f64)> {
    use rand::SeedableRng;
    let pts: Vec<ScalingPoint> = points
        .iter()
        .map(|p| ScalingPoint {
            n: p.s_tilde,
            d: p.b_tilde,
            loss: p.loss,
        })
        .collect();
    check_points(&pts)?;
    let opts = BasinHoppingOptions {
        restarts,
        ..BasinHoppingOptions::default()
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (p, obj) = fit_law(&pts, LawForm::Additive, &[], &opts, &mut rng)?;
    Ok((DriftHorizonFit::new(p.e, p.big_a, p.big_b, p.a, p.b)?, obj))
}

/// Virtual steps and batch for a token budget `d` at sequence length `l`.
/// `gamma` defaults to the law's optimum.
pub fn virtual_split(d: f64, l: f64, fit: &DriftHorizonFit, gamma: Option<f64>) -> (f64, f64) {
    let x = d / l;
    let g = gamma.unwrap_or_else(|| fit.gamma_star());
    let s = fit.g() * x.powf(1.0 - g);
    (s, x / s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaEstimate {
    pub gamma: f64,
    /// Loss-minimizing virtual steps at `d / l`.
    pub s_tilde: f64,
    pub b_tilde: f64,
}

fn argmin_steps(fit: &DriftHorizonFit, x: f64) -> Result<f64> {
    // Minimize the reducible part; E only shifts the curve.
    let f = |ln_s: f64| fit.loss(ln_s.exp(), x / ln_s.exp()) - fit.e;
    let (lo, hi) = (-200.0, 200.0);
    let cells = 8000;
    let (a, b) = bracket_minimum(f, lo, hi, cells).ok_or_else(|| {
        let trace: Vec<String> = [lo, -100.0, 0.0, 100.0, hi]
            .iter()
            .map(|&v| format!("ln S={v}: {:.4e}", f(v)))
            .collect();
        MdmError::Numerical(format!(
            "no interior minimum on the constraint curve at D/L={x}; trace [{}]",
            trace.join(", ")
        ))
    })?;
    Ok(golden_section(f, a, b, 1e-13).exp())
}

/// Minimizes the law along `B~ S~ = D / L` at `D/L * 10^(-1/2)` and
/// `D/L * 10^(1/2)`; `gamma` is the log-slope of the optimal virtual batch.
pub fn gamma_star_numeric(fit: &DriftHorizonFit, d: f64, l: f64) -> Result<GammaEstimate> {
    fit.validate()?;
    if !(d > 0.0 && l > 0.0) {
        return Err(MdmError::invalid(
            "token horizon and sequence length must be positive",
        ));
    }
    let x = d / l;
    let r = 10f64.sqrt();
    let (x1, x2) = (x / r, x * r);
    let b1 = x1 / argmin_steps(fit, x1)?;
    let b2 = x2 / argmin_steps(fit, x2)?;
    let s = argmin_steps(fit, x)?;
    Ok(GammaEstimate {
        gamma: (b2 / b1).ln() / (x2 / x1).ln(),
        s_tilde: s,
        b_tilde: x / s,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaSweepRow {
    pub d: f64,
    pub gamma: f64,
    pub s_tilde: f64,
    pub b_tilde: f64,
    pub loss: f64,
}

/// Predicted loss of every `(d, gamma)` split.
pub fn gamma_sweep(
    fit: &DriftHorizonFit,
    d_values: &[f64],
    l: f64,
    gammas: &[f64],
) -> Vec<GammaSweepRow> {
    d_values
        .iter()
        .flat_map(|&d| {
            gammas.iter().map(move |&g| {
                let (s, b) = virtual_split(d, l, fit, Some(g));
                GammaSweepRow {
                    d,
                    gamma: g,
                    s_tilde: s,
                    b_tilde: b,
                    loss: fit.loss(s, b),
                }
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SCritEstimate {
    pub s_crit: f64,
    pub plateau: f64,
    pub delta: f64,
}

/// Smallest `S` from which every measured run stays within `(1 + delta)` of
/// the plateau, the median loss of the longest-run tercile. The whole tercile
/// must lie within tolerance, otherwise the plateau is not established.
pub fn estimate_s_crit(curve: &[(f64, f64)], delta: f64) -> Result<SCritEstimate> {
    if curve.len() < 4 {
        return Err(MdmError::invalid(format!(
            "need at least 4 points, got {}",
            curve.len()
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(MdmError::invalid("plateau tolerance must be non-negative"));
    }
    if curve
        .iter()
        .any(|&(s, l)| !(s > 0.0 && s.is_finite() && l.is_finite()))
    {
        return Err(MdmError::invalid(
            "steps must be positive and losses finite",
        ));
    }
    let mut pts = curve.to_vec();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    let (s_min, s_max) = (pts[0].0, pts[pts.len() - 1].0);
    if s_max / s_min < 100.0 * (1.0 - 1e-12) {
        return Err(MdmError::invalid(format!(
            "steps span {:.2} decades; at least two are needed",
            (s_max / s_min).log10()
        )));
    }
    let k = pts.len().div_ceil(3);
    let top = &pts[pts.len() - k..];
    let mut top_losses: Vec<f64> = top.iter().map(|p| p.1).collect();
    top_losses.sort_by(f64::total_cmp);
    let plateau = if k % 2 == 1 {
        top_losses[k / 2]
    } else {
        0.5 * (top_losses[k / 2 - 1] + top_losses[k / 2])
    };
    let tol = plateau * (1.0 + delta);

    // Walk down from the longest run while every point stays within tolerance.
    let mut first_ok = pts.len();
    while first_ok > 0 && pts[first_ok - 1].1 <= tol {
        first_ok -= 1;
    }
    if first_ok > pts.len() - k {
        let worst = top_losses[k - 1];
        return Err(MdmError::NotFound(format!(
            "plateau {plateau:.6} with tolerance {delta} gives threshold {tol:.6}, but the longest-run tercile reaches {worst:.6}"
        )));
    }
    // Runs sharing the boundary S must all qualify.
    let mut s_crit = pts[first_ok].0;
    if first_ok > 0 && pts[first_ok - 1].0 == s_crit {
        s_crit = pts[first_ok..]
            .iter()
            .map(|p| p.0)
            .find(|&s| s > s_crit)
            .ok_or_else(|| MdmError::NotFound("no step count is fully within tolerance".into()))?;
    }
    Ok(SCritEstimate {
        s_crit,
        plateau,
        delta,
    })
}

/// `D / (L S_crit)`.
pub fn b_crit(d: f64, l: f64, s_crit: f64) -> Result<f64> {
    if !(d > 0.0 && l > 0.0 && s_crit > 0.0) {
        return Err(MdmError::invalid("D, L and S_crit must be positive"));
    }
    Ok(d / (l * s_crit))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base() -> SdeBase {
        SdeBase {
            d_base: 1e9,
            b_base: 256.0,
            tuple: AdamWTuple {
                lr: 9e-4,
                beta1: 0.9,
                beta2: 0.95,
                eps: 1e-8,
            },
        }
    }

    #[test]
    fn kappa_examples() {
        let b = base();
        assert_eq!(kappa(1e9, 256.0, &b, 0.44).unwrap(), 1.0);
        assert_eq!(kappa(3e9, 512.0, &b, 0.0).unwrap(), 2.0);
        assert!((kappa(4e9, 256.0, &b, 1.0).unwrap() - 0.25).abs() < 1e-15);
        assert!(kappa(0.0, 256.0, &b, 0.5).is_err());
        assert!(kappa(1e9, 256.0, &b, 1.5).is_err());
    }

    #[test]
    fn rescale_examples() {
        let t = base().tuple;
        assert_eq!(rescale_adamw(&t, 1.0).unwrap(), t);
        let r = rescale_adamw(&t, 4.0).unwrap();
        assert!((r.lr - 1.8e-3).abs() < 1e-15);
        assert!((r.beta1 - 0.6561).abs() < 1e-12);
        assert!((r.eps - 5e-9).abs() < 1e-22);
        let q = rescale_adamw(&t, 0.25).unwrap();
        assert!((q.lr - 4.5e-4).abs() < 1e-15);
        assert!((q.beta1 - 0.974_003_7).abs() < 1e-6);
        assert!((q.eps - 2e-8).abs() < 1e-21);
    }

    #[test]
    fn virtual_split_examples() {
        let sym = DriftHorizonFit::new(2.0, 1.0, 1.0, 0.2, 0.2).unwrap();
        assert_eq!(sym.gamma_star(), 0.5);
        assert_eq!(sym.g(), 1.0);
        let (s, b) = virtual_split(1e6, 1.0, &sym, None);
        assert!((s - 1e3).abs() < 1e-9 && (b - 1e3).abs() < 1e-9);
        let (b1, b2) = (
            virtual_split(1e6, 4.0, &sym, Some(0.0)).1,
            virtual_split(1e9, 4.0, &sym, Some(0.0)).1,
        );
        assert!((b1 - b2).abs() < 1e-12);
        let reference = DriftHorizonFit::new(2.0, 1.0, 1.0, 0.18, 0.23).unwrap();
        assert!((reference.gamma_star() - 0.439).abs() < 1e-3);
    }

    #[test]
    fn numeric_gamma_matches_closed_form() {
        for (a, b) in [(0.2, 0.2), (0.18, 0.23)] {
            let f = DriftHorizonFit::new(1.5, 1.0, 1.0, a, b).unwrap();
            for d in [1e6, 1e9, 1e12] {
                let g = gamma_star_numeric(&f, d, 512.0).unwrap();
                assert!(
                    (g.gamma - f.gamma_star()).abs() < 1e-3,
                    "{a} {b} {d}: {}",
                    g.gamma
                );
            }
        }
    }

    #[test]
    fn larger_horizon_coefficient_favours_more_steps() {
        let small = DriftHorizonFit::new(1.5, 1.0, 1.0, 0.18, 0.23).unwrap();
        let big = DriftHorizonFit::new(1.5, 1e6, 1.0, 0.18, 0.23).unwrap();
        let gs = gamma_star_numeric(&small, 1e9, 512.0).unwrap();
        let gb = gamma_star_numeric(&big, 1e9, 512.0).unwrap();
        assert!(gb.s_tilde > 1e6 * gs.s_tilde);
        assert!((gb.gamma - big.gamma_star()).abs() < 1e-3);
    }

    #[test]
    fn s_crit_examples() {
        let l0 = 2.0;
        let steps: Vec<f64> = (0..30)
            .map(|i| 10f64.powf(1.0 + 2.0 * i as f64 / 29.0))
            .collect();
        let mut curve: Vec<(f64, f64)> = steps
            .iter()
            .map(|&s| (s, if s >= 100.0 { l0 } else { l0 * (1.0 + 1.0 / s) }))
            .collect();
        curve.push((100.0, l0));
        let est = estimate_s_crit(&curve, 0.005).unwrap();
        assert_eq!(est.s_crit, 100.0);

        let flat: Vec<(f64, f64)> = steps.iter().map(|&s| (s, l0)).collect();
        assert_eq!(estimate_s_crit(&flat, 0.0).unwrap().s_crit, steps[0]);

        let noisy: Vec<(f64, f64)> = steps
            .iter()
            .enumerate()
            .map(|(i, &s)| (s, l0 * (1.0 + 0.01 * ((i * 7919 % 13) as f64 / 13.0 - 0.5))))
            .collect();
        assert!(matches!(
            estimate_s_crit(&noisy, 0.0),
            Err(MdmError::NotFound(_))
        ));
        assert!(estimate_s_crit(&noisy, 0.01).is_ok());
        assert!(estimate_s_crit(&curve[..3], 0.1).is_err());
        assert_eq!(b_crit(1e9, 1000.0, 100.0).unwrap(), 1e4);
    }
}
