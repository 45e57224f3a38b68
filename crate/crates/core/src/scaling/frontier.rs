//! Compute-optimal allocation, iso-loss contours and iso-FLOP profiles of a
//! fitted law. `n` and `d` are in billions; budgets are raw FLOPs.

use std::io::Write;

use serde::{Deserialize, Serialize};

use super::optim::{bracket_minimum, golden_section};
use super::{LawForm, LawParams, BILLION};
use crate::error::{MdmError, Result};

/// Training cost per token as a function of model size.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum FlopsModel {
    /// `6 N` FLOPs per token.
    #[default]
    SixN,
    /// `6 N` plus attention-score and unembedding terms for a model of
    /// fixed aspect ratio `d_model / n_layers`.
    Detailed {
        seq_len: f64,
        aspect_ratio: f64,
        vocab_size: f64,
    },
}

impl FlopsModel {
    pub fn validate(&self) -> Result<()> {
        match *self {
            FlopsModel::SixN => Ok(()),
            FlopsModel::Detailed {
                seq_len,
                aspect_ratio,
                vocab_size,
            } => {
                if seq_len > 0.0 && aspect_ratio > 0.0 && vocab_size >= 0.0 {
                    Ok(())
                } else {
                    Err(MdmError::invalid(
                        "detailed FLOPs model needs positive seq_len and aspect_ratio",
                    ))
                }
            }
        }
    }

    /// FLOPs per training token for a model of `n` billion non-embedding parameters.
    pub fn per_token(&self, n: f64) -> f64 {
        let n_abs = n * BILLION;
        match *self {
            FlopsModel::SixN => 6.0 * n_abs,
            FlopsModel::Detailed {
                seq_len,
                aspect_ratio,
                vocab_size,
            } => {
                let layers = (n_abs / (12.0 * aspect_ratio * aspect_ratio)).cbrt();
                let width = aspect_ratio * layers;
                6.0 * n_abs + 12.0 * layers * seq_len * width + 6.0 * width * vocab_size
            }
        }
    }

    /// Tokens (billions) affordable with `budget` FLOPs at size `n`.
    pub fn tokens_for(&self, n: f64, budget: f64) -> f64 {
        budget / (self.per_token(n) * BILLION)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub budget: f64,
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

/// Loss-minimizing `D` for a given `N` along the `6ND` frontier.
pub fn d_star_of_n(form: LawForm, p: &LawParams, n: f64) -> f64 {
    let g = p.b * p.big_b / (p.a * p.big_a);
    let coef = match form {
        LawForm::Kaplan => g,
        LawForm::Additive => g.powf(1.0 / p.b),
    };
    coef * n.powf(p.a / p.b)
}

/// Closed form under `6ND`, numeric otherwise.
pub fn compute_optimal(
    form: LawForm,
    p: &LawParams,
    budget: f64,
    flops: &FlopsModel,
) -> Result<Allocation> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(MdmError::invalid("compute budget must be positive"));
    }
    p.validate()?;
    flops.validate()?;
    if *flops != FlopsModel::SixN {
        return compute_optimal_numeric(form, p, budget, flops);
    }
    let c6 = budget / (6.0 * BILLION * BILLION);
    let tau = p.b / (p.a + p.b);
    let n = match form {
        LawForm::Kaplan => (c6 / (p.b * p.big_b / (p.a * p.big_a))).powf(tau),
        LawForm::Additive => {
            (p.a * p.big_a / (p.b * p.big_b)).powf(1.0 / (p.a + p.b)) * c6.powf(tau)
        }
    };
    let d = c6 / n;
    Ok(Allocation {
        budget,
        n,
        d,
        loss: p.predict(form, n, d),
    })
}

/// One-dimensional search over `ln N` along the budget constraint.
pub fn compute_optimal_numeric(
    form: LawForm,
    p: &LawParams,
    budget: f64,
    flops: &FlopsModel,
) -> Result<Allocation> {
    let f = |x: f64| {
        let n = x.exp();
        let l = p.predict(form, n, flops.tokens_for(n, budget));
        if l.is_finite() {
            l
        } else {
            f64::INFINITY
        }
    };
    let (lo, hi) = bracket_minimum(f, (1e-12f64).ln(), (1e12f64).ln(), 2400)
        .ok_or_else(|| MdmError::Numerical("optimal size lies outside the search range".into()))?;
    let n = golden_section(f, lo, hi, 1e-12).exp();
    let d = flops.tokens_for(n, budget);
    Ok(Allocation {
        budget,
        n,
        d,
        loss: p.predict(form, n, d),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoCurve {
    pub level: f64,
    pub points: Vec<(f64, f64)>,
    /// Set when the contour is empty.
    pub reason: Option<String>,
}

/// `d` solving `loss(n, d) == level`, if any.
pub fn iso_d(form: LawForm, p: &LawParams, level: f64, n: f64) -> Option<f64> {
    let rest = level - p.e;
    if rest <= 0.0 {
        return None;
    }
    let d = match form {
        LawForm::Kaplan => {
            let denom = rest.powf(1.0 / p.b) - p.big_a * n.powf(-p.a / p.b);
            (denom > 0.0).then(|| p.big_b / denom)?
        }
        LawForm::Additive => {
            let denom = rest - p.big_a * n.powf(-p.a);
            (denom > 0.0).then(|| (p.big_b / denom).powf(1.0 / p.b))?
        }
    };
    d.is_finite().then_some(d)
}

fn log_grid(range: (f64, f64), count: usize) -> Result<Vec<f64>> {
    if !(range.0 > 0.0 && range.1 > range.0 && count >= 2) {
        return Err(MdmError::invalid(
            "grid needs 0 < lo < hi and at least two points",
        ));
    }
    let (a, b) = (range.0.ln(), range.1.ln());
    Ok((0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect())
}

pub fn iso_curves(
    form: LawForm,
    p: &LawParams,
    levels: &[f64],
    n_range: (f64, f64),
    count: usize,
) -> Result<Vec<IsoCurve>> {
    let grid = log_grid(n_range, count)?;
    Ok(levels
        .iter()
        .map(|&level| {
            let points: Vec<(f64, f64)> = grid
                .iter()
                .filter_map(|&n| iso_d(form, p, level, n).map(|d| (n, d)))
                .collect();
            let reason = if level <= p.e {
                Some(format!(
                    "level {level} is at or below the irreducible loss {}",
                    p.e
                ))
            } else if points.is_empty() {
                Some("level is unreachable on the requested size range".into())
            } else {
                None
            };
            IsoCurve {
                level,
                points,
                reason,
            }
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopPoint {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IsoFlopCurve {
    pub budget: f64,
    pub points: Vec<IsoFlopPoint>,
    /// Index of the lowest-loss grid point.
    pub argmin: usize,
}

pub fn iso_flops(
    form: LawForm,
    p: &LawParams,
    budgets: &[f64],
    flops: &FlopsModel,
    n_range: (f64, f64),
    count: usize,
) -> Result<Vec<IsoFlopCurve>> {
    flops.validate()?;
    let grid = log_grid(n_range, count)?;
    budgets
        .iter()
        .map(|&budget| {
            if !(budget > 0.0) {
                return Err(MdmError::invalid("compute budget must be positive"));
            }
            let points: Vec<IsoFlopPoint> = grid
                .iter()
                .map(|&n| {
                    let d = flops.tokens_for(n, budget);
                    IsoFlopPoint {
                        n,
                        d,
                        loss: p.predict(form, n, d),
                    }
                })
                .collect();
            let argmin = points
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.loss.total_cmp(&b.1.loss))
                .map(|(i, _)| i)
                .unwrap_or(0);
            Ok(IsoFlopCurve {
                budget,
                points,
                argmin,
            })
        })
        .collect()
}

fn csv_err(e: csv::Error) -> MdmError {
    MdmError::Format(e.to_string())
}

/// Rows `level, n, d`; an empty contour writes a single row with blank coordinates.
pub fn write_iso_curves_csv<W: Write>(curves: &[IsoCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["level", "n", "d"]).map_err(csv_err)?;
    for c in curves {
        if c.points.is_empty() {
            w.write_record([c.level.to_string().as_str(), "", ""])
                .map_err(csv_err)?;
        }
        for (n, d) in &c.points {
            w.write_record([c.level.to_string(), n.to_string(), d.to_string()])
                .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Rows `budget, n, d, loss, is_min`.
pub fn write_iso_flops_csv<W: Write>(curves: &[IsoFlopCurve], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["budget", "n", "d", "loss", "is_min"])
        .map_err(csv_err)?;
    for c in curves {
        for (i, pt) in c.points.iter().enumerate() {
            w.write_record([
                c.budget.to_string(),
                pt.n.to_string(),
                pt.d.to_string(),
                pt.loss.to_string(),
                (i == c.argmin).to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}
