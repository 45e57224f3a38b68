//! Two-variable power-law fits of loss against model size and data, with
//! held-out bootstrap validation, and the frontiers derived from them.
//!
//! Sizes and token counts are expressed in billions throughout.

pub mod frontier;
pub mod optim;

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{MdmError, Result};
use crate::trainer::RunRecord;
use optim::{basin_hopping, BasinHoppingOptions, LbfgsOptions};

pub use frontier::{
    compute_optimal, compute_optimal_numeric, d_star_of_n, iso_curves, iso_flops, Allocation,
    FlopsModel, IsoCurve, IsoFlopCurve,
};

pub const BILLION: f64 = 1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LawForm {
    /// `E + (A N^(-a/b) + B / D)^b`
    #[default]
    Kaplan,
    /// `E + A N^(-a) + B D^(-b)`
    Additive,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawParams {
    #[serde(rename = "E")]
    pub e: f64,
    #[serde(rename = "A")]
    pub big_a: f64,
    #[serde(rename = "B")]
    pub big_b: f64,
    pub a: f64,
    pub b: f64,
}

impl LawParams {
    pub fn new(e: f64, big_a: f64, big_b: f64, a: f64, b: f64) -> Self {
        LawParams {
            e,
            big_a,
            big_b,
            a,
            b,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok =
            self.e >= 0.0 && self.big_a > 0.0 && self.big_b > 0.0 && self.a > 0.0 && self.b > 0.0;
        if ok
            && [self.e, self.big_a, self.big_b, self.a, self.b]
                .iter()
                .all(|v| v.is_finite())
        {
            Ok(())
        } else {
            Err(MdmError::invalid(format!(
                "law parameters out of range: {self:?}"
            )))
        }
    }

    fn from_theta(t: &[f64]) -> Self {
        LawParams::new(t[0].exp(), t[1].exp(), t[2].exp(), t[3].exp(), t[4].exp())
    }

    fn theta(&self) -> Vec<f64> {
        [self.e.max(1e-300), self.big_a, self.big_b, self.a, self.b]
            .iter()
            .map(|v| v.ln())
            .collect()
    }

    pub fn predict(&self, form: LawForm, n: f64, d: f64) -> f64 {
        match form {
            LawForm::Kaplan => {
                self.e + (self.big_a * n.powf(-self.a / self.b) + self.big_b / d).powf(self.b)
            }
            LawForm::Additive => {
                self.e + self.big_a * n.powf(-self.a) + self.big_b * d.powf(-self.b)
            }
        }
    }

    /// Prediction and its gradient w.r.t. `(E, A, B, a, b)`.
    fn predict_grad(&self, form: LawForm, n: f64, d: f64) -> (f64, [f64; 5]) {
        let LawParams {
            e,
            big_a,
            big_b,
            a,
            b,
        } = *self;
        match form {
            LawForm::Kaplan => {
                let u = n.powf(-a / b);
                let p = big_a * u + big_b / d;
                let pb = p.powf(b);
                let pb1 = pb / p;
                let ln_n = n.ln();
                (
                    e + pb,
                    [
                        1.0,
                        b * pb1 * u,
                        b * pb1 / d,
                        -pb1 * big_a * u * ln_n,
                        pb * p.ln() + pb1 * big_a * u * a * ln_n / b,
                    ],
                )
            }
            LawForm::Additive => {
                let un = n.powf(-a);
                let ud = d.powf(-b);
                (
                    e + big_a * un + big_b * ud,
                    [1.0, un, ud, -big_a * un * n.ln(), -big_b * ud * d.ln()],
                )
            }
        }
    }
}

/// One observation: `n` and `d` in billions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingPoint {
    pub n: f64,
    pub d: f64,
    pub loss: f64,
}

impl ScalingPoint {
    /// Uses the non-embedding parameter count.
    pub fn from_record(r: &RunRecord) -> Self {
        ScalingPoint {
            n: r.n_nonembed as f64 / BILLION,
            d: r.d_tokens as f64 / BILLION,
            loss: r.final_loss,
        }
    }
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    n_nonembed: f64,
    #[allow(dead_code)]
    #[serde(default)]
    n_total: Option<f64>,
    d_tokens: f64,
    loss: f64,
}

/// Reads `n_nonembed, n_total, d_tokens, loss` rows with raw counts.
pub fn read_points_csv<R: Read>(input: R) -> Result<Vec<ScalingPoint>> {
    let mut rdr = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for row in rdr.deserialize::<CsvRow>() {
        let row = row.map_err(|e| MdmError::Format(e.to_string()))?;
        out.push(ScalingPoint {
            n: row.n_nonembed / BILLION,
            d: row.d_tokens / BILLION,
            loss: row.loss,
        });
    }
    Ok(out)
}

pub fn write_points_csv<W: Write>(points: &[ScalingPoint], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["n_nonembed", "n_total", "d_tokens", "loss"])
        .map_err(|e| MdmError::Format(e.to_string()))?;
    for p in points {
        let n = format!("{}", p.n * BILLION);
        w.write_record([
            n.as_str(),
            n.as_str(),
            &format!("{}", p.d * BILLION),
            &format!("{}", p.loss),
        ])
        .map_err(|e| MdmError::Format(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitOptions {
    pub form: LawForm,
    pub restarts: usize,
    pub bootstrap: usize,
    pub holdout: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            form: LawForm::Kaplan,
            restarts: 64,
            bootstrap: 20,
            holdout: 0.1,
            step: 0.5,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BootstrapReplicate {
    pub params: LawParams,
    pub heldout_r2: f64,
    pub heldout_mre: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub form: LawForm,
    pub params: LawParams,
    /// `a / b`, the exponent of the optimal-token frontier.
    pub alpha_frontier: f64,
    /// Mean squared log residual at the optimum.
    pub objective: f64,
    pub in_sample_r2: f64,
    pub in_sample_mre: f64,
    /// Pooled over every bootstrap replicate's held-out points.
    pub r2: f64,
    pub mre: f64,
    pub bootstrap: Vec<BootstrapReplicate>,
    pub n_points: usize,
    pub units: String,
}

impl ScalingFit {
    pub fn predict(&self, n: f64, d: f64) -> f64 {
        self.params.predict(self.form, n, d)
    }

    /// Median of each parameter across bootstrap replicates.
    pub fn bootstrap_median(&self) -> Option<LawParams> {
        if self.bootstrap.is_empty() {
            return None;
        }
        let med = |f: fn(&LawParams) -> f64| {
            let mut v: Vec<f64> = self.bootstrap.iter().map(|r| f(&r.params)).collect();
            v.sort_by(f64::total_cmp);
            let k = v.len();
            if k % 2 == 1 {
                v[k / 2]
            } else {
                0.5 * (v[k / 2 - 1] + v[k / 2])
            }
        };
        Some(LawParams::new(
            med(|p| p.e),
            med(|p| p.big_a),
            med(|p| p.big_b),
            med(|p| p.a),
            med(|p| p.b),
        ))
    }
}

/// Coefficient of determination and mean relative error of predictions.
pub fn r2_mre(pred: &[f64], obs: &[f64]) -> (f64, f64) {
    let n = obs.len() as f64;
    let mean = obs.iter().sum::<f64>() / n;
    let ss_tot: f64 = obs.iter().map(|o| (o - mean).powi(2)).sum();
    let ss_res: f64 = pred.iter().zip(obs).map(|(p, o)| (p - o).powi(2)).sum();
    let mre = pred
        .iter()
        .zip(obs)
        .map(|(p, o)| ((p - o) / o).abs())
        .sum::<f64>()
        / n;
    (1.0 - ss_res / ss_tot, mre)
}

fn log_objective(
    form: LawForm,
    points: &[ScalingPoint],
) -> impl Fn(&[f64]) -> (f64, Vec<f64>) + Sync + '_ {
    move |theta: &[f64]| {
        let p = LawParams::from_theta(theta);
        let nat = [p.e, p.big_a, p.big_b, p.a, p.b];
        let mut f = 0.0;
        let mut g = vec![0.0; 5];
        for pt in points {
            let (pred, dp) = p.predict_grad(form, pt.n, pt.d);
            let r = pred.ln() - pt.loss.ln();
            f += r * r;
            for k in 0..5 {
                g[k] += 2.0 * r * dp[k] * nat[k] / pred;
            }
        }
        let n = points.len() as f64;
        if !f.is_finite() {
            return (f64::INFINITY, vec![0.0; 5]);
        }
        (f / n, g.into_iter().map(|v| v / n).collect())
    }
}

fn default_starts(points: &[ScalingPoint]) -> Vec<Vec<f64>> {
    let min_loss = points.iter().map(|p| p.loss).fold(f64::INFINITY, f64::min);
    [
        LawParams::new(0.5 * min_loss, 1.0, 1.0, 0.3, 0.3),
        LawParams::new(0.9 * min_loss, 1.0, 100.0, 0.2, 0.2),
        LawParams::new(0.1 * min_loss, 10.0, 10.0, 0.5, 0.5),
    ]
    .iter()
    .map(LawParams::theta)
    .collect()
}

pub(crate) fn check_points(points: &[ScalingPoint]) -> Result<()> {
    if points.len() < 10 {
        return Err(MdmError::invalid(format!(
            "need at least 10 points, got {}",
            points.len()
        )));
    }
    if points.iter().any(|p| {
        !(p.n > 0.0
            && p.d > 0.0
            && p.loss > 0.0
            && p.n.is_finite()
            && p.d.is_finite()
            && p.loss.is_finite())
    }) {
        return Err(MdmError::invalid(
            "points need finite positive N, D and loss",
        ));
    }
    for (axis, get) in [
        ("N", (|p: &ScalingPoint| p.n) as fn(&ScalingPoint) -> f64),
        ("D", |p| p.d),
    ] {
        let lo = points.iter().map(get).fold(f64::INFINITY, f64::min);
        let hi = points.iter().map(get).fold(0.0, f64::max);
        if hi / lo < 10.0 * (1.0 - 1e-12) {
            return Err(MdmError::IllPosed(format!(
                "{axis} spans only {:.3} decades; at least one is needed",
                (hi / lo).log10()
            )));
        }
    }
    Ok(())
}

/// Fits one law to `points` by basin hopping over log-parameters.
pub fn fit_law<R: Rng + ?Sized>(
    points: &[ScalingPoint],
    form: LawForm,
    extra_starts: &[LawParams],
    opts: &BasinHoppingOptions,
    rng: &mut R,
) -> Result<(LawParams, f64)> {
    let objective = log_objective(form, points);
    let mut starts = default_starts(points);
    starts.extend(extra_starts.iter().map(LawParams::theta));
    let res = basin_hopping(&objective, &starts, opts, rng);
    if !res.best.value.is_finite() {
        return Err(MdmError::Numerical(
            "no start produced a finite objective".into(),
        ));
    }
    Ok((LawParams::from_theta(&res.best.x), res.best.value))
}

pub fn fit_power_law(points: &[ScalingPoint], opts: &FitOptions) -> Result<ScalingFit> {
    check_points(points)?;
    if !(opts.holdout > 0.0 && opts.holdout < 1.0) {
        return Err(MdmError::invalid("holdout fraction must lie in (0, 1)"));
    }
    let bh = BasinHoppingOptions {
        restarts: opts.restarts,
        step: opts.step,
        local: LbfgsOptions::default(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let (params, objective) = fit_law(points, opts.form, &[], &bh, &mut rng)?;
    let preds: Vec<f64> = points
        .iter()
        .map(|p| params.predict(opts.form, p.n, p.d))
        .collect();
    let obs: Vec<f64> = points.iter().map(|p| p.loss).collect();
    let (in_sample_r2, in_sample_mre) = r2_mre(&preds, &obs);

    let n_hold = ((points.len() as f64 * opts.holdout).round() as usize).max(1);
    let seeds: Vec<u64> = (0..opts.bootstrap).map(|_| rng.random()).collect();
    let replicates: Vec<(BootstrapReplicate, Vec<(f64, f64)>)> = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut idx: Vec<usize> = (0..points.len()).collect();
            idx.shuffle(&mut rng);
            let (hold, train) = idx.split_at(n_hold);
            let train_pts: Vec<ScalingPoint> = train.iter().map(|&i| points[i]).collect();
            let (p, _) = fit_law(&train_pts, opts.form, &[params], &bh, &mut rng)?;
            let pairs: Vec<(f64, f64)> = hold
                .iter()
                .map(|&i| {
                    (
                        p.predict(opts.form, points[i].n, points[i].d),
                        points[i].loss,
                    )
                })
                .collect();
            let (pr, ob): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
            let (r2, mre) = r2_mre(&pr, &ob);
            Ok((
                BootstrapReplicate {
                    params: p,
                    heldout_r2: r2,
                    heldout_mre: mre,
                },
                pairs,
            ))
        })
        .collect::<Result<_>>()?;
    let (r2, mre) = if replicates.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        let (pr, ob): (Vec<f64>, Vec<f64>) = replicates
            .iter()
            .flat_map(|(_, p)| p.iter().copied())
            .unzip();
        r2_mre(&pr, &ob)
    };

    Ok(ScalingFit {
        form: opts.form,
        params,
        alpha_frontier: params.a / params.b,
        objective,
        in_sample_r2,
        in_sample_mre,
        r2,
        mre,
        bootstrap: replicates.into_iter().map(|(r, _)| r).collect(),
        n_points: points.len(),
        units: "billions".into(),
    })
}

/// Points from a known law on a log-uniform box, with multiplicative noise
/// `1 + noise * z`, `z ~ N(0, 1)`.
pub fn planted_points<R: Rng + ?Sized>(
    params: LawParams,
    form: LawForm,
    n_range: (f64, f64),
    d_range: (f64, f64),
    count: usize,
    noise: f64,
    rng: &mut R,
) -> Vec<ScalingPoint> {
    let log_uniform = |(lo, hi): (f64, f64), rng: &mut R| {
        (lo.ln() + (hi.ln() - lo.ln()) * rng.random::<f64>()).exp()
    };
    (0..count)
        .map(|_| {
            let n = log_uniform(n_range, rng);
            let d = log_uniform(d_range, rng);
            let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
            ScalingPoint {
                n,
                d,
                loss: params.predict(form, n, d) * (1.0 + noise * z),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let p = LawParams::new(1.2, 0.5, 300.0, 0.14, 0.17);
        for form in [LawForm::Kaplan, LawForm::Additive] {
            let (_, g) = p.predict_grad(form, 0.3, 40.0);
            let nat = [p.e, p.big_a, p.big_b, p.a, p.b];
            for k in 0..5 {
                let h = 1e-6 * nat[k];
                let mut up = nat;
                up[k] += h;
                let mut dn = nat;
                dn[k] -= h;
                let f = |v: [f64; 5]| {
                    LawParams::new(v[0], v[1], v[2], v[3], v[4]).predict(form, 0.3, 40.0)
                };
                let fd = (f(up) - f(dn)) / (2.0 * h);
                assert!(
                    (fd - g[k]).abs() <= 1e-6 * fd.abs().max(1e-3),
                    "{form:?} {k}: {fd} vs {}",
                    g[k]
                );
            }
        }
    }

    #[test]
    fn span_and_count_checks() {
        let pts: Vec<ScalingPoint> = (0..12)
            .map(|i| ScalingPoint {
                n: 1.0 + i as f64 * 0.1,
                d: 10f64.powi(i % 4),
                loss: 2.0,
            })
            .collect();
        match check_points(&pts) {
            Err(MdmError::IllPosed(m)) => assert!(m.starts_with('N')),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            check_points(&pts[..5]),
            Err(MdmError::InvalidArgument(_))
        ));
    }

    #[test]
    fn csv_roundtrip() {
        let pts = vec![ScalingPoint {
            n: 0.25,
            d: 12.5,
            loss: 2.75,
        }];
        let mut buf = Vec::new();
        write_points_csv(&pts, &mut buf).unwrap();
        let back = read_points_csv(buf.as_slice()).unwrap();
        assert_eq!(back, pts);
    }
}
