//! Unconstrained smooth minimization: L-BFGS with backtracking line search,
//! wrapped in greedy basin hopping over random log-space perturbations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

/// Objective value and gradient at a point.
pub trait Objective: Sync {
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>);

    fn value(&self, x: &[f64]) -> f64 {
        self.value_grad(x).0
    }
}

impl<F> Objective for F
where
    F: Fn(&[f64]) -> (f64, Vec<f64>) + Sync,
{
    fn value_grad(&self, x: &[f64]) -> (f64, Vec<f64>) {
        self(x)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LbfgsOptions {
    pub max_iter: usize,
    pub memory: usize,
    /// Stop when the max-norm of the gradient drops below this.
    pub g_tol: f64,
}

impl Default for LbfgsOptions {
    fn default() -> Self {
        LbfgsOptions {
            max_iter: 3000,
            memory: 10,
            g_tol: 1e-15,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LocalResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, v| m.max(v.abs()))
}

pub fn lbfgs(f: &dyn Objective, x0: &[f64], opts: &LbfgsOptions) -> LocalResult {
    let n = x0.len();
    let mut x = x0.to_vec();
    let (mut fx, mut g) = f.value_grad(&x);
    if !fx.is_finite() || g.iter().any(|v| !v.is_finite()) {
        return LocalResult {
            x,
            value: f64::INFINITY,
            iterations: 0,
            converged: false,
        };
    }
    let mut s_hist: Vec<Vec<f64>> = Vec::with_capacity(opts.memory);
    let mut y_hist: Vec<Vec<f64>> = Vec::with_capacity(opts.memory);
    let mut stalls = 0;

    for iter in 0..opts.max_iter {
        if max_abs(&g) <= opts.g_tol {
            return LocalResult {
                x,
                value: fx,
                iterations: iter,
                converged: true,
            };
        }
        // two-loop recursion
        let mut q = g.clone();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &q);
            q.iter_mut().zip(y).for_each(|(qi, yi)| *qi -= a * yi);
            alphas.push((rho, a));
        }
        let gamma = match (s_hist.last(), y_hist.last()) {
            (Some(s), Some(y)) => dot(s, y) / dot(y, y),
            _ => 1.0 / max_abs(&g).max(1.0),
        };
        q.iter_mut().for_each(|v| *v *= gamma);
        for ((s, y), (rho, a)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let b = rho * dot(y, &q);
            q.iter_mut().zip(s).for_each(|(qi, si)| *qi += (a - b) * si);
        }
        let mut dir: Vec<f64> = q.iter().map(|v| -v).collect();
        let mut slope = dot(&g, &dir);
        if !(slope < 0.0) {
            s_hist.clear();
            y_hist.clear();
            dir = g.iter().map(|v| -v).collect();
            slope = -dot(&g, &g);
        }

        let mut step = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let xn: Vec<f64> = x.iter().zip(&dir).map(|(xi, di)| xi + step * di).collect();
            let (fnew, gnew) = f.value_grad(&xn);
            if fnew.is_finite()
                && gnew.iter().all(|v| v.is_finite())
                && fnew <= fx + 1e-4 * step * slope
            {
                accepted = Some((xn, fnew, gnew));
                break;
            }
            step *= 0.5;
        }
        let Some((xn, fnew, gnew)) = accepted else {
            return LocalResult {
                x,
                value: fx,
                iterations: iter,
                converged: max_abs(&g) <= opts.g_tol.sqrt(),
            };
        };
        let s: Vec<f64> = xn.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = gnew.iter().zip(&g).map(|(a, b)| a - b).collect();
        let sy = dot(&s, &y);
        if sy > 1e-300 * n as f64 && sy.is_finite() {
            if s_hist.len() == opts.memory {
                s_hist.remove(0);
                y_hist.remove(0);
            }
            s_hist.push(s);
            y_hist.push(y);
        }
        stalls = if fnew >= fx { stalls + 1 } else { 0 };
        x = xn;
        fx = fnew;
        g = gnew;
        if stalls >= 5 {
            break;
        }
    }
    LocalResult {
        converged: max_abs(&g) <= opts.g_tol.sqrt(),
        x,
        value: fx,
        iterations: opts.max_iter,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BasinHoppingOptions {
    pub restarts: usize,
    /// Std of the Gaussian jump applied to the incumbent.
    pub step: f64,
    pub local: LbfgsOptions,
}

impl Default for BasinHoppingOptions {
    fn default() -> Self {
        BasinHoppingOptions {
            restarts: 64,
            step: 0.5,
            local: LbfgsOptions::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GlobalResult {
    pub best: LocalResult,
    /// Objective value after each hop's local polish.
    pub trace: Vec<f64>,
}

/// Greedy basin hopping: perturb the incumbent, polish locally, keep improvements.
pub fn basin_hopping<R: Rng + ?Sized>(
    f: &dyn Objective,
    starts: &[Vec<f64>],
    opts: &BasinHoppingOptions,
    rng: &mut R,
) -> GlobalResult {
    let mut best: Option<LocalResult> = None;
    let mut trace = Vec::with_capacity(starts.len() + opts.restarts);
    for x0 in starts {
        let r = lbfgs(f, x0, &opts.local);
        trace.push(r.value);
        if best.as_ref().is_none_or(|b| r.value < b.value) {
            best = Some(r);
        }
    }
    let mut best = best.expect("at least one start");
    for _ in 0..opts.restarts {
        let x0: Vec<f64> = best
            .x
            .iter()
            .map(|v| v + opts.step * Distribution::<f64>::sample(&StandardNormal, rng))
            .collect();
        let r = lbfgs(f, &x0, &opts.local);
        trace.push(r.value);
        if r.value < best.value {
            best = r;
        }
    }
    // Final polish from the incumbent in case the last accepted run stopped early.
    let polished = lbfgs(f, &best.x, &opts.local);
    if polished.value <= best.value {
        best = polished;
    }
    GlobalResult { best, trace }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section(f: impl Fn(f64) -> f64, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let inv_phi = (5f64.sqrt() - 1.0) / 2.0;
    let mut c = hi - inv_phi * (hi - lo);
    let mut d = lo + inv_phi * (hi - lo);
    let (mut fc, mut fd) = (f(c), f(d));
    while (hi - lo).abs() > tol {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - inv_phi * (hi - lo);
            fc = f(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + inv_phi * (hi - lo);
            fd = f(d);
        }
    }
    0.5 * (lo + hi)
}

/// Scans `n` evenly spaced cells of `[lo, hi]` and returns the bracket around the
/// smallest sample, or `None` when the minimum sits on the boundary.
pub fn bracket_minimum(f: impl Fn(f64) -> f64, lo: f64, hi: f64, n: usize) -> Option<(f64, f64)> {
    let xs: Vec<f64> = (0..=n)
        .map(|i| lo + (hi - lo) * i as f64 / n as f64)
        .collect();
    let (k, _) = xs
        .iter()
        .map(|&x| f(x))
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(&b.1))?;
    if k == 0 || k == n {
        None
    } else {
        Some((xs[k - 1], xs[k + 1]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rosenbrock(x: &[f64]) -> (f64, Vec<f64>) {
        let (a, b) = (x[0], x[1]);
        let f = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
        let g = vec![
            -2.0 * (1.0 - a) - 400.0 * a * (b - a * a),
            200.0 * (b - a * a),
        ];
        (f, g)
    }

    #[test]
    fn lbfgs_solves_rosenbrock() {
        let r = lbfgs(&rosenbrock, &[-1.2, 1.0], &LbfgsOptions::default());
        assert!(
            (r.x[0] - 1.0).abs() < 1e-8 && (r.x[1] - 1.0).abs() < 1e-8,
            "{:?}",
            r
        );
    }

    #[test]
    fn basin_hopping_escapes_local_minimum() {
        // Double well with the deeper basin at x ~ -1.
        let f = |x: &[f64]| {
            let v = x[0];
            (
                (v * v - 1.0).powi(2) + 0.3 * v,
                vec![4.0 * v * (v * v - 1.0) + 0.3],
            )
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opts = BasinHoppingOptions {
            restarts: 20,
            step: 1.0,
            ..Default::default()
        };
        let r = basin_hopping(&f, &[vec![1.0]], &opts, &mut rng);
        assert!(r.best.x[0] < 0.0);
    }

    #[test]
    fn golden_section_finds_parabola_vertex() {
        let x = golden_section(|x| (x - 0.3).powi(2), -2.0, 5.0, 1e-12);
        assert!((x - 0.3).abs() < 1e-9);
    }

    #[test]
    fn bracket_rejects_boundary_minimum() {
        assert!(bracket_minimum(|x| x, 0.0, 1.0, 10).is_none());
        let (a, b) = bracket_minimum(|x| (x - 0.55).abs(), 0.0, 1.0, 10).unwrap();
        assert!(a < 0.55 && 0.55 < b);
    }
}
