//! Weighted masked cross-entropy with an optional z-loss term.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{logsumexp, Logits};
use crate::vocab::TokenId;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// `w * mean_{i in I} CE_i`.
    pub diffusion: f64,
    /// `lambda * mean_{i in I} lse_i^2`.
    pub z: f64,
    pub total: f64,
    /// Unweighted CE at each masked position, in the order of `masked`.
    pub per_position: Vec<f64>,
}

/// Loss over the masked positions `masked`. An empty set yields zero loss.
pub fn masked_loss(
    logits: &Logits,
    target: &[TokenId],
    masked: &[usize],
    weight: f64,
    z_coef: f64,
) -> LossBreakdown {
    let mut out = LossBreakdown::default();
    if masked.is_empty() {
        return out;
    }
    let n = masked.len() as f64;
    let mut ce_sum = 0.0;
    let mut z_sum = 0.0;
    for &i in masked {
        let row = logits.row(i);
        let lse = logsumexp(row.iter());
        let ce = lse - row[target[i] as usize];
        out.per_position.push(ce);
        ce_sum += ce;
        z_sum += lse * lse;
    }
    out.diffusion = weight * ce_sum / n;
    out.z = if z_coef == 0.0 {
        0.0
    } else {
        z_coef * z_sum / n
    };
    out.total = out.diffusion + out.z;
    out
}

/// Same as [`masked_loss`] plus the derivative of `total` w.r.t. every logit.
pub fn masked_loss_with_grad(
    logits: &Logits,
    target: &[TokenId],
    masked: &[usize],
    weight: f64,
    z_coef: f64,
) -> (LossBreakdown, Array2<f64>) {
    let loss = masked_loss(logits, target, masked, weight, z_coef);
    let mut grad = Array2::zeros(logits.scores.raw_dim());
    if masked.is_empty() {
        return (loss, grad);
    }
    let n = masked.len() as f64;
    for &i in masked {
        let row = logits.row(i);
        let lse = logsumexp(row.iter());
        let coef = (weight + 2.0 * z_coef * lse) / n;
        let mut g = grad.row_mut(i);
        for (v, (gv, &h)) in g.iter_mut().zip(row.iter()).enumerate() {
            *gv = coef * (h - lse).exp();
            if v == target[i] as usize {
                *gv -= weight / n;
            }
        }
    }
    (loss, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn uniform_logits_give_log_v() {
        let logits = Logits::new(Array2::zeros((3, 8)));
        let loss = masked_loss(&logits, &[0, 1, 2], &[1, 2], 1.0, 0.0);
        assert!((loss.diffusion - 8f64.ln()).abs() < 1e-12);
        assert_eq!(loss.z, 0.0);
    }

    #[test]
    fn weight_scales_diffusion_term_only() {
        let logits = Logits::new(array![[1.0, 2.0, 0.5], [0.0, -1.0, 3.0]]);
        let a = masked_loss(&logits, &[1, 2], &[0, 1], 1.0, 0.1);
        let b = masked_loss(&logits, &[1, 2], &[0, 1], 3.0, 0.1);
        assert!((b.diffusion - 3.0 * a.diffusion).abs() < 1e-12);
        assert!((a.z - b.z).abs() < 1e-15);
    }

    #[test]
    fn unmasked_positions_do_not_contribute() {
        let logits = Logits::new(array![[9.0, -9.0], [0.0, 0.0]]);
        let loss = masked_loss(&logits, &[1, 0], &[1], 1.0, 0.0);
        assert!((loss.total - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let scores = array![
            [0.3, -1.2, 2.0, 0.1],
            [1.5, 0.2, -0.4, 0.9],
            [0.0, 0.7, -2.0, 1.1]
        ];
        let target = [2, 0, 3];
        let masked = [0, 2];
        let (_, g) =
            masked_loss_with_grad(&Logits::new(scores.clone()), &target, &masked, 1.3, 0.2);
        let h = 1e-6;
        for i in 0..3 {
            for v in 0..4 {
                let mut up = scores.clone();
                up[[i, v]] += h;
                let mut dn = scores.clone();
                dn[[i, v]] -= h;
                let fd = (masked_loss(&Logits::new(up), &target, &masked, 1.3, 0.2).total
                    - masked_loss(&Logits::new(dn), &target, &masked, 1.3, 0.2).total)
                    / (2.0 * h);
                assert!(
                    (fd - g[[i, v]]).abs() < 1e-7,
                    "({i},{v}) {fd} vs {}",
                    g[[i, v]]
                );
            }
        }
    }
}
