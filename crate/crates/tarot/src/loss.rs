//! Margins, the ramp loss, and the three cross-entropy style losses of the
//! adaptation objective, each with its logit gradient.
//!
//! Notation used in the doc comments: `z` is a logit vector, `y` a label,
//! `s_y` the softmax probability of `y`, and `M(z, y) = z_y - max_{j != y} z_j`
//! the margin. The ramp loss with width `rho > 0` is
//!
//! ```text
//! phi_rho(m) = 0         if m >= rho
//!            = 1 - m/rho if 0 <= m <= rho
//!            = 1         if m <= 0
//! ```
//!
//! so `phi_rho(M(z, y))` dominates the 0-1 error indicator pointwise.

use crate::attack::{pgd, AttackResult, PerturbationBudget};
use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::scorer::{logsumexp, softmax_scores, DiffScorer, ScalarLoss, Scorer};
use crate::synth::FiniteWorld;

/// Softmax probabilities are clamped to at most `1 - MOD_CE_CLAMP` inside the
/// modified cross entropy so its log stays finite.
pub const MOD_CE_CLAMP: f64 = 1e-7;

/// Margin of `logits` at class `y`: the `y` logit minus the best other logit.
pub fn margin(logits: &[f64], y: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidConfig("margin needs at least two classes".into()));
    }
    if y >= logits.len() {
        return Err(Error::LabelRange { label: y, classes: logits.len() });
    }
    let best_other = logits
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != y)
        .map(|(_, &v)| v)
        .fold(f64::NEG_INFINITY, f64::max);
    Ok(logits[y] - best_other)
}

/// Ramp loss with width `rho`.
pub fn phi_rho(m: f64, rho: f64) -> Result<f64> {
    if !(rho > 0.0) || !rho.is_finite() {
        return Err(Error::InvalidConfig(format!("rho must be finite and > 0, got {rho}")));
    }
    Ok(if m >= rho {
        0.0
    } else if m <= 0.0 {
        1.0
    } else {
        1.0 - m / rho
    })
}

/// Cross entropy `-log s_y`, computed in log space as `lse(z) - z_y`.
pub fn ce_loss(logits: &[f64], y: usize) -> Result<f64> {
    check_label(logits, y)?;
    Ok(logsumexp(logits) - logits[y])
}

/// Gradient of `ce_loss` in the logits: `s - e_y`.
pub fn ce_loss_grad(logits: &[f64], y: usize) -> Result<Vec<f64>> {
    check_label(logits, y)?;
    let mut g = softmax_scores(logits)?;
    g[y] -= 1.0;
    Ok(g)
}

/// Modified cross entropy `log(1 - s_y)` with `s_y` clamped to at most
/// `1 - 1e-7`. This is the target-side disparity surrogate; note it is
/// nonpositive and unbounded below only through the clamp.
pub fn mod_ce_rob_loss(adv_logits: &[f64], y: usize) -> Result<f64> {
    check_label(adv_logits, y)?;
    let s = softmax_scores(adv_logits)?;
    let sy = s[y].min(1.0 - MOD_CE_CLAMP);
    Ok((-sy).ln_1p())
}

/// Gradient of `mod_ce_rob_loss` in the logits. Inside the clamp the function
/// is constant, so the gradient there is zero.
pub fn mod_ce_rob_loss_grad(adv_logits: &[f64], y: usize) -> Result<Vec<f64>> {
    check_label(adv_logits, y)?;
    let s = softmax_scores(adv_logits)?;
    let sy = s[y];
    if sy > 1.0 - MOD_CE_CLAMP {
        return Ok(vec![0.0; adv_logits.len()]);
    }
    // d/dz_j log(1 - s_y) = s_y (s_j - [j == y]) / (1 - s_y)
    let scale = sy / (1.0 - sy);
    Ok(s
        .iter()
        .enumerate()
        .map(|(j, &sj)| scale * (sj - if j == y { 1.0 } else { 0.0 }))
        .collect())
}

/// Robust cross entropy: ordinary cross entropy evaluated at adversarial
/// logits. Kept as its own name because the objective treats it as a distinct
/// term.
pub fn ce_rob_loss(adv_logits: &[f64], y: usize) -> Result<f64> {
    ce_loss(adv_logits, y)
}

pub fn ce_rob_loss_grad(adv_logits: &[f64], y: usize) -> Result<Vec<f64>> {
    ce_loss_grad(adv_logits, y)
}

fn check_label(logits: &[f64], y: usize) -> Result<()> {
    if logits.is_empty() {
        return Err(Error::ShapeMismatch { expected: 1, got: 0 });
    }
    if y >= logits.len() {
        return Err(Error::LabelRange { label: y, classes: logits.len() });
    }
    Ok(())
}

/// Cross entropy as an attack objective.
pub struct CeLoss;

impl ScalarLoss for CeLoss {
    fn value(&self, logits: &[f64], y: usize) -> f64 {
        ce_loss(logits, y).unwrap_or(f64::INFINITY)
    }

    fn logit_grad(&self, logits: &[f64], y: usize) -> Vec<f64> {
        ce_loss_grad(logits, y).unwrap_or_else(|_| vec![0.0; logits.len()])
    }
}

/// Negative margin as an attack objective: maximizing it minimizes the margin
/// at `y`, which is the right surrogate when the quantity under attack is a
/// ramp loss of the margin (the ramp itself has zero gradient on its flats).
pub struct NegMarginLoss;

impl ScalarLoss for NegMarginLoss {
    fn value(&self, logits: &[f64], y: usize) -> f64 {
        -margin(logits, y).unwrap_or(f64::NEG_INFINITY)
    }

    fn logit_grad(&self, logits: &[f64], y: usize) -> Vec<f64> {
        // -d M/dz = e_{best other} - e_y, with the best other resolved to the
        // lowest index on ties (a valid subgradient there).
        let mut g = vec![0.0; logits.len()];
        let mut best = usize::MAX;
        let mut best_v = f64::NEG_INFINITY;
        for (j, &v) in logits.iter().enumerate() {
            if j != y && v > best_v {
                best = j;
                best_v = v;
            }
        }
        if best != usize::MAX {
            g[best] = 1.0;
            g[y] = -1.0;
        }
        g
    }
}

/// How the inner maximization over the perturbation ball is carried out.
pub enum BallMaximizer<'a> {
    /// Projected gradient ascent in the continuous ball (a lower bound).
    Pgd { budget: &'a PerturbationBudget, seed: u64 },
    /// Exhaustive enumeration of a finite world's ball (exact). Dataset
    /// inputs must be world points.
    Exact { world: &'a FiniteWorld },
}

/// Average ramp loss of the margin at the true labels.
pub fn margin_risk<S: Scorer + ?Sized>(f: &S, data: &DomainDataset, rho: f64) -> Result<f64> {
    let labels = data.labels()?;
    data.check_labels(f.class_count())?;
    let mut total = 0.0;
    for (x, &y) in data.inputs.iter().zip(labels) {
        total += phi_rho(margin(&f.logits(x)?, y)?, rho)?;
    }
    Ok(total / data.len() as f64)
}

/// Average worst-case ramp loss of the margin over the perturbation ball.
///
/// With the exact maximizer this is the true value on the finite world; with
/// pgd it is a lower bound obtained by minimizing the margin (the clean point
/// also competes, so the result never falls below `margin_risk`).
pub fn robust_margin_risk<S>(
    f: &S,
    data: &DomainDataset,
    rho: f64,
    maximizer: &BallMaximizer,
) -> Result<f64>
where
    S: DiffScorer + ?Sized,
{
    let labels = data.labels()?;
    data.check_labels(f.class_count())?;
    let mut total = 0.0;
    match maximizer {
        BallMaximizer::Exact { world } => {
            for (x, &y) in data.inputs.iter().zip(labels) {
                let idx = world.point_index(x).ok_or(Error::NotAWorldPoint)?;
                let mut worst = 0.0f64;
                for &j in world.ball(idx) {
                    let v = phi_rho(margin(&f.logits(world.point(j))?, y)?, rho)?;
                    worst = worst.max(v);
                }
                total += worst;
            }
        }
        BallMaximizer::Pgd { budget, seed } => {
            for (i, (x, &y)) in data.inputs.iter().zip(labels).enumerate() {
                let res: AttackResult =
                    pgd(f, &NegMarginLoss, x, y, budget, seed.wrapping_add(i as u64))?;
                let clean = phi_rho(margin(&f.logits(x)?, y)?, rho)?;
                let adv = phi_rho(margin(&f.logits(&res.x_adv)?, y)?, rho)?;
                total += adv.max(clean);
            }
        }
    }
    Ok(total / data.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ce_at_uniform_binary_logits_is_ln2() {
        assert!((ce_loss(&[0.0, 0.0], 0).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn ce_with_huge_margin_stays_stable() {
        // Two independent routes to the same tiny number.
        let via_impl = ce_loss(&[10.0, -10.0], 0).unwrap();
        let via_log1p = (-20.0f64).exp().ln_1p();
        // The logsumexp route cancels against 10, so agreement is absolute
        // (a few ulps of 10), not relative.
        assert!((via_impl - via_log1p).abs() < 4e-15);
        assert!(via_impl > 0.0);
    }

    #[test]
    fn mod_ce_example() {
        // logits (ln 2, 0) at y = 0: s_0 = 2/3, log(1/3).
        let v = mod_ce_rob_loss(&[std::f64::consts::LN_2, 0.0], 0).unwrap();
        assert!((v - (1.0f64 / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn mod_ce_clamps_confident_logits() {
        let v = mod_ce_rob_loss(&[200.0, 0.0], 0).unwrap();
        assert!((v - MOD_CE_CLAMP.ln()).abs() < 1e-9);
        let g = mod_ce_rob_loss_grad(&[200.0, 0.0], 0).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn margin_and_ramp_fixtures() {
        assert_eq!(margin(&[2.0, 0.5, 1.0], 0).unwrap(), 1.0);
        assert_eq!(margin(&[2.0, 0.5, 1.0], 1).unwrap(), -1.5);
        assert!(margin(&[1.0], 0).is_err());
        let rho = 2.0;
        assert_eq!(phi_rho(3.0, rho).unwrap(), 0.0);
        assert_eq!(phi_rho(1.0, rho).unwrap(), 0.5);
        assert_eq!(phi_rho(-0.5, rho).unwrap(), 1.0);
        assert_eq!(phi_rho(0.0, rho).unwrap(), 1.0);
        assert!(phi_rho(1.0, 0.0).is_err());
    }
}
