//! Disagreement measures between a reference classifier and a competing
//! scorer, their worst-case-in-a-ball variants, and the adversarial head
//! term used during training.
//!
//! Every measure labels each point with the reference classifier's prediction
//! at the *clean* input, then asks how badly the competitor fits that label,
//! either at the clean point or anywhere in the perturbation ball. Two routes
//! compute them: a gradient-attack estimate for continuous inputs, and an
//! exact enumeration over a finite world (the route the bound checker
//! trusts).

use rayon::prelude::*;

use crate::attack::{derive_seed, pgd, PerturbationBudget};
use crate::error::{Error, Result};
use crate::loss::{ce_loss, ce_loss_grad, margin, mod_ce_rob_loss, mod_ce_rob_loss_grad, phi_rho, CeLoss, NegMarginLoss};
use crate::model::{Head, MlpScorer};
use crate::scorer::{predict_class, predict_from_logits, DiffScorer, LogitTable, Scorer};
use crate::synth::FiniteWorld;

/// Ramp-up coefficient for the feature extractor's share of the adversarial
/// block, as a function of training progress in `[0, 1]`. Identically
/// `tanh(5p)`: zero at the start, saturating toward one.
pub fn grl_coefficient(progress: f64) -> f64 {
    let p = progress.clamp(0.0, 1.0);
    2.0 / (1.0 + (-10.0 * p).exp()) - 1.0
}

/// The four disagreement rates between a competitor and a reference
/// classifier over one sample set. `disagree`/`margin` look at clean inputs;
/// the `robust_` pair takes the worst point of each perturbation ball.
/// Pointwise dominance makes `margin >= disagree`, `robust_* >= *`, and
/// `robust_margin >= robust_disagree` hold by construction.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DisparityReport {
    pub disagree: f64,
    pub margin: f64,
    pub robust_disagree: f64,
    pub robust_margin: f64,
    pub n: usize,
}

fn ramp_at(z: &[f64], label: usize, rho: f64) -> Result<f64> {
    phi_rho(margin(z, label)?, rho)
}

/// Attack-based estimate on continuous inputs, uniformly weighted. For every
/// sample the candidate set is the clean point plus the endpoints of two
/// gradient attacks on the competitor (margin-driven and cross-entropy
/// driven); both robust measures take their max over the same candidates, so
/// the dominance relations of [`DisparityReport`] survive the heuristic
/// search.
pub fn disparity_report<P, F>(
    competitor: &P,
    reference: &F,
    inputs: &[Vec<f64>],
    rho: f64,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<DisparityReport>
where
    P: DiffScorer + ?Sized,
    F: Scorer + Sync + ?Sized,
{
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("disparity over an empty sample set".into()));
    }
    let per_sample: Vec<(f64, f64, f64, f64)> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| -> Result<(f64, f64, f64, f64)> {
            let label = predict_class(reference, x)?;
            let z_clean = competitor.logits(x)?;
            let clean_dis = f64::from(predict_from_logits(&z_clean) != label);
            let clean_margin = ramp_at(&z_clean, label, rho)?;

            let a_margin =
                pgd(competitor, &NegMarginLoss, x, label, budget, derive_seed(seed, &[i as u64, 0]))?;
            let a_ce =
                pgd(competitor, &CeLoss, x, label, budget, derive_seed(seed, &[i as u64, 1]))?;
            let mut rob_dis = clean_dis;
            let mut rob_margin = clean_margin;
            for cand in [&a_margin.x_adv, &a_ce.x_adv] {
                let z = competitor.logits(cand)?;
                rob_dis = rob_dis.max(f64::from(predict_from_logits(&z) != label));
                rob_margin = rob_margin.max(ramp_at(&z, label, rho)?);
            }
            Ok((clean_dis, clean_margin, rob_dis, rob_margin))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_sample.len();
    let mean = |pick: fn(&(f64, f64, f64, f64)) -> f64| {
        per_sample.iter().map(pick).sum::<f64>() / n as f64
    };
    Ok(DisparityReport {
        disagree: mean(|t| t.0),
        margin: mean(|t| t.1),
        robust_disagree: mean(|t| t.2),
        robust_margin: mean(|t| t.3),
        n,
    })
}

/// Exact measure over a finite world under an explicit probability vector.
/// The robust pair enumerates every ball in full, so these are true suprema,
/// not search results.
pub fn disparity_report_exact(
    competitor: &LogitTable,
    reference: &LogitTable,
    world: &FiniteWorld,
    weights: &[f64],
    rho: f64,
) -> Result<DisparityReport> {
    let n = world.len();
    if competitor.len() != n || reference.len() != n {
        return Err(Error::ShapeMismatch {
            expected: n,
            got: competitor.len().min(reference.len()),
        });
    }
    if weights.len() != n {
        return Err(Error::ShapeMismatch { expected: n, got: weights.len() });
    }
    let mut report = DisparityReport {
        disagree: 0.0,
        margin: 0.0,
        robust_disagree: 0.0,
        robust_margin: 0.0,
        n,
    };
    for i in 0..n {
        let label = reference.predict(i);
        let w = weights[i];
        report.disagree += w * f64::from(competitor.predict(i) != label);
        report.margin += w * ramp_at(competitor.row(i), label, rho)?;
        let mut worst_dis = 0.0f64;
        let mut worst_margin = 0.0f64;
        for &j in world.ball(i) {
            worst_dis = worst_dis.max(f64::from(competitor.predict(j) != label));
            worst_margin = worst_margin.max(ramp_at(competitor.row(j), label, rho)?);
        }
        report.robust_disagree += w * worst_dis;
        report.robust_margin += w * worst_margin;
    }
    Ok(report)
}

/// Result of maximizing a source/target disparity gap over a finite
/// hypothesis class.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscrepancyReport {
    /// The signed supremum itself. Negative values are meaningful and are
    /// not clamped away.
    pub value: f64,
    /// Index of the first maximizing hypothesis.
    pub best_index: usize,
    /// Target-side disparity of the maximizer.
    pub target_term: f64,
    /// Source-side disparity of the maximizer.
    pub source_term: f64,
}

fn sup_gap<T, S>(class: &[LogitTable], mut target_of: T, mut source_of: S) -> Result<DiscrepancyReport>
where
    T: FnMut(&LogitTable) -> Result<f64>,
    S: FnMut(&LogitTable) -> Result<f64>,
{
    if class.is_empty() {
        return Err(Error::InvalidConfig("hypothesis class is empty".into()));
    }
    let mut best: Option<DiscrepancyReport> = None;
    for (idx, cand) in class.iter().enumerate() {
        let t = target_of(cand)?;
        let s = source_of(cand)?;
        let value = t - s;
        if best.as_ref().is_none_or(|b| value > b.value) {
            best = Some(DiscrepancyReport { value, best_index: idx, target_term: t, source_term: s });
        }
    }
    Ok(best.expect("nonempty class"))
}

/// Worst-case margin discrepancy of a fixed scored function between the two
/// domains: the supremum, over pseudo-labelers drawn from the class, of
/// (ball-worst margin disparity on the target) minus (clean margin disparity
/// on the source). The scored function is the one whose margins are taken
/// (and attacked, on the target side); each class member only relabels the
/// clean points.
pub fn robust_discrepancy_exact(
    scored: &LogitTable,
    labeler_class: &[LogitTable],
    world: &FiniteWorld,
    rho: f64,
) -> Result<DiscrepancyReport> {
    sup_gap(
        labeler_class,
        |labeler| {
            disparity_report_exact(scored, labeler, world, &world.target_weights, rho)
                .map(|r| r.robust_margin)
        },
        |labeler| {
            disparity_report_exact(scored, labeler, world, &world.source_weights, rho)
                .map(|r| r.margin)
        },
    )
}

/// Clean-input counterpart of [`robust_discrepancy_exact`]: margin disparity
/// on both sides, no perturbations anywhere.
pub fn plain_discrepancy_exact(
    scored: &LogitTable,
    labeler_class: &[LogitTable],
    world: &FiniteWorld,
    rho: f64,
) -> Result<DiscrepancyReport> {
    sup_gap(
        labeler_class,
        |labeler| {
            disparity_report_exact(scored, labeler, world, &world.target_weights, rho)
                .map(|r| r.margin)
        },
        |labeler| {
            disparity_report_exact(scored, labeler, world, &world.source_weights, rho)
                .map(|r| r.margin)
        },
    )
}

/// Value and parameter gradient of the auxiliary-head block of the training
/// objective:
///
/// `mean_t[ mod_ce(aux(x_t), label_t) ] - gamma * mean_s[ ce(aux(x_s), label_s) ]`
///
/// where the labels are the main head's (detached) predictions at clean
/// inputs, the target points are whatever the caller passes (perturbed during
/// adversarial training, clean for the plain variant), and only the feature
/// and auxiliary blocks of `grad` are populated — the main head receives no
/// gradient from this term.
#[derive(Debug, Clone)]
pub struct AdversarialBlock {
    pub value: f64,
    /// Mean modified cross-entropy over the target points.
    pub target_term: f64,
    /// Mean cross-entropy over the source points, before `gamma` weighting.
    pub source_term: f64,
    pub grad: Vec<f64>,
}

pub fn adversarial_block(
    model: &MlpScorer,
    source_inputs: &[Vec<f64>],
    source_labels: &[usize],
    target_inputs: &[Vec<f64>],
    target_labels: &[usize],
    gamma: f64,
) -> Result<AdversarialBlock> {
    if source_inputs.len() != source_labels.len() {
        return Err(Error::PairingMismatch {
            left: source_inputs.len(),
            right: source_labels.len(),
        });
    }
    if target_inputs.len() != target_labels.len() {
        return Err(Error::PairingMismatch {
            left: target_inputs.len(),
            right: target_labels.len(),
        });
    }
    if source_inputs.is_empty() || target_inputs.is_empty() {
        return Err(Error::InvalidConfig("adversarial block needs both batches nonempty".into()));
    }
    if !gamma.is_finite() || gamma <= 0.0 {
        return Err(Error::InvalidConfig(format!("gamma must be finite and > 0, got {gamma}")));
    }

    let mut grad = vec![0.0; model.params().len()];
    let m_t = target_inputs.len() as f64;
    let mut target_term = 0.0;
    for (x, &y) in target_inputs.iter().zip(target_labels) {
        let trace = model.forward_trace(x)?;
        let z = model.head_logits_from_trace(&trace, Head::Aux);
        target_term += mod_ce_rob_loss(&z, y)?;
        let dz = mod_ce_rob_loss_grad(&z, y)?;
        model.accumulate_param_grad(&trace, Head::Aux, &dz, 1.0 / m_t, &mut grad);
    }
    target_term /= m_t;

    let m_s = source_inputs.len() as f64;
    let mut source_term = 0.0;
    for (x, &y) in source_inputs.iter().zip(source_labels) {
        let trace = model.forward_trace(x)?;
        let z = model.head_logits_from_trace(&trace, Head::Aux);
        source_term += ce_loss(&z, y)?;
        let dz = ce_loss_grad(&z, y)?;
        model.accumulate_param_grad(&trace, Head::Aux, &dz, -gamma / m_s, &mut grad);
    }
    source_term /= m_s;

    Ok(AdversarialBlock {
        value: target_term - gamma * source_term,
        target_term,
        source_term,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::Norm;
    use crate::model::MlpDims;
    use crate::synth::make_finite_world;

    #[test]
    fn ramp_coefficient_is_tanh_of_scaled_progress() {
        assert_eq!(grl_coefficient(0.0), 0.0);
        for p in [0.1, 0.25, 0.5, 0.9, 1.0] {
            assert!((grl_coefficient(p) - (5.0 * p).tanh()).abs() < 1e-12);
        }
        assert!(grl_coefficient(0.3) < grl_coefficient(0.31));
        assert_eq!(grl_coefficient(-1.0), 0.0);
        assert_eq!(grl_coefficient(2.0), grl_coefficient(1.0));
    }

    /// Three-point line world, balls {0,1}, {0,1,2}, {1,2}; reference
    /// predicts [0,0,1], competitor predicts [0,1,1].
    fn line_fixture() -> (FiniteWorld, LogitTable, LogitTable) {
        let world = make_finite_world(1, 3, 0.5, 11).unwrap();
        let reference = LogitTable::from_rows(vec![
            vec![1.0, 0.0],
            vec![1.0, 0.0],
            vec![0.0, 1.0],
        ])
        .unwrap();
        let competitor = LogitTable::from_rows(vec![
            vec![2.0, 0.0],
            vec![0.0, 2.0],
            vec![0.0, 2.0],
        ])
        .unwrap();
        (world, reference, competitor)
    }

    #[test]
    fn exact_report_matches_hand_computation() {
        let (world, reference, competitor) = line_fixture();
        let w = [0.5, 0.25, 0.25];
        let rho = 1.0;
        let r = disparity_report_exact(&competitor, &reference, &world, &w, rho).unwrap();
        // clean disagreement at point 1 only
        assert!((r.disagree - 0.25).abs() < 1e-15);
        // margins of competitor at reference labels: +2 (phi=0), -2 (phi=1), +2 (phi=0)
        assert!((r.margin - 0.25).abs() < 1e-15);
        // every ball except none contains a disagreeing point: ball(0) has 1,
        // ball(1) has 1, ball(2) predicts 1 = label — wait, label(2)=1 and
        // competitor predicts 1 at both members of ball(2), so point 2 is safe.
        assert!((r.robust_disagree - 0.75).abs() < 1e-15);
        assert!((r.robust_margin - 0.75).abs() < 1e-15);
    }

    #[test]
    fn exact_report_dominance_chain_holds() {
        let (world, reference, competitor) = line_fixture();
        let r = disparity_report_exact(
            &competitor,
            &reference,
            &world,
            &world.target_weights.clone(),
            0.7,
        )
        .unwrap();
        assert!(r.margin >= r.disagree);
        assert!(r.robust_margin >= r.robust_disagree);
        assert!(r.robust_disagree >= r.disagree);
        assert!(r.robust_margin >= r.margin);
    }

    #[test]
    fn discrepancy_matches_hand_computation_and_breaks_ties_low() {
        let (mut world, reference, competitor) = line_fixture();
        world.source_weights = vec![0.5, 0.25, 0.25];
        world.target_weights = vec![0.25, 0.25, 0.5];
        let flipped = LogitTable::from_rows(vec![
            vec![0.0, 1.0],
            vec![0.0, 1.0],
            vec![1.0, 0.0],
        ])
        .unwrap();
        // Scored function is the competitor (margins +-2, so every ramp value
        // is 0 or 1 at rho=1). Labeler "reference" yields source disparity
        // 0.25 and robust target disparity 0.5; labeler "flipped" yields 0.75
        // and 1.0. Both gaps are 0.25, so the tie resolves to index 0.
        let rep = robust_discrepancy_exact(
            &competitor,
            &[reference.clone(), flipped],
            &world,
            1.0,
        )
        .unwrap();
        assert_eq!(rep.best_index, 0);
        assert!((rep.value - 0.25).abs() < 1e-15);
        assert!((rep.target_term - 0.5).abs() < 1e-15);
        assert!((rep.source_term - 0.25).abs() < 1e-15);
        assert!((rep.target_term - rep.source_term - rep.value).abs() < 1e-15);
    }

    #[test]
    fn discrepancy_keeps_negative_values() {
        // Zero-radius balls make robust and clean disparities coincide, so
        // the gap reduces to a weight difference, here driven negative.
        let mut world = make_finite_world(1, 3, 0.0, 11).unwrap();
        world.source_weights = vec![0.25, 0.5, 0.25];
        world.target_weights = vec![0.5, 0.25, 0.25];
        let (_, reference, competitor) = line_fixture();
        let rep = robust_discrepancy_exact(&competitor, &[reference], &world, 1.0).unwrap();
        assert!((rep.value - (-0.25)).abs() < 1e-15);
    }

    #[test]
    fn plain_discrepancy_never_exceeds_robust() {
        let (world, reference, competitor) = line_fixture();
        let class = vec![competitor, reference.clone()];
        for rho in [0.5, 1.0, 2.0] {
            let plain = plain_discrepancy_exact(&reference, &class, &world, rho).unwrap();
            let robust = robust_discrepancy_exact(&reference, &class, &world, rho).unwrap();
            assert!(robust.value >= plain.value - 1e-15);
        }
    }

    #[test]
    fn attack_report_at_zero_radius_matches_exact_on_grid() {
        let world = make_finite_world(1, 5, 0.0, 4).unwrap();
        let model = MlpScorer::new(MlpDims::new(1, 6, 2).unwrap(), 31);
        let competitor = model.view(Head::Aux);
        let reference = model.view(Head::Main);
        let budget = PerturbationBudget::new(0.0, Norm::LInf, 0.0, 2, true, None).unwrap();
        let rho = 4.0f64.ln();
        let emp = disparity_report(
            &competitor,
            &reference,
            &world.as_dataset("grid", crate::data::DomainTag::Source, None).unwrap().inputs,
            rho,
            &budget,
            7,
        )
        .unwrap();
        let uniform = vec![1.0 / world.len() as f64; world.len()];
        let exact = disparity_report_exact(
            &LogitTable::snapshot(&competitor, &world).unwrap(),
            &LogitTable::snapshot(&reference, &world).unwrap(),
            &world,
            &uniform,
            rho,
        )
        .unwrap();
        assert!((emp.disagree - exact.disagree).abs() < 1e-12);
        assert!((emp.margin - exact.margin).abs() < 1e-12);
        assert!((emp.robust_disagree - exact.robust_disagree).abs() < 1e-12);
        assert!((emp.robust_margin - exact.robust_margin).abs() < 1e-12);
    }

    #[test]
    fn adversarial_block_value_and_gradient_check() {
        let model = MlpScorer::new(MlpDims::new(2, 4, 3).unwrap(), 77);
        let xs = vec![vec![0.2, 0.4], vec![0.9, 0.1]];
        let ys = vec![0usize, 2];
        let xt = vec![vec![0.5, 0.5], vec![0.1, 0.8], vec![0.3, 0.3]];
        let yt = vec![1usize, 1, 0];
        let gamma = 3.0;
        let block = adversarial_block(&model, &xs, &ys, &xt, &yt, gamma).unwrap();

        // value recomputed directly
        let mut t = 0.0;
        for (x, &y) in xt.iter().zip(&yt) {
            t += mod_ce_rob_loss(&model.head_logits(x, Head::Aux).unwrap(), y).unwrap();
        }
        t /= xt.len() as f64;
        let mut s = 0.0;
        for (x, &y) in xs.iter().zip(&ys) {
            s += ce_loss(&model.head_logits(x, Head::Aux).unwrap(), y).unwrap();
        }
        s /= xs.len() as f64;
        assert!((block.value - (t - gamma * s)).abs() < 1e-12);

        // main head block of the gradient is identically zero
        for i in model.main_head_range() {
            assert_eq!(block.grad[i], 0.0);
        }

        // finite differences across feature and aux blocks
        let h = 1e-6;
        for idx in (0..model.params().len()).step_by(5) {
            let fd = {
                let mut p = model.clone();
                p.params_mut()[idx] += h;
                let vp = adversarial_block(&p, &xs, &ys, &xt, &yt, gamma).unwrap().value;
                let mut m = model.clone();
                m.params_mut()[idx] -= h;
                let vm = adversarial_block(&m, &xs, &ys, &xt, &yt, gamma).unwrap().value;
                (vp - vm) / (2.0 * h)
            };
            assert!(
                (fd - block.grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "param {idx}: fd {fd} vs grad {}",
                block.grad[idx]
            );
        }
    }
}
