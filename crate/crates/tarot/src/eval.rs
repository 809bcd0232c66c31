//! Accuracy metrics (standard, attack-based robust, and exact robust on
//! finite worlds), the empirical local-smoothness estimator, and checkpoint
//! selection.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attack::{derive_seed, pgd, BoxBounds, PerturbationBudget};
use crate::data::{DomainDataset, DomainTag};
use crate::error::{Error, Result};
use crate::loss::CeLoss;
use crate::scorer::{predict_class, DiffScorer, LogitTable, ScalarLoss, Scorer};
use crate::synth::FiniteWorld;
use crate::train::MetricsRecord;

/// Ratio denominators are floored here so a candidate that drifts onto its
/// anchor cannot produce an infinite estimate.
const DENOM_FLOOR: f64 = 1e-12;

/// Accuracy summary of one model on one dataset. `robust_acc` is keyed by a
/// printable attack description.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub domain_tag: DomainTag,
    pub n_samples: usize,
    pub standard_acc: f64,
    pub robust_acc: BTreeMap<String, f64>,
    pub lipschitz: Option<f64>,
}

fn nonempty(data: &DomainDataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::InvalidConfig("cannot evaluate on an empty dataset".into()));
    }
    Ok(())
}

/// Fraction of samples whose clean prediction matches the label.
pub fn standard_accuracy<S: Scorer + ?Sized>(f: &S, data: &DomainDataset) -> Result<f64> {
    nonempty(data)?;
    let labels = data.labels()?;
    data.check_labels(f.class_count())?;
    let mut correct = 0usize;
    for (x, &y) in data.inputs.iter().zip(labels) {
        if predict_class(f, x)? == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Fraction of samples that are correct at the clean point AND at the attack
/// point. Cleanly misclassified samples are still attacked (the metric is a
/// pure function of model and attack), they just cannot count as robust, so
/// the result never exceeds [`standard_accuracy`]. Per-sample attack seeds
/// derive from `seed` by index.
pub fn robust_accuracy<S>(
    f: &S,
    data: &DomainDataset,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<f64>
where
    S: DiffScorer + Sync + ?Sized,
{
    nonempty(data)?;
    let labels = data.labels()?;
    data.check_labels(f.class_count())?;
    let hits = data
        .inputs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| -> Result<usize> {
            let clean_ok = predict_class(f, x)? == y;
            let res = pgd(f, &CeLoss, x, y, budget, seed.wrapping_add(i as u64))?;
            let adv_ok = predict_class(f, &res.x_adv)? == y;
            Ok(usize::from(clean_ok && adv_ok))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / data.len() as f64)
}

/// Exact robust accuracy on a finite world: a point counts only if every
/// point of its perturbation ball is predicted as its label.
pub fn robust_accuracy_exact<S: Scorer + ?Sized>(
    f: &S,
    world: &FiniteWorld,
    labels: &[usize],
) -> Result<f64> {
    if labels.len() != world.len() {
        return Err(Error::ShapeMismatch { expected: world.len(), got: labels.len() });
    }
    let table = LogitTable::snapshot(f, world)?;
    let correct = (0..world.len())
        .filter(|&i| world.ball(i).iter().all(|&j| table.predict(j) == labels[i]))
        .count();
    Ok(correct as f64 / world.len() as f64)
}

/// Attack-based robust accuracy over a world's points, with each attack
/// point snapped to the nearest world point inside the ball before scoring
/// (ties to the lowest point id). Snapping restricts the search to the
/// enumerable candidate set, so this is never below [`robust_accuracy_exact`]
/// for the same scorer and world.
pub fn robust_accuracy_on_world<S>(
    f: &S,
    world: &FiniteWorld,
    labels: &[usize],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<f64>
where
    S: DiffScorer + Sync + ?Sized,
{
    if labels.len() != world.len() {
        return Err(Error::ShapeMismatch { expected: world.len(), got: labels.len() });
    }
    let hits = (0..world.len())
        .into_par_iter()
        .map(|i| -> Result<usize> {
            let x = world.point(i);
            let y = labels[i];
            let clean_ok = predict_class(f, x)? == y;
            let res = pgd(f, &CeLoss, x, y, budget, seed.wrapping_add(i as u64))?;
            let mut best_j = i;
            let mut best_d = f64::INFINITY;
            for &j in world.ball(i) {
                let d: f64 = world
                    .point(j)
                    .iter()
                    .zip(&res.x_adv)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best_j = j;
                }
            }
            let adv_ok = predict_class(f, world.point(best_j))? == y;
            Ok(usize::from(clean_ok && adv_ok))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().sum::<usize>() as f64 / world.len() as f64)
}

/// The twenty-step selection/evaluation attack at the given radius: steps of
/// `epsilon / 4` with a random start in the unit box.
pub fn pgd20(epsilon: f64, dim: usize) -> Result<PerturbationBudget> {
    PerturbationBudget::linf(epsilon, dim)?.with_steps(20, epsilon / 4.0)
}

/// Search recipe of the local-smoothness estimator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzSearch {
    pub epsilon: f64,
    pub steps: usize,
    /// Ascent step; `None` means `epsilon / 10`.
    pub step_size: Option<f64>,
    pub restarts: usize,
    /// Optional data box to stay inside (on top of the ball).
    pub bounds: Option<BoxBounds>,
    pub seed: u64,
}

impl LipschitzSearch {
    /// Defaults: 50 ascent steps of `epsilon / 10`, 3 restarts, no box.
    pub fn new(epsilon: f64) -> Result<Self> {
        let s = Self { epsilon, steps: 50, step_size: None, restarts: 3, bounds: None, seed: 0 };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.epsilon.is_finite() || self.epsilon <= 0.0 {
            return Err(Error::InvalidConfig("epsilon must be finite and > 0".into()));
        }
        if self.steps < 1 || self.restarts < 1 {
            return Err(Error::InvalidConfig("steps and restarts must be >= 1".into()));
        }
        if let Some(s) = self.step_size {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::InvalidConfig("step_size must be finite and > 0".into()));
            }
        }
        Ok(())
    }

    fn step(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 10.0)
    }
}

/// Mean of the per-sample maxima found by the search; `skipped` counts
/// samples where every restart collapsed onto the anchor before a single
/// ratio was recorded (such samples are excluded from the mean; if all
/// samples are skipped the value is 0).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub value: f64,
    pub n_samples: usize,
    pub skipped: usize,
}

/// L1 distance of the logits to a frozen reference vector; its logit
/// gradient is the coordinate-wise sign. Drives the ascent on the change
/// ratio.
struct AbsDiffLoss {
    reference: Vec<f64>,
}

impl ScalarLoss for AbsDiffLoss {
    fn value(&self, logits: &[f64], _y: usize) -> f64 {
        logits.iter().zip(&self.reference).map(|(a, b)| (a - b).abs()).sum()
    }

    fn logit_grad(&self, logits: &[f64], _y: usize) -> Vec<f64> {
        logits
            .iter()
            .zip(&self.reference)
            .map(|(a, b)| {
                let d = a - b;
                if d > 0.0 {
                    1.0
                } else if d < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            })
            .collect()
    }
}

fn clamp_to_ball_and_box(cur: &mut [f64], x: &[f64], eps: f64, bounds: Option<&BoxBounds>) {
    for (c, (v, &a)) in cur.iter_mut().zip(x).enumerate() {
        *v = v.clamp(a - eps, a + eps);
        if let Some(b) = bounds {
            *v = v.clamp(b.lo[c], b.hi[c]);
        }
    }
}

fn random_ball_point(
    x: &[f64],
    eps: f64,
    bounds: Option<&BoxBounds>,
    rng: &mut ChaCha8Rng,
) -> Vec<f64> {
    x.iter()
        .enumerate()
        .map(|(c, &a)| {
            let mut lo = a - eps;
            let mut hi = a + eps;
            if let Some(b) = bounds {
                lo = lo.max(b.lo[c]);
                hi = hi.min(b.hi[c]);
            }
            if !(hi >= lo) {
                return a;
            }
            rng.random_range(lo..=hi)
        })
        .collect()
}

/// Best ratio found for one sample, or `None` if every restart collapsed.
fn sample_ratio_max<S>(
    f: &S,
    x: &[f64],
    sample_idx: u64,
    search: &LipschitzSearch,
) -> Result<Option<f64>>
where
    S: DiffScorer + ?Sized,
{
    let reference = f.logits(x)?;
    let loss = AbsDiffLoss { reference };
    let eps = search.epsilon;
    let step = search.step();
    let bounds = search.bounds.as_ref();
    let mut best: Option<f64> = None;

    for restart in 0..search.restarts {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(search.seed, &[sample_idx, restart as u64]));
        let mut cur = random_ball_point(x, eps, bounds, &mut rng);
        for _ in 0..8 {
            if cur != x {
                break;
            }
            cur = random_ball_point(x, eps, bounds, &mut rng);
        }
        if cur == x {
            continue;
        }

        for _ in 0..search.steps {
            let (num, num_grad) = f.loss_input_grad(&loss, &cur, 0)?;
            let mut dist = 0.0f64;
            let mut arg = 0usize;
            for (c, (v, &a)) in cur.iter().zip(x).enumerate() {
                let d = (v - a).abs();
                if d > dist {
                    dist = d;
                    arg = c;
                }
            }
            let deff = dist.max(DENOM_FLOOR);
            let ratio = num / deff;
            if !ratio.is_finite() {
                break;
            }
            best = Some(best.map_or(ratio, |b| b.max(ratio)));

            // Corner probe: the ball vertex along the numerator gradient's
            // signs is the largest-numerator point at full denominator, and
            // a fixed point the stepwise ascent itself circles without
            // landing on (for a linear map it attains the exact supremum).
            let mut corner: Vec<f64> = x
                .iter()
                .zip(&num_grad)
                .map(|(&a, &g)| if g >= 0.0 { a + eps } else { a - eps })
                .collect();
            clamp_to_ball_and_box(&mut corner, x, eps, bounds);
            if corner != x {
                let corner_num = loss.value(&f.logits(&corner)?, 0);
                let corner_dist = corner
                    .iter()
                    .zip(x)
                    .map(|(v, &a)| (v - a).abs())
                    .fold(0.0f64, f64::max);
                let corner_ratio = corner_num / corner_dist.max(DENOM_FLOOR);
                if corner_ratio.is_finite() {
                    best = Some(best.map_or(corner_ratio, |b| b.max(corner_ratio)));
                }
            }

            let denom_sign = if cur[arg] >= x[arg] { 1.0 } else { -1.0 };
            for (c, v) in cur.iter_mut().enumerate() {
                let mut g = num_grad[c] / deff;
                if c == arg {
                    g -= num / (deff * deff) * denom_sign;
                }
                if g > 0.0 {
                    *v += step;
                } else if g < 0.0 {
                    *v -= step;
                }
            }
            clamp_to_ball_and_box(&mut cur, x, eps, bounds);
            if cur == x {
                break;
            }
        }
    }
    Ok(best)
}

/// Sample-mean of the locally maximized logit-change ratio
/// `|f(x') - f(x)|_1 / |x' - x|_inf` over the epsilon-ball of each input.
/// Sign-gradient ascent from random restarts, with each iterate also probing
/// the ball corner aligned with the numerator gradient; restarts accumulate
/// into one per-sample maximum, so more steps or more restarts never lower
/// the result. The returned value is a lower bound of the population
/// quantity.
pub fn local_lipschitz_estimate<S>(
    f: &S,
    inputs: &[Vec<f64>],
    search: &LipschitzSearch,
) -> Result<LipschitzEstimate>
where
    S: DiffScorer + Sync + ?Sized,
{
    search.validate()?;
    if inputs.is_empty() {
        return Err(Error::InvalidConfig("cannot estimate on an empty input set".into()));
    }
    let per: Vec<Option<f64>> = inputs
        .par_iter()
        .enumerate()
        .map(|(i, x)| sample_ratio_max(f, x, i as u64, search))
        .collect::<Result<Vec<_>>>()?;
    let kept: Vec<f64> = per.iter().filter_map(|v| *v).collect();
    let skipped = inputs.len() - kept.len();
    let value = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    Ok(LipschitzEstimate { value, n_samples: inputs.len(), skipped })
}

/// How the final checkpoint of a training run is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionPolicy {
    /// Highest target robust accuracy under the twenty-step attack, ties to
    /// the later epoch. Oracle selection: it reads target labels.
    Pgd20Target,
    Last,
}

/// Epoch chosen from a chronological metrics history under the policy.
pub fn select_checkpoint(history: &[MetricsRecord], policy: SelectionPolicy) -> Result<usize> {
    let last = history
        .last()
        .ok_or_else(|| Error::InvalidConfig("empty training history".into()))?;
    match policy {
        SelectionPolicy::Last => Ok(last.epoch),
        SelectionPolicy::Pgd20Target => {
            let mut best: Option<(f64, usize)> = None;
            for r in history {
                let acc = r.target_robust_acc.ok_or_else(|| {
                    Error::InvalidConfig(format!(
                        "epoch {} lacks the robust-accuracy record required by the selection policy",
                        r.epoch
                    ))
                })?;
                if best.is_none_or(|(b, _)| acc >= b) {
                    best = Some((acc, r.epoch));
                }
            }
            Ok(best.expect("nonempty history").1)
        }
    }
}

/// Full evaluation of one scorer on one dataset: standard accuracy, robust
/// accuracy under each named attack, and optionally the smoothness estimate
/// on the dataset's inputs.
pub fn evaluate<S>(
    f: &S,
    data: &DomainDataset,
    attacks: &[(String, PerturbationBudget)],
    lipschitz: Option<&LipschitzSearch>,
    seed: u64,
) -> Result<EvalReport>
where
    S: DiffScorer + Sync + ?Sized,
{
    let standard_acc = standard_accuracy(f, data)?;
    let mut robust_acc = BTreeMap::new();
    for (k, (name, budget)) in attacks.iter().enumerate() {
        let acc = robust_accuracy(f, data, budget, derive_seed(seed, &[k as u64]))?;
        robust_acc.insert(name.clone(), acc);
    }
    let lipschitz = match lipschitz {
        Some(search) => Some(local_lipschitz_estimate(f, &data.inputs, search)?.value),
        None => None,
    };
    Ok(EvalReport {
        domain_tag: data.domain_tag,
        n_samples: data.len(),
        standard_acc,
        robust_acc,
        lipschitz,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{MlpDims, MlpScorer};
    use crate::scorer::LinearScorer;
    use crate::synth::make_finite_world;

    fn line_dataset(xs: &[f64], labels: Vec<usize>) -> DomainDataset {
        DomainDataset::new(
            "line",
            DomainTag::Target,
            xs.iter().map(|&v| vec![v]).collect(),
            Some(labels),
        )
        .unwrap()
    }

    #[test]
    fn standard_accuracy_matches_confusion_counts() {
        // Threshold at 0.5: predicts 0 for x > 0.5, 1 for x < 0.5 (ties to
        // class 0). 50 points, 5 labeled against the rule -> 0.9.
        let f = LinearScorer::new(vec![vec![1.0], vec![0.0]], vec![-0.5, 0.0]).unwrap();
        let xs: Vec<f64> = (0..50).map(|i| i as f64 / 49.0).collect();
        let mut labels: Vec<usize> =
            xs.iter().map(|&v| if v >= 0.5 { 0 } else { 1 }).collect();
        for y in labels.iter_mut().take(5) {
            *y = 1 - *y;
        }
        let data = line_dataset(&xs, labels);
        let acc = standard_accuracy(&f, &data).unwrap();
        assert!((acc - 0.9).abs() < 1e-12);
    }

    #[test]
    fn constant_scorer_scores_half_on_balanced_binary_data() {
        let f = LinearScorer::new(vec![vec![0.0], vec![0.0]], vec![0.0, 0.0]).unwrap();
        let xs: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        let data = line_dataset(&xs, labels);
        assert_eq!(standard_accuracy(&f, &data).unwrap(), 0.5);
    }

    #[test]
    fn zero_radius_robust_accuracy_equals_standard_accuracy() {
        let dims = MlpDims::new(1, 5, 2).unwrap();
        let model = MlpScorer::new(dims, 8);
        let view = model.view(crate::model::Head::Main);
        let xs: Vec<f64> = (0..20).map(|i| i as f64 / 19.0).collect();
        let labels: Vec<usize> = (0..20).map(|i| i % 2).collect();
        let data = line_dataset(&xs, labels);
        let budget = pgd20(0.0, 1).unwrap();
        let std_acc = standard_accuracy(&view, &data).unwrap();
        let rob_acc = robust_accuracy(&view, &data, &budget, 3).unwrap();
        assert_eq!(std_acc, rob_acc);
    }

    #[test]
    fn exact_robust_accuracy_enumerates_threshold_failures() {
        // 11-point line with spacing 0.1, threshold mid-grid; with a
        // 0.2-ball every point within 0.2 of the 0.45 boundary sees both
        // predictions inside its ball and fails.
        let world = make_finite_world(1, 11, 0.2, 0).unwrap();
        let f = LinearScorer::new(vec![vec![1.0], vec![0.0]], vec![-0.45, 0.0]).unwrap();
        let labels: Vec<usize> =
            (0..11).map(|i| if i as f64 / 10.0 >= 0.45 { 0 } else { 1 }).collect();
        let acc = robust_accuracy_exact(&f, &world, &labels).unwrap();
        // Points 0.3, 0.4 (label 1) and 0.5, 0.6 (label 0) can reach across
        // the boundary; 4 of 11 fail.
        assert!((acc - 7.0 / 11.0).abs() < 1e-12);
    }

    #[test]
    fn exact_robust_accuracy_is_nonincreasing_in_epsilon() {
        let world = make_finite_world(1, 9, 0.0, 4).unwrap();
        let dims = MlpDims::new(1, 6, 2).unwrap();
        let model = MlpScorer::new(dims, 21);
        let view = model.view(crate::model::Head::Main);
        let labels: Vec<usize> = (0..9).map(|i| i % 2).collect();
        let mut prev = f64::INFINITY;
        for eps in world.distance_spectrum() {
            let w = world.with_epsilon(eps).unwrap();
            let acc = robust_accuracy_exact(&view, &w, &labels).unwrap();
            assert!(acc <= prev + 1e-15, "acc rose from {prev} to {acc} at eps {eps}");
            prev = acc;
        }
    }

    #[test]
    fn snapped_attack_accuracy_bounds_exact_accuracy_from_above() {
        let dims = MlpDims::new(1, 6, 2).unwrap();
        let model = MlpScorer::new(dims, 33);
        let view = model.view(crate::model::Head::Main);
        let labels: Vec<usize> = (0..9).map(|i| usize::from(i >= 4)).collect();
        for (k, eps) in [0.125, 0.25, 0.5].into_iter().enumerate() {
            let world = make_finite_world(1, 9, eps, 4).unwrap();
            let budget = PerturbationBudget::linf(eps, 1).unwrap();
            let exact = robust_accuracy_exact(&view, &world, &labels).unwrap();
            let snapped =
                robust_accuracy_on_world(&view, &world, &labels, &budget, k as u64).unwrap();
            assert!(
                snapped >= exact - 1e-15,
                "eps {eps}: snapped {snapped} below exact {exact}"
            );
        }
    }

    #[test]
    fn linear_map_ratio_reaches_the_weight_l1_norm() {
        let f = LinearScorer::new(vec![vec![1.0, -2.0], vec![0.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let search = LipschitzSearch::new(0.1).unwrap();
        let inputs = vec![vec![0.3, 0.4], vec![0.6, 0.1]];
        let est = local_lipschitz_estimate(&f, &inputs, &search).unwrap();
        assert_eq!(est.skipped, 0);
        assert!(
            (est.value - 3.0).abs() <= 1e-9,
            "estimate {} should equal the weight L1 norm 3",
            est.value
        );
    }

    #[test]
    fn constant_scorer_has_zero_estimate() {
        let f = LinearScorer::new(vec![vec![0.0], vec![0.0]], vec![0.7, -0.2]).unwrap();
        let search = LipschitzSearch::new(0.25).unwrap();
        let est = local_lipschitz_estimate(&f, &[vec![0.5]], &search).unwrap();
        assert_eq!(est.value, 0.0);
    }

    #[test]
    fn estimate_scales_homogeneously() {
        let f = LinearScorer::new(vec![vec![1.0, -2.0], vec![0.5, 0.25]], vec![0.0, 0.0]).unwrap();
        let g = LinearScorer::new(
            vec![vec![2.0, -4.0], vec![1.0, 0.5]],
            vec![0.0, 0.0],
        )
        .unwrap();
        let search = LipschitzSearch::new(0.1).unwrap();
        let inputs = vec![vec![0.3, 0.4], vec![0.9, 0.2], vec![0.1, 0.8]];
        let a = local_lipschitz_estimate(&f, &inputs, &search).unwrap().value;
        let b = local_lipschitz_estimate(&g, &inputs, &search).unwrap().value;
        assert!((b - 2.0 * a).abs() <= 1e-6 * b.abs().max(1.0), "{b} vs 2*{a}");
    }

    #[test]
    fn estimate_never_drops_with_more_steps_or_restarts() {
        let dims = MlpDims::new(2, 6, 2).unwrap();
        let model = MlpScorer::new(dims, 5);
        let view = model.view(crate::model::Head::Main);
        let inputs = vec![vec![0.2, 0.7], vec![0.5, 0.5], vec![0.9, 0.1]];
        let mut search = LipschitzSearch::new(0.1).unwrap();
        search.steps = 10;
        search.restarts = 1;
        let base = local_lipschitz_estimate(&view, &inputs, &search).unwrap().value;
        search.steps = 50;
        let more_steps = local_lipschitz_estimate(&view, &inputs, &search).unwrap().value;
        assert!(more_steps >= base - 1e-15);
        search.restarts = 3;
        let more_restarts = local_lipschitz_estimate(&view, &inputs, &search).unwrap().value;
        assert!(more_restarts >= more_steps - 1e-15);
    }

    fn record(epoch: usize, rob: Option<f64>) -> MetricsRecord {
        MetricsRecord {
            epoch,
            source_ce: 0.0,
            disparity_target: 0.0,
            disparity_source: 0.0,
            robust_ce: 0.0,
            total: 0.0,
            lr: 0.0,
            grl: 0.0,
            target_standard_acc: None,
            target_robust_acc: rob,
        }
    }

    #[test]
    fn selection_takes_the_argmax_with_ties_to_later_epochs() {
        let peak =
            vec![record(0, Some(0.1)), record(1, Some(0.5)), record(2, Some(0.8)), record(3, Some(0.4)), record(4, Some(0.8))];
        assert_eq!(select_checkpoint(&peak, SelectionPolicy::Pgd20Target).unwrap(), 4);

        let monotone: Vec<_> = (0..5).map(|e| record(e, Some(e as f64 / 10.0))).collect();
        assert_eq!(select_checkpoint(&monotone, SelectionPolicy::Pgd20Target).unwrap(), 4);

        let single = vec![record(0, Some(0.3))];
        assert_eq!(select_checkpoint(&single, SelectionPolicy::Pgd20Target).unwrap(), 0);
        assert_eq!(select_checkpoint(&single, SelectionPolicy::Last).unwrap(), 0);
    }

    #[test]
    fn selection_requires_robust_records_under_the_attack_policy() {
        let history = vec![record(0, Some(0.2)), record(1, None)];
        assert!(select_checkpoint(&history, SelectionPolicy::Pgd20Target).is_err());
        assert_eq!(select_checkpoint(&history, SelectionPolicy::Last).unwrap(), 1);
        assert!(select_checkpoint(&[], SelectionPolicy::Last).is_err());
    }
}
