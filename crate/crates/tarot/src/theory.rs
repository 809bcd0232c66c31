//! Exact finite-instance verification of the generalization inequalities that
//! motivate the training objective, plus an exact empirical Rademacher
//! complexity for finite classes.
//!
//! Hypotheses are logit lookup tables over a finite world, so every
//! population quantity — ball-worst margins, suprema over the class, the
//! ideal-hypothesis argmin — is an exhaustive finite computation with no
//! estimation error. Each verifier returns both sides of its inequality and
//! the named intermediate terms; the only tolerance anywhere is a `1e-12`
//! allowance for floating-point accumulation.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::DomainTag;
use crate::disparity::{disparity_report_exact, robust_discrepancy_exact};
use crate::error::{Error, Result};
use crate::loss::{margin, phi_rho};
use crate::scorer::LogitTable;
use crate::synth::{make_finite_world, FiniteWorld};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Slack below which a verified inequality counts as violated. The checks are
/// exact apart from floating-point summation, so anything materially below
/// zero is an implementation bug, not noise.
pub const SLACK_TOLERANCE: f64 = 1e-12;

/// Exhaustive sign-vector enumeration is `2^n`; past 16 points it stops being
/// a desk-scale computation.
pub const MAX_RADEMACHER_POINTS: usize = 16;

/// One fully enumerable verification problem: a finite world carrying the
/// two domain distributions, a labeling per domain, a finite hypothesis
/// class of logit tables, and the margin width.
#[derive(Debug, Clone)]
pub struct TheoryInstance {
    pub world: FiniteWorld,
    /// True label of every world point on the source domain, and on the
    /// target too unless `target_labels` overrides it.
    pub labels: Vec<usize>,
    /// Independent target labeling for stress tests; `None` means one shared
    /// labeling (covariate shift), which is the operative regime.
    pub target_labels: Option<Vec<usize>>,
    pub class: Vec<LogitTable>,
    pub rho: f64,
    pub classes: usize,
}

impl TheoryInstance {
    pub fn validate(&self) -> Result<()> {
        let n = self.world.len();
        if self.labels.len() != n {
            return Err(Error::ShapeMismatch { expected: n, got: self.labels.len() });
        }
        if let Some(t) = &self.target_labels {
            if t.len() != n {
                return Err(Error::ShapeMismatch { expected: n, got: t.len() });
            }
            if t.iter().any(|&y| y >= self.classes) {
                return Err(Error::LabelRange { label: self.classes, classes: self.classes });
            }
        }
        if self.classes < 2 {
            return Err(Error::InvalidConfig("need at least two classes".into()));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::LabelRange { label: bad, classes: self.classes });
        }
        if self.class.is_empty() {
            return Err(Error::InvalidConfig("hypothesis class is empty".into()));
        }
        for table in &self.class {
            if table.len() != n {
                return Err(Error::ShapeMismatch { expected: n, got: table.len() });
            }
            if table.class_count() != self.classes {
                return Err(Error::ShapeMismatch {
                    expected: self.classes,
                    got: table.class_count(),
                });
            }
        }
        if !(self.rho > 0.0) || !self.rho.is_finite() {
            return Err(Error::InvalidConfig(format!("rho must be positive, got {}", self.rho)));
        }
        Ok(())
    }

    pub fn target_label_slice(&self) -> &[usize] {
        self.target_labels.as_deref().unwrap_or(&self.labels)
    }

    fn check_index(&self, idx: usize) -> Result<()> {
        if idx >= self.class.len() {
            return Err(Error::InvalidConfig(format!(
                "hypothesis index {idx} out of range for class of {}",
                self.class.len()
            )));
        }
        Ok(())
    }
}

/// Both sides of one verified inequality, with its named intermediate terms.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InequalityReport {
    pub name: String,
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; the inequality asserts this is nonnegative.
    pub slack: f64,
    pub terms: BTreeMap<String, f64>,
    pub holds: bool,
}

impl InequalityReport {
    fn build(name: &str, lhs: f64, rhs: f64, terms: BTreeMap<String, f64>) -> Self {
        let slack = rhs - lhs;
        Self { name: name.into(), lhs, rhs, slack, terms, holds: slack >= -SLACK_TOLERANCE }
    }
}

// --- exact weighted risks on a world ---

fn zero_one_risk(f: &LogitTable, labels: &[usize], weights: &[f64]) -> f64 {
    labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&y, &w))| w * f64::from(f.predict(i) != y))
        .sum()
}

fn robust_zero_one_risk(
    f: &LogitTable,
    labels: &[usize],
    world: &FiniteWorld,
    weights: &[f64],
) -> f64 {
    labels
        .iter()
        .zip(weights)
        .enumerate()
        .map(|(i, (&y, &w))| {
            let err = world.ball(i).iter().any(|&j| f.predict(j) != y);
            w * f64::from(err)
        })
        .sum()
}

fn margin_risk_w(f: &LogitTable, labels: &[usize], weights: &[f64], rho: f64) -> Result<f64> {
    let mut acc = 0.0;
    for (i, (&y, &w)) in labels.iter().zip(weights).enumerate() {
        acc += w * phi_rho(margin(f.row(i), y)?, rho)?;
    }
    Ok(acc)
}

/// Largest ratio of logit-vector L1 change to input sup-norm distance over
/// any (point, ball neighbor) pair. Isolated points (singleton balls)
/// contribute nothing.
pub fn local_lipschitz_exact(f: &LogitTable, world: &FiniteWorld) -> f64 {
    let mut best = 0.0f64;
    for i in 0..world.len() {
        for &j in world.ball(i) {
            if j == i {
                continue;
            }
            let num: f64 =
                f.row(i).iter().zip(f.row(j)).map(|(a, b)| (a - b).abs()).sum();
            best = best.max(num / world.distance(i, j));
        }
    }
    best
}

/// The ideal-hypothesis scan: index of the lowest-index minimizer of the
/// summed clean margin risks over both domains, the minimum value, and the
/// indices of every exact minimizer.
fn ideal_hypothesis(instance: &TheoryInstance) -> Result<(usize, f64, Vec<usize>)> {
    let world = &instance.world;
    let mut best_idx = 0;
    let mut best = f64::INFINITY;
    let mut joints = Vec::with_capacity(instance.class.len());
    for (idx, cand) in instance.class.iter().enumerate() {
        let joint = margin_risk_w(
            cand,
            instance.target_label_slice(),
            &world.target_weights,
            instance.rho,
        )? + margin_risk_w(cand, &instance.labels, &world.source_weights, instance.rho)?;
        joints.push(joint);
        if joint < best {
            best = joint;
            best_idx = idx;
        }
    }
    let minimizers = joints
        .iter()
        .enumerate()
        .filter(|(_, &j)| j == best)
        .map(|(i, _)| i)
        .collect();
    Ok((best_idx, best, minimizers))
}

fn prop1_sides(
    instance: &TheoryInstance,
    f_index: usize,
    f_star_index: usize,
    lambda: f64,
) -> Result<(f64, f64, f64, f64)> {
    let world = &instance.world;
    let f = &instance.class[f_index];
    let f_star = &instance.class[f_star_index];
    let target_gap =
        disparity_report_exact(f, f_star, world, &world.target_weights, instance.rho)?
            .robust_margin;
    let source_gap =
        disparity_report_exact(f, f_star, world, &world.source_weights, instance.rho)?.margin;
    let source_risk = margin_risk_w(f, &instance.labels, &world.source_weights, instance.rho)?;
    let rhs = source_risk + (target_gap - source_gap) + lambda;
    Ok((source_risk, target_gap, source_gap, rhs))
}

/// Target robust error against the source margin risk plus the
/// ideal-hypothesis disparity gap plus the joint ideal risk:
///
/// `rob_err_T(f) <= margin_risk_S(f) + [rob_disp_T(f*, f) - disp_S(f*, f)] + lambda`
///
/// with `f*` the lowest-index minimizer of the summed clean margin risks and
/// `lambda` that minimal sum. The inequality is additionally re-checked with
/// every exact minimizer substituted for `f*`; `holds` requires all of them
/// to clear the tolerance.
pub fn verify_prop1(instance: &TheoryInstance, f_index: usize) -> Result<InequalityReport> {
    instance.validate()?;
    instance.check_index(f_index)?;
    let world = &instance.world;
    let f = &instance.class[f_index];
    let (star_idx, lambda, minimizers) = ideal_hypothesis(instance)?;

    let lhs = robust_zero_one_risk(f, instance.target_label_slice(), world, &world.target_weights);
    let (source_risk, target_gap, source_gap, rhs) =
        prop1_sides(instance, f_index, star_idx, lambda)?;

    let mut worst_minimizer_slack = f64::INFINITY;
    for &m in &minimizers {
        let (_, _, _, rhs_m) = prop1_sides(instance, f_index, m, lambda)?;
        worst_minimizer_slack = worst_minimizer_slack.min(rhs_m - lhs);
    }

    let mut terms = BTreeMap::new();
    terms.insert("source_margin_risk".into(), source_risk);
    terms.insert("target_robust_disparity".into(), target_gap);
    terms.insert("source_disparity".into(), source_gap);
    terms.insert("lambda".into(), lambda);
    terms.insert("ideal_index".into(), star_idx as f64);
    terms.insert("minimizer_count".into(), minimizers.len() as f64);
    terms.insert("worst_minimizer_slack".into(), worst_minimizer_slack);

    let mut report = InequalityReport::build("prop1", lhs, rhs, terms);
    report.holds = report.holds && worst_minimizer_slack >= -SLACK_TOLERANCE;
    Ok(report)
}

/// Target robust error against the robust 0-1 disparity plus the labeler's
/// clean error:
///
/// `rob_err_T(f) <= rob_disp_T(f*, f) + err_T(f*)`
///
/// where `f*` pseudo-labels clean points and `f` is the attacked model.
pub fn verify_prop2(
    instance: &TheoryInstance,
    f_index: usize,
    f_star_index: usize,
) -> Result<InequalityReport> {
    instance.validate()?;
    instance.check_index(f_index)?;
    instance.check_index(f_star_index)?;
    let world = &instance.world;
    let f = &instance.class[f_index];
    let f_star = &instance.class[f_star_index];
    let t_labels = instance.target_label_slice();

    let lhs = robust_zero_one_risk(f, t_labels, world, &world.target_weights);
    let rob_disp =
        disparity_report_exact(f, f_star, world, &world.target_weights, instance.rho)?
            .robust_disagree;
    let star_err = zero_one_risk(f_star, t_labels, &world.target_weights);
    let rhs = rob_disp + star_err;

    let mut terms = BTreeMap::new();
    terms.insert("target_robust_disparity_01".into(), rob_disp);
    terms.insert("labeler_target_error".into(), star_err);
    Ok(InequalityReport::build("prop2", lhs, rhs, terms))
}

/// Source robust error against the source margin risk, twice the worst-case
/// discrepancy, the Lipschitz smoothing term, and the joint ideal risk:
///
/// `rob_err_S(f) <= margin_risk_S(f) + 2*discrepancy + 2*eps*L_f/rho + lambda`
///
/// with `L_f` the exact local Lipschitz constant of `f` over source balls.
pub fn verify_prop3(instance: &TheoryInstance, f_index: usize) -> Result<InequalityReport> {
    instance.validate()?;
    instance.check_index(f_index)?;
    let world = &instance.world;
    let f = &instance.class[f_index];
    let (_, lambda, _) = ideal_hypothesis(instance)?;

    let lhs = robust_zero_one_risk(f, &instance.labels, world, &world.source_weights);
    let source_risk = margin_risk_w(f, &instance.labels, &world.source_weights, instance.rho)?;
    let discrepancy = robust_discrepancy_exact(f, &instance.class, world, instance.rho)?;
    let lipschitz = local_lipschitz_exact(f, world);
    let smoothing = 2.0 * world.epsilon() * lipschitz / instance.rho;
    let rhs = source_risk + 2.0 * discrepancy.value + smoothing + lambda;

    let mut terms = BTreeMap::new();
    terms.insert("source_margin_risk".into(), source_risk);
    terms.insert("discrepancy".into(), discrepancy.value);
    terms.insert("local_lipschitz".into(), lipschitz);
    terms.insert("smoothing_term".into(), smoothing);
    terms.insert("lambda".into(), lambda);
    Ok(InequalityReport::build("prop3", lhs, rhs, terms))
}

/// Margin disparity against the sum of both functions' margin risks on one
/// labeled domain:
///
/// `disp_D(f', f) <= margin_risk_D(f') + margin_risk_D(f)`
pub fn verify_disp_risk_lemma(
    instance: &TheoryInstance,
    f_index: usize,
    f_prime_index: usize,
    domain: DomainTag,
) -> Result<InequalityReport> {
    instance.validate()?;
    instance.check_index(f_index)?;
    instance.check_index(f_prime_index)?;
    let world = &instance.world;
    let (weights, labels) = match domain {
        DomainTag::Source => (&world.source_weights, &instance.labels[..]),
        DomainTag::Target => (&world.target_weights, instance.target_label_slice()),
        DomainTag::Unseen => {
            return Err(Error::InvalidConfig(
                "disparity-risk check needs a source or target domain".into(),
            ))
        }
    };
    let f = &instance.class[f_index];
    let f_prime = &instance.class[f_prime_index];

    let lhs = disparity_report_exact(f, f_prime, world, weights, instance.rho)?.margin;
    let risk_prime = margin_risk_w(f_prime, labels, weights, instance.rho)?;
    let risk_f = margin_risk_w(f, labels, weights, instance.rho)?;
    let rhs = risk_prime + risk_f;

    let mut terms = BTreeMap::new();
    terms.insert("labeler_margin_risk".into(), risk_prime);
    terms.insert("scored_margin_risk".into(), risk_f);
    Ok(InequalityReport::build("disp_risk_lemma", lhs, rhs, terms))
}

/// Exact empirical Rademacher complexity of a finite class given each
/// member's values at the n sample points: the average over all `2^n` sign
/// vectors of the per-vector supremum, divided by n.
///
/// Sign vectors are enumerated in complement pairs and each pair is summed
/// before accumulation, so a singleton class returns exactly `0.0` (the two
/// suprema cancel term by term) rather than a rounding residue.
pub fn empirical_rademacher(values: &[Vec<f64>]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::InvalidConfig("empty function class".into()));
    }
    let n = values[0].len();
    if n == 0 {
        return Err(Error::InvalidConfig("no sample points".into()));
    }
    if n > MAX_RADEMACHER_POINTS {
        return Err(Error::Capacity(format!(
            "{n} points exceeds the {MAX_RADEMACHER_POINTS}-point enumeration cap"
        )));
    }
    if values.iter().any(|row| row.len() != n) {
        return Err(Error::ShapeMismatch { expected: n, got: 0 });
    }
    if values.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("function value"));
    }

    let half = 1usize << (n - 1);
    let sup_for = |mask: usize| -> f64 {
        values
            .iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .map(|(i, &v)| if mask >> i & 1 == 1 { v } else { -v })
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let full = (1usize << n) - 1;
    let mut total = 0.0;
    for mask in 0..half {
        total += sup_for(mask) + sup_for(full ^ mask);
    }
    Ok(total / (1usize << n) as f64 / n as f64)
}

/// Knobs for [`random_instance`]. The defaults stay within the exhaustive
/// oracle's comfortable range: worlds of at most 25 points, classes of at
/// most 8 tables, 2 or 3 labels.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct InstanceSizes {
    pub max_grid_1d: usize,
    pub max_grid_2d: usize,
    pub max_class_size: usize,
    pub max_classes: usize,
    /// Draw a second labeling for the target domain instead of sharing the
    /// source one.
    pub independent_target_labels: bool,
}

impl Default for InstanceSizes {
    fn default() -> Self {
        Self {
            max_grid_1d: 25,
            max_grid_2d: 5,
            max_class_size: 8,
            max_classes: 3,
            independent_target_labels: false,
        }
    }
}

impl InstanceSizes {
    fn validate(&self) -> Result<()> {
        if self.max_grid_1d < 3 || self.max_grid_2d < 2 {
            return Err(Error::InvalidConfig("grids too small to vary".into()));
        }
        if self.max_grid_1d > 64 || self.max_grid_2d > 8 {
            return Err(Error::Capacity("instance grids beyond oracle comfort range".into()));
        }
        if self.max_class_size == 0 || self.max_classes < 2 {
            return Err(Error::InvalidConfig("need hypotheses and >= 2 classes".into()));
        }
        Ok(())
    }
}

/// Deterministic random instance. The perturbation radius is drawn from the
/// world's nonzero distance spectrum, so balls always reach at least the
/// nearest neighbors; logits are uniform in [-2, 2]; `rho` is uniform in
/// [0.1, 2]; both domain distributions are strictly positive.
pub fn random_instance(seed: u64, sizes: &InstanceSizes) -> Result<TheoryInstance> {
    sizes.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dim = if rng.random::<bool>() { 1 } else { 2 };
    let grid = if dim == 1 {
        rng.random_range(3..=sizes.max_grid_1d)
    } else {
        rng.random_range(2..=sizes.max_grid_2d)
    };
    // Radius from the nonzero spectrum: index 1 is one grid step, the last
    // index spans the whole axis.
    let spectrum_idx = rng.random_range(1..grid);
    let epsilon = spectrum_idx as f64 / (grid - 1) as f64;
    let world = make_finite_world(dim, grid, epsilon, rng.random::<u64>())?;

    let classes = rng.random_range(2..=sizes.max_classes);
    let n = world.len();
    let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..classes)).collect();
    let target_labels = if sizes.independent_target_labels {
        Some((0..n).map(|_| rng.random_range(0..classes)).collect())
    } else {
        None
    };

    let class_size = rng.random_range(1..=sizes.max_class_size);
    let class = (0..class_size)
        .map(|_| {
            let rows = (0..n)
                .map(|_| (0..classes).map(|_| rng.random_range(-2.0..2.0)).collect())
                .collect();
            LogitTable::from_rows(rows)
        })
        .collect::<Result<Vec<_>>>()?;

    let rho = rng.random_range(0.1..2.0);
    let instance = TheoryInstance { world, labels, target_labels, class, rho, classes };
    instance.validate()?;
    Ok(instance)
}

/// One failing check inside a suite run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteFailure {
    pub proposition: String,
    pub instance_seed: u64,
    pub slack: f64,
}

/// Outcome of verifying a batch of random instances: every hypothesis of
/// every instance is pushed through all four verifiers (pairs for the
/// two-hypothesis checks), with the minimum observed slack per proposition.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SuiteReport {
    pub checked: usize,
    pub instances: usize,
    pub min_slack: BTreeMap<String, f64>,
    pub failures: Vec<SuiteFailure>,
}

/// Verifies `n_instances` random instances derived from `seed`. Instances
/// are processed in parallel; the report is independent of thread count.
pub fn run_suite(seed: u64, n_instances: usize, sizes: &InstanceSizes) -> Result<SuiteReport> {
    if n_instances == 0 {
        return Err(Error::InvalidConfig("suite needs at least one instance".into()));
    }
    let per_instance: Vec<(usize, Vec<(String, u64, f64)>)> = (0..n_instances)
        .into_par_iter()
        .map(|k| -> Result<(usize, Vec<(String, u64, f64)>)> {
            let inst_seed = crate::attack::derive_seed(seed, &[k as u64]);
            let instance = random_instance(inst_seed, sizes)?;
            let m = instance.class.len();
            let mut slacks = Vec::new();
            for f in 0..m {
                let r1 = verify_prop1(&instance, f)?;
                slacks.push((
                    r1.name,
                    inst_seed,
                    r1.slack.min(r1.terms["worst_minimizer_slack"]),
                ));
                let r3 = verify_prop3(&instance, f)?;
                slacks.push((r3.name, inst_seed, r3.slack));
                for g in 0..m {
                    let r2 = verify_prop2(&instance, f, g)?;
                    slacks.push((r2.name, inst_seed, r2.slack));
                    for domain in [DomainTag::Source, DomainTag::Target] {
                        let rl = verify_disp_risk_lemma(&instance, f, g, domain)?;
                        slacks.push((rl.name, inst_seed, rl.slack));
                    }
                }
            }
            Ok((slacks.len(), slacks))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut min_slack: BTreeMap<String, f64> = BTreeMap::new();
    let mut failures = Vec::new();
    let mut checked = 0;
    for (count, slacks) in per_instance {
        checked += count;
        for (name, inst_seed, slack) in slacks {
            let entry = min_slack.entry(name.clone()).or_insert(f64::INFINITY);
            if slack < *entry {
                *entry = slack;
            }
            if slack < -SLACK_TOLERANCE {
                failures.push(SuiteFailure { proposition: name, instance_seed: inst_seed, slack });
            }
        }
    }
    Ok(SuiteReport { checked, instances: n_instances, min_slack, failures })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn perfect_table(labels: &[usize], classes: usize, gap: f64) -> LogitTable {
        let rows = labels
            .iter()
            .map(|&y| (0..classes).map(|c| if c == y { gap } else { 0.0 }).collect())
            .collect();
        LogitTable::from_rows(rows).unwrap()
    }

    fn tiny_instance() -> TheoryInstance {
        let world = make_finite_world(1, 4, 1.0 / 3.0, 5).unwrap();
        let labels = vec![0, 0, 1, 1];
        let class = vec![
            perfect_table(&labels, 2, 3.0),
            LogitTable::from_rows(vec![
                vec![0.4, -0.1],
                vec![-0.2, 0.3],
                vec![0.1, 0.2],
                vec![1.0, -1.0],
            ])
            .unwrap(),
        ];
        TheoryInstance { world, labels, target_labels: None, class, rho: 1.0, classes: 2 }
    }

    #[test]
    fn prop1_singleton_class_forces_the_ideal_to_itself() {
        let mut inst = tiny_instance();
        inst.class.truncate(1);
        let rep = verify_prop1(&inst, 0).unwrap();
        assert!(rep.holds, "slack {}", rep.slack);
        assert_eq!(rep.terms["ideal_index"], 0.0);
    }

    #[test]
    fn prop1_all_terms_vanish_on_a_separated_identical_pair() {
        // Zero radius, identical domains, perfect hypothesis with margins
        // beyond rho: every term is exactly zero.
        let mut world = make_finite_world(1, 4, 0.0, 9).unwrap();
        world.target_weights = world.source_weights.clone();
        let labels = vec![0, 1, 0, 1];
        let class = vec![perfect_table(&labels, 2, 5.0)];
        let inst =
            TheoryInstance { world, labels, target_labels: None, class, rho: 1.0, classes: 2 };
        let rep = verify_prop1(&inst, 0).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
        assert_eq!(rep.slack, 0.0);
        assert!(rep.holds);
    }

    #[test]
    fn prop2_robust_identical_pair_is_tight_at_zero() {
        let mut world = make_finite_world(1, 4, 0.0, 9).unwrap();
        world.target_weights = world.source_weights.clone();
        let labels = vec![0, 1, 1, 0];
        let class = vec![perfect_table(&labels, 2, 5.0)];
        let inst =
            TheoryInstance { world, labels, target_labels: None, class, rho: 1.0, classes: 2 };
        let rep = verify_prop2(&inst, 0, 0).unwrap();
        assert_eq!(rep.lhs, 0.0);
        assert_eq!(rep.rhs, 0.0);
    }

    #[test]
    fn lemma_self_disparity_is_within_twice_the_risk() {
        let inst = tiny_instance();
        for domain in [DomainTag::Source, DomainTag::Target] {
            let rep = verify_disp_risk_lemma(&inst, 1, 1, domain).unwrap();
            assert!(rep.holds, "slack {}", rep.slack);
            assert!((rep.terms["labeler_margin_risk"] - rep.terms["scored_margin_risk"]).abs() < 1e-15);
        }
    }

    #[test]
    fn prop3_constant_scorer_has_zero_lipschitz() {
        let world = make_finite_world(1, 5, 0.25, 3).unwrap();
        let labels = vec![0, 1, 0, 1, 0];
        let constant =
            LogitTable::from_rows(vec![vec![0.3, 0.1]; 5]).unwrap();
        let inst = TheoryInstance {
            world,
            labels,
            target_labels: None,
            class: vec![constant],
            rho: 0.5,
            classes: 2,
        };
        let rep = verify_prop3(&inst, 0).unwrap();
        assert_eq!(rep.terms["local_lipschitz"], 0.0);
        assert_eq!(rep.terms["smoothing_term"], 0.0);
        assert!(rep.holds, "slack {}", rep.slack);
    }

    #[test]
    fn lipschitz_on_a_line_matches_slope() {
        // Values 0, 1, 3 on a 3-point line of spacing 0.5 with full-width
        // balls: steepest pairwise slope is |3-1|/0.5 = 4 on one coordinate,
        // doubled by the mirrored second logit column.
        let world = make_finite_world(1, 3, 1.0, 2).unwrap();
        let f = LogitTable::from_rows(vec![
            vec![0.0, 0.0],
            vec![1.0, -1.0],
            vec![3.0, -3.0],
        ])
        .unwrap();
        assert_eq!(local_lipschitz_exact(&f, &world), 8.0);
    }

    #[test]
    fn rademacher_singleton_is_exactly_zero() {
        let v = vec![vec![0.3, -1.7, 2.9]];
        assert_eq!(empirical_rademacher(&v).unwrap(), 0.0);
    }

    #[test]
    fn rademacher_sign_pair_equals_mean_absolute_sum() {
        // {f, -f} gives (1/n) E|sigma . v|.
        let v = vec![vec![1.0, 1.0], vec![-1.0, -1.0]];
        // patterns: ++ -> 2, +- -> 0, -+ -> 0, -- -> 2; mean |.| = 1
        assert!((empirical_rademacher(&v).unwrap() - 0.5).abs() < 1e-15);
    }

    #[test]
    fn rademacher_matches_direct_enumeration() {
        let v = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]];
        let n = 3;
        let mut total = 0.0;
        for mask in 0..(1 << n) {
            let mut sup = f64::NEG_INFINITY;
            for row in &v {
                let s: f64 = row
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| if mask >> i & 1 == 1 { x } else { -x })
                    .sum();
                sup = sup.max(s);
            }
            total += sup;
        }
        let direct = total / 8.0 / 3.0;
        assert!((empirical_rademacher(&v).unwrap() - direct).abs() < 1e-15);
    }

    #[test]
    fn rademacher_monotone_and_bounded() {
        let small = vec![vec![0.5, -1.0, 2.0], vec![1.5, 0.25, -0.75]];
        let mut big = small.clone();
        big.push(vec![-2.0, 1.0, 0.5]);
        let rs = empirical_rademacher(&small).unwrap();
        let rb = empirical_rademacher(&big).unwrap();
        assert!(rb >= rs - 1e-15);
        let cap = big.iter().flatten().fold(0.0f64, |a, &v| a.max(v.abs()));
        assert!(rb <= cap + 1e-15);
    }

    #[test]
    fn rademacher_rejects_oversized_inputs() {
        let v = vec![vec![0.0; MAX_RADEMACHER_POINTS + 1]];
        assert!(matches!(empirical_rademacher(&v), Err(Error::Capacity(_))));
    }

    #[test]
    fn random_instances_are_seed_deterministic() {
        let sizes = InstanceSizes::default();
        let a = random_instance(99, &sizes).unwrap();
        let b = random_instance(99, &sizes).unwrap();
        assert_eq!(a.labels, b.labels);
        assert_eq!(a.rho.to_bits(), b.rho.to_bits());
        assert_eq!(a.class.len(), b.class.len());
        for (ta, tb) in a.class.iter().zip(&b.class) {
            for i in 0..ta.len() {
                for (x, y) in ta.row(i).iter().zip(tb.row(i)) {
                    assert_eq!(x.to_bits(), y.to_bits());
                }
            }
        }
        let c = random_instance(100, &sizes).unwrap();
        assert!(c.labels != a.labels || c.rho != a.rho || c.class.len() != a.class.len());
    }

    #[test]
    fn small_suite_run_is_clean() {
        let report = run_suite(2024, 40, &InstanceSizes::default()).unwrap();
        assert!(report.failures.is_empty(), "failures: {:?}", report.failures);
        assert!(report.checked > 40);
        for (name, slack) in &report.min_slack {
            assert!(*slack >= -SLACK_TOLERANCE, "{name} min slack {slack}");
        }
        assert_eq!(report.min_slack.len(), 4);
    }
}
