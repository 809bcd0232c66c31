//! Perturbation budgets and attacks.
//!
//! The projection is written so that containment is exact in floating point,
//! not merely within a tolerance: after each step the displacement from the
//! anchor is clamped coordinatewise, and any unit-in-the-last-place spill
//! from re-adding it to the anchor is walked back with `next_after`-style
//! moves. Box clamping runs after the ball fix and can only move points
//! toward the anchor, so it never re-breaks the ball constraint.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scorer::{DiffScorer, ScalarLoss};
use crate::synth::FiniteWorld;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    LInf,
    L2,
}

/// Per-coordinate clamp box, `lo[i] <= x[i] <= hi[i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl BoxBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.is_empty() {
            return Err(Error::InvalidConfig("box bounds must be nonempty and same length".into()));
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::InvalidConfig("box requires finite lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    /// The unit box `[0,1]^d`.
    pub fn unit(dim: usize) -> Self {
        Self { lo: vec![0.0; dim], hi: vec![1.0; dim] }
    }
}

/// Attack budget: radius, norm, step schedule, and clamp box.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerturbationBudget {
    pub epsilon: f64,
    pub norm: Norm,
    pub step_size: f64,
    pub num_steps: usize,
    pub random_start: bool,
    pub bounds: Option<BoxBounds>,
}

impl PerturbationBudget {
    /// L-infinity budget with the usual schedule: 10 steps of `epsilon/4`
    /// with a random start, clamped to the unit box.
    pub fn linf(epsilon: f64, dim: usize) -> Result<Self> {
        Self::new(epsilon, Norm::LInf, epsilon / 4.0, 10, true, Some(BoxBounds::unit(dim)))
    }

    pub fn new(
        epsilon: f64,
        norm: Norm,
        step_size: f64,
        num_steps: usize,
        random_start: bool,
        bounds: Option<BoxBounds>,
    ) -> Result<Self> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be finite and >= 0".into()));
        }
        if epsilon > 0.0 {
            if !(step_size > 0.0) || step_size > 2.0 * epsilon {
                return Err(Error::InvalidConfig(format!(
                    "step_size must be in (0, 2*epsilon], got {step_size} for epsilon {epsilon}"
                )));
            }
        } else if !(step_size >= 0.0) {
            // A zero-radius ball collapses every iterate to the anchor, so the
            // step size is irrelevant; it only needs to be a number.
            return Err(Error::InvalidConfig("step_size must be >= 0".into()));
        }
        if num_steps == 0 {
            return Err(Error::InvalidConfig("num_steps must be >= 1".into()));
        }
        Ok(Self { epsilon, norm, step_size, num_steps, random_start, bounds })
    }

    pub fn with_steps(mut self, num_steps: usize, step_size: f64) -> Result<Self> {
        self.num_steps = num_steps;
        self.step_size = step_size;
        Self::new(
            self.epsilon,
            self.norm,
            self.step_size,
            self.num_steps,
            self.random_start,
            self.bounds,
        )
    }

    pub fn without_random_start(mut self) -> Self {
        self.random_start = false;
        self
    }
}

/// What a finished attack reports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackResult {
    pub x_adv: Vec<f64>,
    pub loss_clean: f64,
    pub loss_adv: f64,
    pub steps_taken: usize,
    /// True when every step saw an identically zero input gradient, i.e. the
    /// search never received a direction.
    pub degenerate_gradient: bool,
}

/// Stateless seed derivation: folds each part into the base with a
/// splitmix64-style finalizer, so nearby (base, parts) tuples give unrelated
/// streams. Used to give every sample/epoch/step its own attack seed.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h = base ^ 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
        h ^= h >> 27;
        h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
        h ^= h >> 31;
    }
    h
}

/// Coordinate step direction with the zero-gradient convention `sign(0) = 0`.
fn step_sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Clamp `cand` into (ball of `budget` around `anchor`) intersect box.
fn project(cand: &mut [f64], anchor: &[f64], budget: &PerturbationBudget) {
    let eps = budget.epsilon;
    match budget.norm {
        Norm::LInf => {
            for (c, &a) in cand.iter_mut().zip(anchor) {
                let delta = (*c - a).clamp(-eps, eps);
                *c = a + delta;
                // walk back ulp spill so |c - a| <= eps holds exactly
                while (*c - a).abs() > eps {
                    *c = next_toward(*c, a);
                }
            }
        }
        Norm::L2 => {
            let mut norm2 = 0.0;
            for (c, &a) in cand.iter().zip(anchor) {
                norm2 += (*c - a) * (*c - a);
            }
            let norm = norm2.sqrt();
            if norm > eps {
                let scale = eps / norm;
                for (c, &a) in cand.iter_mut().zip(anchor) {
                    *c = a + (*c - a) * scale;
                }
                // repeated shrink until the recomputed norm is within budget
                loop {
                    let n = cand
                        .iter()
                        .zip(anchor)
                        .map(|(c, a)| (c - a) * (c - a))
                        .sum::<f64>()
                        .sqrt();
                    if n <= eps {
                        break;
                    }
                    for (c, &a) in cand.iter_mut().zip(anchor) {
                        *c = a + (*c - a) * (1.0 - f64::EPSILON);
                    }
                }
            }
        }
    }
    if let Some(b) = &budget.bounds {
        for ((c, lo), hi) in cand.iter_mut().zip(&b.lo).zip(&b.hi) {
            *c = c.clamp(*lo, *hi);
        }
    }
}

/// Next representable float from `v` in the direction of `toward`.
fn next_toward(v: f64, toward: f64) -> f64 {
    if v == toward {
        return v;
    }
    if v == 0.0 {
        // smallest subnormal with the sign of the direction
        let mag = f64::from_bits(1);
        return if toward > 0.0 { mag } else { -mag };
    }
    let bits = v.to_bits();
    let next = if (toward > v) == (v > 0.0) { bits + 1 } else { bits - 1 };
    f64::from_bits(next)
}

fn random_start(x: &[f64], budget: &PerturbationBudget, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let eps = budget.epsilon;
    let mut out = Vec::with_capacity(x.len());
    match budget.norm {
        Norm::LInf => {
            // Uniform in the intersection: each coordinate interval clamps
            // independently for the sup norm.
            for (i, &xi) in x.iter().enumerate() {
                let mut lo = xi - eps;
                let mut hi = xi + eps;
                if let Some(b) = &budget.bounds {
                    lo = lo.max(b.lo[i]);
                    hi = hi.min(b.hi[i]);
                }
                let u: f64 = rng.random();
                out.push(lo + (hi - lo) * u);
            }
        }
        Norm::L2 => {
            // Direction uniform on the sphere, radius by the d-th root rule,
            // then clamped into the box.
            let d = x.len();
            let mut dir: Vec<f64> = (0..d)
                .map(|_| {
                    // Box-Muller pair; only the cosine leg is used per draw.
                    let u1: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                    let u2: f64 = rng.random();
                    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
                })
                .collect();
            let n = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            let r = eps * rng.random::<f64>().powf(1.0 / d as f64);
            for v in &mut dir {
                *v = *v / n * r;
            }
            out = x.iter().zip(&dir).map(|(a, d)| a + d).collect();
        }
    }
    let mut out2 = out;
    project(&mut out2, x, budget);
    out2
}

/// Projected gradient ascent on `loss` within the budget ball around `x`.
///
/// Iterates `x_{k+1} = proj(x_k + step * sign(grad))` (L2: normalized grad),
/// starting from `x` or a uniform random point of the ball, and returns the
/// best point seen: the clean anchor or any iterate, whichever scored the
/// highest loss. Hence `loss_adv >= loss_clean` always.
pub fn pgd<S>(
    model: &S,
    loss: &dyn ScalarLoss,
    x: &[f64],
    y: usize,
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<AttackResult>
where
    S: DiffScorer + ?Sized,
{
    if x.len() != model.input_dim() {
        return Err(Error::ShapeMismatch { expected: model.input_dim(), got: x.len() });
    }
    if let Some(b) = &budget.bounds {
        if b.lo.len() != x.len() {
            return Err(Error::ShapeMismatch { expected: x.len(), got: b.lo.len() });
        }
    }

    let (loss_clean, _) = model.loss_input_grad(loss, x, y)?;

    let mut cur = if budget.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        random_start(x, budget, &mut rng)
    } else {
        x.to_vec()
    };

    // The clean anchor always competes, so loss_adv >= loss_clean holds
    // whether or not the trajectory starts from a random point.
    let mut best = x.to_vec();
    let mut best_loss = loss_clean;
    let mut degenerate = true;

    for step in 0..=budget.num_steps {
        let (value, grad) = model.loss_input_grad(loss, &cur, y)?;
        if value > best_loss {
            best_loss = value;
            best.copy_from_slice(&cur);
        }
        if step == budget.num_steps {
            break;
        }
        let mut moved = false;
        match budget.norm {
            Norm::LInf => {
                for (c, g) in cur.iter_mut().zip(&grad) {
                    let s = step_sign(*g);
                    if s != 0.0 {
                        moved = true;
                    }
                    *c += budget.step_size * s;
                }
            }
            Norm::L2 => {
                let n = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    moved = true;
                    for (c, g) in cur.iter_mut().zip(&grad) {
                        *c += budget.step_size * g / n;
                    }
                }
            }
        }
        if moved {
            degenerate = false;
        }
        project(&mut cur, x, budget);
    }

    Ok(AttackResult {
        x_adv: best,
        loss_clean,
        loss_adv: best_loss,
        steps_taken: budget.num_steps,
        degenerate_gradient: degenerate,
    })
}

/// Fast gradient sign method: exactly one full-radius step from the clean
/// point. Implemented as the corresponding pgd configuration so the two can
/// never drift apart.
pub fn fgsm<S>(
    model: &S,
    loss: &dyn ScalarLoss,
    x: &[f64],
    y: usize,
    epsilon: f64,
    bounds: Option<BoxBounds>,
    norm: Norm,
) -> Result<AttackResult>
where
    S: DiffScorer + ?Sized,
{
    let budget = PerturbationBudget::new(epsilon, norm, epsilon.max(0.0), 1, false, bounds)?;
    pgd(model, loss, x, y, &budget, 0)
}

/// One attack per (input, label) pair, fanned out across threads with a
/// distinct derived seed per sample; results keep input order.
pub fn pgd_batch<S>(
    model: &S,
    loss: &(dyn ScalarLoss + Sync),
    inputs: &[Vec<f64>],
    labels: &[usize],
    budget: &PerturbationBudget,
    seed: u64,
) -> Result<Vec<AttackResult>>
where
    S: DiffScorer + Sync + ?Sized,
{
    if inputs.len() != labels.len() {
        return Err(Error::PairingMismatch { left: inputs.len(), right: labels.len() });
    }
    inputs
        .par_iter()
        .zip(labels.par_iter())
        .enumerate()
        .map(|(i, (x, &y))| pgd(model, loss, x, y, budget, seed.wrapping_add(i as u64)))
        .collect()
}

/// Exact maximization of an arbitrary objective over a finite world ball.
/// Returns the maximizing point id (lowest id on ties) and the maximum.
pub fn exact_ball_max<F>(world: &FiniteWorld, center: usize, mut objective: F) -> Result<(usize, f64)>
where
    F: FnMut(usize) -> f64,
{
    if center >= world.len() {
        return Err(Error::InvalidConfig(format!(
            "center {center} out of range for world of {} points",
            world.len()
        )));
    }
    let mut best_idx = center;
    let mut best = f64::NEG_INFINITY;
    for &j in world.ball(center) {
        let v = objective(j);
        if v > best {
            best = v;
            best_idx = j;
        }
    }
    Ok((best_idx, best))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::CeLoss;
    use crate::scorer::LinearScorer;
    use crate::synth::make_finite_world;

    fn logistic_1d() -> LinearScorer {
        // logits (x, 0): class 0 grows with x.
        LinearScorer::new(vec![vec![1.0], vec![0.0]], vec![0.0, 0.0]).unwrap()
    }

    #[test]
    fn one_step_on_logistic_moves_against_label() {
        // Attacking the negative class pushes toward larger logits.
        let m = logistic_1d();
        let budget = PerturbationBudget::new(0.1, Norm::LInf, 0.1, 1, false, None).unwrap();
        let res = pgd(&m, &CeLoss, &[0.3], 1, &budget, 0).unwrap();
        assert!((res.x_adv[0] - 0.4).abs() < 1e-15);
        assert!(res.loss_adv >= res.loss_clean);
        assert!(!res.degenerate_gradient);
    }

    #[test]
    fn zero_epsilon_returns_anchor_exactly() {
        let m = logistic_1d();
        let budget = PerturbationBudget::new(0.0, Norm::LInf, 0.0, 3, true, None).unwrap();
        let res = pgd(&m, &CeLoss, &[0.3], 1, &budget, 7).unwrap();
        assert_eq!(res.x_adv[0].to_bits(), 0.3f64.to_bits());
    }

    #[test]
    fn zero_gradient_coordinate_never_moves() {
        // Second input coordinate has zero weight everywhere.
        let m = LinearScorer::new(vec![vec![1.0, 0.0], vec![0.0, 0.0]], vec![0.0, 0.0]).unwrap();
        let budget = PerturbationBudget::new(0.2, Norm::LInf, 0.1, 4, false, None).unwrap();
        let res = pgd(&m, &CeLoss, &[0.5, 0.5], 1, &budget, 0).unwrap();
        assert_eq!(res.x_adv[1], 0.5);
        assert!(!res.degenerate_gradient);
    }

    #[test]
    fn fully_degenerate_gradient_is_flagged() {
        let m = LinearScorer::new(vec![vec![0.0], vec![0.0]], vec![0.0, 0.0]).unwrap();
        let budget = PerturbationBudget::new(0.2, Norm::LInf, 0.1, 4, false, None).unwrap();
        let res = pgd(&m, &CeLoss, &[0.5], 0, &budget, 0).unwrap();
        assert!(res.degenerate_gradient);
        assert_eq!(res.x_adv[0], 0.5);
    }

    #[test]
    fn ball_max_on_line_world() {
        let w = make_finite_world(1, 3, 0.5, 0).unwrap();
        let vals = [1.0, -2.0, 5.0];
        let (idx, v) = exact_ball_max(&w, 0, |j| vals[j]).unwrap();
        assert_eq!((idx, v), (0, 1.0));
        let (idx, v) = exact_ball_max(&w, 1, |j| vals[j]).unwrap();
        assert_eq!((idx, v), (2, 5.0));
        // ties resolve to the lowest point id
        let (idx, _) = exact_ball_max(&w, 1, |_| 3.0).unwrap();
        assert_eq!(idx, 0);
    }
}
