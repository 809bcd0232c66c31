//! Generators for desk-scale experiments.
//!
//! Two families: a two-moons pair with a rotation covariate shift between
//! source and target, and a `FiniteWorld` — a regular grid on `[0,1]^d` with a
//! precomputed exhaustive perturbation neighborhood per point, which is what
//! makes exact worst-case quantities computable by enumeration.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{DomainDataset, DomainTag};
use crate::error::{Error, Result};

/// Parameters of the two-moons covariate-shift pair.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct ShiftSpec {
    pub n_per_domain: usize,
    pub rotation_deg: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_per_domain < 4 {
            return Err(Error::InvalidConfig("n_per_domain must be at least 4".into()));
        }
        if !self.rotation_deg.is_finite() {
            return Err(Error::InvalidConfig("rotation_deg must be finite".into()));
        }
        if !self.noise_sd.is_finite() || self.noise_sd < 0.0 {
            return Err(Error::InvalidConfig("noise_sd must be finite and >= 0".into()));
        }
        Ok(())
    }
}

/// Two interleaved half-circles with Gaussian jitter, labels 0/1 by moon.
/// The target domain is the same jittered cloud rotated by `rotation_deg`
/// about the cloud centroid. Both domains go through one shared affine map
/// into `[0,1]^2` (centered on the centroid, scaled by the cloud radius), so
/// a pure rotation stays a pure rotation after rescaling and the centroid
/// lands on (0.5, 0.5) for every rotation angle.
///
/// Target labels are returned too; adaptation code must not read them, they
/// exist so evaluation can score target accuracy.
pub fn make_two_moons_shift(spec: &ShiftSpec) -> Result<(DomainDataset, DomainDataset)> {
    spec.validate()?;
    let n = spec.n_per_domain;
    let n_outer = n / 2;
    let n_inner = n - n_outer;

    let mut raw: Vec<[f64; 2]> = Vec::with_capacity(n);
    let mut labels: Vec<usize> = Vec::with_capacity(n);
    for i in 0..n_outer {
        let t = std::f64::consts::PI * i as f64 / (n_outer.max(2) - 1) as f64;
        raw.push([t.cos(), t.sin()]);
        labels.push(0);
    }
    for i in 0..n_inner {
        let t = std::f64::consts::PI * i as f64 / (n_inner.max(2) - 1) as f64;
        raw.push([1.0 - t.cos(), 0.5 - t.sin()]);
        labels.push(1);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    if spec.noise_sd > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sd)
            .map_err(|e| Error::InvalidConfig(format!("noise: {e}")))?;
        for p in &mut raw {
            p[0] += normal.sample(&mut rng);
            p[1] += normal.sample(&mut rng);
        }
    }

    let cx = raw.iter().map(|p| p[0]).sum::<f64>() / n as f64;
    let cy = raw.iter().map(|p| p[1]).sum::<f64>() / n as f64;
    let radius = raw
        .iter()
        .map(|p| ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt())
        .fold(0.0f64, f64::max)
        .max(f64::MIN_POSITIVE);

    // Shared map: centroid -> (0.5, 0.5), everything within the centroid
    // radius -> [0,1]^2. The clamp only trims float dust at the rim.
    let rescale = |p: &[f64; 2]| -> Vec<f64> {
        vec![
            ((p[0] - cx) / (2.0 * radius) + 0.5).clamp(0.0, 1.0),
            ((p[1] - cy) / (2.0 * radius) + 0.5).clamp(0.0, 1.0),
        ]
    };

    let source_inputs: Vec<Vec<f64>> = raw.iter().map(&rescale).collect();
    // Exactly-zero rotation skips the trig path entirely so that a zero-shift
    // pair is bit-identical, not merely close.
    let target_inputs: Vec<Vec<f64>> = if spec.rotation_deg == 0.0 {
        source_inputs.clone()
    } else {
        let theta = spec.rotation_deg.to_radians();
        let (sin, cos) = theta.sin_cos();
        raw.iter()
            .map(|p| {
                let dx = p[0] - cx;
                let dy = p[1] - cy;
                rescale(&[cx + cos * dx - sin * dy, cy + sin * dx + cos * dy])
            })
            .collect()
    };

    let source = DomainDataset::new(
        format!("two_moons_src_s{}", spec.seed),
        DomainTag::Source,
        source_inputs,
        Some(labels.clone()),
    )?;
    let target = DomainDataset::new(
        format!("two_moons_tgt_rot{}_s{}", spec.rotation_deg, spec.seed),
        DomainTag::Target,
        target_inputs,
        Some(labels),
    )?;
    Ok((source, target))
}

/// Hard cap on enumerable world size.
pub const MAX_WORLD_POINTS: usize = 4096;

/// A regular grid on `[0,1]^d` (d = 1 or 2) with, for every point, the list
/// of grid points within L-infinity distance `epsilon` (a closed ball, so a
/// point is always in its own ball), plus one strictly positive probability
/// vector per domain.
#[derive(Debug, Clone)]
pub struct FiniteWorld {
    dim: usize,
    grid: usize,
    epsilon: f64,
    points: Vec<Vec<f64>>,
    lattice: Vec<[usize; 2]>,
    ball: Vec<Vec<usize>>,
    pub source_weights: Vec<f64>,
    pub target_weights: Vec<f64>,
}

/// Builds a world. Distances are computed from integer lattice deltas so that
/// mathematically equal gaps compare bit-identically against `epsilon`.
pub fn make_finite_world(dim: usize, grid: usize, epsilon: f64, seed: u64) -> Result<FiniteWorld> {
    if !(dim == 1 || dim == 2) {
        return Err(Error::InvalidConfig(format!("dim must be 1 or 2, got {dim}")));
    }
    if grid < 2 {
        return Err(Error::InvalidConfig("grid must have at least 2 points per axis".into()));
    }
    let n = grid.pow(dim as u32);
    if n > MAX_WORLD_POINTS {
        return Err(Error::Capacity(format!(
            "{n} grid points exceeds the {MAX_WORLD_POINTS}-point enumeration cap"
        )));
    }
    if !epsilon.is_finite() || epsilon < 0.0 {
        return Err(Error::InvalidConfig("epsilon must be finite and >= 0".into()));
    }

    let step_den = (grid - 1) as f64;
    let mut lattice = Vec::with_capacity(n);
    let mut points = Vec::with_capacity(n);
    if dim == 1 {
        for i in 0..grid {
            lattice.push([i, 0]);
            points.push(vec![i as f64 / step_den]);
        }
    } else {
        for i in 0..grid {
            for j in 0..grid {
                lattice.push([i, j]);
                points.push(vec![i as f64 / step_den, j as f64 / step_den]);
            }
        }
    }

    let mut ball = vec![Vec::new(); n];
    for a in 0..n {
        for b in 0..n {
            if lattice_distance(&lattice[a], &lattice[b], step_den) <= epsilon {
                ball[a].push(b);
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw_weights = |rng: &mut ChaCha8Rng| -> Vec<f64> {
        let raw: Vec<f64> = (0..n).map(|_| 0.1 + rng.random::<f64>()).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    };
    let source_weights = draw_weights(&mut rng);
    let target_weights = draw_weights(&mut rng);

    Ok(FiniteWorld {
        dim,
        grid,
        epsilon,
        points,
        lattice,
        ball,
        source_weights,
        target_weights,
    })
}

fn lattice_distance(a: &[usize; 2], b: &[usize; 2], step_den: f64) -> f64 {
    let da = a[0].abs_diff(b[0]);
    let db = a[1].abs_diff(b[1]);
    da.max(db) as f64 / step_den
}

impl FiniteWorld {
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, idx: usize) -> &[f64] {
        &self.points[idx]
    }

    /// Ball membership, sorted ascending by point id.
    pub fn ball(&self, idx: usize) -> &[usize] {
        &self.ball[idx]
    }

    /// Exact L-infinity distance between two world points.
    pub fn distance(&self, a: usize, b: usize) -> f64 {
        lattice_distance(&self.lattice[a], &self.lattice[b], (self.grid - 1) as f64)
    }

    /// Distinct nonzero pairwise distances, ascending. On a regular grid this
    /// is `k/(grid-1)` for `k = 1..grid-1`, identical for d = 1 and d = 2.
    pub fn distance_spectrum(&self) -> Vec<f64> {
        (1..self.grid).map(|k| k as f64 / (self.grid - 1) as f64).collect()
    }

    /// Same grid and weights, different perturbation radius. Balls for a
    /// larger epsilon are supersets of balls for a smaller one.
    pub fn with_epsilon(&self, epsilon: f64) -> Result<FiniteWorld> {
        if !epsilon.is_finite() || epsilon < 0.0 {
            return Err(Error::InvalidConfig("epsilon must be finite and >= 0".into()));
        }
        let step_den = (self.grid - 1) as f64;
        let n = self.len();
        let mut ball = vec![Vec::new(); n];
        for a in 0..n {
            for b in 0..n {
                if lattice_distance(&self.lattice[a], &self.lattice[b], step_den) <= epsilon {
                    ball[a].push(b);
                }
            }
        }
        Ok(FiniteWorld { epsilon, ball, ..self.clone() })
    }

    /// Index of a vector that is bit-exactly a world point.
    pub fn point_index(&self, x: &[f64]) -> Option<usize> {
        if x.len() != self.dim {
            return None;
        }
        self.points.iter().position(|p| p.iter().zip(x).all(|(a, b)| a == b))
    }

    /// The grid itself as a dataset (used by evaluation fixtures).
    pub fn as_dataset(
        &self,
        name: &str,
        tag: DomainTag,
        labels: Option<Vec<usize>>,
    ) -> Result<DomainDataset> {
        DomainDataset::new(name, tag, self.points.clone(), labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moons_zero_rotation_is_bit_identical() {
        let spec = ShiftSpec { n_per_domain: 20, rotation_deg: 0.0, noise_sd: 0.1, seed: 9 };
        let (src, tgt) = make_two_moons_shift(&spec).unwrap();
        for (a, b) in src.inputs.iter().flatten().zip(tgt.inputs.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(src.labels, tgt.labels);
    }

    #[test]
    fn moons_full_turn_matches_zero_turn() {
        let zero = ShiftSpec { n_per_domain: 24, rotation_deg: 0.0, noise_sd: 0.05, seed: 3 };
        let full = ShiftSpec { rotation_deg: 360.0, ..zero };
        let (_, t0) = make_two_moons_shift(&zero).unwrap();
        let (_, t360) = make_two_moons_shift(&full).unwrap();
        for (a, b) in t0.inputs.iter().flatten().zip(t360.inputs.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn moons_rotation_preserves_centroid() {
        let spec = ShiftSpec { n_per_domain: 31, rotation_deg: 30.0, noise_sd: 0.1, seed: 7 };
        let (src, tgt) = make_two_moons_shift(&spec).unwrap();
        for k in 0..2 {
            let cs = src.inputs.iter().map(|p| p[k]).sum::<f64>() / src.len() as f64;
            let ct = tgt.inputs.iter().map(|p| p[k]).sum::<f64>() / tgt.len() as f64;
            assert!((cs - ct).abs() < 1e-9, "axis {k}: {cs} vs {ct}");
        }
    }

    #[test]
    fn moons_inputs_in_unit_box() {
        for deg in [0.0, 17.0, 40.0, 90.0, 215.0] {
            let spec = ShiftSpec { n_per_domain: 50, rotation_deg: deg, noise_sd: 0.12, seed: 1 };
            let (src, tgt) = make_two_moons_shift(&spec).unwrap();
            for v in src.inputs.iter().chain(tgt.inputs.iter()).flatten() {
                assert!((0.0..=1.0).contains(v));
            }
        }
    }

    #[test]
    fn world_line_grid_ball_map() {
        let w = make_finite_world(1, 3, 0.5, 0).unwrap();
        assert_eq!(w.ball(0), &[0, 1]);
        assert_eq!(w.ball(1), &[0, 1, 2]);
        assert_eq!(w.ball(2), &[1, 2]);
    }

    #[test]
    fn world_zero_epsilon_gives_singletons() {
        let w = make_finite_world(2, 4, 0.0, 0).unwrap();
        for i in 0..w.len() {
            assert_eq!(w.ball(i), &[i]);
        }
    }

    #[test]
    fn world_square_grid_corner_ball() {
        // 3x3 grid, eps = 0.5 = one grid step: the corner sees itself plus
        // its three lattice neighbors within one step on each axis.
        let w = make_finite_world(2, 3, 0.5, 0).unwrap();
        let corner = w.point_index(&[0.0, 0.0]).unwrap();
        assert_eq!(w.ball(corner).len(), 4);
    }

    #[test]
    fn world_capacity_is_enforced() {
        assert!(matches!(make_finite_world(2, 65, 0.1, 0), Err(Error::Capacity(_))));
        assert!(make_finite_world(2, 64, 0.1, 0).is_ok());
    }

    #[test]
    fn world_weights_are_positive_and_normalized() {
        let w = make_finite_world(2, 5, 0.25, 42).unwrap();
        for ws in [&w.source_weights, &w.target_weights] {
            assert!(ws.iter().all(|&v| v > 0.0));
            assert!((ws.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
