//! Scoring functions and the small amount of shared classifier machinery.
//!
//! A scorer maps an input vector to one real-valued logit per class. The
//! induced classifier takes the argmax, with ties broken toward the lowest
//! class index so that classification is a total deterministic function.
//! Everything downstream (margins, disparities, attacks, the bound checker)
//! is phrased in terms of these logits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A function from inputs to per-class logits.
pub trait Scorer {
    fn input_dim(&self) -> usize;
    fn class_count(&self) -> usize;
    /// Logits at `x`. Fails on dimension mismatch or non-finite output.
    fn logits(&self, x: &[f64]) -> Result<Vec<f64>>;
}

/// A pluggable scalar loss of (logits, label), differentiable in the logits.
/// Attack loops maximize these.
pub trait ScalarLoss: Sync {
    fn value(&self, logits: &[f64], y: usize) -> f64;
    fn logit_grad(&self, logits: &[f64], y: usize) -> Vec<f64>;
}

/// A scorer that can also backpropagate a scalar loss to its input, which is
/// what gradient attacks need.
pub trait DiffScorer: Scorer + Sync {
    /// Returns the loss value at (`x`, `y`) and its gradient with respect to `x`.
    fn loss_input_grad(&self, loss: &dyn ScalarLoss, x: &[f64], y: usize)
        -> Result<(f64, Vec<f64>)>;
}

/// Argmax with ties broken toward the lowest index.
pub fn predict_from_logits(logits: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = j;
        }
    }
    best
}

/// Predicted class of `f` at `x`.
pub fn predict_class<S: Scorer + ?Sized>(f: &S, x: &[f64]) -> Result<usize> {
    let z = f.logits(x)?;
    Ok(predict_from_logits(&z))
}

/// log(sum(exp(z))) computed against the running maximum so that large logits
/// do not overflow.
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln()
}

/// Softmax probabilities of a logit vector.
pub fn softmax_scores(logits: &[f64]) -> Result<Vec<f64>> {
    if logits.is_empty() {
        return Err(Error::ShapeMismatch { expected: 1, got: 0 });
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("softmax input"));
    }
    let lse = logsumexp(logits);
    Ok(logits.iter().map(|&v| (v - lse).exp()).collect())
}

/// Margin scale of the disparity objective. The cross-entropy weight `gamma`
/// and the ramp width `rho` are two views of one knob, tied by rho = ln(gamma);
/// only `gamma` crosses serialization boundaries.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
#[serde(try_from = "MarginConfigRepr", into = "MarginConfigRepr")]
pub struct MarginConfig {
    gamma: f64,
    rho: f64,
}

#[derive(Serialize, Deserialize)]
struct MarginConfigRepr {
    gamma: f64,
}

impl TryFrom<MarginConfigRepr> for MarginConfig {
    type Error = Error;
    fn try_from(repr: MarginConfigRepr) -> Result<Self> {
        MarginConfig::from_gamma(repr.gamma)
    }
}

impl From<MarginConfig> for MarginConfigRepr {
    fn from(m: MarginConfig) -> Self {
        MarginConfigRepr { gamma: m.gamma }
    }
}

impl MarginConfig {
    pub fn from_gamma(gamma: f64) -> Result<Self> {
        if !(gamma > 1.0) || !gamma.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "gamma must be finite and > 1, got {gamma}"
            )));
        }
        Ok(Self { gamma, rho: gamma.ln() })
    }

    pub fn from_rho(rho: f64) -> Result<Self> {
        if !(rho > 0.0) || !rho.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "rho must be finite and > 0, got {rho}"
            )));
        }
        Ok(Self { gamma: rho.exp(), rho })
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }
}

impl Default for MarginConfig {
    fn default() -> Self {
        Self::from_gamma(4.0).expect("4 > 1")
    }
}

/// Plain affine scorer: logits = W x + b. Useful on its own for closed-form
/// attack checks and as the simplest differentiable model.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LinearScorer {
    /// Row-major C x d weight matrix.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl LinearScorer {
    pub fn new(weights: Vec<Vec<f64>>, bias: Vec<f64>) -> Result<Self> {
        if weights.is_empty() || weights.len() != bias.len() {
            return Err(Error::InvalidConfig(
                "weight rows and bias length must match and be nonzero".into(),
            ));
        }
        let d = weights[0].len();
        if d == 0 || weights.iter().any(|r| r.len() != d) {
            return Err(Error::InvalidConfig("ragged or empty weight matrix".into()));
        }
        Ok(Self { weights, bias })
    }
}

impl Scorer for LinearScorer {
    fn input_dim(&self) -> usize {
        self.weights[0].len()
    }

    fn class_count(&self) -> usize {
        self.weights.len()
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.input_dim() {
            return Err(Error::ShapeMismatch { expected: self.input_dim(), got: x.len() });
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.bias)
            .map(|(row, b)| row.iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + b)
            .collect())
    }
}

impl DiffScorer for LinearScorer {
    fn loss_input_grad(
        &self,
        loss: &dyn ScalarLoss,
        x: &[f64],
        y: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let z = self.logits(x)?;
        let value = loss.value(&z, y);
        let dz = loss.logit_grad(&z, y);
        let mut dx = vec![0.0; x.len()];
        for (row, &g) in self.weights.iter().zip(&dz) {
            for (k, w) in row.iter().enumerate() {
                dx[k] += g * w;
            }
        }
        Ok((value, dx))
    }
}

/// Scorer given by an explicit table of logits over the points of a finite
/// world, indexed by point id. This is the hypothesis representation the
/// exact bound checker enumerates over.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LogitTable {
    rows: Vec<Vec<f64>>,
    classes: usize,
}

impl LogitTable {
    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let classes = rows.first().map(|r| r.len()).unwrap_or(0);
        if classes < 2 {
            return Err(Error::InvalidConfig(
                "a logit table needs at least one point and two classes".into(),
            ));
        }
        if rows.iter().any(|r| r.len() != classes) {
            return Err(Error::InvalidConfig("ragged logit table".into()));
        }
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("logit table entry"));
        }
        Ok(Self { rows, classes })
    }

    /// Snapshot of an arbitrary scorer on the points of a world, so exact
    /// enumeration and gradient models can be compared on equal footing.
    pub fn snapshot<S: Scorer + ?Sized>(
        scorer: &S,
        world: &crate::synth::FiniteWorld,
    ) -> Result<Self> {
        let rows = (0..world.len())
            .map(|i| scorer.logits(world.point(i)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_rows(rows)
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.classes
    }

    pub fn row(&self, idx: usize) -> &[f64] {
        &self.rows[idx]
    }

    pub fn predict(&self, idx: usize) -> usize {
        predict_from_logits(&self.rows[idx])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn predict_breaks_ties_low() {
        assert_eq!(predict_from_logits(&[0.0, 0.0]), 0);
        assert_eq!(predict_from_logits(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(predict_from_logits(&[-1.0, -0.5]), 1);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let s = softmax_scores(&[0.5, 0.5, 0.5]).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn margin_config_ties_gamma_and_rho() {
        let m = MarginConfig::from_gamma(4.0).unwrap();
        assert!((m.rho() - 4.0f64.ln()).abs() < 1e-15);
        let m2 = MarginConfig::from_rho(m.rho()).unwrap();
        assert!((m2.gamma() - 4.0).abs() < 1e-12);
        assert!(MarginConfig::from_gamma(1.0).is_err());
        assert!(MarginConfig::from_rho(0.0).is_err());
    }
}
