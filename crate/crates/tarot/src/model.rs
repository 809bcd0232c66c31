//! The trained architecture: a two-layer tanh feature extractor shared by two
//! linear heads — the main classifier and the auxiliary head that the
//! disparity term trains adversarially.
//!
//! Parameters live in one flat vector so the optimizer, weight decay, and
//! serialization treat the network uniformly; named ranges expose the feature
//! block and each head block for the updates that treat them differently.
//! All gradients are written out by hand: the architecture is small and
//! fixed, and exactness of the backward pass is load-bearing for the
//! finite-difference and theory tests, so there is no autodiff layer.

use std::io::{BufReader, BufWriter};
use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scorer::{DiffScorer, ScalarLoss, Scorer};

/// Layer widths. `classes >= 2`; the two feature layers share `hidden`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpDims {
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
}

impl MlpDims {
    pub fn new(input: usize, hidden: usize, classes: usize) -> Result<Self> {
        if input == 0 || hidden == 0 {
            return Err(Error::InvalidConfig("input and hidden dims must be >= 1".into()));
        }
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need >= 2 classes, got {classes}")));
        }
        Ok(Self { input, hidden, classes })
    }

    pub fn param_len(&self) -> usize {
        let MlpDims { input, hidden, classes } = *self;
        hidden * input + hidden          // w1, b1
            + hidden * hidden + hidden   // w2, b2
            + 2 * (classes * hidden + classes) // both heads
    }
}

/// Which linear head to read logits from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Main,
    Aux,
}

/// Cached forward pass: the standardized input and both post-tanh
/// activations. Enough to evaluate either head and to run the backward pass
/// without recomputation.
#[derive(Debug, Clone)]
pub struct Trace {
    /// Input after the fixed standardization, not the raw coordinates.
    pub x: Vec<f64>,
    pub h1: Vec<f64>,
    pub h2: Vec<f64>,
}

/// Inputs live in the unit box, so the first layer consumes them through the
/// fixed map `(x - CENTER) * SCALE` — mean zero and unit variance for
/// uniform box coordinates — which keeps initial pre-activations inside
/// tanh's sensitive range instead of its near-linear core.
const INPUT_CENTER: f64 = 0.5;
/// sqrt(12), the reciprocal standard deviation of U[0, 1].
const INPUT_SCALE: f64 = 3.4641016151377544;

#[derive(Debug, Clone, PartialEq)]
pub struct MlpScorer {
    dims: MlpDims,
    params: Vec<f64>,
    init_seed: u64,
}

/// On-disk form. Field order is stable; `params` round-trips bit-exactly
/// through JSON because both serialization directions are shortest-exact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelCheckpoint {
    pub kind: String,
    pub input: usize,
    pub hidden: usize,
    pub classes: usize,
    pub seed: u64,
    pub epoch: Option<usize>,
    pub params: Vec<f64>,
}

// Flat layout offsets, in declaration order.
struct Layout {
    w1: Range<usize>,
    b1: Range<usize>,
    w2: Range<usize>,
    b2: Range<usize>,
    wm: Range<usize>,
    bm: Range<usize>,
    wa: Range<usize>,
    ba: Range<usize>,
}

impl Layout {
    fn of(d: &MlpDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        Self {
            w1: take(d.hidden * d.input),
            b1: take(d.hidden),
            w2: take(d.hidden * d.hidden),
            b2: take(d.hidden),
            wm: take(d.classes * d.hidden),
            bm: take(d.classes),
            wa: take(d.classes * d.hidden),
            ba: take(d.classes),
        }
    }

    fn head(&self, head: Head) -> (Range<usize>, Range<usize>) {
        match head {
            Head::Main => (self.wm.clone(), self.bm.clone()),
            Head::Aux => (self.wa.clone(), self.ba.clone()),
        }
    }
}

impl MlpScorer {
    /// Fresh network with weights uniform in `±1/sqrt(fan_in)` and zero
    /// biases, drawn from a seeded stream so construction is reproducible.
    pub fn new(dims: MlpDims, seed: u64) -> Self {
        let lay = Layout::of(&dims);
        let mut params = vec![0.0; dims.param_len()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut fill = |range: Range<usize>, fan_in: usize, params: &mut Vec<f64>| {
            let bound = 1.0 / (fan_in as f64).sqrt();
            for i in range {
                params[i] = (rng.random::<f64>() * 2.0 - 1.0) * bound;
            }
        };
        fill(lay.w1, dims.input, &mut params);
        fill(lay.w2, dims.hidden, &mut params);
        fill(lay.wm, dims.hidden, &mut params);
        fill(lay.wa, dims.hidden, &mut params);
        Self { dims, params, init_seed: seed }
    }

    pub fn from_params(dims: MlpDims, params: Vec<f64>, seed: u64) -> Result<Self> {
        if params.len() != dims.param_len() {
            return Err(Error::ShapeMismatch { expected: dims.param_len(), got: params.len() });
        }
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("model parameters"));
        }
        Ok(Self { dims, params, init_seed: seed })
    }

    pub fn dims(&self) -> MlpDims {
        self.dims
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Feature-extractor block: both tanh layers.
    pub fn psi_range(&self) -> Range<usize> {
        let lay = Layout::of(&self.dims);
        lay.w1.start..lay.b2.end
    }

    pub fn main_head_range(&self) -> Range<usize> {
        let lay = Layout::of(&self.dims);
        lay.wm.start..lay.bm.end
    }

    pub fn aux_head_range(&self) -> Range<usize> {
        let lay = Layout::of(&self.dims);
        lay.wa.start..lay.ba.end
    }

    /// Hex digest of the architecture and exact parameter bits; any
    /// single-bit parameter change produces a different digest.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.dims.input.to_le_bytes());
        h.update(self.dims.hidden.to_le_bytes());
        h.update(self.dims.classes.to_le_bytes());
        for p in &self.params {
            h.update(p.to_bits().to_le_bytes());
        }
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn forward_trace(&self, x: &[f64]) -> Result<Trace> {
        let d = &self.dims;
        if x.len() != d.input {
            return Err(Error::ShapeMismatch { expected: d.input, got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("model input"));
        }
        let lay = Layout::of(d);
        let p = &self.params;
        let z: Vec<f64> = x.iter().map(|&v| (v - INPUT_CENTER) * INPUT_SCALE).collect();
        let mut h1 = vec![0.0; d.hidden];
        for j in 0..d.hidden {
            let mut a = p[lay.b1.start + j];
            let row = lay.w1.start + j * d.input;
            for i in 0..d.input {
                a += p[row + i] * z[i];
            }
            h1[j] = a.tanh();
        }
        let mut h2 = vec![0.0; d.hidden];
        for j in 0..d.hidden {
            let mut a = p[lay.b2.start + j];
            let row = lay.w2.start + j * d.hidden;
            for k in 0..d.hidden {
                a += p[row + k] * h1[k];
            }
            h2[j] = a.tanh();
        }
        Ok(Trace { x: z, h1, h2 })
    }

    pub fn head_logits_from_trace(&self, trace: &Trace, head: Head) -> Vec<f64> {
        let d = &self.dims;
        let lay = Layout::of(d);
        let (w, b) = lay.head(head);
        let p = &self.params;
        let mut z = vec![0.0; d.classes];
        for c in 0..d.classes {
            let mut a = p[b.start + c];
            let row = w.start + c * d.hidden;
            for k in 0..d.hidden {
                a += p[row + k] * trace.h2[k];
            }
            z[c] = a;
        }
        z
    }

    pub fn head_logits(&self, x: &[f64], head: Head) -> Result<Vec<f64>> {
        let trace = self.forward_trace(x)?;
        Ok(self.head_logits_from_trace(&trace, head))
    }

    /// Backward pass through the feature layers shared by both directions
    /// below. Given `d loss / d h2`, returns (`d loss / d h1` folded all the
    /// way to `d loss / d x`, plus the tanh-layer deltas needed for parameter
    /// gradients).
    fn feature_deltas(&self, trace: &Trace, dh2: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = &self.dims;
        let lay = Layout::of(d);
        let p = &self.params;
        // through second tanh
        let da2: Vec<f64> = (0..d.hidden).map(|j| dh2[j] * (1.0 - trace.h2[j] * trace.h2[j])).collect();
        // into first activation
        let mut dh1 = vec![0.0; d.hidden];
        for j in 0..d.hidden {
            let row = lay.w2.start + j * d.hidden;
            for k in 0..d.hidden {
                dh1[k] += da2[j] * p[row + k];
            }
        }
        let da1: Vec<f64> = (0..d.hidden).map(|j| dh1[j] * (1.0 - trace.h1[j] * trace.h1[j])).collect();
        let mut dx = vec![0.0; d.input];
        for j in 0..d.hidden {
            let row = lay.w1.start + j * d.input;
            for i in 0..d.input {
                dx[i] += da1[j] * p[row + i];
            }
        }
        // Chain through the input standardization back to raw coordinates.
        for v in &mut dx {
            *v *= INPUT_SCALE;
        }
        (dx, da1, da2)
    }

    /// Gradient of `dlogits . z(x)` with respect to the input only. This is
    /// the hot path of gradient attacks, so it skips parameter gradients.
    pub fn input_grad_from_trace(&self, trace: &Trace, head: Head, dlogits: &[f64]) -> Vec<f64> {
        let d = &self.dims;
        let lay = Layout::of(d);
        let (w, _) = lay.head(head);
        let p = &self.params;
        let mut dh2 = vec![0.0; d.hidden];
        for c in 0..d.classes {
            let row = w.start + c * d.hidden;
            for k in 0..d.hidden {
                dh2[k] += dlogits[c] * p[row + k];
            }
        }
        let (dx, _, _) = self.feature_deltas(trace, &dh2);
        dx
    }

    /// Adds `scale` times the gradient of `dlogits . z(x)` (taken at the
    /// given head) into `acc`, a full-length parameter-gradient buffer. The
    /// other head's block is untouched. Returns the input gradient as well,
    /// scaled the same way.
    pub fn accumulate_param_grad(
        &self,
        trace: &Trace,
        head: Head,
        dlogits: &[f64],
        scale: f64,
        acc: &mut [f64],
    ) -> Vec<f64> {
        debug_assert_eq!(acc.len(), self.params.len());
        debug_assert_eq!(dlogits.len(), self.dims.classes);
        let d = &self.dims;
        let lay = Layout::of(d);
        let (w, b) = lay.head(head);
        let p = &self.params;

        let mut dh2 = vec![0.0; d.hidden];
        for c in 0..d.classes {
            let row = w.start + c * d.hidden;
            for k in 0..d.hidden {
                acc[row + k] += scale * dlogits[c] * trace.h2[k];
                dh2[k] += dlogits[c] * p[row + k];
            }
            acc[b.start + c] += scale * dlogits[c];
        }

        let (dx, da1, da2) = self.feature_deltas(trace, &dh2);
        for j in 0..d.hidden {
            let row = lay.w2.start + j * d.hidden;
            for k in 0..d.hidden {
                acc[row + k] += scale * da2[j] * trace.h1[k];
            }
            acc[lay.b2.start + j] += scale * da2[j];
        }
        for j in 0..d.hidden {
            let row = lay.w1.start + j * d.input;
            for i in 0..d.input {
                acc[row + i] += scale * da1[j] * trace.x[i];
            }
            acc[lay.b1.start + j] += scale * da1[j];
        }
        dx.into_iter().map(|v| scale * v).collect()
    }

    /// Read-only scorer over one head, usable wherever a differentiable
    /// scorer is expected (attacks, evaluation, disparity search).
    pub fn view(&self, head: Head) -> HeadView<'_> {
        HeadView { model: self, head }
    }

    pub fn to_checkpoint(&self, epoch: Option<usize>) -> ModelCheckpoint {
        ModelCheckpoint {
            kind: "mlp_two_head".into(),
            input: self.dims.input,
            hidden: self.dims.hidden,
            classes: self.dims.classes,
            seed: self.init_seed,
            epoch,
            params: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &ModelCheckpoint) -> Result<Self> {
        if ck.kind != "mlp_two_head" {
            return Err(Error::Checkpoint(format!("unknown model kind {:?}", ck.kind)));
        }
        let dims = MlpDims::new(ck.input, ck.hidden, ck.classes)?;
        Self::from_params(dims, ck.params.clone(), ck.seed)
    }

    pub fn save(&self, path: &Path, epoch: Option<usize>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(BufWriter::new(file), &self.to_checkpoint(epoch))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let ck: ModelCheckpoint = serde_json::from_reader(BufReader::new(file))?;
        Self::from_checkpoint(&ck)
    }
}

/// Borrowed view of one head of an [`MlpScorer`].
#[derive(Clone, Copy)]
pub struct HeadView<'a> {
    model: &'a MlpScorer,
    head: Head,
}

impl Scorer for HeadView<'_> {
    fn input_dim(&self) -> usize {
        self.model.dims.input
    }

    fn class_count(&self) -> usize {
        self.model.dims.classes
    }

    fn logits(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.model.head_logits(x, self.head)
    }
}

impl DiffScorer for HeadView<'_> {
    fn loss_input_grad(
        &self,
        loss: &dyn ScalarLoss,
        x: &[f64],
        y: usize,
    ) -> Result<(f64, Vec<f64>)> {
        let trace = self.model.forward_trace(x)?;
        let z = self.model.head_logits_from_trace(&trace, self.head);
        let value = loss.value(&z, y);
        let dz = loss.logit_grad(&z, y);
        Ok((value, self.model.input_grad_from_trace(&trace, self.head, &dz)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::loss::CeLoss;

    fn small() -> MlpScorer {
        MlpScorer::new(MlpDims::new(3, 5, 4).unwrap(), 42)
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = MlpScorer::new(MlpDims::new(3, 5, 4).unwrap(), 42);
        let b = small();
        assert_eq!(a.params(), b.params());
        let c = MlpScorer::new(MlpDims::new(3, 5, 4).unwrap(), 43);
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn heads_are_independent() {
        let mut m = small();
        let x = [0.3, -0.2, 0.9];
        let before = m.head_logits(&x, Head::Main).unwrap();
        let aux = m.aux_head_range();
        for i in aux {
            m.params_mut()[i] += 1.0;
        }
        let after = m.head_logits(&x, Head::Main).unwrap();
        assert_eq!(before, after);
        // and the block ranges tile the parameter vector exactly
        let m2 = small();
        assert_eq!(m2.psi_range().start, 0);
        assert_eq!(m2.psi_range().end, m2.main_head_range().start);
        assert_eq!(m2.main_head_range().end, m2.aux_head_range().start);
        assert_eq!(m2.aux_head_range().end, m2.params().len());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let m = small();
        let view = m.view(Head::Main);
        let x = [0.31, -0.44, 0.75];
        let y = 2;
        let (_, grad) = view.loss_input_grad(&CeLoss, &x, y).unwrap();
        let h = 1e-6;
        for i in 0..x.len() {
            let mut xp = x;
            let mut xm = x;
            xp[i] += h;
            xm[i] -= h;
            let (lp, _) = view.loss_input_grad(&CeLoss, &xp, y).unwrap();
            let (lm, _) = view.loss_input_grad(&CeLoss, &xm, y).unwrap();
            let fd = (lp - lm) / (2.0 * h);
            assert!(
                (fd - grad[i]).abs() <= 1e-6 * (1.0 + fd.abs()),
                "coord {i}: fd {fd} vs grad {}",
                grad[i]
            );
        }
    }

    #[test]
    fn param_gradient_matches_finite_differences() {
        let m = small();
        let x = [0.1, 0.2, -0.3];
        let y = 1;
        for head in [Head::Main, Head::Aux] {
            let trace = m.forward_trace(&x).unwrap();
            let z = m.head_logits_from_trace(&trace, head);
            let dz = CeLoss.logit_grad(&z, y);
            let mut grad = vec![0.0; m.params().len()];
            m.accumulate_param_grad(&trace, head, &dz, 1.0, &mut grad);

            let h = 1e-6;
            // spot-check a spread of parameter indices across every block
            for idx in (0..m.params().len()).step_by(7) {
                let mut mp = m.clone();
                mp.params_mut()[idx] += h;
                let zp = mp.head_logits(&x, head).unwrap();
                let lp = CeLoss.value(&zp, y);
                let mut mm = m.clone();
                mm.params_mut()[idx] -= h;
                let zm = mm.head_logits(&x, head).unwrap();
                let lm = CeLoss.value(&zm, y);
                let fd = (lp - lm) / (2.0 * h);
                assert!(
                    (fd - grad[idx]).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "{head:?} param {idx}: fd {fd} vs grad {}",
                    grad[idx]
                );
            }
        }
    }

    #[test]
    fn scale_factor_applies_to_both_outputs() {
        let m = small();
        let x = [0.1, 0.2, -0.3];
        let trace = m.forward_trace(&x).unwrap();
        let z = m.head_logits_from_trace(&trace, Head::Aux);
        let dz = CeLoss.logit_grad(&z, 0);
        let mut g1 = vec![0.0; m.params().len()];
        let dx1 = m.accumulate_param_grad(&trace, Head::Aux, &dz, 1.0, &mut g1);
        let mut g2 = vec![0.0; m.params().len()];
        let dx2 = m.accumulate_param_grad(&trace, Head::Aux, &dz, -2.5, &mut g2);
        for (a, b) in g1.iter().zip(&g2) {
            assert!((b - (-2.5) * a).abs() < 1e-15);
        }
        for (a, b) in dx1.iter().zip(&dx2) {
            assert!((b - (-2.5) * a).abs() < 1e-15);
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = small();
        m.save(&path, Some(3)).unwrap();
        let back = MlpScorer::load(&path).unwrap();
        assert_eq!(m.params().len(), back.params().len());
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(m.digest(), back.digest());
    }

    #[test]
    fn digest_sees_single_param_change() {
        let mut m = small();
        let d0 = m.digest();
        let last = m.params().len() - 1;
        m.params_mut()[last] += 1e-12;
        assert_ne!(d0, m.digest());
    }
}
