//! Datasets as they cross module and process boundaries.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainTag {
    Source,
    Target,
    Unseen,
}

/// A finite sample from one domain. Inputs live in `[0,1]^d`; labels are
/// optional because target-domain data is unlabeled during adaptation (when
/// present on a target set they are held out for evaluation only).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DomainDataset {
    pub name: String,
    pub domain_tag: DomainTag,
    pub inputs: Vec<Vec<f64>>,
    pub labels: Option<Vec<usize>>,
}

impl DomainDataset {
    pub fn new(
        name: impl Into<String>,
        domain_tag: DomainTag,
        inputs: Vec<Vec<f64>>,
        labels: Option<Vec<usize>>,
    ) -> Result<Self> {
        let ds = Self { name: name.into(), domain_tag, inputs, labels };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::InvalidConfig("dataset has no inputs".into()));
        }
        let d = self.inputs[0].len();
        if d == 0 {
            return Err(Error::InvalidConfig("zero-dimensional inputs".into()));
        }
        for row in &self.inputs {
            if row.len() != d {
                return Err(Error::ShapeMismatch { expected: d, got: row.len() });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("dataset input"));
            }
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.inputs.len() {
                return Err(Error::PairingMismatch {
                    left: self.inputs.len(),
                    right: labels.len(),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.first().map(|r| r.len()).unwrap_or(0)
    }

    /// Labels or a `MissingLabels` error, for operations that require them.
    pub fn labels(&self) -> Result<&[usize]> {
        self.labels.as_deref().ok_or(Error::MissingLabels)
    }

    /// Checks every label against a class count.
    pub fn check_labels(&self, classes: usize) -> Result<()> {
        for &y in self.labels()? {
            if y >= classes {
                return Err(Error::LabelRange { label: y, classes });
            }
        }
        Ok(())
    }

    /// Copy with labels removed, e.g. to hand a target split to a trainer
    /// while keeping the labeled original for evaluation.
    pub fn without_labels(&self) -> Self {
        Self {
            name: self.name.clone(),
            domain_tag: self.domain_tag,
            inputs: self.inputs.clone(),
            labels: None,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ds: Self = serde_json::from_str(text)?;
        ds.validate()?;
        Ok(ds)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_ragged_inputs() {
        let err = DomainDataset::new(
            "bad",
            DomainTag::Source,
            vec![vec![0.0, 0.0], vec![0.5]],
            None,
        );
        assert!(err.is_err());
    }

    #[test]
    fn rejects_label_length_mismatch() {
        let err = DomainDataset::new(
            "bad",
            DomainTag::Source,
            vec![vec![0.0], vec![0.5]],
            Some(vec![0]),
        );
        assert!(matches!(err, Err(Error::PairingMismatch { .. })));
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let ds = DomainDataset::new(
            "rt",
            DomainTag::Target,
            vec![vec![0.1 + 0.2, 1.0 / 3.0], vec![5e-324, 0.999_999_999_999]],
            Some(vec![1, 0]),
        )
        .unwrap();
        let back = DomainDataset::from_json(&ds.to_json().unwrap()).unwrap();
        for (a, b) in ds.inputs.iter().flatten().zip(back.inputs.iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(ds.labels, back.labels);
    }
}
