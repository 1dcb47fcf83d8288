use crate::dist::{GaussianPrediction, Prediction};
use crate::error::{Error, Result};

/// One matched (prediction, ground truth) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub prediction: GaussianPrediction,
    pub ground_truth: Vec<f64>,
    /// Source image for detection data; used to keep images on one side of a
    /// train/eval split.
    pub image_id: Option<String>,
}

/// Matched pairs sharing a common output dimension `K`.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationDataset {
    k: usize,
    samples: Vec<Sample>,
}

impl CalibrationDataset {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            samples: Vec::new(),
        }
    }

    pub fn from_samples(k: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut ds = Self::new(k);
        for s in samples {
            ds.push(s)?;
        }
        Ok(ds)
    }

    pub fn push(&mut self, sample: Sample) -> Result<()> {
        if sample.prediction.k() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: sample.prediction.k(),
            });
        }
        if sample.ground_truth.len() != self.k {
            return Err(Error::DimensionMismatch {
                expected: self.k,
                got: sample.ground_truth.len(),
            });
        }
        if sample.ground_truth.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("ground truth"));
        }
        self.samples.push(sample);
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyDataset)
        } else {
            Ok(())
        }
    }

    pub fn ground_truths(&self) -> Vec<Vec<f64>> {
        self.samples.iter().map(|s| s.ground_truth.clone()).collect()
    }

    pub fn predictions(&self) -> Vec<Prediction> {
        self.samples
            .iter()
            .map(|s| Prediction::Gaussian(s.prediction.clone()))
            .collect()
    }

    /// Subset by index, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            k: self.k,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }

    /// Contiguous prefix/suffix split at `mid`.
    pub fn split_at(&self, mid: usize) -> (Self, Self) {
        let mid = mid.min(self.len());
        (
            Self {
                k: self.k,
                samples: self.samples[..mid].to_vec(),
            },
            Self {
                k: self.k,
                samples: self.samples[mid..].to_vec(),
            },
        )
    }

    /// Copy with every prediction reduced to its diagonal covariance.
    pub fn to_diagonal(&self) -> Self {
        Self {
            k: self.k,
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    prediction: s.prediction.to_diagonal(),
                    ..s.clone()
                })
                .collect(),
        }
    }
}
