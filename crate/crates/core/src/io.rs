//! JSON-lines formats for datasets and calibrated outputs.
//!
//! One object per line. Gaussian lines carry `mean`, `var` and optionally a
//! row-major `cov`; Cauchy lines carry `location`/`scale`; grid lines carry
//! per-dimension `support`/`cdf` arrays. `gt` holds the ground truth when
//! known and `image_id` the source image for detection data.

use std::io::{BufRead, Write};

use nalgebra::DMatrix;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::dataset::{CalibrationDataset, Sample};
use crate::dist::{CauchyPrediction, GaussianPrediction, GaussianScale, GridCdf, NonparametricDistribution, Prediction};
use crate::error::{Error, Result};

/// Parses one JSON object per non-blank line; errors carry the 1-based line.
pub fn read_jsonl<T: DeserializeOwned>(reader: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_jsonl<T: Serialize>(mut writer: impl Write, items: &[T]) -> Result<()> {
    for item in items {
        serde_json::to_writer(&mut writer, item)?;
        writer.write_all(b"\n")?;
    }
    writer.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    #[default]
    Gaussian,
    Cauchy,
    Grid,
}

fn is_gaussian(f: &Family) -> bool {
    *f == Family::Gaussian
}

/// One line of a sample file.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    #[serde(default, skip_serializing_if = "is_gaussian")]
    pub family: Family,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mean: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub var: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cov: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub location: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scale: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub support: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cdf: Option<Vec<Vec<f64>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_id: Option<String>,
}

fn matrix_from_rows(rows: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let k = rows.len();
    if let Some(r) = rows.iter().find(|r| r.len() != k) {
        return Err(Error::DimensionMismatch { expected: k, got: r.len() });
    }
    Ok(DMatrix::from_fn(k, k, |i, j| rows[i][j]))
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

fn required<T>(v: Option<T>, field: &str) -> Result<T> {
    v.ok_or_else(|| Error::InvalidParameter(format!("missing field `{field}`")))
}

impl SampleRecord {
    pub fn from_prediction(prediction: &Prediction, gt: Option<Vec<f64>>, image_id: Option<String>) -> Self {
        let mut rec = Self {
            gt,
            image_id,
            ..Self::default()
        };
        match prediction {
            Prediction::Gaussian(g) => {
                rec.mean = Some(g.mean().to_vec());
                rec.var = Some(g.variances());
                if let GaussianScale::Full(c) = g.scale() {
                    rec.cov = Some(matrix_rows(c));
                }
            }
            Prediction::Cauchy(c) => {
                rec.family = Family::Cauchy;
                rec.location = Some(c.location().to_vec());
                rec.scale = Some(c.scale().to_vec());
            }
            Prediction::Grid(n) => {
                rec.family = Family::Grid;
                rec.support = Some(n.dims().iter().map(|d| d.support().to_vec()).collect());
                rec.cdf = Some(n.dims().iter().map(|d| d.cdf_values().to_vec()).collect());
            }
        }
        rec
    }

    pub fn from_sample(sample: &Sample) -> Self {
        Self::from_prediction(
            &Prediction::Gaussian(sample.prediction.clone()),
            Some(sample.ground_truth.clone()),
            sample.image_id.clone(),
        )
    }

    pub fn to_gaussian(&self) -> Result<GaussianPrediction> {
        if self.family != Family::Gaussian {
            return Err(Error::Unsupported(format!("expected a Gaussian sample, got {:?}", self.family)));
        }
        let mean = required(self.mean.clone(), "mean")?;
        match &self.cov {
            Some(rows) => GaussianPrediction::full(mean, matrix_from_rows(rows)?),
            None => GaussianPrediction::diagonal(mean, required(self.var.clone(), "var")?),
        }
    }

    pub fn to_prediction(&self) -> Result<Prediction> {
        Ok(match self.family {
            Family::Gaussian => self.to_gaussian()?.into(),
            Family::Cauchy => CauchyPrediction::new(
                required(self.location.clone(), "location")?,
                required(self.scale.clone(), "scale")?,
            )?
            .into(),
            Family::Grid => {
                let support = required(self.support.clone(), "support")?;
                let cdf = required(self.cdf.clone(), "cdf")?;
                if support.len() != cdf.len() {
                    return Err(Error::DimensionMismatch {
                        expected: support.len(),
                        got: cdf.len(),
                    });
                }
                let dims = support
                    .into_iter()
                    .zip(cdf)
                    .map(|(s, c)| GridCdf::new(s, c))
                    .collect::<Result<Vec<_>>>()?;
                NonparametricDistribution::new(dims)?.into()
            }
        })
    }

    pub fn to_sample(&self) -> Result<Sample> {
        Ok(Sample {
            prediction: self.to_gaussian()?,
            ground_truth: required(self.gt.clone(), "gt")?,
            image_id: self.image_id.clone(),
        })
    }
}

fn at_line<T>(line: usize, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Parse { .. } => e,
        other => Error::Parse {
            line,
            msg: other.to_string(),
        },
    })
}

/// Gaussian samples with ground truth; every line must share one K.
pub fn read_dataset(reader: impl BufRead) -> Result<CalibrationDataset> {
    let records: Vec<SampleRecord> = read_jsonl(reader)?;
    let mut ds: Option<CalibrationDataset> = None;
    for (i, rec) in records.iter().enumerate() {
        let sample = at_line(i + 1, rec.to_sample())?;
        let ds = ds.get_or_insert_with(|| CalibrationDataset::new(sample.prediction.k()));
        at_line(i + 1, ds.push(sample))?;
    }
    ds.ok_or(Error::EmptyDataset)
}

pub fn write_dataset(writer: impl Write, dataset: &CalibrationDataset) -> Result<()> {
    let records: Vec<SampleRecord> = dataset.samples().iter().map(SampleRecord::from_sample).collect();
    write_jsonl(writer, &records)
}

/// Predictions of any family, with optional ground truths and image ids.
#[derive(Debug, Clone, Default)]
pub struct PredictionFile {
    pub predictions: Vec<Prediction>,
    pub ground_truths: Vec<Option<Vec<f64>>>,
    pub image_ids: Vec<Option<String>>,
}

impl PredictionFile {
    /// Ground truths if every line has one.
    pub fn targets(&self) -> Result<Vec<Vec<f64>>> {
        self.ground_truths
            .iter()
            .enumerate()
            .map(|(i, g)| {
                g.clone().ok_or(Error::Parse {
                    line: i + 1,
                    msg: "missing field `gt`".into(),
                })
            })
            .collect()
    }
}

pub fn read_predictions(reader: impl BufRead) -> Result<PredictionFile> {
    let records: Vec<SampleRecord> = read_jsonl(reader)?;
    let mut out = PredictionFile::default();
    for (i, rec) in records.into_iter().enumerate() {
        out.predictions.push(at_line(i + 1, rec.to_prediction())?);
        out.ground_truths.push(rec.gt);
        out.image_ids.push(rec.image_id);
    }
    Ok(out)
}

pub fn write_predictions(writer: impl Write, file: &PredictionFile) -> Result<()> {
    let records: Vec<SampleRecord> = file
        .predictions
        .iter()
        .enumerate()
        .map(|(i, p)| {
            SampleRecord::from_prediction(
                p,
                file.ground_truths.get(i).cloned().flatten(),
                file.image_ids.get(i).cloned().flatten(),
            )
        })
        .collect();
    write_jsonl(writer, &records)
}
