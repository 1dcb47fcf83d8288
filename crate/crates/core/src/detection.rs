//! Detector output ingestion: IoU matching against ground truth and the
//! image-keyed half split.
//!
//! Boxes are `(cx, cy, w, h)` in pixels throughout; [`corners_to_center`]
//! converts `(x1, y1, x2, y2)` input.

use std::collections::{BTreeMap, HashSet};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{CalibrationDataset, Sample};
use crate::dist::GaussianPrediction;
use crate::error::{Error, Result};

pub type BoxCoords = [f64; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionRecord {
    pub image_id: String,
    pub category: String,
    pub box_mean: BoxCoords,
    pub box_var: BoxCoords,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub box_cov: Option<[[f64; 4]; 4]>,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthRecord {
    pub image_id: String,
    pub category: String,
    #[serde(rename = "box")]
    pub bbox: BoxCoords,
}

fn check_box(b: &BoxCoords) -> Result<()> {
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("box"));
    }
    if !(b[2] > 0.0 && b[3] > 0.0) {
        return Err(Error::InvalidParameter(format!("degenerate box {b:?}: width and height must be > 0")));
    }
    Ok(())
}

impl DetectionRecord {
    pub fn validate(&self) -> Result<()> {
        check_box(&self.box_mean)?;
        if self.box_var.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::InvalidParameter("box variances must be finite and > 0".into()));
        }
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::InvalidParameter(format!("score {} outside [0, 1]", self.score)));
        }
        Ok(())
    }

    pub fn prediction(&self) -> Result<GaussianPrediction> {
        match &self.box_cov {
            Some(c) => GaussianPrediction::full(self.box_mean.to_vec(), DMatrix::from_fn(4, 4, |i, j| c[i][j])),
            None => GaussianPrediction::diagonal(self.box_mean.to_vec(), self.box_var.to_vec()),
        }
    }

    /// Builds a record from a corner-format box and its corner-space
    /// covariance (or variances), mapping both through the linear change of
    /// coordinates to `(cx, cy, w, h)`.
    pub fn from_corners(
        image_id: String,
        category: String,
        corners: BoxCoords,
        corner_cov: &DMatrix<f64>,
        score: f64,
    ) -> Result<Self> {
        let t = corner_jacobian();
        let cov = &t * corner_cov * t.transpose();
        let mut box_cov = [[0.0; 4]; 4];
        let mut diagonal = true;
        for i in 0..4 {
            for j in 0..4 {
                box_cov[i][j] = cov[(i, j)];
                diagonal &= i == j || cov[(i, j)] == 0.0;
            }
        }
        let rec = Self {
            image_id,
            category,
            box_mean: corners_to_center(corners),
            box_var: [cov[(0, 0)], cov[(1, 1)], cov[(2, 2)], cov[(3, 3)]],
            box_cov: (!diagonal).then_some(box_cov),
            score,
        };
        rec.validate()?;
        Ok(rec)
    }

    /// Reinterprets a record whose box, variances and optional covariance
    /// were given in corner format.
    pub fn into_center_format(self) -> Result<Self> {
        let cov = match &self.box_cov {
            Some(c) => DMatrix::from_fn(4, 4, |i, j| c[i][j]),
            None => DMatrix::from_fn(4, 4, |i, j| if i == j { self.box_var[i] } else { 0.0 }),
        };
        Self::from_corners(self.image_id, self.category, self.box_mean, &cov, self.score)
    }
}

fn corner_jacobian() -> DMatrix<f64> {
    DMatrix::from_row_slice(
        4,
        4,
        &[
            0.5, 0.0, 0.5, 0.0, //
            0.0, 0.5, 0.0, 0.5, //
            -1.0, 0.0, 1.0, 0.0, //
            0.0, -1.0, 0.0, 1.0,
        ],
    )
}

/// `(x1, y1, x2, y2)` → `(cx, cy, w, h)`.
pub fn corners_to_center(b: BoxCoords) -> BoxCoords {
    [(b[0] + b[2]) / 2.0, (b[1] + b[3]) / 2.0, b[2] - b[0], b[3] - b[1]]
}

/// `(cx, cy, w, h)` → `(x1, y1, x2, y2)`.
pub fn center_to_corners(b: BoxCoords) -> BoxCoords {
    [b[0] - b[2] / 2.0, b[1] - b[3] / 2.0, b[0] + b[2] / 2.0, b[1] + b[3] / 2.0]
}

/// Intersection over union of two center-format boxes.
pub fn iou(a: &BoxCoords, b: &BoxCoords) -> Result<f64> {
    check_box(a)?;
    check_box(b)?;
    if a == b {
        return Ok(1.0);
    }
    let (ca, cb) = (center_to_corners(*a), center_to_corners(*b));
    let iw = (ca[2].min(cb[2]) - ca[0].max(cb[0])).max(0.0);
    let ih = (ca[3].min(cb[3]) - ca[1].max(cb[1])).max(0.0);
    let inter = iw * ih;
    let union = a[2] * a[3] + b[2] * b[3] - inter;
    Ok((inter / union).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SplitMode {
    #[default]
    None,
    Half,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchConfig {
    pub iou_threshold: f64,
    /// Only match detections to ground truths of the same category.
    pub category_strict: bool,
    pub split: SplitMode,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            category_strict: true,
            split: SplitMode::None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct MatchReport {
    pub matched: usize,
    pub unmatched_detections: usize,
    pub unmatched_ground_truths: usize,
}

fn box_cmp(a: &BoxCoords, b: &BoxCoords) -> std::cmp::Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(std::cmp::Ordering::Equal)
}

type Group<'a> = (Vec<&'a DetectionRecord>, Vec<&'a GroundTruthRecord>);

/// Greedy IoU matching. Within each image (and category when strict),
/// detections are visited by descending score and take the unused ground
/// truth of highest IoU if it reaches the threshold. Pairs come out in sorted
/// image order with `K = 4` targets `(cx, cy, w, h)`.
pub fn match_detections(
    detections: &[DetectionRecord],
    ground_truths: &[GroundTruthRecord],
    config: &MatchConfig,
) -> Result<(CalibrationDataset, MatchReport)> {
    if !(config.iou_threshold > 0.0 && config.iou_threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "IoU threshold must lie in (0, 1], got {}",
            config.iou_threshold
        )));
    }
    for d in detections {
        d.validate()?;
    }
    let mut seen = HashSet::new();
    for g in ground_truths {
        check_box(&g.bbox)?;
        let key = (g.image_id.as_str(), g.bbox.map(f64::to_bits));
        if !seen.insert(key) {
            return Err(Error::InvalidParameter(format!(
                "duplicate ground truth box {:?} in image `{}`",
                g.bbox, g.image_id
            )));
        }
    }

    let group_key = |image: &str, cat: &str| (image.to_string(), if config.category_strict { cat.to_string() } else { String::new() });
    let mut groups: BTreeMap<(String, String), Group> = BTreeMap::new();
    for d in detections {
        groups.entry(group_key(&d.image_id, &d.category)).or_default().0.push(d);
    }
    for g in ground_truths {
        groups.entry(group_key(&g.image_id, &g.category)).or_default().1.push(g);
    }

    let mut report = MatchReport::default();
    let mut ds = CalibrationDataset::new(4);
    for (_, (mut dets, gts)) in groups {
        dets.sort_by(|a, b| {
            b.score
                .total_cmp(&a.score)
                .then_with(|| a.image_id.cmp(&b.image_id))
                .then_with(|| box_cmp(&a.box_mean, &b.box_mean))
        });
        let mut used = vec![false; gts.len()];
        for d in dets {
            let mut best: Option<(usize, f64)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&d.box_mean, &g.bbox)?;
                if v >= config.iou_threshold && best.is_none_or(|(_, b)| v > b) {
                    best = Some((j, v));
                }
            }
            match best {
                Some((j, _)) => {
                    used[j] = true;
                    report.matched += 1;
                    ds.push(Sample {
                        prediction: d.prediction()?,
                        ground_truth: gts[j].bbox.to_vec(),
                        image_id: Some(d.image_id.clone()),
                    })?;
                }
                None => report.unmatched_detections += 1,
            }
        }
        report.unmatched_ground_truths += used.iter().filter(|u| !**u).count();
    }
    Ok((ds, report))
}

fn image_hash(seed: u64, id: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(id.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest has ≥ 8 bytes"))
}

/// Splits by image: images are ordered by a seeded hash of their id and the
/// first half (rounded up) goes to training. Samples without an image id
/// count as their own image keyed by position.
pub fn half_split(dataset: &CalibrationDataset, seed: u64) -> Result<(CalibrationDataset, CalibrationDataset)> {
    if dataset.len() < 2 {
        return Err(Error::TooFewSamples {
            needed: 2,
            got: dataset.len(),
        });
    }
    let keys: Vec<String> = dataset
        .samples()
        .iter()
        .enumerate()
        .map(|(i, s)| s.image_id.clone().unwrap_or_else(|| format!("#{i}")))
        .collect();
    let mut images: Vec<(u64, &str)> = keys.iter().map(|k| (image_hash(seed, k), k.as_str())).collect();
    images.sort_unstable();
    images.dedup();
    if images.len() < 2 {
        return Err(Error::InvalidParameter("cannot split a dataset drawn from a single image".into()));
    }
    let cut = images.len().div_ceil(2);
    let rank: BTreeMap<&str, usize> = images.iter().enumerate().map(|(r, (_, k))| (*k, r)).collect();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.sort_by_key(|&i| rank[keys[i].as_str()]);
    let (train, eval): (Vec<usize>, Vec<usize>) = order.into_iter().partition(|&i| rank[keys[i].as_str()] < cut);
    Ok((dataset.select(&train), dataset.select(&eval)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn det(image: &str, b: BoxCoords, score: f64) -> DetectionRecord {
        DetectionRecord {
            image_id: image.into(),
            category: "car".into(),
            box_mean: b,
            box_var: [1.0; 4],
            box_cov: None,
            score,
        }
    }

    fn gt(image: &str, b: BoxCoords) -> GroundTruthRecord {
        GroundTruthRecord {
            image_id: image.into(),
            category: "car".into(),
            bbox: b,
        }
    }

    #[test]
    fn iou_examples() {
        let a = corners_to_center([0.0, 0.0, 2.0, 2.0]);
        let b = corners_to_center([1.0, 1.0, 3.0, 3.0]);
        assert_relative_eq!(iou(&a, &b).unwrap(), 1.0 / 7.0, epsilon = 1e-15);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let far = corners_to_center([10.0, 10.0, 11.0, 11.0]);
        assert_eq!(iou(&a, &far).unwrap(), 0.0);
        assert!(iou(&[0.0, 0.0, 0.0, 1.0], &a).is_err());
    }

    #[test]
    fn greedy_matching() {
        let g = [5.0, 5.0, 4.0, 4.0];
        let (ds, rep) = match_detections(&[det("a", g, 0.9)], &[gt("a", g)], &MatchConfig::default()).unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(rep.matched, 1);

        let near = [5.2, 5.0, 4.0, 4.0];
        let (ds, rep) = match_detections(
            &[det("a", near, 0.3), det("a", g, 0.8)],
            &[gt("a", g)],
            &MatchConfig::default(),
        )
        .unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.samples()[0].prediction.mean(), &g);
        assert_eq!(rep.unmatched_detections, 1);

        // nested boxes with area ratio 0.4
        let a = corners_to_center([0.0, 0.0, 10.0, 10.0]);
        let b = corners_to_center([0.0, 0.0, 10.0, 4.0]);
        assert_relative_eq!(iou(&a, &b).unwrap(), 0.4, epsilon = 1e-12);
        let (ds, rep) = match_detections(&[det("a", b, 0.9)], &[gt("a", a)], &MatchConfig::default()).unwrap();
        assert!(ds.is_empty());
        assert_eq!(rep.unmatched_ground_truths, 1);

        assert!(match_detections(&[], &[gt("a", g), gt("a", g)], &MatchConfig::default()).is_err());
    }

    #[test]
    fn categories_respected_when_strict() {
        let g = [5.0, 5.0, 4.0, 4.0];
        let mut other = gt("a", g);
        other.category = "person".into();
        let (ds, _) = match_detections(&[det("a", g, 0.9)], std::slice::from_ref(&other), &MatchConfig::default()).unwrap();
        assert!(ds.is_empty());
        let loose = MatchConfig {
            category_strict: false,
            ..MatchConfig::default()
        };
        let (ds, _) = match_detections(&[det("a", g, 0.9)], &[other], &loose).unwrap();
        assert_eq!(ds.len(), 1);
    }

    #[test]
    fn corner_conversion_maps_covariance() {
        let cov = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 2.0, 3.0, 4.0]));
        let rec = DetectionRecord::from_corners("i".into(), "c".into(), [0.0, 0.0, 4.0, 2.0], &cov, 0.5).unwrap();
        assert_eq!(rec.box_mean, [2.0, 1.0, 4.0, 2.0]);
        assert_relative_eq!(rec.box_var[0], 1.0);
        assert_relative_eq!(rec.box_var[2], 4.0);
        let c = rec.box_cov.unwrap();
        // Cov(cx, w) = (v_x2 − v_x1)/2
        assert_relative_eq!(c[0][2], 1.0);
        assert_eq!(center_to_corners(rec.box_mean), [0.0, 0.0, 4.0, 2.0]);
    }

    fn multi_image() -> CalibrationDataset {
        let mut ds = CalibrationDataset::new(1);
        for i in 0..40 {
            ds.push(Sample {
                prediction: GaussianPrediction::diagonal(vec![i as f64], vec![1.0]).unwrap(),
                ground_truth: vec![0.0],
                image_id: Some(format!("img{}", i % 10)),
            })
            .unwrap();
        }
        ds
    }

    #[test]
    fn half_split_keeps_images_whole() {
        let ds = multi_image();
        let (train, eval) = half_split(&ds, 3).unwrap();
        assert_eq!(train.len() + eval.len(), 40);
        let ids = |d: &CalibrationDataset| d.samples().iter().map(|s| s.image_id.clone().unwrap()).collect::<HashSet<_>>();
        assert!(ids(&train).is_disjoint(&ids(&eval)));
        assert_eq!(ids(&train).len(), 5);
        assert_eq!(half_split(&ds, 3).unwrap(), (train.clone(), eval.clone()));

        let mut rev: Vec<usize> = (0..40).collect();
        rev.reverse();
        let (t2, e2) = half_split(&ds.select(&rev), 3).unwrap();
        assert_eq!(ids(&t2), ids(&train));
        assert_eq!(ids(&e2), ids(&eval));

        let mut single = CalibrationDataset::new(1);
        for _ in 0..3 {
            single
                .push(Sample {
                    prediction: GaussianPrediction::diagonal(vec![0.0], vec![1.0]).unwrap(),
                    ground_truth: vec![0.0],
                    image_id: Some("only".into()),
                })
                .unwrap();
        }
        assert!(half_split(&single, 0).is_err());
    }
}
