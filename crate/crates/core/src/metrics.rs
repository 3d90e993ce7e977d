//! Segmentation and classification metrics.
//!
//! Masks are `[D, H, W]` boolean volumes. Boundary pixels are mask pixels
//! with at least one in-plane 4-neighbour outside the mask or outside the
//! image; Hausdorff distances are Euclidean between voxel centres in pixel
//! units. Undefined values are `None` and counted as exclusions when
//! averaging.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if data.len() != dims.iter().product::<usize>() {
            return Err(shape_err("mask", format!("{} values for {:?}", data.len(), dims)));
        }
        Ok(Self { dims, data })
    }

    pub fn empty(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![false; dims.iter().product()],
        }
    }

    pub fn from_labels(labels: &[u8], dims: [usize; 3], class: usize) -> Result<Self> {
        Self::new(dims, labels.iter().map(|&l| l as usize == class).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    /// Boundary voxel coordinates `(z, y, x)`.
    pub fn boundary(&self) -> Vec<[i64; 3]> {
        let [d, h, w] = self.dims;
        let mut out = Vec::new();
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.data[(z * h + y) * w + x] {
                        continue;
                    }
                    let inside = |yy: usize, xx: usize| self.data[(z * h + yy) * w + xx];
                    let edge = y == 0
                        || x == 0
                        || y + 1 == h
                        || x + 1 == w
                        || !inside(y - 1, x)
                        || !inside(y + 1, x)
                        || !inside(y, x - 1)
                        || !inside(y, x + 1);
                    if edge {
                        out.push([z as i64, y as i64, x as i64]);
                    }
                }
            }
        }
        out
    }
}

fn same_dims(op: &'static str, a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`; 1 when both are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    same_dims("dice", pred, gt)?;
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        a += p as usize;
        b += g as usize;
        inter += (p && g) as usize;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

fn sq_dist(p: &[i64; 3], q: &[i64; 3]) -> i64 {
    (p[0] - q[0]).pow(2) + (p[1] - q[1]).pow(2) + (p[2] - q[2]).pow(2)
}

// max over `from` of the distance to the nearest point of `to`, squared
fn directed_sq(from: &[[i64; 3]], to: &[[i64; 3]], mut best: i64) -> i64 {
    for p in from {
        let mut nearest = i64::MAX;
        for q in to {
            let d = sq_dist(p, q);
            if d < nearest {
                nearest = d;
                // cannot raise the running maximum any more
                if nearest <= best {
                    break;
                }
            }
        }
        best = best.max(nearest);
    }
    best
}

/// Symmetric Hausdorff distance between mask boundaries; `None` if either
/// mask is empty.
pub fn hausdorff(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    same_dims("hausdorff", pred, gt)?;
    let (a, b) = (pred.boundary(), gt.boundary());
    if a.is_empty() || b.is_empty() {
        return Ok(None);
    }
    let best = directed_sq(&a, &b, 0);
    let best = directed_sq(&b, &a, best);
    Ok(Some(num_traits::Float::sqrt(best as f64)))
}

/// `TP / (TP + FN)`; `None` when the reference has no positives.
pub fn sensitivity(pred: &Mask, gt: &Mask) -> Result<Option<f64>> {
    same_dims("sensitivity", pred, gt)?;
    let (tp, pos) = true_positives(pred, gt);
    Ok((pos > 0).then(|| tp as f64 / pos as f64))
}

fn true_positives(pred: &Mask, gt: &Mask) -> (usize, usize) {
    let mut tp = 0;
    let mut pos = 0;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        pos += g as usize;
        tp += (p && g) as usize;
    }
    (tp, pos)
}

/// Sensitivity of one class between two label volumes.
pub fn class_sensitivity(pred: &[u8], gt: &[u8], dims: [usize; 3], class: usize) -> Result<Option<f64>> {
    sensitivity(
        &Mask::from_labels(pred, dims, class)?,
        &Mask::from_labels(gt, dims, class)?,
    )
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegionSpec {
    pub name: String,
    pub classes: Vec<usize>,
}

impl RegionSpec {
    pub fn new(name: impl Into<String>, classes: &[usize]) -> Self {
        Self {
            name: name.into(),
            classes: classes.to_vec(),
        }
    }
}

/// Union mask per region.
pub fn composite_regions(
    labels: &[u8],
    dims: [usize; 3],
    specs: &[RegionSpec],
    num_classes: usize,
) -> Result<Vec<Mask>> {
    let mut out = Vec::with_capacity(specs.len());
    for spec in specs {
        let mut member = vec![false; 256];
        for &c in &spec.classes {
            if c >= num_classes {
                return Err(Error::InvalidArgument {
                    op: "composite_regions",
                    detail: format!("region {} references class {} of {}", spec.name, c, num_classes),
                });
            }
            member[c] = true;
        }
        out.push(Mask::new(dims, labels.iter().map(|&l| member[l as usize]).collect())?);
    }
    Ok(out)
}

/// Singleton regions for every foreground class plus the named composites.
pub fn class_regions(class_names: &[String], composites: &[RegionSpec]) -> Vec<RegionSpec> {
    let mut specs: Vec<RegionSpec> = class_names
        .iter()
        .enumerate()
        .skip(1)
        .map(|(c, n)| RegionSpec::new(n.clone(), &[c]))
        .collect();
    specs.extend(composites.iter().cloned());
    specs
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(shape_err(
            "accuracy",
            format!("{} predictions vs {} labels", pred.len(), truth.len()),
        ));
    }
    if pred.is_empty() {
        return Err(Error::Empty("accuracy"));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// One patient's prediction and reference.
#[derive(Clone, Debug, PartialEq)]
pub struct PatientPrediction {
    pub id: String,
    pub dims: [usize; 3],
    pub pred_labels: Vec<u8>,
    pub gt_labels: Vec<u8>,
    pub disease_pred: usize,
    pub disease_true: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScore {
    pub region: String,
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub sensitivity: Option<f64>,
    pub true_positives: usize,
    pub positives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatientMetrics {
    pub id: String,
    pub disease_true: usize,
    pub disease_pred: usize,
    pub regions: Vec<RegionScore>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSummary {
    pub region: String,
    pub dice: f64,
    pub hausdorff: Option<f64>,
    pub hausdorff_excluded: usize,
    pub sensitivity: Option<f64>,
    pub sensitivity_excluded: usize,
    /// TP / positives pooled over every patient's pixels.
    pub sensitivity_pooled: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub regions: Vec<RegionSummary>,
    pub accuracy: f64,
    /// Mean over patients of the mean Dice of the foreground classes.
    pub mean_foreground_dice: f64,
    pub patients: Vec<PatientMetrics>,
}

impl MetricsReport {
    pub fn region(&self, name: &str) -> Option<&RegionSummary> {
        self.regions.iter().find(|r| r.region == name)
    }
}

fn mean_defined(xs: impl Iterator<Item = Option<f64>>) -> (Option<f64>, usize) {
    let (mut sum, mut n, mut excluded) = (0.0, 0usize, 0usize);
    for x in xs {
        match x {
            Some(v) => {
                sum += v;
                n += 1;
            }
            None => excluded += 1,
        }
    }
    ((n > 0).then(|| sum / n as f64), excluded)
}

pub fn patient_metrics(p: &PatientPrediction, specs: &[RegionSpec], num_classes: usize) -> Result<PatientMetrics> {
    let pred = composite_regions(&p.pred_labels, p.dims, specs, num_classes)?;
    let gt = composite_regions(&p.gt_labels, p.dims, specs, num_classes)?;
    let mut regions = Vec::with_capacity(specs.len());
    for ((spec, a), b) in specs.iter().zip(&pred).zip(&gt) {
        let (tp, pos) = true_positives(a, b);
        regions.push(RegionScore {
            region: spec.name.clone(),
            dice: dice(a, b)?,
            hausdorff: hausdorff(a, b)?,
            sensitivity: sensitivity(a, b)?,
            true_positives: tp,
            positives: pos,
        });
    }
    Ok(PatientMetrics {
        id: p.id.clone(),
        disease_true: p.disease_true,
        disease_pred: p.disease_pred,
        regions,
    })
}

/// Per-patient metrics, then region averages across patients.
pub fn build_report(preds: &[PatientPrediction], specs: &[RegionSpec], num_classes: usize) -> Result<MetricsReport> {
    if preds.is_empty() {
        return Err(Error::Empty("metrics report"));
    }
    let patients: Vec<PatientMetrics> = preds
        .iter()
        .map(|p| patient_metrics(p, specs, num_classes))
        .collect::<Result<_>>()?;
    let n = patients.len() as f64;
    let mut regions = Vec::with_capacity(specs.len());
    for (r, spec) in specs.iter().enumerate() {
        let scores = || patients.iter().map(move |p| &p.regions[r]);
        let (hausdorff, hausdorff_excluded) = mean_defined(scores().map(|s| s.hausdorff));
        let (sens, sensitivity_excluded) = mean_defined(scores().map(|s| s.sensitivity));
        let tp: usize = scores().map(|s| s.true_positives).sum();
        let pos: usize = scores().map(|s| s.positives).sum();
        regions.push(RegionSummary {
            region: spec.name.clone(),
            dice: scores().map(|s| s.dice).sum::<f64>() / n,
            hausdorff,
            hausdorff_excluded,
            sensitivity: sens,
            sensitivity_excluded,
            sensitivity_pooled: (pos > 0).then(|| tp as f64 / pos as f64),
        });
    }
    let mut fg = 0.0;
    for p in preds {
        let mut s = 0.0;
        for c in 1..num_classes {
            s += dice(
                &Mask::from_labels(&p.pred_labels, p.dims, c)?,
                &Mask::from_labels(&p.gt_labels, p.dims, c)?,
            )?;
        }
        fg += s / (num_classes - 1).max(1) as f64;
    }
    let acc = accuracy(
        &preds.iter().map(|p| p.disease_pred).collect::<Vec<_>>(),
        &preds.iter().map(|p| p.disease_true).collect::<Vec<_>>(),
    )?;
    Ok(MetricsReport {
        regions,
        accuracy: acc,
        mean_foreground_dice: fg / n,
        patients,
    })
}
