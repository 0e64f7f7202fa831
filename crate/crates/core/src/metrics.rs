//! Segmentation and embedding-quality metrics.

use std::collections::BTreeMap;

use crate::error::{PrclError, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self> {
        let c = rows.len();
        if rows.iter().any(|r| r.len() != c) {
            return Err(PrclError::contract("confusion matrix must be square"));
        }
        Ok(ConfusionMatrix {
            classes: c,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn add(&mut self, truth: usize, pred: usize) {
        self.counts[truth * self.classes + pred] += 1;
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU; `None` for classes absent from both truth and
    /// predictions.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|k| {
                let tp = self.get(k, k);
                let row: u64 = (0..self.classes).map(|j| self.get(k, j)).sum();
                let col: u64 = (0..self.classes).map(|i| self.get(i, k)).sum();
                let union = row + col - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect()
    }
}

/// Mean IoU over classes that occur in the truth or the predictions.
pub fn miou(cm: &ConfusionMatrix) -> Result<f64> {
    if cm.total() == 0 {
        return Err(PrclError::contract("mIoU of an empty confusion matrix"));
    }
    let ious: Vec<f64> = cm.class_iou().into_iter().flatten().collect();
    Ok(ious.iter().sum::<f64>() / ious.len() as f64)
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn group(points: &[(Vec<f64>, usize)]) -> Result<BTreeMap<usize, Vec<usize>>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, (_, c)) in points.iter().enumerate() {
        by_class.entry(*c).or_default().push(i);
    }
    if by_class.len() < 2 {
        return Err(PrclError::contract("clustering metrics need at least two classes"));
    }
    if let Some((p, _)) = points.iter().find(|(p, _)| p.len() != points[0].0.len()) {
        return Err(PrclError::DimensionMismatch { expected: points[0].0.len(), got: p.len() });
    }
    Ok(by_class)
}

/// Mean silhouette coefficient with Euclidean distances. Points in singleton
/// classes score 0, as do points with `a = b = 0`.
pub fn silhouette(points: &[(Vec<f64>, usize)]) -> Result<f64> {
    let by_class = group(points)?;
    let mut total = 0.0;
    for (i, (p, c)) in points.iter().enumerate() {
        let own = &by_class[c];
        if own.len() < 2 {
            continue;
        }
        let a = own.iter().filter(|&&j| j != i).map(|&j| dist(p, &points[j].0)).sum::<f64>() / (own.len() - 1) as f64;
        let b = by_class
            .iter()
            .filter(|(k, _)| *k != c)
            .map(|(_, idx)| idx.iter().map(|&j| dist(p, &points[j].0)).sum::<f64>() / idx.len() as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    Ok(total / points.len() as f64)
}

/// Davies–Bouldin index; scatter is the mean distance to the centroid.
pub fn davies_bouldin(points: &[(Vec<f64>, usize)]) -> Result<f64> {
    let by_class = group(points)?;
    let d = points[0].0.len();
    let mut centroids = Vec::new();
    let mut scatter = Vec::new();
    for idx in by_class.values() {
        let mut c = vec![0.0; d];
        for &j in idx {
            for (ck, pk) in c.iter_mut().zip(&points[j].0) {
                *ck += pk;
            }
        }
        c.iter_mut().for_each(|v| *v /= idx.len() as f64);
        scatter.push(idx.iter().map(|&j| dist(&points[j].0, &c)).sum::<f64>() / idx.len() as f64);
        centroids.push(c);
    }
    let k = centroids.len();
    let mut total = 0.0;
    for i in 0..k {
        let mut worst = 0.0f64;
        for j in 0..k {
            if i == j {
                continue;
            }
            let m = dist(&centroids[i], &centroids[j]);
            if m == 0.0 {
                return Err(PrclError::contract("Davies-Bouldin undefined for coincident centroids"));
            }
            worst = worst.max((scatter[i] + scatter[j]) / m);
        }
        total += worst;
    }
    Ok(total / k as f64)
}
