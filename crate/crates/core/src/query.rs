//! Open-vocabulary scoring, Gaussian selection masks, segmentation metrics
//! and scene edits.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::map::FeatureMap;
use crate::scene::GaussianScene;
use crate::se3::Vec3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QueryError {
    #[error("unknown label {0:?}")]
    UnknownLabel(String),
    #[error("duplicate label {0:?}")]
    DuplicateLabel(String),
    #[error("embedding row {row} is not unit length (norm {norm})")]
    NotUnit { row: usize, norm: f64 },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid edit: {0}")]
    Edit(String),
}

/// Query labels with unit-norm embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    pub labels: Vec<String>,
    pub embeddings: Vec<Vec<f64>>,
}

impl LabelSet {
    pub fn new(labels: Vec<String>, embeddings: Vec<Vec<f64>>) -> Result<Self, QueryError> {
        let set = Self { labels, embeddings };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<(), QueryError> {
        if self.labels.len() != self.embeddings.len() {
            return Err(QueryError::Shape(format!(
                "{} labels for {} embeddings",
                self.labels.len(),
                self.embeddings.len()
            )));
        }
        for (i, l) in self.labels.iter().enumerate() {
            if self.labels[..i].contains(l) {
                return Err(QueryError::DuplicateLabel(l.clone()));
            }
        }
        let dim = self.dim();
        for (row, e) in self.embeddings.iter().enumerate() {
            if e.len() != dim {
                return Err(QueryError::Shape(format!("embedding {row} has width {}, expected {dim}", e.len())));
            }
            let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(QueryError::NotUnit { row, norm });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, label: &str) -> Result<usize, QueryError> {
        self.labels.iter().position(|l| l == label).ok_or_else(|| QueryError::UnknownLabel(label.into()))
    }

    pub fn indices(&self, labels: &[String]) -> Result<Vec<usize>, QueryError> {
        labels.iter().map(|l| self.index_of(l)).collect()
    }

    /// Cosine similarity of `f` to every label; `None` for a zero vector.
    pub fn cosines(&self, f: &[f64]) -> Option<Vec<f64>> {
        let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return None;
        }
        Some(self.embeddings.iter().map(|q| q.iter().zip(f).map(|(a, b)| a * b).sum::<f64>() / norm).collect())
    }
}

/// Row-softmaxed cosine scores, `N × C` row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreMatrix {
    pub rows: usize,
    pub classes: usize,
    pub data: Vec<f64>,
    /// Rows whose feature had zero norm and were set to uniform.
    pub degenerate: Vec<usize>,
}

impl ScoreMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.classes..(i + 1) * self.classes]
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let classes = rows.first().map_or(0, Vec::len);
        Self { rows: rows.len(), classes, data: rows.concat(), degenerate: Vec::new() }
    }

    fn check(&self, labels: &[usize]) -> Result<(), QueryError> {
        match labels.iter().find(|l| **l >= self.classes) {
            Some(l) => Err(QueryError::UnknownLabel(format!("#{l}"))),
            None => Ok(()),
        }
    }
}

fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

/// Softmax over cosine similarities, one row per feature (no temperature).
pub fn score_gaussians(features: &DMatrix<f64>, labels: &LabelSet) -> Result<ScoreMatrix, QueryError> {
    if features.ncols() != labels.dim() {
        return Err(QueryError::Shape(format!("features of width {} vs labels of width {}", features.ncols(), labels.dim())));
    }
    let c = labels.len();
    let rows: Vec<Option<Vec<f64>>> = (0..features.nrows())
        .into_par_iter()
        .map(|i| {
            let f: Vec<f64> = features.row(i).iter().copied().collect();
            labels.cosines(&f).map(|s| softmax(&s))
        })
        .collect();
    let mut data = Vec::with_capacity(rows.len() * c);
    let mut degenerate = Vec::new();
    for (i, r) in rows.into_iter().enumerate() {
        match r {
            Some(p) => data.extend(p),
            None => {
                degenerate.push(i);
                data.extend(std::iter::repeat_n(1.0 / c as f64, c));
            }
        }
    }
    Ok(ScoreMatrix { rows: features.nrows(), classes: c, data, degenerate })
}

/// Rows where any target label's probability reaches `threshold`.
pub fn threshold_mask(scores: &ScoreMatrix, labels: &[usize], threshold: f64) -> Result<Vec<bool>, QueryError> {
    scores.check(labels)?;
    Ok((0..scores.rows).map(|i| labels.iter().any(|&l| scores.row(i)[l] >= threshold)).collect())
}

/// Rows whose most probable label (ties to the lower index) is a target.
pub fn argmax_mask(scores: &ScoreMatrix, labels: &[usize]) -> Result<Vec<bool>, QueryError> {
    scores.check(labels)?;
    Ok((0..scores.rows).map(|i| labels.contains(&argmax(scores.row(i)))).collect())
}

pub fn hybrid_mask(a: &[bool], b: &[bool]) -> Result<Vec<bool>, QueryError> {
    if a.len() != b.len() {
        return Err(QueryError::Shape(format!("masks of length {} and {}", a.len(), b.len())));
    }
    Ok(a.iter().zip(b).map(|(x, y)| *x || *y).collect())
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditOp {
    Extract,
    Delete,
    Recolor,
}

impl std::str::FromStr for EditOp {
    type Err = QueryError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "extract" => Ok(EditOp::Extract),
            "delete" => Ok(EditOp::Delete),
            "recolor" => Ok(EditOp::Recolor),
            _ => Err(QueryError::Edit(format!("unknown operation {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditConfig {
    pub operation: EditOp,
    pub targets: Vec<String>,
    pub threshold: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Vec3>,
}

impl EditConfig {
    pub fn validate(&self) -> Result<(), QueryError> {
        if self.targets.is_empty() {
            return Err(QueryError::Edit("no target labels".into()));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(QueryError::Edit(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        if self.operation == EditOp::Recolor && self.color.is_none() {
            return Err(QueryError::Edit("recolor needs a color".into()));
        }
        Ok(())
    }

    /// Hybrid (threshold OR argmax) selection over `scores`.
    pub fn select(&self, scores: &ScoreMatrix, labels: &LabelSet) -> Result<Vec<bool>, QueryError> {
        let idx = labels.indices(&self.targets)?;
        hybrid_mask(&threshold_mask(scores, &idx, self.threshold)?, &argmax_mask(scores, &idx)?)
    }
}

/// Applies an edit to a copy of `scene`. `mask` follows scene order (static
/// Gaussians first).
pub fn apply_edit(scene: &GaussianScene, mask: &[bool], config: &EditConfig) -> Result<GaussianScene, QueryError> {
    if mask.len() != scene.len() {
        return Err(QueryError::Shape(format!("mask of {} for {} gaussians", mask.len(), scene.len())));
    }
    config.validate()?;
    let ns = scene.static_gaussians.len();
    let (ms, md) = mask.split_at(ns);
    let mut out = scene.clone();
    match config.operation {
        EditOp::Extract | EditOp::Delete => {
            let keep_selected = config.operation == EditOp::Extract;
            let filter = |gs: &[crate::scene::Gaussian3D], m: &[bool]| {
                gs.iter().zip(m).filter(|(_, s)| **s == keep_selected).map(|(g, _)| g.clone()).collect()
            };
            out.static_gaussians = filter(&scene.static_gaussians, ms);
            out.dynamic_gaussians = filter(&scene.dynamic_gaussians, md);
        }
        EditOp::Recolor => {
            let color = config.color.expect("validated");
            for (g, s) in out.static_gaussians.iter_mut().chain(out.dynamic_gaussians.iter_mut()).zip(mask) {
                if *s {
                    g.color = color;
                }
            }
        }
    }
    Ok(out)
}

/// Per-pixel argmax of cosine scores (ties to the lower label). Zero
/// feature vectors map to label 0.
pub fn segment_feature_map(map: &FeatureMap, labels: &LabelSet) -> Result<Vec<usize>, QueryError> {
    if map.channels != labels.dim() {
        return Err(QueryError::Shape(format!("map width {} vs labels {}", map.channels, labels.dim())));
    }
    Ok((0..map.pixel_count())
        .into_par_iter()
        .map(|p| labels.cosines(map.at(p)).map_or(0, |s| argmax(&s)))
        .collect())
}

/// [`segment_feature_map`] with pixels of `alpha < 0.5` assigned the
/// background index `labels.len()`.
pub fn segment_with_background(map: &FeatureMap, alpha: &FeatureMap, labels: &LabelSet) -> Result<Vec<usize>, QueryError> {
    if alpha.width != map.width || alpha.height != map.height || alpha.channels != 1 {
        return Err(QueryError::Shape("alpha map does not match feature map".into()));
    }
    let mut seg = segment_feature_map(map, labels)?;
    for (s, a) in seg.iter_mut().zip(&alpha.data) {
        if *a < 0.5 {
            *s = labels.len();
        }
    }
    Ok(seg)
}

/// Mean IoU over classes present in `gt`, and pixel accuracy.
pub fn miou_accuracy(pred: &[usize], gt: &[usize], classes: usize) -> Result<(f64, f64), QueryError> {
    if pred.len() != gt.len() {
        return Err(QueryError::Shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
    }
    if gt.is_empty() {
        return Err(QueryError::Shape("empty label image".into()));
    }
    let mut inter = vec![0usize; classes];
    let mut union = vec![0usize; classes];
    let mut present = vec![false; classes];
    let mut correct = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        if g >= classes || p >= classes {
            return Err(QueryError::UnknownLabel(format!("#{}", g.max(p))));
        }
        present[g] = true;
        if p == g {
            correct += 1;
            inter[g] += 1;
            union[g] += 1;
        } else {
            union[g] += 1;
            union[p] += 1;
        }
    }
    let ious: Vec<f64> = (0..classes).filter(|c| present[*c]).map(|c| inter[c] as f64 / union[c] as f64).collect();
    Ok((ious.iter().sum::<f64>() / ious.len() as f64, correct as f64 / gt.len() as f64))
}

/// Intersection over union of two boolean masks; 1 when both are empty.
pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut i, mut u) = (0usize, 0usize);
    for (x, y) in a.iter().zip(b) {
        i += usize::from(*x && *y);
        u += usize::from(*x || *y);
    }
    if u == 0 {
        1.0
    } else {
        i as f64 / u as f64
    }
}
