//! Scene persistence, image export and feature visualization.

use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{FeatureField, TaskHead};
use crate::map::FeatureMap;
use crate::query::{LabelSet, QueryError};
use crate::scaffold::ScaffoldGraph;
use crate::scene::{CameraModel, GaussianScene};
use crate::worldgen::{Generated, GroundTruth, OrbitSpec, SyntheticSceneSpec};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File { path: PathBuf, source: std::io::Error },
    #[error("malformed scene file: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported schema version {found} (expected {SCHEMA_VERSION})")]
    Schema { found: u32 },
    #[error("inconsistent scene file: {0}")]
    Invalid(String),
    #[error(transparent)]
    Labels(#[from] QueryError),
    #[error("image export failed: {0}")]
    Image(#[from] image::ImageError),
    #[error("cannot export image: {0}")]
    Shape(String),
}

fn file_err(path: &Path) -> impl FnOnce(std::io::Error) -> IoError + '_ {
    move |source| IoError::File { path: path.to_path_buf(), source }
}

/// Query labels in the embedding space of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLabels {
    pub task: String,
    pub labels: LabelSet,
}

/// Everything a command needs: the feature field, its label sets, the
/// camera track and, for synthetic scenes, the ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneFile {
    pub schema_version: u32,
    pub scene: GaussianScene,
    pub scaffold: ScaffoldGraph,
    pub decoders: Vec<TaskHead>,
    pub labels: Vec<TaskLabels>,
    pub cameras: Vec<CameraModel>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub orbit: Option<OrbitSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl SceneFile {
    /// Packages a freshly generated scene with decoders seeded from `seed`.
    pub fn from_generated(generated: Generated, spec: &SyntheticSceneSpec, seed: u64) -> Result<Self, IoError> {
        let Generated { scene, graph, ground_truth, cameras } = generated;
        let field = FeatureField::new(scene, graph, &spec.tasks, seed);
        let labels = ground_truth
            .embeddings
            .iter()
            .map(|e| Ok(TaskLabels { task: e.task.clone(), labels: LabelSet::new(ground_truth.labels.clone(), e.rows.clone())? }))
            .collect::<Result<Vec<_>, IoError>>()?;
        let file = Self {
            schema_version: SCHEMA_VERSION,
            scene: field.scene,
            scaffold: field.graph,
            decoders: field.heads,
            labels,
            cameras,
            orbit: Some(spec.orbit.clone()),
            ground_truth: Some(ground_truth),
        };
        file.validate()?;
        Ok(file)
    }

    pub fn field(&self) -> FeatureField {
        FeatureField { scene: self.scene.clone(), graph: self.scaffold.clone(), heads: self.decoders.clone() }
    }

    pub fn set_field(&mut self, field: FeatureField) {
        self.scene = field.scene;
        self.scaffold = field.graph;
        self.decoders = field.heads;
    }

    pub fn frames(&self) -> usize {
        self.cameras.len()
    }

    pub fn label_set(&self, task: &str) -> Result<&LabelSet, IoError> {
        self.labels
            .iter()
            .find(|l| l.task == task)
            .map(|l| &l.labels)
            .ok_or_else(|| IoError::Invalid(format!("no label set for task {task:?}")))
    }

    pub fn validate(&self) -> Result<(), IoError> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(IoError::Schema { found: self.schema_version });
        }
        let bad = |m: String| Err(IoError::Invalid(m));
        let d = self.scene.latent_dim;
        if self.scaffold.latent_dim != d {
            return bad(format!("scaffold latent width {} differs from scene width {d}", self.scaffold.latent_dim));
        }
        let frames = self.scaffold.timesteps();
        if !self.scaffold.nodes.is_empty() && frames != self.cameras.len() {
            return bad(format!("{} cameras for a {frames}-frame scaffold", self.cameras.len()));
        }
        for h in &self.decoders {
            let w = h.decoder.widths();
            if w.first() != Some(&d) || w.last() != Some(&h.task.dim) {
                return bad(format!("decoder {:?} maps {w:?}, expected {d} -> {}", h.task.name, h.task.dim));
            }
        }
        for l in &self.labels {
            l.labels.validate()?;
            let Some(h) = self.decoders.iter().find(|h| h.task.name == l.task) else {
                return bad(format!("label set for unknown task {:?}", l.task));
            };
            if l.labels.dim() != h.task.dim {
                return bad(format!("label set {:?} has width {}, task has {}", l.task, l.labels.dim(), h.task.dim));
            }
        }
        Ok(())
    }

    /// JSON text. Floats use the shortest representation that parses back
    /// to the identical bits.
    pub fn to_json(&self) -> Result<String, IoError> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self, IoError> {
        let file: Self = serde_json::from_str(text)?;
        file.validate()?;
        Ok(file)
    }

    pub fn save(&self, path: &Path) -> Result<(), IoError> {
        fs::write(path, self.to_json()?).map_err(file_err(path))
    }

    pub fn load(path: &Path) -> Result<Self, IoError> {
        Self::from_json(&fs::read_to_string(path).map_err(file_err(path))?)
    }
}

/// 8-bit RGB bytes of a 1- or 3-channel map with values clamped to [0, 1].
pub fn to_rgb8(map: &FeatureMap) -> Result<Vec<u8>, IoError> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    match map.channels {
        3 => Ok(map.data.iter().map(|v| q(*v)).collect()),
        1 => Ok(map.data.iter().flat_map(|v| [q(*v); 3]).collect()),
        c => Err(IoError::Shape(format!("{c}-channel map is not an image"))),
    }
}

/// Binary PPM (P6, maxval 255).
pub fn encode_ppm(map: &FeatureMap) -> Result<Vec<u8>, IoError> {
    let mut out = format!("P6\n{} {}\n255\n", map.width, map.height).into_bytes();
    out.extend(to_rgb8(map)?);
    Ok(out)
}

pub fn write_ppm(path: &Path, map: &FeatureMap) -> Result<(), IoError> {
    fs::write(path, encode_ppm(map)?).map_err(file_err(path))
}

pub fn write_png(path: &Path, map: &FeatureMap) -> Result<(), IoError> {
    let (w, h) = (map.width as u32, map.height as u32);
    image::save_buffer(path, &to_rgb8(map)?, w, h, image::ExtendedColorType::Rgb8)?;
    Ok(())
}

/// PNG for a `.png` extension, PPM otherwise.
pub fn write_image(path: &Path, map: &FeatureMap) -> Result<(), IoError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => write_png(path, map),
        _ => write_ppm(path, map),
    }
}

/// Distinct color per class; `classes` (the background index) is black.
pub fn label_color(label: usize, classes: usize) -> [f64; 3] {
    if label >= classes {
        return [0.0; 3];
    }
    let hue = (label as f64 * 0.618_033_988_749_895).fract() * 6.0;
    let x = 1.0 - (hue % 2.0 - 1.0).abs();
    let (r, g, b) = match hue as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [0.15 + 0.8 * r, 0.15 + 0.8 * g, 0.15 + 0.8 * b]
}

pub fn colorize_labels(labels: &[usize], width: usize, height: usize, classes: usize) -> Result<FeatureMap, IoError> {
    let data = labels.iter().flat_map(|l| label_color(*l, classes)).collect();
    FeatureMap::from_data(width, height, 3, data).map_err(|e| IoError::Shape(e.to_string()))
}

const POWER_ITERATIONS: usize = 1000;

/// Leading eigenvector of a symmetric PSD matrix by power iteration.
fn leading_eigenvector(cov: &DMatrix<f64>, rng: &mut ChaCha8Rng) -> (DVector<f64>, f64) {
    let n = cov.nrows();
    let mut v = DVector::from_fn(n, |_, _| StandardNormal.sample(rng));
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..POWER_ITERATIONS {
        let w = cov * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return (v, 0.0);
        }
        let next = w / norm;
        let delta = (&next - &v).norm();
        v = next;
        lambda = norm;
        if delta < 1e-12 {
            break;
        }
    }
    (v, lambda)
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    sorted[((sorted.len() - 1) as f64 * q).round() as usize]
}

/// Three-component PCA false-color image of a feature map, fitted on every
/// third pixel and clipped to the 1st..99th percentile per channel.
pub fn pca_visualize(map: &FeatureMap, seed: u64) -> Result<FeatureMap, IoError> {
    let c = map.channels;
    let n = map.pixel_count();
    if c < 3 {
        return Err(IoError::Shape(format!("PCA needs at least 3 channels, got {c}")));
    }
    if n == 0 {
        return Ok(FeatureMap::zeros(map.width, map.height, 3));
    }
    let samples: Vec<&[f64]> = (0..n).step_by(3).map(|i| map.at(i)).collect();
    let mut mean = DVector::zeros(c);
    for s in &samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= samples.len() as f64;
    let mut cov = DMatrix::zeros(c, c);
    for s in &samples {
        let d = DVector::from_column_slice(s) - &mean;
        cov.ger(1.0, &d, &d, 1.0);
    }
    cov /= samples.len() as f64;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut components = Vec::with_capacity(3);
    for _ in 0..3 {
        let (mut v, lambda) = leading_eigenvector(&cov, &mut rng);
        // Deflate so the next iteration finds the following component.
        cov.ger(-lambda, &v, &v, 1.0);
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        components.push(v);
    }

    let mut channels: Vec<Vec<f64>> = components
        .iter()
        .map(|v| (0..n).map(|i| map.at(i).iter().zip(mean.iter()).zip(v.iter()).map(|((x, m), w)| (x - m) * w).sum()).collect())
        .collect();
    let ranges: Vec<(f64, f64)> = channels
        .iter()
        .map(|ch| {
            let mut s = ch.clone();
            s.sort_by(f64::total_cmp);
            (percentile(&s, 0.01), percentile(&s, 0.99))
        })
        .collect();
    // Ranges at round-off level relative to the strongest channel are noise.
    let scale = ranges.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max);
    for (ch, (lo, hi)) in channels.iter_mut().zip(&ranges) {
        if !(hi - lo > 1e-9 * scale) || scale == 0.0 {
            ch.iter_mut().for_each(|v| *v = 0.0);
        } else {
            ch.iter_mut().for_each(|v| *v = (v.clamp(*lo, *hi) - lo) / (hi - lo));
        }
    }
    let data = (0..n).flat_map(|i| [channels[0][i], channels[1][i], channels[2][i]]).collect();
    FeatureMap::from_data(map.width, map.height, 3, data).map_err(|e| IoError::Shape(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldgen::generate;

    fn small_spec() -> SyntheticSceneSpec {
        let mut spec = SyntheticSceneSpec::desk(3);
        for o in &mut spec.objects {
            o.gaussians = 40;
            o.nodes = 4;
        }
        spec.frames = 3;
        spec.orbit.width = 16;
        spec.orbit.height = 16;
        for t in &mut spec.tasks {
            t.width = t.width.min(16);
            t.height = t.height.min(16);
        }
        spec
    }

    #[test]
    fn scene_file_round_trips_bitwise() {
        let spec = small_spec();
        let file = SceneFile::from_generated(generate(&spec).unwrap(), &spec, 5).unwrap();
        let text = file.to_json().unwrap();
        let back = SceneFile::from_json(&text).unwrap();
        assert_eq!(back, file);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn scene_file_rejects_bad_version() {
        let spec = small_spec();
        let mut file = SceneFile::from_generated(generate(&spec).unwrap(), &spec, 5).unwrap();
        file.schema_version = 99;
        let text = serde_json::to_string(&file).unwrap();
        assert!(matches!(SceneFile::from_json(&text), Err(IoError::Schema { found: 99 })));
        assert!(matches!(SceneFile::from_json("{"), Err(IoError::Json(_))));
    }

    #[test]
    fn ppm_layout() {
        let map = FeatureMap::from_data(2, 1, 3, vec![1.0, 0.0, 0.5, 2.0, -1.0, 0.25]).unwrap();
        let bytes = encode_ppm(&map).unwrap();
        let header = b"P6\n2 1\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..], &[255, 0, 128, 255, 0, 64]);
        assert!(encode_ppm(&FeatureMap::zeros(1, 1, 2)).is_err());
    }

    #[test]
    fn pca_constant_map_is_black() {
        let map = FeatureMap::filled(5, 4, &[0.1, 0.7, -0.3, 0.2]);
        let img = pca_visualize(&map, 0).unwrap();
        assert!(img.data.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn pca_two_clusters_two_colors() {
        let (a, b) = ([1.0, 0.0, 0.5, 0.2], [-0.5, 0.3, 0.5, 0.9]);
        let data: Vec<f64> = (0..64).flat_map(|i| if (i / 8 + i % 8) % 2 == 0 { a } else { b }).collect();
        let map = FeatureMap::from_data(8, 8, 4, data).unwrap();
        let img = pca_visualize(&map, 1).unwrap();
        let mut colors: Vec<Vec<u64>> = (0..64).map(|i| img.at(i).iter().map(|v| v.to_bits()).collect()).collect();
        colors.sort();
        colors.dedup();
        assert_eq!(colors.len(), 2);
        assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn pca_is_deterministic_and_rejects_narrow_maps() {
        let data: Vec<f64> = (0..300).map(|i| ((i * 37) % 11) as f64 / 11.0).collect();
        let map = FeatureMap::from_data(10, 10, 3, data).unwrap();
        assert_eq!(pca_visualize(&map, 4).unwrap(), pca_visualize(&map, 4).unwrap());
        assert!(pca_visualize(&FeatureMap::zeros(2, 2, 2), 0).is_err());
    }

    #[test]
    fn label_colors_distinct_with_black_background() {
        let colors: Vec<[f64; 3]> = (0..4).map(|l| label_color(l, 4)).collect();
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(colors[i], colors[j]);
            }
        }
        assert_eq!(label_color(4, 4), [0.0; 3]);
    }
}
