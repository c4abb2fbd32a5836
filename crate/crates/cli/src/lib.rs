//! Pipeline steps behind the `scaffold4d` command line.

pub mod cli;

use std::str::FromStr;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use scaffold4d_core::agent::AgentError;
use scaffold4d_core::distill::{decoder_widths, DistillError, FeatureField};
use scaffold4d_core::io::{IoError, SceneFile};
use scaffold4d_core::map::{resize, FeatureMap, MapError};
use scaffold4d_core::query::{miou_accuracy, segment_feature_map, segment_with_background, LabelSet, QueryError};
use scaffold4d_core::raster::{rasterize, rasterize_reference, RasterConfig, RasterError};
use scaffold4d_core::scene::CameraModel;
use scaffold4d_core::worldgen::{SyntheticEncoder, WorldgenError};

/// Failures grouped by process exit code.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) => 1,
            Self::Data(_) => 2,
            Self::Numeric(_) => 3,
        }
    }
}

macro_rules! data_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                Self::Data(e.to_string())
            }
        }
    )*};
}

data_errors!(IoError, QueryError, RasterError, WorldgenError, MapError, serde_json::Error, std::io::Error);

impl From<DistillError> for CliError {
    fn from(e: DistillError) -> Self {
        match e {
            DistillError::NonFinite { .. } => Self::Numeric(e.to_string()),
            e => Self::Data(e.to_string()),
        }
    }
}

impl From<AgentError> for CliError {
    fn from(e: AgentError) -> Self {
        match e {
            AgentError::Distill(d) => d.into(),
            e => Self::Data(e.to_string()),
        }
    }
}

/// Which camera to render a timestep from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum View {
    /// The training camera of that frame.
    Input,
    /// The orbit camera at the given azimuth (degrees) and the frame's elevation.
    Orbit(f64),
    /// Halfway between this frame's camera and the next one.
    HeldOut,
}

impl FromStr for View {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "input" => Ok(Self::Input),
            "held-out" | "heldout" => Ok(Self::HeldOut),
            _ => match s.strip_prefix("orbit:").map(str::parse::<f64>) {
                Some(Ok(theta)) if theta.is_finite() => Ok(Self::Orbit(theta)),
                _ => Err(format!("unknown view {s:?} (expected input, held-out or orbit:DEGREES)")),
            },
        }
    }
}

pub fn view_camera(file: &SceneFile, frame: usize, view: View) -> Result<CameraModel, CliError> {
    let frames = file.frames();
    if frame >= frames {
        return Err(CliError::Data(format!("frame {frame} out of range for {frames} frames")));
    }
    let orbit = || file.orbit.as_ref().ok_or_else(|| CliError::Data("scene file has no orbit description".into()));
    Ok(match view {
        View::Input => file.cameras[frame].clone(),
        View::Orbit(theta) => {
            let o = orbit()?;
            o.camera_at(theta, o.angles(frame as f64, frames).1)
        }
        View::HeldOut => orbit()?.held_out(frame, frames),
    })
}

/// A label image at some resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelImage {
    pub width: usize,
    pub height: usize,
    pub labels: Vec<usize>,
}

impl LabelImage {
    /// Nearest-neighbour resampling, for comparing against full-res ground truth.
    pub fn resample(&self, width: usize, height: usize) -> Self {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let labels = (0..height)
            .flat_map(|y| {
                (0..width).map(move |x| {
                    let sx = (x * self.width / width).min(self.width - 1);
                    let sy = (y * self.height / height).min(self.height - 1);
                    self.labels[sy * self.width + sx]
                })
            })
            .collect();
        Self { width, height, labels }
    }
}

fn no_records() -> RasterConfig {
    RasterConfig { record_contributions: false, ..RasterConfig::default() }
}

/// Feature path: render the latent field, decode it with the task head and
/// match against the label set. Never touches an image encoder.
pub fn segment_rendered(
    field: &FeatureField,
    labels: &LabelSet,
    task: &str,
    camera: &CameraModel,
    frame: usize,
) -> Result<LabelImage, CliError> {
    let head = field.head_index(task).ok_or_else(|| CliError::Data(format!("no decoder for task {task:?}")))?;
    let out = field.render(camera, frame, &no_records())?;
    let decoded = field.decode_map(head, &out.feature)?;
    let alpha = resize(&out.alpha, decoded.width, decoded.height, field.heads[head].task.resize)?;
    let labels = segment_with_background(&decoded, &alpha, labels)?;
    Ok(LabelImage { width: decoded.width, height: decoded.height, labels })
}

/// Baseline path: run the (synthetic) image encoder on the view and
/// segment its output. Pixels with feature norm below 0.5 are background.
pub fn segment_encoded(
    encoder: &SyntheticEncoder<'_>,
    labels: &LabelSet,
    task: &str,
    camera: &CameraModel,
    frame: usize,
) -> Result<LabelImage, CliError> {
    let map = encoder.encode_view(camera, frame, task)?;
    let norms: Vec<f64> = (0..map.pixel_count()).map(|p| map.at(p).iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut seg = segment_feature_map(&map, labels)?;
    for (s, n) in seg.iter_mut().zip(norms) {
        if n < 0.5 {
            *s = labels.len();
        }
    }
    Ok(LabelImage { width: map.width, height: map.height, labels: seg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentSource {
    Rendered,
    Encoder,
}

impl FromStr for SegmentSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "rendered" | "feature" => Ok(Self::Rendered),
            "encoder" | "rgb" => Ok(Self::Encoder),
            _ => Err(format!("unknown source {s:?} (expected rendered or encoder)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentMetrics {
    pub frame: usize,
    pub task: String,
    pub source: SegmentSource,
    pub width: usize,
    pub height: usize,
    pub encoder_invocations: usize,
    /// Present when the scene carries ground truth.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub miou: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
}

pub struct SegmentResult {
    pub image: LabelImage,
    pub classes: usize,
    pub metrics: SegmentMetrics,
}

pub fn segment(file: &SceneFile, task: &str, frame: usize, view: View, source: SegmentSource) -> Result<SegmentResult, CliError> {
    let labels = file.label_set(task)?;
    let camera = view_camera(file, frame, view)?;
    let gt = file.ground_truth.as_ref();
    // The counter is live on both paths so the feature path's zero is measured.
    let encoder = gt.map(|g| SyntheticEncoder::new(g, &file.cameras));
    let image = match (source, &encoder) {
        (SegmentSource::Rendered, _) => segment_rendered(&file.field(), labels, task, &camera, frame)?,
        (SegmentSource::Encoder, Some(e)) => segment_encoded(e, labels, task, &camera, frame)?,
        (SegmentSource::Encoder, None) => {
            return Err(CliError::Data("the encoder path needs ground truth in the scene file".into()))
        }
    };
    let invocations = encoder.as_ref().map_or(0, SyntheticEncoder::invocations);
    let (miou, accuracy) = match gt {
        Some(g) => {
            let truth = g.render(&camera, frame)?;
            let full = image.resample(camera.width, camera.height);
            let (m, a) = miou_accuracy(&full.labels, &truth.labels, labels.len() + 1)?;
            (Some(m), Some(a))
        }
        None => (None, None),
    };
    Ok(SegmentResult {
        classes: labels.len(),
        metrics: SegmentMetrics {
            frame,
            task: task.into(),
            source,
            width: image.width,
            height: image.height,
            encoder_invocations: invocations,
            miou,
            accuracy,
        },
        image,
    })
}

/// Feature storage of three layouts, counted as 4-byte floats.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StorageReport {
    pub gaussians: usize,
    pub static_gaussians: usize,
    pub dynamic_gaussians: usize,
    pub nodes: usize,
    pub latent_dim: usize,
    /// Dynamic Gaussians per scaffold node.
    pub gaussian_node_ratio: f64,
    /// Sum of task feature widths.
    pub task_dims: usize,
    pub decoder_bytes: usize,
    /// One task-width feature per Gaussian per task, no decoders.
    pub naive_bytes: usize,
    /// One latent per Gaussian.
    pub unified_feature_bytes: usize,
    pub unified_bytes: usize,
    /// Latents on static Gaussians and scaffold nodes only.
    pub compact_feature_bytes: usize,
    /// The dynamic part alone: one latent per dynamic Gaussian versus one
    /// per scaffold node. Static Gaussians cost the same in both layouts.
    pub dynamic_unified_feature_bytes: usize,
    pub dynamic_compact_feature_bytes: usize,
    pub compact_bytes: usize,
    /// Naive layout at 512 feature channels vs one latent per Gaussian plus a
    /// single decoder to 512 channels.
    pub naive_512_bytes: usize,
    pub unified_512_bytes: usize,
}

const FLOAT_BYTES: usize = 4;

pub fn storage_report(field: &FeatureField) -> StorageReport {
    let n = field.scene.len();
    let n_static = field.scene.static_gaussians.len();
    let n_dyn = field.scene.dynamic_gaussians.len();
    let m = field.graph.nodes.len();
    let d = field.scene.latent_dim;
    let task_dims: usize = field.heads.iter().map(|h| h.task.dim).sum();
    let decoder_params: usize = field.heads.iter().map(|h| h.decoder.parameter_count()).sum();
    let params_512: usize = decoder_widths(d, 512).windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    StorageReport {
        gaussians: n,
        static_gaussians: n_static,
        dynamic_gaussians: n_dyn,
        nodes: m,
        latent_dim: d,
        gaussian_node_ratio: if m == 0 { 0.0 } else { n_dyn as f64 / m as f64 },
        task_dims,
        decoder_bytes: decoder_params * FLOAT_BYTES,
        naive_bytes: n * task_dims * FLOAT_BYTES,
        unified_feature_bytes: n * d * FLOAT_BYTES,
        unified_bytes: (n * d + decoder_params) * FLOAT_BYTES,
        compact_feature_bytes: (n_static + m) * d * FLOAT_BYTES,
        dynamic_unified_feature_bytes: n_dyn * d * FLOAT_BYTES,
        dynamic_compact_feature_bytes: m * d * FLOAT_BYTES,
        compact_bytes: ((n_static + m) * d + decoder_params) * FLOAT_BYTES,
        naive_512_bytes: n * 512 * FLOAT_BYTES,
        unified_512_bytes: (n * d + params_512) * FLOAT_BYTES,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub frames: usize,
    pub tiled_ms: f64,
    pub reference_ms: f64,
    pub speedup: f64,
    pub max_abs_diff: f64,
}

/// Renders the first `frames` training views with both rasterizers.
pub fn timing_report(file: &SceneFile, frames: usize) -> Result<TimingReport, CliError> {
    let field = file.field();
    let cfg = no_records();
    let frames = frames.min(file.frames());
    let (mut tiled, mut reference, mut diff) = (0.0, 0.0, 0.0f64);
    for t in 0..frames {
        let list = field.render_list(t)?;
        let cam = &file.cameras[t];
        let d = field.scene.latent_dim;
        let start = Instant::now();
        let a = rasterize(cam, &list, d, &cfg)?;
        tiled += start.elapsed().as_secs_f64();
        let start = Instant::now();
        let b = rasterize_reference(cam, &list, d, &cfg)?;
        reference += start.elapsed().as_secs_f64();
        diff = diff.max(a.rgb.max_abs_diff(&b.rgb)).max(a.feature.max_abs_diff(&b.feature));
    }
    Ok(TimingReport {
        frames,
        tiled_ms: tiled * 1e3,
        reference_ms: reference * 1e3,
        speedup: if tiled > 0.0 { reference / tiled } else { 0.0 },
        max_abs_diff: diff,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderReport {
    pub task: String,
    pub frames: usize,
    pub rendered_path_invocations: usize,
    pub encoder_path_invocations: usize,
}

/// Segments every training frame along both paths, counting encoder calls.
pub fn encoder_report(file: &SceneFile, task: &str) -> Result<EncoderReport, CliError> {
    let gt = file.ground_truth.as_ref().ok_or_else(|| CliError::Data("bench needs ground truth".into()))?;
    let labels = file.label_set(task)?;
    let field = file.field();
    let rendered = SyntheticEncoder::new(gt, &file.cameras);
    let encoded = SyntheticEncoder::new(gt, &file.cameras);
    for (t, cam) in file.cameras.iter().enumerate() {
        segment_rendered(&field, labels, task, cam, t)?;
        segment_encoded(&encoded, labels, task, cam, t)?;
    }
    Ok(EncoderReport {
        task: task.into(),
        frames: file.frames(),
        rendered_path_invocations: rendered.invocations(),
        encoder_path_invocations: encoded.invocations(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub storage: StorageReport,
    pub timing: TimingReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub encoder: Option<EncoderReport>,
}

/// Latent map or decoded task map of a view, for visualization.
pub fn render_features(file: &SceneFile, task: Option<&str>, camera: &CameraModel, frame: usize) -> Result<FeatureMap, CliError> {
    let field = file.field();
    let out = field.render(camera, frame, &no_records())?;
    match task {
        None => Ok(out.feature),
        Some(t) => {
            let head = field.head_index(t).ok_or_else(|| CliError::Data(format!("no decoder for task {t:?}")))?;
            Ok(field.decode_map(head, &out.feature)?)
        }
    }
}

/// Thread count from `SCAFFOLD4D_THREADS`, if set.
pub fn thread_count(var: Option<&str>) -> Result<Option<usize>, CliError> {
    match var {
        None => Ok(None),
        Some(s) => match s.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Usage(format!("SCAFFOLD4D_THREADS must be a positive integer, got {s:?}"))),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn views_parse() {
        assert_eq!("input".parse::<View>().unwrap(), View::Input);
        assert_eq!("held-out".parse::<View>().unwrap(), View::HeldOut);
        assert_eq!("orbit:-30.5".parse::<View>().unwrap(), View::Orbit(-30.5));
        for bad in ["orbit:", "orbit:nan", "side", ""] {
            assert!(bad.parse::<View>().is_err(), "{bad}");
        }
    }

    #[test]
    fn thread_count_rejects_non_positive_values() {
        assert_eq!(thread_count(None).unwrap(), None);
        assert_eq!(thread_count(Some(" 4 ")).unwrap(), Some(4));
        for bad in ["0", "-1", "two"] {
            assert_eq!(thread_count(Some(bad)).unwrap_err().exit_code(), 1);
        }
    }

    #[test]
    fn non_finite_training_maps_to_numeric_exit() {
        let e: CliError = DistillError::NonFinite { stage: "dynamic".into(), iteration: 3, term: "rgb".into() }.into();
        assert_eq!(e.exit_code(), 3);
    }

    #[test]
    fn nearest_resample_repeats_pixels() {
        let img = LabelImage { width: 2, height: 1, labels: vec![0, 1] };
        assert_eq!(img.resample(4, 2).labels, vec![0, 0, 1, 1, 0, 0, 1, 1]);
    }
}
