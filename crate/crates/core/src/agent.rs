//! Prompt-driven editing: parse a command, try a grid of selection
//! thresholds, score rendered samples and apply the winner to every frame.

use std::io::Write;
use std::process::{Command, Stdio};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::distill::{DistillError, FeatureField};
use crate::map::FeatureMap;
use crate::query::{apply_edit, mask_iou, score_gaussians, EditConfig, EditOp, LabelSet, QueryError, ScoreMatrix};
use crate::raster::{rasterize, RasterConfig, RasterError};
use crate::scene::{CameraModel, RenderList};
use crate::se3::Vec3;
use crate::worldgen::GroundTruth;

#[derive(Debug, Error)]
pub enum AgentError {
    #[error("no edit verb recognized in {0:?}")]
    NoVerb(String),
    #[error("no known label in {0:?}")]
    NoLabel(String),
    #[error("recolor requested without a known color in {0:?}")]
    NoColor(String),
    #[error("scorer failed on candidate {candidate}: {message}")]
    Scorer { candidate: usize, message: String },
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Query(#[from] QueryError),
    #[error(transparent)]
    Distill(#[from] DistillError),
    #[error(transparent)]
    Raster(#[from] RasterError),
}

/// The 16 basic HTML color keywords.
pub const NAMED_COLORS: [(&str, [u8; 3]); 16] = [
    ("white", [255, 255, 255]),
    ("silver", [192, 192, 192]),
    ("gray", [128, 128, 128]),
    ("black", [0, 0, 0]),
    ("red", [255, 0, 0]),
    ("maroon", [128, 0, 0]),
    ("yellow", [255, 255, 0]),
    ("olive", [128, 128, 0]),
    ("lime", [0, 255, 0]),
    ("green", [0, 128, 0]),
    ("aqua", [0, 255, 255]),
    ("teal", [0, 128, 128]),
    ("blue", [0, 0, 255]),
    ("navy", [0, 0, 128]),
    ("fuchsia", [255, 0, 255]),
    ("purple", [128, 0, 128]),
];

pub fn named_color(name: &str) -> Option<Vec3> {
    let name = if name == "grey" { "gray" } else { name };
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, c)| Vec3::new(c[0] as f64 / 255.0, c[1] as f64 / 255.0, c[2] as f64 / 255.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptParse {
    pub operation: EditOp,
    pub targets: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub color: Option<Vec3>,
}

fn tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

fn match_label<'a>(token: &str, labels: &'a [String]) -> Option<&'a String> {
    let forms = [Some(token), token.strip_suffix('s'), token.strip_suffix("es")];
    labels.iter().find(|l| forms.iter().flatten().any(|f| f == &l.to_lowercase()))
}

/// Rule-based parse over a small verb lexicon and the scene's labels.
pub fn parse_prompt(text: &str, labels: &[String]) -> Result<PromptParse, AgentError> {
    let toks = tokens(text);
    let color = toks.iter().find_map(|t| named_color(t));
    let mut operation = None;
    for (i, t) in toks.iter().enumerate() {
        operation = match t.as_str() {
            "delete" | "remove" | "erase" => Some(EditOp::Delete),
            "extract" | "isolate" => Some(EditOp::Extract),
            "recolor" | "recolour" | "paint" => Some(EditOp::Recolor),
            "change" | "turn" if toks[i + 1..].iter().any(|n| n == "color" || n == "colour") || color.is_some() => {
                Some(EditOp::Recolor)
            }
            "make" if color.is_some() || toks[i + 1..].iter().any(|n| n == "look") => Some(EditOp::Recolor),
            _ => None,
        };
        if operation.is_some() {
            break;
        }
    }
    let operation = operation.ok_or_else(|| AgentError::NoVerb(toks.first().cloned().unwrap_or_default()))?;
    let mut targets: Vec<String> = Vec::new();
    for t in &toks {
        if let Some(l) = match_label(t, labels) {
            if !targets.contains(l) {
                targets.push(l.clone());
            }
        }
    }
    if targets.is_empty() {
        return Err(AgentError::NoLabel(text.to_string()));
    }
    if operation == EditOp::Recolor && color.is_none() {
        return Err(AgentError::NoColor(text.to_string()));
    }
    Ok(PromptParse { operation, targets, color: if operation == EditOp::Recolor { color } else { None } })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub id: usize,
    pub config: EditConfig,
}

/// Rendered evidence for one candidate at one sample frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateRender {
    pub frame: usize,
    /// The edited scene.
    pub rgb: FeatureMap,
    /// Composited weight of selected Gaussians per pixel (occlusion aware).
    pub selection: FeatureMap,
}

/// Scores a candidate from its renders; higher is better.
pub trait Scorer {
    fn score(&self, candidate: &Candidate, renders: &[CandidateRender]) -> Result<f64, String>;
}

/// Mean IoU between the rendered selection (weight ≥ 0.5) and the
/// ground-truth mask of the target labels over the sample frames.
pub struct GtIouScorer<'a> {
    pub gt: &'a GroundTruth,
    pub cameras: &'a [CameraModel],
}

impl Scorer for GtIouScorer<'_> {
    fn score(&self, candidate: &Candidate, renders: &[CandidateRender]) -> Result<f64, String> {
        let targets: Vec<usize> = candidate
            .config
            .targets
            .iter()
            .map(|t| self.gt.labels.iter().position(|l| l == t).ok_or_else(|| format!("label {t:?} not in ground truth")))
            .collect::<Result<_, _>>()?;
        if renders.is_empty() {
            return Err("no sample renders".into());
        }
        let mut total = 0.0;
        for r in renders {
            let cam = self.cameras.get(r.frame).ok_or_else(|| format!("no camera for frame {}", r.frame))?;
            let gt = self.gt.render(cam, r.frame).map_err(|e| e.to_string())?;
            let want: Vec<bool> = gt.labels.iter().map(|l| targets.contains(l)).collect();
            let got: Vec<bool> = r.selection.data.iter().map(|w| *w >= 0.5).collect();
            total += mask_iou(&got, &want);
        }
        Ok(total / renders.len() as f64)
    }
}

/// Delegates scoring to an external program. The program receives a JSON
/// document on stdin and must print a single number.
pub struct CommandScorer {
    pub program: String,
    pub args: Vec<String>,
}

#[derive(Serialize)]
struct ScoreRequest<'a> {
    candidate: &'a Candidate,
    frames: Vec<ScoreFrame>,
}

#[derive(Serialize)]
struct ScoreFrame {
    frame: usize,
    width: usize,
    height: usize,
    /// Row-major RGB bytes.
    rgb: Vec<u8>,
    selected_fraction: f64,
}

impl Scorer for CommandScorer {
    fn score(&self, candidate: &Candidate, renders: &[CandidateRender]) -> Result<f64, String> {
        let frames = renders
            .iter()
            .map(|r| ScoreFrame {
                frame: r.frame,
                width: r.rgb.width,
                height: r.rgb.height,
                rgb: r.rgb.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect(),
                selected_fraction: r.selection.data.iter().filter(|w| **w >= 0.5).count() as f64
                    / r.selection.data.len().max(1) as f64,
            })
            .collect();
        let body = serde_json::to_vec(&ScoreRequest { candidate, frames }).map_err(|e| e.to_string())?;
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| format!("spawning {}: {e}", self.program))?;
        child.stdin.take().expect("piped stdin").write_all(&body).map_err(|e| e.to_string())?;
        let out = child.wait_with_output().map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{} exited with {}", self.program, out.status));
        }
        let text = String::from_utf8_lossy(&out.stdout);
        text.trim().parse::<f64>().map_err(|e| format!("unparseable score {:?}: {e}", text.trim()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentConfig {
    /// Candidate thresholds, strictly increasing.
    pub thresholds: Vec<f64>,
    /// Task whose decoder produces the features matched against labels.
    pub task: String,
    pub sample_frames: usize,
    pub raster: RasterConfig,
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 0.6, 0.7, 0.8, 0.9],
            task: "clip".into(),
            sample_frames: 3,
            raster: RasterConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub candidate: Candidate,
    pub score: f64,
    pub frames: Vec<usize>,
    pub selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgentTrace {
    pub prompt: String,
    pub parse: PromptParse,
    pub entries: Vec<TraceEntry>,
    pub winner: usize,
    pub warnings: Vec<String>,
}

impl AgentTrace {
    /// Winner by highest score, ties to the earliest (lowest threshold).
    pub fn select(entries: &[TraceEntry]) -> usize {
        let mut best = 0;
        for (i, e) in entries.iter().enumerate() {
            if e.score > entries[best].score {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AgentOutcome {
    pub config: EditConfig,
    pub mask: Vec<bool>,
    pub edited: FeatureField,
    /// Edited RGB for every frame of the camera track.
    pub frames: Vec<FeatureMap>,
    pub trace: AgentTrace,
}

/// `count` evenly spaced frame indices over `frames` (first and last included).
pub fn sample_frames(frames: usize, count: usize) -> Vec<usize> {
    match (frames, count) {
        (0, _) | (_, 0) => Vec::new(),
        (_, 1) => vec![0],
        _ => {
            let mut v: Vec<usize> =
                (0..count).map(|i| ((i * (frames - 1)) as f64 / (count - 1) as f64).round() as usize).collect();
            v.dedup();
            v
        }
    }
}

/// Scores of every Gaussian against `labels` using the task decoder.
pub fn gaussian_scores(field: &FeatureField, labels: &LabelSet, task: &str) -> Result<ScoreMatrix, AgentError> {
    let head = field.head_index(task).ok_or_else(|| AgentError::Config(format!("unknown task {task:?}")))?;
    Ok(score_gaussians(&field.gaussian_features(head)?, labels)?)
}

fn render_candidate(
    field: &FeatureField,
    edited: &FeatureField,
    mask: &[bool],
    camera: &CameraModel,
    frame: usize,
    raster: &RasterConfig,
) -> Result<CandidateRender, AgentError> {
    let cfg = RasterConfig { record_contributions: false, ..raster.clone() };
    let rgb = edited.render(camera, frame, &cfg)?.rgb;
    let list = field.render_list(frame)?;
    let flags: Vec<f64> = mask.iter().map(|m| f64::from(u8::from(*m))).collect();
    let sel = rasterize(camera, &RenderList { splats: list.splats, features: flags, dim: 1 }, 1, &cfg)?;
    Ok(CandidateRender { frame, rgb, selection: sel.feature })
}

/// Runs the full candidate search for `prompt` and applies the winner.
pub fn run_agent(
    field: &FeatureField,
    labels: &LabelSet,
    prompt: &str,
    scorer: &dyn Scorer,
    cameras: &[CameraModel],
    cfg: &AgentConfig,
) -> Result<AgentOutcome, AgentError> {
    if cfg.thresholds.is_empty() || cfg.thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(AgentError::Config("thresholds must be non-empty and strictly increasing".into()));
    }
    let frames = field.graph.timesteps();
    if cameras.len() != frames {
        return Err(AgentError::Config(format!("{} cameras for {frames} frames", cameras.len())));
    }
    let parse = parse_prompt(prompt, &labels.labels)?;
    let scores = gaussian_scores(field, labels, &cfg.task)?;
    let samples = sample_frames(frames, cfg.sample_frames);

    let mut entries = Vec::with_capacity(cfg.thresholds.len());
    let mut masks = Vec::with_capacity(cfg.thresholds.len());
    for (id, &threshold) in cfg.thresholds.iter().enumerate() {
        let config = EditConfig { operation: parse.operation, targets: parse.targets.clone(), threshold, color: parse.color };
        let mask = config.select(&scores, labels)?;
        let edited = FeatureField { scene: apply_edit(&field.scene, &mask, &config)?, ..field.clone() };
        let renders = samples
            .iter()
            .map(|&f| render_candidate(field, &edited, &mask, &cameras[f], f, &cfg.raster))
            .collect::<Result<Vec<_>, _>>()?;
        let candidate = Candidate { id, config };
        let score = scorer.score(&candidate, &renders).map_err(|message| AgentError::Scorer { candidate: id, message })?;
        entries.push(TraceEntry { candidate, score, frames: samples.clone(), selected: mask.iter().filter(|m| **m).count() });
        masks.push(mask);
    }

    let winner = AgentTrace::select(&entries);
    let mut warnings = Vec::new();
    if entries[winner].selected == 0 {
        warnings.push(format!("degenerate edit: winning candidate {winner} selects no gaussians"));
    }
    let config = entries[winner].candidate.config.clone();
    let mask = masks.swap_remove(winner);
    // One mask for every frame keeps the edit temporally consistent.
    let edited = FeatureField { scene: apply_edit(&field.scene, &mask, &config)?, ..field.clone() };
    let raster = RasterConfig { record_contributions: false, ..cfg.raster.clone() };
    let rendered =
        cameras.iter().enumerate().map(|(t, c)| Ok(edited.render(c, t, &raster)?.rgb)).collect::<Result<Vec<_>, AgentError>>()?;
    Ok(AgentOutcome {
        config,
        mask,
        edited,
        frames: rendered,
        trace: AgentTrace { prompt: prompt.to_string(), parse, entries, winner, warnings },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels() -> Vec<String> {
        vec!["dog".into(), "cow".into(), "table".into()]
    }

    #[test]
    fn parses_a_delete_prompt() {
        let p = parse_prompt("Delete the dog", &labels()).unwrap();
        assert_eq!(p, PromptParse { operation: EditOp::Delete, targets: vec!["dog".into()], color: None });
    }

    #[test]
    fn parses_extract_and_recolor() {
        assert_eq!(parse_prompt("extract the cow", &labels()).unwrap().operation, EditOp::Extract);
        let p = parse_prompt("make the dog red", &labels()).unwrap();
        assert_eq!(p.operation, EditOp::Recolor);
        assert_eq!(p.targets, vec!["dog".to_string()]);
        assert_eq!(p.color, Some(Vec3::new(1.0, 0.0, 0.0)));
        let p = parse_prompt("Change the color of the cows to navy", &labels()).unwrap();
        assert_eq!((p.operation, p.targets.clone()), (EditOp::Recolor, vec!["cow".to_string()]));
        assert!((p.color.unwrap() - Vec3::new(0.0, 0.0, 128.0 / 255.0)).norm() < 1e-15);
        let p = parse_prompt("remove the dog's and the table", &labels()).unwrap();
        assert_eq!(p.targets, vec!["dog".to_string(), "table".to_string()]);
    }

    #[test]
    fn parse_errors_name_the_problem() {
        match parse_prompt("hug the dog", &labels()) {
            Err(AgentError::NoVerb(t)) => assert_eq!(t, "hug"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_prompt("delete the cat", &labels()), Err(AgentError::NoLabel(_))));
        assert!(matches!(parse_prompt("recolor the dog", &labels()), Err(AgentError::NoColor(_))));
    }

    #[test]
    fn color_table_has_sixteen_entries() {
        assert_eq!(NAMED_COLORS.len(), 16);
        assert_eq!(named_color("lime"), Some(Vec3::new(0.0, 1.0, 0.0)));
        assert_eq!(named_color("grey"), named_color("gray"));
        assert_eq!(named_color("mauve"), None);
    }

    #[test]
    fn sample_frames_are_even() {
        assert_eq!(sample_frames(24, 3), vec![0, 12, 23]);
        assert_eq!(sample_frames(2, 3), vec![0, 1]);
        assert_eq!(sample_frames(5, 1), vec![0]);
    }

    fn entry(id: usize, score: f64) -> TraceEntry {
        TraceEntry {
            candidate: Candidate {
                id,
                config: EditConfig { operation: EditOp::Delete, targets: vec!["dog".into()], threshold: 0.5, color: None },
            },
            score,
            frames: vec![0],
            selected: 1,
        }
    }

    #[test]
    fn selection_ties_go_to_first() {
        assert_eq!(AgentTrace::select(&[entry(0, 0.4), entry(1, 0.4)]), 0);
        assert_eq!(AgentTrace::select(&[entry(0, 0.4), entry(1, 0.5), entry(2, 0.5)]), 1);
        assert_eq!(AgentTrace::select(&[entry(0, 0.1)]), 0);
    }
}
