//! Argument definitions and subcommand handlers.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use scaffold4d_core::agent::{named_color, run_agent, AgentConfig, CommandScorer, GtIouScorer, Scorer};
use scaffold4d_core::distill::{evaluate, train, TrainConfig};
use scaffold4d_core::io::{colorize_labels, pca_visualize, write_image, SceneFile};
use scaffold4d_core::query::{apply_edit, EditConfig, EditOp};
use scaffold4d_core::raster::RasterConfig;
use scaffold4d_core::se3::Vec3;
use scaffold4d_core::worldgen::{generate, training_targets, SyntheticEncoder, SyntheticSceneSpec};

use crate::{encoder_report, render_features, segment, storage_report, timing_report, view_camera, BenchReport, CliError, SegmentSource, View};

#[derive(Debug, Parser)]
#[command(name = "scaffold4d", version, about = "Scaffold-driven 4D Gaussian feature fields")]
pub struct Cli {
    /// Seed for generation and visualization.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene with ground truth.
    Gen(GenArgs),
    /// Distill features into a scene.
    Train(TrainArgs),
    /// Render RGB and a PCA view of the features.
    Render(RenderArgs),
    /// Label a view by matching decoded features against the label set.
    Segment(SegmentArgs),
    /// Select Gaussians by label and edit them.
    Edit(EditArgs),
    /// Edit from a natural-language prompt with candidate scoring.
    AgentEdit(AgentEditArgs),
    /// Storage, rasterizer timing and encoder-call report.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Scene description (JSON); the default desk scene when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub scene: PathBuf,
    /// Training configuration (JSON); defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-iteration loss CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    /// input, held-out or orbit:DEGREES
    #[arg(long, default_value = "input")]
    pub view: View,
    #[arg(long)]
    pub rgb: Option<PathBuf>,
    #[arg(long)]
    pub feat_pca: Option<PathBuf>,
    /// Decode features with this task before PCA; the raw latent otherwise.
    #[arg(long)]
    pub task: Option<String>,
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub frame: usize,
    #[arg(long, default_value = "input")]
    pub view: View,
    #[arg(long, default_value = "clip")]
    pub task: String,
    /// rendered (decoded feature field) or encoder (per-frame image encoder).
    #[arg(long, default_value = "rendered")]
    pub source: SegmentSource,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metrics: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub op: EditOp,
    #[arg(long = "label", required = true)]
    pub labels: Vec<String>,
    #[arg(long, default_value_t = 0.7)]
    pub threshold: f64,
    /// Color name or r,g,b in [0, 1]; required for recolor.
    #[arg(long)]
    pub color: Option<String>,
    #[arg(long, default_value = "clip")]
    pub task: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AgentEditArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub prompt: String,
    /// Agent settings (JSON), optionally naming an external scorer command.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub trace: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Directory for the edited frame renders.
    #[arg(long)]
    pub frames: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub scene: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long, default_value = "clip")]
    pub task: String,
    /// Frames rendered for the rasterizer timing.
    #[arg(long, default_value_t = 3)]
    pub timing_frames: usize,
}

/// Agent config file: [`AgentConfig`] plus an optional scorer program.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AgentFile {
    #[serde(flatten)]
    pub agent: AgentConfig,
    /// Program and arguments; scores candidates instead of ground truth.
    pub scorer_command: Option<Vec<String>>,
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_color(s: &str) -> Result<Vec3, CliError> {
    if let Some(c) = named_color(&s.to_lowercase()) {
        return Ok(c);
    }
    let parts: Vec<f64> = s.split(',').map(|p| p.trim().parse::<f64>()).collect::<Result<_, _>>().map_err(|_| bad_color(s))?;
    match parts[..] {
        [r, g, b] if parts.iter().all(|v| (0.0..=1.0).contains(v)) => Ok(Vec3::new(r, g, b)),
        _ => Err(bad_color(s)),
    }
}

fn bad_color(s: &str) -> CliError {
    CliError::Usage(format!("unknown color {s:?} (expected a color name or r,g,b in [0, 1])"))
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let seed = cli.seed;
    match cli.command {
        Command::Gen(a) => gen(a, seed),
        Command::Train(a) => train_cmd(a),
        Command::Render(a) => render(a, seed.unwrap_or(0)),
        Command::Segment(a) => segment_cmd(a),
        Command::Edit(a) => edit(a),
        Command::AgentEdit(a) => agent_edit(a),
        Command::Bench(a) => bench(a),
    }
}

fn gen(a: GenArgs, seed: Option<u64>) -> Result<(), CliError> {
    let mut spec = match &a.spec {
        Some(p) => read_json::<SyntheticSceneSpec>(p)?,
        None => SyntheticSceneSpec::desk(0),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    spec.validate()?;
    let generated = generate(&spec)?;
    SceneFile::from_generated(generated, &spec, spec.seed)?.save(&a.out)?;
    Ok(())
}

fn train_cmd(a: TrainArgs) -> Result<(), CliError> {
    let mut file = SceneFile::load(&a.scene)?;
    let cfg = match &a.config {
        Some(p) => read_json::<TrainConfig>(p)?,
        None => TrainConfig::default(),
    };
    cfg.validate()?;
    let gt = file.ground_truth.as_ref().ok_or_else(|| CliError::Data("training needs ground truth supervision".into()))?;
    let encoder = SyntheticEncoder::new(gt, &file.cameras);
    let targets = training_targets(gt, &encoder, &file.cameras)?;
    let mut field = file.field();
    let before = evaluate(&field, &file.cameras, &targets, &cfg.raster)?;
    let report = train(&mut field, &file.cameras, &targets, &cfg)?;
    let after = evaluate(&field, &file.cameras, &targets, &cfg.raster)?;
    eprintln!(
        "photometric {:.5} -> {:.5}, feature {:.6} -> {:.6}",
        before.photometric, after.photometric, before.feature, after.feature
    );
    if let Some(log) = &a.log {
        let f = fs::File::create(log).map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
        report.write_csv(f).map_err(|e| CliError::Data(format!("{}: {e}", log.display())))?;
    }
    file.set_field(field);
    file.save(&a.out)?;
    Ok(())
}

fn render(a: RenderArgs, seed: u64) -> Result<(), CliError> {
    if a.rgb.is_none() && a.feat_pca.is_none() {
        return Err(CliError::Usage("nothing to write: pass --rgb and/or --feat-pca".into()));
    }
    let file = SceneFile::load(&a.scene)?;
    let camera = view_camera(&file, a.frame, a.view)?;
    if let Some(path) = &a.rgb {
        let cfg = RasterConfig { record_contributions: false, ..RasterConfig::default() };
        let out = file.field().render(&camera, a.frame, &cfg)?;
        write_image(path, &out.rgb)?;
    }
    if let Some(path) = &a.feat_pca {
        let features = render_features(&file, a.task.as_deref(), &camera, a.frame)?;
        write_image(path, &pca_visualize(&features, seed)?)?;
    }
    Ok(())
}

fn segment_cmd(a: SegmentArgs) -> Result<(), CliError> {
    let file = SceneFile::load(&a.scene)?;
    let result = segment(&file, &a.task, a.frame, a.view, a.source)?;
    if let Some(path) = &a.out {
        let img = &result.image;
        write_image(path, &colorize_labels(&img.labels, img.width, img.height, result.classes)?)?;
    }
    match &a.metrics {
        Some(path) => write_json(path, &result.metrics)?,
        None => println!("{}", serde_json::to_string(&result.metrics)?),
    }
    Ok(())
}

fn edit(a: EditArgs) -> Result<(), CliError> {
    let mut file = SceneFile::load(&a.scene)?;
    let color = a.color.as_deref().map(parse_color).transpose()?;
    let config = EditConfig { operation: a.op, targets: a.labels, threshold: a.threshold, color };
    config.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let labels = file.label_set(&a.task)?;
    let scores = scaffold4d_core::agent::gaussian_scores(&file.field(), labels, &a.task)?;
    let mask = config.select(&scores, labels)?;
    let selected = mask.iter().filter(|m| **m).count();
    if selected == 0 {
        eprintln!("warning: selection is empty, scene unchanged");
    }
    file.scene = apply_edit(&file.scene, &mask, &config)?;
    file.save(&a.out)?;
    eprintln!("{:?} applied to {selected} of {} gaussians", config.operation, mask.len());
    Ok(())
}

fn agent_edit(a: AgentEditArgs) -> Result<(), CliError> {
    let mut file = SceneFile::load(&a.scene)?;
    let settings = match &a.config {
        Some(p) => read_json::<AgentFile>(p)?,
        None => AgentFile::default(),
    };
    let labels = file.label_set(&settings.agent.task)?.clone();
    let scorer: Box<dyn Scorer + '_> = match (&settings.scorer_command, &file.ground_truth) {
        (Some(cmd), _) => {
            let (program, args) = cmd.split_first().ok_or_else(|| CliError::Data("empty scorer command".into()))?;
            Box::new(CommandScorer { program: program.clone(), args: args.to_vec() })
        }
        (None, Some(gt)) => Box::new(GtIouScorer { gt, cameras: &file.cameras }),
        (None, None) => return Err(CliError::Data("no ground truth to score against and no scorer command".into())),
    };
    let outcome = run_agent(&file.field(), &labels, &a.prompt, scorer.as_ref(), &file.cameras, &settings.agent)?;
    drop(scorer);
    for w in &outcome.trace.warnings {
        eprintln!("warning: {w}");
    }
    if let Some(path) = &a.trace {
        write_json(path, &outcome.trace)?;
    }
    if let Some(dir) = &a.frames {
        fs::create_dir_all(dir).map_err(|e| CliError::Data(format!("{}: {e}", dir.display())))?;
        for (t, rgb) in outcome.frames.iter().enumerate() {
            write_image(&dir.join(format!("frame_{t:03}.ppm")), rgb)?;
        }
    }
    let winner = &outcome.trace.entries[outcome.trace.winner];
    eprintln!(
        "{:?} {:?} at threshold {} (score {:.4}, {} gaussians)",
        outcome.config.operation, outcome.config.targets, outcome.config.threshold, winner.score, winner.selected
    );
    file.scene = outcome.edited.scene;
    file.save(&a.out)?;
    Ok(())
}

fn bench(a: BenchArgs) -> Result<(), CliError> {
    let file = SceneFile::load(&a.scene)?;
    let report = BenchReport {
        storage: storage_report(&file.field()),
        timing: timing_report(&file, a.timing_frames)?,
        encoder: match file.ground_truth {
            Some(_) => Some(encoder_report(&file, &a.task)?),
            None => None,
        },
    };
    write_json(&a.report, &report)
}
