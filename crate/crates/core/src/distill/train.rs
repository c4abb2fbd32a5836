use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::decoder::{matrix_from_rows, matrix_to_rows, DecoderGrads, DecoderMLP};
use super::loss::{feature_loss_masked, photometric_loss_masked, AdamConfig, AdamState};
use super::DistillError;
use crate::map::{resize, resize_adjoint, FeatureMap, ResizeMethod};
use crate::raster::{rasterize, rasterize_backward, scene_backward, RasterConfig, RenderOutput, SceneGrads};
use crate::scaffold::{arap_loss, smoothness_losses, ScaffoldGraph};
use crate::scene::{fuse, render_list_at, CameraModel, GaussianScene, LatentSource, RenderList};

/// A downstream feature task: target width `dim` at a native resolution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub name: String,
    pub dim: usize,
    pub width: usize,
    pub height: usize,
    /// How rendered latent maps are brought to the task resolution.
    #[serde(default)]
    pub resize: ResizeMethod,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskHead {
    pub task: TaskSpec,
    pub decoder: DecoderMLP,
}

/// Everything distillation optimizes: the scene, its scaffold and one
/// decoder per task.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    pub scene: GaussianScene,
    pub graph: ScaffoldGraph,
    pub heads: Vec<TaskHead>,
}

impl FeatureField {
    /// Builds decoders for `tasks`, drawing their parameters from `seed`.
    pub fn new(scene: GaussianScene, graph: ScaffoldGraph, tasks: &[TaskSpec], seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = scene.latent_dim;
        let heads = tasks
            .iter()
            .map(|t| TaskHead {
                task: t.clone(),
                decoder: DecoderMLP::with_widths(&super::decoder_widths(d, t.dim), &mut rng),
            })
            .collect();
        Self { scene, graph, heads }
    }

    pub fn head_index(&self, name: &str) -> Option<usize> {
        self.heads.iter().position(|h| h.task.name == name)
    }

    pub fn render_list(&self, timestep: usize) -> Result<RenderList, DistillError> {
        Ok(render_list_at(&self.scene, &self.graph, timestep)?)
    }

    pub fn render(&self, camera: &CameraModel, timestep: usize, cfg: &RasterConfig) -> Result<RenderOutput, DistillError> {
        let list = self.render_list(timestep)?;
        Ok(rasterize(camera, &list, self.scene.latent_dim, cfg)?)
    }

    /// Resizes a rendered latent map to the task resolution and decodes it.
    pub fn decode_map(&self, head: usize, latent: &FeatureMap) -> Result<FeatureMap, DistillError> {
        let h = &self.heads[head];
        let small = resize(latent, h.task.width, h.task.height, h.task.resize)?;
        let x = matrix_from_rows(small.pixel_count(), small.channels, &small.data);
        let y = h.decoder.forward(&x)?;
        Ok(FeatureMap::from_data(small.width, small.height, h.task.dim, matrix_to_rows(&y))?)
    }

    /// Per-Gaussian latents in scene order (`N × D`).
    pub fn latents(&self) -> DMatrix<f64> {
        let d = self.scene.latent_dim;
        let mut data = Vec::with_capacity(self.scene.len() * d);
        for g in self.scene.iter() {
            match &g.latent {
                LatentSource::Owned(f) => data.extend_from_slice(f),
                LatentSource::Scaffold { binding, .. } => data.extend(self.graph.binding_feature(binding)),
            }
        }
        matrix_from_rows(self.scene.len(), d, &data)
    }

    /// Task features of every Gaussian, decoded directly in 3D.
    pub fn gaussian_features(&self, head: usize) -> Result<DMatrix<f64>, DistillError> {
        self.heads[head].decoder.forward(&self.latents())
    }
}

/// Supervision for one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTargets {
    pub rgb: FeatureMap,
    /// Pixels showing only static content; `None` treats every pixel as static.
    pub static_mask: Option<Vec<bool>>,
    /// One map per task head, at the task's native resolution.
    pub features: Vec<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearningRates {
    pub color: f64,
    pub opacity: f64,
    pub feature: f64,
    pub decoder: f64,
    pub scaffold: f64,
    pub offset: f64,
}

impl Default for LearningRates {
    fn default() -> Self {
        Self { color: 1e-2, opacity: 1e-2, feature: 1e-2, decoder: 1e-3, scaffold: 1e-3, offset: 1e-3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub photometric: f64,
    pub feature: f64,
    pub arap: f64,
    pub velocity: f64,
    pub acceleration: f64,
    /// Pull of scaffold translations toward their initial trajectories
    /// during the geometric stage.
    pub trajectory_fidelity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { photometric: 1.0, feature: 1.0, arap: 1.0, velocity: 0.1, acceleration: 0.1, trajectory_fidelity: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub static_iterations: usize,
    pub geometric_iterations: usize,
    pub dynamic_iterations: usize,
    pub learning_rates: LearningRates,
    pub weights: LossWeights,
    /// Per-task multipliers inside the feature loss; missing tasks weigh 1.
    pub task_weights: BTreeMap<String, f64>,
    pub raster: RasterConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            static_iterations: 400,
            geometric_iterations: 500,
            dynamic_iterations: 1000,
            learning_rates: LearningRates::default(),
            weights: LossWeights::default(),
            task_weights: BTreeMap::new(),
            raster: RasterConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), DistillError> {
        let w = &self.weights;
        let lr = &self.learning_rates;
        let values = [
            w.photometric,
            w.feature,
            w.arap,
            w.velocity,
            w.acceleration,
            w.trajectory_fidelity,
            lr.color,
            lr.opacity,
            lr.feature,
            lr.decoder,
            lr.scaffold,
            lr.offset,
        ];
        if values.iter().chain(self.task_weights.values()).any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(DistillError::Config("weights and learning rates must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn task_weight(&self, name: &str) -> f64 {
        self.task_weights.get(name).copied().unwrap_or(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Static Gaussians only, supervised on static pixels.
    Static,
    /// Scaffold translations under geometric regularizers.
    Geometric,
    /// Everything jointly on full frames.
    Dynamic,
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Stage::Static => "static",
            Stage::Geometric => "geometric",
            Stage::Dynamic => "dynamic",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub iteration: usize,
    pub stage: Stage,
    pub timestep: usize,
    pub photometric: f64,
    /// Task-weighted sum of per-task feature losses.
    pub feature: f64,
    pub tasks: Vec<f64>,
    pub arap: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub fidelity: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainReport {
    pub task_names: Vec<String>,
    pub records: Vec<LossRecord>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<(), csv::Error> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<String> =
            ["iteration", "stage", "timestep", "photometric", "feature"].iter().map(|s| s.to_string()).collect();
        header.extend(self.task_names.iter().map(|n| format!("feature_{n}")));
        header.extend(["arap", "velocity", "acceleration", "fidelity", "total"].iter().map(|s| s.to_string()));
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![r.iteration.to_string(), r.stage.to_string(), r.timestep.to_string()];
            row.push(r.photometric.to_string());
            row.push(r.feature.to_string());
            row.extend(r.tasks.iter().map(f64::to_string));
            for v in [r.arap, r.velocity, r.acceleration, r.fidelity, r.total] {
                row.push(v.to_string());
            }
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Records of one stage, in order.
    pub fn stage(&self, stage: Stage) -> impl Iterator<Item = &LossRecord> {
        self.records.iter().filter(move |r| r.stage == stage)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameLosses {
    pub photometric: f64,
    /// Unweighted per-task feature losses; zero when the feature path is off.
    pub tasks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameGrads {
    pub scene: SceneGrads,
    /// `None` for heads that received no gradient.
    pub decoders: Vec<Option<DecoderGrads>>,
}

fn task_mask(pixel_mask: &[bool], width: usize, height: usize, task: &TaskSpec) -> Result<Vec<bool>, DistillError> {
    let m = FeatureMap::from_data(width, height, 1, pixel_mask.iter().map(|b| f64::from(u8::from(*b))).collect())?;
    let r = resize(&m, task.width, task.height, ResizeMethod::Area)?;
    Ok(r.data.iter().map(|v| *v >= 1.0 - 1e-9).collect())
}

/// Loss and gradients for one frame under `stage` (static or dynamic).
///
/// Losses come back unweighted; gradients carry the photometric, feature
/// and per-task weights of `cfg`.
pub fn frame_objective(
    field: &FeatureField,
    camera: &CameraModel,
    timestep: usize,
    targets: &FrameTargets,
    stage: Stage,
    cfg: &TrainConfig,
) -> Result<(FrameLosses, FrameGrads), DistillError> {
    let d = field.scene.latent_dim;
    let list = match stage {
        Stage::Static => fuse(&field.scene.static_gaussians, &[], &field.graph)?,
        _ => field.render_list(timestep)?,
    };
    let raster = RasterConfig { record_contributions: true, ..cfg.raster.clone() };
    let out = rasterize(camera, &list, d, &raster)?;
    if !out.rgb.same_shape(&targets.rgb) {
        return Err(DistillError::MissingTarget { timestep, what: "rgb target shape".into() });
    }
    if targets.features.len() != field.heads.len() {
        return Err(DistillError::MissingTarget { timestep, what: "feature targets per task".into() });
    }
    let mask = match stage {
        Stage::Static => targets.static_mask.as_deref(),
        _ => None,
    };

    let (photometric, mut grad_rgb) = photometric_loss_masked(&out.rgb, &targets.rgb, mask)?;
    grad_rgb.data.iter_mut().for_each(|v| *v *= cfg.weights.photometric);

    let mut grad_feat = FeatureMap::zeros(out.width, out.height, d);
    let mut tasks = vec![0.0; field.heads.len()];
    let mut decoders = vec![None; field.heads.len()];
    if cfg.weights.feature > 0.0 {
        for (k, head) in field.heads.iter().enumerate() {
            let tw = cfg.task_weight(&head.task.name);
            if tw == 0.0 {
                continue;
            }
            let task = &head.task;
            let target = &targets.features[k];
            if (target.width, target.height, target.channels) != (task.width, task.height, task.dim) {
                return Err(DistillError::MissingTarget { timestep, what: format!("target shape for task {}", task.name) });
            }
            let small = resize(&out.feature, task.width, task.height, task.resize)?;
            let x = matrix_from_rows(small.pixel_count(), d, &small.data);
            let (y, cache) = head.decoder.forward_cached(&x)?;
            let decoded = FeatureMap::from_data(task.width, task.height, task.dim, matrix_to_rows(&y))?;
            let tmask = mask.map(|m| task_mask(m, out.width, out.height, task)).transpose()?;
            let (value, mut g) = feature_loss_masked(&decoded, target, tmask.as_deref())?;
            tasks[k] = value;
            let scale = cfg.weights.feature * tw;
            g.data.iter_mut().for_each(|v| *v *= scale);
            let (dg, gin) = head.decoder.backward(&cache, &matrix_from_rows(small.pixel_count(), task.dim, &g.data))?;
            let gin = FeatureMap::from_data(task.width, task.height, d, matrix_to_rows(&gin))?;
            let back = resize_adjoint(&gin, out.width, out.height, task.resize)?;
            for (a, b) in grad_feat.data.iter_mut().zip(&back.data) {
                *a += b;
            }
            decoders[k] = Some(dg);
        }
    }

    let mut splat = rasterize_backward(&list, &out, &grad_rgb, &grad_feat, raster.tile_size)?;
    if stage == Stage::Static {
        let extra = field.scene.dynamic_gaussians.len();
        splat.color.extend(std::iter::repeat_n(crate::se3::Vec3::zeros(), extra));
        splat.opacity_rgb.extend(std::iter::repeat_n(0.0, extra));
        splat.opacity_feature.extend(std::iter::repeat_n(0.0, extra));
        splat.feature.extend(std::iter::repeat_n(0.0, extra * d));
    }
    let scene = scene_backward(&field.scene, &field.graph, &splat)?;
    Ok((FrameLosses { photometric, tasks }, FrameGrads { scene, decoders }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub photometric: f64,
    /// Unweighted mean of per-task feature losses over frames.
    pub tasks: Vec<f64>,
    /// Sum of `tasks`.
    pub feature: f64,
}

/// Mean full-frame losses over every timestep, without gradients.
pub fn evaluate(
    field: &FeatureField,
    cameras: &[CameraModel],
    targets: &[FrameTargets],
    raster: &RasterConfig,
) -> Result<EvalSummary, DistillError> {
    if cameras.len() != targets.len() || cameras.is_empty() {
        return Err(DistillError::MissingTarget { timestep: 0, what: "one camera and target per frame".into() });
    }
    let cfg = RasterConfig { record_contributions: false, ..raster.clone() };
    let mut photometric = 0.0;
    let mut tasks = vec![0.0; field.heads.len()];
    for (t, (cam, tgt)) in cameras.iter().zip(targets).enumerate() {
        let out = field.render(cam, t, &cfg)?;
        photometric += photometric_loss_masked(&out.rgb, &tgt.rgb, None)?.0;
        for k in 0..field.heads.len() {
            let decoded = field.decode_map(k, &out.feature)?;
            let target = tgt
                .features
                .get(k)
                .ok_or_else(|| DistillError::MissingTarget { timestep: t, what: format!("task {k}") })?;
            tasks[k] += feature_loss_masked(&decoded, target, None)?.0;
        }
    }
    let n = cameras.len() as f64;
    tasks.iter_mut().for_each(|v| *v /= n);
    Ok(EvalSummary { photometric: photometric / n, feature: tasks.iter().sum(), tasks })
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

const LOGIT_LIMIT: f64 = 12.0;

struct DecoderOpt {
    weights: Vec<AdamState>,
    biases: Vec<AdamState>,
}

/// Parameter groups with their optimizer states.
struct Optimizer {
    colors: Vec<f64>,
    color_opt: AdamState,
    logits: Vec<f64>,
    logit_opt: AdamState,
    latent_opt: AdamState,
    base_opt: AdamState,
    offset_opt: AdamState,
    translation_opt: AdamState,
    decoders: Vec<DecoderOpt>,
}

impl Optimizer {
    fn new(field: &FeatureField, lr: &LearningRates) -> Self {
        let scene = &field.scene;
        let colors: Vec<f64> = scene.iter().flat_map(|g| g.color.iter().map(|c| c.clamp(0.0, 1.0))).collect::<Vec<_>>();
        let logits: Vec<f64> =
            scene.iter().map(|g| (g.opacity / (1.0 - g.opacity)).ln().clamp(-LOGIT_LIMIT, LOGIT_LIMIT)).collect();
        let d = scene.latent_dim;
        let decoders = field
            .heads
            .iter()
            .map(|h| DecoderOpt {
                weights: h
                    .decoder
                    .layers
                    .iter()
                    .map(|l| AdamState::new(l.weight.len(), AdamConfig::with_lr(lr.decoder)))
                    .collect(),
                biases: h
                    .decoder
                    .layers
                    .iter()
                    .map(|l| AdamState::new(l.bias.len(), AdamConfig::with_lr(lr.decoder)))
                    .collect(),
            })
            .collect();
        Self {
            color_opt: AdamState::new(colors.len(), AdamConfig::with_lr(lr.color)),
            colors,
            logit_opt: AdamState::new(logits.len(), AdamConfig::with_lr(lr.opacity)),
            logits,
            latent_opt: AdamState::new(scene.static_gaussians.len() * d, AdamConfig::with_lr(lr.feature)),
            base_opt: AdamState::new(field.graph.base_features.len(), AdamConfig::with_lr(lr.feature)),
            offset_opt: AdamState::new(scene.dynamic_gaussians.len() * field.graph.k, AdamConfig::with_lr(lr.offset)),
            translation_opt: AdamState::new(
                field.graph.node_count() * field.graph.timesteps() * 3,
                AdamConfig::with_lr(lr.scaffold),
            ),
            decoders,
        }
    }

    fn appearance(&mut self, field: &mut FeatureField, grads: &SceneGrads) -> Result<(), DistillError> {
        let gc: Vec<f64> = grads.color.iter().flat_map(|c| c.iter().copied()).collect();
        self.color_opt.step(&mut self.colors, &gc)?;
        self.colors.iter_mut().for_each(|c| *c = c.clamp(0.0, 1.0));
        let gl: Vec<f64> = self
            .logits
            .iter()
            .zip(grads.opacity_rgb.iter().zip(&grads.opacity_feature))
            .map(|(l, (a, b))| {
                let o = sigmoid(*l);
                (a + b) * o * (1.0 - o)
            })
            .collect();
        self.logit_opt.step(&mut self.logits, &gl)?;
        self.logits.iter_mut().for_each(|l| *l = l.clamp(-LOGIT_LIMIT, LOGIT_LIMIT));
        let scene = &mut field.scene;
        let ns = scene.static_gaussians.len();
        for (i, g) in scene.static_gaussians.iter_mut().chain(scene.dynamic_gaussians.iter_mut()).enumerate() {
            g.color = crate::se3::Vec3::new(self.colors[3 * i], self.colors[3 * i + 1], self.colors[3 * i + 2]);
            g.opacity = sigmoid(self.logits[i]);
        }
        debug_assert_eq!(ns * scene.latent_dim, grads.static_latent.len());
        Ok(())
    }

    fn static_latents(&mut self, field: &mut FeatureField, grads: &SceneGrads) -> Result<(), DistillError> {
        let d = field.scene.latent_dim;
        let mut flat = Vec::with_capacity(grads.static_latent.len());
        for g in &field.scene.static_gaussians {
            if let LatentSource::Owned(f) = &g.latent {
                flat.extend_from_slice(f);
            }
        }
        self.latent_opt.step(&mut flat, &grads.static_latent)?;
        for (i, g) in field.scene.static_gaussians.iter_mut().enumerate() {
            if let LatentSource::Owned(f) = &mut g.latent {
                f.copy_from_slice(&flat[i * d..(i + 1) * d]);
            }
        }
        Ok(())
    }

    fn scaffold_features(&mut self, field: &mut FeatureField, grads: &SceneGrads) -> Result<(), DistillError> {
        self.base_opt.step(&mut field.graph.base_features, &grads.base_features)?;
        let k = field.graph.k;
        let mut flat = Vec::with_capacity(grads.weight_offsets.len());
        for g in &field.scene.dynamic_gaussians {
            if let LatentSource::Scaffold { binding, .. } = &g.latent {
                flat.extend_from_slice(&binding.weight_offsets);
            }
        }
        self.offset_opt.step(&mut flat, &grads.weight_offsets)?;
        for (j, g) in field.scene.dynamic_gaussians.iter_mut().enumerate() {
            if let LatentSource::Scaffold { binding, .. } = &mut g.latent {
                binding.weight_offsets.copy_from_slice(&flat[j * k..(j + 1) * k]);
            }
        }
        field.scene.refresh_bindings(&field.graph)?;
        Ok(())
    }

    fn decoders(&mut self, field: &mut FeatureField, grads: &[Option<DecoderGrads>]) -> Result<(), DistillError> {
        for ((head, opt), g) in field.heads.iter_mut().zip(&mut self.decoders).zip(grads) {
            let Some(g) = g else { continue };
            for (l, layer) in head.decoder.layers.iter_mut().enumerate() {
                opt.weights[l].step(layer.weight.as_mut_slice(), g.layers[l].weight.as_slice())?;
                opt.biases[l].step(&mut layer.bias, &g.layers[l].bias)?;
            }
        }
        Ok(())
    }
}

fn check_finite(stage: Stage, iteration: usize, terms: &[(&str, f64)]) -> Result<(), DistillError> {
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(DistillError::NonFinite { stage: stage.to_string(), iteration, term: (*name).to_string() });
        }
    }
    Ok(())
}

/// Staged optimization: static appearance and latents, then scaffold
/// geometry, then everything jointly. Frames are visited round-robin.
pub fn train(
    field: &mut FeatureField,
    cameras: &[CameraModel],
    targets: &[FrameTargets],
    cfg: &TrainConfig,
) -> Result<TrainReport, DistillError> {
    cfg.validate()?;
    let frames = field.graph.timesteps();
    if cameras.len() != frames || targets.len() != frames {
        return Err(DistillError::MissingTarget {
            timestep: cameras.len().min(targets.len()),
            what: format!("{frames} frames need one camera and target each"),
        });
    }
    field.scene.validate(&field.graph)?;
    let names: Vec<String> = field.heads.iter().map(|h| h.task.name.clone()).collect();
    let mut report = TrainReport { task_names: names, records: Vec::new() };
    let mut opt = Optimizer::new(field, &cfg.learning_rates);
    let w = &cfg.weights;

    let feature_total = |losses: &FrameLosses, field: &FeatureField| -> f64 {
        losses.tasks.iter().zip(&field.heads).map(|(l, h)| l * cfg.task_weight(&h.task.name)).sum()
    };

    for it in 0..cfg.static_iterations {
        let t = it % frames;
        let (losses, grads) = frame_objective(field, &cameras[t], t, &targets[t], Stage::Static, cfg)?;
        let feature = feature_total(&losses, field);
        check_finite(Stage::Static, it, &[("photometric", losses.photometric), ("feature", feature)])?;
        opt.appearance(field, &grads.scene)?;
        opt.static_latents(field, &grads.scene)?;
        opt.decoders(field, &grads.decoders)?;
        report.records.push(LossRecord {
            iteration: it,
            stage: Stage::Static,
            timestep: t,
            photometric: losses.photometric,
            feature,
            tasks: losses.tasks,
            arap: 0.0,
            velocity: 0.0,
            acceleration: 0.0,
            fidelity: 0.0,
            total: w.photometric * losses.photometric + w.feature * feature,
        });
    }

    let initial = field.graph.translations_flat();
    for it in 0..cfg.geometric_iterations {
        let arap = arap_loss(&field.graph);
        let smooth = smoothness_losses(&field.graph);
        let mut flat = field.graph.translations_flat();
        let mut fidelity = 0.0;
        let mut grad = vec![0.0; flat.len()];
        for i in 0..flat.len() {
            let d = flat[i] - initial[i];
            fidelity += d * d;
            grad[i] = w.arap * arap.grad[i]
                + w.velocity * smooth.velocity.grad[i]
                + w.acceleration * smooth.acceleration.grad[i]
                + w.trajectory_fidelity * 2.0 * d;
        }
        check_finite(
            Stage::Geometric,
            it,
            &[
                ("arap", arap.value),
                ("velocity", smooth.velocity.value),
                ("acceleration", smooth.acceleration.value),
                ("fidelity", fidelity),
            ],
        )?;
        opt.translation_opt.step(&mut flat, &grad)?;
        field.graph.set_translations_flat(&flat)?;
        report.records.push(LossRecord {
            iteration: it,
            stage: Stage::Geometric,
            timestep: 0,
            photometric: 0.0,
            feature: 0.0,
            tasks: vec![0.0; field.heads.len()],
            arap: arap.value,
            velocity: smooth.velocity.value,
            acceleration: smooth.acceleration.value,
            fidelity,
            total: w.arap * arap.value
                + w.velocity * smooth.velocity.value
                + w.acceleration * smooth.acceleration.value
                + w.trajectory_fidelity * fidelity,
        });
    }
    if cfg.geometric_iterations > 0 {
        field.scene.refresh_bindings(&field.graph)?;
    }

    for it in 0..cfg.dynamic_iterations {
        let t = it % frames;
        let (losses, grads) = frame_objective(field, &cameras[t], t, &targets[t], Stage::Dynamic, cfg)?;
        let feature = feature_total(&losses, field);
        check_finite(Stage::Dynamic, it, &[("photometric", losses.photometric), ("feature", feature)])?;
        opt.appearance(field, &grads.scene)?;
        if w.feature > 0.0 {
            opt.static_latents(field, &grads.scene)?;
            opt.scaffold_features(field, &grads.scene)?;
            opt.decoders(field, &grads.decoders)?;
        }
        report.records.push(LossRecord {
            iteration: it,
            stage: Stage::Dynamic,
            timestep: t,
            photometric: losses.photometric,
            feature,
            tasks: losses.tasks,
            arap: 0.0,
            velocity: 0.0,
            acceleration: 0.0,
            fidelity: 0.0,
            total: w.photometric * losses.photometric + w.feature * feature,
        });
    }
    Ok(report)
}
