mod common;

use common::{camera, five_gaussian_field, five_gaussian_objective as objective, rel_err, tiny_spec};
use scaffold4d_core::distill::{evaluate, frame_objective, train, FeatureField, FrameTargets, Stage, TrainConfig};
use scaffold4d_core::scene::LatentSource;
use scaffold4d_core::worldgen::{generate, training_targets, SyntheticEncoder};

#[test]
fn loss_gradient_reaches_scaffold_features() {
    let (field, targets) = five_gaussian_field();
    for t in 0..2 {
        let (_, grads) = frame_objective(&field, &camera(8, 8), t, &targets, Stage::Dynamic, &TrainConfig::default()).unwrap();
        let mut checked = 0;
        for i in 0..field.graph.base_features.len() {
            let h = 1e-4;
            let mut plus = field.clone();
            plus.graph.base_features[i] += h;
            let mut minus = field.clone();
            minus.graph.base_features[i] -= h;
            let numeric = (objective(&plus, &targets, t) - objective(&minus, &targets, t)) / (2.0 * h);
            let analytic = grads.scene.base_features[i];
            assert!(rel_err(analytic, numeric) <= 1e-2, "h[{i}] at t={t}: analytic {analytic} numeric {numeric}");
            checked += usize::from(numeric.abs() > 1e-8);
        }
        assert!(checked > 0, "no scaffold feature influences the loss");
    }
}

#[test]
fn loss_gradient_reaches_static_latents_and_offsets() {
    let (field, targets) = five_gaussian_field();
    // At the source timestep the warp is the identity, so offsets act on features only.
    let (_, grads) = frame_objective(&field, &camera(8, 8), 0, &targets, Stage::Dynamic, &TrainConfig::default()).unwrap();
    let h = 1e-4;
    for (i, &analytic) in grads.scene.static_latent.iter().enumerate() {
        let bump = |s: f64| {
            let mut f = field.clone();
            if let LatentSource::Owned(v) = &mut f.scene.static_gaussians[i / 3].latent {
                v[i % 3] += s;
            }
            objective(&f, &targets, 0)
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        assert!(rel_err(analytic, numeric) <= 1e-2, "latent {i}: {analytic} vs {numeric}");
    }
    let k = field.graph.k;
    for (i, &analytic) in grads.scene.weight_offsets.iter().enumerate() {
        let bump = |s: f64| {
            let mut f = field.clone();
            if let LatentSource::Scaffold { binding, .. } = &mut f.scene.dynamic_gaussians[i / k].latent {
                binding.weight_offsets[i % k] += s;
            }
            f.scene.refresh_bindings(&f.graph).unwrap();
            objective(&f, &targets, 0)
        };
        let numeric = (bump(h) - bump(-h)) / (2.0 * h);
        assert!(rel_err(analytic, numeric) <= 1e-2, "offset {i}: {analytic} vs {numeric}");
    }
}

fn tiny_problem() -> (FeatureField, Vec<scaffold4d_core::scene::CameraModel>, Vec<FrameTargets>) {
    let spec = tiny_spec(2);
    let g = generate(&spec).unwrap();
    let enc = SyntheticEncoder::new(&g.ground_truth, &g.cameras);
    let targets = training_targets(&g.ground_truth, &enc, &g.cameras).unwrap();
    (FeatureField::new(g.scene, g.graph, &spec.tasks, 9), g.cameras, targets)
}

fn short_schedule() -> TrainConfig {
    TrainConfig { static_iterations: 12, geometric_iterations: 10, dynamic_iterations: 30, ..TrainConfig::default() }
}

#[test]
fn zero_iterations_leave_the_field_unchanged() {
    let (mut field, cams, targets) = tiny_problem();
    let before = field.clone();
    let cfg = TrainConfig { static_iterations: 0, geometric_iterations: 0, dynamic_iterations: 0, ..TrainConfig::default() };
    let report = train(&mut field, &cams, &targets, &cfg).unwrap();
    assert!(report.records.is_empty());
    assert_eq!(field, before);
}

#[test]
fn zero_feature_weight_matches_an_rgb_only_run() {
    let (field, cams, targets) = tiny_problem();
    let mut cfg = short_schedule();
    cfg.weights.feature = 0.0;

    let mut with_heads = field.clone();
    let a = train(&mut with_heads, &cams, &targets, &cfg).unwrap();

    let mut rgb_only = FeatureField { heads: Vec::new(), ..field.clone() };
    let bare: Vec<FrameTargets> = targets.iter().map(|t| FrameTargets { features: Vec::new(), ..t.clone() }).collect();
    let b = train(&mut rgb_only, &cams, &bare, &cfg).unwrap();

    let bits = |r: &scaffold4d_core::distill::TrainReport| r.records.iter().map(|x| x.photometric.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(with_heads.scene, rgb_only.scene);
    assert_eq!(with_heads.heads, field.heads, "decoders must not move without a feature loss");
}

#[test]
fn training_reduces_losses() {
    let (mut field, cams, targets) = tiny_problem();
    let cfg = TrainConfig { static_iterations: 30, geometric_iterations: 20, dynamic_iterations: 150, ..TrainConfig::default() };
    let before = evaluate(&field, &cams, &targets, &cfg.raster).unwrap();
    let report = train(&mut field, &cams, &targets, &cfg).unwrap();
    let after = evaluate(&field, &cams, &targets, &cfg.raster).unwrap();
    assert!(after.photometric < before.photometric);
    assert!(after.feature < before.feature);

    // Epoch-averaged dynamic-stage loss, smoothed over blocks of epochs.
    let totals: Vec<f64> = report.stage(Stage::Dynamic).map(|r| r.total).collect();
    let block = 10 * cams.len();
    let means: Vec<f64> = totals.chunks_exact(block).map(|c| c.iter().sum::<f64>() / block as f64).collect();
    for w in means.windows(2) {
        assert!(w[1] <= w[0] * 1.02, "smoothed loss rose: {means:?}");
    }

    let geo: Vec<f64> = report.stage(Stage::Geometric).map(|r| r.total).collect();
    assert!(geo.last().unwrap() <= geo.first().unwrap());
}

#[test]
fn loss_log_has_one_row_per_iteration() {
    let (mut field, cams, targets) = tiny_problem();
    let cfg = short_schedule();
    let report = train(&mut field, &cams, &targets, &cfg).unwrap();
    let mut buf = Vec::new();
    report.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 1 + 12 + 10 + 30);
    assert!(lines[0].starts_with("iteration,stage,timestep,photometric,feature,feature_clip,feature_sam"));
}
