use super::*;
use crate::shapes;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn micro_config() -> TrainConfig {
    TrainConfig {
        noise_levels: vec![0.01],
        scales: vec![ScaleSpec::new(0.1), ScaleSpec::new(0.15)],
        patch_size: 8,
        encoder_widths: vec![4, 5],
        head_widths: vec![4],
        fusion_widths: vec![3],
        epochs: 1,
        batch_size: 4,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_noise_is_identity() {
    let c = shapes::sphere(200, 1);
    let n = add_gaussian_noise(&c, 0.0, 7).unwrap();
    assert_eq!(n.points(), c.points());
    assert!(n.normals().is_none());
}

#[test]
fn noise_has_requested_deviation() {
    let c = shapes::cube(10_000, 2);
    let diag = bbox_diagonal(&c).unwrap();
    let n = add_gaussian_noise(&c, 0.01, 3).unwrap();
    for axis in 0..3 {
        let d: Vec<f64> = n
            .points()
            .iter()
            .zip(c.points())
            .map(|(a, b)| a[axis] - b[axis])
            .collect();
        let mean = d.iter().sum::<f64>() / d.len() as f64;
        let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d.len() - 1) as f64;
        let sd = var.sqrt();
        assert!((sd / (0.01 * diag) - 1.0).abs() < 0.05, "axis {axis}: {sd}");
    }
    assert_eq!(add_gaussian_noise(&c, 0.01, 3).unwrap(), n);
    assert_ne!(add_gaussian_noise(&c, 0.01, 4).unwrap(), n);
    assert!(add_gaussian_noise(&c, -0.01, 3).is_err());
}

#[test]
fn dataset_cardinality_and_zero_noise() {
    let cfg = TrainConfig {
        noise_levels: vec![0.0],
        scales: vec![ScaleSpec::new(0.3)],
        patch_size: 400,
        ..TrainConfig::default()
    };
    let ds = build_dataset(&[shapes::plane(100, 5)], &cfg).unwrap();
    let samples: Vec<TrainSample> = ds.samples().collect::<Result<_>>().unwrap();
    assert_eq!(samples.len(), 100);
    for s in &samples {
        let k = s.patch.largest_scale();
        assert_eq!(s.clean.largest().points.as_slice(), s.patch.real_points(k));
    }
}

#[test]
fn dataset_is_deterministic() {
    let cfg = micro_config();
    let shapes = [shapes::sphere(300, 6)];
    let a: Vec<_> = build_dataset(&shapes, &cfg)
        .unwrap()
        .samples()
        .collect::<Result<_>>()
        .unwrap();
    let b: Vec<_> = build_dataset(&shapes, &cfg)
        .unwrap()
        .samples()
        .collect::<Result<_>>()
        .unwrap();
    assert_eq!(a, b);
    let ds = build_dataset(&shapes, &cfg).unwrap();
    assert_eq!(ds.epoch_keys(3, Some(50)), ds.epoch_keys(3, Some(50)));
    assert_ne!(ds.epoch_keys(3, Some(50)), ds.epoch_keys(4, Some(50)));
    assert_eq!(ds.epoch_keys(0, Some(50)).len(), 50);
}

#[test]
fn dataset_requires_normals() {
    let c = shapes::sphere(100, 1);
    let err = build_dataset(&[c.clone(), c.without_normals()], &micro_config()).unwrap_err();
    assert!(matches!(err, Error::MissingNormals(1)));
}

#[test]
fn schedule_is_exact() {
    let cfg = TrainConfig::default();
    let lrs: Vec<f64> = (0..25).map(|e| cfg.learning_rate(e)).collect();
    let expected = [1e-4, 1e-5, 1e-6, 1e-7, 1e-8];
    for (e, lr) in lrs.iter().enumerate() {
        assert_eq!(*lr, expected[e / 5], "epoch {e}");
    }
    assert_eq!(learning_rate(0.003, 1.0, 5, 17), 0.003);
}

#[test]
fn config_text_roundtrip() {
    let mut cfg = micro_config();
    cfg.patches_per_shape = None;
    cfg.denominator = Denominator::Center;
    let back = TrainConfig::from_text(&cfg.to_text()).unwrap();
    assert_eq!(back, cfg);
    let mut longer = cfg.clone();
    longer.epochs = 9;
    assert_eq!(longer.hash(), cfg.hash());
    longer.seed = 1;
    assert_ne!(longer.hash(), cfg.hash());
    assert!(TrainConfig::from_text("bogus=1").is_err());
    assert!(TrainConfig::from_text("lr").is_err());
    let c = TrainConfig::from_text("# comment\nlr = 0.5 # trailing\n\n").unwrap();
    assert_eq!(c.lr, 0.5);
}

#[test]
fn config_validation() {
    let ok = TrainConfig::default();
    assert!(ok.validate().is_ok());
    for bad in [
        TrainConfig {
            epochs: 0,
            ..ok.clone()
        },
        TrainConfig {
            lr: 0.0,
            ..ok.clone()
        },
        TrainConfig {
            lr_decay: 1.5,
            ..ok.clone()
        },
        TrainConfig {
            noise_levels: vec![0.02],
            ..ok.clone()
        },
        TrainConfig {
            eta: 2.0,
            ..ok.clone()
        },
        TrainConfig {
            scales: vec![],
            ..ok.clone()
        },
    ] {
        assert!(bad.validate().is_err(), "{bad:?}");
    }
}

#[test]
fn displacement_derivatives() {
    let n = Vector3::z();
    let flat: Vec<Vector3<f64>> = (0..6)
        .map(|i| Vector3::new(i as f64 * 0.1, 0.05, 0.2))
        .collect();
    let p = FilterParams::new(0.3, 0.2).unwrap();
    let (a, b) = d_delta_p_d_sigmas(&flat, &n, p).unwrap();
    assert!(a.abs() < 1e-15 && b.abs() < 1e-15);

    let two = [Vector3::new(0.1, 0.0, 0.05), Vector3::new(-0.3, 0.2, -0.1)];
    let (a, b) = d_delta_p_d_sigmas(&two, &n, p).unwrap();
    let delta = |sd: f64, sn: f64| {
        crate::filter::bilateral_displacement(
            &Vector3::zeros(),
            &two,
            &n,
            FilterParams::new(sd, sn).unwrap(),
        )
        .unwrap()
    };
    let h = 1e-6;
    let fd_a = (delta(0.3 + h, 0.2) - delta(0.3 - h, 0.2)) / (2.0 * h);
    let fd_b = (delta(0.3, 0.2 + h) - delta(0.3, 0.2 - h)) / (2.0 * h);
    assert!((a - fd_a).abs() <= 1e-7 * a.abs(), "{a} {fd_a}");
    assert!((b - fd_b).abs() <= 1e-7 * b.abs(), "{b} {fd_b}");

    let (a, b) = d_delta_p_d_sigmas(&two, &n, FilterParams::new(1e6, 1e6).unwrap()).unwrap();
    assert!(a.abs() < 1e-12 && b.abs() < 1e-12);
}

fn randomize_biases(model: &mut LbfModel, rng: &mut impl Rng) {
    for l in model.layers_mut() {
        for b in &mut l.bias {
            *b = rng.random_range(-0.5..0.5);
        }
    }
}

#[test]
fn chain_gradient_matches_finite_differences() {
    let cfg = micro_config();
    let ds = build_dataset(&[shapes::sphere(400, 8), shapes::cube(400, 9)], &cfg).unwrap();
    let samples: Vec<TrainSample> = ds.samples().collect::<Result<_>>().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let weights = cfg.loss_weights().unwrap();
    let h = 1e-6;
    let (mut trials, mut checked, mut skipped) = (0, 0usize, 0usize);
    while trials < 20 {
        let mut model = LbfModel::new_random(cfg.architecture(), rng.random()).unwrap();
        randomize_biases(&mut model, &mut rng);
        let sample = &samples[rng.random_range(0..samples.len())];
        let (step, grads) = chain_gradient(&model, sample, &weights).unwrap();
        let n_layers = grads.layers.len();
        for li in 0..n_layers {
            let count = grads.layers[li].weight.len() + grads.layers[li].bias.len();
            for pi in 0..count {
                let perturbed = |d: f64| {
                    let mut m = model.clone();
                    let layer = m.layers_mut().nth(li).unwrap();
                    let nw = layer.weight.len();
                    if pi < nw {
                        layer.weight[pi] += d;
                    } else {
                        layer.bias[pi - nw] += d;
                    }
                    chain_loss(&m, sample, &weights).unwrap()
                };
                let (plus, minus) = (perturbed(h), perturbed(-h));
                if plus.piece != step.piece || minus.piece != step.piece {
                    skipped += 1;
                    continue;
                }
                checked += 1;
                let fd = (plus.loss.total - minus.loss.total) / (2.0 * h);
                let g = &grads.layers[li];
                let an = if pi < g.weight.len() {
                    g.weight[pi]
                } else {
                    g.bias[pi - g.weight.len()]
                };
                let err = (fd - an).abs();
                assert!(
                    err <= 1e-7 || err <= 1e-4 * fd.abs().max(an.abs()),
                    "trial {trials} layer {li} param {pi}: analytic {an} fd {fd}"
                );
            }
        }
        trials += 1;
    }
    assert!(skipped * 20 < checked, "{skipped} skipped vs {checked}");
}

#[test]
fn adam_state_roundtrip() {
    let cfg = micro_config();
    let mut model = LbfModel::new_random(cfg.architecture(), 1).unwrap();
    let mut adam = Adam::new(&model);
    let mut g = Gradients::zeros_like(&model);
    for l in &mut g.layers {
        l.bias.iter_mut().for_each(|b| *b = 0.5);
    }
    adam.step(&mut model, &g, 1e-2);
    let back = Adam::from_bytes(&model, &adam.to_bytes()).unwrap();
    assert_eq!(back, adam);
    let mut bytes = adam.to_bytes();
    bytes.pop();
    assert!(Adam::from_bytes(&model, &bytes).is_err());
}

#[test]
fn adam_first_step_moves_by_lr() {
    let cfg = micro_config();
    let mut model = LbfModel::new_random(cfg.architecture(), 2).unwrap();
    let before = model.clone();
    let mut g = Gradients::zeros_like(&model);
    g.layers[0].bias[0] = 3.0;
    g.layers[0].bias[1] = -0.2;
    Adam::new(&model).step(&mut model, &g, 0.01);
    let (a, b) = (
        &model.layers().next().unwrap().bias,
        &before.layers().next().unwrap().bias,
    );
    assert!((b[0] - a[0] - 0.01).abs() < 1e-9);
    assert!((a[1] - b[1] - 0.01).abs() < 1e-9);
    assert_eq!(a[2], b[2]);
}

fn tiny_plane_config() -> TrainConfig {
    TrainConfig {
        noise_levels: vec![0.01],
        scales: vec![ScaleSpec::new(0.1), ScaleSpec::new(0.15)],
        patch_size: 32,
        encoder_widths: vec![8, 16],
        head_widths: vec![8],
        fusion_widths: vec![4],
        epochs: 3,
        batch_size: 8,
        lr: 3e-3,
        patches_per_shape: None,
        ..TrainConfig::default()
    }
}

#[test]
fn training_reduces_loss() {
    let cfg = tiny_plane_config();
    let ckpt = train(&[shapes::plane(200, 11)], &cfg, None).unwrap();
    assert_eq!(ckpt.log.len(), 3);
    assert!(ckpt.log.iter().all(|l| l.mean_loss.is_finite()));
    assert!(
        ckpt.log[2].mean_loss < ckpt.log[0].mean_loss,
        "{:?}",
        ckpt.log
    );
}

#[test]
fn checkpoints_are_deterministic_and_resumable() {
    let dir = tempfile::tempdir().unwrap();
    let shapes = [shapes::plane(200, 12)];
    let cfg = tiny_plane_config();
    let (a, b, c) = (
        dir.path().join("a.lbf"),
        dir.path().join("b.lbf"),
        dir.path().join("c.lbf"),
    );
    train(&shapes, &cfg, Some(&a)).unwrap();
    train(&shapes, &cfg, Some(&b)).unwrap();
    let short = TrainConfig {
        epochs: 1,
        ..cfg.clone()
    };
    train(&shapes, &short, Some(&c)).unwrap();
    let resumed = resume(&shapes, &cfg, &c).unwrap();
    assert_eq!(resumed.epochs_done, 3);
    for ext in [None, Some("meta"), Some("adam")] {
        let read =
            |p: &Path| std::fs::read(ext.map_or(p.to_path_buf(), |e| sidecar_path(p, e))).unwrap();
        assert_eq!(read(&a), read(&b), "{ext:?}");
        assert_eq!(read(&a), read(&c), "{ext:?}");
    }
    let loaded = Checkpoint::load(&a).unwrap();
    assert_eq!(loaded.config, cfg);
    assert_eq!(loaded.log.len(), 3);

    let other = TrainConfig { seed: 99, ..cfg };
    assert!(matches!(
        resume(&shapes, &other, &c),
        Err(Error::ConfigMismatch(_))
    ));
}
