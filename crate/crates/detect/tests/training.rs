use dsa_core::FeatureMap;
use dsa_detect::checkpoint;
use dsa_detect::config::GammaMode;
use dsa_detect::loss::build_targets;
use dsa_detect::train::{image_gradients, image_loss};
use dsa_detect::{evaluate_ap, train, Detector, DetectorConfig, Error, LossConfig, TrainConfig, Trainer};
use dsa_scenes::{generate_scene, BBox, GroundTruth, Scene, SceneConfig};

fn scenes(n: usize, seed: u64) -> Vec<Scene> {
    let cfg = SceneConfig {
        seed,
        ..SceneConfig::default()
    };
    (0..n).map(|i| generate_scene(&cfg, i).unwrap()).collect()
}

fn tc(epochs: usize, lr: f64) -> TrainConfig {
    TrainConfig {
        epochs,
        lr,
        batch_size: 2,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_lr_leaves_parameters_unchanged() {
    let data = scenes(4, 1);
    let mut m = Detector::new(DetectorConfig::dsa(), 3).unwrap();
    let before = m.params().clone();
    train(&mut m, &data, &tc(1, 0.0), &LossConfig::default(), |_, _, _| Ok(())).unwrap();
    for ((n, a), (_, b)) in before.iter().zip(m.params().iter()) {
        assert!(a.bitwise_eq(b), "{n} moved");
    }
}

#[test]
fn small_step_descends() {
    let data = scenes(3, 2);
    let loss_cfg = LossConfig::default();
    for cfg in [DetectorConfig::default(), DetectorConfig::dsa()] {
        let mut m = Detector::new(cfg, 4).unwrap();
        let mut t = Trainer::new(&m, &data[..1], tc(1, 1e-4), loss_cfg.clone()).unwrap();
        let target = t.targets()[0].clone();
        let before = image_loss(&m, &data[0].image, &target, &loss_cfg).unwrap().total;
        t.step(&mut m, &data[..1], &[0], 1e-4).unwrap();
        let after = image_loss(&m, &data[0].image, &target, &loss_cfg).unwrap().total;
        assert!(after < before, "{after} >= {before}");
    }
}

fn micro_config() -> DetectorConfig {
    DetectorConfig {
        image_size: 32,
        channels: 2,
        classes: 2,
        anchors_per_location: 1,
        head_depth: 1,
        dsa_levels: "3-7".parse().unwrap(),
        with_confidence: true,
        ..DetectorConfig::dsa()
    }
}

#[test]
fn micro_model_gradient_matches_finite_differences() {
    let img = FeatureMap::from_fn(3, 32, 32, |c, y, x| (((c + 1) * (y * 5 + x * 3)) % 17) as f64 / 17.0 - 0.3);
    let gts = [GroundTruth {
        bbox: BBox::new(4.0, 6.0, 30.0, 28.0),
        class: 1,
    }];
    let loss_cfg = LossConfig::default();
    let mut m = Detector::new(micro_config(), 7).unwrap();
    m.params_mut().randomize(5, 0.5);
    let anchors = m.anchors(32, 32);
    let targets = build_targets(&anchors, &gts, 2, &loss_cfg).unwrap();
    assert!(targets.num_pos > 0);
    let (loss, grads) = image_gradients(&m, &img, &targets, &loss_cfg).unwrap();
    assert!(loss.confidence > 0.0 && loss.box_loss > 0.0);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let names: Vec<String> = m.params().names().cloned().collect();
    for name in names {
        let n = m.params().get(&name).unwrap().numel();
        for i in 0..n {
            let v = m.params().get(&name).unwrap().data()[i];
            let h = 1e-5 * v.abs().max(1.0);
            let eval = |x: f64| {
                let mut p = m.clone();
                p.params_mut().get_mut(&name).unwrap().data_mut()[i] = x;
                image_loss(&p, &img, &targets, &loss_cfg).unwrap().total
            };
            let numeric = (eval(v + h) - eval(v - h)) / (2.0 * h);
            let analytic = grads[&name].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
            assert!(rel < 1e-4, "{name}[{i}]: analytic {analytic} numeric {numeric}");
            worst = worst.max(rel);
            checked += 1;
        }
    }
    println!("checked {checked} parameters, max relative error {worst:.3e}");
    assert!(checked > 100);
}

#[test]
fn same_seed_same_run() {
    let data = scenes(6, 3);
    let val = scenes(3, 4);
    let run = || {
        let mut m = Detector::new(DetectorConfig::dsa(), 9).unwrap();
        let mut metrics = Vec::new();
        let trace = train(&mut m, &data, &tc(2, 0.01), &LossConfig::default(), |_, m, _| {
            metrics.push(evaluate_ap(m, &val)?.values().map(f64::to_bits));
            Ok(())
        })
        .unwrap();
        (trace.digest(), metrics, checkpoint::encode(m.params()))
    };
    let a = run();
    let b = run();
    assert_eq!(a, b);
}

#[test]
fn shuffle_depends_on_seed() {
    let data = scenes(20, 1);
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    let t = |seed| {
        Trainer::new(
            &m,
            &data,
            TrainConfig {
                seed,
                ..TrainConfig::default()
            },
            LossConfig::default(),
        )
        .unwrap()
    };
    assert_eq!(t(1).order(0), t(1).order(0));
    assert_ne!(t(1).order(0), t(2).order(0));
    assert_ne!(t(1).order(0), t(1).order(1));
}

#[test]
fn fixed_gamma_stays_frozen() {
    let data = scenes(2, 5);
    let cfg = DetectorConfig {
        gamma_mode: GammaMode::Fixed,
        ..DetectorConfig::dsa()
    };
    let mut m = Detector::new(cfg, 1).unwrap();
    train(&mut m, &data, &tc(1, 0.05), &LossConfig::default(), |_, _, _| Ok(())).unwrap();
    let mut learned = Detector::new(DetectorConfig::dsa(), 1).unwrap();
    train(&mut learned, &data, &tc(1, 0.05), &LossConfig::default(), |_, _, _| Ok(())).unwrap();
    let mut moved = 0;
    for (n, t) in m.params().iter().filter(|(n, _)| n.ends_with(".gamma")) {
        assert_eq!(t.data()[0], 1.0, "{n}");
        if learned.params().get(n).unwrap().data()[0] != 0.0 {
            moved += 1;
        }
    }
    assert!(moved > 0);
}

#[test]
fn non_finite_loss_names_the_step() {
    let data = scenes(3, 6);
    let mut m = Detector::new(DetectorConfig::default(), 2).unwrap();
    m.params_mut().get_mut("head.cls.pred.b").unwrap().data_mut()[0] = f64::NAN;
    let err = train(&mut m, &data, &tc(1, 0.01), &LossConfig::default(), |_, _, _| Ok(())).unwrap_err();
    match err {
        Error::NonFiniteLoss { epoch, step, .. } => assert_eq!((epoch, step), (0, 0)),
        other => panic!("unexpected {other}"),
    }
    assert!(err_text(&data).contains("step 0"));
}

fn err_text(data: &[Scene]) -> String {
    let mut m = Detector::new(DetectorConfig::default(), 2).unwrap();
    m.params_mut().get_mut("fpn.stem.w").unwrap().data_mut()[0] = f64::INFINITY;
    train(&mut m, data, &tc(1, 0.01), &LossConfig::default(), |_, _, _| Ok(()))
        .unwrap_err()
        .to_string()
}

#[test]
fn confidence_loss_at_zero_logits_is_ln2_per_anchor() {
    let cfg = DetectorConfig {
        with_confidence: true,
        ..DetectorConfig::default()
    };
    let mut m = Detector::new(cfg, 0).unwrap();
    for n in ["head.conf.pred.w", "head.conf.pred.b"] {
        m.params_mut().get_mut(n).unwrap().data_mut().fill(0.0);
    }
    let s = &scenes(1, 8)[0];
    let loss_cfg = LossConfig::default();
    let t = build_targets(&m.anchors(64, 64), &s.gts, 4, &loss_cfg).unwrap();
    let counted = t
        .levels
        .iter()
        .flat_map(|l| &l.conf)
        .filter(|c| **c != dsa_core::BinaryTarget::Ignore)
        .count();
    let loss = image_loss(&m, &s.image, &t, &loss_cfg).unwrap();
    let want = counted as f64 * std::f64::consts::LN_2 / t.norm();
    assert!((loss.confidence - want).abs() < 1e-12 * want);
    assert!(loss.focal >= 0.0 && loss.box_loss >= 0.0);
    assert!((loss.total - (loss.focal + loss.box_loss + loss.confidence)).abs() < 1e-12);

    let off = Detector::new(DetectorConfig::default(), 0).unwrap();
    assert_eq!(image_loss(&off, &s.image, &t, &loss_cfg).unwrap().confidence, 0.0);
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    let mut m = Detector::new(DetectorConfig::dsa(), 4).unwrap();
    m.params_mut().randomize(2, 0.2);
    checkpoint::save(&path, &m).unwrap();
    let back = checkpoint::load(&path, DetectorConfig::dsa(), 4).unwrap();
    assert_eq!(back.params(), m.params());
    let img = &scenes(1, 2)[0].image;
    assert_eq!(back.detect(img).unwrap(), m.detect(img).unwrap());
    let err = checkpoint::load(&path, DetectorConfig::default(), 4).unwrap_err().to_string();
    assert!(err.contains("model.ckpt"), "{err}");
    assert!(checkpoint::load(&dir.path().join("missing"), DetectorConfig::dsa(), 4).is_err());
}

#[test]
fn empty_sets_rejected() {
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    assert!(evaluate_ap(&m, &[]).is_err());
    assert!(Trainer::new(&m, &[], TrainConfig::default(), LossConfig::default()).is_err());
}
