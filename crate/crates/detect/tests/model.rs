use dsa_core::attention::AttentionVariant;
use dsa_core::FeatureMap;
use dsa_detect::config::{NmsConfig, Placement, ScoreMode};
use dsa_detect::model::{fpn_nodes, LevelOutputs};
use dsa_detect::{apply_dsa, build_toy_fpn, head_forward, Detector, DetectorConfig, HeadTask, LevelSet, ParamStore};
use dsa_scenes::{generate_scene, SceneConfig};

fn image(seed: u64) -> FeatureMap {
    generate_scene(
        &SceneConfig {
            seed,
            ..SceneConfig::default()
        },
        0,
    )
    .unwrap()
    .image
}

/// Keeps every candidate so detections are non-empty at initialization.
fn open_nms() -> NmsConfig {
    NmsConfig {
        score_floor: 0.0,
        ..NmsConfig::default()
    }
}

fn dsa_configs() -> Vec<DetectorConfig> {
    let mut out = Vec::new();
    for placement in [Placement::BeforeHead, Placement::AfterHead] {
        for variant in [AttentionVariant::SelfAttention, AttentionVariant::Cbam] {
            for shared in [false, true] {
                for levels in ["3-7", "4-7"] {
                    out.push(DetectorConfig {
                        placement,
                        variant,
                        shared,
                        dsa_levels: levels.parse().unwrap(),
                        with_confidence: true,
                        nms: open_nms(),
                        ..DetectorConfig::default()
                    });
                }
            }
        }
    }
    out
}

fn outputs_bitwise_eq(a: &[LevelOutputs], b: &[LevelOutputs]) -> bool {
    a.len() == b.len()
        && a.iter().zip(b).all(|(x, y)| {
            x.level == y.level
                && x.pyramid.bitwise_eq(&y.pyramid)
                && x.cls.bitwise_eq(&y.cls)
                && x.loc.bitwise_eq(&y.loc)
                && match (&x.conf, &y.conf) {
                    (Some(p), Some(q)) => p.bitwise_eq(q),
                    (None, None) => true,
                    _ => false,
                }
        })
}

#[test]
fn fresh_dsa_matches_baseline_bitwise() {
    let img = image(3);
    let base_cfg = DetectorConfig {
        with_confidence: true,
        nms: open_nms(),
        ..DetectorConfig::default()
    };
    let base = Detector::new(base_cfg, 11).unwrap();
    let base_out = base.forward(&img).unwrap();
    let base_dets = base.detect(&img).unwrap();
    assert!(!base_dets.is_empty());
    for cfg in dsa_configs() {
        let m = Detector::new(cfg.clone(), 11).unwrap();
        assert!(m.dsa_param_count() > 0);
        assert!(m.pyramid(&img).unwrap().bitwise_eq(&base.pyramid(&img).unwrap()));
        assert!(outputs_bitwise_eq(&m.forward(&img).unwrap(), &base_out), "{cfg:?}");
        let dets = m.detect(&img).unwrap();
        assert_eq!(dets.len(), base_dets.len());
        for (a, b) in dets.iter().zip(&base_dets) {
            assert_eq!(a.bbox.to_array().map(f64::to_bits), b.bbox.to_array().map(f64::to_bits));
            assert_eq!(a.class, b.class);
            assert_eq!(a.final_score.to_bits(), b.final_score.to_bits());
        }
    }
}

#[test]
fn decoupled_doubles_dsa_parameters() {
    for variant in [AttentionVariant::SelfAttention, AttentionVariant::Cbam] {
        let cfg = |shared| DetectorConfig {
            variant,
            shared,
            ..DetectorConfig::dsa()
        };
        let s = Detector::new(cfg(true), 0).unwrap().dsa_param_count();
        let d = Detector::new(cfg(false), 0).unwrap().dsa_param_count();
        assert_eq!(d, 2 * s);
    }
}

#[test]
fn shared_branches_give_equal_features() {
    let mut m = Detector::new(
        DetectorConfig {
            shared: true,
            ..DetectorConfig::dsa()
        },
        5,
    )
    .unwrap();
    m.params_mut().randomize(2, 0.3);
    for l in m.forward(&image(1)).unwrap() {
        assert!(l.cls_feature.bitwise_eq(&l.loc_feature));
    }
}

#[test]
fn level_outside_dsa_range_passes_through() {
    let mut m = Detector::new(DetectorConfig::dsa(), 5).unwrap();
    m.params_mut().randomize(2, 0.3);
    let out = m.forward(&image(1)).unwrap();
    let p3 = out.iter().find(|l| l.level == 3).unwrap();
    assert!(p3.cls_feature.bitwise_eq(&p3.pyramid));
    let p4 = out.iter().find(|l| l.level == 4).unwrap();
    assert!(!p4.cls_feature.bitwise_eq(&p4.pyramid));
    assert!(!p4.cls_feature.bitwise_eq(&p4.loc_feature));
}

#[test]
fn eager_dsa_matches_graph() {
    let mut m = Detector::new(
        DetectorConfig {
            dsa_levels: "3-7".parse().unwrap(),
            ..DetectorConfig::dsa()
        },
        8,
    )
    .unwrap();
    m.params_mut().randomize(4, 0.3);
    let img = image(2);
    let pyr = m.pyramid(&img).unwrap();
    let (cls, loc) = apply_dsa(&pyr, &m.dsa_modules().unwrap(), m.config()).unwrap();
    for l in m.forward(&img).unwrap() {
        assert!(cls.get(l.level).unwrap().bitwise_eq(&l.cls_feature), "level {}", l.level);
        assert!(loc.get(l.level).unwrap().bitwise_eq(&l.loc_feature), "level {}", l.level);
    }
}

#[test]
fn apply_dsa_rejects_level_mismatch() {
    let m = Detector::new(DetectorConfig::dsa(), 0).unwrap();
    let pyr = m.pyramid(&image(0)).unwrap();
    let mut modules = m.dsa_modules().unwrap();
    modules.pop();
    assert!(apply_dsa(&pyr, &modules, m.config()).is_err());
    let base = Detector::new(DetectorConfig::default(), 0).unwrap();
    let (c, l) = apply_dsa(&pyr, &[], base.config()).unwrap();
    assert!(c.bitwise_eq(&pyr) && l.bitwise_eq(&pyr));
}

#[test]
fn head_perturbation_is_isolated() {
    let cfg = DetectorConfig {
        with_confidence: true,
        ..DetectorConfig::dsa()
    };
    let mut m = Detector::new(cfg, 6).unwrap();
    m.params_mut().randomize(1, 0.3);
    let img = image(4);
    let before = m.forward(&img).unwrap();
    for task in [HeadTask::Cls, HeadTask::Loc, HeadTask::Conf] {
        let mut p = m.clone();
        let names: Vec<String> = p
            .params()
            .names()
            .filter(|n| n.starts_with(&format!("head.{}.", task.name())))
            .cloned()
            .collect();
        for n in names {
            for v in p.params_mut().get_mut(&n).unwrap().data_mut() {
                *v += 0.01;
            }
        }
        let after = p.forward(&img).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert_eq!(x.cls.bitwise_eq(&y.cls), task != HeadTask::Cls);
            assert_eq!(x.loc.bitwise_eq(&y.loc), task != HeadTask::Loc);
            assert_eq!(
                x.conf.as_ref().unwrap().bitwise_eq(y.conf.as_ref().unwrap()),
                task != HeadTask::Conf
            );
        }
    }
}

#[test]
fn decoupled_branch_perturbation_is_isolated() {
    let mut m = Detector::new(DetectorConfig::dsa(), 6).unwrap();
    m.params_mut().randomize(1, 0.3);
    let img = image(4);
    let before = m.forward(&img).unwrap();
    let names: Vec<String> = m.params().names().filter(|n| n.contains(".cls.")).cloned().collect();
    for n in names.iter().filter(|n| n.starts_with("dsa.")) {
        for v in m.params_mut().get_mut(n).unwrap().data_mut() {
            *v += 0.01;
        }
    }
    let after = m.forward(&img).unwrap();
    for (x, y) in before.iter().zip(&after) {
        assert!(x.loc.bitwise_eq(&y.loc));
        if x.level >= 4 {
            assert!(!x.cls.bitwise_eq(&y.cls));
        }
    }
}

#[test]
fn head_output_channels() {
    let m = Detector::new(
        DetectorConfig {
            with_confidence: true,
            ..DetectorConfig::default()
        },
        0,
    )
    .unwrap();
    let f = FeatureMap::filled(16, 3, 5, 0.1);
    for (task, c) in [(HeadTask::Cls, 12), (HeadTask::Loc, 12), (HeadTask::Conf, 3)] {
        let out = head_forward(&f, &m.head_params(task).unwrap()).unwrap();
        assert_eq!(out.dims(), (c, 3, 5));
    }
    let wrong = FeatureMap::filled(8, 3, 5, 0.1);
    assert!(head_forward(&wrong, &m.head_params(HeadTask::Cls).unwrap()).is_err());
}

#[test]
fn head_matches_graph_outputs() {
    let mut m = Detector::new(DetectorConfig::default(), 2).unwrap();
    m.params_mut().randomize(9, 0.3);
    for l in m.forward(&image(5)).unwrap() {
        let cls = head_forward(&l.cls_feature, &m.head_params(HeadTask::Cls).unwrap()).unwrap();
        assert!(cls.bitwise_eq(&l.cls));
    }
}

#[test]
fn pyramid_shapes_for_64() {
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    let p = m.pyramid(&image(0)).unwrap();
    let dims: Vec<_> = p.levels.iter().map(|l| (l.level, l.stride(), l.map.dims())).collect();
    assert_eq!(
        dims,
        vec![
            (3, 8, (16, 8, 8)),
            (4, 16, (16, 4, 4)),
            (5, 32, (16, 2, 2)),
            (6, 64, (16, 1, 1)),
            (7, 128, (16, 1, 1)),
        ]
    );
}

#[test]
fn pyramid_dims_are_ceil_of_stride() {
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    for (h, w) in [(72, 40), (8, 8), (24, 136)] {
        let p = build_toy_fpn(&FeatureMap::filled(3, h, w, 0.5), m.params()).unwrap();
        for l in &p.levels {
            let s = l.stride();
            assert_eq!(l.map.dims(), (16, h.div_ceil(s), w.div_ceil(s)));
        }
    }
}

#[test]
fn zero_image_gives_zero_pyramid() {
    let m = Detector::new(DetectorConfig::default(), 3).unwrap();
    let p = m.pyramid(&FeatureMap::zeros(3, 64, 64)).unwrap();
    assert!(p.levels.iter().all(|l| l.map.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn bad_images_rejected() {
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    assert!(m.pyramid(&FeatureMap::zeros(3, 60, 64)).is_err());
    assert!(m.pyramid(&FeatureMap::zeros(1, 64, 64)).is_err());
    assert!(m.detect(&FeatureMap::zeros(3, 4, 4)).is_err());
}

fn naive_conv(x: &FeatureMap, store: &ParamStore, prefix: &str, stride: usize, pad: usize) -> FeatureMap {
    let w = store.get(&format!("{prefix}.w")).unwrap();
    let b = store.get(&format!("{prefix}.b")).unwrap().data();
    let [o, i, k, _] = w.shape().try_into().unwrap();
    let (_, h, wd) = x.dims();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (wd + 2 * pad - k) / stride + 1;
    FeatureMap::from_fn(o, oh, ow, |oc, y, xx| {
        let mut s = b[oc];
        for ic in 0..i {
            for ky in 0..k {
                for kx in 0..k {
                    let iy = (y * stride + ky) as isize - pad as isize;
                    let ix = (xx * stride + kx) as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                        s += w.data()[((oc * i + ic) * k + ky) * k + kx] * x.get(ic, iy as usize, ix as usize);
                    }
                }
            }
        }
        s
    })
}

fn relu(f: FeatureMap) -> FeatureMap {
    let (c, h, w) = f.dims();
    FeatureMap::from_fn(c, h, w, |cc, y, x| f.get(cc, y, x).max(0.0))
}

#[test]
fn top_down_fusion_matches_hand_composition() {
    let mut m = Detector::new(DetectorConfig::default(), 4).unwrap();
    m.params_mut().randomize(3, 0.4);
    let s = m.params();
    let img = FeatureMap::from_fn(3, 40, 24, |c, y, x| ((c * 7 + y * 3 + x) % 11) as f64 / 11.0 - 0.4);
    let mut c = img.clone();
    let mut stages = Vec::new();
    for name in ["fpn.stem", "fpn.c2", "fpn.c3", "fpn.c4", "fpn.c5"] {
        c = relu(naive_conv(&c, s, name, 2, 1));
        stages.push(c.clone());
    }
    let p5 = naive_conv(&stages[4], s, "fpn.lat5", 1, 0);
    let lat4 = naive_conv(&stages[3], s, "fpn.lat4", 1, 0);
    let (ch, h4, w4) = lat4.dims();
    let p4 = FeatureMap::from_fn(ch, h4, w4, |cc, y, x| lat4.get(cc, y, x) + p5.get(cc, y / 2, x / 2));
    let lat3 = naive_conv(&stages[2], s, "fpn.lat3", 1, 0);
    let (_, h3, w3) = lat3.dims();
    let p3 = FeatureMap::from_fn(ch, h3, w3, |cc, y, x| lat3.get(cc, y, x) + p4.get(cc, y / 2, x / 2));
    let p6 = naive_conv(&stages[4], s, "fpn.p6", 2, 1);
    let p7 = naive_conv(&relu(p6.clone()), s, "fpn.p7", 2, 1);
    let got = m.pyramid(&img).unwrap();
    for (level, want) in [(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)] {
        let diff = got.get(level).unwrap().max_abs_diff(&want);
        assert!(diff < 1e-12, "P{level}: {diff}");
    }
}

#[test]
fn fpn_nodes_are_exposed_for_graph_use() {
    let m = Detector::new(DetectorConfig::default(), 0).unwrap();
    let mut g = dsa_core::CompGraph::new();
    let gp = m.params().register(&mut g);
    let x = g.leaf_fmap(image(0));
    assert_eq!(fpn_nodes(&mut g, &gp, x).unwrap().len(), 5);
}

#[test]
fn strided_level_uses_stride_kernel() {
    let m = Detector::new(
        DetectorConfig {
            dsa_levels: "3-7".parse().unwrap(),
            stride_kernel: dsa_core::attention::StrideKernel::K3,
            ..DetectorConfig::dsa()
        },
        0,
    )
    .unwrap();
    assert_eq!(m.params().get("dsa.p3.cls.wq.w").unwrap().shape(), &[16, 16, 3, 3]);
    assert_eq!(m.params().get("dsa.p4.cls.wq.w").unwrap().shape(), &[16, 16, 1, 1]);
    let recs = m.attention_records(&image(0)).unwrap();
    let p3 = recs.iter().find(|r| r.level == 3).unwrap();
    assert_eq!((p3.height, p3.width), (4, 4));
}

#[test]
fn product_score_needs_confidence() {
    let cfg = DetectorConfig {
        nms: NmsConfig {
            score_mode: ScoreMode::ClsTimesConf,
            ..NmsConfig::default()
        },
        ..DetectorConfig::default()
    };
    assert!(Detector::new(cfg, 0).is_err());
    assert!(LevelSet::new([2]).is_err());
}
