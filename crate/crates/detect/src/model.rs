//! Toy FPN, DSA placement and task heads, built on the autodiff graph.

use dsa_core::attention::{
    self, AttentionRecord, AttentionVariant, BranchNodes, BranchParams, BranchTrace, CbamNodes, CbamParams,
    ConvNodes, DsaBranches, DsaModuleParams, SelfAttentionNodes, SelfAttentionParams, Task,
};
use dsa_core::{CompGraph, ConvWeights, FeatureMap, NodeId};

use crate::anchors::{generate_anchors, level_dims, AnchorSet};
use crate::boxcode;
use crate::config::{DetectorConfig, GammaMode, Placement, PYRAMID_LEVELS};
use crate::error::{Error, Result};
use crate::nms::{final_score, nms, Detection};
use crate::params::{GraphParams, ParamStore};

/// Prior probability behind the cls/conf prediction bias `−ln((1−π)/π)`.
pub const PRIOR_PROB: f64 = 0.01;

pub fn prior_bias() -> f64 {
    -((1.0 - PRIOR_PROB) / PRIOR_PROB).ln()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HeadTask {
    Cls,
    Loc,
    Conf,
}

impl HeadTask {
    pub fn name(self) -> &'static str {
        match self {
            HeadTask::Cls => "cls",
            HeadTask::Loc => "loc",
            HeadTask::Conf => "conf",
        }
    }
}

fn dsa_prefix(level: u8, branch: &str) -> String {
    format!("dsa.p{level}.{branch}")
}

/// Checks that an image can pass through the toy FPN.
pub fn check_image(image: &FeatureMap) -> Result<()> {
    let (c, h, w) = image.dims();
    if c != 3 {
        return Err(Error::invalid(format!("image must have 3 channels, got {c}")));
    }
    if h < 8 || w < 8 || h % 8 != 0 || w % 8 != 0 {
        return Err(Error::invalid(format!(
            "image {h}x{w} rejected: both sides must be positive multiples of 8"
        )));
    }
    Ok(())
}

pub fn level_shapes(cfg_levels: &[u8], h: usize, w: usize) -> Vec<(u8, usize, usize)> {
    cfg_levels
        .iter()
        .map(|&l| {
            let (lh, lw) = level_dims(h, w, l);
            (l, lh, lw)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    pub level: u8,
    pub map: FeatureMap,
}

impl PyramidLevel {
    pub fn stride(&self) -> usize {
        1 << self.level
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<PyramidLevel>,
}

impl FeaturePyramid {
    pub fn get(&self, level: u8) -> Option<&FeatureMap> {
        self.levels.iter().find(|l| l.level == level).map(|l| &l.map)
    }

    pub fn bitwise_eq(&self, other: &FeaturePyramid) -> bool {
        self.levels.len() == other.levels.len()
            && self
                .levels
                .iter()
                .zip(&other.levels)
                .all(|(a, b)| a.level == b.level && a.map.bitwise_eq(&b.map))
    }
}

fn conv(g: &mut CompGraph, gp: &GraphParams, x: NodeId, prefix: &str, stride: usize, pad: usize) -> Result<NodeId> {
    let w = gp.id(&format!("{prefix}.w"))?;
    let b = gp.id(&format!("{prefix}.b"))?;
    Ok(g.conv2d(x, w, b, stride, pad)?)
}

fn conv_nodes(gp: &GraphParams, prefix: &str) -> Result<ConvNodes> {
    Ok(ConvNodes {
        weight: gp.id(&format!("{prefix}.w"))?,
        bias: gp.id(&format!("{prefix}.b"))?,
    })
}

/// Bottom-up stride-2 stack, lateral 1×1 fusion and the P6/P7 extensions.
/// Returns `(level, node)` for P3..P7.
pub fn fpn_nodes(g: &mut CompGraph, gp: &GraphParams, image: NodeId) -> Result<Vec<(u8, NodeId)>> {
    let mut x = image;
    let mut c = Vec::new();
    for name in ["fpn.stem", "fpn.c2", "fpn.c3", "fpn.c4", "fpn.c5"] {
        let y = conv(g, gp, x, name, 2, 1)?;
        x = g.relu(y);
        c.push(x);
    }
    let (c3, c4, c5) = (c[2], c[3], c[4]);
    let l3 = conv(g, gp, c3, "fpn.lat3", 1, 0)?;
    let l4 = conv(g, gp, c4, "fpn.lat4", 1, 0)?;
    let p5 = conv(g, gp, c5, "fpn.lat5", 1, 0)?;
    let top_down = |g: &mut CompGraph, lateral: NodeId, coarse: NodeId| -> Result<NodeId> {
        let shape = g.value(lateral).shape().to_vec();
        let up = g.upsample(coarse, 2)?;
        let up = g.crop(up, shape[1], shape[2])?;
        Ok(g.add(lateral, up)?)
    };
    let p4 = top_down(g, l4, p5)?;
    let p3 = top_down(g, l3, p4)?;
    let p6 = conv(g, gp, c5, "fpn.p6", 2, 1)?;
    let r6 = g.relu(p6);
    let p7 = conv(g, gp, r6, "fpn.p7", 2, 1)?;
    Ok(vec![(3, p3), (4, p4), (5, p5), (6, p6), (7, p7)])
}

fn head_trunk(g: &mut CompGraph, gp: &GraphParams, x: NodeId, task: HeadTask, depth: usize) -> Result<NodeId> {
    let mut x = x;
    for i in 0..depth {
        let y = conv(g, gp, x, &format!("head.{}.{i}", task.name()), 1, 0)?;
        x = g.relu(y);
    }
    Ok(x)
}

fn head_pred(g: &mut CompGraph, gp: &GraphParams, x: NodeId, task: HeadTask) -> Result<NodeId> {
    conv(g, gp, x, &format!("head.{}.pred", task.name()), 1, 0)
}

/// Per-level nodes of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct LevelNodes {
    pub level: u8,
    pub height: usize,
    pub width: usize,
    pub pyramid: NodeId,
    /// Output of the cls-branch DSA (the pyramid level where DSA is absent).
    pub cls_feature: NodeId,
    pub loc_feature: NodeId,
    pub cls: NodeId,
    pub loc: NodeId,
    pub conf: Option<NodeId>,
    pub traces: Option<(BranchTrace, BranchTrace)>,
}

pub struct Forward {
    pub graph: CompGraph,
    pub params: GraphParams,
    pub image: NodeId,
    pub levels: Vec<LevelNodes>,
}

/// Forward values of every level, read out of a [`Forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct LevelOutputs {
    pub level: u8,
    pub pyramid: FeatureMap,
    pub cls_feature: FeatureMap,
    pub loc_feature: FeatureMap,
    pub cls: FeatureMap,
    pub loc: FeatureMap,
    pub conf: Option<FeatureMap>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub trunk: Vec<ConvWeights>,
    pub pred: ConvWeights,
}

/// Runs a head (1×1 convs with ReLU, then the prediction layer) on one map.
pub fn head_forward(f: &FeatureMap, head: &HeadParams) -> Result<FeatureMap> {
    let mut g = CompGraph::new();
    let mut x = g.leaf_fmap(f.clone());
    for w in &head.trunk {
        let wn = ConvNodes::register(&mut g, w);
        let y = g.conv2d(x, wn.weight, wn.bias, 1, 0)?;
        x = g.relu(y);
    }
    let pn = ConvNodes::register(&mut g, &head.pred);
    let out = g.conv2d(x, pn.weight, pn.bias, 1, 0)?;
    Ok(g.fmap(out)?)
}

/// Applies per-level DSA modules to a pyramid. Levels without a module pass
/// through unchanged; modules must exist for exactly the configured levels.
pub fn apply_dsa(
    p: &FeaturePyramid,
    modules: &[DsaModuleParams],
    cfg: &DetectorConfig,
) -> Result<(FeaturePyramid, FeaturePyramid)> {
    let have: Vec<u8> = modules.iter().map(|m| m.level).collect();
    if have != cfg.active_dsa_levels() {
        return Err(Error::invalid(format!(
            "DSA modules for levels {have:?} but config expects {:?}",
            cfg.active_dsa_levels()
        )));
    }
    let mut cls = p.clone();
    let mut loc = p.clone();
    for m in modules {
        let idx = p
            .levels
            .iter()
            .position(|l| l.level == m.level)
            .ok_or_else(|| Error::invalid(format!("pyramid has no level {}", m.level)))?;
        let out = attention::dsa_forward(&p.levels[idx].map, m, false)?;
        cls.levels[idx].map = out.cls;
        loc.levels[idx].map = out.loc;
    }
    Ok((cls, loc))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    cfg: DetectorConfig,
    seed: u64,
    params: ParamStore,
}

impl Detector {
    pub fn new(cfg: DetectorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let params = init_params(&cfg, seed);
        Ok(Self { cfg, seed, params })
    }

    pub fn from_params(cfg: DetectorConfig, seed: u64, params: ParamStore) -> Result<Self> {
        let fresh = Self::new(cfg, seed)?;
        let want: Vec<(&String, &[usize])> = fresh.params.iter().map(|(n, t)| (n, t.shape())).collect();
        let got: Vec<(&String, &[usize])> = params.iter().map(|(n, t)| (n, t.shape())).collect();
        if want != got {
            return Err(Error::invalid("parameter names or shapes do not match the configuration"));
        }
        Ok(Self {
            cfg: fresh.cfg,
            seed,
            params,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn anchors(&self, h: usize, w: usize) -> AnchorSet {
        generate_anchors(&level_shapes(&PYRAMID_LEVELS, h, w), self.cfg.anchors_per_location)
    }

    /// Scalar count of all DSA parameters.
    pub fn dsa_param_count(&self) -> usize {
        self.params.count_with_prefix("dsa.")
    }

    pub fn head_params(&self, task: HeadTask) -> Result<HeadParams> {
        let trunk = (0..self.cfg.head_depth)
            .map(|i| self.params.conv(&format!("head.{}.{i}", task.name())))
            .collect::<Result<_>>()?;
        Ok(HeadParams {
            trunk,
            pred: self.params.conv(&format!("head.{}.pred", task.name()))?,
        })
    }

    fn branch_params(&self, level: u8, branch: &str) -> Result<BranchParams> {
        let prefix = dsa_prefix(level, branch);
        let gamma = self.params.get(&format!("{prefix}.gamma"))?.data()[0];
        Ok(match self.cfg.variant {
            AttentionVariant::SelfAttention => BranchParams::SelfAttention(SelfAttentionParams::new(
                self.params.conv(&format!("{prefix}.wq"))?,
                self.params.conv(&format!("{prefix}.wk"))?,
                self.params.conv(&format!("{prefix}.wv"))?,
                gamma,
                self.cfg.is_strided(level),
            )?),
            AttentionVariant::Cbam => {
                BranchParams::Cbam(CbamParams::new(self.params.conv(&format!("{prefix}.w7"))?, gamma)?)
            }
        })
    }

    /// Per-level DSA modules as standalone parameter sets.
    pub fn dsa_modules(&self) -> Result<Vec<DsaModuleParams>> {
        self.cfg
            .active_dsa_levels()
            .iter()
            .map(|&level| {
                let branches = if self.cfg.shared {
                    DsaBranches::Shared(self.branch_params(level, "shared")?)
                } else {
                    DsaBranches::Decoupled {
                        cls: self.branch_params(level, "cls")?,
                        loc: self.branch_params(level, "loc")?,
                    }
                };
                Ok(DsaModuleParams::new(level, branches)?)
            })
            .collect()
    }

    fn branch_nodes(&self, gp: &GraphParams, level: u8, branch: &str) -> Result<BranchNodes> {
        let prefix = dsa_prefix(level, branch);
        let gamma = gp.id(&format!("{prefix}.gamma"))?;
        Ok(match self.cfg.variant {
            AttentionVariant::SelfAttention => BranchNodes::SelfAttention(SelfAttentionNodes {
                wq: conv_nodes(gp, &format!("{prefix}.wq"))?,
                wk: conv_nodes(gp, &format!("{prefix}.wk"))?,
                wv: conv_nodes(gp, &format!("{prefix}.wv"))?,
                gamma,
                strided: self.cfg.is_strided(level),
            }),
            AttentionVariant::Cbam => BranchNodes::Cbam(CbamNodes {
                w7: conv_nodes(gp, &format!("{prefix}.w7"))?,
                gamma,
            }),
        })
    }

    /// DSA on a (cls input, loc input) pair for one level.
    fn dsa_pair(
        &self,
        g: &mut CompGraph,
        gp: &GraphParams,
        level: u8,
        cls_in: NodeId,
        loc_in: NodeId,
    ) -> Result<(BranchTrace, BranchTrace)> {
        if self.cfg.shared {
            let nodes = self.branch_nodes(gp, level, "shared")?;
            let ct = attention::branch_nodes(g, cls_in, &nodes)?;
            let lt = if loc_in == cls_in {
                ct
            } else {
                attention::branch_nodes(g, loc_in, &nodes)?
            };
            Ok((ct, lt))
        } else {
            let cn = self.branch_nodes(gp, level, "cls")?;
            let ln = self.branch_nodes(gp, level, "loc")?;
            let ct = attention::branch_nodes(g, cls_in, &cn)?;
            let lt = attention::branch_nodes(g, loc_in, &ln)?;
            Ok((ct, lt))
        }
    }

    /// Builds the full forward graph for one image.
    pub fn build(&self, image: &FeatureMap) -> Result<Forward> {
        check_image(image)?;
        let mut g = CompGraph::new();
        let gp = self.params.register(&mut g);
        let x = g.leaf_fmap(image.clone());
        let pyramid = fpn_nodes(&mut g, &gp, x)?;
        let depth = self.cfg.head_depth;
        let mut levels = Vec::with_capacity(pyramid.len());
        for (level, p) in pyramid {
            let shape = g.value(p).shape().to_vec();
            let active = self.cfg.active_dsa_levels().contains(&level);
            let mut traces = None;
            let (mut cls_feature, mut loc_feature) = (p, p);
            let (cls_trunk, loc_trunk) = match self.cfg.placement {
                Placement::BeforeHead if active => {
                    let (ct, lt) = self.dsa_pair(&mut g, &gp, level, p, p)?;
                    (cls_feature, loc_feature) = (ct.out, lt.out);
                    traces = Some((ct, lt));
                    (
                        head_trunk(&mut g, &gp, ct.out, HeadTask::Cls, depth)?,
                        head_trunk(&mut g, &gp, lt.out, HeadTask::Loc, depth)?,
                    )
                }
                Placement::AfterHead if active => {
                    let ci = head_trunk(&mut g, &gp, p, HeadTask::Cls, depth)?;
                    let li = head_trunk(&mut g, &gp, p, HeadTask::Loc, depth)?;
                    let (ct, lt) = self.dsa_pair(&mut g, &gp, level, ci, li)?;
                    (cls_feature, loc_feature) = (ct.out, lt.out);
                    traces = Some((ct, lt));
                    (ct.out, lt.out)
                }
                _ => (
                    head_trunk(&mut g, &gp, p, HeadTask::Cls, depth)?,
                    head_trunk(&mut g, &gp, p, HeadTask::Loc, depth)?,
                ),
            };
            let cls = head_pred(&mut g, &gp, cls_trunk, HeadTask::Cls)?;
            let loc = head_pred(&mut g, &gp, loc_trunk, HeadTask::Loc)?;
            let conf = if self.cfg.with_confidence {
                let input = if self.cfg.placement == Placement::BeforeHead { loc_feature } else { p };
                let t = head_trunk(&mut g, &gp, input, HeadTask::Conf, depth)?;
                Some(head_pred(&mut g, &gp, t, HeadTask::Conf)?)
            } else {
                None
            };
            levels.push(LevelNodes {
                level,
                height: shape[1],
                width: shape[2],
                pyramid: p,
                cls_feature,
                loc_feature,
                cls,
                loc,
                conf,
                traces,
            });
        }
        Ok(Forward {
            graph: g,
            params: gp,
            image: x,
            levels,
        })
    }

    pub fn pyramid(&self, image: &FeatureMap) -> Result<FeaturePyramid> {
        build_toy_fpn(image, &self.params)
    }

    pub fn forward(&self, image: &FeatureMap) -> Result<Vec<LevelOutputs>> {
        let fwd = self.build(image)?;
        fwd.outputs()
    }

    /// Attention records for every DSA branch (one per shared module).
    pub fn attention_records(&self, image: &FeatureMap) -> Result<Vec<AttentionRecord>> {
        let fwd = self.build(image)?;
        let g = &fwd.graph;
        let mut out = Vec::new();
        for l in &fwd.levels {
            let Some((ct, lt)) = &l.traces else { continue };
            let gamma = |branch: &str| -> Result<f64> {
                Ok(self.params.get(&format!("{}.gamma", dsa_prefix(l.level, branch)))?.data()[0])
            };
            if self.cfg.shared {
                out.push(AttentionRecord::from_trace(g, ct, l.level, Task::Cls, gamma("shared")?)?);
                if ct != lt {
                    out.push(AttentionRecord::from_trace(g, lt, l.level, Task::Loc, gamma("shared")?)?);
                }
            } else {
                out.push(AttentionRecord::from_trace(g, ct, l.level, Task::Cls, gamma("cls")?)?);
                out.push(AttentionRecord::from_trace(g, lt, l.level, Task::Loc, gamma("loc")?)?);
            }
        }
        Ok(out)
    }

    pub fn detect(&self, image: &FeatureMap) -> Result<Vec<Detection>> {
        let fwd = self.build(image)?;
        let (_, h, w) = image.dims();
        let anchors = self.anchors(h, w);
        detections_from(&fwd, &anchors, &self.cfg, w as f64, h as f64)
    }
}

impl Forward {
    pub fn outputs(&self) -> Result<Vec<LevelOutputs>> {
        let g = &self.graph;
        self.levels
            .iter()
            .map(|l| {
                Ok(LevelOutputs {
                    level: l.level,
                    pyramid: g.fmap(l.pyramid)?,
                    cls_feature: g.fmap(l.cls_feature)?,
                    loc_feature: g.fmap(l.loc_feature)?,
                    cls: g.fmap(l.cls)?,
                    loc: g.fmap(l.loc)?,
                    conf: l.conf.map(|c| g.fmap(c)).transpose()?,
                })
            })
            .collect()
    }
}

/// Eager toy FPN using the `fpn.*` parameters of `params`.
pub fn build_toy_fpn(image: &FeatureMap, params: &ParamStore) -> Result<FeaturePyramid> {
    check_image(image)?;
    let mut g = CompGraph::new();
    let gp = params.register(&mut g);
    let x = g.leaf_fmap(image.clone());
    let levels = fpn_nodes(&mut g, &gp, x)?
        .into_iter()
        .map(|(level, id)| {
            Ok(PyramidLevel {
                level,
                map: g.fmap(id)?,
            })
        })
        .collect::<Result<_>>()?;
    Ok(FeaturePyramid { levels })
}

fn sigmoid(z: f64) -> f64 {
    dsa_core::kernels::sigmoid(z)
}

/// Scores every anchor and class, decodes boxes, and runs per-class NMS.
pub fn detections_from(
    fwd: &Forward,
    anchors: &AnchorSet,
    cfg: &DetectorConfig,
    image_w: f64,
    image_h: f64,
) -> Result<Vec<Detection>> {
    let g = &fwd.graph;
    let k = cfg.classes;
    let a_per = cfg.anchors_per_location;
    let mut candidates = Vec::new();
    for (l, la) in fwd.levels.iter().zip(&anchors.levels) {
        let hw = l.height * l.width;
        let cls = g.value(l.cls).data();
        let loc = g.value(l.loc).data();
        let conf = l.conf.map(|c| g.value(c).data());
        for pos in 0..hw {
            for a in 0..a_per {
                let anchor = &la.anchors[pos * a_per + a];
                let conf_score = conf.map(|c| sigmoid(c[a * hw + pos]));
                let mut deltas = None;
                for class in 0..k {
                    let cls_score = sigmoid(cls[(a * k + class) * hw + pos]);
                    let score = final_score(cls_score, conf_score, cfg.nms.score_mode);
                    if score < cfg.nms.score_floor {
                        continue;
                    }
                    let d = *deltas.get_or_insert_with(|| {
                        [0, 1, 2, 3].map(|j| loc[(a * 4 + j) * hw + pos])
                    });
                    let bbox = boxcode::decode(anchor, &d, image_w, image_h);
                    if !bbox.is_valid() {
                        continue;
                    }
                    candidates.push(Detection {
                        bbox,
                        class,
                        cls_score,
                        conf_score,
                        final_score: score,
                    });
                }
            }
        }
    }
    let mut kept = nms(candidates, cfg.nms.iou_threshold);
    kept.truncate(cfg.nms.max_detections);
    Ok(kept)
}

/// Fresh parameters for `cfg`: uniform `±1/√fan_in` weights, zero biases
/// except the cls/conf prediction layers, DSA gammas 0 (learned) or 1 (fixed).
pub fn init_params(cfg: &DetectorConfig, seed: u64) -> ParamStore {
    let mut s = ParamStore::new();
    let c = cfg.channels;
    s.init_conv(seed, "fpn.stem", c, 3, 3, 0.0);
    for name in ["fpn.c2", "fpn.c3", "fpn.c4", "fpn.c5", "fpn.p6", "fpn.p7"] {
        s.init_conv(seed, name, c, c, 3, 0.0);
    }
    for name in ["fpn.lat3", "fpn.lat4", "fpn.lat5"] {
        s.init_conv(seed, name, c, c, 1, 0.0);
    }
    let a = cfg.anchors_per_location;
    let mut heads = vec![(HeadTask::Cls, a * cfg.classes, prior_bias()), (HeadTask::Loc, a * 4, 0.0)];
    if cfg.with_confidence {
        heads.push((HeadTask::Conf, a, prior_bias()));
    }
    for (task, out, bias) in heads {
        for i in 0..cfg.head_depth {
            s.init_conv(seed, &format!("head.{}.{i}", task.name()), c, c, 1, 0.0);
        }
        s.init_conv(seed, &format!("head.{}.pred", task.name()), out, c, 1, bias);
    }
    let gamma = match cfg.gamma_mode {
        GammaMode::Learned => 0.0,
        GammaMode::Fixed => 1.0,
    };
    let branches: &[&str] = if cfg.shared { &["shared"] } else { &["cls", "loc"] };
    for &level in cfg.active_dsa_levels() {
        for branch in branches {
            let prefix = dsa_prefix(level, branch);
            match cfg.variant {
                AttentionVariant::SelfAttention => {
                    let k = if cfg.is_strided(level) { cfg.stride_kernel.size() } else { 1 };
                    for proj in ["wq", "wk", "wv"] {
                        s.init_conv(seed, &format!("{prefix}.{proj}"), c, c, k, 0.0);
                    }
                }
                AttentionVariant::Cbam => s.init_conv(seed, &format!("{prefix}.w7"), 1, 2, 7, 0.0),
            }
            s.init_scalar(&format!("{prefix}.gamma"), gamma);
        }
    }
    s
}
