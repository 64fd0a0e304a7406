//! Spatial attention for detector feature maps.
//!
//! Two attention kinds are provided:
//!
//! * **self attention**: three 1×1 projections produce query/key/value token
//!   matrices (`N = H·W` rows, `d_k = C` columns) and the output is
//!   `softmax(Q·Kᵀ/√d_k)·V` folded back to `C×H×W`. Every output position
//!   mixes every input position.
//! * **CBAM-style spatial gating**: a 7×7 conv over the channel max/mean maps
//!   yields a sigmoid mask that scales each position independently.
//!
//! Either kind is wrapped in a residual `out = f + γ·att` with `γ` starting at
//! zero, so a fresh module is the identity. A decoupled module owns one branch
//! per task (classification, localization); a shared module uses one branch
//! for both.
//!
//! Each operation has a graph builder (`*_nodes`) used for training, and an
//! eager wrapper that builds a throwaway graph and reads the result.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{CompGraph, NodeId};
use crate::tensor::{ConvWeights, FeatureMap, Matrix, Tensor};

/// Kernel used by the strided (reduced-resolution) query/key/value projections.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrideKernel {
    K1,
    K3,
}

impl StrideKernel {
    pub fn size(self) -> usize {
        match self {
            StrideKernel::K1 => 1,
            StrideKernel::K3 => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SelfAttentionParams {
    pub wq: ConvWeights,
    pub wk: ConvWeights,
    pub wv: ConvWeights,
    pub gamma: f64,
    /// Projections run at stride 2 and the result is upsampled back.
    pub strided: bool,
}

impl SelfAttentionParams {
    pub fn new(wq: ConvWeights, wk: ConvWeights, wv: ConvWeights, gamma: f64, strided: bool) -> Result<Self> {
        let p = Self {
            wq,
            wk,
            wv,
            gamma,
            strided,
        };
        p.validate()?;
        Ok(p)
    }

    /// Fresh parameters: projections uniform in `±1/√fan_in`, zero biases, `γ = 0`.
    pub fn init(channels: usize, stride_kernel: Option<StrideKernel>, rng: &mut impl Rng) -> Self {
        let k = stride_kernel.map_or(1, StrideKernel::size);
        Self {
            wq: ConvWeights::uniform_fan_in(channels, channels, k, rng),
            wk: ConvWeights::uniform_fan_in(channels, channels, k, rng),
            wv: ConvWeights::uniform_fan_in(channels, channels, k, rng),
            gamma: 0.0,
            strided: stride_kernel.is_some(),
        }
    }

    fn validate(&self) -> Result<()> {
        let c = self.wq.out_channels();
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.in_channels() != c || w.out_channels() != c {
                return Err(Error::invalid(
                    "self attention params",
                    format!(
                        "projections must map C→C with one C, got {}→{} (C = {c})",
                        w.in_channels(),
                        w.out_channels()
                    ),
                ));
            }
            if w.kernel_h() != self.wq.kernel_h() || w.kernel_w() != self.wq.kernel_w() {
                return Err(Error::invalid("self attention params", "projection kernels differ"));
            }
        }
        let k = self.wq.kernel_h();
        let ok = if self.strided { k == 1 || k == 3 } else { k == 1 };
        if !ok {
            return Err(Error::invalid(
                "self attention params",
                format!("kernel {k} not allowed (strided = {})", self.strided),
            ));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.wq.out_channels()
    }

    pub fn stride(&self) -> usize {
        if self.strided {
            2
        } else {
            1
        }
    }

    pub fn padding(&self) -> usize {
        self.wq.kernel_h() / 2
    }

    pub fn param_count(&self) -> usize {
        self.wq.param_count() + self.wk.param_count() + self.wv.param_count() + 1
    }

    pub fn register(&self, g: &mut CompGraph) -> SelfAttentionNodes {
        SelfAttentionNodes {
            wq: ConvNodes::register(g, &self.wq),
            wk: ConvNodes::register(g, &self.wk),
            wv: ConvNodes::register(g, &self.wv),
            gamma: g.leaf(Tensor::scalar(self.gamma)),
            strided: self.strided,
        }
    }
}

/// 7×7 spatial gate over `[max, mean]` channel pooling, shared by all channels.
#[derive(Debug, Clone, PartialEq)]
pub struct CbamParams {
    pub w7: ConvWeights,
    pub gamma: f64,
}

impl CbamParams {
    pub fn new(w7: ConvWeights, gamma: f64) -> Result<Self> {
        if w7.out_channels() != 1 || w7.in_channels() != 2 || w7.kernel_h() != 7 || w7.kernel_w() != 7 {
            return Err(Error::invalid(
                "cbam params",
                format!(
                    "expected 1×2×7×7 kernel, got {}×{}×{}×{}",
                    w7.out_channels(),
                    w7.in_channels(),
                    w7.kernel_h(),
                    w7.kernel_w()
                ),
            ));
        }
        Ok(Self { w7, gamma })
    }

    pub fn init(rng: &mut impl Rng) -> Self {
        Self {
            w7: ConvWeights::uniform_fan_in(1, 2, 7, rng),
            gamma: 0.0,
        }
    }

    pub fn param_count(&self) -> usize {
        self.w7.param_count() + 1
    }

    pub fn register(&self, g: &mut CompGraph) -> CbamNodes {
        CbamNodes {
            w7: ConvNodes::register(g, &self.w7),
            gamma: g.leaf(Tensor::scalar(self.gamma)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttentionVariant {
    SelfAttention,
    Cbam,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BranchParams {
    SelfAttention(SelfAttentionParams),
    Cbam(CbamParams),
}

impl BranchParams {
    pub fn variant(&self) -> AttentionVariant {
        match self {
            BranchParams::SelfAttention(_) => AttentionVariant::SelfAttention,
            BranchParams::Cbam(_) => AttentionVariant::Cbam,
        }
    }

    pub fn gamma(&self) -> f64 {
        match self {
            BranchParams::SelfAttention(p) => p.gamma,
            BranchParams::Cbam(p) => p.gamma,
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            BranchParams::SelfAttention(p) => p.param_count(),
            BranchParams::Cbam(p) => p.param_count(),
        }
    }

    pub fn register(&self, g: &mut CompGraph) -> BranchNodes {
        match self {
            BranchParams::SelfAttention(p) => BranchNodes::SelfAttention(p.register(g)),
            BranchParams::Cbam(p) => BranchNodes::Cbam(p.register(g)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DsaBranches {
    /// One parameter set serves both tasks.
    Shared(BranchParams),
    Decoupled { cls: BranchParams, loc: BranchParams },
}

/// Attention parameters for one pyramid level.
#[derive(Debug, Clone, PartialEq)]
pub struct DsaModuleParams {
    pub level: u8,
    pub branches: DsaBranches,
}

impl DsaModuleParams {
    pub fn new(level: u8, branches: DsaBranches) -> Result<Self> {
        if let DsaBranches::Decoupled { cls, loc } = &branches {
            if cls.variant() != loc.variant() {
                return Err(Error::invalid("dsa module", "cls and loc branches must use one variant"));
            }
        }
        Ok(Self { level, branches })
    }

    pub fn shared(&self) -> bool {
        matches!(self.branches, DsaBranches::Shared(_))
    }

    pub fn variant(&self) -> AttentionVariant {
        match &self.branches {
            DsaBranches::Shared(b) | DsaBranches::Decoupled { cls: b, .. } => b.variant(),
        }
    }

    pub fn cls(&self) -> &BranchParams {
        match &self.branches {
            DsaBranches::Shared(b) | DsaBranches::Decoupled { cls: b, .. } => b,
        }
    }

    pub fn loc(&self) -> &BranchParams {
        match &self.branches {
            DsaBranches::Shared(b) | DsaBranches::Decoupled { loc: b, .. } => b,
        }
    }

    pub fn loc_mut(&mut self) -> &mut BranchParams {
        match &mut self.branches {
            DsaBranches::Shared(b) | DsaBranches::Decoupled { loc: b, .. } => b,
        }
    }

    pub fn cls_mut(&mut self) -> &mut BranchParams {
        match &mut self.branches {
            DsaBranches::Shared(b) | DsaBranches::Decoupled { cls: b, .. } => b,
        }
    }

    pub fn param_count(&self) -> usize {
        match &self.branches {
            DsaBranches::Shared(b) => b.param_count(),
            DsaBranches::Decoupled { cls, loc } => cls.param_count() + loc.param_count(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvNodes {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl ConvNodes {
    pub fn register(g: &mut CompGraph, w: &ConvWeights) -> Self {
        Self {
            weight: g.leaf(w.weight_tensor()),
            bias: g.leaf(w.bias_tensor()),
        }
    }

    pub fn kernel(&self, g: &CompGraph) -> usize {
        g.value(self.weight).shape()[2]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttentionNodes {
    pub wq: ConvNodes,
    pub wk: ConvNodes,
    pub wv: ConvNodes,
    pub gamma: NodeId,
    pub strided: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CbamNodes {
    pub w7: ConvNodes,
    pub gamma: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchNodes {
    SelfAttention(SelfAttentionNodes),
    Cbam(CbamNodes),
}

impl BranchNodes {
    pub fn gamma(&self) -> NodeId {
        match self {
            BranchNodes::SelfAttention(p) => p.gamma,
            BranchNodes::Cbam(p) => p.gamma,
        }
    }
}

/// Graph nodes produced by one attention branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BranchTrace {
    /// Attention features before the residual.
    pub att: NodeId,
    /// `f + γ·att`.
    pub out: NodeId,
    /// Softmax weights (`N×N`) or the sigmoid mask (`1×H×W`).
    pub weights: NodeId,
    pub variant: AttentionVariant,
    /// Spatial grid the weights live on (reduced for the strided variant).
    pub grid: (usize, usize),
}

/// `softmax(q·kᵀ/√d_k)·v` on token matrices. Returns `(output, weights)`.
pub fn attention_nodes(g: &mut CompGraph, q: NodeId, k: NodeId, v: NodeId) -> Result<(NodeId, NodeId)> {
    let dk = match *g.value(q).shape() {
        [_, d] => d,
        _ => return Err(Error::invalid("scaled_dot_attention", "q must be a matrix")),
    };
    let scores = g.matmul_nt(q, k)?;
    let scaled = g.scale(scores, 1.0 / (dk as f64).sqrt());
    let weights = g.softmax_rows(scaled)?;
    let out = g.matmul(weights, v)?;
    Ok((out, weights))
}

/// Self-attention features for `f` (plain or strided per `p.strided`).
/// Returns `(att, weights, grid)`.
pub fn self_attention_nodes(
    g: &mut CompGraph,
    f: NodeId,
    p: &SelfAttentionNodes,
) -> Result<(NodeId, NodeId, (usize, usize))> {
    let (c, h, w) = match *g.value(f).shape() {
        [c, h, w] => (c, h, w),
        _ => return Err(Error::invalid("self attention", "input must be C×H×W")),
    };
    let proj_c = g.value(p.wq.weight).shape()[1];
    if proj_c != c {
        return Err(Error::shape("self attention", "channels", proj_c, c));
    }
    if p.strided && (h < 2 || w < 2) {
        return Err(Error::invalid(
            "strided self attention",
            format!("spatial dims {h}x{w} too small for stride-2 reduction"),
        ));
    }
    let stride = if p.strided { 2 } else { 1 };
    let pad = p.wq.kernel(g) / 2;
    let project = |g: &mut CompGraph, cn: &ConvNodes| -> Result<NodeId> {
        let m = g.conv2d(f, cn.weight, cn.bias, stride, pad)?;
        g.to_tokens(m)
    };
    let q = project(g, &p.wq)?;
    let k = project(g, &p.wk)?;
    let v = project(g, &p.wv)?;
    let (rh, rw) = if p.strided { (h.div_ceil(2), w.div_ceil(2)) } else { (h, w) };
    let (tokens, weights) = attention_nodes(g, q, k, v)?;
    let mut att = g.from_tokens(tokens, rh, rw)?;
    if p.strided {
        att = g.upsample(att, 2)?;
        att = g.crop(att, h, w)?;
    }
    Ok((att, weights, (rh, rw)))
}

/// CBAM spatial gate. Returns `(mask, f ⊗ mask)`.
pub fn cbam_nodes(g: &mut CompGraph, f: NodeId, p: &CbamNodes) -> Result<(NodeId, NodeId)> {
    let pooled = g.channel_pool(f)?;
    let logits = g.conv2d(pooled, p.w7.weight, p.w7.bias, 1, 3)?;
    let mask = g.sigmoid(logits);
    let out = g.mul_broadcast(f, mask)?;
    Ok((mask, out))
}

/// `f + γ·att`.
pub fn residual_nodes(g: &mut CompGraph, f: NodeId, att: NodeId, gamma: NodeId) -> Result<NodeId> {
    let scaled = g.scale_by(att, gamma)?;
    g.add(f, scaled)
}

pub fn branch_nodes(g: &mut CompGraph, f: NodeId, p: &BranchNodes) -> Result<BranchTrace> {
    let (att, weights, grid, variant) = match p {
        BranchNodes::SelfAttention(sa) => {
            let (att, w, grid) = self_attention_nodes(g, f, sa)?;
            (att, w, grid, AttentionVariant::SelfAttention)
        }
        BranchNodes::Cbam(cb) => {
            let (mask, att) = cbam_nodes(g, f, cb)?;
            let shape = g.value(f).shape();
            let grid = (shape[1], shape[2]);
            (att, mask, grid, AttentionVariant::Cbam)
        }
    };
    let out = residual_nodes(g, f, att, p.gamma())?;
    Ok(BranchTrace {
        att,
        out,
        weights,
        variant,
        grid,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Task {
    Cls,
    Loc,
}

impl Task {
    pub fn name(self) -> &'static str {
        match self {
            Task::Cls => "cls",
            Task::Loc => "loc",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum AttentionWeights {
    /// Row-stochastic `N×N` matrix.
    SelfAttention(Matrix),
    /// `1×H×W` sigmoid mask.
    CbamMask(FeatureMap),
}

/// Snapshot of one branch's attention taken during an inspected forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionRecord {
    pub level: u8,
    pub task: Task,
    pub weights: AttentionWeights,
    pub gamma: f64,
    /// Spatial grid of the weights (`N = height·width`).
    pub height: usize,
    pub width: usize,
}

impl AttentionRecord {
    pub fn from_trace(g: &CompGraph, trace: &BranchTrace, level: u8, task: Task, gamma: f64) -> Result<Self> {
        let weights = match trace.variant {
            AttentionVariant::SelfAttention => {
                AttentionWeights::SelfAttention(Matrix::try_from(g.value(trace.weights).clone())?)
            }
            AttentionVariant::Cbam => AttentionWeights::CbamMask(g.fmap(trace.weights)?),
        };
        Ok(Self {
            level,
            task,
            weights,
            gamma,
            height: trace.grid.0,
            width: trace.grid.1,
        })
    }
}

/// Query/key/value token matrices, all `N × d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

impl AttentionTensors {
    pub fn new(q: Matrix, k: Matrix, v: Matrix) -> Result<Self> {
        let t = Self { q, k, v };
        t.validate()?;
        Ok(t)
    }

    fn validate(&self) -> Result<()> {
        let (n, d) = (self.q.rows(), self.q.cols());
        if n == 0 || d == 0 {
            return Err(Error::invalid(
                "scaled_dot_attention",
                format!("empty attention input (N = {n}, d_k = {d})"),
            ));
        }
        for (name, m) in [("k", &self.k), ("v", &self.v)] {
            if m.rows() != n || m.cols() != d {
                return Err(Error::invalid(
                    "scaled_dot_attention",
                    format!("{name} is {}x{}, expected {n}x{d}", m.rows(), m.cols()),
                ));
            }
        }
        Ok(())
    }

    pub fn positions(&self) -> usize {
        self.q.rows()
    }

    pub fn depth(&self) -> usize {
        self.q.cols()
    }
}

/// Returns `(softmax(q·kᵀ/√d_k)·v, weights)`.
pub fn scaled_dot_attention_with_weights(t: &AttentionTensors) -> Result<(Matrix, Matrix)> {
    t.validate()?;
    let mut g = CompGraph::new();
    let q = g.leaf(t.q.clone().into());
    let k = g.leaf(t.k.clone().into());
    let v = g.leaf(t.v.clone().into());
    let (out, w) = attention_nodes(&mut g, q, k, v)?;
    Ok((
        Matrix::try_from(g.value(out).clone())?,
        Matrix::try_from(g.value(w).clone())?,
    ))
}

pub fn scaled_dot_attention(t: &AttentionTensors) -> Result<Matrix> {
    scaled_dot_attention_with_weights(t).map(|(out, _)| out)
}

/// Plain (full-resolution) self attention. With `capture`, also returns the
/// `N×N` weights as a record (level 0, cls task; callers relabel as needed).
pub fn self_attention_branch(
    f: &FeatureMap,
    p: &SelfAttentionParams,
    capture: bool,
) -> Result<(FeatureMap, Option<AttentionRecord>)> {
    if p.strided {
        return Err(Error::invalid(
            "self_attention_branch",
            "strided parameters; use strided_self_attention_branch",
        ));
    }
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let nodes = p.register(&mut g);
    let (att, weights, grid) = self_attention_nodes(&mut g, x, &nodes)?;
    let record = if capture {
        let trace = BranchTrace {
            att,
            out: att,
            weights,
            variant: AttentionVariant::SelfAttention,
            grid,
        };
        Some(AttentionRecord::from_trace(&g, &trace, 0, Task::Cls, p.gamma)?)
    } else {
        None
    };
    Ok((g.fmap(att)?, record))
}

/// Output of [`strided_self_attention_branch_inspect`].
#[derive(Debug, Clone, PartialEq)]
pub struct StridedAttention {
    pub att: FeatureMap,
    /// `N'×N'` weights with `N' = ⌈H/2⌉·⌈W/2⌉`.
    pub weights: Matrix,
    pub reduced: (usize, usize),
}

pub fn strided_self_attention_branch_inspect(f: &FeatureMap, p: &SelfAttentionParams) -> Result<StridedAttention> {
    if !p.strided {
        return Err(Error::invalid(
            "strided_self_attention_branch",
            "parameters are not strided",
        ));
    }
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let nodes = p.register(&mut g);
    let (att, weights, reduced) = self_attention_nodes(&mut g, x, &nodes)?;
    Ok(StridedAttention {
        att: g.fmap(att)?,
        weights: Matrix::try_from(g.value(weights).clone())?,
        reduced,
    })
}

/// Self attention computed at half resolution and recovered by nearest
/// upsampling (cropped back for odd sizes).
pub fn strided_self_attention_branch(f: &FeatureMap, p: &SelfAttentionParams) -> Result<FeatureMap> {
    strided_self_attention_branch_inspect(f, p).map(|s| s.att)
}

/// Returns `(mask, f ⊗ mask)`.
pub fn cbam_spatial_attention(f: &FeatureMap, p: &CbamParams) -> Result<(FeatureMap, FeatureMap)> {
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let nodes = p.register(&mut g);
    let (mask, out) = cbam_nodes(&mut g, x, &nodes)?;
    Ok((g.fmap(mask)?, g.fmap(out)?))
}

pub fn residual_combine(f: &FeatureMap, att: &FeatureMap, gamma: f64) -> Result<FeatureMap> {
    if f.dims() != att.dims() {
        return Err(Error::invalid(
            "residual_combine",
            format!("shape {:?} vs {:?}", f.dims(), att.dims()),
        ));
    }
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let a = g.leaf_fmap(att.clone());
    let s = g.leaf(Tensor::scalar(gamma));
    let out = residual_nodes(&mut g, x, a, s)?;
    g.fmap(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsaOutput {
    pub cls: FeatureMap,
    pub loc: FeatureMap,
    pub records: Vec<AttentionRecord>,
}

/// Graph form of [`dsa_forward`]: registers the module's parameters and returns
/// per-task traces. Shared modules return the same trace twice.
pub fn dsa_nodes(g: &mut CompGraph, f: NodeId, p: &DsaModuleParams) -> Result<(BranchTrace, BranchTrace)> {
    match &p.branches {
        DsaBranches::Shared(b) => {
            let nodes = b.register(g);
            let t = branch_nodes(g, f, &nodes)?;
            Ok((t, t))
        }
        DsaBranches::Decoupled { cls, loc } => {
            let cn = cls.register(g);
            let ln = loc.register(g);
            let ct = branch_nodes(g, f, &cn)?;
            let lt = branch_nodes(g, f, &ln)?;
            Ok((ct, lt))
        }
    }
}

pub fn dsa_forward(f: &FeatureMap, p: &DsaModuleParams, capture: bool) -> Result<DsaOutput> {
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let (ct, lt) = dsa_nodes(&mut g, x, p)?;
    let mut records = Vec::new();
    if capture {
        records.push(AttentionRecord::from_trace(&g, &ct, p.level, Task::Cls, p.cls().gamma())?);
        if !p.shared() {
            records.push(AttentionRecord::from_trace(&g, &lt, p.level, Task::Loc, p.loc().gamma())?);
        }
    }
    Ok(DsaOutput {
        cls: g.fmap(ct.out)?,
        loc: g.fmap(lt.out)?,
        records,
    })
}
