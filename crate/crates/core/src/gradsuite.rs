//! Finite-difference checks for every differentiable primitive and the
//! attention branches built from them. Each case runs on several random small
//! instances (all dims ≤ 4) and reports its worst probe.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, BranchNodes, CbamNodes, ConvNodes, SelfAttentionNodes};
use crate::error::Result;
use crate::gradcheck::{gradient_check_subset, GradCheckConfig, GradCheckReport};
use crate::graph::{BinaryTarget, CompGraph, NodeId};
use crate::tensor::Tensor;

type BuildFn = Box<dyn Fn(&mut CompGraph, &[NodeId]) -> Result<NodeId>>;

/// One random instance: the differentiable inputs and the graph that consumes them.
pub struct Instance {
    pub inputs: Vec<Tensor>,
    pub build: BuildFn,
    /// Inputs whose gradient is identically zero; excluded from probing.
    pub unprobed: Vec<usize>,
}

pub struct Case {
    pub name: &'static str,
    pub make: fn(&mut ChaCha8Rng) -> Instance,
}

#[derive(Debug, Clone, Copy)]
pub struct SuiteConfig {
    pub instances: usize,
    pub check: GradCheckConfig,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            instances: 20,
            check: GradCheckConfig::default(),
        }
    }
}

fn dim(rng: &mut ChaCha8Rng, lo: usize) -> usize {
    rng.random_range(lo..=4)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    Tensor::random_uniform(shape, 1.0, rng)
}

fn conv_instance(rng: &mut ChaCha8Rng, kernel: usize, stride: usize, pad: usize) -> Instance {
    let (c, o) = (dim(rng, 1), dim(rng, 1));
    let (h, w) = (dim(rng, 1), dim(rng, 1));
    Instance {
        inputs: vec![
            rand_t(rng, vec![c, h, w]),
            rand_t(rng, vec![o, c, kernel, kernel]),
            rand_t(rng, vec![o]),
        ],
        unprobed: vec![],
        build: Box::new(move |g, l| g.conv2d(l[0], l[1], l[2], stride, pad)),
    }
}

fn attention_nodes_from(l: &[NodeId], strided: bool) -> SelfAttentionNodes {
    SelfAttentionNodes {
        wq: ConvNodes { weight: l[1], bias: l[2] },
        wk: ConvNodes { weight: l[3], bias: l[4] },
        wv: ConvNodes { weight: l[5], bias: l[6] },
        gamma: l[7],
        strided,
    }
}

/// Index of the key-projection bias in [`attention_inputs`]. Adding a constant
/// to every key shifts each score row uniformly, so its gradient is zero.
pub const KEY_BIAS: usize = 4;

fn attention_inputs(rng: &mut ChaCha8Rng, kernel: usize, min_hw: usize) -> Vec<Tensor> {
    let c = dim(rng, 1);
    let (h, w) = (dim(rng, min_hw), dim(rng, min_hw));
    let mut inputs = vec![rand_t(rng, vec![c, h, w])];
    for _ in 0..3 {
        inputs.push(rand_t(rng, vec![c, c, kernel, kernel]));
        inputs.push(rand_t(rng, vec![c]));
    }
    inputs.push(rand_t(rng, vec![1]));
    inputs
}

fn binary_targets(rng: &mut ChaCha8Rng, n: usize) -> Vec<BinaryTarget> {
    (0..n)
        .map(|_| match rng.random_range(0..3) {
            0 => BinaryTarget::Positive,
            1 => BinaryTarget::Negative,
            _ => BinaryTarget::Ignore,
        })
        .collect()
}

fn normalizer(t: &[BinaryTarget]) -> f64 {
    t.iter().filter(|&&x| x == BinaryTarget::Positive).count().max(1) as f64
}

pub fn primitive_cases() -> Vec<Case> {
    vec![
        Case {
            name: "conv2d 1x1 s1",
            make: |r| conv_instance(r, 1, 1, 0),
        },
        Case {
            name: "conv2d 1x1 s2",
            make: |r| conv_instance(r, 1, 2, 0),
        },
        Case {
            name: "conv2d 3x3 s2 p1",
            make: |r| conv_instance(r, 3, 2, 1),
        },
        Case {
            name: "conv2d 7x7 s1 p3",
            make: |r| conv_instance(r, 7, 1, 3),
        },
        Case {
            name: "channel_pool_concat",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                Instance {
                    inputs: vec![rand_t(r, s)],
                    unprobed: vec![],
                    build: Box::new(|g, l| g.channel_pool(l[0])),
                }
            },
        },
        Case {
            name: "softmax_rows",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1)];
                let mut t = rand_t(r, s);
                t.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                Instance {
                    inputs: vec![t],
                    unprobed: vec![],
                    build: Box::new(|g, l| g.softmax_rows(l[0])),
                }
            },
        },
        Case {
            name: "sigmoid_map",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                let mut t = rand_t(r, s);
                t.data_mut().iter_mut().for_each(|v| *v *= 4.0);
                Instance {
                    inputs: vec![t],
                    unprobed: vec![],
                    build: Box::new(|g, l| Ok(g.sigmoid(l[0]))),
                }
            },
        },
        Case {
            name: "relu",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                Instance {
                    inputs: vec![rand_t(r, s)],
                    unprobed: vec![],
                    build: Box::new(|g, l| Ok(g.relu(l[0]))),
                }
            },
        },
        Case {
            name: "nearest_upsample",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                let factor = r.random_range(1..=3);
                Instance {
                    inputs: vec![rand_t(r, s)],
                    unprobed: vec![],
                    build: Box::new(move |g, l| g.upsample(l[0], factor)),
                }
            },
        },
        Case {
            name: "crop",
            make: |r| {
                let (h, w) = (dim(r, 1), dim(r, 1));
                let (ch, cw) = (r.random_range(1..=h), r.random_range(1..=w));
                let s = vec![dim(r, 1), h, w];
                Instance {
                    inputs: vec![rand_t(r, s)],
                    unprobed: vec![],
                    build: Box::new(move |g, l| g.crop(l[0], ch, cw)),
                }
            },
        },
        Case {
            name: "tokens round trip",
            make: |r| {
                let (h, w) = (dim(r, 1), dim(r, 1));
                let s = vec![dim(r, 1), h, w];
                Instance {
                    inputs: vec![rand_t(r, s)],
                    unprobed: vec![],
                    build: Box::new(move |g, l| {
                        let t = g.to_tokens(l[0])?;
                        let m = g.scale(t, 1.5);
                        g.from_tokens(m, h, w)
                    }),
                }
            },
        },
        Case {
            name: "matmul",
            make: |r| {
                let (n, k, m) = (dim(r, 1), dim(r, 1), dim(r, 1));
                Instance {
                    inputs: vec![rand_t(r, vec![n, k]), rand_t(r, vec![k, m])],
                    unprobed: vec![],
                    build: Box::new(|g, l| g.matmul(l[0], l[1])),
                }
            },
        },
        Case {
            name: "matmul_nt",
            make: |r| {
                let (n, k, m) = (dim(r, 1), dim(r, 1), dim(r, 1));
                Instance {
                    inputs: vec![rand_t(r, vec![n, k]), rand_t(r, vec![m, k])],
                    unprobed: vec![],
                    build: Box::new(|g, l| g.matmul_nt(l[0], l[1])),
                }
            },
        },
        Case {
            name: "mul_broadcast",
            make: |r| {
                let (h, w) = (dim(r, 1), dim(r, 1));
                let c = dim(r, 1);
                Instance {
                    inputs: vec![rand_t(r, vec![c, h, w]), rand_t(r, vec![1, h, w])],
                    unprobed: vec![],
                    build: Box::new(|g, l| g.mul_broadcast(l[0], l[1])),
                }
            },
        },
        Case {
            name: "residual_combine",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                Instance {
                    inputs: vec![rand_t(r, s.clone()), rand_t(r, s), rand_t(r, vec![1])],
                    unprobed: vec![],
                    build: Box::new(|g, l| attention::residual_nodes(g, l[0], l[1], l[2])),
                }
            },
        },
        Case {
            name: "scaled_dot_attention",
            make: |r| {
                let (n, d) = (dim(r, 1), dim(r, 1));
                Instance {
                    inputs: vec![rand_t(r, vec![n, d]), rand_t(r, vec![n, d]), rand_t(r, vec![n, d])],
                    unprobed: vec![],
                    build: Box::new(|g, l| attention::attention_nodes(g, l[0], l[1], l[2]).map(|(o, _)| o)),
                }
            },
        },
        Case {
            name: "self_attention_branch",
            make: |r| Instance {
                inputs: attention_inputs(r, 1, 1),
                unprobed: vec![KEY_BIAS],
                build: Box::new(|g, l| {
                    let p = BranchNodes::SelfAttention(attention_nodes_from(l, false));
                    attention::branch_nodes(g, l[0], &p).map(|t| t.out)
                }),
            },
        },
        Case {
            name: "strided_self_attention 1x1",
            make: |r| Instance {
                inputs: attention_inputs(r, 1, 2),
                unprobed: vec![KEY_BIAS],
                build: Box::new(|g, l| {
                    let p = BranchNodes::SelfAttention(attention_nodes_from(l, true));
                    attention::branch_nodes(g, l[0], &p).map(|t| t.out)
                }),
            },
        },
        Case {
            name: "strided_self_attention 3x3",
            make: |r| Instance {
                inputs: attention_inputs(r, 3, 2),
                unprobed: vec![KEY_BIAS],
                build: Box::new(|g, l| {
                    let p = BranchNodes::SelfAttention(attention_nodes_from(l, true));
                    attention::branch_nodes(g, l[0], &p).map(|t| t.out)
                }),
            },
        },
        Case {
            name: "cbam_spatial_attention",
            make: |r| {
                let s = vec![dim(r, 1), dim(r, 1), dim(r, 1)];
                Instance {
                    inputs: vec![
                        rand_t(r, s),
                        rand_t(r, vec![1, 2, 7, 7]),
                        rand_t(r, vec![1]),
                        rand_t(r, vec![1]),
                    ],
                    unprobed: vec![],
                    build: Box::new(|g, l| {
                        let p = BranchNodes::Cbam(CbamNodes {
                            w7: ConvNodes { weight: l[1], bias: l[2] },
                            gamma: l[3],
                        });
                        attention::branch_nodes(g, l[0], &p).map(|t| t.out)
                    }),
                }
            },
        },
        Case {
            name: "focal_loss",
            make: |r| {
                let n = dim(r, 1) * dim(r, 1);
                let targets = binary_targets(r, n);
                let norm = normalizer(&targets);
                let mut z = rand_t(r, vec![n]);
                z.data_mut().iter_mut().for_each(|v| *v *= 4.0);
                Instance {
                    inputs: vec![z],
                    unprobed: vec![],
                    build: Box::new(move |g, l| g.focal_loss(l[0], targets.clone(), 0.25, 2.0, norm)),
                }
            },
        },
        Case {
            name: "smooth_l1",
            make: |r| {
                let n = dim(r, 1) * 4;
                let targets: Vec<Option<f64>> = (0..n)
                    .map(|_| r.random_bool(0.7).then(|| r.random_range(-2.0..2.0)))
                    .collect();
                let mut p = rand_t(r, vec![n]);
                p.data_mut().iter_mut().for_each(|v| *v *= 2.0);
                Instance {
                    inputs: vec![p],
                    unprobed: vec![],
                    build: Box::new(move |g, l| g.smooth_l1(l[0], targets.clone(), 1.0, 2.0)),
                }
            },
        },
        Case {
            name: "confidence_bce",
            make: |r| {
                let n = dim(r, 1) * dim(r, 1);
                let targets = binary_targets(r, n);
                let norm = normalizer(&targets);
                let mut z = rand_t(r, vec![n]);
                z.data_mut().iter_mut().for_each(|v| *v *= 4.0);
                Instance {
                    inputs: vec![z],
                    unprobed: vec![],
                    build: Box::new(move |g, l| g.bce_with_logits(l[0], targets.clone(), norm)),
                }
            },
        },
    ]
}

/// Runs `case` on `cfg.instances` random instances and folds the reports.
pub fn run_case(case: &Case, cfg: &SuiteConfig, seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut total: Option<GradCheckReport> = None;
    for i in 0..cfg.instances {
        let inst = (case.make)(&mut rng);
        let check = GradCheckConfig {
            seed: seed.wrapping_add(i as u64),
            ..cfg.check
        };
        let probe: Vec<bool> = (0..inst.inputs.len()).map(|j| !inst.unprobed.contains(&j)).collect();
        let mut r = gradient_check_subset(case.name, &inst.inputs, &probe, inst.build, &check)?;
        match &mut total {
            None => {
                r.op = case.name.to_string();
                total = Some(r);
            }
            Some(t) => t.merge(&r, cfg.check.tolerance),
        }
    }
    Ok(total.unwrap_or_else(|| GradCheckReport {
        op: case.name.to_string(),
        max_abs_err: 0.0,
        max_rel_err: 0.0,
        probe_count: 0,
        pass: true,
        invalid: false,
    }))
}

pub fn run_primitive_suite(cfg: &SuiteConfig, seed: u64) -> Result<Vec<GradCheckReport>> {
    primitive_cases()
        .iter()
        .enumerate()
        .map(|(i, c)| run_case(c, cfg, seed.wrapping_mul(1000).wrapping_add(i as u64)))
        .collect()
}
