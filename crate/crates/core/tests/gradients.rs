use dsa_core::attention::{self, BranchNodes, SelfAttentionParams};
use dsa_core::gradcheck::{fd_step, relative_error};
use dsa_core::gradsuite::{run_primitive_suite, SuiteConfig};
use dsa_core::{CompGraph, FeatureMap, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn every_primitive_passes_finite_differences() {
    let reports = run_primitive_suite(&SuiteConfig::default(), 11).unwrap();
    for r in &reports {
        println!("{:<28} max_rel {:.3e} max_abs {:.3e} probes {}", r.op, r.max_rel_err, r.max_abs_err, r.probe_count);
    }
    for r in &reports {
        assert!(r.pass, "{} failed: rel err {:.3e}", r.op, r.max_rel_err);
        assert!(r.probe_count >= 20 * 20);
    }
}

/// Loss = Σ out over the full branch (residual included); every parameter
/// scalar is probed, not a random subset.
fn branch_loss(f: &FeatureMap, p: &SelfAttentionParams) -> f64 {
    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let nodes = BranchNodes::SelfAttention(p.register(&mut g));
    let t = attention::branch_nodes(&mut g, x, &nodes).unwrap();
    g.value(t.out).data().iter().sum()
}

#[test]
fn full_branch_parameter_gradients_match_at_1e6() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = FeatureMap::random_uniform(2, 2, 2, -1.0, 1.0, &mut rng);
    let mut p = SelfAttentionParams::init(2, None, &mut rng);
    p.gamma = 0.7;
    for w in [&mut p.wq, &mut p.wk, &mut p.wv] {
        for b in w.bias_mut() {
            *b = rand::Rng::random_range(&mut rng, -0.5..0.5);
        }
    }

    let mut g = CompGraph::new();
    let x = g.leaf_fmap(f.clone());
    let nodes = p.register(&mut g);
    let t = attention::branch_nodes(&mut g, x, &BranchNodes::SelfAttention(nodes)).unwrap();
    let n = g.value(t.out).numel();
    let seed = Tensor::new(g.value(t.out).shape().to_vec(), vec![1.0; n]).unwrap();
    let grads = g.backprop(t.out, &seed).unwrap();

    let mut worst = 0.0f64;
    let mut probe = |analytic: &[f64], get: &dyn Fn(&mut SelfAttentionParams) -> &mut [f64]| {
        for i in 0..analytic.len() {
            let mut plus = p.clone();
            let v = get(&mut plus)[i];
            let h = fd_step(v);
            get(&mut plus)[i] = v + h;
            let mut minus = p.clone();
            get(&mut minus)[i] = v - h;
            let numeric = (branch_loss(&f, &plus) - branch_loss(&f, &minus)) / (2.0 * h);
            worst = worst.max(relative_error(analytic[i], numeric));
        }
    };
    probe(grads.get(nodes.wq.weight).data(), &|p| p.wq.weights_mut());
    probe(grads.get(nodes.wq.bias).data(), &|p| p.wq.bias_mut());
    probe(grads.get(nodes.wk.weight).data(), &|p| p.wk.weights_mut());
    probe(grads.get(nodes.wk.bias).data(), &|p| p.wk.bias_mut());
    probe(grads.get(nodes.wv.weight).data(), &|p| p.wv.weights_mut());
    probe(grads.get(nodes.wv.bias).data(), &|p| p.wv.bias_mut());
    probe(grads.get(nodes.gamma).data(), &|p| std::slice::from_mut(&mut p.gamma));
    assert!(worst < 1e-6, "worst relative error {worst:.3e}");
}

#[test]
fn gamma_gradient_is_sum_of_attention() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for trial in 0..5 {
        let f = FeatureMap::random_uniform(3, 3, 2, -1.0, 1.0, &mut rng);
        let mut p = SelfAttentionParams::init(3, None, &mut rng);
        p.gamma = 0.1 * trial as f64;
        let mut g = CompGraph::new();
        let x = g.leaf_fmap(f.clone());
        let nodes = p.register(&mut g);
        let t = attention::branch_nodes(&mut g, x, &BranchNodes::SelfAttention(nodes)).unwrap();
        let loss = g.sum(t.out);
        let grads = g.backprop(loss, &Tensor::scalar(1.0)).unwrap();
        let dgamma = grads.get(nodes.gamma).data()[0];
        let att_sum: f64 = g.value(t.att).data().iter().sum();
        assert!((dgamma - att_sum).abs() <= 1e-12 * att_sum.abs().max(1.0));

        let h = fd_step(p.gamma);
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus.gamma += h;
        minus.gamma -= h;
        let numeric = (branch_loss(&f, &plus) - branch_loss(&f, &minus)) / (2.0 * h);
        assert!(relative_error(dgamma, numeric) < 1e-6);
    }
}

#[test]
fn backprop_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let f = FeatureMap::random_uniform(3, 4, 4, -1.0, 1.0, &mut rng);
    let mut p = SelfAttentionParams::init(3, None, &mut rng);
    p.gamma = 0.3;
    let run = || {
        let mut g = CompGraph::new();
        let x = g.leaf_fmap(f.clone());
        let nodes = p.register(&mut g);
        let t = attention::branch_nodes(&mut g, x, &BranchNodes::SelfAttention(nodes)).unwrap();
        let loss = g.sum(t.out);
        let grads = g.backprop(loss, &Tensor::scalar(1.0)).unwrap();
        grads.all().to_vec()
    };
    let a = run();
    let b = run();
    assert_eq!(a.len(), b.len());
    for (x, y) in a.iter().zip(&b) {
        assert!(x.bitwise_eq(y));
    }
}

#[test]
fn key_bias_gradient_vanishes() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    for strided in [None, Some(attention::StrideKernel::K1), Some(attention::StrideKernel::K3)] {
        let f = FeatureMap::random_uniform(3, 4, 3, -1.0, 1.0, &mut rng);
        let mut p = SelfAttentionParams::init(3, strided, &mut rng);
        p.gamma = 0.8;
        for b in p.wk.bias_mut() {
            *b = rand::Rng::random_range(&mut rng, -1.0..1.0);
        }
        let mut g = CompGraph::new();
        let x = g.leaf_fmap(f.clone());
        let nodes = p.register(&mut g);
        let t = attention::branch_nodes(&mut g, x, &BranchNodes::SelfAttention(nodes)).unwrap();
        let loss = g.sum(t.out);
        let grads = g.backprop(loss, &Tensor::scalar(1.0)).unwrap();
        for &v in grads.get(nodes.wk.bias).data() {
            assert!(v.abs() < 1e-12, "{v:e}");
        }
    }
}
