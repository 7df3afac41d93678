//! Finite-difference checks of the analytic gradients.

use monolig::detectors::loss::gaussian_nll_logvar;
use monolig::detectors::{proposal_loss, weighted_student_loss, HeadLayout, TrainTarget};
use monolig::nnet::{Activation, Mlp};
use rand::Rng;

use super::{fd_grad, max_rel_err, rng};

pub const STEP: f64 = 1e-5;
pub const TOL: f64 = 1e-4;

pub fn random_net(dims: &[usize], act: Activation, seed: u64) -> Mlp {
    let mut net = Mlp::new(dims, act, &mut monolig::rng::stream(seed, &[])).unwrap();
    // non-zero biases so every path is exercised
    let mut r = rng(seed);
    for p in net.params_mut() {
        *p += r.random_range(-0.1..0.1);
    }
    net
}

/// Smallest |pre-activation| over the hidden units. ReLU is not
/// differentiable at 0, so finite differences are only meaningful away
/// from it.
pub fn kink_distance(net: &Mlp, x: &[f64]) -> f64 {
    let mut h = x.to_vec();
    let mut closest = f64::INFINITY;
    for k in 0..net.n_layers() - 1 {
        let (w, b) = net.layer(k);
        let n_in = net.layer_dims()[k];
        let pre: Vec<f64> = (0..net.layer_dims()[k + 1])
            .map(|o| b[o] + (0..n_in).map(|i| w[o * n_in + i] * h[i]).sum::<f64>())
            .collect();
        closest = pre.iter().fold(closest, |m, v| m.min(v.abs()));
        h = pre.iter().map(|&v| v.max(0.0)).collect();
    }
    closest
}

pub fn with_params(net: &Mlp, p: &[f64]) -> Mlp {
    let mut n = net.clone();
    n.params_mut().copy_from_slice(p);
    n
}

/// A target whose box slots sit at given offsets from the network output.
pub fn object_target(out: &[f64], r: &mut impl Rng, category: u32) -> TrainTarget {
    let mut params = [0.0; 7];
    for (i, p) in params.iter_mut().enumerate() {
        *p = out[i] + r.random_range(-0.8..0.8);
    }
    TrainTarget::Object { params, category }
}

/// End-to-end check of a detector head: the loss of one proposal through
/// the network against finite differences in every parameter.
pub fn head_check(layout: HeadLayout, act: Activation, seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let (mut draw, mut checked) = (0, 0);
    while checked < 100 {
        draw += 1;
        let net = random_net(&[6, 10, layout.output_dim()], act, seed * 1000 + draw);
        let x: Vec<f64> = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
        if act == Activation::Relu && kink_distance(&net, &x) < 1e-3 {
            continue;
        }
        checked += 1;
        let out = net.forward(&x).unwrap();
        let category = r.random_range(0..layout.n_categories as u32);
        let target = if draw % 4 == 3 {
            TrainTarget::Background
        } else {
            object_target(&out, &mut r, category)
        };
        let (_, g_out) = proposal_loss(&out, &target, &layout);
        let (g, _) = net.backward(&x, &g_out).unwrap();
        let fd = fd_grad(|p| proposal_loss(&with_params(&net, p).forward(&x).unwrap(), &target, &layout).0, net.params(), STEP);
        worst = worst.max(max_rel_err(&g.0, &fd));
    }
    worst
}

/// Backward pass of random tanh and ReLU networks, in parameters and input,
/// over 100 draws.
pub fn mlp_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    let (mut draw, mut checked) = (0, 0);
    while checked < 100 {
        draw += 1;
        let act = if draw % 2 == 0 { Activation::Tanh } else { Activation::Relu };
        let net = random_net(&[5, 7, 6, 3], act, 100 + draw);
        let x: Vec<f64> = (0..5).map(|_| r.random_range(-1.5..1.5)).collect();
        if act == Activation::Relu && kink_distance(&net, &x) < 1e-3 {
            continue;
        }
        checked += 1;
        let up: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let dot = |n: &Mlp, x: &[f64]| n.forward(x).unwrap().iter().zip(&up).map(|(a, b)| a * b).sum::<f64>();
        let (g, gin) = net.backward(&x, &up).unwrap();
        let fd_p = fd_grad(|p| dot(&with_params(&net, p), &x), net.params(), STEP);
        let fd_x = fd_grad(|xx| dot(&net, xx), &x, STEP);
        worst = worst.max(max_rel_err(&g.0, &fd_p)).max(max_rel_err(&gin, &fd_x));
    }
    worst
}


/// Gaussian NLL in the mean and the log-variance, over 100 draws.
pub fn nll_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let y = r.random_range(-3.0..3.0);
        let x = [r.random_range(-3.0..3.0), r.random_range(-5.0..3.0)];
        let (_, d_mu, d_lv) = gaussian_nll_logvar(y, x[0], x[1]);
        let fd = fd_grad(|p| gaussian_nll_logvar(y, p[0], p[1]).0, &x, STEP);
        worst = worst.max(max_rel_err(&[d_mu, d_lv], &fd));
    }
    worst
}


/// Confidence-weighted student loss: exactly `c` times the unweighted loss
/// and gradient, and its gradient against finite differences, over 100
/// draws.
pub fn weighted_check(seed: u64) -> f64 {
    let mut r = rng(seed);
    let layout = HeadLayout::new(false, 2);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let out: Vec<f64> = (0..layout.output_dim()).map(|_| r.random_range(-1.0..1.0)).collect();
        let target = object_target(&out, &mut r, 1);
        let (l1, g1) = weighted_student_loss(&out, &target, 1.0, &layout).unwrap();
        for c in [0.0, 0.25, 1.0] {
            let (l, g) = weighted_student_loss(&out, &target, c, &layout).unwrap();
            assert!((l - c * l1).abs() < 1e-12);
            assert!(g.iter().zip(&g1).all(|(a, b)| (a - c * b).abs() < 1e-12));
            let fd = fd_grad(|o| weighted_student_loss(o, &target, c, &layout).unwrap().0, &out, STEP);
            worst = worst.max(max_rel_err(&g, &fd));
        }
    }
    worst
}

