//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

use fiona_core::autodiff::gradcheck::{central_difference, max_relative_error};
use fiona_core::autodiff::{Graph, NodeId, Tensor};
use fiona_core::models::{build_fiona, Architecture, ModelConfig, ModelGraph, Phase};
use fiona_core::objective::{total_loss_node, LossConfig};
use fiona_core::Label;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Absolute floor in the relative-error denominator, so entries whose true
/// gradient is ~0 are judged by absolute error instead.
pub const FD_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

pub fn balanced_labels(n: usize) -> Vec<Label> {
    (0..n).map(|i| if i % 2 == 0 { Label::Bonafide } else { Label::Deepfake }).collect()
}

/// Builds `build` over `inputs` (all registered as parameters), reduces its
/// output against fixed random weights and returns the largest relative
/// error between backprop and central differences over every input.
pub fn grad_check<F>(inputs: &[Tensor], seed: u64, build: F) -> f64
where
    F: Fn(&mut Graph, &[NodeId]) -> NodeId,
{
    let mut probe = Graph::new();
    let ids: Vec<NodeId> = inputs.iter().map(|t| probe.param(t.clone())).collect();
    let out = build(&mut probe, &ids);
    let weights = uniform(&mut rng(seed ^ 0x5eed), probe.value(out).shape());

    let forward = |values: &[Tensor]| {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = values.iter().map(|t| g.param(t.clone())).collect();
        let out = build(&mut g, &ids);
        let w = g.input(weights.clone());
        let prod = g.mul(out, w).unwrap();
        let loss = g.sum(prod);
        (g, ids, loss)
    };

    let (g, ids, loss) = forward(inputs);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, id) in ids.iter().enumerate() {
        let numeric = central_difference(
            |x| {
                let mut values = inputs.to_vec();
                values[i] = x.clone();
                let (g, _, loss) = forward(&values);
                g.value(loss).item().unwrap()
            },
            &inputs[i],
            FD_STEP,
        );
        worst = worst.max(max_relative_error(grads.get(*id).unwrap(), &numeric, FD_FLOOR));
    }
    worst
}

/// EER by sweeping thresholds below, between (midpoints) and above the
/// distinct scores, counting both error rates directly at each.
pub fn brute_eer(scores: &[f64], labels: &[Label]) -> f64 {
    let mut distinct = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut thresholds = vec![distinct[0] - 1.0];
    thresholds.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    thresholds.push(distinct[distinct.len() - 1] + 1.0);

    let bona = labels.iter().filter(|&&l| l == Label::Bonafide).count() as f64;
    let fake = labels.len() as f64 - bona;
    let rates = |t: f64| {
        let mut accepted_bona = 0.0;
        let mut missed_fake = 0.0;
        for (&s, &l) in scores.iter().zip(labels) {
            match l {
                Label::Bonafide if s >= t => accepted_bona += 1.0,
                Label::Deepfake if s < t => missed_fake += 1.0,
                _ => {}
            }
        }
        (accepted_bona / bona, missed_fake / fake)
    };

    let mut prev = rates(thresholds[0]);
    for &t in &thresholds {
        let (far, frr) = rates(t);
        if far == frr {
            return far;
        }
        if far < frr {
            let (d1, d2) = (prev.0 - prev.1, far - frr);
            return (prev.0 * -d2 + far * d1) / (d1 - d2);
        }
        prev = (far, frr);
    }
    unreachable!()
}

/// Linear CKA through the explicit centering matrix `H = I - 11'/n`.
pub fn hkh_cka(x: &Tensor, y: &Tensor) -> f64 {
    let n = x.shape()[0];
    let h = Tensor::new(
        vec![n, n],
        (0..n * n)
            .map(|k| if k / n == k % n { 1.0 } else { 0.0 } - 1.0 / n as f64)
            .collect(),
    )
    .unwrap();
    let centered = |m: &Tensor| {
        let gram = m.matmul(&m.transpose().unwrap()).unwrap();
        h.matmul(&gram).unwrap().matmul(&h).unwrap()
    };
    let (k, l) = (centered(x), centered(y));
    let trace = |a: &Tensor, b: &Tensor| a.matmul(b).unwrap().data().iter().step_by(n + 1).sum::<f64>();
    trace(&k, &l) / (trace(&k, &k) * trace(&l, &l)).sqrt()
}

/// Length after each valid kernel-3 convolution and window-2 pool, times
/// the 32 output channels.
pub fn flatten_oracle(d: usize) -> usize {
    let mut len = d;
    for _ in 0..2 {
        len -= 2;
        len /= 2;
    }
    32 * len
}

pub fn dense_params(fan_in: usize, fan_out: usize) -> usize {
    fan_in * fan_out + fan_out
}

const CNN_TRUNK: usize = (3 * 16 + 16) + (3 * 16 * 32 + 32);

/// Closed-form trainable parameter count for a configuration.
pub fn expected_params(cfg: &ModelConfig) -> usize {
    let d = &cfg.input_dims;
    let head = |width: usize| dense_params(width, 50) + dense_params(50, 2);
    match cfg.arch {
        Architecture::Fcn => dense_params(d[0], 128) + dense_params(128, 64) + dense_params(64, 32) + dense_params(32, 2),
        Architecture::Cnn => CNN_TRUNK + head(flatten_oracle(d[0])),
        Architecture::ConcatFusion => 2 * CNN_TRUNK + head(flatten_oracle(d[0]) + flatten_oracle(d[1])),
        Architecture::Fiona => {
            let p = cfg.projection_dim;
            let branch = |f: usize| CNN_TRUNK + dense_params(f, f) + dense_params(f, p);
            branch(flatten_oracle(d[0])) + branch(flatten_oracle(d[1])) + head(2 * p)
        }
    }
}

fn fiona_loss(model: &ModelGraph, inputs: &[Tensor], seed: u64, cfg: &LossConfig) -> (Graph, Vec<NodeId>, NodeId) {
    let mut g = Graph::new();
    let mut mask_rng = rng(seed);
    let fwd = model.forward(&mut g, inputs, Phase::Train(&mut mask_rng)).unwrap();
    let labels = balanced_labels(inputs[0].shape()[0]);
    let terms = total_loss_node(&mut g, fwd.probs, &labels, fwd.projections(), cfg).unwrap();
    (g, fwd.params, terms.total)
}

/// Worst relative error over every parameter of a small FIONA model, with
/// dropout active under a fixed mask.
pub fn fiona_total_loss_error(seed: u64) -> f64 {
    let model = build_fiona((10, 12), 4, 0.3, seed).unwrap();
    let mut r = rng(seed + 77);
    let inputs = [uniform(&mut r, &[4, 10]), uniform(&mut r, &[4, 12])];
    let cfg = LossConfig::default();
    let (g, params, loss) = fiona_loss(&model, &inputs, seed, &cfg);
    let grads = g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    for (i, id) in params.iter().enumerate() {
        let numeric = central_difference(
            |t| {
                let mut m = model.clone();
                m.parameters_mut()[i].value = t.clone();
                let (g, _, loss) = fiona_loss(&m, &inputs, seed, &cfg);
                g.value(loss).item().unwrap()
            },
            &model.parameters()[i].value,
            FD_STEP,
        );
        worst = worst.max(max_relative_error(grads.get(*id).unwrap(), &numeric, FD_FLOOR));
    }
    worst
}

