use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use zofa::data::{make_source_task_with, TaskSpec};
use zofa::net::{
    accuracy, batch_loss, grad_backprop, grad_finite_diff, pretrain_source, quantize_weights, Layer, LossKind,
    Model, NetBuilder, Network, ParamSubset, PretrainConfig,
};
use zofa::objectives::l2_norm;
use zofa::Tensor;

/// Seeded 2-layer net with every parameter nudged off its initial value.
fn fixture_net() -> Network {
    let mut net = NetBuilder::new(4).input_offset().linear(5).layernorm().tanh().tap().linear(3).build(42).unwrap();
    let mut p = net.pack(ParamSubset::All);
    for (i, v) in p.iter_mut().enumerate() {
        *v += 0.01 * (i as f64 % 7.0 - 3.0);
    }
    net.unpack(ParamSubset::All, &p).unwrap();
    net
}

fn fixture_input() -> Tensor {
    Tensor::new(vec![2, 4], vec![0.5, -1.0, 2.0, 0.25, -0.75, 0.0, 1.5, -2.0]).unwrap()
}

/// Straight-line evaluation of one row, written against the raw layer parameters.
fn scalar_forward(net: &Network, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = x.to_vec();
    let mut feat = Vec::new();
    for (li, layer) in net.layers().iter().enumerate() {
        a = match layer {
            Layer::InputOffset { offset } => a.iter().zip(offset.data()).map(|(v, b)| v + b).collect(),
            Layer::Linear { weight, bias } => {
                let cols = a.len();
                (0..bias.data().len())
                    .map(|r| {
                        let mut s = bias.data()[r];
                        for c in 0..cols {
                            s += weight.data()[r * cols + c] * a[c];
                        }
                        s
                    })
                    .collect()
            }
            Layer::Relu => a.iter().map(|v| v.max(0.0)).collect(),
            Layer::Tanh => a.iter().map(|v| v.tanh()).collect(),
            Layer::LayerNorm { gain, shift, eps } => {
                let n = a.len() as f64;
                let mean = a.iter().sum::<f64>() / n;
                let var = a.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                let inv = 1.0 / (var + eps).sqrt();
                (0..a.len()).map(|j| gain.data()[j] * (a[j] - mean) * inv + shift.data()[j]).collect()
            }
        };
        if li == net.feature_tap() {
            feat = a.clone();
        }
    }
    (a, feat)
}

#[test]
fn forward_matches_frozen_values_and_scalar_reference() {
    let net = fixture_net();
    let x = fixture_input();
    let out = net.forward(&x).unwrap();
    let frozen_logits = [
        -2.5284251532920305,
        -0.32524266725392503,
        1.9626117885108323,
        -1.3236047149264767,
        0.17907383876886643,
        2.287611398766471,
    ];
    for (a, b) in out.logits.data().iter().zip(frozen_logits) {
        assert!((a - b).abs() <= 1e-12, "{a} vs frozen {b}");
    }
    for i in 0..2 {
        let (o, h) = scalar_forward(&net, x.row(i));
        for (a, b) in out.logits.row(i).iter().zip(&o) {
            assert!((a - b).abs() <= 1e-12);
        }
        for (a, b) in out.features.row(i).iter().zip(&h) {
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

#[test]
fn forward_is_pure() {
    let net = fixture_net();
    let before = net.param_hash();
    let a = net.forward(&fixture_input()).unwrap();
    let b = net.forward(&fixture_input()).unwrap();
    assert_eq!(a, b);
    assert_eq!(before, net.param_hash());
}

fn zoo(seed: u64) -> Network {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..6);
    let mut b = NetBuilder::new(d);
    if rng.random_bool(0.5) {
        b = b.input_offset();
    }
    for _ in 0..rng.random_range(1..3) {
        b = b.linear(rng.random_range(3..7));
        if rng.random_bool(0.5) {
            b = b.layernorm();
        }
        b = if rng.random_bool(0.5) { b.relu() } else { b.tanh() };
    }
    let mut net = b.tap().linear(rng.random_range(2..5)).build(seed).unwrap();
    // Perturb everything so gains, shifts and biases are not at their trivial values.
    let mut p = net.pack(ParamSubset::All);
    for v in p.iter_mut() {
        let z: f64 = StandardNormal.sample(&mut rng);
        *v += 0.2 * z;
    }
    net.unpack(ParamSubset::All, &p).unwrap();
    net
}

#[test]
fn backprop_agrees_with_finite_differences_on_ten_nets_and_three_losses() {
    let mut worst: f64 = 0.0;
    for seed in 0..10 {
        let net = zoo(seed);
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b = 5;
        let x = Tensor::new(
            vec![b, net.input_dim()],
            (0..b * net.input_dim()).map(|_| StandardNormal.sample(&mut rng)).collect(),
        )
        .unwrap();
        let labels: Vec<usize> = (0..b).map(|i| i % net.output_dim()).collect();
        for kind in [LossKind::CrossEntropy { labels: &labels }, LossKind::Entropy, LossKind::SrEntropy { center: None }] {
            let bp = grad_backprop(&net, &x, kind).unwrap();
            let fd = match kind {
                // The shortcut-resistant head holds each sample's clean norm fixed, so the
                // finite-difference loss must rescale by that frozen norm too.
                LossKind::SrEntropy { .. } => {
                    let clean = net.forward(&x).unwrap().logits;
                    let norms: Vec<f64> = (0..b).map(|i| l2_norm(clean.row(i))).collect();
                    grad_finite_diff(&net, ParamSubset::All, |n| {
                        let o = n.forward(&x)?.logits;
                        Ok((0..b)
                            .map(|i| {
                                let r = l2_norm(o.row(i));
                                let s: Vec<f64> = o.row(i).iter().map(|v| norms[i] / (r + 1e-12) * v).collect();
                                zofa::objectives::entropy(&s)
                            })
                            .sum::<f64>()
                            / b as f64)
                    })
                    .unwrap()
                }
                _ => grad_finite_diff(&net, ParamSubset::All, |n| batch_loss(n, &x, &kind)).unwrap(),
            };
            for (a, c) in bp.iter().zip(fd.iter()) {
                worst = worst.max((a - c).abs() / a.abs().max(c.abs()).max(1e-4));
            }
        }
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn backprop_matches_finite_differences_tightly_on_the_fixture_net() {
    let net = fixture_net();
    let x = fixture_input();
    let labels = [0, 2];
    let kind = LossKind::CrossEntropy { labels: &labels };
    let bp = grad_backprop(&net, &x, kind).unwrap();
    let fd = grad_finite_diff(&net, ParamSubset::All, |n| batch_loss(n, &x, &kind)).unwrap();
    for (a, c) in bp.iter().zip(fd.iter()) {
        assert!((a - c).abs() <= 1e-5 * a.abs().max(c.abs()).max(1e-3), "{a} vs {c}");
    }
}

#[test]
fn finite_difference_of_constant_loss_is_zero() {
    let net = fixture_net();
    let g = grad_finite_diff(&net, ParamSubset::All, |_| Ok(3.0)).unwrap();
    assert!(g.iter().all(|v| *v == 0.0));
}

#[test]
fn pack_unpack_round_trips_across_the_zoo() {
    for seed in 0..10 {
        let mut net = zoo(seed);
        let layers: Vec<usize> =
            (0..net.layers().len()).filter(|&i| !net.layers()[i].param_names().is_empty()).step_by(2).collect();
        net.adapt_layers(&layers).unwrap();
        for subset in [ParamSubset::All, ParamSubset::Adapted] {
            let p = net.pack(subset);
            assert_eq!(p.len(), net.param_count(subset));
            let mut copy = net.clone();
            copy.unpack(subset, &p).unwrap();
            assert_eq!(copy, net);
            assert_eq!(copy.pack(subset), p);
        }
    }
}

#[test]
fn quantizing_twice_equals_quantizing_once() {
    for seed in 0..10 {
        let net = zoo(seed);
        for bits in [4, 6, 8, 12] {
            let once = quantize_weights(&net, bits).unwrap();
            let twice = quantize_weights(&once, bits).unwrap();
            assert_eq!(once.pack(ParamSubset::All), twice.pack(ParamSubset::All));
        }
    }
}

#[test]
fn pretraining_separates_two_blobs() {
    let spec = TaskSpec { seed: 3, d: 8, classes: 2, n_train: 400, n_test: 400, separation: 6.0, ..TaskSpec::default() };
    let (train, test) = make_source_task_with(&spec).unwrap();
    let net = NetBuilder::new(8).input_offset().linear(2).build(3).unwrap();
    let cfg = PretrainConfig { steps: 200, ..PretrainConfig::default() };
    let (trained, src) = pretrain_source(&net, &train, &cfg).unwrap();
    assert!(accuracy(&trained, &test).unwrap() >= 0.95);
    assert_eq!(src.dim(), 8);
}

#[test]
fn zero_learning_rate_leaves_parameters_alone() {
    let spec = TaskSpec { n_train: 64, n_test: 8, ..TaskSpec::default() };
    let (train, _) = make_source_task_with(&spec).unwrap();
    let net = NetBuilder::new(spec.d).linear(4).relu().linear(spec.classes).build(0).unwrap();
    let cfg = PretrainConfig { steps: 20, lr: 0.0, ..PretrainConfig::default() };
    let (trained, _) = pretrain_source(&net, &train, &cfg).unwrap();
    assert_eq!(trained.pack(ParamSubset::All), net.pack(ParamSubset::All));
}

#[test]
fn empty_training_set_cannot_be_pretrained() {
    let spec = TaskSpec { n_train: 0, n_test: 8, ..TaskSpec::default() };
    let (train, _) = make_source_task_with(&spec).unwrap();
    assert!(train.is_empty());
    let net = NetBuilder::new(spec.d).linear(spec.classes).build(0).unwrap();
    assert!(pretrain_source(&net, &train, &PretrainConfig::default()).is_err());
}

#[test]
fn model_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.zofa");
    let mut net = fixture_net();
    net.adapt_layers(&[0, 2]).unwrap();
    let src = zofa::objectives::SourceStats::new(vec![0.5; 5], vec![1.5; 5]).unwrap();
    let model = Model { net, source: Some(src) };
    model.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back, model);
    let again = dir.path().join("again.zofa");
    back.save(&again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());
}
