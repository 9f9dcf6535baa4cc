//! Finite-difference checks for every graph primitive and for whole
//! models. The oracle below goes through `forward` only, so it stays
//! independent of the reverse-mode path it verifies.

use advsense::graph::{Graph, Loss, Node};
use advsense::models::{ModelSpec, ScalarActivation};
use advsense::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use std::collections::BTreeMap;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

/// Central-difference gradient of Z_target w.r.t. the input.
fn fd_input_gradient(graph: &Graph, x: &Tensor, target: usize) -> Tensor {
    let mut grad = vec![0.0; x.numel()];
    for i in 0..x.numel() {
        let mut plus = x.data().to_vec();
        plus[i] += H;
        let mut minus = x.data().to_vec();
        minus[i] -= H;
        let zp = graph.forward(&Tensor::new(x.shape().to_vec(), plus).unwrap()).unwrap();
        let zm = graph.forward(&Tensor::new(x.shape().to_vec(), minus).unwrap()).unwrap();
        grad[i] = (zp.data()[target] - zm.data()[target]) / (2.0 * H);
    }
    Tensor::new(x.shape().to_vec(), grad).unwrap()
}

/// Mean cross-entropy computed from forward logits alone.
fn ce_loss(graph: &Graph, batch: &Tensor, labels: &[usize]) -> f64 {
    let logits = graph.forward(batch).unwrap();
    let n = logits.shape()[0];
    let k = logits.numel() / n;
    let mut total = 0.0;
    for i in 0..n {
        let row = &logits.data()[i * k..(i + 1) * k];
        let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let z: f64 = row.iter().map(|&v| (v - m).exp()).sum();
        total += z.ln() + m - row[labels[i]];
    }
    total / n as f64
}

/// Central-difference gradient of the mean loss w.r.t. one parameter.
fn fd_param_gradient(graph: &Graph, batch: &Tensor, labels: &[usize], name: &str) -> Tensor {
    let base = graph.params()[name].clone();
    let mut grad = vec![0.0; base.numel()];
    for i in 0..base.numel() {
        let mut g = graph.clone();
        g.params_mut().get_mut(name).unwrap().data_mut()[i] += H;
        let lp = ce_loss(&g, batch, labels);
        let mut g = graph.clone();
        g.params_mut().get_mut(name).unwrap().data_mut()[i] -= H;
        let lm = ce_loss(&g, batch, labels);
        grad[i] = (lp - lm) / (2.0 * H);
    }
    Tensor::new(base.shape().to_vec(), grad).unwrap()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).fold(0.0, |m, (x, y)| m.max((x - y).abs()))
}

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    // Keep away from the ReLU/maxpool kinks that break finite differences.
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn check_inputs(graph: &Graph, x: &Tensor, label: &str) {
    for target in 0..graph.output_len() {
        let analytic = graph.input_gradient(x, target).unwrap();
        let numeric = fd_input_gradient(graph, x, target);
        let diff = max_abs_diff(&analytic, &numeric);
        assert!(diff <= TOL, "{label} target {target}: max abs diff {diff}");
    }
}

#[test]
fn dense_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), rand_tensor(&mut rng, &[3, 5]));
    params.insert("b".to_string(), rand_tensor(&mut rng, &[3]));
    let g = Graph::new(
        vec![5],
        vec![Node::Dense { weight: "w".into(), bias: "b".into() }],
        params,
    )
    .unwrap();
    check_inputs(&g, &rand_tensor(&mut rng, &[5]), "dense");
}

#[test]
fn conv_pool_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), rand_tensor(&mut rng, &[2, 1, 3, 3]));
    params.insert("b".to_string(), rand_tensor(&mut rng, &[2]));
    let g = Graph::new(
        vec![1, 8, 8],
        vec![
            Node::Conv2d { weight: "w".into(), bias: "b".into(), stride: 1 },
            Node::MaxPool2d { kernel: 2, stride: 2 },
            Node::Flatten,
            Node::SumReduce,
        ],
        params,
    )
    .unwrap();
    check_inputs(&g, &rand_tensor(&mut rng, &[1, 8, 8]), "conv+pool");
}

#[test]
fn strided_conv_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), rand_tensor(&mut rng, &[3, 2, 2, 2]));
    params.insert("b".to_string(), rand_tensor(&mut rng, &[3]));
    let g = Graph::new(
        vec![2, 7, 7],
        vec![
            Node::Conv2d { weight: "w".into(), bias: "b".into(), stride: 2 },
            Node::Flatten,
        ],
        params,
    )
    .unwrap();
    let x = rand_tensor(&mut rng, &[2, 7, 7]);
    // Spot-check a handful of logits; the full set is 27 outputs.
    for target in [0usize, 5, 11, 26] {
        let analytic = g.input_gradient(&x, target).unwrap();
        let numeric = fd_input_gradient(&g, &x, target);
        assert!(max_abs_diff(&analytic, &numeric) <= TOL);
    }
}

#[test]
fn elementwise_and_activation_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let mut params = BTreeMap::new();
    params.insert("a".to_string(), rand_tensor(&mut rng, &[6]));
    params.insert("m".to_string(), rand_tensor(&mut rng, &[6]));
    let g = Graph::new(
        vec![6],
        vec![
            Node::AddParam { param: "a".into() },
            Node::MulParam { param: "m".into() },
            Node::Sigmoid,
            Node::Relu,
            Node::SumReduce,
        ],
        params,
    )
    .unwrap();
    check_inputs(&g, &rand_tensor(&mut rng, &[6]), "elementwise");
}

#[test]
fn softmax_node_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let mut params = BTreeMap::new();
    params.insert("w".to_string(), rand_tensor(&mut rng, &[4, 3]));
    params.insert("b".to_string(), rand_tensor(&mut rng, &[4]));
    let g = Graph::new(
        vec![3],
        vec![Node::Dense { weight: "w".into(), bias: "b".into() }, Node::Softmax],
        params,
    )
    .unwrap();
    check_inputs(&g, &rand_tensor(&mut rng, &[3]), "softmax");
}

#[test]
fn single_layer_sigmoid_gradient_matches_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let w: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let g = ModelSpec::single_layer(w, ScalarActivation::Sigmoid).build_graph(0).unwrap();
    check_inputs(&g, &rand_tensor(&mut rng, &[7]), "single-layer");
}

#[test]
fn mlp_parameter_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let spec = ModelSpec::mlp(vec![4], vec![6], 3);
    let g = spec.build_graph(11).unwrap();
    let batch = rand_tensor(&mut rng, &[5, 4]);
    let labels = vec![0, 2, 1, 0, 2];
    let (_, grads) = g.loss_gradients(&batch, &labels, Loss::CrossEntropy).unwrap();
    for name in ["w0", "b0", "w1", "b1"] {
        let numeric = fd_param_gradient(&g, &batch, &labels, name);
        let diff = max_abs_diff(&grads[name], &numeric);
        assert!(diff <= TOL, "param {name}: max abs diff {diff}");
    }
}

#[test]
fn cnn_parameter_gradients_match_fd() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let mut params = BTreeMap::new();
    params.insert("cw".to_string(), rand_tensor(&mut rng, &[2, 1, 3, 3]));
    params.insert("cb".to_string(), rand_tensor(&mut rng, &[2]));
    params.insert("hw".to_string(), rand_tensor(&mut rng, &[2, 8]));
    params.insert("hb".to_string(), rand_tensor(&mut rng, &[2]));
    let g = Graph::new(
        vec![1, 6, 6],
        vec![
            Node::Conv2d { weight: "cw".into(), bias: "cb".into(), stride: 1 },
            Node::Relu,
            Node::MaxPool2d { kernel: 2, stride: 2 },
            Node::Flatten,
            Node::Dense { weight: "hw".into(), bias: "hb".into() },
        ],
        params,
    )
    .unwrap();
    let batch = rand_tensor(&mut rng, &[3, 1, 6, 6]);
    let labels = vec![1, 0, 1];
    let (_, grads) = g.loss_gradients(&batch, &labels, Loss::CrossEntropy).unwrap();
    for name in ["cw", "cb", "hw", "hb"] {
        let numeric = fd_param_gradient(&g, &batch, &labels, name);
        let diff = max_abs_diff(&grads[name], &numeric);
        assert!(diff <= TOL, "param {name}: max abs diff {diff}");
    }
}

#[test]
fn random_two_layer_mlps_match_fd_inputs() {
    for seed in 0..5u64 {
        let mut rng = ChaCha12Rng::seed_from_u64(100 + seed);
        let spec = ModelSpec::mlp(vec![6], vec![9, 5], 4);
        let g = spec.build_graph(seed).unwrap();
        let x = rand_tensor(&mut rng, &[6]);
        check_inputs(&g, &x, &format!("mlp seed {seed}"));
    }
}
