use advsense::graph::{Graph, Node};
use advsense::Tensor;
use std::collections::BTreeMap;
use std::time::Instant;

fn main() {
    // raw dot throughput
    let a: Vec<f64> = (0..1_000_000).map(|i| (i as f64).sin()).collect();
    let b: Vec<f64> = (0..1_000_000).map(|i| (i as f64).cos()).collect();
    let t = Instant::now();
    let mut acc = 0.0;
    for _ in 0..100 {
        let mut s = [0.0f64; 4];
        for i in (0..a.len()).step_by(4) {
            s[0] += a[i] * b[i];
            s[1] += a[i + 1] * b[i + 1];
            s[2] += a[i + 2] * b[i + 2];
            s[3] += a[i + 3] * b[i + 3];
        }
        acc += s[0] + s[1] + s[2] + s[3];
    }
    let el = t.elapsed();
    println!("raw dot: {:.2} GMAC/s ({acc:.1})", 100.0e6 / el.as_secs_f64() / 1e9 * 1.0);

    // conv1 of the CNN alone, batch 64
    let mut params = BTreeMap::new();
    let w: Vec<f64> = (0..6 * 25).map(|i| (i as f64).sin() * 0.1).collect();
    params.insert("w".to_string(), Tensor::new(vec![6, 1, 5, 5], w).unwrap());
    params.insert("b".to_string(), Tensor::zeros(&[6]));
    let g = Graph::new(
        vec![1, 28, 28],
        vec![Node::Conv2d { weight: "w".into(), bias: "b".into(), stride: 1 }, Node::Flatten, Node::SumReduce],
        params,
    )
    .unwrap();
    let x: Vec<f64> = (0..64 * 784).map(|i| (i as f64).sin().abs()).collect();
    let batch = Tensor::new(vec![64, 1, 28, 28], x).unwrap();
    let t = Instant::now();
    for _ in 0..50 {
        let tr = g.forward_trace(&batch).unwrap();
        std::hint::black_box(&tr);
    }
    let el = t.elapsed();
    // 64 samples x 6x24x24 x 25 MACs = 5.53M MAC per pass
    println!("conv1 fwd(trace): {:?}/pass  {:.2} GMAC/s", el / 50, 50.0 * 5.53e6 / el.as_secs_f64() / 1e9);

    let tr = g.forward_trace(&batch).unwrap();
    let cot = Tensor::full(&[64, 1], 1.0);
    let t = Instant::now();
    for _ in 0..50 {
        let r = g.vjp(&tr, &cot).unwrap();
        std::hint::black_box(&r);
    }
    let el = t.elapsed();
    println!("conv1 bwd: {:?}/pass  {:.2} GMAC/s", el / 50, 50.0 * 11.06e6 / el.as_secs_f64() / 1e9);
}
