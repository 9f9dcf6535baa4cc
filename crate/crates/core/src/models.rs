//! Reference classifier architectures, the training loop, and weight
//! persistence.

use crate::data::Dataset;
use crate::derive_seed;
use crate::error::{Error, Result};
use crate::graph::{Graph, Loss, Node, ParamGrads};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

const WEIGHTS_MAGIC: &[u8; 8] = b"ADVSENSE";
const WEIGHTS_VERSION: u32 = 1;

/// Scalar activation H for single-layer models F(x) = H(<w, x>).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalarActivation {
    Identity,
    Sigmoid,
}

impl ScalarActivation {
    pub fn eval(&self, z: f64) -> f64 {
        match self {
            ScalarActivation::Identity => z,
            ScalarActivation::Sigmoid => {
                if z >= 0.0 {
                    1.0 / (1.0 + (-z).exp())
                } else {
                    let e = z.exp();
                    e / (1.0 + e)
                }
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Architecture {
    /// Fully connected ReLU net with the given hidden widths.
    Mlp { hidden: Vec<usize> },
    /// conv(6@5x5)+relu, pool2, conv(16@5x5)+relu, pool2, then dense
    /// 256/120/84 with ReLU and a final linear head to k logits.
    Lenet,
    /// F(x) = H(<w, x>), a scalar-score model with a fixed weight vector.
    SingleLayer { weights: Vec<f64>, activation: ScalarActivation },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    pub input_shape: Vec<usize>,
    pub class_count: usize,
}

impl ModelSpec {
    pub fn mlp(input_shape: Vec<usize>, hidden: Vec<usize>, class_count: usize) -> Self {
        ModelSpec { arch: Architecture::Mlp { hidden }, input_shape, class_count }
    }

    pub fn lenet(input_shape: Vec<usize>, class_count: usize) -> Self {
        ModelSpec { arch: Architecture::Lenet, input_shape, class_count }
    }

    /// Single-layer models produce one scalar score, so class_count is 1;
    /// the usual k >= 2 floor applies to the classifier architectures.
    pub fn single_layer(weights: Vec<f64>, activation: ScalarActivation) -> Self {
        let d = weights.len();
        ModelSpec {
            arch: Architecture::SingleLayer { weights, activation },
            input_shape: vec![d],
            class_count: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.arch {
            Architecture::SingleLayer { weights, .. } => {
                if weights.len() != self.input_shape.iter().product::<usize>() {
                    return Err(Error::InvalidShape(
                        "single-layer weight length differs from input".into(),
                    ));
                }
            }
            _ => {
                if self.class_count < 2 {
                    return Err(Error::InvalidArgument(
                        "classifiers need at least 2 classes".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    /// Builds the graph with seeded Kaiming-uniform init for ReLU layers
    /// and a plain uniform fan-in bound for the linear head. Biases zero.
    pub fn build_graph(&self, seed: u64) -> Result<Graph> {
        self.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut nodes: Vec<Node> = Vec::new();

        match &self.arch {
            Architecture::Mlp { hidden } => {
                let mut width: usize = self.input_shape.iter().product();
                if self.input_shape.len() > 1 {
                    nodes.push(Node::Flatten);
                }
                for (i, &h) in hidden.iter().enumerate() {
                    let w = format!("w{i}");
                    let b = format!("b{i}");
                    params.insert(w.clone(), kaiming_uniform(&mut rng, h, width, true));
                    params.insert(b.clone(), Tensor::zeros(&[h]));
                    nodes.push(Node::Dense { weight: w, bias: b });
                    nodes.push(Node::Relu);
                    width = h;
                }
                let w = format!("w{}", hidden.len());
                let b = format!("b{}", hidden.len());
                params.insert(w.clone(), kaiming_uniform(&mut rng, self.class_count, width, false));
                params.insert(b.clone(), Tensor::zeros(&[self.class_count]));
                nodes.push(Node::Dense { weight: w, bias: b });
            }
            Architecture::Lenet => {
                if self.input_shape.len() != 3 {
                    return Err(Error::InvalidShape(format!(
                        "lenet expects [c,h,w] input, got {:?}",
                        self.input_shape
                    )));
                }
                let ci = self.input_shape[0];
                params.insert("conv1_w".into(), conv_kaiming(&mut rng, 6, ci, 5));
                params.insert("conv1_b".into(), Tensor::zeros(&[6]));
                params.insert("conv2_w".into(), conv_kaiming(&mut rng, 16, 6, 5));
                params.insert("conv2_b".into(), Tensor::zeros(&[16]));
                nodes.push(Node::Conv2d {
                    weight: "conv1_w".into(),
                    bias: "conv1_b".into(),
                    stride: 1,
                });
                nodes.push(Node::Relu);
                nodes.push(Node::MaxPool2d { kernel: 2, stride: 2 });
                nodes.push(Node::Conv2d {
                    weight: "conv2_w".into(),
                    bias: "conv2_b".into(),
                    stride: 1,
                });
                nodes.push(Node::Relu);
                nodes.push(Node::MaxPool2d { kernel: 2, stride: 2 });
                nodes.push(Node::Flatten);
                let h = self.input_shape[1];
                let w = self.input_shape[2];
                let flat = 16 * (((h - 4) / 2 - 4) / 2) * (((w - 4) / 2 - 4) / 2);
                let mut width = flat;
                for (i, units) in [256usize, 120, 84].into_iter().enumerate() {
                    let wn = format!("fc{i}_w");
                    let bn = format!("fc{i}_b");
                    params.insert(wn.clone(), kaiming_uniform(&mut rng, units, width, true));
                    params.insert(bn.clone(), Tensor::zeros(&[units]));
                    nodes.push(Node::Dense { weight: wn, bias: bn });
                    nodes.push(Node::Relu);
                    width = units;
                }
                params.insert(
                    "head_w".into(),
                    kaiming_uniform(&mut rng, self.class_count, width, false),
                );
                params.insert("head_b".into(), Tensor::zeros(&[self.class_count]));
                nodes.push(Node::Dense { weight: "head_w".into(), bias: "head_b".into() });
            }
            Architecture::SingleLayer { weights, activation } => {
                params.insert("w".into(), Tensor::new(self.input_shape.clone(), weights.clone())?);
                nodes.push(Node::MulParam { param: "w".into() });
                nodes.push(Node::SumReduce);
                if *activation == ScalarActivation::Sigmoid {
                    nodes.push(Node::Sigmoid);
                }
            }
        }
        Graph::new(self.input_shape.clone(), nodes, params)
    }
}

fn kaiming_uniform(rng: &mut ChaCha12Rng, fan_out: usize, fan_in: usize, relu: bool) -> Tensor {
    let gain2 = if relu { 2.0 } else { 1.0 };
    let bound = (3.0 * gain2 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..fan_out * fan_in).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![fan_out, fan_in], data)
}

fn conv_kaiming(rng: &mut ChaCha12Rng, co: usize, ci: usize, k: usize) -> Tensor {
    let fan_in = ci * k * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let data: Vec<f64> = (0..co * ci * k * k).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::from_parts(vec![co, ci, k, k], data)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainingMetadata {
    pub epochs: usize,
    pub seed: u64,
    /// Accuracy on the validation set provided to `train`.
    pub final_accuracy: f64,
}

/// A spec plus its (possibly trained) parameters. Immutable once built;
/// share freely across worker threads.
#[derive(Debug, Clone)]
pub struct TrainedModel {
    spec: ModelSpec,
    graph: Graph,
    metadata: TrainingMetadata,
}

impl TrainedModel {
    pub fn from_parts(spec: ModelSpec, graph: Graph, metadata: TrainingMetadata) -> Self {
        TrainedModel { spec, graph, metadata }
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn metadata(&self) -> &TrainingMetadata {
        &self.metadata
    }

    /// Batch features reshaped to the model input if the element counts
    /// agree, e.g. [n,28,28] fed to a [1,28,28] model.
    pub fn conform_batch(&self, batch: &Tensor) -> Result<Tensor> {
        let want: usize = self.spec.input_shape.iter().product();
        let shape = batch.shape();
        if shape.len() >= 2 && shape[1..] == self.spec.input_shape[..] {
            return Ok(batch.clone());
        }
        if !shape.is_empty() && batch.numel() / shape[0] == want {
            let mut s = vec![shape[0]];
            s.extend_from_slice(&self.spec.input_shape);
            return batch.clone().reshape(s);
        }
        Err(Error::ShapeMismatch { expected: self.spec.input_shape.clone(), got: shape.to_vec() })
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    #[serde(rename = "sgd")]
    SgdMomentum { momentum: f64 },
    Adam,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { optimizer: OptimizerKind::Adam, lr: 0.001, epochs: 3, batch: 64, seed: 0 }
    }
}

enum OptimizerState {
    Sgd { momentum: f64, velocity: ParamGrads },
    Adam { m: ParamGrads, v: ParamGrads, t: u64 },
}

impl OptimizerState {
    fn new(kind: OptimizerKind) -> Self {
        match kind {
            OptimizerKind::SgdMomentum { momentum } => {
                OptimizerState::Sgd { momentum, velocity: BTreeMap::new() }
            }
            OptimizerKind::Adam => {
                OptimizerState::Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
            }
        }
    }

    fn step(&mut self, params: &mut BTreeMap<String, Tensor>, grads: &ParamGrads, lr: f64) {
        match self {
            OptimizerState::Sgd { momentum, velocity } => {
                for (name, g) in grads {
                    let vel =
                        velocity.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let p = params.get_mut(name).expect("gradient for unknown parameter");
                    for ((v, &gi), pi) in vel.data_mut().iter_mut().zip(g.data()).zip(p.data_mut())
                    {
                        *v = *momentum * *v + gi;
                        *pi -= lr * *v;
                    }
                }
            }
            OptimizerState::Adam { m, v, t } => {
                const B1: f64 = 0.9;
                const B2: f64 = 0.999;
                const EPS: f64 = 1e-8;
                *t += 1;
                let c1 = 1.0 - B1.powi(*t as i32);
                let c2 = 1.0 - B2.powi(*t as i32);
                for (name, g) in grads {
                    let mt = m.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let vt = v.entry(name.clone()).or_insert_with(|| Tensor::zeros(g.shape()));
                    let p = params.get_mut(name).expect("gradient for unknown parameter");
                    for (((mi, vi), &gi), pi) in mt
                        .data_mut()
                        .iter_mut()
                        .zip(vt.data_mut().iter_mut())
                        .zip(g.data())
                        .zip(p.data_mut())
                    {
                        *mi = B1 * *mi + (1.0 - B1) * gi;
                        *vi = B2 * *vi + (1.0 - B2) * gi * gi;
                        let mhat = *mi / c1;
                        let vhat = *vi / c2;
                        *pi -= lr * mhat / (vhat.sqrt() + EPS);
                    }
                }
            }
        }
    }
}

/// Trains a classifier with seeded shuffling and init; the same seed and
/// config reproduce the run bit for bit on one platform. A non-finite loss
/// aborts with a divergence diagnostic.
pub fn train(
    spec: &ModelSpec,
    train_set: &Dataset,
    valid_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let mut graph = spec.build_graph(derive_seed(cfg.seed, "init"))?;
    let features = train_set.features_as(&spec.input_shape)?;
    let n = train_set.len();
    if cfg.batch == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }

    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(derive_seed(cfg.seed, "shuffle"));
    let mut order: Vec<usize> = (0..n).collect();
    let mut opt = OptimizerState::new(cfg.optimizer);

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        for (bi, chunk) in order.chunks(cfg.batch).enumerate() {
            let rows: Result<Vec<Tensor>> = chunk.iter().map(|&i| features.row(i)).collect();
            let batch = Tensor::stack(&rows?)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| train_set.labels[i]).collect();
            let (loss, grads) =
                graph.loss_gradients(&batch, &labels, Loss::CrossEntropy).map_err(|e| match e {
                    Error::NonFinite(what) => Error::Divergence(format!(
                        "non-finite {what} at epoch {epoch}, batch {bi}"
                    )),
                    other => other,
                })?;
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "loss became non-finite at epoch {epoch}, batch {bi}"
                )));
            }
            opt.step(graph.params_mut(), &grads, cfg.lr);
        }
    }

    let mut model = TrainedModel {
        spec: spec.clone(),
        graph,
        metadata: TrainingMetadata { epochs: cfg.epochs, seed: cfg.seed, final_accuracy: 0.0 },
    };
    model.metadata.final_accuracy = accuracy(&model, valid_set)?;
    Ok(model)
}

/// Logits and argmax labels for a batch; ties break toward the lowest index.
pub fn predict(model: &TrainedModel, batch: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let batch = model.conform_batch(batch)?;
    let logits = model.graph().forward(&batch)?;
    let labels = argmax_labels(&logits);
    Ok((logits, labels))
}

/// Row argmax with ties toward the lowest index.
pub fn argmax_labels(logits: &Tensor) -> Vec<usize> {
    let n = logits.shape()[0];
    let k = logits.numel() / n;
    (0..n)
        .map(|i| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(model: &TrainedModel, ds: &Dataset) -> Result<f64> {
    let (_, labels) = predict(model, &ds.features)?;
    let hits = labels.iter().zip(&ds.labels).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / ds.len() as f64)
}

/// Self-describing weight container: magic, version, a JSON header with the
/// spec, metadata and parameter shapes, then raw little-endian f64 payloads
/// in header order. load(save(m)) reproduces logits bit for bit.
pub fn save(model: &TrainedModel) -> Vec<u8> {
    #[derive(Serialize)]
    struct Header<'a> {
        spec: &'a ModelSpec,
        metadata: &'a TrainingMetadata,
        params: Vec<(String, Vec<usize>)>,
    }
    let params: Vec<(String, Vec<usize>)> =
        model.graph.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
    let header =
        serde_json::to_vec(&Header { spec: &model.spec, metadata: &model.metadata, params })
            .expect("header serializes");

    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.graph.params() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn load(bytes: &[u8]) -> Result<TrainedModel> {
    #[derive(Deserialize)]
    struct Header {
        spec: ModelSpec,
        metadata: TrainingMetadata,
        params: Vec<(String, Vec<usize>)>,
    }
    if bytes.len() < 16 {
        return Err(Error::Format { field: "container".into(), message: "file truncated".into() });
    }
    if &bytes[..8] != WEIGHTS_MAGIC {
        return Err(Error::Format {
            field: "magic".into(),
            message: format!("expected {WEIGHTS_MAGIC:?}"),
        });
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version > WEIGHTS_VERSION {
        return Err(Error::UnsupportedVersion { found: version, supported: WEIGHTS_VERSION });
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_bytes = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| Error::Format { field: "header".into(), message: "file truncated".into() })?;
    let header: Header = serde_json::from_slice(header_bytes)?;

    let mut cursor = 16 + hlen;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, shape) in &header.params {
        let numel: usize = shape.iter().product();
        let end = cursor + numel * 8;
        let payload = bytes.get(cursor..end).ok_or_else(|| Error::Format {
            field: format!("parameter {name}"),
            message: "payload truncated".into(),
        })?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name.clone(), Tensor::new(shape.clone(), data)?);
        cursor = end;
    }
    if cursor != bytes.len() {
        return Err(Error::Format {
            field: "payload".into(),
            message: format!("{} trailing bytes", bytes.len() - cursor),
        });
    }

    // Rebuild the node chain from the spec, then swap in the stored
    // parameters; Graph::new re-validates every shape against the chain.
    let template = header.spec.build_graph(0)?;
    let graph = Graph::new(header.spec.input_shape.clone(), template.nodes().to_vec(), params)?;
    Ok(TrainedModel { spec: header.spec, graph, metadata: header.metadata })
}
