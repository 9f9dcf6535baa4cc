//! Untargeted L-infinity evasion attacks: FGSM, BIM, PGD, a
//! projected-gradient CW variant, and the detector-aware adaptive attacks
//! that additionally match attributions and/or logits of the clean input.
//!
//! Every attack is per-sample independent; randomized attacks derive one
//! seed per sample from the configured seed and the sample index, so runs
//! are bit-reproducible and batches may be scored in any worker layout.

use crate::attribution::ig_numeric_full;
use crate::error::{Error, Result};

use crate::models::{argmax_labels, TrainedModel};
use crate::tensor::Tensor;
use crate::derive_seed;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Bim,
    Pgd,
    Cw,
    AdaptiveIg,
    AdaptiveLogit,
    AdaptiveCombined,
}

impl AttackKind {
    pub const ALL: [AttackKind; 7] = [
        AttackKind::Fgsm,
        AttackKind::Bim,
        AttackKind::Pgd,
        AttackKind::Cw,
        AttackKind::AdaptiveIg,
        AttackKind::AdaptiveLogit,
        AttackKind::AdaptiveCombined,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            AttackKind::Fgsm => "fgsm",
            AttackKind::Bim => "bim",
            AttackKind::Pgd => "pgd",
            AttackKind::Cw => "cw",
            AttackKind::AdaptiveIg => "adaptive_ig",
            AttackKind::AdaptiveLogit => "adaptive_logit",
            AttackKind::AdaptiveCombined => "adaptive_combined",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L-infinity budget.
    pub epsilon: f64,
    /// Iterative step size; defaults to epsilon/10.
    #[serde(default)]
    pub alpha: Option<f64>,
    pub steps: usize,
    pub seed: u64,
    pub cw_lr: f64,
    pub cw_iters: usize,
    /// Balance weight on the attribution-matching loss.
    pub c: f64,
    pub warm_start_steps: usize,
    /// Quadrature steps for the attribution term inside adaptive losses;
    /// deliberately smaller than the detector's own step count.
    pub ig_steps: usize,
    /// Domain clip range; None for unbounded feature spaces.
    pub clip: Option<(f64, f64)>,
    /// Test override: forces the PGD init draw to zero perturbation.
    #[serde(default)]
    pub zero_init: bool,
}

impl AttackConfig {
    pub fn new(kind: AttackKind, epsilon: f64) -> Self {
        AttackConfig {
            kind,
            epsilon,
            alpha: None,
            steps: match kind {
                AttackKind::Fgsm => 1,
                AttackKind::Bim => 10,
                _ => 40,
            },
            seed: 0,
            cw_lr: 0.01,
            cw_iters: 400,
            c: 10.0,
            warm_start_steps: 20,
            ig_steps: 16,
            clip: Some((0.0, 1.0)),
            zero_init: false,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_steps(mut self, steps: usize) -> Self {
        self.steps = steps;
        self
    }

    pub fn alpha(&self) -> f64 {
        self.alpha.unwrap_or(self.epsilon / 10.0)
    }

    fn validate(&self) -> Result<()> {
        if self.epsilon < 0.0 {
            return Err(Error::InvalidArgument("epsilon must be nonnegative".into()));
        }
        if self.steps < 1 {
            return Err(Error::InvalidArgument("steps must be at least 1".into()));
        }
        if self.c < 0.0 {
            return Err(Error::InvalidArgument("c must be nonnegative".into()));
        }
        if self.alpha() > self.epsilon && self.epsilon > 0.0 {
            return Err(Error::InvalidArgument("alpha must not exceed epsilon".into()));
        }
        Ok(())
    }
}

/// Originals plus their perturbed counterparts and the bookkeeping the
/// evaluation pipeline needs. Construction re-checks the ball and clip
/// invariants on every sample.
#[derive(Debug, Clone)]
pub struct AdversarialBatch {
    pub originals: Tensor,
    pub perturbed: Tensor,
    pub original_labels: Vec<usize>,
    pub adversarial_labels: Vec<usize>,
    pub success_mask: Vec<bool>,
    /// Mean L2 distortion over successful samples (0 when none succeed).
    pub mean_l2: f64,
    pub config: AttackConfig,
}

const BALL_SLACK: f64 = 1e-9;
const BATCH_MAGIC: &[u8; 8] = b"ADVBATCH";
const BATCH_VERSION: u32 = 1;

impl AdversarialBatch {
    fn build(
        model: &TrainedModel,
        originals: Tensor,
        perturbed: Tensor,
        original_labels: Vec<usize>,
        config: AttackConfig,
    ) -> Result<Self> {
        let n = originals.shape()[0];
        let d = originals.numel() / n;
        perturbed.ensure_finite("attack output")?;
        for i in 0..n {
            let o = &originals.data()[i * d..(i + 1) * d];
            let p = &perturbed.data()[i * d..(i + 1) * d];
            for (a, b) in o.iter().zip(p) {
                if (a - b).abs() > config.epsilon + BALL_SLACK {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i} left the epsilon ball: |{a} - {b}| > {}",
                        config.epsilon
                    )));
                }
                if let Some((lo, hi)) = config.clip {
                    if *b < lo - BALL_SLACK || *b > hi + BALL_SLACK {
                        return Err(Error::InvalidArgument(format!(
                            "sample {i} outside clip range [{lo}, {hi}]"
                        )));
                    }
                }
            }
        }
        let logits = model.graph().forward(&perturbed)?;
        let adversarial_labels = argmax_labels(&logits);
        let success_mask: Vec<bool> = adversarial_labels
            .iter()
            .zip(&original_labels)
            .map(|(a, b)| a != b)
            .collect();
        let mut l2_sum = 0.0;
        let mut hits = 0usize;
        for i in 0..n {
            if success_mask[i] {
                let o = &originals.data()[i * d..(i + 1) * d];
                let p = &perturbed.data()[i * d..(i + 1) * d];
                l2_sum += o
                    .iter()
                    .zip(p)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                hits += 1;
            }
        }
        let mean_l2 = if hits > 0 { l2_sum / hits as f64 } else { 0.0 };
        Ok(AdversarialBatch {
            originals,
            perturbed,
            original_labels,
            adversarial_labels,
            success_mask,
            mean_l2,
            config,
        })
    }

    pub fn len(&self) -> usize {
        self.original_labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.original_labels.is_empty()
    }

    pub fn success_rate(&self) -> f64 {
        let hits = self.success_mask.iter().filter(|&&s| s).count();
        hits as f64 / self.success_mask.len().max(1) as f64
    }

    /// Indices of successfully flipped samples.
    pub fn successful_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.success_mask[i]).collect()
    }

    /// Container format: magic, version, JSON header (config echo, labels,
    /// mask, shape), then originals and perturbed as little-endian f64.
    pub fn save(&self) -> Vec<u8> {
        #[derive(Serialize)]
        struct Header<'a> {
            config: &'a AttackConfig,
            original_labels: &'a [usize],
            adversarial_labels: &'a [usize],
            success_mask: &'a [bool],
            mean_l2: f64,
            shape: &'a [usize],
        }
        let header = serde_json::to_vec(&Header {
            config: &self.config,
            original_labels: &self.original_labels,
            adversarial_labels: &self.adversarial_labels,
            success_mask: &self.success_mask,
            mean_l2: self.mean_l2,
            shape: self.originals.shape(),
        })
        .expect("header serializes");
        let mut out = Vec::new();
        out.extend_from_slice(BATCH_MAGIC);
        out.extend_from_slice(&BATCH_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for t in [&self.originals, &self.perturbed] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn load(bytes: &[u8]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            config: AttackConfig,
            original_labels: Vec<usize>,
            adversarial_labels: Vec<usize>,
            success_mask: Vec<bool>,
            mean_l2: f64,
            shape: Vec<usize>,
        }
        if bytes.len() < 16 || &bytes[..8] != BATCH_MAGIC {
            return Err(Error::Format {
                field: "magic".into(),
                message: format!("expected {BATCH_MAGIC:?}"),
            });
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version > BATCH_VERSION {
            return Err(Error::UnsupportedVersion { found: version, supported: BATCH_VERSION });
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let header_bytes = bytes.get(16..16 + hlen).ok_or_else(|| Error::Format {
            field: "header".into(),
            message: "file truncated".into(),
        })?;
        let header: Header = serde_json::from_slice(header_bytes)?;
        let numel: usize = header.shape.iter().product();
        let need = 16 + hlen + numel * 16;
        if bytes.len() != need {
            return Err(Error::Format {
                field: "payload".into(),
                message: format!("expected {need} bytes, found {}", bytes.len()),
            });
        }
        let mut cursor = 16 + hlen;
        let mut read_tensor = |shape: &[usize]| -> Tensor {
            let count: usize = shape.iter().product();
            let data: Vec<f64> = bytes[cursor..cursor + count * 8]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor += count * 8;
            Tensor::from_parts(shape.to_vec(), data)
        };
        let originals = read_tensor(&header.shape);
        let perturbed = read_tensor(&header.shape);
        Ok(AdversarialBatch {
            originals,
            perturbed,
            original_labels: header.original_labels,
            adversarial_labels: header.adversarial_labels,
            success_mask: header.success_mask,
            mean_l2: header.mean_l2,
            config: header.config,
        })
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// One signed step from `x`, projected into the epsilon ball around `x0`
/// and the domain clip range. `ascend` adds the step, otherwise subtracts.
fn sign_step(
    x: &Tensor,
    x0: &Tensor,
    grad: &Tensor,
    alpha: f64,
    epsilon: f64,
    clip: Option<(f64, f64)>,
    ascend: bool,
) -> Tensor {
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let step = alpha * sign(grad.data()[i]);
        let mut v = if ascend { x.data()[i] + step } else { x.data()[i] - step };
        let base = x0.data()[i];
        v = v.clamp(base - epsilon, base + epsilon);
        if let Some((lo, hi)) = clip {
            v = v.clamp(lo, hi);
        }
        out.push(v);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// Uniform(-epsilon, epsilon) init draw per sample, each from its own
/// derived seed, then clipped into the domain.
fn random_init(x0: &Tensor, cfg: &AttackConfig) -> Tensor {
    if cfg.zero_init || cfg.epsilon == 0.0 {
        return x0.clone();
    }
    let n = x0.shape()[0];
    let d = x0.numel() / n;
    let base = derive_seed(cfg.seed, "attack-init");
    let mut out = vec![0.0; x0.numel()];
    out.par_chunks_mut(d).enumerate().for_each(|(i, row)| {
        let mut rng = ChaCha12Rng::seed_from_u64(base.wrapping_add(i as u64));
        let src = &x0.data()[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            let mut v = src[j] + rng.gen_range(-cfg.epsilon..cfg.epsilon);
            if let Some((lo, hi)) = cfg.clip {
                v = v.clamp(lo, hi);
            }
            *r = v;
        }
    });
    Tensor::from_parts(x0.shape().to_vec(), out)
}

/// delta = epsilon * sign(grad_x J); one signed ascent step from the input.
pub fn fgsm(model: &TrainedModel, x: &Tensor, y: &[usize], epsilon: f64) -> Result<AdversarialBatch> {
    let mut cfg = AttackConfig::new(AttackKind::Fgsm, epsilon);
    cfg.alpha = Some(epsilon);
    cfg.steps = 1;
    iterative_ce_attack(model, x, y, cfg, false)
}

/// Iterative FGSM with per-step projection into the epsilon ball and the
/// domain range. bim(steps=1, alpha=epsilon) is exactly fgsm.
pub fn bim(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    alpha: Option<f64>,
    steps: usize,
) -> Result<AdversarialBatch> {
    let mut cfg = AttackConfig::new(AttackKind::Bim, epsilon);
    cfg.alpha = alpha;
    cfg.steps = steps;
    iterative_ce_attack(model, x, y, cfg, false)
}

/// BIM from a random start inside the epsilon ball, deterministic by seed.
pub fn pgd(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    epsilon: f64,
    alpha: Option<f64>,
    steps: usize,
    seed: u64,
) -> Result<AdversarialBatch> {
    let mut cfg = AttackConfig::new(AttackKind::Pgd, epsilon).with_seed(seed);
    cfg.alpha = alpha;
    cfg.steps = steps;
    iterative_ce_attack(model, x, y, cfg, true)
}

fn iterative_ce_attack(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
    random_start: bool,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let x0 = model.conform_batch(x)?;
    let graph = model.graph();
    let alpha = cfg.alpha();
    let mut cur = if random_start { random_init(&x0, &cfg) } else { x0.clone() };
    for _ in 0..cfg.steps {
        let (_, grad) = graph.input_loss_grad(&cur, y)?;
        grad.ensure_finite("attack gradient")?;
        cur = sign_step(&cur, &x0, &grad, alpha, cfg.epsilon, cfg.clip, true);
    }
    AdversarialBatch::build(model, x0, cur, y.to_vec(), cfg)
}

/// Zero-confidence logit-margin descent: minimize
/// g(x') = max(Z_y(x') - max_{j != y} Z_j(x'), -kappa) with kappa = 0,
/// stepping by `cw_lr` times the raw gradient and projecting into the
/// epsilon ball and domain each iterate. Returns the successful iterate
/// with the least L2 distortion, else the final iterate.
pub fn cw_linf(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let x0 = model.conform_batch(x)?;
    let graph = model.graph();
    let n = x0.shape()[0];
    let d = x0.numel() / n;
    let k = graph.output_len();

    let mut cur = x0.clone();
    let mut best: Vec<Option<(f64, Vec<f64>)>> = vec![None; n];

    let consider = |cur: &Tensor, logits: &Tensor, best: &mut Vec<Option<(f64, Vec<f64>)>>| {
        let labels = argmax_labels(logits);
        for i in 0..n {
            if labels[i] != y[i] {
                let o = &x0.data()[i * d..(i + 1) * d];
                let p = &cur.data()[i * d..(i + 1) * d];
                let l2 = o.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                if best[i].as_ref().map_or(true, |(b, _)| l2 < *b) {
                    best[i] = Some((l2, p.to_vec()));
                }
            }
        }
    };

    for _ in 0..cfg.cw_iters {
        let trace = graph.forward_trace(&cur)?;
        let logits = trace.output().clone();
        logits.ensure_finite("cw logits")?;
        consider(&cur, &logits, &mut best);

        // Cotangent e_y - e_j* on samples where the margin is still
        // positive; saturated samples (g <= -kappa = 0) get zero rows.
        let mut cot = Tensor::zeros(&[n, k]);
        let mut any_active = false;
        for i in 0..n {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut rival = usize::MAX;
            for j in 0..k {
                if j != y[i] && (rival == usize::MAX || row[j] > row[rival]) {
                    rival = j;
                }
            }
            let margin = row[y[i]] - row[rival];
            if margin > 0.0 {
                cot.data_mut()[i * k + y[i]] = 1.0;
                cot.data_mut()[i * k + rival] = -1.0;
                any_active = true;
            }
        }
        if !any_active {
            break;
        }
        let (dx, _) = graph.vjp(&trace, &cot)?;
        let mut next = Vec::with_capacity(cur.numel());
        for i in 0..cur.numel() {
            let base = x0.data()[i];
            let mut v = cur.data()[i] - cfg.cw_lr * dx.data()[i];
            v = v.clamp(base - cfg.epsilon, base + cfg.epsilon);
            if let Some((lo, hi)) = cfg.clip {
                v = v.clamp(lo, hi);
            }
            next.push(v);
        }
        cur = Tensor::from_parts(cur.shape().to_vec(), next);
    }
    let logits = graph.forward(&cur)?;
    consider(&cur, &logits, &mut best);

    let mut out = Vec::with_capacity(x0.numel());
    for i in 0..n {
        match &best[i] {
            Some((_, p)) => out.extend_from_slice(p),
            None => out.extend_from_slice(&cur.data()[i * d..(i + 1) * d]),
        }
    }
    let perturbed = Tensor::from_parts(x0.shape().to_vec(), out);
    AdversarialBatch::build(model, x0, perturbed, y.to_vec(), cfg)
}

/// Warm-started joint descent on L1 + c * ||IG(x*) - IG(x)||_2, where L1 is
/// the negative cross-entropy of the true label. The attribution term's
/// gradient treats the mean path gradient as locally constant (a Jacobian
/// diagonal), so each step costs one quadrature pass instead of a
/// second-order sweep.
pub fn adaptive_ig(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
) -> Result<AdversarialBatch> {
    adaptive_attack(model, x, y, cfg, true, false, true)
}

/// Joint descent on L1 + ||Z(x*) - Z(x)||_2^2 / k (logit matching).
pub fn adaptive_logit(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
) -> Result<AdversarialBatch> {
    adaptive_attack(model, x, y, cfg, false, true, false)
}

/// Warm-started joint descent on L1 + c * L2(IG) + L3(logits).
pub fn adaptive_combined(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
) -> Result<AdversarialBatch> {
    adaptive_attack(model, x, y, cfg, true, true, true)
}

fn adaptive_attack(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: AttackConfig,
    use_ig: bool,
    use_logit: bool,
    warm_start: bool,
) -> Result<AdversarialBatch> {
    cfg.validate()?;
    let x0 = model.conform_batch(x)?;
    let graph = model.graph();
    let n = x0.shape()[0];
    let d = x0.numel() / n;
    let k = graph.output_len();
    let alpha = cfg.alpha();
    let ig_active = use_ig && cfg.c != 0.0;

    let ref_logits = if use_logit { Some(graph.forward(&x0)?) } else { None };
    let ig_ref: Option<Vec<Tensor>> = if ig_active {
        let rows: Result<Vec<Tensor>> = (0..n)
            .into_par_iter()
            .map(|i| {
                let xi = x0.row(i)?;
                let u = Tensor::zeros(xi.shape());
                Ok(ig_numeric_full(graph, &xi, &u, y[i], cfg.ig_steps)?.map.scores)
            })
            .collect();
        Some(rows?)
    } else {
        None
    };

    let mut cur = random_init(&x0, &cfg);
    let warm_steps = if warm_start { cfg.warm_start_steps } else { 0 };
    for _ in 0..warm_steps {
        let (_, grad) = graph.input_loss_grad(&cur, y)?;
        cur = sign_step(&cur, &x0, &grad, alpha, cfg.epsilon, cfg.clip, true);
    }

    for _ in 0..cfg.steps {
        let (_, gce) = graph.input_loss_grad(&cur, y)?;
        let mut total = gce.scale(-1.0);

        if let Some(ref_z) = &ref_logits {
            let z = graph.forward(&cur)?;
            let diff = z.sub(ref_z)?;
            let cot = diff.scale(2.0 / k as f64);
            let g3 = graph.input_vjp(&cur, &cot)?;
            total = total.add(&g3)?;
        }

        if let Some(refs) = &ig_ref {
            let grads: Result<Vec<Vec<f64>>> = (0..n)
                .into_par_iter()
                .map(|i| {
                    let xi = cur.row(i)?;
                    let u = Tensor::zeros(xi.shape());
                    let eval = ig_numeric_full(graph, &xi, &u, y[i], cfg.ig_steps)?;
                    let diff = eval.map.scores.sub(&refs[i])?;
                    let norm = diff.l2_norm();
                    if norm < 1e-12 {
                        return Ok(vec![0.0; d]);
                    }
                    Ok(diff
                        .data()
                        .iter()
                        .zip(eval.mean_path_gradient.data())
                        .map(|(df, g)| cfg.c * df / norm * g)
                        .collect())
                })
                .collect();
            let mut flat = Vec::with_capacity(n * d);
            for row in grads? {
                flat.extend_from_slice(&row);
            }
            total = total.add(&Tensor::from_parts(cur.shape().to_vec(), flat))?;
        }

        total.ensure_finite("adaptive attack gradient")?;
        cur = sign_step(&cur, &x0, &total, alpha, cfg.epsilon, cfg.clip, false);
    }
    AdversarialBatch::build(model, x0, cur, y.to_vec(), cfg)
}

/// Dispatch on the configured attack kind.
pub fn run_attack(
    model: &TrainedModel,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
) -> Result<AdversarialBatch> {
    match cfg.kind {
        AttackKind::Fgsm => {
            let mut c = cfg.clone();
            c.alpha = Some(cfg.epsilon);
            c.steps = 1;
            iterative_ce_attack(model, x, y, c, false)
        }
        AttackKind::Bim => iterative_ce_attack(model, x, y, cfg.clone(), false),
        AttackKind::Pgd => iterative_ce_attack(model, x, y, cfg.clone(), true),
        AttackKind::Cw => cw_linf(model, x, y, cfg.clone()),
        AttackKind::AdaptiveIg => adaptive_attack(model, x, y, cfg.clone(), true, false, true),
        AttackKind::AdaptiveLogit => adaptive_attack(model, x, y, cfg.clone(), false, true, false),
        AttackKind::AdaptiveCombined => adaptive_attack(model, x, y, cfg.clone(), true, true, true),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_blobs;
    use crate::graph::{Graph, Node};
    use crate::models::{train, ModelSpec, TrainConfig, TrainedModel, TrainingMetadata};
    use std::collections::BTreeMap;

    /// Two-logit linear model z = W x with rows w0 = [0,1], w1 = [1,0].
    fn cross_model() -> TrainedModel {
        let mut params = BTreeMap::new();
        params.insert(
            "w".to_string(),
            Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        );
        params.insert("b".to_string(), Tensor::zeros(&[2]));
        let graph = Graph::new(
            vec![2],
            vec![Node::Dense { weight: "w".into(), bias: "b".into() }],
            params,
        )
        .unwrap();
        TrainedModel::from_parts(
            ModelSpec::mlp(vec![2], vec![], 2),
            graph,
            TrainingMetadata { epochs: 0, seed: 0, final_accuracy: 1.0 },
        )
    }

    fn blob_model() -> (TrainedModel, Tensor, Vec<usize>) {
        let ds = synth_blobs(2, 4, 300, 2.0, 21).unwrap();
        let spec = ModelSpec::mlp(vec![4], vec![12], 2);
        let cfg = TrainConfig { epochs: 25, batch: 32, lr: 0.01, ..Default::default() };
        let model = train(&spec, &ds, &ds, &cfg).unwrap();
        let idx: Vec<usize> = (0..40).collect();
        let sub = ds.subset(&idx).unwrap();
        (model, sub.features, sub.labels)
    }

    fn no_clip(mut cfg: AttackConfig) -> AttackConfig {
        cfg.clip = None;
        cfg
    }

    #[test]
    fn fgsm_matches_hand_gradient() {
        let model = cross_model();
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let batch = fgsm(&model, &x, &[0], 0.1).unwrap();
        let p = batch.perturbed.data();
        assert!((p[0] - 0.6).abs() < 1e-12, "{p:?}");
        assert!((p[1] - 0.4).abs() < 1e-12, "{p:?}");
    }

    #[test]
    fn fgsm_zero_epsilon_is_identity() {
        let model = cross_model();
        let x = Tensor::new(vec![1, 2], vec![0.3, 0.8]).unwrap();
        let batch = fgsm(&model, &x, &[0], 0.0).unwrap();
        assert_eq!(batch.perturbed.data(), x.data());
    }

    #[test]
    fn bim_single_step_equals_fgsm_bitwise() {
        let (model, x, y) = blob_model();
        // blobs live outside [0,1]; disable the domain clip on both paths
        let mut fa = AttackConfig::new(AttackKind::Fgsm, 0.2);
        fa.alpha = Some(0.2);
        fa.steps = 1;
        let a = iterative_ce_attack(&model, &x, &y, no_clip(fa), false).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Bim, 0.2);
        cfg.alpha = Some(0.2);
        cfg.steps = 1;
        let b = iterative_ce_attack(&model, &x, &y, no_clip(cfg), false).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn bim_iterates_stay_in_ball() {
        let (model, x, y) = blob_model();
        let eps = 0.25;
        for steps in 1..=5 {
            let mut cfg = AttackConfig::new(AttackKind::Bim, eps);
            cfg.steps = steps;
            let b = iterative_ce_attack(&model, &x, &y, no_clip(cfg), false).unwrap();
            let diff = b.perturbed.sub(&b.originals).unwrap();
            assert!(diff.linf_norm() <= eps + 1e-9);
        }
    }

    #[test]
    fn pgd_is_seed_deterministic() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::Pgd, 0.2).with_seed(5);
        cfg.steps = 8;
        let a = iterative_ce_attack(&model, &x, &y, no_clip(cfg.clone()), true).unwrap();
        let b = iterative_ce_attack(&model, &x, &y, no_clip(cfg), true).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn pgd_zero_init_single_step_collapses_to_fgsm() {
        let (model, x, y) = blob_model();
        let mut pa = AttackConfig::new(AttackKind::Pgd, 0.2);
        pa.alpha = Some(0.2);
        pa.steps = 1;
        pa.zero_init = true;
        let a = iterative_ce_attack(&model, &x, &y, no_clip(pa), true).unwrap();
        let mut fa = AttackConfig::new(AttackKind::Fgsm, 0.2);
        fa.alpha = Some(0.2);
        fa.steps = 1;
        let b = iterative_ce_attack(&model, &x, &y, no_clip(fa), false).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn success_mask_is_label_disagreement() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::Bim, 0.4);
        cfg.steps = 10;
        let b = iterative_ce_attack(&model, &x, &y, no_clip(cfg), false).unwrap();
        for i in 0..b.len() {
            assert_eq!(
                b.success_mask[i],
                b.adversarial_labels[i] != b.original_labels[i]
            );
        }
    }

    #[test]
    fn cw_already_misclassified_succeeds_at_zero_distortion() {
        let model = cross_model();
        // logits for x = (0.9, 0.1) are z = (0.1, 0.9): argmax 1, so label
        // 0 is already misclassified before any step.
        let x = Tensor::new(vec![1, 2], vec![0.9, 0.1]).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Cw, 0.15);
        cfg.cw_iters = 5;
        let b = cw_linf(&model, &x, &[0], cfg).unwrap();
        assert!(b.success_mask[0]);
        assert_eq!(b.perturbed.data(), x.data());
        assert_eq!(b.mean_l2, 0.0);
    }

    #[test]
    fn cw_zero_epsilon_cannot_move() {
        let model = cross_model();
        let x = Tensor::new(vec![1, 2], vec![0.1, 0.9]).unwrap();
        let mut cfg = AttackConfig::new(AttackKind::Cw, 0.0);
        cfg.cw_iters = 20;
        let b = cw_linf(&model, &x, &[0], cfg).unwrap();
        assert_eq!(b.perturbed.data(), x.data());
        assert!(!b.success_mask[0]);
    }

    #[test]
    fn cw_flips_labels_on_trained_model() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::Cw, 1.2);
        cfg.cw_iters = 200;
        cfg.cw_lr = 0.05;
        let b = cw_linf(&model, &x, &y, no_clip(cfg)).unwrap();
        assert!(b.success_rate() > 0.5, "success rate {}", b.success_rate());
    }

    #[test]
    fn adaptive_ig_with_zero_c_continues_plain_pgd() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::AdaptiveIg, 0.2).with_seed(9);
        cfg.c = 0.0;
        cfg.warm_start_steps = 3;
        cfg.steps = 4;
        let a = adaptive_attack(&model, &x, &y, no_clip(cfg.clone()), true, false, true).unwrap();
        let mut pcfg = AttackConfig::new(AttackKind::Pgd, 0.2).with_seed(9);
        pcfg.steps = 7;
        let b = iterative_ce_attack(&model, &x, &y, no_clip(pcfg), true).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn adaptive_combined_with_zero_c_equals_adaptive_logit() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::AdaptiveCombined, 0.2).with_seed(9);
        cfg.c = 0.0;
        cfg.steps = 5;
        cfg.warm_start_steps = 0;
        let a = adaptive_attack(&model, &x, &y, no_clip(cfg.clone()), true, true, false).unwrap();
        let b = adaptive_attack(&model, &x, &y, no_clip(cfg), false, true, false).unwrap();
        assert_eq!(a.perturbed.data(), b.perturbed.data());
    }

    #[test]
    fn adaptive_ig_reduces_attribution_shift() {
        let (model, x, y) = blob_model();
        let take: Vec<usize> = (0..10).collect();
        let xs = Tensor::stack(&take.iter().map(|&i| x.row(i).unwrap()).collect::<Vec<_>>()).unwrap();
        let ys: Vec<usize> = take.iter().map(|&i| y[i]).collect();

        let mut pcfg = AttackConfig::new(AttackKind::Pgd, 0.5).with_seed(3);
        pcfg.steps = 30;
        let plain = iterative_ce_attack(&model, &xs, &ys, no_clip(pcfg), true).unwrap();

        let mut acfg = AttackConfig::new(AttackKind::AdaptiveIg, 0.5).with_seed(3);
        acfg.c = 30.0;
        acfg.warm_start_steps = 10;
        acfg.steps = 40;
        acfg.ig_steps = 8;
        let adaptive =
            adaptive_attack(&model, &xs, &ys, no_clip(acfg), true, false, true).unwrap();

        let shift = |batch: &AdversarialBatch| -> f64 {
            let mut total = 0.0;
            for i in 0..batch.len() {
                let xi = batch.originals.row(i).unwrap();
                let pi = batch.perturbed.row(i).unwrap();
                let u = Tensor::zeros(xi.shape());
                let a = ig_numeric_full(model.graph(), &xi, &u, ys[i], 16).unwrap().map.scores;
                let b = ig_numeric_full(model.graph(), &pi, &u, ys[i], 16).unwrap().map.scores;
                total += b.sub(&a).unwrap().l1_norm();
            }
            total
        };
        let plain_shift = shift(&plain);
        let adaptive_shift = shift(&adaptive);
        assert!(
            adaptive_shift < plain_shift,
            "adaptive {adaptive_shift} vs plain {plain_shift}"
        );
    }

    #[test]
    fn batch_container_round_trips() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::Bim, 0.3);
        cfg.steps = 4;
        let b = iterative_ce_attack(&model, &x, &y, no_clip(cfg), false).unwrap();
        let bytes = b.save();
        let back = AdversarialBatch::load(&bytes).unwrap();
        assert_eq!(b.perturbed.data(), back.perturbed.data());
        assert_eq!(b.originals.data(), back.originals.data());
        assert_eq!(b.success_mask, back.success_mask);
        assert_eq!(b.mean_l2, back.mean_l2);
        // Corrupt magic is rejected.
        let mut bad = bytes.clone();
        bad[0] ^= 0x5a;
        assert!(AdversarialBatch::load(&bad).is_err());
    }

    #[test]
    fn alpha_above_epsilon_is_rejected() {
        let (model, x, y) = blob_model();
        let mut cfg = AttackConfig::new(AttackKind::Bim, 0.1);
        cfg.alpha = Some(0.5);
        assert!(iterative_ce_attack(&model, &x, &y, no_clip(cfg), false).is_err());
    }
}
