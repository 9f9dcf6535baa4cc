//! Noise-probe detection. The primary detector draws Gaussian noise scaled
//! by a single spread hyperparameter, measures the L1 change in logits
//! (prediction sensitivity) and in integrated-gradients attribution
//! (attribution sensitivity), and flags a sample when either metric leaves
//! an acceptance interval calibrated on benign data. The softmax-shift,
//! attribution-IQR and feature-squeezing baselines live here too.

use crate::attribution::ig_numeric;
use crate::error::{Error, Result};
use crate::eval::{auc, Direction};
use crate::graph::{softmax, Graph};
use crate::sha256_hex;
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rand_distr::Normal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Quadrature steps for detector-side attribution.
pub const DETECTOR_IG_STEPS: usize = 64;

/// Benign samples required before thresholds are considered meaningful.
pub const MIN_CALIBRATION_SAMPLES: usize = 500;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Gaussian probe: per-sample standard deviation (max(x)-min(x)) * spread.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct NoiseProbe {
    pub spread: f64,
    pub seed: u64,
    /// Noise draws averaged per sample; one draw is the operating mode.
    pub draws: usize,
    /// Test override forcing eta = 0.
    #[serde(default)]
    pub zero_noise: bool,
}

impl NoiseProbe {
    pub fn new(spread: f64, seed: u64) -> Self {
        NoiseProbe { spread, seed, draws: 1, zero_noise: false }
    }

    /// Probe with a seed derived for one sample index, so batch scoring is
    /// order-stable and per-sample independent.
    pub fn for_sample(&self, index: usize) -> NoiseProbe {
        NoiseProbe { seed: self.seed.wrapping_add(splitmix(index as u64)), ..*self }
    }

    fn validate(&self) -> Result<()> {
        if self.spread <= 0.0 && !self.zero_noise {
            return Err(Error::InvalidArgument("probe spread must be positive".into()));
        }
        if self.draws == 0 {
            return Err(Error::InvalidArgument("probe draws must be at least 1".into()));
        }
        Ok(())
    }
}

/// (prediction sensitivity, attribution sensitivity) for one sample under
/// one probe; both are L1 norms, finite and nonnegative.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensitivityPair {
    pub prediction: f64,
    pub attribution: f64,
}

/// Draws noise, evaluates the sample and its noisy counterpart, and
/// returns the two L1 changes plus a degenerate-input flag (constant
/// inputs have zero noise scale and score (0,0)). The attribution target
/// is the model's predicted class on the clean input, reused for the
/// noisy one; noisy samples are not clipped back into the domain.
pub fn sensitivity(graph: &Graph, x: &Tensor, probe: &NoiseProbe) -> Result<(SensitivityPair, bool)> {
    probe.validate()?;
    let sigma = (x.max() - x.min()) * probe.spread;
    if sigma == 0.0 && !probe.zero_noise {
        return Ok((SensitivityPair { prediction: 0.0, attribution: 0.0 }, true));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(probe.seed);
    let normal = Normal::new(0.0, sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut total = SensitivityPair { prediction: 0.0, attribution: 0.0 };
    for _ in 0..probe.draws {
        let eta = if probe.zero_noise {
            Tensor::zeros(x.shape())
        } else {
            let data: Vec<f64> = (0..x.numel()).map(|_| normal.sample(&mut rng)).collect();
            Tensor::from_parts(x.shape().to_vec(), data)
        };
        let pair = sensitivity_given_noise(graph, x, &eta, DETECTOR_IG_STEPS)?;
        total.prediction += pair.prediction;
        total.attribution += pair.attribution;
    }
    total.prediction /= probe.draws as f64;
    total.attribution /= probe.draws as f64;
    Ok((total, false))
}

/// Deterministic core of `sensitivity` with the noise supplied explicitly.
pub fn sensitivity_given_noise(
    graph: &Graph,
    x: &Tensor,
    eta: &Tensor,
    ig_steps: usize,
) -> Result<SensitivityPair> {
    let z = graph.forward(x)?;
    let target = z.argmax();
    let noisy = x.add(eta)?;
    let zn = graph.forward(&noisy)?;
    let prediction = zn.sub(&z)?.l1_norm();

    let u = Tensor::zeros(x.shape());
    let ig_clean = ig_numeric(graph, x, &u, target, ig_steps)?;
    let ig_noisy = ig_numeric(graph, &noisy, &u, target, ig_steps)?;
    let attribution = ig_noisy.scores.sub(&ig_clean.scores)?.l1_norm();
    if !prediction.is_finite() || !attribution.is_finite() {
        return Err(Error::NonFinite("sensitivity".into()));
    }
    Ok(SensitivityPair { prediction, attribution })
}

/// Sensitivity pairs for every row of a feature batch, each row probed
/// with its own derived seed.
pub fn batch_pairs(graph: &Graph, features: &Tensor, probe: &NoiseProbe) -> Result<Vec<SensitivityPair>> {
    let n = features.shape()[0];
    (0..n)
        .into_par_iter()
        .map(|i| {
            let x = features.row(i)?;
            let (pair, _) = sensitivity(graph, &x, &probe.for_sample(i))?;
            Ok(pair)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionSide {
    Above,
    Below,
    TwoSided,
}

/// Acceptance interval for one metric; None bounds are unbounded.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MetricInterval {
    pub lower: Option<f64>,
    pub upper: Option<f64>,
    pub side: RejectionSide,
}

impl MetricInterval {
    pub fn accepts(&self, score: f64) -> bool {
        if let Some(lo) = self.lower {
            if score < lo {
                return false;
            }
        }
        if let Some(hi) = self.upper {
            if score > hi {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Benign,
    Adversarial,
}

/// Everything detection needs at test time, serialized as the calibration
/// JSON artifact.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub prediction: MetricInterval,
    pub attribution: MetricInterval,
    pub fpr_target: f64,
    pub probe: NoiseProbe,
    /// Only rule implemented: flag when either metric leaves its interval.
    pub combination: String,
    pub ig_steps: usize,
    pub dataset_fingerprint: String,
    /// Observed per-metric FPR on the calibration hold-out.
    pub holdout_fpr: (f64, f64),
}

impl DetectorCalibration {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("calibration serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Nearest-rank threshold so that a fraction `fpr` of the given benign
/// scores falls strictly beyond it on the rejection side.
pub fn threshold_for_fpr(scores: &[f64], fpr: f64, side: RejectionSide) -> Result<f64> {
    let n = scores.len();
    if n == 0 {
        return Err(Error::InsufficientSamples("no scores".into()));
    }
    if !(0.0..1.0).contains(&fpr) || fpr == 0.0 {
        return Err(Error::InvalidArgument(format!("fpr {fpr} outside (0,1)")));
    }
    if fpr * (n as f64) < 1.0 {
        return Err(Error::ResolutionInsufficient(format!(
            "1/{n} exceeds target fpr {fpr}"
        )));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let rank = match side {
        RejectionSide::Above => ((1.0 - fpr) * n as f64).ceil() as usize,
        RejectionSide::Below => (fpr * n as f64).ceil() as usize,
        RejectionSide::TwoSided => {
            return Err(Error::InvalidArgument(
                "two-sided thresholds are derived from two one-sided calls".into(),
            ))
        }
    };
    Ok(sorted[rank.clamp(1, n) - 1])
}

fn interval_from_threshold(threshold: f64, side: RejectionSide) -> MetricInterval {
    match side {
        RejectionSide::Above => MetricInterval { lower: None, upper: Some(threshold), side },
        RejectionSide::Below => MetricInterval { lower: Some(threshold), upper: None, side },
        RejectionSide::TwoSided => MetricInterval {
            lower: Some(threshold),
            upper: Some(threshold),
            side,
        },
    }
}

fn rejected_fraction(scores: &[f64], interval: &MetricInterval) -> f64 {
    let hits = scores.iter().filter(|&&s| !interval.accepts(s)).count();
    hits as f64 / scores.len().max(1) as f64
}

fn metric_scores(pairs: &[SensitivityPair]) -> (Vec<f64>, Vec<f64>) {
    (
        pairs.iter().map(|p| p.prediction).collect(),
        pairs.iter().map(|p| p.attribution).collect(),
    )
}

/// Picks the rejection side maximizing validation AUC for one metric.
fn side_by_validation(benign: &[f64], adversarial: &[f64]) -> RejectionSide {
    let above = auc(benign, adversarial, Direction::Above).unwrap_or(0.5);
    let below = auc(benign, adversarial, Direction::Below).unwrap_or(0.5);
    if below > above {
        RejectionSide::Below
    } else {
        RejectionSide::Above
    }
}

/// Benign and adversarial feature batches used to choose rejection sides.
pub struct ValidationSet<'a> {
    pub benign: &'a Tensor,
    pub adversarial: &'a Tensor,
}

/// Learns per-metric acceptance intervals from benign data: thresholds are
/// nearest-rank quantiles of the calibration pool, verified on the
/// hold-out pool (within two points of the target), with rejection sides
/// chosen on the validation set when one is supplied (defaulting to
/// "above"). One calibration is returned per requested FPR target.
pub fn calibrate(
    graph: &Graph,
    benign_train: &Tensor,
    benign_holdout: &Tensor,
    probe: &NoiseProbe,
    fpr_targets: &[f64],
    validation: Option<&ValidationSet>,
) -> Result<Vec<DetectorCalibration>> {
    probe.validate()?;
    let n_train = benign_train.shape()[0];
    for &f in fpr_targets {
        if f * (n_train as f64) < 1.0 {
            return Err(Error::ResolutionInsufficient(format!(
                "1/{n_train} exceeds target fpr {f}"
            )));
        }
    }
    if n_train < MIN_CALIBRATION_SAMPLES {
        return Err(Error::InsufficientSamples(format!(
            "{n_train} benign calibration samples, need {MIN_CALIBRATION_SAMPLES}"
        )));
    }

    let train_pairs = batch_pairs(graph, benign_train, probe)?;
    let holdout_pairs = batch_pairs(graph, benign_holdout, probe)?;
    let (train_ps, train_as) = metric_scores(&train_pairs);
    let (hold_ps, hold_as) = metric_scores(&holdout_pairs);

    for (name, scores) in [("prediction", &train_ps), ("attribution", &train_as)] {
        let lo = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            return Err(Error::DegenerateScores(format!("{name} scores are constant")));
        }
    }

    let (side_ps, side_as) = match validation {
        Some(v) => {
            let vb = batch_pairs(graph, v.benign, probe)?;
            let va = batch_pairs(graph, v.adversarial, probe)?;
            let (vb_ps, vb_as) = metric_scores(&vb);
            let (va_ps, va_as) = metric_scores(&va);
            (side_by_validation(&vb_ps, &va_ps), side_by_validation(&vb_as, &va_as))
        }
        None => (RejectionSide::Above, RejectionSide::Above),
    };

    let fingerprint = {
        let mut bytes = Vec::with_capacity(benign_train.numel() * 8);
        for v in benign_train.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        sha256_hex(&bytes)
    };

    let mut out = Vec::with_capacity(fpr_targets.len());
    for &f in fpr_targets {
        let interval_ps = interval_from_threshold(threshold_for_fpr(&train_ps, f, side_ps)?, side_ps);
        let interval_as = interval_from_threshold(threshold_for_fpr(&train_as, f, side_as)?, side_as);
        let fpr_ps = rejected_fraction(&hold_ps, &interval_ps);
        let fpr_as = rejected_fraction(&hold_as, &interval_as);
        for (name, got) in [("prediction", fpr_ps), ("attribution", fpr_as)] {
            if got > f + 0.02 {
                return Err(Error::DegenerateScores(format!(
                    "hold-out fpr {got:.4} for {name} exceeds target {f} + 0.02"
                )));
            }
        }
        out.push(DetectorCalibration {
            prediction: interval_ps,
            attribution: interval_as,
            fpr_target: f,
            probe: *probe,
            combination: "or-reject".to_string(),
            ig_steps: DETECTOR_IG_STEPS,
            dataset_fingerprint: fingerprint.clone(),
            holdout_fpr: (fpr_ps, fpr_as),
        });
    }
    Ok(out)
}

/// OR-reject: adversarial when either metric leaves its interval.
pub fn detect(
    graph: &Graph,
    x: &Tensor,
    calibration: &DetectorCalibration,
) -> Result<(Verdict, SensitivityPair)> {
    let (pair, _) = sensitivity(graph, x, &calibration.probe)?;
    let verdict = if calibration.prediction.accepts(pair.prediction)
        && calibration.attribution.accepts(pair.attribution)
    {
        Verdict::Benign
    } else {
        Verdict::Adversarial
    };
    Ok((verdict, pair))
}

/// `detect` with a per-sample probe seed, for streaming batch verdicts.
pub fn detect_indexed(
    graph: &Graph,
    x: &Tensor,
    index: usize,
    calibration: &DetectorCalibration,
) -> Result<(Verdict, SensitivityPair)> {
    let probe = calibration.probe.for_sample(index);
    let local = DetectorCalibration { probe, ..calibration.clone() };
    detect(graph, x, &local)
}

#[derive(Debug, Clone)]
pub struct SpreadSweep {
    pub best_spread: f64,
    /// (spread, validation AUC of the combined detector score).
    pub curve: Vec<(f64, f64)>,
}

/// Scores benign and adversarial validation pools at every spread in the
/// grid and returns the spread maximizing the combined-score AUC, with the
/// whole curve for inspection.
pub fn sweep_spread(
    graph: &Graph,
    benign: &Tensor,
    adversarial: &Tensor,
    spread_grid: &[f64],
    seed: u64,
) -> Result<SpreadSweep> {
    if spread_grid.is_empty() {
        return Err(Error::InvalidArgument("spread grid is empty".into()));
    }
    let mut curve = Vec::with_capacity(spread_grid.len());
    for &spread in spread_grid {
        let probe = NoiseProbe::new(spread, seed);
        let b = batch_pairs(graph, benign, &probe)?;
        let a = batch_pairs(graph, adversarial, &probe)?;
        curve.push((spread, combined_score_auc(&b, &a)?));
    }
    let best = curve
        .iter()
        .cloned()
        .max_by(|a, b| a.1.partial_cmp(&b.1).expect("finite auc").then(b.0.partial_cmp(&a.0).unwrap()))
        .expect("nonempty curve");
    Ok(SpreadSweep { best_spread: best.0, curve })
}

/// Scalar score for the OR-reject pair detector: each metric is mapped to
/// its benign-pool rejection quantile (side-aware) and the pair takes the
/// more extreme of the two. Thresholding this score reproduces coupled
/// per-metric quantile thresholds, so its AUC is the combined detector's
/// ranking quality.
pub fn combined_scores(
    benign: &[SensitivityPair],
    eval: &[SensitivityPair],
    side_ps: RejectionSide,
    side_as: RejectionSide,
) -> (Vec<f64>, Vec<f64>) {
    let (b_ps, b_as) = metric_scores(benign);
    let ecdf = |reference: &[f64], v: f64, side: RejectionSide| -> f64 {
        let le = reference.iter().filter(|&&r| r <= v).count() as f64;
        let ge = reference.iter().filter(|&&r| r >= v).count() as f64;
        let n = reference.len() as f64;
        match side {
            RejectionSide::Below => ge / n,
            _ => le / n,
        }
    };
    let score = |p: &SensitivityPair| -> f64 {
        let sp = ecdf(&b_ps, p.prediction, side_ps);
        let sa = ecdf(&b_as, p.attribution, side_as);
        sp.max(sa)
    };
    (benign.iter().map(score).collect(), eval.iter().map(score).collect())
}

/// AUC of the combined detector score with sides chosen by validation AUC.
pub fn combined_score_auc(benign: &[SensitivityPair], adversarial: &[SensitivityPair]) -> Result<f64> {
    let (b_ps, b_as) = metric_scores(benign);
    let (a_ps, a_as) = metric_scores(adversarial);
    let side_ps = side_by_validation(&b_ps, &a_ps);
    let side_as = side_by_validation(&b_as, &a_as);
    let (b, a) = combined_scores(benign, adversarial, side_ps, side_as);
    auc(&b, &a, Direction::Above)
}

/// L1 change in softmax under the probe; the softmax-shift baseline score.
pub fn tws_score(graph: &Graph, x: &Tensor, probe: &NoiseProbe) -> Result<f64> {
    probe.validate()?;
    let sigma = (x.max() - x.min()) * probe.spread;
    let z = graph.forward(x)?;
    let eta = if probe.zero_noise || sigma == 0.0 {
        Tensor::zeros(x.shape())
    } else {
        let mut rng = ChaCha12Rng::seed_from_u64(probe.seed);
        let normal = Normal::new(0.0, sigma).expect("valid sigma");
        let data: Vec<f64> = (0..x.numel()).map(|_| normal.sample(&mut rng)).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    };
    let zn = graph.forward(&x.add(&eta)?)?;
    Ok(softmax(&zn)?.sub(&softmax(&z)?)?.l1_norm())
}

/// Interquartile range of the attribution entries (nearest-rank
/// percentiles, target = predicted class, zero baseline); the
/// attribution-IQR baseline score.
pub fn uloo_score(graph: &Graph, x: &Tensor) -> Result<f64> {
    let z = graph.forward(x)?;
    let target = z.argmax();
    let u = Tensor::zeros(x.shape());
    let map = ig_numeric(graph, x, &u, target, DETECTOR_IG_STEPS)?;
    let mut entries = map.scores.data().to_vec();
    entries.sort_by(|a, b| a.partial_cmp(b).expect("finite scores"));
    let n = entries.len();
    let pick = |q: f64| -> f64 {
        let idx = ((q * n as f64).floor() as usize).min(n - 1);
        entries[idx]
    };
    Ok(pick(0.75) - pick(0.25))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Squeezer {
    /// Round every pixel to b bits.
    BitDepth(u32),
    /// k x k median filter per channel with edge replication.
    MedianFilter(usize),
}

/// Default squeezer pair for single-channel 8-bit style images.
pub fn mono_squeezers() -> Vec<Squeezer> {
    vec![Squeezer::BitDepth(1), Squeezer::MedianFilter(2)]
}

/// Default squeezer pair for color images.
pub fn color_squeezers() -> Vec<Squeezer> {
    vec![Squeezer::BitDepth(5), Squeezer::MedianFilter(2)]
}

fn apply_squeezer(x: &Tensor, squeezer: &Squeezer) -> Result<Tensor> {
    match squeezer {
        Squeezer::BitDepth(bits) => {
            let levels = ((1u64 << bits) - 1) as f64;
            Ok(x.map(|v| (v * levels).round() / levels))
        }
        Squeezer::MedianFilter(k) => {
            let k = *k;
            let (channels, h, w) = match x.shape() {
                [h, w] => (1, *h, *w),
                [c, h, w] => (*c, *h, *w),
                other => {
                    return Err(Error::InvalidShape(format!(
                        "median filter needs an image, got {other:?}"
                    )))
                }
            };
            let mut out = vec![0.0; x.numel()];
            let mut window = Vec::with_capacity(k * k);
            for c in 0..channels {
                let plane = &x.data()[c * h * w..(c + 1) * h * w];
                for i in 0..h {
                    for j in 0..w {
                        window.clear();
                        let lo = (k - 1) / 2;
                        for di in 0..k {
                            for dj in 0..k {
                                let ii = (i + di).saturating_sub(lo).min(h - 1);
                                let jj = (j + dj).saturating_sub(lo).min(w - 1);
                                window.push(plane[ii * w + jj]);
                            }
                        }
                        window.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
                        out[c * h * w + i * w + j] = window[window.len() / 2];
                    }
                }
            }
            Ok(Tensor::from_parts(x.shape().to_vec(), out))
        }
    }
}

/// Max over squeezers of the L1 softmax distance between the squeezed and
/// unsqueezed prediction; the feature-squeezing baseline score. Image
/// inputs only.
pub fn fs_score(graph: &Graph, x: &Tensor, squeezers: &[Squeezer]) -> Result<f64> {
    if !(x.shape().len() == 2 || x.shape().len() == 3) {
        return Err(Error::InvalidShape(format!(
            "feature squeezing needs an image input, got {:?}",
            x.shape()
        )));
    }
    if squeezers.is_empty() {
        return Err(Error::InvalidArgument("no squeezers supplied".into()));
    }
    let base = softmax(&graph.forward(x)?)?;
    let mut best = 0.0f64;
    for squeezer in squeezers {
        let squeezed = apply_squeezer(x, squeezer)?;
        let p = softmax(&graph.forward(&squeezed)?)?;
        best = best.max(p.sub(&base)?.l1_norm());
    }
    Ok(best)
}
