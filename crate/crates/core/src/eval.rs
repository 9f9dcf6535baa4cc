//! Detector evaluation: threshold-independent AUC (rank-based with ties),
//! TPR at fixed benign FPR, the repeated experiment grid, and report
//! emission (fixed-schema CSV plus a JSON sidecar).

use crate::attacks::{run_attack, AttackConfig};
use crate::data::Dataset;
use crate::derive_seed;
use crate::detectors::{
    batch_pairs, combined_scores, fs_score, threshold_for_fpr, tws_score, uloo_score,
    DetectorCalibration, NoiseProbe, RejectionSide, SensitivityPair, Squeezer,
};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{predict, TrainedModel};
use crate::tensor::Tensor;
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Orientation of a detector score: Above means larger scores look more
/// adversarial.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Above,
    Below,
}

impl Direction {
    pub fn from_side(side: RejectionSide) -> Direction {
        match side {
            RejectionSide::Below => Direction::Below,
            _ => Direction::Above,
        }
    }
}

/// Average rank of each element in the pooled sample, ties sharing their
/// midrank.
fn midranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).expect("finite scores"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Rank-based AUC (Mann-Whitney) with ties counted one half. `Below`
/// flips the score orientation first.
pub fn auc(benign: &[f64], adversarial: &[f64], direction: Direction) -> Result<f64> {
    if benign.is_empty() || adversarial.is_empty() {
        return Err(Error::InvalidArgument("auc needs nonempty score sets".into()));
    }
    let flip = |s: &f64| match direction {
        Direction::Above => *s,
        Direction::Below => -*s,
    };
    let pooled: Vec<f64> = benign.iter().map(flip).chain(adversarial.iter().map(flip)).collect();
    let ranks = midranks(&pooled);
    let m = adversarial.len();
    let n = benign.len();
    let adv_rank_sum: f64 = ranks[n..].iter().sum();
    Ok((adv_rank_sum - (m * (m + 1)) as f64 / 2.0) / (n as f64 * m as f64))
}

/// Threshold at the benign quantile for the requested FPR, and the
/// fraction of adversarial scores it rejects.
pub fn tpr_at_fpr(
    benign: &[f64],
    adversarial: &[f64],
    fpr: f64,
    direction: Direction,
) -> Result<(f64, f64)> {
    if adversarial.is_empty() {
        return Err(Error::InvalidArgument("no adversarial scores".into()));
    }
    let side = match direction {
        Direction::Above => RejectionSide::Above,
        Direction::Below => RejectionSide::Below,
    };
    let threshold = threshold_for_fpr(benign, fpr, side)?;
    let rejected = adversarial
        .iter()
        .filter(|&&s| match direction {
            Direction::Above => s > threshold,
            Direction::Below => s < threshold,
        })
        .count();
    Ok((rejected as f64 / adversarial.len() as f64, threshold))
}

/// Spearman rank correlation (midranks, then Pearson on the ranks).
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument("spearman needs two equal-length series".into()));
    }
    let ra = midranks(a);
    let rb = midranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - mean;
        let db = rb[i] - mean;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::DegenerateScores("constant ranks".into()));
    }
    Ok(cov / (va.sqrt() * vb.sqrt()))
}

/// Detector identities the grid can evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorKind {
    /// Combined noise-probe detector (prediction + attribution, OR rule).
    Sensitivity,
    /// Prediction sensitivity alone.
    PredictionOnly,
    /// Attribution sensitivity alone.
    AttributionOnly,
    /// Softmax shift under noise.
    Tws,
    /// Attribution-entry interquartile range.
    Uloo,
    /// Feature squeezing.
    Fs,
}

impl DetectorKind {
    pub fn name(&self) -> &'static str {
        match self {
            DetectorKind::Sensitivity => "sensitivity",
            DetectorKind::PredictionOnly => "ps",
            DetectorKind::AttributionOnly => "as",
            DetectorKind::Tws => "tws",
            DetectorKind::Uloo => "uloo",
            DetectorKind::Fs => "fs",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "sensitivity" => Ok(DetectorKind::Sensitivity),
            "ps" => Ok(DetectorKind::PredictionOnly),
            "as" => Ok(DetectorKind::AttributionOnly),
            "tws" => Ok(DetectorKind::Tws),
            "uloo" => Ok(DetectorKind::Uloo),
            "fs" => Ok(DetectorKind::Fs),
            other => Err(Error::Config(format!(
                "unknown detector {other:?}; valid: sensitivity, ps, as, tws, uloo, fs"
            ))),
        }
    }
}

/// Detectors plus the orientation each learned from a validation set.
#[derive(Debug, Clone)]
pub struct DetectorSuite {
    pub kinds: Vec<DetectorKind>,
    pub probe: NoiseProbe,
    pub squeezers: Vec<Squeezer>,
    pub directions: BTreeMap<DetectorKind, Direction>,
}

impl DetectorSuite {
    /// Uses the given directions (Above everywhere unless stated).
    pub fn with_defaults(kinds: Vec<DetectorKind>, probe: NoiseProbe, squeezers: Vec<Squeezer>) -> Self {
        let directions = kinds.iter().map(|&k| (k, Direction::Above)).collect();
        DetectorSuite { kinds, probe, squeezers, directions }
    }

    /// Chooses each detector's rejection side by validation AUC over a
    /// benign/adversarial feature pair.
    pub fn tune(
        model: &TrainedModel,
        benign: &Tensor,
        adversarial: &Tensor,
        kinds: Vec<DetectorKind>,
        probe: NoiseProbe,
        squeezers: Vec<Squeezer>,
    ) -> Result<Self> {
        let mut suite = DetectorSuite::with_defaults(kinds, probe, squeezers);
        let scored_b = score_all(model, benign, &suite)?;
        let scored_a = score_all(model, adversarial, &suite)?;
        for &kind in &suite.kinds {
            let b = per_kind_scores(&scored_b, kind, &suite, &scored_b);
            let a = per_kind_scores(&scored_a, kind, &suite, &scored_b);
            let above = auc(&b, &a, Direction::Above)?;
            let below = auc(&b, &a, Direction::Below)?;
            let dir = if below > above { Direction::Below } else { Direction::Above };
            suite.directions.insert(kind, dir);
        }
        Ok(suite)
    }

    pub fn direction(&self, kind: DetectorKind) -> Direction {
        self.directions.get(&kind).copied().unwrap_or(Direction::Above)
    }
}

/// Raw per-sample material the scalar scores are derived from.
struct ScoredBatch {
    pairs: Vec<SensitivityPair>,
    tws: Option<Vec<f64>>,
    uloo: Option<Vec<f64>>,
    fs: Option<Vec<f64>>,
}

fn score_all(model: &TrainedModel, features: &Tensor, suite: &DetectorSuite) -> Result<ScoredBatch> {
    let graph = model.graph();
    let conformed = model.conform_batch(features)?;
    let needs_pairs = suite.kinds.iter().any(|k| {
        matches!(
            k,
            DetectorKind::Sensitivity | DetectorKind::PredictionOnly | DetectorKind::AttributionOnly
        )
    });
    let pairs = if needs_pairs {
        batch_pairs(graph, &conformed, &suite.probe)?
    } else {
        Vec::new()
    };
    let n = conformed.shape()[0];
    let tws = if suite.kinds.contains(&DetectorKind::Tws) {
        Some(
            (0..n)
                .into_par_iter()
                .map(|i| tws_score(graph, &conformed.row(i)?, &suite.probe.for_sample(i)))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    let uloo = if suite.kinds.contains(&DetectorKind::Uloo) {
        Some(
            (0..n)
                .into_par_iter()
                .map(|i| uloo_score(graph, &conformed.row(i)?))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    let fs = if suite.kinds.contains(&DetectorKind::Fs) {
        Some(
            (0..n)
                .into_par_iter()
                .map(|i| fs_score(graph, &conformed.row(i)?, &suite.squeezers))
                .collect::<Result<Vec<f64>>>()?,
        )
    } else {
        None
    };
    Ok(ScoredBatch { pairs, tws, uloo, fs })
}

/// Scalar scores for one detector. The combined detector maps each metric
/// through the benign reference pool's rejection quantile and takes the
/// more extreme of the two, so its threshold sweep reproduces the OR rule
/// at matched per-metric FPR.
fn per_kind_scores(
    batch: &ScoredBatch,
    kind: DetectorKind,
    suite: &DetectorSuite,
    benign_reference: &ScoredBatch,
) -> Vec<f64> {
    match kind {
        DetectorKind::Sensitivity => {
            let side_ps = match suite.direction(DetectorKind::PredictionOnly) {
                Direction::Below => RejectionSide::Below,
                Direction::Above => RejectionSide::Above,
            };
            let side_as = match suite.direction(DetectorKind::AttributionOnly) {
                Direction::Below => RejectionSide::Below,
                Direction::Above => RejectionSide::Above,
            };
            let (_, scores) =
                combined_scores(&benign_reference.pairs, &batch.pairs, side_ps, side_as);
            scores
        }
        DetectorKind::PredictionOnly => batch.pairs.iter().map(|p| p.prediction).collect(),
        DetectorKind::AttributionOnly => batch.pairs.iter().map(|p| p.attribution).collect(),
        DetectorKind::Tws => batch.tws.clone().unwrap_or_default(),
        DetectorKind::Uloo => batch.uloo.clone().unwrap_or_default(),
        DetectorKind::Fs => batch.fs.clone().unwrap_or_default(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub attack: String,
    pub epsilon: f64,
    pub detector: String,
    pub auc: f64,
    pub auc_std: f64,
    pub tpr_fpr01: f64,
    pub tpr_fpr05: f64,
    pub tpr_fpr10: f64,
    /// Fresh-benign FPR at the calibration-pool 5% threshold.
    pub fpr_emp: f64,
    pub n_benign: usize,
    pub n_adv: usize,
    /// True when some repeat produced zero successful adversarial samples.
    pub flagged: bool,
    pub attack_success_rate: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub repeats: usize,
    pub seed: u64,
    pub repeat_seeds: Vec<u64>,
    pub config_echo: serde_json::Value,
}

pub const REPORT_CSV_HEADER: &str =
    "attack,epsilon,detector,auc,auc_std,tpr_fpr01,tpr_fpr05,tpr_fpr10,fpr_emp,n_benign,n_adv";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{},{}\n",
                r.attack,
                r.epsilon,
                r.detector,
                r.auc,
                r.auc_std,
                r.tpr_fpr01,
                r.tpr_fpr05,
                r.tpr_fpr10,
                r.fpr_emp,
                r.n_benign,
                r.n_adv
            ));
        }
        out
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn row(&self, attack: &str, epsilon: f64, detector: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| {
            r.attack == attack && (r.epsilon - epsilon).abs() < 1e-12 && r.detector == detector
        })
    }
}

#[derive(Debug, Clone)]
pub struct GridConfig {
    pub repeats: usize,
    /// Benign samples drawn per repeat (adversarial counterparts are
    /// crafted from the same samples).
    pub n_eval: usize,
    pub seed: u64,
}

/// Runs the full grid: per repeat, samples correctly classified benign
/// inputs from the test pool, crafts adversarial counterparts per attack,
/// scores every detector, and aggregates mean and std over repeats.
/// Adversarial pools keep only successful attacks; empty pools flag the
/// row instead of dropping it. Fully reproducible given the seed.
pub fn run_grid(
    model: &TrainedModel,
    test_pool: &Dataset,
    calib_pool: &Dataset,
    suite: &DetectorSuite,
    attacks: &[AttackConfig],
    grid: &GridConfig,
) -> Result<EvalReport> {
    if attacks.is_empty() || suite.kinds.is_empty() {
        return Err(Error::InvalidArgument("need at least one attack and one detector".into()));
    }
    if grid.repeats == 0 {
        return Err(Error::InvalidArgument("repeats must be at least 1".into()));
    }

    // Benign evaluation pool: correctly classified only.
    let (_, labels) = predict(model, &test_pool.features)?;
    let eligible: Vec<usize> = (0..test_pool.len())
        .filter(|&i| labels[i] == test_pool.labels[i])
        .collect();
    if eligible.len() < grid.n_eval {
        return Err(Error::InsufficientSamples(format!(
            "{} correctly classified test samples, need {}",
            eligible.len(),
            grid.n_eval
        )));
    }

    // Calibration-pool scores: reference thresholds for the empirical FPR
    // column. One scoring pass, reused across repeats.
    let calib_scored = score_all(model, &calib_pool.features, suite)?;

    struct CellStats {
        aucs: Vec<f64>,
        tprs: [Vec<f64>; 3],
        fprs: Vec<f64>,
        n_adv: Vec<usize>,
        success: Vec<f64>,
        flagged: bool,
    }
    let mut cells: BTreeMap<(String, String), CellStats> = BTreeMap::new();
    let mut repeat_seeds = Vec::with_capacity(grid.repeats);

    for rep in 0..grid.repeats {
        let rep_seed = derive_seed(grid.seed, &format!("repeat-{rep}"));
        repeat_seeds.push(rep_seed);
        let mut rng = ChaCha12Rng::seed_from_u64(rep_seed);
        let mut picks = eligible.clone();
        picks.shuffle(&mut rng);
        picks.truncate(grid.n_eval);
        let benign = test_pool.subset(&picks)?;
        let benign_scored = score_all(model, &benign.features, suite)?;

        for attack in attacks {
            let mut cfg = attack.clone();
            cfg.seed = derive_seed(rep_seed, &format!("attack-{}", attack.kind.name()));
            let batch = run_attack(model, &benign.features, &benign.labels, &cfg)?;
            let keep = batch.successful_indices();
            let success_rate = batch.success_rate();

            let adv_scored = if keep.is_empty() {
                None
            } else {
                let rows: Result<Vec<Tensor>> =
                    keep.iter().map(|&i| batch.perturbed.row(i)).collect();
                let adv_features = Tensor::stack(&rows?)?;
                Some(score_all(model, &adv_features, suite)?)
            };

            for &kind in &suite.kinds {
                let key = (format!("{}|{}", attack.kind.name(), attack.epsilon), kind.name().to_string());
                let entry = cells.entry(key).or_insert_with(|| CellStats {
                    aucs: Vec::new(),
                    tprs: [Vec::new(), Vec::new(), Vec::new()],
                    fprs: Vec::new(),
                    n_adv: Vec::new(),
                    success: Vec::new(),
                    flagged: false,
                });
                entry.success.push(success_rate);
                match &adv_scored {
                    None => {
                        entry.flagged = true;
                        entry.n_adv.push(0);
                    }
                    Some(adv) => {
                        let b = per_kind_scores(&benign_scored, kind, suite, &benign_scored);
                        let a = per_kind_scores(adv, kind, suite, &benign_scored);
                        let dir = match kind {
                            DetectorKind::Sensitivity => Direction::Above,
                            other => suite.direction(other),
                        };
                        entry.aucs.push(auc(&b, &a, dir)?);
                        for (slot, f) in [0.01, 0.05, 0.10].iter().enumerate() {
                            let (tpr, _) = tpr_at_fpr(&b, &a, *f, dir)?;
                            entry.tprs[slot].push(tpr);
                        }
                        let calib = per_kind_scores(&calib_scored, kind, suite, &benign_scored);
                        let dir_side = match dir {
                            Direction::Above => RejectionSide::Above,
                            Direction::Below => RejectionSide::Below,
                        };
                        let thr = threshold_for_fpr(&calib, 0.05, dir_side)?;
                        let fpr = b
                            .iter()
                            .filter(|&&s| match dir {
                                Direction::Above => s > thr,
                                Direction::Below => s < thr,
                            })
                            .count() as f64
                            / b.len() as f64;
                        entry.fprs.push(fpr);
                        entry.n_adv.push(a.len());
                    }
                }
            }
        }
    }

    let mean = |v: &[f64]| -> f64 {
        if v.is_empty() {
            f64::NAN
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    };
    let std = |v: &[f64]| -> f64 {
        if v.len() < 2 {
            0.0
        } else {
            let m = mean(v);
            (v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
        }
    };

    let mut rows = Vec::with_capacity(cells.len());
    for ((attack_key, detector), stats) in cells {
        let (attack, epsilon) = attack_key.split_once('|').expect("key format");
        rows.push(EvalRow {
            attack: attack.to_string(),
            epsilon: epsilon.parse().expect("epsilon echo"),
            detector,
            auc: mean(&stats.aucs),
            auc_std: std(&stats.aucs),
            tpr_fpr01: mean(&stats.tprs[0]),
            tpr_fpr05: mean(&stats.tprs[1]),
            tpr_fpr10: mean(&stats.tprs[2]),
            fpr_emp: mean(&stats.fprs),
            n_benign: grid.n_eval,
            n_adv: (stats.n_adv.iter().sum::<usize>() as f64 / stats.n_adv.len().max(1) as f64)
                .round() as usize,
            flagged: stats.flagged,
            attack_success_rate: mean(&stats.success),
        });
    }

    Ok(EvalReport {
        rows,
        repeats: grid.repeats,
        seed: grid.seed,
        repeat_seeds,
        config_echo: serde_json::json!({
            "n_eval": grid.n_eval,
            "detectors": suite.kinds.iter().map(|k| k.name()).collect::<Vec<_>>(),
            "attacks": attacks,
        }),
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FprRow {
    pub target: f64,
    pub fpr_prediction: f64,
    pub fpr_attribution: f64,
    pub fpr_union: f64,
}

/// Empirical test-set FPR per calibration target: per metric and for the
/// OR-combined rule.
pub fn fpr_curve(
    calibrations: &[DetectorCalibration],
    graph: &Graph,
    benign_test: &Tensor,
) -> Result<Vec<FprRow>> {
    let mut rows = Vec::with_capacity(calibrations.len());
    for cal in calibrations {
        let pairs = batch_pairs(graph, benign_test, &cal.probe)?;
        let n = pairs.len().max(1) as f64;
        let mut ps = 0usize;
        let mut at = 0usize;
        let mut either = 0usize;
        for p in &pairs {
            let rp = !cal.prediction.accepts(p.prediction);
            let ra = !cal.attribution.accepts(p.attribution);
            ps += rp as usize;
            at += ra as usize;
            either += (rp || ra) as usize;
        }
        rows.push(FprRow {
            target: cal.fpr_target,
            fpr_prediction: ps as f64 / n,
            fpr_attribution: at as f64 / n,
            fpr_union: either as f64 / n,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// O(n*m) pairwise AUC with half weight on ties; the independent
    /// oracle for the rank-based implementation.
    fn brute_force_auc(benign: &[f64], adversarial: &[f64]) -> f64 {
        let mut total = 0.0;
        for &a in adversarial {
            for &b in benign {
                total += if a > b {
                    1.0
                } else if a == b {
                    0.5
                } else {
                    0.0
                };
            }
        }
        total / (benign.len() * adversarial.len()) as f64
    }

    #[test]
    fn auc_perfect_separation() {
        let a = auc(&[0.1, 0.2], &[0.8, 0.9], Direction::Above).unwrap();
        assert_eq!(a, 1.0);
    }

    #[test]
    fn auc_identical_multisets_is_half() {
        let s = [0.3, 0.5, 0.5, 0.9];
        assert_eq!(auc(&s, &s, Direction::Above).unwrap(), 0.5);
    }

    #[test]
    fn auc_matches_brute_force_with_ties() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.gen_range(1..40);
            let m = rng.gen_range(1..40);
            // Coarse grid forces plenty of ties.
            let benign: Vec<f64> = (0..n).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let adv: Vec<f64> = (0..m).map(|_| rng.gen_range(0..10) as f64 / 10.0).collect();
            let fast = auc(&benign, &adv, Direction::Above).unwrap();
            let slow = brute_force_auc(&benign, &adv);
            assert!((fast - slow).abs() < 1e-12, "{fast} vs {slow}");
        }
    }

    #[test]
    fn auc_direction_flip_is_complement() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        let benign: Vec<f64> = (0..30).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let adv: Vec<f64> = (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let above = auc(&benign, &adv, Direction::Above).unwrap();
        let below = auc(&benign, &adv, Direction::Below).unwrap();
        assert!((above + below - 1.0).abs() < 1e-12);
    }

    #[test]
    fn auc_invariant_under_increasing_transform() {
        let benign = [0.1, 0.4, 0.7];
        let adv = [0.3, 0.8, 0.9, 0.95];
        let f = |v: f64| (v * 3.0).exp() + 10.0;
        let a = auc(&benign, &adv, Direction::Above).unwrap();
        let tb: Vec<f64> = benign.iter().map(|&v| f(v)).collect();
        let ta: Vec<f64> = adv.iter().map(|&v| f(v)).collect();
        let b = auc(&tb, &ta, Direction::Above).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn tpr_at_fpr_worked_examples() {
        let benign: Vec<f64> = (1..=100).map(|v| v as f64).collect();
        let adv: Vec<f64> = (96..=105).map(|v| v as f64).collect();
        let (tpr, thr) = tpr_at_fpr(&benign, &adv, 0.05, Direction::Above).unwrap();
        assert_eq!(thr, 95.0);
        assert_eq!(tpr, 1.0);

        // Perfect separation at any fpr.
        let (tpr, _) = tpr_at_fpr(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0],
            &[50.0, 60.0], 0.1, Direction::Above).unwrap();
        assert_eq!(tpr, 1.0);
    }

    #[test]
    fn tpr_identical_distributions_tracks_fpr() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let pool: Vec<f64> = (0..4000).map(|_| rng.gen_range(0.0..1.0)).collect();
        let (benign, adv) = pool.split_at(2000);
        let (tpr, _) = tpr_at_fpr(benign, adv, 0.1, Direction::Above).unwrap();
        assert!((tpr - 0.1).abs() < 0.03, "tpr {tpr}");
    }

    #[test]
    fn spearman_detects_monotone_association() {
        let a: Vec<f64> = (0..50).map(|i| i as f64).collect();
        let b: Vec<f64> = a.iter().map(|v| v.exp().sqrt()).collect();
        assert!((spearman(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|v| -v).collect();
        assert!((spearman(&a, &c).unwrap() + 1.0).abs() < 1e-12);
    }

    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;
}
