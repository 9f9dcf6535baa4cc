//! Scratch pipeline probe (not shipped): trains the CNN on synthetic
//! digits and reports detector AUCs across attacks and spreads.

use advsense::attacks::{run_attack, AttackConfig, AttackKind};
use advsense::data::{split, synth_digits};
use advsense::detectors::{batch_pairs, combined_score_auc, NoiseProbe};
use advsense::eval::{auc, Direction};
use advsense::models::{train, ModelSpec, TrainConfig};
use advsense::Tensor;
use std::time::Instant;

fn main() {
    let t0 = Instant::now();
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8000);
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(2);
    let pool: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(250);
    let ds = synth_digits(n, 42).unwrap();
    let parts = split(&ds, [0.6, 0.15, 0.1, 0.15], 7).unwrap();
    let [train_set, _calib, _holdout, test] = parts;

    let spec = ModelSpec::lenet(vec![1, 28, 28], 10);
    let cfg = TrainConfig { epochs, batch: 64, lr: 0.001, seed: 1, ..Default::default() };
    let t = Instant::now();
    let model = train(&spec, &train_set, &test, &cfg).unwrap();
    println!("train {:?}  test acc={:.4}", t.elapsed(), model.metadata().final_accuracy);

    let (_, labels) = advsense::models::predict(&model, &test.features).unwrap();
    let good: Vec<usize> = (0..test.len()).filter(|&i| labels[i] == test.labels[i]).take(pool).collect();
    let benign = test.subset(&good).unwrap();
    let bben = model.conform_batch(&benign.features).unwrap();

    for (kind, eps, steps) in [
        (AttackKind::Fgsm, 8.0 / 255.0, 1),
        (AttackKind::Fgsm, 32.0 / 255.0, 1),
        (AttackKind::Pgd, 8.0 / 255.0, 40),
        (AttackKind::Pgd, 32.0 / 255.0, 40),
        (AttackKind::Pgd, 0.15, 40),
        (AttackKind::Cw, 0.15, 1),
    ] {
        let mut acfg = AttackConfig::new(kind, eps).with_seed(9);
        acfg.steps = steps;
        let t = Instant::now();
        let batch = run_attack(&model, &benign.features, &benign.labels, &acfg).unwrap();
        let keep = batch.successful_indices();
        println!("{} eps={:.4}: success {:.3} in {:?}", kind.name(), eps, batch.success_rate(), t.elapsed());
        if keep.len() < 20 { continue; }
        let rows: Vec<Tensor> = keep.iter().map(|&i| batch.perturbed.row(i).unwrap()).collect();
        let adv = Tensor::stack(&rows).unwrap();
        let badv = model.conform_batch(&adv).unwrap();
        for spread in [0.005, 0.02, 0.05, 0.1, 0.2] {
            let probe = NoiseProbe::new(spread, 5);
            let t = Instant::now();
            let pb = batch_pairs(model.graph(), &bben, &probe).unwrap();
            let pa = batch_pairs(model.graph(), &badv, &probe).unwrap();
            let comb = combined_score_auc(&pb, &pa).unwrap();
            let ps_b: Vec<f64> = pb.iter().map(|p| p.prediction).collect();
            let ps_a: Vec<f64> = pa.iter().map(|p| p.prediction).collect();
            let as_b: Vec<f64> = pb.iter().map(|p| p.attribution).collect();
            let as_a: Vec<f64> = pa.iter().map(|p| p.attribution).collect();
            let aps = auc(&ps_b, &ps_a, Direction::Above).unwrap();
            let aas = auc(&as_b, &as_a, Direction::Above).unwrap();
            println!(
                "  spread {spread:<6}: comb {comb:.3} ps {aps:.3} as {aas:.3}  ({:.1?}/sample)",
                t.elapsed() / (pb.len() + pa.len()) as u32
            );
        }
    }
    println!("total {:?}", t0.elapsed());
}
