//! Scratch probe over an IDX corpus on disk.
use advsense::attacks::{run_attack, AttackConfig, AttackKind};
use advsense::data::{load_idx, split};
use advsense::detectors::{batch_pairs, combined_score_auc, NoiseProbe};
use advsense::models::{train, ModelSpec, TrainConfig};
use advsense::Tensor;
use std::path::Path;
use std::time::Instant;

fn main() {
    let img = std::env::args().nth(1).unwrap();
    let lab = std::env::args().nth(2).unwrap();
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(3);
    let pool: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(250);
    let ds = load_idx(Path::new(&img), Path::new(&lab)).unwrap();
    let [train_set, _calib, _holdout, test] = split(&ds, [0.6, 0.15, 0.1, 0.15], 7).unwrap();

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
        (AttackKind::Pgd, 32.0 / 255.0, 40),
        (AttackKind::Pgd, 0.15, 40),
    ] {
        let mut acfg = AttackConfig::new(kind, eps).with_seed(9);
        acfg.steps = steps;
        let batch = run_attack(&model, &benign.features, &benign.labels, &acfg).unwrap();
        let keep = batch.successful_indices();
        println!("{} eps={:.4}: success {:.3}", kind.name(), eps, batch.success_rate());
        if keep.len() < 20 { continue; }
        let rows: Vec<Tensor> = keep.iter().map(|&i| batch.perturbed.row(i).unwrap()).collect();
        let adv = model.conform_batch(&Tensor::stack(&rows).unwrap()).unwrap();
        for spread in [0.01, 0.03, 0.05, 0.1, 0.2] {
            let probe = NoiseProbe::new(spread, 5);
            let pb = batch_pairs(model.graph(), &bben, &probe).unwrap();
            let pa = batch_pairs(model.graph(), &adv, &probe).unwrap();
            println!("  spread {spread:<5}: comb {:.3}", combined_score_auc(&pb, &pa).unwrap());
        }
    }
}
