//! Scratch calibration runs for sizing the acceptance benchmarks.

use hetgl_core::data::{generate_synthetic, SynthConfig};
use hetgl_core::graph::Modality;
use hetgl_core::train::{run_train, RunConfig, TrainOptions};
use std::time::Instant;

fn main() {
    let which = std::env::args().nth(1).unwrap_or_else(|| "overfit".into());
    match which.as_str() {
        "overfit" => overfit(),
        "directional" => directional(),
        "diag" => diag(),
        _ => eprintln!("unknown mode"),
    }
}

fn diag() {
    let epochs: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(60);
    let dim: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(16);
    let mut cfg = SynthConfig::new(300, 3, 500);
    cfg.instances = (2, 3);
    cfg.signal = [0.12, 1.6, 0.12, 0.12];
    cfg.informative_fraction = 0.55;
    let subjects = generate_synthetic(&cfg).unwrap();

    for variant in ["full", "no_completion_zero_init", "plain_mean_knn15"] {
        let run = RunConfig {
            dim,
            heads: 4,
            layers: 2,
            epochs,
            eta_i: 0.4,
            variant: variant.into(),
            seed: 1001,
            early_stop: false,
            ..RunConfig::default()
        };
        let mut data = subjects.clone();
        let opts = TrainOptions { stop_at_train_acc: None, max_folds: Some(1) };
        let summary = run_train(&run, &mut data, None, &opts).unwrap();
        let out = &summary.outcomes[0];
        let log = &out.log;
        let first = &log[0];
        let mid = &log[log.len() / 2];
        let last = log.last().unwrap();
        // train/test AUC of the final model
        let fold = summary.plan.fold(0);
        let train_m = hetgl_core::train::evaluate(&out.model, &data, &fold.train).unwrap();
        let test_m = hetgl_core::train::evaluate(&out.model, &data, &fold.test).unwrap();
        // test AUC restricted to missing / complete subjects
        let missing_idx: Vec<usize> = fold
            .test
            .iter()
            .copied()
            .filter(|&i| !data[i].is_present(Modality::Image))
            .collect();
        let complete_idx: Vec<usize> = fold
            .test
            .iter()
            .copied()
            .filter(|&i| data[i].is_present(Modality::Image))
            .collect();
        let miss_m = hetgl_core::train::evaluate(&out.model, &data, &missing_idx);
        let comp_m = hetgl_core::train::evaluate(&out.model, &data, &complete_idx);
        println!(
            "{variant}: best_epoch={} loss {:.3}->{:.3}->{:.3} | train_auc={:.4} test_auc={:.4} | missing={:.4} complete={:.4}",
            out.best_epoch,
            first.train_loss,
            mid.train_loss,
            last.train_loss,
            train_m.auc.unwrap(),
            test_m.auc.unwrap(),
            miss_m.map(|m| m.auc.unwrap()).unwrap_or(f64::NAN),
            comp_m.map(|m| m.auc.unwrap()).unwrap_or(f64::NAN),
        );
    }
}

fn overfit() {
    let mut cfg = SynthConfig::new(32, 3, 77);
    cfg.instances = (2, 3);
    let mut subjects = generate_synthetic(&cfg).unwrap();
    let run = RunConfig {
        dim: 16,
        heads: 4,
        layers: 2,
        epochs: 300,
        early_stop: false,
        val_fraction: 0.0,
        folds: 4,
        grad_accum: 8,
        seed: 1,
        ..RunConfig::default()
    };
    let t = Instant::now();
    let opts = TrainOptions { stop_at_train_acc: Some(0.95), max_folds: Some(1) };
    let summary = run_train(&run, &mut subjects, None, &opts).unwrap();
    let log = &summary.outcomes[0].log;
    let best_acc = log.iter().filter_map(|e| e.train_acc).fold(0.0f64, f64::max);
    println!(
        "overfit: epochs_run={} best_train_acc={:.3} elapsed={:.1?}",
        log.len(),
        best_acc,
        t.elapsed()
    );
}

fn directional() {
    let n: usize = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(300);
    let epochs: usize = std::env::args().nth(3).and_then(|s| s.parse().ok()).unwrap_or(25);
    let dim: usize = std::env::args().nth(4).and_then(|s| s.parse().ok()).unwrap_or(16);
    let sig_g: f64 = std::env::args().nth(5).and_then(|s| s.parse().ok()).unwrap_or(1.6);
    let sig_rest: f64 = std::env::args().nth(6).and_then(|s| s.parse().ok()).unwrap_or(0.35);
    let mut cfg = SynthConfig::new(n, 3, 500);
    cfg.instances = (2, 3);
    cfg.signal = [sig_g, sig_rest, sig_rest, sig_rest];

    let eta: f64 = std::env::args().nth(7).and_then(|s| s.parse().ok()).unwrap_or(0.4);
    cfg.informative_fraction = std::env::args().nth(8).and_then(|s| s.parse().ok()).unwrap_or(1.0);
    let target: char = std::env::args()
        .nth(9)
        .and_then(|s| s.chars().next())
        .unwrap_or('G');
    if target == 'I' {
        cfg.signal = [sig_rest, sig_g, sig_rest, sig_rest];
    }
    if let Some(lo_hi) = std::env::args().nth(10) {
        let parts: Vec<usize> = lo_hi.split(',').filter_map(|s| s.parse().ok()).collect();
        if parts.len() == 2 {
            cfg.instances = (parts[0], parts[1]);
        }
    }
    cfg.class_amplitude = std::env::var("CAL_AMP").ok().and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let subjects = generate_synthetic(&cfg).unwrap();
    for variant in ["full", "no_completion_zero_init", "plain_mean_knn15"] {
        let t = Instant::now();
        let mut aucs = Vec::new();
        for seed in 0..5u64 {
            let mut run = RunConfig {
                dim,
                heads: 4,
                layers: 2,
                epochs,
                variant: variant.into(),
                seed: 1000 + seed,
                ..RunConfig::default()
            };
            if target == 'I' {
                run.eta_i = eta;
            } else {
                run.eta_g = eta;
            }
            let folds: usize = std::env::var("CAL_FOLDS").ok().and_then(|s| s.parse().ok()).unwrap_or(1);
            let mut data = subjects.clone();
            let opts = TrainOptions { stop_at_train_acc: None, max_folds: Some(folds) };
            let summary = run_train(&run, &mut data, None, &opts).unwrap();
            aucs.push(summary.report.mean.auc.unwrap());
        }
        let mean = aucs.iter().sum::<f64>() / aucs.len() as f64;
        println!(
            "{variant}: aucs={:?} mean={:.4} elapsed={:.1?}",
            aucs.iter().map(|a| (a * 1e4).round() / 1e4).collect::<Vec<_>>(),
            mean,
            t.elapsed()
        );
    }
}
