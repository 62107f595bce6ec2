//! Runs k-fold cross-validation on a small corpus: retrain per fold, tune
//! the count threshold on a validation slice carved from the training
//! fold, then score the held-out fold.
//!
//! Run with: cargo run --example cross_validate

use graphdiar::clustering::{ClusteringConfig, CountMethod};
use graphdiar::embedding::EmbeddingMatrix;
use graphdiar::evaluation::evaluate_corpus;
use graphdiar::refiner::{init_model, ScorerKind};
use graphdiar::simulator::{simulate_sessions, SimConfig};
use graphdiar::trainer::{kfold_split, split_validation, train, tune_count_threshold, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        n_sessions: 25,
        speakers_range: (2, 5),
        segments_per_speaker_range: (4, 14),
        dim: 32,
        within_speaker_concentration: 14.0,
        seed: 21,
        ..SimConfig::default()
    };
    let all = simulate_sessions(&sim)?;
    let tcfg = TrainConfig {
        epochs: 10,
        lr_drop_epoch: 8,
        lr: 0.01,
        folds: 5,
        seed: 21,
        ..TrainConfig::default()
    };
    let ladder = [0.5, 1.0, 1.5, 2.0, 3.0];

    println!("fold  final-loss  tuned-tau  test-count-err  test-DER");
    for (fold, (train_idx, test_idx)) in
        kfold_split(all.len(), tcfg.folds, tcfg.seed)?.iter().enumerate()
    {
        let (fit_idx, val_idx) = split_validation(train_idx, tcfg.seed + fold as u64)?;
        let fit: Vec<_> = fit_idx
            .iter()
            .map(|&i| (all[i].embeddings.clone(), all[i].adjacency.clone()))
            .collect();
        let init = init_model(&[32, 32, 32], ScorerKind::Cosine, tcfg.seed)?;
        let (model, report) = train(init, &fit, &tcfg)?;

        let val: Vec<EmbeddingMatrix> =
            val_idx.iter().map(|&i| all[i].embeddings.clone()).collect();
        let tau = tune_count_threshold(Some(&model), &val, &ladder, tcfg.edge_threshold)?;

        let test: Vec<EmbeddingMatrix> =
            test_idx.iter().map(|&i| all[i].embeddings.clone()).collect();
        let ccfg = ClusteringConfig {
            count_method: CountMethod::Threshold { tau },
            ..ClusteringConfig::default()
        };
        let eval = evaluate_corpus(&test, Some(&model), &ccfg)?;
        println!(
            "{fold:>4}  {:>10.6}  {tau:>9}  {:>14.3}  {:>8.4}",
            report.epoch_losses.last().unwrap(),
            eval.count_error_mean,
            eval.der
        );
    }
    Ok(())
}
