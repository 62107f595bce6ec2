//! Sweeps the speaker-count threshold over a held-out corpus, original
//! versus refined embeddings, and prints both error curves.
//!
//! The refined curve should bottom out lower and stay flat longer: after
//! training, block eigenvalues sit near their block sizes, so counting is
//! insensitive to the exact threshold choice.
//!
//! Run with: cargo run --example threshold_sweep

use graphdiar::embedding::EmbeddingMatrix;
use graphdiar::evaluation::count_error_sweep;
use graphdiar::refiner::{init_model, ScorerKind};
use graphdiar::simulator::{simulate_sessions, SimConfig};
use graphdiar::trainer::{train, tune_count_threshold, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        n_sessions: 60,
        speakers_range: (2, 6),
        segments_per_speaker_range: (3, 18),
        dim: 32,
        within_speaker_concentration: 14.0,
        seed: 11,
        ..SimConfig::default()
    };
    let all = simulate_sessions(&sim)?;
    let train_set: Vec<_> = all[..45]
        .iter()
        .map(|s| (s.embeddings.clone(), s.adjacency.clone()))
        .collect();
    let test_set: Vec<EmbeddingMatrix> =
        all[45..].iter().map(|s| s.embeddings.clone()).collect();

    let init = init_model(&[32, 32, 32], ScorerKind::Cosine, 11)?;
    let tcfg = TrainConfig {
        epochs: 16,
        lr_drop_epoch: 13,
        lr: 0.01,
        seed: 11,
        ..TrainConfig::default()
    };
    let (model, _) = train(init, &train_set, &tcfg)?;

    let ladder = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 4.0, 5.0];
    let original = count_error_sweep(&test_set, None, &ladder, 0.2)?;
    let refined = count_error_sweep(&test_set, Some(&model), &ladder, 0.2)?;

    println!("{:>9} {:>10} {:>10}", "threshold", "original", "refined");
    for ((tau, orig), (_, refi)) in original.iter().zip(&refined) {
        println!("{tau:>9} {orig:>10.3} {refi:>10.3}");
    }

    let tau_o = tune_count_threshold(None, &test_set, &ladder, 0.2)?;
    let tau_r = tune_count_threshold(Some(&model), &test_set, &ladder, 0.2)?;
    println!("\nbest threshold: original {tau_o}, refined {tau_r}");
    Ok(())
}
