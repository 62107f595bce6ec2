//! Trains the embedding refiner on a small in-memory corpus and shows the
//! loss falling, then round-trips the checkpoint.
//!
//! Each training step builds one session graph, runs the two-layer linear
//! GCN forward, scores all segment pairs, and backpropagates the combined
//! histogram + nuclear-norm loss through the hand-written backward pass
//! into an Adam update. Identical seeds reproduce the checkpoint bit for
//! bit.
//!
//! Run with: cargo run --example train_refiner

use graphdiar::refiner::{init_model, load_checkpoint, save_checkpoint, ScorerKind};
use graphdiar::simulator::{simulate_sessions, SimConfig};
use graphdiar::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let sim = SimConfig {
        n_sessions: 16,
        speakers_range: (2, 5),
        segments_per_speaker_range: (4, 16),
        dim: 32,
        seed: 5,
        ..SimConfig::default()
    };
    let sessions: Vec<_> = simulate_sessions(&sim)?
        .into_iter()
        .map(|s| (s.embeddings, s.adjacency))
        .collect();

    let init = init_model(&[32, 32, 32], ScorerKind::Cosine, 5)?;
    let cfg = TrainConfig {
        epochs: 12,
        lr_drop_epoch: 10,
        seed: 5,
        ..TrainConfig::default()
    };
    let (model, report) = train(init, &sessions, &cfg)?;

    println!("epoch  mean loss");
    for (i, loss) in report.epoch_losses.iter().enumerate() {
        println!("{:>5}  {loss:.6}", i + 1);
    }
    assert!(report.epoch_losses.last().unwrap() < &report.epoch_losses[0]);

    let path = std::env::temp_dir().join("graphdiar-example.ckpt");
    save_checkpoint(&model, &path)?;
    let reloaded = load_checkpoint(&path)?;
    assert_eq!(reloaded.checksum(), report.checksum);
    println!("checkpoint {} (checksum {})", path.display(), report.checksum);
    Ok(())
}
