//! Diarizes one noisy session with and without a trained refiner and
//! scores both against ground truth.
//!
//! The baseline clusters plain cosine affinities; the refined path first
//! passes the embeddings through the trained GCN, which pulls same-speaker
//! segments together before counting and clustering.
//!
//! Run with: cargo run --example diarize_session

use graphdiar::clustering::{diarize, ClusteringConfig, CountMethod};
use graphdiar::evaluation::confusion_der;
use graphdiar::refiner::{init_model, ScorerKind};
use graphdiar::simulator::{simulate_session, simulate_sessions, SimConfig};
use graphdiar::trainer::{train, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    // a noisy regime: within-speaker cosine averages only ~0.3
    let sim = SimConfig {
        n_sessions: 24,
        speakers_range: (2, 5),
        segments_per_speaker_range: (4, 16),
        dim: 32,
        within_speaker_concentration: 14.0,
        seed: 3,
        ..SimConfig::default()
    };
    let corpus: Vec<_> = simulate_sessions(&sim)?
        .into_iter()
        .map(|s| (s.embeddings, s.adjacency))
        .collect();
    let init = init_model(&[32, 32, 32], ScorerKind::Cosine, 3)?;
    let tcfg = TrainConfig {
        epochs: 15,
        lr_drop_epoch: 12,
        lr: 0.01,
        seed: 3,
        ..TrainConfig::default()
    };
    let (model, _) = train(init, &corpus, &tcfg)?;

    // a fresh session the model has never seen
    let held_out = SimConfig { seed: 99, ..sim };
    let session = simulate_session(&held_out, 0)?;
    let truth = session.labels.clone();
    let durations = session.embeddings.durations();

    let ccfg = ClusteringConfig {
        count_method: CountMethod::Threshold { tau: 1.5 },
        ..ClusteringConfig::default()
    };
    let baseline = diarize(&session.embeddings, None, &ccfg)?;
    let refined = diarize(&session.embeddings, Some(&model), &ccfg)?;

    let der_base = confusion_der(&truth, &baseline.labels, &durations)?;
    let der_ref = confusion_der(&truth, &refined.labels, &durations)?;
    println!(
        "true speakers {}  baseline estimate {}  refined estimate {}",
        session.n_speakers(),
        baseline.k,
        refined.k
    );
    println!("baseline DER {der_base:.4}   refined DER {der_ref:.4}");
    println!("truth    {truth:?}");
    println!("baseline {:?}", baseline.labels);
    println!("refined  {:?}", refined.labels);
    Ok(())
}
