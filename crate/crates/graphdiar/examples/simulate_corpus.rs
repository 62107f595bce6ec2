//! Generates a small synthetic corpus on disk and reads it back.
//!
//! Every session file stores per-segment embeddings plus metadata
//! (session id, start, duration, ground-truth speaker), and the manifest
//! lists one session per line. Generation is deterministic given the
//! seed, so the printed checksum-like statistics reproduce exactly.
//!
//! Run with: cargo run --example simulate_corpus

use graphdiar::embedding::load_embeddings;
use graphdiar::simulator::{load_manifest, simulate_corpus, SimConfig, MANIFEST_NAME};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = std::env::temp_dir().join("graphdiar-example-corpus");
    let cfg = SimConfig {
        n_sessions: 12,
        speakers_range: (2, 6),
        segments_per_speaker_range: (3, 20),
        dim: 64,
        seed: 42,
        ..SimConfig::default()
    };

    let entries = simulate_corpus(&cfg, &dir)?;
    println!("wrote {} sessions to {}", entries.len(), dir.display());

    let listed = load_manifest(dir.join(MANIFEST_NAME))?;
    assert_eq!(listed, entries);

    for entry in &listed {
        let session = load_embeddings(entry.resolve(&dir))?;
        let labels = session.labels().expect("simulated sessions carry labels");
        let speakers = labels.iter().max().unwrap() + 1;
        println!(
            "  {:<20} {:>2} speakers {:>3} segments, max unit-norm violation {:.2e}",
            entry.path.display(),
            speakers,
            session.len(),
            session.max_unit_norm_violation()
        );
        assert_eq!(speakers, entry.n_speakers);
        assert_eq!(session.len(), entry.n_segments);
    }
    Ok(())
}
