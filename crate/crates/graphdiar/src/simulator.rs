//! Synthetic meeting generator.
//!
//! Real diarization corpora attach speaker identities to audio; here the
//! per-segment embedding extractor is out of scope, so sessions are
//! generated directly in embedding space: each speaker is a unit centroid
//! on the sphere, and each of their segments is the centroid plus
//! spherical Gaussian noise, renormalized. Cosine geometry (the only
//! structure any downstream stage uses) then behaves like clustered
//! speaker embeddings: same-speaker pairs score high, cross-speaker pairs
//! score near the centroid cosines, which rejection sampling keeps below a
//! cap.
//!
//! Everything is deterministic given `(seed, session_index)`, so a corpus
//! never needs to be stored to be reproduced.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::embedding::{
    adjacency_from_labels, save_embeddings, EmbeddingMatrix, GroundTruthAdjacency, SegmentMeta,
};
use crate::{Error, Result};

/// File name of the corpus listing written next to the session files.
pub const MANIFEST_NAME: &str = "manifest.tsv";

/// Generation parameters.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub n_sessions: usize,
    /// Inclusive bounds on speakers per session.
    pub speakers_range: (usize, usize),
    /// Inclusive bounds on segments per speaker.
    pub segments_per_speaker_range: (usize, usize),
    pub dim: usize,
    /// Seconds per segment; segments tile the session back to back.
    pub segment_duration: f64,
    /// Inverse noise variance: segment = normalize(centroid + ε),
    /// ε ~ N(0, 1/concentration) per coordinate. Larger means tighter
    /// speaker clusters. The default of 40 is calibrated so that plain
    /// cosine affinities of a default corpus put mean within-speaker
    /// cosine near 0.24 against cross-speaker noise near 0: tuned
    /// eigenvalue-threshold counting then misses one to two speakers per
    /// session, leaving measurable headroom for the refiner to close.
    pub within_speaker_concentration: f64,
    /// Centroid pairs with cosine above this are rejected and redrawn.
    pub centroid_cosine_cap: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            n_sessions: 500,
            speakers_range: (2, 15),
            segments_per_speaker_range: (2, 60),
            dim: 128,
            segment_duration: 1.5,
            within_speaker_concentration: 40.0,
            centroid_cosine_cap: 0.6,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        let (s_lo, s_hi) = self.speakers_range;
        let (m_lo, m_hi) = self.segments_per_speaker_range;
        if s_lo == 0 || s_lo > s_hi {
            return Err(Error::Config(format!(
                "speaker range must be ordered and positive, got [{s_lo}, {s_hi}]"
            )));
        }
        if m_lo == 0 || m_lo > m_hi {
            return Err(Error::Config(format!(
                "segment range must be ordered and positive, got [{m_lo}, {m_hi}]"
            )));
        }
        if self.dim < 2 {
            return Err(Error::Config(format!("dim must be at least 2, got {}", self.dim)));
        }
        if !(self.segment_duration.is_finite() && self.segment_duration > 0.0) {
            return Err(Error::Config(format!(
                "segment duration must be positive, got {}",
                self.segment_duration
            )));
        }
        if !(self.within_speaker_concentration.is_finite()
            && self.within_speaker_concentration > 0.0)
        {
            return Err(Error::Config(format!(
                "concentration must be positive, got {}",
                self.within_speaker_concentration
            )));
        }
        if !(self.centroid_cosine_cap > -1.0 && self.centroid_cosine_cap <= 1.0) {
            return Err(Error::Config(format!(
                "centroid cosine cap must lie in (-1, 1], got {}",
                self.centroid_cosine_cap
            )));
        }
        Ok(())
    }
}

/// One generated session with its ground truth.
#[derive(Debug, Clone)]
pub struct SimulatedSession {
    pub embeddings: EmbeddingMatrix,
    pub labels: Vec<usize>,
    pub adjacency: GroundTruthAdjacency,
}

impl SimulatedSession {
    pub fn n_speakers(&self) -> usize {
        let mut distinct: Vec<usize> = self.labels.clone();
        distinct.sort_unstable();
        distinct.dedup();
        distinct.len()
    }
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates one session. A fixed draw order (speaker count, then
/// centroids, then each speaker's segment count and segments, then the
/// temporal shuffle) makes the output a pure function of
/// `(cfg.seed, session_index)`.
pub fn simulate_session(cfg: &SimConfig, session_index: u64) -> Result<SimulatedSession> {
    cfg.validate()?;
    let mut rng = crate::rng::indexed_substream(cfg.seed, "session", session_index);
    let n_speakers = rng.random_range(cfg.speakers_range.0..=cfg.speakers_range.1);

    let mut centroids: Vec<Vec<f64>> = Vec::with_capacity(n_speakers);
    for speaker in 0..n_speakers {
        let mut attempts = 0;
        loop {
            attempts += 1;
            if attempts > 1000 {
                return Err(Error::Config(format!(
                    "could not place centroid {speaker} of {n_speakers} under cosine cap {} after 1000 attempts; lower the speaker count or raise the cap",
                    cfg.centroid_cosine_cap
                )));
            }
            let candidate = unit_gaussian(&mut rng, cfg.dim);
            let ok = centroids.iter().all(|c| {
                let cos: f64 = c.iter().zip(&candidate).map(|(a, b)| a * b).sum();
                cos <= cfg.centroid_cosine_cap
            });
            if ok {
                centroids.push(candidate);
                break;
            }
        }
    }

    let noise_std = 1.0 / cfg.within_speaker_concentration.sqrt();
    let mut staged: Vec<(usize, Vec<f64>)> = Vec::new();
    for (speaker, centroid) in centroids.iter().enumerate() {
        let m = rng.random_range(
            cfg.segments_per_speaker_range.0..=cfg.segments_per_speaker_range.1,
        );
        for _ in 0..m {
            let mut e: Vec<f64> = centroid
                .iter()
                .map(|&c| c + noise_std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let norm = e.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-12 {
                return Err(Error::Numeric(
                    "generated a zero-norm segment embedding".into(),
                ));
            }
            for x in &mut e {
                *x /= norm;
            }
            staged.push((speaker, e));
        }
    }

    // seeded temporal interleave
    for i in (1..staged.len()).rev() {
        let j = rng.random_range(0..=i);
        staged.swap(i, j);
    }

    let n = staged.len();
    let session_id = format!("sim-{session_index:05}");
    let mut vectors = Array2::zeros((n, cfg.dim));
    let mut labels = Vec::with_capacity(n);
    let mut meta = Vec::with_capacity(n);
    for (row, (speaker, e)) in staged.into_iter().enumerate() {
        for (c, v) in e.into_iter().enumerate() {
            vectors[[row, c]] = v;
        }
        labels.push(speaker);
        meta.push(SegmentMeta {
            session_id: session_id.clone(),
            start: row as f64 * cfg.segment_duration,
            duration: cfg.segment_duration,
            speaker: Some(speaker),
        });
    }
    let embeddings = EmbeddingMatrix::new(vectors, meta)?;
    let adjacency = adjacency_from_labels(&labels);
    Ok(SimulatedSession {
        embeddings,
        labels,
        adjacency,
    })
}

/// Generates `cfg.n_sessions` sessions in memory.
pub fn simulate_sessions(cfg: &SimConfig) -> Result<Vec<SimulatedSession>> {
    (0..cfg.n_sessions as u64)
        .map(|i| simulate_session(cfg, i))
        .collect()
}

/// One line of the corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    /// Session file path, relative to the manifest's directory.
    pub path: PathBuf,
    pub n_speakers: usize,
    pub n_segments: usize,
}

impl ManifestEntry {
    pub fn resolve(&self, manifest_dir: &Path) -> PathBuf {
        manifest_dir.join(&self.path)
    }
}

/// Writes a full corpus under `dir`: one embedding file per session plus
/// a tab-separated manifest of (path, speaker count, segment count).
pub fn simulate_corpus(cfg: &SimConfig, dir: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    cfg.validate()?;
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut entries = Vec::with_capacity(cfg.n_sessions);
    let mut manifest = String::new();
    for i in 0..cfg.n_sessions as u64 {
        let session = simulate_session(cfg, i)?;
        let name = format!("session-{i:05}.emb");
        save_embeddings(&session.embeddings, dir.join(&name))?;
        let entry = ManifestEntry {
            path: PathBuf::from(&name),
            n_speakers: session.n_speakers(),
            n_segments: session.embeddings.len(),
        };
        writeln!(
            manifest,
            "{}\t{}\t{}",
            entry.path.display(),
            entry.n_speakers,
            entry.n_segments
        )
        .expect("writing to a String cannot fail");
        entries.push(entry);
    }
    let manifest_path = dir.join(MANIFEST_NAME);
    fs::write(&manifest_path, manifest).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(entries)
}

/// Reads a manifest written by [`simulate_corpus`].
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<ManifestEntry>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                offset: line_start,
                msg: format!("expected 3 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_count = |s: &str, what: &str| -> Result<usize> {
            s.parse().map_err(|_| Error::Parse {
                path: path.to_path_buf(),
                offset: line_start,
                msg: format!("bad {what} {s:?}"),
            })
        };
        entries.push(ManifestEntry {
            path: PathBuf::from(fields[0]),
            n_speakers: parse_count(fields[1], "speaker count")?,
            n_segments: parse_count(fields[2], "segment count")?,
        });
    }
    Ok(entries)
}
