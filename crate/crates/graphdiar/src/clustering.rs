//! Speaker counting and normalized spectral clustering on an affinity
//! matrix, plus the end-to-end [`diarize`] composition.
//!
//! Counting works directly on affinity eigenvalues: an ideal affinity is
//! block diagonal with one all-ones block per speaker, and such a block of
//! size `m` contributes one eigenvalue equal to `m` with the rest zero.
//! Counting eigenvalues above a threshold (or taking the largest
//! eigengap) therefore reads off the number of blocks. This is why the
//! count threshold is applied to the affinity and not to a normalized
//! Laplacian, whose spectrum is confined to `[0, 2]` and cannot match
//! thresholds greater than 1.
//!
//! Clustering follows the standard normalized recipe: eigenvectors of the
//! `k` smallest eigenvalues of `L_sym = I − D^{-1/2} S D^{-1/2}`,
//! row-normalized, grouped by seeded k-means with greedy farthest-point
//! initialization.

use ndarray::{Array1, Array2};
use rand::Rng;

use crate::embedding::EmbeddingMatrix;
use crate::graph::{build_session_graph, pairwise_cosine, propagation_matrix};
use crate::refiner::{gcn_forward, refined_affinity, RefinerModel};
use crate::{linalg, Error, Result};

/// A validated clustering input: symmetric, nonnegative, unit diagonal.
/// Constructed only through [`sanitize_affinity`].
#[derive(Debug, Clone)]
pub struct AffinityForClustering {
    s: Array2<f64>,
}

impl AffinityForClustering {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.s
    }

    pub fn n(&self) -> usize {
        self.s.nrows()
    }
}

/// A segment labeling with a dense label set `[0, k)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DiarizationHypothesis {
    pub labels: Vec<usize>,
    pub k: usize,
}

/// How the speaker count is chosen before clustering.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CountMethod {
    /// Number of affinity eigenvalues strictly above `tau`.
    Threshold { tau: f64 },
    /// Index of the largest descending-eigenvalue gap.
    Eigengap,
    /// Skip estimation entirely.
    Fixed { k: usize },
}

/// Knobs of the [`diarize`] composition.
#[derive(Debug, Clone)]
pub struct ClusteringConfig {
    pub count_method: CountMethod,
    /// Affinity entries at or below this are dropped when building the
    /// propagation graph for refinement.
    pub edge_threshold: f64,
    /// Cap on the eigengap search range.
    pub max_speakers: usize,
    pub seed: u64,
}

impl Default for ClusteringConfig {
    fn default() -> Self {
        ClusteringConfig {
            count_method: CountMethod::Threshold { tau: 2.0 },
            edge_threshold: 0.2,
            max_speakers: 20,
            seed: 0,
        }
    }
}

/// Makes a raw score matrix usable for spectral clustering: negatives are
/// clamped to zero and the diagonal is forced to 1. Inputs must already be
/// symmetric; anything else indicates a caller bug.
pub fn sanitize_affinity(a: &Array2<f64>) -> Result<AffinityForClustering> {
    if a.nrows() != a.ncols() {
        return Err(Error::Usage(format!(
            "affinity must be square, got {}x{}",
            a.nrows(),
            a.ncols()
        )));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite affinity entry".into()));
    }
    let n = a.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            if (a[[i, j]] - a[[j, i]]).abs() > 1e-9 {
                return Err(Error::Usage(format!(
                    "affinity not symmetric at ({i}, {j}): {} vs {}",
                    a[[i, j]],
                    a[[j, i]]
                )));
            }
        }
    }
    let mut s = Array2::zeros((n, n));
    for i in 0..n {
        s[[i, i]] = 1.0;
        for j in (i + 1)..n {
            let v = (0.5 * (a[[i, j]] + a[[j, i]])).max(0.0);
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(AffinityForClustering { s })
}

/// Counts eigenvalues of the affinity strictly above `tau`, clamped below
/// by one speaker.
pub fn count_speakers_threshold(s: &AffinityForClustering, tau: f64) -> Result<usize> {
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::Config(format!(
            "count threshold must be positive, got {tau}"
        )));
    }
    let eigs = linalg::symmetric_eigenvalues(&s.s.view())?;
    Ok(eigs.iter().filter(|&&v| v > tau).count().max(1))
}

/// The eigengap rule on an already-sorted descending spectrum: the `i`
/// maximizing `λ_i − λ_{i+1}` over `i ∈ [1, max_k]`, first index winning
/// ties.
pub(crate) fn eigengap_from_values(descending: &[f64], max_k: usize) -> usize {
    let mut best_k = 1;
    let mut best_gap = f64::NEG_INFINITY;
    for i in 1..=max_k.min(descending.len() - 1) {
        let gap = descending[i - 1] - descending[i];
        if gap > best_gap {
            best_gap = gap;
            best_k = i;
        }
    }
    best_k
}

/// Estimates the speaker count as the position of the largest gap in the
/// descending affinity spectrum, searching `k ∈ [1, max_k]`.
pub fn count_speakers_eigengap(s: &AffinityForClustering, max_k: usize) -> Result<usize> {
    let n = s.n();
    if n == 1 {
        return Ok(1);
    }
    if max_k == 0 || max_k >= n {
        return Err(Error::Config(format!(
            "eigengap search range must satisfy 1 <= max_k < {n}, got {max_k}"
        )));
    }
    let eigs = linalg::symmetric_eigenvalues(&s.s.view())?;
    let mut descending: Vec<f64> = eigs.to_vec();
    descending.reverse();
    Ok(eigengap_from_values(&descending, max_k))
}

fn kmeans(points: &Array2<f64>, k: usize, seed: u64) -> Vec<usize> {
    let n = points.nrows();
    let mut rng = crate::rng::substream(seed, "kmeans-init");

    // greedy farthest-point seeding from a random first center
    let mut centers = Array2::zeros((k, points.ncols()));
    let mut chosen = vec![rng.random_range(0..n)];
    centers.row_mut(0).assign(&points.row(chosen[0]));
    while chosen.len() < k {
        let mut best = (0usize, f64::NEG_INFINITY);
        for p in 0..n {
            let nearest = chosen
                .iter()
                .map(|&c| {
                    let d = &points.row(p) - &points.row(c);
                    d.dot(&d)
                })
                .fold(f64::INFINITY, f64::min);
            if nearest > best.1 {
                best = (p, nearest);
            }
        }
        centers.row_mut(chosen.len()).assign(&points.row(best.0));
        chosen.push(best.0);
    }

    let mut labels = vec![0usize; n];
    let mut prev_inertia = f64::INFINITY;
    for _ in 0..300 {
        // assignment, smallest center index winning ties
        let mut inertia = 0.0;
        for p in 0..n {
            let mut best = (0usize, f64::INFINITY);
            for c in 0..k {
                let d = &points.row(p) - &centers.row(c);
                let dist = d.dot(&d);
                if dist < best.1 {
                    best = (c, dist);
                }
            }
            labels[p] = best.0;
            inertia += best.1;
        }

        // refill any emptied cluster with the point farthest from its
        // current center (smallest index on ties)
        let mut sizes = vec![0usize; k];
        for &l in &labels {
            sizes[l] += 1;
        }
        for c in 0..k {
            if sizes[c] > 0 {
                continue;
            }
            let mut far = (0usize, f64::NEG_INFINITY);
            for p in 0..n {
                if sizes[labels[p]] <= 1 {
                    continue;
                }
                let d = &points.row(p) - &centers.row(labels[p]);
                let dist = d.dot(&d);
                if dist > far.1 {
                    far = (p, dist);
                }
            }
            sizes[labels[far.0]] -= 1;
            labels[far.0] = c;
            sizes[c] = 1;
        }

        // update step
        centers.fill(0.0);
        let mut counts = vec![0.0f64; k];
        for p in 0..n {
            centers.row_mut(labels[p]).scaled_add(1.0, &points.row(p));
            counts[labels[p]] += 1.0;
        }
        for c in 0..k {
            if counts[c] > 0.0 {
                centers.row_mut(c).mapv_inplace(|v| v / counts[c]);
            }
        }

        if prev_inertia.is_finite() {
            let drop = prev_inertia - inertia;
            if drop.abs() <= 1e-6 * prev_inertia.max(1e-12) {
                break;
            }
        }
        prev_inertia = inertia;
    }
    labels
}

fn relabel_dense(labels: &[usize]) -> (Vec<usize>, usize) {
    let mut map = std::collections::HashMap::new();
    let mut out = Vec::with_capacity(labels.len());
    for &l in labels {
        let next = map.len();
        out.push(*map.entry(l).or_insert(next));
    }
    let k = map.len();
    (out, k)
}

/// Normalized spectral clustering into exactly `k` groups.
pub fn spectral_cluster(
    s: &AffinityForClustering,
    k: usize,
    seed: u64,
) -> Result<DiarizationHypothesis> {
    let n = s.n();
    if k == 0 || k > n {
        return Err(Error::Config(format!(
            "cluster count must be in [1, {n}], got {k}"
        )));
    }
    if k == 1 {
        return Ok(DiarizationHypothesis {
            labels: vec![0; n],
            k: 1,
        });
    }
    // L_sym = I − D^{-1/2} S D^{-1/2}; degrees are ≥ 1 thanks to the unit
    // diagonal, so the scaling is always defined
    let inv_sqrt_deg: Array1<f64> =
        Array1::from_iter(s.s.rows().into_iter().map(|r| 1.0 / r.sum().sqrt()));
    let mut lap = Array2::eye(n);
    for i in 0..n {
        for j in 0..n {
            lap[[i, j]] -= inv_sqrt_deg[i] * s.s[[i, j]] * inv_sqrt_deg[j];
        }
    }
    let (_, vectors) = linalg::symmetric_eigh(&lap.view())?;
    let mut embedding = vectors.slice(ndarray::s![.., ..k]).to_owned();
    for mut row in embedding.rows_mut() {
        let norm = row.dot(&row).sqrt();
        if norm > 1e-300 {
            row.mapv_inplace(|v| v / norm);
        }
    }
    let raw = kmeans(&embedding, k, seed);
    let (labels, k_found) = relabel_dense(&raw);
    debug_assert_eq!(k_found, k);
    Ok(DiarizationHypothesis { labels, k: k_found })
}

/// End-to-end diarization of one session: optional graph refinement, then
/// affinity sanitation, speaker counting, and spectral clustering. With no
/// model this is the original-embedding baseline.
pub fn diarize(
    x: &EmbeddingMatrix,
    model: Option<&RefinerModel>,
    cfg: &ClusteringConfig,
) -> Result<DiarizationHypothesis> {
    if x.is_empty() {
        return Err(Error::Degenerate("session has no segments".into()));
    }
    let affinity = match model {
        Some(model) => {
            let raw = pairwise_cosine(x.vectors())?;
            let graph = build_session_graph(x.clone(), &raw, cfg.edge_threshold)?;
            let l = propagation_matrix(&graph);
            let (z, _) = gcn_forward(model, &l, x.vectors())?;
            refined_affinity(model, &z)?
        }
        None => pairwise_cosine(x.vectors())?,
    };
    let s = sanitize_affinity(&affinity)?;
    let n = s.n();
    let k = match cfg.count_method {
        CountMethod::Threshold { tau } => count_speakers_threshold(&s, tau)?.min(n),
        CountMethod::Eigengap => {
            if n == 1 {
                1
            } else {
                count_speakers_eigengap(&s, cfg.max_speakers.min(n - 1).max(1))?
            }
        }
        CountMethod::Fixed { k } => {
            if k == 0 || k > n {
                return Err(Error::Config(format!(
                    "fixed cluster count must be in [1, {n}], got {k}"
                )));
            }
            k
        }
    };
    spectral_cluster(&s, k, cfg.seed)
}
