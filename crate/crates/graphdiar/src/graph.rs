//! Session graphs and the GCN propagation matrix.
//!
//! Segments of one session form the nodes of a weighted graph: an edge is
//! kept wherever the pairwise similarity score is strictly above the edge
//! threshold, and it keeps the raw score as its weight. The refiner never
//! consumes the adjacency directly; it multiplies by the self-loop
//! normalized propagation matrix
//!
//! ```text
//! L = D̂^{-1/2} (A + I) D̂^{-1/2},    D̂ = diag(rowsum(A + I))
//! ```
//!
//! which is symmetric with spectral radius at most 1, so stacked layers
//! cannot blow features up.

use ndarray::Array2;

use crate::embedding::EmbeddingMatrix;
use crate::{Error, Result};

/// Smallest row norm that still counts as a usable embedding; anything
/// below is treated as a zero vector (degenerate input or model collapse).
pub(crate) const NORM_FLOOR: f64 = 1e-15;

/// Weighted similarity graph over one session's segments.
#[derive(Debug, Clone)]
pub struct SessionGraph {
    features: EmbeddingMatrix,
    affinity: Array2<f64>,
    edge_threshold: f64,
}

impl SessionGraph {
    pub fn features(&self) -> &EmbeddingMatrix {
        &self.features
    }

    /// Thresholded edge weights; zero on the diagonal and wherever the
    /// score did not clear the threshold.
    pub fn affinity(&self) -> &Array2<f64> {
        &self.affinity
    }

    pub fn edge_threshold(&self) -> f64 {
        self.edge_threshold
    }

    pub fn node_count(&self) -> usize {
        self.affinity.nrows()
    }

    /// Number of undirected edges.
    pub fn edge_count(&self) -> usize {
        let n = self.node_count();
        let mut count = 0;
        for i in 0..n {
            for j in (i + 1)..n {
                if self.affinity[[i, j]] != 0.0 {
                    count += 1;
                }
            }
        }
        count
    }
}

/// Normalized propagation matrix `L` applied by each GCN layer.
#[derive(Debug, Clone)]
pub struct PropagationMatrix {
    pub(crate) l: Array2<f64>,
}

impl PropagationMatrix {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.l
    }

    pub fn n(&self) -> usize {
        self.l.nrows()
    }

    /// An identity propagation matrix (the edgeless-graph degeneracy),
    /// useful for tests and for running the refiner without graph mixing.
    pub fn identity(n: usize) -> Self {
        PropagationMatrix {
            l: Array2::eye(n),
        }
    }
}

/// All pairwise cosine similarities between rows of `x`.
///
/// The diagonal is exactly 1 and every entry is clamped into `[-1, 1]`
/// (guarding the tiny float excursions of near-parallel vectors). A row
/// with zero norm has no direction, so it is rejected by naming the row.
pub fn pairwise_cosine(x: &Array2<f64>) -> Result<Array2<f64>> {
    let n = x.nrows();
    let mut unit = x.clone();
    for (i, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if !norm.is_finite() {
            return Err(Error::Numeric(format!("row {i} has non-finite norm")));
        }
        if norm < NORM_FLOOR {
            return Err(Error::Degenerate(format!("row {i} has zero norm")));
        }
        row.mapv_inplace(|v| v / norm);
    }
    let mut s = unit.dot(&unit.t());
    s.mapv_inplace(|v| v.clamp(-1.0, 1.0));
    for i in 0..n {
        s[[i, i]] = 1.0;
    }
    Ok(s)
}

/// Thresholds a score matrix into a session graph.
///
/// Scores are symmetrized as `(S + Sᵀ)/2` first (learned pair scorers need
/// not be exactly symmetric), then an edge `(i, j)`, `i ≠ j`, survives iff
/// its score is *strictly* greater than `threshold`, keeping the raw score
/// as weight. Self-loops are not stored; they enter only in
/// [`propagation_matrix`].
pub fn build_session_graph(
    features: EmbeddingMatrix,
    scores: &Array2<f64>,
    threshold: f64,
) -> Result<SessionGraph> {
    let n = features.len();
    if scores.nrows() != n || scores.ncols() != n {
        return Err(Error::Config(format!(
            "score matrix is {}x{} for {} segments",
            scores.nrows(),
            scores.ncols(),
            n
        )));
    }
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("score matrix has non-finite entries".into()));
    }
    let mut affinity = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let s = 0.5 * (scores[[i, j]] + scores[[j, i]]);
            if s > threshold {
                affinity[[i, j]] = s;
                affinity[[j, i]] = s;
            }
        }
    }
    Ok(SessionGraph {
        features,
        affinity,
        edge_threshold: threshold,
    })
}

/// Forms `L = D̂^{-1/2}(A + I)D̂^{-1/2}`. Self-loops guarantee every degree
/// is at least 1, so isolated nodes simply get an identity row.
pub fn propagation_matrix(g: &SessionGraph) -> PropagationMatrix {
    let n = g.node_count();
    let a = &g.affinity;
    let mut inv_sqrt_deg = Vec::with_capacity(n);
    for i in 0..n {
        let degree: f64 = a.row(i).sum() + 1.0;
        inv_sqrt_deg.push(1.0 / degree.sqrt());
    }
    let mut l = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            let a_hat = a[[i, j]] + if i == j { 1.0 } else { 0.0 };
            if a_hat != 0.0 {
                l[[i, j]] = inv_sqrt_deg[i] * a_hat * inv_sqrt_deg[j];
            }
        }
    }
    PropagationMatrix { l }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::SegmentMeta;
    use crate::linalg::symmetric_eigenvalues;
    use ndarray::array;
    use proptest::prelude::*;

    fn features(n: usize, d: usize) -> EmbeddingMatrix {
        let vectors = Array2::from_shape_fn((n, d), |(i, j)| ((i * d + j) as f64).sin() + 1.5);
        let meta = (0..n)
            .map(|i| SegmentMeta {
                session_id: "s".into(),
                start: i as f64,
                duration: 1.0,
                speaker: None,
            })
            .collect();
        EmbeddingMatrix::new(vectors, meta).unwrap()
    }

    #[test]
    fn cosine_identical_orthogonal_antipodal() {
        let s = pairwise_cosine(&array![[1.0, 0.0], [1.0, 0.0]]).unwrap();
        assert_eq!(s, array![[1.0, 1.0], [1.0, 1.0]]);

        let s = pairwise_cosine(&array![[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(s, array![[1.0, 0.0], [0.0, 1.0]]);

        let s = pairwise_cosine(&array![[1.0, 0.0], [-1.0, 0.0]]).unwrap();
        assert_eq!(s[[0, 1]], -1.0);
        assert_eq!(s[[1, 0]], -1.0);
    }

    #[test]
    fn cosine_rejects_zero_rows() {
        let err = pairwise_cosine(&array![[1.0, 0.0], [0.0, 0.0]]);
        match err {
            Err(Error::Degenerate(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected degenerate error, got {other:?}"),
        }
    }

    #[test]
    fn graph_keeps_scores_above_threshold_only() {
        let scores = array![[1.0, 0.5], [0.5, 1.0]];
        let g = build_session_graph(features(2, 3), &scores, 0.2).unwrap();
        assert_eq!(*g.affinity(), array![[0.0, 0.5], [0.5, 0.0]]);
        assert_eq!(g.edge_count(), 1);

        let scores = array![[1.0, 0.1], [0.1, 1.0]];
        let g = build_session_graph(features(2, 3), &scores, 0.2).unwrap();
        assert!(g.affinity().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn boundary_scores_are_dropped() {
        let mut scores = Array2::eye(3);
        scores[[0, 1]] = 0.2;
        scores[[1, 0]] = 0.2;
        scores[[1, 2]] = 0.3;
        scores[[2, 1]] = 0.3;
        let g = build_session_graph(features(3, 3), &scores, 0.2).unwrap();
        assert_eq!(g.affinity()[[0, 1]], 0.0, "edge exactly at threshold");
        assert_eq!(g.affinity()[[1, 2]], 0.3);
    }

    #[test]
    fn propagation_hand_values() {
        let scores = array![[0.0, 1.0], [1.0, 0.0]];
        let g = build_session_graph(features(2, 3), &scores, 0.2).unwrap();
        let l = propagation_matrix(&g);
        for (got, want) in l.matrix().iter().zip([0.5, 0.5, 0.5, 0.5]) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn propagation_edgeless_is_identity() {
        let g = build_session_graph(features(3, 3), &Array2::zeros((3, 3)), 0.2).unwrap();
        let l = propagation_matrix(&g);
        assert_eq!(*l.matrix(), Array2::eye(3));
    }

    #[test]
    fn propagation_isolated_node() {
        let scores = array![[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]];
        let g = build_session_graph(features(3, 3), &scores, 0.2).unwrap();
        let l = propagation_matrix(&g);
        assert!((l.matrix()[[2, 2]] - 1.0).abs() < 1e-12);
        assert!((l.matrix()[[0, 1]] - 0.5).abs() < 1e-12);
        assert_eq!(l.matrix()[[0, 2]], 0.0);
    }

    fn random_graph(n: usize, seed: u64) -> SessionGraph {
        let mut state = seed.wrapping_mul(0x2545F4914F6CDD1D) | 1;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            state as f64 / u64::MAX as f64
        };
        let mut scores = Array2::zeros((n, n));
        for i in 0..n {
            for j in (i + 1)..n {
                let v = next();
                scores[[i, j]] = v;
                scores[[j, i]] = v;
            }
        }
        build_session_graph(features(n, 4), &scores, 0.5).unwrap()
    }

    #[test]
    fn propagation_spectral_radius_at_most_one() {
        for seed in 0..20 {
            let n = 2 + (seed as usize * 7) % 49;
            let g = random_graph(n, seed);
            let l = propagation_matrix(&g);
            let w = symmetric_eigenvalues(&l.matrix().view()).unwrap();
            for v in w.iter() {
                assert!(v.abs() <= 1.0 + 1e-9, "eigenvalue {v} out of range at n={n}");
            }
        }
    }

    proptest! {
        #[test]
        fn graph_is_always_symmetric(n in 1usize..12, seed in 0u64..300) {
            // feed an intentionally asymmetric score matrix
            let mut state = seed | 1;
            let mut next = move || {
                state ^= state << 13; state ^= state >> 7; state ^= state << 17;
                state as f64 / u64::MAX as f64
            };
            let scores = Array2::from_shape_fn((n, n), |_| next());
            let g = build_session_graph(features(n, 4), &scores, 0.4).unwrap();
            for i in 0..n {
                prop_assert_eq!(g.affinity()[[i, i]], 0.0);
                for j in 0..n {
                    prop_assert_eq!(g.affinity()[[i, j]], g.affinity()[[j, i]]);
                    let v = g.affinity()[[i, j]];
                    prop_assert!(v == 0.0 || v > 0.4);
                }
            }
        }

        #[test]
        fn propagation_permutation_equivariance(seed in 0u64..100) {
            let n = 6;
            let g = random_graph(n, seed);
            let l = propagation_matrix(&g).matrix().clone();
            // rotate nodes by one
            let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
            let mut scores_p = Array2::zeros((n, n));
            for i in 0..n {
                for j in 0..n {
                    scores_p[[perm[i], perm[j]]] = g.affinity()[[i, j]] ;
                }
            }
            // rebuild with threshold 0 on permuted affinity (already thresholded)
            let gp = build_session_graph(features(n, 4), &scores_p, 0.0).unwrap();
            let lp = propagation_matrix(&gp).matrix().clone();
            for i in 0..n {
                for j in 0..n {
                    prop_assert!((lp[[perm[i], perm[j]]] - l[[i, j]]).abs() < 1e-12);
                }
            }
        }
    }
}
