//! Session-batched supervised training of the refiner: one graph per
//! session per step, an adaptive-moment optimizer with a late learning
//! rate drop, k-fold splitting, and count-threshold tuning on held-out
//! sessions.

use std::collections::HashSet;
use std::fmt::Write as _;

use rand::seq::SliceRandom;

use crate::embedding::{EmbeddingMatrix, GroundTruthAdjacency};
use crate::evaluation::count_error_sweep;
use crate::graph::{build_session_graph, pairwise_cosine, propagation_matrix};
use crate::losses::{backward, session_loss, sgd_adam_step, AdamState, LossConfig};
use crate::refiner::{gcn_forward, refined_affinity, RefinerModel};
use crate::rng;
use crate::{Error, Result};

/// Training schedule and hyperparameters.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch (1-based) that still runs at the full rate; from the
    /// next epoch on, the rate is divided by `lr_drop_factor`.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub folds: usize,
    /// Cosine threshold for session graph construction.
    pub edge_threshold: f64,
    pub loss: LossConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            lr: 0.001,
            lr_drop_epoch: 40,
            lr_drop_factor: 10.0,
            folds: 5,
            edge_threshold: 0.2,
            loss: LossConfig::default(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.lr_drop_epoch < 1 {
            return Err(Error::Config(
                "lr_drop_epoch must be at least 1".into(),
            ));
        }
        // epochs = 0 is a valid no-op run, so the upper bound only
        // applies when some epochs actually execute
        if self.epochs > 0 && self.lr_drop_epoch > self.epochs {
            return Err(Error::Config(format!(
                "lr_drop_epoch {} exceeds epoch count {}",
                self.lr_drop_epoch, self.epochs
            )));
        }
        if !(self.lr_drop_factor.is_finite() && self.lr_drop_factor > 0.0) {
            return Err(Error::Config(format!(
                "lr_drop_factor must be positive, got {}",
                self.lr_drop_factor
            )));
        }
        if self.folds < 2 {
            return Err(Error::Config(format!(
                "cross-validation needs at least 2 folds, got {}",
                self.folds
            )));
        }
        if !(self.edge_threshold.is_finite() && (-1.0..=1.0).contains(&self.edge_threshold)) {
            return Err(Error::Config(format!(
                "edge threshold must lie in [-1, 1], got {}",
                self.edge_threshold
            )));
        }
        self.loss.validate()
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean session loss per epoch; one entry per epoch run.
    pub epoch_losses: Vec<f64>,
    /// Checksum of the final model, for reproducibility checks.
    pub checksum: String,
    /// Number of distinct sessions that were skipped as degenerate.
    pub skipped_sessions: usize,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss\n");
        for (i, loss) in self.epoch_losses.iter().enumerate() {
            writeln!(out, "{},{}", i + 1, loss).expect("writing to a String cannot fail");
        }
        out
    }
}

/// One optimizer step on one session. `Ok(None)` means the session is
/// degenerate for the configured loss and was skipped.
fn train_step(
    model: &mut RefinerModel,
    adam: &mut AdamState,
    session: &EmbeddingMatrix,
    truth: &GroundTruthAdjacency,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<Option<f64>> {
    let raw = pairwise_cosine(session.vectors())?;
    let graph = build_session_graph(session.clone(), &raw, cfg.edge_threshold)?;
    let l = propagation_matrix(&graph);
    let (z, cache) = gcn_forward(model, &l, session.vectors())?;
    let affinity = match refined_affinity(model, &z) {
        Ok(a) => a,
        Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let (loss, grad_s) = match session_loss(&affinity, truth, &cfg.loss) {
        Ok(pair) => pair,
        Err(Error::Degenerate(_)) => return Ok(None),
        Err(e) => return Err(e),
    };
    let grads = backward(model, &cache, &grad_s)?;
    sgd_adam_step(model, &grads, lr, adam)?;
    Ok(Some(loss))
}

/// Trains `initial` on the given sessions and returns the trained model
/// with a per-epoch loss report. Each epoch visits every session once in
/// a freshly shuffled order; each session is one gradient step. Sessions
/// that are degenerate for the loss (for example single-speaker sessions
/// under the histogram objective) are skipped and counted. The whole run
/// is reproducible bit-for-bit from (seed, data, config).
pub fn train(
    initial: RefinerModel,
    sessions: &[(EmbeddingMatrix, GroundTruthAdjacency)],
    cfg: &TrainConfig,
) -> Result<(RefinerModel, TrainReport)> {
    cfg.validate()?;
    if sessions.is_empty() {
        return Err(Error::Usage("cannot train on an empty session list".into()));
    }
    for (i, (emb, truth)) in sessions.iter().enumerate() {
        if emb.vectors().ncols() != initial.input_dim() {
            return Err(Error::Config(format!(
                "session {i} has embedding dim {}, model expects {}",
                emb.vectors().ncols(),
                initial.input_dim()
            )));
        }
        if truth.n() != emb.len() {
            return Err(Error::Config(format!(
                "session {i} has {} segments but its adjacency covers {}",
                emb.len(),
                truth.n()
            )));
        }
    }

    let mut model = initial;
    let mut adam = AdamState::new(model.param_count());
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut skipped: HashSet<usize> = HashSet::new();

    for epoch in 0..cfg.epochs {
        let lr = if epoch >= cfg.lr_drop_epoch {
            cfg.lr / cfg.lr_drop_factor
        } else {
            cfg.lr
        };
        let mut order: Vec<usize> = (0..sessions.len()).collect();
        let mut shuffle_rng = rng::indexed_substream(cfg.seed, "epoch-shuffle", epoch as u64);
        order.shuffle(&mut shuffle_rng);

        let mut total = 0.0;
        let mut used = 0usize;
        for &idx in &order {
            let (emb, truth) = &sessions[idx];
            match train_step(&mut model, &mut adam, emb, truth, lr, cfg)? {
                Some(loss) => {
                    total += loss;
                    used += 1;
                }
                None => {
                    skipped.insert(idx);
                }
            }
        }
        if used == 0 {
            return Err(Error::Degenerate(
                "every session is degenerate for the configured loss; nothing to train on"
                    .into(),
            ));
        }
        epoch_losses.push(total / used as f64);
    }

    let checksum = model.checksum();
    Ok((
        model,
        TrainReport {
            epoch_losses,
            checksum,
            skipped_sessions: skipped.len(),
        },
    ))
}

/// Splits `n_sessions` indices into `folds` (train, test) pairs: the test
/// sets are disjoint, cover every session, and differ in size by at most
/// one. Deterministic given the seed.
pub fn kfold_split(
    n_sessions: usize,
    folds: usize,
    seed: u64,
) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 {
        return Err(Error::Config(format!(
            "cross-validation needs at least 2 folds, got {folds}"
        )));
    }
    if n_sessions < folds {
        return Err(Error::Config(format!(
            "cannot split {n_sessions} sessions into {folds} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_sessions).collect();
    let mut rng = rng::substream(seed, "kfold-split");
    order.shuffle(&mut rng);

    let base = n_sessions / folds;
    let extra = n_sessions % folds;
    let mut splits = Vec::with_capacity(folds);
    let mut cursor = 0usize;
    for fold in 0..folds {
        let size = base + usize::from(fold < extra);
        let test: Vec<usize> = order[cursor..cursor + size].to_vec();
        let test_set: HashSet<usize> = test.iter().copied().collect();
        let mut train: Vec<usize> =
            (0..n_sessions).filter(|i| !test_set.contains(i)).collect();
        train.sort_unstable();
        let mut test = test;
        test.sort_unstable();
        splits.push((train, test));
        cursor += size;
    }
    Ok(splits)
}

/// Carves a deterministic validation subset (one tenth, at least one
/// session) out of a list of session indices; returns (train, validation).
pub fn split_validation(indices: &[usize], seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if indices.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 sessions to carve a validation set, got {}",
            indices.len()
        )));
    }
    let mut order = indices.to_vec();
    let mut rng = rng::substream(seed, "validation-carve");
    order.shuffle(&mut rng);
    let v = (indices.len() / 10).max(1);
    let mut validation: Vec<usize> = order[..v].to_vec();
    let mut train: Vec<usize> = order[v..].to_vec();
    validation.sort_unstable();
    train.sort_unstable();
    Ok((train, validation))
}

/// Picks the count threshold with the lowest mean absolute speaker-count
/// error over the given sessions; ties go to the smaller threshold. The
/// model being `None` tunes the original-embedding baseline.
pub fn tune_count_threshold(
    model: Option<&RefinerModel>,
    sessions: &[EmbeddingMatrix],
    candidates: &[f64],
    edge_threshold: f64,
) -> Result<f64> {
    let sweep = count_error_sweep(sessions, model, candidates, edge_threshold)?;
    let mut best = sweep[0];
    for &(tau, err) in &sweep[1..] {
        if err < best.1 || (err == best.1 && tau < best.0) {
            best = (tau, err);
        }
    }
    Ok(best.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{adjacency_from_labels, SegmentMeta};
    use crate::refiner::{init_model, ScorerKind};
    use crate::simulator::{simulate_session, SimConfig};
    use ndarray::Array2;
    use proptest::prelude::*;

    fn toy_session(seed: u64) -> (EmbeddingMatrix, GroundTruthAdjacency) {
        let cfg = SimConfig {
            n_sessions: 1,
            speakers_range: (2, 2),
            segments_per_speaker_range: (5, 5),
            dim: 8,
            within_speaker_concentration: 12.0,
            seed,
            ..SimConfig::default()
        };
        let s = simulate_session(&cfg, 0).unwrap();
        (s.embeddings, s.adjacency)
    }

    fn single_speaker_session() -> (EmbeddingMatrix, GroundTruthAdjacency) {
        let mut vectors = Array2::zeros((4, 8));
        let mut meta = Vec::new();
        for i in 0..4 {
            vectors[[i, 0]] = 1.0;
            meta.push(SegmentMeta {
                session_id: "solo".into(),
                start: i as f64 * 1.5,
                duration: 1.5,
                speaker: Some(0),
            });
        }
        let emb = EmbeddingMatrix::new(vectors, meta).unwrap();
        let adj = adjacency_from_labels(&[0, 0, 0, 0]);
        (emb, adj)
    }

    fn quick_config(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            lr_drop_epoch: epochs.max(1),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad_lr = TrainConfig { lr: 0.0, ..TrainConfig::default() };
        assert!(matches!(bad_lr.validate(), Err(Error::Config(_))));
        let bad_drop = TrainConfig { lr_drop_epoch: 0, ..TrainConfig::default() };
        assert!(matches!(bad_drop.validate(), Err(Error::Config(_))));
        let late_drop = TrainConfig { lr_drop_epoch: 51, ..TrainConfig::default() };
        assert!(matches!(late_drop.validate(), Err(Error::Config(_))));
        let bad_folds = TrainConfig { folds: 1, ..TrainConfig::default() };
        assert!(matches!(bad_folds.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn zero_epochs_returns_the_initial_model() {
        let init = init_model(&[8, 8], ScorerKind::Cosine, 3).unwrap();
        let before = init.encode();
        let sessions = vec![toy_session(1)];
        let (model, report) = train(init, &sessions, &quick_config(0)).unwrap();
        assert_eq!(model.encode(), before);
        assert!(report.epoch_losses.is_empty());
        assert_eq!(report.skipped_sessions, 0);
    }

    #[test]
    fn loss_decreases_on_a_separable_session() {
        let sessions = vec![toy_session(7)];
        let init = init_model(&[8, 8, 8], ScorerKind::Cosine, 11).unwrap();
        let cfg = TrainConfig { lr: 0.01, ..quick_config(15) };
        let (_, report) = train(init, &sessions, &cfg).unwrap();
        assert_eq!(report.epoch_losses.len(), 15);
        let first = report.epoch_losses[0];
        let last = *report.epoch_losses.last().unwrap();
        assert!(
            last < first,
            "loss should fall over training: first {first}, last {last}"
        );
    }

    #[test]
    fn training_is_deterministic_and_seed_sensitive() {
        let sessions = vec![toy_session(2), toy_session(3)];
        let cfg = quick_config(4);
        let run = |model_seed: u64| {
            let init = init_model(&[8, 6], ScorerKind::Cosine, model_seed).unwrap();
            train(init, &sessions, &cfg).unwrap()
        };
        let (model_a, report_a) = run(5);
        let (model_b, report_b) = run(5);
        assert_eq!(report_a, report_b);
        assert_eq!(model_a.encode(), model_b.encode());

        let (_, report_c) = run(6);
        assert_ne!(report_a.checksum, report_c.checksum);
    }

    #[test]
    fn degenerate_sessions_are_skipped_and_counted() {
        let sessions = vec![toy_session(4), single_speaker_session()];
        let init = init_model(&[8, 8], ScorerKind::Cosine, 0).unwrap();
        let (_, report) = train(init, &sessions, &quick_config(3)).unwrap();
        assert_eq!(report.skipped_sessions, 1);

        let all_bad = vec![single_speaker_session()];
        let init = init_model(&[8, 8], ScorerKind::Cosine, 0).unwrap();
        let out = train(init, &all_bad, &quick_config(3));
        assert!(matches!(out, Err(Error::Degenerate(_))));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let sessions = vec![toy_session(1)];
        let init = init_model(&[16, 8], ScorerKind::Cosine, 0).unwrap();
        assert!(matches!(
            train(init, &sessions, &quick_config(1)),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn kfold_matches_worked_examples() {
        let five_hundred = kfold_split(500, 5, 0).unwrap();
        assert_eq!(five_hundred.len(), 5);
        for (train, test) in &five_hundred {
            assert_eq!(test.len(), 100);
            assert_eq!(train.len(), 400);
        }

        let ten = kfold_split(10, 5, 1).unwrap();
        let mut seen = HashSet::new();
        for (_, test) in &ten {
            assert_eq!(test.len(), 2);
            for &i in test {
                assert!(seen.insert(i));
            }
        }
        assert_eq!(seen.len(), 10);

        let eleven = kfold_split(11, 5, 2).unwrap();
        let mut sizes: Vec<usize> = eleven.iter().map(|(_, t)| t.len()).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![2, 2, 2, 2, 3]);
    }

    #[test]
    fn kfold_rejects_bad_shapes() {
        assert!(matches!(kfold_split(4, 5, 0), Err(Error::Config(_))));
        assert!(matches!(kfold_split(10, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn kfold_is_deterministic() {
        assert_eq!(kfold_split(23, 4, 9).unwrap(), kfold_split(23, 4, 9).unwrap());
        assert_ne!(kfold_split(23, 4, 9).unwrap(), kfold_split(23, 4, 10).unwrap());
    }

    #[test]
    fn validation_carve_is_a_tenth() {
        let indices: Vec<usize> = (0..40).collect();
        let (train, validation) = split_validation(&indices, 0).unwrap();
        assert_eq!(validation.len(), 4);
        assert_eq!(train.len(), 36);
        let mut all: Vec<usize> = train.iter().chain(&validation).copied().collect();
        all.sort_unstable();
        assert_eq!(all, indices);

        // at least one validation session even for tiny lists
        let (t, v) = split_validation(&[3, 8, 9], 1).unwrap();
        assert_eq!(v.len(), 1);
        assert_eq!(t.len(), 2);

        assert_eq!(
            split_validation(&indices, 7).unwrap(),
            split_validation(&indices, 7).unwrap()
        );
    }

    fn axis_session(block_sizes: &[usize], dim: usize) -> EmbeddingMatrix {
        let n: usize = block_sizes.iter().sum();
        let mut vectors = Array2::zeros((n, dim));
        let mut meta = Vec::new();
        let mut row = 0;
        for (speaker, &m) in block_sizes.iter().enumerate() {
            for _ in 0..m {
                vectors[[row, speaker]] = 1.0;
                meta.push(SegmentMeta {
                    session_id: "axis".into(),
                    start: row as f64 * 1.5,
                    duration: 1.5,
                    speaker: Some(speaker),
                });
                row += 1;
            }
        }
        EmbeddingMatrix::new(vectors, meta).unwrap()
    }

    #[test]
    fn threshold_tuning_picks_the_accurate_candidate() {
        // ideal three-block affinity: eigenvalues are the block sizes
        // {4, 3, 5}, so tau = 0.5 counts 3 speakers and tau = 10 collapses
        // to one
        let sessions = vec![axis_session(&[4, 3, 5], 8)];
        let best = tune_count_threshold(None, &sessions, &[0.5, 10.0], 0.2).unwrap();
        assert_eq!(best, 0.5);

        let single = tune_count_threshold(None, &sessions, &[2.5], 0.2).unwrap();
        assert_eq!(single, 2.5);

        // both candidates are exact: tie goes to the smaller one
        let tie = tune_count_threshold(None, &sessions, &[2.0, 1.0], 0.2).unwrap();
        assert_eq!(tie, 1.0);
    }

    #[test]
    fn report_csv_shape() {
        let report = TrainReport {
            epoch_losses: vec![0.5, 0.25],
            checksum: "ab".into(),
            skipped_sessions: 0,
        };
        assert_eq!(report.to_csv(), "epoch,mean_loss\n1,0.5\n2,0.25\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn kfold_partitions_are_disjoint_and_cover(
            n in 2usize..60,
            folds in 2usize..8,
            seed in 0u64..50,
        ) {
            prop_assume!(n >= folds);
            let splits = kfold_split(n, folds, seed).unwrap();
            prop_assert_eq!(splits.len(), folds);
            let mut seen = HashSet::new();
            let mut sizes = Vec::new();
            for (train, test) in &splits {
                sizes.push(test.len());
                for &i in test {
                    prop_assert!(seen.insert(i), "index {} in two test sets", i);
                    prop_assert!(!train.contains(&i));
                }
                prop_assert_eq!(train.len() + test.len(), n);
            }
            prop_assert_eq!(seen.len(), n);
            let lo = *sizes.iter().min().unwrap();
            let hi = *sizes.iter().max().unwrap();
            prop_assert!(hi - lo <= 1);
        }
    }
}
