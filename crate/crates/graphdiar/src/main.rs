//! Pipeline driver: simulate, train, refine, diarize, score, sweep,
//! gradcheck.
//!
//! Exit codes are a stable scripting contract: 0 success, 1 runtime or
//! data failure, 2 usage or configuration error. Flag and configuration
//! validation happens before any input is read and exits 2; once inputs
//! are being read, every failure (missing files, parse errors, model/data
//! mismatches, degenerate corpora, numeric trouble) exits 1.
//!
//! Each value resolves in precedence order: command-line flag, then a
//! `key = value` line in the optional `--config` file, then the GRD_SEED
//! environment variable (seed only), then the built-in default.

use std::collections::HashMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use graphdiar::clustering::{diarize, ClusteringConfig, CountMethod};
use graphdiar::embedding::{
    adjacency_from_labels, load_embeddings, read_rttm, save_embeddings, write_rttm,
    EmbeddingMatrix, GroundTruthAdjacency,
};
use graphdiar::evaluation::{count_error_sweep, sweep_to_csv, EvalReport, SessionScore};
use graphdiar::gradcheck::{run_gradient_check, GradCheckConfig};
use graphdiar::graph::{build_session_graph, pairwise_cosine, propagation_matrix};
use graphdiar::losses::{LossConfig, LossKind};
use graphdiar::refiner::{
    gcn_forward, init_model, load_checkpoint, save_checkpoint, RefinerModel, ScorerKind,
};
use graphdiar::simulator::{load_manifest, simulate_corpus, ManifestEntry, SimConfig};
use graphdiar::trainer::{kfold_split, split_validation, train, tune_count_threshold, TrainConfig};

const DEFAULT_LADDER: [f64; 10] = [0.5, 1.0, 1.5, 2.0, 2.5, 3.0, 3.5, 4.0, 5.0, 6.0];

#[derive(Parser)]
#[command(
    name = "graphdiar",
    version,
    about = "Graph-refined speaker embeddings: simulate corpora, train the refiner, diarize, score"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic session corpus with ground-truth labels
    Simulate(SimulateArgs),
    /// Train the refiner on a labeled corpus
    Train(TrainArgs),
    /// Write refined embeddings for every session in a corpus
    Refine(RefineArgs),
    /// Cluster sessions into speakers and write RTTM files
    Diarize(DiarizeArgs),
    /// Score hypothesis RTTMs against a labeled reference corpus
    Score(ScoreArgs),
    /// Sweep count thresholds and report mean speaker-count error
    Sweep(SweepArgs),
    /// Verify analytic gradients against central finite differences
    Gradcheck(GradcheckArgs),
}

enum CliError {
    /// Bad flags or configuration, detected before reading any input.
    Usage(String),
    /// Anything that goes wrong once execution has started.
    Run(String),
}

impl CliError {
    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Run(m) => m,
        }
    }

    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Run(_) => 1,
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn cfg_err(e: graphdiar::Error) -> CliError {
    CliError::Usage(e.to_string())
}

fn run_err(e: graphdiar::Error) -> CliError {
    CliError::Run(e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.cmd {
        Cmd::Simulate(args) => cmd_simulate(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Refine(args) => cmd_refine(args),
        Cmd::Diarize(args) => cmd_diarize(args),
        Cmd::Score(args) => cmd_score(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Gradcheck(args) => cmd_gradcheck(args),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

/// `key = value` lines; unknown keys are tolerated so one experiment file
/// can serve several subcommands.
struct FileConfig(HashMap<String, String>);

impl FileConfig {
    fn load(path: Option<&PathBuf>) -> CliResult<Self> {
        let mut map = HashMap::new();
        if let Some(path) = path {
            let text = fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config file {}: {e}", path.display()))
            })?;
            for (lineno, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((key, value)) = line.split_once('=') else {
                    return Err(CliError::Usage(format!(
                        "config file {} line {}: expected `key = value`",
                        path.display(),
                        lineno + 1
                    )));
                };
                map.insert(key.trim().to_string(), value.trim().to_string());
            }
        }
        Ok(FileConfig(map))
    }

    fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: Display,
    {
        match self.0.get(key) {
            None => Ok(None),
            Some(raw) => raw.parse().map(Some).map_err(|e| {
                CliError::Usage(format!("config key `{key}`: cannot parse `{raw}`: {e}"))
            }),
        }
    }
}

fn pick<T: FromStr>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> CliResult<T>
where
    T::Err: Display,
{
    Ok(match flag {
        Some(v) => v,
        None => file.get(key)?.unwrap_or(default),
    })
}

fn resolve_seed(flag: Option<u64>, file: &FileConfig) -> CliResult<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    if let Some(seed) = file.get::<u64>("seed")? {
        return Ok(seed);
    }
    match std::env::var("GRD_SEED") {
        Ok(raw) => raw.trim().parse().map_err(|_| {
            CliError::Usage(format!("GRD_SEED must be an unsigned integer, got `{raw}`"))
        }),
        Err(_) => Ok(0),
    }
}

fn parse_dims(raw: &str) -> CliResult<Vec<usize>> {
    raw.split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| {
                CliError::Usage(format!("--dims expects comma-separated integers, got `{raw}`"))
            })
        })
        .collect()
}

fn parse_scorer(raw: &str) -> CliResult<ScorerKind> {
    match raw {
        "cosine" => Ok(ScorerKind::Cosine),
        "fc" => Ok(ScorerKind::FcPairScorer),
        other => Err(CliError::Usage(format!(
            "--scorer must be `cosine` or `fc`, got `{other}`"
        ))),
    }
}

fn parse_loss_kind(raw: &str) -> CliResult<LossKind> {
    match raw {
        "bce" => Ok(LossKind::Bce),
        "hist-nuclear" => Ok(LossKind::HistPlusNuclear),
        other => Err(CliError::Usage(format!(
            "--loss must be `bce` or `hist-nuclear`, got `{other}`"
        ))),
    }
}

fn parse_thresholds(raw: &str) -> CliResult<Vec<f64>> {
    let out: Vec<f64> = raw
        .split(',')
        .map(|part| {
            part.trim().parse().map_err(|_| {
                CliError::Usage(format!(
                    "--thresholds expects comma-separated numbers, got `{raw}`"
                ))
            })
        })
        .collect::<CliResult<_>>()?;
    if out.is_empty() || out.iter().any(|t| !(t.is_finite() && *t > 0.0)) {
        return Err(CliError::Usage(
            "--thresholds must be a non-empty list of positive numbers".into(),
        ));
    }
    Ok(out)
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)
        .map_err(|e| CliError::Run(format!("cannot write {}: {e}", path.display())))
}

/// Loads every session listed in a manifest, in manifest order.
fn load_corpus(manifest: &Path) -> CliResult<Vec<(ManifestEntry, EmbeddingMatrix)>> {
    let entries = load_manifest(manifest).map_err(run_err)?;
    let base = manifest.parent().unwrap_or(Path::new("."));
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let emb = load_embeddings(entry.resolve(base)).map_err(run_err)?;
        out.push((entry, emb));
    }
    Ok(out)
}

fn labeled_corpus(
    corpus: &[(ManifestEntry, EmbeddingMatrix)],
) -> CliResult<Vec<(EmbeddingMatrix, GroundTruthAdjacency)>> {
    corpus
        .iter()
        .map(|(entry, emb)| {
            let labels = emb.labels().ok_or_else(|| {
                CliError::Run(format!(
                    "session {} has segments without speaker labels",
                    entry.path.display()
                ))
            })?;
            Ok((emb.clone(), adjacency_from_labels(&labels)))
        })
        .collect()
}

fn session_stem(entry: &ManifestEntry) -> String {
    entry
        .path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| entry.path.to_string_lossy().into_owned())
}

// ---------------------------------------------------------------- simulate

#[derive(Args)]
struct SimulateArgs {
    /// Output directory for session files and the manifest
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    sessions: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    min_speakers: Option<usize>,
    #[arg(long)]
    max_speakers: Option<usize>,
    #[arg(long)]
    min_segments: Option<usize>,
    #[arg(long)]
    max_segments: Option<usize>,
    /// Seconds per segment
    #[arg(long)]
    duration: Option<f64>,
    /// Within-speaker concentration (inverse noise variance)
    #[arg(long)]
    concentration: Option<f64>,
    /// Reject centroid pairs with cosine above this
    #[arg(long)]
    centroid_cap: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_simulate(args: SimulateArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let d = SimConfig::default();
    let cfg = SimConfig {
        n_sessions: pick(args.sessions, &file, "sessions", d.n_sessions)?,
        speakers_range: (
            pick(args.min_speakers, &file, "min_speakers", d.speakers_range.0)?,
            pick(args.max_speakers, &file, "max_speakers", d.speakers_range.1)?,
        ),
        segments_per_speaker_range: (
            pick(args.min_segments, &file, "min_segments", d.segments_per_speaker_range.0)?,
            pick(args.max_segments, &file, "max_segments", d.segments_per_speaker_range.1)?,
        ),
        dim: pick(args.dim, &file, "dim", d.dim)?,
        segment_duration: pick(args.duration, &file, "duration", d.segment_duration)?,
        within_speaker_concentration: pick(
            args.concentration,
            &file,
            "concentration",
            d.within_speaker_concentration,
        )?,
        centroid_cosine_cap: pick(args.centroid_cap, &file, "centroid_cap", d.centroid_cosine_cap)?,
        seed: resolve_seed(args.seed, &file)?,
    };
    cfg.validate().map_err(cfg_err)?;

    let entries = simulate_corpus(&cfg, &args.out).map_err(run_err)?;
    println!(
        "wrote {} sessions and a manifest to {}",
        entries.len(),
        args.out.display()
    );
    Ok(())
}

// ------------------------------------------------------------------- train

#[derive(Args)]
struct TrainArgs {
    /// Manifest of the labeled training corpus
    #[arg(long)]
    manifest: PathBuf,
    /// Checkpoint path; with --folds, a directory for per-fold outputs
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_drop_epoch: Option<usize>,
    #[arg(long)]
    lr_drop_factor: Option<f64>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    /// Loss kind: `bce` or `hist-nuclear`
    #[arg(long)]
    loss: Option<String>,
    /// Weight of the nuclear-norm term in the combined loss
    #[arg(long)]
    alpha: Option<f64>,
    /// Histogram node count
    #[arg(long)]
    bins: Option<usize>,
    /// Layer dimensions, e.g. 128,128,128
    #[arg(long)]
    dims: Option<String>,
    /// Affinity scorer: `cosine` or `fc`
    #[arg(long)]
    scorer: Option<String>,
    /// Run k-fold cross-validation instead of a single run
    #[arg(long)]
    folds: Option<usize>,
    /// Where to write the per-epoch loss table (default: <out>.loss.csv)
    #[arg(long)]
    loss_csv: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

struct TrainSetup {
    tcfg: TrainConfig,
    dims: Vec<usize>,
    scorer: ScorerKind,
}

fn resolve_train_setup(args: &TrainArgs, file: &FileConfig) -> CliResult<TrainSetup> {
    let d = TrainConfig::default();
    let loss_kind = match pick(args.loss.clone(), file, "loss", String::new())?.as_str() {
        "" => LossConfig::default().kind,
        raw => parse_loss_kind(raw)?,
    };
    let defaults = LossConfig::default();
    let loss = LossConfig {
        kind: loss_kind,
        alpha: pick(args.alpha, file, "alpha", defaults.alpha)?,
        bins: pick(args.bins, file, "bins", defaults.bins)?,
        ..defaults
    };
    let epochs = pick(args.epochs, file, "epochs", d.epochs)?;
    // the default drop epoch tracks a shortened schedule; an explicit
    // --lr-drop-epoch is still validated against the epoch count
    let drop_default = if epochs > 0 && epochs < d.lr_drop_epoch {
        epochs
    } else {
        d.lr_drop_epoch
    };
    let tcfg = TrainConfig {
        epochs,
        lr: pick(args.lr, file, "lr", d.lr)?,
        lr_drop_epoch: pick(args.lr_drop_epoch, file, "lr_drop_epoch", drop_default)?,
        lr_drop_factor: pick(args.lr_drop_factor, file, "lr_drop_factor", d.lr_drop_factor)?,
        folds: pick(args.folds, file, "folds", d.folds)?,
        edge_threshold: pick(args.edge_threshold, file, "edge_threshold", d.edge_threshold)?,
        loss,
        seed: resolve_seed(args.seed, file)?,
    };
    tcfg.validate().map_err(cfg_err)?;

    let scorer = parse_scorer(&pick(args.scorer.clone(), file, "scorer", "cosine".into())?)?;
    let default_dims = match scorer {
        ScorerKind::Cosine => "128,128,128",
        ScorerKind::FcPairScorer => "128,128,64",
    };
    let dims = parse_dims(&pick(args.dims.clone(), file, "dims", default_dims.into())?)?;
    Ok(TrainSetup { tcfg, dims, scorer })
}

fn cmd_train(args: TrainArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let setup = resolve_train_setup(&args, &file)?;
    // architecture problems (non-chaining dims) are still configuration
    let init = init_model(&setup.dims, setup.scorer, setup.tcfg.seed).map_err(cfg_err)?;

    let corpus = load_corpus(&args.manifest)?;
    let sessions = labeled_corpus(&corpus)?;

    if args.folds.is_some() {
        return cross_validate(&args, &setup, init, corpus, sessions);
    }

    let (model, report) = train(init, &sessions, &setup.tcfg).map_err(run_err)?;
    save_checkpoint(&model, &args.out).map_err(run_err)?;
    let csv_path = args
        .loss_csv
        .clone()
        .unwrap_or_else(|| args.out.with_extension("loss.csv"));
    write_text(&csv_path, &report.to_csv())?;

    println!(
        "trained {} epochs on {} sessions ({} skipped as degenerate)",
        setup.tcfg.epochs,
        sessions.len(),
        report.skipped_sessions
    );
    if let (Some(first), Some(last)) = (report.epoch_losses.first(), report.epoch_losses.last()) {
        println!("mean loss: first epoch {first:.6}, final epoch {last:.6}");
    }
    println!("checkpoint {} (checksum {})", args.out.display(), report.checksum);
    println!("loss table {}", csv_path.display());
    Ok(())
}

fn cross_validate(
    args: &TrainArgs,
    setup: &TrainSetup,
    init: RefinerModel,
    corpus: Vec<(ManifestEntry, EmbeddingMatrix)>,
    sessions: Vec<(EmbeddingMatrix, GroundTruthAdjacency)>,
) -> CliResult<()> {
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", args.out.display())))?;
    let splits =
        kfold_split(sessions.len(), setup.tcfg.folds, setup.tcfg.seed).map_err(run_err)?;

    let mut summary = String::from("fold,final_loss,tuned_tau,test_count_error,test_der\n");
    for (fold, (train_idx, test_idx)) in splits.iter().enumerate() {
        let (fit_idx, val_idx) =
            split_validation(train_idx, setup.tcfg.seed.wrapping_add(fold as u64))
                .map_err(run_err)?;
        let fit: Vec<_> = fit_idx.iter().map(|&i| sessions[i].clone()).collect();
        let (model, report) = train(init.clone(), &fit, &setup.tcfg).map_err(run_err)?;

        let ckpt = args.out.join(format!("fold-{fold}.ckpt"));
        save_checkpoint(&model, &ckpt).map_err(run_err)?;
        write_text(
            &args.out.join(format!("fold-{fold}.loss.csv")),
            &report.to_csv(),
        )?;

        let val: Vec<EmbeddingMatrix> = val_idx.iter().map(|&i| sessions[i].0.clone()).collect();
        let tau = tune_count_threshold(Some(&model), &val, &DEFAULT_LADDER, setup.tcfg.edge_threshold)
            .map_err(run_err)?;

        let test: Vec<EmbeddingMatrix> = test_idx.iter().map(|&i| corpus[i].1.clone()).collect();
        let ccfg = ClusteringConfig {
            count_method: CountMethod::Threshold { tau },
            edge_threshold: setup.tcfg.edge_threshold,
            seed: setup.tcfg.seed,
            ..ClusteringConfig::default()
        };
        let eval = graphdiar::evaluation::evaluate_corpus(&test, Some(&model), &ccfg)
            .map_err(run_err)?;
        println!(
            "fold {fold}: final loss {:.6}, tuned tau {tau}, test count error {:.4}, test DER {:.4}",
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            eval.count_error_mean,
            eval.der
        );
        summary.push_str(&format!(
            "{fold},{},{tau},{},{}\n",
            report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            eval.count_error_mean,
            eval.der
        ));
    }
    write_text(&args.out.join("cv-summary.csv"), &summary)?;
    println!("cross-validation summary {}", args.out.join("cv-summary.csv").display());
    Ok(())
}

// ------------------------------------------------------------------ refine

#[derive(Args)]
struct RefineArgs {
    /// Trained checkpoint
    #[arg(long)]
    model: PathBuf,
    /// Manifest of the corpus to refine
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for refined embedding files
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_refine(args: RefineArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let edge_threshold = pick(args.edge_threshold, &file, "edge_threshold", 0.2)?;
    if !(edge_threshold.is_finite() && (-1.0..=1.0).contains(&edge_threshold)) {
        return Err(CliError::Usage(format!(
            "edge threshold must lie in [-1, 1], got {edge_threshold}"
        )));
    }

    let model = load_checkpoint(&args.model).map_err(run_err)?;
    let corpus = load_corpus(&args.manifest)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", args.out.display())))?;

    let mut manifest_text = String::new();
    for (entry, emb) in &corpus {
        let raw = pairwise_cosine(emb.vectors()).map_err(run_err)?;
        let graph = build_session_graph(emb.clone(), &raw, edge_threshold).map_err(run_err)?;
        let l = propagation_matrix(&graph);
        let (z, _) = gcn_forward(&model, &l, emb.vectors()).map_err(run_err)?;
        let refined =
            EmbeddingMatrix::new(z.matrix().clone(), emb.meta().to_vec()).map_err(run_err)?;
        save_embeddings(&refined, args.out.join(&entry.path)).map_err(run_err)?;
        manifest_text.push_str(&format!(
            "{}\t{}\t{}\n",
            entry.path.display(),
            entry.n_speakers,
            entry.n_segments
        ));
    }
    write_text(&args.out.join("manifest.tsv"), &manifest_text)?;
    println!(
        "refined {} sessions into {}",
        corpus.len(),
        args.out.display()
    );
    Ok(())
}

// ----------------------------------------------------------------- diarize

#[derive(Args)]
struct DiarizeArgs {
    /// Manifest of the corpus to diarize
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory for RTTM files
    #[arg(long)]
    out: PathBuf,
    /// Trained checkpoint; omit to cluster the original embeddings
    #[arg(long)]
    model: Option<PathBuf>,
    /// Speaker counting: `threshold`, `eigengap`, or `fixed`
    #[arg(long)]
    count_method: Option<String>,
    /// Eigenvalue threshold for `--count-method threshold`
    #[arg(long)]
    tau: Option<f64>,
    /// Speaker count for `--count-method fixed`
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_speakers: Option<usize>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn resolve_count_method(
    raw: &str,
    tau: f64,
    k: Option<usize>,
) -> CliResult<CountMethod> {
    match raw {
        "threshold" => {
            if !(tau.is_finite() && tau > 0.0) {
                return Err(CliError::Usage(format!(
                    "--tau must be positive, got {tau}"
                )));
            }
            Ok(CountMethod::Threshold { tau })
        }
        "eigengap" => Ok(CountMethod::Eigengap),
        "fixed" => {
            let k = k.ok_or_else(|| {
                CliError::Usage("--count-method fixed requires --k".into())
            })?;
            if k == 0 {
                return Err(CliError::Usage("--k must be positive".into()));
            }
            Ok(CountMethod::Fixed { k })
        }
        other => Err(CliError::Usage(format!(
            "--count-method must be `threshold`, `eigengap` or `fixed`, got `{other}`"
        ))),
    }
}

fn cmd_diarize(args: DiarizeArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let d = ClusteringConfig::default();
    let method_name = pick(args.count_method.clone(), &file, "count_method", "threshold".into())?;
    let tau = pick(args.tau, &file, "tau", 2.0)?;
    let k = match args.k {
        Some(k) => Some(k),
        None => file.get::<usize>("k")?,
    };
    let ccfg = ClusteringConfig {
        count_method: resolve_count_method(&method_name, tau, k)?,
        edge_threshold: pick(args.edge_threshold, &file, "edge_threshold", d.edge_threshold)?,
        max_speakers: pick(args.max_speakers, &file, "max_speakers", d.max_speakers)?,
        seed: resolve_seed(args.seed, &file)?,
    };

    let model = match &args.model {
        Some(path) => Some(load_checkpoint(path).map_err(run_err)?),
        None => None,
    };
    let corpus = load_corpus(&args.manifest)?;
    fs::create_dir_all(&args.out)
        .map_err(|e| CliError::Run(format!("cannot create {}: {e}", args.out.display())))?;

    let mut total_k = 0usize;
    for (entry, emb) in &corpus {
        let hyp = diarize(emb, model.as_ref(), &ccfg).map_err(run_err)?;
        total_k += hyp.k;
        let rttm = args.out.join(format!("{}.rttm", session_stem(entry)));
        write_rttm(&rttm, emb.meta(), &hyp.labels).map_err(run_err)?;
    }
    println!(
        "diarized {} sessions into {} (mean estimated speakers {:.2})",
        corpus.len(),
        args.out.display(),
        total_k as f64 / corpus.len().max(1) as f64
    );
    Ok(())
}

// ------------------------------------------------------------------- score

#[derive(Args)]
struct ScoreArgs {
    /// Manifest of the labeled reference corpus
    #[arg(long)]
    manifest: PathBuf,
    /// Directory of hypothesis RTTM files (one per session)
    #[arg(long)]
    hyp: PathBuf,
    /// Write the per-session report as CSV here (default: print a table)
    #[arg(long)]
    out: Option<PathBuf>,
}

fn distinct(labels: &[usize]) -> usize {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v.len()
}

fn cmd_score(args: ScoreArgs) -> CliResult<()> {
    let corpus = load_corpus(&args.manifest)?;
    if corpus.is_empty() {
        return Err(CliError::Run("reference manifest lists no sessions".into()));
    }
    let mut records = Vec::with_capacity(corpus.len());
    for (entry, emb) in &corpus {
        let session_id = emb
            .meta()
            .first()
            .map(|m| m.session_id.clone())
            .unwrap_or_else(|| session_stem(entry));
        let reference = emb.labels().ok_or_else(|| {
            CliError::Run(format!("reference session {session_id} has no speaker labels"))
        })?;

        let rttm_path = args.hyp.join(format!("{}.rttm", session_stem(entry)));
        if !rttm_path.exists() {
            return Err(CliError::Run(format!(
                "missing hypothesis for session {session_id}: expected {}",
                rttm_path.display()
            )));
        }
        let mut segments = read_rttm(&rttm_path).map_err(run_err)?;
        segments.sort_by(|a, b| a.start.total_cmp(&b.start));
        if segments.len() != emb.len() {
            return Err(CliError::Run(format!(
                "session {session_id}: reference has {} segments, hypothesis {}",
                emb.len(),
                segments.len()
            )));
        }
        let hypothesis: Vec<usize> = segments.iter().map(|s| s.speaker).collect();
        let durations = emb.durations();
        let der = graphdiar::evaluation::confusion_der(&reference, &hypothesis, &durations)
            .map_err(run_err)?;
        records.push(SessionScore {
            session_id,
            true_k: distinct(&reference),
            estimated_k: distinct(&hypothesis),
            der,
            total_duration: durations.iter().sum(),
        });
    }

    let mut report = EvalReport {
        der: 0.0,
        count_error_mean: 0.0,
        sessions: records,
    };
    let (der, count_err) = report.recompute_aggregates();
    report.der = der;
    report.count_error_mean = count_err;

    match &args.out {
        Some(path) => {
            write_text(path, &report.to_csv())?;
            println!(
                "scored {} sessions: DER {:.4}, mean count error {:.4} ({})",
                report.sessions.len(),
                report.der,
                report.count_error_mean,
                path.display()
            );
        }
        None => print!("{}", report.to_table()),
    }
    Ok(())
}

// ------------------------------------------------------------------- sweep

#[derive(Args)]
struct SweepArgs {
    /// Manifest of the labeled corpus to sweep
    #[arg(long)]
    manifest: PathBuf,
    /// Trained checkpoint; omit to sweep the original embeddings
    #[arg(long)]
    model: Option<PathBuf>,
    /// Comma-separated count thresholds
    #[arg(long)]
    thresholds: Option<String>,
    #[arg(long)]
    edge_threshold: Option<f64>,
    /// Write the threshold/error CSV here (default: print it)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_sweep(args: SweepArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let thresholds = match pick(args.thresholds.clone(), &file, "thresholds", String::new())? {
        raw if raw.is_empty() => DEFAULT_LADDER.to_vec(),
        raw => parse_thresholds(&raw)?,
    };
    let edge_threshold = pick(args.edge_threshold, &file, "edge_threshold", 0.2)?;

    let model = match &args.model {
        Some(path) => Some(load_checkpoint(path).map_err(run_err)?),
        None => None,
    };
    let corpus = load_corpus(&args.manifest)?;
    let sessions: Vec<EmbeddingMatrix> = corpus.into_iter().map(|(_, emb)| emb).collect();
    let rows =
        count_error_sweep(&sessions, model.as_ref(), &thresholds, edge_threshold).map_err(run_err)?;
    let csv = sweep_to_csv(&rows);
    match &args.out {
        Some(path) => {
            write_text(path, &csv)?;
            println!("wrote sweep over {} thresholds to {}", rows.len(), path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

// --------------------------------------------------------------- gradcheck

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    max_nodes: Option<usize>,
    #[arg(long)]
    max_dim: Option<usize>,
    /// Central finite-difference step
    #[arg(long)]
    step: Option<f64>,
    /// Maximum tolerated relative error
    #[arg(long)]
    tolerance: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    config: Option<PathBuf>,
}

fn cmd_gradcheck(args: GradcheckArgs) -> CliResult<()> {
    let file = FileConfig::load(args.config.as_ref())?;
    let d = GradCheckConfig::default();
    let cfg = GradCheckConfig {
        instances: pick(args.instances, &file, "instances", d.instances)?,
        max_nodes: pick(args.max_nodes, &file, "max_nodes", d.max_nodes)?,
        max_dim: pick(args.max_dim, &file, "max_dim", d.max_dim)?,
        step: pick(args.step, &file, "step", d.step)?,
        tolerance: pick(args.tolerance, &file, "tolerance", d.tolerance)?,
        seed: resolve_seed(args.seed, &file)?,
    };
    cfg.validate().map_err(cfg_err)?;

    let report = run_gradient_check(&cfg).map_err(run_err)?;
    println!(
        "checked {} instances: max relative error {:.3e} (tolerance {:.1e})",
        report.instances.len(),
        report.worst_rel_err,
        report.tolerance
    );
    if report.passed() {
        println!("PASS");
        Ok(())
    } else {
        Err(CliError::Run(
            "analytic gradients disagree with finite differences".into(),
        ))
    }
}
