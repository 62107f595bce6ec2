//! The embedding refiner: stacked linear GCN layers plus a pair scorer.
//!
//! Each layer multiplies node features by the propagation matrix and a
//! learned weight matrix, with *no* nonlinearity in between:
//!
//! ```text
//! H₀ = X,   H_k = (L · H_{k-1}) · W_kᵀ,   Z = H_last
//! ```
//!
//! so the default two-layer stack computes `Z = L·(L·X·W₁ᵀ)·W₂ᵀ`. Refined
//! embeddings are scored into an affinity either by plain cosine (the
//! d-vector path) or by a small fully connected pair classifier with an ELU
//! hidden layer and a sigmoid output (the x-vector path). Because
//! concatenation order is arbitrary, FC pair scores are symmetrized as the
//! mean over both orders.
//!
//! The forward pass returns a [`ForwardCache`] holding every intermediate
//! the hand-written backward pass needs; caches are pinned to the model
//! version so a cache can never be replayed against updated weights.
//!
//! This is deliberately the plainest member of the message-passing family:
//! a general MPNN would let the message, aggregation, and update functions
//! vary, but a sum aggregation with linear updates is all that is needed
//! here, and anything fancier would be a different model, not a config.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1};
use sha2::{Digest, Sha256};

use crate::graph::PropagationMatrix;
use crate::{Error, Result};

/// Magic bytes of a checkpoint file.
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"GNNREF1\n";

/// Hidden width of the FC pair scorer.
pub const FC_HIDDEN_DIM: usize = 64;

/// How a pair of refined embeddings is turned into an affinity entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScorerKind {
    /// Plain cosine similarity; keeps the metric the inputs were trained
    /// under (d-vectors).
    Cosine,
    /// Learned classifier on the concatenated pair (x-vectors).
    FcPairScorer,
}

/// Parameters of the FC pair scorer:
/// `score = sigmoid(w_out · elu(W_h·[z_i; z_j] + b_h) + b_out)`.
#[derive(Debug, Clone)]
pub struct FcScorer {
    /// `hidden × pair` weight matrix; `pair` is twice the refined dim.
    pub w_hidden: Array2<f64>,
    pub b_hidden: Array1<f64>,
    pub w_out: Array1<f64>,
    pub b_out: f64,
}

impl FcScorer {
    fn validate(&self) -> Result<()> {
        let hidden = self.w_hidden.nrows();
        if self.b_hidden.len() != hidden || self.w_out.len() != hidden {
            return Err(Error::Config(format!(
                "fc scorer shape mismatch: hidden weight {}x{}, hidden bias {}, output weight {}",
                hidden,
                self.w_hidden.ncols(),
                self.b_hidden.len(),
                self.w_out.len()
            )));
        }
        Ok(())
    }
}

/// The refiner model: GCN layer weights (each stored `out_dim × in_dim`)
/// plus the optional FC scorer head.
#[derive(Debug, Clone)]
pub struct RefinerModel {
    gcn_weights: Vec<Array2<f64>>,
    scorer: ScorerKind,
    fc: Option<FcScorer>,
    version: u64,
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl RefinerModel {
    /// Wraps explicit weights, checking that consecutive layer dimensions
    /// chain and that the scorer head matches the refined dimension.
    pub fn from_weights(
        gcn_weights: Vec<Array2<f64>>,
        scorer: ScorerKind,
        fc: Option<FcScorer>,
    ) -> Result<Self> {
        if gcn_weights.is_empty() {
            return Err(Error::Config("model needs at least one GCN layer".into()));
        }
        for w in &gcn_weights {
            if w.nrows() == 0 || w.ncols() == 0 {
                return Err(Error::Config("zero-sized layer".into()));
            }
        }
        for k in 1..gcn_weights.len() {
            let prev_out = gcn_weights[k - 1].nrows();
            let next_in = gcn_weights[k].ncols();
            if prev_out != next_in {
                return Err(Error::Config(format!(
                    "layer dims do not chain: layer {} outputs {prev_out}, layer {} expects {next_in}",
                    k - 1,
                    k
                )));
            }
        }
        if gcn_weights
            .iter()
            .flat_map(|w| w.iter())
            .any(|v| !v.is_finite())
        {
            return Err(Error::Numeric("non-finite model parameter".into()));
        }
        let out_dim = gcn_weights.last().expect("nonempty").nrows();
        match (scorer, &fc) {
            (ScorerKind::Cosine, None) => {}
            (ScorerKind::Cosine, Some(_)) => {
                return Err(Error::Config(
                    "cosine scorer takes no fc parameters".into(),
                ));
            }
            (ScorerKind::FcPairScorer, None) => {
                return Err(Error::Config("fc scorer parameters missing".into()));
            }
            (ScorerKind::FcPairScorer, Some(fc)) => {
                fc.validate()?;
                if fc.w_hidden.ncols() != 2 * out_dim {
                    return Err(Error::Config(format!(
                        "fc scorer expects pairs of dim {}, refined dim is {out_dim}",
                        fc.w_hidden.ncols()
                    )));
                }
            }
        }
        Ok(RefinerModel {
            gcn_weights,
            scorer,
            fc,
            version: 0,
        })
    }

    pub fn gcn_weights(&self) -> &[Array2<f64>] {
        &self.gcn_weights
    }

    pub fn scorer(&self) -> ScorerKind {
        self.scorer
    }

    pub fn fc(&self) -> Option<&FcScorer> {
        self.fc.as_ref()
    }

    pub fn input_dim(&self) -> usize {
        self.gcn_weights[0].ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.gcn_weights.last().expect("nonempty").nrows()
    }

    /// Monotone counter bumped by every parameter mutation; forward caches
    /// record it so the backward pass can reject stale caches.
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Total scalar parameter count, in flat order (GCN layers row-major in
    /// declaration order, then fc hidden weights, hidden bias, output
    /// weights, output bias).
    pub fn param_count(&self) -> usize {
        let gcn: usize = self.gcn_weights.iter().map(|w| w.len()).sum();
        let fc = self.fc.as_ref().map_or(0, |fc| {
            fc.w_hidden.len() + fc.b_hidden.len() + fc.w_out.len() + 1
        });
        gcn + fc
    }

    /// Visits every parameter mutably in flat order. Bumps the version.
    pub(crate) fn for_each_param_mut(&mut self, mut f: impl FnMut(usize, &mut f64)) {
        let mut idx = 0;
        for w in &mut self.gcn_weights {
            for v in w.iter_mut() {
                f(idx, v);
                idx += 1;
            }
        }
        if let Some(fc) = &mut self.fc {
            for v in fc.w_hidden.iter_mut() {
                f(idx, v);
                idx += 1;
            }
            for v in fc.b_hidden.iter_mut() {
                f(idx, v);
                idx += 1;
            }
            for v in fc.w_out.iter_mut() {
                f(idx, v);
                idx += 1;
            }
            f(idx, &mut fc.b_out);
        }
        self.version += 1;
    }

    /// Serialized checkpoint bytes (the exact on-disk representation).
    pub fn encode(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&(self.gcn_weights.len() as u32).to_le_bytes());
        for w in &self.gcn_weights {
            buf.extend_from_slice(&(w.nrows() as u32).to_le_bytes());
            buf.extend_from_slice(&(w.ncols() as u32).to_le_bytes());
        }
        for w in &self.gcn_weights {
            for v in w.iter() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        match (&self.scorer, &self.fc) {
            (ScorerKind::Cosine, _) => buf.push(0),
            (ScorerKind::FcPairScorer, Some(fc)) => {
                buf.push(1);
                buf.extend_from_slice(&(fc.w_hidden.nrows() as u32).to_le_bytes());
                buf.extend_from_slice(&(fc.w_hidden.ncols() as u32).to_le_bytes());
                for v in fc.w_hidden.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in fc.b_hidden.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                for v in fc.w_out.iter() {
                    buf.extend_from_slice(&v.to_le_bytes());
                }
                buf.extend_from_slice(&fc.b_out.to_le_bytes());
            }
            (ScorerKind::FcPairScorer, None) => unreachable!("validated in from_weights"),
        }
        buf
    }

    /// Hex SHA-256 of the encoded checkpoint; two models with equal
    /// checksums have bit-identical parameters.
    pub fn checksum(&self) -> String {
        let digest = Sha256::digest(self.encode());
        let mut out = String::with_capacity(64);
        for byte in digest {
            write!(out, "{byte:02x}").expect("writing to a String cannot fail");
        }
        out
    }
}

/// Initializes a model for the given dimension chain. `dims` lists the
/// input dimension followed by each layer's output dimension, e.g.
/// `[128, 128, 128]` for two square layers. Weights are drawn uniformly
/// from `(-1/√fan_in, 1/√fan_in)`; biases start at zero. Deterministic
/// given the seed.
pub fn init_model(dims: &[usize], scorer: ScorerKind, seed: u64) -> Result<RefinerModel> {
    if dims.len() < 2 {
        return Err(Error::Config(format!(
            "dimension chain needs an input and at least one layer, got {dims:?}"
        )));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(Error::Config(format!("zero dimension in chain {dims:?}")));
    }
    let mut rng = crate::rng::substream(seed, "model-init");
    let mut uniform = |scale: f64| -> f64 { rand::Rng::random_range(&mut rng, -scale..scale) };
    let mut gcn_weights = Vec::with_capacity(dims.len() - 1);
    for k in 1..dims.len() {
        let (input, output) = (dims[k - 1], dims[k]);
        let scale = 1.0 / (input as f64).sqrt();
        let mut values = Vec::with_capacity(output * input);
        for _ in 0..output * input {
            values.push(uniform(scale));
        }
        gcn_weights.push(Array2::from_shape_vec((output, input), values).expect("sized above"));
    }
    let fc = match scorer {
        ScorerKind::Cosine => None,
        ScorerKind::FcPairScorer => {
            let pair = 2 * dims[dims.len() - 1];
            let scale = 1.0 / (pair as f64).sqrt();
            let mut values = Vec::with_capacity(FC_HIDDEN_DIM * pair);
            for _ in 0..FC_HIDDEN_DIM * pair {
                values.push(uniform(scale));
            }
            let w_hidden =
                Array2::from_shape_vec((FC_HIDDEN_DIM, pair), values).expect("sized above");
            let scale = 1.0 / (FC_HIDDEN_DIM as f64).sqrt();
            let w_out = Array1::from_shape_fn(FC_HIDDEN_DIM, |_| uniform(scale));
            Some(FcScorer {
                w_hidden,
                b_hidden: Array1::zeros(FC_HIDDEN_DIM),
                w_out,
                b_out: 0.0,
            })
        }
    };
    RefinerModel::from_weights(gcn_weights, scorer, fc)
}

/// Refined per-segment embeddings `Z`.
#[derive(Debug, Clone)]
pub struct RefinedEmbeddings {
    z: Array2<f64>,
}

impl RefinedEmbeddings {
    pub fn matrix(&self) -> &Array2<f64> {
        &self.z
    }

    pub fn n(&self) -> usize {
        self.z.nrows()
    }

    pub fn dim(&self) -> usize {
        self.z.ncols()
    }
}

/// Intermediates of one forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) model_version: u64,
    /// The propagation matrix used.
    pub(crate) l: Array2<f64>,
    /// Per layer `k`: the mixed features `L·H_{k-1}` the layer weight saw.
    pub(crate) mixed_inputs: Vec<Array2<f64>>,
    /// Final refined embeddings.
    pub(crate) z: Array2<f64>,
}

impl ForwardCache {
    pub(crate) fn check_fresh(&self, model: &RefinerModel) -> Result<()> {
        if self.model_version != model.version() {
            return Err(Error::Usage(
                "stale forward cache: model parameters changed since this forward pass".into(),
            ));
        }
        Ok(())
    }
}

/// Runs the GCN stack: `H_k = (L·H_{k-1})·W_kᵀ`.
pub fn gcn_forward(
    model: &RefinerModel,
    l: &PropagationMatrix,
    x: &Array2<f64>,
) -> Result<(RefinedEmbeddings, ForwardCache)> {
    if l.n() != x.nrows() {
        return Err(Error::Config(format!(
            "propagation matrix is {}x{} but features have {} rows",
            l.n(),
            l.n(),
            x.nrows()
        )));
    }
    if x.ncols() != model.input_dim() {
        return Err(Error::Config(format!(
            "features have dim {}, model expects {}",
            x.ncols(),
            model.input_dim()
        )));
    }
    let mut h = x.clone();
    let mut mixed_inputs = Vec::with_capacity(model.gcn_weights.len());
    for w in &model.gcn_weights {
        let mixed = l.matrix().dot(&h);
        h = mixed.dot(&w.t());
        mixed_inputs.push(mixed);
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite refined embedding".into()));
    }
    let cache = ForwardCache {
        model_version: model.version(),
        l: l.matrix().clone(),
        mixed_inputs,
        z: h.clone(),
    };
    Ok((RefinedEmbeddings { z: h }, cache))
}

/// Cosine affinity over refined embeddings. A zero-norm refined row means
/// the model has collapsed that segment to the origin, which is reported
/// as a degenerate output rather than silently propagated.
pub fn refined_affinity_cosine(z: &RefinedEmbeddings) -> Result<Array2<f64>> {
    crate::graph::pairwise_cosine(&z.z).map_err(|e| match e {
        Error::Degenerate(msg) => {
            Error::Degenerate(format!("refined embeddings collapsed: {msg}"))
        }
        other => other,
    })
}

fn fc_score_directed(fc: &FcScorer, z_i: ArrayView1<f64>, z_j: ArrayView1<f64>) -> f64 {
    let d = z_i.len();
    let mut pair = Array1::zeros(2 * d);
    pair.slice_mut(ndarray::s![..d]).assign(&z_i);
    pair.slice_mut(ndarray::s![d..]).assign(&z_j);
    let hidden = fc.w_hidden.dot(&pair) + &fc.b_hidden;
    let activated = hidden.mapv(elu);
    sigmoid(fc.w_out.dot(&activated) + fc.b_out)
}

/// Symmetrized FC pair score: the mean of the scorer applied to
/// `[z_i; z_j]` and `[z_j; z_i]`.
pub fn fc_pair_score(
    model: &RefinerModel,
    z_i: ArrayView1<f64>,
    z_j: ArrayView1<f64>,
) -> Result<f64> {
    let fc = match (model.scorer, &model.fc) {
        (ScorerKind::FcPairScorer, Some(fc)) => fc,
        _ => {
            return Err(Error::Usage(
                "fc_pair_score requires a model with the fc pair scorer".into(),
            ));
        }
    };
    if z_i.len() != model.output_dim() || z_j.len() != model.output_dim() {
        return Err(Error::Config(format!(
            "pair scorer expects dim {}, got {} and {}",
            model.output_dim(),
            z_i.len(),
            z_j.len()
        )));
    }
    Ok(0.5 * (fc_score_directed(fc, z_i, z_j) + fc_score_directed(fc, z_j, z_i)))
}

/// Full FC-scored affinity: symmetrized scores for every unordered pair,
/// mirrored into both triangles, with a unit diagonal.
pub fn refined_affinity_fc(model: &RefinerModel, z: &RefinedEmbeddings) -> Result<Array2<f64>> {
    let n = z.n();
    let mut s = Array2::eye(n);
    for i in 0..n {
        for j in (i + 1)..n {
            let v = fc_pair_score(model, z.z.row(i), z.z.row(j))?;
            s[[i, j]] = v;
            s[[j, i]] = v;
        }
    }
    Ok(s)
}

/// Scores refined embeddings with whichever scorer the model carries.
pub fn refined_affinity(model: &RefinerModel, z: &RefinedEmbeddings) -> Result<Array2<f64>> {
    match model.scorer {
        ScorerKind::Cosine => refined_affinity_cosine(z),
        ScorerKind::FcPairScorer => refined_affinity_fc(model, z),
    }
}

/// Writes a checkpoint file.
pub fn save_checkpoint(model: &RefinerModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, model.encode()).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint file written by [`save_checkpoint`].
pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<RefinerModel> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |offset: usize, msg: &str| Error::Parse {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg: msg.to_string(),
    };
    let mut off = 0usize;
    let take = |off: &mut usize, len: usize| -> Result<&[u8]> {
        if bytes.len() < *off + len {
            return Err(parse_err(bytes.len(), "truncated checkpoint"));
        }
        let slice = &bytes[*off..*off + len];
        *off += len;
        Ok(slice)
    };
    if take(&mut off, 8)? != CHECKPOINT_MAGIC {
        return Err(parse_err(0, "bad magic, not a checkpoint file"));
    }
    let read_u32 = |off: &mut usize| -> Result<u32> {
        Ok(u32::from_le_bytes(take(off, 4)?.try_into().expect("4 bytes")))
    };
    let read_f64s = |off: &mut usize, count: usize| -> Result<Vec<f64>> {
        let slice = take(off, count * 8)?;
        Ok(slice
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    };
    let layer_count = read_u32(&mut off)? as usize;
    if layer_count == 0 || layer_count > 64 {
        return Err(parse_err(8, "unreasonable layer count"));
    }
    let mut dims = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let out = read_u32(&mut off)? as usize;
        let input = read_u32(&mut off)? as usize;
        dims.push((out, input));
    }
    let mut gcn_weights = Vec::with_capacity(layer_count);
    for &(out, input) in &dims {
        let values = read_f64s(&mut off, out * input)?;
        gcn_weights.push(Array2::from_shape_vec((out, input), values).expect("sized above"));
    }
    let tag = take(&mut off, 1)?[0];
    let (scorer, fc) = match tag {
        0 => (ScorerKind::Cosine, None),
        1 => {
            let hidden = read_u32(&mut off)? as usize;
            let pair = read_u32(&mut off)? as usize;
            let w_hidden = Array2::from_shape_vec(
                (hidden, pair),
                read_f64s(&mut off, hidden * pair)?,
            )
            .expect("sized above");
            let b_hidden = Array1::from_vec(read_f64s(&mut off, hidden)?);
            let w_out = Array1::from_vec(read_f64s(&mut off, hidden)?);
            let b_out = read_f64s(&mut off, 1)?[0];
            (
                ScorerKind::FcPairScorer,
                Some(FcScorer {
                    w_hidden,
                    b_hidden,
                    w_out,
                    b_out,
                }),
            )
        }
        other => {
            return Err(parse_err(off - 1, &format!("unknown scorer tag {other}")));
        }
    };
    if off != bytes.len() {
        return Err(parse_err(off, "trailing bytes after checkpoint payload"));
    }
    RefinerModel::from_weights(gcn_weights, scorer, fc).map_err(|e| parse_err(8, &e.to_string()))
}
