//! Training losses over affinity matrices, their exact gradients, and the
//! optimizer step.
//!
//! Three losses are available, all defined on unordered segment pairs
//! `i < j` with the diagonal excluded:
//!
//! * [`bce_pairwise_loss`]: mean binary cross entropy of each affinity
//!   entry against the ground-truth adjacency.
//! * [`histogram_loss`]: the probability that a random different-speaker
//!   pair scores above a random same-speaker pair, estimated with
//!   triangular soft binning, so it stays differentiable almost everywhere.
//! * [`nuclear_norm_loss`]: the sum of singular values of the residual
//!   `A − A_gt`, a convex low-rank surrogate whose subgradient is `U·Vᵀ`.
//!
//! [`combined_loss`] is `histogram + alpha · nuclear`. The histogram and
//! BCE gradients are reported on the upper triangle only (those are the
//! entries the losses read); the nuclear gradient is dense because the
//! residual involves the whole matrix. [`backward`] chains any of these
//! affinity gradients through the scorer and the GCN stack to produce
//! per-parameter gradients, and [`sgd_adam_step`] applies the standard
//! adaptive-moment update.

use ndarray::{Array1, Array2};

use crate::embedding::GroundTruthAdjacency;
use crate::graph::NORM_FLOOR;
use crate::linalg;
use crate::refiner::{FcScorer, ForwardCache, RefinerModel, ScorerKind};
use crate::{Error, Result};

/// Scores are clamped into `[ε, 1−ε]` before taking logs.
pub const BCE_CLAMP: f64 = 1e-7;

/// Which loss the trainer optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    /// Binary cross entropy on every pair (FC-scorer path).
    Bce,
    /// Histogram loss plus `alpha` times the nuclear-norm residual.
    HistPlusNuclear,
}

/// Loss hyperparameters.
#[derive(Debug, Clone)]
pub struct LossConfig {
    pub kind: LossKind,
    /// Weight of the nuclear-norm term.
    pub alpha: f64,
    /// Histogram node count.
    pub bins: usize,
    /// Closed similarity range covered by the histogram.
    pub bin_range: (f64, f64),
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            kind: LossKind::HistPlusNuclear,
            alpha: 0.01,
            bins: 150,
            bin_range: (-1.0, 1.0),
        }
    }
}

impl LossConfig {
    pub fn bce() -> Self {
        LossConfig {
            kind: LossKind::Bce,
            ..LossConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(Error::Config(format!(
                "histogram needs at least 2 nodes, got {}",
                self.bins
            )));
        }
        let (lo, hi) = self.bin_range;
        if !lo.is_finite() || !hi.is_finite() || lo >= hi {
            return Err(Error::Config(format!(
                "bin range must satisfy lo < hi, got [{lo}, {hi}]"
            )));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!(
                "nuclear weight must be nonnegative, got {}",
                self.alpha
            )));
        }
        Ok(())
    }
}

fn check_affinity_inputs(s: &Array2<f64>, gt: &GroundTruthAdjacency) -> Result<usize> {
    let n = gt.n();
    if s.nrows() != n || s.ncols() != n {
        return Err(Error::Config(format!(
            "affinity is {}x{} but adjacency is {n}x{n}",
            s.nrows(),
            s.ncols()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite affinity entry".into()));
    }
    Ok(n)
}

/// Mean binary cross entropy over unordered pairs. Returns the loss and
/// `dL/dS`; the gradient lives on the upper triangle (the entries the loss
/// reads) and is zero wherever the clamp is active.
pub fn bce_pairwise_loss(
    s: &Array2<f64>,
    gt: &GroundTruthAdjacency,
) -> Result<(f64, Array2<f64>)> {
    let n = check_affinity_inputs(s, gt)?;
    if n < 2 {
        return Err(Error::Degenerate(
            "pairwise loss needs at least two segments".into(),
        ));
    }
    let count = (n * (n - 1) / 2) as f64;
    let mut loss = 0.0;
    let mut grad = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let a = gt.entry(i, j);
            let raw = s[[i, j]];
            let sc = raw.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP);
            loss -= a * sc.ln() + (1.0 - a) * (1.0 - sc).ln();
            if (BCE_CLAMP..=1.0 - BCE_CLAMP).contains(&raw) {
                grad[[i, j]] = (sc - a) / (sc * (1.0 - sc)) / count;
            }
        }
    }
    Ok((loss / count, grad))
}

/// Per-pair soft binning bookkeeping: the cell index and the positions of
/// the two node weights it spreads across.
struct BinnedPair {
    i: usize,
    j: usize,
    cell: usize,
}

fn bin_pairs(
    values: &[(usize, usize, f64)],
    lo: f64,
    step: f64,
    bins: usize,
) -> (Vec<f64>, Vec<BinnedPair>) {
    let mut hist = vec![0.0; bins];
    let mut placed = Vec::with_capacity(values.len());
    for &(i, j, v) in values {
        let t = (v - lo) / step;
        let cell = (t.floor() as usize).min(bins - 2);
        let frac = t - cell as f64;
        hist[cell] += 1.0 - frac;
        hist[cell + 1] += frac;
        placed.push(BinnedPair { i, j, cell });
    }
    let total = values.len() as f64;
    for h in &mut hist {
        *h /= total;
    }
    (hist, placed)
}

/// Ranking loss between same-speaker and different-speaker similarity
/// distributions: both are soft-binned onto `cfg.bins` nodes spanning
/// `cfg.bin_range`, and the loss is `Σ_r h⁻_r · Φ⁺_r` with `Φ⁺` the
/// cumulative positive histogram, i.e. the (soft) probability that a
/// negative pair outscores a positive pair. Lives in `[0, 1]`.
pub fn histogram_loss(
    s: &Array2<f64>,
    gt: &GroundTruthAdjacency,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    cfg.validate()?;
    let n = check_affinity_inputs(s, gt)?;
    let (lo, hi) = cfg.bin_range;
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = s[[i, j]];
            if v < lo - 1e-12 || v > hi + 1e-12 {
                return Err(Error::Config(format!(
                    "similarity {v} at ({i}, {j}) outside bin range [{lo}, {hi}]"
                )));
            }
            let v = v.clamp(lo, hi);
            if gt.is_same(i, j) {
                pos.push((i, j, v));
            } else {
                neg.push((i, j, v));
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Degenerate(format!(
            "histogram loss needs both pair classes, got {} same-speaker and {} different-speaker pairs",
            pos.len(),
            neg.len()
        )));
    }
    let step = (hi - lo) / (cfg.bins - 1) as f64;
    let (h_pos, pos_placed) = bin_pairs(&pos, lo, step, cfg.bins);
    let (h_neg, neg_placed) = bin_pairs(&neg, lo, step, cfg.bins);

    // Φ⁺_r = Σ_{q ≤ r} h⁺_q and the matching suffix sums of h⁻.
    let mut pos_prefix = vec![0.0; cfg.bins];
    let mut acc = 0.0;
    for (slot, &h) in pos_prefix.iter_mut().zip(&h_pos) {
        acc += h;
        *slot = acc;
    }
    let mut neg_suffix = vec![0.0; cfg.bins];
    let mut acc = 0.0;
    for (slot, &h) in neg_suffix.iter_mut().zip(&h_neg).rev() {
        acc += h;
        *slot = acc;
    }

    let loss: f64 = h_neg
        .iter()
        .zip(&pos_prefix)
        .map(|(hn, phi)| hn * phi)
        .sum();

    // Moving a positive pair within its cell shifts mass between nodes
    // `cell` and `cell + 1` at rate 1/(count·Δ); the loss reads that mass
    // through the suffix sums of h⁻ (and symmetrically for negatives
    // through Φ⁺).
    let mut grad = Array2::zeros((n, n));
    let pos_rate = 1.0 / (pos.len() as f64 * step);
    for p in &pos_placed {
        grad[[p.i, p.j]] += (neg_suffix[p.cell + 1] - neg_suffix[p.cell]) * pos_rate;
    }
    let neg_rate = 1.0 / (neg.len() as f64 * step);
    for p in &neg_placed {
        grad[[p.i, p.j]] += (pos_prefix[p.cell + 1] - pos_prefix[p.cell]) * neg_rate;
    }
    Ok((loss, grad))
}

/// Sum of singular values of the residual `A − A_gt`, with subgradient
/// `U·Vᵀ`. Symmetric residuals (the usual case: both inputs are symmetric)
/// take a cheaper eigendecomposition route; the two routes agree because
/// for `D = QΛQᵀ` the singular factors are `Q·sign(Λ)` and `Q`.
pub fn nuclear_norm_loss(
    s: &Array2<f64>,
    gt: &GroundTruthAdjacency,
) -> Result<(f64, Array2<f64>)> {
    let n = check_affinity_inputs(s, gt)?;
    let diff = s - &gt.to_f64();
    let asym = (0..n)
        .flat_map(|i| (0..i).map(move |j| (i, j)))
        .fold(0.0f64, |a, (i, j)| {
            a.max((diff[[i, j]] - diff[[j, i]]).abs())
        });
    if asym < 1e-12 {
        let (vals, vecs) = linalg::symmetric_eigh(&diff.view())?;
        let loss: f64 = vals.iter().map(|v| v.abs()).sum();
        // zero eigenvalues contribute sign 0 (a valid subgradient choice;
        // f64::signum would map them to +1 and fabricate a push at the
        // optimum)
        let cutoff = vals.iter().fold(0.0f64, |a, v| a.max(v.abs())) * 1e-14;
        let signs = vals.mapv(|v| {
            if v > cutoff {
                1.0
            } else if v < -cutoff {
                -1.0
            } else {
                0.0
            }
        });
        let signed = &vecs * &signs;
        Ok((loss, signed.dot(&vecs.t())))
    } else {
        let (u, sigma, vt) = linalg::svd(&diff.view())?;
        Ok((sigma.sum(), u.dot(&vt)))
    }
}

/// The full training objective of the cosine-scorer path:
/// `histogram_loss + alpha · nuclear_norm_loss`.
pub fn combined_loss(
    s: &Array2<f64>,
    gt: &GroundTruthAdjacency,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    if cfg.kind != LossKind::HistPlusNuclear {
        return Err(Error::Config(
            "combined loss requires the hist_plus_nuclear kind".into(),
        ));
    }
    let (h_loss, h_grad) = histogram_loss(s, gt, cfg)?;
    if cfg.alpha == 0.0 {
        return Ok((h_loss, h_grad));
    }
    let (n_loss, n_grad) = nuclear_norm_loss(s, gt)?;
    Ok((h_loss + cfg.alpha * n_loss, h_grad + &(n_grad * cfg.alpha)))
}

/// Evaluates whichever loss `cfg.kind` selects.
pub fn session_loss(
    s: &Array2<f64>,
    gt: &GroundTruthAdjacency,
    cfg: &LossConfig,
) -> Result<(f64, Array2<f64>)> {
    match cfg.kind {
        LossKind::Bce => bce_pairwise_loss(s, gt),
        LossKind::HistPlusNuclear => combined_loss(s, gt, cfg),
    }
}

/// Per-parameter gradients, shaped exactly like the model.
#[derive(Debug, Clone)]
pub struct GradientSet {
    pub gcn: Vec<Array2<f64>>,
    pub fc_w_hidden: Option<Array2<f64>>,
    pub fc_b_hidden: Option<Array1<f64>>,
    pub fc_w_out: Option<Array1<f64>>,
    pub fc_b_out: Option<f64>,
}

impl GradientSet {
    pub fn zeros_like(model: &RefinerModel) -> Self {
        let gcn = model
            .gcn_weights()
            .iter()
            .map(|w| Array2::zeros(w.dim()))
            .collect();
        match model.fc() {
            Some(fc) => GradientSet {
                gcn,
                fc_w_hidden: Some(Array2::zeros(fc.w_hidden.dim())),
                fc_b_hidden: Some(Array1::zeros(fc.b_hidden.len())),
                fc_w_out: Some(Array1::zeros(fc.w_out.len())),
                fc_b_out: Some(0.0),
            },
            None => GradientSet {
                gcn,
                fc_w_hidden: None,
                fc_b_hidden: None,
                fc_w_out: None,
                fc_b_out: None,
            },
        }
    }

    pub fn param_count(&self) -> usize {
        let gcn: usize = self.gcn.iter().map(|g| g.len()).sum();
        let fc = self.fc_w_hidden.as_ref().map_or(0, |w| w.len())
            + self.fc_b_hidden.as_ref().map_or(0, |b| b.len())
            + self.fc_w_out.as_ref().map_or(0, |w| w.len())
            + usize::from(self.fc_b_out.is_some());
        gcn + fc
    }

    /// Flattens in the model's canonical parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for g in &self.gcn {
            out.extend(g.iter().copied());
        }
        if let Some(w) = &self.fc_w_hidden {
            out.extend(w.iter().copied());
        }
        if let Some(b) = &self.fc_b_hidden {
            out.extend(b.iter().copied());
        }
        if let Some(w) = &self.fc_w_out {
            out.extend(w.iter().copied());
        }
        if let Some(b) = self.fc_b_out {
            out.push(b);
        }
        out
    }

    fn matches_model(&self, model: &RefinerModel) -> bool {
        if self.gcn.len() != model.gcn_weights().len() {
            return false;
        }
        if self
            .gcn
            .iter()
            .zip(model.gcn_weights())
            .any(|(g, w)| g.dim() != w.dim())
        {
            return false;
        }
        match (model.fc(), &self.fc_w_hidden) {
            (Some(fc), Some(w)) => {
                w.dim() == fc.w_hidden.dim()
                    && self.fc_b_hidden.as_ref().map(|b| b.len()) == Some(fc.b_hidden.len())
                    && self.fc_w_out.as_ref().map(|w| w.len()) == Some(fc.w_out.len())
                    && self.fc_b_out.is_some()
            }
            (None, None) => true,
            _ => false,
        }
    }
}

fn elu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        x.exp() - 1.0
    }
}

fn elu_derivative(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        x.exp()
    }
}

/// Pulls an affinity gradient back through cosine scoring: for unit rows
/// `ẑ_k`, `dL/dz_k = (r_k − (r_k·ẑ_k)·ẑ_k)/‖z_k‖` with `r = (G+Gᵀ)·Ẑ`.
/// The projection also annihilates any gradient parked on the constant
/// unit diagonal.
fn cosine_affinity_backward(z: &Array2<f64>, g: &Array2<f64>) -> Result<Array2<f64>> {
    let n = z.nrows();
    let mut unit = z.clone();
    let mut norms = Vec::with_capacity(n);
    for (k, mut row) in unit.rows_mut().into_iter().enumerate() {
        let norm = row.dot(&row).sqrt();
        if norm < NORM_FLOOR {
            return Err(Error::Degenerate(format!(
                "refined embeddings collapsed: row {k} has zero norm"
            )));
        }
        row.mapv_inplace(|v| v / norm);
        norms.push(norm);
    }
    let r = (g + &g.t()).dot(&unit);
    let mut dz = Array2::zeros(z.dim());
    for k in 0..n {
        let rk = r.row(k);
        let uk = unit.row(k);
        let along = rk.dot(&uk);
        let mut out = dz.row_mut(k);
        for c in 0..z.ncols() {
            out[c] = (rk[c] - along * uk[c]) / norms[k];
        }
    }
    Ok(dz)
}

/// Pulls an affinity gradient back through the FC pair scorer. Each
/// unordered pair was scored as the mean over both concatenation orders,
/// so each direction receives half of the pair's upstream coefficient.
fn fc_affinity_backward(
    fc: &FcScorer,
    z: &Array2<f64>,
    g: &Array2<f64>,
    grads: &mut GradientSet,
) -> Array2<f64> {
    let n = z.nrows();
    let d = z.ncols();
    let mut dz = Array2::zeros((n, d));
    let dw_hidden = grads.fc_w_hidden.as_mut().expect("fc grads allocated");
    let db_hidden = grads.fc_b_hidden.as_mut().expect("fc grads allocated");
    let dw_out = grads.fc_w_out.as_mut().expect("fc grads allocated");
    let db_out = grads.fc_b_out.as_mut().expect("fc grads allocated");
    let mut pair = Array1::zeros(2 * d);
    for i in 0..n {
        for j in (i + 1)..n {
            let coeff = g[[i, j]] + g[[j, i]];
            if coeff == 0.0 {
                continue;
            }
            for (a, b) in [(i, j), (j, i)] {
                pair.slice_mut(ndarray::s![..d]).assign(&z.row(a));
                pair.slice_mut(ndarray::s![d..]).assign(&z.row(b));
                let pre_hidden = fc.w_hidden.dot(&pair) + &fc.b_hidden;
                let activated = pre_hidden.mapv(elu);
                let sig = 1.0 / (1.0 + (-(fc.w_out.dot(&activated) + fc.b_out)).exp());
                let d_pre_out = 0.5 * coeff * sig * (1.0 - sig);
                dw_out.scaled_add(d_pre_out, &activated);
                *db_out += d_pre_out;
                let d_pre_hidden = Array1::from_shape_fn(pre_hidden.len(), |h| {
                    d_pre_out * fc.w_out[h] * elu_derivative(pre_hidden[h])
                });
                for h in 0..d_pre_hidden.len() {
                    let mut row = dw_hidden.row_mut(h);
                    row.scaled_add(d_pre_hidden[h], &pair);
                }
                db_hidden.scaled_add(1.0, &d_pre_hidden);
                let d_pair = fc.w_hidden.t().dot(&d_pre_hidden);
                dz.row_mut(a).scaled_add(1.0, &d_pair.slice(ndarray::s![..d]));
                dz.row_mut(b).scaled_add(1.0, &d_pair.slice(ndarray::s![d..]));
            }
        }
    }
    dz
}

/// Chains an affinity gradient `dL/dS` through the scorer and the GCN
/// stack, producing exact gradients for every model parameter. The cache
/// must come from a forward pass of the current model state.
pub fn backward(
    model: &RefinerModel,
    cache: &ForwardCache,
    g: &Array2<f64>,
) -> Result<GradientSet> {
    cache.check_fresh(model)?;
    let n = cache.z.nrows();
    if g.nrows() != n || g.ncols() != n {
        return Err(Error::Config(format!(
            "upstream gradient is {}x{}, expected {n}x{n}",
            g.nrows(),
            g.ncols()
        )));
    }
    if g.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite upstream gradient".into()));
    }
    let mut grads = GradientSet::zeros_like(model);
    let mut dh = match model.scorer() {
        ScorerKind::Cosine => cosine_affinity_backward(&cache.z, g)?,
        ScorerKind::FcPairScorer => {
            let fc = model.fc().expect("fc scorer has parameters");
            fc_affinity_backward(fc, &cache.z, g, &mut grads)
        }
    };
    for k in (0..model.gcn_weights().len()).rev() {
        grads.gcn[k] = dh.t().dot(&cache.mixed_inputs[k]);
        if k > 0 {
            let dm = dh.dot(&model.gcn_weights()[k]);
            dh = cache.l.t().dot(&dm);
        }
    }
    if grads.flatten().iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite parameter gradient".into()));
    }
    Ok(grads)
}

/// First and second moment state of the adaptive-moment optimizer.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(param_count: usize) -> Self {
        AdamState {
            m: vec![0.0; param_count],
            v: vec![0.0; param_count],
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One adaptive-moment descent step, applied to the model in place.
pub fn sgd_adam_step(
    model: &mut RefinerModel,
    grads: &GradientSet,
    lr: f64,
    state: &mut AdamState,
) -> Result<()> {
    if !grads.matches_model(model) {
        return Err(Error::Config(
            "gradient shapes do not match the model".into(),
        ));
    }
    if state.m.len() != model.param_count() {
        return Err(Error::Config(format!(
            "optimizer state holds {} parameters, model has {}",
            state.m.len(),
            model.param_count()
        )));
    }
    if !lr.is_finite() || lr <= 0.0 {
        return Err(Error::Config(format!("learning rate must be positive, got {lr}")));
    }
    let flat = grads.flatten();
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite gradient in optimizer step".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - ADAM_BETA1.powi(state.t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(state.t as i32);
    let (m, v) = (&mut state.m, &mut state.v);
    model.for_each_param_mut(|idx, p| {
        let g = flat[idx];
        m[idx] = ADAM_BETA1 * m[idx] + (1.0 - ADAM_BETA1) * g;
        v[idx] = ADAM_BETA2 * v[idx] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[idx] / bc1;
        let v_hat = v[idx] / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    });
    Ok(())
}
