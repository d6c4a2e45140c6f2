//! Capsule-network intent decoder on log-posteriorgram frames.
//!
//! Per frame `F_t` an attention gate `α_t = σ(w_a·F_t + b_a)` and a
//! distributor `δ_t = softmax(W_d·F_t + b_d)` decide how much of the frame
//! goes to each primary capsule:
//!
//! ```text
//! S_i = squash(W_s^i · Σ_t α_t δ_ti F_t)
//! ```
//!
//! Primary capsules vote for one output capsule per task label through
//! routing-by-agreement; the length of an output capsule is the label score.
//! Training minimises the margin loss with Adam, differentiating through the
//! unrolled routing iterations.
//!
//! Frames are put in a canonical (lexicographic) order before anything is
//! computed, so outputs are bitwise identical for any permutation of the
//! input frames.

use std::cmp::Ordering;
use std::fmt::Write as _;
use std::fs;
use std::ops::Range;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::ErrorKind;
use crate::posteriorgram::Posteriorgram;
use crate::seed;
use crate::textio;

#[derive(Debug, Error)]
pub enum CapsuleError {
    #[error("invalid capsule config: {0}")]
    InvalidConfig(String),
    #[error("input has {found} symbols per frame, model expects {expected}")]
    SymbolMismatch { expected: usize, found: usize },
    #[error("label {label} out of range for {labels} labels")]
    LabelOutOfRange { label: usize, labels: usize },
    #[error("empty training set")]
    NoTrainingData,
    #[error("non-finite loss at epoch {epoch} (step size {step_size} too large?)")]
    NonFiniteLoss { epoch: usize, step_size: f64 },
    #[error("malformed capsule model file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl CapsuleError {
    pub fn kind(&self) -> ErrorKind {
        match self {
            CapsuleError::SymbolMismatch { .. } | CapsuleError::LabelOutOfRange { .. } => {
                ErrorKind::Incompatible
            }
            CapsuleError::NonFiniteLoss { .. } => ErrorKind::Numerical,
            CapsuleError::Io { .. } => ErrorKind::Io,
            _ => ErrorKind::Config,
        }
    }
}

type Result<T> = std::result::Result<T, CapsuleError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CapsuleConfig {
    pub primary_capsules: usize,
    pub primary_dim: usize,
    pub output_dim: usize,
    pub routing_iters: usize,
    pub margin_pos: f64,
    pub margin_neg: f64,
    /// λ, weight of the absent-label term of the margin loss.
    pub down_weight: f64,
    pub step_size: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Reshuffle the training set every epoch.
    pub shuffle: bool,
    /// Parameters start uniform in `(-init_scale, init_scale)`.
    pub init_scale: f64,
    pub seed: u64,
}

impl Default for CapsuleConfig {
    fn default() -> Self {
        CapsuleConfig {
            primary_capsules: 32,
            primary_dim: 64,
            output_dim: 8,
            routing_iters: 3,
            margin_pos: 0.9,
            margin_neg: 0.1,
            down_weight: 0.5,
            step_size: 1e-3,
            epochs: 100,
            batch_size: 16,
            shuffle: true,
            init_scale: 0.05,
            seed: 0,
        }
    }
}

impl CapsuleConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CapsuleError::InvalidConfig(m));
        if self.primary_capsules == 0 || self.primary_dim == 0 || self.output_dim == 0 {
            return bad("capsule dimensions must be positive".into());
        }
        if self.routing_iters == 0 {
            return bad("routing_iters must be >= 1".into());
        }
        if !(0.0 < self.margin_neg && self.margin_neg < self.margin_pos && self.margin_pos < 1.0) {
            return bad(format!(
                "margins must satisfy 0 < m- < m+ < 1, got m-={} m+={}",
                self.margin_neg, self.margin_pos
            ));
        }
        if !(self.down_weight > 0.0 && self.down_weight.is_finite()) {
            return bad(format!("down_weight {} must be positive", self.down_weight));
        }
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return bad(format!("step_size {} must be positive", self.step_size));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return bad(format!("init_scale {} must be positive", self.init_scale));
        }
        Ok(())
    }
}

/// Tensor sizes of a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CapsuleDims {
    pub symbols: usize,
    pub primary: usize,
    pub primary_dim: usize,
    pub output_dim: usize,
    pub labels: usize,
}

/// Offsets of the parameter groups inside the flat parameter vector, in
/// declaration order.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub attn_w: Range<usize>,
    pub attn_b: Range<usize>,
    pub dist_w: Range<usize>,
    pub dist_b: Range<usize>,
    pub proj: Range<usize>,
    pub route: Range<usize>,
}

impl ParamLayout {
    fn new(d: &CapsuleDims) -> Self {
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        ParamLayout {
            attn_w: take(d.symbols),
            attn_b: take(1),
            dist_w: take(d.primary * d.symbols),
            dist_b: take(d.primary),
            proj: take(d.primary * d.primary_dim * d.symbols),
            route: take(d.primary * d.labels * d.output_dim * d.primary_dim),
        }
    }

    pub fn total(&self) -> usize {
        self.route.end
    }

    pub fn groups(&self) -> [(&'static str, Range<usize>); 6] {
        [
            ("attn_w", self.attn_w.clone()),
            ("attn_b", self.attn_b.clone()),
            ("dist_w", self.dist_w.clone()),
            ("dist_b", self.dist_b.clone()),
            ("proj", self.proj.clone()),
            ("route", self.route.clone()),
        ]
    }
}

pub fn squash(s: ArrayView1<f64>) -> Array1<f64> {
    let n2 = s.dot(&s);
    if n2 == 0.0 {
        return Array1::zeros(s.len());
    }
    let factor = n2.sqrt() / (1.0 + n2);
    s.mapv(|x| x * factor)
}

/// Vector-Jacobian product of [`squash`] at `s` with upstream gradient `g`.
fn squash_backward(s: ArrayView1<f64>, g: ArrayView1<f64>) -> Array1<f64> {
    let n2 = s.dot(&s);
    if n2 == 0.0 {
        return Array1::zeros(s.len());
    }
    let n = n2.sqrt();
    let f = n / (1.0 + n2);
    let df_over_n = (1.0 - n2) / ((1.0 + n2) * (1.0 + n2) * n);
    let sg = s.dot(&g);
    let mut out = g.mapv(|x| f * x);
    out.scaled_add(df_over_n * sg, &s);
    out
}

fn softmax_inplace(mut row: ndarray::ArrayViewMut1<f64>) {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    row.mapv_inplace(|x| (x - max).exp());
    let total = row.sum();
    row.mapv_inplace(|x| x / total);
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Margin loss `Σ_k T_k·max(0, m⁺−ℓ_k)² + λ(1−T_k)·max(0, ℓ_k−m⁻)²`.
pub fn capsule_loss(lengths: &[f64], label: usize, cfg: &CapsuleConfig) -> f64 {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| {
            if k == label {
                (cfg.margin_pos - len).max(0.0).powi(2)
            } else {
                cfg.down_weight * (len - cfg.margin_neg).max(0.0).powi(2)
            }
        })
        .sum()
}

fn capsule_loss_grad(lengths: &[f64], label: usize, cfg: &CapsuleConfig) -> Vec<f64> {
    lengths
        .iter()
        .enumerate()
        .map(|(k, &len)| {
            if k == label {
                -2.0 * (cfg.margin_pos - len).max(0.0)
            } else {
                2.0 * cfg.down_weight * (len - cfg.margin_neg).max(0.0)
            }
        })
        .collect()
}

/// Rows sorted lexicographically; the canonical frame order.
fn canonical_frames(frames: &Array2<f64>) -> Array2<f64> {
    let mut order: Vec<usize> = (0..frames.nrows()).collect();
    order.sort_by(|&a, &b| {
        frames
            .row(a)
            .iter()
            .zip(frames.row(b).iter())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| *o != Ordering::Equal)
            .unwrap_or(Ordering::Equal)
    });
    frames.select(Axis(0), &order)
}

/// Output of [`CapsuleModel::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleOutput {
    /// L×d_output output capsule vectors.
    pub capsules: Array2<f64>,
    /// Capsule lengths, one score per label, each in `[0, 1)`.
    pub lengths: Vec<f64>,
}

/// Intermediate quantities of one forward pass, exposed for inspection.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Attention weight per frame (canonical frame order).
    pub attention: Array1<f64>,
    /// T×n_primary distributor weights (canonical frame order).
    pub distribution: Array2<f64>,
    /// n_primary×d_primary primary capsules.
    pub primary: Array2<f64>,
    /// n_primary×L coupling coefficients of every routing iteration.
    pub couplings: Vec<Array2<f64>>,
    pub output: CapsuleOutput,
}

struct PrimaryPass {
    frames: Array2<f64>,
    alpha: Array1<f64>,
    delta: Array2<f64>,
    pooled: Array2<f64>,
    pre_squash: Array2<f64>,
    primary: Array2<f64>,
}

struct RoutingPass {
    /// n_primary×L×d_output predictions û_{j|i}.
    votes: Array3<f64>,
    couplings: Vec<Array2<f64>>,
    pre_squash: Vec<Array2<f64>>,
    outputs: Vec<Array2<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapsuleModel {
    pub config: CapsuleConfig,
    dims: CapsuleDims,
    params: Vec<f64>,
    /// Digest of the data the model was trained for; empty when unknown.
    pub digest: String,
}

impl CapsuleModel {
    /// Fresh model with parameters uniform in `(-init_scale, init_scale)`.
    pub fn new(symbols: usize, labels: usize, config: CapsuleConfig) -> Result<Self> {
        config.validate()?;
        if symbols == 0 || labels == 0 {
            return Err(CapsuleError::InvalidConfig("symbols and labels must be positive".into()));
        }
        let dims = CapsuleDims {
            symbols,
            primary: config.primary_capsules,
            primary_dim: config.primary_dim,
            output_dim: config.output_dim,
            labels,
        };
        let n = ParamLayout::new(&dims).total();
        let mut rng = seed::rng(config.seed);
        let scale = config.init_scale;
        let params = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
        Ok(CapsuleModel {
            config,
            dims,
            params,
            digest: String::new(),
        })
    }

    pub fn dims(&self) -> CapsuleDims {
        self.dims
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.dims)
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn attn_w(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.layout().attn_w])
    }

    fn attn_b(&self) -> f64 {
        self.params[self.layout().attn_b.start]
    }

    fn dist_w(&self) -> ArrayView2<'_, f64> {
        let d = self.dims;
        ArrayView2::from_shape((d.primary, d.symbols), &self.params[self.layout().dist_w]).unwrap()
    }

    fn dist_b(&self) -> ArrayView1<'_, f64> {
        ArrayView1::from(&self.params[self.layout().dist_b])
    }

    fn proj(&self) -> ArrayView3<'_, f64> {
        let d = self.dims;
        ArrayView3::from_shape((d.primary, d.primary_dim, d.symbols), &self.params[self.layout().proj]).unwrap()
    }

    /// n_primary × (L·d_output) × d_primary; rows `j·d_output..(j+1)·d_output`
    /// of slice `i` form the transformation from primary `i` to output `j`.
    fn route(&self) -> ArrayView3<'_, f64> {
        let d = self.dims;
        ArrayView3::from_shape(
            (d.primary, d.labels * d.output_dim, d.primary_dim),
            &self.params[self.layout().route],
        )
        .unwrap()
    }

    fn check_input(&self, pg: &Posteriorgram) -> Result<()> {
        if pg.num_symbols() != self.dims.symbols {
            return Err(CapsuleError::SymbolMismatch {
                expected: self.dims.symbols,
                found: pg.num_symbols(),
            });
        }
        Ok(())
    }

    fn primary_pass(&self, frames: Array2<f64>) -> PrimaryPass {
        let alpha = (frames.dot(&self.attn_w()) + self.attn_b()).mapv(sigmoid);
        let mut delta = frames.dot(&self.dist_w().t()) + self.dist_b();
        for row in delta.rows_mut() {
            softmax_inplace(row);
        }
        let weights = &delta * &alpha.view().insert_axis(Axis(1));
        let pooled = weights.t().dot(&frames);
        let proj = self.proj();
        let d = self.dims;
        let mut pre_squash = Array2::zeros((d.primary, d.primary_dim));
        let mut primary = Array2::zeros((d.primary, d.primary_dim));
        for i in 0..d.primary {
            let s = proj.index_axis(Axis(0), i).dot(&pooled.row(i));
            primary.row_mut(i).assign(&squash(s.view()));
            pre_squash.row_mut(i).assign(&s);
        }
        PrimaryPass {
            frames,
            alpha,
            delta,
            pooled,
            pre_squash,
            primary,
        }
    }

    /// Votes for a whole batch: one (L·d_output)×d_primary by d_primary×B
    /// product per primary capsule.
    fn votes(&self, passes: &[PrimaryPass]) -> Vec<Array3<f64>> {
        let d = self.dims;
        let route = self.route();
        let b = passes.len();
        let mut votes = vec![Array3::zeros((d.primary, d.labels, d.output_dim)); b];
        for i in 0..d.primary {
            let mut s = Array2::zeros((d.primary_dim, b));
            for (n, p) in passes.iter().enumerate() {
                s.column_mut(n).assign(&p.primary.row(i));
            }
            let u = route.index_axis(Axis(0), i).dot(&s);
            for (n, v) in votes.iter_mut().enumerate() {
                let col = u.column(n);
                let mut vi = v.index_axis_mut(Axis(0), i);
                for (dst, src) in vi.iter_mut().zip(col.iter()) {
                    *dst = *src;
                }
            }
        }
        votes
    }

    fn routing(&self, votes: Array3<f64>) -> RoutingPass {
        let d = self.dims;
        let mut logits = Array2::<f64>::zeros((d.primary, d.labels));
        let mut pass = RoutingPass {
            votes,
            couplings: Vec::with_capacity(self.config.routing_iters),
            pre_squash: Vec::with_capacity(self.config.routing_iters),
            outputs: Vec::with_capacity(self.config.routing_iters),
        };
        for r in 0..self.config.routing_iters {
            let mut c = logits.clone();
            for row in c.rows_mut() {
                softmax_inplace(row);
            }
            let mut s = Array2::<f64>::zeros((d.labels, d.output_dim));
            for i in 0..d.primary {
                for j in 0..d.labels {
                    s.row_mut(j).scaled_add(c[[i, j]], &pass.votes.slice(ndarray::s![i, j, ..]));
                }
            }
            let mut v = Array2::zeros((d.labels, d.output_dim));
            for j in 0..d.labels {
                v.row_mut(j).assign(&squash(s.row(j)));
            }
            if r + 1 < self.config.routing_iters {
                for i in 0..d.primary {
                    for j in 0..d.labels {
                        logits[[i, j]] += pass.votes.slice(ndarray::s![i, j, ..]).dot(&v.row(j));
                    }
                }
            }
            pass.couplings.push(c);
            pass.pre_squash.push(s);
            pass.outputs.push(v);
        }
        pass
    }

    fn run(&self, inputs: &[&Array2<f64>]) -> (Vec<PrimaryPass>, Vec<RoutingPass>) {
        let passes: Vec<PrimaryPass> = inputs.iter().map(|f| self.primary_pass((*f).clone())).collect();
        let routes = self
            .votes(&passes)
            .into_iter()
            .map(|v| self.routing(v))
            .collect();
        (passes, routes)
    }

    fn output_of(route: &RoutingPass) -> CapsuleOutput {
        let capsules = route.outputs.last().expect("routing_iters >= 1").clone();
        let lengths = capsules.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
        CapsuleOutput { capsules, lengths }
    }

    pub fn forward(&self, pg: &Posteriorgram) -> Result<CapsuleOutput> {
        Ok(self.forward_batch(&[pg])?.remove(0))
    }

    pub fn forward_batch(&self, pgs: &[&Posteriorgram]) -> Result<Vec<CapsuleOutput>> {
        for pg in pgs {
            self.check_input(pg)?;
        }
        let frames: Vec<Array2<f64>> = pgs.iter().map(|pg| canonical_frames(pg.frames())).collect();
        let refs: Vec<&Array2<f64>> = frames.iter().collect();
        let (_, routes) = self.run(&refs);
        Ok(routes.iter().map(Self::output_of).collect())
    }

    pub fn trace(&self, pg: &Posteriorgram) -> Result<ForwardTrace> {
        self.check_input(pg)?;
        let frames = canonical_frames(pg.frames());
        let (mut passes, mut routes) = self.run(&[&frames]);
        let p = passes.remove(0);
        let r = routes.remove(0);
        Ok(ForwardTrace {
            output: Self::output_of(&r),
            attention: p.alpha,
            distribution: p.delta,
            primary: p.primary,
            couplings: r.couplings,
        })
    }

    /// Index of the longest output capsule; ties go to the lowest index.
    pub fn classify(&self, pg: &Posteriorgram) -> Result<usize> {
        Ok(argmax(&self.forward(pg)?.lengths))
    }

    pub fn classify_batch(&self, pgs: &[&Posteriorgram]) -> Result<Vec<usize>> {
        let mut labels = Vec::with_capacity(pgs.len());
        for chunk in pgs.chunks(self.config.batch_size.max(1)) {
            labels.extend(self.forward_batch(chunk)?.iter().map(|o| argmax(&o.lengths)));
        }
        Ok(labels)
    }

    /// Mean margin loss over `batch`.
    pub fn loss(&self, batch: &[(&Posteriorgram, usize)]) -> Result<f64> {
        let pgs: Vec<&Posteriorgram> = batch.iter().map(|(pg, _)| *pg).collect();
        let outs = self.forward_batch(&pgs)?;
        let total: f64 = outs
            .iter()
            .zip(batch)
            .map(|(o, (_, label))| capsule_loss(&o.lengths, *label, &self.config))
            .sum();
        Ok(total / batch.len() as f64)
    }

    /// Mean margin loss over `batch` and its gradient w.r.t. the flat
    /// parameter vector.
    pub fn loss_and_gradient(&self, batch: &[(&Posteriorgram, usize)]) -> Result<(f64, Vec<f64>)> {
        for (pg, label) in batch {
            self.check_input(pg)?;
            self.check_label(*label)?;
        }
        let frames: Vec<Array2<f64>> = batch.iter().map(|(pg, _)| canonical_frames(pg.frames())).collect();
        let labelled: Vec<(&Array2<f64>, usize)> = frames.iter().zip(batch.iter().map(|b| b.1)).collect();
        Ok(self.backprop(&labelled))
    }

    fn check_label(&self, label: usize) -> Result<()> {
        if label >= self.dims.labels {
            return Err(CapsuleError::LabelOutOfRange {
                label,
                labels: self.dims.labels,
            });
        }
        Ok(())
    }

    /// Frames must already be in canonical order.
    fn backprop(&self, batch: &[(&Array2<f64>, usize)]) -> (f64, Vec<f64>) {
        let d = self.dims;
        let layout = self.layout();
        let scale = 1.0 / batch.len() as f64;
        let inputs: Vec<&Array2<f64>> = batch.iter().map(|(f, _)| *f).collect();
        let (passes, routes) = self.run(&inputs);

        let mut grad = vec![0.0; layout.total()];
        let mut loss = 0.0;
        // dL/dû for every utterance, laid out like the votes.
        let mut vote_grads = Vec::with_capacity(batch.len());
        for (route, (_, label)) in routes.iter().zip(batch) {
            let out = Self::output_of(route);
            loss += capsule_loss(&out.lengths, *label, &self.config);
            let dlen = capsule_loss_grad(&out.lengths, *label, &self.config);
            let mut g_out = Array2::zeros((d.labels, d.output_dim));
            for j in 0..d.labels {
                if out.lengths[j] > 0.0 {
                    let coef = scale * dlen[j] / out.lengths[j];
                    g_out.row_mut(j).scaled_add(coef, &out.capsules.row(j));
                }
            }
            vote_grads.push(self.routing_backward(route, g_out));
        }

        // Transformation matrices and primary-capsule gradients.
        let route_w = self.route();
        let mut g_primary = vec![Array2::<f64>::zeros((d.primary, d.primary_dim)); batch.len()];
        {
            let g_route = &mut grad[layout.route.clone()];
            let mut g_route = ndarray::ArrayViewMut3::from_shape(
                (d.primary, d.labels * d.output_dim, d.primary_dim),
                g_route,
            )
            .unwrap();
            for i in 0..d.primary {
                let mut gu = Array2::zeros((d.labels * d.output_dim, batch.len()));
                let mut s = Array2::zeros((batch.len(), d.primary_dim));
                for n in 0..batch.len() {
                    let src = vote_grads[n].index_axis(Axis(0), i);
                    for (dst, v) in gu.column_mut(n).iter_mut().zip(src.iter()) {
                        *dst = *v;
                    }
                    s.row_mut(n).assign(&passes[n].primary.row(i));
                }
                let mut gw = g_route.index_axis_mut(Axis(0), i);
                ndarray::linalg::general_mat_mul(1.0, &gu, &s, 1.0, &mut gw);
                let gs = route_w.index_axis(Axis(0), i).t().dot(&gu);
                for n in 0..batch.len() {
                    g_primary[n].row_mut(i).assign(&gs.column(n));
                }
            }
        }

        let proj = self.proj();
        let attn_w = self.attn_w();
        let dist_w = self.dist_w();
        let mut g_proj = Array3::<f64>::zeros((d.primary, d.primary_dim, d.symbols));
        let mut g_attn_w = Array1::<f64>::zeros(d.symbols);
        let mut g_attn_b = 0.0;
        let mut g_dist_w = Array2::<f64>::zeros((d.primary, d.symbols));
        let mut g_dist_b = Array1::<f64>::zeros(d.primary);
        let _ = attn_w;
        let _ = dist_w;
        for (pass, g_prim) in passes.iter().zip(&g_primary) {
            let mut g_pooled = Array2::zeros((d.primary, d.symbols));
            for i in 0..d.primary {
                let gs = squash_backward(pass.pre_squash.row(i), g_prim.row(i));
                let gs_col = gs.view().insert_axis(Axis(1));
                let pooled_row = pass.pooled.row(i).insert_axis(Axis(0));
                let mut gp = g_proj.index_axis_mut(Axis(0), i);
                ndarray::linalg::general_mat_mul(1.0, &gs_col, &pooled_row, 1.0, &mut gp);
                g_pooled.row_mut(i).assign(&proj.index_axis(Axis(0), i).t().dot(&gs));
            }
            // q[t, i] = g_pooled_i · F_t
            let q = pass.frames.dot(&g_pooled.t());
            let g_alpha = (&pass.delta * &q).sum_axis(Axis(1));
            let g_delta = &q * &pass.alpha.view().insert_axis(Axis(1));
            let g_a = &g_alpha * &pass.alpha.mapv(|a| a * (1.0 - a));
            g_attn_w += &pass.frames.t().dot(&g_a);
            g_attn_b += g_a.sum();
            let inner = (&pass.delta * &g_delta).sum_axis(Axis(1));
            let g_z = &pass.delta * &(&g_delta - &inner.insert_axis(Axis(1)));
            g_dist_w += &g_z.t().dot(&pass.frames);
            g_dist_b += &g_z.sum_axis(Axis(0));
        }
        grad[layout.attn_w.clone()].copy_from_slice(g_attn_w.as_slice().unwrap());
        grad[layout.attn_b.start] = g_attn_b;
        grad[layout.dist_w.clone()].copy_from_slice(g_dist_w.as_slice().unwrap());
        grad[layout.dist_b.clone()].copy_from_slice(g_dist_b.as_slice().unwrap());
        grad[layout.proj.clone()].copy_from_slice(g_proj.as_slice().unwrap());
        (loss * scale, grad)
    }

    /// Backward pass through the unrolled routing iterations. Returns
    /// dL/dû with shape n_primary×L×d_output.
    fn routing_backward(&self, route: &RoutingPass, g_out: Array2<f64>) -> Array3<f64> {
        let d = self.dims;
        let iters = self.config.routing_iters;
        let u = &route.votes;
        let mut g_votes = Array3::<f64>::zeros((d.primary, d.labels, d.output_dim));
        let mut g_v = g_out;
        let mut g_logits_carry = Array2::<f64>::zeros((d.primary, d.labels));
        for r in (0..iters).rev() {
            let c = &route.couplings[r];
            let s = &route.pre_squash[r];
            let mut g_s = Array2::zeros((d.labels, d.output_dim));
            for j in 0..d.labels {
                g_s.row_mut(j).assign(&squash_backward(s.row(j), g_v.row(j)));
            }
            let mut g_c = Array2::zeros((d.primary, d.labels));
            for i in 0..d.primary {
                for j in 0..d.labels {
                    let uij = u.slice(ndarray::s![i, j, ..]);
                    g_c[[i, j]] = uij.dot(&g_s.row(j));
                    g_votes
                        .slice_mut(ndarray::s![i, j, ..])
                        .scaled_add(c[[i, j]], &g_s.row(j));
                }
            }
            // softmax over output capsules, per primary capsule
            let inner = (c * &g_c).sum_axis(Axis(1));
            let g_logits = c * &(&g_c - &inner.insert_axis(Axis(1))) + &g_logits_carry;
            if r == 0 {
                break;
            }
            // logits^r = logits^{r-1} + û·v^{r-1}
            let v_prev = &route.outputs[r - 1];
            let mut g_v_prev = Array2::zeros((d.labels, d.output_dim));
            for i in 0..d.primary {
                for j in 0..d.labels {
                    let gb = g_logits[[i, j]];
                    g_votes.slice_mut(ndarray::s![i, j, ..]).scaled_add(gb, &v_prev.row(j));
                    g_v_prev.row_mut(j).scaled_add(gb, &u.slice(ndarray::s![i, j, ..]));
                }
            }
            g_v = g_v_prev;
            g_logits_carry = g_logits;
        }
        g_votes
    }

    /// Text serialisation: `CAPS C n_primary d_primary d_output L` header,
    /// `digest` and `config` lines, then the parameter blocks in declaration
    /// order (attention weights, attention bias, distributor weights,
    /// distributor biases, projections, routing transforms), one matrix row
    /// per line.
    pub fn to_text(&self) -> String {
        let d = self.dims;
        let c = &self.config;
        let mut out = String::new();
        let _ = writeln!(
            out,
            "CAPS {} {} {} {} {}",
            d.symbols, d.primary, d.primary_dim, d.output_dim, d.labels
        );
        let digest = if self.digest.is_empty() { "-" } else { &self.digest };
        let _ = writeln!(out, "digest {digest}");
        let _ = writeln!(
            out,
            "config {} {} {} {} {} {} {} {} {}",
            c.routing_iters,
            c.margin_pos,
            c.margin_neg,
            c.down_weight,
            c.step_size,
            c.epochs,
            c.batch_size,
            c.init_scale,
            c.seed
        );
        let layout = self.layout();
        let rows: [(Range<usize>, usize); 6] = [
            (layout.attn_w, d.symbols),
            (layout.attn_b, 1),
            (layout.dist_w, d.symbols),
            (layout.dist_b, d.primary),
            (layout.proj, d.symbols),
            (layout.route, d.primary_dim),
        ];
        for (range, width) in rows {
            for chunk in self.params[range].chunks(width) {
                out.push_str(&textio::join_row(chunk));
                out.push('\n');
            }
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let fmt_err = |m: &str| CapsuleError::Format(m.to_string());
        let mut lines = text.lines();
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| fmt_err("empty file"))?
            .split_ascii_whitespace()
            .collect();
        if header.len() != 6 || header[0] != "CAPS" {
            return Err(fmt_err("expected `CAPS C n_primary d_primary d_output L` header"));
        }
        let dims: Vec<usize> = header[1..]
            .iter()
            .map(|x| x.parse().map_err(|_| fmt_err("bad dimension in header")))
            .collect::<Result<_>>()?;
        let digest = lines
            .next()
            .and_then(|l| l.strip_prefix("digest "))
            .ok_or_else(|| fmt_err("expected `digest` line"))?
            .trim();
        let fields: Vec<&str> = lines
            .next()
            .and_then(|l| l.strip_prefix("config "))
            .ok_or_else(|| fmt_err("expected `config` line"))?
            .split_ascii_whitespace()
            .collect();
        if fields.len() != 9 {
            return Err(fmt_err("config line needs 9 fields"));
        }
        let f64_at = |k: usize| fields[k].parse::<f64>().map_err(|_| fmt_err("bad config value"));
        let usize_at = |k: usize| fields[k].parse::<usize>().map_err(|_| fmt_err("bad config value"));
        let config = CapsuleConfig {
            primary_capsules: dims[1],
            primary_dim: dims[2],
            output_dim: dims[3],
            routing_iters: usize_at(0)?,
            margin_pos: f64_at(1)?,
            margin_neg: f64_at(2)?,
            down_weight: f64_at(3)?,
            step_size: f64_at(4)?,
            epochs: usize_at(5)?,
            batch_size: usize_at(6)?,
            shuffle: true,
            init_scale: f64_at(7)?,
            seed: fields[8].parse().map_err(|_| fmt_err("bad seed"))?,
        };
        let mut model = CapsuleModel::new(dims[0], dims[4], config)?;
        let mut values = Vec::with_capacity(model.params.len());
        for line in lines {
            let row = textio::parse_row(line).map_err(|e| CapsuleError::Format(e.to_string()))?;
            values.extend(row);
        }
        if values.len() != model.params.len() {
            return Err(CapsuleError::Format(format!(
                "expected {} parameters, found {}",
                model.params.len(),
                values.len()
            )));
        }
        if values.iter().any(|x| !x.is_finite()) {
            return Err(fmt_err("non-finite parameter"));
        }
        model.params = values;
        model.digest = if digest == "-" { String::new() } else { digest.to_string() };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        textio::write_atomic(path, self.to_text().as_bytes()).map_err(|source| CapsuleError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|source| CapsuleError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (k, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = k;
        }
    }
    best
}

struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    step: i32,
    lr: f64,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Adam {
            m: vec![0.0; n],
            v: vec![0.0; n],
            step: 0,
            lr,
        }
    }

    fn apply(&mut self, params: &mut [f64], grad: &[f64]) {
        self.step += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.step);
        let c2 = 1.0 - Self::BETA2.powi(self.step);
        for (((p, g), m), v) in params.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = Self::BETA1 * *m + (1.0 - Self::BETA1) * g;
            *v = Self::BETA2 * *v + (1.0 - Self::BETA2) * g * g;
            *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains a fresh model; returns it with the mean training loss per epoch.
pub fn capsule_train_with_history(
    data: &[(&Posteriorgram, usize)],
    labels: usize,
    cfg: &CapsuleConfig,
) -> Result<(CapsuleModel, Vec<f64>)> {
    let (first, _) = data.first().ok_or(CapsuleError::NoTrainingData)?;
    let mut model = CapsuleModel::new(first.num_symbols(), labels, cfg.clone())?;
    for (pg, label) in data {
        model.check_input(pg)?;
        model.check_label(*label)?;
    }
    let frames: Vec<Array2<f64>> = data.iter().map(|(pg, _)| canonical_frames(pg.frames())).collect();
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = seed::rng(seed::derive(cfg.seed, &[1]));
    let mut adam = Adam::new(model.params.len(), cfg.step_size);
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&Array2<f64>, usize)> = chunk.iter().map(|&k| (&frames[k], data[k].1)).collect();
            let (loss, grad) = model.backprop(&batch);
            if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(CapsuleError::NonFiniteLoss {
                    epoch,
                    step_size: cfg.step_size,
                });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.apply(&mut model.params, &grad);
        }
        history.push(epoch_loss / data.len() as f64);
    }
    if model.params.iter().any(|p| !p.is_finite()) {
        return Err(CapsuleError::NonFiniteLoss {
            epoch: cfg.epochs,
            step_size: cfg.step_size,
        });
    }
    Ok((model, history))
}

pub fn capsule_train(data: &[(&Posteriorgram, usize)], labels: usize, cfg: &CapsuleConfig) -> Result<CapsuleModel> {
    capsule_train_with_history(data, labels, cfg).map(|(m, _)| m)
}
