//! Joint training of Poincaré embeddings: typed edge reconstruction with
//! negative sampling plus masked-visit reconstruction through the tangent
//! barycenter, optimised with Riemannian Adam and ball projection.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};
use std::time::Instant;

use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central_event::barycenter_idx;
use crate::corpus::{Cohort, Visit};
use crate::graph::{ClinicalGraph, EdgeKind, EdgeType, TypedEdge, Vocabulary};
use crate::manifold::{
    self, dist_grad, exp0_coeffs, log0_coeffs, log0_unchecked, Curvature, GeometryError,
};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("no negative candidates for {0:?}")]
    NoNegatives(String),
    #[error("embedding store does not cover the vocabulary")]
    VocabularyMismatch,
    #[error("loss became non-finite in epoch {epoch}")]
    Diverged {
        epoch: usize,
        report: Box<TrainReport>,
    },
    #[error("malformed embedding file: {0}")]
    Format(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub dim: usize,
    pub c_init: f64,
    pub c_trainable: bool,
    pub n_neg: usize,
    pub mask_ratio_range: [f64; 2],
    pub alpha: f64,
    pub tau_temp: f64,
    pub lr: f64,
    pub lr_curvature: f64,
    pub epochs: usize,
    /// Edges per step.
    pub batch: usize,
    /// Masked visits per step.
    pub visit_batch: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            c_init: 1.0,
            c_trainable: true,
            n_neg: 50,
            mask_ratio_range: [0.15, 0.30],
            alpha: 1.0,
            tau_temp: 1.0,
            lr: 0.005,
            lr_curvature: 0.001,
            epochs: 1000,
            batch: 64,
            visit_batch: 32,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_owned()));
        let [lo, hi] = self.mask_ratio_range;
        if self.dim < 2 {
            return bad("dim must be at least 2");
        }
        if !(0.0 < lo && lo <= hi && hi < 1.0) {
            return bad("mask ratio range must satisfy 0 < lo <= hi < 1");
        }
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return bad("alpha must be non-negative");
        }
        if !(self.tau_temp.is_finite() && self.tau_temp > 0.0) {
            return bad("tau_temp must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) || !(self.lr_curvature.is_finite() && self.lr_curvature >= 0.0) {
            return bad("learning rates must be positive");
        }
        if self.n_neg == 0 || self.batch == 0 || self.visit_batch == 0 {
            return bad("n_neg, batch and visit_batch must be positive");
        }
        Curvature::new(self.c_init)?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Embedding store
// ---------------------------------------------------------------------------

/// Concept points in the ball, one bias per edge type, and the curvature.
/// Concepts are held in ascending id order, which matches [`Vocabulary`]
/// indexing for the same concept set.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    ids: Vec<String>,
    index: HashMap<String, usize>,
    dim: usize,
    coords: Vec<f64>,
    gamma: BTreeMap<EdgeType, f64>,
    curvature: Curvature,
}

impl EmbeddingStore {
    /// Points are projected into the ball.
    pub fn from_points(
        mut points: Vec<(String, Vec<f64>)>,
        gamma: BTreeMap<EdgeType, f64>,
        curvature: Curvature,
    ) -> Result<Self, TrainError> {
        points.sort_by(|a, b| a.0.cmp(&b.0));
        let dim = points.first().map_or(0, |p| p.1.len());
        let mut ids = Vec::with_capacity(points.len());
        let mut coords = Vec::with_capacity(points.len() * dim);
        for (id, p) in points {
            if p.len() != dim {
                return Err(GeometryError::DimensionMismatch(dim, p.len()).into());
            }
            if ids.last() == Some(&id) {
                return Err(TrainError::Format(format!("duplicate concept {id:?}")));
            }
            coords.extend(manifold::project(&p, curvature)?);
            ids.push(id);
        }
        if gamma.values().any(|g| !g.is_finite()) {
            return Err(GeometryError::NonFinite("gamma").into());
        }
        let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Ok(Self {
            ids,
            index,
            dim,
            coords,
            gamma,
            curvature,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn point_of(&self, id: &str) -> Option<&[f64]> {
        self.index_of(id).map(|i| self.point(i))
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    pub fn gamma(&self, t: EdgeType) -> Option<f64> {
        self.gamma.get(&t).copied()
    }

    pub fn gammas(&self) -> &BTreeMap<EdgeType, f64> {
        &self.gamma
    }

    /// True when the store holds exactly the vocabulary's concepts.
    pub fn matches(&self, vocab: &Vocabulary) -> bool {
        self.len() == vocab.len() && (0..vocab.len()).all(|i| self.ids[i] == vocab.id(i))
    }

    pub fn set_point(&mut self, id: &str, p: &[f64]) -> Result<(), TrainError> {
        let i = self
            .index_of(id)
            .ok_or_else(|| TrainError::UnknownConcept(id.to_owned()))?;
        if p.len() != self.dim {
            return Err(GeometryError::DimensionMismatch(self.dim, p.len()).into());
        }
        let q = manifold::project(p, self.curvature)?;
        self.point_mut(i).copy_from_slice(&q);
        Ok(())
    }

    pub fn set_gamma(&mut self, t: EdgeType, g: f64) -> Result<(), TrainError> {
        if !g.is_finite() {
            return Err(GeometryError::NonFinite("gamma").into());
        }
        self.gamma.insert(t, g);
        Ok(())
    }

    /// Changes the curvature and re-projects every point.
    pub fn set_curvature(&mut self, c: Curvature) {
        self.curvature = c;
        for i in 0..self.len() {
            manifold::project_in_place(self.point_mut(i), c);
        }
    }

    fn point_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

/// Points uniform in the origin ball of radius `0.001/√c`, biases zero.
pub fn init_store(
    vocab: &Vocabulary,
    edge_types: impl IntoIterator<Item = EdgeType>,
    cfg: &TrainConfig,
) -> Result<EmbeddingStore, TrainError> {
    cfg.validate()?;
    let c = Curvature::new(cfg.c_init)?;
    let radius = 0.001 / c.sqrt();
    let mut rng = seeded_rng(cfg.seed, 0x1417);
    let d = cfg.dim;
    let mut coords = Vec::with_capacity(vocab.len() * d);
    for _ in 0..vocab.len() {
        let dir: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = manifold::norm(&dir).max(f64::MIN_POSITIVE);
        let r = radius * rng.random::<f64>().powf(1.0 / d as f64);
        coords.extend(dir.iter().map(|x| x / n * r));
    }
    let ids: Vec<String> = vocab.concepts().iter().map(|c| c.id.clone()).collect();
    let index = ids.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
    Ok(EmbeddingStore {
        ids,
        index,
        dim: d,
        coords,
        gamma: edge_types.into_iter().map(|t| (t, 0.0)).collect(),
        curvature: c,
    })
}

/// `s(u, v) = -dist(z_u, z_v)`.
pub fn score_edge(u: &str, v: &str, store: &EmbeddingStore) -> Result<f64, TrainError> {
    let pu = store
        .point_of(u)
        .ok_or_else(|| TrainError::UnknownConcept(u.to_owned()))?;
    let pv = store
        .point_of(v)
        .ok_or_else(|| TrainError::UnknownConcept(v.to_owned()))?;
    Ok(-manifold::dist_unchecked(pu, pv, store.curvature()))
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

/// `n` draws, uniform with replacement, from the sorted `pool` minus `exclude`.
fn draw_excluding(
    pool: &[usize],
    exclude: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<usize>> {
    let hole = pool.binary_search(&exclude).ok();
    let avail = pool.len() - usize::from(hole.is_some());
    if avail == 0 {
        return None;
    }
    Some(
        (0..n)
            .map(|_| {
                let k = rng.random_range(0..avail);
                match hole {
                    Some(h) if k >= h => pool[k + 1],
                    _ => pool[k],
                }
            })
            .collect(),
    )
}

/// Sorted concepts of `src`'s modality that are neither `src` nor one of its
/// ancestors or descendants.
fn unrelated_nodes(vocab: &Vocabulary, src: usize) -> Vec<usize> {
    let mut related: Vec<usize> = vocab.ancestors(src).chain(vocab.descendants(src)).collect();
    related.push(src);
    related.sort_unstable();
    vocab
        .modality_nodes(vocab.concept(src).modality)
        .iter()
        .copied()
        .filter(|i| related.binary_search(i).is_err())
        .collect()
}

/// Negatives for an edge, uniform with replacement. Hierarchy edges draw from
/// concepts unrelated to the source by ancestry; cross edges draw from the
/// destination's modality minus the destination.
pub fn sample_negatives(
    edge: &TypedEdge,
    vocab: &Vocabulary,
    n_neg: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<String>, TrainError> {
    let index = |id: &str| {
        vocab
            .index_of(id)
            .ok_or_else(|| TrainError::UnknownConcept(id.to_owned()))
    };
    let (src, dst) = (index(&edge.src)?, index(&edge.dst)?);
    let negs = match edge.etype.kind() {
        EdgeKind::Hier => draw_excluding(&unrelated_nodes(vocab, src), usize::MAX, n_neg, rng),
        EdgeKind::Cross => {
            let pool = vocab.modality_nodes(vocab.concept(dst).modality);
            draw_excluding(pool, dst, n_neg, rng)
        }
    };
    let negs = negs.ok_or_else(|| TrainError::NoNegatives(edge.dst.clone()))?;
    Ok(negs.into_iter().map(|i| vocab.id(i).to_owned()).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskedVisit {
    pub kept: Vec<String>,
    pub masked: Vec<String>,
}

/// Independent Bernoulli(ρ) masking, retried once, then exactly
/// `clamp(⌈ρn⌉, 1, n-1)` codes. `None` below two codes.
fn mask_codes<T: Copy>(codes: &[T], rho: f64, rng: &mut ChaCha8Rng) -> Option<(Vec<T>, Vec<T>)> {
    let n = codes.len();
    if n < 2 {
        return None;
    }
    for _ in 0..2 {
        let flags: Vec<bool> = (0..n).map(|_| rng.random_bool(rho)).collect();
        let m = flags.iter().filter(|f| **f).count();
        if m > 0 && m < n {
            return Some(split_by(codes, &flags));
        }
    }
    let k = ((rho * n as f64).ceil() as usize).clamp(1, n - 1);
    let mut flags = vec![false; n];
    for i in index::sample(rng, n, k) {
        flags[i] = true;
    }
    Some(split_by(codes, &flags))
}

fn split_by<T: Copy>(codes: &[T], masked: &[bool]) -> (Vec<T>, Vec<T>) {
    let mut kept = Vec::new();
    let mut gone = Vec::new();
    for (c, &m) in codes.iter().zip(masked) {
        if m { gone.push(*c) } else { kept.push(*c) }
    }
    (kept, gone)
}

pub fn mask_visit(visit: &Visit, rho: f64, rng: &mut ChaCha8Rng) -> Option<MaskedVisit> {
    let codes: Vec<&str> = visit.all_codes().map(|(_, c)| c).collect();
    mask_codes(&codes, rho, rng).map(|(k, m)| MaskedVisit {
        kept: k.into_iter().map(str::to_owned).collect(),
        masked: m.into_iter().map(str::to_owned).collect(),
    })
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Dense Euclidean gradient buffers with a record of touched rows.
#[derive(Debug, Clone)]
pub struct Gradients {
    dim: usize,
    points: Vec<f64>,
    touched: Vec<usize>,
    marked: Vec<bool>,
    gamma: BTreeMap<EdgeType, f64>,
    curvature: f64,
}

impl Gradients {
    pub fn new(store: &EmbeddingStore) -> Self {
        Self {
            dim: store.dim(),
            points: vec![0.0; store.len() * store.dim()],
            touched: Vec::new(),
            marked: vec![false; store.len()],
            gamma: BTreeMap::new(),
            curvature: 0.0,
        }
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn gamma(&self, t: EdgeType) -> f64 {
        self.gamma.get(&t).copied().unwrap_or(0.0)
    }

    /// Derivative with respect to `c` itself.
    pub fn curvature(&self) -> f64 {
        self.curvature
    }

    fn row(&mut self, i: usize) -> &mut [f64] {
        if !self.marked[i] {
            self.marked[i] = true;
            self.touched.push(i);
        }
        &mut self.points[i * self.dim..(i + 1) * self.dim]
    }

    fn clear(&mut self) {
        for &i in &self.touched {
            self.marked[i] = false;
            self.points[i * self.dim..(i + 1) * self.dim].fill(0.0);
        }
        self.touched.clear();
        self.gamma.clear();
        self.curvature = 0.0;
    }
}

/// One positive edge with its sampled negatives, as store indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EdgeSample {
    pub src: usize,
    pub dst: usize,
    pub etype: EdgeType,
    pub negatives: Vec<usize>,
}

/// Kept codes and each masked code with its negatives, as store indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskSample {
    pub kept: Vec<usize>,
    pub masked: Vec<(usize, Vec<usize>)>,
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `w * Σ [softplus(d⁺ - γ) + Σ softplus(γ - d⁻)]`, gradients accumulated.
/// Returns the unweighted sum.
fn edge_loss_acc(samples: &[EdgeSample], store: &EmbeddingStore, w: f64, g: &mut Gradients) -> f64 {
    let c = store.curvature();
    let mut total = 0.0;
    for s in samples {
        let gamma = store.gamma(s.etype).unwrap_or(0.0);
        let x = store.point(s.src);
        let mut g_gamma = 0.0;
        let mut pair = |v: usize, positive: bool, g: &mut Gradients| {
            let y = store.point(v);
            let dg = dist_grad(x, y, c);
            let (loss, dl_dd) = if positive {
                (softplus(dg.value - gamma), sigmoid(dg.value - gamma))
            } else {
                (softplus(gamma - dg.value), -sigmoid(gamma - dg.value))
            };
            g_gamma -= dl_dd;
            dg.acc_dx(x, y, w * dl_dd, g.row(s.src));
            dg.acc_dy(x, y, w * dl_dd, g.row(v));
            g.curvature += w * dl_dd * dg.dc;
            loss
        };
        total += pair(s.dst, true, g);
        for &n in &s.negatives {
            total += pair(n, false, g);
        }
        *g.gamma.entry(s.etype).or_insert(0.0) += w * g_gamma;
    }
    total
}

/// Sampled-softmax reconstruction of each masked code from the barycenter of
/// the kept codes. Returns the unweighted sum.
fn mask_loss_acc(
    sample: &MaskSample,
    store: &EmbeddingStore,
    tau: f64,
    w: f64,
    g: &mut Gradients,
) -> f64 {
    let c = store.curvature();
    let d = store.dim();
    let kept_w = vec![1.0; sample.kept.len()];
    let mu = barycenter_idx(store, &sample.kept, &kept_w);
    let mut g_mu = vec![0.0; d];
    let mut total = 0.0;
    let mut dists = Vec::new();
    for (target, negs) in &sample.masked {
        dists.clear();
        dists.extend(
            std::iter::once(*target)
                .chain(negs.iter().copied())
                .map(|j| (j, dist_grad(&mu, store.point(j), c))),
        );
        let logits: Vec<f64> = dists.iter().map(|(_, dg)| -dg.value / tau).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let lse = max + z.ln();
        total += lse - logits[0];
        for (k, (j, dg)) in dists.iter().enumerate() {
            let wk = (logits[k] - lse).exp();
            let hit = if k == 0 { 1.0 } else { 0.0 };
            let coef = (hit - wk) / tau * w;
            let y = store.point(*j);
            dg.acc_dx(&mu, y, coef, &mut g_mu);
            dg.acc_dy(&mu, y, coef, g.row(*j));
            g.curvature += coef * dg.dc;
        }
    }
    backprop_barycenter(store, &sample.kept, &mu, &g_mu, g);
    total
}

/// Pushes `g_mu` through `mu = exp0(mean_i log0(z_i))` to the kept points and
/// the curvature.
fn backprop_barycenter(
    store: &EmbeddingStore,
    kept: &[usize],
    mu: &[f64],
    g_mu: &[f64],
    g: &mut Gradients,
) {
    let c = store.curvature();
    let m = log0_unchecked(mu, c);
    let s = manifold::norm(&m);
    let (h, hp_s, dh_dc) = exp0_coeffs(s, c);
    let gm_dot = manifold::dot(g_mu, &m);
    g.curvature += dh_dc * gm_dot;
    let g_m: Vec<f64> = g_mu
        .iter()
        .zip(&m)
        .map(|(gi, mi)| h * gi + hp_s * gm_dot * mi)
        .collect();
    let share = 1.0 / kept.len() as f64;
    for &i in kept {
        let z = store.point(i);
        let (f, fp_r, df_dc) = log0_coeffs(manifold::norm(z), c);
        let gz = manifold::dot(&g_m, z);
        g.curvature += share * df_dc * gz;
        let row = g.row(i);
        for ((o, gmi), zi) in row.iter_mut().zip(&g_m).zip(z) {
            *o += share * (f * gmi + fp_r * gz * zi);
        }
    }
}

/// Edge objective summed over `samples`, with Euclidean gradients.
pub fn edge_loss(samples: &[EdgeSample], store: &EmbeddingStore) -> (f64, Gradients) {
    let mut g = Gradients::new(store);
    let loss = edge_loss_acc(samples, store, 1.0, &mut g);
    (loss, g)
}

/// `-Σ_{c ∈ M} log p(c | μ)` for one masked visit, with Euclidean gradients.
pub fn mask_loss(sample: &MaskSample, store: &EmbeddingStore, tau: f64) -> (f64, Gradients) {
    let mut g = Gradients::new(store);
    let loss = mask_loss_acc(sample, store, tau, 1.0, &mut g);
    (loss, g)
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub edge_loss: f64,
    /// Absent when the mask objective is switched off.
    pub mask_loss: Option<f64>,
    pub total_loss: f64,
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub final_curvature: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, Copy)]
struct Adam {
    b1: f64,
    b2: f64,
    eps: f64,
}

impl Adam {
    const DEFAULT: Adam = Adam {
        b1: 0.9,
        b2: 0.999,
        eps: 1e-8,
    };

    /// Updates the moments in place and returns the step direction.
    #[inline]
    fn direction(self, g: f64, m: &mut f64, v: &mut f64, t: i32) -> f64 {
        *m = self.b1 * *m + (1.0 - self.b1) * g;
        *v = self.b2 * *v + (1.0 - self.b2) * g * g;
        let mh = *m / (1.0 - self.b1.powi(t));
        let vh = *v / (1.0 - self.b2.powi(t));
        mh / (vh.sqrt() + self.eps)
    }
}

struct Optimizer {
    m: Vec<f64>,
    v: Vec<f64>,
    gamma: BTreeMap<EdgeType, (f64, f64)>,
    raw_c: f64,
    c_moments: (f64, f64),
    t: i32,
}

impl Optimizer {
    fn new(store: &EmbeddingStore) -> Self {
        let c = store.curvature().get();
        Self {
            m: vec![0.0; store.coords.len()],
            v: vec![0.0; store.coords.len()],
            gamma: BTreeMap::new(),
            // softplus inverse
            raw_c: c + (-(-c).exp_m1()).ln(),
            c_moments: (0.0, 0.0),
            t: 0,
        }
    }

    fn step(&mut self, store: &mut EmbeddingStore, g: &Gradients, cfg: &TrainConfig) {
        self.t = self.t.saturating_add(1);
        let adam = Adam::DEFAULT;
        let c = store.curvature();
        let d = store.dim;
        for &i in &g.touched {
            let scale = manifold::rescale_factor(store.point(i), c);
            let gi = g.point(i);
            let row = &mut store.coords[i * d..(i + 1) * d];
            for k in 0..d {
                let j = i * d + k;
                row[k] -= cfg.lr * adam.direction(scale * gi[k], &mut self.m[j], &mut self.v[j], self.t);
            }
            manifold::project_in_place(row, c);
        }
        for (t, gv) in &g.gamma {
            let (m, v) = self.gamma.entry(*t).or_insert((0.0, 0.0));
            let step = cfg.lr * adam.direction(*gv, m, v, self.t);
            *store.gamma.entry(*t).or_insert(0.0) -= step;
        }
        if cfg.c_trainable && cfg.lr_curvature > 0.0 {
            let g_raw = g.curvature * sigmoid(self.raw_c);
            let (m, v) = &mut self.c_moments;
            self.raw_c -= cfg.lr_curvature * adam.direction(g_raw, m, v, self.t);
            let c_new = softplus(self.raw_c).max(1e-6);
            if let Ok(c) = Curvature::new(c_new) {
                store.set_curvature(c);
            }
        }
    }
}

/// Training visits as vocabulary indices, restricted to visits with at least
/// two known codes.
fn encode_visits(cohort: &Cohort, store: &EmbeddingStore) -> Vec<Vec<usize>> {
    cohort
        .trajectories()
        .iter()
        .flat_map(|t| &t.visits)
        .map(|v| {
            v.all_codes()
                .filter_map(|(_, c)| store.index_of(c))
                .collect::<Vec<_>>()
        })
        .filter(|codes| codes.len() >= 2)
        .collect()
}

/// Minimises `L_edge + α L_mask` by mini-batch Riemannian Adam. Single
/// threaded and fully determined by `cfg.seed`.
pub fn train(
    graph: &ClinicalGraph,
    train_cohort: &Cohort,
    cfg: &TrainConfig,
) -> Result<(EmbeddingStore, TrainReport), TrainError> {
    let vocab = graph.vocab();
    let mut store = init_store(vocab, graph.edge_types(), cfg)?;
    let endpoints = graph.endpoints();
    let etypes: Vec<EdgeType> = graph.edges().iter().map(|e| e.etype).collect();
    let visits = if cfg.alpha > 0.0 {
        encode_visits(train_cohort, &store)
    } else {
        Vec::new()
    };
    let leaves: Vec<Vec<usize>> = crate::corpus::Modality::ALL
        .iter()
        .map(|m| vocab.leaves(*m).collect())
        .collect();

    let mut rng = seeded_rng(cfg.seed, 0x7a11);
    let mut unrelated: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut opt = Optimizer::new(&store);
    let mut grads = Gradients::new(&store);
    let mut report = TrainReport::default();
    let steps_per_epoch = endpoints.len().div_ceil(cfg.batch).max(1);
    let [rho_lo, rho_hi] = cfg.mask_ratio_range;

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let (mut edge_sum, mut mask_sum) = (0.0, 0.0);
        for _ in 0..steps_per_epoch {
            grads.clear();
            let mut edge_mean = 0.0;
            if !endpoints.is_empty() {
                let batch: Vec<EdgeSample> = (0..cfg.batch)
                    .map(|_| {
                        let e = rng.random_range(0..endpoints.len());
                        let (src, dst) = endpoints[e];
                        let negatives = match etypes[e].kind() {
                            EdgeKind::Hier => {
                                let pool = unrelated
                                    .entry(src)
                                    .or_insert_with(|| unrelated_nodes(vocab, src));
                                draw_excluding(pool, usize::MAX, cfg.n_neg, &mut rng)
                            }
                            EdgeKind::Cross => {
                                let pool = vocab.modality_nodes(vocab.concept(dst).modality);
                                draw_excluding(pool, dst, cfg.n_neg, &mut rng)
                            }
                        };
                        EdgeSample {
                            src,
                            dst,
                            etype: etypes[e],
                            negatives: negatives.unwrap_or_default(),
                        }
                    })
                    .collect();
                if !batch.is_empty() {
                    let w = 1.0 / batch.len() as f64;
                    edge_mean = w * edge_loss_acc(&batch, &store, w, &mut grads);
                }
            }
            let mut mask_mean = 0.0;
            if !visits.is_empty() {
                let w = cfg.alpha / cfg.visit_batch as f64;
                for _ in 0..cfg.visit_batch {
                    let codes = &visits[rng.random_range(0..visits.len())];
                    let rho = rng.random_range(rho_lo..=rho_hi);
                    let Some((kept, masked)) = mask_codes(codes, rho, &mut rng) else {
                        continue;
                    };
                    let masked = masked
                        .into_iter()
                        .filter_map(|t| {
                            let pool = &leaves[vocab.concept(t).modality.index()];
                            draw_excluding(pool, t, cfg.n_neg, &mut rng).map(|n| (t, n))
                        })
                        .collect::<Vec<_>>();
                    let sample = MaskSample { kept, masked };
                    mask_mean += mask_loss_acc(&sample, &store, cfg.tau_temp, w, &mut grads)
                        / cfg.visit_batch as f64;
                }
            }
            let total = edge_mean + cfg.alpha * mask_mean;
            edge_sum += edge_mean;
            mask_sum += mask_mean;
            if !total.is_finite() {
                report.final_curvature = store.curvature().get();
                return Err(TrainError::Diverged {
                    epoch,
                    report: Box::new(report),
                });
            }
            opt.step(&mut store, &grads, cfg);
            report.steps += 1;
        }
        let n = steps_per_epoch as f64;
        let mask_loss = (cfg.alpha > 0.0).then_some(mask_sum / n);
        report.epochs.push(EpochStats {
            epoch,
            edge_loss: edge_sum / n,
            mask_loss,
            total_loss: edge_sum / n + cfg.alpha * mask_loss.unwrap_or(0.0),
            wall_secs: started.elapsed().as_secs_f64(),
        });
        log::debug!(
            "epoch {epoch}: total {:.4} c {:.4}",
            report.epochs.last().map_or(0.0, |e| e.total_loss),
            store.curvature().get()
        );
    }
    report.final_curvature = store.curvature().get();
    Ok((store, report))
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const MAGIC: &str = "HEMB1";
const GAMMA_HEADER: &str = "edge_type\tgamma";

/// Text header line, then per concept a little-endian `u32` id length, the
/// id bytes and `d` little-endian `f64` values.
pub fn write_store<W: Write>(store: &EmbeddingStore, config: &str, mut w: W) -> std::io::Result<()> {
    writeln!(
        w,
        "{MAGIC} d={} c={} count={} config={config}",
        store.dim,
        store.curvature.get(),
        store.len()
    )?;
    for (i, id) in store.ids.iter().enumerate() {
        w.write_all(&(id.len() as u32).to_le_bytes())?;
        w.write_all(id.as_bytes())?;
        for x in store.point(i) {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Returns the store (biases empty) and the recorded config hash.
pub fn read_store<R: BufRead>(mut r: R) -> Result<(EmbeddingStore, String), TrainError> {
    let fmt = |m: &str| TrainError::Format(m.to_owned());
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut fields = header.trim_end().split(' ');
    if fields.next() != Some(MAGIC) {
        return Err(fmt("missing magic"));
    }
    let mut kv = BTreeMap::new();
    for f in fields {
        let (k, v) = f.split_once('=').ok_or_else(|| fmt("bad header field"))?;
        kv.insert(k, v);
    }
    let get = |k: &str| kv.get(k).copied().ok_or_else(|| fmt("missing header field"));
    let dim: usize = get("d")?.parse().map_err(|_| fmt("bad d"))?;
    let c: f64 = get("c")?.parse().map_err(|_| fmt("bad c"))?;
    let count: usize = get("count")?.parse().map_err(|_| fmt("bad count"))?;
    let config = kv.get("config").copied().unwrap_or("").to_owned();
    let c = Curvature::new(c)?;

    let mut points = Vec::with_capacity(count);
    let mut buf4 = [0u8; 4];
    let mut buf8 = [0u8; 8];
    for _ in 0..count {
        r.read_exact(&mut buf4)?;
        let mut id = vec![0u8; u32::from_le_bytes(buf4) as usize];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| fmt("id is not UTF-8"))?;
        let mut p = Vec::with_capacity(dim);
        for _ in 0..dim {
            r.read_exact(&mut buf8)?;
            p.push(f64::from_le_bytes(buf8));
        }
        points.push((id, p));
    }
    if r.read(&mut buf4)? != 0 {
        return Err(fmt("trailing bytes"));
    }
    Ok((EmbeddingStore::from_points(points, BTreeMap::new(), c)?, config))
}

pub fn write_gamma<W: Write>(store: &EmbeddingStore, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{GAMMA_HEADER}")?;
    for (t, g) in &store.gamma {
        writeln!(w, "{t}\t{g}")?;
    }
    Ok(())
}

pub fn read_gamma<R: BufRead>(store: &mut EmbeddingStore, r: R) -> Result<(), TrainError> {
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() || line.starts_with('#') || line == GAMMA_HEADER {
            continue;
        }
        let bad = || TrainError::Format(format!("gamma line {}", n + 1));
        let (t, g) = line.split_once('\t').ok_or_else(bad)?;
        let t: EdgeType = t.parse().map_err(|_| bad())?;
        store.set_gamma(t, g.parse().map_err(|_| bad())?)?;
    }
    Ok(())
}
