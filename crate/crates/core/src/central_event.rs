//! Central events: a visit compressed to a tangent-space barycenter, a soft
//! assignment over candidate concepts, and its most probable concept.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{Modality, Visit};
use crate::graph::Vocabulary;
use crate::manifold::{self, exp0_unchecked, log0_unchecked};
use crate::trainer::EmbeddingStore;

#[derive(Debug, Error, PartialEq)]
pub enum CentralEventError {
    #[error("visit has no codes")]
    EmptyVisit,
    #[error("concept {0:?} has no embedding")]
    UnknownConcept(String),
    #[error("weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("assignment pool is empty")]
    EmptyPool,
    #[error("beta must be finite and positive, got {0}")]
    BadBeta(f64),
}

/// Which concepts the soft assignment ranges over.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolPolicy {
    /// Every concept of each modality present in the visit, plus the
    /// ancestors of the visit's codes.
    #[default]
    ModalitiesAndAncestors,
    /// Only the visit's own codes and their ancestors.
    CodesAndAncestors,
    /// The whole vocabulary.
    All,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CEConfig {
    /// Assignment sharpness.
    pub beta: f64,
    pub pool: PoolPolicy,
    /// Per-code barycenter weights; codes not listed weigh 1.
    pub weights: BTreeMap<String, f64>,
}

impl Default for CEConfig {
    fn default() -> Self {
        Self {
            beta: 5.0,
            pool: PoolPolicy::default(),
            weights: BTreeMap::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentralEvent {
    pub mu: Vec<f64>,
    /// Pool concepts by descending probability, ties by id.
    pub assignment: Vec<(String, f64)>,
    pub representative: String,
}

impl CentralEvent {
    pub fn prob(&self, id: &str) -> f64 {
        self.assignment
            .iter()
            .find(|(c, _)| c == id)
            .map_or(0.0, |(_, p)| *p)
    }

    pub fn top(&self, n: usize) -> &[(String, f64)] {
        &self.assignment[..n.min(self.assignment.len())]
    }
}

/// `exp0(Σ w_i log0(z_i) / Σ w_i)` over store indices. Callers guarantee a
/// non-empty index list and a positive weight sum.
pub(crate) fn barycenter_idx(store: &EmbeddingStore, idx: &[usize], w: &[f64]) -> Vec<f64> {
    let c = store.curvature();
    let total: f64 = w.iter().sum();
    let mut m = vec![0.0; store.dim()];
    for (&i, &wi) in idx.iter().zip(w) {
        if wi == 0.0 {
            continue;
        }
        let v = log0_unchecked(store.point(i), c);
        for (a, b) in m.iter_mut().zip(&v) {
            *a += wi / total * b;
        }
    }
    let mut mu = exp0_unchecked(&m, c);
    manifold::project_in_place(&mut mu, c);
    mu
}

/// Closed-form tangent-space barycenter of the given codes.
pub fn barycenter(
    codes: &[&str],
    weights: &[f64],
    store: &EmbeddingStore,
) -> Result<Vec<f64>, CentralEventError> {
    if codes.is_empty() {
        return Err(CentralEventError::EmptyVisit);
    }
    if weights.len() != codes.len()
        || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0))
        || weights.iter().sum::<f64>() <= 0.0
    {
        return Err(CentralEventError::BadWeights);
    }
    let idx = codes
        .iter()
        .map(|c| {
            store
                .index_of(c)
                .ok_or_else(|| CentralEventError::UnknownConcept((*c).to_owned()))
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(barycenter_idx(store, &idx, weights))
}

/// Candidate concepts for the soft assignment of `visit`, ascending index order.
pub fn candidate_pool_for_assignment(
    visit: &Visit,
    vocab: &Vocabulary,
    policy: PoolPolicy,
) -> Vec<usize> {
    let mut pool = BTreeSet::new();
    match policy {
        PoolPolicy::All => pool.extend(0..vocab.len()),
        PoolPolicy::ModalitiesAndAncestors | PoolPolicy::CodesAndAncestors => {
            for (m, code) in visit.all_codes() {
                if let Some(i) = vocab.index_of(code) {
                    pool.insert(i);
                    pool.extend(vocab.ancestors(i));
                }
                if policy == PoolPolicy::ModalitiesAndAncestors {
                    pool.extend(vocab.modality_nodes(m).iter().copied());
                }
            }
        }
    }
    pool.into_iter().collect()
}

/// `p(v) ∝ exp(-β d(μ, z_v))` over `pool`, evaluated with max-subtraction.
/// Returned in pool order.
pub fn soft_assign(
    mu: &[f64],
    pool: &[usize],
    store: &EmbeddingStore,
    beta: f64,
) -> Result<Vec<(usize, f64)>, CentralEventError> {
    if pool.is_empty() {
        return Err(CentralEventError::EmptyPool);
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(CentralEventError::BadBeta(beta));
    }
    let c = store.curvature();
    let logits: Vec<f64> = pool
        .iter()
        .map(|&v| -beta * manifold::dist_unchecked(mu, store.point(v), c))
        .collect();
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Ok(pool.iter().zip(exps).map(|(&v, e)| (v, e / z)).collect())
}

/// Barycenter over all of the visit's codes, soft assignment over its pool,
/// and the MAP representative.
pub fn central_event(
    visit: &Visit,
    store: &EmbeddingStore,
    vocab: &Vocabulary,
    cfg: &CEConfig,
) -> Result<CentralEvent, CentralEventError> {
    if !(cfg.beta.is_finite() && cfg.beta > 0.0) {
        return Err(CentralEventError::BadBeta(cfg.beta));
    }
    let codes: Vec<&str> = visit.all_codes().map(|(_, c)| c).collect();
    let weights: Vec<f64> = codes
        .iter()
        .map(|c| cfg.weights.get(*c).copied().unwrap_or(1.0))
        .collect();
    let mu = barycenter(&codes, &weights, store)?;
    let pool = candidate_pool_for_assignment(visit, vocab, cfg.pool);
    let mut assignment: Vec<(String, f64)> = soft_assign(&mu, &pool, store, cfg.beta)?
        .into_iter()
        .map(|(i, p)| (vocab.id(i).to_owned(), p))
        .collect();
    crate::util::rank_desc(&mut assignment);
    let representative = assignment[0].0.clone();
    Ok(CentralEvent {
        mu,
        assignment,
        representative,
    })
}

/// Modalities with at least one code in the visit.
pub fn present_modalities(visit: &Visit) -> Vec<Modality> {
    Modality::ALL
        .into_iter()
        .filter(|m| !visit.codes(*m).is_empty())
        .collect()
}
