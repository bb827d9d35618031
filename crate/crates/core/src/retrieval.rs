//! Risk Horizons: structured candidate pools around a visit's representative,
//! filtered by a tangent-space risk cone and ranked per modality.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central_event::CentralEvent;
use crate::corpus::Modality;
use crate::graph::{ClinicalGraph, Vocabulary};
use crate::manifold::{self, log0_unchecked};
use crate::trainer::EmbeddingStore;

#[derive(Debug, Error, PartialEq)]
pub enum RetrievalError {
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("invalid retrieval config: {0}")]
    InvalidConfig(String),
    #[error("embedding store does not match the graph vocabulary")]
    StoreMismatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub k: usize,
    /// Cone aperture in radians.
    pub phi: f64,
    /// In-cone bonus.
    pub eta: f64,
    pub include_ancestors: bool,
    /// Drop out-of-cone candidates; when off the cone only adds the bonus.
    pub cone_filter: bool,
    pub dir_eps: f64,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            k: 10,
            phi: PI / 3.0,
            eta: 0.5,
            include_ancestors: false,
            cone_filter: true,
            dir_eps: 1e-9,
        }
    }
}

impl RetrievalConfig {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        let bad = |m: &str| Err(RetrievalError::InvalidConfig(m.to_owned()));
        if self.k == 0 {
            return bad("k must be at least 1");
        }
        if !(self.phi > 0.0 && self.phi <= PI) {
            return bad("phi must lie in (0, pi]");
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return bad("eta must be non-negative");
        }
        if !(self.dir_eps.is_finite() && self.dir_eps >= 0.0) {
            return bad("dir_eps must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskCone {
    pub apex: String,
    pub root: String,
    pub direction: Vec<f64>,
    pub phi: f64,
    /// Direction too short to define an angle; the cone is then disabled.
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Ranked {
    pub id: String,
    pub score: f64,
    pub in_cone: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskHorizon {
    pub k: usize,
    pub lists: BTreeMap<Modality, Vec<Ranked>>,
    /// Modalities ranked by the distance-only fallback.
    pub fallback: BTreeSet<Modality>,
}

impl RiskHorizon {
    pub fn list(&self, m: Modality) -> &[Ranked] {
        self.lists.get(&m).map_or(&[], Vec::as_slice)
    }

    pub fn contains(&self, id: &str) -> bool {
        self.lists.values().flatten().any(|r| r.id == id)
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.lists.values().flatten().map(|r| r.id.as_str()).collect()
    }
}

/// Descendants, Δ = 0 associates and Δ > 0 successors of `v_t`, excluding
/// `v_t` itself.
pub fn candidate_pool(v_t: &str, graph: &ClinicalGraph) -> Result<BTreeSet<usize>, RetrievalError> {
    let i = graph
        .vocab()
        .index_of(v_t)
        .ok_or_else(|| RetrievalError::UnknownConcept(v_t.to_owned()))?;
    let mut pool: BTreeSet<usize> = graph.vocab().descendants(i).into_iter().collect();
    pool.extend(graph.assoc0(i));
    pool.extend(graph.lagged(i));
    pool.remove(&i);
    Ok(pool)
}

/// `d = log0(z_v) - log0(z_root)` with the level-0 ancestor of `v_t`.
pub fn cone_direction(
    v_t: &str,
    store: &EmbeddingStore,
    vocab: &Vocabulary,
    cfg: &RetrievalConfig,
) -> Result<RiskCone, RetrievalError> {
    let unknown = |s: &str| RetrievalError::UnknownConcept(s.to_owned());
    let i = vocab.index_of(v_t).ok_or_else(|| unknown(v_t))?;
    let root = vocab.id(vocab.root_of(i));
    let c = store.curvature();
    let zv = store.point_of(v_t).ok_or_else(|| unknown(v_t))?;
    let zr = store.point_of(root).ok_or_else(|| unknown(root))?;
    let direction: Vec<f64> = log0_unchecked(zv, c)
        .iter()
        .zip(log0_unchecked(zr, c))
        .map(|(a, b)| a - b)
        .collect();
    let degenerate = manifold::norm(&direction) < cfg.dir_eps.max(f64::MIN_POSITIVE);
    Ok(RiskCone {
        apex: v_t.to_owned(),
        root: root.to_owned(),
        direction,
        phi: cfg.phi,
        degenerate,
    })
}

/// Cosine between `log0(z)` and the cone direction, and whether the angle is
/// within the aperture. A degenerate cone admits everything.
fn in_cone_point(z: &[f64], cone: &RiskCone, store: &EmbeddingStore, dir_eps: f64) -> (bool, f64) {
    if cone.degenerate {
        return (true, 1.0);
    }
    let u = log0_unchecked(z, store.curvature());
    let nu = manifold::norm(&u);
    if nu < dir_eps.max(f64::MIN_POSITIVE) {
        return (false, 0.0);
    }
    let cos = (manifold::dot(&u, &cone.direction) / (nu * manifold::norm(&cone.direction)))
        .clamp(-1.0, 1.0);
    (cos.acos() <= cone.phi, cos)
}

pub fn in_cone(
    u: &str,
    cone: &RiskCone,
    store: &EmbeddingStore,
    dir_eps: f64,
) -> Result<(bool, f64), RetrievalError> {
    let z = store
        .point_of(u)
        .ok_or_else(|| RetrievalError::UnknownConcept(u.to_owned()))?;
    Ok(in_cone_point(z, cone, store, dir_eps))
}

/// `-dist(z_u, μ) + η·1[in cone]`.
pub fn geo_score(
    u: &str,
    mu: &[f64],
    cone: &RiskCone,
    store: &EmbeddingStore,
    eta: f64,
    dir_eps: f64,
) -> Result<f64, RetrievalError> {
    let z = store
        .point_of(u)
        .ok_or_else(|| RetrievalError::UnknownConcept(u.to_owned()))?;
    let (inside, _) = in_cone_point(z, cone, store, dir_eps);
    Ok(-manifold::dist_unchecked(z, mu, store.curvature()) + if inside { eta } else { 0.0 })
}

fn top_k(mut items: Vec<Ranked>, k: usize) -> Vec<Ranked> {
    items.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.id.cmp(&b.id))
    });
    items.truncate(k);
    items
}

/// Per-modality top-K over the representative's pool. A modality with no
/// surviving candidate, or every modality under a degenerate cone, is ranked
/// over all of its leaves by distance to `μ` alone.
pub fn build_risk_horizon(
    ce: &CentralEvent,
    graph: &ClinicalGraph,
    store: &EmbeddingStore,
    cfg: &RetrievalConfig,
) -> Result<RiskHorizon, RetrievalError> {
    cfg.validate()?;
    let vocab = graph.vocab();
    if !store.matches(vocab) {
        return Err(RetrievalError::StoreMismatch);
    }
    let c = store.curvature();
    let cone = cone_direction(&ce.representative, store, vocab, cfg)?;
    let pool = candidate_pool(&ce.representative, graph)?;

    let mut grouped: BTreeMap<Modality, Vec<Ranked>> = BTreeMap::new();
    if !cone.degenerate {
        for u in pool {
            if !cfg.include_ancestors && !vocab.is_leaf(u) {
                continue;
            }
            let z = store.point(u);
            let (inside, _) = in_cone_point(z, &cone, store, cfg.dir_eps);
            if cfg.cone_filter && !inside {
                continue;
            }
            let bonus = if inside { cfg.eta } else { 0.0 };
            grouped
                .entry(vocab.concept(u).modality)
                .or_default()
                .push(Ranked {
                    id: vocab.id(u).to_owned(),
                    score: -manifold::dist_unchecked(z, &ce.mu, c) + bonus,
                    in_cone: inside,
                });
        }
    }

    let mut lists = BTreeMap::new();
    let mut fallback = BTreeSet::new();
    for m in Modality::ALL {
        let items = match grouped.remove(&m) {
            Some(items) if !items.is_empty() => items,
            _ => {
                fallback.insert(m);
                vocab
                    .leaves(m)
                    .map(|u| Ranked {
                        id: vocab.id(u).to_owned(),
                        score: -manifold::dist_unchecked(store.point(u), &ce.mu, c),
                        in_cone: false,
                    })
                    .collect()
            }
        };
        let ranked = top_k(items, cfg.k);
        if !ranked.is_empty() {
            lists.insert(m, ranked);
        }
    }
    Ok(RiskHorizon {
        k: cfg.k,
        lists,
        fallback,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{assemble_graph, build_hierarchy_edges, Concept, EdgeType, TypedEdge};
    use crate::manifold::Curvature;
    use approx::assert_abs_diff_eq;

    fn concept(id: &str, m: Modality, level: u32, parent: Option<&str>) -> Concept {
        Concept {
            id: id.into(),
            modality: m,
            level,
            parent: parent.map(Into::into),
            description: id.into(),
        }
    }

    fn cross(src: &str, dst: &str, delta: u32) -> TypedEdge {
        TypedEdge {
            src: src.into(),
            dst: dst.into(),
            etype: EdgeType::Cross {
                src: Modality::Dx,
                dst: Modality::Med,
                delta,
            },
            pmi: Some(1.0),
            support: Some(100),
            stability: Some(1.0),
        }
    }

    /// dx: ROOT -> A -> {A.1 (d1)}; med: ROOT -> {X (a1), Y (p1), Z}
    fn fixture() -> (ClinicalGraph, EmbeddingStore) {
        let vocab = Vocabulary::from_concepts(vec![
            concept("dx:ROOT", Modality::Dx, 0, None),
            concept("dx:A", Modality::Dx, 1, Some("dx:ROOT")),
            concept("dx:A.1", Modality::Dx, 2, Some("dx:A")),
            concept("med:ROOT", Modality::Med, 0, None),
            concept("med:X", Modality::Med, 1, Some("med:ROOT")),
            concept("med:Y", Modality::Med, 1, Some("med:ROOT")),
            concept("med:Z", Modality::Med, 1, Some("med:ROOT")),
        ])
        .unwrap();
        let hier = build_hierarchy_edges(&vocab);
        let graph = assemble_graph(
            vocab,
            hier,
            vec![cross("dx:A", "med:X", 0), cross("dx:A", "med:Y", 2)],
        )
        .unwrap();
        let pts: Vec<(String, Vec<f64>)> = vec![
            ("dx:ROOT", vec![0.0, 0.0]),
            ("dx:A", vec![0.4, 0.0]),
            ("dx:A.1", vec![0.6, 0.05]),
            ("med:ROOT", vec![0.0, 0.0]),
            ("med:X", vec![0.5, 0.1]),
            ("med:Y", vec![0.0, 0.5]),
            ("med:Z", vec![0.55, -0.05]),
        ]
        .into_iter()
        .map(|(i, p)| (i.to_owned(), p))
        .collect();
        let store =
            EmbeddingStore::from_points(pts, BTreeMap::new(), Curvature::new(1.0).unwrap()).unwrap();
        (graph, store)
    }

    fn ids(graph: &ClinicalGraph, pool: &BTreeSet<usize>) -> Vec<String> {
        pool.iter().map(|&i| graph.vocab().id(i).to_owned()).collect()
    }

    #[test]
    fn pool_is_union_of_neighbourhoods() {
        let (graph, _) = fixture();
        let pool = candidate_pool("dx:A", &graph).unwrap();
        assert_eq!(ids(&graph, &pool), vec!["dx:A.1", "med:X", "med:Y"]);
        assert!(candidate_pool("dx:A.1", &graph).unwrap().is_empty());
        assert!(candidate_pool("dx:Q", &graph).is_err());
    }

    #[test]
    fn cone_cases() {
        let (graph, store) = fixture();
        let cfg = RetrievalConfig::default();
        let cone = cone_direction("dx:A", &store, graph.vocab(), &cfg).unwrap();
        assert_eq!(cone.root, "dx:ROOT");
        assert!(!cone.degenerate);
        let n = manifold::norm(&cone.direction);
        assert_abs_diff_eq!(cone.direction[0] / n, 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cone.direction[1], 0.0, epsilon = 1e-15);

        let root = cone_direction("dx:ROOT", &store, graph.vocab(), &cfg).unwrap();
        assert!(root.degenerate);

        let (inside, cos) = in_cone("dx:A.1", &cone, &store, cfg.dir_eps).unwrap();
        assert!(inside && cos > 0.99);
        // med:Y sits on the orthogonal axis.
        let (inside, cos) = in_cone("med:Y", &cone, &store, cfg.dir_eps).unwrap();
        assert!(!inside);
        assert_abs_diff_eq!(cos, 0.0, epsilon = 1e-15);
        // The origin is never inside.
        assert_eq!(in_cone("med:ROOT", &cone, &store, cfg.dir_eps).unwrap(), (false, 0.0));
    }

    #[test]
    fn geo_score_bonus() {
        let (graph, store) = fixture();
        let cfg = RetrievalConfig::default();
        let cone = cone_direction("dx:A", &store, graph.vocab(), &cfg).unwrap();
        let mu = store.point_of("med:X").unwrap().to_vec();
        let s = geo_score("med:X", &mu, &cone, &store, 0.5, cfg.dir_eps).unwrap();
        assert_abs_diff_eq!(s, 0.5, epsilon = 1e-12);
        let s0 = geo_score("med:Y", &mu, &cone, &store, 0.0, cfg.dir_eps).unwrap();
        assert!(s0 < 0.0);
    }

    fn event(rep: &str, mu: Vec<f64>) -> CentralEvent {
        CentralEvent {
            mu,
            assignment: vec![(rep.to_owned(), 1.0)],
            representative: rep.to_owned(),
        }
    }

    #[test]
    fn horizon_filters_and_falls_back() {
        let (graph, store) = fixture();
        let ce = event("dx:A", vec![0.45, 0.0]);
        let h = build_risk_horizon(&ce, &graph, &store, &RetrievalConfig::default()).unwrap();
        // med:Y is out of cone; med:X survives.
        let med: Vec<&str> = h.list(Modality::Med).iter().map(|r| r.id.as_str()).collect();
        assert_eq!(med, vec!["med:X"]);
        assert_eq!(h.list(Modality::Dx)[0].id, "dx:A.1");
        assert!(!h.fallback.contains(&Modality::Med));

        // Soft mode keeps med:Y without the bonus.
        let soft = RetrievalConfig {
            cone_filter: false,
            ..Default::default()
        };
        let h = build_risk_horizon(&ce, &graph, &store, &soft).unwrap();
        let y = h.list(Modality::Med).iter().find(|r| r.id == "med:Y").unwrap();
        assert!(!y.in_cone);

        // Leaf with no cross edges: every modality falls back.
        let ce = event("dx:A.1", vec![0.56, -0.04]);
        let h = build_risk_horizon(&ce, &graph, &store, &RetrievalConfig::default()).unwrap();
        assert!(h.fallback.contains(&Modality::Med) && h.fallback.contains(&Modality::Dx));
        assert_eq!(h.list(Modality::Med).len(), 3);
        assert_eq!(h.list(Modality::Med)[0].id, "med:Z");
    }

    #[test]
    fn full_aperture_keeps_everything() {
        let (graph, store) = fixture();
        let ce = event("dx:A", vec![0.45, 0.0]);
        let wide = RetrievalConfig {
            phi: PI,
            ..Default::default()
        };
        let h = build_risk_horizon(&ce, &graph, &store, &wide).unwrap();
        assert_eq!(h.list(Modality::Med).len(), 2);
        assert!(h.list(Modality::Med).iter().all(|r| r.in_cone));
    }
}
