//! Typed clinical-concept graph.
//!
//! Two edge families share one vertex set: deterministic parent→child edges
//! from the coding hierarchies and data-driven cross-modal edges retained by
//! lagged PMI, a support floor and bootstrap stability.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::str::FromStr;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{root_id, Cohort, Modality, SplitManifest};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("malformed concept id {0:?}")]
    MalformedCode(String),
    #[error("code {code:?} listed under {listed} but its prefix says {prefix}")]
    InconsistentPrefix {
        code: String,
        listed: Modality,
        prefix: Modality,
    },
    #[error("duplicate concept {0:?}")]
    DuplicateConcept(String),
    #[error("concept {id:?}: {reason}")]
    BadHierarchy { id: String, reason: String },
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("edge {src} -> {dst}: {reason}")]
    BadEdge {
        src: String,
        dst: String,
        reason: String,
    },
    #[error("patient {0:?} is not in the training split")]
    Leakage(String),
    #[error("invalid graph config: {0}")]
    InvalidConfig(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Concept {
    pub id: String,
    pub modality: Modality,
    /// 0 for roots.
    pub level: u32,
    pub parent: Option<String>,
    pub description: String,
}

/// Concepts of all modalities with their hierarchy. Concepts are indexed in
/// ascending id order, so indices are stable for a given concept set.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    concepts: Vec<Concept>,
    index: HashMap<String, usize>,
    parent: Vec<Option<usize>>,
    children: Vec<Vec<usize>>,
    by_modality: [Vec<usize>; 4],
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.concepts == other.concepts
    }
}

impl Vocabulary {
    /// Checks parent closure: every non-root's parent exists, shares its
    /// modality and sits exactly one level up.
    pub fn from_concepts(mut concepts: Vec<Concept>) -> Result<Self, GraphError> {
        concepts.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = HashMap::with_capacity(concepts.len());
        for (i, c) in concepts.iter().enumerate() {
            if index.insert(c.id.clone(), i).is_some() {
                return Err(GraphError::DuplicateConcept(c.id.clone()));
            }
        }
        let bad = |c: &Concept, reason: &str| GraphError::BadHierarchy {
            id: c.id.clone(),
            reason: reason.to_owned(),
        };
        let mut parent = vec![None; concepts.len()];
        let mut children = vec![Vec::new(); concepts.len()];
        let mut by_modality: [Vec<usize>; 4] = Default::default();
        for (i, c) in concepts.iter().enumerate() {
            by_modality[c.modality.index()].push(i);
            match &c.parent {
                None if c.level != 0 => return Err(bad(c, "non-root concept without parent")),
                None => {}
                Some(p) => {
                    let &pi = index.get(p).ok_or_else(|| bad(c, "parent missing"))?;
                    let pc = &concepts[pi];
                    if pc.modality != c.modality {
                        return Err(bad(c, "parent has a different modality"));
                    }
                    if pc.level + 1 != c.level {
                        return Err(bad(c, "parent level is not level - 1"));
                    }
                    parent[i] = Some(pi);
                    children[pi].push(i);
                }
            }
        }
        Ok(Self {
            concepts,
            index,
            parent,
            children,
            by_modality,
        })
    }

    pub fn len(&self) -> usize {
        self.concepts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.concepts.is_empty()
    }

    pub fn concepts(&self) -> &[Concept] {
        &self.concepts
    }

    pub fn get(&self, id: &str) -> Option<&Concept> {
        self.index.get(id).map(|&i| &self.concepts[i])
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub(crate) fn require(&self, id: &str) -> Result<usize, GraphError> {
        self.index_of(id)
            .ok_or_else(|| GraphError::UnknownConcept(id.to_owned()))
    }

    pub fn concept(&self, i: usize) -> &Concept {
        &self.concepts[i]
    }

    pub fn id(&self, i: usize) -> &str {
        &self.concepts[i].id
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn is_leaf(&self, i: usize) -> bool {
        self.children[i].is_empty()
    }

    /// Ancestors nearest first.
    pub fn ancestors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        std::iter::successors(self.parent[i], move |&p| self.parent[p])
    }

    /// Level-0 ancestor, or `i` itself when it is a root.
    pub fn root_of(&self, i: usize) -> usize {
        self.ancestors(i).last().unwrap_or(i)
    }

    /// Ancestor of `i` at `level`, if `i` is at least that deep.
    pub fn ancestor_at(&self, i: usize, level: u32) -> Option<usize> {
        let l = self.concepts[i].level;
        if level > l {
            return None;
        }
        std::iter::once(i)
            .chain(self.ancestors(i))
            .find(|&a| self.concepts[a].level == level)
    }

    /// All transitive descendants, in breadth-first order.
    pub fn descendants(&self, i: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut queue = std::collections::VecDeque::from_iter(self.children[i].iter().copied());
        while let Some(n) = queue.pop_front() {
            out.push(n);
            queue.extend(self.children[n].iter().copied());
        }
        out
    }

    pub fn modality_nodes(&self, m: Modality) -> &[usize] {
        &self.by_modality[m.index()]
    }

    pub fn leaves(&self, m: Modality) -> impl Iterator<Item = usize> + '_ {
        self.by_modality[m.index()]
            .iter()
            .copied()
            .filter(|&i| self.is_leaf(i))
    }

    /// Lowest common ancestor of two same-tree concepts.
    pub fn lca(&self, a: usize, b: usize) -> Option<usize> {
        let chain: BTreeSet<usize> = std::iter::once(a).chain(self.ancestors(a)).collect();
        std::iter::once(b)
            .chain(self.ancestors(b))
            .find(|n| chain.contains(n))
    }
}

/// Split a prefix-scheme id `<modality>:<path>` into modality and path
/// segments. `<modality>:ROOT` has no segments.
pub fn parse_code(id: &str) -> Result<(Modality, Vec<&str>), GraphError> {
    let malformed = || GraphError::MalformedCode(id.to_owned());
    let (m, path) = id.split_once(':').ok_or_else(malformed)?;
    let m: Modality = m.parse().map_err(|_| malformed())?;
    if path == "ROOT" {
        return Ok((m, Vec::new()));
    }
    let segs: Vec<&str> = path.split('.').collect();
    if segs.iter().any(|s| s.is_empty()) {
        return Err(malformed());
    }
    Ok((m, segs))
}

fn prefix_concept(m: Modality, segs: &[&str]) -> Concept {
    if segs.is_empty() {
        return Concept {
            id: root_id(m),
            modality: m,
            level: 0,
            parent: None,
            description: format!("{} root", m.long_name()),
        };
    }
    let path = segs.join(".");
    let parent = if segs.len() == 1 {
        root_id(m)
    } else {
        format!("{m}:{}", segs[..segs.len() - 1].join("."))
    };
    Concept {
        id: format!("{m}:{path}"),
        modality: m,
        level: segs.len() as u32,
        parent: Some(parent),
        description: format!("{} {path}", m.long_name()),
    }
}

/// Every observed code plus all of its prefix ancestors.
pub fn build_vocabulary(cohort: &Cohort) -> Result<Vocabulary, GraphError> {
    let mut concepts: BTreeMap<String, Concept> = BTreeMap::new();
    for tr in cohort.trajectories() {
        for v in &tr.visits {
            for (m, code) in v.all_codes() {
                if concepts.contains_key(code) {
                    continue;
                }
                let (prefix, segs) = parse_code(code)?;
                if prefix != m {
                    return Err(GraphError::InconsistentPrefix {
                        code: code.to_owned(),
                        listed: m,
                        prefix,
                    });
                }
                for k in (0..=segs.len()).rev() {
                    let c = prefix_concept(m, &segs[..k]);
                    if concepts.contains_key(&c.id) {
                        break;
                    }
                    concepts.insert(c.id.clone(), c);
                }
            }
        }
    }
    Vocabulary::from_concepts(concepts.into_values().collect())
}

/// Like [`build_vocabulary`] but takes the hierarchy from an external
/// vocabulary; every observed code must exist there under its modality.
pub fn build_vocabulary_with(
    cohort: &Cohort,
    hierarchy: &Vocabulary,
) -> Result<Vocabulary, GraphError> {
    let mut keep = BTreeSet::new();
    for tr in cohort.trajectories() {
        for v in &tr.visits {
            for (m, code) in v.all_codes() {
                let i = hierarchy.require(code)?;
                let c = hierarchy.concept(i);
                if c.modality != m {
                    return Err(GraphError::InconsistentPrefix {
                        code: code.to_owned(),
                        listed: m,
                        prefix: c.modality,
                    });
                }
                if keep.insert(i) {
                    keep.extend(hierarchy.ancestors(i));
                }
            }
        }
    }
    Vocabulary::from_concepts(
        keep.into_iter()
            .map(|i| hierarchy.concept(i).clone())
            .collect(),
    )
}

// ---------------------------------------------------------------------------
// Edges
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EdgeKind {
    Hier,
    Cross,
}

impl fmt::Display for EdgeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EdgeKind::Hier => "hier",
            EdgeKind::Cross => "cross",
        })
    }
}

/// Relation type: hierarchy edges are keyed per modality, cross edges by
/// `(src modality -> dst modality, lag)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EdgeType {
    Hier(Modality),
    Cross {
        src: Modality,
        dst: Modality,
        delta: u32,
    },
}

impl EdgeType {
    pub fn kind(self) -> EdgeKind {
        match self {
            EdgeType::Hier(_) => EdgeKind::Hier,
            EdgeType::Cross { .. } => EdgeKind::Cross,
        }
    }

    pub fn src_modality(self) -> Modality {
        match self {
            EdgeType::Hier(m) => m,
            EdgeType::Cross { src, .. } => src,
        }
    }

    pub fn dst_modality(self) -> Modality {
        match self {
            EdgeType::Hier(m) => m,
            EdgeType::Cross { dst, .. } => dst,
        }
    }

    pub fn delta(self) -> u32 {
        match self {
            EdgeType::Hier(_) => 0,
            EdgeType::Cross { delta, .. } => delta,
        }
    }
}

impl fmt::Display for EdgeType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EdgeType::Hier(m) => write!(f, "hier:{m}"),
            EdgeType::Cross { src, dst, delta } => write!(f, "cross:{src}>{dst}:{delta}"),
        }
    }
}

impl FromStr for EdgeType {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || format!("malformed edge type {s:?}");
        if let Some(m) = s.strip_prefix("hier:") {
            return Ok(EdgeType::Hier(m.parse()?));
        }
        let rest = s.strip_prefix("cross:").ok_or_else(err)?;
        let (mods, delta) = rest.rsplit_once(':').ok_or_else(err)?;
        let (src, dst) = mods.split_once('>').ok_or_else(err)?;
        Ok(EdgeType::Cross {
            src: src.parse()?,
            dst: dst.parse()?,
            delta: delta.parse().map_err(|_| err())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TypedEdge {
    pub src: String,
    pub dst: String,
    pub etype: EdgeType,
    /// Cross edges only.
    pub pmi: Option<f64>,
    pub support: Option<u64>,
    pub stability: Option<f64>,
}

impl TypedEdge {
    pub fn hier(parent: &Concept, child: &Concept) -> Self {
        Self {
            src: parent.id.clone(),
            dst: child.id.clone(),
            etype: EdgeType::Hier(child.modality),
            pmi: None,
            support: None,
            stability: None,
        }
    }

    fn key(&self) -> (&str, &str, EdgeType) {
        (&self.src, &self.dst, self.etype)
    }
}

/// One parent→child edge per hierarchy link.
pub fn build_hierarchy_edges(vocab: &Vocabulary) -> Vec<TypedEdge> {
    (0..vocab.len())
        .filter_map(|i| {
            vocab
                .parent(i)
                .map(|p| TypedEdge::hier(vocab.concept(p), vocab.concept(i)))
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Lagged co-occurrence and PMI
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TauOverride {
    pub src: Modality,
    pub dst: Modality,
    pub delta: u32,
    pub tau: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub delta_max: u32,
    /// Global PMI threshold; edges need PMI strictly above it.
    pub tau_pmi: f64,
    pub tau_overrides: Vec<TauOverride>,
    /// Minimum lagged co-occurrence count.
    pub kappa: u64,
    /// Number of bootstrap resamples.
    pub bootstrap: usize,
    /// Minimum fraction of resamples an edge must appear in.
    pub q: f64,
    pub seed: u64,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            delta_max: 2,
            tau_pmi: 0.0,
            tau_overrides: Vec::new(),
            kappa: 50,
            bootstrap: 10,
            q: 0.8,
            seed: 0,
        }
    }
}

impl GraphConfig {
    pub fn validate(&self) -> Result<(), GraphError> {
        let bad = |m: &str| Err(GraphError::InvalidConfig(m.to_owned()));
        if self.kappa < 1 {
            return bad("kappa must be >= 1");
        }
        if self.bootstrap < 1 {
            return bad("bootstrap must be >= 1");
        }
        if !(self.q > 0.0 && self.q <= 1.0) {
            return bad("q must lie in (0, 1]");
        }
        if !self.tau_pmi.is_finite() || self.tau_overrides.iter().any(|t| !t.tau.is_finite()) {
            return bad("PMI thresholds must be finite");
        }
        Ok(())
    }

    pub fn tau(&self, src: Modality, dst: Modality, delta: u32) -> f64 {
        self.tau_overrides
            .iter()
            .find(|t| t.src == src && t.dst == dst && t.delta == delta)
            .map_or(self.tau_pmi, |t| t.tau)
    }
}

/// Cohort re-encoded with interned code ids, ready for repeated counting.
struct EncodedCohort {
    codes: Vec<(Modality, String)>,
    index: HashMap<String, u32>,
    /// patient -> visit -> modality -> sorted code ids
    patients: Vec<Vec<[Vec<u32>; 4]>>,
}

impl EncodedCohort {
    fn new(cohort: &Cohort) -> Self {
        let mut seen: BTreeMap<&str, Modality> = BTreeMap::new();
        for tr in cohort.trajectories() {
            for v in &tr.visits {
                for (m, c) in v.all_codes() {
                    seen.entry(c).or_insert(m);
                }
            }
        }
        let codes: Vec<(Modality, String)> =
            seen.into_iter().map(|(c, m)| (m, c.to_owned())).collect();
        let index: HashMap<String, u32> = codes
            .iter()
            .enumerate()
            .map(|(i, (_, c))| (c.clone(), i as u32))
            .collect();
        let patients = cohort
            .trajectories()
            .iter()
            .map(|tr| {
                tr.visits
                    .iter()
                    .map(|v| {
                        Modality::ALL.map(|m| v.codes(m).iter().map(|c| index[c]).collect())
                    })
                    .collect()
            })
            .collect();
        Self {
            codes,
            index,
            patients,
        }
    }
}

/// Lagged cross-modal co-occurrence counts.
///
/// `pairs[(Δ, a, b)]` counts (patient, t) with `a` at visit `t` and `b` at
/// visit `t + Δ` (by position in the trajectory), `a` and `b` of different
/// modalities. At Δ = 0 both orientations are counted.
#[derive(Debug, Clone)]
pub struct CoocCounts {
    delta_max: u32,
    codes: Vec<(Modality, String)>,
    index: HashMap<String, u32>,
    pairs: HashMap<(u32, u32, u32), u64>,
    marginal: Vec<u64>,
    total_visits: u64,
    pairs_at_lag: Vec<u64>,
}

impl CoocCounts {
    fn empty(enc: &EncodedCohort, delta_max: u32) -> Self {
        Self {
            delta_max,
            codes: enc.codes.clone(),
            index: enc.index.clone(),
            pairs: HashMap::new(),
            marginal: vec![0; enc.codes.len()],
            total_visits: 0,
            pairs_at_lag: vec![0; delta_max as usize + 1],
        }
    }

    fn merge(mut self, other: Self) -> Self {
        for (k, v) in other.pairs {
            *self.pairs.entry(k).or_insert(0) += v;
        }
        for (a, b) in self.marginal.iter_mut().zip(other.marginal) {
            *a += b;
        }
        self.total_visits += other.total_visits;
        for (a, b) in self.pairs_at_lag.iter_mut().zip(other.pairs_at_lag) {
            *a += b;
        }
        self
    }

    fn add_patient(&mut self, visits: &[[Vec<u32>; 4]], weight: u64) {
        self.total_visits += weight * visits.len() as u64;
        for v in visits {
            for ids in v {
                for &a in ids {
                    self.marginal[a as usize] += weight;
                }
            }
        }
        for delta in 0..=self.delta_max {
            let d = delta as usize;
            for t in 0..visits.len().saturating_sub(d) {
                self.pairs_at_lag[d] += weight;
                let (now, later) = (&visits[t], &visits[t + d]);
                for (mi, src) in now.iter().enumerate() {
                    for (mj, dst) in later.iter().enumerate() {
                        if mi == mj {
                            continue;
                        }
                        for &a in src {
                            for &b in dst {
                                *self.pairs.entry((delta, a, b)).or_insert(0) += weight;
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn delta_max(&self) -> u32 {
        self.delta_max
    }

    /// `cnt_Δ(a, b)`; zero for unknown codes.
    pub fn count(&self, a: &str, b: &str, delta: u32) -> u64 {
        match (self.index.get(a), self.index.get(b)) {
            (Some(&a), Some(&b)) => self.pairs.get(&(delta, a, b)).copied().unwrap_or(0),
            _ => 0,
        }
    }

    /// Number of visits containing `a`.
    pub fn marginal(&self, a: &str) -> u64 {
        self.index
            .get(a)
            .map_or(0, |&i| self.marginal[i as usize])
    }

    pub fn total_visits(&self) -> u64 {
        self.total_visits
    }

    /// Number of valid ordered visit pairs `(t, t + Δ)`.
    pub fn pairs_at_lag(&self, delta: u32) -> u64 {
        self.pairs_at_lag.get(delta as usize).copied().unwrap_or(0)
    }

    pub fn modality(&self, code: &str) -> Option<Modality> {
        self.index.get(code).map(|&i| self.codes[i as usize].0)
    }
}

fn count_encoded(enc: &EncodedCohort, delta_max: u32, weights: Option<&[u64]>) -> CoocCounts {
    enc.patients
        .par_iter()
        .enumerate()
        .fold(
            || CoocCounts::empty(enc, delta_max),
            |mut acc, (p, visits)| {
                let w = weights.map_or(1, |w| w[p]);
                if w > 0 {
                    acc.add_patient(visits, w);
                }
                acc
            },
        )
        .reduce(|| CoocCounts::empty(enc, delta_max), CoocCounts::merge)
}

/// Count lagged cross-modal co-occurrences for `Δ ∈ 0..=delta_max`.
pub fn count_lagged(cohort: &Cohort, delta_max: u32) -> CoocCounts {
    count_encoded(&EncodedCohort::new(cohort), delta_max, None)
}

/// Lagged PMI per observed `(Δ, a, b)`; zero-count pairs are absent.
#[derive(Debug, Clone)]
pub struct PmiTable {
    entries: HashMap<(u32, u32, u32), f64>,
}

impl PmiTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, counts: &CoocCounts, a: &str, b: &str, delta: u32) -> Option<f64> {
        let (&a, &b) = (counts.index.get(a)?, counts.index.get(b)?);
        self.entries.get(&(delta, a, b)).copied()
    }

    /// `(a, b, Δ, pmi)` sorted by `(a, b, Δ)`.
    pub fn entries<'a>(&'a self, counts: &'a CoocCounts) -> Vec<(&'a str, &'a str, u32, f64)> {
        let mut out: Vec<_> = self
            .entries
            .iter()
            .map(|(&(d, a, b), &p)| {
                (
                    counts.codes[a as usize].1.as_str(),
                    counts.codes[b as usize].1.as_str(),
                    d,
                    p,
                )
            })
            .collect();
        out.sort_by(|x, y| (x.0, x.1, x.2).cmp(&(y.0, y.1, y.2)));
        out
    }
}

/// `PMI_Δ(a→b) = ln( (cnt_Δ(a,b)/N_Δ) / (P(a) P(b)) )` with `P` the fraction
/// of visits containing a code.
pub fn lagged_pmi(counts: &CoocCounts) -> PmiTable {
    let nv = counts.total_visits as f64;
    let entries = counts
        .pairs
        .iter()
        .filter(|(_, &n)| n > 0)
        .map(|(&(d, a, b), &n)| {
            let joint = n as f64 / counts.pairs_at_lag[d as usize] as f64;
            let pa = counts.marginal[a as usize] as f64 / nv;
            let pb = counts.marginal[b as usize] as f64 / nv;
            ((d, a, b), (joint / (pa * pb)).ln())
        })
        .collect();
    PmiTable { entries }
}

fn passing_keys(pmi: &PmiTable, counts: &CoocCounts, cfg: &GraphConfig) -> Vec<(u32, u32, u32)> {
    let mut keys: Vec<_> = pmi
        .entries
        .iter()
        .filter(|(&(d, a, b), &p)| {
            let (ma, mb) = (counts.codes[a as usize].0, counts.codes[b as usize].0);
            p > cfg.tau(ma, mb, d) && counts.pairs[&(d, a, b)] >= cfg.kappa
        })
        .map(|(&k, _)| k)
        .collect();
    keys.sort_unstable();
    keys
}

/// Keep `a→b` at lag Δ iff `PMI > τ` and `cnt ≥ κ`.
pub fn filter_cross_edges(pmi: &PmiTable, counts: &CoocCounts, cfg: &GraphConfig) -> Vec<TypedEdge> {
    let mut edges: Vec<TypedEdge> = passing_keys(pmi, counts, cfg)
        .into_iter()
        .map(|k| cross_edge(k, pmi, counts, None))
        .collect();
    edges.sort_by(|x, y| x.key().cmp(&y.key()));
    edges
}

fn cross_edge(
    (d, a, b): (u32, u32, u32),
    pmi: &PmiTable,
    counts: &CoocCounts,
    stability: Option<f64>,
) -> TypedEdge {
    let (ma, ca) = &counts.codes[a as usize];
    let (mb, cb) = &counts.codes[b as usize];
    TypedEdge {
        src: ca.clone(),
        dst: cb.clone(),
        etype: EdgeType::Cross {
            src: *ma,
            dst: *mb,
            delta: d,
        },
        pmi: Some(pmi.entries[&(d, a, b)]),
        support: Some(counts.pairs[&(d, a, b)]),
        stability,
    }
}

/// Cross edges that pass the PMI/support filter on the full cohort and in at
/// least a fraction `q` of `B` patient-level bootstrap resamples. PMI and
/// support are reported from the full cohort.
pub fn bootstrap_stability(cohort: &Cohort, cfg: &GraphConfig) -> Result<Vec<TypedEdge>, GraphError> {
    cfg.validate()?;
    let enc = EncodedCohort::new(cohort);
    let full = count_encoded(&enc, cfg.delta_max, None);
    let full_pmi = lagged_pmi(&full);
    let candidates = passing_keys(&full_pmi, &full, cfg);
    let n = enc.patients.len();

    let hits: Vec<u64> = (0..cfg.bootstrap)
        .into_par_iter()
        .map(|b| {
            let mut rng = seeded_rng(cfg.seed, 0xb007 + b as u64);
            let mut weights = vec![0u64; n];
            for _ in 0..n {
                weights[rng.random_range(0..n)] += 1;
            }
            let counts = count_encoded(&enc, cfg.delta_max, Some(&weights));
            let pmi = lagged_pmi(&counts);
            let kept: BTreeSet<_> = passing_keys(&pmi, &counts, cfg).into_iter().collect();
            candidates
                .iter()
                .map(|k| u64::from(kept.contains(k)))
                .collect::<Vec<_>>()
        })
        .reduce(
            || vec![0; candidates.len()],
            |a, b| a.into_iter().zip(b).map(|(x, y)| x + y).collect(),
        );

    let mut edges: Vec<TypedEdge> = candidates
        .iter()
        .zip(hits)
        .filter_map(|(&k, h)| {
            let stab = h as f64 / cfg.bootstrap as f64;
            (stab >= cfg.q).then(|| cross_edge(k, &full_pmi, &full, Some(stab)))
        })
        .collect();
    edges.sort_by(|x, y| x.key().cmp(&y.key()));
    Ok(edges)
}

// ---------------------------------------------------------------------------
// Assembled graph
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClinicalGraph {
    vocab: Vocabulary,
    edges: Vec<TypedEdge>,
    by_type: BTreeMap<EdgeType, Vec<usize>>,
    endpoints: Vec<(usize, usize)>,
    assoc0: Vec<Vec<usize>>,
    lagged: Vec<Vec<usize>>,
}

/// Union the hierarchy and cross edge sets over `vocab`. Duplicate edges
/// collapse to the instance with the highest stability.
pub fn assemble_graph(
    vocab: Vocabulary,
    hier: Vec<TypedEdge>,
    cross: Vec<TypedEdge>,
) -> Result<ClinicalGraph, GraphError> {
    let mut unique: BTreeMap<(String, String, EdgeType), TypedEdge> = BTreeMap::new();
    for e in hier.into_iter().chain(cross) {
        let bad = |reason: &str| GraphError::BadEdge {
            src: e.src.clone(),
            dst: e.dst.clone(),
            reason: reason.to_owned(),
        };
        let s = vocab.index_of(&e.src).ok_or_else(|| bad("dangling source"))?;
        let d = vocab.index_of(&e.dst).ok_or_else(|| bad("dangling destination"))?;
        let (ms, md) = (vocab.concept(s).modality, vocab.concept(d).modality);
        if ms != e.etype.src_modality() || md != e.etype.dst_modality() {
            return Err(bad("endpoint modalities disagree with the edge type"));
        }
        match e.etype {
            EdgeType::Hier(_) if vocab.parent(d) != Some(s) => {
                return Err(bad("hierarchy edge is not a parent->child link"))
            }
            EdgeType::Cross { .. } if ms == md => {
                return Err(bad("cross edge within one modality"))
            }
            _ => {}
        }
        let key = (e.src.clone(), e.dst.clone(), e.etype);
        match unique.get(&key) {
            Some(old) if old.stability.unwrap_or(0.0) >= e.stability.unwrap_or(0.0) => {}
            _ => {
                unique.insert(key, e);
            }
        }
    }
    let mut edges: Vec<TypedEdge> = unique.into_values().collect();
    edges.sort_by(|x, y| {
        (x.etype.kind(), &x.src, &x.dst, x.etype).cmp(&(y.etype.kind(), &y.src, &y.dst, y.etype))
    });

    let mut by_type: BTreeMap<EdgeType, Vec<usize>> = BTreeMap::new();
    let mut endpoints = Vec::with_capacity(edges.len());
    let mut assoc0 = vec![Vec::new(); vocab.len()];
    let mut lagged = vec![Vec::new(); vocab.len()];
    for (i, e) in edges.iter().enumerate() {
        let s = vocab.index_of(&e.src).expect("checked above");
        let d = vocab.index_of(&e.dst).expect("checked above");
        endpoints.push((s, d));
        by_type.entry(e.etype).or_default().push(i);
        if let EdgeType::Cross { delta, .. } = e.etype {
            let list = if delta == 0 { &mut assoc0 } else { &mut lagged };
            if !list[s].contains(&d) {
                list[s].push(d);
            }
        }
    }
    Ok(ClinicalGraph {
        vocab,
        edges,
        by_type,
        endpoints,
        assoc0,
        lagged,
    })
}

impl ClinicalGraph {
    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Hierarchy edges first, then cross edges.
    pub fn edges(&self) -> &[TypedEdge] {
        &self.edges
    }

    /// `(src, dst)` vocabulary indices, parallel to [`Self::edges`].
    pub fn endpoints(&self) -> &[(usize, usize)] {
        &self.endpoints
    }

    pub fn edge_types(&self) -> impl Iterator<Item = EdgeType> + '_ {
        self.by_type.keys().copied()
    }

    pub fn edges_of_type(&self, t: EdgeType) -> impl Iterator<Item = &TypedEdge> {
        self.by_type
            .get(&t)
            .into_iter()
            .flatten()
            .map(|&i| &self.edges[i])
    }

    pub fn hier_edges(&self) -> impl Iterator<Item = &TypedEdge> {
        self.edges.iter().filter(|e| e.etype.kind() == EdgeKind::Hier)
    }

    pub fn cross_edges(&self) -> impl Iterator<Item = &TypedEdge> {
        self.edges.iter().filter(|e| e.etype.kind() == EdgeKind::Cross)
    }

    pub fn children(&self, i: usize) -> &[usize] {
        self.vocab.children(i)
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.vocab.parent(i)
    }

    /// Δ = 0 cross-modal neighbours.
    pub fn assoc0(&self, i: usize) -> &[usize] {
        &self.assoc0[i]
    }

    /// Outgoing Δ > 0 neighbours.
    pub fn lagged(&self, i: usize) -> &[usize] {
        &self.lagged[i]
    }
}

/// Vocabulary → hierarchy edges → stable cross edges → graph. When a split
/// manifest is given, every patient must belong to its training split.
pub fn build_graph(
    train: &Cohort,
    manifest: Option<&SplitManifest>,
    cfg: &GraphConfig,
) -> Result<ClinicalGraph, GraphError> {
    check_leakage(train, manifest)?;
    build_graph_with(train, manifest, build_vocabulary(train)?, cfg)
}

/// As [`build_graph`] over a given vocabulary.
pub fn build_graph_with(
    train: &Cohort,
    manifest: Option<&SplitManifest>,
    vocab: Vocabulary,
    cfg: &GraphConfig,
) -> Result<ClinicalGraph, GraphError> {
    check_leakage(train, manifest)?;
    let hier = build_hierarchy_edges(&vocab);
    let cross = bootstrap_stability(train, cfg)?;
    assemble_graph(vocab, hier, cross)
}

fn check_leakage(train: &Cohort, manifest: Option<&SplitManifest>) -> Result<(), GraphError> {
    if let Some(m) = manifest {
        if let Some(p) = train.patient_ids().into_iter().find(|p| !m.train.contains(*p)) {
            return Err(GraphError::Leakage(p.to_owned()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File formats
// ---------------------------------------------------------------------------

const VOCAB_HEADER: &str = "id\tmodality\tlevel\tparent\tdescription";

pub fn write_vocab<W: Write>(vocab: &Vocabulary, mut w: W) -> std::io::Result<()> {
    writeln!(w, "{VOCAB_HEADER}")?;
    for c in vocab.concepts() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            c.id,
            c.modality,
            c.level,
            c.parent.as_deref().unwrap_or(""),
            c.description.replace(['\t', '\n'], " ")
        )?;
    }
    Ok(())
}

pub fn read_vocab<R: BufRead>(r: R) -> Result<Vocabulary, GraphError> {
    let mut concepts = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line == VOCAB_HEADER || line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse = |message: String| GraphError::Parse {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 5 {
            return Err(parse(format!("expected 5 fields, found {}", f.len())));
        }
        concepts.push(Concept {
            id: f[0].to_owned(),
            modality: f[1].parse().map_err(parse)?,
            level: f[2].parse().map_err(|e| parse(format!("level: {e}")))?,
            parent: (!f[3].is_empty()).then(|| f[3].to_owned()),
            description: f[4].to_owned(),
        });
    }
    Vocabulary::from_concepts(concepts)
}

fn opt<T: fmt::Display>(v: Option<T>) -> String {
    v.map_or_else(|| "NA".to_owned(), |v| v.to_string())
}

/// One `#`-prefixed header line echoing `header`, then one row per edge:
/// `src dst kind src_mod dst_mod delta pmi support stability`.
pub fn write_graph<W: Write>(graph: &ClinicalGraph, header: &str, mut w: W) -> std::io::Result<()> {
    writeln!(w, "# {}", header.replace('\n', " "))?;
    for e in graph.edges() {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            e.src,
            e.dst,
            e.etype.kind(),
            e.etype.src_modality(),
            e.etype.dst_modality(),
            e.etype.delta(),
            opt(e.pmi),
            opt(e.support),
            opt(e.stability)
        )?;
    }
    Ok(())
}

/// Parse a graph file against its vocabulary. Returns the header text too.
pub fn read_graph<R: BufRead>(vocab: Vocabulary, r: R) -> Result<(ClinicalGraph, String), GraphError> {
    let mut header = String::new();
    let mut hier = Vec::new();
    let mut cross = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if let Some(h) = line.strip_prefix('#') {
            if header.is_empty() {
                header = h.trim().to_owned();
            }
            continue;
        }
        if line.is_empty() {
            continue;
        }
        let parse = |message: String| GraphError::Parse {
            line: i + 1,
            message,
        };
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(parse(format!("expected 9 fields, found {}", f.len())));
        }
        let src_m: Modality = f[3].parse().map_err(parse)?;
        let dst_m: Modality = f[4].parse().map_err(parse)?;
        let delta: u32 = f[5].parse().map_err(|e| parse(format!("delta: {e}")))?;
        let num = |s: &str| -> Result<Option<f64>, GraphError> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|e| parse(format!("{s:?}: {e}")))
            }
        };
        let support = match f[7] {
            "NA" => None,
            s => Some(s.parse().map_err(|e| parse(format!("support: {e}")))?),
        };
        let (etype, list) = match f[2] {
            "hier" => (EdgeType::Hier(src_m), &mut hier),
            "cross" => (
                EdgeType::Cross {
                    src: src_m,
                    dst: dst_m,
                    delta,
                },
                &mut cross,
            ),
            other => return Err(parse(format!("unknown edge kind {other:?}"))),
        };
        list.push(TypedEdge {
            src: f[0].to_owned(),
            dst: f[1].to_owned(),
            etype,
            pmi: num(f[6])?,
            support,
            stability: num(f[8])?,
        });
    }
    Ok((assemble_graph(vocab, hier, cross)?, header))
}
