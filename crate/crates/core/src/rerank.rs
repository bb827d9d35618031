//! Score fusion over a Risk Horizon with an optional external scorer.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central_event::CentralEvent;
use crate::corpus::{Modality, PlantedRule, Visit};
use crate::graph::Vocabulary;
use crate::retrieval::RiskHorizon;

#[derive(Debug, Error)]
pub enum ScorerError {
    #[error("scorer transport failed: {0}")]
    Transport(String),
    #[error("malformed scorer response: {0}")]
    Malformed(String),
    #[error("cannot load rules from {path}: {message}")]
    Rules { path: String, message: String },
    #[error("invalid scorer spec {0:?}")]
    BadSpec(String),
    #[error("remote scorer needs an endpoint")]
    NoEndpoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub modality: Modality,
    pub id: String,
    pub desc: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerRequest {
    pub history: String,
    pub candidates: Vec<Candidate>,
    /// Code sets of the history visits, oldest first. In-process only.
    #[serde(skip)]
    pub recent: Vec<BTreeSet<String>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScorerResponse {
    pub scores: BTreeMap<String, f64>,
}

pub trait Scorer: Sync {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, ScorerError>;
}

/// Scorer selection as written in config: `none`, `mock:<seed>`,
/// `oracle:<rules-file>` or `remote`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub enum ScorerKind {
    #[default]
    None,
    Mock(u64),
    Oracle(PathBuf),
    Remote,
}

impl fmt::Display for ScorerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ScorerKind::None => f.write_str("none"),
            ScorerKind::Mock(s) => write!(f, "mock:{s}"),
            ScorerKind::Oracle(p) => write!(f, "oracle:{}", p.display()),
            ScorerKind::Remote => f.write_str("remote"),
        }
    }
}

impl FromStr for ScorerKind {
    type Err = ScorerError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScorerError::BadSpec(s.to_owned());
        match s.split_once(':') {
            None if s == "none" => Ok(ScorerKind::None),
            None if s == "remote" => Ok(ScorerKind::Remote),
            Some(("mock", seed)) => seed.parse().map(ScorerKind::Mock).map_err(|_| bad()),
            Some(("oracle", path)) if !path.is_empty() => Ok(ScorerKind::Oracle(path.into())),
            _ => Err(bad()),
        }
    }
}

impl Serialize for ScorerKind {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for ScorerKind {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub lambda: f64,
    pub k: usize,
    pub scorer: ScorerKind,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub api_key_env: String,
    /// Character budget of the compressed history.
    pub history_budget: usize,
}

impl Default for RerankConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            k: 10,
            scorer: ScorerKind::None,
            endpoint: None,
            timeout_secs: 30,
            api_key_env: "HORIZON_SCORER_KEY".into(),
            history_budget: 2000,
        }
    }
}

impl RerankConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(format!("lambda {} outside [0, 1]", self.lambda));
        }
        if self.k == 0 {
            return Err("k must be at least 1".into());
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scorers
// ---------------------------------------------------------------------------

/// Deterministic pseudo-random scores in `[0, 1)` keyed by seed and id.
#[derive(Debug, Clone)]
pub struct MockScorer {
    pub seed: u64,
}

fn mix(seed: u64, id: &str) -> f64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    // splitmix64 finaliser
    h ^= h >> 30;
    h = h.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h ^= h >> 27;
    h = h.wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^= h >> 31;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl Scorer for MockScorer {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, ScorerError> {
        Ok(ScorerResponse {
            scores: req
                .candidates
                .iter()
                .map(|c| (c.id.clone(), mix(self.seed, &c.id)))
                .collect(),
        })
    }
}

/// Scores 1 for a candidate that a rule predicts from the history, else 0.
#[derive(Debug, Clone)]
pub struct OracleScorer {
    pub rules: Vec<PlantedRule>,
}

impl OracleScorer {
    pub fn from_file(path: &std::path::Path) -> Result<Self, ScorerError> {
        let err = |message: String| ScorerError::Rules {
            path: path.display().to_string(),
            message,
        };
        let text = std::fs::read_to_string(path).map_err(|e| err(e.to_string()))?;
        let rules = serde_json::from_str(&text).map_err(|e| err(e.to_string()))?;
        Ok(Self { rules })
    }
}

impl Scorer for OracleScorer {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, ScorerError> {
        let n = req.recent.len();
        let fired: BTreeSet<&str> = self
            .rules
            .iter()
            .filter(|r| r.delta >= 1 && r.delta <= n && req.recent[n - r.delta].contains(&r.src))
            .map(|r| r.dst.as_str())
            .collect();
        Ok(ScorerResponse {
            scores: req
                .candidates
                .iter()
                .map(|c| (c.id.clone(), if fired.contains(c.id.as_str()) { 1.0 } else { 0.0 }))
                .collect(),
        })
    }
}

/// JSON over HTTP POST.
#[derive(Debug)]
pub struct RemoteScorer {
    agent: ureq::Agent,
    endpoint: String,
    api_key: Option<String>,
}

impl RemoteScorer {
    pub fn new(endpoint: String, timeout: Duration, api_key: Option<String>) -> Self {
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .build()
            .into();
        Self {
            agent,
            endpoint,
            api_key,
        }
    }
}

impl Scorer for RemoteScorer {
    fn score(&self, req: &ScorerRequest) -> Result<ScorerResponse, ScorerError> {
        let mut call = self.agent.post(&self.endpoint);
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = call
            .send_json(req)
            .map_err(|e| ScorerError::Transport(e.to_string()))?;
        resp.body_mut()
            .read_json::<ScorerResponse>()
            .map_err(|e| ScorerError::Malformed(e.to_string()))
    }
}

/// Instantiates the configured scorer; `None` for the geometric-only path.
pub fn make_scorer(cfg: &RerankConfig) -> Result<Option<Box<dyn Scorer>>, ScorerError> {
    Ok(match &cfg.scorer {
        ScorerKind::None => None,
        ScorerKind::Mock(seed) => Some(Box::new(MockScorer { seed: *seed })),
        ScorerKind::Oracle(path) => Some(Box::new(OracleScorer::from_file(path)?)),
        ScorerKind::Remote => {
            let endpoint = cfg.endpoint.clone().ok_or(ScorerError::NoEndpoint)?;
            let key = std::env::var(&cfg.api_key_env).ok();
            Some(Box::new(RemoteScorer::new(
                endpoint,
                Duration::from_secs(cfg.timeout_secs),
                key,
            )))
        }
    })
}

// ---------------------------------------------------------------------------
// History and fusion
// ---------------------------------------------------------------------------

const ELLIPSIS: &str = "...";

/// One line per visit, oldest first, within `budget` characters. Oldest
/// lines are dropped first; a newest line that alone exceeds the budget is
/// truncated with an ellipsis.
pub fn compress_history(
    visits: &[Visit],
    events: &[CentralEvent],
    vocab: &Vocabulary,
    budget: usize,
) -> String {
    let lines: Vec<String> = visits
        .iter()
        .zip(events)
        .map(|(v, ev)| {
            let desc = vocab
                .get(&ev.representative)
                .map_or(ev.representative.as_str(), |c| c.description.as_str());
            let top: Vec<&str> = ev.top(5).iter().map(|(id, _)| id.as_str()).collect();
            format!(
                "t={}: {desc} (p={:.2}); top codes: {}",
                v.t,
                ev.prob(&ev.representative),
                top.join(", ")
            )
        })
        .collect();
    let Some(newest) = lines.last() else {
        return String::new();
    };
    let newest_len = newest.chars().count();
    if newest_len > budget {
        let keep = budget.saturating_sub(ELLIPSIS.len());
        let mut out: String = newest.chars().take(keep).collect();
        out.push_str(ELLIPSIS);
        return out;
    }
    let mut used = newest_len;
    let mut first = lines.len() - 1;
    while first > 0 {
        let extra = lines[first - 1].chars().count() + 1;
        if used + extra > budget {
            break;
        }
        used += extra;
        first -= 1;
    }
    lines[first..].join("\n")
}

/// Min-max scaling to `[0, 1]`; a constant list maps to 0.5.
pub fn normalize_scores(scores: &[f64]) -> Vec<f64> {
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    scores
        .iter()
        .map(|s| if span > 0.0 { (s - lo) / span } else { 0.5 })
        .collect()
}

pub fn combine(s_llm: f64, s_geo: f64, lambda: f64) -> f64 {
    lambda * s_llm + (1.0 - lambda) * s_geo
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    /// Per modality, fused score descending.
    pub lists: BTreeMap<Modality, Vec<(String, f64)>>,
    /// The scorer failed and fusion fell back to geometry alone.
    pub degraded: bool,
    /// Scorer ids outside the horizon.
    pub rejected: Vec<String>,
}

impl Prediction {
    pub fn list(&self, m: Modality) -> &[(String, f64)] {
        self.lists.get(&m).map_or(&[], Vec::as_slice)
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.lists.values().flatten().map(|(id, _)| id.as_str())
    }
}

/// Candidates for the scorer: every horizon member with its description.
pub fn scorer_request(
    horizon: &RiskHorizon,
    vocab: &Vocabulary,
    history: String,
    recent: Vec<BTreeSet<String>>,
) -> ScorerRequest {
    let candidates = horizon
        .lists
        .iter()
        .flat_map(|(m, list)| {
            list.iter().map(move |r| Candidate {
                modality: *m,
                id: r.id.clone(),
                desc: vocab.get(&r.id).map(|c| c.description.clone()).unwrap_or_default(),
            })
        })
        .collect();
    ScorerRequest {
        history,
        candidates,
        recent,
    }
}

/// Fused top-k per modality over horizon members only. Without a scorer, or
/// when it fails or omits a candidate, fusion runs with `λ = 0`.
pub fn predict_next_visit(
    horizon: &RiskHorizon,
    request: &ScorerRequest,
    scorer: Option<&dyn Scorer>,
    cfg: &RerankConfig,
) -> Prediction {
    let mut degraded = false;
    let mut rejected = Vec::new();
    let mut llm: Option<BTreeMap<String, f64>> = None;
    if let (Some(s), true) = (scorer, cfg.lambda > 0.0) {
        match s.score(request) {
            Ok(resp) => {
                let members = horizon.ids();
                let mut scores = BTreeMap::new();
                for (id, v) in resp.scores {
                    if !members.contains(id.as_str()) {
                        rejected.push(id);
                    } else if v.is_finite() {
                        scores.insert(id, v);
                    }
                }
                if members.iter().all(|id| scores.contains_key(*id)) {
                    llm = Some(scores);
                } else {
                    log::warn!("scorer left candidates unscored; using geometric scores");
                    degraded = true;
                }
            }
            Err(e) => {
                log::warn!("scorer failed ({e}); using geometric scores");
                degraded = true;
            }
        }
    }
    let lambda = if llm.is_some() { cfg.lambda } else { 0.0 };
    let lists = horizon
        .lists
        .iter()
        .map(|(m, list)| {
            let geo = normalize_scores(&list.iter().map(|r| r.score).collect::<Vec<_>>());
            let mut fused: Vec<(String, f64)> = match &llm {
                None => list.iter().zip(geo).map(|(r, g)| (r.id.clone(), g)).collect(),
                Some(scores) => {
                    let raw: Vec<f64> = list.iter().map(|r| scores[&r.id]).collect();
                    let sem = normalize_scores(&raw);
                    list.iter()
                        .zip(geo.iter().zip(sem))
                        .map(|(r, (g, s))| (r.id.clone(), combine(s, *g, lambda)))
                        .collect()
                }
            };
            if llm.is_some() {
                // stable: equal fused scores keep retrieval order
                fused.sort_by(|a, b| b.1.total_cmp(&a.1));
            }
            fused.truncate(cfg.k);
            (*m, fused)
        })
        .collect();
    Prediction {
        lists,
        degraded,
        rejected,
    }
}

/// Fractions of predicted ids inside `history ∪ horizon` and outside both.
pub fn grounding_audit<'a>(
    predictions: impl IntoIterator<Item = &'a str>,
    history: &BTreeSet<String>,
    horizon: &RiskHorizon,
) -> (f64, f64) {
    let members = horizon.ids();
    let (mut n, mut grounded) = (0usize, 0usize);
    for id in predictions {
        n += 1;
        if history.contains(id) || members.contains(id) {
            grounded += 1;
        }
    }
    if n == 0 {
        return (0.0, 0.0);
    }
    let g = grounded as f64 / n as f64;
    (g, 1.0 - g)
}
