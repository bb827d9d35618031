//! Longitudinal multi-modal trajectories: data model, cohort file format,
//! filtering, patient-level splits and a synthetic cohort generator.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::graph::{Concept, Vocabulary};
use crate::util::seeded_rng;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("duplicate patient_id {0:?}")]
    DuplicatePatient(String),
    #[error("patient {patient}: visit time index {t} repeated")]
    DuplicateVisit { patient: String, t: u32 },
    #[error("patient {0:?} has no visits")]
    NoVisits(String),
    #[error("cohort is empty after filtering")]
    EmptyCohort,
    #[error("invalid split: {0}")]
    InvalidSplit(String),
    #[error("invalid synthetic spec: {0}")]
    InvalidSynthSpec(String),
}

/// The four event types of a visit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Dx,
    Proc,
    Med,
    Lab,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Dx, Modality::Proc, Modality::Med, Modality::Lab];

    #[inline]
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Dx => "dx",
            Modality::Proc => "proc",
            Modality::Med => "med",
            Modality::Lab => "lab",
        }
    }

    pub fn long_name(self) -> &'static str {
        match self {
            Modality::Dx => "diagnosis",
            Modality::Proc => "procedure",
            Modality::Med => "medication",
            Modality::Lab => "laboratory test",
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Modality {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "dx" => Ok(Modality::Dx),
            "proc" => Ok(Modality::Proc),
            "med" => Ok(Modality::Med),
            "lab" => Ok(Modality::Lab),
            other => Err(format!("unknown modality {other:?}")),
        }
    }
}

/// One visit: a set of codes per modality plus an optional designated
/// primary diagnosis.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Visit {
    pub t: u32,
    pub codes: [BTreeSet<String>; 4],
    pub primary: Option<String>,
}

impl Visit {
    pub fn new(t: u32) -> Self {
        Self {
            t,
            ..Default::default()
        }
    }

    pub fn codes(&self, m: Modality) -> &BTreeSet<String> {
        &self.codes[m.index()]
    }

    pub fn insert(&mut self, m: Modality, code: impl Into<String>) -> bool {
        self.codes[m.index()].insert(code.into())
    }

    /// All codes across modalities, modality-major.
    pub fn all_codes(&self) -> impl Iterator<Item = (Modality, &str)> {
        Modality::ALL
            .into_iter()
            .flat_map(move |m| self.codes[m.index()].iter().map(move |c| (m, c.as_str())))
    }

    pub fn len(&self) -> usize {
        self.codes.iter().map(BTreeSet::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.iter().all(BTreeSet::is_empty)
    }

    pub fn contains(&self, m: Modality, code: &str) -> bool {
        self.codes[m.index()].contains(code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trajectory {
    pub patient_id: String,
    pub visits: Vec<Visit>,
}

/// A set of trajectories with per-code visit frequencies.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    trajectories: Vec<Trajectory>,
    code_frequency: BTreeMap<String, usize>,
}

impl Cohort {
    /// Validates ordering and uniqueness, sorting visits by time index.
    pub fn new(mut trajectories: Vec<Trajectory>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for tr in &mut trajectories {
            if !seen.insert(tr.patient_id.clone()) {
                return Err(CorpusError::DuplicatePatient(tr.patient_id.clone()));
            }
            if tr.visits.is_empty() {
                return Err(CorpusError::NoVisits(tr.patient_id.clone()));
            }
            tr.visits.sort_by_key(|v| v.t);
            for w in tr.visits.windows(2) {
                if w[0].t == w[1].t {
                    return Err(CorpusError::DuplicateVisit {
                        patient: tr.patient_id.clone(),
                        t: w[0].t,
                    });
                }
            }
        }
        let code_frequency = frequencies(&trajectories);
        Ok(Self {
            trajectories,
            code_frequency,
        })
    }

    pub fn trajectories(&self) -> &[Trajectory] {
        &self.trajectories
    }

    pub fn into_trajectories(self) -> Vec<Trajectory> {
        self.trajectories
    }

    /// Number of visits containing each code.
    pub fn code_frequency(&self) -> &BTreeMap<String, usize> {
        &self.code_frequency
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    pub fn num_visits(&self) -> usize {
        self.trajectories.iter().map(|t| t.visits.len()).sum()
    }

    pub fn patient_ids(&self) -> BTreeSet<&str> {
        self.trajectories.iter().map(|t| t.patient_id.as_str()).collect()
    }

    pub fn get(&self, patient_id: &str) -> Option<&Trajectory> {
        self.trajectories.iter().find(|t| t.patient_id == patient_id)
    }

    /// Sub-cohort with the given patients, in this cohort's order.
    pub fn select(&self, ids: &BTreeSet<String>) -> Result<Cohort, CorpusError> {
        Cohort::new(
            self.trajectories
                .iter()
                .filter(|t| ids.contains(&t.patient_id))
                .cloned()
                .collect(),
        )
    }
}

fn frequencies(trajectories: &[Trajectory]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for tr in trajectories {
        for v in &tr.visits {
            for (_, c) in v.all_codes() {
                *freq.entry(c.to_owned()).or_insert(0) += 1;
            }
        }
    }
    freq
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawVisit {
    t: u32,
    #[serde(default)]
    dx: Vec<String>,
    #[serde(default)]
    proc: Vec<String>,
    #[serde(default)]
    med: Vec<String>,
    #[serde(default)]
    lab: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    primary: Option<String>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTrajectory {
    patient_id: String,
    visits: Vec<RawVisit>,
}

impl From<RawVisit> for Visit {
    fn from(r: RawVisit) -> Self {
        Visit {
            t: r.t,
            codes: [
                r.dx.into_iter().collect(),
                r.proc.into_iter().collect(),
                r.med.into_iter().collect(),
                r.lab.into_iter().collect(),
            ],
            primary: r.primary,
        }
    }
}

impl From<&Visit> for RawVisit {
    fn from(v: &Visit) -> Self {
        let list = |m: Modality| v.codes(m).iter().cloned().collect();
        RawVisit {
            t: v.t,
            dx: list(Modality::Dx),
            proc: list(Modality::Proc),
            med: list(Modality::Med),
            lab: list(Modality::Lab),
            primary: v.primary.clone(),
        }
    }
}

/// Parse a cohort from line-delimited JSON records. Blank lines and `#`
/// header lines are skipped.
pub fn parse_cohort<R: BufRead>(reader: R) -> Result<Cohort, CorpusError> {
    let mut trajectories = Vec::new();
    let mut seen = BTreeSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let raw: RawTrajectory = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        if !seen.insert(raw.patient_id.clone()) {
            return Err(CorpusError::DuplicatePatient(raw.patient_id));
        }
        trajectories.push(Trajectory {
            patient_id: raw.patient_id,
            visits: raw.visits.into_iter().map(Visit::from).collect(),
        });
    }
    Cohort::new(trajectories)
}

pub fn load_cohort(path: impl AsRef<Path>) -> Result<Cohort, CorpusError> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_cohort(BufReader::new(file))
}

/// Serialise one record per line; output is canonical (sorted sets, fixed keys).
pub fn write_cohort<W: Write>(cohort: &Cohort, mut w: W) -> std::io::Result<()> {
    for tr in cohort.trajectories() {
        let raw = RawTrajectory {
            patient_id: tr.patient_id.clone(),
            visits: tr.visits.iter().map(RawVisit::from).collect(),
        };
        serde_json::to_writer(&mut w, &raw)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn save_cohort(cohort: &Cohort, path: impl AsRef<Path>) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io = |source| CorpusError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut f = std::io::BufWriter::new(File::create(path).map_err(io)?);
    write_cohort(cohort, &mut f).map_err(io)?;
    f.flush().map_err(io)
}

/// Drop codes seen in fewer than `min_code_freq` visits, then visits left
/// empty, then trajectories shorter than `min_visits`. Frequencies are taken
/// once from the input; there is no fixpoint iteration.
pub fn filter_cohort(
    cohort: &Cohort,
    min_visits: usize,
    min_code_freq: usize,
) -> Result<Cohort, CorpusError> {
    let keep: BTreeSet<String> = cohort
        .code_frequency()
        .iter()
        .filter(|(_, &n)| n >= min_code_freq)
        .map(|(c, _)| c.clone())
        .collect();
    restrict_codes(cohort, &keep, min_visits)
}

/// Keep only codes in `allowed`; used to carry a training-split code
/// vocabulary over to held-out splits.
pub fn restrict_codes(
    cohort: &Cohort,
    allowed: &BTreeSet<String>,
    min_visits: usize,
) -> Result<Cohort, CorpusError> {
    let mut out = Vec::new();
    for tr in cohort.trajectories() {
        let visits: Vec<Visit> = tr
            .visits
            .iter()
            .map(|v| {
                let mut nv = Visit::new(v.t);
                for m in Modality::ALL {
                    nv.codes[m.index()] = v
                        .codes(m)
                        .iter()
                        .filter(|c| allowed.contains(*c))
                        .cloned()
                        .collect();
                }
                nv.primary = v.primary.clone().filter(|p| allowed.contains(p));
                nv
            })
            .filter(|v| !v.is_empty())
            .collect();
        if visits.len() >= min_visits.max(1) {
            out.push(Trajectory {
                patient_id: tr.patient_id.clone(),
                visits,
            });
        }
    }
    if out.is_empty() {
        return Err(CorpusError::EmptyCohort);
    }
    Cohort::new(out)
}

/// Patient-level split configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    /// (train, val, test)
    pub fractions: [f64; 3],
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            fractions: [0.8, 0.1, 0.1],
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        if self.fractions.iter().any(|f| !(f.is_finite() && *f > 0.0)) {
            return Err(CorpusError::InvalidSplit("fractions must be positive".into()));
        }
        let sum: f64 = self.fractions.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CorpusError::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }
}

/// Which patients went where; written next to the split cohorts so later
/// stages can refuse held-out patients.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: BTreeSet<String>,
    pub val: BTreeSet<String>,
    pub test: BTreeSet<String>,
}

impl SplitManifest {
    pub fn from_cohorts(seed: u64, train: &Cohort, val: &Cohort, test: &Cohort) -> Self {
        let ids = |c: &Cohort| c.patient_ids().into_iter().map(str::to_owned).collect();
        Self {
            seed,
            train: ids(train),
            val: ids(val),
            test: ids(test),
        }
    }
}

/// Deterministic patient-disjoint (train, val, test) split.
pub fn split_by_patient(
    cohort: &Cohort,
    spec: &SplitSpec,
) -> Result<(Cohort, Cohort, Cohort), CorpusError> {
    spec.validate()?;
    let n = cohort.len();
    if n < 3 {
        return Err(CorpusError::InvalidSplit(format!(
            "need at least 3 patients, have {n}"
        )));
    }
    let mut ids: Vec<&str> = cohort.patient_ids().into_iter().collect();
    ids.shuffle(&mut seeded_rng(spec.seed, 0x5e11));
    let mut n_train = ((n as f64) * spec.fractions[0]).round() as usize;
    let mut n_val = ((n as f64) * spec.fractions[1]).round() as usize;
    n_train = n_train.clamp(1, n - 2);
    n_val = n_val.clamp(1, n - n_train - 1);
    let pick = |range: std::ops::Range<usize>| -> BTreeSet<String> {
        ids[range].iter().map(|s| (*s).to_owned()).collect()
    };
    let train = pick(0..n_train);
    let val = pick(n_train..n_train + n_val);
    let test = pick(n_train + n_val..n);
    Ok((cohort.select(&train)?, cohort.select(&val)?, cohort.select(&test)?))
}

// ---------------------------------------------------------------------------
// Synthetic cohorts
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TreeShape {
    pub branching: usize,
    /// Level of the leaves; the root is level 0.
    pub depth: usize,
}

/// A lagged association `src at t => dst at t + delta` that fires with `prob`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlantedRule {
    pub src: String,
    pub dst: String,
    pub delta: usize,
    pub prob: f64,
}

/// Rules drawn by the generator instead of listed explicitly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomRules {
    pub count: usize,
    pub delta: usize,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSpec {
    pub patients: usize,
    pub tree: TreeShape,
    pub tree_overrides: BTreeMap<Modality, TreeShape>,
    pub visits_min: usize,
    pub visits_max: usize,
    /// Codes drawn per modality per visit, inclusive range.
    pub codes_min: [usize; 4],
    pub codes_max: [usize; 4],
    pub zipf_exponent: f64,
    /// Probability that a dx code is drawn from the visit's topic subtree.
    pub topic_strength: f64,
    pub rules: Vec<PlantedRule>,
    pub random_rules: Option<RandomRules>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            patients: 2000,
            tree: TreeShape {
                branching: 5,
                depth: 3,
            },
            tree_overrides: BTreeMap::new(),
            visits_min: 3,
            visits_max: 8,
            codes_min: [1, 1, 1, 1],
            codes_max: [3, 2, 3, 3],
            zipf_exponent: 0.3,
            topic_strength: 0.8,
            rules: Vec::new(),
            random_rules: Some(RandomRules {
                count: 10,
                delta: 1,
                prob: 0.9,
            }),
        }
    }
}

impl SynthSpec {
    pub fn shape(&self, m: Modality) -> TreeShape {
        self.tree_overrides.get(&m).copied().unwrap_or(self.tree)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |msg: String| Err(CorpusError::InvalidSynthSpec(msg));
        if self.patients == 0 {
            return bad("patients must be positive".into());
        }
        for m in Modality::ALL {
            let s = self.shape(m);
            if s.branching == 0 || s.depth == 0 {
                return bad(format!("{m}: branching and depth must be positive"));
            }
            if s.branching.checked_pow(s.depth as u32).is_none_or(|n| n > 1_000_000) {
                return bad(format!("{m}: tree too large"));
            }
            if self.codes_min[m.index()] > self.codes_max[m.index()] {
                return bad(format!("{m}: codes_min > codes_max"));
            }
        }
        if self.visits_min == 0 || self.visits_min > self.visits_max {
            return bad("need 1 <= visits_min <= visits_max".into());
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent >= 0.0) {
            return bad("zipf_exponent must be >= 0".into());
        }
        if !(0.0..=1.0).contains(&self.topic_strength) {
            return bad("topic_strength must lie in [0, 1]".into());
        }
        let deltas = self
            .rules
            .iter()
            .map(|r| (r.delta, r.prob))
            .chain(self.random_rules.iter().map(|r| (r.delta, r.prob)));
        for (delta, prob) in deltas {
            if delta >= self.visits_max {
                return bad(format!(
                    "rule lag {delta} >= maximum visit count {}",
                    self.visits_max
                ));
            }
            if !(0.0..=1.0).contains(&prob) {
                return bad(format!("rule probability {prob} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Generator output: the cohort plus its ground truth.
#[derive(Debug, Clone)]
pub struct SyntheticCohort {
    pub cohort: Cohort,
    /// The full generating trees, including leaves never drawn.
    pub vocab: Vocabulary,
    pub rules: Vec<PlantedRule>,
    /// Per patient, per visit: the dx topic node the visit was drawn around.
    pub topics: BTreeMap<String, Vec<Option<String>>>,
}

/// Level-1 path segment: A..Z, then AA, AB, ...
fn letter_label(mut i: usize) -> String {
    let mut out = Vec::new();
    loop {
        out.push(b'A' + (i % 26) as u8);
        if i < 26 {
            break;
        }
        i = i / 26 - 1;
    }
    out.reverse();
    String::from_utf8(out).expect("ascii")
}

pub(crate) fn root_id(m: Modality) -> String {
    format!("{m}:ROOT")
}

/// All nodes of a full tree as concepts, level by level.
fn synthetic_tree(m: Modality, shape: TreeShape) -> Vec<Concept> {
    let root = Concept {
        id: root_id(m),
        modality: m,
        level: 0,
        parent: None,
        description: format!("{} root", m.long_name()),
    };
    let mut out = vec![root];
    let mut frontier: Vec<(String, Option<String>)> = vec![(root_id(m), None)];
    for level in 1..=shape.depth {
        let mut next = Vec::new();
        for (parent_id, path) in &frontier {
            for k in 0..shape.branching {
                let seg = if level == 1 {
                    letter_label(k)
                } else {
                    (k + 1).to_string()
                };
                let p = match path {
                    Some(p) => format!("{p}.{seg}"),
                    None => seg,
                };
                let id = format!("{m}:{p}");
                out.push(Concept {
                    id: id.clone(),
                    modality: m,
                    level: level as u32,
                    parent: Some(parent_id.clone()),
                    description: format!("{} {p}", m.long_name()),
                });
                next.push((id, Some(p)));
            }
        }
        frontier = next;
    }
    out
}

struct ModalitySampler {
    leaves: Vec<String>,
    background: WeightedIndex<f64>,
    /// Leaf indices grouped by level-1 ancestor.
    topics: Vec<(String, Vec<usize>)>,
    /// Leaf indices from most to least frequent.
    rank_order: Vec<usize>,
}

/// Generate a cohort with planted lagged rules over a Zipf background.
///
/// Codes of different modalities are drawn independently, so the only
/// cross-modal dependencies are the planted rules. dx codes additionally
/// cluster around a per-visit topic (a level-1 dx node) when
/// `topic_strength > 0`; the first dx code drawn is the visit's primary label.
pub fn generate_synthetic(spec: &SynthSpec, seed: u64) -> Result<SyntheticCohort, CorpusError> {
    spec.validate()?;
    let mut rng = seeded_rng(seed, 0x5917);

    let mut concepts = Vec::new();
    let mut samplers = Vec::new();
    for m in Modality::ALL {
        let shape = spec.shape(m);
        let tree = synthetic_tree(m, shape);
        let leaves: Vec<String> = tree
            .iter()
            .filter(|c| c.level as usize == shape.depth)
            .map(|c| c.id.clone())
            .collect();
        let mut ranks: Vec<usize> = (0..leaves.len()).collect();
        ranks.shuffle(&mut rng);
        let mut weights = vec![0.0; leaves.len()];
        // ranks[r] is the leaf with Zipf rank r.
        for (r, &leaf) in ranks.iter().enumerate() {
            weights[leaf] = 1.0 / ((r + 1) as f64).powf(spec.zipf_exponent);
        }
        let background = WeightedIndex::new(&weights).expect("positive weights");
        let mut topics: Vec<(String, Vec<usize>)> = tree
            .iter()
            .filter(|c| c.level == 1)
            .map(|c| (c.id.clone(), Vec::new()))
            .collect();
        for (i, leaf) in leaves.iter().enumerate() {
            if let Some(slot) = topics
                .iter_mut()
                .find(|(t, _)| leaf == t || leaf.starts_with(&format!("{t}.")))
            {
                slot.1.push(i);
            }
        }
        concepts.extend(tree);
        samplers.push(ModalitySampler {
            leaves,
            background,
            topics,
            rank_order: ranks,
        });
    }
    let vocab = Vocabulary::from_concepts(concepts).expect("synthetic trees are well formed");

    let mut rules = spec.rules.clone();
    if let Some(rr) = &spec.random_rules {
        rules.extend(draw_rules(rr, &samplers, &rules, &mut rng));
    }
    for r in &rules {
        for id in [&r.src, &r.dst] {
            if vocab.get(id).is_none() {
                return Err(CorpusError::InvalidSynthSpec(format!(
                    "rule code {id} is not a synthetic concept"
                )));
            }
        }
    }

    let width = spec.patients.to_string().len().max(5);
    let mut trajectories = Vec::with_capacity(spec.patients);
    let mut topics = BTreeMap::new();
    for p in 0..spec.patients {
        let patient_id = format!("P{p:0width$}");
        let n_visits = rng.random_range(spec.visits_min..=spec.visits_max);
        let mut visits = Vec::with_capacity(n_visits);
        let mut visit_topics = Vec::with_capacity(n_visits);
        for t in 0..n_visits {
            let mut visit = Visit::new(t as u32);
            let mut topic = None;
            for m in Modality::ALL {
                let s = &samplers[m.index()];
                let k = rng.random_range(spec.codes_min[m.index()]..=spec.codes_max[m.index()]);
                let k = k.min(s.leaves.len());
                let topic_leaves = if m == Modality::Dx && spec.topic_strength > 0.0 {
                    let (id, members) = &s.topics[rng.random_range(0..s.topics.len())];
                    topic = Some(id.clone());
                    Some(members)
                } else {
                    None
                };
                let mut drawn = Vec::with_capacity(k);
                let mut attempts = 0;
                while drawn.len() < k && attempts < 50 * k.max(1) {
                    attempts += 1;
                    let idx = match topic_leaves {
                        Some(members) if rng.random::<f64>() < spec.topic_strength => {
                            members[rng.random_range(0..members.len())]
                        }
                        _ => s.background.sample(&mut rng),
                    };
                    if !drawn.contains(&idx) {
                        drawn.push(idx);
                    }
                }
                if m == Modality::Dx {
                    visit.primary = drawn.first().map(|&i| s.leaves[i].clone());
                }
                for i in drawn {
                    visit.insert(m, s.leaves[i].clone());
                }
            }
            if visit.is_empty() {
                let s = &samplers[Modality::Dx.index()];
                let leaf = s.leaves[s.background.sample(&mut rng)].clone();
                visit.primary = Some(leaf.clone());
                visit.insert(Modality::Dx, leaf);
            }
            visits.push(visit);
            visit_topics.push(topic);
        }
        for rule in &rules {
            let (src_m, dst_m) = (modality_of(&rule.src), modality_of(&rule.dst));
            for t in 0..n_visits.saturating_sub(rule.delta) {
                if visits[t].contains(src_m, &rule.src) && rng.random::<f64>() < rule.prob {
                    visits[t + rule.delta].insert(dst_m, rule.dst.clone());
                }
            }
        }
        topics.insert(patient_id.clone(), visit_topics);
        trajectories.push(Trajectory { patient_id, visits });
    }

    Ok(SyntheticCohort {
        cohort: Cohort::new(trajectories)?,
        vocab,
        rules,
        topics,
    })
}

fn modality_of(code: &str) -> Modality {
    code.split_once(':')
        .and_then(|(m, _)| m.parse().ok())
        .expect("synthetic codes carry a modality prefix")
}

/// Distinct-code rules cycling over ordered modality pairs. Sources come from
/// the most frequent quarter of their modality so the rule has support.
fn draw_rules(
    rr: &RandomRules,
    samplers: &[ModalitySampler],
    existing: &[PlantedRule],
    rng: &mut impl Rng,
) -> Vec<PlantedRule> {
    let pairs: Vec<(Modality, Modality)> = Modality::ALL
        .iter()
        .flat_map(|&a| Modality::ALL.iter().map(move |&b| (a, b)))
        .filter(|(a, b)| a != b)
        .collect();
    let mut used: BTreeSet<String> = existing
        .iter()
        .flat_map(|r| [r.src.clone(), r.dst.clone()])
        .collect();
    let mut out = Vec::new();
    for i in 0..rr.count {
        let (ms, md) = pairs[i % pairs.len()];
        let src_pool = &samplers[ms.index()];
        let top = (src_pool.rank_order.len() / 4).max(1);
        let src = (0..1000)
            .map(|_| src_pool.leaves[src_pool.rank_order[rng.random_range(0..top)]].clone())
            .find(|c| !used.contains(c));
        let dst_pool = &samplers[md.index()];
        let dst = (0..1000)
            .map(|_| dst_pool.leaves[rng.random_range(0..dst_pool.leaves.len())].clone())
            .find(|c| !used.contains(c));
        let (Some(src), Some(dst)) = (src, dst) else {
            break;
        };
        used.insert(src.clone());
        used.insert(dst.clone());
        out.push(PlantedRule {
            src,
            dst,
            delta: rr.delta,
            prob: rr.prob,
        });
    }
    out
}
