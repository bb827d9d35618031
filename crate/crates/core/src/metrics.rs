//! Ranking, hierarchy-aware and grounding metrics for next-visit predictions.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Modality;
use crate::graph::Vocabulary;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("unknown concept {0:?}")]
    UnknownConcept(String),
    #[error("{0:?} and {1:?} belong to different modalities")]
    CrossModality(String, String),
    #[error("no evaluable visits")]
    NothingToEvaluate,
}

/// `|top-k ∩ truth| / |truth|`; zero for an empty truth set.
pub fn recall_at_k<S: AsRef<str>>(predicted: &[S], truth: &BTreeSet<String>, k: usize) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = distinct_top(predicted, k)
        .filter(|p| truth.contains(*p))
        .count();
    hits as f64 / truth.len() as f64
}

/// First occurrences among the top `k` entries.
fn distinct_top<S: AsRef<str>>(predicted: &[S], k: usize) -> impl Iterator<Item = &str> {
    let mut seen = BTreeSet::new();
    predicted
        .iter()
        .take(k)
        .map(AsRef::as_ref)
        .filter(move |p| seen.insert(*p))
}

/// Binary-gain nDCG over the top `k`; zero for `k = 0` or an empty truth set.
pub fn ndcg_at_k<S: AsRef<str>>(predicted: &[S], truth: &BTreeSet<String>, k: usize) -> f64 {
    if truth.is_empty() || k == 0 {
        return 0.0;
    }
    let mut seen: BTreeSet<&str> = BTreeSet::new();
    let mut dcg = 0.0;
    for (i, p) in predicted.iter().take(k).enumerate() {
        let p = p.as_ref();
        if truth.contains(p) && seen.insert(p) {
            dcg += 1.0 / (i as f64 + 2.0).log2();
        }
    }
    let ideal: f64 = (0..truth.len().min(k))
        .map(|i| 1.0 / (i as f64 + 2.0).log2())
        .sum();
    dcg / ideal
}

/// One over the 1-based rank of `truth`, zero when absent.
pub fn reciprocal_rank<S: AsRef<str>>(predicted: &[S], truth: &str) -> f64 {
    predicted
        .iter()
        .position(|p| p.as_ref() == truth)
        .map_or(0.0, |i| 1.0 / (i as f64 + 1.0))
}

pub fn top_k_accuracy<S: AsRef<str>>(predicted: &[S], truth: &str, k: usize) -> f64 {
    if predicted.iter().take(k).any(|p| p.as_ref() == truth) {
        1.0
    } else {
        0.0
    }
}

/// Path length through the lowest common ancestor.
pub fn tree_distance(a: &str, b: &str, vocab: &Vocabulary) -> Result<u32, MetricsError> {
    let (i, j) = lookup_pair(a, b, vocab)?;
    let l = vocab
        .lca(i, j)
        .ok_or_else(|| MetricsError::CrossModality(a.to_owned(), b.to_owned()))?;
    let level = |x: usize| vocab.concept(x).level;
    Ok(level(i) + level(j) - 2 * level(l))
}

/// Whether the level-`l` ancestors coincide; `None` when either node is
/// shallower than `l`.
pub fn ancestor_match(
    a: &str,
    b: &str,
    l: u32,
    vocab: &Vocabulary,
) -> Result<Option<bool>, MetricsError> {
    let (i, j) = lookup_pair(a, b, vocab)?;
    Ok(match (vocab.ancestor_at(i, l), vocab.ancestor_at(j, l)) {
        (Some(x), Some(y)) => Some(x == y),
        _ => None,
    })
}

fn lookup_pair(a: &str, b: &str, vocab: &Vocabulary) -> Result<(usize, usize), MetricsError> {
    let find = |s: &str| {
        vocab
            .index_of(s)
            .ok_or_else(|| MetricsError::UnknownConcept(s.to_owned()))
    };
    let (i, j) = (find(a)?, find(b)?);
    if vocab.concept(i).modality != vocab.concept(j).modality {
        return Err(MetricsError::CrossModality(a.to_owned(), b.to_owned()));
    }
    Ok((i, j))
}

/// True/false positive and false negative counts.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl Confusion {
    /// Predicted set = scored ids at or above `threshold`.
    pub fn add(&mut self, scored: &[(String, f64)], truth: &BTreeSet<String>, threshold: f64) {
        let predicted: BTreeSet<&str> = scored
            .iter()
            .filter(|(_, s)| *s >= threshold)
            .map(|(id, _)| id.as_str())
            .collect();
        let tp = predicted.iter().filter(|p| truth.contains(**p)).count() as u64;
        self.tp += tp;
        self.fp += predicted.len() as u64 - tp;
        self.fn_ += truth.len() as u64 - tp;
    }

    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Scored predictions of one visit alongside its true codes.
pub type ScoredVisit<'a> = (&'a [(String, f64)], &'a BTreeSet<String>);

/// Micro-F1 over every (visit, code) decision at `threshold`.
pub fn micro_f1(visits: &[ScoredVisit<'_>], threshold: f64) -> f64 {
    let mut c = Confusion::default();
    for (scored, truth) in visits {
        c.add(scored, truth, threshold);
    }
    c.f1()
}

/// Grid of candidate thresholds, 0 to 1 in steps of 0.05.
pub fn threshold_grid() -> Vec<f64> {
    (0..=20).map(|i| f64::from(i) * 0.05).collect()
}

/// Threshold maximising micro-F1; the lowest wins ties.
pub fn sweep_threshold(visits: &[ScoredVisit<'_>]) -> f64 {
    let mut best = (f64::NEG_INFINITY, 0.0);
    for t in threshold_grid() {
        let f = micro_f1(visits, t);
        if f > best.0 {
            best = (f, t);
        }
    }
    best.1
}

// ---------------------------------------------------------------------------
// Per-visit records and the report
// ---------------------------------------------------------------------------

/// Predictions for one `(patient, T)` pair alongside the next visit's truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisitOutcome {
    pub patient_id: String,
    /// Number of history visits.
    pub t: usize,
    pub predictions: BTreeMap<Modality, Vec<(String, f64)>>,
    pub truth: BTreeMap<Modality, BTreeSet<String>>,
    pub primary: Option<String>,
    pub grounded: f64,
    pub unsupported: f64,
    pub degraded: bool,
    pub rejected: usize,
}

impl VisitOutcome {
    fn ids(&self, m: Modality) -> Vec<&str> {
        self.predictions
            .get(&m)
            .map(|l| l.iter().map(|(id, _)| id.as_str()).collect())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ModalityMetrics {
    /// Visits with non-empty truth in this modality.
    pub n: usize,
    pub recall_at_5: f64,
    pub recall_at_10: f64,
    pub ndcg_at_10: f64,
    pub micro_f1: f64,
    pub threshold: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrimaryMetrics {
    pub n: usize,
    pub top1: f64,
    pub top5: f64,
    pub mrr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct HierarchyMetrics {
    pub n: usize,
    /// Mean over every top-1 prediction.
    pub tree_distance_all: f64,
    /// Mean over incorrect top-1 predictions only.
    pub tree_distance_errors: f64,
    pub n_errors: usize,
    pub ancestor_match_l1: f64,
    pub ancestor_match_l2: f64,
    pub skipped_l1: usize,
    pub skipped_l2: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GroundingMetrics {
    pub grounded_rate: f64,
    pub unsupported_rate: f64,
    pub rejected_ids: usize,
    pub degraded_visits: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub n_visits: usize,
    pub per_modality: BTreeMap<Modality, ModalityMetrics>,
    pub primary: PrimaryMetrics,
    pub hierarchy: HierarchyMetrics,
    pub grounding: GroundingMetrics,
}

fn mean(xs: impl IntoIterator<Item = f64>) -> (f64, usize) {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    (if n == 0 { 0.0 } else { s / n as f64 }, n)
}

fn sorted(outcomes: &[VisitOutcome]) -> Vec<&VisitOutcome> {
    let mut v: Vec<&VisitOutcome> = outcomes.iter().collect();
    v.sort_by(|a, b| (&a.patient_id, a.t).cmp(&(&b.patient_id, b.t)));
    v
}

/// Per-modality thresholds maximising micro-F1 on `validation`.
pub fn tune_thresholds(validation: &[VisitOutcome]) -> BTreeMap<Modality, f64> {
    let val = sorted(validation);
    Modality::ALL
        .into_iter()
        .map(|m| {
            let pairs: Vec<ScoredVisit<'_>> = val
                .iter()
                .filter_map(|o| {
                    let truth = o.truth.get(&m)?;
                    let preds = o.predictions.get(&m).map_or(&[][..], Vec::as_slice);
                    Some((preds, truth))
                })
                .collect();
            (m, sweep_threshold(&pairs))
        })
        .collect()
}

/// Macro-averaged report. Modality metrics skip visits with empty truth in
/// that modality; hierarchy metrics compare the top dx prediction with the
/// primary label.
pub fn evaluate(
    outcomes: &[VisitOutcome],
    thresholds: &BTreeMap<Modality, f64>,
    vocab: &Vocabulary,
) -> Result<EvalReport, MetricsError> {
    if outcomes.is_empty() {
        return Err(MetricsError::NothingToEvaluate);
    }
    let all = sorted(outcomes);
    let mut report = EvalReport {
        n_visits: all.len(),
        ..Default::default()
    };

    for m in Modality::ALL {
        let rows: Vec<(&VisitOutcome, &BTreeSet<String>)> = all
            .iter()
            .filter_map(|o| o.truth.get(&m).filter(|t| !t.is_empty()).map(|t| (*o, t)))
            .collect();
        if rows.is_empty() {
            continue;
        }
        let threshold = thresholds.get(&m).copied().unwrap_or(0.5);
        let (r5, n) = mean(rows.iter().map(|(o, t)| recall_at_k(&o.ids(m), t, 5)));
        let (r10, _) = mean(rows.iter().map(|(o, t)| recall_at_k(&o.ids(m), t, 10)));
        let (nd, _) = mean(rows.iter().map(|(o, t)| ndcg_at_k(&o.ids(m), t, 10)));
        let pairs: Vec<ScoredVisit<'_>> = rows
            .iter()
            .map(|(o, t)| (o.predictions.get(&m).map_or(&[][..], Vec::as_slice), *t))
            .collect();
        report.per_modality.insert(
            m,
            ModalityMetrics {
                n,
                recall_at_5: r5,
                recall_at_10: r10,
                ndcg_at_10: nd,
                micro_f1: micro_f1(&pairs, threshold),
                threshold,
            },
        );
    }

    let labelled: Vec<(&VisitOutcome, &str)> = all
        .iter()
        .filter_map(|o| o.primary.as_deref().map(|p| (*o, p)))
        .collect();
    fn dx(o: &VisitOutcome) -> Vec<&str> {
        o.ids(Modality::Dx)
    }
    let (top1, n) = mean(labelled.iter().map(|(o, p)| top_k_accuracy(&dx(o), p, 1)));
    let (top5, _) = mean(labelled.iter().map(|(o, p)| top_k_accuracy(&dx(o), p, 5)));
    let (mrr, _) = mean(labelled.iter().map(|(o, p)| reciprocal_rank(&dx(o), p)));
    report.primary = PrimaryMetrics { n, top1, top5, mrr };

    let mut dists = Vec::new();
    let mut errors = Vec::new();
    let mut l1 = Vec::new();
    let mut l2 = Vec::new();
    let (mut skipped_l1, mut skipped_l2) = (0, 0);
    for (o, truth) in &labelled {
        let Some(top) = dx(o).first().copied() else {
            continue;
        };
        let d = f64::from(tree_distance(top, truth, vocab)?);
        dists.push(d);
        if top != *truth {
            errors.push(d);
        }
        for (l, acc, skipped) in [(1, &mut l1, &mut skipped_l1), (2, &mut l2, &mut skipped_l2)] {
            match ancestor_match(top, truth, l, vocab)? {
                Some(hit) => acc.push(if hit { 1.0 } else { 0.0 }),
                None => *skipped += 1,
            }
        }
    }
    let (all_d, n) = mean(dists);
    let (err_d, n_errors) = mean(errors);
    report.hierarchy = HierarchyMetrics {
        n,
        tree_distance_all: all_d,
        tree_distance_errors: err_d,
        n_errors,
        ancestor_match_l1: mean(l1).0,
        ancestor_match_l2: mean(l2).0,
        skipped_l1,
        skipped_l2,
    };

    report.grounding = GroundingMetrics {
        grounded_rate: mean(all.iter().map(|o| o.grounded)).0,
        unsupported_rate: mean(all.iter().map(|o| o.unsupported)).0,
        rejected_ids: all.iter().map(|o| o.rejected).sum(),
        degraded_visits: all.iter().filter(|o| o.degraded).count(),
    };
    Ok(report)
}

/// Flattens the report to `key,value` rows with dotted keys.
pub fn report_csv(report: &EvalReport) -> String {
    let value = serde_json::to_value(report).expect("report serialises");
    let mut rows = Vec::new();
    flatten("", &value, &mut rows);
    let mut out = String::from("key,value\n");
    for (k, v) in rows {
        out.push_str(&k);
        out.push(',');
        out.push_str(&v);
        out.push('\n');
    }
    out
}

pub(crate) fn flatten(prefix: &str, v: &serde_json::Value, out: &mut Vec<(String, String)>) {
    use serde_json::Value;
    let key = |k: &str| {
        if prefix.is_empty() {
            k.to_owned()
        } else {
            format!("{prefix}.{k}")
        }
    };
    match v {
        Value::Object(map) => {
            for (k, child) in map {
                flatten(&key(k), child, out);
            }
        }
        Value::Array(items) => {
            for (i, child) in items.iter().enumerate() {
                flatten(&key(&i.to_string()), child, out);
            }
        }
        Value::String(s) => out.push((prefix.to_owned(), s.clone())),
        other => out.push((prefix.to_owned(), other.to_string())),
    }
}
