//! File-based pipeline stages: synthetic generation, splitting, graph
//! construction, training, prediction and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::central_event::{central_event, CEConfig, CentralEvent, CentralEventError};
use crate::corpus::{
    self, filter_cohort, generate_synthetic, load_cohort, restrict_codes,
    split_by_patient, Cohort, CorpusError, Modality, SplitManifest, SplitSpec, SynthSpec,
};
use crate::graph::{self, ClinicalGraph, GraphConfig, GraphError, Vocabulary};
use crate::metrics::{self, EvalReport, MetricsError, VisitOutcome};
use crate::rerank::{
    compress_history, grounding_audit, make_scorer, predict_next_visit, scorer_request,
    Prediction, RerankConfig, Scorer, ScorerError, ScorerKind,
};
use crate::retrieval::{build_risk_horizon, Ranked, RetrievalConfig, RetrievalError, RiskHorizon};
use crate::trainer::{self, EmbeddingStore, TrainConfig, TrainError, TrainReport};
use crate::util::config_hash;

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error("configuration: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    CentralEvent(#[from] CentralEventError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Scorer(#[from] ScorerError),
    #[error("scorer degraded on {0} visits and degradation is not allowed")]
    Degraded(usize),
}

impl PipelineError {
    /// 1 for configuration problems, 3 for a degradation-policy violation,
    /// 2 for everything data-related.
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) | PipelineError::Scorer(ScorerError::BadSpec(_)) => 1,
            PipelineError::Degraded(_) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, PipelineError>;

/// Artifact locations, relative to the output directory unless absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub cohort: PathBuf,
    pub rules: PathBuf,
    pub ontology: PathBuf,
    pub train: PathBuf,
    pub val: PathBuf,
    pub test: PathBuf,
    pub split: PathBuf,
    pub vocab: PathBuf,
    pub graph: PathBuf,
    pub embeddings: PathBuf,
    pub gamma: PathBuf,
    pub train_report: PathBuf,
    pub predictions_val: PathBuf,
    pub predictions_test: PathBuf,
    pub horizons_test: PathBuf,
    pub report_json: PathBuf,
    pub report_csv: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        let p = PathBuf::from;
        Self {
            cohort: p("cohort.jsonl"),
            rules: p("rules.json"),
            ontology: p("ontology.tsv"),
            train: p("train.jsonl"),
            val: p("val.jsonl"),
            test: p("test.jsonl"),
            split: p("split.json"),
            vocab: p("vocab.tsv"),
            graph: p("graph.tsv"),
            embeddings: p("embeddings.bin"),
            gamma: p("gamma.tsv"),
            train_report: p("train_report.json"),
            predictions_val: p("predictions_val.jsonl"),
            predictions_test: p("predictions_test.jsonl"),
            horizons_test: p("horizons_test.jsonl"),
            report_json: p("report.json"),
            report_csv: p("report.csv"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_visits: usize,
    pub min_code_freq: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            min_visits: 2,
            min_code_freq: 25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// Overrides every per-stage seed.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub deterministic: bool,
    /// Fail with a policy error when the scorer degrades.
    pub strict_scorer: bool,
    pub paths: Paths,
    pub synth: SynthSpec,
    pub filter: FilterConfig,
    pub split: SplitSpec,
    pub graph: GraphConfig,
    pub train: TrainConfig,
    pub central_event: CEConfig,
    pub retrieval: RetrievalConfig,
    pub rerank: RerankConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("out"),
            deterministic: false,
            strict_scorer: false,
            paths: Paths::default(),
            synth: SynthSpec::default(),
            filter: FilterConfig::default(),
            split: SplitSpec::default(),
            graph: GraphConfig::default(),
            train: TrainConfig::default(),
            central_event: CEConfig::default(),
            retrieval: RetrievalConfig::default(),
            rerank: RerankConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))?;
        let seed = cfg.seed;
        Ok(cfg.with_seed(seed))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Sets the global seed and propagates it to every stage.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.split.seed = seed;
        self.graph.seed = seed;
        self.train.seed = seed;
        self
    }

    /// Hash of every setting except the output directory.
    pub fn hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.out_dir = PathBuf::new();
        config_hash(&canonical)
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: String| PipelineError::Config(e);
        self.synth.validate().map_err(|e| cfg(e.to_string()))?;
        self.split.validate().map_err(|e| cfg(e.to_string()))?;
        self.graph.validate().map_err(|e| cfg(e.to_string()))?;
        self.train.validate().map_err(|e| cfg(e.to_string()))?;
        self.retrieval.validate().map_err(|e| cfg(e.to_string()))?;
        self.rerank.validate().map_err(cfg)?;
        if !(self.central_event.beta.is_finite() && self.central_event.beta > 0.0) {
            return Err(cfg("central_event.beta must be positive".into()));
        }
        Ok(())
    }

    pub fn path(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.out_dir.join(p)
        }
    }

    fn header(&self, stage: &str) -> String {
        format!("stage={stage} config={}", self.hash())
    }
}

/// Restricts rayon to one worker when `deterministic` is set. Only the first
/// call in a process takes effect.
pub fn configure_threads(deterministic: bool) {
    if deterministic {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(1).build_global();
    }
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(io_err(path))?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path).map_err(io_err(path))?))
}

fn finish(mut w: BufWriter<File>, path: &Path) -> Result<()> {
    w.flush().map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.write_all(b"\n").map_err(io_err(path))?;
    finish(w, path)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_reader(open(path)?).map_err(|e| PipelineError::Format {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_cohort_file(cfg: &PipelineConfig, stage: &str, cohort: &Cohort, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {}", cfg.header(stage)).map_err(io_err(path))?;
    corpus::write_cohort(cohort, &mut w).map_err(io_err(path))?;
    finish(w, path)
}

fn read_vocab_file(path: &Path) -> Result<Vocabulary> {
    Ok(graph::read_vocab(open(path)?)?)
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Writes the synthetic cohort, its planted rules and its full ontology.
pub fn stage_gen_synthetic(cfg: &PipelineConfig) -> Result<()> {
    cfg.synth
        .validate()
        .map_err(|e| PipelineError::Config(e.to_string()))?;
    let synth = generate_synthetic(&cfg.synth, cfg.seed)?;
    write_cohort_file(cfg, "gen-synthetic", &synth.cohort, &cfg.path(&cfg.paths.cohort))?;
    write_json(&cfg.path(&cfg.paths.rules), &synth.rules)?;
    let path = cfg.path(&cfg.paths.ontology);
    let mut w = create(&path)?;
    writeln!(w, "# {}", cfg.header("gen-synthetic")).map_err(io_err(&path))?;
    graph::write_vocab(&synth.vocab, &mut w).map_err(io_err(&path))?;
    finish(w, &path)
}

/// Patient-disjoint split, then code filtering on training frequencies with
/// the held-out splits restricted to the surviving codes.
pub fn stage_split(cfg: &PipelineConfig) -> Result<SplitManifest> {
    let cohort = load_cohort(cfg.path(&cfg.paths.cohort))?;
    let (train, val, test) = split_by_patient(&cohort, &cfg.split)?;
    let train = filter_cohort(&train, cfg.filter.min_visits, cfg.filter.min_code_freq)?;
    let allowed: BTreeSet<String> = train.code_frequency().keys().cloned().collect();
    let val = restrict_codes(&val, &allowed, cfg.filter.min_visits)?;
    let test = restrict_codes(&test, &allowed, cfg.filter.min_visits)?;
    for (c, p) in [(&train, &cfg.paths.train), (&val, &cfg.paths.val), (&test, &cfg.paths.test)] {
        write_cohort_file(cfg, "split", c, &cfg.path(p))?;
    }
    let manifest = SplitManifest::from_cohorts(cfg.split.seed, &train, &val, &test);
    write_json(&cfg.path(&cfg.paths.split), &manifest)?;
    Ok(manifest)
}

/// Graph from the training split only; refuses patients outside the
/// manifest's training set.
pub fn stage_build_graph(cfg: &PipelineConfig) -> Result<ClinicalGraph> {
    let train = load_cohort(cfg.path(&cfg.paths.train))?;
    let manifest: SplitManifest = read_json(&cfg.path(&cfg.paths.split))?;
    let ontology = cfg.path(&cfg.paths.ontology);
    let graph = if ontology.exists() {
        let full = read_vocab_file(&ontology)?;
        let vocab = graph::build_vocabulary_with(&train, &full)?;
        graph::build_graph_with(&train, Some(&manifest), vocab, &cfg.graph)?
    } else {
        graph::build_graph(&train, Some(&manifest), &cfg.graph)?
    };
    let header = cfg.header("build-graph");
    let vpath = cfg.path(&cfg.paths.vocab);
    let mut w = create(&vpath)?;
    writeln!(w, "# {header}").map_err(io_err(&vpath))?;
    graph::write_vocab(graph.vocab(), &mut w).map_err(io_err(&vpath))?;
    finish(w, &vpath)?;
    let gpath = cfg.path(&cfg.paths.graph);
    let mut w = create(&gpath)?;
    graph::write_graph(&graph, &header, &mut w).map_err(io_err(&gpath))?;
    finish(w, &gpath)?;
    Ok(graph)
}

fn load_graph(cfg: &PipelineConfig) -> Result<ClinicalGraph> {
    let vocab = read_vocab_file(&cfg.path(&cfg.paths.vocab))?;
    Ok(graph::read_graph(vocab, open(&cfg.path(&cfg.paths.graph))?)?.0)
}

#[derive(Debug, Serialize)]
struct TrainReportFile<'a> {
    config_hash: String,
    #[serde(flatten)]
    report: &'a TrainReport,
}

pub fn stage_train(cfg: &PipelineConfig) -> Result<TrainReport> {
    let graph = load_graph(cfg)?;
    let train = load_cohort(cfg.path(&cfg.paths.train))?;
    let (store, report) = trainer::train(&graph, &train, &cfg.train)?;
    let hash = cfg.hash();
    let epath = cfg.path(&cfg.paths.embeddings);
    let mut w = create(&epath)?;
    trainer::write_store(&store, &hash, &mut w).map_err(io_err(&epath))?;
    finish(w, &epath)?;
    let gpath = cfg.path(&cfg.paths.gamma);
    let mut w = create(&gpath)?;
    writeln!(w, "# {}", cfg.header("train")).map_err(io_err(&gpath))?;
    trainer::write_gamma(&store, &mut w).map_err(io_err(&gpath))?;
    finish(w, &gpath)?;
    write_json(
        &cfg.path(&cfg.paths.train_report),
        &TrainReportFile {
            config_hash: hash,
            report: &report,
        },
    )?;
    Ok(report)
}

fn load_store(cfg: &PipelineConfig, vocab: &Vocabulary) -> Result<EmbeddingStore> {
    let (mut store, _) = trainer::read_store(open(&cfg.path(&cfg.paths.embeddings))?)?;
    trainer::read_gamma(&mut store, open(&cfg.path(&cfg.paths.gamma))?)?;
    if !store.matches(vocab) {
        return Err(TrainError::VocabularyMismatch.into());
    }
    Ok(store)
}

/// Everything produced for one `(patient, T)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Forecast {
    pub patient_id: String,
    /// Number of history visits.
    pub t: usize,
    pub representative: String,
    pub horizon: RiskHorizon,
    pub prediction: Prediction,
    pub grounded: f64,
    pub unsupported: f64,
}

/// Line record of the predictions file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub patient_id: String,
    pub t: usize,
    pub representative: String,
    pub predictions: BTreeMap<Modality, Vec<(String, f64)>>,
    pub grounded: f64,
    pub unsupported: f64,
    pub degraded: bool,
    pub rejected: Vec<String>,
}

impl From<&Forecast> for PredictionRecord {
    fn from(f: &Forecast) -> Self {
        Self {
            patient_id: f.patient_id.clone(),
            t: f.t,
            representative: f.representative.clone(),
            predictions: f.prediction.lists.clone(),
            grounded: f.grounded,
            unsupported: f.unsupported,
            degraded: f.prediction.degraded,
            rejected: f.prediction.rejected.clone(),
        }
    }
}

#[derive(Serialize)]
struct HorizonRecord<'a> {
    patient_id: &'a str,
    t: usize,
    modality: Modality,
    ranked: &'a [Ranked],
}

/// Settings shared by central events, retrieval and fusion.
#[derive(Debug, Clone, Copy)]
pub struct InferenceConfig<'a> {
    pub central_event: &'a CEConfig,
    pub retrieval: &'a RetrievalConfig,
    pub rerank: &'a RerankConfig,
}

impl<'a> From<&'a PipelineConfig> for InferenceConfig<'a> {
    fn from(c: &'a PipelineConfig) -> Self {
        Self {
            central_event: &c.central_event,
            retrieval: &c.retrieval,
            rerank: &c.rerank,
        }
    }
}

/// Forecasts for every history prefix `T = 1..n-1` of every patient, in
/// (patient, T) order. Patients are processed in parallel.
pub fn forecast_cohort(
    cohort: &Cohort,
    graph: &ClinicalGraph,
    store: &EmbeddingStore,
    cfg: InferenceConfig<'_>,
    scorer: Option<&dyn Scorer>,
) -> Result<Vec<Forecast>> {
    let vocab = graph.vocab();
    let per_patient: Vec<Result<Vec<Forecast>>> = cohort
        .trajectories()
        .par_iter()
        .map(|tr| {
            let events = tr
                .visits
                .iter()
                .map(|v| central_event(v, store, vocab, cfg.central_event))
                .collect::<std::result::Result<Vec<CentralEvent>, _>>()?;
            let mut out = Vec::new();
            for t in 1..tr.visits.len() {
                let ce = &events[t - 1];
                let horizon = build_risk_horizon(ce, graph, store, cfg.retrieval)?;
                let history = compress_history(
                    &tr.visits[..t],
                    &events[..t],
                    vocab,
                    cfg.rerank.history_budget,
                );
                let recent: Vec<BTreeSet<String>> = tr.visits[..t]
                    .iter()
                    .map(|v| v.all_codes().map(|(_, c)| c.to_owned()).collect())
                    .collect();
                let seen: BTreeSet<String> = recent.iter().flatten().cloned().collect();
                let request = scorer_request(&horizon, vocab, history, recent);
                let prediction = predict_next_visit(&horizon, &request, scorer, cfg.rerank);
                let (grounded, unsupported) = grounding_audit(prediction.ids(), &seen, &horizon);
                out.push(Forecast {
                    patient_id: tr.patient_id.clone(),
                    t,
                    representative: ce.representative.clone(),
                    horizon,
                    prediction,
                    grounded,
                    unsupported,
                });
            }
            Ok(out)
        })
        .collect();
    let mut all = Vec::new();
    for r in per_patient {
        all.extend(r?);
    }
    Ok(all)
}

fn resolve_scorer(cfg: &PipelineConfig) -> Result<Option<Box<dyn Scorer>>> {
    let mut rr = cfg.rerank.clone();
    if let ScorerKind::Oracle(p) = &rr.scorer {
        if p.is_relative() && !p.exists() {
            rr.scorer = ScorerKind::Oracle(cfg.path(p));
        }
    }
    Ok(make_scorer(&rr)?)
}

fn write_predictions(cfg: &PipelineConfig, forecasts: &[Forecast], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {}", cfg.header("predict")).map_err(io_err(path))?;
    for f in forecasts {
        serde_json::to_writer(&mut w, &PredictionRecord::from(f)).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        w.write_all(b"\n").map_err(io_err(path))?;
    }
    finish(w, path)
}

fn write_horizons(cfg: &PipelineConfig, forecasts: &[Forecast], path: &Path) -> Result<()> {
    let mut w = create(path)?;
    writeln!(w, "# {}", cfg.header("predict")).map_err(io_err(path))?;
    for f in forecasts {
        for (m, ranked) in &f.horizon.lists {
            let rec = HorizonRecord {
                patient_id: &f.patient_id,
                t: f.t,
                modality: *m,
                ranked,
            };
            serde_json::to_writer(&mut w, &rec).map_err(|e| PipelineError::Format {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
            w.write_all(b"\n").map_err(io_err(path))?;
        }
    }
    finish(w, path)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct PredictSummary {
    pub visits: usize,
    pub degraded: usize,
}

/// Forecasts for the validation and test splits.
pub fn stage_predict(cfg: &PipelineConfig) -> Result<PredictSummary> {
    let graph = load_graph(cfg)?;
    let store = load_store(cfg, graph.vocab())?;
    let scorer = resolve_scorer(cfg)?;
    let mut summary = PredictSummary {
        visits: 0,
        degraded: 0,
    };
    for (split, out, horizons) in [
        (&cfg.paths.val, &cfg.paths.predictions_val, None),
        (&cfg.paths.test, &cfg.paths.predictions_test, Some(&cfg.paths.horizons_test)),
    ] {
        let cohort = load_cohort(cfg.path(split))?;
        let forecasts = forecast_cohort(&cohort, &graph, &store, cfg.into(), scorer.as_deref())?;
        summary.visits += forecasts.len();
        summary.degraded += forecasts.iter().filter(|f| f.prediction.degraded).count();
        write_predictions(cfg, &forecasts, &cfg.path(out))?;
        if let Some(h) = horizons {
            write_horizons(cfg, &forecasts, &cfg.path(h))?;
        }
    }
    if summary.degraded > 0 {
        log::warn!("scorer degraded on {} visits", summary.degraded);
        if cfg.strict_scorer {
            return Err(PipelineError::Degraded(summary.degraded));
        }
    }
    Ok(summary)
}

fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut out = Vec::new();
    for (i, line) in open(path)?.lines().enumerate() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| PipelineError::Format {
            path: path.display().to_string(),
            message: format!("line {}: {e}", i + 1),
        })?);
    }
    Ok(out)
}

/// Joins prediction records with the next visit of each history prefix.
pub fn outcomes(cohort: &Cohort, records: &[PredictionRecord]) -> Result<Vec<VisitOutcome>> {
    records
        .iter()
        .map(|r| {
            let missing = || PipelineError::Format {
                path: "predictions".into(),
                message: format!("{}@{} has no matching next visit", r.patient_id, r.t),
            };
            let tr = cohort.get(&r.patient_id).ok_or_else(missing)?;
            let next = tr.visits.get(r.t).filter(|_| r.t >= 1).ok_or_else(missing)?;
            Ok(VisitOutcome {
                patient_id: r.patient_id.clone(),
                t: r.t,
                predictions: r.predictions.clone(),
                truth: Modality::ALL
                    .into_iter()
                    .map(|m| (m, next.codes(m).clone()))
                    .collect(),
                primary: next.primary.clone(),
                grounded: r.grounded,
                unsupported: r.unsupported,
                degraded: r.degraded,
                rejected: r.rejected.len(),
            })
        })
        .collect()
}

/// Thresholds tuned on validation, metrics on test.
pub fn stage_evaluate(cfg: &PipelineConfig) -> Result<EvalReport> {
    let vocab = read_vocab_file(&cfg.path(&cfg.paths.vocab))?;
    let val_records = read_predictions(&cfg.path(&cfg.paths.predictions_val))?;
    let test_records = read_predictions(&cfg.path(&cfg.paths.predictions_test))?;
    let val = outcomes(&load_cohort(cfg.path(&cfg.paths.val))?, &val_records)?;
    let test = outcomes(&load_cohort(cfg.path(&cfg.paths.test))?, &test_records)?;
    let thresholds = metrics::tune_thresholds(&val);
    let mut report = metrics::evaluate(&test, &thresholds, &vocab)?;
    report.config_hash = cfg.hash();
    write_json(&cfg.path(&cfg.paths.report_json), &report)?;
    let csv_path = cfg.path(&cfg.paths.report_csv);
    let mut w = create(&csv_path)?;
    w.write_all(metrics::report_csv(&report).as_bytes())
        .map_err(io_err(&csv_path))?;
    finish(w, &csv_path)?;
    Ok(report)
}

/// Every stage in order.
pub fn run_all(cfg: &PipelineConfig) -> Result<EvalReport> {
    cfg.validate()?;
    stage_gen_synthetic(cfg)?;
    stage_split(cfg)?;
    stage_build_graph(cfg)?;
    stage_train(cfg)?;
    stage_predict(cfg)?;
    stage_evaluate(cfg)
}

/// Planted rules as written by [`stage_gen_synthetic`].
pub fn read_rules(path: &Path) -> Result<Vec<corpus::PlantedRule>> {
    read_json(path)
}
