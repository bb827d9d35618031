//! Hyperbolic clinical-concept graphs for next-visit prediction.
//!
//! The crate covers the whole offline pipeline: loading and splitting
//! longitudinal visit trajectories ([`corpus`]), building a typed concept
//! graph from coding hierarchies and lagged PMI ([`graph`]), embedding it in
//! the Poincaré ball ([`manifold`], [`trainer`]), summarising visits as
//! central events ([`central_event`]), retrieving per-modality risk horizons
//! ([`retrieval`]), fusing them with an external scorer ([`rerank`]) and
//! evaluating the predictions ([`metrics`]). [`pipeline`] wires the stages
//! together behind file-based artifacts.

pub mod central_event;
pub mod corpus;
pub mod graph;
pub mod manifold;
pub mod metrics;
pub mod pipeline;
pub mod rerank;
pub mod retrieval;
pub mod trainer;

mod util;

pub use central_event::{CEConfig, CentralEvent, PoolPolicy};
pub use corpus::{Cohort, Modality, SplitSpec, SynthSpec, Trajectory, Visit};
pub use graph::{ClinicalGraph, EdgeKind, EdgeType, GraphConfig, TypedEdge, Vocabulary};
pub use manifold::Curvature;
pub use metrics::EvalReport;
pub use pipeline::PipelineConfig;
pub use rerank::{RerankConfig, Scorer, ScorerKind};
pub use retrieval::{RetrievalConfig, RiskHorizon};
pub use trainer::{EmbeddingStore, TrainConfig, TrainReport};
