//! Pattern-guided query reformulation on top of a BM25 index.
//!
//! Numeric code is generic over [`num::Real`] (`f32` or `f64`); the aliases
//! below fix the scalar for callers that do not care.

pub mod corpus;
pub mod eval;
pub mod feedback;
pub mod generator;
pub mod induction;
pub mod llm;
pub mod num;
pub mod pipeline;
pub mod selector;

pub use corpus::{Document, InvertedIndex, Query, Searcher};
pub use induction::{PatternLibrary, ReformulationPattern, TrainingPair};
pub use llm::{GatewayConfig, LlmGateway, MockScript};
pub use pipeline::{run_pipeline, Mode, PipelineConfig, PipelineError};

pub type RetrievalContext = corpus::RetrievalContext<f64>;
pub type RetrievalContext32 = corpus::RetrievalContext<f32>;
pub type WeightedTerms = corpus::WeightedTerms<f64>;
pub type WeightedQuery = feedback::WeightedQuery<f64>;
pub type SelectorModel = selector::SelectorModel<f64>;
pub type SelectorModel32 = selector::SelectorModel<f32>;
pub type PatternDistribution = selector::PatternDistribution<f64>;
pub type PatternDistribution32 = selector::PatternDistribution<f32>;
pub type FeatureVector = selector::FeatureVector<f64>;
pub type MetricsReport = eval::MetricsReport<f64>;
pub type Run = eval::Run<f64>;
