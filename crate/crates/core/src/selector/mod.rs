//! Choosing a reformulation pattern for a query given its retrieval context.

mod features;
mod model;
mod train;

use std::path::PathBuf;

pub use features::{featurize, FeatureConfig, FeatureVector, DEFAULT_FEATURE_DIM};
pub use model::{select_pattern, PatternDistribution, SelectionMode, SelectorModel};
pub use train::{
    gradient, objective, save_loss_csv, train_features, train_selector, write_loss_csv, SelectorHyper,
    TrainedSelector, TrainingExample,
};

use crate::corpus::RetrievalContext;
use crate::induction::PatternLibrary;
use crate::llm::{ChatMessage, ChatRequest, GatewayError, LlmGateway};
use crate::num::Real;

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("example {index} has label {label}, but the library has {num_patterns} patterns")]
    LabelOutOfRange {
        index: usize,
        label: usize,
        num_patterns: usize,
    },
    #[error("feature dimension {found} does not match the model's {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error(
        "model was trained for library {model_version} ({model_patterns} patterns), \
         not {library_version} ({library_patterns} patterns)"
    )]
    LibraryMismatch {
        model_version: String,
        model_patterns: usize,
        library_version: String,
        library_patterns: usize,
    },
    #[error("invalid hyperparameter: {0}")]
    InvalidHyper(&'static str),
    #[error("malformed selector model: {0}")]
    ModelFormat(String),
    #[error("{path}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("selecting a pattern for `{query_id}`")]
    Gateway {
        query_id: String,
        #[source]
        source: GatewayError,
    },
    #[error("selector answered `{answer}` for `{query_id}`, which is not a pattern in the library")]
    UnknownPattern { query_id: String, answer: String },
}

/// Anything that maps a query and its context to a distribution over the
/// active library's patterns.
pub trait PatternSelector<T: Real = f64>: Send + Sync {
    fn num_patterns(&self) -> usize;

    fn distribution(&self, query: &str, context: &RetrievalContext<T>) -> Result<PatternDistribution<T>, SelectorError>;

    fn select(&self, query: &str, context: &RetrievalContext<T>, mode: SelectionMode) -> Result<usize, SelectorError> {
        Ok(select_pattern(&self.distribution(query, context)?, mode))
    }
}

impl<T: Real> PatternSelector<T> for SelectorModel<T> {
    fn num_patterns(&self) -> usize {
        SelectorModel::num_patterns(self)
    }

    fn distribution(&self, query: &str, context: &RetrievalContext<T>) -> Result<PatternDistribution<T>, SelectorError> {
        self.predict(query, context)
    }
}

const LLM_SELECTOR_SYSTEM: &str = "You choose how to rewrite a search query. Given the query, \
passages it currently retrieves, and a menu of reformulation patterns, answer with the name of the \
single pattern most likely to improve retrieval. Output only the pattern name.";

/// Prompts the gateway with the query, its snippets and the pattern menu,
/// and puts all mass on the named pattern.
#[derive(Clone)]
pub struct LlmSelector {
    gateway: LlmGateway,
    library: PatternLibrary,
}

impl LlmSelector {
    pub fn new(gateway: LlmGateway, library: PatternLibrary) -> Self {
        Self { gateway, library }
    }

    pub fn request<S>(&self, query: &str, context: &RetrievalContext<S>) -> ChatRequest {
        let mut user = String::from("Patterns:\n");
        for p in &self.library.patterns {
            user.push_str(&format!("- {}: {}\n", p.name, p.description));
        }
        user.push_str(&format!("\nQuery: {query}\n"));
        if !context.entries.is_empty() {
            user.push_str("\nRetrieved passages:\n");
            for (i, e) in context.entries.iter().enumerate() {
                user.push_str(&format!("[{}] {}\n", i + 1, e.snippet));
            }
        }
        user.push_str("\nPattern name:");
        ChatRequest::new(vec![ChatMessage::system(LLM_SELECTOR_SYSTEM), ChatMessage::user(user)])
    }
}

impl<T: Real> PatternSelector<T> for LlmSelector {
    fn num_patterns(&self) -> usize {
        self.library.len()
    }

    fn distribution(&self, query: &str, context: &RetrievalContext<T>) -> Result<PatternDistribution<T>, SelectorError> {
        let ask = |request: &ChatRequest| {
            self.gateway.complete_text(request).map_err(|source| SelectorError::Gateway {
                query_id: context.query_id.clone(),
                source,
            })
        };
        let first = self.request(query, context);
        let answer = ask(&first)?;
        let resolved = match self.library.resolve(&answer) {
            Some(id) => Some(id),
            None => {
                let mut retry = first.clone();
                retry.messages.push(ChatMessage::assistant(answer.clone()));
                retry.messages.push(ChatMessage::user(format!(
                    "Answer with exactly one of: {}.",
                    self.library.names().join(", ")
                )));
                let second = ask(&retry)?;
                self.library.resolve(&second)
            }
        };
        let id = resolved.ok_or_else(|| SelectorError::UnknownPattern {
            query_id: context.query_id.clone(),
            answer: answer.trim().to_owned(),
        })?;
        Ok(PatternDistribution::one_hot(self.library.len(), id))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::ContextEntry;
    use crate::llm::MockScript;

    fn context() -> RetrievalContext<f64> {
        RetrievalContext {
            query_id: "q1".into(),
            k: 1,
            entries: vec![ContextEntry {
                doc_id: "d1".into(),
                score: 2.0,
                snippet: "nurses earn a median salary".into(),
            }],
        }
    }

    #[test]
    fn llm_selector_one_hot() {
        let lib = PatternLibrary::reference();
        let probe = LlmSelector::new(LlmGateway::mock(MockScript::default()), lib.clone());
        let mut script = MockScript::default();
        script.insert(&probe.request("nurse salary", &context()), "Location Specification");
        let selector = LlmSelector::new(LlmGateway::mock(script), lib);
        let d = selector.distribution("nurse salary", &context()).unwrap();
        assert_eq!(d.argmax(), 6);
        assert_eq!(d.probs.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn llm_selector_omits_empty_context() {
        let selector = LlmSelector::new(LlmGateway::mock(MockScript::default()), PatternLibrary::reference());
        let req = selector.request("q", &RetrievalContext::<f64>::empty("q"));
        assert!(!req.last_user().unwrap().contains("Retrieved passages"));
        assert!(selector.request("q", &context()).last_user().unwrap().contains("[1] nurses earn"));
    }

    #[test]
    fn llm_selector_unknown_answer() {
        let selector = LlmSelector::new(
            LlmGateway::mock(MockScript::with_fallback("no idea")),
            PatternLibrary::reference(),
        );
        let r: Result<PatternDistribution<f64>, _> = selector.distribution("q", &context());
        assert!(matches!(r, Err(SelectorError::UnknownPattern { .. })));
    }

    #[test]
    fn model_behind_trait() {
        let lib = PatternLibrary::reference();
        let model = SelectorModel::<f64>::for_library(&lib, FeatureConfig { dim: 128, ..Default::default() });
        let selector: &dyn PatternSelector = &model;
        assert_eq!(selector.select("q", &context(), SelectionMode::Argmax).unwrap(), 0);
    }
}
