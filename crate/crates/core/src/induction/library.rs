use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::InductionError;

/// Default upper bound on the number of patterns in a library.
pub const DEFAULT_MAX_PATTERNS: usize = 16;

const REFERENCE_LIBRARY: &str = include_str!("../../fixtures/reference_library.json");

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternExample {
    pub query: String,
    pub reformulation: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReformulationPattern {
    pub pattern_id: usize,
    pub name: String,
    pub description: String,
    /// Generalized transformation rule.
    pub rule: String,
    #[serde(default)]
    pub examples: Vec<PatternExample>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source_dataset: String,
    pub num_pairs: usize,
    pub induction_model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
}

/// The consolidated set of reformulation patterns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatternLibrary {
    pub version: String,
    pub provenance: Provenance,
    pub patterns: Vec<ReformulationPattern>,
}

impl PatternLibrary {
    /// Builds a library, renumbering patterns densely in the given order, and
    /// validates it against `max_patterns`.
    pub fn new(
        patterns: Vec<ReformulationPattern>,
        provenance: Provenance,
        max_patterns: usize,
    ) -> Result<Self, InductionError> {
        let patterns: Vec<ReformulationPattern> = patterns
            .into_iter()
            .enumerate()
            .map(|(i, p)| ReformulationPattern { pattern_id: i, ..p })
            .collect();
        let version = content_version(&patterns);
        let library = Self {
            version,
            provenance,
            patterns,
        };
        library.validate(max_patterns)?;
        Ok(library)
    }

    /// The ten-pattern reference library shipped with the crate.
    pub fn reference() -> Self {
        Self::from_json(REFERENCE_LIBRARY).expect("bundled library is valid")
    }

    pub fn from_json(json: &str) -> Result<Self, InductionError> {
        let library: Self = serde_json::from_str(json).map_err(|e| InductionError::LibraryFormat(e.to_string()))?;
        library.validate(usize::MAX)?;
        Ok(library)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("library serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, InductionError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| InductionError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), InductionError> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|source| InductionError::Io {
            path: path.to_owned(),
            source,
        })
    }

    pub fn validate(&self, max_patterns: usize) -> Result<(), InductionError> {
        if self.patterns.is_empty() {
            return Err(InductionError::InvalidLibrary("library has no patterns".into()));
        }
        if self.patterns.len() > max_patterns {
            return Err(InductionError::TooManyPatterns {
                found: self.patterns.len(),
                max: max_patterns,
            });
        }
        let mut seen = HashSet::new();
        for (i, p) in self.patterns.iter().enumerate() {
            if p.pattern_id != i {
                return Err(InductionError::InvalidLibrary(format!(
                    "pattern `{}` has id {} at position {i}",
                    p.name, p.pattern_id
                )));
            }
            if p.name.trim().is_empty() {
                return Err(InductionError::InvalidLibrary(format!("pattern {i} has an empty name")));
            }
            if !seen.insert(p.name.trim().to_lowercase()) {
                return Err(InductionError::InvalidLibrary(format!("duplicate pattern name `{}`", p.name)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.patterns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patterns.is_empty()
    }

    pub fn get(&self, pattern_id: usize) -> Option<&ReformulationPattern> {
        self.patterns.get(pattern_id)
    }

    pub fn names(&self) -> Vec<&str> {
        self.patterns.iter().map(|p| p.name.as_str()).collect()
    }

    /// Case-insensitive name lookup. Surrounding whitespace, quotes, markup
    /// and a trailing period are ignored.
    pub fn resolve(&self, text: &str) -> Option<usize> {
        let wanted = normalize_name(text);
        self.patterns
            .iter()
            .position(|p| normalize_name(&p.name) == wanted)
    }
}

fn normalize_name(text: &str) -> String {
    let trimmed = text
        .trim()
        .trim_matches(|c: char| matches!(c, '"' | '\'' | '`' | '*' | '.' | '“' | '”') || c.is_whitespace());
    trimmed.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase()
}

/// Short content hash over names, descriptions and rules.
fn content_version(patterns: &[ReformulationPattern]) -> String {
    let mut hasher = Sha256::new();
    for p in patterns {
        for field in [&p.name, &p.description, &p.rule] {
            hasher.update(field.len().to_string().as_bytes());
            hasher.update(b":");
            hasher.update(field.as_bytes());
        }
    }
    format!("lib-{}", &hex::encode(hasher.finalize())[..12])
}
