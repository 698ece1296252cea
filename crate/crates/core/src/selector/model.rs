use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureConfig, FeatureVector};
use super::SelectorError;
use crate::corpus::RetrievalContext;
use crate::induction::PatternLibrary;
use crate::num::Real;

const MAGIC: &[u8; 8] = b"QRSELMOD";
const FORMAT_VERSION: u32 = 1;

/// A probability distribution over the patterns of a library.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternDistribution<T = f64> {
    pub probs: Vec<T>,
}

impl<T: Real> PatternDistribution<T> {
    pub fn uniform(num_patterns: usize) -> Self {
        let p = T::one() / T::from_usize_lossy(num_patterns);
        Self {
            probs: vec![p; num_patterns],
        }
    }

    pub fn one_hot(num_patterns: usize, pattern_id: usize) -> Self {
        let mut probs = vec![T::zero(); num_patterns];
        probs[pattern_id] = T::one();
        Self { probs }
    }

    /// Numerically stable softmax.
    pub fn from_logits(logits: &[T]) -> Self {
        let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
        let exps: Vec<T> = logits.iter().map(|&l| (l - max).exp()).collect();
        let total: T = exps.iter().copied().sum();
        Self {
            probs: exps.into_iter().map(|e| e / total).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Most probable pattern; the lowest id wins ties.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &p) in self.probs.iter().enumerate() {
            if p > self.probs[best] {
                best = i;
            }
        }
        best
    }

    /// Categorical draw from a generator seeded with `seed`.
    pub fn sample(&self, seed: u64) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let u = T::from_f64_lossy(rng.random::<f64>());
        let mut cumulative = T::zero();
        for (i, &p) in self.probs.iter().enumerate() {
            cumulative += p;
            if u < cumulative {
                return i;
            }
        }
        // rounding left u above the final cumulative sum
        self.probs.iter().rposition(|&p| p > T::zero()).unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "mode")]
pub enum SelectionMode {
    #[default]
    Argmax,
    Sample { seed: u64 },
}

pub fn select_pattern<T: Real>(distribution: &PatternDistribution<T>, mode: SelectionMode) -> usize {
    match mode {
        SelectionMode::Argmax => distribution.argmax(),
        SelectionMode::Sample { seed } => distribution.sample(seed),
    }
}

/// Multinomial logistic regression over hashed features.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectorModel<T = f64> {
    num_patterns: usize,
    /// Row-major `num_patterns x dim`.
    pub(crate) weights: Vec<T>,
    pub(crate) bias: Vec<T>,
    feature_config: FeatureConfig,
    library_version: String,
    config_hash: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    num_patterns: usize,
    dim: usize,
    feature_config: FeatureConfig,
    library_version: String,
    #[serde(default)]
    config_hash: Option<String>,
    scalar: String,
}

impl<T: Real> SelectorModel<T> {
    /// All-zero parameters; predicts the uniform distribution.
    pub fn zeros(num_patterns: usize, feature_config: FeatureConfig, library_version: impl Into<String>) -> Self {
        Self {
            num_patterns,
            weights: vec![T::zero(); num_patterns * feature_config.dim],
            bias: vec![T::zero(); num_patterns],
            feature_config,
            library_version: library_version.into(),
            config_hash: None,
        }
    }

    pub fn for_library(library: &PatternLibrary, feature_config: FeatureConfig) -> Self {
        Self::zeros(library.len(), feature_config, library.version.clone())
    }

    pub fn num_patterns(&self) -> usize {
        self.num_patterns
    }

    pub fn dim(&self) -> usize {
        self.feature_config.dim
    }

    pub fn feature_config(&self) -> &FeatureConfig {
        &self.feature_config
    }

    pub fn library_version(&self) -> &str {
        &self.library_version
    }

    pub fn config_hash(&self) -> Option<&str> {
        self.config_hash.as_deref()
    }

    pub fn set_config_hash(&mut self, hash: impl Into<String>) {
        self.config_hash = Some(hash.into());
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [T] {
        &mut self.weights
    }

    pub fn bias(&self) -> &[T] {
        &self.bias
    }

    pub fn bias_mut(&mut self) -> &mut [T] {
        &mut self.bias
    }

    pub fn weight(&self, class: usize, feature: usize) -> T {
        self.weights[class * self.dim() + feature]
    }

    pub fn check_library(&self, library: &PatternLibrary) -> Result<(), SelectorError> {
        if library.len() != self.num_patterns || library.version != self.library_version {
            return Err(SelectorError::LibraryMismatch {
                model_version: self.library_version.clone(),
                model_patterns: self.num_patterns,
                library_version: library.version.clone(),
                library_patterns: library.len(),
            });
        }
        Ok(())
    }

    /// Class scores `θ·x + bias`.
    pub fn logits(&self, x: &FeatureVector<T>) -> Result<Vec<T>, SelectorError> {
        if x.dim != self.dim() {
            return Err(SelectorError::DimensionMismatch {
                expected: self.dim(),
                found: x.dim,
            });
        }
        Ok(self.logits_unchecked(x, T::one()))
    }

    /// `scale` multiplies every weight (not the bias); training uses it to
    /// apply weight decay lazily.
    pub(crate) fn logits_unchecked(&self, x: &FeatureVector<T>, scale: T) -> Vec<T> {
        let dim = self.dim();
        (0..self.num_patterns)
            .map(|k| {
                let row = &self.weights[k * dim..(k + 1) * dim];
                let dot: T = x.iter().map(|(i, v)| row[i] * v).sum();
                scale * dot + self.bias[k]
            })
            .collect()
    }

    pub fn predict_features(&self, x: &FeatureVector<T>) -> Result<PatternDistribution<T>, SelectorError> {
        Ok(PatternDistribution::from_logits(&self.logits(x)?))
    }

    pub fn predict<S>(&self, query: &str, context: &RetrievalContext<S>) -> Result<PatternDistribution<T>, SelectorError> {
        let x = featurize(query, context, &self.feature_config);
        self.predict_features(&x)
    }

    fn header(&self) -> Header {
        Header {
            num_patterns: self.num_patterns,
            dim: self.dim(),
            feature_config: self.feature_config.clone(),
            library_version: self.library_version.clone(),
            config_hash: self.config_hash.clone(),
            scalar: std::any::type_name::<T>().to_owned(),
        }
    }

    /// Binary container: magic, format version, a length-prefixed JSON
    /// header, then the bias and the dense weights as little-endian `f64`.
    pub fn write_to(&self, mut out: impl Write) -> std::io::Result<()> {
        let header = serde_json::to_vec(&self.header()).expect("header serializes");
        out.write_all(MAGIC)?;
        out.write_all(&FORMAT_VERSION.to_le_bytes())?;
        out.write_all(&(header.len() as u32).to_le_bytes())?;
        out.write_all(&header)?;
        let mut buf = Vec::with_capacity(8 * (self.bias.len() + self.weights.len()));
        for v in self.bias.iter().chain(&self.weights) {
            buf.extend_from_slice(&v.to_f64_lossless().to_le_bytes());
        }
        out.write_all(&buf)
    }

    pub fn read_from(mut input: impl Read) -> Result<Self, SelectorError> {
        let format = |msg: &str| SelectorError::ModelFormat(msg.to_owned());
        let mut magic = [0u8; 8];
        input.read_exact(&mut magic).map_err(|_| format("truncated header"))?;
        if &magic != MAGIC {
            return Err(format("not a selector model file"));
        }
        let mut word = [0u8; 4];
        input.read_exact(&mut word).map_err(|_| format("truncated header"))?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(SelectorError::ModelFormat(format!("unsupported format version {version}")));
        }
        input.read_exact(&mut word).map_err(|_| format("truncated header"))?;
        let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
        input.read_exact(&mut header).map_err(|_| format("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&header).map_err(|e| SelectorError::ModelFormat(e.to_string()))?;
        if header.dim != header.feature_config.dim {
            return Err(format("header dimension disagrees with feature config"));
        }
        let count = header.num_patterns * (header.dim + 1);
        let mut body = Vec::new();
        input.read_to_end(&mut body).map_err(|e| SelectorError::ModelFormat(e.to_string()))?;
        if body.len() != count * 8 {
            return Err(SelectorError::ModelFormat(format!(
                "expected {} parameter bytes, found {}",
                count * 8,
                body.len()
            )));
        }
        let mut params = body.chunks_exact(8).map(|c| {
            let v = f64::from_le_bytes(c.try_into().expect("8-byte chunk"));
            T::from_f64_lossy(v)
        });
        let bias: Vec<T> = params.by_ref().take(header.num_patterns).collect();
        let weights: Vec<T> = params.collect();
        if bias.iter().chain(&weights).any(|v| !v.is_finite()) {
            return Err(format("non-finite parameter"));
        }
        Ok(Self {
            num_patterns: header.num_patterns,
            weights,
            bias,
            feature_config: header.feature_config,
            library_version: header.library_version,
            config_hash: header.config_hash,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SelectorError> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|source| SelectorError::Io {
            path: path.to_owned(),
            source,
        })?;
        let mut out = std::io::BufWriter::new(file);
        self.write_to(&mut out)
            .and_then(|_| out.flush())
            .map_err(|source| SelectorError::Io {
                path: path.to_owned(),
                source,
            })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SelectorError> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|source| SelectorError::Io {
            path: path.to_owned(),
            source,
        })?;
        Self::read_from(std::io::BufReader::new(file))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn small_config(dim: usize) -> FeatureConfig {
        FeatureConfig {
            dim,
            ..Default::default()
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = SelectorModel::<f64>::zeros(10, small_config(32), "v");
        let x = FeatureVector::from_pairs(32, [(1, 2.0), (7, 1.0)]);
        let d = model.predict_features(&x).unwrap();
        assert!(d.probs.iter().all(|&p| (p - 0.1).abs() < 1e-15));
        assert_eq!(d.argmax(), 0);
    }

    #[test]
    fn argmax_examples() {
        let d = PatternDistribution { probs: vec![0.1, 0.7, 0.2] };
        assert_eq!(select_pattern(&d, SelectionMode::Argmax), 1);
        let u = PatternDistribution::<f64>::uniform(10);
        assert_eq!(select_pattern(&u, SelectionMode::Argmax), 0);
    }

    #[test]
    fn seeded_sampling_repeats() {
        let d = PatternDistribution { probs: vec![0.2, 0.3, 0.5] };
        let a = select_pattern(&d, SelectionMode::Sample { seed: 42 });
        let b = select_pattern(&d, SelectionMode::Sample { seed: 42 });
        assert_eq!(a, b);
        let one_hot = PatternDistribution::<f64>::one_hot(4, 2);
        for seed in 0..50 {
            assert_eq!(one_hot.sample(seed), 2);
        }
    }

    #[test]
    fn sampling_frequencies_follow_probs() {
        let d = PatternDistribution { probs: vec![0.25, 0.75] };
        let ones = (0..4000).filter(|&s| d.sample(s) == 1).count();
        assert!((2800..3200).contains(&ones), "{ones}");
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let model = SelectorModel::<f64>::zeros(3, small_config(16), "v");
        let x = FeatureVector::<f64>::empty(32);
        assert!(matches!(
            model.predict_features(&x),
            Err(SelectorError::DimensionMismatch { expected: 16, found: 32 })
        ));
    }

    #[test]
    fn library_mismatch_rejected() {
        let lib = PatternLibrary::reference();
        let model = SelectorModel::<f64>::for_library(&lib, small_config(8));
        assert!(model.check_library(&lib).is_ok());
        let other = SelectorModel::<f64>::zeros(10, small_config(8), "other");
        assert!(matches!(other.check_library(&lib), Err(SelectorError::LibraryMismatch { .. })));
    }

    #[test]
    fn save_load_bit_exact() {
        let mut model = SelectorModel::<f64>::zeros(3, small_config(16), "v1");
        for (i, w) in model.weights_mut().iter_mut().enumerate() {
            *w = (i as f64 * 0.37).sin() / 3.0;
        }
        model.bias_mut()[1] = -0.123456789;
        model.set_config_hash("abc");
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        let back = SelectorModel::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, model);
        let x = FeatureVector::from_pairs(16, [(0, 1.0), (5, 3.0), (15, 0.5)]);
        assert_eq!(back.predict_features(&x).unwrap(), model.predict_features(&x).unwrap());
    }

    #[test]
    fn f32_models_round_trip() {
        let mut model = SelectorModel::<f32>::zeros(2, small_config(4), "v");
        model.weights_mut()[3] = 0.1;
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        assert_eq!(SelectorModel::<f32>::read_from(buf.as_slice()).unwrap(), model);
    }

    #[test]
    fn corrupt_files_rejected() {
        let model = SelectorModel::<f64>::zeros(2, small_config(4), "v");
        let mut buf = Vec::new();
        model.write_to(&mut buf).unwrap();
        buf.pop();
        assert!(matches!(
            SelectorModel::<f64>::read_from(buf.as_slice()),
            Err(SelectorError::ModelFormat(_))
        ));
        assert!(SelectorModel::<f64>::read_from(&b"garbage!"[..]).is_err());
    }

    proptest! {
        #[test]
        fn probs_form_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
            let d = PatternDistribution::from_logits(&logits);
            let sum: f64 = d.probs.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(d.probs.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }

        #[test]
        fn softmax_shift_invariant(logits in prop::collection::vec(-20.0f64..20.0, 2..8), c in -100.0f64..100.0) {
            let a = PatternDistribution::from_logits(&logits);
            let shifted: Vec<f64> = logits.iter().map(|l| l + c).collect();
            let b = PatternDistribution::from_logits(&shifted);
            for (x, y) in a.probs.iter().zip(&b.probs) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
