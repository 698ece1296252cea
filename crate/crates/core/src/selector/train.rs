use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::features::{featurize, FeatureConfig, FeatureVector};
use super::model::{PatternDistribution, SelectorModel};
use super::SelectorError;
use crate::corpus::RetrievalContext;
use crate::induction::PatternLibrary;
use crate::num::{lit, Real};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectorHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    /// `η_t = η₀ / (1 + t·decay)`, `t` counting mini-batch steps.
    pub decay: f64,
    /// Coefficient of `‖θ‖²`; the bias is not penalized.
    pub l2: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SelectorHyper {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.1,
            decay: 1e-3,
            l2: 1e-5,
            batch_size: 16,
            seed: 0,
        }
    }
}

impl SelectorHyper {
    fn validate(&self) -> Result<(), SelectorError> {
        let bad = SelectorError::InvalidHyper;
        if self.batch_size == 0 {
            return Err(bad("batch_size must be at least 1"));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(bad("learning_rate must be positive"));
        }
        if !(self.decay.is_finite() && self.decay >= 0.0) {
            return Err(bad("decay must be non-negative"));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(bad("l2 must be non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainingExample<S = f64> {
    pub query: String,
    pub context: RetrievalContext<S>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct TrainedSelector<T = f64> {
    pub model: SelectorModel<T>,
    /// Full objective (data loss plus penalty) after each epoch.
    pub epoch_losses: Vec<T>,
}

impl<T: Real> TrainedSelector<T> {
    pub fn write_loss_csv(&self, out: impl Write) -> std::io::Result<()> {
        write_loss_csv(&self.epoch_losses, out)
    }
}

pub fn write_loss_csv<T: Real>(losses: &[T], mut out: impl Write) -> std::io::Result<()> {
    writeln!(out, "epoch,loss")?;
    for (epoch, loss) in losses.iter().enumerate() {
        writeln!(out, "{},{}", epoch + 1, loss)?;
    }
    Ok(())
}

pub fn save_loss_csv<T: Real>(losses: &[T], path: impl AsRef<Path>) -> Result<(), SelectorError> {
    let path = path.as_ref();
    let io_err = |source| SelectorError::Io {
        path: path.to_owned(),
        source,
    };
    let mut out = std::io::BufWriter::new(std::fs::File::create(path).map_err(io_err)?);
    write_loss_csv(losses, &mut out).and_then(|_| out.flush()).map_err(io_err)
}

fn check_labels(labels: &[usize], num_patterns: usize) -> Result<(), SelectorError> {
    if labels.is_empty() {
        return Err(SelectorError::EmptyTrainingSet);
    }
    if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &y)| y >= num_patterns) {
        return Err(SelectorError::LabelOutOfRange {
            index,
            label,
            num_patterns,
        });
    }
    Ok(())
}

/// Featurizes every example with `feature_config` and trains against the
/// library's pattern set.
pub fn train_selector<T: Real, S>(
    examples: &[TrainingExample<S>],
    library: &PatternLibrary,
    feature_config: &FeatureConfig,
    hyper: &SelectorHyper,
) -> Result<TrainedSelector<T>, SelectorError> {
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    check_labels(&labels, library.len())?;
    let features: Vec<FeatureVector<T>> = examples
        .iter()
        .map(|e| featurize(&e.query, &e.context, feature_config))
        .collect();
    let model = SelectorModel::for_library(library, feature_config.clone());
    train_features(model, &features, &labels, hyper)
}

/// Mini-batch gradient descent on the mean cross-entropy plus `l2·‖θ‖²`,
/// starting from `model`. Single-threaded, so the result depends only on
/// the inputs and `hyper.seed`.
pub fn train_features<T: Real>(
    mut model: SelectorModel<T>,
    features: &[FeatureVector<T>],
    labels: &[usize],
    hyper: &SelectorHyper,
) -> Result<TrainedSelector<T>, SelectorError> {
    hyper.validate()?;
    check_labels(labels, model.num_patterns())?;
    assert_eq!(features.len(), labels.len(), "one label per feature vector");
    if let Some(x) = features.iter().find(|x| x.dim != model.dim()) {
        return Err(SelectorError::DimensionMismatch {
            expected: model.dim(),
            found: x.dim,
        });
    }

    let m = model.num_patterns();
    let dim = model.dim();
    let l2: T = lit(hyper.l2);
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut order: Vec<usize> = (0..features.len()).collect();
    // θ = scale · stored weights, so the decay term costs O(1) per step
    let mut scale = T::one();
    let mut step = 0usize;
    let mut epoch_losses = Vec::with_capacity(hyper.epochs);
    let mut residual = vec![T::zero(); m];

    for _ in 0..hyper.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let eta: T = lit(hyper.learning_rate / (1.0 + step as f64 * hyper.decay));
            step += 1;
            let inv_n = T::one() / T::from_usize_lossy(batch.len());
            // gradients are taken at the pre-step parameters
            let residuals: Vec<Vec<T>> = batch
                .iter()
                .map(|&i| {
                    let p = PatternDistribution::from_logits(&model.logits_unchecked(&features[i], scale)).probs;
                    p.into_iter()
                        .enumerate()
                        .map(|(k, pk)| if k == labels[i] { pk - T::one() } else { pk })
                        .collect()
                })
                .collect();

            let shrink = T::one() - lit::<T>(2.0) * eta * l2;
            scale *= shrink;
            let step_w = eta * inv_n / scale;
            residual.iter_mut().for_each(|r| *r = T::zero());
            for (&i, res) in batch.iter().zip(&residuals) {
                for k in 0..m {
                    residual[k] += res[k];
                    let row = &mut model.weights[k * dim..(k + 1) * dim];
                    for (j, v) in features[i].iter() {
                        row[j] -= step_w * res[k] * v;
                    }
                }
            }
            for (b, r) in model.bias.iter_mut().zip(&residual) {
                *b -= eta * inv_n * *r;
            }
            if scale < lit(1e-6) {
                model.weights.iter_mut().for_each(|w| *w *= scale);
                scale = T::one();
            }
        }
        if scale != T::one() {
            model.weights.iter_mut().for_each(|w| *w *= scale);
            scale = T::one();
        }
        epoch_losses.push(objective(&model, features, labels, hyper.l2));
    }
    Ok(TrainedSelector { model, epoch_losses })
}

fn log_softmax_at<T: Real>(logits: &[T], k: usize) -> T {
    let max = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let total: T = logits.iter().map(|&l| (l - max).exp()).sum();
    logits[k] - max - total.ln()
}

/// `−(1/N) Σ log π(y_i | x_i) + l2·‖θ‖²`.
pub fn objective<T: Real>(model: &SelectorModel<T>, features: &[FeatureVector<T>], labels: &[usize], l2: f64) -> T {
    let n = T::from_usize_lossy(features.len());
    let nll: T = features
        .iter()
        .zip(labels)
        .map(|(x, &y)| -log_softmax_at(&model.logits_unchecked(x, T::one()), y))
        .sum();
    let penalty: T = model.weights.iter().map(|&w| w * w).sum();
    nll / n + lit::<T>(l2) * penalty
}

/// Dense gradient of [`objective`]: `(d/dθ row-major, d/dbias)`.
pub fn gradient<T: Real>(
    model: &SelectorModel<T>,
    features: &[FeatureVector<T>],
    labels: &[usize],
    l2: f64,
) -> (Vec<T>, Vec<T>) {
    let dim = model.dim();
    let inv_n = T::one() / T::from_usize_lossy(features.len());
    let two_l2: T = lit(2.0 * l2);
    let mut gw: Vec<T> = model.weights.iter().map(|&w| two_l2 * w).collect();
    let mut gb = vec![T::zero(); model.num_patterns()];
    for (x, &y) in features.iter().zip(labels) {
        let p = PatternDistribution::from_logits(&model.logits_unchecked(x, T::one())).probs;
        for (k, pk) in p.into_iter().enumerate() {
            let r = if k == y { pk - T::one() } else { pk } * inv_n;
            gb[k] += r;
            for (j, v) in x.iter() {
                gw[k * dim + j] += r * v;
            }
        }
    }
    (gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn config(dim: usize) -> FeatureConfig {
        FeatureConfig {
            dim,
            ..Default::default()
        }
    }

    fn random_instance(seed: u64) -> (SelectorModel<f64>, Vec<FeatureVector<f64>>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = rng.random_range(2..=4);
        let dim = rng.random_range(4..=32);
        let n = rng.random_range(1..=8);
        let mut model = SelectorModel::zeros(m, config(dim), "v");
        for w in model.weights_mut() {
            *w = rng.random_range(-1.0..1.0);
        }
        for b in model.bias_mut() {
            *b = rng.random_range(-1.0..1.0);
        }
        let xs = (0..n)
            .map(|_| {
                let nnz = rng.random_range(0..=dim.min(6));
                FeatureVector::from_pairs(
                    dim,
                    (0..nnz).map(|_| (rng.random_range(0..dim as u32), rng.random_range(0.1..3.0))),
                )
            })
            .collect();
        let ys = (0..n).map(|_| rng.random_range(0..m)).collect();
        (model, xs, ys)
    }

    #[test]
    fn zero_weights_loss_is_ln_m() {
        let lib = PatternLibrary::reference();
        let model = SelectorModel::<f64>::for_library(&lib, config(64));
        let xs = vec![
            FeatureVector::from_pairs(64, [(3, 1.0)]),
            FeatureVector::from_pairs(64, [(9, 2.0), (10, 1.0)]),
        ];
        let loss = objective(&model, &xs, &[0, 7], 1e-5);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..20 {
            let (model, xs, ys) = random_instance(seed);
            let (gw, gb) = gradient(&model, &xs, &ys, 1e-3);
            let check = |analytic: f64, numeric: f64| {
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
                assert!(rel < 1e-5, "seed {seed}: {analytic} vs {numeric}");
            };
            for (idx, &analytic) in gw.iter().enumerate() {
                let mut plus = model.clone();
                plus.weights_mut()[idx] += h;
                let mut minus = model.clone();
                minus.weights_mut()[idx] -= h;
                let numeric = (objective(&plus, &xs, &ys, 1e-3) - objective(&minus, &xs, &ys, 1e-3)) / (2.0 * h);
                check(analytic, numeric);
            }
            for (idx, &analytic) in gb.iter().enumerate() {
                let mut plus = model.clone();
                plus.bias_mut()[idx] += h;
                let mut minus = model.clone();
                minus.bias_mut()[idx] -= h;
                let numeric = (objective(&plus, &xs, &ys, 1e-3) - objective(&minus, &xs, &ys, 1e-3)) / (2.0 * h);
                check(analytic, numeric);
            }
        }
    }

    #[test]
    fn one_epoch_on_single_example_lowers_loss() {
        for seed in 0..10 {
            let (model, xs, ys) = random_instance(seed);
            let x = vec![xs[0].clone()];
            let y = vec![ys[0]];
            let before = objective(&model, &x, &y, 0.0);
            let hyper = SelectorHyper {
                epochs: 1,
                learning_rate: 0.01,
                ..Default::default()
            };
            let trained = train_features(model, &x, &y, &hyper).unwrap();
            let after = objective(&trained.model, &x, &y, 0.0);
            assert!(after < before, "seed {seed}: {after} >= {before}");
        }
    }

    #[test]
    fn lazy_decay_matches_dense_step() {
        let (model, xs, ys) = random_instance(3);
        let hyper = SelectorHyper {
            epochs: 1,
            batch_size: xs.len(),
            l2: 0.05,
            learning_rate: 0.2,
            ..Default::default()
        };
        let (gw, gb) = gradient(&model, &xs, &ys, hyper.l2);
        let trained = train_features(model.clone(), &xs, &ys, &hyper).unwrap();
        for (i, (&w, g)) in model.weights().iter().zip(&gw).enumerate() {
            assert!((trained.model.weights()[i] - (w - 0.2 * g)).abs() < 1e-12);
        }
        for (i, (&b, g)) in model.bias().iter().zip(&gb).enumerate() {
            assert!((trained.model.bias()[i] - (b - 0.2 * g)).abs() < 1e-12);
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (model, xs, ys) = random_instance(5);
        let hyper = SelectorHyper {
            batch_size: 3,
            seed: 11,
            ..Default::default()
        };
        let a = train_features(model.clone(), &xs, &ys, &hyper).unwrap();
        let b = train_features(model, &xs, &ys, &hyper).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.epoch_losses, b.epoch_losses);
        assert_eq!(a.epoch_losses.len(), 20);
    }

    #[test]
    fn rejects_bad_labels_and_empty_sets() {
        let lib = PatternLibrary::reference();
        let ex = TrainingExample {
            query: "q".into(),
            context: RetrievalContext::<f64>::empty("q"),
            label: 10,
        };
        let cfg = config(16);
        let hyper = SelectorHyper::default();
        assert!(matches!(
            train_selector::<f64, f64>(&[ex], &lib, &cfg, &hyper),
            Err(SelectorError::LabelOutOfRange { index: 0, label: 10, .. })
        ));
        assert!(matches!(
            train_selector::<f64, f64>(&[], &lib, &cfg, &hyper),
            Err(SelectorError::EmptyTrainingSet)
        ));
    }

    #[test]
    fn loss_csv_format() {
        let mut out = Vec::new();
        write_loss_csv(&[0.5f64, 0.25], &mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,loss\n1,0.5\n2,0.25\n");
    }
}
