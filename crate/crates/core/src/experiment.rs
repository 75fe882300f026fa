//! Generate, split, train, evaluate and compare against the random baseline.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::baseline::{estimate_random_baseline, BaselineConfig, BaselineReport};
use crate::datagen::{generate_dataset, Dataset, GeneratorConfig};
use crate::error::{Error, Result};
use crate::hierarchy::Hierarchy;
use crate::metrics::MetricsReport;
use crate::model::{evaluate_model, fit, EpochRecord, Model, TrainConfig, TrainData};
use crate::rng::{streams, substream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub train: TrainConfig,
    pub baseline_trials: usize,
    pub bit_probability: f64,
    pub train_fraction: f64,
    pub validation_fraction: f64,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            generator: GeneratorConfig::default(),
            train: TrainConfig::default(),
            baseline_trials: crate::baseline::DEFAULT_TRIALS,
            bit_probability: crate::baseline::DEFAULT_BIT_PROBABILITY,
            train_fraction: 0.60,
            validation_fraction: 0.08,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded shuffle cut into train / validation / test; the test part takes
/// the remainder.
pub fn split_indices(n: usize, train_fraction: f64, validation_fraction: f64, seed: u64) -> Result<Split> {
    let ok = |f: f64| (0.0..=1.0).contains(&f);
    if !ok(train_fraction) || !ok(validation_fraction) || train_fraction + validation_fraction > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "split fractions {train_fraction} + {validation_fraction} must lie in [0, 1]"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut substream(seed, streams::SPLIT, 0));
    let n_train = (n as f64 * train_fraction).round() as usize;
    let n_val = ((n as f64 * validation_fraction).round() as usize).min(n - n_train);
    let test = order.split_off(n_train + n_val);
    let validation = order.split_off(n_train);
    Ok(Split {
        train: order,
        validation,
        test,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub train_samples: usize,
    pub validation_samples: usize,
    pub test_samples: usize,
    /// Test split scored against the complete ground truth.
    pub trained: MetricsReport,
    /// Test split scored against the degraded annotations.
    pub trained_observed: MetricsReport,
    pub baseline: BaselineReport,
    pub history: Vec<EpochRecord>,
}

pub struct ExperimentOutcome {
    pub report: ExperimentReport,
    pub model: Model,
    pub dataset: Dataset,
    pub split: Split,
}

/// Full run. The baseline is scored on the same test labels as the model.
pub fn run_experiment(
    hierarchies: &[Hierarchy],
    config: &ExperimentConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<ExperimentOutcome> {
    let dataset = generate_dataset(hierarchies, &config.generator, config.seed)?;
    let split = split_indices(dataset.len(), config.train_fraction, config.validation_fraction, config.seed)?;
    let train = dataset.subset(&split.train);
    let validation = dataset.subset(&split.validation);
    let test = dataset.subset(&split.test);
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }

    let train_config = TrainConfig {
        seed: config.seed,
        ..config.train.clone()
    };
    let mut model = Model::new(hierarchies, dataset.features.ncols(), &train_config.architecture, config.seed)?;
    let validation_data = (!validation.is_empty()).then(|| TrainData {
        features: validation.features.view(),
        annotations: &validation.observed,
    });
    let history = fit(
        &mut model,
        hierarchies,
        TrainData {
            features: train.features.view(),
            annotations: &train.observed,
        },
        validation_data,
        &train_config,
        on_epoch,
    )?;

    let against = |labels| TrainData {
        features: test.features.view(),
        annotations: labels,
    };
    let trained = evaluate_model(&model, hierarchies, against(&test.ground_truth), train_config.threshold)?;
    let trained_observed = evaluate_model(&model, hierarchies, against(&test.observed), train_config.threshold)?;
    let baseline = estimate_random_baseline(
        hierarchies,
        &test.ground_truth,
        &BaselineConfig {
            trials: config.baseline_trials,
            bit_probability: config.bit_probability,
            seed: config.seed,
        },
    )?;

    Ok(ExperimentOutcome {
        report: ExperimentReport {
            config: config.clone(),
            train_samples: train.len(),
            validation_samples: validation.len(),
            test_samples: test.len(),
            trained,
            trained_observed,
            baseline,
            history,
        },
        model,
        dataset,
        split,
    })
}
