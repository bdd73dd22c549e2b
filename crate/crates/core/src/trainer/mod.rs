//! Training orchestration: batching, optimizer steps, evaluation, metrics,
//! checkpoints and gradient checks.

mod checkpoint;
mod config;
mod gradcheck;
mod metrics;
mod model;

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;

pub use checkpoint::{Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::{ExperimentKind, TrainConfig};
pub use gradcheck::{
    consistency_errors, gradient_check, random_parameters, refine_parameters, small_dataset, GradCheckReport,
    GroupError,
};
pub use metrics::{EpochRecord, MetricsLog, METRICS_HEADER};
pub use model::{GradientSet, Parameters, SampleTrajectory, Setup, GROUP_NAMES};

use crate::data::{generate_spirals, load_mnist_idx, read_spirals_csv, LabeledDataset, SpiralSpec};
use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::numerics::{derive_seed, SeededRng};
use crate::optimizer::GroupOptimizer;
use crate::readout::LossReport;

pub const MNIST_TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const MNIST_TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const MNIST_TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

/// Training and test sets for `config`.
///
/// Spiral sets come from CSV files when configured, otherwise they are
/// generated from child seeds 0 (train) and 1 (test) of `seed`. MNIST sets
/// are the first `train_limit` / `test_limit` samples of the IDX files in
/// `mnist_dir`.
pub fn load_datasets(config: &TrainConfig) -> Result<(LabeledDataset, LabeledDataset)> {
    match config.kind {
        ExperimentKind::OeoMnist => {
            let dir = config
                .mnist_dir
                .as_ref()
                .ok_or_else(|| Error::Config("oeo_mnist needs mnist_dir".into()))?;
            let train = load_mnist_idx(&dir.join(MNIST_TRAIN_IMAGES), &dir.join(MNIST_TRAIN_LABELS))?;
            let test = load_mnist_idx(&dir.join(MNIST_TEST_IMAGES), &dir.join(MNIST_TEST_LABELS))?;
            Ok((train.head(config.train_limit)?, test.head(config.test_limit)?))
        }
        _ => {
            let spiral = |path: &Option<std::path::PathBuf>, per_class: usize, child: u64| match path {
                Some(p) => read_spirals_csv(std::io::BufReader::new(std::fs::File::open(p)?)),
                None => generate_spirals(
                    SpiralSpec {
                        count_per_class: per_class,
                        noise_sd: config.noise_sd,
                        turns: config.turns,
                    },
                    derive_seed(config.seed, child),
                ),
            };
            Ok((
                spiral(&config.train_csv, config.train_per_class, 0)?,
                spiral(&config.test_csv, config.test_per_class, 1)?,
            ))
        }
    }
}

pub fn new_optimizer(config: &TrainConfig, params: &Parameters) -> Result<GroupOptimizer> {
    let lens = params.group_lens();
    let alphas = [config.alpha_u, config.alpha_omega, config.alpha_b];
    let groups: Vec<(&str, usize, _)> = GROUP_NAMES
        .iter()
        .zip(lens)
        .zip(alphas)
        .map(|((name, n), a)| (*name, n, config.adam_hyper(a)))
        .collect();
    GroupOptimizer::new(config.optimizer, &groups)
}

/// Result of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: Parameters,
    pub log: MetricsLog,
    pub optimizer: GroupOptimizer,
}

/// Trains from the deterministic initial parameters.
pub fn train(
    config: &TrainConfig,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    exec: &Executor,
) -> Result<TrainOutcome> {
    let setup = Setup::new(config)?;
    let params = setup.init_parameters();
    train_from(&setup, params, None, train_set, test_set, exec)
}

/// Trains `params` for `config.epochs` epochs. Writes the metrics after every
/// epoch and the final checkpoint when the configuration names the paths.
pub fn train_from(
    setup: &Setup,
    mut params: Parameters,
    optimizer: Option<GroupOptimizer>,
    train_set: &LabeledDataset,
    test_set: &LabeledDataset,
    exec: &Executor,
) -> Result<TrainOutcome> {
    let config = &setup.config;
    config.validate()?;
    setup.check_parameters(&params)?;
    setup.check_dataset(train_set)?;
    setup.check_dataset(test_set)?;
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut opt = match optimizer {
        Some(o) => o,
        None => new_optimizer(config, &params)?,
    };
    let batch_size = config.batch_size.min(train_set.len());
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = MetricsLog::default();
    let started = Instant::now();

    for epoch in 1..=config.epochs {
        if batch_size < train_set.len() {
            order.sort_unstable();
            let mut rng = SeededRng::new(derive_seed(config.seed, 1 + epoch as u64)).child(0);
            order.shuffle(&mut rng);
        }
        let mut stats = GradientSet::zeros([0, 0, 0]);
        for (b, batch) in order.chunks(batch_size).enumerate() {
            let abort = |params: &Parameters, opt: &GroupOptimizer, e: Error| -> Error {
                if let Some(path) = &config.checkpoint_path {
                    let ck = Checkpoint::new(config, params, Some(opt), epoch as u64 - 1);
                    if let Err(save) = ck.save(path) {
                        eprintln!("warning: could not save checkpoint after failure: {save}");
                    }
                }
                Error::Training {
                    epoch,
                    batch: b,
                    source: Box::new(e),
                }
            };
            let g = match setup.batch_gradient(exec, &params, train_set, batch, config.gradient_mode) {
                Ok(g) => g,
                Err(e) => return Err(abort(&params, &opt, e)),
            };
            if !g.loss_sum.is_finite() {
                let e = Error::NonFinite(format!("training loss ({})", g.loss_sum));
                return Err(abort(&params, &opt, e));
            }
            if let Err(e) = opt.step(&mut params.groups_mut(), &g.groups()) {
                return Err(abort(&params, &opt, e));
            }
            stats.loss_sum += g.loss_sum;
            stats.correct += g.correct;
            stats.diverged += g.diverged;
            stats.samples += g.samples;
        }
        let test = setup.evaluate(exec, &params, test_set)?;
        log.push(EpochRecord {
            epoch,
            train_loss: stats.mean_loss(),
            train_acc: stats.accuracy(),
            test_loss: test.loss,
            test_acc: test.accuracy,
            wall_s: if config.wall_clock {
                started.elapsed().as_secs_f64()
            } else {
                0.0
            },
            train_diverged: stats.diverged,
            test_diverged: test.diverged,
        })?;
        if let Some(path) = &config.metrics_path {
            log.save(path)?;
        }
    }
    if let Some(path) = &config.checkpoint_path {
        Checkpoint::new(config, &params, Some(&opt), config.epochs as u64).save(path)?;
    }
    Ok(TrainOutcome {
        params,
        log,
        optimizer: opt,
    })
}

/// Forward-only evaluation of `params` on `data`.
pub fn evaluate(config: &TrainConfig, params: &Parameters, data: &LabeledDataset, exec: &Executor) -> Result<LossReport> {
    Setup::new(config)?.evaluate(exec, params, data)
}

pub fn load_parameters(path: &Path, config: &TrainConfig) -> Result<Parameters> {
    Ok(Checkpoint::load(path, config)?.params)
}
