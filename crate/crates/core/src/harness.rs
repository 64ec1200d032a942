//! Experiment orchestration: seed derivation, λ cross-validation, the
//! multi-seed suites and single-cell replay.
//!
//! Every trained cell owns the stream derived from
//! `(base, class, target, λ, seed_index)`. Test sets depend only on
//! `(base, target, seed_index, N)`, so all classes and baselines of one seed
//! are scored on the same sets and can be compared pairwise.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;

use crate::data::config::{Experiment, ExperimentConfig};
use crate::data::results::{EvalReport, ReportRow};
use crate::data::sampling::{sample_robust_sets, sample_uniform_cube_sets};
use crate::data::SetBatch;
use crate::diagnostics::{standard_diagnostics, DiagnosticRow};
use crate::error::{Error, Result};
use crate::estimators::Estimator;
use crate::ingest::{image_to_pointcloud, load_digits, CloudParams, Digits};
use crate::model::{init_model, ClassTag, InitSpec, MeasureNet, NetShape};
use crate::numerics::{Matrix, Rng};
use crate::optim::{error_rate, evaluate_mse, train, Loss, TrainConfig, TrainReport, Targets, TrainingData};
use crate::targets::{eval_batch, TargetSpec};

/// Seed index reserved for the cross-validation runs of a column.
pub const CV_SEED_INDEX: u64 = u64::MAX;

/// Two validation errors closer than this are a tie, resolved towards the
/// larger λ.
const TIE_ABS: f64 = 1e-8;
const TIE_REL: f64 = 1e-6;

const MNIST_CLASSES: usize = 10;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// FNV-1a over length-prefixed fields, finished with splitmix64.
fn mix(fields: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    };
    for f in fields {
        eat(&(f.len() as u64).to_le_bytes());
        eat(f);
    }
    splitmix64(h)
}

/// Run seed of one cell.
pub fn derive_seed(base: u64, class: &str, target: &str, lambda: f64, seed_index: u64) -> u64 {
    mix(&[
        b"cell",
        &base.to_le_bytes(),
        class.as_bytes(),
        target.as_bytes(),
        &lambda.to_bits().to_le_bytes(),
        &seed_index.to_le_bytes(),
    ])
}

fn planted_seed(base: u64, target: &str) -> u64 {
    mix(&[b"planted", &base.to_le_bytes(), target.as_bytes()])
}

fn test_seed(base: u64, target: &str, seed_index: u64, n: usize) -> u64 {
    mix(&[
        b"test",
        &base.to_le_bytes(),
        target.as_bytes(),
        &seed_index.to_le_bytes(),
        &(n as u64).to_le_bytes(),
    ])
}

/// What a cell is evaluated by: a trainable class or a fixed estimator.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Model {
    Net(ClassTag),
    Baseline(Estimator),
}

impl Model {
    pub fn name(self) -> &'static str {
        match self {
            Model::Net(c) => c.name(),
            Model::Baseline(e) => e.name(),
        }
    }
}

impl FromStr for Model {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.parse::<ClassTag>() {
            Ok(c) => Ok(Model::Net(c)),
            Err(_) => Ok(Model::Baseline(s.parse()?)),
        }
    }
}

/// Identifies one row group of a report, e.g.
/// `synthetic|S1|mean_inv|lambda=0.0001|seed=3`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunId {
    pub experiment: Experiment,
    pub model: Model,
    pub target: String,
    pub lambda: f64,
    pub seed_index: u64,
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}|{}|{}|lambda={:?}|seed={}",
            self.experiment,
            self.model.name(),
            self.target,
            self.lambda,
            self.seed_index
        )
    }
}

impl FromStr for RunId {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::usage(format!("malformed run id `{s}`"));
        let parts: Vec<&str> = s.split('|').collect();
        let [exp, model, target, lambda, seed] = parts[..] else {
            return Err(bad());
        };
        let lambda = lambda.strip_prefix("lambda=").ok_or_else(bad)?.parse::<f64>().map_err(|_| bad())?;
        let seed_index = seed.strip_prefix("seed=").ok_or_else(bad)?.parse::<u64>().map_err(|_| bad())?;
        Ok(RunId {
            experiment: exp.parse()?,
            model: model.parse()?,
            target: target.to_string(),
            lambda,
            seed_index,
        })
    }
}

/// Point-cloud digits, converted once and shared by every cell.
#[derive(Clone, Debug)]
pub struct MnistData {
    pub train: SetBatch,
    pub train_labels: Vec<usize>,
    /// One test batch per entry of the test-N grid.
    pub test: Vec<(usize, SetBatch, Vec<usize>)>,
}

impl MnistData {
    /// Converts images to clouds: training clouds at `train_n` points, test
    /// clouds at each N of the grid. Conversion padding is seeded per image.
    pub fn from_digits(train: &Digits, test: &Digits, cfg: &ExperimentConfig) -> Result<Self> {
        let convert = |digits: &Digits, range: std::ops::Range<usize>, n: usize, split: &[u8]| -> Result<(SetBatch, Vec<usize>)> {
            let params = CloudParams {
                rows: digits.rows,
                cols: digits.cols,
                threshold: cfg.threshold,
                max_points: n,
                norm: cfg.coord_norm,
            };
            let mut sets = Vec::with_capacity(range.len());
            let mut labels = Vec::with_capacity(range.len());
            for i in range {
                let mut rng = Rng::from_stream(mix(&[b"cloud", &cfg.seed.to_le_bytes(), split, &(n as u64).to_le_bytes()]), i as u64);
                let cloud = image_to_pointcloud(&digits.images[i], digits.labels[i], &params, &mut rng)
                    .map_err(|e| Error::usage(format!("image {i}: {e}")))?;
                sets.push(cloud.points);
                labels.push(cloud.label as usize);
            }
            Ok((SetBatch::new(3, sets)?, labels))
        };
        let n_train = cfg.subset.min(train.images.len());
        let (train_sets, train_labels) = convert(train, 0..n_train, cfg.train_n, b"train")?;
        // without a separate test file the images after the training subset are used
        let test_range = if std::ptr::eq(train, test) {
            n_train..(n_train + cfg.test_subset).min(test.images.len())
        } else {
            0..cfg.test_subset.min(test.images.len())
        };
        if test_range.is_empty() {
            return Err(Error::usage("no test images left"));
        }
        let mut tests = Vec::new();
        for &n in &cfg.test_n {
            let (sets, labels) = convert(test, test_range.clone(), n, b"test")?;
            tests.push((n, sets, labels));
        }
        Ok(MnistData {
            train: train_sets,
            train_labels,
            test: tests,
        })
    }

    /// Loads the files named in the config.
    pub fn load(cfg: &ExperimentConfig) -> Result<Self> {
        let (Some(images), Some(labels)) = (&cfg.images, &cfg.labels) else {
            return Err(Error::usage("mnist needs `images` and `labels` paths"));
        };
        let train = load_digits(images, labels)?;
        match (&cfg.test_images, &cfg.test_labels) {
            (Some(ti), Some(tl)) => Self::from_digits(&train, &load_digits(ti, tl)?, cfg),
            (None, None) => Self::from_digits(&train, &train, cfg),
            _ => Err(Error::usage("give both test_images and test_labels, or neither")),
        }
    }
}

/// The learning problem behind a (target) column of a suite.
#[derive(Clone, Debug)]
pub enum Task {
    Synthetic(TargetSpec),
    Robust,
    Mnist(Arc<MnistData>),
}

impl Task {
    /// Builds the task for `target`, drawing planted weights from `base`.
    pub fn new(target: &str, cfg: &ExperimentConfig, base: u64) -> Result<Self> {
        match target {
            "robust_mean_truth" => Ok(Task::Robust),
            "mnist" => Ok(Task::Mnist(Arc::new(MnistData::load(cfg)?))),
            _ => Ok(Task::Synthetic(TargetSpec::from_name(target, cfg.d, planted_seed(base, target))?)),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Synthetic(spec) => spec.name(),
            Task::Robust => "robust_mean_truth",
            Task::Mnist(_) => "mnist",
        }
    }

    pub fn metric(&self) -> &'static str {
        match self {
            Task::Mnist(_) => "error_rate",
            _ => "mse",
        }
    }

    fn dim(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Task::Synthetic(_) => cfg.d,
            Task::Robust => cfg.robust.d,
            Task::Mnist(_) => 3,
        }
    }

    fn out_dim(&self, cfg: &ExperimentConfig) -> usize {
        match self {
            Task::Synthetic(spec) => spec.out_dim(),
            Task::Robust => cfg.robust.d,
            Task::Mnist(_) => MNIST_CLASSES,
        }
    }

    /// Fresh labelled sets of size `n`. MNIST has a fixed pool instead.
    fn sample(&self, cfg: &ExperimentConfig, n: usize, count: usize, rng: &mut Rng) -> Result<(SetBatch, Matrix)> {
        match self {
            Task::Synthetic(spec) => {
                let sets = sample_uniform_cube_sets(cfg.d, n, count, cfg.half_width, rng)?;
                let y = eval_batch(spec, &sets)?;
                Ok((sets, y))
            }
            Task::Robust => sample_robust_sets(&cfg.robust, n, count, rng),
            Task::Mnist(_) => Err(Error::usage("mnist sets come from files")),
        }
    }
}

/// Network of `class` for `task`. On the smooth neuron the frozen-first-layer
/// classes take the planted first layer, and with it its width.
pub fn build_net(class: ClassTag, task: &Task, cfg: &ExperimentConfig, init_seed: u64) -> Result<MeasureNet> {
    let (mut h1, h2) = cfg.widths(class);
    let shared = match task {
        Task::Synthetic(TargetSpec::SmoothNeuron(planted)) if class.frozen()[0] => Some(planted),
        _ => None,
    };
    if let Some(p) = shared {
        h1 = p.widths().0;
    }
    let shape = NetShape::for_class(class, task.dim(cfg))
        .with_widths(h1, h2)
        .with_out(task.out_dim(cfg))
        .with_activations(cfg.act1, cfg.act2)
        .with_aug(cfg.aug);
    let mut net = init_model(shape, InitSpec::kaiming(init_seed))?;
    if let Some(p) = shared {
        net.share_first_layer(p)?;
    }
    Ok(net)
}

fn train_config(cfg: &ExperimentConfig, task: &Task, lambda: f64, seed: u64) -> TrainConfig {
    TrainConfig {
        iterations: cfg.iterations,
        lr: cfg.lr,
        lambda,
        batch: cfg.train_sets,
        loss: match task {
            Task::Mnist(_) => Loss::CrossEntropy,
            _ => Loss::Mse,
        },
        seed,
        minibatch: cfg.minibatch,
    }
}

/// Mean squared error per coordinate, the same normalization as the
/// training loss.
fn baseline_mse(est: Estimator, sets: &SetBatch, truth: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for (s, t) in sets.sets().iter().zip(truth.iter_rows()) {
        let e = est.locate(s)?;
        total += e.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
    }
    Ok(total / (truth.rows() * truth.cols()) as f64)
}

/// A trained cell: the net, its history and its evaluation rows.
#[derive(Debug)]
pub struct CellOutcome {
    pub net: Option<MeasureNet>,
    pub history: Option<TrainReport>,
    pub rows: Vec<ReportRow>,
}

/// Trains (or, for a baseline, just scores) one cell and evaluates it at
/// every test N of the config.
pub fn run_cell(task: &Task, cfg: &ExperimentConfig, model: Model, lambda: f64, seed_index: u64) -> Result<CellOutcome> {
    let base = cfg.seed;
    let id = RunId {
        experiment: cfg.experiment,
        model,
        target: task.name().to_string(),
        lambda,
        seed_index,
    };
    let row = |test_n: usize, value: f64| ReportRow {
        run_id: id.to_string(),
        class: model.name().to_string(),
        target: task.name().to_string(),
        lambda,
        train_n: cfg.train_n,
        test_n,
        seed: seed_index,
        metric: task.metric().to_string(),
        value,
    };
    let fail = |e: Error| Error::usage(format!("{id}: {e}"));

    let (net, history) = match model {
        Model::Baseline(_) => (None, None),
        Model::Net(class) => {
            let seed = derive_seed(base, class.name(), task.name(), lambda, seed_index);
            let (net, hist) = fit(task, cfg, class, lambda, seed, None).map_err(fail)?;
            (Some(net), Some(hist))
        }
    };

    let mut rows = Vec::with_capacity(cfg.test_n.len());
    match task {
        Task::Mnist(data) => {
            let net = net.as_ref().ok_or_else(|| fail(Error::usage("baselines do not apply to mnist")))?;
            for (n, sets, labels) in &data.test {
                rows.push(row(*n, error_rate(net, sets, labels).map_err(fail)?));
            }
        }
        _ => {
            for &n in &cfg.test_n {
                let mut rng = Rng::new(test_seed(base, task.name(), seed_index, n));
                let (sets, truth) = task.sample(cfg, n, cfg.test_sets, &mut rng).map_err(fail)?;
                let value = match (&net, model) {
                    (Some(net), _) => evaluate_mse(net, &sets, &truth),
                    (None, Model::Baseline(est)) => baseline_mse(est, &sets, &truth),
                    (None, Model::Net(_)) => unreachable!("nets are always trained"),
                }
                .map_err(fail)?;
                rows.push(row(n, value));
            }
        }
    }
    Ok(CellOutcome { net, history, rows })
}

/// Trains one network from the stream `seed`. With `holdout`, the last
/// `holdout` MNIST training clouds are excluded (they validate instead).
fn fit(task: &Task, cfg: &ExperimentConfig, class: ClassTag, lambda: f64, seed: u64, holdout: Option<usize>) -> Result<(MeasureNet, TrainReport)> {
    let mut net = build_net(class, task, cfg, splitmix64(seed ^ 0x696e_6974))?;
    let data = match task {
        Task::Mnist(m) => {
            let keep = m.train.len() - holdout.unwrap_or(0);
            let idx: Vec<usize> = (0..keep).collect();
            TrainingData::new(m.train.select(&idx), Targets::Labels(m.train_labels[..keep].to_vec()))?
        }
        _ => {
            let mut rng = Rng::from_stream(seed, 1);
            let (sets, y) = task.sample(cfg, cfg.train_n, cfg.train_sets, &mut rng)?;
            TrainingData::new(sets, Targets::Values(y))?
        }
    };
    let hist = train(&mut net, &data, &train_config(cfg, task, lambda, seed))?;
    Ok((net, hist))
}

/// Outcome of a λ search.
#[derive(Clone, Debug, PartialEq)]
pub struct LambdaChoice {
    pub lambda: f64,
    /// `(λ, validation error)` for every grid value that was evaluated.
    pub validation: Vec<(f64, f64)>,
}

/// Index of the smallest error, ties (within tolerance) going to the larger λ.
fn pick_lambda(scores: &[(f64, f64)]) -> f64 {
    let best = scores.iter().map(|s| s.1).fold(f64::INFINITY, f64::min);
    scores
        .iter()
        .filter(|s| s.1 <= best + TIE_ABS + TIE_REL * best.abs())
        .map(|s| s.0)
        .fold(f64::NEG_INFINITY, f64::max)
}

/// Validation error of one grid value. All grid values of a column share
/// the training sets, validation sets and initialization, so they differ
/// only in λ.
fn validation_error(task: &Task, cfg: &ExperimentConfig, class: ClassTag, lambda: f64) -> Result<f64> {
    let seed = derive_seed(cfg.seed, class.name(), task.name(), 0.0, CV_SEED_INDEX);
    match task {
        Task::Mnist(m) => {
            let hold = (m.train.len() / 10).max(1);
            let (net, _) = fit(task, cfg, class, lambda, seed, Some(hold))?;
            let idx: Vec<usize> = (m.train.len() - hold..m.train.len()).collect();
            error_rate(&net, &m.train.select(&idx), &m.train_labels[m.train.len() - hold..])
        }
        _ => {
            let (net, _) = fit(task, cfg, class, lambda, seed, None)?;
            let mut rng = Rng::from_stream(seed, 2);
            let (sets, y) = task.sample(cfg, cfg.train_n, cfg.val_sets, &mut rng)?;
            evaluate_mse(&net, &sets, &y)
        }
    }
}

/// Trains one model per grid value on fresh data, validates each on
/// `val_sets` fresh sets at the training N and keeps the best λ.
pub fn cross_validate_lambda(class: ClassTag, task: &Task, cfg: &ExperimentConfig, grid: &[f64]) -> Result<LambdaChoice> {
    match grid {
        [] => Err(Error::usage("empty lambda grid")),
        [only] => Ok(LambdaChoice {
            lambda: *only,
            validation: Vec::new(),
        }),
        _ => {
            let scores = grid
                .iter()
                .map(|&l| Ok((l, validation_error(task, cfg, class, l)?)))
                .collect::<Result<Vec<_>>>()?;
            Ok(LambdaChoice {
                lambda: pick_lambda(&scores),
                validation: scores,
            })
        }
    }
}

/// A cell that could not be completed; the suite carries on without it.
#[derive(Clone, Debug, PartialEq)]
pub struct CellFailure {
    pub cell: String,
    pub message: String,
}

#[derive(Clone, Debug)]
pub struct SuiteOutcome {
    pub report: EvalReport,
    pub failures: Vec<CellFailure>,
    /// `(class, target, choice)` per trained column.
    pub lambdas: Vec<(ClassTag, String, LambdaChoice)>,
    /// Filled by the diagnostics experiment only.
    pub diagnostics: Vec<DiagnosticRow>,
}

fn pool(cfg: &ExperimentConfig) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads.max(1))
        .build()
        .map_err(|e| Error::usage(format!("thread pool: {e}")))
}

/// Runs every (class, target) column of the configured experiment: λ by
/// cross-validation unless fixed, then `seeds` independent trainings, each
/// evaluated at every test N. The robust experiment adds the location
/// baselines. Cells run in a pool; rows come out in a fixed order.
pub fn run_suite(cfg: &ExperimentConfig) -> Result<SuiteOutcome> {
    cfg.validate()?;
    let mut out = SuiteOutcome {
        report: EvalReport::new(),
        failures: Vec::new(),
        lambdas: Vec::new(),
        diagnostics: Vec::new(),
    };
    if cfg.experiment == Experiment::Diagnostics {
        out.diagnostics = standard_diagnostics(cfg.seed)?;
        for r in &out.diagnostics {
            if !r.ok {
                out.failures.push(CellFailure {
                    cell: format!("diagnostics|{}|{}", r.check, r.parameter),
                    message: format!("value {:?} against bound {:?}", r.value, r.bound),
                });
            }
        }
        return Ok(out);
    }
    let pool = pool(cfg)?;
    let mut tasks = Vec::new();
    for t in &cfg.targets {
        match Task::new(t, cfg, cfg.seed) {
            Ok(task) => tasks.push(task),
            Err(e) => out.failures.push(CellFailure {
                cell: format!("{}|*|{t}", cfg.experiment),
                message: e.to_string(),
            }),
        }
    }

    // λ selection, one job per (column, grid value)
    let columns: Vec<(ClassTag, &Task)> = tasks
        .iter()
        .flat_map(|t| cfg.classes.iter().map(move |&c| (c, t)))
        .collect();
    let grid: Vec<f64> = match cfg.lambda {
        Some(l) => vec![l],
        None => cfg.lambda_grid.clone(),
    };
    let cv_jobs: Vec<(usize, f64)> = if grid.len() > 1 {
        (0..columns.len()).flat_map(|c| grid.iter().map(move |&l| (c, l))).collect()
    } else {
        Vec::new()
    };
    let cv_scores: Vec<Result<f64>> = pool.install(|| {
        cv_jobs
            .par_iter()
            .map(|&(c, l)| validation_error(columns[c].1, cfg, columns[c].0, l))
            .collect()
    });
    let mut chosen: Vec<Option<f64>> = Vec::with_capacity(columns.len());
    for (c, &(class, task)) in columns.iter().enumerate() {
        if grid.len() == 1 {
            chosen.push(Some(grid[0]));
            out.lambdas.push((class, task.name().into(), LambdaChoice { lambda: grid[0], validation: Vec::new() }));
            continue;
        }
        let mut scores = Vec::new();
        let mut failed = None;
        for ((jc, l), r) in cv_jobs.iter().zip(&cv_scores) {
            if *jc != c {
                continue;
            }
            match r {
                Ok(e) => scores.push((*l, *e)),
                Err(e) => failed = Some(format!("lambda={l:?}: {e}")),
            }
        }
        match failed {
            Some(message) => {
                out.failures.push(CellFailure {
                    cell: format!("{}|{}|{}|cv", cfg.experiment, class.name(), task.name()),
                    message,
                });
                chosen.push(None);
            }
            None => {
                let lambda = pick_lambda(&scores);
                chosen.push(Some(lambda));
                out.lambdas.push((class, task.name().into(), LambdaChoice { lambda, validation: scores }));
            }
        }
    }

    let mut jobs: Vec<(Model, &Task, f64, u64)> = Vec::new();
    for task in &tasks {
        for (c, &(class, t)) in columns.iter().enumerate() {
            if !std::ptr::eq(t, task) {
                continue;
            }
            if let Some(l) = chosen[c] {
                jobs.extend((0..cfg.seeds as u64).map(|s| (Model::Net(class), task, l, s)));
            }
        }
        if matches!(task, Task::Robust) {
            for est in Estimator::LOCATION {
                jobs.extend((0..cfg.seeds as u64).map(|s| (Model::Baseline(est), task, 0.0, s)));
            }
        }
    }
    let results: Vec<Result<CellOutcome>> = pool.install(|| {
        jobs.par_iter()
            .map(|&(model, task, lambda, s)| run_cell(task, cfg, model, lambda, s))
            .collect()
    });
    for (&(model, task, lambda, s), r) in jobs.iter().zip(results) {
        match r {
            Ok(cell) => out.report.rows.extend(cell.rows),
            Err(e) => out.failures.push(CellFailure {
                cell: RunId {
                    experiment: cfg.experiment,
                    model,
                    target: task.name().into(),
                    lambda,
                    seed_index: s,
                }
                .to_string(),
                message: e.to_string(),
            }),
        }
    }
    Ok(out)
}

/// Recomputes the rows of a single run id in isolation.
pub fn replay(cfg: &ExperimentConfig, run_id: &str) -> Result<EvalReport> {
    let id: RunId = run_id.parse()?;
    if id.experiment != cfg.experiment {
        return Err(Error::usage(format!(
            "run id belongs to `{}`, config describes `{}`",
            id.experiment, cfg.experiment
        )));
    }
    let task = Task::new(&id.target, cfg, cfg.seed)?;
    let cell = run_cell(&task, cfg, id.model, id.lambda, id.seed_index)?;
    Ok(EvalReport { rows: cell.rows })
}

/// Mean and spread of one (class, target, N, metric) group over seeds.
#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub class: String,
    pub target: String,
    pub test_n: usize,
    pub metric: String,
    pub mean: f64,
    /// Unbiased sample standard deviation; NaN for a single seed.
    pub std: f64,
    pub count: usize,
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Groups in first-appearance order.
pub fn summarize(report: &EvalReport) -> Vec<Summary> {
    let mut keys: Vec<(&str, &str, usize, &str)> = Vec::new();
    for r in &report.rows {
        let k = (r.class.as_str(), r.target.as_str(), r.test_n, r.metric.as_str());
        if !keys.contains(&k) {
            keys.push(k);
        }
    }
    keys.into_iter()
        .map(|(class, target, test_n, metric)| {
            let v: Vec<f64> = report.values(class, target, test_n, metric).collect();
            let (mean, std) = mean_std(&v);
            Summary {
                class: class.into(),
                target: target.into(),
                test_n,
                metric: metric.into(),
                mean,
                std,
                count: v.len(),
            }
        })
        .collect()
}

pub fn summary_table(summaries: &[Summary]) -> String {
    let mut s = String::from("class,target,test_n,metric,mean,std,seeds\n");
    for x in summaries {
        s.push_str(&format!(
            "{},{},{},{},{:.6e},{:.6e},{}\n",
            x.class, x.target, x.test_n, x.metric, x.mean, x.std, x.count
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::config::parse_config_str;
    use crate::model::Layer;

    fn tiny(extra: &str) -> ExperimentConfig {
        let text = format!(
            "experiment = synthetic\nd = 2\ntrain_sets = 12\nval_sets = 20\ntest_sets = 20\niterations = 30\nh1 = 4\nh2 = 4\nseeds = 2\ntest_n = 2,4\n{extra}"
        );
        parse_config_str(&text, "tiny").unwrap()
    }

    #[test]
    fn seeds_separate_every_field() {
        let s = derive_seed(1, "S1", "mean_inv", 0.0, 0);
        assert_eq!(s, derive_seed(1, "S1", "mean_inv", 0.0, 0));
        for other in [
            derive_seed(2, "S1", "mean_inv", 0.0, 0),
            derive_seed(1, "S2", "mean_inv", 0.0, 0),
            derive_seed(1, "S1", "max_inv", 0.0, 0),
            derive_seed(1, "S1", "mean_inv", 1e-6, 0),
            derive_seed(1, "S1", "mean_inv", 0.0, 1),
            // field boundaries are length-prefixed
            derive_seed(1, "S1m", "ean_inv", 0.0, 0),
        ] {
            assert_ne!(s, other);
        }
    }

    #[test]
    fn run_id_round_trips() {
        let id = RunId {
            experiment: Experiment::Robust,
            model: Model::Baseline(Estimator::GeoMedian),
            target: "robust_mean_truth".into(),
            lambda: 1e-6,
            seed_index: 7,
        };
        let text = id.to_string();
        assert_eq!(text, "robust|geomedian|robust_mean_truth|lambda=1e-6|seed=7");
        assert!(!text.contains(','));
        assert_eq!(text.parse::<RunId>().unwrap(), id);
        assert!("synthetic|S1|mean_inv".parse::<RunId>().is_err());
    }

    #[test]
    fn tie_break_prefers_larger_lambda() {
        assert_eq!(pick_lambda(&[(0.0, 1.0), (1e-6, 0.5), (1e-4, 0.5), (1e-2, 2.0)]), 1e-4);
        assert_eq!(pick_lambda(&[(0.0, 0.1), (1e-2, 0.3)]), 0.0);
        assert_eq!(pick_lambda(&[(0.0, 1e-12), (1e-2, 3e-10)]), 1e-2);
    }

    #[test]
    fn singleton_grid_and_empty_grid() {
        let cfg = tiny("");
        let task = Task::new("mean_inv", &cfg, 0).unwrap();
        let c = cross_validate_lambda(ClassTag::S1, &task, &cfg, &[1e-4]).unwrap();
        assert_eq!(c.lambda, 1e-4);
        assert!(cross_validate_lambda(ClassTag::S1, &task, &cfg, &[]).is_err());
    }

    #[test]
    fn zero_target_picks_largest_lambda() {
        // a planted neuron with a zero output layer is the zero function; at
        // tiny widths every λ fits it to the tie tolerance, the penalised runs
        // by shrinking all weights
        let TargetSpec::Neuron(mut planted) = TargetSpec::from_name("neuron", 2, 3).unwrap() else {
            unreachable!()
        };
        planted.set_layer(Layer::Third, Matrix::zeros(1, 1)).unwrap();
        let task = Task::Synthetic(TargetSpec::Neuron(planted));
        for seed in 0..3 {
            let cfg = tiny(&format!("iterations = 20000\nlr = 0.002\nh1 = 2\nh2 = 2\nseed = {seed}\n"));
            let c = cross_validate_lambda(ClassTag::S1, &task, &cfg, &cfg.lambda_grid).unwrap();
            assert_eq!(c.validation.len(), 4);
            assert_eq!(c.lambda, 1e-2, "{:?}", c.validation);
        }
    }

    #[test]
    fn smooth_neuron_first_layer_is_shared() {
        let cfg = tiny("");
        let task = Task::new("smooth_neuron", &cfg, 5).unwrap();
        let Task::Synthetic(spec) = &task else { unreachable!() };
        let planted = spec.planted_net().unwrap();
        for class in [ClassTag::S2, ClassTag::S3] {
            let net = build_net(class, &task, &cfg, 1).unwrap();
            assert_eq!(net.widths().0, planted.widths().0);
            let mut expect = planted.layer(Layer::First).clone();
            expect.normalize_rows();
            assert!(net.layer(Layer::First).max_abs_diff(&expect) < 1e-15);
        }
        assert_eq!(build_net(ClassTag::S1, &task, &cfg, 1).unwrap().widths(), (4, 4));
    }

    #[test]
    fn suite_is_deterministic_and_replayable() {
        let cfg = tiny("targets = mean_inv, neuron\nclasses = S1, S3\nlambda = 0\nthreads = 2\n");
        let a = run_suite(&cfg).unwrap();
        assert!(a.failures.is_empty(), "{:?}", a.failures);
        assert_eq!(a.report.len(), 2 * 2 * 2 * 2);
        let b = run_suite(&ExperimentConfig { threads: 1, ..cfg.clone() }).unwrap();
        assert_eq!(a.report.to_csv(), b.report.to_csv());
        let row = &a.report.rows[5];
        let again = replay(&cfg, &row.run_id).unwrap();
        assert!(again.rows.contains(row));
    }

    #[test]
    fn robust_suite_adds_baselines_on_shared_test_sets() {
        let text = "experiment = robust\nd = 3\ntrain_sets = 10\ntest_sets = 15\niterations = 5\nh1 = 3\nh2 = 3\nseeds = 2\nlambda = 0\n";
        let cfg = parse_config_str(text, "r").unwrap();
        let out = run_suite(&cfg).unwrap();
        assert!(out.failures.is_empty(), "{:?}", out.failures);
        // 6 models x 2 seeds x 4 test sizes
        assert_eq!(out.report.len(), 6 * 2 * 4);
        for name in ["S1", "S2", "S3", "mean", "geomedian", "filter"] {
            assert_eq!(out.report.values(name, "robust_mean_truth", 20, "mse").count(), 2);
        }
        // the baseline reproduces a direct computation on the shared sets
        let mut rng = Rng::new(test_seed(cfg.seed, "robust_mean_truth", 1, 30));
        let (sets, truth) = sample_robust_sets(&cfg.robust, 30, cfg.test_sets, &mut rng).unwrap();
        let direct = baseline_mse(Estimator::Mean, &sets, &truth).unwrap();
        let row = out.report.rows.iter().find(|r| r.class == "mean" && r.seed == 1 && r.test_n == 30).unwrap();
        assert_eq!(row.value, direct);
    }

    #[test]
    fn failing_cells_are_recorded() {
        // second_inv needs two points; a training N of 1 fails every cell of
        // that column while mean_inv still runs
        let cfg = tiny("targets = second_inv, mean_inv\nclasses = S3\nlambda = 0\ntrain_n = 1\n");
        let out = run_suite(&cfg).unwrap();
        assert_eq!(out.failures.len(), 2);
        assert!(out.failures.iter().all(|f| f.cell.contains("second_inv")));
        assert_eq!(out.report.values("S3", "mean_inv", 4, "mse").count(), 2);
    }

    #[test]
    fn summaries_use_unbiased_std() {
        let cfg = tiny("targets = mean_inv\nclasses = S3\nlambda = 0\nseeds = 3\n");
        let out = run_suite(&cfg).unwrap();
        let s = summarize(&out.report);
        assert_eq!(s.len(), 2);
        let v: Vec<f64> = out.report.values("S3", "mean_inv", 2, "mse").collect();
        let m = v.iter().sum::<f64>() / 3.0;
        let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 2.0;
        assert!((s[0].mean - m).abs() < 1e-15);
        assert!((s[0].std - var.sqrt()).abs() < 1e-15);
        assert_eq!(mean_std(&[2.0, 4.0]), (3.0, 2f64.sqrt()));
    }
}
