use std::fmt::{self, Write as _};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::sampling::{ContaminationDraw, RobustParams};
use crate::error::{Error, Result};
use crate::model::{ClassTag, NetShape};
use crate::numerics::Activation;
use crate::targets::{TargetSpec, SYNTHETIC_TARGETS};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Experiment {
    Synthetic,
    Robust,
    Mnist,
    DeepsetsCompare,
    Diagnostics,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Experiment::Synthetic => "synthetic",
            Experiment::Robust => "robust",
            Experiment::Mnist => "mnist",
            Experiment::DeepsetsCompare => "deepsets_compare",
            Experiment::Diagnostics => "diagnostics",
        }
    }
}

impl FromStr for Experiment {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "synthetic" => Experiment::Synthetic,
            "robust" => Experiment::Robust,
            "mnist" => Experiment::Mnist,
            "deepsets_compare" => Experiment::DeepsetsCompare,
            "diagnostics" => Experiment::Diagnostics,
            _ => return Err(Error::usage(format!("unknown experiment `{s}`"))),
        })
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// How the (row, col) coordinates of a point cloud are rescaled.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CoordNorm {
    /// Per cloud: subtract the mean, divide by the standard deviation.
    Standardize,
    /// Per cloud: map to [0, 1].
    MinMax,
}

impl FromStr for CoordNorm {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standardize" => Ok(CoordNorm::Standardize),
            "minmax" => Ok(CoordNorm::MinMax),
            _ => Err(Error::usage(format!("unknown normalization `{s}`"))),
        }
    }
}

impl fmt::Display for CoordNorm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CoordNorm::Standardize => "standardize",
            CoordNorm::MinMax => "minmax",
        })
    }
}

pub const DEFAULT_LAMBDA_GRID: [f64; 4] = [0.0, 1e-6, 1e-4, 1e-2];

/// Typed experiment configuration. Defaults depend on the experiment kind;
/// see [`ExperimentConfig::defaults`].
#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub experiment: Experiment,
    pub classes: Vec<ClassTag>,
    pub targets: Vec<String>,
    pub d: usize,
    pub train_n: usize,
    pub test_n: Vec<usize>,
    pub train_sets: usize,
    pub val_sets: usize,
    pub test_sets: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Fixed penalty weight; `None` selects λ by cross-validation.
    pub lambda: Option<f64>,
    pub lambda_grid: Vec<f64>,
    pub seeds: usize,
    pub seed: u64,
    pub aug: f64,
    pub act1: Activation,
    pub act2: Activation,
    /// Width overrides applied to every class.
    pub h1: Option<usize>,
    pub h2: Option<usize>,
    pub half_width: f64,
    pub robust: RobustParams,
    pub minibatch: Option<usize>,
    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub test_images: Option<PathBuf>,
    pub test_labels: Option<PathBuf>,
    pub subset: usize,
    pub test_subset: usize,
    pub max_points: usize,
    pub threshold: f64,
    pub coord_norm: CoordNorm,
    pub threads: usize,
}

impl ExperimentConfig {
    pub fn defaults(experiment: Experiment) -> Self {
        let base = ExperimentConfig {
            experiment,
            classes: ClassTag::MEASURE_CLASSES.to_vec(),
            targets: SYNTHETIC_TARGETS.iter().map(|s| s.to_string()).collect(),
            d: 10,
            train_n: 4,
            test_n: vec![2, 4, 8, 16, 32, 64],
            train_sets: 100,
            val_sets: 1000,
            test_sets: 1000,
            iterations: 5000,
            lr: 5e-4,
            lambda: None,
            lambda_grid: DEFAULT_LAMBDA_GRID.to_vec(),
            seeds: 10,
            seed: 0,
            aug: NetShape::DEFAULT_AUG,
            act1: Activation::Relu,
            act2: Activation::Relu,
            h1: None,
            h2: None,
            half_width: 3.0,
            robust: RobustParams::default(),
            minibatch: None,
            images: None,
            labels: None,
            test_images: None,
            test_labels: None,
            subset: 2000,
            test_subset: 1000,
            max_points: 200,
            threshold: 0.5,
            coord_norm: CoordNorm::Standardize,
            threads: 1,
        };
        let mut cfg = match experiment {
            Experiment::Synthetic | Experiment::Diagnostics => base,
            Experiment::DeepsetsCompare => ExperimentConfig {
                classes: vec![ClassTag::S1, ClassTag::DeepSetsUnnormalized],
                targets: vec!["mean_inv".into()],
                ..base
            },
            Experiment::Robust => ExperimentConfig {
                targets: vec!["robust_mean_truth".into()],
                train_n: 20,
                test_n: vec![10, 20, 30, 40],
                train_sets: 5000,
                iterations: 30000,
                ..base
            },
            Experiment::Mnist => ExperimentConfig {
                targets: vec!["mnist".into()],
                d: 3,
                train_n: 200,
                test_n: vec![100, 200],
                iterations: 2000,
                lr: 1e-3,
                seeds: 5,
                minibatch: Some(100),
                h1: Some(500),
                h2: Some(500),
                ..base
            },
        };
        cfg.robust.d = cfg.d;
        cfg
    }

    /// Shrinks the robust suite to desk scale: 500 training sets and 5000
    /// iterations.
    pub fn apply_desk(&mut self) {
        if self.experiment == Experiment::Robust {
            self.train_sets = 500;
            self.iterations = 5000;
        }
    }

    pub fn widths(&self, class: ClassTag) -> (usize, usize) {
        let (h1, h2) = class.default_widths();
        (self.h1.unwrap_or(h1), self.h2.unwrap_or(h2))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d", self.d),
            ("train_n", self.train_n),
            ("train_sets", self.train_sets),
            ("val_sets", self.val_sets),
            ("test_sets", self.test_sets),
            ("seeds", self.seeds),
            ("max_points", self.max_points),
            ("threads", self.threads),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::usage(format!("{k} must be positive")));
            }
        }
        if self.classes.is_empty() || self.targets.is_empty() || self.test_n.is_empty() {
            return Err(Error::usage("classes, targets and test_n must be non-empty"));
        }
        if self.test_n.contains(&0) {
            return Err(Error::usage("test_n entries must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage("lr must be positive"));
        }
        if let Some(l) = self.lambda {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::usage("lambda must be non-negative"));
            }
        }
        if self.lambda_grid.is_empty() || self.lambda_grid.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::usage("lambda_grid must be a non-empty list of non-negative values"));
        }
        if !(self.half_width > 0.0 && self.half_width.is_finite()) {
            return Err(Error::usage("half_width must be positive"));
        }
        if !self.aug.is_finite() {
            return Err(Error::usage("aug must be finite"));
        }
        if self.h1 == Some(0) || self.h2 == Some(0) || self.minibatch == Some(0) {
            return Err(Error::usage("widths and minibatch must be positive"));
        }
        if !(self.threshold >= 0.0 && self.threshold < 1.0) {
            return Err(Error::usage("threshold must lie in [0, 1)"));
        }
        if self.experiment == Experiment::Robust {
            self.robust.validate()?;
        }
        if matches!(self.experiment, Experiment::Synthetic | Experiment::DeepsetsCompare) {
            for t in &self.targets {
                TargetSpec::from_name(t, self.d, 0)?;
            }
        }
        Ok(())
    }

    /// Applies one `key = value` assignment.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
            v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(T::from_str).collect()
        }
        fn opt<T: FromStr>(v: &str) -> std::result::Result<Option<T>, T::Err> {
            if v == "none" {
                Ok(None)
            } else {
                v.parse().map(Some)
            }
        }
        let bad = |what: &str| Error::usage(format!("`{key}` expects {what}, got `{value}`"));
        let count = || value.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let real = || value.parse::<f64>().map_err(|_| bad("a number"));
        let path = || Some(PathBuf::from(value));
        match key {
            "experiment" => self.experiment = value.parse()?,
            "class" | "classes" => self.classes = list(value)?,
            "target" | "targets" => self.targets = list(value).map_err(|_: std::convert::Infallible| bad(""))?,
            "d" => {
                self.d = count()?;
                self.robust.d = self.d;
            }
            "train_n" => self.train_n = count()?,
            "test_n" => self.test_n = list(value).map_err(|_| bad("a list of integers"))?,
            "train_sets" | "batch" => self.train_sets = count()?,
            "val_sets" => self.val_sets = count()?,
            "test_sets" => self.test_sets = count()?,
            "iterations" => self.iterations = count()?,
            "lr" => self.lr = real()?,
            "lambda" => self.lambda = if value == "cv" { None } else { Some(real()?) },
            "lambda_grid" => self.lambda_grid = list(value).map_err(|_| bad("a list of numbers"))?,
            "seeds" => self.seeds = count()?,
            "seed" => self.seed = value.parse().map_err(|_| bad("an unsigned 64-bit integer"))?,
            "aug" => self.aug = real()?,
            "act1" => self.act1 = value.parse()?,
            "act2" => self.act2 = value.parse()?,
            "h1" => self.h1 = opt(value).map_err(|_| bad("an integer or `none`"))?,
            "h2" => self.h2 = opt(value).map_err(|_| bad("an integer or `none`"))?,
            "half_width" => self.half_width = real()?,
            "eps" => self.robust.eps = real()?,
            "sigma_m" => self.robust.sigma_m = real()?,
            "sigma_m_prime" => self.robust.sigma_m_prime = real()?,
            "sigma_p" => self.robust.sigma_p = real()?,
            "sigma_q" => self.robust.sigma_q = real()?,
            "contamination" => {
                self.robust.contamination = match value {
                    "per_point" => ContaminationDraw::PerPoint,
                    "per_set" => ContaminationDraw::PerSet,
                    _ => return Err(bad("`per_point` or `per_set`")),
                }
            }
            "minibatch" => self.minibatch = opt(value).map_err(|_| bad("an integer or `none`"))?,
            "images" => self.images = path(),
            "labels" => self.labels = path(),
            "test_images" => self.test_images = path(),
            "test_labels" => self.test_labels = path(),
            "subset" => self.subset = count()?,
            "test_subset" => self.test_subset = count()?,
            "max_points" => self.max_points = count()?,
            "threshold" => self.threshold = real()?,
            "normalize" => self.coord_norm = value.parse()?,
            "threads" => self.threads = count()?,
            _ => return Err(Error::usage(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Every effective setting as `key = value` lines; parses back to an
    /// equal configuration.
    pub fn echo(&self) -> String {
        fn join<T: fmt::Display>(xs: &[T]) -> String {
            xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
        }
        fn join_f(xs: &[f64]) -> String {
            xs.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(", ")
        }
        fn opt<T: fmt::Display>(x: &Option<T>) -> String {
            x.as_ref().map_or("none".to_string(), |v| v.to_string())
        }
        let p = |x: &Option<PathBuf>| x.as_ref().map(|p| p.display().to_string());
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("experiment", self.experiment.to_string());
        kv("classes", join(&self.classes));
        kv("targets", join(&self.targets));
        kv("d", self.d.to_string());
        kv("train_n", self.train_n.to_string());
        kv("test_n", join(&self.test_n));
        kv("train_sets", self.train_sets.to_string());
        kv("val_sets", self.val_sets.to_string());
        kv("test_sets", self.test_sets.to_string());
        kv("iterations", self.iterations.to_string());
        kv("lr", format!("{:?}", self.lr));
        kv("lambda", self.lambda.map_or("cv".to_string(), |l| format!("{l:?}")));
        kv("lambda_grid", join_f(&self.lambda_grid));
        kv("seeds", self.seeds.to_string());
        kv("seed", self.seed.to_string());
        kv("aug", format!("{:?}", self.aug));
        kv("act1", self.act1.to_string());
        kv("act2", self.act2.to_string());
        kv("h1", opt(&self.h1));
        kv("h2", opt(&self.h2));
        kv("half_width", format!("{:?}", self.half_width));
        kv("eps", format!("{:?}", self.robust.eps));
        kv("sigma_m", format!("{:?}", self.robust.sigma_m));
        kv("sigma_m_prime", format!("{:?}", self.robust.sigma_m_prime));
        kv("sigma_p", format!("{:?}", self.robust.sigma_p));
        kv("sigma_q", format!("{:?}", self.robust.sigma_q));
        kv(
            "contamination",
            match self.robust.contamination {
                ContaminationDraw::PerPoint => "per_point",
                ContaminationDraw::PerSet => "per_set",
            }
            .to_string(),
        );
        kv("minibatch", opt(&self.minibatch));
        for (k, v) in [
            ("images", p(&self.images)),
            ("labels", p(&self.labels)),
            ("test_images", p(&self.test_images)),
            ("test_labels", p(&self.test_labels)),
        ] {
            if let Some(v) = v {
                kv(k, v);
            }
        }
        kv("subset", self.subset.to_string());
        kv("test_subset", self.test_subset.to_string());
        kv("max_points", self.max_points.to_string());
        kv("threshold", format!("{:?}", self.threshold));
        kv("normalize", self.coord_norm.to_string());
        kv("threads", self.threads.to_string());
        s
    }
}

/// Parses `key = value` lines (`#` starts a comment). The `experiment` key,
/// wherever it appears, selects the defaults the other keys override.
pub fn parse_config_str(text: &str, source_name: &str) -> Result<ExperimentConfig> {
    let mut pairs = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Parse {
                source_name: source_name.into(),
                line: i + 1,
                message: format!("expected `key = value`, got `{line}`"),
            });
        };
        pairs.push((i + 1, k.trim().to_string(), v.trim().to_string()));
    }
    let wrap = |line: usize, e: Error| Error::Parse {
        source_name: source_name.into(),
        line,
        message: e.to_string(),
    };
    let mut experiment = Experiment::Synthetic;
    for (line, k, v) in &pairs {
        if k == "experiment" {
            experiment = v.parse().map_err(|e| wrap(*line, e))?;
        }
    }
    let mut cfg = ExperimentConfig::defaults(experiment);
    for (line, k, v) in &pairs {
        cfg.set(k, v).map_err(|e| wrap(*line, e))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    parse_config_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lambda_value() {
        let c = parse_config_str("lambda = 1e-4\n", "t").unwrap();
        assert_eq!(c.lambda, Some(1e-4));
    }

    #[test]
    fn missing_lr_defaults() {
        let c = parse_config_str("# nothing\nseeds = 3  # fewer\n", "t").unwrap();
        assert_eq!(c.lr, 0.0005);
        assert_eq!(c.seeds, 3);
        assert_eq!(c.lambda, None);
        assert_eq!(c.lambda_grid, DEFAULT_LAMBDA_GRID.to_vec());
    }

    #[test]
    fn closed_class_enum() {
        let e = parse_config_str("\nclass = S4\n", "cfg").unwrap_err();
        assert!(matches!(e, Error::Parse { line: 2, .. }), "{e}");
    }

    #[test]
    fn rejects_unknown_and_mistyped() {
        assert!(parse_config_str("widht = 3", "t").is_err());
        assert!(parse_config_str("iterations = many", "t").is_err());
        assert!(parse_config_str("lr = -1", "t").is_err());
        assert!(parse_config_str("experiment = robust\neps = 2", "t").is_err());
        assert!(parse_config_str("just words", "t").is_err());
        assert!(parse_config_str("targets = max_inv, nope", "t").is_err());
    }

    #[test]
    fn experiment_selects_defaults_regardless_of_position() {
        let c = parse_config_str("iterations = 10\nexperiment = robust\n", "t").unwrap();
        assert_eq!(c.iterations, 10);
        assert_eq!(c.train_sets, 5000);
        assert_eq!(c.test_n, vec![10, 20, 30, 40]);
        let mut d = c.clone();
        d.apply_desk();
        assert_eq!((d.train_sets, d.iterations), (500, 5000));
    }

    #[test]
    fn echo_round_trips() {
        for e in ["synthetic", "robust", "mnist", "deepsets_compare", "diagnostics"] {
            let mut c = ExperimentConfig::defaults(e.parse().unwrap());
            c.images = Some(PathBuf::from("/tmp/x.idx"));
            c.lambda_grid = vec![0.0, 0.1 + 0.2];
            let back = parse_config_str(&c.echo(), "echo").unwrap();
            assert_eq!(back, c, "{e}");
        }
    }

    #[test]
    fn width_overrides() {
        let c = parse_config_str("h1 = 7", "t").unwrap();
        assert_eq!(c.widths(ClassTag::S1), (7, 100));
        assert_eq!(c.widths(ClassTag::S3), (7, 1000));
    }
}
