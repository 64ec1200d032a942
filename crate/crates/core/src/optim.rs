//! Adam and the penalized training loop `loss + λ · path_norm`.

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use crate::data::SetBatch;
use crate::error::{Error, Result};
use crate::model::{Gradients, Layer, MeasureNet};
use crate::numerics::{gemm, Matrix, Rng, Trans};

/// Adam moments for a list of parameter matrices.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    /// Zero moments for parameters of the given shapes.
    pub fn new(lr: f64, shapes: &[(usize, usize)]) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
            v: shapes.iter().map(|&(r, c)| Matrix::zeros(r, c)).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// One bias-corrected Adam update of `params` in place.
pub fn adam_step(params: &mut [&mut Matrix], grads: &[&Matrix], state: &mut AdamState) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::dim(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::dim(format!(
                "parameter {i}: {:?} vs gradient {:?}",
                p.shape(),
                g.shape()
            )));
        }
        if !g.is_finite() {
            return Err(Error::TrainingAborted {
                iteration: state.t as usize,
                reason: format!("non-finite gradient in parameter {i}"),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (i, p) in params.iter_mut().enumerate() {
        let g = grads[i].as_slice();
        let m = state.m[i].as_mut_slice();
        let v = state.v[i].as_mut_slice();
        for (j, w) in p.as_mut_slice().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mhat = m[j] / c1;
            let vhat = v[j] / c2;
            *w -= state.lr * mhat / (vhat.sqrt() + state.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Loss {
    /// Mean over sets and output coordinates of the squared error.
    Mse,
    /// Softmax followed by mean negative log-likelihood.
    CrossEntropy,
}

impl FromStr for Loss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Loss::Mse),
            "cross_entropy" | "ce" => Ok(Loss::CrossEntropy),
            other => Err(Error::usage(format!("unknown loss `{other}`"))),
        }
    }
}

impl fmt::Display for Loss {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Loss::Mse => "mse",
            Loss::CrossEntropy => "cross_entropy",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Number of training sets drawn by callers that sample data.
    pub batch: usize,
    pub loss: Loss,
    pub seed: u64,
    /// Sets per Adam step; `None` uses the whole training batch each step.
    pub minibatch: Option<usize>,
}

impl TrainConfig {
    /// Symmetric-function experiments: 5000 full-batch steps over 100 sets.
    pub fn synthetic() -> Self {
        TrainConfig {
            iterations: 5000,
            lr: 5e-4,
            lambda: 0.0,
            batch: 100,
            loss: Loss::Mse,
            seed: 0,
            minibatch: None,
        }
    }

    /// Robust mean estimation at full scale.
    pub fn robust() -> Self {
        TrainConfig {
            iterations: 30_000,
            batch: 5000,
            ..TrainConfig::synthetic()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::usage(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::usage(format!("lr must be > 0, got {}", self.lr)));
        }
        if self.minibatch == Some(0) {
            return Err(Error::usage("minibatch must be positive"));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::synthetic()
    }
}

/// Supervision for a batch of sets.
#[derive(Clone, Debug, PartialEq)]
pub enum Targets {
    /// One row of regression targets per set.
    Values(Matrix),
    /// One class label per set.
    Labels(Vec<usize>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Values(m) => m.rows(),
            Targets::Labels(l) => l.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn select(&self, idx: &[usize]) -> Targets {
        match self {
            Targets::Values(m) => Targets::Values(m.select_rows(idx)),
            Targets::Labels(l) => Targets::Labels(idx.iter().map(|&i| l[i]).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingData {
    pub sets: SetBatch,
    pub targets: Targets,
}

impl TrainingData {
    pub fn new(sets: SetBatch, targets: Targets) -> Result<Self> {
        if sets.len() != targets.len() {
            return Err(Error::dim(format!(
                "{} sets but {} targets",
                sets.len(),
                targets.len()
            )));
        }
        Ok(TrainingData { sets, targets })
    }

    pub fn len(&self) -> usize {
        self.sets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sets.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HistoryRow {
    pub iteration: usize,
    pub data_loss: f64,
    pub penalty: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Objective at the parameters before each step.
    pub history: Vec<HistoryRow>,
}

impl TrainReport {
    pub fn final_data_loss(&self) -> Option<f64> {
        self.history.last().map(|r| r.data_loss)
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "iteration,data_loss,penalty,total")?;
        for r in &self.history {
            writeln!(w, "{},{:?},{:?},{:?}", r.iteration, r.data_loss, r.penalty, r.total)?;
        }
        Ok(())
    }
}

const DIVERGENCE_LIMIT: f64 = 1e12;

/// Loss value and `∂loss/∂outputs`.
pub fn loss_and_upstream(out: &Matrix, targets: &Targets, loss: Loss) -> Result<(f64, Matrix)> {
    match (loss, targets) {
        (Loss::Mse, Targets::Values(y)) => {
            if y.shape() != out.shape() {
                return Err(Error::dim(format!(
                    "outputs {:?} vs targets {:?}",
                    out.shape(),
                    y.shape()
                )));
            }
            let n = (out.rows() * out.cols()) as f64;
            let mut up = Matrix::zeros(out.rows(), out.cols());
            let mut total = 0.0;
            for ((u, &o), &t) in up.as_mut_slice().iter_mut().zip(out.as_slice()).zip(y.as_slice()) {
                let r = o - t;
                total += r * r;
                *u = 2.0 * r / n;
            }
            Ok((total / n, up))
        }
        (Loss::CrossEntropy, Targets::Labels(labels)) => {
            if labels.len() != out.rows() {
                return Err(Error::dim("one label per output row required"));
            }
            let b = out.rows() as f64;
            let mut up = Matrix::zeros(out.rows(), out.cols());
            let mut total = 0.0;
            for (i, &label) in labels.iter().enumerate() {
                if label >= out.cols() {
                    return Err(Error::usage(format!(
                        "label {label} out of range for {} logits",
                        out.cols()
                    )));
                }
                let logits = out.row(i);
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                let log_z = max + z.ln();
                total += log_z - logits[label];
                for (u, l) in up.row_mut(i).iter_mut().zip(logits) {
                    *u = (l - log_z).exp() / b;
                }
                up[(i, label)] -= 1.0 / b;
            }
            Ok((total / b, up))
        }
        (loss, _) => Err(Error::usage(format!(
            "loss {loss} does not match the kind of targets supplied"
        ))),
    }
}

/// Data loss and path-norm penalty of `net` on `data`, from scratch.
pub fn objective(net: &MeasureNet, data: &TrainingData, loss: Loss, lambda: f64) -> Result<(f64, f64)> {
    let out = net.predict_batch(&data.sets)?;
    let (l, _) = loss_and_upstream(&out, &data.targets, loss)?;
    Ok((l, lambda * net.path_norm()))
}

/// Which inputs the trainable layers see; frozen layers are evaluated once.
enum Features {
    Sets,
    Pooled(Matrix),
    Hidden(Matrix),
}

/// Minimizes `loss + λ · path_norm` with Adam, updating only unfrozen
/// layers of `net` in place.
pub fn train(net: &mut MeasureNet, data: &TrainingData, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::usage("no training sets"));
    }
    if let Targets::Values(y) = &data.targets {
        if y.cols() != net.out_dim() {
            return Err(Error::dim(format!(
                "targets have {} columns, network outputs {}",
                y.cols(),
                net.out_dim()
            )));
        }
    }
    let features = if !net.is_frozen(Layer::First) {
        Features::Sets
    } else {
        let pooled = net.pooled_features(&data.sets)?;
        if net.is_frozen(Layer::Second) {
            Features::Hidden(hidden_features(net, &pooled))
        } else {
            Features::Pooled(pooled)
        }
    };

    let layers = net.trainable_layers();
    let shapes: Vec<_> = layers.iter().map(|&l| net.layer(l).shape()).collect();
    let mut adam = AdamState::new(cfg.lr, &shapes);
    let mut rng = Rng::from_stream(cfg.seed, 0x7261_696e);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::with_capacity(cfg.iterations);

    for iteration in 0..cfg.iterations {
        let idx: Option<Vec<usize>> = cfg.minibatch.filter(|&m| m < data.len()).map(|m| {
            if cursor + m > order.len() {
                rng.shuffle(&mut order);
                cursor = 0;
            }
            cursor += m;
            order[cursor - m..cursor].to_vec()
        });
        let targets = match &idx {
            Some(i) => data.targets.select(i),
            None => data.targets.clone(),
        };

        let (data_loss, mut grads) = match &features {
            Features::Sets => {
                let (out, cache) = match &idx {
                    Some(i) => net.forward_batch(&data.sets.select(i))?,
                    None => net.forward_batch(&data.sets)?,
                };
                let (l, up) = loss_and_upstream(&out, &targets, cfg.loss)?;
                (l, net.backward(&cache, &up)?)
            }
            Features::Pooled(p) => {
                let p = match &idx {
                    Some(i) => p.select_rows(i),
                    None => p.clone(),
                };
                let (out, cache) = net.forward_from_pooled(p)?;
                let (l, up) = loss_and_upstream(&out, &targets, cfg.loss)?;
                (l, net.backward(&cache, &up)?)
            }
            Features::Hidden(a2) => {
                let sub;
                let a2 = match &idx {
                    Some(i) => {
                        sub = a2.select_rows(i);
                        &sub
                    }
                    None => a2,
                };
                let w3 = net.layer(Layer::Third);
                let mut out = Matrix::zeros(a2.rows(), w3.rows());
                gemm(1.0, a2, Trans::No, w3, Trans::Yes, 0.0, &mut out);
                let (l, up) = loss_and_upstream(&out, &targets, cfg.loss)?;
                let mut g3 = Matrix::zeros(w3.rows(), w3.cols());
                gemm(1.0, &up, Trans::Yes, a2, Trans::No, 0.0, &mut g3);
                (
                    l,
                    Gradients {
                        w1: None,
                        w2: None,
                        w3: g3,
                    },
                )
            }
        };

        let penalty = if cfg.lambda > 0.0 {
            grads.add_scaled(cfg.lambda, &net.path_norm_gradient());
            cfg.lambda * net.path_norm()
        } else {
            0.0
        };
        let total = data_loss + penalty;
        if !total.is_finite() || total > DIVERGENCE_LIMIT {
            return Err(Error::TrainingAborted {
                iteration,
                reason: format!("objective diverged ({total:e})"),
            });
        }
        history.push(HistoryRow {
            iteration,
            data_loss,
            penalty,
            total,
        });
        step_layers(net, &layers, &grads, &mut adam).map_err(|e| match e {
            Error::TrainingAborted { reason, .. } => Error::TrainingAborted { iteration, reason },
            other => other,
        })?;
    }
    Ok(TrainReport { history })
}

fn hidden_features(net: &MeasureNet, pooled: &Matrix) -> Matrix {
    let w2 = net.layer(Layer::Second);
    let (_, act2) = net.activations();
    let mut z2 = Matrix::zeros(pooled.rows(), w2.rows());
    gemm(1.0, pooled, Trans::No, w2, Trans::Yes, 0.0, &mut z2);
    z2.map(|z| act2.apply(z))
}

fn step_layers(net: &mut MeasureNet, layers: &[Layer], grads: &Gradients, adam: &mut AdamState) -> Result<()> {
    let g: Vec<&Matrix> = layers
        .iter()
        .map(|&l| grads.get(l).expect("trainable layers carry gradients"))
        .collect();
    // take the layers out so the optimizer can borrow them together
    let mut owned: Vec<Matrix> = layers
        .iter()
        .map(|&l| std::mem::replace(net.layer_mut(l), Matrix::zeros(0, 0)))
        .collect();
    let result = {
        let mut refs: Vec<&mut Matrix> = owned.iter_mut().collect();
        adam_step(&mut refs, &g, adam)
    };
    for (&l, m) in layers.iter().zip(owned) {
        *net.layer_mut(l) = m;
    }
    result
}

/// Mean squared error of `net` over a labelled batch.
pub fn evaluate_mse(net: &MeasureNet, sets: &SetBatch, targets: &Matrix) -> Result<f64> {
    let out = net.predict_batch(sets)?;
    Ok(loss_and_upstream(&out, &Targets::Values(targets.clone()), Loss::Mse)?.0)
}

/// Fraction of sets whose arg-max logit differs from the label.
pub fn error_rate(net: &MeasureNet, sets: &SetBatch, labels: &[usize]) -> Result<f64> {
    let out = net.predict_batch(sets)?;
    if labels.len() != out.rows() {
        return Err(Error::dim("one label per set required"));
    }
    let wrong = out
        .iter_rows()
        .zip(labels)
        .filter(|(row, &label)| argmax(row) != label)
        .count();
    Ok(wrong as f64 / labels.len() as f64)
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}
