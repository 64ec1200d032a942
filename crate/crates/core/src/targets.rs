//! Ground-truth symmetric families `f_N` used as regression targets.

use std::fmt;

use crate::data::SetBatch;
use crate::error::{Error, Result};
use crate::model::{init_model, ClassTag, InitScheme, InitSpec, Layer, MeasureNet, NetShape};
use crate::numerics::Matrix;

/// Symmetric functions of a list of reals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ValueFamily {
    Max,
    /// `λ log Σ exp(v / λ)`, the training target form.
    Softmax { lambda: f64 },
    /// `(1/λ) log((1/N) Σ exp(λ v))`, which depends only on the empirical
    /// measure and is within `log N / λ` of the max.
    SoftmaxMean { lambda: f64 },
    /// Midpoint of the two central order statistics for even sizes.
    Median,
    SecondLargest,
    Mean,
}

impl ValueFamily {
    pub fn eval(self, values: &[f64]) -> Result<f64> {
        if values.is_empty() {
            return Err(Error::usage("cannot evaluate on an empty list"));
        }
        match self {
            ValueFamily::Max => Ok(values.iter().cloned().fold(f64::NEG_INFINITY, f64::max)),
            ValueFamily::Mean => Ok(atoms(values).iter().map(|(v, w)| v * w).sum()),
            ValueFamily::Median => {
                let s = sorted(values);
                let n = s.len();
                Ok(if n % 2 == 1 {
                    s[n / 2]
                } else {
                    0.5 * (s[n / 2 - 1] + s[n / 2])
                })
            }
            ValueFamily::SecondLargest => {
                if values.len() < 2 {
                    return Err(Error::usage("second largest needs at least two values"));
                }
                let s = sorted(values);
                Ok(s[s.len() - 2])
            }
            ValueFamily::Softmax { lambda } => {
                check_lambda(lambda)?;
                Ok(lambda * log_sum_exp(values.iter().map(|v| v / lambda)))
            }
            ValueFamily::SoftmaxMean { lambda } => {
                check_lambda(lambda)?;
                let atoms = atoms(values);
                let max = atoms.last().expect("non-empty").0;
                let s: f64 = atoms.iter().map(|(v, w)| w * (lambda * (v - max)).exp()).sum();
                Ok(max + s.ln() / lambda)
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ValueFamily::Max => "max",
            ValueFamily::Softmax { .. } => "softmax",
            ValueFamily::SoftmaxMean { .. } => "softmax_mean",
            ValueFamily::Median => "median",
            ValueFamily::SecondLargest => "second",
            ValueFamily::Mean => "mean",
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda > 0.0 && lambda.is_finite() {
        Ok(())
    } else {
        Err(Error::usage(format!("softmax temperature must be > 0, got {lambda}")))
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut s = values.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// The empirical measure of `values`: distinct values in increasing order
/// with their frequencies `count / N`. Functions evaluated through it give
/// bit-identical results on a list and on any duplication of it.
pub fn atoms(values: &[f64]) -> Vec<(f64, f64)> {
    let s = sorted(values);
    let n = s.len() as f64;
    let mut out: Vec<(f64, usize)> = Vec::new();
    for v in s {
        match out.last_mut() {
            Some((u, c)) if *u == v => *c += 1,
            _ => out.push((v, 1)),
        }
    }
    out.into_iter().map(|(v, c)| (v, c as f64 / n)).collect()
}

/// `log Σ exp(x)`, shifted by the maximum.
pub fn log_sum_exp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Target function of a point set.
#[derive(Clone, Debug, PartialEq)]
pub enum TargetSpec {
    /// A value family applied to the inverse norms `1 / ‖xᵢ‖₂`.
    InverseNorm(ValueFamily),
    /// `2 / (N(N-1)) Σ_{i<j} 1 / ‖xᵢ - xⱼ‖₂`.
    Potential,
    /// Single planted neuron, weights from the mixture initialization.
    Neuron(MeasureNet),
    /// Planted network with 100 inner units drawn like the model weights.
    SmoothNeuron(MeasureNet),
    /// The clean-distribution mean of the robust-mean sampler. Not a
    /// function of the set; the sampler supplies it.
    RobustMeanTruth,
}

pub const SOFTMAX_TARGET_LAMBDA: f64 = 0.1;

/// Names accepted by [`TargetSpec::from_name`], in suite order.
pub const SYNTHETIC_TARGETS: [&str; 8] = [
    "max_inv",
    "softmax_inv",
    "median_inv",
    "second_inv",
    "mean_inv",
    "potential",
    "neuron",
    "smooth_neuron",
];

impl TargetSpec {
    /// Builds a target from its stable name. Planted kinds draw their
    /// weights from `seed`.
    pub fn from_name(name: &str, d: usize, seed: u64) -> Result<Self> {
        Ok(match name {
            "max_inv" => TargetSpec::InverseNorm(ValueFamily::Max),
            "softmax_inv" => TargetSpec::InverseNorm(ValueFamily::Softmax {
                lambda: SOFTMAX_TARGET_LAMBDA,
            }),
            "median_inv" => TargetSpec::InverseNorm(ValueFamily::Median),
            "second_inv" | "second_largest_inv" => TargetSpec::InverseNorm(ValueFamily::SecondLargest),
            "mean_inv" => TargetSpec::InverseNorm(ValueFamily::Mean),
            "potential" => TargetSpec::Potential,
            "neuron" => make_planted_neuron(PlantedKind::Neuron, d, seed)?,
            "smooth_neuron" => make_planted_neuron(PlantedKind::Smooth, d, seed)?,
            "robust_mean_truth" => TargetSpec::RobustMeanTruth,
            other => return Err(Error::usage(format!("unknown target `{other}`"))),
        })
    }

    pub fn name(&self) -> &'static str {
        match self {
            TargetSpec::InverseNorm(f) => match f {
                ValueFamily::Max => "max_inv",
                ValueFamily::Softmax { .. } => "softmax_inv",
                ValueFamily::SoftmaxMean { .. } => "softmax_mean_inv",
                ValueFamily::Median => "median_inv",
                ValueFamily::SecondLargest => "second_inv",
                ValueFamily::Mean => "mean_inv",
            },
            TargetSpec::Potential => "potential",
            TargetSpec::Neuron(_) => "neuron",
            TargetSpec::SmoothNeuron(_) => "smooth_neuron",
            TargetSpec::RobustMeanTruth => "robust_mean_truth",
        }
    }

    pub fn planted_net(&self) -> Option<&MeasureNet> {
        match self {
            TargetSpec::Neuron(n) | TargetSpec::SmoothNeuron(n) => Some(n),
            _ => None,
        }
    }

    /// Smallest set size the target is defined on.
    pub fn min_set_size(&self) -> usize {
        match self {
            TargetSpec::Potential | TargetSpec::InverseNorm(ValueFamily::SecondLargest) => 2,
            _ => 1,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.planted_net().map_or(1, MeasureNet::out_dim)
    }
}

impl fmt::Display for TargetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Value of `spec` on one set (rows are points).
pub fn eval_target(spec: &TargetSpec, set: &Matrix) -> Result<Vec<f64>> {
    if set.rows() < spec.min_set_size() {
        return Err(Error::usage(format!(
            "{} needs at least {} points, got {}",
            spec.name(),
            spec.min_set_size(),
            set.rows()
        )));
    }
    match spec {
        TargetSpec::InverseNorm(family) => Ok(vec![family.eval(&inverse_norms(set)?)?]),
        TargetSpec::Potential => {
            let n = set.rows();
            let mut acc = 0.0;
            for i in 0..n {
                for j in i + 1..n {
                    let dist = set
                        .row(i)
                        .iter()
                        .zip(set.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum::<f64>()
                        .sqrt();
                    if dist == 0.0 {
                        return Err(Error::domain(format!("points {i} and {j} coincide")));
                    }
                    acc += 1.0 / dist;
                }
            }
            Ok(vec![2.0 * acc / (n * (n - 1)) as f64])
        }
        TargetSpec::Neuron(net) | TargetSpec::SmoothNeuron(net) => net.predict(set),
        TargetSpec::RobustMeanTruth => Err(Error::usage(
            "the robust-mean truth is drawn by the sampler, not computed from a set",
        )),
    }
}

/// Targets for every set of a batch, one row per set.
pub fn eval_batch(spec: &TargetSpec, batch: &SetBatch) -> Result<Matrix> {
    if let Some(net) = spec.planted_net() {
        return net.predict_batch(batch);
    }
    let o = spec.out_dim();
    let mut data = Vec::with_capacity(batch.len() * o);
    for s in batch.sets() {
        data.extend(eval_target(spec, s)?);
    }
    Matrix::from_vec(batch.len(), o, data)
}

/// `1 / ‖xᵢ‖₂` for each point.
pub fn inverse_norms(set: &Matrix) -> Result<Vec<f64>> {
    set.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = r.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                Err(Error::domain(format!("point {i} has zero norm")))
            } else {
                Ok(1.0 / n)
            }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PlantedKind {
    /// `h1 = h2 = 1`, W1 from the ±1 Gaussian mixture.
    Neuron,
    /// `h1 = 100, h2 = 1`, Kaiming-uniform like the models.
    Smooth,
}

/// Planted target network, deterministic in `seed`.
///
/// The single-neuron target takes `|W2|`: its pooled input is
/// non-negative, so a negative outer weight would make the target
/// identically zero.
pub fn make_planted_neuron(kind: PlantedKind, d: usize, seed: u64) -> Result<TargetSpec> {
    match kind {
        PlantedKind::Neuron => {
            let mixture = init_model(
                NetShape::for_class(ClassTag::S1, d).with_widths(1, 1),
                InitSpec {
                    scheme: InitScheme::PLANTED_MIXTURE,
                    seed,
                },
            )?;
            let outer = init_model(
                NetShape::for_class(ClassTag::S1, d).with_widths(1, 1),
                InitSpec::kaiming(seed ^ 0x6e65_7572_6f6e),
            )?;
            let mut net = mixture;
            net.set_layer(Layer::Second, outer.layer(Layer::Second).abs())?;
            net.set_layer(Layer::Third, outer.layer(Layer::Third).clone())?;
            Ok(TargetSpec::Neuron(net))
        }
        PlantedKind::Smooth => {
            let net = init_model(
                NetShape::for_class(ClassTag::S1, d).with_widths(100, 1),
                InitSpec::kaiming(seed),
            )?;
            Ok(TargetSpec::SmoothNeuron(net))
        }
    }
}

/// Smoothed arg-min of `t ↦ ⟨μ, |t - x|⟩` over `[lo, hi]`:
/// `∫ t e^{-βE(t)} dt / ∫ e^{-βE(t)} dt` by the trapezoid rule on `nodes`
/// equally spaced points. Tends to the median as `β → ∞`.
pub fn gibbs_estimate(values: &[f64], beta: f64, domain: (f64, f64), nodes: usize) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::usage("no values"));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::usage(format!("beta must be > 0, got {beta}")));
    }
    let (lo, hi) = domain;
    if !(lo < hi) || values.iter().any(|&v| v < lo || v > hi) {
        return Err(Error::usage("domain must be an interval containing every value"));
    }
    if nodes < 10 {
        return Err(Error::usage("at least 10 quadrature nodes required"));
    }
    let n = values.len() as f64;
    let h = (hi - lo) / (nodes - 1) as f64;
    let grid: Vec<f64> = (0..nodes).map(|i| lo + h * i as f64).collect();
    let log_w: Vec<f64> = grid
        .iter()
        .map(|&t| -beta * values.iter().map(|x| (t - x).abs()).sum::<f64>() / n)
        .collect();
    let shift = log_w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for (i, (&t, &lw)) in grid.iter().zip(&log_w).enumerate() {
        let w = (lw - shift).exp() * if i == 0 || i == nodes - 1 { 0.5 } else { 1.0 };
        num += t * w;
        den += w;
    }
    Ok(num / den)
}
