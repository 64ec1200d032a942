//! Non-learned baselines: sample mean, geometric median (Weiszfeld), an
//! eigenvector filter for contaminated data, and linear regression on
//! power-sum moments.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::numerics::Matrix;

/// Baseline estimators addressable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Estimator {
    Mean,
    GeoMedian,
    Filter,
    Moments,
}

impl Estimator {
    /// The location estimators used on contaminated sets.
    pub const LOCATION: [Estimator; 3] = [Estimator::Mean, Estimator::GeoMedian, Estimator::Filter];

    pub fn name(self) -> &'static str {
        match self {
            Estimator::Mean => "mean",
            Estimator::GeoMedian => "geomedian",
            Estimator::Filter => "filter",
            Estimator::Moments => "moments",
        }
    }

    /// Location estimate of one set. `Moments` needs fitting and is
    /// rejected here.
    pub fn locate(self, set: &Matrix) -> Result<Vec<f64>> {
        match self {
            Estimator::Mean => sample_mean(set),
            Estimator::GeoMedian => Ok(geometric_median(set, &WeiszfeldParams::default())?.point),
            Estimator::Filter => Ok(filter_mean(set, &FilterParams::default())?.mean),
            Estimator::Moments => Err(Error::usage("the moment regressor is fitted, not a location estimate")),
        }
    }
}

impl FromStr for Estimator {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mean" => Estimator::Mean,
            "geomedian" => Estimator::GeoMedian,
            "filter" => Estimator::Filter,
            "moments" => Estimator::Moments,
            _ => return Err(Error::usage(format!("unknown estimator `{s}`"))),
        })
    }
}

impl fmt::Display for Estimator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

pub fn sample_mean(set: &Matrix) -> Result<Vec<f64>> {
    if set.rows() == 0 {
        return Err(Error::usage("mean of an empty set"));
    }
    Ok(set.column_means())
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Sum of Euclidean distances from `y` to the points of `set`.
pub fn fermat_objective(set: &Matrix, y: &[f64]) -> f64 {
    set.iter_rows().map(|x| dist(x, y)).sum()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WeiszfeldParams {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for WeiszfeldParams {
    fn default() -> Self {
        WeiszfeldParams {
            tol: 1e-9,
            max_iter: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeoMedian {
    pub point: Vec<f64>,
    pub iterations: usize,
    /// False when `max_iter` was hit; `point` is then the best iterate.
    pub converged: bool,
    /// Objective at the start point and after every iteration.
    pub objective_trace: Vec<f64>,
}

/// Points closer than this to the iterate count as coinciding with it.
const COINCIDENT: f64 = 1e-12;

/// Weiszfeld iteration for `argmin_y Σ ‖y − xᵢ‖`, started at the sample
/// mean. When the iterate sits on data points, the step uses the
/// Vardi–Zhang modification: with `η` coincident points and `r` the norm of
/// the summed unit vectors towards the others, the iterate is optimal if
/// `r ≤ η`, and otherwise moves to `(1 − η/r)·T + (η/r)·y`.
pub fn geometric_median(set: &Matrix, params: &WeiszfeldParams) -> Result<GeoMedian> {
    let d = set.cols();
    let mut y = sample_mean(set)?;
    let mut obj = fermat_objective(set, &y);
    let mut trace = vec![obj];
    let (mut best, mut best_obj) = (y.clone(), obj);
    for it in 1..=params.max_iter {
        let mut num = vec![0.0; d];
        let mut den = 0.0;
        let mut pull = vec![0.0; d];
        let mut eta = 0usize;
        for x in set.iter_rows() {
            let r = dist(x, &y);
            if r < COINCIDENT {
                eta += 1;
                continue;
            }
            for j in 0..d {
                num[j] += x[j] / r;
                pull[j] += (x[j] - y[j]) / r;
            }
            den += 1.0 / r;
        }
        if den == 0.0 {
            // every point coincides with y
            return Ok(GeoMedian {
                point: y,
                iterations: it,
                converged: true,
                objective_trace: trace,
            });
        }
        let t: Vec<f64> = num.iter().map(|v| v / den).collect();
        let next: Vec<f64> = if eta == 0 {
            t
        } else {
            let r = pull.iter().map(|v| v * v).sum::<f64>().sqrt();
            if r <= eta as f64 {
                return Ok(GeoMedian {
                    point: y,
                    iterations: it,
                    converged: true,
                    objective_trace: trace,
                });
            }
            let w = eta as f64 / r;
            t.iter().zip(&y).map(|(ti, yi)| (1.0 - w) * ti + w * yi).collect()
        };
        let step = dist(&next, &y);
        y = next;
        obj = fermat_objective(set, &y);
        trace.push(obj);
        if obj < best_obj {
            best_obj = obj;
            best = y.clone();
        }
        if step < params.tol {
            return Ok(GeoMedian {
                point: y,
                iterations: it,
                converged: true,
                objective_trace: trace,
            });
        }
    }
    Ok(GeoMedian {
        point: best,
        iterations: params.max_iter,
        converged: false,
        objective_trace: trace,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FilterParams {
    /// Slack in the tail test: a threshold `t` is violated when more than
    /// `cher · N · (P(|Z| > t) + τ/d)` points project beyond it.
    pub tau: f64,
    /// Filtering continues while the top eigenvalue exceeds `cher` times
    /// the clean-sample edge `(1 + √(d/n))² s²`; `cher` also scales the
    /// tail test.
    pub cher: f64,
    pub max_iter: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            tau: 0.1,
            cher: 1.5,
            max_iter: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FilterResult {
    pub mean: Vec<f64>,
    /// Indices of discarded points, in removal order.
    pub removed: Vec<usize>,
    pub rounds: usize,
    /// Set when the loop or the eigen-solver ran out of iterations.
    pub warning: Option<String>,
}

/// Iterative filter: while the top eigenvalue of the surviving points'
/// covariance exceeds `cher · (1 + √(d/n))² · s²`, score each point by its distance from the
/// median projection on the top eigenvector, in units of the projections'
/// normal-consistent MAD. Walking up the
/// sorted scores, the first score `t` whose empirical tail count exceeds the
/// Gaussian allowance `cher · N · (P(|Z| > t) + τ/d)` becomes the cut and every
/// point scoring `t` or more is discarded. When no score violates the
/// allowance, or only the smallest does, the current mean is returned.
///
/// `s²` is a spherical variance fixed from the full set: the median squared
/// distance to the coordinate-wise median divided by the median of `χ²_d`.
/// A plain trace/d baseline cannot detect anything in one dimension, where
/// it equals the top eigenvalue.
pub fn filter_mean(set: &Matrix, params: &FilterParams) -> Result<FilterResult> {
    if set.rows() == 0 {
        return Err(Error::usage("filter of an empty set"));
    }
    if !(params.tau > 0.0 && params.tau < 1.0) || !(params.cher > 0.0) {
        return Err(Error::usage("tau must lie in (0, 1) and cher must be positive"));
    }
    let s2 = spherical_scale(set);
    let mut alive: Vec<usize> = (0..set.rows()).collect();
    let mut removed = Vec::new();
    let mut warning = None;
    for round in 1..=params.max_iter {
        let pts = set.select_rows(&alive);
        let mu = pts.column_means();
        if alive.len() < 2 || s2 == 0.0 {
            return Ok(FilterResult { mean: mu, removed, rounds: round, warning });
        }
        let cov = covariance(&pts, &mu);
        let (lambda, v, ok) = top_eigenpair(&cov, 1e-8, 10_000);
        if !ok {
            warning = Some("power iteration did not converge; returning the current mean".into());
            return Ok(FilterResult { mean: mu, removed, rounds: round, warning });
        }
        // clean samples put the top eigenvalue near the Marchenko–Pastur edge
        let edge = (1.0 + (set.cols() as f64 / alive.len() as f64).sqrt()).powi(2);
        if lambda <= params.cher * edge * s2 {
            return Ok(FilterResult { mean: mu, removed, rounds: round, warning });
        }
        let proj: Vec<f64> = pts.iter_rows().map(|x| x.iter().zip(&v).map(|(a, b)| a * b).sum()).collect();
        let med = median(&proj);
        let dev: Vec<f64> = proj.iter().map(|p| (p - med).abs()).collect();
        // the top sample direction overstates the spread when N is not much
        // larger than d, so the tail test uses the projections' own MAD scale
        let mad = 1.482_602_218_505_602 * median(&dev);
        let scale = if mad > 0.0 { mad } else { s2.sqrt() };
        let scores: Vec<f64> = dev.iter().map(|x| x / scale).collect();
        let Some(cut) = tail_cut(&scores, params.cher, params.tau / set.cols() as f64) else {
            return Ok(FilterResult { mean: mu, removed, rounds: round, warning });
        };
        let mut keep = Vec::with_capacity(alive.len());
        for (k, &i) in alive.iter().enumerate() {
            if scores[k] >= cut {
                removed.push(i);
            } else {
                keep.push(i);
            }
        }
        if keep.is_empty() {
            return Err(Error::domain("every point was filtered out"));
        }
        alive = keep;
    }
    warning = Some(format!("filter stopped after {} rounds", params.max_iter));
    Ok(FilterResult {
        mean: set.select_rows(&alive).column_means(),
        removed,
        rounds: params.max_iter,
        warning,
    })
}

/// Smallest score whose tail is heavier than the Gaussian allowance, or
/// `None` when there is none or it would discard everything.
fn tail_cut(scores: &[f64], cher: f64, slack: f64) -> Option<f64> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let n = sorted.len() as f64;
    let i = (0..sorted.len()).find(|&i| (n - i as f64) > cher * n * (normal_two_tail(sorted[i]) + slack))?;
    // ties with the smallest score would empty the set
    (sorted[i] > sorted[0]).then_some(sorted[i])
}

/// P(|Z| > t) for standard normal Z, via the Chebyshev fit of erfc
/// (relative error below 1.2e-7).
fn normal_two_tail(t: f64) -> f64 {
    let z = t.abs() / std::f64::consts::SQRT_2;
    let u = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + u * (1.00002368
            + u * (0.37409196
                + u * (0.09678418
                    + u * (-0.18628806
                        + u * (0.27886807 + u * (-1.13520398 + u * (1.48851587 + u * (-0.82215223 + u * 0.17087277))))))));
    u * poly.exp()
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

fn spherical_scale(set: &Matrix) -> f64 {
    let d = set.cols();
    let centre: Vec<f64> = (0..d)
        .map(|j| median(&set.iter_rows().map(|x| x[j]).collect::<Vec<_>>()))
        .collect();
    let sq: Vec<f64> = set.iter_rows().map(|x| dist(x, &centre).powi(2)).collect();
    // Wilson–Hilferty approximation of the χ²_d median
    let df = d as f64;
    let chi2_median = df * (1.0 - 2.0 / (9.0 * df)).powi(3);
    median(&sq) / chi2_median
}

#[cfg(test)]
/// Standard normal quantile (Acklam's rational approximation, |error| < 1.2e-9).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [-3.969683028665376e1, 2.209460984245205e2, -2.759285104469687e2, 1.383577518672690e2, -3.066479806614716e1, 2.506628277459239];
    const B: [f64; 5] = [-5.447609879822406e1, 1.615858368580409e2, -1.556989798598866e2, 6.680131188771972e1, -1.328068155288572e1];
    const C: [f64; 6] = [-7.784894002430293e-3, -3.223964580411365e-1, -2.400758277161838, -2.549732539343734, 4.374664141464968, 2.938163982698783];
    const D: [f64; 4] = [7.784695709041462e-3, 3.224671290700398e-1, 2.445134137142996, 3.754408661907416];
    let lo = 0.02425;
    if p < lo {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5]) / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - lo {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}

fn covariance(pts: &Matrix, mu: &[f64]) -> Matrix {
    let d = pts.cols();
    let mut c = Matrix::zeros(d, d);
    for x in pts.iter_rows() {
        for a in 0..d {
            let xa = x[a] - mu[a];
            let row = c.row_mut(a);
            for b in 0..d {
                row[b] += xa * (x[b] - mu[b]);
            }
        }
    }
    c.scale(1.0 / pts.rows() as f64);
    c
}

/// Largest eigenpair of a symmetric PSD matrix by power iteration; stops
/// when the Rayleigh quotient changes by less than `rel_tol` relatively.
/// The flag is false if `max_iter` was reached.
pub fn top_eigenpair(a: &Matrix, rel_tol: f64, max_iter: usize) -> (f64, Vec<f64>, bool) {
    let n = a.rows();
    let start = (0..n).max_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)])).unwrap_or(0);
    let mut v: Vec<f64> = (0..n).map(|i| a[(i, start)] + if i == start { 1e-3 } else { 0.0 }).collect();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = norm(&v);
    if nv == 0.0 {
        return (0.0, v, true);
    }
    v.iter_mut().for_each(|x| *x /= nv);
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w: Vec<f64> = (0..n).map(|i| a.row(i).iter().zip(&v).map(|(p, q)| p * q).sum()).collect();
        let new_lambda: f64 = w.iter().zip(&v).map(|(p, q)| p * q).sum();
        let nw = norm(&w);
        if nw == 0.0 {
            return (0.0, v, true);
        }
        v = w.into_iter().map(|x| x / nw).collect();
        if (new_lambda - lambda).abs() <= rel_tol * new_lambda.abs() {
            return (new_lambda, v, true);
        }
        lambda = new_lambda;
    }
    (lambda, v, false)
}

/// `[1, mean v, mean v², …, mean v^K]` of a value list.
pub fn moment_features(values: &[f64], k: usize) -> Result<Vec<f64>> {
    if values.is_empty() {
        return Err(Error::usage("moments of an empty set"));
    }
    let m = values.len() as f64;
    let mut f = vec![0.0; k + 1];
    f[0] = 1.0;
    for &v in values {
        let mut p = 1.0;
        for fi in f.iter_mut().skip(1) {
            p *= v;
            *fi += p;
        }
    }
    for fi in f.iter_mut().skip(1) {
        *fi /= m;
    }
    Ok(f)
}

/// Linear predictor on the first `K` empirical moments of a set of scalars.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentRegressor {
    pub k: usize,
    /// Intercept first.
    pub coefficients: Vec<f64>,
    pub ridge: f64,
}

impl MomentRegressor {
    pub fn predict(&self, values: &[f64]) -> Result<f64> {
        let f = moment_features(values, self.k)?;
        Ok(f.iter().zip(&self.coefficients).map(|(a, b)| a * b).sum())
    }
}

/// Ridge least squares `min ‖Fc − y‖² + ridge·‖c₁..‖²` (intercept not
/// penalized). Solved by Householder QR on the ridge-augmented design,
/// which has the same solution as the normal equations but squares no
/// condition number.
pub fn fit_moment_regressor(sets: &[Vec<f64>], targets: &[f64], k: usize, ridge: f64) -> Result<MomentRegressor> {
    if sets.len() != targets.len() || sets.is_empty() {
        return Err(Error::dim("one target per set required"));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::usage("ridge must be non-negative"));
    }
    let p = k + 1;
    let extra = if ridge > 0.0 { k } else { 0 };
    let rows = sets.len() + extra;
    let mut a = Matrix::zeros(rows, p);
    let mut y = vec![0.0; rows];
    for (i, (s, &t)) in sets.iter().zip(targets).enumerate() {
        a.row_mut(i).copy_from_slice(&moment_features(s, k)?);
        y[i] = t;
    }
    for j in 0..extra {
        a.row_mut(sets.len() + j)[j + 1] = ridge.sqrt();
    }
    let coefficients = qr_solve(a, y)?;
    Ok(MomentRegressor { k, coefficients, ridge })
}

fn qr_solve(mut a: Matrix, mut y: Vec<f64>) -> Result<Vec<f64>> {
    let (m, n) = a.shape();
    if m < n {
        return Err(Error::usage(format!(
            "{m} equations for {n} unknowns are underdetermined; use ridge > 0"
        )));
    }
    let mut diag = vec![0.0; n];
    for j in 0..n {
        let norm = (j..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>().sqrt();
        let alpha = if a[(j, j)] > 0.0 { -norm } else { norm };
        diag[j] = alpha;
        if norm == 0.0 {
            continue;
        }
        // v = x − alpha e₁ stored in column j
        a.as_mut_slice()[j * n + j] -= alpha;
        let vnorm2 = (j..m).map(|i| a[(i, j)] * a[(i, j)]).sum::<f64>();
        if vnorm2 == 0.0 {
            continue;
        }
        for c in j + 1..n {
            let dot: f64 = (j..m).map(|i| a[(i, j)] * a[(i, c)]).sum();
            let f = 2.0 * dot / vnorm2;
            for i in j..m {
                let vij = a[(i, j)];
                a.row_mut(i)[c] -= f * vij;
            }
        }
        let dot: f64 = (j..m).map(|i| a[(i, j)] * y[i]).sum();
        let f = 2.0 * dot / vnorm2;
        for (i, yi) in y.iter_mut().enumerate().skip(j) {
            *yi -= f * a[(i, j)];
        }
    }
    let scale = diag.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    if diag.iter().any(|v| v.abs() <= 1e-12 * scale) || scale == 0.0 {
        return Err(Error::domain(
            "moment features are linearly dependent (singular normal matrix); use ridge > 0",
        ));
    }
    let mut c = vec![0.0; n];
    for j in (0..n).rev() {
        let s: f64 = (j + 1..n).map(|l| a[(j, l)] * c[l]).sum();
        c[j] = (y[j] - s) / diag[j];
    }
    Ok(c)
}
