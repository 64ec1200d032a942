//! Empirical checks of which set functions extend continuously to
//! measures: exact one-dimensional W₁, Lipschitz-ratio probes, duplication
//! gaps, the softmax/max bound and concentration of empirical measures.

use std::io::Write;

use crate::data::duplicate_set;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};
use crate::targets::{atoms, eval_target, TargetSpec, ValueFamily};

/// Exact W₁ between the empirical measures of two value lists: the integral
/// of `|F_a⁻¹(t) − F_b⁻¹(t)|` over `t ∈ [0, 1]`, evaluated piecewise on the
/// merged breakpoints `i/P`, `j/Q`.
pub fn wasserstein1_1d(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::usage("W1 needs two non-empty samples"));
    }
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    Ok(w1_sorted(&a, &b))
}

/// [`wasserstein1_1d`] for inputs already sorted ascending.
pub fn w1_sorted(a: &[f64], b: &[f64]) -> f64 {
    let (p, q) = (a.len() as u128, b.len() as u128);
    // positions along [0, 1] in units of 1/(P·Q), so breakpoints are exact
    let (mut i, mut j) = (0usize, 0usize);
    let mut t = 0u128;
    let mut acc = 0.0;
    while i < a.len() && j < b.len() {
        let next_a = (i as u128 + 1) * q;
        let next_b = (j as u128 + 1) * p;
        let next = next_a.min(next_b);
        acc += (a[i] - b[j]).abs() * (next - t) as f64;
        t = next;
        if next_a == next {
            i += 1;
        }
        if next_b == next {
            j += 1;
        }
    }
    acc / (p * q) as f64
}

/// Lipschitz-ratio statistics `|f(μ) − f(ν)| / W₁(μ, ν)` over probed pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuityReport {
    pub target: String,
    pub pairs: usize,
    pub max_ratio: f64,
    /// Quantiles at 0.5, 0.9 and 0.99.
    pub quantiles: [f64; 3],
    /// Ratio on the pair `(δ₀, ν_N)` for each probed `N`.
    pub dirac_probe: Vec<(usize, f64)>,
}

/// Ratio on `δ₀` against `ν_N = ((N−1)/N) δ₀ + (1/N) δ₁`, encoded as N zeros
/// against N−1 zeros and a one.
pub fn dirac_probe_ratio(family: ValueFamily, n: usize) -> Result<f64> {
    if n < 2 {
        return Err(Error::usage("the probe family needs N >= 2"));
    }
    let a = vec![0.0; n];
    let mut b = vec![0.0; n];
    b[n - 1] = 1.0;
    Ok((family.eval(&a)? - family.eval(&b)?).abs() / wasserstein1_1d(&a, &b)?)
}

/// Probes `family` on `pairs` random pairs of value lists whose sizes are
/// drawn from `sizes`, plus the `(δ₀, ν_N)` family for each `N` in
/// `probe_grid`. Pairs at distance zero are skipped.
pub fn continuity_modulus(
    family: ValueFamily,
    sampler: &mut dyn FnMut(&mut Rng, usize) -> Vec<f64>,
    sizes: &[usize],
    pairs: usize,
    probe_grid: &[usize],
    rng: &mut Rng,
) -> Result<ContinuityReport> {
    if sizes.is_empty() || sizes.contains(&0) {
        return Err(Error::usage("set sizes must be positive"));
    }
    let mut ratios = Vec::with_capacity(pairs + probe_grid.len());
    let mut dirac_probe = Vec::with_capacity(probe_grid.len());
    for &n in probe_grid {
        let r = dirac_probe_ratio(family, n)?;
        dirac_probe.push((n, r));
        ratios.push(r);
    }
    for _ in 0..pairs {
        let na = sizes[rng.below(sizes.len())];
        let nb = sizes[rng.below(sizes.len())];
        let a = sampler(rng, na);
        let b = sampler(rng, nb);
        let w = wasserstein1_1d(&a, &b)?;
        if w > 0.0 {
            ratios.push((family.eval(&a)? - family.eval(&b)?).abs() / w);
        }
    }
    ratios.sort_by(f64::total_cmp);
    let q = |p: f64| {
        if ratios.is_empty() {
            0.0
        } else {
            ratios[((ratios.len() - 1) as f64 * p).round() as usize]
        }
    };
    Ok(ContinuityReport {
        target: family.name().to_string(),
        pairs: ratios.len(),
        max_ratio: ratios.last().copied().unwrap_or(0.0),
        quantiles: [q(0.5), q(0.9), q(0.99)],
        dirac_probe,
    })
}

/// `|f_N(x) − f_{kN}(Δ_k(x))|` for a point-set target.
pub fn duplication_check(spec: &TargetSpec, set: &Matrix, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    let a = eval_target(spec, set)?;
    let b = eval_target(spec, &duplicate_set(set, k))?;
    Ok(a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max))
}

/// Duplication gap of a value family on a list of reals.
pub fn duplication_gap(family: ValueFamily, values: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::usage("k must be at least 1"));
    }
    let dup: Vec<f64> = (0..k).flat_map(|_| values.iter().copied()).collect();
    Ok((family.eval(values)? - family.eval(&dup)?).abs())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SoftmaxBound {
    pub gap: f64,
    pub bound: f64,
    pub ok: bool,
}

/// Gap between `(1/λ) log((1/N) Σ e^{λ vᵢ})` and `max v`, against `log N / λ`.
///
/// The gap is `-log(s)/λ` with `s = Σ wᵢ e^{λ(vᵢ - max)}` over the atoms,
/// the same sum the softmax evaluates. Since `s` includes the top atom's
/// weight `c/N ≥ 1/N`, computing both sides from `s` and `1/N` keeps the
/// inequality exact in floating point, even when every other term underflows
/// and the gap meets the bound.
pub fn softmax_bound_check(values: &[f64], lambda: f64) -> Result<SoftmaxBound> {
    ValueFamily::SoftmaxMean { lambda }.eval(values)?;
    let atoms = atoms(values);
    let max = atoms.last().expect("non-empty").0;
    let s: f64 = atoms.iter().map(|(v, w)| w * (lambda * (v - max)).exp()).sum();
    let gap = -s.ln() / lambda;
    let bound = -(1.0 / values.len() as f64).ln() / lambda;
    Ok(SoftmaxBound { gap, bound, ok: gap <= bound })
}

/// Stream index reserved for reference samples.
pub const REFERENCE_STREAM: u64 = 0x7265_6665_7265_6e63;

/// `size` draws from `sampler` on the reference stream of `seed`.
pub fn reference_sample(sampler: &mut dyn FnMut(&mut Rng) -> f64, size: usize, seed: u64) -> Vec<f64> {
    let mut rng = Rng::from_stream(seed, REFERENCE_STREAM);
    (0..size).map(|_| sampler(&mut rng)).collect()
}

/// Mean W₁ between size-`N` samples and a `reference_size` sample standing
/// in for the true measure, for each `N` of `n_grid`. Trials use streams
/// distinct from the reference.
pub fn empirical_concentration(
    sampler: &mut dyn FnMut(&mut Rng) -> f64,
    n_grid: &[usize],
    trials: usize,
    reference_size: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    if trials == 0 || reference_size == 0 || n_grid.contains(&0) {
        return Err(Error::usage("trials, reference size and N must be positive"));
    }
    let mut reference = reference_sample(sampler, reference_size, seed);
    reference.sort_by(f64::total_cmp);
    let mut out = Vec::with_capacity(n_grid.len());
    for (g, &n) in n_grid.iter().enumerate() {
        let mut rng = Rng::from_stream(seed, g as u64 + 1);
        let mut total = 0.0;
        for _ in 0..trials {
            let mut s: Vec<f64> = (0..n).map(|_| sampler(&mut rng)).collect();
            s.sort_by(f64::total_cmp);
            total += w1_sorted(&s, &reference);
        }
        out.push((n, total / trials as f64));
    }
    Ok(out)
}

/// Least-squares slope of `log y` against `log x`.
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|p| (p.0 as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

pub const DIAGNOSTICS_HEADER: &str = "check,parameter,value,bound,ok";

#[derive(Clone, Debug, PartialEq)]
pub struct DiagnosticRow {
    pub check: String,
    pub parameter: String,
    pub value: f64,
    pub bound: f64,
    pub ok: bool,
}

pub fn write_diagnostics<W: Write>(rows: &[DiagnosticRow], mut w: W) -> Result<()> {
    writeln!(w, "{DIAGNOSTICS_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{:?},{:?},{}", r.check, r.parameter, r.value, r.bound, r.ok)?;
    }
    Ok(())
}

/// The standard battery behind the `diagnose` command.
pub fn standard_diagnostics(seed: u64) -> Result<Vec<DiagnosticRow>> {
    let mut rows = Vec::new();
    let mut push = |check: &str, parameter: String, value: f64, bound: f64, ok: bool| {
        rows.push(DiagnosticRow {
            check: check.into(),
            parameter,
            value,
            bound,
            ok,
        })
    };
    let grid = [2usize, 4, 8, 16, 32, 64];
    for &n in &grid {
        let r = dirac_probe_ratio(ValueFamily::Max, n)?;
        // max is not W1-continuous: the ratio equals N, no constant bounds it
        push("dirac_probe_max", format!("N={n}"), r, n as f64, r == n as f64);
        let r = dirac_probe_ratio(ValueFamily::Mean, n)?;
        push("dirac_probe_mean", format!("N={n}"), r, 1.0, r <= 1.0 + 1e-9);
        let lambda = 10.0f64;
        let r = dirac_probe_ratio(ValueFamily::SoftmaxMean { lambda }, n)?;
        let c = lambda.exp_m1() / lambda;
        push("dirac_probe_softmax_mean", format!("N={n};lambda=10"), r, c, r <= c);
    }

    let mut rng = Rng::from_stream(seed, 1);
    let mut uniform = |r: &mut Rng, n: usize| (0..n).map(|_| r.uniform()).collect::<Vec<f64>>();
    for family in [ValueFamily::Mean, ValueFamily::Median, ValueFamily::Max] {
        let rep = continuity_modulus(family, &mut uniform, &grid, 500, &grid, &mut rng)?;
        let (bound, ok) = match family {
            ValueFamily::Mean => (1.0, rep.max_ratio <= 1.0 + 1e-9),
            _ => (f64::INFINITY, true),
        };
        push("continuity_max_ratio", family.name().into(), rep.max_ratio, bound, ok);
        push("continuity_q90_ratio", family.name().into(), rep.quantiles[1], bound, ok);
    }

    let second = ValueFamily::SecondLargest;
    let g = duplication_gap(second, &[1.0, 2.0], 2)?;
    push("duplication_gap", "second;{1,2};k=2".into(), g, 1.0, g == 1.0);
    let mut rng = Rng::from_stream(seed, 2);
    for family in [ValueFamily::Mean, ValueFamily::Max, ValueFamily::Median, ValueFamily::SoftmaxMean { lambda: 10.0 }] {
        let mut worst = 0.0f64;
        for _ in 0..100 {
            let n = 1 + rng.below(16);
            let v = uniform(&mut rng, n);
            for k in [2, 3] {
                worst = worst.max(duplication_gap(family, &v, k)?);
            }
        }
        push("duplication_gap", format!("{};random;k=2|3", family.name()), worst, 0.0, worst == 0.0);
    }

    let mut rng = Rng::from_stream(seed, 3);
    let mut violations = 0usize;
    let mut worst_slack = f64::INFINITY;
    for _ in 0..1000 {
        let n = 1 + rng.below(64);
        let lambda = [0.1, 1.0, 10.0][rng.below(3)];
        let v: Vec<f64> = (0..n).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
        let b = softmax_bound_check(&v, lambda)?;
        if !b.ok {
            violations += 1;
        }
        worst_slack = worst_slack.min(b.bound - b.gap);
    }
    push("softmax_bound_violations", "sets=1000".into(), violations as f64, 0.0, violations == 0);
    push("softmax_bound_min_slack", "sets=1000".into(), worst_slack, 0.0, worst_slack >= 0.0);

    let conc = empirical_concentration(&mut |r: &mut Rng| r.uniform(), &[8, 32, 128, 512], 200, 100_000, seed)?;
    for w in conc.windows(2) {
        push("concentration_decreasing", format!("N={}", w[1].0), w[1].1, w[0].1, w[1].1 < w[0].1);
    }
    let slope = log_log_slope(&conc);
    push("concentration_slope", "uniform[0,1]".into(), slope, -0.5, (slope + 0.5).abs() <= 0.15);
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimum-cost perfect matching by the Hungarian algorithm (O(n³)).
    fn hungarian(cost: &[Vec<f64>]) -> f64 {
        let n = cost.len();
        let inf = f64::INFINITY;
        let (mut u, mut v) = (vec![0.0; n + 1], vec![0.0; n + 1]);
        let (mut p, mut way) = (vec![0usize; n + 1], vec![0usize; n + 1]);
        for i in 1..=n {
            p[0] = i;
            let mut j0 = 0;
            let mut minv = vec![inf; n + 1];
            let mut used = vec![false; n + 1];
            loop {
                used[j0] = true;
                let i0 = p[j0];
                let (mut delta, mut j1) = (inf, 0);
                for j in 1..=n {
                    if !used[j] {
                        let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                        if cur < minv[j] {
                            minv[j] = cur;
                            way[j] = j0;
                        }
                        if minv[j] < delta {
                            delta = minv[j];
                            j1 = j;
                        }
                    }
                }
                for j in 0..=n {
                    if used[j] {
                        u[p[j]] += delta;
                        v[j] -= delta;
                    } else {
                        minv[j] -= delta;
                    }
                }
                j0 = j1;
                if p[j0] == 0 {
                    break;
                }
            }
            loop {
                let j1 = way[j0];
                p[j0] = p[j1];
                j0 = j1;
                if j0 == 0 {
                    break;
                }
            }
        }
        (1..=n).map(|j| cost[p[j] - 1][j - 1]).sum()
    }

    /// Transport between uniform measures on P and Q atoms, as an
    /// assignment between lcm(P, Q) equal-mass copies.
    fn assignment_w1(a: &[f64], b: &[f64]) -> f64 {
        let gcd = |mut x: usize, mut y: usize| {
            while y != 0 {
                (x, y) = (y, x % y);
            }
            x
        };
        let l = a.len() / gcd(a.len(), b.len()) * b.len();
        let ea: Vec<f64> = a.iter().flat_map(|&x| std::iter::repeat(x).take(l / a.len())).collect();
        let eb: Vec<f64> = b.iter().flat_map(|&x| std::iter::repeat(x).take(l / b.len())).collect();
        let cost: Vec<Vec<f64>> = ea.iter().map(|x| eb.iter().map(|y| (x - y).abs()).collect()).collect();
        hungarian(&cost) / l as f64
    }

    fn sample(rng: &mut Rng, max: usize) -> Vec<f64> {
        let n = 1 + rng.below(max);
        // coarse grid values so ties occur
        (0..n).map(|_| (rng.below(7) as f64) * 0.5 - 1.0 + if rng.bernoulli(0.5) { rng.uniform() } else { 0.0 }).collect()
    }

    #[test]
    fn w1_examples() {
        assert_eq!(wasserstein1_1d(&[1.0, 3.0, 2.0], &[3.0, 2.0, 1.0]).unwrap(), 0.0);
        assert_eq!(wasserstein1_1d(&[0.0; 4], &[0.0, 0.0, 0.0, 1.0]).unwrap(), 0.25);
        assert_eq!(wasserstein1_1d(&[0.0, 1.0], &[0.0, 0.0]).unwrap(), 0.5);
        assert!(wasserstein1_1d(&[], &[1.0]).is_err());
    }

    #[test]
    fn w1_matches_assignment_oracle() {
        let mut rng = Rng::new(21);
        for _ in 0..200 {
            let a = sample(&mut rng, 5);
            let b = sample(&mut rng, 5);
            let w = wasserstein1_1d(&a, &b).unwrap();
            let o = assignment_w1(&a, &b);
            assert!((w - o).abs() <= 1e-12, "{a:?} {b:?}: {w} vs {o}");
        }
    }

    #[test]
    fn w1_metric_axioms() {
        let mut rng = Rng::new(22);
        for _ in 0..100 {
            let (a, b, c) = (sample(&mut rng, 5), sample(&mut rng, 5), sample(&mut rng, 5));
            let ab = wasserstein1_1d(&a, &b).unwrap();
            assert_eq!(ab, wasserstein1_1d(&b, &a).unwrap());
            let ac = wasserstein1_1d(&a, &c).unwrap();
            let cb = wasserstein1_1d(&c, &b).unwrap();
            assert!(ab <= ac + cb + 1e-12);
            assert_eq!(wasserstein1_1d(&a, &a).unwrap(), 0.0);
        }
        // distinct multisets with the same support are at positive distance
        assert!(wasserstein1_1d(&[0.0, 0.0, 1.0], &[0.0, 1.0, 1.0]).unwrap() > 0.0);
        // duplication leaves the measure unchanged
        assert_eq!(wasserstein1_1d(&[0.0, 1.0], &[0.0, 0.0, 1.0, 1.0]).unwrap(), 0.0);
    }

    #[test]
    fn dirac_probe_values() {
        for n in [2usize, 4, 8, 16] {
            assert_eq!(dirac_probe_ratio(ValueFamily::Max, n).unwrap(), n as f64);
            assert!(dirac_probe_ratio(ValueFamily::Mean, n).unwrap() <= 1.0 + 1e-9);
        }
        // direct evaluation: N (1/λ) log(1 + (e^λ − 1)/N) increases to (e^λ − 1)/λ
        let lambda = 10.0f64;
        let limit = lambda.exp_m1() / lambda;
        let mut prev = 0.0;
        for n in [2usize, 4, 16, 64, 256, 4096] {
            let r = dirac_probe_ratio(ValueFamily::SoftmaxMean { lambda }, n).unwrap();
            let direct = n as f64 * (lambda.exp_m1() / n as f64).ln_1p() / lambda;
            assert!((r - direct).abs() <= 1e-9 * direct);
            assert!(r <= limit && r >= prev);
            prev = r;
        }
    }

    #[test]
    fn continuity_report_for_mean() {
        let mut rng = Rng::new(4);
        let mut s = |r: &mut Rng, n: usize| (0..n).map(|_| r.normal()).collect::<Vec<f64>>();
        let rep = continuity_modulus(ValueFamily::Mean, &mut s, &[1, 3, 8], 300, &[2, 4, 8], &mut rng).unwrap();
        assert!(rep.max_ratio <= 1.0 + 1e-9);
        assert!(rep.pairs > 300);
        assert!(rep.quantiles[0] <= rep.quantiles[1] && rep.quantiles[1] <= rep.quantiles[2]);
    }

    #[test]
    fn duplication_examples() {
        assert_eq!(duplication_gap(ValueFamily::SecondLargest, &[1.0, 2.0], 2).unwrap(), 1.0);
        let mut rng = Rng::new(6);
        for _ in 0..100 {
            let n = 1 + rng.below(10);
            let v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
            for k in [1, 2, 3] {
                assert_eq!(duplication_gap(ValueFamily::Mean, &v, k).unwrap(), 0.0);
                assert_eq!(duplication_gap(ValueFamily::Max, &v, k).unwrap(), 0.0);
            }
        }
        let set = Matrix::from_rows(&[vec![3.0, 4.0], vec![0.6, 0.8], vec![1.0, 1.0]]).unwrap();
        for family in [ValueFamily::Mean, ValueFamily::Max, ValueFamily::Median] {
            assert_eq!(duplication_check(&TargetSpec::InverseNorm(family), &set, 3).unwrap(), 0.0);
        }
        assert!(duplication_check(&TargetSpec::InverseNorm(ValueFamily::SecondLargest), &set, 2).unwrap() > 0.0);
    }

    #[test]
    fn softmax_bound_examples() {
        let b = softmax_bound_check(&[0.7], 3.0).unwrap();
        assert_eq!((b.gap, b.bound, b.ok), (0.0, 0.0, true));
        let b = softmax_bound_check(&[0.0, 1.0], 1.0).unwrap();
        let g = ((1.0 + 1f64.exp()) / 2.0).ln();
        assert!((b.gap - (1.0 - g)).abs() < 1e-12);
        assert!((b.gap - 0.3799).abs() < 1e-4 && b.ok);
        // every other term underflows: the gap equals the bound
        let b = softmax_bound_check(&[-5.0, 5.0, -4.0], 10.0).unwrap();
        assert!(b.ok && (b.bound - b.gap) < 1e-15);
    }

    #[test]
    fn softmax_gap_matches_evaluated_softmax() {
        let mut rng = Rng::new(21);
        for _ in 0..500 {
            let n = 1 + rng.below(64);
            let lambda = [0.1, 1.0, 10.0][rng.below(3)];
            let v: Vec<f64> = (0..n).map(|_| rng.uniform_in(-5.0, 5.0)).collect();
            let b = softmax_bound_check(&v, lambda).unwrap();
            let g = ValueFamily::SoftmaxMean { lambda }.eval(&v).unwrap();
            let max = ValueFamily::Max.eval(&v).unwrap();
            assert!((b.gap - (max - g)).abs() <= 1e-12 * (1.0 + max.abs()));
            assert!(b.ok);
        }
    }

    #[test]
    fn concentration_trend() {
        let mut u = |r: &mut Rng| r.uniform();
        let c = empirical_concentration(&mut u, &[8, 32, 128, 512], 100, 100_000, 3).unwrap();
        for w in c.windows(2) {
            assert!(w[1].1 < w[0].1, "{c:?}");
        }
        let slope = log_log_slope(&c);
        assert!((slope + 0.5).abs() <= 0.15, "{slope}");
    }

    #[test]
    fn concentration_of_reference_against_itself() {
        let mut u = |r: &mut Rng| r.uniform();
        let a = reference_sample(&mut u, 1000, 5);
        let b = reference_sample(&mut u, 1000, 5);
        assert_eq!(wasserstein1_1d(&a, &b).unwrap(), 0.0);
    }

    #[test]
    fn csv_header() {
        let mut buf = Vec::new();
        let row = DiagnosticRow {
            check: "x".into(),
            parameter: "N=2".into(),
            value: 0.5,
            bound: 1.0,
            ok: true,
        };
        write_diagnostics(&[row], &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "check,parameter,value,bound,ok\nx,N=2,0.5,1.0,true\n");
    }
}
