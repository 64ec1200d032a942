use crate::data::SetBatch;
use crate::error::{Error, Result};
use crate::numerics::{Matrix, Rng};

/// Sets of `n` points, each coordinate i.i.d. uniform on
/// `[-half_width, half_width]`.
pub fn sample_uniform_cube_sets(d: usize, n: usize, count: usize, half_width: f64, rng: &mut Rng) -> Result<SetBatch> {
    if d == 0 || n == 0 || count == 0 {
        return Err(Error::usage("d, N and count must be positive"));
    }
    let sets = (0..count)
        .map(|_| {
            let data = (0..n * d).map(|_| rng.uniform_in(-half_width, half_width)).collect();
            Matrix::from_vec(n, d, data).expect("sized above")
        })
        .collect();
    SetBatch::new(d, sets)
}

/// Where the contaminating mean `m'` is drawn.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContaminationDraw {
    /// A fresh `m' ~ N(m, σ_m'² I)` for every contaminated point, so the
    /// outliers scatter symmetrically around `m`.
    PerPoint,
    /// One `m'` per set shared by all of its contaminated points.
    PerSet,
}

/// Parameters of the contaminated Gaussian sets
/// `Xᵢ ~ (1-ε) N(m, σ_P² I) + ε N(m', σ_Q² I)`,
/// `m ~ N(0, σ_m² I)`, `m' ~ N(m, σ_m'² I)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustParams {
    pub sigma_m: f64,
    pub sigma_m_prime: f64,
    pub sigma_p: f64,
    pub sigma_q: f64,
    pub eps: f64,
    pub d: usize,
    pub contamination: ContaminationDraw,
}

impl Default for RobustParams {
    fn default() -> Self {
        RobustParams {
            sigma_m: 1.0,
            sigma_m_prime: 2.0,
            sigma_p: 1.5,
            sigma_q: 1.5,
            eps: 0.2,
            d: 10,
            contamination: ContaminationDraw::PerPoint,
        }
    }
}

impl RobustParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.eps) {
            return Err(Error::usage(format!("eps must lie in [0, 1], got {}", self.eps)));
        }
        let sigmas = [self.sigma_m, self.sigma_m_prime, self.sigma_p, self.sigma_q];
        if sigmas.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return Err(Error::usage("all standard deviations must be positive"));
        }
        if self.d == 0 {
            return Err(Error::usage("d must be positive"));
        }
        Ok(())
    }
}

/// Contaminated sets and, per set, the clean mean `m` (one row each).
pub fn sample_robust_sets(params: &RobustParams, n: usize, count: usize, rng: &mut Rng) -> Result<(SetBatch, Matrix)> {
    params.validate()?;
    if n == 0 || count == 0 {
        return Err(Error::usage("N and count must be positive"));
    }
    let d = params.d;
    let mut means = Matrix::zeros(count, d);
    let mut sets = Vec::with_capacity(count);
    for c in 0..count {
        let m: Vec<f64> = (0..d).map(|_| rng.normal_with(0.0, params.sigma_m)).collect();
        let shared: Option<Vec<f64>> = (params.contamination == ContaminationDraw::PerSet)
            .then(|| m.iter().map(|&mi| rng.normal_with(mi, params.sigma_m_prime)).collect());
        let mut pts = Matrix::zeros(n, d);
        for i in 0..n {
            let row = pts.row_mut(i);
            if rng.bernoulli(params.eps) {
                match &shared {
                    Some(mp) => {
                        for (x, &c) in row.iter_mut().zip(mp) {
                            *x = rng.normal_with(c, params.sigma_q);
                        }
                    }
                    None => {
                        for (x, &mi) in row.iter_mut().zip(&m) {
                            let c = rng.normal_with(mi, params.sigma_m_prime);
                            *x = rng.normal_with(c, params.sigma_q);
                        }
                    }
                }
            } else {
                for (x, &mi) in row.iter_mut().zip(&m) {
                    *x = rng.normal_with(mi, params.sigma_p);
                }
            }
        }
        means.row_mut(c).copy_from_slice(&m);
        sets.push(pts);
    }
    Ok((SetBatch::new(d, sets)?, means))
}

/// Fraction of contaminated draws, for checking the mixture weight.
pub fn contamination_fraction(params: &RobustParams, draws: usize, rng: &mut Rng) -> f64 {
    (0..draws).filter(|_| rng.bernoulli(params.eps)).count() as f64 / draws as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cube_support_and_centre() {
        let mut rng = Rng::new(1);
        let b = sample_uniform_cube_sets(4, 25, 1000, 3.0, &mut rng).unwrap();
        let mut sum = 0.0;
        let mut n = 0usize;
        for s in b.sets() {
            for &v in s.as_slice() {
                assert!((-3.0..=3.0).contains(&v));
                sum += v;
                n += 1;
            }
        }
        assert_eq!(n, 100_000);
        assert!((sum / n as f64).abs() < 0.05);
    }

    #[test]
    fn cube_is_deterministic() {
        let a = sample_uniform_cube_sets(3, 4, 10, 3.0, &mut Rng::new(8)).unwrap();
        let b = sample_uniform_cube_sets(3, 4, 10, 3.0, &mut Rng::new(8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn robust_shapes() {
        let (sets, means) = sample_robust_sets(&RobustParams::default(), 20, 7, &mut Rng::new(2)).unwrap();
        assert_eq!(sets.len(), 7);
        assert!(sets.sets().iter().all(|s| s.shape() == (20, 10)));
        assert_eq!(means.shape(), (7, 10));
    }

    #[test]
    fn clean_mixture_mean_concentrates() {
        let params = RobustParams {
            eps: 0.0,
            ..RobustParams::default()
        };
        let (sets, means) = sample_robust_sets(&params, 20_000, 1, &mut Rng::new(3)).unwrap();
        let mu = sets.get(0).column_means();
        // std of each coordinate mean is 1.5 / sqrt(20000) ≈ 0.0106
        for (a, b) in mu.iter().zip(means.row(0)) {
            assert!((a - b).abs() < 0.05);
        }
    }

    #[test]
    fn mixture_weight() {
        let f = contamination_fraction(&RobustParams::default(), 100_000, &mut Rng::new(4));
        assert!((f - 0.2).abs() < 0.01);
    }

    #[test]
    fn invalid_params() {
        let p = RobustParams {
            eps: 1.5,
            ..RobustParams::default()
        };
        assert!(sample_robust_sets(&p, 5, 5, &mut Rng::new(0)).is_err());
    }
}
