//! Gaussian discriminant analysis: one full-covariance Gaussian per class.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use thiserror::Error;

use crate::numcore::{logsumexp, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GdaError {
    #[error("class {class} has {count} samples; at least 2 are needed")]
    TooFewSamples { class: usize, count: usize },
    #[error("expected vectors of dimension {expected}, got {got}")]
    Dim { expected: usize, got: usize },
    #[error("unknown class {0}")]
    UnknownClass(usize),
    #[error("covariance of class {0} is not positive definite after shrinkage")]
    NotPositiveDefinite(usize),
    #[error("{0}")]
    Invalid(String),
}

/// Diagonal loading added to every class covariance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shrinkage {
    /// `eps = c * trace(cov) / d`, or `c` when the covariance is exactly zero.
    Relative(f64),
    Absolute(f64),
}

impl Default for Shrinkage {
    fn default() -> Self {
        Shrinkage::Relative(1e-3)
    }
}

#[derive(Clone, Debug)]
pub struct ClassGaussian {
    pub mean: Vec<f64>,
    /// Sample covariance (denominator `n - 1`), row-major, without shrinkage.
    pub cov: Vec<f64>,
    pub eps: f64,
    pub prior: f64,
    chol: Cholesky<f64, Dyn>,
    log_det: f64,
}

impl ClassGaussian {
    fn new(class: usize, mean: Vec<f64>, cov: Vec<f64>, eps: f64, prior: f64) -> Result<Self, GdaError> {
        let d = mean.len();
        let mut m = DMatrix::from_row_slice(d, d, &cov);
        for i in 0..d {
            m[(i, i)] += eps;
        }
        let chol = Cholesky::new(m).ok_or(GdaError::NotPositiveDefinite(class))?;
        let log_det = 2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(Self { mean, cov, eps, prior, chol, log_det })
    }

    pub fn log_det(&self) -> f64 {
        self.log_det
    }

    /// `(s - mu)^T (cov + eps I)^{-1} (s - mu)`.
    pub fn mahalanobis_sq(&self, s: &[f64]) -> f64 {
        let diff = DVector::from_iterator(s.len(), s.iter().zip(&self.mean).map(|(a, b)| a - b));
        let z = self
            .chol
            .l_dirty()
            .solve_lower_triangular(&diff)
            .expect("cholesky factor has a positive diagonal");
        z.norm_squared()
    }
}

#[derive(Clone, Debug)]
pub struct GdaModel {
    dim: usize,
    classes: Vec<ClassGaussian>,
}

const LN_2PI: f64 = 1.837_877_066_409_345_5;

impl GdaModel {
    /// Fits per-class means and covariances in one pass over `vectors` (Welford
    /// updates). `labels` are contiguous class indices `0..n_classes`.
    pub fn fit(vectors: &Tensor, labels: &[usize], n_classes: usize, shrinkage: Shrinkage) -> Result<Self, GdaError> {
        if labels.len() != vectors.rows() {
            return Err(GdaError::Invalid(format!(
                "{} labels for {} vectors",
                labels.len(),
                vectors.rows()
            )));
        }
        let d = vectors.cols();
        let mut count = vec![0usize; n_classes];
        let mut mean = vec![vec![0.0; d]; n_classes];
        let mut m2 = vec![vec![0.0; d * d]; n_classes];
        let mut delta = vec![0.0; d];
        for (i, &k) in labels.iter().enumerate() {
            if k >= n_classes {
                return Err(GdaError::UnknownClass(k));
            }
            let x = vectors.row(i);
            count[k] += 1;
            let n = count[k] as f64;
            for j in 0..d {
                delta[j] = x[j] - mean[k][j];
                mean[k][j] += delta[j] / n;
            }
            for a in 0..d {
                let after = x[a] - mean[k][a];
                for b in 0..d {
                    m2[k][a * d + b] += after * delta[b];
                }
            }
        }
        let total = labels.len() as f64;
        let mut classes = Vec::with_capacity(n_classes);
        for k in 0..n_classes {
            if count[k] < 2 {
                return Err(GdaError::TooFewSamples { class: k, count: count[k] });
            }
            let denom = (count[k] - 1) as f64;
            let mut cov: Vec<f64> = m2[k].iter().map(|v| v / denom).collect();
            // symmetrize away rounding asymmetry of the rank-one updates
            for a in 0..d {
                for b in a + 1..d {
                    let s = 0.5 * (cov[a * d + b] + cov[b * d + a]);
                    cov[a * d + b] = s;
                    cov[b * d + a] = s;
                }
            }
            let eps = match shrinkage {
                Shrinkage::Absolute(e) => e,
                Shrinkage::Relative(c) => {
                    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
                    if trace > 0.0 {
                        c * trace / d as f64
                    } else {
                        c
                    }
                }
            };
            if !(eps > 0.0) {
                return Err(GdaError::Invalid(format!("shrinkage must be > 0, got {eps}")));
            }
            classes.push(ClassGaussian::new(k, mean[k].clone(), cov, eps, count[k] as f64 / total)?);
        }
        Ok(Self { dim: d, classes })
    }

    /// Rebuilds a model from stored parameters.
    pub fn from_parts(parts: Vec<(Vec<f64>, Vec<f64>, f64, f64)>) -> Result<Self, GdaError> {
        let dim = parts.first().map(|p| p.0.len()).ok_or(GdaError::Invalid("no classes".into()))?;
        let classes = parts
            .into_iter()
            .enumerate()
            .map(|(k, (mean, cov, eps, prior))| {
                if mean.len() != dim || cov.len() != dim * dim {
                    return Err(GdaError::Dim { expected: dim, got: mean.len() });
                }
                ClassGaussian::new(k, mean, cov, eps, prior)
            })
            .collect::<Result<_, _>>()?;
        Ok(Self { dim, classes })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn classes(&self) -> &[ClassGaussian] {
        &self.classes
    }

    /// `log pi_k + log N(s; mu_k, cov_k + eps_k I)`.
    pub fn log_density(&self, s: &[f64], k: usize) -> Result<f64, GdaError> {
        if s.len() != self.dim {
            return Err(GdaError::Dim { expected: self.dim, got: s.len() });
        }
        let c = self.classes.get(k).ok_or(GdaError::UnknownClass(k))?;
        Ok(c.prior.ln() - 0.5 * (self.dim as f64 * LN_2PI + c.log_det + c.mahalanobis_sq(s)))
    }

    pub fn log_densities(&self, s: &[f64]) -> Result<Vec<f64>, GdaError> {
        (0..self.classes.len()).map(|k| self.log_density(s, k)).collect()
    }

    pub fn max_log_density(&self, s: &[f64]) -> Result<f64, GdaError> {
        Ok(self.log_densities(s)?.into_iter().fold(f64::NEG_INFINITY, f64::max))
    }

    /// `log sum_k p(k, s)`.
    pub fn marginal_log_density(&self, s: &[f64]) -> Result<f64, GdaError> {
        let lds = self.log_densities(s)?;
        logsumexp(&lds, 1.0).map_err(|e| GdaError::Invalid(e.to_string()))
    }

    /// True when every class density at `s` is below `xi`.
    pub fn screen(&self, s: &[f64], xi: f64) -> Result<bool, GdaError> {
        self.screen_log(s, xi.ln())
    }

    /// [`GdaModel::screen`] with the threshold given as `ln xi`.
    pub fn screen_log(&self, s: &[f64], log_xi: f64) -> Result<bool, GdaError> {
        Ok(self.max_log_density(s)? < log_xi)
    }

    /// `ln` of the `q`-quantile (linear interpolation) of the per-row maximum
    /// class density.
    pub fn log_density_quantile(&self, vectors: &Tensor, q: f64) -> Result<f64, GdaError> {
        if !(0.0..=1.0).contains(&q) {
            return Err(GdaError::Invalid(format!("quantile {q} outside [0, 1]")));
        }
        let mut v: Vec<f64> = (0..vectors.rows())
            .map(|i| self.max_log_density(vectors.row(i)))
            .collect::<Result<_, _>>()?;
        v.sort_by(f64::total_cmp);
        let pos = q * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        Ok(v[lo] + (pos - lo as f64) * (v[hi] - v[lo]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use crate::rng::std_normal;

    fn fit1(rows: &[&[f64]]) -> GdaModel {
        let t = Tensor::from_rows(rows).unwrap();
        GdaModel::fit(&t, &vec![0; rows.len()], 1, Shrinkage::default()).unwrap()
    }

    #[test]
    fn two_point_hand_computation() {
        let m = fit1(&[&[1.0, 0.0], &[-1.0, 0.0]]);
        let c = &m.classes()[0];
        assert_eq!(c.mean, vec![0.0, 0.0]);
        assert_eq!(c.cov, vec![2.0, 0.0, 0.0, 0.0]);
        assert!((c.eps - 1e-3).abs() < 1e-15);
        assert_eq!(c.prior, 1.0);
    }

    #[test]
    fn identical_points_rely_on_shrinkage() {
        let m = fit1(&[&[0.5, 0.5], &[0.5, 0.5], &[0.5, 0.5]]);
        let c = &m.classes()[0];
        assert!(c.cov.iter().all(|&v| v == 0.0));
        assert!(m.log_density(&[0.5, 0.5], 0).unwrap().is_finite());
    }

    #[test]
    fn too_few_samples_names_class() {
        let t = Tensor::from_rows(&[[0.0], [1.0], [2.0]]).unwrap();
        let err = GdaModel::fit(&t, &[0, 0, 1], 2, Shrinkage::default()).unwrap_err();
        assert_eq!(err, GdaError::TooFewSamples { class: 1, count: 1 });
    }

    #[test]
    fn standard_normal_at_mode() {
        let m = GdaModel::from_parts(vec![(vec![0.0; 3], vec![0.0; 9], 1.0, 1.0)]).unwrap();
        let want = -1.5 * (2.0 * std::f64::consts::PI).ln();
        assert!((m.log_density(&[0.0; 3], 0).unwrap() - want).abs() < 1e-12);
        assert!(m.log_density(&[0.0; 3], 1).is_err());
        assert!(m.log_density(&[0.0; 2], 0).is_err());
    }

    #[test]
    fn density_decreases_along_ray() {
        let m = GdaModel::from_parts(vec![(vec![1.0, -1.0], vec![0.5, 0.2, 0.2, 0.3], 0.01, 1.0)]).unwrap();
        let dir = [0.6, 0.8];
        let mut last = f64::INFINITY;
        for step in 0..20 {
            let t = step as f64 * 0.3;
            let s = [1.0 + t * dir[0], -1.0 + t * dir[1]];
            let ld = m.log_density(&s, 0).unwrap();
            assert!(ld < last);
            last = ld;
        }
    }

    fn two_pass(rows: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
        let n = rows.len() as f64;
        let d = rows[0].len();
        let mean: Vec<f64> = (0..d).map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / n).collect();
        let mut cov = vec![0.0; d * d];
        for r in rows {
            for a in 0..d {
                for b in 0..d {
                    cov[a * d + b] += (r[a] - mean[a]) * (r[b] - mean[b]);
                }
            }
        }
        (mean, cov.into_iter().map(|v| v / (n - 1.0)).collect())
    }

    #[test]
    fn welford_matches_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let rows: Vec<Vec<f64>> = (0..100)
            .map(|_| (0..4).map(|j| 3.0 + j as f64 + rng.random_range(-2.0..2.0)).collect())
            .collect();
        let m = GdaModel::fit(&Tensor::from_rows(&rows).unwrap(), &[0; 100], 1, Shrinkage::default()).unwrap();
        let (mean, cov) = two_pass(&rows);
        let c = &m.classes()[0];
        for (a, b) in c.mean.iter().zip(&mean) {
            assert!((a - b).abs() < 1e-10);
        }
        for (a, b) in c.cov.iter().zip(&cov) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn screen_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let rows: Vec<Vec<f64>> = (0..50)
            .map(|i| {
                let c = if i % 2 == 0 { 0.0 } else { 5.0 };
                vec![c + std_normal(&mut rng) * 0.3, std_normal(&mut rng)]
            })
            .collect();
        let labels: Vec<usize> = (0..50).map(|i| i % 2).collect();
        let m = GdaModel::fit(&Tensor::from_rows(&rows).unwrap(), &labels, 2, Shrinkage::default()).unwrap();
        let mu = m.classes()[1].mean.clone();
        assert!(!m.screen(&mu, 1e-12).unwrap());
        assert!(m.screen(&[1e4, -1e4], 1e-12).unwrap());
        assert!(m.screen(&mu, f64::INFINITY).unwrap());
    }

    proptest::proptest! {
        #[test]
        fn screen_monotone_in_xi(x in -6.0f64..6.0, y in -6.0f64..6.0, a in -40.0f64..5.0, b in -40.0f64..5.0) {
            let m = GdaModel::from_parts(vec![
                (vec![0.0, 0.0], vec![1.0, 0.3, 0.3, 0.5], 1e-3, 0.4),
                (vec![3.0, 1.0], vec![0.2, 0.0, 0.0, 0.2], 1e-3, 0.6),
            ]).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            if m.screen_log(&[x, y], lo).unwrap() {
                proptest::prop_assert!(m.screen_log(&[x, y], hi).unwrap());
            }
        }

        #[test]
        fn fit_is_order_invariant(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
            let mut perm: Vec<usize> = (0..30).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
            let a = GdaModel::fit(&Tensor::from_rows(&rows).unwrap(), &labels, 3, Shrinkage::default()).unwrap();
            let prow: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let plab: Vec<usize> = perm.iter().map(|&i| labels[i]).collect();
            let b = GdaModel::fit(&Tensor::from_rows(&prow).unwrap(), &plab, 3, Shrinkage::default()).unwrap();
            let probe = [0.3, -0.7, 1.1];
            for k in 0..3 {
                let (la, lb) = (a.log_density(&probe, k).unwrap(), b.log_density(&probe, k).unwrap());
                proptest::prop_assert!((la - lb).abs() <= 1e-12, "{} vs {}", la, lb);
            }
        }
    }

    #[test]
    fn integrates_to_prior() {
        // d = 1
        let m = GdaModel::from_parts(vec![
            (vec![0.5], vec![0.4], 1e-3, 0.3),
            (vec![-1.0], vec![0.1], 1e-3, 0.7),
        ])
        .unwrap();
        let h = 0.005;
        for (k, want) in [(0usize, 0.3), (1, 0.7)] {
            let total: f64 = (0..2400).map(|i| -6.0 + (i as f64 + 0.5) * h).map(|x| m.log_density(&[x], k).unwrap().exp() * h).sum();
            assert!((total - want).abs() / want < 0.02, "{total}");
        }
        // d = 2
        let m = GdaModel::from_parts(vec![(vec![0.2, -0.1], vec![0.5, 0.1, 0.1, 0.3], 1e-3, 0.45)]).unwrap();
        let h = 0.04;
        let mut total = 0.0;
        for i in 0..200 {
            for j in 0..200 {
                let s = [-4.0 + (i as f64 + 0.5) * h, -4.0 + (j as f64 + 0.5) * h];
                total += m.log_density(&s, 0).unwrap().exp() * h * h;
            }
        }
        assert!((total - 0.45).abs() / 0.45 < 0.02, "{total}");
    }
}
