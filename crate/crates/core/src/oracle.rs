//! Gaussian mixtures and the exact closed-form denoiser.
//!
//! When the data distribution is a Gaussian mixture, the posterior over clean
//! data given noisy observations at heterogeneous per-variable levels is
//! available in closed form. With `A = diag(a_{t_i})` (repeated per scalar
//! dimension) and `B2 = diag(b^2_{t_i})`, the noisy state decomposes per
//! component `c` as `x_t | c ~ N(A mu_c, A Sigma_c A + B2)`, and standard
//! Gaussian conditioning gives the within-component posterior mean and
//! covariance. This module is the ground-truth engine every sampler and
//! schedule is validated against.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::denoiser::{Denoiser, Prediction};
use crate::error::{Error, Result};
use crate::paradigm::Paradigm;
use crate::state::ReasoningState;

const LN_2PI: f64 = 1.8378770664093453;

/// A mixture of full-covariance Gaussians on `R^D`.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    weights: Vec<f64>,
    means: Vec<DVector<f64>>,
    covariances: Vec<DMatrix<f64>>,
    cholesky: Vec<Cholesky<f64, Dyn>>,
}

impl GaussianMixture {
    pub fn new(
        weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covariances: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        let k = weights.len();
        if k == 0 || means.len() != k || covariances.len() != k {
            return Err(Error::InvalidMixture(
                "weights, means and covariances must have the same nonzero length",
            ));
        }
        if weights.iter().any(|&w| w.is_nan() || !w.is_finite() || w < 0.0) {
            return Err(Error::InvalidMixture("weights must be nonnegative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::InvalidMixture("weights must sum to 1"));
        }
        let dim = means[0].len();
        let mut cholesky = Vec::with_capacity(k);
        for c in 0..k {
            if means[c].len() != dim {
                return Err(Error::InvalidMixture("component means differ in dimension"));
            }
            let cov = &covariances[c];
            if cov.nrows() != dim || cov.ncols() != dim {
                return Err(Error::InvalidMixture("covariance shape mismatch"));
            }
            for i in 0..dim {
                for j in 0..i {
                    if (cov[(i, j)] - cov[(j, i)]).abs() > 1e-12 {
                        return Err(Error::InvalidMixture("covariance not symmetric"));
                    }
                }
            }
            match Cholesky::new(cov.clone()) {
                Some(ch) => cholesky.push(ch),
                None => {
                    return Err(Error::InvalidMixture(
                        "covariance not positive-definite",
                    ))
                }
            }
        }
        Ok(Self {
            weights,
            means,
            covariances,
            cholesky,
        })
    }

    /// Convenience constructor for a single Gaussian.
    pub fn single(mean: DVector<f64>, covariance: DMatrix<f64>) -> Result<Self> {
        Self::new(vec![1.0], vec![mean], vec![covariance])
    }

    pub fn dim(&self) -> usize {
        self.means[0].len()
    }

    pub fn components(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn means(&self) -> &[DVector<f64>] {
        &self.means
    }

    pub fn covariances(&self) -> &[DMatrix<f64>] {
        &self.covariances
    }

    /// Mixture mean `sum_c w_c mu_c`.
    pub fn mean(&self) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim());
        for (w, mu) in self.weights.iter().zip(&self.means) {
            m += mu * *w;
        }
        m
    }

    /// Mixture covariance `sum_c w_c (Sigma_c + mu_c mu_c^T) - m m^T`.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        let mut cov = DMatrix::zeros(self.dim(), self.dim());
        for ((w, mu), sigma) in self.weights.iter().zip(&self.means).zip(&self.covariances) {
            cov += (sigma + mu * mu.transpose()) * *w;
        }
        cov -= &m * m.transpose();
        cov
    }

    /// `log sum_c w_c N(x; mu_c, Sigma_c)` via log-sum-exp.
    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch {
                context: "gmm log_density",
                expected: format!("{}", self.dim()),
                got: format!("{}", x.len()),
            });
        }
        let d = self.dim() as f64;
        let mut logs = Vec::with_capacity(self.components());
        for c in 0..self.components() {
            if self.weights[c] == 0.0 {
                continue;
            }
            let ch = &self.cholesky[c];
            let diff = x - &self.means[c];
            let solved = ch.solve(&diff);
            let maha = diff.dot(&solved);
            let logdet: f64 = ch.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            logs.push(self.weights[c].ln() - 0.5 * (d * LN_2PI + logdet + maha));
        }
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Ok(max + logs.iter().map(|l| (l - max).exp()).sum::<f64>().ln())
    }

    /// Draws one vector: component by weight, then mean plus Cholesky factor
    /// times a standard normal draw. Deterministic given the stream.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut comp = self.components() - 1;
        for (c, &w) in self.weights.iter().enumerate() {
            acc += w;
            if u < acc {
                comp = c;
                break;
            }
        }
        let z = DVector::from_fn(self.dim(), |_, _| StandardNormal.sample(rng));
        &self.means[comp] + self.cholesky[comp].l_dirty().lower_triangle() * z
    }
}

/// The exact posterior-mean denoiser for a Gaussian-mixture data
/// distribution, valid for any heterogeneous level assignment.
pub struct OracleDenoiser {
    gmm: GaussianMixture,
    paradigm: Paradigm,
    dim_per_variable: usize,
}

impl OracleDenoiser {
    pub fn new(gmm: GaussianMixture, paradigm: Paradigm, dim_per_variable: usize) -> Result<Self> {
        if dim_per_variable == 0 || !gmm.dim().is_multiple_of(dim_per_variable) {
            return Err(Error::ShapeMismatch {
                context: "oracle denoiser",
                expected: format!("mixture dimension divisible by {dim_per_variable}"),
                got: format!("{}", gmm.dim()),
            });
        }
        Ok(Self {
            gmm,
            paradigm,
            dim_per_variable,
        })
    }

    pub fn mixture(&self) -> &GaussianMixture {
        &self.gmm
    }
}

impl Denoiser for OracleDenoiser {
    fn denoise(&self, state: &ReasoningState) -> Result<Prediction> {
        let n = state.n();
        let dim = state.dim();
        let d_total = n * dim;
        if dim != self.dim_per_variable || d_total != self.gmm.dim() {
            return Err(Error::ShapeMismatch {
                context: "oracle denoise",
                expected: format!("{} variables x {} dims", self.gmm.dim() / self.dim_per_variable, self.dim_per_variable),
                got: format!("{n} x {dim}"),
            });
        }

        // Per-coordinate signal scale and noise variance.
        let mut a_diag = DVector::zeros(d_total);
        let mut b2_diag = DVector::zeros(d_total);
        for i in 0..n {
            let c = self.paradigm.coefficients(state.levels()[i])?;
            for j in 0..dim {
                a_diag[i * dim + j] = c.a;
                b2_diag[i * dim + j] = c.b * c.b;
            }
        }
        let x = state.flat_values();

        let k = self.gmm.components();
        let mut log_resp = Vec::with_capacity(k);
        let mut post_means = Vec::with_capacity(k);
        let mut post_diag = Vec::with_capacity(k);
        for c in 0..k {
            let mu = &self.gmm.means()[c];
            let sigma = &self.gmm.covariances()[c];

            // innovation covariance S = A Sigma A + B2 (A diagonal)
            let mut s = DMatrix::zeros(d_total, d_total);
            for p in 0..d_total {
                for q in 0..d_total {
                    s[(p, q)] = a_diag[p] * a_diag[q] * sigma[(p, q)];
                }
                s[(p, p)] += b2_diag[p];
            }
            let chol = Cholesky::new(s).ok_or(Error::SingularInnovation { component: c })?;

            // residual of the observation against the scaled component mean
            let innov = DVector::from_fn(d_total, |p, _| x[p] - a_diag[p] * mu[p]);
            let solved = chol.solve(&innov);
            let maha = innov.dot(&solved);
            let logdet: f64 =
                chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>() * 2.0;
            log_resp.push(
                self.gmm.weights()[c].max(f64::MIN_POSITIVE).ln()
                    - 0.5 * (d_total as f64 * LN_2PI + logdet + maha),
            );

            // gain rows: Sigma A, columns scaled by a
            let mut sigma_a = sigma.clone();
            for q in 0..d_total {
                let aq = a_diag[q];
                for p in 0..d_total {
                    sigma_a[(p, q)] *= aq;
                }
            }
            // posterior mean mu + Sigma A S^-1 innov
            let gain_innov = &sigma_a * &solved;
            post_means.push(mu + gain_innov);

            // diagonal of posterior covariance Sigma - Sigma A S^-1 A Sigma
            let solved_mat = chol.solve(&sigma_a.transpose());
            let mut diag = DVector::zeros(d_total);
            for p in 0..d_total {
                let mut acc = sigma[(p, p)];
                for q in 0..d_total {
                    acc -= sigma_a[(p, q)] * solved_mat[(q, p)];
                }
                diag[p] = acc.max(0.0);
            }
            post_diag.push(diag);
        }

        // normalized responsibilities
        let max = log_resp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut resp: Vec<f64> = log_resp.iter().map(|l| (l - max).exp()).collect();
        let total: f64 = resp.iter().sum();
        for r in resp.iter_mut() {
            *r /= total;
        }

        // mixture posterior mean and per-coordinate variance
        let mut mean = DVector::zeros(d_total);
        for c in 0..k {
            mean += &post_means[c] * resp[c];
        }
        let mut second: DVector<f64> = DVector::zeros(d_total);
        for c in 0..k {
            for p in 0..d_total {
                second[p] += resp[c] * (post_diag[c][p] + post_means[c][p] * post_means[c][p]);
            }
        }
        let mut var: DVector<f64> = DVector::zeros(n);
        for i in 0..n {
            let mut acc = 0.0;
            for j in 0..dim {
                let p = i * dim + j;
                acc += (second[p] - mean[p] * mean[p]).max(0.0);
            }
            var[i] = acc;
        }

        let mut x0_mean = DMatrix::zeros(n, dim);
        for i in 0..n {
            for j in 0..dim {
                x0_mean[(i, j)] = mean[i * dim + j];
            }
        }
        // Clamp conditioned variables exactly.
        for i in 0..n {
            if state.is_conditioned(i) {
                for j in 0..dim {
                    x0_mean[(i, j)] = state.values()[(i, j)];
                }
                var[i] = 0.0;
            }
        }

        Ok(Prediction {
            x0_mean,
            var: Some(var),
            responsibilities: Some(DVector::from_vec(resp)),
            var_interp: None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dmatrix;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn standard_normal_1d() -> GaussianMixture {
        GaussianMixture::single(DVector::zeros(1), DMatrix::identity(1, 1)).unwrap()
    }

    #[test]
    fn weights_must_sum_to_one() {
        let err = GaussianMixture::new(
            vec![0.5, 0.4],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap_err();
        assert!(matches!(err, Error::InvalidMixture(_)));
    }

    #[test]
    fn asymmetric_covariance_rejected() {
        let cov = dmatrix![1.0, 0.3; 0.2, 1.0];
        let err = GaussianMixture::single(DVector::zeros(2), cov).unwrap_err();
        assert!(matches!(err, Error::InvalidMixture(_)));
    }

    #[test]
    fn non_positive_definite_rejected() {
        let cov = dmatrix![1.0, 2.0; 2.0, 1.0];
        let err = GaussianMixture::single(DVector::zeros(2), cov).unwrap_err();
        assert!(matches!(err, Error::InvalidMixture(_)));
    }

    #[test]
    fn log_density_standard_normal_origin() {
        let gmm = standard_normal_1d();
        let ld = gmm.log_density(&DVector::zeros(1)).unwrap();
        assert!((ld - (-0.9189385332046727)).abs() < 1e-12);
    }

    #[test]
    fn log_density_duplicate_components_collapse() {
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::zeros(1), DVector::zeros(1)],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        let single = standard_normal_1d();
        let x = DVector::from_vec(vec![0.7]);
        assert!((gmm.log_density(&x).unwrap() - single.log_density(&x).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn log_density_2d_full_covariance_matches_direct_formula() {
        let cov = dmatrix![2.0, 0.6; 0.6, 1.0];
        let mean = DVector::from_vec(vec![0.5, -1.0]);
        let gmm = GaussianMixture::single(mean.clone(), cov.clone()).unwrap();
        let x = DVector::from_vec(vec![1.2, 0.3]);
        // direct dense evaluation
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let inv = dmatrix![cov[(1,1)]/det, -cov[(0,1)]/det; -cov[(1,0)]/det, cov[(0,0)]/det];
        let d = &x - &mean;
        let maha = (inv * &d).dot(&d);
        let expect = -0.5 * (2.0 * LN_2PI + det.ln() + maha);
        assert!((gmm.log_density(&x).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn sample_degenerate_weights_always_first_component() {
        let gmm = GaussianMixture::new(
            vec![1.0, 0.0],
            vec![DVector::from_vec(vec![5.0]), DVector::from_vec(vec![-5.0])],
            vec![
                DMatrix::identity(1, 1) * 1e-6,
                DMatrix::identity(1, 1) * 1e-6,
            ],
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x = gmm.sample(&mut rng);
            assert!((x[0] - 5.0).abs() < 0.1);
        }
    }

    #[test]
    fn sample_is_deterministic_given_seed() {
        let gmm = standard_normal_1d();
        let a: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..10).map(|_| gmm.sample(&mut rng)[0]).collect()
        };
        let b: Vec<f64> = {
            let mut rng = ChaCha8Rng::seed_from_u64(7);
            (0..10).map(|_| gmm.sample(&mut rng)[0]).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn sample_mean_of_standard_normal() {
        let gmm = standard_normal_1d();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| gmm.sample(&mut rng)[0]).sum::<f64>() / n as f64;
        assert!(mean.abs() < 4.0 / (n as f64).sqrt());
    }

    #[test]
    fn clean_input_is_its_own_posterior() {
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        let oracle = OracleDenoiser::new(gmm, Paradigm::RectifiedFlow, 1).unwrap();
        let state = ReasoningState::new(
            DMatrix::from_row_slice(1, 1, &[0.3]),
            DVector::from_vec(vec![0.0]),
            vec![false],
        )
        .unwrap();
        let pred = oracle.denoise(&state).unwrap();
        assert!((pred.x0_mean[(0, 0)] - 0.3).abs() < 1e-9);
        assert!(pred.var.unwrap()[0].abs() < 1e-9);
    }

    #[test]
    fn scalar_gaussian_posterior_vp_halfway() {
        // Single N(0,1), a = b = sqrt(2)/2, x_t = 1:
        // posterior mean = a x_t / (a^2 + b^2) = sqrt(2)/2.
        let oracle =
            OracleDenoiser::new(standard_normal_1d(), Paradigm::CosineFlow, 1).unwrap();
        let state = ReasoningState::new(
            DMatrix::from_row_slice(1, 1, &[1.0]),
            DVector::from_vec(vec![0.5]),
            vec![false],
        )
        .unwrap();
        let pred = oracle.denoise(&state).unwrap();
        assert!((pred.x0_mean[(0, 0)] - 0.7071067811865476).abs() < 1e-12);
    }

    #[test]
    fn two_component_posterior_matches_frozen_quadrature_values() {
        // Components at -2 and +2, unit variances, equal weights, rectified
        // t = 0.5, x_t = 0.6. Expected values computed by trapezoid
        // quadrature of the posterior over [-10, 10] with 20001 nodes.
        let gmm = GaussianMixture::new(
            vec![0.5, 0.5],
            vec![DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])],
            vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
        )
        .unwrap();
        let oracle = OracleDenoiser::new(gmm, Paradigm::RectifiedFlow, 1).unwrap();
        let state = ReasoningState::new(
            DMatrix::from_row_slice(1, 1, &[0.6]),
            DVector::from_vec(vec![0.5]),
            vec![false],
        )
        .unwrap();
        let pred = oracle.denoise(&state).unwrap();
        assert!((pred.x0_mean[(0, 0)] - 1.4336546070121554).abs() < 1e-6);
        assert!((pred.var.unwrap()[0] - 0.8050199962074087).abs() < 1e-6);
        let resp = pred.responsibilities.unwrap();
        assert!((resp[0] - 0.08317269649392234).abs() < 1e-9);
        assert!((resp.sum() - 1.0).abs() < 1e-12);
    }
}
