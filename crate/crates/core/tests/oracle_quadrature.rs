//! Independent quadrature verification of the closed-form denoiser.
//!
//! The quadrature oracle lives here, in test code, and never touches the
//! implementation path it checks: it integrates the posterior over clean
//! data on a dense grid and compares means and variances directly.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sre_core::denoiser::Denoiser;
use sre_core::oracle::{GaussianMixture, OracleDenoiser};
use sre_core::paradigm::Paradigm;
use sre_core::state::ReasoningState;

const LN_2PI: f64 = 1.8378770664093453;

/// 1D quadrature of the posterior over x0 on [-10, 10].
fn quadrature_1d(
    weights: &[f64],
    means: &[f64],
    vars: &[f64],
    a: f64,
    b: f64,
    x_t: f64,
    nodes: usize,
) -> (f64, f64) {
    let lo = -10.0;
    let hi = 10.0;
    let h = (hi - lo) / (nodes - 1) as f64;
    let mut z = 0.0;
    let mut m1 = 0.0;
    let mut m2 = 0.0;
    for k in 0..nodes {
        let x0 = lo + k as f64 * h;
        let mut p = 0.0;
        for c in 0..weights.len() {
            let d = x0 - means[c];
            p += weights[c] * (-0.5 * d * d / vars[c]).exp() / (2.0 * std::f64::consts::PI * vars[c]).sqrt();
        }
        let r = x_t - a * x0;
        let lik = (-0.5 * r * r / (b * b)).exp() / (2.0 * std::f64::consts::PI * b * b).sqrt();
        let w = p * lik * if k == 0 || k == nodes - 1 { 0.5 } else { 1.0 };
        z += w;
        m1 += w * x0;
        m2 += w * x0 * x0;
    }
    let mean = m1 / z;
    (mean, m2 / z - mean * mean)
}

/// 2D quadrature with heterogeneous levels: posterior over (x0_1, x0_2).
/// Returns per-variable means and variances.
#[allow(clippy::too_many_arguments)]
fn quadrature_2d(
    gmm: &GaussianMixture,
    a: [f64; 2],
    b: [f64; 2],
    x_t: [f64; 2],
    nodes: usize,
) -> ([f64; 2], [f64; 2]) {
    let lo = -10.0;
    let hi = 10.0;
    let h = (hi - lo) / (nodes - 1) as f64;
    // precompute component inverses (2x2)
    let k = gmm.components();
    let mut comp = Vec::with_capacity(k);
    for c in 0..k {
        let cov = &gmm.covariances()[c];
        let det = cov[(0, 0)] * cov[(1, 1)] - cov[(0, 1)] * cov[(1, 0)];
        let inv = [
            cov[(1, 1)] / det,
            -cov[(0, 1)] / det,
            -cov[(1, 0)] / det,
            cov[(0, 0)] / det,
        ];
        let lognorm = -0.5 * (2.0 * LN_2PI + det.ln());
        comp.push((gmm.weights()[c], gmm.means()[c].clone(), inv, lognorm));
    }
    let mut z = 0.0;
    let mut m1 = [0.0f64; 2];
    let mut m2 = [0.0f64; 2];
    for k1 in 0..nodes {
        let x1 = lo + k1 as f64 * h;
        let w1 = if k1 == 0 || k1 == nodes - 1 { 0.5 } else { 1.0 };
        for k2 in 0..nodes {
            let x2 = lo + k2 as f64 * h;
            let w2 = if k2 == 0 || k2 == nodes - 1 { 0.5 } else { 1.0 };
            let mut p = 0.0;
            for (wc, mu, inv, lognorm) in &comp {
                let d1 = x1 - mu[0];
                let d2 = x2 - mu[1];
                let maha = inv[0] * d1 * d1 + (inv[1] + inv[2]) * d1 * d2 + inv[3] * d2 * d2;
                p += wc * (lognorm - 0.5 * maha).exp();
            }
            let r1 = x_t[0] - a[0] * x1;
            let r2 = x_t[1] - a[1] * x2;
            let lik = (-0.5 * (r1 * r1 / (b[0] * b[0]) + r2 * r2 / (b[1] * b[1]))).exp()
                / (2.0 * std::f64::consts::PI * b[0] * b[1]);
            let w = p * lik * w1 * w2;
            z += w;
            m1[0] += w * x1;
            m1[1] += w * x2;
            m2[0] += w * x1 * x1;
            m2[1] += w * x2 * x2;
        }
    }
    let mean = [m1[0] / z, m1[1] / z];
    let var = [m2[0] / z - mean[0] * mean[0], m2[1] / z - mean[1] * mean[1]];
    (mean, var)
}

fn two_mode_1d() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.5, 0.5],
        vec![DVector::from_vec(vec![-2.0]), DVector::from_vec(vec![2.0])],
        vec![DMatrix::identity(1, 1), DMatrix::identity(1, 1)],
    )
    .unwrap()
}

fn correlated_2d() -> GaussianMixture {
    GaussianMixture::new(
        vec![0.6, 0.4],
        vec![
            DVector::from_vec(vec![-1.0, 0.5]),
            DVector::from_vec(vec![1.5, -0.5]),
        ],
        vec![
            DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.2]),
            DMatrix::from_row_slice(2, 2, &[0.8, -0.3, -0.3, 0.9]),
        ],
    )
    .unwrap()
}

#[test]
fn oracle_matches_1d_quadrature_across_levels_and_inputs() {
    let gmm = two_mode_1d();
    let weights = [0.5, 0.5];
    let means = [-2.0, 2.0];
    let vars = [1.0, 1.0];
    for paradigm in [Paradigm::RectifiedFlow, Paradigm::CosineFlow] {
        let oracle = OracleDenoiser::new(gmm.clone(), paradigm.clone(), 1).unwrap();
        for lt in 1..=6 {
            let t = lt as f64 / 6.0;
            let c = paradigm.coefficients(t).unwrap();
            for xi in 0..6 {
                let x_t = -3.0 + 1.2 * xi as f64;
                let state = ReasoningState::new(
                    DMatrix::from_row_slice(1, 1, &[x_t]),
                    DVector::from_vec(vec![t]),
                    vec![false],
                )
                .unwrap();
                let pred = oracle.denoise(&state).unwrap();
                let (qm, qv) =
                    quadrature_1d(&weights, &means, &vars, c.a, c.b, x_t, 20001);
                assert!(
                    (pred.x0_mean[(0, 0)] - qm).abs() < 1e-6,
                    "mean {} vs {qm} at t={t}, x={x_t}",
                    pred.x0_mean[(0, 0)]
                );
                assert!(
                    (pred.var.as_ref().unwrap()[0] - qv).abs() < 1e-6,
                    "var {} vs {qv} at t={t}, x={x_t}",
                    pred.var.unwrap()[0]
                );
            }
        }
    }
}

#[test]
fn oracle_matches_2d_quadrature_with_heterogeneous_levels() {
    let gmm = correlated_2d();
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(gmm.clone(), paradigm.clone(), 1).unwrap();
    let level_pairs = [(0.3, 0.8), (0.5, 0.5), (0.9, 0.2), (1.0, 0.4), (0.6, 1.0)];
    let inputs = [(-1.0, 0.5), (0.7, -0.3), (2.0, 1.0), (0.0, 0.0)];
    for &(t1, t2) in &level_pairs {
        let c1 = paradigm.coefficients(t1).unwrap();
        let c2 = paradigm.coefficients(t2).unwrap();
        for &(x1, x2) in &inputs {
            let state = ReasoningState::new(
                DMatrix::from_row_slice(2, 1, &[x1, x2]),
                DVector::from_vec(vec![t1, t2]),
                vec![false, false],
            )
            .unwrap();
            let pred = oracle.denoise(&state).unwrap();
            let (qm, qv) = quadrature_2d(&gmm, [c1.a, c2.a], [c1.b, c2.b], [x1, x2], 801);
            let var = pred.var.as_ref().unwrap();
            for i in 0..2 {
                assert!(
                    (pred.x0_mean[(i, 0)] - qm[i]).abs() < 1e-6,
                    "mean[{i}] {} vs {} at t=({t1},{t2}) x=({x1},{x2})",
                    pred.x0_mean[(i, 0)],
                    qm[i]
                );
                assert!(
                    (var[i] - qv[i]).abs() < 1e-6,
                    "var[{i}] {} vs {} at t=({t1},{t2}) x=({x1},{x2})",
                    var[i],
                    qv[i]
                );
            }
        }
    }
}

#[test]
fn average_uncertainty_is_nondecreasing_in_level() {
    let gmm = two_mode_1d();
    let paradigm = Paradigm::CosineFlow;
    let oracle = OracleDenoiser::new(gmm.clone(), paradigm.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x0 = gmm.sample(&mut rng)[0];
    let draws = 1000;
    let mut avg = Vec::new();
    for lt in 0..=8 {
        let t = lt as f64 / 8.0;
        let c = paradigm.coefficients(t).unwrap();
        let mut acc = 0.0;
        for _ in 0..draws {
            let eps: f64 = StandardNormal.sample(&mut rng);
            let x_t = c.a * x0 + c.b * eps;
            let state = ReasoningState::new(
                DMatrix::from_row_slice(1, 1, &[x_t]),
                DVector::from_vec(vec![t]),
                vec![false],
            )
            .unwrap();
            acc += oracle.denoise(&state).unwrap().var.unwrap()[0];
        }
        avg.push(acc / draws as f64);
    }
    let max = avg.iter().cloned().fold(0.0f64, f64::max);
    for pair in avg.windows(2) {
        assert!(
            pair[1] >= pair[0] - 0.01 * max,
            "average uncertainty decreased: {avg:?}"
        );
    }
}

#[test]
fn conditioning_never_increases_the_neighbours_uncertainty() {
    let gmm = correlated_2d();
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(gmm.clone(), paradigm.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let draws = 1000;
    for lt in 1..=5 {
        let t = lt as f64 / 5.0;
        let c = paradigm.coefficients(t).unwrap();
        let mut free_acc = 0.0;
        let mut cond_acc = 0.0;
        for _ in 0..draws {
            let x0 = gmm.sample(&mut rng);
            let e1: f64 = StandardNormal.sample(&mut rng);
            let e2: f64 = StandardNormal.sample(&mut rng);
            let x2_noisy = c.a * x0[1] + c.b * e2;
            // both variables noisy at level t
            let free_state = ReasoningState::new(
                DMatrix::from_row_slice(2, 1, &[c.a * x0[0] + c.b * e1, x2_noisy]),
                DVector::from_vec(vec![t, t]),
                vec![false, false],
            )
            .unwrap();
            free_acc += oracle.denoise(&free_state).unwrap().var.unwrap()[1];
            // variable 0 revealed at its true clean value
            let cond_state = ReasoningState::new(
                DMatrix::from_row_slice(2, 1, &[x0[0], x2_noisy]),
                DVector::from_vec(vec![0.0, t]),
                vec![true, false],
            )
            .unwrap();
            cond_acc += oracle.denoise(&cond_state).unwrap().var.unwrap()[1];
        }
        let free = free_acc / draws as f64;
        let cond = cond_acc / draws as f64;
        assert!(
            cond <= free + 0.01 * free.max(1e-12),
            "conditioning increased uncertainty at t={t}: {cond} > {free}"
        );
    }
}
