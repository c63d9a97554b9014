//! Task domains and evaluation metrics.
//!
//! Three concrete domains, all backed by an explicit Gaussian mixture so the
//! exact oracle applies:
//!
//! * Latin-square boards (one blurred mixture component per valid board) —
//!   the combinatorial-constraint task whose invalid decodes measure
//!   hallucination,
//! * a stationary AR(1) sequence (single correlated Gaussian) for
//!   rolling-window generation,
//! * any explicitly specified mixture.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::denoiser::Prediction;
use crate::error::{Error, Result};
use crate::oracle::GaussianMixture;
use crate::state::{DependencyGraph, ReasoningState};

/// A reasoning problem: variable layout, data distribution and optional
/// dependency structure.
#[derive(Debug, Clone)]
pub struct TaskDomain {
    pub name: String,
    pub n: usize,
    pub dim: usize,
    pub positions: DVector<f64>,
    pub mixture: GaussianMixture,
    pub graph: Option<DependencyGraph>,
    /// Set for board tasks; enables validity metrics and board decoding.
    pub board_order: Option<usize>,
}

impl TaskDomain {
    pub fn from_mixture(name: &str, mixture: GaussianMixture, dim: usize) -> Result<Self> {
        if dim == 0 || !mixture.dim().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch {
                context: "task mixture",
                expected: format!("dimension divisible by {dim}"),
                got: format!("{}", mixture.dim()),
            });
        }
        let n = mixture.dim() / dim;
        Ok(Self {
            name: name.to_string(),
            n,
            dim,
            positions: DVector::from_fn(n, |i, _| i as f64),
            mixture,
            graph: None,
            board_order: None,
        })
    }

    /// Draws one clean sample, reshaped to the `n x dim` variable layout.
    pub fn sample_x0<R: Rng + ?Sized>(&self, rng: &mut R) -> DMatrix<f64> {
        let flat = self.mixture.sample(rng);
        DMatrix::from_fn(self.n, self.dim, |i, j| flat[i * self.dim + j])
    }
}

/// Scalar encoding of digit `g` in `{0..order-1}`: affine map onto `[-1, 1]`.
pub fn encode_digit(digit: usize, order: usize) -> f64 {
    2.0 * digit as f64 / (order as f64 - 1.0) - 1.0
}

fn nearest_digit(value: f64, order: usize) -> usize {
    (0..order)
        .min_by(|&a, &b| {
            let da = (value - encode_digit(a, order)).abs();
            let db = (value - encode_digit(b, order)).abs();
            da.partial_cmp(&db).unwrap()
        })
        .unwrap()
}

/// Exhaustively enumerates all Latin squares of the given order, each board
/// as row-major digits.
pub fn enumerate_latin_squares(order: usize) -> Vec<Vec<usize>> {
    fn permutations(order: usize) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let mut items: Vec<usize> = (0..order).collect();
        permute(&mut items, 0, &mut out);
        out.sort();
        out
    }
    fn permute(items: &mut Vec<usize>, k: usize, out: &mut Vec<Vec<usize>>) {
        if k == items.len() {
            out.push(items.clone());
            return;
        }
        for i in k..items.len() {
            items.swap(k, i);
            permute(items, k + 1, out);
            items.swap(k, i);
        }
    }
    fn compatible(rows: &[&[usize]], candidate: &[usize]) -> bool {
        rows.iter()
            .all(|row| row.iter().zip(candidate).all(|(a, b)| a != b))
    }
    fn search(
        perms: &[Vec<usize>],
        stack: &mut Vec<usize>,
        order: usize,
        boards: &mut Vec<Vec<usize>>,
    ) {
        if stack.len() == order {
            let mut board = Vec::with_capacity(order * order);
            for &p in stack.iter() {
                board.extend_from_slice(&perms[p]);
            }
            boards.push(board);
            return;
        }
        for (idx, perm) in perms.iter().enumerate() {
            let rows: Vec<&[usize]> = stack.iter().map(|&p| perms[p].as_slice()).collect();
            if compatible(&rows, perm) {
                stack.push(idx);
                search(perms, stack, order, boards);
                stack.pop();
            }
        }
    }

    let perms = permutations(order);
    let mut boards = Vec::new();
    let mut stack: Vec<usize> = Vec::new();
    search(&perms, &mut stack, order, &mut boards);
    boards
}

/// Builds the Latin-square task: every valid board of the given order is one
/// mixture component with mean at the encoded board and covariance
/// `sigma^2 I`; weights uniform.
pub fn latin_square_mixture(order: usize, sigma: f64) -> Result<TaskDomain> {
    if !(2..=3).contains(&order) {
        return Err(Error::InvalidSpec(format!(
            "latin-square order {order} unsupported (expected 2 or 3)"
        )));
    }
    if sigma.is_nan() || sigma <= 0.0 {
        return Err(Error::InvalidSpec("sigma must be positive".into()));
    }
    let boards = enumerate_latin_squares(order);
    let n = order * order;
    let k = boards.len();
    let weights = vec![1.0 / k as f64; k];
    let means: Vec<DVector<f64>> = boards
        .iter()
        .map(|b| DVector::from_fn(n, |p, _| encode_digit(b[p], order)))
        .collect();
    let covariances = vec![DMatrix::identity(n, n) * (sigma * sigma); k];
    let mixture = GaussianMixture::new(weights, means, covariances)?;
    let mut task = TaskDomain::from_mixture(&format!("latin-square-{order}"), mixture, 1)?;
    task.board_order = Some(order);
    Ok(task)
}

/// Decodes a state's values to the nearest digit grid and checks the
/// Latin-square constraints (every row and column a permutation).
pub fn decode_board(state: &ReasoningState, order: usize) -> Result<(Vec<usize>, bool)> {
    if state.n() != order * order || state.dim() != 1 {
        return Err(Error::ShapeMismatch {
            context: "decode_board",
            expected: format!("{}x1", order * order),
            got: format!("{}x{}", state.n(), state.dim()),
        });
    }
    let digits: Vec<usize> = (0..order * order)
        .map(|p| nearest_digit(state.values()[(p, 0)], order))
        .collect();
    let valid = board_is_valid(&digits, order);
    Ok((digits, valid))
}

pub fn board_is_valid(digits: &[usize], order: usize) -> bool {
    for r in 0..order {
        let mut seen = vec![false; order];
        for c in 0..order {
            let d = digits[r * order + c];
            if d >= order || seen[d] {
                return false;
            }
            seen[d] = true;
        }
    }
    for c in 0..order {
        let mut seen = vec![false; order];
        for r in 0..order {
            let d = digits[r * order + c];
            if d >= order || seen[d] {
                return false;
            }
            seen[d] = true;
        }
    }
    true
}

/// Builds the stationary AR(1) sequence task: zero mean, covariance
/// `Cov(x_s, x_t) = phi^|s-t| / (1 - phi^2)`, chain dependency graph.
pub fn sequence_task(length: usize, phi: f64) -> Result<TaskDomain> {
    if length < 2 {
        return Err(Error::InvalidSpec("sequence length must be >= 2".into()));
    }
    if phi.is_nan() || phi.abs() >= 1.0 {
        return Err(Error::InvalidSpec(format!(
            "AR(1) coefficient {phi} must satisfy |phi| < 1"
        )));
    }
    let scale = 1.0 / (1.0 - phi * phi);
    let cov = DMatrix::from_fn(length, length, |s, t| {
        phi.powi((s as i64 - t as i64).unsigned_abs() as i32) * scale
    });
    let mixture = GaussianMixture::single(DVector::zeros(length), cov)?;
    let mut task = TaskDomain::from_mixture(&format!("ar1-{length}"), mixture, 1)?;
    task.graph = Some(DependencyGraph::new(
        length,
        (0..length - 1).map(|s| (s, s + 1)).collect(),
    )?);
    Ok(task)
}

/// Evaluation metrics. Validity applies only to board tasks; calibration
/// only when predictions with uncertainties are supplied.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Metrics {
    /// Max absolute deviation of the sample mean and covariance entries from
    /// the task mixture's analytic moments.
    pub moment_error: f64,
    /// Mean negative log density of the samples under the true mixture.
    pub nll: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validity_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub uncertainty_calibration: Option<f64>,
}

/// Spearman rank correlation with midpoint tie ranks.
fn spearman(a: &[f64], b: &[f64]) -> f64 {
    fn ranks(x: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..x.len()).collect();
        idx.sort_by(|&i, &j| x[i].partial_cmp(&x[j]).unwrap());
        let mut r = vec![0.0; x.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
                j += 1;
            }
            let rank = (i + j) as f64 / 2.0;
            for &p in &idx[i..=j] {
                r[p] = rank;
            }
            i = j + 1;
        }
        r
    }
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        cov += (ra[i] - ma) * (rb[i] - mb);
        va += (ra[i] - ma).powi(2);
        vb += (rb[i] - mb).powi(2);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Computes all metrics applicable to the task over a batch of final states.
/// When predictions are supplied, each prediction's uncertainty is rank-
/// correlated against the squared deviation of its clean-data estimate from
/// the matching final sample.
pub fn evaluate_samples(
    samples: &[ReasoningState],
    task: &TaskDomain,
    predictions: Option<&[Prediction]>,
) -> Result<Metrics> {
    if samples.len() < 2 {
        return Err(Error::InvalidSpec(
            "need at least 2 samples to evaluate".into(),
        ));
    }
    let d = task.mixture.dim();
    let flats: Vec<DVector<f64>> = samples.iter().map(|s| s.flat_values()).collect();
    let count = flats.len() as f64;

    let mut mean: DVector<f64> = DVector::zeros(d);
    for f in &flats {
        mean += f;
    }
    mean /= count;
    let mut cov: DMatrix<f64> = DMatrix::zeros(d, d);
    for f in &flats {
        let c = f - &mean;
        cov += &c * c.transpose();
    }
    cov /= count;

    let true_mean = task.mixture.mean();
    let true_cov = task.mixture.covariance();
    let mut moment_error: f64 = 0.0;
    for p in 0..d {
        moment_error = moment_error.max((mean[p] - true_mean[p]).abs());
        for q in 0..d {
            moment_error = moment_error.max((cov[(p, q)] - true_cov[(p, q)]).abs());
        }
    }

    let mut nll = 0.0;
    for f in &flats {
        nll -= task.mixture.log_density(f)?;
    }
    nll /= count;

    let validity_rate = match task.board_order {
        Some(order) => {
            let mut valid = 0usize;
            for s in samples {
                let (_, ok) = decode_board(s, order)?;
                valid += ok as usize;
            }
            Some(valid as f64 / count)
        }
        None => None,
    };

    let uncertainty_calibration = match predictions {
        Some(preds) if preds.len() == samples.len() => {
            let mut unc = Vec::new();
            let mut err = Vec::new();
            for (pred, sample) in preds.iter().zip(samples) {
                if let Some(var) = &pred.var {
                    for i in 0..sample.n() {
                        let mut e2 = 0.0;
                        for j in 0..sample.dim() {
                            e2 += (pred.x0_mean[(i, j)] - sample.values()[(i, j)]).powi(2);
                        }
                        unc.push(var[i]);
                        err.push(e2);
                    }
                }
            }
            (!unc.is_empty()).then(|| spearman(&unc, &err))
        }
        _ => None,
    };

    let metrics = Metrics {
        moment_error,
        nll,
        validity_rate,
        uncertainty_calibration,
    };
    if !metrics.moment_error.is_finite() || !metrics.nll.is_finite() {
        return Err(Error::NonFinite("metrics"));
    }
    Ok(metrics)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn order_two_has_two_squares() {
        let boards = enumerate_latin_squares(2);
        assert_eq!(boards.len(), 2);
        assert!(boards.contains(&vec![0, 1, 1, 0]));
        assert!(boards.contains(&vec![1, 0, 0, 1]));
    }

    #[test]
    fn order_three_has_twelve_squares() {
        // independent oracle: brute force over all 3^9 digit grids
        let mut count = 0;
        for code in 0..3usize.pow(9) {
            let mut digits = Vec::with_capacity(9);
            let mut c = code;
            for _ in 0..9 {
                digits.push(c % 3);
                c /= 3;
            }
            if board_is_valid(&digits, 3) {
                count += 1;
            }
        }
        assert_eq!(count, 12);
        assert_eq!(enumerate_latin_squares(3).len(), 12);
    }

    #[test]
    fn digit_encoding_order_three() {
        assert_eq!(encode_digit(0, 3), -1.0);
        assert_eq!(encode_digit(1, 3), 0.0);
        assert_eq!(encode_digit(2, 3), 1.0);
    }

    #[test]
    fn unsupported_order_rejected() {
        assert!(latin_square_mixture(4, 0.1).is_err());
        assert!(latin_square_mixture(2, 0.0).is_err());
    }

    #[test]
    fn decode_board_snaps_to_nearest_digit() {
        let mut values = DMatrix::zeros(9, 1);
        values[(0, 0)] = 0.9; // nearest encoding is +1 -> digit 2
        let state = ReasoningState::new(values, DVector::zeros(9), vec![false; 9]).unwrap();
        let (digits, _) = decode_board(&state, 3).unwrap();
        assert_eq!(digits[0], 2);
    }

    #[test]
    fn exact_boards_decode_valid_and_round_trip() {
        for order in [2usize, 3] {
            for board in enumerate_latin_squares(order) {
                let values =
                    DMatrix::from_fn(order * order, 1, |p, _| encode_digit(board[p], order));
                let state = ReasoningState::new(
                    values,
                    DVector::zeros(order * order),
                    vec![false; order * order],
                )
                .unwrap();
                let (digits, valid) = decode_board(&state, order).unwrap();
                assert_eq!(digits, board);
                assert!(valid);
            }
        }
    }

    #[test]
    fn repeated_digit_invalid() {
        assert!(!board_is_valid(&[0, 0, 1, 2, 1, 0, 1, 2, 0], 3));
    }

    #[test]
    fn sequence_phi_zero_is_white_noise() {
        let task = sequence_task(4, 0.0).unwrap();
        let cov = task.mixture.covariances()[0].clone();
        assert_eq!(cov, DMatrix::identity(4, 4));
    }

    #[test]
    fn sequence_diagonal_is_stationary_variance() {
        let phi = 0.7f64;
        let task = sequence_task(5, phi).unwrap();
        let cov = &task.mixture.covariances()[0];
        for s in 0..5 {
            assert!((cov[(s, s)] - 1.0 / (1.0 - phi * phi)).abs() < 1e-12);
        }
    }

    #[test]
    fn sequence_covariance_matches_simulated_recursion() {
        // brute-force oracle: simulate x_{t+1} = phi x_t + xi from the
        // stationary start and compare sample covariances
        let phi = 0.9f64;
        let length = 8;
        let task = sequence_task(length, phi).unwrap();
        let truth = &task.mixture.covariances()[0];
        let mut rng = ChaCha8Rng::seed_from_u64(100);
        let runs = 100_000;
        let mut cov = DMatrix::zeros(length, length);
        use rand_distr::{Distribution, StandardNormal};
        for _ in 0..runs {
            let mut x = vec![0.0f64; length];
            let z0: f64 = StandardNormal.sample(&mut rng);
            x[0] = z0 / (1.0 - phi * phi).sqrt();
            for t in 1..length {
                let z: f64 = StandardNormal.sample(&mut rng);
                x[t] = phi * x[t - 1] + z;
            }
            for s in 0..length {
                for t in 0..length {
                    cov[(s, t)] += x[s] * x[t];
                }
            }
        }
        cov /= runs as f64;
        for s in 0..length {
            for t in 0..length {
                assert!(
                    (cov[(s, t)] - truth[(s, t)]).abs() < 0.05,
                    "cov[{s},{t}] = {} vs {}",
                    cov[(s, t)],
                    truth[(s, t)]
                );
            }
        }
    }

    #[test]
    fn sequence_rejects_nonstationary_phi() {
        assert!(sequence_task(4, 1.0).is_err());
        assert!(sequence_task(1, 0.5).is_err());
    }

    #[test]
    fn all_valid_boards_rate_one() {
        let task = latin_square_mixture(3, 0.1).unwrap();
        let samples: Vec<ReasoningState> = enumerate_latin_squares(3)
            .into_iter()
            .map(|b| {
                let values = DMatrix::from_fn(9, 1, |p, _| encode_digit(b[p], 3));
                ReasoningState::new(values, DVector::zeros(9), vec![false; 9]).unwrap()
            })
            .collect();
        let m = evaluate_samples(&samples, &task, None).unwrap();
        assert_eq!(m.validity_rate, Some(1.0));
    }

    #[test]
    fn metrics_are_deterministic() {
        let task = sequence_task(3, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<ReasoningState> = (0..40)
            .map(|_| {
                let x0 = task.sample_x0(&mut rng);
                ReasoningState::new(x0, DVector::zeros(3), vec![false; 3]).unwrap()
            })
            .collect();
        let a = evaluate_samples(&samples, &task, None).unwrap();
        let b = evaluate_samples(&samples, &task, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn direct_mixture_samples_have_low_nll_gap() {
        // samples drawn straight from the mixture: their mean NLL estimates
        // the differential entropy; compare against an independent large run
        let task = sequence_task(3, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let samples: Vec<ReasoningState> = (0..2000)
            .map(|_| {
                let x0 = task.sample_x0(&mut rng);
                ReasoningState::new(x0, DVector::zeros(3), vec![false; 3]).unwrap()
            })
            .collect();
        let m = evaluate_samples(&samples, &task, None).unwrap();

        let mut rng2 = ChaCha8Rng::seed_from_u64(999);
        let big = 100_000;
        let mut entropy = 0.0;
        let mut sq = 0.0;
        for _ in 0..big {
            let x = task.mixture.sample(&mut rng2);
            let l = -task.mixture.log_density(&x).unwrap();
            entropy += l;
            sq += l * l;
        }
        entropy /= big as f64;
        let var = sq / big as f64 - entropy * entropy;
        let se = (var / samples.len() as f64).sqrt();
        assert!(
            (m.nll - entropy).abs() < 2.0 * se + 2.0 * (var / big as f64).sqrt(),
            "nll {} vs entropy {entropy}",
            m.nll
        );
    }

    #[test]
    fn spearman_detects_monotone_relation() {
        let a = vec![0.1, 0.4, 0.2, 0.9, 0.5];
        let b: Vec<f64> = a.iter().map(|x| x * x).collect();
        assert!((spearman(&a, &b) - 1.0).abs() < 1e-12);
        let c: Vec<f64> = a.iter().map(|x| -x).collect();
        assert!((spearman(&a, &c) + 1.0).abs() < 1e-12);
    }
}
