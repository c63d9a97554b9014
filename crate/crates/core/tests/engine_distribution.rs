//! Distributional sanity of the sampling engine against the exact oracle.
//!
//! Moderate sample counts with correspondingly loose tolerances; the full
//! acceptance suite runs the large versions.

use nalgebra::{DMatrix, DVector};
use sre_core::oracle::{GaussianMixture, OracleDenoiser};
use sre_core::paradigm::Paradigm;
use sre_core::sampler::{
    initial_state, run_inference, InferencePolicy, NoiseStreams, StepMethod,
};
use sre_core::schedule::{build_schedule, ScheduleKind, ScheduleSpec};
use sre_core::state::ReasoningState;

fn correlated_gaussian(rho: f64) -> GaussianMixture {
    GaussianMixture::single(
        DVector::zeros(2),
        DMatrix::from_row_slice(2, 2, &[1.0, rho, rho, 1.0]),
    )
    .unwrap()
}

fn sample_moments(samples: &[ReasoningState]) -> (DVector<f64>, DMatrix<f64>) {
    let n = samples.len() as f64;
    let mut mean = DVector::zeros(2);
    for s in samples {
        mean += s.flat_values();
    }
    mean /= n;
    let mut cov = DMatrix::zeros(2, 2);
    for s in samples {
        let c = s.flat_values() - &mean;
        cov += &c * c.transpose();
    }
    cov /= n;
    (mean, cov)
}

fn run_chains(
    oracle: &OracleDenoiser,
    paradigm: &Paradigm,
    method: &StepMethod,
    steps: usize,
    chains: usize,
) -> Vec<ReasoningState> {
    let schedule = build_schedule(
        &ScheduleSpec {
            kind: ScheduleKind::Parallel,
            steps,
        },
        2,
        &[false, false],
        None,
    )
    .unwrap();
    let policy = InferencePolicy::Schedule(schedule);
    (0..chains)
        .map(|chain| {
            let seed = 1000 + chain as u64;
            let noise = NoiseStreams::new(seed);
            let initial = initial_state(2, 1, &[], &noise).unwrap();
            run_inference(oracle, &initial, &policy, paradigm, method, seed, false)
                .unwrap()
                .state
        })
        .collect()
}

#[test]
fn euler_flow_reproduces_correlated_gaussian_moments() {
    let gmm = correlated_gaussian(0.8);
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let samples = run_chains(&oracle, &paradigm, &StepMethod::EulerFlow, 128, 2000);
    let (mean, cov) = sample_moments(&samples);
    for i in 0..2 {
        assert!(mean[i].abs() < 0.1, "mean {mean}");
        for j in 0..2 {
            let expect = if i == j { 1.0 } else { 0.8 };
            assert!((cov[(i, j)] - expect).abs() < 0.1, "cov {cov}");
        }
    }
}

#[test]
fn ddim_jump_reproduces_correlated_gaussian_moments() {
    let gmm = correlated_gaussian(0.8);
    let paradigm = Paradigm::CosineFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let samples = run_chains(&oracle, &paradigm, &StepMethod::Ddim { eta: 0.0 }, 128, 2000);
    let (mean, cov) = sample_moments(&samples);
    for i in 0..2 {
        assert!(mean[i].abs() < 0.1, "mean {mean}");
        for j in 0..2 {
            let expect = if i == j { 1.0 } else { 0.8 };
            assert!((cov[(i, j)] - expect).abs() < 0.1, "cov {cov}");
        }
    }
}

#[test]
fn ancestral_grid_reproduces_correlated_gaussian_moments() {
    let gmm = correlated_gaussian(0.8);
    let paradigm = Paradigm::ddpm_discrete(200, sre_core::paradigm::BetaSchedule::Linear).unwrap();
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let samples = run_chains(
        &oracle,
        &paradigm,
        &StepMethod::DdpmAncestral {
            learned_variance: false,
        },
        200,
        2000,
    );
    let (mean, cov) = sample_moments(&samples);
    for i in 0..2 {
        assert!(mean[i].abs() < 0.1, "mean {mean}");
        for j in 0..2 {
            let expect = if i == j { 1.0 } else { 0.8 };
            assert!((cov[(i, j)] - expect).abs() < 0.1, "cov {cov}");
        }
    }
}

#[test]
fn clamped_variable_yields_analytic_conditional_mean() {
    // x ~ N(0, [[1, rho], [rho, 1]]), x0 clamped at v:
    // E[x1 | x0 = v] = rho * v
    let rho = 0.8;
    let v = 1.25;
    let gmm = correlated_gaussian(rho);
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let conditioned = [false, true];
    let schedule = build_schedule(
        &ScheduleSpec {
            kind: ScheduleKind::Sequential {
                order: sre_core::schedule::VariableOrder::index(2),
                overlap: 0.0,
            },
            steps: 32,
        },
        2,
        &[true, false],
        None,
    )
    .unwrap();
    let _ = conditioned;
    let policy = InferencePolicy::Schedule(schedule);
    let chains = 2000;
    let mut sum = 0.0;
    let mut sumsq = 0.0;
    for chain in 0..chains {
        let seed = 7000 + chain as u64;
        let noise = NoiseStreams::new(seed);
        let initial =
            initial_state(2, 1, &[(0, DVector::from_vec(vec![v]))], &noise).unwrap();
        let out = run_inference(
            &oracle,
            &initial,
            &policy,
            &paradigm,
            &StepMethod::Ddim { eta: 0.0 },
            seed,
            false,
        )
        .unwrap();
        assert_eq!(out.state.values()[(0, 0)], v, "clamp must never move");
        let x1 = out.state.values()[(1, 0)];
        sum += x1;
        sumsq += x1 * x1;
    }
    let mean = sum / chains as f64;
    let var = sumsq / chains as f64 - mean * mean;
    let se = (var / chains as f64).sqrt();
    let expect = rho * v;
    assert!(
        (mean - expect).abs() < 3.0 * se.max(1e-3),
        "conditional mean {mean} vs {expect} (se {se})"
    );
}

#[test]
fn ddim_and_euler_agree_in_the_many_step_limit() {
    // deterministic methods from identical initial noise: the mean absolute
    // output difference shrinks at least first-order as d doubles
    let gmm = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
        vec![
            DMatrix::identity(1, 1) * 0.25,
            DMatrix::identity(1, 1) * 0.25,
        ],
    )
    .unwrap();
    let paradigm = Paradigm::CosineFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let chains = 200;
    let mut diffs = Vec::new();
    for &steps in &[32usize, 64, 128, 256] {
        let schedule = build_schedule(
            &ScheduleSpec {
                kind: ScheduleKind::Parallel,
                steps,
            },
            1,
            &[false],
            None,
        )
        .unwrap();
        let policy = InferencePolicy::Schedule(schedule);
        let mut acc = 0.0;
        for chain in 0..chains {
            let seed = 3000 + chain as u64;
            let noise = NoiseStreams::new(seed);
            let initial = initial_state(1, 1, &[], &noise).unwrap();
            let a = run_inference(
                &oracle,
                &initial,
                &policy,
                &paradigm,
                &StepMethod::Ddim { eta: 0.0 },
                seed,
                false,
            )
            .unwrap()
            .state;
            let b = run_inference(
                &oracle,
                &initial,
                &policy,
                &paradigm,
                &StepMethod::EulerFlow,
                seed,
                false,
            )
            .unwrap()
            .state;
            acc += (a.values()[(0, 0)] - b.values()[(0, 0)]).abs();
        }
        diffs.push(acc / chains as f64);
    }
    for w in diffs.windows(2) {
        assert!(w[1] < w[0], "difference must shrink as d doubles: {diffs:?}");
    }
    // first-order rate; the finite-d estimator approaches 1 from below
    // (0.991 at this range), so the bound carries a small allowance
    let order = (diffs[0] / diffs[3]).log2() / 3.0;
    assert!(order >= 0.9, "observed order {order} from {diffs:?}");
}

#[test]
fn ddim_and_euler_coincide_exactly_for_rectified_flow() {
    // straight-line interpolation makes the Euler step and the
    // deterministic jump the same algebraic map
    let gmm = GaussianMixture::new(
        vec![0.5, 0.5],
        vec![DVector::from_vec(vec![-1.0]), DVector::from_vec(vec![1.0])],
        vec![
            DMatrix::identity(1, 1) * 0.25,
            DMatrix::identity(1, 1) * 0.25,
        ],
    )
    .unwrap();
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    let schedule = build_schedule(
        &ScheduleSpec {
            kind: ScheduleKind::Parallel,
            steps: 48,
        },
        1,
        &[false],
        None,
    )
    .unwrap();
    let policy = InferencePolicy::Schedule(schedule);
    for chain in 0..50 {
        let seed = 6000 + chain as u64;
        let noise = NoiseStreams::new(seed);
        let initial = initial_state(1, 1, &[], &noise).unwrap();
        let a = run_inference(
            &oracle,
            &initial,
            &policy,
            &paradigm,
            &StepMethod::Ddim { eta: 0.0 },
            seed,
            false,
        )
        .unwrap()
        .state;
        let b = run_inference(
            &oracle,
            &initial,
            &policy,
            &paradigm,
            &StepMethod::EulerFlow,
            seed,
            false,
        )
        .unwrap()
        .state;
        assert!((a.values()[(0, 0)] - b.values()[(0, 0)]).abs() < 1e-12);
    }
}

#[test]
fn heun_converges_faster_than_euler_on_smooth_field() {
    // single Gaussian: x0-hat is linear in x_t, the flow is smooth; Heun's
    // endpoint error at moderate d must beat Euler's
    let gmm = GaussianMixture::single(
        DVector::from_vec(vec![0.7]),
        DMatrix::from_element(1, 1, 0.64),
    )
    .unwrap();
    let paradigm = Paradigm::CosineFlow;
    let oracle = OracleDenoiser::new(gmm, paradigm.clone(), 1).unwrap();
    // reference: very fine Euler
    let reference = |seed: u64| {
        let schedule = build_schedule(
            &ScheduleSpec {
                kind: ScheduleKind::Parallel,
                steps: 8192,
            },
            1,
            &[false],
            None,
        )
        .unwrap();
        let noise = NoiseStreams::new(seed);
        let initial = initial_state(1, 1, &[], &noise).unwrap();
        run_inference(
            &oracle,
            &initial,
            &InferencePolicy::Schedule(schedule),
            &paradigm,
            &StepMethod::EulerFlow,
            seed,
            false,
        )
        .unwrap()
        .state
        .values()[(0, 0)]
    };
    let coarse = |seed: u64, method: &StepMethod| {
        let schedule = build_schedule(
            &ScheduleSpec {
                kind: ScheduleKind::Parallel,
                steps: 24,
            },
            1,
            &[false],
            None,
        )
        .unwrap();
        let noise = NoiseStreams::new(seed);
        let initial = initial_state(1, 1, &[], &noise).unwrap();
        run_inference(
            &oracle,
            &initial,
            &InferencePolicy::Schedule(schedule),
            &paradigm,
            method,
            seed,
            false,
        )
        .unwrap()
        .state
        .values()[(0, 0)]
    };
    let mut euler_err = 0.0;
    let mut heun_err = 0.0;
    for chain in 0..50 {
        let seed = 4000 + chain as u64;
        let exact = reference(seed);
        euler_err += (coarse(seed, &StepMethod::EulerFlow) - exact).abs();
        heun_err += (coarse(seed, &StepMethod::HeunFlow) - exact).abs();
    }
    assert!(
        heun_err < euler_err,
        "heun {heun_err} should beat euler {euler_err}"
    );
}

#[test]
fn rolling_window_schedule_runs_on_sequence_task() {
    let task = sre_core::task::sequence_task(8, 0.9).unwrap();
    let paradigm = Paradigm::RectifiedFlow;
    let oracle = OracleDenoiser::new(task.mixture.clone(), paradigm.clone(), 1).unwrap();
    let conditioned_mask: Vec<bool> = (0..8).map(|i| i < 2).collect();
    let schedule = build_schedule(
        &ScheduleSpec {
            kind: ScheduleKind::RollingWindow {
                window: 3,
                stride: 1,
            },
            steps: 32,
        },
        8,
        &conditioned_mask,
        None,
    )
    .unwrap();
    assert!(schedule.validate().is_none());
    let noise = NoiseStreams::new(5);
    let clamps: Vec<(usize, DVector<f64>)> = vec![
        (0, DVector::from_vec(vec![1.0])),
        (1, DVector::from_vec(vec![0.8])),
    ];
    let initial = initial_state(8, 1, &clamps, &noise).unwrap();
    let out = run_inference(
        &oracle,
        &initial,
        &InferencePolicy::Schedule(schedule),
        &paradigm,
        &StepMethod::Ddim { eta: 0.0 },
        5,
        false,
    )
    .unwrap();
    assert!(out.state.levels().iter().all(|&t| t == 0.0));
    assert_eq!(out.state.values()[(0, 0)], 1.0);
    assert_eq!(out.state.values()[(1, 0)], 0.8);
}
