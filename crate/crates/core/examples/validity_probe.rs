use sre_core::oracle::OracleDenoiser;
use sre_core::paradigm::Paradigm;
use sre_core::sampler::{initial_state, mix_seed, run_inference, InferencePolicy, NoiseStreams, StepMethod};
use sre_core::schedule::{build_schedule, ScheduleKind, ScheduleSpec};
use sre_core::task::{decode_board, latin_square_mixture};

fn validity(policy: &InferencePolicy, paradigm: &Paradigm, method: &StepMethod, chains: usize, base: u64) -> f64 {
    let task = latin_square_mixture(3, 0.1).unwrap();
    let oracle = OracleDenoiser::new(task.mixture.clone(), paradigm.clone(), 1).unwrap();
    let mut valid = 0;
    for c in 0..chains {
        let seed = mix_seed(base, c as u64);
        let noise = NoiseStreams::new(seed);
        let initial = initial_state(9, 1, &[], &noise).unwrap();
        let out = run_inference(&oracle, &initial, policy, paradigm, method, seed, false).unwrap();
        let (_, ok) = decode_board(&out.state, 3).unwrap();
        valid += ok as usize;
    }
    valid as f64 / chains as f64
}

fn main() {
    let par = |d: usize| InferencePolicy::Schedule(
        build_schedule(&ScheduleSpec { kind: ScheduleKind::Parallel, steps: d }, 9, &[false; 9], None).unwrap());
    let adaptive = |d: usize| InferencePolicy::AdaptiveCertainty { select_k: 1, steps: d, graph: None };

    // heun, both arms
    for (name, paradigm) in [("cos", Paradigm::CosineFlow), ("rect", Paradigm::RectifiedFlow)] {
        let vp = validity(&par(36), &paradigm, &StepMethod::HeunFlow, 500, 1000);
        let vs = validity(&adaptive(36), &paradigm, &StepMethod::HeunFlow, 500, 2000);
        println!("heun {name}: parallel={vp:.3} adaptive={vs:.3}");
    }
    // sequential accuracy vs steps per cell
    for d in [36usize, 72, 144] {
        let vs = validity(&adaptive(d), &Paradigm::CosineFlow, &StepMethod::Ddim { eta: 0.0 }, 500, 3000);
        println!("adaptive ddim0 cos d={d}: {vs:.3}");
    }
    // does parallel EVER fail? big run
    let vp = validity(&par(36), &Paradigm::CosineFlow, &StepMethod::Ddim { eta: 0.0 }, 4000, 4000);
    println!("parallel ddim0 cos d=36, 4000 chains: {vp:.4}");
    // coarser parallel
    for d in [4usize, 6, 9, 12, 18] {
        let vp = validity(&par(d), &Paradigm::CosineFlow, &StepMethod::Ddim { eta: 0.0 }, 500, 5000);
        println!("parallel ddim0 cos d={d}: {vp:.3}");
    }
}
