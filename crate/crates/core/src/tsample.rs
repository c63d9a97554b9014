//! Training-time noise-level samplers over variable sets.
//!
//! Three strategies: independent per-variable draws, a shared-mean scheme
//! ("uniform t-bar": draw the mean level, then spread variables around it),
//! and one scalar copied to all variables. Each strategy draws its scalars
//! from a pluggable reweighter (uniform or logit-normal).

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// Scalar distribution on `[0, 1]` used wherever a strategy needs one draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScalarReweighter {
    Uniform,
    /// `sigmoid(location + scale * z)`, `z ~ N(0, 1)`.
    LogitNormal { location: f64, scale: f64 },
}

impl ScalarReweighter {
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            Self::Uniform => rng.random(),
            Self::LogitNormal { location, scale } => {
                let z: f64 = StandardNormal.sample(rng);
                let logit = location + scale * z;
                1.0 / (1.0 + (-logit).exp())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TSamplerKind {
    IndependentUniform,
    UniformTbar,
    SharedScalar,
}

/// A training noise-level sampler: strategy plus scalar reweighter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TSampler {
    kind: TSamplerKind,
    reweighter: ScalarReweighter,
}

impl TSampler {
    pub fn new(kind: TSamplerKind, reweighter: ScalarReweighter) -> Result<Self> {
        if let ScalarReweighter::LogitNormal { scale, .. } = reweighter {
            if scale.is_nan() || scale <= 0.0 {
                return Err(Error::InvalidSpec(
                    "logit-normal scale must be positive".into(),
                ));
            }
        }
        Ok(Self { kind, reweighter })
    }

    pub fn independent_uniform() -> Self {
        Self {
            kind: TSamplerKind::IndependentUniform,
            reweighter: ScalarReweighter::Uniform,
        }
    }

    pub fn kind(&self) -> TSamplerKind {
        self.kind
    }

    /// Draws one level per variable, all in `[0, 1]`.
    pub fn sample_levels<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> DVector<f64> {
        match self.kind {
            TSamplerKind::IndependentUniform => {
                DVector::from_fn(n, |_, _| self.reweighter.draw(rng).clamp(0.0, 1.0))
            }
            TSamplerKind::UniformTbar => {
                let tbar = self.reweighter.draw(rng);
                levels_given_tbar(tbar, n, rng)
            }
            TSamplerKind::SharedScalar => {
                let t = self.reweighter.draw(rng).clamp(0.0, 1.0);
                DVector::from_element(n, t)
            }
        }
    }
}

/// The uniform t-bar spread: given the mean level `tbar`, draws each variable
/// i.i.d. from `Uniform(max(0, 2 tbar - 1), min(1, 2 tbar))`, the symmetric
/// interval around `tbar` clipped to `[0, 1]`, so `E[t_i | tbar] = tbar`.
pub fn levels_given_tbar<R: Rng + ?Sized>(tbar: f64, n: usize, rng: &mut R) -> DVector<f64> {
    let tbar = tbar.clamp(0.0, 1.0);
    let lo = (2.0 * tbar - 1.0).max(0.0);
    let hi = (2.0 * tbar).min(1.0);
    DVector::from_fn(n, |_, _| {
        let u: f64 = rng.random();
        (lo + (hi - lo) * u).clamp(0.0, 1.0)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tbar_zero_gives_all_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let levels = levels_given_tbar(0.0, 8, &mut rng);
        assert!(levels.iter().all(|&t| t == 0.0));
    }

    #[test]
    fn tbar_one_gives_all_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let levels = levels_given_tbar(1.0, 8, &mut rng);
        assert!(levels.iter().all(|&t| t == 1.0));
    }

    #[test]
    fn logit_normal_tiny_scale_concentrates_at_half() {
        let rw = ScalarReweighter::LogitNormal {
            location: 0.0,
            scale: 1e-9,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            assert!((rw.draw(&mut rng) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn logit_normal_requires_positive_scale() {
        assert!(TSampler::new(
            TSamplerKind::IndependentUniform,
            ScalarReweighter::LogitNormal {
                location: 0.0,
                scale: 0.0
            }
        )
        .is_err());
    }

    #[test]
    fn independent_uniform_mean_and_ks_statistic() {
        let sampler = TSampler::independent_uniform();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n_draws = 100_000;
        let mut pooled = Vec::with_capacity(n_draws);
        while pooled.len() < n_draws {
            let lv = sampler.sample_levels(10, &mut rng);
            pooled.extend(lv.iter().cloned());
        }
        pooled.truncate(n_draws);
        let mean: f64 = pooled.iter().sum::<f64>() / n_draws as f64;
        assert!((mean - 0.5).abs() < 0.005, "mean {mean}");
        // Kolmogorov-Smirnov statistic against Uniform(0,1)
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ks = 0.0f64;
        for (i, &x) in pooled.iter().enumerate() {
            let ecdf_hi = (i + 1) as f64 / n_draws as f64;
            let ecdf_lo = i as f64 / n_draws as f64;
            ks = ks.max((ecdf_hi - x).abs()).max((x - ecdf_lo).abs());
        }
        assert!(ks < 0.01, "KS statistic {ks}");
    }

    #[test]
    fn all_strategies_stay_in_unit_interval() {
        let samplers = [
            TSampler::independent_uniform(),
            TSampler::new(TSamplerKind::UniformTbar, ScalarReweighter::Uniform).unwrap(),
            TSampler::new(
                TSamplerKind::SharedScalar,
                ScalarReweighter::LogitNormal {
                    location: 0.0,
                    scale: 3.0,
                },
            )
            .unwrap(),
            TSampler::new(
                TSamplerKind::IndependentUniform,
                ScalarReweighter::LogitNormal {
                    location: -2.0,
                    scale: 2.0,
                },
            )
            .unwrap(),
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        // million fuzzed draws split across strategies
        for sampler in &samplers {
            for _ in 0..25_000 {
                let lv = sampler.sample_levels(10, &mut rng);
                assert!(lv.iter().all(|&t| (0.0..=1.0).contains(&t)));
            }
        }
    }

    #[test]
    fn shared_scalar_entries_identical() {
        let sampler =
            TSampler::new(TSamplerKind::SharedScalar, ScalarReweighter::Uniform).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..100 {
            let lv = sampler.sample_levels(6, &mut rng);
            assert!(lv.iter().all(|&t| t == lv[0]));
        }
    }

    #[test]
    fn tbar_conditional_mean_matches_binned_tbar() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for &tbar in &[0.1, 0.3, 0.5, 0.7, 0.9] {
            let draws = 100_000;
            let mut sum = 0.0;
            for _ in 0..draws / 10 {
                let lv = levels_given_tbar(tbar, 10, &mut rng);
                sum += lv.sum();
            }
            let mean = sum / draws as f64;
            assert!((mean - tbar).abs() < 0.01, "tbar {tbar}: mean {mean}");
        }
    }
}
