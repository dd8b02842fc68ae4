//! Hidden-state dynamics `x_{t+1} = a x_t + r_t` and private observations
//! `y_{i,t} = x_t + w_{i,t}`.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::simpson;

/// Distribution family shared by the innovation and observation noise. Every
/// family is scaled so the configured variances are matched exactly.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum NoiseFamily {
    #[default]
    Gaussian,
    /// Uniform on `[-sqrt(3 var), sqrt(3 var)]`.
    Uniform,
    /// Standard normal truncated to `[-truncation, truncation]`, rescaled to
    /// unit variance.
    TruncatedGaussian { truncation: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum InitialState {
    Point { value: f64 },
    Gaussian { variance: f64 },
}

impl Default for InitialState {
    fn default() -> Self {
        InitialState::Point { value: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Expected rate of change; may exceed 1 in magnitude.
    pub a: f64,
    pub sigma_r2: f64,
    pub sigma_w2: f64,
    #[serde(default)]
    pub x0: InitialState,
    #[serde(default)]
    pub noise: NoiseFamily,
}

impl ModelParams {
    pub fn gaussian(a: f64, sigma_r2: f64, sigma_w2: f64) -> Self {
        ModelParams {
            a,
            sigma_r2,
            sigma_w2,
            x0: InitialState::default(),
            noise: NoiseFamily::Gaussian,
        }
    }

    pub fn uniform(a: f64, sigma_r2: f64, sigma_w2: f64) -> Self {
        ModelParams {
            noise: NoiseFamily::Uniform,
            ..ModelParams::gaussian(a, sigma_r2, sigma_w2)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.a.is_finite() {
            return Err(Error::param("a", "must be finite"));
        }
        if !(self.sigma_r2 >= 0.0) || !self.sigma_r2.is_finite() {
            return Err(Error::param("sigma_r2", format!("{} must be >= 0", self.sigma_r2)));
        }
        if !(self.sigma_w2 >= 0.0) || !self.sigma_w2.is_finite() {
            return Err(Error::param("sigma_w2", format!("{} must be >= 0", self.sigma_w2)));
        }
        match self.x0 {
            InitialState::Point { value } if !value.is_finite() => {
                return Err(Error::param("x0", "initial state must be finite"))
            }
            InitialState::Gaussian { variance } if !(variance >= 0.0) || !variance.is_finite() => {
                return Err(Error::param("x0", "initial variance must be >= 0"))
            }
            _ => {}
        }
        if let NoiseFamily::TruncatedGaussian { truncation } = self.noise {
            if !(truncation > 0.0) || !truncation.is_finite() {
                return Err(Error::param("noise.truncation", "must be positive"));
            }
        }
        Ok(())
    }

    /// Almost-sure bound on `|r_t|`, or `None` for Gaussian noise.
    pub fn r_max(&self) -> Option<f64> {
        NoiseSampler::new(self.noise)
            .bound()
            .map(|b| b * self.sigma_r2.sqrt())
    }

    /// Almost-sure bound on `|w_{i,t}|`, or `None` for Gaussian noise.
    pub fn w_max(&self) -> Option<f64> {
        NoiseSampler::new(self.noise)
            .bound()
            .map(|b| b * self.sigma_w2.sqrt())
    }
}

/// Unit-variance sampler for a [`NoiseFamily`].
#[derive(Debug, Clone, Copy)]
pub struct NoiseSampler {
    family: NoiseFamily,
    // 1/sqrt(variance) of the truncated standard normal
    rescale: f64,
}

impl NoiseSampler {
    pub fn new(family: NoiseFamily) -> Self {
        let rescale = match family {
            NoiseFamily::TruncatedGaussian { truncation } => {
                1.0 / truncated_normal_variance(truncation).sqrt()
            }
            _ => 1.0,
        };
        NoiseSampler { family, rescale }
    }

    pub fn bound(&self) -> Option<f64> {
        match self.family {
            NoiseFamily::Gaussian => None,
            NoiseFamily::Uniform => Some(3.0_f64.sqrt()),
            NoiseFamily::TruncatedGaussian { truncation } => Some(truncation * self.rescale),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self.family {
            NoiseFamily::Gaussian => rng.sample(StandardNormal),
            NoiseFamily::Uniform => {
                let h = 3.0_f64.sqrt();
                rng.random_range(-h..=h)
            }
            NoiseFamily::TruncatedGaussian { truncation } => loop {
                let z: f64 = rng.sample(StandardNormal);
                if z.abs() <= truncation {
                    break z * self.rescale;
                }
            },
        }
    }
}

/// Variance of a standard normal conditioned on `|z| <= k`.
fn truncated_normal_variance(k: f64) -> f64 {
    let density = |z: f64| (-0.5 * z * z).exp();
    let mass = simpson(density, -k, k, 4096);
    let second = simpson(|z| z * z * density(z), -k, k, 4096);
    second / mass
}

/// Independent ChaCha stream for `(seed, stream)`; Monte Carlo trials use
/// their trial index as the stream so results do not depend on scheduling.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// One step of the state recursion.
pub fn step_state<R: Rng + ?Sized>(x: f64, params: &ModelParams, rng: &mut R) -> f64 {
    let r = NoiseSampler::new(params.noise).sample(rng) * params.sigma_r2.sqrt();
    params.a * x + r
}

/// Private observations of `x` by `n` agents.
pub fn observe<R: Rng + ?Sized>(x: f64, n: usize, params: &ModelParams, rng: &mut R) -> DVector<f64> {
    let sampler = NoiseSampler::new(params.noise);
    let sw = params.sigma_w2.sqrt();
    DVector::from_fn(n, |_, _| x + sampler.sample(rng) * sw)
}

/// Streaming generator of the hidden state and observations for one trial.
///
/// Draw order per period: the `n` observation noises at the current state,
/// then the innovation that moves the state forward.
#[derive(Debug, Clone)]
pub struct World {
    params: ModelParams,
    n: usize,
    x: f64,
    sampler: NoiseSampler,
    sigma_r: f64,
    sigma_w: f64,
    rng: ChaCha8Rng,
}

impl World {
    pub fn new(params: &ModelParams, n: usize, mut rng: ChaCha8Rng) -> Result<Self> {
        params.validate()?;
        let sampler = NoiseSampler::new(params.noise);
        let x = match params.x0 {
            InitialState::Point { value } => value,
            InitialState::Gaussian { variance } => {
                let z: f64 = rng.sample(StandardNormal);
                z * variance.sqrt()
            }
        };
        Ok(World {
            params: *params,
            n,
            x,
            sampler,
            sigma_r: params.sigma_r2.sqrt(),
            sigma_w: params.sigma_w2.sqrt(),
            rng,
        })
    }

    pub fn state(&self) -> f64 {
        self.x
    }

    pub fn observe(&mut self) -> DVector<f64> {
        let mut y = DVector::zeros(self.n);
        for v in y.iter_mut() {
            *v = self.x + self.sampler.sample(&mut self.rng) * self.sigma_w;
        }
        y
    }

    /// Draws `r_t` and moves to `x_{t+1}`; returns the new state.
    pub fn advance(&mut self) -> f64 {
        let r = self.sampler.sample(&mut self.rng) * self.sigma_r;
        self.x = self.params.a * self.x + r;
        self.x
    }
}

/// Materialized state and observation sequences for `t = 0..=horizon`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldTrace {
    pub x: Vec<f64>,
    /// `n x (horizon + 1)`; column `t` holds the observations at time `t`.
    pub y: DMatrix<f64>,
    pub rng_seed: u64,
}

pub fn generate_trace(params: &ModelParams, n: usize, horizon: usize, seed: u64) -> Result<WorldTrace> {
    let mut world = World::new(params, n, stream_rng(seed, 0))?;
    let mut x = Vec::with_capacity(horizon + 1);
    let mut y = DMatrix::zeros(n, horizon + 1);
    for t in 0..=horizon {
        x.push(world.state());
        y.set_column(t, &world.observe());
        if t < horizon {
            world.advance();
        }
    }
    Ok(WorldTrace { x, y, rng_seed: seed })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn moments(xs: &[f64]) -> (f64, f64) {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        (mean, var)
    }

    #[test]
    fn noiseless_steps() {
        let mut rng = stream_rng(1, 0);
        let p = ModelParams::gaussian(2.0, 0.0, 0.0);
        assert_eq!(step_state(5.0, &p, &mut rng), 10.0);
        let p0 = ModelParams::gaussian(0.0, 0.0, 0.0);
        assert_eq!(step_state(123.4, &p0, &mut rng), 0.0);
        let y = observe(3.5, 6, &p, &mut rng);
        assert!(y.iter().all(|v| *v == 3.5));
    }

    #[test]
    fn innovation_variance_matches() {
        for family in [
            NoiseFamily::Gaussian,
            NoiseFamily::Uniform,
            NoiseFamily::TruncatedGaussian { truncation: 2.0 },
        ] {
            let p = ModelParams {
                noise: family,
                ..ModelParams::gaussian(0.0, 1.0, 1.0)
            };
            let mut rng = stream_rng(42, 3);
            let draws: Vec<f64> = (0..1_000_000).map(|_| step_state(0.0, &p, &mut rng)).collect();
            let (mean, var) = moments(&draws);
            assert!(mean.abs() < 0.01, "{family:?}: mean {mean}");
            assert!((var - 1.0).abs() < 0.01, "{family:?}: var {var}");
        }
    }

    #[test]
    fn observation_noise_is_independent_and_uncorrelated() {
        let p = ModelParams::gaussian(1.0, 1.0, 1.0);
        let mut world = World::new(&p, 3, stream_rng(9, 0)).unwrap();
        let steps = 100_000;
        let (mut c01, mut c0r) = (0.0, 0.0);
        let (mut s0, mut s1, mut sr) = (0.0, 0.0, 0.0);
        for _ in 0..steps {
            let x = world.state();
            let y = world.observe();
            let next = world.advance();
            let r = next - x;
            let (w0, w1) = (y[0] - x, y[1] - x);
            c01 += w0 * w1;
            c0r += w0 * r;
            s0 += w0;
            s1 += w1;
            sr += r;
        }
        let n = steps as f64;
        let cov01 = c01 / n - (s0 / n) * (s1 / n);
        let cov0r = c0r / n - (s0 / n) * (sr / n);
        assert!(cov01.abs() < 0.01, "{cov01}");
        assert!(cov0r.abs() < 0.01, "{cov0r}");
    }

    #[test]
    fn bounded_families_respect_bounds() {
        for family in [NoiseFamily::Uniform, NoiseFamily::TruncatedGaussian { truncation: 2.5 }] {
            let p = ModelParams {
                noise: family,
                ..ModelParams::gaussian(1.0, 0.7, 2.0)
            };
            let r_max = p.r_max().unwrap();
            let w_max = p.w_max().unwrap();
            let mut world = World::new(&p, 4, stream_rng(5, 1)).unwrap();
            for _ in 0..50_000 {
                let x = world.state();
                let y = world.observe();
                assert!(y.iter().all(|v| (v - x).abs() <= w_max + 1e-12));
                let next = world.advance();
                assert!((next - x).abs() <= r_max + 1e-12);
            }
        }
        assert!(ModelParams::gaussian(1.0, 1.0, 1.0).r_max().is_none());
        let u = ModelParams::uniform(1.0, 1.0, 4.0);
        assert!((u.w_max().unwrap() - 12.0_f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn traces_are_reproducible() {
        let p = ModelParams::gaussian(1.01, 0.5, 2.0);
        let a = generate_trace(&p, 5, 200, 77).unwrap();
        let b = generate_trace(&p, 5, 200, 77).unwrap();
        assert_eq!(a, b);
        let c = generate_trace(&p, 5, 200, 78).unwrap();
        assert_ne!(a.x, c.x);
        // x_{t+1} = a x_t with sigma_r = 0
        let q = ModelParams::gaussian(1.5, 0.0, 1.0);
        let t = generate_trace(&q, 2, 10, 1).unwrap();
        assert!(t.x.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn validation() {
        assert!(ModelParams::gaussian(1.0, -1.0, 1.0).validate().is_err());
        assert!(ModelParams::gaussian(f64::NAN, 1.0, 1.0).validate().is_err());
        let bad = ModelParams {
            noise: NoiseFamily::TruncatedGaussian { truncation: 0.0 },
            ..ModelParams::gaussian(1.0, 1.0, 1.0)
        };
        assert!(bad.validate().is_err());
    }
}
