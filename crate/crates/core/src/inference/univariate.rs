use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Target;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct UnivariateConfig {
    /// Retained sweeps; each sweep makes `dim` single-coordinate proposals.
    pub iterations: usize,
    pub warmup: usize,
    pub initial_scale: f64,
    pub target_acceptance: f64,
    pub seed: u64,
    pub max_seconds: Option<f64>,
}

impl UnivariateConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            iterations,
            warmup: iterations / 5,
            initial_scale: 1.0,
            target_acceptance: 0.44,
            seed,
            max_seconds: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct UnivariateChain {
    pub samples: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    /// Fraction of accepted single-coordinate proposals after warm-up.
    pub acceptance_rate: f64,
    pub scales: Vec<f64>,
    pub density_evaluations: usize,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
}

impl UnivariateChain {
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[i]).collect()
    }
}

/// Random-scan, one-coordinate Gaussian random-walk Metropolis with
/// per-coordinate scales adapted during warm-up.
pub fn univariate_baseline_sample<T: Target + ?Sized>(
    target: &mut T,
    x0: &[f64],
    config: &UnivariateConfig,
) -> Result<UnivariateChain> {
    let dim = target.dim();
    if x0.len() != dim || dim == 0 {
        return Err(Error::InvalidArgument(format!("initial state has length {}, target dimension {dim}", x0.len())));
    }
    if !(config.initial_scale > 0.0) {
        return Err(Error::InvalidArgument("proposal scale must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = x0.to_vec();
    let mut log_density = target.log_density(&x)?;
    if !log_density.is_finite() {
        return Err(Error::NonFinite("log density at the initial state".into()));
    }
    let mut evaluations = 1;
    let mut log_scales = vec![config.initial_scale.ln(); dim];
    let mut visits = vec![0usize; dim];

    let mut sweep = |x: &mut Vec<f64>,
                     log_density: &mut f64,
                     log_scales: &mut [f64],
                     adapt: bool,
                     rng: &mut ChaCha8Rng,
                     evaluations: &mut usize|
     -> Result<usize> {
        let mut accepted = 0;
        for _ in 0..dim {
            let i = rng.random_range(0..dim);
            let old = x[i];
            let z: f64 = rng.sample(StandardNormal);
            x[i] = old + log_scales[i].exp() * z;
            *evaluations += 1;
            let proposal = match target.log_density(x) {
                Ok(v) if v.is_finite() => v,
                Ok(_) | Err(Error::NonFinite(_)) | Err(Error::ZeroLikelihood { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e),
            };
            let u: f64 = rng.random();
            let accept_prob = (proposal - *log_density).exp().min(1.0);
            if u < accept_prob {
                *log_density = proposal;
                accepted += 1;
            } else {
                x[i] = old;
            }
            if adapt {
                visits[i] += 1;
                log_scales[i] += (accept_prob - config.target_acceptance) / (visits[i] as f64).powf(0.6);
            }
        }
        Ok(accepted)
    };

    let warmup_start = Instant::now();
    for _ in 0..config.warmup {
        sweep(&mut x, &mut log_density, &mut log_scales, true, &mut rng, &mut evaluations)?;
    }
    let warmup_seconds = warmup_start.elapsed().as_secs_f64();

    let sampling_start = Instant::now();
    let mut samples = Vec::with_capacity(config.iterations.min(1 << 16));
    let mut log_densities = Vec::with_capacity(config.iterations.min(1 << 16));
    let mut accepted = 0;
    for _ in 0..config.iterations {
        if let Some(limit) = config.max_seconds {
            if sampling_start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        accepted += sweep(&mut x, &mut log_density, &mut log_scales, false, &mut rng, &mut evaluations)?;
        samples.push(x.clone());
        log_densities.push(log_density);
    }
    let sampling_seconds = sampling_start.elapsed().as_secs_f64();
    let proposals = samples.len() * dim;
    Ok(UnivariateChain {
        acceptance_rate: if proposals == 0 { 0.0 } else { accepted as f64 / proposals as f64 },
        samples,
        log_densities,
        scales: log_scales.iter().map(|v| v.exp()).collect(),
        density_evaluations: evaluations,
        warmup_seconds,
        sampling_seconds,
    })
}
