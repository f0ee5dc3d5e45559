use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::Target;
use crate::error::{Error, Result};

/// Energy error above which a trajectory is counted as divergent.
const DIVERGENCE_THRESHOLD: f64 = 1000.0;

#[derive(Debug, Clone, PartialEq)]
pub enum MassMode {
    Identity,
    /// Fixed diagonal mass supplied by the caller.
    Fixed(Vec<f64>),
    /// Running average of the negative Hessian diagonal, refreshed every
    /// `adaptation_interval` warm-up iterations.
    AdaptiveDiagonal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Clamp {
    /// Bounds as multiples of the median of the positive averaged entries.
    Relative { lower: f64, upper: f64 },
    Absolute { min: f64, max: f64 },
}

impl Default for Clamp {
    fn default() -> Self {
        Clamp::Relative { lower: 1e-2, upper: 1e2 }
    }
}

impl Clamp {
    fn validate(&self) -> Result<()> {
        let (lo, hi) = match *self {
            Clamp::Relative { lower, upper } => (lower, upper),
            Clamp::Absolute { min, max } => (min, max),
        };
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidArgument("mass clamps need 0 < min < max".into()));
        }
        Ok(())
    }

    /// Bounds `(m_min, m_max)` for the averaged diagonal `h`, or `None` if
    /// no entry is positive.
    pub fn bounds(&self, h: &[f64]) -> Option<(f64, f64)> {
        match *self {
            Clamp::Absolute { min, max } => Some((min, max)),
            Clamp::Relative { lower, upper } => {
                let mut positive: Vec<f64> = h.iter().copied().filter(|v| *v > 0.0 && v.is_finite()).collect();
                if positive.is_empty() {
                    return None;
                }
                positive.sort_by(|a, b| a.total_cmp(b));
                let k = positive.len();
                let median = if k % 2 == 1 {
                    positive[k / 2]
                } else {
                    0.5 * (positive[k / 2 - 1] + positive[k / 2])
                };
                Some((lower * median, upper * median))
            }
        }
    }

    pub fn apply(&self, h: &[f64]) -> Option<Vec<f64>> {
        let (lo, hi) = self.bounds(h)?;
        Some(
            h.iter()
                .map(|&v| if !(v >= lo) { lo } else if v > hi { hi } else { v })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HmcConfig {
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub mass: MassMode,
    pub adaptation_interval: usize,
    pub clamp: Clamp,
    pub target_acceptance: f64,
    /// Retained iterations after warm-up.
    pub iterations: usize,
    pub warmup: usize,
    /// Tune the step size by dual averaging during warm-up.
    pub adapt_step_size: bool,
    /// Each trajectory uses `step_size * (1 ± jitter)`, uniformly.
    pub step_jitter: f64,
    pub seed: u64,
    /// Stop the sampling phase once this much wall time has elapsed.
    pub max_seconds: Option<f64>,
}

impl HmcConfig {
    pub fn new(iterations: usize, seed: u64) -> Self {
        Self {
            step_size: 0.1,
            leapfrog_steps: 20,
            mass: MassMode::Identity,
            adaptation_interval: 10,
            clamp: Clamp::default(),
            target_acceptance: 0.8,
            iterations,
            warmup: iterations / 5,
            adapt_step_size: true,
            step_jitter: 0.2,
            seed,
            max_seconds: None,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(Error::InvalidArgument("step size must be positive".into()));
        }
        if self.leapfrog_steps == 0 {
            return Err(Error::InvalidArgument("need at least one leapfrog step".into()));
        }
        if self.adaptation_interval == 0 {
            return Err(Error::InvalidArgument("adaptation interval must be positive".into()));
        }
        if !(self.target_acceptance > 0.0 && self.target_acceptance < 1.0) {
            return Err(Error::InvalidArgument("target acceptance must lie in (0, 1)".into()));
        }
        if !(0.0..1.0).contains(&self.step_jitter) {
            return Err(Error::InvalidArgument("step jitter must lie in [0, 1)".into()));
        }
        self.clamp.validate()?;
        if let MassMode::Fixed(m) = &self.mass {
            if m.len() != dim || m.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::InvalidArgument("fixed mass must be positive with one entry per coordinate".into()));
            }
        }
        Ok(())
    }
}

/// Nesterov dual averaging of the log step size toward a target acceptance.
#[derive(Debug, Clone)]
pub struct DualAveraging {
    target: f64,
    mu: f64,
    gamma: f64,
    t0: f64,
    kappa: f64,
    count: f64,
    h_bar: f64,
    log_step: f64,
    log_step_bar: f64,
}

impl DualAveraging {
    pub fn new(initial_step: f64, target: f64) -> Self {
        Self {
            target,
            mu: (10.0 * initial_step).ln(),
            gamma: 0.05,
            t0: 10.0,
            kappa: 0.75,
            count: 0.0,
            h_bar: 0.0,
            log_step: initial_step.ln(),
            log_step_bar: 0.0,
        }
    }

    /// Feeds one acceptance probability and returns the next step size.
    pub fn update(&mut self, accept_prob: f64) -> f64 {
        self.count += 1.0;
        let m = self.count;
        let w = 1.0 / (m + self.t0);
        self.h_bar = (1.0 - w) * self.h_bar + w * (self.target - accept_prob);
        self.log_step = self.mu - m.sqrt() / self.gamma * self.h_bar;
        let eta = m.powf(-self.kappa);
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar;
        self.log_step.exp()
    }

    pub fn current(&self) -> f64 {
        self.log_step.exp()
    }

    /// Averaged step size to use after adaptation.
    pub fn final_step(&self) -> f64 {
        if self.count == 0.0 {
            self.current()
        } else {
            self.log_step_bar.exp()
        }
    }
}

/// End point of a leapfrog trajectory.
#[derive(Debug, Clone)]
pub struct LeapfrogState {
    pub x: Vec<f64>,
    pub p: Vec<f64>,
    pub log_density: f64,
    pub gradient: Vec<f64>,
}

/// Integrates `steps` leapfrog steps with diagonal inverse mass `inv_mass`.
/// `gradient` is the log-density gradient at `x`. Calls `density` exactly
/// `steps` times; returns `None` if it produces a non-finite value.
pub fn leapfrog<G>(
    mut density: G,
    x: &[f64],
    p: &[f64],
    gradient: &[f64],
    step: f64,
    steps: usize,
    inv_mass: &[f64],
) -> Result<Option<LeapfrogState>>
where
    G: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x.to_vec();
    let mut p = p.to_vec();
    let mut g = gradient.to_vec();
    let mut log_density = f64::NAN;
    for _ in 0..steps {
        for i in 0..x.len() {
            p[i] += 0.5 * step * g[i];
            x[i] += step * inv_mass[i] * p[i];
        }
        match density(&x) {
            Ok((value, grad)) if value.is_finite() && grad.iter().all(|v| v.is_finite()) => {
                log_density = value;
                g = grad;
            }
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::ZeroLikelihood { .. }) => return Ok(None),
            Err(e) => return Err(e),
        }
        for i in 0..x.len() {
            p[i] += 0.5 * step * g[i];
        }
    }
    Ok(Some(LeapfrogState { x, p, log_density, gradient: g }))
}

pub fn kinetic_energy(p: &[f64], inv_mass: &[f64]) -> f64 {
    0.5 * p.iter().zip(inv_mass).map(|(pi, w)| pi * pi * w).sum::<f64>()
}

#[derive(Debug, Clone)]
pub struct HmcChain {
    /// Retained states, one per post-warm-up iteration.
    pub samples: Vec<Vec<f64>>,
    pub log_densities: Vec<f64>,
    pub accepted: Vec<bool>,
    pub divergences: usize,
    pub warmup_divergences: usize,
    pub step_size: f64,
    pub mass: Vec<f64>,
    /// `(warm-up iteration, mass diagonal)` after each adaptive update.
    pub mass_history: Vec<(usize, Vec<f64>)>,
    pub gradient_evaluations: usize,
    pub warmup_seconds: f64,
    pub sampling_seconds: f64,
}

impl HmcChain {
    pub fn acceptance_rate(&self) -> f64 {
        if self.accepted.is_empty() {
            return 0.0;
        }
        self.accepted.iter().filter(|a| **a).count() as f64 / self.accepted.len() as f64
    }

    pub fn column(&self, i: usize) -> Vec<f64> {
        self.samples.iter().map(|s| s[i]).collect()
    }
}

struct Transition {
    accepted: bool,
    divergent: bool,
    accept_prob: f64,
}

/// Samples `target` with Hamiltonian Monte Carlo. The warm-up phase tunes
/// the step size and, in adaptive mode, the diagonal mass; both are frozen
/// for the retained iterations.
pub fn hmc_sample<T: Target + ?Sized>(target: &mut T, x0: &[f64], config: &HmcConfig) -> Result<HmcChain> {
    let dim = target.dim();
    if x0.len() != dim {
        return Err(Error::InvalidArgument(format!("initial state has length {}, target dimension {dim}", x0.len())));
    }
    config.validate(dim)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let (mut log_density, mut gradient) = target.log_density_and_gradient(x0)?;
    if !log_density.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("log density at the initial state".into()));
    }
    let mut evaluations = 1;
    let mut x = x0.to_vec();
    let mut mass = match &config.mass {
        MassMode::Fixed(m) => m.clone(),
        _ => vec![1.0; dim],
    };
    let mut inv_mass: Vec<f64> = mass.iter().map(|m| 1.0 / m).collect();
    let mut step = config.step_size;
    let mut averaging = DualAveraging::new(step, config.target_acceptance);
    let mut hessian_sum = vec![0.0; dim];
    let mut hessian_count = 0usize;
    let mut mass_history = Vec::new();
    let mut warmup_divergences = 0;

    let transition = |x: &mut Vec<f64>,
                          log_density: &mut f64,
                          gradient: &mut Vec<f64>,
                          mass: &[f64],
                          inv_mass: &[f64],
                          step: f64,
                          rng: &mut ChaCha8Rng,
                          target: &mut T,
                          evaluations: &mut usize|
     -> Result<Transition> {
        let p0: Vec<f64> = mass
            .iter()
            .map(|m| m.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let jitter = if config.step_jitter > 0.0 {
            1.0 + config.step_jitter * (2.0 * rng.random::<f64>() - 1.0)
        } else {
            1.0
        };
        let h0 = -*log_density + kinetic_energy(&p0, inv_mass);
        let end = leapfrog(
            |y: &[f64]| {
                *evaluations += 1;
                target.log_density_and_gradient(y)
            },
            x,
            &p0,
            gradient,
            step * jitter,
            config.leapfrog_steps,
            inv_mass,
        )?;
        let u: f64 = rng.random();
        let Some(end) = end else {
            return Ok(Transition { accepted: false, divergent: true, accept_prob: 0.0 });
        };
        let h1 = -end.log_density + kinetic_energy(&end.p, inv_mass);
        let delta = h0 - h1;
        if !delta.is_finite() || -delta > DIVERGENCE_THRESHOLD {
            return Ok(Transition { accepted: false, divergent: true, accept_prob: 0.0 });
        }
        let accept_prob = delta.exp().min(1.0);
        let accepted = u < accept_prob;
        if accepted {
            *x = end.x;
            *log_density = end.log_density;
            *gradient = end.gradient;
        }
        Ok(Transition { accepted, divergent: false, accept_prob })
    };

    let warmup_start = Instant::now();
    for s in 1..=config.warmup {
        let t = transition(
            &mut x,
            &mut log_density,
            &mut gradient,
            &mass,
            &inv_mass,
            step,
            &mut rng,
            target,
            &mut evaluations,
        )?;
        if t.divergent {
            warmup_divergences += 1;
        }
        if config.adapt_step_size {
            step = averaging.update(t.accept_prob);
        }
        if config.mass == MassMode::AdaptiveDiagonal && s % config.adaptation_interval == 0 {
            let h = target.hessian_diagonal(&x)?;
            hessian_count += 1;
            for (acc, hi) in hessian_sum.iter_mut().zip(&h) {
                *acc -= hi;
            }
            let average: Vec<f64> = hessian_sum.iter().map(|v| v / hessian_count as f64).collect();
            if let Some(updated) = config.clamp.apply(&average) {
                if mass_history.is_empty() && config.adapt_step_size {
                    // the scale of the dynamics changes abruptly at the first update
                    averaging = DualAveraging::new(step, config.target_acceptance);
                }
                mass = updated;
                inv_mass = mass.iter().map(|m| 1.0 / m).collect();
                mass_history.push((s, mass.clone()));
            }
        }
    }
    if config.adapt_step_size && config.warmup > 0 {
        step = averaging.final_step();
    }
    let warmup_seconds = warmup_start.elapsed().as_secs_f64();

    let sampling_start = Instant::now();
    let mut samples = Vec::with_capacity(config.iterations.min(1 << 16));
    let mut log_densities = Vec::with_capacity(config.iterations.min(1 << 16));
    let mut accepted = Vec::with_capacity(config.iterations.min(1 << 16));
    let mut divergences = 0;
    for _ in 0..config.iterations {
        if let Some(limit) = config.max_seconds {
            if sampling_start.elapsed().as_secs_f64() >= limit {
                break;
            }
        }
        let t = transition(
            &mut x,
            &mut log_density,
            &mut gradient,
            &mass,
            &inv_mass,
            step,
            &mut rng,
            target,
            &mut evaluations,
        )?;
        if t.divergent {
            divergences += 1;
        }
        samples.push(x.clone());
        log_densities.push(log_density);
        accepted.push(t.accepted);
    }
    let sampling_seconds = sampling_start.elapsed().as_secs_f64();

    Ok(HmcChain {
        samples,
        log_densities,
        accepted,
        divergences,
        warmup_divergences,
        step_size: step,
        mass,
        mass_history,
        gradient_evaluations: evaluations,
        warmup_seconds,
        sampling_seconds,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inference::{diagonal_gaussian, effective_sample_size};

    #[test]
    fn clamp_uses_median_and_floors_non_positive() {
        let c = Clamp::default();
        let m = c.apply(&[1.0, 2.0, 3.0, -5.0, 1e6]).unwrap();
        // median of positives is 2.5
        assert_eq!(m, vec![1.0, 2.0, 3.0, 0.025, 250.0]);
        assert!(c.apply(&[-1.0, 0.0]).is_none());
    }

    #[test]
    fn dual_averaging_moves_toward_target() {
        let mut da = DualAveraging::new(1.0, 0.8);
        for _ in 0..50 {
            da.update(0.2);
        }
        assert!(da.final_step() < 1.0);
        let mut da = DualAveraging::new(0.01, 0.8);
        for _ in 0..50 {
            da.update(1.0);
        }
        assert!(da.final_step() > 0.01);
    }

    #[test]
    fn standard_normal_identity_mass() {
        let mut target = diagonal_gaussian(vec![1.0; 10]);
        let mut cfg = HmcConfig::new(2000, 11);
        cfg.step_size = 0.1;
        cfg.leapfrog_steps = 10;
        cfg.warmup = 0;
        cfg.adapt_step_size = false;
        cfg.step_jitter = 0.0;
        let chain = hmc_sample(&mut target, &[0.5; 10], &cfg).unwrap();
        assert!(chain.acceptance_rate() >= 0.9, "{}", chain.acceptance_rate());
        assert_eq!(chain.gradient_evaluations, 1 + 2000 * 10);
        for i in 0..10 {
            let col = chain.column(i);
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            let ess = effective_sample_size(&col).unwrap().ess;
            assert!(mean.abs() < 3.0 / ess.sqrt(), "coord {i}: mean {mean}, ess {ess}");
        }
    }

    #[test]
    fn reproducible_under_seed() {
        let mut cfg = HmcConfig::new(200, 5);
        cfg.mass = MassMode::AdaptiveDiagonal;
        let a = hmc_sample(&mut diagonal_gaussian(vec![1.0, 5.0]), &[0.1, 0.2], &cfg).unwrap();
        let b = hmc_sample(&mut diagonal_gaussian(vec![1.0, 5.0]), &[0.1, 0.2], &cfg).unwrap();
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.mass_history, b.mass_history);
    }

    #[test]
    fn adaptive_mass_recovers_precision() {
        let mut cfg = HmcConfig::new(100, 3);
        cfg.mass = MassMode::AdaptiveDiagonal;
        let chain = hmc_sample(&mut diagonal_gaussian(vec![1.0, 3.0, 0.5]), &[0.0; 3], &cfg).unwrap();
        let m = &chain.mass;
        assert!((m[0] - 1.0).abs() < 1e-12 && (m[1] - 1.0 / 9.0).abs() < 1e-12 && (m[2] - 4.0).abs() < 1e-12);
        assert_eq!(chain.mass_history.len(), 2);
    }

    #[test]
    fn invalid_configs() {
        let mut t = diagonal_gaussian(vec![1.0]);
        let mut cfg = HmcConfig::new(10, 0);
        cfg.leapfrog_steps = 0;
        assert!(hmc_sample(&mut t, &[0.0], &cfg).is_err());
        let mut cfg = HmcConfig::new(10, 0);
        cfg.clamp = Clamp::Absolute { min: 2.0, max: 1.0 };
        assert!(hmc_sample(&mut t, &[0.0], &cfg).is_err());
        assert!(hmc_sample(&mut t, &[0.0, 1.0], &HmcConfig::new(10, 0)).is_err());
    }
}
