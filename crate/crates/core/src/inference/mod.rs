//! Optimization and sampling on top of a differentiable log-density.

mod ess;
mod hmc;
mod lbfgs;
mod univariate;

pub use ess::{effective_sample_size, EssEstimate};
pub use hmc::{hmc_sample, kinetic_energy, leapfrog, Clamp, DualAveraging, HmcChain, HmcConfig, LeapfrogState, MassMode};
pub use lbfgs::{
    bfgs_inverse_update, lbfgs_minimize, two_loop_direction, InitialScaling, LbfgsConfig, LbfgsResult, LbfgsTraceEntry,
    Termination,
};
pub use univariate::{univariate_baseline_sample, UnivariateChain, UnivariateConfig};

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// A log-density with gradient over an unconstrained real vector.
pub trait Target {
    fn dim(&self) -> usize;

    fn log_density(&mut self, x: &[f64]) -> Result<f64>;

    fn log_density_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Diagonal of the Hessian of the log-density.
    fn hessian_diagonal(&mut self, _x: &[f64]) -> Result<Vec<f64>> {
        Err(Error::InvalidArgument("target provides no Hessian diagonal".into()))
    }
}

/// Target assembled from closures, mostly for tests and synthetic targets.
pub struct FnTarget<F, H = fn(&[f64]) -> Vec<f64>> {
    dim: usize,
    density: F,
    hessian: Option<H>,
}

impl<F> FnTarget<F>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    pub fn new(dim: usize, density: F) -> Self {
        Self { dim, density, hessian: None }
    }
}

impl<F, H> FnTarget<F, H>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    H: FnMut(&[f64]) -> Vec<f64>,
{
    pub fn with_hessian(dim: usize, density: F, hessian: H) -> Self {
        Self { dim, density, hessian: Some(hessian) }
    }
}

impl<F, H> Target for FnTarget<F, H>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
    H: FnMut(&[f64]) -> Vec<f64>,
{
    fn dim(&self) -> usize {
        self.dim
    }

    fn log_density(&mut self, x: &[f64]) -> Result<f64> {
        Ok((self.density)(x).0)
    }

    fn log_density_and_gradient(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        Ok((self.density)(x))
    }

    fn hessian_diagonal(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        match self.hessian.as_mut() {
            Some(h) => Ok(h(x)),
            None => Err(Error::InvalidArgument("target provides no Hessian diagonal".into())),
        }
    }
}

/// Independent Gaussian with the given standard deviations, centered at zero.
pub fn diagonal_gaussian(scales: Vec<f64>) -> impl Target {
    let precision: Vec<f64> = scales.iter().map(|s| 1.0 / (s * s)).collect();
    let curvature = precision.clone();
    FnTarget::with_hessian(
        scales.len(),
        move |x: &[f64]| {
            let mut value = 0.0;
            let grad = x
                .iter()
                .zip(&precision)
                .map(|(xi, p)| {
                    value -= 0.5 * p * xi * xi;
                    -p * xi
                })
                .collect();
            (value, grad)
        },
        move |_x: &[f64]| curvature.iter().map(|p| -p).collect(),
    )
}

/// One row per retained iteration: state columns, the log density and, when
/// given, a 0/1 acceptance indicator. Floats use the shortest representation
/// that round-trips, so identical chains give identical bytes.
pub fn samples_csv(names: &[String], samples: &[Vec<f64>], log_densities: &[f64], accepted: Option<&[bool]>) -> String {
    let mut out = String::new();
    for name in names {
        out.push_str(name);
        out.push(',');
    }
    out.push_str("log_density");
    if accepted.is_some() {
        out.push_str(",accepted");
    }
    out.push('\n');
    for (k, (row, lp)) in samples.iter().zip(log_densities).enumerate() {
        for v in row {
            let _ = write!(out, "{v},");
        }
        let _ = write!(out, "{lp}");
        if let Some(acc) = accepted {
            let _ = write!(out, ",{}", u8::from(acc[k]));
        }
        out.push('\n');
    }
    out
}
