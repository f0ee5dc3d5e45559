//! Random-effects relaxed clock.
//!
//! Branch `i` evolves at rate `r_i = mu * eps_i` for a duration
//! `t_i - t_pa(i)`, so its length is `b_i = mu * eps_i * (t_i - t_pa(i))`.
//! The random effects are i.i.d. lognormal with mean one and variance
//! `psi^2`. Sampling and optimization happen in the unconstrained space
//! `x = (log mu, log psi, log eps_1, ..., log eps_{2n-2})`, and the
//! likelihood part of every gradient entry comes from the engine's
//! branch-length gradient through `d/d log(.) = b_i * d/d b_i`.

use std::f64::consts::PI;

use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::inference::Target;
use crate::tree::Tree;

/// Index of `log mu` in the unconstrained layout.
pub const MU_INDEX: usize = 0;
/// Index of `log psi` in the unconstrained layout.
pub const PSI_INDEX: usize = 1;
/// Index of the first `log eps_i`.
pub const EPSILON_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ClockParameterization {
    pub mu: f64,
    pub psi: f64,
    pub epsilon: Vec<f64>,
}

impl ClockParameterization {
    pub fn new(mu: f64, psi: f64, epsilon: Vec<f64>) -> Result<Self> {
        if !(mu > 0.0) || !mu.is_finite() {
            return Err(Error::InvalidArgument(format!("mu must be positive, got {mu}")));
        }
        if !(psi >= 0.0) || !psi.is_finite() {
            return Err(Error::InvalidArgument(format!("psi must be nonnegative, got {psi}")));
        }
        if let Some(e) = epsilon.iter().find(|e| !(**e > 0.0) || !e.is_finite()) {
            return Err(Error::InvalidArgument(format!("random effects must be positive, got {e}")));
        }
        Ok(Self { mu, psi, epsilon })
    }

    /// All random effects at one.
    pub fn strict(mu: f64, psi: f64, branch_count: usize) -> Result<Self> {
        Self::new(mu, psi, vec![1.0; branch_count])
    }

    pub fn branch_rates(&self) -> Vec<f64> {
        self.epsilon.iter().map(|e| self.mu * e).collect()
    }

    pub fn branch_lengths(&self, durations: &[f64]) -> Vec<f64> {
        self.epsilon.iter().zip(durations).map(|(e, d)| self.mu * e * d).collect()
    }

    pub fn to_unconstrained(&self) -> Vec<f64> {
        let mut x = Vec::with_capacity(EPSILON_OFFSET + self.epsilon.len());
        x.push(self.mu.ln());
        x.push(self.psi.ln());
        x.extend(self.epsilon.iter().map(|e| e.ln()));
        x
    }

    pub fn from_unconstrained(x: &[f64]) -> Result<Self> {
        if x.len() < EPSILON_OFFSET {
            return Err(Error::InvalidArgument("unconstrained state too short".into()));
        }
        Self::new(x[MU_INDEX].exp(), x[PSI_INDEX].exp(), x[EPSILON_OFFSET..].iter().map(|v| v.exp()).collect())
    }
}

/// Location and scale of the lognormal with mean one and variance `psi^2`:
/// `scale^2 = ln(1 + psi^2)` and `location = -scale^2 / 2`.
pub fn lognormal_hyperparams(psi: f64) -> (f64, f64) {
    let variance = psi.mul_add(psi, 1.0).ln();
    (-variance / 2.0, variance.sqrt())
}

/// `b_i = mu * eps_i * (t_i - t_pa(i))` for every branch.
pub fn branch_lengths_from_clock(tree: &Tree, clock: &ClockParameterization) -> Result<Vec<f64>> {
    let durations = tree.branch_durations()?;
    if clock.epsilon.len() != durations.len() {
        return Err(Error::InvalidArgument(format!(
            "{} random effects for {} branches",
            clock.epsilon.len(),
            durations.len()
        )));
    }
    Ok(clock.branch_lengths(&durations))
}

/// Chain rule from branch lengths to internal node times:
/// `dlogL/dt_k = r_k g_k - sum_{c: pa(c) = k} r_c g_c`, with the first term
/// absent at the root. Returned in internal-node order (`n..2n-1`); tip
/// times are fixed. The engine must hold the branch lengths implied by
/// `rates` and the tree's node times.
pub fn node_time_gradient(engine: &mut Engine, rates: &[f64]) -> Result<Vec<f64>> {
    let report = engine.gradient(false)?;
    let tree = engine.tree();
    if rates.len() != tree.branch_count() {
        return Err(Error::InvalidArgument("one rate per branch required".into()));
    }
    let g = &report.branch_gradient;
    Ok((tree.tip_count()..tree.node_count())
        .map(|k| {
            let own = if k == tree.root() { 0.0 } else { rates[k] * g[k] };
            let [a, b] = tree.children(k).expect("internal node");
            own - rates[a] * g[a] - rates[b] * g[b]
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MuPrior {
    /// Improper uniform prior on `log mu`.
    FlatLog,
    /// Normal prior on `log mu`.
    LogNormal { location: f64, scale: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClockPriors {
    pub mu: MuPrior,
    /// Mean of the exponential prior on `psi`.
    pub psi_mean: f64,
    /// When false every prior term is dropped and only the likelihood
    /// remains.
    pub enabled: bool,
}

impl Default for ClockPriors {
    fn default() -> Self {
        Self { mu: MuPrior::FlatLog, psi_mean: 1.0 / 3.0, enabled: true }
    }
}

impl ClockPriors {
    pub fn flat() -> Self {
        Self { enabled: false, ..Self::default() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FreeParameters {
    pub mu: bool,
    pub psi: bool,
    pub epsilon: bool,
}

impl FreeParameters {
    pub const ALL: Self = Self { mu: true, psi: true, epsilon: true };
    pub const EPSILON_ONLY: Self = Self { mu: false, psi: false, epsilon: true };
}

/// Log-posterior over the clock parameters in unconstrained coordinates.
///
/// The full state always has the `(log mu, log psi, log eps..)` layout.
/// Through [`Target`] the posterior is exposed as a density over the free
/// coordinates only, with the rest held at an anchor state.
pub struct ClockPosterior {
    engine: Engine,
    durations: Vec<f64>,
    priors: ClockPriors,
    likelihood_enabled: bool,
    strict: bool,
    free: Vec<usize>,
    anchor: Vec<f64>,
    evaluations: u64,
}

/// Terms of the log-posterior, for reporting.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PosteriorTerms {
    pub log_likelihood: f64,
    pub epsilon_prior: f64,
    pub mu_prior: f64,
    pub psi_prior: f64,
}

impl PosteriorTerms {
    pub fn total(&self) -> f64 {
        self.log_likelihood + self.epsilon_prior + self.mu_prior + self.psi_prior
    }
}

impl ClockPosterior {
    /// The engine's tree must carry node times.
    pub fn new(engine: Engine, priors: ClockPriors, initial: &ClockParameterization) -> Result<Self> {
        let durations = engine.tree().branch_durations()?;
        if initial.epsilon.len() != durations.len() {
            return Err(Error::InvalidArgument(format!(
                "{} random effects for {} branches",
                initial.epsilon.len(),
                durations.len()
            )));
        }
        let anchor = if initial.psi > 0.0 {
            initial.to_unconstrained()
        } else {
            // psi = 0 is only reachable through the strict profile
            let mut x = initial.to_unconstrained();
            x[PSI_INDEX] = f64::NEG_INFINITY;
            x
        };
        let mut posterior = Self {
            engine,
            durations,
            priors,
            likelihood_enabled: true,
            strict: false,
            free: Vec::new(),
            anchor,
            evaluations: 0,
        };
        posterior.set_free(FreeParameters::ALL);
        Ok(posterior)
    }

    /// Strict-clock profile: every random effect frozen at one, `psi` and the
    /// random-effect prior dropped, only `log mu` free.
    pub fn strict_clock(engine: Engine, priors: ClockPriors, mu: f64) -> Result<Self> {
        let branches = engine.tree().branch_count();
        let mut posterior = Self::new(engine, priors, &ClockParameterization::strict(mu, 0.0, branches)?)?;
        posterior.strict = true;
        posterior.free = vec![MU_INDEX];
        Ok(posterior)
    }

    pub fn set_free(&mut self, free: FreeParameters) {
        let mut idx = Vec::new();
        if free.mu {
            idx.push(MU_INDEX);
        }
        if !self.strict {
            if free.psi {
                idx.push(PSI_INDEX);
            }
            if free.epsilon {
                idx.extend(EPSILON_OFFSET..self.anchor.len());
            }
        }
        self.free = idx;
    }

    pub fn set_likelihood_enabled(&mut self, enabled: bool) {
        self.likelihood_enabled = enabled;
    }

    pub fn free_indices(&self) -> &[usize] {
        &self.free
    }

    pub fn anchor(&self) -> &[f64] {
        &self.anchor
    }

    pub fn set_anchor(&mut self, x: Vec<f64>) -> Result<()> {
        if x.len() != self.anchor.len() {
            return Err(Error::InvalidArgument("anchor has the wrong length".into()));
        }
        self.anchor = x;
        Ok(())
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    pub fn engine_mut(&mut self) -> &mut Engine {
        &mut self.engine
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn is_strict(&self) -> bool {
        self.strict
    }

    /// Number of likelihood or gradient evaluations made so far.
    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    /// Expands free coordinates into a full unconstrained state.
    pub fn expand(&self, free_values: &[f64]) -> Vec<f64> {
        let mut x = self.anchor.clone();
        for (&i, &v) in self.free.iter().zip(free_values) {
            x[i] = v;
        }
        x
    }

    /// Free coordinates of a full state.
    pub fn restrict(&self, x: &[f64]) -> Vec<f64> {
        self.free.iter().map(|&i| x[i]).collect()
    }

    pub fn branch_lengths(&self, x: &[f64]) -> Vec<f64> {
        let mu = x[MU_INDEX].exp();
        if self.strict {
            return self.durations.iter().map(|d| mu * d).collect();
        }
        x[EPSILON_OFFSET..].iter().zip(&self.durations).map(|(e, d)| mu * e.exp() * d).collect()
    }

    fn finite_lengths(&self, x: &[f64]) -> Result<Vec<f64>> {
        let lengths = self.branch_lengths(x);
        if let Some(i) = lengths.iter().position(|b| !b.is_finite()) {
            return Err(Error::NonFinite(format!("length of branch {i}")));
        }
        Ok(lengths)
    }

    fn log_likelihood_at(&mut self, lengths: &[f64]) -> Result<f64> {
        if !self.likelihood_enabled {
            return Ok(0.0);
        }
        self.engine.set_branch_lengths(lengths)?;
        self.engine.log_likelihood()
    }

    /// Every term of the log-posterior at the full unconstrained state `x`.
    pub fn terms(&mut self, x: &[f64]) -> Result<PosteriorTerms> {
        self.check_len(x)?;
        self.evaluations += 1;
        let lengths = self.finite_lengths(x)?;
        let log_likelihood = self.log_likelihood_at(&lengths)?;
        let mut terms = PosteriorTerms { log_likelihood, ..Default::default() };
        if self.priors.enabled {
            terms.mu_prior = self.mu_prior(x[MU_INDEX]).0;
            if !self.strict {
                let psi = x[PSI_INDEX].exp();
                let (location, scale) = lognormal_hyperparams(psi);
                let v = scale * scale;
                terms.epsilon_prior = x[EPSILON_OFFSET..]
                    .iter()
                    .map(|&e| -0.5 * (2.0 * PI * v).ln() - (e - location).powi(2) / (2.0 * v))
                    .sum();
                let rate = 1.0 / self.priors.psi_mean;
                terms.psi_prior = rate.ln() - rate * psi + x[PSI_INDEX];
            }
        }
        let total = terms.total();
        if !total.is_finite() {
            return Err(Error::NonFinite(format!("log-posterior terms {terms:?}")));
        }
        Ok(terms)
    }

    /// Log-posterior density at the full unconstrained state, including the
    /// log-Jacobian of every log-transform.
    pub fn log_posterior(&mut self, x: &[f64]) -> Result<f64> {
        Ok(self.terms(x)?.total())
    }

    /// Value, first and second derivative of the `log mu` prior.
    fn mu_prior(&self, log_mu: f64) -> (f64, f64, f64) {
        match self.priors.mu {
            MuPrior::FlatLog => (0.0, 0.0, 0.0),
            MuPrior::LogNormal { location, scale } => {
                let z = (log_mu - location) / scale;
                (
                    -0.5 * (2.0 * PI).ln() - scale.ln() - 0.5 * z * z,
                    -z / scale,
                    -1.0 / (scale * scale),
                )
            }
        }
    }

    fn check_len(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.anchor.len() {
            return Err(Error::InvalidArgument(format!(
                "state has {} entries, expected {}",
                x.len(),
                self.anchor.len()
            )));
        }
        Ok(())
    }

    /// Log-posterior and its gradient over the full unconstrained state,
    /// plus the branch-length gradient of the likelihood it was built from.
    pub fn gradient_full(&mut self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (value, grad, _) = self.derivatives(x, false)?;
        Ok((value, grad))
    }

    /// Diagonal of the Hessian of the log-posterior over the full state.
    ///
    /// Random-effect entries combine the engine's branch Hessian diagonal
    /// with the prior curvature; `log mu` and `log psi` entries carry the
    /// prior curvature only.
    pub fn hessian_diagonal_full(&mut self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.derivatives(x, true)?.2.expect("requested"))
    }

    fn derivatives(&mut self, x: &[f64], with_hessian: bool) -> Result<(f64, Vec<f64>, Option<Vec<f64>>)> {
        self.check_len(x)?;
        self.evaluations += 1;
        let dim = x.len();
        let lengths = self.finite_lengths(x)?;
        let mut grad = vec![0.0; dim];
        let mut hess = with_hessian.then(|| vec![0.0; dim]);
        let mut value = 0.0;

        if self.likelihood_enabled {
            self.engine.set_branch_lengths(&lengths)?;
            let report = self.engine.gradient(with_hessian)?;
            value += report.log_likelihood;
            let mut mu_total = 0.0;
            for (i, (&b, &g)) in lengths.iter().zip(&report.branch_gradient).enumerate() {
                let d = b * g;
                mu_total += d;
                if !self.strict {
                    grad[EPSILON_OFFSET + i] = d;
                    if let (Some(h), Some(hd)) = (hess.as_mut(), report.hessian_diagonal.as_ref()) {
                        h[EPSILON_OFFSET + i] = b * b * hd[i] + d;
                    }
                }
            }
            grad[MU_INDEX] = mu_total;
        }

        if self.priors.enabled {
            let (mu_value, mu_grad, mu_curv) = self.mu_prior(x[MU_INDEX]);
            value += mu_value;
            grad[MU_INDEX] += mu_grad;
            if let Some(h) = hess.as_mut() {
                h[MU_INDEX] += mu_curv;
            }
            if !self.strict {
                let psi = x[PSI_INDEX].exp();
                let (location, scale) = lognormal_hyperparams(psi);
                let v = scale * scale;
                // dv/dlog(psi) and d^2v/dlog(psi)^2
                let dv = 2.0 * psi * psi / (1.0 + psi * psi);
                let d2v = 4.0 * psi * psi / (1.0 + psi * psi).powi(2);
                let mut dfdv = 0.0;
                let mut d2fdv2 = 0.0;
                for (k, &e) in x[EPSILON_OFFSET..].iter().enumerate() {
                    value += -0.5 * (2.0 * PI * v).ln() - (e - location).powi(2) / (2.0 * v);
                    grad[EPSILON_OFFSET + k] += -(e - location) / v;
                    if let Some(h) = hess.as_mut() {
                        h[EPSILON_OFFSET + k] -= 1.0 / v;
                    }
                    dfdv += -0.5 / v - 0.125 + e * e / (2.0 * v * v);
                    d2fdv2 += 0.5 / (v * v) - e * e / (v * v * v);
                }
                let rate = 1.0 / self.priors.psi_mean;
                value += rate.ln() - rate * psi + x[PSI_INDEX];
                grad[PSI_INDEX] = dfdv * dv - rate * psi + 1.0;
                if let Some(h) = hess.as_mut() {
                    h[PSI_INDEX] = d2fdv2 * dv * dv + dfdv * d2v - rate * psi;
                }
            }
        }
        if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite("log-posterior or its gradient".into()));
        }
        Ok((value, grad, hess))
    }
}

impl Target for ClockPosterior {
    fn dim(&self) -> usize {
        self.free.len()
    }

    fn log_density(&mut self, free_values: &[f64]) -> Result<f64> {
        let x = self.expand(free_values);
        self.log_posterior(&x)
    }

    fn log_density_and_gradient(&mut self, free_values: &[f64]) -> Result<(f64, Vec<f64>)> {
        let x = self.expand(free_values);
        let (value, grad) = self.gradient_full(&x)?;
        Ok((value, self.restrict(&grad)))
    }

    fn hessian_diagonal(&mut self, free_values: &[f64]) -> Result<Vec<f64>> {
        let x = self.expand(free_values);
        let h = self.hessian_diagonal_full(&x)?;
        Ok(self.restrict(&h))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hyperparams() {
        assert_eq!(lognormal_hyperparams(0.0), (0.0, 0.0));
        let (loc, scale) = lognormal_hyperparams((std::f64::consts::E - 1.0).sqrt());
        assert!((scale * scale - 1.0).abs() < 1e-15);
        assert!((loc + 0.5).abs() < 1e-15);
        for psi in [0.1, 0.5, 2.0] {
            let (loc, scale) = lognormal_hyperparams(psi);
            let mean = (loc + scale * scale / 2.0).exp();
            let var = ((scale * scale).exp() - 1.0) * (2.0 * loc + scale * scale).exp();
            assert!((mean - 1.0).abs() < 1e-14);
            assert!((var - psi * psi).abs() < 1e-13);
        }
    }

    #[test]
    fn transform_round_trip() {
        let c = ClockParameterization::new(5.67e-4, 0.8, vec![0.3, 1.7, 2.2]).unwrap();
        let back = ClockParameterization::from_unconstrained(&c.to_unconstrained()).unwrap();
        assert!((back.mu - c.mu).abs() <= 1e-14 * c.mu);
        assert!((back.psi - c.psi).abs() <= 1e-14);
        for (a, b) in back.epsilon.iter().zip(&c.epsilon) {
            assert!((a - b).abs() <= 1e-14 * b);
        }
        assert!(ClockParameterization::new(-1.0, 0.1, vec![]).is_err());
        assert!(ClockParameterization::new(1.0, 0.1, vec![0.0]).is_err());
    }

    #[test]
    fn strict_clock_lengths() {
        let mut tree = crate::tree::parse_newick("((A:10,B:10):5,C:15);").unwrap();
        assert!(branch_lengths_from_clock(&tree, &ClockParameterization::strict(1.0, 0.0, 4).unwrap()).is_err());
        tree.node_times_from_branch_lengths().unwrap();
        let strict = ClockParameterization::strict(1.0, 0.0, 4).unwrap();
        assert_eq!(branch_lengths_from_clock(&tree, &strict).unwrap(), [10.0, 10.0, 15.0, 5.0]);
        let doubled = ClockParameterization::strict(2.0, 0.0, 4).unwrap();
        assert_eq!(branch_lengths_from_clock(&tree, &doubled).unwrap(), [20.0, 20.0, 30.0, 10.0]);
        let slow = ClockParameterization::strict(5.67e-4, 0.0, 4).unwrap();
        assert!((branch_lengths_from_clock(&tree, &slow).unwrap()[0] - 5.67e-3).abs() < 1e-15);
    }
}
