use std::collections::VecDeque;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitialScaling {
    /// `H_init = (s'y / y'y) I` from the most recent pair.
    CurvatureRatio,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsConfig {
    pub memory: usize,
    pub max_iterations: usize,
    /// Stop when the largest absolute gradient entry falls below this.
    pub gradient_tolerance: f64,
    /// Sufficient-decrease constant of the strong Wolfe conditions.
    pub c1: f64,
    /// Curvature constant of the strong Wolfe conditions.
    pub c2: f64,
    pub max_line_search_evaluations: usize,
    pub initial_scaling: InitialScaling,
}

impl Default for LbfgsConfig {
    fn default() -> Self {
        Self {
            memory: 10,
            max_iterations: 1000,
            gradient_tolerance: 1e-6,
            c1: 1e-4,
            c2: 0.9,
            max_line_search_evaluations: 40,
            initial_scaling: InitialScaling::CurvatureRatio,
        }
    }
}

impl LbfgsConfig {
    fn validate(&self) -> Result<()> {
        if self.memory == 0 {
            return Err(Error::InvalidArgument("L-BFGS memory must be at least 1".into()));
        }
        if !(self.gradient_tolerance > 0.0) {
            return Err(Error::InvalidArgument("gradient tolerance must be positive".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2 && self.c2 < 1.0) {
            return Err(Error::InvalidArgument("need 0 < c1 < c2 < 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Termination {
    Converged,
    MaxIterations,
    LineSearchFailed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsTraceEntry {
    pub iteration: usize,
    pub value: f64,
    pub gradient_inf_norm: f64,
    pub step_length: f64,
    pub evaluations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LbfgsResult {
    pub x: Vec<f64>,
    pub value: f64,
    pub gradient: Vec<f64>,
    pub iterations: usize,
    pub evaluations: usize,
    pub termination: Termination,
    pub trace: Vec<LbfgsTraceEntry>,
}

impl LbfgsResult {
    pub fn gradient_inf_norm(&self) -> f64 {
        inf_norm(&self.gradient)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn inf_norm(a: &[f64]) -> f64 {
    a.iter().fold(0.0, |m, x| m.max(x.abs()))
}

/// `-H g` where `H` is the L-BFGS inverse-Hessian approximation built from
/// the `(s, y)` pairs in `history` (oldest first) on top of `gamma * I`.
pub fn two_loop_direction(gradient: &[f64], history: &[(Vec<f64>, Vec<f64>)], gamma: f64) -> Vec<f64> {
    let mut q = gradient.to_vec();
    let mut alphas = vec![0.0; history.len()];
    for (k, (s, y)) in history.iter().enumerate().rev() {
        let rho = 1.0 / dot(y, s);
        alphas[k] = rho * dot(s, &q);
        for (qi, yi) in q.iter_mut().zip(y) {
            *qi -= alphas[k] * yi;
        }
    }
    for qi in q.iter_mut() {
        *qi *= gamma;
    }
    for (k, (s, y)) in history.iter().enumerate() {
        let rho = 1.0 / dot(y, s);
        let beta = rho * dot(y, &q);
        for (qi, si) in q.iter_mut().zip(s) {
            *qi += (alphas[k] - beta) * si;
        }
    }
    q.iter().map(|v| -v).collect()
}

/// Explicit BFGS inverse-Hessian update
/// `H+ = (I - rho s y') H (I - rho y s') + rho s s'` with `rho = 1 / y's`.
pub fn bfgs_inverse_update(h: &DMatrix<f64>, s: &[f64], y: &[f64]) -> DMatrix<f64> {
    let n = s.len();
    let s = DVector::from_column_slice(s);
    let y = DVector::from_column_slice(y);
    let rho = 1.0 / y.dot(&s);
    let left = DMatrix::identity(n, n) - &s * y.transpose() * rho;
    let right = DMatrix::identity(n, n) - &y * s.transpose() * rho;
    left * h * right + &s * s.transpose() * rho
}

struct Point {
    alpha: f64,
    value: f64,
    slope: f64,
    x: Vec<f64>,
    gradient: Vec<f64>,
}

/// Minimizer of the cubic interpolating values and slopes at `a` and `b`,
/// falling back to bisection when it is undefined.
fn cubic_minimizer(a: &Point, b: &Point) -> f64 {
    let d1 = a.slope + b.slope - 3.0 * (a.value - b.value) / (a.alpha - b.alpha);
    let disc = d1 * d1 - a.slope * b.slope;
    if !disc.is_finite() || disc < 0.0 || !b.value.is_finite() {
        return 0.5 * (a.alpha + b.alpha);
    }
    let d2 = (b.alpha - a.alpha).signum() * disc.sqrt();
    let t = b.alpha - (b.alpha - a.alpha) * (b.slope + d2 - d1) / (b.slope - a.slope + 2.0 * d2);
    if t.is_finite() {
        t
    } else {
        0.5 * (a.alpha + b.alpha)
    }
}

struct LineSearch<'a, F> {
    objective: &'a mut F,
    x: &'a [f64],
    direction: &'a [f64],
    f0: f64,
    slope0: f64,
    c1: f64,
    c2: f64,
    /// Rounding noise in the objective; differences below it are not
    /// trusted.
    noise: f64,
    evaluations: usize,
    budget: usize,
}

impl<F> LineSearch<'_, F>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    fn evaluate(&mut self, alpha: f64) -> Result<Point> {
        self.evaluations += 1;
        let x: Vec<f64> = self.x.iter().zip(self.direction).map(|(xi, di)| xi + alpha * di).collect();
        match (self.objective)(&x) {
            Ok((value, gradient)) if value.is_finite() && gradient.iter().all(|g| g.is_finite()) => {
                let slope = dot(&gradient, self.direction);
                Ok(Point { alpha, value, slope, x, gradient })
            }
            // treat failures off the current iterate as an infinite wall
            Ok(_) | Err(Error::NonFinite(_)) | Err(Error::ZeroLikelihood { .. }) => Ok(Point {
                alpha,
                value: f64::INFINITY,
                slope: f64::NAN,
                x,
                gradient: vec![f64::NAN; self.x.len()],
            }),
            Err(e) => Err(e),
        }
    }

    /// Armijo test, or, once value differences drown in rounding noise, the
    /// slope form `phi'(alpha) <= (2 c1 - 1) phi'(0)`.
    fn sufficient_decrease(&self, p: &Point) -> bool {
        p.value <= self.f0 + self.c1 * p.alpha * self.slope0
            || (p.value <= self.f0 + self.noise && p.slope <= (2.0 * self.c1 - 1.0) * self.slope0)
    }

    fn worse(&self, p: &Point, than: &Point) -> bool {
        !(p.value <= than.value + self.noise)
    }

    fn curvature(&self, p: &Point) -> bool {
        p.slope.abs() <= -self.c2 * self.slope0
    }

    fn search(&mut self, initial: f64) -> Result<std::result::Result<Point, String>> {
        let mut prev = Point {
            alpha: 0.0,
            value: self.f0,
            slope: self.slope0,
            x: self.x.to_vec(),
            gradient: vec![],
        };
        let mut alpha = initial;
        let mut first = true;
        while self.evaluations < self.budget {
            let p = self.evaluate(alpha)?;
            if !self.sufficient_decrease(&p) || (!first && self.worse(&p, &prev)) {
                return self.zoom(prev, p);
            }
            if self.curvature(&p) {
                return Ok(Ok(p));
            }
            if p.slope >= 0.0 {
                return self.zoom(p, prev);
            }
            first = false;
            alpha = 2.0 * p.alpha;
            prev = p;
        }
        Ok(Err("no step satisfying the Wolfe conditions within the evaluation budget".into()))
    }

    fn zoom(&mut self, mut lo: Point, mut hi: Point) -> Result<std::result::Result<Point, String>> {
        while self.evaluations < self.budget {
            let (a, b) = (lo.alpha.min(hi.alpha), lo.alpha.max(hi.alpha));
            let width = b - a;
            if width <= f64::EPSILON * b.max(1e-300) {
                break;
            }
            let guess = if hi.value.is_finite() { cubic_minimizer(&lo, &hi) } else { 0.5 * (a + b) };
            let alpha = guess.clamp(a + 0.1 * width, b - 0.1 * width);
            let p = self.evaluate(alpha)?;
            if !self.sufficient_decrease(&p) || self.worse(&p, &lo) {
                hi = p;
            } else {
                if self.curvature(&p) {
                    return Ok(Ok(p));
                }
                if p.slope * (hi.alpha - lo.alpha) >= 0.0 {
                    hi = lo;
                }
                lo = p;
            }
        }
        if lo.alpha > 0.0 && lo.value < self.f0 {
            // sufficient decrease holds at `lo`; curvature may not
            return Ok(Ok(lo));
        }
        Ok(Err("line search interval collapsed without progress".into()))
    }
}

/// Minimizes `objective` (value and gradient) with limited-memory BFGS and a
/// strong Wolfe line search using cubic interpolation.
pub fn lbfgs_minimize<F>(mut objective: F, x0: &[f64], config: &LbfgsConfig) -> Result<LbfgsResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    config.validate()?;
    let start = Instant::now();
    let (mut value, mut gradient) = objective(x0)?;
    if !value.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("objective at the initial point".into()));
    }
    let mut x = x0.to_vec();
    let mut evaluations = 1;
    let mut history: VecDeque<(Vec<f64>, Vec<f64>)> = VecDeque::with_capacity(config.memory);
    let mut trace = vec![LbfgsTraceEntry {
        iteration: 0,
        value,
        gradient_inf_norm: inf_norm(&gradient),
        step_length: 0.0,
        evaluations,
        seconds: 0.0,
    }];
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    while iterations < config.max_iterations {
        if inf_norm(&gradient) < config.gradient_tolerance {
            termination = Termination::Converged;
            break;
        }
        let gamma = match (config.initial_scaling, history.back()) {
            (InitialScaling::CurvatureRatio, Some((s, y))) => dot(s, y) / dot(y, y),
            _ => 1.0,
        };
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = history.iter().cloned().collect();
        let mut direction = two_loop_direction(&gradient, &pairs, gamma);
        let mut slope = dot(&gradient, &direction);
        if !(slope < 0.0) {
            // lost descent; restart from steepest descent
            history.clear();
            direction = gradient.iter().map(|g| -g).collect();
            slope = dot(&gradient, &direction);
        }
        let initial_step = if history.is_empty() {
            (1.0 / inf_norm(&gradient)).min(1.0)
        } else {
            1.0
        };
        let mut search = LineSearch {
            objective: &mut objective,
            x: &x,
            direction: &direction,
            f0: value,
            slope0: slope,
            c1: config.c1,
            c2: config.c2,
            noise: 1e-13 * (1.0 + value.abs()),
            evaluations: 0,
            budget: config.max_line_search_evaluations,
        };
        let outcome = search.search(initial_step)?;
        evaluations += search.evaluations;
        let point = match outcome {
            Ok(p) => p,
            Err(message) => {
                termination = Termination::LineSearchFailed(message);
                break;
            }
        };
        iterations += 1;
        let s: Vec<f64> = point.x.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = point.gradient.iter().zip(&gradient).map(|(a, b)| a - b).collect();
        if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
            if history.len() == config.memory {
                history.pop_front();
            }
            history.push_back((s, y));
        }
        x = point.x;
        value = point.value;
        gradient = point.gradient;
        trace.push(LbfgsTraceEntry {
            iteration: iterations,
            value,
            gradient_inf_norm: inf_norm(&gradient),
            step_length: point.alpha,
            evaluations,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    if termination == Termination::MaxIterations && inf_norm(&gradient) < config.gradient_tolerance {
        termination = Termination::Converged;
    }
    Ok(LbfgsResult { x, value, gradient, iterations, evaluations, termination, trace })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(a: DMatrix<f64>) -> impl FnMut(&[f64]) -> Result<(f64, Vec<f64>)> {
        move |x: &[f64]| {
            let v = DVector::from_column_slice(x);
            let av = &a * &v;
            Ok((0.5 * v.dot(&av), av.iter().copied().collect()))
        }
    }

    fn spd(n: usize) -> DMatrix<f64> {
        let b = DMatrix::from_fn(n, n, |i, j| ((i * 7 + j * 3) % 5) as f64 * 0.3 + if i == j { 1.0 } else { 0.0 });
        &b * b.transpose() + DMatrix::identity(n, n)
    }

    #[test]
    fn convex_quadratic() {
        let cfg = LbfgsConfig { gradient_tolerance: 1e-12, ..Default::default() };
        let r = lbfgs_minimize(quadratic(spd(5)), &[1.0, -2.0, 3.0, 0.5, -1.0], &cfg).unwrap();
        assert_eq!(r.termination, Termination::Converged);
        assert!(r.iterations <= 25, "{}", r.iterations);
        assert!(r.x.iter().all(|v| v.abs() < 1e-10));
        assert!(r.trace.windows(2).all(|w| w[1].value <= w[0].value + 1e-13 * (1.0 + w[0].value.abs())));
    }

    #[test]
    fn rosenbrock() {
        let f = |x: &[f64]| {
            let (a, b) = (x[0], x[1]);
            let value = (1.0 - a).powi(2) + 100.0 * (b - a * a).powi(2);
            let g = vec![-2.0 * (1.0 - a) - 400.0 * a * (b - a * a), 200.0 * (b - a * a)];
            Ok((value, g))
        };
        let cfg = LbfgsConfig { gradient_tolerance: 1e-10, ..Default::default() };
        let r = lbfgs_minimize(f, &[-1.2, 1.0], &cfg).unwrap();
        assert_eq!(r.termination, Termination::Converged);
        assert!((r.x[0] - 1.0).abs() < 1e-6 && (r.x[1] - 1.0).abs() < 1e-6, "{:?}", r.x);
    }

    #[test]
    fn two_loop_matches_explicit_updates() {
        let n = 4;
        let pairs: Vec<(Vec<f64>, Vec<f64>)> = vec![
            (vec![0.1, -0.2, 0.3, 0.05], vec![0.4, -0.1, 0.5, 0.2]),
            (vec![-0.3, 0.1, 0.2, -0.1], vec![-0.5, 0.3, 0.1, -0.2]),
            (vec![0.2, 0.2, -0.1, 0.4], vec![0.3, 0.5, -0.2, 0.6]),
        ];
        for (s, y) in &pairs {
            assert!(dot(s, y) > 0.0);
        }
        let gamma = 0.7;
        let mut h = DMatrix::identity(n, n) * gamma;
        for (s, y) in &pairs {
            h = bfgs_inverse_update(&h, s, y);
            // secant condition
            let hy = &h * DVector::from_column_slice(y);
            for i in 0..n {
                assert!((hy[i] - s[i]).abs() < 1e-12);
            }
        }
        let g = vec![0.3, -1.2, 0.8, 0.1];
        let explicit = -(&h * DVector::from_column_slice(&g));
        let two_loop = two_loop_direction(&g, &pairs, gamma);
        for i in 0..n {
            assert!((explicit[i] - two_loop[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn invalid_start_and_config() {
        let f = |_: &[f64]| Ok((f64::NAN, vec![0.0]));
        assert!(lbfgs_minimize(f, &[0.0], &LbfgsConfig::default()).is_err());
        let g = |x: &[f64]| Ok((x[0] * x[0], vec![2.0 * x[0]]));
        let cfg = LbfgsConfig { memory: 0, ..Default::default() };
        assert!(lbfgs_minimize(g, &[1.0], &cfg).is_err());
    }

    #[test]
    fn line_search_failure_is_reported() {
        // gradient inconsistent with the value: no descent is ever found
        let f = |x: &[f64]| Ok((x[0], vec![1.0 + 0.0 * x[0]]));
        let bad = |x: &[f64]| f(x).map(|(v, g)| (-v, g));
        let r = lbfgs_minimize(bad, &[0.0], &LbfgsConfig::default()).unwrap();
        assert!(matches!(r.termination, Termination::LineSearchFailed(_)));
        assert_eq!(r.x, [0.0]);
    }
}
