//! Reference computations for checking the engine and the timing harness
//! behind the scaling comparison.

use std::fmt::Write as _;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::alignment::{compress_patterns, simulate_alignment, SitePatternAlignment};
use crate::engine::Engine;
use crate::error::{Error, Result};
use crate::substitution::{matrix_exponential, RateCategories, SubstitutionModel};
use crate::tree::Tree;

/// Largest tree accepted by [`brute_force_likelihood`].
pub const BRUTE_FORCE_MAX_TIPS: usize = 6;

/// Log-likelihood by summing the joint probability over every assignment
/// of states to internal nodes. Exponential in the number of tips.
pub fn brute_force_likelihood(
    tree: &Tree,
    alignment: &SitePatternAlignment,
    model: &SubstitutionModel,
    categories: &RateCategories,
) -> Result<f64> {
    let n = tree.tip_count();
    if n > BRUTE_FORCE_MAX_TIPS {
        return Err(Error::InvalidArgument(format!(
            "brute force enumeration supports at most {BRUTE_FORCE_MAX_TIPS} tips, got {n}"
        )));
    }
    let m = model.state_count();
    if alignment.state_count() != m {
        return Err(Error::Binding("alignment and model disagree on the state count".into()));
    }
    let mut tip_rows = Vec::with_capacity(n);
    for name in tree.tip_names() {
        let taxon = alignment
            .taxa()
            .iter()
            .position(|t| t == name)
            .ok_or_else(|| Error::Binding(format!("tree tip `{name}` has no sequence")))?;
        tip_rows.push(alignment.tip_partials(taxon));
    }
    // transition matrices straight from the Padé exponential
    let mut transitions = Vec::with_capacity(categories.len());
    for &rate in categories.rates() {
        let mut per_branch = Vec::with_capacity(tree.branch_count());
        for branch in 0..tree.branch_count() {
            let q = model.generator(branch).matrix();
            per_branch.push(matrix_exponential(&(q * (tree.branch_length(branch) * rate)))?);
        }
        transitions.push(per_branch);
    }
    let internal = n - 1;
    let assignments = m.pow(internal as u32);
    let pi = model.root_distribution();
    let mut states = vec![0usize; tree.node_count()];
    let mut total = 0.0;
    for s in 0..alignment.pattern_count() {
        let mut site = 0.0;
        for (l, prob) in categories.probabilities().iter().enumerate() {
            let mut sum = 0.0;
            for code in 0..assignments {
                let mut rest = code;
                for k in 0..internal {
                    states[n + k] = rest % m;
                    rest /= m;
                }
                let mut joint = pi[states[tree.root()]];
                for child in 0..tree.branch_count() {
                    let parent = tree.parent(child).expect("non-root");
                    let p = &transitions[l][child];
                    let a = states[parent];
                    joint *= if tree.is_tip(child) {
                        let tip = &tip_rows[child][s * m..(s + 1) * m];
                        (0..m).map(|j| p[(a, j)] * tip[j]).sum::<f64>()
                    } else {
                        p[(a, states[child])]
                    };
                }
                sum += joint;
            }
            site += prob * sum;
        }
        if !(site > 0.0) {
            return Err(Error::ZeroLikelihood { pattern: s });
        }
        total += alignment.weights()[s] * site.ln();
    }
    Ok(total)
}

/// Finite-difference estimate together with the number of function
/// evaluations it took.
#[derive(Debug, Clone, PartialEq)]
pub struct FiniteDifference {
    pub values: Vec<f64>,
    pub evaluations: usize,
}

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn central_difference_gradient<F>(mut f: F, x: &[f64], h: f64) -> Result<FiniteDifference>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut y = x.to_vec();
    let mut values = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y)?;
        y[i] = x[i] - h;
        let down = f(&y)?;
        y[i] = x[i];
        values.push((up - down) / (2.0 * h));
    }
    Ok(FiniteDifference { values, evaluations: 2 * x.len() })
}

/// Second-order central differences `(f(x + h e_i) - 2 f(x) + f(x - h e_i)) / h^2`.
pub fn central_difference_hessian_diagonal<F>(mut f: F, x: &[f64], h: f64) -> Result<FiniteDifference>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let center = f(x)?;
    let mut y = x.to_vec();
    let mut values = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        y[i] = x[i] + h;
        let up = f(&y)?;
        y[i] = x[i] - h;
        let down = f(&y)?;
        y[i] = x[i];
        values.push((up - 2.0 * center + down) / (h * h));
    }
    Ok(FiniteDifference { values, evaluations: 2 * x.len() + 1 })
}

fn with_lengths(engine: &mut Engine, lengths: &[f64]) -> Result<f64> {
    engine.set_branch_lengths(lengths)?;
    engine.log_likelihood()
}

/// `d log L / d b_i` from central differences in `log b_i` with step `h`,
/// using exactly `2 (2N - 2)` likelihood evaluations. Branch lengths are
/// restored afterwards.
pub fn finite_difference_gradient(engine: &mut Engine, h: f64) -> Result<FiniteDifference> {
    let lengths = engine.branch_lengths().to_vec();
    if let Some(i) = lengths.iter().position(|b| !(*b > 0.0)) {
        return Err(Error::InvalidArgument(format!("log-space differences need positive lengths; branch {i} is not")));
    }
    let logs: Vec<f64> = lengths.iter().map(|b| b.ln()).collect();
    let fd = central_difference_gradient(
        |u: &[f64]| {
            let b: Vec<f64> = u.iter().map(|v| v.exp()).collect();
            with_lengths(engine, &b)
        },
        &logs,
        h,
    );
    engine.set_branch_lengths(&lengths)?;
    let mut fd = fd?;
    for (g, b) in fd.values.iter_mut().zip(&lengths) {
        *g /= b;
    }
    Ok(fd)
}

/// `d^2 log L / d b_i^2` from second-order central differences with step
/// `h * b_i` on each branch.
pub fn finite_difference_hessian_diagonal(engine: &mut Engine, h: f64) -> Result<FiniteDifference> {
    let lengths = engine.branch_lengths().to_vec();
    if let Some(i) = lengths.iter().position(|b| !(*b > 0.0)) {
        return Err(Error::InvalidArgument(format!("relative steps need positive lengths; branch {i} is not")));
    }
    let values = second_differences(engine, &lengths, h);
    engine.set_branch_lengths(&lengths)?;
    Ok(FiniteDifference { values: values?, evaluations: 2 * lengths.len() + 1 })
}

fn second_differences(engine: &mut Engine, lengths: &[f64], h: f64) -> Result<Vec<f64>> {
    let f0 = with_lengths(engine, lengths)?;
    let mut b = lengths.to_vec();
    let mut values = Vec::with_capacity(lengths.len());
    for i in 0..lengths.len() {
        let step = h * lengths[i];
        b[i] = lengths[i] + step;
        let up = with_lengths(engine, &b)?;
        b[i] = lengths[i] - step;
        let down = with_lengths(engine, &b)?;
        b[i] = lengths[i];
        values.push((up - 2.0 * f0 + down) / (step * step));
    }
    Ok(values)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TreeShape {
    Coalescent,
    Caterpillar,
}

impl TreeShape {
    pub fn name(self) -> &'static str {
        match self {
            TreeShape::Coalescent => "coalescent",
            TreeShape::Caterpillar => "caterpillar",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradientMethod {
    Analytic,
    FiniteDifference,
}

impl GradientMethod {
    pub fn name(self) -> &'static str {
        match self {
            GradientMethod::Analytic => "analytic",
            GradientMethod::FiniteDifference => "finite_difference",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkConfig {
    pub sizes: Vec<usize>,
    pub site_count: usize,
    pub shapes: Vec<TreeShape>,
    /// Analytic gradients are repeated until this much time has elapsed, to
    /// get a stable per-gradient time.
    pub min_seconds: f64,
    pub fd_step: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512, 1024],
            site_count: 1000,
            shapes: vec![TreeShape::Coalescent],
            min_seconds: 0.2,
            fd_step: 1e-5,
            seed: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkRecord {
    pub n: usize,
    pub shape: TreeShape,
    pub method: GradientMethod,
    pub patterns: usize,
    /// Seconds per full gradient.
    pub wall_time: f64,
    /// Node visits per full gradient.
    pub node_visits: u64,
    /// Likelihood evaluations per full gradient (zero for the analytic path).
    pub likelihood_evaluations: usize,
    pub repetitions: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExponentFit {
    pub shape: TreeShape,
    pub method: GradientMethod,
    /// Slope of `log wall_time` against `log N`.
    pub exponent: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeedupRow {
    pub shape: TreeShape,
    pub n: usize,
    pub analytic_seconds: f64,
    pub finite_difference_seconds: f64,
    pub speedup: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchmarkReport {
    pub records: Vec<BenchmarkRecord>,
    pub exponents: Vec<ExponentFit>,
    pub speedups: Vec<SpeedupRow>,
}

impl BenchmarkReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n,shape,method,patterns,wall_time,node_visits,likelihood_evaluations,repetitions\n");
        for r in &self.records {
            let _ = writeln!(
                out,
                "{},{},{},{},{:e},{},{},{}",
                r.n,
                r.shape.name(),
                r.method.name(),
                r.patterns,
                r.wall_time,
                r.node_visits,
                r.likelihood_evaluations,
                r.repetitions
            );
        }
        out
    }

    pub fn speedup_csv(&self) -> String {
        let mut out = String::from("shape,n,analytic_seconds,finite_difference_seconds,speedup\n");
        for r in &self.speedups {
            let _ = writeln!(
                out,
                "{},{},{:e},{:e},{:.3}",
                r.shape.name(),
                r.n,
                r.analytic_seconds,
                r.finite_difference_seconds,
                r.speedup
            );
        }
        out
    }

    pub fn exponent(&self, shape: TreeShape, method: GradientMethod) -> Option<f64> {
        self.exponents
            .iter()
            .find(|e| e.shape == shape && e.method == method)
            .map(|e| e.exponent)
    }
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("need at least two paired points".into()));
    }
    if x.iter().chain(y).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit needs positive values".into()));
    }
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("log-log fit needs distinct x values".into()));
    }
    Ok(sxy / sxx)
}

/// Simulated HKY dataset on a tree of the given shape, used by the scaling
/// benchmark.
pub fn benchmark_engine(shape: TreeShape, n: usize, site_count: usize, seed: u64) -> Result<Engine> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = match shape {
        TreeShape::Coalescent => Tree::random_coalescent(n, &mut rng)?,
        TreeShape::Caterpillar => Tree::caterpillar(n, 1.0)?,
    };
    // total tree length of roughly one substitution per site per ten tips
    let scale = 0.1 * n as f64 / tree.tree_length();
    let lengths: Vec<f64> = tree.branch_lengths().iter().map(|b| b * scale).collect();
    tree.set_branch_lengths(&lengths)?;
    let model = SubstitutionModel::hky85(2.0, &[0.3, 0.2, 0.2, 0.3])?;
    let categories = RateCategories::single();
    let raw = simulate_alignment(&tree, &model, &categories, &lengths, site_count, seed ^ 0x5eed)?;
    Engine::new(tree, &compress_patterns(&raw), model, categories)
}

/// Times one analytic gradient (post-order plus pre-order pass) against one
/// finite-difference gradient for each size and shape.
pub fn scaling_benchmark(config: &BenchmarkConfig) -> Result<BenchmarkReport> {
    if config.sizes.len() < 2 {
        return Err(Error::InvalidArgument("scaling benchmark needs at least two sizes".into()));
    }
    let mut records = Vec::new();
    let mut exponents = Vec::new();
    let mut speedups = Vec::new();
    for &shape in &config.shapes {
        let mut analytic_times = Vec::new();
        let mut fd_times = Vec::new();
        for (k, &n) in config.sizes.iter().enumerate() {
            let mut engine = benchmark_engine(shape, n, config.site_count, config.seed.wrapping_add(k as u64))?;
            let patterns = engine.pattern_count();

            // analytic: invalidate so every repetition does both passes
            let lengths = engine.branch_lengths().to_vec();
            engine.gradient(false)?;
            engine.reset_node_visits();
            let start = Instant::now();
            let mut repetitions = 0;
            while repetitions == 0 || start.elapsed().as_secs_f64() < config.min_seconds {
                engine.set_branch_lengths(&lengths)?;
                std::hint::black_box(engine.gradient(false)?);
                repetitions += 1;
            }
            let analytic = start.elapsed().as_secs_f64() / repetitions as f64;
            let visits = engine.node_visits() / repetitions as u64;
            records.push(BenchmarkRecord {
                n,
                shape,
                method: GradientMethod::Analytic,
                patterns,
                wall_time: analytic,
                node_visits: visits,
                likelihood_evaluations: 0,
                repetitions,
            });

            engine.reset_node_visits();
            let start = Instant::now();
            let fd = finite_difference_gradient(&mut engine, config.fd_step)?;
            let fd_time = start.elapsed().as_secs_f64();
            records.push(BenchmarkRecord {
                n,
                shape,
                method: GradientMethod::FiniteDifference,
                patterns,
                wall_time: fd_time,
                node_visits: engine.node_visits(),
                likelihood_evaluations: fd.evaluations,
                repetitions: 1,
            });
            speedups.push(SpeedupRow {
                shape,
                n,
                analytic_seconds: analytic,
                finite_difference_seconds: fd_time,
                speedup: fd_time / analytic,
            });
            analytic_times.push(analytic);
            fd_times.push(fd_time);
        }
        let sizes: Vec<f64> = config.sizes.iter().map(|n| *n as f64).collect();
        exponents.push(ExponentFit {
            shape,
            method: GradientMethod::Analytic,
            exponent: log_log_slope(&sizes, &analytic_times)?,
        });
        exponents.push(ExponentFit {
            shape,
            method: GradientMethod::FiniteDifference,
            exponent: log_log_slope(&sizes, &fd_times)?,
        });
    }
    Ok(BenchmarkReport { records, exponents, speedups })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slope_of_power_law() {
        let x = [1.0, 2.0, 4.0, 8.0];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(1.5)).collect();
        assert!((log_log_slope(&x, &y).unwrap() - 1.5).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
        assert!(log_log_slope(&[1.0, 1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn central_differences_of_polynomial() {
        let f = |x: &[f64]| Ok(x[0].powi(3) + 2.0 * x[1] * x[1]);
        let g = central_difference_gradient(f, &[1.0, -2.0], 1e-5).unwrap();
        assert!((g.values[0] - 3.0).abs() < 1e-8 && (g.values[1] + 8.0).abs() < 1e-8);
        assert_eq!(g.evaluations, 4);
        let h = central_difference_hessian_diagonal(f, &[1.0, -2.0], 1e-4).unwrap();
        assert!((h.values[0] - 6.0).abs() < 1e-5 && (h.values[1] - 4.0).abs() < 1e-5);
    }

    #[test]
    fn brute_force_rejects_large_trees() {
        let tree = Tree::caterpillar(7, 0.1).unwrap();
        let taxa: Vec<String> = tree.tip_names().to_vec();
        let partials = vec![vec![1.0; 4]; 7];
        let aln = SitePatternAlignment::from_partials(taxa, 4, partials, vec![1.0]).unwrap();
        let r = brute_force_likelihood(&tree, &aln, &SubstitutionModel::jc69(), &RateCategories::single());
        assert!(matches!(r, Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn small_benchmark_runs() {
        let cfg = BenchmarkConfig {
            sizes: vec![8, 16],
            site_count: 50,
            shapes: vec![TreeShape::Coalescent, TreeShape::Caterpillar],
            min_seconds: 0.0,
            ..Default::default()
        };
        let report = scaling_benchmark(&cfg).unwrap();
        assert_eq!(report.records.len(), 8);
        for r in &report.records {
            match r.method {
                GradientMethod::Analytic => assert_eq!(r.node_visits, 2 * (2 * r.n as u64 - 1)),
                GradientMethod::FiniteDifference => assert_eq!(r.likelihood_evaluations, 2 * (2 * r.n - 2)),
            }
        }
        assert_eq!(report.to_csv().lines().count(), 9);
        assert_eq!(report.speedup_csv().lines().count(), 5);
    }
}
