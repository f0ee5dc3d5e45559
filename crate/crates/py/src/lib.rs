//! Python bindings for the phylograd engine.
//!
//! Built as the `phylograd` extension module. Arrays cross the boundary as
//! plain Python lists of floats.

use phylograd::clock::{ClockParameterization, ClockPosterior as CorePosterior, ClockPriors, FreeParameters, MuPrior};
use phylograd::inference::{
    effective_sample_size as core_ess, hmc_sample, lbfgs_minimize, univariate_baseline_sample, HmcConfig, LbfgsConfig,
    MassMode, Target, UnivariateConfig,
};
use phylograd::{
    compress_patterns, parse_fasta, parse_newick, parse_phylip, simulate_alignment, Engine as CoreEngine, RawAlignment,
    RateCategories as CoreCategories, Rescaling, SitePatternAlignment, SubstitutionModel as CoreModel,
    Tree as CoreTree,
};
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn err(e: phylograd::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Rooted binary tree with branch lengths.
#[pyclass(module = "phylograd", skip_from_py_object)]
#[derive(Clone)]
struct Tree {
    inner: CoreTree,
}

#[pymethods]
impl Tree {
    #[new]
    fn new(newick: &str) -> PyResult<Self> {
        parse_newick(newick).map(|inner| Self { inner }).map_err(err)
    }

    /// Coalescent topology on `n` tips with exponential inter-event times.
    #[staticmethod]
    fn random_coalescent(n: usize, seed: u64) -> PyResult<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CoreTree::random_coalescent(n, &mut rng).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn tip_count(&self) -> usize {
        self.inner.tip_count()
    }

    #[getter]
    fn branch_count(&self) -> usize {
        self.inner.branch_count()
    }

    #[getter]
    fn tip_names(&self) -> Vec<String> {
        self.inner.tip_names().to_vec()
    }

    #[getter]
    fn branch_lengths(&self) -> Vec<f64> {
        self.inner.branch_lengths().to_vec()
    }

    #[setter]
    fn set_branch_lengths(&mut self, lengths: Vec<f64>) -> PyResult<()> {
        self.inner.set_branch_lengths(&lengths).map_err(err)
    }

    fn parent(&self, node: usize) -> Option<usize> {
        self.inner.parent(node)
    }

    fn tree_length(&self) -> f64 {
        self.inner.tree_length()
    }

    fn to_newick(&self) -> String {
        self.inner.to_newick()
    }

    fn __repr__(&self) -> String {
        format!("Tree(tips={}, length={:.6})", self.inner.tip_count(), self.inner.tree_length())
    }
}

/// Nucleotide alignment compressed to unique site patterns.
#[pyclass(module = "phylograd", skip_from_py_object)]
#[derive(Clone)]
struct Alignment {
    raw: RawAlignment,
    patterns: SitePatternAlignment,
}

impl Alignment {
    fn from_raw(raw: RawAlignment) -> Self {
        let patterns = compress_patterns(&raw);
        Self { raw, patterns }
    }
}

#[pymethods]
impl Alignment {
    #[staticmethod]
    fn from_fasta(text: &str) -> PyResult<Self> {
        parse_fasta(text).map(Self::from_raw).map_err(err)
    }

    #[staticmethod]
    fn from_phylip(text: &str) -> PyResult<Self> {
        parse_phylip(text).map(Self::from_raw).map_err(err)
    }

    /// Simulates `sites` columns on `tree` using its current branch lengths.
    #[staticmethod]
    #[pyo3(signature = (tree, model, sites, seed, categories = None))]
    fn simulate(
        tree: &Tree,
        model: &SubstitutionModel,
        sites: usize,
        seed: u64,
        categories: Option<&RateCategories>,
    ) -> PyResult<Self> {
        let cats = categories.map_or_else(CoreCategories::single, |c| c.inner.clone());
        simulate_alignment(&tree.inner, &model.inner, &cats, tree.inner.branch_lengths(), sites, seed)
            .map(Self::from_raw)
            .map_err(err)
    }

    #[getter]
    fn taxa(&self) -> Vec<String> {
        self.raw.taxa.clone()
    }

    #[getter]
    fn site_count(&self) -> usize {
        self.raw.site_count()
    }

    #[getter]
    fn pattern_count(&self) -> usize {
        self.patterns.pattern_count()
    }

    #[getter]
    fn weights(&self) -> Vec<f64> {
        self.patterns.weights().to_vec()
    }

    fn to_fasta(&self) -> String {
        self.raw.to_fasta()
    }

    fn __repr__(&self) -> String {
        format!(
            "Alignment(taxa={}, sites={}, patterns={})",
            self.raw.taxa.len(),
            self.raw.site_count(),
            self.patterns.pattern_count()
        )
    }
}

#[pyclass(module = "phylograd", skip_from_py_object)]
#[derive(Clone)]
struct SubstitutionModel {
    inner: CoreModel,
}

#[pymethods]
impl SubstitutionModel {
    #[staticmethod]
    fn jc69() -> Self {
        Self { inner: CoreModel::jc69() }
    }

    #[staticmethod]
    fn hky85(kappa: f64, frequencies: Vec<f64>) -> PyResult<Self> {
        CoreModel::hky85(kappa, &frequencies).map(|inner| Self { inner }).map_err(err)
    }

    /// Exchangeabilities in the order AC, AG, AT, CG, CT, GT.
    #[staticmethod]
    fn gtr(exchangeabilities: Vec<f64>, frequencies: Vec<f64>) -> PyResult<Self> {
        CoreModel::gtr(&exchangeabilities, &frequencies).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name().to_string()
    }

    #[getter]
    fn state_count(&self) -> usize {
        self.inner.state_count()
    }

    #[getter]
    fn frequencies(&self) -> Vec<f64> {
        self.inner.root_distribution().to_vec()
    }

    /// Row-major `P(t) = exp(Q t)`.
    fn transition_matrix(&self, t: f64) -> PyResult<Vec<Vec<f64>>> {
        let p = self.inner.transition_matrix(0, t, 1.0).map_err(err)?;
        Ok(p.row_iter().map(|r| r.iter().copied().collect()).collect())
    }

    fn __repr__(&self) -> String {
        format!("SubstitutionModel({})", self.inner.name())
    }
}

#[pyclass(module = "phylograd", skip_from_py_object)]
#[derive(Clone)]
struct RateCategories {
    inner: CoreCategories,
}

#[pymethods]
impl RateCategories {
    #[staticmethod]
    fn single() -> Self {
        Self { inner: CoreCategories::single() }
    }

    #[staticmethod]
    fn discrete_gamma(alpha: f64, count: usize) -> PyResult<Self> {
        CoreCategories::discrete_gamma(alpha, count).map(|inner| Self { inner }).map_err(err)
    }

    #[getter]
    fn rates(&self) -> Vec<f64> {
        self.inner.rates().to_vec()
    }

    #[getter]
    fn probabilities(&self) -> Vec<f64> {
        self.inner.probabilities().to_vec()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

fn build_engine(
    tree: &Tree,
    alignment: &Alignment,
    model: Option<&SubstitutionModel>,
    categories: Option<&RateCategories>,
) -> PyResult<CoreEngine> {
    let model = model.map_or_else(CoreModel::jc69, |m| m.inner.clone());
    let cats = categories.map_or_else(CoreCategories::single, |c| c.inner.clone());
    CoreEngine::new(tree.inner.clone(), &alignment.patterns, model, cats).map_err(err)
}

/// Likelihood, branch gradient and Hessian diagonal on a fixed tree.
#[pyclass(module = "phylograd")]
struct Engine {
    inner: CoreEngine,
}

#[pymethods]
impl Engine {
    #[new]
    #[pyo3(signature = (tree, alignment, model = None, categories = None))]
    fn new(
        tree: &Tree,
        alignment: &Alignment,
        model: Option<&SubstitutionModel>,
        categories: Option<&RateCategories>,
    ) -> PyResult<Self> {
        build_engine(tree, alignment, model, categories).map(|inner| Self { inner })
    }

    #[getter]
    fn branch_lengths(&self) -> Vec<f64> {
        self.inner.branch_lengths().to_vec()
    }

    #[setter]
    fn set_branch_lengths(&mut self, lengths: Vec<f64>) -> PyResult<()> {
        self.inner.set_branch_lengths(&lengths).map_err(err)
    }

    #[getter]
    fn pattern_count(&self) -> usize {
        self.inner.pattern_count()
    }

    #[getter]
    fn node_visits(&self) -> u64 {
        self.inner.node_visits()
    }

    /// One of `"threshold"`, `"always"` or `"never"`.
    fn set_rescaling(&mut self, mode: &str) -> PyResult<()> {
        let mode = match mode {
            "threshold" => Rescaling::Threshold,
            "always" => Rescaling::Always,
            "never" => Rescaling::Never,
            other => return Err(PyValueError::new_err(format!("unknown rescaling mode `{other}`"))),
        };
        self.inner.set_rescaling(mode);
        Ok(())
    }

    fn log_likelihood(&mut self) -> PyResult<f64> {
        self.inner.log_likelihood().map_err(err)
    }

    fn site_log_likelihoods(&mut self) -> PyResult<Vec<f64>> {
        self.inner.site_log_likelihoods().map_err(err)
    }

    /// Gradient with respect to every branch length, indexed by child node.
    fn gradient(&mut self) -> PyResult<Vec<f64>> {
        self.inner.gradient(false).map(|r| r.branch_gradient).map_err(err)
    }

    fn hessian_diagonal(&mut self) -> PyResult<Vec<f64>> {
        self.inner.hessian_diagonal().map_err(err)
    }

    /// Dict with `log_likelihood`, `gradient` and `hessian_diagonal`.
    fn derivatives<'py>(&mut self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let report = self.inner.gradient(true).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("log_likelihood", report.log_likelihood)?;
        out.set_item("gradient", report.branch_gradient)?;
        out.set_item("hessian_diagonal", report.hessian_diagonal)?;
        Ok(out)
    }

    /// Maximizes the likelihood over log branch lengths with L-BFGS and
    /// leaves the engine at the optimum.
    #[pyo3(signature = (max_iterations = 1000, gradient_tolerance = 1e-6))]
    fn optimize<'py>(&mut self, py: Python<'py>, max_iterations: usize, gradient_tolerance: f64) -> PyResult<Bound<'py, PyDict>> {
        let config = LbfgsConfig { max_iterations, gradient_tolerance, ..LbfgsConfig::default() };
        let x0: Vec<f64> = self.inner.branch_lengths().iter().map(|b| b.max(1e-8).ln()).collect();
        let engine = &mut self.inner;
        let result = lbfgs_minimize(
            |x: &[f64]| {
                let b: Vec<f64> = x.iter().map(|v| v.exp()).collect();
                engine.set_branch_lengths(&b)?;
                let r = engine.gradient(false)?;
                let g = r.branch_gradient.iter().zip(&b).map(|(g, b)| -g * b).collect();
                Ok((-r.log_likelihood, g))
            },
            &x0,
            &config,
        )
        .map_err(err)?;
        let b: Vec<f64> = result.x.iter().map(|v| v.exp()).collect();
        self.inner.set_branch_lengths(&b).map_err(err)?;
        let out = PyDict::new(py);
        out.set_item("log_likelihood", -result.value)?;
        out.set_item("branch_lengths", b)?;
        out.set_item("iterations", result.iterations)?;
        out.set_item("gradient_inf_norm", result.gradient_inf_norm())?;
        out.set_item("termination", format!("{:?}", result.termination))?;
        Ok(out)
    }
}

/// Relaxed-clock log-posterior over `(log mu, log psi, log eps_i..)`.
///
/// The tree must be ultrametric; node times are read off its branch lengths.
#[pyclass(module = "phylograd")]
struct ClockPosterior {
    inner: CorePosterior,
}

#[pymethods]
impl ClockPosterior {
    #[new]
    #[pyo3(signature = (tree, alignment, model = None, categories = None, mu = 1.0, psi = 0.5,
                        mu_prior = None, psi_prior_mean = 1.0 / 3.0, free = "all"))]
    #[allow(clippy::too_many_arguments)]
    fn new(
        tree: &Tree,
        alignment: &Alignment,
        model: Option<&SubstitutionModel>,
        categories: Option<&RateCategories>,
        mu: f64,
        psi: f64,
        mu_prior: Option<(f64, f64)>,
        psi_prior_mean: f64,
        free: &str,
    ) -> PyResult<Self> {
        let mut dated = tree.clone();
        dated.inner.node_times_from_branch_lengths().map_err(err)?;
        let engine = build_engine(&dated, alignment, model, categories)?;
        let priors = ClockPriors {
            mu: mu_prior.map_or(MuPrior::FlatLog, |(location, scale)| MuPrior::LogNormal { location, scale }),
            psi_mean: psi_prior_mean,
            enabled: true,
        };
        let initial = ClockParameterization::strict(mu, psi, dated.inner.branch_count()).map_err(err)?;
        let mut inner = CorePosterior::new(engine, priors, &initial).map_err(err)?;
        inner.set_free(match free {
            "all" => FreeParameters::ALL,
            "epsilon" => FreeParameters::EPSILON_ONLY,
            other => return Err(PyValueError::new_err(format!("free must be `all` or `epsilon`, got `{other}`"))),
        });
        Ok(Self { inner })
    }

    /// Number of free coordinates seen by the samplers.
    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim()
    }

    /// Initial free-coordinate state.
    fn initial_state(&self) -> Vec<f64> {
        self.inner.restrict(self.inner.anchor())
    }

    fn log_density(&mut self, x: Vec<f64>) -> PyResult<f64> {
        self.inner.log_density(&x).map_err(err)
    }

    fn gradient(&mut self, x: Vec<f64>) -> PyResult<(f64, Vec<f64>)> {
        self.inner.log_density_and_gradient(&x).map_err(err)
    }

    fn hessian_diagonal(&mut self, x: Vec<f64>) -> PyResult<Vec<f64>> {
        Target::hessian_diagonal(&mut self.inner, &x).map_err(err)
    }

    /// Runs one chain and returns a dict with `samples` (one list per
    /// retained iteration), `log_densities` and kernel diagnostics.
    ///
    /// `kernel` is `"phmc"` (adaptive diagonal mass), `"vhmc"` (identity
    /// mass) or `"univariate"` (adaptive random-walk Metropolis sweeps).
    #[pyo3(signature = (iterations, seed, kernel = "phmc", warmup = None, step_size = 0.1, leapfrog_steps = 20))]
    #[allow(clippy::too_many_arguments)]
    fn sample<'py>(
        &mut self,
        py: Python<'py>,
        iterations: usize,
        seed: u64,
        kernel: &str,
        warmup: Option<usize>,
        step_size: f64,
        leapfrog_steps: usize,
    ) -> PyResult<Bound<'py, PyDict>> {
        let x0 = self.initial_state();
        let out = PyDict::new(py);
        match kernel {
            "univariate" => {
                let mut config = UnivariateConfig::new(iterations, seed);
                if let Some(w) = warmup {
                    config.warmup = w;
                }
                let chain = univariate_baseline_sample(&mut self.inner, &x0, &config).map_err(err)?;
                out.set_item("samples", chain.samples)?;
                out.set_item("log_densities", chain.log_densities)?;
                out.set_item("acceptance_rate", chain.acceptance_rate)?;
                out.set_item("scales", chain.scales)?;
            }
            "vhmc" | "phmc" => {
                let mut config = HmcConfig::new(iterations, seed);
                config.step_size = step_size;
                config.leapfrog_steps = leapfrog_steps;
                if let Some(w) = warmup {
                    config.warmup = w;
                }
                if kernel == "phmc" {
                    config.mass = MassMode::AdaptiveDiagonal;
                }
                let chain = hmc_sample(&mut self.inner, &x0, &config).map_err(err)?;
                out.set_item("acceptance_rate", chain.acceptance_rate())?;
                out.set_item("samples", chain.samples)?;
                out.set_item("log_densities", chain.log_densities)?;
                out.set_item("step_size", chain.step_size)?;
                out.set_item("mass", chain.mass)?;
                out.set_item("divergences", chain.divergences)?;
            }
            other => return Err(PyValueError::new_err(format!("unknown kernel `{other}`"))),
        }
        Ok(out)
    }
}

/// Effective sample size of a scalar chain.
#[pyfunction]
fn effective_sample_size(chain: Vec<f64>) -> PyResult<f64> {
    core_ess(&chain).map(|e| e.ess).map_err(|e| PyRuntimeError::new_err(e.to_string()))
}

#[pymodule]
#[pyo3(name = "phylograd")]
fn phylograd_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Tree>()?;
    m.add_class::<Alignment>()?;
    m.add_class::<SubstitutionModel>()?;
    m.add_class::<RateCategories>()?;
    m.add_class::<Engine>()?;
    m.add_class::<ClockPosterior>()?;
    m.add_function(wrap_pyfunction!(effective_sample_size, m)?)?;
    Ok(())
}
