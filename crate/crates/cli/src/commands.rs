use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use phylograd::clock::{
    ClockParameterization, ClockPosterior, ClockPriors, FreeParameters, MuPrior, EPSILON_OFFSET, MU_INDEX, PSI_INDEX,
};
use phylograd::inference::{
    effective_sample_size, hmc_sample, lbfgs_minimize, samples_csv, univariate_baseline_sample, Clamp, HmcConfig,
    LbfgsConfig, MassMode, UnivariateConfig,
};
use phylograd::validation::{scaling_benchmark, BenchmarkConfig, TreeShape};
use phylograd::{
    compress_patterns, parse_fasta, parse_newick, parse_phylip, simulate_alignment, Engine, RateCategories,
    RawAlignment, Rescaling, SitePatternAlignment, SubstitutionModel, Tree,
};
use nalgebra::DMatrix;
use serde_json::{json, Value};

use crate::config::{EpsilonInit, Mode, RunConfig, KERNELS};

#[derive(Debug)]
pub enum CliError {
    Config(Vec<String>),
    Io(String),
    Run(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Io(_) => "io",
            CliError::Run(_) => "run",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) | CliError::Run(_) => 1,
        }
    }

    pub fn to_json(&self, config_hash: Option<&str>) -> Value {
        let messages = match self {
            CliError::Config(m) => m.clone(),
            CliError::Io(m) | CliError::Run(m) => vec![m.clone()],
        };
        json!({ "error": { "kind": self.kind(), "messages": messages, "config_hash": config_hash } })
    }
}

impl From<phylograd::Error> for CliError {
    fn from(e: phylograd::Error) -> Self {
        CliError::Run(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

/// Inputs shared by every chain and command, parsed once.
pub struct Dataset {
    pub tree: Tree,
    pub alignment: Option<SitePatternAlignment>,
    pub sites: usize,
    pub model: SubstitutionModel,
    pub categories: RateCategories,
    pub rescaling: Rescaling,
}

fn read_alignment(path: &Path) -> Result<RawAlignment, String> {
    let text = fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    let parsed = if ext == "phy" || ext == "phylip" || !text.trim_start().starts_with(['>', ';']) {
        parse_phylip(&text)
    } else {
        parse_fasta(&text)
    };
    parsed.map_err(|e| format!("paths.alignment: {e}"))
}

fn read_generator(path: &Path) -> Result<DMatrix<f64>, String> {
    let fail = |e: &dyn std::fmt::Display| format!("{}: {e}", path.display());
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| fail(&e))?;
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| fail(&e))?;
        let row = record.iter().map(str::parse::<f64>).collect::<Result<Vec<_>, _>>().map_err(|e| fail(&e))?;
        rows.push(row);
    }
    let m = rows.len();
    if m == 0 || rows.iter().any(|r| r.len() != m) {
        return Err(fail(&"generator must be a square matrix"));
    }
    Ok(DMatrix::from_fn(m, m, |i, j| rows[i][j]))
}

/// Node index for every label that names a branch.
fn branch_labels(tree: &Tree) -> BTreeMap<String, usize> {
    (0..tree.branch_count()).map(|i| (node_label(tree, i), i)).collect()
}

fn with_branch_generators(config: &RunConfig, tree: &Tree, model: SubstitutionModel) -> Result<SubstitutionModel, Vec<String>> {
    let shared = read_generator(config.model.generator.as_deref().expect("validated")).map_err(|e| vec![e])?;
    let labels = branch_labels(tree);
    let mut generators = vec![shared; tree.branch_count()];
    let mut problems = Vec::new();
    for (label, path) in &config.model.branch_generators {
        match (labels.get(label), read_generator(path)) {
            (Some(&i), Ok(q)) => generators[i] = q,
            (None, _) => problems.push(format!("model.branch_generators: no branch above `{label}`")),
            (_, Err(e)) => problems.push(format!("model.branch_generators.{label}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(problems);
    }
    model.with_branch_generators(generators).map_err(|e| vec![format!("model.branch_generators: {e}")])
}

fn build_model(config: &RunConfig) -> Result<(SubstitutionModel, RateCategories), Vec<String>> {
    let m = &config.model;
    let frequencies = m.frequencies.clone().unwrap_or_else(|| vec![0.25; 4]);
    let model = match m.name.as_str() {
        "jc69" => Ok(SubstitutionModel::jc69()),
        "hky85" => SubstitutionModel::hky85(m.kappa, &frequencies),
        "raw" => match read_generator(m.generator.as_deref().expect("validated")) {
            Ok(q) => SubstitutionModel::from_generator(q, frequencies),
            Err(e) => return Err(vec![format!("model.generator: {e}")]),
        },
        _ => SubstitutionModel::gtr(m.exchangeabilities.as_deref().unwrap_or(&[]), &frequencies),
    };
    let categories = if m.gamma_categories == 1 {
        Ok(RateCategories::single())
    } else {
        RateCategories::discrete_gamma(m.gamma_alpha, m.gamma_categories)
    };
    let mut problems = Vec::new();
    if let Err(e) = &model {
        problems.push(format!("model: {e}"));
    }
    if let Err(e) = &categories {
        problems.push(format!("model: {e}"));
    }
    match (model, categories) {
        (Ok(model), Ok(categories)) => Ok((model, categories)),
        _ => Err(problems),
    }
}

/// Validates the configuration and loads its inputs, reporting every
/// problem found along the way.
pub fn load(config: &RunConfig, mode: Mode) -> CliResult<Dataset> {
    let mut problems = config.validate(mode);
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let tree = match &config.paths.tree {
        Some(path) => match fs::read_to_string(path) {
            Ok(text) => parse_newick(&text).map_err(|e| format!("paths.tree: {e}")),
            Err(e) => Err(format!("cannot read {}: {e}", path.display())),
        },
        None => Err(String::new()),
    };
    let raw = match &config.paths.alignment {
        Some(path) if mode != Mode::Simulate => Some(read_alignment(path)),
        _ => None,
    };
    let model = build_model(config);

    let mut tree = match tree {
        Ok(t) => Some(t),
        Err(e) => {
            if !e.is_empty() {
                problems.push(e);
            }
            None
        }
    };
    if mode == Mode::Sample {
        if let Some(t) = tree.as_mut() {
            if t.node_times().is_none() {
                if let Err(e) = t.node_times_from_branch_lengths() {
                    problems.push(format!("paths.tree: cannot date nodes from branch lengths: {e}"));
                }
            }
        }
    }
    let raw = match raw {
        Some(Ok(r)) => Some(r),
        Some(Err(e)) => {
            problems.push(e);
            None
        }
        None => None,
    };
    let (model, categories) = match model {
        Ok(pair) => (Some(pair.0), Some(pair.1)),
        Err(p) => {
            problems.extend(p);
            (None, None)
        }
    };
    let model = match (model, &tree) {
        (Some(m), Some(t)) if !config.model.branch_generators.is_empty() => {
            match with_branch_generators(config, t, m) {
                Ok(m) => Some(m),
                Err(p) => {
                    problems.extend(p);
                    None
                }
            }
        }
        (m, _) => m,
    };
    if let (Some(t), Some(r)) = (&tree, &raw) {
        let mut missing: Vec<&str> =
            t.tip_names().iter().filter(|n| !r.taxa.contains(n)).map(String::as_str).collect();
        missing.truncate(10);
        if !missing.is_empty() {
            problems.push(format!("tree tips without sequences: {}", missing.join(", ")));
        }
    }
    if !problems.is_empty() {
        return Err(CliError::Config(problems));
    }
    let tree = match tree {
        Some(t) => t,
        // bench builds its own trees
        None => Tree::caterpillar(2, 0.1)?,
    };
    let sites = raw.as_ref().map_or(0, RawAlignment::site_count);
    let rescaling = match config.model.rescaling.as_str() {
        "always" => Rescaling::Always,
        "never" => Rescaling::Never,
        _ => Rescaling::Threshold,
    };
    Ok(Dataset {
        tree,
        alignment: raw.as_ref().map(compress_patterns),
        sites,
        model: model.expect("checked"),
        categories: categories.expect("checked"),
        rescaling,
    })
}

impl Dataset {
    fn engine(&self, tree: Tree) -> CliResult<Engine> {
        let alignment = self.alignment.as_ref().ok_or_else(|| CliError::Run("no alignment loaded".into()))?;
        let mut engine = Engine::new(tree, alignment, self.model.clone(), self.categories.clone())?;
        engine.set_rescaling(self.rescaling);
        Ok(engine)
    }
}

pub struct Context {
    pub config: RunConfig,
    pub hash: String,
}

impl Context {
    pub fn new(config: RunConfig) -> Self {
        let hash = config.hash();
        Self { config, hash }
    }

    fn output(&self, name: &str) -> CliResult<PathBuf> {
        let dir = &self.config.paths.output;
        fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("cannot create {}: {e}", dir.display())))?;
        Ok(dir.join(name))
    }

    fn write(&self, name: &str, contents: &str) -> CliResult<PathBuf> {
        let path = self.output(name)?;
        fs::write(&path, contents).map_err(|e| CliError::Io(format!("cannot write {}: {e}", path.display())))?;
        Ok(path)
    }

    fn csv_preamble(&self) -> String {
        format!("# config_hash={} seed={}\n", self.hash, self.config.seed)
    }

    fn write_json(&self, name: &str, value: &Value) -> CliResult<PathBuf> {
        let mut text = serde_json::to_string_pretty(value).expect("json serializes");
        text.push('\n');
        self.write(name, &text)
    }
}

/// `x` with 18 significant digits.
pub fn sig18(x: f64) -> String {
    format!("{x:.17e}")
}

fn node_label(tree: &Tree, node: usize) -> String {
    if tree.is_tip(node) {
        tree.tip_names()[node].clone()
    } else {
        format!("node{node}")
    }
}

pub fn loglik(ctx: &Context, data: &Dataset) -> CliResult<()> {
    let mut engine = data.engine(data.tree.clone())?;
    let value = engine.log_likelihood()?;
    println!("config_hash {}", ctx.hash);
    println!("seed {}", ctx.config.seed);
    println!("taxa {}", data.tree.tip_count());
    println!("sites {}", data.sites);
    println!("patterns {}", engine.pattern_count());
    println!("rate_categories {}", data.categories.len());
    println!("log_likelihood {}", sig18(value));
    Ok(())
}

pub fn gradient(ctx: &Context, data: &Dataset) -> CliResult<()> {
    let mut engine = data.engine(data.tree.clone())?;
    let with_hessian = ctx.config.gradient.hessian;
    let report = engine.gradient(with_hessian)?;
    let mut csv = ctx.csv_preamble();
    csv.push_str("branch,node,length,gradient,log_gradient");
    csv.push_str(if with_hessian { ",hessian\n" } else { "\n" });
    let tree = engine.tree();
    let mut max_log = 0.0f64;
    for (i, g) in report.branch_gradient.iter().enumerate() {
        let b = tree.branch_length(i);
        max_log = max_log.max((b * g).abs());
        let _ = write!(csv, "{i},{},{b},{g},{}", node_label(tree, i), b * g);
        if let Some(h) = &report.hessian_diagonal {
            let _ = write!(csv, ",{}", h[i]);
        }
        csv.push('\n');
    }
    let path = ctx.write("gradient.csv", &csv)?;
    println!("config_hash {}", ctx.hash);
    println!("log_likelihood {}", sig18(report.log_likelihood));
    println!("max_abs_log_gradient {}", sig18(max_log));
    println!("wrote {}", path.display());
    Ok(())
}

pub fn optimize(ctx: &Context, data: &Dataset) -> CliResult<()> {
    let mut engine = data.engine(data.tree.clone())?;
    let start: Vec<f64> = engine.branch_lengths().iter().map(|b| b.max(1e-6).ln()).collect();
    let mut objective = |u: &[f64]| {
        let b: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        engine.set_branch_lengths(&b)?;
        let r = engine.gradient(false)?;
        Ok((-r.log_likelihood, r.branch_gradient.iter().zip(&b).map(|(g, b)| -g * b).collect()))
    };
    let l = &ctx.config.lbfgs;
    let cfg = LbfgsConfig {
        memory: l.memory,
        max_iterations: l.max_iterations,
        gradient_tolerance: l.gradient_tolerance,
        ..Default::default()
    };
    let result = lbfgs_minimize(&mut objective, &start, &cfg)?;
    let lengths: Vec<f64> = result.x.iter().map(|v| v.exp()).collect();
    let mut tree = data.tree.clone();
    tree.set_branch_lengths(&lengths)?;
    let newick = format!("[config_hash={}]{}\n", ctx.hash, tree.to_newick());
    let tree_path = ctx.write("optimized.nwk", &newick)?;
    let trace: Vec<Value> = result
        .trace
        .iter()
        .map(|t| {
            json!({
                "iteration": t.iteration,
                "value": t.value,
                "gradient_inf_norm": t.gradient_inf_norm,
                "step_length": t.step_length,
                "evaluations": t.evaluations,
                "seconds": t.seconds,
            })
        })
        .collect();
    let report = json!({
        "config_hash": ctx.hash,
        "seed": ctx.config.seed,
        "termination": format!("{:?}", result.termination),
        "f_star": result.value,
        "log_likelihood": -result.value,
        "gradient_inf_norm": result.gradient_inf_norm(),
        "iterations": result.iterations,
        "evaluations": result.evaluations,
        "branch_lengths": lengths,
        "tree": tree.to_newick(),
        "trace": trace,
    });
    let path = ctx.write_json("optimize.json", &report)?;
    println!("config_hash {}", ctx.hash);
    println!("termination {:?}", result.termination);
    println!("log_likelihood {}", sig18(-result.value));
    println!("gradient_inf_norm {:e}", result.gradient_inf_norm());
    println!("iterations {}", result.iterations);
    println!("wrote {} and {}", path.display(), tree_path.display());
    Ok(())
}

struct ChainRun {
    samples: Vec<Vec<f64>>,
    log_densities: Vec<f64>,
    accepted: Option<Vec<bool>>,
    stats: Value,
    sampling_seconds: f64,
}

fn build_posterior(ctx: &Context, data: &Dataset) -> CliResult<(ClockPosterior, Vec<f64>, Vec<String>)> {
    let c = &ctx.config.clock;
    let mut engine = data.engine(data.tree.clone())?;
    engine.set_rescaling(data.rescaling);
    let priors = ClockPriors {
        mu: match (c.mu_prior_location, c.mu_prior_scale) {
            (Some(location), Some(scale)) => MuPrior::LogNormal { location, scale },
            _ => MuPrior::FlatLog,
        },
        psi_mean: c.psi_prior_mean,
        enabled: true,
    };
    let mut posterior = if c.strict {
        ClockPosterior::strict_clock(engine, priors, c.mu)?
    } else {
        let branches = data.tree.branch_count();
        let epsilon = match &c.epsilon {
            EpsilonInit::Scalar(v) => vec![*v; branches],
            EpsilonInit::PerBranch(table) => {
                let labels = branch_labels(&data.tree);
                let mut eps = vec![1.0; branches];
                let mut unknown = Vec::new();
                for (label, v) in table {
                    match labels.get(label) {
                        Some(&i) => eps[i] = *v,
                        None => unknown.push(format!("clock.epsilon: no branch above `{label}`")),
                    }
                }
                if !unknown.is_empty() {
                    return Err(CliError::Config(unknown));
                }
                eps
            }
        };
        let mut p = ClockPosterior::new(engine, priors, &ClockParameterization::new(c.mu, c.psi, epsilon)?)?;
        let has = |name: &str| c.free.iter().any(|f| f == name);
        p.set_free(FreeParameters { mu: has("mu"), psi: has("psi"), epsilon: has("epsilon") });
        p
    };
    posterior.set_likelihood_enabled(c.likelihood);
    if posterior.free_indices().is_empty() {
        return Err(CliError::Config(vec!["clock.free: nothing left to sample under a strict clock".into()]));
    }
    let names = posterior
        .free_indices()
        .iter()
        .map(|&i| match i {
            MU_INDEX => "log_mu".to_string(),
            PSI_INDEX => "log_psi".to_string(),
            _ => format!("log_eps_{}", node_label(&data.tree, i - EPSILON_OFFSET)),
        })
        .collect();
    let x0 = posterior.restrict(posterior.anchor());
    Ok((posterior, x0, names))
}

fn chain_seed(seed: u64, kernel: &str, chain: usize) -> u64 {
    let k = KERNELS.iter().position(|n| *n == kernel).unwrap_or(0) as u64;
    seed.wrapping_add(1_000_003 * k).wrapping_add(chain as u64)
}

fn run_chain(ctx: &Context, data: &Dataset, kernel: &str, chain: usize) -> CliResult<ChainRun> {
    let (mut posterior, x0, _) = build_posterior(ctx, data)?;
    let h = &ctx.config.hmc;
    let seed = chain_seed(ctx.config.seed, kernel, chain);
    if kernel == "univariate" {
        let iterations = h.univariate_iterations.unwrap_or(h.iterations);
        let cfg = UnivariateConfig {
            iterations,
            warmup: h.warmup.unwrap_or(iterations / 5),
            initial_scale: 0.1,
            target_acceptance: 0.44,
            seed,
            max_seconds: h.max_seconds,
        };
        let out = univariate_baseline_sample(&mut posterior, &x0, &cfg)?;
        let stats = json!({
            "chain": chain,
            "seed": seed,
            "retained": out.samples.len(),
            "warmup": cfg.warmup,
            "acceptance_rate": out.acceptance_rate,
            "density_evaluations": out.density_evaluations,
            "warmup_seconds": out.warmup_seconds,
            "sampling_seconds": out.sampling_seconds,
        });
        return Ok(ChainRun {
            samples: out.samples,
            log_densities: out.log_densities,
            accepted: None,
            stats,
            sampling_seconds: out.sampling_seconds,
        });
    }
    let cfg = HmcConfig {
        step_size: h.step_size,
        leapfrog_steps: h.leapfrog_steps,
        mass: if kernel == "phmc" { MassMode::AdaptiveDiagonal } else { MassMode::Identity },
        adaptation_interval: h.adaptation_interval,
        clamp: Clamp::Relative { lower: h.clamp_lower, upper: h.clamp_upper },
        target_acceptance: h.target_acceptance,
        iterations: h.iterations,
        warmup: ctx.config.warmup(),
        adapt_step_size: true,
        step_jitter: h.step_jitter,
        seed,
        max_seconds: h.max_seconds,
    };
    let out = hmc_sample(&mut posterior, &x0, &cfg)?;
    let stats = json!({
        "chain": chain,
        "seed": seed,
        "retained": out.samples.len(),
        "warmup": cfg.warmup,
        "acceptance_rate": out.acceptance_rate(),
        "step_size": out.step_size,
        "divergences": out.divergences,
        "warmup_divergences": out.warmup_divergences,
        "gradient_evaluations": out.gradient_evaluations,
        "mass": out.mass,
        "warmup_seconds": out.warmup_seconds,
        "sampling_seconds": out.sampling_seconds,
    });
    let sampling_seconds = out.sampling_seconds;
    Ok(ChainRun {
        accepted: Some(out.accepted),
        samples: out.samples,
        log_densities: out.log_densities,
        stats,
        sampling_seconds,
    })
}

/// Runs `chains` chains of one kernel on up to `workers` threads. Chain
/// seeds depend only on the chain index, so results do not depend on the
/// worker count.
fn run_kernel(ctx: &Context, data: &Dataset, kernel: &str, workers: usize) -> CliResult<Vec<ChainRun>> {
    let chains = ctx.config.hmc.chains;
    let workers = workers.clamp(1, chains);
    let mut slots: Vec<Option<CliResult<ChainRun>>> = (0..chains).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || {
                    (w..chains).step_by(workers).map(|c| (c, run_chain(ctx, data, kernel, c))).collect::<Vec<_>>()
                })
            })
            .collect();
        for handle in handles {
            for (c, result) in handle.join().expect("sampler thread panicked") {
                slots[c] = Some(result);
            }
        }
    });
    slots.into_iter().map(|s| s.expect("every chain ran")).collect()
}

pub struct EssRow {
    pub kernel: String,
    pub chains: usize,
    pub retained: usize,
    pub seconds: f64,
    pub min_ess: f64,
    pub median_ess: f64,
}

impl EssRow {
    pub fn min_per_second(&self) -> f64 {
        self.min_ess / self.seconds
    }

    pub fn median_per_second(&self) -> f64 {
        self.median_ess / self.seconds
    }
}

/// ESS of every parameter on its natural scale, summed over chains.
fn ess_row(kernel: &str, runs: &[ChainRun]) -> CliResult<EssRow> {
    let dim = runs[0].samples.first().map_or(0, Vec::len);
    let mut per_param = vec![0.0; dim];
    for run in runs {
        for (i, total) in per_param.iter_mut().enumerate() {
            let col: Vec<f64> = run.samples.iter().map(|s| s[i].exp()).collect();
            let ess = effective_sample_size(&col)
                .map_err(|e| CliError::Run(format!("{kernel}: cannot estimate ESS ({e}); run more iterations")))?;
            *total += ess.ess;
        }
    }
    per_param.sort_by(f64::total_cmp);
    let median = if dim % 2 == 1 {
        per_param[dim / 2]
    } else {
        0.5 * (per_param[dim / 2 - 1] + per_param[dim / 2])
    };
    Ok(EssRow {
        kernel: kernel.to_string(),
        chains: runs.len(),
        retained: runs.iter().map(|r| r.samples.len()).sum(),
        seconds: runs.iter().map(|r| r.sampling_seconds).sum(),
        min_ess: per_param[0],
        median_ess: median,
    })
}

pub fn sample(ctx: &Context, data: &Dataset, workers: usize) -> CliResult<()> {
    let (_, _, names) = build_posterior(ctx, data)?;
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut kernel_meta = Vec::new();
    let mut files = Vec::new();
    for kernel in &ctx.config.hmc.kernels {
        let runs = run_kernel(ctx, data, kernel, workers)?;
        for (c, run) in runs.iter().enumerate() {
            let name = if runs.len() == 1 { format!("samples_{kernel}.csv") } else { format!("samples_{kernel}_chain{c}.csv") };
            let body = samples_csv(&names, &run.samples, &run.log_densities, run.accepted.as_deref());
            files.push(ctx.write(&name, &(ctx.csv_preamble() + &body))?);
        }
        rows.push(ess_row(kernel, &runs)?);
        kernel_meta.push(json!({
            "kernel": kernel,
            "chains": runs.iter().map(|r| r.stats.clone()).collect::<Vec<_>>(),
        }));
    }

    let mut table = ctx.csv_preamble();
    table.push_str("kernel,chains,retained,seconds,min_ess,median_ess,min_ess_per_second,median_ess_per_second\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{},{},{},{},{},{},{},{}",
            r.kernel,
            r.chains,
            r.retained,
            r.seconds,
            r.min_ess,
            r.median_ess,
            r.min_per_second(),
            r.median_per_second()
        );
    }
    files.push(ctx.write("ess.csv", &table)?);

    let ess_json: Vec<Value> = rows
        .iter()
        .map(|r| {
            json!({
                "kernel": r.kernel,
                "chains": r.chains,
                "retained": r.retained,
                "seconds": r.seconds,
                "min_ess": r.min_ess,
                "median_ess": r.median_ess,
                "min_ess_per_second": r.min_per_second(),
                "median_ess_per_second": r.median_per_second(),
            })
        })
        .collect();
    let metadata = json!({
        "config_hash": ctx.hash,
        "seed": ctx.config.seed,
        "schema_version": ctx.config.version,
        "config": ctx.config,
        "parameters": names,
        "workers": workers,
        "wall_seconds": started.elapsed().as_secs_f64(),
        "kernels": kernel_meta,
        "ess": ess_json,
    });
    files.push(ctx.write_json("metadata.json", &metadata)?);

    println!("config_hash {}", ctx.hash);
    println!("{:<12} {:>10} {:>12} {:>12} {:>12} {:>12}", "kernel", "retained", "min_ess", "median_ess", "min_ess/s", "median_ess/s");
    for r in &rows {
        println!(
            "{:<12} {:>10} {:>12.1} {:>12.1} {:>12.3} {:>12.3}",
            r.kernel,
            r.retained,
            r.min_ess,
            r.median_ess,
            r.min_per_second(),
            r.median_per_second()
        );
    }
    for f in files {
        println!("wrote {}", f.display());
    }
    Ok(())
}

pub fn simulate(ctx: &Context, data: &Dataset) -> CliResult<()> {
    let raw = simulate_alignment(
        &data.tree,
        &data.model,
        &data.categories,
        data.tree.branch_lengths(),
        ctx.config.simulate.sites,
        ctx.config.seed,
    )?;
    let text = format!(";config_hash={} seed={}\n{}", ctx.hash, ctx.config.seed, raw.to_fasta());
    let path = ctx.write("simulated.fasta", &text)?;
    println!("config_hash {}", ctx.hash);
    println!("taxa {}", raw.taxa.len());
    println!("sites {}", raw.site_count());
    println!("wrote {}", path.display());
    Ok(())
}

pub fn bench(ctx: &Context) -> CliResult<()> {
    let b = &ctx.config.bench;
    let cfg = BenchmarkConfig {
        sizes: b.sizes.clone(),
        site_count: b.sites,
        shapes: b
            .shapes
            .iter()
            .map(|s| if s == "caterpillar" { TreeShape::Caterpillar } else { TreeShape::Coalescent })
            .collect(),
        min_seconds: b.min_seconds,
        fd_step: b.fd_step,
        seed: ctx.config.seed,
    };
    let report = scaling_benchmark(&cfg)?;
    let bench_path = ctx.write("bench.csv", &(ctx.csv_preamble() + &report.to_csv()))?;
    let speedup_path = ctx.write("speedup.csv", &(ctx.csv_preamble() + &report.speedup_csv()))?;
    println!("config_hash {}", ctx.hash);
    for e in &report.exponents {
        println!("exponent {} {} {:.3}", e.shape.name(), e.method.name(), e.exponent);
    }
    for r in &report.speedups {
        println!("speedup {} n={} {:.1}x", r.shape.name(), r.n, r.speedup);
    }
    println!("wrote {} and {}", bench_path.display(), speedup_path.display());
    Ok(())
}
