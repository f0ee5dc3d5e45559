//! Run configuration: one TOML file drives every subcommand.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

pub const KERNELS: [&str; 3] = ["univariate", "vhmc", "phmc"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Loglik,
    Gradient,
    Optimize,
    Sample,
    Simulate,
    Bench,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Loglik => "loglik",
            Mode::Gradient => "gradient",
            Mode::Optimize => "optimize",
            Mode::Sample => "sample",
            Mode::Simulate => "simulate",
            Mode::Bench => "bench",
        }
    }

    fn needs_alignment(self) -> bool {
        matches!(self, Mode::Loglik | Mode::Gradient | Mode::Optimize | Mode::Sample)
    }

    fn needs_tree(self) -> bool {
        self != Mode::Bench
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    /// When present, the subcommand must match.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mode: Option<Mode>,
    #[serde(default)]
    pub paths: Paths,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub clock: ClockConfig,
    #[serde(default)]
    pub gradient: GradientSettings,
    #[serde(default)]
    pub lbfgs: LbfgsSettings,
    #[serde(default)]
    pub hmc: HmcSettings,
    #[serde(default)]
    pub simulate: SimulateSettings,
    #[serde(default)]
    pub bench: BenchSettings,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub tree: Option<PathBuf>,
    pub alignment: Option<PathBuf>,
    pub output: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self { tree: None, alignment: None, output: PathBuf::from("output") }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// `jc69`, `hky85`, `gtr` or `raw`.
    pub name: String,
    pub kappa: f64,
    /// Stationary frequencies in `A C G T` order; equal when absent.
    pub frequencies: Option<Vec<f64>>,
    /// GTR exchangeabilities `AC AG AT CG CT GT`.
    pub exchangeabilities: Option<Vec<f64>>,
    /// Generator CSV for `raw`, one row per line, used as given.
    pub generator: Option<PathBuf>,
    /// Per-branch generator CSVs keyed by node label (tip name or
    /// `node<index>`); other branches use `generator`.
    pub branch_generators: BTreeMap<String, PathBuf>,
    pub gamma_categories: usize,
    pub gamma_alpha: f64,
    /// `threshold`, `always` or `never`.
    pub rescaling: String,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "jc69".into(),
            kappa: 2.0,
            frequencies: None,
            exchangeabilities: None,
            generator: None,
            branch_generators: BTreeMap::new(),
            gamma_categories: 1,
            gamma_alpha: 1.0,
            rescaling: "threshold".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ClockConfig {
    /// Initial mean rate, in substitutions per site per tree time unit.
    pub mu: f64,
    pub psi: f64,
    /// Initial random effects: one value for every branch, or a table keyed
    /// by node label with unlisted branches at one.
    pub epsilon: EpsilonInit,
    /// Strict clock: random effects fixed at one, only `mu` sampled.
    pub strict: bool,
    /// Any of `mu`, `psi`, `epsilon`.
    pub free: Vec<String>,
    /// Normal prior on `log mu`; flat when both are absent.
    pub mu_prior_location: Option<f64>,
    pub mu_prior_scale: Option<f64>,
    pub psi_prior_mean: f64,
    /// Switch the likelihood off to sample the prior.
    pub likelihood: bool,
}

impl Default for ClockConfig {
    fn default() -> Self {
        Self {
            mu: 1.0,
            psi: 0.5,
            epsilon: EpsilonInit::Scalar(1.0),
            strict: false,
            free: vec!["mu".into(), "psi".into(), "epsilon".into()],
            mu_prior_location: None,
            mu_prior_scale: None,
            psi_prior_mean: 1.0 / 3.0,
            likelihood: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EpsilonInit {
    Scalar(f64),
    PerBranch(BTreeMap<String, f64>),
}

impl EpsilonInit {
    fn values(&self) -> Vec<f64> {
        match self {
            EpsilonInit::Scalar(v) => vec![*v],
            EpsilonInit::PerBranch(m) => m.values().copied().collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradientSettings {
    pub hessian: bool,
}

impl Default for GradientSettings {
    fn default() -> Self {
        Self { hessian: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LbfgsSettings {
    pub memory: usize,
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
}

impl Default for LbfgsSettings {
    fn default() -> Self {
        Self { memory: 10, max_iterations: 1000, gradient_tolerance: 1e-6 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HmcSettings {
    pub kernels: Vec<String>,
    pub iterations: usize,
    /// Defaults to a fifth of `iterations`.
    pub warmup: Option<usize>,
    /// Retained sweeps of the univariate kernel; defaults to `iterations`.
    pub univariate_iterations: Option<usize>,
    pub step_size: f64,
    pub leapfrog_steps: usize,
    pub step_jitter: f64,
    pub adaptation_interval: usize,
    pub target_acceptance: f64,
    pub clamp_lower: f64,
    pub clamp_upper: f64,
    /// Wall-time cap on the sampling phase of each chain.
    pub max_seconds: Option<f64>,
    pub chains: usize,
}

impl Default for HmcSettings {
    fn default() -> Self {
        Self {
            kernels: vec!["phmc".into()],
            iterations: 1000,
            warmup: None,
            univariate_iterations: None,
            step_size: 0.1,
            leapfrog_steps: 20,
            step_jitter: 0.2,
            adaptation_interval: 10,
            target_acceptance: 0.8,
            clamp_lower: 1e-2,
            clamp_upper: 1e2,
            max_seconds: None,
            chains: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulateSettings {
    pub sites: usize,
}

impl Default for SimulateSettings {
    fn default() -> Self {
        Self { sites: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSettings {
    pub sizes: Vec<usize>,
    pub sites: usize,
    /// `coalescent` and/or `caterpillar`.
    pub shapes: Vec<String>,
    pub min_seconds: f64,
    pub fd_step: f64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        Self {
            sizes: vec![64, 128, 256, 512, 1024],
            sites: 1000,
            shapes: vec!["coalescent".into()],
            min_seconds: 0.2,
            fd_step: 1e-5,
        }
    }
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub kernels: Option<Vec<String>>,
    pub iterations: Option<usize>,
}

impl RunConfig {
    /// Parses `text`; relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, Vec<String>> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| vec![e.to_string().trim().to_string()])?;
        let inputs = [config.paths.tree.as_mut(), config.paths.alignment.as_mut(), config.model.generator.as_mut()];
        let branch_inputs = config.model.branch_generators.values_mut().map(Some);
        for path in inputs.into_iter().chain(branch_inputs).flatten() {
            if path.is_relative() {
                *path = base.join(&*path);
            }
        }
        if config.paths.output.is_relative() {
            config.paths.output = base.join(&config.paths.output);
        }
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self, Vec<String>> {
        let text = std::fs::read_to_string(path).map_err(|e| vec![format!("cannot read {}: {e}", path.display())])?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn apply(&mut self, overrides: &Overrides) {
        if let Some(seed) = overrides.seed {
            self.seed = seed;
        }
        if let Some(output) = &overrides.output {
            self.paths.output = output.clone();
        }
        if let Some(kernels) = &overrides.kernels {
            self.hmc.kernels = kernels.clone();
        }
        if let Some(iterations) = overrides.iterations {
            self.hmc.iterations = iterations;
        }
    }

    /// Every problem with the configuration for `mode`, not just the first.
    pub fn validate(&self, mode: Mode) -> Vec<String> {
        let mut problems = Vec::new();
        let mut problem = |ok: bool, message: String| {
            if !ok {
                problems.push(message);
            }
        };
        problem(
            self.version == SCHEMA_VERSION,
            format!("version: expected {SCHEMA_VERSION}, got {}", self.version),
        );
        if let Some(declared) = self.mode {
            problem(
                declared == mode,
                format!("mode: config declares `{}` but `{}` was invoked", declared.name(), mode.name()),
            );
        }
        for (needed, label, path) in [
            (mode.needs_tree(), "paths.tree", &self.paths.tree),
            (mode.needs_alignment(), "paths.alignment", &self.paths.alignment),
        ] {
            if !needed {
                continue;
            }
            match path {
                None => problem(false, format!("{label}: required by `{}`", mode.name())),
                Some(p) => problem(p.is_file(), format!("{label}: {} does not exist", p.display())),
            }
        }

        let m = &self.model;
        problem(
            ["jc69", "hky85", "gtr", "raw"].contains(&m.name.as_str()),
            format!("model.name: unknown model `{}` (jc69, hky85, gtr, raw)", m.name),
        );
        match &m.generator {
            Some(p) => problem(p.is_file(), format!("model.generator: {} does not exist", p.display())),
            None => problem(m.name != "raw", "model.generator: required for raw".into()),
        }
        if !m.branch_generators.is_empty() {
            problem(m.name == "raw", "model.branch_generators: only valid for raw".into());
            problem(mode != Mode::Bench, "model.branch_generators: bench generates its own trees".into());
        }
        for (label, p) in &m.branch_generators {
            problem(p.is_file(), format!("model.branch_generators.{label}: {} does not exist", p.display()));
        }
        problem(m.kappa > 0.0 && m.kappa.is_finite(), format!("model.kappa: must be positive, got {}", m.kappa));
        if let Some(f) = &m.frequencies {
            problem(
                f.len() == 4 && f.iter().all(|v| *v > 0.0) && (f.iter().sum::<f64>() - 1.0).abs() < 1e-6,
                format!("model.frequencies: need four positive values summing to one, got {f:?}"),
            );
        }
        match &m.exchangeabilities {
            Some(r) => problem(
                r.len() == 6 && r.iter().all(|v| *v > 0.0 && v.is_finite()),
                format!("model.exchangeabilities: need six positive values, got {r:?}"),
            ),
            None => problem(m.name != "gtr", "model.exchangeabilities: required for gtr".into()),
        }
        problem(m.gamma_categories >= 1, "model.gamma_categories: must be at least 1".into());
        problem(
            m.gamma_alpha > 0.0 && m.gamma_alpha.is_finite(),
            format!("model.gamma_alpha: must be positive, got {}", m.gamma_alpha),
        );
        problem(
            ["threshold", "always", "never"].contains(&m.rescaling.as_str()),
            format!("model.rescaling: unknown mode `{}` (threshold, always, never)", m.rescaling),
        );

        if mode == Mode::Sample {
            let c = &self.clock;
            problem(c.mu > 0.0 && c.mu.is_finite(), format!("clock.mu: must be positive, got {}", c.mu));
            problem(c.psi > 0.0 && c.psi.is_finite(), format!("clock.psi: must be positive, got {}", c.psi));
            for v in c.epsilon.values() {
                problem(v > 0.0 && v.is_finite(), format!("clock.epsilon: must be positive, got {v}"));
            }
            problem(c.psi_prior_mean > 0.0, format!("clock.psi_prior_mean: must be positive, got {}", c.psi_prior_mean));
            for f in &c.free {
                problem(
                    ["mu", "psi", "epsilon"].contains(&f.as_str()),
                    format!("clock.free: unknown parameter `{f}` (mu, psi, epsilon)"),
                );
            }
            problem(!c.free.is_empty(), "clock.free: nothing to sample".into());
            match (c.mu_prior_location, c.mu_prior_scale) {
                (None, None) => {
                    // a flat prior on log mu needs the likelihood to be proper
                    problem(
                        c.likelihood || !c.free.iter().any(|f| f == "mu"),
                        "clock: sampling mu with the likelihood off needs a mu prior".into(),
                    );
                }
                (Some(_), Some(scale)) => {
                    problem(scale > 0.0, format!("clock.mu_prior_scale: must be positive, got {scale}"))
                }
                _ => problem(false, "clock: give both mu_prior_location and mu_prior_scale, or neither".into()),
            }

            let h = &self.hmc;
            problem(!h.kernels.is_empty(), "hmc.kernels: no kernel requested".into());
            for k in &h.kernels {
                problem(KERNELS.contains(&k.as_str()), format!("hmc.kernels: unknown kernel `{k}` (univariate, vhmc, phmc)"));
            }
            problem(h.iterations >= 4, format!("hmc.iterations: need at least 4, got {}", h.iterations));
            problem(h.step_size > 0.0, format!("hmc.step_size: must be positive, got {}", h.step_size));
            problem(h.leapfrog_steps >= 1, "hmc.leapfrog_steps: must be at least 1".into());
            problem((0.0..1.0).contains(&h.step_jitter), format!("hmc.step_jitter: must lie in [0, 1), got {}", h.step_jitter));
            problem(h.adaptation_interval >= 1, "hmc.adaptation_interval: must be at least 1".into());
            problem(
                h.target_acceptance > 0.0 && h.target_acceptance < 1.0,
                format!("hmc.target_acceptance: must lie in (0, 1), got {}", h.target_acceptance),
            );
            problem(
                h.clamp_lower > 0.0 && h.clamp_lower < h.clamp_upper,
                format!("hmc.clamp_lower/clamp_upper: need 0 < lower < upper, got {} and {}", h.clamp_lower, h.clamp_upper),
            );
            if let Some(s) = h.max_seconds {
                problem(s > 0.0, format!("hmc.max_seconds: must be positive, got {s}"));
            }
            problem(h.chains >= 1, "hmc.chains: must be at least 1".into());
        }
        if mode == Mode::Optimize {
            let l = &self.lbfgs;
            problem(l.memory >= 1, "lbfgs.memory: must be at least 1".into());
            problem(l.max_iterations >= 1, "lbfgs.max_iterations: must be at least 1".into());
            problem(l.gradient_tolerance > 0.0, format!("lbfgs.gradient_tolerance: must be positive, got {}", l.gradient_tolerance));
        }
        if mode == Mode::Simulate {
            problem(self.simulate.sites >= 1, "simulate.sites: must be at least 1".into());
        }
        if mode == Mode::Bench {
            let b = &self.bench;
            problem(b.sizes.len() >= 2, "bench.sizes: need at least two sizes".into());
            problem(b.sizes.iter().all(|n| *n >= 2), format!("bench.sizes: every size must be at least 2, got {:?}", b.sizes));
            problem(b.sites >= 1, "bench.sites: must be at least 1".into());
            problem(!b.shapes.is_empty(), "bench.shapes: need at least one shape".into());
            for s in &b.shapes {
                problem(
                    ["coalescent", "caterpillar"].contains(&s.as_str()),
                    format!("bench.shapes: unknown shape `{s}` (coalescent, caterpillar)"),
                );
            }
            problem(b.fd_step > 0.0, format!("bench.fd_step: must be positive, got {}", b.fd_step));
        }
        problems
    }

    /// SHA-256 of the effective configuration, hex encoded. The output
    /// directory is left out so relocated runs share a hash.
    pub fn hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.paths.output = PathBuf::new();
        let canonical = serde_json::to_string(&hashed).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        let mut out = String::with_capacity(64);
        for byte in digest.iter() {
            let _ = write!(out, "{byte:02x}");
        }
        out
    }

    pub fn warmup(&self) -> usize {
        self.hmc.warmup.unwrap_or(self.hmc.iterations / 5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> RunConfig {
        RunConfig::parse("version = 1\nseed = 3\n", Path::new("/nonexistent")).unwrap()
    }

    #[test]
    fn defaults_fill_missing_blocks() {
        let c = minimal();
        assert_eq!(c.model.name, "jc69");
        assert_eq!(c.hmc.leapfrog_steps, 20);
        assert_eq!(c.warmup(), 200);
        assert_eq!(c.paths.output, Path::new("/nonexistent/output"));
    }

    #[test]
    fn all_problems_are_reported() {
        let text = r#"
            version = 2
            seed = 1
            mode = "optimize"
            [model]
            name = "k80"
            kappa = -1.0
            gamma_alpha = 0.0
            [hmc]
            kernels = ["nuts"]
            step_jitter = 1.5
        "#;
        let c = RunConfig::parse(text, Path::new("/nonexistent")).unwrap();
        let problems = c.validate(Mode::Sample);
        for needle in ["version", "mode", "paths.tree", "paths.alignment", "model.name", "model.kappa", "model.gamma_alpha", "hmc.kernels", "hmc.step_jitter"] {
            assert!(problems.iter().any(|p| p.starts_with(needle)), "{needle} missing from {problems:?}");
        }
    }

    #[test]
    fn unknown_fields_are_rejected() {
        let err = RunConfig::parse("version = 1\nseed = 1\n[model]\nkapa = 2.0\n", Path::new(".")).unwrap_err();
        assert!(err[0].contains("kapa"), "{err:?}");
    }

    #[test]
    fn hash_tracks_content() {
        let a = minimal();
        let mut b = minimal();
        assert_eq!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
        b.apply(&Overrides { output: Some("/elsewhere".into()), ..Default::default() });
        assert_eq!(a.hash(), b.hash());
        b.apply(&Overrides { seed: Some(4), ..Default::default() });
        assert_ne!(a.hash(), b.hash());
    }
}
