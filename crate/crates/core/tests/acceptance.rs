//! Acceptance criteria, each run at its pinned tolerance. Prints one line
//! per criterion and exits nonzero if any fails. Pass criterion ids (e.g.
//! `AC2 AC5`) as arguments to run a subset.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use phylograd::clock::{ClockParameterization, ClockPosterior, ClockPriors, FreeParameters, EPSILON_OFFSET};
use phylograd::inference::{
    effective_sample_size, hmc_sample, kinetic_energy, lbfgs_minimize, leapfrog, samples_csv,
    univariate_baseline_sample, HmcConfig, LbfgsConfig, MassMode, Target, UnivariateConfig,
};
use phylograd::validation::{
    brute_force_likelihood, finite_difference_gradient, finite_difference_hessian_diagonal, log_log_slope,
    scaling_benchmark, BenchmarkConfig, GradientMethod, TreeShape,
};
use phylograd::{compress_patterns, simulate_alignment, Engine, RateCategories, SubstitutionModel, Tree};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

type Outcome = Result<String, String>;

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn ac1_brute_force() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1001);
    let mut worst = 0.0f64;
    for trial in 0..200 {
        let n = 2 + trial % 4;
        let tree = random_tree(&mut rng, n, 0.0..2.0);
        let model = random_model(&mut rng, MODEL_KINDS[trial % 3]);
        let cats = random_categories(&mut rng, if trial % 2 == 0 { 1 } else { 4 });
        let aln = compress_patterns(&random_alignment(&mut rng, &tree, 20));
        let want = brute_force_likelihood(&tree, &aln, &model, &cats).map_err(err)?;
        let got = Engine::new(tree, &aln, model, cats).and_then(|mut e| e.log_likelihood()).map_err(err)?;
        worst = worst.max((got - want).abs());
        check((got - want).abs() <= 1e-12, || format!("instance {trial}: {got} vs {want}"))?;
    }
    let secs = start.elapsed().as_secs_f64();
    check(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("200 instances, max |diff| {worst:.2e}, {secs:.1}s"))
}

fn ac2_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1002);
    let mut worst = 0.0f64;
    for trial in 0..50 {
        let n = rng.random_range(2..=32);
        let cats = if trial % 2 == 0 { 1 } else { 4 };
        let inst = simulated_instance(&mut rng, n, MODEL_KINDS[trial % 3], cats, 300, 0.01..0.5);
        let mut e = inst.engine();
        let g = e.gradient(false).map_err(err)?.branch_gradient;
        let fd = finite_difference_gradient(&mut e, 1e-5).map_err(err)?;
        for (i, (a, b)) in g.iter().zip(&fd.values).enumerate() {
            if (a - b).abs() > 1e-8 {
                worst = worst.max(relative_error(*a, *b));
            }
            check(close(*a, *b, 1e-5, 1e-8), || format!("instance {trial} branch {i}: {a} vs {b}"))?;
        }
    }
    Ok(format!("50 instances, max relative error {worst:.2e}"))
}

fn ac3_hessian() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1003);
    let mut worst = 0.0f64;
    for trial in 0..20 {
        let n = rng.random_range(2..=16);
        let cats = if trial % 2 == 0 { 1 } else { 4 };
        let inst = simulated_instance(&mut rng, n, MODEL_KINDS[trial % 3], cats, 500, 0.02..0.5);
        let mut e = inst.engine();
        let h = e.hessian_diagonal().map_err(err)?;
        let fd = finite_difference_hessian_diagonal(&mut e, 1e-3).map_err(err)?;
        for (i, (a, b)) in h.iter().zip(&fd.values).enumerate() {
            let rel = relative_error(*a, *b);
            worst = worst.max(rel);
            check(rel <= 1e-3, || format!("instance {trial} branch {i}: {a} vs {b}"))?;
        }
    }
    Ok(format!("20 instances, max relative error {worst:.2e}"))
}

fn ac4_scaling() -> Outcome {
    let cfg = BenchmarkConfig::default();
    let report = scaling_benchmark(&cfg).map_err(err)?;
    for r in &report.records {
        match r.method {
            GradientMethod::Analytic => {
                let want = 2 * (2 * r.n as u64 - 1);
                check(r.node_visits == want, || format!("N={}: {} visits, expected {want}", r.n, r.node_visits))?;
            }
            GradientMethod::FiniteDifference => {
                let want = 2 * (2 * r.n - 2);
                check(r.likelihood_evaluations == want, || {
                    format!("N={}: {} evaluations, expected {want}", r.n, r.likelihood_evaluations)
                })?;
            }
        }
    }
    let analytic = report.exponent(TreeShape::Coalescent, GradientMethod::Analytic).unwrap_or(f64::NAN);
    let fd = report.exponent(TreeShape::Coalescent, GradientMethod::FiniteDifference).unwrap_or(f64::NAN);
    check(analytic < 1.3, || format!("analytic exponent {analytic:.3}"))?;
    check(fd > 1.7, || format!("finite-difference exponent {fd:.3}"))?;
    let sizes: Vec<f64> = report.speedups.iter().map(|r| r.n as f64).collect();
    let speedups: Vec<f64> = report.speedups.iter().map(|r| r.speedup).collect();
    let trend = log_log_slope(&sizes, &speedups).map_err(err)?;
    check(trend > 0.0 && speedups.last() > speedups.first(), || format!("speedups {speedups:?} do not grow"))?;
    let listed: Vec<String> = report.speedups.iter().map(|r| format!("{}:{:.0}x", r.n, r.speedup)).collect();
    Ok(format!("exponents analytic {analytic:.2} fd {fd:.2}; speedup {}", listed.join(" ")))
}

/// Coalescent tree on `n` tips whose node times are in substitutions per
/// site under `mu = 1`, scaled to a root-to-tip height of `height`.
fn clock_tree(rng: &mut ChaCha8Rng, n: usize, height: f64) -> Tree {
    let mut tree = Tree::random_coalescent(n, rng).unwrap();
    let times = tree.node_times().unwrap().to_vec();
    let top = times.iter().cloned().fold(0.0, f64::max);
    tree.set_node_times(times.iter().map(|t| t * height / top).collect()).unwrap();
    let durations = tree.branch_durations().unwrap();
    tree.set_branch_lengths(&durations).unwrap();
    tree
}

fn ac5_strict_clock_mle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1005);
    let mut tree = clock_tree(&mut rng, 16, 0.3);
    let model = SubstitutionModel::hky85(2.0, &[0.3, 0.2, 0.2, 0.3]).unwrap();
    let cats = RateCategories::single();
    let truth = tree.branch_lengths().to_vec();
    let raw = simulate_alignment(&tree, &model, &cats, &truth, 10_000, 77).map_err(err)?;
    let aln = compress_patterns(&raw);
    tree.set_branch_lengths(&vec![0.1; truth.len()]).unwrap();
    let mut engine = Engine::new(tree, &aln, model, cats).map_err(err)?;
    let mut objective = |u: &[f64]| {
        let b: Vec<f64> = u.iter().map(|v| v.exp()).collect();
        engine.set_branch_lengths(&b)?;
        let r = engine.gradient(false)?;
        Ok((-r.log_likelihood, r.branch_gradient.iter().zip(&b).map(|(g, b)| -g * b).collect()))
    };
    let cfg = LbfgsConfig { max_iterations: 2000, ..Default::default() };
    let result = lbfgs_minimize(&mut objective, &vec![0.1f64.ln(); truth.len()], &cfg).map_err(err)?;
    let gnorm = result.gradient_inf_norm();
    check(gnorm < 1e-6, || format!("stopped with |g|inf {gnorm:.2e} ({:?})", result.termination))?;
    let mle: Vec<f64> = result.x.iter().map(|v| v.exp()).collect();
    engine.set_branch_lengths(&mle).map_err(err)?;
    let h = engine.hessian_diagonal().map_err(err)?;
    let mut covered = 0;
    let mut missed = Vec::new();
    for (i, ((b, t), hi)) in mle.iter().zip(&truth).zip(&h).enumerate() {
        if *hi < 0.0 && (b - t).abs() <= 3.0 / (-hi).sqrt() {
            covered += 1;
        } else {
            missed.push(i);
        }
    }
    let fraction = covered as f64 / truth.len() as f64;
    check(fraction >= 0.9, || format!("{covered}/{} branches within 3 SE", truth.len()))?;
    Ok(format!(
        "{} iterations, |g|inf {gnorm:.1e}, {covered}/{} branches within 3 SE (outside: {missed:?}; root children {:?})",
        result.iterations,
        truth.len(),
        engine.tree().children(engine.tree().root()).unwrap()
    ))
}

/// Relaxed-clock posterior on simulated data with `mu` and `psi` held at
/// their generating values and only the random effects free.
fn relaxed_clock_problem(seed: u64, n: usize, sites: usize, psi: f64) -> (ClockPosterior, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut tree = clock_tree(&mut rng, n, 0.2);
    let (location, scale) = phylograd::clock::lognormal_hyperparams(psi);
    let lognormal = LogNormal::new(location, scale).unwrap();
    let epsilon: Vec<f64> = (0..tree.branch_count()).map(|_| lognormal.sample(&mut rng)).collect();
    let truth = ClockParameterization::new(1.0, psi, epsilon).unwrap();
    let lengths = phylograd::clock::branch_lengths_from_clock(&tree, &truth).unwrap();
    tree.set_branch_lengths(&lengths).unwrap();
    let model = SubstitutionModel::hky85(2.0, &[0.3, 0.2, 0.2, 0.3]).unwrap();
    let cats = RateCategories::single();
    let raw = simulate_alignment(&tree, &model, &cats, &lengths, sites, rng.random()).unwrap();
    let engine = Engine::new(tree, &compress_patterns(&raw), model, cats).unwrap();
    let mut posterior = ClockPosterior::new(engine, ClockPriors::default(), &truth).unwrap();
    posterior.set_free(FreeParameters::EPSILON_ONLY);
    let x0 = posterior.restrict(&truth.to_unconstrained());
    (posterior, x0)
}

struct Moments {
    mean: f64,
    mean_se: f64,
    var: f64,
    var_se: f64,
}

fn moments(values: &[f64]) -> Result<Moments, String> {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sq: Vec<f64> = values.iter().map(|v| (v - mean).powi(2)).collect();
    let var = sq.iter().sum::<f64>() / n;
    let ess_mean = effective_sample_size(values).map_err(err)?.ess;
    let ess_var = effective_sample_size(&sq).map_err(err)?.ess;
    let sd_sq = (sq.iter().map(|v| (v - var).powi(2)).sum::<f64>() / n).sqrt();
    Ok(Moments { mean, mean_se: (var / ess_mean).sqrt(), var, var_se: sd_sq / ess_var.sqrt() })
}

fn ac6_prior_recovery() -> Outcome {
    let psi: f64 = 0.5;
    let (mut posterior, _) = relaxed_clock_problem(1006, 6, 100, psi);
    posterior.set_likelihood_enabled(false);
    let dim = posterior.dim();
    let x0 = vec![0.0; dim];

    let mut runs: Vec<(&str, Vec<Vec<f64>>)> = Vec::new();
    let uni = univariate_baseline_sample(&mut posterior, &x0, &UnivariateConfig { warmup: 2000, ..UnivariateConfig::new(40_000, 61) })
        .map_err(err)?;
    runs.push(("univariate", uni.samples));
    for (name, mass) in [("vhmc", MassMode::Identity), ("phmc", MassMode::AdaptiveDiagonal)] {
        let cfg = HmcConfig { mass, warmup: 1000, ..HmcConfig::new(10_000, 62) };
        runs.push((name, hmc_sample(&mut posterior, &x0, &cfg).map_err(err)?.samples));
    }
    let want_var = psi * psi;
    let mut worst = 0.0f64;
    for (name, samples) in &runs {
        for i in 0..dim {
            let eps: Vec<f64> = samples.iter().map(|s| s[i].exp()).collect();
            let m = moments(&eps)?;
            let zm = (m.mean - 1.0).abs() / m.mean_se;
            let zv = (m.var - want_var).abs() / m.var_se;
            worst = worst.max(zm).max(zv);
            check(zm <= 3.0, || format!("{name} branch {i}: mean {:.4} (se {:.4})", m.mean, m.mean_se))?;
            check(zv <= 3.0, || format!("{name} branch {i}: variance {:.4} (se {:.4})", m.var, m.var_se))?;
        }
    }

    // integrator checks on the posterior with the likelihood switched on
    let (mut posterior, x0) = relaxed_clock_problem(1016, 12, 500, 0.5);
    let inv_mass = vec![0.05; x0.len()];
    let mut f = |x: &[f64]| posterior.log_density_and_gradient(x);
    let (lp0, g0) = f(&x0).map_err(err)?;
    let p0: Vec<f64> = (0..x0.len()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 2.0).collect();
    let fwd = leapfrog(&mut f, &x0, &p0, &g0, 0.01, 30, &inv_mass).map_err(err)?.ok_or("forward trajectory diverged")?;
    let back_p: Vec<f64> = fwd.p.iter().map(|v| -v).collect();
    let back = leapfrog(&mut f, &fwd.x, &back_p, &fwd.gradient, 0.01, 30, &inv_mass)
        .map_err(err)?
        .ok_or("reverse trajectory diverged")?;
    let reversal = back
        .x
        .iter()
        .zip(&x0)
        .map(|(a, b)| (a - b).abs())
        .chain(back.p.iter().zip(&p0).map(|(a, b)| (a + b).abs()))
        .fold(0.0, f64::max);
    check(reversal < 1e-10, || format!("reversal error {reversal:.2e}"))?;

    let h0 = -lp0 + kinetic_energy(&p0, &inv_mass);
    let mut errors = Vec::new();
    for step in [0.004, 0.002, 0.001] {
        let steps = (0.2 / step) as usize;
        let end = leapfrog(&mut f, &x0, &p0, &g0, step, steps, &inv_mass).map_err(err)?.ok_or("diverged")?;
        errors.push((-end.log_density + kinetic_energy(&end.p, &inv_mass) - h0).abs());
    }
    let orders: Vec<f64> = errors.windows(2).map(|w| (w[0] / w[1]).log2()).collect();
    check(orders.iter().all(|o| (o - 2.0).abs() < 0.2), || format!("energy errors {errors:?}"))?;
    Ok(format!(
        "{dim} branches x 3 kernels, worst |z| {worst:.2}; reversal {reversal:.1e}; energy order {:.2}/{:.2}",
        orders[0], orders[1]
    ))
}

/// Smallest ESS over the branch rates `mu * eps_i`.
fn min_rate_ess(samples: &[Vec<f64>]) -> Result<f64, String> {
    let mut worst = f64::INFINITY;
    for i in 0..samples[0].len() {
        let col: Vec<f64> = samples.iter().map(|s| s[i].exp()).collect();
        worst = worst.min(effective_sample_size(&col).map_err(err)?.ess);
    }
    Ok(worst)
}

fn ac7_efficiency() -> Outcome {
    // sampling budget per kernel; warm-ups are sized to take similar time
    const BUDGET: f64 = 40.0;
    let (mut posterior, x0) = relaxed_clock_problem(1007, 64, 2000, 1.0);
    let mut rates = Vec::new();
    let mut detail = Vec::new();

    let cfg = UnivariateConfig { warmup: 100, max_seconds: Some(BUDGET), ..UnivariateConfig::new(usize::MAX, 71) };
    let chain = univariate_baseline_sample(&mut posterior, &x0, &cfg).map_err(err)?;
    rates.push(min_rate_ess(&chain.samples)? / chain.sampling_seconds);
    detail.push(format!("univariate {:.2}/s ({} sweeps)", rates[0], chain.samples.len()));

    for (name, mass) in [("vhmc", MassMode::Identity), ("phmc", MassMode::AdaptiveDiagonal)] {
        let cfg = HmcConfig { mass, warmup: 200, max_seconds: Some(BUDGET), ..HmcConfig::new(usize::MAX, 72) };
        let chain = hmc_sample(&mut posterior, &x0, &cfg).map_err(err)?;
        rates.push(min_rate_ess(&chain.samples)? / chain.sampling_seconds);
        detail.push(format!("{name} {:.2}/s ({} iterations)", rates[rates.len() - 1], chain.samples.len()));
    }
    let (uni, vhmc, phmc) = (rates[0], rates[1], rates[2]);
    let summary = format!("min-ESS/s {}", detail.join(", "));
    check(phmc >= vhmc && vhmc >= uni, || format!("ordering violated: {summary}"))?;
    check(phmc >= 2.0 * uni, || format!("preconditioned below twice the baseline: {summary}"))?;
    Ok(summary)
}

fn ac8_determinism() -> Outcome {
    let mut outputs = Vec::new();
    for seed in [5, 5, 6] {
        let (mut p, x0) = relaxed_clock_problem(1008, 10, 300, 0.5);
        let names: Vec<String> = p.free_indices().iter().map(|i| format!("log_eps_{}", i - EPSILON_OFFSET)).collect();
        let cfg = HmcConfig { mass: MassMode::AdaptiveDiagonal, ..HmcConfig::new(200, seed) };
        let h = hmc_sample(&mut p, &x0, &cfg).map_err(err)?;
        let u = univariate_baseline_sample(&mut p, &x0, &UnivariateConfig::new(100, seed)).map_err(err)?;
        outputs.push((
            samples_csv(&names, &h.samples, &h.log_densities, Some(&h.accepted)),
            samples_csv(&names, &u.samples, &u.log_densities, None),
        ));
    }
    check(outputs[0] == outputs[1], || "repeated runs with one seed differ".into())?;
    check(outputs[0] != outputs[2], || "different seeds gave identical output".into())?;
    Ok(format!("{} + {} bytes identical across runs", outputs[0].0.len(), outputs[0].1.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, &str, fn() -> Outcome); 8] = [
        ("AC1", "likelihood matches brute-force enumeration", ac1_brute_force),
        ("AC2", "gradient matches finite differences", ac2_gradient),
        ("AC3", "Hessian diagonal matches finite differences", ac3_hessian),
        ("AC4", "linear-time gradient and growing speedup", ac4_scaling),
        ("AC5", "strict-clock MLE recovers simulated branch lengths", ac5_strict_clock_mle),
        ("AC6", "prior-only sampling recovers the random-effect prior", ac6_prior_recovery),
        ("AC7", "preconditioned HMC is the most efficient sampler", ac7_efficiency),
        ("AC8", "sampling is reproducible under a seed", ac8_determinism),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| a.starts_with("AC")).collect();
    let mut failed = 0;
    for (id, title, run) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("[PASS] {id} {title}: {detail} [{secs:.1}s]"),
            Err(detail) => {
                failed += 1;
                println!("[FAIL] {id} {title}: {detail} [{secs:.1}s]");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criterion(s) failed");
        ExitCode::FAILURE
    }
}
