use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use dynhmc::kernels::{
    nuts_exact_pmf, scheme_exact_pmf, transition, HmcScheme, KernelConfig, KernelKind, TransitionInfo,
};
use dynhmc::rng::stream_rng;
use dynhmc::target::{PhasePoint, Target, Vector};
use dynhmc::verify::{self, StepsizeParams, SuiteOptions, SUITES};
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::CliError;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

fn provenance(config: &RunConfig) -> Value {
    json!({"version": VERSION, "config": config})
}

/// Writes `text` to `path`, or to stdout when absent.
fn emit(path: Option<&Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| CliError::io(p, e)),
        None => {
            let mut out = io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| CliError::Io(format!("stdout: {e}")))
        }
    }
}

fn pretty(v: &Value) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("JSON values serialize");
    s.push('\n');
    s
}

/// One chain's draws.
struct ChainRun {
    draws: Vec<(Vector, TransitionInfo)>,
}

fn run_chain(target: &Target, cfg: &KernelConfig, config: &RunConfig, chain: usize) -> Result<ChainRun, CliError> {
    let mut rng = stream_rng(config.seed, chain as u64);
    let mut q = match &config.init {
        Some(v) => Vector::from_column_slice(v),
        None => Vector::zeros(target.dim()),
    };
    let mut draws = Vec::with_capacity(config.iters);
    for _ in 0..config.iters {
        let (next, info) = transition(target, cfg, &q, &mut rng)?;
        q = next;
        draws.push((q.clone(), info));
    }
    Ok(ChainRun { draws })
}

fn write_csv<W: Write>(w: &mut W, dim: usize, runs: &[ChainRun]) -> io::Result<()> {
    write!(w, "chain,iter")?;
    for i in 1..=dim {
        write!(w, ",q{i}")?;
    }
    writeln!(w, ",jf,kf,ngrad,diverged")?;
    for (c, run) in runs.iter().enumerate() {
        for (it, (q, info)) in run.draws.iter().enumerate() {
            write!(w, "{c},{it}")?;
            for x in q.iter() {
                // 17 significant digits: exact round trip for doubles.
                write!(w, ",{x:.16e}")?;
            }
            writeln!(w, ",{},{},{},{}", info.j_f, info.k_f, info.n_grad, info.diverged as u8)?;
        }
    }
    w.flush()
}

pub fn cmd_sample(config: &RunConfig) -> Result<(), CliError> {
    let (target, cfg) = config.validate_sampling()?;
    let start = Instant::now();
    let runs: Vec<ChainRun> = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&target, &cfg, config, c))
        .collect::<Result<_, _>>()?;
    let wall = start.elapsed().as_secs_f64();

    let dim = target.dim();
    match &config.out {
        Some(p) => {
            let f = File::create(p).map_err(|e| CliError::io(p, e))?;
            write_csv(&mut BufWriter::new(f), dim, &runs).map_err(|e| CliError::io(p, e))?;
        }
        None => write_csv(&mut BufWriter::new(io::stdout().lock()), dim, &runs)
            .map_err(|e| CliError::Io(format!("stdout: {e}")))?,
    }

    let n = (config.chains * config.iters) as f64;
    let mut mean = vec![0.0; dim];
    let mut sq = vec![0.0; dim];
    let mut depth: BTreeMap<u32, usize> = BTreeMap::new();
    let (mut grads, mut divergences, mut accepted, mut proposals) = (0u64, 0usize, 0usize, 0usize);
    for (q, info) in runs.iter().flat_map(|r| &r.draws) {
        for i in 0..dim {
            mean[i] += q[i] / n;
            sq[i] += q[i] * q[i] / n;
        }
        *depth.entry(info.k_f).or_default() += 1;
        grads += info.n_grad;
        divergences += info.diverged as usize;
        if let Some(a) = info.accepted {
            proposals += 1;
            accepted += a as usize;
        }
    }
    let variance: Vec<f64> = (0..dim)
        .map(|i| (sq[i] - mean[i] * mean[i]) * n / (n - 1.0).max(1.0))
        .collect();
    let mut summary = provenance(config);
    summary["draws"] = json!(n as u64);
    summary["dim"] = json!(dim);
    summary["depth_histogram"] = json!(depth);
    summary["divergences"] = json!(divergences);
    summary["acceptance_rate"] = if proposals > 0 {
        json!(accepted as f64 / proposals as f64)
    } else {
        Value::Null
    };
    summary["moments"] = json!({"mean": mean, "variance": variance});
    summary["grad_evals"] = json!(grads);
    summary["wall_time_s"] = json!(wall);
    summary["grad_evals_per_s"] = json!(grads as f64 / wall.max(1e-9));
    let text = pretty(&summary);
    match config.summary_path() {
        Some(p) => emit(Some(&p), &text),
        None => {
            eprint!("{text}");
            Ok(())
        }
    }
}

pub fn cmd_verify(config: &RunConfig) -> Result<(), CliError> {
    if !SUITES.contains(&config.suite.as_str()) {
        return Err(CliError::config(format!(
            "suite: unknown suite `{}`; expected one of {}",
            config.suite,
            SUITES.join(", ")
        )));
    }
    let opts = SuiteOptions {
        seed: config.seed,
        mutation: config.kernel.mutation,
    };
    let reports = verify::run_suite(&config.suite, &opts)?;
    for r in &reports {
        eprintln!("{}", r.summary());
    }
    let pass = reports.iter().all(|r| r.pass);
    let mut doc = provenance(config);
    doc["pass"] = json!(pass);
    doc["reports"] = json!(reports);
    emit(config.out.as_deref(), &pretty(&doc))?;
    if pass {
        Ok(())
    } else {
        let failed: Vec<String> = reports
            .iter()
            .filter(|r| !r.pass)
            .map(|r| format!("{} (violation {:e} > {:e})", r.check, r.violation, r.tolerance))
            .collect();
        Err(CliError::Failed(failed.join("; ")))
    }
}

/// Tolerance on the total mass of an enumerated law.
pub const PMF_SUM_TOLERANCE: f64 = 1e-12;

pub fn cmd_pmf(config: &RunConfig) -> Result<(), CliError> {
    let target = config.build_target()?;
    let cfg = config.kernel.build(target.dim())?;
    let phase = config
        .phase
        .as_ref()
        .ok_or_else(|| CliError::config("phase: give `phase.q` and `phase.p` (or --q and --p)"))?;
    let x0 = PhasePoint::from_slices(&phase.q, &phase.p).map_err(|e| CliError::config(format!("phase: {e}")))?;
    if x0.dim() != target.dim() {
        return Err(CliError::config(format!(
            "phase: expected {} coordinates, got {}",
            target.dim(),
            x0.dim()
        )));
    }
    let pmf = match &cfg.kind {
        KernelKind::NutsIterative | KernelKind::NutsRecursive => nuts_exact_pmf(&target, &cfg, &x0)?,
        KernelKind::Hmc { steps } => scheme_exact_pmf(&HmcScheme { steps: *steps }, &target, cfg.params(), &x0)?,
        KernelKind::Rhmc { .. } => return Err(CliError::config("kernel.kind: pmf supports nuts and hmc kernels")),
    };
    let total = pmf.total();
    let ok = (total - 1.0).abs() <= PMF_SUM_TOLERANCE;
    let mut doc = provenance(config);
    doc["pmf"] = json!(pmf);
    doc["total"] = json!(total);
    doc["total_within_tolerance"] = json!(ok);
    emit(config.out.as_deref(), &pretty(&doc))?;
    eprintln!("sum of probabilities {total:.17} ({})", if ok { "ok" } else { "FAILED" });
    if ok {
        Ok(())
    } else {
        Err(CliError::Failed(format!("probabilities sum to {total}")))
    }
}

/// Step-size inputs: the `conditions` block when present, otherwise the
/// kernel's `h` and `K_m` with the target's constants.
pub fn stepsize_params(config: &RunConfig) -> Result<StepsizeParams, CliError> {
    if let Some(p) = config.conditions {
        return Ok(p);
    }
    let target = config.build_target()?;
    let mass = config.kernel.mass.build(target.dim()).map_err(|e| CliError::config(format!("kernel.mass: {e}")))?;
    let c = target.constants();
    Ok(StepsizeParams {
        h: config.kernel.h,
        l1: target.lipschitz_for(&mass),
        k_m: Some(config.kernel.k_m),
        steps: config.kernel.steps,
        m1: c.m1,
        a1: c.a1,
    })
}

fn verdict(v: &verify::Verdict) -> &'static str {
    if v.holds {
        "PASS"
    } else {
        "FAIL"
    }
}

pub fn cmd_conditions(params: StepsizeParams, config: &RunConfig) -> Result<(), CliError> {
    let report = verify::stepsize_conditions(params)?;
    if let Some(v) = &report.h2 {
        println!("H2 (exponent 2^K_m): {} (lhs {:.6}, required < {})", verdict(v), v.lhs, v.rhs);
    }
    if let Some(v) = &report.contraction {
        println!("contraction L1 h^2 < 2(1 - cos(pi/T)): {} (lhs {:.6}, rhs {:.6})", verdict(v), v.lhs, v.rhs);
    }
    if let Some(t) = &report.theta {
        match t.h_max {
            Some(h) => println!("tail bound: S_bar {:.6}{} -> h <= {h:.6}", t.s_bar, if t.capped { " (scan cap)" } else { "" }),
            None => println!("tail bound: S_bar {:.6}{}", t.s_bar, if t.capped { " (scan cap)" } else { "" }),
        }
    }
    if let Some(p) = &config.out {
        let mut doc = provenance(config);
        doc["conditions"] = json!(report);
        emit(Some(p), &pretty(&doc))?;
    }
    Ok(())
}

pub fn cmd_bench(config: &RunConfig) -> Result<(), CliError> {
    if config.iters == 0 {
        return Err(CliError::config("iters: must be positive"));
    }
    let hmc_steps = config.kernel.steps.unwrap_or(16);
    let weights = config.kernel.weights.clone().unwrap_or_else(|| vec![1.0 / 16.0; 16]);
    let kinds = [
        ("nuts_iterative", KernelKind::NutsIterative),
        ("nuts_recursive", KernelKind::NutsRecursive),
        ("hmc", KernelKind::Hmc { steps: hmc_steps }),
        ("rhmc", KernelKind::Rhmc { weights }),
    ];
    println!("{:<16} {:>6} {:>10} {:>14} {:>14}", "kernel", "dim", "steps", "steps/s", "grad evals/s");
    let mut rows = Vec::new();
    for &dim in &config.bench.dims {
        if dim == 0 {
            return Err(CliError::config("bench.dims: dimensions must be positive"));
        }
        let target = Target::standard_gaussian(dim);
        for (name, kind) in &kinds {
            let mass = config.kernel.mass.build(dim).map_err(|e| CliError::config(format!("kernel.mass: {e}")))?;
            let cfg = KernelConfig::new(config.kernel.h, config.kernel.k_m, mass, kind.clone())
                .map_err(|e| CliError::config(format!("kernel: {e}")))?;
            let mut rng = stream_rng(config.seed, 0);
            let mut q = Vector::zeros(dim);
            let mut grads = 0u64;
            let start = Instant::now();
            for _ in 0..config.iters {
                let (next, info) = transition(&target, &cfg, &q, &mut rng)?;
                q = next;
                grads += info.n_grad;
            }
            let secs = start.elapsed().as_secs_f64().max(1e-9);
            let steps_per_s = config.iters as f64 / secs;
            let grads_per_s = grads as f64 / secs;
            println!("{name:<16} {dim:>6} {:>10} {steps_per_s:>14.1} {grads_per_s:>14.1}", config.iters);
            rows.push(json!({"kernel": name, "dim": dim, "steps": config.iters, "seconds": secs, "steps_per_s": steps_per_s, "grad_evals_per_s": grads_per_s}));
        }
    }
    if let Some(p) = &config.out {
        let mut doc = provenance(config);
        doc["bench"] = json!(rows);
        emit(Some(p), &pretty(&doc))?;
    }
    Ok(())
}
