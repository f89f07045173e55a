//! Acceptance suite: one line per criterion, non-zero exit if any fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use dynhmc::kernels::Mutation;
use dynhmc::verify::{self, CheckReport, SuiteOptions};
use dynhmc::Result;

struct Outcome {
    pass: bool,
    note: String,
}

fn reports_pass(reports: &[CheckReport]) -> bool {
    reports.iter().all(|r| r.pass && !r.underpowered)
}

fn worst(reports: &[CheckReport]) -> f64 {
    reports.iter().map(|r| r.violation).fold(0.0, f64::max)
}

fn suite(name: &str) -> Result<Vec<CheckReport>> {
    verify::run_suite(name, &SuiteOptions::default())
}

fn detail(r: &CheckReport, key: &str, value: &str, field: &str) -> f64 {
    r.details
        .iter()
        .find(|d| d[key] == value)
        .and_then(|d| d[field].as_f64())
        .unwrap_or(f64::NAN)
}

fn symmetry() -> Result<Outcome> {
    let r = suite("symmetry")?;
    let mismatches: f64 = r.iter().flat_map(|r| &r.details).map(|d| d["mismatches"].as_f64().unwrap()).sum();
    let pairs: f64 = r.iter().flat_map(|r| &r.details).map(|d| d["pairs"].as_f64().unwrap()).sum();
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("{mismatches} dyadic mismatches over {pairs} (J, j) pairs, 1-D and 2-D, K_m = 3"),
    })
}

fn detailed_balance() -> Result<Outcome> {
    let r = suite("detailed_balance")?;
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("worst relative violation {:.2e} over 50 anchors, K_m = 5", worst(&r)),
    })
}

fn accessibility() -> Result<Outcome> {
    let r = suite("accessibility")?;
    let distinct = r[0].details.iter().filter(|d| d["distinct"] == true).count();
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("{} failing pairs on 100 trees ({distinct} with distinct subtree weights)", worst(&r)),
    })
}

fn quadrature() -> Result<Outcome> {
    let r = suite("quadrature")?;
    let var = detail(&r[0], "moment", "variance", "rel_error");
    let mean = detail(&r[0], "moment", "mean", "abs_error");
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!(
            "variance rel error {var:.2e}, mean abs error {mean:.2e} ({} angular pieces x 64 radial nodes)",
            r[0].config["angular_pieces"]
        ),
    })
}

fn invariance() -> Result<Outcome> {
    let clean = suite("invariance")?;
    let mutated = verify::run_suite(
        "invariance",
        &SuiteOptions {
            mutation: Mutation::SkipSwapUniform,
            ..Default::default()
        },
    )?;
    let p = |r: &CheckReport| 10f64.powf(-r.violation);
    Ok(Outcome {
        pass: reports_pass(&clean) && !mutated[0].pass,
        note: format!(
            "min p {:.2e} vs Bonferroni level {:.2e}; mutated kernel min p {:.2e} ({})",
            p(&clean[0]),
            10f64.powf(-clean[0].tolerance),
            p(&mutated[0]),
            if mutated[0].pass { "control NOT rejected" } else { "control rejected" }
        ),
    })
}

fn equivalence() -> Result<Outcome> {
    let r = suite("equivalence")?;
    let min_p = r
        .iter()
        .flat_map(|r| &r.details)
        .map(|d| d["p_value"].as_f64().unwrap())
        .fold(1.0, f64::min);
    let below = r.iter().flat_map(|r| &r.details).filter(|d| d["below_0.001"] == true).count();
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("K_m 1..3 x 100 anchors x 1e5 draws: min p {min_p:.2e}, {below} anchors below 1e-3"),
    })
}

fn leapfrog() -> Result<Outcome> {
    let r = suite("leapfrog")?;
    let rev = detail(&r[0], "property", "reversibility", "max_error");
    let vol = detail(&r[0], "property", "volume", "max_det_error");
    let neg = detail(&r[0], "property", "half_period_negation", "max_error");
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("reversibility {rev:.1e}, |det - 1| {vol:.1e}, half-period negation {neg:.1e}"),
    })
}

fn bvp() -> Result<Outcome> {
    let r = suite("bvp")?;
    let round = detail(&r[0], "property", "round_trip", "max_residual");
    let excess = detail(&r[0], "property", "contraction_rate", "max_excess");
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("round trip {round:.1e}, contraction excess {excess:.1e}, boundary rejected"),
    })
}

fn drift() -> Result<Outcome> {
    let r = suite("drift")?;
    let d = &r[0].details[0];
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!(
            "ratio {:.4}, 99% CI [{:.4}, {:.4}]",
            d["estimate"].as_f64().unwrap(),
            d["ci_low"].as_f64().unwrap(),
            d["ci_high"].as_f64().unwrap()
        ),
    })
}

fn tail() -> Result<Outcome> {
    let r = suite("tail")?;
    let radial = detail(&r[0], "condition", "radial_contraction", "worst_margin");
    let energy = detail(&r[0], "condition", "energy_decrease", "worst_delta_h");
    let flips = detail(&r[0], "condition", "flip_symmetry", "mismatches");
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!(
            "h = {:.4}: worst radial margin {radial:.2}, worst dH {energy:.2}, flip mismatches {flips}",
            r[0].config["h"].as_f64().unwrap()
        ),
    })
}

fn conditions() -> Result<Outcome> {
    let r = suite("conditions")?;
    let lhs: Vec<String> = r[0].details.iter().map(|d| format!("{:.4}", d["lhs"].as_f64().unwrap())).collect();
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!("left-hand sides {} match the expected verdicts", lhs.join(", ")),
    })
}

fn ergodicity() -> Result<Outcome> {
    let r = suite("ergodicity")?;
    let left = detail(&r[1], "mode", "left", "entries");
    let right = detail(&r[1], "mode", "right", "entries");
    Ok(Outcome {
        pass: reports_pass(&r),
        note: format!(
            "Gaussian worst |z| {:.2} (limit 5); double well entries {left} / {right}",
            r[0].violation
        ),
    })
}

type Criterion = (u32, &'static str, u64, fn() -> Result<Outcome>);

const CRITERIA: [Criterion; 12] = [
    (1, "orbit-kernel symmetry", 10, symmetry),
    (2, "per-orbit detailed balance", 30, detailed_balance),
    (3, "two-step accessibility", 30, accessibility),
    (4, "exact stationarity by quadrature", 60, quadrature),
    (5, "statistical invariance", 120, invariance),
    (6, "iterative/recursive equivalence", 120, equivalence),
    (7, "leapfrog structure", 10, leapfrog),
    (8, "fixed-endpoint trajectories", 10, bvp),
    (9, "drift", 60, drift),
    (10, "tail conditions", 30, tail),
    (11, "condition validators", 1, conditions),
    (12, "ergodicity surrogate", 120, ergodicity),
];

fn main() -> ExitCode {
    let mut failed = 0;
    for (n, name, limit, run) in CRITERIA {
        let start = Instant::now();
        let outcome = run();
        let elapsed = start.elapsed();
        let in_time = elapsed < Duration::from_secs(limit);
        let (pass, note) = match outcome {
            Ok(o) => (o.pass && in_time, o.note),
            Err(e) => (false, format!("error: {e}")),
        };
        if !pass {
            failed += 1;
        }
        println!(
            "criterion {n:>2} {} {name}: {note} [{:.1} s, limit {limit} s]",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria passed", CRITERIA.len() - failed, CRITERIA.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
