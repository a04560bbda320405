//! Runs the numerical self-checks with a configurable Monte Carlo budget
//! and prints one line per check group.
//!
//! Usage: `math_checks [mc_samples] [--mutate]`

use tactile_guidance::steering::FlowCoefficient;
use tactile_guidance::validate::{run_math_checks, MathCheckOptions};

fn main() -> tactile_guidance::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut opts = MathCheckOptions {
        mc_samples: 100_000,
        ..Default::default()
    };
    if let Some(n) = args.iter().find_map(|a| a.parse().ok()) {
        opts.mc_samples = n;
    }
    if args.iter().any(|a| a == "--mutate") {
        // the plain time coefficient under-steers and should fail
        opts.coefficient = FlowCoefficient::Time;
    }
    let report = run_math_checks(&opts)?;
    for line in report.lines() {
        println!("{line}");
    }
    for c in report.checks.iter().filter(|c| c.group.ends_with("_info")) {
        println!("  {} {} = {:.4}", c.group, c.name, c.value);
    }
    println!("{} of {} checks failed", report.failures(), report.checks.len());
    Ok(())
}
