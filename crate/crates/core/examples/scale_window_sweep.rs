//! Sweeps guidance scale and window for exact-classifier flow steering on
//! the benchmark mixture and reports target-class mass per cell.
//!
//! Usage: `scale_window_sweep [samples]`

use tactile_guidance::mixture::{sample_mixture, summarize};
use tactile_guidance::pipeline::{best_row, sweep_grid};
use tactile_guidance::schedulers::{FmPath, NoiseSchedule};
use tactile_guidance::steering::GuidanceConfig;
use tactile_guidance::validate::{benchmark_spec, minority_class};

fn main() -> tactile_guidance::Result<()> {
    let n: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(5000);
    let spec = benchmark_spec();
    let label = minority_class(&spec);
    let schedule = NoiseSchedule::Flow(FmPath::new(10)?);
    let etas = [0.0, 0.25, 0.5, 1.0, 2.0];
    let windows = [0.1, 0.3, 0.5, 0.9];
    let rows = sweep_grid(&etas, &windows, 3, |eta, window, r| {
        let config = GuidanceConfig::new(eta, window);
        let samples = sample_mixture(&spec, &schedule, Some((&config, label)), n, r as u64)?;
        Ok(summarize(&spec, &samples, label).target_mass)
    })?;
    println!("prior weight of the target class: {:.2}", spec.class_weight(label));
    println!("eta    window  mass    sem");
    for r in &rows {
        println!("{:<6} {:<7} {:.4}  {:.4}", r.eta, r.window, r.mean, r.std_error);
    }
    if let Some(b) = best_row(&rows) {
        println!("best: eta {} window {}", b.eta, b.window);
    }
    Ok(())
}
