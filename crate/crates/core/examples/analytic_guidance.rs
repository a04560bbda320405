//! Exact-classifier steering on a 1D two-class mixture: target-class mass,
//! moments and KS distance to the tempered posterior `p(x) p(y|x)^eta`
//! for several scales and path resolutions.
//!
//! Usage: `analytic_guidance [flow|diffusion] [samples]`

use tactile_guidance::mixture::analytic_guidance_check;
use tactile_guidance::schedulers::{BetaSchedule, DdpmSchedule, Family, FmPath, NoiseSchedule};
use tactile_guidance::steering::GuidanceConfig;
use tactile_guidance::validate::{benchmark_spec, minority_class};

fn main() -> tactile_guidance::Result<()> {
    let mut args = std::env::args().skip(1);
    let family: Family = args.next().map_or(Ok(Family::Flow), |s| s.parse())?;
    let n: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(10_000);
    let spec = benchmark_spec();
    let label = minority_class(&spec);
    let etas = [0.0, 0.5, 1.0, 2.0, 4.0];
    for steps in [10, 100, 1000] {
        let (schedule, base) = match family {
            Family::Flow => {
                let path = FmPath::new(steps)?;
                let last = 1.0 - path.dt().abs();
                (NoiseSchedule::Flow(path), GuidanceConfig::new(1.0, last))
            }
            Family::Diffusion => (
                NoiseSchedule::Diffusion(DdpmSchedule::new(steps, BetaSchedule::SquaredCosine)?),
                GuidanceConfig::new(1.0, steps as f64),
            ),
        };
        println!("{family:?}, {steps} steps, {n} samples");
        println!("  eta   mass    mean     ref     var     ref     ks");
        for r in analytic_guidance_check(&spec, label, &etas, &schedule, &base, n, 7)? {
            println!(
                "  {:<4}  {:.4}  {:+.3}  {:+.3}  {:.3}  {:.3}  {:.4}",
                r.eta, r.target_mass, r.mean, r.reference_mean, r.variance, r.reference_variance, r.ks
            );
        }
    }
    Ok(())
}
