//! Per-chunk sampling time with and without CPM steering for a range of
//! guidance windows. Timing does not depend on training, so freshly
//! initialized models are used.
//!
//! Usage: `guidance_latency [diffusion|flow] [trials]`

use tactile_guidance::config::RunConfig;
use tactile_guidance::cpm::{Cpm, CpmGuide};
use tactile_guidance::data::{chunk_samples, condition_vector, stack_rows};
use tactile_guidance::policy::Policy;
use tactile_guidance::schedulers::Family;
use tactile_guidance::sim::{collect_demonstrations, ContactSim};
use tactile_guidance::steering::{latency_probe, GuidanceConfig};

fn main() -> tactile_guidance::Result<()> {
    let mut args = std::env::args().skip(1);
    let family: Family = args.next().map_or(Ok(Family::Flow), |s| s.parse())?;
    let trials: usize = args.next().and_then(|s| s.parse().ok()).unwrap_or(50);
    let mut cfg = RunConfig::default();
    cfg.scheduler.family = family;

    let sim = ContactSim::default();
    let demos = collect_demonstrations(&sim, 5, 0)?;
    let samples = chunk_samples(&demos, cfg.policy.horizon, cfg.policy.action_param)?;
    let policy = Policy::for_samples(cfg.policy_config(), &samples, 1)?;
    let cpm = Cpm::for_samples(cfg.cpm.model.clone(), &samples, policy.action_norm.clone(), cfg.policy.horizon, 2)?;

    let state = sim.reset(3);
    let obs = sim.observe(&state);
    let cond = policy.condition_tensor(&[condition_vector(&obs.visual, state.gripper)])?;
    let vis = stack_rows([obs.visual.as_slice()], &[obs.visual.len()])?;
    let tac = stack_rows([obs.tactile.as_slice()], &[obs.tactile.len()])?;
    let denoiser = policy.conditioned(&cond);

    let base = cfg.guidance();
    let windows: Vec<f64> = match family {
        Family::Flow => vec![0.1, 0.3, 0.5, 0.9],
        Family::Diffusion => vec![5.0, 10.0, 25.0, 50.0],
    };
    println!("window  steps  unguided_ms  guided_ms  overhead_%");
    for window in windows {
        let g = GuidanceConfig { window, ..base.clone() };
        let r = latency_probe(&denoiser, policy.schedule(), || CpmGuide::new(&cpm, &vis, &tac), &g, &policy.chunk_shape(), trials)?;
        println!(
            "{:<7} {:<6} {:<12.3} {:<10.3} {:.1}",
            r.window, r.guided_steps, r.unguided_ms, r.guided_ms, r.overhead_pct
        );
    }
    Ok(())
}
