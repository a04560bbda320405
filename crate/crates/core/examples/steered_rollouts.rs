//! Trains a vision-only policy and a CPM on scripted demonstrations, then
//! compares unguided and steered success on fresh rollouts.
//!
//! Usage: `steered_rollouts [diffusion|flow] [eta[,eta...]] [window]`

use std::time::Instant;

use tactile_guidance::agent::PolicyAgent;
use tactile_guidance::cpm::{train_cpm, Cpm, CpmConfig, CpmTrainConfig};
use tactile_guidance::data::chunk_samples;
use tactile_guidance::policy::{train_policy, Policy, PolicyConfig, TrainConfig};
use tactile_guidance::schedulers::Family;
use tactile_guidance::sim::{collect_demonstrations, evaluate, ContactSim};
use tactile_guidance::steering::GuidanceConfig;

fn main() -> tactile_guidance::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let family: Family = args.first().map_or(Ok(Family::Flow), |s| s.parse())?;
    let etas: Vec<f64> = args
        .get(1)
        .map_or_else(|| vec![10.0], |s| s.split(',').filter_map(|v| v.parse().ok()).collect());
    let window: f64 = args
        .get(2)
        .and_then(|s| s.parse().ok())
        .unwrap_or(if family == Family::Flow { 0.3 } else { 10.0 });

    let sim = ContactSim::default();
    let demos = collect_demonstrations(&sim, 100, 0)?;
    let config = PolicyConfig {
        family,
        ..Default::default()
    };
    let samples = chunk_samples(&demos, config.horizon, config.action_param)?;
    println!("{} demos, {} chunk samples", demos.len(), samples.len());

    let clock = Instant::now();
    let cache = std::env::temp_dir().join(format!("steered_rollouts_{family}"));
    let policy = match Policy::load(cache.join("policy")) {
        Ok(p) => p,
        Err(_) => {
            let mut policy = Policy::for_samples(config.clone(), &samples, 1)?;
            let curve = train_policy(&mut policy, &samples, &TrainConfig::default(), |_, _| {})?;
            println!(
                "policy: {} steps, loss {:.4} -> {:.4} ({:.1}s)",
                curve.len(),
                curve[0].1,
                curve.last().unwrap().1,
                clock.elapsed().as_secs_f64()
            );
            policy.save(cache.join("policy"))?;
            policy
        }
    };

    let guidance = GuidanceConfig::new(etas[0], window);
    let window_level = guidance.active_steps(policy.schedule());
    let clock = Instant::now();
    let cpm_dir = cache.join(format!("cpm_{window_level}"));
    let cpm = match Cpm::load(&cpm_dir) {
        Ok(c) => c,
        Err(_) => {
            let mut cpm = Cpm::for_samples(CpmConfig::default(), &samples, policy.action_norm.clone(), config.horizon, 2)?;
            let cfg = CpmTrainConfig::default();
            let log = train_cpm(&mut cpm, &samples, policy.schedule(), &cfg.sampler(window_level)?, &cfg, |_| {})?;
            println!(
                "cpm: {} steps, loss {:.4} -> {:.4}, tau {:.4} ({:.1}s)",
                log.len(),
                log[0].loss,
                log.last().unwrap().loss,
                cpm.temperature(),
                clock.elapsed().as_secs_f64()
            );
            cpm.save(&cpm_dir)?;
            cpm
        }
    };

    let clock = Instant::now();
    let base = evaluate(&sim, &PolicyAgent::unguided(&policy), 200, 7, config.execute_steps);
    println!("unguided: {:.3} ({:.1}s)", base.success_rate, clock.elapsed().as_secs_f64());
    for &eta in &etas {
        let clock = Instant::now();
        let guidance = GuidanceConfig::new(eta, window);
        let agent = PolicyAgent::guided(&policy, &cpm, &guidance)?;
        let steered = evaluate(&sim, &agent, 200, 7, config.execute_steps);
        println!(
            "steered (eta {eta}, window {window}): {:.3} ({:.1}s)",
            steered.success_rate,
            clock.elapsed().as_secs_f64()
        );
        if let Some(e) = steered.rollouts.iter().find_map(|r| r.error.as_ref()) {
            println!("first rollout error: {e}");
        }
    }
    Ok(())
}
