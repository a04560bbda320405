//! Noise-pretraining and modality ablations of the CPM: held-out retrieval
//! inside the guidance window and steered success for each variant.
//!
//! Usage: `cpm_ablations [diffusion|flow]`

use std::time::Instant;

use tactile_guidance::agent::PolicyAgent;
use tactile_guidance::config::RunConfig;
use tactile_guidance::pipeline::{
    build_datasets, repeated_success, steered_success, train_base_policy, train_cpm_variant, window_retrieval, CpmVariant,
};
use tactile_guidance::schedulers::Family;

fn main() -> tactile_guidance::Result<()> {
    let family: Family = std::env::args().nth(1).map_or(Ok(Family::Flow), |s| s.parse())?;
    let mut cfg = RunConfig::default();
    cfg.scheduler.family = family;
    let data = build_datasets(&cfg)?;
    let clock = Instant::now();
    let (policy, _) = train_base_policy(&cfg, &data.train, |_, _| {})?;
    println!("policy trained in {:.1}s", clock.elapsed().as_secs_f64());
    let base = repeated_success(&cfg, &PolicyAgent::unguided(&policy), |_, _| {})?;
    println!("unguided        success {:.3} ± {:.3}", base.mean, base.sem);
    let guidance = cfg.guidance();
    for variant in [CpmVariant::FULL, CpmVariant::NO_AUGMENT, CpmVariant::VISION_ONLY, CpmVariant::TOUCH_ONLY] {
        let clock = Instant::now();
        let (cpm, _) = train_cpm_variant(&cfg, &policy, &data.train, variant, |_| {})?;
        let retrieval = window_retrieval(&cfg, &cpm, policy.schedule(), &data.test)?;
        let steered = steered_success(&cfg, &policy, &cpm, &guidance)?;
        println!(
            "{:<22} retrieval {:.3}  success {:.3} ± {:.3}  ({:.1}s)",
            variant.label(),
            retrieval,
            steered.mean,
            steered.sem,
            clock.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
