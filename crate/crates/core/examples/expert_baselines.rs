//! Success rates of the scripted expert with and without in-hand state, and
//! of a random policy, on the peg-in-slot task.

use tactile_guidance::sim::{evaluate, ContactSim, ExpertPolicy, RandomPolicy};

fn main() {
    let sim = ContactSim::default();
    let n = 1000;
    let full = evaluate(&sim, &ExpertPolicy { sim: &sim, in_hand: true }, n, 7, 1);
    let blind = evaluate(&sim, &ExpertPolicy { sim: &sim, in_hand: false }, n, 7, 1);
    let random = evaluate(
        &sim,
        &RandomPolicy {
            params: sim.params.clone(),
            horizon: 8,
        },
        n,
        7,
        4,
    );
    println!("expert (full state)     success {:.3}  mean steps {:.1}", full.success_rate, full.mean_steps);
    println!("expert (perfect grasp)  success {:.3}  mean steps {:.1}", blind.success_rate, blind.mean_steps);
    println!("random                  success {:.3}", random.success_rate);
}
