//! Collects a few demonstrations, writes them as a dataset, reads them back
//! and shows one action chunk in the frame of its reference pose, before
//! and after moving the whole episode by a rigid transform.

use nalgebra::Vector3;
use tactile_guidance::data::action_chunk;
use tactile_guidance::episode::{load_dataset, save_dataset};
use tactile_guidance::pose::{relative_pose, ActionParam, Se3Pose};
use tactile_guidance::sim::{collect_demonstrations, ContactSim, TASK_NAME};

fn main() -> tactile_guidance::Result<()> {
    let sim = ContactSim::default();
    let episodes = collect_demonstrations(&sim, 5, 1)?;
    let dir = std::env::temp_dir().join("demo_frames");
    let manifest = save_dataset(&dir, TASK_NAME, 1, &episodes)?;
    println!("wrote {} episodes to {} (sha256 {})", manifest.count, dir.display(), manifest.digest());
    let (_, loaded) = load_dataset(&dir)?;
    assert_eq!(loaded, episodes);

    let ep = &loaded[0];
    println!("episode 0: {} steps at {} Hz", ep.len(), ep.meta.rate_hz);
    let chunk = action_chunk(ep, 2, 4, ActionParam::Planar)?;
    for row in chunk.chunks(3) {
        println!("  dx {:+.4}  dy {:+.4}  dyaw {:+.4}", row[0], row[1], row[2]);
    }

    let g = Se3Pose::from_scaled_axis(Vector3::new(0.3, -1.1, 0.7), Vector3::new(2.0, -1.0, 0.5));
    let poses: Vec<Se3Pose> = ep.steps.iter().map(|s| s.pose).collect();
    let moved: Vec<Se3Pose> = poses.iter().map(|p| g.compose(p)).collect();
    let a = relative_pose(&poses, 2)?;
    let b = relative_pose(&moved, 2)?;
    let worst = a.iter().zip(&b).map(|(p, q)| p.max_abs_diff(q)).fold(0.0, f64::max);
    println!("relative poses after a global transform differ by {worst:.2e}");
    Ok(())
}
