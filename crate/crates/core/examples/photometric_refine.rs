//! Perturb a camera and pull it back with coarse-to-fine photometric
//! refinement against the image rendered at the true pose.

use viewcal::calib::{refine_pose, RefineConfig};
use viewcal::geometry::{perturb_pose, pose_error, sample_pose, PoseDistribution};
use viewcal::render::{render, Intrinsics, Primitive, RenderConfig, SceneSpec, VoxelField};
use viewcal::rng::SplitMix64;

fn main() -> viewcal::Result<()> {
    let gradient = Some([[0.5, 0.0, 0.0], [0.0, 0.5, 0.0], [0.0, 0.0, 0.5]]);
    let spec = SceneSpec {
        resolution: [32, 32, 32],
        bbox_min: [-1.5; 3],
        bbox_max: [1.5; 3],
        primitives: vec![
            Primitive::Sphere {
                center: [0.4, 0.2, 0.3],
                radius: 0.5,
                color: [0.5; 3],
                density: 30.0,
                color_gradient: gradient,
            },
            Primitive::Sphere {
                center: [-0.4, -0.3, -0.3],
                radius: 0.4,
                color: [0.5; 3],
                density: 30.0,
                color_gradient: gradient,
            },
        ],
    };
    let field = VoxelField::from_scene(&spec)?;
    let intr = Intrinsics { focal: 40.0, width: 32, height: 32 };
    let rcfg = RenderConfig { near: 2.0, far: 6.0, ..RenderConfig::default() };

    let truth = sample_pose(&PoseDistribution::default(), 3)?;
    let target = render(&field, &truth, &intr, &rcfg, 0)?;
    let start = perturb_pose(&truth, &mut SplitMix64::new(11), 8.0, 0.2)?;

    let cfg = RefineConfig { steps: 10, step_size: 0.1, blur: vec![4.0, 2.0, 0.0], ..RefineConfig::default() };
    let out = refine_pose(&field, &start, &target, &intr, &rcfg, &cfg, 0)?;

    let before = pose_error(&start, &truth);
    let after = pose_error(&out.pose, &truth);
    println!("loss      {:.4} -> {:.4}", out.initial_loss, out.final_loss);
    println!("rotation  {:.3} -> {:.3} deg", before.rot_deg, after.rot_deg);
    println!("position  {:.4} -> {:.4}", before.trans, after.trans);
    Ok(())
}
