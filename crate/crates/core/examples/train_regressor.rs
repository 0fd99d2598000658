//! Train the plan-to-transform regressor for a few epochs on rendered pairs
//! and save a checkpoint.

use viewcal::calib::{train_regressor, MatchSettings, TrainConfig};
use viewcal::geometry::PoseDistribution;
use viewcal::ot::UotConfig;
use viewcal::render::{Intrinsics, Primitive, RenderConfig, SceneSpec, VoxelField};

fn main() -> viewcal::Result<()> {
    let spec = SceneSpec {
        resolution: [24, 24, 24],
        bbox_min: [-1.5; 3],
        bbox_max: [1.5; 3],
        primitives: vec![Primitive::Sphere {
            center: [0.3, 0.0, 0.0],
            radius: 0.6,
            color: [0.8, 0.3, 0.2],
            density: 20.0,
            color_gradient: Some([[0.2, 0.0, 0.0], [0.0, 0.4, 0.0], [0.0, 0.0, 0.4]]),
        }],
    };
    let field = VoxelField::from_scene(&spec)?;
    let settings = MatchSettings {
        intrinsics: Intrinsics { focal: 32.0, width: 24, height: 24 },
        render: RenderConfig { n_samples: 32, near: 2.0, far: 6.0, ..RenderConfig::default() },
        grid: 4,
        dim: 64,
        uot: UotConfig::default(),
    };
    let cfg = TrainConfig {
        pairs_per_epoch: 10,
        epochs: 5,
        learning_rate: 1e-3,
        hidden: 32,
        seed: 5,
        pose_distribution: PoseDistribution::default(),
        max_angle_deg: 15.0,
        max_translation: 0.3,
    };
    let out = train_regressor(&field, &settings, &cfg)?;
    for (epoch, loss) in out.epoch_losses.iter().enumerate() {
        println!("epoch {epoch}: loss {loss:.5}");
    }
    let path = std::env::temp_dir().join("viewcal_regressor.ckpt");
    out.regressor.save(&path, cfg.seed, cfg.steps())?;
    println!("checkpoint at {}", path.display());
    Ok(())
}
