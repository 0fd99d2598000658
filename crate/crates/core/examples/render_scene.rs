//! Rasterize a two-sphere scene into a voxel field and render a few views.

use viewcal::geometry::{sample_pose, PoseDistribution};
use viewcal::render::{render, Intrinsics, Primitive, RenderConfig, SceneSpec, VoxelField};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = SceneSpec {
        resolution: [40, 40, 40],
        bbox_min: [-1.5; 3],
        bbox_max: [1.5; 3],
        primitives: vec![
            Primitive::Sphere {
                center: [0.5, 0.0, 0.2],
                radius: 0.5,
                color: [0.85, 0.35, 0.2],
                density: 30.0,
                color_gradient: None,
            },
            Primitive::Box {
                min: [-0.9, -0.4, -0.6],
                max: [-0.2, 0.3, 0.1],
                color: [0.2, 0.45, 0.85],
                density: 30.0,
                color_gradient: None,
            },
        ],
    };
    let field = VoxelField::from_scene(&spec)?;
    let intr = Intrinsics { focal: 48.0, width: 64, height: 64 };
    let cfg = RenderConfig { near: 2.0, far: 6.0, ..RenderConfig::default() };

    let out = std::env::temp_dir().join("viewcal_render_scene");
    std::fs::create_dir_all(&out)?;
    let dist = PoseDistribution::default();
    for i in 0..4 {
        let pose = sample_pose(&dist, i)?;
        let img = render(&field, &pose, &intr, &cfg, 0)?;
        let path = out.join(format!("view_{i}.ppm"));
        img.write_ppm(&path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
