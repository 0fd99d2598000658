//! Relative transforms, calibration, the 6D rotation embedding and pose errors.

use nalgebra::Vector3;
use viewcal::geometry::{
    calibrate, decode_rot6d, encode_rot6d, euler_to_rotation, look_at, pose_error, sample_pose, PoseDistribution,
    RelativeTransform,
};

fn main() -> viewcal::Result<()> {
    let camera = look_at(&Vector3::new(4.0, 0.0, 1.0), &Vector3::zeros(), &Vector3::z())?;
    println!("look-at pose:{}", camera.matrix());

    let rt = RelativeTransform::from_array([0.1, -0.05, 0.2, 0.3, 0.0, -0.1]);
    let r = euler_to_rotation(&rt);
    println!("det R = {:.15}", r.determinant());

    let moved = calibrate(&camera, &rt)?;
    let err = pose_error(&moved, &camera);
    println!("calibrated pose differs by {:.3} deg, {:.3} units", err.rot_deg, err.trans);

    let six = encode_rot6d(&moved.rotation());
    let back = decode_rot6d(&six)?;
    println!("6D round-trip error {:.2e}", (back - moved.rotation()).abs().max());

    let dist = PoseDistribution::default();
    for seed in 0..3 {
        let p = sample_pose(&dist, seed)?;
        println!("sample {seed}: position {:?}", p.position().as_slice());
    }
    Ok(())
}
