//! Run the full experiment (scene, views, training, calibration, report) on
//! the bundled demo config. Pass a different config path as the first
//! argument and an output directory as the second.

use std::path::PathBuf;
use viewcal::cli::Experiment;

fn main() -> viewcal::Result<()> {
    let mut args = std::env::args().skip(1);
    let config = args
        .next()
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/demo.json"));
    let out = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("viewcal_demo"));

    let exp = Experiment::load(&config, None, Some(out.clone()))?;
    let report = exp.pipeline()?;
    println!("{}", report.to_csv());
    println!(
        "mean rotation {:.3} -> {:.3} deg, translation {:.4} -> {:.4}",
        report.mean_rot_init_deg, report.mean_rot_final_deg, report.mean_trans_init, report.mean_trans_final
    );
    println!("artifacts in {}", out.display());
    Ok(())
}
