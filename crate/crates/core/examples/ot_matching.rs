//! Match two renderings of a checkerboard-like image with entropic transport
//! and print the heaviest links.

use viewcal::matching::{cosine_cost, extract_features, top_matches, uniform_masses, ImageGrid};
use viewcal::ot::{solve_uot, UotConfig};

fn pattern(shift: usize) -> viewcal::Result<ImageGrid> {
    ImageGrid::from_fn(32, 32, |x, y| {
        let (u, v) = ((x + shift) % 32, y);
        let c = if (u / 8 + v / 8) % 2 == 0 { 0.9 } else { 0.1 };
        [c, u as f64 / 31.0, v as f64 / 31.0]
    })
}

fn main() -> viewcal::Result<()> {
    let source = pattern(0)?;
    let target = pattern(4)?;

    let fs = extract_features(&source, 4, 64)?;
    let ft = extract_features(&target, 4, 64)?;
    let cost = cosine_cost(&fs, &ft)?;
    let mass = uniform_masses(fs.count())?;

    let sol = solve_uot(&cost, &mass, &mass, &UotConfig::balanced(0.005))?;
    println!(
        "{} features, {} iterations, converged {}, objective {:.6}",
        fs.count(),
        sol.iterations,
        sol.converged,
        sol.objective
    );
    println!("plan mass {:.6}", sol.plan.total_mass());

    for link in top_matches(&sol.plan, &fs, &ft, 6)? {
        println!(
            "({:>4.1}, {:>4.1}) -> ({:>4.1}, {:>4.1})  w = {:.4}",
            link.source[0], link.source[1], link.target[0], link.target[1], link.weight
        );
    }
    Ok(())
}
