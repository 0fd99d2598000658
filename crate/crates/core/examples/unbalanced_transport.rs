//! Sweep the marginal penalty of unbalanced transport: as epsilon grows the
//! plan's row sums approach the source masses and the mass approaches 1.

use viewcal::ot::{solve_uot, CostMatrix, MassVector, UotConfig};
use viewcal::rng::SplitMix64;

fn main() -> viewcal::Result<()> {
    let mut rng = SplitMix64::new(7);
    let (n, m) = (6, 4);
    let data: Vec<f64> = (0..n * m).map(|_| rng.uniform(0.0, 1.0)).collect();
    let cost = CostMatrix::from_row_slice(n, m, &data)?;
    let mu_s = MassVector::new(vec![1.0 / n as f64; n])?;
    let mu_t = MassVector::new(vec![0.4, 0.3, 0.2, 0.1])?;

    println!("{:>8} {:>12} {:>12} {:>6}", "epsilon", "|T1 - mu_s|", "mass", "iters");
    for eps in [0.01, 0.1, 1.0, 10.0, 100.0, 1000.0] {
        let cfg = UotConfig { eta: 0.01, epsilon: eps, max_iter: 5_000_000, ..UotConfig::default() };
        let sol = solve_uot(&cost, &mu_s, &mu_t, &cfg)?;
        let gap: f64 = sol.plan.row_sums().iter().zip(mu_s.as_slice()).map(|(a, b)| (a - b).abs()).sum();
        println!("{eps:>8} {gap:>12.3e} {:>12.6} {:>6}", sol.plan.total_mass(), sol.iterations);
    }
    Ok(())
}
