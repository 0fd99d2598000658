//! Entropic optimal transport between two discrete mass vectors.
//!
//! Both the balanced problem (hard marginals) and the unbalanced problem
//! (marginals relaxed by a KL penalty of weight `epsilon`) are solved by
//! Sinkhorn scaling on the dual potentials `u`, `v`, with the plan recovered
//! as `T_ij = exp((u_i + v_j - M_ij) / eta)`.
//!
//! The iteration keeps the potentials in the log domain and only works with
//! bounded scaling factors against an absorbed kernel, so it stays finite for
//! entropy weights well below `0.01` where `exp(-M / eta)` underflows.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Entropy weight used for view matching unless configured otherwise.
pub const DEFAULT_ETA: f64 = 0.005;
/// Marginal-KL weight used unless configured otherwise.
pub const DEFAULT_EPSILON: f64 = 1.0;

/// Scaling factors outside `[1/ABSORB_LIMIT, ABSORB_LIMIT]` are folded back
/// into the potentials and the kernel is rebuilt.
const ABSORB_LIMIT: f64 = 1e100;

/// Nonnegative masses attached to the features of one view.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct MassVector(Vec<f64>);

impl MassVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("mass vector is empty"));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("mass entries must be finite and nonnegative"));
        }
        if values.iter().all(|v| *v == 0.0) {
            return Err(Error::invalid("mass vector has no positive entry"));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.0.iter().sum()
    }
}

/// Pairwise moving cost between source and target features.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("cost matrix is empty"));
        }
        if let Some(bad) = entries.iter().find(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("cost matrix has non-finite entry {bad}")));
        }
        Ok(Self(entries))
    }

    pub fn from_row_slice(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("cost data has {} entries, expected {rows}x{cols}", data.len())));
        }
        Self::new(DMatrix::from_row_slice(rows, cols, data))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }
}

/// Coupling between source rows and target columns.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan(DMatrix<f64>);

impl TransportPlan {
    /// Entries must be finite and nonnegative with positive total mass.
    pub fn new(entries: DMatrix<f64>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("transport plan is empty"));
        }
        if entries.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("transport plan entries must be finite and nonnegative"));
        }
        if entries.sum() <= 0.0 {
            return Err(Error::invalid("transport plan has zero total mass"));
        }
        Ok(Self(entries))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.0
    }

    pub fn nrows(&self) -> usize {
        self.0.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.0.ncols()
    }

    pub fn total_mass(&self) -> f64 {
        self.0.sum()
    }

    /// `T 1`
    pub fn row_sums(&self) -> Vec<f64> {
        self.0.row_iter().map(|r| r.sum()).collect()
    }

    /// `T^T 1`
    pub fn col_sums(&self) -> Vec<f64> {
        self.0.column_iter().map(|c| c.sum()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self(self.0.transpose())
    }

    /// Entries in row-major order.
    pub fn to_row_major(&self) -> Vec<f64> {
        self.0.transpose().as_slice().to_vec()
    }
}

mod epsilon_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(eps: &f64, s: S) -> Result<S::Ok, S::Error> {
        if eps.is_infinite() {
            s.serialize_none()
        } else {
            s.serialize_some(eps)
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}

/// Solver settings. `epsilon = f64::INFINITY` selects the balanced problem
/// (serialized as `null`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UotConfig {
    pub eta: f64,
    #[serde(with = "epsilon_serde", default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_max_iter")]
    pub max_iter: usize,
    #[serde(default = "default_tol")]
    pub tol: f64,
}

fn default_epsilon() -> f64 {
    DEFAULT_EPSILON
}
fn default_max_iter() -> usize {
    5000
}
fn default_tol() -> f64 {
    1e-9
}

impl Default for UotConfig {
    fn default() -> Self {
        Self { eta: DEFAULT_ETA, epsilon: DEFAULT_EPSILON, max_iter: default_max_iter(), tol: default_tol() }
    }
}

impl UotConfig {
    pub fn balanced(eta: f64) -> Self {
        Self { eta, epsilon: f64::INFINITY, ..Self::default() }
    }

    pub fn is_balanced(&self) -> bool {
        self.epsilon == f64::INFINITY
    }

    /// Exponent `epsilon / (epsilon + eta)` of the scaling updates; 1 when balanced.
    pub fn scaling_exponent(&self) -> f64 {
        if self.is_balanced() {
            1.0
        } else {
            self.epsilon / (self.epsilon + self.eta)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta.is_finite()) {
            return Err(Error::invalid(format!("eta must be positive and finite, got {}", self.eta)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::invalid(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be at least 1"));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be positive, got {}", self.tol)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UotSolution {
    pub plan: TransportPlan,
    /// Source potential; `-inf` on zero-mass rows.
    pub dual_u: Vec<f64>,
    /// Target potential; `-inf` on zero-mass columns.
    pub dual_v: Vec<f64>,
    pub objective: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Solves the entropic (un)balanced transport problem
/// `min <T, M> - eta H(T) + eps KL(T1 || mu_s) + eps KL(T^T 1 || mu_t)`.
///
/// Stops when the source potential moves by less than `cfg.tol` (sup norm)
/// in one sweep; in balanced mode the L1 row-marginal error must also be
/// below `cfg.tol`. Hitting `max_iter` is not an error: the last iterate is
/// returned with `converged == false`.
pub fn solve_uot(cost: &CostMatrix, mu_s: &MassVector, mu_t: &MassVector, cfg: &UotConfig) -> Result<UotSolution> {
    cfg.validate()?;
    if cost.nrows() != mu_s.len() || cost.ncols() != mu_t.len() {
        return Err(Error::invalid(format!(
            "cost is {}x{} but masses have lengths {} and {}",
            cost.nrows(),
            cost.ncols(),
            mu_s.len(),
            mu_t.len()
        )));
    }
    let mut state = Scaling::new(cost, mu_s.as_slice(), mu_t.as_slice(), cfg);
    let (iterations, converged) = state.run(cfg.max_iter, cfg.tol);
    let (dual_u, dual_v) = state.potentials();
    let plan = plan_from_duals(&dual_u, &dual_v, cost, cfg.eta)?;
    let objective = uot_objective(&plan, cost, mu_s.as_slice(), mu_t.as_slice(), cfg.eta, cfg.epsilon)?;
    Ok(UotSolution { plan, dual_u, dual_v, objective, iterations, converged })
}

/// Balanced entropic transport: both marginals are hard constraints.
pub fn solve_balanced(
    cost: &CostMatrix,
    mu_s: &MassVector,
    mu_t: &MassVector,
    eta: f64,
    max_iter: usize,
    tol: f64,
) -> Result<UotSolution> {
    let (ms, mt) = (mu_s.total(), mu_t.total());
    if (ms - mt).abs() > 1e-9 {
        return Err(Error::invalid(format!("balanced transport needs equal total masses, got {ms} and {mt}")));
    }
    let cfg = UotConfig { eta, epsilon: f64::INFINITY, max_iter, tol };
    solve_uot(cost, mu_s, mu_t, &cfg)
}

/// `T_ij = exp((u_i + v_j - M_ij) / eta)`.
pub fn plan_from_duals(u: &[f64], v: &[f64], cost: &CostMatrix, eta: f64) -> Result<TransportPlan> {
    if !(eta > 0.0) {
        return Err(Error::invalid(format!("eta must be positive, got {eta}")));
    }
    let m = cost.matrix();
    if u.len() != m.nrows() || v.len() != m.ncols() {
        return Err(Error::invalid("dual vector lengths do not match the cost matrix"));
    }
    let plan = DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| ((u[i] + v[j] - m[(i, j)]) / eta).exp());
    if let Some(((i, j), _)) =
        plan.iter().enumerate().map(|(k, x)| ((k % m.nrows(), k / m.nrows()), x)).find(|(_, x)| !x.is_finite())
    {
        return Err(Error::NumericRange(format!(
            "plan entry ({i}, {j}) overflows f64; keep the potentials in the log domain"
        )));
    }
    if plan.sum() <= 0.0 {
        return Err(Error::NumericRange(
            "every plan entry underflows to zero; keep the potentials in the log domain".into(),
        ));
    }
    TransportPlan::new(plan)
}

/// `<T, M> - eta H(T) + eps KL(T1 || mu_s) + eps KL(T^T 1 || mu_t)` with
/// `H(T) = -sum T_ij (log T_ij - 1)` and `0 log 0 = 0`. The KL terms are
/// dropped when `epsilon` is infinite (balanced problem).
pub fn uot_objective(
    plan: &TransportPlan,
    cost: &CostMatrix,
    mu_s: &[f64],
    mu_t: &[f64],
    eta: f64,
    epsilon: f64,
) -> Result<f64> {
    let (t, m) = (plan.matrix(), cost.matrix());
    if t.shape() != m.shape() || mu_s.len() != t.nrows() || mu_t.len() != t.ncols() {
        return Err(Error::invalid("plan, cost and marginal dimensions disagree"));
    }
    let transport: f64 = t.iter().zip(m.iter()).map(|(a, b)| a * b).sum();
    let neg_entropy: f64 = t.iter().map(|&x| if x > 0.0 { x * (x.ln() - 1.0) } else { 0.0 }).sum();
    let mut total = transport + eta * neg_entropy;
    if epsilon.is_finite() {
        total += epsilon * kl_divergence(&plan.row_sums(), mu_s)?;
        total += epsilon * kl_divergence(&plan.col_sums(), mu_t)?;
    }
    Ok(total)
}

/// Generalized KL divergence `sum a log(a/b) - a + b` for unnormalized masses.
pub fn kl_divergence(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!("KL arguments have lengths {} and {}", a.len(), b.len())));
    }
    let mut total = 0.0;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if x < 0.0 || y < 0.0 {
            return Err(Error::invalid(format!("negative mass at index {i}")));
        }
        if x > 0.0 {
            if y == 0.0 {
                return Err(Error::invalid(format!("KL undefined: a[{i}] = {x} has no support in b")));
            }
            total += x * (x / y).ln() - x + y;
        } else {
            total += y;
        }
    }
    Ok(total)
}

/// Numerically stable `log(sum(exp(x)))`; `-inf` for an empty or all `-inf` input.
fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Sinkhorn state: potentials `f`, `g` absorbed into a kernel
/// `K_ij = exp((f_i + g_j - M_ij) / eta)` plus bounded scalings `a`, `b`.
/// The full potentials are `f + eta ln a` and `g + eta ln b`.
struct Scaling<'a> {
    cost: &'a DMatrix<f64>,
    mu_s: &'a [f64],
    mu_t: &'a [f64],
    eta: f64,
    lambda: f64,
    balanced: bool,
    rows: usize,
    cols: usize,
    f: Vec<f64>,
    g: Vec<f64>,
    a: Vec<f64>,
    b: Vec<f64>,
    /// Row-major absorbed kernel.
    kernel: Vec<f64>,
    decay_f: Vec<f64>,
    decay_g: Vec<f64>,
    scratch: Vec<f64>,
}

impl<'a> Scaling<'a> {
    fn new(cost: &'a CostMatrix, mu_s: &'a [f64], mu_t: &'a [f64], cfg: &UotConfig) -> Self {
        let (rows, cols) = (cost.nrows(), cost.ncols());
        let f = mu_s.iter().map(|&m| if m > 0.0 { 0.0 } else { f64::NEG_INFINITY }).collect();
        let g = mu_t.iter().map(|&m| if m > 0.0 { 0.0 } else { f64::NEG_INFINITY }).collect();
        Self {
            cost: cost.matrix(),
            mu_s,
            mu_t,
            eta: cfg.eta,
            lambda: cfg.scaling_exponent(),
            balanced: cfg.is_balanced(),
            rows,
            cols,
            f,
            g,
            a: vec![1.0; rows],
            b: vec![1.0; cols],
            kernel: vec![0.0; rows * cols],
            decay_f: vec![1.0; rows],
            decay_g: vec![1.0; cols],
            scratch: vec![0.0; cols],
        }
    }

    fn full_f(&self) -> Vec<f64> {
        self.f.iter().zip(&self.a).map(|(f, a)| f + self.eta * a.ln()).collect()
    }

    fn potentials(&self) -> (Vec<f64>, Vec<f64>) {
        let g = self.g.iter().zip(&self.b).map(|(g, b)| g + self.eta * b.ln()).collect();
        (self.full_f(), g)
    }

    /// One exact sweep in the log domain; leaves `a = b = 1` and a fresh kernel.
    fn log_domain_sweep(&mut self) {
        let (_, g_full) = self.potentials();
        let eta = self.eta;
        let mut f_new = vec![f64::NEG_INFINITY; self.rows];
        for (i, fi) in f_new.iter_mut().enumerate() {
            if self.mu_s[i] > 0.0 {
                let lse = log_sum_exp((0..self.cols).map(|j| (g_full[j] - self.cost[(i, j)]) / eta));
                *fi = self.lambda * eta * (self.mu_s[i].ln() - lse);
            }
        }
        let mut g_new = vec![f64::NEG_INFINITY; self.cols];
        for (j, gj) in g_new.iter_mut().enumerate() {
            if self.mu_t[j] > 0.0 {
                let lse = log_sum_exp((0..self.rows).map(|i| (f_new[i] - self.cost[(i, j)]) / eta));
                *gj = self.lambda * eta * (self.mu_t[j].ln() - lse);
            }
        }
        self.f = f_new;
        self.g = g_new;
        self.a.fill(1.0);
        self.b.fill(1.0);
        self.rebuild_kernel();
    }

    fn absorb(&mut self) {
        let eta = self.eta;
        for (f, a) in self.f.iter_mut().zip(self.a.iter_mut()) {
            *f += eta * a.ln();
            *a = 1.0;
        }
        for (g, b) in self.g.iter_mut().zip(self.b.iter_mut()) {
            *g += eta * b.ln();
            *b = 1.0;
        }
        self.rebuild_kernel();
    }

    fn rebuild_kernel(&mut self) {
        let eta = self.eta;
        for i in 0..self.rows {
            let row = &mut self.kernel[i * self.cols..(i + 1) * self.cols];
            for (j, k) in row.iter_mut().enumerate() {
                *k = ((self.f[i] + self.g[j] - self.cost[(i, j)]) / eta).exp();
            }
        }
        let shrink = self.lambda - 1.0;
        for (d, f) in self.decay_f.iter_mut().zip(&self.f) {
            *d = if f.is_finite() { (shrink * f / eta).exp() } else { 1.0 };
        }
        for (d, g) in self.decay_g.iter_mut().zip(&self.g) {
            *d = if g.is_finite() { (shrink * g / eta).exp() } else { 1.0 };
        }
    }

    /// One scaling sweep. Returns `false` if a kernel product left the
    /// positive finite range, in which case nothing was committed.
    fn scaling_sweep(&mut self) -> bool {
        let mut a_new = self.a.clone();
        for i in 0..self.rows {
            if self.mu_s[i] == 0.0 {
                continue;
            }
            let row = &self.kernel[i * self.cols..(i + 1) * self.cols];
            let s: f64 = row.iter().zip(&self.b).map(|(k, b)| k * b).sum();
            let ai = self.scale(self.mu_s[i] / s, self.decay_f[i]);
            if !(s > 0.0 && ai.is_finite() && ai > 0.0) {
                return false;
            }
            a_new[i] = ai;
        }
        self.scratch.fill(0.0);
        for (i, ai) in a_new.iter().enumerate() {
            if self.mu_s[i] == 0.0 {
                continue;
            }
            let row = &self.kernel[i * self.cols..(i + 1) * self.cols];
            for (acc, k) in self.scratch.iter_mut().zip(row) {
                *acc += k * ai;
            }
        }
        let mut b_new = self.b.clone();
        for j in 0..self.cols {
            if self.mu_t[j] == 0.0 {
                continue;
            }
            let s = self.scratch[j];
            let bj = self.scale(self.mu_t[j] / s, self.decay_g[j]);
            if !(s > 0.0 && bj.is_finite() && bj > 0.0) {
                return false;
            }
            b_new[j] = bj;
        }
        self.a = a_new;
        self.b = b_new;
        true
    }

    #[inline]
    fn scale(&self, ratio: f64, decay: f64) -> f64 {
        if self.lambda == 1.0 {
            ratio
        } else {
            ratio.powf(self.lambda) * decay
        }
    }

    fn needs_absorb(&self) -> bool {
        let out = |x: &f64| *x > ABSORB_LIMIT || *x < 1.0 / ABSORB_LIMIT;
        self.a.iter().any(out) || self.b.iter().any(out)
    }

    /// L1 distance between the current plan's row sums and `mu_s`.
    fn row_marginal_error(&self) -> f64 {
        (0..self.rows)
            .map(|i| {
                let row = &self.kernel[i * self.cols..(i + 1) * self.cols];
                let s: f64 = row.iter().zip(&self.b).map(|(k, b)| k * b).sum();
                let r = if self.mu_s[i] == 0.0 { 0.0 } else { self.a[i] * s };
                (r - self.mu_s[i]).abs()
            })
            .sum()
    }

    fn run(&mut self, max_iter: usize, tol: f64) -> (usize, bool) {
        let mut f_prev = self.full_f();
        self.log_domain_sweep();
        for iter in 1..=max_iter {
            if iter > 1 && !self.scaling_sweep() {
                self.log_domain_sweep();
            }
            let f_now = self.full_f();
            let change = f_now
                .iter()
                .zip(&f_prev)
                .filter(|(a, _)| a.is_finite())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            f_prev = f_now;
            if self.needs_absorb() {
                self.absorb();
            }
            if change < tol && (!self.balanced || self.row_marginal_error() <= tol) {
                return (iter, true);
            }
        }
        (max_iter, false)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn masses(v: &[f64]) -> MassVector {
        MassVector::new(v.to_vec()).unwrap()
    }

    #[test]
    fn single_cell_coupling() {
        let m = CostMatrix::from_row_slice(1, 1, &[0.0]).unwrap();
        let cfg = UotConfig { eta: 0.005, epsilon: 10.0, ..Default::default() };
        let sol = solve_uot(&m, &masses(&[1.0]), &masses(&[1.0]), &cfg).unwrap();
        assert!((sol.plan.matrix()[(0, 0)] - 1.0).abs() < 1e-3);
        assert!(sol.converged);
    }

    #[test]
    fn zero_cost_diagonal_dominates() {
        let m = CostMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]).unwrap();
        let cfg = UotConfig { eta: 0.001, epsilon: 100.0, max_iter: 20_000, tol: 1e-9 };
        let sol = solve_uot(&m, &masses(&[0.5, 0.5]), &masses(&[0.5, 0.5]), &cfg).unwrap();
        let t = sol.plan.matrix();
        assert!((t[(0, 0)] - 0.5).abs() < 1e-3, "{t}");
        assert!((t[(1, 1)] - 0.5).abs() < 1e-3);
        assert!(t[(0, 1)] < 1e-6 && t[(1, 0)] < 1e-6);
    }

    #[test]
    fn balanced_identity_cost_concentrates_on_diagonal() {
        let l = 5;
        let m = CostMatrix::new(DMatrix::from_fn(l, l, |i, j| if i == j { 0.0 } else { 1.0 })).unwrap();
        let mu = masses(&vec![1.0 / l as f64; l]);
        let sol = solve_balanced(&m, &mu, &mu, 0.001, 5000, 1e-9).unwrap();
        for i in 0..l {
            assert!(sol.plan.matrix()[(i, i)] >= 0.9 / l as f64);
        }
    }

    #[test]
    fn balanced_support_forced_by_marginals() {
        let m = CostMatrix::from_row_slice(2, 2, &[0.3, 1.7, 0.2, 0.9]).unwrap();
        let sol = solve_balanced(&m, &masses(&[1.0, 0.0]), &masses(&[0.0, 1.0]), 0.01, 100, 1e-12).unwrap();
        let t = sol.plan.matrix();
        assert_eq!(t[(0, 0)], 0.0);
        assert_eq!(t[(1, 0)], 0.0);
        assert_eq!(t[(1, 1)], 0.0);
        assert!((t[(0, 1)] - 1.0).abs() < 1e-12);
        assert!(sol.converged);
    }

    #[test]
    fn balanced_rejects_mass_mismatch() {
        let m = CostMatrix::from_row_slice(1, 1, &[0.0]).unwrap();
        let err = solve_balanced(&m, &masses(&[1.0]), &masses(&[2.0]), 0.1, 10, 1e-9);
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn non_finite_cost_is_rejected() {
        assert!(CostMatrix::from_row_slice(1, 2, &[0.0, f64::NAN]).is_err());
        assert!(CostMatrix::from_row_slice(1, 1, &[f64::INFINITY]).is_err());
    }

    #[test]
    fn max_iter_exhaustion_is_not_an_error() {
        let m = CostMatrix::from_row_slice(2, 2, &[0.0, 0.4, 0.7, 0.1]).unwrap();
        let cfg = UotConfig { eta: 0.01, epsilon: 1.0, max_iter: 2, tol: 1e-15 };
        let sol = solve_uot(&m, &masses(&[0.2, 0.8]), &masses(&[0.6, 0.4]), &cfg).unwrap();
        assert!(!sol.converged);
        assert_eq!(sol.iterations, 2);
    }

    #[test]
    fn plan_from_duals_examples() {
        let zero = CostMatrix::from_row_slice(1, 1, &[0.0]).unwrap();
        let t = plan_from_duals(&[0.0], &[0.0], &zero, 1.0).unwrap();
        assert_eq!(t.matrix()[(0, 0)], 1.0);

        let eta = 0.3;
        let (a, b) = (2.5, 0.4);
        let t = plan_from_duals(&[eta * f64::ln(a)], &[eta * f64::ln(b)], &zero, eta).unwrap();
        assert!((t.matrix()[(0, 0)] - a * b).abs() < 1e-12);
    }

    #[test]
    fn plan_from_duals_elementwise_oracle() {
        let cost = CostMatrix::from_row_slice(2, 2, &[0.13, 0.92, 0.48, 0.05]).unwrap();
        let (u, v, eta) = ([0.021, -0.034], [0.007, 0.044], 0.05);
        let t = plan_from_duals(&u, &v, &cost, eta).unwrap();
        let raw = [0.13, 0.92, 0.48, 0.05];
        for i in 0..2 {
            for j in 0..2 {
                let expect = f64::exp((u[i] + v[j] - raw[2 * i + j]) / eta);
                assert!((t.matrix()[(i, j)] - expect).abs() <= 1e-15 * expect.max(1.0));
            }
        }
    }

    #[test]
    fn plan_from_duals_overflow_is_reported() {
        let cost = CostMatrix::from_row_slice(1, 1, &[0.0]).unwrap();
        let err = plan_from_duals(&[10.0], &[0.0], &cost, 0.001);
        assert!(matches!(err, Err(Error::NumericRange(_))));
    }

    #[test]
    fn objective_single_cell_entropy() {
        let t = TransportPlan::new(DMatrix::from_element(1, 1, 1.0)).unwrap();
        let m = CostMatrix::from_row_slice(1, 1, &[0.0]).unwrap();
        for eta in [0.001, 0.5, 2.0] {
            let obj = uot_objective(&t, &m, &[1.0], &[1.0], eta, 3.0).unwrap();
            assert!((obj + eta).abs() < 1e-15);
        }
    }

    #[test]
    fn objective_matched_marginals_have_no_kl() {
        let t = TransportPlan::new(DMatrix::from_row_slice(2, 2, &[0.1, 0.3, 0.2, 0.4])).unwrap();
        let m = CostMatrix::from_row_slice(2, 2, &[0.5, 1.0, 0.25, 0.0]).unwrap();
        let rs = t.row_sums();
        let cs = t.col_sums();
        let relaxed = uot_objective(&t, &m, &rs, &cs, 0.1, 50.0).unwrap();
        let balanced = uot_objective(&t, &m, &rs, &cs, 0.1, f64::INFINITY).unwrap();
        assert!((relaxed - balanced).abs() < 1e-15);
    }

    #[test]
    fn objective_term_by_term_oracle() {
        let entries = [0.05, 0.2, 0.0, 0.11, 0.3, 0.07];
        let costs = [0.4, 0.9, 1.3, 0.2, 0.6, 1.9];
        let (mu_s, mu_t) = ([0.3, 0.5], [0.2, 0.4, 0.3]);
        let (eta, eps) = (0.02, 0.7);
        let t = TransportPlan::new(DMatrix::from_row_slice(2, 3, &entries)).unwrap();
        let m = CostMatrix::from_row_slice(2, 3, &costs).unwrap();
        let got = uot_objective(&t, &m, &mu_s, &mu_t, eta, eps).unwrap();

        let mut expect = 0.0;
        for k in 0..6 {
            expect += entries[k] * costs[k];
            if entries[k] > 0.0 {
                expect += eta * entries[k] * (entries[k].ln() - 1.0);
            }
        }
        let rows = [entries[0] + entries[1] + entries[2], entries[3] + entries[4] + entries[5]];
        let cols = [entries[0] + entries[3], entries[1] + entries[4], entries[2] + entries[5]];
        for (p, q) in rows.iter().zip(&mu_s).chain(cols.iter().zip(&mu_t)) {
            expect += eps * (p * (p / q).ln() - p + q);
        }
        assert!((got - expect).abs() < 1e-10);
    }

    #[test]
    fn negative_plan_entry_is_rejected() {
        let err = TransportPlan::new(DMatrix::from_row_slice(1, 2, &[0.5, -0.1]));
        assert!(matches!(err, Err(Error::InvalidInput(_))));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), 0.0);
        assert_eq!(kl_divergence(&[0.0], &[1.0]).unwrap(), 1.0);
        let v = kl_divergence(&[2.0, 1.0], &[1.0, 1.0]).unwrap();
        assert!((v - (2.0 * 2f64.ln() - 1.0)).abs() < 1e-15);
        assert!((v - 0.3863).abs() < 1e-4);
        assert!(kl_divergence(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(UotConfig { eta: 0.0, ..Default::default() }.validate().is_err());
        assert!(UotConfig { epsilon: -1.0, ..Default::default() }.validate().is_err());
        assert!(UotConfig { tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(UotConfig { max_iter: 0, ..Default::default() }.validate().is_err());
        assert!(UotConfig::balanced(0.1).validate().is_ok());
    }

    #[test]
    fn balanced_config_round_trips_through_json() {
        let cfg = UotConfig::balanced(0.01);
        let text = serde_json::to_string(&cfg).unwrap();
        assert!(text.contains("\"epsilon\":null"));
        let back: UotConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn mass_vector_invariants() {
        assert!(MassVector::new(vec![]).is_err());
        assert!(MassVector::new(vec![0.0, 0.0]).is_err());
        assert!(MassVector::new(vec![0.5, -0.1]).is_err());
        assert!(MassVector::new(vec![0.0, 1.0]).is_ok());
    }

    fn instance(l: usize) -> impl Strategy<Value = (Vec<f64>, Vec<f64>, Vec<f64>)> {
        (
            prop::collection::vec(0.0..2.0f64, l * l),
            prop::collection::vec(0.05..1.0f64, l),
            prop::collection::vec(0.05..1.0f64, l),
        )
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn plans_are_nonnegative_and_deterministic((c, s, t) in instance(5), eps in 0.1..100.0f64) {
            let m = CostMatrix::from_row_slice(5, 5, &c).unwrap();
            let cfg = UotConfig { eta: 0.02, epsilon: eps, max_iter: 2000, tol: 1e-10 };
            let one = solve_uot(&m, &masses(&s), &masses(&t), &cfg).unwrap();
            let two = solve_uot(&m, &masses(&s), &masses(&t), &cfg).unwrap();
            prop_assert!(one.plan.matrix().iter().all(|x| *x >= 0.0));
            prop_assert_eq!(one, two);
        }

        #[test]
        fn transposed_problem_gives_transposed_plan((c, s, t) in instance(4), eps in 0.5..50.0f64) {
            let m = CostMatrix::from_row_slice(4, 4, &c).unwrap();
            let cfg = UotConfig { eta: 0.1, epsilon: eps, max_iter: 100_000, tol: 1e-14 };
            let fwd = solve_uot(&m, &masses(&s), &masses(&t), &cfg).unwrap();
            let bwd = solve_uot(&m.transpose(), &masses(&t), &masses(&s), &cfg).unwrap();
            let diff = (fwd.plan.matrix() - bwd.plan.matrix().transpose()).amax();
            prop_assert!(diff < 1e-9, "diff {}", diff);
        }

        #[test]
        fn balanced_marginals_hold((c, s, t) in instance(6)) {
            let ts: f64 = t.iter().sum();
            let ss: f64 = s.iter().sum();
            let t: Vec<f64> = t.iter().map(|x| x * ss / ts).collect();
            let m = CostMatrix::from_row_slice(6, 6, &c).unwrap();
            let sol = solve_balanced(&m, &masses(&s), &MassVector::new(t.clone()).unwrap(), 0.05, 20_000, 1e-10).unwrap();
            prop_assert!(sol.converged);
            let rows: f64 = sol.plan.row_sums().iter().zip(&s).map(|(a, b)| (a - b).abs()).sum();
            let cols: f64 = sol.plan.col_sums().iter().zip(&t).map(|(a, b)| (a - b).abs()).sum();
            prop_assert!(rows <= 1e-9 && cols <= 1e-9, "{} {}", rows, cols);
        }
    }
}
