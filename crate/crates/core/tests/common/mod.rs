#![allow(dead_code)]

use std::path::PathBuf;

/// Exact balanced transport cost by vertex enumeration: every basic feasible
/// solution of the transportation polytope is supported on a spanning tree
/// of the complete bipartite graph, whose flows follow by leaf peeling.
pub fn lp_transport_cost(cost: &[f64], mu_s: &[f64], mu_t: &[f64]) -> f64 {
    let (n, m) = (mu_s.len(), mu_t.len());
    let cells = n * m;
    let edges = n + m - 1;
    let mut best = f64::INFINITY;
    let mut subset: Vec<usize> = (0..edges).collect();
    loop {
        if let Some(flow) = tree_flow(&subset, n, m, mu_s, mu_t) {
            if flow.iter().all(|&(_, f)| f >= -1e-12) {
                let c: f64 = flow.iter().map(|&(e, f)| cost[e] * f).sum();
                best = best.min(c);
            }
        }
        let mut i = edges;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if subset[i] < cells - edges + i {
                break;
            }
        }
        subset[i] += 1;
        for k in i + 1..edges {
            subset[k] = subset[k - 1] + 1;
        }
    }
}

fn tree_flow(subset: &[usize], n: usize, m: usize, mu_s: &[f64], mu_t: &[f64]) -> Option<Vec<(usize, f64)>> {
    let nodes = n + m;
    let mut parent: Vec<usize> = (0..nodes).collect();
    fn root(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &e in subset {
        let (a, b) = (root(&mut parent, e / m), root(&mut parent, n + e % m));
        if a == b {
            return None;
        }
        parent[a] = b;
    }
    let mut supply: Vec<f64> = mu_s.iter().chain(mu_t).copied().collect();
    let mut degree = vec![0usize; nodes];
    for &e in subset {
        degree[e / m] += 1;
        degree[n + e % m] += 1;
    }
    let mut open: Vec<bool> = vec![true; subset.len()];
    let mut flow = Vec::with_capacity(subset.len());
    for _ in 0..subset.len() {
        let (k, leaf) = subset.iter().enumerate().filter(|(k, _)| open[*k]).find_map(|(k, &e)| {
            let (r, c) = (e / m, n + e % m);
            if degree[r] == 1 {
                Some((k, r))
            } else if degree[c] == 1 {
                Some((k, c))
            } else {
                None
            }
        })?;
        let e = subset[k];
        let other = if leaf < n { n + e % m } else { e / m };
        let f = supply[leaf];
        supply[other] -= f;
        supply[leaf] = 0.0;
        degree[leaf] -= 1;
        degree[other] -= 1;
        open[k] = false;
        flow.push((e, f));
    }
    Some(flow)
}

pub fn demo_config() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("assets/demo.json")
}
