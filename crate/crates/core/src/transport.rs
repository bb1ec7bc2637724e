//! Exact discrete optimal transport.
//!
//! Equal-count uniform measures go through a dense Hungarian solver; all
//! other weight vectors use a transportation simplex (MODI potentials on a
//! spanning-tree basis). Both return an optimal [`CouplingPlan`] for the
//! ½|x−y|² ground cost.

use std::collections::VecDeque;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::measures::ParticleMeasure;
use crate::reduce::pairwise_sum;

/// A coupling `π ∈ Π(μ, ν)` stored as sparse `(row, col, mass)` triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingPlan {
    pub row_index: Vec<usize>,
    pub col_index: Vec<usize>,
    pub mass: Vec<f64>,
    /// `Σ mass · ½|x_row − y_col|²`.
    pub cost: f64,
}

impl CouplingPlan {
    pub fn row_marginal(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        for (&i, &m) in self.row_index.iter().zip(&self.mass) {
            out[i] += m;
        }
        out
    }

    pub fn col_marginal(&self, m: usize) -> Vec<f64> {
        let mut out = vec![0.0; m];
        for (&j, &w) in self.col_index.iter().zip(&self.mass) {
            out[j] += w;
        }
        out
    }

    /// Largest marginal violation against the two weight vectors.
    pub fn marginal_error(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.row_marginal(a.len());
        let c = self.col_marginal(b.len());
        r.iter()
            .zip(a)
            .chain(c.iter().zip(b))
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
    }

    /// CSV export with header `row,col,mass`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("row,col,mass\n");
        for ((i, j), m) in self.row_index.iter().zip(&self.col_index).zip(&self.mass) {
            let _ = writeln!(s, "{i},{j},{m:.17e}");
        }
        s
    }
}

/// Ground cost matrix `½|x_i − y_j|²`, row-major.
pub fn half_squared_costs(mu: &ParticleMeasure, nu: &ParticleMeasure) -> Vec<f64> {
    let mut c = Vec::with_capacity(mu.len() * nu.len());
    for x in mu.points() {
        for y in nu.points() {
            c.push(0.5 * (x - y).norm_squared());
        }
    }
    c
}

/// Exact `W₂(μ, ν)` (the square root of the optimal ½-cost) and its plan.
pub fn w2(mu: &ParticleMeasure, nu: &ParticleMeasure) -> Result<(f64, CouplingPlan)> {
    if mu.dim() != nu.dim() {
        return Err(Error::DimensionMismatch { expected: mu.dim(), got: nu.dim() });
    }
    let costs = half_squared_costs(mu, nu);
    let plan = if mu.len() == nu.len() && mu.is_uniform() && nu.is_uniform() {
        assignment_plan(&costs, mu.len())
    } else {
        transport_simplex(mu.weights(), nu.weights(), &costs)?
    };
    Ok((plan.cost.max(0.0).sqrt(), plan))
}

fn assignment_plan(costs: &[f64], n: usize) -> CouplingPlan {
    let perm = hungarian(costs, n);
    let w = 1.0 / n as f64;
    let terms: Vec<f64> = perm.iter().enumerate().map(|(i, &j)| w * costs[i * n + j]).collect();
    CouplingPlan {
        row_index: (0..n).collect(),
        col_index: perm,
        mass: vec![w; n],
        cost: pairwise_sum(&terms),
    }
}

/// Minimum-cost perfect matching on a dense `n × n` matrix; returns the
/// column assigned to each row.
pub fn hungarian(costs: &[f64], n: usize) -> Vec<usize> {
    assert_eq!(costs.len(), n * n);
    if n == 0 {
        return Vec::new();
    }
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = costs[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    assignment
}

#[derive(Clone, Copy)]
struct BasicCell {
    row: usize,
    col: usize,
    flow: f64,
}

/// Transportation simplex for `min Σ c_ij π_ij` subject to row sums `a` and
/// column sums `b` (both summing to one).
pub fn transport_simplex(a: &[f64], b: &[f64], costs: &[f64]) -> Result<CouplingPlan> {
    let n = a.len();
    let m = b.len();
    if n == 0 || m == 0 {
        return Err(Error::EmptyMeasure);
    }
    assert_eq!(costs.len(), n * m);

    let mut basis = northwest_corner(a, b);
    let scale = costs.iter().fold(0.0f64, |acc, c| acc.max(c.abs())).max(1.0);
    let tol = 1e-12 * scale;
    let max_pivots = 50 * (n + m) * (n + m) + 1000;
    let mut degenerate_run = 0usize;

    for _ in 0..max_pivots {
        let (u, v) = potentials(&basis, n, m, costs);
        let in_basis = basis_mask(&basis, n, m);
        // Dantzig's rule, switching to Bland's rule after a long run of
        // degenerate pivots.
        let bland = degenerate_run > 2 * (n + m);
        let mut entering: Option<(usize, usize)> = None;
        let mut best = -tol;
        'scan: for i in 0..n {
            for j in 0..m {
                if in_basis[i * m + j] {
                    continue;
                }
                let r = costs[i * m + j] - u[i] - v[j];
                if r < best {
                    best = r;
                    entering = Some((i, j));
                    if bland {
                        break 'scan;
                    }
                }
            }
        }
        let Some((ei, ej)) = entering else {
            return Ok(plan_from_basis(&basis, costs, m));
        };

        let cycle = tree_path(&basis, n, m, ei, ej);
        // cycle[k] indexes into `basis`; odd positions along the path from
        // column ej back to row ei lose flow.
        let mut theta = f64::INFINITY;
        let mut leave = usize::MAX;
        for (k, &idx) in cycle.iter().enumerate() {
            if k % 2 == 0 && basis[idx].flow < theta {
                theta = basis[idx].flow;
                leave = idx;
            }
        }
        for (k, &idx) in cycle.iter().enumerate() {
            if k % 2 == 0 {
                basis[idx].flow -= theta;
            } else {
                basis[idx].flow += theta;
            }
        }
        if theta <= 0.0 {
            degenerate_run += 1;
        } else {
            degenerate_run = 0;
        }
        basis[leave] = BasicCell { row: ei, col: ej, flow: theta };
    }
    Err(Error::TransportNoConvergence(max_pivots))
}

fn northwest_corner(a: &[f64], b: &[f64]) -> Vec<BasicCell> {
    let (n, m) = (a.len(), b.len());
    let mut supply = a.to_vec();
    let mut demand = b.to_vec();
    let mut basis = Vec::with_capacity(n + m - 1);
    let (mut i, mut j) = (0usize, 0usize);
    while basis.len() < n + m - 1 {
        let f = supply[i].min(demand[j]).max(0.0);
        basis.push(BasicCell { row: i, col: j, flow: f });
        supply[i] -= f;
        demand[j] -= f;
        if i == n - 1 {
            j += 1;
        } else if j == m - 1 {
            i += 1;
        } else if supply[i] <= demand[j] {
            i += 1;
        } else {
            j += 1;
        }
    }
    // The last cell takes whatever rounding left over so marginals close.
    if let Some(last) = basis.last_mut() {
        last.flow = (last.flow + supply[n - 1].max(0.0)).max(0.0);
    }
    basis
}

fn basis_mask(basis: &[BasicCell], n: usize, m: usize) -> Vec<bool> {
    let mut mask = vec![false; n * m];
    for c in basis {
        mask[c.row * m + c.col] = true;
    }
    mask
}

/// Node ids: rows `0..n`, columns `n..n+m`. Returns adjacency as
/// `(neighbor, basis index)` lists.
fn adjacency(basis: &[BasicCell], n: usize, m: usize) -> Vec<Vec<(usize, usize)>> {
    let mut adj = vec![Vec::new(); n + m];
    for (k, c) in basis.iter().enumerate() {
        adj[c.row].push((n + c.col, k));
        adj[n + c.col].push((c.row, k));
    }
    adj
}

fn potentials(basis: &[BasicCell], n: usize, m: usize, costs: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let adj = adjacency(basis, n, m);
    let mut pot = vec![f64::NAN; n + m];
    let mut queue = VecDeque::new();
    pot[0] = 0.0;
    queue.push_back(0usize);
    while let Some(node) = queue.pop_front() {
        for &(next, k) in &adj[node] {
            if pot[next].is_nan() {
                let c = costs[basis[k].row * m + basis[k].col];
                // u_i + v_j = c_ij
                pot[next] = c - pot[node];
                queue.push_back(next);
            }
        }
    }
    let u = pot[..n].to_vec();
    let v = pot[n..].to_vec();
    (u, v)
}

/// Basis cells on the tree path from column `ej` to row `ei`, in order.
fn tree_path(basis: &[BasicCell], n: usize, m: usize, ei: usize, ej: usize) -> Vec<usize> {
    let adj = adjacency(basis, n, m);
    let start = n + ej;
    let mut parent: Vec<Option<(usize, usize)>> = vec![None; n + m];
    let mut seen = vec![false; n + m];
    seen[start] = true;
    let mut queue = VecDeque::from([start]);
    while let Some(node) = queue.pop_front() {
        if node == ei {
            break;
        }
        for &(next, k) in &adj[node] {
            if !seen[next] {
                seen[next] = true;
                parent[next] = Some((node, k));
                queue.push_back(next);
            }
        }
    }
    let mut path = Vec::new();
    let mut node = ei;
    while node != start {
        let (prev, k) = parent[node].expect("basis is a spanning tree");
        path.push(k);
        node = prev;
    }
    path.reverse();
    path
}

fn plan_from_basis(basis: &[BasicCell], costs: &[f64], m: usize) -> CouplingPlan {
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut mass = Vec::new();
    let mut terms = Vec::new();
    let mut cells: Vec<&BasicCell> = basis.iter().filter(|c| c.flow > 0.0).collect();
    cells.sort_by_key(|c| (c.row, c.col));
    for c in cells {
        rows.push(c.row);
        cols.push(c.col);
        mass.push(c.flow);
        terms.push(c.flow * costs[c.row * m + c.col]);
    }
    CouplingPlan { row_index: rows, col_index: cols, mass, cost: pairwise_sum(&terms) }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DVector;

    fn permutations(n: usize) -> Vec<Vec<usize>> {
        if n == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(n - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, n - 1);
                out.push(q);
            }
        }
        out
    }

    #[test]
    fn hungarian_matches_brute_force() {
        let costs = [
            4.0, 1.0, 3.0, 2.5, //
            2.0, 0.0, 5.0, 1.0, //
            3.0, 2.0, 2.0, 0.5, //
            1.0, 4.0, 0.2, 3.0,
        ];
        let n = 4;
        let perm = hungarian(&costs, n);
        let got: f64 = perm.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum();
        let best = permutations(n)
            .into_iter()
            .map(|p| p.iter().enumerate().map(|(i, &j)| costs[i * n + j]).sum::<f64>())
            .fold(f64::INFINITY, f64::min);
        assert!((got - best).abs() < 1e-12);
    }

    #[test]
    fn simplex_agrees_with_assignment_on_uniform_weights() {
        let n = 6;
        let costs: Vec<f64> = (0..n * n).map(|k| ((k * 37 + 11) % 17) as f64 / 3.0).collect();
        let w = vec![1.0 / n as f64; n];
        let lp = transport_simplex(&w, &w, &costs).unwrap();
        let ap = assignment_plan(&costs, n);
        assert!((lp.cost - ap.cost).abs() < 1e-12);
        assert!(lp.marginal_error(&w, &w) < 1e-12);
    }

    #[test]
    fn simplex_handles_unequal_supports() {
        // Two sources, three sinks on a line; unique optimum is monotone.
        let a = [0.5, 0.5];
        let b = [0.2, 0.3, 0.5];
        let xs = [0.0, 1.0];
        let ys = [0.0, 0.5, 1.0];
        let costs: Vec<f64> =
            xs.iter().flat_map(|x| ys.iter().map(move |y| 0.5 * (x - y) * (x - y))).collect();
        let plan = transport_simplex(&a, &b, &costs).unwrap();
        // monotone plan: 0→0 (0.2), 0→0.5 (0.3), 1→1 (0.5)
        let expected = 0.3 * 0.5 * 0.25;
        assert!((plan.cost - expected).abs() < 1e-15);
        assert!(plan.marginal_error(&a, &b) < 1e-14);
    }

    #[test]
    fn dirac_pair() {
        let x = ParticleMeasure::dirac(DVector::from_vec(vec![1.0, 2.0]));
        let y = ParticleMeasure::dirac(DVector::from_vec(vec![-1.0, 0.0]));
        let (d, plan) = w2(&x, &y).unwrap();
        assert!((d * d - 4.0).abs() < 1e-14);
        assert_eq!(plan.mass, vec![1.0]);
    }

    #[test]
    fn plan_csv_has_header() {
        let x = ParticleMeasure::from_pairs_1d(&[(0.0, 0.5), (1.0, 0.5)]).unwrap();
        let (_, plan) = w2(&x, &x).unwrap();
        let csv = plan.to_csv();
        assert!(csv.starts_with("row,col,mass\n"));
        assert_eq!(csv.lines().count(), 3);
    }
}
