//! Value function over scenario-tree controls, the deterministic-time
//! dynamic programming check and a `ρ_F`-Lipschitz diagnostic.

use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::control::{branching, tree_node, tree_size, ControlPath};
use super::flow::{path_cost, path_seed, Estimate, ParticleState};
use super::model::FilterModel;
use crate::error::{Error, Result};
use crate::fourier::{rho_f, QuadratureGrid};
use crate::measures::ParticleMeasure;
use crate::reduce::mean_and_stderr;
use crate::rng::derive_seed;

/// Monte-Carlo settings shared by the value estimators.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McConfig {
    pub n_paths: usize,
    pub n_particles: usize,
    pub dt: f64,
    pub seed: u64,
    /// Cap on `|A|^K × (tree nodes)`.
    #[serde(default = "default_budget")]
    pub node_budget: usize,
}

fn default_budget() -> usize {
    2_000_000
}

impl McConfig {
    pub fn new(n_paths: usize, n_particles: usize, dt: f64, seed: u64) -> Self {
        Self { n_paths, n_particles, dt, seed, node_budget: default_budget() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueEstimate {
    /// Sample-average optimum over scenario-tree controls.
    pub v_hat: f64,
    /// Standard error of the per-path costs under the selected policy.
    pub std_error: f64,
    /// Best open-loop sample average and its control sequence.
    pub open_loop_value: f64,
    pub open_loop_best: Vec<usize>,
    /// `open_loop_value − v_hat ≥ 0`.
    pub gap_bound: f64,
    pub policy: ControlPath,
    pub n_sequences: usize,
}

/// Sequence `s ∈ A^K` with index `idx`, first stage most significant.
fn decode(mut idx: usize, a: usize, k: usize) -> Vec<usize> {
    let mut out = vec![0; k];
    for slot in out.iter_mut().rev() {
        *slot = idx % a;
        idx /= a;
    }
    out
}

struct TreeDp<'a> {
    a: usize,
    b: usize,
    k: usize,
    /// `costs[s][p]`.
    costs: &'a [Vec<f64>],
    histories: &'a [Vec<usize>],
    choice: HashMap<(usize, usize), usize>,
}

impl TreeDp<'_> {
    /// Smallest total cost over the subtree at `history` among `paths`, with
    /// the earlier stages fixed to `prefix` (an index in `A^{len}`).
    fn solve(&mut self, history: &[usize], prefix: usize, paths: &[usize]) -> f64 {
        let stage = history.len();
        if stage == self.k {
            return paths.iter().map(|&p| self.costs[prefix][p]).sum();
        }
        let mut split: Vec<Vec<usize>> = vec![Vec::new(); self.b];
        for &p in paths {
            split[self.histories[p][stage]].push(p);
        }
        let mut best = (f64::INFINITY, 0);
        for a in 0..self.a {
            let next = prefix * self.a + a;
            let mut total = 0.0;
            for (br, members) in split.iter().enumerate() {
                if members.is_empty() {
                    continue;
                }
                let mut h = history.to_vec();
                h.push(br);
                total += self.solve(&h, next, members);
            }
            if total < best.0 {
                best = (total, a);
            }
        }
        self.choice.insert((tree_node(self.b, history), prefix), best.1);
        best.0
    }

    /// Walks the optimal choices from the root into breadth-first values.
    /// Nodes no sample path reaches keep control 0.
    fn policy(&self) -> Vec<usize> {
        let mut values = vec![0; tree_size(self.b, self.k)];
        let mut frontier: Vec<(Vec<usize>, usize)> = vec![(Vec::new(), 0)];
        for _ in 0..self.k {
            let mut next = Vec::new();
            for (h, prefix) in frontier {
                let node = tree_node(self.b, &h);
                let a = self.choice.get(&(node, prefix)).copied().unwrap_or(0);
                values[node] = a;
                for br in 0..self.b {
                    let mut h2 = h.clone();
                    h2.push(br);
                    next.push((h2, prefix * self.a + a));
                }
            }
            frontier = next;
        }
        values
    }
}

/// Estimates `v(t, μ) = inf_α J(t, μ, α)` over controls that are constant on
/// the intervals of `breakpoints` and adapted to the signs of the
/// common-noise increments. Every path is simulated under every open-loop
/// sequence in `A^K`; the tree optimum then follows by backward induction on
/// the sample averages.
pub fn value_estimate(model: &FilterModel, mu0: &ParticleMeasure, breakpoints: &[f64], cfg: &McConfig) -> Result<ValueEstimate> {
    if mu0.dim() != model.dim {
        return Err(Error::DimensionMismatch { expected: model.dim, got: mu0.dim() });
    }
    value_from_state(model, &ParticleState::new(mu0, cfg.n_particles)?, breakpoints, cfg)
}

pub fn value_from_state(model: &FilterModel, state: &ParticleState, breakpoints: &[f64], cfg: &McConfig) -> Result<ValueEstimate> {
    if breakpoints.is_empty() {
        return Err(Error::InvalidParameter("breakpoints must be nonempty".into()));
    }
    if breakpoints.len() == 1 {
        // No time left: the value is the terminal cost.
        let g = state.integrate(|x| model.g(x));
        return Ok(ValueEstimate {
            v_hat: g,
            std_error: 0.0,
            open_loop_value: g,
            open_loop_best: Vec::new(),
            gap_bound: 0.0,
            policy: ControlPath::tree(breakpoints.to_vec(), Vec::new()),
            n_sequences: 1,
        });
    }
    if cfg.n_paths == 0 {
        return Err(Error::InvalidParameter("n_paths must be positive".into()));
    }
    let k = breakpoints.len() - 1;
    let (a, b) = (model.n_controls(), branching(model.dim_w));
    let n_seq = a.checked_pow(k as u32).unwrap_or(usize::MAX);
    let nodes = n_seq.saturating_mul(tree_size(b, k).max(1));
    if nodes > cfg.node_budget {
        return Err(Error::TreeTooLarge { nodes, budget: cfg.node_budget });
    }
    ControlPath::open_loop(breakpoints.to_vec(), vec![0; k]).validate(a, model.dim_w)?;

    let runs: Vec<Vec<(f64, Vec<usize>)>> = (0..n_seq)
        .into_par_iter()
        .map(|s| {
            let control = ControlPath::open_loop(breakpoints.to_vec(), decode(s, a, k));
            (0..cfg.n_paths as u64)
                .map(|p| path_cost(model, state.clone(), &control, cfg.dt, path_seed(cfg.seed, p)).map(|o| (o.total(), o.history)))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let costs: Vec<Vec<f64>> = runs.iter().map(|r| r.iter().map(|c| c.0).collect()).collect();
    let histories: Vec<Vec<usize>> = runs[0].iter().map(|c| c.1.clone()).collect();

    let mut open_loop = (f64::INFINITY, 0);
    for (s, c) in costs.iter().enumerate() {
        let m = mean_and_stderr(c).0;
        if m < open_loop.0 {
            open_loop = (m, s);
        }
    }

    let paths: Vec<usize> = (0..cfg.n_paths).collect();
    let mut dp = TreeDp { a, b, k, costs: &costs, histories: &histories, choice: HashMap::new() };
    dp.solve(&[], 0, &paths);
    let values = dp.policy();
    let policy = ControlPath::tree(breakpoints.to_vec(), values);
    let per_path: Vec<f64> = (0..cfg.n_paths)
        .map(|p| {
            let seq: Vec<usize> = (0..k).map(|st| policy.control(st, &histories[p], model.dim_w)).collect();
            let idx = seq.iter().fold(0, |acc, s| acc * a + s);
            costs[idx][p]
        })
        .collect();
    let (v_hat, std_error) = mean_and_stderr(&per_path);
    Ok(ValueEstimate {
        v_hat,
        std_error,
        open_loop_value: open_loop.0,
        open_loop_best: decode(open_loop.1, a, k),
        gap_bound: open_loop.0 - v_hat,
        policy,
        n_sequences: n_seq,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppConfig {
    pub t: f64,
    pub r: f64,
    /// Breakpoints strictly between `r` and `T`.
    #[serde(default)]
    pub later: Vec<f64>,
    pub outer: McConfig,
    /// Paths of each nested value estimate at time `r`.
    pub inner_paths: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DppReport {
    pub lhs: Estimate,
    /// `E[∫_t^r f ds + v̂(r, m_r)]` for each stage-one control.
    pub rhs_per_control: Vec<Estimate>,
    pub rhs: Estimate,
    pub gap: f64,
    pub combined_std_error: f64,
    /// `|gap| ≤ max(3 · combined error, 1e-9)`.
    pub within_error: bool,
}

/// Compares `v̂(t, μ)` with `min_a E[∫_t^r f(·, a) ds + v̂(r, m_r)]`, the
/// dynamic programming principle at the deterministic time `r` with a stage
/// control constant on `[t, r]`.
pub fn dpp_check(model: &FilterModel, mu0: &ParticleMeasure, cfg: &DppConfig) -> Result<DppReport> {
    let horizon = model.horizon;
    if !(cfg.t < cfg.r && cfg.r <= horizon) {
        return Err(Error::InvalidParameter("need t < r <= T".into()));
    }
    if cfg.later.iter().any(|&s| !(s > cfg.r && s < horizon)) {
        return Err(Error::InvalidParameter("later breakpoints must lie in (r, T)".into()));
    }
    let mut inner_bp = vec![cfg.r];
    inner_bp.extend(&cfg.later);
    if cfg.r < horizon {
        inner_bp.push(horizon);
    }
    let mut full = vec![cfg.t];
    full.extend(&inner_bp);

    let lhs_v = value_estimate(model, mu0, &full, &cfg.outer)?;
    let lhs = Estimate { mean: lhs_v.v_hat, std_error: lhs_v.std_error, n: cfg.outer.n_paths };

    let state = ParticleState::new(mu0, cfg.outer.n_particles)?;
    let inner_cfg = |p: u64| McConfig { n_paths: cfg.inner_paths, seed: derive_seed(path_seed(cfg.outer.seed, p), 0xD0_11), ..cfg.outer };
    let rhs_per_control: Vec<Estimate> = (0..model.n_controls())
        .map(|a| {
            let stage = ControlPath::open_loop(vec![cfg.t, cfg.r], vec![a]);
            let samples: Vec<f64> = (0..cfg.outer.n_paths as u64)
                .into_par_iter()
                .map(|p| {
                    let out = path_cost(model, state.clone(), &stage, cfg.outer.dt, path_seed(cfg.outer.seed, p))?;
                    let inner = value_from_state(model, &out.state.restart(), &inner_bp, &inner_cfg(p))?;
                    Ok(out.running + inner.v_hat)
                })
                .collect::<Result<_>>()?;
            Ok(Estimate::from_samples(&samples))
        })
        .collect::<Result<_>>()?;
    let rhs = *rhs_per_control
        .iter()
        .min_by(|x, y| x.mean.total_cmp(&y.mean))
        .expect("nonempty control set");
    let gap = lhs.mean - rhs.mean;
    let combined_std_error = (lhs.std_error.powi(2) + rhs.std_error.powi(2)).sqrt();
    Ok(DppReport {
        lhs,
        rhs_per_control,
        rhs,
        gap,
        combined_std_error,
        within_error: gap.abs() <= (3.0 * combined_std_error).max(1e-9),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LipschitzPair {
    pub i: usize,
    pub j: usize,
    pub value_gap: f64,
    pub rho_f: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValueLipschitzReport {
    pub values: Vec<Estimate>,
    pub pairs: Vec<LipschitzPair>,
    pub max_ratio: f64,
}

/// Empirical `|v̂(t, μ_i) − v̂(t, μ_j)| / ρ_F(μ_i, μ_j)` over a family of
/// initial measures, all on common seeds.
pub fn value_lipschitz(
    model: &FilterModel,
    family: &[ParticleMeasure],
    breakpoints: &[f64],
    cfg: &McConfig,
    grid: &QuadratureGrid,
) -> Result<ValueLipschitzReport> {
    let values: Vec<Estimate> = family
        .iter()
        .map(|mu| value_estimate(model, mu, breakpoints, cfg).map(|v| Estimate { mean: v.v_hat, std_error: v.std_error, n: cfg.n_paths }))
        .collect::<Result<_>>()?;
    let mut pairs = Vec::new();
    for i in 0..family.len() {
        for j in (i + 1)..family.len() {
            let r = rho_f(&family[i], &family[j], grid)?;
            let gap = (values[i].mean - values[j].mean).abs();
            let ratio = if r > 0.0 { gap / r } else { 0.0 };
            pairs.push(LipschitzPair { i, j, value_gap: gap, rho_f: r, ratio });
        }
    }
    let max_ratio = pairs.iter().map(|p| p.ratio).fold(0.0, f64::max);
    Ok(ValueLipschitzReport { values, pairs, max_ratio })
}
